//! Fidelity and perceptual metrics, self-ensemble inference and dataset
//! reports. Metrics are computed on RGB images in `[0, 255]`, borders
//! included.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{list_images, read_manifest, Dihedral};
use crate::degradation::{estimate_sigma, gaussian_kernel};
use crate::error::{Error, Result};
use crate::imageio::{read_rgb, to_unit};
use crate::losses::FeatureExtractor;
use crate::sr_model::{clip_output, SrGenerator, PIXEL_MAX};
use crate::tensor::{Real, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB; identical images give `+inf`.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.check_same_shape(b)?;
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    if se == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = se / a.numel() as f64;
    Ok(10.0 * (PIXEL_MAX * PIXEL_MAX / mse).log10())
}

/// Metric value as written to reports: `inf` for the identical-image
/// sentinel.
pub fn format_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        v.to_string()
    }
}

pub fn parse_metric(s: &str) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        _ => s.parse().map_err(|_| Error::invalid(format!("bad metric value {s:?}"))),
    }
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..wo {
            tmp[y * wo + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = k.iter().enumerate().map(|(i, a)| a * tmp[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Windowed SSIM (11x11 Gaussian, sigma 1.5, dynamic range 255) averaged
/// over every channel and every fully contained window.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.check_same_shape(b)?;
    let (n, c, h, w) = a.try_dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let k = gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW);
    let c1 = (SSIM_K1 * PIXEL_MAX).powi(2);
    let c2 = (SSIM_K2 * PIXEL_MAX).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..n * c {
        let pa: Vec<f64> = a.data()[p * h * w..(p + 1) * h * w].iter().map(|v| v.as_f64()).collect();
        let pb: Vec<f64> = b.data()[p * h * w..(p + 1) * h * w].iter().map(|v| v.as_f64()).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let saa = filter_valid(&prod(&pa, &pa), h, w, &k);
        let sbb = filter_valid(&prod(&pb, &pb), h, w, &k);
        let sab = filter_valid(&prod(&pa, &pb), h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        count += mu_a.len();
    }
    Ok(total / count as f64)
}

/// Feature-space distance: features are unit-normalised across channels at
/// every position, squared differences are summed over channels, averaged
/// over positions and then over tapped layers. Inputs are in `[0, 255]`.
pub fn perceptual_distance<T: Real, F: FeatureExtractor<T> + ?Sized>(a: &Tensor<T>, b: &Tensor<T>, fx: &F) -> Result<f64> {
    a.check_same_shape(b)?;
    let fa = fx.features(&to_unit(a))?;
    let fb = fx.features(&to_unit(b))?;
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let (n, c, h, w) = x.try_dims4()?;
        let p = h * w;
        let mut layer = 0.0;
        for item in 0..n {
            let (xs, ys) = (x.item(item), y.item(item));
            for pos in 0..p {
                let norm = |s: &[T]| (0..c).map(|ch| s[ch * p + pos].as_f64().powi(2)).sum::<f64>().sqrt() + 1e-10;
                let (nx, ny) = (norm(xs), norm(ys));
                layer += (0..c)
                    .map(|ch| (xs[ch * p + pos].as_f64() / nx - ys[ch * p + pos].as_f64() / ny).powi(2))
                    .sum::<f64>();
            }
        }
        total += layer / (n * p) as f64;
    }
    Ok(total / fa.len() as f64)
}

/// Runs `model` on all eight dihedral transforms of `lr`, undoes each
/// transform on the output, averages and clips to `[0, 255]`.
pub fn self_ensemble<T: Real>(lr: &Tensor<T>, mut model: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Tensor<T>> {
    let mut acc: Option<Tensor<T>> = None;
    for d in Dihedral::all() {
        let y = d.inverse().apply(&model(&d.apply(lr))?);
        match &mut acc {
            Some(a) => {
                a.check_same_shape(&y)?;
                a.add_assign(&y);
            }
            None => acc = Some(y),
        }
    }
    let mean = acc.expect("eight transforms").scale(T::lit(1.0 / 8.0));
    Ok(clip_output(&mean))
}

/// Super-resolves one `[1, 3, h, w]` image with a noise level estimated once
/// from the input, optionally with the self-ensemble.
pub fn super_resolve<T: Real>(g: &SrGenerator<T>, lr: &Tensor<T>, ensemble: bool) -> Result<Tensor<T>> {
    let sigma = [estimate_sigma(lr)?];
    if ensemble {
        self_ensemble(lr, |x| g.infer(x, &sigma))
    } else {
        g.infer(lr, &sigma)
    }
}

/// One evaluation item: a named LR input and its HR reference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub name: String,
    pub lr: PathBuf,
    pub hr: PathBuf,
}

/// Pairs listed in a synthesis manifest.
pub fn pairs_from_manifest(path: &Path) -> Result<Vec<EvalPair>> {
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(read_manifest(path)?
        .into_iter()
        .map(|r| EvalPair {
            name: Path::new(&r.hr_path)
                .file_name()
                .map_or_else(|| r.hr_path.clone(), |n| n.to_string_lossy().into_owned()),
            lr: base.join(&r.lr_path),
            hr: base.join(&r.hr_path),
        })
        .collect())
}

/// Files with the same name in both directories, in name order.
pub fn pairs_from_dirs(lr_dir: &Path, hr_dir: &Path) -> Result<Vec<EvalPair>> {
    let mut out = Vec::new();
    for hr in list_images(hr_dir)? {
        let name = hr.file_name().expect("listed files have names").to_string_lossy().into_owned();
        let lr = lr_dir.join(&name);
        if lr.exists() {
            out.push(EvalPair { name, lr, hr });
        } else {
            log::warn!("no low-resolution counterpart for {name}");
        }
    }
    if out.is_empty() {
        return Err(Error::MissingData(format!(
            "no matching images in {} and {}",
            lr_dir.display(),
            hr_dir.display()
        )));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (zero for a single row).
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        if !mean.is_finite() || values.len() < 2 {
            return Self { mean, std: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub skipped: usize,
    pub psnr_db: Aggregate,
    pub ssim: Aggregate,
    pub perceptual: Aggregate,
    pub model: String,
    pub dataset: String,
    pub extractor: String,
    pub color_space: String,
    pub self_ensemble: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub skipped: Vec<String>,
    pub model: String,
    pub dataset: String,
    pub extractor: String,
    pub self_ensemble: bool,
}

impl MetricReport {
    pub fn summary(&self) -> MetricSummary {
        let col = |f: fn(&MetricRow) -> f64| Aggregate::of(&self.rows.iter().map(f).collect::<Vec<_>>());
        MetricSummary {
            count: self.rows.len(),
            skipped: self.skipped.len(),
            psnr_db: col(|r| r.psnr_db),
            ssim: col(|r| r.ssim),
            perceptual: col(|r| r.perceptual),
            model: self.model.clone(),
            dataset: self.dataset.clone(),
            extractor: self.extractor.clone(),
            color_space: "RGB".into(),
            self_ensemble: self.self_ensemble,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,psnr_db,ssim,perceptual\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{},{}\n",
                r.name,
                format_metric(r.psnr_db),
                format_metric(r.ssim),
                format_metric(r.perceptual)
            );
        }
        s
    }

    /// Table-style one-liner: `PSNR / SSIM / perceptual`.
    pub fn headline(&self) -> String {
        let s = self.summary();
        format!(
            "PSNR {} dB / SSIM {:.4} / perceptual {:.4} ({}, {} images{})",
            if s.psnr_db.mean.is_finite() { format!("{:.2}", s.psnr_db.mean) } else { format_metric(s.psnr_db.mean) },
            s.ssim.mean,
            s.perceptual.mean,
            s.extractor,
            s.count,
            if s.self_ensemble { ", self-ensemble" } else { "" }
        )
    }

    /// Writes `metrics.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("metrics.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let path = dir.join("summary.json");
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let json = serde_json::to_string_pretty(&self.summary()).expect("summary serialises");
        writeln!(f, "{json}").map_err(|e| Error::io(&path, e))
    }
}

/// Reads per-image rows back from a `metrics.csv`.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.rsplitn(4, ',').collect();
            if f.len() != 4 {
                return Err(Error::invalid(format!("bad metrics row {l:?}")));
            }
            Ok(MetricRow {
                name: f[3].to_string(),
                psnr_db: parse_metric(f[2])?,
                ssim: parse_metric(f[1])?,
                perceptual: parse_metric(f[0])?,
            })
        })
        .collect()
}

/// Evaluates `upscale` on every pair, in order. Pairs whose images cannot be
/// read are skipped with a warning and left out of the aggregates.
pub fn evaluate_dataset<F: FeatureExtractor<f32> + ?Sized>(
    pairs: &[EvalPair],
    mut upscale: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
    fx: &F,
    meta: (&str, &str, bool),
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::MissingData("nothing to evaluate".into()));
    }
    let (model, dataset, self_ensemble) = meta;
    let mut rows = Vec::with_capacity(pairs.len());
    let mut skipped = Vec::new();
    for p in pairs {
        let images = read_rgb::<f32>(&p.lr).and_then(|lr| Ok((lr, read_rgb::<f32>(&p.hr)?)));
        let (lr, hr) = match images {
            Ok(v) => v,
            Err(e) => {
                log::warn!("skipping {}: {e}", p.name);
                skipped.push(p.name.clone());
                continue;
            }
        };
        let sr = upscale(&lr)?;
        if sr.shape() != hr.shape() {
            return Err(Error::shape(format!(
                "{}: output {:?} vs reference {:?}",
                p.name,
                sr.shape(),
                hr.shape()
            )));
        }
        rows.push(MetricRow {
            name: p.name.clone(),
            psnr_db: psnr(&sr, &hr)?,
            ssim: ssim(&sr, &hr)?,
            perceptual: perceptual_distance(&sr, &hr, fx)?,
        });
    }
    Ok(MetricReport {
        rows,
        skipped,
        model: model.to_string(),
        dataset: dataset.to_string(),
        extractor: fx.name().to_string(),
        self_ensemble,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::{resize_to, ResampleKernel};
    use crate::losses::ConvFeatures;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 3, h, w], |_| rng.gen_range(0.0..255.0))
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::<f64>::full(&[1, 3, 8, 8], 100.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 16.0);
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), 20.0 * (255.0f64 / 16.0).log10(), epsilon = 1e-12);
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), 24.05, epsilon = 5e-3);
        let z = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        assert_abs_diff_eq!(psnr(&z, &z.map(|_| 255.0)).unwrap(), 0.0, epsilon = 1e-12);
        assert!(psnr(&z, &a).is_err());
        assert_eq!(format_metric(f64::INFINITY), "inf");
        assert_eq!(parse_metric("inf").unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_closed_forms() {
        let a = Tensor::<f64>::full(&[1, 3, 16, 16], 100.0);
        let b = Tensor::<f64>::full(&[1, 3, 16, 16], 110.0);
        let c1 = (0.01f64 * 255.0).powi(2);
        let want = (2.0 * 100.0 * 110.0 + c1) / (100.0f64.powi(2) + 110.0f64.powi(2) + c1);
        assert_abs_diff_eq!(ssim(&a, &b).unwrap(), want, epsilon = 1e-12);
        assert_abs_diff_eq!(ssim(&a, &b).unwrap(), 0.9955, epsilon = 1e-4);
        let r = random(1, 20, 24);
        assert_abs_diff_eq!(ssim(&r, &r).unwrap(), 1.0, epsilon = 1e-12);
        assert!(ssim(&random(0, 10, 30), &random(1, 10, 30)).is_err());
    }

    #[test]
    fn metrics_are_symmetric() {
        let (a, b) = (random(2, 16, 16), random(3, 16, 16));
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert_abs_diff_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap(), epsilon = 1e-12);
        let fx = ConvFeatures::<f64>::fallback();
        assert_abs_diff_eq!(
            perceptual_distance(&a, &b, &fx).unwrap(),
            perceptual_distance(&b, &a, &fx).unwrap(),
            epsilon = 1e-12
        );
        assert_eq!(perceptual_distance(&a, &a, &fx).unwrap(), 0.0);
    }

    #[test]
    fn perceptual_distance_grows_with_noise() {
        let img = Tensor::<f64>::from_fn(&[1, 3, 32, 32], |i| 128.0 + 60.0 * ((i % 32) as f64 * 0.4).sin());
        let fx = ConvFeatures::<f64>::fallback();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise: Vec<f64> = (0..img.numel())
            .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
            .collect();
        let d: Vec<f64> = [2.0, 8.0, 20.0]
            .iter()
            .map(|s| {
                let noisy = Tensor::from_vec(img.shape(), img.data().iter().zip(&noise).map(|(v, n)| v + s * n).collect()).unwrap();
                perceptual_distance(&img, &noisy, &fx).unwrap()
            })
            .collect();
        assert!(d[0] < d[1] && d[1] < d[2], "{d:?}");
    }

    #[test]
    fn ensemble_of_bicubic_is_bicubic() {
        let lr = random(4, 12, 12);
        let up = |x: &Tensor<f64>| {
            let (_, _, h, w) = x.dims4();
            resize_to(x, 4 * h, 4 * w, ResampleKernel::Bicubic, true)
        };
        let single = clip_output(&up(&lr).unwrap());
        let ens = self_ensemble(&lr, up).unwrap();
        assert!(ens.sub(&single).unwrap().max_abs() < 1e-4);
    }

    #[test]
    fn ensemble_is_the_mean_of_aligned_predictions() {
        let lr = random(5, 6, 6);
        // position-dependent model so the eight predictions differ
        let model = |x: &Tensor<f64>| Ok(Tensor::from_fn(x.shape(), |i| x.data()[i] * 0.5 + (i % 7) as f64 * 9.0));
        let ens = self_ensemble(&lr, model).unwrap();
        let mut mean = Tensor::<f64>::zeros(lr.shape());
        for d in Dihedral::all() {
            mean.add_assign(&d.inverse().apply(&model(&d.apply(&lr)).unwrap()));
        }
        let mean = clip_output(&mean.map(|v| v / 8.0));
        assert!(ens.sub(&mean).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn aggregates_and_csv_round_trip() {
        let rows = vec![
            MetricRow { name: "a.png".into(), psnr_db: 30.0, ssim: 0.9, perceptual: 0.1 },
            MetricRow { name: "b.png".into(), psnr_db: 20.0, ssim: 0.7, perceptual: 0.3 },
            MetricRow { name: "c,d.png".into(), psnr_db: f64::INFINITY, ssim: 1.0, perceptual: 0.0 },
        ];
        let report = MetricReport {
            rows: rows.clone(),
            skipped: vec![],
            model: "m".into(),
            dataset: "d".into(),
            extractor: "x".into(),
            self_ensemble: false,
        };
        let s = report.summary();
        assert_eq!(s.psnr_db.mean, f64::INFINITY);
        assert_abs_diff_eq!(s.ssim.mean, 2.6 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.ssim.std, (((0.9f64 - 2.6 / 3.0).powi(2) + (0.7f64 - 2.6 / 3.0).powi(2) + (1.0f64 - 2.6 / 3.0).powi(2)) / 2.0).sqrt(), epsilon = 1e-12);
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        assert_eq!(read_metrics_csv(&dir.path().join("metrics.csv")).unwrap(), rows);
        assert!(std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap().contains(",inf,"));
    }

    #[test]
    fn aggregates_ignore_row_order() {
        let rows: Vec<MetricRow> = (0..7)
            .map(|k| MetricRow { name: format!("{k}"), psnr_db: 20.0 + k as f64 * 1.3, ssim: 0.5 + k as f64 * 0.05, perceptual: 0.1 * k as f64 })
            .collect();
        let report = |rows: Vec<MetricRow>| MetricReport {
            rows,
            skipped: vec![],
            model: String::new(),
            dataset: String::new(),
            extractor: String::new(),
            self_ensemble: false,
        };
        let mut shuffled = rows.clone();
        shuffled.reverse();
        shuffled.swap(1, 4);
        let (a, b) = (report(rows).summary(), report(shuffled).summary());
        assert_abs_diff_eq!(a.psnr_db.mean, b.psnr_db.mean, epsilon = 1e-12);
        assert_abs_diff_eq!(a.ssim.std, b.ssim.std, epsilon = 1e-12);
        assert_abs_diff_eq!(a.perceptual.mean, b.perceptual.mean, epsilon = 1e-12);
    }
}

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{derive_seed, seeded_rng, Provenance};
use crate::degradation::{degrade, resize_to, DegradationSpec, ResampleKernel};
use crate::error::{Error, Result};
use crate::imageio::{from_unit, read_rgb, to_unit, write_rgb};
use crate::lr_model::LrGenerator;
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// One line of the pair manifest. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub lr_path: String,
    pub hr_path: String,
    pub provenance: Provenance,
    pub seed: u64,
}

/// Source of the low-resolution member.
pub enum PairGenerator<'a> {
    Bicubic { scale: usize },
    Classical(DegradationSpec),
    /// A trained degradation generator applied to the bicubic downscale.
    Learned { model: &'a LrGenerator<f32>, scale: usize },
}

impl PairGenerator<'_> {
    pub fn scale(&self) -> usize {
        match self {
            PairGenerator::Bicubic { scale } | PairGenerator::Learned { scale, .. } => *scale,
            PairGenerator::Classical(spec) => spec.scale,
        }
    }

    pub fn provenance(&self) -> Provenance {
        match self {
            PairGenerator::Bicubic { .. } => Provenance::Bicubic,
            PairGenerator::Classical(_) => Provenance::ClassicalSpec,
            PairGenerator::Learned { .. } => Provenance::LearnedGLr,
        }
    }

    /// LR image for an HR image already cropped to a multiple of the scale.
    pub fn make_lr(&self, hr: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>> {
        let (_, _, h, w) = hr.try_dims4()?;
        let s = self.scale();
        match self {
            PairGenerator::Bicubic { .. } => resize_to(hr, h / s, w / s, ResampleKernel::Bicubic, true),
            PairGenerator::Classical(spec) => degrade(hr, spec, &mut seeded_rng(seed, 0)),
            PairGenerator::Learned { model, .. } => {
                let down = resize_to(hr, h / s, w / s, ResampleKernel::Bicubic, true)?;
                Ok(from_unit(&model.infer(&to_unit(&down))?))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthReport {
    pub written: usize,
    pub skipped: Vec<PathBuf>,
    pub manifest: PathBuf,
}

/// Writes `lr/<name>.png` and `hr/<name>.png` for every readable HR image and
/// a line-delimited JSON manifest. Image `i` uses seed
/// `derive_seed(seed, i)`, so results do not depend on processing order.
/// Unreadable inputs are skipped with a warning.
pub fn synthesize_pairs(
    hr_paths: &[PathBuf],
    generator: &PairGenerator<'_>,
    out_dir: &Path,
    seed: u64,
) -> Result<SynthReport> {
    let s = generator.scale();
    if s == 0 {
        return Err(Error::Config("pair synthesis scale must be at least 1".into()));
    }
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, path) in hr_paths.iter().enumerate() {
        let hr = match read_rgb::<f32>(path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push(path.clone());
                continue;
            }
        };
        let (_, _, h, w) = hr.dims4();
        if h < s || w < s {
            log::warn!("skipping {}: {h}x{w} smaller than scale {s}", path.display());
            skipped.push(path.clone());
            continue;
        }
        let hr = hr.crop(0, 0, h / s * s, w / s * s)?;
        let item_seed = derive_seed(seed, i as u64);
        let lr = generator.make_lr(&hr, item_seed)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let name = format!("{i:05}_{stem}.png");
        let lr_rel = format!("lr/{name}");
        let hr_rel = format!("hr/{name}");
        write_rgb(&out_dir.join(&lr_rel), &lr)?;
        write_rgb(&out_dir.join(&hr_rel), &hr)?;
        records.push(ManifestRecord {
            lr_path: lr_rel,
            hr_path: hr_rel,
            provenance: generator.provenance(),
            seed: item_seed,
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = out_dir.join(MANIFEST_NAME);
    let mut file = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    for r in &records {
        let line = serde_json::to_string(r).expect("manifest records serialise");
        writeln!(file, "{line}").map_err(|e| Error::io(&manifest, e))?;
    }
    Ok(SynthReport {
        written: records.len(),
        skipped,
        manifest,
    })
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingData(format!("cannot read manifest {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PairDataset;
    use crate::lr_model::LrGeneratorConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn write_inputs(dir: &Path, n: usize, size: usize) -> Vec<PathBuf> {
        (0..n)
            .map(|k| {
                let p = dir.join(format!("img{k}.png"));
                let img = Tensor::<f32>::from_fn(&[1, 3, size, size], |i| ((i * (k + 3)) % 256) as f32);
                write_rgb(&p, &img).unwrap();
                p
            })
            .collect()
    }

    #[test]
    fn bicubic_pairs_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut inputs = write_inputs(dir.path(), 3, 64);
        let bad = dir.path().join("broken.png");
        std::fs::write(&bad, b"not an image").unwrap();
        inputs.insert(1, bad.clone());
        let out = dir.path().join("pairs");
        let report = synthesize_pairs(&inputs, &PairGenerator::Bicubic { scale: 4 }, &out, 7).unwrap();
        assert_eq!(report.written, 3);
        assert_eq!(report.skipped, vec![bad]);
        let records = read_manifest(&report.manifest).unwrap();
        assert_eq!(records.len(), 3);
        assert!(records.iter().all(|r| r.provenance == Provenance::Bicubic));
        let lr = read_rgb::<f32>(&out.join(&records[0].lr_path)).unwrap();
        assert_eq!(lr.shape(), [1, 3, 16, 16]);
        let ds = PairDataset::<f32>::from_manifest(&report.manifest).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(records[2].seed, derive_seed(7, 3));
    }

    #[test]
    fn synthesis_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let inputs = write_inputs(dir.path(), 2, 32);
        let spec = DegradationSpec {
            sigma: 5.0,
            jpeg_quality: Some(60),
            ..DegradationSpec::default()
        };
        let gen = PairGenerator::Classical(spec);
        let a = synthesize_pairs(&inputs, &gen, &dir.path().join("a"), 1).unwrap();
        let b = synthesize_pairs(&inputs, &gen, &dir.path().join("b"), 1).unwrap();
        for r in read_manifest(&a.manifest).unwrap() {
            let x = std::fs::read(dir.path().join("a").join(&r.lr_path)).unwrap();
            let y = std::fs::read(dir.path().join("b").join(&r.lr_path)).unwrap();
            assert_eq!(x, y);
        }
        assert_eq!(std::fs::read(a.manifest).unwrap(), std::fs::read(b.manifest).unwrap());
    }

    #[test]
    fn learned_generator_output_shape() {
        let dir = tempfile::tempdir().unwrap();
        let inputs = write_inputs(dir.path(), 1, 32);
        let cfg = LrGeneratorConfig {
            num_blocks: 1,
            channels: 4,
            ..LrGeneratorConfig::default()
        };
        let model = LrGenerator::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let gen = PairGenerator::Learned { model: &model, scale: 2 };
        let report = synthesize_pairs(&inputs, &gen, &dir.path().join("o"), 0).unwrap();
        let r = &read_manifest(&report.manifest).unwrap()[0];
        assert_eq!(r.provenance, Provenance::LearnedGLr);
        let lr = read_rgb::<f32>(&dir.path().join("o").join(&r.lr_path)).unwrap();
        assert_eq!(lr.shape(), [1, 3, 16, 16]);
    }
}

//! Mixture of augmentations: one technique, drawn uniformly from the enabled
//! set, is applied to a whole batch. Pair-aware techniques act on aligned
//! LR/HR regions; the partner of each item is another item of the batch.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::PatchPair;
use crate::degradation::resize_to;
use crate::degradation::ResampleKernel;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoaTechnique {
    Blend,
    RgbPermutation,
    Mixup,
    Cutout,
    Cutmix,
    Cutmixup,
    Cutblur,
}

impl MoaTechnique {
    pub const ALL: [MoaTechnique; 7] = [
        MoaTechnique::Blend,
        MoaTechnique::RgbPermutation,
        MoaTechnique::Mixup,
        MoaTechnique::Cutout,
        MoaTechnique::Cutmix,
        MoaTechnique::Cutmixup,
        MoaTechnique::Cutblur,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoaConfig {
    pub techniques: Vec<MoaTechnique>,
    /// Blend weight range of the original image.
    pub blend_alpha: (f64, f64),
    /// Symmetric Beta shape for the mixup weight.
    pub mixup_beta: f64,
    /// Fraction of LR pixel sites zeroed by cutout.
    pub cutout_ratio: f64,
    /// Range of the box area fraction for the cut techniques.
    pub cut_area: (f64, f64),
    /// Upper end of the intensity scale (solid blend colours live in
    /// `[0, max_value]`).
    pub max_value: f64,
}

impl Default for MoaConfig {
    fn default() -> Self {
        Self {
            techniques: MoaTechnique::ALL.to_vec(),
            blend_alpha: (0.2, 0.8),
            mixup_beta: 1.2,
            cutout_ratio: 0.1,
            cut_area: (0.1, 0.4),
            max_value: 255.0,
        }
    }
}

impl MoaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.techniques.is_empty() {
            return Err(Error::Config("mixture of augmentations needs at least one technique".into()));
        }
        let (a, b) = self.blend_alpha;
        if !(0.0..=1.0).contains(&a) || !(a..=1.0).contains(&b) {
            return Err(Error::Config(format!("blend_alpha {:?} must be a sub-range of [0, 1]", self.blend_alpha)));
        }
        let (a, b) = self.cut_area;
        if !(a > 0.0 && a <= b && b <= 1.0) {
            return Err(Error::Config(format!("cut_area {:?} must be a sub-range of (0, 1]", self.cut_area)));
        }
        if !(self.mixup_beta > 0.0) {
            return Err(Error::Config("mixup_beta must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cutout_ratio) {
            return Err(Error::Config("cutout_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Axis-aligned box in LR coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl CutBox {
    /// Box covering roughly `area` of an `h x w` image with the image's
    /// aspect ratio.
    pub fn random<R: Rng + ?Sized>(h: usize, w: usize, area: (f64, f64), rng: &mut R) -> Self {
        let a = if area.0 < area.1 { rng.gen_range(area.0..area.1) } else { area.0 };
        let side = a.sqrt();
        let bh = ((h as f64 * side).round() as usize).clamp(1, h);
        let bw = ((w as f64 * side).round() as usize).clamp(1, w);
        Self {
            y0: rng.gen_range(0..=h - bh),
            x0: rng.gen_range(0..=w - bw),
            h: bh,
            w: bw,
        }
    }

    pub fn scaled(self, s: usize) -> Self {
        Self {
            y0: self.y0 * s,
            x0: self.x0 * s,
            h: self.h * s,
            w: self.w * s,
        }
    }
}

fn lerp<T: Real>(a: &Tensor<T>, b: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    let l = T::lit(lambda);
    let m = T::lit(1.0 - lambda);
    a.zip_map(b, |x, y| l * x + m * y)
}

fn copy_box<T: Real>(dst: &mut Tensor<T>, src: &Tensor<T>, b: CutBox) -> Result<()> {
    dst.paste(&src.crop(b.y0, b.x0, b.h, b.w)?, b.y0, b.x0)
}

/// `alpha * img + (1 - alpha) * colour` on both members.
pub fn blend<T: Real>(pair: &PatchPair<T>, alpha: f64, colour: [f64; 3]) -> Result<PatchPair<T>> {
    let mix = |img: &Tensor<T>| -> Result<Tensor<T>> {
        let (_, c, h, w) = img.try_dims4()?;
        if c != 3 {
            return Err(Error::shape("blend expects RGB"));
        }
        let mut out = img.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / (h * w)) % 3;
            *v = T::lit(alpha) * *v + T::lit((1.0 - alpha) * colour[ch]);
        }
        Ok(out)
    };
    PatchPair::new(mix(&pair.lr)?, mix(&pair.hr)?, pair.provenance)
}

/// Reorders channels: output channel `i` is input channel `perm[i]`.
pub fn rgb_permutation<T: Real>(pair: &PatchPair<T>, perm: [usize; 3]) -> Result<PatchPair<T>> {
    let mut sorted = perm;
    sorted.sort_unstable();
    if sorted != [0, 1, 2] {
        return Err(Error::invalid(format!("{perm:?} is not a permutation of RGB")));
    }
    let apply = |img: &Tensor<T>| -> Result<Tensor<T>> {
        let (n, c, h, w) = img.try_dims4()?;
        if c != 3 {
            return Err(Error::shape("rgb permutation expects RGB"));
        }
        let mut out = img.clone();
        let p = h * w;
        for b in 0..n {
            for (dst, &src) in perm.iter().enumerate() {
                let s = img.item(b)[src * p..(src + 1) * p].to_vec();
                out.item_mut(b)[dst * p..(dst + 1) * p].copy_from_slice(&s);
            }
        }
        Ok(out)
    };
    PatchPair::new(apply(&pair.lr)?, apply(&pair.hr)?, pair.provenance)
}

/// Convex combination `lambda * pair + (1 - lambda) * partner`.
pub fn mixup<T: Real>(pair: &PatchPair<T>, partner: &PatchPair<T>, lambda: f64) -> Result<PatchPair<T>> {
    if lambda == 1.0 {
        return Ok(pair.clone());
    }
    PatchPair::new(
        lerp(&pair.lr, &partner.lr, lambda)?,
        lerp(&pair.hr, &partner.hr, lambda)?,
        pair.provenance,
    )
}

/// Zeroes exactly `ceil(ratio * h * w)` distinct pixel sites (all channels)
/// of every LR item. The HR target is left intact.
pub fn cutout<T: Real, R: Rng + ?Sized>(pair: &PatchPair<T>, ratio: f64, rng: &mut R) -> Result<PatchPair<T>> {
    let (n, c, h, w) = pair.lr.try_dims4()?;
    let sites = ((ratio * (h * w) as f64).ceil() as usize).min(h * w);
    let mut lr = pair.lr.clone();
    for b in 0..n {
        let chosen = rand::seq::index::sample(rng, h * w, sites);
        let item = lr.item_mut(b);
        for p in chosen.iter() {
            for ch in 0..c {
                item[ch * h * w + p] = T::zero();
            }
        }
    }
    PatchPair::new(lr, pair.hr.clone(), pair.provenance)
}

/// Pastes the partner's content inside an aligned box of both members.
pub fn cutmix<T: Real>(pair: &PatchPair<T>, partner: &PatchPair<T>, bx: CutBox) -> Result<PatchPair<T>> {
    let s = pair.scale();
    let mut lr = pair.lr.clone();
    let mut hr = pair.hr.clone();
    copy_box(&mut lr, &partner.lr, bx)?;
    copy_box(&mut hr, &partner.hr, bx.scaled(s))?;
    PatchPair::new(lr, hr, pair.provenance)
}

/// Mixup everywhere except an aligned box, which takes the pure partner.
pub fn cutmixup<T: Real>(
    pair: &PatchPair<T>,
    partner: &PatchPair<T>,
    lambda: f64,
    bx: CutBox,
) -> Result<PatchPair<T>> {
    let mixed = mixup(pair, partner, lambda)?;
    cutmix(&mixed, partner, bx)
}

/// Swaps resolution inside (or, with `invert`, outside) a box of the LR
/// member: that region is replaced by a bicubic downscale of the aligned HR
/// content. The HR target is unchanged.
pub fn cutblur<T: Real>(pair: &PatchPair<T>, bx: CutBox, invert: bool) -> Result<PatchPair<T>> {
    let s = pair.scale();
    let (_, _, h, w) = pair.lr.dims4();
    let clean = resize_to(&pair.hr, h, w, ResampleKernel::Bicubic, true)?;
    let lr = if invert {
        let mut lr = clean;
        copy_box(&mut lr, &pair.lr, bx)?;
        lr
    } else {
        let hb = bx.scaled(s);
        let patch = resize_to(&pair.hr.crop(hb.y0, hb.x0, hb.h, hb.w)?, bx.h, bx.w, ResampleKernel::Bicubic, true)?;
        let mut lr = pair.lr.clone();
        lr.paste(&patch, bx.y0, bx.x0)?;
        lr
    };
    PatchPair::new(lr, pair.hr.clone(), pair.provenance)
}

/// Applies one uniformly selected technique to `pair`, drawing any partner
/// content from `partner`.
pub fn moa_augment<T: Real, R: Rng + ?Sized>(
    pair: &PatchPair<T>,
    partner: &PatchPair<T>,
    cfg: &MoaConfig,
    rng: &mut R,
) -> Result<(PatchPair<T>, MoaTechnique)> {
    cfg.validate()?;
    let technique = *cfg.techniques.choose(rng).expect("validated non-empty");
    let (_, _, h, w) = pair.lr.try_dims4()?;
    let out = match technique {
        MoaTechnique::Blend => {
            let (a, b) = cfg.blend_alpha;
            let alpha = if a < b { rng.gen_range(a..b) } else { a };
            let colour = [0; 3].map(|_| rng.gen_range(0.0..=cfg.max_value));
            blend(pair, alpha, colour)?
        }
        MoaTechnique::RgbPermutation => {
            let mut perm = [0, 1, 2];
            perm.shuffle(rng);
            rgb_permutation(pair, perm)?
        }
        MoaTechnique::Mixup => {
            let lambda = beta(cfg.mixup_beta, rng);
            mixup(pair, partner, lambda)?
        }
        MoaTechnique::Cutout => cutout(pair, cfg.cutout_ratio, rng)?,
        MoaTechnique::Cutmix => cutmix(pair, partner, CutBox::random(h, w, cfg.cut_area, rng))?,
        MoaTechnique::Cutmixup => {
            let lambda = beta(cfg.mixup_beta, rng);
            cutmixup(pair, partner, lambda, CutBox::random(h, w, cfg.cut_area, rng))?
        }
        MoaTechnique::Cutblur => {
            let bx = CutBox::random(h, w, cfg.cut_area, rng);
            cutblur(pair, bx, rng.gen_bool(0.5))?
        }
    };
    Ok((out, technique))
}

fn beta<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    Beta::new(shape, shape).expect("validated shape").sample(rng)
}

/// Batch form: each item's partner is the item at a random permutation of
/// the batch.
pub fn moa_augment_batch<T: Real, R: Rng + ?Sized>(
    batch: &PatchPair<T>,
    cfg: &MoaConfig,
    rng: &mut R,
) -> Result<(PatchPair<T>, MoaTechnique)> {
    let n = batch.lr.try_dims4()?.0;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let partner = PatchPair::new(
        Tensor::concat_batch(&perm.iter().map(|&i| batch.lr.batch_item(i)).collect::<Vec<_>>())?,
        Tensor::concat_batch(&perm.iter().map(|&i| batch.hr.batch_item(i)).collect::<Vec<_>>())?,
        batch.provenance,
    )?;
    moa_augment(batch, &partner, cfg, rng)
}

//! Patch sampling, dihedral augmentation, mixture-of-augmentations, image
//! stores, deterministic epoch ordering, and paired-dataset synthesis.

mod moa;
mod synth;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use moa::{
    blend, cutblur, cutmix, cutmixup, cutout, mixup, moa_augment, moa_augment_batch, rgb_permutation, CutBox,
    MoaConfig, MoaTechnique,
};
pub use synth::{read_manifest, synthesize_pairs, ManifestRecord, PairGenerator, SynthReport, MANIFEST_NAME};

use crate::error::{Error, Result};
use crate::imageio::read_rgb;
use crate::tensor::{Real, Tensor};

/// How the low-resolution member of a pair was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Bicubic,
    #[serde(rename = "learned_g_lr")]
    LearnedGLr,
    ClassicalSpec,
}

/// Spatially aligned LR/HR patches: `hr` is exactly `s` times `lr`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair<T> {
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
    pub provenance: Provenance,
}

impl<T: Real> PatchPair<T> {
    pub fn new(lr: Tensor<T>, hr: Tensor<T>, provenance: Provenance) -> Result<Self> {
        pair_scale(&lr, &hr)?;
        Ok(Self { lr, hr, provenance })
    }

    pub fn scale(&self) -> usize {
        pair_scale(&self.lr, &self.hr).expect("validated on construction")
    }
}

/// Integer factor between an LR and an HR tensor.
pub fn pair_scale<T: Real>(lr: &Tensor<T>, hr: &Tensor<T>) -> Result<usize> {
    let (ln, lc, lh, lw) = lr.try_dims4()?;
    let (hn, hc, hh, hw) = hr.try_dims4()?;
    if ln != hn || lc != hc || lh == 0 || lw == 0 {
        return Err(Error::shape(format!("mismatched pair {:?} / {:?}", lr.shape(), hr.shape())));
    }
    let s = hh / lh;
    if s == 0 || hh != s * lh || hw != s * lw {
        return Err(Error::shape(format!(
            "hr {hh}x{hw} is not an integer multiple of lr {lh}x{lw}"
        )));
    }
    Ok(s)
}

/// Random aligned crop: an `lr_patch` square from `lr` and the matching
/// `s * lr_patch` square from `hr` at `s` times the LR offset.
pub fn sample_patch_pair<T: Real, R: Rng + ?Sized>(
    hr: &Tensor<T>,
    lr: &Tensor<T>,
    provenance: Provenance,
    lr_patch: usize,
    rng: &mut R,
) -> Result<PatchPair<T>> {
    let s = pair_scale(lr, hr)?;
    let (_, _, h, w) = lr.dims4();
    if lr_patch == 0 || h < lr_patch || w < lr_patch {
        return Err(Error::invalid(format!(
            "{h}x{w} low-resolution image is smaller than the {lr_patch} patch"
        )));
    }
    let y0 = rng.gen_range(0..=h - lr_patch);
    let x0 = rng.gen_range(0..=w - lr_patch);
    PatchPair::new(
        lr.crop(y0, x0, lr_patch, lr_patch)?,
        hr.crop(s * y0, s * x0, s * lr_patch, s * lr_patch)?,
        provenance,
    )
}

/// Random square crop of a single image.
pub fn random_crop<T: Real, R: Rng + ?Sized>(img: &Tensor<T>, patch: usize, rng: &mut R) -> Result<Tensor<T>> {
    let (_, _, h, w) = img.try_dims4()?;
    if patch == 0 || h < patch || w < patch {
        return Err(Error::invalid(format!("{h}x{w} image is smaller than the {patch} patch")));
    }
    let y0 = rng.gen_range(0..=h - patch);
    let x0 = rng.gen_range(0..=w - patch);
    img.crop(y0, x0, patch, patch)
}

/// Element of the dihedral group of the square: a horizontal flip (when
/// `flip`) followed by `rot` quarter turns counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub flip: bool,
    pub rot: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { flip: false, rot: 0 };

    pub fn all() -> [Dihedral; 8] {
        std::array::from_fn(|i| Dihedral::from_index(i as u8))
    }

    pub fn from_index(i: u8) -> Self {
        Self {
            flip: i >= 4,
            rot: i % 4,
        }
    }

    pub fn index(self) -> u8 {
        self.rot + if self.flip { 4 } else { 0 }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::from_index(rng.gen_range(0..8))
    }

    pub fn inverse(self) -> Self {
        if self.flip {
            self
        } else {
            Self {
                flip: false,
                rot: (4 - self.rot) % 4,
            }
        }
    }

    pub fn apply<T: Real>(self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = if self.flip { flip_h(x) } else { x.clone() };
        for _ in 0..self.rot {
            y = rot90(&y);
        }
        y
    }

    pub fn apply_pair<T: Real>(self, pair: &PatchPair<T>) -> PatchPair<T> {
        PatchPair {
            lr: self.apply(&pair.lr),
            hr: self.apply(&pair.hr),
            provenance: pair.provenance,
        }
    }
}

pub fn flip_h<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (_, _, _, w) = x.dims4();
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(w) {
        row.reverse();
    }
    y
}

/// Quarter turn counter-clockwise: `out[i][j] = in[j][w - 1 - i]`.
pub fn rot90<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let mut y = Tensor::zeros(&[n, c, w, h]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut y.data_mut()[p * h * w..(p + 1) * h * w];
        for i in 0..w {
            for j in 0..h {
                dst[i * h + j] = src[j * w + (w - 1 - i)];
            }
        }
    }
    y
}

/// Same uniformly drawn dihedral transform on both members.
pub fn geometric_augment<T: Real, R: Rng + ?Sized>(pair: &PatchPair<T>, rng: &mut R) -> PatchPair<T> {
    Dihedral::random(rng).apply_pair(pair)
}

/// Order-independent per-item seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(index.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index))
}

/// Deterministic reshuffling sampler: epoch `e` visits a permutation drawn
/// from `derive_seed(seed, e)`. The `(epoch, cursor)` position is enough to
/// resume exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSampler {
    pub len: usize,
    pub seed: u64,
    pub epoch: u64,
    pub cursor: usize,
    #[serde(skip)]
    order: Vec<usize>,
}

impl EpochSampler {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::MissingData("dataset is empty".into()));
        }
        let mut s = Self {
            len,
            seed,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        };
        s.reshuffle();
        Ok(s)
    }

    /// Restores a saved position.
    pub fn at(len: usize, seed: u64, epoch: u64, cursor: usize) -> Result<Self> {
        let mut s = Self::new(len, seed)?;
        s.epoch = epoch;
        s.cursor = cursor.min(len);
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut seeded_rng(self.seed, self.epoch));
    }

    /// Next `batch` indices; an exhausted epoch rolls over into a reshuffled
    /// one.
    pub fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.cursor == self.len {
                self.epoch += 1;
                self.cursor = 0;
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Images either held in memory or read from disk on demand.
#[derive(Clone, Debug)]
pub enum ImageStore<T> {
    Memory(Vec<Tensor<T>>),
    Disk(Vec<PathBuf>),
}

impl<T: Real> ImageStore<T> {
    pub fn len(&self) -> usize {
        match self {
            ImageStore::Memory(v) => v.len(),
            ImageStore::Disk(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Result<Tensor<T>> {
        match self {
            ImageStore::Memory(v) => Ok(v[i].clone()),
            ImageStore::Disk(v) => read_rgb(&v[i]),
        }
    }

    /// Every image file directly inside `dir`, in name order.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        Ok(ImageStore::Disk(list_images(dir)?))
    }

    /// Loads disk-backed images into memory.
    pub fn preload(self) -> Result<Self> {
        match self {
            ImageStore::Disk(paths) => Ok(ImageStore::Memory(
                paths.iter().map(|p| read_rgb(p)).collect::<Result<_>>()?,
            )),
            m => Ok(m),
        }
    }
}

/// PNG/JPEG files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingData(format!("{} is not a directory", dir.display())));
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Paired LR/HR images with a shared provenance.
#[derive(Clone, Debug)]
pub struct PairDataset<T> {
    pub lr: ImageStore<T>,
    pub hr: ImageStore<T>,
    pub provenance: Provenance,
}

impl<T: Real> PairDataset<T> {
    pub fn new(lr: ImageStore<T>, hr: ImageStore<T>, provenance: Provenance) -> Result<Self> {
        if lr.len() != hr.len() {
            return Err(Error::invalid(format!("{} lr images vs {} hr images", lr.len(), hr.len())));
        }
        if lr.is_empty() {
            return Err(Error::MissingData("pair dataset is empty".into()));
        }
        Ok(Self { lr, hr, provenance })
    }

    /// Pairs listed in a manifest written by [`synthesize_pairs`].
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let records = read_manifest(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let provenance = records
            .first()
            .map(|r| r.provenance)
            .ok_or_else(|| Error::MissingData(format!("{} lists no pairs", path.display())))?;
        let lr = records.iter().map(|r| base.join(&r.lr_path)).collect();
        let hr = records.iter().map(|r| base.join(&r.hr_path)).collect();
        Self::new(ImageStore::Disk(lr), ImageStore::Disk(hr), provenance)
    }

    pub fn len(&self) -> usize {
        self.lr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lr.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((self.lr.get(i)?, self.hr.get(i)?))
    }
}

/// One training batch: aligned random crops with a random dihedral transform
/// each, then (if configured) one mixture-of-augmentations technique drawn
/// from an independent stream so disabling it leaves the rest untouched.
pub fn build_pair_batch<T: Real>(
    data: &PairDataset<T>,
    indices: &[usize],
    lr_patch: usize,
    moa: Option<&MoaConfig>,
    seed: u64,
) -> Result<PatchPair<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lrs = Vec::with_capacity(indices.len());
    let mut hrs = Vec::with_capacity(indices.len());
    for &i in indices {
        let (lr, hr) = data.get(i)?;
        let pair = sample_patch_pair(&hr, &lr, data.provenance, lr_patch, &mut rng)?;
        let pair = geometric_augment(&pair, &mut rng);
        lrs.push(pair.lr);
        hrs.push(pair.hr);
    }
    let batch = PatchPair::new(Tensor::concat_batch(&lrs)?, Tensor::concat_batch(&hrs)?, data.provenance)?;
    match moa {
        Some(cfg) => Ok(moa_augment_batch(&batch, cfg, &mut seeded_rng(seed, 0x6d6f61))?.0),
        None => Ok(batch),
    }
}

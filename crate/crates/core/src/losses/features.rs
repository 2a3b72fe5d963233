//! Frozen convolutional feature extractors for the perceptual terms.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{leaky_relu, leaky_relu_backward, max_pool2, max_pool2_backward, Conv2d, ConvCache, Module, Padding, PoolCache};
use crate::tensor::{Real, Tensor};

/// Maps `[0, 1]`-scaled images to one or more feature tensors. Implementations
/// hold no trainable state.
pub trait FeatureExtractor<T: Real> {
    /// Label written next to perceptual numbers in reports.
    fn name(&self) -> &str;

    fn features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>>;

    /// Features plus whatever is needed to pull gradients back to the input.
    fn forward(&self, x: &Tensor<T>) -> Result<(Vec<Tensor<T>>, FeatureCache<T>)>;

    /// Input gradient given one gradient per tapped feature.
    fn backward(&mut self, cache: &FeatureCache<T>, dfeatures: &[Tensor<T>]) -> Tensor<T>;
}

#[derive(Clone, Debug)]
pub enum Stage<T> {
    Conv(Conv2d<T>),
    Relu,
    MaxPool,
}

enum StageCache<T> {
    Conv(ConvCache<T>),
    Relu(Tensor<T>),
    MaxPool(PoolCache),
}

pub struct FeatureCache<T> {
    stages: Vec<StageCache<T>>,
}

/// A plain chain of convs, rectifiers and 2x2 max pools with feature taps
/// after selected stages. Optional per-channel input normalisation.
#[derive(Clone, Debug)]
pub struct ConvFeatures<T> {
    name: String,
    stages: Vec<Stage<T>>,
    taps: Vec<usize>,
    /// `(mean, std)` per input channel.
    normalize: Option<[(f64, f64); 3]>,
}

const IMAGENET: [(f64, f64); 3] = [(0.485, 0.229), (0.456, 0.224), (0.406, 0.225)];

impl<T: Real> ConvFeatures<T> {
    /// `taps` index into `stages`; each tap emits the output of that stage.
    pub fn new(name: impl Into<String>, mut stages: Vec<Stage<T>>, taps: Vec<usize>) -> Result<Self> {
        if taps.is_empty() || taps.iter().any(|&t| t >= stages.len()) || !taps.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid(format!(
                "feature taps {taps:?} must be increasing indices below {}",
                stages.len()
            )));
        }
        let last = *taps.last().unwrap();
        stages.truncate(last + 1);
        for s in &mut stages {
            if let Stage::Conv(c) = s {
                c.set_frozen(true);
            }
        }
        Ok(Self {
            name: name.into(),
            stages,
            taps,
            normalize: None,
        })
    }

    pub fn with_imagenet_normalization(mut self) -> Self {
        self.normalize = Some(IMAGENET);
        self
    }

    /// Small seeded stack used when no pretrained weights are configured.
    pub fn fallback() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stages = vec![
            Stage::Conv(Conv2d::new(3, 16, 3, 1, 1, Padding::Reflect, true, &mut rng)),
            Stage::Relu,
            Stage::Conv(Conv2d::new(16, 32, 3, 2, 1, Padding::Reflect, true, &mut rng)),
            Stage::Relu,
            Stage::Conv(Conv2d::new(32, 32, 3, 1, 1, Padding::Reflect, true, &mut rng)),
            Stage::Relu,
        ];
        Self::new("fallback-seed0", stages, vec![1, 5]).expect("static taps")
    }

    /// VGG19 feature stack (torchvision `features.{i}` layout) up to and
    /// including stage `tap`, read from a safetensors file.
    pub fn vgg19(path: &Path, tap: usize) -> Result<Self> {
        const LAYOUT: &str = "CRCRMCRCRMCRCRCRCRMCRCRCRCRMCRCRCRCRM";
        const WIDTHS: [usize; 16] = [64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512, 512, 512, 512];
        if tap >= LAYOUT.len() {
            return Err(Error::Config(format!("vgg19 tap {tap} beyond {} stages", LAYOUT.len())));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let load = |key: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let view = file
                .tensor(key)
                .map_err(|e| Error::Checkpoint(format!("{}: {key}: {e}", path.display())))?;
            if view.shape() != shape {
                return Err(Error::Checkpoint(format!("{key}: expected {shape:?}, found {:?}", view.shape())));
            }
            tensor_from_view(view)
        };
        let mut stages = Vec::new();
        let mut in_ch = 3;
        let mut conv_idx = 0;
        for (i, kind) in LAYOUT.chars().enumerate().take(tap + 1) {
            stages.push(match kind {
                'C' => {
                    let out = WIDTHS[conv_idx];
                    conv_idx += 1;
                    let w = load(&format!("features.{i}.weight"), &[out, in_ch, 3, 3])?;
                    let b = load(&format!("features.{i}.bias"), &[out])?;
                    in_ch = out;
                    Stage::Conv(Conv2d::from_weights(w, Some(b), 1, 1, Padding::Zero)?)
                }
                'R' => Stage::Relu,
                _ => Stage::MaxPool,
            });
        }
        Ok(Self::new(format!("vgg19-features.{tap}"), stages, vec![tap])?.with_imagenet_normalization())
    }

    fn preprocess(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, h, w) = x.try_dims4()?;
        let Some(norm) = &self.normalize else {
            return Ok(x.clone());
        };
        if c != 3 {
            return Err(Error::shape(format!("normalised extractor expects 3 channels, got {c}")));
        }
        let mut y = x.clone();
        let p = h * w;
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let (m, s) = norm[(i / p) % 3];
            *v = (*v - T::lit(m)) / T::lit(s);
        }
        Ok(y)
    }
}

pub(crate) fn tensor_from_view<T: Real>(view: safetensors::tensor::TensorView<'_>) -> Result<Tensor<T>> {
    let data = view.data();
    let values: Vec<T> = match view.dtype() {
        safetensors::Dtype::F32 => data
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect(),
        safetensors::Dtype::F64 => data
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Tensor::from_vec(view.shape(), values)
}

impl<T: Real> FeatureExtractor<T> for ConvFeatures<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut h = self.preprocess(x)?;
        let mut out = Vec::with_capacity(self.taps.len());
        for (i, s) in self.stages.iter().enumerate() {
            h = match s {
                Stage::Conv(c) => c.infer(&h)?,
                Stage::Relu => leaky_relu(&h, 0.0),
                Stage::MaxPool => max_pool2(&h)?.0,
            };
            if self.taps.contains(&i) {
                out.push(h.clone());
            }
        }
        Ok(out)
    }

    fn forward(&self, x: &Tensor<T>) -> Result<(Vec<Tensor<T>>, FeatureCache<T>)> {
        let mut h = self.preprocess(x)?;
        let mut out = Vec::with_capacity(self.taps.len());
        let mut stages = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            h = match s {
                Stage::Conv(c) => {
                    let (y, cache) = c.forward(&h)?;
                    stages.push(StageCache::Conv(cache));
                    y
                }
                Stage::Relu => {
                    let y = leaky_relu(&h, 0.0);
                    stages.push(StageCache::Relu(y.clone()));
                    y
                }
                Stage::MaxPool => {
                    let (y, cache) = max_pool2(&h)?;
                    stages.push(StageCache::MaxPool(cache));
                    y
                }
            };
            if self.taps.contains(&i) {
                out.push(h.clone());
            }
        }
        Ok((out, FeatureCache { stages }))
    }

    fn backward(&mut self, cache: &FeatureCache<T>, dfeatures: &[Tensor<T>]) -> Tensor<T> {
        assert_eq!(dfeatures.len(), self.taps.len(), "one gradient per tap");
        let mut g: Option<Tensor<T>> = None;
        for i in (0..self.stages.len()).rev() {
            if let Some(t) = self.taps.iter().position(|&t| t == i) {
                g = Some(match g {
                    Some(mut acc) => {
                        acc.add_assign(&dfeatures[t]);
                        acc
                    }
                    None => dfeatures[t].clone(),
                });
            }
            let Some(cur) = g.take() else { continue };
            g = Some(match (&mut self.stages[i], &cache.stages[i]) {
                (Stage::Conv(c), StageCache::Conv(cc)) => c.backward(cc, &cur),
                (Stage::Relu, StageCache::Relu(y)) => leaky_relu_backward(y, &cur, 0.0),
                (Stage::MaxPool, StageCache::MaxPool(pc)) => max_pool2_backward(pc, &cur),
                _ => unreachable!("cache built by this extractor"),
            });
        }
        let mut g = g.expect("at least one tap");
        if let Some(norm) = &self.normalize {
            let (_, _, h, w) = g.dims4();
            let p = h * w;
            for (i, v) in g.data_mut().iter_mut().enumerate() {
                *v /= T::lit(norm[(i / p) % 3].1);
            }
        }
        g
    }
}

/// Where perceptual features come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// VGG19 weights in safetensors form; when absent or missing on disk the
    /// seeded fallback stack is used.
    pub weights: Option<PathBuf>,
    /// Tapped `features.{i}` index of the VGG19 stack.
    pub layer: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            weights: None,
            layer: 34,
        }
    }
}

/// Loads the configured extractor, falling back (with a warning) when no
/// weight file is available.
pub fn load_extractor<T: Real>(cfg: &ExtractorConfig) -> Result<ConvFeatures<T>> {
    match &cfg.weights {
        Some(p) if p.exists() => ConvFeatures::vgg19(p, cfg.layer),
        Some(p) => {
            log::warn!("perceptual weights {} not found, using the seeded fallback extractor", p.display());
            Ok(ConvFeatures::fallback())
        }
        None => Ok(ConvFeatures::fallback()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fallback_is_deterministic() {
        let x = Tensor::<f32>::from_fn(&[1, 3, 16, 16], |i| (i % 7) as f32 / 7.0);
        let a = ConvFeatures::fallback().features(&x).unwrap();
        let b = ConvFeatures::fallback().features(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_eq!(a[1].shape(), [1, 32, 8, 8]);
    }

    #[test]
    fn bad_taps_rejected() {
        assert!(ConvFeatures::<f32>::new("x", vec![Stage::Relu], vec![1]).is_err());
        assert!(ConvFeatures::<f32>::new("x", vec![Stage::Relu, Stage::Relu], vec![1, 0]).is_err());
    }

    #[test]
    fn vgg_roundtrip_from_safetensors() {
        use safetensors::tensor::TensorView;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.safetensors");
        let w0: Vec<u8> = (0..64 * 3 * 9).flat_map(|i| ((i % 5) as f32 * 0.01).to_le_bytes()).collect();
        let b0: Vec<u8> = (0..64).flat_map(|_| 0.1f32.to_le_bytes()).collect();
        let views = vec![
            ("features.0.weight", TensorView::new(safetensors::Dtype::F32, vec![64, 3, 3, 3], &w0).unwrap()),
            ("features.0.bias", TensorView::new(safetensors::Dtype::F32, vec![64], &b0).unwrap()),
        ];
        safetensors::serialize_to_file(views, None, &path).unwrap();
        let fx = ConvFeatures::<f32>::vgg19(&path, 1).unwrap();
        let f = fx.features(&Tensor::full(&[1, 3, 8, 8], 0.5)).unwrap();
        assert_eq!(f[0].shape(), [1, 64, 8, 8]);
        assert!(ConvFeatures::<f32>::vgg19(&path, 2).is_err());
    }

    #[test]
    fn missing_weights_fall_back() {
        let cfg = ExtractorConfig {
            weights: Some("/nonexistent/vgg.safetensors".into()),
            ..ExtractorConfig::default()
        };
        assert_eq!(load_extractor::<f32>(&cfg).unwrap().name(), "fallback-seed0");
    }
}

//! Single-file checkpoints: a safetensors container whose header metadata
//! carries the format tag, version, kind, config echo and counters.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use super::Adam;
use crate::error::{Error, Result};
use crate::losses::tensor_from_view;
use crate::nets::Module;
use crate::tensor::Tensor;

pub const FORMAT: &str = "sinesr-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            ..Self::default()
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key:?}")))
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("metadata {key:?} has unparsable value {raw:?}")))
    }

    pub fn meta_json<V: serde::de::DeserializeOwned>(&self, key: &str) -> Result<V> {
        serde_json::from_str(self.meta(key)?).map_err(|e| Error::Checkpoint(format!("metadata {key:?}: {e}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    /// Stores every parameter and buffer of `module` under `prefix`.
    pub fn put_module<M: Module<f32> + ?Sized>(&mut self, prefix: &str, module: &M) {
        module.visit_params(prefix, &mut |name, p| {
            self.tensors.insert(name.to_string(), p.value.clone());
        });
        module.visit_buffers(prefix, &mut |name, b| {
            self.tensors.insert(name.to_string(), b.clone());
        });
    }

    /// Restores every parameter and buffer of `module`; each must be present
    /// with a matching shape.
    pub fn load_module<M: Module<f32> + ?Sized>(&self, prefix: &str, module: &mut M) -> Result<()> {
        let mut err = None;
        let tensors = &self.tensors;
        let mut take = |name: &str, dst: &mut Tensor<f32>| {
            if err.is_some() {
                return;
            }
            match tensors.get(name) {
                Some(t) if t.shape() == dst.shape() => dst.data_mut().copy_from_slice(t.data()),
                Some(t) => {
                    err = Some(Error::Checkpoint(format!(
                        "{name}: stored shape {:?}, model expects {:?}",
                        t.shape(),
                        dst.shape()
                    )))
                }
                None => err = Some(Error::Checkpoint(format!("tensor {name} missing"))),
            }
        };
        module.visit_params_mut(prefix, &mut |name, p| take(name, &mut p.value));
        module.visit_buffers_mut(prefix, &mut |name, b| take(name, b));
        err.map_or(Ok(()), Err)
    }

    pub fn put_optimizer(&mut self, prefix: &str, opt: &Adam<f32>) {
        self.set_meta(&format!("{prefix}.steps"), opt.steps);
        for (name, m, v) in opt.moments() {
            self.tensors.insert(format!("{prefix}.m.{name}"), m.clone());
            self.tensors.insert(format!("{prefix}.v.{name}"), v.clone());
        }
    }

    pub fn load_optimizer(&self, prefix: &str, opt: &mut Adam<f32>) -> Result<()> {
        opt.steps = self.meta_parse(&format!("{prefix}.steps"))?;
        let mpre = format!("{prefix}.m.");
        for (key, m) in self.tensors.range(mpre.clone()..) {
            let Some(name) = key.strip_prefix(&mpre) else { break };
            let v = self
                .tensors
                .get(&format!("{prefix}.v.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("second moment of {name} missing")))?;
            opt.set_moments(name, m.clone(), v.clone())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), t.data().iter().flat_map(|v| v.to_le_bytes()).collect(), t.shape().to_vec()))
            .collect();
        let views = bytes
            .iter()
            .map(|(k, b, s)| {
                TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (k.as_str(), v))
                    .map_err(|e| Error::Checkpoint(format!("{k}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta: HashMap<String, String> = self.meta.clone().into_iter().collect();
        meta.insert("format".into(), FORMAT.into());
        meta.insert("version".into(), VERSION.to_string());
        meta.insert("kind".into(), self.kind.clone());
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let data = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, data).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut meta: BTreeMap<String, String> = header
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        if meta.remove("format").as_deref() != Some(FORMAT) {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = meta.remove("version").unwrap_or_default();
        if version != VERSION.to_string() {
            return Err(bad(format!("unsupported checkpoint version {version:?}")));
        }
        let kind = meta.remove("kind").ok_or_else(|| bad("missing kind".into()))?;
        let file = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in file.tensors() {
            tensors.insert(name, tensor_from_view(view)?);
        }
        Ok(Self { kind, meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{BatchNorm2d, BnMode, Conv2d, Padding};
    use crate::training::OptimizerConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn module_and_optimizer_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut conv = Conv2d::<f32>::new(3, 4, 3, 1, 1, Padding::Reflect, true, &mut rng);
        let mut bn = BatchNorm2d::<f32>::new(3);
        bn.forward(&Tensor::from_fn(&[2, 3, 4, 4], |i| i as f32), BnMode::Train { update_stats: true })
            .unwrap();
        conv.visit_params_mut("", &mut |_, p| p.grad.map_inplace(|_| 0.25));
        let mut opt = Adam::new(OptimizerConfig::lr_stage());
        opt.step(&mut conv, 1e-3);

        let mut ck = Checkpoint::new("test");
        ck.put_module("conv", &conv);
        ck.put_module("bn", &bn);
        ck.put_optimizer("opt", &opt);
        ck.set_meta("iteration", 17);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/ck.safetensors");
        ck.save(&path).unwrap();

        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta_parse::<u64>("iteration").unwrap(), 17);

        let mut conv2 = Conv2d::<f32>::new(3, 4, 3, 1, 1, Padding::Reflect, true, &mut rng);
        let mut bn2 = BatchNorm2d::<f32>::new(3);
        back.load_module("conv", &mut conv2).unwrap();
        back.load_module("bn", &mut bn2).unwrap();
        assert_eq!(conv2.param_tree(), conv.param_tree());
        assert_eq!(bn2.running_mean, bn.running_mean);
        let mut opt2 = Adam::new(OptimizerConfig::lr_stage());
        back.load_optimizer("opt", &mut opt2).unwrap();
        assert_eq!(opt2.steps, 1);
        let a: Vec<_> = opt.moments().map(|(n, m, v)| (n.to_string(), m.clone(), v.clone())).collect();
        let b: Vec<_> = opt2.moments().map(|(n, m, v)| (n.to_string(), m.clone(), v.clone())).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_shapes_and_foreign_files_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = Conv2d::<f32>::new(3, 4, 3, 1, 1, Padding::Zero, true, &mut rng);
        let mut ck = Checkpoint::new("test");
        ck.put_module("conv", &conv);
        let mut other = Conv2d::<f32>::new(3, 5, 3, 1, 1, Padding::Zero, true, &mut rng);
        assert!(matches!(ck.load_module("conv", &mut other), Err(Error::Checkpoint(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.safetensors");
        safetensors::serialize_to_file(Vec::<(&str, TensorView)>::new(), None, &path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}

//! Degradation-learning stage: `G_LR` learns to turn bicubic downscales of
//! clean images into images that the patch discriminator cannot tell apart
//! from real low-resolution photographs, looking only at high frequencies.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, step_seed, stream_seed, Adam, Checkpoint, DiscriminatorNorm, LinearDecaySchedule, LossLog, OptimizerConfig, Stream, LOSS_LOG_NAME};
use crate::data::{geometric_augment, moa_augment_batch, random_crop, seeded_rng, EpochSampler, ImageStore, MoaConfig, PatchPair, Provenance};
use crate::degradation::{resize_to, ResampleKernel};
use crate::error::{Error, Result};
use crate::imageio::to_unit;
use crate::losses::{color_loss, discriminator_bce, load_extractor, perceptual_loss, texture_loss, ConvFeatures, ExtractorConfig, FrequencyFilter, LR_PERCEPTUAL_WEIGHT, TEXTURE_WEIGHT};
use crate::lr_model::{LrDiscriminator, LrDiscriminatorConfig, LrGenerator, LrGeneratorConfig};
use crate::nets::{BnMode, Module};
use crate::tensor::Tensor;

pub const LR_STAGE_KIND: &str = "lr_stage";

const COLUMNS: [&str; 7] = ["step", "lr", "color", "tex", "per", "disc", "total"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrStageConfig {
    pub generator: LrGeneratorConfig,
    pub discriminator: LrDiscriminatorConfig,
    pub optimizer: OptimizerConfig,
    /// Its `total_epochs` is the length of training.
    pub schedule: LinearDecaySchedule,
    pub scale: usize,
    pub batch_size: usize,
    /// Low-resolution patch side; clean crops are `patch_size * scale`.
    pub patch_size: usize,
    pub filter_size: usize,
    pub color_weight: f64,
    pub texture_weight: f64,
    pub perceptual_weight: f64,
    pub perceptual: ExtractorConfig,
    pub discriminator_norm: DiscriminatorNorm,
    /// Random dihedral transform of every crop.
    pub flips: bool,
    pub moa_enabled: bool,
    pub moa: MoaConfig,
    /// Intermediate checkpoint period in steps (0: final only).
    pub checkpoint_every: u64,
}

impl Default for LrStageConfig {
    fn default() -> Self {
        Self {
            generator: LrGeneratorConfig::default(),
            discriminator: LrDiscriminatorConfig::default(),
            optimizer: OptimizerConfig::lr_stage(),
            schedule: LinearDecaySchedule::default(),
            scale: 4,
            batch_size: 16,
            patch_size: 128,
            filter_size: 5,
            color_weight: 1.0,
            texture_weight: TEXTURE_WEIGHT,
            perceptual_weight: LR_PERCEPTUAL_WEIGHT,
            perceptual: ExtractorConfig::default(),
            discriminator_norm: DiscriminatorNorm::default(),
            flips: true,
            moa_enabled: false,
            moa: MoaConfig {
                max_value: 1.0,
                ..MoaConfig::default()
            },
            checkpoint_every: 0,
        }
    }
}

impl LrStageConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if self.moa_enabled {
            self.moa.validate()?;
        }
        if self.scale == 0 || self.batch_size == 0 {
            return Err(Error::Config("scale and batch_size must be positive".into()));
        }
        if self.patch_size < self.discriminator.receptive_field() {
            return Err(Error::Config(format!(
                "patch_size {} is below the discriminator receptive field {}",
                self.patch_size,
                self.discriminator.receptive_field()
            )));
        }
        FrequencyFilter::new(self.filter_size).map_err(|e| Error::Config(e.to_string()))?;
        for (k, w) in [
            ("color_weight", self.color_weight),
            ("texture_weight", self.texture_weight),
            ("perceptual_weight", self.perceptual_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{k} must be a non-negative number, got {w}")));
            }
        }
        Ok(())
    }
}

/// Clean high-resolution images and real low-resolution images, both in
/// `[0, 255]`. The two sets are unpaired.
#[derive(Clone, Debug)]
pub struct LrStageData {
    pub clean: ImageStore<f32>,
    pub real: ImageStore<f32>,
}

impl LrStageData {
    pub fn validate(&self) -> Result<()> {
        if self.clean.is_empty() || self.real.is_empty() {
            return Err(Error::MissingData("degradation stage needs clean and real images".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrStepRecord {
    pub step: u64,
    pub lr: f64,
    pub color: f64,
    pub tex: f64,
    pub per: f64,
    pub disc: f64,
    pub total: f64,
}

impl LrStepRecord {
    fn row(&self) -> Vec<f64> {
        vec![self.step as f64, self.lr, self.color, self.tex, self.per, self.disc, self.total]
    }
}

pub struct LrTrainer {
    pub config: LrStageConfig,
    pub seed: u64,
    pub generator: LrGenerator<f32>,
    pub discriminator: LrDiscriminator<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    fx: ConvFeatures<f32>,
    filter: FrequencyFilter,
    clean_sampler: EpochSampler,
    real_sampler: EpochSampler,
    /// Completed steps.
    pub step: u64,
}

impl LrTrainer {
    pub fn new(config: LrStageConfig, seed: u64, data: &LrStageData) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        let generator = LrGenerator::new(
            config.generator.clone(),
            &mut ChaCha8Rng::seed_from_u64(stream_seed(seed, Stream::InitGenerator)),
        )?;
        let discriminator = LrDiscriminator::new(
            config.discriminator.clone(),
            &mut ChaCha8Rng::seed_from_u64(stream_seed(seed, Stream::InitDiscriminator)),
        )?;
        Ok(Self {
            opt_g: Adam::new(config.optimizer.clone()),
            opt_d: Adam::new(config.optimizer.clone()),
            fx: load_extractor(&config.perceptual)?,
            filter: FrequencyFilter::new(config.filter_size)?,
            clean_sampler: EpochSampler::new(data.clean.len(), stream_seed(seed, Stream::SamplerA))?,
            real_sampler: EpochSampler::new(data.real.len(), stream_seed(seed, Stream::SamplerB))?,
            generator,
            discriminator,
            config,
            seed,
            step: 0,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.clean_sampler.len as u64).div_ceil(self.config.batch_size as u64)
    }

    pub fn total_steps(&self) -> u64 {
        self.config.schedule.total_epochs * self.steps_per_epoch()
    }

    pub fn learning_rate(&self) -> Result<f64> {
        self.config.schedule.at(self.step / self.steps_per_epoch())
    }

    /// Generator input (bicubic downscales in `[0, 1]`) and real patches.
    pub fn sample_batch(&mut self, data: &LrStageData) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let cfg = &self.config;
        let (p, s) = (cfg.patch_size, cfg.scale);
        let seed = step_seed(self.seed, self.step);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut clean = Vec::with_capacity(cfg.batch_size);
        let mut down = Vec::with_capacity(cfg.batch_size);
        for i in self.clean_sampler.next_batch(cfg.batch_size) {
            let hr = random_crop(&data.clean.get(i)?, p * s, &mut rng)?;
            let lr = resize_to(&hr, p, p, ResampleKernel::Bicubic, true)?;
            let mut pair = PatchPair::new(to_unit(&lr), to_unit(&hr), Provenance::Bicubic)?;
            if cfg.flips {
                pair = geometric_augment(&pair, &mut rng);
            }
            down.push(pair.lr);
            clean.push(pair.hr);
        }
        let mut x = Tensor::concat_batch(&down)?;
        if cfg.moa_enabled {
            let pair = PatchPair::new(x, Tensor::concat_batch(&clean)?, Provenance::Bicubic)?;
            x = moa_augment_batch(&pair, &cfg.moa, &mut seeded_rng(seed, 0x6d6f61))?.0.lr;
        }
        let mut real = Vec::with_capacity(cfg.batch_size);
        for i in self.real_sampler.next_batch(cfg.batch_size) {
            let mut y = to_unit(&random_crop(&data.real.get(i)?, p, &mut rng)?);
            if cfg.flips {
                y = crate::data::Dihedral::random(&mut rng).apply(&y);
            }
            real.push(y);
        }
        Ok((x, Tensor::concat_batch(&real)?))
    }

    /// One discriminator update on high-passed real and (detached) generated
    /// images. Returns the discriminator loss.
    pub fn discriminator_step(&mut self, fake: &Tensor<f32>, real: &Tensor<f32>, lr: f64) -> Result<f64> {
        let d = &mut self.discriminator;
        d.zero_grad();
        let mode = BnMode::Train { update_stats: true };
        let (sr, cr) = d.forward(&self.filter.high(real)?, mode)?;
        let (sf, cf) = d.forward(&self.filter.high(fake)?, mode)?;
        let loss = discriminator_bce(&sr, &sf)?;
        d.backward(&cr, &loss.d_real);
        d.backward(&cf, &loss.d_fake);
        self.opt_d.step(d, lr);
        Ok(loss.value)
    }

    /// Generator loss parts `(color, tex, per)` and the input-space gradient
    /// of their weighted sum. The discriminator is frozen throughout.
    pub fn generator_objective(&mut self, fake: &Tensor<f32>, x: &Tensor<f32>) -> Result<([f64; 3], Tensor<f32>)> {
        let cfg = &self.config;
        let color = color_loss(fake, x, &self.filter)?;
        let mut grad = color.grad.scale(cfg.color_weight as f32);

        self.discriminator.set_frozen(true);
        let scored = self
            .discriminator
            .forward(&self.filter.high(fake)?, cfg.discriminator_norm.mode());
        let (scores, cache) = match scored {
            Ok(v) => v,
            Err(e) => {
                self.discriminator.set_frozen(false);
                return Err(e);
            }
        };
        let tex = texture_loss(&scores)?;
        let dhigh = self.discriminator.backward(&cache, &tex.grad);
        self.discriminator.set_frozen(false);
        grad.add_assign(&self.filter.high_adjoint(&dhigh)?.scale(cfg.texture_weight as f32));

        let per = if cfg.perceptual_weight > 0.0 {
            let l = perceptual_loss(fake, x, &mut self.fx)?;
            grad.add_assign(&l.grad.scale(cfg.perceptual_weight as f32));
            l.value
        } else {
            0.0
        };
        Ok(([color.value, tex.value, per], grad))
    }

    pub fn train_step(&mut self, data: &LrStageData) -> Result<LrStepRecord> {
        let lr = self.learning_rate()?;
        let (x, real) = self.sample_batch(data)?;
        let step = self.step + 1;
        let (fake, cache) = self.generator.forward(&x)?;

        let disc = self.discriminator_step(&fake, &real, lr)?;
        check_finite(step, &[("disc", disc)])?;

        self.generator.zero_grad();
        let ([color, tex, per], grad) = self.generator_objective(&fake, &x)?;
        let cfg = &self.config;
        let total = cfg.color_weight * color + cfg.texture_weight * tex + cfg.perceptual_weight * per;
        check_finite(step, &[("color", color), ("tex", tex), ("per", per), ("total", total)])?;
        self.generator.backward(&cache, &grad);
        self.opt_g.step(&mut self.generator, lr);
        self.step = step;
        Ok(LrStepRecord {
            step,
            lr,
            color,
            tex,
            per,
            disc,
            total,
        })
    }

    /// Trains until `end_step` completed steps (capped at the schedule end),
    /// logging every step.
    pub fn run(&mut self, data: &LrStageData, end_step: u64, log: &mut LossLog, out: Option<&Path>) -> Result<()> {
        let end = end_step.min(self.total_steps());
        while self.step < end {
            let rec = self.train_step(data)?;
            log.push(rec.row())?;
            if rec.step % 10 == 0 || rec.step == end {
                log::info!(
                    "lr stage step {}/{} lr {:.3e} total {:.5} disc {:.5}",
                    rec.step,
                    end,
                    rec.lr,
                    rec.total,
                    rec.disc
                );
            }
            if let Some(dir) = out {
                let every = self.config.checkpoint_every;
                if every > 0 && rec.step % every == 0 {
                    self.checkpoint().save(&dir.join(format!("lr_stage_{:07}.safetensors", rec.step)))?;
                }
            }
        }
        Ok(())
    }

    pub fn new_log(&self, out: Option<&Path>) -> Result<LossLog> {
        match out {
            Some(dir) => LossLog::to_file(&dir.join(LOSS_LOG_NAME), &COLUMNS, self.step + 1),
            None => Ok(LossLog::in_memory(&COLUMNS)),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(LR_STAGE_KIND);
        ck.set_meta("config", serde_json::to_string(&self.config).expect("config serialises"));
        ck.set_meta("generator", serde_json::to_string(&self.config.generator).expect("config serialises"));
        ck.set_meta("seed", self.seed);
        ck.set_meta("iteration", self.step);
        ck.set_meta("sampler_clean", format!("{},{}", self.clean_sampler.epoch, self.clean_sampler.cursor));
        ck.set_meta("sampler_real", format!("{},{}", self.real_sampler.epoch, self.real_sampler.cursor));
        ck.put_module("g", &self.generator);
        ck.put_module("d", &self.discriminator);
        ck.put_optimizer("opt_g", &self.opt_g);
        ck.put_optimizer("opt_d", &self.opt_d);
        ck
    }

    /// Rebuilds a trainer from a checkpoint so that training continues
    /// exactly as if it had not stopped.
    pub fn resume(ck: &Checkpoint, data: &LrStageData) -> Result<Self> {
        ck.expect_kind(LR_STAGE_KIND)?;
        let config: LrStageConfig = ck.meta_json("config")?;
        let mut t = Self::new(config, ck.meta_parse("seed")?, data)?;
        ck.load_module("g", &mut t.generator)?;
        ck.load_module("d", &mut t.discriminator)?;
        ck.load_optimizer("opt_g", &mut t.opt_g)?;
        ck.load_optimizer("opt_d", &mut t.opt_d)?;
        t.step = ck.meta_parse("iteration")?;
        t.clean_sampler = restore_sampler(ck, "sampler_clean", &t.clean_sampler)?;
        t.real_sampler = restore_sampler(ck, "sampler_real", &t.real_sampler)?;
        Ok(t)
    }
}

pub(crate) fn restore_sampler(ck: &Checkpoint, key: &str, fresh: &EpochSampler) -> Result<EpochSampler> {
    let raw = ck.meta(key)?;
    let parsed = raw
        .split_once(',')
        .and_then(|(e, c)| Some((e.parse().ok()?, c.parse().ok()?)));
    let (epoch, cursor) = parsed.ok_or_else(|| Error::Checkpoint(format!("bad sampler position {raw:?}")))?;
    EpochSampler::at(fresh.len, fresh.seed, epoch, cursor)
}

/// Generator weights and architecture from a degradation-stage checkpoint.
pub fn load_lr_generator(path: &Path) -> Result<LrGenerator<f32>> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(LR_STAGE_KIND)?;
    let cfg: LrGeneratorConfig = ck.meta_json("generator")?;
    let mut g = LrGenerator::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.load_module("g", &mut g)?;
    Ok(g)
}

/// Full degradation-stage run. With `out`, writes the loss log, periodic
/// checkpoints and `lr_stage.safetensors` there.
pub fn train_lr_stage(config: &LrStageConfig, seed: u64, data: &LrStageData, out: Option<&Path>) -> Result<LrTrainer> {
    let mut t = LrTrainer::new(config.clone(), seed, data)?;
    let mut log = t.new_log(out)?;
    t.run(data, u64::MAX, &mut log, out)?;
    if let Some(dir) = out {
        t.checkpoint().save(&dir.join(format!("{LR_STAGE_KIND}.safetensors")))?;
    }
    Ok(t)
}

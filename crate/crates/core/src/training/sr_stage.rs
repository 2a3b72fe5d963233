//! Super-resolution stage: `G_SR` is trained on aligned pairs with a
//! perceptual, relativistic adversarial, total-variation and l1 objective.
//! Losses are evaluated on intensities divided by 255.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lr_stage::restore_sampler;
use super::{check_finite, step_seed, stream_seed, Adam, Checkpoint, DiscriminatorNorm, LossLog, MultiStepSchedule, OptimizerConfig, Stream, LOSS_LOG_NAME};
use crate::data::{build_pair_batch, EpochSampler, MoaConfig, PairDataset};
use crate::degradation::estimate_sigma;
use crate::error::{Error, Result};
use crate::losses::{content_loss, load_extractor, perceptual_loss, ragan_loss, tv_loss, ConvFeatures, ExtractorConfig, RaganSide, TvReduction, CONTENT_WEIGHT};
use crate::nets::{BnMode, Module};
use crate::sr_model::{SrDiscriminator, SrDiscriminatorConfig, SrGenerator, SrGeneratorConfig, PIXEL_MAX};
use crate::tensor::Tensor;

pub const SR_STAGE_KIND: &str = "sr_stage";

const COLUMNS: [&str; 8] = ["step", "lr", "per", "gan", "tv", "l1", "disc", "total"];
const SIGMA_MIN_SIDE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrStageConfig {
    pub generator: SrGeneratorConfig,
    pub discriminator: SrDiscriminatorConfig,
    pub optimizer: OptimizerConfig,
    /// Its `total_iterations` is the length of training.
    pub schedule: MultiStepSchedule,
    pub batch_size: usize,
    /// Low-resolution patch side.
    pub patch_size: usize,
    pub perceptual_weight: f64,
    pub adversarial_weight: f64,
    pub tv_weight: f64,
    pub content_weight: f64,
    pub tv_reduction: TvReduction,
    pub perceptual: ExtractorConfig,
    pub discriminator_norm: DiscriminatorNorm,
    /// Content-only iterations before the other terms switch on.
    pub warmup_iterations: u64,
    /// Learn the projection scale.
    pub train_alpha: bool,
    pub moa_enabled: bool,
    pub moa: MoaConfig,
    pub checkpoint_every: u64,
}

impl Default for SrStageConfig {
    fn default() -> Self {
        Self {
            generator: SrGeneratorConfig::default(),
            discriminator: SrDiscriminatorConfig::default(),
            optimizer: OptimizerConfig::sr_stage(),
            schedule: MultiStepSchedule::default(),
            batch_size: 16,
            patch_size: 32,
            perceptual_weight: 1.0,
            adversarial_weight: 1.0,
            tv_weight: 1.0,
            content_weight: CONTENT_WEIGHT,
            tv_reduction: TvReduction::default(),
            perceptual: ExtractorConfig::default(),
            discriminator_norm: DiscriminatorNorm::default(),
            warmup_iterations: 0,
            train_alpha: true,
            moa_enabled: true,
            moa: MoaConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl SrStageConfig {
    /// Only the l1 term, no discriminator.
    pub fn content_only() -> Self {
        Self {
            perceptual_weight: 0.0,
            adversarial_weight: 0.0,
            tv_weight: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if self.moa_enabled {
            self.moa.validate()?;
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.patch_size < SIGMA_MIN_SIDE {
            return Err(Error::Config(format!(
                "patch_size {} is below the {SIGMA_MIN_SIDE} pixels noise estimation needs",
                self.patch_size
            )));
        }
        if self.adversarial_weight > 0.0 && self.patch_size * self.generator.scale < self.discriminator.min_input() {
            return Err(Error::Config(format!(
                "high-resolution patches of {} are below the discriminator minimum {}",
                self.patch_size * self.generator.scale,
                self.discriminator.min_input()
            )));
        }
        for (k, w) in [
            ("perceptual_weight", self.perceptual_weight),
            ("adversarial_weight", self.adversarial_weight),
            ("tv_weight", self.tv_weight),
            ("content_weight", self.content_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{k} must be a non-negative number, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SrStepRecord {
    pub step: u64,
    pub lr: f64,
    pub per: f64,
    pub gan: f64,
    pub tv: f64,
    pub l1: f64,
    pub disc: f64,
    pub total: f64,
}

impl SrStepRecord {
    fn row(&self) -> Vec<f64> {
        vec![
            self.step as f64,
            self.lr,
            self.per,
            self.gan,
            self.tv,
            self.l1,
            self.disc,
            self.total,
        ]
    }
}

pub struct SrTrainer {
    pub config: SrStageConfig,
    pub seed: u64,
    pub generator: SrGenerator<f32>,
    pub discriminator: SrDiscriminator<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    fx: ConvFeatures<f32>,
    sampler: EpochSampler,
    pub step: u64,
}

fn unit(x: &Tensor<f32>) -> Tensor<f32> {
    x.scale((1.0 / PIXEL_MAX) as f32)
}

/// One noise estimate per batch item.
pub fn batch_sigma(lr: &Tensor<f32>) -> Result<Vec<f64>> {
    let n = lr.try_dims4()?.0;
    (0..n).map(|i| estimate_sigma(&lr.batch_item(i))).collect()
}

impl SrTrainer {
    pub fn new(config: SrStageConfig, seed: u64, data: &PairDataset<f32>) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::MissingData("pair dataset is empty".into()));
        }
        let mut generator = SrGenerator::new(
            config.generator.clone(),
            &mut ChaCha8Rng::seed_from_u64(stream_seed(seed, Stream::InitGenerator)),
        )?;
        generator.projection.alpha.frozen = !config.train_alpha;
        let discriminator = SrDiscriminator::new(
            config.discriminator.clone(),
            &mut ChaCha8Rng::seed_from_u64(stream_seed(seed, Stream::InitDiscriminator)),
        )?;
        let fx = if config.perceptual_weight > 0.0 {
            load_extractor(&config.perceptual)?
        } else {
            ConvFeatures::fallback()
        };
        Ok(Self {
            opt_g: Adam::new(config.optimizer.clone()),
            opt_d: Adam::new(config.optimizer.clone()),
            sampler: EpochSampler::new(data.len(), stream_seed(seed, Stream::SamplerA))?,
            fx,
            generator,
            discriminator,
            config,
            seed,
            step: 0,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.config.schedule.total_iterations
    }

    pub fn adversarial_active(&self) -> bool {
        self.config.adversarial_weight > 0.0 && self.step >= self.config.warmup_iterations
    }

    fn warm(&self) -> bool {
        self.step >= self.config.warmup_iterations
    }

    /// RaGAN discriminator update on unit-scaled real and detached generated
    /// images. Returns the discriminator loss.
    pub fn discriminator_step(&mut self, fake: &Tensor<f32>, real: &Tensor<f32>, lr: f64) -> Result<f64> {
        let d = &mut self.discriminator;
        d.zero_grad();
        let mode = BnMode::Train { update_stats: true };
        let (sr, cr) = d.forward(real, mode)?;
        let (sf, cf) = d.forward(fake, mode)?;
        let loss = ragan_loss(&sr, &sf, RaganSide::Discriminator)?;
        d.backward(&cr, &loss.d_real);
        d.backward(&cf, &loss.d_fake);
        self.opt_d.step(d, lr);
        Ok(loss.value)
    }

    /// Loss parts `[per, gan, tv, l1]` and the gradient of their weighted sum
    /// with respect to the unit-scaled generator output.
    pub fn generator_objective(&mut self, fake: &Tensor<f32>, real: &Tensor<f32>) -> Result<([f64; 4], Tensor<f32>)> {
        let cfg = self.config.clone();
        let l1 = content_loss(fake, real)?;
        let mut grad = l1.grad.scale(cfg.content_weight as f32);
        let warm = self.warm();
        let mut per = 0.0;
        if warm && cfg.perceptual_weight > 0.0 {
            let l = perceptual_loss(fake, real, &mut self.fx)?;
            grad.add_assign(&l.grad.scale(cfg.perceptual_weight as f32));
            per = l.value;
        }
        let mut tv = 0.0;
        if warm && cfg.tv_weight > 0.0 {
            let l = tv_loss(fake, real, cfg.tv_reduction)?;
            grad.add_assign(&l.grad.scale(cfg.tv_weight as f32));
            tv = l.value;
        }
        let mut gan = 0.0;
        if self.adversarial_active() {
            let mode = cfg.discriminator_norm.mode();
            self.discriminator.set_frozen(true);
            let scored = self
                .discriminator
                .forward(real, mode)
                .and_then(|(sr, _)| Ok((sr, self.discriminator.forward(fake, mode)?)));
            let (sr, (sf, cf)) = match scored {
                Ok(v) => v,
                Err(e) => {
                    self.discriminator.set_frozen(false);
                    return Err(e);
                }
            };
            let l = ragan_loss(&sr, &sf, RaganSide::Generator)?;
            let dfake = self.discriminator.backward(&cf, &l.d_fake);
            self.discriminator.set_frozen(false);
            grad.add_assign(&dfake.scale(cfg.adversarial_weight as f32));
            gan = l.value;
        }
        Ok(([per, gan, tv, l1.value], grad))
    }

    pub fn train_step(&mut self, data: &PairDataset<f32>) -> Result<SrStepRecord> {
        let lr = self.config.schedule.at(self.step)?;
        let step = self.step + 1;
        let indices = self.sampler.next_batch(self.config.batch_size);
        let moa = self.config.moa_enabled.then_some(&self.config.moa);
        let batch = build_pair_batch(data, &indices, self.config.patch_size, moa, step_seed(self.seed, self.step))?;
        let sigma = batch_sigma(&batch.lr)?;
        let (out, cache) = self.generator.forward(&batch.lr, &sigma)?;
        let (fake, real) = (unit(&out), unit(&batch.hr));

        let disc = if self.adversarial_active() {
            let d = self.discriminator_step(&fake, &real, lr)?;
            check_finite(step, &[("disc", d)])?;
            d
        } else {
            0.0
        };

        self.generator.zero_grad();
        let ([per, gan, tv, l1], grad) = self.generator_objective(&fake, &real)?;
        let cfg = &self.config;
        let total = cfg.perceptual_weight * per + cfg.adversarial_weight * gan + cfg.tv_weight * tv + cfg.content_weight * l1;
        check_finite(step, &[("per", per), ("gan", gan), ("tv", tv), ("l1", l1), ("total", total)])?;
        self.generator.backward(&cache, &unit(&grad));
        self.opt_g.step(&mut self.generator, lr);
        self.step = step;
        Ok(SrStepRecord {
            step,
            lr,
            per,
            gan,
            tv,
            l1,
            disc,
            total,
        })
    }

    pub fn run(&mut self, data: &PairDataset<f32>, end_step: u64, log: &mut LossLog, out: Option<&Path>) -> Result<()> {
        let end = end_step.min(self.total_steps());
        while self.step < end {
            let rec = self.train_step(data)?;
            log.push(rec.row())?;
            if rec.step % 50 == 0 || rec.step == end {
                log::info!(
                    "sr stage step {}/{} lr {:.3e} total {:.5} l1 {:.5} alpha {:?}",
                    rec.step,
                    end,
                    rec.lr,
                    rec.total,
                    rec.l1,
                    self.generator.projection.alpha.value.data()
                );
            }
            if let Some(dir) = out {
                let every = self.config.checkpoint_every;
                if every > 0 && rec.step % every == 0 {
                    self.checkpoint().save(&dir.join(format!("sr_stage_{:07}.safetensors", rec.step)))?;
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
        let mut ck = Checkpoint::new(SR_STAGE_KIND);
        ck.set_meta("config", serde_json::to_string(&self.config).expect("config serialises"));
        ck.set_meta("generator", serde_json::to_string(&self.config.generator).expect("config serialises"));
        ck.set_meta("seed", self.seed);
        ck.set_meta("iteration", self.step);
        ck.set_meta("sampler", format!("{},{}", self.sampler.epoch, self.sampler.cursor));
        ck.put_module("g", &self.generator);
        ck.put_module("d", &self.discriminator);
        ck.put_optimizer("opt_g", &self.opt_g);
        ck.put_optimizer("opt_d", &self.opt_d);
        ck
    }

    pub fn resume(ck: &Checkpoint, data: &PairDataset<f32>) -> Result<Self> {
        ck.expect_kind(SR_STAGE_KIND)?;
        let config: SrStageConfig = ck.meta_json("config")?;
        let mut t = Self::new(config, ck.meta_parse("seed")?, data)?;
        ck.load_module("g", &mut t.generator)?;
        ck.load_module("d", &mut t.discriminator)?;
        ck.load_optimizer("opt_g", &mut t.opt_g)?;
        ck.load_optimizer("opt_d", &mut t.opt_d)?;
        t.step = ck.meta_parse("iteration")?;
        t.sampler = restore_sampler(ck, "sampler", &t.sampler)?;
        Ok(t)
    }
}

/// The trained super-resolution generator stored in an SR-stage checkpoint.
pub fn load_sr_generator(path: &Path) -> Result<SrGenerator<f32>> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(SR_STAGE_KIND)?;
    let cfg: SrGeneratorConfig = ck.meta_json("generator")?;
    let mut g = SrGenerator::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.load_module("g", &mut g)?;
    Ok(g)
}

/// Full super-resolution-stage run; see [`super::train_lr_stage`].
pub fn train_sr_stage(config: &SrStageConfig, seed: u64, data: &PairDataset<f32>, out: Option<&Path>) -> Result<SrTrainer> {
    let mut t = SrTrainer::new(config.clone(), seed, data)?;
    let mut log = t.new_log(out)?;
    t.run(data, u64::MAX, &mut log, out)?;
    if let Some(dir) = out {
        t.checkpoint().save(&dir.join(format!("{SR_STAGE_KIND}.safetensors")))?;
    }
    Ok(t)
}

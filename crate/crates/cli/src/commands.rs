use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sinesr::config::{apply_override, read_table, Config, PairSource};
use sinesr::data::{derive_seed, list_images, seeded_rng, synthesize_pairs, ImageStore, PairDataset, PairGenerator, MANIFEST_NAME};
use sinesr::degradation::degrade as degrade_image;
use sinesr::evaluation::{evaluate_dataset, pairs_from_dirs, pairs_from_manifest, super_resolve};
use sinesr::imageio::{read_rgb, write_rgb};
use sinesr::losses::load_extractor;
use sinesr::training::{
    load_lr_generator, load_sr_generator, train_lr_stage, train_sr_stage, Checkpoint, LrStageData, LrTrainer,
    SrTrainer, LR_STAGE_KIND, SR_STAGE_KIND,
};
use sinesr::Error;

use crate::Common;

/// Exit code and error category.
pub fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => (2, "config"),
        Some(Error::MissingData(_)) => (3, "missing-data"),
        Some(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => (3, "missing-data"),
        _ => (1, "runtime"),
    }
}

/// File, then `--set`, then the dedicated flags.
fn resolve(c: &Common, self_ensemble: bool) -> Result<Config> {
    let mut table = match &c.config {
        Some(p) => read_table(p)?,
        None => toml::Table::new(),
    };
    for o in &c.overrides {
        apply_override(&mut table, o)?;
    }
    let mut direct = Vec::new();
    if let Some(s) = c.seed {
        direct.push(format!("run.seed={s}"));
    }
    if let Some(p) = &c.out {
        direct.push(format!("run.out={}", toml::Value::String(p.display().to_string())));
    }
    if let Some(d) = &c.device {
        direct.push(format!("run.device={}", toml::Value::String(d.clone())));
    }
    if let Some(r) = &c.data_root {
        direct.push(format!("data.root={}", toml::Value::String(r.display().to_string())));
    }
    if self_ensemble {
        direct.push("eval.self_ensemble=true".into());
    }
    for o in &direct {
        apply_override(&mut table, o)?;
    }
    let cfg = Config::from_table(table)?;
    let snapshot = cfg.write_resolved(&cfg.run.out)?;
    log::info!("resolved configuration written to {}", snapshot.display());
    Ok(cfg)
}

fn store(cfg: &Config, dir: &Path) -> Result<ImageStore<f32>> {
    let dir = cfg.data.resolve(dir);
    let s = ImageStore::from_dir(&dir)?;
    if s.is_empty() {
        return Err(Error::MissingData(format!("no images in {}", dir.display())).into());
    }
    Ok(if cfg.data.preload { s.preload()? } else { s })
}

/// A checkpoint path; unlike data paths these are taken as given.
fn existing(p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    let p = p.clone().ok_or_else(|| Error::Config(format!("{key} must be set")))?;
    if !p.is_file() {
        return Err(Error::MissingData(format!("{key} {} does not exist", p.display())).into());
    }
    Ok(p)
}

pub fn train_lr(c: &Common) -> Result<()> {
    let cfg = resolve(c, false)?;
    let data = LrStageData {
        clean: store(&cfg, &cfg.data.clean_hr)?,
        real: store(&cfg, &cfg.data.real_lr)?,
    };
    let out = cfg.run.out.as_path();
    let trainer = match &cfg.run.resume {
        Some(_) => {
            let path = existing(&cfg.run.resume, "run.resume")?;
            let ck = Checkpoint::load(&path)?;
            let mut t = LrTrainer::resume(&ck, &data)?;
            log::info!("resuming the degradation stage at step {}", t.step);
            let mut log = t.new_log(Some(out))?;
            t.run(&data, u64::MAX, &mut log, Some(out))?;
            t.checkpoint().save(&out.join(format!("{LR_STAGE_KIND}.safetensors")))?;
            t
        }
        None => train_lr_stage(&cfg.lr_stage, cfg.run.seed, &data, Some(out))?,
    };
    log::info!("degradation stage finished after {} steps; outputs in {}", trainer.step, out.display());
    Ok(())
}

pub fn synth_pairs(c: &Common) -> Result<()> {
    let cfg = resolve(c, false)?;
    let scale = cfg.sr_stage.generator.scale;
    let model;
    let generator = match cfg.synth.source {
        PairSource::Bicubic => PairGenerator::Bicubic { scale },
        PairSource::Classical => PairGenerator::Classical(cfg.degradation.clone()),
        PairSource::Learned => {
            let path = existing(&cfg.synth.lr_checkpoint, "synth.lr_checkpoint")?;
            model = load_lr_generator(&path)?;
            PairGenerator::Learned { model: &model, scale }
        }
    };
    let inputs = list_images(&cfg.data.resolve(&cfg.data.clean_hr))?;
    if inputs.is_empty() {
        return Err(Error::MissingData("no high-resolution images to synthesize from".into()).into());
    }
    let report = synthesize_pairs(&inputs, &generator, &cfg.run.out, cfg.run.seed)?;
    log::info!(
        "wrote {} pairs ({} skipped); manifest {}",
        report.written,
        report.skipped.len(),
        report.manifest.display()
    );
    Ok(())
}

pub fn train_sr(c: &Common) -> Result<()> {
    let cfg = resolve(c, false)?;
    let manifest = cfg.data.resolve(&cfg.data.pairs).join(MANIFEST_NAME);
    let mut data = PairDataset::<f32>::from_manifest(&manifest)?;
    if cfg.data.preload {
        data.lr = data.lr.preload()?;
        data.hr = data.hr.preload()?;
    }
    let out = cfg.run.out.as_path();
    let trainer = match &cfg.run.resume {
        Some(_) => {
            let path = existing(&cfg.run.resume, "run.resume")?;
            let ck = Checkpoint::load(&path)?;
            let mut t = SrTrainer::resume(&ck, &data)?;
            log::info!("resuming the super-resolution stage at step {}", t.step);
            let mut log = t.new_log(Some(out))?;
            t.run(&data, u64::MAX, &mut log, Some(out))?;
            t.checkpoint().save(&out.join(format!("{SR_STAGE_KIND}.safetensors")))?;
            t
        }
        None => train_sr_stage(&cfg.sr_stage, cfg.run.seed, &data, Some(out))?,
    };
    log::info!("super-resolution stage finished after {} steps; outputs in {}", trainer.step, out.display());
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| "image".into(), |n| n.to_string_lossy().into_owned())
}

fn png_name(p: &Path) -> String {
    let stem = p.file_stem().map_or_else(|| "image".into(), |n| n.to_string_lossy().into_owned());
    format!("{stem}.png")
}

pub fn infer(c: &Common, self_ensemble: bool) -> Result<()> {
    let cfg = resolve(c, self_ensemble)?;
    let ckpt = existing(&cfg.model.checkpoint, "model.checkpoint")?;
    let g = load_sr_generator(&ckpt)?;
    let inputs = list_images(&cfg.data.resolve(&cfg.data.input))?;
    if inputs.is_empty() {
        return Err(Error::MissingData("no input images".into()).into());
    }
    let mut written = 0;
    for p in &inputs {
        let lr = match read_rgb::<f32>(p) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                continue;
            }
        };
        let sr = super_resolve(&g, &lr, cfg.eval.self_ensemble).with_context(|| format!("super-resolving {}", p.display()))?;
        write_rgb(&cfg.run.out.join(png_name(p)), &sr)?;
        written += 1;
    }
    log::info!("wrote {written} images to {}", cfg.run.out.display());
    Ok(())
}

pub fn evaluate(c: &Common, self_ensemble: bool) -> Result<()> {
    let cfg = resolve(c, self_ensemble)?;
    let ckpt = existing(&cfg.model.checkpoint, "model.checkpoint")?;
    let g = load_sr_generator(&ckpt)?;
    let pairs = match &cfg.data.eval_manifest {
        Some(m) => pairs_from_manifest(&cfg.data.resolve(m))?,
        None => pairs_from_dirs(&cfg.data.resolve(&cfg.data.eval_lr), &cfg.data.resolve(&cfg.data.eval_hr))?,
    };
    let fx = load_extractor::<f32>(&cfg.eval.perceptual)?;
    let ens = cfg.eval.self_ensemble;
    let report = evaluate_dataset(
        &pairs,
        |lr| super_resolve(&g, lr, ens),
        &fx,
        (&file_name(&ckpt), &cfg.eval.dataset_id, ens),
    )?;
    report.write(&cfg.run.out)?;
    println!("{}", report.headline());
    Ok(())
}

pub fn degrade(c: &Common) -> Result<()> {
    let cfg = resolve(c, false)?;
    let inputs = list_images(&cfg.data.resolve(&cfg.data.input))?;
    if inputs.is_empty() {
        return Err(Error::MissingData("no input images".into()).into());
    }
    for (i, p) in inputs.iter().enumerate() {
        let img = match read_rgb::<f32>(p) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                continue;
            }
        };
        let mut rng = seeded_rng(derive_seed(cfg.run.seed, i as u64), 0);
        let out = degrade_image(&img, &cfg.degradation, &mut rng)?;
        write_rgb(&cfg.run.out.join(png_name(p)), &out)?;
    }
    log::info!("degraded {} images into {}", inputs.len(), cfg.run.out.display());
    Ok(())
}

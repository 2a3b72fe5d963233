//! Central finite-difference checks in f64 on randomly sampled coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinesr::losses::{
    color_loss, content_loss, discriminator_bce, l1_mean, perceptual_loss, ragan_loss, texture_loss, tv_loss,
    ConvFeatures, FrequencyFilter, Loss, RaganSide, ScoreLoss, TvReduction,
};
use sinesr::lr_model::{LrDiscriminator, LrDiscriminatorConfig, LrGenerator, LrGeneratorConfig};
use sinesr::nets::{Arrangement, BnMode, Module, Padding, ResidualBlock, SineLayer};
use sinesr::sr_model::{SrDiscriminator, SrDiscriminatorConfig, SrGenerator, SrGeneratorConfig};
use sinesr::Tensor;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 10;
/// Coordinates whose gradient is this far below the largest probed one are
/// judged against that scale instead of their own.
pub const FLOOR_FRACTION: f64 = 1e-3;

/// Worst relative error seen by one check.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub worst: f64,
    pub at: String,
    pub probes: usize,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.probes > 0 && self.worst < TOLERANCE
    }

    pub fn merge(&mut self, other: Outcome) {
        if other.worst >= self.worst {
            self.worst = other.worst;
            self.at = other.at;
        }
        self.probes += other.probes;
    }
}

struct Probes(Vec<(String, f64, f64)>);

impl Probes {
    fn outcome(self) -> Outcome {
        let floor = self.0.iter().map(|p| p.1.abs()).fold(0.0, f64::max) * FLOOR_FRACTION;
        let mut out = Outcome { probes: self.0.len(), ..Outcome::default() };
        for (label, a, n) in self.0 {
            let e = (a - n).abs() / a.abs().max(n.abs()).max(floor).max(1e-300);
            if e >= out.worst {
                out.worst = e;
                out.at = label;
            }
        }
        out
    }
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Central difference with one Richardson refinement (error O(h^4)).
fn central(mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = STEP;
    let d1 = (f(h) - f(-h)) / (2.0 * h);
    let d2 = (f(h / 2.0) - f(-h / 2.0)) / h;
    (4.0 * d2 - d1) / 3.0
}

fn set_param<M: Module<f64>>(m: &mut M, name: &str, k: usize, v: f64) {
    m.visit_params_mut("", &mut |n, p| {
        if n == name {
            p.value.data_mut()[k] = v;
        }
    });
}

/// Probes `per_tensor` coordinates of every parameter tensor after the
/// analytic gradients have been accumulated.
fn probe_params<M: Module<f64>>(
    m: &mut M,
    eval: &dyn Fn(&mut M) -> f64,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
    probes: &mut Probes,
) {
    let grads = m.grad_tree();
    let values = m.param_tree();
    for (name, g) in grads {
        for _ in 0..per_tensor.min(g.numel()) {
            let k = rng.gen_range(0..g.numel());
            let v0 = values[&name].data()[k];
            let n = central(|d| {
                set_param(m, &name, k, v0 + d);
                eval(m)
            });
            set_param(m, &name, k, v0);
            probes.0.push((format!("{name}[{k}]"), g.data()[k], n));
        }
    }
}

fn probe_input(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eval: &mut dyn FnMut(&Tensor<f64>) -> f64,
    count: usize,
    rng: &mut ChaCha8Rng,
    label: &str,
    probes: &mut Probes,
) {
    let mut xp = x.clone();
    for _ in 0..count {
        let k = rng.gen_range(0..x.numel());
        let n = central(|d| {
            xp.data_mut()[k] = x.data()[k] + d;
            eval(&xp)
        });
        xp.data_mut()[k] = x.data()[k];
        probes.0.push((format!("{label}[{k}]"), analytic.data()[k], n));
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub fn sine_layer(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ci, co) = (rng.gen_range(1..6), rng.gen_range(1..6));
    let mut layer = SineLayer::<f64>::new(ci, co, 30.0, &mut rng);
    let x = random(&mut rng, &[2, ci, 3, 4], -1.0, 1.0);
    let c = random(&mut rng, &[2, co, 3, 4], -1.0, 1.0);
    let (_, cache) = layer.forward(&x).unwrap();
    let dx = layer.backward(&cache, &c);
    let mut probes = Probes(Vec::new());
    probe_input(&x, &dx, &mut |x| dot(&layer.infer(x).unwrap(), &c), 12, &mut rng, "x", &mut probes);
    probe_params(&mut layer, &|l| dot(&l.infer(&x).unwrap(), &c), 12, &mut rng, &mut probes);
    probes.outcome()
}

pub fn residual_block(seed: u64) -> Outcome {
    let mut out = Outcome::default();
    for arrangement in [Arrangement::Preactivation, Arrangement::Sandwich] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = rng.gen_range(2..5);
        let padding = if rng.gen_bool(0.5) { Padding::Reflect } else { Padding::Zero };
        let mut block = ResidualBlock::<f64>::new(ch, 3, 30.0, arrangement, padding, &mut rng);
        let x = random(&mut rng, &[2, ch, 5, 6], -1.0, 1.0);
        let c = random(&mut rng, &[2, ch, 5, 6], -1.0, 1.0);
        let (_, cache) = block.forward(&x).unwrap();
        let dx = block.backward(&cache, &c);
        let mut probes = Probes(Vec::new());
        probe_input(&x, &dx, &mut |x| dot(&block.infer(x).unwrap(), &c), 12, &mut rng, "x", &mut probes);
        probe_params(&mut block, &|b| dot(&b.infer(&x).unwrap(), &c), 6, &mut rng, &mut probes);
        out.merge(probes.outcome());
    }
    out
}

/// Generator on an 8x8 input. Even seeds shrink the decoder and use a noise
/// level that leaves the residual inside the ball; odd seeds use one small
/// enough to activate the projection. Both keep the output clear of the
/// clipping range so the objective is smooth.
pub fn sr_generator(seed: u64, channels: usize, per_tensor: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SrGeneratorConfig {
        channels,
        num_resblocks: 2,
        alpha_groups: if seed % 4 < 2 { 1 } else { 3 },
        ..SrGeneratorConfig::default()
    };
    let mut g = SrGenerator::<f64>::new(cfg, &mut rng).unwrap();
    let x = random(&mut rng, &[1, 3, 8, 8], 40.0, 215.0);
    let sigma = if seed % 2 == 0 {
        g.decoder.visit_params_mut("", &mut |_, p| p.value = p.value.scale(1e-4));
        [1e4]
    } else {
        [0.5]
    };
    let c = random(&mut rng, &[1, 3, 32, 32], -1.0, 1.0);
    let (_, cache) = g.forward(&x, &sigma).unwrap();
    let dx = g.backward(&cache, &c);
    let mut probes = Probes(Vec::new());
    probe_input(&x, &dx, &mut |x| dot(&g.infer(x, &sigma).unwrap(), &c), 12, &mut rng, "x", &mut probes);
    probe_params(&mut g, &|g| dot(&g.infer(&x, &sigma).unwrap(), &c), per_tensor, &mut rng, &mut probes);
    probes.outcome()
}

pub fn lr_generator(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LrGeneratorConfig { num_blocks: 2, channels: 4, ..LrGeneratorConfig::default() };
    let mut g = LrGenerator::<f64>::new(cfg, &mut rng).unwrap();
    let x = random(&mut rng, &[2, 3, 6, 6], 0.0, 1.0);
    let c = random(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
    let (_, cache) = g.forward(&x).unwrap();
    let dx = g.backward(&cache, &c);
    let mut probes = Probes(Vec::new());
    probe_input(&x, &dx, &mut |x| dot(&g.infer(x).unwrap(), &c), 12, &mut rng, "x", &mut probes);
    probe_params(&mut g, &|g| dot(&g.infer(&x).unwrap(), &c), 4, &mut rng, &mut probes);
    probes.outcome()
}

/// Both discriminators with batch statistics (running averages untouched).
pub fn discriminators(seed: u64) -> Outcome {
    let mode = BnMode::Train { update_stats: false };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dy = LrDiscriminator::<f64>::new(LrDiscriminatorConfig { channels: vec![3, 4, 4], kernel_size: 5 }, &mut rng).unwrap();
    let x = random(&mut rng, &[3, 3, 16, 16], -1.0, 1.0);
    let (s, cache) = dy.forward(&x, mode).unwrap();
    let c = random(&mut rng, s.shape(), -1.0, 1.0);
    let dx = dy.backward(&cache, &c);
    let mut probes = Probes(Vec::new());
    probe_input(&x, &dx, &mut |x| dot(&dy.forward(x, mode).unwrap().0, &c), 12, &mut rng, "lr.x", &mut probes);
    probe_params(&mut dy, &|d| dot(&d.forward(&x, mode).unwrap().0, &c), 3, &mut rng, &mut probes);
    let mut out = probes.outcome();

    let mut dx_net = SrDiscriminator::<f64>::new(SrDiscriminatorConfig { base_channels: 2 }, &mut rng).unwrap();
    let x = random(&mut rng, &[2, 3, 32, 32], 0.0, 1.0);
    let (s, cache) = dx_net.forward(&x, mode).unwrap();
    let c = random(&mut rng, s.shape(), -1.0, 1.0);
    let dx = dx_net.backward(&cache, &c);
    let mut probes = Probes(Vec::new());
    probe_input(&x, &dx, &mut |x| dot(&dx_net.forward(x, mode).unwrap().0, &c), 12, &mut rng, "sr.x", &mut probes);
    probe_params(&mut dx_net, &|d| dot(&d.forward(&x, mode).unwrap().0, &c), 2, &mut rng, &mut probes);
    out.merge(probes.outcome());
    out
}

fn image_loss(
    name: &str,
    seed: u64,
    f: &mut dyn FnMut(&Tensor<f64>, &Tensor<f64>) -> Loss<f64>,
    shape: &[usize],
) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random(&mut rng, shape, 0.0, 1.0);
    let t = random(&mut rng, shape, 0.0, 1.0);
    let analytic = f(&g, &t).grad;
    let mut probes = Probes(Vec::new());
    probe_input(&g, &analytic, &mut |x| f(x, &t).value, 16, &mut rng, name, &mut probes);
    probes.outcome()
}

fn score_loss(name: &str, seed: u64, f: &dyn Fn(&Tensor<f64>, &Tensor<f64>) -> ScoreLoss<f64>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..6);
    let real = random(&mut rng, &[n, 1, 2, 2], -3.0, 3.0);
    let fake = random(&mut rng, &[n, 1, 2, 2], -3.0, 3.0);
    let l = f(&real, &fake);
    let mut probes = Probes(Vec::new());
    probe_input(&real, &l.d_real, &mut |x| f(x, &fake).value, 6, &mut rng, &format!("{name}.real"), &mut probes);
    probe_input(&fake, &l.d_fake, &mut |x| f(&real, x).value, 6, &mut rng, &format!("{name}.fake"), &mut probes);
    probes.outcome()
}

/// Every loss with an analytic gradient.
pub fn losses(seed: u64) -> Vec<(&'static str, Outcome)> {
    let shape = [2, 3, 12, 12];
    let filter = FrequencyFilter::new(5).unwrap();
    let mut fx = ConvFeatures::<f64>::fallback();
    vec![
        ("l1", image_loss("l1", seed, &mut |a, b| l1_mean(a, b).unwrap(), &shape)),
        ("content", image_loss("content", seed, &mut |a, b| content_loss(a, b).unwrap(), &shape)),
        ("color", image_loss("color", seed, &mut |a, b| color_loss(a, b, &filter).unwrap(), &shape)),
        (
            "tv_sum",
            image_loss("tv", seed, &mut |a, b| tv_loss(a, b, TvReduction::SumPerImage).unwrap(), &shape),
        ),
        (
            "tv_mean",
            image_loss("tv", seed, &mut |a, b| tv_loss(a, b, TvReduction::MeanPerElement).unwrap(), &shape),
        ),
        (
            "perceptual",
            image_loss("perceptual", seed, &mut |a, b| perceptual_loss(a, b, &mut fx).unwrap(), &shape),
        ),
        (
            "texture",
            image_loss("texture", seed, &mut |a, _| texture_loss(&a.map(|v| 6.0 * v - 3.0)).unwrap().scaled(6.0), &[3, 1, 2, 2]),
        ),
        ("bce", score_loss("bce", seed, &|r, f| discriminator_bce(r, f).unwrap())),
        (
            "ragan_g",
            score_loss("ragan_g", seed, &|r, f| ragan_loss(r, f, RaganSide::Generator).unwrap()),
        ),
        (
            "ragan_d",
            score_loss("ragan_d", seed, &|r, f| ragan_loss(r, f, RaganSide::Discriminator).unwrap()),
        ),
    ]
}

trait Scaled {
    fn scaled(self, k: f64) -> Self;
}

impl Scaled for Loss<f64> {
    /// Gradient through the affine reparametrisation `s = k x + b`.
    fn scaled(self, k: f64) -> Self {
        Loss { value: self.value, grad: self.grad.scale(k) }
    }
}

mod common;

use common::gradcheck::{self, Outcome, SEEDS};

fn all_seeds(f: impl Fn(u64) -> Outcome) {
    for seed in 0..SEEDS {
        let o = f(seed);
        assert!(o.passed(), "seed {seed}: relative error {:.3e} at {} ({} probes)", o.worst, o.at, o.probes);
    }
}

#[test]
fn sine_layer_gradients() {
    all_seeds(gradcheck::sine_layer);
}

#[test]
fn residual_block_gradients() {
    all_seeds(gradcheck::residual_block);
}

#[test]
fn sr_generator_gradients() {
    all_seeds(|s| gradcheck::sr_generator(s, 4, 3));
}

#[test]
fn sr_generator_default_width_gradients() {
    let o = gradcheck::sr_generator(0, 64, 1);
    assert!(o.passed(), "{o:?}");
}

#[test]
fn lr_generator_gradients() {
    all_seeds(gradcheck::lr_generator);
}

#[test]
fn discriminator_gradients() {
    all_seeds(gradcheck::discriminators);
}

#[test]
fn loss_gradients() {
    for seed in 0..SEEDS {
        for (name, o) in gradcheck::losses(seed) {
            assert!(o.passed(), "{name} seed {seed}: {:.3e} at {}", o.worst, o.at);
        }
    }
}

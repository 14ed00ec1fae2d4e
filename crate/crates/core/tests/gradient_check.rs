//! Analytic gradients against central finite differences.

use fedplat_core::model::config::{Activation, LayerSpec, ModelConfig, OutputActivation, SeedPolicy};
use fedplat_core::model::network::{build_model, loss_and_grad};
use fedplat_core::ModelWeights;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;
/// Denominator floor so coordinates whose true gradient is ~0 are compared
/// in absolute terms; FD round-off is about eps * |loss| / h ~ 1e-10.
const FLOOR: f64 = 1e-6;

fn random_config(rng: &mut ChaCha8Rng, smooth_only: bool) -> ModelConfig {
    let acts: &[Activation] = if smooth_only {
        &[Activation::Tanh, Activation::Sigmoid, Activation::Linear]
    } else {
        &[Activation::Tanh, Activation::Sigmoid, Activation::Linear, Activation::Relu]
    };
    let n_hidden = rng.random_range(0..=2);
    let mut layers: Vec<LayerSpec> = (0..n_hidden)
        .map(|_| LayerSpec {
            units: rng.random_range(1..=5),
            activation: acts[rng.random_range(0..acts.len())],
            dropout_rate: if rng.random_bool(0.3) { 0.25 } else { 0.0 },
        })
        .collect();
    layers.push(LayerSpec {
        units: 1,
        activation: acts[rng.random_range(0..acts.len())],
        dropout_rate: 0.0,
    });
    ModelConfig {
        input_dim: rng.random_range(1..=4),
        layers,
        output_activation: OutputActivation::Sigmoid,
        seed_policy: SeedPolicy::Derived,
    }
}

fn loss_at(cfg: &ModelConfig, w: &ModelWeights, x: &Array2<f64>, y: &[u8], mask_seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    loss_and_grad(cfg, w, x.view(), y, None, &mut rng).unwrap().0
}

/// Maximum relative error over all coordinates of one random problem.
fn max_rel_error(seed: u64, smooth_only: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = random_config(&mut rng, smooth_only);
    let w0 = build_model(&cfg, seed).unwrap();
    // perturb away from Glorot init so biases are non-zero too
    let flat: Vec<f64> = w0.flatten_f64().iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
    let w = w0.with_flat_f64(&flat).unwrap();
    let n = rng.random_range(1..=6);
    let x = Array2::from_shape_fn((n, cfg.input_dim), |_| rng.random_range(-2.0..2.0));
    let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
    let mask_seed = rng.random();

    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let (_, grads) = loss_and_grad(&cfg, &w, x.view(), &y, None, &mut mask_rng).unwrap();
    let analytic = grads.flatten_f64();

    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += H;
        let mut minus = flat.clone();
        minus[i] -= H;
        let lp = loss_at(&cfg, &w.with_flat_f64(&plus).unwrap(), &x, &y, mask_seed);
        let lm = loss_at(&cfg, &w.with_flat_f64(&minus).unwrap(), &x, &y, mask_seed);
        let numeric = (lp - lm) / (2.0 * H);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn smooth_networks_match_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..150 {
        let e = max_rel_error(seed, true);
        assert!(e < TOL, "seed {seed}: relative error {e:e}");
        worst = worst.max(e);
    }
    eprintln!("worst relative error over 150 smooth networks: {worst:e}");
}

#[test]
fn relu_networks_match_away_from_kinks() {
    // a finite difference straddling a relu kink is not a derivative; such
    // draws are rare with continuous inputs, so count them instead of failing
    let mut bad = 0;
    for seed in 1000..1100 {
        if max_rel_error(seed, false) >= TOL {
            bad += 1;
        }
    }
    assert!(bad <= 2, "{bad} of 100 relu-bearing networks disagreed");
}

#[test]
fn modifier_is_added_to_raw_gradient() {
    use fedplat_core::model::train::GradientModifier;
    struct AddOne;
    impl GradientModifier for AddOne {
        fn modify(&self, _w: &ModelWeights, g: &mut ModelWeights) -> fedplat_core::Result<()> {
            *g = g.map(|v| v + 1.0);
            Ok(())
        }
    }
    let cfg = ModelConfig::mlp(3, &[4], Activation::Tanh, 0.0);
    let w = build_model(&cfg, 5).unwrap();
    let x = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 / 10.0);
    let y = [0, 1, 1, 0];
    let mut r1 = ChaCha8Rng::seed_from_u64(0);
    let mut r2 = ChaCha8Rng::seed_from_u64(0);
    let (_, raw) = loss_and_grad(&cfg, &w, x.view(), &y, None, &mut r1).unwrap();
    let (_, modded) = loss_and_grad(&cfg, &w, x.view(), &y, Some(&AddOne), &mut r2).unwrap();
    for (a, b) in raw.flatten_f64().iter().zip(modded.flatten_f64()) {
        assert_eq!(a + 1.0, b);
    }
}

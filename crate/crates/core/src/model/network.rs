//! Dense network: Glorot initialization, forward pass with inverted dropout, and
//! backpropagation of mean binary cross-entropy.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Activation, ModelConfig};
use super::tensor::{ModelWeights, TensorBlock};
use super::train::GradientModifier;
use crate::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Kernels are Glorot-uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.check_dims()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(config.layers.len() * 2);
    let mut fan_in = config.input_dim;
    for (i, layer) in config.layers.iter().enumerate() {
        let fan_out = layer.units;
        let limit = glorot_limit(fan_in, fan_out);
        let kernel: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        blocks.push(TensorBlock::from_f64(
            ModelConfig::kernel_name(i),
            vec![fan_in, fan_out],
            kernel,
        )?);
        blocks.push(TensorBlock::zeros(ModelConfig::bias_name(i), vec![fan_out])?);
        fan_in = fan_out;
    }
    ModelWeights::new(blocks)
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn activate(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Tanh => z.tanh(),
        Activation::Relu => z.max(0.0),
        Activation::Sigmoid => sigmoid(z),
        Activation::Linear => z,
    }
}

/// Derivative expressed through the pre-activation `z` and output `h`.
fn activate_grad(act: Activation, z: f64, h: f64) -> f64 {
    match act {
        Activation::Tanh => 1.0 - h * h,
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Sigmoid => h * (1.0 - h),
        Activation::Linear => 1.0,
    }
}

struct LayerParams<'a> {
    kernel: ArrayView2<'a, f64>,
    bias: &'a [f64],
}

fn layer_params<'a>(
    config: &ModelConfig,
    weights: &'a ModelWeights,
) -> Result<Vec<LayerParams<'a>>> {
    let blocks = weights.blocks();
    if blocks.len() != config.layers.len() * 2 {
        return Err(Error::Structure(format!(
            "config has {} layers but weights have {} blocks",
            config.layers.len(),
            blocks.len()
        )));
    }
    let mut fan_in = config.input_dim;
    let mut out = Vec::with_capacity(config.layers.len());
    for (i, layer) in config.layers.iter().enumerate() {
        let k = &blocks[2 * i];
        let b = &blocks[2 * i + 1];
        if k.name() != ModelConfig::kernel_name(i) || b.name() != ModelConfig::bias_name(i) {
            return Err(Error::Structure(format!(
                "unexpected block names {} / {} for layer {i}",
                k.name(),
                b.name()
            )));
        }
        if k.shape() != [fan_in, layer.units] || b.shape() != [layer.units] {
            return Err(Error::Structure(format!(
                "layer {i}: kernel {:?} bias {:?}, expected [{fan_in}, {}] / [{}]",
                k.shape(),
                b.shape(),
                layer.units,
                layer.units
            )));
        }
        let kv = k
            .as_f64()
            .ok_or_else(|| Error::Structure("training math requires f64 weights".into()))?;
        let bv = b
            .as_f64()
            .ok_or_else(|| Error::Structure("training math requires f64 weights".into()))?;
        out.push(LayerParams {
            kernel: ArrayView2::from_shape((fan_in, layer.units), kv)
                .map_err(|e| Error::Shape(e.to_string()))?,
            bias: bv,
        });
        fan_in = layer.units;
    }
    Ok(out)
}

struct LayerCache {
    input: Array2<f64>,
    z: Array2<f64>,
    h: Array2<f64>,
    mask: Option<Array2<f64>>,
}

/// Runs the stack and returns the final-layer output (pre-sigmoid) plus caches.
fn run_layers<R: Rng + ?Sized>(
    config: &ModelConfig,
    params: &[LayerParams<'_>],
    batch: ArrayView2<'_, f64>,
    mode: Mode,
    rng: &mut R,
    keep_cache: bool,
) -> (Array1<f64>, Vec<LayerCache>) {
    let mut caches = Vec::new();
    let mut a = batch.to_owned();
    for (layer, p) in config.layers.iter().zip(params) {
        let mut z = a.dot(&p.kernel);
        for mut row in z.rows_mut() {
            for (v, &b) in row.iter_mut().zip(p.bias) {
                *v += b;
            }
        }
        let h = z.mapv(|v| activate(layer.activation, v));
        let mask = if mode == Mode::Train && layer.dropout_rate > 0.0 {
            let rate = layer.dropout_rate;
            let scale = 1.0 / (1.0 - rate);
            Some(Array2::from_shape_fn(h.raw_dim(), |_| {
                if rng.random::<f64>() >= rate {
                    scale
                } else {
                    0.0
                }
            }))
        } else {
            None
        };
        let out = match &mask {
            Some(m) => &h * m,
            None => h.clone(),
        };
        if keep_cache {
            caches.push(LayerCache {
                input: a,
                z,
                h,
                mask,
            });
        }
        a = out;
    }
    let logits = a.column(0).to_owned();
    (logits, caches)
}

fn check_batch(config: &ModelConfig, batch: &ArrayView2<'_, f64>) -> Result<()> {
    if batch.ncols() != config.input_dim {
        return Err(Error::Shape(format!(
            "batch has {} columns, model expects {}",
            batch.ncols(),
            config.input_dim
        )));
    }
    if config.layers.last().map(|l| l.units) != Some(1) {
        return Err(Error::Shape("output layer must have a single unit".into()));
    }
    Ok(())
}

/// Class-1 probabilities for every row of `batch`.
pub fn forward<R: Rng + ?Sized>(
    config: &ModelConfig,
    weights: &ModelWeights,
    batch: ArrayView2<'_, f64>,
    mode: Mode,
    rng: &mut R,
) -> Result<Array1<f64>> {
    check_batch(config, &batch)?;
    let params = layer_params(config, weights)?;
    let (logits, _) = run_layers(config, &params, batch, mode, rng, false);
    Ok(logits.mapv(sigmoid))
}

/// Mean binary cross-entropy over `probs`, computed on clamped probabilities.
pub fn bce_loss(probs: &[f64], labels: &[u8]) -> f64 {
    let n = probs.len().max(1) as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n
}

/// Mean binary cross-entropy and its gradient in train mode.
///
/// The gradient is the exact derivative of the unclamped loss (`p - y` at the
/// logit); clamping only affects the reported loss. `modifier`, when given, is
/// added to the raw gradient.
pub fn loss_and_grad<R: Rng + ?Sized>(
    config: &ModelConfig,
    weights: &ModelWeights,
    batch: ArrayView2<'_, f64>,
    labels: &[u8],
    modifier: Option<&dyn GradientModifier>,
    rng: &mut R,
) -> Result<(f64, ModelWeights)> {
    check_batch(config, &batch)?;
    if batch.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} labels",
            batch.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let params = layer_params(config, weights)?;
    let (logits, caches) = run_layers(config, &params, batch, Mode::Train, rng, true);
    let probs: Vec<f64> = logits.iter().map(|&v| sigmoid(v)).collect();
    let loss = bce_loss(&probs, labels);

    let n = labels.len() as f64;
    let mut upstream = Array2::from_shape_fn((labels.len(), 1), |(i, _)| {
        (probs[i] - f64::from(labels[i])) / n
    });

    let mut grads: Vec<TensorBlock> = Vec::with_capacity(params.len() * 2);
    for (i, (layer, cache)) in config.layers.iter().zip(&caches).enumerate().rev() {
        let dh = match &cache.mask {
            Some(m) => &upstream * m,
            None => upstream,
        };
        let mut dz = dh;
        ndarray::Zip::from(&mut dz)
            .and(&cache.z)
            .and(&cache.h)
            .for_each(|d, &z, &h| *d *= activate_grad(layer.activation, z, h));
        let dk = cache.input.t().dot(&dz);
        let db = dz.sum_axis(Axis(0));
        upstream = dz.dot(&params[i].kernel.t());
        grads.push(TensorBlock::from_f64(
            ModelConfig::bias_name(i),
            vec![layer.units],
            db.to_vec(),
        )?);
        let shape = dk.shape().to_vec();
        grads.push(TensorBlock::from_f64(
            ModelConfig::kernel_name(i),
            shape,
            dk.into_iter().collect(),
        )?);
    }
    grads.reverse();
    let mut grads = ModelWeights::new(grads)?;
    if let Some(m) = modifier {
        m.modify(weights, &mut grads)?;
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{LayerSpec, OutputActivation, SeedPolicy};
    use ndarray::array;

    fn linear_cfg(input_dim: usize, units: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            layers: vec![LayerSpec {
                units,
                activation: Activation::Linear,
                dropout_rate: 0.0,
            }],
            output_activation: OutputActivation::Sigmoid,
            seed_policy: SeedPolicy::Explicit(7),
        }
    }

    #[test]
    fn build_model_block_layout() {
        let w = build_model(&linear_cfg(3, 2), 7).unwrap();
        let names: Vec<_> = w.blocks().iter().map(|b| b.name().to_string()).collect();
        assert_eq!(names, ["dense_0/kernel", "dense_0/bias"]);
        assert_eq!(w.blocks()[0].shape(), [3, 2]);
        assert_eq!(w.blocks()[1].as_f64().unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn build_model_is_deterministic() {
        let cfg = ModelConfig::mlp(5, &[4, 3], Activation::Tanh, 0.5);
        let a = build_model(&cfg, 11).unwrap();
        let b = build_model(&cfg, 11).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&build_model(&cfg, 12).unwrap()));
    }

    #[test]
    fn glorot_bounds_512() {
        let limit = glorot_limit(512, 512);
        assert!((limit - (6.0f64 / 1024.0).sqrt()).abs() < 1e-15);
        assert!((limit - 0.0765).abs() < 5e-5);
        let cfg = linear_cfg(512, 512);
        let w = build_model(&cfg, 3).unwrap();
        let k = w.blocks()[0].as_f64().unwrap();
        let max = k.iter().cloned().fold(f64::MIN, f64::max);
        let min = k.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max <= limit && min >= -limit);
        // 262144 uniform draws come within 0.1% of both edges
        assert!(max > 0.999 * limit && min < -0.999 * limit);
    }

    #[test]
    fn rejects_non_positive_dims() {
        let mut cfg = linear_cfg(3, 2);
        cfg.layers[0].units = 0;
        assert!(build_model(&cfg, 0).is_err());
    }

    #[test]
    fn zero_parameters_give_one_half() {
        let cfg = ModelConfig::mlp(3, &[4], Activation::Tanh, 0.0);
        let w = build_model(&cfg, 1).unwrap().zeros_like();
        let batch = array![[1.0, -2.0, 3.0], [0.1, 0.2, 0.3]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = forward(&cfg, &w, batch.view(), Mode::Infer, &mut rng).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn hand_evaluated_linear_net() {
        let cfg = linear_cfg(2, 1);
        let w = ModelWeights::new(vec![
            TensorBlock::from_f64("dense_0/kernel", vec![2, 1], vec![1.0, 1.0]).unwrap(),
            TensorBlock::from_f64("dense_0/bias", vec![1], vec![0.0]).unwrap(),
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = forward(&cfg, &w, array![[1.0, 2.0]].view(), Mode::Infer, &mut rng).unwrap();
        // 1 / (1 + e^-3)
        assert!((p[0] - 0.952_574_126_822_433_4).abs() < 1e-12);
    }

    #[test]
    fn dropout_zero_train_equals_infer() {
        let cfg = ModelConfig::mlp(3, &[5, 4], Activation::Tanh, 0.0);
        let w = build_model(&cfg, 2).unwrap();
        let batch = array![[0.3, -0.1, 0.9], [1.0, 2.0, -1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = forward(&cfg, &w, batch.view(), Mode::Train, &mut rng).unwrap();
        let b = forward(&cfg, &w, batch.view(), Mode::Infer, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = linear_cfg(2, 1);
        let w = build_model(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(forward(&cfg, &w, array![[1.0, 2.0, 3.0]].view(), Mode::Infer, &mut rng).is_err());
        assert!(loss_and_grad(&cfg, &w, array![[1.0, 2.0]].view(), &[1, 0], None, &mut rng).is_err());
    }

    #[test]
    fn saturated_correct_predictions_have_no_loss() {
        let cfg = linear_cfg(1, 1);
        let w = ModelWeights::new(vec![
            TensorBlock::from_f64("dense_0/kernel", vec![1, 1], vec![100.0]).unwrap(),
            TensorBlock::from_f64("dense_0/bias", vec![1], vec![0.0]).unwrap(),
        ])
        .unwrap();
        let batch = array![[1.0], [-1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, grads) = loss_and_grad(&cfg, &w, batch.view(), &[1, 0], None, &mut rng).unwrap();
        assert!(loss < 1e-6);
        assert!(grads.flatten_f64().iter().all(|g| g.abs() < 1e-12));
    }
}

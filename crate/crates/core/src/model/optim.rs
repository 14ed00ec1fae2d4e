use super::tensor::ModelWeights;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        t: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn sgd() -> Self {
        Optimizer::Sgd
    }

    pub fn adam(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Optimizer::Adam {
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of `weights` in place using `grads`.
    ///
    /// Adam: `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, bias-corrected,
    /// then `w <- w - lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, weights: &mut ModelWeights, grads: &ModelWeights, lr: f64) -> Result<()> {
        weights.check_compatible(grads)?;
        match self {
            Optimizer::Sgd => weights.axpy(-lr, grads),
            Optimizer::Adam {
                beta1,
                beta2,
                epsilon,
                t,
                m,
                v,
            } => {
                if m.is_empty() {
                    *m = grads.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
                    *v = m.clone();
                }
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for (((wb, gb), mb), vb) in weights
                    .blocks_mut()
                    .iter_mut()
                    .zip(grads.blocks())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    let g = gb
                        .as_f64()
                        .ok_or_else(|| Error::Structure("gradients must be f64".into()))?;
                    let w = wb
                        .as_f64_mut()
                        .ok_or_else(|| Error::Structure("weights must be f64".into()))?;
                    for i in 0..w.len() {
                        mb[i] = *beta1 * mb[i] + (1.0 - *beta1) * g[i];
                        vb[i] = *beta2 * vb[i] + (1.0 - *beta2) * g[i] * g[i];
                        let m_hat = mb[i] / bc1;
                        let v_hat = vb[i] / bc2;
                        w[i] -= lr * m_hat / (v_hat.sqrt() + *epsilon);
                    }
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tensor::TensorBlock;

    fn scalar(x: f64) -> ModelWeights {
        ModelWeights::new(vec![TensorBlock::from_f64("w", vec![1], vec![x]).unwrap()]).unwrap()
    }

    #[test]
    fn sgd_is_plain_gradient_step() {
        let mut w = scalar(1.0);
        Optimizer::sgd().step(&mut w, &scalar(0.5), 0.1).unwrap();
        assert_eq!(w.flatten_f64(), vec![1.0 - 0.1 * 0.5]);
    }

    #[test]
    fn first_adam_step_by_hand() {
        // m = 0.1, v = 0.001; m_hat = 0.1 / 0.1 = 1, v_hat = 0.001 / 0.001 = 1
        let eps = 1e-7;
        let mut w = scalar(0.0);
        let mut opt = Optimizer::adam(0.9, 0.999, eps);
        opt.step(&mut w, &scalar(1.0), 0.001).unwrap();
        let expected = -0.001 * (0.1 / (1.0 - 0.9)) / ((0.001f64 / (1.0 - 0.999)).sqrt() + eps);
        let dw = w.flatten_f64()[0];
        assert!((dw - expected).abs() < 1e-15);
        assert!((dw + 0.001).abs() < 1e-9);
    }
}

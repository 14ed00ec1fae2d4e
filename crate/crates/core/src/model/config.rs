//! JSON-serializable description of a dense binary classifier.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    Sigmoid,
}

/// Where the initialization seed comes from.
///
/// `{"explicit": 42}` pins the seed; `"derived"` derives it from the experiment id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SeedPolicy {
    Explicit(u64),
    #[default]
    Derived,
}

impl SeedPolicy {
    pub fn resolve(self, experiment_id: &str) -> u64 {
        match self {
            SeedPolicy::Explicit(seed) => seed,
            SeedPolicy::Derived => fnv1a(experiment_id.as_bytes()),
        }
    }
}

/// Stable 64-bit FNV-1a, used wherever a seed is derived from a string.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub units: usize,
    pub activation: Activation,
    #[serde(default)]
    pub dropout_rate: f64,
}

/// Dense stack: every entry of `layers` is a fully connected layer, the last one
/// producing the logit that `output_activation` turns into a probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub output_activation: OutputActivation,
    #[serde(default)]
    pub seed_policy: SeedPolicy,
}

impl ModelConfig {
    /// Hidden tanh layers with dropout followed by a single linear output unit.
    pub fn mlp(input_dim: usize, hidden: &[usize], activation: Activation, dropout: f64) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&units| LayerSpec {
                units,
                activation,
                dropout_rate: dropout,
            })
            .collect();
        layers.push(LayerSpec {
            units: 1,
            activation: Activation::Linear,
            dropout_rate: 0.0,
        });
        Self {
            input_dim,
            layers,
            output_activation: OutputActivation::Sigmoid,
            seed_policy: SeedPolicy::Derived,
        }
    }

    /// Dimension checks needed to allocate parameters.
    pub fn check_dims(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("at least one layer is required".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.units == 0 {
                return Err(Error::InvalidConfig(format!("layers[{i}].units must be positive")));
            }
            if !(0.0..1.0).contains(&layer.dropout_rate) {
                return Err(Error::InvalidConfig(format!(
                    "layers[{i}].dropout_rate must be in [0, 1), got {}",
                    layer.dropout_rate
                )));
            }
        }
        Ok(())
    }

    /// Full validation for a binary classifier: dimension checks plus a single
    /// output unit without dropout.
    pub fn validate(&self) -> Result<()> {
        self.check_dims()?;
        let last = self.layers.last().expect("checked non-empty");
        if last.units != 1 {
            return Err(Error::InvalidConfig(format!(
                "output layer must have exactly 1 unit, got {}",
                last.units
            )));
        }
        if last.dropout_rate != 0.0 {
            return Err(Error::InvalidConfig("output layer must not use dropout".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn kernel_name(layer: usize) -> String {
        format!("dense_{layer}/kernel")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("dense_{layer}/bias")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let cfg = ModelConfig::mlp(21, &[64, 64], Activation::Tanh, 0.5);
        let text = cfg.to_json().unwrap();
        assert_eq!(ModelConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn canonical_field_names() {
        let text = r#"{
            "input_dim": 3,
            "layers": [{"units": 1, "activation": "linear", "dropout_rate": 0.0}],
            "output_activation": "sigmoid",
            "seed_policy": {"explicit": 7}
        }"#;
        let cfg = ModelConfig::from_json(text).unwrap();
        assert_eq!(cfg.seed_policy, SeedPolicy::Explicit(7));
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = r#"{"input_dim": 3, "layers": [], "optimizer": "adam"}"#;
        assert!(ModelConfig::from_json(text).is_err());
        let text = r#"{"input_dim": 3, "layers": [{"units": 1, "activation": "linear", "bias": true}]}"#;
        assert!(ModelConfig::from_json(text).is_err());
    }

    #[test]
    fn validation_rules() {
        let mut cfg = ModelConfig::mlp(4, &[8], Activation::Relu, 0.0);
        cfg.validate().unwrap();
        cfg.layers[1].units = 2;
        assert!(cfg.check_dims().is_ok());
        assert!(cfg.validate().is_err());
        cfg.layers[0].dropout_rate = 1.0;
        assert!(cfg.check_dims().is_err());
        cfg.input_dim = 0;
        assert!(cfg.check_dims().is_err());
    }

    #[test]
    fn derived_seed_is_stable() {
        assert_eq!(SeedPolicy::Derived.resolve("abc"), SeedPolicy::Derived.resolve("abc"));
        assert_ne!(SeedPolicy::Derived.resolve("abc"), SeedPolicy::Derived.resolve("abd"));
        // reference FNV-1a value for "a"
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}

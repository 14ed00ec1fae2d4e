//! Aggregation rules and client-side local objectives for FedAvg, FedProx,
//! FedDyn and SCAFFOLD.
//!
//! Server side, [`aggregate`] turns the replies of one round into the next global
//! model and updates [`ServerAggState`] (FedDyn `h`, SCAFFOLD `c`). Client side,
//! [`make_modifier`] builds the gradient correction used during local training
//! and [`finalize_client_update`] advances [`ClientAlgState`] afterwards.
//!
//! All functions are pure: inputs are borrowed, new states are returned.

pub mod scheduler;

use serde::{Deserialize, Serialize};

use crate::model::metrics::EvalMetrics;
use crate::model::tensor::ModelWeights;
use crate::model::train::GradientModifier;
use crate::{Error, Result};

pub use scheduler::{early_stop_step, plateau_step, Direction, SchedulerConfig, SchedulerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmKind {
    FedAvg,
    FedProx,
    FedDyn,
    Scaffold,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 4] = [
        AlgorithmKind::FedAvg,
        AlgorithmKind::FedProx,
        AlgorithmKind::FedDyn,
        AlgorithmKind::Scaffold,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::FedAvg => "fedavg",
            AlgorithmKind::FedProx => "fedprox",
            AlgorithmKind::FedDyn => "feddyn",
            AlgorithmKind::Scaffold => "scaffold",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            AlgorithmKind::FedAvg => "FedAvg",
            AlgorithmKind::FedProx => "FedProx",
            AlgorithmKind::FedDyn => "FedDyn",
            AlgorithmKind::Scaffold => "SCAFFOLD",
        }
    }
}

impl std::str::FromStr for AlgorithmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AlgorithmKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown algorithm {s:?}")))
    }
}

fn default_server_step() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmParams {
    pub kind: AlgorithmKind,
    /// FedProx proximal coefficient, FedDyn regularization coefficient.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    /// Share of the previous global model kept by FedAvg/FedProx.
    #[serde(default)]
    pub retained_fraction: f64,
    /// SCAFFOLD global step size.
    #[serde(default = "default_server_step")]
    pub server_step: f64,
    /// SCAFFOLD local step size used in the control-variate update.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_lr: Option<f64>,
}

impl AlgorithmParams {
    pub fn new(kind: AlgorithmKind) -> Self {
        Self {
            kind,
            mu: None,
            retained_fraction: 0.0,
            server_step: 1.0,
            local_lr: None,
        }
    }

    pub fn fedavg() -> Self {
        Self::new(AlgorithmKind::FedAvg)
    }

    pub fn fedprox(mu: f64) -> Self {
        Self {
            mu: Some(mu),
            ..Self::new(AlgorithmKind::FedProx)
        }
    }

    pub fn feddyn(mu: f64) -> Self {
        Self {
            mu: Some(mu),
            ..Self::new(AlgorithmKind::FedDyn)
        }
    }

    pub fn scaffold(local_lr: f64) -> Self {
        Self {
            local_lr: Some(local_lr),
            ..Self::new(AlgorithmKind::Scaffold)
        }
    }

    pub fn mu(&self) -> f64 {
        self.mu.unwrap_or(0.0)
    }

    /// Field-level problems as `(field, message)` pairs.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        match (self.kind, self.mu) {
            (AlgorithmKind::FedProx, None) => {
                out.push(("mu", "required for fedprox".to_string()))
            }
            (AlgorithmKind::FedProx, Some(mu)) if !(mu.is_finite() && mu >= 0.0) => {
                out.push(("mu", "must be a finite number >= 0".to_string()))
            }
            (AlgorithmKind::FedDyn, None) => out.push(("mu", "required for feddyn".to_string())),
            (AlgorithmKind::FedDyn, Some(mu)) if !(mu.is_finite() && mu > 0.0) => {
                out.push(("mu", "must be a finite number > 0".to_string()))
            }
            _ => {}
        }
        if self.kind == AlgorithmKind::Scaffold {
            match self.local_lr {
                None => out.push(("local_lr", "required for scaffold".to_string())),
                Some(lr) if !(lr.is_finite() && lr > 0.0) => {
                    out.push(("local_lr", "must be a finite number > 0".to_string()))
                }
                _ => {}
            }
        }
        if !(0.0..1.0).contains(&self.retained_fraction) {
            out.push(("retained_fraction", "must be in [0, 1)".to_string()));
        }
        if !(self.server_step.is_finite() && self.server_step > 0.0) {
            out.push(("server_step", "must be a finite number > 0".to_string()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().first() {
            None => Ok(()),
            Some((field, msg)) => Err(Error::InvalidConfig(format!("{field} {msg}"))),
        }
    }
}

/// Algorithm state held by the parameter server across rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerAggState {
    pub round: u64,
    pub feddyn_h: ModelWeights,
    pub scaffold_c: ModelWeights,
    pub n_clients_total: usize,
}

impl ServerAggState {
    pub fn new(global: &ModelWeights, n_clients_total: usize) -> Self {
        Self {
            round: 0,
            feddyn_h: global.zeros_like(),
            scaffold_c: global.zeros_like(),
            n_clients_total,
        }
    }
}

/// Algorithm state a client keeps across the rounds of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientAlgState {
    pub scaffold_c_i: ModelWeights,
    pub feddyn_g_k: ModelWeights,
}

impl ClientAlgState {
    pub fn new(global: &ModelWeights) -> Self {
        Self {
            scaffold_c_i: global.zeros_like(),
            feddyn_g_k: global.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: String,
    pub new_weights: ModelWeights,
    pub n_train_samples: usize,
    /// SCAFFOLD only: `c_i+ - c_i`.
    pub delta_c: Option<ModelWeights>,
    pub post_eval: Option<EvalMetrics>,
    pub pre_eval: Option<EvalMetrics>,
}

/// Gradient correction `g + correction + mu * (w - anchor)`.
#[derive(Debug, Clone, Default)]
pub struct LocalObjective {
    prox: Option<(f64, ModelWeights)>,
    correction: Option<ModelWeights>,
}

impl LocalObjective {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.prox.is_none() && self.correction.is_none()
    }
}

impl GradientModifier for LocalObjective {
    fn modify(&self, weights: &ModelWeights, grads: &mut ModelWeights) -> Result<()> {
        if let Some(c) = &self.correction {
            grads.axpy(1.0, c)?;
        }
        if let Some((mu, anchor)) = &self.prox {
            let diff = weights.sub(anchor)?;
            grads.axpy(*mu, &diff)?;
        }
        Ok(())
    }
}

/// Builds the local objective for one round.
///
/// - fedavg: identity
/// - fedprox: `g + mu (w - global)`
/// - scaffold: `g - c_i + c`
/// - feddyn: `g - g_k + mu (w - global)`
pub fn make_modifier(
    params: &AlgorithmParams,
    global: &ModelWeights,
    server_control: Option<&ModelWeights>,
    client_state: &ClientAlgState,
) -> Result<LocalObjective> {
    client_state.scaffold_c_i.check_compatible(global)?;
    client_state.feddyn_g_k.check_compatible(global)?;
    let prox = |mu: f64| (mu != 0.0).then(|| (mu, global.clone()));
    Ok(match params.kind {
        AlgorithmKind::FedAvg => LocalObjective::identity(),
        AlgorithmKind::FedProx => LocalObjective {
            prox: prox(params.mu()),
            correction: None,
        },
        AlgorithmKind::Scaffold => {
            let c = server_control
                .ok_or_else(|| Error::Structure("scaffold needs the server control variate".into()))?;
            let correction = c.sub(&client_state.scaffold_c_i)?;
            let zero = correction.flatten_f64().iter().all(|&v| v == 0.0);
            LocalObjective {
                prox: None,
                correction: (!zero).then_some(correction),
            }
        }
        AlgorithmKind::FedDyn => {
            let correction = client_state.feddyn_g_k.scale(-1.0);
            let zero = correction.flatten_f64().iter().all(|&v| v == 0.0);
            LocalObjective {
                prox: prox(params.mu()),
                correction: (!zero).then_some(correction),
            }
        }
    })
}

/// Client-side state update after local training.
///
/// Returns `(delta_c, new_state)`; `delta_c` is set for SCAFFOLD only.
/// SCAFFOLD: `c_i+ = c_i - c + (global - trained) / (K * local_lr)`.
/// FedDyn: `g_k <- g_k - mu (trained - global)`.
pub fn finalize_client_update(
    params: &AlgorithmParams,
    global: &ModelWeights,
    trained: &ModelWeights,
    server_control: Option<&ModelWeights>,
    client_state: &ClientAlgState,
    k_steps: usize,
) -> Result<(Option<ModelWeights>, ClientAlgState)> {
    global.check_compatible(trained)?;
    match params.kind {
        AlgorithmKind::FedAvg | AlgorithmKind::FedProx => Ok((None, client_state.clone())),
        AlgorithmKind::Scaffold => {
            if k_steps == 0 {
                return Err(Error::Training(
                    "scaffold control update needs at least one local step".into(),
                ));
            }
            let local_lr = params
                .local_lr
                .ok_or_else(|| Error::InvalidConfig("scaffold requires local_lr".into()))?;
            let c = server_control
                .ok_or_else(|| Error::Structure("scaffold needs the server control variate".into()))?;
            let coef = 1.0 / (k_steps as f64 * local_lr);
            let displacement = global.sub(trained)?;
            let mut c_plus = client_state.scaffold_c_i.sub(c)?;
            c_plus.axpy(coef, &displacement)?;
            let delta_c = c_plus.sub(&client_state.scaffold_c_i)?;
            Ok((
                Some(delta_c),
                ClientAlgState {
                    scaffold_c_i: c_plus,
                    feddyn_g_k: client_state.feddyn_g_k.clone(),
                },
            ))
        }
        AlgorithmKind::FedDyn => {
            let displacement = trained.sub(global)?;
            let mut g_k = client_state.feddyn_g_k.clone();
            g_k.axpy(-params.mu(), &displacement)?;
            Ok((
                None,
                ClientAlgState {
                    scaffold_c_i: client_state.scaffold_c_i.clone(),
                    feddyn_g_k: g_k,
                },
            ))
        }
    }
}

/// Combines one round of client replies into the next global model.
///
/// Updates are processed in `client_id` order so the result does not depend on
/// arrival order.
pub fn aggregate(
    params: &AlgorithmParams,
    prev_global: &ModelWeights,
    updates: &[ClientUpdate],
    state: &ServerAggState,
) -> Result<(ModelWeights, ServerAggState)> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no client updates".into()));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    for u in &sorted {
        prev_global
            .check_compatible(&u.new_weights)
            .map_err(|e| Error::Aggregation(format!("client {}: {e}", u.client_id)))?;
        if u.n_train_samples == 0 {
            return Err(Error::Aggregation(format!(
                "client {} reported zero training samples",
                u.client_id
            )));
        }
    }
    let s = sorted.len() as f64;
    let mut next_state = state.clone();
    next_state.round += 1;

    let new_global = match params.kind {
        AlgorithmKind::FedAvg | AlgorithmKind::FedProx => {
            let total: usize = sorted.iter().map(|u| u.n_train_samples).sum();
            let mut avg = prev_global.zeros_like();
            for u in &sorted {
                avg.axpy(u.n_train_samples as f64 / total as f64, &u.new_weights)?;
            }
            let rho = params.retained_fraction;
            if rho == 0.0 {
                avg
            } else {
                prev_global.zip_map(&avg, |p, a| rho * p + (1.0 - rho) * a)?
            }
        }
        AlgorithmKind::Scaffold => {
            let mut mean_disp = prev_global.zeros_like();
            let mut mean_dc = prev_global.zeros_like();
            for u in &sorted {
                mean_disp.axpy(1.0 / s, &u.new_weights.sub(prev_global)?)?;
                let dc = u.delta_c.as_ref().ok_or_else(|| {
                    Error::Aggregation(format!("scaffold update from {} lacks delta_c", u.client_id))
                })?;
                mean_dc.axpy(1.0 / s, dc)?;
            }
            let n_total = state.n_clients_total.max(sorted.len()) as f64;
            next_state.scaffold_c.axpy(s / n_total, &mean_dc)?;
            let mut g = prev_global.to_dtype(crate::DType::F64);
            g.axpy(params.server_step, &mean_disp)?;
            g
        }
        AlgorithmKind::FedDyn => {
            let mu = params.mu();
            if mu <= 0.0 {
                return Err(Error::Aggregation("feddyn requires mu > 0".into()));
            }
            let n_total = state.n_clients_total.max(sorted.len()) as f64;
            let mut mean = prev_global.zeros_like();
            let mut disp_sum = prev_global.zeros_like();
            for u in &sorted {
                mean.axpy(1.0 / s, &u.new_weights)?;
                disp_sum.axpy(1.0, &u.new_weights.sub(prev_global)?)?;
            }
            next_state.feddyn_h.axpy(-mu / n_total, &disp_sum)?;
            mean.axpy(-1.0 / mu, &next_state.feddyn_h)?;
            mean
        }
    };
    Ok((new_global, next_state))
}

/// `sum(v_i * n_i) / sum(n_i)`.
pub fn weighted_metric_mean(values: &[f64], weights: &[usize]) -> Result<f64> {
    if values.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} values but {} weights",
            values.len(),
            weights.len()
        )));
    }
    let total: usize = weights.iter().sum();
    if total == 0 {
        return Err(Error::Aggregation("zero total weight".into()));
    }
    Ok(values
        .iter()
        .zip(weights)
        .map(|(v, &n)| v * n as f64)
        .sum::<f64>()
        / total as f64)
}

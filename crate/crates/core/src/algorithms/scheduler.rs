//! Round-level learning-rate reduction on plateau and early stopping.
//!
//! Both controllers watch the same monitored value but keep separate "best"
//! trackers, so calling one never hides an improvement from the other.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Minimize,
    Maximize,
}

impl Direction {
    /// `candidate` beats `best` by strictly more than `min_delta`.
    pub fn improves(self, candidate: f64, best: Option<f64>, min_delta: f64) -> bool {
        match best {
            None => true,
            Some(best) => match self {
                Direction::Minimize => candidate < best - min_delta,
                Direction::Maximize => candidate > best + min_delta,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub initial_lr: f64,
    pub plateau_patience: usize,
    pub reduce_factor: f64,
    pub min_delta: f64,
    pub min_lr: f64,
    pub stop_patience: usize,
    pub stop_min_delta: f64,
}

impl SchedulerConfig {
    pub fn new(initial_lr: f64) -> Self {
        Self {
            initial_lr,
            plateau_patience: 16,
            reduce_factor: 0.5,
            min_delta: 1e-4,
            min_lr: 0.0,
            stop_patience: 48,
            stop_min_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub current_lr: f64,
    pub plateau_patience: usize,
    pub plateau_counter: usize,
    pub plateau_best: Option<f64>,
    pub reduce_factor: f64,
    pub min_delta: f64,
    pub min_lr: f64,
    pub stop_patience: usize,
    pub stop_counter: usize,
    pub stop_min_delta: f64,
    pub best_metric: Option<f64>,
    pub best_round: Option<u64>,
    pub best_weights_ref: Option<String>,
}

impl SchedulerState {
    pub fn new(config: &SchedulerConfig) -> Self {
        Self {
            current_lr: config.initial_lr,
            plateau_patience: config.plateau_patience,
            plateau_counter: 0,
            plateau_best: None,
            reduce_factor: config.reduce_factor,
            min_delta: config.min_delta,
            min_lr: config.min_lr,
            stop_patience: config.stop_patience,
            stop_counter: 0,
            stop_min_delta: config.stop_min_delta,
            best_metric: None,
            best_round: None,
            best_weights_ref: None,
        }
    }
}

/// One observation for the plateau controller. Returns whether the learning
/// rate changed.
pub fn plateau_step(
    state: &SchedulerState,
    monitored: f64,
    direction: Direction,
) -> (bool, SchedulerState) {
    let mut next = state.clone();
    if !monitored.is_finite() {
        log::warn!("plateau controller ignoring non-finite metric {monitored}");
        return (false, next);
    }
    if direction.improves(monitored, state.plateau_best, state.min_delta) {
        next.plateau_best = Some(monitored);
        next.plateau_counter = 0;
        return (false, next);
    }
    next.plateau_counter += 1;
    if next.plateau_patience > 0 && next.plateau_counter >= next.plateau_patience {
        next.plateau_counter = 0;
        let reduced = (next.current_lr * next.reduce_factor).max(next.min_lr);
        if reduced < next.current_lr {
            next.current_lr = reduced;
            return (true, next);
        }
    }
    (false, next)
}

/// One observation for the early-stopping controller.
///
/// On improvement the round and `weights_ref` are recorded as the model to
/// publish if training stops.
pub fn early_stop_step(
    state: &SchedulerState,
    monitored: f64,
    direction: Direction,
    round: u64,
    weights_ref: &str,
) -> (bool, SchedulerState) {
    let mut next = state.clone();
    if monitored.is_finite() && direction.improves(monitored, state.best_metric, state.stop_min_delta) {
        next.best_metric = Some(monitored);
        next.best_round = Some(round);
        next.best_weights_ref = Some(weights_ref.to_string());
        next.stop_counter = 0;
        return (false, next);
    }
    next.stop_counter += 1;
    let stop = next.stop_patience > 0 && next.stop_counter >= next.stop_patience;
    (stop, next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> SchedulerState {
        SchedulerState::new(&SchedulerConfig::new(1e-3))
    }

    #[test]
    fn improving_metric_never_reduces() {
        let mut st = state();
        for r in 0..200 {
            let (changed, next) = plateau_step(&st, 1.0 - r as f64 * 1e-3, Direction::Minimize);
            assert!(!changed);
            st = next;
        }
        assert_eq!(st.current_lr, 1e-3);
    }

    #[test]
    fn stall_of_sixteen_rounds_halves_lr() {
        let (_, mut st) = plateau_step(&state(), 0.5, Direction::Minimize);
        for stalled in 1..=16 {
            let (changed, next) = plateau_step(&st, 0.5, Direction::Minimize);
            assert_eq!(changed, stalled == 16, "stall round {stalled}");
            st = next;
        }
        assert_eq!(st.current_lr, 5e-4);
        assert_eq!(st.plateau_counter, 0);
    }

    #[test]
    fn improvement_during_stall_resets() {
        let (_, mut st) = plateau_step(&state(), 0.5, Direction::Minimize);
        for _ in 0..14 {
            st = plateau_step(&st, 0.5, Direction::Minimize).1;
        }
        let (changed, next) = plateau_step(&st, 0.4, Direction::Minimize);
        assert!(!changed);
        assert_eq!(next.plateau_counter, 0);
        st = next;
        for _ in 0..15 {
            let (changed, next) = plateau_step(&st, 0.4, Direction::Minimize);
            assert!(!changed);
            st = next;
        }
        assert_eq!(st.current_lr, 1e-3);
    }

    #[test]
    fn tiny_improvement_below_min_delta_counts_as_stall() {
        let (_, st) = plateau_step(&state(), 0.5, Direction::Minimize);
        let (_, st) = plateau_step(&st, 0.5 - 5e-5, Direction::Minimize);
        assert_eq!(st.plateau_counter, 1);
        let (_, st) = plateau_step(&st, 0.9, Direction::Maximize);
        assert_eq!(st.plateau_counter, 0);
    }

    #[test]
    fn early_stop_after_forty_eight_stalled_rounds() {
        let (stop, mut st) = early_stop_step(&state(), 0.3, Direction::Minimize, 1, "r1");
        assert!(!stop);
        for stalled in 1..=48u64 {
            let (stop, next) = early_stop_step(&st, 0.3, Direction::Minimize, 1 + stalled, "x");
            assert_eq!(stop, stalled == 48);
            st = next;
        }
        assert_eq!(st.best_round, Some(1));
        assert_eq!(st.best_weights_ref.as_deref(), Some("r1"));
    }

    #[test]
    fn early_stop_tracks_best_round() {
        let mut st = state();
        let losses = [0.9, 0.7, 0.5, 0.6, 0.55, 0.8];
        for (i, &l) in losses.iter().enumerate() {
            let round = i as u64 + 1;
            st = early_stop_step(&st, l, Direction::Minimize, round, &format!("g{round}")).1;
        }
        assert_eq!(st.best_round, Some(3));
        assert_eq!(st.best_weights_ref.as_deref(), Some("g3"));
        assert_eq!(st.stop_counter, 3);
    }

    #[test]
    fn lr_never_increases_and_respects_floor() {
        let mut cfg = SchedulerConfig::new(1.0);
        cfg.plateau_patience = 1;
        cfg.min_lr = 0.2;
        let mut st = SchedulerState::new(&cfg);
        let mut last = st.current_lr;
        for _ in 0..10 {
            st = plateau_step(&st, 1.0, Direction::Minimize).1;
            assert!(st.current_lr <= last);
            last = st.current_lr;
        }
        assert_eq!(st.current_lr, 0.2);
    }
}

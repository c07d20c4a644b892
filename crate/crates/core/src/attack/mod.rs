//! Gradient-based minimum-norm attacks on k-NN models.
//!
//! The attack perturbs an input until the model's vote flips, while keeping
//! the L2 norm of the perturbation as small as possible. The core loss is a
//! sum of hinge terms over *guide* training points — wrong-class guides are
//! pulled inside the neighborhood threshold, correct-class guides are pushed
//! out — plus `c * |delta|^2`. The trade-off weight `c` is tuned by binary
//! search, the box constraint is enforced by a tanh change of variables, and
//! several restarts are launched from wrongly-classified training points.
//!
//! [`run_attack`] is the full attack; [`run_attack_sw_baseline`] is the
//! older sigmoid-loss variant kept as a comparison baseline;
//! [`run_attack_targeted`] and [`run_attack_credibility`] tighten the
//! success condition.

mod guides;
mod objective;
mod optim;
mod runner;

pub use guides::{
    refresh_thresholds, select_guides_half, select_guides_sw, select_guides_targeted, GuideSet,
};
pub use objective::objective_and_grad;
pub use optim::{binary_search_c, Adam, RmsProp};
pub use runner::{
    init_restarts, is_success, run_attack, run_attack_credibility, run_attack_sw_baseline,
    run_attack_targeted, AttackResult,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::KnnModel;

/// Success condition for an attack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackMode {
    /// Any prediction other than the true label counts.
    Untargeted,
    /// Only the given class counts.
    Targeted(usize),
    /// A wrong prediction counts only if it wins at least this fraction of
    /// all cast votes.
    Credibility(f64),
}

/// How guide points are chosen around the current iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuideHeuristic {
    /// All `m` guides from the single wrong class with the smallest summed
    /// distance, every weight `+1`.
    SwSameClass,
    /// `m/2` nearest wrong-class guides (weight `+1`) plus `m/2` nearest
    /// same-class guides (weight `-1`).
    HalfHalf,
}

/// Shape of the per-guide penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    /// Hinge: `max(w (d - eta) + margin, 0)`. Zero loss certifies that
    /// every guide is strictly on its intended side of the threshold.
    Relu,
    /// Smooth sigmoid of the signed threshold gap, as in the baseline
    /// attack. Saturates instead of vanishing.
    Sigmoid,
}

/// Hyperparameters of the attack. `Default` matches the values used
/// throughout the test suite; [`AttackConfig::for_k`] adjusts the guide
/// count to the model's `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Number of guide points.
    pub m: usize,
    /// Recompute guides and thresholds every this many gradient steps.
    pub refresh_period: usize,
    /// Number of restarts from wrongly-classified training points, in
    /// addition to the initial start at the input itself.
    pub restarts: usize,
    /// Gradient steps per optimization run.
    pub max_steps: usize,
    /// RMSprop learning rate (in tanh space).
    pub lr: f64,
    /// RMSprop decay for the squared-gradient accumulator.
    pub rms_decay: f64,
    /// Hinge margin added inside each penalty term.
    pub margin: f64,
    /// Binary-search trials over the norm weight `c`.
    pub bs_steps: usize,
    /// Initial `c` and the bracket it is searched in.
    pub c_init: f64,
    pub c_lo: f64,
    pub c_hi: f64,
    /// Standard deviation of the Gaussian noise added to every start.
    pub noise_std: f64,
    /// Classify-and-save period during optimization.
    pub check_period: usize,
    /// Guide selection heuristic.
    pub heuristic: GuideHeuristic,
    /// Penalty shape.
    pub objective: ObjectiveKind,
    /// Success condition.
    pub mode: AttackMode,
    /// Seed for start noise; the only source of randomness in an attack.
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            m: 2,
            refresh_period: 20,
            restarts: 3,
            max_steps: 500,
            lr: 0.05,
            rms_decay: 0.99,
            margin: 1e-5,
            bs_steps: 5,
            c_init: 1.0,
            c_lo: 1e-3,
            c_hi: 1e3,
            noise_std: 0.1,
            check_period: 20,
            heuristic: GuideHeuristic::HalfHalf,
            objective: ObjectiveKind::Relu,
            mode: AttackMode::Untargeted,
            seed: 0,
        }
    }
}

/// Smallest admissible guide count for neighborhood size `k`: `k` when `k`
/// is even, `k + 1` when odd. Guide counts are never reduced below this.
pub fn m_floor(k: usize) -> usize {
    if k.is_multiple_of(2) {
        k
    } else {
        k + 1
    }
}

impl AttackConfig {
    /// Default configuration with the guide count matched to `k`.
    pub fn for_k(k: usize) -> Self {
        AttackConfig {
            m: m_floor(k),
            ..AttackConfig::default()
        }
    }

    /// Configuration for the sigmoid-loss comparison baseline: guides from
    /// a single class, one start, smooth objective.
    pub fn sw_baseline(k: usize) -> Self {
        AttackConfig {
            m: k,
            heuristic: GuideHeuristic::SwSameClass,
            objective: ObjectiveKind::Sigmoid,
            restarts: 0,
            noise_std: 0.0,
            ..AttackConfig::default()
        }
    }

    /// Validates the configuration against a model.
    pub fn validate(&self, model: &KnnModel) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Argument("m must be positive".into()));
        }
        if self.heuristic == GuideHeuristic::HalfHalf && !self.m.is_multiple_of(2) {
            return Err(Error::Argument(format!(
                "half-half guides need an even m, got {}",
                self.m
            )));
        }
        if self.refresh_period == 0 || self.check_period == 0 {
            return Err(Error::Argument(
                "refresh and check periods must be positive".into(),
            ));
        }
        if self.max_steps == 0 {
            return Err(Error::Argument("max_steps must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Argument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.rms_decay >= 0.0 && self.rms_decay < 1.0) {
            return Err(Error::Argument(format!(
                "rms_decay must lie in [0, 1), got {}",
                self.rms_decay
            )));
        }
        if self.objective == ObjectiveKind::Relu && !(self.margin.is_finite() && self.margin > 0.0)
        {
            return Err(Error::Argument(format!(
                "hinge margin must be positive, got {}",
                self.margin
            )));
        }
        if self.bs_steps == 0 {
            return Err(Error::Argument("bs_steps must be positive".into()));
        }
        if !(self.c_lo > 0.0 && self.c_lo <= self.c_init && self.c_init <= self.c_hi) {
            return Err(Error::Argument(format!(
                "need 0 < c_lo <= c_init <= c_hi, got {} / {} / {}",
                self.c_lo, self.c_init, self.c_hi
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Argument(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        match self.mode {
            AttackMode::Untargeted => {}
            AttackMode::Targeted(t) => {
                if t >= model.num_classes() {
                    return Err(Error::Argument(format!(
                        "target class {} out of range for {} classes",
                        t,
                        model.num_classes()
                    )));
                }
            }
            AttackMode::Credibility(f) => {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::Argument(format!(
                        "min vote fraction must lie in [0, 1], got {}",
                        f
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Inputs are clamped this far inside the box before inverting the tanh
/// parameterization, so starts on the box boundary stay finite.
pub const BOX_EPS: f64 = 1e-6;

/// Maps unconstrained `z` into the unit box: `x = (tanh(z) + 1) / 2`.
pub fn reparam_box(z: &[f64]) -> Vec<f64> {
    z.iter().map(|v| (v.tanh() + 1.0) / 2.0).collect()
}

/// Elementwise derivative of [`reparam_box`]: `(1 - tanh(z)^2) / 2`.
pub fn reparam_grad_factor(z: &[f64]) -> Vec<f64> {
    z.iter()
        .map(|v| {
            let t = v.tanh();
            (1.0 - t * t) / 2.0
        })
        .collect()
}

/// Inverse of [`reparam_box`]; coordinates are first clamped to
/// `[BOX_EPS, 1 - BOX_EPS]` so the result is always finite.
pub fn reparam_inverse(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let c = v.clamp(BOX_EPS, 1.0 - BOX_EPS);
            (2.0 * c - 1.0).atanh()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;
    use crate::dataset::LabeledPoint;
    use crate::knn::{KnnModel, Metric};

    fn toy_model() -> KnnModel {
        let ds = Dataset::new(
            vec![
                LabeledPoint { x: vec![0.2], y: 0 },
                LabeledPoint { x: vec![0.8], y: 1 },
            ],
            2,
        )
        .unwrap();
        KnnModel::plain(ds, 1, Metric::Euclidean).unwrap()
    }

    #[test]
    fn reparam_maps_into_the_open_box() {
        assert_eq!(reparam_box(&[0.0]), vec![0.5]);
        // Moderate arguments stay strictly interior; extreme ones saturate
        // to the box faces, which the attack treats as valid points.
        let x = reparam_box(&[8.0, -8.0]);
        assert!(x[0] > 1.0 - 1e-6 && x[0] < 1.0);
        assert!(x[1] < 1e-6 && x[1] > 0.0);
        let sat = reparam_box(&[40.0, -40.0]);
        assert_eq!(sat, vec![1.0, 0.0]);
        assert_eq!(reparam_grad_factor(&[0.0]), vec![0.5]);
        // The derivative vanishes in saturation.
        assert!(reparam_grad_factor(&[30.0])[0] < 1e-12);
    }

    #[test]
    fn reparam_inverse_roundtrips() {
        let x = [0.0, 1e-7, 0.25, 0.5, 0.75, 1.0 - 1e-7, 1.0];
        let back = reparam_box(&reparam_inverse(&x));
        for (orig, b) in x.iter().zip(&back) {
            let clamped = orig.clamp(BOX_EPS, 1.0 - BOX_EPS);
            assert!((clamped - b).abs() < 1e-12, "{} -> {}", orig, b);
            assert!(b.is_finite());
        }
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let model = toy_model();
        let ok = AttackConfig::for_k(1);
        assert!(ok.validate(&model).is_ok());

        let bad = AttackConfig { m: 3, ..ok.clone() };
        assert!(bad.validate(&model).is_err()); // odd m with half-half

        let bad = AttackConfig {
            m: 3,
            heuristic: GuideHeuristic::SwSameClass,
            ..ok.clone()
        };
        assert!(bad.validate(&model).is_ok()); // odd m is fine for same-class guides

        let bad = AttackConfig {
            rms_decay: 1.0,
            ..ok.clone()
        };
        assert!(bad.validate(&model).is_err());

        let bad = AttackConfig {
            margin: 0.0,
            ..ok.clone()
        };
        assert!(bad.validate(&model).is_err());

        let bad = AttackConfig {
            c_lo: 10.0,
            ..ok.clone()
        };
        assert!(bad.validate(&model).is_err());

        let bad = AttackConfig {
            mode: AttackMode::Targeted(7),
            ..ok.clone()
        };
        assert!(bad.validate(&model).is_err());

        let bad = AttackConfig {
            mode: AttackMode::Credibility(1.5),
            ..ok
        };
        assert!(bad.validate(&model).is_err());
    }

    #[test]
    fn m_floor_is_even_and_at_least_k() {
        assert_eq!(m_floor(1), 2);
        assert_eq!(m_floor(2), 2);
        assert_eq!(m_floor(3), 4);
        assert_eq!(m_floor(4), 4);
        assert_eq!(m_floor(5), 6);
    }
}

//! Projected gradient descent under an l-infinity constraint.
//!
//! Each iteration moves every coordinate by `step_size * sign(dCE/dx)`
//! (ascending the loss on the true label for untargeted attacks, descending
//! the loss on the target class for targeted ones), projects onto the
//! `epsilon` box around the start point and finally clamps to the data range.
//! Both sets are boxes, so the composition is the exact projection onto their
//! intersection.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{sign, Tensor};
use crate::energy::{EnergyView, Objective};
use crate::error::{Error, Result};

pub const TRAIN_EPSILON: f64 = 0.1;
pub const INFERENCE_EPSILON: f64 = 0.5;
pub const DEFAULT_STEPS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    Untargeted,
    Targeted,
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMode::Untargeted => "untargeted",
            AttackMode::Targeted => "targeted",
        })
    }
}

impl FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "untargeted" => Ok(AttackMode::Untargeted),
            "targeted" => Ok(AttackMode::Targeted),
            other => Err(Error::invalid(format!("unknown attack mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub mode: AttackMode,
    pub clamp_range: (f64, f64),
}

/// `2.5 * epsilon / steps`, enough to reach the box boundary.
pub fn default_step_size(epsilon: f64, steps: usize) -> f64 {
    2.5 * epsilon / steps.max(1) as f64
}

impl AttackSpec {
    pub fn new(epsilon: f64, steps: usize, mode: AttackMode) -> Self {
        Self {
            epsilon,
            step_size: default_step_size(epsilon, steps),
            steps,
            mode,
            clamp_range: (-1.0, 1.0),
        }
    }

    /// Adversarial-training attack: untargeted, `epsilon = 0.1`, 15 steps.
    pub fn training() -> Self {
        Self::new(TRAIN_EPSILON, DEFAULT_STEPS, AttackMode::Untargeted)
    }

    /// Generation prior: targeted, `epsilon = 0.5`, 15 steps.
    pub fn inference() -> Self {
        Self::new(INFERENCE_EPSILON, DEFAULT_STEPS, AttackMode::Targeted)
    }

    pub fn with_step_size(mut self, step_size: f64) -> Self {
        self.step_size = step_size;
        self
    }

    pub fn with_clamp(mut self, lo: f64, hi: f64) -> Self {
        self.clamp_range = (lo, hi);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(format!(
                "step size must be >= 0, got {}",
                self.step_size
            )));
        }
        let (lo, hi) = self.clamp_range;
        if !(lo < hi) {
            return Err(Error::invalid(format!("clamp range [{lo}, {hi}] is empty")));
        }
        Ok(())
    }
}

/// Largest float `v'` no farther from `center` than `v` such that the rounded
/// difference `|v' - center|` does not exceed `radius`.
fn within(v: f64, center: f64, radius: f64) -> f64 {
    let mut v = v.clamp(center - radius, center + radius);
    while v - center > radius {
        v = v.next_down();
    }
    while center - v > radius {
        v = v.next_up();
    }
    v
}

pub fn pgd_attack(view: EnergyView<'_>, x0: &Tensor, label: usize, spec: &AttackSpec) -> Result<Tensor> {
    spec.validate()?;
    let k = view.num_classes();
    if label >= k {
        return Err(Error::ClassOutOfRange {
            class: label,
            num_classes: k,
        });
    }
    let (lo, hi) = spec.clamp_range;
    if x0.data().iter().any(|v| *v < lo || *v > hi) {
        return Err(Error::invalid("attack start lies outside the clamp range"));
    }
    let direction = match spec.mode {
        AttackMode::Untargeted => 1.0,
        AttackMode::Targeted => -1.0,
    };
    let mut x = x0.clone();
    for step in 0..spec.steps {
        let grad = match view.input_grad(&x, Objective::CrossEntropy(label)) {
            Ok((_, g)) => g,
            Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteGradient { step }),
            Err(e) => return Err(e),
        };
        if !grad.all_finite() {
            return Err(Error::NonFiniteGradient { step });
        }
        for ((xi, &c), &g) in x.data_mut().iter_mut().zip(x0.data()).zip(grad.data()) {
            let moved = *xi + direction * spec.step_size * sign(g);
            *xi = within(moved, c, spec.epsilon).clamp(lo, hi);
        }
    }
    Ok(x)
}

/// Result of a targeted attack used as a generation prior.
#[derive(Debug, Clone)]
pub struct TargetedPrior {
    pub x: Tensor,
    pub posterior_before: f64,
    pub posterior_after: f64,
}

pub fn targeted_prior(view: EnergyView<'_>, x0: &Tensor, target: usize, spec: &AttackSpec) -> Result<TargetedPrior> {
    let spec = AttackSpec {
        mode: AttackMode::Targeted,
        ..*spec
    };
    let x = pgd_attack(view, x0, target, &spec)?;
    let posterior_before = view.posterior(x0)?[target];
    let posterior_after = view.posterior(&x)?[target];
    Ok(TargetedPrior {
        x,
        posterior_before,
        posterior_after,
    })
}

/// `max_i |a_i - b_i|`.
pub fn linf_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchTag, Classifier, Params};

    fn linear(w: Vec<f64>, k: usize, d: usize) -> Classifier {
        let mut p = Params::new();
        p.insert("fc.w", Tensor::new(&[k, d], w).unwrap());
        p.insert("fc.b", Tensor::zeros(&[k]));
        Classifier::from_params(ArchTag::Linear, d, k, p).unwrap()
    }

    #[test]
    fn zero_steps_returns_start() {
        let c = linear(vec![1.0, 2.0, -1.0, 0.5], 2, 2);
        let x0 = Tensor::vector(vec![0.1, -0.2]);
        let spec = AttackSpec::new(0.3, 0, AttackMode::Untargeted);
        assert_eq!(pgd_attack(EnergyView::new(&c), &x0, 0, &spec).unwrap(), x0);
    }

    #[test]
    fn zero_gradient_point_is_fixed() {
        let c = linear(vec![0.0; 6], 3, 2);
        let x0 = Tensor::vector(vec![0.4, -0.6]);
        let spec = AttackSpec::new(0.5, 15, AttackMode::Targeted);
        assert_eq!(pgd_attack(EnergyView::new(&c), &x0, 1, &spec).unwrap(), x0);
    }

    #[test]
    fn zero_epsilon_prior_is_identity() {
        let c = linear(vec![1.0, -1.0, -1.0, 1.0], 2, 2);
        let x0 = Tensor::vector(vec![0.25, 0.5]);
        let spec = AttackSpec::new(0.0, 15, AttackMode::Targeted);
        let prior = targeted_prior(EnergyView::new(&c), &x0, 1, &spec).unwrap();
        assert_eq!(prior.x, x0);
        assert_eq!(prior.posterior_before, prior.posterior_after);
    }

    #[test]
    fn rejects_bad_label_and_start() {
        let c = linear(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let ev = EnergyView::new(&c);
        let spec = AttackSpec::training();
        let x0 = Tensor::vector(vec![0.0, 0.0]);
        assert!(matches!(
            pgd_attack(ev, &x0, 2, &spec),
            Err(Error::ClassOutOfRange { .. })
        ));
        let outside = Tensor::vector(vec![1.5, 0.0]);
        assert!(pgd_attack(ev, &outside, 0, &spec).is_err());
    }

    #[test]
    fn within_respects_rounded_radius() {
        let v = within(0.4, 0.3, 0.1);
        assert!(v - 0.3 <= 0.1);
        let v = within(-0.9, -0.7, 0.2);
        assert!(-0.7 - v <= 0.2);
    }

    #[test]
    fn default_step_size_heuristic() {
        let s = AttackSpec::training();
        assert!((s.step_size - 2.5 * 0.1 / 15.0).abs() < 1e-15);
        assert_eq!(AttackSpec::inference().epsilon, 0.5);
    }
}

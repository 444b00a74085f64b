//! Stochastic Gradient Langevin Dynamics.
//!
//! One step is
//!
//! ```text
//! x' = clamp(x - (alpha / 2) * dE/dx(x) + noise),   noise ~ N(0, alpha I)
//! ```
//!
//! so the noise standard deviation is `sqrt(alpha)` unless overridden. Chains
//! are organised as `outer_loops x inner_loops` steps; the outer loop is only a
//! recording boundary and the dynamics are the flat sequence of steps.

use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::energy::{Energy, EnergyView};
use crate::error::{Error, Result};

pub const DEFAULT_ALPHA_2D: f64 = 0.01;
pub const DEFAULT_ALPHA_IMAGE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgldConfig {
    pub alpha: f64,
    pub outer_loops: usize,
    pub inner_loops: usize,
    /// Noise standard deviation replacing `sqrt(alpha)`.
    pub noise_scale_override: Option<f64>,
    pub clamp_range: (f64, f64),
}

impl SgldConfig {
    pub fn new(alpha: f64, outer_loops: usize, inner_loops: usize) -> Self {
        Self {
            alpha,
            outer_loops,
            inner_loops,
            noise_scale_override: None,
            clamp_range: (-1.0, 1.0),
        }
    }

    /// Negative-sample chains used during training: 10 x 5 steps.
    pub fn training(alpha: f64) -> Self {
        Self::new(alpha, 10, 5)
    }

    /// Class-conditional generation: 50 x 5 steps.
    pub fn conditional(alpha: f64) -> Self {
        Self::new(alpha, 50, 5)
    }

    /// Unconditional generation: 300 x 5 steps.
    pub fn unconditional(alpha: f64) -> Self {
        Self::new(alpha, 300, 5)
    }

    pub fn with_noise(mut self, std: f64) -> Self {
        self.noise_scale_override = Some(std);
        self
    }

    pub fn with_clamp(mut self, lo: f64, hi: f64) -> Self {
        self.clamp_range = (lo, hi);
        self
    }

    pub fn total_steps(&self) -> usize {
        self.outer_loops * self.inner_loops
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_scale_override.unwrap_or_else(|| self.alpha.sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "sgld alpha must be positive, got {}",
                self.alpha
            )));
        }
        if let Some(s) = self.noise_scale_override {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("noise scale must be >= 0, got {s}")));
            }
        }
        let (lo, hi) = self.clamp_range;
        if !(lo < hi) {
            return Err(Error::invalid(format!("clamp range [{lo}, {hi}] is empty")));
        }
        Ok(())
    }
}

/// Current iterate of one chain together with its private RNG stream.
#[derive(Debug, Clone)]
pub struct ChainState {
    x: Tensor,
    steps_taken: usize,
    rng: ChaCha8Rng,
}

impl ChainState {
    pub fn new(x0: Tensor, rng: ChaCha8Rng) -> Self {
        Self {
            x: x0,
            steps_taken: 0,
            rng,
        }
    }

    pub fn seeded(x0: Tensor, seed: u64) -> Self {
        Self::new(x0, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn into_x(self) -> Tensor {
        self.x
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Energy and gradient norm at the iterate a step started from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub energy: f64,
    pub grad_norm: f64,
}

pub fn sgld_step(state: &mut ChainState, energy: &impl Energy, cfg: &SgldConfig) -> Result<StepInfo> {
    let step = state.steps_taken;
    let (e, grad) = match energy.energy_and_grad(&state.x) {
        Ok(v) => v,
        Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteGradient { step }),
        Err(other) => return Err(other),
    };
    if !e.is_finite() || !grad.all_finite() {
        return Err(Error::NonFiniteGradient { step });
    }
    let drift = cfg.alpha / 2.0;
    let std = cfg.noise_std();
    let (lo, hi) = cfg.clamp_range;
    for (xi, gi) in state.x.data_mut().iter_mut().zip(grad.data()) {
        let mut v = *xi - drift * gi;
        if std > 0.0 {
            let z: f64 = StandardNormal.sample(&mut state.rng);
            v += std * z;
        }
        *xi = v.clamp(lo, hi);
    }
    state.steps_taken += 1;
    Ok(StepInfo {
        energy: e,
        grad_norm: grad.norm_l2(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticRow {
    pub step: usize,
    pub energy: f64,
    pub grad_norm: f64,
}

/// Runs `outer_loops x inner_loops` steps, recording one row at the start of
/// every outer loop.
pub fn run_chain_with(state: &mut ChainState, energy: &impl Energy, cfg: &SgldConfig) -> Result<Vec<DiagnosticRow>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.outer_loops);
    for _ in 0..cfg.outer_loops {
        for inner in 0..cfg.inner_loops {
            let step = state.steps_taken;
            let info = sgld_step(state, energy, cfg)?;
            if inner == 0 {
                rows.push(DiagnosticRow {
                    step,
                    energy: info.energy,
                    grad_norm: info.grad_norm,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct ChainRun {
    pub x: Tensor,
    pub steps: usize,
    pub diagnostics: Vec<DiagnosticRow>,
}

/// Samples from `exp(-E)` starting at `x0`; `E` is the joint energy of
/// `class` when given, the marginal energy otherwise.
pub fn run_chain(
    x0: Tensor,
    class: Option<usize>,
    view: EnergyView<'_>,
    cfg: &SgldConfig,
    rng: ChaCha8Rng,
) -> Result<ChainRun> {
    let (lo, hi) = cfg.clamp_range;
    if x0.data().iter().any(|v| *v < lo || *v > hi) {
        return Err(Error::invalid("chain start lies outside the clamp range"));
    }
    let energy = view.as_energy(class);
    let mut state = ChainState::new(x0, rng);
    let diagnostics = run_chain_with(&mut state, &energy, cfg)?;
    Ok(ChainRun {
        steps: state.steps_taken,
        x: state.into_x(),
        diagnostics,
    })
}

pub fn write_diagnostics_csv(rows: &[DiagnosticRow], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "step,energy,grad_norm")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.step, r.energy, r.grad_norm)?;
    }
    Ok(())
}

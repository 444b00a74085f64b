//! Adversarial joint energy-based training.
//!
//! Each step minimises
//!
//! ```text
//! L = mean CE(x_adv, y) + lambda * (mean E(x_pos) - mean E(x_neg))
//! ```
//!
//! where `x_adv` are untargeted PGD examples of the batch, `x_pos` the clean
//! batch, `E` the marginal energy, and `x_neg` the end points of SGLD chains
//! started from the class-conditional Gaussian initializer. Negatives are
//! treated as constants with respect to the parameters.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, DATA_RANGE};
use crate::energy::{EnergyView, Objective};
use crate::error::{Error, Result};
use crate::model::{Classifier, Params};
use crate::pgd::{pgd_attack, AttackMode, AttackSpec};
use crate::sgld::{run_chain_with, ChainState, SgldConfig, DEFAULT_ALPHA_2D};

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-4;

/// Per-class diagonal Gaussians fitted to the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureStats {
    pub means: Vec<Tensor>,
    pub variances: Vec<Tensor>,
    pub variance_floor: f64,
}

impl MixtureStats {
    /// Zero means and unit variances: plain Gaussian noise.
    pub fn standard_normal(num_classes: usize, dim: usize) -> Self {
        Self {
            means: vec![Tensor::zeros(&[dim]); num_classes],
            variances: vec![Tensor::full(&[dim], 1.0); num_classes],
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Tensor::len)
    }
}

/// Per-class sample mean and population variance, floored at `variance_floor`.
pub fn estimate_mixture(dataset: &Dataset, variance_floor: f64) -> Result<MixtureStats> {
    if !(variance_floor > 0.0) {
        return Err(Error::invalid("variance floor must be positive"));
    }
    let absent = dataset.absent_classes();
    if !absent.is_empty() {
        return Err(Error::MissingClasses(absent));
    }
    let (k, d) = (dataset.num_classes(), dataset.dim());
    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0.0; d]; k];
    for (x, y) in dataset.iter() {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(x.data()) {
            *s += v;
        }
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    let mut sq = vec![vec![0.0; d]; k];
    for (x, y) in dataset.iter() {
        for ((acc, v), m) in sq[y].iter_mut().zip(x.data()).zip(&means[y]) {
            *acc += (v - m) * (v - m);
        }
    }
    let variances = sq
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| Tensor::vector(s.into_iter().map(|v| (v / n as f64).max(variance_floor)).collect()))
        .collect();
    Ok(MixtureStats {
        means: means.into_iter().map(Tensor::vector).collect(),
        variances,
        variance_floor,
    })
}

/// Draws `x0 ~ N(mu_y, diag sigma_y^2)` clamped to the data range. Without a
/// class, `y` is drawn uniformly first. Returns the point and its class.
pub fn sample_init(stats: &MixtureStats, class: Option<usize>, rng: &mut impl Rng) -> Result<(Tensor, usize)> {
    let k = stats.num_classes();
    let y = match class {
        Some(y) if y >= k => {
            return Err(Error::ClassOutOfRange {
                class: y,
                num_classes: k,
            })
        }
        Some(y) => y,
        None => rng.random_range(0..k),
    };
    let (lo, hi) = DATA_RANGE;
    let data = stats.means[y]
        .data()
        .iter()
        .zip(stats.variances[y].data())
        .map(|(m, v)| {
            let z: f64 = StandardNormal.sample(rng);
            (m + v.sqrt() * z).clamp(lo, hi)
        })
        .collect();
    Ok((Tensor::vector(data), y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learn_rate: f64,
    /// Weight of the generative term.
    pub gen_weight: f64,
    pub attack: AttackSpec,
    pub sgld: SgldConfig,
    pub seed: u64,
    pub variance_floor: f64,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learn_rate: 0.05,
            gen_weight: 1.0,
            attack: AttackSpec::training(),
            sgld: SgldConfig::training(DEFAULT_ALPHA_2D),
            seed: 0,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.learn_rate > 0.0) {
            return Err(Error::invalid("learn rate must be positive"));
        }
        if !(self.gen_weight >= 0.0) {
            return Err(Error::invalid("generative weight must be >= 0"));
        }
        if self.attack.mode != AttackMode::Untargeted {
            return Err(Error::invalid("training attacks must be untargeted"));
        }
        self.attack.validate()?;
        self.sgld.validate()
    }

    /// Flat key/value view stored in checkpoints.
    pub fn snapshot(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learn_rate", self.learn_rate.to_string()),
            ("gen_weight", self.gen_weight.to_string()),
            ("attack_epsilon", self.attack.epsilon.to_string()),
            ("attack_step_size", self.attack.step_size.to_string()),
            ("attack_steps", self.attack.steps.to_string()),
            ("sgld_alpha", self.sgld.alpha.to_string()),
            ("sgld_outer", self.sgld.outer_loops.to_string()),
            ("sgld_inner", self.sgld.inner_loops.to_string()),
            ("seed", self.seed.to_string()),
            ("variance_floor", self.variance_floor.to_string()),
        ];
        if let Some(s) = self.sgld.noise_scale_override {
            v.push(("sgld_noise", s.to_string()));
        }
        if let Some(m) = self.max_steps {
            v.push(("max_steps", m.to_string()));
        }
        v.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

/// Observation points for tests and diagnostics.
pub trait TrainHooks {
    /// The clean batch and the inputs the classification loss was computed on.
    fn on_classification_inputs(&mut self, _clean: &[Tensor], _used: &[Tensor]) {}
    /// Negative samples and the number of SGLD steps each chain ran.
    fn on_negatives(&mut self, _negatives: &[Tensor], _sgld_steps: &[usize]) {}
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub ce_adv: f64,
    pub gen: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Mean cross-entropy over `(xs, ys)` and its parameter gradient.
pub fn classification_loss(c: &Classifier, xs: &[Tensor], ys: &[usize]) -> Result<(f64, Params)> {
    let ev = EnergyView::new(c);
    let mut grad = c.params().zeros_like();
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let (l, g) = ev.param_grad(x, Objective::CrossEntropy(y))?;
        loss += l;
        grad.add_scaled(&g, 1.0);
    }
    let n = xs.len() as f64;
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}

/// `mean E(pos) - mean E(neg)` with marginal energy, and its parameter
/// gradient holding `neg` fixed.
pub fn generative_loss(c: &Classifier, positives: &[Tensor], negatives: &[Tensor]) -> Result<(f64, Params)> {
    let ev = EnergyView::new(c);
    let mut grad = c.params().zeros_like();
    let mut loss = 0.0;
    for (set, sign) in [(positives, 1.0), (negatives, -1.0)] {
        let scale = sign / set.len() as f64;
        for x in set {
            let (e, g) = ev.param_grad(x, Objective::Marginal)?;
            loss += scale * e;
            grad.add_scaled(&g, scale);
        }
    }
    Ok((loss, grad))
}

/// Draws `count` negatives by running SGLD on the marginal energy from the
/// mixture initializer.
pub fn sample_negatives(
    c: &Classifier,
    stats: &MixtureStats,
    sgld: &SgldConfig,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let energy = EnergyView::new(c).as_energy(None);
    let mut xs = Vec::with_capacity(count);
    let mut steps = Vec::with_capacity(count);
    for _ in 0..count {
        let (x0, _) = sample_init(stats, None, rng)?;
        let mut state = ChainState::new(x0, ChaCha8Rng::seed_from_u64(rng.next_u64()));
        run_chain_with(&mut state, &energy, sgld)?;
        steps.push(state.steps_taken());
        xs.push(state.into_x());
    }
    Ok((xs, steps))
}

/// One optimizer step on `batch`. `step` only labels diagnostics.
pub fn train_step(
    c: &mut Classifier,
    xs: &[Tensor],
    ys: &[usize],
    cfg: &TrainConfig,
    stats: &MixtureStats,
    rng: &mut ChaCha8Rng,
    step: usize,
    hooks: &mut dyn TrainHooks,
) -> Result<StepReport> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::invalid("batch must be non-empty with one label per input"));
    }
    let adv = {
        let ev = EnergyView::new(c);
        xs.iter()
            .zip(ys)
            .map(|(x, &y)| {
                if cfg.attack.steps == 0 || cfg.attack.epsilon == 0.0 {
                    Ok(x.clone())
                } else {
                    pgd_attack(ev, x, y, &cfg.attack)
                }
            })
            .collect::<Result<Vec<_>>>()?
    };
    hooks.on_classification_inputs(xs, &adv);
    let (ce_adv, mut grad) = classification_loss(c, &adv, ys)?;

    let mut gen = 0.0;
    if cfg.gen_weight > 0.0 {
        let (negatives, steps) = sample_negatives(c, stats, &cfg.sgld, xs.len(), rng)?;
        hooks.on_negatives(&negatives, &steps);
        let (g_loss, g_grad) = generative_loss(c, xs, &negatives)?;
        gen = g_loss;
        grad.add_scaled(&g_grad, cfg.gen_weight);
    }
    let total = ce_adv + cfg.gen_weight * gen;
    let grad_norm = grad.norm_l2();
    if !(total.is_finite() && grad_norm.is_finite()) {
        return Err(Error::TrainingDiverged {
            step,
            ce_adv,
            gen,
            grad_norm,
        });
    }
    c.apply_update(&grad, -cfg.learn_rate);
    if !c.params().all_finite() {
        return Err(Error::TrainingDiverged {
            step,
            ce_adv,
            gen,
            grad_norm,
        });
    }
    Ok(StepReport {
        ce_adv,
        gen,
        total,
        grad_norm,
    })
}

/// Training stopped early; `checkpoint` holds the state reached so far and
/// is flagged partial.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub checkpoint: Checkpoint,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted: {}", self.error)
    }
}

impl std::error::Error for TrainAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub const TRAIN_LOG_HEADER: &str = "step,ce_adv,gen,total,grad_norm,wall_ms";

/// Runs `epochs` passes of shuffled mini-batches and returns the final
/// checkpoint with the fitted mixture statistics. When `log` is given a CSV
/// row is written per step.
pub fn train(
    mut c: Classifier,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
    hooks: &mut dyn TrainHooks,
) -> std::result::Result<Checkpoint, TrainAbort> {
    let setup = (|| {
        cfg.validate()?;
        if dataset.dim() != c.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: c.input_dim(),
                got: dataset.dim(),
            });
        }
        if dataset.num_classes() != c.num_classes() {
            return Err(Error::invalid(format!(
                "dataset has {} classes, classifier {}",
                dataset.num_classes(),
                c.num_classes()
            )));
        }
        estimate_mixture(dataset, cfg.variance_floor)
    })();
    let stats = match setup {
        Ok(s) => s,
        Err(error) => {
            let checkpoint = Checkpoint::new(c, None, cfg.seed, cfg.snapshot()).partial();
            return Err(TrainAbort { error, checkpoint });
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0usize;
    let result = (|| -> Result<()> {
        if let Some(w) = log.as_mut() {
            writeln!(w, "{TRAIN_LOG_HEADER}")?;
        }
        'epochs: for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                if cfg.max_steps.is_some_and(|m| step >= m) {
                    break 'epochs;
                }
                let xs: Vec<Tensor> = chunk.iter().map(|&i| dataset.inputs()[i].clone()).collect();
                let ys: Vec<usize> = chunk.iter().map(|&i| dataset.labels()[i]).collect();
                let t0 = Instant::now();
                let r = train_step(&mut c, &xs, &ys, cfg, &stats, &mut rng, step, hooks)?;
                let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
                if let Some(w) = log.as_mut() {
                    writeln!(
                        w,
                        "{step},{},{},{},{},{wall_ms:.3}",
                        r.ce_adv, r.gen, r.total, r.grad_norm
                    )?;
                }
                step += 1;
            }
        }
        Ok(())
    })();

    let checkpoint = Checkpoint::new(c, Some(stats), cfg.seed, cfg.snapshot());
    match result {
        Ok(()) => Ok(checkpoint),
        Err(error) => Err(TrainAbort {
            error,
            checkpoint: checkpoint.partial(),
        }),
    }
}

//! Generation pipelines.
//!
//! * `energy_only`: mixture draw, then SGLD on the joint (or marginal) energy.
//! * `attack_only`: mixture draw, then a targeted PGD prior.
//! * `combined`: mixture draw, targeted prior, contrast decrease, SGLD.
//!
//! Sample `i` uses its own `ChaCha8Rng` seeded with `seed + i`, so batches
//! are reproducible and any prefix of a batch matches a smaller run.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::data::DATA_RANGE;
use crate::energy::EnergyView;
use crate::error::{Error, Result};
use crate::pgd::{targeted_prior, AttackSpec};
use crate::sgld::{run_chain, SgldConfig, DEFAULT_ALPHA_2D};
use crate::trainer::{sample_init, MixtureStats};

pub const DEFAULT_CONTRAST: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    EnergyOnly,
    AttackOnly,
    Combined,
}

impl Pipeline {
    pub const ALL: [Pipeline; 3] = [Pipeline::EnergyOnly, Pipeline::AttackOnly, Pipeline::Combined];

    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::EnergyOnly => "energy_only",
            Pipeline::AttackOnly => "attack_only",
            Pipeline::Combined => "combined",
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pipeline::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown pipeline `{s}`")))
    }
}

/// Where chains start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Per-class Gaussians stored in the checkpoint.
    Mixture,
    /// Zero-mean, unit-variance noise clamped to the data range.
    Noise,
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixture" => Ok(InitKind::Mixture),
            "noise" => Ok(InitKind::Noise),
            other => Err(Error::invalid(format!("unknown init `{other}`"))),
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitKind::Mixture => "mixture",
            InitKind::Noise => "noise",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceSpec {
    pub pipeline: Pipeline,
    pub target_class: Option<usize>,
    pub attack: AttackSpec,
    pub sgld: SgldConfig,
    pub contrast_factor: f64,
    pub count: usize,
    pub seed: u64,
    pub init: InitKind,
}

impl InferenceSpec {
    /// Defaults: targeted prior with `epsilon = 0.5` and 15 steps, 50 x 5
    /// SGLD steps, or 300 x 5 for unconditional energy-only sampling.
    pub fn new(pipeline: Pipeline, target_class: Option<usize>, count: usize, seed: u64) -> Self {
        let sgld = if pipeline == Pipeline::EnergyOnly && target_class.is_none() {
            SgldConfig::unconditional(DEFAULT_ALPHA_2D)
        } else {
            SgldConfig::conditional(DEFAULT_ALPHA_2D)
        };
        Self {
            pipeline,
            target_class,
            attack: AttackSpec::inference(),
            sgld,
            contrast_factor: DEFAULT_CONTRAST,
            count,
            seed,
            init: InitKind::Mixture,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.contrast_factor > 0.0 && self.contrast_factor <= 1.0) {
            return Err(Error::invalid(format!(
                "contrast factor must lie in (0, 1], got {}",
                self.contrast_factor
            )));
        }
        if self.count == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        self.attack.validate()?;
        self.sgld.validate()
    }
}

/// `c * (x - mean(x)) + mean(x)`, clamped to the data range. `c = 1` returns
/// `x` unchanged.
pub fn contrast_decrease(x: &Tensor, c: f64) -> Result<Tensor> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::invalid(format!("contrast factor must lie in (0, 1], got {c}")));
    }
    if c == 1.0 {
        return Ok(x.clone());
    }
    let m = x.mean();
    let (lo, hi) = DATA_RANGE;
    Ok(x.map(|v| (c * (v - m) + m).clamp(lo, hi)))
}

/// Joint energies of the sample's class after each stage that ran.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub index: usize,
    pub class: usize,
    pub energy_init: f64,
    pub energy_prior: Option<f64>,
    pub energy_contrast: Option<f64>,
    pub energy_final: f64,
    /// Posterior of `class` at the emitted sample.
    pub posterior: f64,
}

pub const SAMPLE_META_HEADER: &str = "index,class,energy_init,energy_prior,energy_contrast,energy_final,posterior";

impl SampleMeta {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|e| e.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.index,
            self.class,
            self.energy_init,
            opt(self.energy_prior),
            opt(self.energy_contrast),
            self.energy_final,
            self.posterior
        )
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub x: Tensor,
    pub meta: SampleMeta,
}

fn init_stats(ck: &Checkpoint, init: InitKind) -> Result<MixtureStats> {
    let c = &ck.classifier;
    match init {
        InitKind::Mixture => ck.mixture.clone().ok_or(Error::MissingMixture),
        InitKind::Noise => Ok(MixtureStats::standard_normal(c.num_classes(), c.input_dim())),
    }
}

pub fn generate(ck: &Checkpoint, spec: &InferenceSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let stats = init_stats(ck, spec.init)?;
    let view = EnergyView::new(&ck.classifier);
    (0..spec.count).map(|i| generate_one(view, &stats, spec, i)).collect()
}

fn generate_one(view: EnergyView<'_>, stats: &MixtureStats, spec: &InferenceSpec, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(index as u64));
    let (x0, class) = sample_init(stats, spec.target_class, &mut rng)?;
    let energy_init = view.joint_energy(&x0, class)?;
    let mut meta = SampleMeta {
        index,
        class,
        energy_init,
        energy_prior: None,
        energy_contrast: None,
        energy_final: energy_init,
        posterior: 0.0,
    };
    let x = match spec.pipeline {
        Pipeline::EnergyOnly => run_chain(x0, spec.target_class, view, &spec.sgld, rng)?.x,
        Pipeline::AttackOnly => {
            let prior = targeted_prior(view, &x0, class, &spec.attack)?;
            meta.energy_prior = Some(view.joint_energy(&prior.x, class)?);
            prior.x
        }
        Pipeline::Combined => {
            let prior = targeted_prior(view, &x0, class, &spec.attack)?;
            meta.energy_prior = Some(view.joint_energy(&prior.x, class)?);
            let x2 = contrast_decrease(&prior.x, spec.contrast_factor)?;
            meta.energy_contrast = Some(view.joint_energy(&x2, class)?);
            run_chain(x2, Some(class), view, &spec.sgld, rng)?.x
        }
    };
    meta.energy_final = view.joint_energy(&x, class)?;
    meta.posterior = view.posterior(&x)?[class];
    Ok(Sample { x, meta })
}

/// Cell-centred rectangular grid over a 2D domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn square(lo: f64, hi: f64, n: usize) -> Self {
        Self {
            x_range: (lo, hi),
            y_range: (lo, hi),
            nx: n,
            ny: n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo < hi;
        if self.nx == 0 || self.ny == 0 || !ok(self.x_range) || !ok(self.y_range) {
            return Err(Error::invalid(format!("degenerate grid {self:?}")));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_range.1 - self.x_range.0) / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_range.1 - self.y_range.0) / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Centre of cell `(ix, iy)`.
    pub fn center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.x_range.0 + (ix as f64 + 0.5) * self.dx(),
            self.y_range.0 + (iy as f64 + 0.5) * self.dy(),
        )
    }

    /// Cell holding `(x, y)`; points outside the grid snap to the nearest
    /// border cell.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let idx = |v: f64, lo: f64, d: f64, n: usize| (((v - lo) / d).floor().max(0.0) as usize).min(n - 1);
        (
            idx(x, self.x_range.0, self.dx(), self.nx),
            idx(y, self.y_range.0, self.dy(), self.ny),
        )
    }
}

/// `exp(-E)` on a grid, normalised so that `sum(density) * cell_area = 1`.
/// Cells are stored row-major with `x` varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub spec: GridSpec,
    pub density: Vec<f64>,
    /// `log Z` with `Z = sum(exp(-E)) * cell_area`.
    pub log_normalizer: f64,
}

impl DensityGrid {
    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.density[iy * self.spec.nx + ix]
    }

    pub fn normalizer(&self) -> f64 {
        self.log_normalizer.exp()
    }

    /// Probability mass of every cell.
    pub fn cell_masses(&self) -> Vec<f64> {
        let a = self.spec.cell_area();
        self.density.iter().map(|d| d * a).collect()
    }

    /// Cell masses summed over `y` (one per column).
    pub fn marginal_x(&self) -> Vec<f64> {
        let a = self.spec.cell_area();
        (0..self.spec.nx)
            .map(|ix| (0..self.spec.ny).map(|iy| self.at(ix, iy) * a).sum())
            .collect()
    }

    /// Cell masses summed over `x` (one per row).
    pub fn marginal_y(&self) -> Vec<f64> {
        let a = self.spec.cell_area();
        (0..self.spec.ny)
            .map(|iy| (0..self.spec.nx).map(|ix| self.at(ix, iy) * a).sum())
            .collect()
    }
}

/// Evaluates `energy` at every cell centre and normalises by quadrature.
pub fn oracle_density_2d(energy: impl Fn(f64, f64) -> f64, grid: GridSpec) -> Result<DensityGrid> {
    grid.validate()?;
    let mut e = Vec::with_capacity(grid.cells());
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let (x, y) = grid.center(ix, iy);
            let v = energy(x, y);
            if !v.is_finite() {
                return Err(Error::Numerical(format!("energy at ({x}, {y}) is {v}")));
            }
            e.push(v);
        }
    }
    let e_min = e.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = e.iter().map(|v| (e_min - v).exp()).collect();
    let mass: f64 = weights.iter().sum::<f64>() * grid.cell_area();
    let log_normalizer = mass.ln() - e_min;
    let density = weights.into_iter().map(|w| w / mass).collect();
    Ok(DensityGrid {
        spec: grid,
        density,
        log_normalizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchTag, Classifier, Params};

    fn linear_ck(mixture: bool) -> Checkpoint {
        let mut p = Params::new();
        p.insert("fc.w", Tensor::new(&[2, 2], vec![1.0, 0.5, -1.0, -0.5]).unwrap());
        p.insert("fc.b", Tensor::zeros(&[2]));
        let c = Classifier::from_params(ArchTag::Linear, 2, 2, p).unwrap();
        let m = mixture.then(|| MixtureStats {
            means: vec![Tensor::vector(vec![0.4, 0.0]), Tensor::vector(vec![-0.4, 0.0])],
            variances: vec![Tensor::vector(vec![0.01, 0.01]); 2],
            variance_floor: 1e-4,
        });
        Checkpoint::new(c, m, 0, vec![])
    }

    #[test]
    fn contrast_examples() {
        let x = Tensor::vector(vec![-1.0, 1.0]);
        assert_eq!(contrast_decrease(&x, 1.0).unwrap(), x);
        assert_eq!(contrast_decrease(&x, 0.5).unwrap().data(), &[-0.5, 0.5]);
        assert!(contrast_decrease(&x, 0.0).is_err());
        assert!(contrast_decrease(&x, 1.5).is_err());
    }

    #[test]
    fn missing_mixture_is_an_error() {
        let ck = linear_ck(false);
        let spec = InferenceSpec::new(Pipeline::Combined, Some(0), 1, 0);
        assert!(matches!(generate(&ck, &spec), Err(Error::MissingMixture)));
        let noise = InferenceSpec {
            init: InitKind::Noise,
            ..spec
        };
        assert_eq!(generate(&ck, &noise).unwrap().len(), 1);
    }

    #[test]
    fn pipeline_collapse_is_bit_exact() {
        let ck = linear_ck(true);
        let mut combined = InferenceSpec::new(Pipeline::Combined, Some(1), 4, 17);
        combined.attack.steps = 0;
        combined.contrast_factor = 1.0;
        let energy = InferenceSpec {
            pipeline: Pipeline::EnergyOnly,
            ..combined.clone()
        };
        let a = generate(&ck, &combined).unwrap();
        let b = generate(&ck, &energy).unwrap();
        for (s, t) in a.iter().zip(&b) {
            assert_eq!(s.x, t.x);
        }
    }

    #[test]
    fn zero_steps_everywhere_returns_mixture_draw() {
        let ck = linear_ck(true);
        let mut spec = InferenceSpec::new(Pipeline::Combined, Some(0), 3, 5);
        spec.attack.steps = 0;
        spec.contrast_factor = 1.0;
        spec.sgld.outer_loops = 0;
        let out = generate(&ck, &spec).unwrap();
        for s in &out {
            let mut rng = ChaCha8Rng::seed_from_u64(5 + s.meta.index as u64);
            let (x0, _) = sample_init(ck.mixture.as_ref().unwrap(), Some(0), &mut rng).unwrap();
            assert_eq!(s.x, x0);
        }
    }

    #[test]
    fn samples_in_range_and_deterministic() {
        let ck = linear_ck(true);
        for p in Pipeline::ALL {
            let spec = InferenceSpec::new(p, None, 5, 3);
            let a = generate(&ck, &spec).unwrap();
            let b = generate(&ck, &spec).unwrap();
            for (s, t) in a.iter().zip(&b) {
                assert_eq!(s.x, t.x);
                assert_eq!(s.meta, t.meta);
                assert!(s.x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn pipeline_names_round_trip() {
        for p in Pipeline::ALL {
            assert_eq!(p.as_str().parse::<Pipeline>().unwrap(), p);
        }
        assert!("both".parse::<Pipeline>().is_err());
    }

    #[test]
    fn constant_energy_gives_uniform_density() {
        let g = oracle_density_2d(|_, _| 3.0, GridSpec::square(-1.0, 1.0, 10)).unwrap();
        for d in &g.density {
            assert!((d - 0.25).abs() < 1e-12);
        }
        assert!((g.log_normalizer - (4.0f64.ln() - 3.0)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_energy_rejected() {
        let r = oracle_density_2d(
            |x, _| if x > 0.5 { f64::NAN } else { 0.0 },
            GridSpec::square(-1.0, 1.0, 4),
        );
        assert!(r.is_err());
    }

    #[test]
    fn cell_lookup_snaps_to_border() {
        let g = GridSpec::square(-1.0, 1.0, 4);
        assert_eq!(g.cell_of(-1.0, -1.0), (0, 0));
        assert_eq!(g.cell_of(1.0, 1.0), (3, 3));
        assert_eq!(g.cell_of(-5.0, 0.1), (0, 2));
        assert_eq!(g.center(0, 3), (-0.75, 0.75));
    }
}

//! Sample-quality and robustness metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::energy::{argmax, EnergyView};
use crate::error::{Error, Result};
use crate::inference::DensityGrid;
use crate::model::Classifier;
use crate::pgd::{pgd_attack, AttackMode, AttackSpec};

/// Eigenvalues in `[-EIGEN_SLACK, 0)` are treated as zero.
pub const EIGEN_SLACK: f64 = 1e-8;

/// Default pseudocount added to every histogram cell.
pub const DEFAULT_SMOOTHING: f64 = 0.5;

/// `exp(mean_i KL(p_i || p_bar))` where `p_bar` is the mean posterior.
pub fn inception_score(posteriors: &[Vec<f64>]) -> Result<f64> {
    let first = posteriors.first().ok_or_else(|| Error::invalid("no posteriors"))?;
    let k = first.len();
    for (i, p) in posteriors.iter().enumerate() {
        if p.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: p.len(),
            });
        }
        let s: f64 = p.iter().sum();
        if p.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("posterior {i} is not a distribution")));
        }
    }
    let n = posteriors.len() as f64;
    let mut marginal = vec![0.0; k];
    for p in posteriors {
        for (m, v) in marginal.iter_mut().zip(p) {
            *m += v / n;
        }
    }
    let mean_kl = posteriors.iter().map(|p| kl(p, &marginal)).sum::<f64>() / n;
    Ok(mean_kl.exp())
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// Gaussian fit of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Tensor,
    /// `[F, F]`, population convention.
    pub covariance: Tensor,
    pub sample_count: usize,
}

impl FeatureStats {
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        if features.len() < 2 {
            return Err(Error::invalid(format!(
                "feature statistics need at least 2 samples, got {}",
                features.len()
            )));
        }
        let f = features[0].len();
        if f == 0 {
            return Err(Error::invalid("empty feature vectors"));
        }
        if let Some(bad) = features.iter().find(|v| v.len() != f) {
            return Err(Error::DimensionMismatch {
                expected: f,
                got: bad.len(),
            });
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; f];
        for v in features {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut cov = vec![0.0; f * f];
        for v in features {
            for i in 0..f {
                let di = v[i] - mean[i];
                for j in i..f {
                    cov[i * f + j] += di * (v[j] - mean[j]);
                }
            }
        }
        for i in 0..f {
            for j in i..f {
                let c = cov[i * f + j] / n;
                cov[i * f + j] = c;
                cov[j * f + i] = c;
            }
        }
        Ok(Self {
            mean: Tensor::vector(mean),
            covariance: Tensor::new(&[f, f], cov)?,
            sample_count: features.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Statistics of `extractor(x)` over `samples`.
pub fn feature_stats(extractor: impl Fn(&Tensor) -> Result<Tensor>, samples: &[Tensor]) -> Result<FeatureStats> {
    let feats = samples
        .iter()
        .map(|x| extractor(x).map(Tensor::into_data))
        .collect::<Result<Vec<_>>>()?;
    FeatureStats::from_features(&feats)
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    let f = t.shape()[0];
    DMatrix::from_row_slice(f, f, t.data())
}

fn checked_eigenvalues(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let eig = m.clone().symmetric_eigen();
    if let Some(l) = eig.eigenvalues.iter().find(|l| !l.is_finite() || **l < -EIGEN_SLACK) {
        return Err(Error::Numerical(format!("{what} has eigenvalue {l}")));
    }
    Ok(eig)
}

/// Principal square root of a symmetric PSD matrix.
fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = checked_eigenvalues(m, what)?;
    let root = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, with the trace of the
/// cross term taken as `tr sqrt(S_a^(1/2) S_b S_a^(1/2))`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let mean_term: f64 = a
        .mean
        .data()
        .iter()
        .zip(b.mean.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sa = to_matrix(&a.covariance);
    let sb = to_matrix(&b.covariance);
    let ra = psd_sqrt(&sa, "first covariance")?;
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = checked_eigenvalues(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    checked_eigenvalues(&sb, "second covariance")?;
    let d = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Distances between a 2D sample set and a gridded reference density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoDDivergence {
    pub symmetric_kl: f64,
    pub ks_x: f64,
    pub ks_y: f64,
}

/// Histograms `samples` on the grid and compares against the reference.
///
/// Both histograms get `smoothing` pseudocounts per cell: the sample side as
/// `(count + a) / (N + a M)` and the reference as `(N q + a) / (N + a M)`
/// for `M` cells. The KS statistics compare each axis's empirical CDF with
/// the reference marginal CDF, taken piecewise linear inside each cell.
pub fn twod_divergence(samples: &[[f64; 2]], grid: &DensityGrid, smoothing: f64) -> Result<TwoDDivergence> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    if !(smoothing > 0.0) {
        return Err(Error::invalid("smoothing must be positive"));
    }
    let spec = grid.spec;
    let m = spec.cells() as f64;
    let n = samples.len() as f64;
    let mut counts = vec![0.0; spec.cells()];
    for [x, y] in samples {
        let (ix, iy) = spec.cell_of(*x, *y);
        counts[iy * spec.nx + ix] += 1.0;
    }
    let denom = n + smoothing * m;
    let mut symmetric_kl = 0.0;
    for (c, q) in counts.iter().zip(grid.cell_masses()) {
        let p = (c + smoothing) / denom;
        let q = (n * q + smoothing) / denom;
        symmetric_kl += (p - q) * (p / q).ln();
    }
    let xs: Vec<f64> = samples.iter().map(|s| s[0]).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s[1]).collect();
    Ok(TwoDDivergence {
        symmetric_kl,
        ks_x: ks_against_bins(&xs, spec.x_range, &grid.marginal_x()),
        ks_y: ks_against_bins(&ys, spec.y_range, &grid.marginal_y()),
    })
}

/// Piecewise-linear CDF through cumulative bin masses on equal bins.
fn binned_cdf(v: f64, range: (f64, f64), masses: &[f64]) -> f64 {
    let (lo, hi) = range;
    if v <= lo {
        return 0.0;
    }
    let total: f64 = masses.iter().sum();
    if v >= hi {
        return 1.0;
    }
    let w = (hi - lo) / masses.len() as f64;
    let pos = (v - lo) / w;
    let i = (pos.floor() as usize).min(masses.len() - 1);
    let below: f64 = masses[..i].iter().sum();
    (below + masses[i] * (pos - i as f64)) / total
}

fn ks_against_bins(values: &[f64], range: (f64, f64), masses: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &s)| {
            let f = binned_cdf(s, range, masses);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("ks needs two non-empty samples"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Fraction of points whose argmax logit equals the label.
pub fn clean_accuracy(c: &Classifier, dataset: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for (x, y) in dataset.iter() {
        if argmax(c.logits(x)?.data()) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Untargeted PGD applied to every point; the spec's mode is ignored.
pub fn attack_dataset(c: &Classifier, dataset: &Dataset, spec: &AttackSpec) -> Result<Vec<Tensor>> {
    let spec = AttackSpec {
        mode: AttackMode::Untargeted,
        ..*spec
    };
    let view = EnergyView::new(c);
    dataset.iter().map(|(x, y)| pgd_attack(view, x, y, &spec)).collect()
}

/// Fraction of points classified correctly both before and after an
/// untargeted attack.
pub fn robust_accuracy(c: &Classifier, dataset: &Dataset, spec: &AttackSpec) -> Result<f64> {
    let adv = attack_dataset(c, dataset, spec)?;
    let mut correct = 0usize;
    for (xa, (x, y)) in adv.iter().zip(dataset.iter()) {
        if argmax(c.logits(x)?.data()) == y && argmax(c.logits(xa)?.data()) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_1d(mean: f64, var: f64) -> FeatureStats {
        FeatureStats {
            mean: Tensor::vector(vec![mean]),
            covariance: Tensor::new(&[1, 1], vec![var]).unwrap(),
            sample_count: 2,
        }
    }

    #[test]
    fn inception_score_extremes() {
        let uniform = vec![vec![0.25; 4]; 7];
        assert!((inception_score(&uniform).unwrap() - 1.0).abs() < 1e-12);
        let one_hot: Vec<Vec<f64>> = (0..10)
            .map(|i| (0..10).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        assert!((inception_score(&one_hot).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn inception_score_rejects_bad_input() {
        assert!(inception_score(&[]).is_err());
        assert!(inception_score(&[vec![0.5, 0.6]]).is_err());
        assert!(inception_score(&[vec![0.5, 0.5], vec![1.0]]).is_err());
    }

    #[test]
    fn frechet_scalar_cases() {
        let d = frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        let d = frechet_distance(&stats_1d(0.0, 4.0), &stats_1d(0.0, 1.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        assert!(frechet_distance(&stats_1d(0.3, 2.0), &stats_1d(0.3, 2.0)).unwrap() < 1e-12);
    }

    #[test]
    fn frechet_rejects_indefinite() {
        assert!(frechet_distance(&stats_1d(0.0, -1.0), &stats_1d(0.0, 1.0)).is_err());
        assert!(frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(0.0, -1.0)).is_err());
        assert!(frechet_distance(&stats_1d(0.0, -1e-9), &stats_1d(0.0, 1.0)).is_ok());
    }

    #[test]
    fn two_sample_stats_by_hand() {
        let s = FeatureStats::from_features(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        assert_eq!(s.mean.data(), &[2.0, 4.0]);
        assert_eq!(s.covariance.data(), &[1.0, 2.0, 2.0, 4.0]);
        assert!(FeatureStats::from_features(&[vec![1.0]]).is_err());
    }

    #[test]
    fn ks_cases() {
        let a = [0.3, -1.0, 2.0, 0.3];
        assert_eq!(ks_two_sample(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_two_sample(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(ks_two_sample(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 0.5);
    }

    #[test]
    fn binned_cdf_interpolates() {
        let masses = [0.25, 0.5, 0.25];
        assert_eq!(binned_cdf(-1.0, (-1.0, 2.0), &masses), 0.0);
        assert_eq!(binned_cdf(0.5, (-1.0, 2.0), &masses), 0.5);
        assert_eq!(binned_cdf(2.0, (-1.0, 2.0), &masses), 1.0);
    }
}

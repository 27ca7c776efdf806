//! Fréchet distance between Gaussian fits of the two views of a batch, the
//! calibrated threshold, and the accept / re-augment / skip policy.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::autodiff::{Tensor, NORM_FLOOR};
use crate::error::{Error, Result};

pub const DEFAULT_SHRINKAGE: f64 = 1e-6;
const SYMMETRY_TOL: f64 = 1e-10;

/// Which representation the distance is measured on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    /// Encoder output `h`.
    Encoder,
    /// Projection head output `z`.
    Projection,
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h" => Ok(FeatureSource::Encoder),
            "z" => Ok(FeatureSource::Projection),
            other => Err(Error::Config(format!(
                "unknown feature source `{other}` (expected h or z)"
            ))),
        }
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSource::Encoder => "h",
            FeatureSource::Projection => "z",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurationConfig {
    pub enabled: bool,
    pub shrinkage: f64,
    pub source: FeatureSource,
    /// L2-normalize rows before fitting the Gaussians.
    pub normalize: bool,
    /// 1-based epoch whose batch scores set the threshold.
    pub calibration_epoch: usize,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            shrinkage: DEFAULT_SHRINKAGE,
            source: FeatureSource::Projection,
            normalize: false,
            calibration_epoch: 5,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shrinkage >= 0.0 && self.shrinkage.is_finite()) {
            return Err(Error::Config(format!(
                "shrinkage must be nonnegative, got {}",
                self.shrinkage
            )));
        }
        if self.calibration_epoch == 0 {
            return Err(Error::Config(
                "calibration_epoch is 1-based and must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub sample_count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of the rows of `z`, plus `ε·I`.
pub fn gaussian_stats(z: &Tensor, shrinkage: f64) -> Result<GaussianStats> {
    if z.ndim() != 2 {
        return Err(Error::Contract(format!(
            "gaussian_stats expects [N, d], got {:?}",
            z.shape()
        )));
    }
    let (n, d) = (z.rows(), z.row_len());
    if n < 2 {
        return Err(Error::Contract(format!(
            "gaussian_stats needs at least 2 samples, got {n}"
        )));
    }
    let x = DMatrix::from_row_slice(n, d, z.data());
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut covariance = centered.transpose() * &centered / (n - 1) as f64;
    for i in 0..d {
        covariance[(i, i)] += shrinkage;
    }
    Ok(GaussianStats {
        mean,
        covariance,
        sample_count: n,
    })
}

/// Symmetric PSD square root through an eigendecomposition, with negative
/// eigenvalues clamped to zero.
pub fn matrix_sqrt_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Contract(format!(
            "matrix_sqrt_psd needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.amax().max(1.0);
    let asym = (a - a.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::Contract(format!(
            "matrix is not symmetric (max |A - Aᵀ| = {asym:e})"
        )));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let r = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok((&r + r.transpose()) * 0.5)
}

/// `‖μ1 − μ2‖² + tr(Σ1 + Σ2 − 2·(√Σ1·Σ2·√Σ1)^{1/2})`, clamped at zero.
pub fn frd(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim("gaussian dimension", a.dim(), b.dim()));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let root_a = matrix_sqrt_psd(&a.covariance)?;
    let inner = &root_a * &b.covariance * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = matrix_sqrt_psd(&inner)?.trace();
    let value = mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::Numerical(format!("frd evaluated to {value}")));
    }
    Ok(value.max(0.0))
}

fn normalized(z: &Tensor) -> Tensor {
    let mut out = z.clone();
    let w = out.row_len();
    for row in out.data_mut().chunks_mut(w) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// FRD between the two views' feature matrices under `config`.
pub fn score_pair(view1: &Tensor, view2: &Tensor, config: &CurationConfig) -> Result<f64> {
    let (a, b) = if config.normalize {
        (normalized(view1), normalized(view2))
    } else {
        (view1.clone(), view2.clone())
    };
    frd(
        &gaussian_stats(&a, config.shrinkage)?,
        &gaussian_stats(&b, config.shrinkage)?,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdState {
    pub tau_frd: f64,
    pub calibration_epoch: usize,
    pub per_batch_scores: Vec<f64>,
    pub frozen: bool,
}

impl ThresholdState {
    /// Collects scores during the calibration epoch.
    pub fn collecting(calibration_epoch: usize) -> Self {
        Self {
            tau_frd: f64::NAN,
            calibration_epoch,
            per_batch_scores: Vec::new(),
            frozen: false,
        }
    }

    pub fn record(&mut self, score: f64) -> Result<()> {
        if self.frozen {
            return Err(Error::Contract(
                "threshold is frozen; scores can no longer be recorded".into(),
            ));
        }
        self.per_batch_scores.push(score);
        Ok(())
    }

    /// Sets `tau_frd` to the mean of the recorded scores and freezes.
    pub fn freeze(&mut self) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        let frozen = calibrate_threshold(&self.per_batch_scores, self.calibration_epoch)?;
        *self = frozen;
        Ok(())
    }
}

pub fn calibrate_threshold(scores: &[f64], calibration_epoch: usize) -> Result<ThresholdState> {
    if scores.is_empty() {
        return Err(Error::Contract("cannot calibrate a threshold from zero scores".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("non-finite calibration score {bad}")));
    }
    Ok(ThresholdState {
        tau_frd: scores.iter().sum::<f64>() / scores.len() as f64,
        calibration_epoch,
        per_batch_scores: scores.to_vec(),
        frozen: true,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurationAction {
    Update,
    ReaugmentedUpdate,
    /// Rejected on the first draw; the batch must be re-augmented.
    Reaugment,
    Skipped,
}

impl fmt::Display for CurationAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurationAction::Update => "update",
            CurationAction::ReaugmentedUpdate => "reaugmented_update",
            CurationAction::Reaugment => "reaugment",
            CurationAction::Skipped => "skipped",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurationDecision {
    pub frd_score: f64,
    pub accepted: bool,
    /// 1 for the first draw, 2 for the re-augmented draw.
    pub attempt: u8,
    pub action: CurationAction,
}

/// Accepts iff `frd_score ≤ tau_frd`. A first-draw rejection asks for one
/// re-augmentation; a second rejection skips the batch.
pub fn curate(frd_score: f64, threshold: &ThresholdState, attempt: u8) -> Result<CurationDecision> {
    if !threshold.frozen {
        return Err(Error::Contract(
            "curate called before the threshold was calibrated".into(),
        ));
    }
    let accepted = frd_score <= threshold.tau_frd;
    let action = match (accepted, attempt) {
        (true, 1) => CurationAction::Update,
        (true, 2) => CurationAction::ReaugmentedUpdate,
        (false, 1) => CurationAction::Reaugment,
        (false, 2) => CurationAction::Skipped,
        (_, a) => return Err(Error::Contract(format!("attempt must be 1 or 2, got {a}"))),
    };
    Ok(CurationDecision {
        frd_score,
        accepted,
        attempt,
        action,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn stats(mean: &[f64], cov: &[f64]) -> GaussianStats {
        let d = mean.len();
        GaussianStats {
            mean: DVector::from_column_slice(mean),
            covariance: DMatrix::from_row_slice(d, d, cov),
            sample_count: 10,
        }
    }

    fn normal(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(seed);
        Tensor::new(
            vec![n, d],
            (0..n * d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                })
                .collect(),
        )
        .unwrap()
    }

    fn random_orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
        let m = DMatrix::from_row_slice(d, d, normal(d, d, seed).data());
        m.qr().q()
    }

    fn threshold(tau: f64) -> ThresholdState {
        calibrate_threshold(&[tau], 5).unwrap()
    }

    #[test]
    fn stats_examples() {
        let same = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        let s = gaussian_stats(&same, 1e-6).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.0, 2.0]);
        assert_eq!(s.covariance, DMatrix::identity(2, 2) * 1e-6);

        let two = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]);
        let s = gaussian_stats(&two, 1e-6).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(
            s.covariance,
            DMatrix::from_row_slice(2, 2, &[2.0 + 1e-6, 0.0, 0.0, 1e-6])
        );

        let big = gaussian_stats(&normal(20_000, 4, 1), 1e-6).unwrap();
        let rel = (&big.covariance - DMatrix::identity(4, 4)).norm() / 2.0;
        assert!(rel < 0.1, "{rel}");

        let one = Tensor::from_rows(&[vec![1.0, 2.0]]);
        assert!(matches!(gaussian_stats(&one, 1e-6), Err(Error::Contract(_))));
    }

    #[test]
    fn sqrt_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_psd(&id).unwrap() - &id).amax() < 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(&[4.0, 9.0]));
        let r = matrix_sqrt_psd(&d).unwrap();
        assert!((r - DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 3.0]))).amax() < 1e-14);
        for seed in 0..5 {
            let b = DMatrix::from_row_slice(6, 6, normal(6, 6, seed).data());
            let a = &b * b.transpose();
            let r = matrix_sqrt_psd(&a).unwrap();
            assert!((&r * &r - &a).norm() / a.norm() <= 1e-8);
        }
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(matrix_sqrt_psd(&asym), Err(Error::Contract(_))));
    }

    #[test]
    fn frd_examples() {
        let a = stats(&[0.3, -1.0], &[2.0, 0.5, 0.5, 1.0]);
        assert!(frd(&a, &a).unwrap() <= 1e-8);
        let v = frd(&stats(&[0.0], &[1.0]), &stats(&[1.0], &[1.0])).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let v = frd(
            &stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 4.0]),
            &stats(&[0.0, 0.0], &[4.0, 0.0, 0.0, 1.0]),
        )
        .unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        assert!(matches!(frd(&a, &stats(&[0.0], &[1.0])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn frd_commuting_oracle_and_symmetry() {
        let mut rng = rng_from(9);
        for _ in 0..20 {
            let d = 5;
            let m1: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let m2: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v1: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..5.0)).collect();
            let v2: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..5.0)).collect();
            let diag = |v: &[f64]| {
                let mut c = vec![0.0; d * d];
                (0..d).for_each(|i| c[i * d + i] = v[i]);
                c
            };
            let (a, b) = (stats(&m1, &diag(&v1)), stats(&m2, &diag(&v2)));
            let want: f64 = m1.iter().zip(&m2).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
                + v1.iter()
                    .zip(&v2)
                    .map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2))
                    .sum::<f64>();
            let got = frd(&a, &b).unwrap();
            assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
            assert!((got - frd(&b, &a).unwrap()).abs() <= 1e-8);
        }
    }

    #[test]
    fn frd_is_isometry_invariant() {
        let (x1, x2) = (normal(40, 6, 1), normal(40, 6, 2));
        let cfg = CurationConfig::default();
        let base = score_pair(&x1, &x2, &cfg).unwrap();
        let q = random_orthogonal(6, 3);
        let shift = DVector::from_column_slice(&[1.0, -2.0, 0.5, 3.0, 0.0, -1.0]);
        let apply = |x: &Tensor| {
            let m = DMatrix::from_row_slice(x.rows(), 6, x.data()) * q.transpose();
            let rows: Vec<Vec<f64>> = m
                .row_iter()
                .map(|r| (r.transpose() + &shift).as_slice().to_vec())
                .collect();
            Tensor::from_rows(&rows)
        };
        let moved = score_pair(&apply(&x1), &apply(&x2), &cfg).unwrap();
        assert!((base - moved).abs() <= 1e-6, "{base} vs {moved}");
        assert!(base > 0.0);
        assert!(score_pair(&x1, &x1, &cfg).unwrap() <= 1e-8);
    }

    #[test]
    fn threshold_is_the_mean() {
        let t = calibrate_threshold(&[0.4, 0.6, 0.8], 5).unwrap();
        assert!((t.tau_frd - 0.6).abs() < 1e-15);
        assert!(t.frozen);
        assert_eq!(calibrate_threshold(&[0.37], 5).unwrap().tau_frd, 0.37);
        assert!(matches!(calibrate_threshold(&[], 5), Err(Error::Contract(_))));

        let mut s = ThresholdState::collecting(5);
        for v in [0.4, 0.6, 0.8] {
            s.record(v).unwrap();
        }
        s.freeze().unwrap();
        assert_eq!(s, t);
        assert!(s.record(1.0).is_err());
    }

    #[test]
    fn decision_rule() {
        let t = threshold(0.56);
        let d = curate(0.50, &t, 1).unwrap();
        assert!(d.accepted && d.action == CurationAction::Update);
        let d = curate(1.29, &t, 1).unwrap();
        assert!(!d.accepted && d.action == CurationAction::Reaugment);
        assert_eq!(curate(1.29, &t, 2).unwrap().action, CurationAction::Skipped);
        assert_eq!(curate(0.1, &t, 2).unwrap().action, CurationAction::ReaugmentedUpdate);
        assert!(curate(0.56, &t, 1).unwrap().accepted);
        assert!(!curate(0.56 + 1e-12, &t, 1).unwrap().accepted);
        assert!(curate(0.1, &ThresholdState::collecting(5), 1).is_err());
        assert!(curate(0.1, &t, 3).is_err());
    }

    #[test]
    fn normalization_flag_rescales() {
        let (x1, x2) = (normal(30, 4, 5), normal(30, 4, 6));
        let scaled = |x: &Tensor| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * 7.0).collect()).unwrap();
        let cfg = CurationConfig {
            normalize: true,
            ..CurationConfig::default()
        };
        let a = score_pair(&x1, &x2, &cfg).unwrap();
        let b = score_pair(&scaled(&x1), &scaled(&x2), &cfg).unwrap();
        assert!((a - b).abs() < 1e-9);
    }
}

//! NT-Xent contrastive loss, positive-pair regularizers and their sum.
//!
//! Projections are stacked as `[2N, d]` with view 1 in rows `0..N` and
//! view 2 in rows `N..2N`, so row `k` pairs with row `k + N`. Both the
//! contrastive term and the regularizers see L2-normalized rows.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Penalty, Tensor, Var, NORM_FLOOR};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegularizerKind {
    Huber,
    L1,
    L2,
    None,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 4] = [
        RegularizerKind::Huber,
        RegularizerKind::L1,
        RegularizerKind::L2,
        RegularizerKind::None,
    ];

    fn penalty(self, delta: f64) -> Option<Penalty> {
        match self {
            RegularizerKind::Huber => Some(Penalty::Huber { delta }),
            RegularizerKind::L1 => Some(Penalty::Abs),
            RegularizerKind::L2 => Some(Penalty::Square),
            RegularizerKind::None => None,
        }
    }
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "huber" => Ok(RegularizerKind::Huber),
            "l1" => Ok(RegularizerKind::L1),
            "l2" => Ok(RegularizerKind::L2),
            "none" => Ok(RegularizerKind::None),
            other => Err(Error::Config(format!(
                "unknown regularizer `{other}` (expected huber, l1, l2 or none)"
            ))),
        }
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegularizerKind::Huber => "huber",
            RegularizerKind::L1 => "l1",
            RegularizerKind::L2 => "l2",
            RegularizerKind::None => "none",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub huber_delta: f64,
    pub lambda: f64,
    pub regularizer: RegularizerKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            huber_delta: 1.0,
            lambda: 1.0,
            regularizer: RegularizerKind::Huber,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return Err(Error::Config(format!(
                "huber_delta must be positive, got {}",
                self.huber_delta
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// The penalty that contributes to the total, if any.
    fn active_penalty(&self) -> Option<Penalty> {
        if self.lambda == 0.0 {
            return None;
        }
        self.regularizer.penalty(self.huber_delta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub nt_xent: f64,
    /// Reported even when it does not contribute (`λ = 0`); zero for
    /// [`RegularizerKind::None`].
    pub regularizer: f64,
    /// `nt_xent + λ·regularizer`.
    pub total: f64,
}

impl LossBreakdown {
    fn combine(nt_xent: f64, regularizer: f64, config: &LossConfig) -> Self {
        let total = if config.active_penalty().is_some() {
            nt_xent + config.lambda * regularizer
        } else {
            nt_xent
        };
        Self {
            nt_xent,
            regularizer,
            total,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSimilarity {
    pub value: f64,
    /// Set when either vector's norm fell below the floor.
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<CosineSimilarity> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine similarity operand", a.len(), b.len()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(CosineSimilarity {
        value: dot / (na.max(NORM_FLOOR) * nb.max(NORM_FLOOR)),
        degenerate: na < NORM_FLOOR || nb < NORM_FLOOR,
    })
}

/// Elementwise Huber penalty on `zi − zj`, averaged over dimensions.
pub fn huber_pair(zi: &[f64], zj: &[f64], delta: f64) -> Result<f64> {
    if zi.len() != zj.len() {
        return Err(Error::dim("huber pair operand", zi.len(), zj.len()));
    }
    if zi.is_empty() {
        return Err(Error::Contract("huber pair of empty vectors".into()));
    }
    let p = Penalty::Huber { delta };
    Ok(zi.iter().zip(zj).map(|(a, b)| p.value(a - b)).sum::<f64>() / zi.len() as f64)
}

fn stack_views(z1: &Tensor, z2: &Tensor) -> Result<Tensor> {
    if z1.ndim() != 2 || z2.ndim() != 2 {
        return Err(Error::Contract(format!(
            "projections must be [N, d], got {:?} and {:?}",
            z1.shape(),
            z2.shape()
        )));
    }
    if z1.rows() != z2.rows() {
        return Err(Error::dim("view batch size", z1.rows(), z2.rows()));
    }
    if z1.row_len() != z2.row_len() {
        return Err(Error::dim("projection width", z1.row_len(), z2.row_len()));
    }
    if z1.rows() == 0 {
        return Err(Error::Contract("nt_xent needs N >= 1 pairs".into()));
    }
    Tensor::concat_rows(&[z1, z2])
}

/// Builds the objective on stacked `[2N, d]` projections. Returns the
/// node to differentiate together with the reported values.
///
/// When the regularizer cannot contribute (`λ = 0` or kind `none`) the
/// total node is the NT-Xent node itself, so optimization trajectories
/// match plain NT-Xent bit for bit.
pub fn regularized_loss_graph(g: &mut Graph, z: Var, config: &LossConfig) -> Result<(Var, LossBreakdown)> {
    config.validate()?;
    let u = g.normalize_rows(z);
    let ntx = g.nt_xent(u, config.temperature)?;
    let nt_value = g.value(ntx).data()[0];
    let reg_value = match config.regularizer.penalty(config.huber_delta) {
        Some(p) => pair_penalty_value(g.value(u), p)?,
        None => 0.0,
    };
    let breakdown = LossBreakdown::combine(nt_value, reg_value, config);
    let total = match config.active_penalty() {
        Some(p) => {
            let reg = g.pair_penalty(u, p)?;
            let weighted = g.scale(reg, config.lambda);
            g.add(ntx, weighted)?
        }
        None => ntx,
    };
    debug_assert_eq!(g.value(total).data()[0].to_bits(), breakdown.total.to_bits());
    Ok((total, breakdown))
}

fn pair_penalty_value(u: &Tensor, p: Penalty) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(u.clone());
    let v = g.pair_penalty(x, p)?;
    Ok(g.value(v).data()[0])
}

/// NT-Xent of two `[N, d]` views; rows are normalized internally.
pub fn nt_xent(z1: &Tensor, z2: &Tensor, temperature: f64) -> Result<f64> {
    let z = stack_views(z1, z2)?;
    let mut g = Graph::new();
    let x = g.constant(z);
    let u = g.normalize_rows(x);
    let l = g.nt_xent(u, temperature)?;
    Ok(g.value(l).data()[0])
}

/// Mean over pairs of the configured penalty on normalized projections.
/// Zero for [`RegularizerKind::None`].
pub fn regularizer_batch(z1: &Tensor, z2: &Tensor, config: &LossConfig) -> Result<f64> {
    config.validate()?;
    let z = stack_views(z1, z2)?;
    match config.regularizer.penalty(config.huber_delta) {
        Some(p) => {
            let mut g = Graph::new();
            let x = g.constant(z);
            let u = g.normalize_rows(x);
            pair_penalty_value(g.value(u), p)
        }
        None => Ok(0.0),
    }
}

pub fn regularized_loss(z1: &Tensor, z2: &Tensor, config: &LossConfig) -> Result<LossBreakdown> {
    let z = stack_views(z1, z2)?;
    let mut g = Graph::new();
    let x = g.constant(z);
    let (_, b) = regularized_loss_graph(&mut g, x, config)?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng::rng_from;
    use rand::Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    fn random(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(seed);
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct evaluation of the per-anchor softmax cross-entropy with
    /// explicit loops over anchors, positives and the k ≠ i denominator.
    fn brute_nt_xent(z1: &Tensor, z2: &Tensor, tau: f64) -> f64 {
        let n = z1.rows();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| z1.row(i).to_vec())
            .chain((0..n).map(|i| z2.row(i).to_vec()))
            .collect();
        let sim = |a: usize, b: usize| {
            let dot: f64 = rows[a].iter().zip(&rows[b]).map(|(x, y)| x * y).sum();
            let na: f64 = rows[a].iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = rows[b].iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut total = 0.0;
        for i in 0..2 * n {
            let j = if i < n { i + n } else { i - n };
            let mut denom = 0.0;
            for k in 0..2 * n {
                if k != i {
                    denom += (sim(i, k) / tau).exp();
                }
            }
            total += -((sim(i, j) / tau).exp() / denom).ln();
        }
        total / (2 * n) as f64
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        assert!((cosine_similarity(&[2.0, 2.0], &[1.0, 1.0]).unwrap().value - 1.0).abs() < 1e-15);
        let want = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        let c = cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((c.value - want).abs() < 1e-15);
        assert!((c.value - 0.974631).abs() < 1e-6);
        assert!(!c.degenerate);
        let z = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(z.degenerate && z.value.is_finite());
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let l = nt_xent(&t(&[&[1.0, 2.0]]), &t(&[&[-3.0, 0.5]]), 0.5).unwrap();
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn two_pair_example() {
        let z1 = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let z2 = z1.clone();
        let l = nt_xent(&z1, &z2, 0.5).unwrap();
        let want = (1.0 + 2.0 * (-2f64).exp()).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.23954).abs() < 1e-5);
        assert!((brute_nt_xent(&z1, &z2, 0.5) - want).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force() {
        for seed in 0..5 {
            let (z1, z2) = (random(6, 4, seed), random(6, 4, seed + 100));
            for tau in [0.1, 0.5, 2.0] {
                let a = nt_xent(&z1, &z2, tau).unwrap();
                let b = brute_nt_xent(&z1, &z2, tau);
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
                assert!(a >= 0.0);
            }
        }
    }

    #[test]
    fn rotation_invariant() {
        let (z1, z2) = (random(5, 3, 7), random(5, 3, 8));
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = |z: &Tensor| {
            let rows: Vec<Vec<f64>> = (0..z.rows())
                .map(|i| {
                    let r = z.row(i);
                    vec![c * r[0] - s * r[1], s * r[0] + c * r[1], -r[2]]
                })
                .collect();
            Tensor::from_rows(&rows)
        };
        let a = nt_xent(&z1, &z2, 0.5).unwrap();
        let b = nt_xent(&rot(&z1), &rot(&z2), 0.5).unwrap();
        assert!((a - b).abs() <= 1e-10);
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber_pair(&[0.3, -0.2], &[0.3, -0.2], 1.0).unwrap(), 0.0);
        assert_eq!(huber_pair(&[0.5], &[0.0], 1.0).unwrap(), 0.125);
        assert_eq!(huber_pair(&[3.0], &[0.0], 1.0).unwrap(), 2.5);
        assert!(matches!(
            huber_pair(&[1.0], &[1.0, 2.0], 1.0),
            Err(Error::Dimension { .. })
        ));
        let mean = (huber_pair(&[0.5], &[0.0], 1.0).unwrap() + huber_pair(&[3.0], &[0.0], 1.0).unwrap()) / 2.0;
        assert_eq!(mean, 1.3125);
    }

    #[test]
    fn huber_is_c1_at_delta() {
        let delta = 0.7;
        let eps = 1e-9;
        let h = |d: f64| huber_pair(&[d], &[0.0], delta).unwrap();
        assert!((h(delta - eps) - h(delta + eps)).abs() < 1e-6);
        let p = Penalty::Huber { delta };
        assert!((p.slope(delta - eps) - p.slope(delta + eps)).abs() < 1e-6);
        let slope = |x: f64| (h(x + 1e-7) - h(x - 1e-7)) / 2e-7;
        assert!((slope(delta - 1e-5) - slope(delta + 1e-5)).abs() < 1e-4);
        assert!((slope(50.0) - delta).abs() < 1e-6);
    }

    #[test]
    fn regularizer_kinds() {
        let z = random(4, 3, 3);
        for kind in RegularizerKind::ALL {
            let cfg = LossConfig {
                regularizer: kind,
                ..LossConfig::default()
            };
            assert_eq!(regularizer_batch(&z, &z, &cfg).unwrap(), 0.0);
        }
        // Unit-norm rows that differ by exactly 1 in each coordinate.
        let z1 = t(&[&[0.5, 0.5, 0.5, 0.5]]);
        let z2 = t(&[&[-0.5, -0.5, -0.5, -0.5]]);
        let l2 = LossConfig {
            regularizer: RegularizerKind::L2,
            ..LossConfig::default()
        };
        assert_eq!(regularizer_batch(&z1, &z2, &l2).unwrap(), 0.5);
        let l1 = LossConfig {
            regularizer: RegularizerKind::L1,
            ..l2
        };
        assert_eq!(regularizer_batch(&z1, &z2, &l1).unwrap(), 1.0);
    }

    #[test]
    fn huber_equals_l2_below_delta() {
        let (z1, z2) = (random(5, 4, 21), random(5, 4, 22));
        // Unit rows differ by at most 2 per coordinate.
        let huber = LossConfig {
            huber_delta: 2.5,
            ..LossConfig::default()
        };
        let l2 = LossConfig {
            regularizer: RegularizerKind::L2,
            ..huber
        };
        assert_eq!(
            regularizer_batch(&z1, &z2, &huber).unwrap(),
            regularizer_batch(&z1, &z2, &l2).unwrap()
        );
    }

    #[test]
    fn regularizer_uses_normalized_rows() {
        let (z1, z2) = (random(3, 4, 31), random(3, 4, 32));
        let cfg = LossConfig::default();
        let scaled = |z: &Tensor| Tensor::new(z.shape().to_vec(), z.data().iter().map(|v| v * 10.0).collect()).unwrap();
        let a = regularizer_batch(&z1, &z2, &cfg).unwrap();
        let b = regularizer_batch(&scaled(&z1), &scaled(&z2), &cfg).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn total_is_exact_sum() {
        let (z1, z2) = (random(4, 5, 41), random(4, 5, 42));
        for kind in RegularizerKind::ALL {
            for lambda in [0.0, 0.3, 1.0, 2.5] {
                let cfg = LossConfig {
                    lambda,
                    regularizer: kind,
                    ..LossConfig::default()
                };
                let b = regularized_loss(&z1, &z2, &cfg).unwrap();
                let plain = nt_xent(&z1, &z2, cfg.temperature).unwrap();
                assert_eq!(b.nt_xent.to_bits(), plain.to_bits());
                if lambda == 0.0 || kind == RegularizerKind::None {
                    assert_eq!(b.total.to_bits(), plain.to_bits());
                }
                assert_eq!(b.total - (b.nt_xent + cfg.lambda * b.regularizer), 0.0);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let z = random(2, 3, 1);
        assert!(matches!(
            nt_xent(&z, &random(3, 3, 2), 0.5),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            nt_xent(&z, &random(2, 4, 2), 0.5),
            Err(Error::Dimension { .. })
        ));
        let empty = Tensor::zeros(&[0, 3]);
        assert!(matches!(nt_xent(&empty, &empty, 0.5), Err(Error::Contract(_))));
        for bad in [
            LossConfig {
                temperature: 0.0,
                ..LossConfig::default()
            },
            LossConfig {
                huber_delta: -1.0,
                ..LossConfig::default()
            },
            LossConfig {
                lambda: -0.1,
                ..LossConfig::default()
            },
        ] {
            assert!(matches!(regularized_loss(&z, &z, &bad), Err(Error::Config(_))));
        }
        assert!("l3".parse::<RegularizerKind>().is_err());
    }

    #[test]
    fn gradient_of_total_matches_differences() {
        let z = random(8, 3, 51);
        for kind in [RegularizerKind::Huber, RegularizerKind::L1, RegularizerKind::L2] {
            let cfg = LossConfig {
                regularizer: kind,
                huber_delta: 0.3,
                ..LossConfig::default()
            };
            let report = grad_check(
                |g, v| Ok(regularized_loss_graph(g, v[0], &cfg)?.0),
                std::slice::from_ref(&z),
                1e-6,
            )
            .unwrap();
            assert!(report.within(1e-4), "{kind}: {report:?}");
        }
    }
}

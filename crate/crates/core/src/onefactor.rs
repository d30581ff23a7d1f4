//! One-factor credit-cycle model.
//!
//! A borrower's latent creditworthiness change is `sqrt(1 - rho) * Y + sqrt(rho) * Z`
//! with `Y` idiosyncratic and `Z` the shared systematic factor. Per initial
//! grade, thresholds on the latent axis separate destination grades, so the
//! transition matrix conditional on `Z = z` is a difference of normal CDFs.
//!
//! Sign convention: thresholds are cumulative from the best grade, so a larger
//! `z` pushes mass toward worse grades. `z` is therefore a downgrade-pressure
//! factor.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{average_matrix, DomainError, TransitionObservation, TransitionPanel, ROUNDING_TOLERANCE};
use crate::numerics::{
    minimize_scalar, norm_cdf, norm_inv_cdf, norm_inv_sf, norm_sf, sample_variance, ClipPolicy,
    NumericsError,
};

/// Search interval for the systematic factor.
pub const Z_BRACKET: (f64, f64) = (-8.0, 8.0);
/// Absolute tolerance on extracted `z`.
pub const Z_TOLERANCE: f64 = 1e-10;
/// Candidate range for the variance-one search over `rho`.
pub const RHO_SEARCH_RANGE: (f64, f64) = (0.01, 0.99);
/// Accepted distance of the factor variance from one.
pub const VARIANCE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OneFactorError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("correlation {0} is outside [0, 1)")]
    RhoOutOfRange(f64),
    #[error("correlation vector has {got} entries, expected {expected}")]
    RhoLength { expected: usize, got: usize },
    #[error("grade {grade}: cumulative probabilities are not strictly increasing after clipping")]
    DegenerateRow { grade: usize },
    #[error("grade {grade}: row sums to {sum}, not 1")]
    RowSum { grade: usize, sum: f64 },
    #[error("period {period:?}: no grade has a positive cohort")]
    NoCohort { period: String },
    #[error("need at least {needed} periods, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("threshold set covers {got} grades, expected {expected}")]
    GradeMismatch { expected: usize, got: usize },
}

/// Asset correlation, either shared by all grades or one value per initial grade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Correlation {
    Uniform(f64),
    PerGrade(Vec<f64>),
}

impl From<f64> for Correlation {
    fn from(rho: f64) -> Self {
        Correlation::Uniform(rho)
    }
}

impl Correlation {
    pub fn for_grade(&self, grade: usize) -> f64 {
        match self {
            Correlation::Uniform(r) => *r,
            Correlation::PerGrade(v) => v[grade],
        }
    }

    pub fn validate(&self, grades: usize) -> Result<(), OneFactorError> {
        let values: &[f64] = match self {
            Correlation::Uniform(r) => std::slice::from_ref(r),
            Correlation::PerGrade(v) => {
                if v.len() != grades {
                    return Err(OneFactorError::RhoLength {
                        expected: grades,
                        got: v.len(),
                    });
                }
                v
            }
        };
        match values.iter().find(|r| !(0.0..1.0).contains(*r)) {
            Some(r) => Err(OneFactorError::RhoOutOfRange(*r)),
            None => Ok(()),
        }
    }
}

/// Per-grade cut points `x_1 < ... < x_{K-1}`; `None` for grades with no data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    rows: Vec<Option<Vec<f64>>>,
}

impl ThresholdSet {
    /// Validates strict monotonicity and finiteness of every present row.
    pub fn new(rows: Vec<Option<Vec<f64>>>) -> Result<Self, OneFactorError> {
        for (grade, row) in rows.iter().enumerate() {
            if let Some(r) = row {
                let ok = r.iter().all(|x| x.is_finite()) && r.windows(2).all(|w| w[0] < w[1]);
                if !ok {
                    return Err(OneFactorError::DegenerateRow { grade });
                }
            }
        }
        Ok(Self { rows })
    }

    pub fn grade_count(&self) -> usize {
        self.rows.len()
    }

    pub fn grade(&self, i: usize) -> Option<&[f64]> {
        self.rows[i].as_deref()
    }

    pub fn rows(&self) -> &[Option<Vec<f64>>] {
        &self.rows
    }
}

/// Default-column probabilities per initial grade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdVector(pub Vec<f64>);

pub fn pd_from_matrix(m: &DMatrix<f64>) -> PdVector {
    let last = m.ncols() - 1;
    PdVector((0..m.nrows()).map(|i| m[(i, last)]).collect())
}

/// Simplified asset-correlation formula `0.12 + 0.12 exp(-50 pd)`.
pub fn basel_rho(pd: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&pd));
    0.12 + 0.12 * (-50.0 * pd).exp()
}

pub fn basel_correlation(pd: &PdVector) -> Correlation {
    Correlation::PerGrade(pd.0.iter().map(|&p| basel_rho(p)).collect())
}

/// Thresholds from an average matrix: `x_j = Phi^{-1}(sum_{k<=j} P_k)`.
///
/// Rows that are entirely zero (never observed) get no thresholds. Rows may
/// be off from one by published rounding and are rescaled before inversion.
pub fn calibrate_thresholds(
    avg: &DMatrix<f64>,
    policy: &ClipPolicy,
) -> Result<ThresholdSet, OneFactorError> {
    let k = avg.ncols();
    let mut rows = Vec::with_capacity(avg.nrows());
    for i in 0..avg.nrows() {
        let row: Vec<f64> = avg.row(i).iter().copied().collect();
        let sum: f64 = row.iter().sum();
        if sum == 0.0 {
            rows.push(None);
            continue;
        }
        if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > ROUNDING_TOLERANCE {
            return Err(OneFactorError::RowSum { grade: i, sum });
        }
        let mut cuts = Vec::with_capacity(k - 1);
        let mut head = 0.0;
        for j in 0..k - 1 {
            head += row[j];
            let tail: f64 = row[j + 1..].iter().sum();
            let head = head / sum;
            let tail = tail / sum;
            // invert whichever side is smaller to keep tail precision
            let x = if head <= 0.5 {
                norm_inv_cdf(policy.clip(head))?
            } else {
                norm_inv_sf(policy.clip(tail))?
            };
            cuts.push(x);
        }
        if !cuts.windows(2).all(|w| w[0] < w[1]) {
            return Err(OneFactorError::DegenerateRow { grade: i });
        }
        rows.push(Some(cuts));
    }
    ThresholdSet::new(rows)
}

/// Fills `out` with the conditional row for cut points `cuts`.
fn conditional_row(cuts: &[f64], rho: f64, z: f64, out: &mut [f64]) {
    let shift = rho.sqrt() * z;
    let scale = (1.0 - rho).sqrt();
    let k = cuts.len() + 1;
    // right-hand CDF differences are taken from whichever tail is smaller
    let mut prev_arg = f64::NEG_INFINITY;
    for j in 0..k {
        let arg = if j + 1 < k {
            (cuts[j] - shift) / scale
        } else {
            f64::INFINITY
        };
        out[j] = if prev_arg > 0.0 {
            norm_sf(prev_arg) - norm_sf(arg)
        } else {
            norm_cdf(arg) - norm_cdf(prev_arg)
        };
        prev_arg = arg;
    }
}

/// Transition matrix conditional on the systematic factor `z`.
///
/// Grades without thresholds produce all-zero rows.
pub fn conditional_matrix(
    th: &ThresholdSet,
    rho: &Correlation,
    z: f64,
) -> Result<DMatrix<f64>, OneFactorError> {
    rho.validate(th.grade_count())?;
    let k = th
        .rows
        .iter()
        .flatten()
        .map(|r| r.len() + 1)
        .next()
        .unwrap_or(th.grade_count() + 1);
    let mut m = DMatrix::zeros(th.grade_count(), k);
    let mut buf = vec![0.0; k];
    for i in 0..th.grade_count() {
        if let Some(cuts) = th.grade(i) {
            conditional_row(cuts, rho.for_grade(i), z, &mut buf);
            for j in 0..k {
                m[(i, j)] = buf[j];
            }
        }
    }
    Ok(m)
}

/// Minimizer and objective value of the weighted least-squares factor fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorEstimate {
    pub z: f64,
    pub objective: f64,
}

/// Weighted least-squares objective for one period as a function of `z`.
pub fn factor_objective(
    obs: &TransitionObservation,
    th: &ThresholdSet,
    rho: &Correlation,
    policy: &ClipPolicy,
    z: f64,
) -> f64 {
    let k = obs.empirical().ncols();
    let mut buf = vec![0.0; k];
    objective_with(obs, th, rho, policy, z, &mut buf)
}

fn objective_with(
    obs: &TransitionObservation,
    th: &ThresholdSet,
    rho: &Correlation,
    policy: &ClipPolicy,
    z: f64,
    buf: &mut [f64],
) -> f64 {
    let p = obs.empirical();
    let mut total = 0.0;
    for i in 0..th.grade_count() {
        let n = obs.cohort()[i];
        let Some(cuts) = th.grade(i) else { continue };
        if n <= 0.0 || !obs.is_observed(i) {
            continue;
        }
        conditional_row(cuts, rho.for_grade(i), z, buf);
        for (j, &fitted) in buf.iter().enumerate() {
            let c = policy.clip(fitted);
            let d = p[(i, j)] - fitted;
            total += n * d * d / (c * (1.0 - c));
        }
    }
    total
}

/// Extracts the period's systematic factor by minimizing the weighted
/// least-squares distance between observed and conditional matrices.
///
/// Grades with zero cohort carry zero weight.
pub fn extract_z(
    obs: &TransitionObservation,
    th: &ThresholdSet,
    rho: &Correlation,
    policy: &ClipPolicy,
) -> Result<FactorEstimate, OneFactorError> {
    if th.grade_count() != obs.empirical().nrows() {
        return Err(OneFactorError::GradeMismatch {
            expected: obs.empirical().nrows(),
            got: th.grade_count(),
        });
    }
    rho.validate(th.grade_count())?;
    let usable = (0..th.grade_count())
        .any(|i| obs.cohort()[i] > 0.0 && obs.is_observed(i) && th.grade(i).is_some());
    if !usable {
        return Err(OneFactorError::NoCohort {
            period: obs.period().to_string(),
        });
    }
    let mut buf = vec![0.0; obs.empirical().ncols()];
    let min = minimize_scalar(
        |z| objective_with(obs, th, rho, policy, z, &mut buf),
        Z_BRACKET,
        Z_TOLERANCE,
    )?;
    Ok(FactorEstimate {
        z: min.x,
        objective: min.value,
    })
}

/// Thresholds, correlation and the extracted factor path for a panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneFactorFit {
    pub rho: Correlation,
    pub thresholds: ThresholdSet,
    pub periods: Vec<String>,
    pub z_series: Vec<f64>,
    pub objective_values: Vec<f64>,
    pub warnings: Vec<String>,
}

impl OneFactorFit {
    /// The factor path, negated when `flip` is set (presentation only).
    pub fn z_presented(&self, flip: bool) -> Vec<f64> {
        if flip {
            self.z_series.iter().map(|z| -z).collect()
        } else {
            self.z_series.clone()
        }
    }

    pub fn fitted_matrix(&self, t: usize) -> Result<DMatrix<f64>, OneFactorError> {
        conditional_matrix(&self.thresholds, &self.rho, self.z_series[t])
    }
}

/// Extracts the factor for every period with fixed thresholds and correlation.
pub fn extract_series(
    panel: &TransitionPanel,
    th: &ThresholdSet,
    rho: &Correlation,
    policy: &ClipPolicy,
) -> Result<Vec<FactorEstimate>, OneFactorError> {
    panel
        .observations()
        .par_iter()
        .map(|obs| extract_z(obs, th, rho, policy))
        .collect()
}

/// Fits the model for a given correlation: thresholds from the panel
/// average, then one factor per period.
pub fn fit_one_factor(
    panel: &TransitionPanel,
    rho: Correlation,
    policy: &ClipPolicy,
) -> Result<OneFactorFit, OneFactorError> {
    let avg = average_matrix(panel)?;
    let thresholds = calibrate_thresholds(&avg, policy)?;
    let est = extract_series(panel, &thresholds, &rho, policy)?;
    Ok(OneFactorFit {
        rho,
        thresholds,
        periods: panel.periods(),
        z_series: est.iter().map(|e| e.z).collect(),
        objective_values: est.iter().map(|e| e.objective).collect(),
        warnings: Vec::new(),
    })
}

/// Outcome of the variance-one correlation search.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoCalibration {
    pub rho: f64,
    pub factor_variance: f64,
    /// False when no variance-one crossing exists and a boundary was returned.
    pub crossed: bool,
    pub fit: OneFactorFit,
}

/// Finds the uniform correlation at which the extracted factor series has
/// unit sample variance.
///
/// A coarse scan over `RHO_SEARCH_RANGE` looks for a sign change of
/// `var(Z(rho)) - 1`; bisection then narrows it until the variance is within
/// `VARIANCE_TOLERANCE` of one. Without a crossing the boundary closest to
/// variance one is returned and a warning is attached to the fit.
pub fn calibrate_rho_variance(
    panel: &TransitionPanel,
    policy: &ClipPolicy,
) -> Result<RhoCalibration, OneFactorError> {
    if panel.len() < 3 {
        return Err(OneFactorError::TooShort {
            needed: 3,
            got: panel.len(),
        });
    }
    let avg = average_matrix(panel)?;
    let thresholds = calibrate_thresholds(&avg, policy)?;
    let variance_at = |rho: f64| -> Result<(f64, Vec<FactorEstimate>), OneFactorError> {
        let est = extract_series(panel, &thresholds, &Correlation::Uniform(rho), policy)?;
        let z: Vec<f64> = est.iter().map(|e| e.z).collect();
        Ok((sample_variance(&z).unwrap_or(0.0), est))
    };

    const SCAN: usize = 25;
    let (lo_bound, hi_bound) = RHO_SEARCH_RANGE;
    let mut scan = Vec::with_capacity(SCAN);
    for s in 0..SCAN {
        let rho = lo_bound + (hi_bound - lo_bound) * s as f64 / (SCAN - 1) as f64;
        let (var, est) = variance_at(rho)?;
        scan.push((rho, var - 1.0, est));
    }

    let finish = |rho: f64, var: f64, est: Vec<FactorEstimate>, crossed: bool| {
        let mut warnings = Vec::new();
        if !crossed {
            warnings.push(format!(
                "no variance-one crossing for rho in [{lo_bound}, {hi_bound}]; returning boundary rho = {rho} (factor variance {var})"
            ));
        }
        RhoCalibration {
            rho,
            factor_variance: var,
            crossed,
            fit: OneFactorFit {
                rho: Correlation::Uniform(rho),
                thresholds: thresholds.clone(),
                periods: panel.periods(),
                z_series: est.iter().map(|e| e.z).collect(),
                objective_values: est.iter().map(|e| e.objective).collect(),
                warnings,
            },
        }
    };

    // first grid point within tolerance or first bracketed sign change, whichever comes first in rho
    let hit = scan.iter().position(|s| s.1.abs() < VARIANCE_TOLERANCE);
    let cross = scan.windows(2).position(|w| w[0].1.signum() != w[1].1.signum());
    if let Some(h) = hit {
        if cross.is_none_or(|c| h <= c) {
            let (rho, g, est) = scan.swap_remove(h);
            return Ok(finish(rho, g + 1.0, est, true));
        }
    }
    let Some(cross) = cross else {
        let first = &scan[0];
        let last = &scan[SCAN - 1];
        let (rho, g, est) = if first.1.abs() <= last.1.abs() {
            (first.0, first.1, first.2.clone())
        } else {
            (last.0, last.1, last.2.clone())
        };
        log::warn!("variance search found no crossing; boundary rho = {rho}");
        return Ok(finish(rho, g + 1.0, est, false));
    };

    let (mut lo, mut g_lo) = (scan[cross].0, scan[cross].1);
    let mut hi = scan[cross + 1].0;
    let mut best = (lo, g_lo, scan[cross].2.clone());
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let (var, est) = variance_at(mid)?;
        let g = var - 1.0;
        if g.abs() < best.1.abs() {
            best = (mid, g, est);
        }
        if g.abs() < VARIANCE_TOLERANCE * 0.1 || hi - lo < 1e-12 {
            break;
        }
        if g.signum() == g_lo.signum() {
            lo = mid;
            g_lo = g;
        } else {
            hi = mid;
        }
    }
    let (rho, g, est) = best;
    Ok(finish(rho, g + 1.0, est, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::RatingScale;
    use crate::numerics::norm_pdf;
    use proptest::prelude::*;

    fn rates(period: &str, m: DMatrix<f64>, n: f64) -> TransitionObservation {
        let k = m.ncols();
        TransitionObservation::from_rates(period, &RatingScale::numbered(k).unwrap(), m.clone(), vec![n; m.nrows()])
            .unwrap()
    }

    fn base_thresholds() -> ThresholdSet {
        let avg = DMatrix::from_row_slice(
            3,
            4,
            &[0.90, 0.07, 0.02, 0.01, 0.05, 0.85, 0.06, 0.04, 0.01, 0.09, 0.70, 0.20],
        );
        calibrate_thresholds(&avg, &ClipPolicy::default()).unwrap()
    }

    #[test]
    fn thresholds_two_grades() {
        let th = calibrate_thresholds(&DMatrix::from_row_slice(1, 2, &[0.5, 0.5]), &ClipPolicy::default()).unwrap();
        assert_eq!(th.grade(0).unwrap(), &[0.0]);
        let th = calibrate_thresholds(&DMatrix::from_row_slice(1, 2, &[0.9, 0.1]), &ClipPolicy::default()).unwrap();
        assert!((th.grade(0).unwrap()[0] - 1.28155).abs() < 1e-5);
    }

    #[test]
    fn thresholds_uniform_row_symmetric() {
        let th = calibrate_thresholds(&DMatrix::from_row_slice(1, 4, &[0.25; 4]), &ClipPolicy::default()).unwrap();
        let x = th.grade(0).unwrap();
        assert!((x[0] + 0.6744897501960817).abs() < 1e-12);
        assert_eq!(x[1], 0.0);
        assert!((x[2] - 0.6744897501960817).abs() < 1e-12);
    }

    #[test]
    fn thresholds_reject_degenerate_row() {
        let err = calibrate_thresholds(&DMatrix::from_row_slice(1, 3, &[0.9, 0.0, 0.1]), &ClipPolicy::default());
        assert_eq!(err, Err(OneFactorError::DegenerateRow { grade: 0 }));
        let err = calibrate_thresholds(&DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]), &ClipPolicy::default());
        assert_eq!(err, Err(OneFactorError::DegenerateRow { grade: 0 }));
        // clipping separates a trailing zero from the default mass
        assert!(calibrate_thresholds(&DMatrix::from_row_slice(1, 3, &[0.9, 0.1, 0.0]), &ClipPolicy::default()).is_ok());
        let err = calibrate_thresholds(&DMatrix::from_row_slice(1, 2, &[0.5, 0.4]), &ClipPolicy::default());
        assert!(matches!(err, Err(OneFactorError::RowSum { .. })));
    }

    #[test]
    fn thresholds_skip_empty_rows() {
        let avg = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.0]);
        let th = calibrate_thresholds(&avg, &ClipPolicy::default()).unwrap();
        assert!(th.grade(1).is_none());
        let m = conditional_matrix(&th, &0.2.into(), 1.0).unwrap();
        assert_eq!(m.row(1).sum(), 0.0);
    }

    #[test]
    fn conditional_zero_rho_is_unconditional() {
        let th = calibrate_thresholds(&DMatrix::from_row_slice(1, 2, &[0.9, 0.1]), &ClipPolicy::default()).unwrap();
        for z in [-3.0, 0.0, 2.5] {
            let m = conditional_matrix(&th, &0.0.into(), z).unwrap();
            assert!((m[(0, 0)] - 0.9).abs() < 1e-14);
            assert!((m[(0, 1)] - 0.1).abs() < 1e-14);
        }
    }

    #[test]
    fn conditional_symmetric_point() {
        let th = ThresholdSet::new(vec![Some(vec![0.0])]).unwrap();
        let m = conditional_matrix(&th, &0.5.into(), 0.0).unwrap();
        assert_eq!(m[(0, 0)], 0.5);
        assert_eq!(m[(0, 1)], 0.5);
    }

    #[test]
    fn conditional_default_entry_reference() {
        // mpmath: 1 - Phi((x - 0.5 * 2) / sqrt(0.75)) with x = Phi^{-1}(0.9)
        let th = calibrate_thresholds(&DMatrix::from_row_slice(1, 2, &[0.9, 0.1]), &ClipPolicy::default()).unwrap();
        let m = conditional_matrix(&th, &0.25.into(), 2.0).unwrap();
        assert!((m[(0, 1)] - 0.37254976397474754).abs() < 1e-12);
        assert!((m[(0, 1)] - 0.3725).abs() < 1e-4);
    }

    #[test]
    fn conditional_rejects_bad_rho() {
        let th = base_thresholds();
        assert_eq!(
            conditional_matrix(&th, &1.0.into(), 0.0),
            Err(OneFactorError::RhoOutOfRange(1.0))
        );
        assert!(conditional_matrix(&th, &Correlation::PerGrade(vec![0.1]), 0.0).is_err());
    }

    #[test]
    fn extract_round_trip_at_zero_and_positive() {
        let th = base_thresholds();
        let rho = Correlation::Uniform(0.12);
        for z0 in [0.0, 1.7] {
            let obs = rates("t", conditional_matrix(&th, &rho, z0).unwrap(), 500.0);
            let est = extract_z(&obs, &th, &rho, &ClipPolicy::default()).unwrap();
            assert!((est.z - z0).abs() < 1e-6, "{est:?}");
            assert!(est.objective < 1e-10);
        }
    }

    #[test]
    fn extract_argmin_invariant_to_cohort_scale() {
        let th = base_thresholds();
        let rho = Correlation::Uniform(0.2);
        let mut m = conditional_matrix(&th, &rho, 0.8).unwrap();
        // perturb so the fit is not exact
        m[(0, 0)] -= 0.01;
        m[(0, 1)] += 0.01;
        m[(2, 3)] += 0.02;
        m[(2, 2)] -= 0.02;
        let obs = rates("t", m, 300.0);
        let a = extract_z(&obs, &th, &rho, &ClipPolicy::default()).unwrap();
        let b = extract_z(&obs.with_scaled_cohort(2.0), &th, &rho, &ClipPolicy::default()).unwrap();
        assert!((a.z - b.z).abs() < 1e-8);
        assert!((b.objective - 2.0 * a.objective).abs() < 1e-9 * a.objective.max(1.0));
    }

    #[test]
    fn extract_requires_a_cohort() {
        let th = base_thresholds();
        let obs = rates("t", DMatrix::zeros(3, 4), 100.0);
        assert!(matches!(
            extract_z(&obs, &th, &0.2.into(), &ClipPolicy::default()),
            Err(OneFactorError::NoCohort { .. })
        ));
    }

    #[test]
    fn basel_values() {
        assert_eq!(basel_rho(0.0), 0.24);
        assert!((basel_rho(1.0) - 0.12).abs() < 1e-12);
        assert!((basel_rho(0.02) - 0.164_145_532_940_573_07).abs() < 1e-15);
        let c = basel_correlation(&PdVector(vec![0.0, 0.0]));
        assert_eq!(c, Correlation::PerGrade(vec![0.24, 0.24]));
    }

    #[test]
    fn pd_column() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.8611, 0.1389]);
        assert_eq!(pd_from_matrix(&m).0, vec![0.0, 0.1389]);
        let th = calibrate_thresholds(&DMatrix::from_row_slice(1, 3, &[0.7, 0.2, 0.1]), &ClipPolicy::default()).unwrap();
        let m = conditional_matrix(&th, &0.0.into(), 3.0).unwrap();
        assert!((pd_from_matrix(&m).0[0] - 0.1).abs() < 1e-14);
    }

    #[test]
    fn variance_search_constant_panel_hits_boundary() {
        let th = base_thresholds();
        let m = conditional_matrix(&th, &0.2.into(), 0.5).unwrap();
        let scale = RatingScale::numbered(4).unwrap();
        let obs = (0..5)
            .map(|t| TransitionObservation::from_rates(t.to_string(), &scale, m.clone(), vec![100.0; 3]).unwrap())
            .collect();
        let panel = TransitionPanel::new(scale, obs).unwrap();
        let cal = calibrate_rho_variance(&panel, &ClipPolicy::default()).unwrap();
        assert!(!cal.crossed);
        assert!(cal.factor_variance < 1e-12);
        assert_eq!(cal.fit.warnings.len(), 1);
        assert!(matches!(
            calibrate_rho_variance(
                &TransitionPanel::new(panel.scale().clone(), panel.observations()[..2].to_vec()).unwrap(),
                &ClipPolicy::default()
            ),
            Err(OneFactorError::TooShort { .. })
        ));
    }

    fn arb_thresholds() -> impl Strategy<Value = ThresholdSet> {
        prop::collection::vec(prop::collection::vec(0.05f64..1.0, 4), 1..4).prop_map(|rows| {
            ThresholdSet::new(
                rows.into_iter()
                    .map(|gaps| {
                        let mut x = -2.5;
                        Some(
                            gaps.iter()
                                .map(|g| {
                                    x += g;
                                    x
                                })
                                .collect(),
                        )
                    })
                    .collect(),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn conditional_rows_stochastic(th in arb_thresholds(), rho in 0.0f64..0.99, z in -6.0f64..6.0) {
            let m = conditional_matrix(&th, &rho.into(), z).unwrap();
            for i in 0..m.nrows() {
                prop_assert!((m.row(i).sum() - 1.0).abs() < 1e-12);
                prop_assert!(m.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn conditional_derivative_matches_density(th in arb_thresholds(), rho in 0.05f64..0.9, z in -3.0f64..3.0) {
            let h = 1e-5;
            let up = conditional_matrix(&th, &rho.into(), z + h).unwrap();
            let dn = conditional_matrix(&th, &rho.into(), z - h).unwrap();
            let s = rho.sqrt() / (1.0 - rho).sqrt();
            for i in 0..th.grade_count() {
                let cuts = th.grade(i).unwrap();
                let arg = |j: usize| -> f64 {
                    if j == 0 { f64::NEG_INFINITY } else if j > cuts.len() { f64::INFINITY }
                    else { (cuts[j - 1] - rho.sqrt() * z) / (1.0 - rho).sqrt() }
                };
                let dens = |a: f64| if a.is_finite() { norm_pdf(a) } else { 0.0 };
                for j in 0..=cuts.len() {
                    let analytic = -s * (dens(arg(j + 1)) - dens(arg(j)));
                    let fd = (up[(i, j)] - dn[(i, j)]) / (2.0 * h);
                    prop_assert!((analytic - fd).abs() < 1e-6, "{} vs {}", analytic, fd);
                }
            }
        }

        #[test]
        fn thresholds_monotone_when_cumsums_distinct(w in prop::collection::vec(0.001f64..1.0, 2..8)) {
            let total: f64 = w.iter().sum();
            let row: Vec<f64> = w.iter().map(|v| v / total).collect();
            let avg = DMatrix::from_row_slice(1, row.len(), &row);
            let th = calibrate_thresholds(&avg, &ClipPolicy::default()).unwrap();
            let x = th.grade(0).unwrap();
            prop_assert!(x.windows(2).all(|p| p[0] < p[1]));
        }
    }
}

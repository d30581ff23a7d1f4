//! Macroeconomic-risk model.
//!
//! The latent variable for a borrower starting in grade `i` is `M^T beta_i + Y`
//! with `M` observed macro variables and `Y` standard normal. Probabilities
//! are expressed through the right-tail normal function, so for each
//! destination threshold `j`
//!
//! ```text
//! U_{ij,t} = sf^{-1}( sum_{k > j} P_{ik,t} ) = x_j^i - M_t^T beta_i + e_t
//! ```
//!
//! which is linear in the macro variables. Each initial grade is fitted by
//! ordinary least squares on the stacked `(j, t)` system with one intercept
//! per threshold and a slope vector shared across thresholds.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{MacroSeries, RatingScale, TransitionPanel};
use crate::numerics::{norm_cdf, norm_inv_sf, norm_sf, ClipPolicy, NumericsError};
use crate::onefactor::PdVector;

/// Relative singular-value cutoff for rank deficiency.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MacroRiskError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("macro periods do not match the panel: {0}")]
    Misaligned(String),
    #[error("grade {grade}: design matrix is rank deficient; collinear columns: {}", columns.join(", "))]
    RankDeficient { grade: String, columns: Vec<String> },
    #[error("grade {grade}: every observation is masked")]
    AllMasked { grade: String },
    #[error("grade {grade}: no unmasked observations for {}", columns.join(", "))]
    EmptyThresholds { grade: String, columns: Vec<String> },
    #[error("missing macro variable {0:?}")]
    MissingVariable(String),
    #[error("expected {expected} macro values, got {got}")]
    MacroLength { expected: usize, got: usize },
}

/// How exact-zero tail sums are treated before inversion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroCellPolicy {
    /// Clip to `[eps, 1 - eps]` and mask the cell.
    #[default]
    Clip,
    /// Replace a zero tail with `1 / (2 N)` (and a full tail with `1 - 1 / (2 N)`)
    /// and keep the cell in the regression.
    ContinuityCorrection,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbitOptions {
    pub clip: ClipPolicy,
    pub zero_cells: ZeroCellPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Observed,
    /// Tail sum replaced by the continuity correction.
    Corrected,
    /// Clipping moved the tail sum; excluded from fitting.
    Clipped,
    /// Initial grade has no cohort in this period.
    Unobserved,
}

impl CellStatus {
    pub fn is_masked(self) -> bool {
        matches!(self, CellStatus::Clipped | CellStatus::Unobserved)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbitCell {
    pub value: f64,
    pub status: CellStatus,
}

/// Probit-transformed tail rates `U_{ij,t}` for thresholds `j = 1..K-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbitPanel {
    scale: RatingScale,
    periods: Vec<String>,
    /// Indexed `[t][i][j - 1]`.
    cells: Vec<Vec<Vec<ProbitCell>>>,
    options: ProbitOptions,
}

impl ProbitPanel {
    pub fn scale(&self) -> &RatingScale {
        &self.scale
    }

    pub fn periods(&self) -> &[String] {
        &self.periods
    }

    /// Cell for period `t`, initial grade `i` and threshold `j` (1-based).
    pub fn cell(&self, t: usize, i: usize, j: usize) -> ProbitCell {
        self.cells[t][i][j - 1]
    }

    pub fn options(&self) -> ProbitOptions {
        self.options
    }

    /// Masks an individual cell, e.g. to drop an outlier.
    pub fn mask(&mut self, t: usize, i: usize, j: usize) {
        self.cells[t][i][j - 1].status = CellStatus::Clipped;
    }

    pub fn masked_count(&self, grade: usize) -> usize {
        self.cells
            .iter()
            .map(|row| row[grade].iter().filter(|c| c.status.is_masked()).count())
            .sum()
    }
}

pub fn probit_transform(panel: &TransitionPanel, options: ProbitOptions) -> ProbitPanel {
    let k = panel.scale().grade_count();
    let cells = panel
        .observations()
        .iter()
        .map(|obs| {
            let p = obs.empirical();
            (0..k - 1)
                .map(|i| {
                    if !obs.is_observed(i) {
                        return vec![
                            ProbitCell {
                                value: f64::NAN,
                                status: CellStatus::Unobserved
                            };
                            k - 1
                        ];
                    }
                    let n = obs.cohort()[i];
                    (1..k)
                        .map(|j| {
                            let mut tail: f64 = (j..k).map(|c| p[(i, c)]).sum();
                            let head: f64 = (0..j).map(|c| p[(i, c)]).sum();
                            let mut status = CellStatus::Observed;
                            if options.zero_cells == ZeroCellPolicy::ContinuityCorrection && n > 0.0 {
                                if tail == 0.0 {
                                    tail = 1.0 / (2.0 * n);
                                    status = CellStatus::Corrected;
                                } else if head == 0.0 {
                                    tail = 1.0 - 1.0 / (2.0 * n);
                                    status = CellStatus::Corrected;
                                }
                            }
                            if options.clip.binds(tail) {
                                status = CellStatus::Clipped;
                            }
                            let value = norm_inv_sf(options.clip.clip(tail))
                                .expect("clipped probability lies in (0, 1)");
                            ProbitCell { value, status }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    ProbitPanel {
        scale: panel.scale().clone(),
        periods: panel.periods(),
        cells,
        options,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualEntry {
    pub period: String,
    /// Threshold index `j`, 1-based.
    pub threshold: usize,
    pub value: f64,
}

/// Least-squares fit for one initial grade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeFit {
    pub grade: String,
    /// `x_j` for `j = 1..K-1`.
    pub intercepts: Vec<f64>,
    /// Slope per macro variable; enters the latent variable as `+M^T beta`.
    pub beta: Vec<f64>,
    pub intercept_se: Vec<f64>,
    pub beta_se: Vec<f64>,
    pub residual_variance: f64,
    pub degrees_of_freedom: usize,
    pub used_cells: usize,
    pub masked_cells: usize,
    pub residuals: Vec<ResidualEntry>,
}

impl GradeFit {
    pub fn intercepts_monotone(&self) -> bool {
        self.intercepts.windows(2).all(|w| w[0] < w[1])
    }
}

/// Fitted macroeconomic-risk model; grades with no data are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroRiskFit {
    pub scale: RatingScale,
    pub variable_names: Vec<String>,
    pub options: ProbitOptions,
    pub grades: Vec<Option<GradeFit>>,
    pub warnings: Vec<String>,
}

impl MacroRiskFit {
    /// A fit with given parameters and no estimation metadata, used to build
    /// exact matrices and in tests.
    pub fn from_parameters(
        scale: RatingScale,
        variable_names: Vec<String>,
        params: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    ) -> Self {
        let grades = params
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                p.map(|(intercepts, beta)| GradeFit {
                    grade: scale.labels()[i].clone(),
                    intercept_se: vec![0.0; intercepts.len()],
                    beta_se: vec![0.0; beta.len()],
                    intercepts,
                    beta,
                    residual_variance: 0.0,
                    degrees_of_freedom: 0,
                    used_cells: 0,
                    masked_cells: 0,
                    residuals: Vec::new(),
                })
            })
            .collect();
        Self {
            scale,
            variable_names,
            options: ProbitOptions::default(),
            grades,
            warnings: Vec::new(),
        }
    }
}

/// Fits every initial grade by ordinary least squares on unmasked cells.
///
/// Grades never observed in the panel are left unfitted with a warning.
pub fn fit_regression(
    probit: &ProbitPanel,
    macro_series: &MacroSeries,
) -> Result<MacroRiskFit, MacroRiskError> {
    if probit.periods != macro_series.periods() {
        return Err(MacroRiskError::Misaligned(format!(
            "{} panel periods vs {} macro rows",
            probit.periods.len(),
            macro_series.periods().len()
        )));
    }
    let live = probit.scale.live_count();
    let results: Vec<Result<Option<GradeFit>, MacroRiskError>> = (0..live)
        .into_par_iter()
        .map(|i| fit_grade(probit, macro_series, i))
        .collect();
    let mut grades = Vec::with_capacity(live);
    let mut warnings = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let g = r?;
        let label = &probit.scale.labels()[i];
        match &g {
            None => warnings.push(format!("grade {label}: never observed, not fitted")),
            Some(fit) => {
                if !fit.intercepts_monotone() {
                    warnings.push(format!(
                        "grade {label}: fitted intercepts are not strictly increasing"
                    ));
                }
                if fit.degrees_of_freedom == 0 {
                    warnings.push(format!(
                        "grade {label}: no residual degrees of freedom; standard errors undefined"
                    ));
                }
            }
        }
        grades.push(g);
    }
    Ok(MacroRiskFit {
        scale: probit.scale.clone(),
        variable_names: macro_series.names().to_vec(),
        options: probit.options,
        grades,
        warnings,
    })
}

fn fit_grade(
    probit: &ProbitPanel,
    macro_series: &MacroSeries,
    grade: usize,
) -> Result<Option<GradeFit>, MacroRiskError> {
    let label = probit.scale.labels()[grade].clone();
    let thresholds = probit.scale.live_count();
    let n_vars = macro_series.names().len();
    let observed = probit
        .cells
        .iter()
        .any(|row| row[grade].iter().any(|c| c.status != CellStatus::Unobserved));
    if !observed {
        return Ok(None);
    }
    let mut rows: Vec<(usize, usize, f64)> = Vec::new();
    for (t, row) in probit.cells.iter().enumerate() {
        for (jj, cell) in row[grade].iter().enumerate() {
            if !cell.status.is_masked() {
                rows.push((t, jj, cell.value));
            }
        }
    }
    if rows.is_empty() {
        return Err(MacroRiskError::AllMasked { grade: label });
    }
    let p = thresholds + n_vars;
    let m = rows.len();
    let mut column_names: Vec<String> = probit.scale.labels()[..thresholds]
        .iter()
        .map(|l| format!("threshold[{l}]"))
        .collect();
    column_names.extend(macro_series.names().iter().cloned());
    let empty: Vec<String> = (0..thresholds)
        .filter(|&jj| !rows.iter().any(|r| r.1 == jj))
        .map(|jj| column_names[jj].clone())
        .collect();
    if !empty.is_empty() {
        return Err(MacroRiskError::EmptyThresholds {
            grade: label,
            columns: empty,
        });
    }

    let mut x = DMatrix::zeros(m, p);
    let mut y = DVector::zeros(m);
    for (r, &(t, jj, u)) in rows.iter().enumerate() {
        x[(r, jj)] = 1.0;
        for v in 0..n_vars {
            x[(r, thresholds + v)] = macro_series.values()[(t, v)];
        }
        y[r] = u;
    }
    if m < p {
        return Err(MacroRiskError::RankDeficient {
            grade: label,
            columns: column_names,
        });
    }

    let svd = x.clone().svd(true, true);
    let sv = &svd.singular_values;
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let u = svd.u.as_ref().expect("requested U");
    let max_sv = sv.max();
    let (min_idx, min_sv) = sv.argmin();
    let floor = RANK_TOLERANCE * max_sv;
    if min_sv.is_nan() || floor.is_nan() || min_sv <= floor {
        let null = v_t.row(min_idx);
        let peak = null.amax();
        let columns = column_names
            .iter()
            .enumerate()
            .filter(|(c, _)| null[*c].abs() >= 0.1 * peak)
            .map(|(_, n)| n.clone())
            .collect();
        return Err(MacroRiskError::RankDeficient {
            grade: label,
            columns,
        });
    }
    // theta = V diag(1/s) U^T y
    let uty = u.transpose() * &y;
    let scaled = DVector::from_fn(p, |k, _| uty[k] / sv[k]);
    let theta = v_t.transpose() * scaled;
    let fitted = &x * &theta;
    let resid = &y - fitted;
    let rss = resid.norm_squared();
    let dof = m - p;
    let sigma2 = if dof > 0 { rss / dof as f64 } else { 0.0 };
    // Var(theta) = sigma^2 V diag(1/s^2) V^T
    let se: Vec<f64> = (0..p)
        .map(|c| {
            let var: f64 = (0..p).map(|k| (v_t[(k, c)] / sv[k]).powi(2)).sum();
            (sigma2 * var).sqrt()
        })
        .collect();

    let residuals = rows
        .iter()
        .zip(resid.iter())
        .map(|(&(t, jj, _), &e)| ResidualEntry {
            period: probit.periods[t].clone(),
            threshold: jj + 1,
            value: e,
        })
        .collect();
    Ok(Some(GradeFit {
        grade: label,
        intercepts: theta.iter().take(thresholds).copied().collect(),
        beta: theta.iter().skip(thresholds).map(|c| -c).collect(),
        intercept_se: se[..thresholds].to_vec(),
        beta_se: se[thresholds..].to_vec(),
        residual_variance: sigma2,
        degrees_of_freedom: dof,
        used_cells: m,
        masked_cells: probit.masked_count(grade),
        residuals,
    }))
}

/// A predicted transition matrix and any repairs applied to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub matrix: DMatrix<f64>,
    pub warnings: Vec<String>,
}

/// Transition matrix implied by the fit at macro values `m` (fit variable order).
///
/// Rows come from right-tail differences of `U_j = x_j - m^T beta`. Negative
/// entries caused by non-monotone intercepts are floored at zero and the row
/// renormalized. Unfitted grades give all-zero rows.
pub fn predict_matrix(fit: &MacroRiskFit, m: &[f64]) -> Result<Prediction, MacroRiskError> {
    if m.len() != fit.variable_names.len() {
        return Err(MacroRiskError::MacroLength {
            expected: fit.variable_names.len(),
            got: m.len(),
        });
    }
    let k = fit.scale.grade_count();
    let mut matrix = DMatrix::zeros(k - 1, k);
    let mut warnings = Vec::new();
    for (i, g) in fit.grades.iter().enumerate() {
        let Some(g) = g else { continue };
        let shift: f64 = g.beta.iter().zip(m).map(|(b, v)| b * v).sum();
        let mut prev = f64::NEG_INFINITY;
        let mut repaired = false;
        for j in 0..k {
            let arg = if j + 1 < k {
                g.intercepts[j] - shift
            } else {
                f64::INFINITY
            };
            let mut p = if prev > 0.0 {
                norm_sf(prev) - norm_sf(arg)
            } else {
                norm_cdf(arg) - norm_cdf(prev)
            };
            if p < 0.0 {
                p = 0.0;
                repaired = true;
            }
            matrix[(i, j)] = p;
            prev = arg;
        }
        if repaired {
            let s = matrix.row(i).sum();
            matrix.row_mut(i).unscale_mut(s);
            warnings.push(format!(
                "grade {}: non-monotone intercepts; negative probabilities floored and row renormalized",
                g.grade
            ));
        }
    }
    Ok(Prediction { matrix, warnings })
}

/// Exogenous macro paths to evaluate; same layout as a macro series.
pub type MacroScenario = MacroSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPd {
    pub period: String,
    pub pd: PdVector,
    pub warnings: Vec<String>,
}

/// Default probabilities per scenario period. Scenario columns are matched
/// to fit variables by name.
pub fn forecast_pd(
    fit: &MacroRiskFit,
    scenario: &MacroScenario,
) -> Result<Vec<ScenarioPd>, MacroRiskError> {
    let index: Vec<usize> = fit
        .variable_names
        .iter()
        .map(|name| {
            scenario
                .names()
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| MacroRiskError::MissingVariable(name.clone()))
        })
        .collect::<Result<_, _>>()?;
    scenario
        .periods()
        .iter()
        .enumerate()
        .map(|(t, period)| {
            let m: Vec<f64> = index.iter().map(|&c| scenario.values()[(t, c)]).collect();
            let pred = predict_matrix(fit, &m)?;
            let last = pred.matrix.ncols() - 1;
            Ok(ScenarioPd {
                period: period.clone(),
                pd: PdVector(pred.matrix.column(last).iter().copied().collect()),
                warnings: pred.warnings,
            })
        })
        .collect()
}

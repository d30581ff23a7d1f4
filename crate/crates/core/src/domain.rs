//! Rating scales, cohort observations, transition panels and macro series.

use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::ClipPolicy;

/// Row sums further than this from one are reported as rounding defects.
pub const ROUNDING_TOLERANCE: f64 = 5e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("a rating scale needs at least two grades, got {0}")]
    ScaleTooSmall(usize),
    #[error("duplicate grade label {0:?}")]
    DuplicateLabel(String),
    #[error("expected a {expected_rows}x{expected_cols} matrix, got {rows}x{cols}")]
    Dimension {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("period {0:?} appears more than once")]
    DuplicatePeriod(String),
    #[error("panel has no observations")]
    EmptyPanel,
    #[error("invalid value {value} at row {row}, column {col}")]
    InvalidValue { row: usize, col: usize, value: f64 },
    #[error("unknown rating label {0:?}")]
    UnknownLabel(String),
    #[error("macro series: {0}")]
    Macro(String),
    #[error("cannot tell units: row sums {0:?} are near neither 1 nor 100 and values are not integral")]
    AmbiguousUnits(Vec<f64>),
}

/// Ordered grades; the last one is the absorbing default grade.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingScale {
    labels: Vec<String>,
}

impl RatingScale {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self, DomainError> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(DomainError::ScaleTooSmall(labels.len()));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(DomainError::DuplicateLabel(l.clone()));
            }
        }
        Ok(Self { labels })
    }

    /// Grades labelled `1..=k`.
    pub fn numbered(k: usize) -> Result<Self, DomainError> {
        Self::new((1..=k).map(|g| g.to_string()))
    }

    /// Number of grades `K`, default included.
    pub fn grade_count(&self) -> usize {
        self.labels.len()
    }

    /// Number of non-default (modelled) initial grades, `K - 1`.
    pub fn live_count(&self) -> usize {
        self.labels.len() - 1
    }

    pub fn default_index(&self) -> usize {
        self.labels.len() - 1
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// One period of cohort data: counts (when known), cohort sizes and the
/// empirical `(K-1) x K` transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionObservation {
    period: String,
    counts: Option<DMatrix<u64>>,
    cohort: Vec<f64>,
    empirical: DMatrix<f64>,
}

/// Cohort estimator: divides each count row by its total.
///
/// Rows with a zero total stay all-zero and are reported as unobserved.
pub fn estimate_cohort(
    period: impl Into<String>,
    scale: &RatingScale,
    counts: DMatrix<u64>,
) -> Result<TransitionObservation, DomainError> {
    check_dims(scale, counts.nrows(), counts.ncols())?;
    let mut empirical = DMatrix::zeros(counts.nrows(), counts.ncols());
    let mut cohort = Vec::with_capacity(counts.nrows());
    for i in 0..counts.nrows() {
        let total: u64 = counts.row(i).iter().sum();
        cohort.push(total as f64);
        if total > 0 {
            for j in 0..counts.ncols() {
                empirical[(i, j)] = counts[(i, j)] as f64 / total as f64;
            }
        }
    }
    Ok(TransitionObservation {
        period: period.into(),
        counts: Some(counts),
        cohort,
        empirical,
    })
}

fn check_dims(scale: &RatingScale, rows: usize, cols: usize) -> Result<(), DomainError> {
    if rows != scale.live_count() || cols != scale.grade_count() {
        return Err(DomainError::Dimension {
            expected_rows: scale.live_count(),
            expected_cols: scale.grade_count(),
            rows,
            cols,
        });
    }
    Ok(())
}

impl TransitionObservation {
    /// Builds an observation from transition rates (fractions) and cohort
    /// sizes. An all-zero row is unobserved and its cohort size is forced to 0.
    pub fn from_rates(
        period: impl Into<String>,
        scale: &RatingScale,
        rates: DMatrix<f64>,
        cohort: Vec<f64>,
    ) -> Result<Self, DomainError> {
        check_dims(scale, rates.nrows(), rates.ncols())?;
        if cohort.len() != rates.nrows() {
            return Err(DomainError::Dimension {
                expected_rows: rates.nrows(),
                expected_cols: 1,
                rows: cohort.len(),
                cols: 1,
            });
        }
        for i in 0..rates.nrows() {
            for j in 0..rates.ncols() {
                let value = rates[(i, j)];
                if !(0.0..=1.0).contains(&value) {
                    return Err(DomainError::InvalidValue { row: i, col: j, value });
                }
            }
        }
        let mut cohort = cohort;
        for (i, n) in cohort.iter_mut().enumerate() {
            if !n.is_finite() || *n < 0.0 {
                return Err(DomainError::InvalidValue {
                    row: i,
                    col: 0,
                    value: *n,
                });
            }
            if rates.row(i).iter().all(|&v| v == 0.0) {
                *n = 0.0;
            }
        }
        Ok(Self {
            period: period.into(),
            counts: None,
            cohort,
            empirical: rates,
        })
    }

    pub fn period(&self) -> &str {
        &self.period
    }

    pub fn counts(&self) -> Option<&DMatrix<u64>> {
        self.counts.as_ref()
    }

    /// Cohort size `n_{t,i}` per initial grade.
    pub fn cohort(&self) -> &[f64] {
        &self.cohort
    }

    pub fn empirical(&self) -> &DMatrix<f64> {
        &self.empirical
    }

    pub fn is_observed(&self, grade: usize) -> bool {
        self.cohort[grade] > 0.0 && self.empirical.row(grade).iter().any(|&v| v > 0.0)
    }

    /// Same matrix with every cohort size multiplied by `factor`.
    pub fn with_scaled_cohort(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.cohort.iter_mut().for_each(|n| *n *= factor);
        out
    }
}

/// Time-ordered observations on a common scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionPanel {
    scale: RatingScale,
    observations: Vec<TransitionObservation>,
}

impl TransitionPanel {
    /// Observations must be given in time order; period labels are opaque
    /// and only need to be unique.
    pub fn new(
        scale: RatingScale,
        observations: Vec<TransitionObservation>,
    ) -> Result<Self, DomainError> {
        let mut seen = HashSet::new();
        for obs in &observations {
            check_dims(&scale, obs.empirical.nrows(), obs.empirical.ncols())?;
            if !seen.insert(obs.period.clone()) {
                return Err(DomainError::DuplicatePeriod(obs.period.clone()));
            }
        }
        Ok(Self {
            scale,
            observations,
        })
    }

    pub fn scale(&self) -> &RatingScale {
        &self.scale
    }

    pub fn observations(&self) -> &[TransitionObservation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn periods(&self) -> Vec<String> {
        self.observations.iter().map(|o| o.period.clone()).collect()
    }

    /// Grades observed in at least one period.
    pub fn observed_grades(&self) -> Vec<bool> {
        (0..self.scale.live_count())
            .map(|i| self.observations.iter().any(|o| o.is_observed(i)))
            .collect()
    }
}

/// Historical average transition matrix.
///
/// Each row is averaged over the periods in which that grade was observed;
/// a grade never observed keeps an all-zero row.
pub fn average_matrix(panel: &TransitionPanel) -> Result<DMatrix<f64>, DomainError> {
    if panel.is_empty() {
        return Err(DomainError::EmptyPanel);
    }
    let rows = panel.scale.live_count();
    let cols = panel.scale.grade_count();
    let mut sum = DMatrix::zeros(rows, cols);
    let mut seen = vec![0usize; rows];
    for obs in &panel.observations {
        for i in 0..rows {
            if obs.is_observed(i) {
                seen[i] += 1;
                for j in 0..cols {
                    sum[(i, j)] += obs.empirical[(i, j)];
                }
            }
        }
    }
    for (i, &n) in seen.iter().enumerate() {
        if n > 0 {
            sum.row_mut(i).unscale_mut(n as f64);
        }
    }
    Ok(sum)
}

/// Agency rating label to modelled bin (1-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RebinMap {
    entries: Vec<(String, usize)>,
}

impl RebinMap {
    pub fn new(entries: Vec<(String, usize)>) -> Self {
        Self { entries }
    }

    /// The 22-notch agency scale collapsed onto nine bins.
    pub fn agency_nine_bins() -> Self {
        const TABLE: [(&str, usize); 22] = [
            ("AAA", 1),
            ("AA+", 1),
            ("AA", 1),
            ("AA-", 1),
            ("A+", 1),
            ("A", 1),
            ("A-", 1),
            ("BBB+", 2),
            ("BBB", 2),
            ("BBB-", 2),
            ("BB+", 3),
            ("BB", 3),
            ("BB-", 4),
            ("B+", 5),
            ("B", 6),
            ("B-", 6),
            ("CCC+", 7),
            ("CCC", 7),
            ("CCC-", 7),
            ("CC", 8),
            ("C", 8),
            ("D", 9),
        ];
        Self::new(TABLE.iter().map(|(l, b)| (l.to_string(), *b)).collect())
    }

    pub fn entries(&self) -> &[(String, usize)] {
        &self.entries
    }

    pub fn bin_count(&self) -> usize {
        self.entries.iter().map(|e| e.1).max().unwrap_or(0)
    }
}

pub fn rebin_label(agency_label: &str, map: &RebinMap) -> Result<usize, DomainError> {
    map.entries
        .iter()
        .find(|(l, _)| l == agency_label)
        .map(|(_, b)| *b)
        .ok_or_else(|| DomainError::UnknownLabel(agency_label.to_string()))
}

/// Macro variables per period, `T x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroSeries {
    periods: Vec<String>,
    names: Vec<String>,
    values: DMatrix<f64>,
}

impl MacroSeries {
    pub fn new(
        periods: Vec<String>,
        names: Vec<String>,
        values: DMatrix<f64>,
    ) -> Result<Self, DomainError> {
        if values.nrows() != periods.len() || values.ncols() != names.len() {
            return Err(DomainError::Dimension {
                expected_rows: periods.len(),
                expected_cols: names.len(),
                rows: values.nrows(),
                cols: values.ncols(),
            });
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(DomainError::Macro(format!("duplicate variable {n:?}")));
            }
        }
        let mut seen = HashSet::new();
        for p in &periods {
            if !seen.insert(p.as_str()) {
                return Err(DomainError::DuplicatePeriod(p.clone()));
            }
        }
        for r in 0..values.nrows() {
            for c in 0..values.ncols() {
                let value = values[(r, c)];
                if !value.is_finite() {
                    return Err(DomainError::InvalidValue { row: r, col: c, value });
                }
            }
        }
        Ok(Self {
            periods,
            names,
            values,
        })
    }

    pub fn periods(&self) -> &[String] {
        &self.periods
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn row(&self, t: usize) -> Vec<f64> {
        self.values.row(t).iter().copied().collect()
    }

    /// Errors unless the series covers exactly the panel's periods, in order.
    pub fn check_aligned(&self, panel: &TransitionPanel) -> Result<(), DomainError> {
        let panel_periods = panel.periods();
        if panel_periods != self.periods {
            return Err(DomainError::Macro(format!(
                "periods do not match the panel ({} macro rows vs {} panel periods)",
                self.periods.len(),
                panel_periods.len()
            )));
        }
        Ok(())
    }
}

/// Units of a rate table as read from a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Counts,
    Fraction,
    Percent,
}

/// Guesses the units of a `(K-1) x K` table from its non-zero row sums.
pub fn detect_units(table: &DMatrix<f64>) -> Result<Units, DomainError> {
    let sums: Vec<f64> = table
        .row_iter()
        .map(|r| r.sum())
        .filter(|s| *s > 0.0)
        .collect();
    if sums.is_empty() {
        return Ok(Units::Fraction);
    }
    if sums.iter().all(|s| (s - 1.0).abs() <= 0.01) {
        return Ok(Units::Fraction);
    }
    if sums.iter().all(|s| (s - 100.0).abs() <= 0.5) {
        return Ok(Units::Percent);
    }
    if table.iter().all(|v| v.fract() == 0.0 && *v >= 0.0) {
        return Ok(Units::Counts);
    }
    Err(DomainError::AmbiguousUnits(sums))
}

/// Turns a raw table into an observation. For rate units every observed row
/// gets the supplied cohort size.
pub fn observation_from_table(
    period: impl Into<String>,
    scale: &RatingScale,
    table: DMatrix<f64>,
    units: Units,
    cohort_size: f64,
) -> Result<TransitionObservation, DomainError> {
    for (idx, v) in table.iter().enumerate() {
        if !v.is_finite() || *v < 0.0 {
            return Err(DomainError::InvalidValue {
                row: idx % table.nrows(),
                col: idx / table.nrows(),
                value: *v,
            });
        }
    }
    match units {
        Units::Counts => {
            if let Some((idx, v)) = table.iter().enumerate().find(|(_, v)| v.fract() != 0.0) {
                return Err(DomainError::InvalidValue {
                    row: idx % table.nrows(),
                    col: idx / table.nrows(),
                    value: *v,
                });
            }
            estimate_cohort(period, scale, table.map(|v| v as u64))
        }
        Units::Fraction | Units::Percent => {
            let rates = if units == Units::Percent {
                table / 100.0
            } else {
                table
            };
            let cohort = vec![cohort_size; rates.nrows()];
            TransitionObservation::from_rates(period, scale, rates, cohort)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRef {
    pub period: String,
    pub grade: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRef {
    pub period: String,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSumDefect {
    pub period: String,
    pub grade: String,
    pub row_sum: f64,
}

/// Findings of [`validate_panel`]; report-only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub unobserved_rows: Vec<GradeRef>,
    pub zero_cells: Vec<CellRef>,
    pub rounding_defects: Vec<RowSumDefect>,
    /// Rows whose interior cumulative or tail sums would be clipped before
    /// an inverse-normal call.
    pub quantile_hazards: Vec<GradeRef>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.unobserved_rows.is_empty()
            && self.zero_cells.is_empty()
            && self.rounding_defects.is_empty()
            && self.quantile_hazards.is_empty()
    }
}

pub fn validate_panel(panel: &TransitionPanel, policy: &ClipPolicy) -> ValidationReport {
    let labels = panel.scale.labels();
    let k = panel.scale.grade_count();
    let mut report = ValidationReport::default();
    for obs in &panel.observations {
        let period = obs.period.clone();
        for i in 0..panel.scale.live_count() {
            let row = obs.empirical.row(i);
            for j in 0..k {
                if row[j] == 0.0 {
                    report.zero_cells.push(CellRef {
                        period: period.clone(),
                        from: labels[i].clone(),
                        to: labels[j].clone(),
                    });
                }
            }
            let grade = GradeRef {
                period: period.clone(),
                grade: labels[i].clone(),
            };
            if !obs.is_observed(i) {
                report.unobserved_rows.push(grade);
                continue;
            }
            let row_sum: f64 = row.iter().sum();
            if (row_sum - 1.0).abs() > ROUNDING_TOLERANCE {
                report.rounding_defects.push(RowSumDefect {
                    period: period.clone(),
                    grade: labels[i].clone(),
                    row_sum,
                });
            }
            let mut head = 0.0;
            let hazard = (0..k - 1).any(|j| {
                head += row[j];
                let tail: f64 = row.iter().skip(j + 1).sum();
                policy.binds(head) || policy.binds(tail)
            });
            if hazard {
                report.quantile_hazards.push(grade);
            }
        }
    }
    report
}

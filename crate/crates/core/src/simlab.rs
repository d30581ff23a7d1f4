//! Simulation study comparing one-factor and macroeconomic-risk PD estimates.
//!
//! A historical panel fixes the truth: thresholds from its average matrix,
//! a correlation, and the factor path extracted period by period. Replicates
//! perturb that path, `z~_t = z_t + a * eta_t`, and rebuild observed matrices
//! from the one-factor model. Each replicate is estimated both ways and the
//! squared PD errors against the truth are averaged per period and grade.
//!
//! Randomness is keyed by `(seed, replicate, period)` so replicates can run
//! in any order or in parallel and still produce identical numbers.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    average_matrix, estimate_cohort, DomainError, MacroSeries, RatingScale, TransitionObservation,
    TransitionPanel,
};
use crate::macrorisk::{
    fit_regression, predict_matrix, probit_transform, MacroRiskError, ProbitOptions, ZeroCellPolicy,
};
use crate::numerics::{ClipPolicy, NumericsError};
use crate::onefactor::{
    basel_correlation, calibrate_rho_variance, calibrate_thresholds, conditional_matrix,
    extract_series, pd_from_matrix, Correlation, OneFactorError, PdVector, ThresholdSet,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    OneFactor(#[from] OneFactorError),
    #[error(transparent)]
    MacroRisk(#[from] MacroRiskError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("every replicate failed; first error: {0}")]
    AllReplicatesFailed(String),
}

/// Where the truth-time correlation comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RhoSource {
    /// Asset-correlation formula per grade. Without `pd` the historical
    /// average default column is used.
    Basel {
        #[serde(default)]
        pd: Option<Vec<f64>>,
    },
    /// Correlation at which the extracted factor has unit variance.
    VarianceSearch,
    Fixed { rho: f64 },
}

impl Default for RhoSource {
    fn default() -> Self {
        RhoSource::Basel { pd: None }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountSampling {
    /// Replicate matrices are the exact model probabilities.
    #[default]
    Deterministic,
    /// Each row is resampled as a multinomial with the historical cohort size.
    Multinomial,
}

/// Macro variables synthesized as `loading * z_t + noise_std * xi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacroReadout {
    pub names: Vec<String>,
    pub loadings: Vec<f64>,
    pub noise_std: f64,
}

impl Default for MacroReadout {
    fn default() -> Self {
        Self {
            names: vec!["vix".into(), "gdp_growth".into(), "baa_spread".into()],
            loadings: vec![1.0, -0.8, 0.9],
            noise_std: 0.2,
        }
    }
}

/// Shape of the built-in synthetic history used when no panel file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistoryConfig {
    pub periods: usize,
    pub start_year: u32,
    pub seed: u64,
}

impl Default for HistoryConfig {
    fn default() -> Self {
        Self {
            periods: 40,
            start_year: 1990,
            seed: 19900101,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Perturbation scale `a` of the systematic factor.
    pub noise_scale: f64,
    pub replicates: usize,
    pub seed: u64,
    pub rho_source: RhoSource,
    pub count_sampling: CountSampling,
    pub clip_epsilon: f64,
    pub zero_cells: ZeroCellPolicy,
    pub macro_readout: MacroReadout,
    pub history: HistoryConfig,
    /// Replicate whose PD paths are kept as the trace.
    pub trace_replicate: usize,
    pub parallel: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            noise_scale: 0.5,
            replicates: 1000,
            seed: 20_240_901,
            rho_source: RhoSource::default(),
            count_sampling: CountSampling::default(),
            clip_epsilon: 1e-6,
            zero_cells: ZeroCellPolicy::default(),
            macro_readout: MacroReadout::default(),
            history: HistoryConfig::default(),
            trace_replicate: 0,
            parallel: true,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(SimError::Config(format!("noise_scale must be >= 0, got {}", self.noise_scale)));
        }
        if self.replicates == 0 {
            return Err(SimError::Config("replicates must be at least 1".into()));
        }
        ClipPolicy::new(self.clip_epsilon)?;
        let r = &self.macro_readout;
        if r.names.len() != r.loadings.len() || r.names.is_empty() {
            return Err(SimError::Config(
                "macro_readout needs one loading per name and at least one variable".into(),
            ));
        }
        if r.noise_std.is_nan() || r.noise_std < 0.0 {
            return Err(SimError::Config("macro_readout.noise_std must be >= 0".into()));
        }
        Ok(())
    }

    pub fn clip(&self) -> ClipPolicy {
        ClipPolicy {
            epsilon: self.clip_epsilon,
        }
    }

    pub fn probit_options(&self) -> ProbitOptions {
        ProbitOptions {
            clip: self.clip(),
            zero_cells: self.zero_cells,
        }
    }
}

/// Stream ids reserved for non-replicate draws.
const HISTORY_STREAM: u64 = u64::MAX - 1;
const MACRO_STREAM: u64 = u64::MAX;

/// Counter-based generator for `(seed, stream, period)`; every period gets
/// its own 2^32-word block of the ChaCha keystream.
pub fn keyed_rng(seed: u64, stream: u64, period: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((period as u128) << 32);
    rng
}

/// The true state the replicates are generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthSet {
    pub scale: RatingScale,
    pub periods: Vec<String>,
    pub thresholds: ThresholdSet,
    pub rho: Correlation,
    pub z: Vec<f64>,
    pub matrices: Vec<DMatrix<f64>>,
    pub pd: Vec<PdVector>,
    /// Cohort size per period and grade used for replicate rows.
    pub cohort: Vec<Vec<f64>>,
    /// Grades present in the history; others are excluded from scoring.
    pub active: Vec<bool>,
    pub warnings: Vec<String>,
}

/// Builds the truth from a historical panel: thresholds from its average,
/// the configured correlation, and the per-period extracted factor.
pub fn make_truth(panel: &TransitionPanel, cfg: &SimulationConfig) -> Result<TruthSet, SimError> {
    let avg = average_matrix(panel)?;
    let thresholds = calibrate_thresholds(&avg, &cfg.clip())?;
    make_truth_with_thresholds(panel, thresholds, cfg)
}

/// As [`make_truth`], with thresholds supplied instead of calibrated.
pub fn make_truth_with_thresholds(
    panel: &TransitionPanel,
    thresholds: ThresholdSet,
    cfg: &SimulationConfig,
) -> Result<TruthSet, SimError> {
    cfg.validate()?;
    let clip = cfg.clip();
    let avg = average_matrix(panel)?;
    let live = panel.scale().live_count();
    if thresholds.grade_count() != live {
        return Err(OneFactorError::GradeMismatch {
            expected: live,
            got: thresholds.grade_count(),
        }
        .into());
    }
    let mut warnings = Vec::new();
    let rho = match &cfg.rho_source {
        RhoSource::Basel { pd: Some(pd) } => {
            if pd.len() != live {
                return Err(SimError::Config(format!(
                    "rho_source.pd has {} entries, the scale has {live} live grades",
                    pd.len()
                )));
            }
            if pd.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(SimError::Config("rho_source.pd entries must lie in [0, 1]".into()));
            }
            basel_correlation(&PdVector(pd.clone()))
        }
        RhoSource::Basel { pd: None } => basel_correlation(&pd_from_matrix(&avg)),
        RhoSource::VarianceSearch => {
            let cal = calibrate_rho_variance(panel, &clip)?;
            warnings.extend(cal.fit.warnings);
            Correlation::Uniform(cal.rho)
        }
        RhoSource::Fixed { rho } => Correlation::Uniform(*rho),
    };
    rho.validate(live)?;
    let z: Vec<f64> = extract_series(panel, &thresholds, &rho, &clip)?
        .into_iter()
        .map(|e| e.z)
        .collect();
    let matrices = z
        .iter()
        .map(|&zt| conditional_matrix(&thresholds, &rho, zt))
        .collect::<Result<Vec<_>, _>>()?;
    let pd = matrices.iter().map(pd_from_matrix).collect();
    let active = panel.observed_grades();
    for (i, a) in active.iter().enumerate() {
        if !a {
            warnings.push(format!(
                "grade {} never observed; excluded from truth and scoring",
                panel.scale().labels()[i]
            ));
        }
    }
    let mean_cohort: Vec<f64> = (0..live)
        .map(|i| {
            let seen: Vec<f64> = panel
                .observations()
                .iter()
                .filter(|o| o.is_observed(i))
                .map(|o| o.cohort()[i])
                .collect();
            if seen.is_empty() {
                0.0
            } else {
                seen.iter().sum::<f64>() / seen.len() as f64
            }
        })
        .collect();
    let cohort = panel
        .observations()
        .iter()
        .map(|o| {
            (0..live)
                .map(|i| if o.is_observed(i) { o.cohort()[i] } else { mean_cohort[i] })
                .collect()
        })
        .collect();
    Ok(TruthSet {
        scale: panel.scale().clone(),
        periods: panel.periods(),
        thresholds,
        rho,
        z,
        matrices,
        pd,
        cohort,
        active,
        warnings,
    })
}

fn sample_multinomial<R: Rng>(n: u64, probs: &[f64], rng: &mut R) -> Vec<u64> {
    let mut out = vec![0; probs.len()];
    let mut left = n;
    let mut mass = 1.0;
    for (j, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if j + 1 == probs.len() {
            out[j] = left;
            break;
        }
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let draw = Binomial::new(left, q).map(|b| b.sample(rng)).unwrap_or(0);
        out[j] = draw;
        left -= draw;
        mass -= p;
    }
    out
}

/// The perturbed factor path of replicate `index`.
pub fn perturbed_factors(truth: &TruthSet, cfg: &SimulationConfig, index: usize) -> Vec<f64> {
    truth
        .z
        .iter()
        .enumerate()
        .map(|(t, &z)| {
            let mut rng = keyed_rng(cfg.seed, index as u64, t);
            let eta: f64 = rng.sample(StandardNormal);
            z + cfg.noise_scale * eta
        })
        .collect()
}

/// One synthetic observation panel obtained by perturbing the true factor path.
pub fn generate_replicate(
    truth: &TruthSet,
    cfg: &SimulationConfig,
    index: usize,
) -> Result<TransitionPanel, SimError> {
    let live = truth.scale.live_count();
    let mut obs = Vec::with_capacity(truth.z.len());
    for (t, &z) in truth.z.iter().enumerate() {
        let mut rng = keyed_rng(cfg.seed, index as u64, t);
        let eta: f64 = rng.sample(StandardNormal);
        let zt = z + cfg.noise_scale * eta;
        let mut m = conditional_matrix(&truth.thresholds, &truth.rho, zt)?;
        for i in 0..live {
            if !truth.active[i] {
                m.row_mut(i).fill(0.0);
            }
        }
        let period = truth.periods[t].clone();
        let o = match cfg.count_sampling {
            CountSampling::Deterministic => {
                TransitionObservation::from_rates(period, &truth.scale, m, truth.cohort[t].clone())?
            }
            CountSampling::Multinomial => {
                let k = m.ncols();
                let mut counts = DMatrix::<u64>::zeros(live, k);
                for i in 0..live {
                    if !truth.active[i] {
                        continue;
                    }
                    let probs: Vec<f64> = m.row(i).iter().copied().collect();
                    let n = truth.cohort[t][i].round() as u64;
                    for (j, c) in sample_multinomial(n, &probs, &mut rng).into_iter().enumerate() {
                        counts[(i, j)] = c;
                    }
                }
                estimate_cohort(period, &truth.scale, counts)?
            }
        };
        obs.push(o);
    }
    Ok(TransitionPanel::new(truth.scale.clone(), obs)?)
}

/// PD paths from both estimators, indexed `[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEstimate {
    pub one_factor: Vec<PdVector>,
    pub macro_risk: Vec<PdVector>,
    pub one_factor_z: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Estimates PD on a replicate with both models.
///
/// One-factor: extract the factor per period with the given thresholds and
/// correlation, rebuild the conditional matrix, read the default column.
/// Macro-risk: probit transform, per-grade least squares against `macro_series`,
/// predict at each period's macro values.
pub fn estimate_both(
    replicate: &TransitionPanel,
    thresholds: &ThresholdSet,
    rho: &Correlation,
    macro_series: &MacroSeries,
    options: ProbitOptions,
) -> Result<DualEstimate, SimError> {
    let est = extract_series(replicate, thresholds, rho, &options.clip)?;
    let one_factor = est
        .iter()
        .map(|e| conditional_matrix(thresholds, rho, e.z).map(|m| pd_from_matrix(&m)))
        .collect::<Result<Vec<_>, _>>()?;
    let probit = probit_transform(replicate, options);
    let fit = fit_regression(&probit, macro_series)?;
    let mut warnings = fit.warnings.clone();
    let mut macro_risk = Vec::with_capacity(replicate.len());
    for t in 0..replicate.len() {
        let pred = predict_matrix(&fit, &macro_series.row(t))?;
        warnings.extend(pred.warnings);
        macro_risk.push(pd_from_matrix(&pred.matrix));
    }
    Ok(DualEstimate {
        one_factor,
        macro_risk,
        one_factor_z: est.iter().map(|e| e.z).collect(),
        warnings,
    })
}

/// Macro variables as noisy linear readouts of the true factor path.
pub fn synthesize_macro(truth: &TruthSet, cfg: &SimulationConfig) -> Result<MacroSeries, SimError> {
    read_out_factors(&truth.periods, &truth.z, &cfg.macro_readout, cfg.seed)
}

/// `loading * z_t + noise_std * xi` per variable, with `xi` drawn from the
/// macro stream of `seed`.
pub fn read_out_factors(
    periods: &[String],
    z: &[f64],
    readout: &MacroReadout,
    seed: u64,
) -> Result<MacroSeries, SimError> {
    if readout.names.len() != readout.loadings.len() {
        return Err(SimError::Config(format!(
            "macro_readout has {} names and {} loadings",
            readout.names.len(),
            readout.loadings.len()
        )));
    }
    let mut values = DMatrix::zeros(z.len(), readout.names.len());
    for (t, &zt) in z.iter().enumerate() {
        let mut rng = keyed_rng(seed, MACRO_STREAM, t);
        for (k, &load) in readout.loadings.iter().enumerate() {
            let xi: f64 = rng.sample(StandardNormal);
            values[(t, k)] = load * zt + readout.noise_std * xi;
        }
    }
    Ok(MacroSeries::new(periods.to_vec(), readout.names.clone(), values)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdTrace {
    pub replicate: usize,
    pub truth: Vec<PdVector>,
    pub one_factor: Vec<PdVector>,
    pub macro_risk: Vec<PdVector>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub index: usize,
    /// Mean squared PD error over periods and active grades.
    pub mean_sq_err_one_factor: f64,
    pub mean_sq_err_macro_risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedReplicate {
    pub index: usize,
    pub error: String,
}

/// Per period and grade MSE of both estimators; `None` for excluded grades.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub periods: Vec<String>,
    pub grades: Vec<String>,
    pub rho: Correlation,
    pub truth_z: Vec<f64>,
    /// Indexed `[t][i]`.
    pub mse_one_factor: Vec<Vec<Option<f64>>>,
    pub mse_macro_risk: Vec<Vec<Option<f64>>>,
    pub trace: Option<PdTrace>,
    pub replicates: Vec<ReplicateSummary>,
    pub failed: Vec<FailedReplicate>,
    pub warnings: Vec<String>,
}

impl ComparisonReport {
    /// Mean over periods of the per-period MSE for each grade.
    pub fn mean_mse_by_grade(&self) -> Vec<Option<(f64, f64)>> {
        (0..self.grades.len())
            .map(|i| {
                let t = self.periods.len() as f64;
                let z: Option<f64> = self.mse_one_factor.iter().map(|r| r[i]).sum();
                let n: Option<f64> = self.mse_macro_risk.iter().map(|r| r[i]).sum();
                z.zip(n).map(|(z, n)| (z / t, n / t))
            })
            .collect()
    }
}

struct ReplicateOutcome {
    sq_one_factor: Vec<Vec<f64>>,
    sq_macro_risk: Vec<Vec<f64>>,
    dual: Option<DualEstimate>,
}

fn run_replicate(
    truth: &TruthSet,
    macro_series: &MacroSeries,
    cfg: &SimulationConfig,
    index: usize,
) -> Result<ReplicateOutcome, SimError> {
    let replicate = generate_replicate(truth, cfg, index)?;
    let dual = estimate_both(
        &replicate,
        &truth.thresholds,
        &truth.rho,
        macro_series,
        cfg.probit_options(),
    )?;
    let sq = |est: &[PdVector]| -> Vec<Vec<f64>> {
        est.iter()
            .zip(&truth.pd)
            .map(|(e, p)| e.0.iter().zip(&p.0).map(|(a, b)| (a - b).powi(2)).collect())
            .collect()
    };
    Ok(ReplicateOutcome {
        sq_one_factor: sq(&dual.one_factor),
        sq_macro_risk: sq(&dual.macro_risk),
        dual: (index == cfg.trace_replicate).then_some(dual),
    })
}

/// Runs the full study: truth, `cfg.replicates` perturbed replicates, both
/// estimators, and squared-error accumulation.
///
/// With `macro_series` absent the macro variables are synthesized from the
/// truth per `cfg.macro_readout`. Failed replicates are recorded and left out
/// of the averages.
pub fn run_comparison(
    panel: &TransitionPanel,
    macro_series: Option<&MacroSeries>,
    cfg: &SimulationConfig,
) -> Result<ComparisonReport, SimError> {
    let truth = make_truth(panel, cfg)?;
    let synthesized;
    let macro_series = match macro_series {
        Some(m) => {
            m.check_aligned(panel)?;
            m
        }
        None => {
            synthesized = synthesize_macro(&truth, cfg)?;
            &synthesized
        }
    };
    let work = |r: usize| run_replicate(&truth, macro_series, cfg, r);
    let outcomes: Vec<Result<ReplicateOutcome, SimError>> = if cfg.parallel {
        (0..cfg.replicates).into_par_iter().map(work).collect()
    } else {
        (0..cfg.replicates).map(work).collect()
    };

    let t_len = truth.z.len();
    let live = truth.scale.live_count();
    let mut sum_z = vec![vec![0.0; live]; t_len];
    let mut sum_n = vec![vec![0.0; live]; t_len];
    let mut summaries = Vec::new();
    let mut failed = Vec::new();
    let mut trace = None;
    let mut warnings = truth.warnings.clone();
    let active_count = truth.active.iter().filter(|a| **a).count().max(1) as f64;
    for (index, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(o) => {
                let mut acc_z = 0.0;
                let mut acc_n = 0.0;
                for t in 0..t_len {
                    for i in (0..live).filter(|&i| truth.active[i]) {
                        sum_z[t][i] += o.sq_one_factor[t][i];
                        sum_n[t][i] += o.sq_macro_risk[t][i];
                        acc_z += o.sq_one_factor[t][i];
                        acc_n += o.sq_macro_risk[t][i];
                    }
                }
                let cells = t_len as f64 * active_count;
                summaries.push(ReplicateSummary {
                    index,
                    mean_sq_err_one_factor: acc_z / cells,
                    mean_sq_err_macro_risk: acc_n / cells,
                });
                if let Some(dual) = o.dual {
                    for w in &dual.warnings {
                        if !warnings.contains(w) {
                            warnings.push(w.clone());
                        }
                    }
                    trace = Some(PdTrace {
                        replicate: index,
                        truth: truth.pd.clone(),
                        one_factor: dual.one_factor,
                        macro_risk: dual.macro_risk,
                    });
                }
            }
            Err(e) => {
                log::warn!("replicate {index} failed: {e}");
                failed.push(FailedReplicate {
                    index,
                    error: e.to_string(),
                });
            }
        }
    }
    if summaries.is_empty() {
        return Err(SimError::AllReplicatesFailed(
            failed.first().map(|f| f.error.clone()).unwrap_or_default(),
        ));
    }
    if !failed.is_empty() {
        warnings.push(format!("{} of {} replicates failed", failed.len(), cfg.replicates));
    }
    let n = summaries.len() as f64;
    let finish = |sum: Vec<Vec<f64>>| -> Vec<Vec<Option<f64>>> {
        sum.into_iter()
            .map(|row| {
                row.into_iter()
                    .enumerate()
                    .map(|(i, s)| truth.active[i].then_some(s / n))
                    .collect()
            })
            .collect()
    };
    Ok(ComparisonReport {
        periods: truth.periods.clone(),
        grades: truth.scale.labels()[..live].to_vec(),
        rho: truth.rho.clone(),
        truth_z: truth.z.clone(),
        mse_one_factor: finish(sum_z),
        mse_macro_risk: finish(sum_n),
        trace,
        replicates: summaries,
        failed,
        warnings,
    })
}

/// Average one-year matrix of the built-in history on the nine-bin scale
/// (eight live grades plus default). Every cell is positive.
pub const REFERENCE_AVERAGE: [[f64; 9]; 8] = [
    [0.9500, 0.0400, 0.0060, 0.0015, 0.0010, 0.0007, 0.0004, 0.0001, 0.0003],
    [0.0300, 0.9000, 0.0450, 0.0110, 0.0060, 0.0040, 0.0015, 0.0005, 0.0020],
    [0.0040, 0.0500, 0.8300, 0.0600, 0.0300, 0.0130, 0.0050, 0.0010, 0.0070],
    [0.0020, 0.0100, 0.0700, 0.7700, 0.0800, 0.0400, 0.0100, 0.0030, 0.0150],
    [0.0010, 0.0040, 0.0150, 0.0700, 0.7600, 0.0900, 0.0250, 0.0050, 0.0300],
    [0.0005, 0.0020, 0.0050, 0.0150, 0.0600, 0.8000, 0.0600, 0.0125, 0.0450],
    [0.0002, 0.0008, 0.0030, 0.0060, 0.0150, 0.0800, 0.6400, 0.0550, 0.2000],
    [0.0001, 0.0004, 0.0010, 0.0025, 0.0060, 0.0200, 0.1000, 0.4700, 0.4000],
];

/// Cohort size per live grade in the built-in history.
pub const REFERENCE_COHORTS: [u64; 8] = [20_000, 15_000, 8_000, 5_000, 5_000, 5_000, 3_000, 2_000];

/// Quarterly labels `YYYYQn` starting at `start_year`.
pub fn quarter_labels(start_year: u32, periods: usize) -> Vec<String> {
    (0..periods)
        .map(|t| format!("{}Q{}", start_year as usize + t / 4, t % 4 + 1))
        .collect()
}

/// Synthetic cohort history on the nine-bin scale: one-factor matrices around
/// [`REFERENCE_AVERAGE`] with standard-normal factors, sampled as multinomial
/// counts. Also returns the generating factor path.
pub fn reference_history(cfg: &HistoryConfig) -> Result<(TransitionPanel, Vec<f64>), SimError> {
    let scale = RatingScale::numbered(9)?;
    let avg = DMatrix::from_fn(8, 9, |i, j| REFERENCE_AVERAGE[i][j]);
    let clip = ClipPolicy::default();
    let thresholds = calibrate_thresholds(&avg, &clip)?;
    let rho = basel_correlation(&pd_from_matrix(&avg));
    let labels = quarter_labels(cfg.start_year, cfg.periods);
    let mut z_path = Vec::with_capacity(cfg.periods);
    let mut obs = Vec::with_capacity(cfg.periods);
    for (t, label) in labels.into_iter().enumerate() {
        let mut rng = keyed_rng(cfg.seed, HISTORY_STREAM, t);
        let z: f64 = rng.sample(StandardNormal);
        z_path.push(z);
        let m = conditional_matrix(&thresholds, &rho, z)?;
        let mut counts = DMatrix::<u64>::zeros(8, 9);
        for i in 0..8 {
            let probs: Vec<f64> = m.row(i).iter().copied().collect();
            for (j, c) in sample_multinomial(REFERENCE_COHORTS[i], &probs, &mut rng)
                .into_iter()
                .enumerate()
            {
                counts[(i, j)] = c;
            }
        }
        obs.push(estimate_cohort(label, &scale, counts)?);
    }
    Ok((TransitionPanel::new(scale, obs)?, z_path))
}

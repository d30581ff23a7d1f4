//! Fully resolved commands and their execution.
//!
//! A [`Plan`] holds absolute input paths and every option after defaults,
//! config files, environment and flags have been merged. Executing a plan
//! is deterministic, which is what makes manifests replayable.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rrl_core::domain::{average_matrix, validate_panel, RatingScale, TransitionPanel, ValidationReport};
use rrl_core::macrorisk::{
    fit_regression, forecast_pd, predict_matrix, probit_transform, GradeFit, MacroRiskFit,
    ProbitOptions, ZeroCellPolicy,
};
use rrl_core::numerics::ClipPolicy;
use rrl_core::onefactor::{
    basel_correlation, calibrate_rho_variance, fit_one_factor, pd_from_matrix, Correlation,
    OneFactorFit, PdVector, ThresholdSet,
};
use rrl_core::simlab::{
    read_out_factors, reference_history, run_comparison, ComparisonReport, HistoryConfig,
    MacroReadout, SimulationConfig,
};

use crate::error::CliError;
use crate::io::{fmt_num, read_macro, read_panel, write_macro, write_panel_long, PanelSource, Table};
use crate::manifest::{sha256_hex, FileDigest, RunManifest, MANIFEST_FILE};

/// Correlation choice for the one-factor fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RhoChoice {
    Fixed { rho: f64 },
    /// Per-grade formula value; `pd: None` takes the panel's average default column.
    Basel { pd: Option<Vec<f64>> },
    /// Variance-one search.
    Search,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Plan {
    Estimate {
        panel: PanelSource,
        clip_epsilon: f64,
    },
    FitOnefactor {
        panel: PanelSource,
        rho: RhoChoice,
        flip_sign: bool,
        clip_epsilon: f64,
    },
    FitMacrorisk {
        panel: PanelSource,
        macro_path: PathBuf,
        clip_epsilon: f64,
        zero_cells: ZeroCellPolicy,
    },
    Forecast {
        fit: PathBuf,
        scenario: PathBuf,
    },
    Simulate {
        panel: Option<PanelSource>,
        macro_path: Option<PathBuf>,
        config: SimulationConfig,
    },
    Synth {
        history: HistoryConfig,
        macro_readout: MacroReadout,
    },
}

/// In-memory outputs of one execution.
pub struct Produced {
    pub manifest: RunManifest,
    pub files: Vec<(String, Vec<u8>)>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeThresholds {
    pub grade: String,
    pub cuts: Option<Vec<f64>>,
}

/// Layout shared by both fit files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument<C> {
    pub model: String,
    pub scale: Vec<String>,
    pub coefficients: C,
    pub thresholds: Vec<GradeThresholds>,
    pub warnings: Vec<String>,
    pub manifest: RunManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneFactorCoefficients {
    pub rho: Correlation,
    /// Whether `z` below has been negated for presentation.
    pub z_flipped: bool,
    pub periods: Vec<String>,
    pub z: Vec<f64>,
    pub objective: Vec<f64>,
    /// Sample variance of the estimated factor series.
    pub factor_variance: Option<f64>,
    /// Variance search only: false when the returned value is a boundary.
    pub variance_crossed: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroRiskCoefficients {
    pub variable_names: Vec<String>,
    pub options: ProbitOptions,
    pub grades: Vec<Option<GradeFit>>,
}

pub const ONE_FACTOR_MODEL: &str = "one_factor";
pub const MACRO_RISK_MODEL: &str = "macro_risk";

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable output");
    s.push('\n');
    s.into_bytes()
}

fn push_unique(into: &mut Vec<String>, items: impl IntoIterator<Item = String>) {
    for w in items {
        if !into.contains(&w) {
            into.push(w);
        }
    }
}

fn clip_policy(epsilon: f64) -> Result<ClipPolicy, CliError> {
    ClipPolicy::new(epsilon).map_err(|e| CliError::Usage(format!("--clip-epsilon: {e}")))
}

fn matrix_rows(table: &mut Table, period: &str, scale: &RatingScale, m: &nalgebra::DMatrix<f64>) {
    let labels = scale.labels();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            table.row(&[period, &labels[i], &labels[j], &fmt_num(m[(i, j)])]);
        }
    }
}

fn validation_warnings(report: &ValidationReport) -> Vec<String> {
    let mut out = Vec::new();
    if !report.unobserved_rows.is_empty() {
        out.push(format!("{} unobserved grade rows", report.unobserved_rows.len()));
    }
    if !report.zero_cells.is_empty() {
        out.push(format!("{} zero cells", report.zero_cells.len()));
    }
    if !report.rounding_defects.is_empty() {
        out.push(format!("{} rows deviate from a unit sum beyond rounding", report.rounding_defects.len()));
    }
    if !report.quantile_hazards.is_empty() {
        out.push(format!(
            "{} rows have cumulative sums that need clipping before inversion",
            report.quantile_hazards.len()
        ));
    }
    out
}

fn threshold_listing(scale: &RatingScale, th: &ThresholdSet) -> Vec<GradeThresholds> {
    th.rows()
        .iter()
        .enumerate()
        .map(|(i, r)| GradeThresholds {
            grade: scale.labels()[i].clone(),
            cuts: r.clone(),
        })
        .collect()
}

impl Plan {
    pub fn command_name(&self) -> &'static str {
        match self {
            Plan::Estimate { .. } => "estimate",
            Plan::FitOnefactor { .. } => "fit-onefactor",
            Plan::FitMacrorisk { .. } => "fit-macrorisk",
            Plan::Forecast { .. } => "forecast",
            Plan::Simulate { .. } => "simulate",
            Plan::Synth { .. } => "synth",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Plan::Simulate { config, .. } => Some(config.seed),
            Plan::Synth { history, .. } => Some(history.seed),
            _ => None,
        }
    }

    pub fn execute(&self) -> Result<Produced, CliError> {
        match self {
            Plan::Estimate { panel, clip_epsilon } => self.estimate(panel, *clip_epsilon),
            Plan::FitOnefactor {
                panel,
                rho,
                flip_sign,
                clip_epsilon,
            } => self.fit_onefactor(panel, rho, *flip_sign, *clip_epsilon),
            Plan::FitMacrorisk {
                panel,
                macro_path,
                clip_epsilon,
                zero_cells,
            } => self.fit_macrorisk(panel, macro_path, *clip_epsilon, *zero_cells),
            Plan::Forecast { fit, scenario } => self.forecast(fit, scenario),
            Plan::Simulate {
                panel,
                macro_path,
                config,
            } => self.simulate(panel.as_ref(), macro_path.as_deref(), config),
            Plan::Synth {
                history,
                macro_readout,
            } => self.synth(history, macro_readout),
        }
    }

    fn estimate(&self, src: &PanelSource, clip_epsilon: f64) -> Result<Produced, CliError> {
        let clip = clip_policy(clip_epsilon)?;
        let loaded = read_panel(src)?;
        let panel = &loaded.panel;
        let manifest = RunManifest::new(self.clone(), &loaded.files)?;
        let mut table = Table::new(&["period", "from", "to", "rate"]);
        for obs in panel.observations() {
            matrix_rows(&mut table, obs.period(), panel.scale(), obs.empirical());
        }
        let report = validate_panel(panel, &clip);
        Ok(Produced {
            manifest,
            warnings: validation_warnings(&report),
            files: vec![
                ("empirical.csv".into(), table.into_bytes()),
                ("validation.json".into(), json_bytes(&report)),
            ],
        })
    }

    fn fit_onefactor(
        &self,
        src: &PanelSource,
        rho: &RhoChoice,
        flip_sign: bool,
        clip_epsilon: f64,
    ) -> Result<Produced, CliError> {
        let clip = clip_policy(clip_epsilon)?;
        let loaded = read_panel(src)?;
        let panel = &loaded.panel;
        let manifest = RunManifest::new(self.clone(), &loaded.files)?;
        let mut warnings = validation_warnings(&validate_panel(panel, &clip));
        let mut crossed = None;
        let fit: OneFactorFit = match rho {
            RhoChoice::Fixed { rho } => fit_one_factor(panel, Correlation::Uniform(*rho), &clip)?,
            RhoChoice::Basel { pd: Some(pd) } => {
                if pd.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(CliError::Usage("--pd values must lie in [0, 1]".into()));
                }
                fit_one_factor(panel, basel_correlation(&PdVector(pd.clone())), &clip)?
            }
            RhoChoice::Basel { pd: None } => {
                let avg = average_matrix(panel)?;
                fit_one_factor(panel, basel_correlation(&pd_from_matrix(&avg)), &clip)?
            }
            RhoChoice::Search => {
                let cal = calibrate_rho_variance(panel, &clip)?;
                crossed = Some(cal.crossed);
                cal.fit
            }
        };
        push_unique(&mut warnings, fit.warnings.iter().cloned());
        let z = fit.z_presented(flip_sign);

        let mut z_csv = Table::new(&["period", "z", "objective"]);
        for ((p, zt), obj) in fit.periods.iter().zip(&z).zip(&fit.objective_values) {
            z_csv.row(&[p.clone(), fmt_num(*zt), fmt_num(*obj)]);
        }
        let mut fitted = Table::new(&["period", "from", "to", "probability"]);
        for (t, p) in fit.periods.iter().enumerate() {
            matrix_rows(&mut fitted, p, panel.scale(), &fit.fitted_matrix(t)?);
        }
        let doc = FitDocument {
            model: ONE_FACTOR_MODEL.into(),
            scale: panel.scale().labels().to_vec(),
            coefficients: OneFactorCoefficients {
                rho: fit.rho.clone(),
                z_flipped: flip_sign,
                periods: fit.periods.clone(),
                factor_variance: rrl_core::numerics::sample_variance(&fit.z_series),
                z,
                objective: fit.objective_values.clone(),
                variance_crossed: crossed,
            },
            thresholds: threshold_listing(panel.scale(), &fit.thresholds),
            warnings: warnings.clone(),
            manifest: manifest.clone(),
        };
        Ok(Produced {
            manifest,
            warnings,
            files: vec![
                ("fit.json".into(), json_bytes(&doc)),
                ("z_series.csv".into(), z_csv.into_bytes()),
                ("fitted.csv".into(), fitted.into_bytes()),
            ],
        })
    }

    fn fit_macrorisk(
        &self,
        src: &PanelSource,
        macro_path: &Path,
        clip_epsilon: f64,
        zero_cells: ZeroCellPolicy,
    ) -> Result<Produced, CliError> {
        let clip = clip_policy(clip_epsilon)?;
        let loaded = read_panel(src)?;
        let panel = &loaded.panel;
        let macro_series = read_macro(macro_path)?;
        macro_series.check_aligned(panel)?;
        let mut files = loaded.files.clone();
        files.push(macro_path.to_path_buf());
        let manifest = RunManifest::new(self.clone(), &files)?;

        let mut warnings = validation_warnings(&validate_panel(panel, &clip));
        let probit = probit_transform(panel, ProbitOptions { clip, zero_cells });
        for (i, label) in panel.scale().labels()[..panel.scale().live_count()].iter().enumerate() {
            log::info!("grade {label}: {} masked probit cells", probit.masked_count(i));
        }
        let fit = fit_regression(&probit, &macro_series)?;
        push_unique(&mut warnings, fit.warnings.iter().cloned());

        let mut fitted = Table::new(&["period", "from", "to", "probability"]);
        for (t, p) in macro_series.periods().iter().enumerate() {
            let pred = predict_matrix(&fit, &macro_series.row(t))?;
            push_unique(&mut warnings, pred.warnings);
            matrix_rows(&mut fitted, p, panel.scale(), &pred.matrix);
        }
        let thresholds = fit
            .grades
            .iter()
            .enumerate()
            .map(|(i, g)| GradeThresholds {
                grade: panel.scale().labels()[i].clone(),
                cuts: g.as_ref().map(|g| g.intercepts.clone()),
            })
            .collect();
        let doc = FitDocument {
            model: MACRO_RISK_MODEL.into(),
            scale: panel.scale().labels().to_vec(),
            coefficients: MacroRiskCoefficients {
                variable_names: fit.variable_names.clone(),
                options: fit.options,
                grades: fit.grades.clone(),
            },
            thresholds,
            warnings: warnings.clone(),
            manifest: manifest.clone(),
        };
        Ok(Produced {
            manifest,
            warnings,
            files: vec![
                ("fit.json".into(), json_bytes(&doc)),
                ("fitted.csv".into(), fitted.into_bytes()),
            ],
        })
    }

    fn forecast(&self, fit_path: &Path, scenario_path: &Path) -> Result<Produced, CliError> {
        let fit = load_macro_fit(fit_path)?;
        let scenario = read_macro(scenario_path)?;
        let manifest = RunManifest::new(self.clone(), &[fit_path.to_path_buf(), scenario_path.to_path_buf()])?;
        let pds = forecast_pd(&fit, &scenario)?;
        let live = &fit.scale.labels()[..fit.scale.live_count()];
        let mut header = vec!["period".to_string()];
        header.extend(live.iter().cloned());
        let mut table = Table::new(&header);
        let mut warnings = Vec::new();
        for s in pds {
            let mut row = vec![s.period.clone()];
            row.extend(s.pd.0.iter().map(|&p| fmt_num(p)));
            table.row(&row);
            push_unique(&mut warnings, s.warnings);
        }
        for (g, label) in fit.grades.iter().zip(live) {
            if g.is_none() {
                push_unique(&mut warnings, [format!("grade {label}: not fitted; PD reported as 0")]);
            }
        }
        Ok(Produced {
            manifest,
            warnings,
            files: vec![("pd_forecast.csv".into(), table.into_bytes())],
        })
    }

    fn simulate(
        &self,
        src: Option<&PanelSource>,
        macro_path: Option<&Path>,
        config: &SimulationConfig,
    ) -> Result<Produced, CliError> {
        let mut inputs = Vec::new();
        let panel: TransitionPanel = match src {
            Some(src) => {
                let loaded = read_panel(src)?;
                inputs.extend(loaded.files);
                loaded.panel
            }
            None => reference_history(&config.history)?.0,
        };
        let macro_series = match macro_path {
            Some(p) => {
                inputs.push(p.to_path_buf());
                Some(read_macro(p)?)
            }
            None => None,
        };
        let manifest = RunManifest::new(self.clone(), &inputs)?;
        let report = run_comparison(&panel, macro_series.as_ref(), config)?;
        let mut warnings = report.warnings.clone();
        if report.trace.is_none() {
            warnings.push(format!("trace replicate {} did not complete; pd_trace.csv is empty", config.trace_replicate));
        }
        Ok(Produced {
            manifest,
            files: simulation_files(&report),
            warnings,
        })
    }

    fn synth(&self, history: &HistoryConfig, readout: &MacroReadout) -> Result<Produced, CliError> {
        let (panel, z) = reference_history(history)?;
        let macro_series = read_out_factors(&panel.periods(), &z, readout, history.seed)?;
        let manifest = RunManifest::new(self.clone(), &[])?;
        let mut factors = Table::new(&["period", "z"]);
        for (p, zt) in panel.periods().iter().zip(&z) {
            factors.row(&[p.clone(), fmt_num(*zt)]);
        }
        Ok(Produced {
            manifest,
            warnings: Vec::new(),
            files: vec![
                ("panel.csv".into(), write_panel_long(&panel)),
                ("macro.csv".into(), write_macro(&macro_series)),
                ("factors.csv".into(), factors.into_bytes()),
            ],
        })
    }
}

#[derive(Serialize)]
struct GradeSummary<'a> {
    grade: &'a str,
    mean_mse_one_factor: f64,
    mean_mse_macro_risk: f64,
}

#[derive(Serialize)]
struct SimulationSummary<'a> {
    periods: &'a [String],
    grades: &'a [String],
    rho: &'a Correlation,
    truth_z: &'a [f64],
    replicates_completed: usize,
    failed: &'a [rrl_core::simlab::FailedReplicate],
    /// Mean over periods of the per-period MSE; excluded grades omitted.
    mean_mse: Vec<GradeSummary<'a>>,
    warnings: &'a [String],
}

/// Report files of a simulation run. Their bytes depend only on the report.
pub fn simulation_files(report: &ComparisonReport) -> Vec<(String, Vec<u8>)> {
    let mut trace = Table::new(&["period", "grade", "truth", "one_factor", "macro_risk"]);
    if let Some(tr) = &report.trace {
        for (t, p) in report.periods.iter().enumerate() {
            for (i, g) in report.grades.iter().enumerate() {
                if report.mse_one_factor[t][i].is_none() {
                    continue;
                }
                trace.row(&[
                    p.clone(),
                    g.clone(),
                    fmt_num(tr.truth[t].0[i]),
                    fmt_num(tr.one_factor[t].0[i]),
                    fmt_num(tr.macro_risk[t].0[i]),
                ]);
            }
        }
    }
    let mut mse = Table::new(&["period", "grade", "mse_one_factor", "mse_macro_risk"]);
    for (t, p) in report.periods.iter().enumerate() {
        for (i, g) in report.grades.iter().enumerate() {
            if let (Some(a), Some(b)) = (report.mse_one_factor[t][i], report.mse_macro_risk[t][i]) {
                mse.row(&[p.clone(), g.clone(), fmt_num(a), fmt_num(b)]);
            }
        }
    }
    let mut reps = Table::new(&["replicate", "mse_one_factor", "mse_macro_risk"]);
    for r in &report.replicates {
        reps.row(&[
            r.index.to_string(),
            fmt_num(r.mean_sq_err_one_factor),
            fmt_num(r.mean_sq_err_macro_risk),
        ]);
    }
    let mean_mse = report
        .mean_mse_by_grade()
        .into_iter()
        .zip(&report.grades)
        .filter_map(|(m, g)| {
            m.map(|(a, b)| GradeSummary {
                grade: g,
                mean_mse_one_factor: a,
                mean_mse_macro_risk: b,
            })
        })
        .collect();
    let summary = SimulationSummary {
        periods: &report.periods,
        grades: &report.grades,
        rho: &report.rho,
        truth_z: &report.truth_z,
        replicates_completed: report.replicates.len(),
        failed: &report.failed,
        mean_mse,
        warnings: &report.warnings,
    };
    vec![
        ("pd_trace.csv".into(), trace.into_bytes()),
        ("mse_by_period.csv".into(), mse.into_bytes()),
        ("replicates.csv".into(), reps.into_bytes()),
        ("summary.json".into(), json_bytes(&summary)),
    ]
}

/// Reads a macro-risk fit file back into a model.
pub fn load_macro_fit(path: &Path) -> Result<MacroRiskFit, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    let doc: FitDocument<serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| CliError::input(path.display(), e.to_string()))?;
    if doc.model != MACRO_RISK_MODEL {
        return Err(CliError::input(
            path.display(),
            format!("expected a {MACRO_RISK_MODEL} fit, found model {:?}", doc.model),
        ));
    }
    let coef: MacroRiskCoefficients = serde_json::from_value(doc.coefficients)
        .map_err(|e| CliError::input(path.display(), e.to_string()))?;
    let scale = RatingScale::new(doc.scale)?;
    if coef.grades.len() != scale.live_count() {
        return Err(CliError::input(
            path.display(),
            format!("{} grade fits for {} live grades", coef.grades.len(), scale.live_count()),
        ));
    }
    for g in coef.grades.iter().flatten() {
        if g.intercepts.len() != scale.live_count() || g.beta.len() != coef.variable_names.len() {
            return Err(CliError::input(path.display(), format!("grade {}: coefficient lengths", g.grade)));
        }
    }
    Ok(MacroRiskFit {
        scale,
        variable_names: coef.variable_names,
        options: coef.options,
        grades: coef.grades,
        warnings: doc.warnings,
    })
}

/// Executes `plan`, writes its files and `manifest.json` into `out`.
pub fn run_plan(plan: &Plan, out: &Path) -> Result<(RunManifest, Vec<String>), CliError> {
    let Produced {
        mut manifest,
        files,
        warnings,
    } = plan.execute()?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out.display(), e))?;
    for (name, bytes) in &files {
        let path = out.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(path.display(), e))?;
        manifest.outputs.push(FileDigest {
            path: name.clone(),
            sha256: sha256_hex(bytes),
        });
    }
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, json_bytes(&manifest)).map_err(|e| CliError::io(path.display(), e))?;
    Ok((manifest, warnings))
}

/// Re-executes a recorded run into `out` and checks every output digest.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<RunManifest, CliError> {
    let recorded = RunManifest::load(manifest_path)?;
    recorded.verify_inputs()?;
    let (fresh, _) = run_plan(&recorded.config, out)?;
    let want: BTreeSet<_> = recorded.outputs.iter().collect();
    let got: BTreeSet<_> = fresh.outputs.iter().collect();
    if want != got {
        let differing: Vec<String> = want
            .symmetric_difference(&got)
            .map(|d| d.path.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        return Err(CliError::Replay(format!("outputs differ: {}", differing.join(", "))));
    }
    Ok(fresh)
}

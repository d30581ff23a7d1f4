//! File formats.
//!
//! Panels come in two layouts:
//!
//! - long: header `period,from,to,count`, one row per non-empty cell of
//!   integer counts. Periods keep their first-appearance order.
//! - per-period: header `from,<grade>,...,<grade>` with one row per
//!   non-default initial grade. The period label is the file stem. A
//!   directory holds one such file per period, ordered by file name.
//!
//! Macro and scenario files share the header `period,<var>,...,<var>`.
//! Every number written by this crate carries 12 significant digits.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use rrl_core::domain::{
    detect_units, estimate_cohort, observation_from_table, MacroSeries, RatingScale,
    TransitionObservation, TransitionPanel, Units,
};

use crate::error::CliError;

pub const LONG_HEADER: [&str; 4] = ["period", "from", "to", "count"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum UnitsArg {
    #[default]
    Auto,
    Counts,
    Fraction,
    Percent,
}

/// Where a panel is read from and how rate tables are interpreted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSource {
    pub path: PathBuf,
    pub units: UnitsArg,
    /// Cohort size given to every observed row of a rate table.
    pub cohort_size: f64,
    /// Grade labels in order, default last. Inferred when absent.
    pub grades: Option<Vec<String>>,
}

/// A panel plus the files it was read from.
pub struct LoadedPanel {
    pub panel: TransitionPanel,
    pub files: Vec<PathBuf>,
}

/// Locale-independent 12-significant-digit rendering.
pub fn fmt_num(x: f64) -> String {
    // fold negative zero so equal values print identically
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:.11e}")
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path.display(), e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::input(path.display(), e.to_string())
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64, CliError> {
    field
        .parse::<f64>()
        .map_err(|_| CliError::input(path.display(), format!("line {line}: not a number: {field:?}")))
}

fn headers(path: &Path, rdr: &mut csv::Reader<fs::File>) -> Result<Vec<String>, CliError> {
    let h = rdr.headers().map_err(|e| csv_err(path, e))?;
    let h: Vec<String> = h.iter().map(str::to_string).collect();
    if h.iter().all(|s| s.is_empty()) {
        return Err(CliError::input(path.display(), "empty file"));
    }
    Ok(h)
}

pub fn read_panel(src: &PanelSource) -> Result<LoadedPanel, CliError> {
    let path = &src.path;
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| CliError::io(path.display(), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(CliError::input(path.display(), "directory contains no .csv files"));
        }
        return read_period_files(&files, src);
    }
    let mut rdr = reader(path)?;
    let h = headers(path, &mut rdr)?;
    if h == LONG_HEADER {
        let panel = read_long(path, rdr, src.grades.as_deref())?;
        Ok(LoadedPanel {
            panel,
            files: vec![path.clone()],
        })
    } else if h.first().map(String::as_str) == Some("from") {
        read_period_files(std::slice::from_ref(path), src)
    } else {
        Err(CliError::input(
            path.display(),
            format!(
                "unrecognized header {h:?}; expected `{}` or `from,<grades...>`",
                LONG_HEADER.join(",")
            ),
        ))
    }
}

fn infer_scale(path: &Path, labels: Vec<String>, given: Option<&[String]>) -> Result<RatingScale, CliError> {
    if let Some(g) = given {
        for l in &labels {
            if !g.contains(l) {
                return Err(CliError::input(path.display(), format!("grade {l:?} is not in --grades")));
            }
        }
        return Ok(RatingScale::new(g.iter().cloned())?);
    }
    let mut numeric: Vec<(u64, String)> = Vec::with_capacity(labels.len());
    for l in labels {
        match l.parse::<u64>() {
            Ok(n) => numeric.push((n, l)),
            Err(_) => {
                return Err(CliError::input(
                    path.display(),
                    format!("grade label {l:?} is not numeric; pass the scale with --grades"),
                ))
            }
        }
    }
    numeric.sort();
    numeric.dedup();
    Ok(RatingScale::new(numeric.into_iter().map(|(_, l)| l))?)
}

fn read_long(
    path: &Path,
    mut rdr: csv::Reader<fs::File>,
    grades: Option<&[String]>,
) -> Result<TransitionPanel, CliError> {
    let mut periods: Vec<String> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut cells: Vec<(usize, String, String, u64)> = Vec::new();
    let mut period_index: HashMap<String, usize> = HashMap::new();
    for (n, rec) in rdr.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 4 {
            return Err(CliError::input(path.display(), format!("line {line}: expected 4 fields")));
        }
        let count = rec[3].parse::<u64>().map_err(|_| {
            CliError::input(
                path.display(),
                format!("line {line}: count must be a non-negative integer, got {:?}", &rec[3]),
            )
        })?;
        let t = *period_index.entry(rec[0].to_string()).or_insert_with(|| {
            periods.push(rec[0].to_string());
            periods.len() - 1
        });
        for l in [&rec[1], &rec[2]] {
            if !labels.iter().any(|x| x == l) {
                labels.push(l.to_string());
            }
        }
        cells.push((t, rec[1].to_string(), rec[2].to_string(), count));
    }
    if periods.is_empty() {
        return Err(CliError::input(path.display(), "no data rows"));
    }
    let scale = infer_scale(path, labels, grades)?;
    let k = scale.grade_count();
    let mut counts = vec![DMatrix::<u64>::zeros(k - 1, k); periods.len()];
    for (t, from, to, c) in cells {
        let i = scale.index_of(&from).expect("label collected above");
        let j = scale.index_of(&to).expect("label collected above");
        if i == scale.default_index() {
            return Err(CliError::input(
                path.display(),
                format!("period {}: transitions out of the default grade {from:?}", periods[t]),
            ));
        }
        counts[t][(i, j)] += c;
    }
    let obs = periods
        .into_iter()
        .zip(counts)
        .map(|(p, c)| estimate_cohort(p, &scale, c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TransitionPanel::new(scale, obs)?)
}

fn read_period_files(files: &[PathBuf], src: &PanelSource) -> Result<LoadedPanel, CliError> {
    let mut scale: Option<RatingScale> = None;
    let mut obs: Vec<TransitionObservation> = Vec::with_capacity(files.len());
    for path in files {
        let mut rdr = reader(path)?;
        let h = headers(path, &mut rdr)?;
        if h.first().map(String::as_str) != Some("from") || h.len() < 3 {
            return Err(CliError::input(
                path.display(),
                "expected header `from,<grade>,...` with at least two grades",
            ));
        }
        let file_scale = match &src.grades {
            Some(g) if g[..] != h[1..] => {
                return Err(CliError::input(path.display(), "header grades differ from --grades"))
            }
            _ => RatingScale::new(h[1..].iter().cloned())?,
        };
        if let Some(s) = &scale {
            if *s != file_scale {
                return Err(CliError::input(path.display(), "grade columns differ from earlier files"));
            }
        }
        let k = file_scale.grade_count();
        let mut table = DMatrix::<f64>::zeros(k - 1, k);
        let mut rows = 0;
        for (n, rec) in rdr.records().enumerate() {
            let line = n + 2;
            let rec = rec.map_err(|e| csv_err(path, e))?;
            if rows == k - 1 {
                return Err(CliError::input(path.display(), format!("line {line}: too many rows")));
            }
            if rec.len() != k + 1 {
                return Err(CliError::input(
                    path.display(),
                    format!("line {line}: expected {} fields, got {}", k + 1, rec.len()),
                ));
            }
            if rec[0] != file_scale.labels()[rows] {
                return Err(CliError::input(
                    path.display(),
                    format!(
                        "line {line}: expected initial grade {:?}, got {:?}",
                        file_scale.labels()[rows],
                        &rec[0]
                    ),
                ));
            }
            for j in 0..k {
                table[(rows, j)] = parse_f64(path, line, &rec[j + 1])?;
            }
            rows += 1;
        }
        if rows != k - 1 {
            return Err(CliError::input(
                path.display(),
                format!("expected {} rows, got {rows}", k - 1),
            ));
        }
        let units = match src.units {
            UnitsArg::Auto => detect_units(&table)?,
            UnitsArg::Counts => Units::Counts,
            UnitsArg::Fraction => Units::Fraction,
            UnitsArg::Percent => Units::Percent,
        };
        let period = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        log::info!("{}: period {period}, units {units:?}", path.display());
        obs.push(observation_from_table(period, &file_scale, table, units, src.cohort_size)?);
        scale = Some(file_scale);
    }
    let scale = scale.expect("at least one file");
    Ok(LoadedPanel {
        panel: TransitionPanel::new(scale, obs)?,
        files: files.to_vec(),
    })
}

/// Reads a `period,<var>,...` file.
pub fn read_macro(path: &Path) -> Result<MacroSeries, CliError> {
    let mut rdr = reader(path)?;
    let h = headers(path, &mut rdr)?;
    if h.first().map(String::as_str) != Some("period") || h.len() < 2 {
        return Err(CliError::input(
            path.display(),
            "expected header `period,<var>,...` with at least one variable",
        ));
    }
    let names: Vec<String> = h[1..].to_vec();
    let mut periods = Vec::new();
    let mut values = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != h.len() {
            return Err(CliError::input(
                path.display(),
                format!("line {line}: expected {} fields, got {}", h.len(), rec.len()),
            ));
        }
        periods.push(rec[0].to_string());
        for f in rec.iter().skip(1) {
            values.push(parse_f64(path, line, f)?);
        }
    }
    if periods.is_empty() {
        return Err(CliError::input(path.display(), "no data rows"));
    }
    let m = DMatrix::from_row_slice(periods.len(), names.len(), &values);
    Ok(MacroSeries::new(periods, names, m)?)
}

/// Buffered CSV writer into memory; outputs are written whole.
pub struct Table {
    w: csv::Writer<Vec<u8>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(header.iter().map(|s| s.as_ref()))
            .expect("writing to memory");
        Self { w }
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) {
        self.w
            .write_record(fields.iter().map(|s| s.as_ref()))
            .expect("writing to memory");
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.w.into_inner().expect("writing to memory")
    }
}

pub fn write_panel_long(panel: &TransitionPanel) -> Vec<u8> {
    let labels = panel.scale().labels();
    let mut t = Table::new(&LONG_HEADER);
    for obs in panel.observations() {
        let Some(counts) = obs.counts() else { continue };
        for i in 0..counts.nrows() {
            for j in 0..counts.ncols() {
                if counts[(i, j)] > 0 {
                    t.row(&[
                        obs.period(),
                        &labels[i],
                        &labels[j],
                        &counts[(i, j)].to_string(),
                    ]);
                }
            }
        }
    }
    t.into_bytes()
}

pub fn write_macro(series: &MacroSeries) -> Vec<u8> {
    let mut header = vec!["period".to_string()];
    header.extend(series.names().iter().cloned());
    let mut t = Table::new(&header);
    for (r, p) in series.periods().iter().enumerate() {
        let mut row = vec![p.clone()];
        row.extend(series.row(r).into_iter().map(fmt_num));
        t.row(&row);
    }
    t.into_bytes()
}

//! CSV and JSON files: long-format visits, censoring brackets, the column
//! schema, fit and bootstrap documents, study summaries.
//!
//! Floats are written in Rust's shortest round-trip form, so every value
//! reads back bit-identical.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::likelihood::LikContext;
use crate::model::{validate, Dataset, Parameters, Subject, Violation, Visit};
use crate::optimizer::{FitOptions, FitResult};
use crate::simulator::{SimConfig, SubjectTruth};
use crate::study::{BootstrapResult, McSummary};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {err}")]
    File { path: PathBuf, err: std::io::Error },
    #[error("{path}: {err}")]
    Csv { path: PathBuf, err: csv::Error },
    #[error("{path}: {err}")]
    Json { path: PathBuf, err: serde_json::Error },
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("{path}, line {line}, column `{column}`: cannot parse {value:?}")]
    Parse {
        path: PathBuf,
        line: u64,
        column: String,
        value: String,
    },
    #[error("brackets reference unknown subject `{0}`")]
    UnknownSubject(String),
    #[error("subject `{0}` has visits but no bracket row")]
    MissingBracket(String),
    #[error("subject `{0}` has more than one bracket row")]
    DuplicateBracket(String),
    #[error("invalid dataset:\n{}", format_violations(.0))]
    Invalid(Vec<Violation>),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| format!("  {x}")).collect::<Vec<_>>().join("\n")
}

/// Column names for the long-format file. A design entry `"1"` is the
/// constant one; any other entry names a column (the time column included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(default = "default_subject_column")]
    pub subject_column: String,
    #[serde(default = "default_time_column")]
    pub time_column: String,
    pub markers: Vec<String>,
    pub fixed_effects: Vec<String>,
    pub hazard_covariates: Vec<String>,
    #[serde(default = "default_random_effects")]
    pub random_effects: Vec<String>,
}

fn default_subject_column() -> String {
    "subject_id".into()
}
fn default_time_column() -> String {
    "time".into()
}
fn default_random_effects() -> Vec<String> {
    vec!["1".into()]
}

pub const CONSTANT: &str = "1";

impl Schema {
    /// Layout written by the simulator: `x = [1, t, X]`, `s = [X]`, `z = [1]`.
    pub fn simulated(panel_dim: usize) -> Self {
        Schema {
            subject_column: default_subject_column(),
            time_column: default_time_column(),
            markers: (1..=panel_dim).map(|k| format!("marker_{k}")).collect(),
            fixed_effects: vec![CONSTANT.into(), "time".into(), "X".into()],
            hazard_covariates: vec!["X".into()],
            random_effects: default_random_effects(),
        }
    }

    /// Covariate columns other than time and the constant, in first-use order.
    fn covariate_columns(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in self.fixed_effects.iter().chain(&self.hazard_covariates).chain(&self.random_effects) {
            if c != CONSTANT && *c != self.time_column && !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }
}

/// Optional cleaning applied after reading.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Drop subjects whose event is detected at their first visit.
    pub exclude_first_visit_diagnoses: bool,
    /// Drop subjects with fewer visits.
    pub min_visits: Option<usize>,
    /// Move `V` to the last visit before `U` when a visit lies inside `(V, U)`.
    pub snap_bracket: bool,
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |err| IoError::File {
        path: path.to_owned(),
        err,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |err| IoError::Csv {
        path: path.to_owned(),
        err,
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let f = File::open(path).map_err(file_err(path))?;
    serde_json::from_reader(std::io::BufReader::new(f)).map_err(|err| IoError::Json {
        path: path.to_owned(),
        err,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let f = File::create(path).map_err(file_err(path))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(|err| IoError::Json {
        path: path.to_owned(),
        err,
    })?;
    w.write_all(b"\n").map_err(file_err(path))?;
    w.flush().map_err(file_err(path))
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(&r).map_err(csv_err(path))?;
    }
    w.flush().map_err(file_err(path))
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

struct Table {
    path: PathBuf,
    header: HashMap<String, usize>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, IoError> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err(path))?;
        let header = r
            .headers()
            .map_err(csv_err(path))?
            .iter()
            .enumerate()
            .map(|(i, h)| (h.to_owned(), i))
            .collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err(path))?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Table {
            path: path.to_owned(),
            header,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize, IoError> {
        self.header
            .get(name)
            .copied()
            .ok_or_else(|| IoError::Schema(format!("{} has no column `{name}`", self.path.display())))
    }

    fn parse(&self, line: u64, column: &str, value: &str) -> Result<f64, IoError> {
        value.parse::<f64>().map_err(|_| IoError::Parse {
            path: self.path.clone(),
            line,
            column: column.to_owned(),
            value: value.to_owned(),
        })
    }
}

/// Reads `longitudinal.csv` and `brackets.csv` into a validated dataset.
pub fn load_dataset(longitudinal: &Path, brackets: &Path, schema: &Schema, options: &LoadOptions) -> Result<Dataset, IoError> {
    if schema.markers.is_empty() {
        return Err(IoError::Schema("no marker columns".into()));
    }
    let long = Table::read(longitudinal)?;
    let id_col = long.column(&schema.subject_column)?;
    let time_col = long.column(&schema.time_column)?;
    let marker_cols: Vec<usize> = schema.markers.iter().map(|m| long.column(m)).collect::<Result<_, _>>()?;
    let resolve = |names: &[String]| -> Result<Vec<Option<usize>>, IoError> {
        names
            .iter()
            .map(|n| if n == CONSTANT { Ok(None) } else { long.column(n).map(Some) })
            .collect()
    };
    let fixed = resolve(&schema.fixed_effects)?;
    let hazard = resolve(&schema.hazard_covariates)?;
    let random = resolve(&schema.random_effects)?;

    let mut order: Vec<String> = Vec::new();
    let mut visits: HashMap<String, Vec<Visit>> = HashMap::new();
    for (line, rec) in &long.rows {
        let field = |c: usize| rec.get(c).unwrap_or("");
        let id = field(id_col).to_owned();
        let time = long.parse(*line, &schema.time_column, field(time_col))?;
        let design = |cols: &[Option<usize>], names: &[String]| -> Result<Vec<f64>, IoError> {
            cols.iter()
                .zip(names)
                .map(|(c, n)| match c {
                    None => Ok(1.0),
                    Some(c) => long.parse(*line, n, field(*c)),
                })
                .collect()
        };
        let markers = marker_cols
            .iter()
            .zip(&schema.markers)
            .map(|(&c, n)| {
                let v = field(c);
                if v.is_empty() || v.eq_ignore_ascii_case("na") {
                    Ok(None)
                } else {
                    long.parse(*line, n, v).map(Some)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let visit = Visit {
            time,
            markers,
            covariates_x: design(&fixed, &schema.fixed_effects)?,
            covariates_s: design(&hazard, &schema.hazard_covariates)?,
            covariates_z: design(&random, &schema.random_effects)?,
        };
        if !visits.contains_key(&id) {
            order.push(id.clone());
        }
        visits.entry(id).or_default().push(visit);
    }

    let br = Table::read(brackets)?;
    let (bid, bv, bu, bd) = (br.column("subject_id")?, br.column("V")?, br.column("U")?, br.column("delta")?);
    let mut bracket: HashMap<String, (f64, f64, bool)> = HashMap::new();
    for (line, rec) in &br.rows {
        let field = |c: usize| rec.get(c).unwrap_or("");
        let id = field(bid).to_owned();
        if !visits.contains_key(&id) {
            return Err(IoError::UnknownSubject(id));
        }
        let v = br.parse(*line, "V", field(bv))?;
        let u = match field(bu) {
            "" | "inf" | "Inf" | "infinity" => f64::INFINITY,
            s => br.parse(*line, "U", s)?,
        };
        let delta = match field(bd) {
            "1" | "true" | "TRUE" => true,
            "0" | "false" | "FALSE" => false,
            s => {
                return Err(IoError::Parse {
                    path: br.path.clone(),
                    line: *line,
                    column: "delta".into(),
                    value: s.into(),
                })
            }
        };
        if bracket.insert(id.clone(), (v, u, delta)).is_some() {
            return Err(IoError::DuplicateBracket(id));
        }
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut vs = visits.remove(&id).unwrap_or_default();
        vs.sort_by(|a, b| a.time.total_cmp(&b.time));
        let Some(&(v, u, delta)) = bracket.get(&id) else {
            return Err(IoError::MissingBracket(id));
        };
        subjects.push(Subject {
            id,
            visits: vs,
            bracket_v: v,
            bracket_u: u,
            delta,
        });
    }
    let mut dataset = Dataset {
        subjects,
        panel_dim: schema.markers.len(),
        fixed_dim: schema.fixed_effects.len(),
        hazard_dim: schema.hazard_covariates.len(),
        re_dim: schema.random_effects.len(),
    };
    preprocess(&mut dataset, options);
    let violations = validate(&dataset);
    if !violations.is_empty() {
        return Err(IoError::Invalid(violations));
    }
    Ok(dataset)
}

/// Applies the cleaning steps of `options` in place.
pub fn preprocess(dataset: &mut Dataset, options: &LoadOptions) {
    if options.snap_bracket {
        for s in dataset.subjects.iter_mut().filter(|s| s.delta) {
            let (v, u) = (s.bracket_v, s.bracket_u);
            if s.visits.iter().any(|x| x.time > v && x.time < u) {
                if let Some(last) = s.visits.iter().rev().find(|x| x.time < u) {
                    log::info!("subject {}: V moved from {v} to {}", s.id, last.time);
                    s.bracket_v = last.time;
                }
            }
        }
    }
    if options.exclude_first_visit_diagnoses {
        dataset
            .subjects
            .retain(|s| !(s.delta && s.visits.first().is_some_and(|f| s.bracket_u <= f.time)));
    }
    if let Some(m) = options.min_visits {
        dataset.subjects.retain(|s| s.visits.len() >= m);
    }
}

/// Writes both CSV files; covariate columns are read back from the first
/// design position that uses them.
pub fn save_dataset(dataset: &Dataset, schema: &Schema, longitudinal: &Path, brackets: &Path) -> Result<(), IoError> {
    if schema.markers.len() != dataset.panel_dim
        || schema.fixed_effects.len() != dataset.fixed_dim
        || schema.hazard_covariates.len() != dataset.hazard_dim
        || schema.random_effects.len() != dataset.re_dim
    {
        return Err(IoError::Schema("schema does not match the dataset dimensions".into()));
    }
    let extra = schema.covariate_columns();
    let lookup = |v: &Visit, name: &str| -> f64 {
        let blocks = [
            (&schema.fixed_effects, &v.covariates_x),
            (&schema.hazard_covariates, &v.covariates_s),
            (&schema.random_effects, &v.covariates_z),
        ];
        for (names, vals) in blocks {
            if let Some(i) = names.iter().position(|n| n == name) {
                return vals[i];
            }
        }
        f64::NAN
    };
    let mut header = vec![schema.subject_column.clone(), schema.time_column.clone()];
    header.extend(schema.markers.iter().cloned());
    header.extend(extra.iter().cloned());
    let rows = dataset.subjects.iter().flat_map(|s| {
        let extra = &extra;
        s.visits.iter().map(move |v| {
            let mut r = vec![s.id.clone(), num(v.time)];
            r.extend(v.markers.iter().map(|m| opt_num(*m)));
            r.extend(extra.iter().map(|c| num(lookup(v, c))));
            r
        })
    });
    write_csv(longitudinal, &header, rows)?;
    let header: Vec<String> = ["subject_id", "V", "U", "delta"].iter().map(|s| s.to_string()).collect();
    let rows = dataset.subjects.iter().map(|s| {
        vec![
            s.id.clone(),
            num(s.bracket_v),
            if s.bracket_u.is_finite() { num(s.bracket_u) } else { String::new() },
            if s.delta { "1".into() } else { "0".into() },
        ]
    });
    write_csv(brackets, &header, rows)
}

/// File names inside a data directory.
pub struct DataDir {
    pub root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataDir { root: root.into() }
    }
    pub fn longitudinal(&self) -> PathBuf {
        self.root.join("longitudinal.csv")
    }
    pub fn brackets(&self) -> PathBuf {
        self.root.join("brackets.csv")
    }
    pub fn schema(&self) -> PathBuf {
        self.root.join("schema.json")
    }
    pub fn truth(&self) -> PathBuf {
        self.root.join("truth.json")
    }

    /// Loads with `schema.json` when present, the simulator layout otherwise.
    pub fn load(&self, options: &LoadOptions) -> Result<Dataset, IoError> {
        let schema = if self.schema().exists() {
            read_json(&self.schema())?
        } else {
            let markers = Table::read(&self.longitudinal())?
                .header
                .keys()
                .filter(|h| h.starts_with("marker_"))
                .count();
            Schema::simulated(markers)
        };
        load_dataset(&self.longitudinal(), &self.brackets(), &schema, options)
    }
}

/// A parameter vector with the context needed to evaluate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDoc {
    pub context: LikContext,
    pub parameters: Parameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDoc {
    pub context: LikContext,
    /// Optimizer settings of the fit, reused by bootstrap refits.
    #[serde(default)]
    pub options: FitOptions,
    pub parameters: Parameters,
    pub fit: FitResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthDoc {
    pub config: SimConfig,
    /// Spline used to project the true baseline onto ξ.
    pub context: LikContext,
    pub parameters: Parameters,
    pub subjects: Vec<SubjectTruth>,
}

/// One row of the estimate / lower / upper / p table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootDoc {
    pub seed: u64,
    pub bootstrap: BootstrapResult,
    /// Coefficients on their own scale.
    pub table: Vec<ReportRow>,
    /// Hazard coefficients as hazard ratios.
    pub hazard_ratios: Vec<ReportRow>,
}

impl BootDoc {
    pub fn new(seed: u64, bootstrap: BootstrapResult) -> Self {
        let table = bootstrap
            .coefficients
            .iter()
            .filter(|c| !c.name.starts_with("xi"))
            .map(|c| ReportRow {
                name: c.name.clone(),
                estimate: c.estimate,
                lower: c.lower,
                upper: c.upper,
                p_value: c.p_value,
            })
            .collect();
        let hazard_ratios = bootstrap
            .coefficients
            .iter()
            .filter_map(|c| {
                c.hazard_ratio.map(|[e, l, u]| ReportRow {
                    name: c.name.clone(),
                    estimate: e,
                    lower: l,
                    upper: u,
                    p_value: c.p_value,
                })
            })
            .collect();
        BootDoc {
            seed,
            bootstrap,
            table,
            hazard_ratios,
        }
    }
}

/// `summary.csv`: Parameters, Bias, SD, ASE, CP.
pub fn write_summary_csv(path: &Path, summary: &McSummary) -> Result<(), IoError> {
    let header: Vec<String> = ["Parameters", "Bias", "SD", "ASE", "CP"].iter().map(|s| s.to_string()).collect();
    let rows = summary
        .coefficients
        .iter()
        .map(|c| vec![c.name.clone(), num(c.bias), num(c.sd), opt_num(c.ase), opt_num(c.cp)]);
    write_csv(path, &header, rows)
}

/// `hazard_band.csv`: t, truth, mean, q025, q975.
pub fn write_hazard_band_csv(path: &Path, summary: &McSummary) -> Result<(), IoError> {
    let h = &summary.hazard;
    let header: Vec<String> = ["t", "truth", "mean", "q025", "q975"].iter().map(|s| s.to_string()).collect();
    let rows = (0..h.t.len()).map(|i| vec![num(h.t[i]), num(h.truth[i]), num(h.mean[i]), num(h.q025[i]), num(h.q975[i])]);
    write_csv(path, &header, rows)
}

/// `curve.csv`: t, cumulative_hazard, hazard.
pub fn write_curve_csv(path: &Path, t: &[f64], cumulative: &[f64], rate: &[f64]) -> Result<(), IoError> {
    let header: Vec<String> = ["t", "cumulative_hazard", "hazard"].iter().map(|s| s.to_string()).collect();
    let rows = (0..t.len()).map(|i| vec![num(t[i]), num(cumulative[i]), num(rate[i])]);
    write_csv(path, &header, rows)
}

/// Reads a two-column-or-more CSV back as header plus numeric rows.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), IoError> {
    let t = Table::read(path)?;
    let mut header: Vec<(String, usize)> = t.header.iter().map(|(k, v)| (k.clone(), *v)).collect();
    header.sort_by_key(|h| h.1);
    let mut rows = Vec::new();
    for (line, rec) in &t.rows {
        let row = rec
            .iter()
            .zip(&header)
            .map(|(v, (h, _))| if v.is_empty() { Ok(f64::NAN) } else { t.parse(*line, h, v) })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok((header.into_iter().map(|h| h.0).collect(), rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::gen_dataset;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn schema1() -> Schema {
        Schema {
            subject_column: "id".into(),
            time_column: "time".into(),
            markers: vec!["y".into()],
            fixed_effects: vec!["1".into(), "time".into()],
            hazard_covariates: vec!["grp".into()],
            random_effects: vec!["1".into()],
        }
    }

    const LONG: &str = "id,time,y,grp\na,0,1.5,1\na,1,,1\na,2,2.5,1\nb,0,0.5,0\nb,1.5,0.25,0\n";

    #[test]
    fn reads_missing_markers_and_constants() {
        let dir = tempfile::tempdir().unwrap();
        let l = write(dir.path(), "l.csv", LONG);
        let b = write(dir.path(), "b.csv", "subject_id,V,U,delta\na,1,2,1\nb,1.5,,0\n");
        let d = load_dataset(&l, &b, &schema1(), &LoadOptions::default()).unwrap();
        assert_eq!(d.len(), 2);
        let a = &d.subjects[0];
        assert_eq!(a.visits[1].markers, vec![None]);
        assert_eq!(a.visits[2].covariates_x, vec![1.0, 2.0]);
        assert_eq!(a.visits[0].covariates_s, vec![1.0]);
        assert_eq!(d.subjects[1].bracket_u, f64::INFINITY);
        assert!(!d.subjects[1].delta);
    }

    #[test]
    fn unknown_subject_named() {
        let dir = tempfile::tempdir().unwrap();
        let l = write(dir.path(), "l.csv", LONG);
        let b = write(dir.path(), "b.csv", "subject_id,V,U,delta\na,1,2,1\nb,1.5,,0\nzed,1,2,1\n");
        let err = load_dataset(&l, &b, &schema1(), &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("zed"), "{err}");
    }

    #[test]
    fn unparsable_cell_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let l = write(dir.path(), "l.csv", "id,time,y,grp\na,0,abc,1\na,1,2,1\n");
        let b = write(dir.path(), "b.csv", "subject_id,V,U,delta\na,1,,0\n");
        match load_dataset(&l, &b, &schema1(), &LoadOptions::default()) {
            Err(IoError::Parse { line, column, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(column, "y");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn violations_reported_per_subject() {
        let dir = tempfile::tempdir().unwrap();
        let l = write(dir.path(), "l.csv", LONG);
        let b = write(dir.path(), "b.csv", "subject_id,V,U,delta\na,0,2,1\nb,1.5,,0\n");
        let err = load_dataset(&l, &b, &schema1(), &LoadOptions::default()).unwrap_err();
        match &err {
            IoError::Invalid(v) => assert!(v.iter().any(|x| x.subject_id.as_deref() == Some("a") && x.rule == "adjacency")),
            other => panic!("{other:?}"),
        }
        let opts = LoadOptions {
            snap_bracket: true,
            ..Default::default()
        };
        let d = load_dataset(&l, &b, &schema1(), &opts).unwrap();
        assert_eq!(d.subjects[0].bracket_v, 1.0);
    }

    #[test]
    fn preprocessing_filters() {
        let dir = tempfile::tempdir().unwrap();
        let l = write(dir.path(), "l.csv", "id,time,y,grp\na,0,1,1\na,1,2,1\nb,0,0.5,0\nb,1,0.5,0\nc,0,1,0\nc,1,1,0\nc,2,1,0\n");
        let b = write(dir.path(), "b.csv", "subject_id,V,U,delta\na,-1,0,1\nb,1,,0\nc,1,2,1\n");
        let opts = LoadOptions {
            exclude_first_visit_diagnoses: true,
            min_visits: Some(3),
            snap_bracket: false,
        };
        let d = load_dataset(&l, &b, &schema1(), &opts).unwrap();
        let ids: Vec<&str> = d.subjects.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, vec!["c"]);
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let sim = gen_dataset(&SimConfig::new(25, 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let dd = DataDir::new(dir.path());
        let schema = Schema::simulated(2);
        save_dataset(&sim.dataset, &schema, &dd.longitudinal(), &dd.brackets()).unwrap();
        let back = dd.load(&LoadOptions::default()).unwrap();
        assert_eq!(back, sim.dataset);
        let first = std::fs::read(dd.longitudinal()).unwrap();
        save_dataset(&back, &schema, &dd.longitudinal(), &dd.brackets()).unwrap();
        assert_eq!(first, std::fs::read(dd.longitudinal()).unwrap());
    }
}

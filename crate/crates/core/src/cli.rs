//! Batch experiment runner behind the `scatterlab` binary.
//!
//! A run reads a JSON [`ExperimentConfig`], validates all of it before
//! executing anything, runs the experiments in declared order and writes
//! `results.csv`, `results.json` and `details/<id>.json` into the output
//! directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::distributions::{DistributionSpec, MarginalSpec, Seed};
use crate::error::Error;
use crate::properties::{self, PropertyReport, Trial};
use crate::scatter::{calibrate_gaussian, Calibration, ScatterFamily, ScatterSpec};

pub mod exit {
    pub const OK: i32 = 0;
    pub const MISMATCH: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const RUNTIME: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("experiment error: {0}")]
    Experiment(String),
    #[error("no results.csv in {0}")]
    MissingResults(PathBuf),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingResults(_) => exit::CONFIG,
            CliError::Experiment(_) | CliError::Io(_) => exit::RUNTIME,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    /// Gaussian calibration of the functional in the dimensions listed in `p`.
    Calibrate,
    AffineEquivariance,
    Proportionality,
    Additivity,
    IndependenceProperty,
    JointIndependence,
    FullAffineEquivariance,
    SubvectorConsistency,
    NormalContinuity,
    FaeExpansion,
    SumExpansion,
}

impl Check {
    pub fn property_name(self) -> &'static str {
        match self {
            Check::Calibrate => "calibration",
            Check::AffineEquivariance => "affine_equivariance",
            Check::Proportionality => "proportionality",
            Check::Additivity => "additivity",
            Check::IndependenceProperty => "independence_property",
            Check::JointIndependence => "joint_independence",
            Check::FullAffineEquivariance => "full_affine_equivariance",
            Check::SubvectorConsistency => "subvector_consistency",
            Check::NormalContinuity => "normal_continuity",
            Check::FaeExpansion => "fae_expansion",
            Check::SumExpansion => "sum_expansion",
        }
    }

    /// Optional fields that must be present, and the ones that may be.
    fn fields(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            Check::Calibrate => (&["p"], &[]),
            Check::AffineEquivariance | Check::Proportionality | Check::JointIndependence | Check::SubvectorConsistency => {
                (&["distribution"], &[])
            }
            Check::Additivity => (&["distribution", "secondary"], &[]),
            Check::IndependenceProperty => (&["distribution"], &["pairs"]),
            Check::FullAffineEquivariance => (&["distribution", "k"], &[]),
            Check::NormalContinuity => (&["distribution", "n_grid"], &[]),
            Check::FaeExpansion => (&["marginal", "terms"], &[]),
            Check::SumExpansion => (&["distribution", "p_total"], &[]),
        }
    }

    fn min_n(self) -> usize {
        match self {
            Check::Calibrate | Check::Additivity | Check::NormalContinuity | Check::FaeExpansion => 1000,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expect {
    Pass,
    Fail,
}

impl Expect {
    pub fn as_str(self) -> &'static str {
        match self {
            Expect::Pass => "pass",
            Expect::Fail => "fail",
        }
    }

    fn matches(self, pass: bool) -> bool {
        pass == (self == Expect::Pass)
    }
}

/// One experiment. Which optional fields apply depends on `check`; fields that
/// do not apply are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub id: String,
    pub check: Check,
    pub functional: ScatterSpec,
    /// Id of an earlier `calibrate` experiment whose constants are applied to
    /// the uncalibrated part of `functional`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<DistributionSpec>,
    /// Second summand of an additivity check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secondary: Option<DistributionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_grid: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginal: Option<MarginalSpec>,
    /// Number of coordinates in the expansion of `fae_expansion`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_total: Option<usize>,
    /// Dimensions to calibrate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<usize>>,
    /// Sample size; the number of draws `m` for continuity and expansion checks.
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub threshold: f64,
    pub expect: Expect,
    /// Estimator error kind (e.g. `SingularScatter`) this experiment is
    /// expected to run into; it is then recorded as a failure, not an abort.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_error: Option<String>,
}

impl Experiment {
    fn present_fields(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let mut note = |name, present: bool| {
            if present {
                out.push(name)
            }
        };
        note("distribution", self.distribution.is_some());
        note("secondary", self.secondary.is_some());
        note("pairs", self.pairs.is_some());
        note("k", self.k.is_some());
        note("n_grid", self.n_grid.is_some());
        note("marginal", self.marginal.is_some());
        note("terms", self.terms.is_some());
        note("p_total", self.p_total.is_some());
        note("p", self.p.is_some());
        out
    }

    fn trial(&self) -> Trial {
        Trial::new(self.n, self.replicates, Seed(self.seed), self.threshold)
    }

    /// Dimensions in which the functional is evaluated.
    fn dims(&self) -> BTreeSet<usize> {
        let p = self.distribution.as_ref().and_then(|d| d.dim().ok()).unwrap_or(0);
        let dims: Vec<usize> = match self.check {
            Check::Calibrate => vec![],
            Check::FullAffineEquivariance => vec![self.k.unwrap_or(0), p],
            Check::SubvectorConsistency => vec![1, 2, p],
            Check::FaeExpansion => vec![1, 2],
            Check::SumExpansion => vec![2, self.p_total.unwrap_or(0)],
            _ => vec![p],
        };
        dims.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub experiments: Vec<Experiment>,
}

/// The innermost part of `spec` that has neither a stored nor a closed-form
/// calibration, if any.
fn uncalibrated_part(spec: &ScatterSpec) -> Option<&ScatterSpec> {
    if spec.calibration.is_none() && spec.analytic_calibration(1).is_none() {
        return Some(spec);
    }
    match &spec.family {
        ScatterFamily::Symmetrized { inner, .. } => uncalibrated_part(inner),
        _ => None,
    }
}

fn apply_calibration(spec: &ScatterSpec, calibration: &Calibration) -> ScatterSpec {
    if spec.calibration.is_none() && spec.analytic_calibration(1).is_none() {
        return spec.clone().with_calibration(calibration.clone());
    }
    let mut out = spec.clone();
    if let ScatterFamily::Symmetrized { inner, .. } = &mut out.family {
        **inner = apply_calibration(inner, calibration);
    }
    out
}

fn stripped(spec: &ScatterSpec) -> ScatterSpec {
    ScatterSpec { family: spec.family.clone(), calibration: None }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) && !id.starts_with('.')
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks everything that can be checked without running an estimator.
    pub fn validate(&self) -> CliResult<()> {
        let cfg = |id: &str, msg: String| CliError::Config(format!("experiment {id:?}: {msg}"));
        if self.experiments.is_empty() {
            return Err(CliError::Config("config lists no experiments".into()));
        }
        let mut seen: HashMap<&str, &Experiment> = HashMap::new();
        for e in &self.experiments {
            let id = e.id.as_str();
            if !valid_id(id) {
                return Err(cfg(id, "ids may only contain ASCII letters, digits, '-', '_' and '.'".into()));
            }
            if seen.contains_key(id) {
                return Err(cfg(id, "duplicate id".into()));
            }
            e.functional.validate().map_err(|err| cfg(id, err.to_string()))?;
            let (required, optional) = e.check.fields();
            for f in e.present_fields() {
                if !required.contains(&f) && !optional.contains(&f) {
                    return Err(cfg(id, format!("field `{f}` does not apply to check {}", e.check.property_name())));
                }
            }
            for f in required {
                if !e.present_fields().contains(f) {
                    return Err(cfg(id, format!("check {} requires `{f}`", e.check.property_name())));
                }
            }
            if e.replicates == 0 || !(e.threshold >= 0.0 && e.threshold.is_finite()) {
                return Err(cfg(id, "need replicates >= 1 and a finite non-negative threshold".into()));
            }
            if e.n < e.check.min_n() {
                return Err(cfg(id, format!("check {} needs n >= {}", e.check.property_name(), e.check.min_n())));
            }
            let p = match &e.distribution {
                Some(d) => Some(d.validate().map_err(|err| cfg(id, err.to_string()))?),
                None => None,
            };
            if let Some(p) = p {
                if e.n <= p {
                    return Err(cfg(id, format!("need n > p = {p}")));
                }
            }
            self.validate_check(e, p).map_err(|m| cfg(id, m))?;
            self.validate_calibration(e, &seen).map_err(|m| cfg(id, m))?;
            seen.insert(id, e);
        }
        Ok(())
    }

    fn validate_check(&self, e: &Experiment, p: Option<usize>) -> std::result::Result<(), String> {
        let p = p.unwrap_or(0);
        match e.check {
            Check::Calibrate => {
                let dims = e.p.as_deref().unwrap_or_default();
                if dims.is_empty() || dims.contains(&0) {
                    return Err("calibrate needs a non-empty list of positive dimensions in `p`".into());
                }
                if e.replicates < 3 {
                    return Err("calibrate needs replicates >= 3".into());
                }
                if e.calibration_from.is_some() {
                    return Err("a calibrate step cannot take `calibration_from`".into());
                }
            }
            Check::Additivity => {
                let q = e.secondary.as_ref().map(|d| d.validate()).transpose().map_err(|err| err.to_string())?;
                if q != Some(p) {
                    return Err(format!("secondary distribution must have dimension {p}"));
                }
            }
            Check::IndependenceProperty => {
                let dist = e.distribution.as_ref().expect("required field");
                if let Some(pairs) = &e.pairs {
                    if pairs.is_empty() {
                        return Err("`pairs` must not be empty".into());
                    }
                    for &(j, k) in pairs {
                        if j >= p || k >= p || j == k {
                            return Err(format!("pair ({j}, {k}) is out of range for p = {p}"));
                        }
                        if !dist.certifies_independent(j, k).map_err(|err| err.to_string())? {
                            return Err(Error::MissingCertificate(j, k).to_string());
                        }
                    }
                } else {
                    let blocks = dist.independence_blocks().map_err(|err| err.to_string())?;
                    if blocks.iter().collect::<BTreeSet<_>>().len() < 2 {
                        return Err("distribution certifies no independent pair".into());
                    }
                }
            }
            Check::JointIndependence => {
                let dist = e.distribution.as_ref().expect("required field");
                if !dist.is_fully_independent().map_err(|err| err.to_string())? {
                    return Err("distribution does not certify mutually independent components".into());
                }
            }
            Check::FullAffineEquivariance => {
                let k = e.k.unwrap_or(0);
                if k == 0 || k >= p {
                    return Err(format!("need 1 <= k < p, got k = {k}, p = {p}"));
                }
            }
            Check::SubvectorConsistency if p < 2 => return Err("subvector consistency needs p >= 2".into()),
            Check::NormalContinuity => {
                let grid = e.n_grid.as_deref().unwrap_or_default();
                if grid.is_empty() || grid.contains(&0) || grid.windows(2).any(|w| w[0] >= w[1]) {
                    return Err("n_grid must be non-empty, positive and strictly ascending".into());
                }
            }
            Check::FaeExpansion => {
                e.marginal.as_ref().expect("required field").validate().map_err(|err| err.to_string())?;
                if e.terms == Some(0) {
                    return Err("terms must be positive".into());
                }
            }
            Check::SumExpansion => {
                if p != 2 {
                    return Err(format!("sum expansion needs a bivariate distribution, got p = {p}"));
                }
                let total = e.p_total.unwrap_or(0);
                if total < 2 || e.n <= total {
                    return Err(format!("need 2 <= p_total < n, got p_total = {total}"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn validate_calibration(&self, e: &Experiment, seen: &HashMap<&str, &Experiment>) -> std::result::Result<(), String> {
        if e.check == Check::Calibrate {
            return Ok(());
        }
        let missing = uncalibrated_part(&e.functional);
        match (&e.calibration_from, missing) {
            (None, None) => Ok(()),
            (None, Some(part)) => Err(format!(
                "functional {} has no calibration; give `calibration` or `calibration_from`",
                part.label()
            )),
            (Some(_), None) => Err("`calibration_from` given but the functional is already calibrated".into()),
            (Some(from), Some(part)) => {
                let source = seen
                    .get(from.as_str())
                    .ok_or(format!("`calibration_from` {from:?} does not name an earlier experiment"))?;
                if source.check != Check::Calibrate {
                    return Err(format!("`calibration_from` {from:?} is not a calibrate step"));
                }
                if stripped(&source.functional) != stripped(part) {
                    return Err(format!("`calibration_from` {from:?} calibrates a different functional"));
                }
                let have: BTreeSet<usize> = source.p.iter().flatten().copied().collect();
                let need = e.dims();
                if !need.is_subset(&have) {
                    let lacking: Vec<_> = need.difference(&have).collect();
                    return Err(format!("`calibration_from` {from:?} does not cover dimensions {lacking:?}"));
                }
                Ok(())
            }
        }
    }
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub id: String,
    pub property: String,
    pub family: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    pub expected: Expect,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub ms: u64,
}

impl ResultRow {
    pub fn as_expected(&self) -> bool {
        self.expected.matches(self.pass)
    }
}

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSON: &str = "results.json";
pub const DETAILS_DIR: &str = "details";

pub fn render_results(rows: &[ResultRow]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record(["id", "property", "family", "statistic", "threshold", "pass", "expected", "n", "replicates", "seed", "ms"])
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Io(e.to_string()))
}

pub fn parse_results(text: &str) -> CliResult<Vec<ResultRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<ResultRow>, _>>()
        .map_err(|e| CliError::Io(format!("results.csv: {e}")))
}

/// Outcome of one executed experiment.
#[derive(Debug, Clone)]
pub struct Executed {
    pub row: ResultRow,
    pub details: Value,
}

/// Everything a run produced, in declared order.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub executed: Vec<Executed>,
    /// Set when an experiment failed in a way its config did not anticipate.
    pub aborted: Option<String>,
}

impl RunSummary {
    pub fn mismatches(&self) -> Vec<&str> {
        self.executed.iter().filter(|e| !e.row.as_expected()).map(|e| e.row.id.as_str()).collect()
    }

    pub fn exit_code(&self) -> i32 {
        if self.aborted.is_some() {
            exit::RUNTIME
        } else if self.mismatches().is_empty() {
            exit::OK
        } else {
            exit::MISMATCH
        }
    }
}

fn report_value(report: &PropertyReport) -> Value {
    serde_json::to_value(report).expect("reports serialize")
}

fn run_check(e: &Experiment, spec: &ScatterSpec) -> crate::Result<PropertyReport> {
    let trial = e.trial();
    let dist = || e.distribution.as_ref().expect("validated");
    match e.check {
        Check::Calibrate => unreachable!("calibrate steps are handled separately"),
        Check::AffineEquivariance => properties::equivariance_check(spec, dist(), &trial),
        Check::Proportionality => properties::proportionality_check(spec, dist(), &trial),
        Check::Additivity => properties::additivity_check(spec, dist(), e.secondary.as_ref().expect("validated"), &trial),
        Check::IndependenceProperty => properties::independence_check(spec, dist(), e.pairs.as_deref(), &trial),
        Check::JointIndependence => properties::joint_independence_check(spec, dist(), &trial),
        Check::FullAffineEquivariance => properties::full_equivariance_check(spec, dist(), e.k.expect("validated"), &trial),
        Check::SubvectorConsistency => properties::subvector_consistency_check(spec, dist(), &trial),
        Check::NormalContinuity => {
            properties::normal_continuity_check(spec, dist(), e.n_grid.as_deref().expect("validated"), &trial)
        }
        Check::FaeExpansion => properties::fae_expansion_check(
            spec,
            e.marginal.as_ref().expect("validated"),
            e.terms.expect("validated"),
            &trial,
        ),
        Check::SumExpansion => properties::sum_expansion_check(spec, dist(), e.p_total.expect("validated"), &trial),
    }
}

/// Runs one calibrate step; the statistic is the largest relative standard
/// error over the requested dimensions.
fn run_calibration(e: &Experiment) -> crate::Result<(f64, Calibration, Value)> {
    let mut constants = BTreeMap::new();
    let mut per_dim = BTreeMap::new();
    let mut worst = 0.0f64;
    for &p in e.p.as_deref().expect("validated") {
        let cal = calibrate_gaussian(&e.functional, p, e.n, e.replicates, Seed(e.seed).child(p as u64))?;
        worst = worst.max(cal.standard_error / cal.constant);
        constants.insert(p, cal.constant);
        per_dim.insert(p.to_string(), json!(cal));
    }
    let calibration = Calibration::PerDimension(constants);
    let details = json!({ "calibration": calibration, "per_dimension": per_dim });
    Ok((worst, calibration, details))
}

/// Executes a validated config. Progress lines go to `log`.
pub fn execute(config: &ExperimentConfig, log: &mut dyn Write) -> RunSummary {
    let mut summary = RunSummary::default();
    let mut calibrations: HashMap<String, Calibration> = HashMap::new();
    for e in &config.experiments {
        let start = Instant::now();
        let spec = match &e.calibration_from {
            Some(from) => apply_calibration(&e.functional, &calibrations[from]),
            None => e.functional.clone(),
        };
        let outcome: std::result::Result<(f64, Value), String> = if e.check == Check::Calibrate {
            run_calibration(e)
                .map(|(stat, cal, details)| {
                    calibrations.insert(e.id.clone(), cal);
                    (stat, details)
                })
                .map_err(|err| err.to_string())
        } else {
            match run_check(e, &spec) {
                Ok(report) => match report.error_kind() {
                    Some(kind) if e.expect_error.as_deref() != Some(kind) => {
                        Err(format!("{kind}: {}", report.details.get("error").and_then(Value::as_str).unwrap_or("")))
                    }
                    _ => Ok((report.statistic, report_value(&report))),
                },
                Err(err) => Err(err.to_string()),
            }
        };
        let ms = start.elapsed().as_millis() as u64;
        let (statistic, details) = match outcome {
            Ok(v) => v,
            Err(msg) => {
                let msg = format!("experiment {:?}: {msg}", e.id);
                let _ = writeln!(log, "[error] {msg}");
                summary.aborted = Some(msg);
                return summary;
            }
        };
        let row = ResultRow {
            id: e.id.clone(),
            property: e.check.property_name().into(),
            family: spec.label(),
            statistic,
            threshold: e.threshold,
            pass: statistic <= e.threshold,
            expected: e.expect,
            n: e.n,
            replicates: e.replicates,
            seed: e.seed,
            ms,
        };
        let tag = if row.as_expected() { "ok" } else { "MISMATCH" };
        let _ = writeln!(
            log,
            "[{tag}] {} {} {}: statistic {:.6e} threshold {:.1e} ({}, expected {}) {} ms",
            row.id,
            row.property,
            row.family,
            row.statistic,
            row.threshold,
            if row.pass { "pass" } else { "fail" },
            row.expected.as_str(),
            ms
        );
        let details = json!({ "experiment": e, "functional": spec, "row": row, "result": details });
        summary.executed.push(Executed { row, details });
    }
    summary
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Writes `results.csv`, `results.json` and the per-experiment detail files.
pub fn write_outputs(summary: &RunSummary, out: &Path) -> CliResult<()> {
    let details_dir = out.join(DETAILS_DIR);
    fs::create_dir_all(&details_dir).map_err(|e| io_err(&details_dir, e))?;
    let rows: Vec<ResultRow> = summary.executed.iter().map(|e| e.row.clone()).collect();
    write_file(&out.join(RESULTS_CSV), &render_results(&rows)?)?;
    let json = json!({
        "results": rows,
        "mismatches": summary.mismatches(),
        "aborted": summary.aborted,
    });
    write_file(&out.join(RESULTS_JSON), &serde_json::to_string_pretty(&json).expect("json"))?;
    for e in &summary.executed {
        let path = details_dir.join(format!("{}.json", e.row.id));
        write_file(&path, &serde_json::to_string_pretty(&e.details).expect("json"))?;
    }
    Ok(())
}

/// `scatterlab run`: returns the exit code.
pub fn run(config_path: &Path, out: &Path, log: &mut dyn Write) -> i32 {
    let config = match ExperimentConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(log, "{e}");
            return e.exit_code();
        }
    };
    let summary = execute(&config, log);
    if let Err(e) = write_outputs(&summary, out) {
        let _ = writeln!(log, "{e}");
        return e.exit_code();
    }
    let mismatches = summary.mismatches();
    let _ = writeln!(
        log,
        "{} experiments, {} mismatches{}",
        summary.executed.len(),
        mismatches.len(),
        if summary.aborted.is_some() { ", aborted" } else { "" }
    );
    summary.exit_code()
}

/// `scatterlab calibrate`: the constant, its standard error and the spec with
/// the constant stored for dimension `p`.
pub fn calibrate(spec_text: &str, p: usize, n: usize, replicates: usize, seed: u64) -> CliResult<(f64, f64, ScatterSpec)> {
    let spec: ScatterSpec = serde_json::from_str(spec_text).map_err(|e| CliError::Config(e.to_string()))?;
    if p == 0 || n < 1000 || replicates < 3 {
        return Err(CliError::Config(format!("need p >= 1, n >= 1000 and replicates >= 3 (got {p}, {n}, {replicates})")));
    }
    let raw = stripped(&spec);
    let cal = calibrate_gaussian(&raw, p, n, replicates, Seed(seed)).map_err(|e| CliError::Experiment(e.to_string()))?;
    let updated = spec.with_dimension_calibration(p, cal.constant);
    Ok((cal.constant, cal.standard_error, updated))
}

/// Convergence data of one normal-continuity experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub error: f64,
    pub seed: u64,
}

/// `scatterlab report`: the rendered table and the convergence CSVs written.
pub fn report(dir: &Path) -> CliResult<(String, Vec<PathBuf>)> {
    let csv_path = dir.join(RESULTS_CSV);
    if !csv_path.is_file() {
        return Err(CliError::MissingResults(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    let rows = parse_results(&text)?;
    let table = render_table(&rows);
    let mut written = Vec::new();
    for row in rows.iter().filter(|r| r.property == Check::NormalContinuity.property_name()) {
        let detail_path = dir.join(DETAILS_DIR).join(format!("{}.json", row.id));
        let detail: Value = fs::read_to_string(&detail_path)
            .map_err(|e| io_err(&detail_path, e))
            .and_then(|t| serde_json::from_str(&t).map_err(|e| io_err(&detail_path, e)))?;
        let curve: Vec<properties::ContinuityPoint> = detail
            .pointer("/result/details/curve")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| io_err(&detail_path, e))?
            .unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        for point in curve {
            w.serialize(ConvergenceRow { n: point.n, error: point.error, seed: row.seed })
                .map_err(|e| CliError::Io(e.to_string()))?;
        }
        let path = dir.join(format!("convergence_{}.csv", row.id));
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    Ok((table, written))
}

/// Fixed-width table: id, property, functional, statistic, threshold, verdict.
pub fn render_table(rows: &[ResultRow]) -> String {
    let header = ["id", "property", "functional", "statistic", "threshold", "verdict"];
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.id.clone(),
                r.property.clone(),
                r.family.clone(),
                format!("{:.4e}", r.statistic),
                format!("{:.1e}", r.threshold),
                if r.as_expected() { "as-expected".into() } else { "MISMATCH".into() },
            ]
        })
        .collect();
    let widths: Vec<usize> =
        (0..6).map(|c| cells.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0)).collect();
    let line = |cols: &[String]| -> String {
        cols.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
    };
    let mut out = line(&header.map(String::from));
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in &cells {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn experiment(check: &str, extra: &str) -> String {
        format!(
            r#"{{"id": "e1", "check": "{check}", "functional": {{"family": "cov"}}, {extra}
               "n": 2000, "replicates": 2, "seed": 1, "threshold": 0.1, "expect": "pass"}}"#
        )
    }

    fn config(experiments: &[String]) -> String {
        format!(r#"{{"experiments": [{}]}}"#, experiments.join(","))
    }

    fn config_error(text: &str) -> String {
        match ExperimentConfig::from_json(text) {
            Err(CliError::Config(msg)) => msg,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    const NORMAL2: &str = r#""distribution": {"kind": "standard_normal", "p": 2},"#;

    #[test]
    fn minimal_config_parses() {
        let c = ExperimentConfig::from_json(&config(&[experiment("affine_equivariance", NORMAL2)])).unwrap();
        assert_eq!(c.experiments[0].check, Check::AffineEquivariance);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let e = experiment("affine_equivariance", NORMAL2);
        assert!(config_error(&config(&[e.clone(), e])).contains("duplicate id"));
    }

    #[test]
    fn unknown_and_misplaced_keys_rejected() {
        assert!(config_error(&config(&[experiment("affine_equivariance", &format!("{NORMAL2} \"colour\": 1,"))]))
            .contains("colour"));
        assert!(config_error(&config(&[experiment("affine_equivariance", &format!("{NORMAL2} \"k\": 1,"))]))
            .contains("does not apply"));
        assert!(config_error(&config(&[experiment("full_affine_equivariance", NORMAL2)])).contains("requires `k`"));
        assert!(config_error(r#"{"experiments": [], "extra": 1}"#).contains("extra"));
    }

    #[test]
    fn uncalibrated_functional_rejected() {
        let tm = r#"{"family": "m_scatter", "weight": {"kind": "student_t", "nu": 3}}"#;
        let text = config(&[experiment("affine_equivariance", NORMAL2).replace(r#"{"family": "cov"}"#, tm)]);
        assert!(config_error(&text).contains("no calibration"));

        let cal = format!(
            r#"{{"id": "cal", "check": "calibrate", "functional": {tm}, "p": [1], "n": 1000, "replicates": 3,
                "seed": 1, "threshold": 0.1, "expect": "pass"}}"#
        );
        let uses = experiment("affine_equivariance", &format!("{NORMAL2} \"calibration_from\": \"cal\","))
            .replace(r#"{"family": "cov"}"#, tm);
        assert!(config_error(&config(&[cal.clone(), uses.clone()])).contains("does not cover dimensions [2]"));
        assert!(config_error(&config(&[uses.clone(), cal.clone()])).contains("earlier experiment"));
        let ok = config(&[cal.replace(r#""p": [1]"#, r#""p": [2]"#), uses]);
        ExperimentConfig::from_json(&ok).unwrap();
    }

    #[test]
    fn calibration_reaches_the_inner_functional() {
        let tm = ScatterSpec::t_m(3.0);
        let sym = ScatterSpec::symmetrized(tm.clone());
        assert_eq!(uncalibrated_part(&sym), Some(&tm));
        let applied = apply_calibration(&sym, &Calibration::Uniform(0.7));
        assert_eq!(applied.calibration, None);
        assert!(uncalibrated_part(&applied).is_none());
        assert!(uncalibrated_part(&ScatterSpec::cov4()).is_none());
    }

    #[test]
    fn invalid_ids_rejected() {
        let e = experiment("affine_equivariance", NORMAL2).replace(r#""id": "e1""#, r#""id": "../x""#);
        assert!(config_error(&config(&[e])).contains("ids may only contain"));
    }

    #[test]
    fn results_round_trip() {
        let rows = vec![
            ResultRow {
                id: "a".into(),
                property: "additivity".into(),
                family: "symmetrized(m_scatter)".into(),
                statistic: 0.123456789012345,
                threshold: 0.08,
                pass: false,
                expected: Expect::Fail,
                n: 20000,
                replicates: 5,
                seed: u64::MAX,
                ms: 12,
            },
            ResultRow {
                id: "b".into(),
                property: "affine_equivariance".into(),
                family: "cov".into(),
                statistic: 1.5e-16,
                threshold: 1e-10,
                pass: true,
                expected: Expect::Pass,
                n: 10,
                replicates: 1,
                seed: 0,
                ms: 0,
            },
        ];
        let text = render_results(&rows).unwrap();
        assert!(text.starts_with("id,property,family,statistic,threshold,pass,expected,n,replicates,seed,ms\n"));
        assert_eq!(parse_results(&text).unwrap(), rows);
        assert_eq!(render_results(&parse_results(&text).unwrap()).unwrap(), text);
    }

    #[test]
    fn table_verdicts() {
        let mut row = ResultRow {
            id: "x".into(),
            property: "additivity".into(),
            family: "cov".into(),
            statistic: 0.01,
            threshold: 0.08,
            pass: true,
            expected: Expect::Pass,
            n: 1,
            replicates: 1,
            seed: 1,
            ms: 1,
        };
        assert!(render_table(&[row.clone()]).contains("as-expected"));
        row.expected = Expect::Fail;
        assert!(render_table(&[row]).contains("MISMATCH"));
    }

    #[test]
    fn unexpected_estimator_error_aborts() {
        // a rank-one distribution makes every covariance estimate singular
        let degenerate = r#""distribution": {"kind": "affine", "A": [[1.0], [1.0]], "b": [0.0, 0.0],
                              "inner": {"kind": "standard_normal", "p": 1}},"#;
        let text = config(&[experiment("joint_independence", degenerate)]);
        // not certified independent, so this is caught before running
        assert!(config_error(&text).contains("mutually independent"));

        let text = config(&[experiment("affine_equivariance", degenerate)]);
        let c = ExperimentConfig::from_json(&text).unwrap();
        let summary = execute(&c, &mut Vec::new());
        assert_eq!(summary.exit_code(), exit::RUNTIME);
        assert!(summary.aborted.as_deref().unwrap().contains("SingularScatter"));

        let text = text.replace(r#""expect": "pass""#, r#""expect": "fail", "expect_error": "SingularScatter""#);
        let summary = execute(&ExperimentConfig::from_json(&text).unwrap(), &mut Vec::new());
        assert_eq!(summary.exit_code(), exit::OK);
        assert!(summary.executed[0].row.statistic.is_nan());
    }

    #[test]
    fn calibrate_command() {
        let (c, se, spec) = calibrate(r#"{"family": "cov"}"#, 2, 1000, 3, 5).unwrap();
        assert!((c - 1.0).abs() < 0.1 && se < 0.05);
        assert_eq!(spec.calibration_for(2), c);
        assert!(matches!(calibrate(r#"{"family": "nope"}"#, 2, 1000, 3, 5), Err(CliError::Config(_))));
        assert!(matches!(calibrate(r#"{"family": "cov"}"#, 2, 10, 3, 5), Err(CliError::Config(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::MissingResults(PathBuf::new()).exit_code(), 2);
        assert_eq!(CliError::Experiment(String::new()).exit_code(), 3);
    }
}

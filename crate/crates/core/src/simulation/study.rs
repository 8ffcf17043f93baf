//! Replication study: simulate, estimate and compare with the enumerated
//! truth over a grid of settings, covariate modes and sample sizes.
//!
//! Every replication writes one record per path effect to an append-only
//! CSV. Records are written a whole cell at a time, sorted by replication,
//! so the file is a deterministic function of the configuration and an
//! interrupted run can be resumed. Replications that fail are logged to a
//! separate failures CSV and skipped; a cell fails when more than
//! [`StudyConfig::max_failure_rate`] of its replications do.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use super::scm::{simulate_observed, CovariateMode, Setting};
use super::truth::{truth_by_enumeration, Truth};
use crate::error::{Error, Result};
use crate::estimator::{estimate, EstimatorConfig};
use crate::identification::PathId;

pub const DEFAULT_TRUTH_MC: usize = 2_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub settings: Vec<Setting>,
    pub covariate_modes: Vec<CovariateMode>,
    pub ns: Vec<usize>,
    pub reps: usize,
    pub base_seed: u64,
    /// Covariate draws for the enumerated truths.
    pub truth_mc: usize,
    pub truth_seed: u64,
    pub estimator: EstimatorConfig,
    /// Worker threads for replications; `0` uses all available cores.
    pub threads: usize,
    pub max_failure_rate: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            settings: Setting::STUDY.to_vec(),
            covariate_modes: vec![CovariateMode::X, CovariateMode::W],
            ns: vec![500, 1000, 2000, 5000],
            reps: 500,
            base_seed: 20240101,
            truth_mc: DEFAULT_TRUTH_MC,
            truth_seed: 1,
            estimator: EstimatorConfig::default(),
            threads: 0,
            max_failure_rate: 0.05,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 2 {
            return Err(Error::Argument(format!("need at least 2 replications, got {}", self.reps)));
        }
        if self.settings.is_empty() || self.covariate_modes.is_empty() || self.ns.is_empty() {
            return Err(Error::Argument(
                "settings, covariate modes and sample sizes must be non-empty".into(),
            ));
        }
        if let Some(n) = self.ns.iter().find(|&&n| n < 2) {
            return Err(Error::Argument(format!("sample size {n} is too small")));
        }
        if !(0.0..1.0).contains(&self.max_failure_rate) {
            return Err(Error::Argument("max_failure_rate must lie in [0, 1)".into()));
        }
        self.estimator.validate()
    }

    fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &setting in &self.settings {
            for &mode in &self.covariate_modes {
                for &n in &self.ns {
                    cells.push(Cell { setting, mode, n });
                }
            }
        }
        cells
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Cell {
    setting: Setting,
    mode: CovariateMode,
    n: usize,
}

/// Seed of one replication. It does not depend on the covariate mode, so
/// both modes analyse the same simulated samples.
pub fn replication_seed(base_seed: u64, setting: Setting, n: usize, rep: usize) -> u64 {
    derive_seed(&[
        b"replication",
        &base_seed.to_le_bytes(),
        setting.name().as_bytes(),
        &(n as u64).to_le_bytes(),
        &(rep as u64).to_le_bytes(),
    ])
}

/// One path effect of one replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub setting: String,
    pub covariate_mode: String,
    pub n: usize,
    pub rep: usize,
    pub path: String,
    pub truth: f64,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub covered: u8,
    pub plugin_estimate: f64,
}

pub const RECORD_COLUMNS: [&str; 12] = [
    "setting",
    "covariate_mode",
    "n",
    "rep",
    "path",
    "truth",
    "estimate",
    "se",
    "ci_lo",
    "ci_hi",
    "covered",
    "plugin_estimate",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub setting: String,
    pub covariate_mode: String,
    pub n: usize,
    pub rep: usize,
    pub error: String,
}

/// Bias, √n-bias, SD and CI coverage of one path in one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub setting: String,
    pub covariate_mode: String,
    pub n: usize,
    pub path: String,
    pub reps: usize,
    pub bias: f64,
    pub root_n_bias: f64,
    pub sd: f64,
    pub coverage: f64,
}

/// Long-format metrics for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub setting: String,
    pub covariate_mode: String,
    pub n: usize,
    pub path: String,
    pub metric: String,
    pub value: f64,
}

/// Aggregated study results.
pub type StudyMetrics = Vec<MetricRow>;

#[derive(Clone, Debug)]
pub struct StudyOutput {
    pub metrics: StudyMetrics,
    pub truths: Vec<(Setting, Truth)>,
    pub new_replications: usize,
    pub failures: usize,
}

/// Output locations of a study.
#[derive(Clone, Debug)]
pub struct StudyFiles {
    pub records: PathBuf,
    pub failures: PathBuf,
    /// Keep existing records and run only the missing replications.
    pub resume: bool,
}

impl StudyFiles {
    /// Failures go next to the records as `<stem>.failures.csv`.
    pub fn new(records: impl Into<PathBuf>, resume: bool) -> Self {
        let records = records.into();
        let stem = records
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "records".into());
        let failures = records.with_file_name(format!("{stem}.failures.csv"));
        StudyFiles {
            records,
            failures,
            resume,
        }
    }
}

fn open_append(path: &Path, fresh: bool) -> Result<(File, bool)> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    Ok((file, empty))
}

fn append_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let (file, empty) = open_append(path, false)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
    if empty {
        w.write_record(header)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

const FAILURE_COLUMNS: [&str; 5] = ["setting", "covariate_mode", "n", "rep", "error"];

/// Runs (or resumes) a study and aggregates its records.
pub fn run_study(cfg: &StudyConfig, files: &StudyFiles) -> Result<StudyOutput> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Study(format!("cannot start worker threads: {e}")))?;
    pool.install(|| run_in_pool(cfg, files))
}

fn run_in_pool(cfg: &StudyConfig, files: &StudyFiles) -> Result<StudyOutput> {
    let mut done: BTreeSet<(String, String, usize, usize)> = BTreeSet::new();
    let mut failed: BTreeMap<(String, String, usize), BTreeSet<usize>> = BTreeMap::new();
    let resuming = files.resume && files.records.exists();
    if resuming {
        for r in read_records(&files.records)? {
            done.insert((r.setting, r.covariate_mode, r.n, r.rep));
        }
        if files.failures.exists() {
            for f in read_failures(&files.failures)? {
                failed.entry((f.setting, f.covariate_mode, f.n)).or_default().insert(f.rep);
            }
        }
    } else {
        open_append(&files.records, true)?;
        open_append(&files.failures, true)?;
    }

    let mut truths = Vec::new();
    for &setting in &cfg.settings {
        log::info!("enumerating truth for {}", setting.name());
        truths.push((setting, truth_by_enumeration(&setting.config(), cfg.truth_mc, cfg.truth_seed)?));
    }
    let truth_of = |s: Setting| truths.iter().find(|(t, _)| *t == s).map(|(_, t)| *t).expect("truth computed");

    let mut new_replications = 0;
    let mut failures = 0;
    for cell in cfg.cells() {
        let (sname, mname) = (cell.setting.name().to_string(), cell.mode.name().to_string());
        let key = (sname.clone(), mname.clone(), cell.n);
        let prior_failed = failed.get(&key).cloned().unwrap_or_default();
        let pending: Vec<usize> = (0..cfg.reps)
            .filter(|&r| {
                !done.contains(&(sname.clone(), mname.clone(), cell.n, r)) && !prior_failed.contains(&r)
            })
            .collect();
        if pending.is_empty() {
            check_failures(cfg, cell, prior_failed.len())?;
            continue;
        }
        log::info!("{} / {} / n={}: {} replications", sname, mname, cell.n, pending.len());
        let truth = truth_of(cell.setting);
        let scm = cell.setting.config().with_mode(cell.mode);
        let results: Vec<(usize, Result<Vec<Record>>)> = pending
            .par_iter()
            .map(|&rep| {
                let seed = replication_seed(cfg.base_seed, cell.setting, cell.n, rep);
                let outcome = simulate_observed(&scm, cell.n, seed).and_then(|data| {
                    let est = estimate(&data, &EstimatorConfig { seed, ..cfg.estimator.clone() })?;
                    Ok(PathId::ALL
                        .iter()
                        .map(|&p| {
                            let inf = est.path(p);
                            let t = truth.effects.get(p);
                            Record {
                                setting: sname.clone(),
                                covariate_mode: mname.clone(),
                                n: cell.n,
                                rep,
                                path: p.key().to_string(),
                                truth: t,
                                estimate: inf.estimate,
                                se: inf.se,
                                ci_lo: inf.ci_lo,
                                ci_hi: inf.ci_hi,
                                covered: inf.covers(t) as u8,
                                plugin_estimate: inf.plugin,
                            }
                        })
                        .collect())
                });
                (rep, outcome)
            })
            .collect();
        let mut records = Vec::new();
        let mut cell_failures = Vec::new();
        for (rep, outcome) in results {
            match outcome {
                Ok(rs) => records.extend(rs),
                Err(e) => {
                    log::warn!("{sname} / {mname} / n={} rep {rep} failed: {e}", cell.n);
                    cell_failures.push(Failure {
                        setting: sname.clone(),
                        covariate_mode: mname.clone(),
                        n: cell.n,
                        rep,
                        error: e.to_string(),
                    });
                }
            }
        }
        append_rows(&files.records, &records, &RECORD_COLUMNS)?;
        if !cell_failures.is_empty() {
            append_rows(&files.failures, &cell_failures, &FAILURE_COLUMNS)?;
        }
        new_replications += pending.len();
        failures += cell_failures.len();
        check_failures(cfg, cell, prior_failed.len() + cell_failures.len())?;
    }

    let wanted: BTreeSet<(String, String, usize)> = cfg
        .cells()
        .iter()
        .map(|c| (c.setting.name().to_string(), c.mode.name().to_string(), c.n))
        .collect();
    let records: Vec<Record> = read_records(&files.records)?
        .into_iter()
        .filter(|r| r.rep < cfg.reps && wanted.contains(&(r.setting.clone(), r.covariate_mode.clone(), r.n)))
        .collect();
    Ok(StudyOutput {
        metrics: compute_metrics(&records)?,
        truths,
        new_replications,
        failures,
    })
}

fn check_failures(cfg: &StudyConfig, cell: Cell, count: usize) -> Result<()> {
    if count as f64 > cfg.max_failure_rate * cfg.reps as f64 {
        return Err(Error::Study(format!(
            "{count} of {} replications failed for setting {}, covariates {}, n={}",
            cfg.reps,
            cell.setting.name(),
            cell.mode.name(),
            cell.n
        )));
    }
    Ok(())
}

fn check_header(reader: &mut csv::Reader<impl std::io::Read>, expected: &[&str], path: &Path) -> Result<()> {
    let header = reader.headers()?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::Study(format!(
            "{} has columns [{}], expected [{}]",
            path.display(),
            header.iter().collect::<Vec<_>>().join(", "),
            expected.join(", ")
        )));
    }
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path, columns: &[&str]) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    if reader.headers()?.is_empty() {
        return Ok(Vec::new());
    }
    check_header(&mut reader, columns, path)?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Study(format!("{} row {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Reads a records file, checking its columns.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    read_rows(path, &RECORD_COLUMNS)
}

pub fn read_failures(path: &Path) -> Result<Vec<Failure>> {
    read_rows(path, &FAILURE_COLUMNS)
}

/// Aggregates records into per-cell, per-path metrics, sorted by
/// setting, covariate mode, sample size and path.
///
/// Errors on an empty input and on duplicate
/// `(setting, covariate_mode, n, rep, path)` keys.
pub fn compute_metrics(records: &[Record]) -> Result<StudyMetrics> {
    if records.is_empty() {
        return Err(Error::Study("no records to aggregate".into()));
    }
    let mut seen = BTreeSet::new();
    let mut groups: BTreeMap<(String, String, usize, usize), Vec<&Record>> = BTreeMap::new();
    for r in records {
        let path = PathId::parse(&r.path).map_err(|_| Error::Study(format!("unknown path {:?}", r.path)))?;
        if !seen.insert((&r.setting, &r.covariate_mode, r.n, r.rep, &r.path)) {
            return Err(Error::Study(format!(
                "duplicate record: setting={}, covariate_mode={}, n={}, rep={}, path={}",
                r.setting, r.covariate_mode, r.n, r.rep, r.path
            )));
        }
        groups
            .entry((r.setting.clone(), r.covariate_mode.clone(), r.n, path.index()))
            .or_default()
            .push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((setting, covariate_mode, n, path), rows)| {
            let k = rows.len() as f64;
            let bias = rows.iter().map(|r| r.estimate - r.truth).sum::<f64>() / k;
            let mean = rows.iter().map(|r| r.estimate).sum::<f64>() / k;
            let var = if rows.len() > 1 {
                rows.iter().map(|r| (r.estimate - mean).powi(2)).sum::<f64>() / (k - 1.0)
            } else {
                0.0
            };
            MetricRow {
                setting,
                covariate_mode,
                n,
                path: PathId::ALL[path].key().to_string(),
                reps: rows.len(),
                bias,
                root_n_bias: (n as f64).sqrt() * bias,
                sd: var.sqrt(),
                coverage: rows.iter().map(|r| r.covered as f64).sum::<f64>() / k,
            }
        })
        .collect())
}

/// Metrics in long format, one row per metric.
pub fn plot_rows(metrics: &[MetricRow]) -> Vec<PlotRow> {
    metrics
        .iter()
        .flat_map(|m| {
            [
                ("bias", m.bias),
                ("root_n_bias", m.root_n_bias),
                ("sd", m.sd),
                ("coverage", m.coverage),
            ]
            .map(|(metric, value)| PlotRow {
                setting: m.setting.clone(),
                covariate_mode: m.covariate_mode.clone(),
                n: m.n,
                path: m.path.clone(),
                metric: metric.to_string(),
                value,
            })
        })
        .collect()
}

/// Writes rows with a header to `path`, replacing any existing file.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for row in rows {
        w.serialize(row)?;
    }
    let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::{Family, LearnerSet, LearnerSpec};

    fn record(rep: usize, path: &str, estimate: f64, covered: u8) -> Record {
        Record {
            setting: "default".into(),
            covariate_mode: "x".into(),
            n: 100,
            rep,
            path: path.into(),
            truth: 0.5,
            estimate,
            se: 0.1,
            ci_lo: estimate - 0.2,
            ci_hi: estimate + 0.2,
            covered,
            plugin_estimate: estimate,
        }
    }

    #[test]
    fn metrics_by_hand() {
        let rs = vec![record(0, "ate", 0.4, 1), record(1, "ate", 0.8, 0)];
        let m = compute_metrics(&rs).unwrap();
        assert_eq!(m.len(), 1);
        assert!((m[0].bias - 0.1).abs() < 1e-15);
        assert!((m[0].root_n_bias - 1.0).abs() < 1e-14);
        assert!((m[0].sd - (0.08f64).sqrt()).abs() < 1e-15);
        assert_eq!(m[0].coverage, 0.5);
    }

    #[test]
    fn duplicates_and_empty_rejected() {
        assert!(matches!(compute_metrics(&[]), Err(Error::Study(_))));
        let rs = vec![record(3, "psi_p1", 0.4, 1), record(3, "psi_p1", 0.5, 1)];
        let err = compute_metrics(&rs).unwrap_err().to_string();
        assert!(err.contains("rep=3") && err.contains("psi_p1"), "{err}");
    }

    #[test]
    fn seeds_ignore_covariate_mode_but_not_cell() {
        let a = replication_seed(1, Setting::Default, 500, 0);
        assert_ne!(a, replication_seed(1, Setting::Default, 500, 1));
        assert_ne!(a, replication_seed(1, Setting::Gamma1Zero, 500, 0));
        assert_ne!(a, replication_seed(1, Setting::Default, 1000, 0));
    }

    #[test]
    fn smoke_run_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let files = StudyFiles::new(dir.path().join("records.csv"), false);
        let cfg = StudyConfig {
            settings: vec![Setting::Default],
            covariate_modes: vec![CovariateMode::X],
            ns: vec![500],
            reps: 2,
            truth_mc: 100_000,
            estimator: EstimatorConfig {
                learners: LearnerSet::uniform(LearnerSpec::fixed(Family::MainEffects)),
                ..EstimatorConfig::default()
            },
            threads: 1,
            ..StudyConfig::default()
        };
        let out = run_study(&cfg, &files).unwrap();
        assert_eq!(out.new_replications, 2);
        assert_eq!(out.metrics.len(), PathId::ALL.len());
        assert!(out.metrics.iter().all(|m| m.reps == 2));
        let first = std::fs::read(&files.records).unwrap();
        assert_eq!(read_records(&files.records).unwrap().len(), 12);

        let resumed = run_study(&cfg, &StudyFiles::new(&files.records, true)).unwrap();
        assert_eq!(resumed.new_replications, 0);
        assert_eq!(resumed.metrics, out.metrics);
        assert_eq!(std::fs::read(&files.records).unwrap(), first);
    }

    #[test]
    fn header_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_records(&path), Err(Error::Study(_))));
    }
}

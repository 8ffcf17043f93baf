//! Command implementations behind the `rtwins` binary.
//!
//! Every command takes a fully resolved run description (see [`config`]) so
//! it can be driven from tests without going through argument parsing.

pub mod config;
pub mod report;

use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rtwins::data::{load_dataset, validate};
use rtwins::simulation::study::{plot_rows, write_csv};
use rtwins::simulation::{compute_metrics, read_records, run_study, simulate_observed, StudyFiles, StudyOutput};
use rtwins::{estimate, estimator::test_intermediate_confounding};

use config::{EstimateRun, ReplicateRun, ReportRun, SimulateRun};
use report::EstimateReport;

/// A problem with how the program was invoked (bad flags, bad config, bad
/// input file layout). Maps to exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Process exit code for an error: 2 for usage problems, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let usage = err.chain().any(|cause| {
        cause.downcast_ref::<Usage>().is_some()
            || cause.downcast_ref::<rtwins::Error>().is_some_and(rtwins::Error::is_usage)
    });
    if usage {
        2
    } else {
        1
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))
}

/// Paths written by `estimate`.
#[derive(Clone, Debug)]
pub struct EstimateOutput {
    pub report: EstimateReport,
    pub json: PathBuf,
    pub text: PathBuf,
}

pub fn cmd_estimate(run: &EstimateRun) -> Result<EstimateOutput> {
    let file = File::open(&run.input).with_context(|| format!("cannot open {}", run.input.display()))?;
    let data = load_dataset(file, &run.schema)?;
    let diagnostics = validate(&data);
    for w in &diagnostics.warnings {
        log::warn!("positivity: {w}");
    }
    let est = estimate(&data, &run.estimator)?;
    let wald = test_intermediate_confounding(&est)?;
    let report = EstimateReport::new(&run.input, &run.schema, &run.estimator, &est, wald, &diagnostics);

    create_dir(&run.output_dir)?;
    let json = run.output_dir.join("report.json");
    let text = run.output_dir.join("report.txt");
    let out = BufWriter::new(File::create(&json).with_context(|| format!("cannot write {}", json.display()))?);
    serde_json::to_writer_pretty(out, &report)?;
    fs::write(&text, report.to_text()).with_context(|| format!("cannot write {}", text.display()))?;
    log::info!("wrote {} and {}", json.display(), text.display());
    Ok(EstimateOutput { report, json, text })
}

pub fn cmd_simulate(run: &SimulateRun) -> Result<()> {
    let data = simulate_observed(&run.scm, run.n, run.seed)?;
    if let Some(parent) = run.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let out = File::create(&run.output).with_context(|| format!("cannot write {}", run.output.display()))?;
    data.write_csv(BufWriter::new(out))?;
    log::info!("wrote {} rows to {}", run.n, run.output.display());
    Ok(())
}

/// Files written by `replicate`.
pub struct ReplicateOutput {
    pub study: StudyOutput,
    pub records: PathBuf,
    pub failures: PathBuf,
    pub metrics: PathBuf,
    pub plot_data: PathBuf,
}

pub fn cmd_replicate(run: &ReplicateRun) -> Result<ReplicateOutput> {
    create_dir(&run.output_dir)?;
    let files = StudyFiles::new(run.output_dir.join("records.csv"), run.resume);
    let study = run_study(&run.study, &files)?;
    let metrics = run.output_dir.join("metrics.csv");
    let plot_data = run.output_dir.join("plot_data.csv");
    write_csv(&metrics, &study.metrics)?;
    write_csv(&plot_data, &plot_rows(&study.metrics))?;
    log::info!(
        "{} new replications ({} failed); metrics in {}",
        study.new_replications,
        study.failures,
        metrics.display()
    );
    Ok(ReplicateOutput {
        study,
        records: files.records,
        failures: files.failures,
        metrics,
        plot_data,
    })
}

pub fn cmd_report(run: &ReportRun) -> Result<rtwins::simulation::StudyMetrics> {
    let records = read_records(&run.records)?;
    let metrics = compute_metrics(&records)?;
    write_csv(&run.output, &metrics)?;
    log::info!("wrote {} metric rows to {}", metrics.len(), run.output.display());
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let usage: anyhow::Error = Usage("bad flag".into()).into();
        assert_eq!(exit_code(&usage), 2);
        let parse: anyhow::Error = rtwins::Error::Parse {
            row: 3,
            message: "x".into(),
        }
        .into();
        assert_eq!(exit_code(&parse), 2);
        let wrapped = parse.context("loading input");
        assert_eq!(exit_code(&wrapped), 2);
        let fit: anyhow::Error = rtwins::Error::Fit("diverged".into()).into();
        assert_eq!(exit_code(&fit), 1);
    }
}

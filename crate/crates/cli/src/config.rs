//! Run configuration: an optional TOML file with one table per command,
//! overridden field by field by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rtwins::data::Schema;
use rtwins::nuisance::{Family, LearnerSet, LearnerSpec};
use rtwins::simulation::{CovariateMode, ScmConfig, Setting, StudyConfig};
use rtwins::{EstimatorConfig, RefLevels};
use serde::Deserialize;

use crate::Usage;

#[derive(Debug, Parser)]
#[command(name = "rtwins", version, about = "Recanting-twin path-specific effects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate path-specific effects from a CSV dataset.
    Estimate(EstimateArgs),
    /// Simulate a dataset from the structural model.
    Simulate(SimulateArgs),
    /// Run the replication study.
    Replicate(ReplicateArgs),
    /// Recompute study metrics from a records file.
    Report(ReportArgs),
}

/// Estimator flags shared by `estimate` and `replicate`.
#[derive(Debug, Default, Args)]
pub struct EstimatorArgs {
    /// Cross-fitting folds (1 disables cross-fitting).
    #[arg(long)]
    pub folds: Option<usize>,
    /// Significance level of the confidence intervals.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Probability floor for the exposure models.
    #[arg(long)]
    pub clip: Option<f64>,
    /// Use one model family for every nuisance instead of CV selection
    /// (intercept-only, main-effects, interactions, or library).
    #[arg(long)]
    pub learner: Option<String>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub exposure: Option<String>,
    #[arg(long)]
    pub intermediate: Option<String>,
    #[arg(long)]
    pub mediator: Option<String>,
    #[arg(long)]
    pub outcome: Option<String>,
    /// Comma-separated covariate columns (default: every other column).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Active exposure level a′.
    #[arg(long)]
    pub a_prime: Option<u8>,
    /// Reference exposure level a*.
    #[arg(long)]
    pub a_star: Option<u8>,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Named setting (default, lambda1-zero, lambda2-zero, gamma1-zero, gamma2-zero).
    #[arg(long)]
    pub setting: Option<String>,
    /// Covariates written to the file: x (generating) or w (transformed).
    #[arg(long)]
    pub covariate_mode: Option<String>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub gamma1: Option<f64>,
    #[arg(long)]
    pub gamma2: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReplicateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub settings: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub covariate_modes: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub ns: Option<Vec<usize>>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub base_seed: Option<u64>,
    /// Covariate draws for the enumerated truths.
    #[arg(long)]
    pub truth_mc: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Keep existing records and run only missing replications.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Metrics CSV to write (default: metrics.csv next to the records).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// The configuration file: one optional table per command.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub estimate: EstimateConfig,
    pub simulate: SimulateConfig,
    pub replicate: ReplicateConfig,
    pub report: ReportConfig,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    pub input: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub schema: Schema,
    pub estimator: EstimatorConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub output: Option<PathBuf>,
    pub n: Option<usize>,
    pub seed: u64,
    pub setting: Setting,
    pub covariate_mode: CovariateMode,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub gamma1: Option<f64>,
    pub gamma2: Option<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            output: None,
            n: None,
            seed: 0,
            setting: Setting::Default,
            covariate_mode: CovariateMode::X,
            lambda1: None,
            lambda2: None,
            gamma1: None,
            gamma2: None,
        }
    }
}

impl SimulateConfig {
    pub fn scm(&self) -> ScmConfig {
        let mut cfg = self.setting.config().with_mode(self.covariate_mode);
        cfg.lambda1 = self.lambda1.unwrap_or(cfg.lambda1);
        cfg.lambda2 = self.lambda2.unwrap_or(cfg.lambda2);
        cfg.gamma1 = self.gamma1.unwrap_or(cfg.gamma1);
        cfg.gamma2 = self.gamma2.unwrap_or(cfg.gamma2);
        cfg
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicateConfig {
    pub output_dir: Option<PathBuf>,
    pub resume: bool,
    pub study: StudyConfig,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub records: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    toml::from_str(&text)
        .map_err(|e| Usage(format!("invalid config {}: {e}", path.display())).into())
}

fn required<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| Usage(format!("missing required setting: {what}")).into())
}

fn parse_learner(name: &str) -> Result<LearnerSet> {
    let spec = match name {
        "library" => LearnerSpec::library(),
        "intercept-only" => LearnerSpec::fixed(Family::InterceptOnly),
        "main-effects" => LearnerSpec::fixed(Family::MainEffects),
        "interactions" => LearnerSpec::fixed(Family::Interactions),
        other => {
            return Err(Usage(format!(
                "unknown learner {other:?} (expected library, intercept-only, main-effects or interactions)"
            ))
            .into())
        }
    };
    Ok(LearnerSet::uniform(spec))
}

fn apply_estimator_args(cfg: &mut EstimatorConfig, args: &EstimatorArgs) -> Result<()> {
    if let Some(v) = args.folds {
        cfg.folds = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.clip {
        cfg.clip = v;
    }
    if let Some(name) = &args.learner {
        cfg.learners = parse_learner(name)?;
    }
    Ok(())
}

fn usage(e: rtwins::Error) -> anyhow::Error {
    Usage(e.to_string()).into()
}

/// Fully resolved `estimate` settings.
#[derive(Clone, Debug)]
pub struct EstimateRun {
    pub input: PathBuf,
    pub output_dir: PathBuf,
    pub schema: Schema,
    pub estimator: EstimatorConfig,
}

pub fn resolve_estimate(args: &EstimateArgs) -> Result<EstimateRun> {
    let mut cfg = load_file_config(args.config.as_deref())?.estimate;
    let schema = &mut cfg.schema;
    for (slot, flag) in [
        (&mut schema.exposure, &args.exposure),
        (&mut schema.intermediate, &args.intermediate),
        (&mut schema.mediator, &args.mediator),
        (&mut schema.outcome, &args.outcome),
    ] {
        if let Some(v) = flag {
            slot.clone_from(v);
        }
    }
    if let Some(c) = &args.covariates {
        schema.covariates = Some(c.clone());
    }
    let est = &mut cfg.estimator;
    if let Some(v) = args.seed {
        est.seed = v;
    }
    est.refs = RefLevels::new(
        args.a_prime.unwrap_or(est.refs.a_prime),
        args.a_star.unwrap_or(est.refs.a_star),
    )
    .map_err(usage)?;
    apply_estimator_args(est, &args.estimator)?;
    est.validate().map_err(usage)?;
    Ok(EstimateRun {
        input: required(args.input.clone().or(cfg.input), "input")?,
        output_dir: required(args.output_dir.clone().or(cfg.output_dir), "output_dir")?,
        schema: cfg.schema,
        estimator: cfg.estimator,
    })
}

/// Fully resolved `simulate` settings.
#[derive(Clone, Debug)]
pub struct SimulateRun {
    pub output: PathBuf,
    pub n: usize,
    pub seed: u64,
    pub scm: ScmConfig,
}

pub fn resolve_simulate(args: &SimulateArgs) -> Result<SimulateRun> {
    let mut cfg = load_file_config(args.config.as_deref())?.simulate;
    if let Some(s) = &args.setting {
        cfg.setting = Setting::parse(s).map_err(usage)?;
    }
    if let Some(m) = &args.covariate_mode {
        cfg.covariate_mode = CovariateMode::parse(m).map_err(usage)?;
    }
    cfg.lambda1 = args.lambda1.or(cfg.lambda1);
    cfg.lambda2 = args.lambda2.or(cfg.lambda2);
    cfg.gamma1 = args.gamma1.or(cfg.gamma1);
    cfg.gamma2 = args.gamma2.or(cfg.gamma2);
    let n = required(args.n.or(cfg.n), "n")?;
    if n == 0 {
        return Err(Usage("sample size n must be positive".into()).into());
    }
    Ok(SimulateRun {
        output: required(args.output.clone().or(cfg.output.clone()), "output")?,
        n,
        seed: args.seed.unwrap_or(cfg.seed),
        scm: cfg.scm(),
    })
}

/// Fully resolved `replicate` settings.
#[derive(Clone, Debug)]
pub struct ReplicateRun {
    pub output_dir: PathBuf,
    pub resume: bool,
    pub study: StudyConfig,
}

pub fn resolve_replicate(args: &ReplicateArgs) -> Result<ReplicateRun> {
    let cfg = load_file_config(args.config.as_deref())?.replicate;
    let mut study = cfg.study;
    if let Some(names) = &args.settings {
        study.settings = names.iter().map(|s| Setting::parse(s)).collect::<rtwins::Result<_>>().map_err(usage)?;
    }
    if let Some(modes) = &args.covariate_modes {
        study.covariate_modes =
            modes.iter().map(|s| CovariateMode::parse(s)).collect::<rtwins::Result<_>>().map_err(usage)?;
    }
    if let Some(ns) = &args.ns {
        study.ns.clone_from(ns);
    }
    study.reps = args.reps.unwrap_or(study.reps);
    study.base_seed = args.base_seed.unwrap_or(study.base_seed);
    study.truth_mc = args.truth_mc.unwrap_or(study.truth_mc);
    study.threads = args.threads.unwrap_or(study.threads);
    apply_estimator_args(&mut study.estimator, &args.estimator)?;
    study.validate().map_err(usage)?;
    Ok(ReplicateRun {
        output_dir: required(args.output_dir.clone().or(cfg.output_dir), "output_dir")?,
        resume: args.resume || cfg.resume,
        study,
    })
}

/// Fully resolved `report` settings.
#[derive(Clone, Debug)]
pub struct ReportRun {
    pub records: PathBuf,
    pub output: PathBuf,
}

pub fn resolve_report(args: &ReportArgs) -> Result<ReportRun> {
    let cfg = load_file_config(args.config.as_deref())?.report;
    let records = required(args.records.clone().or(cfg.records), "records")?;
    let output = args
        .output
        .clone()
        .or(cfg.output)
        .unwrap_or_else(|| records.with_file_name("metrics.csv"));
    Ok(ReportRun { records, output })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[estimate]\ninput = \"a.csv\"\noutput_dir = \"out\"\n[estimate.estimator]\nfolds = 3\nalpha = 0.1\n",
        )
        .unwrap();
        let args = EstimateArgs {
            config: Some(path),
            input: Some("b.csv".into()),
            output_dir: None,
            exposure: Some("treat".into()),
            intermediate: None,
            mediator: None,
            outcome: None,
            covariates: None,
            seed: None,
            a_prime: None,
            a_star: None,
            estimator: EstimatorArgs {
                alpha: Some(0.01),
                ..EstimatorArgs::default()
            },
        };
        let run = resolve_estimate(&args).unwrap();
        assert_eq!(run.input, PathBuf::from("b.csv"));
        assert_eq!(run.output_dir, PathBuf::from("out"));
        assert_eq!(run.schema.exposure, "treat");
        assert_eq!(run.estimator.folds, 3);
        assert_eq!(run.estimator.alpha, 0.01);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[estimate]\nfolsd = 3\n").unwrap();
        let err = load_file_config(Some(&path)).unwrap_err();
        assert!(err.downcast_ref::<Usage>().is_some());
    }

    #[test]
    fn documented_config_file_parses() {
        let book = include_str!("../../../book/src/cli.md");
        let start = book.find("```toml\n").expect("toml example") + "```toml\n".len();
        let end = start + book[start..].find("```").unwrap();
        let cfg: FileConfig = toml::from_str(&book[start..end]).unwrap();
        assert_eq!(cfg.estimate.schema.exposure, "treated");
        assert_eq!(cfg.estimate.estimator.learners.d.candidates.len(), 2);
        assert_eq!(cfg.simulate.setting, Setting::Gamma1Zero);
        assert_eq!(cfg.replicate.study.settings, Setting::STUDY.to_vec());
        assert!(cfg.replicate.resume);
        cfg.replicate.study.validate().unwrap();
    }

    #[test]
    fn learner_names() {
        assert!(parse_learner("library").is_ok());
        assert_eq!(
            parse_learner("main-effects").unwrap().d.candidates,
            vec![Family::MainEffects]
        );
        assert!(parse_learner("boosting").is_err());
    }

    #[test]
    fn missing_required_value_is_usage_error() {
        let args = ReportArgs {
            config: None,
            records: None,
            output: None,
        };
        assert!(resolve_report(&args).unwrap_err().downcast_ref::<Usage>().is_some());
    }
}

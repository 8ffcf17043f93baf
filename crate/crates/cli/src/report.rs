//! The `estimate` report: a serializable summary and its plain-text table.

use std::fmt::Write as _;
use std::path::Path;

use rtwins::data::{DiagnosticsReport, Schema};
use rtwins::estimator::WaldTest;
use rtwins::{EffectEstimates, EstimatorConfig, Inference, PathId, RefLevels, TargetId};
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EffectRow {
    pub key: String,
    pub label: String,
    pub estimate: f64,
    pub plugin_estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub z: f64,
    pub p_value: f64,
}

impl EffectRow {
    fn new(key: &str, label: &str, inf: &Inference) -> Self {
        EffectRow {
            key: key.to_string(),
            label: label.to_string(),
            estimate: inf.estimate,
            plugin_estimate: inf.plugin,
            se: inf.se,
            ci_lo: inf.ci_lo,
            ci_hi: inf.ci_hi,
            z: inf.z,
            p_value: inf.p_value,
        }
    }

    /// `estimate (lo, hi)` with four decimals.
    pub fn interval_text(&self) -> String {
        format!("{:.4} ({:.4}, {:.4})", self.estimate, self.ci_lo, self.ci_hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelChoice {
    pub nuisance: String,
    pub family: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TestResult {
    pub z: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimateReport {
    pub input: String,
    pub n: usize,
    pub folds: usize,
    pub alpha: f64,
    pub seed: u64,
    pub fold_seed: u64,
    pub refs: RefLevels,
    pub schema: Schema,
    pub estimator: EstimatorConfig,
    pub paths: Vec<EffectRow>,
    pub targets: Vec<EffectRow>,
    /// Wald test of no intermediate confounding (interaction effect zero).
    pub intermediate_confounding_test: TestResult,
    pub models: Vec<ModelChoice>,
    pub diagnostics: DiagnosticsReport,
    pub warnings: Vec<String>,
}

impl EstimateReport {
    pub fn new(
        input: &Path,
        schema: &Schema,
        cfg: &EstimatorConfig,
        est: &EffectEstimates,
        wald: WaldTest,
        diagnostics: &DiagnosticsReport,
    ) -> Self {
        EstimateReport {
            input: input.display().to_string(),
            n: est.n,
            folds: est.folds,
            alpha: est.alpha,
            seed: est.seed,
            fold_seed: est.fold_seed,
            refs: est.refs,
            schema: schema.clone(),
            estimator: cfg.clone(),
            paths: PathId::ALL
                .iter()
                .map(|&p| EffectRow::new(p.key(), p.label(), est.path(p)))
                .collect(),
            targets: TargetId::ALL
                .iter()
                .map(|&t| EffectRow::new(t.key(), t.label(), est.target(t)))
                .collect(),
            intermediate_confounding_test: TestResult {
                z: wald.z,
                p_value: wald.p_value,
            },
            models: est
                .nuisance_families()
                .map(|(k, f)| ModelChoice {
                    nuisance: k.name().to_string(),
                    family: f.name().to_string(),
                })
                .collect(),
            diagnostics: diagnostics.clone(),
            warnings: diagnostics.warnings.iter().map(ToString::to_string).collect(),
        }
    }

    pub fn path(&self, p: PathId) -> &EffectRow {
        &self.paths[p.index()]
    }

    /// Human-readable report.
    pub fn to_text(&self) -> String {
        let level = 100.0 * (1.0 - self.alpha);
        let mut s = String::new();
        let _ = writeln!(s, "Path-specific effects (a' = {}, a* = {})", self.refs.a_prime, self.refs.a_star);
        let _ = writeln!(s, "input: {}   n = {}   folds = {}   seed = {}", self.input, self.n, self.folds, self.seed);
        let _ = writeln!(s);
        let table = |s: &mut String, title: &str, rows: &[EffectRow]| {
            let _ = writeln!(s, "{:<28} {:>34} {:>10} {:>10}", title, format!("estimate ({level:.0}% CI)"), "SE", "p-value");
            for r in rows {
                let _ = writeln!(
                    s,
                    "{:<28} {:>34} {:>10.4} {:>10.4}",
                    r.label,
                    r.interval_text(),
                    r.se,
                    r.p_value
                );
            }
            let _ = writeln!(s);
        };
        table(&mut s, "effect", &self.paths);
        table(&mut s, "target", &self.targets);
        let _ = writeln!(
            s,
            "Test of no intermediate confounding: z = {:.3}, p = {:.4}",
            self.intermediate_confounding_test.z, self.intermediate_confounding_test.p_value
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "Selected models:");
        for m in &self.models {
            let _ = writeln!(s, "  {:<8} {}", m.nuisance, m.family);
        }
        let _ = writeln!(s);
        if self.warnings.is_empty() {
            let _ = writeln!(s, "Positivity diagnostics: no warnings");
        } else {
            let _ = writeln!(s, "Positivity diagnostics ({} warnings):", self.warnings.len());
            for w in &self.warnings {
                let _ = writeln!(s, "  - {w}");
            }
        }
        s
    }
}

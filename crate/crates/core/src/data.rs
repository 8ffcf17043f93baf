//! Observed data `(W, A, Z, M, Y)`, CSV ingestion, positivity diagnostics
//! and cross-fitting fold assignment.
//!
//! The exposure `A` is binary. The intermediate confounder `Z` and the
//! mediator `M` are categorical; their labels are remapped to dense
//! 0-based indices at load time so that downstream probability tables can be
//! indexed directly. The original labels are kept for reporting and for
//! writing the data back out.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nuisance::glm;

/// Maps CSV column names onto the roles of the observed data.
///
/// When `covariates` is `None`, every column not claimed by another role is
/// used as a covariate, in file order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub exposure: String,
    pub intermediate: String,
    pub mediator: String,
    pub outcome: String,
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            exposure: "a".into(),
            intermediate: "z".into(),
            mediator: "m".into(),
            outcome: "y".into(),
            covariates: None,
        }
    }
}

/// `n` observations of `(W, A, Z, M, Y)`. Immutable once constructed.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    covariate_names: Vec<String>,
    role_names: [String; 4],
    /// Row-major `n × p`.
    w: Vec<f64>,
    a: Vec<u8>,
    z: Vec<usize>,
    m: Vec<usize>,
    y: Vec<f64>,
    z_labels: Vec<u64>,
    m_labels: Vec<u64>,
}

impl Dataset {
    /// Builds a dataset from dense category indices. Labels default to the
    /// indices themselves and role names to `a`, `z`, `m`, `y`.
    pub fn new(
        covariate_names: Vec<String>,
        w: Vec<f64>,
        a: Vec<u8>,
        z: Vec<usize>,
        m: Vec<usize>,
        y: Vec<f64>,
        k_z: usize,
        k_m: usize,
    ) -> Result<Self> {
        let labels = |k: usize| (0..k as u64).collect::<Vec<_>>();
        Dataset::with_labels(
            covariate_names,
            ["a", "z", "m", "y"].map(String::from),
            w,
            a,
            z,
            m,
            y,
            labels(k_z),
            labels(k_m),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn with_labels(
        covariate_names: Vec<String>,
        role_names: [String; 4],
        w: Vec<f64>,
        a: Vec<u8>,
        z: Vec<usize>,
        m: Vec<usize>,
        y: Vec<f64>,
        z_labels: Vec<u64>,
        m_labels: Vec<u64>,
    ) -> Result<Self> {
        let n = a.len();
        let p = covariate_names.len();
        if z.len() != n || m.len() != n || y.len() != n || w.len() != n * p {
            return Err(Error::Argument(format!(
                "column lengths disagree: n={n}, p={p}, |w|={}, |z|={}, |m|={}, |y|={}",
                w.len(),
                z.len(),
                m.len(),
                y.len()
            )));
        }
        if z_labels.len() < 2 || m_labels.len() < 2 {
            return Err(Error::Argument(format!(
                "intermediate and mediator need at least two levels (got {} and {})",
                z_labels.len(),
                m_labels.len()
            )));
        }
        if let Some(i) = a.iter().position(|&v| v > 1) {
            return Err(Error::Argument(format!("exposure at row {} is not 0/1", i + 1)));
        }
        if let Some(i) = z.iter().position(|&v| v >= z_labels.len()) {
            return Err(Error::Argument(format!("intermediate level out of range at row {}", i + 1)));
        }
        if let Some(i) = m.iter().position(|&v| v >= m_labels.len()) {
            return Err(Error::Argument(format!("mediator level out of range at row {}", i + 1)));
        }
        if let Some(i) = w.iter().chain(&y).position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite value at flat index {i}")));
        }
        Ok(Dataset {
            covariate_names,
            role_names,
            w,
            a,
            z,
            m,
            y,
            z_labels,
            m_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Number of covariates `p`.
    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn k_z(&self) -> usize {
        self.z_labels.len()
    }

    pub fn k_m(&self) -> usize {
        self.m_labels.len()
    }

    pub fn z_labels(&self) -> &[u64] {
        &self.z_labels
    }

    pub fn m_labels(&self) -> &[u64] {
        &self.m_labels
    }

    pub fn w_row(&self, i: usize) -> &[f64] {
        let p = self.n_covariates();
        &self.w[i * p..(i + 1) * p]
    }

    pub fn a(&self) -> &[u8] {
        &self.a
    }

    pub fn z(&self) -> &[usize] {
        &self.z
    }

    pub fn m(&self) -> &[usize] {
        &self.m
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// All outcomes in `{0, 1}`. Switches the outcome learner to the logistic
    /// family.
    pub fn outcome_is_binary(&self) -> bool {
        self.y.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn observation(&self, i: usize) -> Observation<'_> {
        Observation {
            w: self.w_row(i),
            a: self.a[i],
            z: self.z[i],
            m: self.m[i],
            y: self.y[i],
        }
    }

    pub fn observations(&self) -> impl ExactSizeIterator<Item = Observation<'_>> + '_ {
        (0..self.len()).map(move |i| self.observation(i))
    }

    /// A new dataset holding rows `rows` (in the given order) with the same
    /// levels and names.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let p = self.n_covariates();
        let mut w = Vec::with_capacity(rows.len() * p);
        for &i in rows {
            w.extend_from_slice(self.w_row(i));
        }
        Dataset {
            covariate_names: self.covariate_names.clone(),
            role_names: self.role_names.clone(),
            w,
            a: rows.iter().map(|&i| self.a[i]).collect(),
            z: rows.iter().map(|&i| self.z[i]).collect(),
            m: rows.iter().map(|&i| self.m[i]).collect(),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            z_labels: self.z_labels.clone(),
            m_labels: self.m_labels.clone(),
        }
    }

    /// Replaces the covariate matrix, keeping everything else.
    pub fn with_covariates(&self, names: Vec<String>, w: Vec<f64>) -> Result<Dataset> {
        Dataset::with_labels(
            names,
            self.role_names.clone(),
            w,
            self.a.clone(),
            self.z.clone(),
            self.m.clone(),
            self.y.clone(),
            self.z_labels.clone(),
            self.m_labels.clone(),
        )
    }

    /// Writes the dataset as CSV: covariates first, then exposure,
    /// intermediate, mediator and outcome, using the original category
    /// labels. Reading the output back with [`load_dataset`] reproduces the
    /// dataset exactly.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = self.covariate_names.iter().map(String::as_str).collect();
        header.extend(self.role_names.iter().map(String::as_str));
        wtr.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.len() {
            record.clear();
            record.extend(self.w_row(i).iter().map(|v| v.to_string()));
            record.push(self.a[i].to_string());
            record.push(self.z_labels[self.z[i]].to_string());
            record.push(self.m_labels[self.m[i]].to_string());
            record.push(self.y[i].to_string());
            wtr.write_record(&record)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    /// The schema that [`Dataset::write_csv`] output satisfies.
    pub fn schema(&self) -> Schema {
        let [a, z, m, y] = self.role_names.clone();
        Schema {
            exposure: a,
            intermediate: z,
            mediator: m,
            outcome: y,
            covariates: Some(self.covariate_names.clone()),
        }
    }
}

/// One row of a [`Dataset`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation<'a> {
    pub w: &'a [f64],
    pub a: u8,
    pub z: usize,
    pub m: usize,
    pub y: f64,
}

/// Reads a headed CSV into a [`Dataset`], inferring the category levels of
/// the intermediate and mediator columns.
pub fn load_dataset<R: Read>(source: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = rdr.headers().map_err(|e| csv_parse_error(e, 0))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let ia = find(&schema.exposure)?;
    let iz = find(&schema.intermediate)?;
    let im = find(&schema.mediator)?;
    let iy = find(&schema.outcome)?;
    let roles = [ia, iz, im, iy];
    let covariate_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(j, _)| !roles.contains(j))
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    let iw = covariate_names
        .iter()
        .map(|name| find(name))
        .collect::<Result<Vec<_>>>()?;
    for (j, &col) in iw.iter().enumerate() {
        if roles.contains(&col) {
            return Err(Error::Schema(format!(
                "column `{}` cannot be both a covariate and a role column",
                covariate_names[j]
            )));
        }
    }

    let mut w = Vec::new();
    let (mut a, mut z_raw, mut m_raw, mut y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| csv_parse_error(e, row))?;
        let field = |col: usize| record.get(col).unwrap_or("");
        for &col in &iw {
            w.push(parse_real(field(col), &headers[col], row)?);
        }
        let av = parse_real(field(ia), &schema.exposure, row)?;
        if av != 0.0 && av != 1.0 {
            return Err(Error::Parse {
                row,
                message: format!("exposure `{}` must be 0 or 1, got `{}`", schema.exposure, field(ia)),
            });
        }
        a.push(av as u8);
        z_raw.push(parse_level(field(iz), &schema.intermediate, row)?);
        m_raw.push(parse_level(field(im), &schema.mediator, row)?);
        y.push(parse_real(field(iy), &schema.outcome, row)?);
    }
    if a.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }

    let (z_labels, z) = densify(&z_raw);
    let (m_labels, m) = densify(&m_raw);
    let role_names = [
        schema.exposure.clone(),
        schema.intermediate.clone(),
        schema.mediator.clone(),
        schema.outcome.clone(),
    ];
    Dataset::with_labels(covariate_names, role_names, w, a, z, m, y, z_labels, m_labels)
        .map_err(|e| match e {
            Error::Argument(msg) => Error::Schema(msg),
            other => other,
        })
}

fn csv_parse_error(e: csv::Error, fallback_row: usize) -> Error {
    let row = e
        .position()
        .map(|p| (p.line() as usize).saturating_sub(1))
        .unwrap_or(fallback_row);
    Error::Parse {
        row,
        message: e.to_string(),
    }
}

fn parse_real(raw: &str, column: &str, row: usize) -> Result<f64> {
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse {
            row,
            message: format!("column `{column}`: `{raw}` is not a finite number"),
        })
}

fn parse_level(raw: &str, column: &str, row: usize) -> Result<u64> {
    raw.parse::<u64>().map_err(|_| Error::Parse {
        row,
        message: format!("column `{column}`: `{raw}` is not a non-negative integer category"),
    })
}

/// Sorted distinct labels and each value's index among them.
fn densify(raw: &[u64]) -> (Vec<u64>, Vec<usize>) {
    let labels: Vec<u64> = raw.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let idx = raw
        .iter()
        .map(|v| labels.binary_search(v).expect("label present"))
        .collect();
    (labels, idx)
}

/// A cell of the exposure × category table that has no observations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum PositivityWarning {
    EmptyExposureCell { a: u8 },
    EmptyIntermediateCell { a: u8, z: u64 },
    EmptyMediatorCell { a: u8, m: u64 },
    EmptyJointCell { a: u8, z: u64, m: u64 },
    ExtremePropensity { count: usize, threshold: f64 },
}

impl fmt::Display for PositivityWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PositivityWarning::EmptyExposureCell { a } => write!(f, "no observations with a={a}"),
            PositivityWarning::EmptyIntermediateCell { a, z } => {
                write!(f, "empty cell (a={a}, z={z})")
            }
            PositivityWarning::EmptyMediatorCell { a, m } => write!(f, "empty cell (a={a}, m={m})"),
            PositivityWarning::EmptyJointCell { a, z, m } => {
                write!(f, "empty cell (a={a}, z={z}, m={m})")
            }
            PositivityWarning::ExtremePropensity { count, threshold } => write!(
                f,
                "{count} rows with estimated P(A=1|W) outside [{threshold}, {}]",
                1.0 - threshold
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropensitySummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub n: usize,
    pub exposure_counts: [usize; 2],
    /// `[a][z]`
    pub intermediate_counts: [Vec<usize>; 2],
    /// `[a][m]`
    pub mediator_counts: [Vec<usize>; 2],
    /// Main-effects logistic fit of `A` on `W`; `None` without covariates or
    /// when the fit fails.
    pub propensity: Option<PropensitySummary>,
    pub warnings: Vec<PositivityWarning>,
}

const PROPENSITY_WARN: f64 = 0.01;

/// Positivity diagnostics. Never fails; problems become warnings.
pub fn validate(d: &Dataset) -> DiagnosticsReport {
    let (kz, km) = (d.k_z(), d.k_m());
    let mut exposure_counts = [0usize; 2];
    let mut zc = [vec![0usize; kz], vec![0usize; kz]];
    let mut mc = [vec![0usize; km], vec![0usize; km]];
    let mut joint = vec![0usize; 2 * kz * km];
    for o in d.observations() {
        let a = o.a as usize;
        exposure_counts[a] += 1;
        zc[a][o.z] += 1;
        mc[a][o.m] += 1;
        joint[(a * kz + o.z) * km + o.m] += 1;
    }

    let mut warnings = Vec::new();
    for a in 0..2u8 {
        let ai = a as usize;
        if exposure_counts[ai] == 0 {
            warnings.push(PositivityWarning::EmptyExposureCell { a });
            continue;
        }
        for z in 0..kz {
            if zc[ai][z] == 0 {
                warnings.push(PositivityWarning::EmptyIntermediateCell { a, z: d.z_labels()[z] });
            }
        }
        for m in 0..km {
            if mc[ai][m] == 0 {
                warnings.push(PositivityWarning::EmptyMediatorCell { a, m: d.m_labels()[m] });
            }
        }
        for z in 0..kz {
            for m in 0..km {
                if joint[(ai * kz + z) * km + m] == 0 {
                    warnings.push(PositivityWarning::EmptyJointCell {
                        a,
                        z: d.z_labels()[z],
                        m: d.m_labels()[m],
                    });
                }
            }
        }
    }

    let propensity = propensity_summary(d);
    if let Some(ps) = &propensity {
        let count = ps.1;
        if count > 0 {
            warnings.push(PositivityWarning::ExtremePropensity {
                count,
                threshold: PROPENSITY_WARN,
            });
        }
    }

    DiagnosticsReport {
        n: d.len(),
        exposure_counts,
        intermediate_counts: zc,
        mediator_counts: mc,
        propensity: propensity.map(|(s, _)| s),
        warnings,
    }
}

fn propensity_summary(d: &Dataset) -> Option<(PropensitySummary, usize)> {
    let p = d.n_covariates();
    if p == 0 || d.is_empty() {
        return None;
    }
    let n = d.len();
    let x = nalgebra::DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { d.w_row(i)[j - 1] });
    let targets: Vec<f64> = d.a().iter().map(|&v| v as f64).collect();
    let fit = glm::fit_binary_glm(&x, &targets, glm::DEFAULT_RIDGE).ok()?;
    let probs = fit.predict(&x);
    let mut summary = PropensitySummary {
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
        mean: 0.0,
    };
    let mut extreme = 0;
    for &v in &probs {
        summary.min = summary.min.min(v);
        summary.max = summary.max.max(v);
        summary.mean += v / n as f64;
        if !(PROPENSITY_WARN..=1.0 - PROPENSITY_WARN).contains(&v) {
            extreme += 1;
        }
    }
    Some((summary, extreme))
}

/// Partition of `0..n` into `q` validation folds of near-equal size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    fold_of: Vec<usize>,
    q: usize,
    seed: u64,
}

impl FoldAssignment {
    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row indices in validation fold `k`, ascending.
    pub fn validation(&self, k: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == k).collect()
    }

    /// Row indices outside fold `k`, ascending.
    pub fn training(&self, k: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != k).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.q];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Random balanced fold assignment; a pure function of `(n, q, seed)`.
pub fn assign_folds(n: usize, q: usize, seed: u64) -> Result<FoldAssignment> {
    if q < 2 || q > n {
        return Err(Error::Argument(format!("fold count must satisfy 2 <= q <= n (q={q}, n={n})")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % q;
    }
    Ok(FoldAssignment { fold_of, q, seed })
}

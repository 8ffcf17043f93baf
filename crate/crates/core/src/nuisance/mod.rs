//! Nuisance models for the identification functionals and their influence
//! functions:
//!
//! | name | quantity                 | target | conditions on |
//! |------|--------------------------|--------|---------------|
//! | `b`  | `P(A = 1 | W)`           | `A`    | `W`           |
//! | `c`  | `P(A = 1 | Z, M, W)`     | `A`    | `Z, M, W`     |
//! | `g`  | `P(Z = z | A, W)`        | `Z`    | `A, W`        |
//! | `h*` | `P(M = m | A, Z, W)`     | `M`    | `A, Z, W`     |
//! | `d`  | `E(Y | A, Z, M, W)`      | `Y`    | `A, Z, M, W`  |
//!
//! Each model is chosen from a small library of ridge GLMs
//! ([`Family`]) by cross-validated risk. The marginal mediator law `h` and
//! the nested regression `e` are derived from `(g, h*, d)` rather than fitted
//! separately, so all functionals are computed from one compatible set of
//! conditionals.

pub mod features;
pub mod glm;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{assign_folds, Dataset, FoldAssignment};
use crate::error::{Error, Result};
pub use features::{Encoder, Family, Inputs};
use glm::{BinaryFit, LinearFit, MultinomialFit};

/// Default probability floor applied to `b` and `c`.
pub const DEFAULT_CLIP: f64 = 0.001;
pub const DEFAULT_CV_FOLDS: usize = 5;

/// Held-out loss used to compare candidate families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    NegLogLik,
    SquaredError,
}

/// Candidate families for one nuisance. A single candidate is used as is;
/// several are compared by `cv_folds`-fold cross-validated risk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub candidates: Vec<Family>,
    #[serde(default = "default_cv_folds")]
    pub cv_folds: usize,
}

fn default_cv_folds() -> usize {
    DEFAULT_CV_FOLDS
}

impl LearnerSpec {
    /// All three families with 5-fold selection.
    pub fn library() -> Self {
        LearnerSpec {
            candidates: Family::ALL.to_vec(),
            cv_folds: DEFAULT_CV_FOLDS,
        }
    }

    pub fn fixed(family: Family) -> Self {
        LearnerSpec {
            candidates: vec![family],
            cv_folds: DEFAULT_CV_FOLDS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::Argument("learner spec has no candidate families".into()));
        }
        if self.candidates.len() > 1 && self.cv_folds < 2 {
            return Err(Error::Argument(format!(
                "cross-validated selection needs at least 2 folds (got {})",
                self.cv_folds
            )));
        }
        Ok(())
    }

    fn widest(&self) -> Family {
        self.candidates.iter().copied().max().unwrap_or(Family::InterceptOnly)
    }
}

impl Default for LearnerSpec {
    fn default() -> Self {
        LearnerSpec::library()
    }
}

/// One [`LearnerSpec`] per nuisance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnerSet {
    #[serde(default)]
    pub b: LearnerSpec,
    #[serde(default)]
    pub c: LearnerSpec,
    #[serde(default)]
    pub g: LearnerSpec,
    #[serde(default)]
    pub h_star: LearnerSpec,
    #[serde(default)]
    pub d: LearnerSpec,
}

impl LearnerSet {
    pub fn uniform(spec: LearnerSpec) -> Self {
        LearnerSet {
            b: spec.clone(),
            c: spec.clone(),
            g: spec.clone(),
            h_star: spec.clone(),
            d: spec,
        }
    }

    pub fn get(&self, kind: NuisanceKind) -> &LearnerSpec {
        match kind {
            NuisanceKind::B => &self.b,
            NuisanceKind::C => &self.c,
            NuisanceKind::G => &self.g,
            NuisanceKind::HStar => &self.h_star,
            NuisanceKind::D => &self.d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        NuisanceKind::ALL.iter().try_for_each(|&k| self.get(k).validate())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceKind {
    B,
    C,
    G,
    HStar,
    D,
}

impl NuisanceKind {
    pub const ALL: [NuisanceKind; 5] = [
        NuisanceKind::B,
        NuisanceKind::C,
        NuisanceKind::G,
        NuisanceKind::HStar,
        NuisanceKind::D,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NuisanceKind::B => "b",
            NuisanceKind::C => "c",
            NuisanceKind::G => "g",
            NuisanceKind::HStar => "h_star",
            NuisanceKind::D => "d",
        }
    }

    pub fn inputs(self) -> Inputs {
        let (exposure, intermediate, mediator) = match self {
            NuisanceKind::B => (false, false, false),
            NuisanceKind::C => (false, true, true),
            NuisanceKind::G => (true, false, false),
            NuisanceKind::HStar => (true, true, false),
            NuisanceKind::D => (true, true, true),
        };
        Inputs {
            exposure,
            intermediate,
            mediator,
        }
    }

    fn target(self, data: &Dataset, rows: &[usize]) -> Target {
        match self {
            NuisanceKind::B | NuisanceKind::C => {
                Target::Binary(rows.iter().map(|&i| data.a()[i] as f64).collect())
            }
            NuisanceKind::G => Target::Categorical {
                levels: rows.iter().map(|&i| data.z()[i]).collect(),
                k: data.k_z(),
            },
            NuisanceKind::HStar => Target::Categorical {
                levels: rows.iter().map(|&i| data.m()[i]).collect(),
                k: data.k_m(),
            },
            NuisanceKind::D => {
                let y: Vec<f64> = rows.iter().map(|&i| data.y()[i]).collect();
                if data.outcome_is_binary() {
                    Target::Binary(y)
                } else {
                    Target::Continuous(y)
                }
            }
        }
    }
}

/// Regression targets, which also determine the GLM family.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Values in `[0, 1]`; logistic link.
    Binary(Vec<f64>),
    /// Levels `< k`; multinomial logit.
    Categorical { levels: Vec<usize>, k: usize },
    /// Identity link, least squares.
    Continuous(Vec<f64>),
}

impl Target {
    pub fn len(&self) -> usize {
        match self {
            Target::Binary(v) | Target::Continuous(v) => v.len(),
            Target::Categorical { levels, .. } => levels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Target {
        match self {
            Target::Binary(v) => Target::Binary(rows.iter().map(|&i| v[i]).collect()),
            Target::Continuous(v) => Target::Continuous(rows.iter().map(|&i| v[i]).collect()),
            Target::Categorical { levels, k } => Target::Categorical {
                levels: rows.iter().map(|&i| levels[i]).collect(),
                k: *k,
            },
        }
    }

    /// Negative log-likelihood for binary and categorical targets, squared
    /// error for continuous ones.
    pub fn natural_loss(&self) -> Loss {
        match self {
            Target::Continuous(_) => Loss::SquaredError,
            _ => Loss::NegLogLik,
        }
    }
}

/// Fitted GLM coefficients of any of the three link families.
#[derive(Clone, Debug, PartialEq)]
pub enum Fitted {
    Binary(BinaryFit),
    Multinomial(MultinomialFit),
    Linear(LinearFit),
}

impl Fitted {
    pub fn converged(&self) -> bool {
        match self {
            Fitted::Binary(f) => f.converged,
            Fitted::Multinomial(f) => f.converged,
            Fitted::Linear(_) => true,
        }
    }
}

/// Ridge penalty for models of discrete targets (`b`, `c`, `g`, `h*`, and `d`
/// when the outcome is binary).
///
/// Sparse `(a, z, m)` cells are common (high `z` with low `m`, or `a = 0`
/// with high `z`), and an unpenalised fit sends the coefficient of an
/// indicator whose cell lacks one outcome level towards infinity. Fitted
/// probabilities then collapse to ~1e-7 (or to the clipping bound for `c`),
/// and since `g`, `h*` and `c` enter the influence functions through density
/// ratios, a single held-out row in such a cell can inflate a standard error
/// by orders of magnitude. The penalty must also stay small: it shrinks the
/// rare `Z`-level indicators, whose lost effect is then absorbed by the
/// correlated exposure coefficient, so a unit penalty biases the `A → M`
/// path at moderate `n`. `0.1` avoids both failure modes; its shrinkage
/// bias is O(1/n).
pub const DISCRETE_RIDGE: f64 = 0.1;

/// Default ridge penalty for a target: [`DISCRETE_RIDGE`] for binary and
/// categorical targets, [`glm::DEFAULT_RIDGE`] for continuous ones.
pub fn target_ridge(target: &Target) -> f64 {
    match target {
        Target::Binary(_) | Target::Categorical { .. } => DISCRETE_RIDGE,
        Target::Continuous(_) => glm::DEFAULT_RIDGE,
    }
}

pub fn fit_target(x: &DMatrix<f64>, target: &Target, ridge: f64) -> Result<Fitted> {
    Ok(match target {
        Target::Binary(y) => Fitted::Binary(glm::fit_binary_glm(x, y, ridge)?),
        Target::Categorical { levels, k } => {
            Fitted::Multinomial(glm::fit_multinomial(x, levels, *k, ridge)?)
        }
        Target::Continuous(y) => Fitted::Linear(glm::fit_linear(x, y, ridge)?),
    })
}

const PROB_FLOOR: f64 = 1e-15;

/// Mean per-row loss of `fitted` on the rows of `x`.
pub fn mean_loss(fitted: &Fitted, x: &DMatrix<f64>, target: &Target, loss: Loss) -> f64 {
    let n = target.len().max(1) as f64;
    let total: f64 = match (fitted, target) {
        (Fitted::Binary(f), Target::Binary(y)) | (Fitted::Binary(f), Target::Continuous(y)) => f
            .predict(x)
            .into_iter()
            .zip(y)
            .map(|(p, &t)| match loss {
                Loss::NegLogLik => {
                    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                }
                Loss::SquaredError => (t - p) * (t - p),
            })
            .sum(),
        (Fitted::Multinomial(f), Target::Categorical { levels, .. }) => {
            let coef = DMatrix::from_fn(f.p, f.k - 1, |j, l| f.coef[l * f.p + j]);
            let eta = x * coef;
            let mut probs = vec![0.0; f.k];
            let mut total = 0.0;
            for (r, &level) in levels.iter().enumerate() {
                probs[0] = 0.0;
                for l in 1..f.k {
                    probs[l] = eta[(r, l - 1)];
                }
                let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let norm: f64 = probs.iter().map(|v| (v - max).exp()).sum();
                total += match loss {
                    Loss::NegLogLik => -(probs[level] - max - norm.ln()),
                    Loss::SquaredError => probs
                        .iter()
                        .enumerate()
                        .map(|(l, v)| {
                            let p = (v - max).exp() / norm;
                            let t = (l == level) as u8 as f64;
                            (t - p) * (t - p)
                        })
                        .sum(),
                };
            }
            total
        }
        (Fitted::Linear(f), Target::Continuous(y)) | (Fitted::Linear(f), Target::Binary(y)) => {
            let pred = x * DVector::from_column_slice(&f.coef);
            let sq: f64 = pred.iter().zip(y).map(|(p, t)| (t - p) * (t - p)).sum();
            match loss {
                Loss::SquaredError => sq,
                Loss::NegLogLik => 0.5 * sq,
            }
        }
        _ => f64::INFINITY,
    };
    total / n
}

fn prefix(x: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    x.columns(0, dim).into_owned()
}

/// Picks the candidate family with the lowest cross-validated loss.
///
/// `x` is the design at the widest candidate family; narrower families use a
/// column prefix (see [`features`]). Ties go to the earlier candidate. A
/// candidate whose fit fails on any fold receives infinite loss; an error is
/// returned only if every candidate fails.
pub fn cv_select(
    candidates: &[Family],
    encoder: &Encoder,
    x: &DMatrix<f64>,
    target: &Target,
    folds: &FoldAssignment,
    loss: Loss,
) -> Result<Family> {
    match candidates {
        [] => return Err(Error::Argument("no candidate families".into())),
        [only] => return Ok(*only),
        _ => {}
    }
    let splits: Vec<_> = (0..folds.q())
        .map(|k| {
            let train = folds.training(k);
            let valid = folds.validation(k);
            (
                x.select_rows(train.iter()),
                target.select(&train),
                x.select_rows(valid.iter()),
                target.select(&valid),
            )
        })
        .collect();
    let mut best: Option<(Family, f64)> = None;
    let mut last_error = None;
    for &family in candidates {
        let dim = encoder.dim(family);
        let mut risk = 0.0;
        for (x_train, t_train, x_valid, t_valid) in &splits {
            match fit_target(&prefix(x_train, dim), t_train, target_ridge(t_train)) {
                Ok(fit) => {
                    risk += mean_loss(&fit, &prefix(x_valid, dim), t_valid, loss) * t_valid.len() as f64
                }
                Err(e) => {
                    last_error = Some(e);
                    risk = f64::INFINITY;
                    break;
                }
            }
        }
        log::trace!("cv risk of {}: {risk}", family.name());
        if risk.is_finite() && best.map_or(true, |(_, r)| risk < r) {
            best = Some((family, risk));
        }
    }
    best.map(|(f, _)| f).ok_or_else(|| {
        last_error.unwrap_or_else(|| Error::Fit("every candidate family failed".into()))
    })
}

/// A fitted nuisance model together with its feature encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    kind: NuisanceKind,
    family: Family,
    encoder: Encoder,
    fitted: Fitted,
}

impl Model {
    pub fn kind(&self) -> NuisanceKind {
        self.kind
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn fitted(&self) -> &Fitted {
        &self.fitted
    }

    /// Mean prediction (probability of level 1 for binary targets).
    fn mean(&self, buf: &mut [f64], w: &[f64], a: u8, z: usize, m: usize) -> f64 {
        self.encoder.encode_into(w, a, z, m, self.family, buf);
        match &self.fitted {
            Fitted::Binary(f) => f.predict_row(buf),
            Fitted::Linear(f) => f.predict_row(buf),
            Fitted::Multinomial(_) => unreachable!("categorical model has no scalar mean"),
        }
    }

    fn probs_into(&self, buf: &mut [f64], w: &[f64], a: u8, z: usize, out: &mut [f64]) {
        self.encoder.encode_into(w, a, z, 0, self.family, buf);
        match &self.fitted {
            Fitted::Multinomial(f) => f.predict_row_into(buf, out),
            _ => unreachable!("scalar model has no level probabilities"),
        }
    }

    fn dim(&self) -> usize {
        self.encoder.dim(self.family)
    }
}

/// Per-observation nuisance values: every quantity the functionals and
/// influence functions need, tabulated over all `(a, z, m)`.
///
/// Layout: `g[a·K_Z + z]`, `h_star[(a·K_Z + z)·K_M + m]`, `d` as `h_star`.
/// `c1` is evaluated at the observation's own `(Z, M)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NuisanceValues {
    pub k_z: usize,
    pub k_m: usize,
    pub b1: f64,
    pub c1: f64,
    pub g: Vec<f64>,
    pub h_star: Vec<f64>,
    pub d: Vec<f64>,
}

impl NuisanceValues {
    pub fn zeros(k_z: usize, k_m: usize) -> Self {
        NuisanceValues {
            k_z,
            k_m,
            b1: 0.5,
            c1: 0.5,
            g: vec![0.0; 2 * k_z],
            h_star: vec![0.0; 2 * k_z * k_m],
            d: vec![0.0; 2 * k_z * k_m],
        }
    }

    #[inline]
    fn cell(&self, a: u8, z: usize, m: usize) -> usize {
        (a as usize * self.k_z + z) * self.k_m + m
    }

    /// `P(A = a | W)`.
    #[inline]
    pub fn b(&self, a: u8) -> f64 {
        if a == 1 {
            self.b1
        } else {
            1.0 - self.b1
        }
    }

    /// `P(A = a | Z, M, W)` at the observed `(Z, M)`.
    #[inline]
    pub fn c(&self, a: u8) -> f64 {
        if a == 1 {
            self.c1
        } else {
            1.0 - self.c1
        }
    }

    #[inline]
    pub fn g(&self, a: u8, z: usize) -> f64 {
        self.g[a as usize * self.k_z + z]
    }

    #[inline]
    pub fn h_star(&self, a: u8, z: usize, m: usize) -> f64 {
        self.h_star[self.cell(a, z, m)]
    }

    #[inline]
    pub fn d(&self, a: u8, z: usize, m: usize) -> f64 {
        self.d[self.cell(a, z, m)]
    }

    /// Marginal mediator law `h(m | a, W) = Σ_z h*(m | a, z, W) g(z | a, W)`.
    pub fn h(&self, a: u8, m: usize) -> f64 {
        (0..self.k_z).map(|z| self.h_star(a, z, m) * self.g(a, z)).sum()
    }

    /// `e(a′, W) = Σ_{z,m} d(a*, z, m, W) h*(m | a′, z, W) g(z | a′, W)`.
    pub fn e(&self, a_prime: u8, a_star: u8) -> f64 {
        let mut total = 0.0;
        for z in 0..self.k_z {
            let inner: f64 = (0..self.k_m)
                .map(|m| self.d(a_star, z, m) * self.h_star(a_prime, z, m))
                .sum();
            total += inner * self.g(a_prime, z);
        }
        total
    }

    /// `E(Y | A = a, W)` implied by `(g, h*, d)`.
    pub fn outcome_mean(&self, a: u8) -> f64 {
        self.e(a, a)
    }
}

/// Anything that can produce [`NuisanceValues`] for an observation: fitted
/// models, or the exact conditionals of a known data-generating mechanism.
pub trait NuisanceModel: Sync {
    fn k_z(&self) -> usize;
    fn k_m(&self) -> usize;
    /// Values for covariates `w` and observed `(z, m)`; the observed exposure
    /// does not enter any nuisance evaluation.
    fn predict_all(&self, w: &[f64], z: usize, m: usize) -> NuisanceValues;
}

/// Predictions for the given rows of `data`.
pub fn predict_rows<N: NuisanceModel + ?Sized>(
    model: &N,
    data: &Dataset,
    rows: &[usize],
) -> Vec<NuisanceValues> {
    rows.iter()
        .map(|&i| {
            let o = data.observation(i);
            model.predict_all(o.w, o.z, o.m)
        })
        .collect()
}

/// The five fitted models with the probability floor applied to `b`, `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct NuisanceFit {
    b: Model,
    c: Model,
    g: Model,
    h_star: Model,
    d: Model,
    clip: f64,
    k_z: usize,
    k_m: usize,
}

impl NuisanceFit {
    pub fn model(&self, kind: NuisanceKind) -> &Model {
        match kind {
            NuisanceKind::B => &self.b,
            NuisanceKind::C => &self.c,
            NuisanceKind::G => &self.g,
            NuisanceKind::HStar => &self.h_star,
            NuisanceKind::D => &self.d,
        }
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    /// Selected family per nuisance, in [`NuisanceKind::ALL`] order.
    pub fn families(&self) -> [Family; 5] {
        NuisanceKind::ALL.map(|k| self.model(k).family)
    }

    fn from_models(mut models: Vec<Model>, clip: f64, k_z: usize, k_m: usize) -> NuisanceFit {
        debug_assert_eq!(models.len(), 5);
        let d = models.pop().unwrap();
        let h_star = models.pop().unwrap();
        let g = models.pop().unwrap();
        let c = models.pop().unwrap();
        let b = models.pop().unwrap();
        NuisanceFit {
            b,
            c,
            g,
            h_star,
            d,
            clip,
            k_z,
            k_m,
        }
    }
}

impl NuisanceModel for NuisanceFit {
    fn k_z(&self) -> usize {
        self.k_z
    }

    fn k_m(&self) -> usize {
        self.k_m
    }

    fn predict_all(&self, w: &[f64], z: usize, m: usize) -> NuisanceValues {
        let (k_z, k_m) = (self.k_z, self.k_m);
        let width = NuisanceKind::ALL
            .iter()
            .map(|&k| self.model(k).dim())
            .max()
            .unwrap_or(1);
        let mut buf = vec![0.0; width];
        let lo = self.clip;
        let hi = 1.0 - self.clip;
        let mut v = NuisanceValues::zeros(k_z, k_m);
        v.b1 = self.b.mean(&mut buf, w, 0, 0, 0).clamp(lo, hi);
        v.c1 = self.c.mean(&mut buf, w, 0, z, m).clamp(lo, hi);
        for a in 0..2u8 {
            let start = a as usize * k_z;
            self.g.probs_into(&mut buf, w, a, 0, &mut v.g[start..start + k_z]);
            for zz in 0..k_z {
                let start = (a as usize * k_z + zz) * k_m;
                self.h_star.probs_into(&mut buf, w, a, zz, &mut v.h_star[start..start + k_m]);
                for mm in 0..k_m {
                    v.d[start + mm] = self.d.mean(&mut buf, w, a, zz, mm);
                }
            }
        }
        v
    }
}

/// Checks that `rows` contain both exposure levels and every level of `Z`
/// and `M`.
pub fn check_levels(data: &Dataset, rows: &[usize]) -> Result<()> {
    let mut seen_a = [false; 2];
    let mut seen_z = vec![false; data.k_z()];
    let mut seen_m = vec![false; data.k_m()];
    for &i in rows {
        seen_a[data.a()[i] as usize] = true;
        seen_z[data.z()[i]] = true;
        seen_m[data.m()[i]] = true;
    }
    let missing = |seen: &[bool], variable: &'static str| {
        seen.iter()
            .position(|s| !s)
            .map(|level| Error::MissingLevel { variable, level })
    };
    match missing(&seen_a, "exposure")
        .or_else(|| missing(&seen_z, "intermediate"))
        .or_else(|| missing(&seen_m, "mediator"))
    {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn check_clip(clip: f64) -> Result<()> {
    if clip > 0.0 && clip < 0.5 {
        Ok(())
    } else {
        Err(Error::Argument(format!("clip must lie in (0, 0.5), got {clip}")))
    }
}

/// Fits all five nuisances on `rows` of `data`, selecting each family by
/// internal cross-validation over those rows.
pub fn fit_nuisances(
    data: &Dataset,
    rows: &[usize],
    learners: &LearnerSet,
    clip: f64,
    seed: u64,
) -> Result<NuisanceFit> {
    check_clip(clip)?;
    learners.validate()?;
    if rows.is_empty() {
        return Err(Error::Argument("no training rows".into()));
    }
    check_levels(data, rows)?;
    let mut models = Vec::with_capacity(5);
    for (index, kind) in NuisanceKind::ALL.into_iter().enumerate() {
        let spec = learners.get(kind);
        let encoder = Encoder::fit(kind.inputs(), data, rows);
        let x = encoder.design(data, rows, spec.widest());
        let target = kind.target(data, rows);
        let family = if spec.candidates.len() == 1 {
            spec.candidates[0]
        } else {
            let folds = assign_folds(rows.len(), spec.cv_folds, seed.wrapping_add(index as u64))?;
            cv_select(&spec.candidates, &encoder, &x, &target, &folds, target.natural_loss())?
        };
        let fitted = fit_target(&prefix(&x, encoder.dim(family)), &target, target_ridge(&target))?;
        if !fitted.converged() {
            log::warn!("{} model did not converge", kind.name());
        }
        models.push(Model {
            kind,
            family,
            encoder,
            fitted,
        });
    }
    Ok(NuisanceFit::from_models(models, clip, data.k_z(), data.k_m()))
}

/// Fits the nuisances once per cross-fitting fold, on that fold's training
/// rows.
///
/// Family selection reuses the cross-fitting partition: every candidate is
/// fitted on each training split and scored on the matching held-out fold,
/// and the family with the lowest pooled held-out loss is kept for all folds.
/// The per-fold fits of the winner are exactly the cross-fitted nuisances, so
/// selection costs no extra fits.
pub fn fit_cross_fitted(
    data: &Dataset,
    folds: &FoldAssignment,
    learners: &LearnerSet,
    clip: f64,
) -> Result<Vec<NuisanceFit>> {
    check_clip(clip)?;
    learners.validate()?;
    let q = folds.q();
    let training: Vec<Vec<usize>> = (0..q).map(|k| folds.training(k)).collect();
    let validation: Vec<Vec<usize>> = (0..q).map(|k| folds.validation(k)).collect();
    for (k, rows) in training.iter().enumerate() {
        check_levels(data, rows).map_err(|e| match e {
            Error::MissingLevel { variable, level } => Error::Fold {
                fold: k,
                variable,
                level,
            },
            other => other,
        })?;
    }
    let mut per_fold: Vec<Vec<Model>> = (0..q).map(|_| Vec::with_capacity(5)).collect();
    for kind in NuisanceKind::ALL {
        let spec = learners.get(kind);
        let widest = spec.widest();
        let mut risks = vec![0.0; spec.candidates.len()];
        let mut fits: Vec<Vec<Option<(Encoder, Fitted)>>> = Vec::with_capacity(q);
        let mut last_error = None;
        for k in 0..q {
            let encoder = Encoder::fit(kind.inputs(), data, &training[k]);
            let x_train = encoder.design(data, &training[k], widest);
            let t_train = kind.target(data, &training[k]);
            let scored = spec.candidates.len() > 1;
            let (x_valid, t_valid) = if scored {
                (
                    encoder.design(data, &validation[k], widest),
                    kind.target(data, &validation[k]),
                )
            } else {
                (DMatrix::zeros(0, 0), Target::Binary(Vec::new()))
            };
            let mut fold_fits = Vec::with_capacity(spec.candidates.len());
            for (j, &family) in spec.candidates.iter().enumerate() {
                let dim = encoder.dim(family);
                match fit_target(&prefix(&x_train, dim), &t_train, target_ridge(&t_train)) {
                    Ok(fit) => {
                        if scored {
                            let loss = t_train.natural_loss();
                            risks[j] += mean_loss(&fit, &prefix(&x_valid, dim), &t_valid, loss)
                                * t_valid.len() as f64;
                        }
                        fold_fits.push(Some((encoder.clone(), fit)));
                    }
                    Err(e) => {
                        risks[j] = f64::INFINITY;
                        last_error = Some(e);
                        fold_fits.push(None);
                    }
                }
            }
            fits.push(fold_fits);
        }
        let mut chosen: Option<usize> = None;
        for (j, r) in risks.iter().enumerate() {
            if r.is_finite() && chosen.map_or(true, |c| *r < risks[c]) {
                chosen = Some(j);
            }
        }
        let j = chosen.ok_or_else(|| {
            last_error.unwrap_or_else(|| Error::Fit("every candidate family failed".into()))
        })?;
        let family = spec.candidates[j];
        log::debug!("{}: selected {} (risks {risks:?})", kind.name(), family.name());
        for (k, mut fold_fits) in fits.into_iter().enumerate() {
            let (encoder, fitted) = fold_fits[j].take().expect("chosen candidate fitted on every fold");
            if !fitted.converged() {
                log::warn!("{} model did not converge on fold {k}", kind.name());
            }
            per_fold[k].push(Model {
                kind,
                family,
                encoder,
                fitted,
            });
        }
    }
    Ok(per_fold
        .into_iter()
        .map(|models| NuisanceFit::from_models(models, clip, data.k_z(), data.k_m()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_data(n: usize, seed: u64, y_const: Option<f64>) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Vec::with_capacity(n * 2);
        let (mut a, mut z, mut m, mut y) = (vec![], vec![], vec![], vec![]);
        for _ in 0..n {
            let w1: f64 = rng.random();
            let w2: f64 = rng.random();
            w.extend([w1, w2]);
            let ai = rng.random_bool(glm::logistic(w1 - 0.5)) as u8;
            let zi = (rng.random::<f64>() < 0.3 + 0.3 * ai as f64) as usize
                + (rng.random::<f64>() < 0.5) as usize;
            let mi = (rng.random::<f64>() < 0.2 + 0.1 * zi as f64 + 0.2 * ai as f64) as usize;
            let yi = y_const.unwrap_or_else(|| {
                rng.random_bool(glm::logistic(-0.5 + 0.5 * mi as f64 + 0.3 * zi as f64 + w2)) as u8 as f64
            });
            a.push(ai);
            z.push(zi);
            m.push(mi);
            y.push(yi);
        }
        Dataset::new(vec!["w1".into(), "w2".into()], w, a, z, m, y, 3, 2).unwrap()
    }

    #[test]
    fn linear_truth_prefers_main_effects() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 400;
        let encoder = Encoder::new(
            Inputs { exposure: false, intermediate: false, mediator: false },
            2,
            2,
            vec![0.0],
            vec![1.0],
        );
        let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let y: Vec<f64> = xs.iter().map(|v| 2.0 * v + 0.1 * (rng.random::<f64>() - 0.5)).collect();
        let folds = assign_folds(n, 5, 1).unwrap();
        let chosen = cv_select(
            &[Family::InterceptOnly, Family::MainEffects],
            &encoder,
            &x,
            &Target::Continuous(y),
            &folds,
            Loss::SquaredError,
        )
        .unwrap();
        assert_eq!(chosen, Family::MainEffects);
    }

    #[test]
    fn pure_noise_usually_prefers_intercept() {
        let encoder = Encoder::new(
            Inputs { exposure: false, intermediate: false, mediator: false },
            2,
            2,
            vec![0.0; 3],
            vec![1.0; 3],
        );
        let n = 200;
        let mut wins = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let w: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let x = DMatrix::from_fn(n, 4, |i, j| if j == 0 { 1.0 } else { w[i][j - 1] });
            let y: Vec<f64> = (0..n).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
            let folds = assign_folds(n, 5, seed).unwrap();
            let chosen = cv_select(
                &[Family::InterceptOnly, Family::MainEffects],
                &encoder,
                &x,
                &Target::Binary(y),
                &folds,
                Loss::NegLogLik,
            )
            .unwrap();
            wins += (chosen == Family::InterceptOnly) as usize;
        }
        assert!(wins > 10, "intercept-only chosen {wins}/20 times");
    }

    #[test]
    fn single_candidate_returned_without_fitting() {
        let encoder = Encoder::new(
            Inputs { exposure: false, intermediate: false, mediator: false },
            2,
            2,
            vec![],
            vec![],
        );
        // An empty design would fail to fit, so success shows no fit ran.
        let x = DMatrix::zeros(0, 0);
        let folds = assign_folds(2, 2, 0).unwrap();
        let chosen = cv_select(
            &[Family::Interactions],
            &encoder,
            &x,
            &Target::Binary(vec![]),
            &folds,
            Loss::NegLogLik,
        )
        .unwrap();
        assert_eq!(chosen, Family::Interactions);
    }

    #[test]
    fn categorical_predictions_are_normalised() {
        let data = toy_data(600, 1, None);
        let rows: Vec<usize> = (0..data.len()).collect();
        let fit = fit_nuisances(&data, &rows, &LearnerSet::default(), DEFAULT_CLIP, 9).unwrap();
        for v in predict_rows(&fit, &data, &rows[..50]) {
            for a in 0..2u8 {
                let gs: f64 = (0..3).map(|z| v.g(a, z)).sum();
                assert!((gs - 1.0).abs() < 1e-10);
                for z in 0..3 {
                    let hs: f64 = (0..2).map(|m| v.h_star(a, z, m)).sum();
                    assert!((hs - 1.0).abs() < 1e-10);
                }
                let h: f64 = (0..2).map(|m| v.h(a, m)).sum();
                assert!((h - 1.0).abs() < 1e-10);
            }
            assert!(v.b1 >= DEFAULT_CLIP && v.b1 <= 1.0 - DEFAULT_CLIP);
            assert!(v.c1 >= DEFAULT_CLIP && v.c1 <= 1.0 - DEFAULT_CLIP);
        }
    }

    #[test]
    fn constant_outcome_is_reproduced() {
        // The ridge keeps the fit finite; its O(1/n) pull away from 1 is
        // below 0.01 at this size.
        let data = toy_data(1000, 2, Some(1.0));
        let rows: Vec<usize> = (0..data.len()).collect();
        let fit = fit_nuisances(&data, &rows, &LearnerSet::default(), DEFAULT_CLIP, 1).unwrap();
        for v in predict_rows(&fit, &data, &rows[..20]) {
            assert!(v.d.iter().all(|&d| d > 0.99), "d = {:?}", v.d);
            assert!((v.e(1, 0) - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn missing_level_is_reported() {
        let data = toy_data(200, 4, None);
        let rows: Vec<usize> = (0..data.len()).filter(|&i| data.z()[i] != 2).collect();
        let err = fit_nuisances(&data, &rows, &LearnerSet::default(), DEFAULT_CLIP, 1).unwrap_err();
        assert!(matches!(err, Error::MissingLevel { variable: "intermediate", level: 2 }));
    }

    #[test]
    fn marginalisation_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut v = NuisanceValues::zeros(3, 4);
        v.g.iter_mut().for_each(|x| *x = rng.random());
        v.h_star.iter_mut().for_each(|x| *x = rng.random());
        for a in 0..2u8 {
            for m in 0..4 {
                let mut brute = 0.0;
                for z in 0..3 {
                    brute += v.h_star[(a as usize * 3 + z) * 4 + m] * v.g[a as usize * 3 + z];
                }
                assert_eq!(v.h(a, m), brute);
            }
        }
    }

    #[test]
    fn cross_fitted_fits_one_model_per_fold() {
        let data = toy_data(500, 6, None);
        let folds = assign_folds(data.len(), 3, 2).unwrap();
        let fits = fit_cross_fitted(&data, &folds, &LearnerSet::default(), DEFAULT_CLIP).unwrap();
        assert_eq!(fits.len(), 3);
        // Selection is shared across folds.
        assert!(fits.iter().all(|f| f.families() == fits[0].families()));
    }
}

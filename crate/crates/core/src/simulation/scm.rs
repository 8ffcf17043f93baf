//! The simulation data-generating mechanism and its exact conditionals.
//!
//! ```text
//! X = (X₁, X₂, X₃),  Xⱼ ~ Beta(2, 3) independently
//! A | X       ~ Bern(σ(0.5X₁ + 0.5X₂ − 1))
//! Z | A, X    ~ Bin(3, σ(−1.7 + κA + 0.5X₃²))                      κ = 1.5 by default
//! M | Z, A, X ~ Bin(3, σ(−1.5 + λ₁Z + λ₂A + 0.4X₂ + 0.2X₃))
//! Y | M, Z, A, X ~ Bern(σ(0.4M + γ₁Z + γ₂A − 0.5cos X₁ − 1.5))
//! ```
//!
//! Exogenous errors are uniforms: `Z(a) = Σₖ 1{U_Z,k < p_Z(a, X)}` for three
//! independent `U_Z,k`, and likewise for `M` and `Y`. Sharing the uniforms
//! across interventions gives the counterfactual coupling used by the
//! counterfactual oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nuisance::glm::logistic;
use crate::nuisance::{NuisanceModel, NuisanceValues};

/// Number of binomial trials for `Z` and `M`; both take values `0..=3`.
pub const TRIALS: usize = 3;
pub const LEVELS: usize = TRIALS + 1;

/// Which covariates the analyst sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateMode {
    /// The covariates that generate the data.
    X,
    /// The transform `W₁ = exp(X₁ − 1)`, `W₂ = (X₁ + X₂²)/4`, `W₃ = sin X₃`,
    /// under which the learner library is misspecified.
    W,
}

impl CovariateMode {
    pub fn name(self) -> &'static str {
        match self {
            CovariateMode::X => "x",
            CovariateMode::W => "w",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(CovariateMode::X),
            "w" => Ok(CovariateMode::W),
            other => Err(Error::Argument(format!("unknown covariate mode {other:?} (expected x or w)"))),
        }
    }

    fn apply(self, x: [f64; 3]) -> [f64; 3] {
        match self {
            CovariateMode::X => x,
            CovariateMode::W => [(x[0] - 1.0).exp(), (x[0] + x[1] * x[1]) / 4.0, x[2].sin()],
        }
    }
}

/// Structural coefficients. The four named settings each zero one of
/// `λ₁, λ₂, γ₁, γ₂`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScmConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Coefficient of `A` in the `Z` equation (1.5 in every named setting;
    /// zero removes the `A → Z` edge).
    #[serde(default = "default_z_exposure")]
    pub z_exposure: f64,
    #[serde(default = "default_mode")]
    pub covariate_mode: CovariateMode,
}

fn default_z_exposure() -> f64 {
    1.5
}

fn default_mode() -> CovariateMode {
    CovariateMode::X
}

impl Default for ScmConfig {
    fn default() -> Self {
        ScmConfig {
            lambda1: 1.2,
            lambda2: 1.5,
            gamma1: 1.2,
            gamma2: 1.2,
            z_exposure: default_z_exposure(),
            covariate_mode: CovariateMode::X,
        }
    }
}

impl ScmConfig {
    /// Exposure has no effect on anything downstream.
    pub fn null() -> Self {
        ScmConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            gamma1: 0.0,
            gamma2: 0.0,
            z_exposure: 0.0,
            covariate_mode: CovariateMode::X,
        }
    }

    pub fn with_mode(mut self, mode: CovariateMode) -> Self {
        self.covariate_mode = mode;
        self
    }

    pub fn p_a(&self, x: &[f64]) -> f64 {
        logistic(0.5 * x[0] + 0.5 * x[1] - 1.0)
    }

    pub fn p_z(&self, a: u8, x: &[f64]) -> f64 {
        logistic(-1.7 + self.z_exposure * a as f64 + 0.5 * x[2] * x[2])
    }

    pub fn p_m(&self, a: u8, z: usize, x: &[f64]) -> f64 {
        logistic(-1.5 + self.lambda1 * z as f64 + self.lambda2 * a as f64 + 0.4 * x[1] + 0.2 * x[2])
    }

    pub fn p_y(&self, a: u8, z: usize, m: usize, x: &[f64]) -> f64 {
        logistic(
            0.4 * m as f64 + self.gamma1 * z as f64 + self.gamma2 * a as f64 - 0.5 * x[0].cos() - 1.5,
        )
    }
}

/// The named simulation settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    Default,
    /// Setting 1: `λ₁ = 0`, no `Z → M` edge.
    Lambda1Zero,
    /// Setting 2: `λ₂ = 0`, no `A → M` edge.
    Lambda2Zero,
    /// Setting 3: `γ₁ = 0`, no `Z → Y` edge.
    Gamma1Zero,
    /// Setting 4: `γ₂ = 0`, no `A → Y` edge.
    Gamma2Zero,
}

impl Setting {
    pub const ALL: [Setting; 5] = [
        Setting::Default,
        Setting::Lambda1Zero,
        Setting::Lambda2Zero,
        Setting::Gamma1Zero,
        Setting::Gamma2Zero,
    ];
    /// The four settings that zero one coefficient each.
    pub const STUDY: [Setting; 4] = [
        Setting::Lambda1Zero,
        Setting::Lambda2Zero,
        Setting::Gamma1Zero,
        Setting::Gamma2Zero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Setting::Default => "default",
            Setting::Lambda1Zero => "lambda1-zero",
            Setting::Lambda2Zero => "lambda2-zero",
            Setting::Gamma1Zero => "gamma1-zero",
            Setting::Gamma2Zero => "gamma2-zero",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Setting::ALL.iter().map(|x| x.name()).collect();
                Error::Argument(format!("unknown setting {s:?} (expected one of {})", names.join(", ")))
            })
    }

    pub fn config(self) -> ScmConfig {
        let mut cfg = ScmConfig::default();
        match self {
            Setting::Default => {}
            Setting::Lambda1Zero => cfg.lambda1 = 0.0,
            Setting::Lambda2Zero => cfg.lambda2 = 0.0,
            Setting::Gamma1Zero => cfg.gamma1 = 0.0,
            Setting::Gamma2Zero => cfg.gamma2 = 0.0,
        }
        cfg
    }
}

/// `P(Bin(3, p) = k)` for `k = 0..=3`.
pub fn binomial3_pmf(p: f64) -> [f64; LEVELS] {
    let q = 1.0 - p;
    [q * q * q, 3.0 * p * q * q, 3.0 * p * p * q, p * p * p]
}

/// Exogenous errors of one unit.
#[derive(Clone, Copy, Debug)]
pub struct Exogenous {
    pub x: [f64; 3],
    pub u_a: f64,
    pub u_z: [f64; TRIALS],
    pub u_m: [f64; TRIALS],
    pub u_y: f64,
}

/// Draws covariates and errors in a fixed order so a seed fully determines
/// a sample.
pub struct ExogenousSampler {
    rng: ChaCha8Rng,
    beta: Beta<f64>,
}

impl ExogenousSampler {
    pub fn new(seed: u64) -> Self {
        ExogenousSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            beta: Beta::new(2.0, 3.0).expect("valid beta parameters"),
        }
    }

    pub fn covariates(&mut self) -> [f64; 3] {
        [
            self.beta.sample(&mut self.rng),
            self.beta.sample(&mut self.rng),
            self.beta.sample(&mut self.rng),
        ]
    }

    pub fn uniforms<const K: usize>(&mut self) -> [f64; K] {
        std::array::from_fn(|_| self.rng.random())
    }

    pub fn draw(&mut self) -> Exogenous {
        let x = self.covariates();
        Exogenous {
            x,
            u_a: self.rng.random(),
            u_z: self.uniforms(),
            u_m: self.uniforms(),
            u_y: self.rng.random(),
        }
    }
}

/// Number of the three uniforms below `p`.
pub fn count_below(u: &[f64; TRIALS], p: f64) -> usize {
    u.iter().filter(|&&v| v < p).count()
}

impl ScmConfig {
    /// `Z(a)` under errors `u`.
    pub fn z_of(&self, a: u8, u: &Exogenous) -> usize {
        count_below(&u.u_z, self.p_z(a, &u.x))
    }

    /// `M(a, z)` under errors `u`.
    pub fn m_of(&self, a: u8, z: usize, u: &Exogenous) -> usize {
        count_below(&u.u_m, self.p_m(a, z, &u.x))
    }

    /// `Y(a, z, m)` under errors `u`.
    pub fn y_of(&self, a: u8, z: usize, m: usize, u: &Exogenous) -> f64 {
        (u.u_y < self.p_y(a, z, m, &u.x)) as u8 as f64
    }
}

/// Draws `n` observations. Covariate columns are named `w1, w2, w3` and hold
/// `X` or its transform according to `cfg.covariate_mode`; `(A, Z, M, Y)`
/// are always generated from `X`.
pub fn simulate_observed(cfg: &ScmConfig, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Argument("sample size must be positive".into()));
    }
    let mut sampler = ExogenousSampler::new(seed);
    let mut w = Vec::with_capacity(3 * n);
    let mut a = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let u = sampler.draw();
        let ai = (u.u_a < cfg.p_a(&u.x)) as u8;
        let zi = cfg.z_of(ai, &u);
        let mi = cfg.m_of(ai, zi, &u);
        y.push(cfg.y_of(ai, zi, mi, &u));
        w.extend(cfg.covariate_mode.apply(u.x));
        a.push(ai);
        z.push(zi);
        m.push(mi);
    }
    Dataset::new(
        vec!["w1".into(), "w2".into(), "w3".into()],
        w,
        a,
        z,
        m,
        y,
        LEVELS,
        LEVELS,
    )
}

/// The exact conditionals of the mechanism, as a nuisance model over `X`.
/// `c` follows from Bayes' rule; nothing is clipped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrueNuisance {
    pub cfg: ScmConfig,
}

impl TrueNuisance {
    pub fn new(cfg: ScmConfig) -> Self {
        TrueNuisance { cfg }
    }
}

impl NuisanceModel for TrueNuisance {
    fn k_z(&self) -> usize {
        LEVELS
    }

    fn k_m(&self) -> usize {
        LEVELS
    }

    fn predict_all(&self, x: &[f64], z: usize, m: usize) -> NuisanceValues {
        let cfg = &self.cfg;
        let mut v = NuisanceValues::zeros(LEVELS, LEVELS);
        v.b1 = cfg.p_a(x);
        for a in 0..2u8 {
            let g = binomial3_pmf(cfg.p_z(a, x));
            v.g[a as usize * LEVELS..(a as usize + 1) * LEVELS].copy_from_slice(&g);
            for zz in 0..LEVELS {
                let h = binomial3_pmf(cfg.p_m(a, zz, x));
                let start = (a as usize * LEVELS + zz) * LEVELS;
                v.h_star[start..start + LEVELS].copy_from_slice(&h);
                for mm in 0..LEVELS {
                    v.d[start + mm] = cfg.p_y(a, zz, mm, x);
                }
            }
        }
        let joint = |a: u8| v.b(a) * v.g(a, z) * v.h_star(a, z, m);
        v.c1 = joint(1) / (joint(0) + joint(1));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pmf_sums_to_one() {
        for p in [0.0, 0.1, 0.5, 0.93, 1.0] {
            let s: f64 = binomial3_pmf(p).iter().sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn settings_zero_one_coefficient() {
        let d = ScmConfig::default();
        assert_eq!((d.lambda1, d.lambda2, d.gamma1, d.gamma2), (1.2, 1.5, 1.2, 1.2));
        for s in Setting::STUDY {
            let c = s.config();
            let zeros = [c.lambda1, c.lambda2, c.gamma1, c.gamma2]
                .iter()
                .filter(|v| **v == 0.0)
                .count();
            assert_eq!(zeros, 1, "{}", s.name());
            assert_eq!(Setting::parse(s.name()).unwrap(), s);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = ScmConfig::default();
        assert_eq!(
            simulate_observed(&cfg, 200, 7).unwrap(),
            simulate_observed(&cfg, 200, 7).unwrap()
        );
        assert_ne!(
            simulate_observed(&cfg, 200, 7).unwrap(),
            simulate_observed(&cfg, 200, 8).unwrap()
        );
    }

    #[test]
    fn zero_rows_rejected() {
        assert!(matches!(
            simulate_observed(&ScmConfig::default(), 0, 1),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn transformed_mode_shares_structure() {
        let x = simulate_observed(&ScmConfig::default(), 50, 3).unwrap();
        let w = simulate_observed(&ScmConfig::default().with_mode(CovariateMode::W), 50, 3).unwrap();
        assert_eq!((x.a(), x.z(), x.m(), x.y()), (w.a(), w.z(), w.m(), w.y()));
        let (xr, wr) = (x.w_row(4), w.w_row(4));
        assert!((wr[0] - (xr[0] - 1.0).exp()).abs() < 1e-15);
        assert!((wr[1] - (xr[0] + xr[1] * xr[1]) / 4.0).abs() < 1e-15);
        assert!((wr[2] - xr[2].sin()).abs() < 1e-15);
    }

    #[test]
    fn bayes_rule_propensity() {
        let t = TrueNuisance::new(ScmConfig::default());
        let x = [0.3, 0.6, 0.2];
        let v = t.predict_all(&x, 2, 1);
        let cfg = ScmConfig::default();
        let num = cfg.p_a(&x) * binomial3_pmf(cfg.p_z(1, &x))[2] * binomial3_pmf(cfg.p_m(1, 2, &x))[1];
        let den = num
            + (1.0 - cfg.p_a(&x)) * binomial3_pmf(cfg.p_z(0, &x))[2] * binomial3_pmf(cfg.p_m(0, 2, &x))[1];
        assert!((v.c1 - num / den).abs() < 1e-15);
    }
}

//! The seven identified counterfactual means, their efficient influence
//! functions, and the path decomposition of the average treatment effect.
//!
//! With `a′` the active and `a*` the reference exposure level, and writing
//! `g(a, z) = P(z | a, W)`, `h*(a, z, m) = P(m | a, z, W)`,
//! `h(a, m) = Σ_z h*(a, z, m) g(a, z)` and `d(a, z, m) = E(Y | a, z, m, W)`,
//! each target is the mean over `W` of a conditional functional `θ(W)`:
//!
//! | target | `θ(W)`                                                      |
//! |--------|-------------------------------------------------------------|
//! | `S0`   | `Σ_{z,m} d(a′,z,m) g(a′,z) h*(a′,z,m)`                      |
//! | `S1`   | `Σ_{z,m} d(a*,z,m) g(a′,z) h*(a′,z,m)`                      |
//! | `S1'`  | `Σ_{z,m} d(a*,z,m) g(a′,z) h(a′,m)`                         |
//! | `S2'`  | `Σ_{z,m} d(a*,z,m) g(a*,z) h(a′,m)`                         |
//! | `S3''` | `Σ_{z,m,z′} d(a*,z,m) g(a*,z) h*(a′,z′,m) g(a*,z′)`         |
//! | `S3`   | `Σ_{z,m} d(a*,z,m) g(a*,z) h*(a′,z,m)`                      |
//! | `S4`   | `Σ_{z,m} d(a*,z,m) g(a*,z) h*(a*,z,m)`                      |
//!
//! `S2'` stands for both twin counterfactuals of the second stage, whose
//! means are identified by the same functional.

use std::fmt;
use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nuisance::{NuisanceModel, NuisanceValues};

/// One of the seven identified counterfactual means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetId {
    S0,
    S1,
    S1P,
    S2P,
    S3PP,
    S3,
    S4,
}

impl TargetId {
    pub const ALL: [TargetId; 7] = [
        TargetId::S0,
        TargetId::S1,
        TargetId::S1P,
        TargetId::S2P,
        TargetId::S3PP,
        TargetId::S3,
        TargetId::S4,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Stable machine-readable name.
    pub fn key(self) -> &'static str {
        match self {
            TargetId::S0 => "theta_s0",
            TargetId::S1 => "theta_s1",
            TargetId::S1P => "theta_s1p",
            TargetId::S2P => "theta_s2p",
            TargetId::S3PP => "theta_s3pp",
            TargetId::S3 => "theta_s3",
            TargetId::S4 => "theta_s4",
        }
    }

    /// Human-readable label.
    pub fn label(self) -> &'static str {
        match self {
            TargetId::S0 => "E[Y_S0]",
            TargetId::S1 => "E[Y_S1]",
            TargetId::S1P => "E[Y'_S1]",
            TargetId::S2P => "E[Y'_S2] = E[Y''_S2]",
            TargetId::S3PP => "E[Y''_S3]",
            TargetId::S3 => "E[Y_S3]",
            TargetId::S4 => "E[Y_S4]",
        }
    }
}

impl fmt::Display for TargetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Active (`a′`) and reference (`a*`) exposure levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefLevels {
    pub a_prime: u8,
    pub a_star: u8,
}

impl Default for RefLevels {
    fn default() -> Self {
        RefLevels {
            a_prime: 1,
            a_star: 0,
        }
    }
}

impl RefLevels {
    pub fn new(a_prime: u8, a_star: u8) -> Result<Self> {
        if a_prime > 1 || a_star > 1 || a_prime == a_star {
            return Err(Error::Argument(format!(
                "reference levels must be distinct values in {{0, 1}} (got a'={a_prime}, a*={a_star})"
            )));
        }
        Ok(RefLevels { a_prime, a_star })
    }
}

/// A value per target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaSet(pub [f64; 7]);

impl ThetaSet {
    pub fn get(&self, t: TargetId) -> f64 {
        self.0[t.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (TargetId, f64)> + '_ {
        TargetId::ALL.into_iter().map(|t| (t, self.get(t)))
    }
}

impl Index<TargetId> for ThetaSet {
    type Output = f64;

    fn index(&self, t: TargetId) -> &f64 {
        &self.0[t.index()]
    }
}

/// The four path effects, the intermediate-confounding term and the ATE.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PathId {
    P1,
    P2,
    P3,
    P4,
    Int,
    Ate,
}

impl PathId {
    pub const ALL: [PathId; 6] = [PathId::P1, PathId::P2, PathId::P3, PathId::P4, PathId::Int, PathId::Ate];
    /// The five components that add up to the ATE.
    pub const COMPONENTS: [PathId; 5] = [PathId::P1, PathId::P2, PathId::P3, PathId::P4, PathId::Int];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn key(self) -> &'static str {
        match self {
            PathId::P1 => "psi_p1",
            PathId::P2 => "psi_p2",
            PathId::P3 => "psi_p3",
            PathId::P4 => "psi_p4",
            PathId::Int => "psi_int",
            PathId::Ate => "ate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        PathId::ALL
            .into_iter()
            .find(|p| p.key() == s)
            .ok_or_else(|| Error::Argument(format!("unknown path {s:?}")))
    }

    pub fn label(self) -> &'static str {
        match self {
            PathId::P1 => "P1: A -> Y",
            PathId::P2 => "P2: A -> Z -> Y",
            PathId::P3 => "P3: A -> Z -> M -> Y",
            PathId::P4 => "P4: A -> M -> Y",
            PathId::Int => "intermediate confounding",
            PathId::Ate => "ATE",
        }
    }

    /// Signed target weights defining the effect as a linear contrast.
    pub fn weights(self) -> &'static [(TargetId, f64)] {
        use TargetId::*;
        match self {
            PathId::P1 => &[(S0, 1.0), (S1, -1.0)],
            PathId::P2 => &[(S1P, 1.0), (S2P, -1.0)],
            PathId::P3 => &[(S2P, 1.0), (S3PP, -1.0)],
            PathId::P4 => &[(S3, 1.0), (S4, -1.0)],
            PathId::Int => &[(S1, 1.0), (S1P, -1.0), (S3PP, 1.0), (S3, -1.0)],
            PathId::Ate => &[(S0, 1.0), (S4, -1.0)],
        }
    }

    /// The contrast applied to per-target values.
    pub fn contrast(self, values: &[f64; 7]) -> f64 {
        self.weights().iter().map(|&(t, w)| w * values[t.index()]).sum()
    }
}

impl fmt::Display for PathId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathEffects {
    pub psi_p1: f64,
    pub psi_p2: f64,
    pub psi_p3: f64,
    pub psi_p4: f64,
    pub psi_int: f64,
    pub ate: f64,
}

impl PathEffects {
    pub fn get(&self, p: PathId) -> f64 {
        match p {
            PathId::P1 => self.psi_p1,
            PathId::P2 => self.psi_p2,
            PathId::P3 => self.psi_p3,
            PathId::P4 => self.psi_p4,
            PathId::Int => self.psi_int,
            PathId::Ate => self.ate,
        }
    }

    pub fn from_fn(mut f: impl FnMut(PathId) -> f64) -> Self {
        PathEffects {
            psi_p1: f(PathId::P1),
            psi_p2: f(PathId::P2),
            psi_p3: f(PathId::P3),
            psi_p4: f(PathId::P4),
            psi_int: f(PathId::Int),
            ate: f(PathId::Ate),
        }
    }

    /// Sum of the five components, which equals the ATE.
    pub fn component_sum(&self) -> f64 {
        self.psi_p1 + self.psi_p2 + self.psi_p3 + self.psi_p4 + self.psi_int
    }
}

/// The path effects implied by a set of target values.
pub fn decompose(thetas: &ThetaSet) -> PathEffects {
    PathEffects::from_fn(|p| p.contrast(&thetas.0))
}

/// One observed data point `(A, Z, M, Y)`; covariates enter only through
/// the nuisance values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub a: u8,
    pub z: usize,
    pub m: usize,
    pub y: f64,
}

/// Per-observation output for all seven targets: the conditional functional
/// `θ(W)` and the influence function plus its centring constant, `φ + θ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowTerms {
    pub theta_w: [f64; 7],
    pub eif_plus_theta: [f64; 7],
}

/// Conditional functionals `θ(W)` for all targets.
pub fn conditional_values(refs: RefLevels, v: &NuisanceValues) -> [f64; 7] {
    Sums::new(refs, v).theta
}

/// Intermediate sums shared by the functionals and influence functions.
struct Sums {
    /// `h(a′, m)`.
    h_ap: Vec<f64>,
    /// `H(m) = Σ_z′ h*(a′, z′, m) g(a*, z′)`.
    h_cross: Vec<f64>,
    /// `F*(m) = Σ_z d(a*, z, m) g(a*, z)`.
    f_star: Vec<f64>,
    /// `F′(m) = Σ_z d(a*, z, m) g(a′, z)`.
    f_prime: Vec<f64>,
    theta: [f64; 7],
}

impl Sums {
    fn new(refs: RefLevels, v: &NuisanceValues) -> Self {
        let (ap, at) = (refs.a_prime, refs.a_star);
        let (kz, km) = (v.k_z, v.k_m);
        let mut h_ap = vec![0.0; km];
        let mut h_cross = vec![0.0; km];
        let mut f_star = vec![0.0; km];
        let mut f_prime = vec![0.0; km];
        let mut s0 = 0.0;
        let mut s1 = 0.0;
        let mut s3 = 0.0;
        let mut s4 = 0.0;
        for z in 0..kz {
            let (g_ap, g_at) = (v.g(ap, z), v.g(at, z));
            let (mut i0, mut i1, mut i3, mut i4) = (0.0, 0.0, 0.0, 0.0);
            for m in 0..km {
                let d_at = v.d(at, z, m);
                let hs_ap = v.h_star(ap, z, m);
                h_ap[m] += hs_ap * g_ap;
                h_cross[m] += hs_ap * g_at;
                f_star[m] += d_at * g_at;
                f_prime[m] += d_at * g_ap;
                i0 += v.d(ap, z, m) * hs_ap;
                i1 += d_at * hs_ap;
                i3 += d_at * hs_ap;
                i4 += d_at * v.h_star(at, z, m);
            }
            s0 += i0 * g_ap;
            s1 += i1 * g_ap;
            s3 += i3 * g_at;
            s4 += i4 * g_at;
        }
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let s1p = dot(&f_prime, &h_ap);
        let s2p = dot(&f_star, &h_ap);
        let s3pp = dot(&f_star, &h_cross);
        Sums {
            h_ap,
            h_cross,
            f_star,
            f_prime,
            theta: [s0, s1, s1p, s2p, s3pp, s3, s4],
        }
    }
}

/// `θ(W)` and `φ + θ` for all targets at one observation.
///
/// Terms whose exposure indicator is zero are skipped rather than multiplied
/// out, so zero probabilities in unused denominators are harmless.
pub fn row_terms(refs: RefLevels, v: &NuisanceValues, p: Point) -> RowTerms {
    let (ap, at) = (refs.a_prime, refs.a_star);
    let s = Sums::new(refs, v);
    let th = s.theta;
    let km = v.k_m;
    let (z, m) = (p.z, p.m);
    let is_ap = p.a == ap;
    let is_at = p.a == at;
    let b_ap = v.b(ap);
    let b_at = v.b(at);
    let mut out = th;

    // Outcome-regression residual terms, active only when A = a*.
    if is_at {
        let resid = p.y - v.d(at, z, m);
        let hs_at = v.h_star(at, z, m);
        let inner = |weights: &dyn Fn(usize) -> f64| -> f64 {
            (0..km).map(|mm| v.d(at, z, mm) * weights(mm)).sum()
        };
        // S4: augmented IPW for E(Y | a*, W).
        out[6] += (p.y - th[6]) / b_at;
        // S1: density ratio through c.
        out[1] += v.c(ap) / v.c(at) / b_ap * resid;
        // S1': t1 and no t2 (t2 needs A = a′).
        out[2] += v.g(ap, z) * s.h_ap[m] / (v.g(at, z) * hs_at * b_at) * resid;
        // S2': t1 and t2 (a_j = a*).
        out[3] += s.h_ap[m] / (hs_at * b_at) * resid;
        out[3] += (inner(&|mm| s.h_ap[mm]) - th[3]) / b_at;
        // S3'': t1, t2, t4.
        out[4] += s.h_cross[m] / (hs_at * b_at) * resid;
        out[4] += (inner(&|mm| s.h_cross[mm]) - th[4]) / b_at;
        let g_term: f64 = (0..km).map(|mm| s.f_star[mm] * v.h_star(ap, z, mm)).sum();
        out[4] += (g_term - th[4]) / b_at;
        // S3: t1, t2.
        out[5] += v.h_star(ap, z, m) / (hs_at * b_at) * resid;
        out[5] += (inner(&|mm| v.h_star(ap, z, mm)) - th[5]) / b_at;
    }
    if is_ap {
        let d_at = v.d(at, z, m);
        // S0: augmented IPW for E(Y | a′, W).
        out[0] += (p.y - th[0]) / b_ap;
        // S1: nested regression term.
        out[1] += (d_at - th[1]) / b_ap;
        // S1': t2 (a_j = a′) and t3.
        let inner: f64 = (0..km).map(|mm| v.d(at, z, mm) * s.h_ap[mm]).sum();
        out[2] += (inner - th[2]) / b_ap;
        out[2] += (s.f_prime[m] - th[2]) / b_ap;
        // S2': t3.
        out[3] += (s.f_star[m] - th[3]) / b_ap;
        // S3'': t3.
        let ratio = v.g(at, z) / (v.g(ap, z) * b_ap);
        let centred: f64 = (0..km).map(|mm| s.f_star[mm] * v.h_star(ap, z, mm)).sum();
        out[4] += ratio * (s.f_star[m] - centred);
        // S3: t3.
        let centred: f64 = (0..km).map(|mm| v.d(at, z, mm) * v.h_star(ap, z, mm)).sum();
        out[5] += ratio * (d_at - centred);
    }
    RowTerms {
        theta_w: th,
        eif_plus_theta: out,
    }
}

/// Plug-in value: the mean of `θ(W)` over `rows` of `data`.
pub fn plugin_value<N: NuisanceModel + ?Sized>(
    target: TargetId,
    refs: RefLevels,
    model: &N,
    data: &Dataset,
    rows: &[usize],
) -> f64 {
    let total: f64 = rows
        .iter()
        .map(|&i| {
            let o = data.observation(i);
            conditional_values(refs, &model.predict_all(o.w, o.z, o.m))[target.index()]
        })
        .sum();
    total / rows.len() as f64
}

/// Influence-function values `φ(Oᵢ)` over `rows`, centred at `theta`.
pub fn eif_values<N: NuisanceModel + ?Sized>(
    target: TargetId,
    refs: RefLevels,
    model: &N,
    data: &Dataset,
    rows: &[usize],
    theta: f64,
) -> Vec<f64> {
    rows.iter()
        .map(|&i| {
            let o = data.observation(i);
            let v = model.predict_all(o.w, o.z, o.m);
            let point = Point {
                a: o.a,
                z: o.z,
                m: o.m,
                y: o.y,
            };
            row_terms(refs, &v, point).eif_plus_theta[target.index()] - theta
        })
        .collect()
}

/// Wraps a nuisance model and moves every component by a relative amount
/// `ε` on its link scale: logits of `b`, `c` and (binary) `d`, and the
/// log-odds against level 0 of `g` and `h*`, are multiplied by `1 + ε`.
/// Non-binary `d` is multiplied by `1 + ε` directly.
pub struct Perturbed<'a, N: ?Sized> {
    pub inner: &'a N,
    pub eps: f64,
    pub binary_outcome: bool,
}

fn scale_logit(p: f64, factor: f64) -> f64 {
    let p = p.clamp(1e-300, 1.0 - 1e-16);
    crate::nuisance::glm::logistic(crate::nuisance::glm::logit(p) * factor)
}

fn scale_categorical(probs: &mut [f64], factor: f64) {
    let base = probs[0].max(1e-300).ln();
    let etas: Vec<f64> = probs.iter().map(|p| (p.max(1e-300).ln() - base) * factor).collect();
    let max = etas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = etas.iter().map(|e| (e - max).exp()).sum();
    for (p, e) in probs.iter_mut().zip(&etas) {
        *p = (e - max).exp() / total;
    }
}

impl<N: NuisanceModel + ?Sized> NuisanceModel for Perturbed<'_, N> {
    fn k_z(&self) -> usize {
        self.inner.k_z()
    }

    fn k_m(&self) -> usize {
        self.inner.k_m()
    }

    fn predict_all(&self, w: &[f64], z: usize, m: usize) -> NuisanceValues {
        let factor = 1.0 + self.eps;
        let mut v = self.inner.predict_all(w, z, m);
        v.b1 = scale_logit(v.b1, factor);
        v.c1 = scale_logit(v.c1, factor);
        for chunk in v.g.chunks_mut(v.k_z) {
            scale_categorical(chunk, factor);
        }
        for chunk in v.h_star.chunks_mut(v.k_m) {
            scale_categorical(chunk, factor);
        }
        for d in &mut v.d {
            *d = if self.binary_outcome {
                scale_logit(*d, factor)
            } else {
                *d * factor
            };
        }
        v
    }
}

/// Outcome of [`remainder_probe`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RemainderProbe {
    pub eps: f64,
    /// `θ(η_ε) + E φ(O; η_ε) − θ(η)`.
    pub debiased_error: f64,
    /// `θ(η_ε) − θ(η)`.
    pub plugin_error: f64,
}

/// Estimation error of the one-step and plug-in estimators when every
/// nuisance is perturbed by `eps` away from `truth`.
///
/// The expectation over `(A, Z, M, Y)` given `W` is computed exactly by
/// summing over all `(a, z, m)` cells with the true probabilities (the
/// influence function is linear in `Y`, so `Y` is replaced by its true
/// conditional mean). Only the covariates are sampled: the error is
/// averaged over the covariate rows of `data`, and both the perturbed and
/// the true functionals use the same rows, so no sampling noise enters
/// the difference except through the covariate average itself.
pub fn remainder_probe<N: NuisanceModel + ?Sized>(
    target: TargetId,
    refs: RefLevels,
    truth: &N,
    data: &Dataset,
    eps: f64,
) -> RemainderProbe {
    let perturbed = Perturbed {
        inner: truth,
        eps,
        binary_outcome: true,
    };
    let (kz, km) = (truth.k_z(), truth.k_m());
    let t = target.index();
    let mut debiased = 0.0;
    let mut plugin = 0.0;
    for i in 0..data.len() {
        let w = data.w_row(i);
        let v0 = truth.predict_all(w, 0, 0);
        let theta0 = conditional_values(refs, &v0)[t];
        let mut expected = 0.0;
        let mut theta_eps = f64::NAN;
        for z in 0..kz {
            for m in 0..km {
                let ve = perturbed.predict_all(w, z, m);
                for a in 0..2u8 {
                    let prob = v0.b(a) * v0.g(a, z) * v0.h_star(a, z, m);
                    let point = Point {
                        a,
                        z,
                        m,
                        y: v0.d(a, z, m),
                    };
                    let terms = row_terms(refs, &ve, point);
                    theta_eps = terms.theta_w[t];
                    expected += prob * terms.eif_plus_theta[t];
                }
            }
        }
        debiased += expected - theta0;
        plugin += theta_eps - theta0;
    }
    let n = data.len() as f64;
    RemainderProbe {
        eps,
        debiased_error: debiased / n,
        plugin_error: plugin / n,
    }
}

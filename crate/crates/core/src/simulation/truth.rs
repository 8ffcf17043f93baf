//! Two independent ground-truth oracles for the path effects of the
//! simulation mechanism, both for `a′ = 1`, `a* = 0`.
//!
//! * [`truth_by_enumeration`] samples covariates and evaluates the
//!   identification functionals exactly under the true conditionals.
//! * [`truth_by_counterfactuals`] never touches the functionals: it samples
//!   every exogenous error, evaluates the nested counterfactuals through the
//!   structural equations (with fresh twin draws), and averages.
//!
//! Agreement of the two validates the identification formulas against the
//! counterfactual definitions.

use rayon::prelude::*;

use super::derive_seed;
use super::scm::{count_below, ExogenousSampler, ScmConfig, TrueNuisance};
use crate::error::{Error, Result};
use crate::identification::{conditional_values, PathEffects, PathId, RefLevels, ThetaSet};
use crate::nuisance::NuisanceModel;

/// Smallest Monte Carlo size accepted by the oracles.
pub const MIN_MC: usize = 100_000;
const CHUNK: usize = 1 << 15;

/// Enumerated truth with Monte Carlo standard errors over the covariate
/// draws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Truth {
    pub effects: PathEffects,
    pub se: PathEffects,
    pub thetas: ThetaSet,
    pub theta_se: ThetaSet,
    pub n_mc: usize,
}

/// Nested counterfactual means from the structural equations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CounterfactualTruth {
    pub effects: PathEffects,
    pub se: PathEffects,
    /// Means of the counterfactuals listed in [`CounterfactualTruth::NAMES`].
    pub means: [f64; 8],
    pub mean_se: [f64; 8],
    pub n_mc: usize,
}

impl CounterfactualTruth {
    pub const NAMES: [&'static str; 8] = [
        "Y_S0", "Y_S1", "Y'_S1", "Y'_S2", "Y''_S2", "Y''_S3", "Y_S3", "Y_S4",
    ];
    pub const S2_PRIME: usize = 3;
    pub const S2_DOUBLE_PRIME: usize = 4;

    /// Counterfactual means arranged as targets; the second-stage target is
    /// `E(Y'_S2)`.
    pub fn thetas(&self) -> (ThetaSet, ThetaSet) {
        let pick = |v: &[f64; 8]| ThetaSet([v[0], v[1], v[2], v[3], v[5], v[6], v[7]]);
        (pick(&self.means), pick(&self.mean_se))
    }
}

/// Running sums for `K` per-draw statistics.
#[derive(Clone, Copy)]
struct Moments<const K: usize> {
    n: usize,
    sum: [f64; K],
    sum_sq: [f64; K],
}

impl<const K: usize> Moments<K> {
    fn new() -> Self {
        Moments {
            n: 0,
            sum: [0.0; K],
            sum_sq: [0.0; K],
        }
    }

    fn push(&mut self, x: &[f64; K]) {
        self.n += 1;
        for k in 0..K {
            self.sum[k] += x[k];
            self.sum_sq[k] += x[k] * x[k];
        }
    }

    fn merge(mut self, other: &Self) -> Self {
        self.n += other.n;
        for k in 0..K {
            self.sum[k] += other.sum[k];
            self.sum_sq[k] += other.sum_sq[k];
        }
        self
    }

    fn mean(&self) -> [f64; K] {
        std::array::from_fn(|k| self.sum[k] / self.n as f64)
    }

    /// Standard error of the mean (sample variance with `n − 1`).
    fn se(&self) -> [f64; K] {
        let n = self.n as f64;
        std::array::from_fn(|k| {
            let mean = self.sum[k] / n;
            let var = ((self.sum_sq[k] - n * mean * mean) / (n - 1.0)).max(0.0);
            (var / n).sqrt()
        })
    }
}

/// Runs `per_draw` over `n_mc` draws split into fixed-size chunks with
/// chunk-level seeds, so results do not depend on the thread count.
fn monte_carlo<const K: usize>(
    n_mc: usize,
    seed: u64,
    label: &[u8],
    per_draw: impl Fn(&mut ExogenousSampler) -> [f64; K] + Sync,
) -> Result<Moments<K>> {
    if n_mc < MIN_MC {
        return Err(Error::Argument(format!(
            "Monte Carlo size must be at least {MIN_MC} (got {n_mc})"
        )));
    }
    let chunks = n_mc.div_ceil(CHUNK);
    let parts: Vec<Moments<K>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let size = CHUNK.min(n_mc - c * CHUNK);
            let mut sampler =
                ExogenousSampler::new(derive_seed(&[label, &seed.to_le_bytes(), &(c as u64).to_le_bytes()]));
            let mut m = Moments::new();
            for _ in 0..size {
                m.push(&per_draw(&mut sampler));
            }
            m
        })
        .collect();
    Ok(parts.iter().fold(Moments::new(), |acc, m| acc.merge(m)))
}

fn split<const K: usize>(values: [f64; K], paths_from: usize) -> PathEffects {
    PathEffects::from_fn(|p| values[paths_from + p.index()])
}

/// Covariate-averaged identification functionals under the true
/// conditionals.
pub fn truth_by_enumeration(cfg: &ScmConfig, n_mc: usize, seed: u64) -> Result<Truth> {
    let model = TrueNuisance::new(*cfg);
    let refs = RefLevels::default();
    let moments = monte_carlo::<13>(n_mc, seed, b"enumeration", |s| {
        let x = s.covariates();
        let th = conditional_values(refs, &model.predict_all(&x, 0, 0));
        let mut out = [0.0; 13];
        out[..7].copy_from_slice(&th);
        for p in PathId::ALL {
            out[7 + p.index()] = p.contrast(&th);
        }
        out
    })?;
    let (mean, se) = (moments.mean(), moments.se());
    Ok(Truth {
        effects: split(mean, 7),
        se: split(se, 7),
        thetas: ThetaSet(std::array::from_fn(|k| mean[k])),
        theta_se: ThetaSet(std::array::from_fn(|k| se[k])),
        n_mc,
    })
}

/// Means of the nested counterfactuals simulated from the structural
/// equations, with shared errors across interventions and independent twin
/// draws `T(1)`, `T(0)` from the law of `Z(a) | X`.
pub fn truth_by_counterfactuals(cfg: &ScmConfig, n_mc: usize, seed: u64) -> Result<CounterfactualTruth> {
    let moments = monte_carlo::<14>(n_mc, seed, b"counterfactuals", |s| {
        let u = s.draw();
        let t1_u: [f64; 3] = s.uniforms();
        let t0_u: [f64; 3] = s.uniforms();
        let z1 = cfg.z_of(1, &u);
        let z0 = cfg.z_of(0, &u);
        let t1 = count_below(&t1_u, cfg.p_z(1, &u.x));
        let t0 = count_below(&t0_u, cfg.p_z(0, &u.x));
        let y = |a, z, m| cfg.y_of(a, z, m, &u);
        let m1 = |z| cfg.m_of(1, z, &u);
        let cf = [
            y(1, z1, m1(z1)),
            y(0, z1, m1(z1)),
            y(0, z1, m1(t1)),
            y(0, z0, m1(t1)),
            y(0, t0, m1(z1)),
            y(0, t0, m1(z0)),
            y(0, z0, m1(z0)),
            y(0, z0, cfg.m_of(0, z0, &u)),
        ];
        let [s0, s1, s1p, s2p, s2pp, s3pp, s3, s4] = cf;
        let paths = [
            s0 - s1,
            s1p - s2p,
            s2pp - s3pp,
            s3 - s4,
            s1 - s1p + s2p - s2pp + s3pp - s3,
            s0 - s4,
        ];
        let mut out = [0.0; 14];
        out[..8].copy_from_slice(&cf);
        out[8..].copy_from_slice(&paths);
        out
    })?;
    let (mean, se) = (moments.mean(), moments.se());
    Ok(CounterfactualTruth {
        effects: split(mean, 8),
        se: split(se, 8),
        means: std::array::from_fn(|k| mean[k]),
        mean_se: std::array::from_fn(|k| se[k]),
        n_mc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::scm::Setting;

    #[test]
    fn rejects_small_monte_carlo() {
        assert!(truth_by_enumeration(&ScmConfig::default(), 10, 1).is_err());
    }

    #[test]
    fn no_direct_effect_means_zero_first_path() {
        let t = truth_by_enumeration(&Setting::Gamma2Zero.config(), MIN_MC, 1).unwrap();
        assert_eq!(t.effects.psi_p1, 0.0);
    }

    #[test]
    fn enumerated_components_telescope() {
        let t = truth_by_enumeration(&ScmConfig::default(), MIN_MC, 2).unwrap();
        assert!((t.effects.component_sum() - t.effects.ate).abs() < 1e-12);
    }

    #[test]
    fn null_mechanism_has_no_effects() {
        let t = truth_by_counterfactuals(&ScmConfig::null(), MIN_MC, 3).unwrap();
        for p in PathId::ALL {
            assert!(t.effects.get(p).abs() <= 3.0 * t.se.get(p) + 1e-15, "{p}");
        }
    }

    #[test]
    fn twin_counterfactuals_share_a_mean() {
        let t = truth_by_counterfactuals(&ScmConfig::default(), 4 * MIN_MC, 4).unwrap();
        let i = CounterfactualTruth::S2_PRIME;
        let j = CounterfactualTruth::S2_DOUBLE_PRIME;
        let diff = t.means[i] - t.means[j];
        let se = (t.mean_se[i].powi(2) + t.mean_se[j].powi(2)).sqrt();
        assert!(diff.abs() <= 3.0 * se, "diff {diff}, se {se}");
    }

    #[test]
    fn no_intermediate_confounding_means_zero_interaction() {
        let t = truth_by_counterfactuals(&Setting::Gamma1Zero.config(), 4 * MIN_MC, 5).unwrap();
        assert!(t.effects.psi_int.abs() <= 3.0 * t.se.psi_int, "{:?}", t.effects);
    }
}

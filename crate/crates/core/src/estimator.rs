//! Cross-fitted one-step estimation of the seven targets and the path
//! effects, with influence-function-based Wald inference.
//!
//! For each fold `k` the nuisances are fitted on the other folds and
//! evaluated on fold `k`. The plug-in value of a target is the mean of its
//! conditional functional over all rows (each row using the nuisances of its
//! own fold); the one-step estimate adds the mean of the estimated influence
//! function. Path effects are signed sums of targets and their influence
//! functions the same signed sums, so the decomposition holds row by row.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{assign_folds, Dataset};
use crate::error::{Error, Result};
use crate::identification::{row_terms, PathId, Point, RefLevels, TargetId};
use crate::nuisance::{
    fit_cross_fitted, fit_nuisances, Family, LearnerSet, NuisanceFit, NuisanceKind, NuisanceModel,
    DEFAULT_CLIP,
};
use crate::simulation::derive_seed;

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_ALPHA: f64 = 0.05;
/// Fresh fold assignments tried after the first one leaves a training split
/// without some category level.
pub const MAX_RESEEDS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Number of cross-fitting folds; `1` fits the nuisances once on the full
    /// sample (no cross-fitting).
    pub folds: usize,
    pub alpha: f64,
    pub seed: u64,
    pub clip: f64,
    pub refs: RefLevels,
    pub learners: LearnerSet,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            folds: DEFAULT_FOLDS,
            alpha: DEFAULT_ALPHA,
            seed: 0,
            clip: DEFAULT_CLIP,
            refs: RefLevels::default(),
            learners: LearnerSet::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds == 0 {
            return Err(Error::Argument("fold count must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Argument(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        RefLevels::new(self.refs.a_prime, self.refs.a_star)?;
        self.learners.validate()
    }
}

/// Point estimate and Wald inference for one parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    /// One-step (bias-corrected) estimate.
    pub estimate: f64,
    /// Uncorrected plug-in estimate.
    pub plugin: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub z: f64,
    pub p_value: f64,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Two-sided p-value of a standard-normal statistic.
pub fn two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    (2.0 * std_normal().sf(z.abs())).min(1.0)
}

impl Inference {
    fn from_eif(plugin: f64, eif: &[f64], alpha: f64) -> Inference {
        let n = eif.len() as f64;
        let mean = eif.iter().sum::<f64>() / n;
        let estimate = plugin + mean;
        let var = eif.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        let se = (var / n).sqrt();
        let crit = std_normal().inverse_cdf(1.0 - alpha / 2.0);
        let z = if se > 0.0 { estimate / se } else { f64::NAN };
        Inference {
            estimate,
            plugin,
            se,
            ci_lo: estimate - crit * se,
            ci_hi: estimate + crit * se,
            z,
            p_value: two_sided_p(z),
        }
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_lo <= value && value <= self.ci_hi
    }
}

/// Estimates for all targets and path effects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimates {
    /// Indexed by [`TargetId::index`].
    pub targets: [Inference; 7],
    /// Indexed by [`PathId::index`].
    pub paths: [Inference; 6],
    pub n: usize,
    pub folds: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Seed of the fold assignment actually used (differs from `seed` after
    /// a reseed).
    pub fold_seed: u64,
    pub refs: RefLevels,
    /// Selected family per nuisance, in [`NuisanceKind::ALL`] order.
    pub families: [Family; 5],
    /// Per-row influence-function values of the targets (centred).
    #[serde(skip)]
    pub target_eifs: Vec<[f64; 7]>,
}

impl EffectEstimates {
    pub fn target(&self, t: TargetId) -> &Inference {
        &self.targets[t.index()]
    }

    pub fn path(&self, p: PathId) -> &Inference {
        &self.paths[p.index()]
    }

    /// Per-row influence function of a path effect.
    pub fn path_eif(&self, p: PathId) -> Vec<f64> {
        self.target_eifs.iter().map(|row| p.contrast(row)).collect()
    }

    pub fn nuisance_families(&self) -> impl Iterator<Item = (NuisanceKind, Family)> + '_ {
        NuisanceKind::ALL.into_iter().zip(self.families)
    }
}

/// Cross-fitted one-step estimates of every target and path effect.
///
/// When a training split misses a level of `A`, `Z` or `M`, the folds are
/// redrawn with a derived seed up to [`MAX_RESEEDS`] times before giving up.
pub fn estimate(data: &Dataset, cfg: &EstimatorConfig) -> Result<EffectEstimates> {
    cfg.validate()?;
    let n = data.len();
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 observations, got {n}")));
    }
    let (fits, fold_of, fold_seed) = if cfg.folds == 1 {
        let rows: Vec<usize> = (0..n).collect();
        let fit = fit_nuisances(data, &rows, &cfg.learners, cfg.clip, cfg.seed)?;
        (vec![fit], vec![0; n], cfg.seed)
    } else {
        fit_with_reseeding(data, cfg)?
    };
    let refs = cfg.refs;
    let rows: Vec<(_, _)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let o = data.observation(i);
            let v = fits[fold_of[i]].predict_all(o.w, o.z, o.m);
            let t = row_terms(refs, &v, Point { a: o.a, z: o.z, m: o.m, y: o.y });
            (t.theta_w, t.eif_plus_theta)
        })
        .collect();
    let mut plugin = [0.0; 7];
    for (theta_w, _) in &rows {
        for k in 0..7 {
            plugin[k] += theta_w[k];
        }
    }
    plugin.iter_mut().for_each(|p| *p /= n as f64);
    let target_eifs: Vec<[f64; 7]> = rows
        .iter()
        .map(|(_, u)| std::array::from_fn(|k| u[k] - plugin[k]))
        .collect();
    let column = |f: &dyn Fn(&[f64; 7]) -> f64| -> Vec<f64> { target_eifs.iter().map(f).collect() };
    let targets = TargetId::ALL.map(|t| {
        let k = t.index();
        Inference::from_eif(plugin[k], &column(&|r| r[k]), cfg.alpha)
    });
    let paths = PathId::ALL.map(|p| Inference::from_eif(p.contrast(&plugin), &column(&|r| p.contrast(r)), cfg.alpha));
    Ok(EffectEstimates {
        targets,
        paths,
        n,
        folds: cfg.folds,
        alpha: cfg.alpha,
        seed: cfg.seed,
        fold_seed,
        refs,
        families: fits[0].families(),
        target_eifs,
    })
}

fn fit_with_reseeding(data: &Dataset, cfg: &EstimatorConfig) -> Result<(Vec<NuisanceFit>, Vec<usize>, u64)> {
    let mut last = None;
    for attempt in 0..=MAX_RESEEDS {
        let seed = if attempt == 0 {
            cfg.seed
        } else {
            derive_seed(&[b"reseed", &cfg.seed.to_le_bytes(), &(attempt as u64).to_le_bytes()])
        };
        let folds = assign_folds(data.len(), cfg.folds, seed)?;
        match fit_cross_fitted(data, &folds, &cfg.learners, cfg.clip) {
            Ok(fits) => return Ok((fits, folds.fold_of().to_vec(), seed)),
            Err(e @ Error::Fold { .. }) => {
                log::debug!("fold assignment {attempt} rejected: {e}");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    match last {
        Some(Error::Fold { fold, variable, level }) => Err(Error::Fit(format!(
            "after {MAX_RESEEDS} reseeds a training split still lacks {variable} level {level} \
             (fold {fold}); use fewer folds"
        ))),
        Some(e) => Err(e),
        None => unreachable!("at least one attempt is made"),
    }
}

/// Wald test of no intermediate confounding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub z: f64,
    pub p_value: f64,
}

/// Tests `ψ_int = 0` with `z = ψ̂_int / SE(ψ̂_int)`.
pub fn test_intermediate_confounding(est: &EffectEstimates) -> Result<WaldTest> {
    let inf = est.path(PathId::Int);
    if !(inf.se > 0.0) {
        return Err(Error::DegenerateVariance(
            "the intermediate-confounding estimate has zero standard error".into(),
        ));
    }
    let z = inf.estimate / inf.se;
    Ok(WaldTest {
        z,
        p_value: two_sided_p(z),
    })
}

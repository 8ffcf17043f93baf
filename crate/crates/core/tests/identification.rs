use rtwins::identification::{eif_values, plugin_value, remainder_probe};
use rtwins::simulation::{
    simulate_observed, truth_by_counterfactuals, truth_by_enumeration, ScmConfig, TrueNuisance,
};
use rtwins::{RefLevels, TargetId};

/// The identified targets under the true conditionals agree with direct
/// simulation of the nested counterfactuals.
#[test]
fn enumerated_targets_match_counterfactual_means() {
    let cfg = ScmConfig::default();
    let enumerated = truth_by_enumeration(&cfg, 1_000_000, 21).unwrap();
    let simulated = truth_by_counterfactuals(&cfg, 1_000_000, 22).unwrap();
    let (means, se) = simulated.thetas();
    for t in TargetId::ALL {
        let diff = enumerated.thetas[t] - means[t];
        let tol = 3.0 * (enumerated.theta_se[t].powi(2) + se[t].powi(2)).sqrt();
        assert!(diff.abs() <= tol, "{t}: diff {diff}, tolerance {tol}");
    }
}

/// Sample means of the plug-in functional under the true conditionals
/// estimate the same quantity as the enumerated truth.
#[test]
fn plugin_under_true_conditionals_is_the_truth() {
    let cfg = ScmConfig::default();
    let truth = truth_by_enumeration(&cfg, 2_000_000, 23).unwrap();
    let data = simulate_observed(&cfg, 200_000, 24).unwrap();
    let rows: Vec<usize> = (0..data.len()).collect();
    let model = TrueNuisance::new(cfg);
    for t in TargetId::ALL {
        let value = plugin_value(t, RefLevels::default(), &model, &data, &rows);
        // Covariate sampling error of the plug-in mean is below 5e-4.
        assert!((value - truth.thetas[t]).abs() < 2e-3, "{t}: {value} vs {}", truth.thetas[t]);
    }
}

/// The influence function has mean zero at the true nuisances and target.
#[test]
fn influence_function_is_centred_at_the_truth() {
    let cfg = ScmConfig::default();
    let truth = truth_by_enumeration(&cfg, 2_000_000, 25).unwrap();
    let data = simulate_observed(&cfg, 100_000, 26).unwrap();
    let rows: Vec<usize> = (0..data.len()).collect();
    let model = TrueNuisance::new(cfg);
    for t in TargetId::ALL {
        let phi = eif_values(t, RefLevels::default(), &model, &data, &rows, truth.thetas[t]);
        let n = phi.len() as f64;
        let mean = phi.iter().sum::<f64>() / n;
        let sd = (phi.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() <= 3.0 * sd / n.sqrt(), "{t}: mean {mean}, sd {sd}");
    }
}

/// Halving the nuisance perturbation shrinks the one-step error about
/// fourfold and the plug-in error about twofold.
#[test]
fn one_step_error_is_second_order() {
    let cfg = ScmConfig::default();
    let data = simulate_observed(&cfg, 20_000, 27).unwrap();
    let model = TrueNuisance::new(cfg);
    for t in TargetId::ALL {
        let full = remainder_probe(t, RefLevels::default(), &model, &data, 0.1);
        let half = remainder_probe(t, RefLevels::default(), &model, &data, 0.05);
        let debiased = full.debiased_error / half.debiased_error;
        let plugin = full.plugin_error / half.plugin_error;
        assert!((2.5..=6.0).contains(&debiased), "{t}: debiased ratio {debiased}");
        assert!((1.5..=2.5).contains(&plugin), "{t}: plug-in ratio {plugin}");
    }
}

#[test]
fn unperturbed_probe_has_no_error() {
    let cfg = ScmConfig::default();
    let data = simulate_observed(&cfg, 2_000, 28).unwrap();
    let model = TrueNuisance::new(cfg);
    for t in TargetId::ALL {
        let p = remainder_probe(t, RefLevels::default(), &model, &data, 0.0);
        assert!(p.debiased_error.abs() < 1e-12 && p.plugin_error.abs() < 1e-12, "{t}: {p:?}");
    }
}

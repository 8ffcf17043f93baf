use rtwins::data::{assign_folds, load_dataset, validate, PositivityWarning, Schema};
use rtwins::simulation::{simulate_observed, CovariateMode, ScmConfig};
use rtwins::Error;

#[test]
fn simulated_sample_survives_a_csv_round_trip() {
    for mode in [CovariateMode::X, CovariateMode::W] {
        let original = simulate_observed(&ScmConfig::default().with_mode(mode), 400, 11).unwrap();
        let mut bytes = Vec::new();
        original.write_csv(&mut bytes).unwrap();
        let header = String::from_utf8_lossy(&bytes).lines().next().unwrap().to_string();
        assert_eq!(header, "w1,w2,w3,a,z,m,y");
        let reloaded = load_dataset(bytes.as_slice(), &Schema::default()).unwrap();
        assert_eq!(reloaded, original);
    }
}

#[test]
fn small_file_infers_levels() {
    let csv = "w1,a,z,m,y\n0.1,0,0,1,0\n0.2,1,2,0,1\n0.3,0,1,1,1\n0.4,1,0,0,0\n0.5,1,2,1,1\n";
    let d = load_dataset(csv.as_bytes(), &Schema::default()).unwrap();
    assert_eq!((d.len(), d.k_z(), d.k_m()), (5, 3, 2));
}

#[test]
fn invalid_exposure_names_its_row() {
    let csv = "w1,a,z,m,y\n0.1,0,0,1,0\n0.2,1,1,0,1\n0.3,2,1,1,1\n";
    match load_dataset(csv.as_bytes(), &Schema::default()) {
        Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn missing_intermediate_level_under_control_is_flagged() {
    // z = 2 only ever occurs with a = 1.
    let csv = "w1,a,z,m,y\n0.1,0,0,0,0\n0.2,0,1,1,1\n0.3,1,2,0,1\n0.4,1,0,1,0\n0.5,1,1,0,1\n0.6,0,1,0,0\n";
    let d = load_dataset(csv.as_bytes(), &Schema::default()).unwrap();
    let report = validate(&d);
    assert!(report
        .warnings
        .contains(&PositivityWarning::EmptyIntermediateCell { a: 0, z: 2 }));
}

/// Regression value from a single pilot run of the default mechanism at
/// n = 500: the sparse high-`z`, low-`m` cells are empty in both arms.
#[test]
fn positivity_warnings_at_n_500_are_frozen() {
    let d = simulate_observed(&ScmConfig::default(), 500, 500).unwrap();
    let report = validate(&d);
    assert_eq!(report.warnings.len(), 6, "{:?}", report.warnings);
    assert!(report
        .warnings
        .iter()
        .all(|w| matches!(w, PositivityWarning::EmptyJointCell { .. })));
}

#[test]
fn fold_sizes_follow_the_examples() {
    let f = assign_folds(10, 5, 1).unwrap();
    assert_eq!(f.sizes(), vec![2; 5]);
    let mut sizes = assign_folds(7, 3, 1).unwrap().sizes();
    sizes.sort();
    assert_eq!(sizes, vec![2, 2, 3]);
    assert_eq!(assign_folds(7, 3, 1).unwrap(), assign_folds(7, 3, 1).unwrap());
    assert!(matches!(assign_folds(3, 4, 1), Err(Error::Argument(_))));
    assert!(matches!(assign_folds(3, 1, 1), Err(Error::Argument(_))));
}

#[test]
fn validation_does_not_mutate() {
    let d = simulate_observed(&ScmConfig::default(), 300, 2).unwrap();
    let before = d.clone();
    let _ = validate(&d);
    assert_eq!(d, before);
}

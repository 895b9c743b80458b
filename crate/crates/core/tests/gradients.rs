use spliceradar::selfcheck::{self, GRADIENT_CHECKS};

#[test]
fn every_primitive_passes_finite_differences() {
    let outcomes = selfcheck::gradient_suite(20, 1, None).unwrap();
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    for name in GRADIENT_CHECKS {
        assert!(
            outcomes.iter().any(|o| o.name == *name),
            "{name} not checked"
        );
    }
}

#[test]
fn injected_error_is_reported_by_name() {
    for name in ["conv2d_valid", "batch_norm_train", "mi_regularizer"] {
        let outcomes = selfcheck::gradient_suite(1, 0, Some(name)).unwrap();
        let bad: Vec<_> = outcomes
            .iter()
            .filter(|o| !o.passed)
            .map(|o| o.name.as_str())
            .collect();
        assert_eq!(bad, vec![name]);
    }
    let outcomes = selfcheck::gradient_suite(0, 1, Some("network")).unwrap();
    let network = outcomes.iter().find(|o| o.name == "network").unwrap();
    assert!(!network.passed, "{network:?}");
    assert!(selfcheck::gradient_suite(1, 0, Some("no_such_op")).is_err());
}

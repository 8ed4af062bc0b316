mod common;

#[test]
fn transform_invariants_hold() {
    for (name, result) in common::transform_properties() {
        if let Err(e) = result {
            panic!("{name}: {e}");
        }
    }
}

#[test]
fn auc_matches_pairwise_oracle() {
    common::check_auc_oracle(200, 7).unwrap();
}

#[test]
fn brute_force_oracle_sanity() {
    assert_eq!(
        common::brute_force_auc(&[0.1, 0.9], &[false, true]),
        Some(1.0)
    );
    assert_eq!(
        common::brute_force_auc(&[0.5, 0.5], &[false, true]),
        Some(0.5)
    );
    assert_eq!(common::brute_force_auc(&[0.5, 0.5], &[true, true]), None);
}

#[test]
fn tta_is_the_mean_of_crop_predictions() {
    let dev = common::tta_max_deviation(3).unwrap();
    assert!(dev < 1e-12, "{dev}");
}

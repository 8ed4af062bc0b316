use ecg_ssl::nn::gradcheck::{standard_suite, SUITE_TOL, SUITE_TOL_BN};

#[test]
fn every_layer_and_loss_matches_finite_differences() {
    for seed in [1, 2] {
        let cases = standard_suite(seed).unwrap();
        let names: Vec<&str> = cases.iter().map(|c| c.name).collect();
        for want in [
            "dense",
            "batchnorm_train",
            "dropout_off",
            "conv_residual_block",
            "lstm",
            "concat_pool",
            "info_nce",
            "nt_xent",
            "byol",
            "cpc_backbone",
        ] {
            assert!(names.contains(&want), "missing {want}");
        }
        for c in &cases {
            let tol = if c.name.contains("batchnorm") {
                SUITE_TOL_BN
            } else {
                SUITE_TOL
            };
            assert!(
                c.report.passes(tol),
                "seed {seed} {}: {:e}",
                c.name,
                c.report.max_rel_err()
            );
        }
    }
}

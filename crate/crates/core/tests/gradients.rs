use lagscope::gradcheck::{model_suite, op_suite, GradCheckConfig};

#[test]
fn every_op_matches_finite_differences() {
    let cfg = GradCheckConfig::default();
    for report in op_suite(&cfg).unwrap() {
        assert!(report.passed(), "{report:?}");
        assert!(report.checked >= 100, "{report:?}");
    }
}

#[test]
fn every_model_matches_finite_differences() {
    for seed in [0, 1] {
        let cfg = GradCheckConfig { seed, ..Default::default() };
        for report in model_suite(&cfg).unwrap() {
            println!("{report:?}");
            assert!(report.passed(), "{report:?}");
            assert!(report.checked >= 100, "{report:?}");
        }
    }
}

#![cfg(not(feature = "f32"))]

use csamoe::gradcheck::{check_model, check_ops, op_names, relative_error, GradcheckConfig};
use csamoe::moe::Variant;

#[test]
fn every_op_passes_twenty_trials() {
    let cfg = GradcheckConfig::default();
    assert!(cfg.trials >= 20);
    let reports = check_ops(&cfg).unwrap();
    assert_eq!(reports.len(), op_names().len());
    for r in &reports {
        assert!(r.checked >= r.trials, "{} checked only {}", r.name, r.checked);
        assert!(r.passed, "{} max relative error {:e}", r.name, r.max_rel_error);
    }
}

#[test]
fn ops_pass_for_other_seeds() {
    for seed in [1, 2] {
        let cfg = GradcheckConfig {
            seed,
            trials: 5,
            ..GradcheckConfig::default()
        };
        for r in check_ops(&cfg).unwrap() {
            assert!(r.passed, "seed {seed}: {} {:e}", r.name, r.max_rel_error);
        }
    }
}

#[test]
fn end_to_end_model_gradients_match() {
    for variant in [Variant::CsaMoe, Variant::ResnetMoe, Variant::Resnet18] {
        let r = check_model(&GradcheckConfig::default(), variant).unwrap();
        assert!(r.checked > 0);
        assert!(r.passed, "{} max relative error {:e}", r.name, r.max_rel_error);
    }
}

#[test]
fn corrupted_backward_is_reported_by_name() {
    for op in ["conv2d", "softmax", "mix", "channel_scale"] {
        let cfg = GradcheckConfig {
            trials: 3,
            fault: Some(op.to_string()),
            ..GradcheckConfig::default()
        };
        let failed: Vec<String> = check_ops(&cfg)
            .unwrap()
            .into_iter()
            .filter(|r| !r.passed)
            .map(|r| r.name)
            .collect();
        assert!(failed.iter().any(|n| n == op), "{op} not caught: {failed:?}");
    }
    let cfg = GradcheckConfig {
        fault: Some("channel_scale".into()),
        ..GradcheckConfig::default()
    };
    assert!(!check_model(&cfg, Variant::CsaMoe).unwrap().passed);
}

#[test]
fn relative_error_uses_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!((relative_error(1e-6, 0.0) - 1e-3).abs() < 1e-15);
    assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
}

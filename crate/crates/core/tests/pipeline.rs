//! End-to-end run of every stage on a very small configuration.

use koopman_lorenz::config::RunConfig;
use koopman_lorenz::embed::EmbedderKind;
use koopman_lorenz::pipeline::{self, RunLayout, REPORT_FILES};
use koopman_lorenz::transfer::Variant;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.name = "tiny".into();
    cfg.dataset.n_train = 4;
    cfg.dataset.len_train = 128;
    cfg.dataset.n_val = 2;
    cfg.dataset.len_val = 320;
    cfg.dataset.n_test = 10;
    cfg.dataset.len_test = 320;
    cfg.stage1.epochs = 1;
    cfg.stage2.koopman.train.epochs = 1;
    cfg.stage2.pi.train.epochs = 1;
    cfg.stage2.pca.train.epochs = 1;
    cfg.stage3.koopman_frozen.epochs = 2;
    cfg.stage3.koopman_unfrozen.epochs = 1;
    cfg.stage3.pca_pi.epochs = 2;
    cfg.stage3.pca.epochs = 2;
    cfg.safety.res = [5, 5, 5];
    cfg
}

#[test]
fn all_stages_produce_reports_and_keep_frozen_weights() {
    let cfg = tiny();
    cfg.validate().unwrap();
    let root = tempfile::tempdir().unwrap();
    let layout = RunLayout::new(root.path());
    pipeline::simulate(&cfg, &layout).unwrap();
    pipeline::train_ae(&cfg, &layout).unwrap();
    pipeline::pretrain(&cfg, &layout, &Variant::ALL).unwrap();
    pipeline::compute_safety(&cfg, &layout).unwrap();

    let before = pipeline::checkpoint_bytes(&layout.transformer_ckpt(EmbedderKind::Koopman)).unwrap();
    let fitted = pipeline::finetune(&cfg, &layout, &Variant::ALL).unwrap();
    assert_eq!(fitted.len(), 4);
    assert!(fitted.iter().all(|(_, l)| l.is_finite()));
    let after = pipeline::checkpoint_bytes(&layout.transformer_ckpt(EmbedderKind::Koopman)).unwrap();
    assert_eq!(before, after);

    let summaries = pipeline::evaluate(&cfg, &layout, &Variant::ALL).unwrap();
    for (v, s) in &summaries {
        assert!(s.mse.mean.is_finite() && s.mse.mean >= 0.0, "{}", v.label());
        assert!(s.n_traj <= cfg.dataset.n_test);
    }
    let dir = pipeline::report(&cfg, &layout).unwrap();
    for f in REPORT_FILES {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn missing_stage_outputs_are_prerequisite_errors() {
    let cfg = tiny();
    let root = tempfile::tempdir().unwrap();
    let layout = RunLayout::new(root.path());
    let err = pipeline::finetune(&cfg, &layout, &[Variant::Pca]).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

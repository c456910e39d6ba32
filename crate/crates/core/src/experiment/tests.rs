use std::path::PathBuf;

use proptest::prelude::*;

use super::*;

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn tiny(out: &Path, trials: usize) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        train_limit: Some(48),
        test_limit: Some(20),
        out_dir: Some(out.to_path_buf()),
        seed: 3,
        ..TrainConfig::new(DatasetId::Mnist, mnist_dir(), 2, trials, LossKind::BceKld)
    }
}

fn result(dataset: &str, z: usize, trials: usize, value: f64) -> RunResult {
    let dir = std::env::temp_dir();
    RunResult {
        dataset: dataset.into(),
        z,
        trials,
        metric: "mse".into(),
        best_value: value,
        best_epoch: 1,
        epochs: 1,
        seed: 0,
        history: Vec::new(),
        config: tiny(&dir, trials),
    }
}

#[test]
fn decrease_rate_examples() {
    assert_eq!(compute_dr(0.039362, 0.037122).unwrap(), 5.69);
    assert_eq!(compute_dr(0.2081, 0.02815).unwrap(), 86.47);
    assert_eq!(compute_dr(0.07645, 0.07895).unwrap(), -3.27);
    assert_eq!(compute_dr(0.5, 0.5).unwrap(), 0.0);
    assert_eq!(compute_dr(0.0, 0.1).unwrap_err().category(), "domain");
    assert!(compute_dr(-1.0, 0.1).is_err());
}

proptest! {
    #[test]
    fn decrease_rate_is_zero_at_baseline(b in 1e-9f64..1e6) {
        prop_assert_eq!(compute_dr(b, b).unwrap(), 0.0);
    }

    #[test]
    fn decrease_rate_falls_as_metric_grows(b in 1e-6f64..1e3, m in 0.0f64..2.0, gap in 1e-3f64..1.0) {
        let (lo, hi) = (b * m, b * (m + gap));
        let (a, c) = (compute_dr(b, lo).unwrap(), compute_dr(b, hi).unwrap());
        prop_assert!(a >= c);
        if gap >= 2e-4 * 100.0 {
            prop_assert!(a > c);
        }
    }
}

#[test]
fn report_groups_by_baseline() {
    let rows = build_report(&[result("mnist", 2, 1, 0.04)]).unwrap();
    assert_eq!(rows[0].dr_percent, 0.0);
    let rows = build_report(&[result("mnist", 2, 1, 0.04), result("mnist", 2, 2, 0.04)]).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.dr_percent).collect::<Vec<_>>(),
        vec![0.0, 0.0]
    );
    let err =
        build_report(&[result("mnist", 2, 2, 0.04), result("mnist", 3, 1, 0.04)]).unwrap_err();
    assert_eq!(err.category(), "config");
    assert!(build_report(&[result("mnist", 2, 1, 0.04), result("mnist", 2, 1, 0.05)]).is_err());
}

#[test]
fn csv_layout_and_recomputation() {
    let rows = build_report(&[
        result("sii", 5, 1, 0.2081),
        result("sii", 5, 3, 0.02815),
        result("sii", 5, 2, 0.1 + 0.2),
    ])
    .unwrap();
    let text = report_csv(&rows);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "dataset,z,T,metric,best_value,dr_percent,epochs,seed"
    );
    assert_eq!(lines.next().unwrap(), "sii,5,1,mse,0.2081,0.00,1,0");
    assert_eq!(lines.next().unwrap(), "sii,5,3,mse,0.02815,86.47,1,0");
    let back = read_report(&text).unwrap();
    assert_eq!(back, rows);
    for r in &back {
        assert_eq!(
            compute_dr(back[0].best_value, r.best_value).unwrap(),
            r.dr_percent
        );
    }
}

#[test]
fn config_json_round_trip_and_defaults() {
    let json = r#"{"dataset": "sii", "data_dir": "d", "z": 5, "T": 3, "epochs": 4, "loss": "nms"}"#;
    let c: TrainConfig = serde_json::from_str(json).unwrap();
    assert_eq!((c.batch_size, c.trials, c.resolution()), (64, 3, 64));
    assert!(c.detach_trials);
    assert_eq!(c.adam(), AdamConfig::autoencoder());
    let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
    let vae: TrainConfig = serde_json::from_str(
        r#"{"dataset": "mnist", "data_dir": "d", "z": 5, "T": 1, "epochs": 1, "loss": "vae"}"#,
    )
    .unwrap();
    assert_eq!(vae.adam(), AdamConfig::variational());
    assert_eq!(vae.metric(), "mse");
    assert!(serde_json::from_str::<TrainConfig>(r#"{"dataset": "mnist", "bogus": 1}"#).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = std::env::temp_dir();
    let base = tiny(&dir, 1);
    for bad in [
        TrainConfig {
            z: 0,
            ..base.clone()
        },
        TrainConfig {
            trials: 5,
            ..base.clone()
        },
        TrainConfig {
            batch_size: 0,
            ..base.clone()
        },
        TrainConfig {
            learning_rate: Some(-1.0),
            ..base.clone()
        },
        TrainConfig {
            dataset: DatasetId::Sii,
            ..base.clone()
        },
        TrainConfig {
            resolution: Some(64),
            ..base.clone()
        },
        TrainConfig {
            conditional: true,
            loss: LossKind::L1,
            ..base.clone()
        },
    ] {
        assert_eq!(bad.validate().unwrap_err().category(), "config", "{bad:?}");
    }
    assert!("cifar".parse::<DatasetId>().is_err());
}

#[test]
fn zero_epochs_reports_the_untrained_model() {
    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig {
        epochs: 0,
        ..tiny(dir.path(), 2)
    };
    let r = run_experiment(&c).unwrap();
    assert_eq!(r.best_epoch, 0);
    assert!(r.history.is_empty());
    let data = load_dataset(&c).unwrap();
    let model = build_model(&c, &data).unwrap();
    assert_eq!(r.best_value, evaluate(&model, &data.test, &c).unwrap());
}

#[test]
fn runs_are_reproducible_and_leave_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_experiment(&tiny(a.path(), 2)).unwrap();
    let rb = run_experiment(&tiny(b.path(), 2)).unwrap();
    assert_eq!(ra.best_value.to_bits(), rb.best_value.to_bits());
    assert_eq!(ra.history, rb.history);
    assert_eq!(ra.history.len(), 2);
    for f in [RESULT_FILE, STATE_FILE, BEST_FILE, HISTORY_FILE] {
        assert!(a.path().join(f).is_file(), "{f}");
    }
    for f in [
        "trials.png",
        "grid.png",
        "trial2_residual.png",
        "original.png",
    ] {
        assert!(a.path().join(SAMPLES_DIR).join(f).is_file(), "{f}");
    }
    assert_eq!(
        fs::read(a.path().join(BEST_FILE)).unwrap(),
        fs::read(b.path().join(BEST_FILE)).unwrap()
    );
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let full = run_experiment(&tiny(a.path(), 2)).unwrap();
    run_experiment(&TrainConfig {
        epochs: 1,
        ..tiny(b.path(), 2)
    })
    .unwrap();
    let resumed = run_experiment(&tiny(b.path(), 2)).unwrap();
    assert_eq!(full.history, resumed.history);
    assert_eq!(full.best_value.to_bits(), resumed.best_value.to_bits());

    let other = TrainConfig {
        seed: 9,
        ..tiny(b.path(), 2)
    };
    assert_eq!(run_experiment(&other).unwrap_err().category(), "config");
}

#[test]
fn conditional_and_conv_runs_train() {
    let dir = tempfile::tempdir().unwrap();
    let cvae = TrainConfig {
        conditional: true,
        out_dir: Some(dir.path().join("cvae")),
        ..tiny(dir.path(), 2)
    };
    let r = run_experiment(&cvae).unwrap();
    assert!(r.best_value.is_finite());
    let conv = TrainConfig {
        loss: LossKind::L1,
        epochs: 1,
        out_dir: Some(dir.path().join("conv")),
        ..tiny(dir.path(), 2)
    };
    let r = run_experiment(&conv).unwrap();
    assert_eq!(r.metric, "l1");
    assert!(r.best_value > 0.0 && r.best_value < 1.0);
}

#[test]
fn sweep_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let configs = vec![
        TrainConfig {
            out_dir: None,
            epochs: 1,
            ..tiny(dir.path(), 1)
        },
        TrainConfig {
            out_dir: None,
            epochs: 1,
            ..tiny(dir.path(), 2)
        },
    ];
    let rows = sweep(&configs, dir.path()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].dr_percent, 0.0);
    let text = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(read_report(&text).unwrap(), rows);
    let collected = collect_results(dir.path()).unwrap();
    assert_eq!(build_report(&collected).unwrap().len(), 2);

    let orphan = vec![TrainConfig {
        out_dir: None,
        ..tiny(dir.path(), 2)
    }];
    let empty = tempfile::tempdir().unwrap();
    assert_eq!(
        sweep(&orphan, empty.path()).unwrap_err().category(),
        "config"
    );
    assert!(fs::read_dir(empty.path()).unwrap().next().is_none());
}

#[test]
fn residual_profile_has_one_entry_per_trial() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(dir.path(), 3);
    let data = load_dataset(&c).unwrap();
    let model = build_model(&c, &data).unwrap();
    let p = residual_profile(&model, &data.test, &c).unwrap();
    assert_eq!(p.len(), 3);
    assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
}

#[test]
fn compression_comparison_matches_or_exceeds_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig {
        loss: LossKind::L1,
        ..tiny(dir.path(), 2)
    };
    let data = load_dataset(&c).unwrap();
    let model = build_model(&c, &data).unwrap();
    let (x, _) = data.test.batch(&[0]).unwrap();
    let cmp = compare_compression(&x, &model, &c.rrae()).unwrap();
    assert_eq!(cmp.latent_size, 2);
    assert!(cmp.dct_l1 <= cmp.rrae_l1 || cmp.dct_k == 784);
    assert!(cmp.dct_k >= 1 && cmp.dct_k <= 784);
    assert_eq!(cmp.rrae_residual.shape(), &[28, 28]);
    assert!(compare_compression(&data.test.images, &model, &c.rrae()).is_err());
}

#[test]
fn conditional_runs_form_their_own_groups() {
    let dir = tempfile::tempdir().unwrap();
    let configs: Vec<TrainConfig> = [false, true]
        .into_iter()
        .flat_map(|conditional| {
            let d = dir.path().to_path_buf();
            [1, 2].into_iter().map(move |t| TrainConfig {
                out_dir: None,
                epochs: 0,
                conditional,
                dump_samples: false,
                ..tiny(&d, t)
            })
        })
        .collect();
    assert_eq!(configs[2].default_run_name(), "mnist-cond_bcekld_z2_T1_s3");
    let rows = sweep(&configs, dir.path()).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
    assert_eq!(labels, ["mnist", "mnist", "mnist-cond", "mnist-cond"]);
    assert_eq!(rows[2].dr_percent, 0.0);
}

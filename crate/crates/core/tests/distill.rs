use movnect::distill::{
    evaluate_mpjpe, run_experiment, synth_dataset, train, DistillConfig, ExperimentConfig, SynthConfig,
};
use movnect::network::{Network, NetworkSpec, Variant};
use movnect::tensor::Precision;
use movnect::Error;

fn tiny_experiment() -> ExperimentConfig {
    ExperimentConfig {
        input_size: 32,
        train_samples: 8,
        val_samples: 4,
        teacher_epochs: 1,
        student_epochs: 1,
        seeds: vec![0, 1],
        alpha: 0.25,
        ..ExperimentConfig::default()
    }
}

#[test]
fn experiment_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment();
    let mut lines = Vec::new();
    let report = run_experiment(&cfg, Some(dir.path()), |l| lines.push(l.to_string())).unwrap();
    assert_eq!(lines.len(), 1 + 2 * cfg.seeds.len());
    assert_eq!(report.seeds.len(), 2);
    assert!(report.teacher_mpjpe.is_finite());

    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let rows: Vec<Vec<&str>> = summary.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for (row, s) in rows.iter().zip(&report.seeds) {
        assert_eq!(row[0], s.seed.to_string());
        assert_eq!(row[1].parse::<f64>().unwrap(), 1.0);
        assert_eq!(row[3].parse::<f64>().unwrap(), cfg.alpha);
        assert_eq!(row[2].parse::<f64>().unwrap(), s.gt_only_mpjpe);
    }
    for name in ["teacher.csv", "teacher.mvnw", "student_gt_seed0.csv", "student_kd_seed1.mvnw", "report.json"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["alpha"], 0.25);

    // reloaded teacher reproduces its validation error
    let teacher = Network::load(dir.path().join("teacher.mvnw")).unwrap();
    assert_eq!(teacher.spec().variant, Variant::TypeC);
    assert_eq!(teacher.spec().input_size, 32);
    let data = synth_dataset(cfg.train_samples + cfg.val_samples, cfg.data_seed, &SynthConfig::new(32)).unwrap();
    let again = evaluate_mpjpe(&teacher, &data[cfg.train_samples..]).unwrap();
    assert!((again - report.teacher_mpjpe).abs() < 1e-6, "{again} vs {}", report.teacher_mpjpe);
}

#[test]
fn experiment_is_reproducible() {
    let cfg = ExperimentConfig {
        seeds: vec![3],
        ..tiny_experiment()
    };
    let a = run_experiment(&cfg, None, |_| {}).unwrap();
    let b = run_experiment(&cfg, None, |_| {}).unwrap();
    assert_eq!(a, b);
}

#[test]
fn config_parsing() {
    let cfg = ExperimentConfig::from_toml("input_size = 64\nseeds = [7]\noptimizer = \"rmsprop\"").unwrap();
    assert_eq!(cfg.input_size, 64);
    assert_eq!(cfg.seeds, vec![7]);
    assert_eq!(cfg.student_epochs, ExperimentConfig::default().student_epochs);
    assert!(matches!(ExperimentConfig::from_toml("epochs = 3"), Err(Error::Config(_))));
    assert!(matches!(ExperimentConfig::from_toml("teacher = \"type-z\""), Err(Error::Config(_))));
}

#[test]
fn diverging_training_reports_the_step() {
    let data = synth_dataset(4, 1, &SynthConfig::new(32)).unwrap();
    let cfg = DistillConfig {
        learning_rate: 1e300,
        epochs: 3,
        batch_size: 2,
        ..DistillConfig::default()
    };
    let spec = NetworkSpec::preset(Variant::TypeA).with_input_size(32);
    match train(spec, None, &data, &[], &cfg) {
        Err(Error::NonFiniteLoss { step }) => assert!(step >= 1),
        other => panic!("expected a non-finite loss, got {:?}", other.map(|o| o.metrics)),
    }
}

#[test]
fn double_precision_weights_keep_training_state_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(6, 2, &SynthConfig::new(32)).unwrap();
    let cfg = DistillConfig {
        epochs: 1,
        ..DistillConfig::default()
    };
    let out = train(NetworkSpec::preset(Variant::TypeA).with_input_size(32), None, &data[..4], &data[4..], &cfg).unwrap();
    let path = dir.path().join("a.mvnw");
    out.network.save(&path, Precision::Double).unwrap();
    let back = Network::load(&path).unwrap();
    assert_eq!(back.params(), out.network.params());
}

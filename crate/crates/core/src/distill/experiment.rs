use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{evaluate_mpjpe, train_network, write_metrics_csv, DistillConfig, OptimizerKind, TeacherTargets};
use super::{synth_dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::network::{Init, Network, NetworkSpec, Variant};
use crate::tensor::Precision;

/// Teacher-student toy experiment. The defaults are the full-size run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub input_size: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub data_seed: u64,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub seeds: Vec<u64>,
    /// Blend factor of the distilled student; the baseline always uses 1.
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub teacher: Variant,
    pub student: Variant,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            input_size: 128,
            train_samples: 1800,
            val_samples: 200,
            data_seed: 2024,
            teacher_epochs: 20,
            student_epochs: 20,
            seeds: vec![0, 1, 2, 3, 4],
            alpha: 0.5,
            learning_rate: 2.5e-4,
            batch_size: 4,
            optimizer: OptimizerKind::Adam,
            teacher: Variant::TypeC,
            student: Variant::TypeA,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    fn distill(&self, alpha: f64, epochs: usize, seed: u64) -> DistillConfig {
        DistillConfig {
            alpha,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            epochs,
            seed,
            squared_norm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub gt_only_mpjpe: f64,
    pub distilled_mpjpe: f64,
}

impl SeedResult {
    /// Positive when distillation helped.
    pub fn improvement(&self) -> f64 {
        self.gt_only_mpjpe - self.distilled_mpjpe
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub teacher_mpjpe: f64,
    pub seeds: Vec<SeedResult>,
}

impl ExperimentReport {
    pub fn wins(&self) -> usize {
        self.seeds.iter().filter(|s| s.distilled_mpjpe <= s.gt_only_mpjpe).count()
    }

    pub fn mean_improvement(&self) -> f64 {
        self.seeds.iter().map(SeedResult::improvement).sum::<f64>() / self.seeds.len().max(1) as f64
    }
}

/// Trains the teacher, then one ground-truth-only and one distilled student
/// per seed. With `out_dir` set, per-epoch CSVs, the teacher weights and
/// `summary.csv` and `report.json` are written there. `log` receives one line per finished run.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
    mut log: impl FnMut(&str),
) -> Result<ExperimentReport> {
    if cfg.seeds.is_empty() || cfg.train_samples == 0 || cfg.val_samples == 0 {
        return Err(Error::Config("experiment needs seeds, training and validation samples".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let synth = SynthConfig::new(cfg.input_size);
    let data = synth_dataset(cfg.train_samples + cfg.val_samples, cfg.data_seed, &synth)?;
    let (train_set, val_set) = data.split_at(cfg.train_samples);

    let teacher_spec = NetworkSpec::preset(cfg.teacher).with_input_size(cfg.input_size);
    let student_spec = NetworkSpec::preset(cfg.student).with_input_size(cfg.input_size);
    if teacher_spec.map_size() != student_spec.map_size() {
        return Err(Error::Config("teacher and student output extents differ".into()));
    }

    let teacher0 = Network::build(teacher_spec, Init::Random(cfg.data_seed))?;
    let teacher = train_network(teacher0, None, train_set, val_set, &cfg.distill(1.0, cfg.teacher_epochs, cfg.data_seed))?;
    let teacher_mpjpe = evaluate_mpjpe(&teacher.network, val_set)?;
    log(&format!("teacher {:?}: val MPJPE {teacher_mpjpe:.1} mm", cfg.teacher));
    if let Some(dir) = out_dir {
        write_metrics_csv(dir.join("teacher.csv"), &teacher.metrics)?;
        teacher.network.save(dir.join("teacher.mvnw"), Precision::Double)?;
    }
    let targets = TeacherTargets::compute(&teacher.network, train_set)?;

    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut finals = [0.0; 2];
        for (k, (alpha, tag)) in [(1.0, "gt"), (cfg.alpha, "kd")].into_iter().enumerate() {
            let net = Network::build(student_spec.clone(), Init::Random(seed))?;
            let t = (alpha < 1.0).then_some(&targets);
            let out = train_network(net, t, train_set, val_set, &cfg.distill(alpha, cfg.student_epochs, seed))?;
            finals[k] = out.metrics.last().map_or(f64::NAN, |m| m.val_mpjpe_mm);
            log(&format!("seed {seed} alpha {alpha}: val MPJPE {:.1} mm", finals[k]));
            if let Some(dir) = out_dir {
                write_metrics_csv(dir.join(format!("student_{tag}_seed{seed}.csv")), &out.metrics)?;
                out.network.save(dir.join(format!("student_{tag}_seed{seed}.mvnw")), Precision::Double)?;
            }
        }
        seeds.push(SeedResult {
            seed,
            gt_only_mpjpe: finals[0],
            distilled_mpjpe: finals[1],
        });
    }
    let report = ExperimentReport {
        config: cfg.clone(),
        teacher_mpjpe,
        seeds,
    };
    if let Some(dir) = out_dir {
        let mut csv = String::from("seed,alpha_gt_only,gt_only_mpjpe_mm,alpha_distilled,distilled_mpjpe_mm,improvement_mm\n");
        for s in &report.seeds {
            csv.push_str(&format!(
                "{},1,{},{},{},{}\n",
                s.seed,
                s.gt_only_mpjpe,
                cfg.alpha,
                s.distilled_mpjpe,
                s.improvement()
            ));
        }
        let path = dir.join("summary.csv");
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("report.json");
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

//! Ablation harness: trains two arms on identical data and seeds, evaluates
//! both on the held-out split, and reports per-arm metric summaries with the
//! sign of the delta.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{err_config, Result};
use crate::model::DiffModParams;
use crate::pipeline::eval::{evaluate, EvalConfig};
use crate::pipeline::train::{train, AssignmentKind, TrainConfig};
use crate::scenegen::{generate_scene, SceneConfig, SceneSequence};

use crate::assign::ScheduleKind;
use crate::numerics::init::{derive_seed, derive_seed_index};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Assignment,
    MissingLoss,
    Scheduling,
    Tpgf,
}

impl std::str::FromStr for AblationKind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "assignment" => Ok(AblationKind::Assignment),
            "missing_loss" => Ok(AblationKind::MissingLoss),
            "scheduling" => Ok(AblationKind::Scheduling),
            "tpgf" => Ok(AblationKind::Tpgf),
            other => Err(err_config!(
                "unknown ablation kind {other:?} (expected assignment|missing_loss|scheduling|tpgf)"
            )),
        }
    }
}

impl AblationKind {
    /// (method arm, baseline arm) labels.
    pub fn arm_names(&self) -> (&'static str, &'static str) {
        match self {
            AblationKind::Assignment => ("mink_ota", "simota"),
            AblationKind::MissingLoss => ("with_missing_loss", "without_missing_loss"),
            AblationKind::Scheduling => ("exponential", "linear"),
            AblationKind::Tpgf => ("with_tpgf", "without_tpgf"),
        }
    }

    fn configure(&self, train: &mut TrainConfig, baseline: bool) {
        match self {
            AblationKind::Assignment => {
                train.assignment_kind = if baseline {
                    AssignmentKind::Simota
                } else {
                    AssignmentKind::Minkota
                };
            }
            AblationKind::MissingLoss => train.missing_loss_enabled = !baseline,
            AblationKind::Scheduling => {
                train.schedule_kind = if baseline {
                    ScheduleKind::Linear
                } else {
                    ScheduleKind::Exponential
                };
            }
            AblationKind::Tpgf => train.tpgf_enabled = !baseline,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub arms: (String, String),
    pub rows: Vec<AblationRow>,
    pub summary: Vec<ArmSummary>,
}

impl AblationTable {
    pub fn metric_mean(&self, arm: &str, metric: &str) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.arm == arm && r.metric == metric)
            .map(|r| r.value)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    /// mean(method) − mean(baseline) for a metric.
    pub fn delta(&self, metric: &str) -> f64 {
        self.metric_mean(&self.arms.0, metric) - self.metric_mean(&self.arms.1, metric)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,seed,metric,value\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{:.6}\n", r.arm, r.seed, r.metric, r.value));
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        for s in &self.summary {
            out.push_str(&format!(
                "{:<22} {:<9} mean {:.4} std {:.4}\n",
                s.arm, s.metric, s.mean, s.std
            ));
        }
        for metric in ["recall", "precision", "f1"] {
            let d = self.delta(metric);
            out.push_str(&format!(
                "delta {metric}: {d:+.4} ({} − {})\n",
                self.arms.0, self.arms.1
            ));
        }
        out
    }
}

/// Scaled-down configuration for ablation runs: smaller scenes with matched
/// point density and a short schedule keep the two-arm × multi-seed grid
/// tractable on a couple of CPU cores.
pub fn ablation_preset() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.scene.height = 64;
    cfg.scene.width = 64;
    cfg.scene.object_count = (3, 6);
    cfg.scene.min_separation = 12.0;
    cfg.dataset.n_train = 12;
    cfg.dataset.n_test = 4;
    cfg.model.denoise.points = 150;
    cfg.train.iterations = 400;
    cfg.train.warmup_iters = 50;
    cfg.train.decay_at = 320;
    cfg
}

fn make_scenes(base: &SceneConfig, count: usize, seed: u64) -> Result<Vec<SceneSequence>> {
    (0..count)
        .map(|i| {
            let mut cfg = base.clone();
            cfg.seed = derive_seed_index(seed, i as u64);
            generate_scene(&cfg)
        })
        .collect()
}

/// Metrics of one trained arm.
fn run_arm(
    base: &RunConfig,
    kind: AblationKind,
    baseline: bool,
    seed: u64,
    train_scenes: &[SceneSequence],
    test_scenes: &[SceneSequence],
) -> Result<Vec<(String, f64)>> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.resolve();
    kind.configure(&mut cfg.train, baseline);
    cfg.model.tpgf_enabled = cfg.train.tpgf_enabled;
    cfg.validate()?;

    let mut model = DiffModParams::new(cfg.model.clone())?;
    train(&mut model, train_scenes, &cfg.train, |_| {})?;
    let eval_cfg = EvalConfig {
        d_eval: cfg.eval.d_eval,
        seed: cfg.eval.seed,
    };
    let report = evaluate(&model, test_scenes, &eval_cfg)?;
    Ok(vec![
        ("recall".to_string(), report.mean_recall),
        ("precision".to_string(), report.mean_precision),
        ("f1".to_string(), report.mean_f1),
        ("jitter".to_string(), report.mean_jitter),
    ])
}

/// Trains both arms under identical seeds and data for every seed, then
/// summarizes per-arm metric means and standard deviations.
pub fn run_ablation(
    kind: AblationKind,
    base: &RunConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(err_config!("ablations need at least 3 seeds, got {}", seeds.len()));
    }
    let (method_arm, baseline_arm) = kind.arm_names();
    let mut rows = Vec::new();
    for &seed in seeds {
        let data_seed = derive_seed(seed, "ablation-data");
        let train_scenes = make_scenes(&base.scene, base.dataset.n_train, data_seed)?;
        let test_scenes = make_scenes(
            &base.scene,
            base.dataset.n_test,
            derive_seed(data_seed, "test"),
        )?;
        for (arm, baseline) in [(method_arm, false), (baseline_arm, true)] {
            let metrics = run_arm(base, kind, baseline, seed, &train_scenes, &test_scenes)?;
            for (metric, value) in metrics {
                rows.push(AblationRow {
                    arm: arm.to_string(),
                    seed,
                    metric,
                    value,
                });
            }
        }
    }
    let mut summary = Vec::new();
    for arm in [method_arm, baseline_arm] {
        for metric in ["recall", "precision", "f1", "jitter"] {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.arm == arm && r.metric == metric)
                .map(|r| r.value)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            summary.push(ArmSummary {
                arm: arm.to_string(),
                metric: metric.to_string(),
                mean,
                std: var.sqrt(),
            });
        }
    }
    Ok(AblationTable {
        kind,
        arms: (method_arm.to_string(), baseline_arm.to_string()),
        rows,
        summary,
    })
}

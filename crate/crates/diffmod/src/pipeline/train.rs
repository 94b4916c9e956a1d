//! Training loop: per-level supervision through MinK OTA (or the SimOTA
//! baseline) and the focal/Smooth-L1/missing objective, optimized with Adam
//! under warm-up and step decay. Batch items run on independent tapes in
//! parallel; gradients reduce in item order so runs are bit-reproducible.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assign::{mink_ota, schedule_params, simota_baseline, AssignConfig, ScheduleKind};
use crate::diffusion::{corrupt_points, replication_count};
use crate::error::{err_config, Error, Result};
use crate::features::{compute_feature_field, frame_window};
use crate::loss::{focal_cls_loss, missing_loss, reg_loss, total_loss, LevelLoss, LossBreakdown, LossWeights};
use crate::model::DiffModParams;
use crate::numerics::init::{derive_seed, derive_seed_index};
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;
use crate::pipeline::optimizer::Adam;
use crate::scenegen::SceneSequence;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignmentKind {
    Minkota,
    Simota,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub decay_at: usize,
    pub decay_factor: f64,
    pub seed: u64,
    pub schedule_kind: ScheduleKind,
    pub assignment_kind: AssignmentKind,
    pub missing_loss_enabled: bool,
    pub tpgf_enabled: bool,
    /// Frames per training window.
    pub window: usize,
    pub weights: LossWeights,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 4,
            base_lr: 1e-3,
            warmup_iters: 200,
            decay_at: 2400,
            decay_factor: 0.1,
            seed: 0,
            schedule_kind: ScheduleKind::Exponential,
            assignment_kind: AssignmentKind::Minkota,
            missing_loss_enabled: true,
            tpgf_enabled: true,
            window: 3,
            weights: LossWeights::default(),
            log_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.window == 0 {
            return Err(err_config!("iterations, batch_size and window must be positive"));
        }
        if self.base_lr <= 0.0 || self.decay_factor <= 0.0 {
            return Err(err_config!("learning rates must be positive"));
        }
        Ok(())
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        let mut lr = if iteration < self.warmup_iters {
            self.base_lr * (iteration + 1) as f64 / self.warmup_iters as f64
        } else {
            self.base_lr
        };
        if iteration >= self.decay_at {
            lr *= self.decay_factor;
        }
        lr
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iteration: usize,
    pub lr: f64,
    pub levels: Vec<LevelLoss>,
    pub total: f64,
}

/// Gradients and diagnostics from one batch item.
struct ItemResult {
    grads: Vec<Vec<f64>>,
    breakdown: LossBreakdown,
}

/// One 3-frame window on one scene, on its own tape.
fn train_item(
    model: &DiffModParams,
    scene: &SceneSequence,
    t0: usize,
    cfg: &TrainConfig,
    item_seed: u64,
) -> Result<ItemResult> {
    let denoise = &model.config.denoise;
    let (w, h) = (scene.config.width, scene.config.height);
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let n_params = model.parameters().len();

    // The trainer pairs tape leaves 0..n with the parameter list; verify the
    // pairing on the recorded values.
    for (i, p) in model.parameters().iter().enumerate() {
        let v = tape.var_at(i);
        if tape.value(v) != p.tensor().data() {
            return Err(err_config!("parameter bind order broke at {}", p.name()));
        }
    }

    let grid = model.region_grid(w, h);
    let mut hidden = model.initial_hidden(&mut tape, &vars, &grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed);

    let mut frame_losses = Vec::with_capacity(cfg.window);
    let mut level_logs: Vec<LevelLoss> =
        (0..denoise.levels).map(|_| LevelLoss { cls: 0.0, reg: 0.0, miss: 0.0, total: 0.0 }).collect();
    let mut n_gt_total = 0usize;

    for f_ix in 0..cfg.window {
        let t = t0 + f_ix;
        let window = frame_window(&scene.frames, t);
        let field = compute_feature_field(&window, t)?;
        let centers: Vec<(f64, f64)> = scene
            .visible_centers(t)
            .into_iter()
            .map(|(x, y, _)| (x, y))
            .collect();
        n_gt_total += centers.len();

        let s: usize = rng.random_range(1..=model.schedule.steps);
        let corrupt_seed = rng.random::<u64>();
        let corrupted = corrupt_points(
            &centers,
            denoise,
            &model.schedule,
            s,
            w as f64,
            h as f64,
            corrupt_seed,
        )?;
        let init = Tensor::from_raw(vec![denoise.points, 2], corrupted.coords.clone());
        let (outs, hidden_next) = model.forward_frame(&mut tape, &vars, &field, &init, hidden, Some(s))?;
        hidden = hidden_next;

        let k_assign = replication_count(
            denoise.points,
            centers.len().max(1),
            denoise.replication_ratio,
            denoise.k_max,
        )
        .max(1);

        let mut level_terms = Vec::with_capacity(outs.len());
        for (ix, out) in outs.iter().enumerate() {
            let acfg = AssignConfig {
                k: k_assign,
                level: ix + 1,
                levels: denoise.levels,
                r: denoise.r,
                schedule: cfg.schedule_kind,
            };
            let (_, r_thre) = schedule_params(&acfg);
            let inputs = tape.value(out.input_coords).to_vec();
            let assignment = match cfg.assignment_kind {
                AssignmentKind::Minkota => mink_ota(&inputs, &centers, &acfg)?,
                AssignmentKind::Simota => simota_baseline(&inputs, &centers, r_thre)?,
            };
            let labels: Vec<bool> = assignment.sample_targets().iter().map(|t| t.is_some()).collect();
            let cls = focal_cls_loss(
                &mut tape,
                out.probs,
                &labels,
                cfg.weights.focal_alpha,
                cfg.weights.focal_gamma,
            )?;
            let reg = reg_loss(
                &mut tape,
                out.coords,
                &assignment.sample_targets(),
                &centers,
                r_thre,
            )?;
            let miss = if cfg.missing_loss_enabled {
                missing_loss(&mut tape, out.coords, &centers, r_thre, &cfg.weights, None)?
            } else {
                tape.scalar_const(0.0)
            };
            level_logs[ix].cls += tape.value(cls)[0];
            level_logs[ix].reg += tape.value(reg)[0];
            level_logs[ix].miss += tape.value(miss)[0];
            level_terms.push((cls, reg, miss));
        }
        let frame_loss = total_loss(&mut tape, &level_terms, &cfg.weights)?;
        frame_losses.push(frame_loss);
    }

    let mut acc = frame_losses[0];
    for fl in &frame_losses[1..] {
        acc = tape.add(acc, *fl)?;
    }
    let loss = tape.scale(acc, 1.0 / cfg.window as f64);
    let loss_value = tape.value(loss)[0];
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss {loss_value} (scene seed {}, t0 {t0})",
            scene.config.seed
        )));
    }

    let grads = tape.backward(loss)?;
    let mut out_grads = Vec::with_capacity(n_params);
    for i in 0..n_params {
        let v = tape.var_at(i);
        out_grads.push(match grads.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(v).len()],
        });
    }

    let inv_frames = 1.0 / cfg.window as f64;
    for l in &mut level_logs {
        l.cls *= inv_frames;
        l.reg *= inv_frames;
        l.miss *= inv_frames;
        l.total = cfg.weights.lambda_cls * l.cls
            + cfg.weights.lambda_reg * l.reg
            + cfg.weights.lambda_miss * l.miss;
    }
    Ok(ItemResult {
        grads: out_grads,
        breakdown: LossBreakdown {
            levels: level_logs,
            total: loss_value,
            n_gt: n_gt_total,
        },
    })
}

/// One optimizer step over a batch of sampled windows. Exposed for smoke
/// tests; `train` drives it across iterations.
pub fn train_step(
    model: &mut DiffModParams,
    scenes: &[SceneSequence],
    cfg: &TrainConfig,
    optimizer: &mut Adam,
    iteration: usize,
) -> Result<TrainLogEntry> {
    // Per-item derivations are pure functions of (seed, iteration, slot).
    let batch_seed = derive_seed(cfg.seed, "batch");
    let items: Vec<(usize, usize, u64)> = (0..cfg.batch_size)
        .map(|b| {
            let item_seed = derive_seed_index(batch_seed, (iteration * cfg.batch_size + b) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
            let scene_ix = rng.random_range(0..scenes.len());
            let t_max = scenes[scene_ix].config.frames.saturating_sub(cfg.window);
            let t0 = if t_max == 0 { 0 } else { rng.random_range(0..=t_max) };
            (scene_ix, t0, rng.random::<u64>())
        })
        .collect();

    let results: Vec<Result<ItemResult>> = items
        .par_iter()
        .map(|&(scene_ix, t0, item_seed)| train_item(model, &scenes[scene_ix], t0, cfg, item_seed))
        .collect();

    let mut batch_grads: Option<Vec<Vec<f64>>> = None;
    let mut total = 0.0;
    let mut levels: Vec<LevelLoss> = (0..model.config.denoise.levels)
        .map(|_| LevelLoss { cls: 0.0, reg: 0.0, miss: 0.0, total: 0.0 })
        .collect();
    for r in results {
        let item = r?;
        total += item.breakdown.total;
        for (acc, l) in levels.iter_mut().zip(&item.breakdown.levels) {
            acc.cls += l.cls;
            acc.reg += l.reg;
            acc.miss += l.miss;
            acc.total += l.total;
        }
        match &mut batch_grads {
            None => batch_grads = Some(item.grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&item.grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }
    }
    let inv = 1.0 / cfg.batch_size as f64;
    let mut grads = batch_grads.expect("non-empty batch");
    for g in &mut grads {
        g.iter_mut().for_each(|x| *x *= inv);
    }
    total *= inv;
    for l in &mut levels {
        l.cls *= inv;
        l.reg *= inv;
        l.miss *= inv;
        l.total *= inv;
    }

    let lr = cfg.learning_rate(iteration);
    optimizer.step(&mut model.parameters_mut(), &grads, lr)?;
    Ok(TrainLogEntry {
        iteration,
        lr,
        levels,
        total,
    })
}

/// Full training run; `on_log` receives an entry every `log_every` iterations
/// (and always the first and last).
pub fn train(
    model: &mut DiffModParams,
    scenes: &[SceneSequence],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&TrainLogEntry),
) -> Result<Vec<TrainLogEntry>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(err_config!("no training scenes"));
    }
    let mut optimizer = Adam::new(&model.parameters());
    let mut log = Vec::new();
    for iteration in 0..cfg.iterations {
        let entry = train_step(model, scenes, cfg, &mut optimizer, iteration)?;
        if iteration % cfg.log_every == 0 || iteration + 1 == cfg.iterations {
            on_log(&entry);
            log.push(entry);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::scenegen::{generate_scene, SceneConfig};

    fn tiny_setup() -> (DiffModParams, Vec<SceneSequence>, TrainConfig) {
        let model_cfg = ModelConfig {
            d: 8,
            k_dim: 4,
            sraa: crate::sraa::SraaConfig { d: 8, heads: 2, beta: 4, ..Default::default() },
            denoise: crate::diffusion::DenoiseConfig {
                r: 2.0,
                levels: 2,
                points: 24,
                steps: 50,
                ..Default::default()
            },
            seed: 1,
            ..ModelConfig::default()
        };
        let scene_cfg = SceneConfig {
            height: 32,
            width: 32,
            frames: 6,
            object_count: (2, 3),
            min_separation: 8.0,
            seed: 5,
            ..SceneConfig::default()
        };
        let scenes = vec![generate_scene(&scene_cfg).unwrap()];
        let train_cfg = TrainConfig {
            iterations: 3,
            batch_size: 2,
            warmup_iters: 2,
            decay_at: 1000,
            seed: 9,
            log_every: 1,
            ..TrainConfig::default()
        };
        (DiffModParams::new(model_cfg).unwrap(), scenes, train_cfg)
    }

    #[test]
    fn identical_seeds_give_identical_loss_traces() {
        let (mut m1, scenes, cfg) = tiny_setup();
        let (mut m2, _, _) = tiny_setup();
        let log1 = train(&mut m1, &scenes, &cfg, |_| {}).unwrap();
        let log2 = train(&mut m2, &scenes, &cfg, |_| {}).unwrap();
        assert_eq!(log1.len(), log2.len());
        for (a, b) in log1.iter().zip(&log2) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
            for (la, lb) in a.levels.iter().zip(&b.levels) {
                assert_eq!(la.cls.to_bits(), lb.cls.to_bits());
                assert_eq!(la.reg.to_bits(), lb.reg.to_bits());
                assert_eq!(la.miss.to_bits(), lb.miss.to_bits());
            }
        }
        // parameters end bit-identical as well
        for (p, q) in m1.parameters().iter().zip(m2.parameters().iter()) {
            assert_eq!(p.tensor().data(), q.tensor().data());
        }
    }

    #[test]
    fn disabling_missing_loss_zeroes_it_exactly() {
        let (mut model, scenes, mut cfg) = tiny_setup();
        cfg.missing_loss_enabled = false;
        cfg.iterations = 1;
        let log = train(&mut model, &scenes, &cfg, |_| {}).unwrap();
        for l in &log[0].levels {
            assert_eq!(l.miss, 0.0);
        }
    }

    #[test]
    fn warmup_and_decay_shape_the_learning_rate() {
        let cfg = TrainConfig {
            base_lr: 1.0,
            warmup_iters: 10,
            decay_at: 100,
            decay_factor: 0.1,
            ..TrainConfig::default()
        };
        assert!((cfg.learning_rate(0) - 0.1).abs() < 1e-12);
        assert!((cfg.learning_rate(9) - 1.0).abs() < 1e-12);
        assert!((cfg.learning_rate(50) - 1.0).abs() < 1e-12);
        assert!((cfg.learning_rate(100) - 0.1).abs() < 1e-12);
    }
}

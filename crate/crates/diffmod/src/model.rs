//! The end-to-end detector: point initialization, N stacked denoising levels
//! (SRCA → SRSA → DIM conditioned on the previous level → TSS → heads), the
//! temporal fusion hook, and inference post-processing.

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{dim_transform, tss_scale, DimParams, DimVars, TssParams, TssVars};
use crate::diffusion::{build_schedule, level_timestep, DenoiseConfig, NoiseSchedule};
use crate::error::{err_config, err_format, Result};
use crate::features::{
    compute_feature_field, patch_embed, sample_and_project, FeatureField, FeatureProjection,
};
use crate::numerics::init::Parameter;
use crate::numerics::nn::linear;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::sraa::{bucket_matrix, sraa_attention_with_buckets, SraaConfig, SraaLayer, SraaLayerVars};
use crate::tpgf::{fuse_global, gru_step, scatter_to_regions, RegionGrid, TemporalState, TpgfParams, TpgfVars};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Model feature dimension.
    pub d: usize,
    /// Inner rank of the dynamic interaction transform.
    pub k_dim: usize,
    pub sraa: SraaConfig,
    pub denoise: DenoiseConfig,
    /// Inference confidence threshold.
    pub tau: f64,
    /// Radius NMS suppression distance.
    pub r_nms: f64,
    /// Confidence filter for points entering the temporal memory.
    pub state_conf_threshold: f64,
    pub tpgf_enabled: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let denoise = DenoiseConfig::default();
        ModelConfig {
            d: 64,
            k_dim: 4,
            sraa: SraaConfig::default(),
            r_nms: denoise.r,
            denoise,
            tau: 0.5,
            state_conf_threshold: 0.3,
            tpgf_enabled: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.sraa.validate()?;
        self.denoise.validate()?;
        if self.sraa.d != self.d {
            return Err(err_config!("sraa.d {} must equal d {}", self.sraa.d, self.d));
        }
        if !(0.0 < self.tau && self.tau < 1.0) {
            return Err(err_config!("tau must lie in (0,1)"));
        }
        if self.r_nms < 0.0 {
            return Err(err_config!("r_nms must be non-negative"));
        }
        Ok(())
    }
}

/// Per-level trainable blocks.
#[derive(Debug, Clone)]
pub struct LevelParams {
    pub srca: SraaLayer,
    pub srsa: SraaLayer,
    pub dim: DimParams,
    pub tss: TssParams,
    pub cls_w: Parameter,
    pub cls_b: Parameter,
    pub reg_w: Parameter,
    pub reg_b: Parameter,
}

pub struct LevelVars {
    pub srca: SraaLayerVars,
    pub srsa: SraaLayerVars,
    pub dim: DimVars,
    pub tss: TssVars,
    pub cls_w: Var,
    pub cls_b: Var,
    pub reg_w: Var,
    pub reg_b: Var,
}

impl LevelParams {
    fn new(prefix: &str, cfg: &ModelConfig, seed: u64) -> Self {
        let p = |n: &str| format!("{prefix}.{n}");
        LevelParams {
            srca: SraaLayer::new(&p("srca"), &cfg.sraa, seed),
            srsa: SraaLayer::new(&p("srsa"), &cfg.sraa, seed),
            dim: DimParams::new(&p("dim"), cfg.d, cfg.d, cfg.k_dim, seed),
            tss: TssParams::new(&p("tss"), cfg.d, seed),
            cls_w: Parameter::xavier(p("cls.weight"), cfg.d, 1, seed),
            // bias starts at the detection-head prior so early confidences
            // sit near the positive base rate instead of 0.5
            cls_b: Parameter::new(
                p("cls.bias"),
                vec![1, 1],
                crate::numerics::init::InitKind::Constant(-2.0),
                seed,
            ),
            reg_w: Parameter::xavier(p("reg.weight"), cfg.d, 2, seed),
            reg_b: Parameter::zeros(p("reg.bias"), vec![1, 2], seed),
        }
    }

    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.srca.params();
        out.extend(self.srsa.params());
        out.extend(self.dim.params());
        out.extend(self.tss.params());
        out.extend([&self.cls_w, &self.cls_b, &self.reg_w, &self.reg_b]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.srca.params_mut();
        out.extend(self.srsa.params_mut());
        out.extend(self.dim.params_mut());
        out.extend(self.tss.params_mut());
        out.push(&mut self.cls_w);
        out.push(&mut self.cls_b);
        out.push(&mut self.reg_w);
        out.push(&mut self.reg_b);
        out
    }
}

/// Full parameter set plus derived diffusion constants.
pub struct DiffModParams {
    pub config: ModelConfig,
    pub proj: FeatureProjection,
    pub levels: Vec<LevelParams>,
    pub tpgf: TpgfParams,
    pub schedule: NoiseSchedule,
    /// Fixed level→timestep ladder used at inference.
    pub level_steps: Vec<usize>,
}

pub struct ModelVars {
    pub proj_w: Var,
    pub proj_b: Var,
    pub levels: Vec<LevelVars>,
    pub tpgf: TpgfVars,
}

/// Distance-bucket indices used by one frame pass, per level (SRCA, SRSA).
/// Bucketing is piecewise constant in the coordinates, so finite-difference
/// verification replays a frozen trace instead of recomputing it.
#[derive(Clone, Default)]
pub struct FrameTrace {
    pub level_buckets: Vec<(Rc<Vec<usize>>, Rc<Vec<usize>>)>,
}

/// One denoising level's outputs on the tape, plus the coordinates it
/// consumed (assignment at level n runs on the level's input coordinates).
pub struct LevelOut {
    pub input_coords: Var,
    pub feats: Var,
    pub coords: Var,
    pub probs: Var,
    pub timestep: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub confidence: f64,
    pub frame: usize,
}

impl DiffModParams {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let schedule = build_schedule(config.denoise.steps)?;
        let levels_n = config.denoise.levels;
        let level_steps = (1..=levels_n)
            .map(|n| level_timestep(n, levels_n, &schedule))
            .collect();
        let seed = config.seed;
        Ok(DiffModParams {
            proj: FeatureProjection::new("proj", config.d, seed),
            levels: (1..=levels_n)
                .map(|n| LevelParams::new(&format!("level.{n}"), &config, seed))
                .collect(),
            tpgf: TpgfParams::new("tpgf", config.d, config.k_dim, seed),
            schedule,
            level_steps,
            config,
        })
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = self.proj.params();
        for l in &self.levels {
            out.extend(l.params());
        }
        out.extend(self.tpgf.params());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.proj.params_mut();
        for l in &mut self.levels {
            out.extend(l.params_mut());
        }
        out.extend(self.tpgf.params_mut());
        out
    }

    /// Checks the unique-name invariant; called by save/load.
    fn check_names(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for p in self.parameters() {
            if !seen.insert(p.name().to_string()) {
                return Err(err_config!("duplicate parameter name {}", p.name()));
            }
        }
        Ok(())
    }

    /// Assembles the structured vars from a flat binding in `parameters()`
    /// order.
    pub fn vars_from_list(&self, vars: &[Var]) -> ModelVars {
        let mut cur = crate::numerics::tape::VarCursor::new(vars);
        let proj_w = cur.next();
        let proj_b = cur.next();
        let levels = self
            .levels
            .iter()
            .map(|_| LevelVars {
                srca: SraaLayerVars::from_cursor(&mut cur),
                srsa: SraaLayerVars::from_cursor(&mut cur),
                dim: DimVars::from_cursor(&mut cur),
                tss: TssVars::from_cursor(&mut cur),
                cls_w: cur.next(),
                cls_b: cur.next(),
                reg_w: cur.next(),
                reg_b: cur.next(),
            })
            .collect();
        let tpgf = TpgfVars::from_cursor(&mut cur);
        assert!(cur.exhausted(), "parameter list and vars out of sync");
        ModelVars {
            proj_w,
            proj_b,
            levels,
            tpgf,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let vars: Vec<Var> = self
            .parameters()
            .iter()
            .map(|p| tape.leaf(p.tensor()))
            .collect();
        self.vars_from_list(&vars)
    }

    pub fn region_grid(&self, width: usize, height: usize) -> RegionGrid {
        RegionGrid {
            stride: self.config.denoise.patch_stride(),
            width,
            height,
        }
    }

    /// Sequence-start hidden state: TPGF runs from frame 1 with h⁰ = 0 and an
    /// empty previous point set, so every region carries f₀-derived state.
    pub fn initial_hidden(&self, tape: &mut Tape, vars: &ModelVars, grid: &RegionGrid) -> Result<Var> {
        let empty = tape.constant(&Tensor::zeros(vec![0, self.config.d]));
        let regions = scatter_to_regions(tape, empty, &[], grid, vars.tpgf.f0)?;
        let h0 = tape.constant(&Tensor::zeros(vec![grid.regions(), self.config.d]));
        gru_step(tape, regions, h0, &vars.tpgf)
    }

    /// One denoising level: sample features at the input points, integrate
    /// global context (SRCA), interact point-to-point (SRSA), condition on
    /// the previous level (DIM) and the timestep (TSS), then predict
    /// confidences and denoised coordinates.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_level(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        level_ix: usize,
        field_var: Var,
        points: Var,
        global_feats: Var,
        region_centers: &Tensor,
        cond: Option<Var>,
        timestep: usize,
        frozen_buckets: Option<&(Rc<Vec<usize>>, Rc<Vec<usize>>)>,
    ) -> Result<(LevelOut, (Rc<Vec<usize>>, Rc<Vec<usize>>))> {
        let level = &self.levels[level_ix];
        let lvars = &vars.levels[level_ix];
        let coords_t = tape.to_tensor(points);

        let (srca_buckets, srsa_buckets) = match frozen_buckets {
            Some((a, b)) => (Rc::clone(a), Rc::clone(b)),
            None => (
                bucket_matrix(coords_t.data(), region_centers.data(), &self.config.sraa)?,
                bucket_matrix(coords_t.data(), coords_t.data(), &self.config.sraa)?,
            ),
        };

        let mut f = sample_and_project(tape, field_var, points, vars.proj_w, vars.proj_b)?;
        let cond = cond.unwrap_or(f);
        f = sraa_attention_with_buckets(
            tape, f, &coords_t, global_feats, region_centers,
            Rc::clone(&srca_buckets), &lvars.srca, &self.config.sraa,
        )?;
        f = sraa_attention_with_buckets(
            tape, f, &coords_t, f, &coords_t,
            Rc::clone(&srsa_buckets), &lvars.srsa, &self.config.sraa,
        )?;
        f = dim_transform(tape, f, cond, &level.dim, &lvars.dim)?;
        f = tss_scale(tape, f, timestep, self.schedule.steps, &level.tss, &lvars.tss)?;

        let logits = linear(tape, f, lvars.cls_w, lvars.cls_b)?;
        let probs = tape.sigmoid(logits);
        let offsets = linear(tape, f, lvars.reg_w, lvars.reg_b)?;
        let coords = tape.add(points, offsets)?;
        Ok((
            LevelOut {
                input_coords: points,
                feats: f,
                coords,
                probs,
                timestep,
            },
            (srca_buckets, srsa_buckets),
        ))
    }

    /// Full frame pass: build the global embedding, adjust it with the
    /// temporal memory, then run all N levels, each consuming the previous
    /// level's coordinates and features. Returns the per-level outputs and
    /// the updated hidden state.
    pub fn forward_frame(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        field: &FeatureField,
        init_points: &Tensor,
        hidden: Var,
        level1_timestep: Option<usize>,
    ) -> Result<(Vec<LevelOut>, Var)> {
        let (outs, hidden_next, _) =
            self.forward_frame_traced(tape, vars, field, init_points, hidden, level1_timestep, None)?;
        Ok((outs, hidden_next))
    }

    /// `forward_frame` with the discrete bucket trace captured, and optionally
    /// replayed from a frozen trace.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_frame_traced(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        field: &FeatureField,
        init_points: &Tensor,
        hidden: Var,
        level1_timestep: Option<usize>,
        frozen: Option<&FrameTrace>,
    ) -> Result<(Vec<LevelOut>, Var, FrameTrace)> {
        let grid = self.region_grid(field.width, field.height);
        let field_var = tape.constant(&field.data);
        let (proj_w, proj_b) = (vars.proj_w, vars.proj_b);
        let emb = patch_embed(tape, field_var, field, grid.stride, proj_w, proj_b)?;
        let global_feats = if self.config.tpgf_enabled {
            fuse_global(tape, emb.features, hidden, &self.tpgf, &vars.tpgf)?
        } else {
            emb.features
        };

        let mut outs: Vec<LevelOut> = Vec::with_capacity(self.levels.len());
        let mut trace = FrameTrace::default();
        let mut points = tape.leaf(init_points);
        let mut cond: Option<Var> = None;
        for (ix, _) in self.levels.iter().enumerate() {
            let timestep = if ix == 0 {
                level1_timestep.unwrap_or(self.level_steps[0])
            } else {
                self.level_steps[ix]
            };
            let (out, buckets) = self.forward_level(
                tape,
                vars,
                ix,
                field_var,
                points,
                global_feats,
                &emb.region_centers,
                cond,
                timestep,
                frozen.map(|f| &f.level_buckets[ix]),
            )?;
            trace.level_buckets.push(buckets);
            points = out.coords;
            cond = Some(out.feats);
            outs.push(out);
        }

        let hidden_next = if self.config.tpgf_enabled {
            let last = outs.last().expect("at least one level");
            let probs = tape.value(last.probs).to_vec();
            let coords = tape.value(last.coords).to_vec();
            let keep: Vec<usize> = probs
                .iter()
                .enumerate()
                .filter(|(_, p)| **p >= self.config.state_conf_threshold)
                .map(|(i, _)| i)
                .collect();
            let kept_coords: Vec<f64> = keep
                .iter()
                .flat_map(|&i| [coords[i * 2], coords[i * 2 + 1]])
                .collect();
            let kept_feats = tape.gather_rows(last.feats, Rc::new(keep))?;
            let regions = scatter_to_regions(tape, kept_feats, &kept_coords, &grid, vars.tpgf.f0)?;
            gru_step(tape, regions, hidden, &vars.tpgf)?
        } else {
            hidden
        };
        Ok((outs, hidden_next, trace))
    }

    /// Checkpoint save: config JSON plus every named parameter tensor.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.check_names()?;
        let config = serde_json::to_value(&self.config).map_err(|e| err_format!("{e}"))?;
        let tensors: Vec<(String, &Tensor)> = self
            .parameters()
            .iter()
            .map(|p| (p.name().to_string(), p.tensor()))
            .collect();
        crate::numerics::checkpoint::save(path, &config, &tensors)
    }

    /// Checkpoint load: rebuilds the architecture from the embedded config
    /// and restores every tensor bit-exactly.
    pub fn load(path: &Path) -> Result<Self> {
        let (config_json, tensors) = crate::numerics::checkpoint::load(path)?;
        let config: ModelConfig =
            serde_json::from_value(config_json).map_err(|e| err_format!("checkpoint config: {e}"))?;
        let mut model = DiffModParams::new(config)?;
        let mut by_name: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
        for p in model.parameters_mut() {
            let t = by_name
                .remove(p.name())
                .ok_or_else(|| err_format!("checkpoint missing parameter {}", p.name()))?;
            p.set_tensor(t)?;
        }
        if let Some((name, _)) = by_name.into_iter().next() {
            return Err(err_format!("checkpoint has unknown parameter {name}"));
        }
        Ok(model)
    }

    /// Serializes a temporal state with the shared checkpoint format.
    pub fn save_state(&self, state: &TemporalState, path: &Path) -> Result<()> {
        let config = serde_json::json!({ "frame": state.frame });
        crate::numerics::checkpoint::save(
            path,
            &config,
            &[("tpgf.hidden".to_string(), &state.hidden)],
        )
    }

    pub fn load_state(&self, path: &Path) -> Result<TemporalState> {
        let (config, tensors) = crate::numerics::checkpoint::load(path)?;
        let frame = config
            .get("frame")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| err_format!("state checkpoint missing frame index"))? as usize;
        let (name, hidden) = tensors
            .into_iter()
            .next()
            .ok_or_else(|| err_format!("state checkpoint empty"))?;
        if name != "tpgf.hidden" {
            return Err(err_format!("unexpected state tensor {name}"));
        }
        Ok(TemporalState { hidden, frame })
    }
}

/// Uniform initial scatter points over [0,W)×[0,H).
pub fn init_points(m: usize, width: usize, height: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(m * 2);
    for _ in 0..m {
        data.push(rng.random_range(0.0..width as f64));
        data.push(rng.random_range(0.0..height as f64));
    }
    Tensor::from_raw(vec![m, 2], data)
}

/// Greedy radius NMS: points sorted by confidence descending (ties to the
/// lower index), suppressing anything within `r_nms` of a kept point.
pub fn radius_nms(candidates: &[(f64, f64, f64)], r_nms: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b].2.partial_cmp(&candidates[a].2).unwrap().then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let (x, y, _) = candidates[i];
        let suppressed = kept.iter().any(|&k| {
            let (kx, ky, _) = candidates[k];
            ((x - kx).powi(2) + (y - ky).powi(2)).sqrt() < r_nms
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

/// Streaming inference over one sequence: per frame, run the forward pass on
/// fresh uniform points, threshold and suppress, and carry the temporal state.
pub struct SequenceRunner<'m> {
    model: &'m DiffModParams,
    state: TemporalState,
    width: usize,
    height: usize,
    seed: u64,
}

impl<'m> SequenceRunner<'m> {
    pub fn new(model: &'m DiffModParams, width: usize, height: usize, seed: u64) -> Result<Self> {
        let grid = model.region_grid(width, height);
        if width % grid.stride != 0 || height % grid.stride != 0 {
            return Err(err_config!(
                "scene {width}x{height} not divisible by patch stride {}",
                grid.stride
            ));
        }
        Ok(SequenceRunner {
            model,
            state: TemporalState::cold(grid.regions(), model.config.d),
            width,
            height,
            seed,
        })
    }

    pub fn state(&self) -> &TemporalState {
        &self.state
    }

    pub fn set_state(&mut self, state: TemporalState) {
        self.state = state;
    }

    /// Runs one frame and returns the surviving detections; the temporal
    /// state updates even when no detection clears the threshold.
    pub fn step(&mut self, frames: &[Tensor], t: usize) -> Result<Vec<Detection>> {
        let window = crate::features::frame_window(frames, t);
        let field = compute_feature_field(&window, t)?;
        let model = self.model;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let grid = model.region_grid(self.width, self.height);
        let hidden = if t == 0 {
            model.initial_hidden(&mut tape, &vars, &grid)?
        } else {
            tape.constant(&self.state.hidden)
        };
        let pts = init_points(
            model.config.denoise.points,
            self.width,
            self.height,
            crate::numerics::init::derive_seed_index(self.seed, t as u64),
        );
        let (outs, hidden_next) = model.forward_frame(&mut tape, &vars, &field, &pts, hidden, None)?;
        let last = outs.last().expect("levels");
        let probs = tape.value(last.probs);
        let coords = tape.value(last.coords);

        let candidates: Vec<(f64, f64, f64)> = probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p >= model.config.tau)
            .map(|(i, &p)| (coords[i * 2], coords[i * 2 + 1], p))
            .collect();
        let kept = radius_nms(&candidates, model.config.r_nms);
        let detections = kept
            .iter()
            .map(|&i| Detection {
                cx: candidates[i].0,
                cy: candidates[i].1,
                confidence: candidates[i].2,
                frame: t,
            })
            .collect();

        self.state = TemporalState {
            hidden: tape.to_tensor(hidden_next),
            frame: t + 1,
        };
        Ok(detections)
    }
}

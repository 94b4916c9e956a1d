//! Hand-crafted per-pixel feature field over a 5-frame window, bilinear point
//! sampling, and strided global patch embedding. Replaces a learned backbone
//! with deterministic motion-cue channels.

use std::rc::Rc;

use crate::error::{err_config, err_shape, Result};
use crate::numerics::init::Parameter;
use crate::numerics::nn::linear;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Number of raw feature channels.
pub const D_RAW: usize = 8;

/// Dense per-pixel features for one frame.
///
/// Channel order:
/// 0. current intensity
/// 1. |I_t − I_{t−1}|
/// 2. |I_t − I_{t+1}|
/// 3. |I_t − I_{t−2}|
/// 4. |I_t − I_{t+2}|
/// 5. 3×3 local mean of intensity
/// 6. 3×3 local max of the summed difference channels
/// 7. 3×3 variance of the summed difference channels
#[derive(Debug, Clone)]
pub struct FeatureField {
    pub height: usize,
    pub width: usize,
    /// [H × W × D_RAW] tensor.
    pub data: Tensor,
    pub frame_index: usize,
}

/// r_g-strided regional summary of a feature field.
#[derive(Debug)]
pub struct GlobalEmbedding {
    /// Projected region features on the tape, [L_g × d].
    pub features: Var,
    /// Region midpoints in pixel coordinates, [L_g × 2] as (cx, cy).
    pub region_centers: Tensor,
    pub stride: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl GlobalEmbedding {
    pub fn regions(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

#[inline]
fn at(img: &[f64], w: usize, x: usize, y: usize) -> f64 {
    img[y * w + x]
}

/// Computes the 8-channel feature field from a window of 5 frames centered at
/// the current frame (callers pad sequence edges by repetition).
pub fn compute_feature_field(window: &[&Tensor], frame_index: usize) -> Result<FeatureField> {
    if window.len() != 5 {
        return Err(err_shape!("feature window must hold 5 frames, got {}", window.len()));
    }
    let shape = window[2].shape().to_vec();
    if shape.len() != 2 {
        return Err(err_shape!("frames must be 2-D, got {shape:?}"));
    }
    if window.iter().any(|f| f.shape() != shape.as_slice()) {
        return Err(err_shape!("frames in window disagree on shape"));
    }
    let (h, w) = (shape[0], shape[1]);
    let cur = window[2].data();
    let prev1 = window[1].data();
    let next1 = window[3].data();
    let prev2 = window[0].data();
    let next2 = window[4].data();

    let n = h * w;
    let mut diff_sum = vec![0.0; n];
    let mut out = vec![0.0; n * D_RAW];
    for i in 0..n {
        let d1 = (cur[i] - prev1[i]).abs();
        let d2 = (cur[i] - next1[i]).abs();
        let d3 = (cur[i] - prev2[i]).abs();
        let d4 = (cur[i] - next2[i]).abs();
        diff_sum[i] = d1 + d2 + d3 + d4;
        let base = i * D_RAW;
        out[base] = cur[i];
        out[base + 1] = d1;
        out[base + 2] = d2;
        out[base + 3] = d3;
        out[base + 4] = d4;
    }
    // 3×3 window statistics with clamped borders.
    for y in 0..h {
        for x in 0..w {
            let mut mean_i = 0.0;
            let mut max_d = f64::NEG_INFINITY;
            let mut sum_d = 0.0;
            let mut sum_d2 = 0.0;
            for dy in -1..=1_isize {
                for dx in -1..=1_isize {
                    let px = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let py = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let iv = at(cur, w, px, py);
                    let dv = at(&diff_sum, w, px, py);
                    mean_i += iv;
                    max_d = max_d.max(dv);
                    sum_d += dv;
                    sum_d2 += dv * dv;
                }
            }
            let base = (y * w + x) * D_RAW;
            let mean_d = sum_d / 9.0;
            out[base + 5] = mean_i / 9.0;
            out[base + 6] = max_d;
            out[base + 7] = (sum_d2 / 9.0 - mean_d * mean_d).max(0.0);
        }
    }
    Ok(FeatureField {
        height: h,
        width: w,
        data: Tensor::from_raw(vec![h, w, D_RAW], out),
        frame_index,
    })
}

/// Assembles the 5-frame window centered at `t`, repeating edge frames.
pub fn frame_window(frames: &[Tensor], t: usize) -> Vec<&Tensor> {
    let last = frames.len() as isize - 1;
    (-2..=2_isize)
        .map(|off| &frames[(t as isize + off).clamp(0, last) as usize])
        .collect()
}

/// Bilinear sampling of the field at continuous coordinates, recorded on the
/// tape; coordinates are clamped to the image bounds.
pub fn grid_sample(tape: &mut Tape, field: Var, coords: Var) -> Result<Var> {
    tape.grid_sample(field, coords)
}

/// Mean-pools non-overlapping r_g×r_g windows and projects each pooled vector
/// with the shared feature adapter.
pub fn patch_embed(
    tape: &mut Tape,
    field_var: Var,
    field: &FeatureField,
    r_g: usize,
    proj_w: Var,
    proj_b: Var,
) -> Result<GlobalEmbedding> {
    let (h, w) = (field.height, field.width);
    if r_g == 0 || h % r_g != 0 || w % r_g != 0 {
        return Err(err_config!("patch stride {r_g} must divide H={h} and W={w}"));
    }
    let pooled = tape.avg_pool_regions(field_var, r_g)?;
    let projected = linear(tape, pooled, proj_w, proj_b)?;
    let (gh, gw) = (h / r_g, w / r_g);
    let mut centers = Vec::with_capacity(gh * gw * 2);
    for gy in 0..gh {
        for gx in 0..gw {
            centers.push((gx as f64 + 0.5) * r_g as f64 - 0.5);
            centers.push((gy as f64 + 0.5) * r_g as f64 - 0.5);
        }
    }
    Ok(GlobalEmbedding {
        features: projected,
        region_centers: Tensor::from_raw(vec![gh * gw, 2], centers),
        stride: r_g,
        grid_h: gh,
        grid_w: gw,
    })
}

/// Shared d_raw→d linear adapter applied to sampled point features and inside
/// patch embedding.
#[derive(Debug, Clone)]
pub struct FeatureProjection {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl FeatureProjection {
    pub fn new(prefix: &str, d: usize, seed: u64) -> Self {
        FeatureProjection {
            weight: Parameter::xavier(format!("{prefix}.weight"), D_RAW, d, seed),
            bias: Parameter::zeros(format!("{prefix}.bias"), vec![1, d], seed),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> (Var, Var) {
        (tape.leaf(self.weight.tensor()), tape.leaf(self.bias.tensor()))
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Samples the field at `coords` and projects to model dimension d.
pub fn sample_and_project(
    tape: &mut Tape,
    field_var: Var,
    coords: Var,
    proj_w: Var,
    proj_b: Var,
) -> Result<Var> {
    let sampled = tape.grid_sample(field_var, coords)?;
    linear(tape, sampled, proj_w, proj_b)
}

/// Region-grid index of a (clamped) coordinate, row-major over the grid.
pub fn region_index(x: f64, y: f64, width: usize, height: usize, r_g: usize) -> usize {
    let gw = width / r_g;
    let gh = height / r_g;
    let xi = (x.clamp(0.0, (width - 1) as f64) as usize / r_g).min(gw - 1);
    let yi = (y.clamp(0.0, (height - 1) as f64) as usize / r_g).min(gh - 1);
    yi * gw + xi
}

/// All-point region ids for scatter operations.
pub fn region_indices(coords: &[f64], width: usize, height: usize, r_g: usize) -> Rc<Vec<usize>> {
    Rc::new(
        coords
            .chunks_exact(2)
            .map(|c| region_index(c[0], c[1], width, height, r_g))
            .collect(),
    )
}

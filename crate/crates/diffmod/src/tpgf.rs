//! Temporal Propagation and Global Fusion: previous-frame point features are
//! scattered into global regions (empty regions take a learnable vector), a
//! GRU propagates an implicit per-region memory across frames, and the memory
//! conditions the current frame's global features through the dynamic
//! interaction transform.

use std::rc::Rc;

use crate::conditioning::{dim_transform, DimParams, DimVars};
use crate::error::{err_shape, Result};
use crate::numerics::init::Parameter;
use crate::numerics::nn::{linear, one_minus};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Region lattice of the global embedding: stride r_g over an H×W image.
#[derive(Debug, Clone, Copy)]
pub struct RegionGrid {
    pub stride: usize,
    pub width: usize,
    pub height: usize,
}

impl RegionGrid {
    pub fn regions(&self) -> usize {
        (self.height / self.stride) * (self.width / self.stride)
    }

    pub fn index(&self, x: f64, y: f64) -> usize {
        crate::features::region_index(x, y, self.width, self.height, self.stride)
    }
}

/// Recurrent per-region memory carried between frames. h⁰ = 0.
#[derive(Debug, Clone)]
pub struct TemporalState {
    pub hidden: Tensor,
    pub frame: usize,
}

impl TemporalState {
    pub fn cold(regions: usize, d: usize) -> Self {
        TemporalState {
            hidden: Tensor::zeros(vec![regions, d]),
            frame: 0,
        }
    }
}

/// TPGF parameters: empty-region vector f₀, GRU maps, and the DIM used for
/// fusion into current global features.
#[derive(Debug, Clone)]
pub struct TpgfParams {
    pub f0: Parameter,
    pub w_update: Parameter,
    pub b_update: Parameter,
    pub w_reset: Parameter,
    pub b_reset: Parameter,
    pub w_cand: Parameter,
    pub b_cand: Parameter,
    pub fuse: DimParams,
    pub d: usize,
}

pub struct TpgfVars {
    pub f0: Var,
    pub w_update: Var,
    pub b_update: Var,
    pub w_reset: Var,
    pub b_reset: Var,
    pub w_cand: Var,
    pub b_cand: Var,
    pub fuse: DimVars,
}

impl TpgfVars {
    pub fn from_cursor(cur: &mut crate::numerics::tape::VarCursor<'_>) -> Self {
        TpgfVars {
            f0: cur.next(),
            w_update: cur.next(),
            b_update: cur.next(),
            w_reset: cur.next(),
            b_reset: cur.next(),
            w_cand: cur.next(),
            b_cand: cur.next(),
            fuse: crate::conditioning::DimVars::from_cursor(cur),
        }
    }
}

impl TpgfParams {
    pub fn new(prefix: &str, d: usize, k_dim: usize, seed: u64) -> Self {
        let p = |n: &str| format!("{prefix}.{n}");
        TpgfParams {
            f0: Parameter::new(
                p("f0"),
                vec![1, d],
                crate::numerics::init::InitKind::XavierUniform { fan_in: d, fan_out: d },
                seed,
            ),
            w_update: Parameter::xavier(p("gru.w_update"), 2 * d, d, seed),
            b_update: Parameter::zeros(p("gru.b_update"), vec![1, d], seed),
            w_reset: Parameter::xavier(p("gru.w_reset"), 2 * d, d, seed),
            b_reset: Parameter::zeros(p("gru.b_reset"), vec![1, d], seed),
            w_cand: Parameter::xavier(p("gru.w_cand"), 2 * d, d, seed),
            b_cand: Parameter::zeros(p("gru.b_cand"), vec![1, d], seed),
            fuse: DimParams::new(&p("fuse"), d, d, k_dim, seed),
            d,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> TpgfVars {
        TpgfVars {
            f0: tape.leaf(self.f0.tensor()),
            w_update: tape.leaf(self.w_update.tensor()),
            b_update: tape.leaf(self.b_update.tensor()),
            w_reset: tape.leaf(self.w_reset.tensor()),
            b_reset: tape.leaf(self.b_reset.tensor()),
            w_cand: tape.leaf(self.w_cand.tensor()),
            b_cand: tape.leaf(self.b_cand.tensor()),
            fuse: self.fuse.bind(tape),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![
            &self.f0,
            &self.w_update,
            &self.b_update,
            &self.w_reset,
            &self.b_reset,
            &self.w_cand,
            &self.b_cand,
        ];
        out.extend(self.fuse.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![
            &mut self.f0,
            &mut self.w_update,
            &mut self.b_update,
            &mut self.w_reset,
            &mut self.b_reset,
            &mut self.w_cand,
            &mut self.b_cand,
        ];
        out.extend(self.fuse.params_mut());
        out
    }
}

/// Averages point features into their regions; empty regions take f₀.
/// Coordinates are plain values (clamped in-bounds before indexing).
pub fn scatter_to_regions(
    tape: &mut Tape,
    point_feats: Var,
    point_coords: &[f64],
    grid: &RegionGrid,
    f0: Var,
) -> Result<Var> {
    let l = tape.shape(point_feats)[0];
    if point_coords.len() != l * 2 {
        return Err(err_shape!(
            "scatter: {} coordinates for {l} feature rows",
            point_coords.len() / 2
        ));
    }
    let seg: Rc<Vec<usize>> = Rc::new(
        point_coords
            .chunks_exact(2)
            .map(|c| grid.index(c[0], c[1]))
            .collect(),
    );
    tape.segment_mean(point_feats, f0, seg, grid.regions())
}

/// Standard gated recurrent update applied independently per region token.
pub fn gru_step(
    tape: &mut Tape,
    region_feats: Var,
    h_prev: Var,
    vars: &TpgfVars,
) -> Result<Var> {
    let xh = tape.concat_cols(region_feats, h_prev)?;
    let z_lin = linear(tape, xh, vars.w_update, vars.b_update)?;
    let z = tape.sigmoid(z_lin);
    let r_lin = linear(tape, xh, vars.w_reset, vars.b_reset)?;
    let r = tape.sigmoid(r_lin);
    let rh = tape.mul(r, h_prev)?;
    let xrh = tape.concat_cols(region_feats, rh)?;
    let cand_lin = linear(tape, xrh, vars.w_cand, vars.b_cand)?;
    let cand = tape.tanh(cand_lin);
    let keep = one_minus(tape, z);
    let kept = tape.mul(keep, h_prev)?;
    let new = tape.mul(z, cand)?;
    tape.add(kept, new)
}

/// Adjusts current-frame global features with the propagated memory as the
/// per-region conditioning token.
pub fn fuse_global(
    tape: &mut Tape,
    global_feats: Var,
    hidden: Var,
    params: &TpgfParams,
    vars: &TpgfVars,
) -> Result<Var> {
    dim_transform(tape, global_feats, hidden, &params.fuse, &vars.fuse)
}

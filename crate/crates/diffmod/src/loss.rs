//! Training objective: focal classification, Smooth-L1 regression normalized
//! by the level radius, and the target missing penalty, combined with λ
//! weights per denoising level.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::tape::{sigmoid, Tape, Var};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub lambda_miss: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Sigmoid slope of the missing penalty.
    pub gamma2: f64,
    /// Numerical-stability floor inside the missing penalty's log.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 2.0,
            lambda_reg: 5.0,
            lambda_miss: 4.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            gamma2: 10.0,
            epsilon: 1e-4,
        }
    }
}

/// Per-level loss values for logging.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelLoss {
    pub cls: f64,
    pub reg: f64,
    pub miss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub levels: Vec<LevelLoss>,
    pub total: f64,
    pub n_gt: usize,
}

const PROB_CLAMP: f64 = 1e-12;

/// Focal loss over per-point object probabilities. Positives are the matched
/// rows; the sum is normalized by max(1, #positives).
pub fn focal_cls_loss(
    tape: &mut Tape,
    probs: Var,
    labels: &[bool],
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    let l = tape.shape(probs)[0];
    debug_assert_eq!(labels.len(), l);
    let n_pos = labels.iter().filter(|x| **x).count();
    let pos_mask = Tensor::from_raw(
        vec![l, 1],
        labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    );
    let neg_mask = Tensor::from_raw(
        vec![l, 1],
        labels.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect(),
    );
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let one_minus_p = crate::numerics::nn::one_minus(tape, p);
    let ln_p = tape.ln(p)?;
    let ln_q = tape.ln(one_minus_p)?;
    let w_pos = tape.powf(one_minus_p, gamma);
    let w_neg = tape.powf(p, gamma);
    let pos_mask_v = tape.constant(&pos_mask);
    let neg_mask_v = tape.constant(&neg_mask);
    let pos_ce = tape.mul(w_pos, ln_p)?;
    let pos_term = tape.mul(pos_ce, pos_mask_v)?;
    let neg_ce = tape.mul(w_neg, ln_q)?;
    let neg_term = tape.mul(neg_ce, neg_mask_v)?;
    let pos_scaled = tape.scale(pos_term, -alpha);
    let neg_scaled = tape.scale(neg_term, -(1.0 - alpha));
    let combined = tape.add(pos_scaled, neg_scaled)?;
    let sum = tape.sum_all(combined);
    Ok(tape.scale(sum, 1.0 / n_pos.max(1) as f64))
}

/// Smooth-L1 on (C_pred − matched target)/r_thre, averaged over matched rows
/// and summed over the two axes; zero when nothing is matched.
pub fn reg_loss(
    tape: &mut Tape,
    c_pred: Var,
    sample_targets: &[Option<usize>],
    c_gt: &[(f64, f64)],
    r_thre: f64,
) -> Result<Var> {
    let matched: Vec<(usize, usize)> = sample_targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|j| (i, j)))
        .collect();
    if matched.is_empty() {
        return Ok(tape.scalar_const(0.0));
    }
    let rows: Rc<Vec<usize>> = Rc::new(matched.iter().map(|&(i, _)| i).collect());
    let targets = Tensor::from_raw(
        vec![matched.len(), 2],
        matched
            .iter()
            .flat_map(|&(_, j)| [c_gt[j].0, c_gt[j].1])
            .collect(),
    );
    let pred = tape.gather_rows(c_pred, rows)?;
    let tv = tape.constant(&targets);
    let diff = tape.sub(pred, tv)?;
    let scaled = tape.scale(diff, 1.0 / r_thre);
    let sl = tape.smooth_l1(scaled);
    let sum = tape.sum_all(sl);
    Ok(tape.scale(sum, 1.0 / matched.len() as f64))
}

/// Closed-form missing penalty at a given distance ratio; also the plotted
/// curve.
pub fn missing_penalty(ratio: f64, gamma2: f64, epsilon: f64) -> f64 {
    -(sigmoid((1.5 - ratio) * gamma2) + epsilon).ln()
}

/// Missing loss over targets: the minimum point distance per target, pushed
/// through a saturating penalty. Distances are computed from the predicted
/// coordinates so gradients pull the nearest point toward missed targets.
///
/// When `restrict_to_assigned` is set, the minimum runs over the points
/// assigned to each target (falling back to all points for targets with no
/// assignment); otherwise it runs over all points.
pub fn missing_loss(
    tape: &mut Tape,
    c_points: Var,
    c_gt: &[(f64, f64)],
    r_thre: f64,
    weights: &LossWeights,
    restrict_to_assigned: Option<&[Option<usize>]>,
) -> Result<Var> {
    let nearest = nearest_point_per_target(tape, c_points, c_gt, restrict_to_assigned);
    missing_loss_frozen(tape, c_points, c_gt, &nearest, r_thre, weights)
}

/// The per-target argmin over point distances; exposed so finite-difference
/// verification can freeze the selection (it is piecewise constant).
pub fn nearest_point_per_target(
    tape: &Tape,
    c_points: Var,
    c_gt: &[(f64, f64)],
    restrict_to_assigned: Option<&[Option<usize>]>,
) -> Vec<usize> {
    let l = tape.shape(c_points)[0];
    let coords = tape.value(c_points);
    let mut nearest = Vec::with_capacity(c_gt.len());
    for (j, &(gx, gy)) in c_gt.iter().enumerate() {
        let candidates: Vec<usize> = match restrict_to_assigned {
            Some(assignment) => {
                let assigned: Vec<usize> =
                    (0..l).filter(|i| assignment[*i] == Some(j)).collect();
                if assigned.is_empty() {
                    (0..l).collect()
                } else {
                    assigned
                }
            }
            None => (0..l).collect(),
        };
        // ties break to the lowest index
        let mut best = candidates[0];
        let mut best_d = f64::INFINITY;
        for &i in &candidates {
            let dx = coords[i * 2] - gx;
            let dy = coords[i * 2 + 1] - gy;
            let d = (dx * dx + dy * dy).sqrt();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        nearest.push(best);
    }
    nearest
}

/// Missing loss with the per-target nearest-point selection supplied.
pub fn missing_loss_frozen(
    tape: &mut Tape,
    c_points: Var,
    c_gt: &[(f64, f64)],
    nearest: &[usize],
    r_thre: f64,
    weights: &LossWeights,
) -> Result<Var> {
    if c_gt.is_empty() {
        return Ok(tape.scalar_const(0.0));
    }
    let mut total: Option<Var> = None;
    for (j, &(gx, gy)) in c_gt.iter().enumerate() {
        let best = nearest[j];
        let row = tape.gather_rows(c_points, Rc::new(vec![best]))?;
        let target = Tensor::from_raw(vec![1, 2], vec![gx, gy]);
        let tv = tape.constant(&target);
        let diff = tape.sub(row, tv)?;
        let sq = tape.mul(diff, diff)?;
        let sumsq = tape.row_sum(sq)?;
        let guarded = tape.add_scalar(sumsq, 1e-12);
        let dist = tape.powf(guarded, 0.5);
        let arg = tape.scale(dist, -weights.gamma2 / r_thre);
        let shifted = tape.add_scalar(arg, 1.5 * weights.gamma2);
        let sig = tape.sigmoid(shifted);
        let floored = tape.add_scalar(sig, weights.epsilon);
        let ln = tape.ln(floored)?;
        let term = tape.scale(ln, -1.0);
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / c_gt.len() as f64))
}

/// λ-weighted combination of one level's terms.
pub fn combine_level(
    tape: &mut Tape,
    cls: Var,
    reg: Var,
    miss: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let c = tape.scale(cls, weights.lambda_cls);
    let r = tape.scale(reg, weights.lambda_reg);
    let m = tape.scale(miss, weights.lambda_miss);
    let cr = tape.add(c, r)?;
    tape.add(cr, m)
}

/// Sum of per-level weighted combinations.
pub fn total_loss(tape: &mut Tape, levels: &[(Var, Var, Var)], weights: &LossWeights) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(cls, reg, miss) in levels {
        let lvl = combine_level(tape, cls, reg, miss, weights)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, lvl)?,
            None => lvl,
        });
    }
    Ok(total.unwrap_or_else(|| tape.scalar_const(0.0)))
}

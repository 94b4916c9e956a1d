//! Evaluation: greedy center matching at a pixel threshold, Re/Pr/F1 per
//! sequence and averaged, plus temporal jitter of matched detections.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{err_config, Result};
use crate::model::{Detection, DiffModParams, SequenceRunner};
use crate::numerics::init::derive_seed_index;
use crate::scenegen::SceneSequence;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Center-distance matching threshold in px.
    pub d_eval: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { d_eval: 5.0, seed: 1 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// (detection index, ground-truth object id) pairs.
    pub pairs: Vec<(usize, usize)>,
}

/// Greedy one-to-one matching: detections in confidence order (ties to the
/// lower index) claim the nearest unmatched ground truth within `d_eval`.
pub fn match_detections(
    preds: &[Detection],
    gts: &[(f64, f64, usize)],
    d_eval: f64,
) -> MatchCounts {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut counts = MatchCounts::default();
    for &pi in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, &(gx, gy, _)) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let d = ((preds[pi].cx - gx).powi(2) + (preds[pi].cy - gy).powi(2)).sqrt();
            if d <= d_eval && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((gi, d));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                counts.tp += 1;
                counts.pairs.push((pi, gts[gi].2));
            }
            None => counts.fp += 1,
        }
    }
    counts.fn_ = taken.iter().filter(|t| !**t).count();
    counts
}

/// Precision convention: 0 when there are no detections.
pub fn precision_recall_f1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub sequence: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    /// Mean frame-to-frame displacement of detections matched to the same
    /// object in consecutive frames.
    pub jitter: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sequence: Vec<SequenceMetrics>,
    pub mean_recall: f64,
    pub mean_precision: f64,
    pub mean_f1: f64,
    pub mean_jitter: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,recall,precision,f1,jitter,tp,fp,fn\n");
        for m in &self.per_sequence {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{},{},{}\n",
                m.sequence, m.recall, m.precision, m.f1, m.jitter, m.tp, m.fp, m.fn_
            ));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6},{:.6},{:.6},,,\n",
            self.mean_recall, self.mean_precision, self.mean_f1, self.mean_jitter
        ));
        out
    }
}

/// Per-frame detections for one sequence under streaming inference.
pub fn infer_sequence(
    model: &DiffModParams,
    scene: &SceneSequence,
    seed: u64,
) -> Result<Vec<Vec<Detection>>> {
    let mut runner = SequenceRunner::new(model, scene.config.width, scene.config.height, seed)?;
    let mut out = Vec::with_capacity(scene.config.frames);
    for t in 0..scene.config.frames {
        out.push(runner.step(&scene.frames, t)?);
    }
    Ok(out)
}

fn evaluate_sequence(
    model: &DiffModParams,
    scene: &SceneSequence,
    sequence: usize,
    cfg: &EvalConfig,
) -> Result<SequenceMetrics> {
    let detections = infer_sequence(model, scene, derive_seed_index(cfg.seed, sequence as u64))?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut jitter_sum = 0.0;
    let mut jitter_n = 0usize;
    let mut prev_matched: Vec<(usize, f64, f64)> = Vec::new();
    for (t, dets) in detections.iter().enumerate() {
        let gts = scene.visible_centers(t);
        let counts = match_detections(dets, &gts, cfg.d_eval);
        tp += counts.tp;
        fp += counts.fp;
        fn_ += counts.fn_;
        let matched: Vec<(usize, f64, f64)> = counts
            .pairs
            .iter()
            .map(|&(pi, oid)| (oid, dets[pi].cx, dets[pi].cy))
            .collect();
        for &(oid, x, y) in &matched {
            if let Some(&(_, px, py)) = prev_matched.iter().find(|(poid, _, _)| *poid == oid) {
                jitter_sum += ((x - px).powi(2) + (y - py).powi(2)).sqrt();
                jitter_n += 1;
            }
        }
        prev_matched = matched;
    }
    let (precision, recall, f1) = precision_recall_f1(tp, fp, fn_);
    Ok(SequenceMetrics {
        sequence,
        recall,
        precision,
        f1,
        jitter: if jitter_n == 0 { 0.0 } else { jitter_sum / jitter_n as f64 },
        tp,
        fp,
        fn_,
    })
}

/// Streaming evaluation over a dataset split; sequences run in parallel and
/// aggregate in index order.
pub fn evaluate(
    model: &DiffModParams,
    scenes: &[SceneSequence],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(err_config!("evaluation needs at least one scene"));
    }
    let per_sequence: Vec<SequenceMetrics> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| evaluate_sequence(model, scene, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    let n = per_sequence.len() as f64;
    Ok(EvalReport {
        mean_recall: per_sequence.iter().map(|m| m.recall).sum::<f64>() / n,
        mean_precision: per_sequence.iter().map(|m| m.precision).sum::<f64>() / n,
        mean_f1: per_sequence.iter().map(|m| m.f1).sum::<f64>() / n,
        mean_jitter: per_sequence.iter().map(|m| m.jitter).sum::<f64>() / n,
        per_sequence,
    })
}

//! Progressive MinK optimal-transport assignment with exponential and linear
//! schedules, plus the SimOTA-style single-round baseline used in ablations.
//!
//! A round proposes the nearest available sample to every unmatched target in
//! parallel, resolves samples claimed by several targets in favor of the
//! closest one, then retires matched samples by setting their costs to
//! infinity so later rounds stay disjoint. A final radius step assigns every
//! still-unmatched sample within `r_thre` of a target to its nearest target.

use serde::{Deserialize, Serialize};

use crate::error::{err_config, err_shape, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Exponential,
    Linear,
}

/// Inputs of one assignment call: replication count k, current level n of N,
/// radius parameter r, and the schedule family.
#[derive(Debug, Clone)]
pub struct AssignConfig {
    pub k: usize,
    pub level: usize,
    pub levels: usize,
    pub r: f64,
    pub schedule: ScheduleKind,
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level < 1 || self.level > self.levels {
            return Err(err_config!("level {} outside 1..={}", self.level, self.levels));
        }
        if self.k < 1 {
            return Err(err_config!("replication count k must be at least 1"));
        }
        Ok(())
    }
}

/// Level-dependent (k_min, r_thre).
///
/// Exponential: k_min = max(1, ⌊k/2^(n−1)⌋), r_thre = r·2^(N−n+1).
/// Linear: with r′ = r·2^N/N, k_min = max(1, ⌊k(N−n+1)/N⌋), r_thre = r′(N−n+1).
pub fn schedule_params(cfg: &AssignConfig) -> (usize, f64) {
    let n = cfg.level;
    let big_n = cfg.levels;
    match cfg.schedule {
        ScheduleKind::Exponential => {
            let k_min = (cfg.k / (1 << (n - 1))).max(1);
            let r_thre = cfg.r * (1u64 << (big_n - n + 1)) as f64;
            (k_min, r_thre)
        }
        ScheduleKind::Linear => {
            let r_prime = cfg.r * (1u64 << big_n) as f64 / big_n as f64;
            let k_min = (cfg.k * (big_n - n + 1) / big_n).max(1);
            let r_thre = r_prime * (big_n - n + 1) as f64;
            (k_min, r_thre)
        }
    }
}

/// Binary point-to-target matching plus the Euclidean cost snapshot it was
/// computed from. Every row sums to at most 1.
#[derive(Debug, Clone)]
pub struct AssignmentMatrix {
    matches: Vec<bool>,
    cost: Vec<f64>,
    samples: usize,
    targets: usize,
    /// Set when sample supply could not complete every requested round.
    pub supply_warning: bool,
}

impl AssignmentMatrix {
    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn targets(&self) -> usize {
        self.targets
    }

    pub fn is_matched(&self, sample: usize, target: usize) -> bool {
        self.matches[sample * self.targets + target]
    }

    pub fn cost(&self, sample: usize, target: usize) -> f64 {
        self.cost[sample * self.targets + target]
    }

    /// The matched target of each sample, if any.
    pub fn sample_targets(&self) -> Vec<Option<usize>> {
        (0..self.samples)
            .map(|i| (0..self.targets).find(|j| self.is_matched(i, *j)))
            .collect()
    }

    pub fn matched_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.samples {
            for j in 0..self.targets {
                if self.is_matched(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn row_sum(&self, sample: usize) -> usize {
        (0..self.targets).filter(|j| self.is_matched(sample, *j)).count()
    }

    pub fn column_sum(&self, target: usize) -> usize {
        (0..self.samples).filter(|i| self.is_matched(*i, target)).count()
    }

    pub fn total_matched_cost(&self) -> f64 {
        self.matched_pairs().iter().map(|&(i, j)| self.cost(i, j)).sum()
    }
}

fn pairwise_cost(c_noise: &[f64], c_gt: &[(f64, f64)]) -> Vec<f64> {
    let l_p = c_noise.len() / 2;
    let mut cost = Vec::with_capacity(l_p * c_gt.len());
    for i in 0..l_p {
        let (x, y) = (c_noise[i * 2], c_noise[i * 2 + 1]);
        for &(gx, gy) in c_gt {
            cost.push(((x - gx).powi(2) + (y - gy).powi(2)).sqrt());
        }
    }
    cost
}

/// Resolves multi-matched rows: a sample matched to several targets keeps
/// only the minimum-cost one among them; ties go to the lowest target index.
pub fn resolve_conflicts(matches: &mut [bool], cost: &[f64], samples: usize, targets: usize) {
    for i in 0..samples {
        let row = &mut matches[i * targets..(i + 1) * targets];
        let matched: Vec<usize> = (0..targets).filter(|j| row[*j]).collect();
        if matched.len() <= 1 {
            continue;
        }
        let mut keep = matched[0];
        for &j in &matched[1..] {
            if cost[i * targets + j] < cost[i * targets + keep] {
                keep = j;
            }
        }
        for &j in &matched {
            row[j] = j == keep;
        }
    }
}

/// Runs `k_min` parallel-proposal rounds plus (when `r_thre` ≥ 0) the radius
/// mop-up step, returning the union.
fn assign_impl(
    c_noise: &[f64],
    c_gt: &[(f64, f64)],
    k_min: usize,
    r_thre: Option<f64>,
) -> Result<AssignmentMatrix> {
    if c_noise.len() % 2 != 0 {
        return Err(err_shape!("noise coordinates must be [L×2]"));
    }
    let l_p = c_noise.len() / 2;
    let l_gt = c_gt.len();
    let cost = pairwise_cost(c_noise, c_gt);
    let mut out = AssignmentMatrix {
        matches: vec![false; l_p * l_gt],
        cost: cost.clone(),
        samples: l_p,
        targets: l_gt,
        supply_warning: false,
    };
    if l_gt == 0 {
        return Ok(out);
    }

    let mut work = cost.clone();
    let mut retired = vec![false; l_p];
    for _round in 0..k_min {
        let available = retired.iter().filter(|r| !**r).count();
        if available < l_gt {
            // Cannot complete another full round; the paper's regime
            // (M ≫ k_min·m_gt) never reaches this.
            out.supply_warning = true;
            break;
        }
        let mut match_ki = vec![false; l_p * l_gt];
        let mut col_matched = vec![false; l_gt];
        // Each iteration permanently matches at least one target, so the
        // loop finishes within l_gt iterations.
        let mut guard = 0usize;
        while col_matched.iter().any(|m| !m) {
            guard += 1;
            if guard > l_gt + 1 {
                return Err(err_config!("assignment round failed to terminate"));
            }
            for j in 0..l_gt {
                if col_matched[j] {
                    continue;
                }
                let mut best: Option<(usize, f64)> = None;
                for i in 0..l_p {
                    let c = work[i * l_gt + j];
                    if c.is_finite() && best.map_or(true, |(_, bc)| c < bc) {
                        best = Some((i, c));
                    }
                }
                match best {
                    Some((i, _)) => match_ki[i * l_gt + j] = true,
                    None => {
                        out.supply_warning = true;
                        col_matched[j] = true; // give up on this target
                    }
                }
            }
            resolve_conflicts(&mut match_ki, &work, l_p, l_gt);
            for i in 0..l_p {
                if match_ki[i * l_gt..(i + 1) * l_gt].iter().any(|m| *m) {
                    retired[i] = true;
                    work[i * l_gt..(i + 1) * l_gt]
                        .iter_mut()
                        .for_each(|c| *c = f64::INFINITY);
                }
            }
            for j in 0..l_gt {
                if (0..l_p).any(|i| match_ki[i * l_gt + j]) {
                    col_matched[j] = true;
                }
            }
        }
        for (dst, src) in out.matches.iter_mut().zip(&match_ki) {
            *dst |= *src;
        }
    }

    if let Some(r_thre) = r_thre {
        // Radius mop-up: still-unmatched samples within r_thre go to their
        // nearest target.
        let mut match_d = vec![false; l_p * l_gt];
        for i in 0..l_p {
            for j in 0..l_gt {
                if work[i * l_gt + j] <= r_thre {
                    match_d[i * l_gt + j] = true;
                }
            }
        }
        resolve_conflicts(&mut match_d, &cost, l_p, l_gt);
        for (dst, src) in out.matches.iter_mut().zip(&match_d) {
            *dst |= *src;
        }
    }

    // The union cannot double-match a row by construction; this pass restores
    // the row-sum invariant regardless.
    resolve_conflicts(&mut out.matches, &cost, l_p, l_gt);
    Ok(out)
}

/// MinK OTA assignment (Algorithms 1–2) with level-scheduled (k_min, r_thre).
pub fn mink_ota(c_noise: &[f64], c_gt: &[(f64, f64)], cfg: &AssignConfig) -> Result<AssignmentMatrix> {
    cfg.validate()?;
    let (k_min, r_thre) = schedule_params(cfg);
    assign_impl(c_noise, c_gt, k_min, Some(r_thre))
}

/// Single-round baseline: nearest sample per target with conflict resolution,
/// plus the radius step.
pub fn simota_baseline(
    c_noise: &[f64],
    c_gt: &[(f64, f64)],
    r_thre: f64,
) -> Result<AssignmentMatrix> {
    assign_impl(c_noise, c_gt, 1, Some(r_thre))
}

/// Round phase only (no radius step); exposed for oracle comparisons.
pub fn assign_rounds(
    c_noise: &[f64],
    c_gt: &[(f64, f64)],
    k_min: usize,
) -> Result<AssignmentMatrix> {
    assign_impl(c_noise, c_gt, k_min, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(k: usize, n: usize, schedule: ScheduleKind) -> AssignConfig {
        AssignConfig {
            k,
            level: n,
            levels: 4,
            r: 4.0,
            schedule,
        }
    }

    #[test]
    fn schedule_param_tables() {
        let exp: Vec<(usize, f64)> = (1..=4)
            .map(|n| schedule_params(&cfg(10, n, ScheduleKind::Exponential)))
            .collect();
        assert_eq!(exp, vec![(10, 64.0), (5, 32.0), (2, 16.0), (1, 8.0)]);
        let lin: Vec<(usize, f64)> = (1..=4)
            .map(|n| schedule_params(&cfg(10, n, ScheduleKind::Linear)))
            .collect();
        assert_eq!(lin, vec![(10, 64.0), (7, 48.0), (5, 32.0), (2, 16.0)]);
    }

    #[test]
    fn exponential_radius_halves_per_level() {
        for n in 1..4 {
            let (_, r1) = schedule_params(&cfg(10, n, ScheduleKind::Exponential));
            let (_, r2) = schedule_params(&cfg(10, n + 1, ScheduleKind::Exponential));
            assert_eq!(r2, r1 / 2.0);
        }
    }

    #[test]
    fn resolve_conflicts_examples() {
        // no multi-matched rows → unchanged
        let cost = vec![1.0, 2.0, 3.0, 4.0];
        let mut m = vec![true, false, false, true];
        resolve_conflicts(&mut m, &cost, 2, 2);
        assert_eq!(m, vec![true, false, false, true]);

        // costs (3,2) → keeps target 1
        let cost = vec![3.0, 2.0];
        let mut m = vec![true, true];
        resolve_conflicts(&mut m, &cost, 1, 2);
        assert_eq!(m, vec![false, true]);

        // tie (2,2) → keeps lowest index
        let cost = vec![2.0, 2.0];
        let mut m = vec![true, true];
        resolve_conflicts(&mut m, &cost, 1, 2);
        assert_eq!(m, vec![true, false]);
    }

    #[test]
    fn hand_trace_radius_and_rounds() {
        // k=1, n=4, N=4, r=4 (exponential): k_min=1, r_thre=8
        let c_noise = [0.0, 0.0, 10.0, 0.0, 100.0, 0.0];
        let c_gt = [(1.0, 0.0), (99.0, 0.0)];
        let m = mink_ota(&c_noise, &c_gt, &cfg(1, 4, ScheduleKind::Exponential)).unwrap();
        assert_eq!(m.matched_pairs(), vec![(0, 0), (2, 1)]);
        assert_eq!(m.row_sum(1), 0, "middle sample (dist 9 and 89) stays unassigned");
    }

    #[test]
    fn hand_trace_conflict_tie() {
        let c_noise = [0.0, 0.0, 5.0, 0.0];
        let c_gt = [(-1.0, 0.0), (1.0, 0.0)];
        let m = mink_ota(&c_noise, &c_gt, &cfg(1, 4, ScheduleKind::Exponential)).unwrap();
        // tie (1,1) on sample 0 resolves to target 0; target 1 re-picks sample 1
        assert_eq!(m.matched_pairs(), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn empty_targets_give_zero_matrix() {
        let c_noise = [0.0, 0.0, 5.0, 5.0];
        let m = mink_ota(&c_noise, &[], &cfg(1, 1, ScheduleKind::Exponential)).unwrap();
        assert_eq!(m.matched_pairs(), vec![]);
        let s = simota_baseline(&c_noise, &[], 10.0).unwrap();
        assert_eq!(s.matched_pairs(), vec![]);
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        max_p: usize,
        max_gt: usize,
    ) -> (Vec<f64>, Vec<(f64, f64)>) {
        let l_p = rng.random_range(1..=max_p);
        let l_gt = rng.random_range(1..=max_gt);
        let c_noise: Vec<f64> = (0..l_p * 2).map(|_| rng.random_range(0.0..128.0)).collect();
        let c_gt: Vec<(f64, f64)> = (0..l_gt)
            .map(|_| (rng.random_range(0.0..128.0), rng.random_range(0.0..128.0)))
            .collect();
        (c_noise, c_gt)
    }

    #[test]
    fn row_sums_never_exceed_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..300 {
            let (c_noise, c_gt) = random_instance(&mut rng, 40, 8);
            let n = rng.random_range(1..=4);
            let kind = if trial % 2 == 0 { ScheduleKind::Exponential } else { ScheduleKind::Linear };
            let m = mink_ota(&c_noise, &c_gt, &cfg(10, n, kind)).unwrap();
            for i in 0..m.samples() {
                assert!(m.row_sum(i) <= 1);
            }
        }
    }

    #[test]
    fn supply_guarantee_when_samples_suffice() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..300 {
            let l_gt = rng.random_range(1..=5);
            let n = rng.random_range(1..=4_usize);
            let k_min_expected = schedule_params(&cfg(10, n, ScheduleKind::Exponential)).0;
            let l_p = k_min_expected * l_gt + rng.random_range(0..20);
            let c_noise: Vec<f64> = (0..l_p * 2).map(|_| rng.random_range(0.0..128.0)).collect();
            let c_gt: Vec<(f64, f64)> = (0..l_gt)
                .map(|_| (rng.random_range(0.0..128.0), rng.random_range(0.0..128.0)))
                .collect();
            let m = mink_ota(&c_noise, &c_gt, &cfg(10, n, ScheduleKind::Exponential)).unwrap();
            assert!(!m.supply_warning);
            for j in 0..l_gt {
                assert!(
                    m.column_sum(j) >= k_min_expected,
                    "target {j}: column sum {} < k_min {k_min_expected}",
                    m.column_sum(j)
                );
            }
        }
    }

    #[test]
    fn radius_step_pairs_are_within_threshold_and_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let (c_noise, c_gt) = random_instance(&mut rng, 60, 6);
            let n = rng.random_range(1..=4);
            let conf = cfg(3, n, ScheduleKind::Exponential);
            let (k_min, r_thre) = schedule_params(&conf);
            let rounds_only = assign_rounds(&c_noise, &c_gt, k_min).unwrap();
            let full = mink_ota(&c_noise, &c_gt, &conf).unwrap();
            for (i, j) in full.matched_pairs() {
                if rounds_only.is_matched(i, j) {
                    continue;
                }
                // radius-step pair: within r_thre, and j is i's nearest target
                let c = full.cost(i, j);
                assert!(c <= r_thre, "cost {c} vs r_thre {r_thre}");
                for jj in 0..full.targets() {
                    assert!(full.cost(i, jj) >= c || jj == j);
                }
            }
        }
    }

    #[test]
    fn simota_equals_mink_when_k_min_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let (c_noise, c_gt) = random_instance(&mut rng, 30, 6);
            // level 4 exponential with k=1 gives k_min=1, r_thre=8
            let m = mink_ota(&c_noise, &c_gt, &cfg(1, 4, ScheduleKind::Exponential)).unwrap();
            let s = simota_baseline(&c_noise, &c_gt, 8.0).unwrap();
            assert_eq!(m.matched_pairs(), s.matched_pairs());
        }
    }

    #[test]
    fn simota_assigns_every_target_at_least_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let l_gt = rng.random_range(1..=3);
            let l_p = 10;
            let c_noise: Vec<f64> = (0..l_p * 2).map(|_| rng.random_range(0.0..64.0)).collect();
            let c_gt: Vec<(f64, f64)> = (0..l_gt)
                .map(|_| (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)))
                .collect();
            let s = simota_baseline(&c_noise, &c_gt, 8.0).unwrap();
            for j in 0..l_gt {
                assert!(s.column_sum(j) >= 1);
            }
        }
    }

    /// Independent naive implementation of the round phase: each unmatched
    /// target proposes to its nearest available sample; a sample claimed by
    /// several proposers accepts the closest; accepted samples leave the pool.
    fn oracle_rounds(
        c_noise: &[f64],
        c_gt: &[(f64, f64)],
        k_min: usize,
    ) -> Vec<(usize, usize)> {
        let l_p = c_noise.len() / 2;
        let dist = |i: usize, j: usize| -> f64 {
            let (x, y) = (c_noise[i * 2], c_noise[i * 2 + 1]);
            ((x - c_gt[j].0).powi(2) + (y - c_gt[j].1).powi(2)).sqrt()
        };
        let mut available: Vec<bool> = vec![true; l_p];
        let mut pairs = Vec::new();
        for _ in 0..k_min {
            if available.iter().filter(|a| **a).count() < c_gt.len() {
                break;
            }
            let mut unmatched: Vec<usize> = (0..c_gt.len()).collect();
            while !unmatched.is_empty() {
                let mut proposals: Vec<(usize, usize)> = Vec::new(); // (sample, target)
                for &j in &unmatched {
                    let mut best: Option<usize> = None;
                    for i in 0..l_p {
                        if !available[i] {
                            continue;
                        }
                        if best.map_or(true, |b| dist(i, j) < dist(b, j)) {
                            best = Some(i);
                        }
                    }
                    if let Some(i) = best {
                        proposals.push((i, j));
                    }
                }
                if proposals.is_empty() {
                    break;
                }
                let mut accepted: Vec<(usize, usize)> = Vec::new();
                let samples: std::collections::BTreeSet<usize> =
                    proposals.iter().map(|p| p.0).collect();
                for s in samples {
                    let mut winner: Option<usize> = None;
                    for &(i, j) in &proposals {
                        if i != s {
                            continue;
                        }
                        if winner.map_or(true, |w| dist(s, j) < dist(s, w)) {
                            winner = Some(j);
                        }
                    }
                    let w = winner.unwrap();
                    accepted.push((s, w));
                    available[s] = false;
                }
                for &(_, j) in &accepted {
                    unmatched.retain(|u| *u != j);
                }
                pairs.extend(accepted);
            }
        }
        pairs.sort_unstable();
        pairs
    }

    #[test]
    fn round_phase_matches_independent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let (c_noise, c_gt) = random_instance(&mut rng, 6, 6);
            let ours = assign_rounds(&c_noise, &c_gt, 1).unwrap();
            let oracle = oracle_rounds(&c_noise, &c_gt, 1);
            let our_cost: f64 = ours.total_matched_cost();
            let oracle_cost: f64 = oracle.iter().map(|&(i, j)| ours.cost(i, j)).sum();
            assert!(
                (our_cost - oracle_cost).abs() < 1e-9,
                "ours {our_cost} vs oracle {oracle_cost}"
            );
        }
    }

    #[test]
    fn insufficient_supply_completes_full_rounds_only() {
        // 3 samples, 2 targets, k_min=2: one full round fits, the second
        // cannot (1 sample left for 2 targets).
        let c_noise = [0.0, 0.0, 10.0, 0.0, 20.0, 0.0];
        let c_gt = [(1.0, 0.0), (11.0, 0.0)];
        let m = assign_rounds(&c_noise, &c_gt, 2).unwrap();
        assert!(m.supply_warning);
        assert_eq!(m.matched_pairs().len(), 2);
    }
}

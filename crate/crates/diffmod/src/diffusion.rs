//! Noise schedule math, training-time point corruption, positive-sample
//! replication, and the denoising-level ↔ timestep mapping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{err_config, Result};

/// Diffusion constants over S timesteps. Arrays are indexed by s−1 for
/// s ∈ 1..=S.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// σ_s = sqrt(1 − ᾱ_s): the noise magnitude driving the corruption range.
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn sigma_at(&self, s: usize) -> f64 {
        self.sigma[s - 1]
    }

    pub fn alpha_bar_at(&self, s: usize) -> f64 {
        self.alpha_bar[s - 1]
    }

    pub fn validate(&self) -> Result<()> {
        for s in 0..self.steps {
            if !(self.beta[s] > 0.0 && self.beta[s] < 1.0) {
                return Err(err_config!("beta[{s}] = {} outside (0,1)", self.beta[s]));
            }
            if s > 0 && self.alpha_bar[s] >= self.alpha_bar[s - 1] {
                return Err(err_config!("alpha_bar not strictly decreasing at {s}"));
            }
            if s > 0 && self.sigma[s] <= self.sigma[s - 1] {
                return Err(err_config!("sigma not strictly increasing at {s}"));
            }
            if !(self.sigma[s] > 0.0 && self.sigma[s] < 1.0) {
                return Err(err_config!("sigma[{s}] = {} outside (0,1)", self.sigma[s]));
            }
        }
        Ok(())
    }
}

/// Cosine ᾱ schedule. β values are clipped to keep every factor in (0,1).
pub fn build_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(err_config!("schedule needs at least 2 steps"));
    }
    let f = |s: f64| {
        let t = (s / steps as f64 + 0.008) / 1.008;
        (t * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let f0 = f(0.0);
    let mut beta = Vec::with_capacity(steps);
    let mut alpha = Vec::with_capacity(steps);
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut sigma = Vec::with_capacity(steps);
    let mut prev_bar = 1.0;
    for s in 1..=steps {
        let bar_target = f(s as f64) / f0;
        let b = (1.0 - bar_target / prev_bar).clamp(1e-8, 0.999);
        let a = 1.0 - b;
        let bar = prev_bar * a;
        beta.push(b);
        alpha.push(a);
        alpha_bar.push(bar);
        sigma.push((1.0 - bar).sqrt());
        prev_bar = bar;
    }
    let schedule = NoiseSchedule {
        steps,
        beta,
        alpha,
        alpha_bar,
        sigma,
    };
    schedule.validate()?;
    if schedule.sigma[steps - 1] < 0.99 {
        return Err(err_config!(
            "terminal sigma {} below 0.99",
            schedule.sigma[steps - 1]
        ));
    }
    Ok(schedule)
}

/// Progressive denoising geometry: final acceptance radius r, level count N,
/// and the derived level-1 noise bound R = r·2^N and patch stride
/// r_g = r·2^(N−1).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseConfig {
    pub r: f64,
    pub levels: usize,
    /// Initial point count M.
    pub points: usize,
    /// Replication ratio ρ.
    pub replication_ratio: f64,
    /// Replication cap K_max.
    pub k_max: usize,
    /// Schedule steps S.
    pub steps: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            r: 4.0,
            levels: 4,
            points: 500,
            replication_ratio: 0.25,
            k_max: 10,
            steps: 1000,
        }
    }
}

impl DenoiseConfig {
    pub fn noise_bound(&self) -> f64 {
        self.r * (1 << self.levels) as f64
    }

    pub fn patch_stride(&self) -> usize {
        (self.r * (1 << (self.levels - 1)) as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.r <= 0.0 || self.levels == 0 || self.points == 0 {
            return Err(err_config!("r, levels and points must be positive"));
        }
        if self.replication_ratio <= 0.0 || self.k_max == 0 {
            return Err(err_config!("replication settings must be positive"));
        }
        if self.steps < 2 {
            return Err(err_config!("steps must be at least 2"));
        }
        if (self.r * (1 << (self.levels - 1)) as f64).fract() != 0.0 {
            return Err(err_config!("r·2^(N−1) must be an integer patch stride"));
        }
        Ok(())
    }
}

/// Replication count k = min(K_max, floor(ρ·M/m_gt)); zero targets replicate
/// nothing.
pub fn replication_count(points: usize, m_gt: usize, ratio: f64, k_max: usize) -> usize {
    if m_gt == 0 {
        return 0;
    }
    let k = (ratio * points as f64 / m_gt as f64).floor() as usize;
    k.min(k_max)
}

/// Where each corrupted point came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Background,
    ReplicaOf(usize),
}

#[derive(Debug, Clone)]
pub struct CorruptedPointSet {
    /// Row-major [M×2] (cx, cy) coordinates.
    pub coords: Vec<f64>,
    pub provenance: Vec<Provenance>,
    pub timestep: usize,
    /// Replicas per target actually used (may be reduced when k·m_gt > M).
    pub replicas_per_target: usize,
    pub supply_warning: bool,
}

/// Builds the training point set: each ground-truth center replicated k times
/// with per-axis uniform noise in ±σ_s·r·2^N, the rest uniform background.
pub fn corrupt_points(
    c_gt: &[(f64, f64)],
    cfg: &DenoiseConfig,
    schedule: &NoiseSchedule,
    s: usize,
    width: f64,
    height: f64,
    seed: u64,
) -> Result<CorruptedPointSet> {
    if s < 1 || s > schedule.steps {
        return Err(err_config!("timestep {s} outside schedule"));
    }
    let m = cfg.points;
    let m_gt = c_gt.len();
    let mut k = replication_count(m, m_gt, cfg.replication_ratio, cfg.k_max);
    let mut supply_warning = false;
    if m_gt > 0 && k * m_gt > m {
        k = m / m_gt;
        supply_warning = true;
    }
    let range = schedule.sigma_at(s) * cfg.noise_bound();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(m * 2);
    let mut provenance = Vec::with_capacity(m);
    for (i, &(cx, cy)) in c_gt.iter().enumerate() {
        for _ in 0..k {
            coords.push(cx + rng.random_range(-range..=range));
            coords.push(cy + rng.random_range(-range..=range));
            provenance.push(Provenance::ReplicaOf(i));
        }
    }
    while provenance.len() < m {
        coords.push(rng.random_range(0.0..width));
        coords.push(rng.random_range(0.0..height));
        provenance.push(Provenance::Background);
    }
    Ok(CorruptedPointSet {
        coords,
        provenance,
        timestep: s,
        replicas_per_target: k,
        supply_warning,
    })
}

/// Smallest timestep whose σ reaches the level's expected noise fraction
/// 2^(1−n); level 1 maps to S.
pub fn level_timestep(n: usize, levels: usize, schedule: &NoiseSchedule) -> usize {
    debug_assert!(n >= 1 && n <= levels);
    let target = (2.0_f64).powi(1 - n as i32);
    schedule
        .sigma
        .iter()
        .position(|&sig| sig >= target)
        .map(|idx| idx + 1)
        .unwrap_or(schedule.steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_monotonicity_and_recompute() {
        let sch = build_schedule(1000).unwrap();
        assert!(sch.alpha_bar_at(1) > sch.alpha_bar_at(1000));
        for s in 1..=1000 {
            let recomputed = (1.0 - sch.alpha_bar_at(s)).sqrt();
            assert_eq!(recomputed.to_bits(), sch.sigma_at(s).to_bits());
        }
        assert!(sch.sigma_at(1000) >= 0.99);
        assert!(build_schedule(1).is_err());
    }

    #[test]
    fn reparameterization_variance_monte_carlo() {
        // x_s = sqrt(ᾱ_s)x₀ + sqrt(1−ᾱ_s)ε has variance ᾱ_s·Var(x₀) + 1−ᾱ_s
        // for unit-variance ε; checked by simulation within 2%.
        use rand::Rng;
        let sch = build_schedule(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for s in [5, 50, 95] {
            let ab = sch.alpha_bar_at(s);
            let n = 200_000;
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            for _ in 0..n {
                // x0 ~ U(-sqrt(3), sqrt(3)) has unit variance, zero mean
                let x0 = rng.random_range(-(3.0_f64).sqrt()..(3.0_f64).sqrt());
                let u1: f64 = rng.random_range(f64::EPSILON..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                let eps = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                let xs = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps;
                sum += xs;
                sum2 += xs * xs;
            }
            let mean = sum / n as f64;
            let var = sum2 / n as f64 - mean * mean;
            let expected = ab * 1.0 + (1.0 - ab);
            assert!(
                (var - expected).abs() / expected < 0.02,
                "s={s}: var {var} vs {expected}"
            );
        }
    }

    #[test]
    fn replication_count_examples() {
        assert_eq!(replication_count(500, 50, 0.25, 10), 2);
        assert_eq!(replication_count(500, 12, 0.25, 10), 10);
        assert_eq!(replication_count(500, 1, 0.25, 10), 10);
        assert_eq!(replication_count(500, 0, 0.25, 10), 0);
    }

    fn cfg() -> DenoiseConfig {
        DenoiseConfig::default()
    }

    #[test]
    fn low_noise_replicas_stay_near_targets() {
        let sch = build_schedule(1000).unwrap();
        let targets = vec![(30.0, 40.0), (90.0, 70.0)];
        let set = corrupt_points(&targets, &cfg(), &sch, 1, 128.0, 128.0, 3).unwrap();
        let bound = sch.sigma_at(1) * cfg().noise_bound();
        assert!(bound < 1.0, "sigma_1 should be tiny, bound {bound}");
        for (i, p) in set.provenance.iter().enumerate() {
            if let Provenance::ReplicaOf(t) = p {
                let dx = (set.coords[i * 2] - targets[*t].0).abs();
                let dy = (set.coords[i * 2 + 1] - targets[*t].1).abs();
                assert!(dx <= bound && dy <= bound);
            }
        }
    }

    #[test]
    fn replica_offsets_respect_eq_bound_across_seeds() {
        let sch = build_schedule(1000).unwrap();
        let targets = vec![(64.0, 64.0); 5];
        for seed in 0..20 {
            for s in [1, 250, 1000] {
                let set = corrupt_points(&targets, &cfg(), &sch, s, 128.0, 128.0, seed).unwrap();
                let bound = sch.sigma_at(s) * cfg().noise_bound();
                for (i, p) in set.provenance.iter().enumerate() {
                    if let Provenance::ReplicaOf(t) = p {
                        let dx = (set.coords[i * 2] - targets[*t].0).abs();
                        let dy = (set.coords[i * 2 + 1] - targets[*t].1).abs();
                        assert!(dx <= bound + 1e-12 && dy <= bound + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn sigma_one_bound_is_64px_for_default_geometry() {
        // r=4, N=4: offsets within ±σ_s·64 per axis
        assert_eq!(cfg().noise_bound(), 64.0);
        assert_eq!(cfg().patch_stride(), 32);
    }

    #[test]
    fn empty_targets_give_all_background() {
        let sch = build_schedule(100).unwrap();
        let set = corrupt_points(&[], &cfg(), &sch, 50, 128.0, 128.0, 1).unwrap();
        assert_eq!(set.provenance.len(), 500);
        assert!(set.provenance.iter().all(|p| *p == Provenance::Background));
        assert!(set
            .coords
            .chunks_exact(2)
            .all(|c| (0.0..128.0).contains(&c[0]) && (0.0..128.0).contains(&c[1])));
    }

    #[test]
    fn corruption_is_pure_in_seed() {
        let sch = build_schedule(100).unwrap();
        let targets = vec![(10.0, 20.0), (100.0, 90.0)];
        let a = corrupt_points(&targets, &cfg(), &sch, 30, 128.0, 128.0, 9).unwrap();
        let b = corrupt_points(&targets, &cfg(), &sch, 30, 128.0, 128.0, 9).unwrap();
        assert_eq!(a.coords, b.coords);
        let c = corrupt_points(&targets, &cfg(), &sch, 30, 128.0, 128.0, 10).unwrap();
        assert_ne!(a.coords, c.coords);
    }

    #[test]
    fn replica_counts_partition_the_point_set() {
        let sch = build_schedule(100).unwrap();
        let targets: Vec<(f64, f64)> = (0..7).map(|i| (10.0 + i as f64 * 10.0, 64.0)).collect();
        let set = corrupt_points(&targets, &cfg(), &sch, 40, 128.0, 128.0, 2).unwrap();
        let k = set.replicas_per_target;
        assert_eq!(k, 10);
        let mut counts = vec![0usize; targets.len()];
        let mut background = 0;
        for p in &set.provenance {
            match p {
                Provenance::ReplicaOf(t) => counts[*t] += 1,
                Provenance::Background => background += 1,
            }
        }
        assert!(counts.iter().all(|&c| c == k));
        assert_eq!(background + k * targets.len(), 500);
    }

    #[test]
    fn oversubscribed_replicas_are_reduced() {
        let sch = build_schedule(100).unwrap();
        let mut small = cfg();
        small.points = 12;
        small.replication_ratio = 2.0;
        let targets = vec![(10.0, 10.0), (50.0, 50.0), (90.0, 90.0), (110.0, 110.0), (30.0, 80.0)];
        let set = corrupt_points(&targets, &small, &sch, 10, 128.0, 128.0, 1).unwrap();
        assert!(set.supply_warning);
        assert_eq!(set.replicas_per_target, 12 / 5);
        assert_eq!(set.provenance.len(), 12);
    }

    #[test]
    fn level_timesteps_form_a_decreasing_ladder() {
        let sch = build_schedule(1000).unwrap();
        let n_levels = 4;
        let ladder: Vec<usize> = (1..=n_levels).map(|n| level_timestep(n, n_levels, &sch)).collect();
        assert_eq!(ladder[0], 1000); // σ target 1.0 is past the end → S
        for w in ladder.windows(2) {
            assert!(w[1] < w[0], "ladder {ladder:?}");
        }
        // level N targets σ ≥ 0.125; the chosen step is the first at or above
        let s_n = ladder[n_levels - 1];
        assert!(sch.sigma_at(s_n) >= 0.125);
        if s_n > 1 {
            assert!(sch.sigma_at(s_n - 1) < 0.125);
        }
    }
}

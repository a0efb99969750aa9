//! Six-parameter bang-bang ansatz: each channel leaves its resting value
//! (0 for Δ1 and Δ2, 1 for Δ3) exactly once, on `[t_{2k-1}, t_{2k}]`.
//! Evaluated on exact segments, minimized from seeded multistarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{bangbang_protocol, NoiseStrength, Protocol};
use crate::propagator::protocol_cost;
use crate::simplex::{minimize_box, SimplexOptions};

pub const DEFAULT_MULTISTARTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BangBangParams {
    times: [f64; 6],
}

impl BangBangParams {
    /// Checks `0 ≤ t ≤ τ` and the per-channel ordering `t1 ≤ t2`, `t3 ≤ t4`,
    /// `t5 ≤ t6`.
    pub fn new(times: [f64; 6], tau: f64) -> Result<Self> {
        bangbang_protocol(&times, tau)?;
        Ok(BangBangParams { times })
    }

    /// All three pulses collapsed to zero width at `t = 0`.
    pub fn collapsed() -> Self {
        BangBangParams { times: [0.0; 6] }
    }

    pub fn times(&self) -> &[f64; 6] {
        &self.times
    }

    pub fn protocol(&self, tau: f64) -> Result<Protocol> {
        bangbang_protocol(&self.times, tau)
    }

    /// `(start, fraction)` per channel with `t_end = start + fraction·(τ − start)`.
    fn to_box(self, tau: f64) -> [f64; 6] {
        let mut x = [0.0; 6];
        for ch in 0..3 {
            let (a, b) = (self.times[2 * ch], self.times[2 * ch + 1]);
            x[2 * ch] = a;
            x[2 * ch + 1] = if tau - a > 0.0 {
                ((b - a) / (tau - a)).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        x
    }

    fn from_box(x: &[f64], tau: f64) -> Self {
        let mut times = [0.0; 6];
        for ch in 0..3 {
            let a = x[2 * ch].clamp(0.0, tau);
            let f = x[2 * ch + 1].clamp(0.0, 1.0);
            times[2 * ch] = a;
            times[2 * ch + 1] = (a + f * (tau - a)).min(tau);
        }
        BangBangParams { times }
    }
}

/// Trace-distance cost of the exact-segment protocol.
pub fn ansatz_cost(params: &BangBangParams, tau: f64, noise: NoiseStrength) -> Result<f64> {
    let p = bangbang_protocol(&params.times, tau)?;
    Ok(protocol_cost(&p, noise))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BangBangResult {
    pub params: BangBangParams,
    pub cost: f64,
    /// Index of the start that produced the optimum; extra starts come
    /// after the random ones.
    pub start_index: usize,
    /// Cost at every start, in start order.
    pub start_costs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BangBangOptions {
    pub multistarts: usize,
    pub seed: u64,
    /// Additional starting points, e.g. switch times read off an annealed
    /// protocol.
    pub extra_starts: Vec<BangBangParams>,
    pub simplex: SimplexOptions,
}

impl Default for BangBangOptions {
    fn default() -> Self {
        BangBangOptions {
            multistarts: DEFAULT_MULTISTARTS,
            seed: 0,
            extra_starts: Vec::new(),
            simplex: SimplexOptions {
                max_evals: 1500,
                f_tol: 1e-13,
                x_tol: 1e-9,
                initial_step: 0.15,
                polish_passes: 2,
            },
        }
    }
}

fn random_start(tau: f64, rng: &mut impl Rng) -> BangBangParams {
    let mut times = [0.0; 6];
    for ch in 0..3 {
        let a: f64 = rng.gen_range(0.0..=tau);
        let b: f64 = rng.gen_range(0.0..=tau);
        times[2 * ch] = a.min(b);
        times[2 * ch + 1] = a.max(b);
    }
    BangBangParams { times }
}

/// Bounded local minimization of [`ansatz_cost`] from `multistarts` seeded
/// random orderings plus the extra starts and the collapsed (stationary)
/// point. Starts run in parallel; ties break on the lower start index.
pub fn optimize_bangbang(
    tau: f64,
    noise: NoiseStrength,
    opts: &BangBangOptions,
) -> Result<BangBangResult> {
    if !(tau > 0.0) {
        return Err(Error::domain(format!("total time {tau} must be > 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts: Vec<BangBangParams> = (0..opts.multistarts)
        .map(|_| random_start(tau, &mut rng))
        .collect();
    for s in &opts.extra_starts {
        BangBangParams::new(s.times, tau)?;
        starts.push(*s);
    }
    starts.push(BangBangParams::collapsed());

    let lo = [0.0; 6];
    let hi = [tau, 1.0, tau, 1.0, tau, 1.0];
    let objective = |x: &[f64]| {
        protocol_cost(
            &bangbang_protocol(&BangBangParams::from_box(x, tau).times, tau)
                .expect("box keeps ordering"),
            noise,
        )
    };

    let runs: Vec<(BangBangParams, f64, f64)> = starts
        .par_iter()
        .map(|s| {
            let x0 = s.to_box(tau);
            let f0 = objective(&x0);
            let m = minimize_box(objective, &x0, &lo, &hi, &opts.simplex);
            (BangBangParams::from_box(&m.x, tau), m.value, f0)
        })
        .collect();

    let (start_index, best) = runs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(a.0.cmp(&b.0)))
        .expect("at least the collapsed start");
    Ok(BangBangResult {
        params: best.0,
        cost: best.1,
        start_index,
        start_costs: runs.iter().map(|r| r.2).collect(),
    })
}

/// Switch-time estimate of an annealed protocol: per channel, the first and
/// last cell where it sits on the non-resting side of ½.
pub fn switch_times_estimate(protocol: &Protocol) -> BangBangParams {
    let tau = protocol.total_time();
    let bounds = protocol.boundaries();
    let mut times = [0.0; 6];
    for ch in 0..3 {
        let active = |v: f64| if ch == 2 { v < 0.5 } else { v > 0.5 };
        let cells: Vec<usize> = protocol
            .controls()
            .enumerate()
            .filter(|(_, c)| active(c.get(ch)))
            .map(|(k, _)| k)
            .collect();
        if let (Some(&first), Some(&last)) = (cells.first(), cells.last()) {
            times[2 * ch] = bounds[first];
            times[2 * ch + 1] = bounds[last + 1].min(tau);
        }
    }
    BangBangParams { times }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn collapsed_pulses_give_the_plateau() {
        for w in [0.0, 0.25] {
            let noise = NoiseStrength::new(w).unwrap();
            let c = ansatz_cost(&BangBangParams::collapsed(), 2.0, noise).unwrap();
            assert!((c - FRAC_1_SQRT_2).abs() < 1e-14);
            let p = BangBangParams::new([0.7, 0.7, 1.1, 1.1, 1.9, 1.9], 2.0).unwrap();
            assert!((ansatz_cost(&p, 2.0, noise).unwrap() - FRAC_1_SQRT_2).abs() < 1e-14);
        }
    }

    #[test]
    fn moving_a_collapsed_pair_changes_nothing() {
        let noise = NoiseStrength::new(0.1).unwrap();
        let a = BangBangParams::new([0.2, 0.9, 0.5, 0.5, 0.4, 1.3], 2.0).unwrap();
        let b = BangBangParams::new([0.2, 0.9, 1.7, 1.7, 0.4, 1.3], 2.0).unwrap();
        let ca = ansatz_cost(&a, 2.0, noise).unwrap();
        let cb = ansatz_cost(&b, 2.0, noise).unwrap();
        assert!((ca - cb).abs() < 1e-14);
    }

    #[test]
    fn ordering_violation_is_rejected() {
        assert!(BangBangParams::new([0.5, 0.4, 0.0, 0.0, 0.0, 0.0], 1.0).is_err());
        assert!(BangBangParams::new([0.0, 1.5, 0.0, 0.0, 0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn box_map_roundtrips() {
        let p = BangBangParams::new([0.2, 0.9, 0.5, 0.5, 0.0, 2.0], 2.0).unwrap();
        let back = BangBangParams::from_box(&p.to_box(2.0), 2.0);
        for (a, b) in p.times.iter().zip(back.times.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cost_is_continuous_in_switch_times() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = NoiseStrength::new(0.25).unwrap();
        let tau = 2.5;
        for _ in 0..20 {
            let p = random_start(tau, &mut rng);
            let base = ansatz_cost(&p, tau, noise).unwrap();
            for k in 0..6 {
                let mut q = p.times;
                let h = 1e-7;
                q[k] = if k % 2 == 0 {
                    (q[k] - h).max(0.0)
                } else {
                    (q[k] + h).min(tau)
                };
                let c = ansatz_cost(&BangBangParams { times: q }, tau, noise).unwrap();
                assert!(c.is_finite());
                // Generator norm bounds the slope.
                assert!((c - base).abs() <= 10.0 * h);
            }
        }
    }

    #[test]
    fn optimum_never_exceeds_any_start() {
        let opts = BangBangOptions {
            multistarts: 4,
            seed: 1,
            ..Default::default()
        };
        let r = optimize_bangbang(2.0, NoiseStrength::NONE, &opts).unwrap();
        assert!(r.start_costs.iter().all(|&c| r.cost <= c));
        let t = r.params.times();
        assert!(t[0] <= t[1] && t[2] <= t[3] && t[4] <= t[5]);
        let again = ansatz_cost(&r.params, 2.0, NoiseStrength::NONE).unwrap();
        assert!((again - r.cost).abs() < 1e-12);
    }
}

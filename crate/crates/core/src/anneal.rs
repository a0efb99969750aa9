//! Simulated-annealing Monte Carlo over piecewise-constant protocols on a
//! uniform grid.
//!
//! A move picks one cell uniformly, shifts all three controls by
//! independent draws from `U[−s, s]`, rejects the proposal outright if any
//! value leaves `[0, 1]`, and otherwise applies the Metropolis rule at the
//! current inverse temperature. `β` grows geometrically per sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::model::{
    grid_len, random_protocol_with, ControlVector, NoiseStrength, Protocol, DEFAULT_DT,
};
use crate::propagator::{protocol_cost, PropagationCache};

/// Acceptance below this fraction in a sweep halves the move scale.
pub const LOW_ACCEPTANCE: f64 = 0.05;

/// The move scale is never halved below this.
pub const MIN_MOVE_SCALE: f64 = 1e-4;

/// Restart spread above this marks a grid point as poorly converged.
pub const SPREAD_FLAG: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealConfig {
    pub dt: f64,
    pub sweeps: usize,
    /// Proposals per sweep; `None` means three per cell.
    pub moves_per_sweep: Option<usize>,
    pub beta0: f64,
    pub beta_growth: f64,
    pub move_scale: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            dt: DEFAULT_DT,
            sweeps: 2000,
            moves_per_sweep: None,
            beta0: 10.0,
            beta_growth: 1.02,
            move_scale: 0.1,
            seed: 0,
            restarts: 4,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::domain(format!("anneal config: {what}")));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be > 0");
        }
        if self.sweeps == 0 {
            return bad("sweeps must be > 0");
        }
        if self.moves_per_sweep == Some(0) {
            return bad("moves_per_sweep must be > 0");
        }
        if !(self.beta0 > 0.0 && self.beta0.is_finite()) {
            return bad("beta0 must be > 0");
        }
        if !(self.beta_growth > 1.0 && self.beta_growth.is_finite()) {
            return bad("beta_growth must be > 1");
        }
        if !(self.move_scale > 0.0 && self.move_scale <= 1.0) {
            return bad("move_scale must lie in (0, 1]");
        }
        if self.restarts == 0 {
            return bad("restarts must be > 0");
        }
        Ok(())
    }

    /// `β0 · growth^sweep`.
    pub fn beta(&self, sweep: usize) -> f64 {
        self.beta0 * self.beta_growth.powi(sweep as i32)
    }

    /// Seed of restart `r`; restart 0 uses the configured seed itself.
    pub fn restart_seed(&self, r: usize) -> u64 {
        self.seed
            .wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

/// Per-sweep diagnostics of one chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepStats {
    pub sweep: usize,
    pub beta: f64,
    pub cost: f64,
    pub best_cost: f64,
    /// Accepted over in-bounds proposals.
    pub acceptance: f64,
    pub move_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainResult {
    pub seed: u64,
    pub best_protocol: Protocol,
    pub best_cost: f64,
    pub trace: Vec<SweepStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnealResult {
    pub best_protocol: Protocol,
    /// Re-evaluated by full propagation of `best_protocol`.
    pub best_cost: f64,
    /// Best cost of every chain, in restart order.
    pub chain_costs: Vec<f64>,
    /// Trace of the winning chain.
    pub trace: Vec<SweepStats>,
}

impl AnnealResult {
    /// Columns `sweep, beta, cost, best_cost, acceptance, move_scale`.
    pub fn write_trace_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "sweep",
            "beta",
            "cost",
            "best_cost",
            "acceptance",
            "move_scale",
        ])
        .map_err(crate::propagator::csv_err)?;
        for s in &self.trace {
            w.write_record([
                s.sweep.to_string(),
                fmt_f64(s.beta),
                fmt_f64(s.cost),
                fmt_f64(s.best_cost),
                fmt_f64(s.acceptance),
                fmt_f64(s.move_scale),
            ])
            .map_err(crate::propagator::csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `(sweep, cost)` pairs of the winning chain.
    pub fn cost_trace(&self) -> Vec<(usize, f64)> {
        self.trace.iter().map(|s| (s.sweep, s.cost)).collect()
    }

    pub fn acceptance_rate_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|s| s.acceptance).collect()
    }

    /// Largest minus smallest chain cost.
    pub fn spread(&self) -> f64 {
        let max = self
            .chain_costs
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let min = self
            .chain_costs
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        max - min
    }
}

/// What the Metropolis loop needs from a cost function over cells.
pub trait CellObjective {
    fn cells(&self) -> usize;
    fn control(&self, cell: usize) -> ControlVector;
    fn current_cost(&self) -> f64;
    /// Cost with one cell changed; the next call is either another
    /// `propose` or `accept` of this proposal.
    fn propose(&mut self, cell: usize, control: ControlVector) -> f64;
    fn accept(&mut self);
}

/// [`CellObjective`] backed by a [`PropagationCache`].
pub struct CachedCost {
    cache: PropagationCache,
    pending: Option<crate::propagator::Trial>,
}

impl CachedCost {
    pub fn new(protocol: Protocol, noise: NoiseStrength) -> Self {
        CachedCost {
            cache: PropagationCache::new(protocol, noise),
            pending: None,
        }
    }

    pub fn protocol(&self) -> &Protocol {
        self.cache.protocol()
    }

    pub fn into_protocol(mut self) -> Protocol {
        self.cache.refresh_fingerprint();
        self.cache.into_protocol()
    }
}

impl CellObjective for CachedCost {
    fn cells(&self) -> usize {
        self.cache.protocol().len()
    }

    fn control(&self, cell: usize) -> ControlVector {
        self.cache.protocol().segments()[cell].control
    }

    fn current_cost(&self) -> f64 {
        self.cache.cost()
    }

    fn propose(&mut self, cell: usize, control: ControlVector) -> f64 {
        let t = self.cache.trial(cell, control);
        self.pending = Some(t);
        t.cost
    }

    fn accept(&mut self) {
        if let Some(t) = self.pending.take() {
            self.cache.commit_fast(t);
        }
    }
}

/// Metropolis acceptance: always for `ΔC ≤ 0`, else with `e^{−βΔC}`.
pub fn metropolis_accepts(delta: f64, beta: f64, u: f64) -> bool {
    delta <= 0.0 || u < (-beta * delta).exp()
}

/// Runs one annealing chain on `objective`, calling `on_best` with every
/// new best-ever cost (the objective holds the corresponding protocol).
pub fn run_chain<O: CellObjective>(
    objective: &mut O,
    cfg: &AnnealConfig,
    rng: &mut impl Rng,
    mut on_best: impl FnMut(&O, f64),
) -> Vec<SweepStats> {
    let n = objective.cells();
    let moves = cfg.moves_per_sweep.unwrap_or(3 * n);
    let mut scale = cfg.move_scale;
    let mut cost = objective.current_cost();
    let mut best = cost;
    on_best(objective, best);
    let mut trace = Vec::with_capacity(cfg.sweeps);
    for sweep in 0..cfg.sweeps {
        let beta = cfg.beta(sweep);
        let mut in_bounds = 0usize;
        let mut accepted = 0usize;
        for _ in 0..moves {
            let cell = rng.gen_range(0..n);
            let old = objective.control(cell).as_array();
            let mut new = [0.0; 3];
            for j in 0..3 {
                new[j] = old[j] + rng.gen_range(-scale..=scale);
            }
            if new.iter().any(|v| !(0.0..=1.0).contains(v)) {
                continue;
            }
            in_bounds += 1;
            let candidate = ControlVector::new(new).expect("checked bounds");
            let trial_cost = objective.propose(cell, candidate);
            let u: f64 = rng.gen();
            if metropolis_accepts(trial_cost - cost, beta, u) {
                objective.accept();
                accepted += 1;
                cost = trial_cost;
                if cost < best {
                    best = cost;
                    on_best(objective, best);
                }
            }
        }
        let acceptance = if in_bounds == 0 {
            0.0
        } else {
            accepted as f64 / in_bounds as f64
        };
        trace.push(SweepStats {
            sweep,
            beta,
            cost,
            best_cost: best,
            acceptance,
            move_scale: scale,
        });
        if acceptance < LOW_ACCEPTANCE {
            scale = (scale * 0.5).max(MIN_MOVE_SCALE);
        }
    }
    trace
}

/// One chain from an explicit starting protocol.
pub fn anneal_chain(
    initial: Protocol,
    noise: NoiseStrength,
    cfg: &AnnealConfig,
    seed: u64,
) -> ChainResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objective = CachedCost::new(initial, noise);
    let mut best_protocol = objective.protocol().clone();
    let trace = run_chain(&mut objective, cfg, &mut rng, |o, _| {
        best_protocol = o.protocol().clone();
    });
    let best_cost = protocol_cost(&best_protocol, noise);
    ChainResult {
        seed,
        best_protocol,
        best_cost,
        trace,
    }
}

fn merge(chains: Vec<ChainResult>) -> AnnealResult {
    let chain_costs = chains.iter().map(|c| c.best_cost).collect();
    let best = chains
        .into_iter()
        .enumerate()
        .min_by(|a, b| a.1.best_cost.total_cmp(&b.1.best_cost).then(a.0.cmp(&b.0)))
        .expect("at least one chain")
        .1;
    AnnealResult {
        best_cost: best.best_cost,
        best_protocol: best.best_protocol,
        chain_costs,
        trace: best.trace,
    }
}

/// `cfg.restarts` independent chains on the `cfg.dt` grid; returns the
/// best. Chain 0 starts from the stationary protocol, which already sits on
/// the short-time plateau, the others from uniformly random protocols.
pub fn anneal(tau: f64, noise: NoiseStrength, cfg: &AnnealConfig) -> Result<AnnealResult> {
    cfg.validate()?;
    if !(tau > 0.0) {
        return Err(Error::domain(format!("total time {tau} must be > 0")));
    }
    let chains = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.restart_seed(r);
            let initial = if r == 0 {
                Protocol::stationary(tau, cfg.dt)?
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_A5A5);
                random_protocol_with(tau, cfg.dt, &mut rng)?
            };
            Ok(anneal_chain(initial, noise, cfg, seed))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut result = merge(chains);
    result
        .best_protocol
        .metadata
        .insert("method".into(), "anneal".into());
    Ok(result)
}

/// Like [`anneal`] with one more chain started from `warm` (which must
/// have total time `tau`).
pub fn anneal_warm(
    tau: f64,
    noise: NoiseStrength,
    cfg: &AnnealConfig,
    warm: &Protocol,
) -> Result<AnnealResult> {
    if (warm.total_time() - tau).abs() > 1e-9 * tau {
        return Err(Error::domain(format!(
            "warm start has total time {}, expected {tau}",
            warm.total_time()
        )));
    }
    let cold = anneal(tau, noise, cfg)?;
    let start = if warm.is_uniform() && warm.len() == grid_len(tau, cfg.dt) {
        warm.clone()
    } else {
        warm.resample(cfg.dt)?
    };
    let warm_chain = anneal_chain(start, noise, cfg, cfg.restart_seed(cfg.restarts));
    let mut costs = cold.chain_costs.clone();
    costs.push(warm_chain.best_cost);
    let mut result = if warm_chain.best_cost < cold.best_cost {
        AnnealResult {
            best_protocol: warm_chain.best_protocol,
            best_cost: warm_chain.best_cost,
            chain_costs: Vec::new(),
            trace: warm_chain.trace,
        }
    } else {
        cold
    };
    result.chain_costs = costs;
    result
        .best_protocol
        .metadata
        .insert("method".into(), "anneal".into());
    Ok(result)
}

/// One annealed grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub tau: f64,
    pub w: f64,
    pub result: AnnealResult,
    /// Restart spread exceeded [`SPREAD_FLAG`]; a candidate for the
    /// bang-bang optimizer.
    pub poorly_converged: bool,
}

/// Anneals every `(τ, W)` pair. With `warm_start`, each τ (ascending per W)
/// also runs a chain from the previous τ's best protocol padded in front
/// with the stationary control, which leaves the cost unchanged.
pub fn anneal_grid(
    taus: &[f64],
    ws: &[f64],
    cfg: &AnnealConfig,
    warm_start: bool,
) -> Result<Vec<GridPoint>> {
    if taus.is_empty() || ws.is_empty() {
        return Err(Error::domain("anneal grid needs at least one τ and one W"));
    }
    let mut sorted_taus = taus.to_vec();
    sorted_taus.sort_by(f64::total_cmp);
    let per_w = ws
        .par_iter()
        .map(|&w| -> Result<Vec<GridPoint>> {
            let noise = NoiseStrength::new(w)?;
            let mut out: Vec<GridPoint> = Vec::with_capacity(sorted_taus.len());
            for &tau in &sorted_taus {
                let result = match out.last() {
                    Some(prev) if warm_start && prev.tau < tau => {
                        let warm = prev
                            .result
                            .best_protocol
                            .with_stationary_prefix(tau - prev.tau)?;
                        anneal_warm(tau, noise, cfg, &warm)?
                    }
                    _ => anneal(tau, noise, cfg)?,
                };
                out.push(GridPoint {
                    tau,
                    w,
                    poorly_converged: result.spread() > SPREAD_FLAG,
                    result,
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_w.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    struct Flat {
        controls: Vec<ControlVector>,
        pending: Option<(usize, ControlVector)>,
    }

    impl CellObjective for Flat {
        fn cells(&self) -> usize {
            self.controls.len()
        }
        fn control(&self, cell: usize) -> ControlVector {
            self.controls[cell]
        }
        fn current_cost(&self) -> f64 {
            1.0
        }
        fn propose(&mut self, cell: usize, control: ControlVector) -> f64 {
            self.pending = Some((cell, control));
            1.0
        }
        fn accept(&mut self) {
            let (cell, control) = self.pending.take().unwrap();
            self.controls[cell] = control;
        }
    }

    fn small_config() -> AnnealConfig {
        AnnealConfig {
            sweeps: 60,
            restarts: 2,
            beta0: 50.0,
            beta_growth: 1.1,
            ..Default::default()
        }
    }

    #[test]
    fn flat_cost_accepts_every_in_bounds_move_and_stays_in_bounds() {
        let mut obj = Flat {
            controls: vec![ControlVector::new([0.5, 0.5, 0.5]).unwrap(); 10],
            pending: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AnnealConfig {
            sweeps: 20,
            move_scale: 0.3,
            ..Default::default()
        };
        let trace = run_chain(&mut obj, &cfg, &mut rng, |_, _| {});
        assert!(trace.iter().all(|s| s.acceptance == 1.0));
        assert!(obj
            .controls
            .iter()
            .all(|c| c.as_array().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn metropolis_rule() {
        assert!(metropolis_accepts(-1.0, 1e9, 0.999));
        assert!(metropolis_accepts(0.0, 1e9, 0.999));
        assert!(!metropolis_accepts(0.1, 10.0, 0.5));
        assert!(metropolis_accepts(0.01, 10.0, 0.5));
    }

    #[test]
    fn config_validation() {
        assert!(AnnealConfig::default().validate().is_ok());
        let bad = AnnealConfig {
            beta_growth: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AnnealConfig {
            move_scale: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn best_cost_is_consistent_and_running_best_monotone() {
        let noise = NoiseStrength::new(0.1).unwrap();
        let r = anneal(0.6, noise, &small_config()).unwrap();
        assert!((protocol_cost(&r.best_protocol, noise) - r.best_cost).abs() < 1e-12);
        for w in r.trace.windows(2) {
            assert!(w[1].best_cost <= w[0].best_cost);
        }
        assert!(r.best_cost <= r.trace.last().unwrap().best_cost + 1e-10);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let a = anneal(0.4, NoiseStrength::NONE, &small_config()).unwrap();
        let b = anneal(0.4, NoiseStrength::NONE, &small_config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_time_stays_on_the_plateau() {
        let r = anneal(0.5, NoiseStrength::NONE, &small_config()).unwrap();
        assert!(
            (r.best_cost - FRAC_1_SQRT_2).abs() < 1e-3,
            "{}",
            r.best_cost
        );
        assert!(r.best_cost >= FRAC_1_SQRT_2 - 1e-9);
    }

    #[test]
    fn warm_start_never_loses_to_cold() {
        let cfg = small_config();
        let noise = NoiseStrength::new(0.25).unwrap();
        let grid = anneal_grid(&[0.4, 0.5], &[0.25], &cfg, true).unwrap();
        let cold = anneal(0.5, noise, &cfg).unwrap();
        assert!(grid[1].result.best_cost <= cold.best_cost + 1e-6);
        assert_eq!(grid.len(), 2);
    }
}

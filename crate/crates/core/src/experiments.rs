//! End-to-end experiments: the per-point optimization pipeline, τ sweeps
//! and their regime analysis, the linear-ramp baseline, random-protocol
//! histograms and polynomial extrapolation in 1/τ.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anneal::{anneal, anneal_warm, AnnealConfig};
use crate::bangbang::{optimize_bangbang, BangBangOptions};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::model::{
    linear_adiabatic_protocol, random_protocol_with, NoiseStrength, Protocol, DEFAULT_DT,
};
use crate::pontryagin::{polish_continuous, polish_switch_times, refine, RefineOptions};
use crate::propagator::{csv_err, protocol_cost};

/// Cost of every protocol that leaves `ρ0` untouched, `C(τ = 0) = 1/√2`.
pub const PLATEAU: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Default plateau threshold for the critical-time estimate.
pub const DEFAULT_PLATEAU_DELTA: f64 = 1e-3;

/// Regime II ends where the descent slope drops below this fraction of
/// its median so far.
pub const SLOPE_RATIO: f64 = 0.1;

/// Quasi-Newton restarts spent on the winner's continuous arcs.
const CONTINUOUS_ROUNDS: usize = 8;

/// Mixes a seed with a point label so that every (τ, W) gets its own
/// stream independent of evaluation order.
pub fn point_seed(seed: u64, tau: f64, w: f64) -> u64 {
    let mut z = seed ^ tau.to_bits().rotate_left(17) ^ w.to_bits().rotate_left(41);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Anneal,
    Bangbang,
    Refined,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Anneal => "anneal",
            Method::Bangbang => "bangbang",
            Method::Refined => "refined",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "anneal" => Ok(Method::Anneal),
            "bangbang" => Ok(Method::Bangbang),
            "refined" => Ok(Method::Refined),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

/// Which optimizers feed a point and how hard each works.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Grid step for annealing and refinement.
    pub dt: f64,
    pub seed: u64,
    pub use_anneal: bool,
    pub use_bangbang: bool,
    pub multistarts: usize,
    /// Uniformly random grid protocols refined as additional starts.
    pub random_starts: usize,
    pub refine_iters: usize,
    pub lambda: f64,
    /// At `W = 0`, re-optimize the switch times of refined protocols on
    /// exact segments.
    pub polish: bool,
    /// At `W > 0`, converge the winner's continuous arcs by quasi-Newton
    /// descent. Changes the cost only at the 1e-9 level but brings
    /// `Δ_j` onto `Δ^d_j`; slow on long grids.
    pub polish_arcs: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dt: DEFAULT_DT,
            seed: 0,
            use_anneal: true,
            use_bangbang: true,
            multistarts: crate::bangbang::DEFAULT_MULTISTARTS,
            random_starts: 8,
            refine_iters: 500,
            lambda: 0.5,
            polish: true,
            polish_arcs: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::domain(format!(
                "pipeline dt {} must be > 0",
                self.dt
            )));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::domain(format!(
                "relaxation {} must lie in (0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn refine_options(&self) -> RefineOptions {
        RefineOptions {
            max_iters: self.refine_iters,
            lambda: self.lambda,
            ..Default::default()
        }
    }
}

/// Cost of one pipeline candidate before and after refinement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub label: String,
    pub start_cost: f64,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointResult {
    pub tau: f64,
    pub w: f64,
    pub cost: f64,
    pub method: Method,
    pub protocol: Protocol,
    pub candidates: Vec<Candidate>,
}

struct Start {
    label: String,
    protocol: Protocol,
    method: Method,
}

/// Best protocol for one `(τ, W)`: bang-bang multistart, annealing, random
/// grids and an optional optimum for a shorter `τ` all feed grid refinement; at `W = 0`
/// refined protocols also get their switch times polished. The lowest cost
/// wins; ties go to the earlier candidate. Optionally, with noise, the
/// winner's interior controls are then polished by quasi-Newton descent.
pub fn optimize_point(
    tau: f64,
    noise: NoiseStrength,
    cfg: &PipelineConfig,
    anneal_cfg: &AnnealConfig,
    warm: Option<&Protocol>,
) -> Result<PointResult> {
    cfg.validate()?;
    if !(tau > 0.0) {
        return Err(Error::domain(format!("total time {tau} must be > 0")));
    }
    let seed = point_seed(cfg.seed, tau, noise.w());
    let mut exact: Vec<Start> = Vec::new();
    let mut grid: Vec<Start> = vec![Start {
        label: "stationary".into(),
        protocol: Protocol::stationary(tau, cfg.dt)?,
        method: Method::Refined,
    }];

    // A shorter optimum embeds by a stationary prefix (same cost) and by
    // time dilation (lower dephasing dose).
    let warm = match warm {
        Some(w) if w.total_time() < tau => {
            let stretched = w.stretched(tau)?.resample(cfg.dt)?;
            grid.push(Start {
                label: "stretched".into(),
                protocol: stretched,
                method: Method::Refined,
            });
            Some(w.with_stationary_prefix(tau - w.total_time())?)
        }
        other => other.cloned(),
    };
    if let Some(w) = &warm {
        grid.push(Start {
            label: "warm".into(),
            protocol: w.clone(),
            method: Method::Refined,
        });
    }
    if cfg.use_bangbang {
        let opts = BangBangOptions {
            multistarts: cfg.multistarts,
            seed,
            ..Default::default()
        };
        let bb = optimize_bangbang(tau, noise, &opts)?;
        let p = bb.params.protocol(tau)?;
        grid.push(Start {
            label: "bangbang".into(),
            protocol: p.resample(cfg.dt)?,
            method: Method::Refined,
        });
        exact.push(Start {
            label: "bangbang-exact".into(),
            protocol: p,
            method: Method::Bangbang,
        });
    }
    if cfg.use_anneal {
        let acfg = AnnealConfig {
            dt: cfg.dt,
            seed,
            ..anneal_cfg.clone()
        };
        let result = match &warm {
            Some(w) => anneal_warm(tau, noise, &acfg, w)?,
            None => anneal(tau, noise, &acfg)?,
        };
        exact.push(Start {
            label: "anneal-raw".into(),
            protocol: result.best_protocol.clone(),
            method: Method::Anneal,
        });
        grid.push(Start {
            label: "anneal".into(),
            protocol: result.best_protocol,
            method: Method::Refined,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    for k in 0..cfg.random_starts {
        grid.push(Start {
            label: format!("random-{k}"),
            protocol: random_protocol_with(tau, cfg.dt, &mut rng)?,
            method: Method::Refined,
        });
    }

    let ropts = cfg.refine_options();
    let polish = cfg.polish && noise.w2() == 0.0;
    let refined: Vec<Result<Vec<(Candidate, Protocol, Method)>>> = grid
        .par_iter()
        .map(|s| {
            let start_cost = protocol_cost(&s.protocol, noise);
            let (q, report) = refine(&s.protocol, noise, &ropts)?;
            let mut out = vec![(
                Candidate {
                    label: s.label.clone(),
                    start_cost,
                    cost: report.final_cost,
                },
                q,
                s.method,
            )];
            if polish {
                let (schedule, cost) = polish_switch_times(&out[0].1, noise)?;
                out.push((
                    Candidate {
                        label: format!("{}-polished", s.label),
                        start_cost: report.final_cost,
                        cost,
                    },
                    schedule.protocol()?,
                    s.method,
                ));
            }
            Ok(out)
        })
        .collect();

    let mut all: Vec<(Candidate, Protocol, Method)> = exact
        .into_iter()
        .map(|s| {
            let c = protocol_cost(&s.protocol, noise);
            (
                Candidate {
                    label: s.label,
                    start_cost: c,
                    cost: c,
                },
                s.protocol,
                s.method,
            )
        })
        .collect();
    for r in refined {
        all.extend(r?);
    }
    let best = all
        .iter()
        .enumerate()
        .filter(|(_, c)| c.0.cost.is_finite())
        .min_by(|a, b| a.1 .0.cost.total_cmp(&b.1 .0.cost).then(a.0.cmp(&b.0)))
        .map(|(k, _)| k)
        .ok_or_else(|| Error::Numerical("no candidate produced a finite cost".into()))?;
    let (_, mut protocol, mut method) = all[best].clone();
    if cfg.polish_arcs && noise.w2() > 0.0 {
        let (polished, cost) = polish_continuous(&protocol, noise, CONTINUOUS_ROUNDS)?;
        all.push((
            Candidate {
                label: format!("{}-polished", all[best].0.label),
                start_cost: all[best].0.cost,
                cost,
            },
            polished.clone(),
            Method::Refined,
        ));
        if cost < all[best].0.cost {
            protocol = polished;
            method = Method::Refined;
        }
    }
    // Report the cost of exactly the protocol that is returned.
    let cost = protocol_cost(&protocol, noise);
    protocol
        .metadata
        .insert("method".into(), method.to_string().into());
    protocol.metadata.insert("tau".into(), tau.into());
    protocol.metadata.insert("w".into(), noise.w().into());
    Ok(PointResult {
        tau,
        w: noise.w(),
        cost,
        method,
        protocol,
        candidates: all.into_iter().map(|c| c.0).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    pub w: f64,
    /// NaN when the point failed.
    pub cost: f64,
    pub method: Option<Method>,
    pub protocol_file: String,
    pub error: String,
}

impl SweepRow {
    pub fn succeeded(&self) -> bool {
        self.error.is_empty() && self.cost.is_finite()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

const SWEEP_HEADER: [&str; 6] = ["tau", "w", "cost", "method", "protocol", "error"];

impl SweepResult {
    pub fn sort(&mut self) {
        self.rows
            .sort_by(|a, b| a.w.total_cmp(&b.w).then(a.tau.total_cmp(&b.tau)));
    }

    /// Distinct noise strengths in ascending order.
    pub fn ws(&self) -> Vec<f64> {
        let mut ws: Vec<f64> = self.rows.iter().map(|r| r.w).collect();
        ws.sort_by(f64::total_cmp);
        ws.dedup();
        ws
    }

    /// Successful `(τ, C_min)` points at noise `w`, ascending in τ.
    pub fn curve(&self, w: f64) -> Vec<(f64, f64)> {
        let mut pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.w == w && r.succeeded())
            .map(|r| (r.tau, r.cost))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SWEEP_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            let cost = if r.cost.is_finite() {
                fmt_f64(r.cost)
            } else {
                String::new()
            };
            let method = r.method.map(|m| m.to_string()).unwrap_or_default();
            w.write_record([
                fmt_f64(r.tau),
                fmt_f64(r.w),
                cost,
                method,
                r.protocol_file.clone(),
                r.error.clone(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses a sweep table; `source_name` labels diagnostics.
    pub fn read_csv<R: Read>(input: R, source_name: &str) -> Result<SweepResult> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(input);
        let header = rdr
            .headers()
            .map_err(|e| Error::parse(source_name, "line 1", e.to_string()))?
            .clone();
        if header.iter().ne(SWEEP_HEADER) {
            return Err(Error::parse(
                source_name,
                "line 1",
                format!("expected header {}", SWEEP_HEADER.join(",")),
            ));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Error::parse(source_name, format!("line {line}"), e.to_string())
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let at = |field: &str| format!("line {line}, field `{field}`");
            let num = |k: usize, name: &str| -> Result<f64> {
                rec[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(source_name, at(name), format!("`{}`: {e}", &rec[k])))
            };
            let tau = num(0, "tau")?;
            let w = num(1, "w")?;
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::parse(
                    source_name,
                    at("tau"),
                    format!("{tau} must be > 0"),
                ));
            }
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::parse(
                    source_name,
                    at("w"),
                    format!("{w} must be ≥ 0"),
                ));
            }
            let cost = if rec[2].trim().is_empty() {
                f64::NAN
            } else {
                num(2, "cost")?
            };
            let method = if rec[3].trim().is_empty() {
                None
            } else {
                Some(
                    rec[3]
                        .trim()
                        .parse::<Method>()
                        .map_err(|e| Error::parse(source_name, at("method"), e))?,
                )
            };
            rows.push(SweepRow {
                tau,
                w,
                cost,
                method,
                protocol_file: rec[4].to_string(),
                error: rec[5].to_string(),
            });
        }
        Ok(SweepResult { rows })
    }

    pub fn load(path: &Path) -> Result<SweepResult> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// File name of the protocol stored for one sweep point.
pub fn protocol_file_name(tau: f64, w: f64) -> String {
    format!("protocol_tau{tau:.4}_w{w:.4}.json")
}

/// One point per `(τ, W)`. Points at the same `W` run in ascending τ and
/// each is warm-started from the previous optimum padded in front with the
/// stationary control, which leaves its cost unchanged; different `W` run
/// in parallel. A failing point is recorded and the sweep moves on. With
/// `protocol_dir`, every optimum is written there as JSON.
pub fn run_sweep(
    ws: &[f64],
    taus: &[f64],
    cfg: &PipelineConfig,
    anneal_cfg: &AnnealConfig,
    protocol_dir: Option<&Path>,
) -> Result<(SweepResult, Vec<Option<PointResult>>)> {
    if ws.is_empty() || taus.is_empty() {
        return Err(Error::domain("sweep needs at least one W and one τ"));
    }
    cfg.validate()?;
    let noises = ws
        .iter()
        .map(|&w| NoiseStrength::new(w))
        .collect::<Result<Vec<_>>>()?;
    let mut sorted = taus.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();

    let per_w: Vec<Vec<(SweepRow, Option<PointResult>)>> = noises
        .par_iter()
        .map(|&noise| {
            let mut out = Vec::with_capacity(sorted.len());
            let mut prev: Option<PointResult> = None;
            for &tau in &sorted {
                let warm = prev
                    .as_ref()
                    .filter(|p| p.tau < tau)
                    .map(|p| p.protocol.clone());
                let file = protocol_file_name(tau, noise.w());
                let outcome =
                    optimize_point(tau, noise, cfg, anneal_cfg, warm.as_ref()).and_then(|r| {
                        if let Some(dir) = protocol_dir {
                            r.protocol.save(&dir.join(&file))?;
                        }
                        Ok(r)
                    });
                match outcome {
                    Ok(r) => {
                        log::info!(
                            "tau {tau} W {}: cost {:.6e} via {}",
                            noise.w(),
                            r.cost,
                            r.method
                        );
                        out.push((
                            SweepRow {
                                tau,
                                w: noise.w(),
                                cost: r.cost,
                                method: Some(r.method),
                                protocol_file: file,
                                error: String::new(),
                            },
                            Some(r.clone()),
                        ));
                        prev = Some(r);
                    }
                    Err(e) => {
                        log::warn!("tau {tau} W {}: {e}", noise.w());
                        out.push((
                            SweepRow {
                                tau,
                                w: noise.w(),
                                cost: f64::NAN,
                                method: None,
                                protocol_file: String::new(),
                                error: e.to_string(),
                            },
                            None,
                        ));
                    }
                }
            }
            out
        })
        .collect();
    let (rows, points): (Vec<_>, Vec<_>) = per_w.into_iter().flatten().unzip();
    let mut result = SweepResult { rows };
    result.sort();
    Ok((result, points))
}

/// Critical time: the end of the initial plateau.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CriticalTime {
    /// The first grid point is already below the plateau.
    BelowGrid {
        grid_min: f64,
    },
    At(f64),
}

impl CriticalTime {
    pub fn value(&self) -> Option<f64> {
        match self {
            CriticalTime::At(t) => Some(*t),
            CriticalTime::BelowGrid { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regimes {
    pub w: f64,
    pub tau_c: CriticalTime,
    /// First τ after which the descent has flattened, if it does so on the
    /// grid.
    pub regime2_end: Option<f64>,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Regime boundaries of one `C_min(τ)` curve (ascending τ).
///
/// `τ_c` is the last point of the run of points, starting at the smallest
/// τ, with `C_min > C(τ = 0) − δ`. Regime II then ends at the left end of
/// the first interval whose slope magnitude is below [`SLOPE_RATIO`] times
/// the median slope magnitude of the intervals between `τ_c` and it.
pub fn estimate_regimes(w: f64, curve: &[(f64, f64)], delta: f64) -> Result<Regimes> {
    if curve.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "regime estimate needs at least 3 points, got {}",
            curve.len()
        )));
    }
    if curve.windows(2).any(|p| !(p[1].0 > p[0].0)) {
        return Err(Error::domain("sweep curve must be strictly ascending in τ"));
    }
    let plateau = curve.iter().take_while(|p| p.1 > PLATEAU - delta).count();
    let (tau_c, start) = if plateau == 0 {
        (
            CriticalTime::BelowGrid {
                grid_min: curve[0].0,
            },
            0,
        )
    } else {
        (CriticalTime::At(curve[plateau - 1].0), plateau - 1)
    };
    let slopes: Vec<f64> = curve[start..]
        .windows(2)
        .map(|p| ((p[1].1 - p[0].1) / (p[1].0 - p[0].0)).abs())
        .collect();
    let mut regime2_end = None;
    for k in 1..slopes.len() {
        let m = median(&slopes[..k]);
        if m > 0.0 && slopes[k] < SLOPE_RATIO * m {
            regime2_end = Some(curve[start + k].0);
            break;
        }
    }
    Ok(Regimes {
        w,
        tau_c,
        regime2_end,
    })
}

pub fn write_regimes_csv<W: Write>(regimes: &[Regimes], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["w", "tau_c", "tau_c_below_grid", "regime2_end"])
        .map_err(csv_err)?;
    for r in regimes {
        let (tc, below) = match r.tau_c {
            CriticalTime::At(t) => (fmt_f64(t), "false"),
            CriticalTime::BelowGrid { grid_min } => (fmt_f64(grid_min), "true"),
        };
        w.write_record([
            fmt_f64(r.w),
            tc,
            below.to_string(),
            r.regime2_end.map(fmt_f64).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub w: f64,
    pub tau: f64,
    pub cost: f64,
}

/// Cost of the linear ramp protocol at every `(W, τ)`.
pub fn baseline(ws: &[f64], taus: &[f64], dt: f64) -> Result<Vec<BaselineRow>> {
    let mut jobs = Vec::new();
    for &w in ws {
        NoiseStrength::new(w)?;
        for &tau in taus {
            jobs.push((w, tau));
        }
    }
    jobs.par_iter()
        .map(|&(w, tau)| {
            let p = linear_adiabatic_protocol(tau, dt)?;
            Ok(BaselineRow {
                w,
                tau,
                cost: protocol_cost(&p, NoiseStrength::new(w)?),
            })
        })
        .collect()
}

pub fn write_baseline_csv<W: Write>(rows: &[BaselineRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["w", "tau", "cost"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([fmt_f64(r.w), fmt_f64(r.tau), fmt_f64(r.cost)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramResult {
    pub w: f64,
    pub dt: f64,
    pub samples: usize,
    pub taus: Vec<f64>,
    /// `bins + 1` edges spanning `[0, 1]`.
    pub edges: Vec<f64>,
    /// `counts[k][b]`: samples at `taus[k]` with cost in bin `b`.
    pub counts: Vec<Vec<u64>>,
    pub minimum: Vec<f64>,
    pub reference: f64,
}

/// Stream of sample `i` at grid index `k`: one ChaCha stream per pair, so
/// the draws do not depend on thread count or sample budget.
fn sample_rng(seed: u64, k: usize, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((k as u64) << 40) | i as u64);
    rng
}

/// Costs of `samples` uniformly random protocols per τ, binned over
/// `[0, 1]`, with the per-τ minimum.
pub fn histogram(
    taus: &[f64],
    samples: usize,
    dt: f64,
    noise: NoiseStrength,
    seed: u64,
    bins: usize,
) -> Result<HistogramResult> {
    if bins == 0 {
        return Err(Error::domain("histogram needs at least one bin"));
    }
    if taus.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::domain("histogram times must be > 0"));
    }
    let edges: Vec<f64> = (0..=bins).map(|b| b as f64 / bins as f64).collect();
    let mut counts = Vec::with_capacity(taus.len());
    let mut minimum = Vec::with_capacity(taus.len());
    for (k, &tau) in taus.iter().enumerate() {
        let costs = (0..samples)
            .into_par_iter()
            .map(|i| {
                let p = random_protocol_with(tau, dt, &mut sample_rng(seed, k, i))?;
                Ok(protocol_cost(&p, noise))
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut row = vec![0u64; bins];
        for &c in &costs {
            let b = ((c * bins as f64).floor() as usize).min(bins - 1);
            row[b] += 1;
        }
        counts.push(row);
        minimum.push(costs.iter().copied().fold(f64::INFINITY, f64::min));
    }
    Ok(HistogramResult {
        w: noise.w(),
        dt,
        samples,
        taus: taus.to_vec(),
        edges,
        counts,
        minimum,
        reference: PLATEAU,
    })
}

impl HistogramResult {
    /// Long format: `tau, c_low, c_high, count`.
    pub fn write_counts_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tau", "c_low", "c_high", "count"])
            .map_err(csv_err)?;
        for (k, tau) in self.taus.iter().enumerate() {
            for (b, n) in self.counts[k].iter().enumerate() {
                w.write_record([
                    fmt_f64(*tau),
                    fmt_f64(self.edges[b]),
                    fmt_f64(self.edges[b + 1]),
                    n.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `tau, samples, min_cost, reference`.
    pub fn write_envelope_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tau", "samples", "min_cost", "reference"])
            .map_err(csv_err)?;
        for (k, tau) in self.taus.iter().enumerate() {
            w.write_record([
                fmt_f64(*tau),
                self.samples.to_string(),
                fmt_f64(self.minimum[k]),
                fmt_f64(self.reference),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fits above this condition number get a warning.
pub const CONDITION_WARNING: f64 = 1e8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationResult {
    pub w: f64,
    pub degree: usize,
    /// Coefficients of `1, 1/τ, …, 1/τ^degree`.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub intercept_error: f64,
    pub residuals: Vec<f64>,
    pub rms_residual: f64,
    pub condition_number: f64,
    pub warning: Option<String>,
}

fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<(Vec<f64>, f64)> {
    let a = DMatrix::from_fn(x.len(), degree + 1, |i, k| x[i].powi(k as i32));
    let svd = a.clone().svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let cond = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    let coef = svd
        .solve(&DVector::from_column_slice(y), smax * 1e-14)
        .map_err(|e| Error::Numerical(format!("least squares failed: {e}")))?;
    Ok((coef.iter().copied().collect(), cond))
}

fn evaluate_poly(coef: &[f64], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Least-squares fit of `C` as a polynomial in `1/τ` with a residual
/// bootstrap (`bootstrap` resamples) for the intercept's standard error.
pub fn extrapolate(
    w: f64,
    points: &[(f64, f64)],
    degree: usize,
    bootstrap: usize,
    seed: u64,
) -> Result<ExtrapolationResult> {
    if !(1..=4).contains(&degree) {
        return Err(Error::domain(format!("fit degree {degree} outside 1..=4")));
    }
    if points.len() < degree + 2 {
        return Err(Error::InsufficientData(format!(
            "degree {degree} fit needs at least {} points, got {}",
            degree + 2,
            points.len()
        )));
    }
    if points.iter().any(|p| !(p.0 > 0.0) || !p.1.is_finite()) {
        return Err(Error::domain("fit points need τ > 0 and finite cost"));
    }
    let x: Vec<f64> = points.iter().map(|p| 1.0 / p.0).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (coefficients, condition_number) = polyfit(&x, &y, degree)?;
    let fitted: Vec<f64> = x
        .iter()
        .map(|&xi| evaluate_poly(&coefficients, xi))
        .collect();
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let rms_residual =
        (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut intercepts = Vec::with_capacity(bootstrap);
    for _ in 0..bootstrap {
        let yb: Vec<f64> = fitted
            .iter()
            .map(|f| f + residuals.choose(&mut rng).copied().unwrap_or(0.0))
            .collect();
        intercepts.push(polyfit(&x, &yb, degree)?.0[0]);
    }
    let intercept_error = if intercepts.len() > 1 {
        let mean = intercepts.iter().sum::<f64>() / intercepts.len() as f64;
        (intercepts.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (intercepts.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    let warning = (condition_number > CONDITION_WARNING)
        .then(|| format!("ill-conditioned fit: condition number {condition_number:.3e}"));
    Ok(ExtrapolationResult {
        w,
        degree,
        intercept: coefficients[0],
        coefficients,
        intercept_error,
        residuals,
        rms_residual,
        condition_number,
        warning,
    })
}

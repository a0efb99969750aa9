//! Minimum-principle machinery: switching functions, the optimal-control
//! Hamiltonian, pointwise minimization, optimality checks and iterative
//! refinement of piecewise-constant protocols.
//!
//! With `Π = Π_R + iΠ_I` the costate conjugate to `(ρ_R, ρ_I)`, the
//! Hamiltonian is `𝓗 = Σ_j [F_j Δ_j + W² G_j Δ_j²]`. Inside a segment the
//! control is constant, so the quantities that decide whether a cell's
//! control is optimal are the cell averages `F̄_j`, `Ḡ_j`: the derivative
//! of the cost with respect to the cell's control is
//! `Δt (F̄_j + 2W² Ḡ_j Δ_j)`.

use std::io::Write;

use argmin::core::{CostFunction, Executor, Gradient};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::cost::{cost_gradient, trace_distance, DEFAULT_REGULARIZATION};
use crate::error::{Error, Result};
use crate::linalg::{c, real_pairing, Mat4};
use crate::model::{basis_operators, ControlVector, NoiseStrength, Protocol, StatePair};
use crate::propagator::{
    csv_err, propagate, propagate_costate, protocol_cost, SectorGenerator, SectorState,
};
use crate::simplex::{minimize_box, SimplexOptions};

/// `|F_j|` below this marks a candidate singular point at `W = 0`.
pub const EPS_SING: f64 = 1e-6;

/// Branch values closer than this count as a tie.
pub const TIE_TOL: f64 = 1e-12;

/// Gauss–Legendre nodes and weights on `[0, 1]`.
const GAUSS: [(f64, f64); 5] = [
    (0.046_910_077_030_668_00, 0.118_463_442_528_094_5),
    (0.230_765_344_947_158_5, 0.239_314_335_249_683_2),
    (0.5, 0.284_444_444_444_444_4),
    (0.769_234_655_052_841_5, 0.239_314_335_249_683_2),
    (0.953_089_922_969_332, 0.118_463_442_528_094_5),
];

/// Conjugate momentum `Π = Π_R + iΠ_I` of the density matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Costate(pub Mat4);

impl Costate {
    pub fn re(&self) -> Matrix4<f64> {
        self.0.map(|z| z.re)
    }

    pub fn im(&self) -> Matrix4<f64> {
        self.0.map(|z| z.im)
    }
}

/// Coefficients of `𝓗` in the controls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Switching {
    pub f: [f64; 3],
    pub g: [f64; 3],
}

impl Switching {
    fn scaled_add(&mut self, other: &Switching, w: f64) {
        for j in 0..3 {
            self.f[j] += w * other.f[j];
            self.g[j] += w * other.g[j];
        }
    }
}

fn real_part(m: &Mat4) -> Matrix4<f64> {
    m.map(|z| z.re)
}

fn imag_part(m: &Mat4) -> Matrix4<f64> {
    m.map(|z| z.im)
}

fn dot(a: &Matrix4<f64>, b: &Matrix4<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// `F_j`, `G_j` from the real/imaginary split. `O_1` is purely imaginary
/// and `O_2`, `O_3` are real, so every product below is real.
pub fn switching_functions(rho: &Mat4, pi: &Costate) -> Switching {
    let ops = basis_operators();
    let (rho_r, rho_i) = (real_part(rho), imag_part(rho));
    let (pi_r, pi_i) = (pi.re(), pi.im());
    let mut out = Switching::default();

    // O_1 = i·o1 with o1 real.
    let o1 = imag_part(&ops.o1);
    let comm_r = rho_r * o1 - o1 * rho_r;
    let comm_i = rho_i * o1 - o1 * rho_i;
    // i·(ρ O_1 − O_1 ρ) = i·i·(ρ o1 − o1 ρ) = −(ρ o1 − o1 ρ)
    out.f[0] = -dot(&pi_r, &comm_r) - dot(&pi_i, &comm_i);
    // O_1 ρ O_1 = −o1 ρ o1
    let sand_r = -(o1 * rho_r * o1);
    let sand_i = -(o1 * rho_i * o1);
    out.g[0] = -dot(&pi_r, &rho_r) - dot(&pi_i, &rho_i) + dot(&pi_r, &sand_r) + dot(&pi_i, &sand_i);

    for j in 1..3 {
        let o = real_part(ops.get(j));
        out.f[j] = -dot(&pi_r, &(rho_i * o - o * rho_i)) + dot(&pi_i, &(rho_r * o - o * rho_r));
        out.g[j] = -dot(&pi_r, &rho_r) - dot(&pi_i, &rho_i)
            + dot(&pi_r, &(o * rho_r * o))
            + dot(&pi_i, &(o * rho_i * o));
    }
    out
}

/// `𝓗 = Σ_j [F_j Δ_j + W² G_j Δ_j²]`.
pub fn control_hamiltonian(
    rho: &Mat4,
    pi: &Costate,
    ctrl: &ControlVector,
    noise: NoiseStrength,
) -> f64 {
    let s = switching_functions(rho, pi);
    let w2 = noise.w2();
    (0..3)
        .map(|j| {
            let d = ctrl.get(j);
            s.f[j] * d + w2 * s.g[j] * d * d
        })
        .sum()
}

/// `Π(τ) = ∂C/∂ρ_R + i ∂C/∂ρ_I` at the final state.
pub fn costate_boundary(rho_tau: &Mat4, sigma: &Mat4) -> Result<Costate> {
    let g = cost_gradient(sigma, rho_tau, DEFAULT_REGULARIZATION)?;
    Ok(Costate(g.as_complex()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    LowerBang,
    UpperBang,
    Continuous,
    /// `W = 0` and `|F_j| < ε_sing`: the minimum principle does not fix
    /// the control.
    Singular,
}

impl Branch {
    pub fn label(&self) -> &'static str {
        match self {
            Branch::LowerBang => "lower-bang",
            Branch::UpperBang => "upper-bang",
            Branch::Continuous => "continuous",
            Branch::Singular => "singular",
        }
    }
}

/// `Δ_j^d = −F_j / (2W² G_j)` when `W > 0` and `G_j ≠ 0`.
pub fn stationary_control(f: f64, g: f64, noise: NoiseStrength) -> Option<f64> {
    let w2 = noise.w2();
    if w2 > 0.0 && g != 0.0 {
        Some(-f / (2.0 * w2 * g))
    } else {
        None
    }
}

/// Minimizer of `F Δ + W² G Δ²` over `Δ ∈ [0, 1]`.
pub fn pointwise_minimizer(f: f64, g: f64, noise: NoiseStrength) -> (f64, Branch) {
    pointwise_minimizer_from(f, g, noise, None, EPS_SING)
}

/// [`pointwise_minimizer`] with an incumbent control that wins ties and is
/// returned unchanged at singular points.
pub fn pointwise_minimizer_from(
    f: f64,
    g: f64,
    noise: NoiseStrength,
    incumbent: Option<f64>,
    eps_sing: f64,
) -> (f64, Branch) {
    let w2 = noise.w2();
    if w2 == 0.0 {
        if f.abs() < eps_sing {
            return (incumbent.unwrap_or(0.0), Branch::Singular);
        }
        return if f > 0.0 {
            (0.0, Branch::LowerBang)
        } else {
            (1.0, Branch::UpperBang)
        };
    }
    let mut candidates = vec![
        (0.0, 0.0, Branch::LowerBang),
        (1.0, f + w2 * g, Branch::UpperBang),
    ];
    if let Some(d) = stationary_control(f, g, noise) {
        if (0.0..=1.0).contains(&d) {
            candidates.push((d, -f * f / (4.0 * w2 * g), Branch::Continuous));
        }
    }
    let best = candidates.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    if let Some(x) = incumbent {
        if f * x + w2 * g * x * x <= best + TIE_TOL {
            let branch = match x {
                x if x == 0.0 => Branch::LowerBang,
                x if x == 1.0 => Branch::UpperBang,
                _ => Branch::Continuous,
            };
            return (x, branch);
        }
    }
    let pick = candidates
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    (pick.0, pick.2)
}

/// Switching data for one segment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchingPoint {
    /// Segment midpoint.
    pub t: f64,
    pub duration: f64,
    pub control: [f64; 3],
    /// Segment averages `F̄_j`, `Ḡ_j`.
    pub f: [f64; 3],
    pub g: [f64; 3],
    pub delta_d: [Option<f64>; 3],
    pub branch: [Branch; 3],
    /// `𝓗` inside the segment (constant there).
    pub hamiltonian: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwitchingRecord {
    pub w: f64,
    pub cost: f64,
    pub points: Vec<SwitchingPoint>,
    /// `F_j` at every segment boundary `t_0 … t_N`.
    pub boundary_f: Vec<[f64; 3]>,
    pub boundary_times: Vec<f64>,
}

impl SwitchingRecord {
    /// True when `F_j` changes sign across segment `n`.
    pub fn sign_changes_in(&self, n: usize, j: usize) -> bool {
        let (a, b) = (self.boundary_f[n][j], self.boundary_f[n + 1][j]);
        a * b < 0.0
    }

    /// Derivatives of the cost with respect to each segment's controls.
    pub fn control_gradient(&self) -> Vec<[f64; 3]> {
        let w2 = self.w * self.w;
        self.points
            .iter()
            .map(|p| {
                let mut g = [0.0; 3];
                for j in 0..3 {
                    g[j] = p.duration * (p.f[j] + 2.0 * w2 * p.g[j] * p.control[j]);
                }
                g
            })
            .collect()
    }

    /// Columns `t, F1..F3, G1..G3, d1..d3, branch1..branch3`; undefined
    /// `Δ^d` is left empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "t", "F1", "F2", "F3", "G1", "G2", "G3", "d1", "d2", "d3", "branch1", "branch2",
            "branch3",
        ])
        .map_err(csv_err)?;
        for p in &self.points {
            let mut rec = vec![crate::io::fmt_f64(p.t)];
            rec.extend(p.f.iter().map(|v| crate::io::fmt_f64(*v)));
            rec.extend(p.g.iter().map(|v| crate::io::fmt_f64(*v)));
            rec.extend(
                p.delta_d
                    .iter()
                    .map(|v| v.map(crate::io::fmt_f64).unwrap_or_default()),
            );
            rec.extend(p.branch.iter().map(|b| b.label().to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Forward states, costates and cell-averaged switching functions.
pub fn evaluate_switching(protocol: &Protocol, noise: NoiseStrength) -> Result<SwitchingRecord> {
    let pair = StatePair::default();
    let (rho_tau, traj) = propagate(protocol, noise, &pair.rho0, true);
    let rho = traj.expect("trajectory requested").states;
    let pi_tau = costate_boundary(&rho_tau, &pair.sigma)?;
    let pi = propagate_costate(protocol, noise, &pi_tau.0).states;
    let w2 = noise.w2();
    let times = protocol.boundaries();

    let boundary_f = rho
        .iter()
        .zip(&pi)
        .map(|(r, p)| switching_functions(r, &Costate(*p)).f)
        .collect();

    let mut points = Vec::with_capacity(protocol.len());
    for (n, seg) in protocol.segments().iter().enumerate() {
        let h = seg.duration;
        let fwd = SectorGenerator::new(&seg.control, w2);
        let bwd = SectorGenerator::new(&seg.control, -w2);
        let rho_n = SectorState::from_matrix(&rho[n]);
        let pi_next = SectorState::from_matrix(&pi[n + 1]);
        let mut avg = Switching::default();
        for &(s, weight) in &GAUSS {
            let r = fwd.exp(s * h).apply(&rho_n).to_matrix();
            let p = bwd.exp(-(1.0 - s) * h).apply(&pi_next).to_matrix();
            avg.scaled_add(&switching_functions(&r, &Costate(p)), weight);
        }
        let ctrl = seg.control.as_array();
        let mut delta_d = [None; 3];
        let mut branch = [Branch::Singular; 3];
        for j in 0..3 {
            delta_d[j] = stationary_control(avg.f[j], avg.g[j], noise);
            branch[j] =
                pointwise_minimizer_from(avg.f[j], avg.g[j], noise, Some(ctrl[j]), EPS_SING).1;
        }
        let hamiltonian = (0..3)
            .map(|j| avg.f[j] * ctrl[j] + w2 * avg.g[j] * ctrl[j] * ctrl[j])
            .sum();
        points.push(SwitchingPoint {
            t: 0.5 * (times[n] + times[n + 1]),
            duration: h,
            control: ctrl,
            f: avg.f,
            g: avg.g,
            delta_d,
            branch,
            hamiltonian,
        });
    }
    Ok(SwitchingRecord {
        w: noise.w(),
        cost: trace_distance(&pair.sigma, &rho_tau),
        points,
        boundary_f,
        boundary_times: times,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineOptions {
    pub max_iters: usize,
    /// Initial blend weight toward the synthesized controls.
    pub lambda: f64,
    /// Backtracking gives up below this blend weight.
    pub min_lambda: f64,
    pub control_tol: f64,
    pub cost_tol: f64,
    pub eps_sing: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            max_iters: 500,
            lambda: 0.5,
            min_lambda: 1e-4,
            control_tol: 1e-8,
            cost_tol: 1e-12,
            eps_sing: EPS_SING,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    ControlConverged,
    CostConverged,
    /// The final state matches the target; the cost has no gradient.
    AtMinimum,
    MaxIterations,
    /// Backtracking drove the blend weight below its floor.
    StepUnderflow,
}

/// One control that misses the pointwise minimum of `𝓗`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub segment: usize,
    pub channel: usize,
    pub t: f64,
    pub control: f64,
    pub optimal: f64,
    /// `h(Δ) − min h` with `h(x) = F̄ x + W² Ḡ x²`.
    pub excess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RefinementReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub cost_history: Vec<f64>,
    pub max_change: Vec<f64>,
    pub stop: StopReason,
    pub violations: Vec<Violation>,
    /// Controls checked against the minimum principle.
    pub checked: usize,
    /// `max |𝓗 − mean| / scale` over segments away from switches.
    pub hamiltonian_deviation: f64,
}

impl RefinementReport {
    pub fn sign_violations(&self) -> usize {
        self.violations.len()
    }

    pub fn failed(&self) -> bool {
        self.stop == StopReason::StepUnderflow
    }
}

fn synthesize(
    protocol: &Protocol,
    rec: &SwitchingRecord,
    noise: NoiseStrength,
    eps_sing: f64,
) -> Vec<[f64; 3]> {
    protocol
        .controls()
        .zip(&rec.points)
        .map(|(ctrl, p)| {
            let mut out = [0.0; 3];
            for j in 0..3 {
                out[j] =
                    pointwise_minimizer_from(p.f[j], p.g[j], noise, Some(ctrl.get(j)), eps_sing).0;
            }
            out
        })
        .collect()
}

/// Controls within `SNAP · λ` of their target move all the way.
const SNAP: f64 = 0.1;

/// `Δ ← Δ + λ_{n,j} (Δ_synth − Δ)`.
fn blended(
    protocol: &Protocol,
    synth: &[[f64; 3]],
    weight: impl Fn(usize, usize) -> f64,
) -> (Protocol, f64) {
    let mut out = protocol.clone();
    let mut change: f64 = 0.0;
    for (n, target) in synth.iter().enumerate() {
        let old = protocol.segments()[n].control.as_array();
        let mut new = [0.0; 3];
        for j in 0..3 {
            let lambda = weight(n, j);
            new[j] = if (target[j] - old[j]).abs() <= SNAP * lambda {
                target[j]
            } else {
                old[j] + lambda * (target[j] - old[j])
            };
            change = change.max((new[j] - old[j]).abs());
        }
        out.set_control(n, ControlVector::clamped(new));
    }
    (out, change)
}

/// Iterates switching evaluation, pointwise synthesis and a blend toward
/// the synthesized controls, keeping only steps that do not raise the cost.
///
/// Each iteration first tries moving every control whose cell contains no
/// sign change of `F_j` fully onto its target, switching cells by `λ`. If
/// that raises the cost, all controls blend by `λ`, halved until the cost
/// does not rise.
pub fn refine(
    protocol: &Protocol,
    noise: NoiseStrength,
    opts: &RefineOptions,
) -> Result<(Protocol, RefinementReport)> {
    let mut current = protocol.clone();
    let initial_cost = protocol_cost(&current, noise);
    let mut cost = initial_cost;
    let mut history = vec![cost];
    let mut changes = Vec::new();
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        let rec = match evaluate_switching(&current, noise) {
            Ok(r) => r,
            Err(Error::SingularGradient) => {
                stop = StopReason::AtMinimum;
                break;
            }
            Err(e) => return Err(e),
        };
        iterations += 1;
        let synth = synthesize(&current, &rec, noise, opts.eps_sing);
        let (snapped, snap_change) = blended(&current, &synth, |n, j| {
            if rec.sign_changes_in(n, j) {
                opts.lambda
            } else {
                1.0
            }
        });
        let snap_cost = protocol_cost(&snapped, noise);
        let accepted = if snap_change > 0.0 && snap_cost <= cost {
            Some((snapped, snap_change, snap_cost))
        } else {
            let mut lambda = opts.lambda;
            loop {
                let (candidate, change) = blended(&current, &synth, |_, _| lambda);
                if change == 0.0 {
                    break Some((candidate, 0.0, cost));
                }
                let c = protocol_cost(&candidate, noise);
                if c <= cost {
                    break Some((candidate, change, c));
                }
                lambda *= 0.5;
                if lambda < opts.min_lambda {
                    break None;
                }
            }
        };
        let Some((candidate, change, new_cost)) = accepted else {
            stop = StopReason::StepUnderflow;
            break;
        };
        // A step that does not pay for itself is not taken, so rerunning
        // from the result reproduces the same rejected step.
        if cost - new_cost < opts.cost_tol && change >= opts.control_tol {
            stop = StopReason::CostConverged;
            break;
        }
        current = candidate;
        cost = new_cost;
        history.push(cost);
        changes.push(change);
        if change < opts.control_tol {
            stop = StopReason::ControlConverged;
            break;
        }
    }

    current.metadata.insert("method".into(), "refined".into());
    let mut report = verify_optimality(&current, noise, &VerifyOptions::default())?;
    report.iterations = iterations;
    report.initial_cost = initial_cost;
    report.cost_history = history;
    report.max_change = changes;
    report.stop = stop;
    Ok((current, report))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub eps_sing: f64,
    /// Relative excess `h(Δ) − min h` tolerated, in units of `Σ_j |F̄_j|`
    /// over the whole protocol.
    pub tolerance: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            eps_sing: EPS_SING,
            tolerance: 1e-6,
        }
    }
}

/// Checks every segment's control against the pointwise minimum of `𝓗`,
/// and the constancy of `𝓗(t)`. Segments where `F_j` changes sign (the
/// switch falls inside the cell) and singular points are not checked; the
/// constancy check also skips segments within one cell of a switch.
pub fn verify_optimality(
    protocol: &Protocol,
    noise: NoiseStrength,
    opts: &VerifyOptions,
) -> Result<RefinementReport> {
    let cost = protocol_cost(protocol, noise);
    let rec = match evaluate_switching(protocol, noise) {
        Ok(r) => r,
        Err(Error::SingularGradient) => {
            return Ok(RefinementReport {
                iterations: 0,
                initial_cost: cost,
                final_cost: cost,
                cost_history: vec![cost],
                max_change: Vec::new(),
                stop: StopReason::AtMinimum,
                violations: Vec::new(),
                checked: 0,
                hamiltonian_deviation: 0.0,
            })
        }
        Err(e) => return Err(e),
    };
    let w2 = noise.w2();
    let scale = rec
        .points
        .iter()
        .map(|p| p.f.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let n = rec.points.len();
    let mut violations = Vec::new();
    let mut checked = 0;
    let mut near_switch = vec![false; n];
    for (k, p) in rec.points.iter().enumerate() {
        for j in 0..3 {
            let switching = rec.sign_changes_in(k, j);
            if switching {
                for m in k.saturating_sub(1)..=(k + 1).min(n - 1) {
                    near_switch[m] = true;
                }
            }
            if k > 0 && (p.control[j] - rec.points[k - 1].control[j]).abs() > 0.5 {
                near_switch[k] = true;
                near_switch[k - 1] = true;
            }
            let (opt, branch) =
                pointwise_minimizer_from(p.f[j], p.g[j], noise, Some(p.control[j]), opts.eps_sing);
            if branch == Branch::Singular || switching {
                continue;
            }
            checked += 1;
            let h = |x: f64| p.f[j] * x + w2 * p.g[j] * x * x;
            let excess = h(p.control[j]) - h(opt);
            if excess > opts.tolerance * scale {
                violations.push(Violation {
                    segment: k,
                    channel: j,
                    t: p.t,
                    control: p.control[j],
                    optimal: opt,
                    excess,
                });
            }
        }
    }
    let kept: Vec<f64> = rec
        .points
        .iter()
        .zip(&near_switch)
        .filter(|(_, &skip)| !skip)
        .map(|(p, _)| p.hamiltonian)
        .collect();
    let hamiltonian_deviation = if kept.is_empty() {
        0.0
    } else {
        let mean = kept.iter().sum::<f64>() / kept.len() as f64;
        kept.iter().map(|h| (h - mean).abs()).fold(0.0, f64::max) / scale
    };
    Ok(RefinementReport {
        iterations: 0,
        initial_cost: cost,
        final_cost: cost,
        cost_history: vec![cost],
        max_change: Vec::new(),
        stop: StopReason::ControlConverged,
        violations,
        checked,
        hamiltonian_deviation,
    })
}

/// Piecewise bang controls: each channel starts at 0 or 1 and flips at
/// each of its (sorted) switch times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BangSchedule {
    pub tau: f64,
    pub initial: [f64; 3],
    pub switches: [Vec<f64>; 3],
}

impl BangSchedule {
    /// Reads the bang structure off a protocol. Runs are split at ½; each
    /// switch time conserves the integral of the control over the cells
    /// between two clean runs.
    pub fn from_protocol(protocol: &Protocol) -> Self {
        let bounds = protocol.boundaries();
        let ctrls: Vec<[f64; 3]> = protocol.controls().map(|c| c.as_array()).collect();
        let mut initial = [0.0; 3];
        let mut switches: [Vec<f64>; 3] = Default::default();
        for j in 0..3 {
            let x: Vec<f64> = ctrls.iter().map(|c| c[j]).collect();
            if x.is_empty() {
                continue;
            }
            let side = |v: f64| if v > 0.5 { 1.0 } else { 0.0 };
            initial[j] = side(x[0]);
            let mut level = initial[j];
            let mut n = 0;
            while n < x.len() {
                if side(x[n]) == level {
                    n += 1;
                    continue;
                }
                // Cells between the last clean `level` cell and the first
                // clean cell of the new level.
                let start = n;
                let next = 1.0 - level;
                let mut end = n;
                while end < x.len() && (x[end] - next).abs() > 1e-3 && side(x[end]) == next {
                    end += 1;
                }
                let (ta, tb) = (bounds[start], bounds[end]);
                let integral: f64 = (start..end)
                    .map(|k| x[k] * (bounds[k + 1] - bounds[k]))
                    .sum();
                let t = if tb > ta {
                    // level·(t − ta) + next·(tb − t) = integral
                    (integral - next * tb + level * ta) / (level - next)
                } else {
                    ta
                };
                switches[j].push(t.clamp(ta, tb));
                level = next;
                n = end.max(start + 1);
            }
        }
        BangSchedule {
            tau: protocol.total_time(),
            initial,
            switches,
        }
    }

    fn flat(&self) -> Vec<f64> {
        self.switches.iter().flatten().copied().collect()
    }

    fn with_flat(&self, x: &[f64]) -> Self {
        let mut out = self.clone();
        let mut k = 0;
        for j in 0..3 {
            let m = out.switches[j].len();
            out.switches[j] = x[k..k + m].iter().map(|t| t.clamp(0.0, self.tau)).collect();
            out.switches[j].sort_by(f64::total_cmp);
            k += m;
        }
        out
    }

    pub fn switch_count(&self) -> usize {
        self.switches.iter().map(Vec::len).sum()
    }

    /// Exact-segment protocol with a cut at every switch.
    pub fn protocol(&self) -> Result<Protocol> {
        let mut cuts = vec![0.0, self.tau];
        cuts.extend(self.flat());
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut segments = Vec::with_capacity(cuts.len());
        for w in cuts.windows(2) {
            if w[1] <= w[0] {
                continue;
            }
            let m = 0.5 * (w[0] + w[1]);
            let mut c = [0.0; 3];
            for j in 0..3 {
                let flips = self.switches[j].iter().filter(|&&s| s < m).count();
                c[j] = if flips % 2 == 0 {
                    self.initial[j]
                } else {
                    1.0 - self.initial[j]
                };
            }
            segments.push(crate::model::Segment {
                duration: w[1] - w[0],
                control: ControlVector::new(c)?,
            });
        }
        Protocol::new(segments, self.tau)
    }
}

/// Optimizes the switch times of the bang structure read off `protocol`
/// on exact segments. Returns the polished schedule and its cost; the
/// cost never exceeds that of the extracted schedule.
pub fn polish_switch_times(
    protocol: &Protocol,
    noise: NoiseStrength,
) -> Result<(BangSchedule, f64)> {
    let schedule = BangSchedule::from_protocol(protocol);
    let x0 = schedule.flat();
    let cost_of = |x: &[f64]| match schedule.with_flat(x).protocol() {
        Ok(p) => protocol_cost(&p, noise),
        Err(_) => f64::INFINITY,
    };
    if x0.is_empty() {
        let c = cost_of(&x0);
        return Ok((schedule, c));
    }
    let lo = vec![0.0; x0.len()];
    let hi = vec![schedule.tau; x0.len()];
    let opts = SimplexOptions {
        max_evals: 400 * x0.len(),
        f_tol: 1e-15,
        x_tol: 1e-11,
        initial_step: 0.01,
        polish_passes: 3,
    };
    let m = minimize_box(cost_of, &x0, &lo, &hi, &opts);
    Ok((schedule.with_flat(&m.x), m.value))
}

/// Controls strictly inside `(0, 1)` by more than this are free variables
/// of [`polish_continuous`].
const INTERIOR: f64 = 1e-9;

/// The cost as a function of the interior controls, everything else held.
#[derive(Clone)]
struct InteriorCost {
    base: Protocol,
    free: Vec<(usize, usize)>,
    noise: NoiseStrength,
}

impl InteriorCost {
    fn new(base: Protocol, noise: NoiseStrength) -> Self {
        let free = base
            .controls()
            .enumerate()
            .flat_map(|(n, c)| {
                (0..3)
                    .filter(move |&j| c.get(j) > INTERIOR && c.get(j) < 1.0 - INTERIOR)
                    .map(move |j| (n, j))
            })
            .collect();
        InteriorCost { base, free, noise }
    }

    fn x0(&self) -> Vec<f64> {
        self.free
            .iter()
            .map(|&(n, j)| self.base.segments()[n].control.get(j))
            .collect()
    }

    fn build(&self, x: &[f64]) -> Protocol {
        let mut q = self.base.clone();
        for (&(n, j), &v) in self.free.iter().zip(x) {
            let mut c = q.segments()[n].control.as_array();
            c[j] = v;
            q.set_control(n, ControlVector::clamped(c));
        }
        q
    }
}

impl CostFunction for InteriorCost {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok(protocol_cost(&self.build(x), self.noise))
    }
}

impl Gradient for InteriorCost {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, x: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        let g = evaluate_switching(&self.build(x), self.noise)?.control_gradient();
        Ok(self.free.iter().map(|&(n, j)| g[n][j]).collect())
    }
}

/// Quasi-Newton descent on the controls that lie strictly inside `[0, 1]`,
/// restarted from the clamped result until a round stops improving.
///
/// With noise the continuous arcs are nearly flat directions of the cost
/// (curvature `∝ Δt W² Ḡ` per cell), where the blend of [`refine`] stalls
/// well before `Δ_j = Δ^d_j`. Returns the protocol and its cost, never
/// above the input's.
pub fn polish_continuous(
    protocol: &Protocol,
    noise: NoiseStrength,
    max_rounds: usize,
) -> Result<(Protocol, f64)> {
    let mut best = protocol.clone();
    let mut best_cost = protocol_cost(&best, noise);
    for _ in 0..max_rounds {
        let problem = InteriorCost::new(best.clone(), noise);
        if problem.free.is_empty() {
            break;
        }
        let x0 = problem.x0();
        let solver = LBFGS::new(MoreThuenteLineSearch::new(), 10)
            .with_tolerance_grad(0.0)
            .and_then(|s| s.with_tolerance_cost(0.0))
            .map_err(|e| Error::Numerical(e.to_string()))?;
        let run = Executor::new(problem.clone(), solver)
            .configure(|s| s.param(x0).max_iters(200))
            .run();
        // Line-search breakdowns end a round; the best point so far stands.
        let Ok(result) = run else { break };
        let state = result.state();
        let Some(x) = state.best_param.as_ref().or(state.param.as_ref()) else {
            break;
        };
        let candidate = problem.build(x);
        let cost = protocol_cost(&candidate, noise);
        if !(cost < best_cost) {
            break;
        }
        best = candidate;
        best_cost = cost;
    }
    Ok((best, best_cost))
}

/// Fraction of control values within `tol` of 0 or 1.
pub fn bang_fraction(protocol: &Protocol, tol: f64) -> f64 {
    let total = 3 * protocol.len();
    if total == 0 {
        return 1.0;
    }
    let bang = protocol
        .controls()
        .flat_map(|c| c.as_array())
        .filter(|v| v.abs() <= tol || (v - 1.0).abs() <= tol)
        .count();
    bang as f64 / total as f64
}

/// `Re tr(Π† X)`, the pairing used for `𝓗 = p · f`.
pub fn costate_pairing(pi: &Costate, x: &Mat4) -> f64 {
    real_pairing(&pi.0, x)
}

#[doc(hidden)]
pub fn complex_switching_reference(rho: &Mat4, pi: &Costate) -> Switching {
    // F_j = Re tr(Π† i[ρ, O_j]), G_j = Re tr(Π† (O_j ρ O_j − ρ)).
    let ops = basis_operators();
    let mut s = Switching::default();
    for j in 0..3 {
        let o = ops.get(j);
        let comm = (rho * o - o * rho) * c(0.0, 1.0);
        s.f[j] = costate_pairing(pi, &comm);
        s.g[j] = costate_pairing(pi, &(o * rho * o - rho));
    }
    s
}

//! The effective four-Majorana gate: basis operators, Hamiltonian, the
//! initial and target states, the braid unitary and protocol constructors.
//!
//! All matrices use the basis ordering `(|0⟩, d†|1⟩, |1⟩, d†|0⟩)`, where
//! `|1⟩ = c†|0⟩`, `c = (γ1 + iγ2)/2` and `d = (γ0 + iγ3)/2`. The first two
//! states carry even fermion parity, the last two odd parity.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{c, expm, Mat4, Vec4, I, ONE, ZERO};

/// Relative tolerance on `Σ durations = τ`.
pub const DURATION_RTOL: f64 = 1e-12;

/// Default time step of piecewise-constant grids.
pub const DEFAULT_DT: f64 = 0.02;

/// The control vector at the start and end of every cyclic protocol.
pub const ENDPOINT: [f64; 3] = [0.0, 0.0, 1.0];

/// The three Hermitian operators `O_j` representing `iγ0γj`.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisOperators {
    pub o1: Mat4,
    pub o2: Mat4,
    pub o3: Mat4,
}

impl BasisOperators {
    pub fn get(&self, j: usize) -> &Mat4 {
        match j {
            0 => &self.o1,
            1 => &self.o2,
            2 => &self.o3,
            _ => panic!("channel index {j} out of range"),
        }
    }

    pub fn as_array(&self) -> [&Mat4; 3] {
        [&self.o1, &self.o2, &self.o3]
    }
}

/// `O1 = 𝟙⊗σy`, `O2 = −σz⊗σx`, `O3 = −𝟙⊗σz`.
pub fn basis_operators() -> &'static BasisOperators {
    static OPS: OnceLock<BasisOperators> = OnceLock::new();
    OPS.get_or_init(|| {
        #[rustfmt::skip]
        let o1 = Mat4::new(
            ZERO, -I,   ZERO, ZERO,
            I,    ZERO, ZERO, ZERO,
            ZERO, ZERO, ZERO, -I,
            ZERO, ZERO, I,    ZERO,
        );
        #[rustfmt::skip]
        let o2 = Mat4::new(
            ZERO, -ONE, ZERO, ZERO,
            -ONE, ZERO, ZERO, ZERO,
            ZERO, ZERO, ZERO, ONE,
            ZERO, ZERO, ONE,  ZERO,
        );
        let o3 = Mat4::from_diagonal(&Vec4::new(-ONE, ONE, -ONE, ONE));
        BasisOperators { o1, o2, o3 }
    })
}

/// The fermion-parity operator `diag(1, 1, −1, −1)`.
pub fn parity_operator() -> Mat4 {
    Mat4::from_diagonal(&Vec4::new(ONE, ONE, -ONE, -ONE))
}

/// Hybridization energies `(Δ1, Δ2, Δ3)`, each in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlVector([f64; 3]);

impl ControlVector {
    /// `(0, 0, 1)`: leaves the initial state invariant.
    pub const STATIONARY: ControlVector = ControlVector(ENDPOINT);
    pub const OFF: ControlVector = ControlVector([0.0; 3]);

    pub fn new(delta: [f64; 3]) -> Result<Self> {
        for (j, d) in delta.iter().enumerate() {
            if !(0.0..=1.0).contains(d) {
                return Err(Error::domain(format!(
                    "control component Δ{} = {d} outside [0, 1]",
                    j + 1
                )));
            }
        }
        Ok(ControlVector(delta))
    }

    /// Clamps each component into `[0, 1]`. NaN maps to 0.
    pub fn clamped(delta: [f64; 3]) -> Self {
        ControlVector(delta.map(|d| if d.is_nan() { 0.0 } else { d.clamp(0.0, 1.0) }))
    }

    #[inline]
    pub fn get(&self, j: usize) -> f64 {
        self.0[j]
    }

    #[inline]
    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }

    pub fn max_abs_diff(&self, other: &ControlVector) -> f64 {
        (0..3)
            .map(|j| (self.0[j] - other.0[j]).abs())
            .fold(0.0, f64::max)
    }
}

/// Noise strength `W ≥ 0`; the master equation only sees `W²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseStrength(f64);

impl NoiseStrength {
    pub const NONE: NoiseStrength = NoiseStrength(0.0);

    pub fn new(w: f64) -> Result<Self> {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::domain(format!(
                "noise strength W = {w} must be finite and ≥ 0"
            )));
        }
        Ok(NoiseStrength(w))
    }

    pub fn w(&self) -> f64 {
        self.0
    }

    pub fn w2(&self) -> f64 {
        self.0 * self.0
    }
}

/// `H = Δ1 O1 + Δ2 O2 + Δ3 O3`.
pub fn hamiltonian(ctrl: &ControlVector) -> Mat4 {
    let ops = basis_operators();
    ops.o1.scale(ctrl.get(0)) + ops.o2.scale(ctrl.get(1)) + ops.o3.scale(ctrl.get(2))
}

/// `ρ0 = |ψ0⟩⟨ψ0|` with `ψ0 = (|0⟩ + |1⟩)/√2`.
pub fn initial_density() -> Mat4 {
    let mut rho = Mat4::zeros();
    for &(i, j) in &[(0, 0), (0, 2), (2, 0), (2, 2)] {
        rho[(i, j)] = c(0.5, 0.0);
    }
    rho
}

/// `σ = ½(|0⟩⟨0| − i|0⟩⟨1| + i|1⟩⟨0| + |1⟩⟨1|)`, the image of `ρ0` under
/// the ideal braid.
pub fn target_density() -> Mat4 {
    let mut sigma = Mat4::zeros();
    sigma[(0, 0)] = c(0.5, 0.0);
    sigma[(2, 2)] = c(0.5, 0.0);
    sigma[(0, 2)] = c(0.0, -0.5);
    sigma[(2, 0)] = c(0.0, 0.5);
    sigma
}

/// `exp((π/4) γ2γ1)`. In this basis `γ2γ1 = −i(1 − 2c†c)`, which is
/// diagonal with the `c`-occupation `(0, 1, 1, 0)`.
pub fn braid_unitary() -> Mat4 {
    let occupation = [0.0, 1.0, 1.0, 0.0];
    let g21 = Mat4::from_diagonal(&Vec4::from_iterator(
        occupation.iter().map(|n| c(0.0, -(1.0 - 2.0 * n))),
    ));
    expm(&g21.scale(std::f64::consts::FRAC_PI_4))
}

/// Initial and target density matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePair {
    pub rho0: Mat4,
    pub sigma: Mat4,
}

impl Default for StatePair {
    fn default() -> Self {
        StatePair {
            rho0: initial_density(),
            sigma: target_density(),
        }
    }
}

/// One piecewise-constant piece of a protocol.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub duration: f64,
    pub control: ControlVector,
}

/// A time-ordered list of constant-control segments.
///
/// The cyclic endpoint condition `Δ(0) = Δ(τ) = (0, 0, 1)` is carried as
/// metadata only: endpoints are measure-zero for the cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    segments: Vec<Segment>,
    total_time: f64,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Number of uniform cells of width close to `dt` that tile `tau`.
pub fn grid_len(tau: f64, dt: f64) -> usize {
    ((tau / dt).round() as usize).max(1)
}

impl Protocol {
    pub fn new(segments: Vec<Segment>, total_time: f64) -> Result<Self> {
        if !(total_time >= 0.0) || !total_time.is_finite() {
            return Err(Error::domain(format!(
                "total time {total_time} must be finite and ≥ 0"
            )));
        }
        for (n, s) in segments.iter().enumerate() {
            if !(s.duration > 0.0) || !s.duration.is_finite() {
                return Err(Error::domain(format!(
                    "segment {n} has non-positive duration {}",
                    s.duration
                )));
            }
            ControlVector::new(s.control.as_array())?;
        }
        let sum: f64 = segments.iter().map(|s| s.duration).sum();
        if (sum - total_time).abs() > DURATION_RTOL * total_time.max(f64::MIN_POSITIVE) {
            if !(segments.is_empty() && total_time == 0.0) {
                return Err(Error::domain(format!(
                    "segment durations sum to {sum}, expected total time {total_time}"
                )));
            }
        }
        Ok(Protocol {
            segments,
            total_time,
            metadata: BTreeMap::new(),
        })
    }

    /// Builds a protocol whose total time is the sum of its durations.
    pub fn from_segments(segments: Vec<Segment>) -> Result<Self> {
        let tau = segments.iter().map(|s| s.duration).sum();
        Protocol::new(segments, tau)
    }

    /// A uniform grid: `controls.len()` cells of width `tau / len`.
    pub fn uniform(tau: f64, controls: Vec<ControlVector>) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::domain("uniform protocol needs at least one cell"));
        }
        if !(tau > 0.0) {
            return Err(Error::domain(format!("total time {tau} must be > 0")));
        }
        let dt = tau / controls.len() as f64;
        let segments = controls
            .into_iter()
            .map(|control| Segment {
                duration: dt,
                control,
            })
            .collect();
        Protocol::new(segments, tau)
    }

    /// A uniform grid sampled from `f` at cell midpoints.
    pub fn sample_grid(tau: f64, dt: f64, f: impl Fn(f64) -> ControlVector) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::domain(format!("time step {dt} must be > 0")));
        }
        let n = grid_len(tau, dt);
        let h = tau / n as f64;
        Protocol::uniform(tau, (0..n).map(|k| f((k as f64 + 0.5) * h)).collect())
    }

    /// The stationary protocol `Δ ≡ (0, 0, 1)` on a uniform grid.
    pub fn stationary(tau: f64, dt: f64) -> Result<Self> {
        Protocol::sample_grid(tau, dt, |_| ControlVector::STATIONARY)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_time(&self) -> f64 {
        self.total_time
    }

    pub fn controls(&self) -> impl Iterator<Item = ControlVector> + '_ {
        self.segments.iter().map(|s| s.control)
    }

    /// Segment boundary times `t_0 = 0, …, t_N = τ`.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.segments.len() + 1);
        let mut t = 0.0;
        out.push(t);
        for s in &self.segments {
            t += s.duration;
            out.push(t);
        }
        if let Some(last) = out.last_mut() {
            *last = self.total_time;
        }
        out
    }

    /// True when every segment has the same duration (to 1e-12 relative).
    pub fn is_uniform(&self) -> bool {
        match self.segments.first() {
            None => true,
            Some(first) => self
                .segments
                .iter()
                .all(|s| (s.duration - first.duration).abs() <= 1e-12 * first.duration),
        }
    }

    /// Replaces one segment's control.
    pub fn set_control(&mut self, index: usize, control: ControlVector) {
        self.segments[index].control = control;
    }

    /// Control in effect at time `t` (right-continuous; `t = τ` maps to the
    /// last segment).
    pub fn control_at(&self, t: f64) -> ControlVector {
        let mut acc = 0.0;
        for s in &self.segments {
            acc += s.duration;
            if t < acc {
                return s.control;
            }
        }
        self.segments
            .last()
            .map(|s| s.control)
            .unwrap_or(ControlVector::STATIONARY)
    }

    /// Number of control changes in each channel between consecutive
    /// segments.
    pub fn switch_counts(&self, tol: f64) -> [usize; 3] {
        let mut counts = [0; 3];
        for w in self.segments.windows(2) {
            for (j, count) in counts.iter_mut().enumerate() {
                if (w[0].control.get(j) - w[1].control.get(j)).abs() > tol {
                    *count += 1;
                }
            }
        }
        counts
    }

    /// Prepends a stationary segment of length `extra`. Because `(0, 0, 1)`
    /// leaves `ρ0` invariant, the final state and cost are unchanged.
    pub fn with_stationary_prefix(&self, extra: f64) -> Result<Protocol> {
        if extra <= 0.0 {
            return Ok(self.clone());
        }
        let mut segments = Vec::with_capacity(self.segments.len() + 1);
        segments.push(Segment {
            duration: extra,
            control: ControlVector::STATIONARY,
        });
        segments.extend_from_slice(&self.segments);
        let mut p = Protocol::new(segments, self.total_time + extra)?;
        p.metadata = self.metadata.clone();
        Ok(p)
    }

    /// Dilates time to `tau` and scales every control by `T / tau`. Each
    /// segment keeps the same `∫H dt`, so the noiseless final state is
    /// unchanged while the dephasing dose `W² ∫Δ² dt` shrinks by `T / tau`.
    pub fn stretched(&self, tau: f64) -> Result<Protocol> {
        if !(tau >= self.total_time) || !tau.is_finite() {
            return Err(Error::domain(format!(
                "cannot stretch a protocol of length {} to {tau}",
                self.total_time
            )));
        }
        let s = self.total_time / tau;
        let segments = self
            .segments
            .iter()
            .map(|seg| Segment {
                duration: seg.duration / s,
                control: ControlVector::clamped(seg.control.as_array().map(|v| v * s)),
            })
            .collect();
        let mut p = Protocol::new(segments, tau)?;
        p.metadata = self.metadata.clone();
        Ok(p)
    }

    /// Splits every segment into equal pieces no longer than `max_dt`.
    /// Controls and switch times are unchanged, so the final state is too.
    pub fn subdivided(&self, max_dt: f64) -> Result<Protocol> {
        if !(max_dt > 0.0) {
            return Err(Error::domain(format!(
                "subdivision step {max_dt} must be > 0"
            )));
        }
        let mut segments = Vec::new();
        for seg in &self.segments {
            let pieces = (seg.duration / max_dt).ceil().max(1.0) as usize;
            segments.extend(
                std::iter::repeat(Segment {
                    duration: seg.duration / pieces as f64,
                    control: seg.control,
                })
                .take(pieces),
            );
        }
        let mut p = Protocol::new(segments, self.total_time)?;
        p.metadata = self.metadata.clone();
        Ok(p)
    }

    /// Cell-averages the protocol onto a uniform grid of width close to
    /// `dt`.
    pub fn resample(&self, dt: f64) -> Result<Protocol> {
        let tau = self.total_time;
        if !(tau > 0.0) {
            return Err(Error::domain("cannot resample an empty protocol"));
        }
        let n = grid_len(tau, dt);
        let h = tau / n as f64;
        let bounds = self.boundaries();
        let mut controls = Vec::with_capacity(n);
        let mut seg = 0;
        for k in 0..n {
            let (a, b) = (
                k as f64 * h,
                if k + 1 == n { tau } else { (k + 1) as f64 * h },
            );
            let mut acc = [0.0; 3];
            while seg + 1 < bounds.len() - 1 && bounds[seg + 1] <= a {
                seg += 1;
            }
            let mut s = seg;
            while s < self.segments.len() && bounds[s] < b {
                let overlap = bounds[s + 1].min(b) - bounds[s].max(a);
                if overlap > 0.0 {
                    for (j, v) in acc.iter_mut().enumerate() {
                        *v += overlap * self.segments[s].control.get(j);
                    }
                }
                s += 1;
            }
            controls.push(ControlVector::clamped(acc.map(|v| v / (b - a))));
        }
        let mut p = Protocol::uniform(tau, controls)?;
        p.metadata = self.metadata.clone();
        Ok(p)
    }

    /// Hash of the durations and controls, used to detect stale caches.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.total_time.to_bits().hash(&mut h);
        for s in &self.segments {
            s.duration.to_bits().hash(&mut h);
            for d in s.control.as_array() {
                d.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// The standard adiabatic cycle `(0,0,1) → (1,0,0) → (0,1,0) → (0,0,1)`
/// with linear ramps of length `τ/3`, sampled at cell midpoints.
pub fn linear_adiabatic_protocol(tau: f64, dt: f64) -> Result<Protocol> {
    if !(tau > 0.0) {
        return Err(Error::domain(format!("total time {tau} must be > 0")));
    }
    if !(dt > 0.0 && dt <= tau / 3.0) {
        return Err(Error::domain(format!(
            "time step {dt} must lie in (0, τ/3]"
        )));
    }
    Protocol::sample_grid(tau, dt, |t| linear_ramp(t, tau))
}

/// Exact value of the linear adiabatic ramp at time `t`.
pub fn linear_ramp(t: f64, tau: f64) -> ControlVector {
    let x = (3.0 * t / tau).clamp(0.0, 3.0);
    let leg = (x.floor() as usize).min(2);
    let s = x - leg as f64;
    let d = match leg {
        0 => [s, 0.0, 1.0 - s],
        1 => [1.0 - s, s, 0.0],
        _ => [0.0, 1.0 - s, s],
    };
    ControlVector::clamped(d)
}

/// Uniform grid with every control component drawn i.i.d. from `U[0, 1)`.
pub fn random_protocol(tau: f64, dt: f64, seed: u64) -> Result<Protocol> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_protocol_with(tau, dt, &mut rng)
}

pub fn random_protocol_with(tau: f64, dt: f64, rng: &mut impl Rng) -> Result<Protocol> {
    if !(tau > 0.0 && dt > 0.0) {
        return Err(Error::domain("random protocol needs τ > 0 and Δt > 0"));
    }
    let n = grid_len(tau, dt);
    let controls = (0..n)
        .map(|_| ControlVector::clamped([rng.gen(), rng.gen(), rng.gen()]))
        .collect();
    Protocol::uniform(tau, controls)
}

/// Exact-segment bang-bang protocol from six switch times: `Δ1 = 1` on
/// `[t1, t2]`, `Δ2 = 1` on `[t3, t4]`, `Δ3 = 0` on `[t5, t6]`, and the
/// complementary extremal value elsewhere.
pub fn bangbang_protocol(times: &[f64; 6], tau: f64) -> Result<Protocol> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::domain(format!(
            "total time {tau} must be finite and ≥ 0"
        )));
    }
    for (k, &t) in times.iter().enumerate() {
        if !(0.0..=tau).contains(&t) {
            return Err(Error::domain(format!(
                "switch time t{} = {t} outside [0, {tau}]",
                k + 1
            )));
        }
    }
    for ch in 0..3 {
        if times[2 * ch] > times[2 * ch + 1] {
            return Err(Error::domain(format!(
                "switch times t{} = {} > t{} = {} in channel {}",
                2 * ch + 1,
                times[2 * ch],
                2 * ch + 2,
                times[2 * ch + 1],
                ch + 1
            )));
        }
    }
    if tau == 0.0 {
        return Protocol::new(Vec::new(), 0.0);
    }
    let mut cuts: Vec<f64> = times.to_vec();
    cuts.push(0.0);
    cuts.push(tau);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let inside = |lo: f64, hi: f64, m: f64| lo < m && m < hi;
    let mut segments = Vec::with_capacity(cuts.len());
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let m = 0.5 * (a + b);
        let d1 = if inside(times[0], times[1], m) {
            1.0
        } else {
            0.0
        };
        let d2 = if inside(times[2], times[3], m) {
            1.0
        } else {
            0.0
        };
        let d3 = if inside(times[4], times[5], m) {
            0.0
        } else {
            1.0
        };
        segments.push(Segment {
            duration: b - a,
            control: ControlVector([d1, d2, d3]),
        });
    }
    // Merge neighbours with identical controls so the switch count is
    // exactly what the ansatz describes.
    let mut merged: Vec<Segment> = Vec::with_capacity(segments.len());
    for s in segments {
        match merged.last_mut() {
            Some(last) if last.control == s.control => last.duration += s.duration,
            _ => merged.push(s),
        }
    }
    let mut p = Protocol::new(merged, tau)?;
    p.metadata.insert(
        "bangbang_times".into(),
        serde_json::Value::from(times.to_vec()),
    );
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;

    #[test]
    fn basis_operator_structure() {
        let ops = basis_operators();
        for (j, o) in ops.as_array().iter().enumerate() {
            assert_eq!(o.adjoint(), **o, "O{} Hermitian", j + 1);
            assert!(max_abs(&(*o * *o - Mat4::identity())) == 0.0);
            for r in 0..2 {
                for col in 2..4 {
                    assert_eq!(o[(r, col)], ZERO);
                    assert_eq!(o[(col, r)], ZERO);
                }
            }
        }
        assert!(ops.o1.iter().all(|z| z.re == 0.0));
        assert!(ops.o2.iter().all(|z| z.im == 0.0));
        assert!(ops.o3.iter().all(|z| z.im == 0.0));
        let d: Vec<f64> = (0..4).map(|i| ops.o3[(i, i)].re).collect();
        assert_eq!(d, vec![-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn hamiltonian_linear_and_parity_preserving() {
        assert_eq!(hamiltonian(&ControlVector::OFF), Mat4::zeros());
        assert_eq!(
            hamiltonian(&ControlVector::STATIONARY),
            basis_operators().o3
        );
        let ctrl = ControlVector::new([0.3, 0.7, 0.2]).unwrap();
        let half = ControlVector::new([0.15, 0.35, 0.1]).unwrap();
        assert!(max_abs(&(hamiltonian(&half).scale(2.0) - hamiltonian(&ctrl))) < 1e-15);
        let h = hamiltonian(&ctrl);
        let p = parity_operator();
        assert_eq!(h * p - p * h, Mat4::zeros());
    }

    #[test]
    fn out_of_bounds_controls_rejected() {
        assert!(ControlVector::new([1.1, 0.0, 0.0]).is_err());
        assert!(ControlVector::new([0.0, -1e-9, 0.0]).is_err());
        assert!(ControlVector::new([0.0, f64::NAN, 0.0]).is_err());
        assert!(NoiseStrength::new(-0.1).is_err());
    }

    #[test]
    fn states_are_pure_with_equal_diagonals() {
        let rho = initial_density();
        let sigma = target_density();
        for m in [&rho, &sigma] {
            assert_eq!(m.trace(), ONE);
            assert!(((m * m).trace() - ONE).norm() < 1e-15);
            assert_eq!(m.adjoint(), *m);
        }
        assert_eq!(sigma[(0, 2)], c(0.0, -0.5));
        for i in 0..4 {
            assert_eq!(rho[(i, i)], sigma[(i, i)]);
        }
    }

    #[test]
    fn braid_unitary_maps_rho0_to_sigma() {
        let u = braid_unitary();
        assert!(max_abs(&(u.adjoint() * u - Mat4::identity())) < 1e-15);
        assert!((u[(0, 0)].norm() - 1.0).abs() < 1e-15);
        assert!((u[(2, 2)] / u[(0, 0)] - I).norm() < 1e-15);
        let image = u * initial_density() * u.adjoint();
        assert!(max_abs(&(image - target_density())) < 1e-15);
    }

    #[test]
    fn linear_protocol_shape() {
        let tau = 3.0;
        let p = linear_adiabatic_protocol(tau, 0.01).unwrap();
        assert!((p.segments().iter().map(|s| s.duration).sum::<f64>() - tau).abs() < 1e-12);
        let mid = linear_ramp(tau / 6.0, tau).as_array();
        assert!((mid[0] - 0.5).abs() < 1e-15 && mid[1] == 0.0 && (mid[2] - 0.5).abs() < 1e-15);
        let first = p.segments()[0].control.as_array();
        let last = p.segments().last().unwrap().control.as_array();
        for (a, b) in first.iter().zip(ENDPOINT.iter()) {
            assert!((a - b).abs() < 0.01);
        }
        for (a, b) in last.iter().zip(ENDPOINT.iter()) {
            assert!((a - b).abs() < 0.01);
        }
        assert!(linear_adiabatic_protocol(1.0, 0.5).is_err());
        assert!(linear_adiabatic_protocol(0.0, 0.01).is_err());
    }

    #[test]
    fn random_protocol_is_seeded() {
        let a = random_protocol(1.0, 0.02, 42).unwrap();
        let b = random_protocol(1.0, 0.02, 42).unwrap();
        let c2 = random_protocol(1.0, 0.02, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c2);
        assert_eq!(a.len(), 50);
        assert!(a
            .controls()
            .all(|c| c.as_array().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn bangbang_constructor() {
        let p = bangbang_protocol(&[0.5, 0.5, 1.0, 1.0, 0.2, 0.2], 2.0).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.segments()[0].control, ControlVector::STATIONARY);

        let times = [0.3, 1.1, 0.9, 1.7, 0.2, 1.9];
        let p = bangbang_protocol(&times, 2.0).unwrap();
        let total: f64 = p.segments().iter().map(|s| s.duration).sum();
        assert!((total - 2.0).abs() < 1e-12);
        assert!(p.switch_counts(0.5).iter().all(|&n| n <= 2));
        assert_eq!(p.control_at(0.5).as_array(), [1.0, 0.0, 0.0]);
        assert_eq!(p.control_at(1.0).as_array(), [1.0, 1.0, 0.0]);
        assert_eq!(p.control_at(1.95).as_array(), [0.0, 0.0, 1.0]);

        assert!(bangbang_protocol(&[1.0, 0.5, 0.0, 0.0, 0.0, 0.0], 2.0).is_err());
        assert!(bangbang_protocol(&[0.0, 2.5, 0.0, 0.0, 0.0, 0.0], 2.0).is_err());
    }

    #[test]
    fn stretching_keeps_the_noiseless_cost_and_shrinks_the_dose() {
        use crate::propagator::protocol_cost;
        let p = bangbang_protocol(&[0.1, 1.3, 0.4, 1.7, 0.2, 1.1], 2.0).unwrap();
        let q = p.stretched(5.0).unwrap();
        assert_eq!(q.total_time(), 5.0);
        let zero = NoiseStrength::new(0.0).unwrap();
        assert!((protocol_cost(&p, zero) - protocol_cost(&q, zero)).abs() < 1e-12);
        let dose = |p: &Protocol| -> f64 {
            p.segments()
                .iter()
                .map(|s| s.duration * s.control.as_array().iter().map(|d| d * d).sum::<f64>())
                .sum()
        };
        assert!((dose(&q) - 0.4 * dose(&p)).abs() < 1e-12);
        assert!(p.stretched(1.0).is_err());
    }

    #[test]
    fn subdivision_keeps_switch_times() {
        use crate::propagator::protocol_cost;
        let p = bangbang_protocol(&[0.1, 1.3, 0.4, 1.7, 0.2, 1.1], 2.0).unwrap();
        let q = p.subdivided(0.01).unwrap();
        assert!(q.segments().iter().all(|s| s.duration <= 0.01 + 1e-15));
        assert_eq!(q.switch_counts(0.5), p.switch_counts(0.5));
        let noise = NoiseStrength::new(0.2).unwrap();
        assert!((protocol_cost(&p, noise) - protocol_cost(&q, noise)).abs() < 1e-12);
    }

    #[test]
    fn resample_preserves_cell_averages() {
        let p = bangbang_protocol(&[0.25, 0.75, 0.0, 0.0, 0.0, 0.0], 1.0).unwrap();
        let g = p.resample(0.1).unwrap();
        assert_eq!(g.len(), 10);
        assert!(g.is_uniform());
        let expected = [0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 1.0, 0.5, 0.0, 0.0];
        for (s, e) in g.segments().iter().zip(expected) {
            assert!((s.control.get(0) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn protocol_validation() {
        let seg = Segment {
            duration: 0.5,
            control: ControlVector::OFF,
        };
        assert!(Protocol::new(vec![seg, seg], 1.0).is_ok());
        assert!(Protocol::new(vec![seg, seg], 1.1).is_err());
        assert!(Protocol::new(
            vec![Segment {
                duration: 0.0,
                control: ControlVector::OFF
            }],
            0.0
        )
        .is_err());
        assert!(Protocol::new(Vec::new(), 0.0).is_ok());
    }
}

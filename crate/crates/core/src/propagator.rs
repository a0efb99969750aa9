//! Noise-averaged master equation: the 16×16 generator, piecewise-constant
//! propagation of density matrices (forward) and costates (backward), and
//! the incremental cache used by the annealer.
//!
//! Vectorization is column stacking. Because the Hamiltonian and the jump
//! operators are block-diagonal in fermion parity, the generator never
//! mixes the four 2×2 parity blocks of a 4×4 matrix. Propagation therefore
//! runs on four independent 4-dimensional sectors; the dense 16×16
//! [`Superoperator`] is kept as the reference form of the same map.

use std::io::Write;
use std::sync::OnceLock;

use crate::cost::trace_distance;
use crate::error::{Error, Result};
use crate::linalg::{c, expm, kron4, Mat16, Mat2, Mat4, Vec4, C64, ONE, ZERO};
use crate::model::{basis_operators, ControlVector, NoiseStrength, Protocol, StatePair};

/// Dense generator `K(W², Δ)` of `∂t vec(ρ) = K vec(ρ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Superoperator {
    pub matrix: Mat16,
    pub control: ControlVector,
    pub w2: f64,
}

/// Generator of `∂t ρ = Σ_j { iΔ_j[ρ, O_j] − (W²/2) Δ_j² [[ρ, O_j], O_j] }`.
pub fn generator(ctrl: &ControlVector, w2: f64) -> Result<Superoperator> {
    if !(w2 >= 0.0) {
        return Err(Error::domain(format!("W² = {w2} must be ≥ 0")));
    }
    Ok(Superoperator {
        matrix: dense_generator(ctrl, w2),
        control: *ctrl,
        w2,
    })
}

/// Same as [`generator`] but with a signed noise coefficient; the costate
/// obeys the equation with `W² → −W²`.
pub(crate) fn dense_generator(ctrl: &ControlVector, w2_signed: f64) -> Mat16 {
    let id4 = Mat4::identity();
    let id16 = Mat16::identity();
    let mut k = Mat16::zeros();
    for (j, o) in basis_operators().as_array().into_iter().enumerate() {
        let d = ctrl.get(j);
        if d == 0.0 {
            continue;
        }
        // [[ρ,O],O] = 2(ρ − OρO) because O² = 𝟙.
        let comm = kron4(&o.transpose(), &id4) - kron4(&id4, o);
        let diss = id16 - kron4(&o.transpose(), o);
        k += comm * c(0.0, d) - diss.scale(w2_signed * d * d);
    }
    k
}

impl Superoperator {
    pub fn apply(&self, rho: &Mat4) -> Mat4 {
        crate::linalg::unvec4x4(&(self.matrix * crate::linalg::vec4x4(rho)))
    }

    pub fn exp(&self, dt: f64) -> Mat16 {
        expm(&self.matrix.scale(dt))
    }
}

/// Sector order: (even, even), (odd, even), (even, odd), (odd, odd) as
/// (row parity, column parity).
const SECTORS: [(usize, usize); 4] = [(0, 0), (2, 0), (0, 2), (2, 2)];

struct SectorTables {
    comm: [[Mat4; 3]; 4],
    diss: [[Mat4; 3]; 4],
}

fn kron2(a: &Mat2, b: &Mat2) -> Mat4 {
    Mat4::from_fn(|r, col| a[(r / 2, col / 2)] * b[(r % 2, col % 2)])
}

fn tables() -> &'static SectorTables {
    static T: OnceLock<SectorTables> = OnceLock::new();
    T.get_or_init(|| {
        let ops = basis_operators();
        let id2 = Mat2::identity();
        let id4 = Mat4::identity();
        let mut comm = [[Mat4::zeros(); 3]; 4];
        let mut diss = [[Mat4::zeros(); 3]; 4];
        for (s, &(ra, cb)) in SECTORS.iter().enumerate() {
            for (j, o) in ops.as_array().into_iter().enumerate() {
                let oa: Mat2 = o.fixed_view::<2, 2>(ra, ra).into_owned();
                let ob: Mat2 = o.fixed_view::<2, 2>(cb, cb).into_owned();
                comm[s][j] = (kron2(&ob.transpose(), &id2) - kron2(&id2, &oa)) * c(0.0, 1.0);
                diss[s][j] = -(id4 - kron2(&ob.transpose(), &oa));
            }
        }
        SectorTables { comm, diss }
    })
}

/// A 4×4 matrix split into its four vectorized 2×2 parity blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SectorState {
    pub blocks: [Vec4; 4],
}

impl SectorState {
    pub fn from_matrix(m: &Mat4) -> Self {
        let mut blocks = [Vec4::zeros(); 4];
        for (s, &(ra, cb)) in SECTORS.iter().enumerate() {
            blocks[s] = Vec4::new(
                m[(ra, cb)],
                m[(ra + 1, cb)],
                m[(ra, cb + 1)],
                m[(ra + 1, cb + 1)],
            );
        }
        SectorState { blocks }
    }

    pub fn to_matrix(&self) -> Mat4 {
        let mut m = Mat4::zeros();
        for (s, &(ra, cb)) in SECTORS.iter().enumerate() {
            let b = &self.blocks[s];
            m[(ra, cb)] = b[0];
            m[(ra + 1, cb)] = b[1];
            m[(ra, cb + 1)] = b[2];
            m[(ra + 1, cb + 1)] = b[3];
        }
        m
    }
}

/// Block-diagonal form of the generator, one 4×4 block per sector.
#[derive(Clone, Copy, Debug)]
pub struct SectorGenerator {
    pub blocks: [Mat4; 4],
}

impl SectorGenerator {
    /// `w2_signed` is `W²` for density matrices and `−W²` for costates.
    pub fn new(ctrl: &ControlVector, w2_signed: f64) -> Self {
        let t = tables();
        let mut blocks = [Mat4::zeros(); 4];
        for (s, block) in blocks.iter_mut().enumerate() {
            for j in 0..3 {
                let d = ctrl.get(j);
                if d != 0.0 {
                    *block += t.comm[s][j].scale(d) + t.diss[s][j].scale(w2_signed * d * d);
                }
            }
        }
        SectorGenerator { blocks }
    }

    pub fn apply(&self, x: &SectorState) -> SectorState {
        SectorState {
            blocks: std::array::from_fn(|s| self.blocks[s] * x.blocks[s]),
        }
    }

    pub fn exp(&self, t: f64) -> SectorPropagator {
        SectorPropagator {
            blocks: std::array::from_fn(|s| expm(&self.blocks[s].scale(t))),
        }
    }
}

/// `exp(K t)` in sector form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SectorPropagator {
    pub blocks: [Mat4; 4],
}

impl SectorPropagator {
    pub fn identity() -> Self {
        SectorPropagator {
            blocks: [Mat4::identity(); 4],
        }
    }

    #[inline]
    pub fn apply(&self, x: &SectorState) -> SectorState {
        SectorState {
            blocks: std::array::from_fn(|s| self.blocks[s] * x.blocks[s]),
        }
    }

    /// `self · first`: apply `first`, then `self`.
    #[inline]
    pub fn after(&self, first: &SectorPropagator) -> SectorPropagator {
        SectorPropagator {
            blocks: std::array::from_fn(|s| self.blocks[s] * first.blocks[s]),
        }
    }
}

/// One forward step `ρ ↦ exp(K dt) ρ`.
pub fn step(rho: &Mat4, ctrl: &ControlVector, w2: f64, dt: f64) -> Result<Mat4> {
    if !(w2 >= 0.0) {
        return Err(Error::domain(format!("W² = {w2} must be ≥ 0")));
    }
    if !(dt > 0.0) {
        return Err(Error::domain(format!("time step {dt} must be > 0")));
    }
    let prop = SectorGenerator::new(ctrl, w2).exp(dt);
    Ok(prop.apply(&SectorState::from_matrix(rho)).to_matrix())
}

/// Matrices at the segment boundaries of a protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Mat4>,
}

impl Trajectory {
    /// CSV with columns `t`, 16 real parts and 16 imaginary parts of the
    /// column-stacked matrix, every `stride`-th boundary (the last one is
    /// always written).
    pub fn write_csv<W: Write>(&self, out: W, stride: usize) -> Result<()> {
        let stride = stride.max(1);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        for part in ["re", "im"] {
            for col in 1..=4 {
                for row in 1..=4 {
                    header.push(format!("{part}_{row}{col}"));
                }
            }
        }
        w.write_record(&header).map_err(csv_err)?;
        let last = self.states.len().saturating_sub(1);
        for (k, (t, m)) in self.times.iter().zip(&self.states).enumerate() {
            if k % stride != 0 && k != last {
                continue;
            }
            let mut rec = Vec::with_capacity(33);
            rec.push(crate::io::fmt_f64(*t));
            rec.extend(m.iter().map(|z| crate::io::fmt_f64(z.re)));
            rec.extend(m.iter().map(|z| crate::io::fmt_f64(z.im)));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Numerical(format!("csv: {other:?}")),
    }
}

/// Per-segment forward propagators for a protocol.
pub fn segment_propagators(protocol: &Protocol, w2: f64) -> Vec<SectorPropagator> {
    protocol
        .segments()
        .iter()
        .map(|s| SectorGenerator::new(&s.control, w2).exp(s.duration))
        .collect()
}

/// `ρ(τ) = e^{K_N Δt_N} ⋯ e^{K_1 Δt_1} ρ0`, optionally keeping the states
/// at every segment boundary.
pub fn propagate(
    protocol: &Protocol,
    noise: NoiseStrength,
    rho0: &Mat4,
    keep_trajectory: bool,
) -> (Mat4, Option<Trajectory>) {
    let w2 = noise.w2();
    let mut x = SectorState::from_matrix(rho0);
    let mut states = Vec::new();
    if keep_trajectory {
        states.reserve(protocol.len() + 1);
        states.push(*rho0);
    }
    for s in protocol.segments() {
        x = SectorGenerator::new(&s.control, w2)
            .exp(s.duration)
            .apply(&x);
        if keep_trajectory {
            states.push(x.to_matrix());
        }
    }
    let final_state = x.to_matrix();
    let traj = keep_trajectory.then(|| Trajectory {
        times: protocol.boundaries(),
        states,
    });
    (final_state, traj)
}

/// Backward costate propagation `Π(t_n) = e^{−K_{n+1}(−W²) Δt} Π(t_{n+1})`
/// from `Π(τ)` down to `t = 0`. The returned trajectory is in forward time
/// order.
pub fn propagate_costate(protocol: &Protocol, noise: NoiseStrength, pi_tau: &Mat4) -> Trajectory {
    let w2 = noise.w2();
    let n = protocol.len();
    let mut states = vec![Mat4::zeros(); n + 1];
    states[n] = *pi_tau;
    let mut x = SectorState::from_matrix(pi_tau);
    for (k, s) in protocol.segments().iter().enumerate().rev() {
        x = SectorGenerator::new(&s.control, -w2)
            .exp(-s.duration)
            .apply(&x);
        states[k] = x.to_matrix();
    }
    Trajectory {
        times: protocol.boundaries(),
        states,
    }
}

/// Trace distance between the target and the final state.
pub fn protocol_cost(protocol: &Protocol, noise: NoiseStrength) -> f64 {
    let pair = StatePair::default();
    let (rho, _) = propagate(protocol, noise, &pair.rho0, false);
    trace_distance(&pair.sigma, &rho)
}

/// A pending single-segment edit evaluated against a [`PropagationCache`].
#[derive(Clone, Copy, Debug)]
pub struct Trial {
    pub index: usize,
    pub control: ControlVector,
    pub cost: f64,
    propagator: SectorPropagator,
}

/// Incremental evaluation of single-segment edits.
///
/// Holds the per-segment propagators `E_n`, prefix states
/// `ρ_n = E_{n-1} ⋯ E_0 ρ0` and suffix products `S_n = E_{N-1} ⋯ E_n`, so the
/// cost after replacing segment `n` is `C(S_{n+1} E'_n ρ_n)`: one fresh
/// exponential and two sector products. Prefix and suffix entries are
/// revalidated lazily after an accepted edit.
#[derive(Clone, Debug)]
pub struct PropagationCache {
    protocol: Protocol,
    fingerprint: u64,
    w2: f64,
    sigma: Mat4,
    exps: Vec<SectorPropagator>,
    prefix: Vec<SectorState>,
    suffix: Vec<SectorPropagator>,
    /// `prefix[..=prefix_valid]` is current.
    prefix_valid: usize,
    /// `suffix[suffix_valid..]` is current.
    suffix_valid: usize,
    cost: f64,
    commits_since_rebuild: usize,
}

/// Accepted edits between full rebuilds.
pub const CACHE_REBUILD_INTERVAL: usize = 100;

impl PropagationCache {
    pub fn new(protocol: Protocol, noise: NoiseStrength) -> Self {
        let pair = StatePair::default();
        let n = protocol.len();
        let mut cache = PropagationCache {
            fingerprint: protocol.fingerprint(),
            w2: noise.w2(),
            sigma: pair.sigma,
            exps: Vec::new(),
            prefix: vec![SectorState::from_matrix(&pair.rho0); n + 1],
            suffix: vec![SectorPropagator::identity(); n + 1],
            prefix_valid: 0,
            suffix_valid: n,
            cost: f64::NAN,
            commits_since_rebuild: 0,
            protocol,
        };
        cache.rebuild();
        cache
    }

    /// Recomputes every exponential, prefix state and suffix product from
    /// scratch.
    pub fn rebuild(&mut self) {
        let n = self.protocol.len();
        self.exps = segment_propagators(&self.protocol, self.w2);
        for k in 0..n {
            self.prefix[k + 1] = self.exps[k].apply(&self.prefix[k]);
        }
        self.suffix[n] = SectorPropagator::identity();
        for k in (0..n).rev() {
            self.suffix[k] = self.suffix[k + 1].after(&self.exps[k]);
        }
        self.prefix_valid = n;
        self.suffix_valid = 0;
        self.fingerprint = self.protocol.fingerprint();
        self.cost = trace_distance(&self.sigma, &self.prefix[n].to_matrix());
        self.commits_since_rebuild = 0;
    }

    pub fn protocol(&self) -> &Protocol {
        &self.protocol
    }

    pub fn into_protocol(self) -> Protocol {
        self.protocol
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    pub fn final_state(&mut self) -> Mat4 {
        let n = self.protocol.len();
        self.extend_prefix(n);
        self.prefix[n].to_matrix()
    }

    fn extend_prefix(&mut self, upto: usize) {
        while self.prefix_valid < upto {
            let k = self.prefix_valid;
            self.prefix[k + 1] = self.exps[k].apply(&self.prefix[k]);
            self.prefix_valid += 1;
        }
    }

    fn extend_suffix(&mut self, downto: usize) {
        while self.suffix_valid > downto {
            let k = self.suffix_valid - 1;
            self.suffix[k] = self.suffix[k + 1].after(&self.exps[k]);
            self.suffix_valid -= 1;
        }
    }

    /// Cost after replacing segment `index`'s control, without committing.
    pub fn trial(&mut self, index: usize, control: ControlVector) -> Trial {
        let seg = self.protocol.segments()[index];
        if seg.control == control {
            return Trial {
                index,
                control,
                cost: self.cost,
                propagator: self.exps[index],
            };
        }
        self.extend_prefix(index);
        self.extend_suffix(index + 1);
        let prop = SectorGenerator::new(&control, self.w2).exp(seg.duration);
        let x = self.suffix[index + 1].apply(&prop.apply(&self.prefix[index]));
        Trial {
            index,
            control,
            cost: trace_distance(&self.sigma, &x.to_matrix()),
            propagator: prop,
        }
    }

    /// Applies an edit previously evaluated with [`trial`](Self::trial).
    pub fn commit(&mut self, trial: Trial) {
        let n = trial.index;
        self.protocol.set_control(n, trial.control);
        self.exps[n] = trial.propagator;
        self.prefix_valid = self.prefix_valid.min(n);
        self.suffix_valid = self.suffix_valid.max(n + 1);
        self.cost = trial.cost;
        self.commits_since_rebuild += 1;
        if self.commits_since_rebuild >= CACHE_REBUILD_INTERVAL {
            self.rebuild();
        } else {
            self.fingerprint = self.protocol.fingerprint();
        }
    }

    /// Like [`commit`](Self::commit) but skips the fingerprint refresh; the
    /// annealer owns the cached protocol and never checks it externally.
    pub(crate) fn commit_fast(&mut self, trial: Trial) {
        let n = trial.index;
        self.protocol.set_control(n, trial.control);
        self.exps[n] = trial.propagator;
        self.prefix_valid = self.prefix_valid.min(n);
        self.suffix_valid = self.suffix_valid.max(n + 1);
        self.cost = trial.cost;
        self.commits_since_rebuild += 1;
        if self.commits_since_rebuild >= CACHE_REBUILD_INTERVAL {
            self.rebuild();
        }
    }

    pub(crate) fn refresh_fingerprint(&mut self) {
        self.fingerprint = self.protocol.fingerprint();
    }

    pub fn matches(&self, protocol: &Protocol) -> bool {
        self.fingerprint == protocol.fingerprint()
    }
}

/// Cost of `protocol` with segment `index` replaced by `new_ctrl`, served
/// from a cache built for exactly that protocol.
pub fn cached_sweep_cost(
    cache: &mut PropagationCache,
    protocol: &Protocol,
    index: usize,
    new_ctrl: ControlVector,
) -> Result<f64> {
    if !cache.matches(protocol) {
        return Err(Error::StaleCache(
            "protocol differs from the one the cache was built for".into(),
        ));
    }
    if index >= protocol.len() {
        return Err(Error::domain(format!(
            "segment index {index} out of range for {} segments",
            protocol.len()
        )));
    }
    Ok(cache.trial(index, new_ctrl).cost)
}

/// `tr ρ` as a linear functional on the vectorized state: ones at the
/// diagonal positions.
pub fn trace_functional() -> [C64; 16] {
    let mut t = [ZERO; 16];
    for i in 0..4 {
        t[5 * i] = ONE;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs, unvec4x4, vec4x4};
    use crate::model::{initial_density, linear_adiabatic_protocol, random_protocol};

    fn ctrl(a: f64, b: f64, d: f64) -> ControlVector {
        ControlVector::new([a, b, d]).unwrap()
    }

    #[test]
    fn zero_control_generates_nothing() {
        let k = generator(&ControlVector::OFF, 0.3).unwrap();
        assert_eq!(k.matrix, Mat16::zeros());
        assert!(generator(&ControlVector::OFF, -0.1).is_err());
    }

    #[test]
    fn stationary_control_annihilates_rho0() {
        let k = generator(&ControlVector::STATIONARY, 0.0).unwrap();
        assert!(max_abs(&k.apply(&initial_density())) < 1e-15);
        let k = generator(&ControlVector::STATIONARY, 0.25).unwrap();
        assert!(max_abs(&k.apply(&initial_density())) < 1e-15);
    }

    #[test]
    fn generator_annihilates_trace() {
        let t = trace_functional();
        for &w2 in &[0.0, 0.04, 0.25] {
            let k = generator(&ctrl(0.3, 0.8, 0.5), w2).unwrap().matrix;
            for col in 0..16 {
                let s: C64 = (0..16).map(|r| t[r] * k[(r, col)]).sum();
                assert!(s.norm() < 1e-14);
            }
        }
    }

    #[test]
    fn sector_form_matches_dense() {
        for (k, &w2) in [0.0, 0.0625, 0.25, -0.25].iter().enumerate() {
            let p = random_protocol(0.3, 0.1, k as u64).unwrap();
            let c0 = p.segments()[0].control;
            let dense = dense_generator(&c0, w2);
            let sec = SectorGenerator::new(&c0, w2);
            let x = Mat4::from_fn(|i, j| c((i + 2 * j) as f64 * 0.1, (i as f64 - j as f64) * 0.3));
            let lhs = unvec4x4(&(dense * vec4x4(&x)));
            let rhs = sec.apply(&SectorState::from_matrix(&x)).to_matrix();
            assert!(max_abs(&(lhs - rhs)) < 1e-14);
            let dt = 0.37;
            let lhs = unvec4x4(&(expm(&dense.scale(dt)) * vec4x4(&x)));
            let rhs = sec.exp(dt).apply(&SectorState::from_matrix(&x)).to_matrix();
            assert!(max_abs(&(lhs - rhs)) < 1e-13);
        }
    }

    #[test]
    fn sector_state_roundtrip() {
        let x = Mat4::from_fn(|i, j| c(i as f64, j as f64));
        assert_eq!(SectorState::from_matrix(&x).to_matrix(), x);
    }

    #[test]
    fn step_examples() {
        let rho0 = initial_density();
        for &w2 in &[0.0, 0.3] {
            let out = step(&rho0, &ControlVector::STATIONARY, w2, 0.7).unwrap();
            assert!(max_abs(&(out - rho0)) < 1e-15);
        }
        assert!(step(&rho0, &ControlVector::OFF, 0.0, 0.0).is_err());
    }

    #[test]
    fn pi_half_rotation_matches_unitary_conjugation() {
        // exp(−i O1 π/2) = −i O1, so ρ ↦ O1 ρ O1.
        let rho0 = initial_density();
        let o1 = basis_operators().o1;
        let out = step(
            &rho0,
            &ctrl(1.0, 0.0, 0.0),
            0.0,
            std::f64::consts::FRAC_PI_2,
        )
        .unwrap();
        let u = expm(&(o1 * c(0.0, -std::f64::consts::FRAC_PI_2)));
        assert!(max_abs(&(u - o1 * c(0.0, -1.0))) < 1e-14);
        let expected = u * rho0 * u.adjoint();
        assert!(max_abs(&(out - expected)) < 1e-14);
    }

    #[test]
    fn empty_protocol_returns_initial_state() {
        let p = Protocol::new(Vec::new(), 0.0).unwrap();
        let (rho, traj) = propagate(&p, NoiseStrength::NONE, &initial_density(), true);
        assert_eq!(rho, initial_density());
        assert_eq!(traj.unwrap().states.len(), 1);
    }

    #[test]
    fn costate_inverse_consistency_without_noise() {
        let p = random_protocol(1.0, 0.05, 3).unwrap();
        let pi_tau = Mat4::from_fn(|i, j| c(0.1 * i as f64 - 0.2, 0.05 * j as f64));
        let traj = propagate_costate(&p, NoiseStrength::NONE, &pi_tau);
        let (back, _) = propagate(&p, NoiseStrength::NONE, &traj.states[0], false);
        assert!(max_abs(&(back - pi_tau)) < 1e-12);
        let zero = propagate_costate(&p, NoiseStrength::new(0.3).unwrap(), &Mat4::zeros());
        assert!(zero.states.iter().all(|m| *m == Mat4::zeros()));
    }

    #[test]
    fn cache_matches_full_propagation() {
        let noise = NoiseStrength::new(0.25).unwrap();
        let mut p = random_protocol(1.5, 0.02, 11).unwrap();
        let mut cache = PropagationCache::new(p.clone(), noise);
        assert!((cache.cost() - protocol_cost(&p, noise)).abs() < 1e-12);
        let same = cache.trial(5, p.segments()[5].control);
        assert_eq!(same.cost, cache.cost());

        let mut rng_state = 17u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for k in 0..100 {
            let idx = (next() * p.len() as f64) as usize;
            let new = ctrl(next(), next(), next());
            let got = cached_sweep_cost(&mut cache, &p, idx, new).unwrap();
            let mut edited = p.clone();
            edited.set_control(idx, new);
            let want = protocol_cost(&edited, noise);
            assert!((got - want).abs() < 1e-10, "edit {k}: {got} vs {want}");
            if k % 3 == 0 {
                let t = cache.trial(idx, new);
                cache.commit(t);
                p = edited;
            }
        }
        assert!((cache.cost() - protocol_cost(&p, noise)).abs() < 1e-10);
        let other = random_protocol(1.5, 0.02, 12).unwrap();
        assert!(matches!(
            cached_sweep_cost(&mut cache, &other, 0, ControlVector::OFF),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn linear_protocol_noiseless_matches_unitary_reference() {
        // Reference values from an independent unitary simulation of the same
        // midpoint-sampled ramp (dense 4x4 expm per step, dt = 0.01).
        for (tau, expected) in [(100.0, 0.023630511947714358), (200.0, 0.010489917964309682)] {
            let p = linear_adiabatic_protocol(tau, 0.01).unwrap();
            let c = protocol_cost(&p, NoiseStrength::NONE);
            assert!((c - expected).abs() < 1e-10, "tau {tau}: cost {c}");
        }
    }
}

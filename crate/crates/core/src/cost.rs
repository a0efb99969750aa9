//! Gate-error functional: the trace distance, its singular-value
//! generalization for non-Hermitian arguments, and the analytic gradient
//! that seeds the costate at the final time.

use nalgebra::{Matrix4, SVD};

use crate::error::{Error, Result};
use crate::linalg::{c, hermitian_defect_ok, hermitian_eigen, hermitian_eigenvalues, Mat4};

/// Default spectral floor for the pseudo-inverse of `√((σ−ρ)²)`.
pub const DEFAULT_REGULARIZATION: f64 = 1e-10;

/// Inputs with a larger `‖A − A†‖_max` are treated as non-Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-10;

/// `½ Σ |λ(σ − ρ)|` for Hermitian inputs.
///
/// Falls back to [`generalized_cost`] when either argument is not
/// Hermitian; see [`trace_distance_flagged`] to learn whether that
/// happened.
pub fn trace_distance(sigma: &Mat4, rho: &Mat4) -> f64 {
    trace_distance_flagged(sigma, rho).0
}

/// Like [`trace_distance`], also returning `true` when the non-Hermitian
/// fallback was used.
pub fn trace_distance_flagged(sigma: &Mat4, rho: &Mat4) -> (f64, bool) {
    if !hermitian_defect_ok(sigma, HERMITIAN_TOL) || !hermitian_defect_ok(rho, HERMITIAN_TOL) {
        log::warn!("trace distance of a non-Hermitian matrix; using the singular-value form");
        return (generalized_cost(sigma, rho), true);
    }
    let diff = sigma - rho;
    let eig = hermitian_eigenvalues(&diff);
    (0.5 * eig.iter().map(|l| l.abs()).sum::<f64>(), false)
}

/// `½ tr √((σ − ρ)†(σ − ρ))`: half the sum of singular values. Real for
/// any complex input; agrees with [`trace_distance`] for Hermitian `ρ`.
pub fn generalized_cost(sigma: &Mat4, rho: &Mat4) -> f64 {
    let diff = sigma - rho;
    let svd = SVD::new(diff, false, false);
    0.5 * svd.singular_values.iter().sum::<f64>()
}

/// `√M` and the regularized pseudo-inverse of `√M` for a Hermitian
/// positive-semidefinite `M`.
#[derive(Clone, Debug)]
pub struct HermitianRoot {
    pub sqrt: Mat4,
    pub pinv_sqrt: Mat4,
    /// Eigenvalues of `√M` (ascending).
    pub root_eigenvalues: [f64; 4],
}

/// Eigendecomposition-based square root. Eigenvalues of `√M` below
/// `floor` are left out of the pseudo-inverse instead of being inverted.
pub fn hermitian_sqrt_inverse(m: &Mat4, floor: f64) -> Result<HermitianRoot> {
    let scale = m.iter().map(|z| z.norm()).fold(1.0, f64::max);
    if !hermitian_defect_ok(m, 1e-12 * scale) {
        return Err(Error::domain("matrix is not Hermitian"));
    }
    let (vals, vecs) = hermitian_eigen(m);
    let mut root = [0.0; 4];
    let mut sqrt_d = Mat4::zeros();
    let mut pinv_d = Mat4::zeros();
    for i in 0..4 {
        let lam = vals[i];
        if lam < -1e-12 * scale {
            return Err(Error::domain(format!(
                "matrix is not positive semidefinite (eigenvalue {lam})"
            )));
        }
        let r = lam.max(0.0).sqrt();
        root[i] = r;
        sqrt_d[(i, i)] = c(r, 0.0);
        if r >= floor {
            pinv_d[(i, i)] = c(1.0 / r, 0.0);
        }
    }
    Ok(HermitianRoot {
        sqrt: vecs * sqrt_d * vecs.adjoint(),
        pinv_sqrt: vecs * pinv_d * vecs.adjoint(),
        root_eigenvalues: root,
    })
}

/// Derivatives of the generalized cost with respect to the real and
/// imaginary parts of each entry of `ρ`, all 32 treated as independent.
#[derive(Clone, Debug, PartialEq)]
pub struct CostGradient {
    pub d_re: Matrix4<f64>,
    pub d_im: Matrix4<f64>,
}

impl CostGradient {
    /// `∂C/∂ρ_R + i ∂C/∂ρ_I` as one complex matrix.
    pub fn as_complex(&self) -> Mat4 {
        Mat4::from_fn(|i, j| c(self.d_re[(i, j)], self.d_im[(i, j)]))
    }
}

/// Analytic gradient of the generalized cost at Hermitian `ρ`.
///
/// With `D = σ − ρ` and `S⁺` the regularized inverse of `√(D²)`:
///
/// ```text
/// ∂C/∂ρ_R[i,j] = −¼ tr(A S⁺),  A[α,β] =  δ(α,j) D[i,β] + D[α,i] δ(β,j)
/// ∂C/∂ρ_I[i,j] = −¼ i tr(B S⁺), B[α,β] = −δ(α,j) D[i,β] + D[α,i] δ(β,j)
/// ```
pub fn cost_gradient(sigma: &Mat4, rho: &Mat4, regularization: f64) -> Result<CostGradient> {
    let d = sigma - rho;
    let root = hermitian_sqrt_inverse(&(d.adjoint() * d), regularization)?;
    if root.root_eigenvalues.iter().all(|&r| r < regularization) {
        return Err(Error::SingularGradient);
    }
    let s = &root.pinv_sqrt;
    let mut d_re = Matrix4::<f64>::zeros();
    let mut d_im = Matrix4::<f64>::zeros();
    for i in 0..4 {
        for j in 0..4 {
            let mut a = Mat4::zeros();
            let mut b = Mat4::zeros();
            for k in 0..4 {
                // Row j picks up row i of D; column j picks up column i.
                a[(j, k)] += d[(i, k)];
                a[(k, j)] += d[(k, i)];
                b[(j, k)] -= d[(i, k)];
                b[(k, j)] += d[(k, i)];
            }
            let ta = (a * s).trace();
            let tb = (b * s).trace();
            d_re[(i, j)] = (-0.25 * ta).re;
            d_im[(i, j)] = (c(0.0, -0.25) * tb).re;
        }
    }
    Ok(CostGradient { d_re, d_im })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs, C64, ONE};
    use crate::model::{initial_density, target_density};
    use std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn distance_examples() {
        let sigma = target_density();
        let rho0 = initial_density();
        assert!(trace_distance(&sigma, &sigma).abs() < 1e-15);
        assert!((trace_distance(&sigma, &rho0) - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((generalized_cost(&sigma, &rho0) - FRAC_1_SQRT_2).abs() < 1e-15);

        let mut mixed = Mat4::zeros();
        mixed[(0, 0)] = c(0.5, 0.0);
        mixed[(2, 2)] = c(0.5, 0.0);
        assert!((trace_distance(&sigma, &mixed) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_hermitian_falls_back() {
        let sigma = target_density();
        let mut rho = initial_density();
        rho[(1, 3)] = c(1e-3, 0.0);
        let (v, flagged) = trace_distance_flagged(&sigma, &rho);
        assert!(flagged);
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn sqrt_inverse_examples() {
        let id = Mat4::identity();
        let r = hermitian_sqrt_inverse(&id, 1e-10).unwrap();
        assert!(max_abs(&(r.pinv_sqrt - id)) < 1e-14);

        let m = Mat4::from_diagonal(&nalgebra::Vector4::new(
            c(4.0, 0.0),
            ONE,
            c(0.0, 0.0),
            c(0.0, 0.0),
        ));
        let r = hermitian_sqrt_inverse(&m, 1e-10).unwrap();
        let expected = Mat4::from_diagonal(&nalgebra::Vector4::new(
            c(0.5, 0.0),
            ONE,
            c(0.0, 0.0),
            c(0.0, 0.0),
        ));
        assert!(max_abs(&(r.pinv_sqrt - expected)) < 1e-14);
        assert!(max_abs(&(r.sqrt * r.sqrt - m)) < 1e-12);

        let mut bad = Mat4::identity();
        bad[(0, 1)] = ONE;
        assert!(hermitian_sqrt_inverse(&bad, 1e-10).is_err());
    }

    #[test]
    fn gradient_singular_at_target() {
        let sigma = target_density();
        assert!(matches!(
            cost_gradient(&sigma, &sigma, DEFAULT_REGULARIZATION),
            Err(Error::SingularGradient)
        ));
    }

    fn random_hermitian(rng: &mut impl rand::Rng) -> Mat4 {
        let a = Mat4::from_fn(|_, _| c(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)));
        (a + a.adjoint()).scale(0.5)
    }

    fn random_unitary(rng: &mut impl rand::Rng) -> Mat4 {
        let h = random_hermitian(rng).scale(6.0);
        crate::linalg::expm(&(h * c(0.0, 1.0)))
    }

    fn central_difference(sigma: &Mat4, rho: &Mat4, i: usize, j: usize, dir: C64) -> f64 {
        let h = 1e-6;
        let mut plus = *rho;
        let mut minus = *rho;
        plus[(i, j)] += dir * h;
        minus[(i, j)] -= dir * h;
        (generalized_cost(sigma, &plus) - generalized_cost(sigma, &minus)) / (2.0 * h)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let sigma = target_density();
        let mut checked = 0;
        while checked < 50 {
            let rho = random_hermitian(&mut rng);
            if max_abs(&(sigma - rho)) <= 0.1 {
                continue;
            }
            checked += 1;
            let g = cost_gradient(&sigma, &rho, DEFAULT_REGULARIZATION).unwrap();
            let scale = g.d_re.amax().max(g.d_im.amax());
            for i in 0..4 {
                for j in 0..4 {
                    let fd_re = central_difference(&sigma, &rho, i, j, ONE);
                    let fd_im = central_difference(&sigma, &rho, i, j, c(0.0, 1.0));
                    assert!(
                        (g.d_re[(i, j)] - fd_re).abs() <= 1e-6 * scale,
                        "re ({i},{j})"
                    );
                    assert!(
                        (g.d_im[(i, j)] - fd_im).abs() <= 1e-6 * scale,
                        "im ({i},{j})"
                    );
                    if i == j {
                        assert!(fd_im.abs() < 1e-8);
                        assert!(g.d_im[(i, i)].abs() < 1e-8);
                    }
                }
            }
            assert!(g.d_re.iter().chain(g.d_im.iter()).all(|x| x.is_finite()));
        }
    }

    #[test]
    fn generalized_cost_is_unitarily_invariant() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let sigma = target_density();
        for _ in 0..20 {
            let rho = random_hermitian(&mut rng);
            let u = random_unitary(&mut rng);
            let before = generalized_cost(&sigma, &rho);
            let after = generalized_cost(&(u * sigma * u.adjoint()), &(u * rho * u.adjoint()));
            assert!((before - after).abs() < 1e-12);
        }
    }

    #[test]
    fn hermitian_inputs_agree_between_forms() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let sigma = target_density();
        for _ in 0..20 {
            let rho = random_hermitian(&mut rng);
            assert!((trace_distance(&sigma, &rho) - generalized_cost(&sigma, &rho)).abs() < 1e-14);
        }
    }

    #[test]
    fn random_psd_root_squares_back() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = random_hermitian(&mut rng);
            let m = a * a;
            let r = hermitian_sqrt_inverse(&m, 1e-10).unwrap();
            assert!(max_abs(&(r.sqrt * r.sqrt - m)) < 1e-12);
        }
    }
}

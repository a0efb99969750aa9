//! Small dense complex linear algebra: fixed-size aliases, the matrix
//! exponential, and Hermitian spectral helpers.

use nalgebra::{Matrix4, SMatrix, SymmetricEigen, Vector4};
use num_complex::Complex64;

pub type C64 = Complex64;
pub type Mat2 = SMatrix<C64, 2, 2>;
pub type Mat4 = Matrix4<C64>;
pub type Vec4 = Vector4<C64>;
pub type Mat16 = SMatrix<C64, 16, 16>;
pub type Vec16 = SMatrix<C64, 16, 1>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Induced 1-norm (maximum absolute column sum).
pub fn norm1<const N: usize>(a: &SMatrix<C64, N, N>) -> f64 {
    (0..N)
        .map(|j| (0..N).map(|i| a[(i, j)].norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest entrywise modulus.
pub fn max_abs<const R: usize, const K: usize>(a: &SMatrix<C64, R, K>) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest entrywise modulus of `a - a†`.
pub fn hermiticity_defect(a: &Mat4) -> f64 {
    max_abs(&(a - a.adjoint()))
}

pub fn hermitian_defect_ok(a: &Mat4, tol: f64) -> bool {
    hermiticity_defect(a) <= tol
}

const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA_13: f64 = 5.371920351148152e0;

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const B9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Matrix exponential by scaling and squaring with a diagonal Padé
/// approximant of degree 3, 5, 7, 9 or 13, picked from the 1-norm of the
/// argument (Higham's 2005 backward-error thresholds).
pub fn expm<const N: usize>(a: &SMatrix<C64, N, N>) -> SMatrix<C64, N, N> {
    let eye = SMatrix::<C64, N, N>::identity();
    let nrm = norm1(a);
    if nrm == 0.0 {
        return eye;
    }
    for &(m, theta) in &THETA {
        if nrm <= theta {
            let (u, v) = match m {
                3 => pade_low(a, &B3),
                5 => pade_low(a, &B5),
                7 => pade_low(a, &B7),
                _ => pade_low(a, &B9),
            };
            return pade_solve(&u, &v);
        }
    }
    let s = (nrm / THETA_13).log2().ceil().max(0.0) as i32;
    let scaled = a.scale(0.5f64.powi(s));
    let (u, v) = pade_13(&scaled);
    let mut r = pade_solve(&u, &v);
    for _ in 0..s {
        r = r * r;
    }
    r
}

fn pade_low<const N: usize>(
    a: &SMatrix<C64, N, N>,
    b: &[f64],
) -> (SMatrix<C64, N, N>, SMatrix<C64, N, N>) {
    let eye = SMatrix::<C64, N, N>::identity();
    let a2 = a * a;
    let mut u = eye.scale(b[1]);
    let mut v = eye.scale(b[0]);
    let mut pow = eye;
    let mut k = 2;
    while k < b.len() {
        pow *= a2;
        u += pow.scale(b[k + 1]);
        v += pow.scale(b[k]);
        k += 2;
    }
    (a * u, v)
}

fn pade_13<const N: usize>(a: &SMatrix<C64, N, N>) -> (SMatrix<C64, N, N>, SMatrix<C64, N, N>) {
    let b = &B13;
    let eye = SMatrix::<C64, N, N>::identity();
    let a2 = a * a;
    let a4 = a2 * a2;
    let a6 = a4 * a2;
    let inner_u = a6.scale(b[13]) + a4.scale(b[11]) + a2.scale(b[9]);
    let u = a * (a6 * inner_u + a6.scale(b[7]) + a4.scale(b[5]) + a2.scale(b[3]) + eye.scale(b[1]));
    let inner_v = a6.scale(b[12]) + a4.scale(b[10]) + a2.scale(b[8]);
    let v = a6 * inner_v + a6.scale(b[6]) + a4.scale(b[4]) + a2.scale(b[2]) + eye.scale(b[0]);
    (u, v)
}

fn pade_solve<const N: usize>(
    u: &SMatrix<C64, N, N>,
    v: &SMatrix<C64, N, N>,
) -> SMatrix<C64, N, N> {
    let p = v + u;
    let q = v - u;
    // q is a small perturbation of a positive multiple of the identity
    // within the thresholds above, so LU never meets a singular pivot.
    solve_square(q, p)
}

/// Solves `A X = B` by Gaussian elimination with partial pivoting.
fn solve_square<const N: usize>(
    mut a: SMatrix<C64, N, N>,
    mut b: SMatrix<C64, N, N>,
) -> SMatrix<C64, N, N> {
    for k in 0..N {
        let mut piv = k;
        let mut best = a[(k, k)].norm();
        for r in (k + 1)..N {
            let v = a[(r, k)].norm();
            if v > best {
                best = v;
                piv = r;
            }
        }
        assert!(best > 0.0, "Padé denominator is singular");
        if piv != k {
            a.swap_rows(k, piv);
            b.swap_rows(k, piv);
        }
        let inv = a[(k, k)].inv();
        for r in (k + 1)..N {
            let f = a[(r, k)] * inv;
            if f == ZERO {
                continue;
            }
            for col in k..N {
                let v = a[(k, col)];
                a[(r, col)] -= f * v;
            }
            for col in 0..N {
                let v = b[(k, col)];
                b[(r, col)] -= f * v;
            }
        }
    }
    for k in (0..N).rev() {
        let inv = a[(k, k)].inv();
        for col in 0..N {
            let mut acc = b[(k, col)];
            for j in (k + 1)..N {
                acc -= a[(k, j)] * b[(j, col)];
            }
            b[(k, col)] = acc * inv;
        }
    }
    b
}

/// Eigenvalues (ascending) and eigenvectors of a Hermitian 4×4 matrix.
pub fn hermitian_eigen(m: &Mat4) -> (Vector4<f64>, Mat4) {
    let sym = (m + m.adjoint()).scale(0.5);
    let eig = SymmetricEigen::new(sym);
    (eig.eigenvalues, eig.eigenvectors)
}

/// Eigenvalues of a Hermitian 4×4 matrix (unordered).
pub fn hermitian_eigenvalues(m: &Mat4) -> Vector4<f64> {
    let sym = (m + m.adjoint()).scale(0.5);
    sym.symmetric_eigenvalues()
}

/// Column-stacking vectorization of a 4×4 matrix.
pub fn vec4x4(m: &Mat4) -> Vec16 {
    Vec16::from_iterator(m.iter().copied())
}

/// Inverse of [`vec4x4`].
pub fn unvec4x4(v: &Vec16) -> Mat4 {
    Mat4::from_iterator(v.iter().copied())
}

/// Kronecker product of two 4×4 matrices, so that
/// `vec(A X B) = kron(Bᵀ, A) vec(X)` under column stacking.
pub fn kron4(a: &Mat4, b: &Mat4) -> Mat16 {
    let mut out = Mat16::zeros();
    for i in 0..4 {
        for j in 0..4 {
            let aij = a[(i, j)];
            for k in 0..4 {
                for l in 0..4 {
                    out[(4 * i + k, 4 * j + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// `Re tr(A† B)`, the real Frobenius pairing of two complex matrices.
pub fn real_pairing(a: &Mat4, b: &Mat4) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x.conj() * y).re).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taylor<const N: usize>(a: &SMatrix<C64, N, N>) -> SMatrix<C64, N, N> {
        // Plain Taylor series with squaring; only valid as an oracle for
        // modest norms.
        let s = 8;
        let x = a.scale(0.5f64.powi(s));
        let mut term = SMatrix::<C64, N, N>::identity();
        let mut sum = term;
        for k in 1..30 {
            term = term * x / C64::new(k as f64, 0.0);
            sum += term;
        }
        for _ in 0..s {
            sum = sum * sum;
        }
        sum
    }

    fn sample(scale: f64, seed: u64) -> Mat4 {
        let mut state = seed;
        Mat4::from_fn(|_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let a = ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let b = ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
            c(a * scale, b * scale)
        })
    }

    #[test]
    fn expm_zero_is_identity() {
        assert_eq!(expm(&Mat4::zeros()), Mat4::identity());
    }

    #[test]
    fn expm_matches_taylor_across_pade_degrees() {
        for (k, scale) in [1e-3, 1e-2, 0.1, 0.5, 1.0, 3.0, 10.0].iter().enumerate() {
            let a = sample(*scale, k as u64 + 1);
            let e = expm(&a);
            let t = taylor(&a);
            let err = max_abs(&(e - t)) / max_abs(&t).max(1.0);
            assert!(err < 1e-12, "scale {scale}: rel err {err}");
        }
    }

    #[test]
    fn expm_matches_nalgebra_reference() {
        for k in 0..10 {
            let a = sample(2.0, 100 + k);
            let ours = expm(&a);
            let reference = a.exp();
            assert!(max_abs(&(ours - reference)) < 1e-11);
        }
    }

    #[test]
    fn expm_of_diagonal() {
        let d = Mat4::from_diagonal(&Vec4::new(c(0.0, 1.0), c(-1.0, 0.0), c(2.0, 0.5), ZERO));
        let e = expm(&d);
        for i in 0..4 {
            assert!((e[(i, i)] - d[(i, i)].exp()).norm() < 1e-13);
        }
    }

    #[test]
    fn vec_roundtrip_and_kron_identity() {
        let a = sample(1.0, 7);
        let x = sample(1.0, 8);
        let b = sample(1.0, 9);
        assert_eq!(unvec4x4(&vec4x4(&x)), x);
        let lhs = vec4x4(&(a * x * b));
        let rhs = kron4(&b.transpose(), &a) * vec4x4(&x);
        assert!(max_abs(&(lhs - rhs)) < 1e-13);
    }

    #[test]
    fn hermitian_eigen_reconstructs() {
        let a = sample(1.0, 11);
        let h = a + a.adjoint();
        let (vals, vecs) = hermitian_eigen(&h);
        let d = Mat4::from_diagonal(&vals.map(|x| c(x, 0.0)));
        let back = vecs * d * vecs.adjoint();
        assert!(max_abs(&(back - h)) < 1e-12);
    }
}

//! Derivative-free bounded local minimization: Nelder–Mead on a box with
//! mirror reflection at the walls, followed by a coordinate-wise
//! golden-section polish.

/// Stopping rules for [`minimize_box`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimplexOptions {
    pub max_evals: usize,
    /// Stop once the spread of simplex values falls below this.
    pub f_tol: f64,
    /// Stop once every vertex lies within this distance of the best.
    pub x_tol: f64,
    /// Initial edge length as a fraction of each box width.
    pub initial_step: f64,
    /// Golden-section passes over all coordinates after the simplex stops.
    pub polish_passes: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            max_evals: 4000,
            f_tol: 1e-14,
            x_tol: 1e-10,
            initial_step: 0.1,
            polish_passes: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

/// Folds `x` back into `[lo, hi]` by mirror reflection at the walls.
pub fn reflect_into(x: f64, lo: f64, hi: f64) -> f64 {
    let w = hi - lo;
    if w <= 0.0 {
        return lo;
    }
    let mut y = (x - lo).rem_euclid(2.0 * w);
    if y > w {
        y = 2.0 * w - y;
    }
    lo + y
}

struct Counted<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

/// Minimizes `f` over the box `lo ≤ x ≤ hi` starting from `x0` (clamped
/// into the box). The returned value is never above `f(x0)`.
pub fn minimize_box<F>(f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: &SimplexOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    assert!(
        lo.len() == n && hi.len() == n,
        "bounds must match the dimension"
    );
    let mut fun = Counted { f, evals: 0 };
    let start: Vec<f64> = (0..n).map(|i| x0[i].clamp(lo[i], hi[i])).collect();
    let fold = |x: &mut [f64]| {
        for i in 0..n {
            x[i] = reflect_into(x[i], lo[i], hi[i]);
        }
    };

    let mut simplex = vec![start.clone()];
    for i in 0..n {
        let mut v = start.clone();
        let step = opts.initial_step * (hi[i] - lo[i]);
        v[i] = if v[i] + step <= hi[i] {
            v[i] + step
        } else {
            v[i] - step
        };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| fun.eval(v)).collect();

    while fun.evals < opts.max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&k| simplex[k].clone()).collect();
        values = order.iter().map(|&k| values[k]).collect();

        let spread = values[n] - values[0];
        let size = simplex[1..]
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&simplex[0])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if spread.abs() <= opts.f_tol || size <= opts.x_tol {
            break;
        }

        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for i in 0..n {
                centroid[i] += v[i] / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = (0..n)
                .map(|i| centroid[i] + t * (simplex[n][i] - centroid[i]))
                .collect();
            fold(&mut p);
            p
        };

        let xr = along(-1.0);
        let fr = fun.eval(&xr);
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = fun.eval(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = along(-0.5);
            let fc = fun.eval(&xc);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = fun.eval(&xc);
            (xc, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        for k in 1..=n {
            for i in 0..n {
                simplex[k][i] = simplex[0][i] + 0.5 * (simplex[k][i] - simplex[0][i]);
            }
            values[k] = fun.eval(&simplex[k]);
        }
    }

    let best = (0..=n)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap();
    let mut x = simplex[best].clone();
    let mut value = values[best];

    for _ in 0..opts.polish_passes {
        for i in 0..n {
            let radius = (4.0 * opts.initial_step * (hi[i] - lo[i])).max(1e-9);
            let a = (x[i] - radius).max(lo[i]);
            let b = (x[i] + radius).min(hi[i]);
            let (xi, fi) = golden_section(
                |t| {
                    let mut p = x.clone();
                    p[i] = t;
                    fun.eval(&p)
                },
                a,
                b,
                1e-12,
            );
            if fi < value {
                x[i] = xi;
                value = fi;
            }
        }
    }

    Minimum {
        x,
        value,
        evaluations: fun.evals,
    }
}

/// Golden-section search for a minimum of `f` on `[a, b]`; returns the best
/// point seen, including the endpoints.
pub fn golden_section(
    mut f: impl FnMut(f64) -> f64,
    mut a: f64,
    mut b: f64,
    tol: f64,
) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut best = (a, f(a));
    let fb = f(b);
    if fb < best.1 {
        best = (b, fb);
    }
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
        for (x, v) in [(c, fc), (d, fd)] {
            if v < best.1 {
                best = (x, v);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_folds_into_box() {
        assert_eq!(reflect_into(0.5, 0.0, 1.0), 0.5);
        assert!((reflect_into(1.25, 0.0, 1.0) - 0.75).abs() < 1e-15);
        assert!((reflect_into(-0.25, 0.0, 1.0) - 0.25).abs() < 1e-15);
        assert!((reflect_into(2.25, 0.0, 1.0) - 0.25).abs() < 1e-15);
        assert_eq!(reflect_into(3.0, 1.0, 1.0), 1.0);
    }

    #[test]
    fn finds_interior_minimum_of_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = minimize_box(
            f,
            &[-1.0, 1.5],
            &[-2.0, -2.0],
            &[2.0, 2.0],
            &SimplexOptions::default(),
        );
        assert!(
            (m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5,
            "{:?}",
            m.x
        );
    }

    #[test]
    fn respects_bounds_with_minimum_on_the_wall() {
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + (x[1] + 0.2).powi(2) + x[2].powi(2);
        let lo = [0.0, 0.0, -1.0];
        let hi = [1.0, 1.0, 1.0];
        let mut seen_outside = false;
        let m = minimize_box(
            |x: &[f64]| {
                seen_outside |= x
                    .iter()
                    .zip(lo.iter().zip(&hi))
                    .any(|(v, (l, h))| v < l || v > h);
                f(x)
            },
            &[0.5, 0.5, 0.5],
            &lo,
            &hi,
            &SimplexOptions::default(),
        );
        assert!(!seen_outside);
        assert!((m.x[0] - 1.0).abs() < 1e-6 && m.x[1].abs() < 1e-6 && m.x[2].abs() < 1e-6);
    }

    #[test]
    fn never_worse_than_start() {
        let f = |x: &[f64]| (10.0 * x[0]).sin() + (7.0 * x[1]).cos();
        let x0 = [0.3, 0.8];
        let m = minimize_box(f, &x0, &[0.0, 0.0], &[1.0, 1.0], &SimplexOptions::default());
        assert!(m.value <= f(&x0));
    }

    #[test]
    fn golden_section_on_parabola() {
        let (x, v) = golden_section(|t| (t - 0.3).powi(2), 0.0, 1.0, 1e-12);
        assert!((x - 0.3).abs() < 1e-6 && v < 1e-12);
    }
}

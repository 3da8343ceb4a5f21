//! Accelerated proximal gradient for `f(X) + alpha ||X||_1` with a convex
//! quadratic `f`.
//!
//! Momentum follows `t_{j+1} = (1 + sqrt(1 + 4 t_j^2)) / 2`. The step size
//! starts from a power-iteration estimate of the Lipschitz constant of
//! `grad f` and is halved (L doubled) whenever the quadratic upper bound is
//! violated. Momentum restarts when the composite objective increases.
//! Because `f` is quadratic its gradient is affine, so the gradient at the
//! extrapolated point is formed from the two previous gradients and each
//! iteration costs a single gradient evaluation.

use nalgebra::{DMatrix, Matrix3};
use rayon::prelude::*;

/// A convex quadratic smooth part plus an L1 penalty.
pub trait QuadraticL1 {
    /// Value and gradient of the smooth part. Must be a quadratic function.
    fn smooth(&self, x: &DMatrix<f64>) -> (f64, DMatrix<f64>);
    fn l1_weight(&self) -> f64;
    fn shape(&self) -> (usize, usize);

    fn composite(&self, x: &DMatrix<f64>) -> f64 {
        self.smooth(x).0 + self.l1_weight() * l1_norm(x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ApgOptions {
    /// Stop once the KKT residual drops to this value.
    pub tol: f64,
    pub max_iters: usize,
}

#[derive(Debug, Clone)]
pub struct ApgResult {
    pub x: DMatrix<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub converged: bool,
}

pub fn l1_norm(x: &DMatrix<f64>) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

/// Soft thresholding; exactly zero inside `[-tau, tau]`.
pub fn soft_threshold(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// Largest distance of `-grad` to `alpha * sign(x)` (the L1 subdifferential).
pub fn kkt_residual(x: &DMatrix<f64>, grad: &DMatrix<f64>, alpha: f64) -> f64 {
    x.iter()
        .zip(grad.iter())
        .map(|(&xi, &gi)| {
            if xi > 0.0 {
                (gi + alpha).abs()
            } else if xi < 0.0 {
                (gi - alpha).abs()
            } else {
                (gi.abs() - alpha).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

fn dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Power iteration on the Hessian `v -> grad(v) - grad(0)`.
pub fn lipschitz_estimate<P: QuadraticL1 + ?Sized>(problem: &P, iters: usize) -> f64 {
    let (r, c) = problem.shape();
    if r * c == 0 {
        return 1.0;
    }
    let g0 = problem.smooth(&DMatrix::zeros(r, c)).1;
    // deterministic, non-degenerate start
    let mut v = DMatrix::from_fn(r, c, |i, j| 1.0 + 0.01 * ((i * 7 + j * 13) % 11) as f64);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..iters {
        let hv = problem.smooth(&v).1 - &g0;
        let norm = hv.norm();
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        lambda = norm;
        v = hv / norm;
    }
    lambda.max(1e-12)
}

pub fn minimize<P: QuadraticL1 + ?Sized>(
    problem: &P,
    x0: &DMatrix<f64>,
    opts: ApgOptions,
) -> ApgResult {
    let alpha = problem.l1_weight();
    let mut lip = lipschitz_estimate(problem, 30);

    let mut x = x0.clone();
    let (fx0, mut gx) = problem.smooth(&x);
    let mut big_fx = fx0 + alpha * l1_norm(&x);
    let mut kkt = kkt_residual(&x, &gx, alpha);
    if kkt <= opts.tol {
        return ApgResult {
            x,
            objective: big_fx,
            iterations: 0,
            kkt_residual: kkt,
            converged: true,
        };
    }

    let mut y = x.clone();
    let mut gy = gx.clone();
    let mut t = 1.0_f64;
    let mut iterations = 0;
    let mut converged = false;

    let mut z = x.clone();
    while iterations < opts.max_iters {
        iterations += 1;
        let (fz, gz, l1z) = loop {
            let tau = alpha / lip;
            let mut l1z = 0.0;
            for ((zi, yi), gi) in z.iter_mut().zip(y.iter()).zip(gy.iter()) {
                *zi = soft_threshold(yi - gi / lip, tau);
                l1z += zi.abs();
            }
            let (fz, gz) = problem.smooth(&z);
            let (mut curvature, mut dd) = (0.0, 0.0);
            for (((zi, yi), gzi), gyi) in z.iter().zip(y.iter()).zip(gz.iter()).zip(gy.iter()) {
                let d = zi - yi;
                curvature += (gzi - gyi) * d;
                dd += d * d;
            }
            if curvature <= lip * dd * (1.0 + 1e-10) || dd == 0.0 {
                break (fz, gz, l1z);
            }
            lip *= 2.0;
        };
        let big_fz = fz + alpha * l1z;

        if big_fz > big_fx && t > 1.0 {
            // objective went up: drop momentum and step again from x
            t = 1.0;
            y.copy_from(&x);
            gy.copy_from(&gx);
            continue;
        }
        if big_fz > big_fx {
            // plain proximal step from x that does not descend: stalled at round-off
            kkt = kkt_residual(&x, &gx, alpha);
            converged = kkt <= opts.tol;
            break;
        }

        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let m = (t - 1.0) / t_next;
        // y = z + m (z - x) and, the gradient being affine, likewise for gy
        for (((yi, zi), xi), (gyi, (gzi, gxi))) in y
            .iter_mut()
            .zip(z.iter())
            .zip(x.iter())
            .zip(gy.iter_mut().zip(gz.iter().zip(gx.iter())))
        {
            *yi = zi + m * (zi - xi);
            *gyi = gzi + m * (gzi - gxi);
        }
        std::mem::swap(&mut x, &mut z);
        gx = gz;
        big_fx = big_fz;
        t = t_next;

        kkt = kkt_residual(&x, &gx, alpha);
        if kkt <= opts.tol {
            converged = true;
            break;
        }
    }
    ApgResult {
        objective: problem.composite(&x),
        x,
        iterations,
        kkt_residual: kkt,
        converged,
    }
}

/// Hessian blocks of the per-column quadratic terms.
#[derive(Debug, Clone)]
pub enum Grams {
    /// One matrix shared by every column.
    Shared(DMatrix<f64>),
    /// One matrix per column.
    PerColumn(Vec<DMatrix<f64>>),
    /// `G_t = B^T (I_p kron Q_t) B` for a shared `3p x k` basis `B` and a
    /// symmetric 3x3 `Q_t` per column. Products cost two shared GEMMs
    /// instead of `n` dense `k x k` products.
    Projected {
        basis: DMatrix<f64>,
        projectors: Vec<Matrix3<f64>>,
    },
}

/// `scale/2 sum_t (c_t^T G_t c_t - 2 b_t^T c_t) + constant
///  + beta/2 sum_t ||c_{t+1} - c_t||^2 + alpha ||C||_1`.
///
/// With `G_t = M_t^T M_t`, `b_t = M_t^T w_t` and
/// `constant = scale/2 sum_t ||w_t||^2` the first part equals
/// `scale/2 sum_t ||w_t - M_t c_t||^2`.
#[derive(Debug, Clone)]
pub struct CoeffProblem {
    pub grams: Grams,
    pub linear: DMatrix<f64>,
    pub constant: f64,
    pub scale: f64,
    pub beta: f64,
    pub alpha: f64,
}

impl CoeffProblem {
    fn gram_times(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.grams {
            Grams::Shared(g) => g * x,
            Grams::PerColumn(gs) => {
                let cols: Vec<_> = gs
                    .par_iter()
                    .enumerate()
                    .map(|(t, g)| g * x.column(t))
                    .collect();
                let mut out = DMatrix::zeros(x.nrows(), x.ncols());
                for (t, c) in cols.iter().enumerate() {
                    out.set_column(t, c);
                }
                out
            }
            Grams::Projected { basis, projectors } => {
                let mut lifted = basis * x;
                let rows = lifted.nrows();
                for (col, q) in lifted.as_mut_slice().chunks_exact_mut(rows).zip(projectors) {
                    for v in col.chunks_exact_mut(3) {
                        let (a, b, c) = (v[0], v[1], v[2]);
                        v[0] = q[(0, 0)] * a + q[(0, 1)] * b + q[(0, 2)] * c;
                        v[1] = q[(1, 0)] * a + q[(1, 1)] * b + q[(1, 2)] * c;
                        v[2] = q[(2, 0)] * a + q[(2, 1)] * b + q[(2, 2)] * c;
                    }
                }
                // tr_mul runs per-entry dot products; an explicit transpose
                // lets the product go through the blocked GEMM kernel
                basis.transpose() * lifted
            }
        }
    }
}

impl QuadraticL1 for CoeffProblem {
    fn smooth(&self, x: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let mut grad = self.gram_times(x);
        // value from the quadratic form before grad is shifted in place
        let quad = dot(x, &grad) - 2.0 * dot(&self.linear, x);
        let mut value = self.constant + 0.5 * self.scale * quad;
        for (g, b) in grad.iter_mut().zip(self.linear.iter()) {
            *g = self.scale * (*g - b);
        }
        if self.beta != 0.0 {
            value += crate::objective::add_smoothness(x, self.beta, &mut grad);
        }
        (value, grad)
    }

    fn l1_weight(&self) -> f64 {
        self.alpha
    }

    fn shape(&self) -> (usize, usize) {
        (self.linear.nrows(), self.linear.ncols())
    }
}

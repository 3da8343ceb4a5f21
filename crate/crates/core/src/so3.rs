//! Small SO(3) toolkit: exponential map, geodesic distance, projection onto
//! the group and the orthographic Procrustes solution.

use nalgebra::{Matrix2xX, Matrix3, Matrix3xX, Rotation3, Vector3};

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Axial vector of the skew-symmetric part of `m`.
pub fn vee_skew(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues exponential map.
pub fn exp(v: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*v).into_inner()
}

/// Rotation vector of `r` (inverse of [`exp`] for angles below pi).
pub fn log(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Angle of `a^T b`, computed with `atan2` so small angles keep full precision.
pub fn geodesic_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let d = a.transpose() * b;
    let s = 2.0 * vee_skew(&d).norm();
    let c = d.trace() - 1.0;
    s.atan2(c)
}

/// Closest rotation to `m` in Frobenius norm.
pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

/// Rotation whose top two rows best align the centered shape with the centered
/// 2D observations, from the SVD of the 2x3 cross-covariance padded to 3x3.
/// `weights` (per joint, optional) weight both the centroids and the
/// cross-covariance.
pub fn orthographic_procrustes(
    w: &Matrix2xX<f64>,
    s: &Matrix3xX<f64>,
    weights: Option<&[f64]>,
) -> Matrix3<f64> {
    let p = w.ncols();
    let wt = |j: usize| weights.map_or(1.0, |ws| ws[j]);
    let total: f64 = (0..p).map(wt).sum::<f64>().max(f64::MIN_POSITIVE);
    let mut wc = nalgebra::Vector2::zeros();
    let mut sc = Vector3::zeros();
    for j in 0..p {
        wc += wt(j) * w.column(j);
        sc += wt(j) * s.column(j);
    }
    wc /= total;
    sc /= total;
    let mut m = Matrix3::zeros();
    for j in 0..p {
        let a = w.column(j) - wc;
        let b = s.column(j) - sc;
        for r in 0..2 {
            for c in 0..3 {
                m[(r, c)] += wt(j) * a[r] * b[c];
            }
        }
    }
    project_to_so3(&m)
}

/// Weighted centered residual `W - P R S` and its squared norm.
fn ortho_residual(
    wc: &Matrix2xX<f64>,
    sc: &Matrix3xX<f64>,
    r: &Matrix3<f64>,
    wt: &dyn Fn(usize) -> f64,
) -> (Matrix2xX<f64>, f64) {
    let e = wc - r.fixed_rows::<2>(0) * sc;
    let f = e
        .column_iter()
        .enumerate()
        .map(|(j, c)| wt(j) * c.norm_squared())
        .sum();
    (e, f)
}

/// Minimizes the weighted orthographic residual `sum_j v_j |w_j - P R s_j - T|^2`
/// over `R` (with `T` eliminated by centering), starting from `start`.
///
/// The padded-SVD solution only maximizes a correlation and is biased for
/// anisotropic shapes, so this damped Gauss-Newton polish on the body-frame
/// perturbation `R exp(xi^)` is what makes noiseless frames fit exactly.
/// Only cost-decreasing steps are taken.
pub fn refine_orthographic_rotation(
    w: &Matrix2xX<f64>,
    s: &Matrix3xX<f64>,
    weights: Option<&[f64]>,
    start: &Matrix3<f64>,
    max_iters: usize,
) -> Matrix3<f64> {
    let p = w.ncols();
    let wt = |j: usize| weights.map_or(1.0, |ws| ws[j]);
    let total: f64 = (0..p).map(wt).sum::<f64>().max(f64::MIN_POSITIVE);
    let wm = (0..p).fold(nalgebra::Vector2::zeros(), |a, j| a + wt(j) * w.column(j)) / total;
    let sm = (0..p).fold(Vector3::zeros(), |a, j| a + wt(j) * s.column(j)) / total;
    let mut wc = w.clone();
    let mut sc = s.clone();
    for j in 0..p {
        let mut c = wc.column_mut(j);
        c -= wm;
        let mut c = sc.column_mut(j);
        c -= sm;
    }
    let mut r = *start;
    let (mut e, mut f) = ortho_residual(&wc, &sc, &r, &wt);
    let mut lambda = 1e-6;
    for _ in 0..max_iters {
        // residual moves by P R hat(s_j) xi under R -> R exp(xi^)
        let mut jtj = Matrix3::zeros();
        let mut jte = Vector3::zeros();
        let top = r.fixed_rows::<2>(0).into_owned();
        for j in 0..p {
            let jac = top * hat(&sc.column(j).into_owned());
            jtj += wt(j) * jac.transpose() * jac;
            jte += wt(j) * jac.transpose() * e.column(j);
        }
        if jte.norm() <= 1e-14 * (1.0 + f) {
            break;
        }
        let mut improved = false;
        for _ in 0..30 {
            let damped = jtj + Matrix3::from_diagonal_element(lambda * (1.0 + jtj.trace()));
            let Some(xi) = damped.cholesky().map(|c| -c.solve(&jte)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = project_to_so3(&(r * exp(&xi)));
            let (et, ft) = ortho_residual(&wc, &sc, &trial, &wt);
            if ft < f {
                let small = f - ft <= 1e-15 * f.max(1e-300);
                r = trial;
                e = et;
                f = ft;
                lambda = (lambda * 0.1).max(1e-12);
                improved = !small;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    r
}

/// Rotation by `angle` radians about `axis`.
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    exp(&(axis.normalize() * angle))
}

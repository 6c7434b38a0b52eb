//! Independent numerical references for the test suite: quadrature rules,
//! least-squares family fits of log-messages, pushforward densities, and
//! brute-force minimizers of the per-edge objectives.
//!
//! Nothing here calls into the message catalog, the solver or the engine.
//! Log-gamma values come from `statrs` rather than from `crate::special`.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::exponential_families::{Belief, Message};

/// Quadrature families known to the oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuadratureKind {
    GaussHermite,
    GaussLaguerre,
    /// Trapezoid rule on `[lo, hi]` in the belief's natural coordinate
    /// (z for Gaussians, log of the variable for Gammas).
    TrapezoidGrid { lo: f64, hi: f64, points: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    pub kind: QuadratureKind,
    pub order: usize,
}

impl QuadratureSpec {
    pub fn hermite(order: usize) -> Self {
        Self { kind: QuadratureKind::GaussHermite, order }
    }

    pub fn laguerre(order: usize) -> Self {
        Self { kind: QuadratureKind::GaussLaguerre, order }
    }
}

/// Nodes and weights from the Jacobi matrix (Golub-Welsch).
fn golub_welsch(diag: Vec<f64>, off: Vec<f64>, mu0: f64) -> (Vec<f64>, Vec<f64>) {
    let n = diag.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = diag[i];
        if i + 1 < n {
            m[(i, i + 1)] = off[i];
            m[(i + 1, i)] = off[i];
        }
    }
    let eig = m.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], mu0 * eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// Probabilists' Gauss-Hermite rule: `E_{N(0,1)}[f] ~ sum w_k f(x_k)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let diag = vec![0.0; n];
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    let (x, w) = golub_welsch(diag, off, 1.0);
    let total: f64 = w.iter().sum();
    (x, w.into_iter().map(|v| v / total).collect())
}

/// Generalized Gauss-Laguerre rule normalized to the Gamma(s + 1, 1) law:
/// `E[f(X)] ~ sum w_k f(x_k)` for `X ~ Gamma(s + 1, 1)`.
pub fn gauss_laguerre(n: usize, s: f64) -> (Vec<f64>, Vec<f64>) {
    let diag: Vec<f64> = (0..n).map(|k| 2.0 * k as f64 + s + 1.0).collect();
    let off: Vec<f64> = (1..n).map(|k| ((k as f64) * (k as f64 + s)).sqrt()).collect();
    let (x, w) = golub_welsch(diag, off, 1.0);
    let total: f64 = w.iter().sum();
    (x, w.into_iter().map(|v| v / total).collect())
}

fn trapezoid(lo: f64, hi: f64, points: usize, log_density: impl Fn(f64) -> f64, f: impl Fn(f64) -> f64) -> f64 {
    let h = (hi - lo) / (points - 1) as f64;
    let logs: Vec<f64> = (0..points).map(|k| log_density(lo + h * k as f64)).collect();
    let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, l) in logs.iter().enumerate() {
        let c = if k == 0 || k + 1 == points { 0.5 } else { 1.0 };
        let p = c * (l - peak).exp();
        if p > 0.0 {
            num += p * f(lo + h * k as f64);
            den += p;
        }
    }
    num / den
}

fn gamma_log_density_of_log(alpha: f64, beta: f64) -> impl Fn(f64) -> f64 {
    let c = alpha * beta.ln() - ln_gamma(alpha);
    move |u: f64| c + alpha * u - beta * u.exp()
}

/// Expectation of `f` under a univariate belief.
pub fn expect(f: &dyn Fn(f64) -> f64, b: &Belief, spec: QuadratureSpec) -> Result<f64> {
    if spec.order < 8 {
        return Err(Error::Oracle(format!("quadrature order {} below 8", spec.order)));
    }
    let value = match (b, spec.kind) {
        (Belief::Gaussian(g), QuadratureKind::GaussHermite) => {
            let (m, v) = g.moments();
            let (x, w) = gauss_hermite(spec.order);
            x.iter().zip(&w).map(|(x, w)| w * f(m + v.sqrt() * x)).sum()
        }
        (Belief::Gaussian(g), QuadratureKind::TrapezoidGrid { lo, hi, points }) => {
            let (m, v) = g.moments();
            trapezoid(lo, hi, points, |z| -(z - m) * (z - m) / (2.0 * v), f)
        }
        (Belief::Gamma(g), QuadratureKind::GaussLaguerre) => {
            let (x, w) = gauss_laguerre(spec.order, g.alpha() - 1.0);
            x.iter().zip(&w).map(|(x, w)| w * f(x / g.beta())).sum()
        }
        (Belief::Gamma(g), QuadratureKind::TrapezoidGrid { lo, hi, points }) => {
            trapezoid(lo, hi, points, gamma_log_density_of_log(g.alpha(), g.beta()), |u| f(u.exp()))
        }
        (b, k) => return Err(Error::Oracle(format!("no {k:?} rule for a {} belief", b.family()))),
    };
    if !value.is_finite() {
        return Err(Error::Oracle("non-finite integrand".into()));
    }
    Ok(value)
}

/// Tensor-product Gauss-Hermite expectation under `N(mean, cov)`.
pub fn expect_mv(f: &dyn Fn(&DVector<f64>) -> f64, mean: &DVector<f64>, cov: &DMatrix<f64>, order: usize) -> Result<f64> {
    let d = mean.len();
    let l = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Oracle("covariance not positive definite".into()))?
        .l();
    let (x, w) = gauss_hermite(order);
    let mut idx = vec![0usize; d];
    let mut total = 0.0;
    loop {
        let xi = DVector::from_iterator(d, idx.iter().map(|&k| x[k]));
        let weight: f64 = idx.iter().map(|&k| w[k]).product();
        total += weight * f(&(mean + &l * xi));
        let mut pos = 0;
        loop {
            if pos == d {
                return Ok(total);
            }
            idx[pos] += 1;
            if idx[pos] < order {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// Reads `(mean, variance)` off a log-message that is quadratic in its argument.
pub fn fit_gaussian(log_msg: &dyn Fn(f64) -> f64, center: f64, scale: f64) -> (f64, f64) {
    let (a, b, c) = (log_msg(center - scale), log_msg(center), log_msg(center + scale));
    let second = (a - 2.0 * b + c) / (scale * scale);
    let first = (c - a) / (2.0 * scale);
    let precision = -second;
    let mean = center + first / precision;
    (mean, 1.0 / precision)
}

/// Reads `(shape, rate)` off a log-message of the form `(shape - 1) ln x - rate x + c`.
pub fn fit_gamma(log_msg: &dyn Fn(f64) -> f64) -> (f64, f64) {
    let xs = [0.5, 1.0, 2.0];
    let ys: Vec<f64> = xs.iter().map(|&x| log_msg(x)).collect();
    let rows: Vec<[f64; 3]> = xs.iter().map(|&x: &f64| [x.ln(), -x, 1.0]).collect();
    let a = DMatrix::from_fn(3, 3, |i, j| rows[i][j]);
    let sol = a.lu().solve(&DVector::from_vec(ys)).expect("well-posed fit");
    (sol[0] + 1.0, sol[1])
}

/// Reads the information form `(xi, lambda)` off a log-message quadratic in a vector argument.
pub fn fit_mv_gaussian(log_msg: &dyn Fn(&DVector<f64>) -> f64, d: usize, scale: f64) -> (DVector<f64>, DMatrix<f64>) {
    let e = |k: usize| {
        let mut v = DVector::zeros(d);
        v[k] = scale;
        v
    };
    let f0 = log_msg(&DVector::zeros(d));
    let mut lambda = DMatrix::zeros(d, d);
    let mut xi = DVector::zeros(d);
    for i in 0..d {
        let fp = log_msg(&e(i));
        let fm = log_msg(&(-e(i)));
        xi[i] = (fp - fm) / (2.0 * scale);
        lambda[(i, i)] = -(fp - 2.0 * f0 + fm) / (scale * scale);
    }
    for i in 0..d {
        for j in 0..i {
            let fpp = log_msg(&(e(i) + e(j)));
            let fpm = log_msg(&(e(i) - e(j)));
            let fmp = log_msg(&(-e(i) + e(j)));
            let fmm = log_msg(&(-e(i) - e(j)));
            let h = (fpp - fpm - fmp + fmm) / (4.0 * scale * scale);
            lambda[(i, j)] = -h;
            lambda[(j, i)] = -h;
        }
    }
    (xi, lambda)
}

/// Density of a transformed variable `t(x)` at `y`, computed by integrating
/// a narrow Gaussian kernel in `y` against the base density of `x` with a
/// trapezoid rule, then Richardson-extrapolating in the kernel width.
pub fn pushforward_density(
    base_density: &dyn Fn(f64) -> f64,
    transform: &dyn Fn(f64) -> f64,
    inverse: f64,
    local_slope: f64,
    y: f64,
) -> f64 {
    let at_width = |eps: f64| {
        // x-window covering the kernel support
        let half = 12.0 * eps / local_slope.abs();
        let points = 4001;
        let h = 2.0 * half / (points - 1) as f64;
        let mut total = 0.0;
        for k in 0..points {
            let x = inverse - half + h * k as f64;
            let r = (transform(x) - y) / eps;
            let kernel = (-0.5 * r * r).exp() / ((2.0 * PI).sqrt() * eps);
            let c = if k == 0 || k + 1 == points { 0.5 } else { 1.0 };
            total += c * kernel * base_density(x);
        }
        total * h
    };
    let eps = 1e-3 * y.abs().max(1e-3);
    let coarse = at_width(eps);
    let fine = at_width(0.5 * eps);
    (4.0 * fine - coarse) / 3.0
}

/// Grid used by [`brute_force_edge_min`]: ranges for the two coordinates and
/// points per axis. For a Gaussian edge the coordinates are `(m, ln v)`; for
/// a Gamma edge `(ln alpha, ln beta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub points: usize,
    pub refine: usize,
}

impl GridSpec {
    pub fn gaussian_default() -> Self {
        Self { x: (-5.0, 5.0), y: (-6.0, 3.0), points: 101, refine: 10 }
    }

    pub fn gamma_default() -> Self {
        Self { x: (-4.0, 4.0), y: (-4.0, 4.0), points: 101, refine: 10 }
    }
}

/// Restricted local objective of a Gaussian edge at `(m, v)`: negative
/// entropy minus the expected log of both incoming messages, all by
/// Gauss-Hermite quadrature. `lg = (a, b)` with `b = 0, a = inf` flat.
pub fn gaussian_edge_objective(m: f64, v: f64, conj: (f64, f64), lg: (f64, f64), order: usize) -> f64 {
    let (x, w) = gauss_hermite(order);
    let (mc, vc) = conj;
    let (a, b) = lg;
    let lg_norm = if b == 0.0 { 0.0 } else { b * a.ln() + ln_gamma(b) };
    let mut total = 0.0;
    for (x, w) in x.iter().zip(&w) {
        let z = m + v.sqrt() * x;
        let log_q = -0.5 * (2.0 * PI * v).ln() - (z - m) * (z - m) / (2.0 * v);
        let log_c = -0.5 * (2.0 * PI * vc).ln() - (z - mc) * (z - mc) / (2.0 * vc);
        let log_lg = if b == 0.0 { 0.0 } else { b * z - z.exp() / a - lg_norm };
        total += w * (log_q - log_c - log_lg);
    }
    total
}

/// Restricted local objective of a Gamma edge at `(alpha, beta)`, integrated
/// in log coordinates with a trapezoid rule. `ln = (m, s2)`, flat if `s2` is infinite.
pub fn gamma_edge_objective(alpha: f64, beta: f64, conj: (f64, f64), ln: (f64, f64), points: usize) -> f64 {
    let (ca, cb) = conj;
    let (lm, ls2) = ln;
    let log_q = gamma_log_density_of_log(alpha, beta);
    let q_norm = alpha * beta.ln() - ln_gamma(alpha);
    let c_norm = ca * cb.ln() - ln_gamma(ca);
    // support of the log-gamma law: sharp right tail, slow left tail for small alpha
    let mode = (alpha / beta).ln();
    let sd = if alpha > 1.0 { (1.0 / alpha).sqrt() } else { 1.0 };
    let lo = mode - (40.0 * sd).max((40.0 / alpha).min(400.0));
    let hi = mode + 8.0 + 40.0 * sd;
    let f = |g: f64| {
        let u = g.ln();
        let lq = q_norm + (alpha - 1.0) * u - beta * g;
        let lc = c_norm + (ca - 1.0) * u - cb * g;
        let lln = if ls2.is_infinite() {
            0.0
        } else {
            -u - 0.5 * (2.0 * PI * ls2).ln() - (u - lm) * (u - lm) / (2.0 * ls2)
        };
        lq - lc - lln
    };
    trapezoid(lo, hi, points, log_q, |u| f(u.exp()))
}

fn grid_axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

fn grid_argmin(xs: &[f64], ys: &[f64], obj: &dyn Fn(f64, f64) -> f64) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let mut best = (usize::MAX, usize::MAX, f64::INFINITY);
    let mut table = vec![vec![f64::NAN; ys.len()]; xs.len()];
    for (i, &x) in xs.iter().enumerate() {
        for (j, &y) in ys.iter().enumerate() {
            let v = obj(x, y);
            table[i][j] = v;
            if v.is_finite() && v < best.2 {
                best = (i, j, v);
            }
        }
    }
    if best.0 == usize::MAX {
        return Err(Error::Oracle("objective non-finite everywhere".into()));
    }
    Ok((best.0, best.1, table))
}

/// Stationary point of the quadratic through a 3x3 stencil of step `(hx, hy)`
/// centred at `(x, y)`, if the fitted quadratic is convex.
fn quadratic_step(obj: &dyn Fn(f64, f64) -> f64, x: f64, y: f64, hx: f64, hy: f64) -> Option<(f64, f64)> {
    let f = |i: f64, j: f64| obj(x + i * hx, y + j * hy);
    let f0 = f(0.0, 0.0);
    let gx = (f(1.0, 0.0) - f(-1.0, 0.0)) / (2.0 * hx);
    let gy = (f(0.0, 1.0) - f(0.0, -1.0)) / (2.0 * hy);
    let hxx = (f(1.0, 0.0) - 2.0 * f0 + f(-1.0, 0.0)) / (hx * hx);
    let hyy = (f(0.0, 1.0) - 2.0 * f0 + f(0.0, -1.0)) / (hy * hy);
    let hxy = (f(1.0, 1.0) - f(1.0, -1.0) - f(-1.0, 1.0) + f(-1.0, -1.0)) / (4.0 * hx * hy);
    let det = hxx * hyy - hxy * hxy;
    if !(hxx > 0.0 && det > 0.0) {
        return None;
    }
    let dx = -(hyy * gx - hxy * gy) / det;
    let dy = -(hxx * gy - hxy * gx) / det;
    (dx.is_finite() && dy.is_finite()).then_some((x + dx, y + dy))
}

/// Exhaustive grid search over a two-parameter objective, refined once
/// around the coarse argmin and finished with a few quadratic-fit steps
/// on a shrinking stencil. A step is kept only if it lowers the objective.
pub fn grid_minimize(obj: &dyn Fn(f64, f64) -> f64, grid: &GridSpec) -> Result<((f64, f64), f64)> {
    let xs = grid_axis(grid.x.0, grid.x.1, grid.points);
    let ys = grid_axis(grid.y.0, grid.y.1, grid.points);
    let (i, j, _) = grid_argmin(&xs, &ys, obj)?;
    let hx = if xs.len() > 1 { xs[1] - xs[0] } else { 0.0 };
    let hy = if ys.len() > 1 { ys[1] - ys[0] } else { 0.0 };
    let n = 2 * grid.refine.max(1) + 1;
    let fxs = grid_axis(xs[i] - hx, xs[i] + hx, n);
    let fys = grid_axis(ys[j] - hy, ys[j] + hy, n);
    let (fi, fj, table) = grid_argmin(&fxs, &fys, obj)?;
    let (mut x, mut y, mut best) = (fxs[fi], fys[fj], table[fi][fj]);
    let (mut sx, mut sy) = (fxs.get(1).map_or(0.0, |v| v - fxs[0]), fys.get(1).map_or(0.0, |v| v - fys[0]));
    if sx == 0.0 || sy == 0.0 {
        return Ok(((x, y), best));
    }
    for _ in 0..4 {
        let Some((nx, ny)) = quadratic_step(obj, x, y, sx, sy) else { break };
        if (nx - x).abs() > 2.0 * sx || (ny - y).abs() > 2.0 * sy {
            break;
        }
        let v = obj(nx, ny);
        if !(v <= best) {
            break;
        }
        (x, y, best) = (nx, ny, v);
        sx *= 0.25;
        sy *= 0.25;
    }
    Ok(((x, y), best))
}

/// Brute-force minimizer of a non-conjugate edge's local objective.
///
/// `(Gaussian, LogGamma)` returns `(m, v)`; `(Gamma, LogNormal)` returns
/// `(alpha, beta)`. A `Flat` second message is accepted in both cases.
pub fn brute_force_edge_min(msgs: (&Message, &Message), grid: &GridSpec) -> Result<((f64, f64), f64)> {
    match msgs {
        (Message::Gaussian(c), nonconj) => {
            let lg = match nonconj {
                Message::LogGamma(lg) => (lg.a, lg.b),
                Message::Flat => (f64::INFINITY, 0.0),
                other => return Err(Error::Oracle(format!("unexpected {} message", other.family()))),
            };
            let conj = c.moments();
            let obj = |m: f64, lv: f64| gaussian_edge_objective(m, lv.exp(), conj, lg, 64);
            let ((m, lv), value) = grid_minimize(&obj, grid)?;
            Ok(((m, lv.exp()), value))
        }
        (Message::Gamma(c), nonconj) => {
            let ln = match nonconj {
                Message::LogNormal(ln) => (ln.m, ln.s2),
                Message::Flat => (0.0, f64::INFINITY),
                other => return Err(Error::Oracle(format!("unexpected {} message", other.family()))),
            };
            let conj = (c.alpha(), c.beta());
            let coarse = |la: f64, lb: f64| gamma_edge_objective(la.exp(), lb.exp(), conj, ln, 1500);
            let ((la, lb), _) = grid_minimize(&coarse, &GridSpec { refine: 0, ..*grid })?;
            let hx = (grid.x.1 - grid.x.0) / (grid.points - 1) as f64;
            let hy = (grid.y.1 - grid.y.0) / (grid.points - 1) as f64;
            let fine_grid = GridSpec {
                x: (la - hx, la + hx),
                y: (lb - hy, lb + hy),
                points: 2 * grid.refine.max(1) + 1,
                refine: 1,
            };
            let fine = |la: f64, lb: f64| gamma_edge_objective(la.exp(), lb.exp(), conj, ln, 6000);
            let ((la, lb), value) = grid_minimize(&fine, &fine_grid)?;
            Ok(((la.exp(), lb.exp()), value))
        }
        (a, _) => Err(Error::Oracle(format!("no edge oracle for a {} conjugate message", a.family()))),
    }
}

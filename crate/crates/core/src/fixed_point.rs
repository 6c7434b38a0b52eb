//! Solver for the marginal of an edge adjacent to an exp link.
//!
//! The stationarity condition `eta = F(eta)^-1 grad E[log messages]` is
//! solved by natural-gradient descent on the local objective, with Armijo
//! line search and a bound on the Fisher norm of each step. The residual
//! reported is the Fisher norm of `eta - map(eta)`, which equals the Fisher
//! dual norm of the objective gradient.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::bfe::{ell_gamma, ell_z, local_gamma_objective, local_z_objective};
use crate::error::{Error, Result};
use crate::exponential_families::{Belief, GammaBelief, GaussianBelief, LogGammaMessage, LogNormalMessage, MAX_EXPONENT};
use crate::special::{digamma, inverse_trigamma};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub initial_step: f64,
    pub max_step_norm: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub armijo_shrink: f64,
    pub armijo_slope: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            initial_step: 1e-2,
            max_step_norm: 0.5,
            max_iterations: 50,
            tolerance: 1e-6,
            armijo_shrink: 0.5,
            armijo_slope: 1e-4,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.initial_step > 0.0
            && self.max_step_norm > 0.0
            && self.max_iterations > 0
            && self.tolerance > 0.0
            && self.armijo_shrink > 0.0
            && self.armijo_shrink < 1.0
            && self.armijo_slope > 0.0
            && self.armijo_slope < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid solver config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// Iteration budget exhausted; the best iterate is returned.
    MaxIterations,
    /// Line search could not decrease the objective further.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointResult {
    pub belief: Belief,
    pub iterations_used: usize,
    pub final_gradient_norm: f64,
    pub objective_trace: Vec<f64>,
    pub status: SolveStatus,
}

/// Objective value, gradient and Fisher information at a natural parameter,
/// or `None` outside the domain.
type Eval<'a> = dyn Fn(&Vector2<f64>) -> Option<(f64, Vector2<f64>, Matrix2<f64>)> + 'a;

/// Outcome of one line-searched step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub eta: Vector2<f64>,
    pub value: f64,
    /// Step length accepted (zero when no decrease was found).
    pub step: f64,
}

fn natural_direction(fisher: &Matrix2<f64>, grad: &Vector2<f64>) -> Result<Vector2<f64>> {
    let chol = fisher
        .cholesky()
        .ok_or_else(|| Error::Degenerate(format!("Fisher information not positive definite: {fisher:?}")))?;
    Ok(-chol.solve(grad))
}

/// Bounds the direction's Fisher norm by `max_norm`.
pub fn clip_direction(d: Vector2<f64>, fisher: &Matrix2<f64>, max_norm: f64) -> Vector2<f64> {
    let norm = d.dot(&(fisher * d)).max(0.0).sqrt();
    if norm > max_norm {
        d * (max_norm / norm)
    } else {
        d
    }
}

/// One natural-gradient step with Armijo line search.
///
/// The trial step starts at `step`. If the Armijo condition holds the step
/// is doubled (up to 1) while it keeps improving; otherwise it is shrunk,
/// with out-of-domain trial points shrunk first.
pub fn natural_gradient_step(
    eta: &Vector2<f64>,
    value: f64,
    fisher: &Matrix2<f64>,
    grad: &Vector2<f64>,
    objective: &dyn Fn(&Vector2<f64>) -> Option<f64>,
    cfg: &SolverConfig,
    step: f64,
) -> Result<StepOutcome> {
    if grad.iter().all(|g| *g == 0.0) {
        return Ok(StepOutcome { eta: *eta, value, step });
    }
    let d = clip_direction(natural_direction(fisher, grad)?, fisher, cfg.max_step_norm);
    let slope = grad.dot(&d);
    if !(slope < 0.0) {
        return Ok(StepOutcome { eta: *eta, value, step: 0.0 });
    }
    let armijo = |t: f64| -> Option<f64> {
        let v = objective(&(eta + d * t))?;
        (v.is_finite() && v <= value + cfg.armijo_slope * t * slope).then_some(v)
    };
    let mut t = step.clamp(f64::MIN_POSITIVE, 1.0);
    if let Some(mut best) = armijo(t) {
        loop {
            let grown = (t / cfg.armijo_shrink).min(1.0);
            if grown <= t {
                break;
            }
            match armijo(grown) {
                Some(v) if v <= best => {
                    t = grown;
                    best = v;
                }
                _ => break,
            }
        }
        return Ok(StepOutcome { eta: eta + d * t, value: best, step: t });
    }
    while t > 1e-14 {
        t *= cfg.armijo_shrink;
        if let Some(v) = armijo(t) {
            return Ok(StepOutcome { eta: eta + d * t, value: v, step: t });
        }
    }
    Ok(StepOutcome { eta: *eta, value, step: 0.0 })
}

fn dual_norm(fisher: &Matrix2<f64>, grad: &Vector2<f64>) -> f64 {
    match fisher.cholesky() {
        Some(c) => grad.dot(&c.solve(grad)).max(0.0).sqrt(),
        None => f64::INFINITY,
    }
}

fn minimize(start: Vector2<f64>, eval: &Eval, cfg: &SolverConfig) -> Result<(Vector2<f64>, usize, f64, Vec<f64>, SolveStatus)> {
    cfg.validate()?;
    let (mut value, mut grad, mut fisher) =
        eval(&start).ok_or_else(|| Error::Domain("objective not finite at the initial point".into()))?;
    let mut eta = start;
    let mut trace = vec![value];
    let mut step = cfg.initial_step;
    let mut residual = dual_norm(&fisher, &grad);
    let objective = |e: &Vector2<f64>| eval(e).map(|r| r.0);
    for it in 0..cfg.max_iterations {
        if residual <= cfg.tolerance {
            return Ok((eta, it, residual, trace, SolveStatus::Converged));
        }
        let out = natural_gradient_step(&eta, value, &fisher, &grad, &objective, cfg, step)?;
        if out.step == 0.0 {
            return Ok((eta, it, residual, trace, SolveStatus::Stalled));
        }
        step = out.step;
        eta = out.eta;
        let r = eval(&eta).ok_or_else(|| Error::Domain("accepted point left the domain".into()))?;
        value = r.0;
        grad = r.1;
        fisher = r.2;
        trace.push(value);
        residual = dual_norm(&fisher, &grad);
    }
    let status = if residual <= cfg.tolerance { SolveStatus::Converged } else { SolveStatus::MaxIterations };
    Ok((eta, cfg.max_iterations, residual, trace, status))
}

fn gaussian_at(eta: &Vector2<f64>) -> Option<GaussianBelief> {
    let g = GaussianBelief::from_natural(eta[0], eta[1]).ok()?;
    let (m, v) = g.moments();
    (m.is_finite() && v.is_finite() && m + 0.5 * v < MAX_EXPONENT).then_some(g)
}

fn gamma_at(eta: &Vector2<f64>) -> Option<GammaBelief> {
    let g = GammaBelief::from_natural(eta[0], eta[1]).ok()?;
    (g.alpha() < 1e12 && g.beta() < 1e300).then_some(g)
}

/// Laplace approximation of `conj(z) * lg(z)`.
fn laplace_z(conj: &GaussianBelief, lg: &LogGammaMessage) -> Option<GaussianBelief> {
    let (mc, vc) = conj.moments();
    let inv_a = lg.inv_a();
    // g'(z) = -(z - mc)/vc + b - e^z/a is decreasing; bracket its root
    let dg = |z: f64| -(z - mc) / vc + lg.b - z.exp() * inv_a;
    let mut lo = mc + vc * lg.b - 1.0;
    let mut hi = mc + vc * lg.b + 1.0;
    while dg(lo) < 0.0 {
        lo -= 2.0 * (hi - lo);
    }
    while dg(hi) > 0.0 {
        hi += 2.0 * (hi - lo);
        if hi > MAX_EXPONENT {
            return None;
        }
    }
    let mut z = 0.5 * (lo + hi);
    for _ in 0..200 {
        let g = dg(z);
        if g > 0.0 {
            lo = z;
        } else {
            hi = z;
        }
        let curv = 1.0 / vc + z.exp() * inv_a;
        let newton = z + g / curv;
        z = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (hi - lo) < 1e-14 * (1.0 + z.abs()) || g.abs() < 1e-14 {
            break;
        }
    }
    let var = 1.0 / (1.0 / vc + z.exp() * inv_a);
    GaussianBelief::from_moments(z, var).ok()
}

/// Laplace approximation in `u = ln gamma` of `conj(gamma) * ln(gamma)`,
/// mapped to the Gamma with matching log-moments.
fn laplace_gamma(conj: &GammaBelief, ln: &LogNormalMessage) -> Option<GammaBelief> {
    let (a, b) = (conj.alpha(), conj.beta());
    let (m, s2) = (ln.m, ln.s2);
    let dh = |u: f64| (a - 1.0) - b * u.exp() - (u - m) / s2;
    let mut lo = m - 1.0;
    let mut hi = m + 1.0;
    let mut guard = 0;
    while dh(lo) < 0.0 && guard < 200 {
        lo -= 2.0 * (hi - lo);
        guard += 1;
    }
    while dh(hi) > 0.0 && guard < 400 {
        hi += 2.0 * (hi - lo);
        guard += 1;
    }
    let mut u = 0.5 * (lo + hi);
    for _ in 0..200 {
        let g = dh(u);
        if g > 0.0 {
            lo = u;
        } else {
            hi = u;
        }
        let curv = b * u.exp() + 1.0 / s2;
        let newton = u + g / curv;
        u = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (hi - lo) < 1e-14 * (1.0 + u.abs()) || g.abs() < 1e-14 {
            break;
        }
    }
    let curv = b * u.exp() + 1.0 / s2;
    let alpha = inverse_trigamma(1.0 / curv);
    let beta = (digamma(alpha) - u).exp();
    GammaBelief::new(alpha, beta).ok()
}

/// Solves the marginal of a Gaussian edge receiving a Gaussian message and
/// a log-gamma message.
pub fn solve_gaussian_edge(
    conj: &GaussianBelief,
    nonconj: &LogGammaMessage,
    init: &GaussianBelief,
    cfg: &SolverConfig,
) -> Result<FixedPointResult> {
    if nonconj.is_flat() {
        let value = local_z_objective(conj, conj, nonconj)?.0;
        return Ok(FixedPointResult {
            belief: Belief::Gaussian(*conj),
            iterations_used: 0,
            final_gradient_norm: 0.0,
            objective_trace: vec![value],
            status: SolveStatus::Converged,
        });
    }
    let eval = |eta: &Vector2<f64>| {
        let q = gaussian_at(eta)?;
        let (v, g) = local_z_objective(&q, conj, nonconj).ok()?;
        v.is_finite().then(|| (v, g, q.fisher()))
    };
    let mut candidates = vec![*init];
    candidates.extend(laplace_z(conj, nonconj));
    let start = best_start(candidates.iter().map(|c| c.natural()), &eval)?;
    let (eta, iterations, residual, trace, status) = minimize(start, &eval, cfg)?;
    Ok(FixedPointResult {
        belief: Belief::Gaussian(GaussianBelief::from_natural(eta[0], eta[1])?),
        iterations_used: iterations,
        final_gradient_norm: residual,
        objective_trace: trace,
        status,
    })
}

/// Solves the marginal of a Gamma edge receiving a Gamma message and a
/// log-normal message.
pub fn solve_gamma_edge(
    conj: &GammaBelief,
    nonconj: &LogNormalMessage,
    init: &GammaBelief,
    cfg: &SolverConfig,
) -> Result<FixedPointResult> {
    if nonconj.is_flat() {
        let value = local_gamma_objective(conj, conj, nonconj)?.0;
        return Ok(FixedPointResult {
            belief: Belief::Gamma(*conj),
            iterations_used: 0,
            final_gradient_norm: 0.0,
            objective_trace: vec![value],
            status: SolveStatus::Converged,
        });
    }
    let eval = |eta: &Vector2<f64>| {
        let q = gamma_at(eta)?;
        let (v, g) = local_gamma_objective(&q, conj, nonconj).ok()?;
        v.is_finite().then(|| (v, g, q.fisher()))
    };
    let mut candidates = vec![*init];
    candidates.extend(laplace_gamma(conj, nonconj));
    let start = best_start(candidates.iter().map(|c| c.natural()), &eval)?;
    let (eta, iterations, residual, trace, status) = minimize(start, &eval, cfg)?;
    Ok(FixedPointResult {
        belief: Belief::Gamma(GammaBelief::from_natural(eta[0], eta[1])?),
        iterations_used: iterations,
        final_gradient_norm: residual,
        objective_trace: trace,
        status,
    })
}

fn best_start(candidates: impl Iterator<Item = Vector2<f64>>, eval: &Eval) -> Result<Vector2<f64>> {
    let mut best: Option<(f64, Vector2<f64>)> = None;
    for c in candidates {
        if let Some((v, _, _)) = eval(&c) {
            if best.map_or(true, |(b, _)| v < b) {
                best = Some((v, c));
            }
        }
    }
    best.map(|(_, c)| c)
        .ok_or_else(|| Error::Domain("no feasible starting point for the edge solver".into()))
}

/// The stationarity map `eta -> F(eta)^-1 grad E[log messages]` on a Gaussian edge.
pub fn fixed_point_map_z(q: &GaussianBelief, conj: &GaussianBelief, nonconj: &LogGammaMessage) -> Result<Vector2<f64>> {
    let (_, g) = ell_z(q, conj, nonconj)?;
    let chol = q
        .fisher()
        .cholesky()
        .ok_or_else(|| Error::Degenerate("Fisher information not positive definite".into()))?;
    Ok(chol.solve(&g))
}

/// The stationarity map on a Gamma edge.
pub fn fixed_point_map_gamma(q: &GammaBelief, conj: &GammaBelief, nonconj: &LogNormalMessage) -> Result<Vector2<f64>> {
    let (_, g) = ell_gamma(q, conj, nonconj)?;
    let chol = q
        .fisher()
        .cholesky()
        .ok_or_else(|| Error::Degenerate("Fisher information not positive definite".into()))?;
    Ok(chol.solve(&g))
}

/// Fisher norm of `eta - map(eta)` at `q`.
pub fn stationarity_residual(q: &Belief, mapped: &Vector2<f64>) -> Result<f64> {
    let (eta, fisher) = match q {
        Belief::Gaussian(g) => (g.natural(), g.fisher()),
        Belief::Gamma(g) => (g.natural(), g.fisher()),
        Belief::MvGaussian(_) => return Err(Error::Family("scalar belief expected".into())),
    };
    let d = eta - mapped;
    Ok(d.dot(&(fisher * d)).max(0.0).sqrt())
}

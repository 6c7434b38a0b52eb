//! Bethe free energy of a terminated graph and the per-edge local objectives
//! minimized by the fixed-point solver.
//!
//! Accounting used throughout:
//! * every stochastic factor contributes its average energy `-E[log f]`,
//! * every free variable (an equality cluster) contributes `-H[q]` once,
//! * every exp link contributes the change-of-variables term, `-E[z]` when
//!   the free marginal lives on `z` and `+E[ln gamma]` when it lives on `gamma`,
//! * a normal factor with a joint `q(y, mu)` adds the mutual information of the joint.
//!
//! Clamps, observations and unity factors contribute nothing. With these
//! conventions every coordinate update of the engine is an exact minimizer
//! of the total.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::engine::Marginals;
use crate::error::{Error, Result};
use crate::exponential_families::{Belief, GammaBelief, GaussianBelief, LogGammaMessage, LogNormalMessage};
use crate::factor_rules::{NormalInputs, SoftdotInputs};
use crate::graph::{build_schedule, ports, Carrier, ClusterRole, FactorGraph, NodeKind, Schedule};
use crate::special::{ln_gamma, tetragamma, trigamma};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BfeBreakdown {
    /// Average energy per node; the exp-link terms sit on the exp-link nodes.
    pub node_terms: BTreeMap<usize, f64>,
    /// Negative entropy of each free variable, stored on its lowest edge id.
    pub edge_terms: BTreeMap<usize, f64>,
    /// Node terms summed by node kind, plus `"entropy"`.
    pub groups: BTreeMap<String, f64>,
    pub total: f64,
}

/// `E_q[log conj(z) + log lg(z)]` and its gradient in the natural parameters of `q`.
pub fn ell_z(q: &GaussianBelief, conj: &GaussianBelief, lg: &LogGammaMessage) -> Result<(f64, Vector2<f64>)> {
    let (m, v) = q.moments();
    let (mc, vc) = conj.moments();
    let mut value = -0.5 * (2.0 * PI * vc).ln() - ((m - mc).powi(2) + v) / (2.0 * vc);
    let mut dm = -(m - mc) / vc;
    let mut dv = -0.5 / vc;
    if !lg.is_flat() {
        let mgf = q.mgf()?;
        value += lg.b * m - mgf / lg.a - lg.log_normalizer();
        dm += lg.b - mgf / lg.a;
        dv -= 0.5 * mgf / lg.a;
    }
    Ok((value, Vector2::new(v * dm, 2.0 * m * v * dm + 2.0 * v * v * dv)))
}

/// Local objective of a Gaussian edge next to an exp link:
/// `-H[q] - E[log conj] - E[log lg]`, with its natural-parameter gradient.
pub fn local_z_objective(q: &GaussianBelief, conj: &GaussianBelief, lg: &LogGammaMessage) -> Result<(f64, Vector2<f64>)> {
    let (ell, dell) = ell_z(q, conj, lg)?;
    let value = -q.entropy() - ell;
    let grad = q.fisher() * q.natural() - dell;
    Ok((value, grad))
}

/// `E_q[log conj(gamma) + log ln(gamma)]` and its gradient in the natural
/// parameters `(alpha - 1, -beta)` of `q`.
pub fn ell_gamma(q: &GammaBelief, conj: &GammaBelief, ln: &LogNormalMessage) -> Result<(f64, Vector2<f64>)> {
    let (a, b) = (q.alpha(), q.beta());
    let (ca, cb) = (conj.alpha(), conj.beta());
    let l = q.e_log();
    let t1 = trigamma(a);
    let mut value = ca * cb.ln() - ln_gamma(ca) + (ca - 1.0) * l - cb * a / b;
    let mut da = (ca - 1.0) * t1 - cb / b;
    let mut db = -(ca - 1.0) / b + cb * a / (b * b);
    if !ln.is_flat() {
        let r = l - ln.m;
        value += -l - 0.5 * (2.0 * PI * ln.s2).ln() - (t1 + r * r) / (2.0 * ln.s2);
        da += -t1 - (tetragamma(a) + 2.0 * r * t1) / (2.0 * ln.s2);
        db += 1.0 / b + r / (b * ln.s2);
    }
    Ok((value, Vector2::new(da, -db)))
}

/// Local objective of a Gamma edge next to an exp link:
/// `-H[q] - E[log conj] - E[log ln]`, with its natural-parameter gradient.
pub fn local_gamma_objective(q: &GammaBelief, conj: &GammaBelief, ln: &LogNormalMessage) -> Result<(f64, Vector2<f64>)> {
    let (ell, dell) = ell_gamma(q, conj, ln)?;
    let value = -q.entropy() - ell;
    let grad = q.fisher() * q.natural() - dell;
    Ok((value, grad))
}

fn gaussian_cross_entropy(q_mean: f64, q_var: f64, p: &GaussianBelief) -> f64 {
    let (m, v) = p.moments();
    HALF_LN_2PI + 0.5 * v.ln() + ((q_mean - m).powi(2) + q_var) / (2.0 * v)
}

/// Bethe free energy; builds the schedule internally.
pub fn bethe_free_energy(graph: &FactorGraph, marginals: &Marginals) -> Result<BfeBreakdown> {
    let schedule = build_schedule(graph)?;
    bethe_free_energy_with(graph, &schedule, marginals)
}

/// Bethe free energy for a graph whose schedule is already known.
pub fn bethe_free_energy_with(graph: &FactorGraph, schedule: &Schedule, marginals: &Marginals) -> Result<BfeBreakdown> {
    let table = graph.port_table();
    let get = |node: usize, port: usize| {
        let e = table[node][port].ok_or_else(|| Error::Graph(format!("port {port} of node {node} unconnected")))?;
        marginals
            .beliefs
            .get(&e)
            .ok_or_else(|| Error::Domain(format!("missing marginal on edge {e}")))
    };
    let mut node_terms = BTreeMap::new();
    let mut groups: BTreeMap<String, f64> = BTreeMap::new();
    for node in &graph.nodes {
        let n = node.id;
        let term = match &node.kind {
            NodeKind::Softdot => {
                let tau = get(n, ports::SOFTDOT_TAU)?.positive_moments()?;
                let inputs = SoftdotInputs {
                    q_w: Some(get(n, ports::SOFTDOT_W)?.vec_moments()?),
                    q_phi: Some(get(n, ports::SOFTDOT_PHI)?.vec_moments()?),
                    q_tau: Some(tau),
                    q_z: Some(get(n, ports::SOFTDOT_Z)?.scalar_moments()?),
                };
                HALF_LN_2PI - 0.5 * tau.log_mean + 0.5 * tau.mean * inputs.expected_residual_sq()?
            }
            NodeKind::NormalFactor => {
                let tau = get(n, ports::NORMAL_TAU)?.positive_moments()?;
                if node.is_structured_y_mu() {
                    let joint = marginals
                        .joints
                        .get(&n)
                        .ok_or_else(|| Error::Domain(format!("missing joint marginal on node {n}")))?;
                    HALF_LN_2PI - 0.5 * tau.log_mean
                        + 0.5 * tau.mean * joint.residual_sq()
                        + joint.mutual_information()
                } else {
                    let inputs = NormalInputs {
                        q_y: Some(get(n, ports::NORMAL_Y)?.scalar_moments()?),
                        q_mu: Some(get(n, ports::NORMAL_MU)?.scalar_moments()?),
                        q_tau: Some(tau),
                        joint_residual_sq: None,
                    };
                    HALF_LN_2PI - 0.5 * tau.log_mean + 0.5 * tau.mean * inputs.expected_residual_sq()?
                }
            }
            NodeKind::GammaFactor { shape } => {
                let g = get(n, ports::GAMMA_OUT)?.positive_moments()?;
                let r = get(n, ports::GAMMA_RATE)?.positive_moments()?;
                -(shape * r.log_mean - ln_gamma(*shape) + (shape - 1.0) * g.log_mean - r.mean * g.mean)
            }
            NodeKind::ExpLink => {
                let pair = schedule
                    .exp_pairs
                    .iter()
                    .find(|p| p.node == n)
                    .ok_or_else(|| Error::Graph(format!("exp link {n} missing from schedule")))?;
                let free = match pair.carrier {
                    Carrier::Z => pair.z,
                    Carrier::Gamma => pair.gamma,
                };
                match schedule.roles[free] {
                    ClusterRole::Carrier(_) => match pair.carrier {
                        Carrier::Z => -get(n, ports::EXP_Z)?.scalar_moments()?.mean,
                        Carrier::Gamma => get(n, ports::EXP_GAMMA)?.positive_moments()?.log_mean,
                    },
                    _ => 0.0,
                }
            }
            NodeKind::Prior(p) => {
                let m = get(n, 0)?;
                match p {
                    Belief::Gaussian(g) => {
                        let s = m.scalar_moments()?;
                        gaussian_cross_entropy(s.mean, s.var, g)
                    }
                    Belief::MvGaussian(g) => {
                        let s = m.vec_moments()?;
                        let d = g.dim() as f64;
                        let diff = &s.mean - g.mean()?;
                        let lambda = g.lambda();
                        let logdet = lambda
                            .clone()
                            .cholesky()
                            .ok_or_else(|| Error::Degenerate("prior precision not positive definite".into()))?
                            .l()
                            .diagonal()
                            .iter()
                            .map(|x| 2.0 * x.ln())
                            .sum::<f64>();
                        d * HALF_LN_2PI - 0.5 * logdet
                            + 0.5 * (diff.dot(&(lambda * &diff)) + (lambda * &s.cov).trace())
                    }
                    Belief::Gamma(g) => {
                        let s = m.positive_moments()?;
                        -(g.alpha() * g.beta().ln() - ln_gamma(g.alpha()) + (g.alpha() - 1.0) * s.log_mean
                            - g.beta() * s.mean)
                    }
                }
            }
            NodeKind::Equality | NodeKind::Clamp(_) | NodeKind::Observation(_) | NodeKind::Unity => 0.0,
        };
        if !term.is_finite() {
            return Err(Error::Degenerate(format!("non-finite energy on node {n} ({})", node.kind.name())));
        }
        node_terms.insert(n, term);
        *groups.entry(node.kind.name().to_string()).or_insert(0.0) += term;
    }

    let mut edge_terms = BTreeMap::new();
    for e in &graph.edges {
        edge_terms.insert(e.id, 0.0);
    }
    let mut entropy_total = 0.0;
    for c in &schedule.clusters {
        if matches!(schedule.roles[c.id], ClusterRole::Conjugate | ClusterRole::Carrier(_)) {
            let e = c.edges[0];
            let m = marginals
                .beliefs
                .get(&e)
                .ok_or_else(|| Error::Domain(format!("missing marginal on edge {e}")))?;
            let h = -m.entropy()?;
            if !h.is_finite() {
                return Err(Error::Degenerate(format!("non-finite entropy on edge {e}")));
            }
            edge_terms.insert(e, h);
            entropy_total += h;
        }
    }
    groups.insert("entropy".to_string(), entropy_total);
    let total = node_terms.values().sum::<f64>() + edge_terms.values().sum::<f64>();
    Ok(BfeBreakdown { node_terms, edge_terms, groups, total })
}

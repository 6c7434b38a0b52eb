//! Inference loop: sweeps over the schedule, updating each free variable
//! from its incoming messages and tracking the Bethe free energy.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::bfe::{bethe_free_energy_with, BfeBreakdown};
use crate::error::{Error, Result};
use crate::exponential_families::{
    Belief, GammaBelief, GaussianBelief, LogGammaMessage, LogNormalMessage, Message, MvGaussianBelief, Natural, Value,
    MAX_EXPONENT,
};
use crate::factor_rules::{
    explink_message, gamma_node_message, normal_bp_to_y, normal_message, softdot_message, ExpPort, GammaNodeInputs,
    GammaPort, NormalInputs, NormalPort, PositiveMoments, ScalarMoments, SoftdotInputs, SoftdotPort, VecMoments,
};
use crate::fixed_point::{solve_gamma_edge, solve_gaussian_edge, SolveStatus, SolverConfig};
use crate::graph::{
    build_schedule, ports, Carrier, ClusterId, ClusterRole, EdgeId, FactorGraph, FamilyConstraint, NodeId, NodeKind,
    Schedule,
};
use crate::special::{digamma, trigamma};

/// Marginal on one edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marginal {
    /// Clamped or observed value.
    Point(Value),
    Belief(Belief),
    /// Image of a Gaussian `z` under `gamma = e^z`.
    LogNormal(LogNormalMessage),
    /// Law of `ln gamma` for a Gamma `gamma`.
    LogGamma(LogGammaMessage),
}

impl Marginal {
    pub fn as_belief(&self) -> Option<&Belief> {
        match self {
            Marginal::Belief(b) => Some(b),
            _ => None,
        }
    }

    pub fn scalar_moments(&self) -> Result<ScalarMoments> {
        match self {
            Marginal::Point(v) => v
                .as_scalar()
                .map(ScalarMoments::point)
                .ok_or_else(|| Error::Dimension("scalar value expected".into())),
            Marginal::Belief(Belief::Gaussian(g)) => Ok(g.into()),
            Marginal::Belief(Belief::MvGaussian(g)) if g.dim() == 1 => {
                let v = VecMoments::try_from(g)?;
                Ok(ScalarMoments { mean: v.mean[0], var: v.cov[(0, 0)] })
            }
            Marginal::LogGamma(lg) => Ok(ScalarMoments { mean: digamma(lg.b) + lg.a.ln(), var: trigamma(lg.b) }),
            other => Err(Error::Family(format!("scalar real marginal expected, got {other:?}"))),
        }
    }

    pub fn vec_moments(&self) -> Result<VecMoments> {
        match self {
            Marginal::Point(v) => Ok(v.into()),
            Marginal::Belief(Belief::MvGaussian(g)) => VecMoments::try_from(g),
            _ => {
                let s = self.scalar_moments()?;
                Ok(VecMoments { mean: DVector::from_element(1, s.mean), cov: DMatrix::from_element(1, 1, s.var) })
            }
        }
    }

    pub fn positive_moments(&self) -> Result<PositiveMoments> {
        match self {
            Marginal::Point(v) => match v.as_scalar() {
                Some(x) if x > 0.0 => Ok(PositiveMoments::point(x)),
                _ => Err(Error::Domain(format!("positive scalar expected, got {v:?}"))),
            },
            Marginal::Belief(Belief::Gamma(g)) => Ok(g.into()),
            Marginal::LogNormal(ln) => {
                let e = ln.m + 0.5 * ln.s2;
                if e > MAX_EXPONENT {
                    return Err(Error::Saturation(format!("E[gamma] = exp({e})")));
                }
                Ok(PositiveMoments { mean: e.exp(), log_mean: ln.m })
            }
            other => Err(Error::Family(format!("positive marginal expected, got {other:?}"))),
        }
    }

    /// Mean and variance of a scalar marginal, whichever its family.
    pub fn mean_var(&self) -> Result<(f64, f64)> {
        match self {
            Marginal::Belief(Belief::Gamma(g)) => Ok((g.mean(), g.alpha() / (g.beta() * g.beta()))),
            Marginal::LogNormal(ln) => {
                let mean = (ln.m + 0.5 * ln.s2).exp();
                Ok((mean, (ln.s2.exp() - 1.0) * mean * mean))
            }
            _ => self.scalar_moments().map(|s| (s.mean, s.var)),
        }
    }

    pub fn entropy(&self) -> Result<f64> {
        match self {
            Marginal::Belief(b) => b.entropy(),
            other => Err(Error::Family(format!("entropy of a free marginal expected, got {other:?}"))),
        }
    }
}

/// Joint Gaussian over the `(y, mu)` ports of a structured normal factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointGaussian {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    /// `Var[y - mu]`.
    pub residual_var: f64,
    pub mutual_info: f64,
}

impl JointGaussian {
    /// Joint of `N(y | mu, 1/tau)` with independent Gaussian cavities given
    /// as (precision, precision-weighted mean). Written without the
    /// cancellation in `(tau + py)(tau + pm) - tau^2` so huge `tau` stays exact.
    pub fn from_cavities(tau: f64, (py, hy): (f64, f64), (pm, hm): (f64, f64)) -> Option<Self> {
        let det = tau * (py + pm) + py * pm;
        if !(det > 0.0) || !det.is_finite() {
            return None;
        }
        let c00 = (tau + pm) / det;
        let c11 = (tau + py) / det;
        let c01 = tau / det;
        let mean = [c00 * hy + c01 * hm, c01 * hy + c11 * hm];
        let mutual_info = 0.5 * ((tau + py) * (tau + pm) / det).ln();
        Some(Self { mean, cov: [[c00, c01], [c01, c11]], residual_var: (py + pm) / det, mutual_info })
    }

    /// `E[(y - mu)^2]`.
    pub fn residual_sq(&self) -> f64 {
        let d = self.mean[0] - self.mean[1];
        d * d + self.residual_var
    }

    pub fn mutual_information(&self) -> f64 {
        self.mutual_info
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeStatus {
    Fixed,
    Conjugate,
    Derived,
    Solved { iterations: usize, gradient_norm: f64, status: SolveStatus },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub beliefs: BTreeMap<EdgeId, Marginal>,
    #[serde(default)]
    pub joints: BTreeMap<NodeId, JointGaussian>,
    pub bfe_trace: Vec<f64>,
    pub status: BTreeMap<EdgeId, EdgeStatus>,
    /// Sum of fixed-point iterations per sweep.
    #[serde(default)]
    pub solver_iterations: Vec<usize>,
}

impl Marginals {
    pub fn get(&self, edge: EdgeId) -> Option<&Marginal> {
        self.beliefs.get(&edge)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("marginals serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub sweeps: usize,
    pub solver: SolverConfig,
    pub initial_beliefs: BTreeMap<EdgeId, Belief>,
    /// Stop once a sweep lowers the free energy by less than this amount.
    pub bfe_early_stop: Option<f64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { sweeps: 5, solver: SolverConfig::default(), initial_beliefs: BTreeMap::new(), bfe_early_stop: None }
    }
}

impl InferenceConfig {
    pub fn with_sweeps(sweeps: usize) -> Self {
        Self { sweeps, ..Self::default() }
    }
}

fn to_family(msg: Message, family: FamilyConstraint) -> Result<Message> {
    Ok(match (msg, family) {
        (Message::MvGaussian(m), FamilyConstraint::Gaussian) if m.dim() == 1 => {
            let (xi, lambda) = (m.xi()[0], m.lambda()[(0, 0)]);
            if lambda == 0.0 && xi == 0.0 {
                Message::Flat
            } else if lambda > 0.0 {
                Message::Gaussian(GaussianBelief::from_natural(xi, -0.5 * lambda)?)
            } else {
                return Err(Error::Degenerate(format!("scalar message with precision {lambda}")));
            }
        }
        (Message::Gaussian(g), FamilyConstraint::MvGaussian(1)) => Message::MvGaussian(MvGaussianBelief::message(
            DVector::from_element(1, g.eta1()),
            DMatrix::from_element(1, 1, -2.0 * g.eta2()),
        )?),
        (m, _) => m,
    })
}

fn product(msgs: Vec<Message>) -> Result<Message> {
    let mut acc: Option<Natural> = None;
    for m in &msgs {
        if let Message::PointMass(_) = m {
            return Ok(m.clone());
        }
        if let Some(n) = Natural::of(m)? {
            acc = Some(match acc {
                None => n,
                Some(a) => a.add(n)?,
            });
        }
    }
    match acc {
        None => Ok(Message::Flat),
        Some(n) => n.into_message(),
    }
}

fn default_belief(family: FamilyConstraint) -> Belief {
    match family {
        FamilyConstraint::Gaussian => Belief::Gaussian(GaussianBelief::standard()),
        FamilyConstraint::MvGaussian(d) => {
            Belief::MvGaussian(MvGaussianBelief::isotropic(DVector::zeros(d), 1.0).expect("unit isotropic"))
        }
        FamilyConstraint::Gamma => Belief::Gamma(GammaBelief::new(1.0, 1.0).expect("unit gamma")),
    }
}

fn belief_to_family(b: &Belief, family: FamilyConstraint) -> Result<Belief> {
    match (b, family) {
        (Belief::MvGaussian(m), FamilyConstraint::Gaussian) if m.dim() == 1 => {
            let v = VecMoments::try_from(m)?;
            Ok(Belief::Gaussian(GaussianBelief::from_moments(v.mean[0], v.cov[(0, 0)])?))
        }
        (Belief::Gaussian(g), FamilyConstraint::MvGaussian(1)) => Ok(Belief::MvGaussian(MvGaussianBelief::from_moments(
            DVector::from_element(1, g.mean()),
            DMatrix::from_element(1, 1, g.var()),
        )?)),
        (b, _) => Ok(b.clone()),
    }
}

fn derived_marginal(carrier: Carrier, b: &Belief) -> Result<Marginal> {
    match (carrier, b) {
        (Carrier::Z, Belief::Gaussian(g)) => Ok(Marginal::LogNormal(LogNormalMessage::new(g.mean(), g.var())?)),
        (Carrier::Gamma, Belief::Gamma(g)) => Ok(Marginal::LogGamma(LogGammaMessage::new(1.0 / g.beta(), g.alpha())?)),
        _ => Err(Error::Family(format!("exp link carrier holds a {} belief", b.family()))),
    }
}

/// Message passing state over one graph.
pub struct Engine<'g> {
    graph: &'g FactorGraph,
    schedule: Schedule,
    table: Vec<Vec<Option<EdgeId>>>,
    diagonal: Vec<bool>,
    state: Marginals,
}

impl<'g> Engine<'g> {
    /// Validates the graph and initializes every marginal.
    pub fn new(graph: &'g FactorGraph, cfg: &InferenceConfig) -> Result<Self> {
        let schedule = build_schedule(graph)?;
        let table = graph.port_table();
        let mut diagonal = vec![false; schedule.clusters.len()];
        let state = Marginals {
            beliefs: BTreeMap::new(),
            joints: BTreeMap::new(),
            bfe_trace: Vec::new(),
            status: BTreeMap::new(),
            solver_iterations: Vec::new(),
        };
        let mut initial: Vec<Option<Belief>> = vec![None; schedule.clusters.len()];
        for c in &schedule.clusters {
            let from_cfg = c.edges.iter().find_map(|e| cfg.initial_beliefs.get(e));
            let from_prior = c.neighbors.iter().find_map(|nb| match &graph.nodes[nb.node].kind {
                NodeKind::Prior(b) => Some(b),
                _ => None,
            });
            diagonal[c.id] = [from_cfg, from_prior]
                .iter()
                .flatten()
                .any(|b| matches!(b, Belief::MvGaussian(m) if m.diagonal_only()));
            let b = match from_cfg.or(from_prior) {
                Some(b) => belief_to_family(b, c.family)?,
                None => default_belief(c.family),
            };
            initial[c.id] = Some(b);
        }
        let mut engine = Self { graph, schedule, table, diagonal, state };
        for c in 0..engine.schedule.clusters.len() {
            let (marginal, status) = match engine.schedule.roles[c].clone() {
                ClusterRole::Fixed(v) => (Marginal::Point(v), EdgeStatus::Fixed),
                ClusterRole::Conjugate => (Marginal::Belief(initial[c].clone().unwrap()), EdgeStatus::Conjugate),
                ClusterRole::Carrier(_) => (
                    Marginal::Belief(initial[c].clone().unwrap()),
                    EdgeStatus::Solved { iterations: 0, gradient_norm: f64::NAN, status: SolveStatus::MaxIterations },
                ),
                ClusterRole::Derived(k) => {
                    let pair = engine.schedule.exp_pairs[k];
                    let other = if pair.z == c { pair.gamma } else { pair.z };
                    let m = match &engine.schedule.roles[other] {
                        ClusterRole::Fixed(v) => {
                            let x = v.as_scalar().ok_or_else(|| Error::Dimension("scalar exp operand".into()))?;
                            if pair.z == c {
                                Marginal::Point(Value::Scalar(x.ln()))
                            } else {
                                if x > MAX_EXPONENT {
                                    return Err(Error::Saturation(format!("exp({x})")));
                                }
                                Marginal::Point(Value::Scalar(x.exp()))
                            }
                        }
                        _ => derived_marginal(pair.carrier, initial[other].as_ref().unwrap())?,
                    };
                    (m, EdgeStatus::Derived)
                }
            };
            engine.set_cluster(c, marginal, status);
        }
        Ok(engine)
    }

    /// Resumes from previously computed marginals, e.g. to inspect messages.
    pub fn from_marginals(graph: &'g FactorGraph, marginals: Marginals) -> Result<Self> {
        let mut engine = Self::new(graph, &InferenceConfig::default())?;
        for (e, m) in &marginals.beliefs {
            if *e >= graph.edges.len() {
                return Err(Error::Graph(format!("marginal for unknown edge {e}")));
            }
            engine.state.beliefs.insert(*e, m.clone());
        }
        engine.state.bfe_trace = marginals.bfe_trace;
        engine.state.status = marginals.status;
        engine.state.solver_iterations = marginals.solver_iterations;
        engine.state.joints = marginals.joints;
        Ok(engine)
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn marginals(&self) -> &Marginals {
        &self.state
    }

    pub fn into_marginals(self) -> Marginals {
        self.state
    }

    fn set_cluster(&mut self, c: ClusterId, m: Marginal, status: EdgeStatus) {
        for &e in &self.schedule.clusters[c].edges {
            self.state.beliefs.insert(e, m.clone());
            self.state.status.insert(e, status);
        }
    }

    fn port_marginal(&self, node: NodeId, port: usize) -> Result<&Marginal> {
        let e = self.table[node][port].ok_or_else(|| Error::Graph(format!("port {port} of node {node} unconnected")))?;
        self.state
            .beliefs
            .get(&e)
            .ok_or_else(|| Error::Domain(format!("missing marginal on edge {e}")))
    }

    fn cluster_of(&self, node: NodeId, port: usize) -> ClusterId {
        self.schedule.cluster_of_edge[self.table[node][port].expect("validated graph")]
    }

    fn family_of(&self, node: NodeId, port: usize) -> FamilyConstraint {
        self.graph.edges[self.table[node][port].expect("validated graph")].family
    }

    /// Product of the messages entering cluster `c`, leaving out the one from `(node, port)`.
    fn cavity(&self, c: ClusterId, skip: Option<(NodeId, usize)>, depth: usize) -> Result<Message> {
        let family = self.schedule.clusters[c].family;
        let mut msgs = Vec::new();
        for nb in &self.schedule.clusters[c].neighbors {
            if Some((nb.node, nb.port)) == skip {
                continue;
            }
            msgs.push(to_family(self.message_at(nb.node, nb.port, depth + 1)?, family)?);
        }
        product(msgs)
    }

    /// Message from `node` toward the edge on `port`.
    pub fn message(&self, node: NodeId, port: usize) -> Result<Message> {
        let family = self.family_of(node, port);
        to_family(self.message_at(node, port, 0)?, family)
    }

    fn message_at(&self, node: NodeId, port: usize, depth: usize) -> Result<Message> {
        if depth > 16 {
            return Err(Error::Graph(format!("message recursion too deep at node {node}")));
        }
        let n = &self.graph.nodes[node];
        match &n.kind {
            NodeKind::Unity => Ok(Message::Flat),
            NodeKind::Prior(b) => Ok(Message::from(b.clone())),
            NodeKind::Clamp(v) | NodeKind::Observation(v) => Ok(Message::PointMass(v.clone())),
            NodeKind::Equality => Err(Error::Graph("equality messages are taken per cluster".into())),
            NodeKind::Softdot => {
                let target = match port {
                    ports::SOFTDOT_Z => SoftdotPort::Z,
                    ports::SOFTDOT_W => SoftdotPort::W,
                    ports::SOFTDOT_PHI => SoftdotPort::Phi,
                    _ => SoftdotPort::Tau,
                };
                let inputs = SoftdotInputs {
                    q_w: (port != ports::SOFTDOT_W)
                        .then(|| self.port_marginal(node, ports::SOFTDOT_W)?.vec_moments())
                        .transpose()?,
                    q_phi: (port != ports::SOFTDOT_PHI)
                        .then(|| self.port_marginal(node, ports::SOFTDOT_PHI)?.vec_moments())
                        .transpose()?,
                    q_tau: (port != ports::SOFTDOT_TAU)
                        .then(|| self.port_marginal(node, ports::SOFTDOT_TAU)?.positive_moments())
                        .transpose()?,
                    q_z: (port != ports::SOFTDOT_Z)
                        .then(|| self.port_marginal(node, ports::SOFTDOT_Z)?.scalar_moments())
                        .transpose()?,
                };
                softdot_message(target, &inputs)
            }
            NodeKind::NormalFactor if n.is_structured_y_mu() => {
                let tau = self.port_marginal(node, ports::NORMAL_TAU)?.positive_moments()?;
                match port {
                    ports::NORMAL_TAU => {
                        let joint = self.joint(node, depth)?;
                        normal_message(
                            NormalPort::Tau,
                            &NormalInputs { joint_residual_sq: Some(joint.residual_sq()), ..Default::default() },
                        )
                    }
                    p => {
                        let other = if p == ports::NORMAL_Y { ports::NORMAL_MU } else { ports::NORMAL_Y };
                        let cav = self.cavity(self.cluster_of(node, other), Some((node, other)), depth)?;
                        match cav {
                            Message::Flat => Ok(Message::Flat),
                            m => normal_bp_to_y(&m, tau.mean),
                        }
                    }
                }
            }
            NodeKind::NormalFactor => {
                let target = match port {
                    ports::NORMAL_Y => NormalPort::Y,
                    ports::NORMAL_MU => NormalPort::Mu,
                    _ => NormalPort::Tau,
                };
                let inputs = NormalInputs {
                    q_y: (port != ports::NORMAL_Y)
                        .then(|| self.port_marginal(node, ports::NORMAL_Y)?.scalar_moments())
                        .transpose()?,
                    q_mu: (port != ports::NORMAL_MU)
                        .then(|| self.port_marginal(node, ports::NORMAL_MU)?.scalar_moments())
                        .transpose()?,
                    q_tau: (port != ports::NORMAL_TAU)
                        .then(|| self.port_marginal(node, ports::NORMAL_TAU)?.positive_moments())
                        .transpose()?,
                    joint_residual_sq: None,
                };
                normal_message(target, &inputs)
            }
            NodeKind::GammaFactor { shape } => {
                let target = if port == ports::GAMMA_OUT { GammaPort::Gamma } else { GammaPort::Beta };
                let inputs = GammaNodeInputs {
                    alpha_clamp: *shape,
                    q_beta: (port != ports::GAMMA_RATE)
                        .then(|| self.port_marginal(node, ports::GAMMA_RATE)?.positive_moments())
                        .transpose()?,
                    q_gamma: (port != ports::GAMMA_OUT)
                        .then(|| self.port_marginal(node, ports::GAMMA_OUT)?.positive_moments())
                        .transpose()?,
                };
                gamma_node_message(target, &inputs)
            }
            NodeKind::ExpLink => {
                let (target, other) =
                    if port == ports::EXP_Z { (ExpPort::Z, ports::EXP_GAMMA) } else { (ExpPort::Gamma, ports::EXP_Z) };
                let incoming = self.cavity(self.cluster_of(node, other), Some((node, other)), depth)?;
                explink_message(target, &incoming)
            }
        }
    }

    /// Joint `q(y, mu)` of a structured normal factor from its two cavities.
    fn joint(&self, node: NodeId, depth: usize) -> Result<JointGaussian> {
        let tau = self.port_marginal(node, ports::NORMAL_TAU)?.positive_moments()?.mean;
        let natural = |m: Message| -> Result<(f64, f64)> {
            match m {
                Message::Flat => Ok((0.0, 0.0)),
                Message::Gaussian(g) => Ok((g.precision(), g.eta1())),
                other => Err(Error::Family(format!("structured normal expects gaussian cavities, got {}", other.family()))),
            }
        };
        let (py, hy) = natural(self.cavity(self.cluster_of(node, ports::NORMAL_Y), Some((node, ports::NORMAL_Y)), depth)?)?;
        let (pm, hm) =
            natural(self.cavity(self.cluster_of(node, ports::NORMAL_MU), Some((node, ports::NORMAL_MU)), depth)?)?;
        JointGaussian::from_cavities(tau, (py, hy), (pm, hm))
            .filter(|j| j.cov[0][0] > 0.0 && j.cov[1][1] > 0.0)
            .ok_or_else(|| Error::Degenerate(format!("joint of normal node {node} is improper")))
    }

    fn refresh_joints(&mut self) -> Result<()> {
        let mut joints = BTreeMap::new();
        for n in &self.graph.nodes {
            if n.is_structured_y_mu() {
                joints.insert(n.id, self.joint(n.id, 0)?);
            }
        }
        self.state.joints = joints;
        Ok(())
    }

    fn update_conjugate(&mut self, c: ClusterId) -> Result<()> {
        let msg = self.cavity(c, None, 0)?;
        let edge = self.schedule.clusters[c].edges[0];
        let belief = match msg {
            Message::Flat => {
                return Err(Error::Degenerate(format!("edge {edge}: no informative message reaches this variable")))
            }
            Message::PointMass(_) => return Err(Error::Graph(format!("edge {edge}: point mass on a free variable"))),
            m => Natural::of(&m)?
                .expect("non-flat message")
                .into_belief()
                .map_err(|e| Error::Degenerate(format!("edge {edge}: {e}")))?,
        };
        let belief = match belief {
            Belief::MvGaussian(m) if self.diagonal[c] => Belief::MvGaussian(m.project_diagonal()?),
            b => b,
        };
        self.set_cluster(c, Marginal::Belief(belief), EdgeStatus::Conjugate);
        Ok(())
    }

    fn update_carrier(&mut self, c: ClusterId, k: usize, solver: &SolverConfig) -> Result<usize> {
        let pair = self.schedule.exp_pairs[k];
        let (own_port, other_port, other) = match pair.carrier {
            Carrier::Z => (ports::EXP_Z, ports::EXP_GAMMA, pair.gamma),
            Carrier::Gamma => (ports::EXP_GAMMA, ports::EXP_Z, pair.z),
        };
        let edge = self.schedule.clusters[c].edges[0];
        let conj = self.cavity(c, Some((pair.node, own_port)), 0)?;
        let far = self.cavity(other, Some((pair.node, other_port)), 0)?;
        let current = self.state.beliefs[&edge].as_belief().cloned();
        let result = match (pair.carrier, conj) {
            (Carrier::Z, Message::Gaussian(conj)) => {
                let lg = match explink_message(ExpPort::Z, &far)? {
                    Message::LogGamma(lg) => lg,
                    Message::Flat => LogGammaMessage::flat(),
                    other => return Err(Error::Family(format!("edge {edge}: unexpected {} message", other.family()))),
                };
                let init = match current {
                    Some(Belief::Gaussian(g)) => g,
                    _ => GaussianBelief::standard(),
                };
                solve_gaussian_edge(&conj, &lg, &init, solver)
            }
            (Carrier::Gamma, Message::Gamma(conj)) => {
                let ln = match explink_message(ExpPort::Gamma, &far)? {
                    Message::LogNormal(ln) => ln,
                    Message::Flat => LogNormalMessage::flat(),
                    other => return Err(Error::Family(format!("edge {edge}: unexpected {} message", other.family()))),
                };
                let init = match current {
                    Some(Belief::Gamma(g)) => g,
                    _ => GammaBelief::new(1.0, 1.0)?,
                };
                solve_gamma_edge(&conj, &ln, &init, solver)
            }
            (_, Message::Flat) => {
                return Err(Error::Degenerate(format!("edge {edge}: no informative message besides the exp link")))
            }
            (_, other) => return Err(Error::Family(format!("edge {edge}: unexpected {} message", other.family()))),
        }
        .map_err(|e| Error::Degenerate(format!("edge {edge}: {e}")))?;
        let derived = derived_marginal(pair.carrier, &result.belief)?;
        self.set_cluster(
            c,
            Marginal::Belief(result.belief.clone()),
            EdgeStatus::Solved {
                iterations: result.iterations_used,
                gradient_norm: result.final_gradient_norm,
                status: result.status,
            },
        );
        self.set_cluster(other, derived, EdgeStatus::Derived);
        Ok(result.iterations_used)
    }

    /// Runs one sweep over the schedule; returns the total solver iterations.
    pub fn sweep(&mut self, solver: &SolverConfig) -> Result<usize> {
        let mut iterations = 0;
        for i in 0..self.schedule.updates.len() {
            let c = self.schedule.updates[i];
            match self.schedule.roles[c] {
                ClusterRole::Carrier(k) => iterations += self.update_carrier(c, k, solver)?,
                ClusterRole::Conjugate => self.update_conjugate(c)?,
                _ => {}
            }
        }
        Ok(iterations)
    }

    pub fn free_energy(&mut self) -> Result<BfeBreakdown> {
        self.refresh_joints()?;
        bethe_free_energy_with(self.graph, &self.schedule, &self.state)
    }

    /// Runs the configured number of sweeps.
    pub fn run(mut self, cfg: &InferenceConfig) -> Result<Marginals> {
        if cfg.sweeps == 0 {
            return Err(Error::Domain("at least one sweep is required".into()));
        }
        let initial = self.free_energy()?.total;
        self.state.bfe_trace.push(initial);
        for _ in 0..cfg.sweeps {
            let its = self.sweep(&cfg.solver)?;
            self.state.solver_iterations.push(its);
            let f = self.free_energy()?.total;
            let prev = *self.state.bfe_trace.last().unwrap();
            self.state.bfe_trace.push(f);
            if cfg.bfe_early_stop.is_some_and(|tol| prev - f < tol) {
                break;
            }
        }
        Ok(self.state)
    }

    /// The two messages on `edge`, one from each endpoint. An equality
    /// endpoint sends the product of the messages arriving from its side.
    pub fn edge_messages(&self, edge: EdgeId) -> Result<(Message, Message)> {
        let e = self.graph.edges.get(edge).ok_or_else(|| Error::Graph(format!("no edge {edge}")))?;
        let family = e.family;
        let mut out = Vec::new();
        for &(node, port) in &e.endpoints {
            let msg = if matches!(self.graph.nodes[node].kind, NodeKind::Equality) {
                self.side_product(node, edge)?
            } else {
                self.message_at(node, port, 0)?
            };
            out.push(to_family(msg, family)?);
        }
        if out.len() != 2 {
            return Err(Error::Graph(format!("edge {edge} is not terminated")));
        }
        let b = out.pop().unwrap();
        let a = out.pop().unwrap();
        Ok((a, b))
    }

    fn side_product(&self, start: NodeId, via: EdgeId) -> Result<Message> {
        let family = self.graph.edges[via].family;
        let mut seen_edges = BTreeSet::from([via]);
        let mut queue = VecDeque::from([start]);
        let mut msgs = Vec::new();
        while let Some(n) = queue.pop_front() {
            for (p, e) in self.table[n].iter().enumerate() {
                let e = e.expect("validated graph");
                if !seen_edges.insert(e) {
                    continue;
                }
                for &(m, mp) in &self.graph.edges[e].endpoints {
                    if (m, mp) == (n, p) {
                        continue;
                    }
                    if matches!(self.graph.nodes[m].kind, NodeKind::Equality) {
                        queue.push_back(m);
                    } else {
                        msgs.push(to_family(self.message_at(m, mp, 0)?, family)?);
                    }
                }
            }
        }
        product(msgs)
    }
}

/// Runs inference with the given configuration.
pub fn infer(graph: &FactorGraph, cfg: &InferenceConfig) -> Result<Marginals> {
    cfg.solver.validate()?;
    Engine::new(graph, cfg)?.run(cfg)
}

/// Belief on an unobserved target edge after inference.
pub fn predictive(graph: &FactorGraph, marginals: &Marginals, target_edge: EdgeId) -> Result<Belief> {
    let edge = graph
        .edges
        .get(target_edge)
        .ok_or_else(|| Error::Graph(format!("no edge {target_edge}")))?;
    match marginals.get(edge.id) {
        Some(Marginal::Belief(b)) => Ok(b.clone()),
        Some(Marginal::Point(_)) => Err(Error::Domain(format!("edge {target_edge} is observed"))),
        Some(other) => Err(Error::Family(format!("edge {target_edge} holds a derived marginal {other:?}"))),
        None => Err(Error::Domain(format!("no marginal on edge {target_edge}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LineType;

    #[test]
    fn prior_with_unity_returns_prior() {
        let mut g = FactorGraph::new();
        let e = g.add_edge(LineType::Solid, FamilyConstraint::Gaussian, "x");
        let p = GaussianBelief::from_moments(1.5, 0.3).unwrap();
        g.prior(e, Belief::Gaussian(p)).unwrap();
        let g = g.terminate();
        let m = infer(&g, &InferenceConfig::with_sweeps(1)).unwrap();
        assert_eq!(predictive(&g, &m, e).unwrap(), Belief::Gaussian(p));
        assert_eq!(m.bfe_trace.len(), 2);
    }

    #[test]
    fn observed_prior_free_energy() {
        let mut g = FactorGraph::new();
        let e = g.add_edge(LineType::Solid, FamilyConstraint::Gaussian, "y");
        g.prior(e, Belief::Gaussian(GaussianBelief::standard())).unwrap();
        g.observe(e, Value::Scalar(0.0)).unwrap();
        let m = infer(&g, &InferenceConfig::with_sweeps(1)).unwrap();
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((m.bfe_trace[1] - half_ln_2pi).abs() < 1e-15);
    }
}

//! Forney-style factor graphs: construction, termination, the properness
//! check on line types, and the per-sweep update schedule.
//!
//! Edges joined by equality nodes form a *cluster* that shares one marginal.
//! The engine updates clusters rather than individual edges; the equality
//! messages are products over the cluster and are never stored separately.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::exponential_families::{Belief, Value};

pub type NodeId = usize;
pub type EdgeId = usize;
pub type ClusterId = usize;

/// Edge annotation; the type system of the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineType {
    Solid,
    Dashed,
    DashDot,
}

impl LineType {
    /// Dashed lines carry Gamma-typed variables; the other two carry Gaussians.
    pub fn is_gamma(self) -> bool {
        self == LineType::Dashed
    }

    fn compatible(self, other: LineType) -> bool {
        self.is_gamma() == other.is_gamma()
    }
}

/// Parametric family a marginal on the edge is restricted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyConstraint {
    Gaussian,
    MvGaussian(usize),
    Gamma,
}

impl FamilyConstraint {
    pub fn is_gamma(self) -> bool {
        self == FamilyConstraint::Gamma
    }

    pub fn dim(self) -> usize {
        match self {
            FamilyConstraint::MvGaussian(d) => d,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Softdot,
    ExpLink,
    /// Gamma factor with a clamped shape.
    GammaFactor { shape: f64 },
    NormalFactor,
    Equality,
    Clamp(Value),
    Observation(Value),
    Unity,
    /// Data factor holding a belief, e.g. a prior or a posterior from an
    /// earlier run.
    Prior(Belief),
}

impl NodeKind {
    pub fn is_deterministic(&self) -> bool {
        matches!(self, NodeKind::ExpLink | NodeKind::Equality)
    }

    pub fn is_terminator(&self) -> bool {
        matches!(
            self,
            NodeKind::Clamp(_) | NodeKind::Observation(_) | NodeKind::Unity | NodeKind::Prior(_)
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Softdot => "softdot",
            NodeKind::ExpLink => "exp_link",
            NodeKind::GammaFactor { .. } => "gamma",
            NodeKind::NormalFactor => "normal",
            NodeKind::Equality => "equality",
            NodeKind::Clamp(_) => "clamp",
            NodeKind::Observation(_) => "observation",
            NodeKind::Unity => "unity",
            NodeKind::Prior(_) => "prior",
        }
    }
}

pub mod ports {
    pub const SOFTDOT_Z: usize = 0;
    pub const SOFTDOT_W: usize = 1;
    pub const SOFTDOT_PHI: usize = 2;
    pub const SOFTDOT_TAU: usize = 3;
    pub const EXP_Z: usize = 0;
    pub const EXP_GAMMA: usize = 1;
    pub const GAMMA_OUT: usize = 0;
    pub const GAMMA_RATE: usize = 1;
    pub const NORMAL_Y: usize = 0;
    pub const NORMAL_MU: usize = 1;
    pub const NORMAL_TAU: usize = 2;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Port {
    pub name: String,
    pub line: LineType,
}

fn port(name: &str, line: LineType) -> Port {
    Port { name: name.to_string(), line }
}

/// Per-node factorization constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factorization {
    NaiveMeanField,
    /// Groups of port names whose marginals are kept joint.
    Structured(Vec<Vec<String>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub ports: Vec<Port>,
    pub factorization: Factorization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl FactorNode {
    pub fn port_index(&self, name: &str) -> Option<usize> {
        self.ports.iter().position(|p| p.name == name)
    }

    /// True when the node keeps `q(y, mu)` joint (normal factors only).
    pub fn is_structured_y_mu(&self) -> bool {
        matches!(self.kind, NodeKind::NormalFactor)
            && matches!(&self.factorization, Factorization::Structured(groups)
                if groups.iter().any(|g| g.iter().any(|p| p == "y") && g.iter().any(|p| p == "mu")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: EdgeId,
    pub line: LineType,
    pub family: FamilyConstraint,
    /// `(node, port index)` pairs; exactly two once terminated.
    pub endpoints: Vec<(NodeId, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FactorGraph {
    pub nodes: Vec<FactorNode>,
    pub edges: Vec<Edge>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    /// Adds a factor or terminator node with the canonical ports of its kind.
    /// Terminators take their line from `terminator_line`; use
    /// [`FactorGraph::add_equality`] for equality nodes.
    pub fn add_factor(&mut self, kind: NodeKind) -> NodeId {
        let ports = match &kind {
            NodeKind::Softdot => vec![
                port("z", LineType::Solid),
                port("w", LineType::Solid),
                port("phi", LineType::Solid),
                port("tau", LineType::Dashed),
            ],
            NodeKind::ExpLink => vec![port("z", LineType::DashDot), port("gamma", LineType::Dashed)],
            NodeKind::GammaFactor { .. } => vec![port("gamma", LineType::Dashed), port("beta", LineType::Dashed)],
            NodeKind::NormalFactor => vec![
                port("y", LineType::Solid),
                port("mu", LineType::Solid),
                port("tau", LineType::Dashed),
            ],
            NodeKind::Equality => vec![
                port("0", LineType::Solid),
                port("1", LineType::Solid),
                port("2", LineType::Solid),
            ],
            NodeKind::Prior(Belief::Gamma(_)) => vec![port("out", LineType::Dashed)],
            _ => vec![port("out", LineType::Solid)],
        };
        let factorization = if kind.is_deterministic() {
            Factorization::Structured(vec![ports.iter().map(|p| p.name.clone()).collect()])
        } else {
            Factorization::NaiveMeanField
        };
        let id = self.nodes.len();
        self.nodes.push(FactorNode { id, kind, ports, factorization, label: None });
        id
    }

    /// Adds an equality node with `degree` ports of the given line type.
    pub fn add_equality(&mut self, degree: usize, line: LineType) -> NodeId {
        let id = self.nodes.len();
        let ports: Vec<Port> = (0..degree).map(|k| port(&k.to_string(), line)).collect();
        let factorization = Factorization::Structured(vec![ports.iter().map(|p| p.name.clone()).collect()]);
        self.nodes.push(FactorNode { id, kind: NodeKind::Equality, ports, factorization, label: None });
        id
    }

    pub fn set_label(&mut self, node: NodeId, label: impl Into<String>) {
        self.nodes[node].label = Some(label.into());
    }

    pub fn set_factorization(&mut self, node: NodeId, f: Factorization) {
        self.nodes[node].factorization = f;
    }

    pub fn add_edge(&mut self, line: LineType, family: FamilyConstraint, label: impl Into<String>) -> EdgeId {
        let id = self.edges.len();
        self.edges.push(Edge { id, line, family, endpoints: Vec::new(), label: Some(label.into()) });
        id
    }

    /// Joins `node`'s port `port_name` to `edge`.
    pub fn connect(&mut self, node: NodeId, port_name: &str, edge: EdgeId) -> Result<()> {
        let n = self
            .nodes
            .get(node)
            .ok_or_else(|| Error::Graph(format!("no node {node}")))?;
        let p = n
            .port_index(port_name)
            .ok_or_else(|| Error::Graph(format!("node {node} ({}) has no port `{port_name}`", n.kind.name())))?;
        self.connect_index(node, p, edge)
    }

    pub fn connect_index(&mut self, node: NodeId, port_index: usize, edge: EdgeId) -> Result<()> {
        let line = self.nodes[node].ports[port_index].line;
        if self.port_edge(node, port_index).is_some() {
            return Err(Error::Graph(format!("port {port_index} of node {node} already connected")));
        }
        let e = self
            .edges
            .get_mut(edge)
            .ok_or_else(|| Error::Graph(format!("no edge {edge}")))?;
        if e.endpoints.len() >= 2 {
            return Err(Error::Graph(format!("edge {edge} already has two endpoints")));
        }
        if !e.line.compatible(line) {
            return Err(Error::Graph(format!(
                "edge {edge} is {:?} but port {port_index} of node {node} is {:?}",
                e.line, line
            )));
        }
        e.endpoints.push((node, port_index));
        Ok(())
    }

    fn terminator_on(&mut self, kind: NodeKind, edge: EdgeId) -> Result<NodeId> {
        let line = self.edges[edge].line;
        let id = self.add_factor(kind);
        self.nodes[id].ports[0].line = line;
        self.connect_index(id, 0, edge)?;
        Ok(id)
    }

    /// Fixes an edge to a known parameter value.
    pub fn clamp(&mut self, edge: EdgeId, value: Value) -> Result<NodeId> {
        self.terminator_on(NodeKind::Clamp(value), edge)
    }

    /// Attaches observed data to an edge.
    pub fn observe(&mut self, edge: EdgeId, value: Value) -> Result<NodeId> {
        self.terminator_on(NodeKind::Observation(value), edge)
    }

    /// Attaches a belief-valued data factor to an edge.
    pub fn prior(&mut self, edge: EdgeId, belief: Belief) -> Result<NodeId> {
        self.terminator_on(NodeKind::Prior(belief), edge)
    }

    pub fn unity(&mut self, edge: EdgeId) -> Result<NodeId> {
        self.terminator_on(NodeKind::Unity, edge)
    }

    /// Closes every half-edge with a unity factor.
    pub fn terminate(mut self) -> Self {
        let open: Vec<EdgeId> = self.edges.iter().filter(|e| e.endpoints.len() == 1).map(|e| e.id).collect();
        for e in open {
            self.unity(e).expect("unity fits any half-edge");
        }
        self
    }

    /// Edge attached to `(node, port)`, if any.
    pub fn port_edge(&self, node: NodeId, port_index: usize) -> Option<EdgeId> {
        self.edges
            .iter()
            .find(|e| e.endpoints.contains(&(node, port_index)))
            .map(|e| e.id)
    }

    /// Table `node -> port -> edge` for a well-formed graph.
    pub fn port_table(&self) -> Vec<Vec<Option<EdgeId>>> {
        let mut table: Vec<Vec<Option<EdgeId>>> = self.nodes.iter().map(|n| vec![None; n.ports.len()]).collect();
        for e in &self.edges {
            for &(n, p) in &e.endpoints {
                if let Some(slot) = table.get_mut(n).and_then(|row| row.get_mut(p)) {
                    *slot = Some(e.id);
                }
            }
        }
        table
    }

    pub fn edge_by_label(&self, label: &str) -> Option<EdgeId> {
        self.edges.iter().find(|e| e.label.as_deref() == Some(label)).map(|e| e.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub node: Option<NodeId>,
    pub edge: Option<EdgeId>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.node, self.edge) {
            (Some(n), Some(e)) => write!(f, "node {n}, edge {e}: {}", self.message),
            (Some(n), None) => write!(f, "node {n}: {}", self.message),
            (None, Some(e)) => write!(f, "edge {e}: {}", self.message),
            (None, None) => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_proper(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, node: Option<NodeId>, edge: Option<EdgeId>, message: impl Into<String>) {
        self.violations.push(Violation { node, edge, message: message.into() });
    }
}

fn value_fits(value: &Value, family: FamilyConstraint) -> bool {
    match family {
        FamilyConstraint::Gamma => value.as_scalar().is_some_and(|v| v > 0.0 && v.is_finite()),
        FamilyConstraint::Gaussian => value.as_scalar().is_some_and(f64::is_finite),
        FamilyConstraint::MvGaussian(d) => value.dim() == d && value.as_vector().iter().all(|v| v.is_finite()),
    }
}

fn belief_fits(b: &Belief, family: FamilyConstraint) -> bool {
    match (b, family) {
        (Belief::Gaussian(_), FamilyConstraint::Gaussian) => true,
        (Belief::Gaussian(_), FamilyConstraint::MvGaussian(1)) => true,
        (Belief::MvGaussian(m), FamilyConstraint::MvGaussian(d)) => m.dim() == d,
        (Belief::MvGaussian(m), FamilyConstraint::Gaussian) => m.dim() == 1,
        (Belief::Gamma(_), FamilyConstraint::Gamma) => true,
        _ => false,
    }
}

/// Checks that the graph is terminated and respects the line types.
pub fn validate_proper(graph: &FactorGraph) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n_nodes = graph.nodes.len();
    let mut seen: BTreeMap<(NodeId, usize), EdgeId> = BTreeMap::new();

    for (k, node) in graph.nodes.iter().enumerate() {
        if node.id != k {
            report.push(Some(k), None, format!("node id {} stored at position {k}", node.id));
        }
        let arity_ok = match &node.kind {
            NodeKind::Softdot => node.ports.len() == 4,
            NodeKind::ExpLink => node.ports.len() == 2,
            NodeKind::GammaFactor { shape } => {
                if !(*shape > 0.0) {
                    report.push(Some(k), None, format!("gamma factor shape {shape} not positive"));
                }
                node.ports.len() == 2
            }
            NodeKind::NormalFactor => node.ports.len() == 3,
            NodeKind::Equality => node.ports.len() >= 3,
            _ => node.ports.len() == 1,
        };
        if !arity_ok {
            report.push(Some(k), None, format!("{} node has {} ports", node.kind.name(), node.ports.len()));
        }
        if node.kind.is_deterministic() && node.factorization == Factorization::NaiveMeanField {
            report.push(Some(k), None, "deterministic node cannot be mean-field factorized");
        }
        if let Factorization::Structured(groups) = &node.factorization {
            for g in groups {
                for p in g {
                    if node.port_index(p).is_none() {
                        report.push(Some(k), None, format!("structured group names unknown port `{p}`"));
                    }
                }
            }
            if !node.kind.is_deterministic() && !matches!(node.kind, NodeKind::NormalFactor) {
                report.push(Some(k), None, "structured factorization only supported on normal factors");
            }
        }
        let expected: Option<Vec<bool>> = match &node.kind {
            NodeKind::Softdot => Some(vec![false, false, false, true]),
            NodeKind::ExpLink => Some(vec![false, true]),
            NodeKind::GammaFactor { .. } => Some(vec![true, true]),
            NodeKind::NormalFactor => Some(vec![false, false, true]),
            _ => None,
        };
        if let Some(expected) = expected {
            for (p, (port, gamma)) in node.ports.iter().zip(expected).enumerate() {
                if port.line.is_gamma() != gamma {
                    report.push(Some(k), None, format!("port {p} (`{}`) has the wrong line type", port.name));
                }
            }
        }
    }

    for (k, edge) in graph.edges.iter().enumerate() {
        if edge.id != k {
            report.push(None, Some(k), format!("edge id {} stored at position {k}", edge.id));
        }
        // every line-type disagreement of one edge is reported as one violation
        let mut line_problems = Vec::new();
        let mut line_node = None;
        if edge.line.is_gamma() != edge.family.is_gamma() {
            line_problems.push(format!("{:?} family", edge.family));
        }
        if edge.endpoints.len() != 2 {
            report.push(None, Some(k), format!("edge has {} endpoints, expected 2", edge.endpoints.len()));
        }
        for &(n, p) in &edge.endpoints {
            let Some(node) = graph.nodes.get(n) else {
                report.push(None, Some(k), format!("endpoint refers to missing node {n}"));
                continue;
            };
            let Some(port) = node.ports.get(p) else {
                report.push(Some(n), Some(k), format!("endpoint refers to missing port {p}"));
                continue;
            };
            if let Some(other) = seen.insert((n, p), k) {
                report.push(Some(n), Some(k), format!("port {p} also connected to edge {other}"));
            }
            if !port.line.compatible(edge.line) {
                line_node.get_or_insert(n);
                line_problems.push(format!("{:?} port `{}` of {} node {n}", port.line, port.name, node.kind.name()));
            }
            match &node.kind {
                NodeKind::Clamp(v) | NodeKind::Observation(v) if !value_fits(v, edge.family) => {
                    report.push(Some(n), Some(k), "terminator value does not fit the edge family");
                }
                NodeKind::Prior(b) if !belief_fits(b, edge.family) => {
                    report.push(Some(n), Some(k), "prior belief does not fit the edge family");
                }
                NodeKind::ExpLink | NodeKind::NormalFactor if matches!(edge.family, FamilyConstraint::MvGaussian(d) if d != 1) => {
                    report.push(Some(n), Some(k), "scalar port joined to a vector edge");
                }
                NodeKind::Softdot if p == ports::SOFTDOT_Z && matches!(edge.family, FamilyConstraint::MvGaussian(d) if d != 1) => {
                    report.push(Some(n), Some(k), "softdot output must be scalar");
                }
                _ => {}
            }
        }
        if !line_problems.is_empty() {
            report.push(line_node, Some(k), format!("{:?} line disagrees with {}", edge.line, line_problems.join(", ")));
        }
    }

    let table = graph.port_table();
    for (n, row) in table.iter().enumerate() {
        for (p, slot) in row.iter().enumerate() {
            if slot.is_none() {
                report.push(Some(n), None, format!("port {p} is not connected"));
            }
        }
        if matches!(graph.nodes[n].kind, NodeKind::Equality) {
            let families: Vec<FamilyConstraint> = row.iter().flatten().map(|&e| graph.edges[e].family).collect();
            if families.windows(2).any(|w| w[0] != w[1]) {
                report.push(Some(n), None, "equality node joins edges of different families");
            }
        }
        if matches!(graph.nodes[n].kind, NodeKind::Softdot) {
            if let (Some(Some(w)), Some(Some(phi))) = (row.get(ports::SOFTDOT_W), row.get(ports::SOFTDOT_PHI)) {
                if graph.edges[*w].family.dim() != graph.edges[*phi].family.dim() {
                    report.push(Some(n), None, "softdot weight and feature dimensions differ");
                }
            }
        }
    }

    if report.is_proper() && n_nodes > 0 {
        let clusters = clusters_of(graph);
        for c in &clusters {
            let exps: Vec<NodeId> = c
                .neighbors
                .iter()
                .filter(|nb| matches!(graph.nodes[nb.node].kind, NodeKind::ExpLink))
                .map(|nb| nb.node)
                .collect();
            if exps.len() > 1 {
                report.push(
                    Some(exps[1]),
                    Some(c.edges[0]),
                    "variable touches more than one exp link; the marginal has no closed-form objective",
                );
            }
            let fixed: Vec<&NodeKind> = c
                .neighbors
                .iter()
                .map(|nb| &graph.nodes[nb.node].kind)
                .filter(|k| matches!(k, NodeKind::Clamp(_) | NodeKind::Observation(_)))
                .collect();
            if fixed.len() > 1 {
                report.push(None, Some(c.edges[0]), "variable is clamped or observed more than once");
            }
        }
    }
    report
}

/// A non-equality factor touching a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighbor {
    pub node: NodeId,
    pub port: usize,
    pub edge: EdgeId,
}

/// Edges tied together by equality nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: ClusterId,
    pub edges: Vec<EdgeId>,
    pub family: FamilyConstraint,
    pub neighbors: Vec<Neighbor>,
}

/// Groups edges into clusters; cluster ids follow the smallest edge id.
pub fn clusters_of(graph: &FactorGraph) -> Vec<Cluster> {
    let n = graph.edges.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        let mut y = x;
        while parent[y] != r {
            let next = parent[y];
            parent[y] = r;
            y = next;
        }
        r
    }
    let table = graph.port_table();
    for (node, row) in table.iter().enumerate() {
        if matches!(graph.nodes[node].kind, NodeKind::Equality) {
            let edges: Vec<EdgeId> = row.iter().flatten().copied().collect();
            for w in edges.windows(2) {
                let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut by_root: BTreeMap<usize, Vec<EdgeId>> = BTreeMap::new();
    for e in 0..n {
        let r = find(&mut parent, e);
        by_root.entry(r).or_default().push(e);
    }
    by_root
        .into_values()
        .enumerate()
        .map(|(id, edges)| {
            let mut neighbors = Vec::new();
            for &e in &edges {
                for &(node, port) in &graph.edges[e].endpoints {
                    if !matches!(graph.nodes[node].kind, NodeKind::Equality) {
                        neighbors.push(Neighbor { node, port, edge: e });
                    }
                }
            }
            let family = graph.edges[edges[0]].family;
            Cluster { id, edges, family, neighbors }
        })
        .collect()
}

/// Which side of an exp link holds the free marginal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Carrier {
    /// Gaussian `q(z)`; `gamma = e^z` follows.
    Z,
    /// Gamma `q(gamma)`; `z = ln gamma` follows.
    Gamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpPair {
    pub node: NodeId,
    pub z: ClusterId,
    pub gamma: ClusterId,
    pub carrier: Carrier,
}

/// Role of a cluster within one sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterRole {
    /// Clamped or observed value.
    Fixed(Value),
    /// Free marginal updated by the product of its incoming messages.
    Conjugate,
    /// Free marginal on one side of an exp link, solved by the fixed-point module.
    Carrier(usize),
    /// Deterministic image of the carrier across exp link `pair`.
    Derived(usize),
}

/// Deterministic per-sweep plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub clusters: Vec<Cluster>,
    pub roles: Vec<ClusterRole>,
    pub exp_pairs: Vec<ExpPair>,
    /// Cluster update order within a sweep.
    pub updates: Vec<ClusterId>,
    /// Every `(node, edge)` message, in the order consumed by `updates`
    /// followed by the messages into fixed and derived clusters.
    pub messages: Vec<(NodeId, EdgeId)>,
    pub cluster_of_edge: Vec<ClusterId>,
}

fn fixed_value(graph: &FactorGraph, c: &Cluster) -> Option<Value> {
    c.neighbors.iter().find_map(|nb| match &graph.nodes[nb.node].kind {
        NodeKind::Clamp(v) | NodeKind::Observation(v) => Some(v.clone()),
        _ => None,
    })
}

fn count_informative(graph: &FactorGraph, c: &Cluster) -> usize {
    c.neighbors
        .iter()
        .filter(|nb| !matches!(graph.nodes[nb.node].kind, NodeKind::Unity | NodeKind::ExpLink))
        .count()
}

/// Builds the sweep plan: exp-link marginals first, then local conjugate
/// variables, then shared parameters (variables with more than two factors).
pub fn build_schedule(graph: &FactorGraph) -> Result<Schedule> {
    let report = validate_proper(graph);
    if !report.is_proper() {
        let lines: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::Graph(format!("graph is not proper: {}", lines.join("; "))));
    }
    let clusters = clusters_of(graph);
    let mut cluster_of_edge = vec![0; graph.edges.len()];
    for c in &clusters {
        for &e in &c.edges {
            cluster_of_edge[e] = c.id;
        }
    }
    let mut roles: Vec<ClusterRole> = clusters
        .iter()
        .map(|c| match fixed_value(graph, c) {
            Some(v) => ClusterRole::Fixed(v),
            None => ClusterRole::Conjugate,
        })
        .collect();

    let mut exp_pairs = Vec::new();
    for node in &graph.nodes {
        if !matches!(node.kind, NodeKind::ExpLink) {
            continue;
        }
        let z = cluster_of_edge[graph.port_edge(node.id, ports::EXP_Z).expect("validated")];
        let gamma = cluster_of_edge[graph.port_edge(node.id, ports::EXP_GAMMA).expect("validated")];
        let carrier = if count_informative(graph, &clusters[gamma]) >= 2 { Carrier::Gamma } else { Carrier::Z };
        let k = exp_pairs.len();
        exp_pairs.push(ExpPair { node: node.id, z, gamma, carrier });
        let (free, other) = match carrier {
            Carrier::Z => (z, gamma),
            Carrier::Gamma => (gamma, z),
        };
        match (&roles[z], &roles[gamma]) {
            (ClusterRole::Fixed(_), ClusterRole::Fixed(_)) => {}
            (ClusterRole::Fixed(_), _) => roles[gamma] = ClusterRole::Derived(k),
            (_, ClusterRole::Fixed(_)) => roles[z] = ClusterRole::Derived(k),
            _ => {
                roles[free] = ClusterRole::Carrier(k);
                roles[other] = ClusterRole::Derived(k);
            }
        }
    }

    let class = |c: &Cluster| -> Option<usize> {
        match roles[c.id] {
            ClusterRole::Carrier(_) => Some(0),
            ClusterRole::Conjugate => Some(if count_informative(graph, c) > 2 { 2 } else { 1 }),
            _ => None,
        }
    };
    let mut updates: Vec<(usize, ClusterId)> = clusters.iter().filter_map(|c| class(c).map(|k| (k, c.id))).collect();
    updates.sort();
    let updates: Vec<ClusterId> = updates.into_iter().map(|(_, c)| c).collect();

    let mut messages = Vec::new();
    let mut order: Vec<ClusterId> = updates.clone();
    order.extend(clusters.iter().map(|c| c.id).filter(|c| !updates.contains(c)));
    for c in order {
        for &e in &clusters[c].edges {
            for &(node, _) in &graph.edges[e].endpoints {
                messages.push((node, e));
            }
        }
    }
    Ok(Schedule { clusters, roles, exp_pairs, updates, messages, cluster_of_edge })
}

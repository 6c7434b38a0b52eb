//! Builders for the ensemble models, a synthetic data generator and the
//! fit/predict pipeline used by the CLI.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::engine::{infer, InferenceConfig, Marginal, Marginals};
use crate::error::{Error, Result};
use crate::exponential_families::{Belief, GammaBelief, GaussianBelief, MvGaussianBelief, Value};
use crate::graph::{EdgeId, FactorGraph, Factorization, FamilyConstraint, LineType, NodeId, NodeKind};

/// Features, expert predictions and (optionally) targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleData {
    /// `m x d` raw features; the builders append a constant 1.
    pub features: DMatrix<f64>,
    /// `n x m`: row `i` holds expert `i`'s predictions.
    pub predictions: DMatrix<f64>,
    pub targets: Option<DVector<f64>>,
}

impl EnsembleData {
    pub fn new(features: DMatrix<f64>, predictions: DMatrix<f64>, targets: Option<DVector<f64>>) -> Result<Self> {
        let m = features.nrows();
        if predictions.ncols() != m {
            return Err(Error::Shape(format!(
                "features have {m} rows but predictions have {} columns",
                predictions.ncols()
            )));
        }
        if let Some(t) = &targets {
            if t.len() != m {
                return Err(Error::Shape(format!("features have {m} rows but targets have {} entries", t.len())));
            }
        }
        if predictions.nrows() == 0 {
            return Err(Error::Shape("no experts".into()));
        }
        if m == 0 {
            return Err(Error::Shape("no observations".into()));
        }
        let finite = features.iter().chain(predictions.iter()).chain(targets.iter().flat_map(|t| t.iter())).all(|x| x.is_finite());
        if !finite {
            return Err(Error::Domain("non-finite entry in the data".into()));
        }
        Ok(Self { features, predictions, targets })
    }

    pub fn n_experts(&self) -> usize {
        self.predictions.nrows()
    }

    pub fn n_obs(&self) -> usize {
        self.features.nrows()
    }

    /// Dimension of the feature map, including the bias.
    pub fn phi_dim(&self) -> usize {
        self.features.ncols() + 1
    }

    /// Feature map of row `j`: raw features with a trailing 1.
    pub fn phi(&self, j: usize) -> Vec<f64> {
        let mut v: Vec<f64> = self.features.row(j).iter().copied().collect();
        v.push(1.0);
        v
    }

    /// Rows `rows` of the data set.
    pub fn subset(&self, rows: std::ops::Range<usize>) -> Result<Self> {
        let idx: Vec<usize> = rows.collect();
        let features = self.features.select_rows(idx.iter());
        let predictions = self.predictions.select_columns(idx.iter());
        let targets = self.targets.as_ref().map(|t| DVector::from_iterator(idx.len(), idx.iter().map(|&k| t[k])));
        Self::new(features, predictions, targets)
    }

    pub fn without_targets(&self) -> Self {
        Self { targets: None, ..self.clone() }
    }
}

/// Precision parameter that is either learned under a Gamma prior or fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionSpec {
    Learned(GammaBelief),
    Fixed(f64),
}

/// Per-expert priors of the precision-gated models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPriors {
    pub w: MvGaussianBelief,
    pub tau: GammaBelief,
    pub beta: GammaBelief,
    pub kappa: PrecisionSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgePriors {
    pub experts: Vec<ExpertPriors>,
}

impl PgePriors {
    /// `w ~ N(0, I)`, `tau, kappa ~ G(1, 1)` and `beta` held near 0.01 so
    /// the `Gamma(1, beta)` factor on each precision stays nearly flat. A
    /// loosely held `beta` lets the precisions and `beta` co-drift toward a
    /// degenerate solution (small precisions, large rate).
    pub fn standard(n: usize, d: usize) -> Self {
        let unit = GammaBelief::new(1.0, 1.0).expect("unit gamma");
        let beta = GammaBelief::new(1e3, 1e5).expect("beta prior");
        let w = MvGaussianBelief::isotropic(DVector::zeros(d), 1.0).expect("unit isotropic");
        Self {
            experts: (0..n)
                .map(|_| ExpertPriors { w: w.clone(), tau: unit, beta, kappa: PrecisionSpec::Learned(unit) })
                .collect(),
        }
    }

    fn check(&self, n: usize, d: usize) -> Result<()> {
        if self.experts.len() != n {
            return Err(Error::Shape(format!("{} expert priors for {n} experts", self.experts.len())));
        }
        for (i, e) in self.experts.iter().enumerate() {
            if e.w.dim() != d {
                return Err(Error::Shape(format!("expert {i}: w prior has dimension {}, features {d}", e.w.dim())));
            }
            if let PrecisionSpec::Fixed(v) = e.kappa {
                if !(v > 0.0) {
                    return Err(Error::Domain(format!("expert {i}: fixed kappa must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }
}

/// Edge handles of a built ensemble model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpertEdges {
    pub gamma: Option<EdgeId>,
    pub w: Option<EdgeId>,
    pub tau: Option<EdgeId>,
    pub beta: Option<EdgeId>,
    pub kappa: Option<EdgeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuiltModel {
    pub graph: FactorGraph,
    /// One edge of each target variable `y_j`.
    pub y: Vec<EdgeId>,
    pub experts: Vec<ExpertEdges>,
    /// `precision[i][j]`: the precision edge of expert `i` on observation `j`.
    pub precision: Vec<Vec<EdgeId>>,
}

enum Term {
    None,
    Prior(Belief),
    Observe(Value),
    Clamp(Value),
}

/// Creates one variable joining `endpoints` (node, port name) and an
/// optional terminator. Shared variables always get an equality node
/// (padded to degree 3); local ones are a single edge when possible.
fn variable(
    g: &mut FactorGraph,
    line: LineType,
    family: FamilyConstraint,
    label: &str,
    endpoints: &[(NodeId, &str)],
    term: Term,
    shared: bool,
) -> Result<EdgeId> {
    let k = endpoints.len() + usize::from(!matches!(term, Term::None));
    let attach = |g: &mut FactorGraph, e: EdgeId, term: Term| -> Result<()> {
        match term {
            Term::None => {}
            Term::Prior(b) => {
                g.prior(e, b)?;
            }
            Term::Observe(v) => {
                g.observe(e, v)?;
            }
            Term::Clamp(v) => {
                g.clamp(e, v)?;
            }
        }
        Ok(())
    };
    if !shared && k <= 2 {
        let e = g.add_edge(line, family, label);
        for (n, p) in endpoints {
            g.connect(*n, p, e)?;
        }
        attach(g, e, term)?;
        return Ok(e);
    }
    let eq = g.add_equality(k.max(3), line);
    g.set_label(eq, label);
    let mut first = None;
    let mut slot = 0;
    for (n, p) in endpoints {
        let e = g.add_edge(line, family, format!("{label}#{slot}"));
        g.connect(*n, p, e)?;
        g.connect_index(eq, slot, e)?;
        first.get_or_insert(e);
        slot += 1;
    }
    if !matches!(term, Term::None) {
        let e = g.add_edge(line, family, format!("{label}#{slot}"));
        g.connect_index(eq, slot, e)?;
        attach(g, e, term)?;
        first.get_or_insert(e);
        slot += 1;
    }
    while slot < k.max(3) {
        let e = g.add_edge(line, family, format!("{label}#{slot}"));
        g.connect_index(eq, slot, e)?;
        g.unity(e)?;
        first.get_or_insert(e);
        slot += 1;
    }
    Ok(first.expect("at least one edge"))
}

fn gaussian_line() -> (LineType, FamilyConstraint) {
    (LineType::Solid, FamilyConstraint::Gaussian)
}

fn gamma_line() -> (LineType, FamilyConstraint) {
    (LineType::Dashed, FamilyConstraint::Gamma)
}

fn check_predictions(predictions: &DMatrix<f64>, targets: Option<&[f64]>) -> Result<(usize, usize)> {
    let (n, m) = predictions.shape();
    if n == 0 {
        return Err(Error::Shape("empty model: no experts".into()));
    }
    if m == 0 {
        return Err(Error::Shape("empty model: no observations".into()));
    }
    if let Some(t) = targets {
        if t.len() != m {
            return Err(Error::Shape(format!("{m} prediction columns but {} targets", t.len())));
        }
    }
    Ok((n, m))
}

/// Static ensemble: one precision per expert shared across observations.
///
/// Layout: `n` gamma factors (rate clamped), `n * m` normal factors,
/// one equality node per expert precision and per target.
pub fn build_depth0(predictions: &DMatrix<f64>, targets: Option<&[f64]>, gamma: &[PrecisionSpec]) -> Result<BuiltModel> {
    let (n, m) = check_predictions(predictions, targets)?;
    if gamma.len() != n {
        return Err(Error::Shape(format!("{} precision priors for {n} experts", gamma.len())));
    }
    let mut g = FactorGraph::new();
    let (sl, sf) = gaussian_line();
    let (dl, df) = gamma_line();
    let mut likelihood = vec![vec![0; m]; n];
    for (i, row) in likelihood.iter_mut().enumerate() {
        for (j, node) in row.iter_mut().enumerate() {
            *node = g.add_factor(NodeKind::NormalFactor);
            g.set_label(*node, format!("likelihood[{i},{j}]"));
            variable(&mut g, sl, sf, &format!("yhat[{i},{j}]"), &[(*node, "y")], Term::Observe(Value::Scalar(predictions[(i, j)])), false)?;
        }
    }
    let mut experts = Vec::new();
    let mut precision = Vec::new();
    for (i, spec) in gamma.iter().enumerate() {
        let ends: Vec<(NodeId, &str)> = likelihood[i].iter().map(|&nd| (nd, "tau")).collect();
        let e = match spec {
            PrecisionSpec::Learned(prior) => {
                let gf = g.add_factor(NodeKind::GammaFactor { shape: prior.alpha() });
                variable(&mut g, dl, df, &format!("rate[{i}]"), &[(gf, "beta")], Term::Clamp(Value::Scalar(prior.beta())), false)?;
                let mut all = vec![(gf, "gamma")];
                all.extend(ends);
                variable(&mut g, dl, df, &format!("gamma[{i}]"), &all, Term::None, true)?
            }
            PrecisionSpec::Fixed(v) => {
                variable(&mut g, dl, df, &format!("gamma[{i}]"), &ends, Term::Clamp(Value::Scalar(*v)), true)?
            }
        };
        experts.push(ExpertEdges { gamma: Some(e), ..Default::default() });
        precision.push(vec![e; m]);
    }
    let y = attach_targets(&mut g, &likelihood, "mu", targets)?;
    Ok(BuiltModel { graph: g, y, experts, precision })
}

fn attach_targets(g: &mut FactorGraph, likelihood: &[Vec<NodeId>], port: &str, targets: Option<&[f64]>) -> Result<Vec<EdgeId>> {
    let (sl, sf) = gaussian_line();
    let m = likelihood[0].len();
    let mut y = Vec::with_capacity(m);
    for j in 0..m {
        let ends: Vec<(NodeId, &str)> = likelihood.iter().map(|row| (row[j], port)).collect();
        let term = match targets {
            Some(t) => Term::Observe(Value::Scalar(t[j])),
            None => Term::None,
        };
        y.push(variable(g, sl, sf, &format!("y[{j}]"), &ends, term, true)?);
    }
    Ok(y)
}

fn check_data(data: &EnsembleData, priors: &PgePriors) -> Result<(usize, usize, usize)> {
    let (n, m, d) = (data.n_experts(), data.n_obs(), data.phi_dim());
    priors.check(n, d)?;
    Ok((n, m, d))
}

/// Per-expert shared parameters and per-(expert, observation) precision
/// words. Returns the likelihood-side node per (i, j) whose port `tau`
/// still needs the precision, wired by the caller.
struct PgeCore {
    experts: Vec<ExpertEdges>,
    precision: Vec<Vec<EdgeId>>,
}

fn build_precision_words(
    g: &mut FactorGraph,
    data: &EnsembleData,
    priors: &PgePriors,
    diagonal: bool,
    likelihood: &[Vec<NodeId>],
) -> Result<PgeCore> {
    let (n, m, d) = (data.n_experts(), data.n_obs(), data.phi_dim());
    let (sl, sf) = gaussian_line();
    let (dl, df) = gamma_line();
    let mut experts = Vec::new();
    let mut precision = vec![vec![0; m]; n];
    for i in 0..n {
        let mut softdots = Vec::with_capacity(m);
        let mut gammas = Vec::with_capacity(m);
        for j in 0..m {
            let sd = g.add_factor(NodeKind::Softdot);
            g.set_label(sd, format!("softdot[{i},{j}]"));
            let phi = Value::Vector(data.phi(j));
            variable(g, sl, FamilyConstraint::MvGaussian(d), &format!("phi[{i},{j}]"), &[(sd, "phi")], Term::Observe(phi), false)?;
            let ex = g.add_factor(NodeKind::ExpLink);
            variable(g, LineType::DashDot, sf, &format!("z[{i},{j}]"), &[(sd, "z"), (ex, "z")], Term::None, false)?;
            let gf = g.add_factor(NodeKind::GammaFactor { shape: 1.0 });
            let e = variable(
                g,
                dl,
                df,
                &format!("gamma[{i},{j}]"),
                &[(ex, "gamma"), (gf, "gamma"), (likelihood[i][j], "tau")],
                Term::None,
                true,
            )?;
            precision[i][j] = e;
            softdots.push(sd);
            gammas.push(gf);
        }
        let p = &priors.experts[i];
        let w_prior = if diagonal { p.w.project_diagonal()? } else { p.w.clone() };
        let ends: Vec<(NodeId, &str)> = softdots.iter().map(|&s| (s, "w")).collect();
        let w = variable(g, sl, FamilyConstraint::MvGaussian(d), &format!("w[{i}]"), &ends, Term::Prior(Belief::MvGaussian(w_prior)), true)?;
        let ends: Vec<(NodeId, &str)> = softdots.iter().map(|&s| (s, "tau")).collect();
        let tau = variable(g, dl, df, &format!("tau[{i}]"), &ends, Term::Prior(Belief::Gamma(p.tau)), true)?;
        let ends: Vec<(NodeId, &str)> = gammas.iter().map(|&s| (s, "beta")).collect();
        let beta = variable(g, dl, df, &format!("beta[{i}]"), &ends, Term::Prior(Belief::Gamma(p.beta)), true)?;
        experts.push(ExpertEdges { w: Some(w), tau: Some(tau), beta: Some(beta), ..Default::default() });
    }
    Ok(PgeCore { experts, precision })
}

/// Precision-gated experts: each expert's precision is `exp(w^T phi + noise)`
/// with an extra `Gamma(1, beta)` factor on every precision.
pub fn build_pge(data: &EnsembleData, priors: &PgePriors, diagonal: bool) -> Result<BuiltModel> {
    let (n, m, _) = check_data(data, priors)?;
    let mut g = FactorGraph::new();
    let (sl, sf) = gaussian_line();
    let mut likelihood = vec![vec![0; m]; n];
    for (i, row) in likelihood.iter_mut().enumerate() {
        for (j, node) in row.iter_mut().enumerate() {
            *node = g.add_factor(NodeKind::NormalFactor);
            g.set_label(*node, format!("likelihood[{i},{j}]"));
            let v = Value::Scalar(data.predictions[(i, j)]);
            variable(&mut g, sl, sf, &format!("yhat[{i},{j}]"), &[(*node, "y")], Term::Observe(v), false)?;
        }
    }
    let core = build_precision_words(&mut g, data, priors, diagonal, &likelihood)?;
    let targets: Option<Vec<f64>> = data.targets.as_ref().map(|t| t.iter().copied().collect());
    let y = attach_targets(&mut g, &likelihood, "mu", targets.as_deref())?;
    Ok(BuiltModel { graph: g, y, experts: core.experts, precision: core.precision })
}

/// Noisy experts: a latent `pred[i, j] ~ N(yhat[i, j], 1/kappa[i])` sits
/// between each prediction and the target. In prediction mode the targets
/// are left free and each likelihood keeps `q(y, pred)` joint. An expert
/// with `kappa` fixed at infinity is wired exactly as in [`build_pge`].
pub fn build_noisy(data: &EnsembleData, priors: &PgePriors, diagonal: bool, prediction_mode: bool) -> Result<BuiltModel> {
    let (n, m, _) = check_data(data, priors)?;
    let mut g = FactorGraph::new();
    let (sl, sf) = gaussian_line();
    let (dl, df) = gamma_line();
    let mut likelihood = vec![vec![0; m]; n];
    let mut noise = vec![Vec::new(); n];
    // an infinite kappa pins pred to yhat, so the noise layer is left out
    let collapsed: Vec<bool> =
        priors.experts.iter().map(|e| matches!(e.kappa, PrecisionSpec::Fixed(v) if v == f64::INFINITY)).collect();
    for i in 0..n {
        for j in 0..m {
            let lk = g.add_factor(NodeKind::NormalFactor);
            g.set_label(lk, format!("likelihood[{i},{j}]"));
            let v = Value::Scalar(data.predictions[(i, j)]);
            likelihood[i][j] = lk;
            if collapsed[i] {
                variable(&mut g, sl, sf, &format!("yhat[{i},{j}]"), &[(lk, "mu")], Term::Observe(v), false)?;
                continue;
            }
            if prediction_mode {
                g.set_factorization(lk, Factorization::Structured(vec![vec!["y".into(), "mu".into()]]));
            }
            let nz = g.add_factor(NodeKind::NormalFactor);
            g.set_label(nz, format!("noise[{i},{j}]"));
            variable(&mut g, sl, sf, &format!("yhat[{i},{j}]"), &[(nz, "mu")], Term::Observe(v), false)?;
            variable(&mut g, sl, sf, &format!("pred[{i},{j}]"), &[(nz, "y"), (lk, "mu")], Term::None, false)?;
            noise[i].push(nz);
        }
    }
    let mut core = build_precision_words(&mut g, data, priors, diagonal, &likelihood)?;
    for i in (0..n).filter(|&i| !collapsed[i]) {
        let ends: Vec<(NodeId, &str)> = noise[i].iter().map(|&s| (s, "tau")).collect();
        let term = match priors.experts[i].kappa {
            PrecisionSpec::Learned(b) => Term::Prior(Belief::Gamma(b)),
            PrecisionSpec::Fixed(v) => Term::Clamp(Value::Scalar(v)),
        };
        core.experts[i].kappa = Some(variable(&mut g, dl, df, &format!("kappa[{i}]"), &ends, term, true)?);
    }
    let targets: Option<Vec<f64>> = if prediction_mode {
        None
    } else {
        Some(
            data.targets
                .as_ref()
                .ok_or_else(|| Error::Shape("training requires targets".into()))?
                .iter()
                .copied()
                .collect(),
        )
    };
    let y = attach_targets(&mut g, &likelihood, "y", targets.as_deref())?;
    Ok(BuiltModel { graph: g, y, experts: core.experts, precision: core.precision })
}

/// One expert with split-branch routing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Depth2ExpertSpec {
    /// Routing weights.
    pub v: Vec<f64>,
    /// Sub-expert weights of the branch active when the router score is positive.
    pub w_left: Vec<f64>,
    /// Sub-expert weights of the branch active when the router score is negative.
    pub w_right: Vec<f64>,
    /// Precision of the router and switch softdots.
    pub tau_router: f64,
    /// Precision of the sub-expert softdots.
    pub tau_expert: f64,
    pub yhat: f64,
}

/// Edge handles of one branch pair for one (expert, observation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchEdges {
    pub h: EdgeId,
    pub kappa_left: EdgeId,
    pub kappa_right: EdgeId,
    pub m_left: EdgeId,
    pub m_right: EdgeId,
    pub gamma_left: EdgeId,
    pub gamma_right: EdgeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuiltDepth2 {
    pub graph: FactorGraph,
    pub y: Vec<EdgeId>,
    /// `branches[i][j]`.
    pub branches: Vec<Vec<BranchEdges>>,
}

/// Router softdot, two opposing switches and their exp links for one
/// (expert, observation). Returns `(h edge, [(switch activation edge, gate node)])`.
fn add_router(
    g: &mut FactorGraph,
    v: &[f64],
    phi: &[f64],
    tau: f64,
    tag: &str,
    joint_gates: bool,
) -> Result<(EdgeId, [(EdgeId, NodeId); 2])> {
    let (sl, sf) = gaussian_line();
    let (dl, df) = gamma_line();
    let d = phi.len();
    let router = g.add_factor(NodeKind::Softdot);
    g.set_label(router, format!("router{tag}"));
    variable(g, sl, FamilyConstraint::MvGaussian(d), &format!("v{tag}"), &[(router, "w")], Term::Clamp(Value::Vector(v.to_vec())), false)?;
    variable(g, sl, FamilyConstraint::MvGaussian(d), &format!("phi{tag}"), &[(router, "phi")], Term::Observe(Value::Vector(phi.to_vec())), false)?;
    variable(g, dl, df, &format!("tau_router{tag}"), &[(router, "tau")], Term::Clamp(Value::Scalar(tau)), false)?;
    let mut out = Vec::new();
    let mut switches = Vec::new();
    for (name, sign) in [("left", 1.0), ("right", -1.0)] {
        let sw = g.add_factor(NodeKind::Softdot);
        g.set_label(sw, format!("switch_{name}{tag}"));
        variable(g, sl, sf, &format!("switch_w_{name}{tag}"), &[(sw, "w")], Term::Clamp(Value::Scalar(sign)), false)?;
        variable(g, dl, df, &format!("switch_tau_{name}{tag}"), &[(sw, "tau")], Term::Clamp(Value::Scalar(tau)), false)?;
        let ex = g.add_factor(NodeKind::ExpLink);
        variable(g, LineType::DashDot, sf, &format!("s_{name}{tag}"), &[(sw, "z"), (ex, "z")], Term::None, false)?;
        let gate = g.add_factor(NodeKind::NormalFactor);
        g.set_label(gate, format!("gate_{name}{tag}"));
        if joint_gates {
            g.set_factorization(gate, Factorization::Structured(vec![vec!["y".into(), "mu".into()]]));
        }
        let kappa = variable(g, dl, df, &format!("kappa_{name}{tag}"), &[(ex, "gamma"), (gate, "tau")], Term::None, false)?;
        switches.push(sw);
        out.push((kappa, gate));
    }
    let h = variable(g, sl, sf, &format!("h{tag}"), &[(router, "z"), (switches[0], "phi"), (switches[1], "phi")], Term::None, true)?;
    Ok((h, [out[0], out[1]]))
}

fn add_leaf(g: &mut FactorGraph, w: &[f64], phi: &[f64], tau: f64, tag: &str, gate: NodeId) -> Result<()> {
    let (sl, sf) = gaussian_line();
    let (dl, df) = gamma_line();
    let d = phi.len();
    let sd = g.add_factor(NodeKind::Softdot);
    g.set_label(sd, format!("expert{tag}"));
    variable(g, sl, FamilyConstraint::MvGaussian(d), &format!("w{tag}"), &[(sd, "w")], Term::Clamp(Value::Vector(w.to_vec())), false)?;
    variable(g, sl, FamilyConstraint::MvGaussian(d), &format!("phi{tag}"), &[(sd, "phi")], Term::Observe(Value::Vector(phi.to_vec())), false)?;
    variable(g, dl, df, &format!("tau{tag}"), &[(sd, "tau")], Term::Clamp(Value::Scalar(tau)), false)?;
    variable(g, sl, sf, &format!("zb{tag}"), &[(sd, "z"), (gate, "mu")], Term::None, false)?;
    Ok(())
}

/// Split-branch experts. For each expert and observation the router score
/// `h` feeds a `+1` switch (left, active for `h > 0`) and a `-1` switch
/// (right); each switch activation `kappa^b = e^{s^b}` is the precision of
/// a gate `N(m^b | z^b, 1/kappa^b)` around the branch's sub-expert score
/// `z^b`; `m^b` passes through an exp link into a likelihood on `y_j`.
pub fn build_depth2(experts: &[Depth2ExpertSpec], phi: &[Vec<f64>], targets: Option<&[f64]>) -> Result<BuiltDepth2> {
    if experts.is_empty() {
        return Err(Error::Shape("at least one expert is required".into()));
    }
    if phi.is_empty() {
        return Err(Error::Shape("no observations".into()));
    }
    let d = phi[0].len();
    for (k, e) in experts.iter().enumerate() {
        if e.v.len() != d || e.w_left.len() != d || e.w_right.len() != d {
            return Err(Error::Dimension(format!("expert {k}: weight vectors must have dimension {d}")));
        }
        if !(e.tau_router > 0.0) || !(e.tau_expert > 0.0) {
            return Err(Error::Domain(format!("expert {k}: precisions must be positive")));
        }
    }
    if phi.iter().any(|p| p.len() != d) {
        return Err(Error::Dimension("feature rows differ in length".into()));
    }
    if let Some(t) = targets {
        if t.len() != phi.len() {
            return Err(Error::Shape(format!("{} feature rows but {} targets", phi.len(), t.len())));
        }
    }
    let mut g = FactorGraph::new();
    let (sl, sf) = gaussian_line();
    let (dl, df) = gamma_line();
    let mut branches = vec![Vec::with_capacity(phi.len()); experts.len()];
    let mut likelihoods: Vec<Vec<NodeId>> = vec![Vec::new(); phi.len()];
    for (i, spec) in experts.iter().enumerate() {
        for (j, p) in phi.iter().enumerate() {
            let tag = format!("[{i},{j}]");
            let (h, switches) = add_router(&mut g, &spec.v, p, spec.tau_router, &tag, false)?;
            let mut ms = Vec::new();
            let mut gs = Vec::new();
            for ((name, w), (_, gate)) in [("left", &spec.w_left), ("right", &spec.w_right)].into_iter().zip(switches) {
                let btag = format!("_{name}{tag}");
                add_leaf(&mut g, w, p, spec.tau_expert, &btag, gate)?;
                let ex = g.add_factor(NodeKind::ExpLink);
                let m = variable(&mut g, LineType::DashDot, sf, &format!("m{btag}"), &[(gate, "y"), (ex, "z")], Term::None, false)?;
                let lk = g.add_factor(NodeKind::NormalFactor);
                g.set_label(lk, format!("likelihood{btag}"));
                variable(&mut g, sl, sf, &format!("yhat{btag}"), &[(lk, "y")], Term::Observe(Value::Scalar(spec.yhat)), false)?;
                let gm = variable(&mut g, dl, df, &format!("gamma{btag}"), &[(ex, "gamma"), (lk, "tau")], Term::None, false)?;
                likelihoods[j].push(lk);
                ms.push(m);
                gs.push(gm);
            }
            branches[i].push(BranchEdges {
                h,
                kappa_left: switches[0].0,
                kappa_right: switches[1].0,
                m_left: ms[0],
                m_right: ms[1],
                gamma_left: gs[0],
                gamma_right: gs[1],
            });
        }
    }
    let mut y = Vec::with_capacity(phi.len());
    for (j, lks) in likelihoods.iter().enumerate() {
        let ends: Vec<(NodeId, &str)> = lks.iter().map(|&n| (n, "mu")).collect();
        let term = match targets {
            Some(t) => Term::Observe(Value::Scalar(t[j])),
            None => Term::None,
        };
        y.push(variable(&mut g, sl, sf, &format!("y[{j}]"), &ends, term, true)?);
    }
    Ok(BuiltDepth2 { graph: g, y, branches })
}

/// The two-expert XOR encoding with routing precision `tau`.
pub fn xor_experts(tau: f64) -> Vec<Depth2ExpertSpec> {
    let w_left = vec![0.0, 10.0, 0.0];
    let w_right = vec![0.0, -10.0, 10.0];
    vec![
        Depth2ExpertSpec { v: vec![14.0, 0.0, -7.0], w_left: w_left.clone(), w_right: w_right.clone(), tau_router: tau, tau_expert: tau, yhat: 0.0 },
        Depth2ExpertSpec { v: vec![-14.0, 0.0, 7.0], w_left, w_right, tau_router: tau, tau_expert: tau, yhat: 1.0 },
    ]
}

/// Posterior summary of a split-branch model at one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Depth2Point {
    pub phi: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Per expert: `E[gamma^L] + E[gamma^R]`.
    pub influence: Vec<f64>,
    /// Per expert: `(E kappa^R E m^R + E kappa^L E m^L) / (E kappa^R + E kappa^L)`.
    pub blended_m: Vec<f64>,
    /// Per expert: posterior mean of the router score.
    pub h: Vec<f64>,
    pub dominant: usize,
}

/// Runs inference on a split-branch model with free targets and summarizes
/// each input.
pub fn depth2_posterior(experts: &[Depth2ExpertSpec], phi: &[Vec<f64>], sweeps: usize) -> Result<Vec<Depth2Point>> {
    let built = build_depth2(experts, phi, None)?;
    let marg = infer(&built.graph, &InferenceConfig::with_sweeps(sweeps))?;
    let mean_of = |e: EdgeId| -> Result<f64> { marg.get(e).expect("edge marginal").mean_var().map(|m| m.0) };
    let mut out = Vec::with_capacity(phi.len());
    for (j, p) in phi.iter().enumerate() {
        let (mean, var) = marg.get(built.y[j]).expect("target marginal").mean_var()?;
        let mut influence = Vec::new();
        let mut blended = Vec::new();
        let mut hs = Vec::new();
        for row in &built.branches {
            let b = row[j];
            influence.push(mean_of(b.gamma_left)? + mean_of(b.gamma_right)?);
            let (kl, kr) = (mean_of(b.kappa_left)?, mean_of(b.kappa_right)?);
            blended.push((kr * mean_of(b.m_right)? + kl * mean_of(b.m_left)?) / (kr + kl));
            hs.push(mean_of(b.h)?);
        }
        let dominant = influence
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        out.push(Depth2Point { phi: p.clone(), mean, std: var.sqrt(), influence, blended_m: blended, h: hs, dominant });
    }
    Ok(out)
}

/// Decision tree over the feature map. `Split` sends inputs with a positive
/// score `v^T phi` to `left`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeSpec {
    Leaf { w: Vec<f64> },
    Split { v: Vec<f64>, left: Box<TreeSpec>, right: Box<TreeSpec> },
}

impl TreeSpec {
    /// Sharp-limit value of the tree at `phi`.
    pub fn eval(&self, phi: &[f64]) -> f64 {
        let dot = |a: &[f64]| a.iter().zip(phi).map(|(x, y)| x * y).sum::<f64>();
        match self {
            TreeSpec::Leaf { w } => dot(w),
            TreeSpec::Split { v, left, right } => {
                if dot(v) > 0.0 {
                    left.eval(phi)
                } else {
                    right.eval(phi)
                }
            }
        }
    }
}

fn add_tree(g: &mut FactorGraph, tree: &TreeSpec, phi: &[f64], tau: f64, tag: &str, gate: NodeId) -> Result<()> {
    match tree {
        TreeSpec::Leaf { w } => add_leaf(g, w, phi, tau, tag, gate),
        TreeSpec::Split { v, left, right } => {
            let (sl, sf) = gaussian_line();
            let (_, switches) = add_router(g, v, phi, tau, tag, true)?;
            add_tree(g, left, phi, tau, &format!("{tag}L"), switches[0].1)?;
            add_tree(g, right, phi, tau, &format!("{tag}R"), switches[1].1)?;
            variable(g, sl, sf, &format!("o{tag}"), &[(switches[0].1, "y"), (switches[1].1, "y"), (gate, "mu")], Term::None, true)?;
            Ok(())
        }
    }
}

/// Stacked split-branch graph encoding `tree`: every split is a router with
/// two gated branches whose outputs meet at an equality node; each branch
/// is a subtree or a leaf softdot. Returns the graph and the output edge
/// per input.
pub fn build_decision_tree(tree: &TreeSpec, phi: &[Vec<f64>], tau: f64) -> Result<(FactorGraph, Vec<EdgeId>)> {
    let TreeSpec::Split { v, left, right } = tree else {
        return Err(Error::Shape("the tree root must be a split".into()));
    };
    let (sl, sf) = gaussian_line();
    let mut g = FactorGraph::new();
    let mut outputs = Vec::with_capacity(phi.len());
    for (j, p) in phi.iter().enumerate() {
        let tag = format!("[{j}]");
        let (_, switches) = add_router(&mut g, v, p, tau, &tag, true)?;
        add_tree(&mut g, left, p, tau, &format!("{tag}L"), switches[0].1)?;
        add_tree(&mut g, right, p, tau, &format!("{tag}R"), switches[1].1)?;
        outputs.push(variable(&mut g, sl, sf, &format!("out{tag}"), &[(switches[0].1, "y"), (switches[1].1, "y")], Term::None, true)?);
    }
    Ok((g, outputs))
}

/// Mean squared error and average Gaussian negative log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub nll: f64,
}

pub fn metrics(predictive: &[GaussianBelief], targets: &[f64]) -> Result<Metrics> {
    if predictive.len() != targets.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", predictive.len(), targets.len())));
    }
    if predictive.is_empty() {
        return Err(Error::Shape("no predictions".into()));
    }
    let n = predictive.len() as f64;
    let mut mse = 0.0;
    let mut nll = 0.0;
    for (p, y) in predictive.iter().zip(targets) {
        let (m, v) = p.moments();
        let r2 = (m - y) * (m - y);
        mse += r2;
        nll += 0.5 * (2.0 * PI * v).ln() + r2 / (2.0 * v);
    }
    Ok(Metrics { mse: mse / n, nll: nll / n })
}

/// Synthetic ensemble with input-dependent expert precision
/// `gamma_i(x) = exp(w_i^T phi(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub data: EnsembleData,
    /// `n x m` true precisions.
    pub true_gamma: DMatrix<f64>,
    /// Per expert generating weights over `phi` (bias last).
    pub w_star: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_experts: usize,
    pub n_obs: usize,
    pub dim: usize,
    /// When false only the bias weight is non-zero, so precisions are constant per expert.
    pub heteroscedastic: bool,
}

pub fn synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let SyntheticSpec { seed, n_experts: n, n_obs: m, dim: d, heteroscedastic } = *spec;
    if n == 0 || m == 0 {
        return Err(Error::Shape("synthetic data needs experts and observations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let w_star: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut w: Vec<f64> = (0..d)
                .map(|_| if heteroscedastic { normal() / (d as f64).sqrt() } else { 0.0 })
                .collect();
            w.push(0.5 * normal());
            w
        })
        .collect();
    let features = DMatrix::from_fn(m, d, |_, _| normal());
    let targets = DVector::from_fn(m, |_, _| normal());
    let mut true_gamma = DMatrix::zeros(n, m);
    let mut predictions = DMatrix::zeros(n, m);
    for j in 0..m {
        for i in 0..n {
            let score: f64 = (0..d).map(|k| w_star[i][k] * features[(j, k)]).sum::<f64>() + w_star[i][d];
            let gamma = score.exp();
            true_gamma[(i, j)] = gamma;
            predictions[(i, j)] = targets[j] + normal() / gamma.sqrt();
        }
    }
    let data = EnsembleData::new(features, predictions, Some(targets))?;
    Ok(SyntheticData { data, true_gamma, w_star })
}

/// Uniform draws on the unit square, for demos.
pub fn unit_square_points(seed: u64, count: usize) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect()
}

/// Ensemble model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Static,
    Pge,
    PgeDiag,
    Noisy,
    NoisyDiag,
    Depth2Xor,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Static => "static",
            ModelKind::Pge => "pge",
            ModelKind::PgeDiag => "pge-diag",
            ModelKind::Noisy => "noisy",
            ModelKind::NoisyDiag => "noisy-diag",
            ModelKind::Depth2Xor => "depth2-xor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Static, Self::Pge, Self::PgeDiag, Self::Noisy, Self::NoisyDiag, Self::Depth2Xor]
            .into_iter()
            .find(|k| k.name() == s)
    }

    fn diagonal(self) -> bool {
        matches!(self, ModelKind::PgeDiag | ModelKind::NoisyDiag)
    }
}

/// Posterior parameters carried from training into prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Posterior {
    Static { gamma: Vec<GammaBelief> },
    Gated(PgePriors),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fitted {
    pub kind: ModelKind,
    pub posterior: Posterior,
    pub bfe_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub beliefs: Vec<GaussianBelief>,
    pub model: BuiltModel,
    pub marginals: Marginals,
}

fn build(kind: ModelKind, data: &EnsembleData, posterior: &Posterior, prediction: bool) -> Result<BuiltModel> {
    let data_owned;
    let data = if prediction {
        data_owned = data.without_targets();
        &data_owned
    } else {
        data
    };
    match (kind, posterior) {
        (ModelKind::Static, Posterior::Static { gamma }) => {
            let specs: Vec<PrecisionSpec> = gamma.iter().map(|g| PrecisionSpec::Learned(*g)).collect();
            let targets: Option<Vec<f64>> = data.targets.as_ref().map(|t| t.iter().copied().collect());
            build_depth0(&data.predictions, targets.as_deref(), &specs)
        }
        (ModelKind::Pge | ModelKind::PgeDiag, Posterior::Gated(p)) => build_pge(data, p, kind.diagonal()),
        (ModelKind::Noisy | ModelKind::NoisyDiag, Posterior::Gated(p)) => build_noisy(data, p, kind.diagonal(), prediction),
        (ModelKind::Depth2Xor, _) => Err(Error::Shape("the split-branch demo has no fit/predict pipeline".into())),
        _ => Err(Error::Shape(format!("parameters do not match model {}", kind.name()))),
    }
}

fn gamma_of(m: &Marginals, e: EdgeId) -> Result<GammaBelief> {
    match m.get(e) {
        Some(Marginal::Belief(Belief::Gamma(g))) => Ok(*g),
        other => Err(Error::Family(format!("edge {e}: gamma marginal expected, got {other:?}"))),
    }
}

/// Default priors for a model kind over `d`-dimensional feature maps.
pub fn default_posterior(kind: ModelKind, n: usize, d: usize) -> Posterior {
    match kind {
        ModelKind::Static => Posterior::Static { gamma: vec![GammaBelief::new(1.0, 1.0).expect("unit gamma"); n] },
        _ => Posterior::Gated(PgePriors::standard(n, d)),
    }
}

/// Trains `kind` on data with targets, starting from `prior`.
pub fn fit(kind: ModelKind, data: &EnsembleData, prior: &Posterior, cfg: &InferenceConfig) -> Result<Fitted> {
    if data.targets.is_none() {
        return Err(Error::Shape("training requires targets".into()));
    }
    let model = build(kind, data, prior, false)?;
    let marg = infer(&model.graph, cfg)?;
    let posterior = match prior {
        Posterior::Static { .. } => Posterior::Static {
            gamma: model.experts.iter().map(|e| gamma_of(&marg, e.gamma.expect("static precision"))).collect::<Result<_>>()?,
        },
        Posterior::Gated(p) => {
            let mut experts = Vec::with_capacity(p.experts.len());
            for (e, pr) in model.experts.iter().zip(&p.experts) {
                let w = match marg.get(e.w.expect("w edge")) {
                    Some(Marginal::Belief(Belief::MvGaussian(w))) => w.clone(),
                    other => return Err(Error::Family(format!("w marginal expected, got {other:?}"))),
                };
                let kappa = match (e.kappa, pr.kappa) {
                    (Some(k), PrecisionSpec::Learned(_)) => PrecisionSpec::Learned(gamma_of(&marg, k)?),
                    (_, spec) => spec,
                };
                experts.push(ExpertPriors {
                    w,
                    tau: gamma_of(&marg, e.tau.expect("tau edge"))?,
                    beta: gamma_of(&marg, e.beta.expect("beta edge"))?,
                    kappa,
                });
            }
            Posterior::Gated(PgePriors { experts })
        }
    };
    Ok(Fitted { kind, posterior, bfe_trace: marg.bfe_trace })
}

/// Predictive beliefs over the targets of `data` (targets, if any, are ignored).
pub fn predict(fitted: &Fitted, data: &EnsembleData, cfg: &InferenceConfig) -> Result<Prediction> {
    let model = build(fitted.kind, data, &fitted.posterior, true)?;
    let marginals = infer(&model.graph, cfg)?;
    let beliefs = model
        .y
        .iter()
        .map(|&e| match marginals.get(e) {
            Some(Marginal::Belief(Belief::Gaussian(g))) => Ok(*g),
            other => Err(Error::Family(format!("edge {e}: gaussian predictive expected, got {other:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prediction { beliefs, model, marginals })
}

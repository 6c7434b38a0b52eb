//! Message catalog: one rule per (factor, target port).
//!
//! Stochastic factors (softdot, normal, gamma) send variational messages
//! that depend only on the moments of the non-target marginals. The exp
//! link and the equality node send belief-propagation messages.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exponential_families::{
    GammaBelief, GaussianBelief, LogGammaMessage, LogNormalMessage, Message, MvGaussianBelief, Natural, Value,
};

/// First two moments of a vector-valued operand. Point masses have zero covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct VecMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl VecMoments {
    pub fn point(v: DVector<f64>) -> Self {
        let d = v.len();
        Self { mean: v, cov: DMatrix::zeros(d, d) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `E[x x^T]`.
    pub fn second(&self) -> DMatrix<f64> {
        &self.cov + &self.mean * self.mean.transpose()
    }
}

impl TryFrom<&MvGaussianBelief> for VecMoments {
    type Error = Error;
    fn try_from(b: &MvGaussianBelief) -> Result<Self> {
        Ok(Self { mean: b.mean()?, cov: b.cov()? })
    }
}

impl From<&GaussianBelief> for VecMoments {
    fn from(b: &GaussianBelief) -> Self {
        Self {
            mean: DVector::from_element(1, b.mean()),
            cov: DMatrix::from_element(1, 1, b.var()),
        }
    }
}

impl From<&Value> for VecMoments {
    fn from(v: &Value) -> Self {
        Self::point(v.as_vector())
    }
}

/// Mean and variance of a scalar operand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMoments {
    pub mean: f64,
    pub var: f64,
}

impl ScalarMoments {
    pub fn point(v: f64) -> Self {
        Self { mean: v, var: 0.0 }
    }

    /// `E[x^2]`.
    pub fn second(&self) -> f64 {
        self.var + self.mean * self.mean
    }
}

impl From<&GaussianBelief> for ScalarMoments {
    fn from(b: &GaussianBelief) -> Self {
        Self { mean: b.mean(), var: b.var() }
    }
}

/// `E[x]` and `E[ln x]` of a positive operand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveMoments {
    pub mean: f64,
    pub log_mean: f64,
}

impl PositiveMoments {
    pub fn point(v: f64) -> Self {
        Self { mean: v, log_mean: v.ln() }
    }
}

impl From<&GammaBelief> for PositiveMoments {
    fn from(b: &GammaBelief) -> Self {
        Self { mean: b.mean(), log_mean: b.e_log() }
    }
}

fn missing<T>(port: &str) -> Result<T> {
    Err(Error::Domain(format!("non-target port `{port}` not populated")))
}

fn check_precision(p: &PositiveMoments) -> Result<f64> {
    if !(p.mean > 0.0) || !p.mean.is_finite() {
        return Err(Error::Domain(format!("precision expectation {} not positive", p.mean)));
    }
    Ok(p.mean)
}

fn rate_gamma(shape: f64, rate: f64) -> Result<Message> {
    if !(rate > 0.0) {
        return Err(Error::Degenerate(format!("gamma message with rate {rate}")));
    }
    GammaBelief::new(shape, rate).map(Message::Gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftdotPort {
    Z,
    W,
    Phi,
    Tau,
}

/// Operands of `N(z | w^T phi, 1/tau)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SoftdotInputs {
    pub q_w: Option<VecMoments>,
    pub q_phi: Option<VecMoments>,
    pub q_tau: Option<PositiveMoments>,
    pub q_z: Option<ScalarMoments>,
}

impl SoftdotInputs {
    fn w(&self) -> Result<&VecMoments> {
        self.q_w.as_ref().map_or_else(|| missing("w"), Ok)
    }
    fn phi(&self) -> Result<&VecMoments> {
        self.q_phi.as_ref().map_or_else(|| missing("phi"), Ok)
    }
    fn tau(&self) -> Result<f64> {
        self.q_tau.as_ref().map_or_else(|| missing("tau"), check_precision)
    }
    fn z(&self) -> Result<ScalarMoments> {
        self.q_z.map_or_else(|| missing("z"), Ok)
    }

    /// `E[(z - w^T phi)^2]` under the mean-field product.
    pub fn expected_residual_sq(&self) -> Result<f64> {
        let (w, phi, z) = (self.w()?, self.phi()?, self.z()?);
        check_dims(w, phi)?;
        let mean_dot = w.mean.dot(&phi.mean);
        let phi2 = phi.second();
        let spread = (&w.cov * &phi2).trace() + w.mean.dot(&(&phi.cov * &w.mean));
        Ok((z.mean - mean_dot).powi(2) + z.var + spread)
    }
}

fn check_dims(w: &VecMoments, phi: &VecMoments) -> Result<()> {
    if w.dim() != phi.dim() {
        return Err(Error::Dimension(format!("w has {} entries, phi has {}", w.dim(), phi.dim())));
    }
    Ok(())
}

/// Variational message from the softdot factor toward `target`.
pub fn softdot_message(target: SoftdotPort, inputs: &SoftdotInputs) -> Result<Message> {
    match target {
        SoftdotPort::Z => {
            let (w, phi, tau) = (inputs.w()?, inputs.phi()?, inputs.tau()?);
            check_dims(w, phi)?;
            GaussianBelief::from_moments(w.mean.dot(&phi.mean), 1.0 / tau).map(Message::Gaussian)
        }
        SoftdotPort::W | SoftdotPort::Phi => {
            let other = if target == SoftdotPort::W { inputs.phi()? } else { inputs.w()? };
            let (tau, z) = (inputs.tau()?, inputs.z()?);
            let lambda = tau * other.second();
            let xi = tau * z.mean * &other.mean;
            MvGaussianBelief::message(xi, lambda).map(Message::MvGaussian)
        }
        SoftdotPort::Tau => rate_gamma(1.5, 0.5 * inputs.expected_residual_sq()?),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalPort {
    Y,
    Mu,
    Tau,
}

/// Operands of `N(y | mu, 1/tau)`. When the node keeps `q(y, mu)` joint,
/// `joint_residual_sq` carries `E[(y - mu)^2]` under that joint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NormalInputs {
    pub q_y: Option<ScalarMoments>,
    pub q_mu: Option<ScalarMoments>,
    pub q_tau: Option<PositiveMoments>,
    pub joint_residual_sq: Option<f64>,
}

impl NormalInputs {
    /// `E[(y - mu)^2]`, structured if available, otherwise mean-field.
    pub fn expected_residual_sq(&self) -> Result<f64> {
        if let Some(r) = self.joint_residual_sq {
            return Ok(r);
        }
        let y = self.q_y.map_or_else(|| missing("y"), Ok)?;
        let mu = self.q_mu.map_or_else(|| missing("mu"), Ok)?;
        Ok((y.mean - mu.mean).powi(2) + y.var + mu.var)
    }
}

/// Variational message from the normal factor toward `target`.
pub fn normal_message(target: NormalPort, inputs: &NormalInputs) -> Result<Message> {
    let tau = || inputs.q_tau.as_ref().map_or_else(|| missing("tau"), check_precision);
    match target {
        NormalPort::Y => {
            let mu = inputs.q_mu.map_or_else(|| missing("mu"), Ok)?;
            GaussianBelief::from_moments(mu.mean, 1.0 / tau()?).map(Message::Gaussian)
        }
        NormalPort::Mu => {
            let y = inputs.q_y.map_or_else(|| missing("y"), Ok)?;
            GaussianBelief::from_moments(y.mean, 1.0 / tau()?).map(Message::Gaussian)
        }
        NormalPort::Tau => rate_gamma(1.5, 0.5 * inputs.expected_residual_sq()?),
    }
}

/// Belief-propagation message toward `y` through `N(y | mu, 1/tau)` with a
/// point-mass precision: variances add.
pub fn normal_bp_to_y(msg_mu: &Message, tau: f64) -> Result<Message> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("precision {tau} not positive")));
    }
    let (m, v) = match msg_mu {
        Message::Gaussian(g) => g.moments(),
        Message::PointMass(p) => (
            p.as_scalar().ok_or_else(|| Error::Dimension("scalar point mass expected".into()))?,
            0.0,
        ),
        other => return Err(Error::Family(format!("gaussian message expected, got {}", other.family()))),
    };
    GaussianBelief::from_moments(m, v + 1.0 / tau).map(Message::Gaussian)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaPort {
    Gamma,
    Beta,
}

/// Operands of `Gamma(gamma | alpha, beta)` with a clamped shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaNodeInputs {
    pub alpha_clamp: f64,
    pub q_beta: Option<PositiveMoments>,
    pub q_gamma: Option<PositiveMoments>,
}

/// Variational message from the gamma factor toward `target`.
pub fn gamma_node_message(target: GammaPort, inputs: &GammaNodeInputs) -> Result<Message> {
    let alpha = inputs.alpha_clamp;
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("clamped shape {alpha} not positive")));
    }
    match target {
        GammaPort::Gamma => {
            let beta = inputs.q_beta.as_ref().map_or_else(|| missing("beta"), check_precision)?;
            rate_gamma(alpha, beta)
        }
        GammaPort::Beta => {
            let gamma = inputs.q_gamma.as_ref().map_or_else(|| missing("gamma"), check_precision)?;
            // kernel beta^alpha exp(-beta E[gamma])
            rate_gamma(alpha + 1.0, gamma)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpPort {
    Z,
    Gamma,
}

/// Belief-propagation message through `delta(gamma - e^z)`.
///
/// Toward `gamma` a Gaussian on `z` becomes log-normal. Toward `z` a Gamma
/// on `gamma` becomes the log-gamma law of `ln gamma`.
pub fn explink_message(target: ExpPort, incoming: &Message) -> Result<Message> {
    match (target, incoming) {
        (_, Message::Flat) => Ok(Message::Flat),
        (ExpPort::Gamma, Message::Gaussian(g)) => {
            let (m, v) = g.moments();
            LogNormalMessage::new(m, v).map(Message::LogNormal)
        }
        (ExpPort::Gamma, Message::PointMass(p)) => {
            let z = p.as_scalar().ok_or_else(|| Error::Dimension("scalar point mass expected".into()))?;
            if z > crate::exponential_families::MAX_EXPONENT {
                return Err(Error::Saturation(format!("exp({z}) out of range")));
            }
            Ok(Message::PointMass(Value::Scalar(z.exp())))
        }
        (ExpPort::Z, Message::Gamma(g)) => LogGammaMessage::new(1.0 / g.beta(), g.alpha()).map(Message::LogGamma),
        (ExpPort::Z, Message::PointMass(p)) => {
            let x = p.as_scalar().ok_or_else(|| Error::Dimension("scalar point mass expected".into()))?;
            if !(x > 0.0) {
                return Err(Error::Domain(format!("point mass {x} on a positive edge")));
            }
            Ok(Message::PointMass(Value::Scalar(x.ln())))
        }
        (ExpPort::Gamma, other) => Err(Error::Family(format!(
            "exp link expects a gaussian message on z, got {}",
            other.family()
        ))),
        (ExpPort::Z, other) => Err(Error::Family(format!(
            "exp link expects a gamma message on gamma, got {}",
            other.family()
        ))),
    }
}

/// Belief-propagation message out of an equality node: the product of all
/// incoming messages except the one on `target_index`.
pub fn equality_message(target_index: usize, incoming: &[Message]) -> Result<Message> {
    if incoming.is_empty() || target_index >= incoming.len() {
        return Err(Error::Domain("equality node needs a non-empty message list".into()));
    }
    let mut acc: Option<Natural> = None;
    for (k, msg) in incoming.iter().enumerate() {
        if k == target_index {
            continue;
        }
        if let Some(n) = Natural::of(msg).map_err(|e| {
            Error::Family(format!("{e}; mixed products at equality nodes go through the fixed-point solver"))
        })? {
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

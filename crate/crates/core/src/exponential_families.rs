//! Beliefs and messages for the Gaussian and Gamma families, stored in
//! natural or information parameters.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use std::f64::consts::{E, PI};

use crate::error::{domain, Error, Result};
use crate::special::{digamma, ln_gamma, tetragamma, trigamma};

/// Largest exponent accepted before reporting saturation.
pub const MAX_EXPONENT: f64 = 700.0;

/// Univariate Gaussian in natural parameters `(m/v, -1/(2v))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    eta1: f64,
    eta2: f64,
}

impl GaussianBelief {
    pub fn from_natural(eta1: f64, eta2: f64) -> Result<Self> {
        if !(eta2 < 0.0) || !eta1.is_finite() || !eta2.is_finite() {
            return domain(format!("gaussian natural parameters ({eta1}, {eta2}) infeasible"));
        }
        let v = -0.5 / eta2;
        if !v.is_finite() || v <= 0.0 {
            return domain(format!("gaussian variance {v} not finite and positive"));
        }
        Ok(Self { eta1, eta2 })
    }

    pub fn from_moments(mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0) || !var.is_finite() || !mean.is_finite() {
            return domain(format!("gaussian moments ({mean}, {var}) infeasible"));
        }
        Self::from_natural(mean / var, -0.5 / var)
    }

    pub fn standard() -> Self {
        Self { eta1: 0.0, eta2: -0.5 }
    }

    pub fn eta1(&self) -> f64 {
        self.eta1
    }

    pub fn eta2(&self) -> f64 {
        self.eta2
    }

    pub fn natural(&self) -> Vector2<f64> {
        Vector2::new(self.eta1, self.eta2)
    }

    pub fn var(&self) -> f64 {
        -0.5 / self.eta2
    }

    pub fn precision(&self) -> f64 {
        -2.0 * self.eta2
    }

    pub fn mean(&self) -> f64 {
        self.eta1 * self.var()
    }

    pub fn moments(&self) -> (f64, f64) {
        (self.mean(), self.var())
    }

    /// `A(eta) = -eta1^2/(4 eta2) - log(-2 eta2)/2`, base measure `(2 pi)^{-1/2}` excluded.
    pub fn log_partition(&self) -> f64 {
        -self.eta1 * self.eta1 / (4.0 * self.eta2) - 0.5 * (-2.0 * self.eta2).ln()
    }

    /// Fisher information in natural coordinates (Hessian of the log-partition).
    pub fn fisher(&self) -> Matrix2<f64> {
        let (e1, e2) = (self.eta1, self.eta2);
        let off = e1 / (2.0 * e2 * e2);
        Matrix2::new(
            -1.0 / (2.0 * e2),
            off,
            off,
            1.0 / (2.0 * e2 * e2) - e1 * e1 / (2.0 * e2 * e2 * e2),
        )
    }

    pub fn entropy(&self) -> f64 {
        0.5 * (2.0 * PI * E * self.var()).ln()
    }

    /// `E[e^z] = exp(m + v/2)`.
    pub fn mgf(&self) -> Result<f64> {
        let (m, v) = self.moments();
        let x = m + 0.5 * v;
        if x > MAX_EXPONENT {
            return Err(Error::Saturation(format!("exp({x}) out of range")));
        }
        Ok(x.exp())
    }

    /// Gradient of `E[e^z]` with respect to `(eta1, eta2)`.
    pub fn mgf_grad(&self) -> Result<Vector2<f64>> {
        let g = self.mgf()?;
        let (e1, e2) = (self.eta1, self.eta2);
        // m = -e1/(2 e2), v = -1/(2 e2)
        let dm = Vector2::new(-1.0 / (2.0 * e2), e1 / (2.0 * e2 * e2));
        let dv = Vector2::new(0.0, 1.0 / (2.0 * e2 * e2));
        Ok(g * (dm + 0.5 * dv))
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let (m, v) = self.moments();
        -0.5 * (2.0 * PI * v).ln() - (x - m) * (x - m) / (2.0 * v)
    }
}

/// Moment pair to natural pair.
pub fn gaussian_to_natural(mean: f64, var: f64) -> Result<(f64, f64)> {
    let g = GaussianBelief::from_moments(mean, var)?;
    Ok((g.eta1, g.eta2))
}

/// Natural pair to moment pair.
pub fn gaussian_to_moments(eta1: f64, eta2: f64) -> Result<(f64, f64)> {
    Ok(GaussianBelief::from_natural(eta1, eta2)?.moments())
}

/// Multivariate Gaussian in information form. Messages may carry a
/// positive semi-definite `lambda`; beliefs must be positive definite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvGaussianBelief {
    xi: DVector<f64>,
    lambda: DMatrix<f64>,
    diagonal_only: bool,
}

impl MvGaussianBelief {
    /// Information-form payload; only symmetry and finiteness are checked.
    pub fn message(xi: DVector<f64>, lambda: DMatrix<f64>) -> Result<Self> {
        let d = xi.len();
        if lambda.nrows() != d || lambda.ncols() != d {
            return Err(Error::Dimension(format!(
                "xi has {d} entries but lambda is {}x{}",
                lambda.nrows(),
                lambda.ncols()
            )));
        }
        if xi.iter().chain(lambda.iter()).any(|v| !v.is_finite()) {
            return domain("non-finite information parameters");
        }
        let scale = lambda.amax().max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (lambda[(i, j)] - lambda[(j, i)]).abs() > 1e-9 * scale {
                    return domain("precision matrix is not symmetric");
                }
            }
        }
        let lambda = 0.5 * (&lambda + lambda.transpose());
        Ok(Self { xi, lambda, diagonal_only: false })
    }

    /// Normalizable belief in information form.
    pub fn from_information(xi: DVector<f64>, lambda: DMatrix<f64>) -> Result<Self> {
        let b = Self::message(xi, lambda)?;
        if b.lambda.clone().cholesky().is_none() {
            return Err(Error::Degenerate("precision matrix not positive definite".into()));
        }
        Ok(b)
    }

    pub fn from_moments(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Domain("covariance not positive definite".into()))?;
        let lambda = chol.inverse();
        let xi = &lambda * mean;
        Self::from_information(xi, lambda)
    }

    /// Isotropic belief `N(mean, var * I)`.
    pub fn isotropic(mean: DVector<f64>, var: f64) -> Result<Self> {
        if !(var > 0.0) {
            return domain(format!("variance {var} not positive"));
        }
        let d = mean.len();
        let lambda = DMatrix::identity(d, d) / var;
        let xi = mean / var;
        Self::from_information(xi, lambda)
    }

    /// Belief with diagonal precision; flagged as diagonal-only.
    pub fn diagonal(mean: DVector<f64>, vars: DVector<f64>) -> Result<Self> {
        if vars.iter().any(|v| !(*v > 0.0)) {
            return domain("diagonal variances must be positive");
        }
        let prec = vars.map(|v| 1.0 / v);
        let xi = mean.component_mul(&prec);
        let mut b = Self::from_information(xi, DMatrix::from_diagonal(&prec))?;
        b.diagonal_only = true;
        Ok(b)
    }

    pub fn dim(&self) -> usize {
        self.xi.len()
    }

    pub fn xi(&self) -> &DVector<f64> {
        &self.xi
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn diagonal_only(&self) -> bool {
        self.diagonal_only
    }

    pub fn cov(&self) -> Result<DMatrix<f64>> {
        self.lambda
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Degenerate("precision matrix not positive definite".into()))
    }

    pub fn mean(&self) -> Result<DVector<f64>> {
        self.lambda
            .clone()
            .cholesky()
            .map(|c| c.solve(&self.xi))
            .ok_or_else(|| Error::Degenerate("precision matrix not positive definite".into()))
    }

    /// Restricts the belief to diagonal precision. The mean of the full
    /// belief is kept, which is the KL-optimal diagonal approximation.
    pub fn project_diagonal(&self) -> Result<Self> {
        let mean = self.mean()?;
        let prec = self.lambda.diagonal();
        let xi = mean.component_mul(&prec);
        let mut b = Self::from_information(xi, DMatrix::from_diagonal(&prec))?;
        b.diagonal_only = true;
        Ok(b)
    }

    pub fn entropy(&self) -> Result<f64> {
        let chol = self
            .lambda
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Degenerate("precision matrix not positive definite".into()))?;
        let log_det_lambda: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let d = self.dim() as f64;
        Ok(0.5 * (d * (2.0 * PI * E).ln() - log_det_lambda))
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let chol = self
            .lambda
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Degenerate("precision matrix not positive definite".into()))?;
        let mean = chol.solve(&self.xi);
        let r = x - mean;
        let log_det_lambda: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let d = self.dim() as f64;
        Ok(-0.5 * d * (2.0 * PI).ln() + 0.5 * log_det_lambda - 0.5 * r.dot(&(&self.lambda * &r)))
    }
}

/// Gamma with shape `alpha` and rate `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaBelief {
    alpha: f64,
    beta: f64,
}

/// Expected sufficient statistics and curvature of a Gamma belief.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaStats {
    pub e_log: f64,
    pub e_val: f64,
    pub e_logsq: f64,
    pub fisher: Matrix2<f64>,
    pub log_partition: f64,
}

impl GammaBelief {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(beta > 0.0) || !alpha.is_finite() || !beta.is_finite() {
            return domain(format!("gamma parameters ({alpha}, {beta}) infeasible"));
        }
        Ok(Self { alpha, beta })
    }

    /// Shape/scale constructor.
    pub fn shape_scale(alpha: f64, scale: f64) -> Result<Self> {
        Self::new(alpha, 1.0 / scale)
    }

    /// From natural parameters `(alpha - 1, -beta)`.
    pub fn from_natural(eta1: f64, eta2: f64) -> Result<Self> {
        Self::new(eta1 + 1.0, -eta2)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn natural(&self) -> Vector2<f64> {
        Vector2::new(self.alpha - 1.0, -self.beta)
    }

    pub fn mean(&self) -> f64 {
        self.alpha / self.beta
    }

    pub fn e_log(&self) -> f64 {
        digamma(self.alpha) - self.beta.ln()
    }

    pub fn log_partition(&self) -> f64 {
        ln_gamma(self.alpha) - self.alpha * self.beta.ln()
    }

    pub fn fisher(&self) -> Matrix2<f64> {
        let b = self.beta;
        Matrix2::new(trigamma(self.alpha), 1.0 / b, 1.0 / b, self.alpha / (b * b))
    }

    pub fn stats(&self) -> GammaStats {
        let e_log = self.e_log();
        GammaStats {
            e_log,
            e_val: self.mean(),
            e_logsq: trigamma(self.alpha) + e_log * e_log,
            fisher: self.fisher(),
            log_partition: self.log_partition(),
        }
    }

    /// Third derivative of the log-partition along the first coordinate.
    pub fn tetragamma_alpha(&self) -> f64 {
        tetragamma(self.alpha)
    }

    pub fn entropy(&self) -> f64 {
        let a = self.alpha;
        a - self.beta.ln() + ln_gamma(a) + (1.0 - a) * digamma(a)
    }

    pub fn log_density(&self, x: f64) -> f64 {
        self.alpha * self.beta.ln() - ln_gamma(self.alpha) + (self.alpha - 1.0) * x.ln() - self.beta * x
    }
}

/// Record form of [`GammaBelief::stats`].
pub fn gamma_stats(g: &GammaBelief) -> GammaStats {
    g.stats()
}

/// `E[e^z]` under a Gaussian belief.
pub fn gaussian_mgf(g: &GaussianBelief) -> Result<f64> {
    g.mgf()
}

/// Fisher information of a Gaussian belief.
pub fn gaussian_fisher(g: &GaussianBelief) -> Matrix2<f64> {
    g.fisher()
}

/// Log-normal payload on a positive variable: `log x ~ N(m, s2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalMessage {
    pub m: f64,
    pub s2: f64,
}

impl LogNormalMessage {
    pub fn new(m: f64, s2: f64) -> Result<Self> {
        if !(s2 > 0.0) || !m.is_finite() {
            return domain(format!("log-normal parameters ({m}, {s2}) infeasible"));
        }
        Ok(Self { m, s2 })
    }

    /// Normalized density on `x > 0`, including the `1/x` Jacobian.
    pub fn log_density(&self, x: f64) -> f64 {
        let l = x.ln();
        -l - 0.5 * (2.0 * PI * self.s2).ln() - (l - self.m) * (l - self.m) / (2.0 * self.s2)
    }

    pub fn is_flat(&self) -> bool {
        self.s2.is_infinite()
    }

    pub fn flat() -> Self {
        Self { m: 0.0, s2: f64::INFINITY }
    }
}

/// Log-gamma payload on the real line with density
/// `exp(b x - e^x / a) / (a^b Gamma(b))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogGammaMessage {
    pub a: f64,
    pub b: f64,
}

impl LogGammaMessage {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0) || !(b > 0.0) || !b.is_finite() {
            return domain(format!("log-gamma parameters ({a}, {b}) infeasible"));
        }
        Ok(Self { a, b })
    }

    /// The degenerate flat message (`b = 0`, `1/a = 0`).
    pub fn flat() -> Self {
        Self { a: f64::INFINITY, b: 0.0 }
    }

    pub fn is_flat(&self) -> bool {
        self.b == 0.0 && self.a.is_infinite()
    }

    pub fn inv_a(&self) -> f64 {
        1.0 / self.a
    }

    /// `b ln a + ln Gamma(b)`; zero for the flat message.
    pub fn log_normalizer(&self) -> f64 {
        if self.is_flat() {
            0.0
        } else {
            self.b * self.a.ln() + ln_gamma(self.b)
        }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        self.b * x - x.exp() / self.a - self.log_normalizer()
    }
}

/// A point value: scalar or vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Value {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(v) => Some(*v),
            Value::Vector(v) if v.len() == 1 => Some(v[0]),
            Value::Vector(_) => None,
        }
    }

    pub fn as_vector(&self) -> DVector<f64> {
        match self {
            Value::Scalar(v) => DVector::from_element(1, *v),
            Value::Vector(v) => DVector::from_column_slice(v),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Value::Scalar(_) => 1,
            Value::Vector(v) => v.len(),
        }
    }
}

/// A normalizable marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Belief {
    Gaussian(GaussianBelief),
    MvGaussian(MvGaussianBelief),
    Gamma(GammaBelief),
}

impl Belief {
    pub fn family(&self) -> &'static str {
        match self {
            Belief::Gaussian(_) => "gaussian",
            Belief::MvGaussian(_) => "mv_gaussian",
            Belief::Gamma(_) => "gamma",
        }
    }

    pub fn entropy(&self) -> Result<f64> {
        match self {
            Belief::Gaussian(g) => Ok(g.entropy()),
            Belief::MvGaussian(g) => g.entropy(),
            Belief::Gamma(g) => Ok(g.entropy()),
        }
    }
}

/// Entropy of a belief.
pub fn entropy(b: &Belief) -> Result<f64> {
    b.entropy()
}

/// A directed payload travelling along an edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Message {
    Gaussian(GaussianBelief),
    MvGaussian(MvGaussianBelief),
    Gamma(GammaBelief),
    LogNormal(LogNormalMessage),
    LogGamma(LogGammaMessage),
    PointMass(Value),
    Flat,
}

impl Message {
    pub fn family(&self) -> &'static str {
        match self {
            Message::Gaussian(_) => "gaussian",
            Message::MvGaussian(_) => "mv_gaussian",
            Message::Gamma(_) => "gamma",
            Message::LogNormal(_) => "log_normal",
            Message::LogGamma(_) => "log_gamma",
            Message::PointMass(_) => "point_mass",
            Message::Flat => "flat",
        }
    }
}

impl From<Belief> for Message {
    fn from(b: Belief) -> Self {
        match b {
            Belief::Gaussian(g) => Message::Gaussian(g),
            Belief::MvGaussian(g) => Message::MvGaussian(g),
            Belief::Gamma(g) => Message::Gamma(g),
        }
    }
}

/// Natural-parameter accumulator used for products of conjugate payloads.
/// It may hold non-normalizable intermediate values.
#[derive(Debug, Clone, PartialEq)]
pub enum Natural {
    Gaussian(f64, f64),
    MvGaussian(DVector<f64>, DMatrix<f64>),
    Gamma(f64, f64),
}

impl Natural {
    pub fn of(msg: &Message) -> Result<Option<Natural>> {
        Ok(match msg {
            Message::Gaussian(g) => Some(Natural::Gaussian(g.eta1, g.eta2)),
            Message::MvGaussian(g) => Some(Natural::MvGaussian(g.xi.clone(), g.lambda.clone())),
            Message::Gamma(g) => Some(Natural::Gamma(g.alpha - 1.0, -g.beta)),
            Message::Flat => None,
            other => {
                return Err(Error::Family(format!(
                    "{} payload has no conjugate natural form; route it through the fixed-point solver",
                    other.family()
                )))
            }
        })
    }

    pub fn add(self, other: Natural) -> Result<Natural> {
        match (self, other) {
            (Natural::Gaussian(a1, a2), Natural::Gaussian(b1, b2)) => Ok(Natural::Gaussian(a1 + b1, a2 + b2)),
            (Natural::Gamma(a1, a2), Natural::Gamma(b1, b2)) => Ok(Natural::Gamma(a1 + b1, a2 + b2)),
            (Natural::MvGaussian(x1, l1), Natural::MvGaussian(x2, l2)) => {
                if x1.len() != x2.len() {
                    return Err(Error::Dimension(format!("{} vs {}", x1.len(), x2.len())));
                }
                Ok(Natural::MvGaussian(x1 + x2, l1 + l2))
            }
            (a, b) => Err(Error::Family(format!(
                "cannot multiply {} by {}",
                a.family(),
                b.family()
            ))),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Natural::Gaussian(..) => "gaussian",
            Natural::MvGaussian(..) => "mv_gaussian",
            Natural::Gamma(..) => "gamma",
        }
    }

    pub fn into_belief(self) -> Result<Belief> {
        match self {
            Natural::Gaussian(e1, e2) => GaussianBelief::from_natural(e1, e2)
                .map(Belief::Gaussian)
                .map_err(|e| Error::Degenerate(e.to_string())),
            Natural::Gamma(e1, e2) => GammaBelief::from_natural(e1, e2)
                .map(Belief::Gamma)
                .map_err(|e| Error::Degenerate(e.to_string())),
            Natural::MvGaussian(xi, lambda) => MvGaussianBelief::from_information(xi, lambda).map(Belief::MvGaussian),
        }
    }

    /// Converts to a message, keeping PSD information-form payloads.
    pub fn into_message(self) -> Result<Message> {
        match self {
            Natural::MvGaussian(xi, lambda) => MvGaussianBelief::message(xi, lambda).map(Message::MvGaussian),
            other => other.into_belief().map(Message::from),
        }
    }
}

/// Product of two same-family payloads; natural parameters add.
pub fn multiply_same_family(a: &Message, b: &Message) -> Result<Belief> {
    let na = Natural::of(a)?;
    let nb = Natural::of(b)?;
    let sum = match (na, nb) {
        (Some(x), Some(y)) => x.add(y)?,
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => return Err(Error::Degenerate("product of two flat messages".into())),
    };
    sum.into_belief()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gaussian_conversions() {
        assert_eq!(gaussian_to_natural(0.0, 1.0).unwrap(), (0.0, -0.5));
        assert_eq!(gaussian_to_moments(0.0, -0.5).unwrap(), (0.0, 1.0));
        assert_eq!(gaussian_to_natural(2.0, 4.0).unwrap(), (0.5, -0.125));
        assert!(gaussian_to_natural(0.0, 0.0).is_err());
        assert!(gaussian_to_moments(1.0, 0.0).is_err());
    }

    #[test]
    fn products() {
        let n01 = Message::Gaussian(GaussianBelief::from_moments(0.0, 1.0).unwrap());
        let n21 = Message::Gaussian(GaussianBelief::from_moments(2.0, 1.0).unwrap());
        match multiply_same_family(&n01, &n01).unwrap() {
            Belief::Gaussian(g) => assert_eq!(g.moments(), (0.0, 0.5)),
            _ => panic!(),
        }
        match multiply_same_family(&n01, &n21).unwrap() {
            Belief::Gaussian(g) => {
                assert_relative_eq!(g.mean(), 1.0, epsilon = 1e-15);
                assert_relative_eq!(g.var(), 0.5, epsilon = 1e-15);
            }
            _ => panic!(),
        }
        let g21 = Message::Gamma(GammaBelief::new(2.0, 1.0).unwrap());
        let g32 = Message::Gamma(GammaBelief::new(3.0, 2.0).unwrap());
        assert_eq!(
            multiply_same_family(&g21, &g32).unwrap(),
            Belief::Gamma(GammaBelief::new(4.0, 3.0).unwrap())
        );
        assert!(matches!(multiply_same_family(&n01, &g21), Err(Error::Family(_))));
        let tiny = Message::Gamma(GammaBelief::new(0.2, 1.0).unwrap());
        assert!(matches!(multiply_same_family(&tiny, &tiny), Err(Error::Degenerate(_))));
    }

    #[test]
    fn fisher_examples() {
        let f = GaussianBelief::from_natural(0.0, -0.5).unwrap().fisher();
        assert_eq!(f, Matrix2::new(1.0, 0.0, 0.0, 2.0));
        let f = GaussianBelief::from_natural(1.0, -0.5).unwrap().fisher();
        assert_eq!(f, Matrix2::new(1.0, 2.0, 2.0, 6.0));
    }

    #[test]
    fn gamma_stats_examples() {
        let s = GammaBelief::new(1.0, 1.0).unwrap().stats();
        assert_relative_eq!(s.e_log, -0.5772156649, epsilon = 1e-10);
        assert_eq!(s.e_val, 1.0);
        let s = GammaBelief::new(2.0, 2.0).unwrap().stats();
        assert_eq!(s.e_val, 1.0);
        assert_relative_eq!(s.e_log, 1.0 - 0.577_215_664_901_532_9 - 2f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn mgf_examples() {
        let g = GaussianBelief::from_moments(1.0, 2.0).unwrap();
        assert_relative_eq!(g.mgf().unwrap(), E * E, max_relative = 1e-15);
        let far = GaussianBelief::from_moments(800.0, 1.0).unwrap();
        assert!(matches!(far.mgf(), Err(Error::Saturation(_))));
    }

    #[test]
    fn entropy_examples() {
        let n01 = GaussianBelief::from_moments(0.0, 1.0).unwrap();
        assert_relative_eq!(n01.entropy(), 1.4189385332046727, epsilon = 1e-12);
        let n51 = GaussianBelief::from_moments(5.0, 1.0).unwrap();
        assert_eq!(n01.entropy(), n51.entropy());
        let mv = MvGaussianBelief::isotropic(DVector::zeros(3), 1.0).unwrap();
        assert_relative_eq!(mv.entropy().unwrap(), 3.0 * n01.entropy(), epsilon = 1e-12);
    }

    #[test]
    fn diagonal_projection_keeps_mean() {
        let lambda = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let xi = DVector::from_vec(vec![1.0, -1.0]);
        let full = MvGaussianBelief::from_information(xi, lambda).unwrap();
        let diag = full.project_diagonal().unwrap();
        assert!(diag.diagonal_only());
        assert_eq!(diag.lambda()[(0, 1)], 0.0);
        let (a, b) = (full.mean().unwrap(), diag.mean().unwrap());
        assert_relative_eq!(a, b, epsilon = 1e-14);
    }

    #[test]
    fn rejects_infeasible() {
        assert!(GammaBelief::new(0.0, 1.0).is_err());
        assert!(GammaBelief::new(1.0, -1.0).is_err());
        assert!(GaussianBelief::from_natural(0.0, 0.0).is_err());
        assert!(LogGammaMessage::new(1.0, 0.0).is_err());
        assert!(LogNormalMessage::new(0.0, 0.0).is_err());
    }
}

//! `Γ_{t,s} = R_{t,s}^{−1/2} U(t,s)` and Monte Carlo checks of the
//! dimension-free Harnack inequality, its log variant, the strong-Feller
//! variance estimate and the hyperboundedness constant.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MehlerError, Result};
use crate::functions::TestFunction;
use crate::kernel::{sample_statistics, MehlerSystem};
use crate::linalg::{RangeSolver, TAU_RANGE};
use crate::stats::{McEstimate, Moments, Verdict};
use crate::triplet::IdTriplet;

/// `v ↦ |R^{−1/2} U v|`, with `+∞` when `Uv` leaves the range of `R^{1/2}`.
#[derive(Debug, Clone)]
pub struct GammaOperator {
    pub u: DMatrix<f64>,
    /// Pseudo-inverse square root composed with `U`.
    pub gamma: DMatrix<f64>,
    /// Singular values of `R^{1/2}`.
    pub svals: DVector<f64>,
    solver: RangeSolver,
}

impl GammaOperator {
    pub fn new(covariance: &DMatrix<f64>, u: DMatrix<f64>) -> Result<Self> {
        let solver = RangeSolver::new(covariance, TAU_RANGE)?;
        Ok(Self {
            gamma: &solver.pinv_sqrt * &u,
            svals: solver.eigen.values.map(f64::sqrt),
            u,
            solver,
        })
    }

    pub fn for_system(sys: &MehlerSystem, s: f64, t: f64) -> Result<Self> {
        let trip = sys.build_triplet(s, t)?;
        Self::new(&trip.r, sys.prop.propagate(s, t)?)
    }

    pub fn norm(&self, v: &DVector<f64>) -> f64 {
        self.solver.norm_of_preimage(&(&self.u * v))
    }

    /// Whether `U(H) ⊂ R^{1/2}(H)`, tested on the basis vectors.
    pub fn null_controllable(&self) -> bool {
        (0..self.u.ncols()).all(|i| self.solver.in_range(&self.u.column(i).into_owned()))
    }

    /// `‖Γ‖`, infinite when the range condition fails.
    pub fn operator_norm(&self) -> f64 {
        if !self.null_controllable() {
            return f64::INFINITY;
        }
        self.gamma.singular_values().iter().fold(0.0_f64, |acc, v| acc.max(*v))
    }

    /// Precomputed image of `x` for repeated pair evaluations.
    fn image(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let ux = &self.u * x;
        let w = &self.solver.pinv_sqrt * &ux;
        let resid = &self.solver.sqrt * &w - &ux;
        (ux, w, resid)
    }
}

/// `|Γ_{t,s} v|`, `+∞` off the domain.
pub fn gamma_apply(sys: &MehlerSystem, s: f64, t: f64, v: &DVector<f64>) -> Result<f64> {
    Ok(GammaOperator::for_system(sys, s, t)?.norm(v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub check: String,
    pub lhs: f64,
    pub lhs_ci: (f64, f64),
    pub rhs: f64,
    pub rhs_ci: (f64, f64),
    /// Multiplicative or additive constant of the bound.
    pub constant: f64,
    pub gamma: f64,
    pub verdict: Verdict,
}

impl InequalityReport {
    fn vacuous(check: &str, lhs: f64, lhs_sigma: f64, gamma: f64) -> Self {
        Self {
            check: check.to_string(),
            lhs,
            lhs_ci: (lhs - 3.0 * lhs_sigma, lhs + 3.0 * lhs_sigma),
            rhs: f64::INFINITY,
            rhs_ci: (f64::INFINITY, f64::INFINITY),
            constant: f64::INFINITY,
            gamma,
            verdict: Verdict::Vacuous,
        }
    }

    fn decide(check: &str, lhs: f64, lhs_sigma: f64, rhs: f64, rhs_sigma: f64, constant: f64, gamma: f64) -> Self {
        let sigma = (lhs_sigma * lhs_sigma + rhs_sigma * rhs_sigma).sqrt();
        Self {
            check: check.to_string(),
            lhs,
            lhs_ci: (lhs - 3.0 * lhs_sigma, lhs + 3.0 * lhs_sigma),
            rhs,
            rhs_ci: (rhs - 3.0 * rhs_sigma, rhs + 3.0 * rhs_sigma),
            constant,
            gamma,
            verdict: Verdict::classify(lhs - rhs, sigma),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 1.0) {
        return Err(MehlerError::Domain(format!("alpha must exceed 1, got {alpha}")));
    }
    Ok(())
}

fn check_nonneg(value: f64) -> std::result::Result<(), MehlerError> {
    if value < 0.0 {
        Err(MehlerError::Domain(format!("test function took negative value {value}")))
    } else {
        Ok(())
    }
}

/// `exp(α|Γv|²/(2(α−1)))`.
pub fn harnack_constant(alpha: f64, gamma_norm: f64) -> f64 {
    (alpha * gamma_norm * gamma_norm / (2.0 * (alpha - 1.0))).exp()
}

/// Monte Carlo check of `(p f(x))^α ≤ exp(α|Γ(x−y)|²/(2(α−1))) p f^α(y)`, or of
/// the log-Harnack inequality `p log f(x) ≤ log p f(y) + ‖Γ‖²|x−y|²/2` when
/// `log_mode` is set. Both sides use the same kernel draws.
#[allow(clippy::too_many_arguments)]
pub fn harnack_check<R: Rng + ?Sized>(
    sys: &MehlerSystem,
    s: f64,
    t: f64,
    f: &TestFunction,
    alpha: f64,
    x: &DVector<f64>,
    y: &DVector<f64>,
    n: usize,
    rng: &mut R,
    log_mode: bool,
) -> Result<InequalityReport> {
    check_alpha(alpha)?;
    f.validate(sys.dim())?;
    let trip = sys.build_triplet(s, t)?;
    let gamma = GammaOperator::new(&trip.r, sys.prop.propagate(s, t)?)?;
    let ux = &gamma.u * x;
    let uy = &gamma.u * y;
    let sampler = trip.sampler()?;

    if log_mode {
        if !f.exceeds_one() {
            return Err(MehlerError::Domain("log-Harnack mode needs f > 1".into()));
        }
        let stats = sample_statistics(&sampler, n, rng, 2, |z, out| {
            out[0] = f.eval(&(&ux + z)).ln();
            out[1] = f.eval(&(&uy + z));
        })?;
        let (lx, fy) = (stats[0].estimate(), stats[1].estimate());
        let op = gamma.operator_norm();
        let dist = (x - y).norm();
        if op.is_infinite() && dist > 0.0 {
            return Ok(InequalityReport::vacuous("log_harnack", lx.mean, lx.std_err, op));
        }
        let additive = if dist == 0.0 { 0.0 } else { 0.5 * op * op * dist * dist };
        let rhs = fy.mean.ln() + additive;
        return Ok(InequalityReport::decide("log_harnack", lx.mean, lx.std_err, rhs, fy.std_err / fy.mean, additive, op));
    }

    if !f.is_nonnegative() {
        return Err(MehlerError::Domain("Harnack check needs a nonnegative test function".into()));
    }
    let stats = sample_statistics(&sampler, n, rng, 2, |z, out| {
        out[0] = f.eval(&(&ux + z));
        out[1] = f.eval(&(&uy + z)).powf(alpha);
    })?;
    let (fx, fay) = (stats[0].estimate(), stats[1].estimate());
    check_nonneg(fx.mean)?;
    let g = gamma.norm(&(x - y));
    let lhs = fx.mean.powf(alpha);
    let lhs_sigma = alpha * fx.mean.powf(alpha - 1.0) * fx.std_err;
    if g.is_infinite() {
        return Ok(InequalityReport::vacuous("harnack", lhs, lhs_sigma, g));
    }
    let constant = harnack_constant(alpha, g);
    Ok(InequalityReport::decide("harnack", lhs, lhs_sigma, constant * fay.mean, constant * fay.std_err, constant, g))
}

/// Monte Carlo check of
/// `|p f(x) − p f(y)|² ≤ (e^{|Γ(x−y)|²} − 1) min_{z∈{x,y}} (p f²(z) − (p f(z))²)`.
#[allow(clippy::too_many_arguments)]
pub fn strong_feller_bound<R: Rng + ?Sized>(
    sys: &MehlerSystem,
    s: f64,
    t: f64,
    f: &TestFunction,
    x: &DVector<f64>,
    y: &DVector<f64>,
    n: usize,
    rng: &mut R,
) -> Result<InequalityReport> {
    f.validate(sys.dim())?;
    if !f.is_bounded() {
        return Err(MehlerError::Domain("strong Feller check needs a bounded test function".into()));
    }
    let trip = sys.build_triplet(s, t)?;
    let gamma = GammaOperator::new(&trip.r, sys.prop.propagate(s, t)?)?;
    let ux = &gamma.u * x;
    let uy = &gamma.u * y;
    let stats = sample_statistics(&trip.sampler()?, n, rng, 5, |z, out| {
        let a = f.eval(&(&ux + z));
        let b = f.eval(&(&uy + z));
        out[0] = a;
        out[1] = a * a;
        out[2] = b;
        out[3] = b * b;
        out[4] = a - b;
    })?;
    let e: Vec<McEstimate> = stats.iter().map(Moments::estimate).collect();
    let diff = e[4].mean;
    let se_diff = e[4].std_err;
    let lhs = diff * diff;
    let lhs_sigma = 2.0 * diff.abs() * se_diff + se_diff * se_diff;
    let g = gamma.norm(&(x - y));
    if g.is_infinite() {
        return Ok(InequalityReport::vacuous("strong_feller", lhs, lhs_sigma, g));
    }
    let variance = |m: &McEstimate, m2: &McEstimate| {
        let v = m2.mean - m.mean * m.mean;
        let se = (m2.std_err.powi(2) + (2.0 * m.mean * m.std_err).powi(2)).sqrt();
        (v.max(0.0), se)
    };
    let (vx, sx) = variance(&e[0], &e[1]);
    let (vy, sy) = variance(&e[2], &e[3]);
    let (vmin, smin) = if vx <= vy { (vx, sx) } else { (vy, sy) };
    let factor = (g * g).exp_m1();
    Ok(InequalityReport::decide("strong_feller", lhs, lhs_sigma, factor * vmin, factor * smin, factor, g))
}

/// Nested Monte Carlo estimate of
/// `C_{s,t}(α,ε) = ∫ [∫ exp(−α|Γ(x−y)|²/(2(α−1))) ν_s(dy)]^{−(1+ε)} ν_s(dx)`,
/// with `n` outer draws and `n` shared inner draws.
#[allow(clippy::too_many_arguments)]
pub fn hyperbound_constant<R: Rng + ?Sized>(
    sys: &MehlerSystem,
    s: f64,
    t: f64,
    nu_s: &IdTriplet,
    alpha: f64,
    eps: f64,
    n: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    let gamma = GammaOperator::for_system(sys, s, t)?;
    hyperbound_with(&gamma, nu_s, alpha, eps, n, rng)
}

pub fn hyperbound_with<R: Rng + ?Sized>(
    gamma: &GammaOperator,
    nu_s: &IdTriplet,
    alpha: f64,
    eps: f64,
    n: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    check_alpha(alpha)?;
    if !(eps > 0.0) {
        return Err(MehlerError::Domain(format!("eps must be positive, got {eps}")));
    }
    if n < 2 {
        return Err(MehlerError::Domain("hyperbound estimate needs n >= 2".into()));
    }
    let kappa = alpha / (2.0 * (alpha - 1.0));
    let inner = nu_s.sample(n, rng)?;
    let images: Vec<_> = (0..n).map(|j| gamma.image(&inner.row(j).transpose())).collect();
    let outer = nu_s.sample(n, rng)?;
    let tau = TAU_RANGE;
    let values: Vec<f64> = (0..n)
        .map(|i| {
            let (ux, wx, rx) = gamma.image(&outer.row(i).transpose());
            let integral = images
                .iter()
                .map(|(uy, wy, ry)| {
                    let du = (&ux - uy).norm();
                    if du == 0.0 {
                        return 1.0;
                    }
                    if (&rx - ry).norm() > tau * du {
                        return 0.0;
                    }
                    (-kappa * (&wx - wy).norm_squared()).exp()
                })
                .sum::<f64>()
                / n as f64;
            if integral == 0.0 {
                f64::INFINITY
            } else {
                integral.powf(-(1.0 + eps))
            }
        })
        .collect();
    if values.iter().any(|v| v.is_infinite()) {
        return Ok(McEstimate { n: n as u64, mean: f64::INFINITY, std_err: f64::INFINITY, half_width: f64::INFINITY });
    }
    Ok(values.into_iter().collect::<Moments>().estimate())
}

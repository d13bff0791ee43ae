//! Controllability Gramian, minimal energy and explicit null controls for
//! `dz = A(t) z dt + C(t) u dt`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MehlerError, Result};
use crate::evolution::{integrate_rk4, MatrixFn, Propagator};
use crate::linalg::{symmetrize, RangeSolver, TAU_RANGE, TAU_SVD};

/// Relative slack on the weighted energy bound (quadrature of the bound only).
pub const BOUND_SLACK: f64 = 1e-3;

#[derive(Clone)]
pub struct ControlSystem {
    pub prop: Arc<Propagator>,
    c_family: MatrixFn,
}

impl fmt::Debug for ControlSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlSystem").field("prop", &self.prop).finish()
    }
}

/// Positive weights `ξ_r` for the explicit control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Weight {
    Constant,
    /// `exp(β (r − s))`.
    Exponential { beta: f64 },
    /// Piecewise-linear in absolute time, constant beyond the ends.
    Tabulated { knots: Vec<f64>, values: Vec<f64> },
}

impl Weight {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "constant" => Ok(Weight::Constant),
            other => {
                if let Some(beta) = other.strip_prefix("exponential:").or_else(|| other.strip_prefix("exp:")) {
                    let beta = beta
                        .parse()
                        .map_err(|_| MehlerError::Config(format!("bad exponential rate in '{other}'")))?;
                    Ok(Weight::Exponential { beta })
                } else {
                    Err(MehlerError::Config(format!("unknown weight '{other}'")))
                }
            }
        }
    }

    pub fn eval(&self, s: f64, r: f64) -> f64 {
        match self {
            Weight::Constant => 1.0,
            Weight::Exponential { beta } => (beta * (r - s)).exp(),
            Weight::Tabulated { knots, values } => {
                if r <= knots[0] {
                    return values[0];
                }
                let last = knots.len() - 1;
                if r >= knots[last] {
                    return values[last];
                }
                let i = knots.partition_point(|k| *k <= r) - 1;
                let frac = (r - knots[i]) / (knots[i + 1] - knots[i]);
                values[i] + frac * (values[i + 1] - values[i])
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let Weight::Tabulated { knots, values } = self {
            if knots.is_empty() || knots.len() != values.len() || knots.windows(2).any(|w| w[0] >= w[1]) {
                return Err(MehlerError::Config("tabulated weight needs increasing knots matching values".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlCertificate {
    pub gramian: Vec<Vec<f64>>,
    /// `U(t,s)x ∈ Π^{1/2}(R^d)`.
    pub in_range: bool,
    /// `U(t,s)(R^d) ⊂ Π^{1/2}(R^d)`.
    pub null_controllable: bool,
    pub min_energy: f64,
    /// Grid nodes and control values `u(r_k)`.
    pub control: Option<Vec<(f64, Vec<f64>)>>,
    pub energy: Option<f64>,
    pub energy_bound: Option<f64>,
    pub transfer_residual: Option<f64>,
}

impl ControlSystem {
    pub fn new(prop: Arc<Propagator>, c_family: MatrixFn) -> Self {
        Self { prop, c_family }
    }

    pub fn constant(prop: Arc<Propagator>, c: DMatrix<f64>) -> Self {
        Self::new(prop, Arc::new(move |_| c.clone()))
    }

    pub fn dim(&self) -> usize {
        self.prop.dim()
    }

    pub fn c_at(&self, r: f64) -> Result<DMatrix<f64>> {
        let c = (self.c_family)(r);
        let d = self.dim();
        if c.nrows() != d || c.ncols() != d {
            return Err(MehlerError::DimensionMismatch { expected: d, found: c.nrows().max(c.ncols()) });
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(MehlerError::Evaluation(format!("C({r}) is not finite")));
        }
        Ok(c)
    }

    fn interval(&self, s: f64, t: f64) -> Result<(i64, i64)> {
        if !(t > s) {
            return Err(MehlerError::Domain(format!("control horizon requires t > s, got s={s}, t={t}")));
        }
        Ok((self.prop.index(s)?, self.prop.index(t)?))
    }

    /// `Π_{t,s} = Σ_k h U(t,r_k) C C(r_k)ᵀ U(t,r_k)ᵀ` on the midpoint nodes.
    pub fn gramian(&self, s: f64, t: f64) -> Result<DMatrix<f64>> {
        let (ks, kt) = self.interval(s, t)?;
        let h = self.prop.step();
        let d = self.dim();
        let mut acc = DMatrix::zeros(d, d);
        for (j, u) in self.prop.to_nodes(ks, kt)?.iter().enumerate() {
            let c = self.c_at(self.prop.node(ks + j as i64))?;
            let b = u * c;
            acc += (&b * b.transpose()) * h;
        }
        Ok(symmetrize(&acc))
    }

    /// `|Π_{t,s}^{−1/2} U(t,s) x|²`, `+∞` when `U(t,s)x` is off the range.
    pub fn min_energy(&self, s: f64, t: f64, x: &DVector<f64>) -> Result<f64> {
        let solver = RangeSolver::new(&self.gramian(s, t)?, TAU_RANGE)?;
        let v = solver.norm_of_preimage(&(self.prop.propagate(s, t)? * x));
        Ok(v * v)
    }

    pub fn certificate(&self, s: f64, t: f64, x: &DVector<f64>) -> Result<ControlCertificate> {
        let gramian = self.gramian(s, t)?;
        let solver = RangeSolver::new(&gramian, TAU_RANGE)?;
        let u = self.prop.propagate(s, t)?;
        let target = &u * x;
        let norm = solver.norm_of_preimage(&target);
        let null_controllable = (0..u.ncols()).all(|i| solver.in_range(&u.column(i).into_owned()));
        Ok(ControlCertificate {
            gramian: crate::triplet::matrix_to_rows(&gramian),
            in_range: solver.in_range(&target),
            null_controllable,
            min_energy: norm * norm,
            control: None,
            energy: None,
            energy_bound: None,
            transfer_residual: None,
        })
    }

    /// Tabulates `u(r) = −ξ_r/(∫ξ) C(r)^{−1} U(r,s) x`, verifies that it steers
    /// `x` to zero and checks its energy against the weighted bound and the
    /// minimal energy.
    pub fn synthesize_control(&self, s: f64, t: f64, x: &DVector<f64>, weight: &Weight) -> Result<ControlCertificate> {
        weight.validate()?;
        let (ks, kt) = self.interval(s, t)?;
        let h = self.prop.step();
        let mut cert = self.certificate(s, t, x)?;
        let from_start = self.prop.from_start_to_nodes(ks, kt)?;
        let to_end = self.prop.to_nodes(ks, kt)?;
        let nodes: Vec<f64> = (ks..kt).map(|k| self.prop.node(k)).collect();
        let xi: Vec<f64> = nodes.iter().map(|&r| weight.eval(s, r)).collect();
        if let Some(bad) = xi.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(MehlerError::Control(format!("weight must be strictly positive, found {bad}")));
        }
        let total: f64 = xi.iter().sum::<f64>() * h;

        let mut control = Vec::with_capacity(nodes.len());
        let mut reached = self.prop.propagate(s, t)? * x;
        let mut energy = 0.0;
        let mut steered = Vec::with_capacity(nodes.len());
        for (k, &r) in nodes.iter().enumerate() {
            let c = self.c_at(r)?;
            let c_inv = c
                .clone()
                .try_inverse()
                .ok_or_else(|| MehlerError::Control(format!("C({r}) is singular")))?;
            let state = &c_inv * (&from_start[k] * x);
            let uk = &state * (-xi[k] / total);
            reached += (&to_end[k] * &c * &uk) * h;
            energy += uk.norm_squared() * h;
            steered.push(state.norm_squared());
            control.push((r, uk.iter().copied().collect()));
        }
        let residual = reached.norm();
        let tol = 1e-6 * (1.0 + x.norm());
        if residual > tol {
            return Err(MehlerError::Control(format!("transfer residual {residual:.3e} exceeds {tol:.3e}")));
        }

        let bound = self.trapezoid_bound(s, t, x, weight)?;
        if energy > bound * (1.0 + BOUND_SLACK) {
            return Err(MehlerError::Control(format!("energy {energy} exceeds weighted bound {bound}")));
        }
        if energy < cert.min_energy - 1e-9 * (1.0 + cert.min_energy) {
            return Err(MehlerError::Control(format!(
                "energy {energy} undercuts minimal energy {}",
                cert.min_energy
            )));
        }
        cert.control = Some(control);
        cert.energy = Some(energy);
        cert.energy_bound = Some(bound);
        cert.transfer_residual = Some(residual);
        Ok(cert)
    }

    /// `∫ξ²|C^{−1}U(·,s)x|² / (∫ξ)²` by the trapezoid rule on the grid times.
    fn trapezoid_bound(&self, s: f64, t: f64, x: &DVector<f64>, weight: &Weight) -> Result<f64> {
        let (ks, kt) = self.interval(s, t)?;
        let h = self.prop.step();
        let mut state = x.clone();
        let mut num = 0.0;
        let mut den = 0.0;
        for k in ks..=kt {
            let r = self.prop.time(k);
            let end = if k == ks || k == kt { 0.5 } else { 1.0 };
            let c_inv = self
                .c_at(r)?
                .try_inverse()
                .ok_or_else(|| MehlerError::Control(format!("C({r}) is singular")))?;
            let w = weight.eval(s, r);
            num += end * h * w * w * (&c_inv * &state).norm_squared();
            den += end * h * w;
            if k < kt {
                state = &self.prop.cell(k)?.full * state;
            }
        }
        Ok(num / (den * den))
    }

    /// Least-norm discrete control on `nodes` uniform midpoints, with maps
    /// integrated afresh (independent of the grid cache). `+∞` when the
    /// discretized target is off the range.
    pub fn brute_force_min_energy(&self, s: f64, t: f64, x: &DVector<f64>, nodes: usize) -> Result<f64> {
        self.interval(s, t)?;
        if nodes == 0 {
            return Err(MehlerError::Domain("brute force needs at least one node".into()));
        }
        if x.iter().all(|v| *v == 0.0) {
            return Ok(0.0);
        }
        let d = self.dim();
        let family = self.prop.family();
        let omega = (t - s) / nodes as f64;
        let sub = ((omega / self.prop.step()).ceil() as usize).max(1) * 2;
        let mut k = DMatrix::zeros(d, d * nodes);
        let r_last = s + (nodes as f64 - 0.5) * omega;
        let mut back = integrate_rk4(family, r_last, t, sub)?;
        for j in (0..nodes).rev() {
            let r = s + (j as f64 + 0.5) * omega;
            if j + 1 < nodes {
                back = back * integrate_rk4(family, r, r + omega, 2 * sub)?;
            }
            let block = &back * self.c_at(r)? * omega.sqrt();
            k.view_mut((0, j * d), (d, d)).copy_from(&block);
        }
        let target = -(integrate_rk4(family, s, t, 2 * sub * nodes)? * x);
        let svd = k.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let v = svd
            .solve(&target, TAU_SVD * smax)
            .map_err(|e| MehlerError::Evaluation(e.to_string()))?;
        let residual = (&k * &v - &target).norm();
        if residual > TAU_RANGE * target.norm() {
            return Ok(f64::INFINITY);
        }
        Ok(v.norm_squared())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::OperatorFamily;

    fn scalar(a: f64) -> ControlSystem {
        let prop = Propagator::new(OperatorFamily::constant(DMatrix::from_element(1, 1, a)), 1.0 / 256.0).unwrap();
        ControlSystem::constant(Arc::new(prop), DMatrix::identity(1, 1))
    }

    #[test]
    fn zero_control_operator() {
        let prop = Propagator::new(OperatorFamily::zero(2), 0.125).unwrap();
        let sys = ControlSystem::constant(Arc::new(prop), DMatrix::zeros(2, 2));
        assert_eq!(sys.gramian(0.0, 1.0).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn scalar_values() {
        let sys = scalar(-1.0);
        let g = sys.gramian(0.0, 1.0).unwrap()[(0, 0)];
        let exact = (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((g - exact).abs() < 1e-4);
        let e = sys.min_energy(0.0, 1.0, &DVector::from_element(1, 1.0)).unwrap();
        assert!((e - 0.313035).abs() < 1e-3);
        assert_eq!(scalar(0.0).gramian(0.0, 1.0).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn rejects_empty_horizon() {
        assert!(scalar(-1.0).gramian(1.0, 1.0).is_err());
    }

    #[test]
    fn optimal_weight_attains_minimum() {
        let sys = scalar(-1.0);
        let x = DVector::from_element(1, 1.0);
        let cert = sys.synthesize_control(0.0, 1.0, &x, &Weight::Exponential { beta: 2.0 }).unwrap();
        let e = cert.energy.unwrap();
        assert!((e - cert.min_energy).abs() <= 1e-3 * cert.min_energy);
        let flat = sys.synthesize_control(0.0, 1.0, &x, &Weight::Constant).unwrap();
        assert!(flat.energy.unwrap() > cert.min_energy);
    }

    #[test]
    fn zero_state_needs_no_control() {
        let sys = scalar(-1.0);
        let cert = sys.synthesize_control(0.0, 1.0, &DVector::zeros(1), &Weight::Constant).unwrap();
        assert_eq!(cert.energy, Some(0.0));
        assert_eq!(sys.brute_force_min_energy(0.0, 1.0, &DVector::zeros(1), 16).unwrap(), 0.0);
    }

    #[test]
    fn uncontrollable_coordinate() {
        let prop = Propagator::new(OperatorFamily::zero(2), 1.0 / 64.0).unwrap();
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        let sys = ControlSystem::constant(Arc::new(prop), c);
        let x = DVector::from_vec(vec![0.0, 1.0]);
        assert!(sys.min_energy(0.0, 1.0, &x).unwrap().is_infinite());
        assert!(sys.brute_force_min_energy(0.0, 1.0, &x, 32).unwrap().is_infinite());
        let cert = sys.certificate(0.0, 1.0, &x).unwrap();
        assert!(!cert.in_range && !cert.null_controllable);
        assert!(sys.synthesize_control(0.0, 1.0, &x, &Weight::Constant).is_err());
    }

    #[test]
    fn weight_names() {
        assert_eq!(Weight::from_name("exp:2").unwrap(), Weight::Exponential { beta: 2.0 });
        assert!(Weight::from_name("bogus").is_err());
    }
}

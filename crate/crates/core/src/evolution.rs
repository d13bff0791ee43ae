//! Evolution family `U(t,s)` of the non-autonomous linear equation
//! `dU/dt = A(t) U`, `U(s,s) = I`, integrated with the classical RK4 scheme on a
//! uniform grid of step `h`.
//!
//! Every public time must be an integer multiple of `h`. Quadrature routines
//! elsewhere evaluate integrands at cell midpoints `r_k = (k + 1/2) h`; the
//! propagator therefore also caches the two half-cell maps of each cell.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MehlerError, Result};
use crate::linalg::frobenius;

pub type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

/// Default relative tolerance on the cocycle identity.
pub const TOL_COCYCLE: f64 = 1e-8;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StructureTags {
    #[serde(default)]
    pub constant: bool,
    #[serde(default)]
    pub commuting: bool,
    #[serde(default)]
    pub periodic: Option<f64>,
}

/// Time-dependent generator `t ↦ A(t)` on `R^d`.
#[derive(Clone)]
pub struct OperatorFamily {
    dim: usize,
    generator: MatrixFn,
    pub tags: StructureTags,
}

impl fmt::Debug for OperatorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OperatorFamily")
            .field("dim", &self.dim)
            .field("tags", &self.tags)
            .finish()
    }
}

impl OperatorFamily {
    pub fn new(dim: usize, generator: MatrixFn, tags: StructureTags) -> Self {
        Self {
            dim,
            generator,
            tags,
        }
    }

    pub fn from_fn(
        dim: usize,
        f: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
        tags: StructureTags,
    ) -> Self {
        Self::new(dim, Arc::new(f), tags)
    }

    pub fn constant(a: DMatrix<f64>) -> Self {
        let dim = a.nrows();
        let tags = StructureTags {
            constant: true,
            commuting: true,
            periodic: None,
        };
        Self::from_fn(dim, move |_| a.clone(), tags)
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(DMatrix::zeros(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, t: f64) -> Result<DMatrix<f64>> {
        let a = (self.generator)(t);
        if a.nrows() != self.dim || a.ncols() != self.dim {
            return Err(MehlerError::DimensionMismatch {
                expected: self.dim,
                found: a.nrows().max(a.ncols()),
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(MehlerError::NumericalBlowup(t));
        }
        Ok(a)
    }

    /// Spot-checks the `constant` and `periodic` tags at the given times.
    pub fn check_tags(&self, times: &[f64]) -> Result<()> {
        if self.tags.constant {
            if let Some(&t0) = times.first() {
                let a0 = self.eval(t0)?;
                for &t in times {
                    if frobenius(&(self.eval(t)? - &a0)) > 1e-12 * (1.0 + frobenius(&a0)) {
                        return Err(MehlerError::Config(format!(
                            "generator tagged constant but A({t}) differs from A({t0})"
                        )));
                    }
                }
            }
        }
        if let Some(period) = self.tags.periodic {
            if !(period > 0.0) {
                return Err(MehlerError::Config(format!("invalid period {period}")));
            }
            for &t in times {
                let a = self.eval(t)?;
                let shifted = self.eval(t + period)?;
                if frobenius(&(shifted - &a)) > 1e-9 * (1.0 + frobenius(&a)) {
                    return Err(MehlerError::Config(format!(
                        "generator tagged periodic({period}) but A({t}) != A({t}+T)"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One RK4 step of the linear matrix equation applied to the identity.
fn rk4_map(family: &OperatorFamily, t0: f64, dt: f64) -> Result<DMatrix<f64>> {
    let d = family.dim();
    let id = DMatrix::<f64>::identity(d, d);
    let a0 = family.eval(t0)?;
    let am = family.eval(t0 + 0.5 * dt)?;
    let a1 = family.eval(t0 + dt)?;
    let k1 = a0;
    let k2 = &am * (&id + &k1 * (0.5 * dt));
    let k3 = &am * (&id + &k2 * (0.5 * dt));
    let k4 = &a1 * (&id + &k3 * dt);
    let phi = id + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(MehlerError::NumericalBlowup(t0));
    }
    Ok(phi)
}

/// Integrates `dU/dτ = A(τ)U` from `s` to `t` with `steps` uniform RK4 steps.
/// Independent of any grid or cache; used by oracles.
pub fn integrate_rk4(family: &OperatorFamily, s: f64, t: f64, steps: usize) -> Result<DMatrix<f64>> {
    let d = family.dim();
    let mut u = DMatrix::identity(d, d);
    if t == s || steps == 0 {
        return Ok(u);
    }
    let dt = (t - s) / steps as f64;
    for i in 0..steps {
        u = rk4_map(family, s + i as f64 * dt, dt)? * u;
    }
    Ok(u)
}

/// Maps of grid cell `k = [t_k, t_{k+1}]`.
#[derive(Debug, Clone)]
pub struct CellMaps {
    /// `U(t_{k+1}, t_k)`
    pub full: DMatrix<f64>,
    /// `U(r_k, t_k)` with `r_k` the cell midpoint
    pub first_half: DMatrix<f64>,
    /// `U(t_{k+1}, r_k)`
    pub second_half: DMatrix<f64>,
}

/// Cached evolution family on the grid `hZ`.
pub struct Propagator {
    family: OperatorFamily,
    step: f64,
    cells: RwLock<HashMap<i64, Arc<CellMaps>>>,
    pairs: RwLock<HashMap<(i64, i64), DMatrix<f64>>>,
    frozen: AtomicBool,
    pub tol_cocycle: f64,
}

impl fmt::Debug for Propagator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Propagator")
            .field("family", &self.family)
            .field("step", &self.step)
            .field("frozen", &self.frozen.load(Ordering::Relaxed))
            .finish()
    }
}

impl Propagator {
    pub fn new(family: OperatorFamily, step: f64) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(MehlerError::Domain(format!("base step must be positive, got {step}")));
        }
        Ok(Self {
            family,
            step,
            cells: RwLock::new(HashMap::new()),
            pairs: RwLock::new(HashMap::new()),
            frozen: AtomicBool::new(false),
            tol_cocycle: TOL_COCYCLE,
        })
    }

    pub fn family(&self) -> &OperatorFamily {
        &self.family
    }

    pub fn dim(&self) -> usize {
        self.family.dim()
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Grid index of an aligned time.
    pub fn index(&self, t: f64) -> Result<i64> {
        if !t.is_finite() {
            return Err(MehlerError::Misaligned { time: t, step: self.step });
        }
        let k = (t / self.step).round();
        if (t / self.step - k).abs() > 1e-7 {
            return Err(MehlerError::Misaligned { time: t, step: self.step });
        }
        Ok(k as i64)
    }

    pub fn time(&self, k: i64) -> f64 {
        k as f64 * self.step
    }

    /// Midpoint of cell `k`.
    pub fn node(&self, k: i64) -> f64 {
        (k as f64 + 0.5) * self.step
    }

    pub fn cell(&self, k: i64) -> Result<Arc<CellMaps>> {
        if let Some(c) = self.cells.read().expect("cell cache poisoned").get(&k) {
            return Ok(Arc::clone(c));
        }
        if self.frozen.load(Ordering::Acquire) {
            return Err(MehlerError::CacheMiss {
                s: self.time(k),
                t: self.time(k + 1),
            });
        }
        let t0 = self.time(k);
        let h = self.step;
        let maps = Arc::new(CellMaps {
            full: rk4_map(&self.family, t0, h)?,
            first_half: rk4_map(&self.family, t0, 0.5 * h)?,
            second_half: rk4_map(&self.family, t0 + 0.5 * h, 0.5 * h)?,
        });
        self.cells
            .write()
            .expect("cell cache poisoned")
            .insert(k, Arc::clone(&maps));
        Ok(maps)
    }

    /// Populates the cell cache on `[s, t]` and freezes it; afterwards the
    /// propagator is read-only and cache misses outside the window are errors.
    pub fn warm_up(&self, s: f64, t: f64) -> Result<()> {
        let (ks, kt) = (self.index(s)?, self.index(t)?);
        for k in ks..kt {
            self.cell(k)?;
        }
        self.frozen.store(true, Ordering::Release);
        Ok(())
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.load(Ordering::Acquire)
    }

    fn ordered(&self, s: f64, t: f64) -> Result<(i64, i64)> {
        if t < s {
            return Err(MehlerError::Domain(format!("propagate requires t >= s, got s={s}, t={t}")));
        }
        Ok((self.index(s)?, self.index(t)?))
    }

    fn product(&self, ks: i64, kt: i64) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let mut u = DMatrix::identity(d, d);
        for k in ks..kt {
            u = &self.cell(k)?.full * u;
        }
        Ok(u)
    }

    /// `U(t, s)` for grid-aligned `s <= t`.
    pub fn propagate(&self, s: f64, t: f64) -> Result<DMatrix<f64>> {
        let (ks, kt) = self.ordered(s, t)?;
        if ks == kt {
            return Ok(DMatrix::identity(self.dim(), self.dim()));
        }
        if let Some(u) = self.pairs.read().expect("pair cache poisoned").get(&(ks, kt)) {
            return Ok(u.clone());
        }
        let u = self.product(ks, kt)?;
        if !self.is_frozen() {
            self.pairs
                .write()
                .expect("pair cache poisoned")
                .insert((ks, kt), u.clone());
        }
        Ok(u)
    }

    /// `U(t, s)ᵀ ξ`.
    pub fn adjoint_apply(&self, s: f64, t: f64, xi: &DVector<f64>) -> Result<DVector<f64>> {
        if xi.len() != self.dim() {
            return Err(MehlerError::DimensionMismatch {
                expected: self.dim(),
                found: xi.len(),
            });
        }
        Ok(self.propagate(s, t)?.transpose() * xi)
    }

    /// `‖U(t,r)U(r,s) − U(t,s)‖_F`.
    pub fn cocycle_defect(&self, s: f64, r: f64, t: f64) -> Result<f64> {
        if !(s <= r && r <= t) {
            return Err(MehlerError::Domain(format!("cocycle requires s <= r <= t, got ({s}, {r}, {t})")));
        }
        let composed = self.propagate(r, t)? * self.propagate(s, r)?;
        Ok(frobenius(&(composed - self.propagate(s, t)?)))
    }

    /// `U(t, t_j)` for `j = ks..=kt`, indexed from `ks`.
    pub fn backward_products(&self, ks: i64, kt: i64) -> Result<Vec<DMatrix<f64>>> {
        let d = self.dim();
        let n = (kt - ks).max(0) as usize;
        let mut out = vec![DMatrix::identity(d, d); n + 1];
        for j in (0..n).rev() {
            out[j] = &out[j + 1] * &self.cell(ks + j as i64)?.full;
        }
        Ok(out)
    }

    /// `U(t, r_k)` for every midpoint node in `[s, t]` (grid indices), in order.
    pub fn to_nodes(&self, ks: i64, kt: i64) -> Result<Vec<DMatrix<f64>>> {
        let back = self.backward_products(ks, kt)?;
        (ks..kt)
            .map(|k| {
                let j = (k - ks) as usize;
                Ok(&back[j + 1] * &self.cell(k)?.second_half)
            })
            .collect()
    }

    /// `U(r_k, s)` for every midpoint node in `[s, t]`, in order.
    pub fn from_start_to_nodes(&self, ks: i64, kt: i64) -> Result<Vec<DMatrix<f64>>> {
        let d = self.dim();
        let mut forward = DMatrix::identity(d, d);
        let mut out = Vec::with_capacity((kt - ks).max(0) as usize);
        for k in ks..kt {
            let cell = self.cell(k)?;
            out.push(&cell.first_half * &forward);
            forward = &cell.full * forward;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, h: f64) -> Propagator {
        Propagator::new(OperatorFamily::constant(DMatrix::from_element(1, 1, a)), h).unwrap()
    }

    #[test]
    fn zero_generator_gives_identity() {
        let p = Propagator::new(OperatorFamily::zero(3), 0.125).unwrap();
        let u = p.propagate(0.25, 2.0).unwrap();
        assert_eq!(u, DMatrix::identity(3, 3));
        assert_eq!(p.cocycle_defect(0.0, 0.5, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn scalar_decay_matches_exponential() {
        let p = scalar(-1.0, 1.0 / 256.0);
        let u = p.propagate(0.0, 1.0).unwrap();
        assert!((u[(0, 0)] - (-1.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn adjoint_scalar() {
        let p = scalar(-1.0, 1.0 / 256.0);
        let v = p.adjoint_apply(0.0, 1.0, &DVector::from_element(1, 2.0)).unwrap();
        assert!((v[0] - 2.0 * (-1.0f64).exp()).abs() < 1e-8);
        let z = p.adjoint_apply(0.0, 1.0, &DVector::zeros(1)).unwrap();
        assert_eq!(z[0], 0.0);
    }

    #[test]
    fn identity_on_diagonal() {
        let p = scalar(-3.0, 0.1);
        assert_eq!(p.propagate(0.3, 0.3).unwrap()[(0, 0)], 1.0);
        assert_eq!(p.cocycle_defect(0.2, 0.2, 0.7).unwrap(), 0.0);
    }

    #[test]
    fn scalar_cocycle_small() {
        let p = scalar(-1.0, 1.0 / 256.0);
        assert!(p.cocycle_defect(0.0, 0.5, 1.0).unwrap() < 1e-10);
    }

    #[test]
    fn rejects_reversed_and_misaligned() {
        let p = scalar(-1.0, 0.25);
        assert!(matches!(p.propagate(1.0, 0.5), Err(MehlerError::Domain(_))));
        assert!(matches!(p.propagate(0.0, 0.3), Err(MehlerError::Misaligned { .. })));
        assert!(p.cocycle_defect(0.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn blowup_is_reported() {
        let fam = OperatorFamily::from_fn(1, |t| DMatrix::from_element(1, 1, if t > 0.5 { f64::NAN } else { 0.0 }), StructureTags::default());
        let p = Propagator::new(fam, 0.25).unwrap();
        assert!(matches!(p.propagate(0.0, 1.0), Err(MehlerError::NumericalBlowup(_))));
    }

    #[test]
    fn frozen_cache_misses_are_errors() {
        let p = scalar(-1.0, 0.25);
        p.warm_up(0.0, 1.0).unwrap();
        assert!(p.propagate(0.0, 1.0).is_ok());
        assert!(matches!(p.propagate(0.0, 1.5), Err(MehlerError::CacheMiss { .. })));
    }

    #[test]
    fn half_maps_compose_to_full_step() {
        let fam = OperatorFamily::from_fn(
            2,
            |t| DMatrix::from_row_slice(2, 2, &[-1.0, t.sin(), 0.3, -2.0 - t.cos()]),
            StructureTags::default(),
        );
        let p = Propagator::new(fam, 1.0 / 64.0).unwrap();
        let c = p.cell(5).unwrap();
        assert!(frobenius(&(&c.second_half * &c.first_half - &c.full)) < 1e-8);
    }

    #[test]
    fn tag_spot_checks() {
        let fam = OperatorFamily::from_fn(
            1,
            |t| DMatrix::from_element(1, 1, (2.0 * std::f64::consts::PI * t).sin()),
            StructureTags { periodic: Some(1.0), ..Default::default() },
        );
        assert!(fam.check_tags(&[0.0, 0.25, 0.3]).is_ok());
        let bad = OperatorFamily::new(1, fam.generator.clone(), StructureTags { periodic: Some(0.7), ..Default::default() });
        assert!(bad.check_tags(&[0.0, 0.25, 0.3]).is_err());
    }
}

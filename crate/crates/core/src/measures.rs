//! Evolution systems of measures `(ν_t)` with `∫ p_{s,t} f dν_s = ∫ f dν_t`.
//!
//! The limit `ν_t = D[a_{t,−∞}, R_{t,−∞}, m_{t,−∞}]` is realized by extending
//! the quadrature backwards in `s` until a geometric tail bound derived from
//! `‖U(t,s)‖ ≤ M e^{−ω(t−s)}` drops below the requested tolerance.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MehlerError, Result};
use crate::kernel::{accumulate_node, MehlerSystem};
use crate::triplet::IdTriplet;

/// Hard cap on the backward horizon, in time units.
pub const MAX_HORIZON: f64 = 10_000.0;

/// User-asserted exponential stability `‖U(t,s)‖ ≤ M e^{−ω(t−s)}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityHint {
    #[serde(rename = "M")]
    pub m: f64,
    pub omega: f64,
}

impl StabilityHint {
    pub fn new(m: f64, omega: f64) -> Result<Self> {
        if !(m > 0.0 && omega > 0.0) || !m.is_finite() || !omega.is_finite() {
            return Err(MehlerError::Config(format!("stability hint needs M, omega > 0, got ({m}, {omega})")));
        }
        Ok(Self { m, omega })
    }

    pub fn bound(&self, elapsed: f64) -> f64 {
        self.m * (-self.omega * elapsed).exp()
    }
}

/// Convergence functionals recorded while the horizon grows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonSample {
    pub horizon: f64,
    pub trace: f64,
    pub small_jumps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitTriplet {
    pub nu: IdTriplet,
    pub horizon: f64,
    /// Largest of the covariance-trace, small-jump and drift tail bounds.
    pub tail_bound: f64,
    pub history: Vec<HorizonSample>,
}

/// Spectral norm of a small dense matrix.
fn op_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().fold(0.0_f64, |acc, v| acc.max(*v))
}

/// Backward horizon extension towards `ν_t`.
pub fn limit_triplet(sys: &MehlerSystem, t: f64, hint: &StabilityHint, tol: f64) -> Result<LimitTriplet> {
    if !(tol > 0.0) {
        return Err(MehlerError::Domain(format!("tolerance must be positive, got {tol}")));
    }
    let prop = &sys.prop;
    let h = prop.step();
    let kt = prop.index(t)?;
    let d = sys.dim();
    let min_horizon = (1.0 / hint.omega).max(prop.family().tags.periodic.unwrap_or(0.0)).max(sys.noise.tags.periodic.unwrap_or(0.0));
    let two_omega = 2.0 * hint.omega;
    let m2 = hint.m * hint.m;

    let mut acc = IdTriplet::zero(d);
    let mut small_jumps = 0.0;
    let mut u_right = DMatrix::<f64>::identity(d, d);
    let (mut sup_trace, mut sup_jump2, mut sup_drift) = (0.0_f64, 0.0_f64, 0.0_f64);
    let mut history = Vec::new();
    let mut warned = false;
    let samples_every = ((1.0 / h).round() as i64).max(1);

    let mut k = kt;
    loop {
        k -= 1;
        let cell = prop.cell(k)?;
        let u_node = &u_right * &cell.second_half;
        let rate = sys.noise.eval(prop.node(k))?;
        sup_trace = sup_trace.max(rate.r.trace());
        sup_jump2 = sup_jump2.max(rate.m.atoms().iter().map(|a| a.w * a.x.norm_squared()).sum());
        sup_drift = sup_drift.max(rate.a.norm() + rate.m.atoms().iter().map(|a| a.w * a.x.norm()).sum::<f64>());
        let before = acc.m.len();
        accumulate_node(&mut acc, &u_node, &rate, h)?;
        small_jumps += acc.m.atoms()[before..].iter().map(|a| a.w * a.x.norm_squared().min(1.0)).sum::<f64>();
        if acc.m.len() > sys.atom_cap {
            return Err(MehlerError::AtomCap { count: acc.m.len(), cap: sys.atom_cap });
        }
        u_right = &u_right * &cell.full;

        let elapsed = (kt - k) as f64 * h;
        if !warned && op_norm(&u_right) > hint.bound(elapsed) * (1.0 + 1e-6) {
            log::warn!("stability hint violated: |U({t}, {})| exceeds M e^(-omega (t-s))", prop.time(k));
            warned = true;
        }

        let trace_cap = 10.0 * m2 * sup_trace / two_omega;
        let jump_cap = 10.0 * m2 * sup_jump2 / two_omega;
        let drift_cap = 10.0 * hint.m * sup_drift / hint.omega;
        let eps = 1e-12;
        if acc.r.trace() > trace_cap + eps || small_jumps > jump_cap + eps || acc.a.norm() > drift_cap + eps {
            return Err(MehlerError::StabilityViolation(format!(
                "running sums at horizon {elapsed} exceed ten times the bound implied by M={}, omega={}",
                hint.m, hint.omega
            )));
        }

        let decay2 = (-two_omega * elapsed).exp();
        let tail_trace = m2 * sup_trace * decay2 / two_omega;
        let tail_jumps = m2 * sup_jump2 * decay2 / two_omega;
        let tail_drift = hint.m * sup_drift * (-hint.omega * elapsed).exp() / hint.omega;
        let tail = tail_trace.max(tail_jumps).max(tail_drift);

        let done = elapsed >= min_horizon && tail <= tol;
        if (kt - k) % samples_every == 0 || done {
            history.push(HorizonSample { horizon: elapsed, trace: acc.r.trace(), small_jumps });
        }
        if done {
            acc.r = (&acc.r + acc.r.transpose()) * 0.5;
            return Ok(LimitTriplet { nu: acc, horizon: elapsed, tail_bound: tail, history });
        }
        if elapsed > MAX_HORIZON {
            return Err(MehlerError::StabilityViolation(format!(
                "tail bound {tail:e} still above {tol:e} at horizon {elapsed}"
            )));
        }
    }
}

/// Time-indexed family of laws on the base grid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasureFamily {
    step: f64,
    entries: BTreeMap<i64, IdTriplet>,
}

impl MeasureFamily {
    pub fn new(step: f64) -> Self {
        Self { step, entries: BTreeMap::new() }
    }

    fn key(&self, t: f64) -> i64 {
        (t / self.step).round() as i64
    }

    pub fn insert(&mut self, t: f64, nu: IdTriplet) {
        let k = self.key(t);
        self.entries.insert(k, nu);
    }

    pub fn get(&self, t: f64) -> Result<&IdTriplet> {
        self.entries
            .get(&self.key(t))
            .ok_or_else(|| MehlerError::Domain(format!("no measure recorded at t={t}")))
    }

    pub fn times(&self) -> Vec<f64> {
        self.entries.keys().map(|k| *k as f64 * self.step).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &IdTriplet)> {
        self.entries.iter().map(move |(k, v)| (*k as f64 * self.step, v))
    }
}

/// Computes `ν_t` at each requested time with the same tolerance.
pub fn limit_family(sys: &MehlerSystem, times: &[f64], hint: &StabilityHint, tol: f64) -> Result<MeasureFamily> {
    let mut fam = MeasureFamily::new(sys.quad_step());
    for &t in times {
        fam.insert(t, limit_triplet(sys, t, hint, tol)?.nu);
    }
    Ok(fam)
}

/// `max_ξ |ψ^μ_{t,s}(ξ) + ψ^{ν_s}(U(t,s)ᵀξ) − ψ^{ν_t}(ξ)|`.
pub fn invariance_defect(sys: &MehlerSystem, nus: &MeasureFamily, s: f64, t: f64, xis: &[DVector<f64>]) -> Result<f64> {
    let nu_s = nus.get(s)?;
    let nu_t = nus.get(t)?;
    invariance_defect_pair(sys, nu_s, nu_t, s, t, xis)
}

pub fn invariance_defect_pair(
    sys: &MehlerSystem,
    nu_s: &IdTriplet,
    nu_t: &IdTriplet,
    s: f64,
    t: f64,
    xis: &[DVector<f64>],
) -> Result<f64> {
    let mu = sys.build_triplet(s, t)?;
    let ut = sys.prop.propagate(s, t)?.transpose();
    Ok(xis
        .iter()
        .map(|xi| (mu.char_exponent(xi) + nu_s.char_exponent(&(&ut * xi)) - nu_t.char_exponent(xi)).norm())
        .fold(0.0, f64::max))
}

/// `ν'_t = ν_t ∗ δ_{U(t,anchor)c}`, again an evolution system.
pub fn shifted_system(sys: &MehlerSystem, nus: &MeasureFamily, c: &DVector<f64>, anchor: f64) -> Result<MeasureFamily> {
    if c.len() != sys.dim() {
        return Err(MehlerError::DimensionMismatch { expected: sys.dim(), found: c.len() });
    }
    let mut out = MeasureFamily::new(nus.step);
    for (t, nu) in nus.iter() {
        if t < anchor {
            return Err(MehlerError::Domain(format!("time {t} precedes the anchor {anchor}")));
        }
        let mut shifted = nu.clone();
        shifted.a += sys.prop.propagate(anchor, t)? * c;
        out.insert(t, shifted);
    }
    Ok(out)
}

/// Maximum exponent distance between two laws over probe frequencies.
pub fn exponent_distance(a: &IdTriplet, b: &IdTriplet, xis: &[DVector<f64>]) -> f64 {
    xis.iter()
        .map(|xi| (a.char_exponent(xi) - b.char_exponent(xi)).norm())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicFixedPoint {
    pub nu: IdTriplet,
    pub horizon: f64,
    /// Exponent distance between `ν_{t0}` and `ν_{t0+T}`.
    pub distance: f64,
    /// `max_x |U(t0+kT, t0)x| / |x|` over basis probes, for `k = 1, 2, ...`.
    pub contraction: Vec<f64>,
}

/// `ν_{t0}` for a `T`-periodic system, with the periodicity and contraction checks.
pub fn periodic_fixed_point(
    sys: &MehlerSystem,
    hint: &StabilityHint,
    period: f64,
    t0: f64,
    tol: f64,
    xis: &[DVector<f64>],
) -> Result<PeriodicFixedPoint> {
    let periodic_ok = |tag: Option<f64>, constant: bool| match tag {
        _ if constant => true,
        Some(p) => {
            let ratio = period / p;
            (ratio - ratio.round()).abs() < 1e-9 && ratio.round() >= 1.0
        }
        None => false,
    };
    let gen_tags = &sys.prop.family().tags;
    if !periodic_ok(gen_tags.periodic, gen_tags.constant) || !periodic_ok(sys.noise.tags.periodic, sys.noise.tags.constant) {
        return Err(MehlerError::Periodicity(format!("system is not tagged {period}-periodic in both generator and noise")));
    }
    let here = limit_triplet(sys, t0, hint, tol)?;
    let there = limit_triplet(sys, t0 + period, hint, tol)?;
    let distance = exponent_distance(&here.nu, &there.nu, xis);
    if distance > 10.0 * tol {
        return Err(MehlerError::Periodicity(format!(
            "exponent distance {distance:e} between nu({t0}) and nu({t0}+T) exceeds {:e}",
            10.0 * tol
        )));
    }
    let d = sys.dim();
    let mut contraction = Vec::new();
    for k in 1..=4 {
        let u = sys.prop.propagate(t0, t0 + k as f64 * period)?;
        let factor = (0..d).map(|i| u.column(i).norm()).fold(0.0, f64::max);
        let allowed = hint.bound(k as f64 * period) * (1.0 + 1e-8);
        if factor > allowed {
            return Err(MehlerError::Periodicity(format!(
                "|U(t0+{k}T, t0)x| = {factor:e} exceeds M e^(-omega k T) = {allowed:e}"
            )));
        }
        if let Some(&prev) = contraction.last() {
            if factor > prev {
                return Err(MehlerError::Periodicity("contraction over periods is not monotone".into()));
            }
        }
        contraction.push(factor);
    }
    Ok(PeriodicFixedPoint { nu: here.nu, horizon: here.horizon, distance, contraction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::{OperatorFamily, Propagator};
    use crate::kernel::NoiseRate;
    use crate::triplet::LevyMeasure;
    use std::sync::Arc;

    fn scalar(gauss: f64, jumps: bool) -> MehlerSystem {
        let prop = Propagator::new(OperatorFamily::constant(DMatrix::from_element(1, 1, -1.0)), 1.0 / 256.0).unwrap();
        let m = if jumps { LevyMeasure::single(DVector::from_element(1, 1.0), 0.5).unwrap() } else { LevyMeasure::empty() };
        let rate = IdTriplet::new(DVector::zeros(1), DMatrix::from_element(1, 1, gauss), m).unwrap();
        MehlerSystem::new(Arc::new(prop), NoiseRate::constant(rate)).unwrap()
    }

    #[test]
    fn zero_noise_limit_is_dirac() {
        let lim = limit_triplet(&scalar(0.0, false), 0.0, &StabilityHint::new(1.0, 1.0).unwrap(), 1e-6).unwrap();
        assert_eq!(lim.nu, IdTriplet::zero(1));
    }

    #[test]
    fn scalar_gaussian_limit() {
        let lim = limit_triplet(&scalar(1.0, false), 0.0, &StabilityHint::new(1.0, 1.0).unwrap(), 1e-6).unwrap();
        assert!((lim.nu.r[(0, 0)] - 0.5).abs() < 1e-5, "{}", lim.nu.r[(0, 0)]);
        assert!(lim.tail_bound <= 1e-6);
        assert!(lim.history.windows(2).all(|w| w[1].trace >= w[0].trace));
    }

    #[test]
    fn wrong_hint_triggers_violation() {
        let sys = scalar(1.0, false);
        // the implied cap 10 M^2 tr R / (2 omega) = 0.05 is far below the true limit 0.5
        let r = limit_triplet(&sys, 0.0, &StabilityHint::new(0.1, 1.0).unwrap(), 1e-6);
        assert!(matches!(r, Err(MehlerError::StabilityViolation(_))));
    }

    #[test]
    fn shift_before_anchor_rejected() {
        let sys = scalar(1.0, false);
        let mut fam = MeasureFamily::new(sys.quad_step());
        fam.insert(0.0, IdTriplet::zero(1));
        assert!(shifted_system(&sys, &fam, &DVector::from_element(1, 1.0), 0.5).is_err());
        assert!(fam.get(1.0).is_err());
    }

    #[test]
    fn non_periodic_system_rejected() {
        let prop = Propagator::new(
            OperatorFamily::from_fn(1, |t| DMatrix::from_element(1, 1, -1.0 - t.abs()), Default::default()),
            1.0 / 16.0,
        )
        .unwrap();
        let sys = MehlerSystem::new(Arc::new(prop), NoiseRate::zero(1)).unwrap();
        let r = periodic_fixed_point(&sys, &StabilityHint::new(1.0, 1.0).unwrap(), 1.0, 0.0, 1e-6, &[]);
        assert!(matches!(r, Err(MehlerError::Periodicity(_))));
    }
}

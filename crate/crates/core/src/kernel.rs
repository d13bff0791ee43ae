//! Kernel measures `μ_{t,s}` of a non-autonomous generalized Mehler semigroup
//!
//! `p_{s,t} f(x) = ∫ f(U(t,s)x + y) μ_{t,s}(dy)`,
//!
//! built from a noise-rate family `(a_r, R_r, m_r)` by composite midpoint
//! quadrature of `ψ_{t,s}(ξ) = ∫_s^t λ_r(U(t,r)ᵀξ) dr`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::error::{MehlerError, Result};
use crate::evolution::{MatrixFn, Propagator, StructureTags};
use crate::linalg::{frobenius, PsdEigen};
use crate::stats::{merge_all, par_chunks, McEstimate, Moments};
use crate::triplet::{IdTriplet, LevyMeasure, TripletSampler};

pub type VectorFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;
pub type MeasureFn = Arc<dyn Fn(f64) -> LevyMeasure + Send + Sync>;

/// Default cap on the number of atoms in a built kernel measure.
pub const DEFAULT_ATOM_CAP: usize = 1_000_000;

/// Noise-rate family `r ↦ (a_r, R_r, m_r)`.
#[derive(Clone)]
pub struct NoiseRate {
    dim: usize,
    a_rate: VectorFn,
    r_rate: MatrixFn,
    m_rate: MeasureFn,
    pub tags: StructureTags,
}

impl fmt::Debug for NoiseRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NoiseRate")
            .field("dim", &self.dim)
            .field("tags", &self.tags)
            .finish()
    }
}

impl NoiseRate {
    pub fn new(dim: usize, a_rate: VectorFn, r_rate: MatrixFn, m_rate: MeasureFn, tags: StructureTags) -> Self {
        Self { dim, a_rate, r_rate, m_rate, tags }
    }

    pub fn constant(rate: IdTriplet) -> Self {
        let dim = rate.dim();
        let (a, r, m) = (rate.a, rate.r, rate.m);
        Self::new(
            dim,
            Arc::new(move |_| a.clone()),
            Arc::new(move |_| r.clone()),
            Arc::new(move |_| m.clone()),
            StructureTags { constant: true, commuting: false, periodic: None },
        )
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(IdTriplet::zero(dim))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rate triplet `(a_r, R_r, m_r)` at time `r`.
    pub fn eval(&self, r: f64) -> Result<IdTriplet> {
        let rate = IdTriplet::new((self.a_rate)(r), (self.r_rate)(r), (self.m_rate)(r))
            .map_err(|e| MehlerError::Config(format!("noise rate at r={r}: {e}")))?;
        if rate.dim() != self.dim {
            return Err(MehlerError::DimensionMismatch { expected: self.dim, found: rate.dim() });
        }
        Ok(rate)
    }

    pub fn covariance_rate(&self, r: f64) -> DMatrix<f64> {
        (self.r_rate)(r)
    }

    /// Spot-checks PSD-ness and the periodic tag at the given times.
    pub fn check(&self, times: &[f64]) -> Result<()> {
        for &t in times {
            let rate = self.eval(t)?;
            if let Some(period) = self.tags.periodic {
                let shifted = self.eval(t + period)?;
                let drift = (&shifted.a - &rate.a).norm();
                let cov = frobenius(&(&shifted.r - &rate.r));
                let atoms = shifted.m.len() != rate.m.len()
                    || shifted.m.atoms().iter().zip(rate.m.atoms()).any(|(u, v)| {
                        (&u.x - &v.x).norm() > 1e-9 * (1.0 + v.x.norm()) || (u.w - v.w).abs() > 1e-9 * (1.0 + v.w)
                    });
                if drift > 1e-9 * (1.0 + rate.a.norm()) || cov > 1e-9 * (1.0 + frobenius(&rate.r)) || atoms {
                    return Err(MehlerError::Config(format!(
                        "noise tagged periodic({period}) but rate at {t} differs from {t}+T"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Evolution family plus noise rate; generates `(p_{s,t})`.
#[derive(Clone)]
pub struct MehlerSystem {
    pub prop: Arc<Propagator>,
    pub noise: NoiseRate,
    pub atom_cap: usize,
}

impl fmt::Debug for MehlerSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MehlerSystem")
            .field("prop", &self.prop)
            .field("noise", &self.noise)
            .finish()
    }
}

/// Adds the midpoint contribution `h · (λ_r pushed by U(t, r))` to `acc`.
pub(crate) fn accumulate_node(acc: &mut IdTriplet, u_node: &DMatrix<f64>, rate: &IdTriplet, weight: f64) -> Result<()> {
    let pushed = rate.pushforward(u_node)?;
    acc.a.axpy(weight, &pushed.a, 1.0);
    acc.r += pushed.r * weight;
    for atom in pushed.m.atoms() {
        acc.m.push_unchecked(atom.x.clone(), weight * atom.w);
    }
    Ok(())
}

impl MehlerSystem {
    pub fn new(prop: Arc<Propagator>, noise: NoiseRate) -> Result<Self> {
        if prop.dim() != noise.dim() {
            return Err(MehlerError::DimensionMismatch { expected: prop.dim(), found: noise.dim() });
        }
        Ok(Self { prop, noise, atom_cap: DEFAULT_ATOM_CAP })
    }

    pub fn dim(&self) -> usize {
        self.prop.dim()
    }

    pub fn quad_step(&self) -> f64 {
        self.prop.step()
    }

    fn interval(&self, s: f64, t: f64) -> Result<(i64, i64)> {
        if t < s {
            return Err(MehlerError::Domain(format!("kernel requires t >= s, got s={s}, t={t}")));
        }
        Ok((self.prop.index(s)?, self.prop.index(t)?))
    }

    /// Triplet of `μ_{t,s}` by composite midpoint quadrature on the base grid.
    pub fn build_triplet(&self, s: f64, t: f64) -> Result<IdTriplet> {
        let (ks, kt) = self.interval(s, t)?;
        let d = self.dim();
        let mut acc = IdTriplet::zero(d);
        if ks == kt {
            return Ok(acc);
        }
        let h = self.quad_step();
        let to_nodes = self.prop.to_nodes(ks, kt)?;
        let mut count = 0usize;
        for (j, u) in to_nodes.iter().enumerate() {
            let rate = self.noise.eval(self.prop.node(ks + j as i64))?;
            count += rate.m.len();
            if count > self.atom_cap {
                return Err(MehlerError::AtomCap { count, cap: self.atom_cap });
            }
            accumulate_node(&mut acc, u, &rate, h)?;
        }
        acc.r = (&acc.r + acc.r.transpose()) * 0.5;
        Ok(acc)
    }

    pub fn char_exponent(&self, s: f64, t: f64, xi: &DVector<f64>) -> Result<Complex64> {
        Ok(self.build_triplet(s, t)?.char_exponent(xi))
    }

    fn check_split(&self, s: f64, r: f64, t: f64) -> Result<()> {
        if !(s <= r && r <= t) {
            return Err(MehlerError::Domain(format!("expected s <= r <= t, got ({s}, {r}, {t})")));
        }
        Ok(())
    }

    /// `max_ξ |ψ_{t,s}(ξ) − ψ_{t,r}(ξ) − ψ_{r,s}(U(t,r)ᵀξ)|`.
    pub fn flow_defect(&self, s: f64, r: f64, t: f64, xis: &[DVector<f64>]) -> Result<f64> {
        Ok(self.flow_defects(s, r, t, xis)?.into_iter().map(|(d, _)| d).fold(0.0, f64::max))
    }

    /// Per-frequency defects paired with `|ψ_{t,s}(ξ)|`.
    pub fn flow_defects(&self, s: f64, r: f64, t: f64, xis: &[DVector<f64>]) -> Result<Vec<(f64, f64)>> {
        self.check_split(s, r, t)?;
        let whole = self.build_triplet(s, t)?;
        let late = self.build_triplet(r, t)?;
        let early = self.build_triplet(s, r)?;
        let u = self.prop.propagate(r, t)?;
        Ok(xis
            .iter()
            .map(|xi| {
                let psi = whole.char_exponent(xi);
                let split = late.char_exponent(xi) + early.char_exponent(&(u.transpose() * xi));
                ((psi - split).norm(), psi.norm())
            })
            .collect())
    }

    /// Relative defects of the covariance and drift composition identities
    /// `R_{t,s} = R_{t,r} + U R_{r,s} Uᵀ` and
    /// `a_{t,s} = a_{t,r} + U a_{r,s} + ∫ Ux[c(Ux) − c(x)] m_{r,s}(dx)`, `U = U(t,r)`.
    pub fn additivity_defects(&self, s: f64, r: f64, t: f64) -> Result<(f64, f64)> {
        self.check_split(s, r, t)?;
        let whole = self.build_triplet(s, t)?;
        let late = self.build_triplet(r, t)?;
        let pushed = self.build_triplet(s, r)?.pushforward(&self.prop.propagate(r, t)?)?;
        let r_gap = frobenius(&(&whole.r - &late.r - &pushed.r));
        let r_scale = frobenius(&whole.r);
        let r_rel = if r_gap == 0.0 { 0.0 } else { r_gap / r_scale.max(f64::MIN_POSITIVE) };
        let a_gap = (&whole.a - &late.a - &pushed.a).norm();
        let a_scale = whole.a.norm() + late.a.norm() + pushed.a.norm();
        let a_rel = if a_gap == 0.0 { 0.0 } else { a_gap / a_scale.max(f64::MIN_POSITIVE) };
        Ok((r_rel, a_rel))
    }

    /// Gaussian and jump factors `μ^g = D[0, R, 0]`, `μ^j = D[a, 0, m]`.
    pub fn gauss_jump_split(&self, s: f64, t: f64) -> Result<(IdTriplet, IdTriplet)> {
        let full = self.build_triplet(s, t)?;
        let d = self.dim();
        let gauss = IdTriplet { a: DVector::zeros(d), r: full.r, m: LevyMeasure::empty() };
        let jump = IdTriplet { a: full.a, r: DMatrix::zeros(d, d), m: full.m };
        Ok((gauss, jump))
    }

    /// Left-difference estimate `ψ_{t,t−dh}(ξ)/dh` of the rate exponent `λ_t(ξ)`.
    pub fn rate_recovery(&self, t: f64, xi: &DVector<f64>, dh: f64) -> Result<Complex64> {
        if !(dh > 0.0) {
            return Err(MehlerError::Domain(format!("dh must be positive, got {dh}")));
        }
        let s = self.prop.time(self.prop.index(t)? - self.prop.index(dh)?);
        Ok(self.build_triplet(s, t)?.char_exponent(xi) / dh)
    }

    /// `λ_t(ξ)` from the rate triplet directly.
    pub fn rate_exponent(&self, t: f64, xi: &DVector<f64>) -> Result<Complex64> {
        Ok(self.noise.eval(t)?.char_exponent(xi))
    }

    /// Monte Carlo estimate of `p_{s,t} f(x)`.
    pub fn mehler_apply<F, R>(&self, s: f64, t: f64, f: &F, x: &DVector<f64>, n: usize, rng: &mut R) -> Result<McEstimate>
    where
        F: Fn(&DVector<f64>) -> f64 + Sync + ?Sized,
        R: Rng + ?Sized,
    {
        self.check_dim(x)?;
        if n < 2 {
            return Err(MehlerError::Domain("mehler_apply needs n >= 2".into()));
        }
        let sampler = self.build_triplet(s, t)?.sampler()?;
        let center = self.prop.propagate(s, t)? * x;
        let stats = sample_statistics(&sampler, n, rng, 1, |y, out| {
            out[0] = f(&(&center + y));
        })?;
        Ok(stats[0].estimate())
    }

    /// Two-stage estimate `p^g(p^j f)(x)`: Gaussian draw first, jump draw second.
    pub fn mehler_apply_two_stage<F, R>(&self, s: f64, t: f64, f: &F, x: &DVector<f64>, n: usize, rng: &mut R) -> Result<McEstimate>
    where
        F: Fn(&DVector<f64>) -> f64 + Sync + ?Sized,
        R: Rng + ?Sized,
    {
        self.check_dim(x)?;
        let (gauss, jump) = self.gauss_jump_split(s, t)?;
        let gauss = gauss.sampler()?;
        let jump = jump.sampler()?;
        let center = self.prop.propagate(s, t)? * x;
        let parts = par_chunks(n, rng, |len, r| {
            let mut m = Moments::default();
            for _ in 0..len {
                let z = &center + gauss.draw(r);
                let v = f(&(z + jump.draw(r)));
                if !v.is_finite() {
                    return Err(MehlerError::Evaluation(format!("f returned {v}")));
                }
                m.push(v);
            }
            Ok(m)
        });
        let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(merge_all(&parts).estimate())
    }

    /// Nested estimate of `p_{s,r}(p_{r,t} f)(x)`.
    pub fn nested_apply<F, R>(
        &self,
        s: f64,
        r: f64,
        t: f64,
        f: &F,
        x: &DVector<f64>,
        n_outer: usize,
        n_inner: usize,
        rng: &mut R,
    ) -> Result<McEstimate>
    where
        F: Fn(&DVector<f64>) -> f64 + Sync + ?Sized,
        R: Rng + ?Sized,
    {
        self.check_split(s, r, t)?;
        let outer = self.build_triplet(s, r)?.sampler()?;
        let inner = self.build_triplet(r, t)?.sampler()?;
        let u_first = self.prop.propagate(s, r)?;
        let u_second = self.prop.propagate(r, t)?;
        let start = &u_first * x;
        let parts = par_chunks(n_outer, rng, |len, g| {
            let mut m = Moments::default();
            for _ in 0..len {
                let mid = &u_second * (&start + outer.draw(g));
                let mut acc = 0.0;
                for _ in 0..n_inner {
                    acc += f(&(&mid + inner.draw(g)));
                }
                m.push(acc / n_inner as f64);
            }
            m
        });
        Ok(merge_all(&parts).estimate())
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(MehlerError::DimensionMismatch { expected: self.dim(), found: x.len() });
        }
        Ok(())
    }

    /// Clamped eigenvalues of `R_{t,s}`.
    pub fn covariance_spectrum(&self, s: f64, t: f64) -> Result<DVector<f64>> {
        Ok(PsdEigen::new(&self.build_triplet(s, t)?.r)?.values)
    }
}

/// Deterministic probe frequencies with magnitudes spread over `[0.25, 2]`.
pub fn probe_frequencies(dim: usize, count: usize) -> Vec<DVector<f64>> {
    (0..count)
        .map(|i| {
            let magnitude = 0.25 + 1.75 * i as f64 / (count.max(2) - 1) as f64;
            let dir = DVector::from_fn(dim, |j, _| (1.3 * i as f64 + 2.1 * j as f64 + 0.4).cos());
            let norm = dir.norm();
            if norm == 0.0 {
                DVector::from_element(dim, magnitude / (dim as f64).sqrt())
            } else {
                dir * (magnitude / norm)
            }
        })
        .collect()
}

/// Draws `n` samples from `sampler` in seed-split chunks and accumulates `k`
/// statistics per draw computed by `stat(y, out)`. Every statistic sees the
/// same draws (common random numbers).
pub fn sample_statistics<R, G>(sampler: &TripletSampler, n: usize, rng: &mut R, k: usize, stat: G) -> Result<Vec<Moments>>
where
    R: Rng + ?Sized,
    G: Fn(&DVector<f64>, &mut [f64]) + Sync,
{
    let parts = par_chunks(n, rng, |len, r| {
        let mut ms = vec![Moments::default(); k];
        let mut buf = vec![0.0; k];
        for _ in 0..len {
            let y = sampler.draw(r);
            stat(&y, &mut buf);
            for (m, v) in ms.iter_mut().zip(&buf) {
                if !v.is_finite() {
                    return Err(MehlerError::Evaluation(format!("statistic evaluated to {v}")));
                }
                m.push(*v);
            }
        }
        Ok(ms)
    });
    let mut total = vec![Moments::default(); k];
    for part in parts {
        for (t, m) in total.iter_mut().zip(part?) {
            *t = t.merge(&m);
        }
    }
    Ok(total)
}

//! Semilinear equation `dX = A(t)X dt + F(t,X) dt + R^{1/2} dW` through the
//! Girsanov reweighting of the linear Gaussian reference process
//! `X̃(r) = U(r,s)x + W_U(r,s)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MehlerError, Result};
use crate::evolution::Propagator;
use crate::functions::TestFunction;
use crate::harnack::{GammaOperator, InequalityReport};
use crate::kernel::{probe_frequencies, MehlerSystem, NoiseRate};
use crate::linalg::{RangeSolver, TAU_RANGE};
use crate::stats::{merge_all, par_chunks, McEstimate, Moments, Verdict};
use crate::triplet::IdTriplet;

/// Relative residual allowed when solving `R^{1/2} ψ = F`.
pub const TOL_PSI: f64 = 1e-8;

pub type DriftFn = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Drift catalog. Each entry is `F = R^{1/2} g(x)`, so it maps into the
/// range of `R^{1/2}` by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Drift {
    Zero,
    /// `g ≡ c`.
    Constant { c: Vec<f64> },
    /// `g(x) = scale · tanh(x)` componentwise.
    Tanh { scale: f64 },
    /// `g(x) = clamp(scale · x, −bound, bound)` componentwise.
    ClippedLinear { scale: f64, bound: f64 },
}

impl Drift {
    fn inner(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Drift::Zero => DVector::zeros(x.len()),
            Drift::Constant { c } => DVector::from_column_slice(c),
            Drift::Tanh { scale } => x.map(|v| scale * v.tanh()),
            Drift::ClippedLinear { scale, bound } => x.map(|v| (scale * v).clamp(-bound, *bound)),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Drift::Constant { c } if c.len() != dim => Err(MehlerError::DimensionMismatch { expected: dim, found: c.len() }),
            Drift::ClippedLinear { bound, .. } if !(*bound >= 0.0) => {
                Err(MehlerError::Config(format!("clipped-linear bound must be nonnegative, got {bound}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone)]
pub struct SemilinearSystem {
    pub prop: Arc<Propagator>,
    pub r: DMatrix<f64>,
    pub k1: f64,
    pub k2: f64,
    solver: RangeSolver,
    drift: DriftFn,
    zero_drift: bool,
    /// Linear Gaussian system with noise rate `D[0, R, 0]`.
    pub gaussian: MehlerSystem,
}

impl fmt::Debug for SemilinearSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SemilinearSystem")
            .field("r", &self.r)
            .field("k1", &self.k1)
            .field("k2", &self.k2)
            .finish()
    }
}

/// Reference path with its driving increments and running log-weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedPath {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub increments: Vec<DVector<f64>>,
    pub log_weight: f64,
}

/// Per-step transition maps and noise factors of the reference recursion.
#[derive(Debug, Clone)]
struct StepPlan {
    times: Vec<f64>,
    dt: f64,
    maps: Vec<DMatrix<f64>>,
    noise: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemilinearEstimate {
    pub value: McEstimate,
    pub weight_mean: McEstimate,
    pub effective_sample_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub p: f64,
    pub delta: f64,
    pub window: f64,
    pub moment_p: McEstimate,
    pub bound_p: f64,
    pub moment_neg: McEstimate,
    pub bound_neg: f64,
    pub c_p: McEstimate,
    pub c_delta: McEstimate,
    pub verdict_p: Verdict,
    pub verdict_neg: Verdict,
}

impl SemilinearSystem {
    pub fn new(prop: Arc<Propagator>, r: DMatrix<f64>, drift: &Drift, k1: f64, k2: f64) -> Result<Self> {
        drift.validate(prop.dim())?;
        let solver = RangeSolver::new(&r, TAU_RANGE)?;
        let sqrt = solver.sqrt.clone();
        let spec = drift.clone();
        let f: DriftFn = Arc::new(move |_, x| &sqrt * spec.inner(x));
        Self::with_drift(prop, r, f, k1, k2, *drift == Drift::Zero)
    }

    /// Custom drift closure; range and growth conditions are spot-checked.
    pub fn with_drift(prop: Arc<Propagator>, r: DMatrix<f64>, drift: DriftFn, k1: f64, k2: f64, zero_drift: bool) -> Result<Self> {
        let d = prop.dim();
        if r.nrows() != d || r.ncols() != d {
            return Err(MehlerError::DimensionMismatch { expected: d, found: r.nrows().max(r.ncols()) });
        }
        if !(k1 >= 0.0 && k2 >= 0.0) {
            return Err(MehlerError::Config(format!("growth constants must be nonnegative, got k1={k1}, k2={k2}")));
        }
        let solver = RangeSolver::new(&r, TAU_RANGE)?;
        let gauss = IdTriplet::gaussian(r.clone())?;
        let gaussian = MehlerSystem::new(Arc::clone(&prop), NoiseRate::constant(gauss))?;
        let sys = Self { prop, r, k1, k2, solver, drift, zero_drift, gaussian };
        sys.spot_check()?;
        Ok(sys)
    }

    pub fn dim(&self) -> usize {
        self.prop.dim()
    }

    fn spot_check(&self) -> Result<()> {
        let d = self.dim();
        let mut probes = vec![DVector::zeros(d)];
        for scale in [0.5, 2.0, 8.0] {
            probes.extend(probe_frequencies(d, 4).into_iter().map(|v| v * scale));
        }
        for t in [0.0, 0.5, 1.0, 2.5] {
            for x in &probes {
                let psi = self.psi(t, x)?;
                let lhs = psi.norm_squared();
                let rhs = self.k1 + self.k2 * x.norm_squared();
                if lhs > rhs * (1.0 + 1e-9) + 1e-12 {
                    return Err(MehlerError::Config(format!(
                        "growth bound violated at t={t}: |R^-1/2 F|^2 = {lhs} > k1 + k2|x|^2 = {rhs}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn drift_at(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(t, x)
    }

    /// `ψ = R^{−1/2} F(t, x)` by least squares.
    pub fn psi(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let f = (self.drift)(t, x);
        if f.len() != self.dim() {
            return Err(MehlerError::DimensionMismatch { expected: self.dim(), found: f.len() });
        }
        let psi = &self.solver.pinv_sqrt * &f;
        let residual = (&self.solver.sqrt * &psi - &f).norm();
        if residual > TOL_PSI * f.norm() {
            return Err(MehlerError::Range(format!(
                "drift value at t={t} is not in the range of R^1/2 (residual {residual:.3e})"
            )));
        }
        Ok(psi)
    }

    fn plan(&self, s: f64, t: f64, steps: usize) -> Result<StepPlan> {
        if steps == 0 {
            return Err(MehlerError::Domain("path simulation needs steps >= 1".into()));
        }
        if !(t > s) {
            return Err(MehlerError::Domain(format!("path simulation requires t > s, got s={s}, t={t}")));
        }
        let dt = (t - s) / steps as f64;
        let ks = self.prop.index(s)?;
        let kt = self.prop.index(t)?;
        if (kt - ks) % steps as i64 != 0 {
            return Err(MehlerError::Misaligned { time: s + dt, step: self.prop.step() });
        }
        let stride = (kt - ks) / steps as i64;
        let times: Vec<f64> = (0..=steps as i64).map(|k| self.prop.time(ks + k * stride)).collect();
        let mut maps = Vec::with_capacity(steps);
        let mut noise = Vec::with_capacity(steps);
        for w in times.windows(2) {
            maps.push(self.prop.propagate(w[0], w[1])?);
            noise.push(crate::linalg::psd_sqrt(&self.gaussian.build_triplet(w[0], w[1])?.r)?);
        }
        Ok(StepPlan { times, dt, maps, noise })
    }

    /// Runs the reference recursion from every start with one shared noise
    /// sequence; returns end states and log-weights.
    fn run(&self, plan: &StepPlan, starts: &[DVector<f64>], rng: &mut ChaCha8Rng) -> Result<Vec<(DVector<f64>, f64)>> {
        let d = self.dim();
        let sq = plan.dt.sqrt();
        let mut states: Vec<DVector<f64>> = starts.to_vec();
        let mut logw = vec![0.0; starts.len()];
        for k in 0..plan.maps.len() {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let g = &plan.noise[k] * &z;
            for (x, lw) in states.iter_mut().zip(logw.iter_mut()) {
                if !self.zero_drift {
                    let psi = self.psi(plan.times[k], x)?;
                    *lw += sq * psi.dot(&z) - 0.5 * psi.norm_squared() * plan.dt;
                }
                *x = &plan.maps[k] * &*x + &g;
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(MehlerError::NumericalBlowup(plan.times[k + 1]));
                }
            }
        }
        Ok(states.into_iter().zip(logw).collect())
    }

    /// One reference path from `x` with stored states and increments.
    pub fn simulate_reference<R: Rng + ?Sized>(&self, s: f64, t: f64, x: &DVector<f64>, steps: usize, rng: &mut R) -> Result<WeightedPath> {
        self.check_start(x)?;
        let plan = self.plan(s, t, steps)?;
        let d = self.dim();
        let sq = plan.dt.sqrt();
        let mut states = vec![x.clone()];
        let mut increments = Vec::with_capacity(steps);
        let mut log_weight = 0.0;
        for k in 0..steps {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let current = &states[k];
            let psi = self.psi(plan.times[k], current)?;
            let dw = &z * sq;
            log_weight += psi.dot(&dw) - 0.5 * psi.norm_squared() * plan.dt;
            let next = &plan.maps[k] * current + &plan.noise[k] * &z;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(MehlerError::NumericalBlowup(plan.times[k + 1]));
            }
            states.push(next);
            increments.push(dw);
        }
        Ok(WeightedPath { times: plan.times, states, increments, log_weight })
    }

    /// `M = exp(Σ⟨ψ(r_k, X̃_k), ΔW_k⟩ − ½ Σ|ψ(r_k, X̃_k)|² Δ)`, left-point (Itô).
    pub fn girsanov_weight(&self, path: &WeightedPath) -> Result<f64> {
        Ok(self.girsanov_log_weight(path)?.exp())
    }

    pub fn girsanov_log_weight(&self, path: &WeightedPath) -> Result<f64> {
        let mut acc = 0.0;
        for (k, dw) in path.increments.iter().enumerate() {
            let dt = path.times[k + 1] - path.times[k];
            let psi = self.psi(path.times[k], &path.states[k])?;
            acc += psi.dot(dw) - 0.5 * psi.norm_squared() * dt;
        }
        Ok(acc)
    }

    fn check_start(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(MehlerError::DimensionMismatch { expected: self.dim(), found: x.len() });
        }
        Ok(())
    }

    /// Accumulates `k` statistics over `n` weighted paths started at each of
    /// `starts` with shared noise.
    fn path_statistics<R, G>(&self, plan: &StepPlan, starts: &[DVector<f64>], n: usize, rng: &mut R, k: usize, stat: G) -> Result<Vec<Moments>>
    where
        R: Rng + ?Sized,
        G: Fn(&[(DVector<f64>, f64)], &mut [f64]) + Sync,
    {
        for x in starts {
            self.check_start(x)?;
        }
        let parts = par_chunks(n, rng, |len, g| {
            let mut ms = vec![Moments::default(); k];
            let mut buf = vec![0.0; k];
            for _ in 0..len {
                let ends = self.run(plan, starts, g)?;
                stat(&ends, &mut buf);
                for (m, v) in ms.iter_mut().zip(&buf) {
                    if !v.is_finite() {
                        return Err(MehlerError::Evaluation(format!("path statistic evaluated to {v}")));
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

    /// Weighted estimate of `P^F_{s,t} f(x) = E[M f(X̃(t))]`.
    #[allow(clippy::too_many_arguments)]
    pub fn semigroup_apply<F, R>(&self, s: f64, t: f64, f: &F, x: &DVector<f64>, n: usize, steps: usize, rng: &mut R) -> Result<SemilinearEstimate>
    where
        F: Fn(&DVector<f64>) -> f64 + Sync + ?Sized,
        R: Rng + ?Sized,
    {
        if n < 2 {
            return Err(MehlerError::Domain("semigroup_apply needs n >= 2".into()));
        }
        let plan = self.plan(s, t, steps)?;
        let stats = self.path_statistics(&plan, std::slice::from_ref(x), n, rng, 2, |ends, out| {
            let w = ends[0].1.exp();
            out[0] = w * f(&ends[0].0);
            out[1] = w;
        })?;
        let weight_mean = stats[1].estimate();
        let cv2 = stats[1].variance() / (weight_mean.mean * weight_mean.mean);
        Ok(SemilinearEstimate {
            value: stats[0].estimate(),
            weight_mean,
            effective_sample_size: n as f64 / (1.0 + cv2),
        })
    }

    /// `λ = tr ∫_s^{s+1} U(s+1,σ) R U(s+1,σ)ᵀ dσ`.
    pub fn fernique_trace(&self, s: f64) -> Result<f64> {
        Ok(self.gaussian.build_triplet(s, s + 1.0)?.r.trace())
    }

    /// Largest horizon `1 ∧ (4λκ)^{−1}` on which `E exp(κ∫|W_U|²)` is controlled.
    pub fn admissible_window(&self, s: f64, kappa: f64) -> Result<f64> {
        let lambda = self.fernique_trace(s)?;
        if kappa <= 0.0 || lambda <= 0.0 {
            return Ok(1.0);
        }
        Ok(1.0f64.min(1.0 / (4.0 * lambda * kappa)))
    }

    fn check_window(&self, s: f64, t: f64, kappa: f64) -> Result<f64> {
        let window = self.admissible_window(s, kappa)?;
        if t - s > window * (1.0 + 1e-12) {
            return Err(MehlerError::Domain(format!(
                "horizon {} exceeds the admissible window [{s}, {}] for kappa = {kappa}",
                t - s,
                s + window
            )));
        }
        Ok(window)
    }

    /// `C_{p,k2}(t,s) = E exp(2p(2p+1) k2 ∫_s^t |W_U(r,s)|² dr)` by Monte Carlo
    /// over reference paths from the origin (left-point sum in time).
    pub fn c_constant<R: Rng + ?Sized>(&self, s: f64, t: f64, p: f64, n: usize, steps: usize, rng: &mut R) -> Result<McEstimate> {
        let kappa = 2.0 * p * (2.0 * p + 1.0) * self.k2;
        if kappa == 0.0 {
            return Ok(McEstimate::exact(1.0));
        }
        self.check_window(s, t, kappa)?;
        let plan = self.plan(s, t, steps)?;
        let d = self.dim();
        let sq_noise = &plan.noise;
        let parts = par_chunks(n, rng, |len, g| {
            let mut m = Moments::default();
            for _ in 0..len {
                let mut w = DVector::<f64>::zeros(d);
                let mut integral = 0.0;
                for (k, map) in plan.maps.iter().enumerate() {
                    integral += w.norm_squared() * plan.dt;
                    let z = DVector::from_fn(d, |_, _| g.sample::<f64, _>(StandardNormal));
                    w = map * w + &sq_noise[k] * z;
                }
                m.push((kappa * integral).exp());
            }
            m
        });
        Ok(merge_all(&parts).estimate())
    }

    /// `∫_s^t |U(r,s)x|² dr` by midpoint quadrature on the base grid.
    pub fn transported_energy(&self, s: f64, t: f64, x: &DVector<f64>) -> Result<f64> {
        let (ks, kt) = (self.prop.index(s)?, self.prop.index(t)?);
        let h = self.prop.step();
        Ok(self.prop.from_start_to_nodes(ks, kt)?.iter().map(|u| (u * x).norm_squared() * h).sum())
    }

    /// Monte Carlo of `E M^p` and `E M^{−δ}` against their moment bounds.
    #[allow(clippy::too_many_arguments)]
    pub fn weight_moment_check<R: Rng + ?Sized>(
        &self,
        s: f64,
        t: f64,
        x: &DVector<f64>,
        p: f64,
        delta: f64,
        n: usize,
        steps: usize,
        rng: &mut R,
    ) -> Result<MomentReport> {
        if !(p > 1.0) || !(delta > 0.0) {
            return Err(MehlerError::Domain(format!("need p > 1 and delta > 0, got p={p}, delta={delta}")));
        }
        let kappa_p = 2.0 * p * (2.0 * p + 1.0) * self.k2;
        let kappa_d = 2.0 * delta * (2.0 * delta + 1.0) * self.k2;
        let window = self.check_window(s, t, kappa_p.max(kappa_d))?;
        let plan = self.plan(s, t, steps)?;
        let stats = self.path_statistics(&plan, std::slice::from_ref(x), n, rng, 2, |ends, out| {
            out[0] = (p * ends[0].1).exp();
            out[1] = (-delta * ends[0].1).exp();
        })?;
        let c_p = self.c_constant(s, t, p, n, steps, rng)?;
        let c_delta = self.c_constant(s, t, delta, n, steps, rng)?;
        let integral = self.k1 * (t - s) + 2.0 * self.k2 * self.transported_energy(s, t, x)?;
        let side = |moment: McEstimate, c: McEstimate, expo: f64| {
            let bound = c.mean.sqrt() * expo.exp();
            let bound_se = 0.5 * c.std_err / c.mean.sqrt() * expo.exp();
            let sigma = (moment.std_err.powi(2) + bound_se.powi(2)).sqrt();
            (bound, Verdict::classify(moment.mean - bound, sigma))
        };
        let moment_p = stats[0].estimate();
        let moment_neg = stats[1].estimate();
        let (bound_p, verdict_p) = side(moment_p, c_p, 0.5 * p * (2.0 * p - 1.0) * integral);
        let (bound_neg, verdict_neg) = side(moment_neg, c_delta, 0.5 * delta * (2.0 * delta + 1.0) * integral);
        Ok(MomentReport { p, delta, window, moment_p, bound_p, moment_neg, bound_neg, c_p, c_delta, verdict_p, verdict_neg })
    }

    /// Constant `N` of the semilinear Harnack inequality from given
    /// `C_{p/(p−1),k2}` and `C_{1/(q−1),k2}` values.
    #[allow(clippy::too_many_arguments)]
    pub fn harnack_constant(&self, s: f64, t: f64, alpha: f64, p: f64, q: f64, x: &DVector<f64>, y: &DVector<f64>, c_p: f64, c_q: f64) -> Result<f64> {
        check_exponents(alpha, p, q)?;
        let gamma = GammaOperator::for_system(&self.gaussian, s, t)?.norm(&(x - y));
        if gamma.is_infinite() {
            return Ok(f64::INFINITY);
        }
        let integral =
            self.k1 * (t - s) + self.k2 * (self.transported_energy(s, t, x)? + self.transported_energy(s, t, y)?);
        let log_n = alpha * p / (2.0 * (p - 1.0)) * c_p.ln()
            + alpha * q / (2.0 * (q - 1.0)) * c_q.ln()
            + alpha * q * gamma * gamma / (2.0 * (alpha - p * q))
            + alpha * ((p + 1.0) / (p - 1.0) + (q + 1.0) / (q * (q - 1.0))) * integral;
        Ok(log_n.exp())
    }

    /// Check of `(P^F f(x))^α ≤ N P^F f^α(y)` with shared noise for both starts.
    #[allow(clippy::too_many_arguments)]
    pub fn harnack_semilinear_check<R: Rng + ?Sized>(
        &self,
        s: f64,
        t: f64,
        f: &TestFunction,
        alpha: f64,
        p: f64,
        q: f64,
        x: &DVector<f64>,
        y: &DVector<f64>,
        n: usize,
        steps: usize,
        rng: &mut R,
    ) -> Result<InequalityReport> {
        check_exponents(alpha, p, q)?;
        f.validate(self.dim())?;
        if !f.is_nonnegative() || !f.is_bounded() {
            return Err(MehlerError::Domain("semilinear Harnack check needs a bounded nonnegative f".into()));
        }
        let p_conj = p / (p - 1.0);
        let q_inv = 1.0 / (q - 1.0);
        let c_p = self.c_constant(s, t, p_conj, n, steps, rng)?;
        let c_q = self.c_constant(s, t, q_inv, n, steps, rng)?;
        let plan = self.plan(s, t, steps)?;
        let stats = self.path_statistics(&plan, &[x.clone(), y.clone()], n, rng, 2, |ends, out| {
            out[0] = ends[0].1.exp() * f.eval(&ends[0].0);
            out[1] = ends[1].1.exp() * f.eval(&ends[1].0).powf(alpha);
        })?;
        let (fx, fay) = (stats[0].estimate(), stats[1].estimate());
        let lhs = fx.mean.max(0.0).powf(alpha);
        let lhs_sigma = alpha * fx.mean.max(0.0).powf(alpha - 1.0) * fx.std_err;
        let gamma = GammaOperator::for_system(&self.gaussian, s, t)?.norm(&(x - y));
        let n_const = self.harnack_constant(s, t, alpha, p, q, x, y, c_p.mean, c_q.mean)?;
        let report = |rhs: f64, rhs_sigma: f64, verdict: Verdict| InequalityReport {
            check: "semilinear_harnack".into(),
            lhs,
            lhs_ci: (lhs - 3.0 * lhs_sigma, lhs + 3.0 * lhs_sigma),
            rhs,
            rhs_ci: (rhs - 3.0 * rhs_sigma, rhs + 3.0 * rhs_sigma),
            constant: n_const,
            gamma,
            verdict,
        };
        if n_const.is_infinite() {
            return Ok(report(f64::INFINITY, 0.0, Verdict::Vacuous));
        }
        let rel_c = ((alpha * p / (2.0 * (p - 1.0)) * c_p.std_err / c_p.mean).powi(2)
            + (alpha * q / (2.0 * (q - 1.0)) * c_q.std_err / c_q.mean).powi(2))
        .sqrt();
        let rhs = n_const * fay.mean;
        let rhs_sigma = n_const * fay.std_err + rhs * rel_c;
        let sigma = (lhs_sigma * lhs_sigma + rhs_sigma * rhs_sigma).sqrt();
        Ok(report(rhs, rhs_sigma, Verdict::classify(lhs - rhs, sigma)))
    }

    /// Nested estimate of `P^F_{s,r}(P^F_{r,t} f)(x)` against the direct
    /// `P^F_{s,t} f(x)`; returns `(direct, nested)` estimates. Both legs use
    /// the reference step `(t−s)/steps`.
    #[allow(clippy::too_many_arguments)]
    pub fn flow_defect<F, R>(
        &self,
        s: f64,
        r: f64,
        t: f64,
        f: &F,
        x: &DVector<f64>,
        n_outer: usize,
        n_inner: usize,
        steps: usize,
        rng: &mut R,
    ) -> Result<(McEstimate, McEstimate)>
    where
        F: Fn(&DVector<f64>) -> f64 + Sync + ?Sized,
        R: Rng + ?Sized,
    {
        if !(s < r && r < t) {
            return Err(MehlerError::Domain(format!("expected s < r < t, got ({s}, {r}, {t})")));
        }
        let dt = (t - s) / steps as f64;
        let first = ((r - s) / dt).round() as usize;
        if first == 0 || first >= steps || ((r - s) / dt - first as f64).abs() > 1e-7 {
            return Err(MehlerError::Misaligned { time: r, step: dt });
        }
        let direct = self.semigroup_apply(s, t, f, x, n_outer * n_inner.max(1), steps, rng)?.value;
        let early = self.plan(s, r, first)?;
        let late = self.plan(r, t, steps - first)?;
        let parts = par_chunks(n_outer, rng, |len, g| {
            let mut m = Moments::default();
            for _ in 0..len {
                let (mid, lw) = self.run(&early, std::slice::from_ref(x), g)?.remove(0);
                let mut acc = 0.0;
                for _ in 0..n_inner {
                    let (end, lw2) = self.run(&late, std::slice::from_ref(&mid), g)?.remove(0);
                    acc += lw2.exp() * f(&end);
                }
                m.push(lw.exp() * acc / n_inner as f64);
            }
            Ok(m)
        });
        let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        Ok((direct, merge_all(&parts).estimate()))
    }
}

fn check_exponents(alpha: f64, p: f64, q: f64) -> Result<()> {
    if !(alpha > 1.0 && p > 1.0 && q > 1.0 && alpha / (p * q) > 1.0) {
        return Err(MehlerError::Domain(format!(
            "need alpha > 1, p, q > 1 and alpha/(pq) > 1, got alpha={alpha}, p={p}, q={q}"
        )));
    }
    Ok(())
}

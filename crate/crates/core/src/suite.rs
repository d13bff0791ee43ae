//! Check suites over a scenario and their JSON/CSV reports.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Serialize, Serializer};

use crate::control::Weight;
use crate::error::{MehlerError, Result};
use crate::functions::TestFunction;
use crate::harnack::{harnack_check, strong_feller_bound, GammaOperator, InequalityReport};
use crate::kernel::probe_frequencies;
use crate::measures::{exponent_distance, invariance_defect, invariance_defect_pair, limit_family, periodic_fixed_point};
use crate::scenario::Lab;
use crate::stats::{SeedSplitter, Verdict};

pub const CSV_HEADER: &str = "check,s,t,param,value,ci_low,ci_high,verdict";
/// Flow and additivity tolerance, relative to `1 + |ψ|`.
pub const TOL_FLOW: f64 = 1e-8;
pub const PROBES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Flow,
    Harnack,
    Evolution,
    Control,
    Semilinear,
    All,
}

impl FromStr for Suite {
    type Err = MehlerError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "flow" => Suite::Flow,
            "harnack" => Suite::Harnack,
            "evolution" => Suite::Evolution,
            "control" => Suite::Control,
            "semilinear" => Suite::Semilinear,
            "all" => Suite::All,
            other => return Err(MehlerError::Config(format!("unknown suite '{other}'"))),
        })
    }
}

impl Suite {
    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Flow => "flow",
            Suite::Harnack => "harnack",
            Suite::Evolution => "evolution",
            Suite::Control => "control",
            Suite::Semilinear => "semilinear",
            Suite::All => "all",
        }
    }

    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub n: usize,
    pub tol: f64,
    pub timing: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { n: 100_000, tol: 1e-6, timing: false }
    }
}

fn finite_or_text<S: Serializer>(v: &f64, ser: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        ser.serialize_f64(*v)
    } else {
        ser.serialize_str(&fmt_num(*v))
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:e}")
    }
}

/// One row of a report; the CSV columns mirror the fields in order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub check: String,
    pub s: f64,
    pub t: f64,
    pub param: String,
    #[serde(serialize_with = "finite_or_text")]
    pub value: f64,
    #[serde(serialize_with = "finite_or_text")]
    pub ci_low: f64,
    #[serde(serialize_with = "finite_or_text")]
    pub ci_high: f64,
    pub verdict: Verdict,
}

impl Record {
    pub fn new(check: &str, s: f64, t: f64, param: impl Into<String>, value: f64, verdict: Verdict) -> Self {
        Self { check: check.into(), s, t, param: param.into(), value, ci_low: value, ci_high: value, verdict }
    }

    pub fn with_ci(mut self, low: f64, high: f64) -> Self {
        self.ci_low = low;
        self.ci_high = high;
        self
    }

    fn from_inequality(rep: &InequalityReport, s: f64, t: f64, param: String) -> Self {
        Record {
            check: rep.check.clone(),
            s,
            t,
            param,
            value: rep.lhs - rep.rhs,
            ci_low: rep.lhs_ci.0 - rep.rhs_ci.1,
            ci_high: rep.lhs_ci.1 - rep.rhs_ci.0,
            verdict: rep.verdict,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.check,
            fmt_num(self.s),
            fmt_num(self.t),
            self.param.replace(',', ";"),
            fmt_num(self.value),
            fmt_num(self.ci_low),
            fmt_num(self.ci_high),
            self.verdict.as_str()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub command: String,
    pub scenario: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub records: Vec<Record>,
    /// Structured output of single-operation commands (triplets, certificates).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl Report {
    pub fn new(command: impl Into<String>, lab: &Lab, seed: u64) -> Self {
        Self {
            command: command.into(),
            scenario: lab.scenario.name.clone(),
            scenario_hash: lab.hash.clone(),
            seed,
            records: Vec::new(),
            payload: None,
            wall_time_s: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{}", r.csv_row());
        }
        out
    }

    pub fn count(&self, verdict: Verdict) -> usize {
        self.records.iter().filter(|r| r.verdict == verdict).count()
    }

    pub fn has_failure(&self) -> bool {
        self.records.iter().any(|r| r.verdict.is_fail())
    }

    /// `0` without FAIL verdicts, `2` otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.has_failure() {
            2
        } else {
            0
        }
    }
}

/// Grid-aligned horizon of the scenario.
fn horizon(lab: &Lab) -> Result<f64> {
    let k = lab.prop.index(lab.scenario.horizon)?;
    Ok(lab.prop.time(k))
}

/// `count + 1` grid times spread over `[0, T]`.
fn lattice(lab: &Lab, count: i64) -> Result<Vec<f64>> {
    let kt = lab.prop.index(horizon(lab)?)?;
    let mut ks: Vec<i64> = (0..=count).map(|i| (i * kt + count / 2) / count).collect();
    ks.dedup();
    Ok(ks.into_iter().map(|k| lab.prop.time(k)).collect())
}

pub fn run_suite(lab: &Lab, suite: Suite, seed: u64, opts: &SuiteOptions) -> Result<Report> {
    let started = Instant::now();
    let mut report = Report::new(format!("suite {}", suite.as_str()), lab, seed);
    let seeds = SeedSplitter::new(seed);
    if suite.includes(Suite::Flow) {
        flow_checks(lab, &mut report.records).map_err(|e| e.in_check("flow"))?;
    }
    if suite.includes(Suite::Harnack) {
        harnack_checks(lab, &seeds, opts, &mut report.records).map_err(|e| e.in_check("harnack"))?;
    }
    if suite.includes(Suite::Evolution) {
        evolution_checks(lab, opts, &mut report.records).map_err(|e| e.in_check("evolution"))?;
    }
    if suite.includes(Suite::Control) {
        control_checks(lab, &mut report.records).map_err(|e| e.in_check("control"))?;
    }
    if suite.includes(Suite::Semilinear) {
        semilinear_checks(lab, &seeds, opts, &mut report.records).map_err(|e| e.in_check("semilinear"))?;
    }
    if opts.timing {
        report.wall_time_s = Some(started.elapsed().as_secs_f64());
    }
    Ok(report)
}

pub fn flow_checks(lab: &Lab, out: &mut Vec<Record>) -> Result<()> {
    let sys = &lab.mehler;
    let probes = probe_frequencies(sys.dim(), PROBES);
    let times = lattice(lab, 8)?;
    let mut worst_cocycle: f64 = 0.0;
    for (i, &s) in times.iter().enumerate() {
        for (j, &r) in times.iter().enumerate().skip(i + 1) {
            for &t in times.iter().skip(j + 1) {
                let param = format!("r={r}");
                let normalized = sys
                    .flow_defects(s, r, t, &probes)?
                    .into_iter()
                    .map(|(d, psi)| d / (1.0 + psi))
                    .fold(0.0, f64::max);
                out.push(Record::new("flow_defect", s, t, param.clone(), normalized, Verdict::bound(normalized, TOL_FLOW)));
                let (r_rel, a_rel) = sys.additivity_defects(s, r, t)?;
                let worst = r_rel.max(a_rel);
                out.push(Record::new("additivity_defect", s, t, param, worst, Verdict::bound(worst, TOL_FLOW)));
                let u = lab.prop.propagate(s, t)?;
                let scale = 1.0 + u.norm();
                worst_cocycle = worst_cocycle.max(lab.prop.cocycle_defect(s, r, t)? / scale);
            }
        }
    }
    let (s0, t0) = (times[0], *times.last().expect("non-empty lattice"));
    out.push(Record::new("cocycle_defect", s0, t0, "max", worst_cocycle, Verdict::bound(worst_cocycle, lab.prop.tol_cocycle)));
    Ok(())
}

/// Start points for inequality checks: a pair along the first probe direction.
fn pair(d: usize, scale: f64) -> (DVector<f64>, DVector<f64>) {
    let dir = probe_frequencies(d, 2)[0].normalize();
    (&dir * scale, &dir * (-scale))
}

pub fn harnack_checks(lab: &Lab, seeds: &SeedSplitter, opts: &SuiteOptions, out: &mut Vec<Record>) -> Result<()> {
    let sys = &lab.mehler;
    let d = sys.dim();
    let (s, t) = (0.0, horizon(lab)?);
    let gamma = GammaOperator::for_system(sys, s, t)?;
    out.push(Record::new("gamma_norm", s, t, "operator", gamma.operator_norm(), Verdict::Info));
    let shifted = TestFunction::TanhShift { direction: None }.shifted_above_one().expect("catalog entry");
    let configs: [(&str, f64, TestFunction, f64, bool); 4] = [
        ("harnack", 2.0, TestFunction::TanhShift { direction: None }, 0.25, false),
        ("harnack", 4.0, TestFunction::Indicator { direction: None, threshold: 0.0 }, 0.5, false),
        ("harnack", 1.5, TestFunction::TanhShift { direction: None }, 0.1, false),
        ("log_harnack", 2.0, shifted, 0.25, true),
    ];
    for (k, (name, alpha, f, scale, log_mode)) in configs.into_iter().enumerate() {
        let (x, y) = pair(d, scale);
        let mut rng = seeds.stream(&format!("harnack/{k}"));
        let rep = harnack_check(sys, s, t, &f, alpha, &x, &y, opts.n, &mut rng, log_mode)?;
        out.push(Record::from_inequality(&rep, s, t, format!("{name};alpha={alpha};scale={scale}")));
    }
    let (x, y) = pair(d, 0.25);
    let mut rng = seeds.stream("harnack/feller");
    let rep = strong_feller_bound(sys, s, t, &TestFunction::Tanh { direction: None }, &x, &y, opts.n, &mut rng)?;
    out.push(Record::from_inequality(&rep, s, t, "f=tanh;scale=0.25".into()));
    Ok(())
}

pub fn evolution_checks(lab: &Lab, opts: &SuiteOptions, out: &mut Vec<Record>) -> Result<()> {
    let Some(hint) = lab.stability else {
        out.push(Record::new("evolution_measure", 0.0, 0.0, "no stability hint", f64::NAN, Verdict::Info));
        return Ok(());
    };
    let sys = &lab.mehler;
    let probes = probe_frequencies(sys.dim(), PROBES);
    let times = lattice(lab, 2)?;
    let family = limit_family(sys, &times, &hint, opts.tol)?;
    for (i, &s) in times.iter().enumerate() {
        for &t in times.iter().skip(i + 1) {
            let defect = invariance_defect(sys, &family, s, t, &probes)?;
            out.push(Record::new("invariance_defect", s, t, format!("tol={}", opts.tol), defect, Verdict::bound(defect, 10.0 * opts.tol)));
        }
    }
    let (s, t) = (times[0], *times.last().expect("non-empty lattice"));
    let mut perturbed = family.get(t)?.clone();
    perturbed.r += DMatrix::identity(sys.dim(), sys.dim()) * 0.2;
    let defect = invariance_defect_pair(sys, family.get(s)?, &perturbed, s, t, &probes)?;
    let verdict = if defect >= 0.1 { Verdict::Pass } else { Verdict::Fail };
    out.push(Record::new("invariance_negative_control", s, t, "R+0.2I", defect, verdict));
    if let Some(period) = lab.scenario.tags.periodic {
        match periodic_fixed_point(sys, &hint, period, 0.0, opts.tol, &probes) {
            Ok(fp) => out.push(Record::new("periodic_fixed_point", 0.0, period, format!("T={period}"), fp.distance, Verdict::bound(fp.distance, 10.0 * opts.tol))),
            Err(MehlerError::Periodicity(msg)) => {
                log::warn!("periodic fixed point: {msg}");
                let there = crate::measures::limit_triplet(sys, period, &hint, opts.tol)?.nu;
                let distance = exponent_distance(family.get(0.0)?, &there, &probes);
                out.push(Record::new("periodic_fixed_point", 0.0, period, format!("T={period}"), distance, Verdict::Fail));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

pub fn control_checks(lab: &Lab, out: &mut Vec<Record>) -> Result<()> {
    let Some(csys) = &lab.control else {
        out.push(Record::new("control", 0.0, 0.0, "no control operator", f64::NAN, Verdict::Info));
        return Ok(());
    };
    let d = csys.dim();
    let (s, t) = (0.0, horizon(lab)?);
    let x = DVector::from_element(d, 1.0 / (d as f64).sqrt());
    let cert = csys.certificate(s, t, &x)?;
    out.push(Record::new("null_controllable", s, t, "basis", f64::from(u8::from(cert.null_controllable)), Verdict::Info));
    out.push(Record::new("min_energy", s, t, "x=ones/sqrt(d)", cert.min_energy, Verdict::Info));
    let oracle = csys.brute_force_min_energy(s, t, &x, 256)?;
    let (gap, verdict) = match (cert.min_energy.is_finite(), oracle.is_finite()) {
        (true, true) => {
            let gap = (cert.min_energy - oracle).abs();
            (gap, Verdict::bound(gap, 1e-3 * (1.0 + cert.min_energy)))
        }
        (false, false) => (0.0, Verdict::Pass),
        _ => (f64::INFINITY, Verdict::Fail),
    };
    out.push(Record::new("min_energy_oracle", s, t, "nodes=256", gap, verdict).with_ci(cert.min_energy.min(oracle), cert.min_energy.max(oracle)));
    if cert.in_range {
        match csys.synthesize_control(s, t, &x, &Weight::Constant) {
            Ok(syn) => {
                let energy = syn.energy.unwrap_or(f64::NAN);
                out.push(Record::new("synthesized_energy", s, t, "weight=constant", energy, Verdict::Pass).with_ci(cert.min_energy, syn.energy_bound.unwrap_or(f64::NAN)));
            }
            Err(MehlerError::Control(msg)) => {
                log::info!("control synthesis skipped: {msg}");
                out.push(Record::new("synthesized_energy", s, t, "weight=constant", f64::NAN, Verdict::Info));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Reference step close to `1/64`, as a multiple of the base step.
fn reference_stride(lab: &Lab) -> i64 {
    ((1.0 / 64.0) / lab.prop.step()).round().max(1.0) as i64
}

/// Largest `(t, steps)` with `t ≤ min(T, limit)` on the reference grid.
fn semilinear_horizon(lab: &Lab, limit: f64) -> Result<Option<(f64, usize)>> {
    let stride = reference_stride(lab);
    let dt = lab.prop.time(stride);
    let t_max = horizon(lab)?.min(limit);
    let steps = (t_max / dt + 1e-9).floor() as i64;
    if steps < 1 {
        return Ok(None);
    }
    Ok(Some((lab.prop.time(steps * stride), steps as usize)))
}

pub fn semilinear_checks(lab: &Lab, seeds: &SeedSplitter, opts: &SuiteOptions, out: &mut Vec<Record>) -> Result<()> {
    let Some(ssys) = &lab.semilinear else {
        out.push(Record::new("semilinear", 0.0, 0.0, "no semilinear spec", f64::NAN, Verdict::Info));
        return Ok(());
    };
    let d = ssys.dim();
    let s = 0.0;
    let x = pair(d, 0.5).0;
    let Some((t, steps)) = semilinear_horizon(lab, f64::INFINITY)? else {
        return Err(MehlerError::Config("horizon shorter than one reference step".into()));
    };
    let one = |_: &DVector<f64>| 1.0;
    let est = ssys.semigroup_apply(s, t, &one, &x, opts.n, steps, &mut seeds.stream("semilinear/normalization"))?;
    let w = est.weight_mean;
    let verdict = if w.within_se(1.0, 5.0) { Verdict::Pass } else { Verdict::Fail };
    out.push(Record::new("girsanov_mean", s, t, format!("steps={steps}"), w.mean, verdict).with_ci(w.mean - 5.0 * w.std_err, w.mean + 5.0 * w.std_err));
    let cosine = |y: &DVector<f64>| y[0].cos();
    let est = ssys.semigroup_apply(s, t, &cosine, &x, opts.n, steps, &mut seeds.stream("semilinear/apply"))?;
    let (lo, hi) = est.value.ci();
    out.push(Record::new("semigroup_apply", s, t, format!("f=cos;ess={:.0}", est.effective_sample_size), est.value.mean, Verdict::Info).with_ci(lo, hi));

    let (p, delta) = (2.0, 1.0);
    let kappa = 2.0 * p * (2.0 * p + 1.0) * ssys.k2;
    match semilinear_horizon(lab, ssys.admissible_window(s, kappa)?)? {
        Some((tm, steps_m)) => {
            let rep = ssys.weight_moment_check(s, tm, &x, p, delta, opts.n, steps_m, &mut seeds.stream("semilinear/moments"))?;
            out.push(Record::new("weight_moment_p", s, tm, format!("p={p}"), rep.moment_p.mean - rep.bound_p, rep.verdict_p));
            out.push(Record::new("weight_moment_neg", s, tm, format!("delta={delta}"), rep.moment_neg.mean - rep.bound_neg, rep.verdict_neg));
        }
        None => out.push(Record::new("weight_moment_p", s, 0.0, "window below one step", f64::NAN, Verdict::Info)),
    }

    let (alpha, pq) = (4.0, 2f64.sqrt() * 1.01);
    let p_conj = pq / (pq - 1.0);
    let q_inv = 1.0 / (pq - 1.0);
    let kappa = 2.0 * p_conj.max(q_inv) * (2.0 * p_conj.max(q_inv) + 1.0) * ssys.k2;
    match semilinear_horizon(lab, ssys.admissible_window(s, kappa)?)? {
        Some((th, steps_h)) => {
            let (hx, hy) = pair(d, 0.25);
            let f = TestFunction::TanhShift { direction: None };
            let rep = ssys.harnack_semilinear_check(s, th, &f, alpha, pq, pq, &hx, &hy, opts.n, steps_h, &mut seeds.stream("semilinear/harnack"))?;
            out.push(Record::from_inequality(&rep, s, th, format!("alpha={alpha};p=q={pq:.4}")));
        }
        None => out.push(Record::new("semilinear_harnack", s, 0.0, "window below one step", f64::NAN, Verdict::Info)),
    }

    if steps >= 2 {
        let r = lab.prop.time(lab.prop.index(t)? / steps as i64 * (steps as i64 / 2));
        let n_outer = (opts.n / 64).max(256);
        let (direct, nested) = ssys.flow_defect(s, r, t, &cosine, &x, n_outer, 16, steps, &mut seeds.stream("semilinear/flow"))?;
        let sigma = (direct.std_err.powi(2) + nested.std_err.powi(2)).sqrt();
        out.push(Record::new("semilinear_flow_defect", s, t, format!("r={r}"), (direct.mean - nested.mean).abs(), Verdict::Info).with_ci(0.0, 3.0 * sigma));
    }
    Ok(())
}

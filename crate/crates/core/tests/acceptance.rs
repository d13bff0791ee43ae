//! Acceptance criteria: one PASS/FAIL line per criterion.

mod common;

use std::f64::consts::E;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{dmatrix, dvector, DVector};
use rand::Rng;

use mehler_core::control::ControlSystem;
use mehler_core::evolution::{OperatorFamily, Propagator};
use mehler_core::harnack::gamma_apply;
use mehler_core::kernel::{probe_frequencies, MehlerSystem, NoiseRate};
use mehler_core::measures::{exponent_distance, invariance_defect, invariance_defect_pair, limit_family, limit_triplet, periodic_fixed_point, StabilityHint};
use mehler_core::scenario::Lab;
use mehler_core::stats::{SeedSplitter, Verdict};
use mehler_core::suite::{flow_checks, harnack_checks, run_suite, semilinear_checks, Suite, SuiteOptions, PROBES, TOL_FLOW};
use mehler_core::triplet::{IdTriplet, LevyMeasure};

const N: usize = 100_000;
const TOL: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        }
    }
}

/// Random triples on the base grid over `[0, T]`.
fn random_triples(lab: &Lab, count: usize, rng: &mut impl Rng) -> Vec<(f64, f64, f64)> {
    let kt = lab.prop.index(lab.scenario.horizon).unwrap();
    (0..count)
        .map(|_| {
            let mut k = [rng.random_range(0..=kt), rng.random_range(0..=kt), rng.random_range(0..=kt)];
            k.sort_unstable();
            if k[0] == k[1] || k[1] == k[2] {
                k = [0, kt / 2, kt];
            }
            (lab.prop.time(k[0]), lab.prop.time(k[1]), lab.prop.time(k[2]))
        })
        .collect()
}

fn flow_and_additivity(labs: &[Lab]) -> (Outcome, Outcome) {
    let started = Instant::now();
    let (mut flow, mut add, mut triples) = (0.0_f64, 0.0_f64, 0usize);
    let seeds = SeedSplitter::new(2024);
    for lab in labs {
        let mut records = Vec::new();
        flow_checks(lab, &mut records).unwrap();
        for r in &records {
            match r.check.as_str() {
                "flow_defect" => flow = flow.max(r.value),
                "additivity_defect" => add = add.max(r.value),
                _ => {}
            }
        }
        let kt = lab.prop.index(lab.scenario.horizon).unwrap();
        let lattice: Vec<f64> = (0..=16).map(|i| lab.prop.time(i * kt / 16)).collect();
        let mut all = Vec::new();
        for i in 0..lattice.len() {
            for j in i + 1..lattice.len() {
                for k in j + 1..lattice.len() {
                    all.push((lattice[i], lattice[j], lattice[k]));
                }
            }
        }
        all.extend(random_triples(lab, 64, &mut seeds.stream(&lab.scenario.name)));
        let probes = probe_frequencies(lab.scenario.dim, PROBES);
        for (s, r, t) in all {
            for (d, psi) in lab.mehler.flow_defects(s, r, t, &probes).unwrap() {
                flow = flow.max(d / (1.0 + psi));
            }
            let (rr, ra) = lab.mehler.additivity_defects(s, r, t).unwrap();
            add = add.max(rr.max(ra));
            triples += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    (
        outcome(
            flow <= TOL_FLOW && secs <= 60.0,
            format!("max flow defect {flow:.2e} <= {TOL_FLOW:e} over {} scenarios, {triples} triples, {PROBES} probes; {secs:.1}s <= 60s", labs.len()),
        ),
        outcome(add <= TOL_FLOW, format!("max relative R/a additivity defect {add:.2e} <= {TOL_FLOW:e}")),
    )
}

fn scalar_closed_forms() -> Outcome {
    let prop = Arc::new(Propagator::new(OperatorFamily::constant(dmatrix![-1.0]), 1.0 / 256.0).unwrap());
    let rate = IdTriplet::new(dvector![0.0], dmatrix![1.0], LevyMeasure::empty()).unwrap();
    let sys = MehlerSystem::new(Arc::clone(&prop), NoiseRate::constant(rate)).unwrap();
    let r10_exact = (1.0 - E.powi(-2)) / 2.0;
    let r10 = sys.build_triplet(0.0, 1.0).unwrap().r[(0, 0)];
    let limit = limit_triplet(&sys, 1.0, &StabilityHint::new(1.0, 1.0).unwrap(), TOL).unwrap().nu.r[(0, 0)];
    let energy = ControlSystem::constant(prop, dmatrix![1.0]).min_energy(0.0, 1.0, &dvector![1.0]).unwrap();
    let gamma = gamma_apply(&sys, 0.0, 1.0, &dvector![1.0]).unwrap();
    let rel = |got: f64, want: f64| ((got - want) / want).abs();
    let errs = [
        rel(r10, r10_exact),
        rel(limit, 0.5),
        rel(energy, E.powi(-2) / r10_exact),
        rel(gamma, E.powi(-1) / r10_exact.sqrt()),
    ];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    outcome(
        worst <= 1e-3,
        format!(
            "rel errors R10 {:.1e}, R_inf {:.1e}, min_energy {:.1e}, |Gamma| {:.1e} (<= 1e-3)",
            errs[0], errs[1], errs[2], errs[3]
        ),
    )
}

fn min_energy_oracle(labs: &[Lab]) -> Outcome {
    let started = Instant::now();
    let (mut controllable, mut uncontrollable, mut bad, mut worst) = (0, 0, Vec::new(), 0.0_f64);
    for lab in labs {
        let csys = lab.control.as_ref().unwrap();
        let d = lab.scenario.dim;
        let x = DVector::from_element(d, 1.0 / (d as f64).sqrt());
        let t = lab.prop.time(lab.prop.index(lab.scenario.horizon).unwrap());
        let exact = csys.min_energy(0.0, t, &x).unwrap();
        let brute = csys.brute_force_min_energy(0.0, t, &x, 256).unwrap();
        match (exact.is_finite(), brute.is_finite()) {
            (true, true) => {
                controllable += 1;
                let gap = (exact - brute).abs() / (1.0 + exact);
                worst = worst.max(gap);
                if gap > 1e-3 {
                    bad.push(lab.scenario.name.clone());
                }
            }
            (false, false) => uncontrollable += 1,
            _ => bad.push(lab.scenario.name.clone()),
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        bad.is_empty() && controllable >= 10 && uncontrollable >= 1 && secs <= 30.0,
        format!(
            "{controllable} controllable (worst gap/(1+E) {worst:.1e} <= 1e-3), {uncontrollable} uncontrollable (inf both sides), mismatches {bad:?}; {secs:.1}s <= 30s"
        ),
    )
}

fn invariance(labs: &[Lab]) -> Outcome {
    let (mut worst, mut weakest_negative, mut bad) = (0.0_f64, f64::INFINITY, Vec::new());
    for lab in labs {
        let sys = &lab.mehler;
        let hint = lab.stability.unwrap();
        let probes = probe_frequencies(sys.dim(), PROBES);
        let t_end = lab.prop.time(lab.prop.index(lab.scenario.horizon).unwrap());
        let times = [0.0, lab.prop.time(lab.prop.index(t_end / 2.0).unwrap()), t_end];
        let family = limit_family(sys, &times, &hint, TOL).unwrap();
        for (i, &s) in times.iter().enumerate() {
            for &t in &times[i + 1..] {
                let d = invariance_defect(sys, &family, s, t, &probes).unwrap();
                worst = worst.max(d);
                if d > 10.0 * TOL {
                    bad.push(lab.scenario.name.clone());
                }
            }
        }
        let mut perturbed = family.get(t_end).unwrap().clone();
        perturbed.r += nalgebra::DMatrix::identity(sys.dim(), sys.dim()) * 0.2;
        let neg = invariance_defect_pair(sys, family.get(0.0).unwrap(), &perturbed, 0.0, t_end, &probes).unwrap();
        weakest_negative = weakest_negative.min(neg);
    }
    outcome(
        bad.is_empty() && labs.len() >= 10 && weakest_negative >= 0.1,
        format!(
            "{} stable scenarios: max defect {worst:.1e} <= {:.0e}; negative control min over scenarios {weakest_negative:.3} >= 0.1",
            labs.len(),
            10.0 * TOL
        ),
    )
}

fn periodic(labs: &[Lab]) -> Outcome {
    let mut worst = 0.0_f64;
    let mut errors = Vec::new();
    for lab in labs {
        let period = lab.scenario.tags.periodic.unwrap();
        let probes = probe_frequencies(lab.scenario.dim, PROBES);
        match periodic_fixed_point(&lab.mehler, &lab.stability.unwrap(), period, 0.0, TOL, &probes) {
            Ok(fp) => worst = worst.max(fp.distance),
            Err(e) => errors.push(format!("{}: {e}", lab.scenario.name)),
        }
        // an off-grid anchor inside the period as well
        let t0 = lab.prop.time(lab.prop.index(period / 4.0).unwrap());
        let a = limit_triplet(&lab.mehler, t0, &lab.stability.unwrap(), TOL).unwrap().nu;
        let b = limit_triplet(&lab.mehler, t0 + period, &lab.stability.unwrap(), TOL).unwrap().nu;
        worst = worst.max(exponent_distance(&a, &b, &probes));
    }
    outcome(
        errors.is_empty() && labs.len() >= 3 && worst <= 10.0 * TOL,
        format!("{} periodic scenarios: max exponent distance {worst:.1e} <= {:.0e}; errors {errors:?}", labs.len(), 10.0 * TOL),
    )
}

fn harnack(labs: &[Lab]) -> Outcome {
    let started = Instant::now();
    let opts = SuiteOptions { n: N, ..SuiteOptions::default() };
    let (mut total, mut fail, mut indeterminate, mut vacuous) = (0, 0, 0, 0);
    for lab in labs {
        let mut records = Vec::new();
        harnack_checks(lab, &SeedSplitter::new(7), &opts, &mut records).unwrap();
        for r in records.iter().filter(|r| r.verdict != Verdict::Info) {
            total += 1;
            match r.verdict {
                Verdict::Fail => fail += 1,
                Verdict::Indeterminate => indeterminate += 1,
                Verdict::Vacuous => vacuous += 1,
                _ => {}
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let frac = indeterminate as f64 / total.max(1) as f64;
    outcome(
        fail == 0 && frac <= 0.10 && labs.len() == 20 && secs <= 300.0,
        format!(
            "{} systems x 5 configs = {total} verdicts at n={N}: {fail} FAIL, {indeterminate} INDETERMINATE ({:.0}%), {vacuous} VACUOUS; {secs:.1}s <= 300s",
            labs.len(),
            100.0 * frac
        ),
    )
}

fn girsanov(labs: &[Lab]) -> Outcome {
    let started = Instant::now();
    let opts = SuiteOptions { n: N, ..SuiteOptions::default() };
    let mut problems = Vec::new();
    let mut counts = [0usize; 4];
    for lab in labs {
        let mut records = Vec::new();
        semilinear_checks(lab, &SeedSplitter::new(8), &opts, &mut records).unwrap();
        for r in &records {
            let slot = match r.check.as_str() {
                "girsanov_mean" => 0,
                "weight_moment_p" | "weight_moment_neg" => 1,
                "semilinear_harnack" => 2,
                _ => continue,
            };
            if r.verdict == Verdict::Pass {
                counts[slot] += 1;
            } else {
                problems.push(format!("{}:{}={}", lab.scenario.name, r.check, r.verdict.as_str()));
            }
        }
    }
    for (name, seed) in [("ou1_gauss", 31), ("ou1_mixed", 32), ("ou2_gauss", 33)] {
        let lab = common::lab(name);
        let ssys = lab.semilinear.as_ref().unwrap();
        let d = lab.scenario.dim;
        let x = DVector::from_element(d, 0.5);
        let f = |y: &DVector<f64>| y[0].cos() + 0.5 * y[d - 1].tanh();
        let est = ssys.semigroup_apply(0.0, 1.0, &f, &x, N, 64, &mut SeedSplitter::new(seed).stream("apply")).unwrap();
        let oracle = common::euler_maruyama(&lab, 1.0, &x, 256, N, seed, f);
        if est.value.overlaps(&oracle) {
            counts[3] += 1;
        } else {
            problems.push(format!("{name}: apply {:.4}±{:.4} vs EM {:.4}±{:.4}", est.value.mean, est.value.half_width, oracle.mean, oracle.half_width));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        problems.is_empty() && counts[0] == 5 && counts[3] == 3 && secs <= 300.0,
        format!(
            "E[M]=1 within 5 SE {}/5; EM oracle overlap {}/3; moment bounds PASS {}; semilinear Harnack PASS {}; problems {problems:?}; {secs:.1}s <= 300s",
            counts[0], counts[3], counts[1], counts[2]
        ),
    )
}

fn sampler_fidelity(labs: &[Lab]) -> Outcome {
    let tol = 4.0 / (N as f64).sqrt();
    let (mut worst, mut count, mut bad) = (0.0_f64, 0, Vec::new());
    let seeds = SeedSplitter::new(99);
    for lab in labs {
        let t = lab.prop.time(lab.prop.index(lab.scenario.horizon).unwrap());
        let mut triplets = vec![("kernel", lab.mehler.build_triplet(0.0, t).unwrap())];
        if let Some(hint) = lab.stability {
            triplets.push(("limit", limit_triplet(&lab.mehler, 0.0, &hint, TOL).unwrap().nu));
        }
        for (kind, trip) in triplets {
            let draws = trip.sample(N, &mut seeds.stream(&format!("{}/{kind}", lab.scenario.name))).unwrap();
            for xi in probe_frequencies(lab.scenario.dim, PROBES) {
                let (mut re, mut im) = (0.0, 0.0);
                for i in 0..N {
                    let phase = draws.row(i).transpose().dot(&xi);
                    re += phase.cos();
                    im += phase.sin();
                }
                let phi = trip.char_function(&xi);
                let err = ((re / N as f64 - phi.re).powi(2) + (im / N as f64 - phi.im).powi(2)).sqrt();
                worst = worst.max(err);
                if err > tol {
                    bad.push(format!("{}/{kind}", lab.scenario.name));
                }
            }
            count += 1;
        }
    }
    outcome(
        bad.is_empty(),
        format!("{count} triplets x {PROBES} frequencies at n={N}: max |phi_n - phi| {worst:.2e} <= {tol:.2e}; misses {bad:?}"),
    )
}

fn determinism(labs: &[Lab]) -> Outcome {
    let opts = SuiteOptions { n: 20_000, ..SuiteOptions::default() };
    let mut mismatches = Vec::new();
    for lab in labs {
        let a = run_suite(lab, Suite::All, 1234, &opts).unwrap();
        let b = run_suite(lab, Suite::All, 1234, &opts).unwrap();
        if a.to_json() != b.to_json() || a.to_csv() != b.to_csv() {
            mismatches.push(lab.scenario.name.clone());
        }
    }
    let path = common::scenario_dir().join("ou1_mixed.json");
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_mehlerlab"))
            .args(["--scenario", path.to_str().unwrap(), "--seed", "5", "--n", "20000", "suite", "--suite", "all"])
            .env("MEHLERLAB_THREADS", threads)
            .output()
            .unwrap()
            .stdout
    };
    let (first, second, single) = (run("4"), run("4"), run("1"));
    let cli_ok = !first.is_empty() && first == second && first == single;
    outcome(
        mismatches.is_empty() && cli_ok,
        format!(
            "{} scenarios x full suite twice: {} mismatches; CLI repeat and 1-vs-4 threads byte-identical: {cli_ok}",
            labs.len(),
            mismatches.len()
        ),
    )
}

fn main() -> ExitCode {
    let corpus = common::corpus_labs();
    let harnack_labs: Vec<Lab> = common::corpus()
        .iter()
        .map(|s| {
            let lab = s.build().unwrap();
            let gamma = mehler_core::harnack::GammaOperator::for_system(&lab.mehler, 0.0, lab.prop.time(lab.prop.index(s.horizon).unwrap()))
                .unwrap();
            if gamma.null_controllable() {
                lab
            } else {
                common::gaussianized(s).build().unwrap()
            }
        })
        .collect();

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let (flow, add) = guarded_pair(|| flow_and_additivity(&corpus));
    results.push(("1 flow identity", flow));
    results.push(("2 triplet additivity", add));
    results.push(("3 scalar closed forms", guarded(scalar_closed_forms)));
    results.push(("4 minimal-energy oracle", guarded(|| min_energy_oracle(&common::control_labs()))));
    results.push(("5 evolution-measure invariance", guarded(|| invariance(&common::stable_labs()))));
    results.push(("6 periodic fixed point", guarded(|| periodic(&common::periodic_labs()))));
    results.push(("7 harnack suite", guarded(|| harnack(&harnack_labs))));
    results.push(("8 girsanov normalization and oracle", guarded(|| girsanov(&common::semilinear_labs()))));
    results.push(("9 sampler fidelity", guarded(|| sampler_fidelity(&corpus))));
    results.push(("10 determinism", guarded(|| determinism(&corpus[..6]))));

    let mut all = true;
    for (name, o) in &results {
        all &= o.pass;
        println!("[{}] criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn guarded_pair(f: impl FnOnce() -> (Outcome, Outcome)) -> (Outcome, Outcome) {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(pair) => pair,
        Err(_) => (outcome(false, "panicked"), outcome(false, "panicked")),
    }
}

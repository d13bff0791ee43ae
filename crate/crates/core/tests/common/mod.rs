#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use mehler_core::scenario::{Lab, Scenario};
use mehler_core::semilinear::Drift;
use mehler_core::stats::{McEstimate, Moments, SeedSplitter};

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn scenario(name: &str) -> Scenario {
    let path = scenario_dir().join(format!("{name}.json"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Scenario::from_json(&text).unwrap()
}

pub fn lab(name: &str) -> Lab {
    scenario(name).build().unwrap()
}

/// Every scenario in the corpus directory, sorted by name.
pub fn corpus() -> Vec<Scenario> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(scenario_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Scenario::from_json(&std::fs::read_to_string(p).unwrap()).unwrap())
        .collect()
}

pub fn corpus_labs() -> Vec<Lab> {
    corpus().iter().map(|s| s.build().unwrap()).collect()
}

pub fn stable_labs() -> Vec<Lab> {
    corpus_labs().into_iter().filter(|l| l.stability.is_some()).collect()
}

pub fn periodic_labs() -> Vec<Lab> {
    corpus_labs().into_iter().filter(|l| l.scenario.tags.periodic.is_some()).collect()
}

pub fn control_labs() -> Vec<Lab> {
    corpus_labs().into_iter().filter(|l| l.control.is_some()).collect()
}

pub fn semilinear_labs() -> Vec<Lab> {
    corpus_labs().into_iter().filter(|l| l.semilinear.is_some()).collect()
}

/// Copy of `s` whose Gaussian part is replaced by the identity.
pub fn gaussianized(s: &Scenario) -> Scenario {
    let mut out = s.clone();
    out.name = format!("{}+gauss", s.name);
    let mut noise = out.noise.take().unwrap_or(mehler_core::scenario::NoiseSpec {
        a: None,
        r: None,
        atoms: Vec::new(),
        modulation: None,
    });
    noise.r = Some((0..s.dim).map(|i| (0..s.dim).map(|j| f64::from(u8::from(i == j))).collect()).collect());
    out.noise = Some(noise);
    out
}

/// Symmetric square root by eigendecomposition, independent of the crate's helper.
pub fn sqrtm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

fn catalog_drift(drift: &Drift, x: &DVector<f64>) -> DVector<f64> {
    match drift {
        Drift::Zero => DVector::zeros(x.len()),
        Drift::Constant { c } => DVector::from_column_slice(c),
        Drift::Tanh { scale } => x.map(|v| scale * v.tanh()),
        Drift::ClippedLinear { scale, bound } => x.map(|v| (scale * v).clamp(-bound, *bound)),
    }
}

/// Euler–Maruyama for `dX = (A X + R^{1/2} g(X)) dt + R^{1/2} dW`.
pub fn euler_maruyama(lab: &Lab, t: f64, x: &DVector<f64>, steps: usize, n: usize, seed: u64, f: impl Fn(&DVector<f64>) -> f64) -> McEstimate {
    let spec = lab.scenario.semilinear.as_ref().unwrap();
    let d = lab.scenario.dim;
    let r = DMatrix::from_fn(d, d, |i, j| spec.r[i][j]);
    let sq = sqrtm(&r);
    let dt = t / steps as f64;
    let mut rng = SeedSplitter::new(seed).stream("euler-maruyama");
    let mut m = Moments::default();
    for _ in 0..n {
        let mut y = x.clone();
        for k in 0..steps {
            let time = k as f64 * dt;
            let a = lab.prop.family().eval(time).unwrap();
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let drift = &a * &y + &sq * catalog_drift(&spec.drift, &y);
            y = &y + drift * dt + &sq * z * dt.sqrt();
        }
        m.push(f(&y));
    }
    m.estimate()
}

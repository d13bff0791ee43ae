//! JSON scenario files and the systems they describe.
//!
//! ```json
//! {
//!   "name": "ou-scalar",
//!   "dim": 1,
//!   "base_step": 0.00390625,
//!   "generator": { "kind": "constant", "matrix": [[-1.0]] },
//!   "noise": { "a": [0.0], "R": [[1.0]], "atoms": [{ "x": [1.0], "w": 0.5 }] },
//!   "control": { "kind": "constant", "matrix": [[1.0]] },
//!   "semilinear": { "R": [[1.0]], "drift": { "name": "tanh", "scale": -0.5 }, "k1": 0.25, "k2": 0.0 },
//!   "stability": { "M": 1.0, "omega": 1.0 },
//!   "tags": { "periodic": null }
//! }
//! ```

use std::f64::consts::TAU;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::ControlSystem;
use crate::error::{MehlerError, Result};
use crate::evolution::{MatrixFn, OperatorFamily, Propagator, StructureTags};
use crate::kernel::{MehlerSystem, NoiseRate};
use crate::linalg::{asymmetry, PsdEigen};
use crate::measures::StabilityHint;
use crate::semilinear::{Drift, SemilinearSystem};
use crate::triplet::{matrix_from_rows, Atom, LevyMeasure};

/// Time-dependent `d×d` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatrixSpec {
    Constant {
        matrix: Vec<Vec<f64>>,
    },
    /// `−diag(offset_i + amplitude_i sin(2πt/period))`.
    DiagSinusoid {
        offset: Vec<f64>,
        amplitude: Vec<f64>,
        period: f64,
    },
    /// `base + amplitude · sin(2πt/period)`.
    Sinusoid {
        base: Vec<Vec<f64>>,
        amplitude: Vec<Vec<f64>>,
        period: f64,
    },
}

impl MatrixSpec {
    fn is_constant(&self) -> bool {
        matches!(self, MatrixSpec::Constant { .. })
    }

    fn period(&self) -> Option<f64> {
        match self {
            MatrixSpec::Constant { .. } => None,
            MatrixSpec::DiagSinusoid { period, .. } | MatrixSpec::Sinusoid { period, .. } => Some(*period),
        }
    }

    fn build(&self, dim: usize, field: &str) -> Result<MatrixFn> {
        let bad = |what: &str| MehlerError::Config(format!("{field}: {what}"));
        match self {
            MatrixSpec::Constant { matrix } => {
                let m = matrix_from_rows(matrix, dim).map_err(|e| bad(&e.to_string()))?;
                Ok(Arc::new(move |_| m.clone()))
            }
            MatrixSpec::DiagSinusoid { offset, amplitude, period } => {
                if offset.len() != dim || amplitude.len() != dim {
                    return Err(bad(&format!("offset and amplitude need {dim} entries")));
                }
                if !(*period > 0.0) {
                    return Err(bad("period must be positive"));
                }
                let (o, a, p) = (offset.clone(), amplitude.clone(), *period);
                Ok(Arc::new(move |t| {
                    let phase = (TAU * t / p).sin();
                    DMatrix::from_diagonal(&DVector::from_fn(dim, |i, _| -(o[i] + a[i] * phase)))
                }))
            }
            MatrixSpec::Sinusoid { base, amplitude, period } => {
                let b = matrix_from_rows(base, dim).map_err(|e| bad(&e.to_string()))?;
                let a = matrix_from_rows(amplitude, dim).map_err(|e| bad(&e.to_string()))?;
                if !(*period > 0.0) {
                    return Err(bad("period must be positive"));
                }
                let p = *period;
                Ok(Arc::new(move |t| &b + &a * (TAU * t / p).sin()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomSpec {
    pub x: Vec<f64>,
    pub w: f64,
}

/// Rate scaling `1 + amplitude · sin(2πt/period)` applied to the whole triplet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Modulation {
    pub amplitude: f64,
    pub period: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(default)]
    pub a: Option<Vec<f64>>,
    #[serde(rename = "R", default)]
    pub r: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub atoms: Vec<AtomSpec>,
    #[serde(default)]
    pub modulation: Option<Modulation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemilinearSpec {
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    pub drift: Drift,
    pub k1: f64,
    pub k2: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTags {
    #[serde(default)]
    pub periodic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub dim: usize,
    pub base_step: f64,
    /// Horizon used by the suites; defaults to one time unit.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    pub generator: MatrixSpec,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub control: Option<MatrixSpec>,
    #[serde(default)]
    pub semilinear: Option<SemilinearSpec>,
    #[serde(default)]
    pub stability: Option<StabilityHint>,
    #[serde(default)]
    pub tags: ScenarioTags,
}

fn default_horizon() -> f64 {
    1.0
}

/// Systems assembled from a validated scenario.
#[derive(Debug, Clone)]
pub struct Lab {
    pub scenario: Scenario,
    pub hash: String,
    pub prop: Arc<Propagator>,
    pub mehler: MehlerSystem,
    pub control: Option<ControlSystem>,
    pub semilinear: Option<SemilinearSystem>,
    pub stability: Option<StabilityHint>,
}

fn check_psd(rows: &[Vec<f64>], dim: usize, field: &str) -> Result<DMatrix<f64>> {
    let m = matrix_from_rows(rows, dim).map_err(|e| MehlerError::Config(format!("{field}: {e}")))?;
    let scale = m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if asymmetry(&m) > 1e-12 * scale.max(1.0) {
        return Err(MehlerError::Config(format!("{field}: matrix is not symmetric")));
    }
    PsdEigen::new(&m).map_err(|e| MehlerError::Config(format!("{field}: not positive semidefinite ({e})")))?;
    Ok(m)
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            MehlerError::Config(format!(
                "scenario parse error at line {}, column {}, field '{}': {}",
                inner.line(),
                inner.column(),
                e.path(),
                inner
            ))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// SHA-256 of the canonical re-serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("scenario serializes");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn noise_rate(&self) -> Result<NoiseRate> {
        let d = self.dim;
        let Some(spec) = &self.noise else {
            return Ok(NoiseRate::zero(d));
        };
        let a = match &spec.a {
            Some(a) if a.len() != d => {
                return Err(MehlerError::Config(format!("noise.a: expected {d} entries, found {}", a.len())))
            }
            Some(a) => DVector::from_column_slice(a),
            None => DVector::zeros(d),
        };
        let r = match &spec.r {
            Some(rows) => check_psd(rows, d, "noise.R")?,
            None => DMatrix::zeros(d, d),
        };
        let atoms = spec
            .atoms
            .iter()
            .enumerate()
            .map(|(i, at)| {
                if at.x.len() != d {
                    return Err(MehlerError::Config(format!("noise.atoms[{i}].x: expected {d} entries")));
                }
                Ok(Atom { x: DVector::from_column_slice(&at.x), w: at.w })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = LevyMeasure::new(atoms).map_err(|e| MehlerError::Config(format!("noise.atoms: {e}")))?;
        let Some(Modulation { amplitude, period }) = spec.modulation else {
            let rate = crate::triplet::IdTriplet::new(a, r, m).map_err(|e| MehlerError::Config(format!("noise: {e}")))?;
            return Ok(NoiseRate::constant(rate));
        };
        if !(amplitude.abs() < 1.0) || !(period > 0.0) {
            return Err(MehlerError::Config(format!(
                "noise.modulation: need |amplitude| < 1 and period > 0, got ({amplitude}, {period})"
            )));
        }
        let scale = move |t: f64| 1.0 + amplitude * (TAU * t / period).sin();
        let tags = StructureTags { constant: false, commuting: false, periodic: Some(period) };
        let m_rate = move |t: f64| {
            let mut out = LevyMeasure::empty();
            for at in m.atoms() {
                out.push_scaled(at, scale(t));
            }
            out
        };
        Ok(NoiseRate::new(
            d,
            Arc::new(move |t| &a * scale(t)),
            Arc::new(move |t| &r * scale(t)),
            Arc::new(m_rate),
            tags,
        ))
    }

    /// Validates the scenario and assembles its systems.
    pub fn build(&self) -> Result<Lab> {
        let d = self.dim;
        if d == 0 {
            return Err(MehlerError::Config("dim must be positive".into()));
        }
        if !(self.base_step > 0.0) || !self.base_step.is_finite() {
            return Err(MehlerError::Config(format!("base_step must be positive, got {}", self.base_step)));
        }
        if !(self.horizon > 0.0) {
            return Err(MehlerError::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        let tags = StructureTags {
            constant: self.generator.is_constant(),
            commuting: self.generator.is_constant() || matches!(self.generator, MatrixSpec::DiagSinusoid { .. }),
            periodic: self.tags.periodic,
        };
        let family = OperatorFamily::new(d, self.generator.build(d, "generator")?, tags);
        let probes: Vec<f64> = (0..16).map(|k| k as f64 * self.base_step * 7.0).collect();
        family.check_tags(&probes)?;
        if let (Some(tag), Some(own)) = (self.tags.periodic, self.generator.period()) {
            let ratio = tag / own;
            if (ratio - ratio.round()).abs() > 1e-9 {
                return Err(MehlerError::Config(format!(
                    "tags.periodic = {tag} is not a multiple of the generator period {own}"
                )));
            }
        }
        let prop = Arc::new(Propagator::new(family, self.base_step)?);
        let mut noise = self.noise_rate()?;
        if let Some(tag) = self.tags.periodic {
            if noise.tags.periodic.is_some() || noise.tags.constant {
                if let Some(own) = noise.tags.periodic {
                    let ratio = tag / own;
                    if (ratio - ratio.round()).abs() > 1e-9 {
                        return Err(MehlerError::Config(format!(
                            "tags.periodic = {tag} is not a multiple of the noise modulation period {own}"
                        )));
                    }
                }
                noise.tags.periodic = Some(tag);
            }
        }
        noise.check(&probes)?;
        let mehler = MehlerSystem::new(Arc::clone(&prop), noise)?;
        let control = self
            .control
            .as_ref()
            .map(|spec| Ok::<_, MehlerError>(ControlSystem::new(Arc::clone(&prop), spec.build(d, "control")?)))
            .transpose()?;
        let semilinear = self
            .semilinear
            .as_ref()
            .map(|spec| {
                let r = check_psd(&spec.r, d, "semilinear.R")?;
                SemilinearSystem::new(Arc::clone(&prop), r, &spec.drift, spec.k1, spec.k2)
                    .map_err(|e| MehlerError::Config(format!("semilinear: {e}")))
            })
            .transpose()?;
        let stability = self.stability.map(|h| StabilityHint::new(h.m, h.omega)).transpose()?;
        Ok(Lab { scenario: self.clone(), hash: self.hash(), prop, mehler, control, semilinear, stability })
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Lab> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| MehlerError::Config(format!("cannot read scenario {}: {e}", path.display())))?;
    Scenario::from_json(&text)?.build()
}

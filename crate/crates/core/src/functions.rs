//! Built-in catalog of bounded test functions `f: R^d → R`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{MehlerError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum TestFunction {
    Constant {
        value: f64,
    },
    /// `⟨c, y⟩` (unbounded; for mean checks only).
    Linear {
        c: Vec<f64>,
    },
    /// `|y|²` (unbounded; for variance checks only).
    SquaredNorm,
    /// `1{⟨u,y⟩ > threshold}`.
    Indicator {
        #[serde(default)]
        direction: Option<Vec<f64>>,
        #[serde(default)]
        threshold: f64,
    },
    /// `1 + tanh(⟨u,y⟩)`, strictly positive.
    TanhShift {
        #[serde(default)]
        direction: Option<Vec<f64>>,
    },
    Tanh {
        #[serde(default)]
        direction: Option<Vec<f64>>,
    },
    Cosine {
        #[serde(default)]
        direction: Option<Vec<f64>>,
    },
    /// `clamp(⟨u,y⟩, −bound, bound)`.
    LinearClipped {
        #[serde(default)]
        direction: Option<Vec<f64>>,
        bound: f64,
    },
    /// Piecewise-linear interpolation of `values` over increasing `knots`
    /// in the projected coordinate, constant beyond the ends.
    Tabulated {
        #[serde(default)]
        direction: Option<Vec<f64>>,
        knots: Vec<f64>,
        values: Vec<f64>,
    },
}

fn project(direction: &Option<Vec<f64>>, y: &DVector<f64>) -> f64 {
    match direction {
        None => y[0],
        Some(u) => u.iter().zip(y.iter()).map(|(a, b)| a * b).sum(),
    }
}

impl TestFunction {
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "one" | "constant" => TestFunction::Constant { value: 1.0 },
            "indicator" => TestFunction::Indicator { direction: None, threshold: 0.0 },
            "tanh_shift" | "tanh-shift" => TestFunction::TanhShift { direction: None },
            "tanh" => TestFunction::Tanh { direction: None },
            "cosine" | "cos" => TestFunction::Cosine { direction: None },
            "linear_clipped" | "linear-clipped" => TestFunction::LinearClipped { direction: None, bound: 1.0 },
            "square" | "squared_norm" => TestFunction::SquaredNorm,
            other => return Err(MehlerError::Config(format!("unknown test function '{other}'"))),
        })
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let dir_ok = |d: &Option<Vec<f64>>| d.as_ref().is_none_or(|u| u.len() == dim);
        let ok = match self {
            TestFunction::Linear { c } => c.len() == dim,
            TestFunction::Indicator { direction, .. }
            | TestFunction::TanhShift { direction }
            | TestFunction::Tanh { direction }
            | TestFunction::Cosine { direction }
            | TestFunction::LinearClipped { direction, .. } => dir_ok(direction),
            TestFunction::Tabulated { direction, knots, values } => {
                if knots.is_empty() || knots.len() != values.len() || knots.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(MehlerError::Config("tabulated function needs increasing knots matching values".into()));
                }
                dir_ok(direction)
            }
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(MehlerError::DimensionMismatch { expected: dim, found: 0 })
        }
    }

    pub fn eval(&self, y: &DVector<f64>) -> f64 {
        match self {
            TestFunction::Constant { value } => *value,
            TestFunction::Linear { c } => c.iter().zip(y.iter()).map(|(a, b)| a * b).sum(),
            TestFunction::SquaredNorm => y.norm_squared(),
            TestFunction::Indicator { direction, threshold } => {
                if project(direction, y) > *threshold {
                    1.0
                } else {
                    0.0
                }
            }
            TestFunction::TanhShift { direction } => 1.0 + project(direction, y).tanh(),
            TestFunction::Tanh { direction } => project(direction, y).tanh(),
            TestFunction::Cosine { direction } => project(direction, y).cos(),
            TestFunction::LinearClipped { direction, bound } => project(direction, y).clamp(-bound, *bound),
            TestFunction::Tabulated { direction, knots, values } => {
                let z = project(direction, y);
                if z <= knots[0] {
                    return values[0];
                }
                let last = knots.len() - 1;
                if z >= knots[last] {
                    return values[last];
                }
                let i = knots.partition_point(|k| *k <= z) - 1;
                let frac = (z - knots[i]) / (knots[i + 1] - knots[i]);
                values[i] + frac * (values[i + 1] - values[i])
            }
        }
    }

    /// Whether the catalog guarantees `f ≥ 0` everywhere.
    pub fn is_nonnegative(&self) -> bool {
        match self {
            TestFunction::Constant { value } => *value >= 0.0,
            TestFunction::SquaredNorm | TestFunction::Indicator { .. } | TestFunction::TanhShift { .. } => true,
            TestFunction::Tabulated { values, .. } => values.iter().all(|v| *v >= 0.0),
            _ => false,
        }
    }

    /// Whether the catalog guarantees `f > 1` everywhere.
    pub fn exceeds_one(&self) -> bool {
        match self {
            TestFunction::Constant { value } => *value > 1.0,
            TestFunction::Tabulated { values, .. } => values.iter().all(|v| *v > 1.0),
            _ => false,
        }
    }

    pub fn is_bounded(&self) -> bool {
        !matches!(self, TestFunction::Linear { .. } | TestFunction::SquaredNorm)
    }

    /// `1 + f`, used where the log-Harnack inequality needs `f > 1`.
    pub fn shifted_above_one(&self) -> Option<TestFunction> {
        match self {
            TestFunction::TanhShift { direction } => Some(TestFunction::Tabulated {
                direction: direction.clone(),
                knots: (0..=80).map(|i| -8.0 + 0.2 * i as f64).collect(),
                values: (0..=80).map(|i| 2.0 + (-8.0 + 0.2 * i as f64).tanh()).collect(),
            }),
            TestFunction::Constant { value } => Some(TestFunction::Constant { value: value + 1.0 }),
            _ => None,
        }
    }
}

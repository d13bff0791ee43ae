//! Infinitely divisible laws `D[a, R, m]` with finite atomic Lévy measures.
//!
//! The characteristic exponent uses the compensator `1/(1+|x|²)`:
//!
//! `ψ(ξ) = −i⟨a,ξ⟩ + ½⟨ξ,Rξ⟩ − Σ w (e^{i⟨ξ,x⟩} − 1 − i⟨ξ,x⟩/(1+|x|²))`
//!
//! and `μ̂(ξ) = exp(−ψ(ξ))`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MehlerError, Result};
use crate::linalg::{asymmetry, psd_sqrt, PsdEigen};

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub x: DVector<f64>,
    pub w: f64,
}

/// Finite atomic Lévy measure `Σ w_i δ_{x_i}` on `R^d ∖ {0}`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LevyMeasure {
    atoms: Vec<Atom>,
}

impl LevyMeasure {
    pub fn empty() -> Self {
        Self { atoms: Vec::new() }
    }

    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        for (i, atom) in atoms.iter().enumerate() {
            if atom.x.iter().any(|v| !v.is_finite()) {
                return Err(MehlerError::Domain(format!("atom {i} has non-finite location")));
            }
            if atom.x.norm() == 0.0 {
                return Err(MehlerError::Domain(format!("atom {i} sits at the origin")));
            }
            if !(atom.w > 0.0) || !atom.w.is_finite() {
                return Err(MehlerError::Domain(format!("atom {i} has invalid weight {}", atom.w)));
            }
        }
        Ok(Self { atoms })
    }

    pub fn single(x: DVector<f64>, w: f64) -> Result<Self> {
        Self::new(vec![Atom { x, w }])
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.w).sum()
    }

    /// `∫ (1 ∧ |x|²) m(dx)`.
    pub fn small_jump_functional(&self) -> f64 {
        self.atoms.iter().map(|a| a.w * a.x.norm_squared().min(1.0)).sum()
    }

    pub(crate) fn push_unchecked(&mut self, x: DVector<f64>, w: f64) {
        self.atoms.push(Atom { x, w });
    }

    pub(crate) fn push_scaled(&mut self, atom: &Atom, factor: f64) {
        self.atoms.push(Atom { x: atom.x.clone(), w: atom.w * factor });
    }

    pub(crate) fn extend(&mut self, other: &LevyMeasure) {
        self.atoms.extend(other.atoms.iter().cloned());
    }
}

/// Infinitely divisible law with drift `a`, covariance `R` and atomic Lévy measure `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TripletWire", into = "TripletWire")]
pub struct IdTriplet {
    pub a: DVector<f64>,
    pub r: DMatrix<f64>,
    pub m: LevyMeasure,
}

/// Compensator weight `1/(1+|x|²)`.
#[inline]
pub fn compensator(x: &DVector<f64>) -> f64 {
    1.0 / (1.0 + x.norm_squared())
}

impl IdTriplet {
    pub fn new(a: DVector<f64>, r: DMatrix<f64>, m: LevyMeasure) -> Result<Self> {
        let d = a.len();
        if r.nrows() != d || r.ncols() != d {
            return Err(MehlerError::DimensionMismatch { expected: d, found: r.nrows() });
        }
        if let Some(bad) = m.atoms().iter().find(|at| at.x.len() != d) {
            return Err(MehlerError::DimensionMismatch { expected: d, found: bad.x.len() });
        }
        if a.iter().chain(r.iter()).any(|v| !v.is_finite()) {
            return Err(MehlerError::Domain("triplet has non-finite entries".into()));
        }
        let scale = r.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        if asymmetry(&r) > 1e-12 * scale.max(1.0) {
            return Err(MehlerError::Domain("covariance is not symmetric".into()));
        }
        PsdEigen::new(&r)?;
        Ok(Self { a, r, m })
    }

    /// Point mass at the origin, `D[0, 0, ∅]`.
    pub fn zero(dim: usize) -> Self {
        Self {
            a: DVector::zeros(dim),
            r: DMatrix::zeros(dim, dim),
            m: LevyMeasure::empty(),
        }
    }

    pub fn dirac(at: DVector<f64>) -> Self {
        let d = at.len();
        Self {
            a: at,
            r: DMatrix::zeros(d, d),
            m: LevyMeasure::empty(),
        }
    }

    pub fn gaussian(r: DMatrix<f64>) -> Result<Self> {
        Self::new(DVector::zeros(r.nrows()), r, LevyMeasure::empty())
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn char_exponent(&self, xi: &DVector<f64>) -> Complex64 {
        let drift = self.a.dot(xi);
        let quad = 0.5 * xi.dot(&(&self.r * xi));
        let mut jump = Complex64::new(0.0, 0.0);
        for atom in self.m.atoms() {
            let p = xi.dot(&atom.x);
            // e^{ip} − 1 − ip c, with cos p − 1 = −2 sin²(p/2) for accuracy at small p
            let half = (0.5 * p).sin();
            let re = -2.0 * half * half;
            let im = p.sin() - p * compensator(&atom.x);
            jump += Complex64::new(re, im) * atom.w;
        }
        Complex64::new(quad, -drift) - jump
    }

    /// `exp(−ψ(ξ))`.
    pub fn char_function(&self, xi: &DVector<f64>) -> Complex64 {
        (-self.char_exponent(xi)).exp()
    }

    pub fn convolve(&self, other: &IdTriplet) -> Result<IdTriplet> {
        if self.dim() != other.dim() {
            return Err(MehlerError::DimensionMismatch { expected: self.dim(), found: other.dim() });
        }
        let mut m = self.m.clone();
        m.extend(&other.m);
        Ok(IdTriplet {
            a: &self.a + &other.a,
            r: &self.r + &other.r,
            m,
        })
    }

    /// Image law under `x ↦ Mx`; satisfies `ψ_push(ξ) = ψ(Mᵀξ)`.
    pub fn pushforward(&self, map: &DMatrix<f64>) -> Result<IdTriplet> {
        let d = self.dim();
        if map.nrows() != d || map.ncols() != d {
            return Err(MehlerError::DimensionMismatch { expected: d, found: map.nrows() });
        }
        let mut a = map * &self.a;
        let mut m = LevyMeasure::empty();
        for atom in self.m.atoms() {
            let mx = map * &atom.x;
            if mx.norm() == 0.0 {
                continue;
            }
            let correction = compensator(&mx) - compensator(&atom.x);
            a.axpy(atom.w * correction, &mx, 1.0);
            m.push_unchecked(mx, atom.w);
        }
        let r = map * &self.r * map.transpose();
        Ok(IdTriplet {
            a,
            r: (&r + r.transpose()) * 0.5,
            m,
        })
    }

    /// Deterministic part of a draw: `a − Σ w x/(1+|x|²)`.
    pub fn centered_drift(&self) -> DVector<f64> {
        let mut shift = self.a.clone();
        for atom in self.m.atoms() {
            shift.axpy(-atom.w * compensator(&atom.x), &atom.x, 1.0);
        }
        shift
    }

    /// Prepares an exact-in-law sampler.
    pub fn sampler(&self) -> Result<TripletSampler> {
        let sqrt = psd_sqrt(&self.r)?;
        let gaussian = sqrt.iter().any(|v| *v != 0.0);
        let rate = self.m.total_mass();
        let (poisson, picker) = if rate > 0.0 {
            let poisson = Poisson::new(rate)
                .map_err(|e| MehlerError::Domain(format!("poisson rate {rate}: {e}")))?;
            let picker = WeightedIndex::new(self.m.atoms().iter().map(|a| a.w))
                .map_err(|e| MehlerError::Domain(format!("atom weights: {e}")))?;
            (Some(poisson), Some(picker))
        } else {
            (None, None)
        };
        Ok(TripletSampler {
            shift: self.centered_drift(),
            sqrt: gaussian.then_some(sqrt),
            poisson,
            picker,
            jumps: self.m.atoms().iter().map(|a| a.x.clone()).collect(),
        })
    }

    /// `n × d` matrix of independent draws.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        if n == 0 {
            return Err(MehlerError::Domain("sample count must be at least 1".into()));
        }
        let sampler = self.sampler()?;
        let mut out = DMatrix::zeros(n, self.dim());
        for i in 0..n {
            let row = sampler.draw(rng);
            out.set_row(i, &row.transpose());
        }
        Ok(out)
    }
}

/// Gaussian part `R^{1/2} Z` plus a compound-Poisson sum of atoms.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    shift: DVector<f64>,
    sqrt: Option<DMatrix<f64>>,
    poisson: Option<Poisson<f64>>,
    picker: Option<WeightedIndex<f64>>,
    jumps: Vec<DVector<f64>>,
}

impl TripletSampler {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.shift.len();
        let mut y = self.shift.clone();
        if let Some(sqrt) = &self.sqrt {
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            y += sqrt * z;
        }
        if let (Some(poisson), Some(picker)) = (&self.poisson, &self.picker) {
            let count = poisson.sample(rng) as u64;
            for _ in 0..count {
                y += &self.jumps[picker.sample(rng)];
            }
        }
        y
    }
}

#[derive(Serialize, Deserialize)]
struct AtomWire {
    x: Vec<f64>,
    w: f64,
}

#[derive(Serialize, Deserialize)]
struct TripletWire {
    a: Vec<f64>,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
    #[serde(default)]
    atoms: Vec<AtomWire>,
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], dim: usize) -> Result<DMatrix<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(MehlerError::DimensionMismatch {
            expected: dim,
            found: rows.iter().map(Vec::len).find(|&l| l != dim).unwrap_or(rows.len()),
        });
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl TryFrom<TripletWire> for IdTriplet {
    type Error = MehlerError;

    fn try_from(w: TripletWire) -> Result<Self> {
        let d = w.a.len();
        let r = matrix_from_rows(&w.r, d)?;
        let atoms = w
            .atoms
            .into_iter()
            .map(|a| Atom { x: DVector::from_vec(a.x), w: a.w })
            .collect();
        IdTriplet::new(DVector::from_vec(w.a), r, LevyMeasure::new(atoms)?)
    }
}

impl From<IdTriplet> for TripletWire {
    fn from(t: IdTriplet) -> Self {
        TripletWire {
            a: t.a.iter().copied().collect(),
            r: matrix_to_rows(&t.r),
            atoms: t
                .m
                .atoms
                .into_iter()
                .map(|a| AtomWire { x: a.x.iter().copied().collect(), w: a.w })
                .collect(),
        }
    }
}

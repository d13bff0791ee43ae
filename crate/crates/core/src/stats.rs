//! Monte Carlo estimates, statistical verdicts and deterministic seed splitting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;
/// Draws per seed-split chunk. Fixed so results do not depend on thread count.
pub const CHUNK: usize = 4096;

/// Mergeable sufficient statistics (count, mean, centered second moment).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&self, other: &Moments) -> Moments {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.count as f64 / count as f64;
        let m2 = self.m2 + other.m2 + delta * delta * (self.count as f64 * other.count as f64) / count as f64;
        Moments { count, mean, m2 }
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    pub fn estimate(&self) -> McEstimate {
        let se = (self.variance() / self.count.max(1) as f64).sqrt();
        McEstimate {
            n: self.count,
            mean: self.mean,
            std_err: se,
            half_width: Z95 * se,
        }
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::default();
        for x in iter {
            m.push(x);
        }
        m
    }
}

/// Monte Carlo estimate with a 95% normal confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub n: u64,
    pub mean: f64,
    pub std_err: f64,
    pub half_width: f64,
}

impl McEstimate {
    pub fn exact(value: f64) -> Self {
        Self { n: 0, mean: value, std_err: 0.0, half_width: 0.0 }
    }

    pub fn ci(&self) -> (f64, f64) {
        (self.mean - self.half_width, self.mean + self.half_width)
    }

    /// `|mean − target| ≤ k·SE`.
    pub fn within_se(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_err
    }

    pub fn overlaps(&self, other: &McEstimate) -> bool {
        let (a0, a1) = self.ci();
        let (b0, b1) = other.ci();
        a0 <= b1 && b0 <= a1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    /// The bound is infinite, so the inequality holds trivially.
    Vacuous,
    Indeterminate,
    Fail,
    /// Informational record with nothing to decide.
    Info,
}

impl Verdict {
    pub fn is_fail(self) -> bool {
        self == Verdict::Fail
    }

    /// Three-valued decision on `lhs ≤ rhs` from an estimated gap
    /// `gap = lhs − rhs` with standard error `sigma`: a violation counts as a
    /// failure only beyond `3σ`.
    pub fn classify(gap: f64, sigma: f64) -> Verdict {
        if gap.is_nan() {
            Verdict::Indeterminate
        } else if gap <= 0.0 {
            Verdict::Pass
        } else if gap <= 3.0 * sigma {
            Verdict::Indeterminate
        } else {
            Verdict::Fail
        }
    }

    /// Deterministic comparison `value ≤ bound`.
    pub fn bound(value: f64, bound: f64) -> Verdict {
        if value <= bound {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Vacuous => "VACUOUS",
            Verdict::Indeterminate => "INDETERMINATE",
            Verdict::Fail => "FAIL",
            Verdict::Info => "INFO",
        }
    }
}

/// Stable 64-bit stream id for a label.
pub fn label_id(label: &str) -> u64 {
    let digest = Sha256::digest(label.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Counter-based splitter: a global seed plus a label selects an independent
/// ChaCha stream, so adding new labels never perturbs existing ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSplitter {
    pub seed: u64,
}

impl SeedSplitter {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn stream(&self, label: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(label_id(label));
        rng
    }
}

fn chunk_rng(base: u64, chunk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(chunk);
    rng
}

/// Splits `n` draws into fixed-size chunks, each with its own stream derived
/// from one draw of `rng`, and evaluates them in parallel. Output order (and
/// hence any ordered merge) is independent of scheduling.
pub fn par_chunks<R, T, F>(n: usize, rng: &mut R, f: F) -> Vec<T>
where
    R: Rng + ?Sized,
    T: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> T + Sync,
{
    let base: u64 = rng.next_u64();
    let chunks = n.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = CHUNK.min(n - c * CHUNK);
            let mut r = chunk_rng(base, c as u64);
            f(len, &mut r)
        })
        .collect()
}

/// Merges per-chunk moments in chunk order.
pub fn merge_all<'a>(parts: impl IntoIterator<Item = &'a Moments>) -> Moments {
    parts.into_iter().fold(Moments::default(), |acc, m| acc.merge(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn merge_matches_direct() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.1).collect();
        let all: Moments = xs.iter().copied().collect();
        let a: Moments = xs[..333].iter().copied().collect();
        let b: Moments = xs[333..].iter().copied().collect();
        let merged = a.merge(&b);
        assert!((merged.mean - all.mean).abs() < 1e-12);
        assert!((merged.variance() - all.variance()).abs() < 1e-9);
        assert_eq!(merged.count, 1000);
    }

    #[test]
    fn constant_has_zero_width() {
        let m: Moments = std::iter::repeat(1.0).take(100).collect();
        let e = m.estimate();
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.half_width, 0.0);
    }

    #[test]
    fn classify_regions() {
        assert_eq!(Verdict::classify(-1.0, 0.1), Verdict::Pass);
        assert_eq!(Verdict::classify(0.2, 0.1), Verdict::Indeterminate);
        assert_eq!(Verdict::classify(0.5, 0.1), Verdict::Fail);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let s = SeedSplitter::new(7);
        let a: u64 = s.stream("flow").next_u64();
        let b: u64 = s.stream("flow").next_u64();
        let c: u64 = s.stream("control").next_u64();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn chunked_results_are_ordered() {
        let mut rng = SeedSplitter::new(1).stream("x");
        let lens = par_chunks(10_000, &mut rng, |len, _| len);
        assert_eq!(lens, vec![4096, 4096, 1808]);
    }
}

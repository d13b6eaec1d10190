//! Probability-simplex geometry: exact projection, categorical sampling,
//! L1 distance and sign subgradients.
//!
//! Every distribution parameter in the tuner (fragment distributions,
//! demonstration distributions, consensus variables) is a [`ProbVector`];
//! all update rules funnel through [`project_to_simplex`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::DetRng;

/// Absolute tolerance on the unit-sum invariant of a [`ProbVector`].
pub const SIMPLEX_SUM_TOL: f64 = 1e-9;
/// Tolerance on the waterfill-root residual of [`project_to_simplex`].
pub const PROJECTION_ROOT_TOL: f64 = 1e-10;

/// A point on the capped probability simplex: entries in `[0, 1]` summing to
/// one within [`SIMPLEX_SUM_TOL`].
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "Vec<f64>", into = "Vec<f64>"))]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyVector);
        }
        if entries.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite {
                context: "probability vector",
            });
        }
        let sum: f64 = entries.iter().sum();
        let in_box = entries.iter().all(|&e| (0.0..=1.0).contains(&e));
        if !in_box || (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::NotADistribution { sum });
        }
        Ok(ProbVector(entries))
    }

    /// The uniform distribution over `n` outcomes.
    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution needs n > 0");
        ProbVector(vec![1.0 / n as f64; n])
    }

    /// The degenerate distribution with all mass on `index`.
    pub fn one_hot(n: usize, index: usize) -> Self {
        assert!(index < n, "one_hot index out of range");
        let mut v = vec![0.0; n];
        v[index] = 1.0;
        ProbVector(v)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn iter(&self) -> core::slice::Iter<'_, f64> {
        self.0.iter()
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Vec<f64> {
        p.0
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbVector::new(v)
    }
}

/// Componentwise signs, entries restricted to `{-1, 0, +1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignVector(Vec<i8>);

impl SignVector {
    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> i8 {
        self.0[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = i8> + '_ {
        self.0.iter().copied()
    }

    /// The signs as `f64` coefficients.
    pub fn to_coeffs(&self) -> Vec<f64> {
        self.0.iter().map(|&s| f64::from(s)).collect()
    }
}

fn check_finite(x: &[f64], context: &'static str) -> Result<()> {
    if x.is_empty() {
        return Err(Error::EmptyVector);
    }
    if x.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite { context });
    }
    Ok(())
}

/// Value of the waterfill function `s(v) = sum_i min(1, max(0, x_i - v)) - 1`.
///
/// `s` is continuous and nonincreasing in `v`; the projection threshold is
/// its root.
pub fn waterfill_residual(x: &[f64], v: f64) -> f64 {
    x.iter().map(|&xi| (xi - v).clamp(0.0, 1.0)).sum::<f64>() - 1.0
}

/// Euclidean projection onto the capped simplex `{x' : 0 <= x'_i <= 1,
/// sum x'_i = 1}` via `x'_i = min(1, max(0, x_i - v*))`.
///
/// The threshold `v*` is located exactly by a sweep over the sorted
/// breakpoints `{x_i - 1} ∪ {x_i}`, between which the waterfill function is
/// linear. Inputs that already satisfy the simplex invariants are returned
/// unchanged, which makes the projection idempotent bit-for-bit.
pub fn project_to_simplex(x: &[f64]) -> Result<ProbVector> {
    check_finite(x, "projection input")?;
    if let Ok(p) = ProbVector::new(x.to_vec()) {
        return Ok(p);
    }
    let n = x.len();
    if n == 1 {
        return Ok(ProbVector(vec![1.0]));
    }

    // Breakpoint events: at v = x_i - 1 coordinate i leaves the cap and
    // becomes linear; at v = x_i it reaches zero.
    let mut events: Vec<(f64, i8)> = Vec::with_capacity(2 * n);
    for &xi in x {
        events.push((xi - 1.0, 1));
        events.push((xi, -1));
    }
    events.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

    // Left of the first breakpoint every coordinate is capped at 1.
    let mut value = n as f64 - 1.0;
    let mut slope_count: f64 = 0.0; // number of coordinates in the linear band
    let mut v_cur = events[0].0;
    let mut v_star = None;
    for &(v_next, kind) in &events {
        let next_value = value - slope_count * (v_next - v_cur);
        if next_value <= 0.0 {
            // Root lies in [v_cur, v_next].
            v_star = Some(if slope_count > 0.0 {
                v_cur + value / slope_count
            } else {
                v_next
            });
            break;
        }
        value = next_value;
        v_cur = v_next;
        slope_count += f64::from(kind);
    }
    // s -> -1 as v -> +inf, so the sweep always crosses zero.
    let v_star = match v_star {
        Some(v) => v,
        None => {
            return Err(Error::ProjectionFailed {
                residual: waterfill_residual(x, v_cur),
            })
        }
    };

    let mut out: Vec<f64> = x.iter().map(|&xi| (xi - v_star).clamp(0.0, 1.0)).collect();
    // One polish pass keeps the float sum within the ProbVector tolerance
    // even for long vectors.
    let drift = out.iter().sum::<f64>() - 1.0;
    if drift != 0.0 {
        let band = out.iter().filter(|&&y| y > 0.0 && y < 1.0).count();
        if band > 0 {
            let v_fix = v_star + drift / band as f64;
            let fixed: Vec<f64> = x.iter().map(|&xi| (xi - v_fix).clamp(0.0, 1.0)).collect();
            if (fixed.iter().sum::<f64>() - 1.0).abs() < drift.abs() {
                out = fixed;
            }
        }
    }

    let residual = waterfill_residual(x, v_star);
    if residual.abs() > PROJECTION_ROOT_TOL {
        return Err(Error::ProjectionFailed { residual });
    }
    ProbVector::new(out)
}

/// Draw an index from `Cat(p)` by inverse CDF over entries in storage order.
pub fn sample_categorical(p: &ProbVector, rng: &mut DetRng) -> usize {
    let u = rng.uniform01();
    let mut cum = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        cum += pi;
        if u < cum {
            return i;
        }
    }
    p.len() - 1
}

/// `sum_i |x_i - y_i|`.
pub fn l1_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum())
}

/// Componentwise sign with `sign(0) = 0`; the L1 subgradient direction.
///
/// Non-finite entries are treated as zero-sign; callers are expected to pass
/// finite data.
pub fn sign_subgradient(x: &[f64]) -> SignVector {
    SignVector(
        x.iter()
            .map(|&v| {
                if v > 0.0 {
                    1
                } else if v < 0.0 {
                    -1
                } else {
                    0
                }
            })
            .collect(),
    )
}

/// Clamp a plane dual to `[0, lambda_max]`.
pub fn project_dual(lambda: f64, lambda_max: f64) -> Result<f64> {
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(Error::InvalidParam {
            name: "lambda_max",
            reason: "must be finite and > 0",
        });
    }
    Ok(lambda.clamp(0.0, lambda_max))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Bisection root of the waterfill function; the independent oracle the
    /// sweep is checked against.
    pub(crate) fn project_bisection(x: &[f64]) -> Vec<f64> {
        let lo0 = x.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
        let hi0 = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut lo, mut hi) = (lo0, hi0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if waterfill_residual(x, mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let v = 0.5 * (lo + hi);
        x.iter().map(|&xi| (xi - v).clamp(0.0, 1.0)).collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y} (tol {tol})");
        }
    }

    #[test]
    fn projection_identity_on_simplex() {
        let p = project_to_simplex(&[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(p.as_slice(), &[0.2, 0.3, 0.5]);
    }

    #[test]
    fn projection_clipped_corner() {
        let p = project_to_simplex(&[5.0, -3.0]).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn projection_sorted_threshold() {
        // Sorted cumulative test on [0.9, 0.8, 0.1] gives threshold 0.35.
        let p = project_to_simplex(&[0.9, 0.8, 0.1]).unwrap();
        assert_close(p.as_slice(), &[0.55, 0.45, 0.0], 1e-12);
        assert_close(p.as_slice(), &project_bisection(&[0.9, 0.8, 0.1]), 1e-9);
    }

    #[test]
    fn projection_rejects_bad_input() {
        assert!(matches!(
            project_to_simplex(&[]),
            Err(Error::EmptyVector)
        ));
        assert!(matches!(
            project_to_simplex(&[1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn projection_single_entry() {
        assert_eq!(project_to_simplex(&[42.0]).unwrap().as_slice(), &[1.0]);
        assert_eq!(project_to_simplex(&[-3.0]).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn projection_idempotent_bitwise() {
        let mut rng = DetRng::stream(11, "idem", 0);
        for trial in 0..200 {
            let n = 2 + (trial % 64);
            let x: Vec<f64> = (0..n).map(|_| rng.uniform(-5.0, 5.0)).collect();
            let once = project_to_simplex(&x).unwrap();
            let twice = project_to_simplex(once.as_slice()).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn projection_matches_bisection_on_randoms() {
        let mut rng = DetRng::stream(5, "bisect", 0);
        for trial in 0..500 {
            let n = 2 + (trial % 32);
            let x: Vec<f64> = (0..n).map(|_| rng.uniform(-4.0, 4.0)).collect();
            let swept = project_to_simplex(&x).unwrap();
            assert_close(swept.as_slice(), &project_bisection(&x), 1e-9);
        }
    }

    #[test]
    fn projection_is_closest_point() {
        let mut rng = DetRng::stream(9, "opt", 0);
        for trial in 0..200 {
            let n = 2 + (trial % 16);
            let x: Vec<f64> = (0..n).map(|_| rng.uniform(-5.0, 5.0)).collect();
            let y = project_to_simplex(&x).unwrap();
            let d_proj: f64 = y
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            for _ in 0..100 {
                // Random simplex point via normalized uniforms.
                let raw: Vec<f64> = (0..n).map(|_| rng.uniform01() + 1e-12).collect();
                let s: f64 = raw.iter().sum();
                let cand: Vec<f64> = raw.iter().map(|r| r / s).collect();
                let d_cand: f64 = cand
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                assert!(d_proj <= d_cand + 1e-8);
            }
        }
    }

    #[test]
    fn sampling_degenerate() {
        let mut rng = DetRng::stream(3, "sample", 0);
        let first = ProbVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        let last = ProbVector::new(vec![0.0, 0.0, 1.0]).unwrap();
        for _ in 0..1000 {
            assert_eq!(sample_categorical(&first, &mut rng), 0);
            assert_eq!(sample_categorical(&last, &mut rng), 2);
        }
    }

    #[test]
    fn sampling_fair_coin_frequency() {
        let mut rng = DetRng::stream(42, "coin", 0);
        let p = ProbVector::new(vec![0.5, 0.5]).unwrap();
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| sample_categorical(&p, &mut rng) == 0)
            .count();
        let freq = zeros as f64 / n as f64;
        assert!((0.49..=0.51).contains(&freq), "freq = {freq}");
    }

    #[test]
    fn sampling_chi_square_goodness_of_fit() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let draws = 100_000usize;
        let mut gen = DetRng::stream(17, "chi-gen", 0);
        for trial in 0..10u64 {
            let n = 2 + (trial as usize % 6);
            let raw: Vec<f64> = (0..n).map(|_| gen.uniform01() + 0.05).collect();
            let s: f64 = raw.iter().sum();
            let p = ProbVector::new(raw.iter().map(|r| r / s).collect()).unwrap();

            let mut rng = DetRng::stream(17, "chi-draw", trial);
            let mut counts = vec![0usize; n];
            for _ in 0..draws {
                counts[sample_categorical(&p, &mut rng)] += 1;
            }
            let chi2: f64 = counts
                .iter()
                .zip(p.iter())
                .map(|(&c, &pi)| {
                    let e = pi * draws as f64;
                    (c as f64 - e) * (c as f64 - e) / e
                })
                .sum();
            let crit = ChiSquared::new((n - 1) as f64)
                .unwrap()
                .inverse_cdf(1.0 - 0.001);
            assert!(chi2 < crit, "chi2 = {chi2}, crit = {crit} (n = {n})");
        }
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_distance(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(l1_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        let d = l1_distance(&[0.2, 0.8], &[0.5, 0.5]).unwrap();
        assert!((d - 0.6).abs() < 1e-15);
        assert!(matches!(
            l1_distance(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn sign_examples() {
        assert_eq!(sign_subgradient(&[0.3, -0.1, 0.0]).0, vec![1, -1, 0]);
        assert_eq!(sign_subgradient(&[0.0, 0.0]).0, vec![0, 0]);
        // Uniform positive offset from a base point: all ones.
        let phi = [0.25, 0.25, 0.5];
        let x: Vec<f64> = phi.iter().map(|v| v + 0.1).collect();
        let diff: Vec<f64> = x.iter().zip(&phi).map(|(a, b)| a - b).collect();
        assert_eq!(sign_subgradient(&diff).0, vec![1, 1, 1]);
    }

    #[test]
    fn dual_projection_clamps() {
        assert_eq!(project_dual(-0.5, 10.0).unwrap(), 0.0);
        assert_eq!(project_dual(3.0, 10.0).unwrap(), 3.0);
        assert_eq!(project_dual(12.0, 10.0).unwrap(), 10.0);
        assert!(project_dual(1.0, 0.0).is_err());
        assert!(project_dual(1.0, -2.0).is_err());
    }
}

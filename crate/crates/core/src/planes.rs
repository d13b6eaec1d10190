//! Cutting planes over the stacked (worker blocks, consensus) space.
//!
//! The relaxed lower-level feasibility set `{ x : distance-to-estimate <= eps }`
//! is approximated from outside by a polyhedron. Whenever the current point
//! violates the relaxation, [`generate_plane`] linearizes the L1 distance at
//! that point: because the distance is convex, the resulting affine function
//! under-estimates `h - eps` everywhere, so the half-space `value <= 0` keeps
//! the whole relaxed set while cutting the violating point off.
//!
//! Planes carry their own dual multipliers; planes whose duals stay below a
//! threshold across two consecutive refresh checkpoints are dropped
//! ([`prune`]).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::lower::{raw_distance, LowerEstimate};
use crate::rng::DetRng;
use crate::simplex::sign_subgradient;

/// Feasibility slack on plane values.
pub const FEASIBILITY_TOL: f64 = 1e-12;
/// Most active planes kept per slot; beyond this the lowest-dual plane is
/// evicted.
pub const PLANE_CAP: usize = 64;

/// One affine constraint `sum_v a_v . p_v + b . z + c <= 0`.
///
/// `id` is shared by the planes generated for all slots at the same refresh
/// checkpoint, so `(id, slot)` is unique. Coefficients are L1 subgradients
/// and therefore lie in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CuttingPlane {
    pub id: u64,
    pub slot: usize,
    pub worker_coeffs: Vec<Vec<f64>>,
    pub consensus_coeffs: Vec<f64>,
    pub offset: f64,
    pub dual: f64,
    pub created_at: u64,
}

impl CuttingPlane {
    pub fn validate(&self) -> Result<()> {
        if self.dual < 0.0 || !self.dual.is_finite() {
            return Err(Error::InvalidParam {
                name: "dual",
                reason: "must be finite and >= 0",
            });
        }
        if !self.offset.is_finite() {
            return Err(Error::NonFinite {
                context: "plane offset",
            });
        }
        let n = self.consensus_coeffs.len();
        for row in self
            .worker_coeffs
            .iter()
            .chain(core::iter::once(&self.consensus_coeffs))
        {
            if row.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::InvalidParam {
                    name: "plane coefficients",
                    reason: "must lie in [-1, 1]",
                });
            }
        }
        Ok(())
    }
}

/// Affine value of a plane at a stacked point; `<= 0` means satisfied.
pub fn plane_value(plane: &CuttingPlane, worker_p: &[Vec<f64>], z: &[f64]) -> Result<f64> {
    if worker_p.len() != plane.worker_coeffs.len() {
        return Err(Error::LengthMismatch {
            expected: plane.worker_coeffs.len(),
            got: worker_p.len(),
        });
    }
    let n = plane.consensus_coeffs.len();
    if z.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: z.len(),
        });
    }
    let mut value = plane.offset;
    for (coeffs, block) in plane.worker_coeffs.iter().zip(worker_p) {
        if block.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: block.len(),
            });
        }
        for i in 0..n {
            value += coeffs[i] * block[i];
        }
    }
    for i in 0..n {
        value += plane.consensus_coeffs[i] * z[i];
    }
    Ok(value)
}

/// Linearize the distance-to-estimate at a violating point.
///
/// Requires `h(point) > epsilon`. The coefficients are the componentwise
/// sign subgradients at the point and the offset folds in `-epsilon`, so the
/// new plane is strictly positive at the generating point
/// (`value = h - epsilon`) and non-positive on the whole relaxed set; at the
/// estimate itself the value is exactly `-epsilon`.
pub fn generate_plane(
    estimate: &LowerEstimate,
    worker_p: &[Vec<f64>],
    z: &[f64],
    epsilon: f64,
    id: u64,
    slot: usize,
    created_at: u64,
) -> Result<CuttingPlane> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidParam {
            name: "epsilon",
            reason: "must be finite and > 0",
        });
    }
    let h = raw_distance(worker_p, z, estimate)?;
    if h <= epsilon {
        return Err(Error::PointFeasible { h, epsilon });
    }
    let worker_coeffs: Vec<Vec<f64>> = worker_p
        .iter()
        .zip(&estimate.worker_p)
        .map(|(block, base)| {
            let diff: Vec<f64> = block.iter().zip(base).map(|(a, b)| a - b).collect();
            sign_subgradient(&diff).to_coeffs()
        })
        .collect();
    let z_diff: Vec<f64> = z
        .iter()
        .zip(estimate.consensus.iter())
        .map(|(a, b)| a - b)
        .collect();
    let consensus_coeffs = sign_subgradient(&z_diff).to_coeffs();

    let mut grad_dot_point = 0.0;
    for (coeffs, block) in worker_coeffs.iter().zip(worker_p) {
        for i in 0..coeffs.len() {
            grad_dot_point += coeffs[i] * block[i];
        }
    }
    for i in 0..consensus_coeffs.len() {
        grad_dot_point += consensus_coeffs[i] * z[i];
    }
    let plane = CuttingPlane {
        id,
        slot,
        worker_coeffs,
        consensus_coeffs,
        offset: h - grad_dot_point - epsilon,
        dual: 0.0,
        created_at,
    };
    plane.validate()?;
    Ok(plane)
}

/// Ordered set of planes for one slot.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Polyhedron {
    pub slot: usize,
    pub epsilon: f64,
    planes: Vec<CuttingPlane>,
}

impl Polyhedron {
    pub fn new(slot: usize, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidParam {
                name: "epsilon",
                reason: "must be finite and > 0",
            });
        }
        Ok(Polyhedron {
            slot,
            epsilon,
            planes: Vec::new(),
        })
    }

    pub fn planes(&self) -> &[CuttingPlane] {
        &self.planes
    }

    pub fn planes_mut(&mut self) -> &mut [CuttingPlane] {
        &mut self.planes
    }

    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    /// Add a plane (validated, slot-retagged). When the cap is exceeded, the
    /// lowest-dual pre-existing plane is evicted and its id returned.
    pub fn push(&mut self, mut plane: CuttingPlane) -> Result<Option<u64>> {
        plane.slot = self.slot;
        plane.validate()?;
        self.planes.push(plane);
        if self.planes.len() <= PLANE_CAP {
            return Ok(None);
        }
        let last = self.planes.len() - 1;
        let victim = self.planes[..last]
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.dual.partial_cmp(&b.dual).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let removed = self.planes.remove(victim);
        Ok(Some(removed.id))
    }

    pub fn remove_ids(&mut self, ids: &BTreeSet<u64>) {
        self.planes.retain(|p| !ids.contains(&p.id));
    }
}

/// True iff every plane value at the point is within [`FEASIBILITY_TOL`] of
/// non-positive. The empty polyhedron accepts everything.
pub fn is_feasible(poly: &Polyhedron, worker_p: &[Vec<f64>], z: &[f64]) -> bool {
    poly.planes.iter().all(|pl| {
        plane_value(pl, worker_p, z).expect("point dimensions match polyhedron")
            <= FEASIBILITY_TOL
    })
}

/// Per-plane dual mass summed across all slots' polyhedra.
pub fn dual_sums(polys: &[Polyhedron]) -> BTreeMap<u64, f64> {
    let mut sums = BTreeMap::new();
    for poly in polys {
        for plane in &poly.planes {
            *sums.entry(plane.id).or_insert(0.0) += plane.dual;
        }
    }
    sums
}

/// Dual snapshots at the two most recent refresh checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DualWindow {
    pub previous: BTreeMap<u64, f64>,
    pub current: BTreeMap<u64, f64>,
}

impl DualWindow {
    pub fn record(&mut self, sums: BTreeMap<u64, f64>) {
        self.previous = core::mem::take(&mut self.current);
        self.current = sums;
    }

    /// Checkpoints recorded so far carry a plane only if it existed then.
    pub fn below_at_both(&self, id: u64, gamma: f64) -> bool {
        match (self.previous.get(&id), self.current.get(&id)) {
            (Some(&a), Some(&b)) => a < gamma && b < gamma,
            _ => false,
        }
    }
}

/// Drop every plane whose summed dual across slots stayed below `gamma` at
/// both of the window's checkpoints. Returns the removed ids.
pub fn prune(polys: &mut [Polyhedron], gamma: f64, window: &DualWindow) -> Vec<u64> {
    let mut doomed = BTreeSet::new();
    for id in window.current.keys() {
        if window.below_at_both(*id, gamma) {
            doomed.insert(*id);
        }
    }
    // Only touch ids that are actually present.
    let present: BTreeSet<u64> = polys
        .iter()
        .flat_map(|p| p.planes.iter().map(|pl| pl.id))
        .collect();
    doomed.retain(|id| present.contains(id));
    for poly in polys.iter_mut() {
        poly.remove_ids(&doomed);
    }
    doomed.into_iter().collect()
}

/// Result of a nestedness audit over a history of polyhedron snapshots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NestednessReport {
    pub violations: usize,
    pub points_checked: usize,
}

/// Verify that feasible regions only shrink across checkpoints.
///
/// For each consecutive snapshot pair and each sampled stacked point, a
/// point feasible at the later checkpoint must be feasible at the earlier
/// one. With pruning disabled planes are only added, so the expected
/// violation count is zero.
pub fn audit_nestedness(
    history: &[Vec<Polyhedron>],
    workers: usize,
    dim: usize,
    samples: usize,
    seed: u64,
) -> NestednessReport {
    let mut rng = DetRng::stream(seed, "nestedness", 0);
    let mut violations = 0;
    let mut points_checked = 0;
    if history.len() < 2 {
        return NestednessReport {
            violations,
            points_checked,
        };
    }
    let random_block = |rng: &mut DetRng| -> Vec<f64> {
        let raw: Vec<f64> = (0..dim).map(|_| rng.uniform01() + 1e-9).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    };
    for _ in 0..samples {
        let worker_p: Vec<Vec<f64>> = (0..workers).map(|_| random_block(&mut rng)).collect();
        let z = random_block(&mut rng);
        for pair in history.windows(2) {
            let (earlier, later) = (&pair[0], &pair[1]);
            for (before, after) in earlier.iter().zip(later) {
                points_checked += 1;
                if is_feasible(after, &worker_p, &z) && !is_feasible(before, &worker_p, &z) {
                    violations += 1;
                }
            }
        }
    }
    NestednessReport {
        violations,
        points_checked,
    }
}

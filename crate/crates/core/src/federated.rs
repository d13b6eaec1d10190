//! Upper-level asynchronous update engine.
//!
//! Workers take projected gradient steps on their fragment distributions
//! (pushed around by the active cutting planes and a robust sign pull toward
//! the consensus) and on their local demonstration distributions, which are
//! never aggregated. The server folds received worker blocks into the
//! consensus variables through plane duals and the robust sign sum, then
//! runs dual ascent on the plane multipliers.
//!
//! The server treats every received vector the same way because attacker
//! identities are unknown: non-finite entries are zeroed and everything is
//! clamped to the unit box before use.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::lower::LowerState;
use crate::oracle::{
    exact_gradients, reinforce_gradients, DiscreteAssignment, GradientEstimate, LossOracle,
};
use crate::planes::{plane_value, Polyhedron};
use crate::rng::DetRng;
use crate::simplex::{project_dual, project_to_simplex, sign_subgradient, ProbVector};

/// How workers estimate loss gradients.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "mode", rename_all = "kebab-case"))]
pub enum GradMode {
    /// Score-function estimate from sampled assignments.
    Reinforce {
        samples: usize,
        baseline: bool,
        p_min: f64,
    },
    /// Full enumeration; only for desk-scale shapes.
    Exact,
}

impl Default for GradMode {
    fn default() -> Self {
        GradMode::Reinforce {
            samples: 8,
            baseline: true,
            p_min: 1e-6,
        }
    }
}

/// Upper-level rates and weights.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OuterConfig {
    pub eta_p: f64,
    pub eta_q: f64,
    pub eta_z: f64,
    pub eta_lambda: f64,
    /// Weight of the robust sign terms, `>= 0`.
    pub robust_weight: f64,
    /// Dual regularization weight; pulls plane duals toward zero.
    pub dual_reg: f64,
    /// Upper clamp for plane duals.
    pub lambda_max: f64,
    pub grad: GradMode,
}

impl Default for OuterConfig {
    fn default() -> Self {
        OuterConfig {
            eta_p: 1e-2,
            eta_q: 1e-2,
            eta_z: 1e-2,
            eta_lambda: 1e-1,
            robust_weight: 0.0,
            dual_reg: 1e-2,
            lambda_max: 100.0,
            grad: GradMode::default(),
        }
    }
}

impl OuterConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v, positive) in [
            ("eta_p", self.eta_p, true),
            ("eta_q", self.eta_q, true),
            ("eta_z", self.eta_z, true),
            ("eta_lambda", self.eta_lambda, true),
            ("robust_weight", self.robust_weight, false),
            ("dual_reg", self.dual_reg, false),
            ("lambda_max", self.lambda_max, true),
        ] {
            if !v.is_finite() || v < 0.0 || (positive && v == 0.0) {
                return Err(Error::InvalidParam {
                    name,
                    reason: "must be finite and positive",
                });
            }
        }
        Ok(())
    }
}

/// One worker's local variables and gradient stream.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerState {
    pub worker_id: usize,
    pub p: Vec<ProbVector>,
    pub q: Vec<ProbVector>,
    /// Iteration of the last server snapshot this worker received.
    pub last_sync: u64,
    pub rng: DetRng,
}

impl WorkerState {
    pub fn fresh(worker_id: usize, slots: usize, vocab: usize, demo_slots: usize, demos_per_slot: usize, rng: DetRng) -> Self {
        WorkerState {
            worker_id,
            p: (0..slots).map(|_| ProbVector::uniform(vocab)).collect(),
            q: (0..demo_slots)
                .map(|_| ProbVector::uniform(demos_per_slot))
                .collect(),
            last_sync: 0,
            rng,
        }
    }
}

/// What the server broadcasts: consensus blocks and the active planes with
/// their duals (workers need both for their step direction).
#[derive(Clone, Debug, PartialEq)]
pub struct ServerSnapshot {
    pub iteration: u64,
    pub consensus: Vec<ProbVector>,
    pub polyhedra: Vec<Polyhedron>,
}

/// A worker-to-server update. `q` rides along for trace output only; the
/// server never aggregates it. Byzantine senders may put arbitrary junk in
/// both blocks.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WorkerUpdateMsg {
    pub worker_id: usize,
    pub iteration: u64,
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
}

/// One projected step on `p` (loss gradient + plane pull + robust sign term)
/// and on `q` (loss gradient only), computed against the given snapshot.
///
/// On evaluator failure the worker state is untouched, including its random
/// stream, so the step can be retried or skipped deterministically.
pub fn worker_step(
    w: &mut WorkerState,
    snapshot: &ServerSnapshot,
    oracle: &mut dyn LossOracle,
    cfg: &OuterConfig,
    iteration: u64,
) -> Result<WorkerUpdateMsg> {
    cfg.validate()?;
    if snapshot.consensus.len() != w.p.len() {
        return Err(Error::LengthMismatch {
            expected: w.p.len(),
            got: snapshot.consensus.len(),
        });
    }
    let mut scratch_rng = w.rng.clone();
    let est: GradientEstimate = match cfg.grad {
        GradMode::Reinforce {
            samples,
            baseline,
            p_min,
        } => reinforce_gradients(&w.p, &w.q, oracle, samples, &mut scratch_rng, baseline, p_min)?,
        GradMode::Exact => {
            let (grad_p, grad_q) = exact_gradients(&w.p, &w.q, oracle)?;
            GradientEstimate {
                grad_p,
                grad_q,
                mean_loss: 0.0,
            }
        }
    };

    let mut new_p = Vec::with_capacity(w.p.len());
    for (slot, p_i) in w.p.iter().enumerate() {
        let z_i = &snapshot.consensus[slot];
        let mut dir = est.grad_p[slot].clone();
        for pl in snapshot.polyhedra[slot].planes() {
            let a = pl.worker_coeffs.get(w.worker_id).ok_or(Error::IndexOutOfBounds {
                kind: "worker",
                slot,
                index: w.worker_id,
                bound: pl.worker_coeffs.len(),
            })?;
            for i in 0..dir.len() {
                dir[i] += pl.dual * a[i];
            }
        }
        if cfg.robust_weight > 0.0 {
            let diff: Vec<f64> = p_i
                .iter()
                .zip(z_i.iter())
                .map(|(a, b)| a - b)
                .collect();
            let pull = sign_subgradient(&diff);
            for i in 0..dir.len() {
                dir[i] += cfg.robust_weight * f64::from(pull.get(i));
            }
        }
        let moved: Vec<f64> = p_i
            .iter()
            .zip(&dir)
            .map(|(x, d)| x - cfg.eta_p * d)
            .collect();
        new_p.push(project_to_simplex(&moved)?);
    }

    let mut new_q = Vec::with_capacity(w.q.len());
    for (slot, q_i) in w.q.iter().enumerate() {
        let moved: Vec<f64> = q_i
            .iter()
            .zip(&est.grad_q[slot])
            .map(|(x, d)| x - cfg.eta_q * d)
            .collect();
        new_q.push(project_to_simplex(&moved)?);
    }

    // Commit only now that nothing can fail.
    w.p = new_p;
    w.q = new_q;
    w.rng = scratch_rng;
    Ok(WorkerUpdateMsg {
        worker_id: w.worker_id,
        iteration,
        p: w.p.iter().map(|v| v.as_slice().to_vec()).collect(),
        q: w.q.iter().map(|v| v.as_slice().to_vec()).collect(),
    })
}

/// Clamp a received block into the unit box; non-finite entries become zero.
pub fn sanitize_block(raw: &[f64]) -> Vec<f64> {
    raw.iter()
        .map(|&v| {
            if v.is_nan() {
                0.0
            } else {
                v.clamp(0.0, 1.0)
            }
        })
        .collect()
}

/// Server-side state: consensus blocks, per-slot polyhedra with embedded
/// plane duals, inner-solver scratch (warm-started across refreshes), and
/// the last sanitized block received from every worker.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub iteration: u64,
    pub consensus: Vec<ProbVector>,
    pub polyhedra: Vec<Polyhedron>,
    /// Warm-start state of the lower-level solver, one per slot.
    pub inner_states: Vec<LowerState>,
    /// `received_p[worker][slot]`, clamped to the unit box.
    pub received_p: Vec<Vec<Vec<f64>>>,
    /// `received_q[worker][slot]`, trace output only.
    pub received_q: Vec<Vec<Vec<f64>>>,
}

impl ServerState {
    pub fn fresh(
        workers: usize,
        slots: usize,
        vocab: usize,
        demo_slots: usize,
        demos_per_slot: usize,
        epsilon: f64,
    ) -> Result<Self> {
        let uniform = ProbVector::uniform(vocab);
        let polyhedra = (0..slots)
            .map(|slot| Polyhedron::new(slot, epsilon))
            .collect::<Result<Vec<_>>>()?;
        let inner_states = (0..slots)
            .map(|_| LowerState::fresh(workers, &uniform))
            .collect();
        let q_block = if demo_slots > 0 {
            vec![ProbVector::uniform(demos_per_slot).as_slice().to_vec(); demo_slots]
        } else {
            vec![]
        };
        Ok(ServerState {
            iteration: 0,
            consensus: vec![uniform.clone(); slots],
            polyhedra,
            inner_states,
            received_p: vec![vec![uniform.as_slice().to_vec(); slots]; workers],
            received_q: vec![q_block; workers],
        })
    }

    pub fn workers(&self) -> usize {
        self.received_p.len()
    }

    pub fn slots(&self) -> usize {
        self.consensus.len()
    }

    /// Blocks of all workers for one slot, in worker order.
    pub fn slot_blocks(&self, slot: usize) -> Vec<Vec<f64>> {
        self.received_p.iter().map(|w| w[slot].clone()).collect()
    }

    pub fn snapshot(&self) -> ServerSnapshot {
        ServerSnapshot {
            iteration: self.iteration,
            consensus: self.consensus.clone(),
            polyhedra: self.polyhedra.clone(),
        }
    }

    pub fn active_planes(&self) -> usize {
        self.polyhedra.iter().map(|p| p.len()).sum()
    }
}

/// Fold a round of updates into the server state.
///
/// Received blocks are sanitized and archived (stale workers keep their last
/// known block), the consensus moves against the plane duals plus the robust
/// sign sum over all archived blocks, and every plane's dual then ascends on
/// its value at the new consensus, decayed by the regularizer.
pub fn server_step(
    s: &mut ServerState,
    updates: &[WorkerUpdateMsg],
    cfg: &OuterConfig,
) -> Result<()> {
    cfg.validate()?;
    for msg in updates {
        if msg.worker_id >= s.workers() {
            return Err(Error::IndexOutOfBounds {
                kind: "worker",
                slot: 0,
                index: msg.worker_id,
                bound: s.workers(),
            });
        }
        if msg.p.len() != s.slots() {
            return Err(Error::LengthMismatch {
                expected: s.slots(),
                got: msg.p.len(),
            });
        }
        for (slot, block) in msg.p.iter().enumerate() {
            if block.len() != s.consensus[slot].len() {
                return Err(Error::LengthMismatch {
                    expected: s.consensus[slot].len(),
                    got: block.len(),
                });
            }
            s.received_p[msg.worker_id][slot] = sanitize_block(block);
        }
        if msg.q.len() == s.received_q[msg.worker_id].len() {
            for (slot, block) in msg.q.iter().enumerate() {
                s.received_q[msg.worker_id][slot] = sanitize_block(block);
            }
        }
    }

    for slot in 0..s.slots() {
        let z = s.consensus[slot].as_slice();
        let n = z.len();
        let mut direction = vec![0.0; n];
        for pl in s.polyhedra[slot].planes() {
            for i in 0..n {
                direction[i] += pl.dual * pl.consensus_coeffs[i];
            }
        }
        if cfg.robust_weight > 0.0 {
            for worker in 0..s.workers() {
                let block = &s.received_p[worker][slot];
                let diff: Vec<f64> = (0..n).map(|i| z[i] - block[i]).collect();
                let sgn = sign_subgradient(&diff);
                for i in 0..n {
                    direction[i] += cfg.robust_weight * f64::from(sgn.get(i));
                }
            }
        }
        let moved: Vec<f64> = (0..n).map(|i| z[i] - cfg.eta_z * direction[i]).collect();
        s.consensus[slot] = project_to_simplex(&moved)?;
    }

    for slot in 0..s.slots() {
        let blocks = s.slot_blocks(slot);
        let z_new = s.consensus[slot].as_slice().to_vec();
        for pl in s.polyhedra[slot].planes_mut() {
            let value = plane_value(pl, &blocks, &z_new)?;
            let ascended = pl.dual + cfg.eta_lambda * (value - cfg.dual_reg * pl.dual);
            pl.dual = project_dual(ascended, cfg.lambda_max)?;
        }
    }

    s.iteration += 1;
    Ok(())
}

/// Per-slot argmax of the worker's distributions; ties resolve to the lowest
/// index.
pub fn decode_solution(w: &WorkerState) -> DiscreteAssignment {
    DiscreteAssignment {
        tokens: w.p.iter().map(|p| p.argmax()).collect(),
        demos: w.q.iter().map(|q| q.argmax()).collect(),
    }
}

//! Approximate lower-level solver.
//!
//! For one fragment slot, the lower level asks all workers' distributions and
//! the server's consensus copy to agree while minimizing the summed local
//! losses. We run a fixed number of projected gradient rounds on the
//! augmented Lagrangian
//!
//! ```text
//! G(p, z, rho) = sum_v [ g_v(p_v) + rho_v . (p_v - z) + (mu/2) |p_v - z|^2 ]
//! ```
//!
//! and take the final stacked point as the solution estimate. The L1
//! distance of a candidate point to that estimate ([`solution_distance`]) is
//! what the cutting planes of [`crate::planes`] linearize.
//!
//! Worker blocks are raw vectors rather than [`ProbVector`]s: during a run
//! the server also tracks what Byzantine peers sent, which is clamped to the
//! unit box but need not sum to one. Benign blocks stay on the simplex
//! because every step ends in a projection.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::simplex::{l1_distance, project_to_simplex, sign_subgradient, ProbVector};

/// Inner-solver hyperparameters.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InnerConfig {
    /// Gradient rounds per estimate (may be zero: the estimate is the
    /// starting point).
    pub steps: usize,
    /// Consensus penalty, `> 0`.
    pub penalty: f64,
    /// Weight of the robust sign term, `>= 0`.
    pub robust_weight: f64,
    pub eta_p: f64,
    pub eta_z: f64,
    pub eta_rho: f64,
}

impl Default for InnerConfig {
    fn default() -> Self {
        InnerConfig {
            steps: 20,
            penalty: 1.0,
            robust_weight: 0.0,
            eta_p: 0.05,
            eta_z: 0.05,
            eta_rho: 0.1,
        }
    }
}

impl InnerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v, positive) in [
            ("penalty", self.penalty, true),
            ("robust_weight", self.robust_weight, false),
            ("eta_p", self.eta_p, true),
            ("eta_z", self.eta_z, true),
            ("eta_rho", self.eta_rho, true),
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

/// State of one slot's consensus problem: per-worker distribution blocks,
/// the consensus copy, and per-worker dual vectors.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LowerState {
    pub worker_p: Vec<Vec<f64>>,
    pub consensus: ProbVector,
    pub duals: Vec<Vec<f64>>,
}

impl LowerState {
    pub fn new(
        worker_p: Vec<Vec<f64>>,
        consensus: ProbVector,
        duals: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if worker_p.is_empty() {
            return Err(Error::EmptyVector);
        }
        if duals.len() != worker_p.len() {
            return Err(Error::LengthMismatch {
                expected: worker_p.len(),
                got: duals.len(),
            });
        }
        let n = consensus.len();
        for block in worker_p.iter() {
            if block.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    got: block.len(),
                });
            }
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "worker block",
                });
            }
        }
        for d in duals.iter() {
            if d.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    got: d.len(),
                });
            }
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { context: "dual" });
            }
        }
        Ok(LowerState {
            worker_p,
            consensus,
            duals,
        })
    }

    /// Fresh state: every worker at `start`, consensus at `start`, zero duals.
    pub fn fresh(workers: usize, start: &ProbVector) -> Self {
        LowerState {
            worker_p: vec![start.as_slice().to_vec(); workers],
            consensus: start.clone(),
            duals: vec![vec![0.0; start.len()]; workers],
        }
    }

    pub fn workers(&self) -> usize {
        self.worker_p.len()
    }

    pub fn dim(&self) -> usize {
        self.consensus.len()
    }
}

/// The solution estimate for one slot: final worker blocks and consensus,
/// plus the demonstration realization (one per worker) it was computed for.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LowerEstimate {
    pub worker_p: Vec<Vec<f64>>,
    pub consensus: ProbVector,
    pub demos_used: Vec<Vec<usize>>,
    pub steps: usize,
}

impl LowerEstimate {
    /// Worker blocks concatenated in index order, consensus last.
    pub fn stacked(&self) -> Vec<f64> {
        stack_point(&self.worker_p, self.consensus.as_slice())
    }

    pub fn dim(&self) -> usize {
        self.consensus.len()
    }
}

/// Concatenate worker blocks (in index order) and the consensus block.
pub fn stack_point(worker_p: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(worker_p.len() * z.len() + z.len());
    for block in worker_p {
        out.extend_from_slice(block);
    }
    out.extend_from_slice(z);
    out
}

/// Analytic gradients of the augmented Lagrangian at `state`.
#[derive(Clone, Debug, PartialEq)]
pub struct LagrangianGrads {
    /// Gradient for the given worker's block: `g_grad + rho_v + mu (p_v - z)`.
    pub d_p: Vec<f64>,
    /// Consensus gradient summed over all workers: `sum_v (-rho_v + mu (z - p_v))`.
    pub d_z: Vec<f64>,
    /// Dual gradient for the given worker: `p_v - z`.
    pub d_rho: Vec<f64>,
}

pub fn lagrangian_grads(
    state: &LowerState,
    worker: usize,
    g_grad: &[f64],
    penalty: f64,
) -> Result<LagrangianGrads> {
    let n = state.dim();
    if g_grad.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: g_grad.len(),
        });
    }
    let p = &state.worker_p[worker];
    let z = state.consensus.as_slice();
    let rho = &state.duals[worker];
    let d_p: Vec<f64> = (0..n)
        .map(|i| g_grad[i] + rho[i] + penalty * (p[i] - z[i]))
        .collect();
    let mut d_z = vec![0.0; n];
    for (pv, rv) in state.worker_p.iter().zip(&state.duals) {
        for i in 0..n {
            d_z[i] += -rv[i] + penalty * (z[i] - pv[i]);
        }
    }
    let d_rho: Vec<f64> = (0..n).map(|i| p[i] - z[i]).collect();
    Ok(LagrangianGrads { d_p, d_z, d_rho })
}

/// Value of the augmented Lagrangian given each worker's local loss value.
pub fn lagrangian_value(state: &LowerState, g_values: &[f64], penalty: f64) -> f64 {
    let z = state.consensus.as_slice();
    let mut total = 0.0;
    for ((pv, rho), &g) in state.worker_p.iter().zip(&state.duals).zip(g_values) {
        let mut dot = 0.0;
        let mut sq = 0.0;
        for i in 0..z.len() {
            let d = pv[i] - z[i];
            dot += rho[i] * d;
            sq += d * d;
        }
        total += g + dot + 0.5 * penalty * sq;
    }
    total
}

/// One worker's projected descent step on its block.
///
/// The robust sign term is oriented to pull the block toward the consensus:
/// the step direction is `d_p + robust_weight * sign(p - z)`.
pub fn inner_worker_step(
    state: &LowerState,
    worker: usize,
    g_grad: &[f64],
    cfg: &InnerConfig,
) -> Result<ProbVector> {
    let grads = lagrangian_grads(state, worker, g_grad, cfg.penalty)?;
    let p = &state.worker_p[worker];
    let z = state.consensus.as_slice();
    let diff: Vec<f64> = (0..p.len()).map(|i| p[i] - z[i]).collect();
    let pull = sign_subgradient(&diff);
    let moved: Vec<f64> = (0..p.len())
        .map(|i| p[i] - cfg.eta_p * (grads.d_p[i] + cfg.robust_weight * f64::from(pull.get(i))))
        .collect();
    project_to_simplex(&moved)
}

/// The server's consensus and dual updates.
///
/// `received` is the latest block from every tracked worker, Byzantine
/// senders included; the sign sum runs over all of them. The dual ascent
/// uses the freshly projected consensus.
pub fn inner_server_step(
    state: &LowerState,
    received: &[Vec<f64>],
    cfg: &InnerConfig,
) -> Result<(ProbVector, Vec<Vec<f64>>)> {
    let n = state.dim();
    if received.len() != state.workers() {
        return Err(Error::LengthMismatch {
            expected: state.workers(),
            got: received.len(),
        });
    }
    for block in received {
        if block.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: block.len(),
            });
        }
        if block.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "received block",
            });
        }
    }
    let z = state.consensus.as_slice();
    let mut direction = vec![0.0; n];
    for (rho, pv) in state.duals.iter().zip(received) {
        for i in 0..n {
            direction[i] += -rho[i] + cfg.penalty * (z[i] - pv[i]);
        }
    }
    for pv in received {
        let diff: Vec<f64> = (0..n).map(|i| z[i] - pv[i]).collect();
        let sgn = sign_subgradient(&diff);
        for i in 0..n {
            direction[i] += cfg.robust_weight * f64::from(sgn.get(i));
        }
    }
    let moved: Vec<f64> = (0..n).map(|i| z[i] - cfg.eta_z * direction[i]).collect();
    let z_new = project_to_simplex(&moved)?;

    let duals_new: Vec<Vec<f64>> = state
        .duals
        .iter()
        .zip(received)
        .map(|(rho, pv)| {
            (0..n)
                .map(|i| rho[i] + cfg.eta_rho * (pv[i] - z_new.get(i)))
                .collect()
        })
        .collect();
    Ok((z_new, duals_new))
}

/// Per-worker local gradient supplier for the inner rounds.
///
/// Implementations hold whatever they need (an evaluator plus a pinned
/// demonstration realization, a synthetic objective, ...). Called once per
/// worker per round with that worker's current block.
pub trait InnerGradSource {
    fn grad(&mut self, worker: usize, p: &[f64]) -> Result<Vec<f64>>;
}

impl<F> InnerGradSource for F
where
    F: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
{
    fn grad(&mut self, worker: usize, p: &[f64]) -> Result<Vec<f64>> {
        self(worker, p)
    }
}

/// Run `cfg.steps` bulk-synchronous rounds (all worker steps, then the
/// server step) from `init` and return the final stacked blocks.
///
/// This is the attack-free driver: every tracked worker computes honest
/// steps. Runs with Byzantine senders compose the step functions directly.
pub fn estimate_lower_solution<G: InnerGradSource>(
    demos_used: Vec<Vec<usize>>,
    init: LowerState,
    cfg: &InnerConfig,
    source: &mut G,
) -> Result<LowerEstimate> {
    cfg.validate()?;
    if demos_used.len() != init.workers() {
        return Err(Error::LengthMismatch {
            expected: init.workers(),
            got: demos_used.len(),
        });
    }
    let mut state = init;
    for _ in 0..cfg.steps {
        let mut fresh: Vec<Vec<f64>> = Vec::with_capacity(state.workers());
        for v in 0..state.workers() {
            let g = source.grad(v, &state.worker_p[v])?;
            fresh.push(inner_worker_step(&state, v, &g, cfg)?.into_vec());
        }
        let (z, duals) = inner_server_step(&state, &fresh, cfg)?;
        state.worker_p = fresh;
        state.consensus = z;
        state.duals = duals;
    }
    Ok(LowerEstimate {
        worker_p: state.worker_p,
        consensus: state.consensus,
        demos_used,
        steps: cfg.steps,
    })
}

/// L1 distance from a stacked point to the solution estimate.
///
/// Errors if the candidate was evaluated under a different demonstration
/// realization than the estimate was computed for.
pub fn solution_distance(
    demos: &[Vec<usize>],
    worker_p: &[Vec<f64>],
    z: &[f64],
    estimate: &LowerEstimate,
) -> Result<f64> {
    if demos != estimate.demos_used.as_slice() {
        return Err(Error::DemoMismatch);
    }
    raw_distance(worker_p, z, estimate)
}

/// [`solution_distance`] without the realization check, for callers that
/// track the pairing themselves.
pub fn raw_distance(worker_p: &[Vec<f64>], z: &[f64], estimate: &LowerEstimate) -> Result<f64> {
    l1_distance(&stack_point(worker_p, z), &estimate.stacked())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_source(targets: Vec<Vec<f64>>) -> impl InnerGradSource {
        move |worker: usize, p: &[f64]| -> Result<Vec<f64>> {
            Ok(p.iter()
                .zip(&targets[worker])
                .map(|(a, b)| a - b)
                .collect())
        }
    }

    fn uniform_state(workers: usize, n: usize) -> LowerState {
        LowerState::fresh(workers, &ProbVector::uniform(n))
    }

    #[test]
    fn grads_vanish_at_consensus_fixed_point() {
        let state = uniform_state(2, 3);
        let g = lagrangian_grads(&state, 0, &[0.0; 3], 1.0).unwrap();
        assert!(g.d_p.iter().all(|&v| v == 0.0));
        assert!(g.d_z.iter().all(|&v| v == 0.0));
        assert!(g.d_rho.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grads_linear_terms() {
        // p = z + delta * 1 for every worker, rho = 0, g_grad = 0.
        let n = 4;
        let delta = 1e-10;
        let z = ProbVector::uniform(n);
        let p: Vec<f64> = z.iter().map(|v| v + delta).collect();
        let state = LowerState::new(vec![p.clone(), p], z, vec![vec![0.0; n]; 2]).unwrap();
        let g = lagrangian_grads(&state, 0, &vec![0.0; n], 1.0).unwrap();
        for i in 0..n {
            assert!((g.d_p[i] - delta).abs() < 1e-15);
            assert!((g.d_z[i] + 2.0 * delta).abs() < 1e-15);
            assert!((g.d_rho[i] - delta).abs() < 1e-15);
        }
    }

    #[test]
    fn grads_match_finite_differences() {
        // Full Lagrangian with quadratic local losses g_v(p) = |p - t_v|^2 / 2.
        let n = 3;
        let targets = [
            alloc::vec![0.9, 0.05, 0.05],
            alloc::vec![0.1, 0.8, 0.1],
        ];
        let penalty = 0.7;
        let worker_p = alloc::vec![alloc::vec![0.5, 0.3, 0.2], alloc::vec![0.2, 0.2, 0.6]];
        let duals = alloc::vec![alloc::vec![0.1, -0.2, 0.05], alloc::vec![-0.3, 0.0, 0.2]];
        let z = ProbVector::new(alloc::vec![0.4, 0.4, 0.2]).unwrap();
        let state = LowerState::new(worker_p.clone(), z.clone(), duals.clone()).unwrap();

        let full = |wp: &[Vec<f64>], zz: &[f64], rho: &[Vec<f64>]| -> f64 {
            let mut total = 0.0;
            for v in 0..2 {
                let mut g = 0.0;
                let mut dot = 0.0;
                let mut sq = 0.0;
                for i in 0..n {
                    let dt = wp[v][i] - targets[v][i];
                    g += 0.5 * dt * dt;
                    let d = wp[v][i] - zz[i];
                    dot += rho[v][i] * d;
                    sq += d * d;
                }
                total += g + dot + 0.5 * penalty * sq;
            }
            total
        };

        let g_grad: Vec<f64> = (0..n).map(|i| worker_p[0][i] - targets[0][i]).collect();
        let grads = lagrangian_grads(&state, 0, &g_grad, penalty).unwrap();
        let h = 1e-6;
        let mut max_err: f64 = 0.0;
        for i in 0..n {
            let mut hi = worker_p.clone();
            let mut lo = worker_p.clone();
            hi[0][i] += h;
            lo[0][i] -= h;
            let fd =
                (full(&hi, z.as_slice(), &duals) - full(&lo, z.as_slice(), &duals)) / (2.0 * h);
            max_err = max_err.max((fd - grads.d_p[i]).abs());

            let mut zh = z.as_slice().to_vec();
            let mut zl = z.as_slice().to_vec();
            zh[i] += h;
            zl[i] -= h;
            let fd = (full(&worker_p, &zh, &duals) - full(&worker_p, &zl, &duals)) / (2.0 * h);
            max_err = max_err.max((fd - grads.d_z[i]).abs());

            let mut rh = duals.clone();
            let mut rl = duals.clone();
            rh[0][i] += h;
            rl[0][i] -= h;
            let fd = (full(&worker_p, z.as_slice(), &rh) - full(&worker_p, z.as_slice(), &rl))
                / (2.0 * h);
            max_err = max_err.max((fd - grads.d_rho[i]).abs());
        }
        assert!(max_err <= 1e-4, "max fd error {max_err}");
    }

    #[test]
    fn worker_step_identity_without_forces() {
        let state = uniform_state(1, 3);
        let cfg = InnerConfig {
            robust_weight: 0.0,
            ..InnerConfig::default()
        };
        let p = inner_worker_step(&state, 0, &[0.0; 3], &cfg).unwrap();
        assert_eq!(p.as_slice(), state.worker_p[0].as_slice());
    }

    #[test]
    fn worker_step_sign_pull_moves_toward_consensus() {
        // Isolate the sign term with zero duals and a negligible penalty.
        let n = 4;
        let z = ProbVector::new(alloc::vec![0.4, 0.4, 0.1, 0.1]).unwrap();
        let p = alloc::vec![0.1, 0.1, 0.4, 0.4];
        let state =
            LowerState::new(alloc::vec![p.clone()], z, alloc::vec![alloc::vec![0.0; n]]).unwrap();
        let psi = 0.02;
        let eta = 0.1;
        let cfg = InnerConfig {
            steps: 1,
            penalty: 1e-12,
            robust_weight: psi,
            eta_p: eta,
            eta_z: 0.05,
            eta_rho: 0.1,
        };
        let stepped = inner_worker_step(&state, 0, &vec![0.0; n], &cfg).unwrap();
        // Each entry moves eta * psi toward z; the movement is symmetric so
        // the result is already on the simplex and projection is identity.
        for i in 0..n {
            let expect = p[i] + eta * psi * if p[i] < 0.4 { 1.0 } else { -1.0 };
            assert!(
                (stepped.get(i) - expect).abs() < 1e-9,
                "{} vs {}",
                stepped.get(i),
                expect
            );
        }
    }

    #[test]
    fn server_step_fixed_points() {
        // All received equal to z, duals summing to zero: z unchanged.
        let n = 3;
        let z = ProbVector::uniform(n);
        let duals = alloc::vec![alloc::vec![0.2, -0.1, 0.0], alloc::vec![-0.2, 0.1, 0.0]];
        let state =
            LowerState::new(alloc::vec![z.as_slice().to_vec(); 2], z.clone(), duals).unwrap();
        let cfg = InnerConfig::default();
        let received = alloc::vec![z.as_slice().to_vec(); 2];
        let (z_new, _) = inner_server_step(&state, &received, &cfg).unwrap();
        assert_eq!(z_new.as_slice(), z.as_slice());

        // Two symmetric pulls cancel.
        let e0 = 0.05;
        let mut up = z.as_slice().to_vec();
        up[0] += e0;
        up[1] -= e0;
        let mut down = z.as_slice().to_vec();
        down[0] -= e0;
        down[1] += e0;
        let state = LowerState::new(
            alloc::vec![up.clone(), down.clone()],
            z.clone(),
            alloc::vec![alloc::vec![0.0; n]; 2],
        )
        .unwrap();
        let (z_new, _) = inner_server_step(&state, &[up, down], &cfg).unwrap();
        for i in 0..n {
            assert!((z_new.get(i) - z.get(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn server_step_byzantine_displacement_bounded() {
        let n = 5;
        let z = ProbVector::uniform(n);
        let honest = z.as_slice().to_vec();
        let corner = {
            let mut c = alloc::vec![0.0; n];
            c[0] = 1.0;
            c
        };
        let workers = 4;
        let mut blocks = alloc::vec![honest.clone(); workers - 1];
        blocks.push(corner);
        let state = LowerState::new(
            blocks.clone(),
            z.clone(),
            alloc::vec![alloc::vec![0.0; n]; workers],
        )
        .unwrap();
        let cfg = InnerConfig {
            robust_weight: 0.05,
            ..InnerConfig::default()
        };
        let (z_new, _) = inner_server_step(&state, &blocks, &cfg).unwrap();
        // Projection is nonexpansive, so the L2 displacement is bounded by
        // the step length; the raw direction is bounded per component by
        // mu * max|z - p| * workers + psi * workers.
        let bound_comp = cfg.penalty * 1.0 * workers as f64 + cfg.robust_weight * workers as f64;
        let l2: f64 = z_new
            .iter()
            .zip(z.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(l2 <= cfg.eta_z * bound_comp * (n as f64).sqrt() + 1e-12);
    }

    #[test]
    fn estimate_zero_steps_returns_init() {
        let init = uniform_state(2, 3);
        let cfg = InnerConfig {
            steps: 0,
            ..InnerConfig::default()
        };
        let mut src = quadratic_source(alloc::vec![alloc::vec![0.0; 3]; 2]);
        let est =
            estimate_lower_solution(alloc::vec![alloc::vec![]; 2], init.clone(), &cfg, &mut src)
                .unwrap();
        assert_eq!(est.worker_p, init.worker_p);
        assert_eq!(est.consensus, init.consensus);
        assert_eq!(est.steps, 0);
    }

    #[test]
    fn estimate_converges_to_projected_mean_target() {
        // Three identical convex quadratics pull the consensus to the
        // projected mean of the targets.
        let n = 4;
        let targets = alloc::vec![
            alloc::vec![0.8, 0.1, 0.05, 0.05],
            alloc::vec![0.1, 0.7, 0.1, 0.1],
            alloc::vec![0.25, 0.25, 0.25, 0.25],
        ];
        let mean: Vec<f64> = (0..n)
            .map(|i| targets.iter().map(|t| t[i]).sum::<f64>() / 3.0)
            .collect();
        let expect = project_to_simplex(&mean).unwrap();

        let cfg = InnerConfig {
            steps: 500,
            ..InnerConfig::default()
        };
        let mut src = quadratic_source(targets);
        let est = estimate_lower_solution(
            alloc::vec![alloc::vec![]; 3],
            uniform_state(3, n),
            &cfg,
            &mut src,
        )
        .unwrap();
        for i in 0..n {
            assert!(
                (est.consensus.get(i) - expect.get(i)).abs() <= 1e-2,
                "z[{i}] = {} vs {}",
                est.consensus.get(i),
                expect.get(i)
            );
        }
        // Consensus residual: every worker block close to z in L1.
        for block in &est.worker_p {
            let r = l1_distance(block, est.consensus.as_slice()).unwrap();
            assert!(r <= 1e-3, "residual {r}");
        }
    }

    #[test]
    fn lagrangian_trace_nonincreasing_after_burn_in() {
        // Identical convex quadratics: the duals transit back to zero, so
        // the dual-ascent bump stays inside the tolerance once the chase
        // rates are balanced.
        let n = 4;
        let target = alloc::vec![0.6, 0.2, 0.15, 0.05];
        let targets = alloc::vec![target.clone(), target.clone(), target];
        let cfg = InnerConfig {
            steps: 1,
            eta_z: 0.2,
            eta_rho: 0.01,
            ..InnerConfig::default()
        };
        let mut state = uniform_state(3, n);
        let g_value = |state: &LowerState| -> Vec<f64> {
            state
                .worker_p
                .iter()
                .zip(&targets)
                .map(|(p, t)| {
                    p.iter()
                        .zip(t)
                        .map(|(a, b)| 0.5 * (a - b) * (a - b))
                        .sum::<f64>()
                })
                .collect()
        };
        let mut trace = alloc::vec![lagrangian_value(&state, &g_value(&state), cfg.penalty)];
        for _ in 0..500 {
            let mut fresh = Vec::new();
            for v in 0..3 {
                let g: Vec<f64> = state.worker_p[v]
                    .iter()
                    .zip(&targets[v])
                    .map(|(a, b)| a - b)
                    .collect();
                fresh.push(inner_worker_step(&state, v, &g, &cfg).unwrap().into_vec());
            }
            let (z, duals) = inner_server_step(&state, &fresh, &cfg).unwrap();
            state.worker_p = fresh;
            state.consensus = z;
            state.duals = duals;
            trace.push(lagrangian_value(&state, &g_value(&state), cfg.penalty));
        }
        for w in trace.windows(2).skip(10) {
            assert!(
                w[1] <= w[0] + 1e-6,
                "lagrangian rose from {} to {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn distance_checks_and_adds_up() {
        let est = LowerEstimate {
            worker_p: alloc::vec![alloc::vec![0.5, 0.5]],
            consensus: ProbVector::new(alloc::vec![0.5, 0.5]).unwrap(),
            demos_used: alloc::vec![alloc::vec![1, 0]],
            steps: 3,
        };
        let same = solution_distance(
            &[alloc::vec![1, 0]],
            &est.worker_p,
            est.consensus.as_slice(),
            &est,
        )
        .unwrap();
        assert_eq!(same, 0.0);

        // One consensus coordinate off by +0.1 (pre-normalization vector).
        let z_off = alloc::vec![0.6, 0.5];
        let d = solution_distance(&[alloc::vec![1, 0]], &est.worker_p, &z_off, &est).unwrap();
        assert!((d - 0.1).abs() < 1e-15);

        assert!(matches!(
            solution_distance(&[alloc::vec![0, 0]], &est.worker_p, &z_off, &est),
            Err(Error::DemoMismatch)
        ));

        // Block additivity: distance equals the sum of per-block L1 terms.
        let wp = alloc::vec![alloc::vec![0.7, 0.3]];
        let z = alloc::vec![0.45, 0.55];
        let total = raw_distance(&wp, &z, &est).unwrap();
        let per_block = l1_distance(&wp[0], &est.worker_p[0]).unwrap()
            + l1_distance(&z, est.consensus.as_slice()).unwrap();
        assert!((total - per_block).abs() < 1e-15);
    }
}

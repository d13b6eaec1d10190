//! Deterministic event-driven simulation of the asynchronous tuner.
//!
//! One totally ordered loop owns the timeline. Per iteration the server
//! forms the reachable worker set (network availability plus forced
//! inclusion of over-stale workers), collects the updates those workers
//! computed against their possibly stale snapshots, folds them in, and at
//! every refresh checkpoint re-estimates the lower-level solution, prunes
//! weak planes and cuts the current point off if it violates the
//! relaxation.
//!
//! Determinism: every actor draws from its own stream derived from the
//! master seed (`worker v`, `avail v`, `latency v`, `byz v`, ...), so a run
//! is a pure function of `(config, seed)` and paired scenarios (for example
//! with and without an attacker) keep benign draws identical.
//!
//! Byzantine senders participate in reachability, latency and staleness
//! bookkeeping like anyone else; only their message content is adversarial.
//! Worker indices `0..n_benign` are benign, the rest malicious, and the
//! server never looks at the split.

use alloc::boxed::Box;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::federated::{
    decode_solution, sanitize_block, server_step, worker_step, GradMode, OuterConfig,
    ServerSnapshot, ServerState, WorkerState, WorkerUpdateMsg,
};
use crate::lower::{inner_server_step, inner_worker_step, InnerConfig, LowerEstimate};
use crate::oracle::{
    enumerate_optimum, exact_expected_loss, exact_token_gradients_fixed_demos,
    reinforce_token_gradients_fixed_demos, sample_assignment, DiscreteAssignment, LossOracle,
    ProblemShape,
};
use crate::planes::{dual_sums, generate_plane, prune, DualWindow};
use crate::rng::DetRng;
use crate::simplex::{l1_distance, project_to_simplex, sample_categorical, ProbVector};

/// Network availability model.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "model", rename_all = "kebab-case"))]
pub enum Reachability {
    /// Independent per-worker, per-round coin with the given probability.
    Bernoulli { probability: f64 },
    /// Explicit per-round worker sets, cycled.
    Schedule { rounds: Vec<Vec<usize>> },
}

impl Default for Reachability {
    fn default() -> Self {
        Reachability::Bernoulli { probability: 0.8 }
    }
}

/// Simulated cost of one local computation.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "model", rename_all = "kebab-case"))]
pub enum LatencyModel {
    Fixed { cost: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl LatencyModel {
    fn draw(&self, rng: &mut DetRng) -> f64 {
        match *self {
            LatencyModel::Fixed { cost } => cost,
            LatencyModel::Uniform { lo, hi } => rng.uniform(lo, hi),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LatencyModel::Fixed { cost } => cost.is_finite() && cost > 0.0,
            LatencyModel::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam {
                name: "latency",
                reason: "costs must be finite and positive",
            })
        }
    }
}

/// Message-content behavior of a malicious worker.
///
/// Malicious workers participate like anyone else (they hold data, draw
/// latency and availability, and count toward staleness); only what they
/// put on the wire is adversarial.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "kebab-case"))]
pub enum ByzantineMode {
    /// Computes an honest update like a benign worker, then sends its
    /// reflection through the consensus, `2 z - p`, clamped to the unit
    /// box: it reports the opposite of its own progress.
    SignFlip,
    /// Sends a fresh random simplex point every time.
    RandomSimplex,
    /// Always sends the same one-hot corner.
    FixedCorner { index: usize },
    /// Resends its first (uniform) message forever.
    StaleReplay,
}

/// How demonstration realizations are picked for lower-level estimation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum DemoRule {
    /// One draw per worker from that worker's current demo distributions.
    Sample,
    /// Per-worker argmax instead of a draw.
    Mode,
}

/// Simulation topology and schedule parameters.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SimConfig {
    pub n_benign: usize,
    pub n_byzantine: usize,
    /// Max rounds a worker may go between syncs; the server waits for a
    /// worker about to exceed it.
    pub max_staleness: u64,
    /// Lower-level re-estimation and polyhedron refresh period, in rounds.
    pub refresh_period: u64,
    /// Dual-mass threshold under which planes are pruned; zero disables
    /// pruning (duals are never negative).
    pub prune_threshold: f64,
    /// Relaxation width of the lower-level feasibility set.
    pub epsilon: f64,
    pub reachability: Reachability,
    /// Per-worker latency models; empty means unit cost for everyone.
    #[cfg_attr(feature = "serde", serde(default))]
    pub latency: Vec<LatencyModel>,
    /// One entry per malicious worker.
    #[cfg_attr(feature = "serde", serde(default))]
    pub byzantine: Vec<ByzantineMode>,
    pub demo_rule: DemoRule,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_benign: 3,
            n_byzantine: 0,
            max_staleness: 5,
            refresh_period: 10,
            prune_threshold: 1e-3,
            epsilon: 0.05,
            reachability: Reachability::default(),
            latency: Vec::new(),
            byzantine: Vec::new(),
            demo_rule: DemoRule::Sample,
        }
    }
}

impl SimConfig {
    pub fn workers(&self) -> usize {
        self.n_benign + self.n_byzantine
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_benign == 0 {
            return Err(Error::InvalidParam {
                name: "n_benign",
                reason: "need at least one benign worker",
            });
        }
        if self.max_staleness == 0 {
            return Err(Error::InvalidParam {
                name: "max_staleness",
                reason: "must be >= 1",
            });
        }
        if self.refresh_period == 0 {
            return Err(Error::InvalidParam {
                name: "refresh_period",
                reason: "must be >= 1",
            });
        }
        if !(self.prune_threshold >= 0.0) || !self.prune_threshold.is_finite() {
            return Err(Error::InvalidParam {
                name: "prune_threshold",
                reason: "must be finite and >= 0",
            });
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidParam {
                name: "epsilon",
                reason: "must be finite and > 0",
            });
        }
        if self.byzantine.len() != self.n_byzantine {
            return Err(Error::LengthMismatch {
                expected: self.n_byzantine,
                got: self.byzantine.len(),
            });
        }
        if !self.latency.is_empty() && self.latency.len() != self.workers() {
            return Err(Error::LengthMismatch {
                expected: self.workers(),
                got: self.latency.len(),
            });
        }
        for l in &self.latency {
            l.validate()?;
        }
        match &self.reachability {
            Reachability::Bernoulli { probability } => {
                if !(0.0..=1.0).contains(probability) {
                    return Err(Error::InvalidParam {
                        name: "reachability.probability",
                        reason: "must lie in [0, 1]",
                    });
                }
            }
            Reachability::Schedule { rounds } => {
                if rounds.is_empty() {
                    return Err(Error::InvalidParam {
                        name: "reachability.rounds",
                        reason: "schedule must be non-empty",
                    });
                }
                for set in rounds {
                    for &v in set {
                        if v >= self.workers() {
                            return Err(Error::IndexOutOfBounds {
                                kind: "worker",
                                slot: 0,
                                index: v,
                                bound: self.workers(),
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn latency_model(&self, worker: usize) -> LatencyModel {
        self.latency
            .get(worker)
            .cloned()
            .unwrap_or(LatencyModel::Fixed { cost: 1.0 })
    }
}

/// Budget and stopping rules for one run.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunOptions {
    pub max_iters: u64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub early_stop: Option<EarlyStop>,
    /// Sample count for the loss metric when exact enumeration is infeasible.
    pub mc_loss_samples: usize,
    /// Emit plane add/remove events into the trace.
    pub record_planes: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            max_iters: 500,
            early_stop: Some(EarlyStop::default()),
            mc_loss_samples: 256,
            record_planes: true,
        }
    }
}

/// Stop when the best observed loss has not improved by `min_delta` for
/// `patience_periods` consecutive refresh checkpoints.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EarlyStop {
    pub min_delta: f64,
    pub patience_periods: u64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            min_delta: 1e-4,
            patience_periods: 50,
        }
    }
}

/// Per-iteration metrics.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IterationRecord {
    pub iteration: u64,
    pub clock: f64,
    pub reachable: Vec<usize>,
    /// Mean expected loss across benign workers (exact when enumerable).
    pub loss: f64,
    pub loss_is_exact: bool,
    /// Per slot: sum over benign workers of the L1 gap to the consensus.
    /// Empty in centralized mode, which has no consensus.
    pub consensus_residual: Vec<f64>,
    pub active_planes: usize,
    /// Per worker, rounds since its last sync, at round start.
    pub staleness: Vec<u64>,
    /// Fraction of benign workers whose decoded assignment attains the
    /// enumerated optimum; absent when enumeration is infeasible.
    pub decode_match: Option<f64>,
}

/// A plane serialized into the trace when it is created.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlaneRecord {
    pub iteration: u64,
    pub id: u64,
    pub slot: usize,
    pub worker_coeffs: Vec<Vec<f64>>,
    pub consensus_coeffs: Vec<f64>,
    pub offset: f64,
    pub dual: f64,
    pub created_at: u64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "type", rename_all = "snake_case"))]
pub enum TraceEvent {
    Iteration(IterationRecord),
    PlaneAdded(PlaneRecord),
    PlanesRemoved { iteration: u64, ids: Vec<u64> },
    PlaneEvicted { iteration: u64, slot: usize, id: u64 },
    EvaluatorSkipped { iteration: u64, worker_id: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StopReason {
    IterationBudget,
    EarlyStop,
}

/// Full record of one deterministic run.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Trace {
    pub seed: u64,
    pub mode: String,
    pub events: Vec<TraceEvent>,
    pub iterations: u64,
    pub final_clock: f64,
    pub final_loss: f64,
    pub stop: StopReason,
    /// Final consensus blocks, one per slot (empty in centralized mode).
    pub final_consensus: Vec<Vec<f64>>,
    /// Decoded assignment per benign worker.
    pub decoded: Vec<DiscreteAssignment>,
}

impl Trace {
    pub fn iteration_records(&self) -> impl Iterator<Item = &IterationRecord> {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Iteration(r) => Some(r),
            _ => None,
        })
    }
}

/// Close time of a round: the latest completion among the committed workers,
/// never before the current clock.
pub fn advance_clock(current: f64, finish_times: &[f64]) -> f64 {
    finish_times.iter().fold(current, |acc, &t| acc.max(t))
}

/// Reachable set for one round.
///
/// Starts from the network-available workers whose computation fits the
/// round, adds every worker whose staleness would otherwise exceed the
/// bound (the server waits for those), and falls back to the single most
/// stale worker (lowest index on ties) when nothing else is available.
/// Returns the sorted set and the round's close time.
pub fn form_reachable_set(
    available: &[bool],
    staleness: &[u64],
    finish: &[f64],
    now: f64,
    max_staleness: u64,
) -> (Vec<usize>, f64) {
    let workers = available.len();
    let forced: Vec<usize> = (0..workers)
        .filter(|&v| staleness[v] + 1 >= max_staleness)
        .collect();
    let mut close = now;
    let mut set: Vec<usize>;
    if !forced.is_empty() {
        for &v in &forced {
            close = close.max(finish[v]);
        }
        set = forced;
        for v in 0..workers {
            if available[v] && finish[v] <= close && !set.contains(&v) {
                set.push(v);
            }
        }
    } else {
        let earliest = (0..workers)
            .filter(|&v| available[v])
            .map(|v| finish[v])
            .fold(f64::INFINITY, f64::min);
        if earliest.is_finite() {
            close = close.max(earliest);
            set = (0..workers)
                .filter(|&v| available[v] && finish[v] <= close)
                .collect();
        } else {
            // Nobody reachable: admit the most stale worker and wait for it.
            let pick = (0..workers).max_by_key(|&v| (staleness[v], usize::MAX - v)).unwrap();
            close = close.max(finish[pick]);
            set = vec![pick];
        }
    }
    set.sort_unstable();
    set.dedup();
    (set, close)
}

struct WorkerRun {
    state: WorkerState,
    snapshot: Rc<ServerSnapshot>,
    finish: f64,
    staleness: u64,
    /// First message blocks, one per slot (replayed by `StaleReplay`).
    first_sent: Vec<Vec<f64>>,
    byz_rng: DetRng,
}

/// Reflection of `honest` through `z`, clamped to the unit box.
fn reflect_block(z: &[f64], honest: &[f64]) -> Vec<f64> {
    sanitize_block(
        &z.iter()
            .zip(honest)
            .map(|(zi, pi)| 2.0 * zi - pi)
            .collect::<Vec<f64>>(),
    )
}

fn random_simplex_block(n: usize, rng: &mut DetRng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.uniform01() + 1e-9).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Asynchronous run of the full tuner.
///
/// `evaluators` holds one loss oracle per benign worker, in worker order.
pub fn run(
    sim: &SimConfig,
    inner: &InnerConfig,
    outer: &OuterConfig,
    shape: &ProblemShape,
    evaluators: &mut [Box<dyn LossOracle>],
    opts: &RunOptions,
    seed: u64,
) -> Result<Trace> {
    run_engine(sim, inner, outer, shape, evaluators, opts, seed, false)
}

/// Synchronous reference execution: every worker participates in every
/// round against the current state, and each round costs the slowest
/// worker's completion time.
pub fn run_synchronous(
    sim: &SimConfig,
    inner: &InnerConfig,
    outer: &OuterConfig,
    shape: &ProblemShape,
    evaluators: &mut [Box<dyn LossOracle>],
    opts: &RunOptions,
    seed: u64,
) -> Result<Trace> {
    run_engine(sim, inner, outer, shape, evaluators, opts, seed, true)
}

#[allow(clippy::too_many_arguments)]
fn run_engine(
    sim: &SimConfig,
    inner: &InnerConfig,
    outer: &OuterConfig,
    shape: &ProblemShape,
    evaluators: &mut [Box<dyn LossOracle>],
    opts: &RunOptions,
    seed: u64,
    synchronous: bool,
) -> Result<Trace> {
    sim.validate()?;
    inner.validate()?;
    outer.validate()?;
    shape.validate()?;
    // Every worker holds local data: sign-flip attackers compute honest
    // updates before corrupting them.
    if evaluators.len() != sim.workers() {
        return Err(Error::LengthMismatch {
            expected: sim.workers(),
            got: evaluators.len(),
        });
    }
    for mode in &sim.byzantine {
        if let ByzantineMode::FixedCorner { index } = mode {
            if *index >= shape.vocab {
                return Err(Error::IndexOutOfBounds {
                    kind: "token",
                    slot: 0,
                    index: *index,
                    bound: shape.vocab,
                });
            }
        }
    }

    let workers = sim.workers();
    let mut server = ServerState::fresh(
        workers,
        shape.tokens,
        shape.vocab,
        shape.demo_slots,
        shape.demos_per_slot,
        sim.epsilon,
    )?;
    let snapshot0 = Rc::new(server.snapshot());
    let uniform_p = ProbVector::uniform(shape.vocab);
    let mut latency_rngs: Vec<DetRng> = (0..workers)
        .map(|v| DetRng::stream(seed, "latency", v as u64))
        .collect();
    let mut runs: Vec<WorkerRun> = (0..workers)
        .map(|v| WorkerRun {
            state: WorkerState::fresh(
                v,
                shape.tokens,
                shape.vocab,
                shape.demo_slots,
                shape.demos_per_slot,
                DetRng::stream(seed, "worker", v as u64),
            ),
            snapshot: Rc::clone(&snapshot0),
            finish: sim.latency_model(v).draw(&mut latency_rngs[v]),
            staleness: 0,
            first_sent: vec![uniform_p.as_slice().to_vec(); shape.tokens],
            byz_rng: DetRng::stream(seed, "byz", v as u64),
        })
        .collect();
    let mut avail_rngs: Vec<DetRng> = (0..workers)
        .map(|v| DetRng::stream(seed, "avail", v as u64))
        .collect();
    let mut phi_demo_rngs: Vec<DetRng> = (0..workers)
        .map(|v| DetRng::stream(seed, "phi-demos", v as u64))
        .collect();
    let mut phi_grad_rngs: Vec<DetRng> = (0..workers)
        .map(|v| DetRng::stream(seed, "phi-grad", v as u64))
        .collect();
    let mut mc_rng = DetRng::stream(seed, "mc-loss", 0);

    let exact_feasible = shape.enumeration_feasible();
    let optima: Option<Vec<f64>> = if exact_feasible {
        let mut o = Vec::with_capacity(evaluators.len());
        for ev in evaluators.iter_mut() {
            o.push(enumerate_optimum(ev.as_mut())?.1);
        }
        Some(o)
    } else {
        None
    };

    let mut events: Vec<TraceEvent> = Vec::new();
    let mut clock = 0.0_f64;
    let mut window = DualWindow::default();
    let mut next_plane_id: u64 = 0;
    let mut best_loss = f64::INFINITY;
    let mut stale_periods: u64 = 0;
    let mut stop = StopReason::IterationBudget;
    let mut iterations_run = 0;

    for k in 0..opts.max_iters {
        // Reachable set for this round.
        let available: Vec<bool> = match &sim.reachability {
            Reachability::Bernoulli { probability } => (0..workers)
                .map(|v| avail_rngs[v].bernoulli(*probability))
                .collect(),
            Reachability::Schedule { rounds } => {
                let set = &rounds[(k % rounds.len() as u64) as usize];
                (0..workers).map(|v| set.contains(&v)).collect()
            }
        };
        let staleness_now: Vec<u64> = runs.iter().map(|r| r.staleness).collect();
        let finishes: Vec<f64> = runs.iter().map(|r| r.finish).collect();
        let (reachable, close) = if synchronous {
            ((0..workers).collect(), advance_clock(clock, &finishes))
        } else if matches!(sim.reachability, Reachability::Schedule { .. }) {
            let mut set: Vec<usize> = (0..workers)
                .filter(|&v| available[v] || staleness_now[v] + 1 >= sim.max_staleness)
                .collect();
            if set.is_empty() {
                set.push(
                    (0..workers)
                        .max_by_key(|&v| (staleness_now[v], usize::MAX - v))
                        .unwrap(),
                );
            }
            let waits: Vec<f64> = set.iter().map(|&v| runs[v].finish).collect();
            (set, advance_clock(clock, &waits))
        } else {
            form_reachable_set(&available, &staleness_now, &finishes, clock, sim.max_staleness)
        };
        clock = close;

        // Deliveries: honest updates are computed against each worker's own
        // snapshot; malicious ones fabricate blocks.
        let mut updates: Vec<WorkerUpdateMsg> = Vec::with_capacity(reachable.len());
        for &v in &reachable {
            if v < sim.n_benign {
                let run = &mut runs[v];
                match worker_step(
                    &mut run.state,
                    &run.snapshot,
                    evaluators[v].as_mut(),
                    outer,
                    k,
                ) {
                    Ok(msg) => updates.push(msg),
                    Err(Error::Transport { .. }) => {
                        // Evaluator failure skips this worker's round.
                        events.push(TraceEvent::EvaluatorSkipped {
                            iteration: k,
                            worker_id: v,
                        });
                    }
                    Err(e) => return Err(e),
                }
            } else {
                let mode = sim.byzantine[v - sim.n_benign].clone();
                let run = &mut runs[v];
                let p: Vec<Vec<f64>> = match &mode {
                    ByzantineMode::SignFlip => {
                        // Honest shadow step on its own data, then lie.
                        let _ = worker_step(
                            &mut run.state,
                            &run.snapshot,
                            evaluators[v].as_mut(),
                            outer,
                            k,
                        )?;
                        run.snapshot
                            .consensus
                            .iter()
                            .zip(&run.state.p)
                            .map(|(z, p)| reflect_block(z.as_slice(), p.as_slice()))
                            .collect()
                    }
                    ByzantineMode::RandomSimplex => (0..shape.tokens)
                        .map(|_| random_simplex_block(shape.vocab, &mut run.byz_rng))
                        .collect(),
                    ByzantineMode::FixedCorner { index } => (0..shape.tokens)
                        .map(|_| {
                            let mut block = vec![0.0; shape.vocab];
                            block[(*index).min(shape.vocab - 1)] = 1.0;
                            block
                        })
                        .collect(),
                    ByzantineMode::StaleReplay => run.first_sent.clone(),
                };
                let q: Vec<Vec<f64>> =
                    run.state.q.iter().map(|x| x.as_slice().to_vec()).collect();
                updates.push(WorkerUpdateMsg {
                    worker_id: v,
                    iteration: k,
                    p,
                    q,
                });
            }
        }
        server_step(&mut server, &updates, outer)?;

        // Refresh checkpoint: re-estimate the lower-level solution, prune,
        // and cut off the current point where it violates the relaxation.
        if (k + 1) % sim.refresh_period == 0 {
            refresh_polyhedra(
                sim,
                inner,
                outer,
                shape,
                evaluators,
                &mut server,
                &mut runs,
                &mut phi_demo_rngs,
                &mut phi_grad_rngs,
                &mut window,
                &mut next_plane_id,
                k,
                opts.record_planes,
                &mut events,
            )?;
        }

        // Broadcast to this round's participants.
        let snapshot = Rc::new(server.snapshot());
        for v in 0..workers {
            if reachable.contains(&v) {
                let run = &mut runs[v];
                run.snapshot = Rc::clone(&snapshot);
                run.staleness = 0;
                run.state.last_sync = k;
                run.finish = clock + sim.latency_model(v).draw(&mut latency_rngs[v]);
            } else {
                runs[v].staleness += 1;
            }
        }

        // Metrics.
        let (loss, loss_is_exact) = mean_benign_loss(
            sim,
            evaluators,
            &runs,
            exact_feasible,
            opts.mc_loss_samples,
            &mut mc_rng,
        )?;
        let decode_match = optima.as_ref().map(|opt| {
            let mut hits = 0usize;
            for v in 0..sim.n_benign {
                let a = decode_solution(&runs[v].state);
                let l = evaluators[v].evaluate(&a).expect("decoded in bounds");
                if l <= opt[v] + 1e-12 {
                    hits += 1;
                }
            }
            hits as f64 / sim.n_benign as f64
        });
        let residual: Vec<f64> = (0..shape.tokens)
            .map(|slot| {
                (0..sim.n_benign)
                    .map(|v| {
                        l1_distance(
                            runs[v].state.p[slot].as_slice(),
                            server.consensus[slot].as_slice(),
                        )
                        .expect("dims match")
                    })
                    .sum()
            })
            .collect();
        events.push(TraceEvent::Iteration(IterationRecord {
            iteration: k,
            clock,
            reachable: reachable.clone(),
            loss,
            loss_is_exact,
            consensus_residual: residual,
            active_planes: server.active_planes(),
            staleness: staleness_now,
            decode_match,
        }));
        iterations_run = k + 1;

        // Early stopping, evaluated at refresh checkpoints.
        if (k + 1) % sim.refresh_period == 0 {
            if let Some(es) = &opts.early_stop {
                if loss < best_loss - es.min_delta {
                    stale_periods = 0;
                } else {
                    stale_periods += 1;
                }
                if loss < best_loss {
                    best_loss = loss;
                }
                if stale_periods >= es.patience_periods {
                    stop = StopReason::EarlyStop;
                    break;
                }
            }
        } else if loss < best_loss {
            best_loss = loss;
        }
    }

    let final_loss = events
        .iter()
        .rev()
        .find_map(|e| match e {
            TraceEvent::Iteration(r) => Some(r.loss),
            _ => None,
        })
        .unwrap_or(f64::INFINITY);
    Ok(Trace {
        seed,
        mode: if synchronous {
            String::from("sync")
        } else {
            String::from("asyn")
        },
        events,
        iterations: iterations_run,
        final_clock: clock,
        final_loss,
        stop,
        final_consensus: server
            .consensus
            .iter()
            .map(|z| z.as_slice().to_vec())
            .collect(),
        decoded: (0..sim.n_benign)
            .map(|v| decode_solution(&runs[v].state))
            .collect(),
    })
}

#[allow(clippy::too_many_arguments)]
fn refresh_polyhedra(
    sim: &SimConfig,
    inner: &InnerConfig,
    outer: &OuterConfig,
    shape: &ProblemShape,
    evaluators: &mut [Box<dyn LossOracle>],
    server: &mut ServerState,
    runs: &mut [WorkerRun],
    phi_demo_rngs: &mut [DetRng],
    phi_grad_rngs: &mut [DetRng],
    window: &mut DualWindow,
    next_plane_id: &mut u64,
    iteration: u64,
    record_planes: bool,
    events: &mut Vec<TraceEvent>,
) -> Result<()> {
    let workers = sim.workers();
    // Demonstration realization: one per worker from its current q.
    let mut demos: Vec<Vec<usize>> = Vec::with_capacity(workers);
    for v in 0..workers {
        let d: Vec<usize> = match sim.demo_rule {
            DemoRule::Sample => runs[v]
                .state
                .q
                .iter()
                .map(|q| sample_categorical(q, &mut phi_demo_rngs[v]))
                .collect(),
            DemoRule::Mode => runs[v].state.q.iter().map(|q| q.argmax()).collect(),
        };
        demos.push(d);
    }

    // K inner rounds per slot, warm-started from the persisted inner state.
    let mut estimates: Vec<LowerEstimate> = Vec::with_capacity(shape.tokens);
    for slot in 0..shape.tokens {
        let mut state = server.inner_states[slot].clone();
        for _ in 0..inner.steps {
            let mut fresh: Vec<Vec<f64>> = Vec::with_capacity(workers);
            for v in 0..workers {
                if v < sim.n_benign {
                    // Mixed point: this slot at the inner block, the other
                    // slots at the worker's current local distributions.
                    let mut p_mix: Vec<ProbVector> = runs[v].state.p.clone();
                    p_mix[slot] = project_to_simplex(&state.worker_p[v])?;
                    let grad_rows = match outer.grad {
                        GradMode::Reinforce {
                            samples,
                            baseline,
                            p_min,
                        } => reinforce_token_gradients_fixed_demos(
                            &p_mix,
                            &demos[v],
                            evaluators[v].as_mut(),
                            samples,
                            &mut phi_grad_rngs[v],
                            baseline,
                            p_min,
                        )?,
                        GradMode::Exact => exact_token_gradients_fixed_demos(
                            &p_mix,
                            &demos[v],
                            evaluators[v].as_mut(),
                        )?,
                    };
                    fresh.push(
                        inner_worker_step(&state, v, &grad_rows[slot], inner)?.into_vec(),
                    );
                } else {
                    let mode = &sim.byzantine[v - sim.n_benign];
                    let mut prev = vec![runs[v].prev_sent[slot].clone()];
                    let consensus = vec![state.consensus.clone()];
                    let block =
                        byz_message(mode, &consensus, &mut prev, &mut runs[v].byz_rng)
                            .pop()
                            .unwrap();
                    fresh.push(sanitize_block(&block));
                }
            }
            let (z, duals) = inner_server_step(&state, &fresh, inner)?;
            state.worker_p = fresh;
            state.consensus = z;
            state.duals = duals;
        }
        estimates.push(LowerEstimate {
            worker_p: state.worker_p.clone(),
            consensus: state.consensus.clone(),
            demos_used: demos.clone(),
            steps: inner.steps,
        });
        server.inner_states[slot] = state;
    }

    // Prune on the two-checkpoint dual window, then add new planes.
    window.record(dual_sums(&server.polyhedra));
    let removed = prune(&mut server.polyhedra, sim.prune_threshold, window);
    if record_planes && !removed.is_empty() {
        events.push(TraceEvent::PlanesRemoved {
            iteration,
            ids: removed,
        });
    }

    let mut spawned = false;
    for slot in 0..shape.tokens {
        let blocks = server.slot_blocks(slot);
        let z = server.consensus[slot].as_slice().to_vec();
        match generate_plane(
            &estimates[slot],
            &blocks,
            &z,
            sim.epsilon,
            *next_plane_id,
            slot,
            iteration,
        ) {
            Ok(plane) => {
                let record = PlaneRecord {
                    iteration,
                    id: plane.id,
                    slot,
                    worker_coeffs: plane.worker_coeffs.clone(),
                    consensus_coeffs: plane.consensus_coeffs.clone(),
                    offset: plane.offset,
                    dual: plane.dual,
                    created_at: plane.created_at,
                };
                let evicted = server.polyhedra[slot].push(plane)?;
                spawned = true;
                if record_planes {
                    events.push(TraceEvent::PlaneAdded(record));
                    if let Some(id) = evicted {
                        events.push(TraceEvent::PlaneEvicted {
                            iteration,
                            slot,
                            id,
                        });
                    }
                }
            }
            Err(Error::PointFeasible { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if spawned {
        *next_plane_id += 1;
    }
    Ok(())
}

fn mean_benign_loss(
    sim: &SimConfig,
    evaluators: &mut [Box<dyn LossOracle>],
    runs: &[WorkerRun],
    exact: bool,
    mc_samples: usize,
    mc_rng: &mut DetRng,
) -> Result<(f64, bool)> {
    let mut total = 0.0;
    for v in 0..sim.n_benign {
        let w = &runs[v].state;
        if exact {
            total += exact_expected_loss(&w.p, &w.q, evaluators[v].as_mut())?;
        } else {
            let mut acc = 0.0;
            for _ in 0..mc_samples.max(1) {
                let a = sample_assignment(&w.p, &w.q, mc_rng);
                acc += evaluators[v].evaluate(&a)?;
            }
            total += acc / mc_samples.max(1) as f64;
        }
    }
    Ok((total / sim.n_benign as f64, exact))
}

/// Centralized reference variant: a single location optimizes `p` and `q`
/// with projected gradient steps; no consensus variables, no planes.
pub fn run_centralized(
    shape: &ProblemShape,
    evaluator: &mut dyn LossOracle,
    outer: &OuterConfig,
    refresh_period: u64,
    opts: &RunOptions,
    seed: u64,
) -> Result<Trace> {
    shape.validate()?;
    outer.validate()?;
    if refresh_period == 0 {
        return Err(Error::InvalidParam {
            name: "refresh_period",
            reason: "must be >= 1",
        });
    }
    let mut w = WorkerState::fresh(
        0,
        shape.tokens,
        shape.vocab,
        shape.demo_slots,
        shape.demos_per_slot,
        DetRng::stream(seed, "worker", 0),
    );
    let mut latency_rng = DetRng::stream(seed, "latency", 0);
    let mut mc_rng = DetRng::stream(seed, "mc-loss", 0);
    let exact_feasible = shape.enumeration_feasible();
    let optimum = if exact_feasible {
        Some(enumerate_optimum(evaluator)?.1)
    } else {
        None
    };
    // A snapshot with no planes and a throwaway consensus: the plane and
    // sign pulls vanish, leaving plain projected descent.
    let snapshot = ServerSnapshot {
        iteration: 0,
        consensus: (0..shape.tokens)
            .map(|_| ProbVector::uniform(shape.vocab))
            .collect(),
        polyhedra: (0..shape.tokens)
            .map(|slot| crate::planes::Polyhedron::new(slot, 1.0).unwrap())
            .collect(),
    };
    let cfg = OuterConfig {
        robust_weight: 0.0,
        ..outer.clone()
    };

    let mut events = Vec::new();
    let mut clock = 0.0;
    let mut best_loss = f64::INFINITY;
    let mut stale_periods = 0u64;
    let mut stop = StopReason::IterationBudget;
    let mut iterations_run = 0;
    for k in 0..opts.max_iters {
        worker_step(&mut w, &snapshot, evaluator, &cfg, k)?;
        clock += LatencyModel::Fixed { cost: 1.0 }.draw(&mut latency_rng);
        let (loss, loss_is_exact) = if exact_feasible {
            (exact_expected_loss(&w.p, &w.q, evaluator)?, true)
        } else {
            let mut acc = 0.0;
            for _ in 0..opts.mc_loss_samples.max(1) {
                let a = sample_assignment(&w.p, &w.q, &mut mc_rng);
                acc += evaluator.evaluate(&a)?;
            }
            (acc / opts.mc_loss_samples.max(1) as f64, false)
        };
        let decode_match = optimum.map(|opt| {
            let a = decode_solution(&w);
            let l = evaluator.evaluate(&a).expect("decoded in bounds");
            if l <= opt + 1e-12 {
                1.0
            } else {
                0.0
            }
        });
        events.push(TraceEvent::Iteration(IterationRecord {
            iteration: k,
            clock,
            reachable: vec![0],
            loss,
            loss_is_exact,
            consensus_residual: Vec::new(),
            active_planes: 0,
            staleness: vec![0],
            decode_match,
        }));
        iterations_run = k + 1;
        if (k + 1) % refresh_period == 0 {
            if let Some(es) = &opts.early_stop {
                if loss < best_loss - es.min_delta {
                    stale_periods = 0;
                } else {
                    stale_periods += 1;
                }
                if loss < best_loss {
                    best_loss = loss;
                }
                if stale_periods >= es.patience_periods {
                    stop = StopReason::EarlyStop;
                    break;
                }
            }
        } else if loss < best_loss {
            best_loss = loss;
        }
    }
    let final_loss = events
        .iter()
        .rev()
        .find_map(|e| match e {
            TraceEvent::Iteration(r) => Some(r.loss),
            _ => None,
        })
        .unwrap_or(f64::INFINITY);
    Ok(Trace {
        seed,
        mode: String::from("cen"),
        events,
        iterations: iterations_run,
        final_clock: clock,
        final_loss,
        stop,
        final_consensus: Vec::new(),
        decoded: vec![decode_solution(&w)],
    })
}

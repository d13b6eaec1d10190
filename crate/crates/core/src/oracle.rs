//! Black-box loss evaluation and gradient estimation.
//!
//! The tuner only ever sees losses through [`LossOracle::evaluate`]; the
//! enumeration routines ([`exact_expected_loss`], [`exact_gradients`]) double
//! as test oracles for the score-function estimator
//! ([`reinforce_gradients`]), which is the gradient source used in actual
//! runs.

pub mod prompt;

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::simplex::{sample_categorical, ProbVector};

/// Largest assignment space the enumeration oracles will walk.
pub const ENUM_LIMIT: u64 = 1_000_000;

/// Dimensions of one tuning problem: `tokens` fragment slots over a
/// `vocab`-word vocabulary, and one demonstration slot per class
/// (`demo_slots`, each choosing among `demos_per_slot` candidates).
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProblemShape {
    pub tokens: usize,
    pub vocab: usize,
    pub demo_slots: usize,
    pub demos_per_slot: usize,
}

impl ProblemShape {
    /// `demo_slots` may be zero (pure prompt-fragment tuning); the other
    /// dimensions must be at least one.
    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 {
            return Err(Error::InvalidParam {
                name: "tokens",
                reason: "must be >= 1",
            });
        }
        if self.vocab == 0 {
            return Err(Error::InvalidParam {
                name: "vocab",
                reason: "must be >= 1",
            });
        }
        if self.demo_slots > 0 && self.demos_per_slot == 0 {
            return Err(Error::InvalidParam {
                name: "demos_per_slot",
                reason: "must be >= 1 when demo slots exist",
            });
        }
        Ok(())
    }

    /// Number of discrete assignments `vocab^tokens * demos_per_slot^demo_slots`.
    pub fn state_count(&self) -> u128 {
        let mut n: u128 = 1;
        for _ in 0..self.tokens {
            n = n.saturating_mul(self.vocab as u128);
        }
        for _ in 0..self.demo_slots {
            n = n.saturating_mul(self.demos_per_slot as u128);
        }
        n
    }

    pub fn enumeration_feasible(&self) -> bool {
        self.state_count() <= ENUM_LIMIT as u128
    }

    fn require_enumerable(&self) -> Result<()> {
        let states = self.state_count();
        if states > ENUM_LIMIT as u128 {
            return Err(Error::ShapeTooLarge {
                states,
                limit: ENUM_LIMIT,
            });
        }
        Ok(())
    }

    pub fn check_assignment(&self, a: &DiscreteAssignment) -> Result<()> {
        if a.tokens.len() != self.tokens {
            return Err(Error::LengthMismatch {
                expected: self.tokens,
                got: a.tokens.len(),
            });
        }
        if a.demos.len() != self.demo_slots {
            return Err(Error::LengthMismatch {
                expected: self.demo_slots,
                got: a.demos.len(),
            });
        }
        for (slot, &j) in a.tokens.iter().enumerate() {
            if j >= self.vocab {
                return Err(Error::IndexOutOfBounds {
                    kind: "token",
                    slot,
                    index: j,
                    bound: self.vocab,
                });
            }
        }
        for (slot, &k) in a.demos.iter().enumerate() {
            if k >= self.demos_per_slot {
                return Err(Error::IndexOutOfBounds {
                    kind: "demo",
                    slot,
                    index: k,
                    bound: self.demos_per_slot,
                });
            }
        }
        Ok(())
    }

    /// Row-major flat index: token slots vary slowest, demo slots fastest.
    pub fn flat_index(&self, a: &DiscreteAssignment) -> usize {
        let mut idx = 0usize;
        for &j in &a.tokens {
            idx = idx * self.vocab + j;
        }
        for &k in &a.demos {
            idx = idx * self.demos_per_slot + k;
        }
        idx
    }
}

/// One realized prompt: token word indices plus demonstration indices.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiscreteAssignment {
    pub tokens: Vec<usize>,
    pub demos: Vec<usize>,
}

/// An assignment together with its observed loss.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossSample {
    pub assignment: DiscreteAssignment,
    pub loss: f64,
}

impl LossSample {
    pub fn new(assignment: DiscreteAssignment, loss: f64) -> Result<Self> {
        check_loss(loss)?;
        Ok(LossSample { assignment, loss })
    }
}

fn check_loss(loss: f64) -> Result<f64> {
    if !loss.is_finite() || loss < 0.0 {
        return Err(Error::InvalidLoss { value: loss });
    }
    Ok(loss)
}

/// A pairwise penalty added when a token choice and a demo choice co-occur.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Interaction {
    pub token_slot: usize,
    pub token_index: usize,
    pub demo_slot: usize,
    pub demo_index: usize,
    pub penalty: f64,
}

/// Declarative evaluator configuration. Local kinds instantiate through
/// [`EvaluatorSpec::build_local`]; the `remote` kind only carries protocol
/// parameters and is instantiated by the host crate that owns a transport.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "kebab-case"))]
pub enum EvaluatorSpec {
    /// Full loss table over every assignment, row-major per
    /// [`ProblemShape::flat_index`].
    Table { losses: Vec<f64> },
    /// Loss table with entries drawn uniformly from `[lo, hi)` under
    /// `table_seed`.
    RandomTable { table_seed: u64, lo: f64, hi: f64 },
    /// `loss = sum_i token_scores[i][j_i] + sum_i' demo_scores[i'][k_i'] +
    /// matching interaction penalties`.
    SeparableSynthetic {
        token_scores: Vec<Vec<f64>>,
        demo_scores: Vec<Vec<f64>>,
        #[cfg_attr(feature = "serde", serde(default))]
        interactions: Vec<Interaction>,
    },
    /// Losses reported by a peer over the newline-delimited JSON protocol.
    Remote {
        /// `tcp:HOST:PORT` or `stdio:CMD`.
        endpoint: String,
        #[cfg_attr(feature = "serde", serde(default))]
        template: Option<String>,
        #[cfg_attr(feature = "serde", serde(default))]
        vocab: Vec<String>,
        #[cfg_attr(feature = "serde", serde(default))]
        corpus_path: Option<String>,
        #[cfg_attr(feature = "serde", serde(default = "default_timeout_ms"))]
        timeout_ms: u64,
    },
}

#[cfg(feature = "serde")]
fn default_timeout_ms() -> u64 {
    30_000
}

impl EvaluatorSpec {
    pub fn is_remote(&self) -> bool {
        matches!(self, EvaluatorSpec::Remote { .. })
    }

    /// Instantiate a deterministic in-process oracle. `Remote` specs need a
    /// transport and are rejected here.
    pub fn build_local(&self, shape: &ProblemShape) -> Result<LocalOracle> {
        shape.validate()?;
        match self {
            EvaluatorSpec::Table { losses } => Ok(LocalOracle::Table(TableOracle::new(
                shape.clone(),
                losses.clone(),
            )?)),
            EvaluatorSpec::RandomTable { table_seed, lo, hi } => Ok(LocalOracle::Table(
                TableOracle::random(shape.clone(), *table_seed, *lo, *hi)?,
            )),
            EvaluatorSpec::SeparableSynthetic {
                token_scores,
                demo_scores,
                interactions,
            } => Ok(LocalOracle::Separable(SeparableOracle::new(
                shape.clone(),
                token_scores.clone(),
                demo_scores.clone(),
                interactions.clone(),
            )?)),
            EvaluatorSpec::Remote { .. } => Err(Error::RemoteNeedsTransport),
        }
    }
}

/// The black box: a loss for every in-bounds assignment.
///
/// Table and separable oracles are pure; remote implementations may fail
/// with [`Error::Transport`], where `retryable` distinguishes timeouts from
/// protocol violations.
pub trait LossOracle {
    fn shape(&self) -> &ProblemShape;
    fn evaluate(&mut self, a: &DiscreteAssignment) -> Result<f64>;
}

impl LossOracle for Box<dyn LossOracle> {
    fn shape(&self) -> &ProblemShape {
        (**self).shape()
    }
    fn evaluate(&mut self, a: &DiscreteAssignment) -> Result<f64> {
        (**self).evaluate(a)
    }
}

#[derive(Clone, Debug)]
pub struct TableOracle {
    shape: ProblemShape,
    losses: Vec<f64>,
}

impl TableOracle {
    pub fn new(shape: ProblemShape, losses: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        shape.require_enumerable()?;
        let expected = shape.state_count() as u64;
        if losses.len() as u64 != expected {
            return Err(Error::TableSizeMismatch {
                expected,
                got: losses.len(),
            });
        }
        for &l in &losses {
            check_loss(l)?;
        }
        Ok(TableOracle { shape, losses })
    }

    pub fn random(shape: ProblemShape, table_seed: u64, lo: f64, hi: f64) -> Result<Self> {
        if !(lo >= 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::InvalidParam {
                name: "random table range",
                reason: "requires 0 <= lo < hi < inf",
            });
        }
        shape.validate()?;
        shape.require_enumerable()?;
        let mut rng = DetRng::stream(table_seed, "random-table", 0);
        let losses = (0..shape.state_count() as usize)
            .map(|_| rng.uniform(lo, hi))
            .collect();
        TableOracle::new(shape, losses)
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }
}

impl LossOracle for TableOracle {
    fn shape(&self) -> &ProblemShape {
        &self.shape
    }
    fn evaluate(&mut self, a: &DiscreteAssignment) -> Result<f64> {
        self.shape.check_assignment(a)?;
        Ok(self.losses[self.shape.flat_index(a)])
    }
}

#[derive(Clone, Debug)]
pub struct SeparableOracle {
    shape: ProblemShape,
    token_scores: Vec<Vec<f64>>,
    demo_scores: Vec<Vec<f64>>,
    interactions: Vec<Interaction>,
}

impl SeparableOracle {
    pub fn new(
        shape: ProblemShape,
        token_scores: Vec<Vec<f64>>,
        demo_scores: Vec<Vec<f64>>,
        interactions: Vec<Interaction>,
    ) -> Result<Self> {
        shape.validate()?;
        if token_scores.len() != shape.tokens {
            return Err(Error::LengthMismatch {
                expected: shape.tokens,
                got: token_scores.len(),
            });
        }
        if demo_scores.len() != shape.demo_slots {
            return Err(Error::LengthMismatch {
                expected: shape.demo_slots,
                got: demo_scores.len(),
            });
        }
        for row in token_scores.iter() {
            if row.len() != shape.vocab {
                return Err(Error::LengthMismatch {
                    expected: shape.vocab,
                    got: row.len(),
                });
            }
            for &s in row {
                check_loss(s)?;
            }
        }
        for row in demo_scores.iter() {
            if row.len() != shape.demos_per_slot {
                return Err(Error::LengthMismatch {
                    expected: shape.demos_per_slot,
                    got: row.len(),
                });
            }
            for &s in row {
                check_loss(s)?;
            }
        }
        for it in &interactions {
            check_loss(it.penalty)?;
            if it.token_slot >= shape.tokens || it.token_index >= shape.vocab {
                return Err(Error::IndexOutOfBounds {
                    kind: "token",
                    slot: it.token_slot,
                    index: it.token_index,
                    bound: shape.vocab,
                });
            }
            if it.demo_slot >= shape.demo_slots || it.demo_index >= shape.demos_per_slot {
                return Err(Error::IndexOutOfBounds {
                    kind: "demo",
                    slot: it.demo_slot,
                    index: it.demo_index,
                    bound: shape.demos_per_slot,
                });
            }
        }
        Ok(SeparableOracle {
            shape,
            token_scores,
            demo_scores,
            interactions,
        })
    }
}

impl LossOracle for SeparableOracle {
    fn shape(&self) -> &ProblemShape {
        &self.shape
    }
    fn evaluate(&mut self, a: &DiscreteAssignment) -> Result<f64> {
        self.shape.check_assignment(a)?;
        let mut loss: f64 = 0.0;
        for (i, &j) in a.tokens.iter().enumerate() {
            loss += self.token_scores[i][j];
        }
        for (i, &k) in a.demos.iter().enumerate() {
            loss += self.demo_scores[i][k];
        }
        for it in &self.interactions {
            if a.tokens[it.token_slot] == it.token_index && a.demos[it.demo_slot] == it.demo_index
            {
                loss += it.penalty;
            }
        }
        Ok(loss)
    }
}

/// A concrete in-process oracle built from an [`EvaluatorSpec`].
#[derive(Clone, Debug)]
pub enum LocalOracle {
    Table(TableOracle),
    Separable(SeparableOracle),
}

impl LossOracle for LocalOracle {
    fn shape(&self) -> &ProblemShape {
        match self {
            LocalOracle::Table(t) => t.shape(),
            LocalOracle::Separable(s) => s.shape(),
        }
    }
    fn evaluate(&mut self, a: &DiscreteAssignment) -> Result<f64> {
        match self {
            LocalOracle::Table(t) => t.evaluate(a),
            LocalOracle::Separable(s) => s.evaluate(a),
        }
    }
}

/// Walk every assignment in flat-index order.
fn for_each_assignment<F: FnMut(&DiscreteAssignment) -> Result<()>>(
    shape: &ProblemShape,
    mut f: F,
) -> Result<()> {
    shape.require_enumerable()?;
    let mut a = DiscreteAssignment {
        tokens: vec![0; shape.tokens],
        demos: vec![0; shape.demo_slots],
    };
    loop {
        f(&a)?;
        // Increment the mixed-radix odometer, demos fastest.
        let mut carried = true;
        for k in a.demos.iter_mut().rev() {
            *k += 1;
            if *k < shape.demos_per_slot {
                carried = false;
                break;
            }
            *k = 0;
        }
        if carried {
            for j in a.tokens.iter_mut().rev() {
                *j += 1;
                if *j < shape.vocab {
                    carried = false;
                    break;
                }
                *j = 0;
            }
        }
        if carried {
            return Ok(());
        }
    }
}

fn check_dists(p: &[ProbVector], q: &[ProbVector], shape: &ProblemShape) -> Result<()> {
    if p.len() != shape.tokens {
        return Err(Error::LengthMismatch {
            expected: shape.tokens,
            got: p.len(),
        });
    }
    if q.len() != shape.demo_slots {
        return Err(Error::LengthMismatch {
            expected: shape.demo_slots,
            got: q.len(),
        });
    }
    for pi in p {
        if pi.len() != shape.vocab {
            return Err(Error::LengthMismatch {
                expected: shape.vocab,
                got: pi.len(),
            });
        }
    }
    for qi in q {
        if qi.len() != shape.demos_per_slot {
            return Err(Error::LengthMismatch {
                expected: shape.demos_per_slot,
                got: qi.len(),
            });
        }
    }
    Ok(())
}

/// Exact `E[loss]` under independent categorical draws, by full enumeration.
pub fn exact_expected_loss(
    p: &[ProbVector],
    q: &[ProbVector],
    oracle: &mut dyn LossOracle,
) -> Result<f64> {
    let shape = oracle.shape().clone();
    check_dists(p, q, &shape)?;
    let mut total = 0.0;
    for_each_assignment(&shape, |a| {
        let mut prob = 1.0;
        for (i, &j) in a.tokens.iter().enumerate() {
            prob *= p[i].get(j);
        }
        for (i, &k) in a.demos.iter().enumerate() {
            prob *= q[i].get(k);
        }
        if prob > 0.0 {
            total += prob * oracle.evaluate(a)?;
        }
        Ok(())
    })?;
    Ok(total)
}

/// Exact gradients of the enumerated expectation.
///
/// `grad_p[i][j]` is the expected loss conditioned on token slot `i` taking
/// value `j` (weighted by all other slots' probabilities); analogously for
/// `grad_q`. This is the unbiasedness oracle for [`reinforce_gradients`].
pub fn exact_gradients(
    p: &[ProbVector],
    q: &[ProbVector],
    oracle: &mut dyn LossOracle,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let shape = oracle.shape().clone();
    check_dists(p, q, &shape)?;
    let m = shape.tokens;
    let u = shape.demo_slots;
    let mut grad_p = vec![vec![0.0; shape.vocab]; m];
    let mut grad_q = vec![vec![0.0; shape.demos_per_slot]; u];
    let mut tok_prob = vec![0.0; m];
    let mut dem_prob = vec![0.0; u];
    for_each_assignment(&shape, |a| {
        let loss = oracle.evaluate(a)?;
        for (i, &j) in a.tokens.iter().enumerate() {
            tok_prob[i] = p[i].get(j);
        }
        for (i, &k) in a.demos.iter().enumerate() {
            dem_prob[i] = q[i].get(k);
        }
        // Leave-one-out products via prefix/suffix scans.
        let all_dem: f64 = dem_prob.iter().product();
        let all_tok: f64 = tok_prob.iter().product();
        let mut suffix_tok = vec![1.0; m + 1];
        for i in (0..m).rev() {
            suffix_tok[i] = suffix_tok[i + 1] * tok_prob[i];
        }
        let mut prefix = 1.0;
        for (i, &j) in a.tokens.iter().enumerate() {
            grad_p[i][j] += prefix * suffix_tok[i + 1] * all_dem * loss;
            prefix *= tok_prob[i];
        }
        let mut suffix_dem = vec![1.0; u + 1];
        for i in (0..u).rev() {
            suffix_dem[i] = suffix_dem[i + 1] * dem_prob[i];
        }
        let mut prefix_d = 1.0;
        for (i, &k) in a.demos.iter().enumerate() {
            grad_q[i][k] += all_tok * prefix_d * suffix_dem[i + 1] * loss;
            prefix_d *= dem_prob[i];
        }
        Ok(())
    })?;
    Ok((grad_p, grad_q))
}

/// Exact `E[loss]` over token slots with the demonstrations pinned.
pub fn exact_expected_loss_fixed_demos(
    p: &[ProbVector],
    demos: &[usize],
    oracle: &mut dyn LossOracle,
) -> Result<f64> {
    let shape = oracle.shape().clone();
    let token_shape = ProblemShape {
        demo_slots: 0,
        demos_per_slot: 1,
        ..shape.clone()
    };
    check_dists(p, &[], &token_shape)?;
    let mut total = 0.0;
    for_each_assignment(&token_shape, |t| {
        let a = DiscreteAssignment {
            tokens: t.tokens.clone(),
            demos: demos.to_vec(),
        };
        let mut prob = 1.0;
        for (i, &j) in a.tokens.iter().enumerate() {
            prob *= p[i].get(j);
        }
        if prob > 0.0 {
            total += prob * oracle.evaluate(&a)?;
        }
        Ok(())
    })?;
    Ok(total)
}

/// Exact token-slot gradients with the demonstrations pinned; the inner
/// solver's exact gradient source.
pub fn exact_token_gradients_fixed_demos(
    p: &[ProbVector],
    demos: &[usize],
    oracle: &mut dyn LossOracle,
) -> Result<Vec<Vec<f64>>> {
    let shape = oracle.shape().clone();
    let token_shape = ProblemShape {
        demo_slots: 0,
        demos_per_slot: 1,
        ..shape.clone()
    };
    check_dists(p, &[], &token_shape)?;
    let m = shape.tokens;
    let mut grad_p = vec![vec![0.0; shape.vocab]; m];
    let mut tok_prob = vec![0.0; m];
    for_each_assignment(&token_shape, |t| {
        let a = DiscreteAssignment {
            tokens: t.tokens.clone(),
            demos: demos.to_vec(),
        };
        let loss = oracle.evaluate(&a)?;
        for (i, &j) in a.tokens.iter().enumerate() {
            tok_prob[i] = p[i].get(j);
        }
        let mut suffix = vec![1.0; m + 1];
        for i in (0..m).rev() {
            suffix[i] = suffix[i + 1] * tok_prob[i];
        }
        let mut prefix = 1.0;
        for (i, &j) in a.tokens.iter().enumerate() {
            grad_p[i][j] += prefix * suffix[i + 1] * loss;
            prefix *= tok_prob[i];
        }
        Ok(())
    })?;
    Ok(grad_p)
}

/// Score-function gradient estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub grad_p: Vec<Vec<f64>>,
    pub grad_q: Vec<Vec<f64>>,
    pub mean_loss: f64,
}

fn check_reinforce_params(n_samples: usize, p_min: f64, max_dim: usize) -> Result<()> {
    if n_samples == 0 {
        return Err(Error::InvalidParam {
            name: "n_samples",
            reason: "must be >= 1",
        });
    }
    if !(p_min > 0.0) || p_min > 1.0 / max_dim.max(1) as f64 {
        return Err(Error::InvalidParam {
            name: "p_min",
            reason: "must lie in (0, 1/n] for the largest slot dimension n",
        });
    }
    Ok(())
}

/// REINFORCE estimate of the expected-loss gradients.
///
/// Draws `n_samples` assignments (token slots in order, then demo slots);
/// each sample with loss `L` contributes `(L - b) * e_j / max(p_j, p_min)`
/// to its slot, where `b` is the running mean of earlier losses when
/// `baseline` is set (zero for the first sample). The baseline shifts each
/// slot's estimate by a uniform offset that simplex projection absorbs, so
/// projected updates are unchanged in expectation. Returns sample means.
pub fn reinforce_gradients(
    p: &[ProbVector],
    q: &[ProbVector],
    oracle: &mut dyn LossOracle,
    n_samples: usize,
    rng: &mut DetRng,
    baseline: bool,
    p_min: f64,
) -> Result<GradientEstimate> {
    let shape = oracle.shape().clone();
    check_dists(p, q, &shape)?;
    let max_dim = if shape.demo_slots > 0 {
        shape.vocab.max(shape.demos_per_slot)
    } else {
        shape.vocab
    };
    check_reinforce_params(n_samples, p_min, max_dim)?;

    let mut grad_p = vec![vec![0.0; shape.vocab]; shape.tokens];
    let mut grad_q = vec![vec![0.0; shape.demos_per_slot]; shape.demo_slots];
    let mut loss_sum = 0.0;
    let mut a = DiscreteAssignment {
        tokens: vec![0; shape.tokens],
        demos: vec![0; shape.demo_slots],
    };
    for s in 0..n_samples {
        for (i, slot) in a.tokens.iter_mut().enumerate() {
            *slot = sample_categorical(&p[i], rng);
        }
        for (i, slot) in a.demos.iter_mut().enumerate() {
            *slot = sample_categorical(&q[i], rng);
        }
        let loss = oracle.evaluate(&a)?;
        let b = if baseline && s > 0 {
            loss_sum / s as f64
        } else {
            0.0
        };
        let w = loss - b;
        for (i, &j) in a.tokens.iter().enumerate() {
            grad_p[i][j] += w / p[i].get(j).max(p_min);
        }
        for (i, &k) in a.demos.iter().enumerate() {
            grad_q[i][k] += w / q[i].get(k).max(p_min);
        }
        loss_sum += loss;
    }
    let inv = 1.0 / n_samples as f64;
    for row in grad_p.iter_mut().chain(grad_q.iter_mut()) {
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(GradientEstimate {
        grad_p,
        grad_q,
        mean_loss: loss_sum * inv,
    })
}

/// REINFORCE over token slots only, demonstrations pinned; the inner
/// solver's sampled gradient source.
pub fn reinforce_token_gradients_fixed_demos(
    p: &[ProbVector],
    demos: &[usize],
    oracle: &mut dyn LossOracle,
    n_samples: usize,
    rng: &mut DetRng,
    baseline: bool,
    p_min: f64,
) -> Result<Vec<Vec<f64>>> {
    let shape = oracle.shape().clone();
    check_reinforce_params(n_samples, p_min, shape.vocab)?;
    let mut grad_p = vec![vec![0.0; shape.vocab]; shape.tokens];
    let mut loss_sum = 0.0;
    let mut a = DiscreteAssignment {
        tokens: vec![0; shape.tokens],
        demos: demos.to_vec(),
    };
    for s in 0..n_samples {
        for (i, slot) in a.tokens.iter_mut().enumerate() {
            *slot = sample_categorical(&p[i], rng);
        }
        let loss = oracle.evaluate(&a)?;
        let b = if baseline && s > 0 {
            loss_sum / s as f64
        } else {
            0.0
        };
        let w = loss - b;
        for (i, &j) in a.tokens.iter().enumerate() {
            grad_p[i][j] += w / p[i].get(j).max(p_min);
        }
        loss_sum += loss;
    }
    let inv = 1.0 / n_samples as f64;
    for row in grad_p.iter_mut() {
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(grad_p)
}

/// Draw a full assignment: token slots in order, then demo slots.
pub fn sample_assignment(
    p: &[ProbVector],
    q: &[ProbVector],
    rng: &mut DetRng,
) -> DiscreteAssignment {
    DiscreteAssignment {
        tokens: p.iter().map(|pi| sample_categorical(pi, rng)).collect(),
        demos: q.iter().map(|qi| sample_categorical(qi, rng)).collect(),
    }
}

/// Enumerated minimizer: the assignment with the smallest loss (ties to the
/// lowest flat index) and that loss.
pub fn enumerate_optimum(oracle: &mut dyn LossOracle) -> Result<(DiscreteAssignment, f64)> {
    let shape = oracle.shape().clone();
    let mut best: Option<(DiscreteAssignment, f64)> = None;
    for_each_assignment(&shape, |a| {
        let loss = oracle.evaluate(a)?;
        if best.as_ref().map_or(true, |(_, b)| loss < *b) {
            best = Some((a.clone(), loss));
        }
        Ok(())
    })?;
    Ok(best.expect("shape has at least one assignment"))
}

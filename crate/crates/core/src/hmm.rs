//! Discrete hidden Markov model over a finite state space.
//!
//! Observations are classifier decisions drawn from the same alphabet as the
//! hidden states, so the emission matrix is square and doubles as the
//! classifier's confusion matrix (`emission[truth][decision]`).
//!
//! Every probability chain is evaluated in log-space. Frame intervals routinely
//! span thousands of observations and the plain products underflow long before
//! that.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a state within a [`StateSpace`].
pub type StateIndex = usize;

/// Row sums and priors must be within this distance of 1.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HmmError {
    #[error("state space needs at least two states, got {0}")]
    TooFewStates(usize),
    #[error("duplicate state name {0:?}")]
    DuplicateState(String),
    #[error("invalid state name {0:?}")]
    InvalidStateName(String),
    #[error("{what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{what} contains an invalid probability {value}")]
    InvalidProbability { what: &'static str, value: f64 },
    #[error("{what} sums to {sum}, expected 1")]
    NotStochastic { what: &'static str, sum: f64 },
    #[error("observation sequence is empty")]
    EmptyObservations,
    #[error("observation {value} at position {position} is outside the state space")]
    ObservationOutOfRange { position: usize, value: usize },
    #[error("state index {0} is outside the state space")]
    StateOutOfRange(usize),
    #[error("impossible observation: every state path has probability zero by position {position}")]
    ImpossibleObservation { position: usize },
    #[error("no labels to estimate from and smoothing is zero")]
    NoData,
    #[error("state {0} has no observations to estimate its row from and smoothing is zero")]
    EmptyRow(StateIndex),
    #[error("smoothing must be finite and non-negative, got {0}")]
    InvalidSmoothing(f64),
}

// ---------------------------------------------------------------------------
// StateSpace
// ---------------------------------------------------------------------------

/// Ordered, uniquely named set of discrete states.
///
/// State indices are positions in the name list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct StateSpace {
    names: Vec<String>,
}

impl StateSpace {
    pub fn new<I, S>(names: I) -> Result<Self, HmmError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(HmmError::TooFewStates(names.len()));
        }
        for (i, name) in names.iter().enumerate() {
            // Names travel through tab/comma separated text formats.
            if name.is_empty()
                || name.trim() != name
                || name.contains(['\t', '\n', '\r', ',', ':', '='])
                || name == "null"
            {
                return Err(HmmError::InvalidStateName(name.clone()));
            }
            if names[..i].contains(name) {
                return Err(HmmError::DuplicateState(name.clone()));
            }
        }
        Ok(Self { names })
    }

    /// The six driver gaze regions used throughout the gaze case study.
    pub fn gaze_regions() -> Self {
        Self::new([
            "Road",
            "Center Stack",
            "Instrument Cluster",
            "Rearview Mirror",
            "Left",
            "Right",
        ])
        .expect("static state names are valid")
    }

    /// Generic `s0..s{n-1}` names, mostly for tests and synthetic models.
    pub fn numbered(n: usize) -> Result<Self, HmmError> {
        Self::new((0..n).map(|i| format!("s{i}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: StateIndex) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<StateIndex> {
        self.names.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for StateSpace {
    type Error = HmmError;

    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(names)
    }
}

impl From<StateSpace> for Vec<String> {
    fn from(states: StateSpace) -> Self {
        states.names
    }
}

// ---------------------------------------------------------------------------
// HmmModel
// ---------------------------------------------------------------------------

/// Priors, transition matrix and emission (confusion) matrix over a state space.
///
/// Immutable once built; the log-domain tables used by decoding are computed
/// at construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ModelParts", into = "ModelParts")]
pub struct HmmModel {
    states: StateSpace,
    priors: Vec<f64>,
    transitions: Vec<Vec<f64>>,
    emission: Vec<Vec<f64>>,
    log_priors: Vec<f64>,
    // Row-major |S|x|S| tables.
    log_transitions: Vec<f64>,
    log_emission: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelParts {
    states: StateSpace,
    priors: Vec<f64>,
    transitions: Vec<Vec<f64>>,
    emission: Vec<Vec<f64>>,
}

impl TryFrom<ModelParts> for HmmModel {
    type Error = HmmError;

    fn try_from(p: ModelParts) -> Result<Self, Self::Error> {
        HmmModel::new(p.states, p.priors, p.transitions, p.emission)
    }
}

impl From<HmmModel> for ModelParts {
    fn from(m: HmmModel) -> Self {
        ModelParts {
            states: m.states,
            priors: m.priors,
            transitions: m.transitions,
            emission: m.emission,
        }
    }
}

impl PartialEq for HmmModel {
    fn eq(&self, other: &Self) -> bool {
        self.states == other.states
            && self.priors == other.priors
            && self.transitions == other.transitions
            && self.emission == other.emission
    }
}

fn check_distribution(what: &'static str, row: &[f64], n: usize) -> Result<(), HmmError> {
    if row.len() != n {
        return Err(HmmError::Dimension {
            what,
            expected: n,
            got: row.len(),
        });
    }
    if let Some(&value) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(HmmError::InvalidProbability { what, value });
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOLERANCE {
        return Err(HmmError::NotStochastic { what, sum });
    }
    Ok(())
}

fn check_matrix(what: &'static str, m: &[Vec<f64>], n: usize) -> Result<(), HmmError> {
    if m.len() != n {
        return Err(HmmError::Dimension {
            what,
            expected: n,
            got: m.len(),
        });
    }
    m.iter().try_for_each(|row| check_distribution(what, row, n))
}

impl HmmModel {
    pub fn new(
        states: StateSpace,
        priors: Vec<f64>,
        transitions: Vec<Vec<f64>>,
        emission: Vec<Vec<f64>>,
    ) -> Result<Self, HmmError> {
        let n = states.len();
        check_distribution("priors", &priors, n)?;
        check_matrix("transitions", &transitions, n)?;
        check_matrix("emission", &emission, n)?;

        let log_priors = priors.iter().map(|p| p.ln()).collect();
        let log_transitions = transitions.iter().flatten().map(|p| p.ln()).collect();
        let log_emission = emission.iter().flatten().map(|p| p.ln()).collect();
        Ok(Self {
            states,
            priors,
            transitions,
            emission,
            log_priors,
            log_transitions,
            log_emission,
        })
    }

    /// Uniform priors and transitions with the given emission matrix.
    pub fn uniform_chain(states: StateSpace, emission: Vec<Vec<f64>>) -> Result<Self, HmmError> {
        let n = states.len();
        let u = 1.0 / n as f64;
        Self::new(states, vec![u; n], vec![vec![u; n]; n], emission)
    }

    pub fn states(&self) -> &StateSpace {
        &self.states
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn transitions(&self) -> &[Vec<f64>] {
        &self.transitions
    }

    pub fn emission(&self) -> &[Vec<f64>] {
        &self.emission
    }

    /// Same emission matrix, new priors and transitions.
    pub fn with_chain(&self, chain: ChainEstimate) -> Result<Self, HmmError> {
        Self::new(
            self.states.clone(),
            chain.priors,
            chain.transitions,
            self.emission.clone(),
        )
    }

    pub fn with_emission(&self, emission: Vec<Vec<f64>>) -> Result<Self, HmmError> {
        Self::new(
            self.states.clone(),
            self.priors.clone(),
            self.transitions.clone(),
            emission,
        )
    }

    #[inline]
    fn log_a(&self, from: StateIndex, to: StateIndex) -> f64 {
        self.log_transitions[from * self.n_states() + to]
    }

    #[inline]
    fn log_e(&self, state: StateIndex, decision: StateIndex) -> f64 {
        self.log_emission[state * self.n_states() + decision]
    }

    fn check_observations(&self, obs: &[StateIndex]) -> Result<(), HmmError> {
        if obs.is_empty() {
            return Err(HmmError::EmptyObservations);
        }
        let n = self.n_states();
        match obs.iter().position(|&y| y >= n) {
            Some(position) => Err(HmmError::ObservationOutOfRange {
                position,
                value: obs[position],
            }),
            None => Ok(()),
        }
    }

    /// Most likely hidden state path for `obs` and the log of its probability.
    ///
    /// Ties at every maximisation go to the lowest state index.
    pub fn viterbi(&self, obs: &[StateIndex]) -> Result<DecodeResult, HmmError> {
        self.check_observations(obs)?;
        let n = self.n_states();
        let len = obs.len();

        let mut scores: Vec<f64> = (0..n)
            .map(|k| self.log_priors[k] + self.log_e(k, obs[0]))
            .collect();
        if scores.iter().all(|s| *s == f64::NEG_INFINITY) {
            return Err(HmmError::ImpossibleObservation { position: 0 });
        }
        let mut next = vec![f64::NEG_INFINITY; n];
        // back[t * n + k]: best predecessor of state k at step t.
        let mut back = vec![0u32; len * n];

        for (t, &y) in obs.iter().enumerate().skip(1) {
            for k in 0..n {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for (x, &prev) in scores.iter().enumerate() {
                    let cand = prev + self.log_a(x, k);
                    if cand > best {
                        best = cand;
                        arg = x;
                    }
                }
                next[k] = best + self.log_e(k, y);
                back[t * n + k] = arg as u32;
            }
            std::mem::swap(&mut scores, &mut next);
            if scores.iter().all(|s| *s == f64::NEG_INFINITY) {
                return Err(HmmError::ImpossibleObservation { position: t });
            }
        }

        let (mut state, log_v_star) = argmax_lowest(&scores);
        let mut path = vec![0; len];
        path[len - 1] = state;
        for t in (1..len).rev() {
            state = back[t * n + state] as usize;
            path[t - 1] = state;
        }
        Ok(DecodeResult { path, log_v_star })
    }

    /// Log-probability that all of `obs` was produced while the hidden state
    /// stayed at `state`.
    ///
    /// The first step carries only the emission term (no prior); every later
    /// step contributes the emission and one self-transition. Returns
    /// `f64::NEG_INFINITY` when any factor is zero.
    pub fn unchanged_log_prob(&self, obs: &[StateIndex], state: StateIndex) -> Result<f64, HmmError> {
        self.check_observations(obs)?;
        if state >= self.n_states() {
            return Err(HmmError::StateOutOfRange(state));
        }
        Ok(self.unchanged_unchecked(obs, state))
    }

    fn unchanged_unchecked(&self, obs: &[StateIndex], state: StateIndex) -> f64 {
        let stay = self.log_a(state, state);
        obs[1..]
            .iter()
            .fold(self.log_e(state, obs[0]), |acc, &y| acc + self.log_e(state, y) + stay)
    }

    /// Unchanged-state log-probabilities for every state.
    pub fn unchanged_log_probs(&self, obs: &[StateIndex]) -> Result<Vec<f64>, HmmError> {
        self.check_observations(obs)?;
        Ok((0..self.n_states())
            .map(|k| self.unchanged_unchecked(obs, k))
            .collect())
    }

    /// Best unchanged state and its likelihood normalised by the Viterbi path.
    ///
    /// The ratio is not clamped: because the unchanged likelihood carries no
    /// prior it can exceed 1 (up to `1 / priors[k]`).
    pub fn stable_state_score(&self, obs: &[StateIndex]) -> Result<StableScore, HmmError> {
        let decoded = self.viterbi(obs)?;
        let unchanged = self.unchanged_log_probs(obs)?;
        let (best_state, best) = argmax_lowest(&unchanged);
        Ok(StableScore {
            best_state,
            v_u: (best - decoded.log_v_star).exp(),
            log_v_u: best - decoded.log_v_star,
        })
    }
}

/// Index and value of the maximum; the first maximum wins ties.
pub(crate) fn argmax_lowest(values: &[f64]) -> (usize, f64) {
    let mut arg = 0;
    let mut best = values[0];
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            arg = i;
        }
    }
    (arg, best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub path: Vec<StateIndex>,
    /// Natural log of the Viterbi path probability.
    pub log_v_star: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableScore {
    pub best_state: StateIndex,
    /// Unchanged-state likelihood over the Viterbi path likelihood.
    pub v_u: f64,
    pub log_v_u: f64,
}

// ---------------------------------------------------------------------------
// Estimation
// ---------------------------------------------------------------------------

/// Re-estimated priors and transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainEstimate {
    pub priors: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
}

fn check_alpha(alpha: f64) -> Result<(), HmmError> {
    if alpha.is_finite() && alpha >= 0.0 {
        Ok(())
    } else {
        Err(HmmError::InvalidSmoothing(alpha))
    }
}

fn smoothed_row(counts: &[u64], alpha: f64, row: StateIndex) -> Result<Vec<f64>, HmmError> {
    let total: u64 = counts.iter().sum();
    let denom = total as f64 + alpha * counts.len() as f64;
    if denom <= 0.0 {
        return Err(HmmError::EmptyRow(row));
    }
    Ok(counts.iter().map(|&c| (c as f64 + alpha) / denom).collect())
}

/// Segment-initial and within-segment transition counts.
///
/// Transitions are only counted between consecutive labels of the same
/// segment; segment boundaries never contribute a transition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionCounts {
    n: usize,
    initial: Vec<u64>,
    transitions: Vec<u64>,
    labels: u64,
}

impl TransitionCounts {
    pub fn new(n_states: usize) -> Self {
        Self {
            n: n_states,
            initial: vec![0; n_states],
            transitions: vec![0; n_states * n_states],
            labels: 0,
        }
    }

    pub fn add_segment(&mut self, labels: &[StateIndex]) -> Result<(), HmmError> {
        if let Some(&bad) = labels.iter().find(|&&s| s >= self.n) {
            return Err(HmmError::StateOutOfRange(bad));
        }
        let Some(&first) = labels.first() else {
            return Ok(());
        };
        self.initial[first] += 1;
        for w in labels.windows(2) {
            self.transitions[w[0] * self.n + w[1]] += 1;
        }
        self.labels += labels.len() as u64;
        Ok(())
    }

    pub fn label_count(&self) -> u64 {
        self.labels
    }

    pub fn estimate(&self, alpha: f64) -> Result<ChainEstimate, HmmError> {
        check_alpha(alpha)?;
        if self.labels == 0 && alpha == 0.0 {
            return Err(HmmError::NoData);
        }
        let priors = smoothed_row(&self.initial, alpha, 0).map_err(|_| HmmError::NoData)?;
        let transitions = self
            .transitions
            .chunks(self.n)
            .enumerate()
            .map(|(i, row)| smoothed_row(row, alpha, i))
            .collect::<Result<_, _>>()?;
        Ok(ChainEstimate {
            priors,
            transitions,
        })
    }
}

/// Counts of (true state, predicted state) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    n: usize,
    counts: Vec<u64>,
    total: u64,
}

impl ConfusionCounts {
    pub fn new(n_states: usize) -> Self {
        Self {
            n: n_states,
            counts: vec![0; n_states * n_states],
            total: 0,
        }
    }

    pub fn add(&mut self, predicted: StateIndex, truth: StateIndex) -> Result<(), HmmError> {
        for s in [predicted, truth] {
            if s >= self.n {
                return Err(HmmError::StateOutOfRange(s));
            }
        }
        self.counts[truth * self.n + predicted] += 1;
        self.total += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn estimate(&self, alpha: f64) -> Result<Vec<Vec<f64>>, HmmError> {
        check_alpha(alpha)?;
        if self.total == 0 && alpha == 0.0 {
            return Err(HmmError::NoData);
        }
        self.counts
            .chunks(self.n)
            .enumerate()
            .map(|(k, row)| smoothed_row(row, alpha, k))
            .collect()
    }
}

/// Priors and transitions from labelled segments with additive smoothing.
///
/// `a[i][j] = (n(i->j) + alpha) / (n(i->.) + alpha*|S|)`, priors from the
/// first label of each segment.
pub fn estimate_model<I, S>(segments: I, n_states: usize, alpha: f64) -> Result<ChainEstimate, HmmError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[StateIndex]>,
{
    let mut counts = TransitionCounts::new(n_states);
    for seg in segments {
        counts.add_segment(seg.as_ref())?;
    }
    counts.estimate(alpha)
}

/// Emission matrix `e[truth][predicted]` from (predicted, truth) pairs.
pub fn estimate_emission<I>(pairs: I, n_states: usize, alpha: f64) -> Result<Vec<Vec<f64>>, HmmError>
where
    I: IntoIterator<Item = (StateIndex, StateIndex)>,
{
    let mut counts = ConfusionCounts::new(n_states);
    for (predicted, truth) in pairs {
        counts.add(predicted, truth)?;
    }
    counts.estimate(alpha)
}

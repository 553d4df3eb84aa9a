//! Labeled MDPs (explicit tabular models) and the sample-only environment
//! contract used by the actor-critic, plus paths, policies, and trajectory
//! sampling.

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scltl::{ApSet, Symbol};

pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("malformed MDP: {0}")]
    Malformed(String),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
}

/// Explicit tabular stochastic model with a labeling function.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMdp {
    pub states: Vec<String>,
    pub actions: Vec<String>,
    /// `transition[s][a]` is a probability vector over successor states.
    pub transition: Vec<Vec<Vec<f64>>>,
    pub initial: usize,
    pub labels: Vec<Symbol>,
    pub ap: ApSet,
}

/// A named defect found by [`LabeledMdp::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum MdpViolation {
    RowSum { state: usize, action: usize, sum: f64 },
    EntryOutOfRange { state: usize, action: usize, next: usize, value: f64 },
    RowLength { state: usize, action: usize, len: usize },
    BadLabel { state: usize },
    BadInitial { initial: usize },
}

impl fmt::Display for MdpViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MdpViolation::RowSum { state, action, sum } => {
                write!(f, "P(.|s{state},a{action}) sums to {sum}")
            }
            MdpViolation::EntryOutOfRange { state, action, next, value } => {
                write!(f, "P(s{next}|s{state},a{action}) = {value} outside [0,1]")
            }
            MdpViolation::RowLength { state, action, len } => {
                write!(f, "P(.|s{state},a{action}) has {len} entries")
            }
            MdpViolation::BadLabel { state } => {
                write!(f, "label of s{state} is not a subset of AP")
            }
            MdpViolation::BadInitial { initial } => {
                write!(f, "initial state {initial} out of range")
            }
        }
    }
}

impl LabeledMdp {
    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn action_count(&self) -> usize {
        self.actions.len()
    }

    /// Reports every invariant defect; empty means the model is sound.
    pub fn validate(&self) -> Vec<MdpViolation> {
        let mut out = Vec::new();
        let n = self.state_count();
        if self.initial >= n {
            out.push(MdpViolation::BadInitial { initial: self.initial });
        }
        for (s, per_action) in self.transition.iter().enumerate() {
            for (a, dist) in per_action.iter().enumerate() {
                if dist.len() != n {
                    out.push(MdpViolation::RowLength { state: s, action: a, len: dist.len() });
                    continue;
                }
                for (next, &p) in dist.iter().enumerate() {
                    if !(0.0..=1.0).contains(&p) {
                        out.push(MdpViolation::EntryOutOfRange {
                            state: s,
                            action: a,
                            next,
                            value: p,
                        });
                    }
                }
                let sum: f64 = dist.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    out.push(MdpViolation::RowSum { state: s, action: a, sum });
                }
            }
        }
        for (s, label) in self.labels.iter().enumerate() {
            if !label.within(self.ap.len()) {
                out.push(MdpViolation::BadLabel { state: s });
            }
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let p = self
            .transition
            .iter()
            .enumerate()
            .flat_map(|(s, per_action)| {
                per_action.iter().enumerate().map(move |(a, dist)| MdpRowJson {
                    s,
                    a,
                    dist: dist.clone(),
                })
            })
            .collect();
        let doc = MdpJson {
            states: self.states.clone(),
            actions: self.actions.clone(),
            p,
            s0: self.initial,
            labels: self
                .labels
                .iter()
                .map(|&l| self.ap.symbol_props(l))
                .collect(),
            ap: self.ap.names().to_vec(),
        };
        serde_json::to_value(doc).expect("mdp serialization")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<LabeledMdp, MdpError> {
        let doc: MdpJson =
            serde_json::from_value(value.clone()).map_err(|e| MdpError::Malformed(e.to_string()))?;
        let ap = ApSet::new(doc.ap).map_err(|e| MdpError::Malformed(e.to_string()))?;
        let (n, m) = (doc.states.len(), doc.actions.len());
        if doc.labels.len() != n {
            return Err(MdpError::Malformed("one label per state required".into()));
        }
        let mut transition = vec![vec![Vec::new(); m]; n];
        for row in doc.p {
            if row.s >= n || row.a >= m {
                return Err(MdpError::Malformed(format!(
                    "transition row for out-of-range (s{}, a{})",
                    row.s, row.a
                )));
            }
            transition[row.s][row.a] = row.dist;
        }
        let labels = doc
            .labels
            .iter()
            .map(|props| ap.symbol(props.iter().map(String::as_str)))
            .collect::<Result<_, _>>()
            .map_err(|e| MdpError::Malformed(e.to_string()))?;
        let mdp = LabeledMdp {
            states: doc.states,
            actions: doc.actions,
            transition,
            initial: doc.s0,
            labels,
            ap,
        };
        let violations = mdp.validate();
        if !violations.is_empty() {
            return Err(MdpError::Malformed(
                violations
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            ));
        }
        Ok(mdp)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MdpJson {
    states: Vec<String>,
    actions: Vec<String>,
    p: Vec<MdpRowJson>,
    s0: usize,
    labels: Vec<Vec<String>>,
    ap: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MdpRowJson {
    s: usize,
    a: usize,
    dist: Vec<f64>,
}

/// Continuous or discrete state vector handed across the environment
/// boundary. Tabular environments encode the state index in element 0.
pub type EnvState = Vec<f64>;

#[derive(Debug, Clone)]
pub struct EnvStep {
    pub next: EnvState,
    pub label: Symbol,
    /// Environment-intrinsic reward (task-level satisfaction rewards are
    /// layered on top by the product wrapper).
    pub reward: f64,
    /// The environment signals absorption; sampling stops early.
    pub absorbing: bool,
}

/// Sample-only simulator contract. Stochastic but reproducible under a
/// fixed seed stream.
pub trait Environment {
    fn reset(&mut self, rng: &mut dyn RngCore) -> EnvState;
    fn step(&mut self, state: &EnvState, action: usize, rng: &mut dyn RngCore) -> EnvStep;
    fn action_count(&self) -> usize;
    fn state_dimension(&self) -> usize;
    fn label(&self, state: &EnvState) -> Symbol;
    /// Whether stepping from arbitrary (non-visited) states is permitted.
    fn is_generative(&self) -> bool {
        false
    }
}

/// Randomized policy over states of type `S`.
pub trait Policy<S> {
    /// Probability vector over actions; sums to 1 within 1e-6.
    fn probs(&self, state: &S) -> Vec<f64>;

    fn sample(&self, state: &S, rng: &mut dyn RngCore) -> usize {
        sample_index(&self.probs(state), rng)
    }
}

/// Draws an index from an (approximately normalized) probability vector.
pub fn sample_index(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = (rng.next_u64() as f64 / u64::MAX as f64) * total;
    for (i, &p) in probs.iter().enumerate() {
        u -= p;
        if u <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

/// Uniform policy over a fixed number of actions.
#[derive(Debug, Clone)]
pub struct UniformPolicy {
    pub actions: usize,
}

impl<S> Policy<S> for UniformPolicy {
    fn probs(&self, _state: &S) -> Vec<f64> {
        vec![1.0 / self.actions as f64; self.actions]
    }
}

/// Alternating state/action sequence with per-step rewards and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    /// `N + 1` states for `N` actions.
    pub states: Vec<EnvState>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// One label per visited state, in order.
    pub labels: Vec<Symbol>,
}

impl Path {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Rolls out `pi` in `env` for at most `horizon` steps, stopping early on
/// absorption.
pub fn sample_path(
    env: &mut dyn Environment,
    pi: &dyn Policy<EnvState>,
    horizon: usize,
    rng: &mut dyn RngCore,
) -> Result<Path, MdpError> {
    if horizon == 0 {
        return Err(MdpError::ZeroHorizon);
    }
    let s0 = env.reset(rng);
    let mut path = Path {
        labels: vec![env.label(&s0)],
        states: vec![s0],
        actions: Vec::new(),
        rewards: Vec::new(),
    };
    for _ in 0..horizon {
        let state = path.states.last().expect("nonempty").clone();
        let action = pi.sample(&state, rng);
        let step = env.step(&state, action, rng);
        path.actions.push(action);
        path.rewards.push(step.reward);
        path.labels.push(step.label);
        path.states.push(step.next);
        if step.absorbing {
            break;
        }
    }
    Ok(path)
}

/// The sequence of labels of the visited states.
pub fn label_word(path: &Path) -> Vec<Symbol> {
    path.labels.clone()
}

/// Wraps a tabular [`LabeledMdp`] as a sample-only [`Environment`].
#[derive(Debug, Clone)]
pub struct TabularEnv {
    pub mdp: LabeledMdp,
    /// States with only self-loop mass under every action end episodes.
    absorbing: Vec<bool>,
}

impl TabularEnv {
    pub fn new(mdp: LabeledMdp) -> Self {
        let absorbing = (0..mdp.state_count())
            .map(|s| {
                mdp.transition[s]
                    .iter()
                    .all(|dist| dist[s] >= 1.0 - ROW_SUM_TOLERANCE)
            })
            .collect();
        Self { mdp, absorbing }
    }

    pub fn state_index(state: &EnvState) -> usize {
        state[0] as usize
    }
}

impl Environment for TabularEnv {
    fn reset(&mut self, _rng: &mut dyn RngCore) -> EnvState {
        vec![self.mdp.initial as f64]
    }

    fn step(&mut self, state: &EnvState, action: usize, rng: &mut dyn RngCore) -> EnvStep {
        let s = Self::state_index(state);
        let next = sample_index(&self.mdp.transition[s][action], rng);
        EnvStep {
            label: self.mdp.labels[next],
            reward: 0.0,
            absorbing: self.absorbing[next],
            next: vec![next as f64],
        }
    }

    fn action_count(&self) -> usize {
        self.mdp.action_count()
    }

    fn state_dimension(&self) -> usize {
        1
    }

    fn label(&self, state: &EnvState) -> Symbol {
        self.mdp.labels[Self::state_index(state)]
    }

    fn is_generative(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::chain_mdp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chain_mdp_is_valid() {
        assert!(chain_mdp().validate().is_empty());
    }

    #[test]
    fn row_sum_violation_reported() {
        let mut m = chain_mdp();
        m.transition[1][0][2] = 0.3; // row now sums to 0.9
        let violations = m.validate();
        assert!(matches!(
            violations.as_slice(),
            [MdpViolation::RowSum { state: 1, action: 0, sum }] if (sum - 0.9).abs() < 1e-12
        ));
    }

    #[test]
    fn bad_label_reported() {
        let mut m = chain_mdp();
        m.labels[0] = Symbol(0b10); // outside AP = {s2}
        let violations = m.validate();
        assert!(matches!(
            violations.as_slice(),
            [MdpViolation::BadLabel { state: 0 }]
        ));
    }

    #[test]
    fn sample_path_deterministic_chain() {
        let mut env = TabularEnv::new(chain_mdp());
        let pi = UniformPolicy { actions: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let path = sample_path(&mut env, &pi, 2, &mut rng).unwrap();
        assert!(path.len() <= 2);
        assert!(path.actions.iter().all(|&a| a == 0));
        assert_eq!(path.states.len(), path.actions.len() + 1);
        assert_eq!(path.labels.len(), path.states.len());
    }

    #[test]
    fn sample_path_rejects_zero_horizon() {
        let mut env = TabularEnv::new(chain_mdp());
        let pi = UniformPolicy { actions: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(matches!(
            sample_path(&mut env, &pi, 0, &mut rng),
            Err(MdpError::ZeroHorizon)
        ));
    }

    #[test]
    fn identical_seeds_give_identical_paths() {
        let pi = UniformPolicy { actions: 1 };
        let run = |seed: u64| {
            let mut env = TabularEnv::new(chain_mdp());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_path(&mut env, &pi, 50, &mut rng).unwrap()
        };
        assert_eq!(run(42), run(42));
        // labels trace the visited states
        let path = run(3);
        let word = label_word(&path);
        assert_eq!(word.len(), path.states.len());
    }

    #[test]
    fn empirical_frequencies_match_transition_matrix() {
        let m = chain_mdp();
        let mut env = TabularEnv::new(m.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 100_000;
        let mut counts = vec![0usize; 3];
        let from = vec![1.0f64];
        for _ in 0..trials {
            let step = env.step(&from, 0, &mut rng);
            counts[TabularEnv::state_index(&step.next)] += 1;
        }
        for next in 0..3 {
            let freq = counts[next] as f64 / trials as f64;
            assert!(
                (freq - m.transition[1][0][next]).abs() < 0.02,
                "P(s{next}|s1,a0): expected {}, sampled {freq}",
                m.transition[1][0][next]
            );
        }
    }

    #[test]
    fn mdp_json_round_trip() {
        let m = chain_mdp();
        let restored = LabeledMdp::from_json(&m.to_json()).unwrap();
        assert_eq!(m, restored);
    }
}

//! Product MDP construction (explicit and on-the-fly), the satisfaction
//! reward, and invariant/guard set computation.

use rand::RngCore;
use thiserror::Error;

use crate::mdp::{EnvState, Environment, LabeledMdp, ROW_SUM_TOLERANCE};
use crate::scltl::{Dfa, Symbol};

#[derive(Debug, Error)]
pub enum ProductError {
    #[error("MDP and DFA alphabets differ")]
    AlphabetMismatch,
    #[error("step called on a finished product environment")]
    SteppedAfterDone,
}

/// Explicit product of a tabular MDP and a DFA.
///
/// Product states are indexed `z = s * |Q| + q`. Final states `S × F` are
/// absorbing with zero reward; the reward for non-final states is the
/// one-step probability of entering the final set.
#[derive(Debug, Clone)]
pub struct ProductMdp {
    pub mdp: LabeledMdp,
    pub dfa: Dfa,
    /// `transition[z][a]` as a sparse `(z', prob)` list.
    pub transition: Vec<Vec<Vec<(usize, f64)>>>,
    /// `reward[z][a]`, Σ over final successors of the transition mass.
    pub reward: Vec<Vec<f64>>,
    pub initial: usize,
    pub is_final: Vec<bool>,
    pub gamma: f64,
}

impl ProductMdp {
    pub fn dfa_state_count(&self) -> usize {
        self.dfa.state_count()
    }

    pub fn state_count(&self) -> usize {
        self.mdp.state_count() * self.dfa.state_count()
    }

    pub fn action_count(&self) -> usize {
        self.mdp.action_count()
    }

    pub fn index_of(&self, s: usize, q: usize) -> usize {
        s * self.dfa.state_count() + q
    }

    pub fn split(&self, z: usize) -> (usize, usize) {
        (z / self.dfa.state_count(), z % self.dfa.state_count())
    }

    pub fn is_dfa_sink(&self, z: usize) -> bool {
        self.dfa.is_sink(self.split(z).1)
    }

    pub fn state_name(&self, z: usize) -> String {
        let (s, q) = self.split(z);
        format!("({},{})", self.mdp.states[s], self.dfa.state_names[q])
    }

    /// Export with the labeled-MDP schema plus per-state `{q, final}`
    /// annotations.
    pub fn to_json(&self) -> serde_json::Value {
        let n = self.state_count();
        let p: Vec<serde_json::Value> = (0..n)
            .flat_map(|z| {
                (0..self.action_count()).map(move |a| {
                    let mut dist = vec![0.0; n];
                    for &(z2, prob) in &self.transition[z][a] {
                        dist[z2] = prob;
                    }
                    serde_json::json!({"s": z, "a": a, "dist": dist})
                })
            })
            .collect();
        serde_json::json!({
            "states": (0..n).map(|z| self.state_name(z)).collect::<Vec<_>>(),
            "actions": self.mdp.actions,
            "p": p,
            "s0": self.initial,
            "labels": (0..n)
                .map(|z| self.mdp.ap.symbol_props(self.mdp.labels[self.split(z).0]))
                .collect::<Vec<_>>(),
            "ap": self.mdp.ap.names(),
            "q": (0..n).map(|z| self.split(z).1).collect::<Vec<_>>(),
            "final": self.is_final.clone(),
            "gamma": self.gamma,
            "reward": self.reward,
        })
    }
}

/// Builds the explicit product with `|S| · |Q|` states.
pub fn build_product(m: &LabeledMdp, d: &Dfa, gamma: f64) -> Result<ProductMdp, ProductError> {
    if m.ap != d.ap {
        return Err(ProductError::AlphabetMismatch);
    }
    assert!((0.0..1.0).contains(&gamma), "gamma must lie in [0, 1)");
    let (ns, nq, na) = (m.state_count(), d.state_count(), m.action_count());
    let n = ns * nq;
    let index = |s: usize, q: usize| s * nq + q;

    let mut is_final = vec![false; n];
    for s in 0..ns {
        for &q in &d.accepting {
            is_final[index(s, q)] = true;
        }
    }

    let mut transition = vec![vec![Vec::new(); na]; n];
    let mut reward = vec![vec![0.0; na]; n];
    for s in 0..ns {
        for q in 0..nq {
            let z = index(s, q);
            for a in 0..na {
                if is_final[z] {
                    transition[z][a] = vec![(z, 1.0)];
                    continue;
                }
                let mut entries = Vec::new();
                let mut enter_final = 0.0;
                for (s2, &p) in m.transition[s][a].iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let q2 = d.step(q, m.labels[s2]);
                    let z2 = index(s2, q2);
                    if is_final[z2] {
                        enter_final += p;
                    }
                    entries.push((z2, p));
                }
                transition[z][a] = entries;
                reward[z][a] = enter_final;
            }
        }
    }

    let initial = index(m.initial, d.step(d.initial, m.labels[m.initial]));
    Ok(ProductMdp {
        mdp: m.clone(),
        dfa: d.clone(),
        transition,
        reward,
        initial,
        is_final,
        gamma,
    })
}

/// Reachability mask over (s, q) pairs under the raw dynamics, ignoring
/// final-state absorption, starting from (s0, δ(ι, L(s0))).
fn reachable_pairs(d: &Dfa, m: &LabeledMdp) -> Vec<Vec<bool>> {
    let mut seen = vec![vec![false; d.state_count()]; m.state_count()];
    let q0 = d.step(d.initial, m.labels[m.initial]);
    seen[m.initial][q0] = true;
    let mut frontier = vec![(m.initial, q0)];
    while let Some((s, q)) = frontier.pop() {
        for dist in &m.transition[s] {
            for (s2, &p) in dist.iter().enumerate() {
                if p > 0.0 {
                    let q2 = d.step(q, m.labels[s2]);
                    if !seen[s2][q2] {
                        seen[s2][q2] = true;
                        frontier.push((s2, q2));
                    }
                }
            }
        }
    }
    seen
}

/// MDP states that co-occur with `q` on some reachable path and from which
/// every action keeps the automaton in `q` with probability one.
///
/// The reachability restriction drops states that never pair with `q`;
/// without it every state would qualify for any absorbing automaton state.
pub fn invariant_set(q: usize, d: &Dfa, m: &LabeledMdp) -> Vec<usize> {
    let seen = reachable_pairs(d, m);
    (0..m.state_count())
        .filter(|&s| {
            seen[s][q] &&
            m.transition[s].iter().all(|dist| {
                dist.iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .all(|(s2, _)| d.step(q, m.labels[s2]) == q)
            })
        })
        .collect()
}

/// MDP states that co-occur with `q` on some reachable path and from which
/// some action moves the automaton from `q` to `q2` with positive
/// probability.
pub fn guard_set(q: usize, q2: usize, d: &Dfa, m: &LabeledMdp) -> Vec<usize> {
    let seen = reachable_pairs(d, m);
    (0..m.state_count())
        .filter(|&s| {
            seen[s][q] &&
            m.transition[s].iter().any(|dist| {
                dist.iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .any(|(s2, _)| d.step(q, m.labels[s2]) == q2)
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ProductStep {
    pub state: EnvState,
    pub q: usize,
    /// Indicator of entering the final set; its expectation is the product
    /// reward.
    pub reward: f64,
    /// Environment-intrinsic reward passed through for task-level shaping.
    pub env_reward: f64,
    pub label: Symbol,
    pub done: bool,
}

/// On-the-fly product of a sample-only environment and a DFA.
///
/// The automaton is driven by the label of the arrived state; episodes end
/// on acceptance, on the DFA sink, or on environment absorption.
pub struct ProductEnv<E: Environment> {
    pub env: E,
    pub dfa: Dfa,
    q: usize,
    done: bool,
}

impl<E: Environment> ProductEnv<E> {
    pub fn new(env: E, dfa: Dfa) -> Self {
        let q = dfa.initial;
        Self {
            env,
            dfa,
            q,
            done: true,
        }
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn action_count(&self) -> usize {
        self.env.action_count()
    }

    pub fn reset(&mut self, rng: &mut dyn RngCore) -> (EnvState, usize) {
        let s0 = self.env.reset(rng);
        self.q = self.dfa.step(self.dfa.initial, self.env.label(&s0));
        self.done = self.dfa.is_accepting(self.q) || self.dfa.is_sink(self.q);
        (s0, self.q)
    }

    /// Forces the product into an arbitrary (state, q) pair; used to start
    /// sub-MDP episodes from a chosen initial distribution.
    pub fn reset_to(&mut self, state: EnvState, q: usize) -> (EnvState, usize) {
        self.q = q;
        self.done = self.dfa.is_accepting(q) || self.dfa.is_sink(q);
        (state, q)
    }

    pub fn step(
        &mut self,
        state: &EnvState,
        action: usize,
        rng: &mut dyn RngCore,
    ) -> Result<ProductStep, ProductError> {
        if self.done {
            return Err(ProductError::SteppedAfterDone);
        }
        let step = self.env.step(state, action, rng);
        let q2 = self.dfa.step(self.q, step.label);
        let entered_final = !self.dfa.is_accepting(self.q) && self.dfa.is_accepting(q2);
        self.done = self.dfa.is_accepting(q2) || self.dfa.is_sink(q2) || step.absorbing;
        self.q = q2;
        Ok(ProductStep {
            state: step.next,
            q: q2,
            reward: if entered_final { 1.0 } else { 0.0 },
            env_reward: step.reward,
            label: step.label,
            done: self.done,
        })
    }
}

/// Checks row-stochasticity of every non-final product row.
pub fn check_row_stochastic(p: &ProductMdp) -> bool {
    p.transition.iter().all(|per_action| {
        per_action.iter().all(|entries| {
            let mut sum = 0.0;
            for &(_, prob) in entries {
                sum += prob;
            }
            (sum - 1.0).abs() <= ROW_SUM_TOLERANCE
        })
    })
}

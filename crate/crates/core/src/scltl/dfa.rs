use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ast::{ApSet, Formula, Symbol};
use super::ScltlError;

pub const DEFAULT_STATE_BUDGET: usize = 10_000;

/// A complete DFA over the alphabet `2^AP`.
///
/// Acceptance latches: a run is accepted as soon as it enters `accepting`,
/// mirroring the absorbing final states of the product construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dfa {
    pub ap: ApSet,
    pub state_names: Vec<String>,
    /// `delta[q][sigma.0 as usize]`
    pub delta: Vec<Vec<usize>>,
    pub initial: usize,
    pub accepting: BTreeSet<usize>,
    pub sink: Option<usize>,
}

impl Dfa {
    pub fn state_count(&self) -> usize {
        self.state_names.len()
    }

    pub fn step(&self, q: usize, sigma: Symbol) -> usize {
        self.delta[q][sigma.0 as usize]
    }

    pub fn is_accepting(&self, q: usize) -> bool {
        self.accepting.contains(&q)
    }

    pub fn is_sink(&self, q: usize) -> bool {
        self.sink == Some(q)
    }

    /// Good-prefix acceptance: true iff the run visits an accepting state
    /// at any point (including the initial state on the empty word).
    pub fn accepts(&self, word: &[Symbol]) -> bool {
        let mut q = self.initial;
        if self.is_accepting(q) {
            return true;
        }
        for &sigma in word {
            q = self.step(q, sigma);
            if self.is_accepting(q) {
                return true;
            }
        }
        false
    }

    /// Structural sanity: every row total, every target in range, sink
    /// self-looping. Construction upholds this; imports are checked.
    pub fn validate(&self) -> Result<(), ScltlError> {
        let n = self.state_count();
        let sigma_count = self.ap.alphabet_size();
        if self.initial >= n {
            return Err(ScltlError::MalformedDfa("initial state out of range".into()));
        }
        if self.delta.len() != n {
            return Err(ScltlError::MalformedDfa("delta row count mismatch".into()));
        }
        for (q, row) in self.delta.iter().enumerate() {
            if row.len() != sigma_count {
                return Err(ScltlError::MalformedDfa(format!(
                    "state {q} has {} transitions, expected {sigma_count}",
                    row.len()
                )));
            }
            if row.iter().any(|&t| t >= n) {
                return Err(ScltlError::MalformedDfa(format!(
                    "state {q} has a transition target out of range"
                )));
            }
        }
        if let Some(sink) = self.sink {
            if self.delta[sink].iter().any(|&t| t != sink) {
                return Err(ScltlError::MalformedDfa("sink is not absorbing".into()));
            }
        }
        for &q in &self.accepting {
            if q >= n {
                return Err(ScltlError::MalformedDfa(
                    "accepting state out of range".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Compiles a PNF formula to a complete DFA by formula progression.
///
/// States are canonical formulas reachable from `simplify(f)`; all states
/// canonically equal to `⊥` merge into the sink. Accepting states are
/// canonical `⊤` plus every state whose runs all reach `⊤`, which is
/// exactly the valid residuals.
pub fn compile_dfa(f: &Formula, ap: &ApSet) -> Result<Dfa, ScltlError> {
    compile_dfa_with_budget(f, ap, DEFAULT_STATE_BUDGET)
}

pub fn compile_dfa_with_budget(
    f: &Formula,
    ap: &ApSet,
    budget: usize,
) -> Result<Dfa, ScltlError> {
    if !f.is_pnf() {
        return Err(ScltlError::NotPnf);
    }
    let init = f.simplify();
    let sigma_count = ap.alphabet_size();

    let mut index: HashMap<Formula, usize> = HashMap::new();
    let mut formulas: Vec<Formula> = Vec::new();
    let mut delta: Vec<Vec<usize>> = Vec::new();
    let mut queue = VecDeque::new();

    let mut intern = |g: Formula,
                      formulas: &mut Vec<Formula>,
                      delta: &mut Vec<Vec<usize>>,
                      queue: &mut VecDeque<usize>|
     -> Result<usize, ScltlError> {
        if let Some(&id) = index.get(&g) {
            return Ok(id);
        }
        let id = formulas.len();
        if id >= budget {
            return Err(ScltlError::StateBudgetExceeded(budget));
        }
        index.insert(g.clone(), id);
        formulas.push(g);
        delta.push(vec![usize::MAX; sigma_count]);
        queue.push_back(id);
        Ok(id)
    };

    let initial = intern(init, &mut formulas, &mut delta, &mut queue)?;
    while let Some(q) = queue.pop_front() {
        let current = formulas[q].clone();
        for bits in 0..sigma_count as u16 {
            let next = current.progress(Symbol(bits));
            let target = intern(next, &mut formulas, &mut delta, &mut queue)?;
            delta[q][bits as usize] = target;
        }
    }

    let mut accepting: BTreeSet<usize> = formulas
        .iter()
        .enumerate()
        .filter(|(_, g)| **g == Formula::True)
        .map(|(i, _)| i)
        .collect();
    // A residual is valid, and its word a good prefix, exactly when no run
    // from it can avoid `⊤` forever (e.g. `F a | F !a` at the start).
    // Shrink the avoiding set to its greatest fixed point and accept the
    // complement.
    let mut avoid: Vec<bool> = (0..formulas.len()).map(|q| !accepting.contains(&q)).collect();
    let mut changed = true;
    while changed {
        changed = false;
        for q in 0..formulas.len() {
            if avoid[q] && !delta[q].iter().any(|&t| avoid[t]) {
                avoid[q] = false;
                changed = true;
            }
        }
    }
    accepting.extend((0..formulas.len()).filter(|&q| !avoid[q]));
    let sink = formulas.iter().position(|g| *g == Formula::False);

    let state_names = (0..formulas.len()).map(|i| format!("q{i}")).collect();
    let dfa = Dfa {
        ap: ap.clone(),
        state_names,
        delta,
        initial,
        accepting,
        sink,
    };
    debug_assert!(dfa.validate().is_ok());
    Ok(dfa)
}

#[derive(Debug, Serialize, Deserialize)]
struct DfaJson {
    states: Vec<String>,
    initial: String,
    accepting: Vec<String>,
    sink: Option<String>,
    ap: Vec<String>,
    transitions: Vec<TransitionJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransitionJson {
    from: String,
    symbol: Vec<String>,
    to: String,
}

impl Dfa {
    pub fn to_json(&self) -> serde_json::Value {
        let mut transitions = Vec::new();
        for (q, row) in self.delta.iter().enumerate() {
            for (bits, &target) in row.iter().enumerate() {
                transitions.push(TransitionJson {
                    from: self.state_names[q].clone(),
                    symbol: self.ap.symbol_props(Symbol(bits as u16)),
                    to: self.state_names[target].clone(),
                });
            }
        }
        let doc = DfaJson {
            states: self.state_names.clone(),
            initial: self.state_names[self.initial].clone(),
            accepting: self
                .accepting
                .iter()
                .map(|&q| self.state_names[q].clone())
                .collect(),
            sink: self.sink.map(|q| self.state_names[q].clone()),
            ap: self.ap.names().to_vec(),
            transitions,
        };
        serde_json::to_value(doc).expect("dfa serialization")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Dfa, ScltlError> {
        let doc: DfaJson = serde_json::from_value(value.clone())
            .map_err(|e| ScltlError::MalformedDfa(e.to_string()))?;
        let ap = ApSet::new(doc.ap)?;
        let n = doc.states.len();
        let index: HashMap<&String, usize> =
            doc.states.iter().enumerate().map(|(i, s)| (s, i)).collect();
        let lookup = |name: &String| -> Result<usize, ScltlError> {
            index
                .get(name)
                .copied()
                .ok_or_else(|| ScltlError::MalformedDfa(format!("unknown state `{name}`")))
        };
        let mut delta = vec![vec![usize::MAX; ap.alphabet_size()]; n];
        for t in &doc.transitions {
            let from = lookup(&t.from)?;
            let to = lookup(&t.to)?;
            let sigma = ap.symbol(t.symbol.iter().map(String::as_str))?;
            delta[from][sigma.0 as usize] = to;
        }
        for (q, row) in delta.iter().enumerate() {
            if let Some(bits) = row.iter().position(|&t| t == usize::MAX) {
                return Err(ScltlError::MalformedDfa(format!(
                    "state `{}` missing transition for symbol {:#b}",
                    doc.states[q], bits
                )));
            }
        }
        let dfa = Dfa {
            initial: lookup(&doc.initial)?,
            accepting: doc
                .accepting
                .iter()
                .map(lookup)
                .collect::<Result<_, _>>()?,
            sink: doc.sink.as_ref().map(lookup).transpose()?,
            state_names: doc.states,
            delta,
            ap,
        };
        dfa.validate()?;
        Ok(dfa)
    }

    /// DOT rendering with guard-compressed edge labels (one edge per target,
    /// listing the symbols that reach it).
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph dfa {\n  rankdir=LR;\n");
        for (q, name) in self.state_names.iter().enumerate() {
            let shape = if self.is_accepting(q) {
                "doublecircle"
            } else {
                "circle"
            };
            let extra = if self.is_sink(q) { ", style=dashed" } else { "" };
            let _ = writeln!(out, "  {q} [label=\"{name}\", shape={shape}{extra}];");
        }
        let _ = writeln!(
            out,
            "  init [shape=point]; init -> {};",
            self.initial
        );
        for (q, row) in self.delta.iter().enumerate() {
            let mut by_target: HashMap<usize, Vec<String>> = HashMap::new();
            for (bits, &target) in row.iter().enumerate() {
                let props = self.ap.symbol_props(Symbol(bits as u16));
                let label = if props.is_empty() {
                    "{}".to_string()
                } else {
                    format!("{{{}}}", props.join(","))
                };
                by_target.entry(target).or_default().push(label);
            }
            let mut targets: Vec<_> = by_target.into_iter().collect();
            targets.sort();
            for (target, labels) in targets {
                let _ = writeln!(
                    out,
                    "  {q} -> {target} [label=\"{}\"];",
                    labels.join(" ")
                );
            }
        }
        out.push_str("}\n");
        out
    }
}

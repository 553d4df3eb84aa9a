//! Causal-dependence graph over automaton states, maximal meta-modes via
//! strongly connected components, level sets, and the level-by-level solve
//! driver.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::mdp::LabeledMdp;
use crate::product::ProductMdp;
use crate::scltl::{ApSet, Dfa, Symbol};

#[derive(Debug, Error)]
pub enum TopoError {
    #[error("meta-modes {0:?} cannot be assigned to any level")]
    Unlevelable(Vec<usize>),
}

/// Directed dependence between automaton states. Self-loops are recorded
/// as flags, not edges.
#[derive(Debug, Clone)]
pub struct CausalGraph {
    pub vertices: usize,
    pub edges: BTreeSet<(usize, usize)>,
    pub self_loop: Vec<bool>,
}

impl CausalGraph {
    pub fn successors(&self, q: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .range((q, 0)..(q + 1, 0))
            .map(|&(_, q2)| q2)
    }
}

/// Builds the causal graph. With a tabular model, edge (q, q') exists iff
/// some MDP state has an action that moves the automaton from q to q' with
/// positive probability (every MDP state is considered, not only those
/// co-occurring with q, so that level ordering stays sound on the whole
/// product). Without a model, the DFA edge structure is used, which
/// over-approximates the model-based graph.
pub fn causal_graph(d: &Dfa, m: Option<&LabeledMdp>) -> CausalGraph {
    let n = d.state_count();
    let mut edges = BTreeSet::new();
    let mut self_loop = vec![false; n];
    match m {
        Some(m) => {
            assert_eq!(m.ap, d.ap, "alphabet mismatch");
            for q in 0..n {
                for s in 0..m.state_count() {
                    for dist in &m.transition[s] {
                        for (s2, &p) in dist.iter().enumerate() {
                            if p > 0.0 {
                                let q2 = d.step(q, m.labels[s2]);
                                if q2 == q {
                                    self_loop[q] = true;
                                } else {
                                    edges.insert((q, q2));
                                }
                            }
                        }
                    }
                }
            }
        }
        None => {
            let all: Vec<Symbol> = d.ap.symbols().collect();
            return causal_graph_structural(d, &all);
        }
    }
    CausalGraph {
        vertices: n,
        edges,
        self_loop,
    }
}

/// Structural causal graph restricted to the given symbols. Labeling
/// functions with mutually exclusive propositions never emit
/// multi-proposition symbols, and those symbols add restart edges that
/// can merge otherwise separate modes.
pub fn causal_graph_structural(d: &Dfa, symbols: &[Symbol]) -> CausalGraph {
    let n = d.state_count();
    let mut edges = BTreeSet::new();
    let mut self_loop = vec![false; n];
    for q in 0..n {
        for &sigma in symbols {
            let q2 = d.step(q, sigma);
            if q2 == q {
                self_loop[q] = true;
            } else {
                edges.insert((q, q2));
            }
        }
    }
    CausalGraph {
        vertices: n,
        edges,
        self_loop,
    }
}

/// The empty symbol plus each single-proposition symbol: the alphabet a
/// labeling over pairwise disjoint regions can emit.
pub fn exclusive_symbols(ap: &ApSet) -> Vec<Symbol> {
    std::iter::once(Symbol::EMPTY)
        .chain((0..ap.names().len()).map(|i| Symbol::EMPTY.with(i)))
        .collect()
}

/// One strongly connected component of the causal graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaMode {
    pub members: BTreeSet<usize>,
}

/// Kosaraju-Sharir SCC decomposition; modes are returned sorted by their
/// smallest member.
pub fn meta_modes(g: &CausalGraph) -> Vec<MetaMode> {
    let n = g.vertices;
    let mut fwd = vec![Vec::new(); n];
    let mut rev = vec![Vec::new(); n];
    for &(a, b) in &g.edges {
        fwd[a].push(b);
        rev[b].push(a);
    }
    // first pass: finish order on the forward graph
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        seen[start] = true;
        while let Some(&mut (v, ref mut i)) = stack.last_mut() {
            if *i < fwd[v].len() {
                let w = fwd[v][*i];
                *i += 1;
                if !seen[w] {
                    seen[w] = true;
                    stack.push((w, 0));
                }
            } else {
                order.push(v);
                stack.pop();
            }
        }
    }
    // second pass: reverse-graph sweeps in reverse finish order
    let mut comp = vec![usize::MAX; n];
    let mut count = 0;
    for &start in order.iter().rev() {
        if comp[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        comp[start] = count;
        while let Some(v) = stack.pop() {
            for &w in &rev[v] {
                if comp[w] == usize::MAX {
                    comp[w] = count;
                    stack.push(w);
                }
            }
        }
        count += 1;
    }
    let mut modes = vec![BTreeSet::new(); count];
    for q in 0..n {
        modes[comp[q]].insert(q);
    }
    modes.sort_by_key(|m| *m.iter().next().unwrap());
    modes.into_iter().map(|members| MetaMode { members }).collect()
}

/// Ordered level sets over meta-modes. Index 0 holds accepting and sink
/// modes (plus repaired dead-end modes); every other level's modes depend
/// only on strictly lower levels, with at least one edge one level down.
#[derive(Debug, Clone)]
pub struct LevelPartition {
    pub modes: Vec<MetaMode>,
    /// `levels[i]` lists indices into `modes`.
    pub levels: Vec<Vec<usize>>,
    /// True when a non-accepting dead-end mode had to be assigned to L0.
    pub repaired: bool,
}

impl LevelPartition {
    pub fn level_of_mode(&self, mode: usize) -> usize {
        self.levels
            .iter()
            .position(|l| l.contains(&mode))
            .expect("mode not assigned")
    }

    pub fn mode_of_state(&self, q: usize) -> usize {
        self.modes
            .iter()
            .position(|m| m.members.contains(&q))
            .expect("automaton state not in any mode")
    }

    pub fn level_of_state(&self, q: usize) -> usize {
        self.level_of_mode(self.mode_of_state(q))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "levels": self
                .levels
                .iter()
                .enumerate()
                .map(|(i, level)| {
                    serde_json::json!({
                        "level": i,
                        "modes": level
                            .iter()
                            .map(|&m| self.modes[m].members.iter().cloned().collect::<Vec<_>>())
                            .collect::<Vec<_>>(),
                    })
                })
                .collect::<Vec<_>>(),
            "repaired": self.repaired,
        })
    }

    /// DOT rendering of the meta-mode quotient DAG with one rank band per
    /// level.
    pub fn quotient_dot(&self, g: &CausalGraph) -> String {
        let mut out = String::from("digraph levels {\n  rankdir=BT;\n");
        for (i, level) in self.levels.iter().enumerate() {
            out.push_str(&format!("  {{ rank=same; /* L{i} */"));
            for &m in level {
                out.push_str(&format!(" X{m};"));
            }
            out.push_str(" }\n");
        }
        for (m, mode) in self.modes.iter().enumerate() {
            let label: Vec<String> = mode.members.iter().map(|q| format!("q{q}")).collect();
            out.push_str(&format!(
                "  X{m} [label=\"{{{}}}\"];\n",
                label.join(",")
            ));
        }
        let mut quotient = BTreeSet::new();
        for &(a, b) in &g.edges {
            let (ma, mb) = (self.mode_of_state(a), self.mode_of_state(b));
            if ma != mb {
                quotient.insert((ma, mb));
            }
        }
        for (a, b) in quotient {
            out.push_str(&format!("  X{a} -> X{b};\n"));
        }
        out.push_str("}\n");
        out
    }
}

/// Assigns meta-modes to levels: L0 seeds from accepting/sink membership,
/// each later level takes the modes whose dependencies are all assigned
/// and include something one level down.
pub fn level_sets(
    modes: Vec<MetaMode>,
    g: &CausalGraph,
    d: &Dfa,
) -> Result<LevelPartition, TopoError> {
    let k = modes.len();
    let mut mode_of = vec![usize::MAX; g.vertices];
    for (i, m) in modes.iter().enumerate() {
        for &q in &m.members {
            mode_of[q] = i;
        }
    }
    let mut out_edges: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); k];
    for &(a, b) in &g.edges {
        if mode_of[a] != mode_of[b] {
            out_edges[mode_of[a]].insert(mode_of[b]);
        }
    }

    let mut level = vec![usize::MAX; k];
    let mut repaired = false;
    for (i, m) in modes.iter().enumerate() {
        let terminal = out_edges[i].is_empty();
        let seed = m.members.iter().any(|&q| d.is_accepting(q) || d.is_sink(q));
        if seed || terminal {
            level[i] = 0;
            if terminal && !seed {
                repaired = true;
            }
        }
    }
    let mut levels = vec![(0..k).filter(|&i| level[i] == 0).collect::<Vec<_>>()];

    let mut assigned = levels[0].len();
    let mut current = 1usize;
    while assigned < k {
        let next: Vec<usize> = (0..k)
            .filter(|&i| {
                level[i] == usize::MAX
                    && out_edges[i].iter().all(|&j| level[j] != usize::MAX)
                    && out_edges[i].iter().any(|&j| level[j] == current - 1)
            })
            .collect();
        if next.is_empty() {
            let leftover: Vec<usize> = (0..k).filter(|&i| level[i] == usize::MAX).collect();
            return Err(TopoError::Unlevelable(leftover));
        }
        for &i in &next {
            level[i] = current;
        }
        assigned += next.len();
        levels.push(next);
        current += 1;
    }
    Ok(LevelPartition {
        modes,
        levels,
        repaired,
    })
}

/// Convenience: causal graph, meta-modes, and levels in one call.
/// Sequential visiting task over regions A..D with obstacle O: from the
/// start, reach C after A, or B after D, avoiding O throughout.
pub const SEQUENTIAL_VISITING: &str = "!O U ((A & ((!D & !O) U C)) | (D & ((!A & !O) U B)))";

pub fn decompose(d: &Dfa, m: Option<&LabeledMdp>) -> Result<(CausalGraph, LevelPartition), TopoError> {
    let g = causal_graph(d, m);
    let part = level_sets(meta_modes(&g), &g, d)?;
    Ok((g, part))
}

#[derive(Debug, Error)]
#[error("level {level} solver failed: {source}")]
pub struct LevelSolveError<E: std::error::Error + 'static> {
    pub level: usize,
    #[source]
    pub source: E,
}

/// Solves the product level by level. Level-0 values start at zero; each
/// higher level is handed the frozen values of everything below it via the
/// active mask. The solver callback gets `(product, active, init)` and
/// returns a full table whose active entries are merged.
pub fn solve_by_levels<E: std::error::Error>(
    p: &ProductMdp,
    part: &LevelPartition,
    base_active: &[bool],
    mut solver: impl FnMut(&ProductMdp, &[bool], &[f64]) -> Result<Vec<f64>, E>,
) -> Result<Vec<f64>, LevelSolveError<E>> {
    let n = p.state_count();
    let mut v = vec![0.0; n];
    for (li, level) in part.levels.iter().enumerate().skip(1) {
        let in_level: BTreeSet<usize> = level
            .iter()
            .flat_map(|&m| part.modes[m].members.iter().cloned())
            .collect();
        let active: Vec<bool> = (0..n)
            .map(|z| base_active[z] && in_level.contains(&p.split(z).1))
            .collect();
        if !active.iter().any(|&a| a) {
            continue;
        }
        let solved = solver(p, &active, &v).map_err(|e| LevelSolveError {
            level: li,
            source: e,
        })?;
        for z in 0..n {
            if active[z] {
                v[z] = solved[z];
            }
        }
    }
    Ok(v)
}

use rand::Rng;

use crate::mdp::LabeledMdp;
use crate::scltl::{ApSet, Symbol};

/// Three-state chain with a single action: s0 self-loops with 0.5 and
/// advances with 0.5; s1 self-loops with 0.6 and reaches the labeled s2
/// with 0.4; s2 is absorbing. AP = {s2}, L(s2) = {s2}.
pub fn chain_mdp() -> LabeledMdp {
    let ap = ApSet::new(["s2"]).unwrap();
    LabeledMdp {
        states: vec!["s0".into(), "s1".into(), "s2".into()],
        actions: vec!["a1".into()],
        transition: vec![
            vec![vec![0.5, 0.5, 0.0]],
            vec![vec![0.0, 0.6, 0.4]],
            vec![vec![0.0, 0.0, 1.0]],
        ],
        initial: 0,
        labels: vec![Symbol::EMPTY, Symbol::EMPTY, Symbol(0b1)],
        ap,
    }
}

/// Random row-stochastic labeled MDP for equivalence and property tests.
///
/// Every row gets full support to keep products well-connected; labels are
/// drawn uniformly over `2^AP`.
pub fn random_mdp(
    rng: &mut impl Rng,
    n_states: usize,
    n_actions: usize,
    ap: &ApSet,
) -> LabeledMdp {
    let transition = (0..n_states)
        .map(|_| {
            (0..n_actions)
                .map(|_| {
                    let raw: Vec<f64> = (0..n_states).map(|_| rng.gen_range(0.05..1.0)).collect();
                    let total: f64 = raw.iter().sum();
                    raw.iter().map(|x| x / total).collect()
                })
                .collect()
        })
        .collect();
    let labels = (0..n_states)
        .map(|_| Symbol(rng.gen_range(0..ap.alphabet_size() as u16)))
        .collect();
    LabeledMdp {
        states: (0..n_states).map(|i| format!("s{i}")).collect(),
        actions: (0..n_actions).map(|i| format!("a{i}")).collect(),
        transition,
        initial: 0,
        labels,
        ap: ap.clone(),
    }
}

/// Square grid world with four move actions and a slip probability; the
/// intended move succeeds with `1 - slip`, otherwise the agent stays put.
/// `regions` assigns a proposition index to selected cells.
pub fn grid_world(
    side: usize,
    slip: f64,
    ap: &ApSet,
    regions: &[(usize, usize, usize)],
) -> LabeledMdp {
    let n = side * side;
    let idx = |x: usize, y: usize| y * side + x;
    let mut labels = vec![Symbol::EMPTY; n];
    for &(x, y, prop) in regions {
        labels[idx(x, y)] = labels[idx(x, y)].with(prop);
    }
    let mut transition = vec![vec![vec![0.0; n]; 4]; n];
    for y in 0..side {
        for x in 0..side {
            let s = idx(x, y);
            let moves = [
                (x, y.saturating_sub(1)),
                (x, (y + 1).min(side - 1)),
                (x.saturating_sub(1), y),
                ((x + 1).min(side - 1), y),
            ];
            for (a, &(nx, ny)) in moves.iter().enumerate() {
                let target = idx(nx, ny);
                transition[s][a][target] += 1.0 - slip;
                transition[s][a][s] += slip;
            }
        }
    }
    LabeledMdp {
        states: (0..n).map(|i| format!("s{i}")).collect(),
        actions: ["up", "down", "left", "right"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        transition,
        initial: 0,
        labels,
        ap: ap.clone(),
    }
}

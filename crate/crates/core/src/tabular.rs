//! Exact mellowmax value iteration on tabular product MDPs and
//! optimal-policy extraction. This solver is the oracle for every
//! approximate component.

use thiserror::Error;

use crate::product::ProductMdp;

/// Values indexed by product state `z`.
pub type ValueTable = Vec<f64>;

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub gamma: f64,
    pub tau: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 1.0,
            tolerance: 1e-10,
            max_iterations: 100_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("no convergence after {iterations} sweeps, last sup-norm delta {last_delta}")]
    NoConvergence { iterations: usize, last_delta: f64 },
}

/// `τ log Σ_a exp(q_a / τ)`, evaluated in shifted form. Upper-bounds the
/// max by at most `τ log |A|` and collapses to it for a single entry.
pub fn mellowmax(q: &[f64], tau: f64) -> f64 {
    assert!(!q.is_empty() && tau > 0.0);
    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + tau * q.iter().map(|&x| ((x - m) / tau).exp()).sum::<f64>().ln()
}

/// Boltzmann distribution `exp((q_a − mm q) / τ)`; sums to 1 by
/// construction.
pub fn softmax_policy(q: &[f64], tau: f64) -> Vec<f64> {
    let mm = mellowmax(q, tau);
    q.iter().map(|&x| ((x - mm) / tau).exp()).collect()
}

fn q_values(p: &ProductMdp, v: &[f64], z: usize, gamma: f64) -> Vec<f64> {
    (0..p.action_count())
        .map(|a| {
            let future: f64 = p.transition[z][a]
                .iter()
                .map(|&(z2, prob)| prob * v[z2])
                .sum();
            p.reward[z][a] + gamma * future
        })
        .collect()
}

/// States the solver may update: non-final states that can still reach the
/// final set. Final states, the DFA sink, and dead states are pinned to
/// zero; backing them up would manufacture the spurious entropy bonus
/// `τ log|A| / (1 − γ)` instead of their true zero value.
pub fn default_active(p: &ProductMdp) -> Vec<bool> {
    let n = p.state_count();
    let mut can_reach = p.is_final.clone();
    let mut changed = true;
    while changed {
        changed = false;
        for z in 0..n {
            if can_reach[z] {
                continue;
            }
            let reaches = (0..p.action_count())
                .any(|a| p.transition[z][a].iter().any(|&(z2, _)| can_reach[z2]));
            if reaches {
                can_reach[z] = true;
                changed = true;
            }
        }
    }
    (0..n).map(|z| can_reach[z] && !p.is_final[z]).collect()
}

/// One synchronous sweep; entries with `active[z] == false` are copied
/// through untouched.
pub fn mellowmax_backup(
    v: &[f64],
    p: &ProductMdp,
    cfg: &SolverConfig,
    active: &[bool],
) -> ValueTable {
    assert_eq!(v.len(), p.state_count());
    (0..p.state_count())
        .map(|z| {
            if active[z] {
                mellowmax(&q_values(p, v, z, cfg.gamma), cfg.tau)
            } else {
                v[z]
            }
        })
        .collect()
}

/// Sweeps from `init` until the sup-norm change over active states drops
/// below `cfg.tolerance`.
pub fn value_iteration_from(
    p: &ProductMdp,
    cfg: &SolverConfig,
    active: &[bool],
    init: &[f64],
) -> Result<ValueTable, SolverError> {
    let mut v = init.to_vec();
    let mut last_delta = f64::INFINITY;
    for _ in 0..cfg.max_iterations {
        let next = mellowmax_backup(&v, p, cfg, active);
        last_delta = v
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if last_delta < cfg.tolerance {
            return Ok(v);
        }
    }
    Err(SolverError::NoConvergence {
        iterations: cfg.max_iterations,
        last_delta,
    })
}

/// Whole-product solve: zeros on final and sink states, iterate everywhere
/// else.
pub fn value_iteration(p: &ProductMdp, cfg: &SolverConfig) -> Result<ValueTable, SolverError> {
    let active = default_active(p);
    value_iteration_from(p, cfg, &active, &vec![0.0; p.state_count()])
}

/// Per-state action distributions `exp((Q − mm Q) / τ)`. At the converged
/// fixed point `mm Q = V`, matching the optimal-policy formula.
pub fn extract_policy(v: &[f64], p: &ProductMdp, cfg: &SolverConfig) -> Vec<Vec<f64>> {
    (0..p.state_count())
        .map(|z| softmax_policy(&q_values(p, v, z, cfg.gamma), cfg.tau))
        .collect()
}

/// CSV export with header `s,q,value`.
pub fn value_table_to_csv(v: &[f64], p: &ProductMdp) -> String {
    let mut out = String::from("s,q,value\n");
    for (z, val) in v.iter().enumerate() {
        let (s, q) = p.split(z);
        out.push_str(&format!("{s},{q},{val}\n"));
    }
    out
}

pub fn value_table_to_json(v: &[f64], p: &ProductMdp) -> serde_json::Value {
    serde_json::Value::Array(
        v.iter()
            .enumerate()
            .map(|(z, val)| {
                let (s, q) = p.split(z);
                serde_json::json!({"s": s, "q": q, "value": val})
            })
            .collect(),
    )
}

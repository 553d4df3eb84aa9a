//! Temporary sweep harness for the Dubins trainer hyperparameters.
//! Delete before finalizing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tsynth_core::approx::Routing;
use tsynth_core::envs::{DubinsEnv, WorkspaceConfig};
use tsynth_core::sac::{train, training_levels, DubinsTask, TaskEnv, TrainerConfig, ValuePolicy};
use tsynth_core::scltl::{compile_dfa, parse_formula};
use tsynth_core::topo::{
    causal_graph_structural, exclusive_symbols, level_sets, meta_modes, SEQUENTIAL_VISITING,
};

fn diagnose(routing: Routing, use_levels: bool, cfg: &TrainerConfig, label: &str) {
    let env = DubinsEnv::new(WorkspaceConfig::default_five_by_five());
    let ap = env.ap.clone();
    let dfa = compile_dfa(
        &parse_formula(SEQUENTIAL_VISITING, &ap).unwrap().to_pnf().unwrap(),
        &ap,
    )
    .unwrap();
    let g = causal_graph_structural(&dfa, &exclusive_symbols(&dfa.ap));
    let part = level_sets(meta_modes(&g), &g, &dfa).unwrap();
    let (lv, zero) = training_levels(&part);
    let levels = if use_levels {
        lv
    } else {
        let mut merged: Vec<usize> = lv.into_iter().flatten().collect();
        merged.sort_unstable();
        vec![merged]
    };
    let mut task = DubinsTask::new(env, dfa);
    let out = train(&mut task, &levels, &zero, routing, cfg).unwrap();
    let m = out.model;

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut reach1 = 0;
    let mut reach3 = 0;
    let mut sat = 0;
    let mut term = std::collections::BTreeMap::new();
    let mut lens = Vec::new();
    for _ in 0..100 {
        let (mut state, mut q) = task.reset(&mut rng);
        let mut seen1 = false;
        let mut seen3 = false;
        let mut s = false;
        let mut len = 0;
        for _ in 0..cfg.horizon {
            let pi = ValuePolicy::policy(&m, &state, q);
            let a = tsynth_core::mdp::sample_index(&pi, &mut rng);
            let step = task.step(&state, a, &mut rng);
            len += 1;
            s |= step.satisfied;
            state = step.next;
            q = step.next_q;
            seen1 |= q == 1;
            seen3 |= q == 3;
            if step.done {
                break;
            }
        }
        *term.entry(q).or_insert(0usize) += 1;
        lens.push(len);
        reach1 += seen1 as usize;
        reach3 += seen3 as usize;
        sat += s as usize;
    }
    let mean_len: f64 = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
    let start = vec![3.0, 0.0, std::f64::consts::FRAC_PI_2];
    let pi0 = ValuePolicy::policy(&m, &start, 0);
    let v0 = ValuePolicy::value(&m, &start, 0);
    let in_a = vec![1.25, 1.25, 0.0];
    let pi1 = ValuePolicy::policy(&m, &in_a, 1);
    let v1 = ValuePolicy::value(&m, &in_a, 1);
    println!(
        "{label}: sat {sat}/100 reachA {reach1} reachD {reach3} len {mean_len:.1} term {term:?}"
    );
    println!("  start q0: pi {pi0:.3?} V {v0:.2} | in-A q1 (heading E): pi {pi1:.3?} V {v1:.2}");
    let rows: Vec<String> = out
        .metrics
        .iter()
        .filter(|r| r.step % 1000 == 0)
        .map(|r| {
            format!(
                "({} l{} v{:.1} len{} eta{:.1e})",
                r.step, r.level, r.v_z0, r.episode_length, r.eta
            )
        })
        .collect();
    println!("  curve: {}", rows.join(" "));
}

#[test]
fn probe() {
    let base = TrainerConfig {
        seed: 0,
        inner_iterations: 3000,
        decay_steps: 2000,
        ..TrainerConfig::dubins_default()
    };
    diagnose(Routing::PerState, true, &base, "leveled 2x");
    let flat = TrainerConfig {
        inner_iterations: base.inner_iterations * 2,
        ..base.clone()
    };
    diagnose(Routing::PerState, false, &flat, "flat 2x");
    diagnose(Routing::Shared, false, &flat, "single 2x");
}

//! Temporary diagnostic: scripted subgoal-seeking policy on the Dubins
//! workspace, plus rollout statistics. Not part of the suite; delete.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tsynth_core::envs::{DubinsEnv, WorkspaceConfig};
use tsynth_core::sac::{DubinsTask, TaskEnv};
use tsynth_core::scltl::{compile_dfa, parse_formula};
use tsynth_core::topo::SEQUENTIAL_VISITING;

fn angle_to(z: &[f64], gx: f64, gy: f64) -> f64 {
    (gy - z[1]).atan2(gx - z[0])
}

fn wrap(t: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    (t + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI
}

#[test]
#[ignore]
fn scripted_policy_feasibility() {
    let cfg = WorkspaceConfig::default_five_by_five();
    let subgoals = cfg.subgoals.clone();
    let env = DubinsEnv::new(cfg);
    let ap = env.ap.clone();
    let formula = parse_formula(SEQUENTIAL_VISITING, &ap)
        .unwrap()
        .to_pnf()
        .unwrap();
    let dfa = compile_dfa(&formula, &ap).unwrap();
    let mut task = DubinsTask::new(env, dfa);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut successes = 0;
    let mut lengths = Vec::new();
    let mut term_q = std::collections::BTreeMap::new();
    for _ep in 0..200 {
        let (mut state, mut q) = task.reset(&mut rng);
        let mut sat = false;
        let mut len = 0;
        for _ in 0..100 {
            let action = match subgoals.get(&q) {
                Some(&(gx, gy)) => {
                    let err = wrap(angle_to(&state, gx, gy) - state[2]);
                    if err > 0.15 {
                        2
                    } else if err < -0.15 {
                        0
                    } else {
                        1
                    }
                }
                None => 1,
            };
            let step = task.step(&state, action, &mut rng);
            len += 1;
            sat |= step.satisfied;
            state = step.next;
            q = step.next_q;
            if step.done {
                break;
            }
        }
        *term_q.entry(q).or_insert(0usize) += 1;
        lengths.push(len);
        successes += sat as usize;
    }
    let mean_len: f64 = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
    println!(
        "scripted: success {}/200, mean length {:.1}, terminal q counts {:?}",
        successes, mean_len, term_q
    );
}

//! Cart-pole balancing with the classic constants: Euler integration at
//! 20 ms, termination at 15 degrees or 2.4 m, 500-step cap, reward 1 per
//! alive step.

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::mdp::{EnvState, EnvStep, Environment};
use crate::scltl::{ApSet, Symbol};

pub const GRAVITY: f64 = 9.8;
pub const CART_MASS: f64 = 1.0;
pub const POLE_MASS: f64 = 0.1;
pub const POLE_HALF_LENGTH: f64 = 0.5;
pub const FORCE_MAG: f64 = 10.0;
pub const DT: f64 = 0.02;
pub const ANGLE_LIMIT: f64 = 15.0 * std::f64::consts::PI / 180.0;
pub const POSITION_LIMIT: f64 = 2.4;
pub const MAX_STEPS: usize = 500;

#[derive(Debug, Error)]
pub enum CartPoleError {
    #[error("step called on a terminal state")]
    SteppedAfterDone,
}

/// True when the physical state alone ends the episode (the step cap is
/// tracked by the environment instance).
pub fn is_terminal(state: &[f64]) -> bool {
    state[0].abs() > POSITION_LIMIT || state[2].abs() > ANGLE_LIMIT
}

/// One Euler step of the classic dynamics; `action` 0 pushes back,
/// 1 pushes forward. Deterministic.
pub fn cartpole_step(state: &[f64], action: usize) -> Result<(Vec<f64>, f64, bool), CartPoleError> {
    if is_terminal(state) {
        return Err(CartPoleError::SteppedAfterDone);
    }
    let (x, x_dot, theta, theta_dot) = (state[0], state[1], state[2], state[3]);
    let force = if action == 1 { FORCE_MAG } else { -FORCE_MAG };
    let total_mass = CART_MASS + POLE_MASS;
    let pole_mass_length = POLE_MASS * POLE_HALF_LENGTH;
    let (sin_t, cos_t) = theta.sin_cos();
    let temp = (force + pole_mass_length * theta_dot * theta_dot * sin_t) / total_mass;
    let theta_acc = (GRAVITY * sin_t - cos_t * temp)
        / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos_t * cos_t / total_mass));
    let x_acc = temp - pole_mass_length * theta_acc * cos_t / total_mass;
    let next = vec![
        x + DT * x_dot,
        x_dot + DT * x_acc,
        theta + DT * theta_dot,
        theta_dot + DT * theta_acc,
    ];
    let done = is_terminal(&next);
    Ok((next, 1.0, done))
}

/// Stateful wrapper tracking the 500-step cap.
pub struct CartPoleEnv {
    pub ap: ApSet,
    steps: usize,
}

impl CartPoleEnv {
    pub fn new() -> Self {
        Self {
            ap: ApSet::new(Vec::<String>::new()).unwrap(),
            steps: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }
}

impl Default for CartPoleEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for CartPoleEnv {
    fn reset(&mut self, rng: &mut dyn RngCore) -> EnvState {
        self.steps = 0;
        (0..4).map(|_| rng.gen_range(-0.05..0.05)).collect()
    }

    fn step(&mut self, state: &EnvState, action: usize, _rng: &mut dyn RngCore) -> EnvStep {
        match cartpole_step(state, action) {
            Ok((next, reward, done)) => {
                self.steps += 1;
                let capped = self.steps >= MAX_STEPS;
                EnvStep {
                    next,
                    label: Symbol::EMPTY,
                    reward,
                    absorbing: done || capped,
                }
            }
            Err(CartPoleError::SteppedAfterDone) => EnvStep {
                next: state.clone(),
                label: Symbol::EMPTY,
                reward: 0.0,
                absorbing: true,
            },
        }
    }

    fn action_count(&self) -> usize {
        2
    }

    fn state_dimension(&self) -> usize {
        4
    }

    fn label(&self, _state: &EnvState) -> Symbol {
        Symbol::EMPTY
    }

    fn is_generative(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_from_upright_is_alive() {
        for action in [0, 1] {
            let (next, r, done) = cartpole_step(&[0.0; 4], action).unwrap();
            assert_eq!(r, 1.0);
            assert!(!done);
            assert!(next[2].abs() < ANGLE_LIMIT);
        }
    }

    #[test]
    fn full_episode_caps_at_500_with_total_reward_500() {
        let mut env = CartPoleEnv::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset(&mut rng);
        let mut total = 0.0;
        let mut done = false;
        // hold the cart at the generative upright state so only the cap fires
        for i in 0..MAX_STEPS {
            let step = env.step(&vec![0.0; 4], i % 2, &mut rng);
            total += step.reward;
            done = step.absorbing;
            if done && i + 1 < MAX_STEPS {
                panic!("terminated early at step {i}");
            }
        }
        assert!(done);
        assert_eq!(total, 500.0);
    }

    #[test]
    fn over_threshold_state_rejects_stepping() {
        assert!(matches!(
            cartpole_step(&[0.0, 0.0, 0.3, 0.0], 0),
            Err(CartPoleError::SteppedAfterDone)
        ));
        assert!(matches!(
            cartpole_step(&[2.5, 0.0, 0.0, 0.0], 1),
            Err(CartPoleError::SteppedAfterDone)
        ));
        // stateful wrapper yields no further reward
        let mut env = CartPoleEnv::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let step = env.step(&vec![0.0, 0.0, 0.3, 0.0], 0, &mut rng);
        assert_eq!(step.reward, 0.0);
        assert!(step.absorbing);
    }

    #[test]
    fn termination_is_exhaustive_with_alive_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let state: Vec<f64> = vec![
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-2.0..2.0),
            ];
            let terminal = is_terminal(&state);
            let alive = state[0].abs() <= POSITION_LIMIT && state[2].abs() <= ANGLE_LIMIT;
            assert_ne!(terminal, alive);
        }
    }
}

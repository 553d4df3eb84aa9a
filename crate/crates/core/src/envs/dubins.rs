//! Dubins car in a labeled planar workspace: constant speed, three
//! steering actions, additive white noise, region-membership labeling,
//! and potential-style reward shaping toward per-automaton-state
//! subgoals.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{EnvState, EnvStep, Environment};
use crate::scltl::{ApSet, Symbol};

pub const SPEED: f64 = 0.3;
pub const TURN_RATE: f64 = 2.0 * std::f64::consts::PI / 15.0;
pub const DT: f64 = 1.0;
pub const DEFAULT_NOISE_STD: f64 = 1e-2;
pub const SATISFACTION_REWARD: f64 = 10.0;
pub const COLLISION_PENALTY: f64 = -1.0;
pub const SHAPING_SCALE: f64 = 5.0;

#[derive(Debug, Error)]
pub enum DubinsError {
    #[error("automaton state {0} has no subgoal")]
    NoSubgoal(usize),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        Self {
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }

    pub fn square(cx: f64, cy: f64, side: f64) -> Self {
        let h = side / 2.0;
        Self::new(cx - h, cx + h, cy - h, cy + h)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// Workspace geometry, labeling, and the subgoal table keyed by compiled
/// automaton state index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkspaceConfig {
    pub bounds: Rect,
    /// Proposition name -> region; the obstacle proposition is separate.
    pub regions: Vec<(String, Rect)>,
    pub obstacles: Vec<Rect>,
    pub obstacle_prop: String,
    pub start: [f64; 3],
    pub noise_std: f64,
    pub subgoals: BTreeMap<usize, (f64, f64)>,
}

impl WorkspaceConfig {
    /// 5x5 workspace: half-meter squares A, C on the lower band, B, D on
    /// the upper band, and two obstacle slabs leaving a gap at x in
    /// [2, 3.5], so the start column is clear of both slabs. Subgoal keys
    /// follow the compiled automaton indices of the sequential-visiting
    /// task: 0 initial -> A, 1 after A -> C, 3 after D -> B.
    pub fn default_five_by_five() -> Self {
        Self {
            bounds: Rect::new(0.0, 5.0, 0.0, 5.0),
            regions: vec![
                ("A".into(), Rect::square(1.25, 1.25, 0.5)),
                ("B".into(), Rect::square(4.25, 4.25, 0.5)),
                ("C".into(), Rect::square(4.25, 1.25, 0.5)),
                ("D".into(), Rect::square(1.25, 4.25, 0.5)),
            ],
            obstacles: vec![
                Rect::new(0.0, 2.0, 2.75, 3.25),
                Rect::new(3.5, 5.0, 2.75, 3.25),
            ],
            obstacle_prop: "O".into(),
            start: [3.0, 0.0, std::f64::consts::FRAC_PI_2],
            noise_std: DEFAULT_NOISE_STD,
            subgoals: BTreeMap::from([
                (0, (1.25, 1.25)),
                (1, (4.25, 1.25)),
                (3, (4.25, 4.25)),
            ]),
        }
    }

    pub fn ap(&self) -> ApSet {
        let names: Vec<String> = self
            .regions
            .iter()
            .map(|(n, _)| n.clone())
            .chain(std::iter::once(self.obstacle_prop.clone()))
            .collect();
        ApSet::new(names).unwrap()
    }

    pub fn in_obstacle(&self, x: f64, y: f64) -> bool {
        self.obstacles.iter().any(|r| r.contains(x, y))
    }

    pub fn out_of_bounds(&self, x: f64, y: f64) -> bool {
        !self.bounds.contains(x, y)
    }

    pub fn label(&self, ap: &ApSet, x: f64, y: f64) -> Symbol {
        let mut names: Vec<&str> = self
            .regions
            .iter()
            .filter(|(_, r)| r.contains(x, y))
            .map(|(n, _)| n.as_str())
            .collect();
        if self.in_obstacle(x, y) {
            names.push(self.obstacle_prop.as_str());
        }
        ap.symbol(&names).unwrap()
    }
}

pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = (theta + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if t <= -std::f64::consts::PI {
        t += two_pi;
    }
    t
}

fn gauss(rng: &mut dyn RngCore) -> f64 {
    // Box-Muller from two uniforms
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// z' = z + noise + zdot * dt with zdot = (v cos th, v sin th, u).
pub fn dubins_step(
    z: &[f64],
    u: f64,
    noise_std: f64,
    rng: &mut dyn RngCore,
) -> (Vec<f64>, [f64; 3]) {
    let zdot = [SPEED * z[2].cos(), SPEED * z[2].sin(), u];
    let noise: Vec<f64> = (0..3)
        .map(|_| if noise_std > 0.0 { noise_std * gauss(rng) } else { 0.0 })
        .collect();
    let next = vec![
        z[0] + noise[0] + zdot[0] * DT,
        z[1] + noise[1] + zdot[1] * DT,
        wrap_angle(z[2] + noise[2] + zdot[2] * DT),
    ];
    (next, zdot)
}

/// Planar velocity projected on the unit direction to q's subgoal, scaled
/// by 5; at full speed straight at the subgoal this is 1.5.
pub fn shaped_reward(
    z: &[f64],
    zdot: &[f64; 3],
    q: usize,
    cfg: &WorkspaceConfig,
) -> Result<f64, DubinsError> {
    let &(gx, gy) = cfg.subgoals.get(&q).ok_or(DubinsError::NoSubgoal(q))?;
    let (dx, dy) = (gx - z[0], gy - z[1]);
    let norm = (dx * dx + dy * dy).sqrt();
    if norm == 0.0 {
        return Ok(0.0);
    }
    Ok(SHAPING_SCALE * (zdot[0] * dx + zdot[1] * dy) / norm)
}

pub struct DubinsEnv {
    pub cfg: WorkspaceConfig,
    pub ap: ApSet,
}

impl DubinsEnv {
    pub fn new(cfg: WorkspaceConfig) -> Self {
        let ap = cfg.ap();
        Self { cfg, ap }
    }

    pub fn action_turn_rate(action: usize) -> f64 {
        match action {
            0 => -TURN_RATE,
            1 => 0.0,
            _ => TURN_RATE,
        }
    }

    /// The planar velocity the last dynamics step would produce; used by
    /// the task wrapper for shaping without re-stepping.
    pub fn velocity(z: &[f64], action: usize) -> [f64; 3] {
        [
            SPEED * z[2].cos(),
            SPEED * z[2].sin(),
            Self::action_turn_rate(action),
        ]
    }
}

impl Environment for DubinsEnv {
    fn reset(&mut self, _rng: &mut dyn RngCore) -> EnvState {
        self.cfg.start.to_vec()
    }

    fn step(&mut self, state: &EnvState, action: usize, rng: &mut dyn RngCore) -> EnvStep {
        let u = Self::action_turn_rate(action);
        let (next, _) = dubins_step(state, u, self.cfg.noise_std, rng);
        let collided = self.cfg.in_obstacle(next[0], next[1]);
        let oob = self.cfg.out_of_bounds(next[0], next[1]);
        EnvStep {
            label: self.cfg.label(&self.ap, next[0], next[1]),
            reward: if collided || oob { COLLISION_PENALTY } else { 0.0 },
            absorbing: oob,
            next,
        }
    }

    fn action_count(&self) -> usize {
        3
    }

    fn state_dimension(&self) -> usize {
        3
    }

    fn label(&self, state: &EnvState) -> Symbol {
        self.cfg.label(&self.ap, state[0], state[1])
    }

    fn is_generative(&self) -> bool {
        true
    }
}

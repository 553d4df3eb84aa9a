//! Benchmark environments: cart-pole balancing, the Dubins-car labeled
//! workspace, and small tabular models for oracle tests.

pub mod cartpole;
pub mod dubins;
mod grid;

pub use cartpole::CartPoleEnv;
pub use dubins::{DubinsEnv, Rect, WorkspaceConfig};
pub use grid::{chain_mdp, grid_world, random_mdp};

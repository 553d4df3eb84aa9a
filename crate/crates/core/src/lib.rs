//! Policy synthesis for stochastic systems with co-safe temporal-logic
//! tasks: scLTL-to-DFA compilation, product MDP construction, topological
//! decomposition into level sets, exact mellowmax value iteration, and a
//! sequential augmented-Lagrangian actor-critic for continuous state
//! spaces with per-automaton-state function approximators.

pub mod approx;
pub mod envs;
pub mod mdp;
pub mod product;
pub mod sac;
pub mod scltl;
pub mod tabular;
pub mod topo;

pub use mdp::{Environment, LabeledMdp, Path, Policy};
pub use product::{build_product, ProductEnv, ProductMdp};
pub use scltl::{ApSet, Dfa, Formula, Symbol};

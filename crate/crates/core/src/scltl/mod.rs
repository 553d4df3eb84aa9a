//! scLTL formulas and their compilation to complete DFAs over `2^AP`.
//!
//! The compiler uses formula progression with canonical boolean
//! simplification; states are canonical formulas, the accepting state is
//! `⊤`, and everything canonically equal to `⊥` merges into the sink.

mod ast;
mod dfa;
mod parser;

pub use ast::{ApSet, Formula, Symbol, MAX_PROPS};
pub use dfa::{compile_dfa, compile_dfa_with_budget, Dfa, DEFAULT_STATE_BUDGET};
pub use parser::parse_formula;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScltlError {
    #[error("syntax error at position {position}: expected {expected}")]
    Syntax { position: usize, expected: String },
    #[error("unknown proposition `{0}`")]
    UnknownProposition(String),
    #[error("proposition name `{0}` is not a nonempty alphanumeric/underscore identifier")]
    BadPropositionName(String),
    #[error("duplicate proposition `{0}`")]
    DuplicateProposition(String),
    #[error("{0} atomic propositions exceed the supported maximum of {max}", max = MAX_PROPS)]
    TooManyPropositions(usize),
    #[error("formula is outside the co-safe fragment (negation over a temporal operator)")]
    NotCoSafe,
    #[error("formula is not in positive normal form")]
    NotPnf,
    #[error("DFA construction exceeded the state budget of {0}")]
    StateBudgetExceeded(usize),
    #[error("malformed DFA: {0}")]
    MalformedDfa(String),
}

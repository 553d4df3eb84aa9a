use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ScltlError;

/// Hard cap on the number of atomic propositions; the explicit alphabet is
/// `2^|AP|`, so this bounds transition tables at 4096 symbols.
pub const MAX_PROPS: usize = 12;

/// The declared set of atomic propositions for a specification.
///
/// Propositions are referred to by index everywhere else; a [`Symbol`] is a
/// bitmask over these indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApSet {
    names: Vec<String>,
}

impl ApSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, ScltlError> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for name in names {
            let name = name.into();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(ScltlError::BadPropositionName(name));
            }
            if !seen.insert(name.clone()) {
                return Err(ScltlError::DuplicateProposition(name));
            }
            out.push(name);
        }
        if out.len() > MAX_PROPS {
            return Err(ScltlError::TooManyPropositions(out.len()));
        }
        Ok(Self { names: out })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    /// Number of symbols in the explicit alphabet `2^AP`.
    pub fn alphabet_size(&self) -> usize {
        1 << self.names.len()
    }

    pub fn symbols(&self) -> impl Iterator<Item = Symbol> {
        (0..self.alphabet_size() as u16).map(Symbol)
    }

    /// Builds a symbol from proposition names; unknown names are an error.
    pub fn symbol<S: AsRef<str>>(
        &self,
        props: impl IntoIterator<Item = S>,
    ) -> Result<Symbol, ScltlError> {
        let mut bits = 0u16;
        for p in props {
            let idx = self
                .index_of(p.as_ref())
                .ok_or_else(|| ScltlError::UnknownProposition(p.as_ref().to_string()))?;
            bits |= 1 << idx;
        }
        Ok(Symbol(bits))
    }

    pub fn symbol_props(&self, sigma: Symbol) -> Vec<String> {
        (0..self.len())
            .filter(|i| sigma.contains(*i))
            .map(|i| self.names[i].clone())
            .collect()
    }
}

/// A letter of the alphabet `2^AP`, stored as a bitmask over proposition
/// indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Symbol(pub u16);

impl Symbol {
    pub const EMPTY: Symbol = Symbol(0);

    pub fn contains(&self, prop: usize) -> bool {
        self.0 & (1 << prop) != 0
    }

    pub fn with(self, prop: usize) -> Symbol {
        Symbol(self.0 | (1 << prop))
    }

    /// True when every set proposition index is below `n`.
    pub fn within(&self, n: usize) -> bool {
        (self.0 as u32) < (1u32 << n)
    }
}

/// scLTL formula AST.
///
/// `Not` may appear in parser output; [`Formula::to_pnf`] pushes negation to
/// atoms and rejects formulas outside the co-safe fragment.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Formula {
    True,
    False,
    Atom(usize),
    NegAtom(usize),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Next(Box<Formula>),
    Until(Box<Formula>, Box<Formula>),
    Eventually(Box<Formula>),
}

impl Formula {
    pub fn atom(p: usize) -> Formula {
        Formula::Atom(p)
    }

    pub fn not(f: Formula) -> Formula {
        Formula::Not(Box::new(f))
    }

    pub fn and(l: Formula, r: Formula) -> Formula {
        Formula::And(Box::new(l), Box::new(r))
    }

    pub fn or(l: Formula, r: Formula) -> Formula {
        Formula::Or(Box::new(l), Box::new(r))
    }

    pub fn next(f: Formula) -> Formula {
        Formula::Next(Box::new(f))
    }

    pub fn until(l: Formula, r: Formula) -> Formula {
        Formula::Until(Box::new(l), Box::new(r))
    }

    pub fn eventually(f: Formula) -> Formula {
        Formula::Eventually(Box::new(f))
    }

    /// True when negation appears only directly on atoms.
    pub fn is_pnf(&self) -> bool {
        match self {
            Formula::True | Formula::False | Formula::Atom(_) | Formula::NegAtom(_) => true,
            Formula::Not(_) => false,
            Formula::And(l, r) | Formula::Or(l, r) | Formula::Until(l, r) => {
                l.is_pnf() && r.is_pnf()
            }
            Formula::Next(f) | Formula::Eventually(f) => f.is_pnf(),
        }
    }

    /// Pushes negations to atoms via De Morgan and `¬◯φ ≡ ◯¬φ`.
    ///
    /// Fails with [`ScltlError::NotCoSafe`] when elimination would need an
    /// "always"/release operator (`¬U`, `¬F`).
    pub fn to_pnf(&self) -> Result<Formula, ScltlError> {
        self.pnf_inner(false)
    }

    fn pnf_inner(&self, negated: bool) -> Result<Formula, ScltlError> {
        Ok(match (self, negated) {
            (Formula::True, false) | (Formula::False, true) => Formula::True,
            (Formula::True, true) | (Formula::False, false) => Formula::False,
            (Formula::Atom(p), false) | (Formula::NegAtom(p), true) => Formula::Atom(*p),
            (Formula::Atom(p), true) | (Formula::NegAtom(p), false) => Formula::NegAtom(*p),
            (Formula::Not(f), _) => f.pnf_inner(!negated)?,
            (Formula::And(l, r), false) => {
                Formula::and(l.pnf_inner(false)?, r.pnf_inner(false)?)
            }
            (Formula::And(l, r), true) => Formula::or(l.pnf_inner(true)?, r.pnf_inner(true)?),
            (Formula::Or(l, r), false) => Formula::or(l.pnf_inner(false)?, r.pnf_inner(false)?),
            (Formula::Or(l, r), true) => Formula::and(l.pnf_inner(true)?, r.pnf_inner(true)?),
            (Formula::Next(f), _) => Formula::next(f.pnf_inner(negated)?),
            (Formula::Until(l, r), false) => {
                Formula::until(l.pnf_inner(false)?, r.pnf_inner(false)?)
            }
            (Formula::Eventually(f), false) => Formula::eventually(f.pnf_inner(false)?),
            (Formula::Until(_, _), true) | (Formula::Eventually(_), true) => {
                return Err(ScltlError::NotCoSafe)
            }
        })
    }

    /// Canonical simplification: `◇φ` rewritten to `⊤ U φ`, n-ary
    /// flattening of `∧`/`∨` with sorted operands, idempotence, absorption,
    /// and unit propagation. Idempotent by construction.
    pub fn simplify(&self) -> Formula {
        match self {
            Formula::True | Formula::False | Formula::Atom(_) | Formula::NegAtom(_) => {
                self.clone()
            }
            Formula::Not(f) => Formula::not(f.simplify()),
            Formula::Next(f) => match f.simplify() {
                Formula::True => Formula::True,
                Formula::False => Formula::False,
                s => Formula::next(s),
            },
            Formula::Eventually(f) => {
                Formula::until(Formula::True, f.simplify()).simplify()
            }
            Formula::Until(l, r) => {
                let (l, r) = (l.simplify(), r.simplify());
                match (&l, &r) {
                    // l U ⊤ = ⊤, l U ⊥ = ⊥, ⊥ U r = r
                    (_, Formula::True) => Formula::True,
                    (_, Formula::False) => Formula::False,
                    (Formula::False, _) => r,
                    _ => Formula::until(l, r),
                }
            }
            Formula::And(_, _) => {
                let mut ops = BTreeSet::new();
                if !Self::flatten_and(self, &mut ops) {
                    return Formula::False;
                }
                ops.remove(&Formula::True);
                // absorption: A ∧ (A ∨ B) = A
                let absorbed: Vec<Formula> = ops
                    .iter()
                    .filter(|op| {
                        if !matches!(op, Formula::Or(_, _)) {
                            return true;
                        }
                        let mut disj = BTreeSet::new();
                        Self::flatten_or(op, &mut disj);
                        !disj.iter().any(|d| d != *op && ops.contains(d))
                    })
                    .cloned()
                    .collect();
                Self::rebuild(absorbed, Formula::True, Formula::and)
            }
            Formula::Or(_, _) => {
                let mut ops = BTreeSet::new();
                if !Self::flatten_or(self, &mut ops) {
                    return Formula::True;
                }
                ops.remove(&Formula::False);
                // absorption: A ∨ (A ∧ B) = A
                let absorbed: Vec<Formula> = ops
                    .iter()
                    .filter(|op| {
                        if !matches!(op, Formula::And(_, _)) {
                            return true;
                        }
                        let mut conj = BTreeSet::new();
                        Self::flatten_and(op, &mut conj);
                        !conj.iter().any(|c| c != *op && ops.contains(c))
                    })
                    .cloned()
                    .collect();
                Self::rebuild(absorbed, Formula::False, Formula::or)
            }
        }
    }

    /// Collects simplified conjuncts; returns false when a `⊥` unit was hit.
    fn flatten_and(f: &Formula, out: &mut BTreeSet<Formula>) -> bool {
        match f {
            Formula::And(l, r) => Self::flatten_and(l, out) && Self::flatten_and(r, out),
            other => match other.simplify() {
                Formula::False => false,
                Formula::And(l, r) => {
                    Self::flatten_and(&l, out) && Self::flatten_and(&r, out)
                }
                s => {
                    out.insert(s);
                    true
                }
            },
        }
    }

    fn flatten_or(f: &Formula, out: &mut BTreeSet<Formula>) -> bool {
        match f {
            Formula::Or(l, r) => Self::flatten_or(l, out) && Self::flatten_or(r, out),
            other => match other.simplify() {
                Formula::True => false,
                Formula::Or(l, r) => Self::flatten_or(&l, out) && Self::flatten_or(&r, out),
                s => {
                    out.insert(s);
                    true
                }
            },
        }
    }

    fn rebuild(
        ops: Vec<Formula>,
        unit: Formula,
        join: impl Fn(Formula, Formula) -> Formula,
    ) -> Formula {
        let mut iter = ops.into_iter().rev();
        match iter.next() {
            None => unit,
            Some(last) => iter.fold(last, |acc, op| join(op, acc)),
        }
    }

    /// One-step formula progression over a letter. Input must be in PNF;
    /// the result is canonically simplified.
    pub fn progress(&self, sigma: Symbol) -> Formula {
        self.progress_raw(sigma).simplify()
    }

    fn progress_raw(&self, sigma: Symbol) -> Formula {
        match self {
            Formula::True => Formula::True,
            Formula::False => Formula::False,
            Formula::Atom(p) => {
                if sigma.contains(*p) {
                    Formula::True
                } else {
                    Formula::False
                }
            }
            Formula::NegAtom(p) => {
                if sigma.contains(*p) {
                    Formula::False
                } else {
                    Formula::True
                }
            }
            Formula::Not(_) => panic!("progress requires PNF input"),
            Formula::And(l, r) => Formula::and(l.progress_raw(sigma), r.progress_raw(sigma)),
            Formula::Or(l, r) => Formula::or(l.progress_raw(sigma), r.progress_raw(sigma)),
            Formula::Next(f) => (**f).clone(),
            Formula::Until(l, r) => Formula::or(
                r.progress_raw(sigma),
                Formula::and(l.progress_raw(sigma), self.clone()),
            ),
            Formula::Eventually(f) => Formula::or(
                f.progress_raw(sigma),
                Formula::until(Formula::True, (**f).clone()),
            ),
        }
    }

    pub fn render(&self, ap: &ApSet) -> String {
        match self {
            Formula::True => "true".into(),
            Formula::False => "false".into(),
            Formula::Atom(p) => ap.name(*p).to_string(),
            Formula::NegAtom(p) => format!("!{}", ap.name(*p)),
            Formula::Not(f) => format!("!({})", f.render(ap)),
            Formula::And(l, r) => format!("({} & {})", l.render(ap), r.render(ap)),
            Formula::Or(l, r) => format!("({} | {})", l.render(ap), r.render(ap)),
            Formula::Next(f) => format!("X ({})", f.render(ap)),
            Formula::Until(l, r) => format!("({} U {})", l.render(ap), r.render(ap)),
            Formula::Eventually(f) => format!("F ({})", f.render(ap)),
        }
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#b}", self.0)
    }
}

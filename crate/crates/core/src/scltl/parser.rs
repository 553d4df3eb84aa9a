use super::ast::{ApSet, Formula};
use super::ScltlError;

/// Parses the concrete grammar `! & | X F U true false`, parentheses, and
/// identifiers drawn from `ap`.
///
/// Precedence (tightest first): `!` > `X`/`F` > `&` > `|` > `U`;
/// `U` is right-associative.
pub fn parse_formula(text: &str, ap: &ApSet) -> Result<Formula, ScltlError> {
    let tokens = tokenize(text)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        ap,
    };
    let f = parser.parse_until()?;
    match parser.peek() {
        None => Ok(f),
        Some(tok) => Err(ScltlError::Syntax {
            position: tok.position,
            expected: "end of input".into(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Not,
    And,
    Or,
    Next,
    Finally,
    Until,
    True,
    False,
    LParen,
    RParen,
    Ident(String),
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    position: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, ScltlError> {
    if text.trim().is_empty() {
        return Err(ScltlError::Syntax {
            position: 0,
            expected: "formula".into(),
        });
    }
    let mut tokens = Vec::new();
    let bytes: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let kind = match c {
            c if c.is_whitespace() => {
                i += 1;
                continue;
            }
            '!' => TokenKind::Not,
            '&' => TokenKind::And,
            '|' => TokenKind::Or,
            '(' => TokenKind::LParen,
            ')' => TokenKind::RParen,
            c if c.is_ascii_alphanumeric() || c == '_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == '_') {
                    i += 1;
                }
                let word: String = bytes[start..i].iter().collect();
                let kind = match word.as_str() {
                    "X" => TokenKind::Next,
                    "F" => TokenKind::Finally,
                    "U" => TokenKind::Until,
                    "true" => TokenKind::True,
                    "false" => TokenKind::False,
                    _ => TokenKind::Ident(word),
                };
                tokens.push(Token {
                    kind,
                    position: start,
                });
                continue;
            }
            _ => {
                return Err(ScltlError::Syntax {
                    position: i,
                    expected: "operator, identifier, or parenthesis".into(),
                })
            }
        };
        tokens.push(Token { kind, position: i });
        i += 1;
    }
    Ok(tokens)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    ap: &'a ApSet,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn end_position(&self) -> usize {
        self.tokens
            .last()
            .map(|t| {
                t.position
                    + match &t.kind {
                        TokenKind::Ident(s) => s.len(),
                        TokenKind::True => 4,
                        TokenKind::False => 5,
                        _ => 1,
                    }
            })
            .unwrap_or(0)
    }

    fn parse_until(&mut self) -> Result<Formula, ScltlError> {
        let left = self.parse_or()?;
        if matches!(self.peek().map(|t| &t.kind), Some(TokenKind::Until)) {
            self.bump();
            // right-associative
            let right = self.parse_until()?;
            return Ok(Formula::until(left, right));
        }
        Ok(left)
    }

    fn parse_or(&mut self) -> Result<Formula, ScltlError> {
        let mut left = self.parse_and()?;
        while matches!(self.peek().map(|t| &t.kind), Some(TokenKind::Or)) {
            self.bump();
            let right = self.parse_and()?;
            left = Formula::or(left, right);
        }
        Ok(left)
    }

    fn parse_and(&mut self) -> Result<Formula, ScltlError> {
        let mut left = self.parse_unary()?;
        while matches!(self.peek().map(|t| &t.kind), Some(TokenKind::And)) {
            self.bump();
            let right = self.parse_unary()?;
            left = Formula::and(left, right);
        }
        Ok(left)
    }

    fn parse_unary(&mut self) -> Result<Formula, ScltlError> {
        match self.peek().map(|t| t.kind.clone()) {
            Some(TokenKind::Not) => {
                self.bump();
                Ok(Formula::not(self.parse_unary()?))
            }
            Some(TokenKind::Next) => {
                self.bump();
                Ok(Formula::next(self.parse_unary()?))
            }
            Some(TokenKind::Finally) => {
                self.bump();
                Ok(Formula::eventually(self.parse_unary()?))
            }
            _ => self.parse_atom(),
        }
    }

    fn parse_atom(&mut self) -> Result<Formula, ScltlError> {
        let end = self.end_position();
        match self.bump() {
            Some(Token {
                kind: TokenKind::True,
                ..
            }) => Ok(Formula::True),
            Some(Token {
                kind: TokenKind::False,
                ..
            }) => Ok(Formula::False),
            Some(Token {
                kind: TokenKind::Ident(name),
                ..
            }) => match self.ap.index_of(&name) {
                Some(idx) => Ok(Formula::Atom(idx)),
                None => Err(ScltlError::UnknownProposition(name)),
            },
            Some(Token {
                kind: TokenKind::LParen,
                ..
            }) => {
                let inner = self.parse_until()?;
                match self.bump() {
                    Some(Token {
                        kind: TokenKind::RParen,
                        ..
                    }) => Ok(inner),
                    Some(tok) => Err(ScltlError::Syntax {
                        position: tok.position,
                        expected: "')'".into(),
                    }),
                    None => Err(ScltlError::Syntax {
                        position: end,
                        expected: "')'".into(),
                    }),
                }
            }
            Some(tok) => Err(ScltlError::Syntax {
                position: tok.position,
                expected: "proposition, constant, or '('".into(),
            }),
            None => Err(ScltlError::Syntax {
                position: end,
                expected: "proposition, constant, or '('".into(),
            }),
        }
    }
}

use thiserror::Error;

use super::{BinaryOp, Expr, Op, UnaryOp};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at position {position}: {message}")]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Var(usize),
    Placeholder,
    Ident(String),
    Sym(char),
    End,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    /// Whether the previous token can end an operand; a `-` directly before
    /// a digit is a negative literal only when it cannot.
    after_operand: bool,
}

impl<'a> Lexer<'a> {
    fn err(&self, position: usize, message: impl Into<String>) -> ParseError {
        ParseError {
            position,
            message: message.into(),
        }
    }

    fn number(&mut self) -> Result<Tok, ParseError> {
        let start = self.pos;
        let bytes = self.src;
        let mut i = self.pos;
        if bytes.get(i) == Some(&b'-') {
            i += 1;
        }
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if bytes.get(i) == Some(&b'.') {
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
        }
        if matches!(bytes.get(i), Some(b'e') | Some(b'E')) {
            let mut j = i + 1;
            if matches!(bytes.get(j), Some(b'+') | Some(b'-')) {
                j += 1;
            }
            if bytes.get(j).is_some_and(u8::is_ascii_digit) {
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        let text = std::str::from_utf8(&bytes[start..i]).expect("ascii slice");
        let v: f64 = text
            .parse()
            .map_err(|_| self.err(start, format!("bad number `{text}`")))?;
        self.pos = i;
        Ok(Tok::Num(v))
    }

    /// Returns the next token and its starting position.
    fn next(&mut self) -> Result<(Tok, usize), ParseError> {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&c) = self.src.get(self.pos) else {
            return Ok((Tok::End, start));
        };
        let next_is_digit = |k: usize| {
            self.src
                .get(self.pos + k)
                .is_some_and(|b| b.is_ascii_digit() || *b == b'.')
        };
        let signed = c == b'-' && !self.after_operand && next_is_digit(1);
        let tok = if c.is_ascii_digit() || (c == b'.' && next_is_digit(1)) || signed {
            self.number()?
        } else if c == b'C' {
            self.pos += 1;
            Tok::Placeholder
        } else if c == b'x' && self.src.get(self.pos + 1).is_some_and(u8::is_ascii_digit) {
            let mut i = self.pos + 1;
            while i < self.src.len() && self.src[i].is_ascii_digit() {
                i += 1;
            }
            let text = std::str::from_utf8(&self.src[self.pos + 1..i]).expect("ascii slice");
            let index: usize = text
                .parse()
                .map_err(|_| self.err(start, "bad variable index"))?;
            if index == 0 {
                return Err(self.err(start, "variables are numbered from x1"));
            }
            self.pos = i;
            Tok::Var(index)
        } else if c.is_ascii_lowercase() {
            let mut i = self.pos;
            while i < self.src.len() && self.src[i].is_ascii_lowercase() {
                i += 1;
            }
            let name = std::str::from_utf8(&self.src[self.pos..i])
                .expect("ascii slice")
                .to_owned();
            self.pos = i;
            Tok::Ident(name)
        } else if c == b'*' && self.src.get(self.pos + 1) == Some(&b'*') {
            self.pos += 2;
            Tok::Sym('^')
        } else if b"+-*/^(),".contains(&c) {
            self.pos += 1;
            Tok::Sym(c as char)
        } else {
            let ch = std::str::from_utf8(&self.src[self.pos..])
                .ok()
                .and_then(|s| s.chars().next())
                .unwrap_or('?');
            return Err(self.err(start, format!("unexpected character `{ch}`")));
        };
        self.after_operand = matches!(
            tok,
            Tok::Num(_) | Tok::Var(_) | Tok::Placeholder | Tok::Sym(')')
        );
        Ok((tok, start))
    }
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    tok: Tok,
    at: usize,
}

impl<'a> Parser<'a> {
    fn bump(&mut self) -> Result<(), ParseError> {
        let (tok, at) = self.lexer.next()?;
        self.tok = tok;
        self.at = at;
        Ok(())
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            position: self.at,
            message: message.into(),
        })
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.tok == Tok::Sym(c) {
            self.bump()
        } else if self.tok == Tok::End {
            self.err(format!("expected `{c}`, found end of input"))
        } else {
            self.err(format!("expected `{c}`"))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.tok {
                Tok::Sym('+') => BinaryOp::Add,
                Tok::Sym('-') => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump()?;
            lhs = Expr::binary(op, lhs, self.term()?);
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.tok {
                Tok::Sym('*') => BinaryOp::Mul,
                Tok::Sym('/') => BinaryOp::Div,
                _ => return Ok(lhs),
            };
            self.bump()?;
            lhs = Expr::binary(op, lhs, self.factor()?);
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        if self.tok == Tok::Sym('-') {
            self.bump()?;
            return Ok(match self.factor()? {
                Expr::Const(c) => Expr::Const(-c),
                e => Expr::mul(Expr::Const(-1.0), e),
            });
        }
        let base = self.primary()?;
        if self.tok == Tok::Sym('^') {
            self.bump()?;
            let exponent = self.factor()?;
            return Ok(Expr::binary(BinaryOp::Pow, base, exponent));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match std::mem::replace(&mut self.tok, Tok::End) {
            Tok::Num(v) => {
                self.bump()?;
                Ok(Expr::Const(v))
            }
            Tok::Var(i) => {
                self.bump()?;
                Ok(Expr::Var(i))
            }
            Tok::Placeholder => {
                self.bump()?;
                Ok(Expr::Placeholder)
            }
            Tok::Sym('(') => {
                self.bump()?;
                let inner = self.expr()?;
                self.expect(')')?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                let Some(op) = Op::from_name(&name) else {
                    return self.err(format!("unknown function `{name}`"));
                };
                self.bump()?;
                self.expect('(')?;
                let first = self.expr()?;
                let out = match op {
                    Op::Unary(UnaryOp::Id) => first,
                    Op::Unary(u) => Expr::unary(u, first),
                    Op::Binary(b) => {
                        self.expect(',')?;
                        let second = self.expr()?;
                        Expr::binary(b, first, second)
                    }
                };
                self.expect(')')?;
                Ok(out)
            }
            Tok::End => self.err("unexpected end of input"),
            Tok::Sym(c) => self.err(format!("unexpected `{c}`")),
        }
    }
}

/// Parses infix text into an expression.
///
/// Accepts the canonical printed form as well as ordinary precedence-based
/// input (`exp(C)*x1 + 2`). Binary operators may also be written as
/// functions (`pow(a,b)`); `id(e)` parses to `e`. A `-` directly before a
/// digit in operand position is part of the numeric literal, so `-2^x1` is
/// `pow(-2, x1)`.
pub fn parse(s: &str) -> Result<Expr, ParseError> {
    let mut parser = Parser {
        lexer: Lexer {
            src: s.as_bytes(),
            pos: 0,
            after_operand: false,
        },
        tok: Tok::End,
        at: 0,
    };
    parser.bump()?;
    let e = parser.expr()?;
    if parser.tok != Tok::End {
        return parser.err("trailing input");
    }
    Ok(e)
}

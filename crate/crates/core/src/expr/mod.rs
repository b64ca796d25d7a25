//! Symbolic expression trees over the operator set
//! `{id, add, mul, sin, pow, cos, sqrt, exp, div, sub, log}`.
//!
//! Expressions print as fully parenthesized infix text (`sin((x1*x1))`),
//! parse back from that text (and from ordinary precedence-based infix),
//! evaluate pointwise, and reduce to skeletons where every numeric constant
//! becomes the placeholder `C`.

mod eval;
mod parse;
mod vocab;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use eval::{Columns, EvalError, Program};
pub use parse::{parse, ParseError};
pub use vocab::{TokenError, Vocabulary};

/// One-argument operators. `Id` only exists while equations are being built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnaryOp {
    Id,
    Sin,
    Cos,
    Sqrt,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryOp {
    Add,
    Mul,
    Pow,
    Div,
    Sub,
}

/// An element of the operator set, tagged with its arity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Op {
    Unary(UnaryOp),
    Binary(BinaryOp),
}

impl Op {
    /// The full operator set, in its conventional order.
    pub const ALL: [Op; 11] = [
        Op::Unary(UnaryOp::Id),
        Op::Binary(BinaryOp::Add),
        Op::Binary(BinaryOp::Mul),
        Op::Unary(UnaryOp::Sin),
        Op::Binary(BinaryOp::Pow),
        Op::Unary(UnaryOp::Cos),
        Op::Unary(UnaryOp::Sqrt),
        Op::Unary(UnaryOp::Exp),
        Op::Binary(BinaryOp::Div),
        Op::Binary(BinaryOp::Sub),
        Op::Unary(UnaryOp::Log),
    ];

    pub fn arity(self) -> usize {
        match self {
            Op::Unary(_) => 1,
            Op::Binary(_) => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Op::Unary(u) => u.name(),
            Op::Binary(b) => b.name(),
        }
    }

    pub fn from_name(name: &str) -> Option<Op> {
        Op::ALL.into_iter().find(|op| op.name() == name)
    }
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Id => "id",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
        }
    }
}

impl BinaryOp {
    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Mul => "mul",
            BinaryOp::Pow => "pow",
            BinaryOp::Div => "div",
            BinaryOp::Sub => "sub",
        }
    }

    /// Infix symbol used by the canonical printer.
    pub fn symbol(self) -> char {
        match self {
            BinaryOp::Add => '+',
            BinaryOp::Mul => '*',
            BinaryOp::Pow => '^',
            BinaryOp::Div => '/',
            BinaryOp::Sub => '-',
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Expression tree. Variables are 1-based (`x1` is `Var(1)`).
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Var(usize),
    Const(f64),
    /// Constant placeholder `C`, produced by [`Expr::skeletonize`].
    Placeholder,
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn var(index: usize) -> Expr {
        Expr::Var(index)
    }

    pub fn unary(op: UnaryOp, child: Expr) -> Expr {
        Expr::Unary(op, Box::new(child))
    }

    pub fn binary(op: BinaryOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn add(lhs: Expr, rhs: Expr) -> Expr {
        Expr::binary(BinaryOp::Add, lhs, rhs)
    }

    pub fn mul(lhs: Expr, rhs: Expr) -> Expr {
        Expr::binary(BinaryOp::Mul, lhs, rhs)
    }

    /// Number of nodes in the tree.
    pub fn size(&self) -> usize {
        match self {
            Expr::Var(_) | Expr::Const(_) | Expr::Placeholder => 1,
            Expr::Unary(_, c) => 1 + c.size(),
            Expr::Binary(_, l, r) => 1 + l.size() + r.size(),
        }
    }

    /// Depth counted in levels; a leaf has depth 1.
    pub fn depth(&self) -> usize {
        match self {
            Expr::Var(_) | Expr::Const(_) | Expr::Placeholder => 1,
            Expr::Unary(_, c) => 1 + c.depth(),
            Expr::Binary(_, l, r) => 1 + l.depth().max(r.depth()),
        }
    }

    /// Largest variable index referenced, or 0 for variable-free trees.
    pub fn max_var(&self) -> usize {
        match self {
            Expr::Var(i) => *i,
            Expr::Const(_) | Expr::Placeholder => 0,
            Expr::Unary(_, c) => c.max_var(),
            Expr::Binary(_, l, r) => l.max_var().max(r.max_var()),
        }
    }

    pub fn placeholder_count(&self) -> usize {
        match self {
            Expr::Placeholder => 1,
            Expr::Var(_) | Expr::Const(_) => 0,
            Expr::Unary(_, c) => c.placeholder_count(),
            Expr::Binary(_, l, r) => l.placeholder_count() + r.placeholder_count(),
        }
    }

    /// Numeric constants in printing order.
    pub fn constants(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Const(c) = e {
                out.push(*c);
            }
        });
        out
    }

    /// Pre-order traversal, left subtree before right (the printing order).
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Unary(_, c) => c.visit(f),
            Expr::Binary(_, l, r) => {
                l.visit(f);
                r.visit(f);
            }
            _ => {}
        }
    }

    /// Replaces every numeric constant with the placeholder.
    pub fn skeletonize(&self) -> Expr {
        match self {
            Expr::Const(_) | Expr::Placeholder => Expr::Placeholder,
            Expr::Var(i) => Expr::Var(*i),
            Expr::Unary(op, c) => Expr::unary(*op, c.skeletonize()),
            Expr::Binary(op, l, r) => Expr::binary(*op, l.skeletonize(), r.skeletonize()),
        }
    }

    /// Fills placeholders, in printing order, with `values`.
    ///
    /// Returns `None` unless `values.len()` equals the placeholder count.
    pub fn fill_placeholders(&self, values: &[f64]) -> Option<Expr> {
        fn go(e: &Expr, values: &[f64], next: &mut usize) -> Option<Expr> {
            Some(match e {
                Expr::Placeholder => {
                    let v = *values.get(*next)?;
                    *next += 1;
                    Expr::Const(v)
                }
                Expr::Var(i) => Expr::Var(*i),
                Expr::Const(c) => Expr::Const(*c),
                Expr::Unary(op, c) => Expr::unary(*op, go(c, values, next)?),
                Expr::Binary(op, l, r) => {
                    let l = go(l, values, next)?;
                    Expr::binary(*op, l, go(r, values, next)?)
                }
            })
        }
        let mut next = 0;
        let out = go(self, values, &mut next)?;
        (next == values.len()).then_some(out)
    }

    /// Removes `id` nodes.
    pub fn collapse_id(&self) -> Expr {
        match self {
            Expr::Unary(UnaryOp::Id, c) => c.collapse_id(),
            Expr::Unary(op, c) => Expr::unary(*op, c.collapse_id()),
            Expr::Binary(op, l, r) => Expr::binary(*op, l.collapse_id(), r.collapse_id()),
            leaf => leaf.clone(),
        }
    }

    /// Evaluates at a single point. `x[0]` is the value of `x1`.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64, EvalError> {
        eval::evaluate(self, x)
    }

    /// Canonical fully parenthesized infix form; identical to `to_string()`.
    pub fn to_infix_string(&self) -> String {
        self.to_string()
    }
}

/// Shortest text that parses back to exactly `c`.
pub(crate) fn format_constant(c: f64) -> String {
    format!("{c:?}")
}

/// Rounds to four significant digits through the printed form, so the
/// printed text of the result parses back to the identical value.
pub fn round_sig4(c: f64) -> f64 {
    if c == 0.0 || !c.is_finite() {
        return c;
    }
    format!("{c:.3e}").parse().unwrap_or(c)
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Var(i) => write!(f, "x{i}"),
            Expr::Const(c) => f.write_str(&format_constant(*c)),
            Expr::Placeholder => f.write_str("C"),
            Expr::Unary(UnaryOp::Id, c) => c.fmt(f),
            Expr::Unary(op, c) => write!(f, "{}({c})", op.name()),
            Expr::Binary(op, l, r) => write!(f, "({l}{}{r})", op.symbol()),
        }
    }
}

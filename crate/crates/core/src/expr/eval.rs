use thiserror::Error;

use super::{BinaryOp, Expr, UnaryOp};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("{op} outside its domain")]
    Domain { op: &'static str },
    #[error("non-finite result from {op}")]
    NonFinite { op: &'static str },
    #[error("variable x{index} not bound (point has {len} coordinates)")]
    UnboundVariable { index: usize, len: usize },
    #[error("constant placeholder has no value")]
    UnboundPlaceholder,
}

impl EvalError {
    /// True for errors caused by the numeric values rather than the tree.
    pub fn is_domain(&self) -> bool {
        matches!(self, EvalError::Domain { .. } | EvalError::NonFinite { .. })
    }
}

#[inline]
fn finite(v: f64, op: &'static str) -> Result<f64, EvalError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite { op })
    }
}

#[inline]
pub(crate) fn apply_unary(op: UnaryOp, a: f64) -> Result<f64, EvalError> {
    let v = match op {
        UnaryOp::Id => a,
        UnaryOp::Sin => a.sin(),
        UnaryOp::Cos => a.cos(),
        UnaryOp::Exp => a.exp(),
        UnaryOp::Sqrt => {
            if a < 0.0 {
                return Err(EvalError::Domain { op: "sqrt" });
            }
            a.sqrt()
        }
        UnaryOp::Log => {
            if a <= 0.0 {
                return Err(EvalError::Domain { op: "log" });
            }
            a.ln()
        }
    };
    finite(v, op.name())
}

#[inline]
pub(crate) fn apply_binary(op: BinaryOp, a: f64, b: f64) -> Result<f64, EvalError> {
    let v = match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => {
            if b == 0.0 {
                return Err(EvalError::Domain { op: "div" });
            }
            a / b
        }
        BinaryOp::Pow => {
            if a < 0.0 && b.fract() != 0.0 {
                return Err(EvalError::Domain { op: "pow" });
            }
            a.powf(b)
        }
    };
    finite(v, op.name())
}

pub(crate) fn evaluate(e: &Expr, x: &[f64]) -> Result<f64, EvalError> {
    match e {
        Expr::Var(i) => x
            .get(i.wrapping_sub(1))
            .copied()
            .ok_or(EvalError::UnboundVariable {
                index: *i,
                len: x.len(),
            }),
        Expr::Const(c) => finite(*c, "const"),
        Expr::Placeholder => Err(EvalError::UnboundPlaceholder),
        Expr::Unary(op, c) => apply_unary(*op, evaluate(c, x)?),
        Expr::Binary(op, l, r) => apply_binary(*op, evaluate(l, x)?, evaluate(r, x)?),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Instr {
    Var(usize),
    Const(f64),
    Slot(usize),
    Unary(UnaryOp),
    Binary(BinaryOp),
}

/// Postfix form of an expression, for evaluating one tree on many points.
///
/// Placeholders become numbered slots (printing order) whose values are
/// supplied at evaluation time, so constant fitting never rebuilds the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    code: Vec<Instr>,
    slots: usize,
    max_var: usize,
    max_stack: usize,
}

impl Program {
    pub fn compile(e: &Expr) -> Program {
        fn emit(e: &Expr, code: &mut Vec<Instr>, slots: &mut usize) {
            match e {
                Expr::Var(i) => code.push(Instr::Var(*i)),
                Expr::Const(c) => code.push(Instr::Const(*c)),
                Expr::Placeholder => {
                    code.push(Instr::Slot(*slots));
                    *slots += 1;
                }
                Expr::Unary(UnaryOp::Id, c) => emit(c, code, slots),
                Expr::Unary(op, c) => {
                    emit(c, code, slots);
                    code.push(Instr::Unary(*op));
                }
                Expr::Binary(op, l, r) => {
                    emit(l, code, slots);
                    emit(r, code, slots);
                    code.push(Instr::Binary(*op));
                }
            }
        }
        let mut code = Vec::new();
        let mut slots = 0;
        emit(e, &mut code, &mut slots);
        let mut depth = 0usize;
        let mut max_stack = 0usize;
        for ins in &code {
            match ins {
                Instr::Var(_) | Instr::Const(_) | Instr::Slot(_) => depth += 1,
                Instr::Unary(_) => {}
                Instr::Binary(_) => depth -= 1,
            }
            max_stack = max_stack.max(depth);
        }
        Program {
            code,
            slots,
            max_var: e.max_var(),
            max_stack,
        }
    }

    /// Number of placeholder slots.
    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn max_var(&self) -> usize {
        self.max_var
    }

    /// Evaluates at one point.
    pub fn eval_point(&self, x: &[f64], consts: &[f64]) -> Result<f64, EvalError> {
        let mut stack: Vec<f64> = Vec::with_capacity(self.max_stack);
        for ins in &self.code {
            match *ins {
                Instr::Var(i) => stack.push(x.get(i.wrapping_sub(1)).copied().ok_or(
                    EvalError::UnboundVariable {
                        index: i,
                        len: x.len(),
                    },
                )?),
                Instr::Const(c) => stack.push(finite(c, "const")?),
                Instr::Slot(s) => stack.push(finite(
                    *consts.get(s).ok_or(EvalError::UnboundPlaceholder)?,
                    "const",
                )?),
                Instr::Unary(op) => {
                    let a = stack.last_mut().expect("well-formed program");
                    *a = apply_unary(op, *a)?;
                }
                Instr::Binary(op) => {
                    let b = stack.pop().expect("well-formed program");
                    let a = stack.last_mut().expect("well-formed program");
                    *a = apply_binary(op, *a, b)?;
                }
            }
        }
        Ok(stack[0])
    }

    /// Evaluates on every row of a row-major `n × d` matrix.
    pub fn eval_rows(&self, x: &[f64], d: usize, consts: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.eval_columns(&Columns::from_rows(x, d), consts)
    }

    /// Evaluates column-at-a-time; fails on the first offending point.
    pub fn eval_columns(&self, cols: &Columns, consts: &[f64]) -> Result<Vec<f64>, EvalError> {
        if self.max_var > cols.cols.len() {
            return Err(EvalError::UnboundVariable {
                index: self.max_var,
                len: cols.cols.len(),
            });
        }
        let n = cols.n;
        let mut stack: Vec<Vec<f64>> = Vec::with_capacity(self.max_stack);
        for ins in &self.code {
            match *ins {
                Instr::Var(i) => stack.push(cols.cols[i - 1].clone()),
                Instr::Const(c) => stack.push(vec![finite(c, "const")?; n]),
                Instr::Slot(s) => {
                    let c = *consts.get(s).ok_or(EvalError::UnboundPlaceholder)?;
                    stack.push(vec![finite(c, "const")?; n]);
                }
                Instr::Unary(op) => {
                    let a = stack.last_mut().expect("well-formed program");
                    for v in a.iter_mut() {
                        *v = apply_unary(op, *v)?;
                    }
                }
                Instr::Binary(op) => {
                    let b = stack.pop().expect("well-formed program");
                    let a = stack.last_mut().expect("well-formed program");
                    for (v, w) in a.iter_mut().zip(&b) {
                        *v = apply_binary(op, *v, *w)?;
                    }
                }
            }
        }
        Ok(stack.pop().expect("well-formed program"))
    }
}

/// Column-major copy of a point matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Columns {
    pub n: usize,
    pub cols: Vec<Vec<f64>>,
}

impl Columns {
    pub fn from_rows(x: &[f64], d: usize) -> Columns {
        let n = x.len().checked_div(d).unwrap_or(0);
        let cols = (0..d)
            .map(|j| (0..n).map(|i| x[i * d + j]).collect())
            .collect();
        Columns { n, cols }
    }
}

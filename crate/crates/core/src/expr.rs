//! Symbolic expression trees over the variable blocks x, y, u, s.
//!
//! Trees are immutable (`Arc`-shared) after construction; evaluation and
//! differentiation are pure, so expressions can be used from many threads
//! at once. Differentiation is closed: the derivative of any expression is
//! again an expression. Arithmetic is plain 64-bit floating point.
//!
//! Source models only ever reference the x and y blocks; the u and s blocks
//! appear in derived single-level instances.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Variable blocks of the composite space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    X,
    Y,
    U,
    S,
}

impl Block {
    pub fn name(self) -> &'static str {
        match self {
            Block::X => "x",
            Block::Y => "y",
            Block::U => "u",
            Block::S => "s",
        }
    }
}

/// Builtin scalar functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

impl Builtin {
    pub fn name(self) -> &'static str {
        match self {
            Builtin::Sin => "sin",
            Builtin::Cos => "cos",
            Builtin::Exp => "exp",
            Builtin::Log => "log",
            Builtin::Sqrt => "sqrt",
        }
    }

    fn apply(self, v: f64) -> Result<f64, EvalError> {
        match self {
            Builtin::Sin => Ok(v.sin()),
            Builtin::Cos => Ok(v.cos()),
            Builtin::Exp => Ok(v.exp()),
            Builtin::Log => {
                if v <= 0.0 {
                    Err(EvalError::Domain {
                        what: format!("log of nonpositive value {v}"),
                    })
                } else {
                    Ok(v.ln())
                }
            }
            Builtin::Sqrt => {
                if v < 0.0 {
                    Err(EvalError::Domain {
                        what: format!("sqrt of negative value {v}"),
                    })
                } else {
                    Ok(v.sqrt())
                }
            }
        }
    }
}

/// A node of a symbolic expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Reference to component `index` (0-based) of a block.
    Var(Block, usize),
    Neg(Arc<Expr>),
    Add(Arc<Expr>, Arc<Expr>),
    Sub(Arc<Expr>, Arc<Expr>),
    Mul(Arc<Expr>, Arc<Expr>),
    Div(Arc<Expr>, Arc<Expr>),
    /// Integer power; negative exponents evaluate as reciprocals.
    Pow(Arc<Expr>, i32),
    Call(Builtin, Arc<Expr>),
}

/// Evaluation failures.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("domain error: {what}")]
    Domain { what: String },
    #[error("point is missing block {0:?} referenced by the expression")]
    MissingBlock(Block),
    #[error("index {index} out of range for block {block:?} of length {len}")]
    IndexOutOfRange {
        block: Block,
        index: usize,
        len: usize,
    },
}

/// A point split into the variable blocks. Blocks not present are `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Point<'a> {
    pub x: Option<&'a [f64]>,
    pub y: Option<&'a [f64]>,
    pub u: Option<&'a [f64]>,
    pub s: Option<&'a [f64]>,
}

impl<'a> Point<'a> {
    pub fn xy(x: &'a [f64], y: &'a [f64]) -> Self {
        Point {
            x: Some(x),
            y: Some(y),
            u: None,
            s: None,
        }
    }

    pub fn block(&self, b: Block) -> Option<&'a [f64]> {
        match b {
            Block::X => self.x,
            Block::Y => self.y,
            Block::U => self.u,
            Block::S => self.s,
        }
    }

    fn get(&self, b: Block, index: usize) -> Result<f64, EvalError> {
        let slice = self.block(b).ok_or(EvalError::MissingBlock(b))?;
        slice
            .get(index)
            .copied()
            .ok_or_else(|| EvalError::IndexOutOfRange {
                block: b,
                index,
                len: slice.len(),
            })
    }
}

fn arc(e: Expr) -> Arc<Expr> {
    Arc::new(e)
}

impl Expr {
    pub fn constant(v: f64) -> Arc<Expr> {
        arc(Expr::Const(v))
    }

    pub fn var(b: Block, index: usize) -> Arc<Expr> {
        arc(Expr::Var(b, index))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(v) if *v == 0.0)
    }

    pub fn is_one(&self) -> bool {
        matches!(self, Expr::Const(v) if *v == 1.0)
    }

    /// Evaluate at a point.
    pub fn eval(&self, p: &Point) -> Result<f64, EvalError> {
        match self {
            Expr::Const(v) => Ok(*v),
            Expr::Var(b, i) => p.get(*b, *i),
            Expr::Neg(e) => Ok(-e.eval(p)?),
            Expr::Add(a, b) => Ok(a.eval(p)? + b.eval(p)?),
            Expr::Sub(a, b) => Ok(a.eval(p)? - b.eval(p)?),
            Expr::Mul(a, b) => Ok(a.eval(p)? * b.eval(p)?),
            Expr::Div(a, b) => {
                let den = b.eval(p)?;
                if den == 0.0 {
                    return Err(EvalError::Domain {
                        what: format!("division by zero in {}", self),
                    });
                }
                Ok(a.eval(p)? / den)
            }
            Expr::Pow(e, k) => {
                let base = e.eval(p)?;
                if base == 0.0 && *k < 0 {
                    return Err(EvalError::Domain {
                        what: format!("zero raised to negative power {k}"),
                    });
                }
                Ok(base.powi(*k))
            }
            Expr::Call(f, e) => f.apply(e.eval(p)?),
        }
    }

    /// Collect the blocks referenced anywhere in the tree.
    pub fn blocks_used(&self, out: &mut Vec<Block>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(b, _) => {
                if !out.contains(b) {
                    out.push(*b);
                }
            }
            Expr::Neg(e) | Expr::Pow(e, _) | Expr::Call(_, e) => e.blocks_used(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.blocks_used(out);
                b.blocks_used(out);
            }
        }
    }

    /// Largest index referenced per block, as (block, max index) pairs.
    pub fn max_index(&self, b: Block) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var(vb, i) => (*vb == b).then_some(*i),
            Expr::Neg(e) | Expr::Pow(e, _) | Expr::Call(_, e) => e.max_index(b),
            Expr::Add(l, r) | Expr::Sub(l, r) | Expr::Mul(l, r) | Expr::Div(l, r) => {
                match (l.max_index(b), r.max_index(b)) {
                    (Some(a), Some(c)) => Some(a.max(c)),
                    (a, c) => a.or(c),
                }
            }
        }
    }

    /// Replace every reference to block `from` by the same index in `to`.
    pub fn rename_block(self: &Arc<Expr>, from: Block, to: Block) -> Arc<Expr> {
        match self.as_ref() {
            Expr::Const(_) => self.clone(),
            Expr::Var(b, i) => {
                if *b == from {
                    Expr::var(to, *i)
                } else {
                    self.clone()
                }
            }
            Expr::Neg(e) => arc(Expr::Neg(e.rename_block(from, to))),
            Expr::Add(a, b) => arc(Expr::Add(a.rename_block(from, to), b.rename_block(from, to))),
            Expr::Sub(a, b) => arc(Expr::Sub(a.rename_block(from, to), b.rename_block(from, to))),
            Expr::Mul(a, b) => arc(Expr::Mul(a.rename_block(from, to), b.rename_block(from, to))),
            Expr::Div(a, b) => arc(Expr::Div(a.rename_block(from, to), b.rename_block(from, to))),
            Expr::Pow(e, k) => arc(Expr::Pow(e.rename_block(from, to), *k)),
            Expr::Call(f, e) => arc(Expr::Call(*f, e.rename_block(from, to))),
        }
    }
}

// ---------------------------------------------------------------------------
// Smart constructors. They fold constant operands and drop additive/
// multiplicative identities so derivative trees stay small, but never
// reassociate, so folding cannot change rounding of what remains.

pub fn add(a: Arc<Expr>, b: Arc<Expr>) -> Arc<Expr> {
    if a.is_zero() {
        return b;
    }
    if b.is_zero() {
        return a;
    }
    if let (Expr::Const(x), Expr::Const(y)) = (a.as_ref(), b.as_ref()) {
        return Expr::constant(x + y);
    }
    arc(Expr::Add(a, b))
}

pub fn sub(a: Arc<Expr>, b: Arc<Expr>) -> Arc<Expr> {
    if b.is_zero() {
        return a;
    }
    if let (Expr::Const(x), Expr::Const(y)) = (a.as_ref(), b.as_ref()) {
        return Expr::constant(x - y);
    }
    if a.is_zero() {
        return neg(b);
    }
    arc(Expr::Sub(a, b))
}

pub fn mul(a: Arc<Expr>, b: Arc<Expr>) -> Arc<Expr> {
    if a.is_zero() || b.is_zero() {
        return Expr::constant(0.0);
    }
    if a.is_one() {
        return b;
    }
    if b.is_one() {
        return a;
    }
    if let (Expr::Const(x), Expr::Const(y)) = (a.as_ref(), b.as_ref()) {
        return Expr::constant(x * y);
    }
    arc(Expr::Mul(a, b))
}

pub fn div(a: Arc<Expr>, b: Arc<Expr>) -> Arc<Expr> {
    if b.is_one() {
        return a;
    }
    if a.is_zero() && !b.is_zero() {
        return Expr::constant(0.0);
    }
    if let (Expr::Const(x), Expr::Const(y)) = (a.as_ref(), b.as_ref()) {
        if *y != 0.0 {
            return Expr::constant(x / y);
        }
    }
    arc(Expr::Div(a, b))
}

pub fn neg(a: Arc<Expr>) -> Arc<Expr> {
    if let Expr::Const(x) = a.as_ref() {
        return Expr::constant(-x);
    }
    if let Expr::Neg(inner) = a.as_ref() {
        return inner.clone();
    }
    arc(Expr::Neg(a))
}

pub fn powi(a: Arc<Expr>, k: i32) -> Arc<Expr> {
    match k {
        0 => Expr::constant(1.0),
        1 => a,
        _ => {
            if let Expr::Const(x) = a.as_ref() {
                if !(*x == 0.0 && k < 0) {
                    return Expr::constant(x.powi(k));
                }
            }
            arc(Expr::Pow(a, k))
        }
    }
}

pub fn call(f: Builtin, a: Arc<Expr>) -> Arc<Expr> {
    if let Expr::Const(x) = a.as_ref() {
        if let Ok(v) = f.apply(*x) {
            return Expr::constant(v);
        }
    }
    arc(Expr::Call(f, a))
}

// ---------------------------------------------------------------------------
// Differentiation.

/// Partial derivative with respect to component `index` of `block`.
pub fn diff(e: &Arc<Expr>, block: Block, index: usize) -> Arc<Expr> {
    match e.as_ref() {
        Expr::Const(_) => Expr::constant(0.0),
        Expr::Var(b, i) => {
            if *b == block && *i == index {
                Expr::constant(1.0)
            } else {
                Expr::constant(0.0)
            }
        }
        Expr::Neg(a) => neg(diff(a, block, index)),
        Expr::Add(a, b) => add(diff(a, block, index), diff(b, block, index)),
        Expr::Sub(a, b) => sub(diff(a, block, index), diff(b, block, index)),
        Expr::Mul(a, b) => add(
            mul(diff(a, block, index), b.clone()),
            mul(a.clone(), diff(b, block, index)),
        ),
        Expr::Div(a, b) => {
            // (a/b)' = a'/b - a b'/b^2
            let da = diff(a, block, index);
            let db = diff(b, block, index);
            sub(
                div(da, b.clone()),
                div(mul(a.clone(), db), powi(b.clone(), 2)),
            )
        }
        Expr::Pow(a, k) => {
            // (a^k)' = k a^(k-1) a'
            let da = diff(a, block, index);
            mul(
                mul(Expr::constant(*k as f64), powi(a.clone(), k - 1)),
                da,
            )
        }
        Expr::Call(f, a) => {
            let da = diff(a, block, index);
            let outer = match f {
                Builtin::Sin => call(Builtin::Cos, a.clone()),
                Builtin::Cos => neg(call(Builtin::Sin, a.clone())),
                Builtin::Exp => call(Builtin::Exp, a.clone()),
                Builtin::Log => div(Expr::constant(1.0), a.clone()),
                Builtin::Sqrt => div(
                    Expr::constant(0.5),
                    call(Builtin::Sqrt, a.clone()),
                ),
            };
            mul(outer, da)
        }
    }
}

/// Symbolic gradient of `e` with respect to a block of length `dim`.
pub fn gradient_block(e: &Arc<Expr>, block: Block, dim: usize) -> Vec<Arc<Expr>> {
    (0..dim).map(|i| diff(e, block, i)).collect()
}

/// Symbolic second-derivative block; entry `[i][j]` holds
/// d^2 e / (d row_block_i d col_block_j).
pub fn hessian_block(
    e: &Arc<Expr>,
    row_block: Block,
    row_dim: usize,
    col_block: Block,
    col_dim: usize,
) -> Vec<Vec<Arc<Expr>>> {
    (0..row_dim)
        .map(|i| {
            let gi = diff(e, row_block, i);
            (0..col_dim).map(|j| diff(&gi, col_block, j)).collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Constant folding.

/// Fold constant subtrees bottom-up. Subtrees whose constant evaluation
/// would raise a domain error are left in place so the error still surfaces
/// at evaluation time. No reassociation happens, so for the surviving
/// structure the rounding behaviour is bit-identical to the input.
pub fn fold(e: &Arc<Expr>) -> Arc<Expr> {
    match e.as_ref() {
        Expr::Const(_) | Expr::Var(_, _) => e.clone(),
        Expr::Neg(a) => neg(fold(a)),
        Expr::Add(a, b) => add(fold(a), fold(b)),
        Expr::Sub(a, b) => sub(fold(a), fold(b)),
        Expr::Mul(a, b) => {
            let (fa, fb) = (fold(a), fold(b));
            // `mul` annihilates on zero; keep that only when the other side
            // is known finite at every point, i.e. also constant-foldable.
            if (fa.is_zero() && !matches!(fb.as_ref(), Expr::Const(_)))
                || (fb.is_zero() && !matches!(fa.as_ref(), Expr::Const(_)))
            {
                return arc(Expr::Mul(fa, fb));
            }
            mul(fa, fb)
        }
        Expr::Div(a, b) => div(fold(a), fold(b)),
        Expr::Pow(a, k) => powi(fold(a), *k),
        Expr::Call(f, a) => call(*f, fold(a)),
    }
}

// ---------------------------------------------------------------------------
// Pretty-printing. Output re-parses to a structurally identical tree.

impl Expr {
    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(_, _) | Expr::Sub(_, _) => 1,
            Expr::Mul(_, _) | Expr::Div(_, _) => 2,
            Expr::Neg(_) => 3,
            Expr::Pow(_, _) => 4,
            Expr::Const(_) | Expr::Var(_, _) | Expr::Call(_, _) => 5,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, parent: u8) -> fmt::Result {
        let prec = self.precedence();
        let need_parens = prec < parent;
        if need_parens {
            write!(f, "(")?;
        }
        match self {
            Expr::Const(v) => {
                if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) {
                    // Negative literals print parenthesized through Neg below,
                    // but folded constants can be negative: print as unary minus.
                    write!(f, "-{}", fmt_f64(-v))?;
                } else {
                    write!(f, "{}", fmt_f64(*v))?;
                }
            }
            Expr::Var(b, i) => write!(f, "{}[{}]", b.name(), i + 1)?,
            Expr::Neg(e) => {
                write!(f, "-")?;
                e.fmt_prec(f, 4)?;
            }
            Expr::Add(a, b) => {
                a.fmt_prec(f, prec)?;
                write!(f, " + ")?;
                b.fmt_prec(f, prec + 1)?;
            }
            Expr::Sub(a, b) => {
                a.fmt_prec(f, prec)?;
                write!(f, " - ")?;
                b.fmt_prec(f, prec + 1)?;
            }
            Expr::Mul(a, b) => {
                a.fmt_prec(f, prec)?;
                write!(f, "*")?;
                b.fmt_prec(f, prec + 1)?;
            }
            Expr::Div(a, b) => {
                a.fmt_prec(f, prec)?;
                write!(f, "/")?;
                b.fmt_prec(f, prec + 1)?;
            }
            Expr::Pow(e, k) => {
                e.fmt_prec(f, prec + 1)?;
                if *k < 0 {
                    write!(f, "^({k})")?;
                } else {
                    write!(f, "^{k}")?;
                }
            }
            Expr::Call(g, e) => {
                write!(f, "{}(", g.name())?;
                e.fmt_prec(f, 0)?;
                write!(f, ")")?;
            }
        }
        if need_parens {
            write!(f, ")")?;
        }
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

// ---------------------------------------------------------------------------
// Compiled evaluation: flattened postfix programs for hot loops (the
// brute-force oracle grids and solver row evaluations).

#[derive(Debug, Clone)]
enum Instr {
    Push(f64),
    Load(Block, usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    PowI(i32),
    Call(Builtin),
}

/// A stack program compiled from an expression tree.
#[derive(Debug, Clone)]
pub struct Compiled {
    code: Vec<Instr>,
    stack_depth: usize,
}

impl Compiled {
    pub fn new(e: &Expr) -> Compiled {
        let mut code = Vec::new();
        fn emit(e: &Expr, code: &mut Vec<Instr>) -> usize {
            match e {
                Expr::Const(v) => {
                    code.push(Instr::Push(*v));
                    1
                }
                Expr::Var(b, i) => {
                    code.push(Instr::Load(*b, *i));
                    1
                }
                Expr::Neg(a) => {
                    let d = emit(a, code);
                    code.push(Instr::Neg);
                    d
                }
                Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                    let da = emit(a, code);
                    let db = emit(b, code);
                    code.push(match e {
                        Expr::Add(_, _) => Instr::Add,
                        Expr::Sub(_, _) => Instr::Sub,
                        Expr::Mul(_, _) => Instr::Mul,
                        _ => Instr::Div,
                    });
                    da.max(db + 1)
                }
                Expr::Pow(a, k) => {
                    let d = emit(a, code);
                    code.push(Instr::PowI(*k));
                    d
                }
                Expr::Call(f, a) => {
                    let d = emit(a, code);
                    code.push(Instr::Call(*f));
                    d
                }
            }
        }
        let depth = emit(e, &mut code);
        Compiled {
            code,
            stack_depth: depth,
        }
    }

    pub fn stack_depth(&self) -> usize {
        self.stack_depth
    }

    /// Evaluate using a caller-provided scratch stack (cleared on entry).
    pub fn eval_with(&self, p: &Point, stack: &mut Vec<f64>) -> Result<f64, EvalError> {
        stack.clear();
        for ins in &self.code {
            match ins {
                Instr::Push(v) => stack.push(*v),
                Instr::Load(b, i) => stack.push(p.get(*b, *i)?),
                Instr::Neg => {
                    let a = stack.last_mut().unwrap();
                    *a = -*a;
                }
                Instr::Add => {
                    let b = stack.pop().unwrap();
                    *stack.last_mut().unwrap() += b;
                }
                Instr::Sub => {
                    let b = stack.pop().unwrap();
                    *stack.last_mut().unwrap() -= b;
                }
                Instr::Mul => {
                    let b = stack.pop().unwrap();
                    *stack.last_mut().unwrap() *= b;
                }
                Instr::Div => {
                    let b = stack.pop().unwrap();
                    if b == 0.0 {
                        return Err(EvalError::Domain {
                            what: "division by zero".into(),
                        });
                    }
                    *stack.last_mut().unwrap() /= b;
                }
                Instr::PowI(k) => {
                    let a = stack.last_mut().unwrap();
                    if *a == 0.0 && *k < 0 {
                        return Err(EvalError::Domain {
                            what: format!("zero raised to negative power {k}"),
                        });
                    }
                    *a = a.powi(*k);
                }
                Instr::Call(f) => {
                    let a = stack.last_mut().unwrap();
                    *a = f.apply(*a)?;
                }
            }
        }
        debug_assert_eq!(stack.len(), 1);
        Ok(stack[0])
    }

    pub fn eval(&self, p: &Point) -> Result<f64, EvalError> {
        let mut stack = Vec::with_capacity(self.stack_depth);
        self.eval_with(p, &mut stack)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(i: usize) -> Arc<Expr> {
        Expr::var(Block::X, i)
    }
    fn y(i: usize) -> Arc<Expr> {
        Expr::var(Block::Y, i)
    }
    fn c(v: f64) -> Arc<Expr> {
        Expr::constant(v)
    }

    /// Lower objective of the isolated-KKT-failure model:
    /// 0.5*[(y1 - x + 5/8)^2 + (y2 - 27/8)^2].
    fn lower_objective() -> Arc<Expr> {
        mul(
            c(0.5),
            add(
                powi(add(sub(y(0), x(0)), c(0.625)), 2),
                powi(sub(y(1), c(3.375)), 2),
            ),
        )
    }

    #[test]
    fn evaluates_lower_objective_at_both_argmins() {
        let f = lower_objective();
        let xv = [0.0];
        let ya = [-2.0, 0.0];
        let yb = [2.5, 1.5];
        let fa = f.eval(&Point::xy(&xv, &ya)).unwrap();
        let fb = f.eval(&Point::xy(&xv, &yb)).unwrap();
        assert_eq!(fa, 6.640625);
        assert_eq!(fb, 6.640625);
    }

    #[test]
    fn constant_expression_evaluates_anywhere() {
        let e = c(3.5);
        assert_eq!(e.eval(&Point::default()).unwrap(), 3.5);
    }

    #[test]
    fn gradient_matches_hand_values() {
        let f = lower_objective();
        let grad = gradient_block(&f, Block::Y, 2);
        let xv = [0.0];
        let ub = [2.5, 1.5];
        let p = Point::xy(&xv, &ub);
        let g0 = grad[0].eval(&p).unwrap();
        let g1 = grad[1].eval(&p).unwrap();
        assert_eq!(g0, 25.0 / 8.0);
        assert_eq!(g1, -15.0 / 8.0);
    }

    #[test]
    fn gradient_of_hyperbola_constraint() {
        // g1 = -y1^2 + y2^2 + 4, grad at (-2, 0) is (4, 0)
        let g1 = add(add(neg(powi(y(0), 2)), powi(y(1), 2)), c(4.0));
        let grad = gradient_block(&g1, Block::Y, 2);
        let xv = [0.0];
        let yv = [-2.0, 0.0];
        let p = Point::xy(&xv, &yv);
        assert_eq!(grad[0].eval(&p).unwrap(), 4.0);
        assert_eq!(grad[1].eval(&p).unwrap(), 0.0);
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let grad = gradient_block(&c(7.25), Block::X, 3);
        for g in grad {
            assert!(g.is_zero());
        }
    }

    #[test]
    fn hessian_of_quadratic_is_identity() {
        let f = lower_objective();
        let h = hessian_block(&f, Block::Y, 2, Block::Y, 2);
        let xv = [0.3];
        let yv = [1.7, -0.4];
        let p = Point::xy(&xv, &yv);
        for i in 0..2 {
            for j in 0..2 {
                let v = h[i][j].eval(&p).unwrap();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn hessian_of_hyperbola_constraint_is_diag() {
        let g1 = add(add(neg(powi(y(0), 2)), powi(y(1), 2)), c(4.0));
        let h = hessian_block(&g1, Block::Y, 2, Block::Y, 2);
        let p = Point::xy(&[0.0], &[5.0, -3.0]);
        assert_eq!(h[0][0].eval(&p).unwrap(), -2.0);
        assert_eq!(h[1][1].eval(&p).unwrap(), 2.0);
        assert_eq!(h[0][1].eval(&p).unwrap(), 0.0);
        assert_eq!(h[1][0].eval(&p).unwrap(), 0.0);
    }

    #[test]
    fn hessian_of_linear_expression_is_zero() {
        let e = add(mul(c(3.0), y(0)), sub(y(1), x(0)));
        let h = hessian_block(&e, Block::Y, 2, Block::Y, 2);
        for row in h {
            for entry in row {
                assert!(entry.is_zero());
            }
        }
    }

    #[test]
    fn domain_errors_are_reported() {
        let e = call(Builtin::Log, y(0));
        let p = Point::xy(&[], &[-1.0]);
        assert!(matches!(e.eval(&p), Err(EvalError::Domain { .. })));
        let d = div(c(1.0), y(0));
        let p0 = Point::xy(&[], &[0.0]);
        assert!(matches!(d.eval(&p0), Err(EvalError::Domain { .. })));
    }

    #[test]
    fn fold_keeps_erroring_constant_subtrees() {
        let e = arc(Expr::Div(c(1.0), c(0.0)));
        let folded = fold(&e);
        assert!(matches!(
            folded.eval(&Point::default()),
            Err(EvalError::Domain { .. })
        ));
    }

    #[test]
    fn compiled_eval_agrees_with_tree_eval() {
        let f = lower_objective();
        let compiled = Compiled::new(&f);
        let xv = [0.25];
        let yv = [1.5, -2.5];
        let p = Point::xy(&xv, &yv);
        assert_eq!(compiled.eval(&p).unwrap(), f.eval(&p).unwrap());
    }
}

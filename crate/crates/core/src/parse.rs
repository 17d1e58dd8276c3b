//! Parser for the `.blp` model format.
//!
//! ```text
//! # a line comment
//! var x[1];
//! var y[2];
//! upper {
//!   minimize x[1]^2 - 2*x[1] + 3*y[1] + y[2];
//!   x[1] - 1 <= 0;
//! }
//! lower {
//!   minimize 0.5*((y[1] - x[1] + 0.625)^2 + (y[2] - 3.375)^2);
//!   -y[1]^2 + y[2]^2 + 4 <= 0;
//! }
//! meta { name = Example; xref = 0; yref = -2, 0; }
//! ```
//!
//! Expressions use `+ - * / ^` with integer exponents, unary minus,
//! parentheses, 1-based indexed references `x[i]` / `y[i]`, and the builtins
//! `sin cos exp log sqrt`. Constraints are stored in `e <= 0` form; a nonzero
//! right-hand side is folded into the left side. Constant subtrees are folded
//! after parsing.

use std::sync::Arc;

use thiserror::Error;

use crate::expr::{self, Block, Builtin, Expr};
use crate::problem::{BilevelProblem, ProblemMeta};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{line}:{col}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    Int(i64),
    LParen,
    RParen,
    LBracket,
    RBracket,
    LBrace,
    RBrace,
    Semi,
    Comma,
    Eq,
    Le,
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Number(v) => format!("number `{v}`"),
            Tok::Int(v) => format!("integer `{v}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::LBrace => "`{`".into(),
            Tok::RBrace => "`}`".into(),
            Tok::Semi => "`;`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Eq => "`=`".into(),
            Tok::Le => "`<=`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Caret => "`^`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

struct Lexer<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    line: usize,
    col: usize,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src,
            bytes: src.as_bytes(),
            pos: 0,
            line: 1,
            col: 1,
        }
    }

    fn error(&self, msg: impl Into<String>) -> ParseError {
        ParseError {
            line: self.line,
            col: self.col,
            msg: msg.into(),
        }
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.bytes.get(self.pos).copied()?;
        self.pos += 1;
        if b == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(b)
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn tokenize(mut self) -> Result<Vec<Spanned>, ParseError> {
        let mut out = Vec::new();
        loop {
            while let Some(b) = self.peek() {
                if b == b'#' {
                    while let Some(c) = self.peek() {
                        if c == b'\n' {
                            break;
                        }
                        self.bump();
                    }
                } else if b.is_ascii_whitespace() {
                    self.bump();
                } else {
                    break;
                }
            }
            let (line, col) = (self.line, self.col);
            let Some(b) = self.peek() else {
                out.push(Spanned {
                    tok: Tok::Eof,
                    line,
                    col,
                });
                return Ok(out);
            };
            let tok = match b {
                b'(' => {
                    self.bump();
                    Tok::LParen
                }
                b')' => {
                    self.bump();
                    Tok::RParen
                }
                b'[' => {
                    self.bump();
                    Tok::LBracket
                }
                b']' => {
                    self.bump();
                    Tok::RBracket
                }
                b'{' => {
                    self.bump();
                    Tok::LBrace
                }
                b'}' => {
                    self.bump();
                    Tok::RBrace
                }
                b';' => {
                    self.bump();
                    Tok::Semi
                }
                b',' => {
                    self.bump();
                    Tok::Comma
                }
                b'+' => {
                    self.bump();
                    Tok::Plus
                }
                b'-' => {
                    self.bump();
                    Tok::Minus
                }
                b'*' => {
                    self.bump();
                    Tok::Star
                }
                b'/' => {
                    self.bump();
                    Tok::Slash
                }
                b'^' => {
                    self.bump();
                    Tok::Caret
                }
                b'=' => {
                    self.bump();
                    Tok::Eq
                }
                b'<' => {
                    self.bump();
                    if self.peek() == Some(b'=') {
                        self.bump();
                        Tok::Le
                    } else {
                        return Err(self.error("expected `<=`"));
                    }
                }
                b'0'..=b'9' | b'.' => self.number()?,
                b'_' | b'a'..=b'z' | b'A'..=b'Z' => self.ident(),
                other => {
                    return Err(self.error(format!(
                        "unexpected character `{}`",
                        char::from(other)
                    )))
                }
            };
            out.push(Spanned { tok, line, col });
        }
    }

    fn number(&mut self) -> Result<Tok, ParseError> {
        let start = self.pos;
        let mut is_float = false;
        while let Some(b) = self.peek() {
            match b {
                b'0'..=b'9' => {
                    self.bump();
                }
                b'.' => {
                    is_float = true;
                    self.bump();
                }
                b'e' | b'E' => {
                    is_float = true;
                    self.bump();
                    if matches!(self.peek(), Some(b'+') | Some(b'-')) {
                        self.bump();
                    }
                }
                _ => break,
            }
        }
        let text = &self.src[start..self.pos];
        if is_float {
            text.parse::<f64>()
                .map(Tok::Number)
                .map_err(|_| self.error(format!("invalid number literal `{text}`")))
        } else {
            text.parse::<i64>()
                .map(Tok::Int)
                .map_err(|_| self.error(format!("invalid integer literal `{text}`")))
        }
    }

    fn ident(&mut self) -> Tok {
        let start = self.pos;
        while let Some(b) = self.peek() {
            if b == b'_' || b.is_ascii_alphanumeric() {
                self.bump();
            } else {
                break;
            }
        }
        Tok::Ident(self.src[start..self.pos].to_string())
    }
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    d: usize,
    l: usize,
}

impl Parser {
    fn cur(&self) -> &Spanned {
        &self.toks[self.pos]
    }

    fn error_here(&self, msg: impl Into<String>) -> ParseError {
        let t = self.cur();
        ParseError {
            line: t.line,
            col: t.col,
            msg: msg.into(),
        }
    }

    fn advance(&mut self) -> Spanned {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, tok: Tok) -> Result<Spanned, ParseError> {
        if self.cur().tok == tok {
            Ok(self.advance())
        } else {
            Err(self.error_here(format!(
                "expected {}, found {}",
                tok.describe(),
                self.cur().tok.describe()
            )))
        }
    }

    fn expect_ident(&mut self) -> Result<String, ParseError> {
        match &self.cur().tok {
            Tok::Ident(s) => {
                let s = s.clone();
                self.advance();
                Ok(s)
            }
            other => Err(self.error_here(format!(
                "expected identifier, found {}",
                other.describe()
            ))),
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        match &self.cur().tok {
            Tok::Ident(s) if s == kw => {
                self.advance();
                Ok(())
            }
            other => Err(self.error_here(format!(
                "expected keyword `{kw}`, found {}",
                other.describe()
            ))),
        }
    }

    // expr := term (("+"|"-") term)*
    fn expr(&mut self) -> Result<Arc<Expr>, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.cur().tok {
                Tok::Plus => {
                    self.advance();
                    let rhs = self.term()?;
                    lhs = Arc::new(Expr::Add(lhs, rhs));
                }
                Tok::Minus => {
                    self.advance();
                    let rhs = self.term()?;
                    lhs = Arc::new(Expr::Sub(lhs, rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // term := factor (("*"|"/") factor)*
    fn term(&mut self) -> Result<Arc<Expr>, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            match self.cur().tok {
                Tok::Star => {
                    self.advance();
                    let rhs = self.factor()?;
                    lhs = Arc::new(Expr::Mul(lhs, rhs));
                }
                Tok::Slash => {
                    self.advance();
                    let rhs = self.factor()?;
                    lhs = Arc::new(Expr::Div(lhs, rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // factor := "-" factor | power
    fn factor(&mut self) -> Result<Arc<Expr>, ParseError> {
        if self.cur().tok == Tok::Minus {
            self.advance();
            let inner = self.factor()?;
            return Ok(Arc::new(Expr::Neg(inner)));
        }
        self.power()
    }

    // power := atom ("^" int)*
    fn power(&mut self) -> Result<Arc<Expr>, ParseError> {
        let mut base = self.atom()?;
        while self.cur().tok == Tok::Caret {
            self.advance();
            let k = self.exponent()?;
            base = Arc::new(Expr::Pow(base, k));
        }
        Ok(base)
    }

    fn exponent(&mut self) -> Result<i32, ParseError> {
        // `^3` or `^(-3)`
        match self.cur().tok.clone() {
            Tok::Int(v) => {
                self.advance();
                Ok(v as i32)
            }
            Tok::LParen => {
                self.advance();
                let mut sign = 1i64;
                if self.cur().tok == Tok::Minus {
                    self.advance();
                    sign = -1;
                }
                let v = match self.cur().tok {
                    Tok::Int(v) => {
                        self.advance();
                        v
                    }
                    _ => return Err(self.error_here("exponent must be an integer literal")),
                };
                self.expect(Tok::RParen)?;
                Ok((sign * v) as i32)
            }
            _ => Err(self.error_here("exponent must be an integer literal")),
        }
    }

    fn atom(&mut self) -> Result<Arc<Expr>, ParseError> {
        match self.cur().tok.clone() {
            Tok::Number(v) => {
                self.advance();
                Ok(Expr::constant(v))
            }
            Tok::Int(v) => {
                self.advance();
                Ok(Expr::constant(v as f64))
            }
            Tok::LParen => {
                self.advance();
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(name) => {
                let span = self.advance();
                match name.as_str() {
                    "x" | "y" => {
                        self.expect(Tok::LBracket)?;
                        let idx = match self.cur().tok {
                            Tok::Int(v) if v >= 1 => {
                                self.advance();
                                v as usize
                            }
                            _ => {
                                return Err(
                                    self.error_here("variable index must be a positive integer")
                                )
                            }
                        };
                        self.expect(Tok::RBracket)?;
                        let (block, dim) = if name == "x" {
                            (Block::X, self.d)
                        } else {
                            (Block::Y, self.l)
                        };
                        if idx > dim {
                            return Err(ParseError {
                                line: span.line,
                                col: span.col,
                                msg: format!(
                                    "dimension mismatch: {name}[{idx}] but `var {name}[{dim}]` was declared"
                                ),
                            });
                        }
                        Ok(Expr::var(block, idx - 1))
                    }
                    "sin" | "cos" | "exp" | "log" | "sqrt" => {
                        let f = match name.as_str() {
                            "sin" => Builtin::Sin,
                            "cos" => Builtin::Cos,
                            "exp" => Builtin::Exp,
                            "log" => Builtin::Log,
                            _ => Builtin::Sqrt,
                        };
                        self.expect(Tok::LParen)?;
                        let e = self.expr()?;
                        self.expect(Tok::RParen)?;
                        Ok(Arc::new(Expr::Call(f, e)))
                    }
                    other => Err(ParseError {
                        line: span.line,
                        col: span.col,
                        msg: format!("undeclared variable or unknown function `{other}`"),
                    }),
                }
            }
            other => Err(self.error_here(format!(
                "expected expression, found {}",
                other.describe()
            ))),
        }
    }

    fn decl(&mut self) -> Result<(String, usize), ParseError> {
        self.expect_keyword("var")?;
        let name = self.expect_ident()?;
        if name != "x" && name != "y" {
            return Err(self.error_here(format!(
                "only blocks `x` and `y` can be declared, found `{name}`"
            )));
        }
        self.expect(Tok::LBracket)?;
        let dim = match self.cur().tok {
            Tok::Int(v) if v >= 1 => {
                self.advance();
                v as usize
            }
            _ => return Err(self.error_here("block dimension must be a positive integer")),
        };
        self.expect(Tok::RBracket)?;
        self.expect(Tok::Semi)?;
        Ok((name, dim))
    }

    /// Parses `minimize expr; { constraint; }` inside braces. Constraints
    /// are `expr <= 0` (a nonzero right side is moved to the left).
    fn section(&mut self) -> Result<(Arc<Expr>, Vec<Arc<Expr>>), ParseError> {
        self.expect(Tok::LBrace)?;
        if !matches!(&self.cur().tok, Tok::Ident(s) if s == "minimize") {
            return Err(self.error_here("objective missing: section must start with `minimize`"));
        }
        self.advance();
        let objective = self.expr()?;
        self.expect(Tok::Semi)?;
        let mut constraints = Vec::new();
        while self.cur().tok != Tok::RBrace {
            let lhs = self.expr()?;
            self.expect(Tok::Le)?;
            let rhs = self.expr()?;
            self.expect(Tok::Semi)?;
            let row = if rhs.is_zero() {
                lhs
            } else {
                Arc::new(Expr::Sub(lhs, rhs))
            };
            constraints.push(row);
        }
        self.expect(Tok::RBrace)?;
        Ok((objective, constraints))
    }

    fn meta_values(&mut self) -> Result<Vec<f64>, ParseError> {
        let mut vals = Vec::new();
        loop {
            let mut sign = 1.0;
            if self.cur().tok == Tok::Minus {
                self.advance();
                sign = -1.0;
            }
            let v = match self.cur().tok {
                Tok::Number(v) => {
                    self.advance();
                    v
                }
                Tok::Int(v) => {
                    self.advance();
                    v as f64
                }
                _ => return Err(self.error_here("expected a numeric metadata value")),
            };
            vals.push(sign * v);
            if self.cur().tok == Tok::Comma {
                self.advance();
            } else {
                break;
            }
        }
        Ok(vals)
    }

    fn meta(&mut self, meta: &mut ProblemMeta) -> Result<(), ParseError> {
        self.expect(Tok::LBrace)?;
        while self.cur().tok != Tok::RBrace {
            let key = self.expect_ident()?;
            self.expect(Tok::Eq)?;
            match key.as_str() {
                "name" => meta.name = self.expect_ident()?,
                "lower_convex" => {
                    let v = self.expect_ident()?;
                    meta.lower_convex = match v.as_str() {
                        "true" => true,
                        "false" => false,
                        _ => {
                            return Err(
                                self.error_here("lower_convex must be `true` or `false`")
                            )
                        }
                    };
                }
                "xref" => meta.x_ref = Some(self.meta_values()?),
                "yref" => meta.y_ref = Some(self.meta_values()?),
                "Fstar" => meta.upper_star = Some(self.meta_values()?[0]),
                "fstar" => meta.lower_star = Some(self.meta_values()?[0]),
                "x0" => meta.x0 = Some(self.meta_values()?),
                "y0" => meta.y0 = Some(self.meta_values()?),
                "xbox" => meta.x_box = Some(pair_up(self.meta_values()?, self.cur())?),
                "ybox" => meta.y_box = Some(pair_up(self.meta_values()?, self.cur())?),
                other => {
                    return Err(self.error_here(format!("unknown metadata key `{other}`")))
                }
            }
            self.expect(Tok::Semi)?;
        }
        self.expect(Tok::RBrace)?;
        Ok(())
    }
}

fn pair_up(vals: Vec<f64>, at: &Spanned) -> Result<Vec<(f64, f64)>, ParseError> {
    if vals.len() % 2 != 0 {
        return Err(ParseError {
            line: at.line,
            col: at.col,
            msg: "box metadata needs an even number of values (lo, hi per axis)".into(),
        });
    }
    Ok(vals.chunks(2).map(|c| (c[0], c[1])).collect())
}

/// Parse a bilevel model from `.blp` source text.
pub fn parse_problem(source: &str) -> Result<BilevelProblem, ParseError> {
    let toks = Lexer::new(source).tokenize()?;
    let mut p = Parser {
        toks,
        pos: 0,
        d: 0,
        l: 0,
    };

    let mut d = None;
    let mut l = None;
    for _ in 0..2 {
        let (name, dim) = p.decl()?;
        let slot = if name == "x" { &mut d } else { &mut l };
        if slot.is_some() {
            return Err(p.error_here(format!("block `{name}` declared twice")));
        }
        *slot = Some(dim);
    }
    let (d, l) = match (d, l) {
        (Some(d), Some(l)) => (d, l),
        _ => return Err(p.error_here("both `var x[..];` and `var y[..];` must be declared")),
    };
    p.d = d;
    p.l = l;

    let mut upper = None;
    let mut lower = None;
    for _ in 0..2 {
        let which = p.expect_ident()?;
        let body = p.section()?;
        match which.as_str() {
            "upper" if upper.is_none() => upper = Some(body),
            "lower" if lower.is_none() => lower = Some(body),
            "upper" | "lower" => {
                return Err(p.error_here(format!("section `{which}` appears twice")))
            }
            other => {
                return Err(p.error_here(format!(
                    "expected `upper` or `lower` section, found `{other}`"
                )))
            }
        }
    }
    let (upper_obj, upper_cons) = upper.unwrap();
    let (lower_obj, lower_cons) = lower.unwrap();

    let mut meta = ProblemMeta::default();
    if matches!(&p.cur().tok, Tok::Ident(s) if s == "meta") {
        p.advance();
        p.meta(&mut meta)?;
    }
    if p.cur().tok != Tok::Eof {
        return Err(p.error_here(format!(
            "expected end of input, found {}",
            p.cur().tok.describe()
        )));
    }

    let fold_all = |v: Vec<Arc<Expr>>| v.iter().map(expr::fold).collect::<Vec<_>>();
    let prob = BilevelProblem::new(
        d,
        l,
        expr::fold(&upper_obj),
        fold_all(upper_cons),
        expr::fold(&lower_obj),
        fold_all(lower_cons),
        meta,
    );
    prob.map_err(|msg| ParseError {
        line: 0,
        col: 0,
        msg,
    })
}

/// Render a problem back to `.blp` source. Re-parsing the output yields
/// structurally identical expression trees.
pub fn pretty_print(prob: &BilevelProblem) -> String {
    let mut out = String::new();
    out.push_str(&format!("var x[{}];\nvar y[{}];\n", prob.d, prob.l));
    out.push_str("upper {\n");
    out.push_str(&format!("  minimize {};\n", prob.upper_objective));
    for c in &prob.upper_constraints {
        out.push_str(&format!("  {c} <= 0;\n"));
    }
    out.push_str("}\nlower {\n");
    out.push_str(&format!("  minimize {};\n", prob.lower_objective));
    for c in &prob.lower_constraints {
        out.push_str(&format!("  {c} <= 0;\n"));
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Point;

    const MINIMAL: &str = "var x[1]; var y[1]; \
        upper{ minimize x[1]^2 + y[1]^2; } \
        lower{ minimize (y[1]-x[1])^2; }";

    #[test]
    fn parses_minimal_model() {
        let p = parse_problem(MINIMAL).unwrap();
        assert_eq!((p.d, p.l, p.m, p.p), (1, 1, 0, 0));
    }

    #[test]
    fn rejects_out_of_range_index() {
        let src = "var x[1]; var y[2]; \
            upper{ minimize x[1]; } \
            lower{ minimize y[3]; }";
        let err = parse_problem(src).unwrap_err();
        assert!(err.msg.contains("dimension mismatch"), "{err}");
    }

    #[test]
    fn rejects_missing_objective() {
        let src = "var x[1]; var y[1]; upper{ x[1] <= 0; } lower{ minimize y[1]; }";
        let err = parse_problem(src).unwrap_err();
        assert!(err.msg.contains("objective missing"), "{err}");
    }

    #[test]
    fn rejects_undeclared_variable() {
        let src = "var x[1]; var y[1]; upper{ minimize u[1]; } lower{ minimize y[1]; }";
        let err = parse_problem(src).unwrap_err();
        assert!(err.msg.contains("undeclared variable"), "{err}");
    }

    #[test]
    fn reports_line_and_column() {
        let src = "var x[1];\nvar y[1];\nupper{ minimize x[1] +; }\nlower{ minimize y[1]; }";
        let err = parse_problem(src).unwrap_err();
        assert_eq!(err.line, 3);
        assert!(err.col > 0);
    }

    #[test]
    fn normalizes_nonzero_rhs() {
        let src = "var x[1]; var y[1]; \
            upper{ minimize x[1]; x[1] <= 2; } \
            lower{ minimize y[1]^2; }";
        let p = parse_problem(src).unwrap();
        let xv = [5.0];
        let yv = [0.0];
        let v = p.upper_constraints[0].eval(&Point::xy(&xv, &yv)).unwrap();
        assert_eq!(v, 3.0); // stored as x - 2 <= 0
    }

    #[test]
    fn roundtrip_is_structurally_identical() {
        let src = "var x[1]; var y[2]; \
            upper{ minimize x[1]^2 - 2*x[1] + 3*y[1] + y[2]; x[1] - 1 <= 0; -x[1] - 1 <= 0; } \
            lower{ minimize 0.5*((y[1] - x[1] + 0.625)^2 + (y[2] - 3.375)^2); \
                   -y[1]^2 + y[2]^2 + 4 <= 0; \
                   sin(x[1])/exp(y[2]) - sqrt(9.0) <= 0; }";
        let p1 = parse_problem(src).unwrap();
        let printed = pretty_print(&p1);
        let p2 = parse_problem(&printed).unwrap();
        assert_eq!(p1.upper_objective, p2.upper_objective);
        assert_eq!(p1.lower_objective, p2.lower_objective);
        assert_eq!(p1.upper_constraints, p2.upper_constraints);
        assert_eq!(p1.lower_constraints, p2.lower_constraints);
    }

    #[test]
    fn parses_meta_block() {
        let src = "var x[1]; var y[2]; \
            upper{ minimize x[1]; } lower{ minimize y[1]; } \
            meta { name = Demo; lower_convex = true; xref = 0.5; yref = -2, 0; \
                   Fstar = -6; fstar = 6.640625; x0 = 1; y0 = 0, 0; \
                   xbox = -1, 1; ybox = -4, 4, -4, 4; }";
        let p = parse_problem(src).unwrap();
        assert_eq!(p.meta.name, "Demo");
        assert!(p.meta.lower_convex);
        assert_eq!(p.meta.y_ref.as_deref(), Some(&[-2.0, 0.0][..]));
        assert_eq!(p.meta.upper_star, Some(-6.0));
        assert_eq!(p.meta.y_box.as_deref(), Some(&[(-4.0, 4.0), (-4.0, 4.0)][..]));
    }
}

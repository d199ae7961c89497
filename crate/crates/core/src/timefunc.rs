//! Scalar expressions in `t` and state variables, with evaluation and exact
//! symbolic differentiation in `t`, plus matrices whose entries are such
//! expressions.
//!
//! Grammar (whitespace is ignored between tokens):
//!
//! ```text
//! expr     = term { ("+" | "-") term } ;
//! term     = unary { ("*" | "/") unary } ;
//! unary    = ("-" | "+") unary | power ;
//! power    = primary { "^" exponent } ;
//! exponent = [ "-" | "+" ] number ;
//! primary  = number | "t" | var | func "(" expr ")" | "(" expr ")" ;
//! var      = ("x" | "y") digit { digit } ;
//! func     = "sin" | "cos" | "exp" | "ln" | "sqrt" | "abs" ;
//! number   = digit { digit } [ "." { digit } ] [ ("e" | "E") [ "+" | "-" ] digit { digit } ] ;
//! ```
//!
//! `y1…yn` are only accepted in pair scope (matrices of `(t, x, y)`).

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pencil::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at offset {offset}: expected {expected}, found {found}")]
    Syntax {
        offset: usize,
        expected: String,
        found: String,
    },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("domain error in `{node}` (argument {argument})")]
    Domain { node: String, argument: f64 },
    #[error("division by zero in `{node}`")]
    DivisionByZero { node: String },
    #[error("`{node}` is not differentiable in t")]
    NotDifferentiable { node: String },
    #[error("state has dimension {got}, expression needs {needed}")]
    Dimension { needed: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Abs,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "ln" => Func::Ln,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }
}

/// Expression tree. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Time,
    /// `x{i+1}`
    X(usize),
    /// `y{i+1}`
    Y(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, f64),
    Call(Func, Box<Expr>),
}

/// Which identifiers an expression may reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scope {
    pub n: usize,
    pub allow_pair: bool,
    /// Extra name bound to `x1`, used for scalar functions such as `g(v)`.
    pub alias: Option<String>,
}

impl Scope {
    pub fn state(n: usize) -> Self {
        Self {
            n,
            allow_pair: false,
            alias: None,
        }
    }

    pub fn pair(n: usize) -> Self {
        Self {
            n,
            allow_pair: true,
            alias: None,
        }
    }

    pub fn scalar(name: &str) -> Self {
        Self {
            n: 1,
            allow_pair: false,
            alias: Some(name.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Caret => "`^`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, ExprError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let tok = match c {
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let lit = &text[start..i];
                let value: f64 = lit.parse().map_err(|_| ExprError::Syntax {
                    offset: start,
                    expected: "a number".into(),
                    found: format!("`{lit}`"),
                })?;
                if !value.is_finite() {
                    return Err(ExprError::Syntax {
                        offset: start,
                        expected: "a finite number".into(),
                        found: format!("`{lit}`"),
                    });
                }
                out.push((start, Tok::Num(value)));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((start, Tok::Ident(text[start..i].to_string())));
                continue;
            }
            _ => {
                let ch = text[start..].chars().next().unwrap_or('?');
                return Err(ExprError::Syntax {
                    offset: start,
                    expected: "an operand or operator".into(),
                    found: format!("`{ch}`"),
                });
            }
        };
        out.push((start, tok));
        i += 1;
    }
    out.push((text.len(), Tok::End));
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    scope: &'a Scope,
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].1
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].0
    }

    fn bump(&mut self) -> (usize, Tok) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn fail<T>(&self, expected: &str) -> Result<T, ExprError> {
        Err(ExprError::Syntax {
            offset: self.offset(),
            expected: expected.into(),
            found: self.peek().describe(),
        })
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Tok::Plus => {
                    self.bump();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Tok::Minus => {
                    self.bump();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Tok::Star => {
                    self.bump();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Tok::Slash => {
                    self.bump();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Tok::Minus => {
                self.bump();
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Tok::Plus => {
                self.bump();
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let mut base = self.primary()?;
        while *self.peek() == Tok::Caret {
            self.bump();
            let sign = match self.peek() {
                Tok::Minus => {
                    self.bump();
                    -1.0
                }
                Tok::Plus => {
                    self.bump();
                    1.0
                }
                _ => 1.0,
            };
            match self.peek().clone() {
                Tok::Num(v) => {
                    self.bump();
                    base = Expr::Pow(Box::new(base), sign * v);
                }
                _ => return self.fail("a real literal exponent"),
            }
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let (offset, tok) = (self.offset(), self.peek().clone());
        match tok {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                if *self.peek() != Tok::RParen {
                    return self.fail("`)`");
                }
                self.bump();
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump();
                if let Some(f) = Func::from_name(&name) {
                    if *self.peek() != Tok::LParen {
                        return self.fail(&format!("`(` after `{name}`"));
                    }
                    self.bump();
                    let arg = self.expr()?;
                    if *self.peek() != Tok::RParen {
                        return self.fail("`)`");
                    }
                    self.bump();
                    return Ok(Expr::Call(f, Box::new(arg)));
                }
                self.variable(&name, offset)
            }
            _ => self.fail("an operand"),
        }
    }

    fn variable(&self, name: &str, offset: usize) -> Result<Expr, ExprError> {
        if name == "t" {
            return Ok(Expr::Time);
        }
        if self.scope.alias.as_deref() == Some(name) {
            return Ok(Expr::X(0));
        }
        let unknown = || ExprError::UnknownIdentifier {
            name: name.to_string(),
            offset,
        };
        let (head, digits) = name.split_at(1);
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(unknown());
        }
        let idx: usize = digits.parse().map_err(|_| unknown())?;
        if idx == 0 || idx > self.scope.n {
            return Err(unknown());
        }
        match head {
            "x" => Ok(Expr::X(idx - 1)),
            "y" if self.scope.allow_pair => Ok(Expr::Y(idx - 1)),
            _ => Err(unknown()),
        }
    }
}

/// Parses `text` over state dimension `n` (identifiers `t`, `x1…xn`).
pub fn parse_expr(text: &str, n: usize) -> Result<Expr, ExprError> {
    parse_expr_in(text, &Scope::state(n))
}

pub fn parse_expr_in(text: &str, scope: &Scope) -> Result<Expr, ExprError> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        scope,
    };
    let e = p.expr()?;
    if *p.peek() != Tok::End {
        return p.fail("an operator or end of input");
    }
    Ok(e)
}

fn fmt_num(v: f64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if v < 0.0 || (v == 0.0 && v.is_sign_negative()) {
        write!(f, "(-{:?})", -v)
    } else {
        write!(f, "{v:?}")
    }
}

/// Canonical, fully parenthesised form that re-parses to an equivalent tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => fmt_num(*v, f),
            Expr::Time => write!(f, "t"),
            Expr::X(i) => write!(f, "x{}", i + 1),
            Expr::Y(i) => write!(f, "y{}", i + 1),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, p) => write!(f, "({a}^{p:?})"),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

fn checked(node: &Expr, value: f64, argument: f64) -> Result<f64, ExprError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(ExprError::Domain {
            node: node.to_string(),
            argument,
        })
    }
}

impl Expr {
    /// Evaluates at `(t, x)`.
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<f64, ExprError> {
        self.eval_pair(t, x, &[])
    }

    /// Evaluates at `(t, x, y)`; `y` is only read by `Y` nodes.
    pub fn eval_pair(&self, t: f64, x: &[f64], y: &[f64]) -> Result<f64, ExprError> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Time => t,
            Expr::X(i) => *x.get(*i).ok_or(ExprError::Dimension {
                needed: i + 1,
                got: x.len(),
            })?,
            Expr::Y(i) => *y.get(*i).ok_or(ExprError::Dimension {
                needed: i + 1,
                got: y.len(),
            })?,
            Expr::Neg(a) => -a.eval_pair(t, x, y)?,
            Expr::Add(a, b) => {
                let v = a.eval_pair(t, x, y)? + b.eval_pair(t, x, y)?;
                checked(self, v, v)?
            }
            Expr::Sub(a, b) => {
                let v = a.eval_pair(t, x, y)? - b.eval_pair(t, x, y)?;
                checked(self, v, v)?
            }
            Expr::Mul(a, b) => {
                let v = a.eval_pair(t, x, y)? * b.eval_pair(t, x, y)?;
                checked(self, v, v)?
            }
            Expr::Div(a, b) => {
                let num = a.eval_pair(t, x, y)?;
                let den = b.eval_pair(t, x, y)?;
                if den == 0.0 {
                    return Err(ExprError::DivisionByZero {
                        node: self.to_string(),
                    });
                }
                checked(self, num / den, den)?
            }
            Expr::Pow(a, p) => {
                let base = a.eval_pair(t, x, y)?;
                if base == 0.0 && *p < 0.0 {
                    return Err(ExprError::DivisionByZero {
                        node: self.to_string(),
                    });
                }
                let v = if *p == 2.0 { base * base } else { base.powf(*p) };
                checked(self, v, base)?
            }
            Expr::Call(f, a) => {
                let arg = a.eval_pair(t, x, y)?;
                let v = match f {
                    Func::Sin => arg.sin(),
                    Func::Cos => arg.cos(),
                    Func::Exp => arg.exp(),
                    Func::Abs => arg.abs(),
                    Func::Ln => {
                        if arg <= 0.0 {
                            f64::NAN
                        } else {
                            arg.ln()
                        }
                    }
                    Func::Sqrt => {
                        if arg < 0.0 {
                            f64::NAN
                        } else {
                            arg.sqrt()
                        }
                    }
                };
                checked(self, v, arg)?
            }
        })
    }

    pub fn depends_on_t(&self) -> bool {
        self.any_leaf(&|e| matches!(e, Expr::Time))
    }

    pub fn depends_on_state(&self) -> bool {
        self.any_leaf(&|e| matches!(e, Expr::X(_) | Expr::Y(_)))
    }

    /// Largest state index referenced plus one (0 if none).
    pub fn state_arity(&self) -> usize {
        match self {
            Expr::X(i) | Expr::Y(i) => i + 1,
            Expr::Num(_) | Expr::Time => 0,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.state_arity(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.state_arity().max(b.state_arity())
            }
        }
    }

    fn any_leaf(&self, pred: &dyn Fn(&Expr) -> bool) -> bool {
        match self {
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.any_leaf(pred),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.any_leaf(pred) || b.any_leaf(pred)
            }
            leaf => pred(leaf),
        }
    }

    /// Exact `∂/∂t`, state variables held constant. Constant subtrees are folded.
    pub fn diff_t(&self) -> Result<Expr, ExprError> {
        Ok(derivative(self)?.fold())
    }

    /// Folds every subtree whose leaves are all literals.
    pub fn fold(&self) -> Expr {
        let folded = match self {
            Expr::Neg(a) => Expr::Neg(Box::new(a.fold())),
            Expr::Add(a, b) => Expr::Add(Box::new(a.fold()), Box::new(b.fold())),
            Expr::Sub(a, b) => Expr::Sub(Box::new(a.fold()), Box::new(b.fold())),
            Expr::Mul(a, b) => Expr::Mul(Box::new(a.fold()), Box::new(b.fold())),
            Expr::Div(a, b) => Expr::Div(Box::new(a.fold()), Box::new(b.fold())),
            Expr::Pow(a, p) => Expr::Pow(Box::new(a.fold()), *p),
            Expr::Call(f, a) => Expr::Call(*f, Box::new(a.fold())),
            leaf => return leaf.clone(),
        };
        if folded.depends_on_t() || folded.depends_on_state() {
            return folded;
        }
        match folded.eval(0.0, &[]) {
            Ok(v) => Expr::Num(v),
            Err(_) => folded,
        }
    }
}

fn num(v: f64) -> Expr {
    Expr::Num(v)
}

fn is_zero(e: &Expr) -> bool {
    matches!(e, Expr::Num(v) if *v == 0.0)
}

fn add(a: Expr, b: Expr) -> Expr {
    match (is_zero(&a), is_zero(&b)) {
        (true, _) => b,
        (_, true) => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (is_zero(&a), is_zero(&b)) {
        (_, true) => a,
        (true, _) => Expr::Neg(Box::new(b)),
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    if is_zero(&a) || is_zero(&b) {
        return num(0.0);
    }
    match (&a, &b) {
        (Expr::Num(v), _) if *v == 1.0 => b,
        (_, Expr::Num(v)) if *v == 1.0 => a,
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    if is_zero(&a) {
        return num(0.0);
    }
    Expr::Div(Box::new(a), Box::new(b))
}

fn derivative(e: &Expr) -> Result<Expr, ExprError> {
    if !e.depends_on_t() {
        return Ok(num(0.0));
    }
    Ok(match e {
        Expr::Time => num(1.0),
        Expr::Num(_) | Expr::X(_) | Expr::Y(_) => num(0.0),
        Expr::Neg(a) => {
            let da = derivative(a)?;
            if is_zero(&da) {
                da
            } else {
                Expr::Neg(Box::new(da))
            }
        }
        Expr::Add(a, b) => add(derivative(a)?, derivative(b)?),
        Expr::Sub(a, b) => sub(derivative(a)?, derivative(b)?),
        Expr::Mul(a, b) => add(
            mul(derivative(a)?, (**b).clone()),
            mul((**a).clone(), derivative(b)?),
        ),
        Expr::Div(a, b) => sub(
            div(derivative(a)?, (**b).clone()),
            div(
                mul((**a).clone(), derivative(b)?),
                Expr::Pow(b.clone(), 2.0),
            ),
        ),
        Expr::Pow(a, p) => {
            let inner = if *p - 1.0 == 0.0 {
                num(1.0)
            } else {
                Expr::Pow(a.clone(), p - 1.0)
            };
            mul(mul(num(*p), inner), derivative(a)?)
        }
        Expr::Call(f, a) => {
            let da = derivative(a)?;
            let arg = (**a).clone();
            let outer = match f {
                Func::Sin => Expr::Call(Func::Cos, Box::new(arg)),
                Func::Cos => Expr::Neg(Box::new(Expr::Call(Func::Sin, Box::new(arg)))),
                Func::Exp => Expr::Call(Func::Exp, Box::new(arg)),
                Func::Ln => return Ok(div(da, arg)),
                Func::Sqrt => {
                    return Ok(div(
                        da,
                        Expr::Mul(
                            Box::new(num(2.0)),
                            Box::new(Expr::Call(Func::Sqrt, Box::new(arg))),
                        ),
                    ))
                }
                Func::Abs => {
                    return Err(ExprError::NotDifferentiable {
                        node: e.to_string(),
                    })
                }
            };
            mul(outer, da)
        }
    })
}

/// Free-function forms mirroring the method API.
pub fn eval_expr(ast: &Expr, t: f64, x: &[f64]) -> Result<f64, ExprError> {
    ast.eval(t, x)
}

pub fn diff_t(ast: &Expr) -> Result<Expr, ExprError> {
    ast.diff_t()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatrixError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("entry ({row},{col}): {source}")]
    Entry {
        row: usize,
        col: usize,
        #[source]
        source: ExprError,
    },
    #[error("declared symmetric but entries ({row},{col}) and ({col},{row}) differ by {difference:.3e} at t={t}")]
    Asymmetric {
        row: usize,
        col: usize,
        t: f64,
        difference: f64,
    },
    #[error("declared state-independent but entry ({row},{col}) references the state")]
    StateDependent { row: usize, col: usize },
}

/// Matrix of expressions; 1-based `(row, col)` in messages, 0-based in code.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFunction {
    rows: usize,
    cols: usize,
    entries: Vec<Expr>,
    symmetric: bool,
    depends_on_state: bool,
}

const SYMMETRY_PROBES: usize = 100;

impl MatrixFunction {
    /// Builds from row-major entries. A symmetric declaration is probed at
    /// 100 pseudo-random `(t, x)` points.
    pub fn new(
        rows: usize,
        cols: usize,
        entries: Vec<Expr>,
        symmetric: bool,
    ) -> Result<Self, MatrixError> {
        if entries.len() != rows * cols {
            return Err(MatrixError::Shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                entries.len()
            )));
        }
        if symmetric && rows != cols {
            return Err(MatrixError::Shape(format!(
                "{rows}x{cols} matrix declared symmetric"
            )));
        }
        let depends_on_state = entries.iter().any(Expr::depends_on_state);
        let mf = Self {
            rows,
            cols,
            entries,
            symmetric,
            depends_on_state,
        };
        if symmetric {
            mf.probe_symmetry()?;
        }
        Ok(mf)
    }

    pub fn parse(
        rows: usize,
        cols: usize,
        texts: &[&str],
        scope: &Scope,
        symmetric: bool,
    ) -> Result<Self, MatrixError> {
        let entries = texts
            .iter()
            .enumerate()
            .map(|(k, s)| {
                parse_expr_in(s, scope).map_err(|source| MatrixError::Entry {
                    row: k / cols.max(1) + 1,
                    col: k % cols.max(1) + 1,
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(rows, cols, entries, symmetric)
    }

    pub fn constant(m: &Matrix, symmetric: bool) -> Result<Self, MatrixError> {
        let entries = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| Expr::Num(m[(i, j)]))
            .collect();
        Self::new(m.nrows(), m.ncols(), entries, symmetric)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn depends_on_state(&self) -> bool {
        self.depends_on_state
    }

    pub fn entry(&self, row: usize, col: usize) -> &Expr {
        &self.entries[row * self.cols + col]
    }

    /// Rejects any entry that references the state.
    pub fn require_state_independent(&self) -> Result<(), MatrixError> {
        for (k, e) in self.entries.iter().enumerate() {
            if e.depends_on_state() {
                return Err(MatrixError::StateDependent {
                    row: k / self.cols + 1,
                    col: k % self.cols + 1,
                });
            }
        }
        Ok(())
    }

    fn state_arity(&self) -> usize {
        self.entries.iter().map(Expr::state_arity).max().unwrap_or(0)
    }

    fn probe_symmetry(&self) -> Result<(), MatrixError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
        let n = self.state_arity();
        for _ in 0..SYMMETRY_PROBES {
            let t = rng.random_range(-5.0..5.0);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            for i in 0..self.rows {
                for j in (i + 1)..self.cols {
                    let (Ok(a), Ok(b)) = (
                        self.entry(i, j).eval_pair(t, &x, &y),
                        self.entry(j, i).eval_pair(t, &x, &y),
                    ) else {
                        continue;
                    };
                    let d = (a - b).abs();
                    if d > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                        return Err(MatrixError::Asymmetric {
                            row: i + 1,
                            col: j + 1,
                            t,
                            difference: d,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Result<Matrix, MatrixError> {
        self.eval_pair(t, x, &[])
    }

    pub fn eval_pair(&self, t: f64, x: &[f64], y: &[f64]) -> Result<Matrix, MatrixError> {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                m[(i, j)] =
                    self.entry(i, j)
                        .eval_pair(t, x, y)
                        .map_err(|source| MatrixError::Entry {
                            row: i + 1,
                            col: j + 1,
                            source,
                        })?;
            }
        }
        if self.symmetric {
            m = (&m + m.transpose()) * 0.5;
        }
        Ok(m)
    }

    /// Entrywise `∂/∂t`; symmetry is inherited without re-probing.
    pub fn diff_t(&self) -> Result<Self, MatrixError> {
        let entries = self
            .entries
            .iter()
            .enumerate()
            .map(|(k, e)| {
                e.diff_t().map_err(|source| MatrixError::Entry {
                    row: k / self.cols + 1,
                    col: k % self.cols + 1,
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            depends_on_state: entries.iter().any(Expr::depends_on_state),
            entries,
            symmetric: self.symmetric,
        })
    }
}

/// Entrywise evaluation of a matrix function.
pub fn eval_matrix(mf: &MatrixFunction, t: f64, x: &[f64]) -> Result<Matrix, MatrixError> {
    mf.eval(t, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, t: f64, x: &[f64]) -> Result<f64, ExprError> {
        parse_expr(s, x.len())?.eval(t, x)
    }

    #[test]
    fn spec_examples() {
        assert_eq!(ev("sin(t)*x1", 0.0, &[3.0]).unwrap(), 0.0);
        assert_eq!(ev("1+2*3", 0.0, &[]).unwrap(), 7.0);
        assert_eq!(ev("exp(0)", 0.0, &[]).unwrap(), 1.0);
        assert_eq!(ev("x1*x2 - t", 1.0, &[2.0, 3.0]).unwrap(), 5.0);
        assert!(matches!(
            ev("sqrt(-1)", 0.0, &[]),
            Err(ExprError::Domain { .. })
        ));
        match parse_expr("2^3^?", 0) {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("-2^2", 0.0, &[]).unwrap(), -4.0);
        assert_eq!(ev("2^3^2", 0.0, &[]).unwrap(), 64.0);
        assert_eq!(ev("8/4/2", 0.0, &[]).unwrap(), 1.0);
        assert_eq!(ev("1-2-3", 0.0, &[]).unwrap(), -4.0);
        assert_eq!(ev("2*-3", 0.0, &[]).unwrap(), -6.0);
        assert_eq!(ev(" 4 ^ -0.5 ", 0.0, &[]).unwrap(), 0.5);
        assert_eq!(ev("1.5e1 + 2E-1", 0.0, &[]).unwrap(), 15.2);
    }

    #[test]
    fn identifiers() {
        assert!(matches!(
            parse_expr("x3", 2),
            Err(ExprError::UnknownIdentifier { offset: 0, .. })
        ));
        assert!(matches!(
            parse_expr("1 + foo", 2),
            Err(ExprError::UnknownIdentifier { offset: 4, .. })
        ));
        assert!(matches!(
            parse_expr("y1", 2),
            Err(ExprError::UnknownIdentifier { .. })
        ));
        let e = parse_expr_in("x1 - y2", &Scope::pair(2)).unwrap();
        assert_eq!(e.eval_pair(0.0, &[3.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        let g = parse_expr_in("v - 0.1*sqrt(v)", &Scope::scalar("v")).unwrap();
        assert!((g.eval(0.0, &[4.0]).unwrap() - 3.8).abs() < 1e-15);
    }

    #[test]
    fn syntax_errors() {
        assert!(matches!(parse_expr("", 1), Err(ExprError::Syntax { offset: 0, .. })));
        assert!(matches!(parse_expr("(1+2", 1), Err(ExprError::Syntax { offset: 4, .. })));
        assert!(matches!(parse_expr("sin 2", 1), Err(ExprError::Syntax { offset: 4, .. })));
        assert!(matches!(parse_expr("x1^x1", 1), Err(ExprError::Syntax { offset: 3, .. })));
        assert!(matches!(parse_expr("1 2", 1), Err(ExprError::Syntax { offset: 2, .. })));
        assert!(matches!(parse_expr("1 # 2", 1), Err(ExprError::Syntax { offset: 2, .. })));
    }

    #[test]
    fn domain_and_division() {
        assert!(matches!(ev("ln(0)", 0.0, &[]), Err(ExprError::Domain { .. })));
        assert!(matches!(ev("1/(t-1)", 1.0, &[]), Err(ExprError::DivisionByZero { .. })));
        assert!(matches!(ev("(-8)^0.5", 0.0, &[]), Err(ExprError::Domain { .. })));
        assert!(matches!(ev("exp(1000)", 0.0, &[]), Err(ExprError::Domain { .. })));
    }

    #[test]
    fn derivative_basics() {
        let d = parse_expr("x1^2", 1).unwrap().diff_t().unwrap();
        assert_eq!(d, Expr::Num(0.0));
        let d = parse_expr("sin(t)", 0).unwrap().diff_t().unwrap();
        for k in 0..100 {
            let t = -5.0 + 0.1 * k as f64;
            assert!((d.eval(t, &[]).unwrap() - t.cos()).abs() <= 1e-12);
        }
        assert!(matches!(
            parse_expr("abs(t)", 0).unwrap().diff_t(),
            Err(ExprError::NotDifferentiable { .. })
        ));
        assert_eq!(
            parse_expr("abs(x1)*t", 1).unwrap().diff_t().unwrap().eval(0.0, &[-2.0]).unwrap(),
            2.0
        );
    }

    #[test]
    fn fold_constants() {
        let e = parse_expr("2*3 + t", 0).unwrap().fold();
        assert_eq!(e, Expr::Add(Box::new(Expr::Num(6.0)), Box::new(Expr::Time)));
    }

    #[test]
    fn matrix_evaluation() {
        let id = MatrixFunction::parse(2, 2, &["1", "0", "0", "1"], &Scope::state(2), true).unwrap();
        assert_eq!(id.eval(3.0, &[1.0, 2.0]).unwrap(), Matrix::identity(2, 2));
        let b = MatrixFunction::parse(
            2,
            2,
            &["2+sin(t)", "0", "0", "2+sin(t)"],
            &Scope::state(2),
            true,
        )
        .unwrap();
        let m = b.eval(std::f64::consts::FRAC_PI_2, &[0.0, 0.0]).unwrap();
        assert_eq!(m, Matrix::from_diagonal_element(2, 2, 3.0));
        assert!(!b.depends_on_state());
    }

    #[test]
    fn matrix_symmetry_probe() {
        let err =
            MatrixFunction::parse(2, 2, &["1", "t", "0", "1"], &Scope::state(2), true).unwrap_err();
        assert!(matches!(err, MatrixError::Asymmetric { row: 1, col: 2, .. }));
        let err = MatrixFunction::parse(2, 2, &["1", "1", "1", "x3"], &Scope::state(2), false)
            .unwrap_err();
        assert!(matches!(err, MatrixError::Entry { row: 2, col: 2, .. }));
    }

    #[test]
    fn matrix_entry_error_location() {
        let m = MatrixFunction::parse(1, 2, &["1", "ln(t)"], &Scope::state(1), false).unwrap();
        match m.eval(-1.0, &[0.0]) {
            Err(MatrixError::Entry { row: 1, col: 2, source: ExprError::Domain { .. } }) => {}
            other => panic!("{other:?}"),
        }
    }
}

//! Restricted symbolic expression grammar for candidate equation right-hand sides.
//!
//! Expressions are closed terms over state variables `x0..x{d-1}`, exogenous
//! inputs `u0..`, the time symbol `t`, and numeric constants. The operator set
//! is deliberately small: `+ - * / ^` (constant integer or half-integer
//! exponents only) and the unary functions `sin cos exp log sqrt abs`. `tan`
//! and `cot` exist only in the extended truth grammar used by benchmark
//! system definitions; the candidate parser rejects them.

mod canon;
mod parser;
mod template;

pub use canon::{canonical_signature, canonicalize, TermSignature};
pub use parser::{parse_expression, parse_feature, parse_truth_expression, ParsedFeature};
pub use template::{
    evaluate_features, template_complexity, validate_template, EquationTemplate, EvalError,
    TemplateError, DEFAULT_COMPLEXITY_NORMALIZER, DEFAULT_MAX_TERMS,
};

use thiserror::Error;

/// Unary operators. `Tan` and `Cot` are part of the extended truth-only
/// grammar: ground-truth benchmark systems may use them, candidates may not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
    Tan,
    Cot,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Abs => "abs",
            UnaryOp::Tan => "tan",
            UnaryOp::Cot => "cot",
        }
    }

    pub fn truth_only(self) -> bool {
        matches!(self, UnaryOp::Tan | UnaryOp::Cot)
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            UnaryOp::Neg => -v,
            UnaryOp::Sin => v.sin(),
            UnaryOp::Cos => v.cos(),
            UnaryOp::Exp => v.exp(),
            UnaryOp::Log => v.ln(),
            UnaryOp::Sqrt => v.sqrt(),
            UnaryOp::Abs => v.abs(),
            UnaryOp::Tan => v.tan(),
            UnaryOp::Cot => v.cos() / v.sin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Pow => "^",
        }
    }
}

/// Expression tree over states, inputs, time and constants.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    State(usize),
    Input(usize),
    Time,
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

/// Absolute denominator magnitude below which a division counts as a domain
/// violation in checked evaluation.
pub const DIV_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DomainViolation {
    #[error("log of non-positive value {0}")]
    LogNonPositive(f64),
    #[error("sqrt of negative value {0}")]
    SqrtNegative(f64),
    #[error("division by near-zero denominator {0}")]
    DivNearZero(f64),
    #[error("non-finite result in {0}")]
    NonFinite(String),
    #[error("state index {index} out of range (dimension {dim})")]
    StateOutOfRange { index: usize, dim: usize },
    #[error("input index {index} out of range ({dim} input channels)")]
    InputOutOfRange { index: usize, dim: usize },
}

impl Expr {
    pub fn constant(v: f64) -> Expr {
        Expr::Const(v)
    }

    pub fn state(i: usize) -> Expr {
        Expr::State(i)
    }

    pub fn input(j: usize) -> Expr {
        Expr::Input(j)
    }

    pub fn unary(op: UnaryOp, a: Expr) -> Expr {
        Expr::Unary(op, Box::new(a))
    }

    pub fn binary(op: BinaryOp, a: Expr, b: Expr) -> Expr {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::binary(BinaryOp::Add, a, b)
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::binary(BinaryOp::Mul, a, b)
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        Expr::binary(BinaryOp::Div, a, b)
    }

    pub fn pow(a: Expr, exponent: f64) -> Expr {
        Expr::binary(BinaryOp::Pow, a, Expr::Const(exponent))
    }

    pub fn neg(a: Expr) -> Expr {
        Expr::unary(UnaryOp::Neg, a)
    }

    /// Number of nodes in the tree; a constant exponent counts as a node.
    pub fn node_count(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::State(_) | Expr::Input(_) | Expr::Time => 1,
            Expr::Unary(_, a) => 1 + a.node_count(),
            Expr::Binary(_, a, b) => 1 + a.node_count() + b.node_count(),
        }
    }

    /// Largest state index referenced, if any.
    pub fn max_state_index(&self) -> Option<usize> {
        self.fold_indices(&|e| match e {
            Expr::State(i) => Some(*i),
            _ => None,
        })
    }

    /// Largest input index referenced, if any.
    pub fn max_input_index(&self) -> Option<usize> {
        self.fold_indices(&|e| match e {
            Expr::Input(j) => Some(*j),
            _ => None,
        })
    }

    fn fold_indices(&self, pick: &impl Fn(&Expr) -> Option<usize>) -> Option<usize> {
        let own = pick(self);
        let child = match self {
            Expr::Unary(_, a) => a.fold_indices(pick),
            Expr::Binary(_, a, b) => match (a.fold_indices(pick), b.fold_indices(pick)) {
                (Some(x), Some(y)) => Some(x.max(y)),
                (x, y) => x.or(y),
            },
            _ => None,
        };
        match (own, child) {
            (Some(x), Some(y)) => Some(x.max(y)),
            (x, y) => x.or(y),
        }
    }

    pub fn contains_truth_only_ops(&self) -> bool {
        match self {
            Expr::Unary(op, a) => op.truth_only() || a.contains_truth_only_ops(),
            Expr::Binary(_, a, b) => a.contains_truth_only_ops() || b.contains_truth_only_ops(),
            _ => false,
        }
    }

    /// IEEE evaluation: domain violations yield NaN/inf rather than errors.
    /// Rollout integration uses this path and treats non-finite derivatives as
    /// divergence.
    pub fn eval_raw(&self, states: &[f64], inputs: &[f64], t: f64) -> f64 {
        match self {
            Expr::Const(v) => *v,
            Expr::State(i) => states.get(*i).copied().unwrap_or(f64::NAN),
            Expr::Input(j) => inputs.get(*j).copied().unwrap_or(f64::NAN),
            Expr::Time => t,
            Expr::Unary(op, a) => op.apply(a.eval_raw(states, inputs, t)),
            Expr::Binary(op, a, b) => {
                let x = a.eval_raw(states, inputs, t);
                let y = b.eval_raw(states, inputs, t);
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                    BinaryOp::Pow => x.powf(y),
                }
            }
        }
    }

    /// Checked evaluation for feature-matrix assembly: log of non-positive
    /// arguments, near-zero denominators and any non-finite intermediate are
    /// reported instead of propagating NaN into the regression.
    pub fn eval_checked(
        &self,
        states: &[f64],
        inputs: &[f64],
        t: f64,
    ) -> Result<f64, DomainViolation> {
        let v = match self {
            Expr::Const(v) => *v,
            Expr::State(i) => *states.get(*i).ok_or(DomainViolation::StateOutOfRange {
                index: *i,
                dim: states.len(),
            })?,
            Expr::Input(j) => *inputs.get(*j).ok_or(DomainViolation::InputOutOfRange {
                index: *j,
                dim: inputs.len(),
            })?,
            Expr::Time => t,
            Expr::Unary(op, a) => {
                let x = a.eval_checked(states, inputs, t)?;
                match op {
                    UnaryOp::Log if x <= 0.0 => return Err(DomainViolation::LogNonPositive(x)),
                    UnaryOp::Sqrt if x < 0.0 => return Err(DomainViolation::SqrtNegative(x)),
                    _ => {}
                }
                op.apply(x)
            }
            Expr::Binary(op, a, b) => {
                let x = a.eval_checked(states, inputs, t)?;
                let y = b.eval_checked(states, inputs, t)?;
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => {
                        if y.abs() < DIV_EPS {
                            return Err(DomainViolation::DivNearZero(y));
                        }
                        x / y
                    }
                    BinaryOp::Pow => x.powf(y),
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DomainViolation::NonFinite(self.to_string()))
        }
    }
}

impl std::fmt::Display for Expr {
    /// Surface syntax: infix, `^` for pow, call syntax for unary functions.
    /// `print(parse(s))` reparses to a tree with the same canonical signature.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write_expr(f, self, 0)
    }
}

fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Binary(BinaryOp::Add | BinaryOp::Sub, ..) => 1,
        Expr::Binary(BinaryOp::Mul | BinaryOp::Div, ..) => 2,
        Expr::Unary(UnaryOp::Neg, _) => 3,
        Expr::Binary(BinaryOp::Pow, ..) => 4,
        Expr::Const(v) if *v < 0.0 => 3,
        _ => 5,
    }
}

fn write_expr(f: &mut std::fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> std::fmt::Result {
    let prec = precedence(e);
    let parens = prec < min_prec;
    if parens {
        write!(f, "(")?;
    }
    match e {
        Expr::Const(v) => write!(f, "{v}")?,
        Expr::State(i) => write!(f, "x{i}")?,
        Expr::Input(j) => write!(f, "u{j}")?,
        Expr::Time => write!(f, "t")?,
        Expr::Unary(UnaryOp::Neg, a) => {
            write!(f, "-")?;
            write_expr(f, a, 4)?;
        }
        Expr::Unary(op, a) => {
            write!(f, "{}(", op.name())?;
            write_expr(f, a, 0)?;
            write!(f, ")")?;
        }
        Expr::Binary(op, a, b) => {
            let (lp, rp) = match op {
                BinaryOp::Add => (1, 1),
                // right operand of - and / binds one level tighter
                BinaryOp::Sub => (1, 2),
                BinaryOp::Mul => (2, 2),
                BinaryOp::Div => (2, 3),
                BinaryOp::Pow => (5, 0),
            };
            write_expr(f, a, lp)?;
            write!(f, "{}", op.symbol())?;
            if *op == BinaryOp::Pow {
                // exponents are constant literals; print bare (sign allowed)
                write_expr(f, b, 0)?;
            } else {
                write_expr(f, b, rp)?;
            }
        }
    }
    if parens {
        write!(f, ")")?;
    }
    Ok(())
}

/// Errors from parsing candidate expression text.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum GrammarError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("disallowed symbol `{0}`")]
    DisallowedSymbol(String),
    #[error("disallowed form: {0}")]
    DisallowedForm(String),
}

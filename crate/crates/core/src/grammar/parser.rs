//! Recursive-descent parser for the surface expression syntax.
//!
//! Candidate text may carry explicit coefficient placeholders (`c0`, `c1`, …,
//! or `theta0`, …) in the outer multiplicative position; those denote the
//! fitted coefficient of a feature and are stripped during template ingestion.
//! A placeholder anywhere else (inside a function, a denominator, an exponent)
//! breaks linearity in the unknowns and is rejected.

use super::{BinaryOp, Expr, GrammarError, UnaryOp};

/// Parse mode: candidates use the restricted grammar; ground-truth system
/// definitions additionally allow `tan` and `cot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Candidate,
    Truth,
}

/// Parse a candidate right-hand-side expression. Coefficient placeholders are
/// not allowed here; use [`parse_feature`] for template ingestion.
pub fn parse_expression(text: &str) -> Result<Expr, GrammarError> {
    let raw = parse_raw(text, Mode::Candidate)?;
    lower_strict(&raw)
}

/// Parse a ground-truth expression in the extended grammar (adds `tan`/`cot`).
pub fn parse_truth_expression(text: &str) -> Result<Expr, GrammarError> {
    let raw = parse_raw(text, Mode::Truth)?;
    lower_strict(&raw)
}

/// A feature parsed from candidate text with its outer multiplicative
/// constant and placeholder stripped; `scale` keeps the numeric part so
/// ground-truth terms can be decomposed with their signed coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedFeature {
    pub expr: Expr,
    pub scale: f64,
    pub had_placeholder: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureParseError {
    Grammar(GrammarError),
    /// A coefficient placeholder occurred inside a function, denominator or
    /// other nonlinear position.
    Linearity(String),
}

impl From<GrammarError> for FeatureParseError {
    fn from(e: GrammarError) -> Self {
        FeatureParseError::Grammar(e)
    }
}

/// Parse one feature of an equation template. Outer multiplicative constants
/// and coefficient placeholders are peeled off; the remaining closed
/// expression is the feature. A bare constant (or bare placeholder) yields the
/// constant feature `1`.
pub fn parse_feature(text: &str) -> Result<ParsedFeature, FeatureParseError> {
    let raw = parse_raw(text, Mode::Candidate)?;
    let mut scale = 1.0;
    let mut had_placeholder = false;
    let mut factors = Vec::new();
    peel_factors(&raw, &mut scale, &mut had_placeholder, &mut factors)?;
    let expr = rebuild_product(factors).unwrap_or(Expr::Const(1.0));
    Ok(ParsedFeature {
        expr,
        scale,
        had_placeholder,
    })
}

// ---------------------------------------------------------------------------
// Raw AST with placeholder nodes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum RawExpr {
    Const(f64),
    State(usize),
    Input(usize),
    Time,
    Coeff(String),
    Unary(UnaryOp, Box<RawExpr>),
    Binary(BinaryOp, Box<RawExpr>, Box<RawExpr>),
}

fn lower_strict(raw: &RawExpr) -> Result<Expr, GrammarError> {
    match raw {
        RawExpr::Const(v) => Ok(Expr::Const(*v)),
        RawExpr::State(i) => Ok(Expr::State(*i)),
        RawExpr::Input(j) => Ok(Expr::Input(*j)),
        RawExpr::Time => Ok(Expr::Time),
        RawExpr::Coeff(name) => Err(GrammarError::DisallowedForm(format!(
            "coefficient placeholder `{name}`; features must be closed expressions over x, u, t and constants"
        ))),
        RawExpr::Unary(op, a) => Ok(Expr::unary(*op, lower_strict(a)?)),
        RawExpr::Binary(op, a, b) => Ok(Expr::binary(*op, lower_strict(a)?, lower_strict(b)?)),
    }
}

fn lower_linear(raw: &RawExpr, position: &str) -> Result<Expr, FeatureParseError> {
    match raw {
        RawExpr::Coeff(name) => Err(FeatureParseError::Linearity(format!(
            "coefficient placeholder `{name}` inside {position}"
        ))),
        RawExpr::Const(v) => Ok(Expr::Const(*v)),
        RawExpr::State(i) => Ok(Expr::State(*i)),
        RawExpr::Input(j) => Ok(Expr::Input(*j)),
        RawExpr::Time => Ok(Expr::Time),
        RawExpr::Unary(op, a) => Ok(Expr::unary(
            *op,
            lower_linear(a, &format!("{}(..)", op.name()))?,
        )),
        RawExpr::Binary(op, a, b) => {
            let pos = match op {
                BinaryOp::Div => "a denominator expression",
                BinaryOp::Pow => "an exponent expression",
                _ => position,
            };
            let lhs = lower_linear(a, position)?;
            let rhs = lower_linear(b, pos)?;
            Ok(Expr::binary(*op, lhs, rhs))
        }
    }
}

/// Decompose the outer multiplicative structure of a raw feature: signs,
/// constants and placeholders fold into `scale`/`had_placeholder`, everything
/// else becomes an opaque factor that must be placeholder-free.
fn peel_factors(
    raw: &RawExpr,
    scale: &mut f64,
    had_placeholder: &mut bool,
    factors: &mut Vec<Expr>,
) -> Result<(), FeatureParseError> {
    match raw {
        RawExpr::Unary(UnaryOp::Neg, a) => {
            *scale = -*scale;
            peel_factors(a, scale, had_placeholder, factors)
        }
        RawExpr::Binary(BinaryOp::Mul, a, b) => {
            peel_factors(a, scale, had_placeholder, factors)?;
            peel_factors(b, scale, had_placeholder, factors)
        }
        RawExpr::Binary(BinaryOp::Div, num, den) => {
            let den = lower_linear(den, "a denominator expression")?;
            let mut inner_scale = 1.0;
            let mut inner = Vec::new();
            peel_factors(num, &mut inner_scale, had_placeholder, &mut inner)?;
            *scale *= inner_scale;
            let numerator = rebuild_product(inner).unwrap_or(Expr::Const(1.0));
            factors.push(Expr::div(numerator, den));
            Ok(())
        }
        RawExpr::Const(v) => {
            *scale *= v;
            Ok(())
        }
        RawExpr::Coeff(_) => {
            *had_placeholder = true;
            Ok(())
        }
        other => {
            factors.push(lower_linear(other, "a feature body")?);
            Ok(())
        }
    }
}

fn rebuild_product(factors: Vec<Expr>) -> Option<Expr> {
    let mut it = factors.into_iter();
    let first = it.next()?;
    Some(it.fold(first, Expr::mul))
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

fn tokenize(text: &str) -> Result<Vec<Token>, GrammarError> {
    let mut tokens = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                tokens.push(Token::Plus);
                i += 1;
            }
            '-' => {
                tokens.push(Token::Minus);
                i += 1;
            }
            '*' => {
                tokens.push(Token::Star);
                i += 1;
            }
            '/' => {
                tokens.push(Token::Slash);
                i += 1;
            }
            '^' => {
                tokens.push(Token::Caret);
                i += 1;
            }
            '(' => {
                tokens.push(Token::LParen);
                i += 1;
            }
            ')' => {
                tokens.push(Token::RParen);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                // scientific suffix only when followed by digits (with an
                // optional sign); a bare `e` belongs to an identifier
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let s = &text[start..i];
                let v: f64 = s
                    .parse()
                    .map_err(|_| GrammarError::Syntax(format!("bad number literal `{s}`")))?;
                tokens.push(Token::Num(v));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                tokens.push(Token::Ident(text[start..i].to_string()));
            }
            other => {
                return Err(GrammarError::Syntax(format!(
                    "unexpected character `{other}`"
                )))
            }
        }
    }
    Ok(tokens)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    mode: Mode,
}

fn parse_raw(text: &str, mode: Mode) -> Result<RawExpr, GrammarError> {
    let tokens = tokenize(text)?;
    if tokens.is_empty() {
        return Err(GrammarError::Syntax("empty expression".into()));
    }
    let mut p = Parser {
        tokens: &tokens,
        pos: 0,
        mode,
    };
    let expr = p.expr()?;
    if p.pos != p.tokens.len() {
        return Err(GrammarError::Syntax(format!(
            "unexpected trailing input at token {}",
            p.pos
        )));
    }
    Ok(expr)
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<&Token> {
        let t = self.tokens.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, tok: Token, what: &str) -> Result<(), GrammarError> {
        match self.bump() {
            Some(t) if *t == tok => Ok(()),
            Some(t) => Err(GrammarError::Syntax(format!(
                "expected {what}, found {t:?}"
            ))),
            None => Err(GrammarError::Syntax(format!(
                "expected {what}, found end of input"
            ))),
        }
    }

    fn expr(&mut self) -> Result<RawExpr, GrammarError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = RawExpr::Binary(BinaryOp::Add, Box::new(lhs), Box::new(rhs));
                }
                Some(Token::Minus) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = RawExpr::Binary(BinaryOp::Sub, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<RawExpr, GrammarError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Token::Star) => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = RawExpr::Binary(BinaryOp::Mul, Box::new(lhs), Box::new(rhs));
                }
                Some(Token::Slash) => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = RawExpr::Binary(BinaryOp::Div, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<RawExpr, GrammarError> {
        match self.peek() {
            Some(Token::Minus) => {
                self.pos += 1;
                let inner = self.unary()?;
                Ok(RawExpr::Unary(UnaryOp::Neg, Box::new(inner)))
            }
            Some(Token::Plus) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<RawExpr, GrammarError> {
        let base = self.atom()?;
        if matches!(self.peek(), Some(Token::Caret)) {
            self.pos += 1;
            let exponent = self.exponent()?;
            return Ok(RawExpr::Binary(
                BinaryOp::Pow,
                Box::new(base),
                Box::new(RawExpr::Const(exponent)),
            ));
        }
        Ok(base)
    }

    /// Exponents must be integer or half-integer constant literals.
    fn exponent(&mut self) -> Result<f64, GrammarError> {
        let mut sign = 1.0;
        let mut parens = false;
        if matches!(self.peek(), Some(Token::LParen)) {
            self.pos += 1;
            parens = true;
        }
        loop {
            match self.peek() {
                Some(Token::Minus) => {
                    sign = -sign;
                    self.pos += 1;
                }
                Some(Token::Plus) => {
                    self.pos += 1;
                }
                _ => break,
            }
        }
        let v = match self.bump() {
            Some(Token::Num(v)) => sign * *v,
            Some(Token::Ident(name)) => {
                return Err(GrammarError::DisallowedForm(format!(
                    "variable exponent `{name}`; exponents must be constant literals"
                )))
            }
            other => {
                return Err(GrammarError::Syntax(format!(
                    "expected a numeric exponent, found {other:?}"
                )))
            }
        };
        if parens {
            self.expect(Token::RParen, "`)` after exponent")?;
        }
        let doubled = v * 2.0;
        if doubled != doubled.round() {
            return Err(GrammarError::DisallowedForm(format!(
                "exponent {v} is not an integer or half-integer"
            )));
        }
        Ok(v)
    }

    fn atom(&mut self) -> Result<RawExpr, GrammarError> {
        match self.bump().cloned() {
            Some(Token::Num(v)) => Ok(RawExpr::Const(v)),
            Some(Token::LParen) => {
                let e = self.expr()?;
                self.expect(Token::RParen, "`)`")?;
                Ok(e)
            }
            Some(Token::Ident(name)) => self.ident(&name),
            other => Err(GrammarError::Syntax(format!(
                "expected an expression, found {other:?}"
            ))),
        }
    }

    fn ident(&mut self, name: &str) -> Result<RawExpr, GrammarError> {
        if let Some(op) = function_op(name, self.mode) {
            self.expect(Token::LParen, &format!("`(` after `{name}`"))?;
            let arg = self.expr()?;
            self.expect(Token::RParen, &format!("`)` closing `{name}(`"))?;
            return Ok(RawExpr::Unary(op, Box::new(arg)));
        }
        if name == "t" {
            return Ok(RawExpr::Time);
        }
        if let Some(i) = indexed(name, 'x') {
            return Ok(RawExpr::State(i));
        }
        if let Some(j) = indexed(name, 'u') {
            return Ok(RawExpr::Input(j));
        }
        if is_placeholder(name) {
            return match self.mode {
                Mode::Candidate => Ok(RawExpr::Coeff(name.to_string())),
                Mode::Truth => Err(GrammarError::DisallowedSymbol(name.to_string())),
            };
        }
        Err(GrammarError::DisallowedSymbol(name.to_string()))
    }
}

fn function_op(name: &str, mode: Mode) -> Option<UnaryOp> {
    let op = match name {
        "sin" => UnaryOp::Sin,
        "cos" => UnaryOp::Cos,
        "exp" => UnaryOp::Exp,
        "log" => UnaryOp::Log,
        "sqrt" => UnaryOp::Sqrt,
        "abs" => UnaryOp::Abs,
        "tan" if mode == Mode::Truth => UnaryOp::Tan,
        "cot" if mode == Mode::Truth => UnaryOp::Cot,
        _ => return None,
    };
    Some(op)
}

fn indexed(name: &str, prefix: char) -> Option<usize> {
    let rest = name.strip_prefix(prefix)?;
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    rest.parse().ok()
}

/// `c<k>` and `theta<k>` identifiers denote unknown coefficients.
fn is_placeholder(name: &str) -> bool {
    for prefix in ["c", "theta"] {
        if let Some(rest) = name.strip_prefix(prefix) {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                return true;
            }
        }
    }
    name == "theta"
}

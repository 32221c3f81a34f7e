//! Canonical form and term signatures.
//!
//! Canonicalization folds constants, rewrites `-a` as `-1*a` and `a-b` as
//! `a + -1*b`, flattens commutative chains and sorts their operands, so that
//! trees equal up to commutative reordering and constant folding render to
//! byte-identical signature strings. No distributive expansion is performed.

use super::{BinaryOp, Expr, UnaryOp};

/// Canonical string identity of an expression; equal signatures imply equal
/// numeric value wherever both evaluate finitely.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TermSignature(String);

impl TermSignature {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for TermSignature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn canonical_signature(expr: &Expr) -> TermSignature {
    TermSignature(render(&canonicalize(expr)))
}

/// Normalized tree: canonical operand order, folded constants, subtraction
/// and negation rewritten into add/mul form.
pub fn canonicalize(expr: &Expr) -> Expr {
    match expr {
        Expr::Const(v) => Expr::Const(norm_zero(*v)),
        Expr::State(_) | Expr::Input(_) | Expr::Time => expr.clone(),
        Expr::Unary(UnaryOp::Neg, a) => canon_mul(vec![Expr::Const(-1.0), canonicalize(a)]),
        Expr::Unary(op, a) => {
            let a = canonicalize(a);
            match a {
                Expr::Const(v) => Expr::Const(norm_zero(apply_fold(*op, v))),
                a => Expr::unary(*op, a),
            }
        }
        Expr::Binary(BinaryOp::Add, a, b) => canon_add(vec![canonicalize(a), canonicalize(b)]),
        Expr::Binary(BinaryOp::Sub, a, b) => {
            let neg_b = canon_mul(vec![Expr::Const(-1.0), canonicalize(b)]);
            canon_add(vec![canonicalize(a), neg_b])
        }
        Expr::Binary(BinaryOp::Mul, a, b) => canon_mul(vec![canonicalize(a), canonicalize(b)]),
        Expr::Binary(BinaryOp::Div, a, b) => {
            let a = canonicalize(a);
            let b = canonicalize(b);
            match (&a, &b) {
                (Expr::Const(x), Expr::Const(y)) if *y != 0.0 => Expr::Const(norm_zero(x / y)),
                _ => Expr::div(a, b),
            }
        }
        Expr::Binary(BinaryOp::Pow, a, b) => {
            let a = canonicalize(a);
            let b = canonicalize(b);
            match (&a, &b) {
                (Expr::Const(x), Expr::Const(y)) => Expr::Const(norm_zero(x.powf(*y))),
                (_, Expr::Const(y)) if *y == 1.0 => a,
                (_, Expr::Const(y)) if *y == 0.0 => Expr::Const(1.0),
                _ => Expr::binary(BinaryOp::Pow, a, b),
            }
        }
    }
}

fn apply_fold(op: UnaryOp, v: f64) -> f64 {
    match op {
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

fn norm_zero(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

fn canon_add(terms: Vec<Expr>) -> Expr {
    let mut constant = 0.0;
    let mut rest = Vec::new();
    let mut stack = terms;
    while let Some(term) = stack.pop() {
        match term {
            Expr::Binary(BinaryOp::Add, a, b) => {
                stack.push(*a);
                stack.push(*b);
            }
            Expr::Const(v) => constant += v,
            other => rest.push(other),
        }
    }
    if rest.is_empty() {
        return Expr::Const(norm_zero(constant));
    }
    rest.sort_by(|a, b| render(a).cmp(&render(b)));
    let mut out = if constant != 0.0 {
        vec![Expr::Const(constant)]
    } else {
        Vec::new()
    };
    out.extend(rest);
    rebuild(BinaryOp::Add, out)
}

fn canon_mul(factors: Vec<Expr>) -> Expr {
    let mut constant = 1.0;
    let mut rest = Vec::new();
    let mut stack = factors;
    while let Some(factor) = stack.pop() {
        match factor {
            Expr::Binary(BinaryOp::Mul, a, b) => {
                stack.push(*a);
                stack.push(*b);
            }
            Expr::Const(v) => constant *= v,
            other => rest.push(other),
        }
    }
    if constant == 0.0 || rest.is_empty() {
        return Expr::Const(norm_zero(constant));
    }
    rest.sort_by(|a, b| render(a).cmp(&render(b)));
    let mut out = if constant != 1.0 {
        vec![Expr::Const(constant)]
    } else {
        Vec::new()
    };
    out.extend(rest);
    rebuild(BinaryOp::Mul, out)
}

fn rebuild(op: BinaryOp, operands: Vec<Expr>) -> Expr {
    let mut it = operands.into_iter();
    let first = it.next().expect("rebuild of empty operand list");
    it.fold(first, |acc, e| Expr::binary(op, acc, e))
}

fn render(expr: &Expr) -> String {
    match expr {
        Expr::Const(v) => fmt_sig_const(*v),
        Expr::State(i) => format!("x{i}"),
        Expr::Input(j) => format!("u{j}"),
        Expr::Time => "t".to_string(),
        Expr::Unary(op, a) => format!("{}({})", op.name(), render(a)),
        Expr::Binary(op, a, b) => format!("({}{}{})", render(a), op.symbol(), render(b)),
    }
}

/// Constants render with 6 significant digits.
fn fmt_sig_const(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    format!("{v:.5e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse_expression;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn sig(text: &str) -> TermSignature {
        canonical_signature(&parse_expression(text).unwrap())
    }

    #[test]
    fn commutative_operands_share_signature() {
        assert_eq!(sig("x1*x0"), sig("x0*x1"));
        assert_eq!(sig("x0+x1+t"), sig("t+x1+x0"));
        assert_ne!(sig("x0-x1"), sig("x1-x0"));
    }

    #[test]
    fn additive_identity_folds_away() {
        assert_eq!(sig("x0 + 0.0"), sig("x0"));
        assert_eq!(sig("1*x0"), sig("x0"));
        assert_eq!(sig("x0^1"), sig("x0"));
    }

    #[test]
    fn nested_constants_fold() {
        assert_eq!(sig("2.0*(3.0*x0)"), sig("6.0*x0"));
        assert_eq!(sig("2*3"), sig("6"));
        assert_eq!(sig("x0 - x1"), sig("x0 + -1*x1"));
    }

    #[test]
    fn constant_folding_preserves_value_on_random_points() {
        // oracle: numeric evaluation agreement between original and
        // canonicalized trees on 100 random points
        let exprs = [
            "2.0*(3.0*x0)",
            "x0 - (x1 - 2*x1)",
            "-(-x0)",
            "0.5*x0*4*x1",
            "sin(x0)*1 + 0*x1",
            "x0^2*x1 - 2.5/5*x0",
            "exp(-0.5*x0)*2",
        ];
        let mut rng = StdRng::seed_from_u64(7);
        for text in exprs {
            let e = parse_expression(text).unwrap();
            let c = canonicalize(&e);
            for _ in 0..100 {
                let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                let a = e.eval_raw(&x, &[], 0.3);
                let b = c.eval_raw(&x, &[], 0.3);
                if a.is_finite() && b.is_finite() {
                    assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{text}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn equal_signatures_evaluate_equal() {
        // commutative shuffles and constant refactorings of the same term
        let pairs = [
            ("x0*x1*x0", "x0^1*x1*x0"),
            ("2*x0 + 3*x1", "3*x1 + 2*x0"),
            ("6*x0", "2*(3*x0)"),
            ("x0 - x1", "-1*x1 + x0"),
        ];
        let mut rng = StdRng::seed_from_u64(11);
        for (s1, s2) in pairs {
            let a = parse_expression(s1).unwrap();
            let b = parse_expression(s2).unwrap();
            assert_eq!(canonical_signature(&a), canonical_signature(&b));
            for _ in 0..100 {
                let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                let va = a.eval_raw(&x, &[], 1.0);
                let vb = b.eval_raw(&x, &[], 1.0);
                assert!((va - vb).abs() <= 1e-12 * (1.0 + va.abs()));
            }
        }
    }

    #[test]
    fn constants_render_six_significant_digits() {
        assert_eq!(sig("0.3678794411714423"), sig("0.36787944"));
        assert_ne!(sig("0.367879"), sig("0.367878"));
    }
}

//! Expression trees, their evaluation semantics, and the token codec.
//!
//! An [`Expression`] is a closed-form formula over up to ten predictor
//! variables. Evaluation is total: failures (division by zero, logs of
//! non-positive values, overflow) never panic, they mark the result invalid
//! with a [`FailureReason`]. The token codec maps trees to and from prefix
//! token sequences; see [`vocab`] for the id layout.

pub mod token;
pub mod vocab;

pub use token::{parse, tokenize, ParseError, ParseErrorKind, SequenceError, TokenSequence};
pub use vocab::{
    decode_constant, encode_constant, BinaryOp, TokenKind, UnaryOp, Vocabulary, EOS, MAX_DIM,
    PAD, SOS, T_MAX, VOCAB_SIZE,
};

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};
use std::fmt;

/// A formula tree in prefix form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expression {
    /// Predictor `x{index}`, `index < 10`.
    Variable(usize),
    /// A finite numeric constant.
    Constant(f64),
    Unary(UnaryOp, Box<Expression>),
    Binary(BinaryOp, Box<Expression>, Box<Expression>),
}

impl Expression {
    /// Tree depth; a lone leaf has depth 1.
    pub fn depth(&self) -> usize {
        match self {
            Expression::Variable(_) | Expression::Constant(_) => 1,
            Expression::Unary(_, a) => 1 + a.depth(),
            Expression::Binary(_, a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Expression::Variable(_) | Expression::Constant(_) => 1,
            Expression::Unary(_, a) => 1 + a.node_count(),
            Expression::Binary(_, a, b) => 1 + a.node_count() + b.node_count(),
        }
    }

    /// Encoded length including `<sos>` and `<eos>`. Constants take three
    /// tokens (sign, mantissa, exponent), every other node takes one.
    pub fn token_len(&self) -> usize {
        fn body(e: &Expression) -> usize {
            match e {
                Expression::Variable(_) => 1,
                Expression::Constant(_) => 3,
                Expression::Unary(_, a) => 1 + body(a),
                Expression::Binary(_, a, b) => 1 + body(a) + body(b),
            }
        }
        body(self) + 2
    }

    /// Largest variable index used, if any variable appears.
    pub fn max_var_index(&self) -> Option<usize> {
        match self {
            Expression::Variable(i) => Some(*i),
            Expression::Constant(_) => None,
            Expression::Unary(_, a) => a.max_var_index(),
            Expression::Binary(_, a, b) => a.max_var_index().max(b.max_var_index()),
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expression::Variable(i) => write!(f, "x{i}"),
            Expression::Constant(c) => write!(f, "{c}"),
            Expression::Unary(UnaryOp::Neg, a) => write!(f, "-({a})"),
            Expression::Unary(UnaryOp::Inv, a) => write!(f, "1/({a})"),
            Expression::Unary(op, a) => write!(f, "{}({a})", op.name()),
            Expression::Binary(op, a, b) => {
                let sym = match op {
                    BinaryOp::Add => "+",
                    BinaryOp::Sub => "-",
                    BinaryOp::Mul => "*",
                    BinaryOp::Div => "/",
                    BinaryOp::Pow => "^",
                };
                write!(f, "({a} {sym} {b})")
            }
        }
    }
}

/// Why an evaluation or decoding attempt produced no usable target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    /// An operator was applied outside its domain (division or reciprocal of
    /// zero, log of a non-positive value, square root of a negative value,
    /// a negative base raised to a non-integer power, or a variable index
    /// beyond the data dimension).
    DomainError,
    /// The result overflowed or produced a NaN.
    NonFinite,
    /// The token sequence did not decode to a tree.
    ParseError,
    /// The sequence exceeded the maximum length without completing.
    LengthOverflow,
}

/// Outcome of evaluating an expression on an input matrix.
#[derive(Debug, Clone)]
pub struct EvalResult {
    /// One value per input row. Only meaningful when `valid` is true.
    pub values: Array1<f64>,
    pub valid: bool,
    pub failure_reason: Option<FailureReason>,
}

impl EvalResult {
    pub fn failed(n: usize, reason: FailureReason) -> Self {
        EvalResult {
            values: Array1::zeros(n),
            valid: false,
            failure_reason: Some(reason),
        }
    }
}

/// Evaluates `expr` on every row of `x` (shape `[n, d]`).
///
/// Returns one value per row. Domain violations at any row mark the whole
/// result invalid, as do non-finite outputs; the first reason encountered in
/// post-order is kept.
pub fn evaluate(expr: &Expression, x: ArrayView2<f64>) -> EvalResult {
    let mut reason = None;
    let values = eval_node(expr, &x, &mut reason);
    if reason.is_none() && values.iter().any(|v| !v.is_finite()) {
        reason = Some(FailureReason::NonFinite);
    }
    EvalResult {
        values,
        valid: reason.is_none(),
        failure_reason: reason,
    }
}

fn record(slot: &mut Option<FailureReason>, reason: FailureReason) {
    if slot.is_none() {
        *slot = Some(reason);
    }
}

fn eval_node(
    expr: &Expression,
    x: &ArrayView2<f64>,
    reason: &mut Option<FailureReason>,
) -> Array1<f64> {
    let n = x.nrows();
    match expr {
        Expression::Variable(i) => {
            if *i < x.ncols() {
                x.column(*i).to_owned()
            } else {
                record(reason, FailureReason::DomainError);
                Array1::zeros(n)
            }
        }
        Expression::Constant(c) => Array1::from_elem(n, *c),
        Expression::Unary(op, a) => {
            let a = eval_node(a, x, reason);
            match op {
                UnaryOp::Sin => a.mapv(f64::sin),
                UnaryOp::Cos => a.mapv(f64::cos),
                UnaryOp::Exp => a.mapv(f64::exp),
                UnaryOp::Log => {
                    if a.iter().any(|&v| v <= 0.0) {
                        record(reason, FailureReason::DomainError);
                    }
                    a.mapv(f64::ln)
                }
                UnaryOp::Sqrt => {
                    if a.iter().any(|&v| v < 0.0) {
                        record(reason, FailureReason::DomainError);
                    }
                    a.mapv(f64::sqrt)
                }
                UnaryOp::Abs => a.mapv(f64::abs),
                UnaryOp::Neg => a.mapv(|v| -v),
                UnaryOp::Inv => {
                    if a.iter().any(|&v| v == 0.0) {
                        record(reason, FailureReason::DomainError);
                    }
                    a.mapv(|v| 1.0 / v)
                }
            }
        }
        Expression::Binary(op, a, b) => {
            let a = eval_node(a, x, reason);
            let b = eval_node(b, x, reason);
            match op {
                BinaryOp::Add => a + b,
                BinaryOp::Sub => a - b,
                BinaryOp::Mul => a * b,
                BinaryOp::Div => {
                    if b.iter().any(|&v| v == 0.0) {
                        record(reason, FailureReason::DomainError);
                    }
                    a / b
                }
                BinaryOp::Pow => {
                    if a.iter().zip(b.iter()).any(|(&l, &r)| l < 0.0 && r.fract() != 0.0) {
                        record(reason, FailureReason::DomainError);
                    }
                    ndarray::Zip::from(&a).and(&b).map_collect(|&l, &r| l.powf(r))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn var(i: usize) -> Expression {
        Expression::Variable(i)
    }

    fn num(c: f64) -> Expression {
        Expression::Constant(c)
    }

    fn un(op: UnaryOp, a: Expression) -> Expression {
        Expression::Unary(op, Box::new(a))
    }

    fn bin(op: BinaryOp, a: Expression, b: Expression) -> Expression {
        Expression::Binary(op, Box::new(a), Box::new(b))
    }

    #[test]
    fn shape_helpers() {
        // sin(x0) + 2
        let e = bin(BinaryOp::Add, un(UnaryOp::Sin, var(0)), num(2.0));
        assert_eq!(e.depth(), 3);
        assert_eq!(e.node_count(), 4);
        assert_eq!(e.token_len(), 2 + 1 + 1 + 1 + 3);
        assert_eq!(e.max_var_index(), Some(0));
        assert_eq!(e.to_string(), "(sin(x0) + 2)");
    }

    #[test]
    fn evaluate_basic() {
        // x0 * x1 + 1 on two rows.
        let e = bin(BinaryOp::Add, bin(BinaryOp::Mul, var(0), var(1)), num(1.0));
        let x = array![[2.0, 3.0], [0.5, -4.0]];
        let r = evaluate(&e, x.view());
        assert!(r.valid);
        assert_eq!(r.values, array![7.0, -1.0]);
    }

    #[test]
    fn evaluate_domain_errors() {
        let x = array![[0.0], [1.0]];
        for e in [
            bin(BinaryOp::Div, num(1.0), var(0)),
            un(UnaryOp::Inv, var(0)),
            un(UnaryOp::Log, var(0)),
            un(UnaryOp::Sqrt, bin(BinaryOp::Sub, var(0), num(2.0))),
            bin(BinaryOp::Pow, bin(BinaryOp::Sub, var(0), num(2.0)), num(0.5)),
            var(3),
        ] {
            let r = evaluate(&e, x.view());
            assert!(!r.valid, "{e} should be invalid");
            assert_eq!(r.failure_reason, Some(FailureReason::DomainError), "{e}");
        }
    }

    #[test]
    fn evaluate_overflow_is_non_finite() {
        let e = un(UnaryOp::Exp, bin(BinaryOp::Mul, var(0), num(1000.0)));
        let x = array![[1.0], [2.0]];
        let r = evaluate(&e, x.view());
        assert!(!r.valid);
        assert_eq!(r.failure_reason, Some(FailureReason::NonFinite));
    }

    #[test]
    fn evaluate_negative_base_integer_power_is_fine() {
        let e = bin(BinaryOp::Pow, var(0), num(3.0));
        let x = array![[-2.0]];
        let r = evaluate(&e, x.view());
        assert!(r.valid);
        assert_eq!(r.values, array![-8.0]);
    }

    #[test]
    fn evaluate_never_panics_on_weird_inputs() {
        let e = bin(
            BinaryOp::Pow,
            num(0.0),
            un(UnaryOp::Neg, un(UnaryOp::Abs, var(0))),
        );
        let x = array![[5.0]];
        let r = evaluate(&e, x.view()); // 0^-5 = inf
        assert!(!r.valid);
        assert_eq!(r.failure_reason, Some(FailureReason::NonFinite));
    }
}

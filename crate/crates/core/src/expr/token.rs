//! Prefix token sequences and the tree <-> token codec.

use super::vocab::{
    decode_constant, encode_constant, TokenKind, Vocabulary, EOS, MAX_DIM, SOS, T_MAX,
};
use super::Expression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A bounded token sequence that always begins with `<sos>`.
///
/// Sequences are stored unpadded. A sequence is complete when its last token
/// is `<eos>`; prefixes produced during generation are incomplete.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<u32>);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SequenceError {
    #[error("sequence must begin with <sos>")]
    MissingStart,
    #[error("sequence length {len} exceeds the maximum {max}")]
    TooLong { len: usize, max: usize },
}

impl TokenSequence {
    /// The one-token prefix `[<sos>]`.
    pub fn start() -> Self {
        TokenSequence(vec![SOS])
    }

    pub fn from_ids(ids: Vec<u32>) -> Result<Self, SequenceError> {
        if ids.first() != Some(&SOS) {
            return Err(SequenceError::MissingStart);
        }
        if ids.len() > T_MAX {
            return Err(SequenceError::TooLong {
                len: ids.len(),
                max: T_MAX,
            });
        }
        Ok(TokenSequence(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_complete(&self) -> bool {
        self.0.last() == Some(&EOS)
    }

    /// Appends one token, enforcing the length bound.
    pub fn push(&mut self, id: u32) -> Result<(), SequenceError> {
        if self.0.len() >= T_MAX {
            return Err(SequenceError::TooLong {
                len: self.0.len() + 1,
                max: T_MAX,
            });
        }
        self.0.push(id);
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TokenizeError {
    #[error("expression encodes to {len} tokens, over the maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("variable index {index} is out of range (max {})", MAX_DIM - 1)]
    VariableOutOfRange { index: usize },
    #[error("constant {value} is not finite")]
    NonFiniteConstant { value: f64 },
}

/// Encodes a tree as `<sos> body <eos>` in prefix order.
///
/// Constants are quantized to the vocabulary's (sign, mantissa, exponent)
/// grid; constants already on the grid re-encode exactly.
pub fn tokenize(expr: &Expression, vocab: &Vocabulary) -> Result<TokenSequence, TokenizeError> {
    let len = expr.token_len();
    if len > T_MAX {
        return Err(TokenizeError::TooLong { len, max: T_MAX });
    }
    let mut ids = Vec::with_capacity(len);
    ids.push(SOS);
    emit(expr, vocab, &mut ids)?;
    ids.push(EOS);
    debug_assert_eq!(ids.len(), len);
    Ok(TokenSequence(ids))
}

fn emit(expr: &Expression, vocab: &Vocabulary, out: &mut Vec<u32>) -> Result<(), TokenizeError> {
    match expr {
        Expression::Variable(i) => {
            if *i >= MAX_DIM {
                return Err(TokenizeError::VariableOutOfRange { index: *i });
            }
            out.push(vocab.variable_id(*i));
        }
        Expression::Constant(c) => {
            if !c.is_finite() {
                return Err(TokenizeError::NonFiniteConstant { value: *c });
            }
            let (negative, mantissa, exponent) = encode_constant(*c);
            out.push(vocab.sign_id(negative));
            out.push(vocab.mantissa_id(mantissa));
            out.push(vocab.exponent_id(exponent));
        }
        Expression::Unary(op, a) => {
            out.push(vocab.unary_id(*op));
            emit(a, vocab, out)?;
        }
        Expression::Binary(op, a, b) => {
            out.push(vocab.binary_id(*op));
            emit(a, vocab, out)?;
            emit(b, vocab, out)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseErrorKind {
    /// First token is not `<sos>`.
    MissingStart,
    /// A token that cannot start an expression appeared where one was needed.
    UnexpectedToken,
    /// A sign token was not followed by mantissa and exponent tokens.
    IncompleteConstant,
    /// The sequence ended while an expression was still open.
    UnexpectedEnd,
    /// The root expression was not followed by `<eos>`.
    MissingEnd,
    /// Tokens remain after the closing `<eos>`.
    TrailingTokens,
}

/// A malformed token sequence, with the offending position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("invalid sequence at position {position}: {kind:?}")]
pub struct ParseError {
    pub position: usize,
    pub kind: ParseErrorKind,
}

fn err<T>(position: usize, kind: ParseErrorKind) -> Result<T, ParseError> {
    Err(ParseError { position, kind })
}

/// Decodes a complete `<sos> body <eos>` sequence back into a tree.
pub fn parse(tokens: &TokenSequence, vocab: &Vocabulary) -> Result<Expression, ParseError> {
    parse_ids(tokens.ids(), vocab)
}

/// [`parse`] over a raw id slice, for sequences that may violate even the
/// [`TokenSequence`] invariants.
pub fn parse_ids(ids: &[u32], vocab: &Vocabulary) -> Result<Expression, ParseError> {
    if ids.first() != Some(&SOS) {
        return err(0, ParseErrorKind::MissingStart);
    }
    let mut pos = 1;
    let expr = parse_expr(ids, &mut pos, vocab)?;
    match ids.get(pos) {
        None => err(pos, ParseErrorKind::MissingEnd),
        Some(&EOS) if pos + 1 == ids.len() => Ok(expr),
        Some(&EOS) => err(pos + 1, ParseErrorKind::TrailingTokens),
        Some(_) => err(pos, ParseErrorKind::MissingEnd),
    }
}

fn parse_expr(ids: &[u32], pos: &mut usize, vocab: &Vocabulary) -> Result<Expression, ParseError> {
    let here = *pos;
    let Some(&id) = ids.get(here) else {
        return err(here, ParseErrorKind::UnexpectedEnd);
    };
    *pos += 1;
    match vocab.kind(id) {
        TokenKind::Unary(op) => {
            let a = parse_expr(ids, pos, vocab)?;
            Ok(Expression::Unary(op, Box::new(a)))
        }
        TokenKind::Binary(op) => {
            let a = parse_expr(ids, pos, vocab)?;
            let b = parse_expr(ids, pos, vocab)?;
            Ok(Expression::Binary(op, Box::new(a), Box::new(b)))
        }
        TokenKind::Variable(i) => Ok(Expression::Variable(i)),
        TokenKind::Sign(sign) => {
            let Some(&m_id) = ids.get(*pos) else {
                return err(*pos, ParseErrorKind::IncompleteConstant);
            };
            let TokenKind::Mantissa(m) = vocab.kind(m_id) else {
                return err(*pos, ParseErrorKind::IncompleteConstant);
            };
            *pos += 1;
            let Some(&e_id) = ids.get(*pos) else {
                return err(*pos, ParseErrorKind::IncompleteConstant);
            };
            let TokenKind::Exponent(e) = vocab.kind(e_id) else {
                return err(*pos, ParseErrorKind::IncompleteConstant);
            };
            *pos += 1;
            Ok(Expression::Constant(decode_constant(sign < 0.0, m, e)))
        }
        _ => err(here, ParseErrorKind::UnexpectedToken),
    }
}

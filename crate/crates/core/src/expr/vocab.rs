//! The equation token vocabulary.
//!
//! Tokens, in id order: `<pad>`=0, `<sos>`=1, `<eos>`=2, eight unary
//! operators, five binary operators, variables `x0..x9`, the two sign tokens,
//! mantissa tokens `0..9999` (constants quantized to four significant
//! digits), and exponent tokens `E-10..E10`. The layout is fixed at build
//! time; checkpoints and corpora record its hash so they stay self-describing.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Maximum token-sequence length, start and end tokens included.
pub const T_MAX: usize = 200;

/// Maximum number of predictor variables.
pub const MAX_DIM: usize = 10;

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;

const UNARY_BASE: u32 = 3;
const BINARY_BASE: u32 = UNARY_BASE + 8;
const VAR_BASE: u32 = BINARY_BASE + 5;
const SIGN_BASE: u32 = VAR_BASE + MAX_DIM as u32;
const MANTISSA_BASE: u32 = SIGN_BASE + 2;
pub const MANTISSA_COUNT: u32 = 10_000;
const EXP_BASE: u32 = MANTISSA_BASE + MANTISSA_COUNT;
pub const EXP_MIN: i32 = -10;
pub const EXP_MAX: i32 = 10;
const EXP_COUNT: u32 = (EXP_MAX - EXP_MIN + 1) as u32;
pub const VOCAB_SIZE: usize = (EXP_BASE + EXP_COUNT) as usize;

/// Powers of ten for constant decoding, index `e - EXP_MIN`.
pub(crate) const POW10: [f64; 21] = [
    1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1, 1e2, 1e3, 1e4, 1e5,
    1e6, 1e7, 1e8, 1e9, 1e10,
];

pub(crate) fn pow10(e: i32) -> f64 {
    POW10[(e - EXP_MIN) as usize]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnaryOp {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
    Neg,
    Inv,
}

pub const UNARY_OPS: [UnaryOp; 8] = [
    UnaryOp::Sin,
    UnaryOp::Cos,
    UnaryOp::Exp,
    UnaryOp::Log,
    UnaryOp::Sqrt,
    UnaryOp::Abs,
    UnaryOp::Neg,
    UnaryOp::Inv,
];

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Abs => "abs",
            UnaryOp::Neg => "neg",
            UnaryOp::Inv => "inv",
        }
    }

    fn index(self) -> u32 {
        UNARY_OPS.iter().position(|&o| o == self).unwrap() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

pub const BINARY_OPS: [BinaryOp; 5] = [
    BinaryOp::Add,
    BinaryOp::Sub,
    BinaryOp::Mul,
    BinaryOp::Div,
    BinaryOp::Pow,
];

impl BinaryOp {
    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
            BinaryOp::Pow => "pow",
        }
    }

    fn index(self) -> u32 {
        BINARY_OPS.iter().position(|&o| o == self).unwrap() as u32
    }
}

/// What a token id stands for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TokenKind {
    Pad,
    Sos,
    Eos,
    Unary(UnaryOp),
    Binary(BinaryOp),
    Variable(usize),
    Sign(f64),
    Mantissa(u32),
    Exponent(i32),
    Unknown,
}

/// The fixed token table plus its content hash.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    hash: String,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Self {
        let mut hasher = Sha256::new();
        for id in 0..VOCAB_SIZE as u32 {
            hasher.update(id.to_le_bytes());
            hasher.update(Self::token_string(id).as_bytes());
        }
        let hash = hex_string(&hasher.finalize());
        Vocabulary { hash }
    }

    pub fn size(&self) -> usize {
        VOCAB_SIZE
    }

    /// Content hash recorded in checkpoints and corpus manifests.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn unary_id(&self, op: UnaryOp) -> u32 {
        UNARY_BASE + op.index()
    }

    pub fn binary_id(&self, op: BinaryOp) -> u32 {
        BINARY_BASE + op.index()
    }

    pub fn variable_id(&self, index: usize) -> u32 {
        debug_assert!(index < MAX_DIM);
        VAR_BASE + index as u32
    }

    pub fn sign_id(&self, negative: bool) -> u32 {
        SIGN_BASE + negative as u32
    }

    pub fn mantissa_id(&self, mantissa: u32) -> u32 {
        debug_assert!(mantissa < MANTISSA_COUNT);
        MANTISSA_BASE + mantissa
    }

    pub fn exponent_id(&self, exponent: i32) -> u32 {
        debug_assert!((EXP_MIN..=EXP_MAX).contains(&exponent));
        EXP_BASE + (exponent - EXP_MIN) as u32
    }

    pub fn kind(&self, id: u32) -> TokenKind {
        match id {
            PAD => TokenKind::Pad,
            SOS => TokenKind::Sos,
            EOS => TokenKind::Eos,
            t if t < BINARY_BASE => TokenKind::Unary(UNARY_OPS[(t - UNARY_BASE) as usize]),
            t if t < VAR_BASE => TokenKind::Binary(BINARY_OPS[(t - BINARY_BASE) as usize]),
            t if t < SIGN_BASE => TokenKind::Variable((t - VAR_BASE) as usize),
            t if t < MANTISSA_BASE => TokenKind::Sign(if t == SIGN_BASE { 1.0 } else { -1.0 }),
            t if t < EXP_BASE => TokenKind::Mantissa(t - MANTISSA_BASE),
            t if t < VOCAB_SIZE as u32 => TokenKind::Exponent(t as i32 - EXP_BASE as i32 + EXP_MIN),
            _ => TokenKind::Unknown,
        }
    }

    /// Display string of a token id.
    pub fn token_string(id: u32) -> String {
        match id {
            PAD => "<pad>".into(),
            SOS => "<sos>".into(),
            EOS => "<eos>".into(),
            t if t < BINARY_BASE => UNARY_OPS[(t - UNARY_BASE) as usize].name().into(),
            t if t < VAR_BASE => BINARY_OPS[(t - BINARY_BASE) as usize].name().into(),
            t if t < SIGN_BASE => format!("x{}", t - VAR_BASE),
            t if t == SIGN_BASE => "+".into(),
            t if t == SIGN_BASE + 1 => "-".into(),
            t if t < EXP_BASE => format!("{}", t - MANTISSA_BASE),
            t if t < VOCAB_SIZE as u32 => {
                format!("E{}", t as i32 - EXP_BASE as i32 + EXP_MIN)
            }
            _ => format!("<unk:{id}>"),
        }
    }

    /// Token ids that the decoder must never emit (`<pad>` and `<sos>`).
    pub fn masked_ids(&self) -> [u32; 2] {
        [PAD, SOS]
    }

    /// The full token table as `token string -> id`, for `vocab.json`.
    pub fn to_table(&self) -> BTreeMap<String, u32> {
        (0..VOCAB_SIZE as u32)
            .map(|id| (Self::token_string(id), id))
            .collect()
    }

    pub fn write_json(&self, path: &std::path::Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(&self.to_table()).expect("vocab serializes");
        std::fs::write(path, json)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Exact or quantized (sign, mantissa, exponent) encoding of a constant.
///
/// Prefers a representation that reproduces `value` bit-exactly when one
/// exists (any constant produced by [`decode_constant`] round-trips);
/// otherwise rounds to the nearest four-significant-digit value with the
/// exponent clamped to the token range.
pub fn encode_constant(value: f64) -> (bool, u32, i32) {
    debug_assert!(value.is_finite());
    let negative = value < 0.0;
    let mag = value.abs();
    if mag == 0.0 {
        return (false, 0, 0);
    }
    // Exact scan: at most one exponent admits a normalized mantissa, but
    // sub-normal encodings (m < 1000 at the lowest exponents) are tried too.
    let mut fallback: Option<(u32, i32)> = None;
    for e in (EXP_MIN..=EXP_MAX).rev() {
        let p = pow10(e);
        let m = (mag / p).round();
        if !(0.0..=9999.0).contains(&m) {
            continue;
        }
        let m = m as u32;
        if m as f64 * p == mag {
            if (1000..=9999).contains(&m) {
                return (negative, m, e);
            }
            fallback.get_or_insert((m, e));
        }
    }
    if let Some((m, e)) = fallback {
        return (negative, m, e);
    }
    // Quantize to 4 significant digits.
    let mut e = floor_log10(mag) - 3;
    let mut m = (mag / ten_to(e)).round();
    if m >= 10_000.0 {
        m = 1000.0;
        e += 1;
    }
    if e > EXP_MAX {
        return (negative, 9999, EXP_MAX);
    }
    if e < EXP_MIN {
        let m = (mag / pow10(EXP_MIN)).round();
        if m < 1.0 {
            return (false, 0, 0);
        }
        return (negative, (m as u32).min(9999), EXP_MIN);
    }
    (negative, m as u32, e)
}

/// Numeric value of a (sign, mantissa, exponent) token triplet.
pub fn decode_constant(negative: bool, mantissa: u32, exponent: i32) -> f64 {
    let mag = mantissa as f64 * pow10(exponent);
    if negative && mag != 0.0 {
        -mag
    } else {
        mag
    }
}

fn floor_log10(mag: f64) -> i32 {
    let mut e = mag.log10().floor() as i32;
    // log10 rounding can misplace exact powers of ten.
    while ten_to(e + 1) <= mag {
        e += 1;
    }
    while ten_to(e) > mag {
        e -= 1;
    }
    e
}

fn ten_to(e: i32) -> f64 {
    if (EXP_MIN..=EXP_MAX).contains(&e) {
        pow10(e)
    } else {
        10f64.powi(e)
    }
}

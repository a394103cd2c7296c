//! The sixteen two-input Boolean operators and their real-valued relaxations.
//!
//! Gate ids follow the canonical ordering where the id's four bits, read from
//! most to least significant, are the truth-table outputs for the input pairs
//! `(a, b) = 00, 01, 10, 11`. Circuit files store these ids verbatim.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum GateKind {
    False = 0,
    And = 1,
    AndNotB = 2,
    A = 3,
    NotAAndB = 4,
    B = 5,
    Xor = 6,
    Or = 7,
    Nor = 8,
    Xnor = 9,
    NotB = 10,
    BImpliesA = 11,
    NotA = 12,
    AImpliesB = 13,
    Nand = 14,
    True = 15,
}

pub const NUM_GATES: usize = 16;

impl GateKind {
    pub const ALL: [GateKind; NUM_GATES] = [
        GateKind::False,
        GateKind::And,
        GateKind::AndNotB,
        GateKind::A,
        GateKind::NotAAndB,
        GateKind::B,
        GateKind::Xor,
        GateKind::Or,
        GateKind::Nor,
        GateKind::Xnor,
        GateKind::NotB,
        GateKind::BImpliesA,
        GateKind::NotA,
        GateKind::AImpliesB,
        GateKind::Nand,
        GateKind::True,
    ];

    /// Netlist opcode names, indexed by gate id.
    pub const OPCODES: [&'static str; NUM_GATES] = [
        "FALSE", "AND", "ANIMP", "A", "BNIMP", "B", "XOR", "OR", "NOR", "XNOR", "NOTB", "BIMP",
        "NOTA", "AIMP", "NAND", "TRUE",
    ];

    pub fn from_id(id: u8) -> Result<Self, Error> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or(Error::InvalidGateId(id))
    }

    #[inline]
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn opcode(self) -> &'static str {
        Self::OPCODES[self as usize]
    }

    /// The complementary gate (`id` and `15 - id` always sum to one).
    pub fn complement(self) -> Self {
        Self::ALL[15 - self as usize]
    }

    #[inline]
    pub fn bool_eval(self, a: bool, b: bool) -> bool {
        let column = ((a as u8) << 1) | b as u8;
        (self as u8 >> (3 - column)) & 1 == 1
    }

    /// Real-valued form, written exactly as the operator's multilinear polynomial.
    #[inline]
    pub fn real_eval(self, a: f64, b: f64) -> f64 {
        match self {
            GateKind::False => 0.0,
            GateKind::And => a * b,
            GateKind::AndNotB => a - a * b,
            GateKind::A => a,
            GateKind::NotAAndB => b - a * b,
            GateKind::B => b,
            GateKind::Xor => a + b - 2.0 * a * b,
            GateKind::Or => a + b - a * b,
            GateKind::Nor => 1.0 - (a + b - a * b),
            GateKind::Xnor => 1.0 - (a + b - 2.0 * a * b),
            GateKind::NotB => 1.0 - b,
            GateKind::BImpliesA => 1.0 - b + a * b,
            GateKind::NotA => 1.0 - a,
            GateKind::AImpliesB => 1.0 - a + a * b,
            GateKind::Nand => 1.0 - a * b,
            GateKind::True => 1.0,
        }
    }

    /// Partial derivatives `(d/da, d/db)` of [`GateKind::real_eval`].
    #[inline]
    pub fn real_grad(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            GateKind::False | GateKind::True => (0.0, 0.0),
            GateKind::And => (b, a),
            GateKind::AndNotB => (1.0 - b, -a),
            GateKind::A => (1.0, 0.0),
            GateKind::NotAAndB => (-b, 1.0 - a),
            GateKind::B => (0.0, 1.0),
            GateKind::Xor => (1.0 - 2.0 * b, 1.0 - 2.0 * a),
            GateKind::Or => (1.0 - b, 1.0 - a),
            GateKind::Nor => (b - 1.0, a - 1.0),
            GateKind::Xnor => (2.0 * b - 1.0, 2.0 * a - 1.0),
            GateKind::NotB => (0.0, -1.0),
            GateKind::BImpliesA => (b, a - 1.0),
            GateKind::NotA => (-1.0, 0.0),
            GateKind::AImpliesB => (b - 1.0, a),
            GateKind::Nand => (-b, -a),
        }
    }

    /// Coefficients `[c, c_a, c_b, c_ab]` with `real_eval(a, b) = c + c_a a + c_b b + c_ab ab`.
    ///
    /// Obtained by multilinear interpolation of the truth table, so they are
    /// integers in `{-2, ..., 2}`.
    pub fn coefficients(self) -> [f64; 4] {
        let f = |a, b| self.bool_eval(a, b) as u8 as f64;
        let f00 = f(false, false);
        let f01 = f(false, true);
        let f10 = f(true, false);
        let f11 = f(true, true);
        [f00, f10 - f00, f01 - f00, f11 - f10 - f01 + f00]
    }

    /// Word-parallel evaluation: each bit lane of `a`/`b` is one independent input pair.
    #[inline]
    pub fn eval_word(self, a: u64, b: u64) -> u64 {
        match self {
            GateKind::False => 0,
            GateKind::And => a & b,
            GateKind::AndNotB => a & !b,
            GateKind::A => a,
            GateKind::NotAAndB => !a & b,
            GateKind::B => b,
            GateKind::Xor => a ^ b,
            GateKind::Or => a | b,
            GateKind::Nor => !(a | b),
            GateKind::Xnor => !(a ^ b),
            GateKind::NotB => !b,
            GateKind::BImpliesA => a | !b,
            GateKind::NotA => !a,
            GateKind::AImpliesB => !a | b,
            GateKind::Nand => !(a & b),
            GateKind::True => !0,
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.opcode())
    }
}

impl FromStr for GateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        GateKind::OPCODES
            .iter()
            .position(|&op| op == s)
            .map(|i| GateKind::ALL[i])
            .ok_or_else(|| Error::Parse(format!("unknown gate opcode `{s}`")))
    }
}

impl TryFrom<u8> for GateKind {
    type Error = Error;

    fn try_from(id: u8) -> Result<Self, Error> {
        GateKind::from_id(id)
    }
}

//! Exact schoolbook arithmetic: carry chains, subtask labels and partial-product overlap.
//!
//! Digit vectors in this module are in value order (index 0 is the units
//! digit) unless a function says otherwise.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported operand width; products of two 9-digit numbers fit in `u64`.
pub const MAX_DIGITS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subtask {
    BmNoCarry,
    BmCarry,
    Uc,
    Ucfc,
    CarryOnly,
}

impl Subtask {
    pub const ALL: [Subtask; 5] = [
        Subtask::BmNoCarry,
        Subtask::BmCarry,
        Subtask::Uc,
        Subtask::Ucfc,
        Subtask::CarryOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subtask::BmNoCarry => "BM_NoCarry",
            Subtask::BmCarry => "BM_Carry",
            Subtask::Uc => "UC",
            Subtask::Ucfc => "UCFC",
            Subtask::CarryOnly => "CarryOnly",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Subtask::ALL.into_iter().find(|t| t.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Subtask at one answer digit plus whether a carry arrives there.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SubtaskLabel {
    pub subtask: Subtask,
    pub carry_in: bool,
}

/// Column-by-column schoolbook evaluation.
///
/// For a unit multiplier `raw[i] = D_i·u`; for a multi-digit multiplier
/// `raw[i]` is the column sum of all shifted digit products. The answer has
/// one more digit than there are columns; the top digit is the final carry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CarryChain {
    pub raw: Vec<u64>,
    pub carry_in: Vec<u64>,
    pub carry_out: Vec<u64>,
    pub answer: Vec<u8>,
}

impl CarryChain {
    fn from_columns(raw: Vec<u64>) -> Self {
        let mut carry_in = Vec::with_capacity(raw.len());
        let mut carry_out = Vec::with_capacity(raw.len());
        let mut answer = Vec::with_capacity(raw.len() + 1);
        let mut carry = 0;
        for &r in &raw {
            carry_in.push(carry);
            let total = r + carry;
            answer.push((total % 10) as u8);
            carry = total / 10;
            carry_out.push(carry);
        }
        answer.push(carry as u8);
        debug_assert!(carry < 10);
        CarryChain {
            raw,
            carry_in,
            carry_out,
            answer,
        }
    }

    /// Number of product columns; answer digit `columns()` is carry-only.
    pub fn columns(&self) -> usize {
        self.raw.len()
    }

    pub fn value(&self) -> u64 {
        self.answer
            .iter()
            .rev()
            .fold(0u64, |acc, &d| acc * 10 + d as u64)
    }

    /// Lengths of maximal runs of consecutive UCFC columns.
    pub fn ucfc_runs(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = 0;
        for i in 0..self.columns() {
            if classify(self, i).subtask == Subtask::Ucfc {
                current += 1;
            } else if current > 0 {
                runs.push(current);
                current = 0;
            }
        }
        if current > 0 {
            runs.push(current);
        }
        runs
    }
}

/// Digits of `value` zero-padded to `width`, most significant first.
pub fn digits_msb_first(value: u64, width: usize) -> Vec<u8> {
    let mut out = vec![0u8; width];
    let mut v = value;
    for slot in out.iter_mut().rev() {
        *slot = (v % 10) as u8;
        v /= 10;
    }
    out
}

pub fn pow10(n: usize) -> u64 {
    10u64.pow(n as u32)
}

/// Chain for a multiplicand given most-significant digit first times one digit.
pub fn carry_chain(multiplicand_msb_first: &[u8], multiplier: u8) -> Result<CarryChain> {
    if multiplier > 9 || multiplicand_msb_first.iter().any(|&d| d > 9) {
        return Err(Error::Task("digits must lie in 0..=9".into()));
    }
    let raw = multiplicand_msb_first
        .iter()
        .rev()
        .map(|&d| d as u64 * multiplier as u64)
        .collect();
    Ok(CarryChain::from_columns(raw))
}

/// Column-sum chain for `multiplicand × multiplier`, both `n`-digit operands.
pub fn column_chain(multiplicand: u64, multiplier: u64, n: usize) -> Result<CarryChain> {
    check_operand(multiplicand, n)?;
    check_operand(multiplier, n)?;
    let a: Vec<u64> = digits_msb_first(multiplicand, n).iter().rev().map(|&d| d as u64).collect();
    let b: Vec<u64> = digits_msb_first(multiplier, n).iter().rev().map(|&d| d as u64).collect();
    let mut raw = vec![0u64; 2 * n - 1];
    for (j, &bj) in b.iter().enumerate() {
        for (i, &ai) in a.iter().enumerate() {
            raw[i + j] += ai * bj;
        }
    }
    Ok(CarryChain::from_columns(raw))
}

fn check_operand(value: u64, n: usize) -> Result<()> {
    if n == 0 || n > MAX_DIGITS {
        return Err(Error::Task(format!("digit count {n} outside 1..={MAX_DIGITS}")));
    }
    if value >= pow10(n) {
        return Err(Error::Task(format!("{value} has more than {n} digits")));
    }
    Ok(())
}

fn classify(chain: &CarryChain, i: usize) -> SubtaskLabel {
    if i == chain.columns() {
        return SubtaskLabel {
            subtask: Subtask::CarryOnly,
            carry_in: chain.carry_out.last().is_some_and(|&c| c > 0),
        };
    }
    let (raw, cin) = (chain.raw[i], chain.carry_in[i]);
    let subtask = match (cin > 0, raw + cin >= 10) {
        (false, false) => Subtask::BmNoCarry,
        (false, true) => Subtask::BmCarry,
        (true, false) => Subtask::Uc,
        (true, true) => Subtask::Ucfc,
    };
    SubtaskLabel {
        subtask,
        carry_in: cin > 0,
    }
}

/// Subtask performed at answer digit `i` (value order).
pub fn classify_position(chain: &CarryChain, i: usize) -> Result<SubtaskLabel> {
    if i > chain.columns() {
        return Err(Error::Task(format!(
            "answer digit {i} out of range 0..={}",
            chain.columns()
        )));
    }
    Ok(classify(chain, i))
}

/// Exact product with its shifted partial products.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MxmProduct {
    /// `2n` digits, most significant first.
    pub digits: Vec<u8>,
    /// `partials[j] = multiplicand · digit_j(multiplier) · 10^j`.
    pub partials: Vec<u64>,
    pub value: u64,
}

pub fn mxm_product(multiplicand: u64, multiplier: u64, n: usize) -> Result<MxmProduct> {
    check_operand(multiplicand, n)?;
    check_operand(multiplier, n)?;
    let value = multiplicand * multiplier;
    let partials = digits_msb_first(multiplier, n)
        .iter()
        .rev()
        .enumerate()
        .map(|(j, &d)| multiplicand * d as u64 * pow10(j))
        .collect();
    Ok(MxmProduct {
        digits: digits_msb_first(value, 2 * n),
        partials,
        value,
    })
}

/// Which multiplier digit positions vary (`d`) and which are fixed to zero (`0`).
///
/// Written like the number: the leftmost character is the most significant digit.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MultiplierMask(String);

impl MultiplierMask {
    pub fn parse(s: &str) -> Result<Self> {
        if s.is_empty() || s.len() > MAX_DIGITS || !s.chars().all(|c| c == 'd' || c == '0') {
            return Err(Error::Task(format!(
                "multiplier mask {s:?} must be 1..={MAX_DIGITS} characters of 'd' or '0'"
            )));
        }
        Ok(MultiplierMask(s.to_string()))
    }

    /// Only the units digit varies: `0…0d`.
    pub fn unit(n: usize) -> Self {
        MultiplierMask(format!("{}d", "0".repeat(n - 1)))
    }

    pub fn full(n: usize) -> Self {
        MultiplierMask("d".repeat(n))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Whether the digit of significance `j` (0 = units) varies.
    pub fn varies(&self, j: usize) -> bool {
        let n = self.0.len();
        j < n && self.0.as_bytes()[n - 1 - j] == b'd'
    }

    /// Significances of the varying digits, ascending.
    pub fn free_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.varies(j)).collect()
    }

    pub fn admits(&self, multiplier: u64) -> bool {
        if multiplier >= pow10(self.len()) {
            return false;
        }
        let mut v = multiplier;
        for j in 0..self.len() {
            if v % 10 != 0 && !self.varies(j) {
                return false;
            }
            v /= 10;
        }
        true
    }
}

impl TryFrom<String> for MultiplierMask {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        MultiplierMask::parse(&s)
    }
}

impl From<MultiplierMask> for String {
    fn from(m: MultiplierMask) -> String {
        m.0
    }
}

impl fmt::Display for MultiplierMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Per-answer-digit count of partial products whose span covers the digit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OverlapMap {
    /// Value order, `A0..A(2n-1)`.
    pub counts: Vec<usize>,
}

/// Partial product `j` occupies answer digits `j..=j+n`.
pub fn overlap_map(mask: &str, n: usize) -> Result<OverlapMap> {
    let mask = MultiplierMask::parse(mask)?;
    if mask.len() != n {
        return Err(Error::Task(format!("mask {mask} has length {} but n = {n}", mask.len())));
    }
    let counts = (0..2 * n)
        .map(|k| {
            mask.free_positions()
                .into_iter()
                .filter(|&j| j <= k && k <= j + n)
                .count()
        })
        .collect();
    Ok(OverlapMap { counts })
}

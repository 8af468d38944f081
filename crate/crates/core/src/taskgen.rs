//! Multiplication problems, their fixed-width token encoding and the
//! simple-sample curriculum.

use std::collections::HashSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{digits_msb_first, pow10, MultiplierMask, MAX_DIGITS};

/// Token table: digits map to themselves, then `*` and `=`.
pub struct Vocab;

impl Vocab {
    pub const TIMES: usize = 10;
    pub const EQUALS: usize = 11;
    pub const SIZE: usize = 12;

    pub fn token(c: char) -> Option<usize> {
        match c {
            '0'..='9' => Some(c as usize - '0' as usize),
            '*' => Some(Self::TIMES),
            '=' => Some(Self::EQUALS),
            _ => None,
        }
    }

    pub fn symbol(id: usize) -> Option<char> {
        match id {
            0..=9 => Some((b'0' + id as u8) as char),
            Self::TIMES => Some('*'),
            Self::EQUALS => Some('='),
            _ => None,
        }
    }

    pub fn render(tokens: &[usize]) -> String {
        tokens.iter().map(|&t| Self::symbol(t).unwrap_or('?')).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// n-digit multiplicand times a single digit.
    Mxu,
    /// n-digit times n-digit.
    Mxm,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Mxu => "mxu",
            TaskKind::Mxm => "mxm",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_digits: usize,
    pub reversed_answer: bool,
    pub multiplier_mask: MultiplierMask,
    /// Fraction of single-free-digit multipliers; only meaningful for `Mxm`.
    pub simple_proportion: f64,
}

impl TaskSpec {
    pub fn mxu(n_digits: usize, reversed_answer: bool) -> Self {
        TaskSpec {
            kind: TaskKind::Mxu,
            n_digits,
            reversed_answer,
            multiplier_mask: MultiplierMask::unit(n_digits.max(1)),
            simple_proportion: 0.0,
        }
    }

    pub fn mxm(n_digits: usize, reversed_answer: bool) -> Self {
        TaskSpec {
            kind: TaskKind::Mxm,
            n_digits,
            reversed_answer,
            multiplier_mask: MultiplierMask::full(n_digits.max(1)),
            simple_proportion: 0.0,
        }
    }

    pub fn with_mask(mut self, mask: MultiplierMask) -> Self {
        self.multiplier_mask = mask;
        self
    }

    pub fn with_simple_proportion(mut self, p: f64) -> Self {
        self.simple_proportion = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_digits;
        if n == 0 || n > MAX_DIGITS {
            return Err(Error::Config(format!("digits must be in 1..={MAX_DIGITS}, got {n}")));
        }
        if self.multiplier_mask.len() != n {
            return Err(Error::Config(format!(
                "multiplier mask {} has length {} but digits = {n}",
                self.multiplier_mask,
                self.multiplier_mask.len()
            )));
        }
        if self.kind == TaskKind::Mxu && self.multiplier_mask != MultiplierMask::unit(n) {
            return Err(Error::Config(format!(
                "m×u tasks use mask {}, got {}",
                MultiplierMask::unit(n),
                self.multiplier_mask
            )));
        }
        if !(0.0..=1.0).contains(&self.simple_proportion) {
            return Err(Error::Config(format!(
                "simple proportion {} outside [0, 1]",
                self.simple_proportion
            )));
        }
        Ok(())
    }

    /// Multiplier width on the question side.
    pub fn multiplier_width(&self) -> usize {
        match self.kind {
            TaskKind::Mxu => 1,
            TaskKind::Mxm => self.n_digits,
        }
    }

    pub fn answer_len(&self) -> usize {
        match self.kind {
            TaskKind::Mxu => self.n_digits + 1,
            TaskKind::Mxm => 2 * self.n_digits,
        }
    }

    /// Tokens up to and including `=`.
    pub fn question_len(&self) -> usize {
        self.n_digits + self.multiplier_width() + 2
    }

    pub fn seq_len(&self) -> usize {
        self.question_len() + self.answer_len()
    }

    pub fn equals_position(&self) -> usize {
        self.question_len() - 1
    }

    /// Value-order digit index (0 = units) emitted at answer slot `slot`.
    pub fn digit_at_slot(&self, slot: usize) -> usize {
        if self.reversed_answer {
            slot
        } else {
            self.answer_len() - 1 - slot
        }
    }

    pub fn slot_of_digit(&self, digit: usize) -> usize {
        // the mapping is an involution
        self.digit_at_slot(digit)
    }

    /// Number of distinct problems this spec can emit, ignoring the curriculum.
    pub fn problem_space(&self) -> u64 {
        let multipliers = match self.kind {
            TaskKind::Mxu => 10,
            TaskKind::Mxm => pow10(self.multiplier_mask.free_positions().len()),
        };
        pow10(self.n_digits) * multipliers
    }

    pub fn key(&self, multiplicand: u64, multiplier: u64) -> u64 {
        multiplicand * pow10(self.n_digits) + multiplier
    }
}

/// One problem as a token sequence with its loss mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub tokens: Vec<usize>,
    /// True at the positions whose next-token prediction is an answer digit.
    pub loss_mask: Vec<bool>,
    pub multiplicand: u64,
    pub multiplier: u64,
    /// Answer digits in emission order.
    pub answer_digits: Vec<u8>,
    pub reversed: bool,
    /// Drawn as a single-free-digit curriculum sample.
    pub simple: bool,
}

impl EncodedExample {
    /// Next-token targets aligned with `tokens`; the last position has none and
    /// is never selected by the loss mask.
    pub fn targets(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.tokens[1..].to_vec();
        t.push(0);
        t
    }

    pub fn product(&self) -> u64 {
        self.multiplicand * self.multiplier
    }
}

pub fn encode(spec: &TaskSpec, multiplicand: u64, multiplier: u64) -> Result<EncodedExample> {
    spec.validate()?;
    let n = spec.n_digits;
    if multiplicand >= pow10(n) {
        return Err(Error::Task(format!("multiplicand {multiplicand} exceeds {n} digits")));
    }
    match spec.kind {
        TaskKind::Mxu if multiplier > 9 => {
            return Err(Error::Task(format!("m×u multiplier {multiplier} is not a single digit")));
        }
        TaskKind::Mxm if !spec.multiplier_mask.admits(multiplier) => {
            return Err(Error::Task(format!(
                "multiplier {multiplier} violates mask {}",
                spec.multiplier_mask
            )));
        }
        _ => {}
    }
    let mut tokens = Vec::with_capacity(spec.seq_len());
    tokens.extend(digits_msb_first(multiplicand, n).iter().map(|&d| d as usize));
    tokens.push(Vocab::TIMES);
    tokens.extend(
        digits_msb_first(multiplier, spec.multiplier_width())
            .iter()
            .map(|&d| d as usize),
    );
    tokens.push(Vocab::EQUALS);
    let mut answer_digits = digits_msb_first(multiplicand * multiplier, spec.answer_len());
    if spec.reversed_answer {
        answer_digits.reverse();
    }
    tokens.extend(answer_digits.iter().map(|&d| d as usize));
    let eq = spec.equals_position();
    let loss_mask = (0..tokens.len())
        .map(|i| i >= eq && i < eq + spec.answer_len())
        .collect();
    Ok(EncodedExample {
        tokens,
        loss_mask,
        multiplicand,
        multiplier,
        answer_digits,
        reversed: spec.reversed_answer,
        simple: false,
    })
}

/// Integer value of an emitted answer, or `None` when it is malformed.
pub fn decode_answer(spec: &TaskSpec, emitted: &[usize]) -> Option<u64> {
    if emitted.len() != spec.answer_len() || emitted.iter().any(|&t| t > 9) {
        return None;
    }
    let fold = |acc: u64, &d: &usize| acc * 10 + d as u64;
    Some(if spec.reversed_answer {
        emitted.iter().rev().fold(0, fold)
    } else {
        emitted.iter().fold(0, fold)
    })
}

/// Question tokens (through `=`) recovered from an encoded sequence.
pub fn decode_question(spec: &TaskSpec, tokens: &[usize]) -> Result<(u64, u64)> {
    let n = spec.n_digits;
    let w = spec.multiplier_width();
    let ok = tokens.len() >= spec.question_len()
        && tokens[n] == Vocab::TIMES
        && tokens[n + w + 1] == Vocab::EQUALS
        && tokens[..n].iter().chain(&tokens[n + 1..n + 1 + w]).all(|&t| t <= 9);
    if !ok {
        return Err(Error::Task(format!(
            "malformed question {:?}",
            Vocab::render(tokens)
        )));
    }
    let number = |ts: &[usize]| ts.iter().fold(0u64, |acc, &d| acc * 10 + d as u64);
    Ok((number(&tokens[..n]), number(&tokens[n + 1..n + 1 + w])))
}

/// Parses `"57257*2"` or `"57257*2="` into operands.
pub fn parse_expression(expr: &str) -> Result<(u64, u64)> {
    let body = expr.trim().trim_end_matches('=');
    let (a, b) = body
        .split_once(['*', 'x', '×'])
        .ok_or_else(|| Error::Task(format!("expected <a>*<b>, got {expr:?}")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<u64>()
            .map_err(|_| Error::Task(format!("not a non-negative integer: {s:?}")))
    };
    Ok((parse(a)?, parse(b)?))
}

/// Draws one problem: uniform digits in free positions, with the curriculum's
/// single-free-digit replacement applied to m×m multipliers.
pub fn sample_example<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> EncodedExample {
    let n = spec.n_digits;
    let multiplicand = rng.gen_range(0..pow10(n));
    let (multiplier, simple) = match spec.kind {
        TaskKind::Mxu => (rng.gen_range(0..10), false),
        TaskKind::Mxm => {
            let free = spec.multiplier_mask.free_positions();
            if !free.is_empty() && rng.gen_bool(spec.simple_proportion) {
                let j = free[rng.gen_range(0..free.len())];
                (rng.gen_range(0..10u64) * pow10(j), true)
            } else {
                let m = free
                    .iter()
                    .map(|&j| rng.gen_range(0..10u64) * pow10(j))
                    .sum();
                (m, false)
            }
        }
    };
    let mut ex = encode(spec, multiplicand, multiplier).expect("sampled problem conforms to spec");
    ex.simple = simple;
    ex
}

/// `count` distinct problems whose keys are absent from `seen`.
pub fn make_heldout_split<R: Rng + ?Sized>(
    spec: &TaskSpec,
    rng: &mut R,
    seen: &HashSet<u64>,
    count: usize,
) -> Result<Vec<EncodedExample>> {
    spec.validate()?;
    let space = spec.problem_space();
    let seen_in_space = if (seen.len() as u64) < space {
        seen.iter().filter(|&&k| in_space(spec, k)).count() as u64
    } else {
        (0..space).filter(|&i| seen.contains(&nth_key(spec, i))).count() as u64
    };
    let available = space - seen_in_space;
    if count as u64 > available {
        return Err(Error::Exhausted {
            wanted: count,
            available: available as usize,
        });
    }
    // rejection sampling degrades when few unseen problems remain
    if available < 2 * count as u64 {
        let mut pool: Vec<u64> = (0..space)
            .map(|i| nth_key(spec, i))
            .filter(|k| !seen.contains(k))
            .collect();
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
            let (a, b) = split_key(spec, pool[i]);
            out.push(encode(spec, a, b)?);
        }
        return Ok(out);
    }
    let mut taken = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let ex = sample_example(spec, rng);
        let key = spec.key(ex.multiplicand, ex.multiplier);
        if !seen.contains(&key) && taken.insert(key) {
            out.push(ex);
        }
    }
    Ok(out)
}

fn split_key(spec: &TaskSpec, key: u64) -> (u64, u64) {
    let p = pow10(spec.n_digits);
    (key / p, key % p)
}

fn in_space(spec: &TaskSpec, key: u64) -> bool {
    let (a, b) = split_key(spec, key);
    a < pow10(spec.n_digits)
        && match spec.kind {
            TaskKind::Mxu => b <= 9,
            TaskKind::Mxm => spec.multiplier_mask.admits(b),
        }
}

/// Enumerates the problem space in a fixed order.
fn nth_key(spec: &TaskSpec, i: u64) -> u64 {
    let free = match spec.kind {
        TaskKind::Mxu => vec![0],
        TaskKind::Mxm => spec.multiplier_mask.free_positions(),
    };
    let per = pow10(free.len());
    let (a, mut m_ix) = (i / per, i % per);
    let mut multiplier = 0;
    for &j in &free {
        multiplier += (m_ix % 10) * pow10(j);
        m_ix /= 10;
    }
    spec.key(a, multiplier)
}

/// Dataset dump line: question, tab, answer digits in emission order.
pub fn dump_line(ex: &EncodedExample) -> String {
    let eq = ex.tokens.iter().position(|&t| t == Vocab::EQUALS).unwrap_or(0);
    format!(
        "{}\t{}",
        Vocab::render(&ex.tokens[..=eq]),
        Vocab::render(&ex.tokens[eq + 1..])
    )
}

//! Oracle checks against wide-integer arithmetic, shared by the oracle tests
//! and the acceptance runner.

use mxlb_core::oracle::{
    carry_chain, classify_position, column_chain, digits_msb_first, mxm_product, overlap_map,
    pow10, Subtask,
};
use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Zero-padded decimal digits of `a·b`, most significant first, via bigint.
pub fn bigint_digits(a: u64, b: u64, width: usize) -> Vec<u8> {
    let p = BigUint::from(a) * BigUint::from(b);
    let s = p.to_str_radix(10);
    assert!(s.len() <= width, "{a}·{b} wider than {width}");
    let mut out = vec![0u8; width - s.len()];
    out.extend(s.bytes().map(|c| c - b'0'));
    out
}

fn check_unit(a: u64, u: u8, n: usize) -> Result<(), String> {
    let chain = carry_chain(&digits_msb_first(a, n), u).map_err(|e| e.to_string())?;
    let mut got: Vec<u8> = chain.answer.clone();
    got.reverse();
    if got != bigint_digits(a, u as u64, n + 1) {
        return Err(format!("{a}×{u}: chain {got:?}"));
    }
    for i in 0..n {
        if chain.carry_in[i] > 8 || chain.carry_out[i] > 8 {
            return Err(format!("{a}×{u}: carry above 8 at {i}"));
        }
        let total = chain.raw[i] + chain.carry_in[i];
        if chain.answer[i] as u64 != total % 10 || chain.carry_out[i] != total / 10 {
            return Err(format!("{a}×{u}: inconsistent column {i}"));
        }
    }
    labels_partition(&chain, n)
        .map_err(|e| format!("{a}×{u}: {e}"))
}

/// Every position gets exactly the label its (carry-in, sum) case dictates.
fn labels_partition(chain: &mxlb_core::oracle::CarryChain, columns: usize) -> Result<(), String> {
    for i in 0..=columns {
        let label = classify_position(chain, i).map_err(|e| e.to_string())?;
        let expected: Vec<Subtask> = Subtask::ALL
            .into_iter()
            .filter(|s| {
                if i == columns {
                    return *s == Subtask::CarryOnly;
                }
                let (raw, cin) = (chain.raw[i], chain.carry_in[i]);
                match s {
                    Subtask::BmNoCarry => cin == 0 && raw < 10,
                    Subtask::BmCarry => cin == 0 && raw >= 10,
                    Subtask::Uc => cin > 0 && raw + cin < 10,
                    Subtask::Ucfc => cin > 0 && raw + cin >= 10,
                    Subtask::CarryOnly => false,
                }
            })
            .collect();
        if expected != [label.subtask] {
            return Err(format!("position {i}: label {:?}, matching cases {expected:?}", label.subtask));
        }
        if i < columns && label.carry_in != (chain.carry_in[i] > 0) {
            return Err(format!("position {i}: carry flag"));
        }
    }
    Ok(())
}

fn check_mxm(a: u64, b: u64, n: usize) -> Result<(), String> {
    let want = bigint_digits(a, b, 2 * n);
    let p = mxm_product(a, b, n).map_err(|e| e.to_string())?;
    if p.digits != want {
        return Err(format!("{a}×{b}: product digits {:?}", p.digits));
    }
    if p.partials.iter().sum::<u64>() != p.value {
        return Err(format!("{a}×{b}: partials do not sum to the product"));
    }
    let chain = column_chain(a, b, n).map_err(|e| e.to_string())?;
    let mut got = chain.answer.clone();
    got.reverse();
    if got != want {
        return Err(format!("{a}×{b}: column chain {got:?}"));
    }
    labels_partition(&chain, chain.columns()).map_err(|e| format!("{a}×{b}: {e}"))
}

/// All 2-digit × 1-digit problems (plus 2×2-digit products).
pub fn exhaustive_small() -> Result<usize, String> {
    let mut cases = 0;
    for a in 0..100 {
        for u in 0..10u8 {
            check_unit(a, u, 2)?;
            cases += 1;
        }
        for b in 0..100 {
            check_mxm(a, b, 2)?;
            cases += 1;
        }
    }
    Ok(cases)
}

pub fn random_n5(count: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..count {
        let a = rng.gen_range(0..pow10(5));
        check_unit(a, rng.gen_range(0..10), 5)?;
        check_mxm(a, rng.gen_range(0..pow10(5)), 5)?;
    }
    Ok(count)
}

pub fn overlap_examples() -> Result<(), String> {
    let err = |e: mxlb_core::Error| e.to_string();
    let d000d = overlap_map("d000d", 5).map_err(err)?.counts;
    if d000d[4] != 2 || d000d[5] != 2 {
        return Err(format!("d000d counts {d000d:?}"));
    }
    let full = overlap_map("ddddd", 5).map_err(err)?.counts;
    if (full[0], full[4], full[5], full[9]) != (1, 5, 5, 1) {
        return Err(format!("ddddd counts {full:?}"));
    }
    let unit = overlap_map("0000d", 5).map_err(err)?.counts;
    if unit.iter().any(|&c| c > 1) {
        return Err(format!("0000d counts {unit:?}"));
    }
    Ok(())
}

//! Acceptance runner: one PASS/FAIL line per criterion. Trained models are
//! shared between the criteria that need them, so the whole suite trains 18
//! m×u and 7 m×m models once.
//!
//! A failing criterion is reported, not fatal, so `cargo test` still runs the
//! remaining test targets. Set `MXLB_ACCEPTANCE_STRICT=1` to exit nonzero on
//! any gated failure, and `MXLB_ACCEPTANCE_ONLY=1,2,8` to run a subset.

mod support;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use mxlb_core::analysis::{
    ablate_and_eval, ablation_for, attention_profile, deltas_to_csv, evaluate, heldout, median,
    refinement_label, sweep, Direction, EvalReport, StaircaseProfile, SweepBase,
};
use mxlb_core::checkpoint::{self, RunConfig};
use mxlb_core::model::{AblationMode, ModelConfig};
use mxlb_core::oracle::{MultiplierMask, Subtask};
use mxlb_core::taskgen::TaskSpec;
use mxlb_core::train::{
    convergence_order, seeded, stream, train, LrSchedule, ProbeSets, TrainConfig, TrainOutcome,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use support::checks;

const SEEDS: [u64; 3] = [0, 1, 2];
const HEADS: [usize; 3] = [1, 2, 3];
const MXU_DIGITS: usize = 5;
const MXU_D_MODEL: usize = 120;
const EVAL_COUNT: usize = 10_000;
const EVAL_SEED: u64 = 2024;

const MXM_DIGITS: usize = 3;
const MXM_D_MODEL: usize = 48;
const MXM_HEADS: usize = 3;
const MXM_DEPTH: usize = 8;

/// The default constant 1e-4 barely moves 8-layer m×m models within the
/// tier's time budget; warmup plus cosine decay at 1e-3 is the fastest
/// schedule found. Probes are small because only exact match is scored.
fn mxm_train() -> TrainConfig {
    TrainConfig {
        iterations: 5000,
        learning_rate: 1e-3,
        schedule: LrSchedule::WarmupCosine { warmup: 250 },
        log_every: 500,
        probe_size: 64,
        ..TrainConfig::default()
    }
}

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

struct Runner {
    failures: usize,
}

impl Runner {
    fn record(&mut self, id: u32, name: &str, gated: bool, v: Verdict) {
        let status = if v.pass { "PASS" } else { "FAIL" };
        let gate = if gated { "" } else { " (report only)" };
        println!("[{id}] {status}{gate} {name}: {}", v.detail);
        if gated && !v.pass {
            self.failures += 1;
        }
    }
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut worst: (f64, &str) = (0.0, "");
    for (name, build) in support::op_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..100 {
            let case = build(&mut rng);
            let e = support::gradient_error(&*case.objective, &case.inputs);
            if e > worst.0 || e.is_nan() {
                worst = (e, name);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for _ in 0..100 {
        let (params, batch) = support::model_case(&mut rng);
        let e = support::model_gradient_error(&params, &batch);
        if e > worst.0 || e.is_nan() {
            worst = (e, "model loss");
        }
    }
    let t = start.elapsed();
    let ops = support::op_cases().len();
    Verdict::new(
        worst.0 < support::FD_TOLERANCE && t.as_secs() < 60,
        format!(
            "{ops} ops + model, 100 cases each, worst rel. err {:.2e} ({}), {:.1}s",
            worst.0,
            worst.1,
            t.as_secs_f64()
        ),
    )
}

fn oracles() -> Verdict {
    let start = Instant::now();
    let result = checks::exhaustive_small()
        .and_then(|small| checks::random_n5(100_000, 7).map(|r| (small, r)))
        .and_then(|counts| checks::overlap_examples().map(|_| counts));
    let t = start.elapsed();
    match result {
        Ok((small, random)) => Verdict::new(
            t.as_secs() < 60,
            format!("{small} exhaustive + {random} random n=5 pairs, overlap d000d ok, {:.1}s", t.as_secs_f64()),
        ),
        Err(e) => Verdict::new(false, e),
    }
}

fn determinism() -> Verdict {
    let spec = TaskSpec::mxu(3, true);
    let model = ModelConfig::new(1, 3, 12, spec.seq_len());
    let cfg = TrainConfig {
        iterations: 40,
        batch_size: 16,
        log_every: 10,
        probe_size: 8,
        learning_rate: 1e-3,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || -> mxlb_core::Result<(Vec<u8>, Vec<String>)> {
        let out = train(&model, &spec, &cfg)?;
        let rc = RunConfig {
            model: model.clone(),
            task: spec.clone(),
            train: cfg.clone(),
        };
        let bytes = checkpoint::encode(&rc, &out.params)?;
        let report = evaluate(&out.params, &spec, 200, &mut seeded(3, stream::EVAL), &out.seen)?;
        let probes = ProbeSets::build(&spec, 8, 16, &mut seeded(3, stream::PROBE));
        let ab = ablation_for(&out.params, &spec, 0, 0, AblationMode::Mean, &mut seeded(3, 5))?;
        let deltas = ablate_and_eval(&out.params, &spec, &ab, &probes)?;
        let examples = heldout(&spec, 64, &mut seeded(3, 6), &out.seen)?;
        let profile = attention_profile(&out.params, &spec, &examples)?;
        let base = SweepBase {
            n_digits: 2,
            d_model: 6,
            n_heads: 3,
            train: TrainConfig {
                iterations: 10,
                ..cfg.clone()
            },
            seeds: vec![1],
            eval_count: 50,
            eval_seed: 4,
        };
        let table = sweep(&base.heads(&[3]))?;
        Ok((
            bytes,
            vec![
                out.log.to_csv(),
                report.to_csv(),
                deltas_to_csv(&deltas),
                profile.to_csv(),
                table.to_csv(),
                table.runs_csv(),
            ],
        ))
    };
    let check = || -> Result<String, String> {
        let (a_bytes, a_csv) = run().map_err(|e| e.to_string())?;
        let (b_bytes, b_csv) = run().map_err(|e| e.to_string())?;
        if a_bytes != b_bytes {
            return Err("same seed gave different checkpoints".into());
        }
        if let Some(i) = (0..a_csv.len()).find(|&i| a_csv[i] != b_csv[i]) {
            return Err(format!("CSV output #{i} differs between reruns"));
        }
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("m.mxlb");
        std::fs::write(&path, &a_bytes).map_err(|e| e.to_string())?;
        let (rc, params) = checkpoint::load(&path).map_err(|e| e.to_string())?;
        checkpoint::save(&dir.path().join("again.mxlb"), &rc, &params).map_err(|e| e.to_string())?;
        if std::fs::read(dir.path().join("again.mxlb")).map_err(|e| e.to_string())? != a_bytes {
            return Err("save(load(x)) is not bitwise identical".into());
        }
        Ok(format!("checkpoint {} bytes and {} CSV outputs identical; round trip bitwise", a_bytes.len(), a_csv.len()))
    };
    match check() {
        Ok(d) => Verdict::new(true, d),
        Err(e) => Verdict::new(false, e),
    }
}

struct MxuRun {
    heads: usize,
    reversed: bool,
    seed: u64,
    out: TrainOutcome,
    report: EvalReport,
    wall: Duration,
}

/// Every (heads, format, seed) run; failed runs come back as messages.
fn mxu_runs() -> (Vec<MxuRun>, Vec<String>) {
    let jobs: Vec<(usize, bool, u64)> = HEADS
        .iter()
        .rev()
        .flat_map(|&h| [true, false].into_iter().flat_map(move |r| SEEDS.map(|s| (h, r, s))))
        .collect();
    let results: Vec<Result<MxuRun, String>> = jobs
        .into_par_iter()
        .map(|(heads, reversed, seed)| {
            let start = Instant::now();
            let spec = TaskSpec::mxu(MXU_DIGITS, reversed);
            let model = ModelConfig::new(1, heads, MXU_D_MODEL, spec.seq_len());
            let cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let run = train(&model, &spec, &cfg).and_then(|out| {
                let report =
                    evaluate(&out.params, &spec, EVAL_COUNT, &mut seeded(EVAL_SEED, stream::EVAL), &out.seen)?;
                Ok(MxuRun {
                    heads,
                    reversed,
                    seed,
                    out,
                    report,
                    wall: start.elapsed(),
                })
            });
            run.map_err(|e| format!("{heads} heads, reversed {reversed}, seed {seed}: {e}"))
        })
        .collect();
    let (mut runs, mut errors) = (Vec::new(), Vec::new());
    for r in results {
        match r {
            Ok(run) => runs.push(run),
            Err(e) => errors.push(e),
        }
    }
    (runs, errors)
}

fn median_exact(runs: &[MxuRun], heads: usize, reversed: bool) -> f64 {
    let mut v: Vec<f64> = runs
        .iter()
        .filter(|r| r.heads == heads && r.reversed == reversed)
        .map(|r| r.report.exact)
        .collect();
    median(&mut v).unwrap_or(f64::NAN)
}

fn mxu_accuracy(runs: &[MxuRun]) -> Verdict {
    let ours: Vec<&MxuRun> = runs.iter().filter(|r| r.heads == 3 && r.reversed).collect();
    let m = median_exact(runs, 3, true);
    let wall: Duration = ours.iter().map(|r| r.wall).sum();
    let per_seed: Vec<String> = ours.iter().map(|r| format!("seed {} {}", r.seed, pct(r.report.exact))).collect();
    Verdict::new(
        ours.len() == SEEDS.len() && m >= 0.97 && minutes(wall) < 20.0,
        format!(
            "median exact {} on {} held-out ({}), train+eval {:.1} min",
            pct(m),
            EVAL_COUNT,
            per_seed.join(", "),
            minutes(wall)
        ),
    )
}

fn reversal_gap(runs: &[MxuRun]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for h in HEADS {
        let (rev, ord) = (median_exact(runs, h, true), median_exact(runs, h, false));
        let gap = 100.0 * (rev - ord);
        let complete = runs.iter().filter(|r| r.heads == h).count() == 2 * SEEDS.len();
        pass &= complete && gap >= 5.0;
        parts.push(format!("{h} heads {:.2} vs {:.2} (gap {gap:.2})", 100.0 * rev, 100.0 * ord));
    }
    Verdict::new(pass, parts.join("; "))
}

fn learning_order(runs: &[MxuRun]) -> Verdict {
    let mut good = 0;
    let mut parts = Vec::new();
    for r in runs.iter().filter(|r| r.heads == 3 && r.reversed) {
        let order = convergence_order(&r.out.log, 0.5);
        let at = |s: Subtask| {
            order
                .iter()
                .find(|(t, _)| *t == s)
                .map(|(_, hit)| hit.unwrap_or(usize::MAX))
                .unwrap_or(usize::MAX)
        };
        let ucfc = at(Subtask::Ucfc);
        let latest = order.iter().map(|(_, hit)| hit.unwrap_or(usize::MAX)).max().unwrap_or(0);
        let ok = at(Subtask::BmNoCarry) < ucfc && ucfc == latest;
        good += ok as usize;
        let shown: Vec<String> = order
            .iter()
            .map(|(s, hit)| format!("{}@{}", s.name(), hit.map_or("never".into(), |i| i.to_string())))
            .collect();
        parts.push(format!("seed {}: {}", r.seed, shown.join(" ")));
    }
    Verdict::new(good * 2 > SEEDS.len(), format!("{good}/{} seeds in order; {}", SEEDS.len(), parts.join("; ")))
}

fn majority_direction(p: &StaircaseProfile) -> Direction {
    let count = |d| p.heads.iter().filter(|h| h.direction == d).count();
    let (l, r) = (count(Direction::LeftToRight), count(Direction::RightToLeft));
    match l.cmp(&r) {
        std::cmp::Ordering::Greater => Direction::LeftToRight,
        std::cmp::Ordering::Less => Direction::RightToLeft,
        std::cmp::Ordering::Equal => Direction::Static,
    }
}

fn attention_report(runs: &[MxuRun]) -> Verdict {
    match staircases(runs) {
        Ok(v) => v,
        Err(e) => Verdict::new(false, e),
    }
}

fn staircases(runs: &[MxuRun]) -> Result<Verdict, String> {
    let mut profiles = Vec::new();
    let mut csv = String::from("format,layer,head,dominant_offset,agreement,direction\n");
    for reversed in [false, true] {
        let run = runs
            .iter()
            .find(|r| r.heads == 3 && r.reversed == reversed && r.seed == SEEDS[0])
            .ok_or("3-head seed-0 model unavailable")?;
        let spec = TaskSpec::mxu(MXU_DIGITS, reversed);
        let examples = heldout(&spec, 512, &mut seeded(EVAL_SEED, 9), &run.out.seen).map_err(|e| e.to_string())?;
        let profile = attention_profile(&run.out.params, &spec, &examples).map_err(|e| e.to_string())?;
        let name = if reversed { "reversed" } else { "ordinal" };
        for line in profile.to_csv().lines().skip(1) {
            csv.push_str(&format!("{name},{line}\n"));
        }
        profiles.push(profile);
    }
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let path = dir.join("attention.csv");
    let written = std::fs::create_dir_all(&dir).and_then(|_| std::fs::write(&path, &csv)).is_ok();

    let agreement_ok = profiles.iter().flat_map(|p| &p.heads).all(|h| h.agreement >= 0.6);
    let (ord, rev) = (majority_direction(&profiles[0]), majority_direction(&profiles[1]));
    let opposite = ord != Direction::Static && rev != Direction::Static && ord != rev;
    let agreements: Vec<String> = profiles
        .iter()
        .flat_map(|p| &p.heads)
        .map(|h| format!("{:.2}", h.agreement))
        .collect();
    Ok(Verdict::new(
        agreement_ok && opposite,
        format!(
            "agreement [{}], ordinal {} vs reversed {}; {}",
            agreements.join(" "),
            ord.name(),
            rev.name(),
            if written {
                format!("profile written to {}", path.display())
            } else {
                "could not write profile".into()
            }
        ),
    ))
}

struct Grid {
    rows: Vec<(String, Option<f64>)>,
    full_mask_report: Option<EvalReport>,
    wall: Duration,
}

fn refinement_grid() -> Grid {
    let start = Instant::now();
    let base = SweepBase {
        n_digits: MXM_DIGITS,
        d_model: MXM_D_MODEL,
        n_heads: MXM_HEADS,
        train: mxm_train(),
        seeds: vec![SEEDS[0]],
        eval_count: EVAL_COUNT,
        eval_seed: EVAL_SEED,
    };
    let mut plan = base.refinement(MXM_DEPTH);
    let full = refinement_label(true, true, true);
    let unit = MultiplierMask::parse(&format!("{}d", "0".repeat(MXM_DIGITS - 1))).expect("mask");
    for cell in plan.cells.iter_mut().filter(|c| c.row == full) {
        cell.eval_masks = vec![unit.clone()];
    }
    let table = sweep(&plan).expect("refinement sweep");
    let rows = table
        .medians()
        .into_iter()
        .map(|(row, _, m)| (row, m.map(|v| v / 100.0)))
        .collect();
    let full_mask_report = table
        .results
        .iter()
        .find(|r| r.cell.row == full)
        .and_then(|r| r.outcome.as_ref().ok())
        .and_then(|o| o.report.per_mask.first().cloned());
    for r in &table.results {
        if let Err(e) = &r.outcome {
            println!("    cell {} failed: {e}", r.cell.row);
        }
    }
    Grid {
        rows,
        full_mask_report,
        wall: start.elapsed(),
    }
}

fn refinement_verdict(grid: &Grid) -> Verdict {
    let get = |label: &str| grid.rows.iter().find(|(r, _)| r == label).and_then(|(_, v)| *v);
    let full = get(&refinement_label(true, true, true));
    let baseline = get("baseline");
    let mut pass = minutes(grid.wall) < 30.0;
    pass &= full.is_some_and(|f| f >= 0.99);
    pass &= baseline.is_some_and(|b| b <= 0.05);
    for (row, v) in &grid.rows {
        if *row != refinement_label(true, true, true) {
            pass &= matches!((v, full), (Some(v), Some(f)) if v < &f);
        }
    }
    let shown: Vec<String> = grid
        .rows
        .iter()
        .map(|(r, v)| format!("{r} {}", v.map_or("NA".into(), pct)))
        .collect();
    Verdict::new(
        pass,
        format!(
            "n={MXM_DIGITS}, d_model {MXM_D_MODEL}, depth {MXM_DEPTH}: {}; {:.1} min",
            shown.join(", "),
            minutes(grid.wall)
        ),
    )
}

fn unit_mask_digits(grid: &Grid) -> Verdict {
    match &grid.full_mask_report {
        Some(r) => {
            let (a0, top) = (r.per_digit[0], *r.per_digit.last().expect("digits"));
            Verdict::new(
                a0 >= 0.99 && top >= 0.99,
                format!(
                    "mask {}: A0 {}, A{} {}, exact {}",
                    r.spec.multiplier_mask.as_str(),
                    pct(a0),
                    r.per_digit.len() - 1,
                    pct(top),
                    pct(r.exact)
                ),
            )
        }
        None => Verdict::new(false, "full-combination model unavailable"),
    }
}

/// Criteria selected by `MXLB_ACCEPTANCE_ONLY` (comma-separated ids), else all.
fn selected() -> Vec<u32> {
    match std::env::var("MXLB_ACCEPTANCE_ONLY") {
        Ok(v) if !v.trim().is_empty() => v.split(',').filter_map(|x| x.trim().parse().ok()).collect(),
        _ => (1..=9).collect(),
    }
}

fn main() -> ExitCode {
    let only = selected();
    let want = |ids: &[u32]| ids.iter().any(|i| only.contains(i));
    let mut runner = Runner { failures: 0 };
    let start = Instant::now();
    if want(&[1]) {
        runner.record(1, "gradient correctness", true, gradients());
    }
    if want(&[2]) {
        runner.record(2, "oracle exactness", true, oracles());
    }
    if want(&[8]) {
        runner.record(8, "determinism and persistence", true, determinism());
    }

    if want(&[3, 4, 6, 9]) {
        let (runs, errors) = mxu_runs();
        for e in &errors {
            println!("    m×u run failed: {e}");
        }
        runner.record(3, "m×u 1-layer 3-head reversed accuracy", true, mxu_accuracy(&runs));
        runner.record(4, "reversed beats ordinal by 5 points", true, reversal_gap(&runs));
        runner.record(6, "subtask learning order", true, learning_order(&runs));
        runner.record(9, "attention staircase", false, attention_report(&runs));
    }

    if want(&[5, 7]) {
        let grid = refinement_grid();
        runner.record(5, "m×m refinement grid", true, refinement_verdict(&grid));
        runner.record(7, "unit-mask digits of the full model", true, unit_mask_digits(&grid));
    }
    for id in (1..=9).filter(|i| !only.contains(i)) {
        println!("[{id}] SKIP not selected");
    }

    println!(
        "acceptance: {} gated failure(s), {:.1} min total",
        runner.failures,
        minutes(start.elapsed())
    );
    let strict = std::env::var("MXLB_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if runner.failures == 0 || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Greedy evaluation, head ablation, attention profiles and sweep runners.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward_on_tape, AblationMode, AblationSpec, AttentionRecord, ForwardOptions, ModelConfig,
    TransformerParams,
};
use crate::oracle::{MultiplierMask, Subtask};
use crate::taskgen::{make_heldout_split, sample_example, EncodedExample, TaskKind, TaskSpec, Vocab};
use crate::autodiff::Tape;
use crate::tensor::Float;
use crate::train::{seeded, train, ProbeSets, TrainConfig, EVAL_CHUNK};

/// Greedy decoding of `n_ans` tokens after each question (tokens up to and
/// including `=`). Ties go to the lowest token id.
pub fn generate<T: Float>(
    params: &TransformerParams<T>,
    spec: &TaskSpec,
    questions: &[Vec<usize>],
    ablation: Option<&AblationSpec>,
) -> Result<Vec<Vec<usize>>> {
    let q_len = spec.equals_position() + 1;
    if let Some(bad) = questions.iter().find(|q| q.len() != q_len || q.last() != Some(&Vocab::EQUALS)) {
        return Err(Error::Layout(format!(
            "question {:?} does not end with '=' at position {}",
            Vocab::render(bad),
            q_len - 1
        )));
    }
    let mut out = Vec::with_capacity(questions.len());
    for chunk in questions.chunks(EVAL_CHUNK) {
        let mut seqs: Vec<Vec<usize>> = chunk.to_vec();
        for _ in 0..spec.answer_len() {
            let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
            let mut tape = Tape::new();
            let fwd = forward_on_tape(
                params,
                &mut tape,
                &refs,
                false,
                ForwardOptions {
                    capture_attention: false,
                    ablation,
                },
            )?;
            let logits = tape.value(fwd.logits).data();
            let (len, v) = (seqs[0].len(), params.config.vocab_size);
            for (b, seq) in seqs.iter_mut().enumerate() {
                let row = &logits[(b * len + len - 1) * v..(b * len + len) * v];
                seq.push(argmax(row));
            }
        }
        out.extend(seqs.into_iter().map(|s| s[q_len..].to_vec()));
    }
    Ok(out)
}

fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        // NaN never wins, so a broken model yields token 0 rather than a panic
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Fraction in `[0, 1]`.
    pub exact: f64,
    /// Value order `A0..`, fractions in `[0, 1]`.
    pub per_digit: Vec<f64>,
    pub count: usize,
    /// Outputs containing a non-digit token.
    pub malformed: usize,
    pub spec: TaskSpec,
    pub per_mask: Vec<EvalReport>,
}

impl EvalReport {
    pub fn csv_header(answer_len: usize) -> String {
        let mut h = String::from("overall");
        for d in (0..answer_len).rev() {
            let _ = write!(h, ",A{d}");
        }
        h
    }

    /// `overall,A{k}..A0` in percent.
    pub fn csv_row(&self) -> String {
        let mut row = format!("{:.2}", 100.0 * self.exact);
        for a in self.per_digit.iter().rev() {
            let _ = write!(row, ",{:.2}", 100.0 * a);
        }
        row
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::csv_header(self.per_digit.len()), self.csv_row())
    }
}

/// Scores generated answers against the examples they were generated for.
pub fn score(spec: &TaskSpec, examples: &[EncodedExample], emitted: &[Vec<usize>]) -> EvalReport {
    let n_ans = spec.answer_len();
    let mut digit_hits = vec![0usize; n_ans];
    let (mut exact, mut malformed) = (0, 0);
    for (ex, out) in examples.iter().zip(emitted) {
        let mut all = true;
        for slot in 0..n_ans {
            let hit = out.get(slot) == Some(&(ex.answer_digits[slot] as usize));
            digit_hits[spec.digit_at_slot(slot)] += hit as usize;
            all &= hit;
        }
        exact += all as usize;
        malformed += out.iter().any(|&t| t >= 10) as usize;
    }
    let count = examples.len().max(1) as f64;
    EvalReport {
        exact: exact as f64 / count,
        per_digit: digit_hits.iter().map(|&h| h as f64 / count).collect(),
        count: examples.len(),
        malformed,
        spec: spec.clone(),
        per_mask: Vec::new(),
    }
}

/// Uniform (curriculum-free) problems that avoid `excluded`.
pub fn heldout<R: Rng + ?Sized>(
    spec: &TaskSpec,
    count: usize,
    rng: &mut R,
    excluded: &HashSet<u64>,
) -> Result<Vec<EncodedExample>> {
    if count == 0 {
        return Err(Error::Config("evaluation count must be at least 1".into()));
    }
    make_heldout_split(&spec.clone().with_simple_proportion(0.0), rng, excluded, count)
}

pub fn evaluate<T: Float, R: Rng + ?Sized>(
    params: &TransformerParams<T>,
    spec: &TaskSpec,
    count: usize,
    rng: &mut R,
    excluded: &HashSet<u64>,
) -> Result<EvalReport> {
    check_layout(&params.config, spec)?;
    let examples = heldout(spec, count, rng, excluded)?;
    let questions: Vec<Vec<usize>> = examples
        .iter()
        .map(|e| e.tokens[..=spec.equals_position()].to_vec())
        .collect();
    let emitted = generate(params, spec, &questions, None)?;
    Ok(score(spec, &examples, &emitted))
}

fn check_layout(config: &ModelConfig, spec: &TaskSpec) -> Result<()> {
    if config.vocab_size != Vocab::SIZE {
        return Err(Error::Layout(format!(
            "model vocabulary {} differs from the task vocabulary {}",
            config.vocab_size,
            Vocab::SIZE
        )));
    }
    if config.max_seq_len < spec.seq_len() {
        return Err(Error::Layout(format!(
            "{}-digit {} sequences need {} positions, model has {}",
            spec.n_digits,
            spec.kind,
            spec.seq_len(),
            config.max_seq_len
        )));
    }
    Ok(())
}

/// Evaluates an m×m model on m×u problems posed in the m×m layout
/// (multiplier mask `0…0d`).
pub fn cross_task_eval<T: Float, R: Rng + ?Sized>(
    params: &TransformerParams<T>,
    mxu: &TaskSpec,
    count: usize,
    rng: &mut R,
    excluded: &HashSet<u64>,
) -> Result<EvalReport> {
    if mxu.kind != TaskKind::Mxu {
        return Err(Error::Layout(format!("expected an m×u spec, got {}", mxu.kind)));
    }
    let posed = TaskSpec::mxm(mxu.n_digits, mxu.reversed_answer)
        .with_mask(MultiplierMask::parse(&format!("{}d", "0".repeat(mxu.n_digits - 1)))?);
    if params.config.max_seq_len != posed.seq_len() {
        return Err(Error::Layout(format!(
            "model expects {}-token sequences; the {}-digit m×m layout has {}",
            params.config.max_seq_len,
            mxu.n_digits,
            posed.seq_len()
        )));
    }
    evaluate(params, &posed, count, rng, excluded)
}

pub const MEAN_REFERENCE_SIZE: usize = 1024;

/// Mean output of one head over reference examples, `[len, head_dim]` row-major.
pub fn head_mean<T: Float>(
    params: &TransformerParams<T>,
    layer: usize,
    head: usize,
    references: &[EncodedExample],
) -> Result<Vec<f64>> {
    AblationSpec::zero(layer, head).validate(&params.config, 1)?;
    let first = references
        .first()
        .ok_or_else(|| Error::Config("mean ablation needs reference examples".into()))?;
    let (h, dh, len) = (params.config.n_heads, params.config.head_dim(), first.tokens.len());
    let mut sum = vec![0.0; len * dh];
    for chunk in references.chunks(EVAL_CHUNK) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        let mut tape = Tape::new();
        let fwd = forward_on_tape(params, &mut tape, &seqs, false, ForwardOptions::default())?;
        let out = tape.value(fwd.head_outputs[layer]).data();
        for b in 0..chunk.len() {
            let off = (b * h + head) * len * dh;
            for (s, x) in sum.iter_mut().zip(&out[off..off + len * dh]) {
                *s += x.to_f64().unwrap_or(f64::NAN);
            }
        }
    }
    sum.iter_mut().for_each(|s| *s /= references.len() as f64);
    Ok(sum)
}

/// Ablation spec for `mode`, computing the mean from freshly sampled references.
pub fn ablation_for<T: Float, R: Rng + ?Sized>(
    params: &TransformerParams<T>,
    spec: &TaskSpec,
    layer: usize,
    head: usize,
    mode: AblationMode,
    rng: &mut R,
) -> Result<AblationSpec> {
    let mean = match mode {
        AblationMode::Zero => None,
        AblationMode::Mean => {
            let refs: Vec<EncodedExample> =
                (0..MEAN_REFERENCE_SIZE).map(|_| sample_example(spec, rng)).collect();
            Some(head_mean(params, layer, head, &refs)?)
        }
    };
    let ab = AblationSpec {
        layer,
        head,
        mode,
        mean,
    };
    ab.validate(&params.config, spec.seq_len())?;
    Ok(ab)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtaskDelta {
    pub subtask: Subtask,
    pub baseline: f64,
    pub ablated: f64,
}

impl SubtaskDelta {
    pub fn delta(&self) -> f64 {
        self.ablated - self.baseline
    }
}

/// Per-subtask probe loss (mean over digits) with and without `ablation`.
pub fn ablate_and_eval<T: Float>(
    params: &TransformerParams<T>,
    spec: &TaskSpec,
    ablation: &AblationSpec,
    probes: &ProbeSets,
) -> Result<Vec<SubtaskDelta>> {
    ablation.validate(&params.config, spec.seq_len())?;
    let base = probes.cell_losses(params, spec, None)?;
    let hit = probes.cell_losses(params, spec, Some(ablation))?;
    let mut acc: BTreeMap<Subtask, (f64, f64, usize)> = BTreeMap::new();
    for (((s, _, _), b), a) in probes.cells.iter().zip(&base).zip(&hit) {
        let e = acc.entry(*s).or_default();
        e.0 += b;
        e.1 += a;
        e.2 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(subtask, (b, a, n))| SubtaskDelta {
            subtask,
            baseline: b / n as f64,
            ablated: a / n as f64,
        })
        .collect())
}

pub fn deltas_to_csv(rows: &[SubtaskDelta]) -> String {
    let mut out = String::from("subtask,baseline,ablated,delta\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            r.subtask.name(),
            r.baseline,
            r.ablated,
            r.delta()
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    LeftToRight,
    RightToLeft,
    Static,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::LeftToRight => "left-to-right",
            Direction::RightToLeft => "right-to-left",
            Direction::Static => "static",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadProfile {
    pub layer: usize,
    pub head: usize,
    /// Argmax multiplicand column minus the column of the same significance.
    pub dominant_offset: i64,
    pub agreement: f64,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaircaseProfile {
    pub heads: Vec<HeadProfile>,
}

impl StaircaseProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,dominant_offset,agreement,direction\n");
        for h in &self.heads {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{}",
                h.layer,
                h.head,
                h.dominant_offset,
                h.agreement,
                h.direction.name()
            );
        }
        out
    }
}

/// Staircase statistics from attention captured on full answer sequences.
///
/// Row `eq + slot` produces the answer digit at emission `slot`; its aligned
/// multiplicand column is the one holding the digit of equal significance.
pub fn staircase_from_records(spec: &TaskSpec, records: &[Vec<AttentionRecord>]) -> StaircaseProfile {
    let n = spec.n_digits as i64;
    let eq = spec.equals_position();
    let mut per_head: BTreeMap<(usize, usize), (Vec<i64>, i64)> = BTreeMap::new();
    for seq in records {
        for rec in seq {
            let entry = per_head.entry((rec.layer, rec.head)).or_default();
            let mut prev: Option<i64> = None;
            for slot in 0..spec.answer_len() {
                let row = eq + slot;
                if row >= rec.len {
                    break;
                }
                let col = (0..spec.n_digits)
                    .fold(0, |best, c| if rec.at(row, c) > rec.at(row, best) { c } else { best })
                    as i64;
                let aligned = n - 1 - spec.digit_at_slot(slot) as i64;
                entry.0.push(col - aligned);
                if let Some(p) = prev {
                    entry.1 += (col - p).signum();
                }
                prev = Some(col);
            }
        }
    }
    let heads = per_head
        .into_iter()
        .map(|((layer, head), (offsets, drift))| {
            let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
            for &o in &offsets {
                *counts.entry(o).or_default() += 1;
            }
            // most frequent offset, smallest magnitude on ties
            let (dominant_offset, hits) = counts
                .iter()
                .max_by_key(|&(&o, &c)| (c, std::cmp::Reverse(o.abs()), std::cmp::Reverse(o)))
                .map(|(&o, &c)| (o, c))
                .unwrap_or((0, 0));
            HeadProfile {
                layer,
                head,
                dominant_offset,
                agreement: if offsets.is_empty() {
                    0.0
                } else {
                    hits as f64 / offsets.len() as f64
                },
                direction: match drift.signum() {
                    1 => Direction::LeftToRight,
                    -1 => Direction::RightToLeft,
                    _ => Direction::Static,
                },
            }
        })
        .collect();
    StaircaseProfile { heads }
}

/// Captures attention on the given problems (teacher-forced full sequences)
/// and summarizes each head's staircase.
pub fn attention_profile<T: Float>(
    params: &TransformerParams<T>,
    spec: &TaskSpec,
    examples: &[EncodedExample],
) -> Result<StaircaseProfile> {
    if examples.is_empty() {
        return Err(Error::Config("attention profile needs at least one question".into()));
    }
    check_layout(&params.config, spec)?;
    let mut records = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_CHUNK) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        let mut tape = Tape::new();
        let fwd = forward_on_tape(
            params,
            &mut tape,
            &seqs,
            false,
            ForwardOptions {
                capture_attention: true,
                ablation: None,
            },
        )?;
        records.extend(fwd.attention);
    }
    Ok(staircase_from_records(spec, &records))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Heads,
    Depth,
    Proportion,
    RefinementGrid,
    MaskGrid,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Heads => "heads",
            SweepKind::Depth => "depth",
            SweepKind::Proportion => "proportion",
            SweepKind::RefinementGrid => "refinement-grid",
            SweepKind::MaskGrid => "mask-grid",
        }
    }
}

/// One training run of a sweep; `row`/`column` place it in the output table.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub row: String,
    pub column: String,
    pub model: ModelConfig,
    pub spec: TaskSpec,
    pub train: TrainConfig,
    /// Masks to evaluate on; empty means the training spec's own mask.
    pub eval_masks: Vec<MultiplierMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPlan {
    pub kind: SweepKind,
    pub cells: Vec<SweepCell>,
    pub eval_count: usize,
    pub eval_seed: u64,
}

pub const DEFAULT_PROPORTIONS: [f64; 10] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const DEFAULT_DEPTHS: [usize; 5] = [1, 2, 4, 8, 12];
pub const REFINEMENT_DEPTH: usize = 8;
pub const REFINEMENT_PROPORTION: f64 = 0.5;

/// Shared inputs for building sweep plans.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepBase {
    pub n_digits: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub eval_count: usize,
    pub eval_seed: u64,
}

impl SweepBase {
    fn cell(&self, row: String, column: String, layers: usize, heads: usize, spec: TaskSpec, seed: u64) -> SweepCell {
        SweepCell {
            row,
            column,
            model: ModelConfig::new(layers, heads, self.d_model, spec.seq_len()),
            spec,
            train: TrainConfig {
                seed,
                ..self.train.clone()
            },
            eval_masks: Vec::new(),
        }
    }

    fn plan(&self, kind: SweepKind, cells: Vec<SweepCell>) -> SweepPlan {
        SweepPlan {
            kind,
            cells,
            eval_count: self.eval_count,
            eval_seed: self.eval_seed,
        }
    }

    fn format(reversed: bool) -> &'static str {
        if reversed {
            "reversed"
        } else {
            "ordinal"
        }
    }

    /// 1-layer m×u, ordinal and reversed, one column per head count.
    pub fn heads(&self, heads: &[usize]) -> SweepPlan {
        let mut cells = Vec::new();
        for reversed in [false, true] {
            for &h in heads {
                for &seed in &self.seeds {
                    let spec = TaskSpec::mxu(self.n_digits, reversed);
                    cells.push(self.cell(Self::format(reversed).into(), h.to_string(), 1, h, spec, seed));
                }
            }
        }
        self.plan(SweepKind::Heads, cells)
    }

    /// Ordinal m×u and m×m at each depth.
    pub fn depth(&self, depths: &[usize]) -> SweepPlan {
        let mut cells = Vec::new();
        for kind in [TaskKind::Mxu, TaskKind::Mxm] {
            for &layers in depths {
                for &seed in &self.seeds {
                    let spec = match kind {
                        TaskKind::Mxu => TaskSpec::mxu(self.n_digits, false),
                        TaskKind::Mxm => TaskSpec::mxm(self.n_digits, false),
                    };
                    cells.push(self.cell(kind.to_string(), layers.to_string(), layers, self.n_heads, spec, seed));
                }
            }
        }
        self.plan(SweepKind::Depth, cells)
    }

    /// Reversed m×m at the refinement depth for each simple-sample proportion.
    pub fn proportion(&self, proportions: &[f64]) -> SweepPlan {
        let mut cells = Vec::new();
        for &p in proportions {
            for &seed in &self.seeds {
                let spec = TaskSpec::mxm(self.n_digits, true).with_simple_proportion(p);
                cells.push(self.cell("exact".into(), format!("{p:.2}"), REFINEMENT_DEPTH, self.n_heads, spec, seed));
            }
        }
        self.plan(SweepKind::Proportion, cells)
    }

    /// {reverse} × {depth} × {sample} on m×m; the depth refinement uses `depth` layers.
    pub fn refinement(&self, depth: usize) -> SweepPlan {
        let mut cells = Vec::new();
        for (reversed, deep, sample) in refinement_combos() {
            for &seed in &self.seeds {
                let spec = TaskSpec::mxm(self.n_digits, reversed)
                    .with_simple_proportion(if sample { REFINEMENT_PROPORTION } else { 0.0 });
                let layers = if deep { depth } else { 1 };
                cells.push(self.cell(refinement_label(reversed, deep, sample), "exact".into(), layers, self.n_heads, spec, seed));
            }
        }
        self.plan(SweepKind::RefinementGrid, cells)
    }

    /// One full-refinement m×m model per seed, evaluated on every mask.
    pub fn masks(&self, masks: &[MultiplierMask]) -> SweepPlan {
        let cells = self
            .seeds
            .iter()
            .map(|&seed| {
                let spec = TaskSpec::mxm(self.n_digits, true).with_simple_proportion(REFINEMENT_PROPORTION);
                let mut c = self.cell("all".into(), "exact".into(), REFINEMENT_DEPTH, self.n_heads, spec, seed);
                c.eval_masks = masks.to_vec();
                c
            })
            .collect();
        self.plan(SweepKind::MaskGrid, cells)
    }
}

/// `(reversed, deep, sample)` rows of the refinement table, baseline first.
/// Reverse+sample without depth is not part of the grid.
pub fn refinement_combos() -> Vec<(bool, bool, bool)> {
    vec![
        (false, false, false),
        (true, false, false),
        (false, true, false),
        (false, false, true),
        (true, true, false),
        (false, true, true),
        (true, true, true),
    ]
}

pub fn refinement_label(reversed: bool, deep: bool, sample: bool) -> String {
    let parts: Vec<&str> = [(deep, "depth"), (reversed, "reverse"), (sample, "sample")]
        .iter()
        .filter(|(on, _)| *on)
        .map(|&(_, name)| name)
        .collect();
    if parts.is_empty() {
        "baseline".into()
    } else {
        format!("baseline+{}", parts.join("+"))
    }
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub cell: SweepCell,
    pub outcome: std::result::Result<CellOutcome, String>,
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub report: EvalReport,
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct SweepTable {
    pub kind: SweepKind,
    pub results: Vec<SweepResult>,
}

/// Worker count from `MXLB_THREADS`, else the machine's parallelism.
pub fn thread_count() -> usize {
    std::env::var("MXLB_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn run_cell(cell: &SweepCell, eval_count: usize, eval_seed: u64) -> Result<CellOutcome> {
    let out = train(&cell.model, &cell.spec, &cell.train)?;
    let mut rng = seeded(eval_seed, 0);
    let mut report = evaluate(&out.params, &cell.spec, eval_count, &mut rng, &out.seen)?;
    for mask in &cell.eval_masks {
        let spec = cell.spec.clone().with_mask(mask.clone());
        // narrow masks can have fewer unseen problems than requested; score all of them
        let r = match evaluate(&out.params, &spec, eval_count, &mut seeded(eval_seed, 0), &out.seen) {
            Err(Error::Exhausted { available, .. }) if available > 0 => {
                evaluate(&out.params, &spec, available, &mut seeded(eval_seed, 0), &out.seen)?
            }
            r => r?,
        };
        report.per_mask.push(r);
    }
    Ok(CellOutcome {
        report,
        final_loss: out.log.final_entry().overall,
    })
}

/// Trains and evaluates every cell; a failing cell is recorded, not fatal.
pub fn sweep(plan: &SweepPlan) -> Result<SweepTable> {
    if plan.cells.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results = pool.install(|| {
        plan.cells
            .par_iter()
            .map(|cell| SweepResult {
                cell: cell.clone(),
                outcome: run_cell(cell, plan.eval_count, plan.eval_seed).map_err(|e| e.to_string()),
            })
            .collect()
    });
    Ok(SweepTable {
        kind: plan.kind,
        results,
    })
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[m]
    } else {
        (values[m - 1] + values[m]) / 2.0
    })
}

impl SweepTable {
    /// Median exact match (percent) per (row, column) over successful seeds.
    pub fn medians(&self) -> Vec<(String, String, Option<f64>)> {
        let mut order: Vec<(String, String)> = Vec::new();
        let mut vals: HashMap<(String, String), Vec<f64>> = HashMap::new();
        for r in &self.results {
            let key = (r.cell.row.clone(), r.cell.column.clone());
            if !order.contains(&key) {
                order.push(key.clone());
            }
            let v = vals.entry(key).or_default();
            if let Ok(o) = &r.outcome {
                v.push(100.0 * o.report.exact);
            }
        }
        order
            .into_iter()
            .map(|k| {
                let m = median(vals.get_mut(&k).map(|v| v.as_mut_slice()).unwrap_or(&mut []));
                (k.0, k.1, m)
            })
            .collect()
    }

    /// Pivot table of medians (rows by setting, columns by grid value); failed cells print `NA`.
    pub fn to_csv(&self) -> String {
        if self.kind == SweepKind::MaskGrid {
            return self.mask_csv();
        }
        let cells = self.medians();
        let mut rows: Vec<&str> = Vec::new();
        let mut cols: Vec<&str> = Vec::new();
        for (r, c, _) in &cells {
            if !rows.contains(&r.as_str()) {
                rows.push(r);
            }
            if !cols.contains(&c.as_str()) {
                cols.push(c);
            }
        }
        let corner = match self.kind {
            SweepKind::Heads => "format\\heads",
            SweepKind::Depth => "task\\layers",
            SweepKind::Proportion => "metric\\proportion",
            _ => "setting",
        };
        let mut out = corner.to_string();
        for c in &cols {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for r in &rows {
            out.push_str(r);
            for c in &cols {
                let v = cells
                    .iter()
                    .find(|(rr, cc, _)| rr == r && cc == c)
                    .and_then(|x| x.2);
                match v {
                    Some(v) => {
                        let _ = write!(out, ",{v:.2}");
                    }
                    None => out.push_str(",NA"),
                }
            }
            out.push('\n');
        }
        out
    }

    fn mask_csv(&self) -> String {
        let Some(first) = self.results.first() else {
            return String::new();
        };
        let n_ans = first.cell.spec.answer_len();
        let mut out = format!("mask,{}\n", EvalReport::csv_header(n_ans));
        for (i, mask) in first.cell.eval_masks.iter().enumerate() {
            // median per column over seeds
            let reports: Vec<&EvalReport> = self
                .results
                .iter()
                .filter_map(|r| r.outcome.as_ref().ok())
                .filter_map(|o| o.report.per_mask.get(i))
                .collect();
            out.push_str(mask.as_str());
            if reports.is_empty() {
                for _ in 0..=n_ans {
                    out.push_str(",NA");
                }
            } else {
                let mut exact: Vec<f64> = reports.iter().map(|r| r.exact).collect();
                let _ = write!(out, ",{:.2}", 100.0 * median(&mut exact).unwrap_or(0.0));
                for d in (0..n_ans).rev() {
                    let mut v: Vec<f64> = reports.iter().map(|r| r.per_digit[d]).collect();
                    let _ = write!(out, ",{:.2}", 100.0 * median(&mut v).unwrap_or(0.0));
                }
            }
            out.push('\n');
        }
        out
    }

    /// One line per run: row, column, seed, exact, final loss, error.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("row,column,seed,exact,final_loss,error\n");
        for r in &self.results {
            let _ = match &r.outcome {
                Ok(o) => writeln!(
                    out,
                    "{},{},{},{:.2},{:.6},",
                    r.cell.row,
                    r.cell.column,
                    r.cell.train.seed,
                    100.0 * o.report.exact,
                    o.final_loss
                ),
                Err(e) => writeln!(
                    out,
                    "{},{},{},NA,NA,{}",
                    r.cell.row,
                    r.cell.column,
                    r.cell.train.seed,
                    e.replace([',', '\n'], ";")
                ),
            };
        }
        out
    }
}

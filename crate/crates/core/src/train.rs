//! Adam training loop with per-digit and per-subtask loss instrumentation.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_params, loss, loss_and_grad, ModelConfig, TransformerParams};
use crate::oracle::{carry_chain, classify_position, column_chain, digits_msb_first, CarryChain, Subtask};
use crate::taskgen::{sample_example, EncodedExample, TaskKind, TaskSpec};
use crate::tensor::{Float, Tensor};

/// Independent random streams derived from one seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const PROBE: u64 = 3;
    pub const EVAL: u64 = 4;
}

/// ChaCha8 generator for one named stream of `seed`.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Examples per (subtask, digit) probe cell.
    pub probe_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub schedule: LrSchedule,
}

/// Learning-rate multiplier over the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup over `warmup` steps, then cosine decay to zero.
    WarmupCosine { warmup: usize },
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 64,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            log_every: 100,
            probe_size: 512,
            grad_clip: Some(1.0),
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 || self.probe_size == 0 {
            return Err(Error::Config(
                "batch size, log interval and probe size must be positive".into(),
            ));
        }
        if self.iterations % self.log_every != 0 {
            return Err(Error::Config(format!(
                "log interval {} does not divide {} iterations",
                self.log_every, self.iterations
            )));
        }
        let positive = [self.learning_rate, self.epsilon];
        if positive.iter().any(|&x| !(x > 0.0 && x.is_finite()))
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        if let LrSchedule::WarmupCosine { warmup } = self.schedule {
            if warmup >= self.iterations.max(1) {
                return Err(Error::Config(format!(
                    "warmup of {warmup} steps leaves nothing of {} iterations",
                    self.iterations
                )));
            }
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for the update at zero-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::WarmupCosine { warmup } => {
                if step < warmup {
                    self.learning_rate * (step + 1) as f64 / warmup as f64
                } else {
                    let t = (step - warmup) as f64 / (self.iterations - warmup) as f64;
                    self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
                }
            }
        }
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update over every tensor.
pub fn adam_step<T: Float>(
    params: &mut [Tensor<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if grads[i].len() != p.len() || state.m[i].len() != p.len() || state.v[i].len() != p.len() {
            return Err(Error::dim("adam_step", p.shape(), &[grads[i].len()]));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let step_size = T::from_f64(lr * c2.sqrt() / c1);
    let eps_hat = T::from_f64(config.epsilon * c2.sqrt());
    let (b1, b2) = (T::from_f64(b1), T::from_f64(b2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            *w = *w - step_size * m[j] / (v[j].sqrt() + eps_hat);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Float>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| {
            let x = g.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g = *g * s);
    }
    norm
}

/// Schoolbook chain behind an example: digit-times-digit for m×u, column sums for m×m.
pub fn example_chain(spec: &TaskSpec, ex: &EncodedExample) -> CarryChain {
    match spec.kind {
        TaskKind::Mxu => carry_chain(
            &digits_msb_first(ex.multiplicand, spec.n_digits),
            ex.multiplier as u8,
        ),
        TaskKind::Mxm => column_chain(ex.multiplicand, ex.multiplier, spec.n_digits),
    }
    .expect("encoded example holds valid operands")
}

/// Frozen probe examples, one cell per (subtask, answer digit).
#[derive(Clone, Debug)]
pub struct ProbeSets {
    pub pool: Vec<EncodedExample>,
    /// `(subtask, digit, indices into pool)`; only non-empty cells are kept.
    pub cells: Vec<(Subtask, usize, Vec<usize>)>,
    /// Uniform sample used for the overall and per-digit curves.
    pub monitor: Vec<EncodedExample>,
}

pub const PROBE_ATTEMPTS: usize = 1_000_000;

impl ProbeSets {
    /// Samples until every reachable cell holds `per_cell` examples, giving up
    /// after [`PROBE_ATTEMPTS`] draws. Reserved keys never exceed a tenth of the
    /// problem space so training can always avoid them.
    pub fn build<R: Rng + ?Sized>(
        spec: &TaskSpec,
        per_cell: usize,
        monitor_size: usize,
        rng: &mut R,
    ) -> Self {
        let n_ans = spec.answer_len();
        let budget = (spec.problem_space() / 10).max(1) as usize;
        let mut keys = HashSet::new();
        let mut monitor = Vec::with_capacity(monitor_size);
        let mut attempts = 0;
        while monitor.len() < monitor_size && attempts < PROBE_ATTEMPTS && keys.len() < budget {
            attempts += 1;
            let ex = sample_example(spec, rng);
            if keys.insert(spec.key(ex.multiplicand, ex.multiplier)) {
                monitor.push(ex);
            }
        }

        let cell_index = |s: Subtask, digit: usize| digit * Subtask::ALL.len() + s as usize;
        let mut cells: Vec<Vec<usize>> = vec![Vec::new(); n_ans * Subtask::ALL.len()];
        let mut pool = Vec::new();
        let mut attempts = 0;
        let full = |cells: &Vec<Vec<usize>>, reachable: &[bool]| {
            cells
                .iter()
                .zip(reachable)
                .all(|(c, &r)| !r || c.len() >= per_cell)
        };
        let reachable = reachable_cells(spec);
        while attempts < PROBE_ATTEMPTS && keys.len() < budget && !full(&cells, &reachable) {
            attempts += 1;
            let ex = sample_example(spec, rng);
            let chain = example_chain(spec, &ex);
            let wanted: Vec<usize> = (0..n_ans)
                .map(|i| cell_index(classify_position(&chain, i).expect("in range").subtask, i))
                .filter(|&c| cells[c].len() < per_cell)
                .collect();
            if wanted.is_empty() || !keys.insert(spec.key(ex.multiplicand, ex.multiplier)) {
                continue;
            }
            for c in wanted {
                cells[c].push(pool.len());
            }
            pool.push(ex);
        }
        let cells = (0..n_ans)
            .flat_map(|digit| Subtask::ALL.into_iter().map(move |s| (s, digit)))
            .filter_map(|(s, digit)| {
                let ix = std::mem::take(&mut cells[cell_index(s, digit)]);
                (!ix.is_empty()).then_some((s, digit, ix))
            })
            .collect();
        ProbeSets {
            pool,
            cells,
            monitor,
        }
    }

    pub fn keys(&self, spec: &TaskSpec) -> HashSet<u64> {
        self.pool
            .iter()
            .chain(&self.monitor)
            .map(|e| spec.key(e.multiplicand, e.multiplier))
            .collect()
    }

    /// Mean loss of each cell at its own digit, aligned with `self.cells`.
    pub fn cell_losses<T: Float>(
        &self,
        params: &TransformerParams<T>,
        spec: &TaskSpec,
        ablation: Option<&crate::model::AblationSpec>,
    ) -> Result<Vec<f64>> {
        let per = per_position_losses(params, &self.pool, ablation)?;
        let eq = spec.equals_position();
        Ok(self
            .cells
            .iter()
            .map(|(_, digit, ix)| {
                let pos = eq + spec.slot_of_digit(*digit);
                ix.iter().map(|&i| per[i][pos]).sum::<f64>() / ix.len() as f64
            })
            .collect())
    }
}

/// Cells that can ever be populated: A0 never has a carry in, the top digit is carry-only.
fn reachable_cells(spec: &TaskSpec) -> Vec<bool> {
    let n_ans = spec.answer_len();
    (0..n_ans)
        .flat_map(|digit| {
            Subtask::ALL.into_iter().map(move |s| match s {
                Subtask::CarryOnly => digit == n_ans - 1,
                _ if digit == n_ans - 1 => false,
                Subtask::Uc | Subtask::Ucfc => digit > 0,
                _ => true,
            })
        })
        .collect()
}

pub const EVAL_CHUNK: usize = 256;

/// Forward-only per-position losses for arbitrarily many examples of one length.
pub fn per_position_losses<T: Float>(
    params: &TransformerParams<T>,
    examples: &[EncodedExample],
    ablation: Option<&crate::model::AblationSpec>,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_CHUNK) {
        let l = loss(params, chunk, ablation)?;
        out.extend(
            l.per_position
                .into_iter()
                .map(|row| row.into_iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()),
        );
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub overall: f64,
    /// Value order, `A0..A(n_ans-1)`.
    pub per_digit: Vec<f64>,
    /// Aligned with [`RunLog::cells`].
    pub subtask: Vec<f64>,
    pub simple_proportion: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub answer_len: usize,
    pub cells: Vec<(Subtask, usize)>,
    pub entries: Vec<LogEntry>,
}

impl RunLog {
    /// Mean over digits of one subtask's cell losses at `entry`.
    pub fn subtask_mean(&self, entry: &LogEntry, subtask: Subtask) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .zip(&entry.subtask)
            .filter(|((s, _), _)| *s == subtask)
            .map(|(_, &v)| v)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn final_entry(&self) -> &LogEntry {
        self.entries.last().expect("run log has an initial entry")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,overall");
        for d in 0..self.answer_len {
            let _ = write!(out, ",A{d}");
        }
        for (s, d) in &self.cells {
            let _ = write!(out, ",{}_{d}", s.name());
        }
        out.push('\n');
        for e in &self.entries {
            let _ = write!(out, "{},{:.6}", e.iteration, e.overall);
            for v in e.per_digit.iter().chain(&e.subtask) {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// First logged iteration at which each subtask's mean loss drops below
/// `threshold`, sorted ascending; subtasks that never cross come last as `None`.
pub fn convergence_order(log: &RunLog, threshold: f64) -> Vec<(Subtask, Option<usize>)> {
    let mut order: Vec<(Subtask, Option<usize>)> = Subtask::ALL
        .into_iter()
        .filter(|&s| log.cells.iter().any(|(c, _)| *c == s))
        .map(|s| {
            let hit = log
                .entries
                .iter()
                .find(|e| log.subtask_mean(e, s).is_some_and(|m| m < threshold))
                .map(|e| e.iteration);
            (s, hit)
        })
        .collect();
    order.sort_by_key(|&(s, hit)| (hit.unwrap_or(usize::MAX), s));
    order
}

pub struct TrainOutcome {
    pub params: TransformerParams<f32>,
    pub log: RunLog,
    /// Keys of every training problem emitted.
    pub seen: HashSet<u64>,
    /// Keys of probe and monitor problems (disjoint from `seen`).
    pub reserved: HashSet<u64>,
}

fn build_probes(spec: &TaskSpec, config: &TrainConfig) -> ProbeSets {
    ProbeSets::build(
        spec,
        config.probe_size,
        4 * config.batch_size,
        &mut seeded(config.seed, stream::PROBE),
    )
}

/// Online training batches that skip reserved (probe) keys.
struct DataStream<'a> {
    rng: ChaCha8Rng,
    reserved: &'a HashSet<u64>,
}

impl<'a> DataStream<'a> {
    fn new(seed: u64, reserved: &'a HashSet<u64>) -> Self {
        DataStream {
            rng: seeded(seed, stream::DATA),
            reserved,
        }
    }

    fn fill(&mut self, spec: &TaskSpec, size: usize, batch: &mut Vec<EncodedExample>, seen: &mut HashSet<u64>) {
        batch.clear();
        while batch.len() < size {
            let ex = sample_example(spec, &mut self.rng);
            let key = spec.key(ex.multiplicand, ex.multiplier);
            if !self.reserved.contains(&key) {
                seen.insert(key);
                batch.push(ex);
            }
        }
    }
}

/// Replays the data stream of [`train`] without a model, returning the
/// training keys and the reserved probe keys of that run.
pub fn replay_keys(spec: &TaskSpec, config: &TrainConfig) -> Result<(HashSet<u64>, HashSet<u64>)> {
    spec.validate()?;
    config.validate()?;
    let reserved = build_probes(spec, config).keys(spec);
    let mut data = DataStream::new(config.seed, &reserved);
    let (mut seen, mut batch) = (HashSet::new(), Vec::new());
    for _ in 0..config.iterations {
        data.fill(spec, config.batch_size, &mut batch, &mut seen);
    }
    Ok((seen, reserved))
}

pub fn train(model: &ModelConfig, spec: &TaskSpec, config: &TrainConfig) -> Result<TrainOutcome> {
    model.validate()?;
    spec.validate()?;
    config.validate()?;
    if model.max_seq_len < spec.seq_len() {
        return Err(Error::Config(format!(
            "max_seq_len {} is shorter than the task's {} tokens",
            model.max_seq_len,
            spec.seq_len()
        )));
    }
    let start = Instant::now();
    let mut params: TransformerParams<f32> = init_params(model, seeded(config.seed, stream::INIT).gen())?;
    let probes = build_probes(spec, config);
    let reserved = probes.keys(spec);
    let mut data = DataStream::new(config.seed, &reserved);
    let mut seen = HashSet::new();
    let mut state = AdamState::new(&params.tensors);
    let mut log = RunLog {
        answer_len: spec.answer_len(),
        cells: probes.cells.iter().map(|(s, d, _)| (*s, *d)).collect(),
        entries: Vec::new(),
    };
    let record = |params: &TransformerParams<f32>, iteration: usize| -> Result<LogEntry> {
        let per = per_position_losses(params, &probes.monitor, None)?;
        let eq = spec.equals_position();
        let n_ans = spec.answer_len();
        let mut per_digit = vec![0.0; n_ans];
        for row in &per {
            for slot in 0..n_ans {
                per_digit[spec.digit_at_slot(slot)] += row[eq + slot];
            }
        }
        per_digit.iter_mut().for_each(|v| *v /= per.len() as f64);
        Ok(LogEntry {
            iteration,
            overall: per_digit.iter().sum::<f64>() / n_ans as f64,
            per_digit,
            subtask: probes.cell_losses(params, spec, None)?,
            simple_proportion: if spec.kind == TaskKind::Mxm {
                spec.simple_proportion
            } else {
                0.0
            },
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    };
    log.entries.push(record(&params, 0)?);

    let mut batch = Vec::with_capacity(config.batch_size);
    for it in 1..=config.iterations {
        data.fill(spec, config.batch_size, &mut batch, &mut seen);
        let (l, mut grads) = loss_and_grad(&params, &batch)?;
        if !l.loss.is_finite() {
            let mut snapshot = format!("batch loss {}", l.loss);
            if let Some(last) = log.entries.last() {
                let _ = write!(
                    snapshot,
                    "; last logged overall {:.6} at iteration {}",
                    last.overall, last.iteration
                );
            }
            let _ = write!(snapshot, "; parameters finite: {}", params.is_finite());
            if let Some(origin) = &l.nonfinite_origin {
                let _ = write!(snapshot, "; first overflow at {origin}");
            }
            return Err(Error::NonFiniteLoss {
                iteration: it,
                snapshot,
            });
        }
        if let Some(max) = config.grad_clip {
            clip_global_norm(&mut grads, max);
        }
        adam_step(&mut params.tensors, &grads, &mut state, config.lr_at(it - 1), config)?;
        if it % config.log_every == 0 {
            log.entries.push(record(&params, it)?);
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        seen,
        reserved,
    })
}

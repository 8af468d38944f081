use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mxlb_core::analysis::{
    self, ablate_and_eval, ablation_for, attention_profile, deltas_to_csv, evaluate, generate,
    SweepBase,
};
use mxlb_core::checkpoint::{self, write_atomic, RunConfig};
use mxlb_core::model::{forward, init_params, AblationMode, ModelConfig, TransformerParams};
use mxlb_core::oracle::{
    carry_chain, classify_position, column_chain, digits_msb_first, overlap_map, MultiplierMask,
};
use mxlb_core::render;
use mxlb_core::taskgen::{encode, parse_expression, sample_example, TaskKind, TaskSpec, Vocab};
use mxlb_core::train::{replay_keys, seeded, stream, train, LrSchedule, ProbeSets, TrainConfig};

mod manifest;

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "mxlb", version, about = "Train and dissect transformers on multi-digit multiplication")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a loss log
    Train(TrainArgs),
    /// Exact-match and per-digit accuracy on held-out problems
    Eval(EvalArgs),
    /// Attention heatmaps for one input
    Attn(AttnArgs),
    /// Per-subtask probe-loss change when one head is knocked out
    Ablate(AblateArgs),
    /// Train and evaluate a grid of configurations
    Sweep(SweepArgs),
    /// Exact arithmetic: carry chains, subtask labels, overlap maps
    Oracle {
        #[command(subcommand)]
        command: OracleCommand,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Mxu,
    Mxm,
}

#[derive(Args, Clone)]
struct TaskArgs {
    #[arg(long, value_enum, default_value = "mxu")]
    task: Task,
    #[arg(long, default_value_t = 5)]
    digits: usize,
    /// Emit answers least significant digit first
    #[arg(long)]
    reversed: bool,
    /// Fraction of single-digit multipliers (m×m only)
    #[arg(long, default_value_t = 0.0)]
    simple_prop: f64,
    /// Multiplier mask such as d000d (m×m only)
    #[arg(long)]
    mask: Option<String>,
}

impl TaskArgs {
    fn spec(&self) -> Result<TaskSpec> {
        let mut spec = match self.task {
            Task::Mxu => TaskSpec::mxu(self.digits, self.reversed),
            Task::Mxm => TaskSpec::mxm(self.digits, self.reversed),
        };
        if let Some(m) = &self.mask {
            ensure!(matches!(self.task, Task::Mxm), "--mask applies to --task mxm only");
            spec = spec.with_mask(MultiplierMask::parse(m)?);
        }
        if self.simple_prop != 0.0 {
            ensure!(matches!(self.task, Task::Mxm), "--simple-prop applies to --task mxm only");
            spec = spec.with_simple_proportion(self.simple_prop);
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_HEADS)]
    heads: usize,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_D_MODEL)]
    dmodel: usize,
}

impl ModelArgs {
    fn config(&self, spec: &TaskSpec) -> Result<ModelConfig> {
        let cfg = ModelConfig::new(self.layers, self.heads, self.dmodel, spec.seq_len());
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Adam learning rate [default: 1e-4]
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    /// Examples per (subtask, digit) probe cell
    #[arg(long, default_value_t = 512)]
    probe_size: usize,
    /// Warm up over this many steps, then cosine-decay to zero (off by default)
    #[arg(long)]
    warmup: Option<usize>,
}

impl OptimArgs {
    fn config(&self, seed: u64) -> Result<TrainConfig> {
        let defaults = TrainConfig::default();
        let cfg = TrainConfig {
            iterations: self.iters,
            batch_size: self.batch,
            learning_rate: self.lr.unwrap_or(defaults.learning_rate),
            seed,
            log_every: self.log_every.min(self.iters.max(1)),
            probe_size: self.probe_size,
            schedule: self
                .warmup
                .map_or(LrSchedule::Constant, |warmup| LrSchedule::WarmupCosine { warmup }),
            ..defaults
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path
    #[arg(long, default_value = "model.mxlb")]
    out: PathBuf,
    /// Loss-log CSV path
    #[arg(long, default_value = "train_log.csv")]
    log: PathBuf,
    /// Held-out problems scored after training
    #[arg(long, default_value_t = 10_000)]
    eval_num: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate on this multiplier mask instead of the training one
    #[arg(long)]
    mask: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    num: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate an m×m checkpoint on m×u problems in the m×m layout
    #[arg(long)]
    cross_task: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttnArgs {
    /// Trained model; without it a freshly initialized model is used
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Question such as "57257*2="; the answer is generated greedily
    #[arg(long)]
    input: String,
    #[arg(long, default_value = "attention.svg")]
    out: PathBuf,
    /// Also summarize staircase offsets over this many random problems
    #[arg(long, default_value_t = 0)]
    profile: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Zero,
    Mean,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Head to ablate; all heads in turn when omitted
    #[arg(long)]
    head: Option<usize>,
    #[arg(long, value_enum, default_value = "zero")]
    mode: Mode,
    #[arg(long, default_value_t = 512)]
    probe_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Heads,
    Depth,
    Proportion,
    RefinementGrid,
    MaskGrid,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    kind: Sweep,
    #[arg(long, default_value_t = 5)]
    digits: usize,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_D_MODEL)]
    dmodel: usize,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_HEADS)]
    heads: usize,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Comma-separated grid values (head counts, depths, proportions or masks)
    #[arg(long, value_delimiter = ',')]
    grid: Vec<String>,
    /// Layers used by the depth refinement
    #[arg(long, default_value_t = analysis::REFINEMENT_DEPTH)]
    depth: usize,
    #[arg(long, default_value_t = 10_000)]
    eval_num: usize,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    #[arg(long, default_value = "sweep")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// One row per answer digit, most significant first:
    /// digit, column value, carry in, subtask, answer digit
    Label { expression: String },
    /// Partial-product overlap per answer digit
    Overlap {
        #[arg(long)]
        mask: String,
        #[arg(long)]
        digits: usize,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    match cli.command {
        Command::Train(a) => cmd_train(a, start),
        Command::Eval(a) => cmd_eval(a, start),
        Command::Attn(a) => cmd_attn(a, start),
        Command::Ablate(a) => cmd_ablate(a, start),
        Command::Sweep(a) => cmd_sweep(a, start),
        Command::Oracle { command } => cmd_oracle(command, start),
    }
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_atomic(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(a: TrainArgs, start: Instant) -> Result<()> {
    let spec = a.task.spec()?;
    let model = a.model.config(&spec)?;
    let train_cfg = a.optim.config(a.seed)?;
    let lr_note = if a.optim.lr.is_some() { "" } else { " (default)" };
    println!("learning rate: {:e}{lr_note}", train_cfg.learning_rate);
    println!(
        "task: {} n={} {} | model: {} layer(s), {} head(s), d_model {} | {} iterations × batch {}",
        spec.kind,
        spec.n_digits,
        if spec.reversed_answer { "reversed" } else { "ordinal" },
        model.n_layers,
        model.n_heads,
        model.d_model,
        train_cfg.iterations,
        train_cfg.batch_size
    );
    let out = train(&model, &spec, &train_cfg)?;
    let config = RunConfig {
        model,
        task: spec.clone(),
        train: train_cfg,
    };
    write(&a.out, &checkpoint::encode(&config, &out.params)?)?;
    write(&a.log, out.log.to_csv().as_bytes())?;
    println!("final overall loss: {:.6}", out.log.final_entry().overall);
    if a.eval_num > 0 {
        let mut rng = seeded(a.seed, stream::EVAL);
        let report = evaluate(&out.params, &spec, a.eval_num, &mut rng, &out.seen)?;
        println!("held-out exact match: {:.2}% ({} problems)", 100.0 * report.exact, report.count);
    }
    RunManifest::new(vec![a.seed], start)
        .outputs([&a.out, &a.log])
        .write_beside(&a.out)
}

fn load(path: &Path) -> Result<(RunConfig, TransformerParams<f32>)> {
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_eval(a: EvalArgs, start: Instant) -> Result<()> {
    let (cfg, params) = load(&a.checkpoint)?;
    let mut spec = cfg.task.clone();
    if let Some(m) = &a.mask {
        ensure!(spec.kind == TaskKind::Mxm, "--mask applies to m×m checkpoints only");
        spec = spec.with_mask(MultiplierMask::parse(m)?);
    }
    let (seen, _) = replay_keys(&cfg.task, &cfg.train)?;
    let mut rng = seeded(a.seed, stream::EVAL);
    let report = if a.cross_task {
        analysis::cross_task_eval(
            &params,
            &TaskSpec::mxu(spec.n_digits, spec.reversed_answer),
            a.num,
            &mut rng,
            &HashSet::new(),
        )?
    } else {
        evaluate(&params, &spec, a.num, &mut rng, &seen)?
    };
    println!("overall: {:.2}%", 100.0 * report.exact);
    for (d, acc) in report.per_digit.iter().enumerate().rev() {
        println!("A{d}: {:.2}%", 100.0 * acc);
    }
    if report.malformed > 0 {
        println!("malformed outputs: {}", report.malformed);
    }
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(out) = &a.out {
        write(out, csv.as_bytes())?;
        RunManifest::new(vec![a.seed], start).outputs([out]).write_beside(out)?;
    }
    Ok(())
}

fn cmd_attn(a: AttnArgs, start: Instant) -> Result<()> {
    let (spec, params) = match &a.checkpoint {
        Some(p) => {
            let (cfg, params) = load(p)?;
            (cfg.task, params)
        }
        None => {
            let spec = a.task.spec()?;
            let model = a.model.config(&spec)?;
            (spec, init_params(&model, a.seed)?)
        }
    };
    let (m, u) = parse_expression(&a.input)?;
    let ex = encode(&spec, m, u)?;
    let question = ex.tokens[..=spec.equals_position()].to_vec();
    let answer = generate(&params, &spec, &[question.clone()], None)?.remove(0);
    let tokens: Vec<usize> = question.into_iter().chain(answer).collect();
    let (_, records) = forward(&params, &tokens, true, None)?;
    let records = records.unwrap_or_default();
    let rendered = Vocab::render(&tokens);
    println!("sequence: {rendered}");
    write(&a.out, render::attention_svg(&records, &rendered).as_bytes())?;
    let mut outputs = vec![a.out.clone()];
    if a.profile > 0 {
        let mut rng = seeded(a.seed, stream::EVAL);
        let sample: Vec<_> = (0..a.profile).map(|_| sample_example(&spec, &mut rng)).collect();
        let profile = attention_profile(&params, &spec, &sample)?;
        let csv = profile.to_csv();
        print!("{csv}");
        let path = a.out.with_extension("profile.csv");
        write(&path, csv.as_bytes())?;
        outputs.push(path);
    }
    RunManifest::new(vec![a.seed], start).outputs(&outputs).write_beside(&a.out)
}

fn cmd_ablate(a: AblateArgs, start: Instant) -> Result<()> {
    let (cfg, params) = load(&a.checkpoint)?;
    let spec = cfg.task;
    let heads: Vec<usize> = match a.head {
        Some(h) => vec![h],
        None => (0..params.config.n_heads).collect(),
    };
    let mode = match a.mode {
        Mode::Zero => AblationMode::Zero,
        Mode::Mean => AblationMode::Mean,
    };
    let probes = ProbeSets::build(&spec, a.probe_size, 0, &mut seeded(a.seed, stream::PROBE));
    let mut csv = String::new();
    for head in heads {
        let mut rng = seeded(a.seed, stream::EVAL);
        let ab = ablation_for(&params, &spec, a.layer, head, mode, &mut rng)?;
        let rows = ablate_and_eval(&params, &spec, &ab, &probes)?;
        println!("layer {} head {head}:", a.layer);
        for r in &rows {
            println!("  {:<10} {:+.4}", r.subtask.name(), r.delta());
        }
        let body = deltas_to_csv(&rows);
        if csv.is_empty() {
            csv.push_str("layer,head,");
            csv.push_str(body.lines().next().unwrap_or_default());
            csv.push('\n');
        }
        for line in body.lines().skip(1) {
            csv.push_str(&format!("{},{head},{line}\n", a.layer));
        }
    }
    if let Some(out) = &a.out {
        write(out, csv.as_bytes())?;
        RunManifest::new(vec![a.seed], start).outputs([out]).write_beside(out)?;
    }
    Ok(())
}

fn parse_grid<T: std::str::FromStr>(values: &[String], default: Vec<T>) -> Result<Vec<T>> {
    if values.is_empty() {
        return Ok(default);
    }
    values
        .iter()
        .map(|v| v.trim().parse().map_err(|_| anyhow::anyhow!("bad grid value {v:?}")))
        .collect()
}

fn cmd_sweep(a: SweepArgs, start: Instant) -> Result<()> {
    ensure!(!a.seeds.is_empty(), "at least one seed is required");
    let base = SweepBase {
        n_digits: a.digits,
        d_model: a.dmodel,
        n_heads: a.heads,
        train: a.optim.config(a.seeds[0])?,
        seeds: a.seeds.clone(),
        eval_count: a.eval_num,
        eval_seed: a.eval_seed,
    };
    let plan = match a.kind {
        Sweep::Heads => base.heads(&parse_grid(&a.grid, vec![1, 2, 3, 4, 5, 6])?),
        Sweep::Depth => base.depth(&parse_grid(&a.grid, analysis::DEFAULT_DEPTHS.to_vec())?),
        Sweep::Proportion => {
            base.proportion(&parse_grid(&a.grid, analysis::DEFAULT_PROPORTIONS.to_vec())?)
        }
        Sweep::RefinementGrid => base.refinement(a.depth),
        Sweep::MaskGrid => {
            let masks: Vec<String> = if a.grid.is_empty() {
                default_masks(a.digits)
            } else {
                a.grid.clone()
            };
            let masks = masks
                .iter()
                .map(|m| MultiplierMask::parse(m))
                .collect::<mxlb_core::Result<Vec<_>>>()?;
            base.masks(&masks)
        }
    };
    for cell in &plan.cells {
        cell.model.validate()?;
        cell.spec.validate()?;
    }
    println!(
        "{} sweep: {} runs on {} worker(s)",
        plan.kind.name(),
        plan.cells.len(),
        analysis::thread_count()
    );
    let table = analysis::sweep(&plan)?;
    for r in &table.results {
        if let Err(e) = &r.outcome {
            eprintln!("cell {}/{} seed {} failed: {e}", r.cell.row, r.cell.column, r.cell.train.seed);
        }
    }
    let name = plan.kind.name();
    let summary = a.out_dir.join(format!("{name}.csv"));
    let runs = a.out_dir.join(format!("{name}_runs.csv"));
    let csv = table.to_csv();
    print!("{csv}");
    write(&summary, csv.as_bytes())?;
    write(&runs, table.runs_csv().as_bytes())?;
    let manifest = a.out_dir.join(format!("{name}.manifest.json"));
    RunManifest::new(a.seeds, start).outputs([&summary, &runs]).write_to(&manifest)
}

/// Masks with the free digit(s) moving from the bottom to the top, then all free.
fn default_masks(n: usize) -> Vec<String> {
    let mut v: Vec<String> = (0..n)
        .map(|j| {
            (0..n)
                .map(|i| if n - 1 - i == j { 'd' } else { '0' })
                .collect()
        })
        .collect();
    if n > 1 {
        v.push((0..n).map(|i| if i == 0 || i == n - 1 { 'd' } else { '0' }).collect());
    }
    v.push("d".repeat(n));
    v.dedup();
    v
}

fn cmd_oracle(c: OracleCommand, start: Instant) -> Result<()> {
    match c {
        OracleCommand::Label { expression } => {
            let (m, u) = parse_expression(&expression)?;
            let n = m.max(1).to_string().len();
            let chain = if u <= 9 {
                carry_chain(&digits_msb_first(m, n), u as u8)?
            } else {
                let width = n.max(u.to_string().len());
                column_chain(m, u, width)?
            };
            for i in (0..=chain.columns()).rev() {
                let label = classify_position(&chain, i)?;
                let raw = chain.raw.get(i).copied().unwrap_or(0);
                let cin = if i < chain.columns() {
                    chain.carry_in[i]
                } else {
                    chain.carry_out[i - 1]
                };
                println!("A{i},{raw},{cin},{},{}", label.subtask.name(), chain.answer[i]);
            }
            Ok(())
        }
        OracleCommand::Overlap { mask, digits, svg } => {
            let map = overlap_map(&mask, digits)?;
            let header: Vec<String> = (0..map.counts.len()).map(|d| format!("A{d}")).collect();
            let counts: Vec<String> = map.counts.iter().map(|c| c.to_string()).collect();
            println!("{}", header.join(" "));
            println!("{}", counts.join(" "));
            if let Some(path) = svg {
                write(&path, render::overlap_svg(&map, &mask).as_bytes())?;
                RunManifest::new(Vec::new(), start).outputs([&path]).write_beside(&path)?;
            }
            Ok(())
        }
    }
}

//! Decoder-only transformer: token plus learned positional embeddings,
//! causal multi-head self-attention and a ReLU feed-forward block per layer,
//! each wrapped in a residual connection (optionally pre-normed).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::taskgen::{EncodedExample, Vocab};
use crate::tensor::{Float, Mask, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub use_layer_norm: bool,
}

impl ModelConfig {
    /// Width divisible by every head count from 1 to 6.
    pub const DEFAULT_D_MODEL: usize = 120;
    pub const DEFAULT_HEADS: usize = 3;

    pub fn new(n_layers: usize, n_heads: usize, d_model: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_ff: 4 * d_model,
            vocab_size: Vocab::SIZE,
            max_seq_len,
            use_layer_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.n_layers),
            ("heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Names and shapes of every parameter tensor in declared order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![
            ("token_embedding".to_string(), vec![v, d]),
            ("position_embedding".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            if self.use_layer_norm {
                out.push((p("ln1.gain"), vec![d]));
                out.push((p("ln1.bias"), vec![d]));
            }
            for w in ["q", "k", "v", "o"] {
                out.push((p(&format!("w_{w}")), vec![d, d]));
                out.push((p(&format!("b_{w}")), vec![d]));
            }
            if self.use_layer_norm {
                out.push((p("ln2.gain"), vec![d]));
                out.push((p("ln2.bias"), vec![d]));
            }
            out.push((p("w_ff1"), vec![d, f]));
            out.push((p("b_ff1"), vec![f]));
            out.push((p("w_ff2"), vec![f, d]));
            out.push((p("b_ff2"), vec![d]));
        }
        if self.use_layer_norm {
            out.push(("final_ln.gain".to_string(), vec![d]));
            out.push(("final_ln.bias".to_string(), vec![d]));
        }
        out.push(("unembedding".to_string(), vec![d, v]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Positions of each parameter inside [`TransformerParams::tensors`].
#[derive(Clone, Copy, Debug)]
struct LayerSlots {
    ln1: Option<(usize, usize)>,
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    o: (usize, usize),
    ln2: Option<(usize, usize)>,
    ff1: (usize, usize),
    ff2: (usize, usize),
}

#[derive(Clone, Debug)]
struct Slots {
    layers: Vec<LayerSlots>,
    final_ln: Option<(usize, usize)>,
    unembedding: usize,
}

impl Slots {
    fn new(config: &ModelConfig) -> Self {
        let mut next = 2;
        let mut pair = || {
            next += 2;
            (next - 2, next - 1)
        };
        let ln = config.use_layer_norm;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let ln1 = ln.then(&mut pair);
            let (q, k, v, o) = (pair(), pair(), pair(), pair());
            let ln2 = ln.then(&mut pair);
            let (ff1, ff2) = (pair(), pair());
            layers.push(LayerSlots {
                ln1,
                q,
                k,
                v,
                o,
                ln2,
                ff1,
                ff2,
            });
        }
        let final_ln = ln.then(&mut pair);
        let unembedding = pair().0;
        Slots {
            layers,
            final_ln,
            unembedding,
        }
    }
}

/// Every learned tensor of the model in [`ModelConfig::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams<T> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Float> TransformerParams<T> {
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(TransformerParams { config, tensors })
    }

    pub fn cast<U: Float>(&self) -> TransformerParams<U> {
        TransformerParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// Output-projection rows fed by `head` in `layer`, i.e. `w_o[head*dh..(head+1)*dh, :]`.
    pub fn output_projection_block(&self, layer: usize, head: usize) -> &[T] {
        let slots = Slots::new(&self.config);
        let dh = self.config.head_dim();
        let d = self.config.d_model;
        let w = &self.tensors[slots.layers[layer].o.0];
        &w.data()[head * dh * d..(head + 1) * dh * d]
    }

    pub fn output_projection_block_mut(&mut self, layer: usize, head: usize) -> &mut [T] {
        let slots = Slots::new(&self.config);
        let dh = self.config.head_dim();
        let d = self.config.d_model;
        let w = &mut self.tensors[slots.layers[layer].o.0];
        &mut w.data_mut()[head * dh * d..(head + 1) * dh * d]
    }
}

/// Weights ~ N(0, 0.02²), biases zero, norm gains one. Deterministic in `seed`.
pub fn init_params<T: Float>(config: &ModelConfig, seed: u64) -> Result<TransformerParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let tensors = config
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            if name.ends_with(".gain") {
                Tensor::full(&shape, T::one())
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let data = (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect();
                Tensor::from_vec(&shape, data).expect("layout shape")
            }
        })
        .collect();
    TransformerParams::from_tensors(config.clone(), tensors)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    Zero,
    Mean,
}

/// Replaces one head's attention output before the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationSpec {
    pub layer: usize,
    pub head: usize,
    pub mode: AblationMode,
    /// For [`AblationMode::Mean`]: the head's mean output, `[seq_len, head_dim]` row-major.
    /// Only the first `len` rows are used on shorter inputs.
    pub mean: Option<Vec<f64>>,
}

impl AblationSpec {
    pub fn zero(layer: usize, head: usize) -> Self {
        AblationSpec {
            layer,
            head,
            mode: AblationMode::Zero,
            mean: None,
        }
    }

    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        if self.layer >= config.n_layers || self.head >= config.n_heads {
            return Err(Error::Config(format!(
                "ablation target layer {} head {} outside {} layers × {} heads",
                self.layer, self.head, config.n_layers, config.n_heads
            )));
        }
        if self.mode == AblationMode::Mean {
            // a longer mean also serves causal prefixes of the sequence
            let dh = config.head_dim();
            match &self.mean {
                Some(m) if m.len() >= seq_len * dh && m.len() % dh == 0 => {}
                _ => {
                    return Err(Error::Config(format!(
                        "mean ablation needs a [len >= {seq_len}, {dh}] mean output"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Post-softmax attention weights of one head for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub len: usize,
    /// `[len, len]` row-major; row `i` is the distribution of query `i`.
    pub weights: Vec<f64>,
}

impl AttentionRecord {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.len + col]
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub capture_attention: bool,
    pub ablation: Option<&'a AblationSpec>,
}

/// Result of a batched forward pass recorded on a tape.
pub struct Forward {
    /// `[batch·len, vocab]`.
    pub logits: Var,
    /// Parameter leaves in layout order.
    pub params: Vec<Var>,
    /// Per-layer head outputs before merging, `[batch, heads, len, head_dim]`.
    pub head_outputs: Vec<Var>,
    /// Per-layer feed-forward pre-activations (ReLU inputs), `[batch·len, d_ff]`.
    pub ff_preactivations: Vec<Var>,
    /// `attention[b]` holds every (layer, head) record for sequence `b` when captured.
    pub attention: Vec<Vec<AttentionRecord>>,
}

fn check_tokens(config: &ModelConfig, batch: &[&[usize]]) -> Result<usize> {
    let len = batch
        .first()
        .map(|s| s.len())
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    if len == 0 || batch.iter().any(|s| s.len() != len) {
        return Err(Error::Contract("batch sequences must share one non-zero length".into()));
    }
    if len > config.max_seq_len {
        return Err(Error::Config(format!(
            "sequence of length {len} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    for s in batch {
        if let Some(&id) = s.iter().find(|&&t| t >= config.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                vocab: config.vocab_size,
            });
        }
    }
    Ok(len)
}

/// Records the forward pass of equal-length sequences on `tape`.
///
/// Parameters are added as leaves that require gradients when `trainable`.
pub fn forward_on_tape<T: Float>(
    params: &TransformerParams<T>,
    tape: &mut Tape<T>,
    batch: &[&[usize]],
    trainable: bool,
    options: ForwardOptions<'_>,
) -> Result<Forward> {
    let cfg = &params.config;
    let len = check_tokens(cfg, batch)?;
    if let Some(ab) = options.ablation {
        ab.validate(cfg, len)?;
    }
    let slots = Slots::new(cfg);
    let pv: Vec<Var> = params
        .tensors
        .iter()
        .map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let (b, d, h, dh) = (batch.len(), cfg.d_model, cfg.n_heads, cfg.head_dim());
    let rows = b * len;

    let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
    let tok = tape.embedding_gather(pv[0], &ids)?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.embedding_gather(pv[1], &positions)?;
    let tok = tape.reshape(tok, &[b, len, d])?;
    let x = tape.add(tok, pos)?;
    let mut x = tape.reshape(x, &[rows, d])?;

    let causal = Mask::causal(len);
    let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(cfg.n_layers);
    let mut ff_preactivations = Vec::with_capacity(cfg.n_layers);
    let mut attention: Vec<Vec<AttentionRecord>> = vec![Vec::new(); b];

    for (li, ls) in slots.layers.iter().enumerate() {
        let hin = match ls.ln1 {
            Some((g, bias)) => tape.layer_norm(x, pv[g], pv[bias])?,
            None => x,
        };
        let mut split = |w: (usize, usize)| -> Result<Var> {
            let p = tape.matmul(hin, pv[w.0])?;
            let p = tape.add_bias(p, pv[w.1])?;
            let p = tape.reshape(p, &[b, len, h, dh])?;
            let p = tape.swap_axes12(p)?;
            tape.reshape(p, &[b * h, len, dh])
        };
        let q = split(ls.q)?;
        let k = split(ls.k)?;
        let v = split(ls.v)?;
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, inv_sqrt)?;
        let attn = tape.softmax_rows(scores, Some(&causal))?;
        if options.capture_attention {
            let w = tape.value(attn).data();
            for (bi, recs) in attention.iter_mut().enumerate() {
                for hi in 0..h {
                    let off = (bi * h + hi) * len * len;
                    recs.push(AttentionRecord {
                        layer: li,
                        head: hi,
                        len,
                        weights: w[off..off + len * len]
                            .iter()
                            .map(|x| x.to_f64().unwrap_or(f64::NAN))
                            .collect(),
                    });
                }
            }
        }
        let ctx = tape.batch_matmul(attn, v, false)?;
        let mut ctx = tape.reshape(ctx, &[b, h, len, dh])?;
        if let Some(ab) = options.ablation.filter(|a| a.layer == li) {
            ctx = ablate(tape, ctx, ab, h, len, dh)?;
        }
        head_outputs.push(ctx);
        let merged = tape.swap_axes12(ctx)?;
        let merged = tape.reshape(merged, &[rows, d])?;
        let attn_out = tape.matmul(merged, pv[ls.o.0])?;
        let attn_out = tape.add_bias(attn_out, pv[ls.o.1])?;
        x = tape.add(x, attn_out)?;

        let hin = match ls.ln2 {
            Some((g, bias)) => tape.layer_norm(x, pv[g], pv[bias])?,
            None => x,
        };
        let f = tape.matmul(hin, pv[ls.ff1.0])?;
        let f = tape.add_bias(f, pv[ls.ff1.1])?;
        ff_preactivations.push(f);
        let f = tape.relu(f)?;
        let f = tape.matmul(f, pv[ls.ff2.0])?;
        let f = tape.add_bias(f, pv[ls.ff2.1])?;
        x = tape.add(x, f)?;
    }
    if let Some((g, bias)) = slots.final_ln {
        x = tape.layer_norm(x, pv[g], pv[bias])?;
    }
    let logits = tape.matmul(x, pv[slots.unembedding])?;
    Ok(Forward {
        logits,
        params: pv,
        head_outputs,
        ff_preactivations,
        attention,
    })
}

fn ablate<T: Float>(
    tape: &mut Tape<T>,
    ctx: Var,
    ab: &AblationSpec,
    heads: usize,
    len: usize,
    dh: usize,
) -> Result<Var> {
    let block = len * dh;
    let mut keep = vec![T::one(); heads * block];
    keep[ab.head * block..(ab.head + 1) * block].fill(T::zero());
    let keep = tape.constant(Tensor::from_vec(&[heads, len, dh], keep)?);
    let kept = tape.mul(ctx, keep)?;
    match (ab.mode, &ab.mean) {
        (AblationMode::Mean, Some(mean)) => {
            let mut fill = vec![T::zero(); heads * block];
            for (slot, &m) in fill[ab.head * block..(ab.head + 1) * block].iter_mut().zip(mean) {
                *slot = T::from_f64(m);
            }
            let fill = tape.constant(Tensor::from_vec(&[heads, len, dh], fill)?);
            tape.add(kept, fill)
        }
        _ => Ok(kept),
    }
}

/// Logits `[len, vocab]` for one sequence, plus attention records when requested.
pub fn forward<T: Float>(
    params: &TransformerParams<T>,
    tokens: &[usize],
    capture_attention: bool,
    ablation: Option<&AblationSpec>,
) -> Result<(Tensor<T>, Option<Vec<AttentionRecord>>)> {
    let mut tape = Tape::new();
    let mut fwd = forward_on_tape(
        params,
        &mut tape,
        &[tokens],
        false,
        ForwardOptions {
            capture_attention,
            ablation,
        },
    )?;
    let logits = tape.value(fwd.logits).clone();
    let records = capture_attention.then(|| fwd.attention.swap_remove(0));
    Ok((logits, records))
}

/// Batch loss with per-position losses `[batch][len]`.
pub struct BatchLoss<T> {
    pub loss: T,
    pub per_position: Vec<Vec<T>>,
    /// Debug builds: first op that overflowed from finite inputs.
    pub nonfinite_origin: Option<String>,
}

fn batch_inputs(batch: &[EncodedExample]) -> Result<(Vec<&[usize]>, Vec<usize>, Vec<bool>)> {
    let len = batch
        .first()
        .map(|e| e.tokens.len())
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    for e in batch {
        if e.tokens.len() != len || e.loss_mask.len() != len {
            return Err(Error::Contract(format!(
                "example of length {} (mask {}) in a batch of length {len}",
                e.tokens.len(),
                e.loss_mask.len()
            )));
        }
    }
    let seqs = batch.iter().map(|e| e.tokens.as_slice()).collect();
    let targets = batch.iter().flat_map(|e| e.targets()).collect();
    let mask = batch.iter().flat_map(|e| e.loss_mask.iter().copied()).collect();
    Ok((seqs, targets, mask))
}

fn split_rows<T: Copy>(flat: Vec<T>, len: usize) -> Vec<Vec<T>> {
    flat.chunks(len).map(|c| c.to_vec()).collect()
}

/// Teacher-forced cross-entropy over answer-digit predictions.
pub fn loss<T: Float>(
    params: &TransformerParams<T>,
    batch: &[EncodedExample],
    ablation: Option<&AblationSpec>,
) -> Result<BatchLoss<T>> {
    let (seqs, targets, mask) = batch_inputs(batch)?;
    let mut tape = Tape::new();
    let fwd = forward_on_tape(
        params,
        &mut tape,
        &seqs,
        false,
        ForwardOptions {
            capture_attention: false,
            ablation,
        },
    )?;
    let (l, per) = tape.cross_entropy_masked(fwd.logits, &targets, &mask)?;
    Ok(BatchLoss {
        loss: tape.value(l).item(),
        per_position: split_rows(per, seqs[0].len()),
        nonfinite_origin: tape.first_nonfinite().map(str::to_owned),
    })
}

/// Loss plus the gradient of every parameter tensor, in layout order.
pub fn loss_and_grad<T: Float>(
    params: &TransformerParams<T>,
    batch: &[EncodedExample],
) -> Result<(BatchLoss<T>, Vec<Vec<T>>)> {
    let (seqs, targets, mask) = batch_inputs(batch)?;
    let mut tape = Tape::new();
    let fwd = forward_on_tape(params, &mut tape, &seqs, true, ForwardOptions::default())?;
    let (l, per) = tape.cross_entropy_masked(fwd.logits, &targets, &mask)?;
    let loss = tape.value(l).item();
    let nonfinite_origin = tape.first_nonfinite().map(str::to_owned);
    tape.backward(l)?;
    let grads = fwd
        .params
        .iter()
        .map(|&v| tape.take_grad(v).expect("parameter leaf gradient"))
        .collect();
    Ok((
        BatchLoss {
            loss,
            per_position: split_rows(per, seqs[0].len()),
            nonfinite_origin,
        },
        grads,
    ))
}

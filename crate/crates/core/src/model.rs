//! The toy masked diffusion transformer and its attention-mask constructors.
//!
//! The network is deliberately small: learned token/position embeddings,
//! pre-norm attention blocks that accept an arbitrary query-by-key mask
//! matrix, a GELU MLP, and a logit head. Every attention layout used by the
//! samplers and likelihood estimators (per-step decoding masks, the fully
//! bidirectional mask, and the 2L one-shot layout) is built here.

use crate::decoding::{DecodeSchedule, Trajectory};
use crate::diffmath::{Tape, Tensor, ValueId, NEG_INF};
use crate::error::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Total vocabulary including the mask token and any prompt alphabet.
    pub vocab_size: usize,
    /// Token id reserved for the mask. Never sampled as a completion value.
    pub mask_token: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    pub fn new(
        vocab_size: usize,
        mask_token: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        max_positions: usize,
    ) -> Result<Self> {
        let cfg = ModelConfig { vocab_size, mask_token, d_model, n_layers, n_heads, max_positions };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask_token >= self.vocab_size {
            return Err(Error::Config("mask token id must be < vocab_size".into()));
        }
        if self.n_layers < 2 {
            return Err(Error::Config(
                "n_layers must be >= 2 (one-shot evaluation assumes a multi-layer network)".into(),
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config("n_heads must divide d_model".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which policy a parameter set is playing in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Policy,
    Stale,
    Reference,
}

/// Named parameter tensors in a fixed, deterministic order.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub role: ParamRole,
    pub entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    /// Gaussian init (std 0.02), zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut entries = Vec::new();
        let d = cfg.d_model;
        let dh = cfg.d_model / cfg.n_heads.max(1);
        let gauss = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal_sample(rng) * 0.02).collect();
            Tensor { shape, data }
        };
        let ones = |n: usize| Tensor { shape: vec![n], data: vec![1.0; n] };
        entries.push(("tok_emb".into(), gauss(vec![cfg.vocab_size, d], rng)));
        entries.push(("pos_emb".into(), gauss(vec![cfg.max_positions, d], rng)));
        for i in 0..cfg.n_layers {
            entries.push((format!("layer{}.ln1.gamma", i), ones(d)));
            entries.push((format!("layer{}.ln1.beta", i), Tensor::zeros(vec![d])));
            for h in 0..cfg.n_heads {
                entries.push((format!("layer{}.head{}.wq", i, h), gauss(vec![d, dh], rng)));
                entries.push((format!("layer{}.head{}.wk", i, h), gauss(vec![d, dh], rng)));
                entries.push((format!("layer{}.head{}.wv", i, h), gauss(vec![d, dh], rng)));
                entries.push((format!("layer{}.head{}.wo", i, h), gauss(vec![dh, d], rng)));
            }
            entries.push((format!("layer{}.ln2.gamma", i), ones(d)));
            entries.push((format!("layer{}.ln2.beta", i), Tensor::zeros(vec![d])));
            entries.push((format!("layer{}.mlp.w1", i), gauss(vec![d, 4 * d], rng)));
            entries.push((format!("layer{}.mlp.b1", i), Tensor::zeros(vec![4 * d])));
            entries.push((format!("layer{}.mlp.w2", i), gauss(vec![4 * d, d], rng)));
            entries.push((format!("layer{}.mlp.b2", i), Tensor::zeros(vec![d])));
        }
        entries.push(("ln_f.gamma".into(), ones(d)));
        entries.push(("ln_f.beta".into(), Tensor::zeros(vec![d])));
        entries.push(("head.w".into(), gauss(vec![d, cfg.vocab_size], rng)));
        ModelParams { role: ParamRole::Policy, entries }
    }

    /// Deep copy with a new role tag; snapshots are never mutated by training.
    pub fn snapshot(&self, role: ParamRole) -> Self {
        ModelParams { role, entries: self.entries.clone() }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("unknown parameter {}", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("unknown parameter {}", name)))
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; deterministic given the stream position.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Position index per input slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionAssignment(pub Vec<usize>);

impl PositionAssignment {
    pub fn sequential(len: usize) -> Self {
        PositionAssignment((0..len).collect())
    }
}

/// Boolean query-by-key matrix: entry (q, k) is true when query q attends to
/// key k.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMaskMatrix {
    pub side: usize,
    data: Vec<bool>,
}

impl AttentionMaskMatrix {
    pub fn all_false(side: usize) -> Self {
        AttentionMaskMatrix { side, data: vec![false; side * side] }
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.data[q * self.side + k]
    }

    pub fn set(&mut self, q: usize, k: usize, v: bool) {
        self.data[q * self.side + k] = v;
    }

    /// Columns attended by query row `q`.
    pub fn row(&self, q: usize) -> Vec<usize> {
        (0..self.side).filter(|&k| self.allowed(q, k)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for q in 0..self.side {
            if (0..self.side).all(|k| !self.allowed(q, k)) {
                return Err(Error::EmptyAttentionRow(q));
            }
        }
        Ok(())
    }

    /// {0, NEG_INF} additive bias for attention scores.
    pub fn bias_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&b| if b { 0.0 } else { NEG_INF }).collect();
        Tensor { shape: vec![self.side, self.side], data }
    }
}

/// Parameter leaves bound onto a tape for one forward pass.
pub struct ParamBinding {
    pub ids: Vec<(String, ValueId)>,
}

impl ParamBinding {
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> Result<Self> {
        let mut ids = Vec::with_capacity(params.entries.len());
        for (name, t) in &params.entries {
            ids.push((name.clone(), tape.leaf(t.clone())?));
        }
        Ok(ParamBinding { ids })
    }

    pub fn id(&self, name: &str) -> Result<ValueId> {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("unbound parameter {}", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ValueId)> {
        self.ids.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// One transformer pass: per-slot logits over the vocabulary.
///
/// Deterministic given inputs and parameters; the attention layout comes
/// entirely from `mask`.
pub fn forward(
    tape: &mut Tape,
    binding: &ParamBinding,
    cfg: &ModelConfig,
    tokens: &[usize],
    positions: &PositionAssignment,
    mask: &AttentionMaskMatrix,
) -> Result<ValueId> {
    let s = tokens.len();
    if positions.0.len() != s || mask.side != s {
        return Err(Error::Shape(format!(
            "forward: tokens ({}), positions ({}), mask side ({}) must agree",
            s,
            positions.0.len(),
            mask.side
        )));
    }
    for &p in &positions.0 {
        if p >= cfg.max_positions {
            return Err(Error::Config(format!(
                "position {} exceeds max_positions {}",
                p, cfg.max_positions
            )));
        }
    }
    for &t in tokens {
        if t >= cfg.vocab_size {
            return Err(Error::Config(format!("token {} exceeds vocab {}", t, cfg.vocab_size)));
        }
    }
    mask.validate()?;
    let bias = mask.bias_tensor();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let tok = tape.embedding(binding.id("tok_emb")?, tokens)?;
    let pos = tape.embedding(binding.id("pos_emb")?, &positions.0)?;
    let mut x = tape.add(tok, pos)?;

    for i in 0..cfg.n_layers {
        let g1 = binding.id(&format!("layer{}.ln1.gamma", i))?;
        let b1 = binding.id(&format!("layer{}.ln1.beta", i))?;
        let h = tape.layer_norm(x, g1, b1)?;
        for hd in 0..cfg.n_heads {
            let q = tape.matmul(h, binding.id(&format!("layer{}.head{}.wq", i, hd))?)?;
            let k = tape.matmul(h, binding.id(&format!("layer{}.head{}.wk", i, hd))?)?;
            let v = tape.matmul(h, binding.id(&format!("layer{}.head{}.wv", i, hd))?)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale)?;
            let scores = tape.attn_bias_add(scores, &bias)?;
            let weights = tape.softmax_rows(scores)?;
            let ctx = tape.matmul(weights, v)?;
            let out = tape.matmul(ctx, binding.id(&format!("layer{}.head{}.wo", i, hd))?)?;
            x = tape.add(x, out)?;
        }
        let g2 = binding.id(&format!("layer{}.ln2.gamma", i))?;
        let b2 = binding.id(&format!("layer{}.ln2.beta", i))?;
        let h2 = tape.layer_norm(x, g2, b2)?;
        let m1 = tape.matmul(h2, binding.id(&format!("layer{}.mlp.w1", i))?)?;
        let m1 = tape.add_bias(m1, binding.id(&format!("layer{}.mlp.b1", i))?)?;
        let m1 = tape.gelu(m1)?;
        let m2 = tape.matmul(m1, binding.id(&format!("layer{}.mlp.w2", i))?)?;
        let m2 = tape.add_bias(m2, binding.id(&format!("layer{}.mlp.b2", i))?)?;
        x = tape.add(x, m2)?;
    }

    let xf = tape.layer_norm(x, binding.id("ln_f.gamma")?, binding.id("ln_f.beta")?)?;
    tape.matmul(xf, binding.id("head.w")?)
}

/// Log-probabilities of the value distribution: a log-softmax over the
/// vocabulary with the mask token excluded (a decoded token is never the
/// mask, so the value softmax renormalizes over the remaining ids).
pub fn value_log_probs(
    tape: &mut Tape,
    logits: ValueId,
    cfg: &ModelConfig,
) -> Result<ValueId> {
    let (s, v) = tape.value(logits).dims2()?;
    if v != cfg.vocab_size {
        return Err(Error::Shape("value_log_probs: logits width must equal vocab".into()));
    }
    let mut bias = Tensor::zeros(vec![s, v]);
    for row in 0..s {
        bias.data[row * v + cfg.mask_token] = NEG_INF;
    }
    let masked = tape.offset_by(logits, &bias)?;
    tape.log_softmax_rows(masked)
}

/// Forward pass on a throwaway non-recording tape.
pub fn eval_logits(
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &[usize],
    positions: &PositionAssignment,
    mask: &AttentionMaskMatrix,
) -> Result<Tensor> {
    let mut tape = Tape::eval();
    let binding = ParamBinding::bind(&mut tape, params)?;
    let logits = forward(&mut tape, &binding, cfg, tokens, positions, mask)?;
    Ok(tape.value(logits).clone())
}

/// Value log-probabilities on a throwaway non-recording tape.
pub fn eval_value_log_probs(
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &[usize],
    positions: &PositionAssignment,
    mask: &AttentionMaskMatrix,
) -> Result<Tensor> {
    let mut tape = Tape::eval();
    let binding = ParamBinding::bind(&mut tape, params)?;
    let logits = forward(&mut tape, &binding, cfg, tokens, positions, mask)?;
    let lp = value_log_probs(&mut tape, logits, cfg)?;
    Ok(tape.value(lp).clone())
}

/// Attention mask for decoding step `step` of an any-order schedule.
///
/// Prompt rows attend only to prompt columns. A still-masked completion slot
/// attends to the prompt, every already-decoded token, and itself; once
/// decoded at step s, a slot attends to the prompt, the tokens decoded
/// strictly before it, and its own step's cohort, and that pattern stays
/// unchanged for the rest of the run.
pub fn build_decoding_mask(
    schedule: &DecodeSchedule,
    step: usize,
    prompt_len: usize,
) -> Result<AttentionMaskMatrix> {
    if step >= schedule.n_steps() {
        return Err(Error::Config(format!(
            "decode step {} outside [0, {})",
            step,
            schedule.n_steps()
        )));
    }
    let l = schedule.completion_len();
    let side = prompt_len + l;
    let step_of = schedule.step_of_position()?;
    let mut m = AttentionMaskMatrix::all_false(side);
    for q in 0..prompt_len {
        for k in 0..prompt_len {
            m.set(q, k, true);
        }
    }
    for pos in 0..l {
        let q = prompt_len + pos;
        for k in 0..prompt_len {
            m.set(q, k, true);
        }
        let s_q = step_of[pos];
        if s_q < step {
            // decoded: prompt + strictly-earlier tokens + own cohort
            for other in 0..l {
                if step_of[other] < s_q || step_of[other] == s_q {
                    m.set(q, prompt_len + other, true);
                }
            }
        } else {
            // still masked: prompt + currently decoded tokens + self
            for other in 0..l {
                if step_of[other] < step {
                    m.set(q, prompt_len + other, true);
                }
            }
            m.set(q, q, true);
        }
    }
    Ok(m)
}

/// Fully bidirectional layout: every completion slot attends to everything;
/// prompt rows attend to the prompt.
pub fn build_bidirectional_mask(prompt_len: usize, completion_len: usize) -> AttentionMaskMatrix {
    let side = prompt_len + completion_len;
    let mut m = AttentionMaskMatrix::all_false(side);
    for q in 0..prompt_len {
        for k in 0..prompt_len {
            m.set(q, k, true);
        }
    }
    for q in prompt_len..side {
        for k in 0..side {
            m.set(q, k, true);
        }
    }
    m
}

/// One-shot 2L layout for a recorded trajectory.
///
/// The input sequence is `prompt ++ x_0 ++ masks`; slot `L_P+L+l` shares the
/// position index of slot `L_P+l`, and its logits reproduce the decoding-time
/// logits of `x_0^l`. A mask query never sees its own clean token or any
/// later-decoded token.
pub fn build_oneshot_mask(
    trajectory: &Trajectory,
) -> Result<(AttentionMaskMatrix, PositionAssignment)> {
    trajectory.check_consistent()?;
    let l_p = trajectory.prompt.len();
    let l = trajectory.tokens.len();
    let side = l_p + 2 * l;
    let step_of = &trajectory.decode_step;
    let mut m = AttentionMaskMatrix::all_false(side);
    for q in 0..l_p {
        for k in 0..l_p {
            m.set(q, k, true);
        }
    }
    for pos in 0..l {
        // clean token row: prompt + earlier-decoded + own cohort
        let q = l_p + pos;
        for k in 0..l_p {
            m.set(q, k, true);
        }
        for other in 0..l {
            if step_of[other] <= step_of[pos] {
                m.set(q, l_p + other, true);
            }
        }
        // mask row: prompt + strictly-earlier-decoded + itself
        let qm = l_p + l + pos;
        for k in 0..l_p {
            m.set(qm, k, true);
        }
        for other in 0..l {
            if step_of[other] < step_of[pos] {
                m.set(qm, l_p + other, true);
            }
        }
        m.set(qm, qm, true);
    }
    let mut pos_ids = Vec::with_capacity(side);
    for i in 0..side {
        if i < l_p + l {
            pos_ids.push(i);
        } else {
            pos_ids.push(i - l);
        }
    }
    Ok((m, PositionAssignment(pos_ids)))
}

/// Input token ids for the one-shot layout: prompt ++ x_0 ++ masks.
pub fn oneshot_tokens(trajectory: &Trajectory, cfg: &ModelConfig) -> Vec<usize> {
    let mut toks = trajectory.prompt.clone();
    toks.extend_from_slice(&trajectory.tokens);
    toks.extend(std::iter::repeat(cfg.mask_token).take(trajectory.tokens.len()));
    toks
}

//! Group-relative policy optimization for the masked-diffusion policy:
//! group sampling, advantages, the clipped importance-weighted objective
//! under the full / merged / single-pass likelihood estimators, a KL
//! penalty to a frozen reference, and the outer training loop with
//! stale-policy reuse.

use crate::decoding::{self, SelectionPolicy, Trajectory};
use crate::diffmath::{Tape, Tensor, ValueId};
use crate::error::{Error, Result};
use crate::likelihood;
use crate::model::{self, ModelConfig, ModelParams, ParamBinding, ParamRole, PositionAssignment};
use crate::tasks::Task;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageNorm {
    MeanOnly,
    MeanStd,
}

/// Which likelihood decomposition supplies the per-token terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "n")]
pub enum Estimator {
    /// One pass per decode step (exact decomposition).
    Full,
    /// One pass per segment; tokens scored from segment boundaries.
    StepMerge(usize),
    /// Single-pass re-evaluation via the causal-order layout.
    AnyOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainerConfig {
    /// Trajectories per prompt (G).
    pub group_size: usize,
    pub prompts_per_step: usize,
    /// Gradient updates per sampled batch (stale-policy reuse).
    pub inner_updates: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub advantage_norm: AdvantageNorm,
    pub estimator: Estimator,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub temperature: f64,
    pub seed: u64,
    /// Total budget; training stops once cumulative FLOPs exceed it.
    pub flop_budget: u64,
    /// Decode steps per trajectory.
    pub n_steps: usize,
    /// Positions unmasked per step.
    pub tokens_per_step: usize,
    pub selection: SelectionPolicy,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group size must be >= 2".into()));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config("clip epsilon must lie in (0,1)".into()));
        }
        if self.kl_beta < 0.0 {
            return Err(Error::Config("KL weight must be >= 0".into()));
        }
        if self.inner_updates < 1 || self.prompts_per_step < 1 {
            return Err(Error::Config("inner updates and prompts per step must be >= 1".into()));
        }
        if let Estimator::StepMerge(n) = self.estimator {
            if n == 0 || self.n_steps % n != 0 {
                return Err(Error::Config(format!(
                    "segment count {} must divide T={}",
                    n, self.n_steps
                )));
            }
        }
        Ok(())
    }
}

/// One prompt's group of trajectories with rewards, advantages, and the
/// gradient-free per-token caches from the stale and reference policies.
#[derive(Clone, Debug)]
pub struct GroupBatch {
    pub prompt: Vec<usize>,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    /// One scalar per trajectory, broadcast to its tokens.
    pub advantages: Vec<f64>,
    /// Per-token log-probs under the stale policy, estimator contexts.
    pub old_logprobs: Vec<Vec<f64>>,
    /// Per-token log-probs under the frozen reference, estimator contexts.
    pub ref_logprobs: Vec<Vec<f64>>,
    /// Set when the std guard zeroed the advantages.
    pub degenerate_group: bool,
}

/// Group-relative advantages. Returns the advantages and whether the
/// near-zero-spread guard fired (advantages forced to zero).
pub fn compute_advantages(rewards: &[f64], mode: AdvantageNorm) -> Result<(Vec<f64>, bool)> {
    if rewards.len() < 2 {
        return Err(Error::Config("advantages need a group of >= 2".into()));
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    match mode {
        AdvantageNorm::MeanOnly => Ok((centered, false)),
        AdvantageNorm::MeanStd => {
            // population std, not sample std
            let std = (centered.iter().map(|c| c * c).sum::<f64>() / g).sqrt();
            if std < 1e-8 {
                Ok((vec![0.0; rewards.len()], true))
            } else {
                Ok((centered.iter().map(|c| c / std).collect(), false))
            }
        }
    }
}

/// Per-token log-probs of a trajectory under the configured estimator,
/// with the number of model passes spent.
pub fn estimator_logprobs(
    params: &ModelParams,
    cfg: &ModelConfig,
    traj: &Trajectory,
    estimator: Estimator,
) -> Result<likelihood::LikelihoodBreakdown> {
    match estimator {
        Estimator::Full => likelihood::traj_loglik_full(params, cfg, traj),
        Estimator::StepMerge(n) => likelihood::traj_loglik_stepmerge(params, cfg, traj, n, false),
        Estimator::AnyOrder => likelihood::traj_loglik_oneshot(params, cfg, traj),
    }
}

/// One model pass of the estimator on a live tape: which positions it
/// scores and the gathered per-token live log-probs, ordered as pos_list.
struct TapePass {
    pos_list: Vec<usize>,
    live_logprobs: ValueId,
}

fn estimator_passes_on_tape(
    tape: &mut Tape,
    binding: &ParamBinding,
    cfg: &ModelConfig,
    traj: &Trajectory,
    estimator: Estimator,
) -> Result<Vec<TapePass>> {
    let l_p = traj.prompt.len();
    let l = traj.completion_len();
    let sched = traj.schedule()?;
    let mut passes = Vec::new();
    match estimator {
        Estimator::Full | Estimator::StepMerge(_) => {
            let starts = match estimator {
                Estimator::Full => (0..traj.n_steps()).collect::<Vec<_>>(),
                Estimator::StepMerge(n) => likelihood::segment_starts(traj.n_steps(), n, false)?,
                Estimator::AnyOrder => unreachable!(),
            };
            let positions = PositionAssignment::sequential(l_p + l);
            for (i, &start) in starts.iter().enumerate() {
                let end = starts.get(i + 1).copied().unwrap_or(traj.n_steps());
                let input = traj.context_before_step(start, cfg.mask_token);
                let mask = model::build_decoding_mask(&sched, start, l_p)?;
                let logits = model::forward(tape, binding, cfg, &input, &positions, &mask)?;
                let lp = model::value_log_probs(tape, logits, cfg)?;
                let pos_list: Vec<usize> =
                    (start..end).flat_map(|s| traj.steps[s].iter().copied()).collect();
                let picks: Vec<(usize, usize)> =
                    pos_list.iter().map(|&pos| (l_p + pos, traj.tokens[pos])).collect();
                let live_logprobs = tape.gather(lp, &picks)?;
                passes.push(TapePass { pos_list, live_logprobs });
            }
        }
        Estimator::AnyOrder => {
            let (mask, positions) = model::build_oneshot_mask(traj)?;
            let input = model::oneshot_tokens(traj, cfg);
            let logits = model::forward(tape, binding, cfg, &input, &positions, &mask)?;
            let lp = model::value_log_probs(tape, logits, cfg)?;
            let pos_list: Vec<usize> = (0..l).collect();
            let picks: Vec<(usize, usize)> =
                pos_list.iter().map(|&pos| (l_p + l + pos, traj.tokens[pos])).collect();
            let live_logprobs = tape.gather(lp, &picks)?;
            passes.push(TapePass { pos_list, live_logprobs });
        }
    }
    Ok(passes)
}

pub struct LossStats {
    pub loss: f64,
    pub kl: f64,
    pub clip_fraction: f64,
}

/// Clipped group objective plus KL penalty, assembled on the live tape.
/// Returns the scalar loss node and numeric diagnostics.
pub fn grpo_loss(
    tape: &mut Tape,
    binding: &ParamBinding,
    cfg: &ModelConfig,
    batches: &[GroupBatch],
    tcfg: &TrainerConfig,
) -> Result<(ValueId, LossStats)> {
    let eps = tcfg.clip_eps;
    let mut obj_terms: Option<ValueId> = None;
    let mut kl_terms: Option<ValueId> = None;
    let mut kl_value = 0.0;
    let mut clipped = 0usize;
    let mut token_count = 0usize;
    let mut weight_total = 0.0;

    for batch in batches {
        if batch.trajectories.len() != batch.old_logprobs.len()
            || batch.trajectories.len() != batch.ref_logprobs.len()
        {
            return Err(Error::Training("missing stale/reference cache".into()));
        }
        for (i, traj) in batch.trajectories.iter().enumerate() {
            let a = batch.advantages[i];
            let l = traj.completion_len() as f64;
            let w = 1.0 / (l * batch.trajectories.len() as f64);
            weight_total += w * l;
            let passes = estimator_passes_on_tape(tape, binding, cfg, traj, tcfg.estimator)?;
            for pass in passes {
                let old: Vec<f64> =
                    pass.pos_list.iter().map(|&p| -batch.old_logprobs[i][p]).collect();
                let rf: Vec<f64> =
                    pass.pos_list.iter().map(|&p| batch.ref_logprobs[i][p]).collect();
                let m = pass.pos_list.len();

                let delta = tape.offset_by(
                    pass.live_logprobs,
                    &Tensor::new(vec![m], old)?,
                )?;
                let rho = tape.exp(delta)?;
                for &r in &tape.value(rho).data.clone() {
                    token_count += 1;
                    if r < 1.0 - eps || r > 1.0 + eps {
                        clipped += 1;
                    }
                }
                let unclipped = tape.scale(rho, a)?;
                let rho_c = tape.clamp(rho, 1.0 - eps, 1.0 + eps)?;
                let clipped_term = tape.scale(rho_c, a)?;
                let taken = tape.min_elem(unclipped, clipped_term)?;
                let s = tape.sum(taken)?;
                let s = tape.scale(s, w)?;
                obj_terms = Some(match obj_terms {
                    None => s,
                    Some(acc) => tape.add(acc, s)?,
                });

                if tcfg.kl_beta > 0.0 {
                    // per-token exp(d) - d - 1 with d = ref - live
                    let neg_live = tape.scale(pass.live_logprobs, -1.0)?;
                    let d = tape.offset_by(neg_live, &Tensor::new(vec![m], rf)?)?;
                    let ed = tape.exp(d)?;
                    let neg_d = tape.scale(d, -1.0)?;
                    let k = tape.add(ed, neg_d)?;
                    let k = tape.add_scalar(k, -1.0)?;
                    let ks = tape.sum(k)?;
                    kl_value += tape.value(ks).data[0] * w;
                    let ks = tape.scale(ks, w)?;
                    kl_terms = Some(match kl_terms {
                        None => ks,
                        Some(acc) => tape.add(acc, ks)?,
                    });
                }
            }
        }
    }

    let obj = obj_terms.ok_or_else(|| Error::Training("empty batch".into()))?;
    // normalize by total group weight so the loss is a mean over prompts
    let norm = 1.0 / batches.len() as f64;
    let mut loss = tape.scale(obj, -norm)?;
    if let Some(k) = kl_terms {
        let k = tape.scale(k, tcfg.kl_beta * norm)?;
        loss = tape.add(loss, k)?;
    }
    let _ = weight_total;
    let stats = LossStats {
        loss: tape.value(loss).data[0],
        kl: kl_value * norm,
        clip_fraction: if token_count == 0 {
            0.0
        } else {
            clipped as f64 / token_count as f64
        },
    };
    Ok((loss, stats))
}

/// Matmul FLOPs of one forward pass at the given sequence length,
/// counting 2*m*n*k per matrix product.
pub fn forward_flops(cfg: &ModelConfig, seq_len: usize) -> u64 {
    let s = seq_len as u64;
    let d = cfg.d_model as u64;
    let dh = (cfg.d_model / cfg.n_heads) as u64;
    let h = cfg.n_heads as u64;
    let v = cfg.vocab_size as u64;
    let per_head = 3 * 2 * s * d * dh   // q, k, v projections
        + 2 * s * s * dh                // scores
        + 2 * s * s * dh                // attention-weighted values
        + 2 * s * dh * d; // output projection
    let per_layer = h * per_head + 2 * s * d * 4 * d + 2 * s * 4 * d * d;
    cfg.n_layers as u64 * per_layer + 2 * s * d * v
}

/// Adam/SGD over the flat parameter list.
struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, params: &ModelParams) -> Self {
        let shapes: Vec<Vec<f64>> =
            params.entries.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Optimizer { kind, lr, m: shapes.clone(), v: shapes, t: 0 }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, p), g) in params.entries.iter_mut().zip(grads) {
                    for (x, gi) in p.data.iter_mut().zip(g) {
                        *x -= self.lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                let bc1 = 1.0 - b1.powi(self.t as i32);
                let bc2 = 1.0 - b2.powi(self.t as i32);
                for (j, ((_, p), g)) in params.entries.iter_mut().zip(grads).enumerate() {
                    for (i, (x, gi)) in p.data.iter_mut().zip(g).enumerate() {
                        self.m[j][i] = b1 * self.m[j][i] + (1.0 - b1) * gi;
                        self.v[j][i] = b2 * self.v[j][i] + (1.0 - b2) * gi * gi;
                        let mh = self.m[j][i] / bc1;
                        let vh = self.v[j][i] / bc2;
                        *x -= self.lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub flops: u64,
    pub mean_reward: f64,
    pub loss: f64,
    pub kl: f64,
    pub clip_fraction: f64,
}

pub struct TrainResult {
    pub params: ModelParams,
    pub metrics: Vec<MetricsRecord>,
    pub total_flops: u64,
}

/// Deterministic per-trajectory rng stream.
fn stream_rng(seed: u64, step: u64, prompt: u64, traj: u64) -> ChaCha8Rng {
    // splitmix-style mixing of the coordinates into one seed
    let mut z = seed
        .wrapping_add(step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(prompt.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(traj.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn sample_group(
    params_old: &ModelParams,
    cfg: &ModelConfig,
    task: &Task,
    tcfg: &TrainerConfig,
    step: u64,
    prompt_idx: u64,
) -> Result<(GroupBatch, u64)> {
    let mut prompt_rng = stream_rng(tcfg.seed, step, prompt_idx, u64::MAX);
    let prompt = task.sample_prompt(&mut prompt_rng);
    let mut trajectories = Vec::with_capacity(tcfg.group_size);
    let mut rewards = Vec::with_capacity(tcfg.group_size);
    let mut flops = 0u64;
    let l = task.completion_len;
    for g in 0..tcfg.group_size {
        let mut rng = stream_rng(tcfg.seed, step, prompt_idx, g as u64);
        let sched = decoding::make_schedule(
            l,
            tcfg.n_steps,
            tcfg.tokens_per_step,
            tcfg.selection,
            &mut rng,
        )?;
        let traj = decoding::sample_any_order(
            params_old, cfg, &prompt, &sched, tcfg.temperature, &mut rng,
        )?;
        flops += tcfg.n_steps as u64 * forward_flops(cfg, prompt.len() + l);
        rewards.push(task.reward(&prompt, &traj.tokens));
        trajectories.push(traj);
    }
    let (advantages, degenerate) = compute_advantages(&rewards, tcfg.advantage_norm)?;
    Ok((
        GroupBatch {
            prompt,
            trajectories,
            rewards,
            advantages,
            old_logprobs: Vec::new(),
            ref_logprobs: Vec::new(),
            degenerate_group: degenerate,
        },
        flops,
    ))
}

fn cache_logprobs(
    batch: &mut GroupBatch,
    params_old: &ModelParams,
    params_ref: &ModelParams,
    cfg: &ModelConfig,
    tcfg: &TrainerConfig,
) -> Result<u64> {
    let mut flops = 0u64;
    for traj in &batch.trajectories {
        let seq = match tcfg.estimator {
            Estimator::AnyOrder => traj.prompt.len() + 2 * traj.completion_len(),
            _ => traj.prompt.len() + traj.completion_len(),
        };
        let old = estimator_logprobs(params_old, cfg, traj, tcfg.estimator)?;
        flops += old.model_passes as u64 * forward_flops(cfg, seq);
        let rf = estimator_logprobs(params_ref, cfg, traj, tcfg.estimator)?;
        flops += rf.model_passes as u64 * forward_flops(cfg, seq);
        batch.old_logprobs.push(old.per_position);
        batch.ref_logprobs.push(rf.per_position);
    }
    Ok(flops)
}

/// Outer training loop: snapshot the stale policy, sample groups, cache
/// stale/reference log-probs once, then run the configured number of
/// inner updates on the same batch. The same trajectories are reused
/// across inner updates; that reuse is the standard stale-policy
/// approximation, not an exact objective.
pub fn train_with<F>(
    cfg: &ModelConfig,
    tcfg: &TrainerConfig,
    task: &Task,
    init: ModelParams,
    mut on_step: F,
) -> Result<TrainResult>
where
    F: FnMut(&MetricsRecord, &ModelParams) -> Result<()>,
{
    tcfg.validate()?;
    let needed = task.min_value_vocab;
    if cfg.vocab_size < needed + 1 || cfg.mask_token < needed {
        return Err(Error::Config(format!(
            "task '{}' needs {} value tokens below the mask id",
            task.name, needed
        )));
    }
    let mut params = init;
    params.role = ParamRole::Policy;
    let params_ref = params.snapshot(ParamRole::Reference);
    let mut opt = Optimizer::new(tcfg.optimizer, tcfg.learning_rate, &params);
    let mut metrics = Vec::new();
    let mut flops = 0u64;
    let mut step = 0u64;

    while flops < tcfg.flop_budget {
        let params_old = params.snapshot(ParamRole::Stale);
        let mut batches = Vec::with_capacity(tcfg.prompts_per_step);
        let mut reward_sum = 0.0;
        let mut reward_count = 0usize;
        for p in 0..tcfg.prompts_per_step {
            let (mut batch, f) =
                sample_group(&params_old, cfg, task, tcfg, step, p as u64)?;
            flops += f;
            flops += cache_logprobs(&mut batch, &params_old, &params_ref, cfg, tcfg)?;
            reward_sum += batch.rewards.iter().sum::<f64>();
            reward_count += batch.rewards.len();
            batches.push(batch);
        }

        let mut last_stats = None;
        for _ in 0..tcfg.inner_updates {
            let mut tape = Tape::new();
            let binding = ParamBinding::bind(&mut tape, &params)?;
            let (loss, stats) = grpo_loss(&mut tape, &binding, cfg, &batches, tcfg)?;
            if !stats.loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at step {}; rewards {:?}",
                    step,
                    batches.iter().map(|b| b.rewards.clone()).collect::<Vec<_>>()
                )));
            }
            tape.backward(loss)?;
            // backward costs twice the forward matmul work
            flops += 3 * tape.matmul_flops();
            let grads: Vec<Vec<f64>> = binding
                .iter()
                .map(|(name, id)| {
                    tape.grad(id)
                        .map(|g| g.to_vec())
                        .ok_or_else(|| Error::Training(format!("no gradient for {}", name)))
                })
                .collect::<Result<_>>()?;
            opt.step(&mut params, &grads);
            last_stats = Some(stats);
        }

        step += 1;
        let stats = last_stats.expect("inner_updates >= 1");
        let record = MetricsRecord {
            step,
            flops,
            mean_reward: reward_sum / reward_count as f64,
            loss: stats.loss,
            kl: stats.kl,
            clip_fraction: stats.clip_fraction,
        };
        on_step(&record, &params)?;
        metrics.push(record);
    }

    Ok(TrainResult { params, metrics, total_flops: flops })
}

pub fn train(cfg: &ModelConfig, tcfg: &TrainerConfig, task: &Task) -> Result<TrainResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let init = ModelParams::init(cfg, &mut rng);
    train_with(cfg, tcfg, task, init, |_, _| Ok(()))
}

/// Mean reward of fresh greedy-free samples from the given parameters.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: &Task,
    tcfg: &TrainerConfig,
    n_prompts: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for p in 0..n_prompts {
        let mut prompt_rng = stream_rng(seed, u64::MAX, p as u64, u64::MAX);
        let prompt = task.sample_prompt(&mut prompt_rng);
        let mut rng = stream_rng(seed, u64::MAX, p as u64, 0);
        let sched = decoding::make_schedule(
            task.completion_len,
            tcfg.n_steps,
            tcfg.tokens_per_step,
            tcfg.selection,
            &mut rng,
        )?;
        let traj =
            decoding::sample_any_order(params, cfg, &prompt, &sched, tcfg.temperature, &mut rng)?;
        total += task.reward(&prompt, &traj.tokens);
    }
    Ok(total / n_prompts as f64)
}

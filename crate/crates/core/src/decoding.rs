//! Unmasking schedules, the two samplers, and the any-order-causality
//! validator.
//!
//! Decode steps are indexed in decode order: step 0 unmasks first. In the
//! diffusion-time convention where t runs from T down to 0, decode step s
//! corresponds to t = T-1-s; the set decoded strictly before position l is
//! exactly its Omega set.

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::model::{
    self, AttentionMaskMatrix, ModelConfig, ModelParams, PositionAssignment,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// Uniform among remaining masked positions.
    Random,
    /// Greedy by the model's top value probability.
    TopConfidence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Bidirectional,
    AnyOrder,
}

/// Partition of completion positions into per-step unmask sets.
///
/// A fixed schedule unmasks k positions per step, with any remainder going
/// to the final step. For the top-confidence policy the concrete partition
/// is only known after sampling; `steps` stays empty until then.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeSchedule {
    pub completion_len: usize,
    pub n_steps: usize,
    pub tokens_per_step: usize,
    pub policy: SelectionPolicy,
    pub steps: Vec<Vec<usize>>,
}

impl DecodeSchedule {
    /// Partition sizes: k everywhere except a remainder on the last step.
    pub fn step_sizes(l: usize, t: usize, k: usize) -> Result<Vec<usize>> {
        if k == 0 || t == 0 {
            return Err(Error::Config("schedule needs k >= 1 and T >= 1".into()));
        }
        if k * t < l {
            return Err(Error::Config(format!(
                "k*T = {} cannot unmask {} tokens",
                k * t,
                l
            )));
        }
        if t > 1 && k * (t - 1) >= l {
            return Err(Error::Config(format!(
                "k*(T-1) = {} leaves no token for the last step",
                k * (t - 1)
            )));
        }
        let mut sizes = vec![k; t];
        sizes[t - 1] = l - k * (t - 1);
        Ok(sizes)
    }

    pub fn from_steps(steps: Vec<Vec<usize>>, policy: SelectionPolicy) -> Result<Self> {
        let l: usize = steps.iter().map(|s| s.len()).sum();
        let mut seen = vec![false; l];
        for step in &steps {
            if step.is_empty() {
                return Err(Error::Config("empty unmask set".into()));
            }
            for &p in step {
                if p >= l || seen[p] {
                    return Err(Error::Config("steps must partition 0..L".into()));
                }
                seen[p] = true;
            }
        }
        let k = steps.first().map(|s| s.len()).unwrap_or(0);
        Ok(DecodeSchedule {
            completion_len: l,
            n_steps: steps.len(),
            tokens_per_step: k,
            policy,
            steps,
        })
    }

    pub fn completion_len(&self) -> usize {
        self.completion_len
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// decode step index per completion position.
    pub fn step_of_position(&self) -> Result<Vec<usize>> {
        if self.steps.is_empty() {
            return Err(Error::Config("schedule has no concrete partition yet".into()));
        }
        let mut out = vec![usize::MAX; self.completion_len];
        for (s, set) in self.steps.iter().enumerate() {
            for &p in set {
                out[p] = s;
            }
        }
        Ok(out)
    }
}

/// Build a schedule of T steps unmasking k positions each (remainder last).
pub fn make_schedule(
    l: usize,
    t: usize,
    k: usize,
    policy: SelectionPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<DecodeSchedule> {
    let sizes = DecodeSchedule::step_sizes(l, t, k)?;
    let steps = match policy {
        SelectionPolicy::Random => {
            let mut order: Vec<usize> = (0..l).collect();
            order.shuffle(rng);
            let mut steps = Vec::with_capacity(t);
            let mut at = 0;
            for sz in &sizes {
                let mut step: Vec<usize> = order[at..at + sz].to_vec();
                step.sort_unstable();
                steps.push(step);
                at += sz;
            }
            steps
        }
        SelectionPolicy::TopConfidence => Vec::new(),
    };
    Ok(DecodeSchedule {
        completion_len: l,
        n_steps: t,
        tokens_per_step: k,
        policy,
        steps,
    })
}

/// A completed decoding run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: Vec<usize>,
    /// Final tokens x_0, completion positions only.
    pub tokens: Vec<usize>,
    /// Decode step (0 = first unmasked) per completion position.
    pub decode_step: Vec<usize>,
    /// Unmask sets per decode step.
    pub steps: Vec<Vec<usize>>,
    /// Temperature-1 model log-probability recorded at sampling, per position.
    pub logprobs: Vec<f64>,
    pub generator: Generator,
}

impl Trajectory {
    pub fn completion_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// Positions decoded strictly before position l.
    pub fn omega(&self, l: usize) -> Vec<usize> {
        let s = self.decode_step[l];
        (0..self.tokens.len()).filter(|&o| self.decode_step[o] < s).collect()
    }

    pub fn total_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    /// The realized schedule this trajectory followed.
    pub fn schedule(&self) -> Result<DecodeSchedule> {
        DecodeSchedule::from_steps(self.steps.clone(), SelectionPolicy::Random)
    }

    /// Input token ids (prompt + completion state) just before decode step s.
    pub fn context_before_step(&self, s: usize, mask_token: usize) -> Vec<usize> {
        let mut toks = self.prompt.clone();
        for (l, &tok) in self.tokens.iter().enumerate() {
            toks.push(if self.decode_step[l] < s { tok } else { mask_token });
        }
        toks
    }

    pub fn check_consistent(&self) -> Result<()> {
        let l = self.tokens.len();
        if self.decode_step.len() != l || self.logprobs.len() != l {
            return Err(Error::Config("trajectory field lengths disagree".into()));
        }
        let mut seen = vec![false; l];
        for (s, set) in self.steps.iter().enumerate() {
            for &p in set {
                if p >= l || seen[p] {
                    return Err(Error::Config("trajectory steps must partition 0..L".into()));
                }
                seen[p] = true;
                if self.decode_step[p] != s {
                    return Err(Error::Config(format!(
                        "decode_step[{}] = {} disagrees with steps (expected {})",
                        p, self.decode_step[p], s
                    )));
                }
            }
        }
        if seen.iter().any(|&b| !b) {
            return Err(Error::Config("trajectory leaves positions undecoded".into()));
        }
        if self.logprobs.iter().any(|&lp| lp > 0.0) {
            return Err(Error::Config("recorded log-probs must be <= 0".into()));
        }
        Ok(())
    }
}

fn sample_from_log_probs(
    lp_row: &[f64],
    mask_token: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    if temperature <= 0.0 {
        // greedy limit
        let mut best = 0;
        let mut best_lp = f64::NEG_INFINITY;
        for (v, &lp) in lp_row.iter().enumerate() {
            if v != mask_token && lp > best_lp {
                best = v;
                best_lp = lp;
            }
        }
        return best;
    }
    let scaled: Vec<f64> = lp_row.iter().map(|&lp| lp / temperature).collect();
    let mx = scaled
        .iter()
        .enumerate()
        .filter(|(v, _)| *v != mask_token)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = scaled
        .iter()
        .enumerate()
        .map(|(v, &x)| if v == mask_token { 0.0 } else { (x - mx).exp() })
        .collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (v, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return v;
        }
    }
    probs.len() - 1 - if mask_token == probs.len() - 1 { 1 } else { 0 }
}

fn mask_for_step(
    generator: Generator,
    realized: &[Vec<usize>],
    remaining: &[usize],
    l: usize,
    prompt_len: usize,
) -> Result<AttentionMaskMatrix> {
    match generator {
        Generator::Bidirectional => Ok(model::build_bidirectional_mask(prompt_len, l)),
        Generator::AnyOrder => {
            // pending positions lumped into one final pseudo-step; their mask
            // rows only depend on what is already decoded
            let mut steps = realized.to_vec();
            if !remaining.is_empty() {
                steps.push(remaining.to_vec());
            }
            let sched = DecodeSchedule::from_steps(steps, SelectionPolicy::Random)?;
            model::build_decoding_mask(&sched, realized.len(), prompt_len)
        }
    }
}

fn sample_trajectory(
    generator: Generator,
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &[usize],
    schedule: &DecodeSchedule,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let l = schedule.completion_len();
    let t = schedule.n_steps();
    let l_p = prompt.len();
    let sizes = DecodeSchedule::step_sizes(l, t, schedule.tokens_per_step)?;
    let preset = if schedule.steps.is_empty() { None } else { Some(&schedule.steps) };

    let mut tokens = vec![cfg.mask_token; l];
    let mut decode_step = vec![usize::MAX; l];
    let mut logprobs = vec![0.0; l];
    let mut realized: Vec<Vec<usize>> = Vec::with_capacity(t);
    let mut remaining: Vec<usize> = (0..l).collect();

    for s in 0..t {
        let mask = mask_for_step(generator, &realized, &remaining, l, l_p)?;
        let mut input = prompt.to_vec();
        input.extend_from_slice(&tokens);
        let positions = PositionAssignment::sequential(l_p + l);
        let lp: Tensor = model::eval_value_log_probs(params, cfg, &input, &positions, &mask)?;
        let v = cfg.vocab_size;

        let chosen: Vec<usize> = match preset {
            Some(steps) => steps[s].clone(),
            None => {
                // greedy by top value probability, deterministic tie-break on index
                let mut scored: Vec<(f64, usize)> = remaining
                    .iter()
                    .map(|&pos| {
                        let row = &lp.data[(l_p + pos) * v..(l_p + pos + 1) * v];
                        let top = row
                            .iter()
                            .enumerate()
                            .filter(|(tok, _)| *tok != cfg.mask_token)
                            .map(|(_, &x)| x)
                            .fold(f64::NEG_INFINITY, f64::max);
                        (top, pos)
                    })
                    .collect();
                scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                let mut sel: Vec<usize> = scored.iter().take(sizes[s]).map(|&(_, p)| p).collect();
                sel.sort_unstable();
                sel
            }
        };

        for &pos in &chosen {
            let row = &lp.data[(l_p + pos) * v..(l_p + pos + 1) * v];
            let tok = sample_from_log_probs(row, cfg.mask_token, temperature, rng);
            tokens[pos] = tok;
            decode_step[pos] = s;
            logprobs[pos] = row[tok];
        }
        remaining.retain(|p| !chosen.contains(p));
        realized.push(chosen);
    }

    Ok(Trajectory {
        prompt: prompt.to_vec(),
        tokens,
        decode_step,
        steps: realized,
        logprobs,
        generator,
    })
}

/// Any-order decoding: per-step masks follow the causal-order discipline,
/// so the recorded log-probs admit one-shot re-evaluation.
pub fn sample_any_order(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &[usize],
    schedule: &DecodeSchedule,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    sample_trajectory(Generator::AnyOrder, params, cfg, prompt, schedule, temperature, rng)
}

/// Vanilla masked-diffusion decoding: every slot sees the full sequence,
/// including still-masked positions.
pub fn sample_bidirectional(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &[usize],
    schedule: &DecodeSchedule,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    sample_trajectory(Generator::Bidirectional, params, cfg, prompt, schedule, temperature, rng)
}

#[derive(Clone, Debug, Default)]
pub struct ConditionResult {
    pub pass: bool,
    /// Offending (position, step) pairs.
    pub witnesses: Vec<(usize, usize)>,
}

/// Per-condition verdicts for the three any-order-causality conditions:
/// consistency of unmasked tokens' attention, no future attention when
/// decoded, and no future attention afterwards (last two steps exempt).
#[derive(Clone, Debug)]
pub struct CausalityReport {
    pub consistent_after_decode: ConditionResult,
    pub no_future_at_decode: ConditionResult,
    pub no_future_after_decode: ConditionResult,
}

impl CausalityReport {
    pub fn pass(&self) -> bool {
        self.consistent_after_decode.pass
            && self.no_future_at_decode.pass
            && self.no_future_after_decode.pass
    }
}

/// Check one attention mask per decode step against the causality
/// conditions. Prompt columns are always permitted and ignored here.
pub fn check_any_order_causal(
    masks: &[AttentionMaskMatrix],
    schedule: &DecodeSchedule,
) -> Result<CausalityReport> {
    let t = schedule.n_steps();
    let l = schedule.completion_len();
    if masks.len() != t {
        return Err(Error::Shape(format!(
            "expected {} masks (one per step), got {}",
            t,
            masks.len()
        )));
    }
    let side = masks[0].side;
    if side < l || masks.iter().any(|m| m.side != side) {
        return Err(Error::Shape("mask side must be prompt_len + L for every step".into()));
    }
    let l_p = side - l;
    let step_of = schedule.step_of_position()?;
    let attn_set = |s: usize, pos: usize| -> Vec<usize> {
        (0..l).filter(|&k| masks[s].allowed(l_p + pos, l_p + k)).collect()
    };

    let mut c1 = ConditionResult { pass: true, witnesses: vec![] };
    let mut c2 = ConditionResult { pass: true, witnesses: vec![] };
    let mut c3 = ConditionResult { pass: true, witnesses: vec![] };

    for pos in 0..l {
        let s_dec = step_of[pos];
        let omega: Vec<usize> = (0..l).filter(|&o| step_of[o] < s_dec).collect();
        let cohort: Vec<usize> = (0..l).filter(|&o| step_of[o] == s_dec).collect();

        // condition 2: at the decode step, attention within omega + self
        for k in attn_set(s_dec, pos) {
            if k != pos && !omega.contains(&k) {
                c2.pass = false;
                c2.witnesses.push((pos, s_dec));
                break;
            }
        }

        // condition 1: identical attention at every step after decoding
        if s_dec + 1 < t {
            let first = attn_set(s_dec + 1, pos);
            for s in (s_dec + 2)..t {
                if attn_set(s, pos) != first {
                    c1.pass = false;
                    c1.witnesses.push((pos, s));
                }
            }
        }

        // condition 3: after decoding, attention within omega + own cohort;
        // positions decoded in the last two steps are exempt
        if s_dec + 2 < t {
            for s in (s_dec + 1)..t {
                let bad = attn_set(s, pos)
                    .into_iter()
                    .any(|k| !omega.contains(&k) && !cohort.contains(&k));
                if bad {
                    c3.pass = false;
                    c3.witnesses.push((pos, s));
                }
            }
        }
    }

    Ok(CausalityReport {
        consistent_after_decode: c1,
        no_future_at_decode: c2,
        no_future_after_decode: c3,
    })
}

/// Serialize one trajectory as a single JSON line.
pub fn trajectory_to_json(traj: &Trajectory) -> String {
    serde_json::to_string(traj).expect("trajectory serialization is infallible")
}

pub fn trajectory_from_json(s: &str) -> Result<Trajectory> {
    serde_json::from_str(s).map_err(|e| Error::Config(format!("bad trajectory JSON: {}", e)))
}

//! Trajectory likelihood estimators: the exact per-step decomposition, the
//! segment-merged approximation, and the single-pass re-evaluation for
//! causal-order trajectories, plus the merge-gap estimate and its
//! analytic upper bound.

use crate::decoding::{self, DecodeSchedule, Generator, SelectionPolicy, Trajectory};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams, PositionAssignment};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Token log-likelihood of a trajectory under a given conditioning scheme.
#[derive(Clone, Debug)]
pub struct LikelihoodBreakdown {
    /// Log-probability contributed by each completion position.
    pub per_position: Vec<f64>,
    pub total: f64,
    /// Number of model forward passes spent.
    pub model_passes: usize,
}

pub(crate) fn eval_step_log_probs(
    params: &ModelParams,
    cfg: &ModelConfig,
    traj: &Trajectory,
    schedule: &DecodeSchedule,
    step: usize,
) -> Result<crate::diffmath::Tensor> {
    let l_p = traj.prompt.len();
    let l = traj.completion_len();
    let input = traj.context_before_step(step, cfg.mask_token);
    let mask = match traj.generator {
        Generator::AnyOrder => model::build_decoding_mask(schedule, step, l_p)?,
        Generator::Bidirectional => model::build_bidirectional_mask(l_p, l),
    };
    model::eval_value_log_probs(
        params,
        cfg,
        &input,
        &PositionAssignment::sequential(l_p + l),
        &mask,
    )
}

/// Exact decomposition: one pass per decode step, each token scored from
/// the state just before its own step.
pub fn traj_loglik_full(
    params: &ModelParams,
    cfg: &ModelConfig,
    traj: &Trajectory,
) -> Result<LikelihoodBreakdown> {
    traj.check_consistent()?;
    let schedule = traj.schedule()?;
    let l_p = traj.prompt.len();
    let v = cfg.vocab_size;
    let mut per_position = vec![0.0; traj.completion_len()];
    for s in 0..traj.n_steps() {
        let lp = eval_step_log_probs(params, cfg, traj, &schedule, s)?;
        for &pos in &traj.steps[s] {
            per_position[pos] = lp.data[(l_p + pos) * v + traj.tokens[pos]];
        }
    }
    Ok(LikelihoodBreakdown {
        total: per_position.iter().sum(),
        per_position,
        model_passes: traj.n_steps(),
    })
}

/// Segment boundaries (start steps) when T steps are cut into segments of
/// size B = ceil(T/N). Requires N | T unless `allow_uneven`.
pub fn segment_starts(t: usize, n: usize, allow_uneven: bool) -> Result<Vec<usize>> {
    if n == 0 || n > t {
        return Err(Error::Config(format!("need 1 <= N <= T, got N={} T={}", n, t)));
    }
    if t % n != 0 && !allow_uneven {
        return Err(Error::Config(format!("N={} does not divide T={}", n, t)));
    }
    let b = t.div_ceil(n);
    Ok((0..t).step_by(b).collect())
}

/// Merged decomposition: T steps are cut into N segments and every token
/// in a segment is scored from the segment-boundary state. One pass per
/// segment; N = T recovers the exact decomposition, N = 1 scores
/// everything from the all-masked state.
pub fn traj_loglik_stepmerge(
    params: &ModelParams,
    cfg: &ModelConfig,
    traj: &Trajectory,
    n: usize,
    allow_uneven: bool,
) -> Result<LikelihoodBreakdown> {
    traj.check_consistent()?;
    let schedule = traj.schedule()?;
    let starts = segment_starts(traj.n_steps(), n, allow_uneven)?;
    let l_p = traj.prompt.len();
    let v = cfg.vocab_size;
    let mut per_position = vec![0.0; traj.completion_len()];
    for (i, &start) in starts.iter().enumerate() {
        let end = starts.get(i + 1).copied().unwrap_or(traj.n_steps());
        let lp = eval_step_log_probs(params, cfg, traj, &schedule, start)?;
        for s in start..end {
            for &pos in &traj.steps[s] {
                per_position[pos] = lp.data[(l_p + pos) * v + traj.tokens[pos]];
            }
        }
    }
    Ok(LikelihoodBreakdown {
        total: per_position.iter().sum(),
        per_position,
        model_passes: starts.len(),
    })
}

/// Single-pass re-evaluation: the prompt, the clean completion, and one
/// mask slot per position share one 2L-wide pass whose attention layout
/// reproduces each position's decoding-time conditioning exactly. Only
/// valid for causal-order trajectories; the bidirectional generator is
/// accepted so the (large) discrepancy can be measured.
pub fn traj_loglik_oneshot(
    params: &ModelParams,
    cfg: &ModelConfig,
    traj: &Trajectory,
) -> Result<LikelihoodBreakdown> {
    let (mask, positions) = model::build_oneshot_mask(traj)?;
    let input = model::oneshot_tokens(traj, cfg);
    let lp = model::eval_value_log_probs(params, cfg, &input, &positions, &mask)?;
    let l_p = traj.prompt.len();
    let l = traj.completion_len();
    let v = cfg.vocab_size;
    let per_position: Vec<f64> = (0..l)
        .map(|pos| lp.data[(l_p + l + pos) * v + traj.tokens[pos]])
        .collect();
    Ok(LikelihoodBreakdown {
        total: per_position.iter().sum(),
        per_position,
        model_passes: 1,
    })
}

/// Monte-Carlo estimate of the merge gap with its standard error.
#[derive(Clone, Debug, Serialize)]
pub struct DnEstimate {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

/// Estimate D_N = E[log p_exact - log p_merged] over model trajectories.
pub fn estimate_dn(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &[usize],
    l: usize,
    t: usize,
    k: usize,
    n: usize,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DnEstimate> {
    if n_samples == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let mut gaps = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let sched = decoding::make_schedule(l, t, k, SelectionPolicy::Random, rng)?;
        let traj = decoding::sample_any_order(params, cfg, prompt, &sched, 1.0, rng)?;
        let full = traj_loglik_full(params, cfg, &traj)?;
        let merged = traj_loglik_stepmerge(params, cfg, &traj, n, false)?;
        gaps.push(full.total - merged.total);
    }
    let mean = gaps.iter().sum::<f64>() / n_samples as f64;
    let var = if n_samples > 1 {
        gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n_samples - 1) as f64
    } else {
        0.0
    };
    Ok(DnEstimate {
        n,
        mean,
        stderr: (var / n_samples as f64).sqrt(),
        n_samples,
    })
}

/// Largest pointwise log-ratio between a token's value distribution under
/// its exact per-step conditioning and under its segment-boundary
/// conditioning, maximized over sampled trajectories, positions, and
/// values.
pub fn estimate_eps_block(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &[usize],
    l: usize,
    t: usize,
    k: usize,
    n: usize,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let starts = segment_starts(t, n, false)?;
    let l_p = prompt.len();
    let v = cfg.vocab_size;
    let mut eps: f64 = 0.0;
    for _ in 0..n_samples.max(1) {
        let sched = decoding::make_schedule(l, t, k, SelectionPolicy::Random, rng)?;
        let traj = decoding::sample_any_order(params, cfg, prompt, &sched, 1.0, rng)?;
        let step_rows: Vec<_> = (0..t)
            .map(|s| eval_step_log_probs(params, cfg, &traj, &sched, s))
            .collect::<Result<_>>()?;
        for pos in 0..l {
            let s_dec = traj.decode_step[pos];
            let seg = starts.iter().rposition(|&st| st <= s_dec).unwrap();
            let boundary = starts[seg];
            let exact = &step_rows[s_dec].data[(l_p + pos) * v..(l_p + pos + 1) * v];
            let merged = &step_rows[boundary].data[(l_p + pos) * v..(l_p + pos + 1) * v];
            for tok in 0..v {
                if tok == cfg.mask_token {
                    continue;
                }
                eps = eps.max((exact[tok] - merged[tok]).abs());
            }
        }
    }
    Ok(eps)
}

/// Analytic ceiling on the merge gap: L * ln(T/N + 1) + L * eps_block.
pub fn bound_on_dn(l: usize, t: usize, n: usize, eps_block: f64) -> f64 {
    let ratio = t as f64 / n as f64;
    l as f64 * (ratio + 1.0).ln() + l as f64 * eps_block
}

/// One row of a merge-gap sweep.
#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    pub n: usize,
    pub d_n: f64,
    pub stderr: f64,
    pub eps_block: f64,
    pub bound: f64,
    pub holds: bool,
}

pub fn bound_report(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &[usize],
    l: usize,
    t: usize,
    k: usize,
    n: usize,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BoundReport> {
    let dn = estimate_dn(params, cfg, prompt, l, t, k, n, n_samples, rng)?;
    let eps = estimate_eps_block(params, cfg, prompt, l, t, k, n, n_samples, rng)?;
    let bound = bound_on_dn(l, t, n, eps);
    Ok(BoundReport {
        n,
        d_n: dn.mean,
        stderr: dn.stderr,
        eps_block: eps,
        bound,
        holds: dn.mean <= bound + 2.0 * dn.stderr,
    })
}

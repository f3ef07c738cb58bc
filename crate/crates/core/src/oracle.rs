//! Brute-force verifiers: exact trajectory enumeration, exact policy
//! gradients via direct differentiation, the ratio-form gradient computed
//! as an exact expectation, exact merge-gap quantities, and the
//! single-pass equivalence harness. Everything here is written for tiny
//! instances and checked against closed-form identities rather than the
//! main implementation paths.

use crate::decoding::{self, DecodeSchedule, Generator, SelectionPolicy, Trajectory};
use crate::diffmath::Tape;
use crate::error::{Error, Result};
use crate::likelihood::{self, eval_step_log_probs};
use crate::model::{self, ModelConfig, ModelParams, ParamBinding, PositionAssignment};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Hard caps keeping enumeration tractable.
#[derive(Clone, Copy, Debug)]
pub struct EnumerationBudget {
    pub max_trajectories: usize,
    pub max_l: usize,
    pub max_v: usize,
    pub max_t: usize,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        EnumerationBudget { max_trajectories: 1_000_000, max_l: 4, max_v: 4, max_t: 4 }
    }
}

/// How unmask orders are drawn for an enumeration.
#[derive(Clone, Debug)]
pub enum ScheduleFamily {
    /// Uniformly random order, k per step with remainder last; every
    /// admissible partition contributes its order probability.
    Random { l: usize, t: usize, k: usize },
    /// One fixed partition with order probability 1.
    Fixed(DecodeSchedule),
}

impl ScheduleFamily {
    fn completion_len(&self) -> usize {
        match self {
            ScheduleFamily::Random { l, .. } => *l,
            ScheduleFamily::Fixed(s) => s.completion_len(),
        }
    }

    fn n_steps(&self) -> usize {
        match self {
            ScheduleFamily::Random { t, .. } => *t,
            ScheduleFamily::Fixed(s) => s.n_steps(),
        }
    }

    fn partitions(&self) -> Result<Vec<Vec<Vec<usize>>>> {
        match self {
            ScheduleFamily::Fixed(s) => {
                if s.steps.is_empty() {
                    return Err(Error::Config("fixed family needs concrete steps".into()));
                }
                Ok(vec![s.steps.clone()])
            }
            ScheduleFamily::Random { l, t, k } => {
                let sizes = DecodeSchedule::step_sizes(*l, *t, *k)?;
                let mut out = Vec::new();
                let mut current: Vec<Vec<usize>> = Vec::new();
                let remaining: Vec<usize> = (0..*l).collect();
                enumerate_partitions(&sizes, &remaining, &mut current, &mut out);
                Ok(out)
            }
        }
    }
}

fn enumerate_partitions(
    sizes: &[usize],
    remaining: &[usize],
    current: &mut Vec<Vec<usize>>,
    out: &mut Vec<Vec<Vec<usize>>>,
) {
    if sizes.is_empty() {
        out.push(current.clone());
        return;
    }
    for subset in combinations(remaining, sizes[0]) {
        let rest: Vec<usize> = remaining.iter().copied().filter(|p| !subset.contains(p)).collect();
        current.push(subset);
        enumerate_partitions(&sizes[1..], &rest, current, out);
        current.pop();
    }
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if items.len() < k {
        return vec![];
    }
    let mut out = Vec::new();
    for (i, &first) in items.iter().enumerate() {
        for mut rest in combinations(&items[i + 1..], k - 1) {
            let mut c = vec![first];
            c.append(&mut rest);
            out.push(c);
        }
    }
    out
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut r = 1.0;
    for i in 0..k {
        r *= (n - i) as f64 / (i + 1) as f64;
    }
    r
}

/// Probability of one concrete unmask order under uniform random selection:
/// at each step the cohort is a uniform size-|U_t| subset of what remains.
pub fn order_probability(steps: &[Vec<usize>], l: usize) -> f64 {
    let mut remaining = l;
    let mut p = 1.0;
    for step in steps {
        p /= binomial(remaining, step.len());
        remaining -= step.len();
    }
    p
}

fn check_budget(
    family: &ScheduleFamily,
    cfg: &ModelConfig,
    budget: &EnumerationBudget,
) -> Result<usize> {
    let l = family.completion_len();
    let t = family.n_steps();
    let v = cfg.vocab_size - 1; // value tokens, mask excluded
    if l > budget.max_l || v > budget.max_v || t > budget.max_t {
        return Err(Error::BudgetExceeded(format!(
            "instance L={} V={} T={} exceeds caps L<={} V<={} T<={}",
            l, v, t, budget.max_l, budget.max_v, budget.max_t
        )));
    }
    let n_parts = family.partitions()?.len();
    let count = n_parts * v.pow(l as u32);
    if count > budget.max_trajectories {
        return Err(Error::BudgetExceeded(format!(
            "{} trajectories exceeds cap {}",
            count, budget.max_trajectories
        )));
    }
    Ok(count)
}

fn value_tokens(cfg: &ModelConfig) -> Vec<usize> {
    (0..cfg.vocab_size).filter(|&v| v != cfg.mask_token).collect()
}

/// Every positive-probability trajectory with its exact probability
/// (order probability times token probabilities).
pub fn enumerate_trajectories(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &[usize],
    family: &ScheduleFamily,
    budget: &EnumerationBudget,
) -> Result<Vec<(Trajectory, f64)>> {
    check_budget(family, cfg, budget)?;
    let l = family.completion_len();
    let vals = value_tokens(cfg);
    let mut out = Vec::new();
    for steps in family.partitions()? {
        let sched = DecodeSchedule::from_steps(steps.clone(), SelectionPolicy::Random)?;
        let order_p = match family {
            ScheduleFamily::Random { .. } => order_probability(&steps, l),
            ScheduleFamily::Fixed(_) => 1.0,
        };
        let mut step_of = vec![0usize; l];
        for (s, set) in steps.iter().enumerate() {
            for &p in set {
                step_of[p] = s;
            }
        }
        // depth-first over steps; one model pass per decoded prefix
        let mut tokens = vec![cfg.mask_token; l];
        let mut logprobs = vec![0.0; l];
        expand_step(
            params, cfg, prompt, &sched, &step_of, &vals, 0, order_p, &mut tokens,
            &mut logprobs, &mut out,
        )?;
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn expand_step(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &[usize],
    sched: &DecodeSchedule,
    step_of: &[usize],
    vals: &[usize],
    s: usize,
    prob_so_far: f64,
    tokens: &mut Vec<usize>,
    logprobs: &mut Vec<f64>,
    out: &mut Vec<(Trajectory, f64)>,
) -> Result<()> {
    let l = sched.completion_len();
    let l_p = prompt.len();
    if s == sched.n_steps() {
        out.push((
            Trajectory {
                prompt: prompt.to_vec(),
                tokens: tokens.clone(),
                decode_step: step_of.to_vec(),
                steps: sched.steps.clone(),
                logprobs: logprobs.clone(),
                generator: Generator::AnyOrder,
            },
            prob_so_far,
        ));
        return Ok(());
    }
    let mut input = prompt.to_vec();
    input.extend_from_slice(tokens);
    let mask = model::build_decoding_mask(sched, s, l_p)?;
    let lp = model::eval_value_log_probs(
        params,
        cfg,
        &input,
        &PositionAssignment::sequential(l_p + l),
        &mask,
    )?;
    let cohort = &sched.steps[s];
    let mut assign = vec![0usize; cohort.len()];
    loop {
        let mut step_lp = 0.0;
        for (i, &pos) in cohort.iter().enumerate() {
            let tok = vals[assign[i]];
            tokens[pos] = tok;
            let x = lp.data[(l_p + pos) * cfg.vocab_size + tok];
            logprobs[pos] = x;
            step_lp += x;
        }
        expand_step(
            params, cfg, prompt, sched, step_of, vals, s + 1,
            prob_so_far * step_lp.exp(), tokens, logprobs, out,
        )?;
        // odometer over the cohort's token assignment
        let mut i = 0;
        loop {
            if i == assign.len() {
                for &pos in cohort {
                    tokens[pos] = cfg.mask_token;
                    logprobs[pos] = 0.0;
                }
                return Ok(());
            }
            assign[i] += 1;
            if assign[i] < vals.len() {
                break;
            }
            assign[i] = 0;
            i += 1;
        }
    }
}

/// Token log-probability of a trajectory rebuilt on a live tape so it can
/// be differentiated.
fn traj_token_logprob_on_tape(
    tape: &mut Tape,
    binding: &ParamBinding,
    cfg: &ModelConfig,
    traj: &Trajectory,
    sched: &DecodeSchedule,
) -> Result<crate::diffmath::ValueId> {
    let l_p = traj.prompt.len();
    let l = traj.completion_len();
    let positions = PositionAssignment::sequential(l_p + l);
    let mut acc: Option<crate::diffmath::ValueId> = None;
    for s in 0..traj.n_steps() {
        let input = traj.context_before_step(s, cfg.mask_token);
        let mask = model::build_decoding_mask(sched, s, l_p)?;
        let logits = model::forward(tape, binding, cfg, &input, &positions, &mask)?;
        let lp = model::value_log_probs(tape, logits, cfg)?;
        let picks: Vec<(usize, usize)> =
            traj.steps[s].iter().map(|&pos| (l_p + pos, traj.tokens[pos])).collect();
        let g = tape.gather(lp, &picks)?;
        let sum = tape.sum(g)?;
        acc = Some(match acc {
            None => sum,
            Some(a) => tape.add(a, sum)?,
        });
    }
    acc.ok_or_else(|| Error::Config("trajectory has no steps".into()))
}

fn flatten_grads(tape: &Tape, binding: &ParamBinding) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (name, id) in binding.iter() {
        let g = tape
            .grad(id)
            .ok_or_else(|| Error::Training(format!("no gradient for {}", name)))?;
        out.extend_from_slice(g);
    }
    Ok(out)
}

/// d/dtheta of the expected reward, computed by differentiating
/// sum over trajectories of p(traj) * r(traj) directly.
pub fn exact_policy_gradient(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &[usize],
    family: &ScheduleFamily,
    reward: &dyn Fn(&[usize], &[usize]) -> f64,
    budget: &EnumerationBudget,
) -> Result<Vec<f64>> {
    let trajs = enumerate_trajectories(params, cfg, prompt, family, budget)?;
    let mut tape = Tape::new();
    let binding = ParamBinding::bind(&mut tape, params)?;
    let mut loss: Option<crate::diffmath::ValueId> = None;
    for (traj, _) in &trajs {
        let r = reward(&traj.prompt, &traj.tokens);
        if r == 0.0 {
            continue;
        }
        let sched = traj.schedule()?;
        let order_p = order_probability(&traj.steps, traj.completion_len());
        let lp = traj_token_logprob_on_tape(&mut tape, &binding, cfg, traj, &sched)?;
        let lp = tape.add_scalar(lp, order_p.ln())?;
        let p = tape.exp(lp)?;
        let term = tape.scale(p, r)?;
        loss = Some(match loss {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let loss = match loss {
        Some(x) => x,
        None => return Ok(vec![0.0; params.numel()]), // reward identically zero
    };
    tape.backward(loss)?;
    flatten_grads(&tape, &binding)
}

/// The same gradient computed through the ratio form: the exact
/// expectation, over trajectories drawn from the frozen policy, of the
/// reward times the sum of per-token probability ratios, differentiated
/// at the point where the live and frozen parameters coincide.
pub fn estimator_expected_gradient(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &[usize],
    family: &ScheduleFamily,
    reward: &dyn Fn(&[usize], &[usize]) -> f64,
    budget: &EnumerationBudget,
) -> Result<Vec<f64>> {
    let trajs = enumerate_trajectories(params, cfg, prompt, family, budget)?;
    let mut tape = Tape::new();
    let binding = ParamBinding::bind(&mut tape, params)?;
    let mut loss: Option<crate::diffmath::ValueId> = None;
    for (traj, p_old) in &trajs {
        let w = reward(&traj.prompt, &traj.tokens) * p_old;
        if w == 0.0 {
            continue;
        }
        let sched = traj.schedule()?;
        let l_p = traj.prompt.len();
        let l = traj.completion_len();
        let positions = PositionAssignment::sequential(l_p + l);
        for s in 0..traj.n_steps() {
            let input = traj.context_before_step(s, cfg.mask_token);
            let mask = model::build_decoding_mask(&sched, s, l_p)?;
            let logits = model::forward(&mut tape, &binding, cfg, &input, &positions, &mask)?;
            let lp = model::value_log_probs(&mut tape, logits, cfg)?;
            let picks: Vec<(usize, usize)> =
                traj.steps[s].iter().map(|&pos| (l_p + pos, traj.tokens[pos])).collect();
            let lp_live = tape.gather(lp, &picks)?;
            // stale per-token log-probs are constants recorded at enumeration
            let lp_old = crate::diffmath::Tensor::new(
                vec![picks.len()],
                traj.steps[s].iter().map(|&pos| -traj.logprobs[pos]).collect(),
            )?;
            let delta = tape.offset_by(lp_live, &lp_old)?;
            let ratios = tape.exp(delta)?;
            let summed = tape.sum(ratios)?;
            let term = tape.scale(summed, w)?;
            loss = Some(match loss {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
    }
    let loss = match loss {
        Some(x) => x,
        None => return Ok(vec![0.0; params.numel()]),
    };
    tape.backward(loss)?;
    flatten_grads(&tape, &binding)
}

/// Max absolute difference normalized by the largest gradient entry.
pub fn gradient_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = a
        .iter()
        .chain(b.iter())
        .map(|x| x.abs())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max)
        / scale
}

/// Exact merge gap and worst-case per-token sensitivity via enumeration.
pub fn exact_dn_and_eps(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &[usize],
    family: &ScheduleFamily,
    n: usize,
    budget: &EnumerationBudget,
) -> Result<(f64, f64)> {
    let trajs = enumerate_trajectories(params, cfg, prompt, family, budget)?;
    let t = family.n_steps();
    let starts = likelihood::segment_starts(t, n, false)?;
    let l_p = prompt.len();
    let v = cfg.vocab_size;
    let mut d_n = 0.0;
    let mut eps: f64 = 0.0;
    for (traj, p) in &trajs {
        let sched = traj.schedule()?;
        let step_rows: Vec<_> = (0..t)
            .map(|s| eval_step_log_probs(params, cfg, traj, &sched, s))
            .collect::<Result<_>>()?;
        let mut full = 0.0;
        let mut merged = 0.0;
        for pos in 0..traj.completion_len() {
            let s_dec = traj.decode_step[pos];
            let seg = starts.iter().rposition(|&st| st <= s_dec).unwrap();
            let exact_row = &step_rows[s_dec].data[(l_p + pos) * v..(l_p + pos + 1) * v];
            let merged_row = &step_rows[starts[seg]].data[(l_p + pos) * v..(l_p + pos + 1) * v];
            full += exact_row[traj.tokens[pos]];
            merged += merged_row[traj.tokens[pos]];
            for tok in 0..v {
                if tok != cfg.mask_token {
                    eps = eps.max((exact_row[tok] - merged_row[tok]).abs());
                }
            }
        }
        d_n += p * (full - merged);
    }
    Ok((d_n, eps))
}

/// Comparison of the single-pass re-evaluation against the per-step
/// decomposition for both generators.
#[derive(Clone, Debug, Serialize)]
pub struct OneshotReport {
    pub trials: usize,
    pub causal_max_gap: f64,
    pub causal_pass: bool,
    pub bidirectional_max_gap: f64,
}

pub fn oneshot_equivalence_suite(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &[usize],
    l: usize,
    t: usize,
    k: usize,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<OneshotReport> {
    let mut causal_max: f64 = 0.0;
    let mut bidi_max: f64 = 0.0;
    for _ in 0..trials {
        let sched = decoding::make_schedule(l, t, k, SelectionPolicy::Random, rng)?;
        let traj = decoding::sample_any_order(params, cfg, prompt, &sched, 1.0, rng)?;
        let full = likelihood::traj_loglik_full(params, cfg, &traj)?;
        let one = likelihood::traj_loglik_oneshot(params, cfg, &traj)?;
        for (a, b) in full.per_position.iter().zip(&one.per_position) {
            causal_max = causal_max.max((a - b).abs());
        }
        let sched = decoding::make_schedule(l, t, k, SelectionPolicy::Random, rng)?;
        let traj = decoding::sample_bidirectional(params, cfg, prompt, &sched, 1.0, rng)?;
        let full = likelihood::traj_loglik_full(params, cfg, &traj)?;
        let one = likelihood::traj_loglik_oneshot(params, cfg, &traj)?;
        for (a, b) in full.per_position.iter().zip(&one.per_position) {
            bidi_max = bidi_max.max((a - b).abs());
        }
    }
    Ok(OneshotReport {
        trials,
        causal_max_gap: causal_max,
        causal_pass: causal_max < 1e-9,
        bidirectional_max_gap: bidi_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg_v(v_values: usize) -> ModelConfig {
        // vocab = value tokens + mask, mask gets the last id
        ModelConfig {
            vocab_size: v_values + 1,
            mask_token: v_values,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_positions: 32,
        }
    }

    fn draw(cfg: &ModelConfig, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams::init(cfg, &mut rng)
    }

    #[test]
    fn probabilities_sum_to_one() {
        let budget = EnumerationBudget::default();
        for (l, t, k, v) in [(1, 1, 1, 2), (2, 2, 1, 2), (2, 2, 1, 3), (3, 3, 1, 2)] {
            let cfg = cfg_v(v);
            let params = draw(&cfg, 100 + l as u64);
            let fam = ScheduleFamily::Random { l, t, k };
            let trajs = enumerate_trajectories(&params, &cfg, &[0], &fam, &budget).unwrap();
            let total: f64 = trajs.iter().map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() < 1e-10, "L={} sum {}", l, total);
        }
    }

    #[test]
    fn fixed_order_trajectory_count_is_v_to_the_l() {
        let cfg = cfg_v(3);
        let params = draw(&cfg, 5);
        let sched =
            DecodeSchedule::from_steps(vec![vec![0], vec![1]], SelectionPolicy::Random).unwrap();
        let fam = ScheduleFamily::Fixed(sched);
        let trajs = enumerate_trajectories(
            &params, &cfg, &[], &fam, &EnumerationBudget::default(),
        )
        .unwrap();
        assert_eq!(trajs.len(), 9);
        let total: f64 = trajs.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn random_order_count_and_order_prob() {
        // L=2, T=2, k=1: two orders, each probability 1/2
        assert!((order_probability(&[vec![0], vec![1]], 2) - 0.5).abs() < 1e-15);
        assert!((order_probability(&[vec![1], vec![0]], 2) - 0.5).abs() < 1e-15);
        let cfg = cfg_v(2);
        let params = draw(&cfg, 6);
        let fam = ScheduleFamily::Random { l: 2, t: 2, k: 1 };
        let trajs = enumerate_trajectories(
            &params, &cfg, &[0], &fam, &EnumerationBudget::default(),
        )
        .unwrap();
        assert_eq!(trajs.len(), 2 * 4);
    }

    #[test]
    fn budget_refuses_large_instances() {
        let cfg = cfg_v(2);
        let params = draw(&cfg, 7);
        let fam = ScheduleFamily::Random { l: 5, t: 1, k: 5 };
        let err = enumerate_trajectories(
            &params, &cfg, &[], &fam, &EnumerationBudget::default(),
        );
        assert!(matches!(err, Err(Error::BudgetExceeded(_))));
    }

    #[test]
    fn constant_reward_gives_zero_gradient() {
        let cfg = cfg_v(2);
        let params = draw(&cfg, 8);
        let fam = ScheduleFamily::Random { l: 2, t: 2, k: 1 };
        let g = exact_policy_gradient(
            &params, &cfg, &[0], &fam, &|_, _| 1.0, &EnumerationBudget::default(),
        )
        .unwrap();
        let mx = g.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        assert!(mx < 1e-9, "max grad {}", mx);
    }

    #[test]
    fn single_outcome_gradient_matches_finite_differences() {
        let cfg = cfg_v(2);
        let params = draw(&cfg, 9);
        let fam = ScheduleFamily::Random { l: 2, t: 2, k: 1 };
        let budget = EnumerationBudget::default();
        let target = [1usize, 0];
        let reward = |_: &[usize], c: &[usize]| if c == target { 1.0 } else { 0.0 };
        let g = exact_policy_gradient(&params, &cfg, &[0], &fam, &reward, &budget).unwrap();

        let prob_of_target = |ps: &ModelParams| -> f64 {
            enumerate_trajectories(ps, &cfg, &[0], &fam, &budget)
                .unwrap()
                .iter()
                .filter(|(tr, _)| tr.tokens == target)
                .map(|(_, p)| p)
                .sum()
        };
        // spot-check a handful of parameter coordinates
        let h = 1e-6;
        let mut flat_idx = 0usize;
        for (name, t) in &params.entries {
            for j in 0..t.numel().min(3) {
                let mut up = params.clone();
                up.get_mut(name).unwrap().data[j] += h;
                let mut dn = params.clone();
                dn.get_mut(name).unwrap().data[j] -= h;
                let fd = (prob_of_target(&up) - prob_of_target(&dn)) / (2.0 * h);
                assert!(
                    (fd - g[flat_idx + j]).abs() < 1e-6,
                    "{}[{}]: fd {} vs grad {}",
                    name,
                    j,
                    fd,
                    g[flat_idx + j]
                );
            }
            flat_idx += t.numel();
        }
    }

    #[test]
    fn ratio_form_matches_direct_gradient() {
        let budget = EnumerationBudget::default();
        for (l, t, v, seed) in [(2, 2, 2, 10), (2, 2, 3, 11), (3, 3, 2, 12)] {
            let cfg = cfg_v(v);
            let params = draw(&cfg, seed);
            let fam = ScheduleFamily::Random { l, t, k: 1 };
            let reward = |_: &[usize], c: &[usize]| crate::tasks::reward_sorted(&[], c);
            let a =
                exact_policy_gradient(&params, &cfg, &[0], &fam, &reward, &budget).unwrap();
            let b =
                estimator_expected_gradient(&params, &cfg, &[0], &fam, &reward, &budget)
                    .unwrap();
            let rel = gradient_relative_error(&a, &b);
            assert!(rel < 1e-6, "L={} V={} rel err {}", l, v, rel);
        }
    }

    #[test]
    fn dn_zero_when_n_equals_t_and_for_constant_model() {
        let budget = EnumerationBudget::default();
        let cfg = cfg_v(2);
        let params = draw(&cfg, 13);
        let fam = ScheduleFamily::Random { l: 3, t: 3, k: 1 };
        let (d, e) = exact_dn_and_eps(&params, &cfg, &[0], &fam, 3, &budget).unwrap();
        assert!(d.abs() < 1e-12 && e.abs() < 1e-12);

        // zeroed parameters give context-independent logits
        let mut flat = params.clone();
        for (_, t) in flat.entries.iter_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        for n in [1, 3] {
            let (d, e) = exact_dn_and_eps(&flat, &cfg, &[0], &fam, n, &budget).unwrap();
            assert!(d.abs() < 1e-12 && e.abs() < 1e-12, "N={} d={} e={}", n, d, e);
        }
    }

    #[test]
    fn dn_is_nonnegative_and_bounded() {
        let budget = EnumerationBudget::default();
        let cfg = cfg_v(2);
        let params = draw(&cfg, 14);
        let fam = ScheduleFamily::Random { l: 3, t: 3, k: 1 };
        for n in [1, 3] {
            let (d, e) = exact_dn_and_eps(&params, &cfg, &[0], &fam, n, &budget).unwrap();
            assert!(d >= -1e-12, "N={} gave D={}", n, d);
            let bound = likelihood::bound_on_dn(3, 3, n, e);
            assert!(d <= bound + 1e-12, "N={} D={} bound={}", n, d, bound);
        }
    }

    #[test]
    fn oneshot_suite_passes_causal_fails_bidirectional() {
        let cfg = cfg_v(4);
        let params = draw(&cfg, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rep = oneshot_equivalence_suite(&params, &cfg, &[0], 4, 2, 2, 10, &mut rng).unwrap();
        assert!(rep.causal_pass, "causal gap {}", rep.causal_max_gap);
        assert!(rep.bidirectional_max_gap > 1e-3, "bidi gap {}", rep.bidirectional_max_gap);
    }

    #[test]
    fn degenerate_single_position_passes_both() {
        let cfg = cfg_v(2);
        let params = draw(&cfg, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rep = oneshot_equivalence_suite(&params, &cfg, &[0], 1, 1, 1, 5, &mut rng).unwrap();
        assert!(rep.causal_max_gap < 1e-9);
        assert!(rep.bidirectional_max_gap < 1e-9);
    }
}

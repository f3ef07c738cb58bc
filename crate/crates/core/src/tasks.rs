//! Small verifiable-reward tasks: each pairs a prompt sampler with a pure,
//! deterministic reward over token ids. Completion length is fixed per
//! task; there is no end-of-sequence token.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Token ids double as digit values; the countdown task additionally uses
/// these operator ids.
pub const OP_ADD: usize = 10;
pub const OP_SUB: usize = 11;
pub const OP_MUL: usize = 12;
/// Token the marker task rewards.
pub const FLAGGED_TOKEN: usize = 0;

type RewardFn = fn(&[usize], &[usize]) -> f64;

#[derive(Clone)]
pub struct Task {
    pub name: String,
    pub description: String,
    pub prompt_len: usize,
    pub completion_len: usize,
    /// Token ids the prompt sampler draws from.
    pub prompt_alphabet: Vec<usize>,
    /// Smallest value vocabulary (excluding the mask token) the task needs.
    pub min_value_vocab: usize,
    reward_fn: RewardFn,
}

impl Task {
    pub fn reward(&self, prompt: &[usize], completion: &[usize]) -> f64 {
        (self.reward_fn)(prompt, completion)
    }

    pub fn sample_prompt(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.name == "mini_countdown" {
            // three digits plus a target guaranteed reachable from them
            let digits: Vec<usize> = (0..3).map(|_| rng.random_range(1..=4usize)).collect();
            let ops = [OP_ADD, OP_SUB, OP_MUL];
            let target = loop {
                let o1 = ops[rng.random_range(0..3)];
                let o2 = ops[rng.random_range(0..3)];
                let expr = [digits[0], digits[1], o1, digits[2], o2];
                if let Some(v) = eval_postfix(&expr) {
                    if (0..=9).contains(&v) {
                        break v as usize;
                    }
                }
            };
            vec![digits[0], digits[1], digits[2], target]
        } else {
            (0..self.prompt_len)
                .map(|_| self.prompt_alphabet[rng.random_range(0..self.prompt_alphabet.len())])
                .collect()
        }
    }

    /// Look a task up by name with the lengths it will be run at.
    pub fn by_name(name: &str, prompt_len: usize, completion_len: usize) -> Result<Task> {
        if completion_len == 0 {
            return Err(Error::Config("completion length must be positive".into()));
        }
        match name {
            "sorted" => Ok(Task {
                name: "sorted".into(),
                description: "fraction of adjacent completion pairs in nondecreasing order"
                    .into(),
                prompt_len,
                completion_len,
                prompt_alphabet: (0..10).collect(),
                min_value_vocab: 2,
                reward_fn: reward_sorted,
            }),
            "copy" => {
                if prompt_len == 0 {
                    return Err(Error::Config("copy task needs a nonempty prompt".into()));
                }
                Ok(Task {
                    name: "copy".into(),
                    description: "per-position match rate against the repeated prompt pattern"
                        .into(),
                    prompt_len,
                    completion_len,
                    prompt_alphabet: (0..6).collect(),
                    min_value_vocab: 6,
                    reward_fn: reward_copy,
                })
            }
            "mini_countdown" => {
                if prompt_len != 4 || completion_len != 5 {
                    return Err(Error::Config(
                        "mini_countdown is fixed at prompt length 4 (three digits + target) \
                         and completion length 5"
                            .into(),
                    ));
                }
                Ok(Task {
                    name: "mini_countdown".into(),
                    description: "postfix expression over the three prompt digits hitting \
                                  the target"
                        .into(),
                    prompt_len,
                    completion_len,
                    prompt_alphabet: (0..10).collect(),
                    min_value_vocab: 13,
                    reward_fn: reward_mini_countdown,
                })
            }
            "marker" => Ok(Task {
                name: "marker".into(),
                description: "frequency of the flagged token in the completion".into(),
                prompt_len: 0,
                completion_len,
                prompt_alphabet: vec![],
                min_value_vocab: 2,
                reward_fn: reward_marker,
            }),
            other => Err(Error::Config(format!(
                "unknown task '{}'; available: sorted, copy, mini_countdown, marker",
                other
            ))),
        }
    }

    pub fn names() -> &'static [&'static str] {
        &["sorted", "copy", "mini_countdown", "marker"]
    }
}

/// Fraction of adjacent completion pairs with completion[i] <= completion[i+1].
pub fn reward_sorted(_prompt: &[usize], completion: &[usize]) -> f64 {
    if completion.len() < 2 {
        return 1.0;
    }
    let ok = completion.windows(2).filter(|w| w[0] <= w[1]).count();
    ok as f64 / (completion.len() - 1) as f64
}

/// Match rate against the prompt pattern tiled to the completion length.
pub fn reward_copy(prompt: &[usize], completion: &[usize]) -> f64 {
    if prompt.is_empty() || completion.is_empty() {
        return 0.0;
    }
    let hits = completion
        .iter()
        .enumerate()
        .filter(|(i, &tok)| tok == prompt[i % prompt.len()])
        .count();
    hits as f64 / completion.len() as f64
}

fn eval_postfix(tokens: &[usize]) -> Option<i64> {
    let mut stack: Vec<i64> = Vec::new();
    for &tok in tokens {
        match tok {
            0..=9 => stack.push(tok as i64),
            OP_ADD | OP_SUB | OP_MUL => {
                let b = stack.pop()?;
                let a = stack.pop()?;
                stack.push(match tok {
                    OP_ADD => a + b,
                    OP_SUB => a - b,
                    _ => a * b,
                });
            }
            _ => return None,
        }
    }
    if stack.len() == 1 {
        Some(stack[0])
    } else {
        None
    }
}

/// Prompt is three digits plus a target. 1.0 if the completion is a valid
/// postfix expression whose digits are exactly the prompt digits and whose
/// value equals the target; 0.2 if it is merely a well-formed postfix
/// expression; 0.0 otherwise.
pub fn reward_mini_countdown(prompt: &[usize], completion: &[usize]) -> f64 {
    if prompt.len() != 4 {
        return 0.0;
    }
    let value = match eval_postfix(completion) {
        Some(v) => v,
        None => return 0.0,
    };
    let mut need: Vec<usize> = prompt[..3].to_vec();
    need.sort_unstable();
    let mut used: Vec<usize> = completion.iter().copied().filter(|&t| t <= 9).collect();
    used.sort_unstable();
    if used == need && value == prompt[3] as i64 {
        1.0
    } else {
        0.2
    }
}

/// Frequency of the flagged token in the completion.
pub fn reward_marker(_prompt: &[usize], completion: &[usize]) -> f64 {
    if completion.is_empty() {
        return 0.0;
    }
    let hits = completion.iter().filter(|&&t| t == FLAGGED_TOKEN).count();
    hits as f64 / completion.len() as f64
}

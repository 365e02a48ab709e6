//! Exactly enumerable post-training tasks.
//!
//! A task is a set of opaque prompt ids, a finite response space shared by
//! all prompts, and a reward table over every `(prompt, response)` pair.
//! Sequence responses are token strings of a fixed length; their integer id
//! is the string read as a base-`vocab` number with the first token most
//! significant, so ids enumerate the strings in lexicographic order.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng;

/// Largest enumerable sequence space.
pub const MAX_SEQUENCE_SPACE: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResponseSpace {
    Flat { num_responses: usize },
    Sequence { vocab: usize, length: usize },
}

impl ResponseSpace {
    pub fn size(&self) -> usize {
        match *self {
            ResponseSpace::Flat { num_responses } => num_responses,
            ResponseSpace::Sequence { vocab, length } => vocab.pow(length as u32),
        }
    }
}

/// Per-prompt reward rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardTable {
    values: Vec<Vec<f64>>,
}

impl RewardTable {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        for (x, row) in values.iter().enumerate() {
            if let Some(y) = row.iter().position(|r| !r.is_finite()) {
                return Err(LabError::config(
                    "rewards",
                    format!("non-finite reward at prompt {x}, response {y}"),
                ));
            }
        }
        Ok(Self { values })
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.values[x]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }
}

/// How bandit rewards are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RewardGenSpec {
    /// One row per prompt, passed through unchanged.
    Explicit { table: Vec<Vec<f64>> },
    /// i.i.d. uniform draws in `[lo, hi)`.
    Uniform { lo: f64, hi: f64 },
    /// Reward 1 on the `correct` response of every prompt, 0 elsewhere.
    OneHot { correct: usize },
}

impl Default for RewardGenSpec {
    fn default() -> Self {
        RewardGenSpec::Uniform { lo: 0.0, hi: 1.0 }
    }
}

/// How sequence rewards are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SequenceRewardRule {
    /// 1 for the exact target string, 0 otherwise.
    MatchTarget { target: Vec<usize> },
    /// Number of positions agreeing with the target.
    CountMatching { target: Vec<usize> },
    /// i.i.d. uniform draws in `[lo, hi)` per string.
    RandomTable { lo: f64, hi: f64 },
}

/// An enumerable task. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaskDocument", into = "TaskDocument")]
pub struct TaskSpec {
    num_prompts: usize,
    space: ResponseSpace,
    rewards: RewardTable,
}

impl TaskSpec {
    /// Assembles a task from parts, checking every invariant.
    pub fn new(num_prompts: usize, space: ResponseSpace, rewards: RewardTable) -> Result<Self> {
        if num_prompts == 0 {
            return Err(LabError::config("num_prompts", "must be positive"));
        }
        match space {
            ResponseSpace::Flat { num_responses } if num_responses < 2 => {
                return Err(LabError::config(
                    "num_responses",
                    format!("need at least 2 responses, got {num_responses}"),
                ));
            }
            ResponseSpace::Sequence { vocab, length } => check_sequence_space(vocab, length)?,
            _ => {}
        }
        let n = space.size();
        if rewards.rows().len() != num_prompts {
            return Err(LabError::config(
                "rewards",
                format!("expected {num_prompts} rows, got {}", rewards.rows().len()),
            ));
        }
        if let Some((x, row)) = rewards
            .rows()
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != n)
        {
            return Err(LabError::config(
                "rewards",
                format!("row {x} has {} entries, expected {n}", row.len()),
            ));
        }
        Ok(Self {
            num_prompts,
            space,
            rewards,
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn num_responses(&self) -> usize {
        self.space.size()
    }

    pub fn space(&self) -> ResponseSpace {
        self.space
    }

    pub fn rewards(&self) -> &RewardTable {
        &self.rewards
    }

    pub fn reward_row(&self, x: usize) -> &[f64] {
        self.rewards.row(x)
    }

    /// Token string of response `y` in a sequence task (`None` for bandits).
    pub fn tokens(&self, y: usize) -> Option<Vec<usize>> {
        match self.space {
            ResponseSpace::Sequence { vocab, length } => Some(id_to_tokens(y, vocab, length)),
            ResponseSpace::Flat { .. } => None,
        }
    }

    /// Response id of a token string in a sequence task.
    pub fn response_id(&self, tokens: &[usize]) -> Result<usize> {
        match self.space {
            ResponseSpace::Sequence { vocab, length } => {
                if tokens.len() != length || tokens.iter().any(|&t| t >= vocab) {
                    return Err(LabError::Format(format!(
                        "token string {tokens:?} is not in the {vocab}^{length} space"
                    )));
                }
                Ok(tokens_to_id(tokens, vocab))
            }
            ResponseSpace::Flat { .. } => Err(LabError::Format(
                "bandit responses have no token representation".into(),
            )),
        }
    }

    pub fn check_domain(&self, x: usize, y: usize) -> Result<()> {
        if x >= self.num_prompts || y >= self.num_responses() {
            return Err(LabError::OutOfRange {
                prompt: x,
                response: y,
            });
        }
        Ok(())
    }

    /// The same task with `shift[x]` added to every reward of prompt `x`.
    pub fn with_reward_shift(&self, shift: &[f64]) -> Result<Self> {
        let rows = self
            .rewards
            .rows()
            .iter()
            .zip(shift)
            .map(|(row, c)| row.iter().map(|r| r + c).collect())
            .collect();
        Self::new(self.num_prompts, self.space, RewardTable::new(rows)?)
    }
}

/// `R(x, y)`.
pub fn reward(task: &TaskSpec, x: usize, y: usize) -> Result<f64> {
    task.check_domain(x, y)?;
    Ok(task.rewards.row(x)[y])
}

/// A multi-armed bandit task.
pub fn make_bandit(
    num_prompts: usize,
    num_responses: usize,
    reward_gen: &RewardGenSpec,
    seed: u64,
) -> Result<TaskSpec> {
    if num_responses < 2 {
        return Err(LabError::config(
            "num_responses",
            format!("need at least 2 responses, got {num_responses}"),
        ));
    }
    let rows = match reward_gen {
        RewardGenSpec::Explicit { table } => table.clone(),
        RewardGenSpec::Uniform { lo, hi } => {
            check_bounds(*lo, *hi)?;
            let mut rng = rng::seeded(seed);
            (0..num_prompts)
                .map(|_| rng::uniform_vec(&mut rng, num_responses, *lo, *hi))
                .collect()
        }
        RewardGenSpec::OneHot { correct } => {
            if *correct >= num_responses {
                return Err(LabError::config(
                    "reward_gen.correct",
                    format!("index {correct} outside {num_responses} responses"),
                ));
            }
            (0..num_prompts)
                .map(|_| {
                    (0..num_responses)
                        .map(|y| if y == *correct { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect()
        }
    };
    TaskSpec::new(
        num_prompts,
        ResponseSpace::Flat { num_responses },
        RewardTable::new(rows)?,
    )
}

/// A single-prompt sequence task over all `vocab^length` strings.
pub fn make_sequence_task(
    vocab: usize,
    length: usize,
    reward_rule: &SequenceRewardRule,
    seed: u64,
) -> Result<TaskSpec> {
    make_sequence_task_with_prompts(1, vocab, length, reward_rule, seed)
}

/// A sequence task with several prompts sharing the reward rule. Random
/// tables are drawn independently per prompt.
pub fn make_sequence_task_with_prompts(
    num_prompts: usize,
    vocab: usize,
    length: usize,
    reward_rule: &SequenceRewardRule,
    seed: u64,
) -> Result<TaskSpec> {
    check_sequence_space(vocab, length)?;
    let n = vocab.pow(length as u32);
    let row_for = |target: &[usize], count: bool| -> Result<Vec<f64>> {
        if target.len() != length || target.iter().any(|&t| t >= vocab) {
            return Err(LabError::config(
                "reward_rule.target",
                format!("target {target:?} is not a string of {length} tokens below {vocab}"),
            ));
        }
        Ok((0..n)
            .map(|y| {
                let tokens = id_to_tokens(y, vocab, length);
                let hits = tokens.iter().zip(target).filter(|(a, b)| a == b).count();
                if count {
                    hits as f64
                } else if hits == length {
                    1.0
                } else {
                    0.0
                }
            })
            .collect())
    };
    let rows = match reward_rule {
        SequenceRewardRule::MatchTarget { target } => {
            vec![row_for(target, false)?; num_prompts]
        }
        SequenceRewardRule::CountMatching { target } => {
            vec![row_for(target, true)?; num_prompts]
        }
        SequenceRewardRule::RandomTable { lo, hi } => {
            check_bounds(*lo, *hi)?;
            let mut rng = rng::seeded(seed);
            (0..num_prompts)
                .map(|_| rng::uniform_vec(&mut rng, n, *lo, *hi))
                .collect()
        }
    };
    TaskSpec::new(
        num_prompts,
        ResponseSpace::Sequence { vocab, length },
        RewardTable::new(rows)?,
    )
}

/// Parses a digit string such as `"101"` into tokens.
pub fn parse_token_string(s: &str) -> Result<Vec<usize>> {
    s.chars()
        .map(|c| {
            c.to_digit(36)
                .map(|d| d as usize)
                .ok_or_else(|| LabError::Format(format!("invalid token character {c:?}")))
        })
        .collect()
}

pub fn id_to_tokens(mut y: usize, vocab: usize, length: usize) -> Vec<usize> {
    let mut tokens = vec![0; length];
    for t in (0..length).rev() {
        tokens[t] = y % vocab;
        y /= vocab;
    }
    tokens
}

pub fn tokens_to_id(tokens: &[usize], vocab: usize) -> usize {
    tokens.iter().fold(0, |acc, &t| acc * vocab + t)
}

fn check_sequence_space(vocab: usize, length: usize) -> Result<()> {
    if vocab == 0 || length == 0 {
        return Err(LabError::config("vocab/length", "must both be positive"));
    }
    let size = (vocab as u128).checked_pow(length as u32);
    match size {
        Some(s) if s <= MAX_SEQUENCE_SPACE as u128 && s >= 2 => Ok(()),
        Some(s) if s < 2 => Err(LabError::config(
            "vocab/length",
            "the response space needs at least 2 strings",
        )),
        _ => Err(LabError::config(
            "vocab/length",
            format!("{vocab}^{length} exceeds the enumeration bound {MAX_SEQUENCE_SPACE}"),
        )),
    }
}

fn check_bounds(lo: f64, hi: f64) -> Result<()> {
    if !lo.is_finite() || !hi.is_finite() {
        return Err(LabError::config("reward_gen", "bounds must be finite"));
    }
    if lo >= hi {
        return Err(LabError::config(
            "reward_gen",
            format!("empty range [{lo}, {hi})"),
        ));
    }
    Ok(())
}

/// Wire form of a task.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaskDocument {
    kind: String,
    num_prompts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_responses: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    length: Option<usize>,
    rewards: Vec<Vec<f64>>,
}

impl TryFrom<TaskDocument> for TaskSpec {
    type Error = LabError;

    fn try_from(doc: TaskDocument) -> Result<Self> {
        let space = match (doc.kind.as_str(), doc.num_responses, doc.vocab, doc.length) {
            ("bandit", Some(num_responses), None, None) => ResponseSpace::Flat { num_responses },
            ("sequence", None, Some(vocab), Some(length)) => {
                ResponseSpace::Sequence { vocab, length }
            }
            (kind, ..) => {
                return Err(LabError::Format(format!(
                    "task kind {kind:?} needs `num_responses` (bandit) or `vocab` and `length` (sequence)"
                )))
            }
        };
        TaskSpec::new(doc.num_prompts, space, RewardTable::new(doc.rewards)?)
    }
}

impl From<TaskSpec> for TaskDocument {
    fn from(task: TaskSpec) -> Self {
        let (kind, num_responses, vocab, length) = match task.space {
            ResponseSpace::Flat { num_responses } => ("bandit", Some(num_responses), None, None),
            ResponseSpace::Sequence { vocab, length } => {
                ("sequence", None, Some(vocab), Some(length))
            }
        };
        TaskDocument {
            kind: kind.to_string(),
            num_prompts: task.num_prompts,
            num_responses,
            vocab,
            length,
            rewards: task.rewards.values,
        }
    }
}

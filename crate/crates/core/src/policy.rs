//! Tabular softmax policies over enumerable response spaces.
//!
//! Parameters are stored as one dense logit vector, the concatenation of
//! per-prompt blocks. A flat policy has one logit per response. An
//! autoregressive policy has, for every position `t` and every prefix of
//! length `t`, a row of `vocab` logits; response probability is the product
//! of its token conditionals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numeric::{log_softmax, log_sum_exp, softmax};
use crate::rng::{self, LabRng};
use crate::taskenv::{ResponseSpace, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Flat,
    Autoregressive,
}

/// A dense gradient aligned with [`PolicyParams::logits`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Gradient(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        crate::numeric::l2_norm(&self.0)
    }

    pub fn scale(&mut self, a: f64) {
        self.0.iter_mut().for_each(|g| *g *= a);
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, a: f64, other: &Gradient) -> Result<()> {
        if other.len() != self.len() {
            return Err(LabError::DimensionMismatch {
                expected: self.len(),
                actual: other.len(),
            });
        }
        self.0
            .iter_mut()
            .zip(&other.0)
            .for_each(|(g, o)| *g += a * o);
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A probability vector over one prompt's responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Distribution {
    pub probs: Vec<f64>,
}

impl Distribution {
    /// Validates non-negativity and normalization to 1e-12.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(LabError::Format(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(LabError::Format(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Logit tables of a softmax policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyDocument", into = "PolicyDocument")]
pub struct PolicyParams {
    kind: PolicyKind,
    num_prompts: usize,
    space: ResponseSpace,
    logits: Vec<f64>,
}

impl PolicyParams {
    /// Zero logits: the uniform policy.
    pub fn init_uniform(task: &TaskSpec, kind: PolicyKind) -> Result<Self> {
        let len = task.num_prompts() * block_len(kind, task.space())?;
        Ok(Self {
            kind,
            num_prompts: task.num_prompts(),
            space: task.space(),
            logits: vec![0.0; len],
        })
    }

    /// Wraps explicit logits; length and finiteness are checked.
    pub fn from_logits(
        kind: PolicyKind,
        num_prompts: usize,
        space: ResponseSpace,
        logits: Vec<f64>,
    ) -> Result<Self> {
        let expected = num_prompts * block_len(kind, space)?;
        if logits.len() != expected {
            return Err(LabError::DimensionMismatch {
                expected,
                actual: logits.len(),
            });
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(LabError::Format("logits must be finite".into()));
        }
        Ok(Self {
            kind,
            num_prompts,
            space,
            logits,
        })
    }

    /// Random logits drawn uniformly from `[-scale, scale)`.
    pub fn random(task: &TaskSpec, kind: PolicyKind, scale: f64, rng: &mut LabRng) -> Result<Self> {
        let mut params = Self::init_uniform(task, kind)?;
        for l in params.logits.iter_mut() {
            *l = rng::uniform(rng, -scale, scale);
        }
        Ok(params)
    }

    /// A policy whose response log-probabilities are `rows[x][y]`.
    ///
    /// Rows must be finite and normalized in the log domain. Autoregressive
    /// conditionals are recovered as ratios of prefix masses.
    pub fn from_log_probs(
        kind: PolicyKind,
        space: ResponseSpace,
        rows: &[Vec<f64>],
    ) -> Result<Self> {
        let block = block_len(kind, space)?;
        let mut logits = Vec::with_capacity(rows.len() * block);
        for row in rows {
            if row.len() != space.size() {
                return Err(LabError::DimensionMismatch {
                    expected: space.size(),
                    actual: row.len(),
                });
            }
            match kind {
                PolicyKind::Flat => logits.extend_from_slice(row),
                PolicyKind::Autoregressive => {
                    let ResponseSpace::Sequence { vocab, length } = space else {
                        unreachable!("block_len rejects autoregressive bandits")
                    };
                    // prefix masses, deepest level first
                    let mut levels = vec![row.clone()];
                    for _ in 0..length {
                        let child = levels.last().unwrap();
                        let parent: Vec<f64> = child.chunks(vocab).map(log_sum_exp).collect();
                        levels.push(parent);
                    }
                    levels.reverse();
                    for t in 0..length {
                        for (s, &parent) in levels[t].iter().enumerate() {
                            for v in 0..vocab {
                                logits.push(levels[t + 1][s * vocab + v] - parent);
                            }
                        }
                    }
                }
            }
        }
        Self::from_logits(kind, rows.len(), space, logits)
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
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

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn block_len(&self) -> usize {
        self.logits.len() / self.num_prompts
    }

    pub fn block_range(&self, x: usize) -> std::ops::Range<usize> {
        let b = self.block_len();
        x * b..(x + 1) * b
    }

    pub fn block(&self, x: usize) -> &[f64] {
        &self.logits[self.block_range(x)]
    }

    pub fn block_mut(&mut self, x: usize) -> &mut [f64] {
        let r = self.block_range(x);
        &mut self.logits[r]
    }

    /// Checks that `other` parameterizes the same prompts and responses.
    pub fn check_compatible(&self, other: &PolicyParams) -> Result<()> {
        if self.num_prompts != other.num_prompts || self.space.size() != other.space.size() {
            return Err(LabError::DimensionMismatch {
                expected: self.num_prompts * self.space.size(),
                actual: other.num_prompts * other.space.size(),
            });
        }
        Ok(())
    }

    /// Checks that this policy covers `task`.
    pub fn check_task(&self, task: &TaskSpec) -> Result<()> {
        if self.num_prompts != task.num_prompts() || self.space.size() != task.num_responses() {
            return Err(LabError::DimensionMismatch {
                expected: task.num_prompts() * task.num_responses(),
                actual: self.num_prompts * self.space.size(),
            });
        }
        Ok(())
    }

    /// `log pi(y | x)` for every response of prompt `x`.
    pub fn log_probs(&self, x: usize) -> Vec<f64> {
        let block = self.block(x);
        match (self.kind, self.space) {
            (PolicyKind::Flat, _) => log_softmax(block),
            (PolicyKind::Autoregressive, ResponseSpace::Sequence { vocab, length }) => {
                let mut acc = vec![0.0];
                let mut offset = 0;
                for _ in 0..length {
                    let mut next = Vec::with_capacity(acc.len() * vocab);
                    for (s, &prefix) in acc.iter().enumerate() {
                        let row = &block[offset + s * vocab..offset + (s + 1) * vocab];
                        next.extend(log_softmax(row).into_iter().map(|lp| prefix + lp));
                    }
                    offset += acc.len() * vocab;
                    acc = next;
                }
                acc
            }
            (PolicyKind::Autoregressive, ResponseSpace::Flat { .. }) => {
                unreachable!("autoregressive policies require a sequence space")
            }
        }
    }

    /// `log pi(y | x)`.
    pub fn log_prob(&self, x: usize, y: usize) -> f64 {
        let block = self.block(x);
        match (self.kind, self.space) {
            (PolicyKind::Flat, _) => block[y] - log_sum_exp(block),
            (PolicyKind::Autoregressive, ResponseSpace::Sequence { vocab, length }) => {
                let tokens = crate::taskenv::id_to_tokens(y, vocab, length);
                let mut state = 0;
                let mut offset = 0;
                let mut level = 1;
                let mut total = 0.0;
                for &tok in &tokens {
                    let row = &block[offset + state * vocab..offset + (state + 1) * vocab];
                    total += row[tok] - log_sum_exp(row);
                    offset += level * vocab;
                    level *= vocab;
                    state = state * vocab + tok;
                }
                total
            }
            (PolicyKind::Autoregressive, ResponseSpace::Flat { .. }) => unreachable!(),
        }
    }

    /// The full response distribution of prompt `x`.
    pub fn distribution(&self, x: usize) -> Distribution {
        let probs = match self.kind {
            PolicyKind::Flat => softmax(self.block(x)),
            PolicyKind::Autoregressive => self.log_probs(x).into_iter().map(f64::exp).collect(),
        };
        Distribution { probs }
    }

    /// `k` i.i.d. inverse-CDF draws from `pi(. | x)`.
    pub fn sample_k(&self, x: usize, k: usize, rng: &mut LabRng) -> Vec<usize> {
        let dist = self.distribution(x);
        sample_from(&dist.probs, k, rng)
    }

    /// Gradient of `log pi(y | x)` with respect to every logit.
    pub fn grad_log_prob(&self, x: usize, y: usize) -> Gradient {
        let mut grad = Gradient::zeros(self.num_params());
        let mut coeffs = vec![0.0; self.num_responses()];
        coeffs[y] = 1.0;
        let range = self.block_range(x);
        self.add_weighted_grad(x, &coeffs, &mut grad.0[range]);
        grad
    }

    /// Adds `sum_y coeffs[y] * grad log pi(y | x)` into the prompt-`x` block
    /// `out`.
    ///
    /// Flat: `coeffs - (sum coeffs) * pi`. Autoregressive: every prefix node
    /// receives the child masses minus its own mass times its conditional.
    pub fn add_weighted_grad(&self, x: usize, coeffs: &[f64], out: &mut [f64]) {
        let block = self.block(x);
        match (self.kind, self.space) {
            (PolicyKind::Flat, _) => {
                let total: f64 = coeffs.iter().sum();
                let probs = softmax(block);
                for ((o, c), p) in out.iter_mut().zip(coeffs).zip(&probs) {
                    *o += c - total * p;
                }
            }
            (PolicyKind::Autoregressive, ResponseSpace::Sequence { vocab, length }) => {
                // masses[t][s]: summed coefficient of responses with prefix s of length t
                let mut masses = vec![coeffs.to_vec()];
                for _ in 0..length {
                    let child = masses.last().unwrap();
                    let parent: Vec<f64> = child.chunks(vocab).map(|c| c.iter().sum()).collect();
                    masses.push(parent);
                }
                masses.reverse();
                let mut offset = 0;
                for t in 0..length {
                    for (s, &mass) in masses[t].iter().enumerate() {
                        let start = offset + s * vocab;
                        let probs = softmax(&block[start..start + vocab]);
                        for v in 0..vocab {
                            out[start + v] += masses[t + 1][s * vocab + v] - mass * probs[v];
                        }
                    }
                    offset += masses[t].len() * vocab;
                }
            }
            (PolicyKind::Autoregressive, ResponseSpace::Flat { .. }) => unreachable!(),
        }
    }

    /// Equivalent flat policy: logits are the response log-probabilities.
    pub fn to_flat(&self) -> PolicyParams {
        let logits = (0..self.num_prompts)
            .flat_map(|x| self.log_probs(x))
            .collect();
        PolicyParams {
            kind: PolicyKind::Flat,
            num_prompts: self.num_prompts,
            space: self.space,
            logits,
        }
    }
}

/// `k` inverse-CDF draws from `probs`.
pub fn sample_from(probs: &[f64], k: usize, rng: &mut LabRng) -> Vec<usize> {
    (0..k).map(|_| rng::draw_index(rng, probs)).collect()
}

/// Uniform draw of one element of `items`.
pub fn pick_uniform<T: Copy>(items: &[T], rng: &mut LabRng) -> T {
    items[rng.gen_range(0..items.len())]
}

fn block_len(kind: PolicyKind, space: ResponseSpace) -> Result<usize> {
    match (kind, space) {
        (PolicyKind::Flat, s) => Ok(s.size()),
        (PolicyKind::Autoregressive, ResponseSpace::Sequence { vocab, length }) => {
            Ok((0..length).map(|t| vocab.pow(t as u32) * vocab).sum())
        }
        (PolicyKind::Autoregressive, ResponseSpace::Flat { .. }) => Err(LabError::config(
            "policy.kind",
            "autoregressive policies need a sequence task",
        )),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyDocument {
    kind: PolicyKind,
    num_prompts: usize,
    space: ResponseSpace,
    logits: Vec<f64>,
}

impl TryFrom<PolicyDocument> for PolicyParams {
    type Error = LabError;

    fn try_from(doc: PolicyDocument) -> Result<Self> {
        PolicyParams::from_logits(doc.kind, doc.num_prompts, doc.space, doc.logits)
    }
}

impl From<PolicyParams> for PolicyDocument {
    fn from(p: PolicyParams) -> Self {
        PolicyDocument {
            kind: p.kind,
            num_prompts: p.num_prompts,
            space: p.space,
            logits: p.logits,
        }
    }
}

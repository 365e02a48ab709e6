//! The unified weight framework.
//!
//! Each post-training method is expressed as per-response weights `w_i` in
//!
//! ```text
//! grad L = - sum_groups sum_i w_i * grad log pi_theta(y_i | x)
//! ```
//!
//! GVPO's weights are the gap between the central distance of the actual
//! rewards and that of the implicit rewards `beta * log(pi_theta/pi_theta')`.
//! They sum to zero within a group, which is what removes the partition
//! function from the update.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numeric::{mean, neg_log_sigmoid, population_std, sigmoid};
use crate::oracle::check_support;
use crate::policy::{Gradient, PolicyParams};
use crate::taskenv::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Sft,
    Grpo,
    Dpo,
    Gvpo,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Sft => "sft",
            Scheme::Grpo => "grpo",
            Scheme::Dpo => "dpo",
            Scheme::Gvpo => "gvpo",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One prompt with `k` sampled responses and their log-probabilities under
/// the current (`theta`), auxiliary (`theta'`) and old policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub prompt: usize,
    pub responses: Vec<usize>,
    pub rewards: Vec<f64>,
    pub logp_theta: Vec<f64>,
    pub logp_aux: Vec<f64>,
    pub logp_old: Vec<f64>,
    /// Which sampling distribution produced the responses.
    pub source: String,
}

impl GroupBatch {
    /// Looks up rewards and log-probabilities for `responses`.
    pub fn build(
        task: &TaskSpec,
        prompt: usize,
        responses: Vec<usize>,
        theta: &PolicyParams,
        aux: &PolicyParams,
        old: &PolicyParams,
        source: impl Into<String>,
    ) -> Result<Self> {
        for &y in &responses {
            task.check_domain(prompt, y)?;
        }
        let lt = theta.log_probs(prompt);
        let la = aux.log_probs(prompt);
        let lo = old.log_probs(prompt);
        let pick = |v: &[f64]| responses.iter().map(|&y| v[y]).collect::<Vec<_>>();
        Ok(Self {
            prompt,
            rewards: pick(task.reward_row(prompt)),
            logp_theta: pick(&lt),
            logp_aux: pick(&la),
            logp_old: pick(&lo),
            responses,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    /// `log pi_theta - log pi_theta'` per response.
    pub fn log_ratios(&self) -> Vec<f64> {
        self.logp_theta
            .iter()
            .zip(&self.logp_aux)
            .map(|(a, b)| a - b)
            .collect()
    }

    fn require_group(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(LabError::GroupTooSmall(self.len()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub scheme: Scheme,
    /// Whether the scheme guarantees `sum w_i = 0`.
    pub zero_sum: bool,
}

impl WeightVector {
    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GvpoConfig {
    pub beta: f64,
}

impl GvpoConfig {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(LabError::config(
                "beta",
                format!("must be positive, got {beta}"),
            ));
        }
        Ok(Self { beta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub clip_epsilon: f64,
    pub kl_coefficient: f64,
    pub std_floor: f64,
    /// `false` gives the Dr.GRPO-style unscaled advantage.
    pub use_std_normalization: bool,
    /// Use the PPO `min(unclipped, clipped)` surrogate instead of the plain
    /// clamped ratio.
    pub ppo_min_form: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            kl_coefficient: 0.0,
            std_floor: 1e-6,
            use_std_normalization: true,
            ppo_min_form: false,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon <= 1.0) {
            return Err(LabError::config("grpo.clip_epsilon", "must lie in (0, 1]"));
        }
        if !(self.kl_coefficient >= 0.0 && self.kl_coefficient.is_finite()) {
            return Err(LabError::config(
                "grpo.kl_coefficient",
                "must be non-negative",
            ));
        }
        if !(self.std_floor > 0.0) {
            return Err(LabError::config("grpo.std_floor", "must be positive"));
        }
        Ok(())
    }
}

/// GVPO weights `w_i = beta * [(R_i - mean R) - beta * (l_i - mean l)]`
/// with `l_i = log pi_theta(y_i) - log pi_theta'(y_i)`.
pub fn gvpo_weights(group: &GroupBatch, config: &GvpoConfig) -> Result<WeightVector> {
    group.require_group()?;
    let beta = config.beta;
    let ratios = group.log_ratios();
    let r_bar = mean(&group.rewards);
    let l_bar = mean(&ratios);
    let weights = group
        .rewards
        .iter()
        .zip(&ratios)
        .map(|(r, l)| beta * ((r - r_bar) - beta * (l - l_bar)))
        .collect();
    Ok(WeightVector {
        weights,
        scheme: Scheme::Gvpo,
        zero_sum: true,
    })
}

/// Negative log-likelihood form with frozen weights: value
/// `-sum_i w_i log pi_theta(y_i)` and its gradient with the weights held
/// constant, accumulated response-by-response through the policy.
pub fn gvpo_loss_nll_form(
    group: &GroupBatch,
    config: &GvpoConfig,
    theta: &PolicyParams,
) -> Result<(f64, Gradient)> {
    let w = gvpo_weights(group, config)?;
    let value = -w
        .weights
        .iter()
        .zip(&group.logp_theta)
        .map(|(w, l)| w * l)
        .sum::<f64>();
    let mut coeffs = vec![0.0; theta.num_responses()];
    for (&y, wi) in group.responses.iter().zip(&w.weights) {
        coeffs[y] -= wi;
    }
    let mut grad = Gradient::zeros(theta.num_params());
    let range = theta.block_range(group.prompt);
    theta.add_weighted_grad(group.prompt, &coeffs, &mut grad.0[range]);
    Ok((value, grad))
}

/// Mean-squared-error form `1/2 sum_i [(beta l_i - beta mean l) - (R_i - mean R)]^2`.
pub fn gvpo_loss_mse_form(group: &GroupBatch, config: &GvpoConfig) -> Result<f64> {
    group.require_group()?;
    let beta = config.beta;
    let ratios = group.log_ratios();
    let r_bar = mean(&group.rewards);
    let l_bar = mean(&ratios);
    Ok(0.5
        * group
            .rewards
            .iter()
            .zip(&ratios)
            .map(|(r, l)| {
                let d = beta * (l - l_bar) - (r - r_bar);
                d * d
            })
            .sum::<f64>())
}

/// Variance form `1/2 sum_i [(beta l_i - R_i) - mean(beta l - R)]^2`.
pub fn gvpo_loss_variance_form(group: &GroupBatch, config: &GvpoConfig) -> Result<f64> {
    group.require_group()?;
    let gaps: Vec<f64> = group
        .log_ratios()
        .iter()
        .zip(&group.rewards)
        .map(|(l, r)| config.beta * l - r)
        .collect();
    let m = mean(&gaps);
    Ok(0.5 * gaps.iter().map(|g| (g - m) * (g - m)).sum::<f64>())
}

/// Exact MSE form under enumeration: half the exact GVPO loss, so that its
/// gradient matches [`gvpo_exact_gradient`].
pub fn gvpo_loss_mse_exact(
    theta: &PolicyParams,
    theta_prime: &PolicyParams,
    sampling: &[Vec<f64>],
    task: &TaskSpec,
    config: &GvpoConfig,
) -> Result<f64> {
    Ok(
        0.5 * crate::oracle::exact_gvpo_loss_under(
            theta,
            theta_prime,
            sampling,
            task,
            config.beta,
        )?,
    )
}

/// Expectation-form GVPO weights for prompt `x`: `s_y * w_y` where `s` is
/// the sampling distribution and `w_y` is the GVPO weight with group means
/// replaced by `s`-expectations.
pub fn gvpo_exact_weights(
    theta_lp: &[f64],
    aux_lp: &[f64],
    sampling: &[f64],
    rewards: &[f64],
    beta: f64,
) -> Vec<f64> {
    let ratios: Vec<f64> = theta_lp.iter().zip(aux_lp).map(|(a, b)| a - b).collect();
    let r_bar = masked_mean(sampling, rewards);
    let l_bar = masked_mean(sampling, &ratios);
    (0..rewards.len())
        .map(|y| {
            if sampling[y] > 0.0 {
                sampling[y] * beta * ((rewards[y] - r_bar) - beta * (ratios[y] - l_bar))
            } else {
                0.0
            }
        })
        .collect()
}

/// `E_p[x]` over the support of `p`, accumulated as offsets from the first
/// supported entry so that a constant vector has an exactly constant mean.
pub(crate) fn masked_mean(probs: &[f64], xs: &[f64]) -> f64 {
    let Some(anchor) = probs.iter().position(|&p| p > 0.0).map(|y| xs[y]) else {
        return 0.0;
    };
    anchor
        + probs
            .iter()
            .zip(xs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, x)| p * (x - anchor))
            .sum::<f64>()
}

/// Exact assembled GVPO gradient `-mean_x sum_y s(y|x) w_y grad log pi_theta(y|x)`.
/// This is the gradient of [`gvpo_loss_mse_exact`].
pub fn gvpo_exact_gradient(
    theta: &PolicyParams,
    theta_prime: &PolicyParams,
    sampling: &[Vec<f64>],
    task: &TaskSpec,
    config: &GvpoConfig,
) -> Result<Gradient> {
    theta.check_task(task)?;
    theta.check_compatible(theta_prime)?;
    let n = task.num_prompts() as f64;
    let mut grad = Gradient::zeros(theta.num_params());
    for x in 0..task.num_prompts() {
        let aux = theta_prime.log_probs(x);
        let aux_probs: Vec<f64> = aux.iter().map(|l| l.exp()).collect();
        check_support(&aux_probs, &sampling[x], x)?;
        let w = gvpo_exact_weights(
            &theta.log_probs(x),
            &aux,
            &sampling[x],
            task.reward_row(x),
            config.beta,
        );
        let coeffs: Vec<f64> = w.iter().map(|wy| -wy / n).collect();
        let range = theta.block_range(x);
        theta.add_weighted_grad(x, &coeffs, &mut grad.0[range]);
    }
    Ok(grad)
}

/// The three expectation terms of the beta = 1 decomposition, averaged over
/// prompts, and `combined = -2 (advantage + cov - var / 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub advantage_term: f64,
    pub cov_term: f64,
    pub var_term: f64,
    pub combined: f64,
}

/// Which regularizers of the decomposed objective are kept.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub drop_var: bool,
    pub drop_cov: bool,
    /// Replace the variance term by an entropy bonus with this coefficient.
    pub entropy_substitute: Option<f64>,
}

impl AblationFlags {
    pub fn is_active(&self) -> bool {
        self.drop_var || self.drop_cov || self.entropy_substitute.is_some()
    }

    fn keeps_var(&self) -> bool {
        !self.drop_var && self.entropy_substitute.is_none()
    }
}

fn require_unit_beta(beta: f64) -> Result<()> {
    if beta != 1.0 {
        return Err(LabError::config(
            "beta",
            format!("the decomposition is only defined at beta = 1, got {beta}"),
        ));
    }
    Ok(())
}

/// Decomposition of the exact GVPO loss at beta = 1 under `y ~ pi_s`:
///
/// ```text
/// advantage = E[(R - E R) log pi_theta]
/// cov       = E[(log pi_theta - E log pi_theta)(log pi_theta' - E log pi_theta')]
/// var       = E[(log pi_theta - E log pi_theta)^2]
/// ```
///
/// `combined` differs from the exact loss by a theta-independent constant.
pub fn gvpo_loss_decomposed(
    theta: &PolicyParams,
    theta_prime: &PolicyParams,
    sampling: &[Vec<f64>],
    task: &TaskSpec,
    beta: f64,
) -> Result<Decomposition> {
    require_unit_beta(beta)?;
    theta.check_task(task)?;
    theta.check_compatible(theta_prime)?;
    let n = task.num_prompts() as f64;
    let (mut adv, mut cov, mut var) = (0.0, 0.0, 0.0);
    for x in 0..task.num_prompts() {
        let aux = theta_prime.log_probs(x);
        let aux_probs: Vec<f64> = aux.iter().map(|l| l.exp()).collect();
        check_support(&aux_probs, &sampling[x], x)?;
        let terms =
            decomposition_terms(&theta.log_probs(x), &aux, &sampling[x], task.reward_row(x));
        adv += terms.0 / n;
        cov += terms.1 / n;
        var += terms.2 / n;
    }
    Ok(Decomposition {
        advantage_term: adv,
        cov_term: cov,
        var_term: var,
        combined: -2.0 * (adv + cov - 0.5 * var),
    })
}

fn decomposition_terms(lt: &[f64], la: &[f64], s: &[f64], rewards: &[f64]) -> (f64, f64, f64) {
    let support: Vec<usize> = (0..s.len()).filter(|&y| s[y] > 0.0).collect();
    let (mr, mt, ma) = (
        masked_mean(s, rewards),
        masked_mean(s, lt),
        masked_mean(s, la),
    );
    let mut terms = (0.0, 0.0, 0.0);
    for &y in &support {
        let ct = lt[y] - mt;
        terms.0 += s[y] * (rewards[y] - mr) * lt[y];
        terms.1 += s[y] * ct * (la[y] - ma);
        terms.2 += s[y] * ct * ct;
    }
    terms
}

/// Value of the decomposed objective with the regularizers selected by
/// `flags`: `[var] - 2 [cov] - 2 advantage - c H(pi_theta)`.
pub fn ablated_objective(
    theta: &PolicyParams,
    theta_prime: &PolicyParams,
    sampling: &[Vec<f64>],
    task: &TaskSpec,
    flags: &AblationFlags,
) -> Result<f64> {
    let d = gvpo_loss_decomposed(theta, theta_prime, sampling, task, 1.0)?;
    let mut value = -2.0 * d.advantage_term;
    if flags.keeps_var() {
        value += d.var_term;
    }
    if !flags.drop_cov {
        value -= 2.0 * d.cov_term;
    }
    if let Some(c) = flags.entropy_substitute {
        value -= c * mean_entropy(theta);
    }
    Ok(value)
}

/// Exact gradient of [`ablated_objective`]. With no flags set this equals
/// the gradient of the exact GVPO loss at beta = 1.
pub fn ablated_objective_gradient(
    theta: &PolicyParams,
    theta_prime: &PolicyParams,
    sampling: &[Vec<f64>],
    task: &TaskSpec,
    flags: &AblationFlags,
) -> Result<Gradient> {
    theta.check_task(task)?;
    theta.check_compatible(theta_prime)?;
    let n = task.num_prompts() as f64;
    let mut grad = Gradient::zeros(theta.num_params());
    for x in 0..task.num_prompts() {
        let s = &sampling[x];
        let lt = theta.log_probs(x);
        let la = theta_prime.log_probs(x);
        let aux_probs: Vec<f64> = la.iter().map(|l| l.exp()).collect();
        check_support(&aux_probs, s, x)?;
        let rewards = task.reward_row(x);
        let mr = masked_mean(s, rewards);
        let mt = masked_mean(s, &lt);
        let ma = masked_mean(s, &la);
        let mut coeffs = vec![0.0; lt.len()];
        for y in 0..lt.len() {
            if s[y] <= 0.0 {
                continue;
            }
            let mut c = -2.0 * (rewards[y] - mr);
            if flags.keeps_var() {
                c += 2.0 * (lt[y] - mt);
            }
            if !flags.drop_cov {
                c -= 2.0 * (la[y] - ma);
            }
            coeffs[y] = s[y] * c / n;
        }
        if let Some(c) = flags.entropy_substitute {
            let probs: Vec<f64> = lt.iter().map(|l| l.exp()).collect();
            let h = entropy_of(&probs, &lt);
            for y in 0..lt.len() {
                if probs[y] > 0.0 {
                    coeffs[y] += c * probs[y] * (lt[y] + h) / n;
                }
            }
        }
        let range = theta.block_range(x);
        theta.add_weighted_grad(x, &coeffs, &mut grad.0[range]);
    }
    Ok(grad)
}

fn entropy_of(probs: &[f64], log_probs: &[f64]) -> f64 {
    -probs
        .iter()
        .zip(log_probs)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, l)| p * l)
        .sum::<f64>()
}

/// Mean Shannon entropy of `pi_theta(. | x)` over prompts.
pub fn mean_entropy(theta: &PolicyParams) -> f64 {
    (0..theta.num_prompts())
        .map(|x| {
            let lp = theta.log_probs(x);
            let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            entropy_of(&p, &lp)
        })
        .sum::<f64>()
        / theta.num_prompts() as f64
}

/// GRPO weights `clip(pi_theta/pi_old) * (R_i - mean R) / max(std R, floor)`.
pub fn grpo_weights(group: &GroupBatch, config: &GrpoConfig) -> Result<WeightVector> {
    group.require_group()?;
    config.validate()?;
    let advantages = grpo_advantages(&group.rewards, config);
    let weights = advantages
        .iter()
        .zip(group.logp_theta.iter().zip(&group.logp_old))
        .map(|(&a, (lt, lo))| grpo_multiplier((lt - lo).exp(), a, config) * a)
        .collect();
    Ok(WeightVector {
        weights,
        scheme: Scheme::Grpo,
        zero_sum: false,
    })
}

/// Group-standardized advantages with a population standard deviation.
pub fn grpo_advantages(rewards: &[f64], config: &GrpoConfig) -> Vec<f64> {
    let r_bar = mean(rewards);
    let scale = if config.use_std_normalization {
        population_std(rewards).max(config.std_floor)
    } else {
        1.0
    };
    rewards.iter().map(|r| (r - r_bar) / scale).collect()
}

/// Importance multiplier for one response. The literal form clamps the
/// ratio to `[1 - eps, 1 + eps]`; the PPO form passes the ratio through
/// where the unclipped surrogate is active and zeroes it where the clip
/// binds.
pub fn grpo_multiplier(ratio: f64, advantage: f64, config: &GrpoConfig) -> f64 {
    let (lo, hi) = (1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon);
    if config.ppo_min_form {
        let clipped = (advantage > 0.0 && ratio > hi) || (advantage < 0.0 && ratio < lo);
        if clipped {
            0.0
        } else {
            ratio
        }
    } else {
        ratio.clamp(lo, hi)
    }
}

/// Gradient of `coefficient * mean_x KL(pi_theta(.|x) || pi_ref(.|x))`.
pub fn kl_penalty_gradient(
    theta: &PolicyParams,
    reference: &PolicyParams,
    coefficient: f64,
) -> Result<Gradient> {
    theta.check_compatible(reference)?;
    let n = theta.num_prompts() as f64;
    let mut grad = Gradient::zeros(theta.num_params());
    if coefficient == 0.0 {
        return Ok(grad);
    }
    for x in 0..theta.num_prompts() {
        let lt = theta.log_probs(x);
        let lr = reference.log_probs(x);
        let probs: Vec<f64> = lt.iter().map(|l| l.exp()).collect();
        let kl = crate::oracle::kl_from_log_probs(&lt, &lr);
        // d KL = sum_y pi(y) (log pi(y) - log ref(y) - KL) d log pi(y)
        let coeffs: Vec<f64> = (0..lt.len())
            .map(|y| coefficient * probs[y] * (lt[y] - lr[y] - kl) / n)
            .collect();
        let range = theta.block_range(x);
        theta.add_weighted_grad(x, &coeffs, &mut grad.0[range]);
    }
    Ok(grad)
}

/// DPO weights for one preference pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoPair {
    /// Index of the preferred response within the group.
    pub winner: usize,
    pub loser: usize,
    pub w_w: f64,
    pub w_l: f64,
    /// `-log sigmoid(beta (l_w - l_l))`.
    pub loss: f64,
}

/// `w_w = sigmoid(beta (l_l - l_w))`, `w_l = -w_w`, with `l` the log-ratio
/// against the reference.
pub fn dpo_weights_from_ratios(ratio_w: f64, ratio_l: f64, beta: f64) -> (f64, f64, f64) {
    let w_w = sigmoid(beta * (ratio_l - ratio_w));
    (w_w, -w_w, neg_log_sigmoid(beta * (ratio_w - ratio_l)))
}

/// DPO weights for the pair `(winner, loser)` of group indices. The group's
/// auxiliary log-probabilities play the reference role. The winner must
/// have a strictly higher reward.
pub fn dpo_weights(group: &GroupBatch, winner: usize, loser: usize, beta: f64) -> Result<DpoPair> {
    if winner >= group.len() || loser >= group.len() {
        return Err(LabError::DimensionMismatch {
            expected: group.len(),
            actual: winner.max(loser) + 1,
        });
    }
    let (rw, rl) = (group.rewards[winner], group.rewards[loser]);
    if group.responses[winner] == group.responses[loser] || rw == rl {
        return Err(LabError::RewardTie(
            group.responses[winner],
            group.responses[loser],
        ));
    }
    if rw < rl {
        return Err(LabError::config(
            "dpo.pair",
            format!("winner reward {rw} is below loser reward {rl}"),
        ));
    }
    let ratios = group.log_ratios();
    let (w_w, w_l, loss) = dpo_weights_from_ratios(ratios[winner], ratios[loser], beta);
    Ok(DpoPair {
        winner,
        loser,
        w_w,
        w_l,
        loss,
    })
}

/// All ordered pairs of group members with strictly different rewards,
/// oriented so the higher reward wins.
pub fn dpo_pairs(group: &GroupBatch, beta: f64) -> Vec<DpoPair> {
    let mut pairs = Vec::new();
    for i in 0..group.len() {
        for j in 0..group.len() {
            if group.rewards[i] > group.rewards[j] {
                if let Ok(p) = dpo_weights(group, i, j, beta) {
                    pairs.push(p);
                }
            }
        }
    }
    pairs
}

/// SFT on the pseudo-label: the highest-reward response, lowest response id
/// on ties. Returns the chosen group index and the single weight `[1]`.
pub fn sft_weights(group: &GroupBatch) -> Result<(usize, WeightVector)> {
    if group.is_empty() {
        return Err(LabError::GroupTooSmall(0));
    }
    let target = sft_target(&group.rewards, &group.responses);
    Ok((
        target,
        WeightVector {
            weights: vec![1.0],
            scheme: Scheme::Sft,
            zero_sum: false,
        },
    ))
}

/// Index of the highest reward, breaking ties by the smallest id.
pub fn sft_target(rewards: &[f64], ids: &[usize]) -> usize {
    let mut best = 0;
    for i in 1..rewards.len() {
        if rewards[i] > rewards[best] || (rewards[i] == rewards[best] && ids[i] < ids[best]) {
            best = i;
        }
    }
    best
}

/// Per-response gradients `grad log pi_theta(y_i | x)` of a group.
pub fn response_grads(theta: &PolicyParams, prompt: usize, responses: &[usize]) -> Vec<Gradient> {
    responses
        .iter()
        .map(|&y| theta.grad_log_prob(prompt, y))
        .collect()
}

/// `-sum_groups sum_i w_i * grads[g][i]`, summed in group order.
pub fn assemble_gradient(
    weight_vectors: &[WeightVector],
    grads: &[Vec<Gradient>],
) -> Result<Gradient> {
    if weight_vectors.len() != grads.len() {
        return Err(LabError::DimensionMismatch {
            expected: weight_vectors.len(),
            actual: grads.len(),
        });
    }
    let dim = grads
        .iter()
        .flatten()
        .map(Gradient::len)
        .next()
        .unwrap_or(0);
    let mut total = Gradient::zeros(dim);
    for (wv, gs) in weight_vectors.iter().zip(grads) {
        if wv.weights.len() != gs.len() {
            return Err(LabError::DimensionMismatch {
                expected: wv.weights.len(),
                actual: gs.len(),
            });
        }
        for (w, g) in wv.weights.iter().zip(gs) {
            total.add_scaled(-w, g)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{exact_gvpo_loss_under, finite_diff_grad, optimal_policy, sampling_rows};
    use crate::policy::PolicyKind;
    use crate::rng;
    use crate::taskenv::{make_bandit, RewardGenSpec};

    fn r100() -> TaskSpec {
        make_bandit(
            1,
            3,
            &RewardGenSpec::Explicit {
                table: vec![vec![1.0, 0.0, 0.0]],
            },
            0,
        )
        .unwrap()
    }

    fn group_on(
        task: &TaskSpec,
        theta: &PolicyParams,
        aux: &PolicyParams,
        ys: Vec<usize>,
    ) -> GroupBatch {
        GroupBatch::build(task, 0, ys, theta, aux, theta, "test").unwrap()
    }

    fn manual_group(rewards: Vec<f64>, ratios: Vec<f64>) -> GroupBatch {
        let k = rewards.len();
        GroupBatch {
            prompt: 0,
            responses: (0..k).collect(),
            rewards,
            logp_theta: ratios.iter().map(|r| r - 2.0).collect(),
            logp_aux: vec![-2.0; k],
            logp_old: vec![-2.0; k],
            source: "manual".into(),
        }
    }

    #[test]
    fn gvpo_weights_at_reference() {
        let task = r100();
        let u = PolicyParams::init_uniform(&task, PolicyKind::Flat).unwrap();
        let g = group_on(&task, &u, &u, vec![0, 1, 2]);
        let w = gvpo_weights(&g, &GvpoConfig { beta: 1.0 }).unwrap();
        for (a, b) in w.weights.iter().zip([2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let flat = manual_group(vec![0.4; 4], vec![0.0; 4]);
        let w = gvpo_weights(&flat, &GvpoConfig { beta: 0.3 }).unwrap();
        assert!(w.weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gvpo_weights_ignore_reward_shift() {
        let g = manual_group(vec![0.1, 0.9, 0.3], vec![0.2, -0.5, 0.1]);
        let mut shifted = g.clone();
        shifted.rewards.iter_mut().for_each(|r| *r += 5.0);
        let cfg = GvpoConfig { beta: 0.7 };
        let a = gvpo_weights(&g, &cfg).unwrap();
        let b = gvpo_weights(&shifted, &cfg).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn groups_need_two_members() {
        let g = manual_group(vec![1.0], vec![0.0]);
        assert!(matches!(
            gvpo_weights(&g, &GvpoConfig { beta: 1.0 }),
            Err(LabError::GroupTooSmall(1))
        ));
        assert!(grpo_weights(&g, &GrpoConfig::default()).is_err());
        assert!(gvpo_loss_mse_form(&g, &GvpoConfig { beta: 1.0 }).is_err());
    }

    #[test]
    fn mse_and_variance_forms() {
        let task = r100();
        let u = PolicyParams::init_uniform(&task, PolicyKind::Flat).unwrap();
        let g = group_on(&task, &u, &u, vec![0, 1, 2]);
        let cfg = GvpoConfig { beta: 1.0 };
        assert!((gvpo_loss_mse_form(&g, &cfg).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let mut r = rng::seeded(21);
        for _ in 0..50 {
            let rewards = rng::uniform_vec(&mut r, 6, -3.0, 3.0);
            let ratios = rng::uniform_vec(&mut r, 6, -4.0, 4.0);
            let g = manual_group(rewards, ratios);
            let cfg = GvpoConfig {
                beta: rng::uniform(&mut r, 0.05, 2.0),
            };
            let a = gvpo_loss_mse_form(&g, &cfg).unwrap();
            let b = gvpo_loss_variance_form(&g, &cfg).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_form_vanishes_at_optimum() {
        let task = make_bandit(1, 5, &RewardGenSpec::default(), 3).unwrap();
        let u = PolicyParams::init_uniform(&task, PolicyKind::Flat).unwrap();
        let star = optimal_policy(&u, &task, 0.5)
            .unwrap()
            .to_params(&task, PolicyKind::Flat)
            .unwrap();
        let g = group_on(&task, &star, &u, vec![0, 3, 3, 4, 1]);
        assert!(gvpo_loss_mse_form(&g, &GvpoConfig { beta: 0.5 }).unwrap() < 1e-12);
    }

    #[test]
    fn nll_value_at_reference_is_zero() {
        let task = r100();
        let u = PolicyParams::init_uniform(&task, PolicyKind::Flat).unwrap();
        let g = group_on(&task, &u, &u, vec![0, 1, 2]);
        let (value, _) = gvpo_loss_nll_form(&g, &GvpoConfig { beta: 1.0 }, &u).unwrap();
        assert!(value.abs() < 1e-15);
    }

    #[test]
    fn nll_gradient_matches_assembly_and_mse_fd() {
        let task = make_bandit(1, 7, &RewardGenSpec::default(), 4).unwrap();
        let mut r = rng::seeded(5);
        let theta = PolicyParams::random(&task, PolicyKind::Flat, 2.0, &mut r).unwrap();
        let aux = PolicyParams::random(&task, PolicyKind::Flat, 2.0, &mut r).unwrap();
        let ys = vec![0, 2, 2, 5, 6];
        let cfg = GvpoConfig { beta: 0.8 };
        let g = group_on(&task, &theta, &aux, ys.clone());
        let (_, nll) = gvpo_loss_nll_form(&g, &cfg, &theta).unwrap();
        let w = gvpo_weights(&g, &cfg).unwrap();
        let assembled = assemble_gradient(&[w], &[response_grads(&theta, 0, &ys)]).unwrap();
        for (a, b) in nll.0.iter().zip(&assembled.0) {
            assert!((a - b).abs() < 1e-12);
        }
        let fd = finite_diff_grad(
            |p| gvpo_loss_mse_form(&group_on(&task, p, &aux, ys.clone()), &cfg).unwrap(),
            &theta,
            1e-5,
        );
        for (a, b) in fd.0.iter().zip(&assembled.0) {
            assert!((a - b).abs() < 1e-8 + 1e-5 * b.abs());
        }
    }

    #[test]
    fn exact_gradient_matches_fd_of_exact_mse() {
        let task = make_bandit(2, 5, &RewardGenSpec::default(), 8).unwrap();
        let mut r = rng::seeded(6);
        let theta = PolicyParams::random(&task, PolicyKind::Flat, 1.5, &mut r).unwrap();
        let aux = PolicyParams::random(&task, PolicyKind::Flat, 1.5, &mut r).unwrap();
        let s = sampling_rows(&PolicyParams::random(&task, PolicyKind::Flat, 1.0, &mut r).unwrap());
        let cfg = GvpoConfig { beta: 0.6 };
        let g = gvpo_exact_gradient(&theta, &aux, &s, &task, &cfg).unwrap();
        let fd = finite_diff_grad(
            |p| gvpo_loss_mse_exact(p, &aux, &s, &task, &cfg).unwrap(),
            &theta,
            1e-5,
        );
        for (a, b) in fd.0.iter().zip(&g.0) {
            assert!((a - b).abs() < 1e-8 + 1e-5 * b.abs());
        }
    }

    #[test]
    fn decomposition_identities() {
        let task = make_bandit(1, 5, &RewardGenSpec::default(), 2).unwrap();
        let u = PolicyParams::init_uniform(&task, PolicyKind::Flat).unwrap();
        let s = sampling_rows(&u);
        let d = gvpo_loss_decomposed(&u, &u, &s, &task, 1.0).unwrap();
        assert_eq!(d.var_term, 0.0);
        let theta =
            PolicyParams::random(&task, PolicyKind::Flat, 2.0, &mut rng::seeded(1)).unwrap();
        let d = gvpo_loss_decomposed(&theta, &theta, &s, &task, 1.0).unwrap();
        assert!((d.cov_term - d.var_term).abs() < 1e-12);
        assert!(gvpo_loss_decomposed(&theta, &theta, &s, &task, 0.5).is_err());
    }

    #[test]
    fn toy_distribution_has_no_variance_penalty() {
        let task = make_bandit(1, 5, &RewardGenSpec::default(), 0).unwrap();
        let theta = PolicyParams::from_logits(
            PolicyKind::Flat,
            1,
            task.space(),
            vec![-50.0, -50.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let s = sampling_rows(&theta);
        let d = gvpo_loss_decomposed(&theta, &theta, &s, &task, 1.0).unwrap();
        assert!(d.var_term < 1e-6, "var_term = {}", d.var_term);
    }

    #[test]
    fn decomposed_gradient_matches_exact_loss_gradient() {
        let task = make_bandit(2, 4, &RewardGenSpec::default(), 11).unwrap();
        let mut r = rng::seeded(13);
        let theta = PolicyParams::random(&task, PolicyKind::Flat, 1.0, &mut r).unwrap();
        let aux = PolicyParams::random(&task, PolicyKind::Flat, 1.0, &mut r).unwrap();
        let s = sampling_rows(&aux);
        let analytic =
            ablated_objective_gradient(&theta, &aux, &s, &task, &AblationFlags::default()).unwrap();
        let fd_exact = finite_diff_grad(
            |p| exact_gvpo_loss_under(p, &aux, &s, &task, 1.0).unwrap(),
            &theta,
            1e-5,
        );
        let fd_combined = finite_diff_grad(
            |p| {
                gvpo_loss_decomposed(p, &aux, &s, &task, 1.0)
                    .unwrap()
                    .combined
            },
            &theta,
            1e-5,
        );
        for ((a, b), c) in analytic.0.iter().zip(&fd_exact.0).zip(&fd_combined.0) {
            assert!((a - b).abs() < 1e-7);
            assert!((b - c).abs() < 1e-7);
        }
    }

    #[test]
    fn ablated_gradients_match_finite_differences() {
        let task = make_bandit(1, 5, &RewardGenSpec::default(), 12).unwrap();
        let mut r = rng::seeded(14);
        let theta = PolicyParams::random(&task, PolicyKind::Flat, 1.0, &mut r).unwrap();
        let aux = PolicyParams::random(&task, PolicyKind::Flat, 1.0, &mut r).unwrap();
        let s = sampling_rows(&aux);
        for flags in [
            AblationFlags {
                drop_var: true,
                ..Default::default()
            },
            AblationFlags {
                drop_cov: true,
                ..Default::default()
            },
            AblationFlags {
                drop_var: true,
                drop_cov: true,
                entropy_substitute: None,
            },
            AblationFlags {
                entropy_substitute: Some(0.1),
                ..Default::default()
            },
        ] {
            let g = ablated_objective_gradient(&theta, &aux, &s, &task, &flags).unwrap();
            let fd = finite_diff_grad(
                |p| ablated_objective(p, &aux, &s, &task, &flags).unwrap(),
                &theta,
                1e-5,
            );
            for (a, b) in g.0.iter().zip(&fd.0) {
                assert!((a - b).abs() < 1e-7, "{flags:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn grpo_standardized_weights() {
        let g = manual_group(vec![1.0, 0.0, 1.0, 0.0], vec![0.0; 4]);
        let w = grpo_weights(&g, &GrpoConfig::default()).unwrap();
        for (a, b) in w.weights.iter().zip([1.0, -1.0, 1.0, -1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let flat = manual_group(vec![0.3; 4], vec![0.0; 4]);
        assert!(grpo_weights(&flat, &GrpoConfig::default())
            .unwrap()
            .weights
            .iter()
            .all(|&v| v == 0.0));
        let unscaled = GrpoConfig {
            use_std_normalization: false,
            ..Default::default()
        };
        let w = grpo_weights(&g, &unscaled).unwrap();
        assert_eq!(w.weights, vec![0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn grpo_clip() {
        let cfg = GrpoConfig::default();
        assert!((grpo_multiplier(10.0, 1.0, &cfg) - 1.2).abs() < 1e-15);
        assert!((grpo_multiplier(0.01, 1.0, &cfg) - 0.8).abs() < 1e-15);
        let ppo = GrpoConfig {
            ppo_min_form: true,
            ..cfg
        };
        assert_eq!(grpo_multiplier(10.0, 1.0, &ppo), 0.0);
        assert_eq!(grpo_multiplier(10.0, -1.0, &ppo), 10.0);
        assert_eq!(grpo_multiplier(0.5, -1.0, &ppo), 0.0);
    }

    #[test]
    fn grpo_weights_with_off_policy_ratio() {
        let mut g = manual_group(vec![1.0, 0.0, 1.0, 0.0], vec![0.0; 4]);
        g.logp_old[0] = g.logp_theta[0] - 10f64.ln();
        let w = grpo_weights(&g, &GrpoConfig::default()).unwrap();
        assert!((w.weights[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn kl_penalty_gradient_matches_fd() {
        let task = make_bandit(2, 4, &RewardGenSpec::default(), 1).unwrap();
        let mut r = rng::seeded(15);
        let theta = PolicyParams::random(&task, PolicyKind::Flat, 1.5, &mut r).unwrap();
        let reference = PolicyParams::random(&task, PolicyKind::Flat, 1.5, &mut r).unwrap();
        let g = kl_penalty_gradient(&theta, &reference, 0.3).unwrap();
        let fd = finite_diff_grad(
            |p| {
                0.3 * (0..2)
                    .map(|x| {
                        crate::oracle::kl_from_log_probs(&p.log_probs(x), &reference.log_probs(x))
                    })
                    .sum::<f64>()
                    / 2.0
            },
            &theta,
            1e-5,
        );
        for (a, b) in g.0.iter().zip(&fd.0) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn dpo_values() {
        let (w_w, w_l, _) = dpo_weights_from_ratios(0.0, 0.0, 1.0);
        assert_eq!((w_w, w_l), (0.5, -0.5));
        let (w_w, _, _) = dpo_weights_from_ratios(0.2, -0.3, 1.0);
        assert!((w_w - 0.3775407).abs() < 1e-7);
        let (w_w, _, loss) = dpo_weights_from_ratios(400.0, -400.0, 1.0);
        assert!(w_w < 1e-300 && loss < 1e-300);
    }

    #[test]
    fn dpo_pairs_skip_ties_and_are_antisymmetric() {
        let g = manual_group(vec![1.0, 0.0, 1.0], vec![0.3, -0.1, 0.0]);
        let pairs = dpo_pairs(&g, 1.0);
        assert_eq!(pairs.len(), 2);
        for p in &pairs {
            assert_eq!(p.w_l, -p.w_w);
            assert_eq!(g.rewards[p.loser], 0.0);
        }
        assert!(matches!(
            dpo_weights(&g, 0, 2, 1.0),
            Err(LabError::RewardTie(..))
        ));
        assert!(dpo_weights(&g, 1, 0, 1.0).is_err());
    }

    #[test]
    fn sft_target_selection() {
        let g = manual_group(vec![0.2, 0.9, 0.9, 0.1], vec![0.0; 4]);
        let (t, w) = sft_weights(&g).unwrap();
        assert_eq!(t, 1);
        assert_eq!(w.weights, vec![1.0]);
        assert_eq!(sft_target(&[0.5, 0.5], &[7, 3]), 1);
    }

    #[test]
    fn sft_assembly_is_a_single_term() {
        let task = r100();
        let u = PolicyParams::init_uniform(&task, PolicyKind::Flat).unwrap();
        let g = group_on(&task, &u, &u, vec![2, 0, 1]);
        let (t, w) = sft_weights(&g).unwrap();
        let grads = vec![response_grads(&u, 0, &[g.responses[t]])];
        let assembled = assemble_gradient(&[w], &grads).unwrap();
        let direct = u.grad_log_prob(0, 0);
        for (a, b) in assembled.0.iter().zip(&direct.0) {
            assert_eq!(*a, -b);
        }
        for (a, b) in assembled.0.iter().zip([-2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn assembly_edge_cases() {
        let task = r100();
        let u = PolicyParams::init_uniform(&task, PolicyKind::Flat).unwrap();
        let grads = vec![response_grads(&u, 0, &[0, 1, 2])];
        let zero = WeightVector {
            weights: vec![0.0; 3],
            scheme: Scheme::Gvpo,
            zero_sum: true,
        };
        assert!(
            assemble_gradient(std::slice::from_ref(&zero), &grads)
                .unwrap()
                .norm()
                == 0.0
        );
        let w = WeightVector {
            weights: vec![0.3, -0.1, -0.2],
            ..zero.clone()
        };
        let w2 = WeightVector {
            weights: vec![0.6, -0.2, -0.4],
            ..zero
        };
        let a = assemble_gradient(std::slice::from_ref(&w), &grads).unwrap();
        let b = assemble_gradient(&[w2], &grads).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        let short = vec![response_grads(&u, 0, &[0, 1])];
        assert!(matches!(
            assemble_gradient(&[w], &short),
            Err(LabError::DimensionMismatch { .. })
        ));
    }
}

//! The optimization loop.
//!
//! Every step draws (or enumerates) responses from the sampling
//! distribution `pi_s`, converts them into per-response weights for the
//! configured scheme, assembles the unified gradient and applies one plain
//! gradient-descent update. Gradients are averaged over prompts; within a
//! Monte-Carlo group GVPO divides by `k - 1`, which makes the group sum an
//! unbiased estimate of the exact expectation gradient.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numeric::{neg_log_sigmoid, sigmoid};
use crate::oracle::{self, check_support, kl_from_log_probs, OptimalPolicySolution};
use crate::policy::{self, Gradient, PolicyKind, PolicyParams};
use crate::rng::{self, LabRng};
use crate::schemes::masked_mean;
use crate::schemes::{self, AblationFlags, GroupBatch, GrpoConfig, GvpoConfig, Scheme};
use crate::taskenv::TaskSpec;

/// Gradient norms above this abort the run.
pub const DIVERGENCE_GRAD_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// The policy at the start of the step.
    OldPolicy,
    /// The fixed reference policy.
    Reference,
    Uniform,
    /// `historical` draws from a per-prompt replay buffer plus `fresh`
    /// draws from the old policy.
    ReplayMixture,
    /// A fixed user-supplied policy (`SamplerSpec::custom`).
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixRatio {
    pub historical: usize,
    pub fresh: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub mix_ratio: Option<MixRatio>,
    pub buffer_capacity: usize,
    pub custom: Option<PolicyParams>,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Reference,
            mix_ratio: None,
            buffer_capacity: 64,
            custom: None,
        }
    }
}

impl SamplerSpec {
    pub fn of(kind: SamplerKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }

    pub fn replay(historical: usize, fresh: usize) -> Self {
        Self {
            kind: SamplerKind::ReplayMixture,
            mix_ratio: Some(MixRatio { historical, fresh }),
            ..Default::default()
        }
    }

    pub fn custom(policy: PolicyParams) -> Self {
        Self {
            kind: SamplerKind::Custom,
            custom: Some(policy),
            ..Default::default()
        }
    }

    pub fn label(&self) -> String {
        match (self.kind, self.mix_ratio) {
            (SamplerKind::ReplayMixture, Some(m)) => format!("replay_{}_{}", m.historical, m.fresh),
            (kind, _) => serde_json::to_value(kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxPolicyMode {
    /// `pi_theta'` stays at the reference.
    FixedReference,
    /// `pi_theta'` becomes the pre-update policy after every step.
    RefreshEachStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub k: usize,
    pub sampler: SamplerSpec,
    pub gradient_mode: GradientMode,
    pub aux_policy_mode: AuxPolicyMode,
    pub seed: u64,
    pub ablation: AblationFlags,
    pub grpo: GrpoConfig,
    /// Heavy-ball momentum coefficient; `None` is plain gradient descent.
    pub momentum: Option<f64>,
    pub policy_kind: PolicyKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Gvpo,
            beta: 1.0,
            learning_rate: 0.5,
            steps: 1000,
            k: 5,
            sampler: SamplerSpec::default(),
            gradient_mode: GradientMode::Exact,
            aux_policy_mode: AuxPolicyMode::FixedReference,
            seed: 0,
            ablation: AblationFlags::default(),
            grpo: GrpoConfig::default(),
            momentum: None,
            policy_kind: PolicyKind::Flat,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(LabError::config(
                "beta",
                format!("must be positive, got {}", self.beta),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(LabError::config(
                "learning_rate",
                format!("must be positive, got {}", self.learning_rate),
            ));
        }
        if self.steps == 0 {
            return Err(LabError::config("steps", "must be at least 1"));
        }
        if self.k < 2 {
            return Err(LabError::config(
                "k",
                format!("group size must be at least 2, got {}", self.k),
            ));
        }
        if let Some(m) = self.momentum {
            if !(0.0..1.0).contains(&m) {
                return Err(LabError::config("momentum", "must lie in [0, 1)"));
            }
        }
        self.grpo.validate()?;
        if self.ablation.is_active()
            && (self.scheme != Scheme::Gvpo
                || self.gradient_mode != GradientMode::Exact
                || self.beta != 1.0)
        {
            return Err(LabError::config(
                "ablation",
                "ablations require scheme gvpo, exact gradients and beta = 1",
            ));
        }
        if let Some(c) = self.ablation.entropy_substitute {
            if !c.is_finite() {
                return Err(LabError::config(
                    "ablation.entropy_substitute",
                    "must be finite",
                ));
            }
        }
        match self.sampler.kind {
            SamplerKind::ReplayMixture => {
                let Some(m) = self.sampler.mix_ratio else {
                    return Err(LabError::config(
                        "sampler.mix_ratio",
                        "required for replay_mixture",
                    ));
                };
                if m.historical + m.fresh != self.k {
                    return Err(LabError::config(
                        "sampler.mix_ratio",
                        format!(
                            "historical + fresh = {} must equal k = {}",
                            m.historical + m.fresh,
                            self.k
                        ),
                    ));
                }
                if m.historical > 0 && m.fresh == 0 {
                    return Err(LabError::config(
                        "sampler.mix_ratio",
                        "at least one fresh draw is needed to fill the buffer",
                    ));
                }
                if self.gradient_mode == GradientMode::Exact {
                    return Err(LabError::config(
                        "sampler.kind",
                        "replay_mixture has no closed-form distribution; use monte_carlo",
                    ));
                }
            }
            SamplerKind::Custom if self.sampler.custom.is_none() => {
                return Err(LabError::config(
                    "sampler.custom",
                    "required for the custom sampler",
                ));
            }
            _ => {}
        }
        if self.sampler.buffer_capacity == 0 {
            return Err(LabError::config(
                "sampler.buffer_capacity",
                "must be positive",
            ));
        }
        Ok(())
    }
}

/// One report row. Decomposition columns are filled only for exact GVPO at
/// beta = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub mean_reward: f64,
    pub kl_to_optimal: f64,
    pub kl_to_aux: f64,
    pub adv_term: Option<f64>,
    pub cov_term: Option<f64>,
    pub var_term: Option<f64>,
}

pub const CSV_HEADER: [&str; 9] = [
    "step",
    "loss",
    "grad_norm",
    "mean_reward",
    "kl_to_optimal",
    "kl_to_aux",
    "adv_term",
    "cov_term",
    "var_term",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub steps_completed: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub mean_reward: f64,
    pub kl_to_optimal: f64,
    pub kl_to_aux: f64,
    /// `E R - beta * KL(pi_theta || pi_ref)`.
    pub objective: f64,
    /// First step whose `kl_to_optimal` is at most 1e-3.
    pub steps_to_kl_1e_3: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: TrainConfig,
    pub final_metrics: FinalMetrics,
    pub wall_clock_ms: u128,
    pub aborted: bool,
    pub abort_reason: Option<String>,
    /// Parameters at the moment of an abort.
    pub abort_state: Option<PolicyParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<MetricRow>,
    pub summary: TrainSummary,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: PolicyParams,
    pub report: TrainReport,
}

/// Distance of a policy to the KL-regularized optimum and its reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceMetrics {
    pub kl_to_optimal: f64,
    pub kl_to_aux: f64,
    pub mean_reward: f64,
}

/// `kl_to_optimal = mean_x KL(pi*(.|x) || pi_theta(.|x))` with `pi*` the
/// optimum relative to `aux`, `kl_to_aux = mean_x KL(pi_theta || aux)`, and
/// the exact expected reward under `pi_theta`.
pub fn convergence_metrics(
    theta: &PolicyParams,
    task: &TaskSpec,
    beta: f64,
    aux: &PolicyParams,
) -> Result<ConvergenceMetrics> {
    let optimal = oracle::optimal_policy(aux, task, beta)?;
    Ok(metrics_against(theta, task, &optimal, aux))
}

fn metrics_against(
    theta: &PolicyParams,
    task: &TaskSpec,
    optimal: &OptimalPolicySolution,
    aux: &PolicyParams,
) -> ConvergenceMetrics {
    let n = task.num_prompts() as f64;
    let mut m = ConvergenceMetrics {
        kl_to_optimal: 0.0,
        kl_to_aux: 0.0,
        mean_reward: 0.0,
    };
    for x in 0..task.num_prompts() {
        let lt = theta.log_probs(x);
        m.kl_to_optimal += kl_from_log_probs(&optimal.log_probs[x], &lt) / n;
        m.kl_to_aux += kl_from_log_probs(&lt, &aux.log_probs(x)) / n;
        m.mean_reward += lt
            .iter()
            .zip(task.reward_row(x))
            .map(|(l, r)| l.exp() * r)
            .sum::<f64>()
            / n;
    }
    m
}

/// Policies a sampler may draw from.
#[derive(Debug, Clone, Copy)]
pub struct PolicyRoles<'a> {
    pub old: &'a PolicyParams,
    pub reference: &'a PolicyParams,
    pub aux: &'a PolicyParams,
}

/// Draws groups of responses according to a [`SamplerSpec`].
#[derive(Debug, Clone)]
pub struct Sampler {
    spec: SamplerSpec,
    buffers: Vec<VecDeque<usize>>,
}

/// Builds a sampler after checking that its distribution covers the
/// auxiliary policy's support on every prompt.
pub fn make_sampler(spec: &SamplerSpec, roles: PolicyRoles<'_>) -> Result<Sampler> {
    let sampler = Sampler {
        spec: spec.clone(),
        buffers: vec![VecDeque::new(); roles.aux.num_prompts()],
    };
    sampler.check_support(roles)?;
    Ok(sampler)
}

impl Sampler {
    pub fn spec(&self) -> &SamplerSpec {
        &self.spec
    }

    /// Probability rows of the sampling distribution, when it has one.
    pub fn exact_rows(&self, roles: PolicyRoles<'_>) -> Result<Vec<Vec<f64>>> {
        let n = roles.aux.num_responses();
        let rows = match self.spec.kind {
            SamplerKind::OldPolicy => oracle::sampling_rows(roles.old),
            SamplerKind::Reference => oracle::sampling_rows(roles.reference),
            SamplerKind::Uniform => vec![vec![1.0 / n as f64; n]; roles.aux.num_prompts()],
            SamplerKind::Custom => {
                let custom = self.custom()?;
                custom.check_compatible(roles.aux)?;
                oracle::sampling_rows(custom)
            }
            SamplerKind::ReplayMixture => {
                return Err(LabError::config(
                    "sampler.kind",
                    "replay_mixture has no closed-form distribution",
                ))
            }
        };
        Ok(rows)
    }

    fn custom(&self) -> Result<&PolicyParams> {
        self.spec
            .custom
            .as_ref()
            .ok_or_else(|| LabError::config("sampler.custom", "missing custom policy"))
    }

    /// Support coverage of `aux` by the sampler. For the replay mixture the
    /// fresh draws come from the old policy, which is what must cover.
    pub fn check_support(&self, roles: PolicyRoles<'_>) -> Result<()> {
        let rows = match self.spec.kind {
            SamplerKind::ReplayMixture => oracle::sampling_rows(roles.old),
            _ => self.exact_rows(roles)?,
        };
        for (x, row) in rows.iter().enumerate() {
            let aux = roles.aux.distribution(x).probs;
            check_support(&aux, row, x)?;
        }
        Ok(())
    }

    /// `k` response ids for prompt `x`.
    pub fn draw(
        &mut self,
        x: usize,
        k: usize,
        roles: PolicyRoles<'_>,
        rng: &mut LabRng,
    ) -> Result<Vec<usize>> {
        let n = roles.aux.num_responses();
        let ys = match self.spec.kind {
            SamplerKind::OldPolicy => roles.old.sample_k(x, k, rng),
            SamplerKind::Reference => roles.reference.sample_k(x, k, rng),
            SamplerKind::Uniform => policy::sample_from(&vec![1.0 / n as f64; n], k, rng),
            SamplerKind::Custom => self.custom()?.sample_k(x, k, rng),
            SamplerKind::ReplayMixture => {
                let m = self
                    .spec
                    .mix_ratio
                    .ok_or_else(|| LabError::config("sampler.mix_ratio", "missing"))?;
                let buffer = &mut self.buffers[x];
                let (historical, fresh) = if buffer.len() >= m.historical {
                    let hist: Vec<usize> = buffer.iter().copied().collect();
                    let h = (0..m.historical)
                        .map(|_| policy::pick_uniform(&hist, rng))
                        .collect::<Vec<_>>();
                    (h, roles.old.sample_k(x, m.fresh, rng))
                } else {
                    (Vec::new(), roles.old.sample_k(x, k, rng))
                };
                for &y in &fresh {
                    if buffer.len() == self.spec.buffer_capacity {
                        buffer.pop_front();
                    }
                    buffer.push_back(y);
                }
                historical.into_iter().chain(fresh).collect()
            }
        };
        Ok(ys)
    }

    pub fn buffer(&self, x: usize) -> &VecDeque<usize> {
        &self.buffers[x]
    }
}

/// Mutable state of one training run.
#[derive(Debug, Clone)]
pub struct TrainerState {
    task: TaskSpec,
    config: TrainConfig,
    theta: PolicyParams,
    reference: PolicyParams,
    aux: PolicyParams,
    optimal: OptimalPolicySolution,
    sampler: Sampler,
    rng: LabRng,
    velocity: Option<Gradient>,
    step: usize,
    last_old: Option<PolicyParams>,
}

/// Why a step could not be applied.
#[derive(Debug, Clone, PartialEq)]
pub enum StepError {
    /// Invalid inputs; the run cannot start or continue.
    Fatal(String),
    /// The divergence guard fired; parameters are left untouched.
    Diverged(String),
}

impl TrainerState {
    /// Starts a run at `init`, which also serves as the reference policy.
    pub fn new(task: &TaskSpec, init: &PolicyParams, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        init.check_task(task)?;
        let optimal = oracle::optimal_policy(init, task, config.beta)?;
        let roles = PolicyRoles {
            old: init,
            reference: init,
            aux: init,
        };
        let sampler = make_sampler(&config.sampler, roles)?;
        Ok(Self {
            task: task.clone(),
            config: config.clone(),
            theta: init.clone(),
            reference: init.clone(),
            aux: init.clone(),
            optimal,
            sampler,
            rng: rng::stream(config.seed, 0),
            velocity: None,
            step: 0,
            last_old: None,
        })
    }

    pub fn theta(&self) -> &PolicyParams {
        &self.theta
    }

    pub fn aux(&self) -> &PolicyParams {
        &self.aux
    }

    pub fn reference(&self) -> &PolicyParams {
        &self.reference
    }

    pub fn optimal(&self) -> &OptimalPolicySolution {
        &self.optimal
    }

    pub fn sampler(&self) -> &Sampler {
        &self.sampler
    }

    /// The old policy of the most recent step.
    pub fn last_old(&self) -> Option<&PolicyParams> {
        self.last_old.as_ref()
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Current convergence metrics against the reference optimum.
    pub fn metrics(&self) -> ConvergenceMetrics {
        metrics_against(&self.theta, &self.task, &self.optimal, &self.aux)
    }

    /// Loss and gradient at the current parameters without updating.
    pub fn loss_and_gradient(&mut self) -> Result<(f64, Gradient)> {
        let old = self.theta.clone();
        self.compute(&old)
    }

    fn compute(&mut self, old: &PolicyParams) -> Result<(f64, Gradient)> {
        match self.config.gradient_mode {
            GradientMode::Exact => {
                let roles = PolicyRoles {
                    old,
                    reference: &self.reference,
                    aux: &self.aux,
                };
                let rows = self.sampler.exact_rows(roles)?;
                exact_loss_and_gradient(
                    &self.task,
                    &self.theta,
                    &self.aux,
                    &self.reference,
                    &rows,
                    &self.config,
                )
            }
            GradientMode::MonteCarlo => {
                let mut groups = Vec::with_capacity(self.task.num_prompts());
                for x in 0..self.task.num_prompts() {
                    let roles = PolicyRoles {
                        old,
                        reference: &self.reference,
                        aux: &self.aux,
                    };
                    let ys = self.sampler.draw(x, self.config.k, roles, &mut self.rng)?;
                    groups.push(GroupBatch::build(
                        &self.task,
                        x,
                        ys,
                        &self.theta,
                        &self.aux,
                        old,
                        self.sampler.spec.label(),
                    )?);
                }
                sampled_loss_and_gradient(&self.theta, &self.reference, &groups, &self.config)
            }
        }
    }

    /// One sample-weight-assemble-update cycle.
    pub fn step(&mut self) -> std::result::Result<MetricRow, StepError> {
        let old = self.theta.clone();
        let (loss, grad) = self
            .compute(&old)
            .map_err(|e| StepError::Fatal(e.to_string()))?;
        let grad_norm = grad.norm();
        if !loss.is_finite() {
            return Err(StepError::Diverged(format!(
                "non-finite loss at step {}",
                self.step + 1
            )));
        }
        if !grad_norm.is_finite() || grad.0.iter().any(|g| !g.is_finite()) {
            return Err(StepError::Diverged(format!(
                "non-finite gradient at step {}",
                self.step + 1
            )));
        }
        if grad_norm > DIVERGENCE_GRAD_NORM {
            return Err(StepError::Diverged(format!(
                "gradient norm {grad_norm:e} exceeds {DIVERGENCE_GRAD_NORM:e} at step {}",
                self.step + 1
            )));
        }
        let decomposition = self.decomposition(&old);

        let direction = match self.config.momentum {
            Some(mu) => {
                let v = self
                    .velocity
                    .get_or_insert_with(|| Gradient::zeros(grad.len()));
                v.scale(mu);
                v.add_scaled(1.0, &grad).expect("same dimension");
                v.clone()
            }
            None => grad,
        };
        let lr = self.config.learning_rate;
        let mut next = self.theta.clone();
        next.logits_mut()
            .iter_mut()
            .zip(&direction.0)
            .for_each(|(t, g)| *t -= lr * g);
        if next.logits().iter().any(|l| !l.is_finite()) {
            return Err(StepError::Diverged(format!(
                "non-finite parameters after step {}",
                self.step + 1
            )));
        }
        self.theta = next;
        if self.config.aux_policy_mode == AuxPolicyMode::RefreshEachStep {
            self.aux = old.clone();
        }
        self.last_old = Some(old);
        self.step += 1;

        let m = self.metrics();
        Ok(MetricRow {
            step: self.step,
            loss,
            grad_norm,
            mean_reward: m.mean_reward,
            kl_to_optimal: m.kl_to_optimal,
            kl_to_aux: m.kl_to_aux,
            adv_term: decomposition.map(|d| d.advantage_term),
            cov_term: decomposition.map(|d| d.cov_term),
            var_term: decomposition.map(|d| d.var_term),
        })
    }

    fn decomposition(&self, old: &PolicyParams) -> Option<schemes::Decomposition> {
        if self.config.scheme != Scheme::Gvpo
            || self.config.gradient_mode != GradientMode::Exact
            || self.config.beta != 1.0
        {
            return None;
        }
        let roles = PolicyRoles {
            old,
            reference: &self.reference,
            aux: &self.aux,
        };
        let rows = self.sampler.exact_rows(roles).ok()?;
        schemes::gvpo_loss_decomposed(&self.theta, &self.aux, &rows, &self.task, 1.0).ok()
    }
}

/// Exact expectation loss and gradient under the sampling rows.
pub fn exact_loss_and_gradient(
    task: &TaskSpec,
    theta: &PolicyParams,
    aux: &PolicyParams,
    reference: &PolicyParams,
    sampling: &[Vec<f64>],
    config: &TrainConfig,
) -> Result<(f64, Gradient)> {
    let n = task.num_prompts() as f64;
    match config.scheme {
        Scheme::Gvpo if config.ablation.is_active() => {
            let value = schemes::ablated_objective(theta, aux, sampling, task, &config.ablation)?;
            let mut g =
                schemes::ablated_objective_gradient(theta, aux, sampling, task, &config.ablation)?;
            g.scale(0.5);
            Ok((0.5 * value, g))
        }
        Scheme::Gvpo => {
            let cfg = GvpoConfig::new(config.beta)?;
            let value = schemes::gvpo_loss_mse_exact(theta, aux, sampling, task, &cfg)?;
            let g = schemes::gvpo_exact_gradient(theta, aux, sampling, task, &cfg)?;
            Ok((value, g))
        }
        Scheme::Grpo => {
            let mut grad = Gradient::zeros(theta.num_params());
            let mut value = 0.0;
            for x in 0..task.num_prompts() {
                let s = &sampling[x];
                let rewards = task.reward_row(x);
                let lt = theta.log_probs(x);
                let mr = masked_mean(s, rewards);
                let var: f64 = s
                    .iter()
                    .zip(rewards)
                    .map(|(p, r)| p * (r - mr) * (r - mr))
                    .sum();
                let scale = if config.grpo.use_std_normalization {
                    var.sqrt().max(config.grpo.std_floor)
                } else {
                    1.0
                };
                // theta is the old policy in exact mode, so every ratio is 1
                let coeffs: Vec<f64> = (0..lt.len())
                    .map(|y| {
                        let a = (rewards[y] - mr) / scale;
                        -s[y] * schemes::grpo_multiplier(1.0, a, &config.grpo) * a / n
                    })
                    .collect();
                value += coeffs.iter().zip(&lt).map(|(c, l)| c * l).sum::<f64>();
                let range = theta.block_range(x);
                theta.add_weighted_grad(x, &coeffs, &mut grad.0[range]);
            }
            add_kl_penalty(
                theta,
                reference,
                config.grpo.kl_coefficient,
                &mut value,
                &mut grad,
            )?;
            Ok((value, grad))
        }
        Scheme::Dpo => {
            let beta = config.beta;
            let mut grad = Gradient::zeros(theta.num_params());
            let mut value = 0.0;
            for x in 0..task.num_prompts() {
                let s = &sampling[x];
                let rewards = task.reward_row(x);
                let ratios: Vec<f64> = theta
                    .log_probs(x)
                    .iter()
                    .zip(aux.log_probs(x))
                    .map(|(a, b)| a - b)
                    .collect();
                let mut coeffs = vec![0.0; rewards.len()];
                for w in 0..rewards.len() {
                    for l in 0..rewards.len() {
                        if rewards[w] <= rewards[l] {
                            continue;
                        }
                        let mass = s[w] * s[l];
                        if mass == 0.0 {
                            continue;
                        }
                        let margin = beta * (ratios[w] - ratios[l]);
                        let ww = sigmoid(-margin);
                        value += mass * neg_log_sigmoid(margin) / n;
                        coeffs[w] -= beta * mass * ww / n;
                        coeffs[l] += beta * mass * ww / n;
                    }
                }
                let range = theta.block_range(x);
                theta.add_weighted_grad(x, &coeffs, &mut grad.0[range]);
            }
            Ok((value, grad))
        }
        Scheme::Sft => {
            let mut grad = Gradient::zeros(theta.num_params());
            let mut value = 0.0;
            for x in 0..task.num_prompts() {
                let rewards = task.reward_row(x);
                let ids: Vec<usize> = (0..rewards.len()).collect();
                let target = schemes::sft_target(rewards, &ids);
                value -= theta.log_prob(x, target) / n;
                let mut coeffs = vec![0.0; rewards.len()];
                coeffs[target] = -1.0 / n;
                let range = theta.block_range(x);
                theta.add_weighted_grad(x, &coeffs, &mut grad.0[range]);
            }
            Ok((value, grad))
        }
    }
}

fn add_kl_penalty(
    theta: &PolicyParams,
    reference: &PolicyParams,
    coefficient: f64,
    value: &mut f64,
    grad: &mut Gradient,
) -> Result<()> {
    if coefficient == 0.0 {
        return Ok(());
    }
    let n = theta.num_prompts() as f64;
    *value += coefficient
        * (0..theta.num_prompts())
            .map(|x| kl_from_log_probs(&theta.log_probs(x), &reference.log_probs(x)))
            .sum::<f64>()
        / n;
    grad.add_scaled(
        1.0,
        &schemes::kl_penalty_gradient(theta, reference, coefficient)?,
    )
}

/// Monte-Carlo loss and gradient from one group per prompt.
pub fn sampled_loss_and_gradient(
    theta: &PolicyParams,
    reference: &PolicyParams,
    groups: &[GroupBatch],
    config: &TrainConfig,
) -> Result<(f64, Gradient)> {
    let n = groups.len() as f64;
    let mut grad = Gradient::zeros(theta.num_params());
    let mut value = 0.0;
    for g in groups {
        let k = g.len() as f64;
        let mut coeffs = vec![0.0; theta.num_responses()];
        match config.scheme {
            Scheme::Gvpo => {
                let cfg = GvpoConfig::new(config.beta)?;
                let w = schemes::gvpo_weights(g, &cfg)?;
                let norm = n * (k - 1.0);
                for (&y, wi) in g.responses.iter().zip(&w.weights) {
                    coeffs[y] -= wi / norm;
                }
                value += schemes::gvpo_loss_mse_form(g, &cfg)? / norm;
            }
            Scheme::Grpo => {
                let w = schemes::grpo_weights(g, &config.grpo)?;
                for ((&y, wi), lt) in g.responses.iter().zip(&w.weights).zip(&g.logp_theta) {
                    coeffs[y] -= wi / (n * k);
                    value -= wi * lt / (n * k);
                }
            }
            Scheme::Dpo => {
                let norm = n * k * (k - 1.0);
                for p in schemes::dpo_pairs(g, config.beta) {
                    coeffs[g.responses[p.winner]] -= config.beta * p.w_w / norm;
                    coeffs[g.responses[p.loser]] -= config.beta * p.w_l / norm;
                    value += p.loss / norm;
                }
            }
            Scheme::Sft => {
                let (t, _) = schemes::sft_weights(g)?;
                coeffs[g.responses[t]] -= 1.0 / n;
                value -= g.logp_theta[t] / n;
            }
        }
        let range = theta.block_range(g.prompt);
        theta.add_weighted_grad(g.prompt, &coeffs, &mut grad.0[range]);
    }
    if config.scheme == Scheme::Grpo {
        add_kl_penalty(
            theta,
            reference,
            config.grpo.kl_coefficient,
            &mut value,
            &mut grad,
        )?;
    }
    Ok((value, grad))
}

/// Runs `config.steps` updates starting from `init` (which is also the
/// reference policy).
pub fn train(task: &TaskSpec, init: &PolicyParams, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_sink(task, init, config, |_| Ok(()))
}

/// [`train`], handing every row to `sink` as soon as it is produced.
pub fn train_with_sink<F>(
    task: &TaskSpec,
    init: &PolicyParams,
    config: &TrainConfig,
    mut sink: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&MetricRow) -> Result<()>,
{
    let started = Instant::now();
    let mut state = TrainerState::new(task, init, config)?;
    let mut rows: Vec<MetricRow> = Vec::with_capacity(config.steps);
    let mut abort_reason = None;
    for _ in 0..config.steps {
        match state.step() {
            Ok(row) => {
                sink(&row)?;
                rows.push(row);
            }
            Err(StepError::Fatal(msg)) => return Err(LabError::Format(msg)),
            Err(StepError::Diverged(msg)) => {
                abort_reason = Some(msg);
                break;
            }
        }
    }
    let m = state.metrics();
    let kl_ref = (0..task.num_prompts())
        .map(|x| kl_from_log_probs(&state.theta.log_probs(x), &state.reference.log_probs(x)))
        .sum::<f64>()
        / task.num_prompts() as f64;
    let last = rows.last();
    let final_metrics = FinalMetrics {
        steps_completed: rows.len(),
        loss: last.map_or(f64::NAN, |r| r.loss),
        grad_norm: last.map_or(f64::NAN, |r| r.grad_norm),
        mean_reward: m.mean_reward,
        kl_to_optimal: m.kl_to_optimal,
        kl_to_aux: m.kl_to_aux,
        objective: m.mean_reward - config.beta * kl_ref,
        steps_to_kl_1e_3: rows
            .iter()
            .find(|r| r.kl_to_optimal <= 1e-3)
            .map(|r| r.step),
    };
    let aborted = abort_reason.is_some();
    let summary = TrainSummary {
        config: config.clone(),
        final_metrics,
        wall_clock_ms: started.elapsed().as_millis(),
        aborted,
        abort_reason,
        abort_state: aborted.then(|| state.theta.clone()),
    };
    Ok(TrainOutcome {
        final_params: state.theta,
        report: TrainReport { rows, summary },
    })
}

/// Writes rows under the fixed metrics header.
pub fn write_rows_csv<W: std::io::Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
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

    fn uniform(task: &TaskSpec) -> PolicyParams {
        PolicyParams::init_uniform(task, PolicyKind::Flat).unwrap()
    }

    #[test]
    fn exact_gvpo_reaches_the_optimum() {
        let task = r100();
        let init = uniform(&task);
        let config = TrainConfig {
            steps: 5000,
            ..Default::default()
        };
        let out = train(&task, &init, &config).unwrap();
        let star = oracle::optimal_policy(&init, &task, 1.0).unwrap();
        let kl = oracle::kl(&star.policies[0], &out.final_params.distribution(0)).unwrap();
        assert!(kl < 1e-6, "kl = {kl}");
        assert!(!out.report.summary.aborted);
        assert!(out.report.rows.iter().all(|r| r.kl_to_optimal >= 0.0));
        assert!(out.report.rows.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn zero_rewards_keep_the_reference() {
        let task = make_bandit(
            2,
            4,
            &RewardGenSpec::Explicit {
                table: vec![vec![0.0; 4]; 2],
            },
            0,
        )
        .unwrap();
        let init = PolicyParams::random(&task, PolicyKind::Flat, 1.0, &mut rng::seeded(1)).unwrap();
        let out = train(
            &task,
            &init,
            &TrainConfig {
                steps: 50,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.report.rows.iter().all(|r| r.grad_norm == 0.0));
        assert_eq!(out.final_params, init);
    }

    #[test]
    fn same_seed_same_rows() {
        let task = make_bandit(3, 6, &RewardGenSpec::default(), 4).unwrap();
        let init = uniform(&task);
        let config = TrainConfig {
            gradient_mode: GradientMode::MonteCarlo,
            sampler: SamplerSpec::of(SamplerKind::OldPolicy),
            steps: 40,
            seed: 17,
            ..Default::default()
        };
        let a = train(&task, &init, &config).unwrap();
        let b = train(&task, &init, &config).unwrap();
        assert_eq!(a.report.rows, b.report.rows);
        assert_eq!(a.final_params, b.final_params);
        let c = train(&task, &init, &TrainConfig { seed: 18, ..config }).unwrap();
        assert_ne!(a.report.rows, c.report.rows);
    }

    #[test]
    fn first_step_is_on_policy_and_refresh_snapshots() {
        let task = make_bandit(2, 5, &RewardGenSpec::default(), 2).unwrap();
        let init = uniform(&task);
        let config = TrainConfig {
            scheme: Scheme::Grpo,
            gradient_mode: GradientMode::MonteCarlo,
            sampler: SamplerSpec::of(SamplerKind::OldPolicy),
            aux_policy_mode: AuxPolicyMode::RefreshEachStep,
            ..Default::default()
        };
        let mut state = TrainerState::new(&task, &init, &config).unwrap();
        let before = state.theta().clone();
        let row = state.step().unwrap();
        assert_eq!(state.last_old().unwrap(), &before);
        assert_eq!(state.aux(), &before);
        assert_ne!(state.theta(), &before);
        assert!(row.adv_term.is_none());
    }

    #[test]
    fn grad_norm_matches_assembled_gradient() {
        let task = make_bandit(2, 5, &RewardGenSpec::default(), 3).unwrap();
        let init = PolicyParams::random(&task, PolicyKind::Flat, 1.0, &mut rng::seeded(2)).unwrap();
        let config = TrainConfig::default();
        let mut state = TrainerState::new(&task, &init, &config).unwrap();
        state.theta =
            PolicyParams::random(&task, PolicyKind::Flat, 1.0, &mut rng::seeded(3)).unwrap();
        let (_, g) = state.loss_and_gradient().unwrap();
        let row = state.step().unwrap();
        assert!((row.grad_norm - g.norm()).abs() < 1e-12);
        assert!(row.var_term.is_some());
    }

    #[test]
    fn metrics_of_simple_policies() {
        let task = r100();
        let u = uniform(&task);
        let m = convergence_metrics(&u, &task, 1.0, &u).unwrap();
        assert!((m.mean_reward - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.kl_to_optimal - 0.12328445950188777).abs() < 1e-12);
        let star = oracle::optimal_policy(&u, &task, 1.0)
            .unwrap()
            .to_params(&task, PolicyKind::Flat)
            .unwrap();
        assert!(
            convergence_metrics(&star, &task, 1.0, &u)
                .unwrap()
                .kl_to_optimal
                < 1e-12
        );
    }

    #[test]
    fn uniform_sampler_is_uniform() {
        let task = make_bandit(1, 8, &RewardGenSpec::default(), 3).unwrap();
        let u = PolicyParams::random(&task, PolicyKind::Flat, 2.0, &mut rng::seeded(1)).unwrap();
        let roles = PolicyRoles {
            old: &u,
            reference: &u,
            aux: &u,
        };
        let s = make_sampler(&SamplerSpec::of(SamplerKind::Uniform), roles).unwrap();
        assert_eq!(s.exact_rows(roles).unwrap()[0], vec![0.125; 8]);
    }

    #[test]
    fn old_policy_sampler_delegates() {
        let task = make_bandit(1, 6, &RewardGenSpec::default(), 3).unwrap();
        let old = PolicyParams::random(&task, PolicyKind::Flat, 2.0, &mut rng::seeded(1)).unwrap();
        let reference = uniform(&task);
        let roles = PolicyRoles {
            old: &old,
            reference: &reference,
            aux: &reference,
        };
        let mut s = make_sampler(&SamplerSpec::of(SamplerKind::OldPolicy), roles).unwrap();
        let mut r1 = rng::seeded(5);
        let mut r2 = rng::seeded(5);
        assert_eq!(
            s.draw(0, 9, roles, &mut r1).unwrap(),
            old.sample_k(0, 9, &mut r2)
        );
    }

    #[test]
    fn replay_falls_back_to_fresh_draws() {
        let task = make_bandit(1, 6, &RewardGenSpec::default(), 3).unwrap();
        let old = uniform(&task);
        let roles = PolicyRoles {
            old: &old,
            reference: &old,
            aux: &old,
        };
        let mut s = make_sampler(&SamplerSpec::replay(2, 3), roles).unwrap();
        let mut r1 = rng::seeded(5);
        let first = s.draw(0, 5, roles, &mut r1).unwrap();
        assert_eq!(first, old.sample_k(0, 5, &mut rng::seeded(5)));
        assert_eq!(s.buffer(0).len(), 5);
        let second = s.draw(0, 5, roles, &mut r1).unwrap();
        assert_eq!(second.len(), 5);
        assert!(second[..2].iter().all(|y| first.contains(y)));
        assert_eq!(s.buffer(0).len(), 8);
    }

    #[test]
    fn replay_buffer_is_a_ring() {
        let task = make_bandit(1, 6, &RewardGenSpec::default(), 3).unwrap();
        let old = uniform(&task);
        let roles = PolicyRoles {
            old: &old,
            reference: &old,
            aux: &old,
        };
        let mut spec = SamplerSpec::replay(1, 4);
        spec.buffer_capacity = 6;
        let mut s = make_sampler(&spec, roles).unwrap();
        let mut r = rng::seeded(9);
        for _ in 0..10 {
            s.draw(0, 5, roles, &mut r).unwrap();
        }
        assert_eq!(s.buffer(0).len(), 6);
    }

    #[test]
    fn support_hole_is_rejected() {
        let task = make_bandit(1, 3, &RewardGenSpec::default(), 3).unwrap();
        let init = uniform(&task);
        let hole =
            PolicyParams::from_logits(PolicyKind::Flat, 1, task.space(), vec![0.0, -1000.0, 0.0])
                .unwrap();
        let config = TrainConfig {
            sampler: SamplerSpec::custom(hole),
            ..Default::default()
        };
        assert!(matches!(
            train(&task, &init, &config),
            Err(LabError::SupportViolation { response: 1, .. })
        ));
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig {
                beta: -1.0,
                ..Default::default()
            },
            TrainConfig {
                k: 1,
                ..Default::default()
            },
            TrainConfig {
                steps: 0,
                ..Default::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                scheme: Scheme::Grpo,
                ablation: AblationFlags {
                    drop_var: true,
                    ..Default::default()
                },
                ..Default::default()
            },
            TrainConfig {
                beta: 0.5,
                ablation: AblationFlags {
                    drop_cov: true,
                    ..Default::default()
                },
                ..Default::default()
            },
            TrainConfig {
                k: 5,
                gradient_mode: GradientMode::MonteCarlo,
                sampler: SamplerSpec::replay(2, 2),
                ..Default::default()
            },
            TrainConfig {
                sampler: SamplerSpec::replay(2, 3),
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn divergence_guard_aborts() {
        let task = make_bandit(1, 4, &RewardGenSpec::Uniform { lo: 0.0, hi: 1e9 }, 1).unwrap();
        let init = uniform(&task);
        let out = train(
            &task,
            &init,
            &TrainConfig {
                steps: 10,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.report.summary.aborted);
        assert!(out.report.summary.abort_state.is_some());
        assert!(out.report.rows.is_empty());
        assert!(out
            .report
            .summary
            .abort_reason
            .unwrap()
            .contains("gradient norm"));
    }

    #[test]
    fn every_scheme_runs_in_both_modes() {
        let task = make_bandit(2, 6, &RewardGenSpec::default(), 5).unwrap();
        let init = uniform(&task);
        for scheme in [Scheme::Sft, Scheme::Grpo, Scheme::Dpo, Scheme::Gvpo] {
            for mode in [GradientMode::Exact, GradientMode::MonteCarlo] {
                let config = TrainConfig {
                    scheme,
                    gradient_mode: mode,
                    sampler: SamplerSpec::of(SamplerKind::OldPolicy),
                    steps: 30,
                    k: 4,
                    ..Default::default()
                };
                let out = train(&task, &init, &config).unwrap();
                assert_eq!(out.report.rows.len(), 30, "{scheme} {mode:?}");
                let r0 = oracle::expected_reward(&init, &task);
                assert!(
                    out.report.summary.final_metrics.mean_reward > r0,
                    "{scheme} {mode:?}"
                );
            }
        }
    }

    #[test]
    fn exact_scheme_gradients_match_finite_differences() {
        let task = make_bandit(2, 5, &RewardGenSpec::default(), 6).unwrap();
        let mut r = rng::seeded(31);
        let theta = PolicyParams::random(&task, PolicyKind::Flat, 1.0, &mut r).unwrap();
        let aux = PolicyParams::random(&task, PolicyKind::Flat, 1.0, &mut r).unwrap();
        let s = oracle::sampling_rows(
            &PolicyParams::random(&task, PolicyKind::Flat, 1.0, &mut r).unwrap(),
        );
        for scheme in [Scheme::Sft, Scheme::Dpo, Scheme::Gvpo] {
            let config = TrainConfig {
                scheme,
                beta: 0.7,
                ..Default::default()
            };
            let (_, g) = exact_loss_and_gradient(&task, &theta, &aux, &aux, &s, &config).unwrap();
            let fd = oracle::finite_diff_grad(
                |p| {
                    exact_loss_and_gradient(&task, p, &aux, &aux, &s, &config)
                        .unwrap()
                        .0
                },
                &theta,
                1e-5,
            );
            for (a, b) in g.0.iter().zip(&fd.0) {
                assert!((a - b).abs() < 1e-7, "{scheme}: {a} vs {b}");
            }
        }
    }
}

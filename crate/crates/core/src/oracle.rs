//! Brute-force ground truth by full enumeration.
//!
//! Everything here sums over the complete response space of each prompt in
//! the log domain, so results are exact up to floating-point rounding.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numeric::{log_sum_exp, weighted_mean};
use crate::policy::{Distribution, Gradient, PolicyKind, PolicyParams};
use crate::taskenv::TaskSpec;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// The KL-regularized optimum `pi*(y|x) = pi'(y|x) exp(R(x,y)/beta) / Z(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalPolicySolution {
    pub beta: f64,
    /// `log Z(x)` per prompt.
    pub log_partition: Vec<f64>,
    /// `log pi*(y|x)` per prompt.
    pub log_probs: Vec<Vec<f64>>,
    pub policies: Vec<Distribution>,
}

impl OptimalPolicySolution {
    /// Parameters realizing `pi*` exactly (logits are the log-probabilities
    /// for the flat kind, prefix-mass ratios for the autoregressive kind).
    pub fn to_params(&self, task: &TaskSpec, kind: PolicyKind) -> Result<PolicyParams> {
        PolicyParams::from_log_probs(kind, task.space(), &self.log_probs)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(LabError::config(
            "beta",
            format!("must be positive, got {beta}"),
        ));
    }
    Ok(())
}

/// `log Z(x) = logsumexp_y(log pi'(y|x) + R(x,y)/beta)`.
pub fn partition(reference: &PolicyParams, task: &TaskSpec, beta: f64, x: usize) -> Result<f64> {
    check_beta(beta)?;
    reference.check_task(task)?;
    task.check_domain(x, 0)?;
    Ok(log_partition_row(
        &reference.log_probs(x),
        task.reward_row(x),
        beta,
    ))
}

fn log_partition_row(ref_log_probs: &[f64], rewards: &[f64], beta: f64) -> f64 {
    let tilted: Vec<f64> = ref_log_probs
        .iter()
        .zip(rewards)
        .map(|(lp, r)| lp + r / beta)
        .collect();
    log_sum_exp(&tilted)
}

/// Exact `pi*` and `log Z` for every prompt.
pub fn optimal_policy(
    reference: &PolicyParams,
    task: &TaskSpec,
    beta: f64,
) -> Result<OptimalPolicySolution> {
    check_beta(beta)?;
    reference.check_task(task)?;
    let mut log_partition = Vec::with_capacity(task.num_prompts());
    let mut log_probs = Vec::with_capacity(task.num_prompts());
    let mut policies = Vec::with_capacity(task.num_prompts());
    for x in 0..task.num_prompts() {
        let ref_lp = reference.log_probs(x);
        let tilted: Vec<f64> = ref_lp
            .iter()
            .zip(task.reward_row(x))
            .map(|(lp, r)| lp + r / beta)
            .collect();
        let log_z = log_sum_exp(&tilted);
        let lp: Vec<f64> = tilted.iter().map(|t| t - log_z).collect();
        policies.push(Distribution {
            probs: lp.iter().map(|l| l.exp()).collect(),
        });
        log_partition.push(log_z);
        log_probs.push(lp);
    }
    Ok(OptimalPolicySolution {
        beta,
        log_partition,
        log_probs,
        policies,
    })
}

/// `R_theta(x,y) = beta * log(pi_theta/pi_theta') + beta * log_partition`.
pub fn implicit_reward(
    theta: &PolicyParams,
    theta_prime: &PolicyParams,
    beta: f64,
    x: usize,
    y: usize,
    log_partition: f64,
) -> f64 {
    beta * (theta.log_prob(x, y) - theta_prime.log_prob(x, y)) + beta * log_partition
}

/// `KL(p || q)` with `0 log 0 = 0`.
pub fn kl(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(LabError::DimensionMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    let mut total = 0.0;
    for (y, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(LabError::SupportViolation {
                    prompt: 0,
                    response: y,
                });
            }
            total += pi * (pi.ln() - qi.ln());
        }
    }
    Ok(total.max(0.0))
}

/// `KL(p || q)` from log-probabilities, exact when the probabilities are
/// tiny. Entries of `p` that underflow to zero mass contribute nothing.
pub fn kl_from_log_probs(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p > 0.0 {
                p * (lp - lq)
            } else {
                0.0
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// Fails when some response has mass under `covered` but none under
/// `covering`.
pub fn check_support(covered: &[f64], covering: &[f64], prompt: usize) -> Result<()> {
    match covered
        .iter()
        .zip(covering)
        .position(|(&a, &b)| a > 0.0 && b <= 0.0)
    {
        Some(response) => Err(LabError::SupportViolation { prompt, response }),
        None => Ok(()),
    }
}

/// Per-prompt sampling probabilities of `pi_s`.
pub fn sampling_rows(pi_s: &PolicyParams) -> Vec<Vec<f64>> {
    (0..pi_s.num_prompts())
        .map(|x| pi_s.distribution(x).probs)
        .collect()
}

/// Exact expectation form of the GVPO loss:
///
/// ```text
/// mean_x E_{y~pi_s} [ (R_theta - E R_theta) - (R - E R) ]^2
/// ```
///
/// with `R_theta = beta log(pi_theta/pi_theta')`; the `beta log Z` term
/// cancels under centering and is omitted.
pub fn exact_gvpo_loss(
    theta: &PolicyParams,
    theta_prime: &PolicyParams,
    pi_s: &PolicyParams,
    task: &TaskSpec,
    beta: f64,
) -> Result<f64> {
    exact_gvpo_loss_under(theta, theta_prime, &sampling_rows(pi_s), task, beta)
}

/// [`exact_gvpo_loss`] with explicit sampling probabilities per prompt.
pub fn exact_gvpo_loss_under(
    theta: &PolicyParams,
    theta_prime: &PolicyParams,
    sampling: &[Vec<f64>],
    task: &TaskSpec,
    beta: f64,
) -> Result<f64> {
    let offsets = vec![0.0; task.num_prompts()];
    exact_gvpo_loss_shifted(theta, theta_prime, sampling, task, beta, &offsets)
}

/// The exact loss with `R_theta` carrying an explicit per-prompt additive
/// term (`beta * log Z(x)` in the uncancelled form).
pub fn exact_gvpo_loss_shifted(
    theta: &PolicyParams,
    theta_prime: &PolicyParams,
    sampling: &[Vec<f64>],
    task: &TaskSpec,
    beta: f64,
    implicit_offset: &[f64],
) -> Result<f64> {
    check_beta(beta)?;
    theta.check_task(task)?;
    theta.check_compatible(theta_prime)?;
    if sampling.len() != task.num_prompts() {
        return Err(LabError::DimensionMismatch {
            expected: task.num_prompts(),
            actual: sampling.len(),
        });
    }
    let mut total = 0.0;
    for x in 0..task.num_prompts() {
        let aux = theta_prime.log_probs(x);
        let aux_probs: Vec<f64> = aux.iter().map(|l| l.exp()).collect();
        check_support(&aux_probs, &sampling[x], x)?;
        let lt = theta.log_probs(x);
        let implicit: Vec<f64> = lt
            .iter()
            .zip(&aux)
            .map(|(a, b)| beta * (a - b) + implicit_offset[x])
            .collect();
        total += centered_square_gap(&sampling[x], &implicit, task.reward_row(x));
    }
    Ok(total / task.num_prompts() as f64)
}

/// `E_s[((a - E_s a) - (b - E_s b))^2]`, skipping zero-mass entries so that
/// `-inf` log-probabilities outside the sampling support do no harm.
fn centered_square_gap(probs: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let support: Vec<usize> = (0..probs.len()).filter(|&y| probs[y] > 0.0).collect();
    let ma: f64 = support.iter().map(|&y| probs[y] * a[y]).sum();
    let mb: f64 = support.iter().map(|&y| probs[y] * b[y]).sum();
    support
        .iter()
        .map(|&y| {
            let d = (a[y] - ma) - (b[y] - mb);
            probs[y] * d * d
        })
        .sum()
}

/// Exact expected reward `mean_x E_{y~pi} R(x,y)`.
pub fn expected_reward(policy: &PolicyParams, task: &TaskSpec) -> f64 {
    (0..task.num_prompts())
        .map(|x| weighted_mean(&policy.distribution(x).probs, task.reward_row(x)))
        .sum::<f64>()
        / task.num_prompts() as f64
}

/// Central differences `(f(theta + h e_j) - f(theta - h e_j)) / 2h` over all
/// logits.
pub fn finite_diff_grad<F>(loss_fn: F, params: &PolicyParams, h: f64) -> Gradient
where
    F: Fn(&PolicyParams) -> f64,
{
    debug_assert!((1e-8..=1e-3).contains(&h), "step {h} outside [1e-8, 1e-3]");
    let mut probe = params.clone();
    let mut grad = Gradient::zeros(params.num_params());
    for j in 0..params.num_params() {
        let base = params.logits()[j];
        probe.logits_mut()[j] = base + h;
        let up = loss_fn(&probe);
        probe.logits_mut()[j] = base - h;
        let down = loss_fn(&probe);
        probe.logits_mut()[j] = base;
        grad.0[j] = (up - down) / (2.0 * h);
    }
    grad
}

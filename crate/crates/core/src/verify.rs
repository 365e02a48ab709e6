//! Executable checks of the framework's mathematical claims.
//!
//! Each check returns a [`CheckResult`]. Checks with several conditions
//! list them as [`Component`]s; the headline `measured`/`threshold` pair is
//! the first component, and `passed` requires every component to pass.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numeric::{l2_norm, log_softmax, max_abs_diff};
use crate::oracle::{self, finite_diff_grad, DEFAULT_FD_STEP};
use crate::policy::{PolicyKind, PolicyParams};
use crate::rng::{self, LabRng};
use crate::schemes::{self, AblationFlags, GroupBatch, GvpoConfig, Scheme};
use crate::taskenv::{
    make_bandit, make_sequence_task, RewardGenSpec, SequenceRewardRule, TaskSpec,
};
use crate::trainer::{self, GradientMode, SamplerKind, SamplerSpec, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    /// Passes when `measured <= threshold`.
    Upper,
    /// Passes when `measured >= threshold`.
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    pub bound: Bound,
    pub passed: bool,
}

impl Component {
    pub fn upper(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            threshold,
            bound: Bound::Upper,
            passed: measured <= threshold,
        }
    }

    pub fn lower(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            threshold,
            bound: Bound::Lower,
            passed: measured >= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub details: String,
    pub components: Vec<Component>,
}

impl CheckResult {
    fn from_components(name: &str, components: Vec<Component>, details: String) -> Self {
        let head = components.first().expect("at least one component");
        Self {
            name: name.to_string(),
            passed: components.iter().all(|c| c.passed),
            measured: head.measured,
            threshold: head.threshold,
            details,
            components,
        }
    }

    fn failure(name: &str, threshold: f64, details: String) -> Self {
        Self {
            name: name.to_string(),
            passed: false,
            measured: f64::INFINITY,
            threshold,
            details,
            components: Vec::new(),
        }
    }

    pub fn component(&self, name: &str) -> Option<&Component> {
        self.components.iter().find(|c| c.name == name)
    }
}

/// Every tolerance used by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub zero_sum: f64,
    /// Zero-sum tolerance for the large-reward probe.
    pub zero_sum_large: f64,
    pub cancellation: f64,
    pub nll_vs_assembled: f64,
    pub fd_relative: f64,
    pub fd_absolute: f64,
    pub decomposed_vs_mse: f64,
    pub theorem1_kl: f64,
    pub theorem1_loss: f64,
    pub theorem2_kl: f64,
    pub theorem2_pointwise: f64,
    pub stationary_grad: f64,
    pub stationary_loss: f64,
    pub ablation_min_grad: f64,
    pub ablation_kl_ratio: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            zero_sum: 1e-12,
            zero_sum_large: 1e-6,
            cancellation: 1e-10,
            nll_vs_assembled: 1e-12,
            fd_relative: 1e-5,
            fd_absolute: 1e-8,
            decomposed_vs_mse: 1e-6,
            theorem1_kl: 1e-6,
            theorem1_loss: 1e-10,
            theorem2_kl: 1e-5,
            theorem2_pointwise: 1e-4,
            stationary_grad: 1e-8,
            stationary_loss: 1e-12,
            ablation_min_grad: 1e-3,
            ablation_kl_ratio: 10.0,
        }
    }
}

/// Sizes and budgets of the harness instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub trials: usize,
    pub form_trials: usize,
    pub num_prompts: usize,
    pub num_responses: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub sequence_vocab: usize,
    pub sequence_length: usize,
    pub sequence_beta: f64,
    pub sequence_steps: usize,
    pub ablation_steps: usize,
    pub thresholds: Thresholds,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            trials: 1000,
            form_trials: 100,
            num_prompts: 8,
            num_responses: 16,
            learning_rate: 0.5,
            steps: 20000,
            sequence_vocab: 4,
            sequence_length: 5,
            sequence_beta: 0.5,
            sequence_steps: 20000,
            ablation_steps: 5000,
            thresholds: Thresholds::default(),
        }
    }
}

/// Names accepted by [`run_selected`].
pub const CHECK_NAMES: [&str; 7] = [
    "zero_sum",
    "cancellation",
    "three_forms",
    "theorem1",
    "theorem2",
    "stationary",
    "ablation",
];

/// The default instance: i.i.d. U[0,1) rewards on a bandit.
pub fn default_instance(config: &VerifyConfig) -> Result<TaskSpec> {
    make_bandit(
        config.num_prompts,
        config.num_responses,
        &RewardGenSpec::default(),
        config.seed,
    )
}

/// U[0,1) rewards, resampled until every pair within a prompt differs by at
/// least `min_gap`.
pub fn generic_instance(
    num_prompts: usize,
    num_responses: usize,
    min_gap: f64,
    rng: &mut LabRng,
) -> Result<TaskSpec> {
    let table = (0..num_prompts)
        .map(|_| loop {
            let row = rng::uniform_vec(rng, num_responses, 0.0, 1.0);
            let mut sorted = row.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).all(|w| w[1] - w[0] >= min_gap) {
                break row;
            }
        })
        .collect();
    make_bandit(
        num_prompts,
        num_responses,
        &RewardGenSpec::Explicit { table },
        0,
    )
}

fn random_group(rng: &mut LabRng, k: usize, reward_scale: f64, logit_scale: f64) -> GroupBatch {
    let n = 2 * k;
    let lt = log_softmax(&rng::uniform_vec(rng, n, -logit_scale, logit_scale));
    let la = log_softmax(&rng::uniform_vec(rng, n, -logit_scale, logit_scale));
    let rewards = rng::uniform_vec(rng, n, -reward_scale, reward_scale);
    let responses: Vec<usize> = (0..k)
        .map(|_| rng::draw_index(rng, &vec![1.0 / n as f64; n]))
        .collect();
    let pick = |v: &[f64]| responses.iter().map(|&y| v[y]).collect::<Vec<_>>();
    GroupBatch {
        prompt: 0,
        rewards: pick(&rewards),
        logp_theta: pick(&lt),
        logp_aux: pick(&la),
        logp_old: pick(&lt),
        responses,
        source: "uniform".into(),
    }
}

fn random_beta(rng: &mut LabRng) -> f64 {
    rng::uniform(rng, 0.1, 2.0)
}

fn k_in(rng: &mut LabRng, lo: usize, hi: usize) -> usize {
    lo + rng::draw_index(rng, &vec![1.0 / (hi - lo + 1) as f64; hi - lo + 1])
}

/// Zero-sum weights over random groups (k in 2..=16, |R| <= 10, logits in
/// [-10, 10]), a large-reward probe (|R| <= 1e6) and the k = 2 symmetry.
pub fn check_zero_sum(num_trials: usize, seed: u64, th: &Thresholds) -> CheckResult {
    let mut rng = rng::stream(seed, 1);
    let mut worst = 0.0f64;
    let mut worst_large = 0.0f64;
    let mut worst_pair = 0.0f64;
    for _ in 0..num_trials {
        let cfg = GvpoConfig {
            beta: random_beta(&mut rng),
        };
        let k = k_in(&mut rng, 2, 16);
        let g = random_group(&mut rng, k, 10.0, 10.0);
        let w = schemes::gvpo_weights(&g, &cfg).expect("k >= 2");
        worst = worst.max(w.sum().abs());

        let g = random_group(&mut rng, k, 1e6, 10.0);
        let w = schemes::gvpo_weights(&g, &cfg).expect("k >= 2");
        worst_large = worst_large.max(w.sum().abs());

        let g = random_group(&mut rng, 2, 10.0, 10.0);
        let w = schemes::gvpo_weights(&g, &cfg).expect("k = 2");
        worst_pair = worst_pair.max((w.weights[0] + w.weights[1]).abs());
    }
    CheckResult::from_components(
        "zero_sum",
        vec![
            Component::upper("max_abs_weight_sum", worst, th.zero_sum),
            Component::upper(
                "max_abs_weight_sum_large_rewards",
                worst_large,
                th.zero_sum_large,
            ),
            Component::upper("pair_antisymmetry", worst_pair, th.zero_sum),
        ],
        format!("{num_trials} trials per probe, k in 2..=16, beta in [0.1, 2)"),
    )
}

/// Adding per-group constants `c` in [-20, 20] to every log-ratio leaves
/// the weights unchanged, and `sum w (beta l + beta c) = sum w beta l`.
pub fn check_partition_cancellation(num_trials: usize, seed: u64, th: &Thresholds) -> CheckResult {
    let mut rng = rng::stream(seed, 2);
    let mut worst_weights = 0.0f64;
    let mut worst_sum = 0.0f64;
    for _ in 0..num_trials {
        let cfg = GvpoConfig {
            beta: random_beta(&mut rng),
        };
        // several groups, each with its own constant
        for _ in 0..3 {
            let k = k_in(&mut rng, 2, 16);
            let g = random_group(&mut rng, k, 10.0, 10.0);
            let c = rng::uniform(&mut rng, -20.0, 20.0);
            let mut shifted = g.clone();
            shifted.logp_theta.iter_mut().for_each(|l| *l += c);
            let w = schemes::gvpo_weights(&g, &cfg).expect("k >= 2");
            let ws = schemes::gvpo_weights(&shifted, &cfg).expect("k >= 2");
            worst_weights = worst_weights.max(max_abs_diff(&w.weights, &ws.weights));
            let ratios = g.log_ratios();
            let plain: f64 = w
                .weights
                .iter()
                .zip(&ratios)
                .map(|(w, l)| w * cfg.beta * l)
                .sum();
            let with_c: f64 = w
                .weights
                .iter()
                .zip(&ratios)
                .map(|(w, l)| w * (cfg.beta * l + cfg.beta * c))
                .sum();
            worst_sum = worst_sum.max((plain - with_c).abs());
        }
    }
    CheckResult::from_components(
        "cancellation",
        vec![
            Component::upper("max_weight_change", worst_weights, th.cancellation),
            Component::upper("max_weighted_sum_change", worst_sum, th.cancellation),
        ],
        format!("{num_trials} trials of 3 groups, c in [-20, 20]"),
    )
}

fn fd_ratio(fd: &[f64], analytic: &[f64], th: &Thresholds) -> f64 {
    fd.iter()
        .zip(analytic)
        .map(|(a, b)| (a - b).abs() / (th.fd_relative * b.abs()).max(th.fd_absolute))
        .fold(0.0, f64::max)
}

/// Assembled weights vs frozen-weight NLL gradient, vs finite differences
/// of the MSE form, and (beta = 1, exact mode) decomposed vs MSE loss
/// gradients. The FD component is reported as the worst ratio of the
/// deviation to its allowed tolerance.
pub fn check_three_forms(num_trials: usize, seed: u64, th: &Thresholds) -> CheckResult {
    let mut rng = rng::stream(seed, 3);
    let (mut worst_nll, mut worst_fd, mut worst_dec) = (0.0f64, 0.0f64, 0.0f64);
    for trial in 0..num_trials {
        let n = k_in(&mut rng, 3, 8);
        let task = make_bandit(
            2,
            n,
            &RewardGenSpec::default(),
            rng::draw_index(&mut rng, &[0.5, 0.5]) as u64 + trial as u64,
        )
        .expect("valid bandit");
        let theta = PolicyParams::random(&task, PolicyKind::Flat, 2.0, &mut rng).expect("shape");
        let aux = PolicyParams::random(&task, PolicyKind::Flat, 2.0, &mut rng).expect("shape");
        let beta = if trial % 4 == 0 {
            0.1
        } else {
            random_beta(&mut rng)
        };
        let cfg = GvpoConfig { beta };
        let k = k_in(&mut rng, 2, 8);
        let prompt = trial % 2;
        let ys = theta.sample_k(prompt, k, &mut rng);
        let group = |p: &PolicyParams| {
            GroupBatch::build(&task, prompt, ys.clone(), p, &aux, p, "old_policy")
                .expect("in range")
        };
        let g = group(&theta);
        let (_, nll) = schemes::gvpo_loss_nll_form(&g, &cfg, &theta).expect("k >= 2");
        let w = schemes::gvpo_weights(&g, &cfg).expect("k >= 2");
        let assembled =
            schemes::assemble_gradient(&[w], &[schemes::response_grads(&theta, prompt, &ys)])
                .expect("shapes");
        worst_nll = worst_nll.max(max_abs_diff(&nll.0, &assembled.0));
        let fd = finite_diff_grad(
            |p| schemes::gvpo_loss_mse_form(&group(p), &cfg).expect("k >= 2"),
            &theta,
            DEFAULT_FD_STEP,
        );
        worst_fd = worst_fd.max(fd_ratio(&fd.0, &assembled.0, th));

        let s = oracle::sampling_rows(
            &PolicyParams::random(&task, PolicyKind::Flat, 1.0, &mut rng).expect("shape"),
        );
        let fd_mse = finite_diff_grad(
            |p| oracle::exact_gvpo_loss_under(p, &aux, &s, &task, 1.0).expect("full support"),
            &theta,
            DEFAULT_FD_STEP,
        );
        let fd_dec = finite_diff_grad(
            |p| {
                schemes::gvpo_loss_decomposed(p, &aux, &s, &task, 1.0)
                    .expect("full support")
                    .combined
            },
            &theta,
            DEFAULT_FD_STEP,
        );
        worst_dec = worst_dec.max(max_abs_diff(&fd_mse.0, &fd_dec.0));
    }
    CheckResult::from_components(
        "three_forms",
        vec![
            Component::upper("nll_vs_assembled", worst_nll, th.nll_vs_assembled),
            Component::upper("mse_fd_vs_assembled_tolerance_ratio", worst_fd, 1.0),
            Component::upper("decomposed_fd_vs_mse_fd", worst_dec, th.decomposed_vs_mse),
        ],
        format!(
            "{num_trials} instances; FD step {DEFAULT_FD_STEP:e}, tolerance max({:e} * |g|, {:e})",
            th.fd_relative, th.fd_absolute
        ),
    )
}

fn gvpo_exact_config(
    beta: f64,
    lr: f64,
    steps: usize,
    sampler: SamplerSpec,
    kind: PolicyKind,
) -> TrainConfig {
    TrainConfig {
        scheme: Scheme::Gvpo,
        beta,
        learning_rate: lr,
        steps,
        sampler,
        gradient_mode: GradientMode::Exact,
        policy_kind: kind,
        ..Default::default()
    }
}

/// Trains exact GVPO from the uniform reference with `pi_s = pi_theta'`
/// fixed; returns (final KL to the optimum, final exact loss, final policy).
pub fn run_theorem1(
    task: &TaskSpec,
    kind: PolicyKind,
    beta: f64,
    steps: usize,
    lr: f64,
) -> Result<(f64, f64, PolicyParams)> {
    let init = PolicyParams::init_uniform(task, kind)?;
    let config = gvpo_exact_config(
        beta,
        lr,
        steps,
        SamplerSpec::of(SamplerKind::Reference),
        kind,
    );
    let out = trainer::train(task, &init, &config)?;
    if let Some(reason) = out.report.summary.abort_reason {
        return Err(LabError::Format(format!("training aborted: {reason}")));
    }
    let loss = oracle::exact_gvpo_loss(&out.final_params, &init, &init, task, beta)?;
    Ok((
        out.report.summary.final_metrics.kl_to_optimal,
        loss,
        out.final_params,
    ))
}

/// Exact GVPO converges to the tilted optimum on a bandit and, when
/// `sequence` is given, on an autoregressive sequence task.
pub fn check_theorem1(
    task: &TaskSpec,
    beta: f64,
    steps: usize,
    lr: f64,
    sequence: Option<(&TaskSpec, f64, usize)>,
    th: &Thresholds,
) -> CheckResult {
    let mut components = Vec::new();
    let mut details = Vec::new();
    match run_theorem1(task, PolicyKind::Flat, beta, steps, lr) {
        Ok((kl, loss, _)) => {
            components.push(Component::upper("final_kl_to_optimal", kl, th.theorem1_kl));
            components.push(Component::upper("final_exact_loss", loss, th.theorem1_loss));
            details.push(format!(
                "bandit {}x{}, beta {beta}, lr {lr}, {steps} steps",
                task.num_prompts(),
                task.num_responses()
            ));
        }
        Err(e) => return CheckResult::failure("theorem1", th.theorem1_kl, e.to_string()),
    }
    if let Some((seq, seq_beta, seq_steps)) = sequence {
        let seq_lr = lr / (seq_beta * seq_beta);
        match run_theorem1(seq, PolicyKind::Autoregressive, seq_beta, seq_steps, seq_lr) {
            Ok((kl, _, _)) => {
                components.push(Component::upper(
                    "sequence_final_kl_to_optimal",
                    kl,
                    th.theorem1_kl,
                ));
                details.push(format!(
                    "sequence task with {} responses, beta {seq_beta}, lr {seq_lr}, {seq_steps} steps",
                    seq.num_responses()
                ));
            }
            Err(e) => {
                components.push(Component::upper(
                    "sequence_final_kl_to_optimal",
                    f64::INFINITY,
                    th.theorem1_kl,
                ));
                details.push(format!("sequence run failed: {e}"));
            }
        }
    }
    CheckResult::from_components("theorem1", components, details.join("; "))
}

/// The samplers used by the theorem-2 check: reference, uniform and a
/// full-support random skew.
pub fn theorem2_samplers(task: &TaskSpec, seed: u64) -> Result<Vec<SamplerSpec>> {
    let skew = PolicyParams::random(task, PolicyKind::Flat, 1.0, &mut rng::stream(seed, 5))?;
    Ok(vec![
        SamplerSpec::of(SamplerKind::Reference),
        SamplerSpec::of(SamplerKind::Uniform),
        SamplerSpec::custom(skew),
    ])
}

/// Exact GVPO under several sampling distributions reaches the same
/// optimum; a sampler with a support hole is rejected.
pub fn check_theorem2(
    task: &TaskSpec,
    beta: f64,
    samplers: &[SamplerSpec],
    steps: usize,
    lr: f64,
    th: &Thresholds,
) -> CheckResult {
    let init = match PolicyParams::init_uniform(task, PolicyKind::Flat) {
        Ok(p) => p,
        Err(e) => return CheckResult::failure("theorem2", th.theorem2_kl, e.to_string()),
    };
    let mut finals = Vec::new();
    let mut worst_kl = 0.0f64;
    let mut details = Vec::new();
    for spec in samplers {
        let config = gvpo_exact_config(beta, lr, steps, spec.clone(), PolicyKind::Flat);
        match trainer::train(task, &init, &config) {
            Ok(out) if !out.report.summary.aborted => {
                let kl = out.report.summary.final_metrics.kl_to_optimal;
                details.push(format!("{}: kl {kl:.3e}", spec.label()));
                worst_kl = worst_kl.max(kl);
                finals.push(oracle::sampling_rows(&out.final_params));
            }
            Ok(out) => {
                return CheckResult::failure(
                    "theorem2",
                    th.theorem2_kl,
                    format!(
                        "{} aborted: {:?}",
                        spec.label(),
                        out.report.summary.abort_reason
                    ),
                )
            }
            Err(e) => {
                return CheckResult::failure(
                    "theorem2",
                    th.theorem2_kl,
                    format!("{}: {e}", spec.label()),
                )
            }
        }
    }
    let mut worst_pointwise = 0.0f64;
    for a in 0..finals.len() {
        for b in a + 1..finals.len() {
            for (ra, rb) in finals[a].iter().zip(&finals[b]) {
                worst_pointwise = worst_pointwise.max(max_abs_diff(ra, rb));
            }
        }
    }

    // a sampler with no mass where the reference has some
    let mut logits = vec![0.0; init.num_params()];
    logits[0] = -1000.0;
    let detected =
        PolicyParams::from_logits(PolicyKind::Flat, task.num_prompts(), task.space(), logits)
            .map(|hole| {
                let config =
                    gvpo_exact_config(beta, lr, 1, SamplerSpec::custom(hole), PolicyKind::Flat);
                matches!(
                    trainer::train(task, &init, &config),
                    Err(LabError::SupportViolation { .. })
                )
            })
            .unwrap_or(false);
    details.push(format!("support hole rejected: {detected}"));

    CheckResult::from_components(
        "theorem2",
        vec![
            Component::upper("max_final_kl_to_optimal", worst_kl, th.theorem2_kl),
            Component::upper(
                "max_pointwise_policy_distance",
                worst_pointwise,
                th.theorem2_pointwise,
            ),
            Component::upper(
                "support_violation_missed",
                if detected { 0.0 } else { 1.0 },
                0.0,
            ),
        ],
        details.join("; "),
    )
}

/// Exact gradient norm and loss of GVPO at `theta` with `pi_s = pi_theta'`.
pub fn exact_gvpo_state(
    theta: &PolicyParams,
    reference: &PolicyParams,
    task: &TaskSpec,
    beta: f64,
) -> Result<(f64, f64)> {
    let s = oracle::sampling_rows(reference);
    let g = schemes::gvpo_exact_gradient(theta, reference, &s, task, &GvpoConfig::new(beta)?)?;
    let loss = oracle::exact_gvpo_loss_under(theta, reference, &s, task, beta)?;
    Ok((g.norm(), loss))
}

/// At `theta = log pi*` (and a per-prompt logit shift of it) the exact
/// GVPO gradient and loss vanish.
pub fn check_stationary_at_optimum(
    task: &TaskSpec,
    reference: &PolicyParams,
    betas: &[f64],
    seed: u64,
    th: &Thresholds,
) -> CheckResult {
    let mut rng = rng::stream(seed, 6);
    let (mut worst_grad, mut worst_loss) = (0.0f64, 0.0f64);
    for &beta in betas {
        let result = (|| -> Result<()> {
            let star =
                oracle::optimal_policy(reference, task, beta)?.to_params(task, PolicyKind::Flat)?;
            let (g, l) = exact_gvpo_state(&star, reference, task, beta)?;
            worst_grad = worst_grad.max(g);
            worst_loss = worst_loss.max(l);
            let mut shifted = star.clone();
            for x in 0..task.num_prompts() {
                let c = rng::uniform(&mut rng, -5.0, 5.0);
                shifted.block_mut(x).iter_mut().for_each(|v| *v += c);
            }
            let (g, l) = exact_gvpo_state(&shifted, reference, task, beta)?;
            worst_grad = worst_grad.max(g);
            worst_loss = worst_loss.max(l);
            Ok(())
        })();
        if let Err(e) = result {
            return CheckResult::failure("stationary", th.stationary_grad, e.to_string());
        }
    }
    CheckResult::from_components(
        "stationary",
        vec![
            Component::upper("max_gradient_norm", worst_grad, th.stationary_grad),
            Component::upper("max_exact_loss", worst_loss, th.stationary_loss),
        ],
        format!("betas {betas:?}, optimum and shifted optimum"),
    )
}

/// The ablation variants probed by [`check_ablation_fixed_points`].
pub fn ablation_variants() -> Vec<(&'static str, AblationFlags)> {
    let entropy = |c| AblationFlags {
        entropy_substitute: Some(c),
        ..Default::default()
    };
    vec![
        (
            "drop_var",
            AblationFlags {
                drop_var: true,
                ..Default::default()
            },
        ),
        (
            "drop_cov",
            AblationFlags {
                drop_cov: true,
                ..Default::default()
            },
        ),
        (
            "drop_both",
            AblationFlags {
                drop_var: true,
                drop_cov: true,
                ..Default::default()
            },
        ),
        ("entropy_0.01", entropy(0.01)),
        ("entropy_0.1", entropy(0.1)),
        ("entropy_1", entropy(1.0)),
    ]
}

/// Outcome of one ablation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub gradient_norm_at_optimum: f64,
    pub final_kl_to_optimal: f64,
    pub aborted: bool,
}

/// Gradient norms at the optimum and full-run final KL for every ablation
/// and the unablated control, with `pi_s = pi_theta' = reference`.
pub fn run_ablations(
    task: &TaskSpec,
    reference: &PolicyParams,
    steps: usize,
    lr: f64,
) -> Result<Vec<AblationRun>> {
    let star = oracle::optimal_policy(reference, task, 1.0)?.to_params(task, PolicyKind::Flat)?;
    let s = oracle::sampling_rows(reference);
    let mut variants = vec![("full", AblationFlags::default())];
    variants.extend(ablation_variants());
    variants
        .into_iter()
        .map(|(name, flags)| {
            let g = schemes::ablated_objective_gradient(&star, reference, &s, task, &flags)?;
            let config = TrainConfig {
                ablation: flags,
                ..gvpo_exact_config(
                    1.0,
                    lr,
                    steps,
                    SamplerSpec::of(SamplerKind::Reference),
                    PolicyKind::Flat,
                )
            };
            let out = trainer::train(task, reference, &config)?;
            Ok(AblationRun {
                variant: name.to_string(),
                gradient_norm_at_optimum: l2_norm(&g.0),
                final_kl_to_optimal: out.report.summary.final_metrics.kl_to_optimal,
                aborted: out.report.summary.aborted,
            })
        })
        .collect()
}

/// Ablated objectives do not have the optimum as a fixed point, and the
/// pure advantage objective ends far from it.
pub fn check_ablation_fixed_points(
    task: &TaskSpec,
    reference: &PolicyParams,
    steps: usize,
    lr: f64,
    th: &Thresholds,
) -> CheckResult {
    let runs = match run_ablations(task, reference, steps, lr) {
        Ok(r) => r,
        Err(e) => return CheckResult::failure("ablation", th.ablation_min_grad, e.to_string()),
    };
    let full = &runs[0];
    let min_ablated = runs[1..]
        .iter()
        .map(|r| r.gradient_norm_at_optimum)
        .fold(f64::INFINITY, f64::min);
    let both = runs
        .iter()
        .find(|r| r.variant == "drop_both")
        .expect("variant present");
    let ratio = if both.aborted {
        f64::INFINITY
    } else {
        both.final_kl_to_optimal / full.final_kl_to_optimal.max(f64::MIN_POSITIVE)
    };
    let details = runs
        .iter()
        .map(|r| {
            format!(
                "{}: |g*| {:.3e}, final kl {:.3e}{}",
                r.variant,
                r.gradient_norm_at_optimum,
                r.final_kl_to_optimal,
                if r.aborted { " (aborted)" } else { "" }
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    CheckResult::from_components(
        "ablation",
        vec![
            Component::lower(
                "min_ablated_gradient_norm_at_optimum",
                min_ablated,
                th.ablation_min_grad,
            ),
            Component::upper(
                "full_gradient_norm_at_optimum",
                full.gradient_norm_at_optimum,
                th.stationary_grad,
            ),
            Component::lower("drop_both_kl_ratio", ratio, th.ablation_kl_ratio),
        ],
        details,
    )
}

/// Generic-reward instance with a random full-support reference, used by
/// the stationarity and ablation checks.
pub fn separation_instance(config: &VerifyConfig) -> Result<(TaskSpec, PolicyParams)> {
    let mut rng = rng::stream(config.seed, 7);
    let task = generic_instance(config.num_prompts, config.num_responses, 1e-3, &mut rng)?;
    let reference = PolicyParams::random(&task, PolicyKind::Flat, 1.0, &mut rng)?;
    Ok((task, reference))
}

/// Runs one named check.
pub fn run_check(name: &str, config: &VerifyConfig) -> Result<CheckResult> {
    let th = &config.thresholds;
    let result = match name {
        "zero_sum" => check_zero_sum(config.trials, config.seed, th),
        "cancellation" => check_partition_cancellation(config.trials, config.seed, th),
        "three_forms" => check_three_forms(config.form_trials, config.seed, th),
        "theorem1" => {
            let task = default_instance(config)?;
            let seq = make_sequence_task(
                config.sequence_vocab,
                config.sequence_length,
                &SequenceRewardRule::RandomTable { lo: 0.0, hi: 1.0 },
                config.seed,
            )?;
            check_theorem1(
                &task,
                1.0,
                config.steps,
                config.learning_rate,
                Some((&seq, config.sequence_beta, config.sequence_steps)),
                th,
            )
        }
        "theorem2" => {
            let task = default_instance(config)?;
            let samplers = theorem2_samplers(&task, config.seed)?;
            check_theorem2(
                &task,
                1.0,
                &samplers,
                config.steps,
                config.learning_rate,
                th,
            )
        }
        "stationary" => {
            let (task, reference) = separation_instance(config)?;
            check_stationary_at_optimum(&task, &reference, &[0.1, 1.0], config.seed, th)
        }
        "ablation" => {
            let (task, reference) = separation_instance(config)?;
            check_ablation_fixed_points(
                &task,
                &reference,
                config.ablation_steps,
                config.learning_rate,
                th,
            )
        }
        other => {
            return Err(LabError::config(
                "selector",
                format!(
                    "unknown check `{other}`; expected all or one of {}",
                    CHECK_NAMES.join(", ")
                ),
            ))
        }
    };
    Ok(result)
}

/// Runs `all` or a single named check; checks run in parallel.
pub fn run_selected(selector: &str, config: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let names: Vec<&str> = if selector == "all" {
        CHECK_NAMES.to_vec()
    } else if CHECK_NAMES.contains(&selector) {
        vec![selector]
    } else {
        return Err(LabError::config(
            "selector",
            format!(
                "unknown check `{selector}`; expected all or one of {}",
                CHECK_NAMES.join(", ")
            ),
        ));
    };
    names.par_iter().map(|n| run_check(n, config)).collect()
}

/// Human-readable pass/fail table.
pub fn render_table(results: &[CheckResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:<6} {:>12} {:>12}",
        "check", "status", "measured", "threshold"
    );
    for r in results {
        let _ = writeln!(
            out,
            "{:<14} {:<6} {:>12.3e} {:>12.3e}",
            r.name,
            if r.passed { "pass" } else { "FAIL" },
            r.measured,
            r.threshold
        );
        for c in &r.components {
            let op = match c.bound {
                Bound::Upper => "<=",
                Bound::Lower => ">=",
            };
            let _ = writeln!(
                out,
                "  {:<44} {:>10.3e} {op} {:<10.3e} {}",
                c.name,
                c.measured,
                c.threshold,
                if c.passed { "ok" } else { "FAIL" }
            );
        }
    }
    out
}

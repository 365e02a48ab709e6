//! Token-by-token policies on every length-5 string over 4 tokens.

use gvpo_lab::oracle;
use gvpo_lab::policy::{PolicyKind, PolicyParams};
use gvpo_lab::taskenv::{id_to_tokens, make_sequence_task, SequenceRewardRule};
use gvpo_lab::trainer::{train, TrainConfig};

fn main() -> gvpo_lab::Result<()> {
    let rule = SequenceRewardRule::CountMatching {
        target: vec![3, 1, 0, 2, 1],
    };
    let task = make_sequence_task(4, 5, &rule, 0)?;
    let init = PolicyParams::init_uniform(&task, PolicyKind::Autoregressive)?;
    let beta = 0.5;
    let config = TrainConfig {
        beta,
        learning_rate: 2.0,
        steps: 12000,
        policy_kind: PolicyKind::Autoregressive,
        ..Default::default()
    };
    let out = train(&task, &init, &config)?;
    let probs = out.final_params.distribution(0).probs;
    let mut top: Vec<usize> = (0..probs.len()).collect();
    top.sort_by(|a, b| probs[*b].total_cmp(&probs[*a]));
    println!(
        "{} strings, {} parameters",
        task.num_responses(),
        init.num_params()
    );
    for &y in &top[..5] {
        println!(
            "{:?}  p = {:.4}  R = {}",
            id_to_tokens(y, 4, 5),
            probs[y],
            task.reward_row(0)[y]
        );
    }
    let star = oracle::optimal_policy(&init, &task, beta)?;
    println!(
        "KL(pi* || pi_theta) = {:.3e}",
        oracle::kl(&star.policies[0], &out.final_params.distribution(0))?
    );
    Ok(())
}

//! Exact-expectation GVPO on a random bandit, converging to the tilted
//! optimum of the reference.

use gvpo_lab::policy::{PolicyKind, PolicyParams};
use gvpo_lab::taskenv::{make_bandit, RewardGenSpec};
use gvpo_lab::trainer::{train, TrainConfig};

fn main() -> gvpo_lab::Result<()> {
    let task = make_bandit(8, 16, &RewardGenSpec::default(), 42)?;
    let init = PolicyParams::init_uniform(&task, PolicyKind::Flat)?;
    let config = TrainConfig {
        steps: 4000,
        ..Default::default()
    };
    let out = train(&task, &init, &config)?;
    println!(
        "{:>6} {:>12} {:>12} {:>12}",
        "step", "loss", "kl_to_opt", "reward"
    );
    for row in out
        .report
        .rows
        .iter()
        .filter(|r| r.step == 1 || r.step % 500 == 0)
    {
        println!(
            "{:>6} {:>12.4e} {:>12.4e} {:>12.6}",
            row.step, row.loss, row.kl_to_optimal, row.mean_reward
        );
    }
    let m = &out.report.summary.final_metrics;
    println!(
        "objective E[R] - beta KL = {:.6}, reached KL 1e-3 at step {:?}",
        m.objective, m.steps_to_kl_1e_3
    );
    Ok(())
}

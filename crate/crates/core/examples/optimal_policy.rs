//! The KL-regularized optimum of a small bandit, its partition function and
//! the implicit reward it encodes.

use gvpo_lab::oracle::{self, implicit_reward};
use gvpo_lab::policy::{PolicyKind, PolicyParams};
use gvpo_lab::taskenv::{make_bandit, RewardGenSpec};

fn main() -> gvpo_lab::Result<()> {
    let task = make_bandit(
        1,
        3,
        &RewardGenSpec::Explicit {
            table: vec![vec![1.0, 0.0, 0.0]],
        },
        0,
    )?;
    let reference = PolicyParams::init_uniform(&task, PolicyKind::Flat)?;

    for beta in [0.1, 1.0, 10.0] {
        let sol = oracle::optimal_policy(&reference, &task, beta)?;
        let star = sol.to_params(&task, PolicyKind::Flat)?;
        let kl = oracle::kl(&sol.policies[0], &reference.distribution(0))?;
        println!(
            "beta {beta:>4}: log Z {:.6}  pi* {:?}  KL(pi*||ref) {kl:.6}",
            sol.log_partition[0], sol.policies[0].probs
        );
        let recovered: Vec<f64> = (0..3)
            .map(|y| implicit_reward(&star, &reference, beta, 0, y, sol.log_partition[0]))
            .collect();
        println!("            implicit reward at pi* {recovered:?}");
    }
    Ok(())
}

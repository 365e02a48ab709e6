//! One sampled group, four schemes: the per-response weights each assigns
//! in the shared `-sum w grad log pi` form.

use gvpo_lab::policy::{PolicyKind, PolicyParams};
use gvpo_lab::rng;
use gvpo_lab::schemes::{self, GroupBatch, GrpoConfig, GvpoConfig};
use gvpo_lab::taskenv::{make_bandit, RewardGenSpec};

fn main() -> gvpo_lab::Result<()> {
    let task = make_bandit(1, 8, &RewardGenSpec::default(), 7)?;
    let mut r = rng::seeded(7);
    let theta = PolicyParams::random(&task, PolicyKind::Flat, 1.0, &mut r)?;
    let reference = PolicyParams::init_uniform(&task, PolicyKind::Flat)?;
    let ys = theta.sample_k(0, 5, &mut r);
    let group = GroupBatch::build(&task, 0, ys, &theta, &reference, &theta, "old_policy")?;

    println!("responses {:?}", group.responses);
    println!("rewards   {:.3?}", group.rewards);

    let gvpo = schemes::gvpo_weights(&group, &GvpoConfig::new(1.0)?)?;
    println!("gvpo  {:+.4?}  sum {:+.1e}", gvpo.weights, gvpo.sum());

    let grpo = schemes::grpo_weights(&group, &GrpoConfig::default())?;
    println!("grpo  {:+.4?}  sum {:+.1e}", grpo.weights, grpo.sum());

    let (target, _) = schemes::sft_weights(&group)?;
    println!("sft   weight 1 on response {}", group.responses[target]);

    for pair in schemes::dpo_pairs(&group, 1.0).iter().take(4) {
        println!(
            "dpo   {} over {}: w = ({:+.4}, {:+.4}), loss {:.4}",
            group.responses[pair.winner],
            group.responses[pair.loser],
            pair.w_w,
            pair.w_l,
            pair.loss
        );
    }
    Ok(())
}

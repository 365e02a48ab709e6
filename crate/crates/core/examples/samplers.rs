//! Different sampling distributions lead exact GVPO to the same optimum;
//! a sampler that misses part of the reference's support is refused.

use gvpo_lab::policy::{PolicyKind, PolicyParams};
use gvpo_lab::rng;
use gvpo_lab::taskenv::{make_bandit, RewardGenSpec};
use gvpo_lab::trainer::{train, SamplerKind, SamplerSpec, TrainConfig};

fn main() -> gvpo_lab::Result<()> {
    let task = make_bandit(4, 10, &RewardGenSpec::default(), 11)?;
    let init = PolicyParams::init_uniform(&task, PolicyKind::Flat)?;
    let skew = PolicyParams::random(&task, PolicyKind::Flat, 1.5, &mut rng::seeded(1))?;

    for sampler in [
        SamplerSpec::of(SamplerKind::Reference),
        SamplerSpec::of(SamplerKind::Uniform),
        SamplerSpec::custom(skew),
    ] {
        let label = sampler.label();
        let config = TrainConfig {
            sampler,
            steps: 5000,
            ..Default::default()
        };
        let out = train(&task, &init, &config)?;
        println!(
            "{label:<10} kl_to_optimal {:.3e}  pi(.|0)[..4] {:.5?}",
            out.report.summary.final_metrics.kl_to_optimal,
            &out.final_params.distribution(0).probs[..4]
        );
    }

    let mut logits = vec![0.0; init.num_params()];
    logits[2] = -1000.0;
    let hole = PolicyParams::from_logits(PolicyKind::Flat, 4, task.space(), logits)?;
    let config = TrainConfig {
        sampler: SamplerSpec::custom(hole),
        ..Default::default()
    };
    match train(&task, &init, &config) {
        Err(e) => println!("support hole: {e}"),
        Ok(_) => println!("support hole was not detected"),
    }
    Ok(())
}

//! SFT, GRPO, DPO and GVPO trained with sampled groups on one bandit.

use gvpo_lab::expcli::{execute_compare, CompareSpec, ExperimentConfig, GeneratorSpec};
use gvpo_lab::schemes::{GrpoConfig, Scheme};
use gvpo_lab::taskenv::RewardGenSpec;
use gvpo_lab::trainer::{GradientMode, SamplerKind, SamplerSpec, TrainConfig};

fn main() -> gvpo_lab::Result<()> {
    let config = ExperimentConfig {
        generator: Some(GeneratorSpec::Bandit {
            num_prompts: 8,
            num_responses: 16,
            rewards: RewardGenSpec::default(),
            seed: 42,
        }),
        train: TrainConfig {
            steps: 2000,
            k: 8,
            gradient_mode: GradientMode::MonteCarlo,
            sampler: SamplerSpec::of(SamplerKind::OldPolicy),
            grpo: GrpoConfig {
                kl_coefficient: 1.0,
                ..Default::default()
            },
            ..Default::default()
        },
        compare: Some(CompareSpec {
            schemes: vec![Scheme::Sft, Scheme::Grpo, Scheme::Dpo, Scheme::Gvpo],
            seeds: vec![0, 1, 2],
        }),
        ..Default::default()
    };
    let dir = std::env::temp_dir().join("gvpo-lab-compare");
    let rows = execute_compare(&config, &dir)?;
    println!(
        "{:<6} {:>12} {:>12} {:>12}",
        "scheme", "reward", "kl_to_opt", "objective"
    );
    for r in rows {
        println!(
            "{:<6} {:>12.6} {:>12.3e} {:>12.6}",
            r.scheme.name(),
            r.mean_reward,
            r.kl_to_optimal,
            r.objective
        );
    }
    println!("tables in {}", dir.display());
    Ok(())
}

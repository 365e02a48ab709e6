//! Sweep over how many group members come from a replay buffer instead of
//! the current policy.

use gvpo_lab::expcli::{execute_sweep, ExperimentConfig};

const CONFIG: &str = r#"{
  "generator": {"kind": "bandit", "num_prompts": 4, "num_responses": 12, "seed": 3},
  "train": {
    "steps": 1500, "k": 5, "gradient_mode": "monte_carlo",
    "sampler": {"kind": "replay_mixture", "mix_ratio": {"historical": 0, "fresh": 5}}
  },
  "sweep": [{"path": "train.sampler.mix_ratio", "values": [
    {"historical": 0, "fresh": 5}, {"historical": 1, "fresh": 4}, {"historical": 2, "fresh": 3},
    {"historical": 3, "fresh": 2}, {"historical": 4, "fresh": 1}
  ]}],
  "emit": {"csv": false, "json": false}
}"#;

fn main() -> gvpo_lab::Result<()> {
    let config = ExperimentConfig::from_json(CONFIG)?;
    let dir = std::env::temp_dir().join("gvpo-lab-replay");
    for cell in execute_sweep(&config, &dir, 1)? {
        let m = cell.final_metrics.expect("cell ran");
        println!(
            "historical:fresh {}:{}  kl_to_optimal {:.3e}  reward {:.5}",
            cell.cell[0].1["historical"], cell.cell[0].1["fresh"], m.kl_to_optimal, m.mean_reward
        );
    }
    println!("sweep.csv in {}", dir.display());
    Ok(())
}

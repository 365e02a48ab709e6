//! The verification checks at reduced sizes.

use gvpo_lab::verify::{render_table, run_selected, VerifyConfig};

fn main() -> gvpo_lab::Result<()> {
    let config = VerifyConfig {
        trials: 200,
        form_trials: 20,
        steps: 5000,
        sequence_steps: 20000,
        ablation_steps: 2000,
        ..Default::default()
    };
    let results = run_selected("all", &config)?;
    print!("{}", render_table(&results));
    Ok(())
}

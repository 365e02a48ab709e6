//! Dropping the variance or covariance regularizer moves the fixed point
//! away from the optimum.

use gvpo_lab::policy::{PolicyKind, PolicyParams};
use gvpo_lab::rng;
use gvpo_lab::verify::{generic_instance, run_ablations};

fn main() -> gvpo_lab::Result<()> {
    let mut r = rng::seeded(5);
    let task = generic_instance(4, 12, 1e-3, &mut r)?;
    let reference = PolicyParams::random(&task, PolicyKind::Flat, 1.0, &mut r)?;
    println!(
        "{:<14} {:>14} {:>14}",
        "variant", "|grad| at pi*", "final KL"
    );
    for run in run_ablations(&task, &reference, 3000, 0.5)? {
        println!(
            "{:<14} {:>14.3e} {:>14.3e}{}",
            run.variant,
            run.gradient_norm_at_optimum,
            run.final_kl_to_optimal,
            if run.aborted { "  aborted" } else { "" }
        );
    }
    Ok(())
}

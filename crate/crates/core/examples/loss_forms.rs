//! The weighted-NLL, MSE and variance forms of the GVPO loss on one group,
//! and a finite-difference check that they share a gradient.

use gvpo_lab::numeric::max_abs_diff;
use gvpo_lab::oracle::{finite_diff_grad, DEFAULT_FD_STEP};
use gvpo_lab::policy::{PolicyKind, PolicyParams};
use gvpo_lab::rng;
use gvpo_lab::schemes::{self, GroupBatch, GvpoConfig};
use gvpo_lab::taskenv::{make_bandit, RewardGenSpec};

fn main() -> gvpo_lab::Result<()> {
    let task = make_bandit(1, 6, &RewardGenSpec::default(), 3)?;
    let mut r = rng::seeded(3);
    let theta = PolicyParams::random(&task, PolicyKind::Flat, 2.0, &mut r)?;
    let aux = PolicyParams::random(&task, PolicyKind::Flat, 2.0, &mut r)?;
    let ys = vec![0, 1, 3, 3, 5];
    let cfg = GvpoConfig::new(0.5)?;
    let group = |p: &PolicyParams| GroupBatch::build(&task, 0, ys.clone(), p, &aux, p, "fixed");

    let g = group(&theta)?;
    let (nll, nll_grad) = schemes::gvpo_loss_nll_form(&g, &cfg, &theta)?;
    println!("nll form      {nll:.6}");
    println!(
        "mse form      {:.6}",
        schemes::gvpo_loss_mse_form(&g, &cfg)?
    );
    println!(
        "variance form {:.6}",
        schemes::gvpo_loss_variance_form(&g, &cfg)?
    );

    let fd = finite_diff_grad(
        |p| schemes::gvpo_loss_mse_form(&group(p).unwrap(), &cfg).unwrap(),
        &theta,
        DEFAULT_FD_STEP,
    );
    println!(
        "max |grad_nll - fd(mse)| = {:.2e}",
        max_abs_diff(&nll_grad.0, &fd.0)
    );
    Ok(())
}

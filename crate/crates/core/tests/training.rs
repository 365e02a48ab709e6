use gvpo_lab::oracle;
use gvpo_lab::policy::{PolicyKind, PolicyParams};
use gvpo_lab::rng;
use gvpo_lab::schemes::Scheme;
use gvpo_lab::taskenv::{make_bandit, make_sequence_task, RewardGenSpec, SequenceRewardRule};
use gvpo_lab::trainer::{
    self, AuxPolicyMode, GradientMode, SamplerKind, SamplerSpec, TrainConfig, TrainerState,
};

#[test]
fn autoregressive_and_flat_reach_the_same_optimum() {
    let task = make_sequence_task(
        2,
        3,
        &SequenceRewardRule::CountMatching {
            target: vec![1, 0, 1],
        },
        0,
    )
    .unwrap();
    let mut finals = Vec::new();
    for kind in [PolicyKind::Flat, PolicyKind::Autoregressive] {
        let init = PolicyParams::init_uniform(&task, kind).unwrap();
        let config = TrainConfig {
            steps: 6000,
            learning_rate: 1.0,
            policy_kind: kind,
            ..Default::default()
        };
        let out = trainer::train(&task, &init, &config).unwrap();
        assert!(
            out.report.summary.final_metrics.kl_to_optimal < 1e-8,
            "{kind:?}"
        );
        finals.push(out.final_params.distribution(0).probs);
    }
    for (a, b) in finals[0].iter().zip(&finals[1]) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn decomposition_columns_only_for_exact_unit_beta_gvpo() {
    let task = make_bandit(2, 4, &RewardGenSpec::default(), 1).unwrap();
    let init = PolicyParams::init_uniform(&task, PolicyKind::Flat).unwrap();
    let cases = [
        (Scheme::Gvpo, GradientMode::Exact, 1.0, true),
        (Scheme::Gvpo, GradientMode::Exact, 0.5, false),
        (Scheme::Gvpo, GradientMode::MonteCarlo, 1.0, false),
        (Scheme::Dpo, GradientMode::Exact, 1.0, false),
    ];
    for (scheme, mode, beta, filled) in cases {
        let config = TrainConfig {
            scheme,
            gradient_mode: mode,
            beta,
            steps: 3,
            ..Default::default()
        };
        let out = trainer::train(&task, &init, &config).unwrap();
        assert!(out
            .report
            .rows
            .iter()
            .all(|r| r.var_term.is_some() == filled));
    }
}

#[test]
fn monte_carlo_gvpo_tracks_the_optimum() {
    let task = make_bandit(4, 8, &RewardGenSpec::default(), 9).unwrap();
    let init = PolicyParams::init_uniform(&task, PolicyKind::Flat).unwrap();
    for sampler in [
        SamplerSpec::of(SamplerKind::OldPolicy),
        SamplerSpec::of(SamplerKind::Uniform),
        SamplerSpec::replay(2, 3),
    ] {
        let config = TrainConfig {
            gradient_mode: GradientMode::MonteCarlo,
            sampler: sampler.clone(),
            steps: 3000,
            ..Default::default()
        };
        let out = trainer::train(&task, &init, &config).unwrap();
        let kl = out.report.summary.final_metrics.kl_to_optimal;
        assert!(kl < 1e-4, "{}: {kl}", sampler.label());
    }
}

#[test]
fn momentum_still_converges() {
    let task = make_bandit(2, 6, &RewardGenSpec::default(), 2).unwrap();
    let init = PolicyParams::init_uniform(&task, PolicyKind::Flat).unwrap();
    let config = TrainConfig {
        momentum: Some(0.9),
        learning_rate: 0.1,
        steps: 3000,
        ..Default::default()
    };
    let out = trainer::train(&task, &init, &config).unwrap();
    assert!(out.report.summary.final_metrics.kl_to_optimal < 1e-10);
}

#[test]
fn refresh_mode_keeps_improving_reward() {
    let task = make_bandit(2, 6, &RewardGenSpec::default(), 4).unwrap();
    let init = PolicyParams::init_uniform(&task, PolicyKind::Flat).unwrap();
    let config = TrainConfig {
        aux_policy_mode: AuxPolicyMode::RefreshEachStep,
        sampler: SamplerSpec::of(SamplerKind::OldPolicy),
        steps: 200,
        ..Default::default()
    };
    let mut state = TrainerState::new(&task, &init, &config).unwrap();
    let mut last = oracle::expected_reward(&init, &task);
    for _ in 0..200 {
        let before = state.theta().clone();
        let row = state.step().unwrap();
        assert_eq!(state.aux(), &before);
        assert!(row.mean_reward >= last - 1e-12);
        last = row.mean_reward;
    }
}

#[test]
fn report_round_trips_through_json() {
    let task = make_bandit(1, 3, &RewardGenSpec::default(), 0).unwrap();
    let init = PolicyParams::random(&task, PolicyKind::Flat, 1.0, &mut rng::seeded(0)).unwrap();
    let out = trainer::train(
        &task,
        &init,
        &TrainConfig {
            steps: 5,
            ..Default::default()
        },
    )
    .unwrap();
    let text = serde_json::to_string(&out.report).unwrap();
    let back: trainer::TrainReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, out.report);
    let mut buf = Vec::new();
    trainer::write_rows_csv(&out.report.rows, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 6);
}

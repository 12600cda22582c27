use std::collections::BTreeSet;

use pivot_core::pipeline::{tags_for, FilterTag, ProfileStats};
use pivot_core::policy::{action_support, PolicySnapshot, SnapshotRole, TabularSoftmaxPolicy};
use pivot_core::synth::{build_env, PivotPlan, SynthEnvSpec};
use pivot_core::theory::{kl_projection_closed_form, tilted_policy};
use pivot_core::trainer::{
    batch_objective, group_advantages, group_surrogate, pivot_step, RolloutGroup, TrainConfig,
};
use pivot_core::TurnEnv;
use proptest::prelude::*;

fn distribution() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, 2..8).prop_map(|raw| {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect()
    })
}

fn one_pivot_env() -> pivot_core::synth::SynthEnv {
    build_env(&SynthEnvSpec::new(
        3,
        PivotPlan {
            pivot_depths: vec![0],
            acceptable_per_pivot: 1,
            distractors_per_pivot: 3,
            value_leak: 0.0,
        },
        11,
    ))
    .unwrap()
    .0
}

proptest! {
    #[test]
    fn advantages_are_centered_and_scaled(rewards in prop::collection::vec(0.0f64..1.0, 2..32)) {
        let adv = group_advantages(&rewards, 0.0).unwrap();
        let mean: f64 = adv.iter().sum::<f64>() / adv.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
        if rewards.iter().any(|r| *r != rewards[0]) {
            let var: f64 = adv.iter().map(|a| a * a).sum::<f64>() / adv.len() as f64;
            prop_assert!((var - 1.0).abs() < 1e-6);
        } else {
            prop_assert!(adv.iter().all(|a| *a == 0.0));
        }
    }

    #[test]
    fn tilted_policy_is_a_distribution(pi0 in distribution(), beta in 0.1f64..5.0, seed in 0u64..1000) {
        let r: Vec<f64> = (0..pi0.len()).map(|i| ((seed + i as u64 * 7) % 11) as f64 / 10.0).collect();
        let pi = tilted_policy(&pi0, &r, beta).unwrap();
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(pi.iter().all(|p| *p > 0.0));
    }

    #[test]
    fn projection_raises_target_mass(pi0 in distribution(), mask in prop::collection::vec(any::<bool>(), 8), beta in 0.2f64..4.0) {
        let m: BTreeSet<usize> = (0..pi0.len()).filter(|i| mask[*i]).collect();
        let r = kl_projection_closed_form(&pi0, &m, beta).unwrap();
        prop_assert!(r.q_beta >= r.rho);
        if !m.is_empty() && m.len() < pi0.len() {
            prop_assert!(r.q_beta > r.rho);
        }
        prop_assert!((r.pi_star.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn filter_tags_nest(rewards in prop::collection::vec(prop::sample::select(vec![0.0, 0.5, 1.0]), 2..20),
                        eps_var in 0.0f64..0.1, lambda in 0.0f64..1.0) {
        let stats = ProfileStats::from_rewards(rewards, "r");
        prop_assert!(stats.variance >= 0.0);
        let tags = tags_for(&stats, eps_var, lambda);
        prop_assert!(tags.contains(&FilterTag::Random));
        if tags.contains(&FilterTag::Adv) {
            prop_assert!(tags.contains(&FilterTag::Mixed));
        }
        prop_assert_eq!(tags.contains(&FilterTag::Mixed), stats.variance > eps_var);
    }

    #[test]
    fn surrogate_respects_clip_and_on_policy_identity(
        logits in prop::collection::vec(-2.0f64..2.0, 4),
        shift in prop::collection::vec(-1.5f64..1.5, 4),
        picks in prop::collection::vec(0usize..4, 2..12),
        rewards_seed in 0u64..1000,
        clip in 0.05f64..0.5,
    ) {
        let env = one_pivot_env();
        let s0 = env.initial_state();
        let support = action_support(&env, &s0);
        let mut old = TabularSoftmaxPolicy::uniform();
        for (a, l) in support.iter().zip(&logits) {
            old.set_logit(&s0, a, *l);
        }
        let actions: Vec<_> = picks.iter().map(|i| support[*i % support.len()].clone()).collect();
        let rewards: Vec<f64> = (0..actions.len()).map(|i| ((rewards_seed >> (i % 10)) & 1) as f64).collect();
        let group = RolloutGroup::new("g", s0.clone(), support.clone(), actions, rewards, &old, 1e-4).unwrap();

        // on-policy: every ratio is 1 and clipping is inactive
        let unclipped: f64 = group.advantages.iter().sum::<f64>() / group.len() as f64;
        prop_assert!((group_surrogate(&old, &group, clip).unwrap() - unclipped).abs() < 1e-12);

        let mut moved = old.clone();
        for (a, d) in support.iter().zip(&shift) {
            moved.set_logit(&s0, a, logits[support.iter().position(|x| x == a).unwrap()] + d);
        }
        let max_adv = group.advantages.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let value = group_surrogate(&moved, &group, clip).unwrap();
        prop_assert!(value <= max_adv * (1.0 + clip) + 1e-12);
    }
}

#[test]
fn kl_free_objective_ignores_reference() {
    let env = one_pivot_env();
    let s0 = env.initial_state();
    let support = action_support(&env, &s0);
    let policy = TabularSoftmaxPolicy::uniform();
    let mut other = TabularSoftmaxPolicy::uniform();
    other.set_logit(&s0, &support[0], 3.0);
    let group = RolloutGroup::new(
        "g",
        s0,
        support.clone(),
        vec![support[0].clone(), support[1].clone()],
        vec![1.0, 0.0],
        &policy,
        1e-4,
    )
    .unwrap();
    let batch = [group];
    assert_eq!(
        batch_objective(&policy, &policy, &batch, 0.2, 0.0).unwrap(),
        batch_objective(&policy, &other, &batch, 0.2, 0.0).unwrap()
    );
    assert!(
        batch_objective(&policy, &other, &batch, 0.2, 0.5).unwrap()
            < batch_objective(&policy, &policy, &batch, 0.2, 0.5).unwrap()
    );
}

#[test]
fn stale_snapshot_is_rejected() {
    let env = one_pivot_env();
    let s0 = env.initial_state();
    let support = action_support(&env, &s0);
    let policy = TabularSoftmaxPolicy::uniform();
    let group = RolloutGroup::new(
        "g",
        s0.clone(),
        support.clone(),
        vec![support[0].clone(), support[1].clone()],
        vec![1.0, 0.0],
        &policy,
        1e-4,
    )
    .unwrap();
    let mut drifted = policy.clone();
    drifted.set_logit(&s0, &support[0], 1.0);
    let snap = PolicySnapshot::take(&drifted, SnapshotRole::Old);
    let mut learner = policy.clone();
    assert!(pivot_step(
        &mut learner,
        &snap,
        &snap,
        &[group],
        &TrainConfig::default()
    )
    .is_err());
}

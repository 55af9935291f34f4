use agpolab::advantage::{EstimatorConfig, RewardSign};
use agpolab::envs::{build_task_family, FamilySpec, TaskFamily, TaskParams, TaskSpec, TaskSuite};
use agpolab::policy::{PolicyInit, TabularPolicy};
use agpolab::trainer::{
    collect_groups, eval_passk_sampled, telemetry_csv, train_run, TrainConfig, Trainer,
};

fn subset_suite(density: f64, count: usize, seed: u64) -> TaskSuite {
    build_task_family(&FamilySpec::Subset { density }, 2, 3, count, seed).unwrap()
}

#[test]
fn one_hot_policy_groups_all_positive() {
    let task = TaskSpec::new(
        "t",
        TaskFamily::Subset,
        3,
        2,
        TaskParams::default(),
        &[vec![1, 2]],
    )
    .unwrap();
    let suite = TaskSuite::new(vec![task], None).unwrap();
    let policy = TabularPolicy::<f64>::one_hot(3, 2, "t", &[1, 2], 60.0).unwrap();
    let groups = collect_groups(&[policy], &suite, &[0], 8, 0.6, 1, 1).unwrap();
    assert!(groups[0]
        .group_rewards
        .rewards()
        .iter()
        .all(|&r| r == RewardSign::Positive));
}

#[test]
fn density_zero_groups_all_negative() {
    let suite = subset_suite(0.0, 3, 0);
    let policies: Vec<_> = suite
        .tasks()
        .iter()
        .map(|t| TabularPolicy::<f64>::uniform(2, 3, t.prompt_id()).unwrap())
        .collect();
    let groups = collect_groups(&policies, &suite, &[0, 1, 2], 8, 0.6, 4, 1).unwrap();
    assert!(groups.iter().all(|g| g.group_rewards.count_correct() == 0));
}

#[test]
fn uniform_policy_binomial_group_counts() {
    // 16 sequences, 4 correct: k ~ Binomial(8, 0.25)
    let suite = build_task_family(&FamilySpec::Subset { density: 0.25 }, 2, 4, 1, 5).unwrap();
    let policy = TabularPolicy::<f64>::uniform(2, 4, suite.tasks()[0].prompt_id()).unwrap();
    let policies = vec![policy];
    let n = 1000;
    let mean_k: f64 = (1..=n)
        .map(|step| {
            collect_groups(&policies, &suite, &[0], 8, 0.6, 77, step).unwrap()[0]
                .group_rewards
                .count_correct() as f64
        })
        .sum::<f64>()
        / n as f64;
    let se = (8.0f64 * 0.25 * 0.75 / n as f64).sqrt();
    assert!((mean_k - 2.0).abs() < 3.0 * se, "mean k {mean_k}");
}

#[test]
fn rewards_match_reverification() {
    let suite = subset_suite(0.4, 4, 2);
    let cfg = TrainConfig::<f64> {
        batch_prompts: 4,
        mini_batch_prompts: 2,
        total_steps: 6,
        eval_every: 3,
        log_rollouts: true,
        init: PolicyInit::Gaussian { scale: 1.0 },
        ..TrainConfig::default()
    };
    let out = train_run(cfg, &suite, None).unwrap();
    assert_eq!(out.rollouts.len(), 6 * 4 * 8);
    for r in &out.rollouts {
        let task = suite.get(&r.prompt_id).unwrap();
        assert_eq!(
            RewardSign::from_verdict(task.verify(&r.tokens).unwrap()),
            r.reward
        );
    }
}

#[test]
fn first_minibatch_is_on_policy() {
    let suite = subset_suite(0.4, 8, 3);
    for variant in [
        EstimatorConfig::agpo(),
        EstimatorConfig::grpo(),
        EstimatorConfig::ppo_baseline(),
    ] {
        let cfg = TrainConfig::<f64> {
            estimator: variant,
            batch_prompts: 8,
            mini_batch_prompts: 4,
            total_steps: 10,
            eval_every: 5,
            learning_rate: 2.0,
            init: PolicyInit::Gaussian { scale: 1.0 },
            ..TrainConfig::default()
        };
        let out = train_run(cfg, &suite, None).unwrap();
        for r in &out.telemetry {
            assert_eq!(r.clip_fraction, 0.0);
            assert!((0.0..=1.0).contains(&r.train_correct_ratio));
            assert!((0.0..=1.0).contains(&r.heldout_greedy_acc));
            assert!(
                r.mean_entropy >= 0.0
                    && r.mean_abs_adv_pos >= 0.0
                    && r.mean_abs_adv_neg >= 0.0
                    && r.mean_kl >= 0.0
            );
        }
    }
}

#[test]
fn multi_epoch_clips() {
    let suite = subset_suite(0.4, 4, 3);
    let cfg = TrainConfig::<f64> {
        batch_prompts: 4,
        mini_batch_prompts: 4,
        epochs_per_batch: 4,
        total_steps: 5,
        eval_every: 5,
        learning_rate: 5.0,
        ..TrainConfig::default()
    };
    let out = train_run(cfg, &suite, None).unwrap();
    assert!(out.telemetry.iter().any(|r| r.clip_fraction > 0.0));
    assert!(out.telemetry.iter().all(|r| r.clip_fraction <= 1.0));
}

#[test]
fn training_is_deterministic() {
    let suite = subset_suite(0.3, 8, 9);
    let cfg = TrainConfig::<f64> {
        batch_prompts: 4,
        mini_batch_prompts: 2,
        total_steps: 20,
        eval_every: 5,
        seed: 42,
        ..TrainConfig::default()
    };
    let a = train_run(cfg.clone(), &suite, None).unwrap();
    let b = train_run(cfg, &suite, None).unwrap();
    assert_eq!(telemetry_csv(&a.telemetry), telemetry_csv(&b.telemetry));
    assert_eq!(a.checkpoints, b.checkpoints);
}

#[test]
fn heldout_prompts_without_training_use_initial_policy() {
    let train = subset_suite(1.0, 2, 1);
    // a different task family under fresh ids: never trained
    let heldout = build_task_family(&FamilySpec::Subset { density: 0.0 }, 2, 3, 2, 1).unwrap();
    let renamed: Vec<TaskSpec> = heldout
        .tasks()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            TaskSpec::new(
                format!("held-{i}"),
                TaskFamily::Subset,
                2,
                3,
                TaskParams::default(),
                &t.correct_set(),
            )
            .unwrap()
        })
        .collect();
    let heldout = TaskSuite::new(renamed, None).unwrap();
    let cfg = TrainConfig::<f64> {
        batch_prompts: 2,
        mini_batch_prompts: 1,
        total_steps: 2,
        eval_every: 1,
        ..TrainConfig::default()
    };
    let out = train_run(cfg, &train, Some(&heldout)).unwrap();
    assert!(out.telemetry.iter().all(|r| r.heldout_greedy_acc == 0.0));
}

#[test]
fn invalid_configs_rejected() {
    let suite = subset_suite(0.3, 4, 0);
    let bad = [
        TrainConfig::<f64> {
            group_size: 1,
            ..TrainConfig::default()
        },
        TrainConfig::<f64> {
            batch_prompts: 4,
            mini_batch_prompts: 3,
            ..TrainConfig::default()
        },
        TrainConfig::<f64> {
            batch_prompts: 8,
            mini_batch_prompts: 4,
            ..TrainConfig::default()
        },
        TrainConfig::<f64> {
            batch_prompts: 4,
            mini_batch_prompts: 2,
            temperature: 0.0,
            ..TrainConfig::default()
        },
    ];
    for cfg in bad {
        assert!(Trainer::new(cfg, &suite, None).is_err());
    }
}

#[test]
fn degenerate_denominator_reports_step() {
    let suite = subset_suite(1.0, 2, 0);
    let cfg = TrainConfig::<f64> {
        estimator: EstimatorConfig::agpo().with_delta(0.0),
        batch_prompts: 2,
        mini_batch_prompts: 1,
        total_steps: 3,
        ..TrainConfig::default()
    };
    let err = train_run(cfg, &suite, None).unwrap_err();
    assert!(err.to_string().contains("step 1"), "{err}");
}

#[test]
fn reinforce_converges_on_modsum() {
    let suite = build_task_family(
        &FamilySpec::Modsum {
            modulus: 4,
            target: None,
        },
        4,
        4,
        32,
        1,
    )
    .unwrap();
    let cfg = TrainConfig::<f64> {
        estimator: EstimatorConfig::reinforce(),
        learning_rate: 4.0,
        total_steps: 500,
        eval_every: 50,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train_run(cfg, &suite, None).unwrap();
    let tail: f64 = out.telemetry[490..]
        .iter()
        .map(|r| r.train_correct_ratio)
        .sum::<f64>()
        / 10.0;
    assert!(tail >= 0.95, "final ratio {tail}");
    assert!(out.telemetry.last().unwrap().mean_entropy < 0.1 * out.initial.mean_entropy);
}

#[test]
fn sampled_passk_examples() {
    let task = TaskSpec::new(
        "t",
        TaskFamily::Subset,
        2,
        2,
        TaskParams::default(),
        &[vec![0, 1]],
    )
    .unwrap();
    let suite = TaskSuite::new(vec![task], None).unwrap();
    let hot = TabularPolicy::<f64>::one_hot(2, 2, "t", &[0, 1], 60.0).unwrap();
    let v = eval_passk_sampled(&[hot], &suite, 16, &[1, 4, 16], 0.6, 3).unwrap();
    assert!(v.iter().all(|&(_, p)| p == 1.0));

    let empty = subset_suite(0.0, 2, 0);
    let policies: Vec<_> = empty
        .tasks()
        .iter()
        .map(|t| TabularPolicy::<f64>::uniform(2, 3, t.prompt_id()).unwrap())
        .collect();
    let v = eval_passk_sampled(&policies, &empty, 8, &[1, 8], 0.6, 3).unwrap();
    assert!(v.iter().all(|&(_, p)| p == 0.0));
    assert!(eval_passk_sampled(&policies, &empty, 8, &[9], 0.6, 3).is_err());

    // 16 sequences, 4 correct, uniform: Pass@1 ~ 0.25
    let suite = build_task_family(&FamilySpec::Subset { density: 0.25 }, 2, 4, 20, 8).unwrap();
    let policies: Vec<_> = suite
        .tasks()
        .iter()
        .map(|t| TabularPolicy::<f64>::uniform(2, 4, t.prompt_id()).unwrap())
        .collect();
    let v = eval_passk_sampled(&policies, &suite, 256, &[1], 0.6, 3).unwrap();
    let se = (0.25f64 * 0.75 / (256.0 * 20.0)).sqrt();
    assert!((v[0].1 - 0.25).abs() < 3.0 * se, "{}", v[0].1);
}

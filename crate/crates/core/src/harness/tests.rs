use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::SolarError;
use crate::kb::Level;
use crate::substrate::{Sample, TaskModel};

fn small_sizes() -> SplitSizes {
    SplitSizes {
        train: 300,
        eval: 60,
        test: 60,
        unlabeled: 32,
    }
}

fn spec(rule: Rule, seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec::new("t", rule, seed).with_sizes(small_sizes())
}

fn answer(s: &Sample) -> &str {
    &s.choices[s.label.unwrap()]
}

fn words(s: &Sample) -> Vec<usize> {
    s.prompt_text.split(' ').map(|w| w[1..].parse().unwrap()).collect()
}

#[test]
fn same_seed_same_bundle() {
    for rule in [Rule::KeywordMatch, Rule::Parity, Rule::OrderSensitive] {
        assert_eq!(gen_task(&spec(rule, 4)).unwrap(), gen_task(&spec(rule, 4)).unwrap());
        assert_ne!(gen_task(&spec(rule, 4)).unwrap(), gen_task(&spec(rule, 5)).unwrap());
    }
}

#[test]
fn splits_are_disjoint_and_unlabeled_has_no_labels() {
    let b = gen_task(&spec(Rule::KeywordMatch, 1)).unwrap();
    let mut seen = HashSet::new();
    for split in b.splits() {
        for s in &split.samples {
            assert!(seen.insert(s.prompt_text.clone()), "{} repeats", s.prompt_text);
            assert_eq!(s.choices.len(), 4);
            assert_eq!(s.label.is_none(), split.role == SplitRole::Unlabeled);
        }
    }
    assert_eq!(b.train.samples.len(), 300);
    assert_eq!(b.unlabeled.samples.len(), 32);
    assert_eq!(b.adaptation_inputs().len(), 32);
}

#[test]
fn keyword_answers_follow_the_drift_schedule() {
    let drift = vec![Drift {
        step: 100,
        perturbation: Perturbation::ShiftLabels { by: 1 },
    }];
    let b = gen_task(&spec(Rule::KeywordMatch, 2).with_drift(drift)).unwrap();
    let topic = |s: &Sample| *words(s).iter().find(|&&w| w < 4).unwrap();
    for (i, s) in b.train.samples.iter().enumerate() {
        let shift = usize::from(i >= 100);
        assert_eq!(answer(s), format!("pick w{}", (topic(s) + shift) % 4));
    }
    for s in &b.source_eval.samples {
        assert_eq!(answer(s), format!("pick w{}", topic(s)));
    }
    for s in b.eval.samples.iter().chain(&b.test.samples) {
        assert_eq!(answer(s), format!("pick w{}", (topic(s) + 1) % 4));
    }
}

#[test]
fn parity_and_order_answers() {
    let b = gen_task(&spec(Rule::Parity, 3)).unwrap();
    for s in &b.train.samples {
        let odd = words(s).iter().filter(|&&w| w % 2 == 1).count();
        assert_eq!(answer(s), format!("count {}", odd % 4));
    }
    let b = gen_task(&spec(Rule::OrderSensitive, 3)).unwrap();
    for s in &b.train.samples {
        let kws: Vec<usize> = words(s).into_iter().filter(|&w| w < 4).collect();
        assert_eq!(kws.len(), 2);
        assert_ne!(kws[0], kws[1]);
        assert_eq!(answer(s), format!("first w{}", kws[0]));
    }
}

#[test]
fn remap_is_never_identity() {
    let b = gen_task(&spec(Rule::KeywordMatch, 0).with_drift(vec![Drift {
        step: 0,
        perturbation: Perturbation::RemapTopics { seed: 9 },
    }]))
    .unwrap();
    let changed = b
        .eval
        .samples
        .iter()
        .filter(|s| answer(s) != format!("pick w{}", words(s).iter().find(|&&w| w < 4).unwrap()))
        .count();
    assert!(changed > 0);
}

#[test]
fn oversized_spec_is_rejected() {
    let mut s = SyntheticTaskSpec::new("t", Rule::Parity, 0);
    s.vocab_size = 6;
    s.num_choices = 2;
    assert!(matches!(gen_task(&s), Err(SolarError::Spec(_))));
    s.num_choices = 1;
    assert!(matches!(s.check(), Err(SolarError::Spec(_))));
    let mut s = spec(Rule::KeywordMatch, 0);
    s.task_id.clear();
    assert!(matches!(s.check(), Err(SolarError::Spec(_))));
}

fn smoke_recipe(pre: usize, fine: usize) -> CheckpointRecipe {
    CheckpointRecipe {
        pretrain_steps: pre,
        finetune_steps: fine,
        num_samples: 64,
        batch_size: 8,
        ..CheckpointRecipe::desk()
    }
}

#[test]
fn smoke_recipe_snapshot_count_and_tags() {
    let model = TaskModel::desk(0);
    let b = gen_task(&spec(Rule::KeywordMatch, 0)).unwrap();
    let set = collect_checkpoints(&model, "t", &b.train.samples, &smoke_recipe(2, 1)).unwrap();
    assert_eq!(set.checkpoints.len(), 3);
    let tags: Vec<(Phase, usize)> = set.checkpoints.iter().map(|c| (c.phase, c.step)).collect();
    assert_eq!(tags, vec![(Phase::Pretrain, 1), (Phase::Pretrain, 2), (Phase::Finetune, 1)]);
    assert_eq!(set.checkpoints[1].adapter, set.pretrain_final);
    assert_eq!(set.checkpoints[2].adapter, set.finetune_final);

    let only = CheckpointRecipe {
        finetune_only: true,
        ..smoke_recipe(2, 1)
    };
    let set_only = collect_checkpoints(&model, "t", &b.train.samples, &only).unwrap();
    assert_eq!(set_only.count(Phase::Pretrain), 0);
    assert_eq!(set_only.checkpoints.len(), only.expected_snapshots());
    assert_eq!(set_only.finetune_final, set.finetune_final);
}

#[test]
fn full_scale_recipe_has_75_plus_50_snapshots() {
    let model = TaskModel::desk(0);
    let b = gen_task(&spec(Rule::KeywordMatch, 0)).unwrap();
    let recipe = CheckpointRecipe::full_scale();
    assert_eq!(recipe.expected_snapshots(), 125);
    let set = collect_checkpoints(&model, "t", &b.train.samples, &recipe).unwrap();
    assert_eq!(set.checkpoints.len(), 125);
    assert_eq!(set.count(Phase::Pretrain), 75);
    assert_eq!(set.count(Phase::Finetune), 50);
    assert!(set.checkpoints[..75].iter().all(|c| c.phase == Phase::Pretrain));
}

#[test]
fn checkpoints_replay_bitwise_and_survive_disk() {
    let model = TaskModel::desk(1);
    let b = gen_task(&spec(Rule::KeywordMatch, 1)).unwrap();
    let recipe = smoke_recipe(3, 3).with_seed(7);
    let a = collect_checkpoints(&model, "t", &b.train.samples, &recipe).unwrap();
    let again = collect_checkpoints(&model, "t", &b.train.samples, &recipe).unwrap();
    for (x, y) in a.checkpoints.iter().zip(&again.checkpoints) {
        assert_eq!(x.adapter.digest(), y.adapter.digest());
    }
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    assert_eq!(CheckpointSet::load(dir.path()).unwrap(), a);
}

#[test]
fn empty_train_split_is_rejected() {
    let model = TaskModel::desk(0);
    assert!(matches!(
        collect_checkpoints(&model, "t", &[], &smoke_recipe(1, 1)),
        Err(SolarError::EmptySource(_))
    ));
}

fn mrow(task: &str, method: &str, accuracy: f64, seed: u64) -> MetricsRow {
    MetricsRow {
        task_id: task.into(),
        method: method.into(),
        accuracy,
        wall_ms: 0,
        seed,
        strategy_digest: None,
    }
}

#[test]
fn metrics_csv_header_and_round_trip() {
    let mut rows = vec![mrow("a", "baseline", 0.25, 0), mrow("a", "solar", 0.5, 0)];
    rows[1].strategy_digest = Some("abc".into());
    rows[1].wall_ms = 17;
    let mut buf = Vec::new();
    write_metrics(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().next().unwrap(), "task_id,method,accuracy,wall_ms,seed,strategy_digest");
    assert_eq!(text.lines().nth(1).unwrap(), "a,baseline,0.25,0,0,");
    assert_eq!(read_metrics(&buf[..]).unwrap(), rows);

    let mut empty = Vec::new();
    write_metrics(&[], &mut empty).unwrap();
    assert_eq!(String::from_utf8(empty).unwrap(), format!("{}\n", METRICS_HEADER.join(",")));
}

#[test]
fn malformed_metrics_report_the_line() {
    let bad = "task_id,method,accuracy,wall_ms,seed,strategy_digest\na,b,0.5,1,0,\na,b,zero,1,0,\n";
    match read_metrics(bad.as_bytes()) {
        Err(SolarError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let out_of_range = "task_id,method,accuracy,wall_ms,seed,strategy_digest\na,b,1.5,1,0,\n";
    assert!(matches!(read_metrics(out_of_range.as_bytes()), Err(SolarError::Parse { line: 2, .. })));
    let wrong_header = "task,method,accuracy,wall_ms,seed,strategy_digest\n";
    assert!(matches!(read_metrics(wrong_header.as_bytes()), Err(SolarError::Parse { line: 1, .. })));
}

#[test]
fn one_row_summary_is_that_row() {
    let s = summarize(&[mrow("a", "solar", 0.625, 3)]).unwrap();
    assert_eq!(s.per_task["a"]["solar"], (1, 0.625));
    assert_eq!(s.aggregate["solar"], 0.625);
    assert!(s.deltas.is_empty());
    assert!(matches!(summarize(&[]), Err(SolarError::EmptySource(_))));
}

#[test]
fn deltas_are_hand_computed_differences() {
    let rows = vec![
        mrow("a", "baseline", 0.5, 0),
        mrow("a", "baseline", 0.25, 1),
        mrow("a", "generated", 0.5, 0),
        mrow("a", "solar", 0.75, 0),
        mrow("b", "baseline", 0.5, 0),
        mrow("b", "generated", 0.25, 0),
        mrow("b", "solar", 1.0, 0),
    ];
    let s = summarize(&rows).unwrap();
    let d = |task: &str, m: &str, r: &str| {
        s.deltas
            .iter()
            .find(|d| d.task_id == task && d.method == m && d.reference == r)
            .unwrap()
            .value
    };
    assert_eq!(d("a", "solar", "baseline"), 0.75 - 0.375);
    assert_eq!(d("a", "solar", "generated"), 0.25);
    assert_eq!(d("a", "generated", "baseline"), 0.5 - 0.375);
    assert_eq!(d("b", "solar", "generated"), 0.75);
    assert_eq!(s.aggregate["baseline"], (0.375 + 0.5) / 2.0);
    assert_eq!(d("AVERAGE", "solar", "baseline"), 0.875 - 0.4375);
    assert!(s.deltas.iter().all(|d| d.method != "baseline"));
    assert_eq!(s.deltas.len(), 3 * 3);
    let text = s.render();
    assert!(text.contains("AVERAGE"));
    assert!(text.contains("Δ"));
    let plot = s.plot_csv();
    assert_eq!(plot.lines().next().unwrap(), "task_id,method,mean_accuracy,count");
    assert!(plot.contains("a,baseline,0.375,2"));
}

#[test]
fn shuffled_rows_give_identical_summary() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows: Vec<MetricsRow> = (0..60)
        .map(|i| {
            let acc = [0.1, 0.3, 0.7, 0.2, 0.9, 0.35][i % 6] + 1e-3 * (i % 7) as f64;
            mrow(["x", "y", "z"][i % 3], ["baseline", "generated", "solar"][i / 20], acc, i as u64)
        })
        .collect();
    let s = summarize(&rows).unwrap();
    for _ in 0..5 {
        rows.shuffle(&mut rng);
        assert_eq!(summarize(&rows).unwrap(), s);
    }
}

#[test]
fn config_toml_defaults_and_overrides() {
    let cfg = ExperimentConfig::from_toml(
        r#"
seeds = [1, 2]

[[tasks]]
task_id = "drifted"
rule = "keyword-match"
drift = [{ step = 500, kind = "shift_labels", by = 1 }]

[[levels]]
level = "I"

[[levels]]
level = "III"
iterations = 1

[decoder]
epochs = 3
"#,
    )
    .unwrap();
    assert_eq!(cfg.seeds, vec![1, 2]);
    assert_eq!(cfg.tasks[0].vocab_size, 24);
    assert_eq!(cfg.tasks[0].sizes.unlabeled, 128);
    assert_eq!(
        cfg.tasks[0].drift,
        vec![Drift {
            step: 500,
            perturbation: Perturbation::ShiftLabels { by: 1 }
        }]
    );
    assert_eq!(cfg.decoder.epochs, 3);
    assert_eq!(cfg.decoder.pairs, 16);
    let levels = cfg.level_configs();
    assert_eq!(levels[0].samples_per_iteration, 15);
    assert_eq!(levels[1].level, Level::III);
    assert_eq!(levels[1].iterations, 1);
    assert_eq!(levels[1].mu, 0.5);
    cfg.check().unwrap();

    let round = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(round, cfg);
    assert!(matches!(ExperimentConfig::from_toml("bogus = 1"), Err(SolarError::Config(_))));
    assert!(matches!(ExperimentConfig::default().check(), Err(SolarError::Config(_))));
}

#[test]
fn paper_scale_keeps_snapshot_policy() {
    let mut cfg = ExperimentConfig {
        paper_scale: true,
        ..ExperimentConfig::default()
    };
    cfg.checkpoints.finetune_only = true;
    let r = cfg.recipe(3);
    assert_eq!((r.pretrain_lr, r.finetune_lr, r.num_samples, r.batch_size), (1e-4, 1e-5, 5000, 32));
    assert!(r.finetune_only);
    assert_eq!(r.seed, 3);
}

#[test]
fn missing_kb_file_is_a_config_error() {
    let cfg = ExperimentConfig {
        kb: Some("/nonexistent/kb.jsonl".into()),
        ..ExperimentConfig::default()
    };
    assert!(matches!(cfg.initial_kb(), Err(SolarError::Config(_))));
    assert!(!ExperimentConfig::default().initial_kb().unwrap().is_empty());
}

#[test]
fn only_the_unlabeled_split_reaches_adaptation() {
    let b = gen_task(&spec(Rule::KeywordMatch, 0)).unwrap();
    assert_eq!(adaptation_prompts(&b.unlabeled).unwrap().len(), 32);
    for split in [&b.train, &b.source_eval, &b.eval, &b.test] {
        assert!(matches!(adaptation_prompts(split), Err(SolarError::Config(_))));
    }
    let tainted = Split {
        role: SplitRole::Unlabeled,
        samples: b.test.samples.clone(),
    };
    assert!(matches!(adaptation_prompts(&tainted), Err(SolarError::Config(_))));
}

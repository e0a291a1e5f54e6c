use std::fs;

use lmgnn::config::RunConfig;
use lmgnn::graph::{generate_synthetic, NodeRef, Split, SyntheticSpec};
use lmgnn::pipeline::{
    encode_nodes_no_grad, evaluate, pre_finetune_lm, run_stagewise, strip_timestamps, LmGnnModel,
    MetricsLog, Schema, StageKind, StageSpec, Task, TaskData, TrainConfig, Trainer,
};
use lmgnn::tensor::{Module, ParamGroup, Tensor};
use lmgnn::text::Vocab;
use lmgnn::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SMALL: &str = "text_dim = 16\ntext_heads = 2\ntext_layers = 1\nmax_len = 12\nfanouts = 4\n\
                     eval_max_queries = 40\ntrain_nodes_per_batch = 16";

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        queries: 60,
        products: 60,
        p_intra: 0.2,
        p_inter: 0.01,
        vocab_size: 40,
        seed,
        ..SyntheticSpec::default()
    }
}

fn setup(task: Task, extra: &str) -> (LmGnnModel, TaskData, TrainConfig) {
    let g = generate_synthetic(&small_spec(3)).unwrap();
    let config = RunConfig::parse(&format!("task = {task}\n{SMALL}\n{extra}")).unwrap();
    let vocab = Vocab::build(g.all_nodes().iter().map(|&n| g.text(n)));
    let model =
        LmGnnModel::new(config.model_config(vocab.len()), Schema::of(&g), vocab, 7).unwrap();
    let data = TaskData::new(g, &model, task, None, None).unwrap();
    (model, data, config.train_config())
}

fn with_stages(config: &TrainConfig, stages: &[(StageKind, usize)]) -> TrainConfig {
    let mut c = config.clone();
    c.stages = stages
        .iter()
        .map(|&(k, e)| StageSpec::new(k, e, c.task))
        .collect();
    c
}

/// Names of parameters whose values differ between two models.
fn changed(a: &LmGnnModel, b: &LmGnnModel) -> Vec<(String, ParamGroup)> {
    a.params()
        .iter()
        .zip(b.params())
        .filter(|(x, y)| x.value() != y.value())
        .map(|(x, _)| (x.name().to_string(), x.group()))
        .collect()
}

#[test]
fn zero_epochs_of_pre_fine_tuning_change_nothing() {
    let (model, data, config) = setup(Task::Link, "");
    let mut m = model.clone();
    pre_finetune_lm(&mut m, &data, &config, 0, &mut MetricsLog::new()).unwrap();
    assert_eq!(m, model);
}

#[test]
fn pre_fine_tuning_lowers_loss_and_pulls_neighbours_together() {
    let (mut model, data, config) = setup(Task::Link, "");
    let outcome = pre_finetune_lm(&mut model, &data, &config, 5, &mut MetricsLog::new()).unwrap();
    let losses = &outcome.epoch_losses;
    assert!(losses[4] < losses[0], "{losses:?}");

    let nodes = data.text.texted_nodes();
    let emb = encode_nodes_no_grad(&model, &data.text, &nodes, 64).unwrap();
    let g = &data.message;
    let row = |n| emb.row(nodes.iter().position(|&m| m == n).unwrap());
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt()
            * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let rel = data.target_relation.unwrap();
    let r = &g.relations()[rel];
    let connected: Vec<f64> = g
        .edges(rel)
        .iter()
        .map(|&(s, d)| {
            cos(
                row(NodeRef::new(r.src_type, s)),
                row(NodeRef::new(r.dst_type, d)),
            )
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let random: Vec<f64> = (0..2000)
        .map(|_| {
            cos(
                emb.row(rng.gen_range(0..nodes.len())),
                emb.row(rng.gen_range(0..nodes.len())),
            )
        })
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&connected) > mean(&random),
        "{} vs {}",
        mean(&connected),
        mean(&random)
    );
}

#[test]
fn warm_start_leaves_the_text_encoder_untouched() {
    let (model, data, config) = setup(Task::Link, "");
    let (m, _) = train(
        &model,
        &data,
        &with_stages(&config, &[(StageKind::WarmStartGNN, 1)]),
    );
    let diff = changed(&model, &m);
    assert!(!diff.is_empty());
    assert!(
        diff.iter()
            .all(|(_, g)| matches!(g, ParamGroup::Gnn | ParamGroup::Head)),
        "{diff:?}"
    );
}

#[test]
fn head_only_changes_only_heads() {
    let (model, data, config) = setup(Task::Node, "");
    let (m, _) = train(
        &model,
        &data,
        &with_stages(&config, &[(StageKind::HeadOnly, 1)]),
    );
    let diff = changed(&model, &m);
    assert!(diff.iter().any(|(n, _)| n.starts_with("node_head")));
    assert!(diff.iter().all(|(_, g)| *g == ParamGroup::Head), "{diff:?}");
}

#[test]
fn one_end_to_end_step_updates_every_trainable_group() {
    let (model, data, config) = setup(Task::Link, "");
    let mut c = TrainConfig {
        steps_per_epoch: Some(1),
        ..with_stages(&config, &[(StageKind::EndToEnd, 1)])
    };
    c.budget.train_nodes_per_batch = 100_000;
    let mut m = model.clone();
    let mut log = MetricsLog::new();
    Trainer::new(&c, &data, &mut log)
        .train_stage(&mut m, 0, &c.stages[0])
        .unwrap();
    let diff = changed(&model, &m);
    for group in [ParamGroup::Lm, ParamGroup::Gnn, ParamGroup::Head] {
        assert!(diff.iter().any(|(_, g)| *g == group), "{group:?} unchanged");
    }
    assert!(!diff.iter().any(|(_, g)| *g == ParamGroup::LmDecoder));
}

fn train(model: &LmGnnModel, data: &TaskData, config: &TrainConfig) -> (LmGnnModel, MetricsLog) {
    let mut m = model.clone();
    let mut log = MetricsLog::new();
    run_stagewise(&mut m, data, config, &mut log, None).unwrap();
    (m, log)
}

#[test]
fn runs_are_reproducible() {
    let (model, data, config) = setup(Task::Link, "cache_capacity = 300\ncache_staleness = 3");
    let c = TrainConfig {
        steps_per_epoch: Some(3),
        ..with_stages(
            &config,
            &[
                (StageKind::PreFineTuneLM, 1),
                (StageKind::WarmStartGNN, 1),
                (StageKind::EndToEnd, 1),
            ],
        )
    };
    let (a, log_a) = train(&model, &data, &c);
    let (b, log_b) = train(&model, &data, &c);
    assert_eq!(a, b);
    assert_eq!(
        strip_timestamps(&log_a.lines().join("\n")),
        strip_timestamps(&log_b.lines().join("\n"))
    );
}

#[test]
fn single_pre_fine_tuning_stage_matches_the_direct_call() {
    let (model, data, config) = setup(Task::Link, "");
    let c = TrainConfig {
        steps_per_epoch: Some(4),
        ..with_stages(&config, &[(StageKind::PreFineTuneLM, 2)])
    };
    let (staged, _) = train(&model, &data, &c);
    let mut direct = model.clone();
    pre_finetune_lm(&mut direct, &data, &c, 2, &mut MetricsLog::new()).unwrap();
    assert_eq!(staged, direct);
}

fn stage_checkpoints(dir: &std::path::Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn canonical_plan_writes_a_checkpoint_per_stage() {
    let (model, data, config) = setup(Task::Link, "");
    let c = TrainConfig {
        steps_per_epoch: Some(2),
        ..with_stages(
            &config,
            &[
                (StageKind::PreFineTuneLM, 1),
                (StageKind::WarmStartGNN, 1),
                (StageKind::EndToEnd, 1),
            ],
        )
    };
    let dir = tempfile::tempdir().unwrap();
    let mut m = model.clone();
    let outcome =
        run_stagewise(&mut m, &data, &c, &mut MetricsLog::new(), Some(dir.path())).unwrap();
    assert_eq!(
        stage_checkpoints(dir.path()),
        [
            "best",
            "stage1-PreFineTuneLM",
            "stage2-WarmStartGNN",
            "stage3-EndToEnd"
        ]
    );
    assert!(dir.path().join("test_report.json").exists());
    assert_eq!(outcome.stages.len(), 3);
    assert!(outcome.test.is_some());

    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig {
        steps_per_epoch: Some(2),
        ..with_stages(&config, &[(StageKind::PreFineTuneLM, 1)])
    };
    let mut m = model.clone();
    let outcome =
        run_stagewise(&mut m, &data, &c, &mut MetricsLog::new(), Some(dir.path())).unwrap();
    assert_eq!(
        stage_checkpoints(dir.path()),
        ["best", "stage1-PreFineTuneLM"]
    );
    assert!(outcome.test.is_none());
}

#[test]
fn pre_fine_tuning_rejects_other_tasks() {
    let (model, data, config) = setup(Task::Node, "");
    let spec = StageSpec {
        kind: StageKind::PreFineTuneLM,
        epochs: 1,
        task: Task::Node,
        learning_rate: None,
    };
    let mut m = model.clone();
    let mut log = MetricsLog::new();
    let err = Trainer::new(&config, &data, &mut log)
        .train_stage(&mut m, 0, &spec)
        .unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    assert_eq!(m, model);
}

#[test]
fn mismatched_layers_fail_before_training() {
    let (model, data, mut config) = setup(Task::Node, "");
    config.sampler.num_layers = 3;
    let mut m = model.clone();
    let err = run_stagewise(&mut m, &data, &config, &mut MetricsLog::new(), None).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    assert_eq!(m, model);
}

#[test]
fn non_finite_loss_aborts_with_a_snapshot() {
    let (mut model, data, config) = setup(Task::Node, "");
    let w = &mut model.gnn.layers[1].w_self;
    *w.value_mut() = Tensor::full(w.value().shape(), f64::NAN);
    let c = with_stages(&config, &[(StageKind::WarmStartGNN, 1)]);
    let dir = tempfile::tempdir().unwrap();
    let err = run_stagewise(
        &mut model,
        &data,
        &c,
        &mut MetricsLog::new(),
        Some(dir.path()),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
    let snapshot: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("nan_snapshot.json")).unwrap())
            .unwrap();
    assert_eq!(snapshot["stage"], "WarmStartGNN");
    assert!(!snapshot["targets"].as_array().unwrap().is_empty());
}

#[test]
fn node_classification_beats_chance() {
    let (model, data, config) = setup(Task::Node, "");
    let (m, _) = train(
        &model,
        &data,
        &with_stages(&config, &[(StageKind::WarmStartGNN, 20)]),
    );
    let report = evaluate(
        &m,
        &data.full,
        &data.message,
        &data.text,
        Task::Node,
        None,
        Split::Test,
        &config.eval,
    )
    .unwrap();
    let chance = 1.0 / data.full.num_node_classes() as f64;
    assert!(
        report.metrics["accuracy"] > 2.0 * chance,
        "{:?}",
        report.metrics
    );
}

// Same-cluster edge labels are not linearly separable from a concatenation of
// endpoint embeddings, so this only checks that training makes progress.
#[test]
fn edge_classification_trains() {
    let (model, data, config) = setup(Task::Edge, "");
    let mut m = model.clone();
    let outcome = run_stagewise(
        &mut m,
        &data,
        &with_stages(&config, &[(StageKind::WarmStartGNN, 6)]),
        &mut MetricsLog::new(),
        None,
    )
    .unwrap();
    let losses = &outcome.stages[0].epoch_losses;
    assert!(losses[losses.len() - 1] < losses[0], "{losses:?}");
    let report = outcome.test.unwrap();
    let classes = data.full.num_edge_classes();
    for c in 0..classes {
        assert!((0.0..=1.0).contains(&report.metrics[&format!("f1_class{c}")]));
    }
    assert!(report.metrics["macro_f1"] > 0.0);
}

use std::fs;
use std::path::Path;

use lmgnn::commands::{
    cmd_dump_embeddings, cmd_eval, cmd_synth, cmd_train, exit_code, TEST_REPORT_FILE,
};
use lmgnn::config::RunConfig;
use lmgnn::graph::{load_graph, Split, SyntheticSpec};
use lmgnn::metrics::EvalReport;
use lmgnn::pipeline::checkpoint::load_checkpoint;
use lmgnn::pipeline::Task;
use lmgnn::Error;

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        queries: 50,
        products: 50,
        p_intra: 0.2,
        p_inter: 0.01,
        vocab_size: 40,
        seed: 5,
        ..SyntheticSpec::default()
    }
}

fn config(graph: &Path, out: &Path, extra: &str) -> RunConfig {
    RunConfig::parse(&format!(
        "graph_dir = {}\nout_dir = {}\ntext_dim = 16\ntext_heads = 2\ntext_layers = 1\nmax_len = 12\n\
         fanouts = 4\nepochs = 1\nsteps_per_epoch = 3\n{extra}",
        graph.display(),
        out.display()
    ))
    .unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_is_deterministic_and_guards_its_output() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_synth(&spec(), &a, false).unwrap();
    cmd_synth(&spec(), &b, false).unwrap();
    assert_eq!(files(&a), files(&b));

    let err = cmd_synth(&spec(), &a, false).unwrap_err();
    assert_eq!(exit_code(&err), 2);
    cmd_synth(&SyntheticSpec { seed: 6, ..spec() }, &a, true).unwrap();
    assert_ne!(files(&a), files(&b));
}

#[test]
fn single_cluster_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_synth(
        &SyntheticSpec {
            clusters: 1,
            ..spec()
        },
        dir.path(),
        false,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert_eq!(exit_code(&err), 2);
}

#[test]
fn numerical_failures_map_to_their_own_exit_code() {
    assert_eq!(exit_code(&Error::Numerical("nan".into())), 3);
    assert_eq!(exit_code(&Error::contract("x")), 1);
}

#[test]
fn evaluating_the_best_checkpoint_reproduces_the_test_report() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("graph");
    cmd_synth(&spec(), &graph, false).unwrap();
    let out = dir.path().join("run");
    let summary = cmd_train(&config(&graph, &out, "mlm_steps = 2"), false).unwrap();
    let written: EvalReport =
        serde_json::from_str(&fs::read_to_string(out.join(TEST_REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(summary.outcome.test.as_ref(), Some(&written));

    let best = out.join("checkpoints").join("best");
    let again = cmd_eval(&best, &graph, Some(Task::Link), Split::Test).unwrap();
    assert_eq!(again, written);

    let err = cmd_eval(&best, &graph, Some(Task::Node), Split::Test).unwrap_err();
    assert_eq!(exit_code(&err), 2);

    // A second run into the same directory needs --force.
    let err = cmd_train(&config(&graph, &out, ""), false).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn node_task_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("graph");
    cmd_synth(&spec(), &graph, false).unwrap();
    let out = dir.path().join("run");
    let cfg = config(&graph, &out, "task = node\nstages = WarmStartGNN,HeadOnly");
    let summary = cmd_train(&cfg, false).unwrap();
    let again = cmd_eval(
        &out.join("checkpoints").join("best"),
        &graph,
        None,
        Split::Test,
    )
    .unwrap();
    assert_eq!(summary.outcome.test.unwrap(), again);
    assert!(again.metrics.contains_key("accuracy"));
}

#[test]
fn embedding_dump_has_one_row_per_node() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("graph");
    cmd_synth(&spec(), &graph, false).unwrap();
    let out = dir.path().join("run");
    cmd_train(&config(&graph, &out, "stages = WarmStartGNN"), false).unwrap();
    let ckpt = out.join("checkpoints").join("best");
    let (a, b) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
    let rows = cmd_dump_embeddings(&ckpt, &graph, &a).unwrap();
    cmd_dump_embeddings(&ckpt, &graph, &b).unwrap();

    let g = load_graph(&graph).unwrap();
    let (model, _) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(rows, g.num_nodes());
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), g.num_nodes());
    for (line, node) in lines.iter().zip(g.all_nodes()) {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 2 + model.gnn.out_dim());
        assert_eq!(fields[0], g.node_types()[node.ty]);
        assert_eq!(fields[1].parse::<usize>().unwrap(), node.id);
        assert!(fields[2..]
            .iter()
            .all(|f| f.parse::<f64>().unwrap().is_finite()));
    }
}

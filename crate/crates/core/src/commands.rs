//! The operations behind each command-line subcommand.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{
    generate_synthetic, load_graph, save_graph, SamplerConfig, Split, SyntheticSpec,
};
use crate::metrics::EvalReport;
use crate::pipeline::checkpoint::load_checkpoint;
use crate::pipeline::{
    evaluate, mlm_pretrain, node_embeddings, run_stagewise, FeatureTable, LmGnnModel, MetricsLog,
    RunOutcome, Schema, Task, TaskData,
};
use crate::text::Vocab;

/// Graphs up to this many nodes get saturating fanout when dumping
/// embeddings.
pub const FULL_NEIGHBOURHOOD_LIMIT: usize = 10_000;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TEST_REPORT_FILE: &str = "test_report.json";

/// Process exit code for an error: 2 for configuration problems, 3 for
/// numerical failure, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Numerical(_) => 3,
        _ => 1,
    }
}

fn ensure_empty_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn cmd_synth(spec: &SyntheticSpec, out_dir: &Path, force: bool) -> Result<()> {
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    ensure_empty_dir(out_dir, force)?;
    let graph = generate_synthetic(spec)?;
    save_graph(&graph, out_dir)
}

fn build_vocab(graph: &crate::graph::HeteroGraph) -> Vocab {
    let nodes = graph.all_nodes();
    Vocab::build(nodes.iter().map(|&n| graph.text(n)))
}

#[derive(Debug)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub outcome: RunOutcome,
}

/// Trains the configured stage plan, writing `metrics.jsonl`, checkpoints
/// and `test_report.json` under the configured output directory.
pub fn cmd_train(config: &RunConfig, force: bool) -> Result<TrainSummary> {
    config.validate()?;
    let graph = load_graph(&config.graph_dir)?;
    let out = config.out_dir.clone();
    ensure_empty_dir(&out, force)?;
    let vocab = build_vocab(&graph);
    let model_config = config.model_config(vocab.len());
    model_config.text.validate()?;
    let mut model = LmGnnModel::new(model_config, Schema::of(&graph), vocab, config.seed)?;
    let partition = (config.target_mode == crate::graph::TargetMode::PartitionLocal)
        .then_some((config.partition_leaves, config.seed));
    let data = TaskData::new(
        graph,
        &model,
        config.task,
        config.target_relation.as_deref(),
        partition,
    )?;
    let train = config.train_config();
    let mut log = MetricsLog::to_file(out.join(METRICS_FILE))?;
    if config.mlm_steps > 0 {
        mlm_pretrain(
            &mut model,
            &data.text,
            config.mlm_steps,
            config.batch_size,
            config.learning_rate[0],
            config.mlm_mask_prob,
            config.seed,
            &mut log,
        )?;
    }
    let outcome = run_stagewise(&mut model, &data, &train, &mut log, Some(&out))?;
    if let Some(t) = &outcome.test {
        info!("test {}: {:?}", t.task, t.metrics);
    }
    Ok(TrainSummary {
        out_dir: out,
        outcome,
    })
}

fn load_for_eval(
    checkpoint: &Path,
    graph_dir: &Path,
    task: Option<Task>,
) -> Result<(
    LmGnnModel,
    TaskData,
    crate::pipeline::checkpoint::CheckpointMeta,
)> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let graph = load_graph(graph_dir)?;
    if let Some(t) = task {
        if t != meta.task {
            return Err(Error::Config(format!(
                "checkpoint heads were trained for the {} task, not {t}",
                meta.task
            )));
        }
    }
    let data = TaskData::new(
        graph,
        &model,
        meta.task,
        meta.target_relation.as_deref(),
        None,
    )?;
    Ok((model, data, meta))
}

pub fn cmd_eval(
    checkpoint: &Path,
    graph_dir: &Path,
    task: Option<Task>,
    split: Split,
) -> Result<EvalReport> {
    let (model, data, meta) = load_for_eval(checkpoint, graph_dir, task)?;
    evaluate(
        &model,
        &data.full,
        &data.message,
        &data.text,
        meta.task,
        data.target_relation,
        split,
        &meta.eval,
    )
}

/// Writes `node_type<TAB>local_id<TAB>f1<TAB>...` for every node.
pub fn cmd_dump_embeddings(checkpoint: &Path, graph_dir: &Path, out_file: &Path) -> Result<usize> {
    let (model, data, meta) = load_for_eval(checkpoint, graph_dir, None)?;
    let sampler = if data.full.num_nodes() <= FULL_NEIGHBOURHOOD_LIMIT {
        SamplerConfig {
            dedup: true,
            ..SamplerConfig::full(meta.eval.sampler.num_layers)
        }
    } else {
        meta.eval.sampler.clone()
    };
    let sampler = SamplerConfig {
        include_reverse: model.config.include_reverse,
        ..sampler
    };
    let eval = crate::pipeline::EvalConfig {
        sampler,
        ..meta.eval.clone()
    };
    let features = FeatureTable::compute(&model, &data.text, eval.batch_size)?;
    let nodes = data.full.all_nodes();
    let emb = node_embeddings(&model, &data.message, &features, &nodes, &eval)?;
    if let Some(parent) = out_file.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(fs::File::create(out_file)?);
    for (i, n) in nodes.iter().enumerate() {
        write!(w, "{}\t{}", data.full.node_types()[n.ty], n.id)?;
        for x in emb.row(i) {
            write!(w, "\t{x}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(nodes.len())
}

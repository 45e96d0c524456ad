use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use edgeforge::config::RunConfig;
use edgeforge::edge_features::EdgeFeatureTable;
use edgeforge::graph::{Graph, Masks};
use edgeforge::interpret::{attention_graph, edge_feature_importance, gene_saliency};
use edgeforge::io::{
    atomic_write, read_checkpoint, read_edge_table, read_graph_dir, read_json, read_matrix, write_checkpoint,
    write_edge_table, write_graph_dir, write_json,
};
use edgeforge::layers::extract_edge_features;
use edgeforge::pipeline::{
    ablate, build_edge_features, evaluate, task_labels, test_accuracy, train_auxiliary, train_main, LabelSource,
    MainModel, MainModelConfig, RunRecord, RunReport,
};
use edgeforge::preprocess::{build_graph, normalize_counts};
use edgeforge::synth::{build_dataset, DatasetSpec};
use edgeforge::unsupervised::{edge_dot_features, forman_ricci, louvain, node2vec_embed};
use edgeforge::{Error, Result};

#[derive(Parser)]
#[command(name = "edgeforge", version, about = "Edge-feature graph learning toolkit")]
struct Cli {
    /// Directory every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled graph dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a kNN or batch-balanced kNN graph from a feature matrix.
    BuildGraph {
        /// Dense TSV or matrix-market (`.mtx`) features.
        #[arg(long)]
        features: PathBuf,
        /// Node label TSV with a `node` column and optional `batch`, `community`, `class`.
        #[arg(long)]
        nodes: Option<PathBuf>,
        /// Library-size normalize and square-root transform counts first.
        #[arg(long)]
        normalize: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.6)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label-free edge and node descriptors.
    Edges {
        #[command(subcommand)]
        kind: EdgesCommand,
    },
    /// Train an auxiliary GAT and export its attention coefficients.
    TrainAux {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, value_enum)]
        task: AuxTask,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the full edge-feature table for a graph.
    AssembleEdges {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one classifier and save its checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train over every configured seed and report accuracy statistics.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare the configured model with and without edge features.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Export saliency, edge-feature importance and the attention graph.
    Interpret {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EdgesCommand {
    /// Forman-Ricci curvature per directed edge.
    Curvature {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Louvain community per node.
    Louvain {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        resolution: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// node2vec embedding dot product per directed edge.
    Node2vec {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the node embedding.
        #[arg(long)]
        embedding: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AuxTask {
    Community,
    Batch,
}

/// Everything needed to rebuild a trained model next to its checkpoint.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    config: MainModelConfig,
    n_features: usize,
    n_classes: usize,
    edge_columns: Vec<String>,
    max_set: usize,
    seed: u64,
}

#[derive(Serialize)]
struct AuxSummary {
    train_loss: Vec<f64>,
    holdout_loss: Vec<f64>,
    best_epoch: usize,
    holdout_accuracy: f64,
    accuracy: f64,
}

#[derive(Serialize)]
struct AblationSummary {
    baseline_accuracy: f64,
    enhanced_accuracy: f64,
    accuracy_gain: f64,
    p_value: Option<f64>,
    epoch_ratio: f64,
}

struct Ctx {
    workdir: PathBuf,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    fn config(&self, p: Option<&Path>) -> Result<RunConfig> {
        match p {
            Some(p) => RunConfig::load(&self.path(p)),
            None => Ok(RunConfig::default()),
        }
    }

    fn graph(&self, p: &Path) -> Result<Graph> {
        read_graph_dir(&self.path(p))
    }

    /// Graph and the edge columns the config enables.
    fn inputs(&self, cfg: &RunConfig) -> Result<(Graph, EdgeFeatureTable)> {
        let g = self.graph(&cfg.paths.graph)?;
        let toggles = &cfg.edge_features;
        if !(toggles.community_attention || toggles.batch_attention || toggles.curvature || toggles.node2vec) {
            return Ok((g.clone(), EdgeFeatureTable::empty(g.n_edges())));
        }
        let table = read_edge_table(&self.path(&cfg.paths.edges), &g)?;
        Ok((g, toggles.select(&table)?))
    }
}

fn node_tsv(header: &str, values: impl IntoIterator<Item = String>) -> String {
    let mut out = format!("node\t{header}\n");
    for (i, v) in values.into_iter().enumerate() {
        out.push_str(&format!("{i}\t{v}\n"));
    }
    out
}

fn edge_tsv(g: &Graph, header: &str, values: &[f64]) -> String {
    let mut out = format!("src\tdst\t{header}\n");
    for (e, v) in g.edges().zip(values) {
        out.push_str(&format!("{}\t{}\t{v}\n", e.src, e.dst));
    }
    out
}

fn write_report(dir: &Path, name: &str, report: &RunReport) -> Result<()> {
    atomic_write(&dir.join(format!("{name}.json")), report.to_json()?.as_bytes())?;
    atomic_write(&dir.join(format!("{name}_losses.tsv")), report.loss_tsv().as_bytes())
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx { workdir: cli.workdir };
    match cli.command {
        Command::Synth { spec, out } => {
            let spec: DatasetSpec = read_json(&ctx.path(&spec))?;
            let g = build_dataset(&spec)?;
            write_graph_dir(&ctx.path(&out), &g)
        }
        Command::BuildGraph {
            features,
            nodes,
            normalize,
            config,
            train_fraction,
            val_fraction,
            seed,
            out,
        } => {
            let cfg = ctx.config(config.as_deref())?;
            let mut x = read_matrix(&ctx.path(&features))?;
            if normalize {
                x = normalize_counts(&x)?;
            }
            let labels = match &nodes {
                Some(p) => Some(read_node_labels(&ctx.path(p), x.rows())?),
                None => None,
            };
            let batch = labels.as_ref().and_then(|l| l.iter().find(|(n, _)| n == "batch")).map(|(_, v)| v.as_slice());
            let mut g = build_graph(&x, batch, &cfg.graph)?;
            for (name, v) in labels.unwrap_or_default() {
                g = match name.as_str() {
                    "batch" => g,
                    "community" => g.with_community(v)?,
                    _ => g.with_class(v)?,
                };
            }
            let g = g.with_masks(Masks::random_split(x.rows(), train_fraction, val_fraction, seed))?;
            write_graph_dir(&ctx.path(&out), &g)
        }
        Command::Edges { kind } => match kind {
            EdgesCommand::Curvature { graph, out } => {
                let g = ctx.graph(&graph)?;
                let curv = forman_ricci(&g, None, Some(g.weights()))?.per_edge(&g)?;
                atomic_write(&ctx.path(&out), edge_tsv(&g, "curvature", &curv).as_bytes())
            }
            EdgesCommand::Louvain {
                graph,
                resolution,
                seed,
                out,
            } => {
                let g = ctx.graph(&graph)?;
                let a = louvain(&g, resolution, seed)?;
                atomic_write(&ctx.path(&out), node_tsv("community", a.community.iter().map(usize::to_string)).as_bytes())
            }
            EdgesCommand::Node2vec {
                graph,
                config,
                seed,
                out,
                embedding,
            } => {
                let cfg = ctx.config(config.as_deref())?;
                let g = ctx.graph(&graph)?;
                let emb = node2vec_embed(&g, &cfg.node2vec, seed)?;
                let dots = edge_dot_features(&emb, &g)?;
                atomic_write(&ctx.path(&out), edge_tsv(&g, "node2vec_dot", &dots).as_bytes())?;
                if let Some(p) = embedding {
                    let v = &emb.vectors;
                    let header = (0..v.cols()).map(|c| format!("d{c}")).collect::<Vec<_>>().join("\t");
                    let rows = (0..v.rows()).map(|i| v.row(i).iter().map(f64::to_string).collect::<Vec<_>>().join("\t"));
                    atomic_write(&ctx.path(&p), node_tsv(&header, rows).as_bytes())?;
                }
                Ok(())
            }
        },
        Command::TrainAux {
            graph,
            task,
            config,
            seed,
            out,
        } => {
            let cfg = ctx.config(config.as_deref())?;
            let g = ctx.graph(&graph)?;
            let labels = match task {
                AuxTask::Batch => task_labels(&g, LabelSource::Batch)?,
                AuxTask::Community => match g.community() {
                    Some(c) => c.to_vec(),
                    None => louvain(&g, cfg.louvain_resolution, seed)?.community,
                },
            };
            let outcome = train_auxiliary(&g, &labels, &cfg.aux, seed)?;
            let dir = ctx.path(&out);
            let features = extract_edge_features(&outcome.attention);
            let columns = (1..=features.cols()).map(|h| format!("h{h}")).collect();
            let table = EdgeFeatureTable::new(columns, features)?;
            write_edge_table(&dir.join("attention.tsv"), &g, &table)?;
            write_checkpoint(&dir.join("aux.efck"), &outcome.params)?;
            write_json(
                &dir.join("aux.json"),
                &AuxSummary {
                    train_loss: outcome.train_loss,
                    holdout_loss: outcome.holdout_loss,
                    best_epoch: outcome.best_epoch,
                    holdout_accuracy: outcome.holdout_accuracy,
                    accuracy: outcome.accuracy,
                },
            )
        }
        Command::AssembleEdges {
            graph,
            config,
            seed,
            out,
        } => {
            let cfg = ctx.config(config.as_deref())?;
            let g = ctx.graph(&graph)?;
            let (table, _) = build_edge_features(&g, &cfg.edge_feature_config(), seed)?;
            write_edge_table(&ctx.path(&out), &g, &table)
        }
        Command::Train { config, seed } => {
            let cfg = ctx.config(Some(&config))?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let (g, table) = ctx.inputs(&cfg)?;
            let (model, outcome) = train_main(&g, &table, &cfg.model_config(), seed)?;
            let acc = test_accuracy(&model, &outcome.params, &g, &table)?;
            let dir = ctx.path(&cfg.paths.out);
            write_checkpoint(&dir.join("model.efck"), &outcome.params)?;
            write_json(
                &dir.join("model.json"),
                &ModelManifest {
                    config: model.config.clone(),
                    n_features: model.n_features,
                    n_classes: model.n_classes,
                    edge_columns: table.columns().to_vec(),
                    max_set: model.max_set,
                    seed,
                },
            )?;
            let record = RunRecord {
                seed,
                train_loss: outcome.train_loss,
                val_loss: outcome.val_loss,
                best_epoch: outcome.best_epoch,
                test_accuracy: acc,
            };
            write_json(&dir.join("train.json"), &record)
        }
        Command::Evaluate { config } => {
            let cfg = ctx.config(Some(&config))?;
            let (g, table) = ctx.inputs(&cfg)?;
            let report = evaluate(&g, &table, &cfg.model_config(), &cfg.seeds, "evaluate")?;
            write_report(&ctx.path(&cfg.paths.out), "report", &report)
        }
        Command::Ablate { config } => {
            let cfg = ctx.config(Some(&config))?;
            let (g, table) = ctx.inputs(&cfg)?;
            let a = ablate(&g, &table, &cfg.model_config(), &cfg.seeds)?;
            let dir = ctx.path(&cfg.paths.out);
            write_report(&dir, "baseline", &a.baseline)?;
            write_report(&dir, "enhanced", &a.enhanced)?;
            write_json(
                &dir.join("ablation.json"),
                &AblationSummary {
                    baseline_accuracy: a.baseline.mean_accuracy,
                    enhanced_accuracy: a.enhanced.mean_accuracy,
                    accuracy_gain: a.accuracy_gain(),
                    p_value: a.enhanced.welch.as_ref().map(|w| w.p),
                    epoch_ratio: a.epoch_ratio(),
                },
            )
        }
        Command::Interpret {
            checkpoint,
            config,
            top_k,
            seed,
            out,
        } => {
            let cfg = ctx.config(Some(&config))?;
            let ckpt = ctx.path(&checkpoint);
            let params = read_checkpoint(&ckpt)?;
            let manifest_path = ckpt.with_extension("json");
            let m: ModelManifest = read_json(&manifest_path)?;
            let g = ctx.graph(&cfg.paths.graph)?;
            let table = if m.edge_columns.is_empty() {
                EdgeFeatureTable::empty(g.n_edges())
            } else {
                read_edge_table(&ctx.path(&cfg.paths.edges), &g)?.select_columns(&m.edge_columns)?
            };
            let model = MainModel::new(m.config, m.n_features, m.n_classes, m.edge_columns.len(), m.max_set)?;
            let dir = ctx.path(&out);
            match gene_saliency(&model, &params, top_k) {
                Ok(rep) => atomic_write(&dir.join("saliency.tsv"), rep.to_tsv().as_bytes())?,
                Err(Error::UnsupportedBackbone(msg)) => log::warn!("skipping saliency: {msg}"),
                Err(e) => return Err(e),
            }
            if let Some(enc) = model.encoder() {
                let imp = edge_feature_importance(enc, &params)?;
                let mut tsv = String::from("column\timportance\n");
                for (c, v) in m.edge_columns.iter().zip(&imp) {
                    tsv.push_str(&format!("{c}\t{v}\n"));
                }
                atomic_write(&dir.join("importance.tsv"), tsv.as_bytes())?;
                let (ag, assignment) = attention_graph(&model, &params, &g, &table, cfg.louvain_resolution, seed)?;
                atomic_write(&dir.join("attention_graph.tsv"), ag.to_tsv().as_bytes())?;
                let comms = assignment.community.iter().map(usize::to_string);
                atomic_write(&dir.join("communities.tsv"), node_tsv("community", comms).as_bytes())?;
            }
            Ok(())
        }
    }
}

/// Label columns of a node TSV, validated against the node count.
fn read_node_labels(path: &Path, n: usize) -> Result<Vec<(String, Vec<usize>)>> {
    let text = edgeforge::io::read_text(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().unwrap_or_default().split('\t').collect();
    let bad = |msg: String| Error::Format { path: path.into(), msg };
    if header.first() != Some(&"node") {
        return Err(bad("first column must be `node`".into()));
    }
    let mut cols: Vec<(String, Vec<usize>)> = header[1..].iter().map(|h| (h.to_string(), Vec::with_capacity(n))).collect();
    for (name, _) in &cols {
        if !["batch", "community", "class"].contains(&name.as_str()) {
            return Err(bad(format!("unknown label column `{name}`")));
        }
    }
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != header.len() || f[0].trim() != i.to_string() {
            return Err(bad(format!("row {} must list node {i} with {} fields", i + 1, header.len())));
        }
        for (c, (_, v)) in cols.iter_mut().enumerate() {
            v.push(f[c + 1].trim().parse().map_err(|_| bad(format!("row {}: bad label `{}`", i + 1, f[c + 1])))?);
        }
    }
    if cols.iter().any(|(_, v)| v.len() != n) {
        return Err(bad(format!("expected {n} rows")));
    }
    Ok(cols)
}

/// Input, I/O and configuration problems exit with 2; everything else with 1.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Json(_) | Error::InvalidArgument(_) | Error::Invariant(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var("EDGEFORGE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
                "path": e.path().map(|p| p.display().to_string()),
            });
            eprintln!("{report}");
            ExitCode::from(exit_code(&e))
        }
    }
}

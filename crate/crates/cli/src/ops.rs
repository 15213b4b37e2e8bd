//! The four subcommands. Each resolves its settings, logs them as
//! `key = value` lines, and writes nothing but data (reports, predictions,
//! rationale lines) to standard output.

use std::fs;
use std::path::{Path, PathBuf};

use molproto::ama::AmaConfig;
use molproto::autodiff::Tape;
use molproto::episodes::{
    evaluate, load_dataset, meta_train, Dataset, EvalOptions, EvalReport, TaskSplit, TrainConfig,
};
use molproto::mcts::{run_search, RationaleScorer, SearchConfig};
use molproto::model::{embed, Checkpoint, ModelConfig};
use molproto::protonet::{prototype, Prototypes};
use molproto::smiles::{parse_smiles, MolGraph};

use crate::config::{
    load_external_features, load_split, optional, require, resolve, split_names, FileConfig,
};
use crate::{
    data, episode_err, mcts_err, usage, CliError, EvalArgs, Format, PredictArgs, RationaleArgs,
    TrainArgs,
};

fn file_config(path: &Option<PathBuf>) -> Result<FileConfig, CliError> {
    match path {
        Some(p) => FileConfig::load(p),
        None => Ok(FileConfig::empty()),
    }
}

fn log_config(entries: &[(&str, String)]) {
    for (key, value) in entries {
        log::info!("{key} = {value}");
    }
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = file_config(&args.config)?;
    let dataset_path: PathBuf = require(args.dataset, &cfg, "dataset")?;
    let split_path: PathBuf = require(args.split, &cfg, "split")?;
    let checkpoint_path: PathBuf =
        resolve(args.checkpoint, &cfg, "checkpoint", PathBuf::from("checkpoint.json"))?;
    let log_path: Option<PathBuf> = optional(args.log, &cfg, "log")?;
    let features_path: Option<PathBuf> = optional(args.external_features, &cfg, "external-features")?;

    let base = TrainConfig::default();
    let model = ModelConfig::default();
    let ama = AmaConfig::default();
    let train_cfg = TrainConfig {
        k: resolve(args.k, &cfg, "k", base.k)?,
        train_query: resolve(args.train_query, &cfg, "train-query", base.train_query)?,
        lr: resolve(args.lr, &cfg, "lr", base.lr)?,
        episodes: resolve(args.episodes, &cfg, "episodes", base.episodes)?,
        patience: resolve(args.patience, &cfg, "patience", base.patience)?,
        val_fraction: resolve(args.val_fraction, &cfg, "val-fraction", base.val_fraction)?,
        seed: resolve(args.seed, &cfg, "seed", base.seed)?,
        model: ModelConfig {
            d_g: resolve(args.d_g, &cfg, "d-g", model.d_g)?,
            gin_layers: resolve(args.gin_layers, &cfg, "gin-layers", model.gin_layers)?,
            hash_dim: resolve(args.hash_dim, &cfg, "hash-dim", model.hash_dim)?,
            d_a: resolve(args.d_a, &cfg, "d-a", model.d_a)?,
            ama: AmaConfig {
                beta_min: resolve(args.beta_min, &cfg, "beta-min", ama.beta_min)?,
                beta_max: resolve(args.beta_max, &cfg, "beta-max", ama.beta_max)?,
                k: resolve(args.beta_k, &cfg, "beta-k", ama.k)?,
                heads: resolve(args.heads, &cfg, "heads", ama.heads)?,
            },
        },
    };

    log_config(&[
        ("dataset", dataset_path.display().to_string()),
        ("split", split_path.display().to_string()),
        ("checkpoint", checkpoint_path.display().to_string()),
        ("seed", train_cfg.seed.to_string()),
        ("k", train_cfg.k.to_string()),
        ("train-query", train_cfg.train_query.to_string()),
        ("lr", train_cfg.lr.to_string()),
        ("episodes", train_cfg.episodes.to_string()),
        ("patience", train_cfg.patience.to_string()),
        ("val-fraction", train_cfg.val_fraction.to_string()),
        ("d-g", train_cfg.model.d_g.to_string()),
        ("gin-layers", train_cfg.model.gin_layers.to_string()),
        ("hash-dim", train_cfg.model.hash_dim.to_string()),
        ("d-a", train_cfg.model.d_a.to_string()),
        ("heads", train_cfg.model.ama.heads.to_string()),
        ("beta-min", train_cfg.model.ama.beta_min.to_string()),
        ("beta-max", train_cfg.model.ama.beta_max.to_string()),
        ("beta-k", train_cfg.model.ama.k.to_string()),
        (
            "external-features",
            features_path.as_ref().map_or("none".into(), |p| p.display().to_string()),
        ),
    ]);

    let dataset = load_dataset(&dataset_path).map_err(episode_err)?;
    let (train_names, test_names) = load_split(&split_path)?;
    let split = TaskSplit::from_names(&dataset, &train_names, &test_names).map_err(episode_err)?;
    let external = match &features_path {
        Some(p) => Some(load_external_features(p)?),
        None => None,
    };

    let outcome = meta_train(&dataset, &split, &train_cfg, external).map_err(episode_err)?;
    outcome.checkpoint.save(&checkpoint_path).map_err(data)?;
    log::info!(
        "trained {} episodes{}; checkpoint written to '{}'",
        outcome.losses.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" },
        checkpoint_path.display()
    );
    if let Some(&(at, score)) = outcome
        .evals
        .iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite validation scores"))
    {
        log::info!("best validation roc-auc {score:.4} after {at} episodes");
    }

    if let Some(path) = log_path {
        let body = serde_json::json!({
            "losses": outcome.losses,
            "evals": outcome.evals,
            "stopped_early": outcome.stopped_early,
        });
        fs::write(&path, serde_json::to_string_pretty(&body).expect("log serializes"))
            .map_err(|e| data(format!("cannot write log '{}': {e}", path.display())))?;
    }
    Ok(())
}

fn resolve_tasks(dataset: &Dataset, names: &[String]) -> Result<Vec<usize>, CliError> {
    names
        .iter()
        .map(|n| {
            dataset
                .task_index(n)
                .ok_or_else(|| data(format!("unknown task '{n}'")))
        })
        .collect()
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let cfg = file_config(&args.config)?;
    let checkpoint_path: PathBuf = require(args.checkpoint, &cfg, "checkpoint")?;
    let dataset_path: PathBuf = require(args.dataset, &cfg, "dataset")?;
    let split_path: Option<PathBuf> = optional(args.split, &cfg, "split")?;
    let tasks_raw: Option<String> = optional(args.tasks, &cfg, "tasks")?;
    let base = EvalOptions::default();
    let opts = EvalOptions {
        k: resolve(args.k, &cfg, "k", base.k)?,
        runs: resolve(args.runs, &cfg, "runs", base.runs)?,
        seed: resolve(args.seed, &cfg, "seed", base.seed)?,
        jobs: resolve(args.jobs, &cfg, "jobs", base.jobs)?,
        query: resolve(args.query, &cfg, "query", base.query)?,
    };
    let format = resolve(args.format, &cfg, "format", Format::Text)?;

    log_config(&[
        ("checkpoint", checkpoint_path.display().to_string()),
        ("dataset", dataset_path.display().to_string()),
        ("seed", opts.seed.to_string()),
        ("k", opts.k.to_string()),
        ("runs", opts.runs.to_string()),
        ("jobs", opts.jobs.to_string()),
        ("query", opts.query.to_string()),
    ]);

    let checkpoint = Checkpoint::load(&checkpoint_path).map_err(data)?;
    let dataset = load_dataset(&dataset_path).map_err(episode_err)?;
    let tasks: Vec<usize> = if let Some(raw) = tasks_raw {
        resolve_tasks(&dataset, &split_names(&raw))?
    } else if let Some(path) = split_path {
        let (_, test) = load_split(&path)?;
        resolve_tasks(&dataset, &test)?
    } else {
        (0..dataset.task_count()).collect()
    };

    let report = evaluate(&checkpoint, &dataset, &tasks, &opts).map_err(episode_err)?;
    print_report(&report, format);
    Ok(())
}

fn print_report(report: &EvalReport, format: Format) {
    match format {
        Format::Json => {
            println!("{}", serde_json::to_string_pretty(report).expect("report serializes"));
        }
        Format::Text => {
            for (name, summary) in &report.metrics {
                println!("{name}\t{:.6}\t{:.6}", summary.mean, summary.std);
            }
            if report.metrics.is_empty() {
                log::warn!("no episodes could be scored");
            }
            for name in &report.skipped {
                log::warn!("task '{name}' was skipped in at least one run");
            }
        }
    }
}

/// Picks the task column prototypes are built from. A single-task table
/// needs no flag; a multi-task one does.
fn pick_task(dataset: &Dataset, name: Option<&str>) -> Result<usize, CliError> {
    match name {
        Some(n) => dataset
            .task_index(n)
            .ok_or_else(|| data(format!("unknown task '{n}'"))),
        None if dataset.task_count() == 1 => Ok(0),
        None => Err(usage(format!(
            "support table has {} tasks; pass --task",
            dataset.task_count()
        ))),
    }
}

fn load_smiles_list(path: &Path) -> Result<Vec<(String, MolGraph)>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| data(format!("cannot read molecules '{}': {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mol = parse_smiles(line)
            .map_err(|e| data(format!("{}:{}: '{line}': {e}", path.display(), i + 1)))?;
        out.push((line.to_string(), mol));
    }
    if out.is_empty() {
        return Err(data(format!("no molecules in '{}'", path.display())));
    }
    Ok(out)
}

/// Support molecules of one task as (molecule, label) pairs.
fn support_pairs<'d>(dataset: &'d Dataset, task: usize) -> Result<Vec<(&'d MolGraph, u8)>, CliError> {
    let (pos, neg) = dataset.labeled(task);
    if pos.is_empty() || neg.is_empty() {
        return Err(data(format!(
            "task '{}' needs at least one labeled molecule of each class",
            dataset.task_names()[task]
        )));
    }
    let mut pairs: Vec<(&MolGraph, u8)> = Vec::with_capacity(pos.len() + neg.len());
    pairs.extend(pos.iter().map(|&i| (dataset.molecule(i), 1)));
    pairs.extend(neg.iter().map(|&i| (dataset.molecule(i), 0)));
    Ok(pairs)
}

pub fn predict(args: PredictArgs) -> Result<(), CliError> {
    let cfg = file_config(&args.config)?;
    let checkpoint_path: PathBuf = require(args.checkpoint, &cfg, "checkpoint")?;
    let support_path: PathBuf = require(args.support, &cfg, "support")?;
    let queries_path: PathBuf = require(args.queries, &cfg, "queries")?;
    let task_name: Option<String> = optional(args.task, &cfg, "task")?;
    let format = resolve(args.format, &cfg, "format", Format::Text)?;

    log_config(&[
        ("checkpoint", checkpoint_path.display().to_string()),
        ("support", support_path.display().to_string()),
        ("queries", queries_path.display().to_string()),
        ("task", task_name.clone().unwrap_or_else(|| "(single)".into())),
    ]);

    let checkpoint = Checkpoint::load(&checkpoint_path).map_err(data)?;
    let support_set = load_dataset(&support_path).map_err(episode_err)?;
    let task = pick_task(&support_set, task_name.as_deref())?;
    let pairs = support_pairs(&support_set, task)?;
    let queries = load_smiles_list(&queries_path)?;

    let mut tape = Tape::new();
    let vars = checkpoint.params.register(&mut tape, false);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for &(mol, label) in &pairs {
        let z = embed(&mut tape, mol, &checkpoint.featurizer, &vars, &checkpoint.config)
            .map_err(data)?;
        if label == 1 {
            pos.push(z);
        } else {
            neg.push(z);
        }
    }
    let protos = Prototypes {
        positive: prototype(&mut tape, &pos).map_err(data)?,
        negative: prototype(&mut tape, &neg).map_err(data)?,
    };

    let mut rows = Vec::with_capacity(queries.len());
    for (smiles, mol) in &queries {
        let z = embed(&mut tape, mol, &checkpoint.featurizer, &vars, &checkpoint.config)
            .map_err(data)?;
        let p = molproto::protonet::predict(&mut tape, z, &protos).map_err(data)?;
        rows.push((smiles.clone(), tape.value(p).data()[0]));
    }

    match format {
        Format::Text => {
            for (smiles, p) in &rows {
                println!("{smiles}\t{p:.6}");
            }
        }
        Format::Json => {
            let body: Vec<_> = rows
                .iter()
                .map(|(s, p)| serde_json::json!({"smiles": s, "probability": p}))
                .collect();
            println!("{}", serde_json::to_string_pretty(&body).expect("rows serialize"));
        }
    }
    Ok(())
}

pub fn rationale(args: RationaleArgs) -> Result<(), CliError> {
    let cfg = file_config(&args.config)?;
    let checkpoint_path: PathBuf = require(args.checkpoint, &cfg, "checkpoint")?;
    let support_path: PathBuf = require(args.support, &cfg, "support")?;
    let molecules_path: PathBuf = require(args.molecules, &cfg, "molecules")?;
    let task_name: Option<String> = optional(args.task, &cfg, "task")?;
    let format = resolve(args.format, &cfg, "format", Format::Text)?;
    let base = SearchConfig::default();
    let search = SearchConfig {
        max_atoms: resolve(args.max_atoms, &cfg, "max-atoms", base.max_atoms)?,
        min_atoms: resolve(args.min_atoms, &cfg, "min-atoms", base.min_atoms)?,
        threshold: resolve(args.delta, &cfg, "delta", base.threshold)?,
        c_puct: resolve(args.c_puct, &cfg, "c-puct", base.c_puct)?,
        iterations: resolve(args.iterations, &cfg, "iterations", base.iterations)?,
    };
    search.validate().map_err(mcts_err)?;

    log_config(&[
        ("checkpoint", checkpoint_path.display().to_string()),
        ("support", support_path.display().to_string()),
        ("molecules", molecules_path.display().to_string()),
        ("task", task_name.clone().unwrap_or_else(|| "(single)".into())),
        ("delta", search.threshold.to_string()),
        ("max-atoms", search.max_atoms.to_string()),
        ("min-atoms", search.min_atoms.to_string()),
        ("c-puct", search.c_puct.to_string()),
        ("iterations", search.iterations.to_string()),
    ]);

    let checkpoint = Checkpoint::load(&checkpoint_path).map_err(data)?;
    let support_set = load_dataset(&support_path).map_err(episode_err)?;
    let task = pick_task(&support_set, task_name.as_deref())?;
    let pairs = support_pairs(&support_set, task)?;
    let scorer = RationaleScorer::new(&checkpoint, &pairs).map_err(mcts_err)?;
    let molecules = load_smiles_list(&molecules_path)?;

    let mut entries = Vec::new();
    for (smiles, mol) in &molecules {
        let outcome = run_search(mol, &scorer, &search).map_err(mcts_err)?;
        match outcome.rationales.into_iter().next() {
            Some(entry) => entries.push(entry),
            None => log::warn!(
                "no subgraph of '{smiles}' scored at or above delta {}",
                search.threshold
            ),
        }
    }

    match format {
        Format::Text => {
            for entry in &entries {
                println!("{}", entry.report_line());
            }
        }
        Format::Json => {
            let body: Vec<_> = entries
                .iter()
                .map(|e| {
                    serde_json::json!({"smiles": e.source, "atoms": e.atoms, "score": e.score})
                })
                .collect();
            println!("{}", serde_json::to_string_pretty(&body).expect("entries serialize"));
        }
    }
    Ok(())
}

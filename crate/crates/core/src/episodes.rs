//! Dataset ingestion, 2-way K-shot episode sampling, meta-training, and
//! evaluation over held-out tasks.
//!
//! Randomness is compartmentalized: parameter init, episode sampling,
//! validation draws, and evaluation draws each get their own stream
//! derived from the run seed, so changing one consumer never perturbs the
//! others. Evaluation work items carry pre-derived seeds, which makes the
//! parallel path bit-identical to the sequential one.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, TapeError};
use crate::encoders::{EncoderError, SeqFeaturizer};
use crate::metrics::{self, MetricError, MetricReport, MetricSummary};
use crate::model::{
    apply_gradients, embed_with_sequence, Checkpoint, ModelError, ModelParams, Optimizer, Sgd,
};
use crate::protonet::{class_scores, prototype, episode_loss, ProtoError, Prototypes};
use crate::smiles::{parse_smiles, MolGraph};

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("cannot read '{path}': {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("task '{task}' cannot supply a {k}-shot episode ({pos} positives, {neg} negatives, {spare} spare)")]
    Sampling {
        task: String,
        k: usize,
        pos: usize,
        neg: usize,
        spare: usize,
    },
    #[error("task index {0} out of range")]
    TaskRange(usize),
    #[error("unknown task '{0}'")]
    UnknownTask(String),
    #[error("train and test tasks overlap at '{0}'")]
    SplitOverlap(String),
    #[error("split lists a task twice: '{0}'")]
    SplitDuplicate(String),
    #[error("no training tasks in the split")]
    NoTrainTasks,
    #[error("learning rate {0} outside [0.0005, 0.05]")]
    LearningRate(f64),
    #[error("patience must be at least 1")]
    Patience,
    #[error("shot count must be at least 1")]
    ZeroShot,
    #[error("evaluation needs at least 1 run")]
    ZeroRuns,
    #[error("validation fraction {0} must lie in [0, 1)")]
    ValFraction(f64),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

// ── dataset ─────────────────────────────────────────────────────────────

/// Parsed task matrix: molecules by rows, tasks by columns, each cell a
/// binary label or missing. Molecules that fail to parse are dropped at
/// load time and only counted.
#[derive(Debug, Clone)]
pub struct Dataset {
    molecules: Vec<(String, MolGraph)>,
    labels: Vec<Vec<Option<u8>>>,
    task_names: Vec<String>,
    dropped: usize,
}

impl Dataset {
    /// Parses the CSV format: header `smiles,task_<a>,task_<b>,...`, one
    /// molecule per line, cells in {0, 1, empty}. Cell whitespace is
    /// trimmed. Unparsable SMILES drop the row with a warning; anything
    /// else malformed is an error naming the line.
    pub fn from_csv(text: &str) -> Result<Dataset, EpisodeError> {
        let format = |line: usize, message: String| EpisodeError::Format { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

        let (_, header) = lines
            .by_ref()
            .find(|(_, l)| !l.is_empty())
            .ok_or_else(|| format(1, "missing header".into()))?;
        let cells: Vec<&str> = header.split(',').map(str::trim).collect();
        if cells[0] != "smiles" {
            return Err(format(1, format!("header must start with 'smiles', got '{}'", cells[0])));
        }
        if cells.len() < 2 {
            return Err(format(1, "no task columns".into()));
        }
        let mut task_names = Vec::with_capacity(cells.len() - 1);
        for name in &cells[1..] {
            if !name.starts_with("task_") || name.len() == "task_".len() {
                return Err(format(1, format!("task column '{name}' must be named task_<name>")));
            }
            if task_names.iter().any(|t: &String| t == name) {
                return Err(format(1, format!("duplicate task column '{name}'")));
            }
            task_names.push(name.to_string());
        }

        let mut molecules = Vec::new();
        let mut labels = Vec::new();
        let mut dropped = 0usize;
        for (lineno, line) in lines {
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != task_names.len() + 1 {
                return Err(format(
                    lineno,
                    format!("expected {} cells, got {}", task_names.len() + 1, cells.len()),
                ));
            }
            let mut row = Vec::with_capacity(task_names.len());
            for &cell in &cells[1..] {
                row.push(match cell {
                    "" => None,
                    "0" => Some(0),
                    "1" => Some(1),
                    other => {
                        return Err(format(
                            lineno,
                            format!("label cell must be 0, 1, or empty, got '{other}'"),
                        ))
                    }
                });
            }
            match parse_smiles(cells[0]) {
                Ok(mol) => {
                    molecules.push((cells[0].to_string(), mol));
                    labels.push(row);
                }
                Err(e) => {
                    log::warn!("line {lineno}: dropped '{}': {e}", cells[0]);
                    dropped += 1;
                }
            }
        }
        Ok(Dataset { molecules, labels, task_names, dropped })
    }

    pub fn load(path: &Path) -> Result<Dataset, EpisodeError> {
        let text = std::fs::read_to_string(path).map_err(|source| EpisodeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Dataset::from_csv(&text)
    }

    pub fn len(&self) -> usize {
        self.molecules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.molecules.is_empty()
    }

    pub fn task_count(&self) -> usize {
        self.task_names.len()
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.task_names.iter().position(|t| t == name)
    }

    pub fn smiles(&self, i: usize) -> &str {
        &self.molecules[i].0
    }

    pub fn molecule(&self, i: usize) -> &MolGraph {
        &self.molecules[i].1
    }

    pub fn label(&self, molecule: usize, task: usize) -> Option<u8> {
        self.labels[molecule][task]
    }

    /// Count of input rows whose SMILES failed to parse.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Indices of molecules labeled for the task: (positives, negatives).
    pub fn labeled(&self, task: usize) -> (Vec<usize>, Vec<usize>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, row) in self.labels.iter().enumerate() {
            match row[task] {
                Some(1) => pos.push(i),
                Some(0) => neg.push(i),
                _ => {}
            }
        }
        (pos, neg)
    }
}

/// Convenience wrapper matching the operation name used in run scripts.
pub fn load_dataset(path: &Path) -> Result<Dataset, EpisodeError> {
    Dataset::load(path)
}

// ── task split ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl TaskSplit {
    pub fn from_names(
        dataset: &Dataset,
        train: &[String],
        test: &[String],
    ) -> Result<TaskSplit, EpisodeError> {
        let resolve = |names: &[String]| -> Result<Vec<usize>, EpisodeError> {
            names
                .iter()
                .map(|n| {
                    dataset
                        .task_index(n)
                        .ok_or_else(|| EpisodeError::UnknownTask(n.clone()))
                })
                .collect()
        };
        let split = TaskSplit { train: resolve(train)?, test: resolve(test)? };
        split.validate(dataset)?;
        Ok(split)
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<(), EpisodeError> {
        let mut seen = vec![0u8; dataset.task_count()];
        for &t in self.train.iter().chain(&self.test) {
            if t >= dataset.task_count() {
                return Err(EpisodeError::TaskRange(t));
            }
            seen[t] += 1;
        }
        for (t, &count) in seen.iter().enumerate() {
            if count > 1 {
                let name = dataset.task_names()[t].clone();
                if self.train.contains(&t) && self.test.contains(&t) {
                    return Err(EpisodeError::SplitOverlap(name));
                }
                return Err(EpisodeError::SplitDuplicate(name));
            }
        }
        Ok(())
    }
}

// ── episodes ────────────────────────────────────────────────────────────

/// One 2-way K-shot episode. Entries are molecule indices into the
/// dataset plus their label under the episode's task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: usize,
    pub support: Vec<(usize, u8)>,
    pub query: Vec<(usize, u8)>,
}

/// Takes `n` uniform draws without replacement off the front of `pool`.
fn draw(pool: &mut Vec<usize>, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(n <= pool.len());
    for i in 0..n {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let taken = pool[..n].to_vec();
    pool.drain(..n);
    taken
}

/// Samples support (K per class, uniform without replacement) and a query
/// set of up to `m` of the remaining labeled molecules, split across the
/// classes as evenly as availability allows.
pub fn sample_episode(
    dataset: &Dataset,
    task: usize,
    k: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode, EpisodeError> {
    if task >= dataset.task_count() {
        return Err(EpisodeError::TaskRange(task));
    }
    if k == 0 {
        return Err(EpisodeError::ZeroShot);
    }
    let (mut pos, mut neg) = dataset.labeled(task);
    let spare = (pos.len() + neg.len()).saturating_sub(2 * k);
    if pos.len() < k || neg.len() < k || spare == 0 {
        return Err(EpisodeError::Sampling {
            task: dataset.task_names()[task].clone(),
            k,
            pos: pos.len(),
            neg: neg.len(),
            spare,
        });
    }

    let mut support: Vec<(usize, u8)> = Vec::with_capacity(2 * k);
    support.extend(draw(&mut pos, k, rng).into_iter().map(|i| (i, 1)));
    support.extend(draw(&mut neg, k, rng).into_iter().map(|i| (i, 0)));

    let want = m.min(pos.len() + neg.len()).max(1);
    let q_neg = (want - (want / 2).min(pos.len())).min(neg.len());
    let q_pos = (want - q_neg).min(pos.len());
    let mut query: Vec<(usize, u8)> = Vec::with_capacity(q_pos + q_neg);
    query.extend(draw(&mut pos, q_pos, rng).into_iter().map(|i| (i, 1)));
    query.extend(draw(&mut neg, q_neg, rng).into_iter().map(|i| (i, 0)));

    Ok(Episode { task, support, query })
}

// ── training ────────────────────────────────────────────────────────────

/// Episodes between validation passes.
const EVAL_INTERVAL: usize = 50;

pub(crate) const SALT_INIT: u64 = 0x696e_6974;
pub(crate) const SALT_EPISODE: u64 = 0x6570_6973;
pub(crate) const SALT_VAL: u64 = 0x7661_6c69;
pub(crate) const SALT_EVAL: u64 = 0x6576_616c;

/// Independent deterministic stream for one purpose. Mixing the seed
/// before the salt keeps the streams apart even for adjacent seeds.
pub(crate) fn purpose_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ salt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Support shots per class.
    pub k: usize,
    /// Query size during training episodes.
    pub train_query: usize,
    pub lr: f64,
    /// Total training episodes (an upper bound when early stopping fires).
    pub episodes: usize,
    /// Evaluations without improvement tolerated before stopping.
    pub patience: usize,
    /// Fraction of train tasks held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    pub model: crate::model::ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 10,
            train_query: 16,
            lr: 0.005,
            episodes: 2000,
            patience: 100,
            val_fraction: 0.2,
            seed: 0,
            model: crate::model::ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EpisodeError> {
        if !(0.0005..=0.05).contains(&self.lr) {
            return Err(EpisodeError::LearningRate(self.lr));
        }
        if self.patience == 0 {
            return Err(EpisodeError::Patience);
        }
        if self.k == 0 {
            return Err(EpisodeError::ZeroShot);
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(EpisodeError::ValFraction(self.val_fraction));
        }
        self.model.validate()?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Per-episode training loss, in order.
    pub losses: Vec<f64>,
    /// (episodes completed, mean validation ROC-AUC) per evaluation.
    pub evals: Vec<(usize, f64)>,
    pub stopped_early: bool,
}

/// Per-molecule frozen sequence vectors for the tasks in play, computed
/// once per run. Index-aligned with the dataset.
fn build_seq_cache(
    dataset: &Dataset,
    tasks: &[usize],
    featurizer: &SeqFeaturizer,
) -> Result<Vec<Option<Vec<f64>>>, EpisodeError> {
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; dataset.len()];
    for &task in tasks {
        let (pos, neg) = dataset.labeled(task);
        for i in pos.into_iter().chain(neg) {
            if cache[i].is_none() {
                cache[i] = Some(featurizer.encode(dataset.smiles(i))?);
            }
        }
    }
    Ok(cache)
}

/// Forward pass for one episode on a fresh tape: class probabilities for
/// every query, positive class first.
fn episode_scores(
    tape: &mut Tape,
    dataset: &Dataset,
    episode: &Episode,
    vars: &crate::model::ModelVars,
    seq_cache: &[Option<Vec<f64>>],
    cfg: &crate::model::ModelConfig,
) -> Result<(Vec<crate::autodiff::Var>, Vec<u8>), EpisodeError> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for &(i, y) in &episode.support {
        let seq = seq_cache[i].as_ref().expect("support molecule cached");
        let z = embed_with_sequence(tape, dataset.molecule(i), seq, vars, cfg)?;
        if y == 1 {
            pos.push(z);
        } else {
            neg.push(z);
        }
    }
    let protos = Prototypes {
        positive: prototype(tape, &pos)?,
        negative: prototype(tape, &neg)?,
    };
    let mut probs = Vec::with_capacity(episode.query.len());
    let mut labels = Vec::with_capacity(episode.query.len());
    for &(i, y) in &episode.query {
        let seq = seq_cache[i].as_ref().expect("query molecule cached");
        let z = embed_with_sequence(tape, dataset.molecule(i), seq, vars, cfg)?;
        probs.push(class_scores(tape, z, &protos)?);
        labels.push(y);
    }
    Ok((probs, labels))
}

/// One gradient step on one episode; returns the loss value.
fn train_step(
    dataset: &Dataset,
    episode: &Episode,
    params: &mut ModelParams,
    seq_cache: &[Option<Vec<f64>>],
    cfg: &TrainConfig,
    opt: &mut dyn Optimizer,
) -> Result<f64, EpisodeError> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let (probs, labels) =
        episode_scores(&mut tape, dataset, episode, &vars, seq_cache, &cfg.model)?;
    let loss = episode_loss(&mut tape, &probs, &labels)?;
    let grads = tape.backward(loss)?;
    apply_gradients(opt, params, &vars, &grads);
    Ok(tape.value(loss).item())
}

/// Mean ROC-AUC over one validation episode per validation task. Tasks
/// that cannot form an episode or produce a single-class query are
/// skipped; None when every task was skipped.
fn validation_score(
    dataset: &Dataset,
    val_tasks: &[usize],
    params: &ModelParams,
    seq_cache: &[Option<Vec<f64>>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<f64>, EpisodeError> {
    let mut scores = Vec::new();
    for &task in val_tasks {
        let episode = match sample_episode(dataset, task, cfg.k, cfg.train_query, rng) {
            Ok(e) => e,
            Err(EpisodeError::Sampling { .. }) => continue,
            Err(e) => return Err(e),
        };
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let (probs, labels) =
            episode_scores(&mut tape, dataset, &episode, &vars, seq_cache, &cfg.model)?;
        let p: Vec<f64> = probs.iter().map(|&v| tape.value(v).data()[0]).collect();
        match metrics::roc_auc(&p, &labels) {
            Ok(auc) => scores.push(auc),
            Err(MetricError::Undefined(_)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    if scores.is_empty() {
        Ok(None)
    } else {
        Ok(Some(scores.iter().sum::<f64>() / scores.len() as f64))
    }
}

/// Episodic meta-training. Samples one episode per step from the
/// effective train tasks, updates by SGD, validates every 50 episodes on
/// the held-out tail of the train tasks, and returns the checkpoint that
/// scored best (the final parameters if validation never ran).
pub fn meta_train(
    dataset: &Dataset,
    split: &TaskSplit,
    cfg: &TrainConfig,
    external: Option<BTreeMap<String, Vec<f64>>>,
) -> Result<TrainOutcome, EpisodeError> {
    cfg.validate()?;
    split.validate(dataset)?;
    if split.train.is_empty() {
        return Err(EpisodeError::NoTrainTasks);
    }

    let mut featurizer = match external {
        Some(map) => SeqFeaturizer::with_external(map)?,
        None => SeqFeaturizer::new(cfg.model.hash_dim),
    };
    // PCA sees train-task molecules only; test tasks stay untouched.
    let mut fit_smiles: Vec<usize> = Vec::new();
    for &task in &split.train {
        let (pos, neg) = dataset.labeled(task);
        for i in pos.into_iter().chain(neg) {
            if !fit_smiles.contains(&i) {
                fit_smiles.push(i);
            }
        }
    }
    featurizer.fit(fit_smiles.iter().map(|&i| dataset.smiles(i)), cfg.model.d_a)?;
    let seq_cache = build_seq_cache(dataset, &split.train, &featurizer)?;

    // Validation takes the tail of the train tasks; a single train task
    // has to double as its own validation signal.
    let (train_tasks, val_tasks): (Vec<usize>, Vec<usize>) = if split.train.len() >= 2 {
        let n = split.train.len();
        let nv = ((cfg.val_fraction * n as f64).round() as usize).max(1).min(n - 1);
        (split.train[..n - nv].to_vec(), split.train[n - nv..].to_vec())
    } else {
        log::warn!("single train task doubles as validation task");
        (split.train.clone(), split.train.clone())
    };

    let mut params = ModelParams::init(&cfg.model, &mut purpose_rng(cfg.seed, SALT_INIT));
    let mut opt = Sgd { lr: cfg.lr };
    let mut episode_rng = purpose_rng(cfg.seed, SALT_EPISODE);

    let mut losses = Vec::with_capacity(cfg.episodes);
    let mut evals = Vec::new();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut strikes = 0usize;
    let mut stopped_early = false;

    for e in 0..cfg.episodes {
        let task = train_tasks[episode_rng.gen_range(0..train_tasks.len())];
        let episode = sample_episode(dataset, task, cfg.k, cfg.train_query, &mut episode_rng)?;
        losses.push(train_step(dataset, &episode, &mut params, &seq_cache, cfg, &mut opt)?);

        if (e + 1) % EVAL_INTERVAL == 0 {
            let eval_idx = (e + 1) / EVAL_INTERVAL;
            let mut val_rng = purpose_rng(cfg.seed.wrapping_add(eval_idx as u64), SALT_VAL);
            let score =
                validation_score(dataset, &val_tasks, &params, &seq_cache, cfg, &mut val_rng)?;
            match score {
                Some(s) => {
                    evals.push((e + 1, s));
                    if best.as_ref().map_or(true, |(b, _)| s > *b) {
                        best = Some((s, params.clone()));
                        strikes = 0;
                    } else {
                        strikes += 1;
                    }
                }
                None => strikes += 1,
            }
            if strikes >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let chosen = match best {
        Some((_, p)) => p,
        None => params,
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(cfg.model, chosen, featurizer),
        losses,
        evals,
        stopped_early,
    })
}

// ── evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k: usize,
    pub runs: usize,
    pub seed: u64,
    /// Worker threads; 1 runs inline. Either way results merge in work
    /// item order, so the report is identical.
    pub jobs: usize,
    /// Query size cap per episode.
    pub query: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { k: 10, runs: 10, seed: 0, jobs: 1, query: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub metrics: MetricReport,
    /// Task names skipped at least once (insufficient data or a
    /// single-class query), sorted.
    pub skipped: Vec<String>,
    /// Scored (run, task) episodes.
    pub episodes: usize,
}

/// Scoring seam: maps an episode's queries to positive-class scores.
/// Evaluation logic is written against this so tests can substitute a
/// label oracle.
pub(crate) trait QueryScorer: Sync {
    fn score(&self, dataset: &Dataset, episode: &Episode) -> Result<Vec<f64>, EpisodeError>;
}

struct CheckpointScorer<'a> {
    checkpoint: &'a Checkpoint,
    seq_cache: Vec<Option<Vec<f64>>>,
}

impl QueryScorer for CheckpointScorer<'_> {
    fn score(&self, dataset: &Dataset, episode: &Episode) -> Result<Vec<f64>, EpisodeError> {
        let mut tape = Tape::new();
        let vars = self.checkpoint.params.register(&mut tape, false);
        let (probs, _) = episode_scores(
            &mut tape,
            dataset,
            episode,
            &vars,
            &self.seq_cache,
            &self.checkpoint.config,
        )?;
        Ok(probs.iter().map(|&v| tape.value(v).data()[0]).collect())
    }
}

struct ItemOutcome {
    task: usize,
    values: Option<(f64, f64, f64)>,
}

/// Scores one (run, task) work item, or None when the task must be
/// skipped for this run.
fn eval_item(
    scorer: &dyn QueryScorer,
    dataset: &Dataset,
    task: usize,
    item_seed: u64,
    opts: &EvalOptions,
) -> Result<ItemOutcome, EpisodeError> {
    let mut rng = purpose_rng(item_seed, SALT_EVAL);
    let episode = match sample_episode(dataset, task, opts.k, opts.query, &mut rng) {
        Ok(e) => e,
        Err(EpisodeError::Sampling { .. }) => return Ok(ItemOutcome { task, values: None }),
        Err(e) => return Err(e),
    };
    let scores = scorer.score(dataset, &episode)?;
    let labels: Vec<u8> = episode.query.iter().map(|&(_, y)| y).collect();
    let roc = match metrics::roc_auc(&scores, &labels) {
        Ok(v) => v,
        Err(MetricError::Undefined(_)) => return Ok(ItemOutcome { task, values: None }),
        Err(e) => return Err(e.into()),
    };
    let pr = metrics::pr_auc(&scores, &labels)?;
    let preds: Vec<u8> = scores.iter().map(|&s| (s >= 0.5) as u8).collect();
    let f1 = metrics::f1(&preds, &labels)?;
    Ok(ItemOutcome { task, values: Some((roc, pr, f1)) })
}

pub(crate) fn evaluate_with(
    scorer: &dyn QueryScorer,
    dataset: &Dataset,
    test_tasks: &[usize],
    opts: &EvalOptions,
) -> Result<EvalReport, EpisodeError> {
    if opts.runs == 0 {
        return Err(EpisodeError::ZeroRuns);
    }
    for &t in test_tasks {
        if t >= dataset.task_count() {
            return Err(EpisodeError::TaskRange(t));
        }
    }

    // Every work item gets its seed up front; thread scheduling can then
    // never influence a draw.
    let items: Vec<(usize, u64)> = (0..opts.runs)
        .flat_map(|run| {
            test_tasks.iter().map(move |&task| {
                let seed = opts
                    .seed
                    .wrapping_add((run as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
                    .wrapping_add((task as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
                (task, seed)
            })
        })
        .collect();

    let jobs = opts.jobs.max(1).min(items.len().max(1));
    let mut outcomes: Vec<Option<Result<ItemOutcome, EpisodeError>>> =
        (0..items.len()).map(|_| None).collect();
    if jobs <= 1 {
        for (slot, &(task, seed)) in outcomes.iter_mut().zip(&items) {
            *slot = Some(eval_item(scorer, dataset, task, seed, opts));
        }
    } else {
        let chunks: Vec<&mut [Option<Result<ItemOutcome, EpisodeError>>]> =
            outcomes.chunks_mut(items.len().div_ceil(jobs)).collect();
        std::thread::scope(|s| {
            let mut offset = 0;
            for chunk in chunks {
                let start = offset;
                offset += chunk.len();
                let items = &items;
                s.spawn(move || {
                    for (local, slot) in chunk.iter_mut().enumerate() {
                        let (task, seed) = items[start + local];
                        *slot = Some(eval_item(scorer, dataset, task, seed, opts));
                    }
                });
            }
        });
    }

    let mut rocs = Vec::new();
    let mut prs = Vec::new();
    let mut f1s = Vec::new();
    let mut skipped: Vec<String> = Vec::new();
    for outcome in outcomes {
        let outcome = outcome.expect("every slot filled")?;
        match outcome.values {
            Some((roc, pr, f1)) => {
                rocs.push(roc);
                prs.push(pr);
                f1s.push(f1);
            }
            None => {
                let name = dataset.task_names()[outcome.task].clone();
                log::warn!("skipped task '{name}': cannot form a scoreable episode");
                if !skipped.contains(&name) {
                    skipped.push(name);
                }
            }
        }
    }
    skipped.sort();

    let mut report = MetricReport::new();
    if !rocs.is_empty() {
        report.insert("roc_auc".into(), MetricSummary::from_values(&rocs)?);
        report.insert("pr_auc".into(), MetricSummary::from_values(&prs)?);
        report.insert("f1".into(), MetricSummary::from_values(&f1s)?);
    }
    Ok(EvalReport { metrics: report, skipped, episodes: rocs.len() })
}

/// Evaluates a trained checkpoint on held-out tasks: per run and task,
/// one episode with a fresh support set, scored by ROC-AUC, PR-AUC, and
/// F1 at threshold 0.5, then summarized across all scored episodes.
pub fn evaluate(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    test_tasks: &[usize],
    opts: &EvalOptions,
) -> Result<EvalReport, EpisodeError> {
    let seq_cache = build_seq_cache(dataset, test_tasks, &checkpoint.featurizer)?;
    let scorer = CheckpointScorer { checkpoint, seq_cache };
    evaluate_with(&scorer, dataset, test_tasks, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::ama::AmaConfig;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_g: 4,
            gin_layers: 1,
            hash_dim: 32,
            d_a: 2,
            ama: AmaConfig { heads: 2, ..AmaConfig::default() },
        }
    }

    // 12 molecules, 3 tasks with varied coverage.
    fn fixture() -> Dataset {
        let csv = "\
smiles,task_a,task_b,task_c
CCO,1,0,1
CCN,0,1,
CCC,1,,0
CCCC,0,1,1
CC(C)O,1,0,0
c1ccccc1,0,0,1
CC(=O)O,1,1,0
CCS,0,0,1
CCCl,1,1,0
CCBr,0,0,1
CC=C,1,1,0
C1CC1,0,0,1
";
        Dataset::from_csv(csv).unwrap()
    }

    #[test]
    fn csv_happy_path_counts_molecules_and_tasks() {
        let d = Dataset::from_csv("smiles,task_a\nCCO,1\nCCN,0\n").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.task_count(), 1);
        assert_eq!(d.task_names(), &["task_a".to_string()]);
        assert_eq!(d.label(0, 0), Some(1));
        assert_eq!(d.label(1, 0), Some(0));
        assert_eq!(d.dropped(), 0);
    }

    #[test]
    fn csv_missing_labels_and_bad_cells() {
        let d = Dataset::from_csv("smiles,task_a,task_b\nCCO,,1\n").unwrap();
        assert_eq!(d.label(0, 0), None);
        assert_eq!(d.label(0, 1), Some(1));

        let err = Dataset::from_csv("smiles,task_a\nCCO,1\nCCN,2\n").unwrap_err();
        match err {
            EpisodeError::Format { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("'2'"));
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn csv_header_errors() {
        for (text, needle) in [
            ("", "missing header"),
            ("molecule,task_a\nCCO,1\n", "smiles"),
            ("smiles\nCCO\n", "no task columns"),
            ("smiles,activity\nCCO,1\n", "task_<name>"),
            ("smiles,task_a,task_a\nCCO,1,0\n", "duplicate"),
        ] {
            let err = Dataset::from_csv(text).unwrap_err();
            match err {
                EpisodeError::Format { line: 1, message } => {
                    assert!(message.contains(needle), "{message} missing {needle}");
                }
                other => panic!("wrong error for {text:?}: {other}"),
            }
        }

        let err = Dataset::from_csv("smiles,task_a\nCCO,1,0\n").unwrap_err();
        assert!(matches!(err, EpisodeError::Format { line: 2, .. }));
    }

    #[test]
    fn unparsable_smiles_are_dropped_with_a_count() {
        let mut csv = String::from("smiles,task_a\n");
        for i in 0..9 {
            csv.push_str(&format!("{},{}\n", "C".repeat(i + 1), i % 2));
        }
        csv.push_str("C1CC,1\n");
        let d = Dataset::from_csv(&csv).unwrap();
        assert_eq!(d.len(), 9);
        assert_eq!(d.dropped(), 1);
    }

    #[test]
    fn episodes_have_balanced_support_and_disjoint_query() {
        let d = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let ep = sample_episode(&d, 0, 2, 16, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 4);
        assert_eq!(ep.support.iter().filter(|&&(_, y)| y == 1).count(), 2);

        let support: Vec<usize> = ep.support.iter().map(|&(i, _)| i).collect();
        for &(i, y) in &ep.query {
            assert!(!support.contains(&i), "query molecule {i} reused from support");
            assert_eq!(d.label(i, 0), Some(y), "label drawn from the wrong task");
        }

        let mut rng2 = ChaCha8Rng::seed_from_u64(60);
        assert_eq!(ep, sample_episode(&d, 0, 2, 16, &mut rng2).unwrap());
    }

    #[test]
    fn query_splits_as_evenly_as_availability_allows() {
        // task_a: 6 positives, 6 negatives. K=2 leaves 4 + 4; m=6 wants 3 + 3.
        let d = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let ep = sample_episode(&d, 0, 2, 6, &mut rng).unwrap();
        assert_eq!(ep.query.len(), 6);
        assert_eq!(ep.query.iter().filter(|&&(_, y)| y == 1).count(), 3);

        // K=3 leaves 3 + 3; m=32 takes everything.
        let ep = sample_episode(&d, 0, 3, 32, &mut rng).unwrap();
        assert_eq!(ep.query.len(), 6);
    }

    #[test]
    fn insufficient_tasks_name_themselves() {
        let d = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let err = sample_episode(&d, 0, 6, 8, &mut rng).unwrap_err();
        match err {
            EpisodeError::Sampling { task, k, .. } => {
                assert_eq!(task, "task_a");
                assert_eq!(k, 6);
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn support_draws_are_uniform() {
        // Binomial check: with 6 molecules per class and K=2, each
        // labeled molecule should land in support with frequency 1/3.
        // 4 sigma over 2000 draws keeps the fixed seed off the boundary.
        let d = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let (pos, neg) = d.labeled(0);
        let mut counts: BTreeMap<usize, usize> =
            pos.iter().chain(&neg).map(|&i| (i, 0)).collect();
        let trials = 2000;
        for _ in 0..trials {
            let ep = sample_episode(&d, 0, 2, 4, &mut rng).unwrap();
            for (i, _) in ep.support {
                *counts.get_mut(&i).unwrap() += 1;
            }
        }
        assert_eq!(counts.values().sum::<usize>(), 4 * trials);
        let p = 2.0 / 6.0;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for (&i, &c) in &counts {
            let freq = c as f64 / trials as f64;
            assert!(
                (freq - p).abs() <= 4.0 * sigma,
                "molecule {i}: frequency {freq} vs expected {p}"
            );
        }
    }

    #[test]
    fn split_validation_catches_overlap_and_range() {
        let d = fixture();
        let overlap = TaskSplit { train: vec![0, 1], test: vec![1] };
        assert!(matches!(overlap.validate(&d), Err(EpisodeError::SplitOverlap(n)) if n == "task_b"));
        let out = TaskSplit { train: vec![0], test: vec![9] };
        assert!(matches!(out.validate(&d), Err(EpisodeError::TaskRange(9))));
        let dup = TaskSplit { train: vec![0, 0], test: vec![] };
        assert!(matches!(dup.validate(&d), Err(EpisodeError::SplitDuplicate(_))));

        let named = TaskSplit::from_names(
            &d,
            &["task_a".into(), "task_b".into()],
            &["task_c".into()],
        )
        .unwrap();
        assert_eq!(named, TaskSplit { train: vec![0, 1], test: vec![2] });
        assert!(matches!(
            TaskSplit::from_names(&d, &["task_x".into()], &[]),
            Err(EpisodeError::UnknownTask(n)) if n == "task_x"
        ));
    }

    fn tiny_train_config(episodes: usize) -> TrainConfig {
        TrainConfig {
            k: 1,
            train_query: 4,
            lr: 0.01,
            episodes,
            patience: 3,
            val_fraction: 0.2,
            seed: 7,
            model: tiny_model(),
        }
    }

    #[test]
    fn zero_episodes_returns_initialized_parameters() {
        let d = fixture();
        let split = TaskSplit { train: vec![0, 1], test: vec![2] };
        let cfg = tiny_train_config(0);
        let out = meta_train(&d, &split, &cfg, None).unwrap();
        assert!(out.losses.is_empty());
        assert!(out.evals.is_empty());

        let expected = ModelParams::init(&cfg.model, &mut purpose_rng(cfg.seed, SALT_INIT));
        assert_eq!(out.checkpoint.params, expected);
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let d = fixture();
        let split = TaskSplit { train: vec![0, 1], test: vec![2] };
        let cfg = tiny_train_config(6);
        let a = meta_train(&d, &split, &cfg, None).unwrap();
        let b = meta_train(&d, &split, &cfg, None).unwrap();
        assert_eq!(a.checkpoint.to_json(), b.checkpoint.to_json());
        assert_eq!(a.losses, b.losses);

        // Training moved the parameters away from initialization.
        let init = ModelParams::init(&cfg.model, &mut purpose_rng(cfg.seed, SALT_INIT));
        assert_ne!(a.checkpoint.params, init);
    }

    #[test]
    fn config_validation_guards_ranges() {
        let bad_lr = TrainConfig { lr: 0.2, ..tiny_train_config(1) };
        assert!(matches!(bad_lr.validate(), Err(EpisodeError::LearningRate(_))));
        let bad_pat = TrainConfig { patience: 0, ..tiny_train_config(1) };
        assert!(matches!(bad_pat.validate(), Err(EpisodeError::Patience)));
        let bad_vf = TrainConfig { val_fraction: 1.0, ..tiny_train_config(1) };
        assert!(matches!(bad_vf.validate(), Err(EpisodeError::ValFraction(_))));
    }

    struct LabelOracle;

    impl QueryScorer for LabelOracle {
        fn score(&self, dataset: &Dataset, episode: &Episode) -> Result<Vec<f64>, EpisodeError> {
            let _ = dataset;
            Ok(episode.query.iter().map(|&(_, y)| y as f64).collect())
        }
    }

    #[test]
    fn oracle_scorer_reaches_perfect_metrics() {
        let d = fixture();
        let opts = EvalOptions { k: 1, runs: 10, seed: 3, jobs: 1, query: 8 };
        let report = evaluate_with(&LabelOracle, &d, &[0, 2], &opts).unwrap();
        let roc = &report.metrics["roc_auc"];
        assert_eq!(roc.mean, 1.0);
        assert_eq!(roc.std, 0.0);
        assert_eq!(report.metrics["f1"].mean, 1.0);
        assert!(report.metrics.contains_key("pr_auc"));
        assert_eq!(report.episodes, 20);
        assert!(report.skipped.is_empty());
    }

    #[test]
    fn evaluation_is_deterministic_and_parallel_matches_sequential() {
        let d = fixture();
        let split = TaskSplit { train: vec![0, 1], test: vec![2] };
        let cfg = tiny_train_config(4);
        let ckpt = meta_train(&d, &split, &cfg, None).unwrap().checkpoint;

        let base = EvalOptions { k: 1, runs: 6, seed: 11, jobs: 1, query: 8 };
        let a = evaluate(&ckpt, &d, &split.test, &base).unwrap();
        let b = evaluate(&ckpt, &d, &split.test, &base).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());

        let parallel = EvalOptions { jobs: 4, ..base };
        let c = evaluate(&ckpt, &d, &split.test, &parallel).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
    }

    #[test]
    fn starved_tasks_are_reported_as_skipped() {
        let d = fixture();
        // task_b: 5 positives, 6 negatives. K=5 leaves a one-molecule
        // query, so ROC-AUC is undefined and every run skips it; task_a
        // still scores.
        let opts = EvalOptions { k: 5, runs: 2, seed: 0, jobs: 1, query: 8 };
        let report = evaluate_with(&LabelOracle, &d, &[0, 1], &opts).unwrap();
        assert_eq!(report.episodes, 2);
        assert_eq!(report.skipped, vec!["task_b".to_string()]);

        // K beyond the positive count skips at the sampling stage instead.
        let opts = EvalOptions { k: 7, ..opts };
        let report = evaluate_with(&LabelOracle, &d, &[1], &opts).unwrap();
        assert_eq!(report.episodes, 0);
        assert!(report.metrics.is_empty());
        assert_eq!(report.skipped, vec!["task_b".to_string()]);
    }
}

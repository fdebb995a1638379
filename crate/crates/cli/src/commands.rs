//! Argument definitions and subcommand implementations.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mlnet_core::corpus::{
    augment_labels, build_vocabulary, load_corpus, load_hierarchy, split_corpus, write_jsonl,
    CorpusFormat, Document, LabelHierarchy,
};
use mlnet_core::inference::{
    predict, search_threshold, Decoder, DecodingMode, GlobalThreshold, SourceSplit,
};
use mlnet_core::metrics::{example_based_metrics, Matching};
use mlnet_core::preprocess::PreprocessConfig;
use mlnet_core::preprocess::{default_stoplist, load_embeddings, load_stoplist, EmbeddingTable};
use mlnet_core::synthetic::grad_check_fixture;
use mlnet_core::trainer::{
    gradient_check_with, prepare_examples, train_stage1, train_stage2, GradCheckOptions,
    GroupError, ModelBundle,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifact::ModelArtifact;
use crate::config::{load_config, parse_override, RunConfig, TaskPreset};
use crate::error::CliError;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "mlnet", version, about = "Multi-label text classification")]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub task: Option<TaskPreset>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<(String, String)>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a corpus into train/validation/test files.
    Prepare(PrepareArgs),
    /// Run both training stages and write a model artifact.
    Train(TrainArgs),
    /// Predict label sets for a file of documents.
    Predict(PredictArgs),
    /// Score predictions against gold labels.
    Evaluate(EvaluateArgs),
    /// Pick the global threshold that maximizes F1 on a split.
    ThresholdSearch(ThresholdSearchArgs),
    /// Compare analytic gradients with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Epoch log; defaults to the model path with a `.log` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Recorded in the artifact so later commands can check compatibility.
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
    /// Stop after stage 1; the artifact cannot be used for top-K decoding.
    #[arg(long)]
    pub skip_stage2: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, conflicts_with = "threshold_file")]
    pub threshold: Option<f64>,
    /// JSON written by `threshold-search`.
    #[arg(long)]
    pub threshold_file: Option<PathBuf>,
    /// Checked against the hierarchy the model was trained with.
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long, value_enum, default_value_t = MatchingArg::Exact)]
    pub matching: MatchingArg,
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Include per-example precision and recall.
    #[arg(long)]
    pub per_example: bool,
}

#[derive(Debug, Args)]
pub struct ThresholdSearchArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Directory written by `prepare`; the split file is read from here.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Explicit document file; overrides `--data-dir`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Validation)]
    pub split: SplitArg,
    /// Use hierarchical matching when searching.
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    /// Number of random fixtures, seeded from `--seed` upward.
    #[arg(long, default_value_t = 5)]
    pub instances: usize,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Perturb one analytic gradient to confirm the check can fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Topk,
    Threshold,
}

impl From<ModeArg> for DecodingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Topk => DecodingMode::Topk,
            ModeArg::Threshold => DecodingMode::Threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MatchingArg {
    Exact,
    Hierarchical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
}

impl From<SplitArg> for SourceSplit {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SourceSplit::Train,
            SplitArg::Validation => SourceSplit::Validation,
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    let cfg = load_config(cli.task, cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::Prepare(args) => cmd_prepare(&cfg, args),
        Command::Train(args) => cmd_train(&cfg, args),
        Command::Predict(args) => cmd_predict(&cfg, args),
        Command::Evaluate(args) => cmd_evaluate(&cfg, args),
        Command::ThresholdSearch(args) => cmd_threshold_search(&cfg, args),
        Command::GradCheck(args) => cmd_grad_check(&cfg, args),
    }
}

fn required(
    flag: &Option<PathBuf>,
    configured: &Option<PathBuf>,
    name: &str,
) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| CliError::Usage(format!("missing --{name} (flag or config key)")))
}

fn read_docs(path: &Path) -> Result<Vec<Document>, CliError> {
    Ok(load_corpus(path, CorpusFormat::Jsonl)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes to `path`, or to standard output when `path` is `None`.
fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => write_file(p, bytes),
        None => io::stdout()
            .lock()
            .write_all(bytes)
            .map_err(|e| CliError::Data(format!("cannot write to standard output: {e}"))),
    }
}

/// `--output`, else the configured `output` path; `None` means stdout.
fn output_path<'a>(flag: &'a Option<PathBuf>, cfg: &'a RunConfig) -> Option<&'a Path> {
    flag.as_deref().or(cfg.paths.output.as_deref())
}

fn pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}

fn stoplist(cfg: &RunConfig) -> Result<HashSet<String>, CliError> {
    match &cfg.paths.stoplist {
        Some(p) => Ok(load_stoplist(p)?),
        None => Ok(default_stoplist()),
    }
}

fn load_table(path: &Path, expected_dim: Option<usize>) -> Result<EmbeddingTable, CliError> {
    let table = load_embeddings(path)?;
    match expected_dim {
        Some(d) if d != table.dim() => Err(CliError::Data(format!(
            "{}: embeddings have dimension {}, expected {d}",
            path.display(),
            table.dim()
        ))),
        _ => Ok(table),
    }
}

fn load_optional_hierarchy(
    flag: &Option<PathBuf>,
    cfg: &RunConfig,
) -> Result<Option<LabelHierarchy>, CliError> {
    match flag.as_ref().or(cfg.paths.hierarchy.as_ref()) {
        Some(p) => Ok(Some(load_hierarchy(p)?)),
        None => Ok(None),
    }
}

/// Loads an artifact together with embeddings it can consume.
fn load_model(
    model: &Path,
    embeddings: &Path,
    hierarchy: Option<&LabelHierarchy>,
) -> Result<(ModelArtifact, EmbeddingTable), CliError> {
    let artifact = ModelArtifact::load(model)?;
    let dim = artifact.metadata.config.encoder.embedding_dim;
    let table = load_embeddings(embeddings)?;
    if table.dim() != dim {
        return Err(CliError::Data(format!(
            "model {} expects {dim}-dimensional embeddings but {} has dimension {}",
            model.display(),
            embeddings.display(),
            table.dim()
        )));
    }
    if let (Some(h), Some(stored)) = (hierarchy, &artifact.metadata.hierarchy_digest) {
        if h.digest() != *stored {
            return Err(CliError::Data(format!(
                "model {} was trained with a different label hierarchy",
                model.display()
            )));
        }
    }
    Ok((artifact, table))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Record of how a corpus was split, written next to the split files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub corpus_sha256: String,
    pub hierarchy_digest: Option<String>,
    pub augmented: bool,
    pub counts: SplitCounts,
    pub ids: SplitIds,
}

fn cmd_prepare(cfg: &RunConfig, args: &PrepareArgs) -> Result<(), CliError> {
    let corpus_path = required(&args.corpus, &cfg.paths.corpus, "corpus")?;
    let out_dir = required(&args.out_dir, &cfg.paths.data_dir, "out-dir")?;
    let bytes = fs::read(&corpus_path).map_err(|e| CliError::io(&corpus_path, e))?;
    let mut docs = read_docs(&corpus_path)?;
    let hierarchy = load_optional_hierarchy(&args.hierarchy, cfg)?;
    let augmented = hierarchy.is_some() && cfg.augment_labels;
    if let (Some(h), true) = (&hierarchy, augmented) {
        for doc in &mut docs {
            doc.gold_labels = augment_labels(&doc.gold_labels, h);
        }
    }
    let split = split_corpus(&docs, cfg.split_ratios, cfg.train.seed)?;

    let parts = [
        (TRAIN_FILE, &split.train),
        (VALIDATION_FILE, &split.validation),
        (TEST_FILE, &split.test),
    ];
    for (name, part) in parts {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, part).expect("writing to memory");
        write_file(&out_dir.join(name), &buf)?;
    }
    let ids = |d: &[Document]| d.iter().map(|d| d.id.clone()).collect::<Vec<_>>();
    let manifest = SplitManifest {
        seed: cfg.train.seed,
        ratios: cfg.split_ratios,
        corpus_sha256: hex::encode(Sha256::digest(&bytes)),
        hierarchy_digest: hierarchy.as_ref().map(LabelHierarchy::digest),
        augmented,
        counts: SplitCounts {
            train: split.train.len(),
            validation: split.validation.len(),
            test: split.test.len(),
        },
        ids: SplitIds {
            train: ids(&split.train),
            validation: ids(&split.validation),
            test: ids(&split.test),
        },
    };
    write_file(&out_dir.join(MANIFEST_FILE), &pretty_json(&manifest))?;
    log::info!(
        "wrote {}/{}/{} documents to {}",
        manifest.counts.train,
        manifest.counts.validation,
        manifest.counts.test,
        out_dir.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    let data_dir = required(&args.data_dir, &cfg.paths.data_dir, "data-dir")?;
    let emb_path = required(&args.embeddings, &cfg.paths.embeddings, "embeddings")?;
    let model_path = required(&args.model, &cfg.paths.model, "model")?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| model_path.with_extension("log"));
    let hierarchy = load_optional_hierarchy(&args.hierarchy, cfg)?;

    let train_docs = read_docs(&data_dir.join(TRAIN_FILE))?;
    let val_path = data_dir.join(VALIDATION_FILE);
    let val_docs = if val_path.exists() {
        read_docs(&val_path)?
    } else {
        Vec::new()
    };
    let table = load_table(&emb_path, cfg.embedding_dim)?;
    let vocab = build_vocabulary(&train_docs);
    if vocab.is_empty() {
        return Err(CliError::Data("training split carries no labels".into()));
    }
    let preprocess = PreprocessConfig::new(cfg.s_max, cfg.t_max, &stoplist(cfg)?);
    let mut bundle = ModelBundle::new(
        &cfg.encoder_config(table.dim()),
        &cfg.count_hidden,
        cfg.max_labels,
        preprocess,
        vocab,
        cfg.train.seed,
    );
    let (train, skipped) = prepare_examples(&train_docs, &bundle);
    if !skipped.is_empty() {
        log::warn!("{} degenerate training documents skipped", skipped.len());
    }
    let (val, _) = prepare_examples(&val_docs, &bundle);

    let mut log = train_stage1(&mut bundle, &train, &val, &table, &cfg.train)?;
    if args.skip_stage2 {
        log::warn!("stage 2 skipped; the model cannot decode with top-K");
    } else {
        log.extend(train_stage2(&mut bundle, &train, &val, &table, &cfg.train)?.log);
    }
    let text: String = log.iter().map(|e| e.to_line() + "\n").collect();
    write_file(&log_path, text.as_bytes())?;

    let artifact = ModelArtifact::new(
        bundle,
        &cfg.task.to_string(),
        cfg.train.clone(),
        hierarchy.as_ref().map(LabelHierarchy::digest),
    );
    write_file(&model_path, &artifact.to_bytes())?;
    log::info!("model written to {}", model_path.display());
    Ok(())
}

/// One line of `predict` output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub labels: Vec<String>,
    pub scores: BTreeMap<String, f64>,
    pub mode: DecodingMode,
}

fn read_threshold(path: &Path) -> Result<GlobalThreshold, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: invalid threshold file: {e}", path.display())))
}

fn cmd_predict(cfg: &RunConfig, args: &PredictArgs) -> Result<(), CliError> {
    let mode = args.mode.map_or(cfg.decode, DecodingMode::from);
    let threshold = match (mode, args.threshold, &args.threshold_file) {
        (DecodingMode::Topk, _, _) => None,
        (DecodingMode::Threshold, Some(value), _) => Some(GlobalThreshold {
            value,
            achieved_f1: f64::NAN,
            source_split: SourceSplit::Validation,
        }),
        (DecodingMode::Threshold, None, Some(path)) => Some(read_threshold(path)?),
        (DecodingMode::Threshold, None, None) => {
            return Err(CliError::Usage(
                "threshold decoding needs --threshold or --threshold-file".into(),
            ))
        }
    };
    let model_path = required(&args.model, &cfg.paths.model, "model")?;
    let emb_path = required(&args.embeddings, &cfg.paths.embeddings, "embeddings")?;
    let hierarchy = load_optional_hierarchy(&args.hierarchy, cfg)?;
    let (artifact, table) = load_model(&model_path, &emb_path, hierarchy.as_ref())?;
    let bundle = &artifact.bundle;
    let decoder = match &threshold {
        Some(t) => Decoder::Threshold(t),
        None if !bundle.count_head_trained => {
            return Err(mlnet_core::inference::InferenceError::CountHeadUntrained.into())
        }
        None => Decoder::TopK,
    };

    let docs = read_docs(&args.input)?;
    let predictions = docs
        .par_iter()
        .map(|doc| predict(doc, bundle, &table, decoder))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::new();
    for p in predictions {
        let record = PredictionRecord {
            id: p.labels.doc_id,
            labels: p.labels.labels.into_iter().collect(),
            scores: bundle
                .vocab
                .labels()
                .iter()
                .cloned()
                .zip(p.scores.0)
                .collect(),
            mode: p.labels.mode,
        };
        serde_json::to_writer(&mut out, &record).expect("record serializes");
        out.push(b'\n');
    }
    emit(output_path(&args.output, cfg), &out)
}

#[derive(Deserialize)]
struct LabeledRecord {
    id: String,
    #[serde(default)]
    labels: Vec<String>,
}

/// Reads `id` and `labels` from each JSONL line, ignoring other fields.
fn read_label_sets(path: &Path) -> Result<Vec<(String, BTreeSet<String>)>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LabeledRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        if !seen.insert(record.id.clone()) {
            return Err(CliError::Data(format!(
                "{}:{}: duplicate id `{}`",
                path.display(),
                idx + 1,
                record.id
            )));
        }
        out.push((record.id, record.labels.into_iter().collect()));
    }
    Ok(out)
}

fn describe_ids(ids: &[&str]) -> String {
    const SHOWN: usize = 20;
    let mut text = ids
        .iter()
        .take(SHOWN)
        .copied()
        .collect::<Vec<_>>()
        .join(", ");
    if ids.len() > SHOWN {
        text.push_str(&format!(" and {} more", ids.len() - SHOWN));
    }
    text
}

fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<(), CliError> {
    let hierarchy = match args.matching {
        MatchingArg::Exact => None,
        MatchingArg::Hierarchical => Some(
            load_optional_hierarchy(&args.hierarchy, cfg)?
                .ok_or_else(|| CliError::Usage("hierarchical matching needs --hierarchy".into()))?,
        ),
    };
    let gold = read_label_sets(&args.gold)?;
    let predicted: BTreeMap<String, BTreeSet<String>> =
        read_label_sets(&args.predictions)?.into_iter().collect();

    let gold_ids: HashSet<&str> = gold.iter().map(|(id, _)| id.as_str()).collect();
    let missing: Vec<&str> = gold
        .iter()
        .map(|(id, _)| id.as_str())
        .filter(|id| !predicted.contains_key(*id))
        .collect();
    let extra: Vec<&str> = predicted
        .keys()
        .map(String::as_str)
        .filter(|id| !gold_ids.contains(id))
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        let mut msg = String::from("prediction and gold ids differ");
        if !missing.is_empty() {
            msg.push_str(&format!(
                "; missing predictions: {}",
                describe_ids(&missing)
            ));
        }
        if !extra.is_empty() {
            msg.push_str(&format!("; not in gold: {}", describe_ids(&extra)));
        }
        return Err(CliError::Data(msg));
    }

    let pred_sets: Vec<BTreeSet<String>> =
        gold.iter().map(|(id, _)| predicted[id].clone()).collect();
    let gold_sets: Vec<BTreeSet<String>> = gold.into_iter().map(|(_, s)| s).collect();
    let matching = match &hierarchy {
        Some(h) => Matching::Hierarchical(h),
        None => Matching::Exact,
    };
    let report = example_based_metrics(&gold_sets, &pred_sets, matching, args.per_example)?;
    emit(output_path(&args.output, cfg), &pretty_json(&report))
}

fn cmd_threshold_search(cfg: &RunConfig, args: &ThresholdSearchArgs) -> Result<(), CliError> {
    let model_path = required(&args.model, &cfg.paths.model, "model")?;
    let emb_path = required(&args.embeddings, &cfg.paths.embeddings, "embeddings")?;
    let split = SourceSplit::from(args.split);
    let input = match &args.input {
        Some(p) => p.clone(),
        None => required(&args.data_dir, &cfg.paths.data_dir, "data-dir")?
            .join(format!("{split}.jsonl")),
    };
    let hierarchy = load_optional_hierarchy(&args.hierarchy, cfg)?;
    let (artifact, table) = load_model(&model_path, &emb_path, hierarchy.as_ref())?;
    let bundle = &artifact.bundle;

    let docs = read_docs(&input)?;
    let scores = docs
        .par_iter()
        .map(|doc| bundle.score_document(doc, &table).map(|(s, _)| s))
        .collect::<Result<Vec<_>, _>>()?;
    let gold: Vec<BTreeSet<String>> = docs.into_iter().map(|d| d.gold_labels).collect();
    let threshold = search_threshold(&scores, &gold, &bundle.vocab, hierarchy.as_ref(), split)?;
    emit(output_path(&args.output, cfg), &pretty_json(&threshold))
}

/// Gradient-check results aggregated over all fixtures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub passed: bool,
    pub tolerance: f64,
    pub step: f64,
    pub instances: usize,
    pub max_rel_error: f64,
    pub groups: Vec<GroupError>,
}

fn cmd_grad_check(cfg: &RunConfig, args: &GradCheckArgs) -> Result<(), CliError> {
    if args.instances == 0 {
        return Err(CliError::Usage("--instances must be at least 1".into()));
    }
    if args.tolerance.is_nan() || args.tolerance <= 0.0 {
        return Err(CliError::Usage("--tolerance must be positive".into()));
    }
    let opts = GradCheckOptions {
        tolerance: args.tolerance,
        lsep_on_preactivation: cfg.train.lsep_on_preactivation,
        ..GradCheckOptions::default()
    };
    let inject = args.inject_fault;
    let reports = (0..args.instances as u64)
        .into_par_iter()
        .map(|i| {
            let (bundle, samples) = grad_check_fixture(cfg.train.seed.wrapping_add(i));
            gradient_check_with(&bundle, &samples, &opts, |g| {
                if inject {
                    g.encoder.sent_att.context.mapv_inplace(|v| v * 1.01);
                }
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut groups: Vec<GroupError> = Vec::new();
    for report in reports {
        for g in report.groups {
            match groups.iter_mut().find(|x| x.name == g.name) {
                Some(acc) => {
                    acc.max_rel_error = acc.max_rel_error.max(g.max_rel_error);
                    acc.checked += g.checked;
                    acc.kinks_skipped += g.kinks_skipped;
                }
                None => groups.push(g),
            }
        }
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    let summary = GradCheckSummary {
        passed: max_rel_error < args.tolerance,
        tolerance: args.tolerance,
        step: opts.step,
        instances: args.instances,
        max_rel_error,
        groups,
    };
    emit(output_path(&args.output, cfg), &pretty_json(&summary))?;
    if summary.passed {
        return Ok(());
    }
    let worst = summary
        .groups
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map_or("", |g| g.name.as_str());
    Err(CliError::Numeric(format!(
        "gradient check failed: relative error {:.3e} in `{worst}` exceeds {:.1e}",
        max_rel_error, args.tolerance
    )))
}

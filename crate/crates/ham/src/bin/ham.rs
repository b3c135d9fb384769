//! Command-line pipeline: prepare raw posts into labeled datasets, train and
//! evaluate attribute models, run baselines, emit explanations, and verify
//! gradients. Every artifact embeds the effective configuration and the
//! schema hash for provenance.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data/format error,
//! 4 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ham::checkpoint;
use ham::corpus::{
    self, load_dataset, load_raw_posts, load_word_list, save_dataset, PrepareOptions, SchemaSet,
    SubjectRecord, SynthConfig, Tokenizer, Truncate,
};
use ham::embeddings::{EmbeddingTable, OovPolicy};
use ham::error::Error;
use ham::eval::{self, Labeled};
use ham::explain;
use ham::models::{
    self, baseline_distant, baseline_embedding_similarity, baseline_utterance_cnn, oracle_score,
    BaselineCnnConfig, DistantConfig, DistantKind, HamConfig, HamModel, Variant,
};
use ham::numerics::{grad_check, Tensor};
use ham::Result;

#[derive(Parser)]
#[command(name = "ham", version, about = "Infer personal attributes from conversational utterances")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distantly label raw posts and emit one dataset per predicate.
    Prepare(PrepareArgs),
    /// Train a model variant and write a checkpoint plus loss trace.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset (also used for transfer runs).
    Evaluate(EvaluateArgs),
    /// Run the non-neural and per-utterance baselines.
    Baselines(BaselinesArgs),
    /// Attention reports or per-class top terms for a checkpoint.
    Explain(ExplainArgs),
    /// Generate the deterministic synthetic corpus.
    Synth(SynthArgs),
    /// Verify model gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

/// Config-file form of the shared options; unknown keys are rejected.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    seed: Option<u64>,
    variant: Option<String>,
    predicate: Option<String>,
    embeddings: Option<PathBuf>,
    dataset: Option<PathBuf>,
    schema: Option<PathBuf>,
    out: Option<PathBuf>,
    epochs: Option<usize>,
    hidden: Option<usize>,
    filters: Option<usize>,
    kernel_width: Option<usize>,
    pool_k: Option<usize>,
    lr: Option<f64>,
    l2: Option<f64>,
    per_class: Option<usize>,
    batch_subjects: Option<usize>,
    max_utterances: Option<usize>,
    max_terms: Option<usize>,
    truncate: Option<String>,
    oov: Option<String>,
    window: Option<usize>,
    window_stride: Option<usize>,
    min_pronoun_rating: Option<f64>,
    reference_year: Option<i32>,
    top_n: Option<usize>,
    jobs: Option<usize>,
    ablate_term_attn: Option<bool>,
    ablate_utter_attn: Option<bool>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let f = std::fs::File::open(p).map_err(|e| {
                    Error::Config(format!("cannot open config {}: {}", p.display(), e))
                })?;
                serde_json::from_reader(std::io::BufReader::new(f))
                    .map_err(|e| Error::Config(format!("bad config {}: {}", p.display(), e)))
            }
        }
    }
}

/// Provenance block embedded in every artifact.
#[derive(Debug, Serialize)]
struct Provenance {
    command: String,
    seed: u64,
    schema_sha256: Option<String>,
    config: serde_json::Value,
}

fn parse_truncate(s: &str) -> Result<Truncate> {
    match s {
        "head" => Ok(Truncate::Head),
        "tail" => Ok(Truncate::Tail),
        other => Err(Error::Config(format!("unknown truncate mode {:?}", other))),
    }
}

fn parse_oov(s: &str) -> Result<OovPolicy> {
    match s {
        "drop" => Ok(OovPolicy::Drop),
        "zero" => Ok(OovPolicy::Zero),
        other => Err(Error::Config(format!("unknown oov policy {:?}", other))),
    }
}

fn require<T: Clone>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T> {
    flag.or(file)
        .ok_or_else(|| Error::Config(format!("missing required option --{}", name)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    use std::io::Write;
    w.write_all(b"\n")?;
    Ok(())
}

fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    EmbeddingTable::load_auto(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!(
            "cannot read embeddings {}: {}",
            path.display(),
            io
        )),
        other => other,
    })
}

fn records_for_predicate(records: Vec<SubjectRecord>, predicate: &str) -> Result<Vec<SubjectRecord>> {
    let out: Vec<SubjectRecord> = records
        .into_iter()
        .filter(|r| r.predicate == predicate)
        .collect();
    if out.is_empty() {
        return Err(Error::Validation(format!(
            "dataset has no records for predicate {:?}",
            predicate
        )));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// prepare

#[derive(Args)]
struct PrepareArgs {
    /// Raw posts, JSONL with user_id/text/optional year.
    #[arg(long)]
    posts: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Output directory; one <predicate>.jsonl per predicate.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Blocked first names removed during tokenization.
    #[arg(long)]
    names: Option<PathBuf>,
    /// Keep only users whose fraction of pronoun-bearing posts reaches this.
    #[arg(long)]
    min_pronoun_rating: Option<f64>,
    /// Year used to turn birth years into ages.
    #[arg(long)]
    reference_year: Option<i32>,
    /// Drop tokens seen in fewer user histories than this (0 disables).
    #[arg(long, default_value_t = 0)]
    min_doc_count: usize,
}

#[derive(Debug, Serialize)]
struct PrepareSummary {
    provenance: Provenance,
    users_after_filter: usize,
    /// predicate → value → record count.
    label_counts: BTreeMap<String, BTreeMap<String, usize>>,
}

fn cmd_prepare(args: PrepareArgs, file: FileConfig) -> Result<()> {
    let schema_path = require(args.schema, file.schema, "schema")?;
    let out_dir = require(args.out, file.out, "out")?;
    let min_pronoun = args
        .min_pronoun_rating
        .or(file.min_pronoun_rating)
        .unwrap_or(0.9);
    let reference_year = args.reference_year.or(file.reference_year).unwrap_or(2016);

    let posts = load_raw_posts(&args.posts)?;
    let schemas = SchemaSet::load(&schema_path)?;
    let labels = corpus::label_from_patterns(&posts, &schemas, reference_year)?;
    let users = corpus::filter_users(&posts);

    let stopwords = match &args.stopwords {
        Some(p) => load_word_list(p)?,
        None => Default::default(),
    };
    let blocked = match &args.names {
        Some(p) => load_word_list(p)?,
        None => Default::default(),
    };
    let mut tokenizer = Tokenizer::new(stopwords, blocked, args.min_doc_count);
    let histories: Vec<String> = users
        .values()
        .map(|ps| ps.iter().map(|p| p.text.as_str()).collect::<Vec<_>>().join(" "))
        .collect();
    if args.min_doc_count > 0 {
        tokenizer.fit_doc_freq(histories.iter().map(|s| s.as_str()));
    }

    let mut per_predicate: BTreeMap<String, Vec<SubjectRecord>> = BTreeMap::new();
    let mut label_counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (user, user_posts) in &users {
        if corpus::pronoun_rating(user_posts)? < min_pronoun {
            continue;
        }
        let Some(user_labels) = labels.get(user) else {
            continue;
        };
        let utterances: Vec<Vec<String>> = user_posts
            .iter()
            .map(|p| tokenizer.tokenize(&p.text))
            .filter(|toks| !toks.is_empty())
            .collect();
        if utterances.is_empty() {
            continue;
        }
        for (predicate, &value_idx) in user_labels {
            let schema = schemas.get(predicate)?;
            per_predicate
                .entry(predicate.clone())
                .or_default()
                .push(SubjectRecord {
                    subject_id: user.clone(),
                    predicate: predicate.clone(),
                    label: value_idx,
                    utterances: utterances.clone(),
                });
            *label_counts
                .entry(predicate.clone())
                .or_default()
                .entry(schema.values[value_idx].clone())
                .or_insert(0) += 1;
        }
    }

    std::fs::create_dir_all(&out_dir)?;
    for (predicate, records) in &per_predicate {
        save_dataset(records, &out_dir.join(format!("{}.jsonl", predicate)))?;
    }
    for (predicate, counts) in &label_counts {
        let total: usize = counts.values().sum();
        println!("{}: {} records", predicate, total);
        for (value, n) in counts {
            println!("  {}: {}", value, n);
        }
    }
    let summary = PrepareSummary {
        provenance: Provenance {
            command: "prepare".into(),
            seed: 0,
            schema_sha256: None,
            config: serde_json::json!({
                "min_pronoun_rating": min_pronoun,
                "reference_year": reference_year,
                "min_doc_count": args.min_doc_count,
            }),
        },
        users_after_filter: users.len(),
        label_counts,
    };
    write_json(&out_dir.join("prepare.json"), &summary)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    predicate: Option<String>,
    /// avg | two_attn | cnn | cnn_attn
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Checkpoint output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    filters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    batch_subjects: Option<usize>,
    #[arg(long)]
    max_utterances: Option<usize>,
    #[arg(long)]
    max_terms: Option<usize>,
    /// head | tail
    #[arg(long)]
    truncate: Option<String>,
    /// drop | zero
    #[arg(long)]
    oov: Option<String>,
    #[arg(long)]
    ablate_term_attn: bool,
    #[arg(long)]
    ablate_utter_attn: bool,
}

fn build_config(args: &TrainArgs, file: &FileConfig, variant: Variant) -> Result<HamConfig> {
    let mut c = HamConfig::defaults(variant);
    macro_rules! take {
        ($field:ident) => {
            if let Some(v) = args.$field.or(file.$field) {
                c.$field = v;
            }
        };
    }
    take!(seed);
    take!(epochs);
    take!(hidden);
    take!(filters);
    take!(lr);
    take!(l2);
    take!(per_class);
    take!(batch_subjects);
    take!(max_utterances);
    take!(max_terms);
    if let Some(s) = args.truncate.as_deref().or(file.truncate.as_deref()) {
        c.truncate = parse_truncate(s)?;
    }
    if let Some(s) = args.oov.as_deref().or(file.oov.as_deref()) {
        c.oov = parse_oov(s)?;
    }
    c.ablate_term_attention = args.ablate_term_attn || file.ablate_term_attn.unwrap_or(false);
    c.ablate_utterance_attention =
        args.ablate_utter_attn || file.ablate_utter_attn.unwrap_or(false);
    Ok(c)
}

#[derive(Debug, Serialize)]
struct TrainTrace {
    provenance: Provenance,
    variant: String,
    predicate: String,
    epoch_losses: Vec<f64>,
    skipped_records: usize,
}

fn cmd_train(args: TrainArgs, file: FileConfig) -> Result<()> {
    let dataset = require(args.dataset.clone(), file.dataset.clone(), "dataset")?;
    let schema_path = require(args.schema.clone(), file.schema.clone(), "schema")?;
    let predicate = require(args.predicate.clone(), file.predicate.clone(), "predicate")?;
    let variant: Variant = require(args.variant.clone(), file.variant.clone(), "variant")?.parse()?;
    let embeddings = require(args.embeddings.clone(), file.embeddings.clone(), "embeddings")?;
    let out_dir = require(args.out.clone(), file.out.clone(), "out")?;

    let config = build_config(&args, &file, variant)?;
    let schemas = SchemaSet::load(&schema_path)?;
    let schema = schemas.get(&predicate)?;
    let table = load_embeddings(&embeddings)?;
    let records = records_for_predicate(load_dataset(&dataset)?, &predicate)?;

    let (model, report) = models::train(&records, schema, &table, variant, &config)?;
    checkpoint::save(&model, schema, &out_dir)?;
    let trace = TrainTrace {
        provenance: Provenance {
            command: "train".into(),
            seed: model.config.seed,
            schema_sha256: Some(checkpoint::schema_hash(schema)?),
            config: serde_json::to_value(&model.config)?,
        },
        variant: variant.to_string(),
        predicate: predicate.clone(),
        epoch_losses: report.epoch_losses.clone(),
        skipped_records: report.skipped_records,
    };
    write_json(&out_dir.join("train.json"), &trace)?;
    println!(
        "trained {} on {} ({} records, {} epochs, final loss {:.6})",
        variant,
        predicate,
        records.len(),
        report.epoch_losses.len(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for prediction (deterministic output order).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Serialize)]
struct EvaluateArtifact {
    provenance: Provenance,
    variant: String,
    predicate: String,
    report: eval::EvalReport,
}

fn parallel_predict(
    model: &HamModel,
    records: &[SubjectRecord],
    table: &EmbeddingTable,
    jobs: usize,
) -> Result<Vec<Labeled>> {
    if jobs <= 1 || records.len() < 2 {
        return models::predict_all(model, records, table);
    }
    let chunk = records.len().div_ceil(jobs);
    let results: Vec<Result<Vec<Labeled>>> = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| s.spawn(move || models::predict_all(model, part, table)))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut out = Vec::with_capacity(records.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn cmd_evaluate(args: EvaluateArgs, file: FileConfig) -> Result<()> {
    let dataset = require(args.dataset, file.dataset, "dataset")?;
    let schema_path = require(args.schema, file.schema, "schema")?;
    let embeddings = require(args.embeddings, file.embeddings, "embeddings")?;
    let out_dir = require(args.out, file.out, "out")?;
    let jobs = args.jobs.or(file.jobs).unwrap_or(1);
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }

    let (model, manifest) = checkpoint::load(&args.checkpoint)?;
    let schemas = SchemaSet::load(&schema_path)?;
    let schema = schemas.get(&manifest.predicate)?;
    checkpoint::check_schema(&manifest, schema)?;
    let table = load_embeddings(&embeddings)?;
    let records = records_for_predicate(load_dataset(&dataset)?, &manifest.predicate)?;

    let labeled = parallel_predict(&model, &records, &table, jobs)?;
    let report = eval::evaluate(&labeled, model.num_classes)?;
    let artifact = EvaluateArtifact {
        provenance: Provenance {
            command: "evaluate".into(),
            seed: model.config.seed,
            schema_sha256: Some(manifest.schema_sha256.clone()),
            config: serde_json::to_value(&model.config)?,
        },
        variant: model.variant.to_string(),
        predicate: manifest.predicate.clone(),
        report: report.clone(),
    };
    std::fs::create_dir_all(&out_dir)?;
    write_json(&out_dir.join("report.json"), &artifact)?;
    report.save_confusion_csv(&out_dir.join("confusion.csv"))?;
    println!(
        "{} subjects | micro MRR {:.4} | macro MRR {:.4} | accuracy {:.4} | AUROC {:.4}",
        report.subjects, report.micro_mrr, report.macro_mrr, report.accuracy, report.auroc_micro
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// baselines

#[derive(Args)]
struct BaselinesArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    predicate: Option<String>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// oracle | similarity | logreg | mlp | cnn | all
    #[arg(long, default_value = "all")]
    which: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Utterances per context window.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    window_stride: Option<usize>,
}

fn mean_window_embedding(table: &EmbeddingTable, tokens: &[String]) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; table.dim];
    let mut n = 0usize;
    for t in tokens {
        if let Some(v) = table.lookup(t) {
            for (a, &x) in acc.iter_mut().zip(v) {
                *a += x;
            }
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Some(acc)
}

#[derive(Debug, Serialize)]
struct BaselineArtifact {
    provenance: Provenance,
    predicate: String,
    results: BTreeMap<String, serde_json::Value>,
}

fn cmd_baselines(args: BaselinesArgs, file: FileConfig) -> Result<()> {
    let dataset = require(args.dataset, file.dataset, "dataset")?;
    let schema_path = require(args.schema, file.schema, "schema")?;
    let predicate = require(args.predicate, file.predicate, "predicate")?;
    let embeddings = require(args.embeddings, file.embeddings, "embeddings")?;
    let out_dir = require(args.out, file.out, "out")?;
    let seed = args.seed.or(file.seed).unwrap_or(42);
    let window = args.window.or(file.window).unwrap_or(4);
    let stride = args.window_stride.or(file.window_stride).unwrap_or(window);

    let known = ["oracle", "similarity", "logreg", "mlp", "cnn", "all"];
    if !known.contains(&args.which.as_str()) {
        return Err(Error::Config(format!(
            "unknown baseline {:?}; expected one of {}",
            args.which,
            known.join(", ")
        )));
    }
    let want = |name: &str| args.which == "all" || args.which == name;

    let schemas = SchemaSet::load(&schema_path)?;
    let schema = schemas.get(&predicate)?;
    let table = load_embeddings(&embeddings)?;
    let records = records_for_predicate(load_dataset(&dataset)?, &predicate)?;
    let num_classes = schema.values.len();

    let mut results: BTreeMap<String, serde_json::Value> = BTreeMap::new();

    if want("oracle") {
        let score = oracle_score(&records, schema)?;
        println!(
            "oracle: micro MRR {:.5} | accuracy {:.5} ({} of {} mentioned)",
            score.micro_mrr, score.accuracy, score.mentioned, score.subjects
        );
        results.insert("oracle".into(), serde_json::to_value(&score)?);
    }

    if want("similarity") {
        let mut subjects = Vec::new();
        for r in &records {
            subjects.push((r.subject_id.clone(), corpus::window_utterances(r, window, stride)?));
        }
        let preds = baseline_embedding_similarity(&subjects, schema, &table)?;
        let labeled: Vec<Labeled> = preds
            .into_iter()
            .zip(&records)
            .map(|(p, r)| (p, r.label))
            .collect();
        let report = eval::evaluate(&labeled, num_classes)?;
        println!(
            "similarity: micro MRR {:.4} | accuracy {:.4}",
            report.micro_mrr, report.accuracy
        );
        results.insert("similarity".into(), serde_json::to_value(&report)?);
    }

    let needs_split = want("logreg") || want("mlp") || want("cnn");
    let split = if needs_split {
        Some(corpus::split(&records, 0.2, seed)?)
    } else {
        None
    };

    if want("logreg") || want("mlp") {
        let (train, test) = split.as_ref().unwrap();
        let mut train_windows = Vec::new();
        for r in train {
            for w in corpus::window_utterances(r, window, stride)? {
                if let Some(feat) = mean_window_embedding(&table, &w) {
                    train_windows.push((feat, r.label));
                }
            }
        }
        let mut test_subjects = Vec::new();
        let mut test_labels = Vec::new();
        for r in test {
            let feats: Vec<Vec<f64>> = corpus::window_utterances(r, window, stride)?
                .iter()
                .filter_map(|w| mean_window_embedding(&table, w))
                .collect();
            if feats.is_empty() {
                continue;
            }
            test_subjects.push((r.subject_id.clone(), feats));
            test_labels.push(r.label);
        }
        for (name, kind) in [("logreg", DistantKind::Logreg), ("mlp", DistantKind::Mlp)] {
            if !want(name) {
                continue;
            }
            let cfg = DistantConfig {
                seed,
                ..DistantConfig::default()
            };
            let (_, preds) = baseline_distant(&train_windows, &test_subjects, num_classes, kind, &cfg)?;
            let labeled: Vec<Labeled> = preds
                .into_iter()
                .zip(&test_labels)
                .map(|(p, &l)| (p, l))
                .collect();
            let report = eval::evaluate(&labeled, num_classes)?;
            println!(
                "{}: micro MRR {:.4} | accuracy {:.4} (held-out {})",
                name, report.micro_mrr, report.accuracy, report.subjects
            );
            results.insert(name.into(), serde_json::to_value(&report)?);
        }
    }

    if want("cnn") {
        let (train, test) = split.as_ref().unwrap();
        let opts = PrepareOptions::default();
        let mut train_utts = Vec::new();
        for r in train {
            let prep = corpus::prepare_record(r, &table, &opts)?;
            for u in prep.utterances {
                train_utts.push((u.matrix, r.label));
            }
        }
        let cfg = BaselineCnnConfig {
            seed,
            ..BaselineCnnConfig::default()
        };
        let model = baseline_utterance_cnn(&train_utts, num_classes, table.dim, &cfg)?;
        let mut labeled = Vec::new();
        for r in test {
            let prep = corpus::prepare_record(r, &table, &opts)?;
            if prep.utterances.is_empty() {
                continue;
            }
            let mats: Vec<Tensor> = prep.utterances.into_iter().map(|u| u.matrix).collect();
            labeled.push((model.predict_subject(&r.subject_id, &mats)?, r.label));
        }
        let report = eval::evaluate(&labeled, num_classes)?;
        println!(
            "cnn: micro MRR {:.4} | accuracy {:.4} (held-out {})",
            report.micro_mrr, report.accuracy, report.subjects
        );
        results.insert("cnn".into(), serde_json::to_value(&report)?);
    }

    let artifact = BaselineArtifact {
        provenance: Provenance {
            command: "baselines".into(),
            seed,
            schema_sha256: Some(checkpoint::schema_hash(schema)?),
            config: serde_json::json!({
                "which": args.which,
                "window": window,
                "window_stride": stride,
            }),
        },
        predicate,
        results,
    };
    std::fs::create_dir_all(&out_dir)?;
    write_json(&out_dir.join("baselines.json"), &artifact)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// explain

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset for attention reports.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Restrict attention reports to one subject.
    #[arg(long)]
    subject: Option<String>,
    /// Emit the per-class top-N terms table instead of attention reports.
    #[arg(long)]
    top_terms: Option<usize>,
}

#[derive(Debug, Serialize)]
struct TopTermsArtifact {
    provenance: Provenance,
    variant: String,
    predicate: String,
    values: Vec<String>,
    classes: Vec<explain::ClassTopTerms>,
}

fn cmd_explain(args: ExplainArgs, file: FileConfig) -> Result<()> {
    let embeddings = require(args.embeddings, file.embeddings, "embeddings")?;
    let out_dir = require(args.out, file.out, "out")?;
    let (model, manifest) = checkpoint::load(&args.checkpoint)?;
    let table = load_embeddings(&embeddings)?;
    std::fs::create_dir_all(&out_dir)?;

    if let Some(top_n) = args.top_terms.or(file.top_n) {
        let classes = explain::top_terms_per_class(&model, &table, top_n)?;
        for c in &classes {
            let terms: Vec<&str> = c.terms.iter().map(|(t, _)| t.as_str()).collect();
            println!("{}: {}", manifest.values[c.class], terms.join(", "));
        }
        let artifact = TopTermsArtifact {
            provenance: Provenance {
                command: "explain".into(),
                seed: model.config.seed,
                schema_sha256: Some(manifest.schema_sha256.clone()),
                config: serde_json::to_value(&model.config)?,
            },
            variant: model.variant.to_string(),
            predicate: manifest.predicate.clone(),
            values: manifest.values.clone(),
            classes,
        };
        write_json(&out_dir.join("top_terms.json"), &artifact)?;
        return Ok(());
    }

    let dataset = require(args.dataset, file.dataset, "dataset")?;
    let records = records_for_predicate(load_dataset(&dataset)?, &manifest.predicate)?;
    let records: Vec<SubjectRecord> = match &args.subject {
        None => records,
        Some(id) => {
            let filtered: Vec<SubjectRecord> =
                records.into_iter().filter(|r| &r.subject_id == id).collect();
            if filtered.is_empty() {
                return Err(Error::Validation(format!("no record for subject {:?}", id)));
            }
            filtered
        }
    };
    let mut written = 0usize;
    for r in &records {
        let report = explain::attention_report(&model, r, &table)?;
        report.save_json(&out_dir.join(format!("attn_{}.json", r.subject_id)))?;
        report.save_tsv(&out_dir.join(format!("attn_{}.tsv", r.subject_id)))?;
        written += 1;
    }
    println!("wrote {} attention reports to {}", written, out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    subjects_per_class: Option<usize>,
    #[arg(long)]
    utterances: Option<usize>,
    #[arg(long)]
    terms_per_utterance: Option<usize>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    embedding_dim: Option<usize>,
}

#[derive(Debug, Serialize)]
struct SynthArtifact {
    provenance: Provenance,
    records: usize,
    vocabulary: usize,
}

fn cmd_synth(args: SynthArgs, file: FileConfig) -> Result<()> {
    let out_dir = require(args.out, file.out, "out")?;
    let mut cfg = SynthConfig::default();
    if let Some(v) = args.seed.or(file.seed) {
        cfg.seed = v;
    }
    if let Some(v) = args.classes {
        cfg.num_classes = v;
    }
    if let Some(v) = args.subjects_per_class {
        cfg.subjects_per_class = v;
    }
    if let Some(v) = args.utterances {
        cfg.utterances = v;
    }
    if let Some(v) = args.terms_per_utterance {
        cfg.terms_per_utterance = v;
    }
    if let Some(v) = args.noise_rate {
        cfg.noise_rate = v;
    }
    if let Some(v) = args.embedding_dim {
        cfg.embedding_dim = v;
    }
    let (records, schema, table) = corpus::synth_corpus(&cfg)?;
    std::fs::create_dir_all(&out_dir)?;
    save_dataset(&records, &out_dir.join("dataset.jsonl"))?;
    let mut set = SchemaSet::default();
    set.predicates.insert(schema.predicate.clone(), schema.clone());
    set.save(&out_dir.join("schema.json"))?;
    table.save_text(&out_dir.join("embeddings.vec"))?;
    let artifact = SynthArtifact {
        provenance: Provenance {
            command: "synth".into(),
            seed: cfg.seed,
            schema_sha256: Some(checkpoint::schema_hash(&schema)?),
            config: serde_json::to_value(&cfg)?,
        },
        records: records.len(),
        vocabulary: table.len(),
    };
    write_json(&out_dir.join("synth.json"), &artifact)?;
    println!(
        "wrote {} records, {} tokens to {}",
        records.len(),
        table.len(),
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_gradcheck(args: GradcheckArgs, file: FileConfig) -> Result<()> {
    let seed = args.seed.or(file.seed).unwrap_or(7);
    // Tiny deterministic fixture: 3 utterances, 5-d embeddings, 3 classes.
    let dim = 5;
    let rows: Vec<(String, Vec<f64>)> = (0..6)
        .map(|i| {
            let v: Vec<f64> = (0..dim)
                .map(|j| ((i * 5 + j * 2 + seed as usize) as f64).sin() * 0.5)
                .collect();
            (format!("tok{}", i), v)
        })
        .collect();
    let table = EmbeddingTable::from_rows(rows, dim)?;
    let record = SubjectRecord {
        subject_id: "gradcheck".into(),
        predicate: "probe".into(),
        label: 1,
        utterances: vec![
            vec!["tok0".into(), "tok1".into(), "tok2".into(), "tok3".into()],
            vec!["tok4".into(), "tok5".into()],
            vec!["tok1".into(), "tok3".into(), "tok0".into()],
        ],
    };
    let mut failed = false;
    for variant in [Variant::Avg, Variant::TwoAttn, Variant::Cnn, Variant::CnnAttn] {
        let mut config = HamConfig::defaults(variant);
        config.dim = dim;
        config.hidden = 7;
        config.filters = 3;
        config.pool_k = 2;
        config.seed = seed;
        let model = HamModel::new(variant, config.clone(), 3)?;
        let prep = corpus::prepare_record(&record, &table, &config.prepare_options())?;
        let shell = model.clone();
        let mut params = model.params;
        let report = grad_check(
            &mut params,
            move |g, vars| {
                let out = shell.forward(g, vars, &prep, None)?;
                g.cross_entropy(out, 1)
            },
            1e-5,
            args.tolerance,
        )?;
        let status = if report.passed() { "PASS" } else { "FAIL" };
        println!(
            "gradcheck {}: max_rel_error={:.3e} tolerance={:.1e} {}",
            variant,
            report.max_rel_error(),
            args.tolerance,
            status
        );
        failed |= !report.passed();
    }
    if failed {
        return Err(Error::NonFinite(
            "analytic gradients disagree with finite differences".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Param(_) => 2,
        Error::NonFinite(_) | Error::Diverged(_) | Error::TapeConsumed => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let file = match FileConfig::load(cli.config.as_deref()) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {}", e);
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(a, file),
        Command::Train(a) => cmd_train(a, file),
        Command::Evaluate(a) => cmd_evaluate(a, file),
        Command::Baselines(a) => cmd_baselines(a, file),
        Command::Explain(a) => cmd_explain(a, file),
        Command::Synth(a) => cmd_synth(a, file),
        Command::Gradcheck(a) => cmd_gradcheck(a, file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code_for(&e))
        }
    }
}

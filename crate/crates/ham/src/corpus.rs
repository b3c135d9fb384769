//! Dataset model, tokenization, pattern-based distant labeling, filtering,
//! age discretization, splits, balanced batching, and utterance windowing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingTable, OovPolicy};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const AGE_BINS: [&str; 5] = ["child", "teenager", "adult", "middle-aged", "senior"];

/// Which end to keep when truncating utterance or term sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truncate {
    #[default]
    Head,
    Tail,
}

/// Ordered value list plus synonym map for one predicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredicateSchema {
    pub predicate: String,
    pub values: Vec<String>,
    /// value → search terms (the value name itself is always a term too).
    #[serde(default)]
    pub synonyms: BTreeMap<String, Vec<String>>,
}

impl PredicateSchema {
    pub fn new(predicate: &str, values: Vec<String>) -> Self {
        PredicateSchema {
            predicate: predicate.to_string(),
            values,
            synonyms: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for v in &self.values {
            if !seen.insert(v) {
                return Err(Error::Validation(format!(
                    "schema {}: duplicate value {:?}",
                    self.predicate, v
                )));
            }
        }
        let mut term_owner: HashMap<&str, &str> = HashMap::new();
        for (value, terms) in &self.synonyms {
            if !self.values.iter().any(|v| v == value) {
                return Err(Error::Validation(format!(
                    "schema {}: synonym entry for unknown value {:?}",
                    self.predicate, value
                )));
            }
            for t in terms {
                if let Some(prev) = term_owner.insert(t, value) {
                    if prev != value {
                        return Err(Error::Validation(format!(
                            "schema {}: term {:?} maps to both {:?} and {:?}",
                            self.predicate, t, prev, value
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn value_index(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }

    /// All search terms for a value: the value name plus its synonyms.
    pub fn terms_for(&self, value: &str) -> Vec<String> {
        let mut terms = vec![value.to_string()];
        if let Some(syn) = self.synonyms.get(value) {
            terms.extend(syn.iter().cloned());
        }
        terms
    }

    /// term → value index over all values and synonyms.
    pub fn term_map(&self) -> HashMap<String, usize> {
        let mut map = HashMap::new();
        for (i, v) in self.values.iter().enumerate() {
            for t in self.terms_for(v) {
                map.entry(t.to_lowercase()).or_insert(i);
            }
        }
        map
    }
}

/// Schema file: one entry per predicate.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SchemaSet {
    pub predicates: BTreeMap<String, PredicateSchema>,
}

impl SchemaSet {
    pub fn load(path: &Path) -> Result<Self> {
        let set: SchemaSet = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        for (name, schema) in &set.predicates {
            if &schema.predicate != name {
                return Err(Error::Validation(format!(
                    "schema key {:?} disagrees with predicate field {:?}",
                    name, schema.predicate
                )));
            }
            schema.validate()?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn get(&self, predicate: &str) -> Result<&PredicateSchema> {
        self.predicates
            .get(predicate)
            .ok_or_else(|| Error::Config(format!("no schema for predicate {:?}", predicate)))
    }
}

/// One subject's utterance sequence with its distant or gold label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub predicate: String,
    pub label: usize,
    /// Token lists, one per utterance.
    pub utterances: Vec<Vec<String>>,
}

/// Wire form of a dataset line: utterances are plain strings.
#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    subject_id: String,
    predicate: String,
    label: usize,
    utterances: Vec<String>,
}

pub fn load_dataset(path: &Path) -> Result<Vec<SubjectRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(SubjectRecord {
            subject_id: rec.subject_id,
            predicate: rec.predicate,
            label: rec.label,
            utterances: rec
                .utterances
                .iter()
                .map(|u| u.split_whitespace().map(|t| t.to_string()).collect())
                .collect(),
        });
    }
    Ok(out)
}

pub fn save_dataset(records: &[SubjectRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let line = RecordLine {
            subject_id: r.subject_id.clone(),
            predicate: r.predicate.clone(),
            label: r.label,
            utterances: r.utterances.iter().map(|u| u.join(" ")).collect(),
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

/// One raw forum post, the input to the distant-labeling pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawPost {
    pub user_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
}

impl RawPost {
    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

pub fn load_raw_posts(path: &Path) -> Result<Vec<RawPost>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let post: RawPost = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(post);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tokenization

/// Tokenizer with stopword, blocked-name, and document-frequency filters.
#[derive(Debug, Clone, Default)]
pub struct Tokenizer {
    pub stopwords: HashSet<String>,
    pub blocked_names: HashSet<String>,
    /// Tokens occurring in fewer than this many documents are removed.
    /// Zero disables the filter.
    pub min_doc_count: usize,
    doc_freq: HashMap<String, usize>,
}

impl Tokenizer {
    pub fn new(stopwords: HashSet<String>, blocked_names: HashSet<String>, min_doc_count: usize) -> Self {
        Tokenizer {
            stopwords,
            blocked_names,
            min_doc_count,
            doc_freq: HashMap::new(),
        }
    }

    /// Lowercase and split on non-alphanumeric runs.
    pub fn split_words(text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_string())
            .collect()
    }

    /// Count, per token, the number of documents it appears in. A document
    /// is one source unit (a movie, a user's post history).
    pub fn fit_doc_freq<'a, I>(&mut self, documents: I)
    where
        I: IntoIterator<Item = &'a str>,
    {
        self.doc_freq.clear();
        for doc in documents {
            let unique: HashSet<String> = Self::split_words(doc).into_iter().collect();
            for tok in unique {
                *self.doc_freq.entry(tok).or_insert(0) += 1;
            }
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        Self::split_words(text)
            .into_iter()
            .filter(|t| !self.stopwords.contains(t))
            .filter(|t| !self.blocked_names.contains(t))
            .filter(|t| {
                self.min_doc_count == 0
                    || self.doc_freq.get(t).copied().unwrap_or(0) >= self.min_doc_count
            })
            .collect()
    }
}

/// Load a one-token-per-line word list (stopwords, blocked names).
pub fn load_word_list(path: &Path) -> Result<HashSet<String>> {
    let reader = BufReader::new(File::open(path)?);
    let mut set = HashSet::new();
    for line in reader.lines() {
        let w = line?.trim().to_lowercase();
        if !w.is_empty() && !w.starts_with('#') {
            set.insert(w);
        }
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// Age discretization

/// 0–13 child, 14–23 teenager, 24–45 adult, 46–65 middle-aged, 66+ senior
/// (ages over 100 clamp to senior).
pub fn discretize_age(age_years: i32) -> Result<usize> {
    if age_years < 0 {
        return Err(Error::Validation(format!("negative age {}", age_years)));
    }
    if age_years > 130 {
        return Err(Error::Validation(format!("implausible age {}", age_years)));
    }
    Ok(match age_years {
        0..=13 => 0,
        14..=23 => 1,
        24..=45 => 2,
        46..=65 => 3,
        _ => 4,
    })
}

// ---------------------------------------------------------------------------
// Pattern-based distant labeling

/// The self-declaration pattern families used for ground-truth extraction.
struct PredicatePatterns {
    predicate: String,
    /// "I am / I'm [a|an|the] TERM"
    self_decl: Option<Regex>,
    /// "my TERM" / "I have a TERM"
    possession: Option<Regex>,
    /// "I am N years old"
    age_years: Option<Regex>,
    /// "I am/was born in YYYY"
    born_year: Option<Regex>,
    term_map: HashMap<String, usize>,
}

fn term_alternation(terms: &[String]) -> String {
    let mut escaped: Vec<String> = terms
        .iter()
        .map(|t| regex::escape(&t.to_lowercase()))
        .collect();
    // Longer terms first so multi-word values win over embedded words.
    escaped.sort_by_key(|t| std::cmp::Reverse(t.len()));
    escaped.join("|")
}

impl PredicatePatterns {
    fn compile(schema: &PredicateSchema) -> Result<Self> {
        let all_terms: Vec<String> = schema
            .values
            .iter()
            .flat_map(|v| schema.terms_for(v))
            .collect();
        let alt = term_alternation(&all_terms);
        let term_map = schema.term_map();
        let mut p = PredicatePatterns {
            predicate: schema.predicate.clone(),
            self_decl: None,
            possession: None,
            age_years: None,
            born_year: None,
            term_map,
        };
        let build = |pat: String| {
            Regex::new(&pat).map_err(|e| Error::Config(format!("bad pattern: {}", e)))
        };
        match schema.predicate.as_str() {
            "age" => {
                p.age_years = Some(build(
                    r"\b[Ii](?: am|'m)\s+(\d{1,3})\s+years\s+old\b".to_string(),
                )?);
                p.born_year = Some(build(
                    r"\b[Ii](?: am|'m| was)\s+born\s+in\s+(\d{4})\b".to_string(),
                )?);
            }
            "family_status" => {
                p.self_decl = Some(build(format!(
                    r"\b[Ii](?: am|'m)\s+(?:(?:a|an|the)\s+)?({})\b",
                    alt
                ))?);
                p.possession = Some(build(format!(
                    r"\b(?:[Mm]y|[Ii] have a)\s+({})\b",
                    alt
                ))?);
            }
            _ => {
                p.self_decl = Some(build(format!(
                    r"\b[Ii](?: am|'m)\s+(?:(?:a|an|the)\s+)?({})\b",
                    alt
                ))?);
            }
        }
        Ok(p)
    }

    /// Values claimed in one post, as indices into the schema's value list.
    fn matches(&self, post: &RawPost, reference_year: i32) -> Vec<usize> {
        let mut out = Vec::new();
        let lower = post.text.to_lowercase();
        for re in [&self.self_decl, &self.possession].into_iter().flatten() {
            for cap in re.captures_iter(&lower) {
                if let Some(idx) = self.term_map.get(&cap[1]) {
                    out.push(*idx);
                }
            }
        }
        if let Some(re) = &self.age_years {
            for cap in re.captures_iter(&post.text) {
                if let Ok(age) = cap[1].parse::<i32>() {
                    if (5..=100).contains(&age) {
                        if let Ok(bin) = discretize_age(age) {
                            out.push(bin);
                        }
                    }
                }
            }
        }
        if let Some(re) = &self.born_year {
            for cap in re.captures_iter(&post.text) {
                if let Ok(year) = cap[1].parse::<i32>() {
                    if (1920..=2013).contains(&year) {
                        let now = post.year.unwrap_or(reference_year);
                        let age = now - year;
                        if age >= 0 {
                            if let Ok(bin) = discretize_age(age.min(130)) {
                                out.push(bin);
                            }
                        }
                    }
                }
            }
        }
        let _ = self.predicate; // retained for diagnostics
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Per-user (predicate, value-index) assignments. Users claiming more than
/// one value for a predicate are dropped for that predicate.
pub fn label_from_patterns(
    posts: &[RawPost],
    schemas: &SchemaSet,
    reference_year: i32,
) -> Result<BTreeMap<String, BTreeMap<String, usize>>> {
    let mut compiled = Vec::new();
    for schema in schemas.predicates.values() {
        compiled.push(PredicatePatterns::compile(schema)?);
    }
    // user → predicate → set of claimed values
    let mut claims: BTreeMap<String, BTreeMap<String, HashSet<usize>>> = BTreeMap::new();
    for post in posts {
        for pat in &compiled {
            for v in pat.matches(post, reference_year) {
                claims
                    .entry(post.user_id.clone())
                    .or_default()
                    .entry(pat.predicate.clone())
                    .or_default()
                    .insert(v);
            }
        }
    }
    let mut out: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (user, preds) in claims {
        for (pred, values) in preds {
            if values.len() == 1 {
                out.entry(user.clone())
                    .or_default()
                    .insert(pred, values.into_iter().next().unwrap());
            }
            // Conflicting claims: user dropped for this predicate.
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// User filtering and pronoun rating

pub const POST_WORDS_MIN: usize = 10;
pub const POST_WORDS_MAX: usize = 100;
pub const USER_POSTS_MIN: usize = 20;
pub const USER_POSTS_MAX: usize = 100;

/// Keep posts of 10–100 words, then users with 20–100 qualifying posts.
/// Returns user → qualifying posts, order-stable by user id.
pub fn filter_users(posts: &[RawPost]) -> BTreeMap<String, Vec<RawPost>> {
    let mut by_user: BTreeMap<String, Vec<RawPost>> = BTreeMap::new();
    for p in posts {
        let wc = p.word_count();
        if (POST_WORDS_MIN..=POST_WORDS_MAX).contains(&wc) {
            by_user.entry(p.user_id.clone()).or_default().push(p.clone());
        }
    }
    by_user
        .into_iter()
        .filter(|(_, ps)| (USER_POSTS_MIN..=USER_POSTS_MAX).contains(&ps.len()))
        .collect()
}

const PERSONAL_PRONOUNS: [&str; 18] = [
    "i", "me", "my", "mine", "you", "your", "we", "us", "our", "he", "she", "him", "her", "his",
    "hers", "they", "them", "their",
];

/// Fraction of posts containing at least one personal pronoun.
pub fn pronoun_rating(posts: &[RawPost]) -> Result<f64> {
    if posts.is_empty() {
        return Err(Error::Validation("pronoun rating of empty post list".into()));
    }
    let pronouns: HashSet<&str> = PERSONAL_PRONOUNS.into_iter().collect();
    let with = posts
        .iter()
        .filter(|p| {
            Tokenizer::split_words(&p.text)
                .iter()
                .any(|t| pronouns.contains(t.as_str()))
        })
        .count();
    Ok(with as f64 / posts.len() as f64)
}

// ---------------------------------------------------------------------------
// Record preparation

/// A record materialized into tensors, ready for a model forward pass.
/// Padding utterances and padding terms are dropped here, so model outputs
/// cannot depend on padding at all.
#[derive(Debug, Clone)]
pub struct PreparedRecord {
    pub subject_id: String,
    pub label: usize,
    /// Real utterances only, each with its real (unpadded) token matrix
    /// and tokens. Matrices have at least one row.
    pub utterances: Vec<PreparedUtterance>,
}

#[derive(Debug, Clone)]
pub struct PreparedUtterance {
    /// L×d token embedding matrix, L = number of kept terms.
    pub matrix: Tensor,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct PrepareOptions {
    pub max_utterances: usize,
    pub max_terms: usize,
    pub truncate: Truncate,
    pub oov: OovPolicy,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            max_utterances: 40,
            max_terms: 40,
            truncate: Truncate::Head,
            oov: OovPolicy::Drop,
        }
    }
}

fn truncated<T: Clone>(items: &[T], n: usize, mode: Truncate) -> Vec<T> {
    if items.len() <= n {
        return items.to_vec();
    }
    match mode {
        Truncate::Head => items[..n].to_vec(),
        Truncate::Tail => items[items.len() - n..].to_vec(),
    }
}

/// Embed a record's utterances. Utterances with no in-vocabulary token are
/// fully masked (dropped). Errors if the record has no utterances at all.
pub fn prepare_record(
    record: &SubjectRecord,
    table: &EmbeddingTable,
    opts: &PrepareOptions,
) -> Result<PreparedRecord> {
    if record.utterances.is_empty() {
        return Err(Error::Validation(format!(
            "subject {} has no utterances",
            record.subject_id
        )));
    }
    let kept = truncated(&record.utterances, opts.max_utterances, opts.truncate);
    let mut utterances = Vec::new();
    for toks in &kept {
        let toks = truncated(toks, opts.max_terms, opts.truncate);
        let resolved: Vec<String> = match opts.oov {
            OovPolicy::Drop => toks
                .iter()
                .filter(|t| table.contains(t))
                .cloned()
                .collect(),
            OovPolicy::Zero => toks.clone(),
        };
        if resolved.is_empty() {
            continue; // fully masked utterance
        }
        let (full, mask) = table.embed_utterance(&resolved, resolved.len(), opts.oov)?;
        debug_assert!(mask.iter().all(|&m| m));
        utterances.push(PreparedUtterance {
            matrix: full,
            tokens: resolved,
        });
    }
    Ok(PreparedRecord {
        subject_id: record.subject_id.clone(),
        label: record.label,
        utterances,
    })
}

// ---------------------------------------------------------------------------
// Splits and batching

/// Seeded stratified split into (train, test).
pub fn split(
    records: &[SubjectRecord],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<SubjectRecord>, Vec<SubjectRecord>)> {
    if records.len() < 10 {
        return Err(Error::Validation(format!(
            "need at least 10 records to split, got {}",
            records.len()
        )));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Param(format!("bad test fraction {}", test_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.label).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        for (j, i) in idx.into_iter().enumerate() {
            if j < n_test {
                test.push(records[i].clone());
            } else {
                train.push(records[i].clone());
            }
        }
    }
    train.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    test.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    Ok((train, test))
}

/// Class-balanced minibatch sampler: every batch holds exactly `per_class`
/// record indices per class. One epoch is ⌈max class size / per_class⌉
/// batches of per-class shuffled cyclic draws, which guarantees every
/// training record is drawn at least once per epoch.
#[derive(Debug)]
pub struct BalancedBatches {
    per_class: usize,
    /// class → shuffled index pool
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    rng: ChaCha8Rng,
    batches_per_epoch: usize,
}

impl BalancedBatches {
    pub fn new(labels: &[usize], num_classes: usize, per_class: usize, seed: u64) -> Result<Self> {
        if per_class == 0 {
            return Err(Error::Param("per_class must be >= 1".into()));
        }
        let mut pools = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::Index(format!("label {} out of {} classes", l, num_classes)));
            }
            pools[l].push(i);
        }
        if let Some(c) = pools.iter().position(|p| p.is_empty()) {
            return Err(Error::Config(format!("class {} has no training records", c)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut pools {
            p.shuffle(&mut rng);
        }
        let max_class = pools.iter().map(|p| p.len()).max().unwrap();
        let batches_per_epoch = max_class.div_ceil(per_class);
        Ok(BalancedBatches {
            per_class,
            cursors: vec![0; pools.len()],
            pools,
            rng,
            batches_per_epoch,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    /// Draw the next batch: `per_class` indices from each class's cycle.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.per_class * self.pools.len());
        for c in 0..self.pools.len() {
            for _ in 0..self.per_class {
                if self.cursors[c] == self.pools[c].len() {
                    self.pools[c].shuffle(&mut self.rng);
                    self.cursors[c] = 0;
                }
                batch.push(self.pools[c][self.cursors[c]]);
                self.cursors[c] += 1;
            }
        }
        batch
    }

    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        (0..self.batches_per_epoch).map(|_| self.next_batch()).collect()
    }
}

/// Consecutive windows of `stride`-spaced `k` utterances, final partial
/// window kept; each window is the concatenated token list.
pub fn window_utterances(record: &SubjectRecord, k: usize, stride: usize) -> Result<Vec<Vec<String>>> {
    if k == 0 || stride == 0 {
        return Err(Error::Param("window size and stride must be >= 1".into()));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < record.utterances.len() {
        let end = (start + k).min(record.utterances.len());
        out.push(record.utterances[start..end].concat());
        start += stride;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic corpus

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub vocab_per_class: usize,
    pub subjects_per_class: usize,
    pub utterances: usize,
    pub terms_per_utterance: usize,
    pub noise_rate: f64,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 4,
            vocab_per_class: 20,
            subjects_per_class: 50,
            utterances: 10,
            terms_per_utterance: 8,
            noise_rate: 0.1,
            embedding_dim: 16,
            seed: 13,
        }
    }
}

/// Deterministic synthetic corpus: each class owns a disjoint signal
/// vocabulary; utterances mix signal tokens with shared noise tokens.
/// Also produces a matching schema and random unit-vector embeddings.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<(Vec<SubjectRecord>, PredicateSchema, EmbeddingTable)> {
    if cfg.num_classes == 0
        || cfg.vocab_per_class == 0
        || cfg.subjects_per_class == 0
        || cfg.utterances == 0
        || cfg.terms_per_utterance == 0
    {
        return Err(Error::Param("synth parameters must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.noise_rate) {
        return Err(Error::Param("noise_rate must be in [0,1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let signal: Vec<Vec<String>> = (0..cfg.num_classes)
        .map(|c| {
            (0..cfg.vocab_per_class)
                .map(|t| format!("class{}sig{}", c, t))
                .collect()
        })
        .collect();
    let noise: Vec<String> = (0..cfg.vocab_per_class).map(|t| format!("noise{}", t)).collect();

    let mut records = Vec::new();
    for c in 0..cfg.num_classes {
        for s in 0..cfg.subjects_per_class {
            let mut utterances = Vec::new();
            for _ in 0..cfg.utterances {
                let mut toks = Vec::with_capacity(cfg.terms_per_utterance);
                for _ in 0..cfg.terms_per_utterance {
                    use rand::Rng;
                    if rng.gen::<f64>() < cfg.noise_rate {
                        toks.push(noise[rng.gen_range(0..noise.len())].clone());
                    } else {
                        toks.push(signal[c][rng.gen_range(0..signal[c].len())].clone());
                    }
                }
                utterances.push(toks);
            }
            records.push(SubjectRecord {
                subject_id: format!("synth-c{}-s{}", c, s),
                predicate: "synthetic".into(),
                label: c,
                utterances,
            });
        }
    }

    let schema = PredicateSchema::new(
        "synthetic",
        (0..cfg.num_classes).map(|c| format!("class{}", c)).collect(),
    );

    let mut rows = Vec::new();
    for token in signal.iter().flatten().chain(noise.iter()) {
        use rand::Rng;
        let mut v: Vec<f64> = (0..cfg.embedding_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        rows.push((token.clone(), v));
    }
    let table = EmbeddingTable::from_rows(rows, cfg.embedding_dim)?;
    Ok((records, schema, table))
}

impl fmt::Display for Truncate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Truncate::Head => write!(f, "head"),
            Truncate::Tail => write!(f, "tail"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(user: &str, text: &str) -> RawPost {
        RawPost {
            user_id: user.into(),
            text: text.into(),
            year: None,
        }
    }

    fn profession_schema() -> PredicateSchema {
        let mut s = PredicateSchema::new(
            "profession",
            vec!["nurse".into(), "military personnel".into(), "scientist".into()],
        );
        s.synonyms.insert(
            "military personnel".into(),
            vec!["soldier".into(), "sergeant".into()],
        );
        s
    }

    fn schema_set(schemas: Vec<PredicateSchema>) -> SchemaSet {
        SchemaSet {
            predicates: schemas.into_iter().map(|s| (s.predicate.clone(), s)).collect(),
        }
    }

    #[test]
    fn tokenize_applies_all_filters() {
        let stop: HashSet<String> = ["the"].iter().map(|s| s.to_string()).collect();
        let tok = Tokenizer::new(stop, HashSet::new(), 0);
        assert_eq!(tok.tokenize("Put down the gun!"), vec!["put", "down", "gun"]);
        assert!(tok.tokenize("The THE the").is_empty());
    }

    #[test]
    fn tokenize_doc_frequency_threshold() {
        let mut tok = Tokenizer::new(HashSet::new(), HashSet::new(), 4);
        // "common" appears in 4 documents, "rare" in 3.
        tok.fit_doc_freq([
            "common rare",
            "common rare",
            "common rare",
            "common only",
        ]);
        assert_eq!(tok.tokenize("common rare"), vec!["common"]);
    }

    #[test]
    fn tokenize_is_idempotent() {
        let stop: HashSet<String> = ["a", "the"].iter().map(|s| s.to_string()).collect();
        let names: HashSet<String> = ["john"].iter().map(|s| s.to_string()).collect();
        let tok = Tokenizer::new(stop, names, 0);
        let once = tok.tokenize("John ate the apple, obviously!");
        let twice = tok.tokenize(&once.join(" "));
        assert_eq!(once, twice);
    }

    #[test]
    fn age_bins_match_ranges() {
        assert_eq!(discretize_age(10).unwrap(), 0); // child
        assert_eq!(discretize_age(13).unwrap(), 0);
        assert_eq!(discretize_age(14).unwrap(), 1); // teenager
        assert_eq!(discretize_age(24).unwrap(), 2);
        assert_eq!(discretize_age(46).unwrap(), 3);
        assert_eq!(discretize_age(66).unwrap(), 4); // senior
        assert_eq!(discretize_age(120).unwrap(), 4); // clamped
        assert!(discretize_age(-1).is_err());
    }

    #[test]
    fn pattern_labels_profession() {
        let schemas = schema_set(vec![profession_schema()]);
        let posts = vec![post("u1", "I'm a nurse and tired")];
        let labels = label_from_patterns(&posts, &schemas, 2017).unwrap();
        assert_eq!(labels["u1"]["profession"], 0);
    }

    #[test]
    fn pattern_synonym_maps_to_value() {
        let schemas = schema_set(vec![profession_schema()]);
        let posts = vec![post("u1", "i am a sergeant in the army")];
        let labels = label_from_patterns(&posts, &schemas, 2017).unwrap();
        assert_eq!(labels["u1"]["profession"], 1);
    }

    #[test]
    fn pattern_requires_word_boundary() {
        let schemas = schema_set(vec![profession_schema()]);
        // "nurses" must not match the value "nurse".
        let posts = vec![post("u1", "I'm a nurses aide's friend")];
        let labels = label_from_patterns(&posts, &schemas, 2017).unwrap();
        assert!(labels.get("u1").is_none());
    }

    #[test]
    fn pattern_age_years_old() {
        let schemas = schema_set(vec![PredicateSchema::new(
            "age",
            AGE_BINS.iter().map(|s| s.to_string()).collect(),
        )]);
        let posts = vec![post("u1", "I am 25 years old")];
        let labels = label_from_patterns(&posts, &schemas, 2017).unwrap();
        assert_eq!(labels["u1"]["age"], 2); // adult
    }

    #[test]
    fn pattern_born_year_uses_reference_year() {
        let schemas = schema_set(vec![PredicateSchema::new(
            "age",
            AGE_BINS.iter().map(|s| s.to_string()).collect(),
        )]);
        let posts = vec![post("u1", "I was born in 1950")];
        let labels = label_from_patterns(&posts, &schemas, 2000).unwrap();
        assert_eq!(labels["u1"]["age"], 3); // 50 → middle-aged
    }

    #[test]
    fn conflicting_claims_drop_user_for_predicate() {
        let mut fam = PredicateSchema::new(
            "family_status",
            vec!["single".into(), "not single".into()],
        );
        fam.synonyms
            .insert("single".into(), vec!["divorced".into()]);
        fam.synonyms.insert(
            "not single".into(),
            vec!["married".into(), "wife".into(), "boyfriend".into()],
        );
        let schemas = schema_set(vec![fam]);
        let posts = vec![
            post("u1", "I'm single these days"),
            post("u1", "my wife is great"),
            post("u2", "my wife is great"),
        ];
        let labels = label_from_patterns(&posts, &schemas, 2017).unwrap();
        assert!(labels.get("u1").is_none());
        assert_eq!(labels["u2"]["family_status"], 1);
    }

    #[test]
    fn filter_users_bounds() {
        let ten_words = "w w w w w w w w w w";
        let mut posts = Vec::new();
        // u1: 19 qualifying posts → removed.
        for _ in 0..19 {
            posts.push(post("u1", ten_words));
        }
        // u2: 20 qualifying posts → kept.
        for _ in 0..20 {
            posts.push(post("u2", ten_words));
        }
        // u3: 20 posts but each is 101 words → none qualify.
        let long = vec!["w"; 101].join(" ");
        for _ in 0..20 {
            posts.push(post("u3", &long));
        }
        let kept = filter_users(&posts);
        assert!(!kept.contains_key("u1"));
        assert_eq!(kept["u2"].len(), 20);
        assert!(!kept.contains_key("u3"));
    }

    #[test]
    fn filter_users_is_fixed_point() {
        let ten_words = "w w w w w w w w w w";
        let posts: Vec<RawPost> = (0..25).map(|_| post("u", ten_words)).collect();
        let kept = filter_users(&posts);
        let flat: Vec<RawPost> = kept.values().flatten().cloned().collect();
        let again = filter_users(&flat);
        assert_eq!(
            kept.keys().collect::<Vec<_>>(),
            again.keys().collect::<Vec<_>>()
        );
    }

    #[test]
    fn pronoun_rating_counts() {
        let all = vec![post("u", "I like it"), post("u", "give me that")];
        assert_eq!(pronoun_rating(&all).unwrap(), 1.0);
        let none = vec![post("u", "nothing here")];
        assert_eq!(pronoun_rating(&none).unwrap(), 0.0);
        let quarter = vec![
            post("u", "this is my thing"),
            post("u", "nothing"),
            post("u", "nothing"),
            post("u", "nothing"),
        ];
        assert_eq!(pronoun_rating(&quarter).unwrap(), 0.25);
        assert!(pronoun_rating(&[]).is_err());
    }

    #[test]
    fn split_sizes_determinism_disjoint() {
        let records: Vec<SubjectRecord> = (0..100)
            .map(|i| SubjectRecord {
                subject_id: format!("s{}", i),
                predicate: "p".into(),
                label: i % 2,
                utterances: vec![vec!["tok".into()]],
            })
            .collect();
        let (train, test) = split(&records, 0.1, 42).unwrap();
        assert_eq!(train.len(), 90);
        assert_eq!(test.len(), 10);
        let (train2, test2) = split(&records, 0.1, 42).unwrap();
        assert_eq!(
            train.iter().map(|r| &r.subject_id).collect::<Vec<_>>(),
            train2.iter().map(|r| &r.subject_id).collect::<Vec<_>>()
        );
        assert_eq!(test.len(), test2.len());
        let train_ids: HashSet<_> = train.iter().map(|r| r.subject_id.clone()).collect();
        assert!(test.iter().all(|r| !train_ids.contains(&r.subject_id)));
    }

    #[test]
    fn balanced_batches_uniform_histogram_and_cover() {
        // 4 classes with skewed sizes, one smaller than per_class.
        let mut labels = Vec::new();
        labels.extend(std::iter::repeat(0).take(11));
        labels.extend(std::iter::repeat(1).take(7));
        labels.extend(std::iter::repeat(2).take(2));
        labels.extend(std::iter::repeat(3).take(5));
        let mut sampler = BalancedBatches::new(&labels, 4, 3, 9).unwrap();
        let epoch = sampler.epoch();
        assert_eq!(epoch.len(), 4); // ceil(11/3)
        let mut drawn = HashSet::new();
        for batch in &epoch {
            assert_eq!(batch.len(), 12);
            let mut hist = [0usize; 4];
            for &i in batch {
                hist[labels[i]] += 1;
                drawn.insert(i);
            }
            assert_eq!(hist, [3, 3, 3, 3]);
        }
        // Cover property: every record drawn at least once.
        assert_eq!(drawn.len(), labels.len());
    }

    #[test]
    fn balanced_batches_empty_class_errors() {
        let labels = vec![0, 0, 2];
        let err = BalancedBatches::new(&labels, 3, 3, 0).unwrap_err();
        assert!(err.to_string().contains("class 1"));
    }

    #[test]
    fn windowing_rule() {
        let rec = SubjectRecord {
            subject_id: "s".into(),
            predicate: "p".into(),
            label: 0,
            utterances: (0..9).map(|i| vec![format!("t{}", i)]).collect(),
        };
        let w = window_utterances(&rec, 4, 4).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[0].len(), 4);
        assert_eq!(w[1].len(), 4);
        assert_eq!(w[2].len(), 1);
        let w1 = window_utterances(&rec, 1, 1).unwrap();
        assert_eq!(w1.len(), 9);
    }

    #[test]
    fn synth_corpus_shape_and_determinism() {
        let cfg = SynthConfig {
            num_classes: 4,
            subjects_per_class: 50,
            ..Default::default()
        };
        let (a, schema, _) = synth_corpus(&cfg).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(schema.values.len(), 4);
        let (b, _, _) = synth_corpus(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn synth_zero_noise_is_pure_signal() {
        let cfg = SynthConfig {
            noise_rate: 0.0,
            ..Default::default()
        };
        let (records, _, _) = synth_corpus(&cfg).unwrap();
        for r in &records {
            let prefix = format!("class{}sig", r.label);
            for u in &r.utterances {
                assert!(u.iter().all(|t| t.starts_with(&prefix)));
            }
        }
    }

    #[test]
    fn prepare_record_drops_oov_and_empty_utterances() {
        let table = EmbeddingTable::from_rows(
            vec![("a".into(), vec![1.0, 0.0]), ("b".into(), vec![0.0, 1.0])],
            2,
        )
        .unwrap();
        let rec = SubjectRecord {
            subject_id: "s".into(),
            predicate: "p".into(),
            label: 0,
            utterances: vec![
                vec!["a".into(), "zzz".into(), "b".into()],
                vec!["zzz".into()], // all OOV → fully masked
            ],
        };
        let prep = prepare_record(&rec, &table, &PrepareOptions::default()).unwrap();
        assert_eq!(prep.utterances.len(), 1);
        assert_eq!(prep.utterances[0].tokens, vec!["a", "b"]);
        assert_eq!(prep.utterances[0].matrix.shape, vec![2, 2]);
    }

    #[test]
    fn prepare_record_truncates_utterances() {
        let table = EmbeddingTable::from_rows(vec![("a".into(), vec![1.0])], 1).unwrap();
        let rec = SubjectRecord {
            subject_id: "s".into(),
            predicate: "p".into(),
            label: 0,
            utterances: (0..45).map(|_| vec!["a".into()]).collect(),
        };
        let opts = PrepareOptions {
            max_utterances: 40,
            ..Default::default()
        };
        let prep = prepare_record(&rec, &table, &opts).unwrap();
        assert_eq!(prep.utterances.len(), 40);
        assert!(prepare_record(
            &SubjectRecord {
                subject_id: "e".into(),
                predicate: "p".into(),
                label: 0,
                utterances: vec![],
            },
            &table,
            &opts
        )
        .is_err());
    }

    #[test]
    fn schema_validate_rejects_cross_value_synonym() {
        let mut s = PredicateSchema::new("p", vec!["a".into(), "b".into()]);
        s.synonyms.insert("a".into(), vec!["x".into()]);
        s.synonyms.insert("b".into(), vec!["x".into()]);
        assert!(s.validate().is_err());
    }
}

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PredicateSchema, SubjectRecord, Tokenizer};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::models::RankedPrediction;
use crate::numerics::{AdamState, Graph, NamedTensors, Tensor, Var};

/// Upper-bound scores for a perfect explicit-mention extractor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleScore {
    pub micro_mrr: f64,
    pub accuracy: f64,
    pub subjects: usize,
    pub mentioned: usize,
}

fn contains_term(utterance: &[String], term_tokens: &[String]) -> bool {
    if term_tokens.is_empty() || utterance.len() < term_tokens.len() {
        return false;
    }
    utterance
        .windows(term_tokens.len())
        .any(|w| w.iter().zip(term_tokens).all(|(a, b)| a.eq_ignore_ascii_case(b)))
}

/// Pattern-matching oracle: a subject scores 1 when its gold value (or any
/// synonym) is mentioned in any utterance; otherwise the random-ordering
/// expectation 1/(0.5·|V|) for MRR and 1/|V| for accuracy.
pub fn oracle_score(records: &[SubjectRecord], schema: &PredicateSchema) -> Result<OracleScore> {
    if records.is_empty() {
        return Err(Error::Validation("oracle on empty record set".into()));
    }
    let v = schema.values.len() as f64;
    let mut mrr_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut mentioned = 0usize;
    for r in records {
        let gold = schema
            .values
            .get(r.label)
            .ok_or_else(|| Error::Index(format!("label {} out of schema", r.label)))?;
        let terms: Vec<Vec<String>> = schema
            .terms_for(gold)
            .iter()
            .map(|t| Tokenizer::split_words(t))
            .collect();
        let hit = r
            .utterances
            .iter()
            .any(|u| terms.iter().any(|t| contains_term(u, t)));
        if hit {
            mentioned += 1;
            mrr_sum += 1.0;
            acc_sum += 1.0;
        } else {
            mrr_sum += 1.0 / (0.5 * v);
            acc_sum += 1.0 / v;
        }
    }
    let n = records.len() as f64;
    Ok(OracleScore {
        micro_mrr: mrr_sum / n,
        accuracy: acc_sum / n,
        subjects: records.len(),
        mentioned,
    })
}

fn mean_embedding(table: &EmbeddingTable, tokens: &[String]) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; table.dim];
    let mut count = 0usize;
    for t in tokens {
        if let Some(v) = table.lookup(t) {
            for (a, &x) in acc.iter_mut().zip(v) {
                *a += x;
            }
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Some(acc)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Multi-word attribute values embed as the mean of member-word vectors.
fn value_embeddings(schema: &PredicateSchema, table: &EmbeddingTable) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for value in &schema.values {
        let words = Tokenizer::split_words(value);
        match mean_embedding(table, &words) {
            Some(v) => out.push(v),
            None => missing.push(value.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "attribute values without embeddings: {}",
            missing.join(", ")
        )));
    }
    Ok(out)
}

fn softmax_scores(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Cosine similarity between mean window embeddings and value embeddings,
/// summed over a subject's windows. `windows` holds, per subject, the
/// concatenated token windows produced by `window_utterances`.
pub fn baseline_embedding_similarity(
    subjects: &[(String, Vec<Vec<String>>)],
    schema: &PredicateSchema,
    table: &EmbeddingTable,
) -> Result<Vec<RankedPrediction>> {
    let value_vecs = value_embeddings(schema, table)?;
    let mut out = Vec::new();
    for (subject_id, windows) in subjects {
        let mut summed = vec![0.0; schema.values.len()];
        for window in windows {
            if let Some(rep) = mean_embedding(table, window) {
                for (s, vv) in summed.iter_mut().zip(&value_vecs) {
                    *s += cosine(&rep, vv);
                }
            }
        }
        out.push(RankedPrediction::from_scores(
            subject_id,
            softmax_scores(&summed),
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistantKind {
    Logreg,
    Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistantConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for DistantConfig {
    fn default() -> Self {
        DistantConfig {
            hidden: 100,
            epochs: 50,
            batch: 32,
            lr: 1e-3,
            l2: 2e-7,
            seed: 42,
        }
    }
}

/// A trained distantly supervised window classifier.
#[derive(Debug, Clone)]
pub struct DistantModel {
    pub kind: DistantKind,
    pub num_classes: usize,
    pub params: NamedTensors,
}

impl DistantModel {
    fn forward(&self, g: &mut Graph, vars: &[Var], features: &[f64]) -> Result<Var> {
        let x = g.leaf_vec(features.to_vec())?;
        match self.kind {
            DistantKind::Logreg => {
                let logits = g.affine(vars[0], x, vars[1])?;
                g.softmax(logits)
            }
            DistantKind::Mlp => {
                let h = g.affine(vars[0], x, vars[1])?;
                let h = g.sigmoid(h)?;
                let logits = g.affine(vars[2], h, vars[3])?;
                g.softmax(logits)
            }
        }
    }

    pub fn predict_window(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .params
            .entries
            .iter()
            .map(|e| g.leaf(&e.tensor))
            .collect::<Result<_>>()?;
        let out = self.forward(&mut g, &vars, features)?;
        Ok(g.value(out).to_vec())
    }
}

/// Train a logistic-regression or one-hidden-layer MLP classifier on mean
/// window embeddings with distant (subject-level) labels, then rank each
/// subject by class probabilities summed over its windows.
pub fn baseline_distant(
    train_windows: &[(Vec<f64>, usize)],
    test_subjects: &[(String, Vec<Vec<f64>>)],
    num_classes: usize,
    kind: DistantKind,
    config: &DistantConfig,
) -> Result<(DistantModel, Vec<RankedPrediction>)> {
    if train_windows.is_empty() {
        return Err(Error::Validation("no training windows".into()));
    }
    let classes_present: std::collections::HashSet<usize> =
        train_windows.iter().map(|(_, l)| *l).collect();
    if classes_present.len() < 2 {
        return Err(Error::Validation(
            "degenerate training data: fewer than 2 classes present".into(),
        ));
    }
    let dim = train_windows[0].0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = NamedTensors::default();
    match kind {
        DistantKind::Logreg => {
            params.push(
                "W",
                Tensor::glorot(vec![num_classes, dim], dim, num_classes, &mut rng),
                true,
            );
            params.push("b", Tensor::zeros(vec![num_classes]), false);
        }
        DistantKind::Mlp => {
            let h = config.hidden;
            params.push("W_hidden", Tensor::glorot(vec![h, dim], dim, h, &mut rng), true);
            params.push("b_hidden", Tensor::zeros(vec![h]), false);
            params.push(
                "W_out",
                Tensor::glorot(vec![num_classes, h], h, num_classes, &mut rng),
                true,
            );
            params.push("b_out", Tensor::zeros(vec![num_classes]), false);
        }
    }
    let mut model = DistantModel {
        kind,
        num_classes,
        params,
    };
    let mut adam = AdamState::with_lr(&model.params, config.lr);
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            let mut g = Graph::new();
            let vars: Vec<Var> = model
                .params
                .entries
                .iter()
                .map(|e| g.leaf(&e.tensor))
                .collect::<Result<_>>()?;
            let mut ces = Vec::new();
            for &i in chunk {
                let (features, label) = &train_windows[i];
                let out = model.forward(&mut g, &vars, features)?;
                ces.push(g.cross_entropy(out, *label)?);
            }
            let data_loss = g.mean_of(&ces)?;
            let decay: Vec<Var> = model
                .params
                .entries
                .iter()
                .zip(&vars)
                .filter(|(e, _)| e.decay)
                .map(|(_, &v)| v)
                .collect();
            let penalty = g.l2_penalty(&decay, config.l2)?;
            let loss = g.add(data_loss, penalty)?;
            g.backward(loss)?;
            model.params.zero_grads();
            g.accumulate_into(&vars, &mut model.params);
            adam.step(&mut model.params)?;
        }
    }

    let mut predictions = Vec::new();
    for (subject_id, windows) in test_subjects {
        let mut summed = vec![0.0; num_classes];
        for w in windows {
            for (s, p) in summed.iter_mut().zip(model.predict_window(w)?) {
                *s += p;
            }
        }
        let total: f64 = summed.iter().sum();
        if total > 0.0 {
            summed.iter_mut().for_each(|s| *s /= total);
        }
        predictions.push(RankedPrediction::from_scores(subject_id, summed));
    }
    Ok((model, predictions))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineCnnConfig {
    pub filters: usize,
    pub kernel_width: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BaselineCnnConfig {
    fn default() -> Self {
        BaselineCnnConfig {
            filters: 64,
            kernel_width: 2,
            dropout: 0.5,
            epochs: 20,
            batch: 32,
            lr: 1e-3,
            seed: 42,
        }
    }
}

/// Per-utterance CNN classifier: conv → tanh → max pool (k=1) → dropout →
/// FC softmax, trained with distant per-utterance labels. Subject label is
/// the majority vote over utterances, ties broken by summed probability.
pub struct UtteranceCnn {
    pub config: BaselineCnnConfig,
    pub num_classes: usize,
    pub params: NamedTensors,
}

impl UtteranceCnn {
    fn new(config: BaselineCnnConfig, num_classes: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let f = config.filters;
        let n = config.kernel_width;
        let mut params = NamedTensors::default();
        params.push("kernels", Tensor::glorot(vec![f, n, dim], n * dim, f, &mut rng), true);
        params.push("conv_bias", Tensor::zeros(vec![f]), false);
        params.push(
            "W_out",
            Tensor::glorot(vec![num_classes, f], f, num_classes, &mut rng),
            true,
        );
        params.push("b_out", Tensor::zeros(vec![num_classes]), false);
        UtteranceCnn {
            config,
            num_classes,
            params,
        }
    }

    /// Forward one utterance matrix. At inference `dropout_rng` is `None`
    /// and the pass is deterministic.
    fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        matrix: &Tensor,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let n = self.config.kernel_width;
        let rows = matrix.shape[0];
        let seq = if rows < n {
            let d = matrix.shape[1];
            let mut data = matrix.data.clone();
            data.resize(n * d, 0.0);
            g.leaf(&Tensor::new(vec![n, d], data)?)?
        } else {
            g.leaf(matrix)?
        };
        let conv = g.conv1d(seq, vars[0], vars[1])?;
        let act = g.tanh(conv)?;
        let pooled = g.kmax_pool(act, 1)?;
        let mut features = g.flatten(pooled)?;
        if let Some(rng) = dropout_rng {
            let p = self.config.dropout;
            let mask: Vec<f64> = (0..self.config.filters)
                .map(|_| {
                    if rng.gen::<f64>() < p {
                        0.0
                    } else {
                        1.0 / (1.0 - p)
                    }
                })
                .collect();
            features = g.mul_mask(features, mask)?;
        }
        let logits = g.affine(vars[2], features, vars[3])?;
        g.softmax(logits)
    }

    pub fn predict_utterance(&self, matrix: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .params
            .entries
            .iter()
            .map(|e| g.leaf(&e.tensor))
            .collect::<Result<_>>()?;
        let out = self.forward(&mut g, &vars, matrix, None)?;
        Ok(g.value(out).to_vec())
    }

    /// Majority vote over per-utterance top-1 labels; ties resolved by the
    /// summed class probabilities.
    pub fn predict_subject(&self, subject_id: &str, utterances: &[Tensor]) -> Result<RankedPrediction> {
        let mut votes = vec![0usize; self.num_classes];
        let mut summed = vec![0.0; self.num_classes];
        for m in utterances {
            let probs = self.predict_utterance(m)?;
            let top = RankedPrediction::from_scores("", probs.clone()).top();
            votes[top] += 1;
            for (s, p) in summed.iter_mut().zip(probs) {
                *s += p;
            }
        }
        let max_votes = votes.iter().copied().max().unwrap_or(0);
        // Score classes by (votes, summed probability); normalize for output.
        let total: f64 = summed.iter().sum();
        let scores: Vec<f64> = votes
            .iter()
            .zip(&summed)
            .map(|(&v, &s)| v as f64 + if total > 0.0 { s / total } else { 0.0 })
            .collect();
        let norm: f64 = scores.iter().sum();
        let scores: Vec<f64> = scores.iter().map(|s| s / norm).collect();
        let _ = max_votes;
        Ok(RankedPrediction::from_scores(subject_id, scores))
    }
}

/// Train the per-utterance CNN baseline on (utterance matrix, label) pairs.
pub fn baseline_utterance_cnn(
    train_utterances: &[(Tensor, usize)],
    num_classes: usize,
    dim: usize,
    config: &BaselineCnnConfig,
) -> Result<UtteranceCnn> {
    if train_utterances.is_empty() {
        return Err(Error::Validation("no training utterances".into()));
    }
    let model = UtteranceCnn::new(config.clone(), num_classes, dim);
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(model.config.seed.wrapping_add(2));
    let mut adam = AdamState::with_lr(&model.params, model.config.lr);
    let mut order: Vec<usize> = (0..train_utterances.len()).collect();
    for _ in 0..model.config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(model.config.batch) {
            let mut g = Graph::new();
            let vars: Vec<Var> = model
                .params
                .entries
                .iter()
                .map(|e| g.leaf(&e.tensor))
                .collect::<Result<_>>()?;
            let mut ces = Vec::new();
            for &i in chunk {
                let (matrix, label) = &train_utterances[i];
                let out = model.forward(&mut g, &vars, matrix, Some(&mut dropout_rng))?;
                ces.push(g.cross_entropy(out, *label)?);
            }
            let loss = g.mean_of(&ces)?;
            g.backward(loss)?;
            model.params.zero_grads();
            g.accumulate_into(&vars, &mut model.params);
            adam.step(&mut model.params)?;
        }
    }
    Ok(model)
}

//! Post-hoc explanations: attention weight reports for the attention-bearing
//! model variants, and per-class top terms from single-token probes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{prepare_record, SubjectRecord};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::models::{HamModel, Variant};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceAttention {
    pub weight: f64,
    pub tokens: Vec<String>,
    /// Per-token attention weights; empty when the variant has no term-level
    /// attention.
    pub term_weights: Vec<f64>,
}

/// Attention weights for one subject, heaviest utterance first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionReport {
    pub subject_id: String,
    pub predicted: usize,
    pub scores: Vec<f64>,
    pub utterances: Vec<UtteranceAttention>,
}

/// Run a forward pass and collect attention weights. Only the attention
/// variants are supported; `avg` and `cnn` have no weights to report.
pub fn attention_report(
    model: &HamModel,
    record: &SubjectRecord,
    table: &EmbeddingTable,
) -> Result<AttentionReport> {
    match model.variant {
        Variant::TwoAttn | Variant::CnnAttn => {}
        other => {
            return Err(Error::Config(format!(
                "variant {} has no attention weights",
                other
            )))
        }
    }
    let prep = prepare_record(record, table, &model.config.prepare_options())?;
    if prep.utterances.is_empty() {
        return Err(Error::Validation(format!(
            "subject {} has no usable utterances",
            record.subject_id
        )));
    }
    let (pred, attn) = model.predict_with_attention(&prep)?;
    let mut utterances: Vec<UtteranceAttention> = prep
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| UtteranceAttention {
            weight: attn.utterance_weights[i],
            tokens: u.tokens.clone(),
            term_weights: attn.term_weights.get(i).cloned().unwrap_or_default(),
        })
        .collect();
    utterances.sort_by(|a, b| b.weight.partial_cmp(&a.weight).unwrap());
    Ok(AttentionReport {
        subject_id: prep.subject_id.clone(),
        predicted: pred.top(),
        scores: pred.scores,
        utterances,
    })
}

impl AttentionReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    /// One row per utterance: subject, weight, tokens annotated with their
    /// term weights when available.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "subject\tutterance_weight\ttokens")?;
        for u in &self.utterances {
            let rendered = if u.term_weights.is_empty() {
                u.tokens.join(" ")
            } else {
                u.tokens
                    .iter()
                    .zip(&u.term_weights)
                    .map(|(t, a)| format!("{}({:.4})", t, a))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            writeln!(w, "{}\t{:.6}\t{}", self.subject_id, u.weight, rendered)?;
        }
        Ok(())
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_tsv(f)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassTopTerms {
    pub class: usize,
    /// (term, probability of this class for the single-term probe), best
    /// first.
    pub terms: Vec<(String, f64)>,
}

/// Probe the model with every vocabulary token as a one-token, one-utterance
/// subject and keep the `top_n` tokens with the highest probability per
/// class.
pub fn top_terms_per_class(
    model: &HamModel,
    table: &EmbeddingTable,
    top_n: usize,
) -> Result<Vec<ClassTopTerms>> {
    if top_n == 0 {
        return Err(Error::Param("top_n must be positive".into()));
    }
    let mut per_class: Vec<Vec<(String, f64)>> = vec![Vec::new(); model.num_classes];
    let opts = model.config.prepare_options();
    for token in table.tokens() {
        let record = SubjectRecord {
            subject_id: format!("probe:{}", token),
            predicate: String::new(),
            label: 0,
            utterances: vec![vec![token.clone()]],
        };
        let prep = prepare_record(&record, table, &opts)?;
        if prep.utterances.is_empty() {
            continue;
        }
        let pred = model.predict(&prep)?;
        for (c, &p) in pred.scores.iter().enumerate() {
            per_class[c].push((token.clone(), p));
        }
    }
    let mut out = Vec::with_capacity(model.num_classes);
    for (class, mut terms) in per_class.into_iter().enumerate() {
        terms.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        terms.truncate(top_n);
        out.push(ClassTopTerms { class, terms });
    }
    Ok(out)
}

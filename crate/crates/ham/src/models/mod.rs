//! The four attribute-ranking model variants and their training loop,
//! plus the distantly supervised baselines and the pattern-matching oracle.

mod baselines;

pub use baselines::{
    baseline_distant, baseline_embedding_similarity, baseline_utterance_cnn, oracle_score,
    BaselineCnnConfig, DistantConfig, DistantKind, OracleScore,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    prepare_record, BalancedBatches, PredicateSchema, PrepareOptions, PreparedRecord,
    SubjectRecord, Truncate,
};
use crate::embeddings::{EmbeddingTable, OovPolicy};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Graph, NamedTensors, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Avg,
    TwoAttn,
    Cnn,
    CnnAttn,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(Variant::Avg),
            "two_attn" | "2attn" => Ok(Variant::TwoAttn),
            "cnn" => Ok(Variant::Cnn),
            "cnn_attn" => Ok(Variant::CnnAttn),
            other => Err(Error::Config(format!("unknown variant {:?}", other))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Avg => "avg",
            Variant::TwoAttn => "two_attn",
            Variant::Cnn => "cnn",
            Variant::CnnAttn => "cnn_attn",
        };
        write!(f, "{}", s)
    }
}

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HamConfig {
    /// Embedding dimension.
    pub dim: usize,
    /// Max utterances per subject (N).
    pub max_utterances: usize,
    /// Max terms per utterance (M).
    pub max_terms: usize,
    /// Hidden layer width of the averaging variant.
    pub hidden: usize,
    /// Convolution filter count.
    pub filters: usize,
    pub kernel_width: usize,
    pub pool_k: usize,
    pub epochs: usize,
    /// Minibatch size for binary predicates.
    pub batch_subjects: usize,
    /// Records per class per batch for multi-valued predicates.
    pub per_class: usize,
    pub l2: f64,
    pub lr: f64,
    pub seed: u64,
    pub ablate_term_attention: bool,
    pub ablate_utterance_attention: bool,
    pub truncate: Truncate,
    pub oov: OovPolicy,
}

impl HamConfig {
    /// Published defaults per variant (300-d embeddings, N=M=40).
    pub fn defaults(variant: Variant) -> Self {
        let (filters, epochs) = match variant {
            Variant::Avg => (0, 30),
            Variant::Cnn => (178, 40),
            Variant::TwoAttn => (0, 150),
            Variant::CnnAttn => (128, 50),
        };
        HamConfig {
            dim: 300,
            max_utterances: 40,
            max_terms: 40,
            hidden: 100,
            filters,
            kernel_width: 2,
            pool_k: 5,
            epochs,
            batch_subjects: 4,
            per_class: 3,
            l2: 2e-7,
            lr: 1e-3,
            seed: 42,
            ablate_term_attention: false,
            ablate_utterance_attention: false,
            truncate: Truncate::Head,
            oov: OovPolicy::Drop,
        }
    }

    pub fn validate(&self, variant: Variant) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("max_utterances", self.max_utterances),
            ("max_terms", self.max_terms),
            ("epochs", self.epochs),
            ("batch_subjects", self.batch_subjects),
            ("per_class", self.per_class),
            ("pool_k", self.pool_k),
            ("kernel_width", self.kernel_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{} must be positive", name)));
            }
        }
        match variant {
            Variant::Avg if self.hidden == 0 => {
                Err(Error::Config("hidden must be positive for avg".into()))
            }
            Variant::Cnn | Variant::CnnAttn if self.filters == 0 => {
                Err(Error::Config("filters must be positive for cnn variants".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn prepare_options(&self) -> PrepareOptions {
        PrepareOptions {
            max_utterances: self.max_utterances,
            max_terms: self.max_terms,
            truncate: self.truncate,
            oov: self.oov,
        }
    }
}

/// Probability scores for one subject plus the descending ranking
/// (ties broken by ascending class index).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub subject_id: String,
    pub scores: Vec<f64>,
    pub ranking: Vec<usize>,
}

impl RankedPrediction {
    pub fn from_scores(subject_id: &str, scores: Vec<f64>) -> Self {
        let mut ranking: Vec<usize> = (0..scores.len()).collect();
        ranking.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        RankedPrediction {
            subject_id: subject_id.to_string(),
            scores,
            ranking,
        }
    }

    pub fn top(&self) -> usize {
        self.ranking[0]
    }
}

/// Attention weights captured during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct AttnCapture {
    /// One weight per real utterance.
    pub utterance_weights: Vec<f64>,
    /// Per real utterance, one weight per real term (two_attn only).
    pub term_weights: Vec<Vec<f64>>,
}

/// A model variant with its learned parameters.
#[derive(Debug, Clone)]
pub struct HamModel {
    pub variant: Variant,
    pub config: HamConfig,
    pub num_classes: usize,
    pub params: NamedTensors,
}

impl HamModel {
    /// Glorot-uniform seeded initialization.
    pub fn new(variant: Variant, config: HamConfig, num_classes: usize) -> Result<Self> {
        config.validate(variant)?;
        if num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let v = num_classes;
        let mut params = NamedTensors::default();
        match variant {
            Variant::Avg => {
                let h = config.hidden;
                params.push("W_hidden", Tensor::glorot(vec![h, d], d, h, &mut rng), true);
                params.push("b_hidden", Tensor::zeros(vec![h]), false);
                params.push("W_out", Tensor::glorot(vec![v, h], h, v, &mut rng), true);
                params.push("b_out", Tensor::zeros(vec![v]), false);
            }
            Variant::TwoAttn => {
                params.push("W_term", Tensor::glorot(vec![1, d], d, 1, &mut rng), true);
                params.push("b_term", Tensor::zeros(vec![1]), false);
                params.push("W_utter", Tensor::glorot(vec![1, d], d, 1, &mut rng), true);
                params.push("b_utter", Tensor::zeros(vec![1]), false);
                params.push("W_out", Tensor::glorot(vec![v, d], d, v, &mut rng), true);
                params.push("b_out", Tensor::zeros(vec![v]), false);
            }
            Variant::Cnn => {
                let f = config.filters;
                let n = config.kernel_width;
                let k = config.pool_k;
                params.push(
                    "kernels",
                    Tensor::glorot(vec![f, n, d], n * d, f, &mut rng),
                    true,
                );
                params.push("conv_bias", Tensor::zeros(vec![f]), false);
                let width = f * k * k;
                params.push("W_out", Tensor::glorot(vec![v, width], width, v, &mut rng), true);
                params.push("b_out", Tensor::zeros(vec![v]), false);
            }
            Variant::CnnAttn => {
                let f = config.filters;
                let n = config.kernel_width;
                let k = config.pool_k;
                params.push(
                    "kernels",
                    Tensor::glorot(vec![f, n, d], n * d, f, &mut rng),
                    true,
                );
                params.push("conv_bias", Tensor::zeros(vec![f]), false);
                let rep = f * k;
                params.push("W_utter", Tensor::glorot(vec![1, rep], rep, 1, &mut rng), true);
                params.push("b_utter", Tensor::zeros(vec![1]), false);
                params.push("W_out", Tensor::glorot(vec![v, rep], rep, v, &mut rng), true);
                params.push("b_out", Tensor::zeros(vec![v]), false);
            }
        }
        Ok(HamModel {
            variant,
            config,
            num_classes,
            params,
        })
    }

    fn var_of(&self, vars: &[Var], name: &str) -> Result<Var> {
        self.params
            .entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {}", name)))
    }

    /// CNN utterance representation: conv → ReLU → k-max → flatten
    /// (filter-major, pool-slot-minor). Pads the matrix with zero rows up to
    /// the kernel width when the utterance is shorter.
    fn cnn_utterance_rep(&self, g: &mut Graph, vars: &[Var], matrix: &Tensor) -> Result<Var> {
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
        let kernels = self.var_of(vars, "kernels")?;
        let bias = self.var_of(vars, "conv_bias")?;
        let conv = g.conv1d(seq, kernels, bias)?;
        let act = g.relu(conv)?;
        let pooled = g.kmax_pool(act, self.config.pool_k)?;
        g.flatten_col_major(pooled)
    }

    /// Attention weights over stacked rows via a scalar scoring layer:
    /// softmax(sigmoid(W·row + b)).
    fn attention_over(
        &self,
        g: &mut Graph,
        vars: &[Var],
        rows: Var,
        w_name: &str,
        b_name: &str,
    ) -> Result<Var> {
        let w = self.var_of(vars, w_name)?;
        let b = self.var_of(vars, b_name)?;
        let scores = g.affine_rows(rows, w, b)?;
        let scores = g.sigmoid(scores)?;
        let flat = g.flatten(scores)?;
        g.softmax(flat)
    }

    /// Build the forward pass on `g` and return the probability vector var.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        record: &PreparedRecord,
        mut capture: Option<&mut AttnCapture>,
    ) -> Result<Var> {
        if record.utterances.is_empty() {
            return Err(Error::Validation(format!(
                "subject {} has no usable utterances",
                record.subject_id
            )));
        }
        let w_out = self.var_of(vars, "W_out")?;
        let b_out = self.var_of(vars, "b_out")?;

        let subject_rep = match self.variant {
            Variant::Avg => {
                let mut reps = Vec::new();
                for utt in &record.utterances {
                    let rows = g.leaf(&utt.matrix)?;
                    let mask = vec![true; utt.matrix.shape[0]];
                    reps.push(g.masked_mean(rows, &mask)?);
                }
                let stacked = g.stack_rows(&reps)?;
                let mask = vec![true; reps.len()];
                let pooled = g.masked_mean(stacked, &mask)?;
                let w_h = self.var_of(vars, "W_hidden")?;
                let b_h = self.var_of(vars, "b_hidden")?;
                let hidden = g.affine(w_h, pooled, b_h)?;
                g.sigmoid(hidden)?
            }
            Variant::TwoAttn => {
                let mut reps = Vec::new();
                for utt in &record.utterances {
                    let rows = g.leaf(&utt.matrix)?;
                    let rep = if self.config.ablate_term_attention {
                        let mask = vec![true; utt.matrix.shape[0]];
                        if let Some(cap) = capture.as_deref_mut() {
                            cap.term_weights
                                .push(vec![1.0 / mask.len() as f64; mask.len()]);
                        }
                        g.masked_mean(rows, &mask)?
                    } else {
                        let alpha = self.attention_over(g, vars, rows, "W_term", "b_term")?;
                        if let Some(cap) = capture.as_deref_mut() {
                            cap.term_weights.push(g.value(alpha).to_vec());
                        }
                        g.attn_avg(rows, alpha)?
                    };
                    reps.push(rep);
                }
                let stacked = g.stack_rows(&reps)?;
                if self.config.ablate_utterance_attention {
                    let mask = vec![true; reps.len()];
                    if let Some(cap) = capture.as_deref_mut() {
                        cap.utterance_weights = vec![1.0 / reps.len() as f64; reps.len()];
                    }
                    g.masked_mean(stacked, &mask)?
                } else {
                    let alpha = self.attention_over(g, vars, stacked, "W_utter", "b_utter")?;
                    if let Some(cap) = capture.as_deref_mut() {
                        cap.utterance_weights = g.value(alpha).to_vec();
                    }
                    g.attn_avg(stacked, alpha)?
                }
            }
            Variant::Cnn => {
                let mut reps = Vec::new();
                for utt in &record.utterances {
                    reps.push(self.cnn_utterance_rep(g, vars, &utt.matrix)?);
                }
                let stacked = g.stack_rows(&reps)?;
                let pooled = g.kmax_pool(stacked, self.config.pool_k)?;
                g.flatten_col_major(pooled)?
            }
            Variant::CnnAttn => {
                let mut reps = Vec::new();
                for utt in &record.utterances {
                    reps.push(self.cnn_utterance_rep(g, vars, &utt.matrix)?);
                }
                let stacked = g.stack_rows(&reps)?;
                let alpha = self.attention_over(g, vars, stacked, "W_utter", "b_utter")?;
                if let Some(cap) = capture.as_deref_mut() {
                    cap.utterance_weights = g.value(alpha).to_vec();
                }
                g.attn_avg(stacked, alpha)?
            }
        };
        let logits = g.affine(w_out, subject_rep, b_out)?;
        g.softmax(logits)
    }

    /// Inference on a prepared record.
    pub fn predict(&self, record: &PreparedRecord) -> Result<RankedPrediction> {
        let (pred, _) = self.predict_with_attention(record)?;
        Ok(pred)
    }

    pub fn predict_with_attention(
        &self,
        record: &PreparedRecord,
    ) -> Result<(RankedPrediction, AttnCapture)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .params
            .entries
            .iter()
            .map(|e| g.leaf(&e.tensor))
            .collect::<Result<_>>()?;
        let mut capture = AttnCapture::default();
        let out = self.forward(&mut g, &vars, record, Some(&mut capture))?;
        Ok((
            RankedPrediction::from_scores(&record.subject_id, g.value(out).to_vec()),
            capture,
        ))
    }

    fn decay_vars(&self, vars: &[Var]) -> Vec<Var> {
        self.params
            .entries
            .iter()
            .zip(vars)
            .filter(|(e, _)| e.decay)
            .map(|(_, &v)| v)
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub skipped_records: usize,
}

/// Train a fresh model on the given records.
///
/// Multi-valued predicates use class-balanced batches; binary predicates are
/// balanced by downsampling the majority class and batched by subject count.
pub fn train(
    records: &[SubjectRecord],
    schema: &PredicateSchema,
    table: &EmbeddingTable,
    variant: Variant,
    config: &HamConfig,
) -> Result<(HamModel, TrainReport)> {
    if records.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    let num_classes = schema.values.len();
    let mut config = config.clone();
    config.dim = table.dim;
    let model = HamModel::new(variant, config, num_classes)?;
    train_model(model, records, table)
}

/// Continue training an existing (typically freshly initialized) model.
pub fn train_model(
    mut model: HamModel,
    records: &[SubjectRecord],
    table: &EmbeddingTable,
) -> Result<(HamModel, TrainReport)> {
    let opts = model.config.prepare_options();
    let mut prepared = Vec::new();
    let mut skipped = 0usize;
    for r in records {
        if r.label >= model.num_classes {
            return Err(Error::Index(format!(
                "subject {} label {} out of {} classes",
                r.subject_id, r.label, model.num_classes
            )));
        }
        match prepare_record(r, table, &opts) {
            Ok(p) if !p.utterances.is_empty() => prepared.push(p),
            _ => skipped += 1,
        }
    }
    if prepared.is_empty() {
        return Err(Error::Validation("no trainable records after preparation".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed.wrapping_add(1));
    let batches_fn: Box<dyn FnMut() -> Vec<Vec<usize>>> = if model.num_classes == 2 {
        // Subject-balanced: downsample the majority class once, seeded.
        let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (i, p) in prepared.iter().enumerate() {
            by_class[p.label].push(i);
        }
        if by_class[0].is_empty() || by_class[1].is_empty() {
            return Err(Error::Config("a class has no training records".into()));
        }
        use rand::seq::SliceRandom;
        let keep = by_class[0].len().min(by_class[1].len());
        let mut pool = Vec::new();
        for side in &mut by_class {
            side.shuffle(&mut rng);
            pool.extend_from_slice(&side[..keep]);
        }
        let batch = model.config.batch_subjects;
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(model.config.seed.wrapping_add(2));
        Box::new(move || -> Vec<Vec<usize>> {
            let mut epoch_pool = pool.clone();
            epoch_pool.shuffle(&mut shuffle_rng);
            epoch_pool.chunks(batch).map(|c| c.to_vec()).collect()
        })
    } else {
        let labels: Vec<usize> = prepared.iter().map(|p| p.label).collect();
        let mut sampler = BalancedBatches::new(
            &labels,
            model.num_classes,
            model.config.per_class,
            model.config.seed.wrapping_add(3),
        )?;
        Box::new(move || sampler.epoch())
    };
    let mut batches_fn = batches_fn;

    let mut adam = AdamState::with_lr(&model.params, model.config.lr);
    let mut epoch_losses = Vec::with_capacity(model.config.epochs);
    for epoch in 0..model.config.epochs {
        let mut losses = Vec::new();
        for batch in batches_fn() {
            let loss = run_batch(&mut model, &prepared, &batch, &mut adam)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged(epoch),
                    other => other,
                })?;
            losses.push(loss);
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged(epoch));
        }
        epoch_losses.push(mean);
    }
    Ok((
        model,
        TrainReport {
            epoch_losses,
            skipped_records: skipped,
        },
    ))
}

fn run_batch(
    model: &mut HamModel,
    prepared: &[PreparedRecord],
    batch: &[usize],
    adam: &mut AdamState,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = model
        .params
        .entries
        .iter()
        .map(|e| g.leaf(&e.tensor))
        .collect::<Result<_>>()?;
    let mut ces = Vec::with_capacity(batch.len());
    for &i in batch {
        let out = model.forward(&mut g, &vars, &prepared[i], None)?;
        ces.push(g.cross_entropy(out, prepared[i].label)?);
    }
    let data_loss = g.mean_of(&ces)?;
    let decay = model.decay_vars(&vars);
    let penalty = g.l2_penalty(&decay, model.config.l2)?;
    let loss = g.add(data_loss, penalty)?;
    let loss_value = g.value(loss)[0];
    g.backward(loss)?;
    model.params.zero_grads();
    g.accumulate_into(&vars, &mut model.params);
    adam.step(&mut model.params)?;
    Ok(loss_value)
}

/// Evaluate a model on records, returning one prediction per usable record.
pub fn predict_all(
    model: &HamModel,
    records: &[SubjectRecord],
    table: &EmbeddingTable,
) -> Result<Vec<(RankedPrediction, usize)>> {
    let opts = model.config.prepare_options();
    let mut out = Vec::new();
    for r in records {
        let prep = prepare_record(r, table, &opts)?;
        if prep.utterances.is_empty() {
            continue;
        }
        out.push((model.predict(&prep)?, r.label));
    }
    Ok(out)
}

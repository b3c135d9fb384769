use crate::error::{Error, Result};
use crate::numerics::{Tensor, PROB_CLAMP};

/// Handle to a node on the gradient tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// Wx + b with w: [o×i], x: [i], b: [o].
    Affine { w: Var, x: Var, b: Var },
    /// Per-row affine: rows [L×i] -> [L×o].
    AffineRows { rows: Var, w: Var, b: Var },
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    SoftmaxMasked { x: Var, mask: Vec<bool> },
    /// Valid cross-correlation: seq [M×d], kernels [F×n×d], bias [F] -> [(M-n+1)×F].
    Conv1d { seq: Var, kernels: Var, bias: Var },
    /// Per-column top-k in original order; `kept[f]` holds the source row
    /// of each output slot, or usize::MAX for a zero pad slot.
    KMaxPool { seq: Var, kept: Vec<Vec<usize>> },
    MaskedMean { rows: Var, mask: Vec<bool> },
    AttnAvg { rows: Var, alpha: Var },
    CrossEntropy { pred: Var, gold: usize },
    SumSq(Var),
    Scale { x: Var, c: f64 },
    Add(Var, Var),
    StackRows(Vec<Var>),
    /// out[i] = x[index[i]]; gradient scatter-adds back.
    Reorder { x: Var, index: Vec<usize> },
    MeanOf(Vec<Var>),
    /// Elementwise multiply by a fixed mask (dropout, already inverse-scaled).
    MulMask { x: Var, mask: Vec<f64> },
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
}

/// Single-use gradient tape. Build a forward pass, call [`Graph::backward`]
/// once, read gradients off the vars, then discard.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    grads: Vec<Vec<f64>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, what: &str) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        self.nodes.push(Node { value, shape, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last `backward` loss w.r.t. `v`. Empty before backward.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    /// Register a constant or parameter value as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf, "leaf")
    }

    pub fn leaf_vec(&mut self, data: Vec<f64>) -> Result<Var> {
        let shape = vec![data.len()];
        self.push(data, shape, Op::Leaf, "leaf")
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            0 => (0, 0),
            1 => (1, s[0]),
            _ => (s[0], s[1]),
        }
    }

    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (o, i) = self.dims2(w);
        if self.nodes[x.0].value.len() != i || self.nodes[b.0].value.len() != o {
            return Err(Error::Shape(format!(
                "affine: w {:?}, x {:?}, b {:?}",
                self.nodes[w.0].shape, self.nodes[x.0].shape, self.nodes[b.0].shape
            )));
        }
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; o];
        for r in 0..o {
            let mut acc = bv[r];
            for c in 0..i {
                acc += wv[r * i + c] * xv[c];
            }
            out[r] = acc;
        }
        self.push(out, vec![o], Op::Affine { w, x, b }, "affine")
    }

    /// Apply the same affine map to every row of `rows`.
    pub fn affine_rows(&mut self, rows: Var, w: Var, b: Var) -> Result<Var> {
        let (l, din) = self.dims2(rows);
        let (o, i) = self.dims2(w);
        if din != i || self.nodes[b.0].value.len() != o {
            return Err(Error::Shape(format!(
                "affine_rows: rows {:?}, w {:?}",
                self.nodes[rows.0].shape, self.nodes[w.0].shape
            )));
        }
        let rv = &self.nodes[rows.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; l * o];
        for t in 0..l {
            for r in 0..o {
                let mut acc = bv[r];
                for c in 0..i {
                    acc += wv[r * i + c] * rv[t * din + c];
                }
                out[t * o + r] = acc;
            }
        }
        self.push(out, vec![l, o], Op::AffineRows { rows, w, b }, "affine_rows")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, Op::Sigmoid(x), "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, Op::Tanh(x), "tanh")
    }

    /// Softmax over unmasked positions; masked positions are exactly zero.
    pub fn softmax_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.len() != mask.len() {
            return Err(Error::Shape(format!(
                "softmax_masked: {} values, {} mask entries",
                xv.len(),
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptySupport("softmax_masked: all positions masked".into()));
        }
        let max = xv
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out = vec![0.0; xv.len()];
        let mut z = 0.0;
        for (i, &v) in xv.iter().enumerate() {
            if mask[i] {
                out[i] = (v - max).exp();
                z += out[i];
            }
        }
        for o in &mut out {
            *o /= z;
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push(
            out,
            shape,
            Op::SoftmaxMasked {
                x,
                mask: mask.to_vec(),
            },
            "softmax_masked",
        )
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mask = vec![true; self.nodes[x.0].value.len()];
        self.softmax_masked(x, &mask)
    }

    /// Valid (no padding) cross-correlation along the term axis.
    pub fn conv1d(&mut self, seq: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (m, d) = self.dims2(seq);
        let ks = &self.nodes[kernels.0].shape;
        if ks.len() != 3 {
            return Err(Error::Shape(format!("conv1d: kernels shape {:?}", ks)));
        }
        let (f, n, kd) = (ks[0], ks[1], ks[2]);
        if kd != d {
            return Err(Error::Shape(format!(
                "conv1d: kernel dim {} vs seq dim {}",
                kd, d
            )));
        }
        if self.nodes[bias.0].value.len() != f {
            return Err(Error::Shape("conv1d: bias length != filter count".into()));
        }
        if m < n {
            return Err(Error::Validation(format!(
                "conv1d: sequence length {} shorter than kernel width {}",
                m, n
            )));
        }
        let sv = &self.nodes[seq.0].value;
        let kv = &self.nodes[kernels.0].value;
        let bv = &self.nodes[bias.0].value;
        let l = m - n + 1;
        let mut out = vec![0.0; l * f];
        for t in 0..l {
            for fi in 0..f {
                let mut acc = bv[fi];
                for i in 0..n {
                    for j in 0..d {
                        acc += sv[(t + i) * d + j] * kv[fi * n * d + i * d + j];
                    }
                }
                out[t * f + fi] = acc;
            }
        }
        self.push(out, vec![l, f], Op::Conv1d { seq, kernels, bias }, "conv1d")
    }

    /// Per column (filter), keep the k largest values in their original row
    /// order; pad the tail with zeros when there are fewer than k rows.
    pub fn kmax_pool(&mut self, seq: Var, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(Error::Param("kmax_pool: k must be >= 1".into()));
        }
        let (l, f) = self.dims2(seq);
        let sv = &self.nodes[seq.0].value;
        let mut out = vec![0.0; k * f];
        let mut kept = vec![Vec::with_capacity(k); f];
        for fi in 0..f {
            // Indices of the k largest values, ties broken toward earlier rows.
            let mut idx: Vec<usize> = (0..l).collect();
            idx.sort_by(|&a, &b| {
                sv[b * f + fi]
                    .partial_cmp(&sv[a * f + fi])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut top: Vec<usize> = idx.into_iter().take(k).collect();
            top.sort_unstable();
            for (slot, src) in top.iter().enumerate() {
                out[slot * f + fi] = sv[src * f + fi];
                kept[fi].push(*src);
            }
            while kept[fi].len() < k {
                kept[fi].push(usize::MAX);
            }
        }
        self.push(out, vec![k, f], Op::KMaxPool { seq, kept }, "kmax_pool")
    }

    pub fn masked_mean(&mut self, rows: Var, mask: &[bool]) -> Result<Var> {
        let (l, d) = self.dims2(rows);
        if mask.len() != l {
            return Err(Error::Shape(format!(
                "masked_mean: {} rows, {} mask entries",
                l,
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptySupport("masked_mean: all rows masked".into()));
        }
        let rv = &self.nodes[rows.0].value;
        let mut out = vec![0.0; d];
        for (i, &m) in mask.iter().enumerate() {
            if m {
                for j in 0..d {
                    out[j] += rv[i * d + j];
                }
            }
        }
        for o in &mut out {
            *o /= count as f64;
        }
        self.push(
            out,
            vec![d],
            Op::MaskedMean {
                rows,
                mask: mask.to_vec(),
            },
            "masked_mean",
        )
    }

    /// Weighted row sum: out = Σ_i rows_i · alpha_i.
    pub fn attn_avg(&mut self, rows: Var, alpha: Var) -> Result<Var> {
        let (l, d) = self.dims2(rows);
        if self.nodes[alpha.0].value.len() != l {
            return Err(Error::Shape(format!(
                "attn_avg: {} rows, {} weights",
                l,
                self.nodes[alpha.0].value.len()
            )));
        }
        let rv = &self.nodes[rows.0].value;
        let av = &self.nodes[alpha.0].value;
        let mut out = vec![0.0; d];
        for i in 0..l {
            for j in 0..d {
                out[j] += rv[i * d + j] * av[i];
            }
        }
        self.push(out, vec![d], Op::AttnAvg { rows, alpha }, "attn_avg")
    }

    /// -log(pred[gold]) with probabilities clamped at `PROB_CLAMP`.
    pub fn cross_entropy(&mut self, pred: Var, gold: usize) -> Result<Var> {
        let pv = &self.nodes[pred.0].value;
        if gold >= pv.len() {
            return Err(Error::Index(format!(
                "cross_entropy: gold {} out of {} classes",
                gold,
                pv.len()
            )));
        }
        let sum: f64 = pv.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "cross_entropy: prediction sums to {}, not a distribution",
                sum
            )));
        }
        let loss = -pv[gold].max(PROB_CLAMP).ln();
        self.push(vec![loss], vec![1], Op::CrossEntropy { pred, gold }, "cross_entropy")
    }

    pub fn sum_sq(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].value.iter().map(|v| v * v).sum();
        self.push(vec![s], vec![1], Op::SumSq(x), "sum_sq")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, Op::Scale { x, c }, "scale")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].value.len() != self.nodes[b.0].value.len() {
            return Err(Error::Shape("add: length mismatch".into()));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, Op::Add(a, b), "add")
    }

    /// Stack same-length vectors into an [L×d] matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::EmptySupport("stack_rows: no rows".into()));
        }
        let d = self.nodes[rows[0].0].value.len();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if self.nodes[r.0].value.len() != d {
                return Err(Error::Shape("stack_rows: ragged rows".into()));
            }
            out.extend_from_slice(&self.nodes[r.0].value);
        }
        let l = rows.len();
        self.push(out, vec![l, d], Op::StackRows(rows.to_vec()), "stack_rows")
    }

    /// Gather elements of `x` into a vector: out[i] = x[index[i]].
    pub fn reorder(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(index.len());
        for &i in &index {
            if i >= xv.len() {
                return Err(Error::Index(format!("reorder: index {} out of {}", i, xv.len())));
            }
            out.push(xv[i]);
        }
        let n = out.len();
        self.push(out, vec![n], Op::Reorder { x, index }, "reorder")
    }

    /// Flatten a [k×F] matrix filter-major (each filter's pool slots
    /// consecutive).
    pub fn flatten_col_major(&mut self, x: Var) -> Result<Var> {
        let (k, f) = self.dims2(x);
        let mut index = Vec::with_capacity(k * f);
        for fi in 0..f {
            for slot in 0..k {
                index.push(slot * f + fi);
            }
        }
        self.reorder(x, index)
    }

    /// Flatten row-major (identity on data, drops matrix shape).
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        self.reorder(x, (0..n).collect())
    }

    /// Arithmetic mean of scalar vars.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::EmptySupport("mean_of: no terms".into()));
        }
        let mut acc = 0.0;
        for &x in xs {
            acc += self.nodes[x.0].value[0];
        }
        acc /= xs.len() as f64;
        self.push(vec![acc], vec![1], Op::MeanOf(xs.to_vec()), "mean_of")
    }

    /// Elementwise multiply by a fixed (non-differentiated) mask.
    pub fn mul_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if self.nodes[x.0].value.len() != mask.len() {
            return Err(Error::Shape("mul_mask: length mismatch".into()));
        }
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(out, shape, Op::MulMask { x, mask }, "mul_mask")
    }

    /// L2 penalty λ·Σ‖w‖² over the given vars (weights only by convention).
    pub fn l2_penalty(&mut self, weights: &[Var], lambda: f64) -> Result<Var> {
        if lambda < 0.0 {
            return Err(Error::Param("l2_penalty: negative lambda".into()));
        }
        let mut acc: Option<Var> = None;
        for &w in weights {
            let s = self.sum_sq(w)?;
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s)?,
            });
        }
        match acc {
            None => self.leaf_vec(vec![0.0]),
            Some(a) => self.scale(a, lambda),
        }
    }

    /// Reverse pass from a scalar loss. Consumes the tape: a second call
    /// without a new forward pass is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape("backward: loss must be scalar".into()));
        }
        self.consumed = true;
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        self.grads[loss.0][0] = 1.0;

        for id in (0..self.nodes.len()).rev() {
            if self.grads[id].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut self.grads[id]);
            match &self.nodes[id].op {
                Op::Leaf => {
                    self.grads[id] = g;
                    continue;
                }
                Op::Affine { w, x, b } => {
                    let (w, x, b) = (*w, *x, *b);
                    let (o, i) = self.dims2(w);
                    let wv = self.nodes[w.0].value.clone();
                    let xv = self.nodes[x.0].value.clone();
                    for r in 0..o {
                        self.grads[b.0][r] += g[r];
                        for c in 0..i {
                            self.grads[w.0][r * i + c] += g[r] * xv[c];
                            self.grads[x.0][c] += g[r] * wv[r * i + c];
                        }
                    }
                }
                Op::AffineRows { rows, w, b } => {
                    let (rows, w, b) = (*rows, *w, *b);
                    let (l, din) = self.dims2(rows);
                    let (o, i) = self.dims2(w);
                    let wv = self.nodes[w.0].value.clone();
                    let rv = self.nodes[rows.0].value.clone();
                    for t in 0..l {
                        for r in 0..o {
                            let gr = g[t * o + r];
                            if gr == 0.0 {
                                continue;
                            }
                            self.grads[b.0][r] += gr;
                            for c in 0..i {
                                self.grads[w.0][r * i + c] += gr * rv[t * din + c];
                                self.grads[rows.0][t * din + c] += gr * wv[r * i + c];
                            }
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let yv = self.nodes[id].value.clone();
                    for (i, &y) in yv.iter().enumerate() {
                        self.grads[x.0][i] += g[i] * y * (1.0 - y);
                    }
                }
                Op::Relu(x) => {
                    let x = *x;
                    let xv = self.nodes[x.0].value.clone();
                    for (i, &v) in xv.iter().enumerate() {
                        if v > 0.0 {
                            self.grads[x.0][i] += g[i];
                        }
                    }
                }
                Op::Tanh(x) => {
                    let x = *x;
                    let yv = self.nodes[id].value.clone();
                    for (i, &y) in yv.iter().enumerate() {
                        self.grads[x.0][i] += g[i] * (1.0 - y * y);
                    }
                }
                Op::SoftmaxMasked { x, mask } => {
                    let x = *x;
                    let mask = mask.clone();
                    let yv = self.nodes[id].value.clone();
                    let dot: f64 = yv
                        .iter()
                        .zip(&g)
                        .zip(&mask)
                        .filter(|(_, &m)| m)
                        .map(|((&y, &gi), _)| y * gi)
                        .sum();
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            self.grads[x.0][i] += yv[i] * (g[i] - dot);
                        }
                    }
                }
                Op::Conv1d { seq, kernels, bias } => {
                    let (seq, kernels, bias) = (*seq, *kernels, *bias);
                    let (_, d) = self.dims2(seq);
                    let ks = self.nodes[kernels.0].shape.clone();
                    let (f, n) = (ks[0], ks[1]);
                    let l = self.nodes[id].shape[0];
                    let sv = self.nodes[seq.0].value.clone();
                    let kv = self.nodes[kernels.0].value.clone();
                    for t in 0..l {
                        for fi in 0..f {
                            let gr = g[t * f + fi];
                            if gr == 0.0 {
                                continue;
                            }
                            self.grads[bias.0][fi] += gr;
                            for i in 0..n {
                                for j in 0..d {
                                    self.grads[kernels.0][fi * n * d + i * d + j] +=
                                        gr * sv[(t + i) * d + j];
                                    self.grads[seq.0][(t + i) * d + j] +=
                                        gr * kv[fi * n * d + i * d + j];
                                }
                            }
                        }
                    }
                }
                Op::KMaxPool { seq, kept } => {
                    let seq = *seq;
                    let kept = kept.clone();
                    let f = kept.len();
                    for (fi, slots) in kept.iter().enumerate() {
                        for (slot, &src) in slots.iter().enumerate() {
                            if src != usize::MAX {
                                self.grads[seq.0][src * f + fi] += g[slot * f + fi];
                            }
                        }
                    }
                }
                Op::MaskedMean { rows, mask } => {
                    let rows = *rows;
                    let mask = mask.clone();
                    let d = self.nodes[id].value.len();
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            for j in 0..d {
                                self.grads[rows.0][i * d + j] += g[j] / count;
                            }
                        }
                    }
                }
                Op::AttnAvg { rows, alpha } => {
                    let (rows, alpha) = (*rows, *alpha);
                    let (l, d) = self.dims2(rows);
                    let rv = self.nodes[rows.0].value.clone();
                    let av = self.nodes[alpha.0].value.clone();
                    for i in 0..l {
                        for j in 0..d {
                            self.grads[rows.0][i * d + j] += g[j] * av[i];
                            self.grads[alpha.0][i] += g[j] * rv[i * d + j];
                        }
                    }
                }
                Op::CrossEntropy { pred, gold } => {
                    let (pred, gold) = (*pred, *gold);
                    let p = self.nodes[pred.0].value[gold];
                    if p > PROB_CLAMP {
                        self.grads[pred.0][gold] += -g[0] / p;
                    }
                }
                Op::SumSq(x) => {
                    let x = *x;
                    let xv = self.nodes[x.0].value.clone();
                    for (i, &v) in xv.iter().enumerate() {
                        self.grads[x.0][i] += 2.0 * v * g[0];
                    }
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    for (i, &gi) in g.iter().enumerate() {
                        self.grads[x.0][i] += gi * c;
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    for (i, &gi) in g.iter().enumerate() {
                        self.grads[a.0][i] += gi;
                        self.grads[b.0][i] += gi;
                    }
                }
                Op::StackRows(rows) => {
                    let rows = rows.clone();
                    let d = self.nodes[id].shape[1];
                    for (i, r) in rows.iter().enumerate() {
                        for j in 0..d {
                            self.grads[r.0][j] += g[i * d + j];
                        }
                    }
                }
                Op::Reorder { x, index } => {
                    let x = *x;
                    let index = index.clone();
                    for (i, &src) in index.iter().enumerate() {
                        self.grads[x.0][src] += g[i];
                    }
                }
                Op::MeanOf(xs) => {
                    let xs = xs.clone();
                    let n = xs.len() as f64;
                    for x in &xs {
                        self.grads[x.0][0] += g[0] / n;
                    }
                }
                Op::MulMask { x, mask } => {
                    let x = *x;
                    let mask = mask.clone();
                    for (i, &m) in mask.iter().enumerate() {
                        self.grads[x.0][i] += g[i] * m;
                    }
                }
            }
        }
        Ok(())
    }

    /// Add gradients accumulated on the given leaves back into the tensors
    /// they were registered from.
    pub fn accumulate_into(&self, vars: &[Var], params: &mut crate::numerics::NamedTensors) {
        for (v, e) in vars.iter().zip(params.entries.iter_mut()) {
            if let Some(gbuf) = &mut e.tensor.grad {
                for (gi, &s) in gbuf.iter_mut().zip(self.grad(*v)) {
                    *gi += s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn affine_identity_and_forced_cases() {
        let mut g = Graph::new();
        let w = g.leaf(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        let x = g.leaf(&t(vec![2], vec![1.0, 2.0])).unwrap();
        let b = g.leaf(&t(vec![2], vec![0.0, 0.0])).unwrap();
        let y = g.affine(w, x, b).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0]);

        let w = g.leaf(&t(vec![1, 2], vec![1.0, 1.0])).unwrap();
        let x = g.leaf(&t(vec![2], vec![1.0, 1.0])).unwrap();
        let b = g.leaf(&t(vec![1], vec![1.0])).unwrap();
        let y = g.affine(w, x, b).unwrap();
        assert_eq!(g.value(y), &[3.0]);
    }

    #[test]
    fn affine_matches_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Independent brute-force oracle.
        let mut expect = vec![0.0; 3];
        for r in 0..3 {
            expect[r] = b[r];
            for c in 0..4 {
                expect[r] += w[r * 4 + c] * x[c];
            }
        }
        let mut g = Graph::new();
        let wv = g.leaf(&t(vec![3, 4], w)).unwrap();
        let xv = g.leaf(&t(vec![4], x)).unwrap();
        let bv = g.leaf(&t(vec![3], b)).unwrap();
        let y = g.affine(wv, xv, bv).unwrap();
        for (a, e) in g.value(y).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_shape_mismatch_errors() {
        let mut g = Graph::new();
        let w = g.leaf(&t(vec![2, 3], vec![0.0; 6])).unwrap();
        let x = g.leaf(&t(vec![2], vec![0.0; 2])).unwrap();
        let b = g.leaf(&t(vec![2], vec![0.0; 2])).unwrap();
        assert!(matches!(g.affine(w, x, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_masked_examples() {
        let mut g = Graph::new();
        let x = g.leaf_vec(vec![0.0, 0.0, 0.0]).unwrap();
        let y = g.softmax_masked(x, &[true, true, true]).unwrap();
        for v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let x = g.leaf_vec(vec![5.0, 0.0]).unwrap();
        let y = g.softmax_masked(x, &[true, false]).unwrap();
        assert_eq!(g.value(y), &[1.0, 0.0]);

        let x = g.leaf_vec(vec![1.0]).unwrap();
        assert!(matches!(
            g.softmax_masked(x, &[false]),
            Err(Error::EmptySupport(_))
        ));
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf_vec(vec![0.0]).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y), &[0.5]);
    }

    #[test]
    fn conv1d_hand_oracle() {
        let mut g = Graph::new();
        let seq = g.leaf(&t(vec![3, 1], vec![1.0, 2.0, 3.0])).unwrap();
        let k = g.leaf(&t(vec![1, 2, 1], vec![1.0, 1.0])).unwrap();
        let b = g.leaf_vec(vec![0.0]).unwrap();
        let y = g.conv1d(seq, k, b).unwrap();
        assert_eq!(g.value(y), &[3.0, 5.0]);
    }

    #[test]
    fn conv1d_zero_seq_passes_bias() {
        let mut g = Graph::new();
        let seq = g.leaf(&t(vec![4, 2], vec![0.0; 8])).unwrap();
        let k = g.leaf(&t(vec![1, 2, 2], vec![1.0; 4])).unwrap();
        let b = g.leaf_vec(vec![0.7]).unwrap();
        let y = g.conv1d(seq, k, b).unwrap();
        assert!(g.value(y).iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn conv1d_short_sequence_errors() {
        let mut g = Graph::new();
        let seq = g.leaf(&t(vec![1, 1], vec![1.0])).unwrap();
        let k = g.leaf(&t(vec![1, 2, 1], vec![1.0, 1.0])).unwrap();
        let b = g.leaf_vec(vec![0.0]).unwrap();
        assert!(g.conv1d(seq, k, b).is_err());
    }

    #[test]
    fn conv1d_matches_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (m, n, d, f) = (6, 2, 3, 4);
        let seq: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ker: Vec<f64> = (0..f * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l = m - n + 1;
        let mut expect = vec![0.0; l * f];
        for tt in 0..l {
            for fi in 0..f {
                let mut acc = bias[fi];
                for i in 0..n {
                    for j in 0..d {
                        acc += seq[(tt + i) * d + j] * ker[fi * n * d + i * d + j];
                    }
                }
                expect[tt * f + fi] = acc;
            }
        }
        let mut g = Graph::new();
        let sv = g.leaf(&t(vec![m, d], seq)).unwrap();
        let kv = g.leaf(&t(vec![f, n, d], ker)).unwrap();
        let bv = g.leaf(&t(vec![f], bias)).unwrap();
        let y = g.conv1d(sv, kv, bv).unwrap();
        for (a, e) in g.value(y).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn kmax_keeps_order_and_pads() {
        let mut g = Graph::new();
        let seq = g
            .leaf(&t(vec![5, 1], vec![3.0, 1.0, 4.0, 1.0, 5.0]))
            .unwrap();
        let y = g.kmax_pool(seq, 2).unwrap();
        assert_eq!(g.value(y), &[4.0, 5.0]);

        let y1 = g.kmax_pool(seq, 1).unwrap();
        assert_eq!(g.value(y1), &[5.0]);

        let short = g.leaf(&t(vec![2, 1], vec![2.0, 7.0])).unwrap();
        let yp = g.kmax_pool(short, 5).unwrap();
        assert_eq!(g.value(yp), &[2.0, 7.0, 0.0, 0.0, 0.0]);

        assert!(matches!(g.kmax_pool(seq, 0), Err(Error::Param(_))));
    }

    #[test]
    fn masked_mean_examples() {
        let mut g = Graph::new();
        let rows = g.leaf(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        let y = g.masked_mean(rows, &[true, true]).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);

        let y = g.masked_mean(rows, &[false, true]).unwrap();
        assert_eq!(g.value(y), &[0.0, 1.0]);

        // Masked zero padding must not alter the result.
        let padded = g
            .leaf(&t(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]))
            .unwrap();
        let yp = g.masked_mean(padded, &[true, true, false, false]).unwrap();
        assert_eq!(g.value(yp), &[0.5, 0.5]);
    }

    #[test]
    fn attn_avg_uniform_equals_masked_mean() {
        let mut g = Graph::new();
        let rows = g
            .leaf(&t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
            .unwrap();
        let alpha = g.leaf_vec(vec![1.0 / 3.0; 3]).unwrap();
        let a = g.attn_avg(rows, alpha).unwrap();
        let m = g.masked_mean(rows, &[true; 3]).unwrap();
        for (x, y) in g.value(a).iter().zip(g.value(m)) {
            assert!((x - y).abs() < 1e-12);
        }

        let onehot = g.leaf_vec(vec![0.0, 1.0, 0.0]).unwrap();
        let s = g.attn_avg(rows, onehot).unwrap();
        assert_eq!(g.value(s), &[3.0, 4.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let p = g.leaf_vec(vec![1.0, 0.0, 0.0]).unwrap();
        let l = g.cross_entropy(p, 0).unwrap();
        assert_eq!(g.value(l), &[0.0]);

        let u = g.leaf_vec(vec![0.25; 4]).unwrap();
        let l = g.cross_entropy(u, 2).unwrap();
        assert!((g.value(l)[0] - 4.0f64.ln()).abs() < 1e-12);

        // Tiny probability is clamped, loss stays finite.
        let p = g.leaf_vec(vec![1e-20, 1.0 - 1e-20]).unwrap();
        let l = g.cross_entropy(p, 0).unwrap();
        assert!((g.value(l)[0] - (-PROB_CLAMP.ln())).abs() < 1e-9);

        let p = g.leaf_vec(vec![0.5, 0.5]).unwrap();
        assert!(matches!(g.cross_entropy(p, 7), Err(Error::Index(_))));
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![1], vec![3.0])).unwrap();
        let y = g.sum_sq(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), &[6.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![1], vec![3.0])).unwrap();
        let y = g.sum_sq(x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn disconnected_parameter_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![1], vec![3.0])).unwrap();
        let unused = g.leaf(&t(vec![2], vec![1.0, 2.0])).unwrap();
        let y = g.sum_sq(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(unused), &[0.0, 0.0]);
    }

    #[test]
    fn l2_penalty_examples() {
        let mut g = Graph::new();
        let w = g.leaf(&t(vec![1], vec![3.0])).unwrap();
        let p = g.l2_penalty(&[w], 1.0).unwrap();
        assert_eq!(g.value(p), &[9.0]);
        let z = g.l2_penalty(&[w], 0.0).unwrap();
        assert_eq!(g.value(z), &[0.0]);
        let none = g.l2_penalty(&[], 2e-7).unwrap();
        assert_eq!(g.value(none), &[0.0]);
    }
}

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { x: ValueId, c: f32 },
    AddBiasRows { x: ValueId, bias: ValueId },
    AddChannelBias { x: ValueId, bias: ValueId },
    Matmul { a: ValueId, b: ValueId },
    Transpose { x: ValueId },
    Conv2d { input: ValueId, kernels: ValueId, stride: usize, padding: usize },
    MeanPoolGlobal { x: ValueId },
    MeanRows { x: ValueId },
    SumRows { x: ValueId },
    Sum { x: ValueId },
    Relu { x: ValueId },
    SoftmaxRows { x: ValueId },
    LayerNormRows { x: ValueId, gain: ValueId, bias: ValueId, eps: f32 },
    NormalizeRows { x: ValueId },
    Embed { table: ValueId, indices: Vec<usize> },
    ConcatRows { inputs: Vec<ValueId> },
    ConcatCols { inputs: Vec<ValueId> },
    SliceRows { x: ValueId, start: usize },
    Reshape { x: ValueId },
    CrossEntropyRows { logits: ValueId, targets: Vec<usize> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    tracked: bool,
    op: Op,
}

/// Wengert tape: records forward operations, replays them in reverse for
/// gradients. One tape per evaluation; `backward` consumes it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

// Norms below this are treated as zero rows by `normalize_rows`.
const NORM_EPS: f32 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a tensor as a leaf. Gradients propagate into it iff the tensor
    /// is marked `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
            .expect("leaf values are finite by construction")
    }

    /// Record raw data as an untracked leaf (inputs that need no gradient).
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<ValueId> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("input", format!("shape {shape:?} vs {} values", data.len())));
        }
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: ValueId) -> &[f32] {
        &self.nodes[id.0].data
    }

    /// Gradient accumulated for `id`, if any flowed to it during `backward`.
    pub fn grad(&self, id: ValueId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, tracked: bool, op: Op) -> Result<ValueId> {
        debug_assert_eq!(numel(&shape), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { shape, data, grad: None, tracked, op });
        Ok(id)
    }

    fn tracked(&self, id: ValueId) -> bool {
        self.nodes[id.0].tracked
    }

    fn any_tracked(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|&id| self.tracked(id))
    }

    fn rows_cols(&self, id: ValueId, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(id) {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected rank 1 or 2, got {s:?}"))),
        }
    }

    // ── Elementwise and broadcast ops ──────────────────────────────────

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data: Vec<f32> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let tracked = self.any_tracked(&[a, b]);
        self.push(self.shape(a).to_vec(), data, tracked, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data: Vec<f32> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let tracked = self.any_tracked(&[a, b]);
        self.push(self.shape(a).to_vec(), data, tracked, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: ValueId, c: f32) -> Result<ValueId> {
        let data: Vec<f32> = self.value(x).iter().map(|v| v * c).collect();
        let tracked = self.tracked(x);
        self.push(self.shape(x).to_vec(), data, tracked, Op::Scale { x, c })
    }

    /// `[n×d] + [d]`: add a bias vector to every row.
    pub fn add_bias_rows(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (_, d) = self.rows_cols(x, "add_bias_rows")?;
        if self.shape(bias) != [d] {
            return Err(Error::shape(
                "add_bias_rows",
                format!("bias {:?} vs row width {d}", self.shape(bias)),
            ));
        }
        let b = self.value(bias).to_vec();
        let data: Vec<f32> =
            self.value(x).iter().enumerate().map(|(i, v)| v + b[i % d]).collect();
        let tracked = self.any_tracked(&[x, bias]);
        self.push(self.shape(x).to_vec(), data, tracked, Op::AddBiasRows { x, bias })
    }

    /// `[c×h×w] + [c]`: add a per-channel constant.
    pub fn add_channel_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (c, hw) = match self.shape(x) {
            [c, h, w] => (*c, h * w),
            s => return Err(Error::shape("add_channel_bias", format!("expected rank 3, got {s:?}"))),
        };
        if self.shape(bias) != [c] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} vs {c} channels", self.shape(bias)),
            ));
        }
        let b = self.value(bias).to_vec();
        let data: Vec<f32> =
            self.value(x).iter().enumerate().map(|(i, v)| v + b[i / hw]).collect();
        let tracked = self.any_tracked(&[x, bias]);
        self.push(self.shape(x).to_vec(), data, tracked, Op::AddChannelBias { x, bias })
    }

    // ── Linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = match self.shape(a) {
            [m, k] => (*m, *k),
            s => return Err(Error::shape("matmul", format!("lhs must be rank 2, got {s:?}"))),
        };
        let (k2, n) = match self.shape(b) {
            [k2, n] => (*k2, *n),
            s => return Err(Error::shape("matmul", format!("rhs must be rank 2, got {s:?}"))),
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0f32; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let tracked = self.any_tracked(&[a, b]);
        self.push(vec![m, n], out, tracked, Op::Matmul { a, b })
    }

    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId> {
        let (r, c) = match self.shape(x) {
            [r, c] => (*r, *c),
            s => return Err(Error::shape("transpose", format!("expected rank 2, got {s:?}"))),
        };
        let v = self.value(x);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let tracked = self.tracked(x);
        self.push(vec![c, r], out, tracked, Op::Transpose { x })
    }

    /// 2-D cross-correlation over `[c_in×h×w]` with kernels `[c_out×c_in×kh×kw]`.
    pub fn conv2d(
        &mut self,
        input: ValueId,
        kernels: ValueId,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId> {
        let (ci, h, w) = match self.shape(input) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::shape("conv2d", format!("input must be rank 3, got {s:?}"))),
        };
        let (co, ci2, kh, kw) = match self.shape(kernels) {
            [co, ci2, kh, kw] => (*co, *ci2, *kh, *kw),
            s => return Err(Error::shape("conv2d", format!("kernels must be rank 4, got {s:?}"))),
        };
        if ci != ci2 {
            return Err(Error::shape("conv2d", format!("input channels {ci} vs kernel {ci2}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive".to_string()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0f32; co * ho * wo];
        conv2d_forward(
            self.value(input),
            self.value(kernels),
            &mut out,
            ConvDims { ci, h, w, co, kh, kw, ho, wo, stride, padding },
        );
        let tracked = self.any_tracked(&[input, kernels]);
        self.push(vec![co, ho, wo], out, tracked, Op::Conv2d { input, kernels, stride, padding })
    }

    // ── Reductions ─────────────────────────────────────────────────────

    /// `[c×h×w] -> [c]`: arithmetic mean per channel.
    pub fn mean_pool_global(&mut self, x: ValueId) -> Result<ValueId> {
        let (c, hw) = match self.shape(x) {
            [c, h, w] => (*c, h * w),
            s => return Err(Error::shape("mean_pool_global", format!("expected rank 3, got {s:?}"))),
        };
        let v = self.value(x);
        let mut out = vec![0.0f32; c];
        for ch in 0..c {
            let mut acc = 0.0f32;
            for p in 0..hw {
                acc += v[ch * hw + p];
            }
            out[ch] = acc / hw as f32;
        }
        let tracked = self.tracked(x);
        self.push(vec![c], out, tracked, Op::MeanPoolGlobal { x })
    }

    /// `[n×d] -> [d]`: mean over rows.
    pub fn mean_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let (n, d) = self.rows_cols(x, "mean_rows")?;
        let v = self.value(x);
        let mut out = vec![0.0f32; d];
        for i in 0..n {
            for j in 0..d {
                out[j] += v[i * d + j];
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f32);
        let tracked = self.tracked(x);
        self.push(vec![d], out, tracked, Op::MeanRows { x })
    }

    /// `[n×d] -> [n]`: sum over each row.
    pub fn sum_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let (n, d) = self.rows_cols(x, "sum_rows")?;
        let v = self.value(x);
        let out: Vec<f32> = (0..n).map(|i| v[i * d..(i + 1) * d].iter().sum()).collect();
        let tracked = self.tracked(x);
        self.push(vec![n], out, tracked, Op::SumRows { x })
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let total: f32 = self.value(x).iter().sum();
        let tracked = self.tracked(x);
        self.push(vec![], vec![total], tracked, Op::Sum { x })
    }

    // ── Nonlinearities ─────────────────────────────────────────────────

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        let data: Vec<f32> = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let tracked = self.tracked(x);
        self.push(self.shape(x).to_vec(), data, tracked, Op::Relu { x })
    }

    /// Max-shifted softmax over the last dimension (each row independently).
    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let (n, d) = self.rows_cols(x, "softmax")?;
        let v = self.value(x);
        let mut data = vec![0.0f32; n * d];
        for i in 0..n {
            softmax_row(&v[i * d..(i + 1) * d], &mut data[i * d..(i + 1) * d]);
        }
        let tracked = self.tracked(x);
        self.push(self.shape(x).to_vec(), data, tracked, Op::SoftmaxRows { x })
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: ValueId, gain: ValueId, bias: ValueId, eps: f32) -> Result<ValueId> {
        let (n, d) = self.rows_cols(x, "layer_norm")?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?} / bias {:?} vs width {d}", self.shape(gain), self.shape(bias)),
            ));
        }
        let v = self.value(x);
        let g = self.value(gain).to_vec();
        let b = self.value(bias).to_vec();
        let mut data = vec![0.0f32; n * d];
        for i in 0..n {
            let row = &v[i * d..(i + 1) * d];
            let (mean, inv_std) = row_moments(row, eps);
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let tracked = self.any_tracked(&[x, gain, bias]);
        self.push(self.shape(x).to_vec(), data, tracked, Op::LayerNormRows { x, gain, bias, eps })
    }

    /// L2-normalize each row; rows with (near-)zero norm map to zero rows.
    pub fn normalize_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let (n, d) = self.rows_cols(x, "normalize_rows")?;
        let v = self.value(x);
        let mut data = vec![0.0f32; n * d];
        for i in 0..n {
            let row = &v[i * d..(i + 1) * d];
            let norm = row.iter().map(|a| a * a).sum::<f32>().sqrt();
            if norm > NORM_EPS {
                for j in 0..d {
                    data[i * d + j] = row[j] / norm;
                }
            }
        }
        let tracked = self.tracked(x);
        self.push(self.shape(x).to_vec(), data, tracked, Op::NormalizeRows { x })
    }

    // ── Structure ops ──────────────────────────────────────────────────

    /// Gather rows of `table` (`[v×d]`) by index, as a `[n×d]` matrix.
    pub fn embed(&mut self, table: ValueId, indices: &[usize]) -> Result<ValueId> {
        let (v, d) = match self.shape(table) {
            [v, d] => (*v, *d),
            s => return Err(Error::shape("embed", format!("table must be rank 2, got {s:?}"))),
        };
        if indices.is_empty() {
            return Err(Error::shape("embed", "empty index list".to_string()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embed", format!("index {bad} outside table of {v} rows")));
        }
        let tv = self.value(table);
        let mut data = vec![0.0f32; indices.len() * d];
        for (i, &idx) in indices.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&tv[idx * d..(idx + 1) * d]);
        }
        let tracked = self.tracked(table);
        self.push(vec![indices.len(), d], data, tracked, Op::Embed { table, indices: indices.to_vec() })
    }

    /// Stack inputs vertically. Rank-1 values count as single rows; all
    /// inputs must share the row width.
    pub fn concat_rows(&mut self, inputs: &[ValueId]) -> Result<ValueId> {
        if inputs.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs".to_string()));
        }
        let (_, d) = self.rows_cols(inputs[0], "concat_rows")?;
        let mut total_rows = 0;
        for &id in inputs {
            let (r, w) = self.rows_cols(id, "concat_rows")?;
            if w != d {
                return Err(Error::shape("concat_rows", format!("row widths {d} vs {w}")));
            }
            total_rows += r;
        }
        let mut data = Vec::with_capacity(total_rows * d);
        for &id in inputs {
            data.extend_from_slice(self.value(id));
        }
        let tracked = self.any_tracked(inputs);
        self.push(vec![total_rows, d], data, tracked, Op::ConcatRows { inputs: inputs.to_vec() })
    }

    /// Concatenate rank-2 inputs along columns: `[n×a] ‖ [n×b] -> [n×(a+b)]`.
    pub fn concat_cols(&mut self, inputs: &[ValueId]) -> Result<ValueId> {
        if inputs.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs".to_string()));
        }
        let (n, _) = self.rows_cols(inputs[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let (r, w) = self.rows_cols(id, "concat_cols")?;
            if r != n {
                return Err(Error::shape("concat_cols", format!("row counts {n} vs {r}")));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0f32; n * total];
        for i in 0..n {
            let mut off = 0;
            for (&id, &w) in inputs.iter().zip(&widths) {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&self.value(id)[i * w..(i + 1) * w]);
                off += w;
            }
        }
        let tracked = self.any_tracked(inputs);
        self.push(vec![n, total], data, tracked, Op::ConcatCols { inputs: inputs.to_vec() })
    }

    /// Take `len` consecutive rows starting at `start`.
    pub fn slice_rows(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (n, d) = self.rows_cols(x, "slice_rows")?;
        if start + len > n || len == 0 {
            return Err(Error::shape("slice_rows", format!("rows {start}..{} of {n}", start + len)));
        }
        let data = self.value(x)[start * d..(start + len) * d].to_vec();
        let tracked = self.tracked(x);
        self.push(vec![len, d], data, tracked, Op::SliceRows { x, start })
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} ({} values) to {shape:?}", self.shape(x), self.value(x).len()),
            ));
        }
        let data = self.value(x).to_vec();
        let tracked = self.tracked(x);
        self.push(shape, data, tracked, Op::Reshape { x })
    }

    /// Per-row softmax cross-entropy against integer targets:
    /// `out[i] = logsumexp(logits[i]) - logits[i][targets[i]]`.
    pub fn cross_entropy_rows(&mut self, logits: ValueId, targets: &[usize]) -> Result<ValueId> {
        let (n, c) = match self.shape(logits) {
            [n, c] => (*n, *c),
            s => return Err(Error::shape("cross_entropy_rows", format!("expected rank 2, got {s:?}"))),
        };
        if targets.len() != n {
            return Err(Error::shape("cross_entropy_rows", format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("cross_entropy_rows", format!("target {bad} >= {c} classes")));
        }
        let v = self.value(logits);
        let mut out = vec![0.0f32; n];
        for i in 0..n {
            let row = &v[i * c..(i + 1) * c];
            out[i] = log_sum_exp(row) - row[targets[i]];
        }
        let tracked = self.tracked(logits);
        self.push(vec![n], out, tracked, Op::CrossEntropyRows { logits, targets: targets.to_vec() })
    }

    /// Scaled dot-product attention: `softmax(Q·Kᵀ/√d)·V`.
    pub fn attention(&mut self, queries: ValueId, keys: ValueId, values: ValueId) -> Result<ValueId> {
        let (_, dq) = self.rows_cols(queries, "attention")?;
        let (nk, dk) = self.rows_cols(keys, "attention")?;
        let (nv, dv) = self.rows_cols(values, "attention")?;
        if dq != dk || nk != nv {
            return Err(Error::shape(
                "attention",
                format!("queries {:?}, keys {:?}, values {:?}", self.shape(queries), self.shape(keys), self.shape(values)),
            ));
        }
        let _ = dv;
        let kt = self.transpose(keys)?;
        let scores = self.matmul(queries, kt)?;
        let scaled = self.scale(scores, 1.0 / (dq as f32).sqrt())?;
        let weights = self.softmax(scaled)?;
        self.matmul(weights, values)
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Accumulate `∂loss/∂node` for every tracked node reachable from `loss`.
    /// Consumes the tape: a second call is an error.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape".to_string()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].tracked {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: ValueId, delta: &[f32]) {
        if !self.nodes[id.0].tracked {
            return;
        }
        let n = self.nodes[id.0].data.len();
        debug_assert_eq!(delta.len(), n);
        let grad = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn backward_op(&mut self, out_idx: usize, op: &Op) {
        let g = self.nodes[out_idx].grad.clone().expect("caller checked grad");
        match *op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(a, &g);
                self.accumulate(b, &g);
            }
            Op::Mul { a, b } => {
                if self.tracked(a) {
                    let da: Vec<f32> = g.iter().zip(self.value(b)).map(|(gi, bi)| gi * bi).collect();
                    self.accumulate(a, &da);
                }
                if self.tracked(b) {
                    let db: Vec<f32> = g.iter().zip(self.value(a)).map(|(gi, ai)| gi * ai).collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f32> = g.iter().map(|gi| gi * c).collect();
                self.accumulate(x, &dx);
            }
            Op::AddBiasRows { x, bias } => {
                self.accumulate(x, &g);
                if self.tracked(bias) {
                    let d = self.shape(bias)[0];
                    let mut db = vec![0.0f32; d];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % d] += gi;
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::AddChannelBias { x, bias } => {
                self.accumulate(x, &g);
                if self.tracked(bias) {
                    let c = self.shape(bias)[0];
                    let hw = g.len() / c;
                    let mut db = vec![0.0f32; c];
                    for (i, gi) in g.iter().enumerate() {
                        db[i / hw] += gi;
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.tracked(a) {
                    // dA = g · Bᵀ
                    let bv = self.value(b);
                    let mut da = vec![0.0f32; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != 0.0 {
                                for l in 0..k {
                                    da[i * k + l] += gij * bv[l * n + j];
                                }
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.tracked(b) {
                    // dB = Aᵀ · g
                    let av = self.value(a);
                    let mut db = vec![0.0f32; k * n];
                    for i in 0..m {
                        for l in 0..k {
                            let ail = av[i * k + l];
                            if ail != 0.0 {
                                for j in 0..n {
                                    db[l * n + j] += ail * g[i * n + j];
                                }
                            }
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::Transpose { x } => {
                let (c, r) = (self.shape(ValueId(out_idx))[0], self.shape(ValueId(out_idx))[1]);
                let mut dx = vec![0.0f32; r * c];
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] = g[i * r + j];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Conv2d { input, kernels, stride, padding } => {
                let (ci, h, w) = {
                    let s = self.shape(input);
                    (s[0], s[1], s[2])
                };
                let (co, kh, kw) = {
                    let s = self.shape(kernels);
                    (s[0], s[2], s[3])
                };
                let (ho, wo) = {
                    let s = self.shape(ValueId(out_idx));
                    (s[1], s[2])
                };
                let dims = ConvDims { ci, h, w, co, kh, kw, ho, wo, stride, padding };
                if self.tracked(input) {
                    let mut di = vec![0.0f32; ci * h * w];
                    conv2d_backward_input(&g, self.value(kernels), &mut di, dims);
                    self.accumulate(input, &di);
                }
                if self.tracked(kernels) {
                    let mut dk = vec![0.0f32; co * ci * kh * kw];
                    conv2d_backward_kernels(&g, self.value(input), &mut dk, dims);
                    self.accumulate(kernels, &dk);
                }
            }
            Op::MeanPoolGlobal { x } => {
                let s = self.shape(x);
                let (c, hw) = (s[0], s[1] * s[2]);
                let mut dx = vec![0.0f32; c * hw];
                for ch in 0..c {
                    let share = g[ch] / hw as f32;
                    dx[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = share);
                }
                self.accumulate(x, &dx);
            }
            Op::MeanRows { x } => {
                let (n, d) = self.rows_cols(x, "mean_rows").expect("validated at record time");
                let mut dx = vec![0.0f32; n * d];
                for i in 0..n {
                    for j in 0..d {
                        dx[i * d + j] = g[j] / n as f32;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::SumRows { x } => {
                let (n, d) = self.rows_cols(x, "sum_rows").expect("validated at record time");
                let mut dx = vec![0.0f32; n * d];
                for i in 0..n {
                    dx[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = g[i]);
                }
                self.accumulate(x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; self.value(x).len()];
                self.accumulate(x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f32> = self
                    .value(x)
                    .iter()
                    .zip(&g)
                    .map(|(xi, gi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::SoftmaxRows { x } => {
                let (n, d) = self.rows_cols(x, "softmax").expect("validated at record time");
                let out = &self.nodes[out_idx].data;
                let mut dx = vec![0.0f32; n * d];
                for i in 0..n {
                    let s = &out[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let dot: f32 = s.iter().zip(gr).map(|(si, gi)| si * gi).sum();
                    for j in 0..d {
                        dx[i * d + j] = s[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let (n, d) = self.rows_cols(x, "layer_norm").expect("validated at record time");
                let xv = self.value(x).to_vec();
                let gv = self.value(gain).to_vec();
                let mut dx = vec![0.0f32; n * d];
                let mut dgain = vec![0.0f32; d];
                let mut dbias = vec![0.0f32; d];
                for i in 0..n {
                    let row = &xv[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let (mean, inv_std) = row_moments(row, eps);
                    let xhat: Vec<f32> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f32> = gr.iter().zip(&gv).map(|(gi, wi)| gi * wi).collect();
                    let mean_dxhat: f32 = dxhat.iter().sum::<f32>() / d as f32;
                    let mean_dxhat_xhat: f32 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                    for j in 0..d {
                        dx[i * d + j] = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gain, &dgain);
                self.accumulate(bias, &dbias);
            }
            Op::NormalizeRows { x } => {
                let (n, d) = self.rows_cols(x, "normalize_rows").expect("validated at record time");
                let xv = self.value(x).to_vec();
                let out = self.nodes[out_idx].data.clone();
                let mut dx = vec![0.0f32; n * d];
                for i in 0..n {
                    let row = &xv[i * d..(i + 1) * d];
                    let y = &out[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let norm = row.iter().map(|a| a * a).sum::<f32>().sqrt();
                    if norm > NORM_EPS {
                        let dot: f32 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[i * d + j] = (gr[j] - y[j] * dot) / norm;
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Embed { table, ref indices } => {
                if self.tracked(table) {
                    let d = self.shape(table)[1];
                    let mut dt = vec![0.0f32; self.value(table).len()];
                    for (i, &idx) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[idx * d + j] += g[i * d + j];
                        }
                    }
                    self.accumulate(table, &dt);
                }
            }
            Op::ConcatRows { ref inputs } => {
                let mut offset = 0;
                for &id in inputs {
                    let len = self.value(id).len();
                    if self.tracked(id) {
                        let slice = g[offset..offset + len].to_vec();
                        self.accumulate(id, &slice);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { ref inputs } => {
                let n = self.shape(ValueId(out_idx))[0];
                let total = self.shape(ValueId(out_idx))[1];
                let mut off = 0;
                for &id in inputs {
                    let w = self.value(id).len() / n;
                    if self.tracked(id) {
                        let mut di = vec![0.0f32; n * w];
                        for i in 0..n {
                            di[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        self.accumulate(id, &di);
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let d = self.shape(ValueId(out_idx))[1];
                let mut dx = vec![0.0f32; self.value(x).len()];
                dx[start * d..start * d + g.len()].copy_from_slice(&g);
                self.accumulate(x, &dx);
            }
            Op::Reshape { x } => {
                self.accumulate(x, &g);
            }
            Op::CrossEntropyRows { logits, ref targets } => {
                let (n, c) = (self.shape(logits)[0], self.shape(logits)[1]);
                let lv = self.value(logits).to_vec();
                let mut dl = vec![0.0f32; n * c];
                let mut probs = vec![0.0f32; c];
                for i in 0..n {
                    softmax_row(&lv[i * c..(i + 1) * c], &mut probs);
                    for j in 0..c {
                        let indicator = if j == targets[i] { 1.0 } else { 0.0 };
                        dl[i * c + j] = (probs[j] - indicator) * g[i];
                    }
                }
                self.accumulate(logits, &dl);
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::AddBiasRows { .. } => "add_bias_rows",
        Op::AddChannelBias { .. } => "add_channel_bias",
        Op::Matmul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Conv2d { .. } => "conv2d",
        Op::MeanPoolGlobal { .. } => "mean_pool_global",
        Op::MeanRows { .. } => "mean_rows",
        Op::SumRows { .. } => "sum_rows",
        Op::Sum { .. } => "sum",
        Op::Relu { .. } => "relu",
        Op::SoftmaxRows { .. } => "softmax",
        Op::LayerNormRows { .. } => "layer_norm",
        Op::NormalizeRows { .. } => "normalize_rows",
        Op::Embed { .. } => "embed",
        Op::ConcatRows { .. } => "concat_rows",
        Op::ConcatCols { .. } => "concat_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::Reshape { .. } => "reshape",
        Op::CrossEntropyRows { .. } => "cross_entropy_rows",
    }
}

fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail != 0.0 {
                let brow = &b[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += ail * brow[j];
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

fn conv2d_forward(input: &[f32], kernels: &[f32], out: &mut [f32], d: ConvDims) {
    for oc in 0..d.co {
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let mut acc = 0.0f32;
                for ic in 0..d.ci {
                    for ky in 0..d.kh {
                        let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.kw {
                            let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            acc += input[(ic * d.h + iy as usize) * d.w + ix as usize]
                                * kernels[((oc * d.ci + ic) * d.kh + ky) * d.kw + kx];
                        }
                    }
                }
                out[(oc * d.ho + oy) * d.wo + ox] = acc;
            }
        }
    }
}

fn conv2d_backward_input(g: &[f32], kernels: &[f32], di: &mut [f32], d: ConvDims) {
    for oc in 0..d.co {
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let go = g[(oc * d.ho + oy) * d.wo + ox];
                if go == 0.0 {
                    continue;
                }
                for ic in 0..d.ci {
                    for ky in 0..d.kh {
                        let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.kw {
                            let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            di[(ic * d.h + iy as usize) * d.w + ix as usize] +=
                                go * kernels[((oc * d.ci + ic) * d.kh + ky) * d.kw + kx];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernels(g: &[f32], input: &[f32], dk: &mut [f32], d: ConvDims) {
    for oc in 0..d.co {
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let go = g[(oc * d.ho + oy) * d.wo + ox];
                if go == 0.0 {
                    continue;
                }
                for ic in 0..d.ci {
                    for ky in 0..d.kh {
                        let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.kw {
                            let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            dk[((oc * d.ci + ic) * d.kh + ky) * d.kw + kx] +=
                                go * input[(ic * d.h + iy as usize) * d.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

fn row_moments(row: &[f32], eps: f32) -> (f32, f32) {
    let d = row.len() as f32;
    let mean = row.iter().sum::<f32>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

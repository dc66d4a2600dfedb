//! Minimal deterministic network primitives: dense layers, ReLU, residual
//! blocks, softmax cross-entropy, and exact manual backpropagation that
//! touches only unfrozen parameters.
//!
//! Everything is f64 and single-threaded by construction; a forward pass
//! records an activation tape so backward can run without recomputation.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// 1-based position of a residual block inside a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub usize);

impl BlockId {
    /// 0-based index into the block list.
    pub fn index0(self) -> usize {
        self.0 - 1
    }
}

impl std::fmt::Display for BlockId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Row-major 2D tensor of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Shape("tensor entries must be finite".into()));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    /// Fills with U(-limit, limit) draws in row-major order.
    pub fn uniform(rows: usize, cols: usize, limit: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Tensor2 { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Concatenates two tensors with equal row counts along the column axis.
    pub fn hconcat(left: &Tensor2, right: &Tensor2) -> Result<Tensor2> {
        if left.rows != right.rows {
            return Err(Error::Shape(format!(
                "hconcat row mismatch: {} vs {}",
                left.rows, right.rows
            )));
        }
        let cols = left.cols + right.cols;
        let mut data = Vec::with_capacity(left.rows * cols);
        for r in 0..left.rows {
            data.extend_from_slice(left.row(r));
            data.extend_from_slice(right.row(r));
        }
        Ok(Tensor2 {
            rows: left.rows,
            cols,
            data,
        })
    }

    /// Copies a contiguous column range into a new tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor2 {
        assert!(start <= end && end <= self.cols, "column slice out of range");
        let cols = end - start;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Tensor2 {
            rows: self.rows,
            cols,
            data,
        }
    }
}

/// Dense affine layer `y = x W^T + b` with a freeze flag.
///
/// `weight` is (out x in) row-major, matching the usual convention where
/// row `o` holds the incoming weights of output unit `o`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub frozen: bool,
}

impl DenseLayer {
    pub fn zeros(in_width: usize, out_width: usize) -> Self {
        DenseLayer {
            weight: Tensor2::zeros(out_width, in_width),
            bias: vec![0.0; out_width],
            frozen: false,
        }
    }

    /// Uniform init in +-sqrt(1/fan_in) for both weight and bias.
    pub fn uniform_init(in_width: usize, out_width: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (1.0 / in_width as f64).sqrt();
        let weight = Tensor2::uniform(out_width, in_width, limit, rng);
        let bias = (0..out_width).map(|_| rng.gen_range(-limit..limit)).collect();
        DenseLayer {
            weight,
            bias,
            frozen: false,
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    /// `y[r,o] = b[o] + sum_i x[r,i] * W[o,i]`
    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.in_width() {
            return Err(Error::Shape(format!(
                "dense forward: input width {} != layer in width {}",
                x.cols(),
                self.in_width()
            )));
        }
        let n = x.rows();
        let out_w = self.out_width();
        let mut y = Tensor2::zeros(n, out_w);
        for r in 0..n {
            let xr = x.row(r);
            for o in 0..out_w {
                let wr = self.weight.row(o);
                let mut acc = self.bias[o];
                for i in 0..xr.len() {
                    acc += wr[i] * xr[i];
                }
                y.set(r, o, acc);
            }
        }
        Ok(y)
    }

    /// Gradients for `y = x W^T + b` given upstream `dy`; returns
    /// (dweight, dbias, dx).
    pub fn backward(&self, x: &Tensor2, dy: &Tensor2) -> (Tensor2, Vec<f64>, Tensor2) {
        let n = x.rows();
        let in_w = self.in_width();
        let out_w = self.out_width();
        debug_assert_eq!(dy.rows(), n);
        debug_assert_eq!(dy.cols(), out_w);

        let mut dw = Tensor2::zeros(out_w, in_w);
        let mut db = vec![0.0; out_w];
        let mut dx = Tensor2::zeros(n, in_w);
        for r in 0..n {
            let xr = x.row(r);
            let dyr = dy.row(r);
            for o in 0..out_w {
                let g = dyr[o];
                db[o] += g;
                let wrow = self.weight.row(o);
                for i in 0..in_w {
                    dw.data_mut()[o * in_w + i] += g * xr[i];
                    dx.data_mut()[r * in_w + i] += g * wrow[i];
                }
            }
        }
        (dw, db, dx)
    }
}

/// Residual block: `y = x + lin2(relu(lin1(x)))`.
///
/// Input and output widths are equal; the hidden width (rows of `lin1`)
/// starts equal to the input width and may shrink under channel pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub lin1: DenseLayer,
    pub lin2: DenseLayer,
    pub id: BlockId,
}

impl ResidualBlock {
    pub fn new(width: usize, id: BlockId, rng: &mut ChaCha8Rng) -> Self {
        ResidualBlock {
            lin1: DenseLayer::uniform_init(width, width, rng),
            lin2: DenseLayer::uniform_init(width, width, rng),
            id,
        }
    }

    pub fn width(&self) -> usize {
        self.lin1.in_width()
    }

    pub fn hidden_width(&self) -> usize {
        self.lin1.out_width()
    }

    pub fn param_count(&self) -> usize {
        self.lin1.param_count() + self.lin2.param_count()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.lin1.frozen = frozen;
        self.lin2.frozen = frozen;
    }

    pub fn frozen(&self) -> bool {
        self.lin1.frozen && self.lin2.frozen
    }
}

/// Identifies one dense layer inside a network; the ordering is the
/// canonical parameter order used for gradients and optimizer state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerId {
    /// `index0` is the 0-based block position.
    Block { index0: usize, slot: BlockSlot },
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockSlot {
    Lin1,
    Lin2,
}

impl std::fmt::Display for LayerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerId::Block { index0, slot } => {
                let name = match slot {
                    BlockSlot::Lin1 => "lin1",
                    BlockSlot::Lin2 => "lin2",
                };
                write!(f, "block{}.{name}", index0 + 1)
            }
            LayerId::Head => write!(f, "head"),
        }
    }
}

/// Per-layer gradient: same shape as the layer's weight and bias.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub dweight: Tensor2,
    pub dbias: Vec<f64>,
}

/// Gradients keyed by layer. Entries exist exactly for unfrozen layers.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub layers: BTreeMap<LayerId, LayerGrad>,
}

impl Gradients {
    /// Number of parameter tensors carried (weight and bias count separately).
    pub fn tensor_count(&self) -> usize {
        self.layers.len() * 2
    }
}

/// Activation record for one block: its input, pre-activation and
/// post-ReLU hidden activations.
#[derive(Debug, Clone)]
pub struct BlockRecord {
    pub input: Tensor2,
    pub z1: Tensor2,
    pub hidden: Tensor2,
}

/// Tape from a plain (non-siamese) forward pass through blocks + head.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub records: Vec<BlockRecord>,
    /// Features fed to the head (output of the last block).
    pub features: Tensor2,
    pub batch_rows: usize,
}

fn relu(t: &Tensor2) -> Tensor2 {
    let mut out = t.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Runs a batch through a chain of residual blocks, recording activations.
pub fn forward_blocks(blocks: &[ResidualBlock], batch: &Tensor2) -> Result<(Tensor2, Vec<BlockRecord>)> {
    let mut records = Vec::with_capacity(blocks.len());
    let mut x = batch.clone();
    for block in blocks {
        let z1 = block.lin1.forward(&x)?;
        let hidden = relu(&z1);
        let z2 = block.lin2.forward(&hidden)?;
        if z2.cols() != x.cols() {
            return Err(Error::Shape(format!(
                "block {} output width {} != input width {}",
                block.id,
                z2.cols(),
                x.cols()
            )));
        }
        let mut y = z2;
        for (o, i) in y.data_mut().iter_mut().zip(x.data()) {
            *o += i;
        }
        records.push(BlockRecord {
            input: x,
            z1,
            hidden,
        });
        x = y;
    }
    Ok((x, records))
}

/// Plain forward: blocks then head. Returns logits and the activation tape.
pub fn forward(blocks: &[ResidualBlock], head: &DenseLayer, batch: &Tensor2) -> Result<(Tensor2, ForwardTape)> {
    let (features, records) = forward_blocks(blocks, batch)?;
    let logits = head.forward(&features)?;
    Ok((
        logits,
        ForwardTape {
            records,
            features,
            batch_rows: batch.rows(),
        },
    ))
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
///
/// `loss = mean_r [ logsumexp(z_r) - z_r[label_r] ]`,
/// `dlogits = (softmax - onehot) / batch`.
pub fn loss_and_grad(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "loss: {} logit rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let classes = logits.cols();
    let n = logits.rows();
    if n == 0 {
        return Err(Error::Shape("loss on empty batch".into()));
    }
    let mut dlogits = Tensor2::zeros(n, classes);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for r in 0..n {
        let label = labels[r];
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &z in row {
            sum += (z - max).exp();
        }
        let lse = max + sum.ln();
        loss += lse - row[label];
        for c in 0..classes {
            let p = (row[c] - max).exp() / sum;
            let target = if c == label { 1.0 } else { 0.0 };
            dlogits.set(r, c, (p - target) * inv_n);
        }
    }
    Ok((loss * inv_n, dlogits))
}

/// Softmax probabilities per row.
pub fn softmax(logits: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &z in row {
            sum += (z - max).exp();
        }
        for c in 0..row.len() {
            out.set(r, c, (row[c] - max).exp() / sum);
        }
    }
    out
}

/// Backpropagates `dfeatures` through a block chain whose forward pass
/// produced `records`. Parameter gradients are accumulated into `grads`
/// for unfrozen layers only; the input gradient is returned.
pub fn backward_blocks(
    blocks: &[ResidualBlock],
    records: &[BlockRecord],
    dfeatures: &Tensor2,
    grads: &mut Gradients,
) -> Tensor2 {
    assert_eq!(blocks.len(), records.len(), "tape does not match network");
    let mut dy = dfeatures.clone();
    for (index0, (block, rec)) in blocks.iter().zip(records).enumerate().rev() {
        // y = x + lin2(relu(lin1(x))); dy splits into the skip path and the
        // dense path.
        let (dw2, db2, dhidden) = block.lin2.backward(&rec.hidden, &dy);
        let mut dz1 = dhidden;
        for (g, z) in dz1.data_mut().iter_mut().zip(rec.z1.data()) {
            if *z <= 0.0 {
                *g = 0.0;
            }
        }
        let (dw1, db1, dx_dense) = block.lin1.backward(&rec.input, &dz1);
        if !block.lin2.frozen {
            grads.layers.insert(
                LayerId::Block {
                    index0,
                    slot: BlockSlot::Lin2,
                },
                LayerGrad {
                    dweight: dw2,
                    dbias: db2,
                },
            );
        }
        if !block.lin1.frozen {
            grads.layers.insert(
                LayerId::Block {
                    index0,
                    slot: BlockSlot::Lin1,
                },
                LayerGrad {
                    dweight: dw1,
                    dbias: db1,
                },
            );
        }
        let mut dx = dy; // skip connection passes dy through unchanged
        for (a, b) in dx.data_mut().iter_mut().zip(dx_dense.data()) {
            *a += b;
        }
        dy = dx;
    }
    dy
}

/// Full backward pass for a plain forward tape. Gradient entries exist
/// exactly for the unfrozen layers (head included unless frozen).
pub fn backward(
    blocks: &[ResidualBlock],
    head: &DenseLayer,
    tape: &ForwardTape,
    dlogits: &Tensor2,
) -> Result<Gradients> {
    if dlogits.rows() != tape.batch_rows {
        return Err(Error::Shape(format!(
            "stale tape: dlogits rows {} vs tape batch {}",
            dlogits.rows(),
            tape.batch_rows
        )));
    }
    if tape.records.len() != blocks.len() {
        return Err(Error::Shape(format!(
            "stale tape: {} records vs {} blocks",
            tape.records.len(),
            blocks.len()
        )));
    }
    let mut grads = Gradients::default();
    let (dwh, dbh, dfeatures) = head.backward(&tape.features, dlogits);
    if !head.frozen {
        grads.layers.insert(
            LayerId::Head,
            LayerGrad {
                dweight: dwh,
                dbias: dbh,
            },
        );
    }
    backward_blocks(blocks, &tape.records, &dfeatures, &mut grads);
    Ok(grads)
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Parameters skipped because perturbing them flipped a ReLU sign,
    /// which makes the central difference meaningless at the kink.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst: Option<(LayerId, usize)>,
    pub pass: bool,
}

// Relative error with a unit floor: |a-n| / max(|a|, |n|, 1).
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1.0);
    (analytic - numeric).abs() / denom
}

fn relu_mask(records: &[BlockRecord]) -> Vec<bool> {
    let mut mask = Vec::new();
    for rec in records {
        mask.extend(rec.z1.data().iter().map(|&z| z > 0.0));
    }
    mask
}

/// Compares analytic gradients against central finite differences on a
/// deterministic sample of at least `min_params` unfrozen parameters
/// (all of them if the network is smaller).
///
/// Parameters whose perturbation flips a ReLU activation sign are skipped:
/// the loss is not differentiable across the kink, so the two-sided
/// difference does not estimate the one-sided derivative backprop reports.
pub fn numerical_grad_check(
    blocks: &[ResidualBlock],
    head: &DenseLayer,
    batch: &Tensor2,
    labels: &[usize],
    step: f64,
    tol: f64,
    min_params: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let (logits, tape) = forward(blocks, head, batch)?;
    let (_, dlogits) = loss_and_grad(&logits, labels)?;
    let grads = backward(blocks, head, &tape, &dlogits)?;

    // Enumerate (layer, tensor-offset) coordinates of unfrozen parameters.
    // Offsets < weight_len index the weight; the rest index the bias.
    let mut coords: Vec<(LayerId, usize)> = Vec::new();
    for (id, g) in &grads.layers {
        let len = g.dweight.data().len() + g.dbias.len();
        for off in 0..len {
            coords.push((*id, off));
        }
    }
    let mut rng = rng_from(seed);
    let sample: Vec<(LayerId, usize)> = if coords.len() <= min_params {
        coords
    } else {
        // Partial Fisher-Yates: the first `min_params` entries become a
        // uniform sample without replacement.
        let mut pool = coords;
        for i in 0..min_params {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(min_params);
        pool
    };

    let mut work_blocks = blocks.to_vec();
    let mut work_head = head.clone();
    let base_mask = relu_mask(&tape.records);

    let mut report = GradCheckReport {
        checked: 0,
        skipped_kinks: 0,
        max_rel_err: 0.0,
        worst: None,
        pass: true,
    };

    for (id, off) in sample {
        let analytic = {
            let g = &grads.layers[&id];
            let wlen = g.dweight.data().len();
            if off < wlen {
                g.dweight.data()[off]
            } else {
                g.dbias[off - wlen]
            }
        };
        let eval = |blocks: &[ResidualBlock], head: &DenseLayer| -> Result<(f64, Vec<bool>)> {
            let (logits, tape) = forward(blocks, head, batch)?;
            let (loss, _) = loss_and_grad(&logits, labels)?;
            Ok((loss, relu_mask(&tape.records)))
        };

        let orig = read_param(&work_blocks, &work_head, id, off);
        write_param(&mut work_blocks, &mut work_head, id, off, orig + step);
        let (loss_plus, mask_plus) = eval(&work_blocks, &work_head)?;
        write_param(&mut work_blocks, &mut work_head, id, off, orig - step);
        let (loss_minus, mask_minus) = eval(&work_blocks, &work_head)?;
        write_param(&mut work_blocks, &mut work_head, id, off, orig);

        if mask_plus != base_mask || mask_minus != base_mask {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (loss_plus - loss_minus) / (2.0 * step);
        let err = rel_err(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((id, off));
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

fn rng_from(seed: u64) -> ChaCha8Rng {
    crate::util::rng_from_seed(seed)
}

fn read_param(blocks: &[ResidualBlock], head: &DenseLayer, id: LayerId, off: usize) -> f64 {
    let layer = layer_ref(blocks, head, id);
    let wlen = layer.weight.data().len();
    if off < wlen {
        layer.weight.data()[off]
    } else {
        layer.bias[off - wlen]
    }
}

fn write_param(blocks: &mut [ResidualBlock], head: &mut DenseLayer, id: LayerId, off: usize, v: f64) {
    let layer = layer_mut(blocks, head, id);
    let wlen = layer.weight.data().len();
    if off < wlen {
        layer.weight.data_mut()[off] = v;
    } else {
        layer.bias[off - wlen] = v;
    }
}

pub(crate) fn layer_ref<'a>(blocks: &'a [ResidualBlock], head: &'a DenseLayer, id: LayerId) -> &'a DenseLayer {
    match id {
        LayerId::Block { index0, slot } => match slot {
            BlockSlot::Lin1 => &blocks[index0].lin1,
            BlockSlot::Lin2 => &blocks[index0].lin2,
        },
        LayerId::Head => head,
    }
}

pub(crate) fn layer_mut<'a>(
    blocks: &'a mut [ResidualBlock],
    head: &'a mut DenseLayer,
    id: LayerId,
) -> &'a mut DenseLayer {
    match id {
        LayerId::Block { index0, slot } => match slot {
            BlockSlot::Lin1 => &mut blocks[index0].lin1,
            BlockSlot::Lin2 => &mut blocks[index0].lin2,
        },
        LayerId::Head => head,
    }
}

//! Training loop (AdamW with cosine annealing), evaluation, stratified
//! k-fold cross-validation and learning-rate sweeps.
//!
//! Training is a deterministic function of (network, dataset, config):
//! shuffling is seeded, the optimizer state is rebuilt per call, and frozen
//! parameters are never touched, bit for bit.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::model::{BlockNetwork, SubsetSpec};
use crate::nn::{self, LayerGrad, LayerId, Tensor2};
use crate::util::{rng_from_seed, split_seed};
use crate::{Error, Result};

/// AdamW constants; the schedule always anneals to zero over the run.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// The default sweep grid for shift experiments.
pub const SWEEP_LRS: [f64; 5] = [1e-3, 5e-4, 1e-4, 5e-5, 1e-5];

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Benchmark-scale batch size is 256; 32 suits the synthetic folds
        // this crate trains on.
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn with_lr(&self, lr: f64) -> TrainConfig {
        TrainConfig { lr, ..self.clone() }
    }
}

/// Accuracy/loss summary over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub accuracy: f64,
    pub loss: f64,
    pub n: usize,
}

/// Cosine annealing from `lr0` to zero over `total` steps; step 0 returns
/// exactly `lr0`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let t = step as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

struct AdamState {
    m_weight: Vec<f64>,
    v_weight: Vec<f64>,
    m_bias: Vec<f64>,
    v_bias: Vec<f64>,
}

/// AdamW over the unfrozen layers of a [`BlockNetwork`]. Weight decay is
/// decoupled and skips biases.
pub struct AdamW {
    state: BTreeMap<LayerId, AdamState>,
    t: usize,
}

impl AdamW {
    pub fn new() -> AdamW {
        AdamW {
            state: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        net: &mut BlockNetwork,
        grads: &BTreeMap<LayerId, LayerGrad>,
        lr: f64,
        weight_decay: f64,
    ) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (&id, grad) in grads {
            let layer = net.layer_mut(id);
            debug_assert!(!layer.frozen, "optimizer step on frozen layer {id}");
            let wlen = layer.weight.data().len();
            let blen = layer.bias.len();
            let state = self.state.entry(id).or_insert_with(|| AdamState {
                m_weight: vec![0.0; wlen],
                v_weight: vec![0.0; wlen],
                m_bias: vec![0.0; blen],
                v_bias: vec![0.0; blen],
            });
            let dw = grad.dweight.data();
            for (i, w) in layer.weight.data_mut().iter_mut().enumerate() {
                let g = dw[i];
                state.m_weight[i] = ADAM_BETA1 * state.m_weight[i] + (1.0 - ADAM_BETA1) * g;
                state.v_weight[i] = ADAM_BETA2 * state.v_weight[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = state.m_weight[i] / bc1;
                let v_hat = state.v_weight[i] / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * *w);
            }
            for (i, b) in layer.bias.iter_mut().enumerate() {
                let g = grad.dbias[i];
                state.m_bias[i] = ADAM_BETA1 * state.m_bias[i] + (1.0 - ADAM_BETA1) * g;
                state.v_bias[i] = ADAM_BETA2 * state.v_bias[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = state.m_bias[i] / bc1;
                let v_hat = state.v_bias[i] / bc2;
                *b -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new()
    }
}

fn batch_of(ds: &Dataset, indices: &[usize]) -> (Tensor2, Vec<usize>) {
    let d = ds.dim();
    let mut data = Vec::with_capacity(indices.len() * d);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(ds.x.row(i));
        labels.push(ds.y[i]);
    }
    (
        Tensor2::from_vec(indices.len(), d, data).expect("batch shapes"),
        labels,
    )
}

/// Hook invoked after every optimizer step, e.g. for norm-ball projection.
pub trait StepHook {
    fn after_step(&mut self, net: &mut BlockNetwork);
}

struct NoHook;
impl StepHook for NoHook {
    fn after_step(&mut self, _net: &mut BlockNetwork) {}
}

/// Trains in place and returns final full-train-set metrics. Only unfrozen
/// parameters change; the learning rate follows cosine annealing from
/// `cfg.lr` to zero over `epochs * ceil(n / batch_size)` steps, and the
/// per-epoch shuffle is seeded by `cfg.seed`.
pub fn train(net: &mut BlockNetwork, ds: &Dataset, cfg: &TrainConfig) -> Result<EvalRecord> {
    train_with_hook(net, ds, cfg, &mut NoHook)
}

/// [`train`] with a post-step hook.
pub fn train_with_hook(
    net: &mut BlockNetwork,
    ds: &Dataset,
    cfg: &TrainConfig,
    hook: &mut dyn StepHook,
) -> Result<EvalRecord> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidConfig("training on an empty dataset".into()));
    }
    if ds.classes != net.classes() {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes but the head expects {}",
            ds.classes,
            net.classes()
        )));
    }
    let n = ds.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = AdamW::new();
    let mut rng = rng_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = batch_of(ds, chunk);
            let (logits, tape) = net.forward(&x)?;
            let (_, dlogits) = nn::loss_and_grad(&logits, &labels)?;
            let grads = net.backward(&tape, &dlogits)?;
            let lr = cosine_lr(cfg.lr, step, total_steps);
            opt.step(net, &grads.layers, lr, cfg.weight_decay);
            hook.after_step(net);
            step += 1;
        }
    }
    evaluate(net, ds)
}

/// Deterministic accuracy/loss over a dataset; argmax ties break toward the
/// smaller class index.
pub fn evaluate(net: &BlockNetwork, ds: &Dataset) -> Result<EvalRecord> {
    if ds.is_empty() {
        return Err(Error::InvalidConfig("evaluating on an empty dataset".into()));
    }
    let (x, labels) = batch_of(ds, &(0..ds.len()).collect::<Vec<_>>());
    let (logits, _) = net.forward(&x)?;
    let (loss, _) = nn::loss_and_grad(&logits, &labels)?;
    let mut correct = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(EvalRecord {
        accuracy: correct as f64 / ds.len() as f64,
        loss,
        n: ds.len(),
    })
}

/// Disjoint index folds covering `0..n`.
#[derive(Debug, Clone)]
pub struct Folds {
    pub folds: Vec<Vec<usize>>,
    /// True when stratification was abandoned because some class in the
    /// label range has no samples.
    pub unstratified_fallback: bool,
}

/// Stratified k-fold split: per-class counts differ by at most one across
/// folds and fold sizes differ by at most one. If any class id in the label
/// range has zero samples the split degrades to an unstratified one and
/// sets the warning flag.
pub fn kfold_split(n: usize, k: usize, labels: &[usize], seed: u64) -> Result<Folds> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k-fold needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidConfig(format!("k-fold needs n >= k, got n={n}, k={k}")));
    }
    if labels.len() != n {
        return Err(Error::InvalidConfig(format!(
            "labels length {} != n {n}",
            labels.len()
        )));
    }
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let degenerate = per_class.iter().any(|c| c.is_empty()) || n_classes == 0;

    let mut folds = vec![Vec::new(); k];
    if degenerate {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng_from_seed(seed);
        order.shuffle(&mut rng);
        for (pos, idx) in order.into_iter().enumerate() {
            folds[pos % k].push(idx);
        }
    } else {
        // Deal each class round-robin, continuing the fold cursor across
        // classes so fold sizes stay within one of each other.
        let mut cursor = 0usize;
        for (c, class_indices) in per_class.iter().enumerate() {
            let mut idx = class_indices.clone();
            let mut rng = rng_from_seed(split_seed(seed, c as u64));
            idx.shuffle(&mut rng);
            for i in idx {
                folds[cursor % k].push(i);
                cursor += 1;
            }
        }
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(Folds {
        folds,
        unstratified_fallback: degenerate,
    })
}

/// Per-fold result of a cross-validation run.
#[derive(Debug, Clone)]
pub struct CvScore {
    pub mean_accuracy: f64,
    pub fold_records: Vec<EvalRecord>,
}

/// Head initialization policy for cross-validated subtuning runs.
///
/// `Fresh` redraws the head per fold; it is the default and suits transfer
/// to a new label space. `WarmStart` keeps the pretrained head, matching
/// shift tasks that preserve the label space, where head re-estimation
/// would otherwise dominate the signal at small sample sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadPolicy {
    #[default]
    Fresh,
    WarmStart,
}

impl HeadPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadPolicy::Fresh => "fresh",
            HeadPolicy::WarmStart => "warm_start",
        }
    }
}

impl std::str::FromStr for HeadPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(HeadPolicy::Fresh),
            "warm_start" => Ok(HeadPolicy::WarmStart),
            other => Err(Error::InvalidConfig(format!("unknown head policy '{other}'"))),
        }
    }
}

/// K-fold cross-validated accuracy of subtuning `subset` with the default
/// fresh-head policy. See [`cv_score_with_policy`].
pub fn cv_score(
    pretrained: &BlockNetwork,
    subset: &SubsetSpec,
    ds: &Dataset,
    cfg: &TrainConfig,
    k: usize,
) -> Result<CvScore> {
    cv_score_with_policy(pretrained, subset, ds, cfg, k, HeadPolicy::Fresh)
}

/// K-fold cross-validated accuracy of subtuning `subset`. Each fold clones
/// the pretrained network, initializes the head per `head_policy`,
/// unfreezes the subset, trains on the other folds and evaluates on the
/// held-out one. The input network is never mutated.
pub fn cv_score_with_policy(
    pretrained: &BlockNetwork,
    subset: &SubsetSpec,
    ds: &Dataset,
    cfg: &TrainConfig,
    k: usize,
    head_policy: HeadPolicy,
) -> Result<CvScore> {
    let folds = kfold_split(ds.len(), k, &ds.y, split_seed(cfg.seed, 0x0f01d))?;
    let fold_records: Vec<Result<EvalRecord>> = folds
        .folds
        .par_iter()
        .enumerate()
        .map(|(fold_idx, heldout)| {
            let mut train_indices: Vec<usize> = Vec::with_capacity(ds.len() - heldout.len());
            for (j, fold) in folds.folds.iter().enumerate() {
                if j != fold_idx {
                    train_indices.extend_from_slice(fold);
                }
            }
            train_indices.sort_unstable();
            let train_ds = ds.select(&train_indices);
            let heldout_ds = ds.select(heldout);
            let mut net = pretrained.clone();
            if head_policy == HeadPolicy::Fresh {
                net.attach_head(
                    net.head_kind(),
                    ds.classes,
                    split_seed(cfg.seed, 0xead0 + fold_idx as u64),
                )?;
            }
            net.set_trainable(subset)?;
            let fold_cfg = cfg.with_seed(split_seed(cfg.seed, 0x7a11 + fold_idx as u64));
            train(&mut net, &train_ds, &fold_cfg)?;
            evaluate(&net, &heldout_ds)
        })
        .collect();
    let fold_records: Vec<EvalRecord> = fold_records.into_iter().collect::<Result<_>>()?;
    let mean_accuracy =
        fold_records.iter().map(|r| r.accuracy).sum::<f64>() / fold_records.len() as f64;
    Ok(CvScore {
        mean_accuracy,
        fold_records,
    })
}

/// Cross-validates each learning rate and returns the winner; ties break
/// toward the larger rate.
pub fn lr_sweep(
    pretrained: &BlockNetwork,
    subset: &SubsetSpec,
    ds: &Dataset,
    lrs: &[f64],
    cfg: &TrainConfig,
    k: usize,
) -> Result<(f64, f64)> {
    lr_sweep_with_policy(pretrained, subset, ds, lrs, cfg, k, HeadPolicy::Fresh)
}

/// [`lr_sweep`] under an explicit head policy.
pub fn lr_sweep_with_policy(
    pretrained: &BlockNetwork,
    subset: &SubsetSpec,
    ds: &Dataset,
    lrs: &[f64],
    cfg: &TrainConfig,
    k: usize,
    head_policy: HeadPolicy,
) -> Result<(f64, f64)> {
    if lrs.is_empty() {
        return Err(Error::InvalidConfig("lr sweep needs at least one rate".into()));
    }
    let scores: Vec<Result<f64>> = lrs
        .par_iter()
        .map(|&lr| {
            Ok(
                cv_score_with_policy(pretrained, subset, ds, &cfg.with_lr(lr), k, head_policy)?
                    .mean_accuracy,
            )
        })
        .collect();
    let scores: Vec<f64> = scores.into_iter().collect::<Result<_>>()?;
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        let better = s > scores[best];
        let tie_toward_larger = s == scores[best] && lrs[i] > lrs[best];
        if better || tie_toward_larger {
            best = i;
        }
    }
    Ok((lrs[best], scores[best]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_source_task;
    use crate::nn::BlockId;
    use rand::Rng;

    fn toy_blobs(n: usize, d: usize, seed: u64) -> Dataset {
        // linearly separable two-class blobs
        let mut rng = rng_from_seed(seed);
        let mut data = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            let center = if label == 0 { -1.0 } else { 1.0 };
            for _ in 0..d {
                let jitter: f64 = rng.gen_range(-0.3..0.3);
                data.push(center + jitter);
            }
            y.push(label);
        }
        Dataset::new(Tensor2::from_vec(n, d, data).unwrap(), y, 2, "blobs").unwrap()
    }

    // Plain full-batch gradient-descent logistic regression; the
    // independent reference for the separable-blobs example.
    fn logistic_oracle_accuracy(ds: &Dataset, steps: usize, lr: f64) -> f64 {
        let d = ds.dim();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let n = ds.len() as f64;
        for _ in 0..steps {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for i in 0..ds.len() {
                let row = ds.x.row(i);
                let z: f64 = row.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() + b;
                let p = 1.0 / (1.0 + (-z).exp());
                let t = ds.y[i] as f64;
                for (g, x) in gw.iter_mut().zip(row) {
                    *g += (p - t) * x / n;
                }
                gb += (p - t) / n;
            }
            for (wi, gi) in w.iter_mut().zip(&gw) {
                *wi -= lr * gi;
            }
            b -= lr * gb;
        }
        let mut correct = 0;
        for i in 0..ds.len() {
            let z: f64 = ds.x.row(i).iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() + b;
            let pred = usize::from(z > 0.0);
            if pred == ds.y[i] {
                correct += 1;
            }
        }
        correct as f64 / ds.len() as f64
    }

    #[test]
    fn short_final_batch_is_kept() {
        // 10 samples with batch 256: one step per epoch.
        let n: usize = 10;
        let steps = n.div_ceil(256);
        assert_eq!(steps, 1);
        // and epochs = 0 is rejected
        let ds = toy_blobs(10, 3, 1);
        let mut net = BlockNetwork::build(3, 1, 2, 0).unwrap();
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(train(&mut net, &ds, &bad).is_err());
    }

    #[test]
    fn zero_lr_leaves_network_bitwise_unchanged() {
        let ds = toy_blobs(20, 4, 2);
        let mut net = BlockNetwork::build(4, 2, 2, 3).unwrap();
        let before_eval = evaluate(&net, &ds).unwrap();
        let before_b1 = net.block_param_vector(BlockId(1));
        let before_head = net.head().weight.data().to_vec();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 3,
            ..TrainConfig::default()
        };
        let rec = train(&mut net, &ds, &cfg).unwrap();
        assert_eq!(net.block_param_vector(BlockId(1)), before_b1);
        assert_eq!(net.head().weight.data(), &before_head[..]);
        assert_eq!(rec.accuracy, before_eval.accuracy);
    }

    #[test]
    fn head_only_training_separates_blobs() {
        let ds = toy_blobs(60, 6, 5);
        let oracle = logistic_oracle_accuracy(&ds, 500, 1.0);
        assert!(oracle >= 0.99, "oracle baseline should separate, got {oracle}");

        let mut net = BlockNetwork::build(6, 2, 2, 7).unwrap();
        net.set_trainable(&SubsetSpec::empty()).unwrap();
        let cfg = TrainConfig {
            lr: 0.05,
            weight_decay: 0.0,
            epochs: 50,
            ..TrainConfig::default()
        };
        let rec = train(&mut net, &ds, &cfg).unwrap();
        assert!(rec.accuracy >= 0.99, "train accuracy {}", rec.accuracy);
    }

    #[test]
    fn training_respects_freeze_mask_bitwise() {
        let ds = toy_blobs(30, 5, 8);
        let mut net = BlockNetwork::build(5, 3, 2, 9).unwrap();
        let subset = SubsetSpec::for_network(&net, &[BlockId(2)]).unwrap();
        net.set_trainable(&subset).unwrap();
        let frozen_before: Vec<Vec<f64>> = [1, 3]
            .iter()
            .map(|&i| net.block_param_vector(BlockId(i)))
            .collect();
        let tuned_before = net.block_param_vector(BlockId(2));
        train(&mut net, &ds, &TrainConfig::default()).unwrap();
        for (i, &id) in [1usize, 3].iter().enumerate() {
            assert_eq!(
                net.block_param_vector(BlockId(id)),
                frozen_before[i],
                "frozen block {id} drifted"
            );
        }
        assert_ne!(net.block_param_vector(BlockId(2)), tuned_before);
    }

    #[test]
    fn train_rejects_class_mismatch() {
        let ds = toy_blobs(10, 3, 1);
        let mut net = BlockNetwork::build(3, 1, 5, 0).unwrap();
        assert!(matches!(
            train(&mut net, &ds, &TrainConfig::default()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn evaluate_is_deterministic_and_chance_level_for_random_net() {
        let ds = gen_source_task(8, 4, 400, 1, 3).unwrap();
        let net = BlockNetwork::build(8, 2, 4, 123).unwrap();
        let a = evaluate(&net, &ds).unwrap();
        let b = evaluate(&net, &ds).unwrap();
        assert_eq!(a, b);
        // untrained accuracy ~ 1/C; allow 3 binomial sigmas
        let p: f64 = 1.0 / 4.0;
        let sigma = (p * (1.0 - p) / 400.0).sqrt();
        assert!(
            (a.accuracy - p).abs() <= 3.0 * sigma + 0.05,
            "accuracy {} too far from chance {p}",
            a.accuracy
        );
    }

    #[test]
    fn evaluate_single_correct_sample() {
        let ds = toy_blobs(60, 6, 5);
        let mut net = BlockNetwork::build(6, 1, 2, 7).unwrap();
        net.set_trainable(&SubsetSpec::empty()).unwrap();
        let cfg = TrainConfig {
            lr: 0.05,
            weight_decay: 0.0,
            epochs: 50,
            ..TrainConfig::default()
        };
        train(&mut net, &ds, &cfg).unwrap();
        let one = ds.select(&[0]);
        let rec = evaluate(&net, &one).unwrap();
        assert_eq!(rec.n, 1);
        assert_eq!(rec.accuracy, 1.0);
    }

    #[test]
    fn kfold_basic_properties() {
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let folds = kfold_split(10, 5, &labels, 4).unwrap();
        assert!(!folds.unstratified_fallback);
        assert_eq!(folds.folds.len(), 5);
        let mut all: Vec<usize> = folds.folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for fold in &folds.folds {
            assert_eq!(fold.len(), 2);
            let count0 = fold.iter().filter(|&&i| labels[i] == 0).count();
            assert_eq!(count0, 1, "each fold holds one sample of each class");
        }
        // determinism
        let again = kfold_split(10, 5, &labels, 4).unwrap();
        assert_eq!(folds.folds, again.folds);
    }

    #[test]
    fn kfold_sizes_within_one() {
        let labels: Vec<usize> = (0..23).map(|i| i % 3).collect();
        let folds = kfold_split(23, 5, &labels, 1).unwrap();
        let sizes: Vec<usize> = folds.folds.iter().map(|f| f.len()).collect();
        let min = *sizes.iter().min().unwrap();
        let max = *sizes.iter().max().unwrap();
        assert!(max - min <= 1, "{sizes:?}");
        for c in 0..3 {
            let counts: Vec<usize> = folds
                .folds
                .iter()
                .map(|f| f.iter().filter(|&&i| labels[i] == c).count())
                .collect();
            let mn = counts.iter().min().unwrap();
            let mx = counts.iter().max().unwrap();
            assert!(mx - mn <= 1, "class {c}: {counts:?}");
        }
    }

    #[test]
    fn kfold_degrades_on_empty_class() {
        // class 1 never appears although the label range includes it
        let labels = vec![0, 0, 2, 2, 0, 2];
        let folds = kfold_split(6, 2, &labels, 0).unwrap();
        assert!(folds.unstratified_fallback);
        let mut all: Vec<usize> = folds.folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn kfold_rejects_bad_params() {
        let labels = vec![0, 1, 0, 1];
        assert!(kfold_split(4, 1, &labels, 0).is_err());
        assert!(kfold_split(4, 5, &labels, 0).is_err());
    }

    #[test]
    fn cv_score_deterministic_and_pure() {
        let ds = gen_source_task(6, 2, 40, 1, 11).unwrap();
        let net = BlockNetwork::build(6, 2, 2, 13).unwrap();
        let before = net.block_param_vector(BlockId(1));
        let head_before = net.head().weight.data().to_vec();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let a = cv_score(&net, &SubsetSpec::empty(), &ds, &cfg, 2).unwrap();
        let b = cv_score(&net, &SubsetSpec::empty(), &ds, &cfg, 2).unwrap();
        assert_eq!(a.mean_accuracy, b.mean_accuracy);
        assert_eq!(a.fold_records.len(), 2);
        // mean is the exact arithmetic mean
        let expect = a.fold_records.iter().map(|r| r.accuracy).sum::<f64>() / 2.0;
        assert_eq!(a.mean_accuracy, expect);
        // input untouched
        assert_eq!(net.block_param_vector(BlockId(1)), before);
        assert_eq!(net.head().weight.data(), &head_before[..]);
    }

    #[test]
    fn k2_on_four_samples_gives_two_folds_of_two() {
        let labels = vec![0, 1, 0, 1];
        let folds = kfold_split(4, 2, &labels, 3).unwrap();
        assert_eq!(folds.folds.len(), 2);
        assert!(folds.folds.iter().all(|f| f.len() == 2));
    }

    #[test]
    fn lr_sweep_singleton_and_tie_rules() {
        let ds = toy_blobs(24, 4, 6);
        let net = BlockNetwork::build(4, 1, 2, 7).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let (lr, _) = lr_sweep(&net, &SubsetSpec::empty(), &ds, &[3e-4], &cfg, 2).unwrap();
        assert_eq!(lr, 3e-4);

        // vanishing rates cannot move any prediction, so the scores tie and
        // the larger rate wins
        let tiny_cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let lrs = [1e-13, 1e-12];
        let (lr, _) = lr_sweep(&net, &SubsetSpec::empty(), &ds, &lrs, &tiny_cfg, 2).unwrap();
        assert_eq!(lr, 1e-12);
    }

    #[test]
    fn default_sweep_grid_matches_protocol() {
        assert_eq!(SWEEP_LRS, [1e-3, 5e-4, 1e-4, 5e-5, 1e-5]);
    }

    #[test]
    fn cosine_schedule_endpoints_and_monotonicity() {
        let lr0 = 0.01;
        let total = 40;
        assert_eq!(cosine_lr(lr0, 0, total), lr0);
        let mut prev = f64::INFINITY;
        for s in 0..total {
            let lr = cosine_lr(lr0, s, total);
            assert!(lr <= prev, "schedule must be nonincreasing");
            assert!(lr >= 0.0);
            prev = lr;
        }
        let last = cosine_lr(lr0, total - 1, total);
        let expected = lr0 * 0.5 * (1.0 + (std::f64::consts::PI * (total as f64 - 1.0) / total as f64).cos());
        assert_eq!(last, expected);
    }

    #[test]
    fn train_is_deterministic() {
        let ds = gen_source_task(6, 3, 60, 1, 21).unwrap();
        let run = || {
            let mut net = BlockNetwork::build(6, 2, 3, 5).unwrap();
            let subset = SubsetSpec::for_network(&net, &[BlockId(2)]).unwrap();
            net.set_trainable(&subset).unwrap();
            let cfg = TrainConfig {
                epochs: 4,
                seed: 77,
                ..TrainConfig::default()
            };
            let rec = train(&mut net, &ds, &cfg).unwrap();
            (rec, net.block_param_vector(BlockId(2)))
        };
        let (r1, p1) = run();
        let (r2, p2) = run();
        assert_eq!(r1.loss.to_bits(), r2.loss.to_bits());
        assert_eq!(p1, p2);
    }
}

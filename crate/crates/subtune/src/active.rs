//! Pool-based active learning around subset finetuning: margin-based
//! acquisition against a random-sampling control.
//!
//! Every round retrains from the pretrained snapshot on all labels acquired
//! so far; no parameters leak between rounds.

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::model::{BlockNetwork, SubsetSpec};
use crate::nn::{softmax, Tensor2};
use crate::train::{evaluate, train, TrainConfig};
use crate::util::{rng_from_seed, split_seed};
use crate::{Error, Result};

/// A dataset with a labeled mask and the acquisition history.
#[derive(Debug, Clone)]
pub struct LabeledPool {
    pub dataset: Dataset,
    pub labeled: Vec<bool>,
    /// (round, indices acquired that round)
    pub history: Vec<(usize, Vec<usize>)>,
}

impl LabeledPool {
    pub fn new(dataset: Dataset) -> LabeledPool {
        let n = dataset.len();
        LabeledPool {
            dataset,
            labeled: vec![false; n],
            history: Vec::new(),
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled.iter().filter(|&&b| b).count()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.labeled.len()).filter(|&i| self.labeled[i]).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.labeled.len()).filter(|&i| !self.labeled[i]).collect()
    }

    fn acquire(&mut self, round: usize, indices: &[usize]) -> Result<()> {
        for &i in indices {
            if self.labeled[i] {
                return Err(Error::InvalidConfig(format!(
                    "index {i} acquired twice"
                )));
            }
            self.labeled[i] = true;
        }
        self.history.push((round, indices.to_vec()));
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Margin,
    Random,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Margin => "margin",
            Strategy::Random => "random",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "margin" => Ok(Strategy::Margin),
            "random" => Ok(Strategy::Random),
            other => Err(Error::InvalidConfig(format!("unknown strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ALConfig {
    /// Examples labeled uniformly at random before the first round.
    pub initial_random: usize,
    /// Cumulative label budgets; strictly increasing.
    pub budgets: Vec<usize>,
    pub strategy: Strategy,
    pub seed: u64,
    pub train: TrainConfig,
}

impl ALConfig {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.budgets.is_empty() {
            return Err(Error::InvalidConfig("no budgets configured".into()));
        }
        if self.initial_random == 0 || self.initial_random > self.budgets[0] {
            return Err(Error::InvalidConfig(format!(
                "initial_random must be in 1..={}, got {}",
                self.budgets[0], self.initial_random
            )));
        }
        if !self.budgets.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig("budgets must be strictly increasing".into()));
        }
        if *self.budgets.last().unwrap() > pool_size {
            return Err(Error::InsufficientPool {
                requested: *self.budgets.last().unwrap(),
                available: pool_size,
            });
        }
        Ok(())
    }
}

/// Desk-scale rescaling of the reference budget schedule
/// (100 initial; 500/1000/2500/5000/10000 on a 50k pool), with a floor of
/// 10 labels per round.
pub fn scaled_default_budgets(pool_size: usize) -> (usize, Vec<usize>) {
    let scale = pool_size as f64 / 50_000.0;
    let initial = ((100.0 * scale).round() as usize).max(10);
    let mut budgets = Vec::new();
    let mut prev = initial;
    for base in [500.0, 1000.0, 2500.0, 5000.0, 10_000.0] {
        let b = ((base * scale).round() as usize).max(prev + 10);
        budgets.push(b.min(pool_size));
        prev = b;
    }
    budgets.dedup();
    (initial, budgets)
}

/// Margin of a probability vector: largest minus second-largest entry.
pub fn classification_margin(probs: &[f64]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "margin needs at least 2 classes, got {}",
            probs.len()
        )));
    }
    let mut top = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &p in probs {
        if p > top {
            second = top;
            top = p;
        } else if p > second {
            second = p;
        }
    }
    Ok(top - second)
}

/// The `n` unlabeled pool indices with the smallest classification margins
/// under the model's softmax outputs; ties break toward the smaller index.
pub fn select_queries(net: &BlockNetwork, pool: &LabeledPool, n: usize) -> Result<Vec<usize>> {
    let unlabeled = pool.unlabeled_indices();
    if unlabeled.len() < n {
        return Err(Error::InsufficientPool {
            requested: n,
            available: unlabeled.len(),
        });
    }
    // one batched forward over the whole unlabeled pool
    let d = pool.dataset.dim();
    let mut data = Vec::with_capacity(unlabeled.len() * d);
    for &i in &unlabeled {
        data.extend_from_slice(pool.dataset.x.row(i));
    }
    let x = Tensor2::from_vec(unlabeled.len(), d, data)?;
    let (logits, _) = net.forward(&x)?;
    let probs = softmax(&logits);
    let mut margins: Vec<(usize, f64)> = unlabeled
        .iter()
        .enumerate()
        .map(|(r, &i)| Ok((i, classification_margin(probs.row(r))?)))
        .collect::<Result<_>>()?;
    margins.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite margins").then(a.0.cmp(&b.0)));
    let mut picked: Vec<usize> = margins[..n].iter().map(|&(i, _)| i).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// One curve point: the model trained at `budget` labels.
#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub round: usize,
    pub budget: usize,
    pub test_accuracy: f64,
}

/// Runs the acquisition loop. Round 0 labels `initial_random` examples
/// uniformly; each round clones the pretrained network, unfreezes `subset`,
/// trains on every label acquired so far, evaluates on `test`, then
/// acquires up to the next budget with the configured strategy.
pub fn al_loop(
    pretrained: &BlockNetwork,
    pool: &mut LabeledPool,
    subset: &SubsetSpec,
    test: &Dataset,
    cfg: &ALConfig,
) -> Result<Vec<CurvePoint>> {
    cfg.validate(pool.dataset.len())?;
    if pool.labeled_count() > 0 {
        return Err(Error::InvalidConfig("pool already has labels".into()));
    }

    // round 0 seeding
    let mut order = pool.unlabeled_indices();
    let mut rng = rng_from_seed(split_seed(cfg.seed, 0));
    order.shuffle(&mut rng);
    let seed_set: Vec<usize> = {
        let mut s = order[..cfg.initial_random].to_vec();
        s.sort_unstable();
        s
    };
    pool.acquire(0, &seed_set)?;

    let mut curve = Vec::with_capacity(cfg.budgets.len() + 1);
    let rounds = cfg.budgets.len() + 1;
    for round in 0..rounds {
        let labeled = pool.labeled_indices();
        let train_ds = pool.dataset.select(&labeled);
        let mut net = pretrained.clone();
        net.attach_head(
            net.head_kind(),
            pool.dataset.classes,
            split_seed(cfg.seed, 0x4ead + round as u64),
        )?;
        net.set_trainable(subset)?;
        let round_cfg = cfg.train.with_seed(split_seed(cfg.seed, 0x2a1 + round as u64));
        train(&mut net, &train_ds, &round_cfg)?;
        let rec = evaluate(&net, test)?;
        curve.push(CurvePoint {
            round,
            budget: labeled.len(),
            test_accuracy: rec.accuracy,
        });

        if round < cfg.budgets.len() {
            let want = cfg.budgets[round] - pool.labeled_count();
            if want > 0 {
                let picked = match cfg.strategy {
                    Strategy::Margin => select_queries(&net, pool, want)?,
                    Strategy::Random => {
                        let mut unlabeled = pool.unlabeled_indices();
                        if unlabeled.len() < want {
                            return Err(Error::InsufficientPool {
                                requested: want,
                                available: unlabeled.len(),
                            });
                        }
                        let mut rng =
                            rng_from_seed(split_seed(cfg.seed, 0xa2d + round as u64));
                        unlabeled.shuffle(&mut rng);
                        let mut s = unlabeled[..want].to_vec();
                        s.sort_unstable();
                        s
                    }
                };
                pool.acquire(round + 1, &picked)?;
            }
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_source_task;
    use crate::nn::BlockId;
    use rand::Rng;

    #[test]
    fn margin_examples() {
        assert_eq!(classification_margin(&[0.5, 0.3, 0.2]).unwrap(), 0.2);
        let uniform = vec![0.25; 4];
        assert_eq!(classification_margin(&uniform).unwrap(), 0.0);
        assert_eq!(classification_margin(&[0.0, 1.0, 0.0]).unwrap(), 1.0);
        assert!(classification_margin(&[1.0]).is_err());
    }

    #[test]
    fn select_queries_returns_all_when_asked() {
        let ds = gen_source_task(4, 2, 20, 1, 3).unwrap();
        let net = BlockNetwork::build(4, 1, 2, 1).unwrap();
        let pool = LabeledPool::new(ds);
        let picked = select_queries(&net, &pool, 20).unwrap();
        assert_eq!(picked, (0..20).collect::<Vec<_>>());
        assert!(select_queries(&net, &pool, 21).is_err());
    }

    #[test]
    fn constant_model_ties_break_by_index() {
        let ds = gen_source_task(4, 2, 15, 1, 3).unwrap();
        // zero head on top of anything gives constant logits and margin 0
        let mut net = BlockNetwork::build(4, 1, 2, 1).unwrap();
        let zero_head = crate::nn::DenseLayer::zeros(4, 2);
        net.set_head(crate::model::HeadKind::Subtune, zero_head).unwrap();
        let mut pool = LabeledPool::new(ds);
        pool.acquire(0, &[0, 3]).unwrap();
        let picked = select_queries(&net, &pool, 4).unwrap();
        assert_eq!(picked, vec![1, 2, 4, 5], "first unlabeled indices win ties");
    }

    #[test]
    fn select_queries_matches_full_sort_oracle() {
        let mut rng = crate::util::rng_from_seed(44);
        for trial in 0..30 {
            let n = rng.gen_range(10..60);
            let classes = rng.gen_range(2..5);
            let ds = gen_source_task(5, classes, n, 1, 500 + trial).unwrap();
            let net = BlockNetwork::build(5, 2, classes, 600 + trial).unwrap();
            let mut pool = LabeledPool::new(ds);
            // label a random prefix
            let k = rng.gen_range(0..n / 2);
            let labeled: Vec<usize> = (0..k).collect();
            if !labeled.is_empty() {
                pool.acquire(0, &labeled).unwrap();
            }
            let want = rng.gen_range(1..=(n - k).min(7));
            let picked = select_queries(&net, &pool, want).unwrap();

            // brute force: margin of every unlabeled sample, stable sort
            let mut all: Vec<(usize, f64)> = pool
                .unlabeled_indices()
                .into_iter()
                .map(|i| {
                    let row = pool.dataset.x.row(i);
                    let x = Tensor2::from_vec(1, row.len(), row.to_vec()).unwrap();
                    let (logits, _) = net.forward(&x).unwrap();
                    let p = softmax(&logits);
                    (i, classification_margin(p.row(0)).unwrap())
                })
                .collect();
            all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            let mut expect: Vec<usize> = all[..want].iter().map(|&(i, _)| i).collect();
            expect.sort_unstable();
            assert_eq!(picked, expect, "trial {trial}");
        }
    }

    fn quick_cfg(strategy: Strategy, budgets: Vec<usize>, initial: usize) -> ALConfig {
        ALConfig {
            initial_random: initial,
            budgets,
            strategy,
            seed: 9,
            train: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn loop_accounting_and_nesting() {
        let ds = gen_source_task(4, 2, 10, 1, 7).unwrap();
        let test = gen_source_task(4, 2, 30, 1, 8).unwrap();
        let net = BlockNetwork::build(4, 2, 2, 5).unwrap();
        let subset = SubsetSpec::for_network(&net, &[BlockId(2)]).unwrap();
        let mut pool = LabeledPool::new(ds);
        let cfg = quick_cfg(Strategy::Margin, vec![4, 8], 2);
        let curve = al_loop(&net, &mut pool, &subset, &test, &cfg).unwrap();
        assert_eq!(curve.len(), 3);
        assert_eq!(curve[0].budget, 2);
        assert_eq!(curve[1].budget, 4);
        assert_eq!(curve[2].budget, 8);
        // history: 2 acquired, then 2 more, then 4 more
        let sizes: Vec<usize> = pool.history.iter().map(|(_, v)| v.len()).collect();
        assert_eq!(sizes, vec![2, 2, 4]);
        // nested and never re-acquired
        let mut seen = std::collections::HashSet::new();
        for (_, batch) in &pool.history {
            for &i in batch {
                assert!(seen.insert(i), "index {i} acquired twice");
            }
        }
        assert_eq!(pool.labeled_count(), 8);
    }

    #[test]
    fn round_zero_identical_across_strategies() {
        let ds = gen_source_task(4, 2, 12, 1, 7).unwrap();
        let test = gen_source_task(4, 2, 30, 1, 8).unwrap();
        let net = BlockNetwork::build(4, 2, 2, 5).unwrap();
        let subset = SubsetSpec::empty();
        let mut pool_m = LabeledPool::new(ds.clone());
        let mut pool_r = LabeledPool::new(ds);
        let cfg_m = quick_cfg(Strategy::Margin, vec![6], 3);
        let cfg_r = quick_cfg(Strategy::Random, vec![6], 3);
        let curve_m = al_loop(&net, &mut pool_m, &subset, &test, &cfg_m).unwrap();
        let curve_r = al_loop(&net, &mut pool_r, &subset, &test, &cfg_r).unwrap();
        assert_eq!(pool_m.history[0].1, pool_r.history[0].1, "same round-0 seed set");
        assert_eq!(curve_m[0].test_accuracy, curve_r[0].test_accuracy);
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let ds = gen_source_task(4, 2, 10, 1, 7).unwrap();
        let pool = LabeledPool::new(ds);
        let bad_budget = quick_cfg(Strategy::Margin, vec![20], 2);
        assert!(bad_budget.validate(pool.dataset.len()).is_err());
        let bad_initial = quick_cfg(Strategy::Margin, vec![4], 5);
        assert!(bad_initial.validate(pool.dataset.len()).is_err());
        let non_increasing = quick_cfg(Strategy::Margin, vec![4, 4], 2);
        assert!(non_increasing.validate(pool.dataset.len()).is_err());
    }

    #[test]
    fn scaled_budgets_have_floor() {
        let (initial, budgets) = scaled_default_budgets(500);
        assert!(initial >= 10);
        assert!(budgets.windows(2).all(|w| w[0] < w[1]));
        assert!(*budgets.last().unwrap() <= 500);
    }
}

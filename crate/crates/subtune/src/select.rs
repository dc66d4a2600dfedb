//! Layer-subset selection: finetuning profiles (single block, consecutive
//! windows, all pairs), greedy subset selection with an injectable
//! evaluator, the norm-constrained trainer, and the generalization-gap
//! experiment built on top of it.
//!
//! Every candidate evaluation restarts from the same pretrained snapshot;
//! the loops fingerprint the snapshot to enforce that no state leaks
//! between candidates.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::data::{subsample, Dataset};
use crate::model::{BlockNetwork, SubsetSpec};
use crate::nn::BlockId;
use crate::train::{
    cv_score, cv_score_with_policy, evaluate, train, train_with_hook, EvalRecord, HeadPolicy,
    StepHook, TrainConfig,
};
use crate::util::{mean, split_seed, std_dev};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Evaluators
// ---------------------------------------------------------------------------

/// Scores a candidate subset; the greedy loop calls this for every
/// candidate. Implementations must be deterministic.
pub trait SubsetEvaluator: Sync {
    fn evaluate(&self, subset: &SubsetSpec) -> Result<f64>;
    /// Total evaluate calls made so far.
    fn calls(&self) -> usize;
}

/// The real evaluator: k-fold cross-validated subtuning accuracy from the
/// pretrained snapshot.
pub struct CvEvaluator<'a> {
    pretrained: &'a BlockNetwork,
    dataset: &'a Dataset,
    cfg: TrainConfig,
    k: usize,
    head_policy: HeadPolicy,
    calls: AtomicUsize,
    baseline_digest: u64,
}

impl<'a> CvEvaluator<'a> {
    pub fn new(pretrained: &'a BlockNetwork, dataset: &'a Dataset, cfg: TrainConfig, k: usize) -> Self {
        Self::with_policy(pretrained, dataset, cfg, k, HeadPolicy::Fresh)
    }

    pub fn with_policy(
        pretrained: &'a BlockNetwork,
        dataset: &'a Dataset,
        cfg: TrainConfig,
        k: usize,
        head_policy: HeadPolicy,
    ) -> Self {
        CvEvaluator {
            baseline_digest: pretrained.snapshot_digest(),
            pretrained,
            dataset,
            cfg,
            k,
            head_policy,
            calls: AtomicUsize::new(0),
        }
    }
}

impl SubsetEvaluator for CvEvaluator<'_> {
    fn evaluate(&self, subset: &SubsetSpec) -> Result<f64> {
        // every candidate must see the identical pretrained state
        assert_eq!(
            self.pretrained.snapshot_digest(),
            self.baseline_digest,
            "pretrained snapshot changed between candidate evaluations"
        );
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(cv_score_with_policy(
            self.pretrained,
            subset,
            self.dataset,
            &self.cfg,
            self.k,
            self.head_policy,
        )?
        .mean_accuracy)
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Table-backed evaluator keyed by the sorted block ids; lets the greedy
/// algorithm be tested without any training.
pub struct LookupEvaluator {
    table: BTreeMap<Vec<usize>, f64>,
    calls: AtomicUsize,
}

impl LookupEvaluator {
    pub fn new(entries: &[(&[usize], f64)]) -> LookupEvaluator {
        let mut table = BTreeMap::new();
        for (ids, score) in entries {
            let mut key = ids.to_vec();
            key.sort_unstable();
            table.insert(key, *score);
        }
        LookupEvaluator {
            table,
            calls: AtomicUsize::new(0),
        }
    }

    /// Parses `{"": 0.5, "2": 0.7, "1,2": 0.72}` with comma-separated
    /// block-id keys.
    pub fn from_json(json: &str) -> Result<LookupEvaluator> {
        let raw: BTreeMap<String, f64> = serde_json::from_str(json)?;
        let mut table = BTreeMap::new();
        for (key, score) in raw {
            let mut ids = Vec::new();
            for part in key.split(',').filter(|p| !p.trim().is_empty()) {
                let id: usize = part.trim().parse().map_err(|_| {
                    Error::InvalidConfig(format!("bad block id '{part}' in lookup key '{key}'"))
                })?;
                ids.push(id);
            }
            ids.sort_unstable();
            table.insert(ids, score);
        }
        Ok(LookupEvaluator {
            table,
            calls: AtomicUsize::new(0),
        })
    }
}

impl SubsetEvaluator for LookupEvaluator {
    fn evaluate(&self, subset: &SubsetSpec) -> Result<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let key = subset.sorted_ids();
        self.table.get(&key).copied().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "lookup table has no entry for subset {{{}}}",
                key.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
            ))
        })
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

// ---------------------------------------------------------------------------
// Finetuning profiles
// ---------------------------------------------------------------------------

/// How a profile entry is scored.
#[derive(Debug, Clone, Copy)]
pub enum ProfileEval<'a> {
    /// k-fold cross-validation on the train set.
    Cv { k: usize },
    /// Train on the train set, score on a held-out set.
    Holdout { test: &'a Dataset },
}

#[derive(Debug, Clone)]
pub struct ProfileEntry {
    pub l_start: usize,
    pub l_end: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ProfileResult {
    pub group_size: usize,
    pub entries: Vec<ProfileEntry>,
}

fn holdout_score(
    pretrained: &BlockNetwork,
    subset: &SubsetSpec,
    train_ds: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut net = pretrained.clone();
    net.attach_head(net.head_kind(), train_ds.classes, split_seed(cfg.seed, 0xead))?;
    net.set_trainable(subset)?;
    train(&mut net, train_ds, cfg)?;
    Ok(evaluate(&net, test)?.accuracy)
}

fn subset_score(
    pretrained: &BlockNetwork,
    subset: &SubsetSpec,
    train_ds: &Dataset,
    eval: &ProfileEval,
    cfg: &TrainConfig,
) -> Result<f64> {
    match eval {
        ProfileEval::Cv { k } => Ok(cv_score(pretrained, subset, train_ds, cfg, *k)?.mean_accuracy),
        ProfileEval::Holdout { test } => holdout_score(pretrained, subset, train_ds, test, cfg),
    }
}

/// Accuracy of tuning each window of `group_size` consecutive blocks,
/// averaged over seeds. Entry `i` covers blocks `[i+1, i+group_size]`.
pub fn finetune_profile(
    pretrained: &BlockNetwork,
    train_ds: &Dataset,
    group_size: usize,
    eval: ProfileEval,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<ProfileResult> {
    let n = pretrained.num_blocks();
    if group_size < 1 || group_size > n {
        return Err(Error::InvalidConfig(format!(
            "group size {group_size} out of range for {n} blocks"
        )));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("profile needs at least one seed".into()));
    }
    let digest = pretrained.snapshot_digest();
    let windows: Vec<usize> = (1..=(n - group_size + 1)).collect();
    let jobs: Vec<(usize, u64)> = windows
        .iter()
        .flat_map(|&w| seeds.iter().map(move |&s| (w, s)))
        .collect();
    let scores: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(w, seed)| {
            assert_eq!(pretrained.snapshot_digest(), digest, "snapshot drift");
            let ids: Vec<BlockId> = (w..w + group_size).map(BlockId).collect();
            let subset = SubsetSpec::for_network(pretrained, &ids)?;
            subset_score(pretrained, &subset, train_ds, &eval, &cfg.with_seed(seed))
        })
        .collect();
    let scores: Vec<f64> = scores.into_iter().collect::<Result<_>>()?;

    let mut entries = Vec::with_capacity(windows.len());
    for (wi, &w) in windows.iter().enumerate() {
        let s: Vec<f64> = (0..seeds.len()).map(|si| scores[wi * seeds.len() + si]).collect();
        entries.push(ProfileEntry {
            l_start: w,
            l_end: w + group_size - 1,
            mean_acc: mean(&s),
            std_acc: std_dev(&s),
            scores: s,
        });
    }
    Ok(ProfileResult {
        group_size,
        entries,
    })
}

/// Accuracy of tuning every unordered pair of blocks (single run per pair);
/// the diagonal holds the single-block results. Returned matrix is
/// symmetric, indexed `[i][j]` with 0-based block positions.
pub fn pairwise_profile(
    pretrained: &BlockNetwork,
    train_ds: &Dataset,
    eval: ProfileEval,
    cfg: &TrainConfig,
) -> Result<Vec<Vec<f64>>> {
    let n = pretrained.num_blocks();
    if n < 2 {
        return Err(Error::InvalidConfig("pairwise profile needs at least 2 blocks".into()));
    }
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 1..=n {
        for j in i..=n {
            pairs.push((i, j));
        }
    }
    let scores: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let ids: Vec<BlockId> = if i == j {
                vec![BlockId(i)]
            } else {
                vec![BlockId(i), BlockId(j)]
            };
            let subset = SubsetSpec::for_network(pretrained, &ids)?;
            subset_score(pretrained, &subset, train_ds, &eval, cfg)
        })
        .collect();
    let scores: Vec<f64> = scores.into_iter().collect::<Result<_>>()?;
    let mut matrix = vec![vec![0.0; n]; n];
    for (&(i, j), &s) in pairs.iter().zip(&scores) {
        matrix[i - 1][j - 1] = s;
        matrix[j - 1][i - 1] = s;
    }
    Ok(matrix)
}

// ---------------------------------------------------------------------------
// Greedy subset selection
// ---------------------------------------------------------------------------

/// Initialization of the incumbent score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GreedyInit {
    /// Incumbent starts at the empty-subset (linear probing) score, so the
    /// first accepted block must beat linear probing.
    LinearProbe,
    /// Incumbent starts at zero: the first block is accepted even when it
    /// underperforms linear probing.
    Zero,
}

impl GreedyInit {
    pub fn as_str(self) -> &'static str {
        match self {
            GreedyInit::LinearProbe => "linear_probe",
            GreedyInit::Zero => "zero",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GreedyOptions {
    /// Minimum accuracy gain to accept another block.
    pub epsilon: f64,
    /// Maximum number of blocks to select.
    pub k_max: Option<usize>,
    /// Trainable-parameter budget over the selected blocks.
    pub budget_r: Option<usize>,
    pub init: GreedyInit,
    /// Accept the per-round argmax regardless of epsilon (used to force an
    /// exact subset size); budget and k_max still apply.
    pub forced: bool,
}

impl Default for GreedyOptions {
    fn default() -> Self {
        GreedyOptions {
            // below single-fold noise at this scale, above float jitter
            epsilon: 0.002,
            k_max: None,
            budget_r: None,
            init: GreedyInit::LinearProbe,
            forced: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CandidateEval {
    pub block: BlockId,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct GreedyStep {
    pub candidates: Vec<CandidateEval>,
    pub chosen: Option<BlockId>,
    pub accepted_score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GreedyTrace {
    pub steps: Vec<GreedyStep>,
    pub final_subset: SubsetSpec,
    pub epsilon: f64,
    pub k_max: Option<usize>,
    pub budget_r: Option<usize>,
    /// Incumbent score before the first step (linear-probing CV score under
    /// [`GreedyInit::LinearProbe`], literal zero under [`GreedyInit::Zero`]).
    pub baseline_score: f64,
    pub init: GreedyInit,
    pub forced: bool,
}

impl GreedyTrace {
    /// Candidate evaluations across all steps (the baseline evaluation is
    /// not part of the scan).
    pub fn candidate_evaluations(&self) -> usize {
        self.steps.iter().map(|s| s.candidates.len()).sum()
    }

    pub fn accepted_scores(&self) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.accepted_score).collect()
    }
}

/// Greedy subset selection: each round scores every block outside the
/// current subset joined to it, takes the argmax (ties toward the smaller
/// block id), and accepts it only if the gain exceeds `epsilon` and the
/// parameter budget allows. Stops at the first rejection or at `k_max`.
pub fn greedy_subtune(
    net: &BlockNetwork,
    evaluator: &dyn SubsetEvaluator,
    opts: &GreedyOptions,
) -> Result<GreedyTrace> {
    if opts.epsilon < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "epsilon must be >= 0, got {}",
            opts.epsilon
        )));
    }
    let n = net.num_blocks();
    let k_max = opts.k_max.unwrap_or(n).min(n);
    let mut selected: Vec<BlockId> = Vec::new();
    let mut best_score = match opts.init {
        GreedyInit::LinearProbe => evaluator.evaluate(&SubsetSpec::empty())?,
        GreedyInit::Zero => 0.0,
    };
    let baseline_score = best_score;
    let mut steps = Vec::new();

    while selected.len() < k_max {
        let remaining: Vec<BlockId> = (1..=n)
            .map(BlockId)
            .filter(|id| !selected.contains(id))
            .collect();
        if remaining.is_empty() {
            break;
        }
        let candidates: Vec<Result<CandidateEval>> = remaining
            .par_iter()
            .map(|&id| {
                let mut ids = selected.clone();
                ids.push(id);
                let subset = SubsetSpec::for_network(net, &ids)?;
                Ok(CandidateEval {
                    block: id,
                    score: evaluator.evaluate(&subset)?,
                })
            })
            .collect();
        let candidates: Vec<CandidateEval> = candidates.into_iter().collect::<Result<_>>()?;

        // argmax with ties toward the smaller block id (candidates are in
        // ascending id order, so strict improvement is required to replace)
        let mut best_idx = 0;
        for (i, c) in candidates.iter().enumerate().skip(1) {
            if c.score > candidates[best_idx].score {
                best_idx = i;
            }
        }
        let best = candidates[best_idx].clone();

        let mut trial = selected.clone();
        trial.push(best.block);
        let trial_subset = SubsetSpec::for_network(net, &trial)?;
        let within_budget = opts
            .budget_r
            .map(|b| trial_subset.param_count() <= b)
            .unwrap_or(true);
        let improves = best.score > best_score + opts.epsilon;
        let accept = within_budget && (opts.forced || improves);

        if accept {
            selected = trial;
            best_score = best.score;
            steps.push(GreedyStep {
                candidates,
                chosen: Some(best.block),
                accepted_score: Some(best.score),
            });
        } else {
            steps.push(GreedyStep {
                candidates,
                chosen: None,
                accepted_score: None,
            });
            break;
        }
    }

    Ok(GreedyTrace {
        steps,
        final_subset: SubsetSpec::for_network(net, &selected)?,
        epsilon: opts.epsilon,
        k_max: opts.k_max,
        budget_r: opts.budget_r,
        baseline_score,
        init: opts.init,
        forced: opts.forced,
    })
}

// ---------------------------------------------------------------------------
// Norm-constrained training
// ---------------------------------------------------------------------------

struct BallProjection {
    subset: Vec<BlockId>,
    delta: f64,
}

impl StepHook for BallProjection {
    fn after_step(&mut self, net: &mut BlockNetwork) {
        if self.subset.is_empty() {
            return;
        }
        let mut sq = 0.0;
        for &id in &self.subset {
            let live = net.block_param_vector(id);
            let snap = net.snapshot_param_vector(id);
            for (l, s) in live.iter().zip(&snap) {
                let d = l - s;
                sq += d * d;
            }
        }
        let norm = sq.sqrt();
        if norm > self.delta {
            let scale = self.delta / norm;
            for &id in &self.subset {
                net.scale_block_delta(id, scale);
            }
        }
    }
}

/// Result of a norm-constrained training run.
#[derive(Debug, Clone)]
pub struct LinearizedRecord {
    pub train: EvalRecord,
    pub holdout: EvalRecord,
    /// `||theta_S - theta_S_init||_2` at exit.
    pub delta_norm: f64,
}

/// Trains only `subset` (plus the head), projecting the concatenated block
/// displacement onto the L2 ball of radius `delta` after every optimizer
/// step. The head is excluded from the ball. Returns final train and
/// held-out metrics plus the exit displacement norm.
pub fn linearized_evaluate(
    pretrained: &BlockNetwork,
    subset: &SubsetSpec,
    train_ds: &Dataset,
    holdout_ds: &Dataset,
    delta: f64,
    cfg: &TrainConfig,
) -> Result<LinearizedRecord> {
    if !(delta > 0.0) {
        return Err(Error::InvalidConfig(format!("delta must be > 0, got {delta}")));
    }
    let mut net = pretrained.clone();
    net.attach_head(net.head_kind(), train_ds.classes, split_seed(cfg.seed, 0xead))?;
    net.set_trainable(subset)?;
    let mut hook = BallProjection {
        subset: subset.blocks().to_vec(),
        delta,
    };
    let train_rec = train_with_hook(&mut net, train_ds, cfg, &mut hook)?;
    let holdout_rec = evaluate(&net, holdout_ds)?;
    let mut sq = 0.0;
    for &id in subset.blocks() {
        let live = net.block_param_vector(id);
        let snap = net.snapshot_param_vector(id);
        for (l, s) in live.iter().zip(&snap) {
            let d = l - s;
            sq += d * d;
        }
    }
    Ok(LinearizedRecord {
        train: train_rec,
        holdout: holdout_rec,
        delta_norm: sq.sqrt(),
    })
}

// ---------------------------------------------------------------------------
// Generalization-gap experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GapExperimentConfig {
    /// Subset sizes in blocks; size 0 is head-only.
    pub subset_sizes: Vec<usize>,
    /// Norm-ball radius for the constrained trainer.
    pub delta: f64,
    /// Training-set size drawn per seed from the train pool.
    pub m: usize,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Folds for the subset-selection evaluator.
    pub cv_k: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GapRecord {
    pub r_prime: usize,
    pub delta: f64,
    pub m: usize,
    pub seed: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub gap: f64,
}

/// For each (subset size, seed): draw `m` training samples, pick the best
/// subset of that size by forced greedy selection, train with the
/// norm-constrained trainer and record the train/test accuracy gap.
pub fn gap_experiment(
    pretrained: &BlockNetwork,
    train_pool: &Dataset,
    test: &Dataset,
    cfg: &GapExperimentConfig,
) -> Result<Vec<GapRecord>> {
    if cfg.m < 1 {
        return Err(Error::InvalidConfig("gap experiment needs m >= 1".into()));
    }
    if !(cfg.delta > 0.0) {
        return Err(Error::InvalidConfig("gap experiment needs delta > 0".into()));
    }
    let mut records = Vec::new();
    for &size in &cfg.subset_sizes {
        if size > pretrained.num_blocks() {
            return Err(Error::InvalidConfig(format!(
                "subset size {size} exceeds {} blocks",
                pretrained.num_blocks()
            )));
        }
        for &seed in &cfg.seeds {
            let train_m = subsample(train_pool, cfg.m, true, split_seed(seed, 0xda7a))?;
            let run_cfg = cfg.train.with_seed(split_seed(seed, 0x9a9));
            let subset = if size == 0 {
                SubsetSpec::empty()
            } else {
                let evaluator = CvEvaluator::new(pretrained, &train_m, run_cfg.clone(), cfg.cv_k);
                let opts = GreedyOptions {
                    epsilon: 0.0,
                    k_max: Some(size),
                    budget_r: None,
                    init: GreedyInit::LinearProbe,
                    forced: true,
                };
                greedy_subtune(pretrained, &evaluator, &opts)?.final_subset
            };
            let rec = linearized_evaluate(pretrained, &subset, &train_m, test, cfg.delta, &run_cfg)?;
            records.push(GapRecord {
                r_prime: subset.param_count(),
                delta: cfg.delta,
                m: cfg.m,
                seed,
                train_acc: rec.train.accuracy,
                test_acc: rec.holdout.accuracy,
                gap: rec.train.accuracy - rec.holdout.accuracy,
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_source_task;

    fn demo_table() -> LookupEvaluator {
        LookupEvaluator::new(&[
            (&[], 0.5),
            (&[1], 0.6),
            (&[2], 0.7),
            (&[3], 0.65),
            (&[1, 2], 0.72),
            (&[2, 3], 0.71),
            (&[1, 2, 3], 0.722),
        ])
    }

    #[test]
    fn greedy_on_lookup_oracle_selects_two_then_one() {
        let net = BlockNetwork::build(4, 3, 2, 0).unwrap();
        let evaluator = demo_table();
        let opts = GreedyOptions {
            epsilon: 0.005,
            ..GreedyOptions::default()
        };
        let trace = greedy_subtune(&net, &evaluator, &opts).unwrap();
        assert_eq!(trace.final_subset.render(), "2,1");
        assert_eq!(trace.baseline_score, 0.5);
        // steps: accept 2, accept 1, reject 3 (gain 0.002 < 0.005)
        assert_eq!(trace.steps.len(), 3);
        assert_eq!(trace.steps[0].chosen, Some(BlockId(2)));
        assert_eq!(trace.steps[1].chosen, Some(BlockId(1)));
        assert_eq!(trace.steps[2].chosen, None);
        assert_eq!(trace.candidate_evaluations(), 3 + 2 + 1);
        // the evaluator also served the baseline call
        assert_eq!(evaluator.calls(), 7);
        // accepted scores strictly increase by more than epsilon
        let accepted = trace.accepted_scores();
        assert_eq!(accepted, vec![0.7, 0.72]);
        let mut prev = trace.baseline_score;
        for s in accepted {
            assert!(s > prev + opts.epsilon);
            prev = s;
        }
    }

    #[test]
    fn greedy_with_huge_epsilon_returns_empty_subset() {
        let net = BlockNetwork::build(4, 3, 2, 0).unwrap();
        let evaluator = demo_table();
        let opts = GreedyOptions {
            epsilon: f64::INFINITY,
            ..GreedyOptions::default()
        };
        let trace = greedy_subtune(&net, &evaluator, &opts).unwrap();
        assert!(trace.final_subset.is_empty());
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.steps[0].chosen, None);
    }

    #[test]
    fn greedy_call_count_bounded_by_loop_structure() {
        let net = BlockNetwork::build(4, 3, 2, 0).unwrap();
        let evaluator = demo_table();
        let trace = greedy_subtune(&net, &evaluator, &GreedyOptions::default()).unwrap();
        let n = 3;
        let bound = n * (trace.final_subset.len() + 1);
        assert!(trace.candidate_evaluations() <= bound);
    }

    #[test]
    fn greedy_zero_init_accepts_first_block_even_below_baseline() {
        // every single block scores below the linear probe's 0.5
        let evaluator = LookupEvaluator::new(&[
            (&[], 0.5),
            (&[1], 0.4),
            (&[2], 0.45),
            (&[1, 2], 0.455),
        ]);
        let net = BlockNetwork::build(4, 2, 2, 0).unwrap();
        let lp = greedy_subtune(
            &net,
            &evaluator,
            &GreedyOptions {
                epsilon: 0.01,
                ..GreedyOptions::default()
            },
        )
        .unwrap();
        assert!(lp.final_subset.is_empty(), "linear-probe init rejects");

        let zero = greedy_subtune(
            &net,
            &evaluator,
            &GreedyOptions {
                epsilon: 0.01,
                init: GreedyInit::Zero,
                ..GreedyOptions::default()
            },
        )
        .unwrap();
        assert_eq!(zero.final_subset.render(), "2");
        assert_eq!(zero.baseline_score, 0.0);
    }

    #[test]
    fn greedy_respects_budget() {
        let net = BlockNetwork::build(4, 3, 2, 0).unwrap();
        // each block is 2*(16+4) = 40 params
        let evaluator = demo_table();
        let opts = GreedyOptions {
            epsilon: 0.005,
            budget_r: Some(40),
            ..GreedyOptions::default()
        };
        let trace = greedy_subtune(&net, &evaluator, &opts).unwrap();
        assert_eq!(trace.final_subset.render(), "2", "second block would bust the budget");
        assert!(trace.final_subset.param_count() <= 40);
    }

    #[test]
    fn greedy_respects_k_max_and_ties() {
        let net = BlockNetwork::build(4, 3, 2, 0).unwrap();
        // tie between blocks 1 and 2: smaller id wins
        let evaluator = LookupEvaluator::new(&[
            (&[], 0.1),
            (&[1], 0.6),
            (&[2], 0.6),
            (&[3], 0.5),
            (&[1, 2], 0.7),
            (&[1, 3], 0.65),
        ]);
        let opts = GreedyOptions {
            epsilon: 0.0,
            k_max: Some(1),
            ..GreedyOptions::default()
        };
        let trace = greedy_subtune(&net, &evaluator, &opts).unwrap();
        assert_eq!(trace.final_subset.render(), "1");
        assert_eq!(trace.steps.len(), 1);
    }

    #[test]
    fn greedy_is_pure_function_of_table_and_epsilon() {
        let net = BlockNetwork::build(4, 3, 2, 0).unwrap();
        let t1 = greedy_subtune(&net, &demo_table(), &GreedyOptions::default()).unwrap();
        let t2 = greedy_subtune(&net, &demo_table(), &GreedyOptions::default()).unwrap();
        assert_eq!(t1.final_subset, t2.final_subset);
        assert_eq!(t1.candidate_evaluations(), t2.candidate_evaluations());
        for (a, b) in t1.steps.iter().zip(&t2.steps) {
            for (x, y) in a.candidates.iter().zip(&b.candidates) {
                assert_eq!(x.block, y.block);
                assert_eq!(x.score, y.score);
            }
        }
    }

    #[test]
    fn lookup_from_json() {
        let evaluator = LookupEvaluator::from_json(
            r#"{"": 0.5, "1": 0.6, "2": 0.7, "3": 0.65, "1,2": 0.72, "2,3": 0.71, "1,2,3": 0.722}"#,
        )
        .unwrap();
        let net = BlockNetwork::build(4, 3, 2, 0).unwrap();
        let opts = GreedyOptions {
            epsilon: 0.005,
            ..GreedyOptions::default()
        };
        let trace = greedy_subtune(&net, &evaluator, &opts).unwrap();
        assert_eq!(trace.final_subset.render(), "2,1");
    }

    #[test]
    fn profile_entry_counts() {
        let net = BlockNetwork::build(4, 8, 2, 3).unwrap();
        let ds = gen_source_task(4, 2, 40, 1, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let p1 = finetune_profile(&net, &ds, 1, ProfileEval::Cv { k: 2 }, &cfg, &[0]).unwrap();
        assert_eq!(p1.entries.len(), 8);
        let p3 = finetune_profile(&net, &ds, 3, ProfileEval::Cv { k: 2 }, &cfg, &[0]).unwrap();
        assert_eq!(p3.entries.len(), 6);
        for e in &p3.entries {
            assert_eq!(e.l_end - e.l_start + 1, 3);
        }
        let pn = finetune_profile(&net, &ds, 8, ProfileEval::Cv { k: 2 }, &cfg, &[0]).unwrap();
        assert_eq!(pn.entries.len(), 1);
        assert_eq!(pn.entries[0].l_start, 1);
        assert_eq!(pn.entries[0].l_end, 8);
    }

    #[test]
    fn pairwise_matrix_is_symmetric_with_single_block_diagonal() {
        let net = BlockNetwork::build(4, 3, 2, 3).unwrap();
        let ds = gen_source_task(4, 2, 30, 1, 5).unwrap();
        let test = gen_source_task(4, 2, 30, 1, 6).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let m = pairwise_profile(&net, &ds, ProfileEval::Holdout { test: &test }, &cfg).unwrap();
        assert_eq!(m.len(), 3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[i][j], m[j][i]);
            }
        }
        // diagonal equals the single-block profile under the same protocol
        let p1 = finetune_profile(
            &net,
            &ds,
            1,
            ProfileEval::Holdout { test: &test },
            &cfg,
            &[cfg.seed],
        )
        .unwrap();
        for (i, e) in p1.entries.iter().enumerate() {
            assert_eq!(m[i][i], e.mean_acc);
        }
    }

    #[test]
    fn linearized_projection_contract() {
        let net = BlockNetwork::build(5, 3, 2, 9).unwrap();
        let train_ds = gen_source_task(5, 2, 40, 1, 10).unwrap();
        let test_ds = gen_source_task(5, 2, 40, 1, 11).unwrap();
        let subset = SubsetSpec::for_network(&net, &[BlockId(2), BlockId(3)]).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            lr: 0.05,
            ..TrainConfig::default()
        };
        for delta in [0.05, 0.3, 2.0] {
            let rec = linearized_evaluate(&net, &subset, &train_ds, &test_ds, delta, &cfg).unwrap();
            assert!(
                rec.delta_norm <= delta + 1e-9,
                "delta {delta}: exit norm {}",
                rec.delta_norm
            );
        }
    }

    #[test]
    fn linearized_tiny_delta_matches_linear_probe() {
        let net = BlockNetwork::build(5, 2, 2, 9).unwrap();
        let train_ds = gen_source_task(5, 2, 40, 1, 10).unwrap();
        let test_ds = gen_source_task(5, 2, 40, 1, 11).unwrap();
        let subset = SubsetSpec::for_network(&net, &[BlockId(1), BlockId(2)]).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let constrained =
            linearized_evaluate(&net, &subset, &train_ds, &test_ds, 1e-12, &cfg).unwrap();
        // same protocol with nothing but the head trainable
        let probe =
            linearized_evaluate(&net, &SubsetSpec::empty(), &train_ds, &test_ds, 1e-12, &cfg)
                .unwrap();
        assert!(
            (constrained.train.loss - probe.train.loss).abs() < 1e-6,
            "{} vs {}",
            constrained.train.loss,
            probe.train.loss
        );
    }

    #[test]
    fn linearized_larger_delta_never_raises_mean_train_loss() {
        let net = BlockNetwork::build(6, 3, 3, 19).unwrap();
        let train_ds = gen_source_task(6, 3, 45, 1, 20).unwrap();
        let test_ds = gen_source_task(6, 3, 45, 1, 21).unwrap();
        let subset = SubsetSpec::for_network(&net, &[BlockId(2), BlockId(3)]).unwrap();
        let mut means = Vec::new();
        for delta in [0.1, 0.5, 2.0] {
            let mut losses = Vec::new();
            for seed in 0..5u64 {
                let cfg = TrainConfig {
                    epochs: 8,
                    lr: 0.02,
                    seed,
                    ..TrainConfig::default()
                };
                let rec =
                    linearized_evaluate(&net, &subset, &train_ds, &test_ds, delta, &cfg).unwrap();
                losses.push(rec.train.loss);
            }
            means.push(mean(&losses));
        }
        assert!(
            means[0] >= means[1] - 1e-9 && means[1] >= means[2] - 1e-9,
            "feasible-set nesting violated: {means:?}"
        );
    }

    #[test]
    fn gap_experiment_produces_expected_grid() {
        let net = BlockNetwork::build(4, 3, 2, 29).unwrap();
        let pool = gen_source_task(4, 2, 60, 1, 30).unwrap();
        let test = gen_source_task(4, 2, 60, 1, 31).unwrap();
        let cfg = GapExperimentConfig {
            subset_sizes: vec![0, 1],
            delta: 1.0,
            m: 20,
            seeds: vec![0, 1],
            train: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            cv_k: 2,
        };
        let records = gap_experiment(&net, &pool, &test, &cfg).unwrap();
        assert_eq!(records.len(), 4);
        for r in &records {
            assert!((r.gap - (r.train_acc - r.test_acc)).abs() < 1e-15);
            assert_eq!(r.m, 20);
        }
        // size 0 has r' = 0; size 1 has one block's worth
        assert_eq!(records[0].r_prime, 0);
        assert_eq!(records[2].r_prime, 40);
    }
}

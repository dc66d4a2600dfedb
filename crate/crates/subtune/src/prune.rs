//! Channel-wise structured pruning of the tuned blocks, applied once before
//! training.
//!
//! A channel is a hidden unit of a block's first dense layer: removing it
//! drops a row of `lin1` (weight row + bias entry) and the matching column
//! of `lin2`, so the pruned forward equals the original forward with that
//! hidden activation forced to zero. The shared original network is never
//! mutated; pruning returns a private copy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{BlockNetwork, SubsetSpec};
use crate::nn::{DenseLayer, ResidualBlock, Tensor2};
use crate::{Error, Result};

/// Equal fraction per block, or one pool across all target blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneScope {
    Local,
    Global,
}

impl PruneScope {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneScope::Local => "local",
            PruneScope::Global => "global",
        }
    }
}

impl std::str::FromStr for PruneScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(PruneScope::Local),
            "global" => Ok(PruneScope::Global),
            other => Err(Error::InvalidConfig(format!("unknown prune scope '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneNorm {
    L1,
    L2,
}

impl PruneNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneNorm::L1 => "l1",
            PruneNorm::L2 => "l2",
        }
    }
}

impl std::str::FromStr for PruneNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(PruneNorm::L1),
            "l2" => Ok(PruneNorm::L2),
            other => Err(Error::InvalidConfig(format!("unknown prune norm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PruneSpec {
    pub scope: PruneScope,
    pub norm: PruneNorm,
    /// Fraction of channels to remove, in [0, 1).
    pub sparsity: f64,
    pub target_blocks: SubsetSpec,
}

impl PruneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::InvalidConfig(format!(
                "sparsity must be in [0, 1), got {}",
                self.sparsity
            )));
        }
        Ok(())
    }
}

/// Channels to remove per block, with their importance scores.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PrunePlan {
    /// block id -> sorted removed channel indices with scores
    pub removals: BTreeMap<usize, Vec<(usize, f64)>>,
}

impl PrunePlan {
    pub fn is_empty(&self) -> bool {
        self.removals.values().all(|v| v.is_empty())
    }

    pub fn removed_count(&self) -> usize {
        self.removals.values().map(|v| v.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<PrunePlan> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Importance of channel `j`: the chosen norm of `lin1` weight row `j`
/// concatenated with its bias entry.
pub fn channel_importance(block: &ResidualBlock, norm: PruneNorm) -> Vec<f64> {
    let h = block.hidden_width();
    let mut scores = Vec::with_capacity(h);
    for j in 0..h {
        let row = block.lin1.weight.row(j);
        let b = block.lin1.bias[j];
        let score = match norm {
            PruneNorm::L1 => row.iter().map(|v| v.abs()).sum::<f64>() + b.abs(),
            PruneNorm::L2 => (row.iter().map(|v| v * v).sum::<f64>() + b * b).sqrt(),
        };
        scores.push(score);
    }
    scores
}

/// Plans which channels to remove. Local scope removes
/// `floor(sparsity * h)` lowest-scored channels per target block; global
/// scope pools all target channels and removes the `floor(sparsity * total)`
/// lowest overall, never emptying a block. Ties break by (block, channel).
pub fn prune_plan(net: &BlockNetwork, spec: &PruneSpec) -> Result<PrunePlan> {
    spec.validate()?;
    let mut plan = PrunePlan::default();
    match spec.scope {
        PruneScope::Local => {
            for &id in spec.target_blocks.blocks() {
                let block = &net.blocks()[id.index0()];
                let h = block.hidden_width();
                let remove = (spec.sparsity * h as f64).floor() as usize;
                if remove >= h {
                    return Err(Error::EmptyBlock { block: id.0 });
                }
                let scores = channel_importance(block, spec.norm);
                let mut order: Vec<usize> = (0..h).collect();
                order.sort_by(|&a, &b| {
                    scores[a]
                        .partial_cmp(&scores[b])
                        .expect("finite scores")
                        .then(a.cmp(&b))
                });
                let mut removed: Vec<(usize, f64)> =
                    order[..remove].iter().map(|&j| (j, scores[j])).collect();
                removed.sort_by_key(|&(j, _)| j);
                plan.removals.insert(id.0, removed);
            }
        }
        PruneScope::Global => {
            let mut pool: Vec<(usize, usize, f64)> = Vec::new();
            let mut widths: BTreeMap<usize, usize> = BTreeMap::new();
            for &id in spec.target_blocks.blocks() {
                let block = &net.blocks()[id.index0()];
                widths.insert(id.0, block.hidden_width());
                for (j, score) in channel_importance(block, spec.norm).iter().enumerate() {
                    pool.push((id.0, j, *score));
                }
            }
            let total = pool.len();
            let remove = (spec.sparsity * total as f64).floor() as usize;
            pool.sort_by(|a, b| {
                a.2.partial_cmp(&b.2)
                    .expect("finite scores")
                    .then(a.0.cmp(&b.0))
                    .then(a.1.cmp(&b.1))
            });
            let mut remaining: BTreeMap<usize, usize> = widths.clone();
            let mut removed_so_far = 0usize;
            for &(block, channel, score) in &pool {
                if removed_so_far == remove {
                    break;
                }
                let left = remaining.get_mut(&block).expect("pooled block");
                if *left <= 1 {
                    // skip to the next lowest rather than empty a block
                    continue;
                }
                *left -= 1;
                removed_so_far += 1;
                plan.removals.entry(block).or_default().push((channel, score));
            }
            for v in plan.removals.values_mut() {
                v.sort_by_key(|&(j, _)| j);
            }
        }
    }
    Ok(plan)
}

fn prune_block(block: &ResidualBlock, removed: &[(usize, f64)]) -> Result<ResidualBlock> {
    let h = block.hidden_width();
    let keep: Vec<usize> = (0..h)
        .filter(|j| !removed.iter().any(|&(r, _)| r == *j))
        .collect();
    if keep.len() + removed.len() != h {
        return Err(Error::InvalidConfig(format!(
            "plan for block {} does not match its {} channels",
            block.id, h
        )));
    }
    if keep.is_empty() {
        return Err(Error::EmptyBlock { block: block.id.0 });
    }
    let d = block.width();
    // lin1: keep rows
    let mut w1 = Vec::with_capacity(keep.len() * d);
    let mut b1 = Vec::with_capacity(keep.len());
    for &j in &keep {
        w1.extend_from_slice(block.lin1.weight.row(j));
        b1.push(block.lin1.bias[j]);
    }
    // lin2: keep columns
    let mut w2 = Vec::with_capacity(d * keep.len());
    for o in 0..d {
        let row = block.lin2.weight.row(o);
        for &j in &keep {
            w2.push(row[j]);
        }
    }
    Ok(ResidualBlock {
        lin1: DenseLayer {
            weight: Tensor2::from_vec(keep.len(), d, w1)?,
            bias: b1,
            frozen: block.lin1.frozen,
        },
        lin2: DenseLayer {
            weight: Tensor2::from_vec(d, keep.len(), w2)?,
            bias: block.lin2.bias.clone(),
            frozen: block.lin2.frozen,
        },
        id: block.id,
    })
}

/// Applies a plan to a clone of the network. Both the live parameters and
/// the snapshot of each pruned block shrink identically, so downstream
/// freeze checks still compare like against like. Untargeted blocks are
/// untouched.
pub fn apply_prune(net: &BlockNetwork, plan: &PrunePlan) -> Result<BlockNetwork> {
    let mut pruned = net.clone();
    for (&block_id, removed) in &plan.removals {
        if block_id < 1 || block_id > net.num_blocks() {
            return Err(Error::InvalidBlock {
                id: block_id,
                n_blocks: net.num_blocks(),
            });
        }
        if removed.is_empty() {
            continue;
        }
        let index0 = block_id - 1;
        let live = prune_block(&net.blocks()[index0], removed)?;
        let snap = prune_block(&net.snapshot_blocks()[index0], removed)?;
        pruned.replace_block(index0, live, snap);
    }
    Ok(pruned)
}

/// Reference forward of one block with the removed channels' hidden
/// activations forced to zero; the exact-equality oracle for
/// [`apply_prune`].
pub fn masked_block_forward(block: &ResidualBlock, x: &Tensor2, removed: &[usize]) -> Result<Tensor2> {
    let z1 = block.lin1.forward(x)?;
    let mut hidden = z1;
    for v in hidden.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    for r in 0..hidden.rows() {
        for &j in removed {
            hidden.set(r, j, 0.0);
        }
    }
    let z2 = block.lin2.forward(&hidden)?;
    let mut y = z2;
    for (o, i) in y.data_mut().iter_mut().zip(x.data()) {
        *o += i;
    }
    Ok(y)
}

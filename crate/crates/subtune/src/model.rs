//! Network assembly: named residual blocks behind a task head, per-block
//! freeze masks, the pretrained snapshot every experiment restarts from,
//! and a bit-exact binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::{
    self, BlockId, DenseLayer, ForwardTape, Gradients, LayerGrad, LayerId, ResidualBlock, Tensor2,
};
use crate::util::{fnv1a_f64, rng_from_seed, split_seed};
use crate::{Error, Result};

/// An ordered, duplicate-free set of blocks selected for tuning, with its
/// trainable-parameter count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetSpec {
    blocks: Vec<BlockId>,
    param_count: usize,
}

impl SubsetSpec {
    /// Builds a subset against a concrete network, validating ids and
    /// computing the parameter count. Insertion order is preserved.
    pub fn for_network(net: &BlockNetwork, blocks: &[BlockId]) -> Result<SubsetSpec> {
        let mut seen = vec![false; net.num_blocks()];
        let mut param_count = 0;
        for &id in blocks {
            if id.0 < 1 || id.0 > net.num_blocks() {
                return Err(Error::InvalidBlock {
                    id: id.0,
                    n_blocks: net.num_blocks(),
                });
            }
            if seen[id.index0()] {
                return Err(Error::InvalidConfig(format!("duplicate block {id} in subset")));
            }
            seen[id.index0()] = true;
            param_count += net.blocks[id.index0()].param_count();
        }
        Ok(SubsetSpec {
            blocks: blocks.to_vec(),
            param_count,
        })
    }

    pub fn empty() -> SubsetSpec {
        SubsetSpec {
            blocks: Vec::new(),
            param_count: 0,
        }
    }

    pub fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn contains(&self, id: BlockId) -> bool {
        self.blocks.contains(&id)
    }

    /// Blocks sorted ascending; canonical form for comparisons and keys.
    pub fn sorted_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.blocks.iter().map(|b| b.0).collect();
        ids.sort_unstable();
        ids
    }

    /// Insertion-order rendering, e.g. "2,1".
    pub fn render(&self) -> String {
        self.blocks
            .iter()
            .map(|b| b.0.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Head flavor. Siamese heads read the concatenation of pretrained-branch
/// and tuned-branch features, frozen branch first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    LinearProbe,
    Subtune,
    Siamese,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::LinearProbe => "linear_probe",
            HeadKind::Subtune => "subtune",
            HeadKind::Siamese => "siamese",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_probe" => Ok(HeadKind::LinearProbe),
            "subtune" => Ok(HeadKind::Subtune),
            "siamese" => Ok(HeadKind::Siamese),
            other => Err(Error::InvalidConfig(format!("unknown head kind '{other}'"))),
        }
    }
}

/// Declared head geometry; validated against the network on attach.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub in_width: usize,
    pub classes: usize,
}

impl HeadSpec {
    pub fn new(kind: HeadKind, feature_width: usize, classes: usize) -> HeadSpec {
        let in_width = match kind {
            HeadKind::Siamese => 2 * feature_width,
            _ => feature_width,
        };
        HeadSpec {
            kind,
            in_width,
            classes,
        }
    }
}

/// Frozen copy of the backbone parameters taken at pretrain/load time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    blocks: Vec<ResidualBlock>,
}

/// Tape for a [`BlockNetwork`] forward pass. For siamese heads the frozen
/// branch contributes constant features, so only the tuned branch and the
/// concatenation offset are recorded.
#[derive(Debug, Clone)]
pub struct NetTape {
    tape: ForwardTape,
    /// Column where the tuned-branch features start inside the head input.
    tuned_offset: usize,
    head_input: Tensor2,
}

/// Ordered residual blocks plus a task head, with per-block freeze flags
/// and the pretrained snapshot.
#[derive(Debug, Clone)]
pub struct BlockNetwork {
    input_width: usize,
    blocks: Vec<ResidualBlock>,
    head: DenseLayer,
    head_kind: HeadKind,
    classes: usize,
    snapshot: Snapshot,
}

impl BlockNetwork {
    /// Builds a fresh network: `n_blocks` residual blocks of width `d` and a
    /// subtune head for `classes` outputs. All parameters are drawn uniform
    /// in +-sqrt(1/fan_in); the snapshot equals the live parameters.
    pub fn build(d: usize, n_blocks: usize, classes: usize, seed: u64) -> Result<BlockNetwork> {
        if d < 1 || n_blocks < 1 {
            return Err(Error::InvalidConfig(format!(
                "network needs d >= 1 and n_blocks >= 1, got d={d}, n_blocks={n_blocks}"
            )));
        }
        let mut rng = rng_from_seed(seed);
        let blocks: Vec<ResidualBlock> = (1..=n_blocks)
            .map(|i| ResidualBlock::new(d, BlockId(i), &mut rng))
            .collect();
        let head = DenseLayer::uniform_init(d, classes, &mut rng);
        let snapshot = Snapshot {
            blocks: blocks.clone(),
        };
        Ok(BlockNetwork {
            input_width: d,
            blocks,
            head,
            head_kind: HeadKind::Subtune,
            classes,
            snapshot,
        })
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    pub fn head(&self) -> &DenseLayer {
        &self.head
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head_kind
    }

    pub fn snapshot_blocks(&self) -> &[ResidualBlock] {
        &self.snapshot.blocks
    }

    pub fn block_ids(&self) -> Vec<BlockId> {
        self.blocks.iter().map(|b| b.id).collect()
    }

    /// Fingerprint of the snapshot parameters; profile and greedy loops use
    /// it to assert that every candidate starts from the same pretrained
    /// state.
    pub fn snapshot_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in &self.snapshot.blocks {
            for t in [&b.lin1.weight, &b.lin2.weight] {
                h ^= fnv1a_f64(t.data());
                h = h.wrapping_mul(0x100000001b3);
            }
            for bias in [&b.lin1.bias, &b.lin2.bias] {
                h ^= fnv1a_f64(bias);
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    /// Unfreezes exactly the listed blocks, freezing all others. The head
    /// stays unfrozen.
    pub fn set_trainable(&mut self, subset: &SubsetSpec) -> Result<()> {
        for &id in subset.blocks() {
            if id.0 < 1 || id.0 > self.blocks.len() {
                return Err(Error::InvalidBlock {
                    id: id.0,
                    n_blocks: self.blocks.len(),
                });
            }
        }
        for block in &mut self.blocks {
            block.set_frozen(true);
        }
        for &id in subset.blocks() {
            self.blocks[id.index0()].set_frozen(false);
        }
        self.head.frozen = false;
        Ok(())
    }

    /// Total trainable-parameter count of the listed blocks (head excluded).
    pub fn param_count(&self, subset: &SubsetSpec) -> usize {
        subset
            .blocks()
            .iter()
            .map(|id| self.blocks[id.index0()].param_count())
            .sum()
    }

    pub fn total_block_params(&self) -> usize {
        self.blocks.iter().map(|b| b.param_count()).sum()
    }

    /// Redraws the listed blocks from the init distribution. The snapshot is
    /// left untouched so the pretrained state can still be restored.
    pub fn reinit_blocks(&mut self, subset: &SubsetSpec, seed: u64) -> Result<()> {
        for &id in subset.blocks() {
            if id.0 < 1 || id.0 > self.blocks.len() {
                return Err(Error::InvalidBlock {
                    id: id.0,
                    n_blocks: self.blocks.len(),
                });
            }
        }
        for &id in subset.blocks() {
            let mut rng = rng_from_seed(split_seed(seed, id.0 as u64));
            let width = self.blocks[id.index0()].width();
            let frozen = self.blocks[id.index0()].frozen();
            let mut fresh = ResidualBlock::new(width, id, &mut rng);
            fresh.set_frozen(frozen);
            self.blocks[id.index0()] = fresh;
        }
        Ok(())
    }

    /// Restores all block parameters from the snapshot (freeze flags kept).
    pub fn restore_from_snapshot(&mut self) {
        for (live, snap) in self.blocks.iter_mut().zip(&self.snapshot.blocks) {
            let frozen = live.frozen();
            let mut restored = snap.clone();
            restored.set_frozen(frozen);
            *live = restored;
        }
    }

    /// Overwrites the snapshot with the current live parameters; called once
    /// after pretraining so that downstream experiments restart from the
    /// trained backbone.
    pub fn refresh_snapshot(&mut self) {
        self.snapshot.blocks = self.blocks.clone();
    }

    /// Replaces the head with a freshly initialized one of the given kind.
    pub fn attach_head(&mut self, kind: HeadKind, classes: usize, seed: u64) -> Result<()> {
        let spec = HeadSpec::new(kind, self.input_width, classes);
        let mut rng = rng_from_seed(seed);
        let mut head = DenseLayer::uniform_init(spec.in_width, spec.classes, &mut rng);
        head.frozen = false;
        self.head = head;
        self.head_kind = kind;
        self.classes = classes;
        Ok(())
    }

    /// Installs an explicit head. Width must match the kind's geometry.
    pub fn set_head(&mut self, kind: HeadKind, head: DenseLayer) -> Result<()> {
        let expected = match kind {
            HeadKind::Siamese => 2 * self.input_width,
            _ => self.input_width,
        };
        if head.in_width() != expected {
            return Err(Error::Shape(format!(
                "head in width {} does not match {} required by {}",
                head.in_width(),
                expected,
                kind.as_str()
            )));
        }
        self.classes = head.out_width();
        self.head = head;
        self.head.frozen = false;
        self.head_kind = kind;
        Ok(())
    }

    /// Forward pass producing logits and a tape for backward.
    ///
    /// Siamese heads see `[f_snapshot(x) | f_live(x)]`: the pretrained
    /// branch is computed from the snapshot weights, so it stays fixed even
    /// after the tuned branch trains.
    pub fn forward(&self, batch: &Tensor2) -> Result<(Tensor2, NetTape)> {
        if batch.cols() != self.input_width {
            return Err(Error::Shape(format!(
                "batch width {} != network input width {}",
                batch.cols(),
                self.input_width
            )));
        }
        let (tuned_feat, records) = nn::forward_blocks(&self.blocks, batch)?;
        let (head_input, tuned_offset) = match self.head_kind {
            HeadKind::Siamese => {
                let (frozen_feat, _) = nn::forward_blocks(&self.snapshot.blocks, batch)?;
                (Tensor2::hconcat(&frozen_feat, &tuned_feat)?, self.input_width)
            }
            _ => (tuned_feat.clone(), 0),
        };
        let logits = self.head.forward(&head_input)?;
        Ok((
            logits,
            NetTape {
                tape: ForwardTape {
                    records,
                    features: tuned_feat,
                    batch_rows: batch.rows(),
                },
                tuned_offset,
                head_input,
            },
        ))
    }

    /// Backward pass over unfrozen parameters only.
    pub fn backward(&self, tape: &NetTape, dlogits: &Tensor2) -> Result<Gradients> {
        if dlogits.rows() != tape.tape.batch_rows {
            return Err(Error::Shape(format!(
                "stale tape: dlogits rows {} vs batch {}",
                dlogits.rows(),
                tape.tape.batch_rows
            )));
        }
        let mut grads = Gradients::default();
        let (dwh, dbh, dhead_input) = self.head.backward(&tape.head_input, dlogits);
        if !self.head.frozen {
            grads.layers.insert(
                LayerId::Head,
                LayerGrad {
                    dweight: dwh,
                    dbias: dbh,
                },
            );
        }
        let dtuned = if tape.tuned_offset > 0 {
            dhead_input.slice_cols(tape.tuned_offset, tape.tuned_offset + self.input_width)
        } else {
            dhead_input
        };
        nn::backward_blocks(&self.blocks, &tape.tape.records, &dtuned, &mut grads);
        Ok(grads)
    }

    pub(crate) fn layer_mut(&mut self, id: LayerId) -> &mut DenseLayer {
        nn::layer_mut(&mut self.blocks, &mut self.head, id)
    }

    /// Flattened copy of one block's live parameters.
    pub fn block_param_vector(&self, id: BlockId) -> Vec<f64> {
        Self::flatten_block(&self.blocks[id.index0()])
    }

    /// Flattened copy of one block's snapshot parameters.
    pub fn snapshot_param_vector(&self, id: BlockId) -> Vec<f64> {
        Self::flatten_block(&self.snapshot.blocks[id.index0()])
    }

    fn flatten_block(b: &ResidualBlock) -> Vec<f64> {
        let mut v = Vec::with_capacity(b.param_count());
        v.extend_from_slice(b.lin1.weight.data());
        v.extend_from_slice(&b.lin1.bias);
        v.extend_from_slice(b.lin2.weight.data());
        v.extend_from_slice(&b.lin2.bias);
        v
    }

    /// Writes `init + scale * (live - init)` back into a block; the norm-ball
    /// projection of the constrained trainer.
    pub fn scale_block_delta(&mut self, id: BlockId, scale: f64) {
        let snap = self.snapshot.blocks[id.index0()].clone();
        let live = &mut self.blocks[id.index0()];
        let apply = |live: &mut [f64], snap: &[f64]| {
            for (l, s) in live.iter_mut().zip(snap) {
                *l = s + scale * (*l - s);
            }
        };
        apply(live.lin1.weight.data_mut(), snap.lin1.weight.data());
        apply(&mut live.lin1.bias, &snap.lin1.bias);
        apply(live.lin2.weight.data_mut(), snap.lin2.weight.data());
        apply(&mut live.lin2.bias, &snap.lin2.bias);
    }

    /// Replaces both live and snapshot copies of a block; used by pruning.
    pub(crate) fn replace_block(&mut self, index0: usize, live: ResidualBlock, snap: ResidualBlock) {
        self.blocks[index0] = live;
        self.snapshot.blocks[index0] = snap;
    }

    /// Direct mutable access for in-crate tests that need hand-crafted
    /// weights. Leaves the snapshot untouched.
    #[cfg(test)]
    pub(crate) fn blocks_mut(&mut self) -> &mut [ResidualBlock] {
        &mut self.blocks
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
// magic "SBTN" | u32 version=1 LE | u64 metadata length LE | metadata JSON
// (UTF-8) | raw little-endian f64 payloads in metadata order.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"SBTN";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    input_width: usize,
    classes: usize,
    head_kind: HeadKind,
    blocks: Vec<BlockMeta>,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockMeta {
    index: usize,
    hidden: usize,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

fn tensor_entries(net: &BlockNetwork) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    for (prefix, blocks) in [("", &net.blocks), ("snapshot.", &net.snapshot.blocks)] {
        for b in blocks.iter() {
            let i = b.id.0;
            out.push((
                format!("{prefix}block{i}.lin1.weight"),
                b.lin1.weight.rows(),
                b.lin1.weight.cols(),
            ));
            out.push((format!("{prefix}block{i}.lin1.bias"), 1, b.lin1.bias.len()));
            out.push((
                format!("{prefix}block{i}.lin2.weight"),
                b.lin2.weight.rows(),
                b.lin2.weight.cols(),
            ));
            out.push((format!("{prefix}block{i}.lin2.bias"), 1, b.lin2.bias.len()));
        }
    }
    out.push(("head.weight".into(), net.head.weight.rows(), net.head.weight.cols()));
    out.push(("head.bias".into(), 1, net.head.bias.len()));
    out
}

/// Serializes the full network state (live + snapshot parameters, freeze
/// flags, head) to the binary checkpoint format.
pub fn save_checkpoint(net: &BlockNetwork, path: &Path) -> Result<()> {
    let entries = tensor_entries(net);
    let meta = CheckpointMeta {
        input_width: net.input_width,
        classes: net.classes,
        head_kind: net.head_kind,
        blocks: net
            .blocks
            .iter()
            .map(|b| BlockMeta {
                index: b.id.0,
                hidden: b.hidden_width(),
                frozen: b.frozen(),
            })
            .collect(),
        tensors: entries
            .iter()
            .map(|(name, rows, cols)| TensorMeta {
                name: name.clone(),
                rows: *rows,
                cols: *cols,
            })
            .collect(),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&meta_bytes)?;
    let write_tensor = |file: &mut std::io::BufWriter<std::fs::File>, data: &[f64]| -> Result<()> {
        for v in data {
            file.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    for blocks in [&net.blocks, &net.snapshot.blocks] {
        for b in blocks.iter() {
            write_tensor(&mut file, b.lin1.weight.data())?;
            write_tensor(&mut file, &b.lin1.bias)?;
            write_tensor(&mut file, b.lin2.weight.data())?;
            write_tensor(&mut file, &b.lin2.bias)?;
        }
    }
    write_tensor(&mut file, net.head.weight.data())?;
    write_tensor(&mut file, &net.head.bias)?;
    Ok(())
}

fn read_exact_at(file: &mut impl Read, buf: &mut [u8], offset: &mut u64, what: &str) -> Result<()> {
    file.read_exact(buf).map_err(|_| Error::Checkpoint {
        offset: *offset,
        msg: format!("truncated while reading {what}"),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

/// Loads a checkpoint; the result is bit-identical to the saved network.
pub fn load_checkpoint(path: &Path) -> Result<BlockNetwork> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut offset: u64 = 0;

    let mut magic = [0u8; 4];
    read_exact_at(&mut file, &mut magic, &mut offset, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            msg: format!(
                "bad magic {:?}, expected \"SBTN\"",
                String::from_utf8_lossy(&magic)
            ),
        });
    }
    let mut version = [0u8; 4];
    read_exact_at(&mut file, &mut version, &mut offset, "version")?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(Error::Checkpoint {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let mut len_bytes = [0u8; 8];
    read_exact_at(&mut file, &mut len_bytes, &mut offset, "metadata length")?;
    let meta_len = u64::from_le_bytes(len_bytes) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact_at(&mut file, &mut meta_bytes, &mut offset, "metadata")?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes).map_err(|e| Error::Checkpoint {
        offset: 16,
        msg: format!("metadata json: {e}"),
    })?;

    let mut tensors: Vec<Vec<f64>> = Vec::with_capacity(meta.tensors.len());
    for t in &meta.tensors {
        let n = t.rows * t.cols;
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            read_exact_at(&mut file, &mut buf, &mut offset, &t.name)?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push(data);
    }

    // Reassemble: per block 4 tensors, live blocks first then snapshot
    // blocks, head last.
    let n_blocks = meta.blocks.len();
    let expected = n_blocks * 8 + 2;
    if meta.tensors.len() != expected {
        return Err(Error::Checkpoint {
            offset,
            msg: format!(
                "expected {expected} tensors, metadata lists {}",
                meta.tensors.len()
            ),
        });
    }
    let d = meta.input_width;
    let mut cursor = 0usize;
    let take_block = |cursor: &mut usize, index: usize, frozen: bool| -> Result<ResidualBlock> {
        let tm = &meta.tensors[*cursor..*cursor + 4];
        let w1 = Tensor2::from_vec(tm[0].rows, tm[0].cols, tensors[*cursor].clone())?;
        let b1 = tensors[*cursor + 1].clone();
        let w2 = Tensor2::from_vec(tm[2].rows, tm[2].cols, tensors[*cursor + 2].clone())?;
        let b2 = tensors[*cursor + 3].clone();
        *cursor += 4;
        if w1.cols() != d || w2.rows() != d || w1.rows() != w2.cols() {
            return Err(Error::Checkpoint {
                offset,
                msg: format!("inconsistent shapes for block {index}"),
            });
        }
        Ok(ResidualBlock {
            lin1: DenseLayer {
                weight: w1,
                bias: b1,
                frozen,
            },
            lin2: DenseLayer {
                weight: w2,
                bias: b2,
                frozen,
            },
            id: BlockId(index),
        })
    };

    let mut blocks = Vec::with_capacity(n_blocks);
    for bm in &meta.blocks {
        blocks.push(take_block(&mut cursor, bm.index, bm.frozen)?);
    }
    let mut snapshot_blocks = Vec::with_capacity(n_blocks);
    for bm in &meta.blocks {
        // Snapshot blocks carry no freeze semantics of their own.
        snapshot_blocks.push(take_block(&mut cursor, bm.index, false)?);
    }
    let head_meta = &meta.tensors[cursor];
    let head_weight = Tensor2::from_vec(head_meta.rows, head_meta.cols, tensors[cursor].clone())?;
    let head_bias = tensors[cursor + 1].clone();
    if head_weight.rows() != meta.classes {
        return Err(Error::Checkpoint {
            offset,
            msg: format!("head rows {} != classes {}", head_weight.rows(), meta.classes),
        });
    }
    Ok(BlockNetwork {
        input_width: meta.input_width,
        blocks,
        head: DenseLayer {
            weight: head_weight,
            bias: head_bias,
            frozen: false,
        },
        head_kind: meta.head_kind,
        classes: meta.classes,
        snapshot: Snapshot {
            blocks: snapshot_blocks,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::loss_and_grad;
    use tempfile::tempdir;

    fn ids(list: &[usize]) -> Vec<BlockId> {
        list.iter().map(|&i| BlockId(i)).collect()
    }

    #[test]
    fn param_count_matches_shape_arithmetic() {
        let net = BlockNetwork::build(4, 2, 3, 0).unwrap();
        // per block: 2 * (16 weights + 4 biases) = 40; head: 4*3+3 = 15
        let all = SubsetSpec::for_network(&net, &ids(&[1, 2])).unwrap();
        assert_eq!(all.param_count(), 80);
        assert_eq!(net.total_block_params() + net.head().param_count(), 95);
        let one = SubsetSpec::for_network(&net, &ids(&[1])).unwrap();
        assert_eq!(one.param_count(), 40);
        assert_eq!(SubsetSpec::empty().param_count(), 0);
    }

    #[test]
    fn same_seed_same_network() {
        let a = BlockNetwork::build(6, 3, 4, 42).unwrap();
        let b = BlockNetwork::build(6, 3, 4, 42).unwrap();
        for (x, y) in a.blocks().iter().zip(b.blocks()) {
            assert_eq!(x.lin1.weight.data(), y.lin1.weight.data());
            assert_eq!(x.lin2.bias, y.lin2.bias);
        }
        assert_eq!(a.head().weight.data(), b.head().weight.data());
        let c = BlockNetwork::build(6, 3, 4, 43).unwrap();
        assert_ne!(
            a.blocks()[0].lin1.weight.data(),
            c.blocks()[0].lin1.weight.data()
        );
    }

    #[test]
    fn set_trainable_patterns() {
        let mut net = BlockNetwork::build(4, 16, 3, 1).unwrap();
        // empty subset = linear probing
        net.set_trainable(&SubsetSpec::empty()).unwrap();
        assert!(net.blocks().iter().all(|b| b.frozen()));
        assert!(!net.head().frozen);
        // all blocks = full finetuning
        let all = SubsetSpec::for_network(&net, &net.block_ids()).unwrap();
        net.set_trainable(&all).unwrap();
        assert!(net.blocks().iter().all(|b| !b.frozen()));
        // sparse pair
        let pair = SubsetSpec::for_network(&net, &ids(&[2, 14])).unwrap();
        net.set_trainable(&pair).unwrap();
        for b in net.blocks() {
            let expect_trainable = b.id.0 == 2 || b.id.0 == 14;
            assert_eq!(!b.frozen(), expect_trainable, "block {}", b.id);
        }
    }

    #[test]
    fn set_trainable_rejects_bad_id() {
        let mut net = BlockNetwork::build(4, 2, 3, 1).unwrap();
        let bogus = SubsetSpec {
            blocks: vec![BlockId(3)],
            param_count: 0,
        };
        assert!(matches!(
            net.set_trainable(&bogus),
            Err(Error::InvalidBlock { id: 3, .. })
        ));
    }

    #[test]
    fn reinit_and_restore_roundtrip() {
        let mut net = BlockNetwork::build(4, 3, 3, 5).unwrap();
        let before = net.block_param_vector(BlockId(2));
        let untouched_before = net.block_param_vector(BlockId(1));

        net.reinit_blocks(&SubsetSpec::empty(), 9).unwrap();
        assert_eq!(net.block_param_vector(BlockId(2)), before);

        let subset = SubsetSpec::for_network(&net, &ids(&[2])).unwrap();
        net.reinit_blocks(&subset, 9).unwrap();
        let after = net.block_param_vector(BlockId(2));
        assert_ne!(after, before);
        assert_eq!(net.block_param_vector(BlockId(1)), untouched_before);

        // same seed from the same state gives identical draws
        let mut net2 = BlockNetwork::build(4, 3, 3, 5).unwrap();
        net2.reinit_blocks(&subset, 9).unwrap();
        assert_eq!(net2.block_param_vector(BlockId(2)), after);

        net.restore_from_snapshot();
        assert_eq!(net.block_param_vector(BlockId(2)), before);
    }

    #[test]
    fn checkpoint_roundtrip_is_identity() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.sbtn");
        let mut net = BlockNetwork::build(5, 3, 4, 17).unwrap();
        let subset = SubsetSpec::for_network(&net, &ids(&[2])).unwrap();
        net.set_trainable(&subset).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.input_width(), net.input_width());
        assert_eq!(loaded.classes(), net.classes());
        assert_eq!(loaded.head_kind(), net.head_kind());
        for (a, b) in loaded.blocks().iter().zip(net.blocks()) {
            assert_eq!(a, b);
        }
        for (a, b) in loaded.snapshot_blocks().iter().zip(net.snapshot_blocks()) {
            assert_eq!(a.lin1.weight.data(), b.lin1.weight.data());
        }
        assert_eq!(loaded.head().weight.data(), net.head().weight.data());
        assert_eq!(loaded.head().bias, net.head().bias);
        assert_eq!(loaded.snapshot_digest(), net.snapshot_digest());
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.sbtn");
        let net = BlockNetwork::build(4, 2, 3, 3).unwrap();
        save_checkpoint(&net, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let bad_magic_path = dir.path().join("bad_magic.sbtn");
        let mut bad = bytes.clone();
        bad[0..4].copy_from_slice(b"XXXX");
        std::fs::write(&bad_magic_path, &bad).unwrap();
        match load_checkpoint(&bad_magic_path) {
            Err(Error::Checkpoint { msg, .. }) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected magic error, got {other:?}"),
        }

        let trunc_path = dir.path().join("trunc.sbtn");
        std::fs::write(&trunc_path, &bytes[..bytes.len() / 2]).unwrap();
        match load_checkpoint(&trunc_path) {
            Err(Error::Checkpoint { msg, offset }) => {
                assert!(msg.contains("truncated"), "{msg}");
                assert!(offset > 0);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn siamese_head_width_doubles() {
        let mut net = BlockNetwork::build(8, 2, 5, 1).unwrap();
        net.attach_head(HeadKind::Siamese, 5, 2).unwrap();
        assert_eq!(net.head().in_width(), 16);
        assert_eq!(net.head().out_width(), 5);
        assert!(!net.head().frozen);
    }

    #[test]
    fn siamese_with_identical_branches_and_zero_half_matches_subtune() {
        // With live == snapshot and head weights [0 | W], the siamese output
        // equals the subtune head W applied to the same features.
        let d = 6;
        let classes = 4;
        let mut rng = rng_from_seed(33);
        let w = DenseLayer::uniform_init(d, classes, &mut rng);

        let mut subtune_net = BlockNetwork::build(d, 2, classes, 7).unwrap();
        subtune_net.set_head(HeadKind::Subtune, w.clone()).unwrap();

        let mut siamese_net = BlockNetwork::build(d, 2, classes, 7).unwrap();
        let mut wide = DenseLayer::zeros(2 * d, classes);
        for o in 0..classes {
            for i in 0..d {
                // tuned branch occupies the second half of the concat
                wide.weight.set(o, d + i, w.weight.get(o, i));
            }
            wide.bias[o] = w.bias[o];
        }
        siamese_net.set_head(HeadKind::Siamese, wide).unwrap();

        let batch = Tensor2::uniform(5, d, 1.0, &mut rng);
        let (a, _) = subtune_net.forward(&batch).unwrap();
        let (b, _) = siamese_net.forward(&batch).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_probe_head_equals_subtune_with_empty_subset() {
        let mut a = BlockNetwork::build(5, 2, 3, 11).unwrap();
        let mut b = BlockNetwork::build(5, 2, 3, 11).unwrap();
        a.attach_head(HeadKind::LinearProbe, 4, 21).unwrap();
        b.attach_head(HeadKind::Subtune, 4, 21).unwrap();
        a.set_trainable(&SubsetSpec::empty()).unwrap();
        b.set_trainable(&SubsetSpec::empty()).unwrap();
        let mut rng = rng_from_seed(2);
        let batch = Tensor2::uniform(4, 5, 1.0, &mut rng);
        let (la, _) = a.forward(&batch).unwrap();
        let (lb, _) = b.forward(&batch).unwrap();
        assert_eq!(la.data(), lb.data());
    }

    #[test]
    fn siamese_backward_matches_finite_differences() {
        let d = 4;
        let classes = 3;
        let mut net = BlockNetwork::build(d, 2, classes, 19).unwrap();
        net.attach_head(HeadKind::Siamese, classes, 5).unwrap();
        let subset = SubsetSpec::for_network(&net, &ids(&[2])).unwrap();
        net.set_trainable(&subset).unwrap();
        let mut rng = rng_from_seed(4);
        let batch = Tensor2::uniform(5, d, 1.0, &mut rng);
        let labels: Vec<usize> = (0..5).map(|i| i % classes).collect();

        let loss_of = |net: &BlockNetwork| {
            let (logits, _) = net.forward(&batch).unwrap();
            loss_and_grad(&logits, &labels).unwrap().0
        };

        let (logits, tape) = net.forward(&batch).unwrap();
        let (_, dlogits) = loss_and_grad(&logits, &labels).unwrap();
        let grads = net.backward(&tape, &dlogits).unwrap();
        assert_eq!(grads.layers.len(), 3); // head + block2 lin1/lin2

        let step = 1e-6;
        for (&id, grad) in &grads.layers {
            let wlen = grad.dweight.data().len();
            for off in [0usize, wlen / 2, wlen + grad.dbias.len() - 1] {
                let mut plus = net.clone();
                let mut minus = net.clone();
                bump(&mut plus, id, off, step);
                bump(&mut minus, id, off, -step);
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
                let analytic = if off < wlen {
                    grad.dweight.data()[off]
                } else {
                    grad.dbias[off - wlen]
                };
                assert!(
                    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0) < 1e-4,
                    "layer {id} off {off}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    fn bump(net: &mut BlockNetwork, id: LayerId, off: usize, by: f64) {
        let layer = net.layer_mut(id);
        let wlen = layer.weight.data().len();
        if off < wlen {
            layer.weight.data_mut()[off] += by;
        } else {
            layer.bias[off - wlen] += by;
        }
    }
}

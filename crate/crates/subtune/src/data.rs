//! Synthetic transfer/shift task generation, vector-input corruption
//! analogs, subsampling, and CSV loading.
//!
//! Image-corruption benchmarks have no place in a dense stack, so each
//! corruption here is a vector analog calibrated only for one property:
//! mean L2 displacement grows strictly with severity. All generators are
//! deterministic functions of their seeds.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::Tensor2;
use crate::util::{rng_from_seed, split_seed};
use crate::{Error, Result};

/// Feature matrix plus integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Tensor2,
    pub y: Vec<usize>,
    pub classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(x: Tensor2, y: Vec<usize>, classes: usize, name: impl Into<String>) -> Result<Dataset> {
        if x.rows() != y.len() {
            return Err(Error::Shape(format!(
                "dataset rows {} != labels {}",
                x.rows(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        Ok(Dataset {
            x,
            y,
            classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// New dataset from a subset of row indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.x.row(i));
            y.push(self.y[i]);
        }
        Dataset {
            x: Tensor2::from_vec(indices.len(), d, data).expect("select shapes"),
            y,
            classes: self.classes,
            name: self.name.clone(),
        }
    }
}

/// Input corruption kinds; `label_permute` shuffles the label space instead
/// of touching the inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftKind {
    GaussianNoise,
    Impulse,
    Smooth,
    Quantize,
    LabelPermute,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 5] = [
        ShiftKind::GaussianNoise,
        ShiftKind::Impulse,
        ShiftKind::Smooth,
        ShiftKind::Quantize,
        ShiftKind::LabelPermute,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShiftKind::GaussianNoise => "gaussian_noise",
            ShiftKind::Impulse => "impulse",
            ShiftKind::Smooth => "smooth",
            ShiftKind::Quantize => "quantize",
            ShiftKind::LabelPermute => "label_permute",
        }
    }
}

impl std::str::FromStr for ShiftKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_noise" => Ok(ShiftKind::GaussianNoise),
            "impulse" => Ok(ShiftKind::Impulse),
            "smooth" => Ok(ShiftKind::Smooth),
            "quantize" => Ok(ShiftKind::Quantize),
            "label_permute" => Ok(ShiftKind::LabelPermute),
            other => Err(Error::InvalidConfig(format!("unknown shift kind '{other}'"))),
        }
    }
}

/// A corruption with severity 1..=5 and its own seed.
#[derive(Debug, Clone, Copy)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub severity: u8,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, severity: u8, seed: u64) -> Result<ShiftSpec> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidConfig(format!(
                "severity must be 1..=5, got {severity}"
            )));
        }
        Ok(ShiftSpec {
            kind,
            severity,
            seed,
        })
    }
}

const GAUSS_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
const IMPULSE_P: [f64; 5] = [0.01, 0.03, 0.06, 0.1, 0.17];
const SMOOTH_W: [usize; 5] = [2, 3, 4, 5, 6];
const CLAMP: f64 = 3.0;

/// Source-task generator: class means on the unit sphere, isotropic noise
/// 0.3, then `warp_depth` fixed random dense+tanh maps so that depth in the
/// downstream network actually pays off.
pub fn gen_source_task(d: usize, classes: usize, n: usize, warp_depth: usize, seed: u64) -> Result<Dataset> {
    if d < 2 || classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "source task needs d >= 2 and classes >= 2, got d={d}, classes={classes}"
        )));
    }
    let mut rng = rng_from_seed(split_seed(seed, 0));
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut m: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut m {
            *v /= norm;
        }
        means.push(m);
    }

    // Warp maps: scaled gaussian matrices with a tanh squash; amplified
    // afterwards so the output keeps roughly unit scale.
    let mut warp_rng = rng_from_seed(split_seed(seed, 1));
    let mut warps = Vec::with_capacity(warp_depth);
    for _ in 0..warp_depth {
        let scale = 1.4 / (d as f64).sqrt();
        let a: Vec<f64> = (0..d * d)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut warp_rng);
                g * scale
            })
            .collect();
        let b: Vec<f64> = (0..d)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut warp_rng);
                g * 0.1
            })
            .collect();
        warps.push((a, b));
    }

    let mut sample_rng = rng_from_seed(split_seed(seed, 2));
    let mut data = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    let mut buf = vec![0.0; d];
    let mut next = vec![0.0; d];
    for i in 0..n {
        let label = i % classes;
        for (j, v) in buf.iter_mut().enumerate() {
            let g: f64 = StandardNormal.sample(&mut sample_rng);
            *v = means[label][j] + 0.3 * g;
        }
        for (a, b) in &warps {
            for (o, nv) in next.iter_mut().enumerate() {
                let mut acc = b[o];
                for (j, xv) in buf.iter().enumerate() {
                    acc += a[o * d + j] * xv;
                }
                *nv = (acc).tanh() * 1.6;
            }
            std::mem::swap(&mut buf, &mut next);
        }
        data.extend_from_slice(&buf);
        y.push(label);
    }
    Dataset::new(Tensor2::from_vec(n, d, data)?, y, classes, "source")
}

/// Applies an input corruption to one sample. Deterministic per
/// `(spec.seed, sample_index)`. Outputs are clamped to [-3, 3].
pub fn corrupt(x: &[f64], spec: &ShiftSpec, sample_index: usize) -> Vec<f64> {
    let mut rng = rng_from_seed(split_seed(spec.seed, sample_index as u64));
    let sev = spec.severity as usize - 1;
    let mut out = x.to_vec();
    match spec.kind {
        ShiftKind::GaussianNoise => {
            let sigma = GAUSS_SIGMA[sev];
            for v in &mut out {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * g;
            }
        }
        ShiftKind::Impulse => {
            let p = IMPULSE_P[sev];
            for v in &mut out {
                if rng.gen::<f64>() < p {
                    *v = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                }
            }
        }
        ShiftKind::Smooth => {
            let w = SMOOTH_W[sev];
            let left = (w - 1) / 2;
            let right = w - 1 - left;
            let n = x.len();
            for i in 0..n {
                let lo = i.saturating_sub(left);
                let hi = (i + right).min(n - 1);
                let mut acc = 0.0;
                for item in x.iter().take(hi + 1).skip(lo) {
                    acc += item;
                }
                out[i] = acc / (hi - lo + 1) as f64;
            }
        }
        ShiftKind::Quantize => {
            // Uniform grid with step 2/2^(7-sev) on [-1, 1] mapped over the
            // clamped [-3, 3] domain; zero is always representable.
            let levels = (1u32 << (7 - spec.severity)) as f64;
            let step = 2.0 / levels;
            for v in &mut out {
                let clamped = v.clamp(-CLAMP, CLAMP);
                let u = clamped / CLAMP;
                *v = (u / step).round() * step * CLAMP;
            }
        }
        ShiftKind::LabelPermute => {}
    }
    for v in &mut out {
        *v = v.clamp(-CLAMP, CLAMP);
    }
    out
}

/// A shifted task: a small train split and a large test split.
#[derive(Debug, Clone)]
pub struct ShiftTask {
    pub train: Dataset,
    pub test: Dataset,
    pub label_permutation: Option<Vec<usize>>,
}

/// Relabels a dataset through an explicit class permutation.
pub fn apply_label_permutation(ds: &Dataset, perm: &[usize]) -> Result<Dataset> {
    if perm.len() != ds.classes {
        return Err(Error::InvalidConfig(format!(
            "permutation length {} != classes {}",
            perm.len(),
            ds.classes
        )));
    }
    let y = ds.y.iter().map(|&l| perm[l]).collect();
    Dataset::new(ds.x.clone(), y, ds.classes, ds.name.clone())
}

/// Builds the shifted task from a source dataset: corrupt every sample (or
/// permute the label space), then split into train/test at `train_fraction`
/// (default 1:9 when 0.1). The split is a seeded permutation of the rows.
pub fn make_shift(source: &Dataset, spec: &ShiftSpec, train_fraction: f64) -> Result<ShiftTask> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(Error::InvalidConfig(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = source.len();
    let d = source.dim();
    let mut permutation = None;
    let shifted = match spec.kind {
        ShiftKind::LabelPermute => {
            let mut perm: Vec<usize> = (0..source.classes).collect();
            let mut rng = rng_from_seed(split_seed(spec.seed, 0xfeed));
            perm.shuffle(&mut rng);
            let ds = apply_label_permutation(source, &perm)?;
            permutation = Some(perm);
            ds
        }
        _ => {
            let mut data = Vec::with_capacity(n * d);
            for i in 0..n {
                data.extend_from_slice(&corrupt(source.x.row(i), spec, i));
            }
            Dataset::new(
                Tensor2::from_vec(n, d, data)?,
                source.y.clone(),
                source.classes,
                format!("{}-{}s{}", source.name, spec.kind.as_str(), spec.severity),
            )?
        }
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(split_seed(spec.seed, 0x5b17));
    order.shuffle(&mut rng);
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let n_train = n_train.clamp(1, n.saturating_sub(1).max(1));
    let train = shifted.select(&order[..n_train]);
    let test = shifted.select(&order[n_train..]);
    Ok(ShiftTask {
        train,
        test,
        label_permutation: permutation,
    })
}

/// Draws `m` samples without replacement. Stratified mode keeps per-class
/// counts within one of proportional.
pub fn subsample(ds: &Dataset, m: usize, stratified: bool, seed: u64) -> Result<Dataset> {
    if m > ds.len() {
        return Err(Error::InvalidConfig(format!(
            "subsample m={m} exceeds dataset size {}",
            ds.len()
        )));
    }
    let mut picked: Vec<usize> = if stratified {
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
        for (i, &l) in ds.y.iter().enumerate() {
            per_class[l].push(i);
        }
        // base quota per class, remainder spread over a seeded class order
        let base = m / ds.classes;
        let rem = m % ds.classes;
        let mut class_order: Vec<usize> = (0..ds.classes).collect();
        let mut rng = rng_from_seed(split_seed(seed, 1));
        class_order.shuffle(&mut rng);
        let mut quota = vec![base; ds.classes];
        for &c in class_order.iter().take(rem) {
            quota[c] += 1;
        }
        let mut picked = Vec::with_capacity(m);
        for c in 0..ds.classes {
            let mut idx = per_class[c].clone();
            let mut rng = rng_from_seed(split_seed(seed, 100 + c as u64));
            idx.shuffle(&mut rng);
            let take = quota[c].min(idx.len());
            picked.extend_from_slice(&idx[..take]);
        }
        // classes short on samples leave a deficit; fill from leftovers
        if picked.len() < m {
            let mut leftovers: Vec<usize> = (0..ds.len()).filter(|i| !picked.contains(i)).collect();
            let mut rng = rng_from_seed(split_seed(seed, 2));
            leftovers.shuffle(&mut rng);
            picked.extend_from_slice(&leftovers[..m - picked.len()]);
        }
        picked
    } else {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        let mut rng = rng_from_seed(split_seed(seed, 0));
        order.shuffle(&mut rng);
        order.truncate(m);
        order
    };
    picked.sort_unstable();
    Ok(ds.select(&picked))
}

/// Loads a dataset from a headed CSV file. All non-label columns are parsed
/// as f64 features in column order; the label column must hold nonnegative
/// integers.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::CsvParse {
            line: 1,
            msg: format!("label column '{label_column}' not found in header"),
        })?;
    let d = headers.len() - 1;
    let mut data = Vec::new();
    let mut y = Vec::new();
    for result in reader.records() {
        let record = result.map_err(csv_err)?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(0);
        for (i, field) in record.iter().enumerate() {
            if i == label_idx {
                let label: usize = field.trim().parse().map_err(|_| Error::CsvParse {
                    line,
                    msg: format!("label '{field}' is not a nonnegative integer"),
                })?;
                y.push(label);
            } else {
                let v: f64 = field.trim().parse().map_err(|_| Error::CsvParse {
                    line,
                    msg: format!("cell '{field}' is not numeric"),
                })?;
                data.push(v);
            }
        }
    }
    let n = y.len();
    let classes = y.iter().copied().max().map_or(0, |m| m + 1);
    Dataset::new(
        Tensor2::from_vec(n, d, data)?,
        y,
        classes.max(1),
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into()),
    )
}

fn csv_err(e: csv::Error) -> Error {
    let line = match e.position() {
        Some(p) => p.line(),
        None => 0,
    };
    Error::CsvParse {
        line,
        msg: e.to_string(),
    }
}

/// Writes a dataset as CSV with feature columns `f0..f{d-1}` and a final
/// `label` column.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..ds.dim())
        .map(|i| format!("f{i}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    writeln!(file, "{}", header.join(","))?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v}")).collect();
        row.push(ds.y[i].to_string());
        writeln!(file, "{}", row.join(","))?;
    }
    Ok(())
}

//! Spurious-correlation environments, client partitioning and CSV I/O.
//!
//! A synthetic environment has two kinds of columns. Invariant columns are
//! drawn from class-conditional unit-variance Gaussians whose means sit two
//! units apart, so they predict the clean label equally well everywhere.
//! Spurious columns hold a discrete class code that matches the (noisy)
//! label with probability `alpha`, a different class otherwise. Only `alpha`
//! changes between environments.

use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::seed;

/// Row-major labelled samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Vec<f64>,
    y: Vec<usize>,
    features: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(x: Vec<f64>, y: Vec<usize>, features: usize, classes: usize) -> Result<Self> {
        if features == 0 || classes == 0 {
            return Err(Error::invalid("datasets need at least one feature and one class"));
        }
        if x.len() != y.len() * features {
            return Err(Error::invalid(format!(
                "{} values cannot form {} rows of {features} features",
                x.len(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature value {bad}")));
        }
        Ok(Dataset {
            x,
            y,
            features,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.features..(i + 1) * self.features]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.x.chunks(self.features).map(|r| r[j]).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(rows.len() * self.features);
        let mut y = Vec::with_capacity(rows.len());
        for &r in rows {
            x.extend_from_slice(self.row(r));
            y.push(self.y[r]);
        }
        Dataset {
            x,
            y,
            features: self.features,
            classes: self.classes,
        }
    }

    pub fn batch(&self, rows: &[usize]) -> Result<Batch> {
        let sub = self.subset(rows);
        Batch::new(sub.x, self.features, sub.y)
    }

    pub fn full_batch(&self) -> Result<Batch> {
        Batch::new(self.x.clone(), self.features, self.y.clone())
    }

    /// Stacks datasets with identical column layouts.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Result<Dataset> {
        let mut iter = parts.into_iter();
        let first = iter.next().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let mut out = first.clone();
        for d in iter {
            if d.features != out.features {
                return Err(Error::invalid("cannot concatenate datasets with different widths"));
            }
            out.classes = out.classes.max(d.classes);
            out.x.extend_from_slice(&d.x);
            out.y.extend_from_slice(&d.y);
        }
        Ok(out)
    }
}

/// A labelled dataset tagged with its spurious-correlation strength.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    pub env_id: usize,
    pub alpha: f64,
    pub spurious_idx: Vec<usize>,
    pub data: Dataset,
}

impl Environment {
    pub fn new(env_id: usize, alpha: f64, spurious_idx: Vec<usize>, data: Dataset) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
        }
        if let Some(&bad) = spurious_idx.iter().find(|&&i| i >= data.features()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: data.features(),
            });
        }
        Ok(Environment {
            env_id,
            alpha,
            spurious_idx,
            data,
        })
    }

    /// Fraction of rows whose decoded spurious code equals the label, one
    /// entry per spurious column.
    pub fn spurious_agreement(&self) -> Vec<f64> {
        let classes = self.data.classes();
        self.spurious_idx
            .iter()
            .map(|&s| {
                let hits = (0..self.data.len())
                    .filter(|&r| decode_class(self.data.row(r)[s], classes) == Some(self.data.y()[r]))
                    .count();
                hits as f64 / self.data.len().max(1) as f64
            })
            .collect()
    }
}

/// Numeric value stored in a spurious column for class `code`: evenly
/// spaced over `[-1, 1]` (`-1`/`+1` for binary tasks).
pub fn encode_class(code: usize, classes: usize) -> f64 {
    if classes <= 1 {
        0.0
    } else {
        2.0 * code as f64 / (classes - 1) as f64 - 1.0
    }
}

pub fn decode_class(value: f64, classes: usize) -> Option<usize> {
    if classes <= 1 {
        return Some(0);
    }
    let pos = (value + 1.0) * (classes - 1) as f64 / 2.0;
    let code = pos.round();
    ((pos - code).abs() < 1e-9 && code >= 0.0 && code < classes as f64).then_some(code as usize)
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_invariant: usize,
    pub n_spurious: usize,
    pub classes: usize,
    /// Spurious-correlation strength of each training distribution.
    pub train_alphas: Vec<f64>,
    pub test_alpha: f64,
    pub samples_per_env: usize,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_invariant: 10,
            n_spurious: 1,
            classes: 2,
            train_alphas: vec![0.8, 0.9],
            test_alpha: 0.1,
            samples_per_env: 2000,
            label_noise: 0.1,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_invariant == 0 {
            return Err(Error::invalid("n_invariant must be at least 1"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("classes must be at least 2"));
        }
        if self.classes > 2 && self.n_invariant < self.classes {
            return Err(Error::invalid(format!(
                "{} classes need at least as many invariant features, got {}",
                self.classes, self.n_invariant
            )));
        }
        if self.train_alphas.is_empty() {
            return Err(Error::invalid("train_alphas must list at least one distribution"));
        }
        for &a in self.train_alphas.iter().chain(std::iter::once(&self.test_alpha)) {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::invalid(format!("alpha {a} outside [0, 1]")));
            }
        }
        if self.samples_per_env == 0 {
            return Err(Error::invalid("samples_per_env must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::invalid(format!("label_noise {} outside [0, 1]", self.label_noise)));
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        self.n_invariant + self.n_spurious
    }

    pub fn spurious_idx(&self) -> Vec<usize> {
        (self.n_invariant..self.features()).collect()
    }

    /// Mean of the invariant block for each class. Binary tasks use `±u` with
    /// `u` the unit diagonal; multiclass tasks give each class its own group
    /// of columns and center the resulting directions. Any two class means
    /// are two units apart.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let n = self.n_invariant;
        let c = self.classes;
        if c == 2 {
            let s = 1.0 / (n as f64).sqrt();
            return vec![vec![-s; n], vec![s; n]];
        }
        let dirs: Vec<Vec<f64>> = (0..c)
            .map(|k| {
                let size = (0..n).filter(|i| i % c == k).count() as f64;
                (0..n)
                    .map(|i| if i % c == k { 1.0 / size.sqrt() } else { 0.0 })
                    .collect()
            })
            .collect();
        let centroid: Vec<f64> = (0..n)
            .map(|i| dirs.iter().map(|d| d[i]).sum::<f64>() / c as f64)
            .collect();
        dirs.iter()
            .map(|d| {
                d.iter()
                    .zip(&centroid)
                    .map(|(a, b)| std::f64::consts::SQRT_2 * (a - b))
                    .collect()
            })
            .collect()
    }
}

/// Training environments plus the held-out test environment.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: Vec<Environment>,
    pub test: Environment,
}

impl SyntheticData {
    pub fn all(&self) -> impl Iterator<Item = &Environment> {
        self.train.iter().chain(std::iter::once(&self.test))
    }
}

fn other_class(rng: &mut ChaCha8Rng, class: usize, classes: usize) -> usize {
    let k = rng.random_range(0..classes - 1);
    if k >= class {
        k + 1
    } else {
        k
    }
}

fn generate_env(spec: &DatasetSpec, env_id: usize, alpha: f64, means: &[Vec<f64>]) -> Result<Environment> {
    let mut rng = seed::rng(spec.seed, &[0xDA7A, env_id as u64]);
    let j = spec.features();
    let n = spec.samples_per_env;
    let mut x = Vec::with_capacity(n * j);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.random_range(0..spec.classes);
        for &mu in &means[class] {
            let eps: f64 = rng.sample(StandardNormal);
            x.push(mu + eps);
        }
        let label = if rng.random::<f64>() < spec.label_noise {
            other_class(&mut rng, class, spec.classes)
        } else {
            class
        };
        for _ in 0..spec.n_spurious {
            let code = if rng.random::<f64>() < alpha {
                label
            } else {
                other_class(&mut rng, label, spec.classes)
            };
            x.push(encode_class(code, spec.classes));
        }
        y.push(label);
    }
    Environment::new(env_id, alpha, spec.spurious_idx(), Dataset::new(x, y, j, spec.classes)?)
}

/// One environment per training alpha followed by the test environment.
pub fn gen_synthetic(spec: &DatasetSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let means = spec.class_means();
    let train = spec
        .train_alphas
        .iter()
        .enumerate()
        .map(|(i, &a)| generate_env(spec, i, a, &means))
        .collect::<Result<Vec<_>>>()?;
    let test = generate_env(spec, spec.train_alphas.len(), spec.test_alpha, &means)?;
    Ok(SyntheticData { train, test })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionScheme {
    /// Each client holds data from a single environment.
    #[default]
    Stratified,
    /// Each client draws from every environment.
    Mixed,
}

/// One client's local data.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub data: Dataset,
    pub env_ids: Vec<usize>,
}

/// Splits the training environments over `clients` shards.
///
/// Stratified: with at least as many clients as environments, client `k`
/// belongs to environment `⌊k·E/K⌋` and each environment deals its rows
/// round-robin to its clients; with fewer clients, environment `e` goes
/// whole to client `⌊e·K/E⌋`. Mixed: rows of all environments are shuffled
/// with `seed` and dealt round-robin. Shards keep the original row order.
pub fn partition_clients(
    envs: &[Environment],
    clients: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<Vec<Shard>> {
    if envs.is_empty() {
        return Err(Error::invalid("no environments to partition"));
    }
    if clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    let total: usize = envs.iter().map(|e| e.data.len()).sum();
    if clients > total {
        return Err(Error::invalid(format!("{clients} clients exceed {total} samples")));
    }
    let e = envs.len();

    // (env index, row) pairs per client.
    let mut owned: Vec<Vec<(usize, usize)>> = vec![Vec::new(); clients];
    match scheme {
        PartitionScheme::Stratified if clients >= e => {
            for (ei, env) in envs.iter().enumerate() {
                let members: Vec<usize> = (0..clients).filter(|&k| k * e / clients == ei).collect();
                if env.data.len() < members.len() {
                    return Err(Error::invalid(format!(
                        "environment {} has {} rows for {} clients",
                        env.env_id,
                        env.data.len(),
                        members.len()
                    )));
                }
                for r in 0..env.data.len() {
                    owned[members[r % members.len()]].push((ei, r));
                }
            }
        }
        PartitionScheme::Stratified => {
            for (ei, env) in envs.iter().enumerate() {
                let k = ei * clients / e;
                owned[k].extend((0..env.data.len()).map(|r| (ei, r)));
            }
        }
        PartitionScheme::Mixed => {
            let mut all: Vec<(usize, usize)> = envs
                .iter()
                .enumerate()
                .flat_map(|(ei, env)| (0..env.data.len()).map(move |r| (ei, r)))
                .collect();
            let mut order: Vec<usize> = (0..all.len()).collect();
            order.shuffle(&mut seed::rng(seed, &[0x5A4D]));
            let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); clients];
            for (pos, &idx) in order.iter().enumerate() {
                assigned[pos % clients].push(idx);
            }
            for (k, mut idx) in assigned.into_iter().enumerate() {
                idx.sort_unstable();
                owned[k] = idx.into_iter().map(|i| all[i]).collect();
            }
            all.clear();
        }
    }

    let features = envs[0].data.features();
    let classes = envs.iter().map(|e| e.data.classes()).max().unwrap_or(1);
    owned
        .into_iter()
        .map(|rows| {
            if rows.is_empty() {
                return Err(Error::invalid("partition produced an empty client"));
            }
            let mut x = Vec::with_capacity(rows.len() * features);
            let mut y = Vec::with_capacity(rows.len());
            let mut env_ids = Vec::new();
            for (ei, r) in rows {
                let d = &envs[ei].data;
                if d.features() != features {
                    return Err(Error::invalid("environments have different widths"));
                }
                x.extend_from_slice(d.row(r));
                y.push(d.y()[r]);
                if !env_ids.contains(&envs[ei].env_id) {
                    env_ids.push(envs[ei].env_id);
                }
            }
            Ok(Shard {
                data: Dataset::new(x, y, features, classes)?,
                env_ids,
            })
        })
        .collect()
}

/// Zeroes the spurious columns and forgets their indices; the width is kept
/// so the same architecture still applies.
pub fn strip_spurious(env: &Environment) -> Environment {
    let mut out = env.clone();
    let j = out.data.features;
    for row in out.data.x.chunks_mut(j) {
        for &s in &env.spurious_idx {
            row[s] = 0.0;
        }
    }
    out.spurious_idx.clear();
    out
}

/// Writes `x0..x{j-1},label` with a header row.
pub fn write_csv(env: &Environment, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e))?;
    let j = env.data.features();
    let mut header: Vec<String> = (0..j).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| Error::io(path, e))?;
    for r in 0..env.data.len() {
        let mut rec: Vec<String> = env.data.row(r).iter().map(|v| v.to_string()).collect();
        rec.push(env.data.y()[r].to_string());
        w.write_record(&rec).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a headed CSV whose `label_column` holds integer class labels and
/// whose remaining columns are numeric features, in file order.
pub fn load_csv(
    path: &Path,
    label_column: &str,
    spurious_idx: &[usize],
    alpha: f64,
    classes: Option<usize>,
    env_id: usize,
) -> Result<Environment> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers().map_err(|e| Error::io(path, e))?.clone();
    let label_pos = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Csv {
            path: path.into(),
            row: 0,
            column: label_column.into(),
            message: "label column not found in header".into(),
        })?;
    let features = headers.len() - 1;
    if features == 0 {
        return Err(Error::Csv {
            path: path.into(),
            row: 0,
            column: label_column.into(),
            message: "no feature columns".into(),
        });
    }

    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Csv {
            path: path.into(),
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        for (c, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            let err = |message: String| Error::Csv {
                path: path.into(),
                row,
                column: headers.get(c).unwrap_or("").to_string(),
                message,
            };
            if c == label_pos {
                let label: usize = cell
                    .parse()
                    .map_err(|_| err(format!("label {cell:?} is not a non-negative integer")))?;
                if let Some(k) = classes {
                    if label >= k {
                        return Err(err(format!("label {label} out of range for {k} classes")));
                    }
                }
                y.push(label);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| err(format!("{cell:?} is not numeric")))?;
                if !v.is_finite() {
                    return Err(err(format!("{cell:?} is not finite")));
                }
                x.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::Csv {
            path: path.into(),
            row: 0,
            column: String::new(),
            message: "no data rows".into(),
        });
    }
    let classes = classes.unwrap_or_else(|| y.iter().max().map_or(1, |m| m + 1).max(2));
    Environment::new(env_id, alpha, spurious_idx.to_vec(), Dataset::new(x, y, features, classes)?)
}

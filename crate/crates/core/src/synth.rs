//! Deterministic generators for the synthetic experiments.
//!
//! Two families:
//!
//! * Group-task regression: T tasks split into equal groups, each group's
//!   targets produced by its own small MoE over shared inputs. Task weight
//!   vectors within a group are equicorrelated Gaussians, so tasks in the
//!   same group are strongly related and tasks across groups are not.
//! * Recovery classification: a random 4-expert MoE with a logistic head
//!   labels standard-normal inputs; the experiment later tries to recover
//!   the generating experts from a larger frozen pool.
//!
//! Group g of a dataset draws from ChaCha stream `g`, and the shared input
//! matrix from its own stream, so regenerating one group never perturbs the
//! others. Same seed, same bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::io::{fmt_f64, read_named_tensors, write_named_tensors};
use crate::tensor::Tensor;

const X_STREAM: u64 = 1_000_000;
const RECOVERY_GENERATOR_STREAM: u64 = 2_000_000;

/// Error raised by dataset generation and (de)serialization.
#[derive(Debug)]
pub enum SynthError {
    BadConfig(String),
    Io(io::Error),
    Parse(String),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::BadConfig(d) => write!(f, "invalid generator config: {}", d),
            SynthError::Io(e) => write!(f, "io error: {}", e),
            SynthError::Parse(d) => write!(f, "parse error: {}", d),
        }
    }
}

impl std::error::Error for SynthError {}

impl From<io::Error> for SynthError {
    fn from(e: io::Error) -> Self {
        SynthError::Io(e)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| normal(rng)).collect()).expect("shape")
}

/// One generating expert: `p -> units` dense kernel with ReLU units.
/// Kernels are standard normal, biases zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GenExpert {
    /// Kernel, `p x units`.
    pub w: Tensor,
}

impl GenExpert {
    /// Hidden activations `relu(x W)`, length `units`.
    pub fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let (p, units) = (self.w.shape()[0], self.w.shape()[1]);
        debug_assert_eq!(x.len(), p);
        let mut h = vec![0.0; units];
        for (j, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (hv, &wv) in h.iter_mut().zip(self.w.row(j)) {
                *hv += xv * wv;
            }
        }
        for v in h.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        h
    }

    /// Scalar output: the sum of the ReLU units.
    pub fn scalar_output(&self, x: &[f64]) -> f64 {
        self.hidden(x).iter().sum()
    }
}

/// Generator record for one task group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupGenerator {
    pub experts: Vec<GenExpert>,
    /// Task weight vectors, `tasks_per_group` rows of length `experts`.
    pub task_weights: Vec<Vec<f64>>,
}

impl GroupGenerator {
    /// Target of one task for one input: softmax-weighted expert combination.
    pub fn target(&self, task: usize, x: &[f64]) -> f64 {
        let mix = crate::gate::softmax_slice(&self.task_weights[task]);
        self.experts
            .iter()
            .zip(&mix)
            .map(|(e, &w)| w * e.scalar_output(x))
            .sum()
    }
}

/// Configuration of the group-task generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTaskConfig {
    pub groups: usize,
    pub tasks_per_group: usize,
    pub experts_per_group: usize,
    pub units_per_expert: usize,
    pub input_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Pairwise correlation of task weights within a group.
    pub corr: f64,
}

impl Default for GroupTaskConfig {
    fn default() -> Self {
        // Desk-scale defaults; the full-size experiment uses 4 groups of 16
        // tasks over 100k/20k/20k examples.
        GroupTaskConfig {
            groups: 2,
            tasks_per_group: 8,
            experts_per_group: 4,
            units_per_expert: 4,
            input_dim: 10,
            n_train: 10_000,
            n_val: 2_000,
            n_test: 2_000,
            corr: 0.8,
        }
    }
}

impl GroupTaskConfig {
    pub fn total_tasks(&self) -> usize {
        self.groups * self.tasks_per_group
    }

    pub fn total_examples(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.groups == 0 || self.tasks_per_group == 0 || self.experts_per_group == 0 {
            return Err(SynthError::BadConfig("groups, tasks and experts must be positive".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(SynthError::BadConfig("all three splits must be non-empty".into()));
        }
        if !(0.0..1.0).contains(&self.corr) {
            return Err(SynthError::BadConfig(format!("corr must be in [0, 1), got {}", self.corr)));
        }
        Ok(())
    }
}

/// Multi-task regression dataset with group structure.
#[derive(Debug, Clone)]
pub struct GroupTaskDataset {
    pub config: GroupTaskConfig,
    pub seed: u64,
    /// Inputs, `N x p`, shared by all tasks.
    pub x: Tensor,
    /// Targets, `N x T`.
    pub y: Tensor,
    /// Group index of each task.
    pub group_of_task: Vec<usize>,
    pub generators: Vec<GroupGenerator>,
}

impl GroupTaskDataset {
    pub fn split_ranges(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
        let c = &self.config;
        (
            0..c.n_train,
            c.n_train..c.n_train + c.n_val,
            c.n_train + c.n_val..c.total_examples(),
        )
    }
}

/// Samples the per-group task weight vectors: for each expert coordinate the
/// task values are one draw from an equicorrelated Gaussian (unit variance,
/// pairwise correlation `corr`), realized as `sqrt(corr) * shared +
/// sqrt(1 - corr) * independent`.
pub fn sample_task_weights(
    rng: &mut ChaCha8Rng,
    tasks: usize,
    coords: usize,
    corr: f64,
) -> Vec<Vec<f64>> {
    let a = corr.sqrt();
    let b = (1.0 - corr).sqrt();
    let mut out = vec![vec![0.0; coords]; tasks];
    for c in 0..coords {
        let shared = normal(rng);
        for row in out.iter_mut() {
            row[c] = a * shared + b * normal(rng);
        }
    }
    out
}

/// Generator parameters of one group, drawn from that group's own stream.
pub fn group_generator(cfg: &GroupTaskConfig, seed: u64, group: usize) -> GroupGenerator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(group as u64);
    let experts = (0..cfg.experts_per_group)
        .map(|_| GenExpert { w: normal_matrix(&mut rng, cfg.input_dim, cfg.units_per_expert) })
        .collect();
    let task_weights = sample_task_weights(&mut rng, cfg.tasks_per_group, cfg.experts_per_group, cfg.corr);
    GroupGenerator { experts, task_weights }
}

/// Generates the full group-task dataset for a seed. Deterministic;
/// group parameters come from independent sub-streams.
pub fn gen_group_tasks(cfg: &GroupTaskConfig, seed: u64) -> Result<GroupTaskDataset, SynthError> {
    cfg.validate()?;
    let n = cfg.total_examples();
    let t = cfg.total_tasks();

    let mut xrng = ChaCha8Rng::seed_from_u64(seed);
    xrng.set_stream(X_STREAM);
    let x = normal_matrix(&mut xrng, n, cfg.input_dim);

    let generators: Vec<GroupGenerator> =
        (0..cfg.groups).map(|g| group_generator(cfg, seed, g)).collect();

    let mut y = vec![0.0; n * t];
    for row in 0..n {
        let xrow = x.row(row);
        for (g, generator) in generators.iter().enumerate() {
            // Expert outputs are shared by all tasks in the group.
            let outputs: Vec<f64> =
                generator.experts.iter().map(|e| e.scalar_output(xrow)).collect();
            for task in 0..cfg.tasks_per_group {
                let mix = crate::gate::softmax_slice(&generator.task_weights[task]);
                let target: f64 = outputs.iter().zip(&mix).map(|(o, w)| o * w).sum();
                y[row * t + g * cfg.tasks_per_group + task] = target;
            }
        }
    }

    let group_of_task = (0..t).map(|i| i / cfg.tasks_per_group).collect();
    Ok(GroupTaskDataset {
        config: cfg.clone(),
        seed,
        x,
        y: Tensor::new(vec![n, t], y).expect("shape"),
        group_of_task,
        generators,
    })
}

/// Generator record of the recovery dataset: four ReLU experts averaged into
/// a logistic unit.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryGenerator {
    pub experts: Vec<GenExpert>,
    /// Logistic head kernel over the averaged hidden vector.
    pub head_w: Vec<f64>,
    /// Sub-seed that produced an acceptably balanced generator.
    pub attempt: u64,
}

impl RecoveryGenerator {
    /// Pre-sigmoid output of the generating MoE.
    pub fn logit(&self, x: &[f64]) -> f64 {
        let units = self.experts[0].w.shape()[1];
        let mut mean = vec![0.0; units];
        for e in &self.experts {
            for (m, h) in mean.iter_mut().zip(e.hidden(x)) {
                *m += h;
            }
        }
        let scale = 1.0 / self.experts.len() as f64;
        mean.iter().zip(&self.head_w).map(|(m, w)| m * scale * w).sum()
    }

    /// Label: logistic output thresholded at one half (logit at zero).
    pub fn label(&self, x: &[f64]) -> f64 {
        if self.logit(x) > 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Binary classification dataset generated by a frozen random MoE.
#[derive(Debug, Clone)]
pub struct RecoveryDataset {
    pub seed: u64,
    /// Inputs, `N x p`.
    pub x: Tensor,
    /// Binary labels.
    pub y: Vec<f64>,
    pub generator: RecoveryGenerator,
    /// First `n_train` rows train, the rest validate.
    pub n_train: usize,
}

/// Label balance outside this band marks a degenerate generator.
pub const RECOVERY_BALANCE_BAND: (f64, f64) = (0.3, 0.7);

/// Generates the recovery dataset: standard-normal inputs, labels from a
/// random 4-expert generator. Degenerate generators (label balance outside
/// the band) are rejected and resampled from the next sub-stream.
pub fn gen_recovery_data(
    input_dim: usize,
    n: usize,
    seed: u64,
) -> Result<RecoveryDataset, SynthError> {
    if n < 2 {
        return Err(SynthError::BadConfig(format!("need at least 2 examples, got {}", n)));
    }
    let mut xrng = ChaCha8Rng::seed_from_u64(seed);
    xrng.set_stream(X_STREAM);
    let x = normal_matrix(&mut xrng, n, input_dim);

    for attempt in 0.. {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(RECOVERY_GENERATOR_STREAM + attempt);
        let experts: Vec<GenExpert> =
            (0..4).map(|_| GenExpert { w: normal_matrix(&mut rng, input_dim, 4) }).collect();
        let head_w: Vec<f64> = (0..4).map(|_| normal(&mut rng)).collect();
        let generator = RecoveryGenerator { experts, head_w, attempt };

        let y: Vec<f64> = (0..n).map(|i| generator.label(x.row(i))).collect();
        let balance = y.iter().sum::<f64>() / n as f64;
        if balance >= RECOVERY_BALANCE_BAND.0 && balance <= RECOVERY_BALANCE_BAND.1 {
            return Ok(RecoveryDataset { seed, x, y, generator, n_train: n / 2 });
        }
    }
    unreachable!("rejection loop always returns");
}

// --- serialization -------------------------------------------------------------

/// Writes a dataset table as columnar text: feature columns first, then one
/// column per task, 17 significant digits.
pub fn write_dataset_csv(
    path: &Path,
    x: &Tensor,
    task_names: &[String],
    targets: &[Vec<f64>],
) -> Result<(), SynthError> {
    let (n, p) = (x.shape()[0], x.shape()[1]);
    debug_assert_eq!(task_names.len(), targets.len());
    let mut header: Vec<String> = (0..p).map(|j| format!("x{}", j)).collect();
    header.extend(task_names.iter().cloned());
    let mut out = String::with_capacity(n * (p + targets.len()) * 24);
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..n {
        let mut fields: Vec<String> = x.row(i).iter().map(|v| fmt_f64(*v)).collect();
        for t in targets {
            fields.push(fmt_f64(t[i]));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    crate::io::atomic_write(path, &out)?;
    Ok(())
}

/// Reads a dataset table written by [`write_dataset_csv`]: columns named
/// `x<j>` are features, the rest are task targets.
pub fn read_dataset_csv(path: &Path) -> Result<(Tensor, Vec<(String, Vec<f64>)>), SynthError> {
    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines();
    let header = lines.next().ok_or_else(|| SynthError::Parse("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let p = cols.iter().take_while(|c| c.starts_with('x') && c[1..].parse::<usize>().is_ok()).count();
    if p == 0 {
        return Err(SynthError::Parse("no feature columns".into()));
    }
    let task_names: Vec<String> = cols[p..].iter().map(|s| s.to_string()).collect();
    let mut xdata = Vec::new();
    let mut targets: Vec<Vec<f64>> = vec![Vec::new(); task_names.len()];
    let mut rows = 0;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(SynthError::Parse(format!("row has {} fields, expected {}", fields.len(), cols.len())));
        }
        for f in &fields[..p] {
            xdata.push(f.parse::<f64>().map_err(|e| SynthError::Parse(e.to_string()))?);
        }
        for (t, f) in targets.iter_mut().zip(&fields[p..]) {
            t.push(f.parse::<f64>().map_err(|e| SynthError::Parse(e.to_string()))?);
        }
        rows += 1;
    }
    let x = Tensor::new(vec![rows, p], xdata).map_err(|e| SynthError::Parse(e.to_string()))?;
    Ok((x, task_names.into_iter().zip(targets).collect()))
}

/// Persists a group-task generator record for replay.
pub fn write_group_generator_record(
    path: &Path,
    ds: &GroupTaskDataset,
) -> Result<(), SynthError> {
    let mut tensors = BTreeMap::new();
    for (g, generator) in ds.generators.iter().enumerate() {
        for (i, e) in generator.experts.iter().enumerate() {
            tensors.insert(format!("group{}.expert{}.w", g, i), e.w.clone());
        }
        let tw: Vec<f64> = generator.task_weights.iter().flatten().copied().collect();
        tensors.insert(
            format!("group{}.task_weights", g),
            Tensor::new(vec![ds.config.tasks_per_group, ds.config.experts_per_group], tw)
                .expect("shape"),
        );
    }
    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), ds.seed);
    meta.insert("groups".into(), ds.config.groups as u64);
    meta.insert("tasks_per_group".into(), ds.config.tasks_per_group as u64);
    write_named_tensors(path, &tensors, &meta)?;
    Ok(())
}

/// Persists a recovery generator record for replay.
pub fn write_recovery_generator_record(
    path: &Path,
    ds: &RecoveryDataset,
) -> Result<(), SynthError> {
    let mut tensors = BTreeMap::new();
    for (i, e) in ds.generator.experts.iter().enumerate() {
        tensors.insert(format!("expert{}.w", i), e.w.clone());
    }
    tensors.insert("head.w".into(), Tensor::vector(ds.generator.head_w.clone()));
    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), ds.seed);
    meta.insert("attempt".into(), ds.generator.attempt);
    write_named_tensors(path, &tensors, &meta)?;
    Ok(())
}

/// Loads a recovery generator record.
pub fn read_recovery_generator_record(path: &Path) -> Result<RecoveryGenerator, SynthError> {
    let (tensors, meta) = read_named_tensors(path)?;
    let mut experts = Vec::new();
    for i in 0.. {
        match tensors.get(&format!("expert{}.w", i)) {
            Some(t) => experts.push(GenExpert { w: t.clone() }),
            None => break,
        }
    }
    if experts.is_empty() {
        return Err(SynthError::Parse("no experts in record".into()));
    }
    let head_w = tensors
        .get("head.w")
        .ok_or_else(|| SynthError::Parse("missing head.w".into()))?
        .data()
        .to_vec();
    Ok(RecoveryGenerator { experts, head_w, attempt: meta.get("attempt").copied().unwrap_or(0) })
}

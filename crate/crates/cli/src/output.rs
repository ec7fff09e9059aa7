//! Run artifacts: trajectory CSV, flat metrics JSON, checkpoints, results
//! tables. All files are written atomically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dselect_core::io::{atomic_write, fmt_f64, read_named_tensors, write_named_tensors};
use dselect_core::{ParamStore, Tensor};

use crate::error::HarnessError;

/// One gate-weight observation: `(step, task, expert, weight)`.
pub type TrajectoryRow = (u64, usize, usize, f64);

/// Writes the expert-weight trajectory as `step,task,expert,weight`.
pub fn write_trajectory(path: &Path, rows: &[TrajectoryRow]) -> Result<(), HarnessError> {
    let mut out = String::with_capacity(rows.len() * 40 + 32);
    out.push_str("step,task,expert,weight\n");
    for (step, task, expert, weight) in rows {
        out.push_str(&format!("{},{},{},{}\n", step, task, expert, fmt_f64(*weight)));
    }
    atomic_write(path, &out)?;
    Ok(())
}

/// Writes metrics as a flat JSON object (name -> number), keys sorted.
pub fn write_metrics_json(path: &Path, metrics: &BTreeMap<String, f64>) -> Result<(), HarnessError> {
    let map: serde_json::Map<String, serde_json::Value> = metrics
        .iter()
        .map(|(k, v)| {
            let num = serde_json::Number::from_f64(*v)
                .unwrap_or_else(|| serde_json::Number::from(0));
            (k.clone(), serde_json::Value::Number(num))
        })
        .collect();
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(map))
        .map_err(|e| HarnessError::Internal(e.to_string()))?;
    atomic_write(path, &format!("{}\n", text))?;
    Ok(())
}

/// Model checkpoint: trainable parameters and frozen constants in the flat
/// named-tensor text format.
pub fn write_checkpoint(
    path: &Path,
    params: &ParamStore,
    constants: &BTreeMap<String, Tensor>,
    seed: u64,
) -> Result<(), HarnessError> {
    let mut all: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in params.iter() {
        all.insert(format!("param.{}", name), t.clone());
    }
    for (name, t) in constants.iter() {
        all.insert(format!("const.{}", name), t.clone());
    }
    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), seed);
    write_named_tensors(path, &all, &meta)?;
    Ok(())
}

/// Reads a checkpoint back into parameters and constants.
pub fn read_checkpoint(
    path: &Path,
) -> Result<(ParamStore, BTreeMap<String, Tensor>, u64), HarnessError> {
    let (all, meta) = read_named_tensors(path)?;
    let mut params = ParamStore::new();
    let mut constants = BTreeMap::new();
    for (name, t) in all {
        if let Some(stripped) = name.strip_prefix("param.") {
            params.insert(stripped, t);
        } else if let Some(stripped) = name.strip_prefix("const.") {
            constants.insert(stripped.to_string(), t);
        } else {
            return Err(HarnessError::Internal(format!("unexpected checkpoint entry '{}'", name)));
        }
    }
    Ok((params, constants, meta.get("seed").copied().unwrap_or(0)))
}

/// Writes a results table with string-or-number cells.
pub fn write_results_table(
    path: &Path,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), HarnessError> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    atomic_write(path, &out)?;
    Ok(())
}

/// Standard file layout inside a run directory.
pub struct RunPaths {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub trajectory: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub generator_record: PathBuf,
    pub dataset: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        RunPaths {
            config: dir.join("config.txt"),
            trajectory: dir.join("trajectory.csv"),
            metrics: dir.join("metrics.json"),
            checkpoint: dir.join("checkpoint.txt"),
            generator_record: dir.join("generator_record.txt"),
            dataset: dir.join("dataset.csv"),
            dir,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_json_is_flat_and_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut m = BTreeMap::new();
        m.insert("val_loss".to_string(), 0.25);
        m.insert("binary_convergence_step".to_string(), 350.0);
        write_metrics_json(&path, &m).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["val_loss"], 0.25);
        assert_eq!(parsed["binary_convergence_step"], 350.0);
        // Keys come out in sorted order.
        let first = text.find("binary_convergence_step").unwrap();
        let second = text.find("val_loss").unwrap();
        assert!(first < second);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        let mut params = ParamStore::new();
        params.insert("gate0.alpha", Tensor::vector(vec![0.1, -0.7]));
        let mut constants = BTreeMap::new();
        constants.insert("expert0.l0.w".to_string(), Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        write_checkpoint(&path, &params, &constants, 99).unwrap();
        let (p2, c2, seed) = read_checkpoint(&path).unwrap();
        assert_eq!(seed, 99);
        assert_eq!(p2.get("gate0.alpha").unwrap().data(), params.get("gate0.alpha").unwrap().data());
        assert_eq!(c2["expert0.l0.w"].data(), constants["expert0.l0.w"].data());
    }

    #[test]
    fn trajectory_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        write_trajectory(&path, &[(0, 0, 0, 0.25), (50, 1, 3, 0.75)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,task,expert,weight");
        assert!(lines.next().unwrap().starts_with("0,0,0,2.5"));
    }
}

//! The harness commands: single runs, hyperparameter sweeps, the recovery
//! experiment, the group-synthetic comparison, and metric recomputation from
//! checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use dselect_core::io::fmt_f64;
use dselect_core::metrics as m;
use dselect_core::model::extract_inference;
use dselect_core::synth::{
    write_dataset_csv, write_group_generator_record, write_recovery_generator_record,
};

use crate::config::{ExperimentConfig, ExperimentKind, GateChoice};
use crate::error::HarnessError;
use crate::output::{
    write_checkpoint, write_metrics_json, write_results_table, write_trajectory, RunPaths,
};
use crate::runner::{eval_task_losses, prepare_data, train, DataSource, TrainOutcome};

/// Artifacts of one finished run.
pub struct RunResult {
    pub metrics: BTreeMap<String, f64>,
    pub lambda_valid: bool,
    pub out_dir: PathBuf,
    pub trajectory_path: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Trains one configuration and persists config, trajectory, metrics,
/// checkpoint and generator record under the config's output directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let outcome = train(cfg, &data)?;
    persist_run(cfg, &data.source, &outcome)
}

fn persist_run(
    cfg: &ExperimentConfig,
    source: &DataSource,
    outcome: &TrainOutcome,
) -> Result<RunResult, HarnessError> {
    let paths = RunPaths::new(&cfg.out_dir);
    std::fs::create_dir_all(&paths.dir)?;
    dselect_core::io::atomic_write(&paths.config, &cfg.serialize())?;
    write_trajectory(&paths.trajectory, &outcome.trajectory)?;
    write_metrics_json(&paths.metrics, &outcome.metrics)?;
    write_checkpoint(
        &paths.checkpoint,
        &outcome.params,
        &outcome.built.model.constants,
        cfg.seed,
    )?;
    match source {
        DataSource::Recovery(ds) => write_recovery_generator_record(&paths.generator_record, ds)?,
        DataSource::Group(ds) => write_group_generator_record(&paths.generator_record, ds)?,
    }
    if cfg.write_dataset {
        match source {
            DataSource::Recovery(ds) => {
                write_dataset_csv(&paths.dataset, &ds.x, &["label".to_string()], &[ds.y.clone()])?;
            }
            DataSource::Group(ds) => {
                let t = ds.config.total_tasks();
                let names: Vec<String> = (0..t).map(|i| format!("task{i}")).collect();
                let targets: Vec<Vec<f64>> = (0..t)
                    .map(|task| (0..ds.x.shape()[0]).map(|row| ds.y.at(row, task)).collect())
                    .collect();
                write_dataset_csv(&paths.dataset, &ds.x, &names, &targets)?;
            }
        }
    }
    Ok(RunResult {
        metrics: outcome.metrics.clone(),
        lambda_valid: outcome.lambda_valid,
        out_dir: paths.dir,
        trajectory_path: paths.trajectory,
        metrics_path: paths.metrics,
        checkpoint_path: paths.checkpoint,
    })
}

/// One grid point of a sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub learning_rate: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub xi: f64,
}

fn grid_points(cfg: &ExperimentConfig) -> Vec<SweepPoint> {
    let or_base = |grid: &[f64], base: f64| -> Vec<f64> {
        if grid.is_empty() {
            vec![base]
        } else {
            grid.to_vec()
        }
    };
    let lrs = or_base(&cfg.sweep.learning_rate, cfg.learning_rate);
    let lambdas = or_base(&cfg.sweep.lambda, cfg.lambda);
    let gammas = or_base(&cfg.sweep.gamma, cfg.gamma);
    let xis = or_base(&cfg.sweep.xi, cfg.xi);
    let mut out = Vec::new();
    for &lr in &lrs {
        for &la in &lambdas {
            for &ga in &gammas {
                for &xi in &xis {
                    out.push(SweepPoint { learning_rate: lr, lambda: la, gamma: ga, xi });
                }
            }
        }
    }
    out
}

pub struct SweepOutcome {
    pub best: RunResult,
    pub table_path: PathBuf,
    pub runs: usize,
    pub valid_runs: usize,
}

/// Runs the configured grid with `trials` seeds per point (seeds derived as
/// `base_seed + run_index`), filters out lambda-invalid runs, and selects the
/// best remaining run by validation loss.
pub fn cmd_sweep(cfg: &ExperimentConfig, trials: usize) -> Result<SweepOutcome, HarnessError> {
    cfg.validate()?;
    if trials == 0 {
        return Err(HarnessError::Config("sweep needs at least one trial".into()));
    }
    let points = grid_points(cfg);
    let base = PathBuf::from(&cfg.out_dir);

    let mut run_cfgs = Vec::new();
    for (pi, point) in points.iter().enumerate() {
        for trial in 0..trials {
            let idx = run_cfgs.len();
            let mut c = cfg.clone();
            c.learning_rate = point.learning_rate;
            c.lambda = point.lambda;
            c.gamma = point.gamma;
            c.xi = point.xi;
            c.seed = cfg.seed + idx as u64;
            c.out_dir = base.join(format!("run{:03}", idx)).to_string_lossy().into_owned();
            run_cfgs.push((idx, pi, trial, c));
        }
    }

    let results: Vec<Result<RunResult, HarnessError>> =
        run_cfgs.par_iter().map(|(_, _, _, c)| cmd_train(c)).collect();

    let mut rows = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut valid_runs = 0;
    let mut finished = Vec::new();
    for ((idx, pi, trial, c), result) in run_cfgs.iter().zip(results) {
        let r = result?;
        let val_loss = *r.metrics.get("val_loss").unwrap_or(&f64::INFINITY);
        rows.push(vec![
            idx.to_string(),
            pi.to_string(),
            trial.to_string(),
            c.seed.to_string(),
            fmt_f64(c.learning_rate),
            fmt_f64(c.lambda),
            fmt_f64(c.gamma),
            fmt_f64(c.xi),
            fmt_f64(val_loss),
            (r.lambda_valid as u8).to_string(),
        ]);
        if r.lambda_valid {
            valid_runs += 1;
            if best.map(|(b, _)| val_loss < b).unwrap_or(true) {
                best = Some((val_loss, *idx));
            }
        }
        finished.push(r);
    }

    let table_path = base.join("results.csv");
    write_results_table(
        &table_path,
        &[
            "run", "grid_point", "trial", "seed", "learning_rate", "lambda", "gamma", "xi",
            "val_loss", "lambda_valid",
        ],
        &rows,
    )?;

    let (_, best_idx) = best.ok_or(HarnessError::NoValidLambda)?;
    let runs = finished.len();
    Ok(SweepOutcome {
        best: finished.swap_remove(best_idx),
        table_path,
        runs,
        valid_runs,
    })
}

/// One row of the recovery experiment summary.
#[derive(Debug, Clone)]
pub struct RecoverRow {
    pub seed: u64,
    pub gate: GateChoice,
    pub recovered: usize,
    pub support_size: usize,
    pub oscillations: f64,
    pub tail_stable: bool,
    pub binary_step: Option<u64>,
    pub val_accuracy: f64,
}

pub struct RecoverReport {
    pub rows: Vec<RecoverRow>,
    pub seeds: Vec<u64>,
    pub dselect_full_recoveries: usize,
    pub dselect_mean_oscillations: f64,
    pub topk_mean_oscillations: f64,
    pub passing_tails_stable: bool,
}

/// Whether the support set is unchanged over the final tenth of snapshots.
fn tail_is_stable(supports: &[(u64, BTreeSet<usize>)]) -> bool {
    if supports.is_empty() {
        return false;
    }
    let tail = (supports.len() as f64 * 0.1).ceil() as usize;
    let tail = tail.max(2).min(supports.len());
    let last = &supports[supports.len() - 1].1;
    supports[supports.len() - tail..].iter().all(|(_, s)| s == last)
}

/// For each seed: generate recovery data and train a DSelect-k gate and a
/// Top-k gate under identical budgets; report recovered-expert counts and
/// support-oscillation statistics.
pub fn cmd_recover(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<RecoverReport, HarnessError> {
    let mut base = cfg.clone();
    base.experiment = ExperimentKind::Recovery;
    base.validate()?;
    let out_base = PathBuf::from(&base.out_dir);

    let runs: Vec<(u64, GateChoice)> = seeds
        .iter()
        .flat_map(|&s| [(s, GateChoice::DselectStatic), (s, GateChoice::TopK)])
        .collect();
    let outcomes: Vec<Result<(RecoverRow, RunResult), HarnessError>> = runs
        .par_iter()
        .map(|&(seed, gate)| {
            let mut c = base.clone();
            c.seed = seed;
            c.gate = gate;
            c.out_dir = out_base
                .join(format!("seed{}_{}", seed, gate))
                .to_string_lossy()
                .into_owned();
            let data = prepare_data(&c)?;
            let outcome = train(&c, &data)?;
            let result = persist_run(&c, &data.source, &outcome)?;
            let truth: BTreeSet<usize> = outcome
                .built
                .true_positions
                .as_ref()
                .expect("recovery model")
                .iter()
                .copied()
                .collect();
            let supports = &outcome.support_trajectory[0];
            let final_support = &supports.last().expect("snapshots").1;
            let row = RecoverRow {
                seed,
                gate,
                recovered: final_support.intersection(&truth).count(),
                support_size: final_support.len(),
                oscillations: outcome.metrics["support_oscillations"],
                tail_stable: tail_is_stable(supports),
                binary_step: outcome.metrics.get("binary_convergence_step").map(|&v| v as u64),
                val_accuracy: *outcome.metrics.get("val_accuracy").unwrap_or(&f64::NAN),
            };
            Ok((row, result))
        })
        .collect();

    let mut rows = Vec::new();
    for o in outcomes {
        rows.push(o?.0);
    }

    let dselect: Vec<&RecoverRow> =
        rows.iter().filter(|r| r.gate == GateChoice::DselectStatic).collect();
    let topk: Vec<&RecoverRow> = rows.iter().filter(|r| r.gate == GateChoice::TopK).collect();
    let full = dselect
        .iter()
        .filter(|r| r.recovered == base.k && r.support_size == base.k)
        .count();
    let mean = |rs: &[&RecoverRow]| {
        if rs.is_empty() {
            0.0
        } else {
            rs.iter().map(|r| r.oscillations).sum::<f64>() / rs.len() as f64
        }
    };
    let passing_tails_stable = dselect
        .iter()
        .filter(|r| r.recovered == base.k && r.support_size == base.k)
        .all(|r| r.tail_stable);

    let report = RecoverReport {
        seeds: seeds.to_vec(),
        dselect_full_recoveries: full,
        dselect_mean_oscillations: mean(&dselect),
        topk_mean_oscillations: mean(&topk),
        passing_tails_stable,
        rows,
    };

    let table: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.seed.to_string(),
                r.gate.to_string(),
                r.recovered.to_string(),
                r.support_size.to_string(),
                fmt_f64(r.oscillations),
                (r.tail_stable as u8).to_string(),
                r.binary_step.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
                fmt_f64(r.val_accuracy),
            ]
        })
        .collect();
    write_results_table(
        &out_base.join("recovery_summary.csv"),
        &[
            "seed", "gate", "recovered_true_experts", "support_size", "oscillations",
            "tail_stable", "binary_convergence_step", "val_accuracy",
        ],
        &table,
    )?;

    let mut summary = BTreeMap::new();
    summary.insert("seeds".to_string(), seeds.len() as f64);
    summary.insert("dselect_full_recoveries".to_string(), report.dselect_full_recoveries as f64);
    summary.insert("dselect_mean_oscillations".to_string(), report.dselect_mean_oscillations);
    summary.insert("topk_mean_oscillations".to_string(), report.topk_mean_oscillations);
    summary.insert(
        "passing_tails_stable".to_string(),
        if report.passing_tails_stable { 1.0 } else { 0.0 },
    );
    write_metrics_json(&out_base.join("recovery_summary.json"), &summary)?;

    Ok(report)
}

/// One row of the group-synthetic comparison.
#[derive(Debug, Clone)]
pub struct GroupSynthRow {
    pub gate: GateChoice,
    pub task_count: usize,
    pub seed: u64,
    pub test_mse_mean: f64,
    pub related_jaccard: f64,
    pub unrelated_jaccard: f64,
    pub random_baseline: f64,
}

pub struct GroupSynthReport {
    pub rows: Vec<GroupSynthRow>,
    pub table_path: PathBuf,
}

/// Trains a multi-gate MoE per gate kind on the group-structured synthetic
/// tasks and reports test MSE plus Jaccard statistics, one CSV row per
/// (gate, task count, seed).
pub fn cmd_group_synth(
    cfg: &ExperimentConfig,
    gates: &[GateChoice],
    seeds: &[u64],
) -> Result<GroupSynthReport, HarnessError> {
    let mut base = cfg.clone();
    if base.experiment == ExperimentKind::Recovery {
        base.experiment = ExperimentKind::GroupSynth;
    }
    base.validate()?;
    let out_base = PathBuf::from(&base.out_dir);
    let task_count = base.data.groups * base.data.tasks_per_group;

    let runs: Vec<(u64, GateChoice)> =
        seeds.iter().flat_map(|&s| gates.iter().map(move |&g| (s, g))).collect();
    let outcomes: Vec<Result<GroupSynthRow, HarnessError>> = runs
        .par_iter()
        .map(|&(seed, gate)| {
            let mut c = base.clone();
            c.seed = seed;
            c.gate = gate;
            c.out_dir = out_base
                .join(format!("tasks{}_seed{}_{}", task_count, seed, gate))
                .to_string_lossy()
                .into_owned();
            let r = cmd_train(&c)?;
            Ok(GroupSynthRow {
                gate,
                task_count,
                seed,
                test_mse_mean: *r.metrics.get("test_mse_mean").unwrap_or(&f64::NAN),
                related_jaccard: *r.metrics.get("related_jaccard").unwrap_or(&f64::NAN),
                unrelated_jaccard: *r.metrics.get("unrelated_jaccard").unwrap_or(&f64::NAN),
                random_baseline: *r.metrics.get("random_gate_expected_jaccard").unwrap_or(&f64::NAN),
            })
        })
        .collect();

    let mut rows = Vec::new();
    for o in outcomes {
        rows.push(o?);
    }

    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.gate.to_string(),
                r.task_count.to_string(),
                r.seed.to_string(),
                fmt_f64(r.test_mse_mean),
                fmt_f64(r.related_jaccard),
                fmt_f64(r.unrelated_jaccard),
                fmt_f64(r.random_baseline),
            ]
        })
        .collect();
    let table_path = out_base.join("group_synth_results.csv");
    write_results_table(
        &table_path,
        &["gate", "task_count", "seed", "test_mse", "related_jaccard", "unrelated_jaccard", "random_gate_jaccard"],
        &table,
    )?;

    Ok(GroupSynthReport { rows, table_path })
}

/// Recomputes predictive and selection metrics from a checkpoint plus the
/// run's config (the dataset is regenerated deterministically from the
/// config's seed).
pub fn cmd_metrics(
    config_path: &Path,
    checkpoint_path: &Path,
    out_path: &Path,
) -> Result<BTreeMap<String, f64>, HarnessError> {
    let text = std::fs::read_to_string(config_path)?;
    let cfg = ExperimentConfig::parse(&text)?;
    let data = prepare_data(&cfg)?;
    let built = crate::runner::build_from_config(&cfg, &data)?;
    let (params, constants, _seed) = crate::output::read_checkpoint(checkpoint_path)?;

    let mut model = built.model;
    model.constants = constants;
    let infer = extract_inference(&model, &params, cfg.gamma, cfg.temperature);

    let mut metrics = BTreeMap::new();
    let val_losses = eval_task_losses(&infer, &model.arch.tasks, &data.val_x, &data.val_y)?;
    let weights = model.task_loss_weights();
    metrics.insert(
        "val_loss".to_string(),
        val_losses.iter().zip(&weights).map(|(l, w)| l * w).sum(),
    );
    if let Some(test_x) = &data.test_x {
        let test_losses = eval_task_losses(&infer, &model.arch.tasks, test_x, &data.test_y)?;
        metrics.insert(
            "test_mse_mean".to_string(),
            test_losses.iter().sum::<f64>() / test_losses.len() as f64,
        );
    }
    let mut supports = Vec::new();
    for t in 0..data.tasks {
        supports.push(infer.gates[t].declared_support(&[])?);
    }
    metrics.insert(
        "avg_selected_experts".to_string(),
        supports.iter().map(|s| s.len()).sum::<usize>() as f64 / supports.len() as f64,
    );
    if data.tasks >= 2 {
        let (related, unrelated) = m::group_jaccard(&supports, &data.group_of_task);
        metrics.insert("related_jaccard".to_string(), related);
        if let Some(u) = unrelated {
            metrics.insert("unrelated_jaccard".to_string(), u);
        }
    }
    write_metrics_json(out_path, &metrics)?;
    Ok(metrics)
}

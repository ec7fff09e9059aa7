//! Configuration-driven training: data preparation, model assembly, the
//! optimization loop with annealing schedules and trajectory snapshots, and
//! metric assembly including the lambda-validity rule.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dselect_core::metrics as m;
use dselect_core::model::{
    build_moe, build_recovery_model, extract_inference, extract_static_dselect, BatchBindings,
    ExpertHead, ExpertSpec, GateConfig, GateKind, InferenceModel, MoeArchitecture, MoeModel,
    PlainGate, TaskLossKind, TaskSpec,
};
use dselect_core::optim::{
    schedule_value, EarlyStopper, Optimizer, OptimizerKind, Schedule, ScheduleSpacing,
    ScheduleTarget,
};
use dselect_core::synth::{
    gen_group_tasks, gen_recovery_data, GroupTaskConfig, GroupTaskDataset, RecoveryDataset,
};
use dselect_core::{ParamStore, Tensor};

use crate::config::{AnnealTarget, ExperimentConfig, ExperimentKind, GateChoice, OptChoice};
use crate::error::HarnessError;
use crate::output::TrajectoryRow;

const INIT_STREAM: u64 = 10;
const SHUFFLE_STREAM: u64 = 11;
const NOISE_STREAM: u64 = 12;

/// Rows of per-example gates sampled when summarizing a per-example gate as
/// one weight vector for the trajectory file.
const PER_EXAMPLE_PROBE: usize = 256;

/// Dataset splits plus the generator that produced them.
pub struct PreparedData {
    pub input_dim: usize,
    pub tasks: usize,
    pub train_x: Tensor,
    pub train_y: Vec<Vec<f64>>,
    pub val_x: Tensor,
    pub val_y: Vec<Vec<f64>>,
    pub test_x: Option<Tensor>,
    pub test_y: Vec<Vec<f64>>,
    pub group_of_task: Vec<usize>,
    pub source: DataSource,
}

pub enum DataSource {
    Recovery(RecoveryDataset),
    Group(GroupTaskDataset),
}

fn slice_rows(t: &Tensor, range: std::ops::Range<usize>) -> Tensor {
    let cols = t.shape()[1];
    Tensor::new(
        vec![range.len(), cols],
        t.data()[range.start * cols..range.end * cols].to_vec(),
    )
    .expect("row slice")
}

fn column(t: &Tensor, col: usize, range: std::ops::Range<usize>) -> Vec<f64> {
    range.map(|row| t.at(row, col)).collect()
}

/// Generates the dataset a config describes.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData, HarnessError> {
    match cfg.experiment {
        ExperimentKind::Recovery => {
            let ds = gen_recovery_data(cfg.data.p, cfg.data.n, cfg.seed)?;
            let n_train = ds.n_train;
            let n = ds.x.shape()[0];
            Ok(PreparedData {
                input_dim: cfg.data.p,
                tasks: 1,
                train_x: slice_rows(&ds.x, 0..n_train),
                train_y: vec![ds.y[..n_train].to_vec()],
                val_x: slice_rows(&ds.x, n_train..n),
                val_y: vec![ds.y[n_train..].to_vec()],
                test_x: None,
                test_y: vec![],
                group_of_task: vec![0],
                source: DataSource::Recovery(ds),
            })
        }
        ExperimentKind::GroupSynth | ExperimentKind::Custom => {
            let gcfg = GroupTaskConfig {
                groups: cfg.data.groups,
                tasks_per_group: cfg.data.tasks_per_group,
                experts_per_group: cfg.data.experts_per_group,
                units_per_expert: cfg.data.units_per_expert,
                input_dim: cfg.data.p,
                n_train: cfg.data.n_train,
                n_val: cfg.data.n_val,
                n_test: cfg.data.n_test,
                corr: cfg.data.corr,
            };
            let ds = gen_group_tasks(&gcfg, cfg.seed)?;
            let t = gcfg.total_tasks();
            let (train, val, test) = ds.split_ranges();
            Ok(PreparedData {
                input_dim: cfg.data.p,
                tasks: t,
                train_x: slice_rows(&ds.x, train.clone()),
                train_y: (0..t).map(|c| column(&ds.y, c, train.clone())).collect(),
                val_x: slice_rows(&ds.x, val.clone()),
                val_y: (0..t).map(|c| column(&ds.y, c, val.clone())).collect(),
                test_x: Some(slice_rows(&ds.x, test.clone())),
                test_y: (0..t).map(|c| column(&ds.y, c, test.clone())).collect(),
                group_of_task: ds.group_of_task.clone(),
                source: DataSource::Group(ds),
            })
        }
    }
}

fn gate_kind(cfg: &ExperimentConfig) -> GateKind {
    match cfg.gate {
        GateChoice::DselectStatic => GateKind::DselectStatic,
        GateChoice::DselectPerExample => GateKind::DselectPerExample { bias: cfg.gate_bias },
        GateChoice::TopK => GateKind::TopK { per_example: false },
        GateChoice::Softmax => GateKind::Softmax { per_example: false },
        GateChoice::Gumbel => GateKind::Gumbel,
        GateChoice::AblationAnneal => GateKind::AblationAnneal,
        GateChoice::AblationEntropy => GateKind::AblationEntropy,
    }
}

/// A model built from a config, plus recovery bookkeeping when applicable.
pub struct BuiltModel {
    pub model: MoeModel,
    pub true_positions: Option<Vec<usize>>,
    pub batch_size: usize,
}

pub fn build_from_config(
    cfg: &ExperimentConfig,
    data: &PreparedData,
) -> Result<BuiltModel, HarnessError> {
    let n = cfg.resolved_n_experts();
    let batch_size = cfg.batch_size.min(data.train_x.shape()[0]);
    let gate = GateConfig {
        kind: gate_kind(cfg),
        k: cfg.k,
        lambda: cfg.lambda,
        xi: cfg.xi,
        gamma: cfg.gamma,
        temperature: cfg.temperature,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(INIT_STREAM);
    match (&cfg.experiment, &data.source) {
        (ExperimentKind::Recovery, DataSource::Recovery(ds)) => {
            let rec = build_recovery_model(&ds.generator, n, gate, batch_size, &mut rng)?;
            Ok(BuiltModel {
                model: rec.model,
                true_positions: Some(rec.true_expert_positions),
                batch_size,
            })
        }
        _ => {
            let arch = MoeArchitecture {
                n_experts: n,
                input_dim: data.input_dim,
                expert: ExpertSpec {
                    hidden: vec![cfg.data.units_per_expert],
                    head: ExpertHead::SumUnits,
                    trainable: true,
                },
                tasks: (0..data.tasks).map(|t| TaskSpec::regression(format!("task{t}"))).collect(),
                gate,
                task_weight: cfg.task_weight,
            };
            let model = build_moe(&arch, batch_size, &mut rng)?;
            Ok(BuiltModel { model, true_positions: None, batch_size })
        }
    }
}

fn stable_bce(logit: f64, y: f64) -> f64 {
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// Per-task predictive losses over a split, using the plain inference path.
pub fn eval_task_losses(
    infer: &InferenceModel,
    tasks: &[TaskSpec],
    x: &Tensor,
    ys: &[Vec<f64>],
) -> Result<Vec<f64>, HarnessError> {
    let mut out = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        let preds = infer.predict_task(x, t)?;
        let loss = match task.loss {
            TaskLossKind::SquaredError => m::mse(&preds, &ys[t]),
            TaskLossKind::BinaryCrossEntropy => {
                preds.iter().zip(&ys[t]).map(|(&l, &y)| stable_bce(l, y)).sum::<f64>()
                    / preds.len() as f64
            }
        };
        out.push(loss);
    }
    Ok(out)
}

/// Everything a finished run reports.
pub struct TrainOutcome {
    pub built: BuiltModel,
    pub params: ParamStore,
    pub metrics: BTreeMap<String, f64>,
    pub trajectory: Vec<TrajectoryRow>,
    pub support_trajectory: Vec<Vec<(u64, BTreeSet<usize>)>>,
    pub s_of_z_snapshots: Vec<Vec<(u64, Tensor)>>,
    pub lambda_valid: bool,
    pub final_gamma: f64,
    pub final_temperature: f64,
}

/// Trains the configured model on prepared data. Deterministic for a fixed
/// config and seed.
pub fn train(cfg: &ExperimentConfig, data: &PreparedData) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let built = build_from_config(cfg, data)?;
    let model = &built.model;
    let batch = built.batch_size;
    let n_train = data.train_x.shape()[0];
    let steps_per_epoch = (n_train / batch).max(1);
    let total_steps = (steps_per_epoch * cfg.epochs) as u64;

    let schedule = match cfg.anneal.target {
        AnnealTarget::None => None,
        AnnealTarget::Gamma => Some(
            Schedule::new(
                ScheduleTarget::SmoothStepGamma,
                cfg.gamma,
                cfg.anneal.end,
                if cfg.anneal.steps > 0 { cfg.anneal.steps } else { total_steps as usize },
                if cfg.anneal.log_spacing { ScheduleSpacing::LogEven } else { ScheduleSpacing::Linear },
            )
            .map_err(HarnessError::Config)?,
        ),
        AnnealTarget::Temperature => Some(
            Schedule::new(
                if matches!(cfg.gate, GateChoice::Gumbel) {
                    ScheduleTarget::GumbelTemperature
                } else {
                    ScheduleTarget::AblationTemperature
                },
                cfg.temperature,
                cfg.anneal.end,
                if cfg.anneal.steps > 0 { cfg.anneal.steps } else { total_steps as usize },
                if cfg.anneal.log_spacing { ScheduleSpacing::LogEven } else { ScheduleSpacing::Linear },
            )
            .map_err(HarnessError::Config)?,
        ),
    };
    let hyper_at = |step: u64| -> (f64, f64) {
        match (&schedule, cfg.anneal.target) {
            (Some(s), AnnealTarget::Gamma) => (schedule_value(s, step as usize), cfg.temperature),
            (Some(s), AnnealTarget::Temperature) => (cfg.gamma, schedule_value(s, step as usize)),
            _ => (cfg.gamma, cfg.temperature),
        }
    };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(NOISE_STREAM);

    let mut params = model.params.clone();
    let kind = match cfg.optimizer {
        OptChoice::Sgd => OptimizerKind::Sgd,
        OptChoice::Adam => OptimizerKind::Adam,
        OptChoice::Adagrad => OptimizerKind::Adagrad,
    };
    let mut opt = Optimizer::new(kind, cfg.learning_rate);
    let mut stopper = EarlyStopper::new(cfg.patience, cfg.min_delta);

    let tasks = data.tasks;
    let mut trajectory: Vec<TrajectoryRow> = Vec::new();
    let mut support_trajectory: Vec<Vec<(u64, BTreeSet<usize>)>> = vec![Vec::new(); tasks];
    let mut s_of_z_snapshots: Vec<Vec<(u64, Tensor)>> = vec![Vec::new(); tasks];

    let probe_rows = data.val_x.shape()[0].min(PER_EXAMPLE_PROBE);

    macro_rules! snapshot {
        ($step:expr, $params:expr, $gamma:expr, $temp:expr) => {{
            let infer = extract_inference(model, $params, $gamma, $temp);
            for t in 0..tasks {
                let weights = match &infer.gates[t] {
                    PlainGate::DselectPerExample(p) => {
                        let mut acc = vec![0.0; model.arch.n_experts];
                        for row in 0..probe_rows {
                            let out = dselect_core::gate::dselect_per_example(p, data.val_x.row(row))?;
                            for (a, w) in acc.iter_mut().zip(&out.weights) {
                                *a += w;
                            }
                        }
                        for a in acc.iter_mut() {
                            *a /= probe_rows as f64;
                        }
                        acc
                    }
                    g => g.weights(&[])?,
                };
                for (e, &w) in weights.iter().enumerate() {
                    trajectory.push(($step, t, e, w));
                }
                let support = match &infer.gates[t] {
                    PlainGate::DselectPerExample(_) => m::support_exact(&weights),
                    g => g.declared_support(&[])?,
                };
                support_trajectory[t].push(($step, support));
                if matches!(model.arch.gate.kind, GateKind::DselectStatic) {
                    let gp = extract_static_dselect(
                        $params,
                        &format!("gate{t}"),
                        model.arch.n_experts,
                        cfg.k,
                        $gamma,
                        cfg.lambda,
                        cfg.xi,
                    );
                    s_of_z_snapshots[t].push(($step, gp.s_of_z()));
                }
            }
        }};
    }

    let (g0, t0) = hyper_at(0);
    snapshot!(0, &params, g0, t0);

    let mut step: u64 = 0;
    let mut train_loss_final = f64::NAN;
    let mut epochs_run = 0usize;
    let mut indices: Vec<usize> = (0..n_train).collect();
    let mut noise_values: BTreeMap<String, Tensor> = BTreeMap::new();

    'training: for _epoch in 0..cfg.epochs {
        epochs_run += 1;
        // Fisher-Yates shuffle from the dedicated stream.
        for i in (1..indices.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            indices.swap(i, j);
        }
        for chunk in indices.chunks_exact(batch) {
            let (gamma_now, temp_now) = hyper_at(step);

            // Assemble the batch.
            let mut xb = Vec::with_capacity(batch * data.input_dim);
            for &row in chunk {
                xb.extend_from_slice(data.train_x.row(row));
            }
            let x = Tensor::new(vec![batch, data.input_dim], xb).expect("batch shape");
            let labels: Vec<Tensor> = (0..tasks)
                .map(|t| Tensor::vector(chunk.iter().map(|&row| data.train_y[t][row]).collect()))
                .collect();
            let bb = BatchBindings::new(x, labels, gamma_now, temp_now);

            // Fresh concrete noise for Gumbel gates.
            for name in &model.noise_leaves {
                let n = model.arch.n_experts;
                let data: Vec<f64> = (0..n)
                    .map(|_| {
                        let u: f64 = noise_rng.random_range(1e-12..1.0 - 1e-12);
                        u.ln() - (1.0 - u).ln()
                    })
                    .collect();
                noise_values.insert(name.clone(), Tensor::vector(data));
            }

            let mut bindings = bb.bindings(model, &params);
            for (name, t) in &noise_values {
                bindings.insert(name, t);
            }

            let trace = model.graph.evaluate(&bindings)?;
            let loss_val = trace.value(model.loss).item();
            if !loss_val.is_finite() {
                return Err(HarnessError::Numeric(format!(
                    "loss became non-finite at step {}",
                    step
                )));
            }
            if cfg!(debug_assertions) {
                model
                    .check_gate_simplex(&trace)
                    .map_err(HarnessError::Internal)?;
            }
            train_loss_final = loss_val;

            let grads = model.graph.gradient_from_trace(model.loss, &trace)?;
            opt.step(&mut params, &grads)
                .map_err(|e| HarnessError::Numeric(e.to_string()))?;
            step += 1;

            if step % cfg.snapshot_cadence as u64 == 0 {
                let (g_now, t_now) = hyper_at(step);
                snapshot!(step, &params, g_now, t_now);
            }
        }

        // Early stopping on the validation predictive loss.
        let (g_now, t_now) = hyper_at(step);
        let infer = extract_inference(model, &params, g_now, t_now);
        let losses = eval_task_losses(&infer, &model.arch.tasks, &data.val_x, &data.val_y)?;
        let weights = model.task_loss_weights();
        let val_loss: f64 = losses.iter().zip(&weights).map(|(l, w)| l * w).sum();
        if !val_loss.is_finite() {
            return Err(HarnessError::Numeric("validation loss became non-finite".into()));
        }
        if stopper.observe(val_loss) {
            break 'training;
        }
    }

    let (final_gamma, final_temperature) = hyper_at(step);
    if step % cfg.snapshot_cadence as u64 != 0 {
        snapshot!(step, &params, final_gamma, final_temperature);
    }

    let mut outcome = TrainOutcome {
        built,
        params,
        metrics: BTreeMap::new(),
        trajectory,
        support_trajectory,
        s_of_z_snapshots,
        lambda_valid: true,
        final_gamma,
        final_temperature,
    };
    assemble_metrics(cfg, data, &mut outcome, train_loss_final, step, epochs_run)?;
    Ok(outcome)
}

fn assemble_metrics(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    out: &mut TrainOutcome,
    train_loss_final: f64,
    steps: u64,
    epochs_run: usize,
) -> Result<(), HarnessError> {
    let model = &out.built.model;
    let tasks = data.tasks;
    let n = model.arch.n_experts;
    let infer = extract_inference(model, &out.params, out.final_gamma, out.final_temperature);
    let mut metrics = BTreeMap::new();

    metrics.insert("seed".into(), cfg.seed as f64);
    metrics.insert("steps".into(), steps as f64);
    metrics.insert("epochs_run".into(), epochs_run as f64);
    metrics.insert("train_loss_final".into(), train_loss_final);
    metrics.insert("final_gamma".into(), out.final_gamma);
    metrics.insert("final_temperature".into(), out.final_temperature);

    // Predictive metrics.
    let val_losses = eval_task_losses(&infer, &model.arch.tasks, &data.val_x, &data.val_y)?;
    let weights = model.task_loss_weights();
    let val_loss: f64 = val_losses.iter().zip(&weights).map(|(l, w)| l * w).sum();
    metrics.insert("val_loss".into(), val_loss);
    for (t, l) in val_losses.iter().enumerate() {
        metrics.insert(format!("val_loss.task{t}"), *l);
    }
    if let Some(test_x) = &data.test_x {
        let test_losses = eval_task_losses(&infer, &model.arch.tasks, test_x, &data.test_y)?;
        let mean = test_losses.iter().sum::<f64>() / test_losses.len() as f64;
        metrics.insert("test_mse_mean".into(), mean);
        for (t, l) in test_losses.iter().enumerate() {
            metrics.insert(format!("test_mse.task{t}"), *l);
        }
    }
    if matches!(cfg.experiment, ExperimentKind::Recovery) {
        let preds = infer.predict_task(&data.val_x, 0)?;
        let probs: Vec<f64> = preds.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect();
        metrics.insert("val_accuracy".into(), m::accuracy(&probs, &data.val_y[0]));
        let balance = data.train_y[0].iter().sum::<f64>() / data.train_y[0].len() as f64;
        metrics.insert("label_balance_train".into(), balance);
    }

    // Selection metrics from the final state.
    let per_example = matches!(model.arch.gate.kind, GateKind::DselectPerExample { .. });
    let mut supports: Vec<BTreeSet<usize>> = Vec::with_capacity(tasks);
    let mut phantom_max: f64 = 0.0;
    if per_example {
        let mut support_sizes_total = 0usize;
        let mut max_support = 0usize;
        let mut phantom_acc = 0.0;
        let rows = data.val_x.shape()[0];
        for t in 0..tasks {
            if let PlainGate::DselectPerExample(p) = &infer.gates[t] {
                let mut union: BTreeSet<usize> = BTreeSet::new();
                for row in 0..rows {
                    let o = dselect_core::gate::dselect_per_example(p, data.val_x.row(row))?;
                    let s = o.support();
                    support_sizes_total += s.len();
                    max_support = max_support.max(s.len());
                    phantom_acc += o.phantom_mass;
                    union.extend(s);
                }
                supports.push(union);
            }
        }
        let avg = support_sizes_total as f64 / (rows * tasks) as f64;
        metrics.insert("avg_selected_experts".into(), avg);
        metrics.insert("max_per_example_support".into(), max_support as f64);
        phantom_max = phantom_acc / (rows * tasks) as f64;
    } else {
        for t in 0..tasks {
            supports.push(infer.gates[t].declared_support(&[])?);
            if let PlainGate::DselectStatic(p) = &infer.gates[t] {
                phantom_max = phantom_max.max(dselect_core::gate::dselect_static(p).phantom_mass);
            }
        }
        let avg = supports.iter().map(|s| s.len()).sum::<usize>() as f64 / tasks as f64;
        metrics.insert("avg_selected_experts".into(), avg);
    }
    metrics.insert("phantom_mass".into(), phantom_max);

    if tasks >= 2 {
        let (related, unrelated) = m::group_jaccard(&supports, &data.group_of_task);
        metrics.insert("related_jaccard".into(), related);
        if let Some(u) = unrelated {
            metrics.insert("unrelated_jaccard".into(), u);
        }
        metrics.insert(
            "random_gate_expected_jaccard".into(),
            m::random_gate_expected_jaccard_analytic(n, cfg.k),
        );
    }

    // Support oscillation counts over the snapshot trajectory.
    let mut total_changes = 0usize;
    for t in 0..tasks {
        let snaps = &out.support_trajectory[t];
        let changes =
            snaps.windows(2).filter(|w| w[0].1 != w[1].1).count();
        total_changes += changes;
    }
    metrics.insert("support_oscillations".into(), total_changes as f64);
    metrics.insert("support_oscillations_mean".into(), total_changes as f64 / tasks as f64);

    // Binary convergence of S(Z) for the static DSelect gate.
    let mut lambda_valid = true;
    match model.arch.gate.kind {
        GateKind::DselectStatic => {
            let mut all_binary_at_end = true;
            let mut per_task_steps = Vec::with_capacity(tasks);
            for t in 0..tasks {
                let step = m::binary_convergence_step(&out.s_of_z_snapshots[t]);
                if let Some(s) = step {
                    metrics.insert(format!("binary_convergence_step.task{t}"), s as f64);
                }
                per_task_steps.push(step);
                let last_binary = out.s_of_z_snapshots[t]
                    .last()
                    .map(|(_, s)| m::is_binary_matrix(s))
                    .unwrap_or(false);
                all_binary_at_end &= last_binary;
            }
            if per_task_steps.iter().all(|s| s.is_some()) {
                let overall = per_task_steps.iter().map(|s| s.unwrap()).max().unwrap();
                metrics.insert("binary_convergence_step".into(), overall as f64);
            }
            metrics.insert("s_of_z_binary".into(), if all_binary_at_end { 1.0 } else { 0.0 });
            lambda_valid = all_binary_at_end;
        }
        GateKind::DselectPerExample { .. } => {
            let avg = metrics["avg_selected_experts"];
            lambda_valid = avg <= cfg.k as f64 + 1e-12;
        }
        GateKind::Gumbel => {
            if let PlainGate::Gumbel(p) = &infer.gates[0] {
                let expected = p.expected_selected();
                metrics.insert("expected_selected_experts".into(), expected);
                lambda_valid = expected <= cfg.k as f64 + 1e-12;
            }
        }
        _ => {}
    }
    metrics.insert("lambda_valid".into(), if lambda_valid { 1.0 } else { 0.0 });
    out.lambda_valid = lambda_valid;

    // Recovery bookkeeping.
    if let Some(true_positions) = &out.built.true_positions {
        let truth: BTreeSet<usize> = true_positions.iter().copied().collect();
        let recovered = supports[0].intersection(&truth).count();
        metrics.insert("recovered_true_experts".into(), recovered as f64);
        metrics.insert("final_support_size".into(), supports[0].len() as f64);
    }

    out.metrics = metrics;
    Ok(())
}

/// Convenience: prepare data and train in one call.
pub fn run_training(cfg: &ExperimentConfig) -> Result<TrainOutcome, HarnessError> {
    let data = prepare_data(cfg)?;
    train(cfg, &data)
}

//! Experts, towers and gates assembled into trainable models: the multi-gate
//! multi-task MoE, the frozen-expert recovery model, and the shared-bottom
//! baseline.
//!
//! A built model owns an [`ExprGraph`] whose leaves follow a fixed naming
//! scheme: `expert{e}.l{i}.{w,b}`, `gate{t}.*`, `task{t}.head.{w,b}` for
//! trainable state, `data.x` / `data.y{t}` for the batch, and `hp.gamma` /
//! `hp.inv_temp` for schedule-owned scalars. Trainable leaves live in a
//! [`ParamStore`]; frozen leaves (expert copies, batch data) are bound from a
//! constants map, so an optimizer can never touch them.
//!
//! The same architecture can also be evaluated without the graph through
//! [`InferenceModel`], which skips experts whose gate weight is exactly zero.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::baseline::{
    ablation_gate, build_ablation_gate, build_gumbel_gate, build_softmax_gate, build_topk_gate,
    gumbel_gate_forward, softmax_gate, topk_gate, topk_selection, AblationGateParams,
    GumbelGateParams, LinearGateParams,
};
use crate::gate::{
    build_per_example_dselect, ceil_log2, dselect_per_example,
    dselect_static, GateError, PerExampleDSelectParams, StaticDSelectParams,
};
use crate::graph::{Bindings, EvalTrace, ExprGraph, GraphError, NodeId, ParamStore};
use crate::tensor::Tensor;

pub const X_LEAF: &str = "data.x";
pub const GAMMA_LEAF: &str = "hp.gamma";
pub const INV_TEMP_LEAF: &str = "hp.inv_temp";

pub fn label_leaf(task: usize) -> String {
    format!("data.y{}", task)
}

/// How an expert's final hidden layer becomes its output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertHead {
    /// Sum the last hidden layer into a scalar output.
    SumUnits,
    /// Expose the last hidden layer as a vector output.
    Identity,
}

/// A dense ReLU expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSpec {
    /// Hidden layer widths; at least one layer.
    pub hidden: Vec<usize>,
    pub head: ExpertHead,
    pub trainable: bool,
}

impl ExpertSpec {
    pub fn output_dim(&self) -> usize {
        match self.head {
            ExpertHead::SumUnits => 1,
            ExpertHead::Identity => *self.hidden.last().expect("at least one layer"),
        }
    }
}

/// Per-task output network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TowerSpec {
    /// Pass the (scalar) combined expert output through unchanged.
    Identity,
    /// Single linear unit.
    LinearUnit,
    /// Single logistic unit (the tower emits the logit; losses and
    /// predictions apply the sigmoid).
    LogisticUnit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskLossKind {
    SquaredError,
    BinaryCrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub loss: TaskLossKind,
    pub tower: TowerSpec,
    pub tower_trainable: bool,
}

impl TaskSpec {
    pub fn regression(name: impl Into<String>) -> Self {
        TaskSpec {
            name: name.into(),
            loss: TaskLossKind::SquaredError,
            tower: TowerSpec::Identity,
            tower_trainable: true,
        }
    }

    pub fn binary_classification(name: impl Into<String>) -> Self {
        TaskSpec {
            name: name.into(),
            loss: TaskLossKind::BinaryCrossEntropy,
            tower: TowerSpec::LogisticUnit,
            tower_trainable: true,
        }
    }
}

/// Which gate each task uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateKind {
    DselectStatic,
    DselectPerExample { bias: bool },
    Softmax { per_example: bool },
    TopK { per_example: bool },
    Gumbel,
    AblationAnneal,
    AblationEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    pub kind: GateKind,
    pub k: usize,
    /// Entropy (or Gumbel sparsity) regularization weight.
    pub lambda: f64,
    /// Phantom penalty weight for non-power-of-two n.
    pub xi: f64,
    /// Smooth-step width (initial value when annealed).
    pub gamma: f64,
    /// Softmax/concrete temperature for the Gumbel and ablation gates
    /// (initial value when annealed).
    pub temperature: f64,
}

impl GateConfig {
    pub fn dselect_static(k: usize, lambda: f64, gamma: f64) -> Self {
        GateConfig { kind: GateKind::DselectStatic, k, lambda, xi: 0.0, gamma, temperature: 1.0 }
    }

    pub fn topk_static(k: usize) -> Self {
        GateConfig {
            kind: GateKind::TopK { per_example: false },
            k,
            lambda: 0.0,
            xi: 0.0,
            gamma: 1.0,
            temperature: 1.0,
        }
    }
}

/// Complete architecture of a multi-gate MoE.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeArchitecture {
    pub n_experts: usize,
    pub input_dim: usize,
    pub expert: ExpertSpec,
    pub tasks: Vec<TaskSpec>,
    pub gate: GateConfig,
    /// Weight of task 1 for two-task models; more tasks are uniform.
    pub task_weight: f64,
}

/// Per-gate node handles inside a built model.
pub struct GateNodes {
    /// `[n]` for static gates, `[batch, n]` for per-example gates.
    pub weights: NodeId,
    /// Entropy regularizer before scaling by lambda.
    pub omega: Option<NodeId>,
    /// Phantom mass (batch mean for per-example gates).
    pub phantom_mass: Option<NodeId>,
    /// Phantom penalty, already scaled by xi.
    pub phantom_penalty: Option<NodeId>,
    /// Gumbel sparsity penalty, already scaled by lambda.
    pub sparsity_penalty: Option<NodeId>,
    /// `S(Z)` for DSelect gates.
    pub s_of_z: Option<NodeId>,
}

/// A trainable model: graph plus initial parameter values and constants.
pub struct MoeModel {
    pub arch: MoeArchitecture,
    pub graph: ExprGraph,
    pub batch_size: usize,
    /// Total training objective (task-weighted losses plus regularizers).
    pub loss: NodeId,
    pub task_losses: Vec<NodeId>,
    /// Raw per-task outputs (logits for classification tasks), `[batch]`.
    pub task_preds: Vec<NodeId>,
    pub gates: Vec<GateNodes>,
    pub params: ParamStore,
    pub constants: BTreeMap<String, Tensor>,
    pub uses_gamma: bool,
    pub uses_inv_temp: bool,
    /// Frozen noise leaves to rebind each training step (Gumbel gates).
    pub noise_leaves: Vec<String>,
}

impl MoeModel {
    /// Per-task weights in the training objective.
    pub fn task_loss_weights(&self) -> Vec<f64> {
        task_loss_weights(self.arch.tasks.len(), self.arch.task_weight)
    }

    /// Checks the simplex invariant of every gate output in a trace:
    /// non-negative weights whose total (plus phantom mass) is 1.
    pub fn check_gate_simplex(&self, trace: &EvalTrace) -> Result<(), String> {
        // The Gumbel gate scales experts by independent on/off switches and
        // does not promise a simplex output.
        if matches!(self.arch.gate.kind, GateKind::Gumbel) {
            return Ok(());
        }
        for (t, gate) in self.gates.iter().enumerate() {
            let w = trace.value(gate.weights);
            let phantom = gate.phantom_mass.map(|n| trace.value(n).item()).unwrap_or(0.0);
            let rows = if w.rank() == 2 { w.shape()[0] } else { 1 };
            let cols = w.cols();
            for r in 0..rows {
                let row = &w.data()[r * cols..(r + 1) * cols];
                if row.iter().any(|&v| v < -1e-9) {
                    return Err(format!("task {} gate has a negative weight", t));
                }
                let sum: f64 = row.iter().sum();
                // Per-example phantom mass is only tracked as a batch mean,
                // so individual rows get the loose bound.
                let target_err = if w.rank() == 2 && gate.phantom_mass.is_some() {
                    (sum - 1.0) > 1e-9
                } else {
                    (sum + phantom - 1.0).abs() > 1e-9
                };
                if target_err {
                    return Err(format!("task {} gate row {} sums to {}", t, r, sum));
                }
            }
        }
        Ok(())
    }
}

pub fn task_loss_weights(tasks: usize, task_weight: f64) -> Vec<f64> {
    match tasks {
        0 => vec![],
        1 => vec![1.0],
        2 => vec![task_weight, 1.0 - task_weight],
        t => vec![1.0 / t as f64; t],
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect())
        .expect("shape")
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

/// Builds the graph and initial state for a multi-gate MoE over a fixed
/// batch size.
pub fn build_moe(
    arch: &MoeArchitecture,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MoeModel, GraphError> {
    if arch.tasks.is_empty() || arch.n_experts < 2 || arch.expert.hidden.is_empty() {
        return Err(GraphError::InvalidOp {
            detail: "model needs at least one task, one expert layer and two experts".into(),
        });
    }
    let n = arch.n_experts;
    let p = arch.input_dim;
    let mut g = ExprGraph::new();
    let mut params = ParamStore::new();
    let mut constants: BTreeMap<String, Tensor> = BTreeMap::new();

    let x = g.leaf(X_LEAF, &[batch_size, p], false)?;

    // Hyper leaves are created lazily so only the gates that need them
    // appear in the binding contract.
    let mut gamma_node: Option<NodeId> = None;
    let mut inv_temp_node: Option<NodeId> = None;

    // Experts, shared across tasks.
    let mut expert_vec_outputs: Vec<NodeId> = Vec::with_capacity(n); // [B, u] each
    let mut scalar_cols: Vec<NodeId> = Vec::with_capacity(n); // [B, 1] each
    for e in 0..n {
        let mut h = x;
        let mut in_dim = p;
        for (li, &width) in arch.expert.hidden.iter().enumerate() {
            let wname = format!("expert{e}.l{li}.w");
            let bname = format!("expert{e}.l{li}.b");
            let w = g.leaf(&wname, &[in_dim, width], arch.expert.trainable)?;
            let b = g.leaf(&bname, &[width], arch.expert.trainable)?;
            let init_w = glorot(rng, in_dim, width);
            let init_b = Tensor::zeros(&[width]);
            if arch.expert.trainable {
                params.insert(wname, init_w);
                params.insert(bname, init_b);
            } else {
                constants.insert(wname, init_w);
                constants.insert(bname, init_b);
            }
            let lin = g.matmul(h, w)?;
            let aff = g.add(lin, b)?;
            h = g.relu(aff)?;
            in_dim = width;
        }
        match arch.expert.head {
            ExpertHead::SumUnits => {
                let s = g.sum_last_axis(h)?; // [B]
                scalar_cols.push(g.reshape(s, &[batch_size, 1])?);
            }
            ExpertHead::Identity => expert_vec_outputs.push(h),
        }
    }
    let expert_matrix = if arch.expert.head == ExpertHead::SumUnits {
        Some(g.concat(&scalar_cols, 1)?) // [B, n]
    } else {
        None
    };

    let mut gates = Vec::with_capacity(arch.tasks.len());
    let mut task_preds = Vec::with_capacity(arch.tasks.len());
    let mut task_losses = Vec::with_capacity(arch.tasks.len());
    let mut noise_leaves = Vec::new();
    let mut reg_terms: Vec<NodeId> = Vec::new();

    for (t, task) in arch.tasks.iter().enumerate() {
        let prefix = format!("gate{t}");
        let cfg = arch.gate;
        let gate_nodes = match cfg.kind {
            GateKind::DselectStatic => {
                let gamma = *gamma_node.get_or_insert(g.leaf(GAMMA_LEAF, &[], false)?);
                let nodes = crate::gate::build_static_dselect(&mut g, &prefix, n, cfg.k, gamma, cfg.xi)?;
                let m = ceil_log2(n);
                params.insert(format!("{prefix}.alpha"), Tensor::vector(vec![0.0; cfg.k]));
                params.insert(
                    format!("{prefix}.z"),
                    crate::gate::init_z(cfg.k, m, cfg.gamma, rng)
                        .map_err(|e| GraphError::InvalidOp { detail: e.to_string() })?,
                );
                GateNodes {
                    weights: nodes.weights,
                    omega: Some(nodes.omega),
                    phantom_mass: Some(nodes.phantom_mass),
                    phantom_penalty: Some(nodes.phantom_penalty),
                    sparsity_penalty: None,
                    s_of_z: Some(nodes.s_of_z),
                }
            }
            GateKind::DselectPerExample { bias } => {
                let gamma = *gamma_node.get_or_insert(g.leaf(GAMMA_LEAF, &[], false)?);
                let nodes =
                    build_per_example_dselect(&mut g, &prefix, x, n, cfg.k, bias, gamma, cfg.xi)?;
                let m = ceil_log2(n);
                params.insert(format!("{prefix}.g"), glorot(rng, cfg.k, p));
                let scale = 1.0 / (p as f64).sqrt();
                for i in 0..cfg.k {
                    let q = cfg.gamma / 4.0 * scale;
                    let w = Tensor::new(
                        vec![m, p],
                        (0..m * p).map(|_| rng.random_range(-q..q)).collect(),
                    )
                    .expect("shape");
                    params.insert(format!("{prefix}.w{i}"), w);
                    if bias {
                        params.insert(format!("{prefix}.w{i}_bias"), Tensor::zeros(&[m]));
                    }
                }
                if bias {
                    params.insert(format!("{prefix}.g_bias"), Tensor::zeros(&[cfg.k]));
                }
                GateNodes {
                    weights: nodes.weights,
                    omega: Some(nodes.omega_mean),
                    phantom_mass: Some(nodes.phantom_mass_mean),
                    phantom_penalty: Some(nodes.phantom_penalty),
                    sparsity_penalty: None,
                    s_of_z: None,
                }
            }
            GateKind::Softmax { per_example } | GateKind::TopK { per_example } => {
                let xin = if per_example { Some(x) } else { None };
                let nodes = match cfg.kind {
                    GateKind::Softmax { .. } => build_softmax_gate(&mut g, &prefix, n, xin)?,
                    _ => build_topk_gate(&mut g, &prefix, n, cfg.k, xin)?,
                };
                params.insert(
                    format!("{prefix}.b"),
                    Tensor::vector((0..n).map(|_| rng.random_range(-1e-3..1e-3)).collect()),
                );
                if per_example {
                    params.insert(format!("{prefix}.a"), glorot(rng, n, p));
                }
                GateNodes {
                    weights: nodes.weights,
                    omega: None,
                    phantom_mass: None,
                    phantom_penalty: None,
                    sparsity_penalty: None,
                    s_of_z: None,
                }
            }
            GateKind::Gumbel => {
                let inv_temp = *inv_temp_node.get_or_insert(g.leaf(INV_TEMP_LEAF, &[], false)?);
                let nodes = build_gumbel_gate(&mut g, &prefix, n, inv_temp, cfg.lambda)?;
                params.insert(format!("{prefix}.alpha"), Tensor::vector(vec![0.0; n]));
                params.insert(format!("{prefix}.psi"), Tensor::vector(vec![0.0; n]));
                let noise_name = format!("{prefix}.noise");
                constants.insert(noise_name.clone(), Tensor::zeros(&[n]));
                noise_leaves.push(noise_name);
                GateNodes {
                    weights: nodes.weights,
                    omega: None,
                    phantom_mass: None,
                    phantom_penalty: None,
                    sparsity_penalty: Some(nodes.penalty),
                    s_of_z: None,
                }
            }
            GateKind::AblationAnneal | GateKind::AblationEntropy => {
                let inv_temp = *inv_temp_node.get_or_insert(g.leaf(INV_TEMP_LEAF, &[], false)?);
                let nodes = build_ablation_gate(&mut g, &prefix, n, cfg.k, inv_temp)?;
                params.insert(format!("{prefix}.alpha"), Tensor::vector(vec![0.0; cfg.k]));
                for i in 0..cfg.k {
                    params.insert(
                        format!("{prefix}.beta{i}"),
                        Tensor::vector((0..n).map(|_| rng.random_range(-0.01..0.01)).collect()),
                    );
                }
                let omega =
                    if matches!(cfg.kind, GateKind::AblationEntropy) { Some(nodes.omega) } else { None };
                GateNodes {
                    weights: nodes.weights,
                    omega,
                    phantom_mass: None,
                    phantom_penalty: None,
                    sparsity_penalty: None,
                    s_of_z: None,
                }
            }
        };

        // Combine experts under the task's gate weights.
        let w = gate_nodes.weights;
        let per_example = g.shape(w).len() == 2;
        let combined: NodeId = match arch.expert.head {
            ExpertHead::SumUnits => {
                let e = expert_matrix.expect("built for scalar experts");
                if per_example {
                    let prod = g.mul(e, w)?;
                    g.sum_last_axis(prod)? // [B]
                } else {
                    g.matmul(e, w)? // [B]
                }
            }
            ExpertHead::Identity => {
                let mut terms = Vec::with_capacity(n);
                for (e_idx, &f) in expert_vec_outputs.iter().enumerate() {
                    let we = if per_example {
                        g.slice(w, 1, e_idx, e_idx + 1)? // [B, 1]
                    } else {
                        g.slice(w, 0, e_idx, e_idx + 1)? // [1]
                    };
                    terms.push(g.mul(f, we)?);
                }
                g.add_n(&terms)? // [B, u]
            }
        };

        // Tower.
        let pred = match task.tower {
            TowerSpec::Identity => {
                if g.shape(combined).len() != 1 {
                    return Err(GraphError::InvalidOp {
                        detail: format!(
                            "task {} uses an identity tower but experts output vectors",
                            t
                        ),
                    });
                }
                combined
            }
            TowerSpec::LinearUnit | TowerSpec::LogisticUnit => {
                let u = arch.expert.output_dim();
                let core = if g.shape(combined).len() == 1 {
                    g.reshape(combined, &[batch_size, 1])?
                } else {
                    combined
                };
                let wname = format!("task{t}.head.w");
                let bname = format!("task{t}.head.b");
                let hw = g.leaf(&wname, &[u, 1], task.tower_trainable)?;
                let hb = g.leaf(&bname, &[1], task.tower_trainable)?;
                let init_w = glorot(rng, u, 1);
                let init_b = Tensor::vector(vec![0.0]);
                if task.tower_trainable {
                    params.insert(wname, init_w);
                    params.insert(bname, init_b);
                } else {
                    constants.insert(wname, init_w);
                    constants.insert(bname, init_b);
                }
                let lin = g.matmul(core, hw)?; // [B, 1]
                let flat = g.reshape(lin, &[batch_size])?;
                g.add(flat, hb)?
            }
        };
        task_preds.push(pred);

        let y = g.leaf(&label_leaf(t), &[batch_size], false)?;
        let loss = match task.loss {
            TaskLossKind::SquaredError => g.mse(pred, y)?,
            TaskLossKind::BinaryCrossEntropy => g.bce_with_logits(pred, y)?,
        };
        task_losses.push(loss);

        if let Some(omega) = gate_nodes.omega {
            if cfg.lambda > 0.0 {
                reg_terms.push(g.scalar_mul(omega, cfg.lambda)?);
            }
        }
        if let Some(pen) = gate_nodes.phantom_penalty {
            if cfg.xi > 0.0 {
                reg_terms.push(pen);
            }
        }
        if let Some(pen) = gate_nodes.sparsity_penalty {
            if cfg.lambda != 0.0 {
                reg_terms.push(pen);
            }
        }
        gates.push(gate_nodes);
    }

    // Task-weighted empirical loss plus regularizers.
    let weights = task_loss_weights(arch.tasks.len(), arch.task_weight);
    let mut total: Option<NodeId> = None;
    for (loss, w) in task_losses.iter().zip(&weights) {
        let term = if (*w - 1.0).abs() < f64::EPSILON { *loss } else { g.scalar_mul(*loss, *w)? };
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let mut loss = total.expect("at least one task");
    for term in reg_terms {
        loss = g.add(loss, term)?;
    }

    Ok(MoeModel {
        arch: arch.clone(),
        graph: g,
        batch_size,
        loss,
        task_losses,
        task_preds,
        gates,
        params,
        constants,
        uses_gamma: gamma_node.is_some(),
        uses_inv_temp: inv_temp_node.is_some(),
        noise_leaves,
    })
}

/// The frozen-expert recovery model: a pool of frozen experts, four of which
/// are bitwise copies of the data-generating experts, under one trainable
/// gate and the generator's own (frozen) logistic head.
pub struct RecoveryModel {
    pub model: MoeModel,
    /// Positions of the generator's experts inside the pool, in generator
    /// order.
    pub true_expert_positions: Vec<usize>,
}

pub fn build_recovery_model(
    generator: &crate::synth::RecoveryGenerator,
    n_experts: usize,
    gate: GateConfig,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RecoveryModel, GraphError> {
    let true_count = generator.experts.len();
    let units = generator.experts[0].w.shape()[1];
    let p = generator.experts[0].w.shape()[0];
    assert!(n_experts >= true_count);

    let arch = MoeArchitecture {
        n_experts,
        input_dim: p,
        expert: ExpertSpec { hidden: vec![units], head: ExpertHead::Identity, trainable: false },
        tasks: vec![TaskSpec {
            name: "label".into(),
            loss: TaskLossKind::BinaryCrossEntropy,
            tower: TowerSpec::LogisticUnit,
            // The experts are frozen; the logistic unit trains alongside the
            // gate so the model can scale up its confidence.
            tower_trainable: true,
        }],
        gate,
        task_weight: 1.0,
    };
    let mut model = build_moe(&arch, batch_size, rng)?;

    // Scatter the true experts across the pool at seeded positions.
    let mut positions: Vec<usize> = (0..n_experts).collect();
    for i in 0..true_count {
        let j = rng.random_range(i..n_experts);
        positions.swap(i, j);
    }
    let true_positions = positions[..true_count].to_vec();

    for e in 0..n_experts {
        let w = match true_positions.iter().position(|&pos| pos == e) {
            Some(slot) => generator.experts[slot].w.clone(),
            None => normal_matrix(rng, p, units),
        };
        model.constants.insert(format!("expert{e}.l0.w"), w);
        model.constants.insert(format!("expert{e}.l0.b"), Tensor::zeros(&[units]));
    }

    Ok(RecoveryModel { model, true_expert_positions: true_positions })
}

// --- shared bottom ------------------------------------------------------------

/// Shared-bottom baseline: one trunk shared by all tasks, per-task towers.
pub struct SharedBottomModel {
    pub graph: ExprGraph,
    pub batch_size: usize,
    pub loss: NodeId,
    pub task_losses: Vec<NodeId>,
    pub task_preds: Vec<NodeId>,
    pub bottom_out: NodeId,
    pub params: ParamStore,
}

pub fn build_shared_bottom(
    input_dim: usize,
    bottom_hidden: &[usize],
    tasks: &[TaskSpec],
    task_weight: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SharedBottomModel, GraphError> {
    if bottom_hidden.is_empty() || tasks.is_empty() {
        return Err(GraphError::InvalidOp { detail: "shared bottom needs layers and tasks".into() });
    }
    let mut g = ExprGraph::new();
    let mut params = ParamStore::new();
    let x = g.leaf(X_LEAF, &[batch_size, input_dim], false)?;

    let mut h = x;
    let mut in_dim = input_dim;
    for (li, &width) in bottom_hidden.iter().enumerate() {
        let wname = format!("bottom.l{li}.w");
        let bname = format!("bottom.l{li}.b");
        let w = g.leaf(&wname, &[in_dim, width], true)?;
        let b = g.leaf(&bname, &[width], true)?;
        params.insert(wname, glorot(rng, in_dim, width));
        params.insert(bname, Tensor::zeros(&[width]));
        let lin = g.matmul(h, w)?;
        let aff = g.add(lin, b)?;
        h = g.relu(aff)?;
        in_dim = width;
    }
    let u = in_dim;

    let mut task_preds = Vec::new();
    let mut task_losses = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let wname = format!("task{t}.head.w");
        let bname = format!("task{t}.head.b");
        let hw = g.leaf(&wname, &[u, 1], true)?;
        let hb = g.leaf(&bname, &[1], true)?;
        params.insert(wname, glorot(rng, u, 1));
        params.insert(bname, Tensor::vector(vec![0.0]));
        let lin = g.matmul(h, hw)?;
        let flat = g.reshape(lin, &[batch_size])?;
        let pred = g.add(flat, hb)?;
        task_preds.push(pred);
        let y = g.leaf(&label_leaf(t), &[batch_size], false)?;
        let loss = match task.loss {
            TaskLossKind::SquaredError => g.mse(pred, y)?,
            TaskLossKind::BinaryCrossEntropy => g.bce_with_logits(pred, y)?,
        };
        task_losses.push(loss);
    }

    let weights = task_loss_weights(tasks.len(), task_weight);
    let mut total: Option<NodeId> = None;
    for (loss, w) in task_losses.iter().zip(&weights) {
        let term = if (*w - 1.0).abs() < f64::EPSILON { *loss } else { g.scalar_mul(*loss, *w)? };
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }

    Ok(SharedBottomModel {
        graph: g,
        batch_size,
        loss: total.expect("tasks"),
        task_losses,
        task_preds,
        bottom_out: h,
        params,
    })
}

// --- plain inference -------------------------------------------------------------

/// A gate in plain (graph-free) form, used for inference and snapshots.
#[derive(Debug, Clone)]
pub enum PlainGate {
    DselectStatic(StaticDSelectParams),
    DselectPerExample(PerExampleDSelectParams),
    Softmax(LinearGateParams),
    TopK(LinearGateParams),
    Gumbel(GumbelGateParams),
    Ablation(AblationGateParams),
}

impl PlainGate {
    /// Gate weights for one input (evaluation semantics: the Gumbel gate
    /// thresholds its switches deterministically).
    pub fn weights(&self, x: &[f64]) -> Result<Vec<f64>, GateError> {
        match self {
            PlainGate::DselectStatic(p) => Ok(dselect_static(p).weights),
            PlainGate::DselectPerExample(p) => Ok(dselect_per_example(p, x)?.weights),
            PlainGate::Softmax(p) => softmax_gate(p, x),
            PlainGate::TopK(p) => topk_gate(p, x),
            PlainGate::Gumbel(p) => {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
                use rand::SeedableRng;
                let _ = &mut rng;
                Ok(gumbel_gate_forward(p, &mut rng, false))
            }
            PlainGate::Ablation(p) => Ok(ablation_gate(p)),
        }
    }

    /// The gate's declared selection: kept indices for Top-k, strictly
    /// positive weights otherwise.
    pub fn declared_support(&self, x: &[f64]) -> Result<BTreeSet<usize>, GateError> {
        match self {
            PlainGate::TopK(p) => Ok(topk_selection(p, x)?.into_iter().collect()),
            other => Ok(crate::metrics::support_exact(&other.weights(x)?)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlainExpert {
    /// Dense layers: kernel and bias.
    pub layers: Vec<(Tensor, Vec<f64>)>,
    pub head: ExpertHead,
}

impl PlainExpert {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (w, b) in &self.layers {
            let (in_dim, out_dim) = (w.shape()[0], w.shape()[1]);
            debug_assert_eq!(h.len(), in_dim);
            let mut next = b.clone();
            for (j, &hv) in h.iter().enumerate() {
                if hv == 0.0 {
                    continue;
                }
                for (nv, &wv) in next.iter_mut().zip(w.row(j)) {
                    *nv += hv * wv;
                }
            }
            for v in next.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            h = next;
            debug_assert_eq!(h.len(), out_dim);
        }
        match self.head {
            ExpertHead::SumUnits => vec![h.iter().sum()],
            ExpertHead::Identity => h,
        }
    }
}

#[derive(Debug, Clone)]
pub enum PlainTower {
    Identity,
    /// Single unit; `logistic` marks classification heads whose raw output
    /// is a logit.
    Linear { w: Vec<f64>, b: f64, logistic: bool },
}

impl PlainTower {
    pub fn forward(&self, combined: &[f64]) -> f64 {
        match self {
            PlainTower::Identity => combined[0],
            PlainTower::Linear { w, b, .. } => {
                combined.iter().zip(w).map(|(&c, &wv)| c * wv).sum::<f64>() + b
            }
        }
    }
}

/// Graph-free model view for conditional inference: experts with exactly-zero
/// gate weight are never evaluated.
pub struct InferenceModel {
    pub n_experts: usize,
    pub experts: Vec<PlainExpert>,
    pub towers: Vec<PlainTower>,
    pub gates: Vec<PlainGate>,
}

impl InferenceModel {
    /// Raw prediction (logit for classification) plus the number of experts
    /// actually evaluated.
    pub fn forward_task(&self, x: &[f64], task: usize) -> Result<(f64, usize), GateError> {
        let weights = self.gates[task].weights(x)?;
        let mut combined: Option<Vec<f64>> = None;
        let mut evaluated = 0;
        for (e, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            evaluated += 1;
            let out = self.experts[e].forward(x);
            match &mut combined {
                None => combined = Some(out.iter().map(|v| v * w).collect()),
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(out) {
                        *a += w * v;
                    }
                }
            }
        }
        let u = match self.towers[task] {
            PlainTower::Identity => 1,
            PlainTower::Linear { ref w, .. } => w.len(),
        };
        let combined = combined.unwrap_or_else(|| vec![0.0; u]);
        Ok((self.towers[task].forward(&combined), evaluated))
    }

    /// Raw predictions over the rows of a matrix.
    pub fn predict_task(&self, x: &Tensor, task: usize) -> Result<Vec<f64>, GateError> {
        (0..x.shape()[0]).map(|i| self.forward_task(x.row(i), task).map(|(p, _)| p)).collect()
    }
}

fn fetch<'a>(
    params: &'a ParamStore,
    constants: &'a BTreeMap<String, Tensor>,
    name: &str,
) -> &'a Tensor {
    params
        .get(name)
        .or_else(|| constants.get(name))
        .unwrap_or_else(|| panic!("missing parameter '{}'", name))
}

/// Extracts the static DSelect-k gate parameters of one task from a model's
/// parameter store (used for inference and trajectory snapshots).
pub fn extract_static_dselect(
    params: &ParamStore,
    prefix: &str,
    n: usize,
    k: usize,
    gamma: f64,
    lambda: f64,
    xi: f64,
) -> StaticDSelectParams {
    let alpha = params
        .get(&format!("{prefix}.alpha"))
        .expect("gate alpha")
        .data()
        .to_vec();
    let z = params.get(&format!("{prefix}.z")).expect("gate z").clone();
    StaticDSelectParams::new(n, k, gamma, lambda, xi, alpha, z).expect("valid gate state")
}

/// Builds the plain inference view of a trained model. `gamma` and
/// `temperature` are the current (possibly annealed) hyper values.
pub fn extract_inference(
    model: &MoeModel,
    params: &ParamStore,
    gamma: f64,
    temperature: f64,
) -> InferenceModel {
    let arch = &model.arch;
    let n = arch.n_experts;
    let p = arch.input_dim;
    let experts = (0..n)
        .map(|e| {
            let layers = arch
                .expert
                .hidden
                .iter()
                .enumerate()
                .map(|(li, _)| {
                    let w = fetch(params, &model.constants, &format!("expert{e}.l{li}.w")).clone();
                    let b = fetch(params, &model.constants, &format!("expert{e}.l{li}.b"))
                        .data()
                        .to_vec();
                    (w, b)
                })
                .collect();
            PlainExpert { layers, head: arch.expert.head }
        })
        .collect();

    let towers = arch
        .tasks
        .iter()
        .enumerate()
        .map(|(t, task)| match task.tower {
            TowerSpec::Identity => PlainTower::Identity,
            TowerSpec::LinearUnit | TowerSpec::LogisticUnit => PlainTower::Linear {
                w: fetch(params, &model.constants, &format!("task{t}.head.w")).data().to_vec(),
                b: fetch(params, &model.constants, &format!("task{t}.head.b")).data()[0],
                logistic: task.tower == TowerSpec::LogisticUnit,
            },
        })
        .collect();

    let cfg = arch.gate;
    let gates = (0..arch.tasks.len())
        .map(|t| {
            let prefix = format!("gate{t}");
            match cfg.kind {
                GateKind::DselectStatic => PlainGate::DselectStatic(extract_static_dselect(
                    params, &prefix, n, cfg.k, gamma, cfg.lambda, cfg.xi,
                )),
                GateKind::DselectPerExample { bias } => {
                    let gmat = fetch(params, &model.constants, &format!("{prefix}.g")).clone();
                    let w = (0..cfg.k)
                        .map(|i| fetch(params, &model.constants, &format!("{prefix}.w{i}")).clone())
                        .collect();
                    let g_bias = bias.then(|| {
                        fetch(params, &model.constants, &format!("{prefix}.g_bias")).data().to_vec()
                    });
                    let w_bias = bias.then(|| {
                        (0..cfg.k)
                            .map(|i| {
                                fetch(params, &model.constants, &format!("{prefix}.w{i}_bias"))
                                    .data()
                                    .to_vec()
                            })
                            .collect()
                    });
                    PlainGate::DselectPerExample(
                        PerExampleDSelectParams::new(
                            n, cfg.k, p, gamma, cfg.lambda, cfg.xi, gmat, g_bias, w, w_bias,
                        )
                        .expect("valid gate state"),
                    )
                }
                GateKind::Softmax { per_example } | GateKind::TopK { per_example } => {
                    let b = fetch(params, &model.constants, &format!("{prefix}.b")).data().to_vec();
                    let a = per_example
                        .then(|| fetch(params, &model.constants, &format!("{prefix}.a")).clone());
                    let lp = LinearGateParams { a, b, k: cfg.k };
                    if matches!(cfg.kind, GateKind::Softmax { .. }) {
                        PlainGate::Softmax(lp)
                    } else {
                        PlainGate::TopK(lp)
                    }
                }
                GateKind::Gumbel => {
                    let alpha = fetch(params, &model.constants, &format!("{prefix}.alpha")).data().to_vec();
                    let psi = fetch(params, &model.constants, &format!("{prefix}.psi")).data().to_vec();
                    PlainGate::Gumbel(GumbelGateParams {
                        alpha,
                        psi_logits: psi,
                        temperature,
                        lambda: cfg.lambda,
                    })
                }
                GateKind::AblationAnneal | GateKind::AblationEntropy => {
                    let alpha = fetch(params, &model.constants, &format!("{prefix}.alpha")).data().to_vec();
                    let beta = (0..cfg.k)
                        .map(|i| {
                            fetch(params, &model.constants, &format!("{prefix}.beta{i}"))
                                .data()
                                .to_vec()
                        })
                        .collect();
                    PlainGate::Ablation(AblationGateParams {
                        alpha,
                        beta,
                        temperature,
                        lambda: cfg.lambda,
                    })
                }
            }
        })
        .collect();

    InferenceModel { n_experts: n, experts, towers, gates }
}

/// Binds a batch plus hyper scalars and evaluates the model graph.
pub struct BatchBindings {
    pub x: Tensor,
    pub labels: Vec<Tensor>,
    pub gamma: Tensor,
    pub inv_temp: Tensor,
    pub label_names: Vec<String>,
}

impl BatchBindings {
    pub fn new(x: Tensor, labels: Vec<Tensor>, gamma: f64, temperature: f64) -> Self {
        let label_names = (0..labels.len()).map(label_leaf).collect();
        BatchBindings {
            x,
            labels,
            gamma: Tensor::scalar(gamma),
            inv_temp: Tensor::scalar(1.0 / temperature),
            label_names,
        }
    }

    pub fn bindings<'a>(&'a self, model: &'a MoeModel, params: &'a ParamStore) -> Bindings<'a> {
        let mut b = Bindings::new();
        // Parameters bind after constants so trainable values always win.
        b.insert_map(&model.constants);
        b.insert_store(params);
        b.insert(X_LEAF, &self.x);
        for (name, t) in self.label_names.iter().zip(&self.labels) {
            b.insert(name, t);
        }
        if model.uses_gamma {
            b.insert(GAMMA_LEAF, &self.gamma);
        }
        if model.uses_inv_temp {
            b.insert(INV_TEMP_LEAF, &self.inv_temp);
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{Optimizer, OptimizerKind};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_arch(gate: GateConfig, tasks: usize) -> MoeArchitecture {
        MoeArchitecture {
            n_experts: 4,
            input_dim: 3,
            expert: ExpertSpec { hidden: vec![3], head: ExpertHead::SumUnits, trainable: true },
            tasks: (0..tasks).map(|t| TaskSpec::regression(format!("t{t}"))).collect(),
            gate,
            task_weight: 0.5,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, p: usize, tasks: usize) -> BatchBindings {
        let x = Tensor::new(vec![b, p], (0..b * p).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let labels = (0..tasks)
            .map(|_| Tensor::vector((0..b).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        BatchBindings::new(x, labels, 1.0, 1.0)
    }

    #[test]
    fn one_hot_gate_reduces_to_single_expert() {
        let mut r = rng(1);
        let arch = tiny_arch(GateConfig::dselect_static(1, 0.0, 1.0), 1);
        let model = build_moe(&arch, 4, &mut r).unwrap();
        // Saturate the single selector onto expert 2 (code 10).
        let mut params = model.params.clone();
        params.insert("gate0.z", Tensor::matrix(1, 2, vec![-1.0, 1.0]).unwrap());
        let infer = extract_inference(&model, &params, 1.0, 1.0);

        let x = [0.3, -0.2, 0.9];
        let (pred, evaluated) = infer.forward_task(&x, 0).unwrap();
        assert_eq!(evaluated, 1);
        let direct = infer.experts[2].forward(&x)[0];
        assert!((pred - direct).abs() < 1e-12);
    }

    #[test]
    fn half_half_gate_averages_two_experts() {
        // Hand-built inference model: two constant-ish experts and an
        // identity tower.
        let e1 = PlainExpert {
            layers: vec![(Tensor::matrix(1, 1, vec![0.0]).unwrap(), vec![1.0])],
            head: ExpertHead::SumUnits,
        };
        let e2 = PlainExpert {
            layers: vec![(Tensor::matrix(1, 1, vec![0.0]).unwrap(), vec![3.0])],
            head: ExpertHead::SumUnits,
        };
        let gate = PlainGate::DselectStatic(
            crate::gate::construct_from_weights(&[0.5, 0.5], 2, 1.0).unwrap(),
        );
        let infer = InferenceModel {
            n_experts: 2,
            experts: vec![e1, e2],
            towers: vec![PlainTower::Identity],
            gates: vec![gate],
        };
        let (pred, evaluated) = infer.forward_task(&[0.0], 0).unwrap();
        assert!((pred - 2.0).abs() < 1e-12);
        assert_eq!(evaluated, 2);
    }

    #[test]
    fn dense_softmax_gate_evaluates_all_experts() {
        let mut r = rng(2);
        let cfg = GateConfig {
            kind: GateKind::Softmax { per_example: false },
            k: 4,
            lambda: 0.0,
            xi: 0.0,
            gamma: 1.0,
            temperature: 1.0,
        };
        let arch = tiny_arch(cfg, 1);
        let model = build_moe(&arch, 4, &mut r).unwrap();
        let infer = extract_inference(&model, &model.params, 1.0, 1.0);
        let (_, evaluated) = infer.forward_task(&[0.1, 0.2, 0.3], 0).unwrap();
        assert_eq!(evaluated, 4);
    }

    #[test]
    fn graph_and_plain_inference_agree() {
        for kind in [
            GateKind::DselectStatic,
            GateKind::DselectPerExample { bias: true },
            GateKind::Softmax { per_example: false },
            GateKind::TopK { per_example: false },
            GateKind::TopK { per_example: true },
            GateKind::AblationEntropy,
        ] {
            let mut r = rng(3);
            let cfg = GateConfig { kind, k: 2, lambda: 0.01, xi: 0.0, gamma: 1.0, temperature: 0.7 };
            let arch = tiny_arch(cfg, 2);
            let model = build_moe(&arch, 5, &mut r).unwrap();
            let mut batch = random_batch(&mut r, 5, 3, 2);
            batch.inv_temp = Tensor::scalar(1.0 / 0.7);
            let b = batch.bindings(&model, &model.params);
            let trace = model.graph.evaluate(&b).unwrap();
            model.check_gate_simplex(&trace).unwrap();
            let infer = extract_inference(&model, &model.params, 1.0, 0.7);
            for t in 0..2 {
                let graph_preds = trace.value(model.task_preds[t]);
                for row in 0..5 {
                    let (plain, _) = infer.forward_task(batch.x.row(row), t).unwrap();
                    assert!(
                        (graph_preds.data()[row] - plain).abs() < 1e-10,
                        "{:?} task {} row {}: {} vs {}",
                        kind,
                        t,
                        row,
                        graph_preds.data()[row],
                        plain
                    );
                }
            }
        }
    }

    #[test]
    fn mtl_loss_examples() {
        let mut r = rng(4);
        let arch = tiny_arch(GateConfig::dselect_static(2, 0.1, 1.0), 2);
        let model = build_moe(&arch, 4, &mut r).unwrap();
        let batch = random_batch(&mut r, 4, 3, 2);

        // task_weight = 1: total = task-1 loss + regularizers.
        let mut arch1 = arch.clone();
        arch1.task_weight = 1.0;
        let mut r1 = rng(4);
        let model1 = build_moe(&arch1, 4, &mut r1).unwrap();
        let b1 = batch.bindings(&model1, &model1.params);
        let trace = model1.graph.evaluate(&b1).unwrap();
        let t0 = trace.value(model1.task_losses[0]).item();
        let omega = trace.value(model1.gates[0].omega.unwrap()).item()
            + trace.value(model1.gates[1].omega.unwrap()).item();
        let total = trace.value(model1.loss).item();
        assert!((total - (t0 + 0.1 * omega)).abs() < 1e-12);

        // lambda = 0, xi = 0: pure empirical risk.
        let mut arch0 = arch.clone();
        arch0.gate.lambda = 0.0;
        let mut r0 = rng(4);
        let model0 = build_moe(&arch0, 4, &mut r0).unwrap();
        let b0 = batch.bindings(&model0, &model0.params);
        let trace0 = model0.graph.evaluate(&b0).unwrap();
        let expect = 0.5 * trace0.value(model0.task_losses[0]).item()
            + 0.5 * trace0.value(model0.task_losses[1]).item();
        assert!((trace0.value(model0.loss).item() - expect).abs() < 1e-12);

        // Binary S(Z): the entropy regularizer contributes exactly zero.
        let mut params = model.params.clone();
        params.insert("gate0.z", Tensor::matrix(2, 2, vec![1.0, -1.0, 1.0, 1.0]).unwrap());
        params.insert("gate1.z", Tensor::matrix(2, 2, vec![-1.0, -1.0, 1.0, -1.0]).unwrap());
        let b = batch.bindings(&model, &params);
        let trace = model.graph.evaluate(&b).unwrap();
        assert_eq!(trace.value(model.gates[0].omega.unwrap()).item(), 0.0);
        assert_eq!(trace.value(model.gates[1].omega.unwrap()).item(), 0.0);
        let lhs = trace.value(model.loss).item();
        let rhs = 0.5 * trace.value(model.task_losses[0]).item()
            + 0.5 * trace.value(model.task_losses[1]).item();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn recovery_model_freezing_is_airtight() {
        let mut r = rng(5);
        let ds = crate::synth::gen_recovery_data(6, 200, 3).unwrap();
        let gate = GateConfig::dselect_static(4, 0.01, 1.0);
        let rec = build_recovery_model(&ds.generator, 16, gate, 8, &mut r).unwrap();
        let model = &rec.model;

        // Gate parameter count: k + k * log2(n) = 4 + 4 * 4.
        let gate_params: usize = model
            .params
            .iter()
            .filter(|(name, _)| name.starts_with("gate"))
            .map(|(_, t)| t.numel())
            .sum();
        assert_eq!(gate_params, 20);
        // The only other trainable state is the logistic unit (4 + 1).
        assert_eq!(model.params.numel(), gate_params + 5);

        // True experts are bitwise copies of the generator.
        for (slot, &pos) in rec.true_expert_positions.iter().enumerate() {
            let w = &model.constants[&format!("expert{pos}.l0.w")];
            let expect = &ds.generator.experts[slot].w;
            assert_eq!(w.shape(), expect.shape());
            for (a, b) in w.data().iter().zip(expect.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        // Gradients exist only for gate parameters, and optimizer steps leave
        // every frozen tensor bitwise unchanged.
        let mut rr = rng(6);
        let batch = BatchBindings::new(
            Tensor::new(vec![8, 6], (0..48).map(|_| rr.random_range(-1.0..1.0)).collect()).unwrap(),
            vec![Tensor::vector((0..8).map(|i| (i % 2) as f64).collect())],
            1.0,
            1.0,
        );
        let frozen_before = model.constants.clone();
        let mut params = model.params.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
        for _ in 0..3 {
            let b = batch.bindings(model, &params);
            let grads = model.graph.gradient(model.loss, &b).unwrap();
            for name in grads.keys() {
                assert!(
                    name.starts_with("gate") || name.starts_with("task0.head"),
                    "unexpected gradient for {}",
                    name
                );
            }
            opt.step(&mut params, &grads).unwrap();
        }
        for (name, before) in &frozen_before {
            let after = &model.constants[name];
            for (a, b) in before.data().iter().zip(after.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "frozen tensor {} changed", name);
            }
        }
    }

    #[test]
    fn shared_bottom_examples() {
        let mut r = rng(7);
        let tasks =
            vec![TaskSpec::regression("a"), TaskSpec::regression("b")];
        let model = build_shared_bottom(4, &[6, 3], &tasks, 0.5, 2, &mut r).unwrap();

        // Parameter count: bottom (4*6+6 + 6*3+3) + two towers (3+1 each).
        assert_eq!(model.params.numel(), (4 * 6 + 6) + (6 * 3 + 3) + 2 * (3 + 1));

        // Identical input rows give identical bottom activations for both
        // tasks (the bottom is one shared node).
        let x = Tensor::new(vec![2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let labels = vec![Tensor::vector(vec![0.0, 0.0]), Tensor::vector(vec![0.0, 0.0])];
        let mut b = Bindings::new();
        b.insert_store(&model.params);
        b.insert(X_LEAF, &x);
        b.insert("data.y0", &labels[0]);
        b.insert("data.y1", &labels[1]);
        let trace = model.graph.evaluate(&b).unwrap();
        let bottom = trace.value(model.bottom_out);
        assert_eq!(bottom.row(0), bottom.row(1));

        // Zero bottom weights: towers see a zero vector, predictions are the
        // tower biases.
        let mut zeroed = model.params.clone();
        for name in ["bottom.l0.w", "bottom.l0.b", "bottom.l1.w", "bottom.l1.b"] {
            let t = zeroed.get(name).unwrap().clone();
            zeroed.insert(name, Tensor::zeros(t.shape()));
        }
        let mut b = Bindings::new();
        b.insert_store(&zeroed);
        b.insert(X_LEAF, &x);
        b.insert("data.y0", &labels[0]);
        b.insert("data.y1", &labels[1]);
        let trace = model.graph.evaluate(&b).unwrap();
        for t in 0..2 {
            let bias = zeroed.get(&format!("task{t}.head.b")).unwrap().data()[0];
            for &v in trace.value(model.task_preds[t]).data() {
                assert_eq!(v, bias);
            }
        }
    }

    #[test]
    fn per_example_topk_has_k_nonzeros_per_row() {
        let mut r = rng(8);
        let cfg = GateConfig {
            kind: GateKind::TopK { per_example: true },
            k: 2,
            lambda: 0.0,
            xi: 0.0,
            gamma: 1.0,
            temperature: 1.0,
        };
        let arch = tiny_arch(cfg, 1);
        let model = build_moe(&arch, 6, &mut r).unwrap();
        let batch = random_batch(&mut r, 6, 3, 1);
        let b = batch.bindings(&model, &model.params);
        let trace = model.graph.evaluate(&b).unwrap();
        let w = trace.value(model.gates[0].weights);
        for row in 0..6 {
            let count = w.row(row).iter().filter(|&&v| v > 0.0).count();
            assert_eq!(count, 2);
        }
    }
}

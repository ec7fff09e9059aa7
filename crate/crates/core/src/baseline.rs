//! Baseline gates used in comparison experiments: softmax, Top-k, a
//! Gumbel-sigmoid gate over per-expert Bernoulli switches, and the
//! softmax-selector ablation gate.
//!
//! The Top-k gate keeps the k largest logits (ties broken toward the lower
//! index) and renormalizes with a masked softmax: dropped entries are exactly
//! zero and no infinite sentinel ever reaches a tensor. The standalone
//! [`keep_top_k`] helper exposes the textbook formulation with a `-inf`
//! sentinel for callers that want the raw masked vector.

use std::fmt;

use rand::Rng;

use crate::gate::{ceil_log2, GateError};
use crate::graph::{ExprGraph, GraphError, NodeId};
use crate::tensor::Tensor;

/// Parameters of the linear (softmax / Top-k) gates: logits `A x + b`.
/// Static gating keeps `A` absent, which is the "frozen at zero" case.
#[derive(Debug, Clone)]
pub struct LinearGateParams {
    /// Input map, n x p; `None` for static gating.
    pub a: Option<Tensor>,
    /// Bias logits, length n.
    pub b: Vec<f64>,
    /// Number of experts kept by the Top-k variant.
    pub k: usize,
}

impl LinearGateParams {
    pub fn static_gate(n: usize, k: usize) -> Result<Self, GateError> {
        if k < 1 || k > n {
            return Err(GateError::BadParams { detail: format!("need 1 <= k <= n, got k={} n={}", k, n) });
        }
        Ok(LinearGateParams { a: None, b: vec![0.0; n], k })
    }

    pub fn per_example(a: Tensor, b: Vec<f64>, k: usize) -> Result<Self, GateError> {
        let n = b.len();
        if a.rank() != 2 || a.shape()[0] != n {
            return Err(GateError::BadParams {
                detail: format!("A must be {} x p, got {:?}", n, a.shape()),
            });
        }
        if k < 1 || k > n {
            return Err(GateError::BadParams { detail: format!("need 1 <= k <= n, got k={} n={}", k, n) });
        }
        Ok(LinearGateParams { a: Some(a), b, k })
    }

    pub fn n_experts(&self) -> usize {
        self.b.len()
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>, GateError> {
        let mut logits = self.b.clone();
        if let Some(a) = &self.a {
            let p = a.shape()[1];
            if x.len() != p {
                return Err(GateError::DimensionMismatch { context: "gate input", expected: p, got: x.len() });
            }
            for (i, l) in logits.iter_mut().enumerate() {
                *l += a.row(i).iter().zip(x).map(|(&w, &v)| w * v).sum::<f64>();
            }
        }
        Ok(logits)
    }
}

/// Dense softmax gate `softmax(A x + b)`; static when `A` is absent.
pub fn softmax_gate(params: &LinearGateParams, x: &[f64]) -> Result<Vec<f64>, GateError> {
    Ok(crate::gate::softmax_slice(&params.logits(x)?))
}

/// Replaces entries outside the k largest with `-inf`; ties keep the lower
/// index. Idempotent.
pub fn keep_top_k(v: &[f64], k: usize) -> Result<Vec<f64>, GateError> {
    if k < 1 || k > v.len() {
        return Err(GateError::BadParams { detail: format!("k={} out of range 1..={}", k, v.len()) });
    }
    let keep = crate::graph::topk_indices(v, k);
    let mut out = vec![f64::NEG_INFINITY; v.len()];
    for &i in &keep {
        out[i] = v[i];
    }
    Ok(out)
}

/// Sparse Top-k gate: masked softmax over the k largest logits. Exactly k
/// strictly positive entries.
pub fn topk_gate(params: &LinearGateParams, x: &[f64]) -> Result<Vec<f64>, GateError> {
    let logits = params.logits(x)?;
    if params.k > logits.len() {
        return Err(GateError::BadParams {
            detail: format!("k={} exceeds expert count {}", params.k, logits.len()),
        });
    }
    let keep = crate::graph::topk_indices(&logits, params.k);
    let mx = keep.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; logits.len()];
    let mut z = 0.0;
    for &i in &keep {
        let e = (logits[i] - mx).exp();
        out[i] = e;
        z += e;
    }
    for &i in &keep {
        out[i] /= z;
    }
    Ok(out)
}

/// Indices selected by the Top-k gate (its declared support).
pub fn topk_selection(params: &LinearGateParams, x: &[f64]) -> Result<Vec<usize>, GateError> {
    let logits = params.logits(x)?;
    Ok(crate::graph::topk_indices(&logits, params.k))
}

/// Error related to the Gumbel-sigmoid gate configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureError {
    pub temperature: f64,
}

impl fmt::Display for TemperatureError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "temperature must be positive, got {}", self.temperature)
    }
}

impl std::error::Error for TemperatureError {}

/// Gate with a Bernoulli on/off switch per expert, trained with a binary
/// concrete relaxation and thresholded hard at evaluation time.
#[derive(Debug, Clone)]
pub struct GumbelGateParams {
    /// Expert weight logits, length n.
    pub alpha: Vec<f64>,
    /// Logits of the Bernoulli parameters psi (psi = sigmoid of these).
    pub psi_logits: Vec<f64>,
    /// Relaxation temperature used in training mode.
    pub temperature: f64,
    /// Sparsity penalty weight.
    pub lambda: f64,
}

impl GumbelGateParams {
    pub fn new(n: usize, temperature: f64, lambda: f64) -> Result<Self, TemperatureError> {
        if temperature <= 0.0 {
            return Err(TemperatureError { temperature });
        }
        Ok(GumbelGateParams { alpha: vec![0.0; n], psi_logits: vec![0.0; n], temperature, lambda })
    }

    /// The Bernoulli parameters `psi_i` in (0, 1).
    pub fn psi(&self) -> Vec<f64> {
        self.psi_logits.iter().map(|&l| sigmoid(l)).collect()
    }

    /// Expected number of selected experts, `sum psi_i`.
    pub fn expected_selected(&self) -> f64 {
        self.psi().iter().sum()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Forward pass of the Gumbel-sigmoid gate.
///
/// In training mode each switch is a binary-concrete sample
/// `U_i = sigmoid((psi_logit_i + L_i) / temperature)` with logistic noise
/// `L_i = ln u - ln(1 - u)`. In evaluation mode the switch is the
/// deterministic threshold `psi_i > 0.5`.
pub fn gumbel_gate_forward<R: Rng>(
    params: &GumbelGateParams,
    rng: &mut R,
    training: bool,
) -> Vec<f64> {
    let mix = crate::gate::softmax_slice(&params.alpha);
    if training {
        params
            .psi_logits
            .iter()
            .zip(&mix)
            .map(|(&l, &w)| {
                let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
                let noise = u.ln() - (1.0 - u).ln();
                w * sigmoid((l + noise) / params.temperature)
            })
            .collect()
    } else {
        params
            .psi_logits
            .iter()
            .zip(&mix)
            .map(|(&l, &w)| if l > 0.0 { w } else { 0.0 })
            .collect()
    }
}

/// Sparsity penalty `lambda * sum ln psi_i` (non-positive; rewards small psi).
pub fn gumbel_sparsity_penalty(params: &GumbelGateParams) -> f64 {
    if params.lambda == 0.0 {
        return 0.0;
    }
    params.lambda * params.psi_logits.iter().map(|&l| log_sigmoid(l)).sum::<f64>()
}

fn log_sigmoid(x: f64) -> f64 {
    // ln sigma(x) = -softplus(-x)
    -softplus(-x)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// The softmax-selector ablation gate: k tempered-softmax selectors mixed by
/// softmax weights. Reaches one-hot selectors only in the annealing limit.
#[derive(Debug, Clone)]
pub struct AblationGateParams {
    /// Selector mixing logits, length k.
    pub alpha: Vec<f64>,
    /// Selector logits, k vectors of length n.
    pub beta: Vec<Vec<f64>>,
    /// Softmax temperature (annealed externally).
    pub temperature: f64,
    /// Entropy regularization weight (the non-annealing variant).
    pub lambda: f64,
}

impl AblationGateParams {
    pub fn new(n: usize, k: usize, temperature: f64, lambda: f64) -> Result<Self, TemperatureError> {
        if temperature <= 0.0 {
            return Err(TemperatureError { temperature });
        }
        Ok(AblationGateParams {
            alpha: vec![0.0; k],
            beta: vec![vec![0.0; n]; k],
            temperature,
            lambda,
        })
    }

    /// The k tempered-softmax selector outputs.
    pub fn selectors(&self) -> Vec<Vec<f64>> {
        self.beta
            .iter()
            .map(|b| {
                let scaled: Vec<f64> = b.iter().map(|&v| v / self.temperature).collect();
                crate::gate::softmax_slice(&scaled)
            })
            .collect()
    }
}

/// Forward pass of the ablation gate: `sum_i softmax(alpha)_i softmax(beta_i / T)`.
pub fn ablation_gate(params: &AblationGateParams) -> Vec<f64> {
    let mix = crate::gate::softmax_slice(&params.alpha);
    let selectors = params.selectors();
    let n = selectors[0].len();
    let mut out = vec![0.0; n];
    for (w, sel) in mix.iter().zip(&selectors) {
        for (o, &v) in out.iter_mut().zip(sel) {
            *o += w * v;
        }
    }
    out
}

/// Entropy regularizer of the ablation gate: `sum_i h(softmax(beta_i / T))`.
pub fn ablation_entropy(params: &AblationGateParams) -> f64 {
    params.selectors().iter().map(|s| crate::gate::entropy_unchecked(s)).sum()
}

// --- graph builders -----------------------------------------------------------

/// Nodes of a linear gate (softmax or Top-k) in a graph.
pub struct LinearGateNodes {
    /// Gate weights: `[n]` (static) or `[batch, n]` (per-example).
    pub weights: NodeId,
    /// Pre-softmax logits.
    pub logits: NodeId,
}

/// Static or per-example softmax gate. `x` is required for per-example mode.
pub fn build_softmax_gate(
    g: &mut ExprGraph,
    prefix: &str,
    n: usize,
    x: Option<NodeId>,
) -> Result<LinearGateNodes, GraphError> {
    let logits = build_linear_logits(g, prefix, n, x)?;
    let weights = g.softmax(logits)?;
    Ok(LinearGateNodes { weights, logits })
}

/// Static or per-example Top-k gate with the fused masked softmax.
pub fn build_topk_gate(
    g: &mut ExprGraph,
    prefix: &str,
    n: usize,
    k: usize,
    x: Option<NodeId>,
) -> Result<LinearGateNodes, GraphError> {
    let logits = build_linear_logits(g, prefix, n, x)?;
    let weights = g.topk_softmax(logits, k)?;
    Ok(LinearGateNodes { weights, logits })
}

fn build_linear_logits(
    g: &mut ExprGraph,
    prefix: &str,
    n: usize,
    x: Option<NodeId>,
) -> Result<NodeId, GraphError> {
    let b = g.leaf(&format!("{prefix}.b"), &[n], true)?;
    match x {
        None => Ok(b),
        Some(x) => {
            let xs = g.shape(x).to_vec();
            if xs.len() != 2 {
                return Err(GraphError::InvalidOp {
                    detail: "per-example gate input must be [batch, p]".into(),
                });
            }
            let a = g.leaf(&format!("{prefix}.a"), &[n, xs[1]], true)?;
            let ax = g.matmul_nt(x, a)?; // [B, n]
            g.add(ax, b)
        }
    }
}

/// Nodes of the Gumbel-sigmoid gate in training mode.
pub struct GumbelGateNodes {
    /// Gate output `softmax(alpha) * U`, `[n]`.
    pub weights: NodeId,
    /// Relaxed switches `U`, `[n]`.
    pub switches: NodeId,
    /// Sparsity penalty `lambda * sum ln psi`, scalar.
    pub penalty: NodeId,
}

/// Training-mode Gumbel-sigmoid gate. The logistic noise enters through the
/// frozen leaf `{prefix}.noise` (length n), freshly bound every step, and the
/// relaxation temperature through the scalar node `inv_temp` (its inverse).
pub fn build_gumbel_gate(
    g: &mut ExprGraph,
    prefix: &str,
    n: usize,
    inv_temp: NodeId,
    lambda: f64,
) -> Result<GumbelGateNodes, GraphError> {
    let alpha = g.leaf(&format!("{prefix}.alpha"), &[n], true)?;
    let psi = g.leaf(&format!("{prefix}.psi"), &[n], true)?;
    let noise = g.leaf(&format!("{prefix}.noise"), &[n], false)?;
    let mix = g.softmax(alpha)?;
    let shifted = g.add(psi, noise)?;
    let scaled = g.mul(shifted, inv_temp)?;
    let switches = g.sigmoid(scaled)?;
    let weights = g.mul(mix, switches)?;
    let log_psi = g.log_sigmoid(psi)?;
    let total = g.sum_all(log_psi)?;
    let penalty = g.scalar_mul(total, lambda)?;
    Ok(GumbelGateNodes { weights, switches, penalty })
}

/// Nodes of the ablation gate.
pub struct AblationGateNodes {
    /// Gate weights, `[n]`.
    pub weights: NodeId,
    /// Selector outputs, each `[n]`.
    pub selectors: Vec<NodeId>,
    /// Entropy regularizer (unweighted), scalar.
    pub omega: NodeId,
}

/// Static ablation gate; `inv_temp` is a scalar node holding 1/temperature so
/// annealing schedules can re-bind it.
pub fn build_ablation_gate(
    g: &mut ExprGraph,
    prefix: &str,
    n: usize,
    k: usize,
    inv_temp: NodeId,
) -> Result<AblationGateNodes, GraphError> {
    let alpha = g.leaf(&format!("{prefix}.alpha"), &[k], true)?;
    let mix = g.softmax(alpha)?;
    let mut selectors = Vec::with_capacity(k);
    let mut rows = Vec::with_capacity(k);
    for i in 0..k {
        let beta = g.leaf(&format!("{prefix}.beta{i}"), &[n], true)?;
        let scaled = g.mul(beta, inv_temp)?;
        let sel = g.softmax(scaled)?;
        selectors.push(sel);
        rows.push(g.reshape(sel, &[1, n])?);
    }
    let stacked = g.concat(&rows, 0)?;
    let weights = g.matmul(mix, stacked)?;
    let mut ent_terms = Vec::with_capacity(k);
    for &s in &selectors {
        let xl = g.xlogx(s)?;
        let sum = g.sum_all(xl)?;
        ent_terms.push(g.neg(sum)?);
    }
    let omega = g.add_n(&ent_terms)?;
    Ok(AblationGateNodes { weights, selectors, omega })
}

/// Number of encoding slots the equivalent DSelect-k gate would use; exposed
/// for parameter-count comparisons in reports.
pub fn dselect_param_count(n: usize, k: usize) -> usize {
    k + k * ceil_log2(n)
}

//! The DSelect-k gate: differentiable selection of at most k out of n experts
//! through smoothed binary encoding.
//!
//! A single expert selector maps m encoding variables to a vector over 2^m
//! slots: entry i is the product of `z_j` over the set bits of `i-1` and
//! `1 - z_j` over the clear bits. Feeding the encoding variables through the
//! smooth-step function makes the selector differentiable while still able to
//! reach exact one-hot vectors in finitely many steps. The gate mixes k such
//! selectors with softmax weights.
//!
//! Everything exists in two forms that are cross-checked in tests: plain
//! functions over slices (used for inference, metrics and oracles) and
//! [`crate::graph::ExprGraph`] builders (used for training).

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;

use crate::graph::{smooth_step_derivative, smooth_step_value, ExprGraph, GraphError, NodeId};
use crate::tensor::Tensor;

/// Floor applied to the real-expert mass in the phantom penalty denominator.
pub const PHANTOM_DENOM_FLOOR: f64 = 1e-6;

/// Error raised by gate math.
#[derive(Debug, Clone, PartialEq)]
pub enum GateError {
    NonPositiveGamma { gamma: f64 },
    DimensionMismatch { context: &'static str, expected: usize, got: usize },
    NotOnSimplex { detail: String },
    TooManyNonzeros { count: usize, k: usize },
    NotPowerOfTwo { n: usize },
    BadParams { detail: String },
}

impl fmt::Display for GateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateError::NonPositiveGamma { gamma } => {
                write!(f, "smooth-step width must be positive, got {}", gamma)
            }
            GateError::DimensionMismatch { context, expected, got } => {
                write!(f, "{}: expected dimension {}, got {}", context, expected, got)
            }
            GateError::NotOnSimplex { detail } => write!(f, "not a probability vector: {}", detail),
            GateError::TooManyNonzeros { count, k } => {
                write!(f, "target has {} nonzeros but the gate selects at most {}", count, k)
            }
            GateError::NotPowerOfTwo { n } => {
                write!(f, "construction requires a power-of-two expert count, got {}", n)
            }
            GateError::BadParams { detail } => write!(f, "invalid gate parameters: {}", detail),
        }
    }
}

impl std::error::Error for GateError {}

/// Smallest m with `2^m >= n`.
pub fn ceil_log2(n: usize) -> usize {
    let mut m = 0;
    while (1usize << m) < n {
        m += 1;
    }
    m
}

/// The smooth-step function: 0 for `t <= -gamma/2`, 1 for `t >= gamma/2`, and
/// the cubic `-(2/gamma^3) t^3 + (3/(2 gamma)) t + 1/2` in between. Saturation
/// is exact, and so is the zero derivative in the saturated regions.
pub fn smooth_step(t: f64, gamma: f64) -> Result<f64, GateError> {
    if gamma <= 0.0 {
        return Err(GateError::NonPositiveGamma { gamma });
    }
    Ok(smooth_step_value(t, gamma))
}

/// Derivative of [`smooth_step`] with respect to `t`.
pub fn smooth_step_deriv(t: f64, gamma: f64) -> Result<f64, GateError> {
    if gamma <= 0.0 {
        return Err(GateError::NonPositiveGamma { gamma });
    }
    Ok(smooth_step_derivative(t, gamma))
}

/// Indices of the set bits in the binary representation of `l`, with the
/// least significant bit indexed 1.
pub fn binary_support(l: u64) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    let mut v = l;
    let mut bit = 1;
    while v != 0 {
        if v & 1 == 1 {
            out.insert(bit);
        }
        v >>= 1;
        bit += 1;
    }
    out
}

/// The single expert selector r(z) over 2^m slots: entry i is
/// `prod_{j in B(i-1)} z_j * prod_{j not in B(i-1)} (1 - z_j)`.
///
/// For a binary z encoding the integer l this is an exact one-hot at slot
/// l+1; for z in [0,1]^m it is a probability vector.
pub fn selector(z: &[f64]) -> Vec<f64> {
    let mut r = vec![1.0];
    for &zj in z {
        let mut next = vec![0.0; r.len() * 2];
        let (low, high) = next.split_at_mut(r.len());
        for (i, &v) in r.iter().enumerate() {
            low[i] = v * (1.0 - zj);
            high[i] = v * zj;
        }
        r = next;
    }
    r
}

/// Shannon entropy `-sum p ln p` (natural log, `0 ln 0 = 0`).
pub fn entropy(p: &[f64]) -> Result<f64, GateError> {
    let mut sum = 0.0;
    for &v in p {
        if v < -1e-12 {
            return Err(GateError::NotOnSimplex { detail: format!("negative entry {}", v) });
        }
        sum += v;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(GateError::NotOnSimplex { detail: format!("entries sum to {}", sum) });
    }
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().map(|&v| if v <= 0.0 { 0.0 } else { v * v.ln() }).sum::<f64>()
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Output of a gate forward pass.
#[derive(Debug, Clone)]
pub struct GateOutput {
    /// Probability assigned to each of the n real experts.
    pub weights: Vec<f64>,
    /// The k selector outputs, each over 2^m slots.
    pub selector_outputs: Vec<Vec<f64>>,
    /// Probability assigned to encoding slots beyond the n real experts
    /// (zero when n is a power of two).
    pub phantom_mass: f64,
}

impl GateOutput {
    /// Indices (0-based) of experts with strictly positive weight.
    pub fn support(&self) -> BTreeSet<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Total mass including phantom slots; 1 up to rounding.
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum::<f64>() + self.phantom_mass
    }
}

/// Learnable state of the static DSelect-k gate.
#[derive(Debug, Clone)]
pub struct StaticDSelectParams {
    /// Selector mixing logits, length k.
    pub alpha: Vec<f64>,
    /// Encoding variables, k rows of length m.
    pub z: Tensor,
    /// Smooth-step width.
    pub gamma: f64,
    /// Entropy regularization weight.
    pub lambda: f64,
    /// Phantom-mass penalty weight (only meaningful when n < 2^m).
    pub xi: f64,
    pub n_experts: usize,
    pub k: usize,
    pub m: usize,
}

impl StaticDSelectParams {
    pub fn new(
        n_experts: usize,
        k: usize,
        gamma: f64,
        lambda: f64,
        xi: f64,
        alpha: Vec<f64>,
        z: Tensor,
    ) -> Result<Self, GateError> {
        if n_experts < 2 {
            return Err(GateError::BadParams { detail: format!("need n >= 2, got {}", n_experts) });
        }
        if k < 1 || k > n_experts {
            return Err(GateError::BadParams {
                detail: format!("need 1 <= k <= n, got k={} n={}", k, n_experts),
            });
        }
        if gamma <= 0.0 {
            return Err(GateError::NonPositiveGamma { gamma });
        }
        if lambda < 0.0 || xi < 0.0 {
            return Err(GateError::BadParams {
                detail: format!("lambda and xi must be non-negative, got {} and {}", lambda, xi),
            });
        }
        let m = ceil_log2(n_experts);
        if alpha.len() != k {
            return Err(GateError::DimensionMismatch { context: "alpha", expected: k, got: alpha.len() });
        }
        if z.shape() != [k, m] {
            return Err(GateError::BadParams {
                detail: format!("z must be {}x{}, got {:?}", k, m, z.shape()),
            });
        }
        Ok(StaticDSelectParams { alpha, z, gamma, lambda, xi, n_experts, k, m })
    }

    /// Neutral initialization: zero mixing logits, encoding variables drawn
    /// uniformly from the interior of the fractional region so that
    /// `0 < S(Z_ij) < 1` everywhere.
    pub fn init<R: Rng>(
        n_experts: usize,
        k: usize,
        gamma: f64,
        lambda: f64,
        xi: f64,
        rng: &mut R,
    ) -> Result<Self, GateError> {
        let m = ceil_log2(n_experts);
        let z = init_z(k, m, gamma, rng)?;
        StaticDSelectParams::new(n_experts, k, gamma, lambda, xi, vec![0.0; k], z)
    }

    /// `S(Z)` as a matrix.
    pub fn s_of_z(&self) -> Tensor {
        let data = self
            .z
            .data()
            .iter()
            .map(|&t| smooth_step_value(t, self.gamma))
            .collect();
        Tensor::new(vec![self.k, self.m], data).expect("shape preserved")
    }

    /// True when every entry of `S(Z)` is exactly 0.0 or 1.0.
    pub fn s_of_z_is_binary(&self) -> bool {
        self.s_of_z().data().iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Learnable state of the per-example DSelect-k gate: the mixing logits and
/// encoding variables are linear (optionally affine) functions of the input.
#[derive(Debug, Clone)]
pub struct PerExampleDSelectParams {
    /// Mixing map, k x p.
    pub g: Tensor,
    /// Optional mixing bias, length k.
    pub g_bias: Option<Vec<f64>>,
    /// Encoding maps, k matrices of shape m x p.
    pub w: Vec<Tensor>,
    /// Optional encoding biases, k vectors of length m.
    pub w_bias: Option<Vec<Vec<f64>>>,
    pub gamma: f64,
    pub lambda: f64,
    pub xi: f64,
    pub n_experts: usize,
    pub k: usize,
    pub m: usize,
    pub p: usize,
}

impl PerExampleDSelectParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_experts: usize,
        k: usize,
        p: usize,
        gamma: f64,
        lambda: f64,
        xi: f64,
        g: Tensor,
        g_bias: Option<Vec<f64>>,
        w: Vec<Tensor>,
        w_bias: Option<Vec<Vec<f64>>>,
    ) -> Result<Self, GateError> {
        if gamma <= 0.0 {
            return Err(GateError::NonPositiveGamma { gamma });
        }
        let m = ceil_log2(n_experts);
        if g.shape() != [k, p] {
            return Err(GateError::BadParams {
                detail: format!("G must be {}x{}, got {:?}", k, p, g.shape()),
            });
        }
        if w.len() != k || w.iter().any(|wi| wi.shape() != [m, p]) {
            return Err(GateError::BadParams {
                detail: format!("W must be {} matrices of shape {}x{}", k, m, p),
            });
        }
        if let Some(b) = &g_bias {
            if b.len() != k {
                return Err(GateError::DimensionMismatch { context: "g_bias", expected: k, got: b.len() });
            }
        }
        if let Some(bs) = &w_bias {
            if bs.len() != k || bs.iter().any(|b| b.len() != m) {
                return Err(GateError::BadParams {
                    detail: format!("w_bias must be {} vectors of length {}", k, m),
                });
            }
        }
        Ok(PerExampleDSelectParams { g, g_bias, w, w_bias, gamma, lambda, xi, n_experts, k, m, p })
    }
}

/// Static DSelect-k forward pass: mixes k smoothed selectors and keeps the
/// first n entries as expert weights.
pub fn dselect_static(params: &StaticDSelectParams) -> GateOutput {
    let mix = softmax_slice(&params.alpha);
    let s = params.s_of_z();
    let selectors: Vec<Vec<f64>> = (0..params.k).map(|i| selector(s.row(i))).collect();
    combine(&mix, &selectors, params.n_experts)
}

/// Per-example DSelect-k forward pass for one input vector.
pub fn dselect_per_example(
    params: &PerExampleDSelectParams,
    x: &[f64],
) -> Result<GateOutput, GateError> {
    if x.len() != params.p {
        return Err(GateError::DimensionMismatch { context: "input", expected: params.p, got: x.len() });
    }
    let mut alpha = matvec(&params.g, x);
    if let Some(b) = &params.g_bias {
        for (a, bv) in alpha.iter_mut().zip(b) {
            *a += bv;
        }
    }
    let mix = softmax_slice(&alpha);
    let mut selectors = Vec::with_capacity(params.k);
    for i in 0..params.k {
        let mut z = matvec(&params.w[i], x);
        if let Some(bs) = &params.w_bias {
            for (zv, bv) in z.iter_mut().zip(&bs[i]) {
                *zv += bv;
            }
        }
        let s: Vec<f64> = z.iter().map(|&t| smooth_step_value(t, params.gamma)).collect();
        selectors.push(selector(&s));
    }
    Ok(combine(&mix, &selectors, params.n_experts))
}

fn matvec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..m.shape()[0])
        .map(|i| m.row(i).iter().zip(x).map(|(&a, &b)| a * b).sum())
        .collect()
}

fn combine(mix: &[f64], selectors: &[Vec<f64>], n: usize) -> GateOutput {
    let slots = selectors[0].len();
    let mut full = vec![0.0; slots];
    for (w, r) in mix.iter().zip(selectors) {
        for (f, &v) in full.iter_mut().zip(r) {
            *f += w * v;
        }
    }
    let phantom_mass = full[n..].iter().sum();
    full.truncate(n);
    GateOutput { weights: full, selector_outputs: selectors.to_vec(), phantom_mass }
}

/// Entropy regularizer of the static gate: the sum of selector entropies.
/// Zero exactly when every selector output is one-hot.
pub fn omega_static(params: &StaticDSelectParams) -> f64 {
    let s = params.s_of_z();
    (0..params.k).map(|i| entropy_unchecked(&selector(s.row(i)))).sum()
}

/// Per-example entropy regularizer for one input.
pub fn omega_per_example(params: &PerExampleDSelectParams, x: &[f64]) -> Result<f64, GateError> {
    let out = dselect_per_example(params, x)?;
    Ok(out.selector_outputs.iter().map(|r| entropy_unchecked(r)).sum())
}

/// Penalty discouraging probability mass on encoding slots with no expert:
/// `xi / max(mass on real experts, floor)`. Zero when `2^m == n`.
pub fn phantom_penalty(selector_output: &[f64], n: usize, xi: f64) -> f64 {
    if selector_output.len() <= n {
        return 0.0;
    }
    let real_mass: f64 = selector_output[..n].iter().sum();
    xi / real_mass.max(PHANTOM_DENOM_FLOOR)
}

/// Encoding variables drawn uniformly from `(-gamma/4, gamma/4)`, strictly
/// inside the fractional region of the smooth-step.
pub fn init_z<R: Rng>(k: usize, m: usize, gamma: f64, rng: &mut R) -> Result<Tensor, GateError> {
    if gamma <= 0.0 {
        return Err(GateError::NonPositiveGamma { gamma });
    }
    let q = gamma / 4.0;
    let data: Vec<f64> = (0..k * m).map(|_| rng.random_range(-q..q)).collect();
    Ok(Tensor::new(vec![k, m], data).expect("k x m"))
}

/// Builds static gate parameters that reproduce a sparse probability vector
/// exactly: selector codes are the binary representations of the nonzero
/// indices (saturated to `+-gamma`), and the mixing logits are log-weights.
/// When the target has `s* < k` nonzeros the last selector code is repeated,
/// appearing `k - s* + 1` times in total with logits `ln(w / (k - s* + 1))`
/// so that the softmax renormalizes to the original weights.
pub fn construct_from_weights(
    w: &[f64],
    k: usize,
    gamma: f64,
) -> Result<StaticDSelectParams, GateError> {
    let n = w.len();
    if n < 2 || !n.is_power_of_two() {
        return Err(GateError::NotPowerOfTwo { n });
    }
    if gamma <= 0.0 {
        return Err(GateError::NonPositiveGamma { gamma });
    }
    let mut sum = 0.0;
    for &v in w {
        if v < 0.0 {
            return Err(GateError::NotOnSimplex { detail: format!("negative entry {}", v) });
        }
        sum += v;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(GateError::NotOnSimplex { detail: format!("entries sum to {}", sum) });
    }
    if k < 1 || k > n {
        return Err(GateError::BadParams { detail: format!("need 1 <= k <= n, got k={}", k) });
    }

    // Nonzero indices ordered by descending weight, ties by ascending index.
    let mut nonzero: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
    nonzero.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    let s_star = nonzero.len();
    if s_star > k {
        return Err(GateError::TooManyNonzeros { count: s_star, k });
    }

    let m = ceil_log2(n);
    let mut z_data = Vec::with_capacity(k * m);
    let mut alpha = Vec::with_capacity(k);
    for i in 0..k {
        let expert = nonzero[i.min(s_star - 1)];
        for bit in 0..m {
            z_data.push(if expert >> bit & 1 == 1 { gamma } else { -gamma });
        }
        if s_star == k || i + 1 < s_star {
            alpha.push(w[expert].ln());
        } else {
            alpha.push((w[nonzero[s_star - 1]] / (k - s_star + 1) as f64).ln());
        }
    }
    StaticDSelectParams::new(n, k, gamma, 0.0, 0.0, alpha, Tensor::new(vec![k, m], z_data).expect("k x m"))
}

// --- graph builders -----------------------------------------------------------

/// Node handles produced by [`build_static_dselect`].
pub struct StaticDselectNodes {
    pub alpha: NodeId,
    pub z: NodeId,
    /// `S(Z)`, shape `[k, m]`.
    pub s_of_z: NodeId,
    /// Selector outputs, each `[2^m]`.
    pub selectors: Vec<NodeId>,
    /// Gate output over the n real experts, `[n]`.
    pub weights: NodeId,
    /// Mass on phantom slots (scalar; literal zero when n is a power of two).
    pub phantom_mass: NodeId,
    /// Entropy regularizer (unweighted), scalar.
    pub omega: NodeId,
    /// Phantom penalty already scaled by xi, scalar.
    pub phantom_penalty: NodeId,
}

/// Builds the selector product tree over already-smoothed encoding variables.
/// Accepts `[m]` (static) or `[batch, m]` (per-example) and returns `[2^m]`
/// or `[batch, 2^m]` accordingly.
pub fn build_selector(g: &mut ExprGraph, s: NodeId) -> Result<NodeId, GraphError> {
    let shape = g.shape(s).to_vec();
    let (batched, m) = match shape.len() {
        1 => (None, shape[0]),
        2 => (Some(shape[0]), shape[1]),
        _ => {
            return Err(GraphError::InvalidOp {
                detail: "selector input must be rank 1 or 2".into(),
            })
        }
    };
    let one = g.scalar(1.0);
    let mut r = match batched {
        None => g.lit(Tensor::vector(vec![1.0])),
        Some(b) => g.lit(Tensor::filled(&[b, 1], 1.0)),
    };
    for j in 0..m {
        let sj = match batched {
            None => g.slice(s, 0, j, j + 1)?,
            Some(_) => g.slice(s, 1, j, j + 1)?,
        };
        let not_sj = g.sub(one, sj)?;
        let low = g.mul(r, not_sj)?;
        let high = g.mul(r, sj)?;
        let axis = if batched.is_some() { 1 } else { 0 };
        r = g.concat(&[low, high], axis)?;
    }
    Ok(r)
}

/// Assembles the static DSelect-k gate in a graph. `gamma` is a scalar node
/// (typically a frozen leaf, so schedules can re-bind it); `xi` scales the
/// phantom penalty when n is not a power of two.
pub fn build_static_dselect(
    g: &mut ExprGraph,
    prefix: &str,
    n: usize,
    k: usize,
    gamma: NodeId,
    xi: f64,
) -> Result<StaticDselectNodes, GraphError> {
    let m = ceil_log2(n);
    let slots = 1usize << m;
    let alpha = g.leaf(&format!("{prefix}.alpha"), &[k], true)?;
    let z = g.leaf(&format!("{prefix}.z"), &[k, m], true)?;
    let s_of_z = g.smooth_step(z, gamma)?;
    let mix = g.softmax(alpha)?;

    let mut selectors = Vec::with_capacity(k);
    let mut rows = Vec::with_capacity(k);
    for i in 0..k {
        let zi = g.slice(s_of_z, 0, i, i + 1)?;
        let zi_flat = g.reshape(zi, &[m])?;
        let r = build_selector(g, zi_flat)?;
        selectors.push(r);
        rows.push(g.reshape(r, &[1, slots])?);
    }
    let stacked = g.concat(&rows, 0)?; // [k, 2^m]
    let full = g.matmul(mix, stacked)?; // [2^m]

    let (weights, phantom_mass) = if slots > n {
        let w = g.slice(full, 0, 0, n)?;
        let ph = g.slice(full, 0, n, slots)?;
        (w, g.sum_all(ph)?)
    } else {
        (full, g.scalar(0.0))
    };

    let omega = build_entropy_sum(g, &selectors)?;
    let phantom_penalty = build_phantom_penalty(g, &selectors, n, slots, xi)?;

    Ok(StaticDselectNodes { alpha, z, s_of_z, selectors, weights, phantom_mass, omega, phantom_penalty })
}

fn build_entropy_sum(g: &mut ExprGraph, selectors: &[NodeId]) -> Result<NodeId, GraphError> {
    let mut terms = Vec::with_capacity(selectors.len());
    for &r in selectors {
        let xl = g.xlogx(r)?;
        let s = g.sum_all(xl)?;
        terms.push(g.neg(s)?);
    }
    g.add_n(&terms)
}

fn build_phantom_penalty(
    g: &mut ExprGraph,
    selectors: &[NodeId],
    n: usize,
    slots: usize,
    xi: f64,
) -> Result<NodeId, GraphError> {
    if slots <= n || xi == 0.0 {
        return Ok(g.scalar(0.0));
    }
    let floor = g.scalar(PHANTOM_DENOM_FLOOR);
    let mut terms = Vec::with_capacity(selectors.len());
    for &r in selectors {
        let batched = g.shape(r).len() == 2;
        let mass = if batched {
            let real = g.slice(r, 1, 0, n)?;
            g.sum_last_axis(real)?
        } else {
            let real = g.slice(r, 0, 0, n)?;
            g.sum_all(real)?
        };
        // max(mass, floor) = relu(mass - floor) + floor
        let shifted = g.sub(mass, floor)?;
        let pos = g.relu(shifted)?;
        let clamped = g.add(pos, floor)?;
        // 1 / x = exp(-ln x)
        let ln = g.log(clamped)?;
        let neg = g.neg(ln)?;
        let recip = g.exp(neg)?;
        let term = if batched { g.mean_all(recip)? } else { recip };
        terms.push(term);
    }
    let total = g.add_n(&terms)?;
    g.scalar_mul(total, xi)
}

/// Node handles produced by [`build_per_example_dselect`].
pub struct PerExampleDselectNodes {
    /// Gate weights per example, `[batch, n]`.
    pub weights: NodeId,
    /// Selector outputs per example, each `[batch, 2^m]`.
    pub selectors: Vec<NodeId>,
    /// Softmax mixture weights per example, `[batch, k]`.
    pub mix: NodeId,
    /// Batch-mean entropy regularizer (unweighted), scalar.
    pub omega_mean: NodeId,
    /// Batch-mean phantom mass, scalar.
    pub phantom_mass_mean: NodeId,
    /// Batch-mean phantom penalty scaled by xi, scalar.
    pub phantom_penalty: NodeId,
}

/// Assembles the per-example DSelect-k gate: mixing logits `G x (+ bias)` and
/// encoding variables `W^(i) x (+ bias)` feed the same selector machinery.
pub fn build_per_example_dselect(
    g: &mut ExprGraph,
    prefix: &str,
    x: NodeId,
    n: usize,
    k: usize,
    with_bias: bool,
    gamma: NodeId,
    xi: f64,
) -> Result<PerExampleDselectNodes, GraphError> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 2 {
        return Err(GraphError::InvalidOp { detail: "per-example gate input must be [batch, p]".into() });
    }
    let p = xs[1];
    let m = ceil_log2(n);
    let slots = 1usize << m;

    let gmat = g.leaf(&format!("{prefix}.g"), &[k, p], true)?;
    let mut logits = g.matmul_nt(x, gmat)?; // [B, k]
    if with_bias {
        let gb = g.leaf(&format!("{prefix}.g_bias"), &[k], true)?;
        logits = g.add(logits, gb)?;
    }
    let mix = g.softmax(logits)?; // [B, k]

    let mut selectors = Vec::with_capacity(k);
    let mut terms = Vec::with_capacity(k);
    for i in 0..k {
        let wi = g.leaf(&format!("{prefix}.w{i}"), &[m, p], true)?;
        let mut zi = g.matmul_nt(x, wi)?; // [B, m]
        if with_bias {
            let wb = g.leaf(&format!("{prefix}.w{i}_bias"), &[m], true)?;
            zi = g.add(zi, wb)?;
        }
        let si = g.smooth_step(zi, gamma)?;
        let ri = build_selector(g, si)?; // [B, 2^m]
        selectors.push(ri);
        let mix_i = g.slice(mix, 1, i, i + 1)?; // [B, 1]
        terms.push(g.mul(ri, mix_i)?);
    }
    let full = g.add_n(&terms)?; // [B, 2^m]

    let (weights, phantom_mass_mean) = if slots > n {
        let w = g.slice(full, 1, 0, n)?;
        let ph = g.slice(full, 1, n, slots)?;
        let per_row = g.sum_last_axis(ph)?;
        (w, g.mean_all(per_row)?)
    } else {
        (full, g.scalar(0.0))
    };

    // Batch-mean of the per-example entropy sum.
    let mut ent_terms = Vec::with_capacity(k);
    for &r in &selectors {
        let xl = g.xlogx(r)?;
        let per_row = g.sum_last_axis(xl)?; // [B]
        let mean = g.mean_all(per_row)?;
        ent_terms.push(g.neg(mean)?);
    }
    let omega_mean = g.add_n(&ent_terms)?;

    let phantom_penalty = build_phantom_penalty(g, &selectors, n, slots, xi)?;

    Ok(PerExampleDselectNodes { weights, selectors, mix, omega_mean, phantom_mass_mean, phantom_penalty })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Bindings;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{} vs {} (tol {})", a, b, tol);
    }

    #[test]
    fn smooth_step_examples() {
        assert_eq!(smooth_step(0.0, 1.0).unwrap(), 0.5);
        assert_eq!(smooth_step(0.5, 1.0).unwrap(), 1.0);
        assert_eq!(smooth_step(0.25, 1.0).unwrap(), 0.84375);
        assert!(smooth_step(0.0, 0.0).is_err());
        assert!(smooth_step(0.0, -1.0).is_err());
    }

    #[test]
    fn binary_support_examples() {
        assert!(binary_support(0).is_empty());
        assert_eq!(binary_support(3), BTreeSet::from([1, 2]));
        assert_eq!(binary_support(5), BTreeSet::from([1, 3]));
        assert_eq!(binary_support(1), BTreeSet::from([1]));
        assert_eq!(binary_support(2), BTreeSet::from([2]));
    }

    #[test]
    fn selector_examples() {
        assert_eq!(selector(&[0.0, 0.0]), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(selector(&[1.0, 1.0]), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(selector(&[0.5, 0.5]), vec![0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn selector_matches_product_formula() {
        // Cross-check the recursive construction against the literal product
        // over binary supports.
        let z = [0.3, 0.9, 0.1];
        let r = selector(&z);
        for (i, &v) in r.iter().enumerate() {
            let support = binary_support(i as u64);
            let mut expect = 1.0;
            for j in 1..=z.len() {
                if support.contains(&j) {
                    expect *= z[j - 1];
                } else {
                    expect *= 1.0 - z[j - 1];
                }
            }
            assert_close(v, expect, 1e-15);
        }
    }

    #[test]
    fn selector_exact_one_hot_for_all_binary_codes() {
        for m in 1..=5usize {
            for code in 0..(1u64 << m) {
                let z: Vec<f64> = (0..m).map(|b| ((code >> b) & 1) as f64).collect();
                let r = selector(&z);
                for (i, &v) in r.iter().enumerate() {
                    let expect = if i as u64 == code { 1.0 } else { 0.0 };
                    assert_eq!(v, expect, "m={} code={} slot={}", m, code, i);
                }
            }
        }
    }

    #[test]
    fn dselect_static_examples() {
        // Single selector saturated at code 11 -> expert 4.
        let z = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let p = StaticDSelectParams::new(4, 1, 1.0, 0.0, 0.0, vec![0.0], z).unwrap();
        let out = dselect_static(&p);
        assert_eq!(out.weights, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(out.phantom_mass, 0.0);

        // Two selectors on the same expert: 0.5 + 0.5 on expert 1.
        let z = Tensor::matrix(2, 2, vec![-1.0, -1.0, -1.0, -1.0]).unwrap();
        let p = StaticDSelectParams::new(4, 2, 1.0, 0.0, 0.0, vec![0.0, 0.0], z).unwrap();
        let out = dselect_static(&p);
        assert_eq!(out.weights, vec![1.0, 0.0, 0.0, 0.0]);

        // Always on the simplex.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let p = StaticDSelectParams::init(4, 2, 1.0, 0.0, 0.0, &mut rng).unwrap();
            let out = dselect_static(&p);
            assert_close(out.total_mass(), 1.0, 1e-9);
            assert!(out.weights.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn dselect_per_example_examples() {
        // Zero maps, no biases: uniform mixing and uniform selectors.
        let p = PerExampleDSelectParams::new(
            4,
            2,
            3,
            1.0,
            0.0,
            0.0,
            Tensor::zeros(&[2, 3]),
            None,
            vec![Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 3])],
            None,
        )
        .unwrap();
        let out = dselect_per_example(&p, &[0.4, -0.2, 1.0]).unwrap();
        for &w in &out.weights {
            assert_close(w, 0.25, 1e-12);
        }

        // Saturated encodings select at most k experts.
        let w0 = Tensor::matrix(2, 1, vec![10.0, -10.0]).unwrap();
        let w1 = Tensor::matrix(2, 1, vec![10.0, 10.0]).unwrap();
        let p = PerExampleDSelectParams::new(
            4,
            2,
            1,
            1.0,
            0.0,
            0.0,
            Tensor::zeros(&[2, 1]),
            None,
            vec![w0, w1],
            None,
        )
        .unwrap();
        let out = dselect_per_example(&p, &[1.0]).unwrap();
        assert!(out.support().len() <= 2);
        assert_close(out.total_mass(), 1.0, 1e-9);

        // Dimension mismatch is an error.
        assert!(dselect_per_example(&p, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_close(entropy(&[0.25; 4]).unwrap(), 4.0f64.ln(), 1e-12);
        assert_close(entropy(&[0.5, 0.5]).unwrap(), 2.0f64.ln(), 1e-12);
        assert!(entropy(&[-0.1, 1.1]).is_err());
        assert!(entropy(&[0.4, 0.4]).is_err());
    }

    #[test]
    fn omega_static_examples() {
        // Binary S(Z) -> 0.
        let z = Tensor::matrix(2, 2, vec![1.0, 1.0, -1.0, 1.0]).unwrap();
        let p = StaticDSelectParams::new(4, 2, 1.0, 0.0, 0.0, vec![0.0, 0.0], z).unwrap();
        assert_eq!(omega_static(&p), 0.0);
        assert!(p.s_of_z_is_binary());

        // One uniform selector (m=2): ln 4.
        let z = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let p = StaticDSelectParams::new(4, 1, 1.0, 0.0, 0.0, vec![0.0], z).unwrap();
        assert_close(omega_static(&p), 4.0f64.ln(), 1e-12);

        // One binary row plus one uniform row: 0 + ln 4.
        let z = Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let p = StaticDSelectParams::new(4, 2, 1.0, 0.0, 0.0, vec![0.0, 0.0], z).unwrap();
        assert_close(omega_static(&p), 4.0f64.ln(), 1e-12);
    }

    #[test]
    fn omega_per_example_uniform_case() {
        // W = 0, no biases: each selector uniform over 2^m, entropy m ln 2.
        let (n, k, p_dim) = (8, 3, 5);
        let m = ceil_log2(n);
        let p = PerExampleDSelectParams::new(
            n,
            k,
            p_dim,
            1.0,
            0.0,
            0.0,
            Tensor::zeros(&[k, p_dim]),
            None,
            (0..k).map(|_| Tensor::zeros(&[m, p_dim])).collect(),
            None,
        )
        .unwrap();
        let val = omega_per_example(&p, &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_close(val, (k * m) as f64 * 2.0f64.ln(), 1e-12);

        // Saturating biases drive it to exactly zero.
        let p = PerExampleDSelectParams::new(
            n,
            k,
            p_dim,
            1.0,
            0.0,
            0.0,
            Tensor::zeros(&[k, p_dim]),
            None,
            (0..k).map(|_| Tensor::zeros(&[m, p_dim])).collect(),
            Some(vec![vec![10.0; m]; k]),
        )
        .unwrap();
        assert_eq!(omega_per_example(&p, &[0.0; 5]).unwrap(), 0.0);
    }

    #[test]
    fn phantom_penalty_examples() {
        let mut r = vec![0.0; 8];
        r[0] = 1.0;
        assert_eq!(phantom_penalty(&r, 6, 3.0), 3.0);
        let mut r = vec![0.0; 8];
        r[0] = 0.5;
        r[7] = 0.5;
        assert_eq!(phantom_penalty(&r, 6, 2.0), 4.0);
        assert_eq!(phantom_penalty(&[0.25; 4], 4, 2.0), 0.0);
        // Denominator floor caps the blow-up.
        let r = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5];
        assert_eq!(phantom_penalty(&r, 6, 1.0), 1.0 / PHANTOM_DENOM_FLOOR);
    }

    #[test]
    fn construct_from_weights_examples() {
        // One-hot, k = 1.
        let p = construct_from_weights(&[1.0, 0.0, 0.0, 0.0], 1, 1.0).unwrap();
        assert_eq!(p.alpha, vec![0.0]);
        assert_eq!(p.z.row(0), &[-1.0, -1.0]);
        assert_eq!(dselect_static(&p).weights, vec![1.0, 0.0, 0.0, 0.0]);

        // Two distinct experts.
        let p = construct_from_weights(&[0.5, 0.0, 0.5, 0.0], 2, 1.0).unwrap();
        let out = dselect_static(&p);
        for (got, want) in out.weights.iter().zip([0.5, 0.0, 0.5, 0.0]) {
            assert_close(*got, want, 1e-12);
        }
        assert_close(p.alpha[0], 0.5f64.ln(), 1e-12);
        assert_close(p.alpha[1], 0.5f64.ln(), 1e-12);
        // Expert 0 -> code 00; expert 2 -> code 10 (z1 clear, z2 set), saturated.
        assert_eq!(p.z.row(0), &[-1.0, -1.0]);
        assert_eq!(p.z.row(1), &[-1.0, 1.0]);

        // s* < k: the repeated selector uses denominator k - s* + 1.
        let p = construct_from_weights(&[1.0, 0.0, 0.0, 0.0], 2, 1.0).unwrap();
        assert_close(p.alpha[0], 0.5f64.ln(), 1e-12);
        assert_close(p.alpha[1], 0.5f64.ln(), 1e-12);
        let out = dselect_static(&p);
        for (got, want) in out.weights.iter().zip([1.0, 0.0, 0.0, 0.0]) {
            assert_close(*got, want, 1e-12);
        }

        // Error paths.
        assert!(construct_from_weights(&[0.5, 0.5, 0.0], 2, 1.0).is_err()); // n = 3
        assert!(construct_from_weights(&[0.4, 0.4, 0.1, 0.1], 2, 1.0).is_err()); // too many nonzeros
        assert!(construct_from_weights(&[0.7, 0.2, 0.0, 0.0], 2, 1.0).is_err()); // off simplex
    }

    #[test]
    fn construct_round_trip_random_sparse_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _case in 0..100 {
            let n = [4usize, 8, 16][rng.random_range(0..3)];
            let k = rng.random_range(1..=4usize.min(n));
            // Random support of size up to k (covers s* < k).
            let s = rng.random_range(1..=k);
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..s {
                let j = rng.random_range(i..n);
                idx.swap(i, j);
            }
            let mut w = vec![0.0; n];
            let mut raw: Vec<f64> = (0..s).map(|_| rng.random_range(0.05..1.0)).collect();
            let tot: f64 = raw.iter().sum();
            for r in raw.iter_mut() {
                *r /= tot;
            }
            for (&i, &r) in idx[..s].iter().zip(raw.iter()) {
                w[i] = r;
            }
            // Fix rounding so the simplex check passes exactly.
            let sum: f64 = w.iter().sum();
            w[idx[0]] += 1.0 - sum;
            let p = construct_from_weights(&w, k, 1.0).unwrap();
            let out = dselect_static(&p);
            let max_err = out
                .weights
                .iter()
                .zip(&w)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_err < 1e-9, "round-trip error {} for w={:?} k={}", max_err, w, k);
            assert!(p.s_of_z_is_binary());
        }
    }

    #[test]
    fn init_z_stays_in_fractional_region_and_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = init_z(4, 3, 1.0, &mut rng).unwrap();
        for &t in z.data() {
            assert!(t.abs() < 0.25);
            let s = smooth_step_value(t, 1.0);
            assert!(s > 0.0 && s < 1.0);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let z2 = init_z(4, 3, 1.0, &mut rng2).unwrap();
        assert_eq!(z.data(), z2.data());
    }

    #[test]
    fn cardinality_bound_under_binary_selectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let n = 16;
            let k = rng.random_range(1..=4usize);
            let m = ceil_log2(n);
            let z_data: Vec<f64> =
                (0..k * m).map(|_| if rng.random_range(0..2) == 1 { 2.0 } else { -2.0 }).collect();
            let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = StaticDSelectParams::new(
                n,
                k,
                1.0,
                0.0,
                0.0,
                alpha,
                Tensor::new(vec![k, m], z_data).unwrap(),
            )
            .unwrap();
            let out = dselect_static(&p);
            assert!(out.support().len() <= k);
            assert!(out.selector_outputs.iter().all(|r| r.iter().all(|&v| v == 0.0 || v == 1.0)));
        }
    }

    #[test]
    fn omega_zero_iff_selectors_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = StaticDSelectParams::init(8, 2, 1.0, 0.0, 0.0, &mut rng).unwrap();
            let binary = p.s_of_z_is_binary();
            let omega = omega_static(&p);
            if binary {
                assert_eq!(omega, 0.0);
            } else {
                assert!(omega > 0.0);
            }
        }
        // Forced binary case.
        let z = Tensor::matrix(2, 3, vec![5.0, -5.0, 5.0, -5.0, -5.0, -5.0]).unwrap();
        let p = StaticDSelectParams::new(8, 2, 1.0, 0.0, 0.0, vec![0.0, 0.0], z).unwrap();
        assert_eq!(omega_static(&p), 0.0);
    }

    #[test]
    fn graph_static_gate_matches_plain_math() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &(n, k) in &[(4usize, 2usize), (8, 3), (6, 2), (16, 4)] {
            let params = StaticDSelectParams::init(n, k, 1.0, 0.0, 0.0, &mut rng).unwrap();
            let plain = dselect_static(&params);

            let mut g = ExprGraph::new();
            let gamma = g.leaf("gamma", &[], false).unwrap();
            let nodes = build_static_dselect(&mut g, "gate", n, k, gamma, 1.0).unwrap();
            let alpha_t = Tensor::vector(params.alpha.clone());
            let gamma_t = Tensor::scalar(params.gamma);
            let mut b = Bindings::new();
            b.insert("gate.alpha", &alpha_t);
            b.insert("gate.z", &params.z);
            b.insert("gamma", &gamma_t);
            let trace = g.evaluate(&b).unwrap();
            let w = trace.value(nodes.weights);
            for (a, bv) in w.data().iter().zip(&plain.weights) {
                assert_close(*a, *bv, 1e-12);
            }
            assert_close(trace.value(nodes.phantom_mass).item(), plain.phantom_mass, 1e-12);
            assert_close(trace.value(nodes.omega).item(), omega_static(&params), 1e-12);
            if (1usize << ceil_log2(n)) > n {
                let expect: f64 = plain
                    .selector_outputs
                    .iter()
                    .map(|r| phantom_penalty(r, n, 1.0))
                    .sum();
                assert_close(trace.value(nodes.phantom_penalty).item(), expect, 1e-9);
            }
        }
    }

    #[test]
    fn graph_per_example_gate_matches_plain_math() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, k, p_dim, batch) = (8usize, 2usize, 5usize, 4usize);
        let m = ceil_log2(n);
        let gmat = Tensor::new(
            vec![k, p_dim],
            (0..k * p_dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        let w: Vec<Tensor> = (0..k)
            .map(|_| {
                Tensor::new(
                    vec![m, p_dim],
                    (0..m * p_dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
                )
                .unwrap()
            })
            .collect();
        let params = PerExampleDSelectParams::new(
            n,
            k,
            p_dim,
            1.0,
            0.0,
            0.0,
            gmat.clone(),
            None,
            w.clone(),
            None,
        )
        .unwrap();

        let xs: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..p_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();

        let mut g = ExprGraph::new();
        let x = g.leaf("x", &[batch, p_dim], false).unwrap();
        let gamma = g.leaf("gamma", &[], false).unwrap();
        let nodes = build_per_example_dselect(&mut g, "gate", x, n, k, false, gamma, 0.0).unwrap();
        let x_t = Tensor::new(vec![batch, p_dim], xs.iter().flatten().cloned().collect()).unwrap();
        let gamma_t = Tensor::scalar(1.0);
        let names: Vec<String> = (0..k).map(|i| format!("gate.w{i}")).collect();
        let mut b = Bindings::new();
        b.insert("x", &x_t);
        b.insert("gamma", &gamma_t);
        b.insert("gate.g", &gmat);
        for (name, wi) in names.iter().zip(w.iter()) {
            b.insert(name, wi);
        }
        let trace = g.evaluate(&b).unwrap();

        let mut omega_sum = 0.0;
        for (r, xrow) in xs.iter().enumerate() {
            let plain = dselect_per_example(&params, xrow).unwrap();
            for (j, &want) in plain.weights.iter().enumerate() {
                assert_close(trace.value(nodes.weights).at(r, j), want, 1e-12);
            }
            omega_sum += omega_per_example(&params, xrow).unwrap();
        }
        assert_close(trace.value(nodes.omega_mean).item(), omega_sum / batch as f64, 1e-12);
    }

    #[test]
    fn zero_gradient_at_exact_saturation() {
        // One saturated entry, one interior entry; any downstream scalar has
        // exactly zero gradient with respect to the saturated variable.
        let mut g = ExprGraph::new();
        let gamma = g.scalar(1.0);
        let nodes = build_static_dselect(&mut g, "gate", 4, 1, gamma, 0.0).unwrap();
        let probe = g.lit(Tensor::vector(vec![0.3, -0.7, 1.9, 0.4]));
        let weighted = g.mul(nodes.weights, probe).unwrap();
        let dot = g.sum_all(weighted).unwrap();
        let omega_scaled = g.scalar_mul(nodes.omega, 0.5).unwrap();
        let loss = g.add(dot, omega_scaled).unwrap();

        let alpha_t = Tensor::vector(vec![0.0]);
        let z_t = Tensor::matrix(1, 2, vec![0.75, 0.1]).unwrap(); // S(0.75) = 1 exactly
        let mut b = Bindings::new();
        b.insert("gate.alpha", &alpha_t);
        b.insert("gate.z", &z_t);
        let grads = g.gradient(loss, &b).unwrap();
        let dz = &grads["gate.z"];
        assert_eq!(dz.at(0, 0), 0.0);
        assert_ne!(dz.at(0, 1), 0.0);
    }
}

//! Sparse mixture-of-experts layer: top-K gating over a linear gate,
//! two-layer GELU feed-forward experts, and the softmax-weighted
//! combination of the selected experts, with forward and backward passes.

pub mod stack;

use std::cmp::Ordering;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use rand::Rng;

use crate::error::{GzslError, Result};
use crate::numerics::activation::{gelu_prime, gelu_vec};
use crate::numerics::loss::softmax;
use crate::numerics::matrix::{axpy, dot, Matrix};
use crate::numerics::tape::GradTape;

pub use stack::{LinearParams, Stack, StackLayer, StackTrace};

/// Counts expert evaluations, so tests can assert the sparsity contract
/// (non-selected experts are never run).
static EXPERT_EVALS: AtomicU64 = AtomicU64::new(0);

pub fn expert_eval_count() -> u64 {
    EXPERT_EVALS.load(AtomicOrdering::Relaxed)
}

/// Glorot-uniform init: `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// One expert: two feed-forward layers with GELU between them.
#[derive(Debug, Clone)]
pub struct ExpertParams {
    /// `d_in x d_hidden`
    pub w1: Matrix,
    /// `1 x d_hidden`
    pub b1: Matrix,
    /// `d_hidden x d_out`
    pub w2: Matrix,
    /// `1 x d_out`
    pub b2: Matrix,
}

impl ExpertParams {
    pub fn init(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        ExpertParams {
            w1: glorot_uniform(d_in, d_hidden, rng),
            b1: Matrix::zeros(1, d_hidden),
            w2: glorot_uniform(d_hidden, d_out, rng),
            b2: Matrix::zeros(1, d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w2.cols()
    }

    fn check_consistent(&self) -> Result<()> {
        if self.b1.cols() != self.d_hidden()
            || self.w2.rows() != self.d_hidden()
            || self.b2.cols() != self.d_out()
        {
            return Err(GzslError::shape(format!(
                "expert: w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                self.w1.shape(),
                self.b1.shape(),
                self.w2.shape(),
                self.b2.shape()
            )));
        }
        Ok(())
    }

    pub fn visit_params(&self, prefix: &str, f: &mut impl FnMut(&str, &Matrix)) {
        f(&format!("{prefix}w1"), &self.w1);
        f(&format!("{prefix}b1"), &self.b1);
        f(&format!("{prefix}w2"), &self.w2);
        f(&format!("{prefix}b2"), &self.b2);
    }

    pub fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut impl FnMut(&str, &mut Matrix) -> Result<()>,
    ) -> Result<()> {
        f(&format!("{prefix}w1"), &mut self.w1)?;
        f(&format!("{prefix}b1"), &mut self.b1)?;
        f(&format!("{prefix}w2"), &mut self.w2)?;
        f(&format!("{prefix}b2"), &mut self.b2)
    }
}

/// Intermediate activations of one expert evaluation, reused by the
/// backward pass.
#[derive(Debug, Clone)]
pub struct ExpertCache {
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

/// `w2^T * gelu(w1^T * x + b1) + b2`
pub fn expert_forward(expert: &ExpertParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(expert_forward_full(expert, x)?.output)
}

fn expert_forward_full(expert: &ExpertParams, x: &[f64]) -> Result<ExpertCache> {
    expert.check_consistent()?;
    EXPERT_EVALS.fetch_add(1, AtomicOrdering::Relaxed);
    let mut hidden_pre = expert.w1.tmatvec(x)?;
    axpy(&mut hidden_pre, 1.0, expert.b1.row(0));
    let hidden = gelu_vec(&hidden_pre);
    let mut output = expert.w2.tmatvec(&hidden)?;
    axpy(&mut output, 1.0, expert.b2.row(0));
    Ok(ExpertCache {
        hidden_pre,
        hidden,
        output,
    })
}

/// Backward pass of one expert from its cached activations: accumulates
/// parameter gradients into `tape` under `prefix` and returns the gradient
/// w.r.t. `x`.
fn expert_backward_cached(
    expert: &ExpertParams,
    x: &[f64],
    cache: &ExpertCache,
    upstream: &[f64],
    prefix: &str,
    tape: &mut GradTape,
) -> Result<Vec<f64>> {
    if upstream.len() != expert.d_out() {
        return Err(GzslError::shape(format!(
            "expert backward: upstream length {} vs d_out {}",
            upstream.len(),
            expert.d_out()
        )));
    }
    tape.accumulate_outer(&format!("{prefix}w2"), &cache.hidden, upstream)?;
    tape.accumulate_row(&format!("{prefix}b2"), upstream)?;
    let d_hidden = expert.w2.matvec(upstream)?;
    let d_hidden_pre: Vec<f64> = d_hidden
        .iter()
        .zip(&cache.hidden_pre)
        .map(|(&g, &h)| g * gelu_prime(h))
        .collect();
    tape.accumulate_outer(&format!("{prefix}w1"), x, &d_hidden_pre)?;
    tape.accumulate_row(&format!("{prefix}b1"), &d_hidden_pre)?;
    expert.w1.matvec(&d_hidden_pre)
}

/// A full sparse MoE layer: gate matrix plus `M` experts, of which `K` are
/// selected per input.
#[derive(Debug, Clone)]
pub struct MoeLayerParams {
    pub top_k: usize,
    /// `d_in x M`
    pub gate_weights: Matrix,
    pub experts: Vec<ExpertParams>,
}

impl MoeLayerParams {
    pub fn init(
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        num_experts: usize,
        top_k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_experts == 0 {
            return Err(GzslError::arg("a MoE layer needs at least one expert"));
        }
        if top_k == 0 || top_k > num_experts {
            return Err(GzslError::arg(format!(
                "top_k must satisfy 1 <= K <= M, got K={top_k}, M={num_experts}"
            )));
        }
        let gate_weights = glorot_uniform(d_in, num_experts, rng);
        let experts = (0..num_experts)
            .map(|_| ExpertParams::init(d_in, d_hidden, d_out, rng))
            .collect();
        Ok(MoeLayerParams {
            top_k,
            gate_weights,
            experts,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_in(&self) -> usize {
        self.gate_weights.rows()
    }

    pub fn d_out(&self) -> usize {
        self.experts[0].d_out()
    }

    pub fn visit_params(&self, prefix: &str, f: &mut impl FnMut(&str, &Matrix)) {
        f(&format!("{prefix}gate"), &self.gate_weights);
        for (m, expert) in self.experts.iter().enumerate() {
            expert.visit_params(&format!("{prefix}expert{m}."), f);
        }
    }

    pub fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut impl FnMut(&str, &mut Matrix) -> Result<()>,
    ) -> Result<()> {
        f(&format!("{prefix}gate"), &mut self.gate_weights)?;
        for (m, expert) in self.experts.iter_mut().enumerate() {
            expert.visit_params_mut(&format!("{prefix}expert{m}."), f)?;
        }
        Ok(())
    }
}

/// Routing outcome for one input: the selected expert indices (strictly
/// ascending) and the length-`M` weight vector with exactly `K` nonzeros.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Top-K gate: logits `l = x * Wg`; all but the K largest logits are set to
/// `-inf` and a softmax over the masked vector gives the weights.
///
/// Ties at the K-th rank are broken toward the lower expert index.
pub fn gate(x: &[f64], gate_weights: &Matrix, top_k: usize) -> Result<GateDecision> {
    let num_experts = gate_weights.cols();
    if top_k == 0 {
        return Err(GzslError::arg("top_k must be at least 1"));
    }
    if top_k > num_experts {
        return Err(GzslError::arg(format!(
            "top_k {top_k} exceeds expert count {num_experts}"
        )));
    }
    let logits = gate_weights.tmatvec(x)?;
    let mut order: Vec<usize> = (0..num_experts).collect();
    order.sort_unstable_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut selected = order[..top_k].to_vec();
    selected.sort_unstable();
    let mut masked = vec![f64::NEG_INFINITY; num_experts];
    for &i in &selected {
        masked[i] = logits[i];
    }
    let weights = softmax(&masked)?;
    Ok(GateDecision { selected, weights })
}

/// Cached activations of a MoE forward pass, aligned with the decision's
/// selected indices.
#[derive(Debug, Clone)]
pub struct MoeCache {
    pub experts: Vec<ExpertCache>,
}

/// Weighted sum of the selected experts' outputs. Non-selected experts are
/// never evaluated.
pub fn moe_forward(layer: &MoeLayerParams, x: &[f64]) -> Result<(Vec<f64>, GateDecision)> {
    let (out, decision, _) = moe_forward_with_cache(layer, x)?;
    Ok((out, decision))
}

pub(crate) fn moe_forward_with_cache(
    layer: &MoeLayerParams,
    x: &[f64],
) -> Result<(Vec<f64>, GateDecision, MoeCache)> {
    let decision = gate(x, &layer.gate_weights, layer.top_k)?;
    let mut out = vec![0.0; layer.d_out()];
    let mut experts = Vec::with_capacity(decision.selected.len());
    for &m in &decision.selected {
        let cache = expert_forward_full(&layer.experts[m], x)?;
        axpy(&mut out, decision.weights[m], &cache.output);
        experts.push(cache);
    }
    Ok((out, decision, MoeCache { experts }))
}

fn check_decision(layer: &MoeLayerParams, decision: &GateDecision) -> Result<()> {
    let m = layer.num_experts();
    if decision.weights.len() != m
        || decision.selected.len() != layer.top_k
        || decision.selected.iter().any(|&i| i >= m)
    {
        return Err(GzslError::shape(format!(
            "stale gate decision: {} selected / {} weights for a layer with M={m}, K={}",
            decision.selected.len(),
            decision.weights.len(),
            layer.top_k
        )));
    }
    Ok(())
}

/// Backward pass of [`moe_forward`], given the decision it produced.
///
/// The selection set is treated as constant: gradients reach the selected
/// experts' parameters, the gate matrix through the softmax over the kept
/// logits (masked logits get exactly zero gradient), and the input through
/// both paths. Non-selected experts receive no gradient entries at all.
pub fn moe_backward(
    layer: &MoeLayerParams,
    x: &[f64],
    upstream: &[f64],
    decision: &GateDecision,
) -> Result<(GradTape, Vec<f64>)> {
    let mut tape = GradTape::new();
    let dx = moe_backward_into(layer, x, upstream, decision, "", &mut tape)?;
    Ok((tape, dx))
}

/// [`moe_backward`] variant that accumulates into an existing tape under a
/// parameter-id prefix. Recomputes the selected experts' activations from
/// the decision.
pub fn moe_backward_into(
    layer: &MoeLayerParams,
    x: &[f64],
    upstream: &[f64],
    decision: &GateDecision,
    prefix: &str,
    tape: &mut GradTape,
) -> Result<Vec<f64>> {
    check_decision(layer, decision)?;
    if x.len() != layer.d_in() {
        return Err(GzslError::shape(format!(
            "moe backward: input length {} vs d_in {}",
            x.len(),
            layer.d_in()
        )));
    }
    let mut experts = Vec::with_capacity(decision.selected.len());
    for &m in &decision.selected {
        experts.push(expert_forward_full(&layer.experts[m], x)?);
    }
    moe_backward_with_cache(layer, x, upstream, decision, &MoeCache { experts }, prefix, tape)
}

/// Backward pass reusing the cached activations of the matching forward.
pub(crate) fn moe_backward_with_cache(
    layer: &MoeLayerParams,
    x: &[f64],
    upstream: &[f64],
    decision: &GateDecision,
    cache: &MoeCache,
    prefix: &str,
    tape: &mut GradTape,
) -> Result<Vec<f64>> {
    check_decision(layer, decision)?;
    if upstream.len() != layer.d_out() {
        return Err(GzslError::shape(format!(
            "moe backward: upstream length {} vs d_out {}",
            upstream.len(),
            layer.d_out()
        )));
    }
    if cache.experts.len() != decision.selected.len() {
        return Err(GzslError::shape(format!(
            "moe backward: cache covers {} experts, decision selected {}",
            cache.experts.len(),
            decision.selected.len()
        )));
    }

    let mut dx = vec![0.0; x.len()];
    let mut d_weight = vec![0.0; layer.num_experts()];
    for (slot, &m) in decision.selected.iter().enumerate() {
        let expert = &layer.experts[m];
        let expert_cache = &cache.experts[slot];
        d_weight[m] = dot(upstream, &expert_cache.output);
        let w = decision.weights[m];
        let dy: Vec<f64> = upstream.iter().map(|&u| w * u).collect();
        let dx_expert = expert_backward_cached(
            expert,
            x,
            expert_cache,
            &dy,
            &format!("{prefix}expert{m}."),
            tape,
        )?;
        axpy(&mut dx, 1.0, &dx_expert);
    }

    // Softmax over the kept logits; masked entries keep zero logit gradient.
    let weighted_sum: f64 = decision
        .selected
        .iter()
        .map(|&m| decision.weights[m] * d_weight[m])
        .sum();
    let mut d_logits = vec![0.0; layer.num_experts()];
    for &m in &decision.selected {
        d_logits[m] = decision.weights[m] * (d_weight[m] - weighted_sum);
    }
    tape.accumulate_outer(&format!("{prefix}gate"), x, &d_logits)?;
    let dx_gate = layer.gate_weights.matvec(&d_logits)?;
    axpy(&mut dx, 1.0, &dx_gate);
    Ok(dx)
}

/// Routing diagnostics over a set of decisions.
#[derive(Debug, Clone)]
pub struct ExpertLoadStats {
    /// How many decisions selected each expert.
    pub selection_counts: Vec<u64>,
    /// `selection_counts / decisions`; sums to K.
    pub selection_frequency: Vec<f64>,
    /// Mean gate weight per expert over all decisions (zeros included).
    pub mean_weight: Vec<f64>,
    pub decisions: usize,
}

pub fn expert_load_stats(decisions: &[GateDecision], num_experts: usize) -> Result<ExpertLoadStats> {
    if decisions.is_empty() {
        return Err(GzslError::arg("no decisions"));
    }
    let mut counts = vec![0u64; num_experts];
    let mut weight_sums = vec![0.0; num_experts];
    for d in decisions {
        if d.weights.len() != num_experts {
            return Err(GzslError::shape(format!(
                "decision has {} weights, expected {num_experts}",
                d.weights.len()
            )));
        }
        for &m in &d.selected {
            counts[m] += 1;
        }
        for (sum, w) in weight_sums.iter_mut().zip(&d.weights) {
            *sum += w;
        }
    }
    let n = decisions.len() as f64;
    Ok(ExpertLoadStats {
        selection_frequency: counts.iter().map(|&c| c as f64 / n).collect(),
        mean_weight: weight_sums.iter().map(|&s| s / n).collect(),
        selection_counts: counts,
        decisions: decisions.len(),
    })
}

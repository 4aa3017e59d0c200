//! Built-in verification suites: dense-oracle equivalence for the sparse
//! MoE layer, gate invariants under adversarial ties, finite-difference
//! gradient checks for every differentiable operation, and metric oracles.
//!
//! The CLI `check` subcommand and the acceptance tests both run these.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::classifier::{ClassifierConfig, ClassifierParams};
use crate::data::{ClassId, SplitConfig};
use crate::error::Result;
use crate::generator::{GeneratorConfig, GeneratorParams};
use crate::metrics::{
    build_report, harmonic_mean, iou_per_class, ConfusionMatrix,
};
use crate::moe::{expert_forward, gate, moe_backward, moe_forward, ExpertParams, MoeLayerParams, Stack, StackLayer};
use crate::numerics::activation::{gelu, gelu_prime};
use crate::numerics::gradcheck::grad_check;
use crate::numerics::loss::{
    cross_entropy, cross_entropy_backward, softmax, softmax_backward, softmax_cross_entropy_grad,
};
use crate::numerics::matrix::{dot, Matrix};
use crate::numerics::tape::GradTape;
use crate::pipeline::seed::derive_seed;

const GRAD_TOLERANCE: f64 = 1e-4;
const TIE_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckOutcome {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for check in &self.checks {
            out.push_str(&check.line());
            out.push('\n');
        }
        out
    }
}

fn rng_for(seed: u64, label: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(seed, label))
}

fn random_vec(rng: &mut ChaCha12Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Straight-line dense oracle: evaluate ALL experts, build the full masked
/// softmax weight vector, and take the weighted sum with index loops.
fn dense_masked_oracle(layer: &MoeLayerParams, x: &[f64]) -> Vec<f64> {
    let m = layer.num_experts();
    let mut logits = vec![0.0; m];
    for e in 0..m {
        let mut acc = 0.0;
        for (i, &xv) in x.iter().enumerate() {
            acc += layer.gate_weights.at(i, e) * xv;
        }
        logits[e] = acc;
    }
    // rank experts by (logit desc, index asc) and keep the top K
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let kept = &order[..layer.top_k];
    let max_kept = kept.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut weights = vec![0.0; m];
    let mut z = 0.0;
    for &i in kept {
        let w = (logits[i] - max_kept).exp();
        weights[i] = w;
        z += w;
    }
    for w in &mut weights {
        *w /= z;
    }
    let d_out = layer.d_out();
    let mut out = vec![0.0; d_out];
    for (e, expert) in layer.experts.iter().enumerate() {
        if weights[e] == 0.0 {
            continue;
        }
        let y = expert_forward(expert, x).unwrap();
        for j in 0..d_out {
            out[j] += weights[e] * y[j];
        }
    }
    out
}

/// Sparse forward vs. the evaluate-all-then-mask oracle, for both the
/// (M=8, K=2) and (M=32, K=8) configurations.
pub fn check_dense_equivalence(instances: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut outcomes = Vec::new();
    for &(m, k) in &[(8usize, 2usize), (32, 8)] {
        let name = format!("dense_equivalence_m{m}_k{k}");
        let mut rng = rng_for(seed, &name);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let layer = MoeLayerParams::init(8, 16, 8, m, k, &mut rng).unwrap();
            let x = random_vec(&mut rng, 8, -2.0, 2.0);
            let (out, _) = moe_forward(&layer, &x).unwrap();
            let oracle = dense_masked_oracle(&layer, &x);
            for (a, b) in out.iter().zip(&oracle) {
                worst = worst.max((a - b).abs());
            }
        }
        outcomes.push(CheckOutcome::new(
            &name,
            worst < 1e-9,
            format!("{instances} instances, max abs err {worst:.3e}"),
        ));
    }
    outcomes
}

/// Independent statement of the tie rule: no non-selected expert may beat a
/// selected one under (logit desc, index asc) ordering.
fn selection_respects_tie_rule(logits: &[f64], selected: &[usize]) -> bool {
    let is_selected = |i: usize| selected.contains(&i);
    for j in 0..logits.len() {
        if is_selected(j) {
            continue;
        }
        for &s in selected {
            let beats = logits[j] > logits[s] || (logits[j] == logits[s] && j < s);
            if beats {
                return false;
            }
        }
    }
    true
}

/// Gate invariants over random and adversarially tied logit vectors:
/// exactly K nonzeros summing to 1, ascending selection, deterministic
/// lowest-index tie-breaking.
pub fn check_gate_invariants(vectors: usize, seed: u64) -> CheckOutcome {
    let m = 8usize;
    let eye = Matrix::from_fn(m, m, |r, c| if r == c { 1.0 } else { 0.0 });
    let mut rng = rng_for(seed, "gate-invariants");
    let mut failures = 0usize;
    let mut detail = String::new();
    for case in 0..vectors {
        let k = 1 + case % m;
        let logits: Vec<f64> = match case % 4 {
            // smooth random logits
            0 => random_vec(&mut rng, m, -20.0, 20.0),
            // everything tied
            1 => vec![rng.random_range(-5.0..5.0); m],
            // random values drawn from a tiny discrete set: dense ties
            2 => (0..m)
                .map(|_| [0.0, 1.0, -1.0][rng.random_range(0..3usize)])
                .collect(),
            // a tie placed exactly at the K-th rank
            _ => {
                let mut v = random_vec(&mut rng, m, -3.0, 3.0);
                let mut sorted = v.clone();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let kth = sorted[k - 1];
                let dup = rng.random_range(0..m);
                v[dup] = kth;
                v
            }
        };
        let d1 = gate(&logits, &eye, k).unwrap();
        let d2 = gate(&logits, &eye, k).unwrap();
        let nonzero = d1.weights.iter().filter(|&&w| w != 0.0).count();
        let sum: f64 = d1.weights.iter().sum();
        let ascending = d1.selected.windows(2).all(|w| w[0] < w[1]);
        let ok = nonzero == k
            && (sum - 1.0).abs() < 1e-12
            && ascending
            && d1 == d2
            && d1.selected.len() == k
            && selection_respects_tie_rule(&logits, &d1.selected);
        if !ok {
            failures += 1;
            if detail.is_empty() {
                detail = format!("first failure at case {case}: logits {logits:?}, K={k}");
            }
        }
    }
    if detail.is_empty() {
        detail = format!("{vectors} vectors, 0 violations");
    }
    CheckOutcome::new("gate_invariants", failures == 0, detail)
}

/// K = M reduces to a dense softmax ensemble; compare against a separately
/// coded unmasked implementation.
pub fn check_k_equals_m(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = rng_for(seed, "k-equals-m");
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let layer = MoeLayerParams::init(6, 10, 5, 4, 4, &mut rng).unwrap();
        let x = random_vec(&mut rng, 6, -2.0, 2.0);
        let (out, _) = moe_forward(&layer, &x).unwrap();
        // dense ensemble: plain softmax over all logits, no masking
        let logits = layer.gate_weights.tmatvec(&x).unwrap();
        let weights = softmax(&logits).unwrap();
        let mut expect = vec![0.0; layer.d_out()];
        for (e, expert) in layer.experts.iter().enumerate() {
            let y = expert_forward(expert, &x).unwrap();
            for (acc, v) in expect.iter_mut().zip(&y) {
                *acc += weights[e] * v;
            }
        }
        for (a, b) in out.iter().zip(&expect) {
            worst = worst.max((a - b).abs());
        }
    }
    CheckOutcome::new(
        "k_equals_m_dense_ensemble",
        worst < 1e-12,
        format!("{instances} instances, max abs err {worst:.3e}"),
    )
}

/// Non-selected experts receive no gradient, bit-exactly (no tape entry).
pub fn check_nonselected_zero_gradient(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = rng_for(seed, "nonselected-grad");
    let mut violations = 0usize;
    for _ in 0..instances {
        let layer = MoeLayerParams::init(5, 8, 4, 6, 2, &mut rng).unwrap();
        let x = random_vec(&mut rng, 5, -2.0, 2.0);
        let upstream = random_vec(&mut rng, 4, -1.0, 1.0);
        let (_, decision) = moe_forward(&layer, &x).unwrap();
        let (tape, _) = moe_backward(&layer, &x, &upstream, &decision).unwrap();
        for e in 0..layer.num_experts() {
            let present = tape.get(&format!("expert{e}.w1")).is_some();
            if present != decision.selected.contains(&e) {
                violations += 1;
            }
        }
    }
    CheckOutcome::new(
        "nonselected_experts_zero_gradient",
        violations == 0,
        format!("{instances} instances, {violations} violations"),
    )
}

// ---- gradient battery ----------------------------------------------------

/// Minimum logit margin at the K-th rank over every MoE layer of a stack.
fn min_tie_margin(stack: &Stack, input: &[f64]) -> f64 {
    let trace = match stack.forward_traced(input) {
        Ok(t) => t,
        Err(_) => return 0.0,
    };
    let mut margin = f64::INFINITY;
    for (i, layer) in stack.layers.iter().enumerate() {
        if let StackLayer::Moe(moe) = layer {
            if moe.top_k == moe.num_experts() {
                continue;
            }
            let mut logits = moe.gate_weights.tmatvec(&trace.layer_inputs[i]).unwrap();
            logits.sort_by(|a, b| b.partial_cmp(a).unwrap());
            margin = margin.min(logits[moe.top_k - 1] - logits[moe.top_k]);
        }
    }
    margin
}

fn flatten_stack(stack: &Stack, input: &[f64]) -> Vec<f64> {
    let mut coords = Vec::new();
    stack.visit_params("", &mut |_, m| coords.extend_from_slice(m.as_slice()));
    coords.extend_from_slice(input);
    coords
}

fn unflatten_stack(template: &Stack, coords: &[f64]) -> (Stack, Vec<f64>) {
    let mut stack = template.clone();
    let mut offset = 0usize;
    stack
        .visit_params_mut("", &mut |_, m| {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&coords[offset..offset + n]);
            offset += n;
            Ok(())
        })
        .unwrap();
    (stack, coords[offset..].to_vec())
}

/// Analytic gradient of a stack loss in flattened order (params in visit
/// order, then the input), with zeros for parameters the tape omits.
fn stack_analytic_gradient(stack: &Stack, input: &[f64], upstream: &[f64]) -> Vec<f64> {
    let trace = stack.forward_traced(input).unwrap();
    let mut tape = GradTape::new();
    let dx = stack.backward(&trace, upstream, "", &mut tape).unwrap();
    let mut grad = Vec::new();
    stack.visit_params("", &mut |id, m| match tape.get(id) {
        Some(g) => grad.extend_from_slice(g.as_slice()),
        None => grad.extend(std::iter::repeat_n(0.0, m.len())),
    });
    grad.extend_from_slice(&dx);
    grad
}

fn grad_outcome(name: &str, seeds: usize, worst: f64, resamples: usize) -> CheckOutcome {
    CheckOutcome::new(
        name,
        worst < GRAD_TOLERANCE,
        format!("{seeds} seeds, max rel err {worst:.3e}, {resamples} tie resamples"),
    )
}

fn check_gelu_grad(seeds: usize, seed: u64) -> CheckOutcome {
    let mut rng = rng_for(seed, "grad-gelu");
    let mut worst: f64 = 0.0;
    for _ in 0..seeds {
        let x = random_vec(&mut rng, 8, -3.0, 3.0);
        let u = random_vec(&mut rng, 8, -1.0, 1.0);
        let analytic: Vec<f64> = x.iter().zip(&u).map(|(&xi, &ui)| ui * gelu_prime(xi)).collect();
        let report = grad_check(
            |v| v.iter().zip(&u).map(|(&xi, &ui)| ui * gelu(xi)).sum(),
            &x,
            &analytic,
            GRAD_TOLERANCE,
        );
        worst = worst.max(report.max_rel_err);
    }
    grad_outcome("grad_gelu", seeds, worst, 0)
}

fn check_softmax_grad(seeds: usize, seed: u64) -> CheckOutcome {
    let mut rng = rng_for(seed, "grad-softmax");
    let mut worst: f64 = 0.0;
    for _ in 0..seeds {
        let logits = random_vec(&mut rng, 6, -4.0, 4.0);
        let u = random_vec(&mut rng, 6, -1.0, 1.0);
        let probs = softmax(&logits).unwrap();
        let analytic = softmax_backward(&probs, &u);
        let report = grad_check(
            |v| {
                let p = softmax(v).unwrap();
                dot(&p, &u)
            },
            &logits,
            &analytic,
            GRAD_TOLERANCE,
        );
        worst = worst.max(report.max_rel_err);
    }
    grad_outcome("grad_softmax", seeds, worst, 0)
}

fn check_cross_entropy_grad(seeds: usize, seed: u64) -> CheckOutcome {
    let mut rng = rng_for(seed, "grad-xent");
    let mut worst: f64 = 0.0;
    for _ in 0..seeds {
        let logits = random_vec(&mut rng, 6, -2.0, 2.0);
        let probs = softmax(&logits).unwrap();
        let class = rng.random_range(0..6);
        // gradient w.r.t. the probability vector itself
        let analytic = cross_entropy_backward(&probs, class).unwrap();
        let report = grad_check(
            |p| cross_entropy(p, class).unwrap(),
            &probs,
            &analytic,
            GRAD_TOLERANCE,
        );
        worst = worst.max(report.max_rel_err);
    }
    grad_outcome("grad_cross_entropy", seeds, worst, 0)
}

fn check_softmax_xent_grad(seeds: usize, seed: u64) -> CheckOutcome {
    let mut rng = rng_for(seed, "grad-softmax-xent");
    let mut worst: f64 = 0.0;
    for _ in 0..seeds {
        let logits = random_vec(&mut rng, 6, -3.0, 3.0);
        let class = rng.random_range(0..6);
        let probs = softmax(&logits).unwrap();
        let analytic = softmax_cross_entropy_grad(&probs, class);
        let report = grad_check(
            |v| cross_entropy(&softmax(v).unwrap(), class).unwrap(),
            &logits,
            &analytic,
            GRAD_TOLERANCE,
        );
        worst = worst.max(report.max_rel_err);
    }
    grad_outcome("grad_softmax_cross_entropy", seeds, worst, 0)
}

fn check_expert_grad(seeds: usize, seed: u64) -> CheckOutcome {
    let mut rng = rng_for(seed, "grad-expert");
    let mut worst: f64 = 0.0;
    for _ in 0..seeds {
        let expert = ExpertParams::init(5, 7, 4, &mut rng);
        let x = random_vec(&mut rng, 5, -1.5, 1.5);
        let u = random_vec(&mut rng, 4, -1.0, 1.0);
        // express the expert as a single-expert stack with K = 1
        let layer = MoeLayerParams {
            top_k: 1,
            gate_weights: Matrix::zeros(5, 1),
            experts: vec![expert],
        };
        let stack = Stack::new(vec![StackLayer::Moe(layer)]);
        let point = flatten_stack(&stack, &x);
        let analytic = stack_analytic_gradient(&stack, &x, &u);
        let report = grad_check(
            |coords| {
                let (rebuilt, input) = unflatten_stack(&stack, coords);
                let (out, _) = rebuilt.forward(&input).unwrap();
                dot(&out, &u)
            },
            &point,
            &analytic,
            GRAD_TOLERANCE,
        );
        worst = worst.max(report.max_rel_err);
    }
    grad_outcome("grad_expert", seeds, worst, 0)
}

/// Draws (layer-builder, input) pairs until every MoE layer has a logit
/// margin of at least [`TIE_MARGIN`] at the K-th rank, then finite-diff
/// checks a scalar loss over all parameters and the input.
fn check_stack_grad(
    name: &str,
    seeds: usize,
    seed: u64,
    build: impl Fn(&mut ChaCha12Rng) -> (Stack, usize),
    loss_of_output: impl Fn(&[f64], usize) -> f64,
    output_grad: impl Fn(&[f64], usize) -> Vec<f64>,
) -> CheckOutcome {
    let mut rng = rng_for(seed, name);
    let mut worst: f64 = 0.0;
    let mut resamples = 0usize;
    for _ in 0..seeds {
        let (stack, input_dim, input, class) = loop {
            let (stack, input_dim) = build(&mut rng);
            let input = random_vec(&mut rng, input_dim, -1.5, 1.5);
            if min_tie_margin(&stack, &input) >= TIE_MARGIN {
                let class = rng.random_range(0..4usize);
                break (stack, input_dim, input, class);
            }
            resamples += 1;
        };
        let _ = input_dim;
        let trace = stack.forward_traced(&input).unwrap();
        let upstream = output_grad(&trace.output, class);
        let point = flatten_stack(&stack, &input);
        let analytic = stack_analytic_gradient(&stack, &input, &upstream);
        let report = grad_check(
            |coords| {
                let (rebuilt, x) = unflatten_stack(&stack, coords);
                let (out, _) = rebuilt.forward(&x).unwrap();
                loss_of_output(&out, class)
            },
            &point,
            &analytic,
            GRAD_TOLERANCE,
        );
        worst = worst.max(report.max_rel_err);
    }
    grad_outcome(name, seeds, worst, resamples)
}

fn check_moe_layer_grad(seeds: usize, seed: u64) -> CheckOutcome {
    // a fixed random functional turns the layer output into a scalar loss
    let mut rng_u = rng_for(seed, "grad-moe-upstream");
    let u: Vec<f64> = random_vec(&mut rng_u, 5, -1.0, 1.0);
    let u2 = u.clone();
    let build = |rng: &mut ChaCha12Rng| {
        let layer = MoeLayerParams::init(6, 8, 5, 4, 2, rng).unwrap();
        (Stack::new(vec![StackLayer::Moe(layer)]), 6)
    };
    check_stack_grad(
        "grad_moe_layer",
        seeds,
        seed,
        build,
        move |out, _| dot(out, &u),
        move |_, _| u2.clone(),
    )
}

fn check_generator_stack_grad(seeds: usize, seed: u64) -> CheckOutcome {
    let mut rng_u = rng_for(seed, "grad-gen-upstream");
    let u: Vec<f64> = random_vec(&mut rng_u, 4, -1.0, 1.0);
    let u2 = u.clone();
    let cfg = GeneratorConfig {
        noise_dim: 3,
        depth: 2,
        hidden: 6,
        experts: 3,
        top_k: 2,
        epochs: 0,
        batch_size: 8,
    };
    let build = move |rng: &mut ChaCha12Rng| {
        let seed: u64 = rng.random();
        let params = GeneratorParams::init(&cfg, 4, 4, seed).unwrap();
        (params.stack, 7)
    };
    check_stack_grad(
        "grad_generator_stack",
        seeds,
        seed,
        build,
        move |out, _| dot(out, &u),
        move |_, _| u2.clone(),
    )
}

fn check_classifier_stack_grad(seeds: usize, seed: u64) -> CheckOutcome {
    let cfg = ClassifierConfig {
        experts: 3,
        top_k: 2,
        hidden: 6,
        ..ClassifierConfig::default()
    };
    let build = move |rng: &mut ChaCha12Rng| {
        let seed: u64 = rng.random();
        let params = ClassifierParams::init(&cfg, 5, vec![1, 2, 3, 4], seed).unwrap();
        (params.stack, 5)
    };
    check_stack_grad(
        "grad_classifier_stack",
        seeds,
        seed,
        build,
        |out, class| cross_entropy(&softmax(out).unwrap(), class).unwrap(),
        |out, class| {
            let probs = softmax(out).unwrap();
            softmax_cross_entropy_grad(&probs, class)
        },
    )
}

/// Central finite-difference checks for every differentiable operation,
/// `seeds` random instances each, routing-tie margin enforced on MoE
/// instances.
pub fn check_gradients(seeds: usize, seed: u64) -> Vec<CheckOutcome> {
    vec![
        check_gelu_grad(seeds, seed),
        check_softmax_grad(seeds, seed),
        check_cross_entropy_grad(seeds, seed),
        check_softmax_xent_grad(seeds, seed),
        check_expert_grad(seeds, seed),
        check_moe_layer_grad(seeds, seed),
        check_generator_stack_grad(seeds, seed),
        check_classifier_stack_grad(seeds, seed),
    ]
}

// ---- metric oracles --------------------------------------------------------

pub fn check_metric_oracles(seed: u64) -> Vec<CheckOutcome> {
    let mut outcomes = Vec::new();

    // (a) mIoU of the hand-counted 2x2 example
    let cm = ConfusionMatrix::from_counts(vec![0, 1], vec![3, 1, 1, 5]).unwrap();
    let split = SplitConfig::new([0].into(), [1].into()).unwrap();
    let report = build_report(&cm, &split).unwrap();
    let miou = report.miou_all.unwrap();
    outcomes.push(CheckOutcome::new(
        "miou_hand_example",
        (miou - 0.6571428571428571).abs() < 1e-12,
        format!("mIoU = {miou:.12}"),
    ));

    // (b) harmonic mean of the seen/unseen accuracy pair
    let hm = harmonic_mean(89.3, 64.96).unwrap();
    outcomes.push(CheckOutcome::new(
        "harmonic_mean_example",
        (hm - 75.21).abs() < 0.01,
        format!("HM(89.3, 64.96) = {hm:.4}"),
    ));

    // (c) accuracy vs. the direct pairwise-match fraction
    let mut rng = rng_for(seed, "metric-accuracy");
    let n = 10_000;
    let truths: Vec<ClassId> = (0..n).map(|_| rng.random_range(0..5)).collect();
    let preds: Vec<ClassId> = (0..n).map(|_| rng.random_range(0..5)).collect();
    let mut cm = ConfusionMatrix::new(vec![0, 1, 2, 3, 4]).unwrap();
    cm.accumulate(&truths, &preds).unwrap();
    let split = SplitConfig::new([0, 1, 2].into(), [3, 4].into()).unwrap();
    let report = build_report(&cm, &split).unwrap();
    let direct =
        truths.iter().zip(&preds).filter(|(t, p)| t == p).count() as f64 / n as f64;
    outcomes.push(CheckOutcome::new(
        "accuracy_vs_pairwise_fraction",
        (report.overall_accuracy - direct).abs() < 1e-12,
        format!("{n} pairs, matrix {:.6} vs direct {direct:.6}", report.overall_accuracy),
    ));

    // (d) matrix IoU vs. set-based IoU on random instances
    let mut worst: f64 = 0.0;
    let mut undefined_mismatch = 0usize;
    for round in 0..50 {
        let mut rng = rng_for(seed, &format!("metric-iou-{round}"));
        let n = rng.random_range(1..500);
        let truths: Vec<ClassId> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let preds: Vec<ClassId> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let mut cm = ConfusionMatrix::new(vec![0, 1, 2, 3]).unwrap();
        cm.accumulate(&truths, &preds).unwrap();
        let ious = iou_per_class(&cm);
        for c in 0..4u32 {
            let inter = (0..truths.len())
                .filter(|&i| truths[i] == c && preds[i] == c)
                .count();
            let t_count = truths.iter().filter(|&&t| t == c).count();
            let p_count = preds.iter().filter(|&&p| p == c).count();
            let union = t_count + p_count - inter;
            match ious[c as usize] {
                None => {
                    if union != 0 {
                        undefined_mismatch += 1;
                    }
                }
                Some(iou) => worst = worst.max((iou - inter as f64 / union as f64).abs()),
            }
        }
    }
    outcomes.push(CheckOutcome::new(
        "matrix_iou_vs_set_iou",
        worst < 1e-12 && undefined_mismatch == 0,
        format!("50 instances, max abs err {worst:.3e}"),
    ));

    outcomes
}

// ---- suites ---------------------------------------------------------------

pub const SUITE_SEED: u64 = 2024;

pub fn grad_suite() -> SuiteReport {
    SuiteReport {
        checks: check_gradients(100, SUITE_SEED),
    }
}

pub fn moe_suite() -> SuiteReport {
    let mut checks = check_dense_equivalence(1000, SUITE_SEED);
    checks.push(check_gate_invariants(10_000, SUITE_SEED));
    checks.push(check_k_equals_m(100, SUITE_SEED));
    checks.push(check_nonselected_zero_gradient(100, SUITE_SEED));
    SuiteReport { checks }
}

pub fn metrics_suite() -> SuiteReport {
    SuiteReport {
        checks: check_metric_oracles(SUITE_SEED),
    }
}

/// Runs a named suite; `Err` for an unknown name.
pub fn run_suite(name: &str) -> Result<SuiteReport> {
    match name {
        "grad" => Ok(grad_suite()),
        "moe" => Ok(moe_suite()),
        "metrics" => Ok(metrics_suite()),
        other => Err(crate::error::GzslError::arg(format!(
            "unknown suite {other:?}; expected grad, moe or metrics"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_equivalence_holds_on_a_small_sample() {
        for outcome in check_dense_equivalence(50, 1) {
            assert!(outcome.passed, "{}", outcome.line());
        }
    }

    #[test]
    fn gate_invariants_hold_on_a_small_sample() {
        let outcome = check_gate_invariants(500, 1);
        assert!(outcome.passed, "{}", outcome.line());
    }

    #[test]
    fn gradient_battery_passes_on_a_small_sample() {
        for outcome in check_gradients(5, 1) {
            assert!(outcome.passed, "{}", outcome.line());
        }
    }

    #[test]
    fn metric_oracles_pass() {
        for outcome in check_metric_oracles(1) {
            assert!(outcome.passed, "{}", outcome.line());
        }
    }

    #[test]
    fn k_equals_m_and_zero_grad_pass() {
        assert!(check_k_equals_m(20, 1).passed);
        assert!(check_nonselected_zero_gradient(20, 1).passed);
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run_suite("nope").is_err());
        assert!(run_suite("metrics").unwrap().passed());
    }
}

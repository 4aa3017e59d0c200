//! Sequential composition of linear maps, GELU activations, and MoE layers.

use rand::Rng;

use crate::error::{GzslError, Result};
use crate::moe::{
    glorot_uniform, moe_backward_with_cache, moe_forward_with_cache, GateDecision, MoeCache,
    MoeLayerParams,
};
use crate::numerics::activation::{gelu_prime, gelu_vec};
use crate::numerics::matrix::{axpy, Matrix};
use crate::numerics::tape::GradTape;

/// Plain affine map `y = W^T x + b`.
#[derive(Debug, Clone)]
pub struct LinearParams {
    /// `d_in x d_out`
    pub weights: Matrix,
    /// `1 x d_out`
    pub bias: Matrix,
}

impl LinearParams {
    pub fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        LinearParams {
            weights: glorot_uniform(d_in, d_out, rng),
            bias: Matrix::zeros(1, d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weights.cols()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.weights.tmatvec(x)?;
        axpy(&mut out, 1.0, self.bias.row(0));
        Ok(out)
    }

    pub fn backward_into(
        &self,
        x: &[f64],
        upstream: &[f64],
        prefix: &str,
        tape: &mut GradTape,
    ) -> Result<Vec<f64>> {
        tape.accumulate_outer(&format!("{prefix}w"), x, upstream)?;
        tape.accumulate_row(&format!("{prefix}b"), upstream)?;
        self.weights.matvec(upstream)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut impl FnMut(&str, &Matrix)) {
        f(&format!("{prefix}w"), &self.weights);
        f(&format!("{prefix}b"), &self.bias);
    }

    pub fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut impl FnMut(&str, &mut Matrix) -> Result<()>,
    ) -> Result<()> {
        f(&format!("{prefix}w"), &mut self.weights)?;
        f(&format!("{prefix}b"), &mut self.bias)
    }
}

#[derive(Debug, Clone)]
pub enum StackLayer {
    Linear(LinearParams),
    Moe(MoeLayerParams),
    Gelu,
}

/// Record of one traced forward pass: the input seen by each layer, the
/// final output, the gate decision of each MoE layer, and the cached
/// expert activations the backward pass reuses.
#[derive(Debug, Clone)]
pub struct StackTrace {
    pub layer_inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
    pub decisions: Vec<Option<GateDecision>>,
    pub(crate) moe_caches: Vec<Option<MoeCache>>,
}

/// A sequence of stack layers applied left to right. An empty stack is the
/// identity map.
#[derive(Debug, Clone, Default)]
pub struct Stack {
    pub layers: Vec<StackLayer>,
}

impl Stack {
    pub fn new(layers: Vec<StackLayer>) -> Self {
        Stack { layers }
    }

    fn stage_err(&self, index: usize, err: GzslError) -> GzslError {
        GzslError::shape(format!("stack layer {index}: {err}"))
    }

    /// Sequential forward pass; returns the output and the gate decisions of
    /// every MoE layer in order.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<GateDecision>)> {
        let trace = self.forward_traced(x)?;
        let decisions = trace.decisions.into_iter().flatten().collect();
        Ok((trace.output, decisions))
    }

    pub fn forward_traced(&self, x: &[f64]) -> Result<StackTrace> {
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut decisions = Vec::with_capacity(self.layers.len());
        let mut moe_caches = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            layer_inputs.push(current.clone());
            current = match layer {
                StackLayer::Linear(lin) => {
                    decisions.push(None);
                    moe_caches.push(None);
                    lin.forward(&current).map_err(|e| self.stage_err(i, e))?
                }
                StackLayer::Moe(moe) => {
                    let (out, decision, cache) =
                        moe_forward_with_cache(moe, &current).map_err(|e| self.stage_err(i, e))?;
                    decisions.push(Some(decision));
                    moe_caches.push(Some(cache));
                    out
                }
                StackLayer::Gelu => {
                    decisions.push(None);
                    moe_caches.push(None);
                    gelu_vec(&current)
                }
            };
        }
        Ok(StackTrace {
            layer_inputs,
            output: current,
            decisions,
            moe_caches,
        })
    }

    /// Backward pass over a trace produced by [`Stack::forward_traced`] on
    /// the same parameters. Returns the gradient w.r.t. the stack input.
    pub fn backward(
        &self,
        trace: &StackTrace,
        upstream: &[f64],
        prefix: &str,
        tape: &mut GradTape,
    ) -> Result<Vec<f64>> {
        if trace.layer_inputs.len() != self.layers.len() {
            return Err(GzslError::shape(format!(
                "trace covers {} layers, stack has {}",
                trace.layer_inputs.len(),
                self.layers.len()
            )));
        }
        let mut grad = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let input = &trace.layer_inputs[i];
            grad = match &self.layers[i] {
                StackLayer::Linear(lin) => lin
                    .backward_into(input, &grad, &format!("{prefix}layer{i}."), tape)
                    .map_err(|e| self.stage_err(i, e))?,
                StackLayer::Moe(moe) => {
                    let decision = trace.decisions[i].as_ref().ok_or_else(|| {
                        GzslError::shape(format!("stack layer {i}: trace is missing a decision"))
                    })?;
                    let cache = trace.moe_caches[i].as_ref().ok_or_else(|| {
                        GzslError::shape(format!("stack layer {i}: trace is missing a cache"))
                    })?;
                    moe_backward_with_cache(
                        moe,
                        input,
                        &grad,
                        decision,
                        cache,
                        &format!("{prefix}layer{i}."),
                        tape,
                    )
                    .map_err(|e| self.stage_err(i, e))?
                }
                StackLayer::Gelu => input
                    .iter()
                    .zip(&grad)
                    .map(|(&x, &g)| g * gelu_prime(x))
                    .collect(),
            };
        }
        Ok(grad)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut impl FnMut(&str, &Matrix)) {
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                StackLayer::Linear(lin) => lin.visit_params(&format!("{prefix}layer{i}."), f),
                StackLayer::Moe(moe) => moe.visit_params(&format!("{prefix}layer{i}."), f),
                StackLayer::Gelu => {}
            }
        }
    }

    pub fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut impl FnMut(&str, &mut Matrix) -> Result<()>,
    ) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                StackLayer::Linear(lin) => {
                    lin.visit_params_mut(&format!("{prefix}layer{i}."), f)?
                }
                StackLayer::Moe(moe) => moe.visit_params_mut(&format!("{prefix}layer{i}."), f)?,
                StackLayer::Gelu => {}
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit_params("", &mut |_, m| count += m.len());
        count
    }

    /// Applies every gradient in `tape` that belongs to this stack.
    pub fn apply_gradients(
        &mut self,
        prefix: &str,
        tape: &GradTape,
        optimizer: &mut crate::numerics::adam::AdamOptimizer,
    ) -> Result<()> {
        self.visit_params_mut(prefix, &mut |id, param| {
            if let Some(grad) = tape.get(id) {
                optimizer.apply(id, param, grad)
            } else {
                Ok(())
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{expert_forward, gate, moe_forward};
    use crate::numerics::dot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn empty_stack_is_identity() {
        let stack = Stack::default();
        let x = [1.0, -2.0, 3.0];
        let (y, decisions) = stack.forward(&x).unwrap();
        assert_eq!(y, x.to_vec());
        assert!(decisions.is_empty());
    }

    #[test]
    fn single_moe_stack_equals_moe_forward() {
        let mut r = rng(3);
        let layer = MoeLayerParams::init(4, 6, 3, 4, 2, &mut r).unwrap();
        let x = [0.1, -0.5, 0.8, 0.3];
        let (direct, d1) = moe_forward(&layer, &x).unwrap();
        let stack = Stack::new(vec![StackLayer::Moe(layer)]);
        let (via_stack, d2) = stack.forward(&x).unwrap();
        assert_eq!(direct, via_stack);
        assert_eq!(d1, d2[0]);
    }

    /// Recomputing a two-layer stack with a dense evaluate-all-experts
    /// oracle reproduces the output.
    #[test]
    fn two_layer_stack_matches_dense_oracle() {
        let mut r = rng(5);
        let l1 = MoeLayerParams::init(4, 6, 5, 4, 2, &mut r).unwrap();
        let l2 = MoeLayerParams::init(5, 6, 3, 3, 2, &mut r).unwrap();
        let stack = Stack::new(vec![StackLayer::Moe(l1), StackLayer::Moe(l2)]);
        let x = [0.7, -0.2, 0.4, -0.9];
        let (out, _) = stack.forward(&x).unwrap();

        let dense = |layer: &MoeLayerParams, input: &[f64]| -> Vec<f64> {
            let decision = gate(input, &layer.gate_weights, layer.top_k).unwrap();
            let mut acc = vec![0.0; layer.d_out()];
            for (m, expert) in layer.experts.iter().enumerate() {
                let y = expert_forward(expert, input).unwrap();
                for (a, v) in acc.iter_mut().zip(&y) {
                    *a += decision.weights[m] * v;
                }
            }
            acc
        };
        let mid = match &stack.layers[0] {
            StackLayer::Moe(l) => dense(l, &x),
            _ => unreachable!(),
        };
        let expect = match &stack.layers[1] {
            StackLayer::Moe(l) => dense(l, &mid),
            _ => unreachable!(),
        };
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_names_the_stage() {
        let mut r = rng(9);
        let ok = LinearParams::init(3, 4, &mut r);
        let bad = LinearParams::init(5, 2, &mut r);
        let stack = Stack::new(vec![StackLayer::Linear(ok), StackLayer::Linear(bad)]);
        let err = stack.forward(&[1.0, 2.0, 3.0]).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "got: {err}");
    }

    #[test]
    fn stack_backward_matches_finite_differences() {
        let mut r = rng(21);
        let stack = Stack::new(vec![
            StackLayer::Linear(LinearParams::init(3, 4, &mut r)),
            StackLayer::Gelu,
            StackLayer::Moe(MoeLayerParams::init(4, 5, 3, 3, 2, &mut r).unwrap()),
            StackLayer::Linear(LinearParams::init(3, 2, &mut r)),
        ]);
        let x: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();

        let trace = stack.forward_traced(&x).unwrap();
        let mut tape = GradTape::new();
        let dx = stack.backward(&trace, &upstream, "", &mut tape).unwrap();

        let report = crate::numerics::gradcheck::grad_check(
            |coords| {
                let (out, _) = stack.forward(coords).unwrap();
                dot(&upstream, &out)
            },
            &x,
            &dx,
            1e-4,
        );
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert!(tape.get("layer0.w").is_some());
        assert!(tape.get("layer3.b").is_some());
    }
}

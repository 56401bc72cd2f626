//! Central-finite-difference verification of reverse-mode gradients.
//!
//! The checker only ever calls scenario forward evaluations to form the
//! reference derivative, so it stays independent of the backward pass it is
//! judging. `op_suite` covers the individual graph ops; `loss_suite` covers
//! the full training objectives on a tiny backbone.

use crate::error::Result;
use crate::graph::{Graph, NodeId, Padding, Targets};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Floor in the relative-error denominator; below this scale the comparison
/// is effectively absolute.
const REL_FLOOR: f64 = 1e-3;

type EvalFn = Box<dyn Fn(&[Tensor], bool) -> Result<(f64, Option<Vec<Vec<f64>>>)> + Send + Sync>;

/// One differentiable computation under test: a set of perturbable input
/// tensors and an evaluator returning the scalar loss (and, on request, the
/// reverse-mode gradients of every input).
pub struct Scenario {
    pub name: String,
    pub inputs: Vec<Tensor>,
    eval: EvalFn,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub checked_elements: usize,
}

impl Scenario {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor>,
        eval: impl Fn(&[Tensor], bool) -> Result<(f64, Option<Vec<Vec<f64>>>)> + Send + Sync + 'static,
    ) -> Scenario {
        Scenario { name: name.into(), inputs, eval: Box::new(eval) }
    }

    /// Graph-only scenario: leaves are created from the inputs in order and
    /// `build` returns the scalar loss node.
    pub fn from_graph(
        name: impl Into<String>,
        inputs: Vec<Tensor>,
        build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + Send + Sync + 'static,
    ) -> Scenario {
        Scenario::new(name, inputs, move |tensors, want_grads| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf_of(t)).collect();
            let loss = build(&mut g, &ids)?;
            let value = g.value(loss);
            if want_grads {
                g.backward(loss)?;
                Ok((value, Some(ids.iter().map(|&id| g.grad(id).to_vec()).collect())))
            } else {
                Ok((value, None))
            }
        })
    }

    pub fn check(&self, h: f64) -> Result<CheckOutcome> {
        let (_, grads) = (self.eval)(&self.inputs, true)?;
        let grads = grads.expect("eval must return gradients when asked");
        let mut max_rel = 0.0_f64;
        let mut checked = 0;
        let mut work: Vec<Tensor> = self.inputs.to_vec();
        for (i, g) in grads.iter().enumerate() {
            for j in 0..g.len() {
                let orig = work[i].data()[j];
                work[i].data_mut()[j] = orig + h;
                let (fp, _) = (self.eval)(&work, false)?;
                work[i].data_mut()[j] = orig - h;
                let (fm, _) = (self.eval)(&work, false)?;
                work[i].data_mut()[j] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let ad = g[j];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(REL_FLOOR);
                if rel > max_rel {
                    max_rel = rel;
                }
                checked += 1;
            }
        }
        Ok(CheckOutcome { name: self.name.clone(), max_rel_err: max_rel, checked_elements: checked })
    }
}

fn randn_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, scale, rng)
}

fn soft_rows(batch: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut rows = vec![0.0; batch * classes];
    for r in 0..batch {
        let mut sum = 0.0;
        for c in 0..classes {
            let v: f64 = rng.gen_range(0.05..1.0);
            rows[r * classes + c] = v;
            sum += v;
        }
        for c in 0..classes {
            rows[r * classes + c] /= sum;
        }
    }
    rows
}

/// Scenarios exercising each differentiable graph op, including a random
/// three-stage composite.
pub fn op_suite(seed: u64) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suite = Vec::new();

    {
        let a = randn_tensor(&[3, 4], 0.8, &mut rng);
        let b = randn_tensor(&[4, 3], 0.8, &mut rng);
        let c = randn_tensor(&[3, 3], 0.8, &mut rng);
        suite.push(Scenario::from_graph(
            "matmul_transpose_mul",
            vec![a, b, c],
            |g, ids| {
                let ab = g.matmul(ids[0], ids[1])?;
                let abt = g.transpose(ab)?;
                let prod = g.mul_elem(abt, ids[2])?;
                Ok(g.sum_all(prod))
            },
        ));
    }

    {
        let x = randn_tensor(&[2, 2, 6, 6], 0.7, &mut rng);
        let k = randn_tensor(&[3, 2, 3, 3], 0.5, &mut rng);
        let bias = randn_tensor(&[3], 0.3, &mut rng);
        suite.push(Scenario::from_graph(
            "conv_valid_bias_relu_pool",
            vec![x, k, bias],
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], 1, Padding::Valid)?;
                let y = g.add_channel_bias(y, ids[2])?;
                let y = g.relu(y);
                let f = g.global_avg_pool(y)?;
                let sq = g.mul_elem(f, f)?;
                Ok(g.sum_all(sq))
            },
        ));
    }

    {
        let x = randn_tensor(&[2, 1, 5, 5], 0.7, &mut rng);
        let k = randn_tensor(&[2, 1, 3, 3], 0.5, &mut rng);
        suite.push(Scenario::from_graph("conv_same_stride2", vec![x, k], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], 2, Padding::Same)?;
            let sq = g.mul_elem(y, y)?;
            Ok(g.mean_all(sq))
        }));
    }

    {
        let z = randn_tensor(&[3, 5], 1.2, &mut rng);
        suite.push(Scenario::from_graph("softmax_ce_hard", vec![z], |g, ids| {
            g.softmax_cross_entropy(ids[0], &Targets::Hard(vec![4, 0, 2]))
        }));
    }

    {
        let z = randn_tensor(&[3, 4], 1.2, &mut rng);
        let rows = soft_rows(3, 4, &mut rng);
        suite.push(Scenario::from_graph("softmax_ce_soft", vec![z], move |g, ids| {
            g.softmax_cross_entropy(ids[0], &Targets::Soft(rows.clone()))
        }));
    }

    {
        let z = randn_tensor(&[3, 6], 1.0, &mut rng);
        let w = randn_tensor(&[4, 6], 1.0, &mut rng);
        suite.push(Scenario::from_graph("cosine_logits_path", vec![z, w], |g, ids| {
            let zn = g.l2_normalize_rows(ids[0])?;
            let wn = g.l2_normalize_rows(ids[1])?;
            let wt = g.transpose(wn)?;
            let sim = g.matmul(zn, wt)?;
            let logits = g.scale(sim, 10.0);
            g.softmax_cross_entropy(logits, &Targets::Hard(vec![1, 3, 0]))
        }));
    }

    {
        let z = randn_tensor(&[5, 3], 1.0, &mut rng);
        suite.push(Scenario::from_graph("pairwise_gather_sqrt_softplus", vec![z], |g, ids| {
            let d2 = g.pairwise_sq_distances(ids[0])?;
            let far = g.gather_pairs(d2, &[1, 2, 3, 4, 0])?;
            let near = g.gather_pairs(d2, &[2, 3, 4, 0, 1])?;
            let dfar = g.sqrt_guarded(far);
            let dnear = g.sqrt_guarded(near);
            let margin = g.sub(dfar, dnear)?;
            let sp = g.softplus(margin);
            Ok(g.mean_all(sp))
        }));
    }

    {
        let x = randn_tensor(&[4, 5], 1.0, &mut rng);
        let w = randn_tensor(&[5, 3], 0.8, &mut rng);
        let rows = soft_rows(4, 3, &mut rng);
        suite.push(Scenario::from_graph("mix_permute_hidden", vec![x, w], move |g, ids| {
            let h = g.matmul(ids[0], ids[1])?;
            let hp = g.permute_rows(h, &[2, 0, 3, 1])?;
            let hm = g.mix(h, hp, 0.35)?;
            let act = g.relu(hm);
            g.softmax_cross_entropy(act, &Targets::Soft(rows.clone()))
        }));
    }

    {
        let z = randn_tensor(&[3, 4], 1.0, &mut rng);
        let w = randn_tensor(&[2, 4], 0.8, &mut rng);
        let b = randn_tensor(&[2], 0.5, &mut rng);
        suite.push(Scenario::from_graph("linear_head_path", vec![z, w, b], |g, ids| {
            let wt = g.transpose(ids[1])?;
            let zz = g.matmul(ids[0], wt)?;
            let logits = g.add_row_bias(zz, ids[2])?;
            g.softmax_cross_entropy(logits, &Targets::Hard(vec![0, 1, 1]))
        }));
    }

    {
        // Random three-stage composite across the op set.
        let x = randn_tensor(&[3, 4], 0.9, &mut rng);
        let w1 = randn_tensor(&[4, 4], 0.7, &mut rng);
        let w2 = randn_tensor(&[4, 2], 0.7, &mut rng);
        suite.push(Scenario::from_graph("three_layer_composite", vec![x, w1, w2], |g, ids| {
            let h1 = g.matmul(ids[0], ids[1])?;
            let a1 = g.relu(h1);
            let n1 = g.l2_normalize_rows(a1)?;
            let h2 = g.matmul(n1, ids[2])?;
            let sp = g.softplus(h2);
            let d2 = g.pairwise_sq_distances(sp)?;
            let sums = g.sum_all(d2);
            let half = g.scale(sums, 0.5);
            let ce = g.softmax_cross_entropy(h2, &Targets::Hard(vec![0, 1, 0]))?;
            g.add(half, ce)
        }));
    }

    suite
}

/// Run every scenario; returns the worst outcome alongside all results.
pub fn run_suite(suite: &[Scenario], h: f64) -> Result<Vec<CheckOutcome>> {
    suite.iter().map(|s| s.check(h)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes_central_differences() {
        for outcome in run_suite(&op_suite(20240517), DEFAULT_STEP).unwrap() {
            assert!(
                outcome.max_rel_err < DEFAULT_TOLERANCE,
                "{} failed: max rel err {}",
                outcome.name,
                outcome.max_rel_err
            );
        }
    }
}

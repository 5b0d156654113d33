//! Recorded operation graph and the reverse pass.
//!
//! Every tracked operation creates a [`Node`] carrying a monotonically
//! increasing sequence number, references to its parent nodes, and a
//! [`Rule`] holding whatever forward data the backward formula needs.
//! Because inputs are always recorded before the operations consuming
//! them, sequence order is a topological order, and the reverse pass is a
//! single descending sweep that visits each reachable node exactly once.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

use super::kernels::{self, BnEvalSaved, BnTrainSaved, ConvDims, PoolDims};
use super::{Element, Tensor};

/// Gradient accumulator shared by all clones of a parameter leaf.
pub(crate) type GradSlot<E> = Mutex<Option<Vec<E>>>;

pub(crate) struct Node<E: Element> {
    pub seq: u64,
    /// Aligned with the input order of `rule`; `None` marks an untracked
    /// input (no gradient flows there).
    pub parents: Vec<Option<Arc<Node<E>>>>,
    pub rule: Rule<E>,
}

/// Backward rule of a recorded operation, with the saved forward state it
/// needs. Input order of each variant matches `Node::parents`.
pub(crate) enum Rule<E: Element> {
    /// Parameter leaf; accumulates incoming gradient into `slot`.
    Leaf { slot: Arc<GradSlot<E>>, numel: usize },
    /// inputs: [x, w, b]
    Conv2d { x: Arc<Vec<E>>, w: Arc<Vec<E>>, dims: ConvDims },
    /// inputs: [x, w, b]
    ConvTranspose2d { x: Arc<Vec<E>>, w: Arc<Vec<E>>, dims: ConvDims },
    /// inputs: [x]; `argmax` holds the flat input index feeding each output.
    MaxPool2d { argmax: Vec<usize>, x_numel: usize },
    /// inputs: [x, gamma, beta]
    BatchNormTrain { saved: BnTrainSaved<E> },
    /// inputs: [x, gamma, beta]
    BatchNormEval { saved: BnEvalSaved<E> },
    /// inputs: [x]; gradient passes where the input was positive.
    Relu { positive: Vec<bool> },
    /// inputs: [x]; saved output y, dy/dx = y(1-y).
    Sigmoid { y: Arc<Vec<E>> },
    /// inputs: [a, b]
    Add,
    /// inputs: [a, b]
    Mul { a: Arc<Vec<E>>, b: Arc<Vec<E>> },
    /// inputs: [x, s]; x is NCHW, s is [N,C,1,1].
    ScaleChannels { x: Arc<Vec<E>>, s: Arc<Vec<E>>, n: usize, c: usize, plane: usize },
    /// inputs: [x]
    GlobalAvgPool { n: usize, c: usize, plane: usize },
    /// inputs: [a, b]; channel counts of the two inputs.
    ConcatChannels { n: usize, ca: usize, cb: usize, plane: usize },
    /// inputs: [pred]; `diff = pred - target`, loss is the mean of the
    /// per-element Huber-style penalty.
    SmoothL1 { diff: Vec<E> },
    /// inputs: [x]
    SumAll { numel: usize },
    /// inputs: [x]
    PixelShuffle { dims: PoolDims, factor: usize },
}

/// Reverse pass from a scalar loss.
///
/// Gradients of every reachable parameter leaf accumulate into its slot;
/// repeated calls without [`Tensor::zero_grad`] keep accumulating. The
/// traversal order is the recording order reversed, so results are
/// deterministic.
pub fn backward<E: Element>(loss: &Tensor<E>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Usage(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let root = match loss.node() {
        Some(n) => Arc::clone(n),
        // Untracked scalar: nothing reachable, nothing to do.
        None => return Ok(()),
    };

    // Collect reachable nodes (keyed by sequence number, which is unique).
    let mut reachable: HashMap<u64, Arc<Node<E>>> = HashMap::new();
    let mut stack = vec![root.clone()];
    while let Some(node) = stack.pop() {
        if reachable.insert(node.seq, Arc::clone(&node)).is_none() {
            for parent in node.parents.iter().flatten() {
                if !reachable.contains_key(&parent.seq) {
                    stack.push(Arc::clone(parent));
                }
            }
        }
    }
    let mut order: Vec<u64> = reachable.keys().copied().collect();
    order.sort_unstable_by(|a, b| b.cmp(a));

    let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
    grads.insert(root.seq, vec![E::one()]);

    for seq in order {
        let node = &reachable[&seq];
        let out_grad = match grads.remove(&seq) {
            Some(g) => g,
            None => continue, // not on a path from the loss
        };
        match &node.rule {
            Rule::Leaf { slot, numel } => {
                debug_assert_eq!(out_grad.len(), *numel);
                let mut slot = slot.lock().expect("grad slot poisoned");
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&out_grad) {
                            *a += *g;
                        }
                    }
                    None => *slot = Some(out_grad),
                }
                continue;
            }
            rule => {
                let wanted: Vec<bool> = node.parents.iter().map(|p| p.is_some()).collect();
                let input_grads = apply_rule(rule, &out_grad, &wanted);
                debug_assert_eq!(input_grads.len(), node.parents.len());
                for (parent, grad) in node.parents.iter().zip(input_grads) {
                    if let (Some(parent), Some(grad)) = (parent, grad) {
                        match grads.get_mut(&parent.seq) {
                            Some(acc) => {
                                for (a, g) in acc.iter_mut().zip(&grad) {
                                    *a += *g;
                                }
                            }
                            None => {
                                grads.insert(parent.seq, grad);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Gradients w.r.t. each input of the rule, skipping inputs whose
/// `wanted` flag is false (untracked).
fn apply_rule<E: Element>(rule: &Rule<E>, gy: &[E], wanted: &[bool]) -> Vec<Option<Vec<E>>> {
    match rule {
        Rule::Leaf { .. } => unreachable!("leaf handled by caller"),
        Rule::Conv2d { x, w, dims } => vec![
            wanted[0].then(|| kernels::conv2d_backward_x(gy, w, dims)),
            wanted[1].then(|| kernels::conv2d_backward_w(gy, x, dims)),
            wanted[2].then(|| kernels::conv_backward_b(gy, dims.n, dims.cout, dims.oh * dims.ow)),
        ],
        Rule::ConvTranspose2d { x, w, dims } => vec![
            wanted[0].then(|| kernels::conv_transpose2d_backward_x(gy, w, dims)),
            wanted[1].then(|| kernels::conv_transpose2d_backward_w(gy, x, dims)),
            wanted[2].then(|| kernels::conv_backward_b(gy, dims.n, dims.cout, dims.oh * dims.ow)),
        ],
        Rule::MaxPool2d { argmax, x_numel } => vec![wanted[0].then(|| {
            let mut gx = vec![E::zero(); *x_numel];
            for (o, &src) in argmax.iter().enumerate() {
                gx[src] += gy[o];
            }
            gx
        })],
        Rule::BatchNormTrain { saved } => {
            let (gx, gg, gb) = kernels::batch_norm_backward_train(gy, saved, wanted);
            vec![gx, gg, gb]
        }
        Rule::BatchNormEval { saved } => {
            let (gx, gg, gb) = kernels::batch_norm_backward_eval(gy, saved, wanted);
            vec![gx, gg, gb]
        }
        Rule::Relu { positive } => vec![wanted[0].then(|| {
            gy.iter()
                .zip(positive)
                .map(|(&g, &p)| if p { g } else { E::zero() })
                .collect()
        })],
        Rule::Sigmoid { y } => vec![wanted[0].then(|| {
            gy.iter()
                .zip(y.iter())
                .map(|(&g, &y)| g * y * (E::one() - y))
                .collect()
        })],
        Rule::Add => vec![
            wanted[0].then(|| gy.to_vec()),
            wanted[1].then(|| gy.to_vec()),
        ],
        Rule::Mul { a, b } => vec![
            wanted[0].then(|| gy.iter().zip(b.iter()).map(|(&g, &v)| g * v).collect()),
            wanted[1].then(|| gy.iter().zip(a.iter()).map(|(&g, &v)| g * v).collect()),
        ],
        Rule::ScaleChannels { x, s, n, c, plane } => {
            let gx = wanted[0].then(|| {
                let mut gx = vec![E::zero(); x.len()];
                for i in 0..*n {
                    for j in 0..*c {
                        let sv = s[i * c + j];
                        let base = (i * c + j) * plane;
                        for p in 0..*plane {
                            gx[base + p] = gy[base + p] * sv;
                        }
                    }
                }
                gx
            });
            let gs = wanted[1].then(|| {
                let mut gs = vec![E::zero(); n * c];
                for i in 0..*n {
                    for j in 0..*c {
                        let base = (i * c + j) * plane;
                        let mut acc = E::zero();
                        for p in 0..*plane {
                            acc += gy[base + p] * x[base + p];
                        }
                        gs[i * c + j] = acc;
                    }
                }
                gs
            });
            vec![gx, gs]
        }
        Rule::GlobalAvgPool { n, c, plane } => vec![wanted[0].then(|| {
            let scale = E::one() / E::from_f64(*plane as f64);
            let mut gx = vec![E::zero(); n * c * plane];
            for j in 0..n * c {
                let g = gy[j] * scale;
                for p in 0..*plane {
                    gx[j * plane + p] = g;
                }
            }
            gx
        })],
        Rule::ConcatChannels { n, ca, cb, plane } => {
            let split = |take_first: bool| {
                let ch = if take_first { *ca } else { *cb };
                let mut g = vec![E::zero(); n * ch * plane];
                for i in 0..*n {
                    let src_ch0 = if take_first { 0 } else { *ca };
                    for j in 0..ch {
                        let src = (i * (ca + cb) + src_ch0 + j) * plane;
                        let dst = (i * ch + j) * plane;
                        g[dst..dst + plane].copy_from_slice(&gy[src..src + plane]);
                    }
                }
                g
            };
            vec![wanted[0].then(|| split(true)), wanted[1].then(|| split(false))]
        }
        Rule::SmoothL1 { diff } => vec![wanted[0].then(|| {
            let g = gy[0] / E::from_f64(diff.len() as f64);
            diff.iter()
                .map(|&d| {
                    if d.abs() < E::one() {
                        g * d
                    } else {
                        g * d.signum()
                    }
                })
                .collect()
        })],
        Rule::SumAll { numel } => vec![wanted[0].then(|| vec![gy[0]; *numel])],
        Rule::PixelShuffle { dims, factor } => {
            vec![wanted[0].then(|| kernels::pixel_shuffle_backward(gy, dims, *factor))]
        }
    }
}

//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and the handles of its
//! inputs. Nodes are appended in evaluation order, so a single reverse sweep
//! visits each node after everything that consumed it.

use crate::attention::{
    attention_nchw, attention_nchw_backward, AttentionMap, Correlation, Neighborhood,
};
use crate::error::{shape_err, Error, Result};
use crate::ops::{self, Activation, BatchStats, BnCache, ConvGeometry, RunningStats};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache,
    },
    Activation(Var, Activation),
    Softmax(Var),
    Concat(Var, Var),
    Add(Var, Var),
    MulConst(Var, Tensor),
    Reshape(Var),
    SumAll(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mode: Correlation,
        maps: Vec<AttentionMap>,
    },
    BceWithLogits {
        logits: Var,
        target: Tensor,
    },
    SoftDice {
        logits: Var,
        target: Tensor,
        smooth: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Where a batch-norm node takes its statistics from.
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a> {
    Batch,
    Running(&'a RunningStats),
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed to it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.dims()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(kernel), self.value(bias), geom)?;
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            },
        ))
    }

    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let y = ops::conv2d_transpose(self.value(x), self.value(kernel), self.value(bias), geom)?;
        Ok(self.push(
            y,
            Op::ConvTranspose2d {
                x,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Batch normalization; in batch mode also returns the batch statistics
    /// so the caller can fold them into its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: BnStats<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let (y, cache, batch) = match stats {
            BnStats::Batch => {
                let (y, cache, s) = ops::batchnorm2d_train(xv, g, b, eps)?;
                (y, cache, Some(s))
            }
            BnStats::Running(rs) => {
                let (y, cache) = ops::batchnorm2d_eval(xv, g, b, eps, rs)?;
                (y, cache, None)
            }
        };
        Ok((
            self.push(
                y,
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                },
            ),
            batch,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let y = ops::activation(self.value(x), kind);
        self.push(y, Op::Activation(x, kind))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_lastdim(self.value(x))?;
        Ok(self.push(y, Op::Softmax(x)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add_elementwise(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    /// Elementwise product with a constant (non-differentiated) tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let y = self.value(x).zip_map(&c, |a, b| a * b)?;
        Ok(self.push(y, Op::MulConst(x, c)))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(dims)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::SumAll(x))
    }

    /// Neighborhood attention on `[N, C, H, W]` queries, keys and values.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mode: Correlation,
        nb: Neighborhood,
    ) -> Result<Var> {
        let (y, maps) = attention_nchw(self.value(q), self.value(k), self.value(v), mode, nb)?;
        Ok(self.push(
            y,
            Op::Attention {
                q,
                k,
                v,
                mode,
                maps,
            },
        ))
    }

    /// Mean binary cross-entropy on logits against a `{0, 1}` target.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let loss = crate::training::loss::bce_loss(self.value(logits), target)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                target: target.clone(),
            },
        ))
    }

    /// Smoothed soft-Dice loss on logits.
    pub fn soft_dice(&mut self, logits: Var, target: &Tensor, smooth: f64) -> Result<Var> {
        let loss = crate::training::loss::dice_loss_smooth(self.value(logits), target, smooth)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftDice {
                logits,
                target: target.clone(),
                smooth,
            },
        ))
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar output, got dims {:?}",
                out.dims()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::ones(out.dims()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            // Leaves keep their gradient; interior nodes release theirs.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |v: Var, t: Tensor| -> Result<()> {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves are skipped above"),
                Op::Conv2d {
                    x,
                    kernel,
                    bias,
                    geom,
                } => {
                    let (gx, gk, gb) =
                        ops::conv2d_backward(self.value(*x), self.value(*kernel), &g, *geom)?;
                    send(*x, gx)?;
                    send(*kernel, gk)?;
                    send(*bias, gb)?;
                }
                Op::ConvTranspose2d {
                    x,
                    kernel,
                    bias,
                    geom,
                } => {
                    let (gx, gk, gb) = ops::conv2d_transpose_backward(
                        self.value(*x),
                        self.value(*kernel),
                        &g,
                        *geom,
                    )?;
                    send(*x, gx)?;
                    send(*kernel, gk)?;
                    send(*bias, gb)?;
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (gx, gg, gb) = ops::batchnorm2d_backward(cache, self.value(*gamma), &g)?;
                    send(*x, gx)?;
                    send(*gamma, gg)?;
                    send(*beta, gb)?;
                }
                Op::Activation(x, kind) => {
                    let gx = ops::activation_backward(self.value(*x), &node.value, &g, *kind)?;
                    send(*x, gx)?;
                }
                Op::Softmax(x) => {
                    send(*x, ops::softmax_lastdim_backward(&node.value, &g)?)?;
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).dims4()?[1];
                    let (ga, gb) = ops::concat_channels_backward(&g, ca)?;
                    send(*a, ga)?;
                    send(*b, gb)?;
                }
                Op::Add(a, b) => {
                    send(*a, g.clone())?;
                    send(*b, g)?;
                }
                Op::MulConst(x, c) => {
                    send(*x, g.zip_map(c, |a, b| a * b)?)?;
                }
                Op::Reshape(x) => {
                    let dims = self.value(*x).dims().to_vec();
                    send(*x, g.reshape(&dims)?)?;
                }
                Op::SumAll(x) => {
                    let scale = g.item()?;
                    send(*x, Tensor::full(self.value(*x).dims(), scale))?;
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    mode,
                    maps,
                } => {
                    let (gq, gk, gv) = attention_nchw_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        maps,
                        *mode,
                        &g,
                    )?;
                    send(*q, gq)?;
                    send(*k, gk)?;
                    send(*v, gv)?;
                }
                Op::BceWithLogits { logits, target } => {
                    let scale = g.item()?;
                    let z = self.value(*logits);
                    let gz = crate::training::loss::bce_loss_grad(z, target)?.scale(scale);
                    send(*logits, gz)?;
                }
                Op::SoftDice {
                    logits,
                    target,
                    smooth,
                } => {
                    let scale = g.item()?;
                    let z = self.value(*logits);
                    let gz =
                        crate::training::loss::dice_loss_grad(z, target, *smooth)?.scale(scale);
                    send(*logits, gz)?;
                }
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of node {}", i)));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_input_accumulates() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let s = t.add(a, a).unwrap();
        let y = t.sum_all(s);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[3]));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn unreached_leaf_has_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::ones(&[2]));
        let b = t.leaf(Tensor::ones(&[2]));
        let y = t.sum_all(a);
        let g = t.backward(y).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.get_or_zeros(b, t.value(b)).data(), &[0.0, 0.0]);
    }

    #[test]
    fn repeated_backward_is_independent() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let r = t.sigmoid(a);
        let y = t.sum_all(r);
        let g1 = t.backward(y).unwrap();
        let g2 = t.backward(y).unwrap();
        assert_eq!(g1.get(a), g2.get(a));
    }
}

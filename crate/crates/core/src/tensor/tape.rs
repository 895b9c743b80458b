//! Reverse-mode automatic differentiation over a linear record of primitive
//! applications. Entries are appended in evaluation order, so every input of
//! an entry precedes it and a single reverse sweep visits each entry once.

use rand::Rng;

use crate::error::{Error, Result};

use super::ops::{self, BatchStats, Mode, Padding};
use super::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: Padding,
    },
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        mode: Mode,
        stats: BatchStats<T>,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Reshape(Var),
    Sum(Var),
    /// Linear combination of scalars.
    Combine(Vec<(Var, T)>),
    /// Scalar function whose partial derivatives were computed alongside
    /// its value.
    Scalar {
        inputs: Vec<Var>,
        partials: Vec<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: Padding,
    ) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            padding,
        )?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            },
            &deps,
        ))
    }

    /// Returns the normalised output and the statistics it used (batch
    /// statistics in train mode, `running` in infer mode).
    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        mode: Mode,
        running: &BatchStats<T>,
    ) -> Result<(Var, BatchStats<T>)> {
        let (out, stats) = ops::batch_norm(
            self.value(input),
            self.value(scale),
            self.value(shift),
            mode,
            running,
        )?;
        let v = self.push(
            out,
            Op::BatchNorm {
                input,
                scale,
                shift,
                mode,
                stats: stats.clone(),
            },
            &[input, scale, shift],
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        self.push(out, Op::Relu(input), &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "mul: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p * q)
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        keep_prob: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let x = self.value(input);
        let mask = ops::dropout_mask::<T, R>(x.len(), keep_prob, mode, rng)?;
        let data = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { input, mask }, &[input]))
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(input), self.value(weights), self.value(bias))?;
        Ok(self.push(
            out,
            Op::Dense {
                input,
                weights,
                bias,
            },
            &[input, weights, bias],
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(input), &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self
            .value(input)
            .data()
            .iter()
            .fold(T::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(total), Op::Sum(input), &[input])
    }

    /// `Σ weight · term` over scalar terms.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let x = self.value(v);
            if !x.is_scalar() {
                return Err(Error::Contract(format!(
                    "combine expects scalars, got shape {:?}",
                    x.shape()
                )));
            }
            total = total + T::of(w) * x.item();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let terms = terms.iter().map(|&(v, w)| (v, T::of(w))).collect();
        Ok(self.push(Tensor::scalar(total), Op::Combine(terms), &inputs))
    }

    /// Records a scalar `value` of `inputs` with known partial derivatives.
    pub fn scalar_fn(&mut self, inputs: &[Var], value: T, partials: Vec<Tensor<T>>) -> Result<Var> {
        if inputs.len() != partials.len() {
            return Err(Error::Contract("one partial per input required".into()));
        }
        for (v, p) in inputs.iter().zip(&partials) {
            if self.value(*v).shape() != p.shape() {
                return Err(Error::Dimension(format!(
                    "partial shape {:?} does not match input {:?}",
                    p.shape(),
                    self.value(*v).shape()
                )));
            }
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::Scalar {
                inputs: inputs.to_vec(),
                partials,
            },
            inputs,
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Tensor<T>) -> Result<Var> {
        let (loss, grad) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        self.scalar_fn(&[logits], loss, vec![grad])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let g = Tensor::new(node.value.shape().to_vec(), g)?;
            match &node.op {
                Op::Leaf => leaves[idx] = Some(g),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    padding,
                } => {
                    let need_input = self.requires_grad(*input);
                    let cg = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        *padding,
                        &g,
                        need_input,
                    )?;
                    if let Some(di) = cg.input {
                        self.accumulate(&mut grads, *input, di.data());
                    }
                    self.accumulate(&mut grads, *kernel, cg.kernel.data());
                    if let Some(b) = bias {
                        self.accumulate(&mut grads, *b, cg.bias.data());
                    }
                }
                Op::BatchNorm {
                    input,
                    scale,
                    shift,
                    mode,
                    stats,
                } => {
                    let bg = ops::batch_norm_backward(
                        self.value(*input),
                        self.value(*scale),
                        stats,
                        *mode,
                        &g,
                    )?;
                    self.accumulate(&mut grads, *input, bg.input.data());
                    self.accumulate(&mut grads, *scale, bg.scale.data());
                    self.accumulate(&mut grads, *shift, bg.shift.data());
                }
                Op::Relu(input) => {
                    let x = self.value(*input);
                    let d: Vec<T> = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    self.accumulate(&mut grads, *input, &d);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.data());
                    self.accumulate(&mut grads, *b, g.data());
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let da: Vec<T> = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&p, &q)| p * q)
                        .collect();
                    let db: Vec<T> = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&p, &q)| p * q)
                        .collect();
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::Dropout { input, mask } => {
                    let d: Vec<T> = g.data().iter().zip(mask).map(|(&p, &m)| p * m).collect();
                    self.accumulate(&mut grads, *input, &d);
                }
                Op::Dense {
                    input,
                    weights,
                    bias,
                } => {
                    let dg = ops::dense_backward(self.value(*input), self.value(*weights), &g)?;
                    self.accumulate(&mut grads, *input, dg.input.data());
                    self.accumulate(&mut grads, *weights, dg.weights.data());
                    self.accumulate(&mut grads, *bias, dg.bias.data());
                }
                Op::Reshape(input) => self.accumulate(&mut grads, *input, g.data()),
                Op::Sum(input) => {
                    let n = self.value(*input).len();
                    self.accumulate(&mut grads, *input, &vec![g.item(); n]);
                }
                Op::Combine(terms) => {
                    for &(v, w) in terms {
                        self.accumulate(&mut grads, v, &[w * g.item()]);
                    }
                }
                Op::Scalar { inputs, partials } => {
                    let up = g.item();
                    for (v, p) in inputs.iter().zip(partials) {
                        let d: Vec<T> = p.data().iter().map(|&x| x * up).collect();
                        self.accumulate(&mut grads, *v, &d);
                    }
                }
            }
        }

        // Leaves that do not feed the loss get explicit zeros.
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && leaves[idx].is_none() {
                leaves[idx] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

/// Gradients of a loss with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every operation appends one node holding its output value and whatever it
//! needs for the backward pass. Nodes are only ever appended, so the node list
//! is already in topological order and [`Tape::backward`] is a single reverse
//! sweep that visits each node once.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, Padding, PoolGeometry};
use crate::tensor::{Real, Tensor};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

/// Guard against dividing by a zero norm in [`Tape::l2_normalize`].
pub const L2_EPS: f64 = 1e-12;

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
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        geom: PoolGeometry,
    },
    GlobalAvgPool {
        input: Var,
        positions: usize,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
        rows: usize,
        n_in: usize,
        n_out: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    L2Normalize {
        input: Var,
        norms: Vec<T>,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormInfer {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
    },
    BinaryCrossEntropy {
        probs: Var,
        targets: Vec<T>,
    },
    CategoricalCrossEntropy {
        probs: Var,
        targets: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics from a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n - 1) variance, used for running-statistic updates.
    pub variance: Vec<T>,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape into `(rows, width)` around its last axis.
fn rows_and_width(shape: &[usize]) -> Result<(usize, usize)> {
    let (&width, lead) = shape
        .split_last()
        .ok_or_else(|| Error::shape("operation needs at least rank 1"))?;
    Ok((lead.iter().product(), width))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &str) -> Result<Var> {
        value.check_finite(name)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor), &[a], "scale")
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let out = Tensor::scalar(x.sum() / T::lit(x.len() as f64));
        self.push(out, Op::Mean(a), &[a], "mean")
    }

    /// `sum(x^2)` as a rank-0 tensor.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().map(|&v| v * v).sum());
        self.push(out, Op::SumSquares(a), &[a], "sum_squares")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a], "reshape")
    }

    /// Collapses everything after the leading batch axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        let (&n, rest) = shape
            .split_first()
            .ok_or_else(|| Error::shape("flatten needs a batch axis"))?;
        let width = rest.iter().product();
        self.reshape(a, &[n, width])
    }

    /// 2-D convolution of an `[N, H, W, Cin]` batch with `[Kh, Kw, Cin, Cout]` kernels.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        if self.value(bias).shape() != [geom.out_c] {
            return Err(Error::shape(format!(
                "conv2d bias must have shape [{}], got {:?}",
                geom.out_c,
                self.value(bias).shape()
            )));
        }
        let data = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geom,
        );
        let out = Tensor::new(geom.output_shape().to_vec(), data)?;
        self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &[input, kernel, bias],
            "conv2d",
        )
    }

    pub fn maxpool2d(&mut self, input: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let geom = PoolGeometry::new(self.value(input).shape(), window, stride)?;
        let (data, argmax) = kernels::maxpool_forward(self.value(input).data(), &geom);
        let out = Tensor::new(geom.output_shape().to_vec(), data)?;
        self.push(out, Op::MaxPool { input, argmax }, &[input], "maxpool2d")
    }

    pub fn avgpool2d(&mut self, input: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let geom = PoolGeometry::new(self.value(input).shape(), window, stride)?;
        let data = kernels::avgpool_forward(self.value(input).data(), &geom);
        let out = Tensor::new(geom.output_shape().to_vec(), data)?;
        self.push(out, Op::AvgPool { input, geom }, &[input], "avgpool2d")
    }

    /// `[N, H, W, C] -> [N, C]`, the per-channel spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let &[n, h, w, c] = x.shape() else {
            return Err(Error::shape(format!(
                "global_avg_pool needs [N, H, W, C], got {:?}",
                x.shape()
            )));
        };
        if h == 0 || w == 0 {
            return Err(Error::shape("global_avg_pool needs H, W >= 1"));
        }
        let positions = h * w;
        let inv = T::one() / T::lit(positions as f64);
        let mut data = vec![T::zero(); n * c];
        for (b, out) in data.chunks_mut(c).enumerate() {
            for p in x.data()[b * positions * c..(b + 1) * positions * c].chunks(c) {
                for (o, &v) in out.iter_mut().zip(p) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let out = Tensor::new(vec![n, c], data)?;
        self.push(out, Op::GlobalAvgPool { input, positions }, &[input], "global_avg_pool")
    }

    /// `x W + b` for `x: [N, n]`, `W: [n, m]`, `b: [m]`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weights).shape(),
            self.value(bias).shape(),
        );
        let (&[rows, n_in], &[w_in, n_out]) = (xs, ws) else {
            return Err(Error::shape(format!(
                "dense needs input [N, n] and weights [n, m], got {xs:?} and {ws:?}"
            )));
        };
        if w_in != n_in || bs != [n_out] {
            return Err(Error::shape(format!(
                "dense dimension mismatch: input {xs:?}, weights {ws:?}, bias {bs:?}"
            )));
        }
        let mut data = kernels::matmul(
            self.value(input).data(),
            self.value(weights).data(),
            rows,
            n_in,
            n_out,
        );
        let b = self.value(bias).data();
        for row in data.chunks_mut(n_out.max(1)) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let out = Tensor::new(vec![rows, n_out], data)?;
        self.push(
            out,
            Op::Dense {
                input,
                weights,
                bias,
                rows,
                n_in,
                n_out,
            },
            &[input, weights, bias],
            "dense",
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(a), &[a], "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a], "sigmoid")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (_, k) = rows_and_width(x.shape())?;
        if k == 0 {
            return Err(Error::shape("softmax over an empty axis"));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(k) {
            softmax_in_place(row);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Softmax(a), &[a], "softmax")
    }

    /// Divides each row (last axis) by `max(||row||, 1e-12)`.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (_, k) = rows_and_width(x.shape())?;
        let mut data = x.data().to_vec();
        let mut norms = Vec::new();
        if k > 0 {
            for row in data.chunks_mut(k) {
                let n = l2_normalize_in_place(row);
                norms.push(n);
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::L2Normalize { input: a, norms }, &[a], "l2_normalize")
    }

    /// Training-mode batch normalization over every axis but the last.
    pub fn batchnorm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let (rows, k) = self.bn_dims(input, gamma, beta)?;
        if rows < 2 {
            return Err(Error::Input(format!(
                "batchnorm in training mode needs at least 2 samples per feature, got {rows}"
            )));
        }
        let x = self.value(input).data();
        let inv_rows = T::one() / T::lit(rows as f64);
        let mut mean = vec![T::zero(); k];
        for row in x.chunks(k) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_rows);
        let mut var = vec![T::zero(); k];
        for row in x.chunks(k) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let unbiased: Vec<T> = var
            .iter()
            .map(|&s| s / T::lit((rows - 1) as f64))
            .collect();
        let inv_std: Vec<T> = var
            .iter()
            .map(|&s| T::one() / (s * inv_rows + T::lit(eps)).sqrt())
            .collect();
        let (out, xhat) = self.bn_apply(input, gamma, beta, &mean, &inv_std)?;
        let v = self.push(
            out,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[input, gamma, beta],
            "batchnorm",
        )?;
        Ok((
            v,
            BatchStats {
                mean,
                variance: unbiased,
            },
        ))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batchnorm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        variance: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, k) = self.bn_dims(input, gamma, beta)?;
        if mean.len() != k || variance.len() != k {
            return Err(Error::shape(format!(
                "batchnorm running statistics must have {k} entries"
            )));
        }
        let inv_std: Vec<T> = variance
            .iter()
            .map(|&v| T::one() / (v + T::lit(eps)).sqrt())
            .collect();
        let (out, xhat) = self.bn_apply(input, gamma, beta, mean, &inv_std)?;
        self.push(
            out,
            Op::BatchNormInfer {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[input, gamma, beta],
            "batchnorm",
        )
    }

    fn bn_dims(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let (rows, k) = rows_and_width(self.value(input).shape())?;
        if self.value(gamma).shape() != [k] || self.value(beta).shape() != [k] {
            return Err(Error::shape(format!(
                "batchnorm gamma/beta must have shape [{k}]"
            )));
        }
        Ok((rows, k))
    }

    fn bn_apply(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
    ) -> Result<(Tensor<T>, Vec<T>)> {
        let x = self.value(input);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let k = g.len();
        let mut xhat = x.data().to_vec();
        let mut out = vec![T::zero(); xhat.len()];
        for (xr, orow) in xhat.chunks_mut(k).zip(out.chunks_mut(k)) {
            for j in 0..k {
                xr[j] = (xr[j] - mean[j]) * inv_std[j];
                orow[j] = xr[j] * g[j] + b[j];
            }
        }
        Ok((Tensor::new(x.shape().to_vec(), out)?, xhat))
    }

    /// Inverted dropout: each element is zeroed with probability `rate`, and
    /// survivors are scaled by `1 / (1 - rate)`. A zero rate records nothing
    /// and returns `input` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, rng: &mut R) -> Result<Var> {
        check_dropout_rate(rate)?;
        if rate == 0.0 {
            return Ok(input);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { input, mask }, &[input], "dropout")
    }

    /// Joins tensors along the last axis; leading extents must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat needs at least one input"))?;
        let lead = {
            let s = self.value(first).shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.value(v).shape();
            let (w, l) = s
                .split_last()
                .ok_or_else(|| Error::shape("concat of a rank-0 tensor"))?;
            if l != lead.as_slice() {
                return Err(Error::shape(format!(
                    "concat: leading extents {l:?} differ from {lead:?}"
                )));
            }
            widths.push(*w);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
            inputs,
            "concat",
        )
    }

    /// Mean binary cross-entropy of probabilities `[N]` or `[N, 1]` against 0/1 targets.
    pub fn binary_crossentropy(&mut self, probs: Var, targets: &[T]) -> Result<Var> {
        let p = self.value(probs);
        if p.len() != targets.len() || targets.is_empty() {
            return Err(Error::shape(format!(
                "binary_crossentropy: {} probabilities for {} targets",
                p.len(),
                targets.len()
            )));
        }
        let (lo, hi) = (T::lit(PROB_CLAMP), T::one() - T::lit(PROB_CLAMP));
        let mut total = T::zero();
        for (&pv, &y) in p.data().iter().zip(targets) {
            let q = pv.max(lo).min(hi);
            total -= y * q.ln() + (T::one() - y) * (T::one() - q).ln();
        }
        let out = Tensor::scalar(total / T::lit(targets.len() as f64));
        self.push(
            out,
            Op::BinaryCrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
            &[probs],
            "binary_crossentropy",
        )
    }

    /// Mean categorical cross-entropy of `[N, k]` probabilities against class indices.
    pub fn categorical_crossentropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let q = self.value(probs);
        let &[n, k] = q.shape() else {
            return Err(Error::shape(format!(
                "categorical_crossentropy needs [N, k] probabilities, got {:?}",
                q.shape()
            )));
        };
        if n != targets.len() || n == 0 {
            return Err(Error::shape(format!(
                "categorical_crossentropy: {n} rows for {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Input(format!("class index {bad} out of range for {k} classes")));
        }
        let (lo, hi) = (T::lit(PROB_CLAMP), T::one() - T::lit(PROB_CLAMP));
        let mut total = T::zero();
        for (row, &t) in q.data().chunks(k).zip(targets) {
            total -= row[t].max(lo).min(hi).ln();
        }
        let out = Tensor::scalar(total / T::lit(n as f64));
        self.push(
            out,
            Op::CategoricalCrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
            &[probs],
            "categorical_crossentropy",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.iter().zip(y).map(|(&d, &q)| d * q).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().zip(x).map(|(&d, &p)| d * p).collect());
                }
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, g.iter().map(|&d| d * *f).collect());
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, vec![g[0]; self.value(*a).len()]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::SumSquares(a) => {
                let two = T::lit(2.0);
                let d = self.value(*a).data().iter().map(|&v| two * v * g[0]).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let cg = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    geom,
                    self.wants(*input),
                );
                if let Some(dx) = cg.input {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *kernel, cg.kernel);
                self.accumulate(grads, *bias, cg.bias);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (&src, &d) in argmax.iter().zip(g) {
                    dx[src] += d;
                }
                self.accumulate(grads, *input, dx);
            }
            Op::AvgPool { input, geom } => {
                self.accumulate(grads, *input, kernels::avgpool_backward(g, geom));
            }
            Op::GlobalAvgPool { input, positions } => {
                let x = self.value(*input);
                let c = x.shape()[3];
                let inv = T::one() / T::lit(*positions as f64);
                let mut dx = Vec::with_capacity(x.len());
                for grow in g.chunks(c) {
                    for _ in 0..*positions {
                        dx.extend(grow.iter().map(|&d| d * inv));
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Dense {
                input,
                weights,
                bias,
                rows,
                n_in,
                n_out,
            } => {
                let (rows, n_in, n_out) = (*rows, *n_in, *n_out);
                if self.wants(*weights) {
                    let xt = kernels::transpose(self.value(*input).data(), rows, n_in);
                    self.accumulate(grads, *weights, kernels::matmul(&xt, g, n_in, rows, n_out));
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); n_out];
                    for row in g.chunks(n_out.max(1)) {
                        for (b, &d) in db.iter_mut().zip(row) {
                            *b += d;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                if self.wants(*input) {
                    let wt = kernels::transpose(self.value(*weights).data(), n_in, n_out);
                    self.accumulate(grads, *input, kernels::matmul(g, &wt, rows, n_out, n_in));
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = g
                    .iter()
                    .zip(y)
                    .map(|(&d, &s)| d * s * (T::one() - s))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let k = *node.value.shape().last().expect("softmax rank >= 1");
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(k).zip(g.chunks(k)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                self.accumulate(grads, *a, dx);
            }
            Op::L2Normalize { input, norms } => {
                let y = node.value.data();
                let k = *node.value.shape().last().expect("l2 rank >= 1");
                let eps = T::lit(L2_EPS);
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.chunks(k).zip(g.chunks(k)).zip(norms) {
                    if n > eps {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        dx.extend(yr.iter().zip(gr).map(|(&p, &q)| (q - p * dot) / n));
                    } else {
                        dx.extend(gr.iter().map(|&q| q / eps));
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gamma).data();
                let k = gm.len();
                let rows = xhat.len() / k;
                let (dgamma, dbeta) = bn_param_grads(g, xhat, k);
                if self.wants(*input) {
                    // dx = inv_std / m * (m * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
                    let mut sum_d = vec![T::zero(); k];
                    let mut sum_dx = vec![T::zero(); k];
                    for (gr, xr) in g.chunks(k).zip(xhat.chunks(k)) {
                        for j in 0..k {
                            let d = gr[j] * gm[j];
                            sum_d[j] += d;
                            sum_dx[j] += d * xr[j];
                        }
                    }
                    let m = T::lit(rows as f64);
                    let mut dx = Vec::with_capacity(xhat.len());
                    for (gr, xr) in g.chunks(k).zip(xhat.chunks(k)) {
                        for j in 0..k {
                            let d = gr[j] * gm[j];
                            dx.push(inv_std[j] / m * (m * d - sum_d[j] - xr[j] * sum_dx[j]));
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::BatchNormInfer {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gamma).data();
                let k = gm.len();
                let (dgamma, dbeta) = bn_param_grads(g, xhat, k);
                if self.wants(*input) {
                    let mut dx = Vec::with_capacity(g.len());
                    for gr in g.chunks(k) {
                        for j in 0..k {
                            dx.push(gr[j] * gm[j] * inv_std[j]);
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Dropout { input, mask } => {
                self.accumulate(grads, *input, g.iter().zip(mask).map(|(&d, &m)| d * m).collect());
            }
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, v, d);
                    }
                    offset += w;
                }
            }
            Op::BinaryCrossEntropy { probs, targets } => {
                let p = self.value(*probs).data();
                let n = T::lit(targets.len() as f64);
                let (lo, hi) = (T::lit(PROB_CLAMP), T::one() - T::lit(PROB_CLAMP));
                let d = p
                    .iter()
                    .zip(targets)
                    .map(|(&pv, &y)| {
                        if pv < lo || pv > hi {
                            T::zero()
                        } else {
                            g[0] * ((T::one() - y) / (T::one() - pv) - y / pv) / n
                        }
                    })
                    .collect();
                self.accumulate(grads, *probs, d);
            }
            Op::CategoricalCrossEntropy { probs, targets } => {
                let q = self.value(*probs);
                let k = q.shape()[1];
                let n = T::lit(targets.len() as f64);
                let (lo, hi) = (T::lit(PROB_CLAMP), T::one() - T::lit(PROB_CLAMP));
                let mut d = vec![T::zero(); q.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let v = q.data()[r * k + t];
                    if v >= lo && v <= hi {
                        d[r * k + t] = -g[0] / (v * n);
                    }
                }
                self.accumulate(grads, *probs, d);
            }
        }
    }
}

fn bn_param_grads<T: Real>(g: &[T], xhat: &[T], k: usize) -> (Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); k];
    let mut dbeta = vec![T::zero(); k];
    for (gr, xr) in g.chunks(k).zip(xhat.chunks(k)) {
        for j in 0..k {
            dgamma[j] += gr[j] * xr[j];
            dbeta[j] += gr[j];
        }
    }
    (dgamma, dbeta)
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} must lie in [0, 1)")));
    }
    Ok(())
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Numerically stable softmax (max-subtracted) of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Normalizes `row` in place and returns `max(||row||, eps)`.
pub fn l2_normalize_in_place<T: Real>(row: &mut [T]) -> T {
    let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::lit(L2_EPS));
    for v in row.iter_mut() {
        *v /= norm;
    }
    norm
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient matches shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Whether any gradient reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

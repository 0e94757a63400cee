//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node whose inputs were
//! created earlier, so node order is already a topological order and the
//! backward pass is a single reverse sweep. Gradients are summed whenever a
//! value fans out into several consumers.
//!
//! Activations for the convolutional ops use the `[batch, channels, length]`
//! layout.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Max(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis0(Var),
    Reshape(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    PadLast {
        x: Var,
        left: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        pad_right: usize,
        /// im2col matrix of the input, `[c·k, n·l]`.
        cols: Vec<f64>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    ChannelScale {
        x: Var,
        scale: Vec<f64>,
    },
    DecouplePenalty {
        w: Var,
        lambda: f64,
        include_diagonal: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Statistics of one training-mode batch-norm application.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: IndexMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to an arbitrary node; zeros if unreachable.
    pub fn wrt(&self, graph: &Graph, var: Var) -> Tensor {
        let shape = graph.value(var).shape().to_vec();
        match &self.nodes[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradients keyed by parameter id, for every non-frozen parameter that
    /// entered the graph.
    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> IndexMap<String, Tensor> {
        self.params
    }

    pub fn param(&self, id: &str) -> Option<&Tensor> {
        self.params.get(id)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: IndexMap<String, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `(batch, channels, length)` view of a 2-D `[n, f]` or 3-D `[n, c, l]` shape.
fn ncl(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [n, f] => Some((n, f, 1)),
        [n, c, l] => Some((n, c, l)),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input that is not a registered parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for parameter `id`. Repeated calls return the same node, so a
    /// parameter used in several places gets one summed gradient. Frozen
    /// parameters and buffers enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: &str) -> Result<Var> {
        if let Some(&v) = self.param_leaves.get(id) {
            return Ok(v);
        }
        let entry = store.entry(id)?;
        let trainable = entry.kind == crate::params::ParamKind::Trainable && !entry.frozen;
        let v = self.push(entry.value.clone(), Op::Leaf, trainable);
        if trainable {
            self.param_leaves.insert(id.to_string(), v);
        }
        Ok(v)
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op_name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("max", a, b, f64::max, Op::Max(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(shape_err("mul_const", tx, c));
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MulConst(x, c.data().to_vec()), rg))
    }

    /// `[n, m] + [m]`, broadcasting the vector over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let m = match *tx.shape() {
            [_, m] if tr.shape() == [m] => m,
            _ => return Err(shape_err("add_row", tx, tr)),
        };
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tr.data()[i % m])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    /// `[n, k] · [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k, m) = match (ta.shape(), tb.shape()) {
            (&[n, k], &[k2, m]) if k == k2 => (n, k, m),
            _ => return Err(shape_err("matmul", ta, tb)),
        };
        let mut out = vec![0.0; n * m];
        matmul_into(ta.data(), tb.data(), &mut out, n, k, m);
        let value = Tensor::new(vec![n, m], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(value, Op::Abs(x), rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.data().iter().any(|&v| v < 0.0) {
            return Err(Error::numerical("sqrt of a negative value"));
        }
        let value = tx.map(f64::sqrt);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Sqrt(x), rg))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let value = Tensor::scalar(tx.data().iter().sum::<f64>() / tx.len() as f64);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    /// Column means of a `[n, m]` tensor.
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = match *tx.shape() {
            [n, m] if n > 0 => (n, m),
            _ => {
                return Err(Error::Shape {
                    op: "mean_axis0",
                    lhs: tx.shape().to_vec(),
                    rhs: vec![],
                })
            }
        };
        let mut out = vec![0.0; m];
        for row in tx.data().chunks(m) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let value = Tensor::new(vec![m], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MeanAxis0(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let value = tx.reshape(shape.to_vec()).map_err(|_| Error::Shape {
            op: "reshape",
            lhs: tx.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `x[..., start..start+len]` along the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let last = *tx
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("slice of a scalar"))?;
        if start + len > last {
            return Err(Error::invalid(format!(
                "slice {start}..{} out of range for last axis {last}",
                start + len
            )));
        }
        let data = tx
            .data()
            .chunks(last)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceLast { x, start }, rg))
    }

    /// Zero padding along the last axis.
    pub fn pad_last(&mut self, x: Var, left: usize, right: usize) -> Result<Var> {
        let tx = self.value(x);
        let last = *tx
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("pad of a scalar"))?;
        let width = last + left + right;
        let mut data = Vec::with_capacity(tx.len() / last.max(1) * width);
        for row in tx.data().chunks(last) {
            data.extend(std::iter::repeat_n(0.0, left));
            data.extend_from_slice(row);
            data.extend(std::iter::repeat_n(0.0, right));
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::PadLast { x, left }, rg))
    }

    /// Length-preserving 1-D convolution with zero padding.
    ///
    /// `x: [n, c, l]`, `w: [o, c, k]`, `b: [o]`. Output position `i` of
    /// channel `o` is `b[o] + Σ_c Σ_j x[c, i + r - j] · w[o, c, j]` with
    /// `r = k / 2`, so odd filters are centred and even filters carry their
    /// extra padding on the right.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, c, l, o, k) = match (tx.shape(), tw.shape(), tb.shape()) {
            (&[n, c, l], &[o, c2, k], &[o2]) if c == c2 && o == o2 && k > 0 => (n, c, l, o, k),
            (&[_, _, _], &[_, _, _], _) => return Err(shape_err("conv1d", tx, tw)),
            _ => return Err(shape_err("conv1d", tx, tw)),
        };
        if l == 0 {
            return Err(Error::invalid("conv1d on an empty signal"));
        }
        let r = k / 2;
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        let cols = im2col(xd, n, c, l, k, r);
        let nl = n * l;
        // rows of `acc` are output channels, columns run over batch × position
        let mut acc = vec![0.0; o * nl];
        for (oi, row) in acc.chunks_exact_mut(nl).enumerate() {
            row.fill(bd[oi]);
        }
        gemm_acc(wd, &cols, &mut acc, o, c * k, nl);
        let mut out = vec![0.0; n * o * l];
        for oi in 0..o {
            for bi in 0..n {
                out[(bi * o + oi) * l..(bi * o + oi + 1) * l]
                    .copy_from_slice(&acc[oi * nl + bi * l..oi * nl + (bi + 1) * l]);
            }
        }
        let value = Tensor::new(vec![n, o, l], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                pad_right: r,
                cols,
            },
            rg,
        ))
    }

    /// Non-overlapping max pooling with window and stride 2 over the last
    /// axis of `[n, c, l]`; a trailing odd element is dropped.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, c, l) = match *tx.shape() {
            [n, c, l] if l >= 2 => (n, c, l),
            _ => {
                return Err(Error::invalid(format!(
                    "max-pool needs [n, c, l] with l >= 2, got {:?}",
                    tx.shape()
                )))
            }
        };
        let lo = l / 2;
        let mut out = Vec::with_capacity(n * c * lo);
        let mut argmax = Vec::with_capacity(n * c * lo);
        for (row_i, row) in tx.data().chunks(l).enumerate() {
            for kk in 0..lo {
                let (a, b) = (row[2 * kk], row[2 * kk + 1]);
                let pick = if b > a { 2 * kk + 1 } else { 2 * kk };
                out.push(row[pick]);
                argmax.push(row_i * l + pick);
            }
        }
        let value = Tensor::new(vec![n, c, lo], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// Batch normalisation with statistics of the current batch.
    ///
    /// Normalises per feature of `[n, f]` or per channel (over batch and
    /// length) of `[n, c, l]`, using the biased batch variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let tx = self.value(x);
        let (n, c, l) = ncl(tx.shape()).ok_or_else(|| shape_err("batch_norm", tx, tx))?;
        if n < 2 {
            return Err(Error::invalid(
                "batch norm in training mode needs a batch of at least 2",
            ));
        }
        let count = (n * l) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, v) in tx.data().iter().enumerate() {
            mean[(i / l) % c] += v;
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (i, v) in tx.data().iter().enumerate() {
            let d = v - mean[(i / l) % c];
            var[(i / l) % c] += d * d;
        }
        var.iter_mut().for_each(|s| *s /= count);
        let stats = BatchStats { mean, var };
        let y = self.batch_norm_apply(x, gamma, beta, &stats.mean, &stats.var, eps, true)?;
        Ok((y, stats))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.batch_norm_apply(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (_, c, l) = ncl(tx.shape()).ok_or_else(|| shape_err("batch_norm", tx, tg))?;
        if tg.shape() != [c] || tb.shape() != [c] || mean.len() != c || var.len() != c {
            return Err(shape_err("batch_norm", tx, tg));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(tx.len());
        let mut out = Vec::with_capacity(tx.len());
        for (i, v) in tx.data().iter().enumerate() {
            let ch = (i / l) % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(h * tg.data()[ch] + tb.data()[ch]);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// Multiplies each `(sample, channel)` row of `[n, c, l]` (or each entry
    /// of `[n, c]`) by a constant factor; this is how spatial dropout masks
    /// are applied.
    pub fn channel_scale(&mut self, x: Var, scale: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        let (n, c, l) = ncl(tx.shape()).ok_or_else(|| shape_err("channel_scale", tx, tx))?;
        if scale.len() != n * c {
            return Err(Error::Shape {
                op: "channel_scale",
                lhs: tx.shape().to_vec(),
                rhs: vec![scale.len()],
            });
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * scale[i / l])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::ChannelScale { x, scale }, rg))
    }

    /// `λ Σ_{i<m-1} Σ_{i'≥i} Σ_l |w[l,i] · w[l,i']|` for `w: [p_in, m]`.
    ///
    /// With `include_diagonal = false` the inner sum starts at `i' = i + 1`.
    pub fn decouple_penalty(&mut self, w: Var, lambda: f64, include_diagonal: bool) -> Result<Var> {
        if lambda < 0.0 {
            return Err(Error::invalid(format!(
                "penalty weight must be >= 0, got {lambda}"
            )));
        }
        let tw = self.value(w);
        let (p_in, m) = match *tw.shape() {
            [p, m] => (p, m),
            _ => return Err(shape_err("decouple_penalty", tw, tw)),
        };
        let d = tw.data();
        let mut total = 0.0;
        for i in 0..m.saturating_sub(1) {
            let start = if include_diagonal { i } else { i + 1 };
            for i2 in start..m {
                for row in 0..p_in {
                    total += (d[row * m + i] * d[row * m + i2]).abs();
                }
            }
        }
        let rg = self.rg(w);
        Ok(self.push(
            Tensor::scalar(lambda * total),
            Op::DecouplePenalty {
                w,
                lambda,
                include_diagonal,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                lhs: lv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .param_leaves
            .iter()
            .map(|(id, &v)| {
                let shape = self.value(v).shape().to_vec();
                let t = match &grads[v.0] {
                    Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
                    None => Tensor::zeros(shape),
                };
                (id.clone(), t)
            })
            .collect();
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        // Accumulates `f(i)` into the gradient of `v` when `v` needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Max(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if va[i] >= vb[i] {
                            s[i] += g[i];
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        if vb[i] > va[i] {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)
            }),
            Op::MulConst(x, c) => acc(*x, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * c[i];
                }
            }),
            Op::AddRow(x, row) => {
                acc(*x, &mut |s| add_into(s, g));
                let m = nodes[row.0].value.len();
                acc(*row, &mut |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % m] += gv;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = G · Bᵀ, dB = Aᵀ · G
                acc(*a, &mut |s| {
                    for i in 0..n {
                        for j in 0..m {
                            let gv = g[i * m + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                s[i * k + p] += gv * tb.data()[p * m + j];
                            }
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..n {
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let dst = &mut s[p * m..(p + 1) * m];
                            for (d, gv) in dst.iter_mut().zip(&g[i * m..(i + 1) * m]) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let vx = nodes[x.0].value.data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if vx[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::Abs(x) => {
                let vx = nodes[x.0].value.data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * sign(vx[i]);
                    }
                })
            }
            Op::Sqrt(x) => {
                let out = node.value.data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if out[i] > 0.0 {
                            s[i] += g[i] * 0.5 / out[i];
                        }
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n))
            }
            Op::MeanAxis0(x) => {
                let shape = nodes[x.0].value.shape();
                let (n, m) = (shape[0], shape[1]);
                acc(*x, &mut |s| {
                    for (i, sv) in s.iter_mut().enumerate() {
                        *sv += g[i % m] / n as f64;
                    }
                })
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::SliceLast { x, start } => {
                let last_in = *nodes[x.0].value.shape().last().unwrap();
                let last_out = *node.value.shape().last().unwrap();
                acc(*x, &mut |s| {
                    for (row, grow) in s.chunks_mut(last_in).zip(g.chunks(last_out)) {
                        add_into(&mut row[*start..*start + last_out], grow);
                    }
                })
            }
            Op::PadLast { x, left } => {
                let last_in = *nodes[x.0].value.shape().last().unwrap();
                let last_out = *node.value.shape().last().unwrap();
                acc(*x, &mut |s| {
                    for (row, grow) in s.chunks_mut(last_in).zip(g.chunks(last_out)) {
                        add_into(row, &grow[*left..*left + last_in]);
                    }
                })
            }
            Op::Conv1d {
                x,
                w,
                b,
                pad_right,
                cols,
            } => {
                let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                let (n, c, l) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (o, k) = (tw.shape()[0], tw.shape()[2]);
                let nl = n * l;
                let mut g2 = vec![0.0; o * nl];
                for bi in 0..n {
                    for oi in 0..o {
                        g2[oi * nl + bi * l..oi * nl + (bi + 1) * l]
                            .copy_from_slice(&g[(bi * o + oi) * l..(bi * o + oi + 1) * l]);
                    }
                }
                acc(*x, &mut |s| {
                    let ck = c * k;
                    let mut wt = vec![0.0; ck * o];
                    for oi in 0..o {
                        for q in 0..ck {
                            wt[q * o + oi] = tw.data()[oi * ck + q];
                        }
                    }
                    let mut dcols = vec![0.0; ck * nl];
                    gemm_acc(&wt, &g2, &mut dcols, ck, o, nl);
                    col2im_add(&dcols, s, n, c, l, k, *pad_right);
                });
                acc(*w, &mut |s| {
                    let ck = c * k;
                    // dWᵀ = cols · g2ᵀ
                    let mut g2t = vec![0.0; nl * o];
                    for oi in 0..o {
                        for (col, &v) in g2[oi * nl..(oi + 1) * nl].iter().enumerate() {
                            g2t[col * o + oi] = v;
                        }
                    }
                    let mut dwt = vec![0.0; ck * o];
                    gemm_acc(cols, &g2t, &mut dwt, ck, nl, o);
                    for q in 0..ck {
                        for oi in 0..o {
                            s[oi * ck + q] += dwt[q * o + oi];
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for (oi, grow) in g2.chunks_exact(nl).enumerate() {
                        s[oi] += grow.iter().sum::<f64>();
                    }
                });
            }
            Op::MaxPool { x, argmax } => acc(*x, &mut |s| {
                for (gv, &src) in g.iter().zip(argmax) {
                    s[src] += gv;
                }
            }),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let tx = &nodes[x.0].value;
                let (n, c, l) = ncl(tx.shape()).unwrap();
                let count = (n * l) as f64;
                let gam = nodes[gamma.0].value.data();
                let ch = |i: usize| (i / l) % c;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, gv) in g.iter().enumerate() {
                    sum_g[ch(i)] += gv;
                    sum_gx[ch(i)] += gv * xhat[i];
                }
                acc(*gamma, &mut |s| add_into(s, &sum_gx));
                acc(*beta, &mut |s| add_into(s, &sum_g));
                acc(*x, &mut |s| {
                    for (i, sv) in s.iter_mut().enumerate() {
                        let cc = ch(i);
                        let scale = gam[cc] * inv_std[cc];
                        *sv += if *batch_stats {
                            scale * (g[i] - sum_g[cc] / count - xhat[i] * sum_gx[cc] / count)
                        } else {
                            scale * g[i]
                        };
                    }
                });
            }
            Op::ChannelScale { x, scale } => {
                let l = ncl(nodes[x.0].value.shape()).unwrap().2;
                acc(*x, &mut |s| {
                    for (i, sv) in s.iter_mut().enumerate() {
                        *sv += g[i] * scale[i / l];
                    }
                })
            }
            Op::DecouplePenalty {
                w,
                lambda,
                include_diagonal,
            } => {
                let tw = &nodes[w.0].value;
                let (p_in, m) = (tw.shape()[0], tw.shape()[1]);
                let d = tw.data();
                acc(*w, &mut |s| {
                    for i in 0..m.saturating_sub(1) {
                        let start = if *include_diagonal { i } else { i + 1 };
                        for i2 in start..m {
                            for row in 0..p_in {
                                let (a, b) = (d[row * m + i], d[row * m + i2]);
                                let sg = sign(a * b) * lambda * g[0];
                                s[row * m + i] += sg * b;
                                s[row * m + i2] += sg * a;
                            }
                        }
                    }
                })
            }
        }
    }
}

/// Output positions `lo..hi` whose input index `i + shift` lies in `0..len`.
fn valid_range(shift: isize, len: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// `[c·k, n·l]` with row `ci·k + j`, column `bi·l + i` holding
/// `x[bi, ci, i + r − j]`, zero outside the signal.
fn im2col(x: &[f64], n: usize, c: usize, l: usize, k: usize, r: usize) -> Vec<f64> {
    let nl = n * l;
    let mut cols = vec![0.0; c * k * nl];
    for ci in 0..c {
        for j in 0..k {
            let shift = r as isize - j as isize;
            let (lo, hi) = valid_range(shift, l);
            if lo >= hi {
                continue;
            }
            let s0 = (lo as isize + shift) as usize;
            let row = &mut cols[(ci * k + j) * nl..(ci * k + j + 1) * nl];
            for bi in 0..n {
                let src = &x[(bi * c + ci) * l..(bi * c + ci + 1) * l];
                row[bi * l + lo..bi * l + hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx`.
fn col2im_add(cols: &[f64], dx: &mut [f64], n: usize, c: usize, l: usize, k: usize, r: usize) {
    let nl = n * l;
    for ci in 0..c {
        for j in 0..k {
            let shift = r as isize - j as isize;
            let (lo, hi) = valid_range(shift, l);
            if lo >= hi {
                continue;
            }
            let s0 = (lo as isize + shift) as usize;
            let row = &cols[(ci * k + j) * nl..(ci * k + j + 1) * nl];
            for bi in 0..n {
                let dst = &mut dx[(bi * c + ci) * l..(bi * c + ci + 1) * l];
                for (d, v) in dst[s0..s0 + (hi - lo)]
                    .iter_mut()
                    .zip(&row[bi * l + lo..bi * l + hi])
                {
                    *d += v;
                }
            }
        }
    }
}

/// `c[m, n] += a[m, k] · b[k, n]`, all row-major. Every entry accumulates
/// its products in increasing `k`, exactly like the textbook triple loop;
/// the blocking only keeps a 4 × 8 tile of `c` in registers.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    const NR: usize = 8;
    for j in (0..n).step_by(NR) {
        let nr = NR.min(n - j);
        for i in (0..m).step_by(MR) {
            let mr = MR.min(m - i);
            if mr == MR && nr == NR {
                let mut acc = [[0.0f64; NR]; MR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
                }
                for p in 0..k {
                    let bp: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().expect("NR");
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = a[(i + r) * k + p];
                        for (x, &bv) in row.iter_mut().zip(bp) {
                            *x += av * bv;
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
                }
            } else {
                for r in i..i + mr {
                    for q in j..j + nr {
                        let mut x = c[r * n + q];
                        for p in 0..k {
                            x += a[r * k + p] * b[p * n + q];
                        }
                        c[r * n + q] = x;
                    }
                }
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.constant(t(&[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_and_abs_forward() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1.0, 2.0]));
        let b = g.constant(t(&[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let c = g.constant(Tensor::scalar(-3.5));
        let ab = g.abs(c);
        assert_eq!(g.value(ab).item().unwrap(), 3.5);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1.0, 2.0]));
        let b = g.constant(t(&[1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(
            err.contains("add") && err.contains("[2]") && err.contains("[3]"),
            "{err}"
        );
        let m1 = g.constant(Tensor::zeros(vec![2, 3]));
        let m2 = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(g.matmul(m1, m2).unwrap_err().to_string().contains("matmul"));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(&g, x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_subgradient_convention() {
        for (x0, expect) in [(-1.0, 0.0), (0.0, 0.0), (2.0, 1.0)] {
            let mut g = Graph::new();
            let x = g.input(Tensor::scalar(x0));
            let y = g.relu(x);
            let grads = g.backward(y).unwrap();
            assert_eq!(grads.wrt(&g, x).item().unwrap(), expect);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(t(&[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn fan_out_sums_branch_gradients() {
        // f(x) = relu(x)·3 + x·x
        let mut g = Graph::new();
        let x = g.input(t(&[1.5, -2.0]));
        let a = g.relu(x);
        let a = g.scale(a, 3.0);
        let b = g.mul(x, x).unwrap();
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(&g, x).data(), &[3.0 + 3.0, -4.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        use crate::params::{ParamKind, ParamStore};
        let mut store = ParamStore::new();
        store
            .register("a", ParamKind::Trainable, &[1], || t(&[2.0]))
            .unwrap();
        store
            .register("b", ParamKind::Trainable, &[1], || t(&[5.0]))
            .unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let _b = g.param(&store, "b").unwrap();
        let sq = g.mul(a, a).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param("a").unwrap().data(), &[4.0]);
        assert_eq!(grads.param("b").unwrap().data(), &[0.0]);
    }

    #[test]
    fn frozen_parameter_is_a_constant() {
        use crate::params::{ParamKind, ParamStore};
        let mut store = ParamStore::new();
        store
            .register("a", ParamKind::Trainable, &[1], || t(&[2.0]))
            .unwrap();
        store.set_frozen("a", true).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let loss = g.sum(a);
        assert!(g.backward(loss).unwrap().params().is_empty());
    }

    #[test]
    fn maxpool_drops_trailing_and_breaks_ties_first() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 1, 4], vec![1.0, 3.0, 2.0, 4.0]).unwrap());
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);

        let x = g.input(Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.0]);

        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 1, 2], vec![5.0, 5.0]).unwrap());
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(&g, x).data(), &[1.0, 0.0]);
    }

    #[test]
    fn slice_and_pad_are_adjoint() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = g.pad_last(x, 1, 2).unwrap();
        assert_eq!(g.value(p).shape(), &[2, 6]);
        assert_eq!(&g.value(p).data()[..6], &[0.0, 1.0, 2.0, 3.0, 0.0, 0.0]);
        let s = g.slice_last(p, 1, 3).unwrap();
        assert_eq!(g.value(s).data(), g.value(x).data());
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(&g, x).data(), &[1.0; 6]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.input(
                Tensor::new(
                    vec![1, 2, 5],
                    (0..10).map(|v| v as f64 * 0.3 - 1.0).collect(),
                )
                .unwrap(),
            );
            let w = g.input(
                Tensor::new(vec![3, 2, 3], (0..18).map(|v| (v as f64).sin()).collect()).unwrap(),
            );
            let b = g.input(t(&[0.1, 0.2, 0.3]));
            let y = g.conv1d(x, w, b).unwrap();
            let y = g.relu(y);
            let loss = g.mean(y).unwrap();
            let grads = g.backward(loss).unwrap();
            (grads.wrt(&g, x), grads.wrt(&g, w))
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(
            a1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            a2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(b1, b2);
    }
}

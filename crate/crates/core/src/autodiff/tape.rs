//! Reverse-mode tape. Every operation appends a node holding its forward
//! value; `backward` walks the nodes in reverse creation order, which is a
//! topological order of the recorded DAG, so each node is visited once.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::conv::{self, ConvGeom, UpGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with batch statistics over batch and spatial dims.
    Train,
    /// Normalise with stored running statistics.
    Eval,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        inners: Vec<usize>,
    },
    Slice {
        input: Var,
        outer: usize,
        in_inner: usize,
        offset: usize,
        out_inner: usize,
    },
    Gather {
        input: Var,
        index: Rc<[usize]>,
    },
    SegmentSum {
        input: Var,
        index: Rc<[usize]>,
    },
    Conv3d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    ConvTranspose3d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: UpGeom,
    },
    MaxPool3d {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm3d {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: BnMode,
        channels: usize,
        spatial: usize,
    },
    GlobalAvgPool {
        input: Var,
        spatial: usize,
    },
    Mean(Var),
    MseLoss {
        input: Var,
        target: Vec<f64>,
    },
    BceWithLogits {
        input: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Running-statistic update produced by a batch-norm layer in training mode.
#[derive(Debug, Clone)]
pub struct BufferUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(Var, ParamId)>>,
    buffer_updates: RefCell<Vec<BufferUpdate>>,
}

/// Gradients of one scalar with respect to every node that requires them.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(Var, ParamId)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient per parameter, summed over every use on the tape.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; store.len()];
        for &(v, id) in &self.params {
            if let Some(g) = self.get(v) {
                match &mut out[id.index()] {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g.to_vec()),
                }
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.borrow_mut().push((v, id));
        v
    }

    /// Non-trainable parameter (e.g. running statistics) read as a constant.
    pub fn buffer(&self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    pub fn record_buffer_update(&self, update: BufferUpdate) {
        self.buffer_updates.borrow_mut().push(update);
    }

    pub fn take_buffer_updates(&self) -> Vec<BufferUpdate> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            gemm(m, k, n, nodes[a.0].value.data(), false, nodes[b.0].value.data(), false, 0.0, &mut out);
        }
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), self.needs(&[a, b])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(Error::Shape(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
            }
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            Tensor::new(ta.shape(), data)?
        };
        Ok(self.push(out, Op::Add(a, b), self.needs(&[a, b])))
    }

    /// Adds a length-n bias to every row of an m×n matrix.
    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[bias.0].value);
            let n = *ta.shape().last().unwrap_or(&0);
            if ta.shape().len() != 2 || tb.len() != n {
                return Err(Error::Shape(format!(
                    "bias {:?} for matrix {:?}",
                    tb.shape(),
                    ta.shape()
                )));
            }
            let mut data = ta.data().to_vec();
            for row in data.chunks_mut(n.max(1)) {
                row.iter_mut().zip(tb.data()).for_each(|(x, b)| *x += b);
            }
            Tensor::new(ta.shape(), data)?
        };
        Ok(self.push(out, Op::AddBias(a, bias), self.needs(&[a, bias])))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = {
            let v = self.value(a);
            Tensor::new(v.shape(), v.data().iter().map(|x| x * s).collect()).expect("same shape")
        };
        self.push(out, Op::Scale(a, s), self.needs(&[a]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = {
            let v = self.value(a);
            Tensor::new(v.shape(), v.data().iter().map(|&x| x.max(0.0)).collect()).expect("same shape")
        };
        self.push(out, Op::Relu(a), self.needs(&[a]))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = {
            let v = self.value(a);
            Tensor::new(v.shape(), v.data().iter().map(|&x| sigmoid(x)).collect()).expect("same shape")
        };
        self.push(out, Op::Sigmoid(a), self.needs(&[a]))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first);
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} for rank {}", base.len())));
        }
        let outer: usize = base[..axis].iter().product();
        let mut inners = Vec::with_capacity(inputs.len());
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::Shape(format!("concat {s:?} with {base:?} on axis {axis}")));
            }
            axis_total += s[axis];
            inners.push(s[axis..].iter().product::<usize>());
        }
        let row: usize = inners.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for (&v, &inner) in inputs.iter().zip(&inners) {
                    data.extend_from_slice(&nodes[v.0].value.data()[o * inner..(o + 1) * inner]);
                }
            }
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let rg = self.needs(inputs);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inners,
            },
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::Shape(format!("slice {start}..{end} on axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let in_inner = s[axis] * inner;
        let out_inner = (end - start) * inner;
        let offset = start * inner;
        let mut data = Vec::with_capacity(outer * out_inner);
        {
            let v = self.value(a);
            for o in 0..outer {
                let base = o * in_inner + offset;
                data.extend_from_slice(&v.data()[base..base + out_inner]);
            }
        }
        let mut shape = s.clone();
        shape[axis] = end - start;
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Slice {
                input: a,
                outer,
                in_inner,
                offset,
                out_inner,
            },
            self.needs(&[a]),
        ))
    }

    /// Rows `index[k]` of an n×d matrix.
    pub fn gather(&self, a: Var, index: Rc<[usize]>) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather from {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        let mut data = Vec::with_capacity(index.len() * d);
        {
            let v = self.value(a);
            for &i in index.iter() {
                if i >= n {
                    return Err(Error::Shape(format!("gather index {i} of {n} rows")));
                }
                data.extend_from_slice(&v.data()[i * d..(i + 1) * d]);
            }
        }
        let t = Tensor::new([index.len(), d], data)?;
        Ok(self.push(t, Op::Gather { input: a, index }, self.needs(&[a])))
    }

    /// Scatter-add of row `k` into output row `index[k]` of an n×d result.
    pub fn segment_sum(&self, a: Var, index: Rc<[usize]>, n: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != index.len() {
            return Err(Error::Shape(format!("segment_sum of {s:?} with {} indices", index.len())));
        }
        let d = s[1];
        let mut data = vec![0.0; n * d];
        {
            let v = self.value(a);
            for (k, &i) in index.iter().enumerate() {
                if i >= n {
                    return Err(Error::Shape(format!("segment index {i} of {n}")));
                }
                let src = &v.data()[k * d..(k + 1) * d];
                data[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(o, x)| *o += x);
            }
        }
        let t = Tensor::new([n, d], data)?;
        Ok(self.push(t, Op::SegmentSum { input: a, index }, self.needs(&[a])))
    }

    /// 3D convolution of `[B, Cin, D, H, W]` with cubic `[Cout, Cin, k, k, k]`
    /// weights.
    pub fn conv3d(&self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(weight), self.shape(bias));
        let geom = ConvGeom::new(&xs, &ws, &bs, stride, pad)?;
        let out = {
            let nodes = self.nodes.borrow();
            conv::conv3d_forward(
                nodes[x.0].value.data(),
                nodes[weight.0].value.data(),
                nodes[bias.0].value.data(),
                &geom,
            )
        };
        let t = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push(
            t,
            Op::Conv3d {
                input: x,
                weight,
                bias,
                geom,
            },
            self.needs(&[x, weight, bias]),
        ))
    }

    /// Stride-2, kernel-2 transposed convolution with `[Cin, Cout, 2, 2, 2]`
    /// weights; doubles every spatial dim.
    pub fn conv_transpose3d(&self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(weight), self.shape(bias));
        let geom = UpGeom::new(&xs, &ws, &bs)?;
        let out = {
            let nodes = self.nodes.borrow();
            conv::conv_transpose3d_forward(
                nodes[x.0].value.data(),
                nodes[weight.0].value.data(),
                nodes[bias.0].value.data(),
                &geom,
            )
        };
        let t = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push(
            t,
            Op::ConvTranspose3d {
                input: x,
                weight,
                bias,
                geom,
            },
            self.needs(&[x, weight, bias]),
        ))
    }

    /// 2x2x2 max pooling with stride 2; spatial dims must be even.
    pub fn maxpool3d(&self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 5 || s[2..].iter().any(|d| d % 2 != 0) {
            return Err(Error::Shape(format!("maxpool3d needs even [B,C,D,H,W], got {s:?}")));
        }
        let (out, argmax) = {
            let v = self.value(x);
            conv::maxpool3d_forward(v.data(), &s)
        };
        let shape = vec![s[0], s[1], s[2] / 2, s[3] / 2, s[4] / 2];
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool3d { input: x, argmax }, self.needs(&[x])))
    }

    /// Per-channel normalisation of `[B, C, ...]`. In eval mode
    /// `running` supplies the mean and variance.
    pub fn batchnorm3d(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let s = self.shape(x);
        if s.len() < 3 {
            return Err(Error::Shape(format!("batchnorm needs [B, C, ...], got {s:?}")));
        }
        let (b, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!("batchnorm affine params for {c} channels")));
        }
        let count = (b * spatial) as f64;
        let (y, xhat, inv_std, stats) = {
            let nodes = self.nodes.borrow();
            let xv = nodes[x.0].value.data();
            let g = nodes[gamma.0].value.data();
            let be = nodes[beta.0].value.data();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            match mode {
                BnMode::Train => {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * spatial;
                            mean[ci] += xv[base..base + spatial].iter().sum::<f64>();
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= count);
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * spatial;
                            var[ci] += xv[base..base + spatial]
                                .iter()
                                .map(|v| (v - mean[ci]) * (v - mean[ci]))
                                .sum::<f64>();
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= count);
                }
                BnMode::Eval => {
                    let (rm, rv) = running.ok_or_else(|| {
                        Error::Config("eval-mode batchnorm needs running statistics".into())
                    })?;
                    if rm.len() != c || rv.len() != c {
                        return Err(Error::Shape("running statistics length".into()));
                    }
                    mean.copy_from_slice(rm);
                    var.copy_from_slice(rv);
                }
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = vec![0.0; xv.len()];
            let mut y = vec![0.0; xv.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * spatial;
                    for i in base..base + spatial {
                        xhat[i] = (xv[i] - mean[ci]) * inv_std[ci];
                        y[i] = g[ci] * xhat[i] + be[ci];
                    }
                }
            }
            let stats = (mode == BnMode::Train).then(|| {
                let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                (mean, var.iter().map(|v| v * unbiased).collect())
            });
            (y, xhat, inv_std, stats)
        };
        let rg = self.needs(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(s, y)?,
            Op::BatchNorm3d {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
                channels: c,
                spatial,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Mean over all trailing dims of `[B, C, ...]`, giving `[B, C]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 3 {
            return Err(Error::Shape(format!("global pool needs [B, C, ...], got {s:?}")));
        }
        let spatial: usize = s[2..].iter().product();
        let data = {
            let v = self.value(x);
            v.data()
                .chunks(spatial)
                .map(|c| c.iter().sum::<f64>() / spatial as f64)
                .collect()
        };
        Ok(self.push(
            Tensor::new([s[0], s[1]], data)?,
            Op::GlobalAvgPool { input: x, spatial },
            self.needs(&[x]),
        ))
    }

    pub fn mean(&self, a: Var) -> Var {
        let m = {
            let v = self.value(a);
            v.data().iter().sum::<f64>() / v.len().max(1) as f64
        };
        self.push(Tensor::scalar(m), Op::Mean(a), self.needs(&[a]))
    }

    pub fn mse_loss(&self, pred: Var, target: &[f64]) -> Result<Var> {
        let loss = {
            let v = self.value(pred);
            if v.len() != target.len() {
                return Err(Error::Shape(format!("mse of {} vs {} values", v.len(), target.len())));
            }
            v.data()
                .iter()
                .zip(target)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / v.len().max(1) as f64
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MseLoss {
                input: pred,
                target: target.to_vec(),
            },
            self.needs(&[pred]),
        ))
    }

    /// Mean binary cross-entropy of logits against targets in [0, 1].
    pub fn bce_with_logits(&self, logits: Var, target: &[f64]) -> Result<Var> {
        let loss = {
            let v = self.value(logits);
            if v.len() != target.len() {
                return Err(Error::Shape(format!("bce of {} vs {} values", v.len(), target.len())));
            }
            v.data()
                .iter()
                .zip(target)
                .map(|(&z, &y)| bce_term(z, y))
                .sum::<f64>()
                / v.len().max(1) as f64
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                input: logits,
                target: target.to_vec(),
            },
            self.needs(&[logits]),
        ))
    }

    /// Gradients of the scalar `loss` with respect to every upstream node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if node.requires_grad {
                self.backprop_node(&nodes, node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Grads {
            grads,
            params: self.params.borrow().clone(),
        })
    }

    fn backprop_node(&self, nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| nodes[v.0].value.data();
        let len = |v: Var| nodes[v.0].value.len();
        let want = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if want(*a) {
                    accumulate(&mut grads[a.0], m * k, |ga| gemm(m, n, k, g, false, val(*b), true, 1.0, ga));
                }
                if want(*b) {
                    accumulate(&mut grads[b.0], k * n, |gb| gemm(k, m, n, val(*a), true, g, false, 1.0, gb));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        accumulate(&mut grads[v.0], g.len(), |ga| {
                            ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                        });
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                    });
                }
                if want(*bias) {
                    let n = len(*bias);
                    accumulate(&mut grads[bias.0], n, |gb| {
                        for row in g.chunks(n.max(1)) {
                            gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Concat { inputs, outer, inners } => {
                let row: usize = inners.iter().sum();
                let mut off = 0;
                for (&v, &inner) in inputs.iter().zip(inners) {
                    if want(v) {
                        accumulate(&mut grads[v.0], outer * inner, |gv| {
                            for o in 0..*outer {
                                let src = &g[o * row + off..o * row + off + inner];
                                gv[o * inner..(o + 1) * inner]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(x, y)| *x += y);
                            }
                        });
                    }
                    off += inner;
                }
            }
            Op::Slice {
                input,
                outer,
                in_inner,
                offset,
                out_inner,
            } => {
                accumulate(&mut grads[input.0], outer * in_inner, |gi| {
                    for o in 0..*outer {
                        let dst = &mut gi[o * in_inner + offset..o * in_inner + offset + out_inner];
                        dst.iter_mut()
                            .zip(&g[o * out_inner..(o + 1) * out_inner])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Gather { input, index } => {
                let d = nodes[input.0].value.shape()[1];
                accumulate(&mut grads[input.0], len(*input), |gi| {
                    for (k, &i) in index.iter().enumerate() {
                        gi[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[k * d..(k + 1) * d])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::SegmentSum { input, index } => {
                let d = nodes[input.0].value.shape()[1];
                accumulate(&mut grads[input.0], len(*input), |gi| {
                    for (k, &i) in index.iter().enumerate() {
                        gi[k * d..(k + 1) * d]
                            .iter_mut()
                            .zip(&g[i * d..(i + 1) * d])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            } => {
                let mut gx = want(*input).then(|| vec![0.0; len(*input)]);
                let mut gw = vec![0.0; len(*weight)];
                let mut gb = vec![0.0; len(*bias)];
                conv::conv3d_backward(val(*input), val(*weight), g, geom, gx.as_deref_mut(), &mut gw, &mut gb);
                if let Some(gx) = gx {
                    accumulate(&mut grads[input.0], gx.len(), |a| add_into(a, &gx));
                }
                if want(*weight) {
                    accumulate(&mut grads[weight.0], gw.len(), |a| add_into(a, &gw));
                }
                if want(*bias) {
                    accumulate(&mut grads[bias.0], gb.len(), |a| add_into(a, &gb));
                }
            }
            Op::ConvTranspose3d {
                input,
                weight,
                bias,
                geom,
            } => {
                let mut gx = want(*input).then(|| vec![0.0; len(*input)]);
                let mut gw = vec![0.0; len(*weight)];
                let mut gb = vec![0.0; len(*bias)];
                conv::conv_transpose3d_backward(
                    val(*input),
                    val(*weight),
                    g,
                    geom,
                    gx.as_deref_mut(),
                    &mut gw,
                    &mut gb,
                );
                if let Some(gx) = gx {
                    accumulate(&mut grads[input.0], gx.len(), |a| add_into(a, &gx));
                }
                if want(*weight) {
                    accumulate(&mut grads[weight.0], gw.len(), |a| add_into(a, &gw));
                }
                if want(*bias) {
                    accumulate(&mut grads[bias.0], gb.len(), |a| add_into(a, &gb));
                }
            }
            Op::MaxPool3d { input, argmax } => {
                accumulate(&mut grads[input.0], len(*input), |gi| {
                    for (k, &src) in argmax.iter().enumerate() {
                        gi[src] += g[k];
                    }
                });
            }
            Op::BatchNorm3d {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
                channels,
                spatial,
            } => {
                let c = *channels;
                let s = *spatial;
                let b = g.len() / (c * s);
                let gam = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * s;
                        for i in base..base + s {
                            dgamma[ci] += g[i] * xhat[i];
                            dbeta[ci] += g[i];
                        }
                    }
                }
                if want(*input) {
                    let count = (b * s) as f64;
                    accumulate(&mut grads[input.0], g.len(), |gi| {
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * s;
                                match mode {
                                    BnMode::Train => {
                                        // dxhat = g·γ; Σdxhat = γ·dβ; Σdxhat·xhat = γ·dγ
                                        let k = gam[ci] * inv_std[ci] / count;
                                        for i in base..base + s {
                                            gi[i] += k * (count * g[i] - dbeta[ci] - xhat[i] * dgamma[ci]);
                                        }
                                    }
                                    BnMode::Eval => {
                                        let k = gam[ci] * inv_std[ci];
                                        for i in base..base + s {
                                            gi[i] += k * g[i];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if want(*gamma) {
                    accumulate(&mut grads[gamma.0], c, |a| add_into(a, &dgamma));
                }
                if want(*beta) {
                    accumulate(&mut grads[beta.0], c, |a| add_into(a, &dbeta));
                }
            }
            Op::GlobalAvgPool { input, spatial } => {
                let inv = 1.0 / *spatial as f64;
                accumulate(&mut grads[input.0], len(*input), |gi| {
                    for (k, chunk) in gi.chunks_mut(*spatial).enumerate() {
                        chunk.iter_mut().for_each(|x| *x += g[k] * inv);
                    }
                });
            }
            Op::Mean(a) => {
                let n = len(*a);
                let d = g[0] / n.max(1) as f64;
                accumulate(&mut grads[a.0], n, |ga| ga.iter_mut().for_each(|x| *x += d));
            }
            Op::MseLoss { input, target } => {
                let p = val(*input);
                let k = 2.0 * g[0] / p.len().max(1) as f64;
                accumulate(&mut grads[input.0], p.len(), |gi| {
                    for i in 0..p.len() {
                        gi[i] += k * (p[i] - target[i]);
                    }
                });
            }
            Op::BceWithLogits { input, target } => {
                let z = val(*input);
                let k = g[0] / z.len().max(1) as f64;
                accumulate(&mut grads[input.0], z.len(), |gi| {
                    for i in 0..z.len() {
                        gi[i] += k * (sigmoid(z[i]) - target[i]);
                    }
                });
            }
        }
    }
}

fn add_into(acc: &mut [f64], src: &[f64]) {
    acc.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `-(y·ln σ(z) + (1-y)·ln(1-σ(z)))`.
#[inline]
pub fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

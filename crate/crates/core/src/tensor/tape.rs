//! Index-based computation tape. Every forward op appends a node holding its
//! output buffer plus whatever it saved for the reverse sweep; node ids are
//! plain indices, so an op can only reference earlier nodes and creation
//! order doubles as a topological order for `backward`.

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

pub type TensorId = usize;

/// Zero padding applied to the time axis of `conv1d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding: output length `T - K + 1`.
    Valid,
    /// Output length equals input length.
    Same,
}

#[derive(Debug, Clone)]
enum MmKind {
    /// `[m,k] . [k,n]`, also `[b,m,k] . [k,n]` with the batch folded into m.
    Flat { m: usize, k: usize, n: usize },
    /// `[m,k] . [b,k,n]`: shared left operand.
    SharedLhs { b: usize, m: usize, k: usize, n: usize },
    /// `[b,m,k] . [b,k,n]`.
    Batched { b: usize, m: usize, k: usize, n: usize },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    AddBcast(TensorId, TensorId),
    MulBcast(TensorId, TensorId),
    Tanh(TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Rsqrt(TensorId),
    MatMul {
        a: TensorId,
        b: TensorId,
        kind: MmKind,
    },
    TransposeLast(TensorId),
    Reshape(TensorId),
    ConcatLast(Vec<TensorId>),
    IndexAxis {
        x: TensorId,
        axis: usize,
        index: usize,
    },
    SumAll(TensorId),
    MeanAxis {
        x: TensorId,
        axis: usize,
    },
    Softmax(TensorId),
    Conv1d {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        pad_left: usize,
    },
    BatchNormTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MulMask {
        x: TensorId,
        mask: Vec<f64>,
    },
    WeightedCe {
        logits: TensorId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> TensorId {
        let (shape, data) = t.into_parts();
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.leaf(t, false)
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn value(&self, id: TensorId) -> Tensor {
        Tensor::new(&self.nodes[id].shape, self.nodes[id].data.clone()).expect("node is consistent")
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn check_same(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::dimension(op, &self.nodes[a].shape, &self.nodes[b].shape));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same("add", a, b)?;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a].shape.clone(), data, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a].shape.clone(), data, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a].shape.clone(), data, rg, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, x: TensorId, s: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|v| v + s).collect();
        let rg = self.requires(x);
        self.push(self.nodes[x].shape.clone(), data, rg, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: TensorId, s: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|v| v * s).collect();
        let rg = self.requires(x);
        self.push(self.nodes[x].shape.clone(), data, rg, Op::MulScalar(x, s))
    }

    fn check_suffix(&self, op: &'static str, x: TensorId, y: TensorId) -> Result<usize> {
        let xs = &self.nodes[x].shape;
        let ys = &self.nodes[y].shape;
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != ys[..] {
            return Err(Error::dimension(op, xs, ys));
        }
        Ok(self.nodes[y].data.len())
    }

    /// `x + y` where `y`'s shape is a trailing suffix of `x`'s shape; `y` is
    /// broadcast across the leading axes (bias rows, positional encodings).
    pub fn add_bcast(&mut self, x: TensorId, y: TensorId) -> Result<TensorId> {
        let inner = self.check_suffix("add_bcast", x, y)?;
        let yd = &self.nodes[y].data;
        let data: Vec<f64> = self.nodes[x]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + yd[i % inner])
            .collect();
        let rg = self.requires(x) || self.requires(y);
        Ok(self.push(self.nodes[x].shape.clone(), data, rg, Op::AddBcast(x, y)))
    }

    pub fn mul_bcast(&mut self, x: TensorId, y: TensorId) -> Result<TensorId> {
        let inner = self.check_suffix("mul_bcast", x, y)?;
        let yd = &self.nodes[y].data;
        let data: Vec<f64> = self.nodes[x]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * yd[i % inner])
            .collect();
        let rg = self.requires(x) || self.requires(y);
        Ok(self.push(self.nodes[x].shape.clone(), data, rg, Op::MulBcast(x, y)))
    }

    // ── Unary ───────────────────────────────────────────────────────────

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|v| v.tanh()).collect();
        let rg = self.requires(x);
        self.push(self.nodes[x].shape.clone(), data, rg, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|v| v.max(0.0)).collect();
        let rg = self.requires(x);
        self.push(self.nodes[x].shape.clone(), data, rg, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x]
            .data
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let rg = self.requires(x);
        self.push(self.nodes[x].shape.clone(), data, rg, Op::Sigmoid(x))
    }

    /// `x^(-1/2)` elementwise; inputs must be strictly positive.
    pub fn rsqrt(&mut self, x: TensorId) -> Result<TensorId> {
        if self.nodes[x].data.iter().any(|v| *v <= 0.0) {
            return Err(Error::Numeric("rsqrt requires strictly positive input".into()));
        }
        let data: Vec<f64> = self.nodes[x].data.iter().map(|v| 1.0 / v.sqrt()).collect();
        let rg = self.requires(x);
        Ok(self.push(self.nodes[x].shape.clone(), data, rg, Op::Rsqrt(x)))
    }

    // ── Matrix multiplication ───────────────────────────────────────────

    /// Supported operand ranks: `[m,k].[k,n]`, `[b,m,k].[k,n]`,
    /// `[m,k].[b,k,n]`, `[b,m,k].[b,k,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let asp = self.nodes[a].shape.clone();
        let bsp = self.nodes[b].shape.clone();
        let (kind, out_shape) = match (asp.len(), bsp.len()) {
            (2, 2) => {
                if asp[1] != bsp[0] {
                    return Err(Error::dimension("matmul", &asp, &bsp));
                }
                (
                    MmKind::Flat {
                        m: asp[0],
                        k: asp[1],
                        n: bsp[1],
                    },
                    vec![asp[0], bsp[1]],
                )
            }
            (3, 2) => {
                if asp[2] != bsp[0] {
                    return Err(Error::dimension("matmul", &asp, &bsp));
                }
                (
                    MmKind::Flat {
                        m: asp[0] * asp[1],
                        k: asp[2],
                        n: bsp[1],
                    },
                    vec![asp[0], asp[1], bsp[1]],
                )
            }
            (2, 3) => {
                if asp[1] != bsp[1] {
                    return Err(Error::dimension("matmul", &asp, &bsp));
                }
                (
                    MmKind::SharedLhs {
                        b: bsp[0],
                        m: asp[0],
                        k: asp[1],
                        n: bsp[2],
                    },
                    vec![bsp[0], asp[0], bsp[2]],
                )
            }
            (3, 3) => {
                if asp[0] != bsp[0] || asp[2] != bsp[1] {
                    return Err(Error::dimension("matmul", &asp, &bsp));
                }
                (
                    MmKind::Batched {
                        b: asp[0],
                        m: asp[1],
                        k: asp[2],
                        n: bsp[2],
                    },
                    vec![asp[0], asp[1], bsp[2]],
                )
            }
            _ => return Err(Error::dimension("matmul", &asp, &bsp)),
        };
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        {
            let ad = &self.nodes[a].data;
            let bd = &self.nodes[b].data;
            match kind {
                MmKind::Flat { m, k, n } => mm_nn(ad, bd, m, k, n, &mut out),
                MmKind::SharedLhs { b, m, k, n } => {
                    for i in 0..b {
                        mm_nn(ad, &bd[i * k * n..(i + 1) * k * n], m, k, n, &mut out[i * m * n..(i + 1) * m * n]);
                    }
                }
                MmKind::Batched { b, m, k, n } => {
                    for i in 0..b {
                        mm_nn(
                            &ad[i * m * k..(i + 1) * m * k],
                            &bd[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                            &mut out[i * m * n..(i + 1) * m * n],
                        );
                    }
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out_shape, out, rg, Op::MatMul { a, b, kind }))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.nodes[x].shape.clone();
        if shape.len() < 2 {
            return Err(Error::dimension("transpose_last", &shape, &[]));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = self.nodes[x].data.len() / (r * c);
        let mut out = vec![0.0; self.nodes[x].data.len()];
        transpose_blocks(&self.nodes[x].data, batch, r, c, &mut out);
        let mut out_shape = shape;
        let nd = out_shape.len();
        out_shape.swap(nd - 2, nd - 1);
        let rg = self.requires(x);
        Ok(self.push(out_shape, out, rg, Op::TransposeLast(x)))
    }

    pub fn reshape(&mut self, x: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[x].data.len() {
            return Err(Error::dimension("reshape", &self.nodes[x].shape, new_shape));
        }
        let data = self.nodes[x].data.clone();
        let rg = self.requires(x);
        Ok(self.push(new_shape.to_vec(), data, rg, Op::Reshape(x)))
    }

    /// Concatenate along the last axis; all other axes must agree.
    pub fn concat_last(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_last needs at least one input".into()));
        }
        let lead_shape = self.nodes[parts[0]].shape[..self.nodes[parts[0]].shape.len() - 1].to_vec();
        let mut total_last = 0usize;
        for &p in parts {
            let s = &self.nodes[p].shape;
            if s.is_empty() || s[..s.len() - 1] != lead_shape[..] {
                return Err(Error::dimension("concat_last", &self.nodes[parts[0]].shape, s));
            }
            total_last += s[s.len() - 1];
        }
        let rows: usize = lead_shape.iter().product();
        let mut out = vec![0.0; rows * total_last];
        let mut offset = 0usize;
        for &p in parts {
            let last = *self.nodes[p].shape.last().expect("checked nonempty");
            let pd = &self.nodes[p].data;
            for row in 0..rows {
                out[row * total_last + offset..row * total_last + offset + last]
                    .copy_from_slice(&pd[row * last..(row + 1) * last]);
            }
            offset += last;
        }
        let mut out_shape = lead_shape;
        out_shape.push(total_last);
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out_shape, out, rg, Op::ConcatLast(parts.to_vec())))
    }

    /// Select one index along `axis`, dropping that axis.
    pub fn index_axis(&mut self, x: TensorId, axis: usize, index: usize) -> Result<TensorId> {
        let shape = self.nodes[x].shape.clone();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(Error::Contract(format!(
                "index_axis: axis {axis} index {index} out of bounds for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let alen = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let src = (o * alen + index) * inner;
            out[o * inner..(o + 1) * inner].copy_from_slice(&self.nodes[x].data[src..src + inner]);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.requires(x);
        Ok(self.push(out_shape, out, rg, Op::IndexAxis { x, axis, index }))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x].data.iter().sum();
        let rg = self.requires(x);
        self.push(vec![1], vec![s], rg, Op::SumAll(x))
    }

    /// Mean over `axis`, dropping that axis.
    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.nodes[x].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "mean_axis: axis {axis} out of bounds for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let alen = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let xd = &self.nodes[x].data;
        for o in 0..outer {
            for j in 0..alen {
                let src = (o * alen + j) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    out[dst + i] += xd[src + i];
                }
            }
        }
        let scale = 1.0 / alen as f64;
        for v in &mut out {
            *v *= scale;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.requires(x);
        Ok(self.push(out_shape, out, rg, Op::MeanAxis { x, axis }))
    }

    // ── Neural-net primitives ───────────────────────────────────────────

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        if self.nodes[x].data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let shape = self.nodes[x].shape.clone();
        let c = *shape.last().ok_or_else(|| {
            Error::Contract("softmax requires at least one axis".into())
        })?;
        let rows = self.nodes[x].data.len() / c;
        let mut out = vec![0.0; self.nodes[x].data.len()];
        for r in 0..rows {
            let row = &self.nodes[x].data[r * c..(r + 1) * c];
            softmax_row(row, &mut out[r * c..(r + 1) * c]);
        }
        let rg = self.requires(x);
        Ok(self.push(shape, out, rg, Op::Softmax(x)))
    }

    /// Cross-correlation along the trailing time axis. `x` is `[C_in, T]` or
    /// `[G, C_in, T]`, `w` is `[C_out, C_in, K]`, `bias` is `[C_out]`.
    pub fn conv1d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        padding: Padding,
    ) -> Result<TensorId> {
        let xs = self.nodes[x].shape.clone();
        let ws = self.nodes[w].shape.clone();
        if ws.len() != 3 || (xs.len() != 2 && xs.len() != 3) {
            return Err(Error::dimension("conv1d", &xs, &ws));
        }
        let (g, c_in, t) = if xs.len() == 2 {
            (1, xs[0], xs[1])
        } else {
            (xs[0], xs[1], xs[2])
        };
        let (c_out, wc, k) = (ws[0], ws[1], ws[2]);
        if wc != c_in {
            return Err(Error::dimension("conv1d", &xs, &ws));
        }
        let (pad_left, pad_right) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => ((k - 1) / 2, k / 2),
        };
        if t + pad_left + pad_right < k {
            return Err(Error::dimension("conv1d", &xs, &ws));
        }
        let t_out = t + pad_left + pad_right - k + 1;
        if let Some(b) = bias {
            if self.nodes[b].shape != [c_out] {
                return Err(Error::dimension("conv1d", &ws, &self.nodes[b].shape));
            }
        }
        let mut out = vec![0.0; g * c_out * t_out];
        {
            let xd = &self.nodes[x].data;
            let wd = &self.nodes[w].data;
            for gi in 0..g {
                for o in 0..c_out {
                    let orow = &mut out[(gi * c_out + o) * t_out..(gi * c_out + o + 1) * t_out];
                    for c in 0..c_in {
                        let xrow = &xd[(gi * c_in + c) * t..(gi * c_in + c + 1) * t];
                        for kk in 0..k {
                            let wv = wd[(o * c_in + c) * k + kk];
                            if wv == 0.0 {
                                continue;
                            }
                            for (to, ov) in orow.iter_mut().enumerate() {
                                let xi = to + kk;
                                if xi >= pad_left && xi - pad_left < t {
                                    *ov += wv * xrow[xi - pad_left];
                                }
                            }
                        }
                    }
                    if let Some(b) = bias {
                        let bv = self.nodes[b].data[o];
                        for v in orow.iter_mut() {
                            *v += bv;
                        }
                    }
                }
            }
        }
        let out_shape = if xs.len() == 2 {
            vec![c_out, t_out]
        } else {
            vec![g, c_out, t_out]
        };
        let rg = self.requires(x) || self.requires(w) || bias.is_some_and(|b| self.requires(b));
        Ok(self.push(out_shape, out, rg, Op::Conv1d { x, w, bias, pad_left }))
    }

    /// Batch normalization over rows of `x: [R, F]` using batch statistics.
    /// Returns the output id plus the biased batch mean and variance per
    /// column so the caller can maintain running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, Vec<f64>, Vec<f64>)> {
        let xs = self.nodes[x].shape.clone();
        if xs.len() != 2 {
            return Err(Error::dimension("batch_norm", &xs, &[]));
        }
        let (r, f) = (xs[0], xs[1]);
        if r < 2 {
            return Err(Error::Config(
                "batch_norm in train mode requires a batch of at least 2 rows".into(),
            ));
        }
        if self.nodes[gamma].shape != [f] || self.nodes[beta].shape != [f] {
            return Err(Error::dimension("batch_norm", &xs, &self.nodes[gamma].shape));
        }
        let xd = &self.nodes[x].data;
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for row in 0..r {
            for j in 0..f {
                mean[j] += xd[row * f + j];
            }
        }
        for m in &mut mean {
            *m /= r as f64;
        }
        for row in 0..r {
            for j in 0..f {
                let d = xd[row * f + j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= r as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = &self.nodes[gamma].data;
        let bd = &self.nodes[beta].data;
        let mut out = vec![0.0; r * f];
        for row in 0..r {
            for j in 0..f {
                let xhat = (xd[row * f + j] - mean[j]) * inv_std[j];
                out[row * f + j] = gd[j] * xhat + bd[j];
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let id = self.push(
            xs,
            out,
            rg,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
            },
        );
        Ok((id, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<TensorId> {
        let xs = self.nodes[x].shape.clone();
        if xs.len() != 2 {
            return Err(Error::dimension("batch_norm", &xs, &[]));
        }
        let (r, f) = (xs[0], xs[1]);
        if self.nodes[gamma].shape != [f]
            || self.nodes[beta].shape != [f]
            || running_mean.len() != f
            || running_var.len() != f
        {
            return Err(Error::dimension("batch_norm", &xs, &self.nodes[gamma].shape));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = &self.nodes[x].data;
        let gd = &self.nodes[gamma].data;
        let bd = &self.nodes[beta].data;
        let mut out = vec![0.0; r * f];
        for row in 0..r {
            for j in 0..f {
                let xhat = (xd[row * f + j] - running_mean[j]) * inv_std[j];
                out[row * f + j] = gd[j] * xhat + bd[j];
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            xs,
            out,
            rg,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
        ))
    }

    /// Multiply by a fixed elementwise mask; gradients flow only through
    /// surviving entries. Backs both dropout and top-k sparsification.
    pub fn mul_mask(&mut self, x: TensorId, mask: Vec<f64>) -> Result<TensorId> {
        if mask.len() != self.nodes[x].data.len() {
            return Err(Error::dimension(
                "mul_mask",
                &self.nodes[x].shape,
                &[mask.len()],
            ));
        }
        let data: Vec<f64> = self.nodes[x]
            .data
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let rg = self.requires(x);
        Ok(self.push(self.nodes[x].shape.clone(), data, rg, Op::MulMask { x, mask }))
    }

    /// Inverted dropout: keep with probability `1 - rate`, scaling survivors
    /// by `1/(1 - rate)`. `rate == 0` is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: TensorId,
        rate: f64,
        rng: &mut R,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..self.nodes[x].data.len())
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        self.mul_mask(x, mask)
    }

    /// Class-weighted cross entropy with log-sum-exp stabilization, averaged
    /// over rows: `mean_r(-w[y_r] * log softmax(logits_r)[y_r])`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<TensorId> {
        let ls = self.nodes[logits].shape.clone();
        if ls.len() != 2 {
            return Err(Error::dimension("weighted_cross_entropy", &ls, &[]));
        }
        let (r, c) = (ls[0], ls[1]);
        if targets.len() != r {
            return Err(Error::dimension("weighted_cross_entropy", &ls, &[targets.len()]));
        }
        if weights.len() != c {
            return Err(Error::dimension("weighted_cross_entropy", &ls, &[weights.len()]));
        }
        if let Some(t) = targets.iter().find(|t| **t >= c) {
            return Err(Error::Data(format!(
                "target class {t} out of range for {c} classes"
            )));
        }
        let ld = &self.nodes[logits].data;
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for row in 0..r {
            let lrow = &ld[row * c..(row + 1) * c];
            let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &l) in lrow.iter().enumerate() {
                let e = (l - max).exp();
                probs[row * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[row * c + j] /= sum;
            }
            let lse = max + sum.ln();
            loss += weights[targets[row]] * (lse - lrow[targets[row]]);
        }
        loss /= r as f64;
        let rg = self.requires(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::WeightedCe {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    // ── Reverse sweep ───────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate
    /// additively across fan-out; nodes not reachable from the loss keep
    /// `grad = None`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss] = Some(vec![1.0]);

        for i in (0..=loss).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.step_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = g;
        }
        Ok(())
    }

    fn step_backward(&self, i: TensorId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Allocates the input's gradient buffer only when that input
        // participates in differentiation.
        macro_rules! sink {
            ($id:expr) => {{
                let id: TensorId = $id;
                if self.nodes[id].requires_grad {
                    Some(grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].data.len()]))
                } else {
                    None
                }
            }};
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(da) = sink!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = sink!(*b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = sink!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = sink!(*b) {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires_grad {
                    let bd = &self.nodes[b].data;
                    let da = grads[a].get_or_insert_with(|| vec![0.0; self.nodes[a].data.len()]);
                    for k in 0..g.len() {
                        da[k] += g[k] * bd[k];
                    }
                }
                if self.nodes[b].requires_grad {
                    let ad = &self.nodes[a].data;
                    let db = grads[b].get_or_insert_with(|| vec![0.0; self.nodes[b].data.len()]);
                    for k in 0..g.len() {
                        db[k] += g[k] * ad[k];
                    }
                }
            }
            Op::AddScalar(x) => {
                if let Some(dx) = sink!(*x) {
                    add_into(dx, g);
                }
            }
            Op::MulScalar(x, s) => {
                if let Some(dx) = sink!(*x) {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv * s;
                    }
                }
            }
            Op::AddBcast(x, y) => {
                if let Some(dx) = sink!(*x) {
                    add_into(dx, g);
                }
                let y = *y;
                if self.nodes[y].requires_grad {
                    let inner = self.nodes[y].data.len();
                    let dy = grads[y].get_or_insert_with(|| vec![0.0; inner]);
                    for (k, gv) in g.iter().enumerate() {
                        dy[k % inner] += gv;
                    }
                }
            }
            Op::MulBcast(x, y) => {
                let (x, y) = (*x, *y);
                let inner = self.nodes[y].data.len();
                if self.nodes[x].requires_grad {
                    let yd = &self.nodes[y].data;
                    let dx = grads[x].get_or_insert_with(|| vec![0.0; self.nodes[x].data.len()]);
                    for (k, gv) in g.iter().enumerate() {
                        dx[k] += gv * yd[k % inner];
                    }
                }
                if self.nodes[y].requires_grad {
                    let xd = &self.nodes[x].data;
                    let dy = grads[y].get_or_insert_with(|| vec![0.0; inner]);
                    for (k, gv) in g.iter().enumerate() {
                        dy[k % inner] += gv * xd[k];
                    }
                }
            }
            Op::Tanh(x) => {
                if self.nodes[*x].requires_grad {
                    let yd = &self.nodes[i].data;
                    let dx = grads[*x].get_or_insert_with(|| vec![0.0; yd.len()]);
                    for k in 0..g.len() {
                        dx[k] += g[k] * (1.0 - yd[k] * yd[k]);
                    }
                }
            }
            Op::Relu(x) => {
                if self.nodes[*x].requires_grad {
                    let yd = &self.nodes[i].data;
                    let dx = grads[*x].get_or_insert_with(|| vec![0.0; yd.len()]);
                    for k in 0..g.len() {
                        if yd[k] > 0.0 {
                            dx[k] += g[k];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.nodes[*x].requires_grad {
                    let yd = &self.nodes[i].data;
                    let dx = grads[*x].get_or_insert_with(|| vec![0.0; yd.len()]);
                    for k in 0..g.len() {
                        dx[k] += g[k] * yd[k] * (1.0 - yd[k]);
                    }
                }
            }
            Op::Rsqrt(x) => {
                if self.nodes[*x].requires_grad {
                    let yd = &self.nodes[i].data;
                    let dx = grads[*x].get_or_insert_with(|| vec![0.0; yd.len()]);
                    for k in 0..g.len() {
                        dx[k] += g[k] * -0.5 * yd[k] * yd[k] * yd[k];
                    }
                }
            }
            Op::MatMul { a, b, kind } => {
                let (a, b) = (*a, *b);
                match *kind {
                    MmKind::Flat { m, k, n } => {
                        if self.nodes[a].requires_grad {
                            let bd = &self.nodes[b].data;
                            let da = grads[a].get_or_insert_with(|| vec![0.0; m * k]);
                            mm_nt(g, bd, m, n, k, da);
                        }
                        if self.nodes[b].requires_grad {
                            let ad = &self.nodes[a].data;
                            let db = grads[b].get_or_insert_with(|| vec![0.0; k * n]);
                            mm_tn(ad, g, m, k, n, db);
                        }
                    }
                    MmKind::SharedLhs { b: bs, m, k, n } => {
                        if self.nodes[a].requires_grad {
                            let bd = &self.nodes[b].data;
                            let da = grads[a].get_or_insert_with(|| vec![0.0; m * k]);
                            for i in 0..bs {
                                mm_nt(&g[i * m * n..(i + 1) * m * n], &bd[i * k * n..(i + 1) * k * n], m, n, k, da);
                            }
                        }
                        if self.nodes[b].requires_grad {
                            let ad = &self.nodes[a].data;
                            let db = grads[b].get_or_insert_with(|| vec![0.0; bs * k * n]);
                            for i in 0..bs {
                                mm_tn(ad, &g[i * m * n..(i + 1) * m * n], m, k, n, &mut db[i * k * n..(i + 1) * k * n]);
                            }
                        }
                    }
                    MmKind::Batched { b: bs, m, k, n } => {
                        if self.nodes[a].requires_grad {
                            let bd = &self.nodes[b].data;
                            let da = grads[a].get_or_insert_with(|| vec![0.0; bs * m * k]);
                            for i in 0..bs {
                                mm_nt(
                                    &g[i * m * n..(i + 1) * m * n],
                                    &bd[i * k * n..(i + 1) * k * n],
                                    m,
                                    n,
                                    k,
                                    &mut da[i * m * k..(i + 1) * m * k],
                                );
                            }
                        }
                        if self.nodes[b].requires_grad {
                            let ad = &self.nodes[a].data;
                            let db = grads[b].get_or_insert_with(|| vec![0.0; bs * k * n]);
                            for i in 0..bs {
                                mm_tn(
                                    &ad[i * m * k..(i + 1) * m * k],
                                    &g[i * m * n..(i + 1) * m * n],
                                    m,
                                    k,
                                    n,
                                    &mut db[i * k * n..(i + 1) * k * n],
                                );
                            }
                        }
                    }
                }
            }
            Op::TransposeLast(x) => {
                if self.nodes[*x].requires_grad {
                    let shape = &self.nodes[i].shape;
                    let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                    let batch = g.len() / (r * c);
                    let mut gt = vec![0.0; g.len()];
                    transpose_blocks(g, batch, r, c, &mut gt);
                    let dx = grads[*x].get_or_insert_with(|| vec![0.0; g.len()]);
                    add_into(dx, &gt);
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = sink!(*x) {
                    add_into(dx, g);
                }
            }
            Op::ConcatLast(parts) => {
                let total_last = *self.nodes[i].shape.last().expect("concat output has axes");
                let rows = g.len() / total_last;
                let mut offset = 0usize;
                for &p in parts {
                    let last = *self.nodes[p].shape.last().expect("concat input has axes");
                    if self.nodes[p].requires_grad {
                        let dp = grads[p].get_or_insert_with(|| vec![0.0; self.nodes[p].data.len()]);
                        for row in 0..rows {
                            for j in 0..last {
                                dp[row * last + j] += g[row * total_last + offset + j];
                            }
                        }
                    }
                    offset += last;
                }
            }
            Op::IndexAxis { x, axis, index } => {
                if self.nodes[*x].requires_grad {
                    let shape = &self.nodes[*x].shape;
                    let outer: usize = shape[..*axis].iter().product();
                    let alen = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let dx = grads[*x].get_or_insert_with(|| vec![0.0; self.nodes[*x].data.len()]);
                    for o in 0..outer {
                        let dst = (o * alen + index) * inner;
                        for k in 0..inner {
                            dx[dst + k] += g[o * inner + k];
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(dx) = sink!(*x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                if self.nodes[*x].requires_grad {
                    let shape = &self.nodes[*x].shape;
                    let outer: usize = shape[..*axis].iter().product();
                    let alen = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let scale = 1.0 / alen as f64;
                    let dx = grads[*x].get_or_insert_with(|| vec![0.0; self.nodes[*x].data.len()]);
                    for o in 0..outer {
                        for j in 0..alen {
                            let dst = (o * alen + j) * inner;
                            for k in 0..inner {
                                dx[dst + k] += g[o * inner + k] * scale;
                            }
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.nodes[*x].requires_grad {
                    let p = &self.nodes[i].data;
                    let c = *self.nodes[i].shape.last().expect("softmax output has axes");
                    let rows = p.len() / c;
                    let dx = grads[*x].get_or_insert_with(|| vec![0.0; p.len()]);
                    for r in 0..rows {
                        let pr = &p[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = pr.iter().zip(gr).map(|(pv, gv)| pv * gv).sum();
                        for j in 0..c {
                            dx[r * c + j] += pr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, bias, pad_left } => {
                let (x, w) = (*x, *w);
                let xs = &self.nodes[x].shape;
                let ws = &self.nodes[w].shape;
                let (gb, c_in, t) = if xs.len() == 2 {
                    (1, xs[0], xs[1])
                } else {
                    (xs[0], xs[1], xs[2])
                };
                let (c_out, k) = (ws[0], ws[2]);
                let t_out = *self.nodes[i].shape.last().expect("conv output has axes");
                if self.nodes[x].requires_grad {
                    let wd = &self.nodes[w].data;
                    let dx = grads[x].get_or_insert_with(|| vec![0.0; self.nodes[x].data.len()]);
                    for gi in 0..gb {
                        for o in 0..c_out {
                            let grow = &g[(gi * c_out + o) * t_out..(gi * c_out + o + 1) * t_out];
                            for c in 0..c_in {
                                let dxrow = &mut dx[(gi * c_in + c) * t..(gi * c_in + c + 1) * t];
                                for kk in 0..k {
                                    let wv = wd[(o * c_in + c) * k + kk];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    for (to, gv) in grow.iter().enumerate() {
                                        let xi = to + kk;
                                        if xi >= *pad_left && xi - pad_left < t {
                                            dxrow[xi - pad_left] += wv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if self.nodes[w].requires_grad {
                    let xd = &self.nodes[x].data;
                    let dw = grads[w].get_or_insert_with(|| vec![0.0; self.nodes[w].data.len()]);
                    for gi in 0..gb {
                        for o in 0..c_out {
                            let grow = &g[(gi * c_out + o) * t_out..(gi * c_out + o + 1) * t_out];
                            for c in 0..c_in {
                                let xrow = &xd[(gi * c_in + c) * t..(gi * c_in + c + 1) * t];
                                for kk in 0..k {
                                    let mut acc = 0.0;
                                    for (to, gv) in grow.iter().enumerate() {
                                        let xi = to + kk;
                                        if xi >= *pad_left && xi - pad_left < t {
                                            acc += gv * xrow[xi - pad_left];
                                        }
                                    }
                                    dw[(o * c_in + c) * k + kk] += acc;
                                }
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    if self.nodes[*b].requires_grad {
                        let db = grads[*b].get_or_insert_with(|| vec![0.0; c_out]);
                        for gi in 0..gb {
                            for o in 0..c_out {
                                let grow = &g[(gi * c_out + o) * t_out..(gi * c_out + o + 1) * t_out];
                                db[o] += grow.iter().sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let f = mean.len();
                let r = g.len() / f;
                let xd = &self.nodes[x].data;
                let gd = &self.nodes[gamma].data;
                if self.nodes[x].requires_grad {
                    // Per column: dx = inv_std/R * (R*dyh - sum(dyh) - xhat * sum(dyh*xhat))
                    let mut s1 = vec![0.0; f];
                    let mut s2 = vec![0.0; f];
                    for row in 0..r {
                        for j in 0..f {
                            let dyh = g[row * f + j] * gd[j];
                            let xhat = (xd[row * f + j] - mean[j]) * inv_std[j];
                            s1[j] += dyh;
                            s2[j] += dyh * xhat;
                        }
                    }
                    let dx = grads[x].get_or_insert_with(|| vec![0.0; xd.len()]);
                    let rn = r as f64;
                    for row in 0..r {
                        for j in 0..f {
                            let dyh = g[row * f + j] * gd[j];
                            let xhat = (xd[row * f + j] - mean[j]) * inv_std[j];
                            dx[row * f + j] += inv_std[j] * (dyh - s1[j] / rn - xhat * s2[j] / rn);
                        }
                    }
                }
                if self.nodes[gamma].requires_grad {
                    let dg = grads[gamma].get_or_insert_with(|| vec![0.0; f]);
                    for row in 0..r {
                        for j in 0..f {
                            let xhat = (xd[row * f + j] - mean[j]) * inv_std[j];
                            dg[j] += g[row * f + j] * xhat;
                        }
                    }
                }
                if self.nodes[beta].requires_grad {
                    let db = grads[beta].get_or_insert_with(|| vec![0.0; f]);
                    for row in 0..r {
                        for j in 0..f {
                            db[j] += g[row * f + j];
                        }
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let f = mean.len();
                let r = g.len() / f;
                let xd = &self.nodes[x].data;
                let gd = &self.nodes[gamma].data;
                if self.nodes[x].requires_grad {
                    let dx = grads[x].get_or_insert_with(|| vec![0.0; xd.len()]);
                    for row in 0..r {
                        for j in 0..f {
                            dx[row * f + j] += g[row * f + j] * gd[j] * inv_std[j];
                        }
                    }
                }
                if self.nodes[gamma].requires_grad {
                    let dg = grads[gamma].get_or_insert_with(|| vec![0.0; f]);
                    for row in 0..r {
                        for j in 0..f {
                            let xhat = (xd[row * f + j] - mean[j]) * inv_std[j];
                            dg[j] += g[row * f + j] * xhat;
                        }
                    }
                }
                if self.nodes[beta].requires_grad {
                    let db = grads[beta].get_or_insert_with(|| vec![0.0; f]);
                    for row in 0..r {
                        for j in 0..f {
                            db[j] += g[row * f + j];
                        }
                    }
                }
            }
            Op::MulMask { x, mask } => {
                if self.nodes[*x].requires_grad {
                    let dx = grads[*x].get_or_insert_with(|| vec![0.0; mask.len()]);
                    for k in 0..g.len() {
                        dx[k] += g[k] * mask[k];
                    }
                }
            }
            Op::WeightedCe {
                logits,
                targets,
                weights,
                probs,
            } => {
                if self.nodes[*logits].requires_grad {
                    let r = targets.len();
                    let c = weights.len();
                    let scale = g[0] / r as f64;
                    let dl = grads[*logits].get_or_insert_with(|| vec![0.0; r * c]);
                    for row in 0..r {
                        let w = weights[targets[row]] * scale;
                        for j in 0..c {
                            let delta = if j == targets[row] { 1.0 } else { 0.0 };
                            dl[row * c + j] += w * (probs[row * c + j] - delta);
                        }
                    }
                }
            }
        }
    }
}

// ── Kernels ─────────────────────────────────────────────────────────────

/// `out[m,n] += a[m,k] . b[k,n]`
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `out[m,k] += a[m,n] . b[k,n]^T`
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for c in 0..n {
                acc += arow[c] * brow[c];
            }
            orow[j] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T . b[m,n]`
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for j in 0..k {
            let av = a[i * k + j];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[j * n..(j + 1) * n];
            for c in 0..n {
                orow[c] += av * brow[c];
            }
        }
    }
}

fn transpose_blocks(x: &[f64], batch: usize, r: usize, c: usize, out: &mut [f64]) {
    for bi in 0..batch {
        let base = bi * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = x[base + i * c + j];
            }
        }
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (j, &v) in row.iter().enumerate() {
        let e = (v - max).exp();
        out[j] = e;
        sum += e;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

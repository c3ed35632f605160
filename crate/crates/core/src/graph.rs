//! Graph structure learning and graph convolution.
//!
//! The learner derives a sparse directed adjacency over the stations from
//! trainable node embeddings; the convolution side offers a plain GCN layer
//! and mix-hop propagation over both edge directions. All forwards run on
//! the tape, so gradients reach the embeddings through surviving entries.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{init_tensor, Binding, Init, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorId};

/// `M = tanh(α·E·θ)`.
pub fn node_transform(tape: &mut Tape, e: TensorId, theta: TensorId, alpha: f64) -> Result<TensorId> {
    let prod = tape.matmul(e, theta)?;
    let scaled = tape.mul_scalar(prod, alpha);
    Ok(tape.tanh(scaled))
}

/// `A = ReLU(tanh(α(M1·M2ᵀ − M2·M1ᵀ)))`. The pre-activation is
/// antisymmetric, so the result has a zero diagonal and at most one of
/// `A[i][j]`, `A[j][i]` positive.
pub fn pairwise_scores(tape: &mut Tape, m1: TensorId, m2: TensorId, alpha: f64) -> Result<TensorId> {
    let m1t = tape.transpose_last(m1)?;
    let m2t = tape.transpose_last(m2)?;
    let fwd = tape.matmul(m1, m2t)?;
    let bwd = tape.matmul(m2, m1t)?;
    let diff = tape.sub(fwd, bwd)?;
    let scaled = tape.mul_scalar(diff, alpha);
    let squashed = tape.tanh(scaled);
    Ok(tape.relu(squashed))
}

/// Per-row keep mask for the `k` largest entries of a row-major `[R, C]`
/// matrix. Ties keep the lower column index.
pub fn topk_mask(values: &[f64], cols: usize, k: usize) -> Vec<f64> {
    let mut mask = vec![0.0; values.len()];
    let keep = k.min(cols);
    let rows = values.len() / cols;
    for r in 0..rows {
        let row = &values[r * cols..(r + 1) * cols];
        let mut order: Vec<usize> = (0..cols).collect();
        order.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
        for &c in &order[..keep] {
            mask[r * cols + c] = 1.0;
        }
    }
    mask
}

/// Zero all but the `k` largest entries per row. Gradients flow through the
/// kept entries only.
pub fn topk_sparsify(tape: &mut Tape, a: TensorId, k: usize) -> Result<TensorId> {
    let shape = tape.shape(a).to_vec();
    if shape.len() != 2 {
        return Err(Error::dimension("topk_sparsify", &shape, &[]));
    }
    if k == 0 {
        return Err(Error::Config("top-k sparsification needs k >= 1".into()));
    }
    let mask = topk_mask(tape.data(a), shape[1], k);
    tape.mul_mask(a, mask)
}

/// Learns a weighted directed adjacency from per-node embeddings. The
/// embeddings are free parameters, so the graph is input-independent and
/// changes only with training steps.
#[derive(Debug)]
pub struct GraphLearner {
    e1: ParamId,
    e2: ParamId,
    theta1: ParamId,
    theta2: ParamId,
    pub n_nodes: usize,
    pub alpha: f64,
    pub k: usize,
}

impl GraphLearner {
    pub const EMBED_DIM: usize = 8;

    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_nodes: usize,
        embed_dim: usize,
        alpha: f64,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_nodes == 0 || embed_dim == 0 {
            return Err(Error::Config(format!(
                "graph learner {name:?} needs nonzero node count and embedding size"
            )));
        }
        if k == 0 || k > n_nodes {
            return Err(Error::Config(format!(
                "graph learner k must satisfy 1 <= k <= {n_nodes}, got {k}"
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!(
                "graph learner alpha must be positive and finite, got {alpha}"
            )));
        }
        let embed = Init::Uniform { lo: -0.5, hi: 0.5 };
        let linear = Init::Xavier {
            fan_in: embed_dim,
            fan_out: embed_dim,
        };
        Ok(GraphLearner {
            e1: store.add(&format!("{name}.e1"), init_tensor(&[n_nodes, embed_dim], embed, rng))?,
            e2: store.add(&format!("{name}.e2"), init_tensor(&[n_nodes, embed_dim], embed, rng))?,
            theta1: store.add(
                &format!("{name}.theta1"),
                init_tensor(&[embed_dim, embed_dim], linear, rng),
            )?,
            theta2: store.add(
                &format!("{name}.theta2"),
                init_tensor(&[embed_dim, embed_dim], linear, rng),
            )?,
            n_nodes,
            alpha,
            k,
        })
    }

    /// Learned adjacency `[N, N]`: transform both embedding sets, score all
    /// pairs, keep the top-k per row.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding) -> Result<TensorId> {
        let m1 = node_transform(tape, bind.id(self.e1), bind.id(self.theta1), self.alpha)?;
        let m2 = node_transform(tape, bind.id(self.e2), bind.id(self.theta2), self.alpha)?;
        let dense = pairwise_scores(tape, m1, m2, self.alpha)?;
        topk_sparsify(tape, dense, self.k)
    }
}

/// `Ã = D̂^(-1/2)·(A+I)·D̂^(-1/2)` with row-sum degrees. The self-loop keeps
/// every degree >= 1, so the normalization is always defined for
/// non-negative input.
pub fn normalize_adjacency(tape: &mut Tape, a: TensorId) -> Result<TensorId> {
    let shape = tape.shape(a).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::dimension("normalize_adjacency", &shape, &[]));
    }
    if tape.data(a).iter().any(|&v| v.is_nan() || v < 0.0) {
        return Err(Error::Contract(
            "normalize_adjacency requires non-negative entries".into(),
        ));
    }
    let n = shape[0];
    let eye = tape.constant(Tensor::eye(n));
    let hat = tape.add(a, eye)?;
    let ones = tape.constant(Tensor::filled(&[n, 1], 1.0));
    let deg = tape.matmul(hat, ones)?;
    let deg = tape.reshape(deg, &[n])?;
    let dinv = tape.rsqrt(deg)?;
    let cols = tape.mul_bcast(hat, dinv)?;
    let flip = tape.transpose_last(cols)?;
    let rows = tape.mul_bcast(flip, dinv)?;
    tape.transpose_last(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Single graph convolution: `σ(Ã·H·W)`.
#[derive(Debug)]
pub struct GcnLayer {
    w: ParamId,
    pub activation: Activation,
}

impl GcnLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_out: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if f_in == 0 || f_out == 0 {
            return Err(Error::Config(format!(
                "gcn layer {name:?} needs nonzero dimensions, got {f_in}x{f_out}"
            )));
        }
        let init = match activation {
            Activation::Relu => Init::Kaiming { fan_in: f_in },
            Activation::Identity => Init::Xavier {
                fan_in: f_in,
                fan_out: f_out,
            },
        };
        let w = store.add(&format!("{name}.w"), init_tensor(&[f_in, f_out], init, rng))?;
        Ok(GcnLayer { w, activation })
    }

    /// `h` is `[N, F_in]` or `[B, N, F_in]`; `a_norm` is the normalized
    /// adjacency.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        a_norm: TensorId,
        h: TensorId,
    ) -> Result<TensorId> {
        let agg = tape.matmul(a_norm, h)?;
        let pre = tape.matmul(agg, bind.id(self.w))?;
        Ok(match self.activation {
            Activation::Relu => tape.relu(pre),
            Activation::Identity => pre,
        })
    }
}

/// Mix-hop propagation: `H^(0) = H_in`, `H^(h) = β·H_in + (1−β)·Ã·H^(h−1)`,
/// output `Σ_h H^(h)·W^(h)` with one selection weight per hop.
#[derive(Debug)]
pub struct MixHop {
    ws: Vec<ParamId>,
    pub depth: usize,
    pub beta: f64,
}

impl MixHop {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_out: usize,
        depth: usize,
        beta: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if f_in == 0 || f_out == 0 {
            return Err(Error::Config(format!(
                "mix-hop layer {name:?} needs nonzero dimensions, got {f_in}x{f_out}"
            )));
        }
        if depth == 0 {
            return Err(Error::Config(format!("mix-hop layer {name:?} needs depth >= 1")));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config(format!(
                "mix-hop retain ratio must be in [0, 1], got {beta}"
            )));
        }
        let init = Init::Xavier {
            fan_in: f_in,
            fan_out: f_out,
        };
        let ws = (0..=depth)
            .map(|h| store.add(&format!("{name}.w{h}"), init_tensor(&[f_in, f_out], init, rng)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MixHop { ws, depth, beta })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        a_norm: TensorId,
        h_in: TensorId,
    ) -> Result<TensorId> {
        let mut out = tape.matmul(h_in, bind.id(self.ws[0]))?;
        let mut h = h_in;
        for hop in 1..=self.depth {
            let prop = tape.matmul(a_norm, h)?;
            let keep = tape.mul_scalar(h_in, self.beta);
            let push = tape.mul_scalar(prop, 1.0 - self.beta);
            h = tape.add(keep, push)?;
            let sel = tape.matmul(h, bind.id(self.ws[hop]))?;
            out = tape.add(out, sel)?;
        }
        Ok(out)
    }
}

/// Two mix-hop branches over the directed adjacency: inflow on `Ã` and
/// outflow on the independently normalized transpose, summed.
#[derive(Debug)]
pub struct GcModule {
    pub inflow: MixHop,
    pub outflow: MixHop,
}

impl GcModule {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_out: usize,
        depth: usize,
        beta: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(GcModule {
            inflow: MixHop::new(store, &format!("{name}.in"), f_in, f_out, depth, beta, rng)?,
            outflow: MixHop::new(store, &format!("{name}.out"), f_in, f_out, depth, beta, rng)?,
        })
    }

    /// `a` is the raw non-negative directed adjacency `[N, N]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        a: TensorId,
        h: TensorId,
    ) -> Result<TensorId> {
        let a_in = normalize_adjacency(tape, a)?;
        let at = tape.transpose_last(a)?;
        let a_out = normalize_adjacency(tape, at)?;
        let fin = self.inflow.forward(tape, bind, a_in, h)?;
        let fout = self.outflow.forward(tape, bind, a_out, h)?;
        tape.add(fin, fout)
    }
}

//! Temporal encoders: a time-series transformer block with sinusoidal
//! positions, and an inception-style temporal convolution module.
//!
//! Both accept a single window `[W, F]` or a batch `[B, W, F]` and reduce
//! the time axis to one feature vector per window.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{init_tensor, BatchNorm, Binding, Dense, Init, ParamId, ParamStore, PassCtx, Phase};
use crate::tensor::{Padding, Tape, Tensor, TensorId};

/// Sinusoidal position table `[W, F]`:
/// `PE(pos, 2i) = sin(pos / 10000^(2i/F))`, `PE(pos, 2i+1) = cos(·)`.
pub fn positional_encoding(window: usize, features: usize) -> Tensor {
    let mut data = vec![0.0; window * features];
    for pos in 0..window {
        let mut i = 0;
        while i < features {
            let angle = pos as f64 / 10000f64.powf(i as f64 / features as f64);
            data[pos * features + i] = angle.sin();
            if i + 1 < features {
                data[pos * features + i + 1] = angle.cos();
            }
            i += 2;
        }
    }
    Tensor::new(&[window, features], data).expect("shape matches data length")
}

/// `x + PE` over the trailing `[W, F]` axes.
pub fn positional_encode(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
    let shape = tape.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(Error::dimension("positional_encode", &shape, &[]));
    }
    let (w, f) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let pe = tape.constant(positional_encoding(w, f));
    tape.add_bcast(x, pe)
}

/// Scaled dot-product attention with per-head projections. Heads are
/// concatenated and projected back to the input feature count.
#[derive(Debug)]
pub struct MultiHeadAttention {
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wo: ParamId,
    pub heads: usize,
    pub head_dim: usize,
    pub features: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        features: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if features == 0 || heads == 0 || head_dim == 0 {
            return Err(Error::Config(format!(
                "attention {name:?} needs nonzero features, heads, and head size"
            )));
        }
        let proj = Init::Xavier {
            fan_in: features,
            fan_out: head_dim,
        };
        let mut wq = Vec::with_capacity(heads);
        let mut wk = Vec::with_capacity(heads);
        let mut wv = Vec::with_capacity(heads);
        for h in 0..heads {
            wq.push(store.add(&format!("{name}.q{h}"), init_tensor(&[features, head_dim], proj, rng))?);
            wk.push(store.add(&format!("{name}.k{h}"), init_tensor(&[features, head_dim], proj, rng))?);
            wv.push(store.add(&format!("{name}.v{h}"), init_tensor(&[features, head_dim], proj, rng))?);
        }
        let wo = store.add(
            &format!("{name}.out"),
            init_tensor(
                &[heads * head_dim, features],
                Init::Xavier {
                    fan_in: heads * head_dim,
                    fan_out: features,
                },
                rng,
            ),
        )?;
        Ok(MultiHeadAttention {
            wq,
            wk,
            wv,
            wo,
            heads,
            head_dim,
            features,
        })
    }

    /// Returns the output plus each head's attention matrix (rows are
    /// probability vectors over the window positions).
    pub fn attention(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: TensorId,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let shape = tape.shape(x).to_vec();
        if !(shape.len() == 2 || shape.len() == 3) || shape[shape.len() - 1] != self.features {
            return Err(Error::dimension("multi_head_attention", &shape, &[self.features]));
        }
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut contexts = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = tape.matmul(x, bind.id(self.wq[h]))?;
            let k = tape.matmul(x, bind.id(self.wk[h]))?;
            let v = tape.matmul(x, bind.id(self.wv[h]))?;
            let kt = tape.transpose_last(k)?;
            let raw = tape.matmul(q, kt)?;
            let scaled = tape.mul_scalar(raw, scale);
            let p = tape.softmax(scaled)?;
            probs.push(p);
            contexts.push(tape.matmul(p, v)?);
        }
        let cat = tape.concat_last(&contexts)?;
        let out = tape.matmul(cat, bind.id(self.wo))?;
        Ok((out, probs))
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        self.attention(tape, bind, x).map(|(out, _)| out)
    }
}

/// Transformer encoder block:
/// `u = x + Dropout(MHA(BN(PE(x))))`, `y = u + conv2(ReLU(conv1(BN(u))))`
/// with kernel-1 convolutions over the time axis. Shape-preserving.
#[derive(Debug)]
pub struct TransformerBlock {
    bn1: BatchNorm,
    bn2: BatchNorm,
    mha: MultiHeadAttention,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    pub features: usize,
    pub dropout: f64,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        features: usize,
        heads: usize,
        head_dim: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if features == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "transformer block {name:?} needs nonzero feature and hidden sizes"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {dropout}"
            )));
        }
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), features)?;
        let mha = MultiHeadAttention::new(store, &format!("{name}.mha"), features, heads, head_dim, rng)?;
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), features)?;
        let w1 = store.add(
            &format!("{name}.conv1.w"),
            init_tensor(&[hidden, features, 1], Init::Kaiming { fan_in: features }, rng),
        )?;
        let b1 = store.add(&format!("{name}.conv1.b"), Tensor::zeros(&[hidden]))?;
        let w2 = store.add(
            &format!("{name}.conv2.w"),
            init_tensor(
                &[features, hidden, 1],
                Init::Xavier {
                    fan_in: hidden,
                    fan_out: features,
                },
                rng,
            ),
        )?;
        let b2 = store.add(&format!("{name}.conv2.b"), Tensor::zeros(&[features]))?;
        Ok(TransformerBlock {
            bn1,
            bn2,
            mha,
            w1,
            b1,
            w2,
            b2,
            features,
            dropout,
        })
    }

    /// `x` is `[W, F]` or `[B, W, F]`; the output keeps the input shape.
    /// Batch-norm statistics run over batch x time, and train mode needs a
    /// window batch of at least 2.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        ctx: &mut PassCtx,
        x: TensorId,
    ) -> Result<TensorId> {
        let shape = tape.shape(x).to_vec();
        let (b, w, f) = match shape.len() {
            2 => (1, shape[0], shape[1]),
            3 => (shape[0], shape[1], shape[2]),
            _ => return Err(Error::dimension("transformer_block", &shape, &[])),
        };
        if f != self.features {
            return Err(Error::dimension("transformer_block", &shape, &[self.features]));
        }
        if ctx.is_train() && b < 2 {
            return Err(Error::Config(
                "transformer block train mode requires a window batch of at least 2".into(),
            ));
        }
        let x3 = if shape.len() == 2 {
            tape.reshape(x, &[1, w, f])?
        } else {
            x
        };
        let pe = positional_encode(tape, x3)?;
        let flat = tape.reshape(pe, &[b * w, f])?;
        let n1 = self.bn1.forward(tape, bind, ctx, flat)?;
        let n1 = tape.reshape(n1, &[b, w, f])?;
        let att = self.mha.forward(tape, bind, n1)?;
        let att = match &mut ctx.phase {
            Phase::Train { rng } => tape.dropout(att, self.dropout, &mut **rng)?,
            Phase::Eval => att,
        };
        let u = tape.add(x3, att)?;
        let flat = tape.reshape(u, &[b * w, f])?;
        let n2 = self.bn2.forward(tape, bind, ctx, flat)?;
        let n2 = tape.reshape(n2, &[b, w, f])?;
        let tc = tape.transpose_last(n2)?;
        let c1 = tape.conv1d(tc, bind.id(self.w1), Some(bind.id(self.b1)), Padding::Valid)?;
        let mid = tape.relu(c1);
        let c2 = tape.conv1d(mid, bind.id(self.w2), Some(bind.id(self.b2)), Padding::Valid)?;
        let ff = tape.transpose_last(c2)?;
        let y = tape.add(u, ff)?;
        if shape.len() == 2 {
            tape.reshape(y, &[w, f])
        } else {
            Ok(y)
        }
    }

    /// Mean-pool the block output over time: `[B, W, F] -> [B, F]` (or
    /// `[W, F] -> [F]`).
    pub fn embed(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        ctx: &mut PassCtx,
        x: TensorId,
    ) -> Result<TensorId> {
        let y = self.forward(tape, bind, ctx, x)?;
        let time_axis = tape.shape(y).len() - 2;
        tape.mean_axis(y, time_axis)
    }
}

/// Branch kernel widths of the temporal convolution module, in fixed
/// concatenation order.
pub const TC_KERNELS: [usize; 4] = [2, 3, 6, 7];
/// Latent width after the input projection; also the concatenated output
/// width (four branches of eight channels).
pub const TC_LATENT: usize = 32;
const TC_BRANCH_CHANNELS: usize = 8;

/// Inception-style temporal convolution: a bias-free 1x1 projection into
/// the latent space, four parallel bias-free convolutions, channel
/// concatenation, ReLU, and a last-step slice.
#[derive(Debug)]
pub struct TcModule {
    proj: Dense,
    branches: Vec<ParamId>,
    pub features: usize,
}

impl TcModule {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        features: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let proj = Dense::new(
            store,
            &format!("{name}.proj"),
            features,
            TC_LATENT,
            Init::Xavier {
                fan_in: features,
                fan_out: TC_LATENT,
            },
            false,
            rng,
        )?;
        let branches = TC_KERNELS
            .iter()
            .map(|&k| {
                store.add(
                    &format!("{name}.conv{k}"),
                    init_tensor(
                        &[TC_BRANCH_CHANNELS, TC_LATENT, k],
                        Init::Kaiming { fan_in: TC_LATENT * k },
                        rng,
                    ),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TcModule {
            proj,
            branches,
            features,
        })
    }

    /// `x` is `[W, F]` or `[B, W, F]` with `W >= 7`; returns `[32]` or
    /// `[B, 32]`. Every branch ends on the window's final step, so
    /// truncating to the common length and slicing the last step reduces to
    /// taking each branch's final valid output.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        let shape = tape.shape(x).to_vec();
        if !(shape.len() == 2 || shape.len() == 3) || shape[shape.len() - 1] != self.features {
            return Err(Error::dimension("tc_module", &shape, &[self.features]));
        }
        let w = shape[shape.len() - 2];
        let widest = *TC_KERNELS.last().expect("fixed kernel set");
        if w < widest {
            return Err(Error::dimension("tc_module", &shape, &[widest]));
        }
        let latent = self.proj.forward(tape, bind, x)?;
        let t = tape.transpose_last(latent)?;
        let mut parts = Vec::with_capacity(TC_KERNELS.len());
        for (i, &k) in TC_KERNELS.iter().enumerate() {
            let c = tape.conv1d(t, bind.id(self.branches[i]), None, Padding::Valid)?;
            let time_axis = tape.shape(c).len() - 1;
            parts.push(tape.index_axis(c, time_axis, w - k)?);
        }
        let cat = tape.concat_last(&parts)?;
        Ok(tape.relu(cat))
    }
}

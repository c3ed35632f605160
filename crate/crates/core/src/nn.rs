//! Parameter storage and shared layer plumbing.
//!
//! The tape is rebuilt for every forward pass, so parameters live outside it
//! in a [`ParamStore`] and are re-leafed per pass via [`ParamStore::bind`].
//! Layers hold [`ParamId`]s plus hyperparameters and stay stateless across
//! passes; mutable side effects (batch-norm running statistics, dropout
//! draws) go through the per-pass [`PassCtx`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Handle into a [`ParamStore`]. Only valid for the store that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named tensors backing a model: trainable parameters plus non-trainable
/// state buffers. Insertion order is stable and defines the binding and
/// serialization order.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Register a trainable parameter.
    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    /// Register a non-trainable state buffer (e.g. running statistics).
    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| ParamId(i))
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Replace a parameter's values in place; the shape is kept.
    pub fn set_data(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let value = &mut self.entries[id.0].value;
        if data.len() != value.numel() {
            return Err(Error::Contract(format!(
                "set_data: {} holds {} values, got {}",
                self.entries[id.0].name,
                self.entries[id.0].value.numel(),
                data.len()
            )));
        }
        self.entries[id.0].value.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Apply deferred state updates collected during a forward pass.
    pub fn apply_updates(&mut self, updates: &[(ParamId, Vec<f64>)]) -> Result<()> {
        for (id, data) in updates {
            self.set_data(*id, data)?;
        }
        Ok(())
    }

    /// Leaf every entry onto `tape`: trainable parameters with gradient
    /// tracking, buffers as constants.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let ids = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    tape.leaf(e.value.clone(), true)
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Binding { ids }
    }
}

/// Tape ids for one pass, parallel to the store's entries.
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }
}

/// Weight initialization schemes. Kaiming for layers feeding a ReLU,
/// Xavier for linear/saturating outputs.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Uniform { lo: f64, hi: f64 },
    Kaiming { fan_in: usize },
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

pub fn init_tensor(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = match init {
        Init::Uniform { lo, hi } => (0..numel).map(|_| rng.random_range(lo..hi)).collect(),
        Init::Kaiming { fan_in } => {
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
        }
        Init::Xavier { fan_in, fan_out } => {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
        }
        Init::Zeros => vec![0.0; numel],
        Init::Ones => vec![1.0; numel],
    };
    Tensor::new(shape, data).expect("shape matches data length")
}

/// Train passes carry the dropout RNG; eval passes are deterministic.
pub enum Phase<'r> {
    Train { rng: &'r mut ChaCha8Rng },
    Eval,
}

/// Per-pass context: the phase plus state updates (batch-norm running
/// statistics) to apply to the store after the pass.
pub struct PassCtx<'r> {
    pub phase: Phase<'r>,
    pub stat_updates: Vec<(ParamId, Vec<f64>)>,
}

impl<'r> PassCtx<'r> {
    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        PassCtx {
            phase: Phase::Train { rng },
            stat_updates: Vec::new(),
        }
    }

    pub fn eval() -> PassCtx<'static> {
        PassCtx {
            phase: Phase::Eval,
            stat_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self.phase, Phase::Train { .. })
    }
}

/// Fully connected layer `x·W (+ b)` over the last axis.
#[derive(Debug)]
pub struct Dense {
    w: ParamId,
    b: Option<ParamId>,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_out: usize,
        init: Init,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if f_in == 0 || f_out == 0 {
            return Err(Error::Config(format!(
                "dense layer {name:?} needs nonzero dimensions, got {f_in}x{f_out}"
            )));
        }
        let w = store.add(&format!("{name}.w"), init_tensor(&[f_in, f_out], init, rng))?;
        let b = if bias {
            Some(store.add(&format!("{name}.b"), Tensor::zeros(&[f_out]))?)
        } else {
            None
        };
        Ok(Dense { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        let y = tape.matmul(x, bind.id(self.w))?;
        match self.b {
            Some(b) => tape.add_bcast(y, bind.id(b)),
            None => Ok(y),
        }
    }
}

/// Batch normalization over rows of a `[R, F]` input. Train passes use
/// batch statistics and queue running-stat updates on the context; eval
/// passes use the stored running statistics.
#[derive(Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    run_mean: ParamId,
    run_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Result<Self> {
        if features == 0 {
            return Err(Error::Config(format!("batch norm {name:?} needs features > 0")));
        }
        Ok(BatchNorm {
            gamma: store.add(&format!("{name}.gamma"), Tensor::filled(&[features], 1.0))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[features]))?,
            run_mean: store.add_buffer(&format!("{name}.run_mean"), Tensor::zeros(&[features]))?,
            run_var: store.add_buffer(&format!("{name}.run_var"), Tensor::filled(&[features], 1.0))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        ctx: &mut PassCtx,
        x: TensorId,
    ) -> Result<TensorId> {
        let gamma = bind.id(self.gamma);
        let beta = bind.id(self.beta);
        if ctx.is_train() {
            let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
            let keep = 1.0 - self.momentum;
            let old_mean = tape.data(bind.id(self.run_mean));
            let new_mean: Vec<f64> = old_mean
                .iter()
                .zip(&mean)
                .map(|(o, b)| keep * o + self.momentum * b)
                .collect();
            let old_var = tape.data(bind.id(self.run_var));
            let new_var: Vec<f64> = old_var
                .iter()
                .zip(&var)
                .map(|(o, b)| keep * o + self.momentum * b)
                .collect();
            ctx.stat_updates.push((self.run_mean, new_mean));
            ctx.stat_updates.push((self.run_var, new_var));
            Ok(y)
        } else {
            let run_mean = tape.data(bind.id(self.run_mean)).to_vec();
            let run_var = tape.data(bind.id(self.run_var)).to_vec();
            tape.batch_norm_eval(x, gamma, beta, &run_mean, &run_var, self.eps)
        }
    }
}

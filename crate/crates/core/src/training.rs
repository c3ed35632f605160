//! Mini-batch training: Adam updates, seeded shuffling, early stopping on
//! validation loss with best-epoch checkpoint restore.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{load_checkpoint, save_checkpoint, Model};
use crate::nn::PassCtx;
use crate::preprocess::Dataset;
use crate::tensor::{Tape, Tensor};

/// Optimizer and loop knobs. `class_weights` has one entry per output class
/// and is applied inside the cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub class_weights: Vec<f64>,
}

impl TrainConfig {
    pub fn new(seed: u64, class_weights: Vec<f64>) -> TrainConfig {
        TrainConfig {
            batch_size: 2000,
            learning_rate: 3e-4,
            max_epochs: 100,
            patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed,
            class_weights,
        }
    }

    /// `num_classes` comes from the model this config will drive.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "max_epochs and patience must be at least 1".into(),
            ));
        }
        for (what, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{what} must be in [0, 1), got {b}")));
            }
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.class_weights.len() != num_classes {
            return Err(Error::Config(format!(
                "{} class weights for {} classes",
                self.class_weights.len(),
                num_classes
            )));
        }
        if self.class_weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || self.class_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config(
                "class weights must be finite, non-negative, and not all zero".into(),
            ));
        }
        Ok(())
    }
}

/// First/second moment accumulators for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> AdamState {
        AdamState {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// What a training run produced. `best_epoch` indexes the loss vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub wall_time_s: f64,
    pub checkpoint: PathBuf,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("serialize train report: {e}")))
    }

    /// Per-epoch losses as CSV with a header row.
    pub fn epoch_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (e, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            out.push_str(&format!("{e},{t},{v}\n"));
        }
        out
    }
}

fn check_dataset(name: &str, set: &Dataset, model: &Model) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Data(format!("{name} set is empty")));
    }
    let c = &model.config;
    let got = [
        set.n_nodes as usize,
        set.window as usize,
        set.n_features as usize,
    ];
    if got != [c.n_nodes, c.window, c.features] {
        return Err(Error::dimension(
            "train_dataset",
            &got,
            &[c.n_nodes, c.window, c.features],
        ));
    }
    let classes = c.num_classes as u8;
    if let Some(bad) = set.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!(
            "{name} set has label {bad}, model emits {classes} classes"
        )));
    }
    Ok(())
}

/// Mean weighted cross-entropy of `model` over `set`, evaluated in fixed
/// order without gradient bookkeeping.
pub fn dataset_loss(model: &Model, set: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let batch = cfg.batch_size.min(set.len());
    let mut total = 0.0;
    let mut rows = 0usize;
    let order: Vec<usize> = (0..set.len()).collect();
    for chunk in order.chunks(batch) {
        let (x, targets) = gather(set, chunk);
        let mut tape = Tape::new();
        let bind = model.store.bind(&mut tape);
        let mut ctx = PassCtx::eval();
        let xid = tape.constant(x);
        let logits = model.forward(&mut tape, &bind, &mut ctx, xid)?;
        let flat = tape.reshape(logits, &[targets.len(), model.config.num_classes])?;
        let loss = tape.weighted_cross_entropy(flat, &targets, &cfg.class_weights)?;
        total += tape.data(loss)[0] * targets.len() as f64;
        rows += targets.len();
    }
    Ok(total / rows as f64)
}

fn gather(set: &Dataset, indices: &[usize]) -> (Tensor, Vec<usize>) {
    let numel = set.sample_numel();
    let n = set.n_nodes as usize;
    let mut data = Vec::with_capacity(indices.len() * numel);
    let mut targets = Vec::with_capacity(indices.len() * n);
    for &i in indices {
        data.extend_from_slice(set.input(i));
        targets.extend(set.label(i).iter().map(|&l| l as usize));
    }
    let shape = [
        indices.len(),
        n,
        set.window as usize,
        set.n_features as usize,
    ];
    (Tensor::new(&shape, data).expect("gather shape"), targets)
}

/// Numeric failures mid-run gain the batch id and parameter norms so the
/// blow-up is diagnosable from the error alone.
fn diagnose(e: Error, epoch: usize, batch_id: usize, model: &Model) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!(
            "{msg}; epoch {epoch} batch {batch_id}; parameter norms: {}",
            param_norms(model)
        )),
        other => other,
    }
}

fn param_norms(model: &Model) -> String {
    model
        .store
        .trainable_ids()
        .map(|id| {
            let norm = model
                .store
                .get(id)
                .data()
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            format!("{}={norm:.3e}", model.store.name(id))
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Trains in place. Shuffles batches each epoch from the config seed, stops
/// early after `patience` epochs without a validation improvement, writes the
/// best-epoch checkpoint to `checkpoint_path`, and leaves `model` holding the
/// best-epoch parameters.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    checkpoint_path: &Path,
) -> Result<TrainReport> {
    cfg.validate(model.config.num_classes)?;
    check_dataset("train", train_set, model)?;
    check_dataset("val", val_set, model)?;
    let started = Instant::now();

    let batch = cfg.batch_size.min(train_set.len());
    if batch < cfg.batch_size {
        log::warn!(
            "batch_size {} exceeds the {} available samples; clamping",
            cfg.batch_size,
            train_set.len()
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.store.num_trainable_scalars());
    let mut train_losses = Vec::new();
    let mut val_losses = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut stall = 0usize;

    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.max_epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_rows = 0usize;
        for (batch_id, chunk) in indices.chunks(batch).enumerate() {
            let (x, targets) = gather(train_set, chunk);
            let mut tape = Tape::new();
            let bind = model.store.bind(&mut tape);
            let mut ctx = PassCtx::train(&mut rng);
            let xid = tape.constant(x);
            let loss = (|| {
                let logits = model.forward(&mut tape, &bind, &mut ctx, xid)?;
                let flat = tape.reshape(logits, &[targets.len(), model.config.num_classes])?;
                tape.weighted_cross_entropy(flat, &targets, &cfg.class_weights)
            })()
            .map_err(|e| diagnose(e, epoch, batch_id, model))?;
            let loss_value = tape.data(loss)[0];
            if !loss_value.is_finite() {
                return Err(diagnose(
                    Error::Numeric(format!("loss is {loss_value}")),
                    epoch,
                    batch_id,
                    model,
                ));
            }
            tape.backward(loss)
                .map_err(|e| diagnose(e, epoch, batch_id, model))?;

            let ids: Vec<_> = model.store.trainable_ids().collect();
            let mut flat_params = Vec::with_capacity(adam.m.len());
            let mut flat_grads = Vec::with_capacity(adam.m.len());
            for &id in &ids {
                let tensor = model.store.get(id);
                flat_params.extend_from_slice(tensor.data());
                match tape.grad(bind.id(id)) {
                    Some(g) => flat_grads.extend_from_slice(g),
                    None => flat_grads.extend(std::iter::repeat_n(0.0, tensor.numel())),
                }
            }
            adam_step(
                &mut flat_params,
                &flat_grads,
                &mut adam,
                cfg.learning_rate,
                cfg.beta1,
                cfg.beta2,
                cfg.epsilon,
            )?;
            let mut offset = 0;
            for &id in &ids {
                let numel = model.store.get(id).numel();
                model
                    .store
                    .set_data(id, &flat_params[offset..offset + numel])?;
                offset += numel;
            }
            let updates = std::mem::take(&mut ctx.stat_updates);
            model.store.apply_updates(&updates)?;

            epoch_loss += loss_value * targets.len() as f64;
            epoch_rows += targets.len();
        }
        train_losses.push(epoch_loss / epoch_rows as f64);

        let val = dataset_loss(model, val_set, cfg)?;
        if !val.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss {val} after epoch {epoch}; parameter norms: {}",
                param_norms(model)
            )));
        }
        val_losses.push(val);

        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            stall = 0;
            save_checkpoint(checkpoint_path, model)?;
        } else {
            stall += 1;
            if stall >= cfg.patience {
                log::info!("early stop at epoch {epoch}, best epoch {best_epoch}");
                break;
            }
        }
    }

    *model = load_checkpoint(checkpoint_path)?;
    Ok(TrainReport {
        train_loss: train_losses,
        val_loss: val_losses,
        best_epoch,
        best_val_loss: best_val,
        wall_time_s: started.elapsed().as_secs_f64(),
        checkpoint: checkpoint_path.to_path_buf(),
    })
}

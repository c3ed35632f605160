//! Model assembly: three detector architectures over the shared layer kit,
//! plus binary checkpoint save/load.
//!
//! All three take windowed station tensors `[B, N, W, F]` and emit per-station
//! class logits `[B, N, C]`:
//!
//! * `Simba`: learned adjacency, mix-hop graph convolution on the latest
//!   step, transformer embedding of the window, concatenated into an FFN head.
//! * `GnnRca`: learned adjacency, two stacked GCN layers on the latest step
//!   only. No temporal path.
//! * `Mtgnn`: per-station 1x1 projection to a latent channel, inception
//!   temporal convolution, graph convolution, and a residual from the last
//!   projected step.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, Activation, GcModule, GcnLayer, GraphLearner};
use crate::nn::{Binding, Dense, Init, ParamStore, PassCtx};
use crate::temporal::{TcModule, TransformerBlock, TC_LATENT};
use crate::tensor::{Tape, Tensor, TensorId};

/// Detector architectures that share the preprocessing and training stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "SIMBA")]
    Simba,
    #[serde(rename = "GNN_RCA")]
    GnnRca,
    #[serde(rename = "MTGNN")]
    Mtgnn,
}

impl Architecture {
    pub fn as_str(&self) -> &'static str {
        match self {
            Architecture::Simba => "SIMBA",
            Architecture::GnnRca => "GNN_RCA",
            Architecture::Mtgnn => "MTGNN",
        }
    }

    /// Case-insensitive parse of the architecture name.
    pub fn parse(s: &str) -> Result<Architecture> {
        match s.to_ascii_uppercase().as_str() {
            "SIMBA" => Ok(Architecture::Simba),
            "GNN_RCA" | "GNNRCA" => Ok(Architecture::GnnRca),
            "MTGNN" => Ok(Architecture::Mtgnn),
            _ => Err(Error::Config(format!(
                "unknown architecture {s:?}, expected simba, gnn_rca, or mtgnn"
            ))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Every knob a model needs. Serialized verbatim into checkpoints so a
/// saved model rebuilds without the original config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Stations in the deployment graph.
    pub n_nodes: usize,
    /// Output classes; 2 for the binary task, 3 for the full label set.
    pub num_classes: usize,
    /// Kept neighbors per row in the learned adjacency.
    pub k: usize,
    /// Graph-learner saturation.
    pub alpha: f64,
    /// Mix-hop retention.
    pub beta: f64,
    /// Mix-hop propagation depth.
    pub gc_depth: usize,
    /// Graph convolution output width.
    pub gc_hidden: usize,
    /// Attention heads in the transformer block.
    pub heads: usize,
    /// Per-head projection width.
    pub head_dim: usize,
    /// Transformer feed-forward hidden width.
    pub tr_hidden: usize,
    /// FFN head hidden width.
    pub head_hidden: usize,
    /// Dropout rate inside the transformer block.
    pub dropout: f64,
    /// Time steps per input window.
    pub window: usize,
    /// KPI features per station per step.
    pub features: usize,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    /// Simba defaults: full-degree learned graph, transformer temporal path.
    pub fn simba(seed: u64) -> ModelConfig {
        ModelConfig {
            architecture: Architecture::Simba,
            n_nodes: crate::datagen::NUM_CELLS,
            num_classes: 2,
            k: 7,
            alpha: 0.5,
            beta: 0.5,
            gc_depth: 2,
            gc_hidden: 32,
            heads: 4,
            head_dim: 32,
            tr_hidden: 32,
            head_hidden: 16,
            dropout: 0.0,
            window: crate::preprocess::WINDOW,
            features: crate::preprocess::FEATURES,
            seed,
        }
    }

    /// Spatial-only baseline: two stacked GCN layers, no temporal path.
    pub fn gnn_rca(seed: u64) -> ModelConfig {
        ModelConfig {
            architecture: Architecture::GnnRca,
            k: 5,
            ..ModelConfig::simba(seed)
        }
    }

    /// Temporal-convolution baseline. Needs windows of at least 8 steps to
    /// feed the widest inception kernel.
    pub fn mtgnn(seed: u64) -> ModelConfig {
        ModelConfig {
            architecture: Architecture::Mtgnn,
            k: 5,
            window: 8,
            ..ModelConfig::simba(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 2 && self.num_classes != 3 {
            return Err(Error::Config(format!(
                "num_classes must be 2 or 3, got {}",
                self.num_classes
            )));
        }
        if self.n_nodes == 0 || self.features == 0 {
            return Err(Error::Config(format!(
                "model needs nonzero nodes and features, got {}x{}",
                self.n_nodes, self.features
            )));
        }
        if self.k == 0 || self.k > self.n_nodes {
            return Err(Error::Config(format!(
                "k must be in 1..={}, got {}",
                self.n_nodes, self.k
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if self.architecture == Architecture::Mtgnn && self.window < 8 {
            return Err(Error::Config(format!(
                "MTGNN needs a window of at least 8 steps, got {}",
                self.window
            )));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::Config(format!(
                "alpha must be positive and finite, got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "beta must be in [0, 1], got {}",
                self.beta
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.gc_depth == 0
            || self.gc_hidden == 0
            || self.heads == 0
            || self.head_dim == 0
            || self.tr_hidden == 0
            || self.head_hidden == 0
        {
            return Err(Error::Config(
                "all layer widths and depths must be nonzero".into(),
            ));
        }
        Ok(())
    }
}

/// Two-layer classification head: ReLU hidden layer, linear logits.
#[derive(Debug)]
pub struct FfnHead {
    l1: Dense,
    l2: Dense,
}

impl FfnHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        hidden: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<FfnHead> {
        let l1 = Dense::new(
            store,
            &format!("{name}.l1"),
            f_in,
            hidden,
            Init::Kaiming { fan_in: f_in },
            true,
            rng,
        )?;
        let l2 = Dense::new(
            store,
            &format!("{name}.l2"),
            hidden,
            classes,
            Init::Xavier {
                fan_in: hidden,
                fan_out: classes,
            },
            true,
            rng,
        )?;
        Ok(FfnHead { l1, l2 })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, z: TensorId) -> Result<TensorId> {
        let h = self.l1.forward(tape, bind, z)?;
        let h = tape.relu(h);
        self.l2.forward(tape, bind, h)
    }
}

#[derive(Debug)]
enum Modules {
    Simba {
        gl: GraphLearner,
        gc: GcModule,
        tr: TransformerBlock,
        head: FfnHead,
    },
    GnnRca {
        gl: GraphLearner,
        gcn1: GcnLayer,
        gcn2: GcnLayer,
        head: FfnHead,
    },
    Mtgnn {
        gl: GraphLearner,
        proj: Dense,
        tc: TcModule,
        gc: GcModule,
        head: FfnHead,
    },
}

/// A built model: config, parameter store, and the architecture wiring.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    modules: Modules,
}

impl Model {
    /// Builds a model with freshly initialized parameters from the config
    /// seed. The same config always yields bitwise-identical parameters.
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = &config;
        let modules = match c.architecture {
            Architecture::Simba => {
                let gl = GraphLearner::new(
                    &mut store,
                    "gl",
                    c.n_nodes,
                    GraphLearner::EMBED_DIM,
                    c.alpha,
                    c.k,
                    &mut rng,
                )?;
                let gc = GcModule::new(
                    &mut store,
                    "gc",
                    c.features,
                    c.gc_hidden,
                    c.gc_depth,
                    c.beta,
                    &mut rng,
                )?;
                let tr = TransformerBlock::new(
                    &mut store,
                    "tr",
                    c.features,
                    c.heads,
                    c.head_dim,
                    c.tr_hidden,
                    c.dropout,
                    &mut rng,
                )?;
                let head = FfnHead::new(
                    &mut store,
                    "head",
                    c.gc_hidden + c.features,
                    c.head_hidden,
                    c.num_classes,
                    &mut rng,
                )?;
                Modules::Simba { gl, gc, tr, head }
            }
            Architecture::GnnRca => {
                let gl = GraphLearner::new(
                    &mut store,
                    "gl",
                    c.n_nodes,
                    GraphLearner::EMBED_DIM,
                    c.alpha,
                    c.k,
                    &mut rng,
                )?;
                let gcn1 = GcnLayer::new(
                    &mut store,
                    "gcn1",
                    c.features,
                    c.gc_hidden,
                    Activation::Relu,
                    &mut rng,
                )?;
                let gcn2 = GcnLayer::new(
                    &mut store,
                    "gcn2",
                    c.gc_hidden,
                    c.gc_hidden,
                    Activation::Relu,
                    &mut rng,
                )?;
                let head = FfnHead::new(
                    &mut store,
                    "head",
                    c.gc_hidden,
                    c.head_hidden,
                    c.num_classes,
                    &mut rng,
                )?;
                Modules::GnnRca {
                    gl,
                    gcn1,
                    gcn2,
                    head,
                }
            }
            Architecture::Mtgnn => {
                let gl = GraphLearner::new(
                    &mut store,
                    "gl",
                    c.n_nodes,
                    GraphLearner::EMBED_DIM,
                    c.alpha,
                    c.k,
                    &mut rng,
                )?;
                let proj = Dense::new(
                    &mut store,
                    "proj",
                    c.features,
                    TC_LATENT,
                    Init::Xavier {
                        fan_in: c.features,
                        fan_out: TC_LATENT,
                    },
                    true,
                    &mut rng,
                )?;
                let tc = TcModule::new(&mut store, "tc", TC_LATENT, &mut rng)?;
                let gc = GcModule::new(
                    &mut store,
                    "gc",
                    TC_LATENT,
                    TC_LATENT,
                    c.gc_depth,
                    c.beta,
                    &mut rng,
                )?;
                let head = FfnHead::new(
                    &mut store,
                    "head",
                    TC_LATENT,
                    c.head_hidden,
                    c.num_classes,
                    &mut rng,
                )?;
                Modules::Mtgnn {
                    gl,
                    proj,
                    tc,
                    gc,
                    head,
                }
            }
        };
        Ok(Model {
            config,
            store,
            modules,
        })
    }

    /// Forward pass to logits. `x` is `[B, N, W, F]` or a single sample
    /// `[N, W, F]`; logits come back `[B, N, C]` or `[N, C]` to match.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        ctx: &mut PassCtx,
        x: TensorId,
    ) -> Result<TensorId> {
        let c = &self.config;
        let shape = tape.shape(x).to_vec();
        let (batch, lifted) = match shape.as_slice() {
            [n, w, f] if *n == c.n_nodes && *w == c.window && *f == c.features => (1, true),
            [b, n, w, f] if *n == c.n_nodes && *w == c.window && *f == c.features => (*b, false),
            _ => {
                return Err(Error::dimension(
                    "model_forward",
                    &shape,
                    &[c.n_nodes, c.window, c.features],
                ))
            }
        };
        let (b, n, w, f) = (batch, c.n_nodes, c.window, c.features);
        let x4 = tape.reshape(x, &[b, n, w, f])?;
        let logits = match &self.modules {
            Modules::Simba { gl, gc, tr, head } => {
                let a = gl.forward(tape, bind)?;
                let last = tape.index_axis(x4, 2, w - 1)?;
                let spatial = gc.forward(tape, bind, a, last)?;
                let seq = tape.reshape(x4, &[b * n, w, f])?;
                let temporal = tr.embed(tape, bind, ctx, seq)?;
                let temporal = tape.reshape(temporal, &[b, n, f])?;
                let z = tape.concat_last(&[spatial, temporal])?;
                head.forward(tape, bind, z)?
            }
            Modules::GnnRca {
                gl,
                gcn1,
                gcn2,
                head,
            } => {
                let a = gl.forward(tape, bind)?;
                let a_norm = normalize_adjacency(tape, a)?;
                let last = tape.index_axis(x4, 2, w - 1)?;
                let h1 = gcn1.forward(tape, bind, a_norm, last)?;
                let h2 = gcn2.forward(tape, bind, a_norm, h1)?;
                head.forward(tape, bind, h2)?
            }
            Modules::Mtgnn {
                gl,
                proj,
                tc,
                gc,
                head,
            } => {
                let a = gl.forward(tape, bind)?;
                let seq = tape.reshape(x4, &[b * n, w, f])?;
                let latent = proj.forward(tape, bind, seq)?;
                let temporal = tc.forward(tape, bind, latent)?;
                let temporal = tape.reshape(temporal, &[b, n, TC_LATENT])?;
                let spatial = gc.forward(tape, bind, a, temporal)?;
                let res = tape.index_axis(latent, 1, w - 1)?;
                let res = tape.reshape(res, &[b, n, TC_LATENT])?;
                let st = tape.add(spatial, res)?;
                head.forward(tape, bind, st)?
            }
        };
        if lifted {
            tape.reshape(logits, &[n, c.num_classes])
        } else {
            Ok(logits)
        }
    }

    /// Eval-mode class probabilities for a batch. Builds its own tape and
    /// softmaxes the logits; rows sum to one.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let mut ctx = PassCtx::eval();
        let xid = tape.constant(x.clone());
        let logits = self.forward(&mut tape, &bind, &mut ctx, xid)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.value(probs).clone())
    }
}

const CHECKPOINT_MAGIC: &[u8; 9] = b"SIMBACKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes a model checkpoint: magic, version, config JSON with its SHA-256
/// digest, then every named tensor (trainable weights and running stats).
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let json = serde_json::to_vec(&model.config)
        .map_err(|e| Error::Data(format!("serialize checkpoint config: {e}")))?;
    let digest = Sha256::digest(&json);
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&digest)?;
    w.write_all(&(model.store.len() as u32).to_le_bytes())?;
    for id in model.store.ids() {
        let name = model.store.name(id).as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let tensor = model.store.get(id);
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Integrity(format!("checkpoint truncated reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

/// Reads a checkpoint back into a full model. The config digest, parameter
/// names, and shapes must all match what the config rebuilds; any deviation
/// is an integrity error, not a best-effort load.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 9];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Integrity(
            "not a model checkpoint: bad magic bytes".into(),
        ));
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let json_len = read_u32(&mut r, "config length")? as usize;
    let mut json = vec![0u8; json_len];
    read_exact(&mut r, &mut json, "config")?;
    let mut stored_digest = [0u8; 32];
    read_exact(&mut r, &mut stored_digest, "config digest")?;
    if Sha256::digest(&json).as_slice() != stored_digest {
        return Err(Error::Integrity(
            "checkpoint config digest mismatch; file is corrupt".into(),
        ));
    }
    let config: ModelConfig = serde_json::from_slice(&json)
        .map_err(|e| Error::Integrity(format!("checkpoint config does not parse: {e}")))?;
    let mut model = Model::new(config)?;
    let count = read_u32(&mut r, "tensor count")? as usize;
    if count != model.store.len() {
        return Err(Error::Integrity(format!(
            "checkpoint holds {count} tensors, model expects {}",
            model.store.len()
        )));
    }
    let by_name: HashMap<String, _> = model
        .store
        .ids()
        .map(|id| (model.store.name(id).to_string(), id))
        .collect();
    for _ in 0..count {
        let name_len = read_u32(&mut r, "tensor name length")? as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf, "tensor name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Integrity("tensor name is not valid UTF-8".into()))?;
        let id = *by_name
            .get(&name)
            .ok_or_else(|| Error::Integrity(format!("unexpected tensor {name:?}")))?;
        let rank = read_u32(&mut r, "tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, "tensor dimension")? as usize);
        }
        if shape != model.store.get(id).shape() {
            return Err(Error::Integrity(format!(
                "tensor {name:?} has shape {shape:?}, model expects {:?}",
                model.store.get(id).shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf, "tensor data")?;
            data.push(f64::from_le_bytes(buf));
        }
        model.store.set_data(id, &data)?;
    }
    Ok(model)
}

//! The joint encoder/decoder model and its checkpoint file format.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! b"SGPTCKPT" | u32 version | u64 header length | JSON header | f64 data
//! ```
//!
//! The header carries the model config, the vocabulary, a `dtype` tag, the
//! name, shape and element offset of every tensor in the data blob, and an
//! optional free-form `training` object used to resume runs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eqgen::Instance;
use crate::expr::{TokenError, Vocabulary};
use crate::gpt::{sample_top_k, Gpt, GptConfig};
use crate::nn::{Graph, NnError, ParamStore, Tensor, Var};
use crate::tnet::{PointCloudBatch, TNet, TNetConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGPTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("skeleton of {len} tokens does not fit the context of {context}")]
    TooLong { len: usize, context: usize },
    #[error("validation loss became {loss} in epoch {epoch}")]
    Diverged { epoch: usize, loss: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Variables per point after padding.
    pub d_max: usize,
    /// Embedding size `e`, shared by encoder and decoder.
    pub width: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Longest decoder input, `<SOS>` included.
    pub context: usize,
    pub dropout: f64,
    /// Width of the encoder's first fully connected layer; `2e` when unset.
    pub tnet_hidden: Option<usize>,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_max: 5,
            width: 64,
            n_layers: 2,
            n_heads: 4,
            context: 202,
            dropout: 0.0,
            tnet_hidden: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn tnet(&self) -> TNetConfig {
        TNetConfig {
            d_max: self.d_max,
            embed: self.width,
            fc_hidden: self.tnet_hidden.unwrap_or(2 * self.width),
        }
    }

    pub fn gpt(&self, vocab: &Vocabulary) -> GptConfig {
        GptConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            width: self.width,
            context: self.context,
            vocab_size: vocab.len(),
            dropout: self.dropout,
        }
    }
}

/// Decoder inputs and next-token targets for a batch, padded to `seq`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub tnet: TNet,
    pub gpt: Gpt,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Model, ModelError> {
        if config.d_max == 0 || config.width == 0 {
            return Err(NnError::Invalid("d_max and width must be positive".into()).into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let tnet = TNet::new(config.tnet(), &mut store, &mut rng);
        let gpt = Gpt::new(config.gpt(&vocab), &mut store, &mut rng)?;
        Ok(Model {
            config,
            vocab,
            store,
            tnet,
            gpt,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.numel()
    }

    pub fn point_batch(&self, instances: &[&Instance]) -> Result<PointCloudBatch, ModelError> {
        let mut batch = PointCloudBatch::new(self.config.d_max);
        for inst in instances {
            batch.push(&inst.x, inst.d, &inst.y)?;
        }
        Ok(batch)
    }

    /// Tokenizes skeletons as `<SOS> s <EOS>`; inputs drop the last id,
    /// targets drop the first. Shorter rows are padded with `<PAD>`, which
    /// the loss ignores.
    pub fn token_batch(&self, skeletons: &[&str]) -> Result<TokenBatch, ModelError> {
        let encoded = skeletons
            .iter()
            .map(|s| self.vocab.encode(s))
            .collect::<Result<Vec<_>, _>>()?;
        let seq = encoded.iter().map(|ids| ids.len() - 1).max().unwrap_or(0);
        if seq > self.config.context {
            return Err(ModelError::TooLong {
                len: seq,
                context: self.config.context,
            });
        }
        let mut inputs = vec![Vocabulary::PAD; encoded.len() * seq];
        let mut targets = vec![Vocabulary::PAD; encoded.len() * seq];
        for (row, ids) in encoded.iter().enumerate() {
            let n = ids.len() - 1;
            inputs[row * seq..row * seq + n].copy_from_slice(&ids[..n]);
            targets[row * seq..row * seq + n].copy_from_slice(&ids[1..]);
        }
        Ok(TokenBatch {
            inputs,
            targets,
            batch: encoded.len(),
            seq,
        })
    }

    /// Mean next-token cross-entropy over the non-padding positions.
    pub fn loss(
        &self,
        g: &mut Graph,
        instances: &[&Instance],
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var, ModelError> {
        let points = self.point_batch(instances)?;
        let skeletons: Vec<&str> = instances.iter().map(|i| i.skeleton.as_str()).collect();
        let tokens = self.token_batch(&skeletons)?;
        let w_d = self.tnet.encode(g, &self.store, &points)?;
        let logits = self.gpt.forward(
            g,
            &self.store,
            w_d,
            &tokens.inputs,
            tokens.batch,
            tokens.seq,
            dropout,
        )?;
        let logits = g.reshape(logits, &[tokens.batch * tokens.seq, self.vocab.len()])?;
        Ok(g.cross_entropy(logits, &tokens.targets, Vocabulary::PAD)?)
    }

    /// Token-weighted mean loss over `instances`, evaluated in length-sorted
    /// chunks.
    pub fn evaluate(&self, instances: &[Instance], batch_size: usize) -> Result<f64, ModelError> {
        let (mut total, mut count) = (0.0, 0usize);
        let mut sorted: Vec<&Instance> = instances.iter().collect();
        sorted.sort_by_key(|i| i.skeleton.len());
        for refs in sorted.chunks(batch_size.max(1)) {
            let mut g = Graph::new();
            let loss = self.loss(&mut g, refs, None)?;
            let tokens: usize = refs.iter().map(|i| i.skeleton.chars().count() + 1).sum();
            total += g
                .value(loss)
                .item()
                .ok_or_else(|| NnError::NonScalarLoss(g.shape(loss).to_vec()))?
                * tokens as f64;
            count += tokens;
        }
        Ok(if count == 0 {
            0.0
        } else {
            total / count as f64
        })
    }

    /// Dataset embedding `w_D` of one point cloud.
    pub fn embed(&self, x: &[f64], d: usize, y: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut batch = PointCloudBatch::new(self.config.d_max);
        batch.push(x, d, y)?;
        let mut g = Graph::new();
        let w = self.tnet.encode(&mut g, &self.store, &batch)?;
        Ok(g.value(w).data().to_vec())
    }

    /// Autoregressive top-k decoding from `prefix` until `<EOS>` or
    /// `max_len` generated tokens. `<PAD>` and `<SOS>` are never emitted.
    /// The decoded string is returned as is; it may not parse.
    pub fn sample_skeleton<R: RngCore>(
        &self,
        w_d: &[f64],
        prefix: &[usize],
        top_k: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<String, ModelError> {
        if prefix.is_empty() {
            return Err(NnError::Invalid("empty decoding prefix".into()).into());
        }
        let w = Tensor::new(&[1, self.config.width], w_d.to_vec())?;
        let mut ids = prefix.to_vec();
        let v = self.vocab.len();
        let mut generated = 0;
        while generated < max_len && ids.len() < self.config.context {
            let mut g = Graph::new();
            let w_var = g.input(w.clone());
            let logits = self
                .gpt
                .forward(&mut g, &self.store, w_var, &ids, 1, ids.len(), None)?;
            let last = &g.value(logits).data()[(ids.len() - 1) * v..];
            let next = sample_top_k(last, top_k, &[Vocabulary::PAD, Vocabulary::SOS], rng);
            generated += 1;
            if next == Vocabulary::EOS {
                break;
            }
            ids.push(next);
        }
        Ok(self.vocab.decode(&ids)?)
    }

    /// Greedy decode from `<SOS>`.
    pub fn greedy(&self, w_d: &[f64], max_len: usize) -> Result<String, ModelError> {
        self.sample_skeleton(
            w_d,
            &[Vocabulary::SOS],
            1,
            max_len,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config,
            vocab: self.vocab.clone(),
            tensors: self
                .store
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
            training: None,
        }
    }

    /// Rebuilds the model from a checkpoint. Every parameter must be present
    /// with its expected shape; unrelated tensors are ignored.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model, ModelError> {
        let mut model = Model::new(ckpt.config, ckpt.vocab.clone())?;
        model.load_tensors(ckpt, "")?;
        Ok(model)
    }

    /// Copies `prefix + name` tensors from `ckpt` into the parameters.
    pub fn load_tensors(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<(), ModelError> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let key = format!("{prefix}{}", self.store.name(id));
            let t = ckpt
                .tensor(&key)
                .ok_or_else(|| NnError::Invalid(format!("checkpoint lacks `{key}`")))?;
            let dst = self.store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(NnError::Shape {
                    op: "load",
                    lhs: dst.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                }
                .into());
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<Model, ModelError> {
        Model::from_checkpoint(&Checkpoint::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub tensors: Vec<(String, Tensor)>,
    pub training: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocabulary,
    dtype: String,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Writes to a sibling temporary file first, then renames over `path`.
    pub fn write(&self, path: &Path) -> Result<(), ModelError> {
        let io = |source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect();
        let header = Header {
            config: self.config,
            vocab: self.vocab.clone(),
            dtype: "f64".into(),
            tensors: entries,
            training: self.training.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
            w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
            w.write_all(&(json.len() as u64).to_le_bytes())
                .map_err(io)?;
            w.write_all(&json).map_err(io)?;
            for (_, t) in &self.tensors {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
            w.into_inner()
                .map_err(|e| io(e.into_error()))?
                .sync_all()
                .map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn read(path: &Path) -> Result<Checkpoint, ModelError> {
        let io = |source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        };
        let bad = |message: String| ModelError::Format {
            path: path.to_path_buf(),
            message,
        };
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(io)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
        if header.dtype != "f64" {
            return Err(bad(format!("unsupported dtype {}", header.dtype)));
        }
        let mut blob = Vec::new();
        r.read_to_end(&mut blob).map_err(io)?;
        if blob.len() % 8 != 0 {
            return Err(bad("truncated tensor data".into()));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| bad(format!("tensor `{}` runs past the data", e.name)))?;
            tensors.push((
                e.name,
                Tensor::new(&e.shape, data.to_vec()).map_err(|err| bad(err.to_string()))?,
            ));
        }
        Ok(Checkpoint {
            config: header.config,
            vocab: header.vocab,
            tensors,
            training: header.training,
        })
    }
}

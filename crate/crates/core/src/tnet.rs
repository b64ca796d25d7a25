//! Order-invariant point-cloud encoder.
//!
//! Each row `(x_1..x_dmax, y)` is squashed, affinely normalized with learnable
//! per-feature scale and shift, and pushed through three shared per-point
//! layers (`e`, `2e`, `4e` wide). A column-wise max over the rows of each
//! instance gives one `4e` vector, which two fully connected layers reduce
//! to the `e`-dimensional dataset embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Graph, Linear, NnError, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TNetConfig {
    /// Variables per point after zero padding.
    pub d_max: usize,
    /// Embedding width `e`.
    pub embed: usize,
    /// Width of the first fully connected layer after pooling.
    pub fc_hidden: usize,
}

impl Default for TNetConfig {
    fn default() -> Self {
        TNetConfig {
            d_max: 5,
            embed: 64,
            fc_hidden: 128,
        }
    }
}

impl TNetConfig {
    pub fn features(&self) -> usize {
        self.d_max + 1
    }
}

/// `sign(v) · ln(1 + |v|)`.
pub fn squash(v: f64) -> f64 {
    v.signum() * v.abs().ln_1p()
}

/// Point clouds of several instances packed row-wise. Instance `i` owns rows
/// `offsets[i]..offsets[i+1]`; each row holds `d_max` zero-padded inputs
/// followed by `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudBatch {
    d_max: usize,
    rows: Vec<f64>,
    offsets: Vec<usize>,
}

impl PointCloudBatch {
    pub fn new(d_max: usize) -> PointCloudBatch {
        PointCloudBatch {
            d_max,
            rows: Vec::new(),
            offsets: vec![0],
        }
    }

    /// Adds one instance given as a row-major `n × d` input matrix and `y`.
    pub fn push(&mut self, x: &[f64], d: usize, y: &[f64]) -> Result<(), NnError> {
        let n = y.len();
        if n == 0 {
            return Err(NnError::Invalid(
                "point cloud needs at least one point".into(),
            ));
        }
        if d > self.d_max {
            return Err(NnError::Invalid(format!(
                "{d} variables exceed d_max = {}",
                self.d_max
            )));
        }
        if x.len() != n * d {
            return Err(NnError::DataLength {
                shape: vec![n, d],
                len: x.len(),
            });
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(NnError::Invalid(
                "point cloud contains non-finite values".into(),
            ));
        }
        for (i, yi) in y.iter().enumerate() {
            self.rows.extend_from_slice(&x[i * d..(i + 1) * d]);
            self.rows.extend(std::iter::repeat_n(0.0, self.d_max - d));
            self.rows.push(*yi);
        }
        self.offsets.push(self.offsets.last().unwrap() + n);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_points(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TNet {
    pub config: TNetConfig,
    norm_scale: ParamId,
    norm_shift: ParamId,
    stages: [Linear; 3],
    fc1: Linear,
    fc2: Linear,
}

impl TNet {
    pub fn new<R: Rng>(config: TNetConfig, store: &mut ParamStore, rng: &mut R) -> TNet {
        let f = config.features();
        let e = config.embed;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let norm_scale = store.add("tnet.norm.scale", Tensor::full(&[f], 1.0));
        let norm_shift = store.add("tnet.norm.shift", Tensor::zeros(&[f]));
        let stages = [
            Linear::new(store, "tnet.stage1", f, e, he(f), rng),
            Linear::new(store, "tnet.stage2", e, 2 * e, he(e), rng),
            Linear::new(store, "tnet.stage3", 2 * e, 4 * e, he(2 * e), rng),
        ];
        let fc1 = Linear::new(store, "tnet.fc1", 4 * e, config.fc_hidden, he(4 * e), rng);
        // Output is added to every token embedding. The pooled features are
        // large, so start this layer small or it drowns the token signal.
        let fc2 = Linear::new(store, "tnet.fc2", config.fc_hidden, e, 0.002, rng);
        TNet {
            config,
            norm_scale,
            norm_shift,
            stages,
            fc1,
            fc2,
        }
    }

    /// Re-binds to the parameters already registered under the `tnet.` names.
    pub fn bind(config: TNetConfig, store: &ParamStore) -> Result<TNet, NnError> {
        let id = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| NnError::Invalid(format!("missing parameter {n}")))
        };
        let lin = |n: &str| -> Result<Linear, NnError> {
            Ok(Linear {
                weight: id(&format!("{n}.weight"))?,
                bias: Some(id(&format!("{n}.bias"))?),
            })
        };
        Ok(TNet {
            config,
            norm_scale: id("tnet.norm.scale")?,
            norm_shift: id("tnet.norm.shift")?,
            stages: [
                lin("tnet.stage1")?,
                lin("tnet.stage2")?,
                lin("tnet.stage3")?,
            ],
            fc1: lin("tnet.fc1")?,
            fc2: lin("tnet.fc2")?,
        })
    }

    /// Squash plus learnable affine map, applied per feature.
    pub fn normalize(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &PointCloudBatch,
    ) -> Result<Var, NnError> {
        let f = self.config.features();
        if batch.d_max != self.config.d_max {
            return Err(NnError::Invalid(format!(
                "batch padded to {} variables, encoder expects {}",
                batch.d_max, self.config.d_max
            )));
        }
        let squashed = batch.rows.iter().map(|v| squash(*v)).collect();
        let x = g.input(Tensor::new(&[batch.total_points(), f], squashed)?);
        let scale = g.param(store, self.norm_scale);
        let shift = g.param(store, self.norm_shift);
        let x = g.mul(x, scale)?;
        g.add(x, shift)
    }

    /// Embeds every instance of the batch: output `[batch, e]`.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &PointCloudBatch,
    ) -> Result<Var, NnError> {
        if batch.is_empty() {
            return Err(NnError::Invalid("empty point-cloud batch".into()));
        }
        let mut h = self.normalize(g, store, batch)?;
        for stage in &self.stages {
            h = stage.forward(g, store, h)?;
            h = g.relu(h);
        }
        let pooled = g.segment_max(h, batch.offsets())?;
        let h = self.fc1.forward(g, store, pooled)?;
        let h = g.relu(h);
        self.fc2.forward(g, store, h)
    }

    /// Parameter groups in pipeline order: normalization, three per-point
    /// stages, two fully connected layers.
    pub fn stage_params(&self) -> Vec<Vec<ParamId>> {
        let lin = |l: &Linear| vec![l.weight, l.bias.expect("tnet layers carry a bias")];
        let mut out = vec![vec![self.norm_scale, self.norm_shift]];
        out.extend(self.stages.iter().map(lin));
        out.push(lin(&self.fc1));
        out.push(lin(&self.fc2));
        out
    }
}

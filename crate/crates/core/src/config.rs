//! Experiment presets and the on-disk experiment description.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::bench::{Method, SWEEP_N};
use crate::eqgen::{Count, Domain, GenConfig, SplitSpec};
use crate::gp::GpConfig;
use crate::infer::InferConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    OneVar,
    TwoVar,
    ThreeVar,
    General,
    Custom,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::OneVar => "one_var",
            Experiment::TwoVar => "two_var",
            Experiment::ThreeVar => "three_var",
            Experiment::General => "general",
            Experiment::Custom => "custom",
        }
    }

    /// Variables and points per instance.
    pub fn shape(self) -> Option<(Count, Count)> {
        match self {
            Experiment::OneVar => Some((Count::Fixed(1), Count::Fixed(30))),
            Experiment::TwoVar => Some((Count::Fixed(2), Count::Fixed(200))),
            Experiment::ThreeVar => Some((Count::Fixed(3), Count::Fixed(500))),
            Experiment::General => Some((Count::Range([1, 5]), Count::Range([10, 200]))),
            Experiment::Custom => None,
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Experiment, String> {
        [
            Experiment::OneVar,
            Experiment::TwoVar,
            Experiment::ThreeVar,
            Experiment::General,
            Experiment::Custom,
        ]
        .into_iter()
        .find(|e| e.name() == s)
        .ok_or_else(|| format!("unknown experiment `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 10_000,
            val: 1000,
            test: 1000,
        }
    }
}

/// Everything a run needs. Counts are the full-size values; `scale`
/// multiplies all three.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub scale: f64,
    pub counts: SplitCounts,
    /// Generator settings shared by all splits; `num_vars`/`n_points` are
    /// replaced by the preset unless the experiment is `custom`.
    pub generator: GenConfig,
    pub train_domain: Domain,
    pub test_domain: Domain,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub inference: InferConfig,
    pub gp: GpConfig,
    pub gp_max: GpConfig,
    pub methods: Vec<Method>,
    /// Benchmark at most this many test instances.
    pub bench_instances: Option<usize>,
    pub sweep_n: Vec<usize>,
    /// Zero the timing column of result files so reruns compare equal.
    pub deterministic: bool,
    /// Defaults to `runs/<experiment>`.
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::preset(Experiment::OneVar)
    }
}

impl ExperimentConfig {
    pub fn preset(experiment: Experiment) -> ExperimentConfig {
        ExperimentConfig {
            experiment,
            seed: 0,
            scale: 1.0,
            counts: SplitCounts::default(),
            generator: GenConfig::default(),
            train_domain: Domain::interval(-3.0, 3.0),
            test_domain: Domain::two_sided(3.0, 5.0),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            inference: InferConfig::default(),
            gp: GpConfig::standard(),
            gp_max: GpConfig::max(),
            methods: Method::ALL.to_vec(),
            bench_instances: None,
            sweep_n: SWEEP_N.to_vec(),
            deterministic: false,
            out: None,
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(self.experiment.name()))
    }

    pub fn scaled(&self, count: usize) -> usize {
        ((count as f64 * self.scale).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(format!("scale must be positive, got {}", self.scale));
        }
        if self.methods.is_empty() {
            return Err("no methods selected".into());
        }
        if self.sweep_n.contains(&0) {
            return Err("sweep point counts must be positive".into());
        }
        self.split_specs()
            .iter()
            .try_for_each(|s| s.cfg.validate().map_err(|e| format!("{}: {e}", s.name)))?;
        self.gp.validate().map_err(|e| format!("gp: {e}"))?;
        self.gp_max.validate().map_err(|e| format!("gp_max: {e}"))
    }

    fn split_cfg(&self, domain: &Domain, stream: u64) -> GenConfig {
        let mut cfg = self.generator.clone();
        if let Some((d, n)) = self.experiment.shape() {
            cfg.num_vars = d;
            cfg.n_points = n;
        }
        cfg.x_domain = domain.clone();
        cfg.seed = self.seed.wrapping_mul(3).wrapping_add(stream);
        cfg
    }

    /// Train, val and test splits in generation order.
    pub fn split_specs(&self) -> Vec<SplitSpec> {
        vec![
            SplitSpec {
                name: "train".into(),
                cfg: self.split_cfg(&self.train_domain, 0),
                count: self.scaled(self.counts.train),
            },
            SplitSpec {
                name: "val".into(),
                cfg: self.split_cfg(&self.train_domain, 1),
                count: self.scaled(self.counts.val),
            },
            SplitSpec {
                name: "test".into(),
                cfg: self.split_cfg(&self.test_domain, 2),
                count: self.scaled(self.counts.test),
            },
        ]
    }

    /// Model config with the encoder wide enough for this experiment.
    pub fn model_config(&self) -> ModelConfig {
        let d_max = self
            .split_specs()
            .iter()
            .map(|s| s.cfg.num_vars.max())
            .max()
            .unwrap_or(1);
        ModelConfig {
            d_max: self.model.d_max.max(d_max),
            seed: self.model.seed ^ self.seed,
            ..self.model
        }
    }

    pub fn training_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.training.seed ^ self.seed,
            ..self.training
        }
    }
}

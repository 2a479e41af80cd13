//! Flat run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{DomainParams, GenerateConfig};
use crate::error::{Error, Result};
use crate::operator::{ModelConfig, OperatorMode, Spiking};
use crate::spiking::{Activation, Surrogate, DEFAULT_BETA, DEFAULT_SURROGATE_SLOPE, DEFAULT_THETA};
use crate::training::{AdamConfig, LossConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub seed: u64,
    pub threads: usize,

    pub n_target: usize,
    pub count: usize,
    pub split_fractions: [f64; 3],
    pub q_flux: usize,
    pub knn_k: usize,
    pub domain_length: f64,
    pub domain_height: f64,
    pub dimple_amplitude: f64,
    pub dimple_count: u32,
    pub a_range: [f64; 2],
    pub b_range: [f64; 2],
    pub flux_modes: usize,

    pub layers: usize,
    pub width: usize,
    pub modes: usize,
    pub spike_steps: usize,
    pub mode: OperatorMode,
    pub spiking: Spiking,
    pub embed_dim: usize,
    pub activation: Activation,
    pub embed_activation: Activation,
    pub surrogate_slope: f64,
    pub theta_init: f64,
    pub beta_init: f64,
    pub init_gain: f64,

    pub alpha: f64,
    pub gamma: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `null` disables it.
    pub clip_norm: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,

    pub gammas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GenerateConfig::default();
        let m = ModelConfig::default();
        let a = AdamConfig::default();
        RunConfig {
            dataset: PathBuf::from("data"),
            output: PathBuf::from("runs/default"),
            seed: 0,
            threads: 1,
            n_target: g.n_target,
            count: g.count,
            split_fractions: g.split_fractions,
            q_flux: g.q_flux,
            knn_k: g.knn_k,
            domain_length: g.domain.length,
            domain_height: g.domain.height,
            dimple_amplitude: g.domain.amplitude,
            dimple_count: g.domain.wavenumber,
            a_range: g.a_range,
            b_range: g.b_range,
            flux_modes: g.flux_modes,
            layers: m.layers,
            width: m.width,
            modes: m.modes,
            spike_steps: m.spike_steps,
            mode: m.mode,
            spiking: m.spiking,
            embed_dim: m.embed_dim,
            activation: Activation::Gelu,
            embed_activation: Activation::Gelu,
            surrogate_slope: DEFAULT_SURROGATE_SLOPE,
            theta_init: DEFAULT_THETA,
            beta_init: DEFAULT_BETA,
            init_gain: m.init_gain,
            alpha: 1.0,
            gamma: 0.0,
            lr: a.lr,
            adam_beta1: a.beta1,
            adam_beta2: a.beta2,
            adam_eps: a.eps,
            clip_norm: Some(1.0),
            epochs: 500,
            batch_size: 16,
            gammas: vec![0.0, 0.05, 0.1, 0.5],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    pub fn generate_config(&self) -> GenerateConfig {
        GenerateConfig {
            n_target: self.n_target,
            count: self.count,
            split_fractions: self.split_fractions,
            seed: self.seed,
            knn_k: self.knn_k,
            q_flux: self.q_flux,
            domain: DomainParams {
                length: self.domain_length,
                height: self.domain_height,
                amplitude: self.dimple_amplitude,
                wavenumber: self.dimple_count,
            },
            a_range: self.a_range,
            b_range: self.b_range,
            flux_modes: self.flux_modes,
        }
    }

    /// Model configuration for a dataset with `q` inputs, `k` channels and
    /// a graph built with `knn_k` neighbours.
    pub fn model_config(&self, q: usize, k: usize, knn_k: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            width: self.width,
            modes: self.modes,
            spike_steps: self.spike_steps,
            mode: self.mode,
            spiking: self.spiking,
            knn_k,
            embed_dim: self.embed_dim,
            input_dim: q,
            output_channels: k,
            coord_dim: 2,
            activation: self.activation,
            embed_activation: self.embed_activation,
            surrogate: Surrogate::FastSigmoid {
                slope: self.surrogate_slope,
            },
            theta_init: self.theta_init,
            beta_init: self.beta_init,
            init_gain: self.init_gain,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            loss: LossConfig {
                alpha: self.alpha,
                gamma: self.gamma,
            },
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            clip_norm: self.clip_norm,
            threads: self.threads,
        }
    }

    /// Checks every module-level invariant before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.generate_config().validate()?;
        self.model_config(2 + self.q_flux, 4, self.knn_k).validate()?;
        self.train_config().loss.validate()?;
        if self.n_target < 50 {
            return Err(Error::Config(format!("n_target {} is below 50", self.n_target)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.threads == 0 {
            return Err(Error::Config("epochs, batch_size and threads must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if !(self.adam_eps >= 0.0) {
            return Err(Error::Config("adam_eps must be non-negative".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        if self.gammas.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::Config("gammas must be finite and non-negative".into()));
        }
        Ok(())
    }
}

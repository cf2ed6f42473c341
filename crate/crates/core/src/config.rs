//! Run configuration read from TOML, and the manifest written next to every
//! run's outputs.
//!
//! Every field has a default, so a config file only lists what it changes.
//! Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adc::AnnealSchedule;
use crate::error::{Error, Result};
use crate::harness::{GridScanConfig, SweepConfig, Uncertainty};
use crate::meta::{LearnConfig, MetaObjectiveConfig, RetrainConfig, SearchSpace};
use crate::net::AdamConfig;
use crate::pipeline::{AdcHyperparams, Architecture, Head, TrainConfig};
use crate::signal::{db_to_linear, Alphabet, DataSource, Perturbation, PerturbationScale, SignalModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n: usize,
    pub k: usize,
    /// Window length `T` in seconds.
    pub duration: f64,
    pub grid_len: usize,
    pub f0: f64,
    pub noise_variance: f64,
    pub snr_db: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n: 6,
            k: 4,
            duration: 1e-6,
            grid_len: 20,
            f0: 1e3,
            noise_variance: 1.0,
            snr_db: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdcSection {
    pub p: usize,
    pub samples: usize,
    pub levels: usize,
}

impl Default for AdcSection {
    fn default() -> Self {
        Self {
            p: 4,
            samples: 4,
            levels: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    #[default]
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub task: TaskKind,
    pub train_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub width_factor: f64,
    pub slope_factor: f64,
    pub hidden: Vec<usize>,
    pub head: Head,
    /// Initial kernel width in grid units squared.
    pub initial_width: f64,
    pub normalized_kernel: bool,
    pub calibration: usize,
    pub refine_epochs: usize,
    pub select_best: bool,
    /// Train on the perturbed-model ensemble with this fraction.
    pub perturbation: Option<f64>,
    pub perturbation_scale: PerturbationScale,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            task: TaskKind::Classification,
            train_size: 10_000,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            width_factor: t.anneal.width_factor,
            slope_factor: t.anneal.slope_factor,
            hidden: t.architecture.hidden,
            head: t.architecture.head,
            initial_width: t.architecture.initial_width,
            normalized_kernel: t.architecture.normalized_kernel,
            calibration: t.calibration,
            refine_epochs: t.refine_epochs,
            select_best: t.select_best,
            perturbation: None,
            perturbation_scale: PerturbationScale::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub trials: usize,
    /// `L~` of the sampled baselines; defaults to the learned system's.
    pub baseline_samples: Option<usize>,
    /// Budget of the sampled-quantized baseline; defaults to the learned
    /// system's bit cost.
    pub baseline_budget: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            trials: 100_000,
            baseline_samples: None,
            baseline_budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub snrs_db: Vec<f64>,
    pub detectors: Vec<String>,
    /// Perturbation fraction for the model-uncertainty study.
    pub uncertainty: Option<f64>,
    pub oracle_draws: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            snrs_db: vec![2.0, 4.0, 6.0, 8.0, 10.0],
            detectors: ["learned", "map-full", "map-sampled", "map-sampled-quantized"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            uncertainty: None,
            oracle_draws: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaSection {
    pub budget: usize,
    /// Defaults to the channel count.
    pub p_max: Option<usize>,
    pub max_bits: usize,
    pub max_evaluations: usize,
    pub alpha: f64,
    pub snrs_db: Vec<f64>,
    pub strategy: String,
    pub eval_trials: usize,
    /// Retrain the selected configuration with the `[train]` settings.
    pub retrain: bool,
}

impl Default for MetaSection {
    fn default() -> Self {
        let m = MetaObjectiveConfig::default();
        Self {
            budget: 20,
            p_max: None,
            max_bits: 8,
            max_evaluations: 30,
            alpha: m.alpha,
            snrs_db: m.snrs_db,
            strategy: "bayes-ei".into(),
            eval_trials: m.eval_trials,
            retrain: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub p_values: Vec<usize>,
    pub sample_values: Vec<usize>,
    pub levels: usize,
    pub repeats: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            p_values: (1..=6).collect(),
            sample_values: (1..=10).collect(),
            levels: 4,
            repeats: 3,
        }
    }
}

/// Everything a CLI run needs, resolved from file and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub adc: AdcSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub meta: MetaSection,
    pub grid: GridSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidParameter(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidParameter(format!("config: {e}")))
    }

    pub fn signal_model(&self) -> Result<SignalModel> {
        let m = &self.model;
        SignalModel::new(
            m.n,
            m.k,
            m.duration,
            m.grid_len,
            db_to_linear(m.snr_db),
            m.f0,
            m.noise_variance,
        )
    }

    pub fn theta(&self) -> Result<AdcHyperparams> {
        AdcHyperparams::new(self.adc.p, self.adc.samples, self.adc.levels)
    }

    pub fn alphabet(&self) -> Alphabet {
        match self.train.task {
            TaskKind::Classification => Alphabet::Binary,
            TaskKind::Regression => Alphabet::Real,
        }
    }

    pub fn data_source(&self) -> DataSource {
        match self.train.perturbation {
            None => DataSource::Exact,
            Some(fraction) => DataSource::PerturbedEnsemble(Perturbation {
                fraction,
                scale: self.train.perturbation_scale,
            }),
        }
    }

    /// Training settings; `seed` is the optimizer stream seed.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
            anneal: AnnealSchedule {
                width_factor: t.width_factor,
                slope_factor: t.slope_factor,
            },
            architecture: Architecture {
                hidden: t.hidden.clone(),
                head: t.head,
                initial_width: t.initial_width,
                normalized_kernel: t.normalized_kernel,
            },
            calibration: t.calibration,
            refine_epochs: t.refine_epochs,
            select_best: t.select_best,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        let theta = self.theta()?;
        let uncertainty = self.sweep.uncertainty.map(|fraction| Uncertainty {
            perturbation: Perturbation {
                fraction,
                scale: self.train.perturbation_scale,
            },
            oracle_draws: self.sweep.oracle_draws,
        });
        Ok(SweepConfig {
            model: self.signal_model()?,
            snrs_db: self.sweep.snrs_db.clone(),
            detectors: self.sweep.detectors.clone(),
            theta,
            baseline_samples: self.eval.baseline_samples.unwrap_or(theta.samples),
            baseline_budget: self.eval.baseline_budget.unwrap_or(theta.bit_cost()),
            train: self.train_config(self.seed)?,
            train_size: self.train.train_size,
            trials: self.eval.trials,
            uncertainty,
            seed: self.seed,
        })
    }

    pub fn meta_objective_config(&self) -> Result<MetaObjectiveConfig> {
        let cfg = MetaObjectiveConfig {
            alpha: self.meta.alpha,
            snrs_db: self.meta.snrs_db.clone(),
            train: self.train_config(self.seed)?,
            train_size: self.train.train_size,
            eval_trials: self.meta.eval_trials,
            data_source: self.data_source(),
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn search_space(&self) -> SearchSpace {
        SearchSpace {
            budget: self.meta.budget,
            p_max: self.meta.p_max.unwrap_or(self.model.n),
            grid_len: self.model.grid_len,
            max_bits: self.meta.max_bits,
        }
    }

    pub fn learn_config(&self) -> Result<LearnConfig> {
        let objective = self.meta_objective_config()?;
        let retrain = if self.meta.retrain {
            Some(RetrainConfig {
                train: objective.train.clone(),
                train_size: self.train.train_size,
            })
        } else {
            None
        };
        Ok(LearnConfig {
            budget: self.meta.budget,
            p_max: self.meta.p_max,
            max_evaluations: self.meta.max_evaluations,
            strategy: self.meta.strategy.clone(),
            objective,
            retrain,
            seed: self.seed,
        })
    }

    pub fn grid_config(&self) -> Result<GridScanConfig> {
        Ok(GridScanConfig {
            p_values: self.grid.p_values.clone(),
            sample_values: self.grid.sample_values.clone(),
            levels: self.grid.levels,
            repeats: self.grid.repeats,
            budget: self.meta.budget,
            model: self.signal_model()?,
            objective: self.meta_objective_config()?,
            seed: self.seed,
        })
    }
}

pub const MANIFEST_FORMAT: &str = "taskadc-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// Record of one run: what was asked, with every parameter and seed resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub package_version: String,
    pub command: String,
    pub seed: u64,
    /// Named seeds derived from `seed`.
    pub derived_seeds: Vec<(String, u64)>,
    pub config: RunConfig,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            package_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: config.seed,
            derived_seeds: Vec::new(),
            config: config.clone(),
            outputs: Vec::new(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidParameter(format!("manifest: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, self.to_toml()?.as_bytes())
    }
}

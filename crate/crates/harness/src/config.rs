//! Experiment configuration.
//!
//! A config file is TOML. Every key is optional: missing keys take the
//! value of the selected profile (`desk` unless the file or the command line
//! says otherwise), unknown keys are rejected.
//!
//! ```toml
//! profile = "desk"
//! strategy = "MODFED"        # MODFED | FEDAVG | FEDPROX | SINGLESET
//! scenario = 2               # 1: all 1D_RANDOM; 2: 1D_UNIFORM / 1D_RANDOM / 2D_RANDOM
//! clients = 3
//! image_size = 64
//! train_images = 40          # per client, split into subsets 1 and 2
//! test_images = 8            # per client
//! noise_variance = 0.0
//! seed = 7
//! checkpoint_every = 10      # 0 writes only the final checkpoints
//!
//! [model]                    # hidden, depth, cg_max_iters, cg_tol, lambda_init, final_init_scale
//! [training]                 # rounds, local_epochs, batch_size, lr, ..., partition, reg_mode
//! [metrics]                  # data_range, k1, k2, window, sigma
//!
//! [[client]]                 # optional per-client overrides, in client order
//! mask = "2D_RANDOM"
//! acceleration = 4
//! ```

use std::path::{Path, PathBuf};

use modfed::fed::{FedConfig, RegMode, Strategy};
use modfed::metrics::MetricConfig;
use modfed::mri::{ContrastParams, MaskPattern, MaskSpec, PhantomKind, PhantomSpec};
use modfed::recon::{PartitionScheme, ReconConfig};
use modfed::autodiff::AdamWConfig;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub gamma: f64,
    pub mu: f64,
    pub reg_mode: RegMode,
    /// Defaults to SLAM_LOCAL for MODFED and ALL_GLOBAL otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionScheme>,
    pub split_fraction: f64,
    pub parallel: bool,
    pub validation_metrics: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskPattern>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceleration: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<ContrastParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub strategy: Strategy,
    pub scenario: u8,
    pub clients: usize,
    pub image_size: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub noise_variance: f64,
    pub seed: u64,
    pub acceleration: usize,
    pub center_fraction: f64,
    pub checkpoint_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: ReconConfig,
    pub training: TrainingConfig,
    pub metrics: MetricConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub client: Vec<ClientOverride>,
}

/// Data-generation parameters of one simulated site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub id: usize,
    pub phantom: PhantomSpec,
    pub mask: MaskSpec,
}

impl Profile {
    pub fn defaults(self) -> ExperimentConfig {
        let desk = ExperimentConfig {
            profile: Profile::Desk,
            strategy: Strategy::ModFed,
            scenario: 2,
            clients: 3,
            image_size: 64,
            train_images: 40,
            test_images: 8,
            noise_variance: 0.0,
            seed: 7,
            acceleration: 4,
            center_fraction: 0.08,
            checkpoint_every: 0,
            output_dir: None,
            model: ReconConfig {
                hidden: 16,
                depth: 2,
                ..ReconConfig::default()
            },
            training: TrainingConfig {
                rounds: 30,
                local_epochs: 2,
                batch_size: 4,
                lr: 3e-3,
                weight_decay: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                gamma: 0.1,
                mu: 0.01,
                reg_mode: RegMode::Literal,
                partition: None,
                split_fraction: 0.8,
                parallel: false,
                validation_metrics: true,
            },
            metrics: MetricConfig::default(),
            client: Vec::new(),
        };
        match self {
            Profile::Desk => desk,
            Profile::Full => ExperimentConfig {
                profile: Profile::Full,
                image_size: 256,
                train_images: 200,
                test_images: 50,
                model: ReconConfig {
                    hidden: 64,
                    depth: 5,
                    ..desk.model
                },
                training: TrainingConfig {
                    rounds: 220,
                    local_epochs: 2,
                    batch_size: 24,
                    lr: 1e-4,
                    ..desk.training
                },
                ..desk
            },
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl ExperimentConfig {
    /// Parse TOML text over the defaults of `profile` (or the file's own
    /// `profile` key when `profile` is `None`).
    pub fn from_toml_str(text: &str, profile: Option<Profile>) -> Result<Self, HarnessError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        let file_profile = match table.get("profile") {
            Some(v) => Some(
                Profile::deserialize(v.clone())
                    .map_err(|e| HarnessError::Config(format!("profile: {e}")))?,
            ),
            None => None,
        };
        let chosen = profile.or(file_profile).unwrap_or(Profile::Desk);
        let mut merged = toml::Value::try_from(chosen.defaults())
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        merge(&mut merged, toml::Value::Table(table));
        if let toml::Value::Table(t) = &mut merged {
            t.insert("profile".into(), toml::Value::try_from(chosen).expect("profile serializes"));
        }
        let config: ExperimentConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, profile)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |field: &str, msg: String| Err(HarnessError::Config(format!("{field}: {msg}")));
        if !matches!(self.scenario, 1 | 2) {
            return fail("scenario", format!("must be 1 or 2, got {}", self.scenario));
        }
        if self.clients == 0 {
            return fail("clients", "must be >= 1".into());
        }
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return fail("image_size", format!("must be a power of two >= 16, got {}", self.image_size));
        }
        if self.train_images < 2 {
            return fail("train_images", "must be >= 2 so both training subsets are non-empty".into());
        }
        if self.test_images == 0 {
            return fail("test_images", "must be >= 1".into());
        }
        if !(self.noise_variance >= 0.0) {
            return fail("noise_variance", format!("must be >= 0, got {}", self.noise_variance));
        }
        if self.acceleration == 0 {
            return fail("acceleration", "must be >= 1".into());
        }
        if self.client.len() > self.clients {
            return fail(
                "client",
                format!("{} overrides for {} clients", self.client.len(), self.clients),
            );
        }
        let t = &self.training;
        if !(t.split_fraction > 0.0 && t.split_fraction < 1.0) {
            return fail("training.split_fraction", format!("must be in (0,1), got {}", t.split_fraction));
        }
        if self.model.depth == 0 {
            return fail("model.depth", "must be >= 1".into());
        }
        if self.model.hidden == 0 {
            return fail("model.hidden", "must be >= 1".into());
        }
        if !(self.model.lambda_init > 0.0) {
            return fail("model.lambda_init", "must be positive".into());
        }
        self.fed_config()
            .validate()
            .map_err(|e| HarnessError::Config(format!("training: {e}")))?;
        for c in self.client_specs() {
            modfed::mri::make_mask(&c.mask, self.image_size, self.image_size)
                .map_err(|e| HarnessError::Config(format!("client {} mask: {e}", c.id)))?;
        }
        Ok(())
    }

    pub fn partition(&self) -> PartitionScheme {
        match &self.training.partition {
            Some(p) => p.clone(),
            None if self.strategy == Strategy::ModFed => PartitionScheme::SlamLocal,
            None => PartitionScheme::AllGlobal,
        }
    }

    pub fn fed_config(&self) -> FedConfig {
        let t = &self.training;
        FedConfig {
            strategy: self.strategy,
            rounds: t.rounds,
            local_epochs: t.local_epochs,
            batch_size: t.batch_size,
            gamma: t.gamma,
            mu: t.mu,
            reg_mode: t.reg_mode,
            partition: self.partition(),
            optimizer: AdamWConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
                weight_decay: t.weight_decay,
            },
            recon: self.model,
            model_seed: self.seed.wrapping_add(1),
            shuffle_seed: self.seed.wrapping_add(2),
            parallel: t.parallel,
            validation_metrics: t.validation_metrics,
            metrics: self.metrics,
        }
    }

    /// Per-client data settings: the scenario's mask family, alternating
    /// phantom kinds and a contrast exponent that grows with the client index.
    pub fn client_specs(&self) -> Vec<ClientSpec> {
        const SCENARIO_2: [MaskPattern; 3] = [MaskPattern::Uniform1d, MaskPattern::Random1d, MaskPattern::Random2d];
        (0..self.clients)
            .map(|k| {
                let o = self.client.get(k).cloned().unwrap_or_default();
                let pattern = o.mask.unwrap_or(match self.scenario {
                    1 => MaskPattern::Random1d,
                    _ => SCENARIO_2[k % 3],
                });
                let kind = o.phantom.unwrap_or(if k % 2 == 0 {
                    PhantomKind::EllipsePhantom
                } else {
                    PhantomKind::TexturedPhantom
                });
                let contrast = o.contrast.unwrap_or(ContrastParams {
                    gamma: 0.8 * 1.25f64.powi(k as i32),
                    ..ContrastParams::default()
                });
                let client_seed = self.seed.wrapping_mul(1_000).wrapping_add(k as u64);
                ClientSpec {
                    id: k,
                    phantom: PhantomSpec {
                        kind,
                        size: self.image_size,
                        contrast,
                        seed: client_seed,
                    },
                    mask: MaskSpec::new(
                        pattern,
                        o.acceleration.unwrap_or(self.acceleration),
                        o.center_fraction.unwrap_or(self.center_fraction),
                        client_seed.wrapping_add(500),
                    ),
                }
            })
            .collect()
    }

    /// Canonical JSON echo used for the manifest and its hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

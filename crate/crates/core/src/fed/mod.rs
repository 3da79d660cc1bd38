//! Federation engine: client update phase, server aggregation and the
//! FedAvg / FedProx / single-site baselines.
//!
//! One round runs, per client: receive the server weights, evaluate the
//! frozen server model and the mixed (server-shared + own-personalized)
//! model on subset 2, train `Z` epochs on subset 1, upload. The server then
//! weights the uploads (softmax of subset-2 losses for [`Strategy::ModFed`],
//! sample counts otherwise) and forms their convex combination.

mod client;
mod report;
mod run;
mod server;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamWConfig, OptimError, ShapeError};
use crate::metrics::{MetricConfig, MetricError};
use crate::mri::MriError;
use crate::recon::{PartitionScheme, ReconConfig, ReconError};

pub use client::{client_receive, eval_mixed_loss, eval_server_loss, ClientData, ClientState, ClientUpload, S2Eval};
pub use report::{write_round_csv, ClientRoundStats, RoundReport, ROUND_CSV_HEADER};
pub use run::{run_federation, run_federation_with, train_centralized, CentralizedOutcome, FederationOutcome};
pub use server::{adaptive_weights, aggregate, fedavg_weights, ServerState};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("invalid federation config: {0}")]
    Config(String),
    #[error("non-finite training loss at round {round}, client {client}")]
    NonFiniteLoss { round: usize, client: usize },
    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: Box<FedError>,
    },
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Mri(#[from] MriError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "MODFED")]
    ModFed,
    #[serde(rename = "FEDAVG")]
    FedAvg,
    #[serde(rename = "FEDPROX")]
    FedProx,
    #[serde(rename = "SINGLESET")]
    SingleSet,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::ModFed => "MODFED",
            Strategy::FedAvg => "FEDAVG",
            Strategy::FedProx => "FEDPROX",
            Strategy::SingleSet => "SINGLESET",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Treatment of the server-loss regularizer `γ_k·L_C^k` in the client
/// objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RegMode {
    /// `L_s1 + γ·L_C` with `L_C` evaluated on the frozen server model. The
    /// term is constant in the client's parameters, so it changes the logged
    /// objective and never the update.
    Literal,
    /// Variant: `γ·‖f_k(Aᴴb) − f_C(Aᴴb)‖₂` on subset-2 minibatches, which
    /// pulls the client's reconstructions toward the server's.
    Consistency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub strategy: Strategy,
    /// Communication rounds `T`.
    pub rounds: usize,
    /// Local epochs per round `Z`.
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Regularizer weight `γ_k`, shared by all clients.
    pub gamma: f64,
    /// FedProx proximal weight `μ`.
    pub mu: f64,
    pub reg_mode: RegMode,
    pub partition: PartitionScheme,
    pub optimizer: AdamWConfig,
    pub recon: ReconConfig,
    pub model_seed: u64,
    /// Keys the per-epoch minibatch order.
    pub shuffle_seed: u64,
    /// Run the client phase of a round on one thread per client.
    pub parallel: bool,
    /// Compute PSNR/SSIM on subset 2 each round.
    pub validation_metrics: bool,
    pub metrics: MetricConfig,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            strategy: Strategy::ModFed,
            rounds: 30,
            local_epochs: 2,
            batch_size: 4,
            gamma: 0.1,
            mu: 0.01,
            reg_mode: RegMode::Literal,
            partition: PartitionScheme::SlamLocal,
            optimizer: AdamWConfig::default(),
            recon: ReconConfig::default(),
            model_seed: 0,
            shuffle_seed: 0,
            parallel: false,
            validation_metrics: true,
            metrics: MetricConfig::default(),
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |m: String| Err(FedError::Config(m));
        if self.rounds == 0 {
            return bad("rounds must be >= 1".into());
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return bad(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return bad(format!("mu must be finite and >= 0, got {}", self.mu));
        }
        if !(self.optimizer.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.optimizer.lr));
        }
        if self.validation_metrics {
            self.metrics.validate()?;
        }
        Ok(())
    }
}

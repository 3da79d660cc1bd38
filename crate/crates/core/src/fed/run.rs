use std::collections::HashSet;
use std::time::Instant;

use crate::autodiff::{AdamW, ParamSet, PartitionTag};
use crate::recon::{partition_params, UnrolledModel};

use super::client::{client_receive, eval_server_loss, ClientData, ClientState, ClientUpload, S2Eval};
use super::report::{ClientRoundStats, RoundReport};
use super::server::{adaptive_weights, aggregate, fedavg_weights, ServerState};
use super::{FedConfig, FedError, RegMode, Strategy};

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    /// Final server model `Θ_C^T`.
    pub server: ParamSet,
    /// Per client, the final server's shared tensors with the client's own
    /// personalized tensors (the client's own model for single-site runs).
    pub clients: Vec<UnrolledModel>,
    pub reports: Vec<RoundReport>,
}

#[derive(Debug, Clone)]
pub struct CentralizedOutcome {
    pub model: UnrolledModel,
    /// Mean subset-1 minibatch loss per block of `Z` epochs.
    pub round_losses: Vec<f64>,
    /// Parameters after each block of `Z` epochs.
    pub snapshots: Vec<ParamSet>,
}

fn initial_model(config: &FedConfig) -> Result<UnrolledModel, FedError> {
    let mut model = UnrolledModel::new(config.recon, config.model_seed)?;
    partition_params(&mut model, &config.partition)?;
    Ok(model)
}

fn client_round(
    c: &mut ClientState,
    server: &ParamSet,
    round: usize,
    config: &FedConfig,
) -> Result<(ClientUpload, S2Eval), FedError> {
    let metrics = config.validation_metrics.then_some(&config.metrics);
    let (loss_server, eval) = if config.strategy == Strategy::SingleSet {
        let e = c.eval_own(metrics)?;
        (e.loss, e)
    } else {
        client_receive(c, server)?;
        let e = c.eval_mixed(metrics)?;
        // With nothing personalized yet the mixed model is the server model.
        let loss_server = if c.model.params == *server {
            e.loss
        } else {
            eval_server_loss(c)?
        };
        (loss_server, e)
    };
    let loss_s1 = c.train(round, config)?;
    let upload = ClientUpload {
        client: c.id,
        params: c.model.params.clone(),
        loss_s1,
        loss_s2: eval.loss,
        loss_server,
        sample_count: c.data().s1_len(),
    };
    Ok((upload, eval))
}

pub fn run_federation(config: &FedConfig, data: Vec<ClientData>) -> Result<FederationOutcome, FedError> {
    run_federation_with(config, data, |_, _, _| Ok(()))
}

/// [`run_federation`] with `observer` called after every round, e.g. to
/// write checkpoints.
pub fn run_federation_with<F>(
    config: &FedConfig,
    data: Vec<ClientData>,
    mut observer: F,
) -> Result<FederationOutcome, FedError>
where
    F: FnMut(&RoundReport, &ServerState, &[ClientState]) -> Result<(), FedError>,
{
    config.validate()?;
    if data.is_empty() {
        return Err(FedError::Config("at least one client is required".into()));
    }
    let mut ids = HashSet::new();
    for d in &data {
        if !ids.insert(d.id) {
            return Err(FedError::Config(format!("duplicate client id {}", d.id)));
        }
    }

    let model = initial_model(config)?;
    let counts: Vec<usize> = data.iter().map(|d| d.s1_len()).collect();
    let mut server = ServerState {
        model: model.params.clone(),
        alpha: fedavg_weights(&counts)?,
        round: 0,
        total_rounds: config.rounds,
    };
    let mut clients: Vec<ClientState> = data
        .into_iter()
        .map(|d| ClientState::new(d, model.clone(), AdamW::new(config.optimizer), config.gamma))
        .collect();

    let mut reports = Vec::with_capacity(config.rounds);
    for t in 0..config.rounds {
        let start = Instant::now();
        let results: Vec<Result<(ClientUpload, S2Eval), FedError>> = if config.parallel {
            let server_model = &server.model;
            std::thread::scope(|s| {
                let handles: Vec<_> = clients
                    .iter_mut()
                    .map(|c| s.spawn(move || client_round(c, server_model, t, config)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("client worker panicked"))
                    .collect()
            })
        } else {
            clients
                .iter_mut()
                .map(|c| client_round(c, &server.model, t, config))
                .collect()
        };

        let mut uploads = Vec::with_capacity(results.len());
        let mut evals = Vec::with_capacity(results.len());
        for (c, r) in clients.iter().zip(results) {
            let (u, e) = r.map_err(|e| FedError::Client {
                round: t + 1,
                client: c.id,
                source: Box::new(e),
            })?;
            uploads.push(u);
            evals.push(e);
        }

        let alpha = match config.strategy {
            Strategy::ModFed => {
                let losses: Vec<f64> = uploads.iter().map(|u| u.loss_s2).collect();
                adaptive_weights(&losses)?
            }
            _ => fedavg_weights(&uploads.iter().map(|u| u.sample_count).collect::<Vec<_>>())?,
        };
        if config.strategy != Strategy::SingleSet {
            let sets: Vec<&ParamSet> = uploads.iter().map(|u| &u.params).collect();
            server.model = aggregate(&sets, &alpha)?;
        }
        server.alpha = alpha.clone();
        server.round = t + 1;

        let stats = uploads
            .iter()
            .zip(&evals)
            .zip(&alpha)
            .map(|((u, e), &a)| ClientRoundStats {
                client: u.client,
                loss_s1: u.loss_s1,
                loss_s2: u.loss_s2,
                loss_server: u.loss_server,
                alpha: a,
                psnr_val: e.psnr,
                ssim_val: e.ssim,
            })
            .collect();
        let report = RoundReport {
            round: t + 1,
            clients: stats,
            alpha,
            wall_time_secs: start.elapsed().as_secs_f64(),
        };
        observer(&report, &server, &clients)?;
        reports.push(report);
    }

    let personalized = clients
        .into_iter()
        .map(|c| {
            let mut model = c.model;
            if config.strategy != Strategy::SingleSet {
                for p in model.params.iter_mut() {
                    if p.tag() == PartitionTag::GlobalShared {
                        p.tensor = server.model.tensor(&p.name).expect("compatible sets").clone();
                    }
                }
            }
            model
        })
        .collect();
    Ok(FederationOutcome {
        server: server.model,
        clients: personalized,
        reports,
    })
}

/// Plain training on one dataset's subset 1 with the same initialization,
/// optimizer and minibatch schedule a federated client would use; `rounds`
/// blocks of `local_epochs` epochs.
pub fn train_centralized(config: &FedConfig, data: ClientData) -> Result<CentralizedOutcome, FedError> {
    config.validate()?;
    let plain = FedConfig {
        strategy: Strategy::FedAvg,
        reg_mode: RegMode::Literal,
        ..config.clone()
    };
    let model = initial_model(config)?;
    let mut client = ClientState::new(data, model, AdamW::new(config.optimizer), 0.0);
    let mut round_losses = Vec::with_capacity(config.rounds);
    let mut snapshots = Vec::with_capacity(config.rounds);
    for t in 0..config.rounds {
        round_losses.push(client.train(t, &plain)?);
        snapshots.push(client.model.params.clone());
    }
    Ok(CentralizedOutcome {
        model: client.model,
        round_losses,
        snapshots,
    })
}

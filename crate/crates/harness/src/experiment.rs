use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use modfed::fed::{run_federation_with, write_round_csv, ClientData, FederationOutcome, RoundReport, Strategy};
use modfed::metrics::{gen_report, image_quality, GenReport};
use modfed::mri::io::{write_dataset, DatasetMeta};
use modfed::mri::{adjoint_op, make_mask, make_phantoms, PhantomSample, PhantomSpec};
use modfed::recon::checkpoint::write_checkpoint;
use modfed::recon::{partition_params, UnrolledModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ClientSpec, ExperimentConfig};
use crate::HarnessError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TEST_METRICS_FILE: &str = "test_metrics.csv";
pub const GEN_REPORT_FILE: &str = "gen_report.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Offset separating test-set phantom seeds from training ones.
const TEST_SEED_OFFSET: u64 = 0x7e57;

#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub spec: ClientSpec,
    pub train: Vec<PhantomSample>,
    pub test: Vec<PhantomSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildInfo {
    pub package_version: String,
    pub git_rev: String,
}

impl BuildInfo {
    pub fn current() -> Self {
        BuildInfo {
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            git_rev: env!("MODFED_GIT_REV").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub strategy: Strategy,
    pub config: ExperimentConfig,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_sha256: String,
    /// SHA-256 over everything that determines the generated data.
    pub data_fingerprint: String,
    pub clients: Vec<ClientSpec>,
    pub build: BuildInfo,
}

/// Test-set quality of one client's personalized model next to the
/// zero-filled `Aᴴb` baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientTestMetrics {
    pub client: usize,
    pub mask: String,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_zero_filled: f64,
    pub ssim_zero_filled: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientGenReport {
    pub client: usize,
    pub untrained: GenReport,
    pub trained: GenReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategy: Strategy,
    pub seed: u64,
    pub rounds: usize,
    pub first_round_loss: f64,
    pub final_round_loss: f64,
    pub mean_psnr: f64,
    pub median_psnr: f64,
    pub mean_ssim: f64,
    pub median_ssim: f64,
    pub mean_psnr_zero_filled: f64,
    pub mean_training_error: f64,
    pub param_count: usize,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub reports: Vec<RoundReport>,
    pub test_metrics: Vec<ClientTestMetrics>,
    pub gen_reports: Vec<ClientGenReport>,
    pub summary: Summary,
    pub wall_time_secs: f64,
}

fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn data_fingerprint(config: &ExperimentConfig) -> String {
    let key = serde_json::json!({
        "clients": config.client_specs(),
        "train_images": config.train_images,
        "test_images": config.test_images,
        "noise_variance": config.noise_variance,
        "split_fraction": config.training.split_fraction,
    });
    hex_sha256(key.to_string().as_bytes())
}

pub fn manifest(config: &ExperimentConfig) -> Manifest {
    let canonical = config.canonical_json();
    Manifest {
        strategy: config.strategy,
        config: config.clone(),
        config_sha256: hex_sha256(canonical.as_bytes()),
        data_fingerprint: data_fingerprint(config),
        clients: config.client_specs(),
        build: BuildInfo::current(),
    }
}

/// Phantoms for every client: `train_images` for training (later split into
/// subsets 1 and 2) and `test_images` held out, all through the client's mask.
pub fn generate_data(config: &ExperimentConfig) -> Result<Vec<ClientDataset>, HarnessError> {
    config
        .client_specs()
        .into_iter()
        .map(|spec| {
            let n = config.image_size;
            let mask = Arc::new(make_mask(&spec.mask, n, n)?);
            let train = make_phantoms(&spec.phantom, &mask, config.train_images, config.noise_variance)?;
            let test_spec = PhantomSpec {
                seed: spec.phantom.seed.wrapping_add(TEST_SEED_OFFSET),
                ..spec.phantom
            };
            let test = make_phantoms(&test_spec, &mask, config.test_images, config.noise_variance)?;
            Ok(ClientDataset { spec, train, test })
        })
        .collect()
}

pub fn split_data(config: &ExperimentConfig, data: &[ClientDataset]) -> Result<Vec<ClientData>, HarnessError> {
    data.iter()
        .map(|d| {
            Ok(ClientData::split(
                d.spec.id,
                &d.train,
                config.training.split_fraction,
                config.seed,
            )?)
        })
        .collect()
}

/// PSNR/SSIM of `model` and of the zero-filled input on a test set.
pub fn evaluate_test(
    config: &ExperimentConfig,
    client: usize,
    model: &UnrolledModel,
    samples: &[PhantomSample],
) -> Result<ClientTestMetrics, HarnessError> {
    let mut acc = [0.0f64; 5];
    for s in samples {
        let recon = model.reconstruct(&s.kspace, &s.mask)?;
        let zf = adjoint_op(&s.kspace, &s.mask)?;
        let (p, q) = image_quality(&recon, &s.truth, &config.metrics)?;
        let (pz, qz) = image_quality(&zf, &s.truth, &config.metrics)?;
        let loss = recon
            .to_tensor()
            .sub(&s.truth.to_tensor())
            .map_err(modfed::recon::ReconError::from)?
            .norm();
        for (a, v) in acc.iter_mut().zip([p, q, pz, qz, loss]) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    Ok(ClientTestMetrics {
        client,
        mask: samples.first().map(|s| s.mask.spec().pattern.as_str().to_string()).unwrap_or_default(),
        psnr: acc[0] / n,
        ssim: acc[1] / n,
        psnr_zero_filled: acc[2] / n,
        ssim_zero_filled: acc[3] / n,
        test_loss: acc[4] / n,
    })
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        (s[m - 1] + s[m]) / 2.0
    } else {
        s[m]
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn write_test_csv(path: &Path, strategy: Strategy, rows: &[ClientTestMetrics]) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record([
        "strategy", "client", "mask", "psnr", "ssim", "psnr_zero_filled", "ssim_zero_filled", "test_loss",
    ])?;
    for r in rows {
        w.write_record([
            strategy.as_str().to_string(),
            r.client.to_string(),
            r.mask.clone(),
            r.psnr.to_string(),
            r.ssim.to_string(),
            r.psnr_zero_filled.to_string(),
            r.ssim_zero_filled.to_string(),
            r.test_loss.to_string(),
        ])?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

/// Generate data, federate, evaluate, and write every artifact to `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome, HarnessError> {
    config.validate()?;
    let start = Instant::now();
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let manifest = manifest(config);
    write_json(&out.join(MANIFEST_FILE), &manifest)?;

    let data = generate_data(config)?;
    let data_dir = out.join("data");
    fs::create_dir_all(&data_dir).map_err(|e| HarnessError::io(&data_dir, e))?;
    for d in &data {
        for (split, samples) in [("train", &d.train), ("test", &d.test)] {
            let meta = DatasetMeta {
                client: d.spec.id,
                split: split.into(),
                phantom: d.spec.phantom,
                mask: d.spec.mask,
                noise_variance: config.noise_variance,
                count: samples.len(),
            };
            write_dataset(&data_dir.join(format!("client{}_{split}.mfpd", d.spec.id)), samples, &meta)?;
        }
    }

    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| HarnessError::io(&ckpt_dir, e))?;
    let fed = config.fed_config();
    let every = config.checkpoint_every;
    let FederationOutcome {
        server,
        clients,
        reports,
    } = run_federation_with(&fed, split_data(config, &data)?, |report, state, _| {
        if every > 0 && report.round % every == 0 {
            write_checkpoint(&ckpt_dir.join(format!("server_round{:04}.mfck", report.round)), &state.model)?;
        }
        Ok(())
    })?;
    write_checkpoint(&ckpt_dir.join("server_final.mfck"), &server)?;
    for (k, m) in clients.iter().enumerate() {
        write_checkpoint(&ckpt_dir.join(format!("client{k}_final.mfck")), &m.params)?;
    }

    let metrics_path = out.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| HarnessError::io(&metrics_path, e))?;
    write_round_csv(BufWriter::new(file), &reports)?;

    let mut untrained = UnrolledModel::new(fed.recon, fed.model_seed)?;
    partition_params(&mut untrained, &fed.partition)?;
    let mut test_metrics = Vec::with_capacity(data.len());
    let mut gen_reports = Vec::with_capacity(data.len());
    for (d, model) in data.iter().zip(&clients) {
        test_metrics.push(evaluate_test(config, d.spec.id, model, &d.test)?);
        gen_reports.push(ClientGenReport {
            client: d.spec.id,
            untrained: gen_report(&untrained, &d.train, &d.test)?,
            trained: gen_report(model, &d.train, &d.test)?,
        });
    }
    write_test_csv(&out.join(TEST_METRICS_FILE), config.strategy, &test_metrics)?;
    write_json(&out.join(GEN_REPORT_FILE), &gen_reports)?;

    let psnrs: Vec<f64> = test_metrics.iter().map(|m| m.psnr).collect();
    let ssims: Vec<f64> = test_metrics.iter().map(|m| m.ssim).collect();
    let summary = Summary {
        strategy: config.strategy,
        seed: config.seed,
        rounds: reports.len(),
        first_round_loss: reports[0].mean_loss_s1(),
        final_round_loss: reports[reports.len() - 1].mean_loss_s1(),
        mean_psnr: mean(&psnrs),
        median_psnr: median(&psnrs),
        mean_ssim: mean(&ssims),
        median_ssim: median(&ssims),
        mean_psnr_zero_filled: mean(&test_metrics.iter().map(|m| m.psnr_zero_filled).collect::<Vec<_>>()),
        mean_training_error: mean(&gen_reports.iter().map(|g| g.trained.training_error).collect::<Vec<_>>()),
        param_count: clients[0].param_count(),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;

    Ok(ExperimentOutcome {
        dir: out.to_path_buf(),
        manifest,
        reports,
        test_metrics,
        gen_reports,
        summary,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::FedError;

pub const ROUND_CSV_HEADER: [&str; 8] = [
    "round", "client", "loss_s1", "loss_s2", "loss_server", "alpha", "psnr_val", "ssim_val",
];

/// Per-client numbers for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub client: usize,
    /// Mean minibatch reconstruction loss on subset 1 during local training.
    pub loss_s1: f64,
    /// Subset-2 loss of the mixed model, before local training.
    pub loss_s2: f64,
    /// Subset-2 loss of the frozen server model, before local training.
    pub loss_server: f64,
    /// Aggregation weight assigned at the end of the round.
    pub alpha: f64,
    pub psnr_val: Option<f64>,
    pub ssim_val: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based round index.
    pub round: usize,
    pub clients: Vec<ClientRoundStats>,
    pub alpha: Vec<f64>,
    /// Excluded from equality-sensitive outputs such as the CSV.
    pub wall_time_secs: f64,
}

impl RoundReport {
    pub fn mean_loss_s1(&self) -> f64 {
        self.clients.iter().map(|c| c.loss_s1).sum::<f64>() / self.clients.len() as f64
    }
}

/// One CSV row per client per round. Missing metrics are empty fields.
pub fn write_round_csv<W: Write>(out: W, reports: &[RoundReport]) -> Result<(), FedError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ROUND_CSV_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        for c in &r.clients {
            w.write_record([
                r.round.to_string(),
                c.client.to_string(),
                c.loss_s1.to_string(),
                c.loss_s2.to_string(),
                c.loss_server.to_string(),
                c.alpha.to_string(),
                opt(c.psnr_val),
                opt(c.ssim_val),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

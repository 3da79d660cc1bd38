use std::path::{Path, PathBuf};

use modfed::fed::Strategy;
use serde::{Deserialize, Serialize};

use crate::experiment::{ClientGenReport, ClientTestMetrics, Manifest, GEN_REPORT_FILE, MANIFEST_FILE, TEST_METRICS_FILE};
use crate::HarnessError;

/// One row of the comparison table: a run directory's test metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub run: String,
    /// As recorded in the run's manifest.
    pub strategy: Strategy,
    pub seed: u64,
    pub mean_psnr: f64,
    pub median_psnr: f64,
    pub mean_ssim: f64,
    pub median_ssim: f64,
    pub mean_training_error: f64,
    pub param_count: usize,
}

pub const COMPARE_CSV_HEADER: [&str; 9] = [
    "run",
    "strategy",
    "seed",
    "mean_psnr",
    "median_psnr",
    "mean_ssim",
    "median_ssim",
    "mean_training_error",
    "param_count",
];

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Artifact(format!("{}: {e}", path.display())))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
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

fn load_row(dir: &Path) -> Result<(Manifest, CompareRow), HarnessError> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let gen: Vec<ClientGenReport> = read_json(&dir.join(GEN_REPORT_FILE))?;
    let path = dir.join(TEST_METRICS_FILE);
    let mut reader = csv::Reader::from_path(&path)
        .map_err(|e| HarnessError::Artifact(format!("{}: {e}", path.display())))?;
    let mut tests = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64, HarnessError> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| HarnessError::Artifact(format!("{}: bad field {i}", path.display())))
        };
        tests.push(ClientTestMetrics {
            client: field(1)? as usize,
            mask: rec.get(2).unwrap_or_default().to_string(),
            psnr: field(3)?,
            ssim: field(4)?,
            psnr_zero_filled: field(5)?,
            ssim_zero_filled: field(6)?,
            test_loss: field(7)?,
        });
    }
    if tests.is_empty() || gen.is_empty() {
        return Err(HarnessError::Artifact(format!("{}: no per-client results", dir.display())));
    }
    let psnr: Vec<f64> = tests.iter().map(|t| t.psnr).collect();
    let ssim: Vec<f64> = tests.iter().map(|t| t.ssim).collect();
    let row = CompareRow {
        run: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string()),
        strategy: manifest.strategy,
        seed: manifest.config.seed,
        mean_psnr: mean(&psnr),
        median_psnr: median(&psnr),
        mean_ssim: mean(&ssim),
        median_ssim: median(&ssim),
        mean_training_error: mean(&gen.iter().map(|g| g.trained.training_error).collect::<Vec<_>>()),
        param_count: gen[0].trained.param_count,
    };
    Ok((manifest, row))
}

/// Load every run and check they were trained on the same generated data.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<Vec<CompareRow>, HarnessError> {
    if dirs.is_empty() {
        return Err(HarnessError::Config("no run directories given".into()));
    }
    let mut rows = Vec::with_capacity(dirs.len());
    let mut first: Option<(PathBuf, Manifest)> = None;
    for dir in dirs {
        let (manifest, row) = load_row(dir)?;
        if let Some((d0, m0)) = &first {
            if m0.data_fingerprint != manifest.data_fingerprint {
                return Err(HarnessError::Incompatible(format!(
                    "{} (seed {}) and {} (seed {}) were trained on different data",
                    d0.display(),
                    m0.config.seed,
                    dir.display(),
                    manifest.config.seed
                )));
            }
        } else {
            first = Some((dir.clone(), manifest));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_compare_csv<W: std::io::Write>(out: W, rows: &[CompareRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COMPARE_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.run.clone(),
            r.strategy.to_string(),
            r.seed.to_string(),
            r.mean_psnr.to_string(),
            r.median_psnr.to_string(),
            r.mean_ssim.to_string(),
            r.median_ssim.to_string(),
            r.mean_training_error.to_string(),
            r.param_count.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Fixed-width text rendering of the comparison.
pub fn format_table(rows: &[CompareRow]) -> String {
    let cells: Vec<[String; 9]> = rows
        .iter()
        .map(|r| {
            [
                r.run.clone(),
                r.strategy.to_string(),
                r.seed.to_string(),
                format!("{:.3}", r.mean_psnr),
                format!("{:.3}", r.median_psnr),
                format!("{:.4}", r.mean_ssim),
                format!("{:.4}", r.median_ssim),
                format!("{:.4}", r.mean_training_error),
                r.param_count.to_string(),
            ]
        })
        .collect();
    let mut width = COMPARE_CSV_HEADER.map(str::len);
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |fields: Vec<&str>| -> String {
        fields
            .iter()
            .zip(&width)
            .enumerate()
            .map(|(i, (f, w))| if i < 2 { format!("{f:<w$}") } else { format!("{f:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(COMPARE_CSV_HEADER.to_vec());
    out.push('\n');
    for row in &cells {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

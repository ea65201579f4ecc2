//! CSV schemas of run outputs.
//!
//! `rounds.csv`: one row per client per round, then one `global` row.
//!
//! | column | client rows | global row |
//! |---|---|---|
//! | `round` | round index | round index |
//! | `client` | client id | `global` |
//! | `r` | contribution ratio | sum of ratios |
//! | `d_re` | reliable samples in the final local epoch | total over clients |
//! | `mu`, `sigma` | mean and std of per-sample training losses | empty |
//! | `detected_noise_ratio` | unreliable / total samples | pooled ratio |
//! | `tau`, `gamma`, `lambda` | values the round ran with | same |
//! | `u_un`, `u_cons` | the client's logits after training | merged logits |
//! | `test_acc`, `test_dice_loss`, `test_miou` | empty | metrics of the new global model |
//!
//! `final.csv`: one row per run with the final test metrics (see [`FinalRow`]).
//! Floats are written in shortest round-trip form; `inf` marks an unbounded
//! threshold.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sfcl_core::metrics::MetricSet;
use sfcl_core::protocol::RoundReport;

use crate::error::{CliError, CliResult};

pub const ROUND_COLUMNS: [&str; 15] = [
    "round",
    "client",
    "r",
    "d_re",
    "mu",
    "sigma",
    "detected_noise_ratio",
    "tau",
    "gamma",
    "lambda",
    "u_un",
    "u_cons",
    "test_acc",
    "test_dice_loss",
    "test_miou",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub client: String,
    pub r: f64,
    pub d_re: usize,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub detected_noise_ratio: f64,
    pub tau: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub u_un: f64,
    pub u_cons: f64,
    pub test_acc: Option<f64>,
    pub test_dice_loss: Option<f64>,
    pub test_miou: Option<f64>,
}

impl RoundRow {
    pub fn from_report(report: &RoundReport) -> Vec<Self> {
        let mut rows: Vec<Self> = report
            .clients
            .iter()
            .map(|c| Self {
                round: report.round,
                client: c.client_id.to_string(),
                r: c.r,
                d_re: c.d_re,
                mu: Some(c.mu),
                sigma: Some(c.sigma),
                detected_noise_ratio: c.detected_noise_ratio,
                tau: report.tau,
                gamma: report.gamma,
                lambda: report.lambda,
                u_un: c.u_un,
                u_cons: c.u_cons,
                test_acc: None,
                test_dice_loss: None,
                test_miou: None,
            })
            .collect();
        let total: usize = report.clients.iter().map(|c| c.total_samples).sum();
        let unreliable: f64 = report.clients.iter().map(|c| c.detected_noise_ratio * c.total_samples as f64).sum();
        rows.push(Self {
            round: report.round,
            client: "global".into(),
            r: report.clients.iter().map(|c| c.r).sum(),
            d_re: report.clients.iter().map(|c| c.d_re).sum(),
            mu: None,
            sigma: None,
            detected_noise_ratio: unreliable / total.max(1) as f64,
            tau: report.tau,
            gamma: report.gamma,
            lambda: report.lambda,
            u_un: report.u_un,
            u_cons: report.u_cons,
            test_acc: report.test.as_ref().map(|m| m.accuracy),
            test_dice_loss: report.test.as_ref().map(|m| m.dice_loss),
            test_miou: report.test.as_ref().map(|m| m.mean_iou),
        });
        rows
    }
}

/// Final metrics of one run. `iou` holds the per-class IoUs joined by `;`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRow {
    pub run: String,
    pub mode: String,
    pub seed: u64,
    pub rounds: usize,
    pub accuracy: f64,
    pub dice_loss: f64,
    pub mean_iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub iou: String,
}

impl FinalRow {
    pub fn new(run: &str, mode: &str, seed: u64, rounds: usize, m: &MetricSet) -> Self {
        Self {
            run: run.into(),
            mode: mode.into(),
            seed,
            rounds,
            accuracy: m.accuracy,
            dice_loss: m.dice_loss,
            mean_iou: m.mean_iou,
            precision: m.precision,
            recall: m.recall,
            iou: m.per_class_iou.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"),
        }
    }
}

pub struct CsvOut {
    writer: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl CsvOut {
    pub fn create(path: &Path) -> CliResult<Self> {
        let writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        Ok(Self { writer, path: path.to_path_buf() })
    }

    pub fn row<S: Serialize>(&mut self, row: &S) -> CliResult<()> {
        self.writer.serialize(row).map_err(|e| csv_error(&self.path, e))
    }

    pub fn finish(mut self) -> CliResult<()> {
        self.writer.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::format(path, e.to_string())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    reader.deserialize().map(|r| r.map_err(|e| csv_error(path, e))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_matches_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rounds.csv");
        let row = RoundRow {
            round: 0,
            client: "global".into(),
            r: 1.0,
            d_re: 3,
            mu: None,
            sigma: None,
            detected_noise_ratio: 0.25,
            tau: f64::INFINITY,
            gamma: 1.0,
            lambda: 3.0,
            u_un: -10.0,
            u_cons: -9.999999999999998,
            test_acc: Some(0.1 + 0.2),
            test_dice_loss: Some(1e-300),
            test_miou: None,
        };
        let mut out = CsvOut::create(&path).unwrap();
        out.row(&row).unwrap();
        out.finish().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), ROUND_COLUMNS.join(","));
        let back: Vec<RoundRow> = read_rows(&path).unwrap();
        assert_eq!(back, vec![row]);
    }
}

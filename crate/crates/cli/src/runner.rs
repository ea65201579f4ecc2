use std::path::{Path, PathBuf};

use sfcl_core::data::{build_federation, Federation};
use sfcl_core::metrics::{evaluate, MetricSet};
use sfcl_core::nn::{image_tensor, SampleBatch, SplitParams};
use sfcl_core::protocol::{
    client_round, run_round, ClientExecutor, ClientState, ProtocolConfig, RoundReport, Sequential, ServerState,
};
use sfcl_core::tensor::Real;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::pgm::Graymap;
use crate::report::{CsvOut, FinalRow, RoundRow};

/// Sets flush-to-zero and denormals-are-zero for the calling thread. Late in
/// training many activations and gradients underflow, and subnormal
/// arithmetic slows the convolution loops several times over.
pub fn flush_subnormals() {
    #[cfg(target_arch = "x86_64")]
    #[allow(deprecated)]
    // SAFETY: only the FTZ and DAZ bits of MXCSR change; SSE is baseline on x86_64.
    unsafe {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        _mm_setcsr(_mm_getcsr() | 0x8040);
    }
}

/// Trains clients on scoped worker threads. Each client owns its state and
/// RNG streams, so results do not depend on scheduling.
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    /// 0 means one thread per client.
    pub threads: usize,
}

impl<T: Real> ClientExecutor<T> for Threaded {
    fn execute(
        &self,
        clients: &mut [ClientState<T>],
        broadcast: &[u8],
        config: &ProtocolConfig,
    ) -> Vec<sfcl_core::Result<Vec<u8>>> {
        let threads = if self.threads == 0 { clients.len() } else { self.threads }.max(1);
        let per = clients.len().div_ceil(threads).max(1);
        std::thread::scope(|s| {
            let handles: Vec<_> = clients
                .chunks_mut(per)
                .map(|group| {
                    s.spawn(move || {
                        flush_subnormals();
                        group.iter_mut().map(|c| client_round(c, broadcast, config)).collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("client worker panicked")).collect()
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub reports: Vec<RoundReport>,
    pub metrics: MetricSet,
    pub final_row: FinalRow,
}

fn batch_of(samples: &[sfcl_core::data::Sample]) -> CliResult<SampleBatch<f32>> {
    Ok(SampleBatch::new(
        samples.iter().map(|s| image_tensor(&s.image)).collect(),
        samples.iter().map(|s| s.label.clone()).collect(),
        samples.iter().map(|s| s.id).collect(),
    )?)
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Runs every round of the configured experiment. With `out`, writes
/// `config.toml`, `rounds.csv`, `final.csv` and `labels_before_after/`.
pub fn run_experiment(config: &RunConfig, out: Option<&Path>, deterministic: bool) -> CliResult<RunOutcome> {
    let resolved = config.resolve().map_err(|(key, msg)| CliError::Config(format!("field `{key}`: {msg}")))?;
    flush_subnormals();
    let fed = build_federation(&resolved.scene, &resolved.layout, config.seed)?;
    let protocol = &resolved.protocol;
    let init = SplitParams::<f32>::init(resolved.arch, config.seed)?;
    let mut clients = fed
        .clients
        .iter()
        .map(|c| ClientState::from_data(c, &init, protocol))
        .collect::<sfcl_core::Result<Vec<_>>>()?;
    let mut server = ServerState::new(init, protocol);
    let test = batch_of(&fed.test)?;

    let mut rounds_csv = match out {
        Some(dir) => {
            create_dir(dir)?;
            let path = dir.join("config.toml");
            std::fs::write(&path, config.to_toml()).map_err(|e| CliError::io(&path, e))?;
            Some(CsvOut::create(&dir.join("rounds.csv"))?)
        }
        None => None,
    };

    let mut reports = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        let report = if deterministic {
            run_round(&mut server, &mut clients, protocol, &Sequential, Some(&test))?
        } else {
            run_round(&mut server, &mut clients, protocol, &Threaded { threads: config.threads }, Some(&test))?
        };
        if let Some(m) = &report.test {
            log::info!(
                "{} round {}: tau {:.4} miou {:.4} detected {:?}",
                config.run_name(),
                report.round,
                report.tau,
                m.mean_iou,
                report.clients.iter().map(|c| (c.detected_noise_ratio * 1000.0).round() / 1000.0).collect::<Vec<_>>()
            );
        }
        if let Some(csv) = rounds_csv.as_mut() {
            for row in RoundRow::from_report(&report) {
                csv.row(&row)?;
            }
        }
        reports.push(report);
    }

    let metrics = match reports.last().and_then(|r| r.test.clone()) {
        Some(m) => m,
        None => evaluate(&server.teacher, &test.images, &test.labels)?,
    };
    let final_row = FinalRow::new(&config.run_name(), &config.mode, config.seed, config.rounds, &metrics);
    if let Some(dir) = out {
        if let Some(csv) = rounds_csv {
            csv.finish()?;
        }
        let mut f = CsvOut::create(&dir.join("final.csv"))?;
        f.row(&final_row)?;
        f.finish()?;
        dump_label_pairs(&dir.join("labels_before_after"), &fed, &clients, config.dump_samples)?;
    }
    Ok(RunOutcome { reports, metrics, final_row })
}

/// For the first `per_client` corrupted samples of each client: the image,
/// clean label, given (noisy) label and the label after the last round's
/// correction.
fn dump_label_pairs(dir: &Path, fed: &Federation, clients: &[ClientState<f32>], per_client: usize) -> CliResult<()> {
    create_dir(dir)?;
    for (data, state) in fed.clients.iter().zip(clients) {
        let picked = data.audit.corrupted.iter().enumerate().filter(|(_, &c)| c).map(|(i, _)| i).take(per_client);
        for i in picked {
            let sample = &data.samples[i];
            let corrected = state
                .last
                .corrections
                .iter()
                .find(|(k, _)| *k == i)
                .map_or(&sample.label, |(_, l)| l);
            let stem = format!("client{}_sample{}", data.client_id, sample.id);
            let files: [(&str, Graymap); 4] = [
                ("image", Graymap::from_image(&sample.image)),
                ("clean", Graymap::from_labels(&data.audit.clean_labels[i])),
                ("given", Graymap::from_labels(&sample.label)),
                ("corrected", Graymap::from_labels(corrected)),
            ];
            for (suffix, g) in files {
                g.write(&dir.join(format!("{stem}_{suffix}.pgm")))?;
            }
        }
    }
    Ok(())
}

/// Writes every generated sample as PGM pairs plus `manifest.csv` with
/// `sample_id, client_id, corrupted` (client `test` for the test set).
pub fn dump_dataset(config: &RunConfig, dir: &Path) -> CliResult<PathBuf> {
    let resolved = config.resolve().map_err(|(key, msg)| CliError::Config(format!("field `{key}`: {msg}")))?;
    let fed = build_federation(&resolved.scene, &resolved.layout, config.seed)?;
    create_dir(dir)?;
    #[derive(serde::Serialize)]
    struct Entry {
        sample_id: u64,
        client_id: String,
        corrupted: bool,
    }
    let manifest = dir.join("manifest.csv");
    let mut csv = CsvOut::create(&manifest)?;
    let mut write = |s: &sfcl_core::data::Sample, client: String, corrupted: bool| -> CliResult<()> {
        Graymap::from_image(&s.image).write(&dir.join(format!("{}_image.pgm", s.id)))?;
        Graymap::from_labels(&s.label).write(&dir.join(format!("{}_label.pgm", s.id)))?;
        csv.row(&Entry { sample_id: s.id, client_id: client, corrupted })
    };
    for c in &fed.clients {
        for (s, &corrupted) in c.samples.iter().zip(&c.audit.corrupted) {
            write(s, c.client_id.to_string(), corrupted)?;
        }
    }
    for s in &fed.test {
        write(s, "test".into(), false)?;
    }
    csv.finish()?;
    Ok(manifest)
}

/// Reads `final.csv` from each run directory.
pub fn compare_runs(runs: &[PathBuf]) -> CliResult<Vec<FinalRow>> {
    let mut rows = Vec::new();
    for dir in runs {
        let path = dir.join("final.csv");
        if !path.is_file() {
            return Err(CliError::MissingRun(path));
        }
        rows.extend(crate::report::read_rows::<FinalRow>(&path)?);
    }
    Ok(rows)
}

pub fn format_table(rows: &[FinalRow]) -> String {
    let header = ["run", "seed", "rounds", "accuracy", "dice_loss", "mean_iou", "precision", "recall"];
    let body: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.run.clone(),
                r.seed.to_string(),
                r.rounds.to_string(),
                format!("{:.4}", r.accuracy),
                format!("{:.4}", r.dice_loss),
                format!("{:.4}", r.mean_iou),
                format!("{:.4}", r.precision),
                format!("{:.4}", r.recall),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| body.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
    };
    let mut out = vec![line(&header.map(String::from))];
    out.extend(body.iter().map(|r| line(r)));
    out.join("\n") + "\n"
}

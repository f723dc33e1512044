use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use ncc_core::data::save_embeddings_csv;
use ncc_core::metrics::MetricsReport;
use ncc_core::trainer::{train_with, EpochRecord, Observer, TrainState};
use ncc_core::NccError;
use serde::Serialize;

use crate::config::RunConfigFile;

pub const RESOLVED_CONFIG: &str = "resolved-config.json";
pub const METRICS: &str = "metrics.jsonl";
pub const EMBEDDINGS: &str = "embeddings.csv";
pub const REPORT: &str = "report.json";
pub const DIAGNOSTIC: &str = "diagnostic.json";
pub const CHECKPOINTS: &str = "checkpoints";

/// Final clustering of a finished run.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub epochs: usize,
    pub kmeans_obj: f64,
    pub imbalance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
}

struct RunWriter {
    metrics: BufWriter<File>,
    checkpoints: PathBuf,
}

impl Observer for RunWriter {
    fn on_epoch(&mut self, record: &EpochRecord, _state: &TrainState) -> ncc_core::Result<()> {
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics.write_all(b"\n")?;
        self.metrics.flush()?;
        Ok(())
    }

    fn on_eval(&mut self, epoch: usize, state: &TrainState) -> ncc_core::Result<()> {
        let path = self.checkpoints.join(format!("epoch-{epoch:04}.json"));
        state.pair.to_checkpoint().save(&path)
    }
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    error: String,
    epoch: Option<usize>,
    batch: Option<usize>,
    loss_align: Option<f64>,
    loss_pcl: Option<f64>,
    config: &'a RunConfigFile,
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Trains with a resolved config and fills `out`: resolved config, metrics
/// stream, checkpoints, final embeddings and report. A non-finite failure
/// leaves a diagnostic file next to the partial stream.
pub fn run(cfg: &RunConfigFile, out: &Path) -> anyhow::Result<RunReport> {
    let ds = cfg.data.load()?;
    fs::create_dir_all(out.join(CHECKPOINTS))
        .with_context(|| format!("creating {}", out.display()))?;
    let mut resolved = cfg.clone();
    resolved.output_dir = Some(out.to_path_buf());
    write_json(&out.join(RESOLVED_CONFIG), &resolved)?;

    let mut writer = RunWriter {
        metrics: BufWriter::new(File::create(out.join(METRICS))?),
        checkpoints: out.join(CHECKPOINTS),
    };
    let outcome = match train_with(&cfg.train, &ds, &mut writer) {
        Ok(o) => o,
        Err(e) => {
            let (epoch, batch, loss_align, loss_pcl) = match &e {
                NccError::NonFiniteLoss {
                    epoch,
                    batch,
                    loss_align,
                    loss_pcl,
                } => (Some(*epoch), Some(*batch), Some(*loss_align), Some(*loss_pcl)),
                _ => (None, None, None, None),
            };
            if matches!(e, NccError::NonFiniteLoss { .. } | NccError::Numeric(_)) {
                let diag = Diagnostic {
                    error: e.to_string(),
                    epoch,
                    batch,
                    loss_align: loss_align.filter(|v| v.is_finite()),
                    loss_pcl: loss_pcl.filter(|v| v.is_finite()),
                    config: &resolved,
                };
                write_json(&out.join(DIAGNOSTIC), &diag)?;
            }
            return Err(e.into());
        }
    };

    outcome
        .state
        .pair
        .to_checkpoint()
        .save(&out.join(CHECKPOINTS).join("final.json"))?;
    let ev = &outcome.final_eval;
    save_embeddings_csv(
        &out.join(EMBEDDINGS),
        &ds.ids,
        ds.labels.as_deref(),
        &ev.labels,
        &ev.features,
    )?;
    let report = RunReport {
        epochs: cfg.train.epochs,
        kmeans_obj: ev.kmeans_obj,
        imbalance: ev.imbalance,
        metrics: ev.report.clone(),
    };
    write_json(&out.join(REPORT), &report)?;
    Ok(report)
}

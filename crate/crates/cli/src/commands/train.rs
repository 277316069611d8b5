use std::path::PathBuf;

use rblock_core::train::metrics::write_metrics_csv;
use rblock_core::train::{checkpoint, train, TrainError};
use serde::Serialize;

use super::{create_dir, input_digests, read_config, DatasetSummary};
use crate::exit::{CliError, CliResult};
use crate::manifest::Manifest;
use crate::{Globals, Output};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// JSON training configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for metrics, checkpoints and the manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct Results {
    final_val_acc: f64,
    best_val_acc: f64,
    best_epoch: usize,
    final_train_acc: Option<f64>,
    degenerate_masks: u64,
}

#[derive(Debug, Serialize)]
struct Extra {
    dataset: DatasetSummary,
    parameters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    results: Option<Results>,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    status: &'static str,
    method: &'static str,
    epochs: usize,
    seed: u64,
    out: String,
    artifacts: &'a [&'a str],
    #[serde(flatten)]
    results: &'a Results,
}

const ARTIFACTS: [&str; 3] = ["metrics.csv", "final.ckpt", "best.ckpt"];

pub fn run(a: &Args, g: Globals) -> CliResult<Output> {
    let (mut cfg, bytes) = read_config(&a.config)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    let inputs = input_digests(&a.config, &bytes, &cfg)?;
    let (train_set, test_set) = cfg.dataset.load().map_err(|e| CliError::from(e).context("loading dataset"))?;
    let net = cfg.init_network(&train_set)?;
    let parameters = net.param_count();
    create_dir(&a.out)?;
    let dataset = DatasetSummary::of(&train_set, &test_set);

    match train(net, &train_set, &test_set, &cfg) {
        Ok(outcome) => {
            let mut csv = Vec::new();
            write_metrics_csv(&mut csv, &outcome.metrics)?;
            std::fs::write(a.out.join("metrics.csv"), csv)?;
            checkpoint::save(&outcome.network, &a.out.join("final.ckpt"))?;
            checkpoint::save(&outcome.best_network, &a.out.join("best.ckpt"))?;

            let last = outcome.metrics.last();
            let best_epoch = outcome
                .metrics
                .iter()
                .find(|m| Some(m.val_acc) == last.map(|l| l.best_val_acc))
                .map_or(0, |m| m.epoch);
            let results = Results {
                final_val_acc: last.map_or(0.0, |m| m.val_acc),
                best_val_acc: last.map_or(0.0, |m| m.best_val_acc),
                best_epoch,
                final_train_acc: outcome.train_acc.last().copied().flatten(),
                degenerate_masks: outcome.degenerate_masks,
            };
            let text = format!(
                "{} trained for {} epochs (seed {})\nfinal val acc {:.4}, best val acc {:.4} at epoch {}, final train acc {}\nwrote {}\n",
                cfg.drop.method.display_name(),
                cfg.epochs,
                cfg.seed,
                results.final_val_acc,
                results.best_val_acc,
                results.best_epoch,
                results.final_train_acc.map_or("n/a".into(), |v| format!("{v:.4}")),
                a.out.display()
            );
            let summary = Summary {
                status: "completed",
                method: cfg.drop.method.key(),
                epochs: cfg.epochs,
                seed: cfg.seed,
                out: a.out.display().to_string(),
                artifacts: &ARTIFACTS,
                results: &results,
            };
            let json = serde_json::to_value(&summary)?;

            let mut manifest = Manifest::new("train", "completed", &cfg, Extra { dataset, parameters, results: Some(results) });
            manifest.inputs = inputs;
            manifest.write(&a.out, &ARTIFACTS)?;
            Output::new(text, json)
        }
        Err(TrainError::Diverged { epoch, step, detail, last_good }) => {
            checkpoint::save(&last_good, &a.out.join("last_good.ckpt"))?;
            let message = format!("training diverged at epoch {epoch}, step {step}: {detail}");
            let mut manifest = Manifest::new("train", "diverged", &cfg, Extra { dataset, parameters, results: None });
            manifest.detail = Some(message.clone());
            manifest.inputs = inputs;
            manifest.write(&a.out, &["last_good.ckpt"])?;
            Err(CliError::numerical(format!(
                "{message}; parameters from the start of that epoch saved to {}",
                a.out.join("last_good.ckpt").display()
            )))
        }
        Err(TrainError::Failed(e)) => Err(e.into()),
    }
}

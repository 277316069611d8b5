use std::path::PathBuf;

use rblock_core::mask::{DropMethod, DropSpec};
use rblock_core::train::compare::{
    default_methods, ordering_report, run_comparison, stage_epochs, ComparisonTable, OrderingReport, StageRow,
    REFERENCE_STAGES,
};
use rblock_core::train::metrics::write_metrics_csv;
use rblock_core::train::{TrainConfig, TrainError};
use serde::Serialize;

use super::{create_dir, input_digests, read_config, DatasetSummary};
use crate::exit::{CliError, CliResult};
use crate::manifest::Manifest;
use crate::{Globals, Output};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// JSON training configuration; defaults to the desk-scale synthetic setup.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated method keys, each optionally `key:p`; defaults to the
    /// six two-sub-model methods at their reference rates.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Vec<DropSpec>,
    /// Output directory for stages.csv, metrics.csv and the manifest.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_method(s: &str) -> Result<DropSpec, String> {
    let (key, p) = match s.split_once(':') {
        Some((k, p)) => (k, Some(p.parse::<f64>().map_err(|e| format!("bad rate in '{s}': {e}"))?)),
        None => (s, None),
    };
    let method: DropMethod = super::parse_key(key.trim())?;
    let spec = DropSpec::new(method, p.unwrap_or_else(|| method.default_p()));
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

#[derive(Debug, Serialize)]
struct ReferenceRow {
    method: DropMethod,
    p: f64,
    stages_percent: [f64; 5],
}

#[derive(Debug, Serialize)]
struct Extra<'a> {
    dataset: DatasetSummary,
    stage_epochs: [usize; 5],
    rows: &'a [StageRow],
    /// Informational: measured ordering against the published table.
    ordering: &'a OrderingReport,
    reference: Vec<ReferenceRow>,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    status: &'static str,
    out: String,
    stage_epochs: [usize; 5],
    rows: &'a [StageRow],
    ordering: &'a OrderingReport,
    artifacts: [&'static str; 2],
}

const ARTIFACTS: [&str; 2] = ["stages.csv", "metrics.csv"];

fn write_tables(dir: &std::path::Path, table: &ComparisonTable) -> CliResult<()> {
    std::fs::write(dir.join("stages.csv"), table.stages_csv())?;
    let rows: Vec<_> = table.metrics.iter().flatten().cloned().collect();
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &rows)?;
    std::fs::write(dir.join("metrics.csv"), csv)?;
    Ok(())
}

fn render(table: &ComparisonTable, epochs: [usize; 5], ordering: &OrderingReport) -> String {
    let mut text = format!(
        "{:<20} {:>5}  {}\n",
        "method",
        "p",
        epochs.map(|e| format!("{:>8}", format!("ep {e}"))).join(" ")
    );
    for row in &table.rows {
        text.push_str(&format!(
            "{:<20} {:>5}  {}\n",
            row.method.display_name(),
            row.p,
            row.stages.map(|s| format!("{:>8.4}", s)).join(" ")
        ));
    }
    text.push_str(&format!(
        "ordering vs reference table (informational): Kendall tau = {}, same best method = {}\n",
        ordering.kendall_tau.map_or("n/a".into(), |t| format!("{t:.3}")),
        ordering.same_best
    ));
    text
}

pub fn run(a: &Args, g: Globals) -> CliResult<Output> {
    let (mut cfg, inputs) = match &a.config {
        Some(path) => {
            let (cfg, bytes) = read_config(path)?;
            let inputs = input_digests(path, &bytes, &cfg)?;
            (cfg, inputs)
        }
        None => (TrainConfig::desk_scale(), Vec::new()),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    let methods = if a.methods.is_empty() { default_methods() } else { a.methods.clone() };
    let (train_set, test_set) = cfg.dataset.load().map_err(|e| CliError::from(e).context("loading dataset"))?;
    create_dir(&a.out)?;
    let epochs = stage_epochs(cfg.epochs);
    let reference = REFERENCE_STAGES
        .iter()
        .map(|&(method, p, stages_percent)| ReferenceRow { method, p, stages_percent })
        .collect::<Vec<_>>();

    let (table, failure) = match run_comparison(&methods, &cfg, &train_set, &test_set) {
        Ok(t) => (t, None),
        Err(e) => {
            let code_err = match e.source {
                TrainError::Diverged { .. } => CliError::numerical(e.to_string()),
                TrainError::Failed(inner) => CliError::from(inner).context(format!("training '{}'", e.method)),
            };
            (e.completed, Some(code_err))
        }
    };
    write_tables(&a.out, &table)?;
    let ordering = ordering_report(&table);
    let extra = Extra {
        dataset: DatasetSummary::of(&train_set, &test_set),
        stage_epochs: epochs,
        rows: &table.rows,
        ordering: &ordering,
        reference,
    };
    let status = match &failure {
        None => "completed",
        Some(e) if e.code == crate::exit::NUMERICAL => "diverged",
        Some(_) => "failed",
    };
    let mut manifest = Manifest::new("compare", status, &cfg, extra);
    manifest.inputs = inputs;
    manifest.detail = failure.as_ref().map(|e| e.message.clone());
    manifest.write(&a.out, &ARTIFACTS)?;
    if let Some(e) = failure {
        return Err(e.context(format!("partial results in {}", a.out.display())));
    }

    let mut text = render(&table, epochs, &ordering);
    text.push_str(&format!("wrote {}\n", a.out.display()));
    let summary = Summary {
        status,
        out: a.out.display().to_string(),
        stage_epochs: epochs,
        rows: &table.rows,
        ordering: &ordering,
        artifacts: ARTIFACTS,
    };
    Output::new(text, summary)
}

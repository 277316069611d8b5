//! Multi-method comparison with best-so-far accuracy snapshots at fixed
//! fractions of training.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{DropMethod, DropSpec};

use super::config::TrainConfig;
use super::data::Dataset;
use super::metrics::MetricsRow;
use super::trainer::{train, TrainError};

/// Fractions of the epoch budget at which snapshots are taken.
pub const STAGE_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

pub const STAGES_HEADER: &str = "method,p,stage20,stage40,stage60,stage80,stage100";

/// Published top-1 accuracies (%) of the six two-sub-model methods on
/// CIFAR-100 / ResNet-18 at the five stages.
pub const REFERENCE_STAGES: [(DropMethod, f64, [f64; 5]); 6] = [
    (DropMethod::RDropPair, 0.5, [54.93, 68.88, 68.99, 70.81, 71.17]),
    (DropMethod::CDropPair, 0.5, [54.60, 69.50, 69.70, 71.03, 71.30]),
    (DropMethod::RSpatialPair, 0.1, [55.80, 69.83, 69.98, 71.41, 71.86]),
    (DropMethod::RDropBlockPair, 0.1, [56.20, 69.81, 70.30, 71.15, 71.60]),
    (DropMethod::BDropDml, 0.2, [56.83, 70.21, 70.83, 71.98, 72.35]),
    (DropMethod::SDropDml, 0.2, [58.19, 70.15, 70.31, 71.49, 72.08]),
];

/// 1-based epoch at which each stage snapshot is read.
pub fn stage_epochs(epochs: usize) -> [usize; 5] {
    STAGE_FRACTIONS.map(|f| ((f * epochs as f64).ceil() as usize).clamp(1, epochs.max(1)))
}

/// The six two-sub-model methods at their default drop rates.
pub fn default_methods() -> Vec<DropSpec> {
    DropMethod::PAIRS.iter().map(|&m| DropSpec::new(m, m.default_p())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub method: DropMethod,
    pub p: f64,
    /// Best validation accuracy so far, as a fraction, at each stage.
    pub stages: [f64; 5],
}

impl StageRow {
    pub fn from_metrics(method: DropMethod, p: f64, metrics: &[MetricsRow]) -> Self {
        let epochs = stage_epochs(metrics.len());
        let stages = epochs.map(|e| metrics.get(e - 1).map_or(0.0, |m| m.best_val_acc));
        Self { method, p, stages }
    }

    pub fn csv_line(&self) -> String {
        let mut line = format!("{},{}", self.method.display_name(), self.p);
        for s in &self.stages {
            line.push_str(&format!(",{s}"));
        }
        line
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<StageRow>,
    /// Full per-epoch metrics of every run, in method order.
    pub metrics: Vec<Vec<MetricsRow>>,
}

impl ComparisonTable {
    pub fn stages_csv(&self) -> String {
        let mut out = String::from(STAGES_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.csv_line());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Error)]
#[error("comparison aborted while training '{method}': {source}")]
pub struct ComparisonError {
    pub method: DropMethod,
    /// Rows of the runs that finished before the failure.
    pub completed: ComparisonTable,
    #[source]
    pub source: TrainError,
}

/// Trains every method with the same configuration, seed and data, and
/// collects stage snapshots.
pub fn run_comparison(
    methods: &[DropSpec],
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<ComparisonTable, ComparisonError> {
    let mut table = ComparisonTable::default();
    for spec in methods {
        let run_cfg = cfg.clone().with_drop(*spec);
        let result = run_cfg
            .init_network(train_set)
            .map_err(TrainError::from)
            .and_then(|net| train(net, train_set, test_set, &run_cfg));
        match result {
            Ok(outcome) => {
                table.rows.push(StageRow::from_metrics(spec.method, spec.p, &outcome.metrics));
                table.metrics.push(outcome.metrics);
            }
            Err(source) => {
                return Err(ComparisonError { method: spec.method, completed: table, source });
            }
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingEntry {
    pub method: DropMethod,
    pub measured_final: f64,
    pub reference_final: f64,
    /// 1 is best.
    pub measured_rank: usize,
    pub reference_rank: usize,
}

/// Relative ordering of measured final-stage accuracy against the published
/// table. Informational only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub entries: Vec<OrderingEntry>,
    /// Kendall rank correlation over the methods present in both; `None`
    /// with fewer than two.
    pub kendall_tau: Option<f64>,
    pub same_best: bool,
}

fn ranks(values: &[f64]) -> Vec<usize> {
    values
        .iter()
        .map(|v| 1 + values.iter().filter(|&&o| o > *v).count())
        .collect()
}

pub fn ordering_report(table: &ComparisonTable) -> OrderingReport {
    let matched: Vec<(DropMethod, f64, f64)> = table
        .rows
        .iter()
        .filter_map(|row| {
            REFERENCE_STAGES
                .iter()
                .find(|r| r.0 == row.method)
                .map(|r| (row.method, row.stages[4], r.2[4]))
        })
        .collect();
    let measured: Vec<f64> = matched.iter().map(|m| m.1).collect();
    let reference: Vec<f64> = matched.iter().map(|m| m.2).collect();
    let mr = ranks(&measured);
    let rr = ranks(&reference);
    let entries: Vec<OrderingEntry> = matched
        .iter()
        .enumerate()
        .map(|(i, &(method, m, r))| OrderingEntry {
            method,
            measured_final: m,
            reference_final: r,
            measured_rank: mr[i],
            reference_rank: rr[i],
        })
        .collect();
    let n = matched.len();
    let kendall_tau = (n >= 2).then(|| {
        let mut score = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let a = (measured[i] - measured[j]).signum();
                let b = (reference[i] - reference[j]).signum();
                if measured[i] != measured[j] {
                    score += a * b;
                }
            }
        }
        score / (n * (n - 1) / 2) as f64
    });
    let same_best = entries
        .iter()
        .any(|e| e.measured_rank == 1 && e.reference_rank == 1);
    OrderingReport { entries, kendall_tau, same_best }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_epochs_cover_budget() {
        assert_eq!(stage_epochs(200), [40, 80, 120, 160, 200]);
        assert_eq!(stage_epochs(50), [10, 20, 30, 40, 50]);
        assert_eq!(stage_epochs(3), [1, 2, 2, 3, 3]);
    }

    #[test]
    fn default_methods_match_reference_rates() {
        let methods = default_methods();
        assert_eq!(methods.len(), 6);
        for (spec, reference) in methods.iter().zip(REFERENCE_STAGES.iter()) {
            assert_eq!(spec.method, reference.0);
            assert_eq!(spec.p, reference.1);
        }
    }

    #[test]
    fn reference_ordering_agrees_with_itself() {
        let table = ComparisonTable {
            rows: REFERENCE_STAGES
                .iter()
                .map(|r| StageRow { method: r.0, p: r.1, stages: r.2 })
                .collect(),
            metrics: Vec::new(),
        };
        let report = ordering_report(&table);
        assert_eq!(report.kendall_tau, Some(1.0));
        assert!(report.same_best);
        assert_eq!(table.stages_csv().lines().count(), 7);
    }
}

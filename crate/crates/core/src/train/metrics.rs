use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const METRICS_HEADER: &str =
    "method,epoch,loss_total,loss_ce1,loss_ce2,loss_kl12,loss_kl21,val_acc,best_val_acc,p_current,wall_ms";

/// One epoch of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    /// 1-based.
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ce1: f64,
    pub loss_ce2: f64,
    pub loss_kl12: f64,
    pub loss_kl21: f64,
    pub val_acc: f64,
    pub best_val_acc: f64,
    pub p_current: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.epoch,
            self.loss_total,
            self.loss_ce1,
            self.loss_ce2,
            self.loss_kl12,
            self.loss_kl21,
            self.val_acc,
            self.best_val_acc,
            self.p_current,
            self.wall_ms
        )
    }
}

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for row in rows {
        writeln!(out, "{}", row.csv_line())?;
    }
    Ok(())
}

pub fn metrics_csv_string(rows: &[MetricsRow]) -> String {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, rows).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("metrics are ASCII")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_row_have_matching_columns() {
        let row = MetricsRow {
            method: "R-Block(BDropDML)".into(),
            epoch: 3,
            loss_total: 1.5,
            loss_ce1: 0.7,
            loss_ce2: 0.75,
            loss_kl12: 0.01,
            loss_kl21: 0.02,
            val_acc: 0.5,
            best_val_acc: 0.6,
            p_current: 0.2,
            wall_ms: 0,
        };
        let csv = metrics_csv_string(&[row]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1].split(',').count(), lines[0].split(',').count());
        assert_eq!(lines[1], "R-Block(BDropDML),3,1.5,0.7,0.75,0.01,0.02,0.5,0.6,0.2,0");
    }
}

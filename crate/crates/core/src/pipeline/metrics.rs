use std::io::Write;

use crate::error::Result;

use super::StepReport;

/// Header of the per-step metrics CSV for a model with `layers` blocks.
pub fn csv_header(layers: usize) -> String {
    let mut cols: Vec<String> = [
        "step",
        "loss",
        "tps",
        "bytes_fwd",
        "bytes_bwd",
        "grassmann_loss",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for prefix in ["stable_rank_p1", "stable_rank_p2", "offsub_p1", "offsub_p2"] {
        cols.extend((0..layers).map(|l| format!("{prefix}_{l}")));
    }
    cols.join(",")
}

fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v}")
    }
}

/// One CSV row. Missing statistics are written as `nan`.
pub fn csv_row(report: &StepReport, layers: usize) -> String {
    let mut cols = vec![
        report.step.to_string(),
        num(report.loss),
        num(report.tps()),
        report.bytes_fwd.to_string(),
        report.bytes_bwd.to_string(),
        num(report.grassmann_loss.unwrap_or(f64::NAN)),
    ];
    let stat = |l: usize, f: fn(&super::LayerStats) -> f64| {
        report
            .layer_stats
            .iter()
            .find(|s| s.layer == l)
            .map_or(f64::NAN, f)
    };
    let getters: [fn(&super::LayerStats) -> f64; 4] = [
        |s| s.stable_rank_p1,
        |s| s.stable_rank_p2,
        |s| s.offsub_p1,
        |s| s.offsub_p2,
    ];
    for get in getters {
        cols.extend((0..layers).map(|l| num(stat(l, get))));
    }
    cols.join(",")
}

/// Streams step reports as CSV.
pub struct MetricsWriter<W: Write> {
    out: W,
    layers: usize,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, layers: usize) -> Result<Self> {
        writeln!(out, "{}", csv_header(layers))?;
        Ok(Self { out, layers })
    }

    pub fn record(&mut self, report: &StepReport) -> Result<()> {
        writeln!(self.out, "{}", csv_row(report, self.layers))?;
        Ok(())
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        assert_eq!(
            csv_header(2),
            "step,loss,tps,bytes_fwd,bytes_bwd,grassmann_loss,stable_rank_p1_0,stable_rank_p1_1,\
             stable_rank_p2_0,stable_rank_p2_1,offsub_p1_0,offsub_p1_1,offsub_p2_0,offsub_p2_1"
        );
    }

    #[test]
    fn rows_have_one_field_per_column() {
        let report = StepReport {
            step: 3,
            loss: 5.5,
            ..StepReport::default()
        };
        let row = csv_row(&report, 4);
        assert_eq!(row.split(',').count(), csv_header(4).split(',').count());
        assert!(row.starts_with("3,5.5,inf,0,0,nan,"));
    }
}

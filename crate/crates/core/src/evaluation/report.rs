//! The metrics report and its text form.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    /// Free-form name of the evaluated dataset.
    pub dataset: String,
    pub samples: usize,
    pub corloc: f64,
    /// Mean IoU over matched prediction/ground-truth pairs.
    pub mean_iou: f64,
    pub purity: f64,
    pub threshold: f64,
    pub tau_eval: f64,
    /// Matched predictions per stamp id.
    pub per_stamp_counts: Vec<usize>,
}

impl MetricsReport {
    /// Checks the report's invariants; a report over zero samples is refused.
    pub fn validated(self) -> Result<Self> {
        if self.samples == 0 {
            return Err(Error::config("a metrics report needs at least one sample"));
        }
        for (name, v) in [
            ("corloc", self.corloc),
            ("mean_iou", self.mean_iou),
            ("purity", self.purity),
            ("threshold", self.threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} is not a fraction")));
            }
        }
        Ok(self)
    }

    /// Canonical text form: one `key = value` line per field, fractions with
    /// six decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let counts: Vec<String> = self
            .per_stamp_counts
            .iter()
            .map(|c| c.to_string())
            .collect();
        writeln!(s, "dataset = {}", toml::Value::String(self.dataset.clone())).unwrap();
        writeln!(s, "samples = {}", self.samples).unwrap();
        writeln!(s, "corloc = {:.6}", self.corloc).unwrap();
        writeln!(s, "mean_iou = {:.6}", self.mean_iou).unwrap();
        writeln!(s, "purity = {:.6}", self.purity).unwrap();
        writeln!(s, "threshold = {:.6}", self.threshold).unwrap();
        writeln!(s, "tau_eval = {:.6}", self.tau_eval).unwrap();
        writeln!(s, "per_stamp_counts = [{}]", counts.join(", ")).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let report: Self = toml::from_str(text).map_err(|e| {
            let offset = e.span().map_or(0, |r| r.start) as u64;
            Error::format(offset, format!("metrics report: {}", e.message()))
        })?;
        report.validated()
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    MetricsReport::from_text(&std::fs::read_to_string(path)?)
}

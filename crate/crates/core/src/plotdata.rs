//! Long-format series for external plotting tools.

use std::path::Path;

use crate::error::Result;

/// One named series of `(x, y)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            label: label.into(),
            points,
        }
    }
}

/// CSV with one `(series_label, x, y)` row per point.
pub fn plotdata_csv(series: &[Series]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["series_label", "x", "y"])?;
    for s in series {
        for (x, y) in &s.points {
            w.write_record([s.label.as_str(), &x.to_string(), &y.to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn emit_plotdata(series: &[Series], path: &Path) -> Result<()> {
    std::fs::write(path, plotdata_csv(series)?)?;
    Ok(())
}

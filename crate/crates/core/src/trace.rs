//! Per-iteration refinement records and their CSV form.
//!
//! The wire format is one row per iteration:
//! `image_id,iteration,dice,jaccard,loss,conv_sum,ms`
//! with empty fields where a value is not available (e.g. no ground truth
//! during inference).

use std::path::Path;

use crate::error::{Error, Result};

/// One refinement step of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Soft dice against ground truth, when known.
    pub dice: Option<f64>,
    /// Jaccard of the binarized prediction, when known.
    pub jaccard: Option<f64>,
    /// Ratio-loss value, when computed (training).
    pub loss: Option<f64>,
    /// Summed absolute pixel difference against the previous map.
    pub conv_sum: f64,
    /// Wall time of the forward pass in milliseconds.
    pub millis: f64,
}

/// Trace of one image's refinement loop. Iteration indices are contiguous
/// and start at 1.
#[derive(Clone, Debug, Default)]
pub struct IterationTrace {
    pub image_id: String,
    pub records: Vec<IterationRecord>,
}

impl IterationTrace {
    pub fn new(image_id: impl Into<String>) -> Self {
        IterationTrace {
            image_id: image_id.into(),
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(field: &str, what: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Data(format!("bad {what} value `{field}` in trace csv")))
}

/// Writes traces to CSV, one row per (image, iteration).
pub fn write_trace_csv(path: impl AsRef<Path>, traces: &[IterationTrace]) -> Result<()> {
    let path = path.as_ref();
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    wtr.write_record([
        "image_id",
        "iteration",
        "dice",
        "jaccard",
        "loss",
        "conv_sum",
        "ms",
    ])
    .map_err(|e| Error::Data(e.to_string()))?;
    for trace in traces {
        for rec in &trace.records {
            wtr.write_record([
                trace.image_id.clone(),
                rec.iteration.to_string(),
                opt_field(rec.dice),
                opt_field(rec.jaccard),
                opt_field(rec.loss),
                rec.conv_sum.to_string(),
                format!("{:.3}", rec.millis),
            ])
            .map_err(|e| Error::Data(e.to_string()))?;
        }
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV produced by [`write_trace_csv`] back into traces, grouped
/// by image id in file order.
pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<IterationTrace>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut traces: Vec<IterationTrace> = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Data(e.to_string()))?;
        if row.len() != 7 {
            return Err(Error::Data(format!(
                "trace csv row has {} fields, expected 7",
                row.len()
            )));
        }
        let image_id = row[0].to_string();
        let record = IterationRecord {
            iteration: row[1]
                .parse()
                .map_err(|_| Error::Data(format!("bad iteration `{}`", &row[1])))?,
            dice: parse_opt(&row[2], "dice")?,
            jaccard: parse_opt(&row[3], "jaccard")?,
            loss: parse_opt(&row[4], "loss")?,
            conv_sum: row[5]
                .parse()
                .map_err(|_| Error::Data(format!("bad conv_sum `{}`", &row[5])))?,
            millis: row[6]
                .parse()
                .map_err(|_| Error::Data(format!("bad ms `{}`", &row[6])))?,
        };
        match traces.last_mut() {
            Some(t) if t.image_id == image_id => t.records.push(record),
            _ => {
                let mut t = IterationTrace::new(image_id);
                t.records.push(record);
                traces.push(t);
            }
        }
    }
    Ok(traces)
}

//! Clean accuracy, attack success rate, and the metrics CSV.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Mode, Network, ParamVector};
use crate::tensor::Tensor;

/// Header of the metrics CSV (schema version 1).
pub const METRICS_HEADER: [&str; 6] = ["round", "client_id", "variant", "acc_pct", "asr_pct", "wall_ms"];

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Global,
    Personalized,
}

/// One CSV row. `asr_pct` is empty when every test sample of the client
/// already carries the target label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: u64,
    pub client_id: usize,
    pub variant: Variant,
    pub acc_pct: f64,
    pub asr_pct: Option<f64>,
    pub wall_ms: u64,
}

/// Percentage of predictions equal to their label.
pub fn accuracy_pct(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len() as f64
}

/// Percentage of non-target samples predicted as `target`.
pub fn asr_pct(predictions: &[usize], labels: &[usize], target: usize) -> Result<f64> {
    let eligible: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != target).collect();
    if eligible.is_empty() {
        return Err(Error::UndefinedAsr);
    }
    let hits = eligible.iter().filter(|&&i| predictions[i] == target).count();
    Ok(100.0 * hits as f64 / eligible.len() as f64)
}

pub fn predict(net: &Network, model: &ParamVector, x: &Tensor) -> Result<Vec<usize>> {
    Ok(net.forward(model, x, Mode::Eval)?.argmax_rows())
}

/// Clean accuracy of `model` on the given samples.
pub fn evaluate_acc(net: &Network, model: &ParamVector, data: &Dataset, indices: &[usize]) -> Result<f64> {
    let mut preds = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        preds.extend(predict(net, model, &x)?);
        labels.extend(y);
    }
    Ok(accuracy_pct(&preds, &labels))
}

/// Attack success rate: triggers every non-target sample and counts
/// predictions of `target`.
pub fn evaluate_asr(
    net: &Network,
    model: &ParamVector,
    data: &Dataset,
    indices: &[usize],
    trigger: &dyn Fn(&Tensor, &[usize]) -> Result<Tensor>,
    target: usize,
) -> Result<f64> {
    let eligible: Vec<usize> = indices.iter().copied().filter(|&i| data.labels[i] != target).collect();
    if eligible.is_empty() {
        return Err(Error::UndefinedAsr);
    }
    let mut hits = 0usize;
    for chunk in eligible.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        let xt = trigger(&x, &y)?;
        hits += predict(net, model, &xt)?.into_iter().filter(|&p| p == target).count();
    }
    Ok(100.0 * hits as f64 / eligible.len() as f64)
}

pub fn write_metrics<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().ne(METRICS_HEADER) {
        return Err(Error::Format(format!("unexpected metrics header {:?}", r.headers()?)));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

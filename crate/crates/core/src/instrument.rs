//! Per-head conditioning samples taken during training, the head-then-layer
//! averaging protocol, and steps-to-target bookkeeping.
//!
//! Sampling runs its own forward pass on a constant-only tape, so it never
//! touches the training tape or the parameters.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;

use crate::attention::{HeadCapture, Probe};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm, kappa_from_spectrum, mu_from_parts, row_norms, svd_values, Estimate, Matrix};
use crate::transformer::{batch_forward, ModelConfig, ModelParams};

pub const CONDITION_HEADER: &str = "step,layer,head,kappa,mu_log,row_norm_min,row_norm_max,flag";
pub const WEIGHT_HEADER: &str = "step,layer,head,kappa,mu_log,flag";
pub const SUMMARY_HEADER: &str = "step,avg_kappa,train_loss,eval_acc";

/// Conditioning of one head at one step, aggregated over the probe batch.
///
/// `kappa` and `mu` are geometric means over the batch's sequences (so
/// κ ≤ μ survives aggregation); either is [`Estimate::RankDeficient`] when
/// any sequence was.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRecord {
    pub step: u64,
    pub layer: usize,
    pub head: usize,
    pub kappa: Estimate,
    pub mu: Estimate,
    pub row_norm_min: f64,
    pub row_norm_max: f64,
    /// Same statistics for softmax(q kᵀ).
    pub weight_kappa: Estimate,
    pub weight_mu: Estimate,
}

impl ConditionRecord {
    pub fn flag(&self) -> &'static str {
        worse_flag(self.kappa, self.mu)
    }
}

fn worse_flag(a: Estimate, b: Estimate) -> &'static str {
    match (a, b) {
        (Estimate::RankDeficient, _) | (_, Estimate::RankDeficient) => "rank_deficient",
        (Estimate::Overflow { .. }, _) | (_, Estimate::Overflow { .. }) => "overflow",
        _ => "ok",
    }
}

fn geometric_mean(values: &[Estimate]) -> Estimate {
    let mut sum = 0.0;
    for v in values {
        match v.ln() {
            Some(ln) => sum += ln,
            None => return Estimate::RankDeficient,
        }
    }
    Estimate::from_ln(sum / values.len() as f64)
}

fn spectrum_stats(m: &Matrix) -> Result<(Estimate, Estimate)> {
    let s = svd_values(m)?;
    Ok((kappa_from_spectrum(&s), mu_from_parts(&s, frobenius_norm(m))))
}

fn summarize_head(step: u64, layer: usize, head: usize, caps: &[&HeadCapture]) -> Result<ConditionRecord> {
    let mut kappas = Vec::with_capacity(caps.len());
    let mut mus = Vec::with_capacity(caps.len());
    let mut wk = Vec::with_capacity(caps.len());
    let mut wm = Vec::with_capacity(caps.len());
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for cap in caps {
        let (k, m) = spectrum_stats(&cap.output)?;
        kappas.push(k);
        mus.push(m);
        let (k, m) = spectrum_stats(&cap.weights)?;
        wk.push(k);
        wm.push(m);
        for r in row_norms(&cap.output) {
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    Ok(ConditionRecord {
        step,
        layer,
        head,
        kappa: geometric_mean(&kappas),
        mu: geometric_mean(&mus),
        row_norm_min: lo,
        row_norm_max: hi,
        weight_kappa: geometric_mean(&wk),
        weight_mu: geometric_mean(&wm),
    })
}

/// One record per (layer, head), ordered by layer then head. Per-head SVDs
/// run on the rayon pool.
pub fn sample_conditioning(
    params: &ModelParams<Matrix>,
    cfg: &ModelConfig,
    batch: &[&[usize]],
    step: u64,
) -> Result<Vec<ConditionRecord>> {
    let mut tape = Tape::new();
    let vars = params.map(|m| tape.constant(m.clone()));
    let mut probe = Probe::capturing();
    batch_forward(&mut tape, &vars, cfg, batch, &mut probe)?;
    let mut groups: BTreeMap<(usize, usize), Vec<&HeadCapture>> = BTreeMap::new();
    for cap in &probe.heads {
        groups.entry((cap.layer, cap.head)).or_default().push(cap);
    }
    groups
        .into_par_iter()
        .map(|((layer, head), caps)| summarize_head(step, layer, head, &caps))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolAverage {
    /// `None` when every record was excluded.
    pub value: Option<f64>,
    pub excluded: usize,
}

/// Mean over heads within each layer, then over layers, of the values
/// `select` extracts. Records where `select` gives `None` are excluded and
/// counted; a layer with no remaining heads drops out of the outer mean.
pub fn average_by<F>(records: &[ConditionRecord], select: F) -> ProtocolAverage
where
    F: Fn(&ConditionRecord) -> Option<f64>,
{
    let mut layers: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut excluded = 0;
    for r in records {
        match select(r) {
            Some(v) if v.is_finite() => {
                let e = layers.entry(r.layer).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
            _ => excluded += 1,
        }
    }
    let value = (!layers.is_empty()).then(|| {
        layers.values().map(|(s, c)| s / *c as f64).sum::<f64>() / layers.len() as f64
    });
    ProtocolAverage { value, excluded }
}

/// Head-then-layer average κ for one step's records.
pub fn average_protocol(records: &[ConditionRecord]) -> ProtocolAverage {
    average_by(records, |r| r.kappa.value())
}

/// Centered running median over up to 5 points. The window shrinks
/// symmetrically near the ends, so a monotone series maps to itself.
pub fn smooth_median5(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            let half = 2.min(i).min(n - 1 - i);
            let mut w = values[i - half..=i + half].to_vec();
            w.sort_by(f64::total_cmp);
            w[half]
        })
        .collect()
}

/// First logged step whose smoothed accuracy reaches `target`.
pub fn steps_to_accuracy(series: &[(u64, f64)], target: f64) -> Option<u64> {
    let acc: Vec<f64> = series.iter().map(|&(_, a)| a).collect();
    smooth_median5(&acc)
        .iter()
        .zip(series)
        .find(|(s, _)| **s >= target)
        .map(|(_, &(step, _))| step)
}

/// Median of the last (up to) five values of `series`, 0 when empty. This
/// equals the centered smoothed value three points from the end, so a run
/// always reaches its own final accuracy.
pub fn final_smoothed(series: &[(u64, f64)]) -> f64 {
    let mut tail: Vec<f64> = series.iter().rev().take(5).map(|&(_, a)| a).collect();
    if tail.is_empty() {
        return 0.0;
    }
    tail.sort_by(f64::total_cmp);
    tail[tail.len() / 2]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub step: u64,
    pub avg_kappa: Option<f64>,
    pub train_loss: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub kappa_series: Vec<(u64, f64)>,
    pub accuracy_series: Vec<(u64, f64)>,
    /// Median of the last five evaluations.
    pub final_accuracy: f64,
    pub steps_to_target: Option<u64>,
    pub total_flops: u64,
}

impl RunSummary {
    pub fn from_rows(rows: &[SummaryRow], target: Option<f64>, total_flops: u64) -> Self {
        let kappa_series = rows
            .iter()
            .filter_map(|r| r.avg_kappa.map(|k| (r.step, k)))
            .collect();
        let accuracy_series: Vec<(u64, f64)> = rows
            .iter()
            .filter_map(|r| r.eval_acc.map(|a| (r.step, a)))
            .collect();
        let final_accuracy = final_smoothed(&accuracy_series);
        let steps_to_target = target.and_then(|t| steps_to_accuracy(&accuracy_series, t));
        RunSummary {
            kappa_series,
            accuracy_series,
            final_accuracy,
            steps_to_target,
            total_flops,
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn fmt_kappa(e: Estimate) -> String {
    match e {
        Estimate::Finite(v) => v.to_string(),
        Estimate::Overflow { ln } => format!("exp({ln})"),
        Estimate::RankDeficient => "inf".into(),
    }
}

fn fmt_ln(e: Estimate) -> String {
    e.ln().map_or_else(|| "inf".into(), |v| v.to_string())
}

fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

fn write_rows<W, I>(w: W, header: &str, rows: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = Vec<String>>,
{
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header.split(',')).map_err(csv_io)?;
    for row in rows {
        out.write_record(&row).map_err(csv_io)?;
    }
    out.flush()
}

pub fn write_condition_csv<W: Write>(w: W, records: &[ConditionRecord]) -> std::io::Result<()> {
    write_rows(
        w,
        CONDITION_HEADER,
        records.iter().map(|r| {
            vec![
                r.step.to_string(),
                r.layer.to_string(),
                r.head.to_string(),
                fmt_kappa(r.kappa),
                fmt_ln(r.mu),
                r.row_norm_min.to_string(),
                r.row_norm_max.to_string(),
                r.flag().to_string(),
            ]
        }),
    )
}

pub fn write_weight_csv<W: Write>(w: W, records: &[ConditionRecord]) -> std::io::Result<()> {
    write_rows(
        w,
        WEIGHT_HEADER,
        records.iter().map(|r| {
            vec![
                r.step.to_string(),
                r.layer.to_string(),
                r.head.to_string(),
                fmt_kappa(r.weight_kappa),
                fmt_ln(r.weight_mu),
                worse_flag(r.weight_kappa, r.weight_mu).to_string(),
            ]
        }),
    )
}

pub fn write_summary_csv<W: Write>(w: W, rows: &[SummaryRow]) -> std::io::Result<()> {
    write_rows(
        w,
        SUMMARY_HEADER,
        rows.iter().map(|r| {
            vec![
                r.step.to_string(),
                fmt_opt(r.avg_kappa),
                r.train_loss.to_string(),
                fmt_opt(r.eval_acc),
            ]
        }),
    )
}

fn parse_estimate(kappa: &str, flag: &str) -> Result<Estimate> {
    if flag == "rank_deficient" || kappa == "inf" {
        return Ok(Estimate::RankDeficient);
    }
    if let Some(ln) = kappa.strip_prefix("exp(").and_then(|s| s.strip_suffix(')')) {
        return ln
            .parse()
            .map(|ln| Estimate::Overflow { ln })
            .map_err(|_| Error::Input(format!("bad kappa field {kappa:?}")));
    }
    kappa
        .parse()
        .map(Estimate::Finite)
        .map_err(|_| Error::Input(format!("bad kappa field {kappa:?}")))
}

fn parse_ln(field: &str) -> Result<Estimate> {
    if field == "inf" {
        return Ok(Estimate::RankDeficient);
    }
    field
        .parse()
        .map(Estimate::from_ln)
        .map_err(|_| Error::Input(format!("bad mu_log field {field:?}")))
}

/// Reads a condition CSV back. Weight statistics are not part of that
/// file and come back as rank deficient.
pub fn read_condition_csv<R: Read>(r: R) -> Result<Vec<ConditionRecord>> {
    let bad = |e: csv::Error| Error::Input(format!("condition CSV: {e}"));
    let mut reader = csv::Reader::from_reader(r);
    let header: Vec<String> = reader.headers().map_err(bad)?.iter().map(String::from).collect();
    if header.join(",") != CONDITION_HEADER {
        return Err(Error::Input("condition CSV header mismatch".into()));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let f = row.map_err(bad)?;
        let int = |i: usize| {
            f[i].parse::<u64>()
                .map_err(|_| Error::Input(format!("bad integer field {:?}", &f[i])))
        };
        let float = |i: usize| {
            f[i].parse::<f64>()
                .map_err(|_| Error::Input(format!("bad float field {:?}", &f[i])))
        };
        out.push(ConditionRecord {
            step: int(0)?,
            layer: int(1)? as usize,
            head: int(2)? as usize,
            kappa: parse_estimate(&f[3], &f[7])?,
            mu: parse_ln(&f[4])?,
            row_norm_min: float(5)?,
            row_norm_max: float(6)?,
            weight_kappa: Estimate::RankDeficient,
            weight_mu: Estimate::RankDeficient,
        });
    }
    Ok(out)
}

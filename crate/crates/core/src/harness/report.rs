//! Experiment reports.
//!
//! A report is a JSON-lines stream: one `sample` object per attacked
//! input, then exactly one `summary` object as the last line. Floats
//! are rendered with 17 significant digits, which parses back to the
//! identical bit pattern, and every field is emitted in a fixed order —
//! two runs of the same experiment produce byte-identical reports (as
//! long as timing is not recorded).

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Outcome of one attack on one sample.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub success: bool,
    /// Perturbation norm when successful.
    pub norm: Option<f64>,
    /// Gradient steps spent.
    pub steps: usize,
    /// Starts attempted.
    pub restarts: usize,
    /// Wall-clock milliseconds; absent unless timing was requested.
    pub millis: Option<u128>,
}

/// Outcome of the exhaustive search on one sample.
#[derive(Debug, Clone)]
pub struct OracleOutcome {
    pub found: bool,
    pub norm: Option<f64>,
    pub subsets: usize,
    pub qps: usize,
    pub millis: Option<u128>,
}

/// Everything recorded about one attacked sample.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    /// Index into the test set.
    pub index: usize,
    pub label: usize,
    pub clean_prediction: usize,
    pub ours: AttackOutcome,
    pub baseline: Option<AttackOutcome>,
    pub oracle: Option<OracleOutcome>,
}

/// Aggregates over a record list. Rates and norms are undefined (and
/// rendered as null) when their denominator is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub samples: usize,
    /// Fraction of samples the clean model classifies correctly.
    pub clean_accuracy: Option<f64>,
    pub success_rate: Option<f64>,
    /// Mean/median norm over successful attacks.
    pub mean_norm: Option<f64>,
    pub median_norm: Option<f64>,
    pub baseline_success_rate: Option<f64>,
    pub baseline_mean_norm: Option<f64>,
    pub baseline_median_norm: Option<f64>,
    pub oracle_mean_norm: Option<f64>,
    /// Mean/median of `ours / oracle` over samples where both exist and
    /// the oracle norm is positive (a zero norm means the clean input
    /// was already misclassified; there is nothing to compare).
    pub mean_oracle_gap: Option<f64>,
    pub median_oracle_gap: Option<f64>,
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

/// Summarizes a record list.
pub fn compute_metrics(records: &[SampleRecord]) -> Summary {
    let samples = records.len();
    let clean_accuracy = if samples == 0 {
        None
    } else {
        let correct = records
            .iter()
            .filter(|r| r.clean_prediction == r.label)
            .count();
        Some(correct as f64 / samples as f64)
    };
    let success_rate = if samples == 0 {
        None
    } else {
        Some(records.iter().filter(|r| r.ours.success).count() as f64 / samples as f64)
    };
    let norms: Vec<f64> = records.iter().filter_map(|r| r.ours.norm).collect();
    let with_baseline: Vec<&AttackOutcome> =
        records.iter().filter_map(|r| r.baseline.as_ref()).collect();
    let baseline_success_rate = if with_baseline.is_empty() {
        None
    } else {
        Some(with_baseline.iter().filter(|o| o.success).count() as f64 / with_baseline.len() as f64)
    };
    let baseline_norms: Vec<f64> = with_baseline.iter().filter_map(|o| o.norm).collect();
    let oracle_norms: Vec<f64> = records
        .iter()
        .filter_map(|r| r.oracle.as_ref().and_then(|o| o.norm))
        .collect();
    let gaps: Vec<f64> = records
        .iter()
        .filter_map(|r| {
            let ours = r.ours.norm?;
            let oracle = r.oracle.as_ref()?.norm?;
            (oracle > 0.0).then(|| ours / oracle)
        })
        .collect();
    Summary {
        samples,
        clean_accuracy,
        success_rate,
        mean_norm: mean(&norms),
        median_norm: median(&norms),
        baseline_success_rate,
        baseline_mean_norm: mean(&baseline_norms),
        baseline_median_norm: median(&baseline_norms),
        oracle_mean_norm: mean(&oracle_norms),
        mean_oracle_gap: mean(&gaps),
        median_oracle_gap: median(&gaps),
    }
}

/// A float as a JSON number with 17 significant digits (exactrip).
fn jnum(x: f64) -> String {
    debug_assert!(x.is_finite(), "reports never contain non-finite numbers");
    format!("{:.16e}", x)
}

fn jopt(x: Option<f64>) -> String {
    x.map_or_else(|| "null".to_string(), jnum)
}

fn jopt_int(x: Option<u128>) -> String {
    x.map_or_else(|| "null".to_string(), |v| v.to_string())
}

fn render_attack(o: &AttackOutcome) -> String {
    format!(
        "{{\"success\":{},\"norm\":{},\"steps\":{},\"restarts\":{},\"millis\":{}}}",
        o.success,
        jopt(o.norm),
        o.steps,
        o.restarts,
        jopt_int(o.millis)
    )
}

fn render_oracle(o: &OracleOutcome) -> String {
    format!(
        "{{\"found\":{},\"norm\":{},\"subsets\":{},\"qps\":{},\"millis\":{}}}",
        o.found,
        jopt(o.norm),
        o.subsets,
        o.qps,
        jopt_int(o.millis)
    )
}

/// Renders one sample record as a JSON line (no trailing newline).
pub fn render_sample(r: &SampleRecord) -> String {
    format!(
        "{{\"type\":\"sample\",\"index\":{},\"label\":{},\"clean_prediction\":{},\
         \"ours\":{},\"baseline\":{},\"oracle\":{}}}",
        r.index,
        r.label,
        r.clean_prediction,
        render_attack(&r.ours),
        r.baseline
            .as_ref()
            .map_or_else(|| "null".to_string(), render_attack),
        r.oracle
            .as_ref()
            .map_or_else(|| "null".to_string(), render_oracle),
    )
}

/// Renders the summary as a JSON line (no trailing newline).
pub fn render_summary(s: &Summary) -> String {
    format!(
        "{{\"type\":\"summary\",\"samples\":{},\"clean_accuracy\":{},\
         \"success_rate\":{},\"mean_norm\":{},\"median_norm\":{},\
         \"baseline_success_rate\":{},\"baseline_mean_norm\":{},\
         \"baseline_median_norm\":{},\"oracle_mean_norm\":{},\
         \"mean_oracle_gap\":{},\"median_oracle_gap\":{}}}",
        s.samples,
        jopt(s.clean_accuracy),
        jopt(s.success_rate),
        jopt(s.mean_norm),
        jopt(s.median_norm),
        jopt(s.baseline_success_rate),
        jopt(s.baseline_mean_norm),
        jopt(s.baseline_median_norm),
        jopt(s.oracle_mean_norm),
        jopt(s.mean_oracle_gap),
        jopt(s.median_oracle_gap),
    )
}

/// Renders the full report: one line per record, the summary last.
pub fn render_report(records: &[SampleRecord], summary: &Summary) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&render_sample(r));
        out.push('\n');
    }
    out.push_str(&render_summary(summary));
    out.push('\n');
    out
}

/// Writes [`render_report`] to a file.
pub fn write_report(
    path: impl AsRef<Path>,
    records: &[SampleRecord],
    summary: &Summary,
) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    file.write_all(render_report(records, summary).as_bytes())
        .map_err(|e| Error::io(path.to_path_buf(), e))
}

fn field<'a>(v: &'a serde_json::Value, name: &str, line: usize) -> Result<&'a serde_json::Value> {
    v.get(name)
        .ok_or_else(|| Error::Parse(format!("line {}: missing field {:?}", line, name)))
}

fn as_usize(v: &serde_json::Value, name: &str, line: usize) -> Result<usize> {
    field(v, name, line)?
        .as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| Error::Parse(format!("line {}: {:?} is not an integer", line, name)))
}

fn as_bool(v: &serde_json::Value, name: &str, line: usize) -> Result<bool> {
    field(v, name, line)?
        .as_bool()
        .ok_or_else(|| Error::Parse(format!("line {}: {:?} is not a boolean", line, name)))
}

fn as_opt_f64(v: &serde_json::Value, name: &str, line: usize) -> Result<Option<f64>> {
    let f = field(v, name, line)?;
    if f.is_null() {
        return Ok(None);
    }
    f.as_f64()
        .map(Some)
        .ok_or_else(|| Error::Parse(format!("line {}: {:?} is not a number", line, name)))
}

fn as_opt_millis(v: &serde_json::Value, name: &str, line: usize) -> Result<Option<u128>> {
    let f = field(v, name, line)?;
    if f.is_null() {
        return Ok(None);
    }
    f.as_u64()
        .map(|u| Some(u as u128))
        .ok_or_else(|| Error::Parse(format!("line {}: {:?} is not an integer", line, name)))
}

fn parse_attack(v: &serde_json::Value, line: usize) -> Result<AttackOutcome> {
    Ok(AttackOutcome {
        success: as_bool(v, "success", line)?,
        norm: as_opt_f64(v, "norm", line)?,
        steps: as_usize(v, "steps", line)?,
        restarts: as_usize(v, "restarts", line)?,
        millis: as_opt_millis(v, "millis", line)?,
    })
}

fn parse_sample(v: &serde_json::Value, line: usize) -> Result<SampleRecord> {
    let baseline = match field(v, "baseline", line)? {
        serde_json::Value::Null => None,
        b => Some(parse_attack(b, line)?),
    };
    let oracle = match field(v, "oracle", line)? {
        serde_json::Value::Null => None,
        o => Some(OracleOutcome {
            found: as_bool(o, "found", line)?,
            norm: as_opt_f64(o, "norm", line)?,
            subsets: as_usize(o, "subsets", line)?,
            qps: as_usize(o, "qps", line)?,
            millis: as_opt_millis(o, "millis", line)?,
        }),
    };
    Ok(SampleRecord {
        index: as_usize(v, "index", line)?,
        label: as_usize(v, "label", line)?,
        clean_prediction: as_usize(v, "clean_prediction", line)?,
        ours: parse_attack(field(v, "ours", line)?, line)?,
        baseline,
        oracle,
    })
}

fn parse_summary(v: &serde_json::Value, line: usize) -> Result<Summary> {
    Ok(Summary {
        samples: as_usize(v, "samples", line)?,
        clean_accuracy: as_opt_f64(v, "clean_accuracy", line)?,
        success_rate: as_opt_f64(v, "success_rate", line)?,
        mean_norm: as_opt_f64(v, "mean_norm", line)?,
        median_norm: as_opt_f64(v, "median_norm", line)?,
        baseline_success_rate: as_opt_f64(v, "baseline_success_rate", line)?,
        baseline_mean_norm: as_opt_f64(v, "baseline_mean_norm", line)?,
        baseline_median_norm: as_opt_f64(v, "baseline_median_norm", line)?,
        oracle_mean_norm: as_opt_f64(v, "oracle_mean_norm", line)?,
        mean_oracle_gap: as_opt_f64(v, "mean_oracle_gap", line)?,
        median_oracle_gap: as_opt_f64(v, "median_oracle_gap", line)?,
    })
}

/// Parses a rendered report back into records and summary.
///
/// The grammar is strict: sample lines only, then exactly one summary
/// line, nothing afterwards. Since floats render with full precision,
/// `render_report(parse_report(text)) == text` for any well-formed
/// report.
pub fn parse_report(text: &str) -> Result<(Vec<SampleRecord>, Summary)> {
    let mut records = Vec::new();
    let mut summary = None;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::Parse(format!("line {}: {}", n, e)))?;
        if summary.is_some() {
            return Err(Error::Parse(format!(
                "line {}: content after the summary line",
                n
            )));
        }
        match field(&v, "type", n)?.as_str() {
            Some("sample") => records.push(parse_sample(&v, n)?),
            Some("summary") => summary = Some(parse_summary(&v, n)?),
            other => {
                return Err(Error::Parse(format!(
                    "line {}: unknown record type {:?}",
                    n, other
                )))
            }
        }
    }
    let summary = summary.ok_or_else(|| Error::Parse("missing summary line".into()))?;
    Ok((records, summary))
}

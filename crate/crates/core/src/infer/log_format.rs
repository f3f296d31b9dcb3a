//! Training log lines in the two-line `Step ...` / `{'Loss/...': ...}` layout.

use crate::error::{Error, Result};
use crate::loss::LossBreakdown;

const KEYS: [&str; 5] = [
    "Loss/classification_loss",
    "Loss/localization_loss",
    "Loss/regularization_loss",
    "Loss/total_loss",
    "learning_rate",
];

/// Shortest round-trip decimal, padded with zeros to six significant digits.
pub fn format_log_value(v: f64) -> String {
    if v == 0.0 {
        return "0.000000".into();
    }
    let mut s = format!("{v}");
    if !v.is_finite() {
        return s;
    }
    let digits: String = s.chars().filter(|c| c.is_ascii_digit()).collect();
    let significant = digits.trim_start_matches('0').len();
    if !s.contains('.') {
        s.push('.');
    }
    for _ in significant..6 {
        s.push('0');
    }
    s
}

pub fn format_training_log(step: u64, per_step_time: f64, b: &LossBreakdown) -> String {
    let values = [
        b.classification_loss,
        b.localization_loss,
        b.regularization_loss,
        b.total_loss,
        b.learning_rate,
    ];
    let body: Vec<String> = KEYS
        .iter()
        .zip(values)
        .map(|(k, v)| format!("'{k}': {}", format_log_value(v)))
        .collect();
    format!("Step {step} per-step time {per_step_time:.3}s\n{{{}}}\n", body.join(", "))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParsedLogEvent {
    pub step: u64,
    pub per_step_time: f64,
    pub breakdown: LossBreakdown,
}

/// Reads log events back. Logger prefixes before `Step` or `{` are ignored
/// and a dictionary may be wrapped over several lines.
pub fn parse_training_log(text: &str) -> Result<Vec<ParsedLogEvent>> {
    let mut out = Vec::new();
    let mut current: Option<(u64, f64)> = None;
    let mut dict: Option<String> = None;
    for (n, line) in text.lines().enumerate() {
        let err = |message: String| Error::ParseError {
            line: n + 1,
            element: "log".into(),
            message,
        };
        if let Some(buf) = dict.as_mut() {
            buf.push(' ');
            buf.push_str(line);
        } else if let Some(pos) = line.find("Step ") {
            let rest = &line[pos + 5..];
            let mut parts = rest.split_whitespace();
            let step = parts.next().and_then(|s| s.parse().ok());
            let t = match (parts.next(), parts.next(), parts.next()) {
                (Some("per-step"), Some("time"), Some(t)) => t.strip_suffix('s').and_then(|t| t.parse().ok()),
                _ => None,
            };
            match (step, t) {
                (Some(s), Some(t)) => current = Some((s, t)),
                _ => return Err(err(format!("malformed step line {line:?}"))),
            }
            continue;
        } else if let Some(pos) = line.find('{') {
            dict = Some(line[pos..].to_string());
        } else {
            continue;
        }
        let buf = dict.as_ref().unwrap();
        if !buf.contains('}') {
            continue;
        }
        let (step, t) = current.ok_or_else(|| err("loss dictionary before any step line".into()))?;
        let values = parse_dict(buf).map_err(err)?;
        out.push(ParsedLogEvent {
            step,
            per_step_time: t,
            breakdown: LossBreakdown {
                classification_loss: values[0],
                localization_loss: values[1],
                regularization_loss: values[2],
                total_loss: values[3],
                learning_rate: values[4],
            },
        });
        dict = None;
    }
    Ok(out)
}

fn parse_dict(text: &str) -> std::result::Result<[f64; 5], String> {
    let start = text.find('{').ok_or("missing {")?;
    let end = text.rfind('}').ok_or("missing }")?;
    let mut values = [f64::NAN; 5];
    let mut seen = [false; 5];
    for item in text[start + 1..end].split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item.split_once(':').ok_or_else(|| format!("bad entry {item:?}"))?;
        let k = k.trim().trim_matches('\'');
        let idx = KEYS.iter().position(|&x| x == k).ok_or_else(|| format!("unknown key {k:?}"))?;
        values[idx] = v.trim().parse().map_err(|_| format!("bad value {v:?} for {k}"))?;
        seen[idx] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(format!("missing key {}", KEYS[i]));
    }
    Ok(values)
}

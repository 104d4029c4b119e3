//! Report serialization and text tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

const DECIMALS: f64 = 1e6;

/// Rounds every non-integer number to 6 decimals.
pub fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64");
            *v = Value::from((x * DECIMALS).round() / DECIMALS);
        }
        Value::Array(a) => a.iter_mut().for_each(round_floats),
        Value::Object(o) => o.values_mut().for_each(round_floats),
        _ => {}
    }
}

/// Pretty JSON with rounded floats and a trailing newline.
pub fn to_report_json<T: Serialize>(value: &T) -> String {
    let mut v = serde_json::to_value(value).expect("report serializes");
    round_floats(&mut v);
    let mut s = serde_json::to_string_pretty(&v).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub avg: f64,
    pub max: f64,
    pub min: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Self {
            avg: values.iter().sum::<f64>() / values.len() as f64,
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
        })
    }
}

/// One table row: a task, a method and its spread over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub task_id: String,
    pub metric: String,
    pub method: String,
    pub seeds: usize,
    pub spread: Spread,
}

/// Fixed-width table with Avg/Max/Min columns, scores in percent.
pub fn render_table(rows: &[Row]) -> String {
    let tw = rows.iter().map(|r| r.task_id.len()).max().unwrap_or(0).max(4);
    let mw = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<tw$}  {:<10}  {:<mw$}  {:>5}  {:>8}  {:>8}  {:>8}",
        "task", "metric", "method", "seeds", "Avg", "Max", "Min"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<tw$}  {:<10}  {:<mw$}  {:>5}  {:>8.2}  {:>8.2}  {:>8.2}",
            r.task_id,
            r.metric,
            r.method,
            r.seeds,
            100.0 * r.spread.avg,
            100.0 * r.spread.max,
            100.0 * r.spread.min
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_keeps_integers() {
        let mut v = serde_json::json!({"a": 0.12345678, "b": [1, 2.0000004], "c": "x"});
        round_floats(&mut v);
        assert_eq!(v, serde_json::json!({"a": 0.123457, "b": [1, 2.0], "c": "x"}));
    }

    #[test]
    fn spread_and_table() {
        let s = Spread::of(&[0.5, 0.7, 0.6]).unwrap();
        assert_eq!((s.max, s.min), (0.7, 0.5));
        assert!((s.avg - 0.6).abs() < 1e-12);
        let t = render_table(&[Row {
            task_id: "tnews".into(),
            metric: "micro_f1".into(),
            method: "gps".into(),
            seeds: 3,
            spread: s,
        }]);
        assert!(t.lines().nth(1).unwrap().contains("60.00"));
        assert!(Spread::of(&[]).is_none());
    }
}

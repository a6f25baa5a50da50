use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SolarError};

pub const METRICS_HEADER: [&str; 6] = ["task_id", "method", "accuracy", "wall_ms", "seed", "strategy_digest"];

pub const METHOD_BASELINE: &str = "baseline";
pub const METHOD_GENERATED: &str = "generated";
pub const METHOD_SOLAR: &str = "solar";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task_id: String,
    pub method: String,
    pub accuracy: f64,
    pub wall_ms: u64,
    pub seed: u64,
    pub strategy_digest: Option<String>,
}

pub fn write_metrics(rows: &[MetricsRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(METRICS_HEADER).map_err(csv_err)?;
    }
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> SolarError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    SolarError::Parse {
        line,
        message: e.to_string(),
    }
}

/// Parses a metrics CSV, checking the header and every accuracy.
pub fn read_metrics(r: impl Read) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(SolarError::Parse {
            line: 1,
            message: format!("header must be {}", METRICS_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<MetricsRow>() {
        let row = rec.map_err(csv_err)?;
        if !(0.0..=1.0).contains(&row.accuracy) {
            return Err(SolarError::Parse {
                line: rows.len() + 2,
                message: format!("accuracy {} outside [0, 1]", row.accuracy),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Mean over a set of values, summed in sorted order so the result does
/// not depend on row order.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub task_id: String,
    pub method: String,
    pub reference: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    /// task → method → (row count, mean accuracy)
    pub per_task: BTreeMap<String, BTreeMap<String, (usize, f64)>>,
    /// method → mean over tasks of the per-task means
    pub aggregate: BTreeMap<String, f64>,
    pub deltas: Vec<Delta>,
}

/// Pairs compared in the Δ rows, as (method, reference). Every method is
/// compared against the adapter-free baseline and, except the generated
/// row itself, against the generated adapter.
pub fn delta_pairs(methods: &[&String]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for m in methods.iter().filter(|m| m.as_str() != METHOD_BASELINE) {
        for reference in [METHOD_BASELINE, METHOD_GENERATED] {
            if m.as_str() != reference && methods.iter().any(|x| x.as_str() == reference) {
                out.push(((*m).clone(), reference.to_string()));
            }
        }
    }
    out
}

pub fn summarize(rows: &[MetricsRow]) -> Result<Summary> {
    if rows.is_empty() {
        return Err(SolarError::EmptySource("metrics rows"));
    }
    let mut grouped: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        grouped
            .entry(r.task_id.clone())
            .or_default()
            .entry(r.method.clone())
            .or_default()
            .push(r.accuracy);
    }
    let per_task: BTreeMap<String, BTreeMap<String, (usize, f64)>> = grouped
        .into_iter()
        .map(|(task, methods)| {
            let m = methods.into_iter().map(|(k, mut v)| (k, (v.len(), stable_mean(&mut v)))).collect();
            (task, m)
        })
        .collect();

    let mut by_method: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for methods in per_task.values() {
        for (m, &(_, mean)) in methods {
            by_method.entry(m.clone()).or_default().push(mean);
        }
    }
    let aggregate: BTreeMap<String, f64> = by_method.into_iter().map(|(m, mut v)| (m, stable_mean(&mut v))).collect();

    let mut deltas = Vec::new();
    let mut push_deltas = |task: &str, means: &BTreeMap<String, f64>| {
        let names: Vec<&String> = means.keys().collect();
        for (m, reference) in delta_pairs(&names) {
            deltas.push(Delta {
                task_id: task.to_string(),
                value: means[&m] - means[&reference],
                method: m,
                reference,
            });
        }
    };
    for (task, methods) in &per_task {
        let means: BTreeMap<String, f64> = methods.iter().map(|(m, &(_, v))| (m.clone(), v)).collect();
        push_deltas(task, &means);
    }
    push_deltas("AVERAGE", &aggregate);
    Ok(Summary {
        per_task,
        aggregate,
        deltas,
    })
}

impl Summary {
    /// Plain-text table: one line per task with a column per method, an
    /// average line, then the Δ rows.
    pub fn render(&self) -> String {
        let methods: Vec<&String> = self.aggregate.keys().collect();
        let mut s = String::new();
        let _ = write!(s, "{:<16}", "task");
        for m in &methods {
            let _ = write!(s, " {m:>18}");
        }
        s.push('\n');
        let row = |s: &mut String, name: &str, get: &dyn Fn(&str) -> Option<f64>| {
            let _ = write!(s, "{name:<16}");
            for m in &methods {
                match get(m) {
                    Some(v) => {
                        let _ = write!(s, " {:>18.2}", 100.0 * v);
                    }
                    None => {
                        let _ = write!(s, " {:>18}", "-");
                    }
                }
            }
            s.push('\n');
        };
        for (task, ms) in &self.per_task {
            row(&mut s, task, &|m| ms.get(m).map(|x| x.1));
        }
        row(&mut s, "AVERAGE", &|m| self.aggregate.get(m).copied());
        s.push('\n');
        for d in &self.deltas {
            let _ = writeln!(
                s,
                "Δ {:<16} {:>18} - {:<10} {:>+8.2}",
                d.task_id,
                d.method,
                d.reference,
                100.0 * d.value
            );
        }
        s
    }

    /// Long-format plot data: `task_id,method,mean_accuracy,count`.
    pub fn plot_csv(&self) -> String {
        let mut s = String::from("task_id,method,mean_accuracy,count\n");
        for (task, ms) in &self.per_task {
            for (m, (n, v)) in ms {
                let _ = writeln!(s, "{task},{m},{v},{n}");
            }
        }
        s
    }
}

//! Timestamped measurement records and their CSV form.

use std::io::Write;

use serde::{Deserialize, Serialize};

/// One measurement of a run. Metric order is preserved, so CSV output is a
/// function of the emitting experiment only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: u64,
    pub t: f64,
    pub metrics: Vec<(String, f64)>,
    pub vectors: Vec<(String, Vec<f64>)>,
    pub seed: u64,
    pub config_hash: String,
}

impl RunRecord {
    pub fn new(step: u64, t: f64, seed: u64, config_hash: impl Into<String>) -> Self {
        Self { step, t, metrics: Vec::new(), vectors: Vec::new(), seed, config_hash: config_hash.into() }
    }

    pub fn metric(mut self, name: impl Into<String>, value: f64) -> Self {
        self.metrics.push((name.into(), value));
        self
    }

    pub fn vector(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.vectors.push((name.into(), values));
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Writes records in long form: one row per `(t, metric)`, vector entries
/// as `name[i]`.
pub fn write_records_csv<W: Write>(mut out: W, records: &[RunRecord]) -> std::io::Result<()> {
    writeln!(out, "step,t,metric,value,seed,config_hash")?;
    for r in records {
        for (name, v) in &r.metrics {
            writeln!(out, "{},{:e},{},{:e},{},{}", r.step, r.t, name, v, r.seed, r.config_hash)?;
        }
        for (name, vs) in &r.vectors {
            for (i, v) in vs.iter().enumerate() {
                writeln!(out, "{},{:e},{}[{}],{:e},{},{}", r.step, r.t, name, i, v, r.seed, r.config_hash)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_is_long_form() {
        let recs = vec![RunRecord::new(0, 0.0, 7, "abc").metric("x", 1.5).vector("v", vec![1.0, 2.0])];
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &recs).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "0,0e0,x,1.5e0,7,abc");
        assert!(lines[3].starts_with("0,0e0,v[1],2e0"));
        assert_eq!(recs[0].get("x"), Some(1.5));
    }
}

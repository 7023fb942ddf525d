//! Append-only CSV metrics: one row per gradient update and per episode.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Update,
    Episode,
}

/// Empty cells mean "not applicable to this row kind".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub kind: RowKind,
    /// Environment steps taken so far.
    pub step: u64,
    pub update: u64,
    pub episode: u64,
    pub episode_return: Option<f64>,
    pub episode_length: Option<u64>,
    pub model_loss: Option<f64>,
    pub consistency_loss: Option<f64>,
    pub reward_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub model_grad_norm: Option<f64>,
    pub prior_loss: Option<f64>,
    pub klq_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub kl_term: Option<f64>,
    pub q_term: Option<f64>,
    pub entropy_term: Option<f64>,
    pub s_kl: Option<f64>,
    pub s_q: Option<f64>,
    pub s_p: Option<f64>,
    pub reanalyzed: Option<u64>,
    pub plan_std_mean: Option<f64>,
    pub elite_score_mean: Option<f64>,
}

impl MetricsRow {
    pub fn new(kind: RowKind, step: u64, update: u64, episode: u64) -> Self {
        MetricsRow {
            kind,
            step,
            update,
            episode,
            episode_return: None,
            episode_length: None,
            model_loss: None,
            consistency_loss: None,
            reward_loss: None,
            value_loss: None,
            model_grad_norm: None,
            prior_loss: None,
            klq_loss: None,
            policy_loss: None,
            kl_term: None,
            q_term: None,
            entropy_term: None,
            s_kl: None,
            s_q: None,
            s_p: None,
            reanalyzed: None,
            plan_std_mean: None,
            elite_score_mean: None,
        }
    }
}

/// Buffers rows and appends them to a CSV file on [`MetricsSink::flush`].
#[derive(Debug, Default)]
pub struct MetricsSink {
    path: Option<PathBuf>,
    pending: Vec<MetricsRow>,
}

impl MetricsSink {
    pub fn new(path: Option<PathBuf>) -> Self {
        MetricsSink {
            path,
            pending: Vec::new(),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn push(&mut self, row: MetricsRow) {
        if self.path.is_some() {
            self.pending.push(row);
        }
    }

    /// Appends pending rows; the header is written only to an empty file.
    pub fn flush(&mut self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        if self.pending.is_empty() {
            return Ok(());
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let fresh = file.metadata()?.len() == 0;
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        for row in self.pending.drain(..) {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Per-episode learning curve `(step, episode, return)` written as CSV.
pub fn export_curves(metrics: &Path, out: &Path) -> Result<usize> {
    let rows = read_metrics(metrics)?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["step", "episode", "return"])?;
    let mut n = 0;
    for r in rows.iter().filter(|r| r.kind == RowKind::Episode) {
        let ret = r.episode_return.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([r.step.to_string(), r.episode.to_string(), ret])?;
        n += 1;
    }
    w.flush()?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut sink = MetricsSink::new(Some(path.clone()));
        let mut a = MetricsRow::new(RowKind::Update, 5, 1, 0);
        a.model_loss = Some(0.125);
        a.s_kl = Some(1.0 / 3.0);
        sink.push(a.clone());
        sink.flush().unwrap();
        let mut b = MetricsRow::new(RowKind::Episode, 200, 1, 0);
        b.episode_return = Some(-1234.5);
        b.episode_length = Some(200);
        sink.push(b.clone());
        sink.flush().unwrap();
        assert_eq!(read_metrics(&path).unwrap(), vec![a, b]);

        let out = dir.path().join("c.csv");
        assert_eq!(export_curves(&path, &out).unwrap(), 1);
        let text = std::fs::read_to_string(out).unwrap();
        assert_eq!(text, "step,episode,return\n200,0,-1234.5\n");
    }

    #[test]
    fn disabled_sink_is_a_no_op() {
        let mut sink = MetricsSink::new(None);
        sink.push(MetricsRow::new(RowKind::Update, 0, 0, 0));
        sink.flush().unwrap();
    }
}

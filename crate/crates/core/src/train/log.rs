//! Append-only line-delimited metrics log. Records carry no timestamps so
//! equal-seed runs produce byte-identical logs.

use crate::error::Result;
use crate::metrics::EvalResult;
use crate::objectives::ElboBreakdown;
use serde::Serialize;
use std::io::{BufWriter, Write};
use std::path::Path;

#[derive(Serialize)]
struct StepRecord<'a> {
    kind: &'static str,
    stage: &'a str,
    epoch: usize,
    step: usize,
    batch: usize,
    mean: &'a ElboBreakdown,
    grad_norm: f32,
}

#[derive(Serialize)]
struct MaskStepRecord<'a> {
    kind: &'static str,
    stage: &'a str,
    epoch: usize,
    step: usize,
    batch: usize,
    mse: f64,
    grad_norm: f32,
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    kind: &'static str,
    stage: &'a str,
    epoch: usize,
    metric: &'a str,
    result: &'a EvalResult,
}

pub struct MetricsLog {
    writer: Option<BufWriter<std::fs::File>>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(MetricsLog {
            writer: Some(BufWriter::new(file)),
        })
    }

    /// A log that discards everything (used by in-process tests).
    pub fn sink() -> Self {
        MetricsLog { writer: None }
    }

    fn write_line(&mut self, value: &impl Serialize) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            serde_json::to_writer(&mut *w, value)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn step(
        &mut self,
        stage: &str,
        epoch: usize,
        step: usize,
        batch: usize,
        mean: &ElboBreakdown,
        grad_norm: f32,
    ) -> Result<()> {
        self.write_line(&StepRecord {
            kind: "step",
            stage,
            epoch,
            step,
            batch,
            mean,
            grad_norm,
        })
    }

    pub fn mask_step(
        &mut self,
        stage: &str,
        epoch: usize,
        step: usize,
        batch: usize,
        mse: f64,
        grad_norm: f32,
    ) -> Result<()> {
        self.write_line(&MaskStepRecord {
            kind: "mask_step",
            stage,
            epoch,
            step,
            batch,
            mse,
            grad_norm,
        })
    }

    pub fn eval(
        &mut self,
        stage: &str,
        epoch: usize,
        metric: &str,
        result: &EvalResult,
    ) -> Result<()> {
        self.write_line(&EvalRecord {
            kind: "eval",
            stage,
            epoch,
            metric,
            result,
        })
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

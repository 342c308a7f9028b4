//! Sinusoidal positional encoding of predicted-frame indices.
//!
//! Dimension `2i` holds `sin(α·t / β^{2i/d})` and dimension `2i+1` the matching
//! cosine. A larger `α` spreads neighbouring indices further apart; a smaller
//! `β` puts more dimensions to work at short horizons.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosEncConfig {
    pub d_model: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Number of predicted frames `M`.
    pub horizon: usize,
}

impl Default for PosEncConfig {
    fn default() -> Self {
        PosEncConfig {
            d_model: 256,
            alpha: 10.0,
            beta: 500.0,
            horizon: 25,
        }
    }
}

impl PosEncConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model < 2 || !self.d_model.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "d_model must be even and at least 2, got {}",
                self.d_model
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.beta > 1.0) {
            return Err(Error::InvalidArgument(format!("beta must exceed 1, got {}", self.beta)));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        Ok(())
    }
}

/// Embedding of frame index `t` (predicted frames start at 1).
pub fn positional_embedding(t: usize, cfg: &PosEncConfig) -> Vec<f64> {
    let d = cfg.d_model;
    let mut out = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let angle = cfg.alpha * t as f64 / cfg.beta.powf((2 * i) as f64 / d as f64);
        let (s, c) = angle.sin_cos();
        out.push(s);
        out.push(c);
    }
    out
}

/// `[M, d_model]` table whose row `t - 1` is the embedding of frame `t`.
pub fn embedding_table(cfg: &PosEncConfig) -> Result<Tensor> {
    cfg.validate()?;
    let data = (1..=cfg.horizon).flat_map(|t| positional_embedding(t, cfg)).collect();
    Tensor::new([cfg.horizon, cfg.d_model], data)
}

/// Writes the table as CSV with a `t` column followed by `d0..d{D-1}`.
pub fn write_table_csv<W: Write>(cfg: &PosEncConfig, out: W) -> Result<()> {
    let table = embedding_table(cfg)?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((0..cfg.d_model).map(|i| format!("d{i}")));
    w.write_record(&header)?;
    for (t, row) in table.rows().enumerate() {
        let mut rec = vec![(t + 1).to_string()];
        rec.extend(row.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<posenc csv>", e))?;
    Ok(())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

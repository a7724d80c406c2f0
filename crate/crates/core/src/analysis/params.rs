//! Parameter tables across model variants.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamRow {
    pub name: String,
    pub learned: usize,
    pub buffers: usize,
    /// Versus the first row.
    pub delta_learned: i64,
    pub delta_buffers: i64,
}

impl ParamRow {
    pub fn learned_millions(&self) -> f64 {
        self.learned as f64 / 1e6
    }
}

/// Counts for each `(name, config)`; deltas are against the first entry.
pub fn param_table(models: &[(String, ModelConfig)]) -> Result<Vec<ParamRow>> {
    let mut rows: Vec<ParamRow> = Vec::with_capacity(models.len());
    for (name, cfg) in models {
        let total = Model::build(cfg, &Rng::new(0))?.count_params().total;
        let (bl, bb) = rows
            .first()
            .map_or((total.learned, total.buffers), |r| (r.learned, r.buffers));
        rows.push(ParamRow {
            name: name.clone(),
            learned: total.learned,
            buffers: total.buffers,
            delta_learned: total.learned as i64 - bl as i64,
            delta_buffers: total.buffers as i64 - bb as i64,
        });
    }
    Ok(rows)
}

pub fn param_table_csv(rows: &[ParamRow]) -> String {
    let mut s = String::from("model,learned,buffers,learned_m,delta_learned,delta_buffers\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{:.3},{},{}",
            r.name,
            r.learned,
            r.buffers,
            r.learned_millions(),
            r.delta_learned,
            r.delta_buffers
        )
        .expect("write to String");
    }
    s
}

//! Value histograms of feature maps, their zero fraction and entropy.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Magnitude below which a value counts as an exact zero.
pub const ZERO_THRESHOLD: f64 = 1e-12;
pub const DEFAULT_BINS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramReport {
    pub layer_id: usize,
    /// `"pre"` or `"post"`.
    pub stage: String,
    /// `bins + 1` uniform edges over `[min, max]`.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    pub zero_fraction: f64,
    pub entropy_bits: f64,
}

/// Histogram over `[min, max]` of `values`; the last bin is closed. When all
/// values are equal everything lands in bin 0.
pub fn histogram(values: &[f64], bins: usize, layer_id: usize, stage: &str) -> Result<HistogramReport> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if values.is_empty() {
        return Err(Error::Data("histogram of an empty tensor".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("histogram input contains {v}")));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { max } else { min + i as f64 * width })
        .collect();
    let mut counts = vec![0u64; bins];
    let mut zeros = 0u64;
    for &v in values {
        let b = if width > 0.0 {
            (((v - min) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
        if v.abs() < ZERO_THRESHOLD {
            zeros += 1;
        }
    }
    let total = values.len() as u64;
    let entropy_bits = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum();
    Ok(HistogramReport {
        layer_id,
        stage: stage.into(),
        bin_edges,
        counts,
        total,
        zero_fraction: zeros as f64 / total as f64,
        entropy_bits,
    })
}

/// Pre- and post-activation reports for activation slot `layer_id`, from an
/// eval-mode pass over `images`.
pub fn activation_histogram(
    model: &mut Model,
    layer_id: usize,
    images: &Tensor,
    bins: usize,
) -> Result<(HistogramReport, HistogramReport)> {
    if images.shape().n == 0 {
        return Err(Error::Data("no images for histogram".into()));
    }
    let (_, pre, post) = model.forward_probe(images, layer_id)?;
    Ok((
        histogram(pre.data(), bins, layer_id, "pre")?,
        histogram(post.data(), bins, layer_id, "post")?,
    ))
}

impl HistogramReport {
    /// Summary line followed by one row per bin.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "# layer={} stage={} total={} zero_fraction={} entropy_bits={}",
            self.layer_id, self.stage, self.total, self.zero_fraction, self.entropy_bits
        )
        .expect("write to String");
        s.push_str("bin,lower,upper,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(s, "{i},{},{},{c}", self.bin_edges[i], self.bin_edges[i + 1]).expect("write to String");
        }
        s
    }

    /// Elements whose bins lie entirely inside `[lo, hi)`.
    pub fn mass_between(&self, lo: f64, hi: f64) -> u64 {
        self.counts
            .iter()
            .enumerate()
            .filter(|(i, _)| self.bin_edges[*i] >= lo && self.bin_edges[i + 1] < hi)
            .map(|(_, c)| c)
            .sum()
    }
}

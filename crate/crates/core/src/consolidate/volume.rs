use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ExpertPool;
use crate::error::{invalid, Result};

pub const KIB: f64 = 1024.0;

/// Storage of a pool against the cost of pre-building every composite model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub library_bytes: f64,
    pub per_expert_bytes: BTreeMap<String, f64>,
    pub pool_total_bytes: f64,
    pub n_primitives: usize,
    /// `2^n` models, each assumed no larger than the smallest expert.
    pub exhaustive_estimate_bytes: f64,
    pub pool_total_binary: String,
    pub pool_total_decimal: String,
    pub exhaustive_binary: String,
    pub exhaustive_decimal: String,
}

/// `2^n × model_bytes`: every subset of `n` primitives gets its own model.
pub fn exhaustive_estimate(n: usize, model_bytes: f64) -> f64 {
    2f64.powi(n as i32) * model_bytes
}

fn format_with(bytes: f64, base: f64, units: [&str; 6]) -> String {
    let mut v = bytes;
    let mut i = 0;
    while v >= base && i + 1 < units.len() {
        v /= base;
        i += 1;
    }
    format!("{v:.2} {}", units[i])
}

/// Powers of 1024: `"1.23 MiB"`.
pub fn format_binary(bytes: f64) -> String {
    format_with(bytes, 1024.0, ["B", "KiB", "MiB", "GiB", "TiB", "PiB"])
}

/// Powers of 1000: `"1.29 MB"`.
pub fn format_decimal(bytes: f64) -> String {
    format_with(bytes, 1000.0, ["B", "KB", "MB", "GB", "TB", "PB"])
}

impl VolumeReport {
    pub fn from_sizes(library_bytes: f64, experts: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let per_expert_bytes: BTreeMap<String, f64> = experts.into_iter().collect();
        let Some(min) = per_expert_bytes.values().copied().reduce(f64::min) else {
            return invalid("a pool without experts has no volume");
        };
        let pool_total_bytes = library_bytes + per_expert_bytes.values().sum::<f64>();
        let n = per_expert_bytes.len();
        let estimate = exhaustive_estimate(n, min);
        Ok(Self {
            library_bytes,
            pool_total_binary: format_binary(pool_total_bytes),
            pool_total_decimal: format_decimal(pool_total_bytes),
            exhaustive_binary: format_binary(estimate),
            exhaustive_decimal: format_decimal(estimate),
            per_expert_bytes,
            pool_total_bytes,
            n_primitives: n,
            exhaustive_estimate_bytes: estimate,
        })
    }
}

/// Volume of a pool whose components have been serialized.
pub fn pool_volume(pool: &ExpertPool) -> Result<VolumeReport> {
    let Some(lib) = pool.library_bytes else {
        return invalid("library has not been serialized");
    };
    let experts = pool
        .experts
        .iter()
        .map(|(id, e)| match e.bytes {
            Some(b) => Ok((id.clone(), b as f64)),
            None => invalid(format!("expert `{id}` has not been serialized")),
        })
        .collect::<Result<Vec<_>>>()?;
    VolumeReport::from_sizes(lib as f64, experts)
}

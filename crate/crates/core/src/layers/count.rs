//! Parameter counts against a soft-sharing baseline.

use serde::Serialize;

use super::block::Encoder;
use super::htan::{Htan, HtanConfig};
use crate::spd::SpdNet;

/// Scalar counts of the network and of the baseline at one task count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub tasks: usize,
    /// Encoders, autoregressive LSTMs, embeddings and heads.
    pub htan_network: usize,
    /// One metric network per block.
    pub htan_metric: usize,
    pub htan_total: usize,
    /// `T` task-specific encoder stacks, one shared stack, and heads reading
    /// the concatenated shared and task features.
    pub baseline_total: usize,
}

impl ParamCount {
    pub fn htan_smaller(&self) -> bool {
        self.htan_total < self.baseline_total
    }
}

/// Counts learnable scalars for `config` with `k` metric layer pairs.
pub fn parameter_count(config: &HtanConfig, k: usize) -> ParamCount {
    let htan_network = Htan::scalar_count(config);
    let htan_metric = config.blocks * SpdNet::scalar_count(config.m, k);
    let stack: usize = (0..config.blocks)
        .map(|l| {
            let d = config.block_dims(l);
            Encoder::scalar_count(config.encoder, d.d_in, d.d_h)
        })
        .sum();
    let heads = config.tasks * (config.classes * 2 * config.d_h + config.classes);
    ParamCount {
        tasks: config.tasks,
        htan_network,
        htan_metric,
        htan_total: htan_network + htan_metric,
        baseline_total: (config.tasks + 1) * stack + heads,
    }
}

/// Smallest `T ≤ max_tasks` from which the network stays smaller than the
/// baseline for every larger `T` up to `max_tasks`.
pub fn crossover(config: &HtanConfig, k: usize, max_tasks: usize) -> Option<usize> {
    let smaller: Vec<bool> = (1..=max_tasks)
        .map(|t| parameter_count(&HtanConfig { tasks: t, ..*config }, k).htan_smaller())
        .collect();
    let last_larger = smaller.iter().rposition(|&s| !s);
    match last_larger {
        None => Some(1),
        Some(i) if i + 1 < max_tasks => Some(i + 2),
        Some(_) => None,
    }
}

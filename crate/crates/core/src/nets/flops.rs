//! Analytic multiply-accumulate counts per module group.

use std::collections::BTreeMap;

use super::{ModelConfig, ModuleGroup, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopsMode {
    /// Shared extractor once plus all four heads.
    Quad,
    /// Extractor plus one head.
    Single(Task),
}

/// Convolution MACs of one frame's forward pass: every layer contributes
/// `out_elems * k^2 * c_in` per application.
pub fn flops_count(cfg: &ModelConfig, mode: FlopsMode) -> BTreeMap<ModuleGroup, u64> {
    let mut out = BTreeMap::new();
    for l in cfg.layers() {
        let keep = match (mode, l.group.is_head()) {
            (_, false) => true,
            (FlopsMode::Quad, true) => true,
            (FlopsMode::Single(t), true) => t.head() == l.group,
        };
        if !keep {
            continue;
        }
        let macs = (l.c_out * l.out_hw.0 * l.out_hw.1 * l.k * l.k * l.c_in * l.repeats) as u64;
        *out.entry(l.group).or_insert(0) += macs;
    }
    out
}

pub fn total(counts: &BTreeMap<ModuleGroup, u64>) -> u64 {
    counts.values().sum()
}

/// Quad MACs over the sum of the four single-task baselines.
pub fn quad_ratio(cfg: &ModelConfig) -> f64 {
    let quad = total(&flops_count(cfg, FlopsMode::Quad));
    let base: u64 = Task::ALL.iter().map(|&t| total(&flops_count(cfg, FlopsMode::Single(t)))).sum();
    quad as f64 / base as f64
}

/// Share of a single-task forward spent in the shared extractor, for the
/// smallest of the four tasks.
pub fn min_extractor_share(cfg: &ModelConfig) -> f64 {
    Task::ALL
        .iter()
        .map(|&t| {
            let c = flops_count(cfg, FlopsMode::Single(t));
            let head = c.get(&t.head()).copied().unwrap_or(0);
            let all = total(&c);
            (all - head) as f64 / all as f64
        })
        .fold(f64::INFINITY, f64::min)
}

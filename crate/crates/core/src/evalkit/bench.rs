//! Multiply-accumulate counts and wall-clock latency of the shared quad
//! forward versus four single-task forwards.

use std::time::Instant;

use crate::autograd::Tape;
use crate::error::Result;
use crate::nets::flops::{flops_count, total, FlopsMode};
use crate::nets::model::{forward_vars, FrameInput};
use crate::nets::{Bound, ModelConfig, ParamStore, Task};
use crate::ops::{mac_counter, reset_mac_counter};

#[derive(Clone, Debug, PartialEq)]
pub struct EfficiencyRow {
    pub mode: String,
    pub macs_measured: u64,
    pub macs_analytic: u64,
    pub latency_mean_ms: f64,
    /// Present with at least two timed repeats.
    pub latency_sd_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EfficiencyReport {
    /// `quad`, one row per single task, then `baselines` (their sum run
    /// back to back).
    pub rows: Vec<EfficiencyRow>,
    pub mac_ratio_analytic: f64,
    pub mac_ratio_measured: f64,
    pub latency_ratio: f64,
}

impl EfficiencyReport {
    pub fn row(&self, mode: &str) -> Option<&EfficiencyRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,macs_measured,macs_analytic,latency_mean_ms,latency_sd_ms\n");
        for r in &self.rows {
            let sd = r.latency_sd_ms.map(|v| format!("{v:.4}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{:.4},{}\n",
                r.mode, r.macs_measured, r.macs_analytic, r.latency_mean_ms, sd
            ));
        }
        out.push_str(&format!("ratio,{:?},{:?},{:?},\n", self.mac_ratio_measured, self.mac_ratio_analytic, self.latency_ratio));
        out
    }
}

/// Runs one inference forward over `tasks` and returns its MAC count.
fn run(store: &ParamStore, cfg: &ModelConfig, input: &FrameInput, tasks: &[Task]) -> Result<u64> {
    reset_mac_counter();
    let tape = Tape::new();
    let b = Bound::frozen(&tape, store);
    forward_vars(&b, cfg, input, &[], tasks)?;
    Ok(mac_counter())
}

fn stats(ms: &[f64]) -> (f64, Option<f64>) {
    let n = ms.len() as f64;
    let mean = ms.iter().sum::<f64>() / n;
    let sd = (ms.len() >= 2).then(|| (ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, sd)
}

pub fn efficiency_benchmark(
    store: &ParamStore,
    cfg: &ModelConfig,
    input: &FrameInput,
    repeats: usize,
    warmup: usize,
) -> Result<EfficiencyReport> {
    let repeats = repeats.max(1);
    let timed = |tasks_list: &[&[Task]]| -> Result<Vec<f64>> {
        for _ in 0..warmup {
            for tasks in tasks_list {
                run(store, cfg, input, tasks)?;
            }
        }
        let mut ms = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t = Instant::now();
            for tasks in tasks_list {
                run(store, cfg, input, tasks)?;
            }
            ms.push(t.elapsed().as_secs_f64() * 1e3);
        }
        Ok(ms)
    };

    let mut rows = Vec::new();
    let quad_macs = run(store, cfg, input, &Task::ALL)?;
    let (mean, sd) = stats(&timed(&[&Task::ALL])?);
    rows.push(EfficiencyRow {
        mode: "quad".into(),
        macs_measured: quad_macs,
        macs_analytic: total(&flops_count(cfg, FlopsMode::Quad)),
        latency_mean_ms: mean,
        latency_sd_ms: sd,
    });
    let singles: Vec<[Task; 1]> = Task::ALL.iter().map(|&t| [t]).collect();
    let (mut base_measured, mut base_analytic) = (0, 0);
    for s in &singles {
        let measured = run(store, cfg, input, s)?;
        let analytic = total(&flops_count(cfg, FlopsMode::Single(s[0])));
        let (mean, sd) = stats(&timed(&[s])?);
        base_measured += measured;
        base_analytic += analytic;
        rows.push(EfficiencyRow {
            mode: s[0].name().into(),
            macs_measured: measured,
            macs_analytic: analytic,
            latency_mean_ms: mean,
            latency_sd_ms: sd,
        });
    }
    let all: Vec<&[Task]> = singles.iter().map(|s| s.as_slice()).collect();
    let (base_mean, base_sd) = stats(&timed(&all)?);
    rows.push(EfficiencyRow {
        mode: "baselines".into(),
        macs_measured: base_measured,
        macs_analytic: base_analytic,
        latency_mean_ms: base_mean,
        latency_sd_ms: base_sd,
    });
    Ok(EfficiencyReport {
        mac_ratio_analytic: rows[0].macs_analytic as f64 / base_analytic as f64,
        mac_ratio_measured: quad_macs as f64 / base_measured as f64,
        latency_ratio: rows[0].latency_mean_ms / base_mean,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::model::tests::{tiny_config, tiny_input};

    #[test]
    fn measured_macs_equal_analytic_counts() {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg).unwrap();
        let r = efficiency_benchmark(&store, &cfg, &tiny_input(&cfg, 0), 2, 1).unwrap();
        for row in &r.rows {
            assert_eq!(row.macs_measured, row.macs_analytic, "{}", row.mode);
            assert!(row.latency_sd_ms.is_some());
        }
        assert_eq!(r.mac_ratio_measured, r.mac_ratio_analytic);
        assert!(r.mac_ratio_analytic < 1.0);
        assert_eq!(r.to_csv().lines().count(), 1 + 6 + 1);
        let once = efficiency_benchmark(&store, &cfg, &tiny_input(&cfg, 0), 1, 0).unwrap();
        assert!(once.rows.iter().all(|r| r.latency_sd_ms.is_none()));
    }
}

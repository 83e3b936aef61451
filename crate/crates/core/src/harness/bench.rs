use serde::{Deserialize, Serialize};

use super::run::{run_workflow, RunOptions};
use super::workflow::WorkflowSpec;
use crate::engine::Strategy;
use crate::error::{RelayError, Result};
use crate::model::Model;
use crate::profiler::LayerProfile;
use crate::selector::SelectionThresholds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub agents: usize,
    pub prefix_len: usize,
    pub suffix_len: usize,
    pub seed: u64,
    pub thresholds: SelectionThresholds,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            agents: 5,
            prefix_len: 16,
            suffix_len: 8,
            seed: 0,
            thresholds: SelectionThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    /// Total upstream output tokens seen by the last agent.
    pub length: usize,
    pub strategy: String,
    pub mean_downstream_flops: f64,
    pub mean_downstream_full_equiv: f64,
    pub last_agent_flops: f64,
    pub mean_downstream_reuse_rate: f64,
    pub mean_prefill_ms: f64,
}

/// Splits `total` tokens over `k` upstream agents, earlier agents taking
/// the remainder, so the outputs sum to exactly `total`.
pub fn split_length(total: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| total / k + usize::from(i < total % k)).collect()
}

/// For each cumulative length, runs an `agents`-long chain under every
/// strategy and records downstream prefill cost. The last agent emits one
/// token; only its prefill matters.
pub fn bench_lengths(
    model: &Model,
    profile: &LayerProfile,
    lengths: &[usize],
    strategies: &[Strategy],
    config: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    if config.agents < 2 {
        return Err(RelayError::InvalidWorkflow("bench needs at least 2 agents".into()));
    }
    let upstream = config.agents - 1;
    let mut rows = Vec::new();
    for &length in lengths {
        if length < upstream {
            return Err(RelayError::InvalidParams(format!(
                "length {length} cannot be split over {upstream} upstream agents"
            )));
        }
        let mut outputs = split_length(length, upstream);
        outputs.push(1);
        for &strategy in strategies {
            let w = WorkflowSpec::chain_with_outputs(
                config.agents,
                config.prefix_len,
                config.suffix_len,
                &outputs,
                strategy,
                config.seed,
            );
            let options = RunOptions {
                strategy: Some(strategy),
                thresholds: config.thresholds,
                record_timings: true,
                oracle: false,
                ..Default::default()
            };
            let report = run_workflow(model, &w, profile, &options)?;
            let down = &report.agents[1..];
            let k = down.len() as f64;
            rows.push(BenchRow {
                length,
                strategy: strategy.label(),
                mean_downstream_flops: down.iter().map(|a| a.stats.flops_relay).sum::<f64>() / k,
                mean_downstream_full_equiv: down.iter().map(|a| a.stats.flops_full_equiv).sum::<f64>() / k,
                last_agent_flops: down.last().map_or(0.0, |a| a.stats.flops_relay),
                mean_downstream_reuse_rate: down.iter().map(|a| a.stats.reuse_rate).sum::<f64>() / k,
                mean_prefill_ms: down.iter().filter_map(|a| a.prefill_ms).sum::<f64>() / k,
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv<W: std::io::Write>(rows: &[BenchRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

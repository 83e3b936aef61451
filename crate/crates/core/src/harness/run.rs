use serde::{Deserialize, Serialize};

use super::workflow::{ResolvedSlot, WorkflowSpec};
use crate::engine::{prefill_pieces, EngineConfig, Piece, ReuseStats, Strategy};
use crate::error::{RelayError, Result};
use crate::model::{CaptureFlags, KvContext, Model};
use crate::profiler::LayerProfile;
use crate::relay_store::{generate_and_record, RelayCache};
use crate::selector::{SelectionSet, SelectionThresholds};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Replaces every agent's own strategy when set.
    pub strategy: Option<Strategy>,
    pub thresholds: SelectionThresholds,
    pub continue_selected_to_top: bool,
    pub record_timings: bool,
    /// Score each agent against a full-prefill run on the same prompt.
    pub oracle: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            strategy: None,
            thresholds: SelectionThresholds::default(),
            continue_selected_to_top: false,
            record_timings: false,
            oracle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub token_match_rate: f64,
    pub exact_sequence: bool,
    pub first_logit_max_abs: f64,
    /// `KL(full || strategy)` of the first-position next-token distributions.
    pub first_logit_kl: f64,
    pub oracle_tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub upstream: usize,
    pub base_position: usize,
    pub len: usize,
    pub reuse_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentReport {
    pub index: usize,
    pub name: String,
    pub strategy: String,
    pub prompt_len: usize,
    pub prompt_tokens: Vec<u32>,
    pub output_tokens: Vec<u32>,
    pub segments: Vec<SegmentRecord>,
    pub stats: ReuseStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<Agreement>,
    /// Wall time of the prompt prefill; only with `record_timings`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub workflow: WorkflowSpec,
    pub profile: (usize, usize, usize),
    pub options: RunOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub model_id: String,
    pub config: ConfigEcho,
    pub agents: Vec<AgentReport>,
    /// Sum over agents.
    pub totals: ReuseStats,
}

pub const CSV_COLUMNS: [&str; 16] = [
    "agent",
    "name",
    "strategy",
    "prompt_len",
    "segment_tokens",
    "total_segment_entries",
    "recomputed_entries",
    "reuse_rate",
    "selected_count",
    "flops_relay",
    "flops_full_equiv",
    "flops_selection_overhead",
    "token_match_rate",
    "exact_sequence",
    "first_logit_max_abs",
    "first_logit_kl",
];

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per agent; agreement columns are empty without an oracle.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_COLUMNS)?;
        for a in &self.agents {
            let seg_tokens: usize = a.segments.iter().map(|s| s.len).sum();
            let (rate, exact, max_abs, kl) = match &a.agreement {
                Some(g) => (
                    g.token_match_rate.to_string(),
                    g.exact_sequence.to_string(),
                    g.first_logit_max_abs.to_string(),
                    g.first_logit_kl.to_string(),
                ),
                None => Default::default(),
            };
            out.write_record([
                a.index.to_string(),
                a.name.clone(),
                a.strategy.clone(),
                a.prompt_len.to_string(),
                seg_tokens.to_string(),
                a.stats.total_segment_entries.to_string(),
                a.stats.recomputed_entries.to_string(),
                a.stats.reuse_rate.to_string(),
                a.stats.selected_count.to_string(),
                a.stats.flops_relay.to_string(),
                a.stats.flops_full_equiv.to_string(),
                a.stats.flops_selection_overhead.to_string(),
                rate,
                exact,
                max_abs,
                kl,
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn log_softmax(x: &[f32]) -> Vec<f64> {
    let m = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = m + x.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
    x.iter().map(|&v| v as f64 - lse).collect()
}

/// `KL(p || q)` between the softmax distributions of two logit vectors.
pub fn logit_kl(p_logits: &[f32], q_logits: &[f32]) -> f64 {
    let (lp, lq) = (log_softmax(p_logits), log_softmax(q_logits));
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>().max(0.0)
}

pub fn agreement(oracle_first: &[f32], oracle_tokens: &[u32], first: &[f32], tokens: &[u32]) -> Agreement {
    let matches = oracle_tokens.iter().zip(tokens).filter(|(a, b)| a == b).count();
    let denom = oracle_tokens.len().max(tokens.len()).max(1);
    Agreement {
        token_match_rate: matches as f64 / denom as f64,
        exact_sequence: oracle_tokens == tokens,
        first_logit_max_abs: oracle_first
            .iter()
            .zip(first)
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max),
        first_logit_kl: logit_kl(oracle_first, first),
        oracle_tokens: oracle_tokens.to_vec(),
    }
}

struct AgentOutput {
    tokens: Vec<u32>,
    cache: RelayCache,
}

/// Greedy full-prefill reference: first logits and continuation.
pub fn full_oracle(model: &Model, prompt: &[u32], max_new_tokens: usize) -> Result<(Vec<f32>, Vec<u32>)> {
    let mut ctx = KvContext::new(model.spec());
    let out = model.prefill(prompt, &mut ctx, 0, &CaptureFlags::none())?;
    let first = out.last_logits().to_vec();
    let generation = model.generate(&mut ctx, &first, max_new_tokens, &CaptureFlags::none())?;
    Ok((first, generation.tokens))
}

#[allow(clippy::too_many_arguments)]
fn run_agent(
    model: &Model,
    index: usize,
    spec: &WorkflowSpec,
    slots: &[ResolvedSlot],
    upstream: &[AgentOutput],
    profile: &LayerProfile,
    options: &RunOptions,
) -> Result<(AgentReport, AgentOutput)> {
    let agent = &spec.agents[index];
    let strategy = options.strategy.unwrap_or(agent.strategy);
    let mut prompt = Vec::new();
    let mut pieces = Vec::with_capacity(slots.len());
    let mut upstream_order = Vec::new();
    for slot in slots {
        match slot {
            ResolvedSlot::Tokens(t) => {
                prompt.extend(t);
                pieces.push(Piece::Fresh(t));
            }
            ResolvedSlot::Upstream(k) => {
                prompt.extend(&upstream[*k].tokens);
                pieces.push(Piece::Relay(&upstream[*k].cache));
                upstream_order.push(*k);
            }
        }
    }
    let config = EngineConfig {
        strategy,
        thresholds: options.thresholds,
        continue_selected_to_top: options.continue_selected_to_top,
        record_timings: options.record_timings,
    };
    let max_new = agent.max_new_tokens;
    let run = || -> Result<_> {
        let t0 = std::time::Instant::now();
        let out = prefill_pieces(model, &pieces, profile, &config)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        let first = out.last_logits.clone();
        let mut ctx = out.context.kv.clone();
        let (generation, cache) = generate_and_record(model, &mut ctx, &first, max_new, profile.l_start)?;
        Ok((out, ms, first, generation.tokens, cache))
    };
    let oracle = || -> Result<Option<(Vec<f32>, Vec<u32>)>> {
        if options.oracle {
            full_oracle(model, &prompt, max_new).map(Some)
        } else {
            Ok(None)
        }
    };
    let (ran, oracle) = rayon::join(run, oracle);
    let (out, ms, first, tokens, cache) = ran?;
    let agreement = oracle?.map(|(of, ot)| agreement(&of, &ot, &first, &tokens));
    let segments = out
        .segments
        .iter()
        .zip(&upstream_order)
        .map(|(s, &k)| SegmentRecord {
            upstream: k,
            base_position: s.base_position,
            len: s.len,
            reuse_rate: s.stats.reuse_rate,
            selection: s.selection.clone(),
        })
        .collect();
    let report = AgentReport {
        index,
        name: agent.name.clone(),
        strategy: if upstream_order.is_empty() {
            "FULL".into()
        } else {
            strategy.label()
        },
        prompt_len: prompt.len(),
        prompt_tokens: prompt,
        output_tokens: tokens.clone(),
        segments,
        stats: out.stats,
        agreement,
        prefill_ms: options.record_timings.then_some(ms),
    };
    Ok((report, AgentOutput { tokens, cache }))
}

/// Runs the agents in order; each agent's output (and its decode-time relay
/// cache) feeds later agents that name it in their template.
pub fn run_workflow(model: &Model, spec: &WorkflowSpec, profile: &LayerProfile, options: &RunOptions) -> Result<RunReport> {
    profile.check_model(model.spec().num_layers)?;
    options.thresholds.validate()?;
    if let Some(s) = options.strategy {
        s.validate()?;
    }
    let resolved = spec.resolve(model.spec().vocab_size)?;
    let mut outputs: Vec<AgentOutput> = Vec::with_capacity(resolved.len());
    let mut agents = Vec::with_capacity(resolved.len());
    for (i, slots) in resolved.iter().enumerate() {
        let (report, output) =
            run_agent(model, i, spec, slots, &outputs, profile, options).map_err(|e| e.in_agent(i))?;
        agents.push(report);
        outputs.push(output);
    }
    let totals = ReuseStats::combine(agents.iter().map(|a| &a.stats));
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model_id: model.model_id(),
        config: ConfigEcho {
            workflow: spec.clone(),
            profile: profile.triple(),
            options: *options,
        },
        agents,
        totals,
    };
    check_report(&report)?;
    Ok(report)
}

/// Agent costs must add up to the pipeline total.
fn check_report(report: &RunReport) -> Result<()> {
    let sum: f64 = report.agents.iter().map(|a| a.stats.flops_relay).sum();
    if (sum - report.totals.flops_relay).abs() > 1e-9 * sum.max(1.0) {
        return Err(RelayError::InvalidParams("report totals do not add up".into()));
    }
    Ok(())
}

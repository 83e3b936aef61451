use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::workflow::{ResolvedSlot, WorkflowSpec};
use crate::error::{RelayError, Result};
use crate::metrics::{LayerCurve, TwoStageInstance};
use crate::model::Model;
use crate::profiler::{profile, profile_from_curves, LayerProfile, ProfilerParams};

pub const CALIBRATION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationSource {
    /// Random summarize-then-answer pairs of the given lengths. Both
    /// stages open with the same `shared_prefix_len` tokens (a common
    /// system block drawn once per spec).
    TwoStage {
        #[serde(default)]
        shared_prefix_len: usize,
        stage1_prompt_len: usize,
        segment_len: usize,
        stage2_prefix_len: usize,
        #[serde(default)]
        stage2_suffix_len: usize,
    },
    /// First two agents of a workflow; agent 1 must quote agent 0 once.
    /// Instance `i` reseeds the workflow with `seed + i`.
    Workflow(WorkflowSpec),
    /// Precomputed curves, used as-is.
    Planted { curves: Vec<LayerCurve> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSpec {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub instances: usize,
    pub source: CalibrationSource,
}

fn one() -> usize {
    1
}

/// Twenty two-stage instances sharing a 16-token system block, with
/// 64-token segments.
impl Default for CalibrationSpec {
    fn default() -> Self {
        Self::two_stage(100, 20, 16, 16, 64, 8, 8)
    }
}

impl CalibrationSpec {
    pub fn two_stage(
        seed: u64,
        instances: usize,
        shared: usize,
        stage1: usize,
        segment: usize,
        prefix: usize,
        suffix: usize,
    ) -> Self {
        Self {
            schema_version: CALIBRATION_SCHEMA_VERSION,
            seed,
            instances,
            source: CalibrationSource::TwoStage {
                shared_prefix_len: shared,
                stage1_prompt_len: stage1,
                segment_len: segment,
                stage2_prefix_len: prefix,
                stage2_suffix_len: suffix,
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: CalibrationSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CALIBRATION_SCHEMA_VERSION {
            return Err(RelayError::VersionMismatch {
                found: self.schema_version,
                expected: CALIBRATION_SCHEMA_VERSION,
            });
        }
        let bad = |m: &str| Err(RelayError::InvalidWorkflow(m.to_string()));
        match &self.source {
            CalibrationSource::Planted { curves } if curves.is_empty() => bad("planted source has no curves"),
            CalibrationSource::Planted { .. } => Ok(()),
            _ if self.instances == 0 => bad("calibration needs at least one instance"),
            CalibrationSource::TwoStage {
                stage1_prompt_len,
                segment_len,
                ..
            } if *stage1_prompt_len == 0 || *segment_len == 0 => bad("stage-1 prompt and segment must be non-empty"),
            CalibrationSource::TwoStage { .. } => Ok(()),
            CalibrationSource::Workflow(w) => w.validate(),
        }
    }

    /// Materialises the instances; planted sources have none.
    pub fn instances(&self, vocab_size: usize) -> Result<Vec<TwoStageInstance>> {
        self.validate()?;
        let vocab = vocab_size as u32;
        match &self.source {
            CalibrationSource::Planted { .. } => Ok(Vec::new()),
            CalibrationSource::TwoStage {
                shared_prefix_len,
                stage1_prompt_len,
                segment_len,
                stage2_prefix_len,
                stage2_suffix_len,
            } => {
                let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<u32> {
                    (0..n).map(|_| rng.random_range(0..vocab)).collect()
                };
                let shared = draw(&mut ChaCha8Rng::seed_from_u64(!self.seed), *shared_prefix_len);
                Ok((0..self.instances as u64)
                    .map(|i| {
                        let seed = self.seed.wrapping_add(i);
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        let mut stage1_prompt = shared.clone();
                        stage1_prompt.extend(draw(&mut rng, *stage1_prompt_len));
                        let mut stage2_prefix = shared.clone();
                        stage2_prefix.extend(draw(&mut rng, *stage2_prefix_len));
                        TwoStageInstance {
                            stage1_prompt,
                            segment_len: *segment_len,
                            stage2_prefix,
                            stage2_suffix: draw(&mut rng, *stage2_suffix_len),
                            seed,
                        }
                    })
                    .collect())
            }
            CalibrationSource::Workflow(w) => (0..self.instances as u64)
                .map(|i| {
                    let mut w = w.clone();
                    w.seed = w.seed.wrapping_add(i);
                    workflow_instance(&w, vocab_size)
                })
                .collect(),
        }
    }
}

fn workflow_instance(w: &WorkflowSpec, vocab_size: usize) -> Result<TwoStageInstance> {
    let resolved = w.resolve(vocab_size)?;
    let bad = |m: &str| RelayError::InvalidWorkflow(format!("calibration workflow: {m}"));
    let mut stage1 = Vec::new();
    for slot in &resolved[0] {
        match slot {
            ResolvedSlot::Tokens(t) => stage1.extend(t),
            ResolvedSlot::Upstream(_) => return Err(bad("agent 0 cannot quote upstream output")),
        }
    }
    let (mut prefix, mut suffix) = (Vec::new(), Vec::new());
    let mut seen = false;
    for slot in &resolved[1] {
        match slot {
            ResolvedSlot::Tokens(t) if seen => suffix.extend(t),
            ResolvedSlot::Tokens(t) => prefix.extend(t),
            ResolvedSlot::Upstream(0) if !seen => seen = true,
            ResolvedSlot::Upstream(_) => return Err(bad("agent 1 must quote agent 0 exactly once")),
        }
    }
    if !seen {
        return Err(bad("agent 1 does not quote agent 0"));
    }
    if stage1.is_empty() {
        return Err(bad("agent 0 prompt is empty"));
    }
    Ok(TwoStageInstance {
        stage1_prompt: stage1,
        segment_len: w.agents[0].max_new_tokens,
        stage2_prefix: prefix,
        stage2_suffix: suffix,
        seed: w.seed,
    })
}

/// Profiles `model` from a calibration spec. Planted curves bypass the model
/// except for the layer-count check.
pub fn profile_from_calibration(model: &Model, calib: &CalibrationSpec, params: &ProfilerParams) -> Result<LayerProfile> {
    match &calib.source {
        CalibrationSource::Planted { curves } => {
            calib.validate()?;
            let p = profile_from_curves(curves, params, &model.model_id())?;
            p.check_model(model.spec().num_layers)?;
            Ok(p)
        }
        _ => profile(model, &calib.instances(model.spec().vocab_size)?, params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Strategy;

    #[test]
    fn two_stage_instances_are_seeded() {
        let c = CalibrationSpec::two_stage(5, 3, 4, 8, 16, 6, 2);
        let a = c.instances(64).unwrap();
        assert_eq!(a[0].stage1_prompt[..4], a[1].stage2_prefix[..4]);
        assert_eq!(a[0].stage1_prompt.len(), 12);
        assert_eq!(a.len(), 3);
        assert_eq!(a, c.instances(64).unwrap());
        assert_ne!(a[0].stage1_prompt, a[1].stage1_prompt);
        assert_eq!(a[2].seed, 7);
        assert_eq!(a[0].stage2_suffix.len(), 2);
    }

    #[test]
    fn workflow_source_splits_around_upstream() {
        let w = WorkflowSpec::chain(2, 4, 3, 10, Strategy::Relay, 1);
        let c = CalibrationSpec {
            schema_version: 1,
            seed: 0,
            instances: 2,
            source: CalibrationSource::Workflow(w),
        };
        let inst = c.instances(64).unwrap();
        assert_eq!(inst[0].stage1_prompt.len(), 7);
        assert_eq!(inst[0].stage2_prefix.len(), 4);
        assert_eq!(inst[0].stage2_suffix.len(), 3);
        assert_eq!(inst[0].segment_len, 10);
        assert_ne!(inst[0], inst[1]);
    }

    #[test]
    fn json_forms() {
        let text = r#"{"schema_version": 1, "source": {"planted": {"curves": [{"s": [1.0, 0.9], "rho": [null, 0.5]}]}}}"#;
        let c = CalibrationSpec::from_json(text).unwrap();
        assert!(matches!(c.source, CalibrationSource::Planted { .. }));
        let text = r#"{"schema_version": 1, "seed": 2, "instances": 4,
            "source": {"two_stage": {"stage1_prompt_len": 8, "segment_len": 32, "stage2_prefix_len": 6}}}"#;
        let c = CalibrationSpec::from_json(text).unwrap();
        assert_eq!(c.instances(64).unwrap().len(), 4);
        assert!(CalibrationSpec::from_json(r#"{"schema_version": 2, "source": {"planted": {"curves": []}}}"#).is_err());
    }
}

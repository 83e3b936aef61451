use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SegmentKv;
use crate::error::{RelayError, Result};
use crate::model::{CaptureFlags, KvContext, Model};
use crate::relay_store::{generate_and_record, RelayCache};
use crate::tensor::{rope_rotate_heads, Tensor};

/// A summarize-then-answer pair: stage 1 generates `segment_len` tokens
/// after `stage1_prompt`; stage 2 places them after `stage2_prefix`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageInstance {
    pub stage1_prompt: Vec<u32>,
    pub segment_len: usize,
    pub stage2_prefix: Vec<u32>,
    pub stage2_suffix: Vec<u32>,
    pub seed: u64,
}

/// Instance with its stage-1 segment generated and recorded.
#[derive(Debug, Clone)]
pub struct PreparedInstance {
    pub instance: TwoStageInstance,
    pub segment: Vec<u32>,
    pub cache: RelayCache,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ComparisonSetting {
    /// KV captured while decoding the segment under the stage-1 prompt.
    Decoding,
    /// Full prefill with the segment swapped for uniformly random tokens.
    Random,
    /// Full prefill of the segment alone from position 0.
    Independent,
}

impl ComparisonSetting {
    pub const ALL: [ComparisonSetting; 3] = [Self::Decoding, Self::Random, Self::Independent];

    pub fn name(self) -> &'static str {
        match self {
            Self::Decoding => "DECODING",
            Self::Random => "RANDOM",
            Self::Independent => "INDEPENDENT",
        }
    }
}

pub fn prepare_instance(
    model: &Model,
    instance: &TwoStageInstance,
    hidden_layer: usize,
) -> Result<PreparedInstance> {
    if instance.segment_len == 0 {
        return Err(RelayError::EmptySegment);
    }
    let mut ctx = KvContext::new(model.spec());
    let out = model.prefill(&instance.stage1_prompt, &mut ctx, 0, &CaptureFlags::none())?;
    let (generation, cache) =
        generate_and_record(model, &mut ctx, out.last_logits(), instance.segment_len, hidden_layer)?;
    Ok(PreparedInstance {
        instance: instance.clone(),
        segment: generation.tokens,
        cache,
    })
}

/// Full prefill of `prefix + segment`; returns the segment rows.
pub(crate) fn full_segment_kv(model: &Model, prefix: &[u32], segment: &[u32]) -> Result<SegmentKv> {
    let mut tokens = prefix.to_vec();
    tokens.extend_from_slice(segment);
    let mut ctx = KvContext::new(model.spec());
    model.prefill(&tokens, &mut ctx, 0, &CaptureFlags::none())?;
    let (p, n) = (prefix.len(), segment.len());
    Ok(SegmentKv {
        keys: (0..ctx.num_layers()).map(|l| ctx.layer(l).keys_slice(p, n)).collect(),
        values: (0..ctx.num_layers()).map(|l| ctx.layer(l).values_slice(p, n)).collect(),
    })
}

/// Reuse side for the RANDOM setting with an explicit replacement sequence.
pub fn build_with_replacement(
    model: &Model,
    prepared: &PreparedInstance,
    replacement: &[u32],
) -> Result<SegmentKv> {
    if replacement.len() != prepared.segment.len() {
        return Err(RelayError::LengthMismatch {
            op: "segment replacement",
            left: replacement.len(),
            right: prepared.segment.len(),
        });
    }
    full_segment_kv(model, &prepared.instance.stage2_prefix, replacement)
}

fn random_tokens(model: &Model, n: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_7a4d_0000);
    let vocab = model.spec().vocab_size as u32;
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Returns `(reuse side, full-prefill reference)` for one instance. Keys on
/// both sides are rotated for the stage-2 placement.
pub fn build_comparison_setting(
    model: &Model,
    setting: ComparisonSetting,
    prepared: &PreparedInstance,
) -> Result<(SegmentKv, SegmentKv)> {
    let prefix = &prepared.instance.stage2_prefix;
    let base = prefix.len();
    let full = full_segment_kv(model, prefix, &prepared.segment)?;
    let reuse = match setting {
        ComparisonSetting::Decoding => {
            let r = prepared.cache.realign(base)?;
            SegmentKv {
                keys: r.keys,
                values: r.values.to_vec(),
            }
        }
        ComparisonSetting::Random => {
            let tokens = random_tokens(model, prepared.segment.len(), prepared.instance.seed);
            build_with_replacement(model, prepared, &tokens)?
        }
        ComparisonSetting::Independent => {
            let mut ctx = KvContext::new(model.spec());
            let flags = CaptureFlags {
                kv: true,
                ..Default::default()
            };
            let out = model.prefill(&prepared.segment, &mut ctx, 0, &flags)?;
            let spec = model.spec();
            let keys = out
                .trace
                .keys_pre_rope
                .iter()
                .map(|k| {
                    let mut k: Tensor = k.clone();
                    for j in 0..k.rows() {
                        rope_rotate_heads(k.row_mut(j), spec.d_head, (base + j) as i64, spec.theta_base);
                    }
                    k
                })
                .collect();
            SegmentKv {
                keys,
                values: out.trace.values,
            }
        }
    };
    Ok((reuse, full))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{layer_similarity, token_deviation};
    use crate::model::ModelSpec;

    fn model() -> Model {
        let spec = ModelSpec {
            num_layers: 6,
            d_model: 32,
            num_heads: 4,
            num_kv_heads: 4,
            d_head: 8,
            d_ff: 48,
            vocab_size: 64,
            theta_base: 10000.0,
            max_positions: 256,
            norm_eps: 1e-5,
        };
        Model::random(spec, 17).unwrap()
    }

    fn instance(prefix: Vec<u32>) -> TwoStageInstance {
        TwoStageInstance {
            stage1_prompt: vec![3, 9, 27, 17, 51, 25],
            segment_len: 12,
            stage2_prefix: prefix,
            stage2_suffix: vec![1, 2],
            seed: 5,
        }
    }

    #[test]
    fn decoding_with_unchanged_prefix_has_zero_deviation() {
        let m = model();
        let inst = instance(vec![3, 9, 27, 17, 51, 25]);
        let prepared = prepare_instance(&m, &inst, 0).unwrap();
        let (reuse, full) = build_comparison_setting(&m, ComparisonSetting::Decoding, &prepared).unwrap();
        let dev = token_deviation(&reuse, &full, 8).unwrap();
        assert!(dev.value_dev.iter().all(|&d| d == 0.0));
        assert_eq!(layer_similarity(&dev).unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn random_setting_is_reproducible() {
        let m = model();
        let prepared = prepare_instance(&m, &instance(vec![7, 7, 1]), 0).unwrap();
        let a = build_comparison_setting(&m, ComparisonSetting::Random, &prepared).unwrap();
        let b = build_comparison_setting(&m, ComparisonSetting::Random, &prepared).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn replacement_length_checked() {
        let m = model();
        let prepared = prepare_instance(&m, &instance(vec![7, 7, 1]), 0).unwrap();
        assert!(matches!(
            build_with_replacement(&m, &prepared, &[1, 2, 3]),
            Err(RelayError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn independent_matches_at_layer_zero() {
        // Layer-0 values depend only on the token, so the settings agree there.
        let m = model();
        let prepared = prepare_instance(&m, &instance(vec![7, 7, 1]), 0).unwrap();
        let (reuse, full) = build_comparison_setting(&m, ComparisonSetting::Independent, &prepared).unwrap();
        assert_eq!(reuse.values[0], full.values[0]);
        assert_eq!(reuse.keys[0], full.keys[0]);
    }
}

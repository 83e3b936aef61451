//! Decode-time capture of a generated segment and its realignment to new
//! absolute positions.
//!
//! Keys are kept *before* rotary embedding so they can be re-rotated for any
//! placement; values carry no positional rotation and are stored as
//! produced. The residual stream entering `hidden_layer` is snapshotted so a
//! later relay can resume computation there instead of at the embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{RelayError, Result};
use crate::format;
use crate::model::{CaptureFlags, Generation, KvContext, Model, StepTrace};
use crate::tensor::{rope_rotate_heads, Tensor};

const RELAY_FORMAT: &str = "relaycache.relay";
const RELAY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub head_dim: usize,
    pub theta_base: f64,
    pub max_positions: usize,
}

impl RopeParams {
    pub fn of(model: &Model) -> Self {
        let s = model.spec();
        Self {
            head_dim: s.d_head,
            theta_base: s.theta_base,
            max_positions: s.max_positions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentSpan {
    /// Absolute position of the first segment token.
    pub start: usize,
    pub len: usize,
}

impl SegmentSpan {
    pub fn contains(&self, position: usize) -> bool {
        position >= self.start && position < self.start + self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecordOptions {
    /// Count the attention a token pays to itself at its own step.
    pub include_self_attention: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelayCache {
    pub segment_token_ids: Vec<u32>,
    pub source_base_position: usize,
    /// Per layer `[N x kv_dim]`, pre-rotation.
    pub keys_pre_rope: Vec<Tensor>,
    /// Per layer `[N x kv_dim]`.
    pub values: Vec<Tensor>,
    /// Layer whose residual input was snapshotted.
    pub hidden_layer: usize,
    /// `[N x d_model]`
    pub hidden_snapshot: Tensor,
    /// Attention mass each segment token received from later decode steps.
    pub influence: Vec<f32>,
    pub decode_steps_observed: usize,
    pub rope: RopeParams,
}

/// Keys rotated for a placement at `base_position`; values borrowed as-is.
#[derive(Debug, Clone)]
pub struct RealignedCache<'a> {
    pub base_position: usize,
    pub keys: Vec<Tensor>,
    pub values: &'a [Tensor],
}

/// Builds a [`RelayCache`] from the traces of the decode steps that produced
/// `tokens` at `span`.
///
/// Influence of segment token `j` sums attention weights over every traced
/// query row at a position after `j`, across all layers and heads.
pub fn record_from_decode(
    traces: &[StepTrace],
    span: SegmentSpan,
    tokens: &[u32],
    hidden_layer: usize,
    rope: RopeParams,
    options: RecordOptions,
) -> Result<RelayCache> {
    let n = span.len;
    if n == 0 {
        return Err(RelayError::EmptySegment);
    }
    if tokens.len() != n {
        return Err(RelayError::LengthMismatch {
            op: "record_from_decode tokens",
            left: tokens.len(),
            right: n,
        });
    }
    let first = traces.first().ok_or(RelayError::MissingCapture("traces"))?;
    let num_layers = first.hidden.len();
    if hidden_layer >= num_layers {
        return Err(RelayError::InvalidParams(format!(
            "hidden_layer {hidden_layer} outside {num_layers} layers"
        )));
    }

    let mut keys: Vec<Vec<Option<Vec<f32>>>> = vec![vec![None; n]; num_layers];
    let mut values: Vec<Vec<Option<Vec<f32>>>> = vec![vec![None; n]; num_layers];
    let mut hidden: Vec<Option<Vec<f32>>> = vec![None; n];
    let mut influence = vec![0.0f64; n];

    for tr in traces {
        let touches_segment = (0..tr.rows).any(|r| span.contains(tr.base_position + r));
        if touches_segment {
            if tr.keys_pre_rope.len() != num_layers {
                return Err(RelayError::MissingCapture("keys_pre_rope"));
            }
            if tr.values.len() != num_layers {
                return Err(RelayError::MissingCapture("values"));
            }
            let snap = tr.hidden[hidden_layer]
                .as_ref()
                .ok_or(RelayError::MissingCapture("hidden"))?;
            for r in 0..tr.rows {
                let pos = tr.base_position + r;
                if !span.contains(pos) {
                    continue;
                }
                let j = pos - span.start;
                for l in 0..num_layers {
                    keys[l][j] = Some(tr.keys_pre_rope[l].row(r).to_vec());
                    values[l][j] = Some(tr.values[l].row(r).to_vec());
                }
                hidden[j] = Some(snap.row(r).to_vec());
            }
        }

        let attends_segment = (0..tr.rows).any(|r| tr.base_position + r > span.start)
            || (options.include_self_attention && touches_segment);
        if !attends_segment {
            continue;
        }
        if tr.attention.len() != num_layers {
            return Err(RelayError::MissingCapture("attention"));
        }
        for r in 0..tr.rows {
            let t = tr.base_position + r;
            let last = if options.include_self_attention { t + 1 } else { t };
            let hi = last.min(span.start + n);
            for pos in span.start..hi {
                let mut acc = 0.0f64;
                for ac in &tr.attention {
                    if pos < ac.from {
                        return Err(RelayError::MissingCapture("attention"));
                    }
                    for h in 0..ac.heads {
                        acc += ac.weight(r, h, pos) as f64;
                    }
                }
                influence[pos - span.start] += acc;
            }
        }
    }

    let collect = |rows: Vec<Option<Vec<f32>>>, what: &'static str| -> Result<Tensor> {
        let width = rows
            .iter()
            .flatten()
            .map(Vec::len)
            .next()
            .ok_or(RelayError::MissingCapture(what))?;
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            data.extend(r.ok_or(RelayError::MissingCapture(what))?);
        }
        Tensor::from_rows(n, width, data)
    };
    let keys_pre_rope = keys
        .into_iter()
        .map(|rows| collect(rows, "keys_pre_rope"))
        .collect::<Result<Vec<_>>>()?;
    let values = values
        .into_iter()
        .map(|rows| collect(rows, "values"))
        .collect::<Result<Vec<_>>>()?;
    let hidden_snapshot = collect(hidden, "hidden")?;

    Ok(RelayCache {
        segment_token_ids: tokens.to_vec(),
        source_base_position: span.start,
        keys_pre_rope,
        values,
        hidden_layer,
        hidden_snapshot,
        influence: influence.into_iter().map(|v| v as f32).collect(),
        decode_steps_observed: traces.len(),
        rope,
    })
}

/// Greedy generation of `n` tokens on top of `ctx`, recording the result as
/// a relay cache with the hidden snapshot taken at `hidden_layer`.
pub fn generate_and_record(
    model: &Model,
    ctx: &mut KvContext,
    first_logits: &[f32],
    n: usize,
    hidden_layer: usize,
) -> Result<(Generation, RelayCache)> {
    let start = ctx.len();
    let flags = CaptureFlags::for_relay(start, hidden_layer);
    let generation = model.generate(ctx, first_logits, n, &flags)?;
    let cache = record_from_decode(
        &generation.traces,
        SegmentSpan { start, len: n },
        &generation.tokens,
        hidden_layer,
        RopeParams::of(model),
        RecordOptions::default(),
    )?;
    Ok((generation, cache))
}

/// Feeds a fixed token sequence through decode steps and records it, as if
/// the model had generated it.
pub fn force_decode_and_record(
    model: &Model,
    ctx: &mut KvContext,
    tokens: &[u32],
    hidden_layer: usize,
) -> Result<RelayCache> {
    let start = ctx.len();
    let flags = CaptureFlags::for_relay(start, hidden_layer);
    let mut traces = Vec::with_capacity(tokens.len());
    for &t in tokens {
        traces.push(model.decode_step(t, ctx, ctx.len(), &flags)?.trace);
    }
    record_from_decode(
        &traces,
        SegmentSpan {
            start,
            len: tokens.len(),
        },
        tokens,
        hidden_layer,
        RopeParams::of(model),
        RecordOptions::default(),
    )
}

impl RelayCache {
    pub fn len(&self) -> usize {
        self.segment_token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_token_ids.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.values.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(RelayError::EmptySegment);
        }
        let bad = |m: String| Err(RelayError::Format(m));
        if self.keys_pre_rope.len() != self.values.len() || self.values.is_empty() {
            return bad("per-layer key/value counts differ".into());
        }
        for (k, v) in self.keys_pre_rope.iter().zip(&self.values) {
            if k.rows() != n || v.rows() != n || k.shape() != v.shape() {
                return bad(format!("per-layer tensor {:?} does not cover {n} rows", k.shape()));
            }
            if k.cols() % self.rope.head_dim != 0 {
                return bad("key width is not a multiple of head_dim".into());
            }
        }
        if self.hidden_snapshot.rows() != n {
            return bad("hidden snapshot row count differs from segment".into());
        }
        if self.hidden_layer >= self.num_layers() {
            return bad(format!("hidden_layer {} out of range", self.hidden_layer));
        }
        if self.influence.len() != n || self.influence.iter().any(|&v| !(v >= 0.0)) {
            return bad("influence must hold one nonnegative score per token".into());
        }
        Ok(())
    }

    /// Rotates every stored key for placement at `new_base_position`.
    /// The cache itself is untouched, so realigning is repeatable.
    pub fn realign(&self, new_base_position: usize) -> Result<RealignedCache<'_>> {
        let end = new_base_position + self.len();
        if end > self.rope.max_positions {
            return Err(RelayError::PositionOverflow {
                position: end - 1,
                max: self.rope.max_positions,
            });
        }
        let keys = self
            .keys_pre_rope
            .iter()
            .map(|k| {
                let mut k = k.clone();
                for j in 0..k.rows() {
                    rope_rotate_heads(
                        k.row_mut(j),
                        self.rope.head_dim,
                        (new_base_position + j) as i64,
                        self.rope.theta_base,
                    );
                }
                k
            })
            .collect();
        Ok(RealignedCache {
            base_position: new_base_position,
            keys,
            values: &self.values,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let meta = serde_json::json!({
            "segment_token_ids": self.segment_token_ids,
            "source_base_position": self.source_base_position,
            "hidden_layer": self.hidden_layer,
            "decode_steps_observed": self.decode_steps_observed,
            "rope": self.rope,
        });
        let influence = Tensor::new(vec![self.len()], self.influence.clone())?;
        let mut named: Vec<(String, &Tensor)> = Vec::new();
        for (l, k) in self.keys_pre_rope.iter().enumerate() {
            named.push((format!("keys_pre_rope.{l}"), k));
        }
        for (l, v) in self.values.iter().enumerate() {
            named.push((format!("values.{l}"), v));
        }
        named.push(("hidden_snapshot".into(), &self.hidden_snapshot));
        named.push(("influence".into(), &influence));
        format::encode(RELAY_FORMAT, RELAY_VERSION, meta, &named, true)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            segment_token_ids: Vec<u32>,
            source_base_position: usize,
            hidden_layer: usize,
            decode_steps_observed: usize,
            rope: RopeParams,
        }
        let mut decoded = format::decode(bytes, RELAY_FORMAT, RELAY_VERSION, true)?;
        let meta: Meta = serde_json::from_value(decoded.manifest.meta.clone())?;
        let layers = decoded
            .manifest
            .tensors
            .iter()
            .filter(|r| r.name.starts_with("values."))
            .count();
        let mut keys_pre_rope = Vec::with_capacity(layers);
        let mut values = Vec::with_capacity(layers);
        for l in 0..layers {
            keys_pre_rope.push(decoded.take(&format!("keys_pre_rope.{l}"))?);
            values.push(decoded.take(&format!("values.{l}"))?);
        }
        let cache = RelayCache {
            segment_token_ids: meta.segment_token_ids,
            source_base_position: meta.source_base_position,
            keys_pre_rope,
            values,
            hidden_layer: meta.hidden_layer,
            hidden_snapshot: decoded.take("hidden_snapshot")?,
            influence: decoded.take("influence")?.into_data(),
            decode_steps_observed: meta.decode_steps_observed,
            rope: meta.rope,
        };
        cache.validate()?;
        Ok(cache)
    }
}

//! Relay prefill: builds a KV context for `prefix + segment(s) + suffix`
//! where segments come from upstream decode caches.
//!
//! A prompt is a list of [`Piece`]s processed left to right in one causal
//! pass. Fresh pieces are prefilled normally; relay pieces are placed from a
//! [`RelayCache`] and partially recomputed according to the [`Strategy`]:
//!
//! * `Relay`: realigned cache everywhere, then every segment row is
//!   recomputed from the hidden snapshot over `l_start..=l_det`, a token set
//!   is chosen at `l_det`, and only those rows continue through `l_end`.
//! * `Full`: the segment tokens are prefilled like any other text.
//! * `Zero`: realigned cache at every layer, nothing recomputed.
//! * `Blend`: every row is recomputed at layers 0 and 1, then the rows whose
//!   layer-1 values moved the most (an `alpha` fraction) run to the top.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{RelayError, Result};
use crate::metrics::value_deviation;
use crate::model::{CaptureFlags, KvContext, Model, ModelSpec};
use crate::profiler::LayerProfile;
use crate::relay_store::{RealignedCache, RelayCache};
use crate::selector::{select, SelectionSet, SelectionTag, SelectionThresholds};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Full,
    Zero,
    Relay,
    Blend { alpha: f64 },
}

impl Strategy {
    pub fn label(&self) -> String {
        match self {
            Strategy::Full => "FULL".into(),
            Strategy::Zero => "ZERO".into(),
            Strategy::Relay => "RELAY".into(),
            Strategy::Blend { alpha } => format!("BLEND({alpha})"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Strategy::Blend { alpha } = *self {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(RelayError::InvalidParams(format!("blend alpha must lie in (0, 1], got {alpha}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub strategy: Strategy,
    pub thresholds: SelectionThresholds,
    /// Keep recomputing selected rows above `l_end` (ablation switch).
    #[serde(default)]
    pub continue_selected_to_top: bool,
    /// Attach wall-clock phase timings to the stats.
    #[serde(default)]
    pub record_timings: bool,
}

impl EngineConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            thresholds: SelectionThresholds::default(),
            continue_selected_to_top: false,
            record_timings: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Piece<'a> {
    Fresh(&'a [u32]),
    Relay(&'a RelayCache),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Origin {
    Reused,
    Recomputed,
}

/// Origin of every `(layer, segment row)` cell of one placed segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOrigins {
    pub base_position: usize,
    pub len: usize,
    pub num_layers: usize,
    marks: Vec<Origin>,
}

impl SegmentOrigins {
    fn new(base_position: usize, len: usize, num_layers: usize, fill: Origin) -> Self {
        Self {
            base_position,
            len,
            num_layers,
            marks: vec![fill; len * num_layers],
        }
    }

    pub fn mark(&self, layer: usize, row: usize) -> Origin {
        self.marks[layer * self.len + row]
    }

    fn set(&mut self, layer: usize, row: usize, origin: Origin) {
        self.marks[layer * self.len + row] = origin;
    }

    pub fn cells(&self) -> usize {
        self.marks.len()
    }

    pub fn recomputed(&self) -> usize {
        self.marks.iter().filter(|&&m| m == Origin::Recomputed).count()
    }

    pub fn reused(&self) -> usize {
        self.cells() - self.recomputed()
    }
}

/// KV context covering every placed position plus per-segment origin marks.
/// Positions outside the segments are always freshly computed.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedKvContext {
    pub kv: KvContext,
    pub segments: Vec<SegmentOrigins>,
}

impl MergedKvContext {
    pub fn len(&self) -> usize {
        self.kv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kv.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub full_recompute_ms: f64,
    pub index_selection_ms: f64,
    pub sparse_recompute_ms: f64,
    pub total_ms: f64,
}

impl PhaseTimings {
    fn add(&mut self, o: &PhaseTimings) {
        self.full_recompute_ms += o.full_recompute_ms;
        self.index_selection_ms += o.index_selection_ms;
        self.sparse_recompute_ms += o.sparse_recompute_ms;
        self.total_ms += o.total_ms;
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReuseStats {
    /// One cell per `(layer, segment position)`.
    pub total_segment_entries: usize,
    pub recomputed_entries: usize,
    pub reused_entries: usize,
    pub reuse_rate: f64,
    pub flops_relay: f64,
    pub flops_full_equiv: f64,
    pub flops_selection_overhead: f64,
    pub selected_count: usize,
    pub provenance: BTreeMap<SelectionTag, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<PhaseTimings>,
}

impl ReuseStats {
    fn finish(&mut self) {
        self.reused_entries = self.total_segment_entries - self.recomputed_entries;
        self.reuse_rate = if self.total_segment_entries == 0 {
            0.0
        } else {
            1.0 - self.recomputed_entries as f64 / self.total_segment_entries as f64
        };
    }

    /// Sums counters and FLOPs; the reuse rate is recomputed from the totals.
    pub fn combine<'a>(parts: impl IntoIterator<Item = &'a ReuseStats>) -> ReuseStats {
        let mut out = ReuseStats::default();
        for p in parts {
            out.total_segment_entries += p.total_segment_entries;
            out.recomputed_entries += p.recomputed_entries;
            out.flops_relay += p.flops_relay;
            out.flops_full_equiv += p.flops_full_equiv;
            out.flops_selection_overhead += p.flops_selection_overhead;
            out.selected_count += p.selected_count;
            for (k, v) in &p.provenance {
                *out.provenance.entry(*k).or_insert(0) += v;
            }
            if let Some(t) = &p.timings {
                out.timings.get_or_insert_with(PhaseTimings::default).add(t);
            }
        }
        out.finish();
        out
    }
}

/// Per relayed segment outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentReport {
    pub base_position: usize,
    pub len: usize,
    pub stats: ReuseStats,
    pub selection: Option<SelectionSet>,
    /// Value deviation of each row at the detection layer (relay only).
    pub s_dev: Option<Vec<f64>>,
    /// Key deviation at the detection layer; logged, never used to select.
    pub key_dev: Option<Vec<f64>>,
    /// Hidden state of each row where its propagation stopped.
    pub segment_hidden: Option<Tensor>,
    /// Input layer index of each row of `segment_hidden`.
    pub row_depth: Vec<usize>,
    pub end_logits: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub context: MergedKvContext,
    /// Logits at the last placed position.
    pub last_logits: Vec<f32>,
    pub segments: Vec<SegmentReport>,
    pub stats: ReuseStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub relay: f64,
    pub full_equiv: f64,
    pub selection_overhead: f64,
}

/// Recompute schedule of one segment: `full_layers` layers where every row
/// runs and `sparse_layers` layers where `selected` rows run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub full_layers: usize,
    pub sparse_layers: usize,
    pub selected: usize,
}

impl Schedule {
    pub fn relay(profile: &LayerProfile, selected: usize) -> Self {
        Self {
            full_layers: profile.l_det - profile.l_start + 1,
            sparse_layers: profile.l_end - profile.l_det,
            selected,
        }
    }

    pub fn recomputed_entries(&self, n: usize) -> usize {
        n * self.full_layers + self.selected * self.sparse_layers
    }
}

/// Per token per layer cost of everything except the score/mix term.
fn dense_flops(spec: &ModelSpec) -> f64 {
    let (d, dh, hkv, ff) = (
        spec.d_model as f64,
        spec.d_head as f64,
        spec.num_kv_heads as f64,
        spec.d_ff as f64,
    );
    2.0 * d * (d + 2.0 * dh * hkv + d) + 6.0 * d * ff
}

/// Score/mix cost per attended position per query row.
fn attn_unit(spec: &ModelSpec) -> f64 {
    4.0 * spec.d_head as f64 * spec.num_heads as f64
}

/// Cost of `rows` segment rows at one layer each, charging every row the
/// mean segment context `p + (n + 1) / 2`.
fn segment_row_flops(spec: &ModelSpec, p: usize, n: usize, rows: usize) -> f64 {
    let rows = rows as f64;
    rows * dense_flops(spec) + attn_unit(spec) * rows * (2 * p + n + 1) as f64 / 2.0
}

/// Segment-only FLOPs of an `n`-token segment placed after `p` positions.
pub fn segment_flops(spec: &ModelSpec, p: usize, n: usize, schedule: Schedule, overhead: bool) -> FlopsEstimate {
    FlopsEstimate {
        relay: segment_row_flops(spec, p, n, schedule.recomputed_entries(n)),
        full_equiv: segment_row_flops(spec, p, n, spec.num_layers * n),
        selection_overhead: if overhead { 6.0 * (spec.kv_dim() * n) as f64 } else { 0.0 },
    }
}

/// Full prefill of `m` fresh tokens placed after `p` positions.
pub fn fresh_flops(spec: &ModelSpec, p: usize, m: usize) -> f64 {
    spec.num_layers as f64 * segment_row_flops(spec, p, m, m)
}

/// FLOPs of placing an `n`-token segment after `p` fresh positions with the
/// given schedule, versus full prefill of all `p + n` positions.
pub fn schedule_flops(spec: &ModelSpec, p: usize, n: usize, schedule: Schedule, overhead: bool) -> FlopsEstimate {
    let prefix = fresh_flops(spec, 0, p);
    let seg = segment_flops(spec, p, n, schedule, overhead);
    FlopsEstimate {
        relay: prefix + seg.relay,
        full_equiv: prefix + seg.full_equiv,
        selection_overhead: seg.selection_overhead,
    }
}

/// Analytic FLOPs of relay prefill with `profile` and `selected_count` rows
/// chosen at the detection layer. The selection overhead (deviation scoring)
/// is reported apart from `relay`.
pub fn flops_estimate(
    spec: &ModelSpec,
    prefix_len: usize,
    n: usize,
    profile: &LayerProfile,
    selected_count: usize,
) -> FlopsEstimate {
    schedule_flops(spec, prefix_len, n, Schedule::relay(profile, selected_count), true)
}

/// `floor(alpha * n)`, tolerant of representation error in `alpha`.
pub fn blend_count(alpha: f64, n: usize) -> usize {
    ((alpha * n as f64 + 1e-9).floor() as usize).min(n)
}

fn millis(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn check_cache(model: &Model, cache: &RelayCache) -> Result<()> {
    cache.validate()?;
    let spec = model.spec();
    if cache.num_layers() != spec.num_layers
        || cache.rope.head_dim != spec.d_head
        || cache.rope.theta_base != spec.theta_base
        || cache.values[0].cols() != spec.kv_dim()
        || cache.hidden_snapshot.cols() != spec.d_model
    {
        return Err(RelayError::InvalidParams(
            "relay cache was recorded with a different model shape".into(),
        ));
    }
    Ok(())
}

fn place_realigned(ctx: &mut KvContext, re: &RealignedCache<'_>) -> Result<()> {
    for l in 0..ctx.num_layers() {
        let (k, v) = (&re.keys[l], &re.values[l]);
        let layer = ctx.layer_mut(l);
        for j in 0..k.rows() {
            layer.write(re.base_position + j, k.row(j), v.row(j))?;
        }
    }
    Ok(())
}

fn run_layers(
    model: &Model,
    layers: std::ops::Range<usize>,
    hidden: &mut Tensor,
    positions: &[usize],
    ctx: &mut KvContext,
) -> Result<()> {
    if positions.is_empty() {
        return Ok(());
    }
    for l in layers {
        model.layer_forward(l, hidden, positions, ctx.layer_mut(l), true, None)?;
    }
    Ok(())
}

/// Logits for one already-placed row, advancing its hidden state from
/// `from_layer` upward while reading (never writing) its cached KV.
fn probe_logits(model: &Model, ctx: &mut KvContext, hidden_row: &[f32], from_layer: usize, position: usize) -> Result<Vec<f32>> {
    let mut h = Tensor::from_rows(1, hidden_row.len(), hidden_row.to_vec())?;
    for l in from_layer..model.spec().num_layers {
        model.layer_forward(l, &mut h, &[position], ctx.layer_mut(l), false, None)?;
    }
    Ok(model.logits(&h).into_data())
}

struct Placed {
    report: SegmentReport,
    origins: SegmentOrigins,
    schedule: Schedule,
}

fn place_full(model: &Model, ctx: &mut KvContext, cache: &RelayCache, timings: bool) -> Result<Placed> {
    let t0 = Instant::now();
    let base = ctx.len();
    let n = cache.len();
    let out = model.prefill(&cache.segment_token_ids, ctx, base, &CaptureFlags::none())?;
    let spec = model.spec();
    let schedule = Schedule {
        full_layers: spec.num_layers,
        sparse_layers: 0,
        selected: 0,
    };
    let flops = segment_flops(spec, base, n, schedule, false);
    let origins = SegmentOrigins::new(base, n, spec.num_layers, Origin::Recomputed);
    let mut stats = ReuseStats {
        total_segment_entries: origins.cells(),
        recomputed_entries: origins.recomputed(),
        flops_relay: flops.relay,
        flops_full_equiv: flops.full_equiv,
        ..Default::default()
    };
    let elapsed = millis(t0);
    stats.timings = timings.then_some(PhaseTimings {
        full_recompute_ms: elapsed,
        total_ms: elapsed,
        ..Default::default()
    });
    stats.finish();
    Ok(Placed {
        report: SegmentReport {
            base_position: base,
            len: n,
            stats,
            selection: None,
            s_dev: None,
            key_dev: None,
            segment_hidden: None,
            row_depth: vec![spec.num_layers; n],
            end_logits: out.last_logits().to_vec(),
        },
        origins,
        schedule,
    })
}

fn place_zero(model: &Model, ctx: &mut KvContext, cache: &RelayCache, timings: bool) -> Result<Placed> {
    let t0 = Instant::now();
    let base = ctx.len();
    let n = cache.len();
    let spec = model.spec();
    let re = cache.realign(base)?;
    place_realigned(ctx, &re)?;
    let last = cache.segment_token_ids[n - 1];
    let end_logits = probe_logits(model, ctx, model.embed(&[last])?.row(0), 0, base + n - 1)?;
    let origins = SegmentOrigins::new(base, n, spec.num_layers, Origin::Reused);
    let schedule = Schedule {
        full_layers: 0,
        sparse_layers: 0,
        selected: 0,
    };
    let flops = segment_flops(spec, base, n, schedule, false);
    let mut stats = ReuseStats {
        total_segment_entries: origins.cells(),
        recomputed_entries: 0,
        flops_relay: flops.relay,
        flops_full_equiv: flops.full_equiv,
        ..Default::default()
    };
    stats.timings = timings.then_some(PhaseTimings {
        total_ms: millis(t0),
        ..Default::default()
    });
    stats.finish();
    Ok(Placed {
        report: SegmentReport {
            base_position: base,
            len: n,
            stats,
            selection: None,
            s_dev: None,
            key_dev: None,
            segment_hidden: None,
            row_depth: vec![0; n],
            end_logits,
        },
        origins,
        schedule,
    })
}

fn place_relay(
    model: &Model,
    ctx: &mut KvContext,
    cache: &RelayCache,
    profile: &LayerProfile,
    config: &EngineConfig,
) -> Result<Placed> {
    let t0 = Instant::now();
    let spec = model.spec();
    let layers = spec.num_layers;
    let (l_start, l_det, l_end) = profile.triple();
    if cache.hidden_layer != l_start {
        return Err(RelayError::InvalidProfile(format!(
            "cache snapshot was taken at layer {} but the profile starts at {l_start}",
            cache.hidden_layer
        )));
    }
    let base = ctx.len();
    let n = cache.len();
    let re = cache.realign(base)?;
    place_realigned(ctx, &re)?;
    let positions: Vec<usize> = (base..base + n).collect();
    model.check_positions(&positions)?;

    let mut hidden = cache.hidden_snapshot.clone();
    run_layers(model, l_start..l_det + 1, &mut hidden, &positions, ctx)?;
    let t_full = millis(t0);

    let t1 = Instant::now();
    let det = ctx.layer(l_det);
    let s_dev: Vec<f64> = (0..n)
        .map(|j| value_deviation(re.values[l_det].row(j), det.value(base + j), spec.d_head))
        .collect();
    let key_dev: Vec<f64> = (0..n)
        .map(|j| value_deviation(re.keys[l_det].row(j), det.key(base + j), spec.d_head))
        .collect();
    let influence: Vec<f64> = cache.influence.iter().map(|&v| v as f64).collect();
    let selection = select(&s_dev, &influence, &config.thresholds)?;
    let t_select = millis(t1);

    let t2 = Instant::now();
    let chosen = selection.indices();
    let top = if config.continue_selected_to_top { layers } else { l_end + 1 };
    let mut sel_hidden = hidden.gather_rows(&chosen);
    let sel_positions: Vec<usize> = chosen.iter().map(|&j| base + j).collect();
    run_layers(model, l_det + 1..top, &mut sel_hidden, &sel_positions, ctx)?;
    let t_sparse = millis(t2);

    let mut row_depth = vec![l_det + 1; n];
    for (r, &j) in chosen.iter().enumerate() {
        hidden.row_mut(j).copy_from_slice(sel_hidden.row(r));
        row_depth[j] = top;
    }

    let mut origins = SegmentOrigins::new(base, n, layers, Origin::Reused);
    for l in l_start..=l_det {
        for j in 0..n {
            origins.set(l, j, Origin::Recomputed);
        }
    }
    for l in l_det + 1..top {
        for &j in &chosen {
            origins.set(l, j, Origin::Recomputed);
        }
    }

    let last = n - 1;
    let end_logits = probe_logits(model, ctx, hidden.row(last), row_depth[last], base + last)?;

    let schedule = Schedule {
        full_layers: l_det - l_start + 1,
        sparse_layers: top - l_det - 1,
        selected: chosen.len(),
    };
    let flops = segment_flops(spec, base, n, schedule, true);
    let mut stats = ReuseStats {
        total_segment_entries: origins.cells(),
        recomputed_entries: origins.recomputed(),
        flops_relay: flops.relay,
        flops_full_equiv: flops.full_equiv,
        flops_selection_overhead: flops.selection_overhead,
        selected_count: chosen.len(),
        provenance: selection.histogram(),
        ..Default::default()
    };
    stats.timings = config.record_timings.then_some(PhaseTimings {
        full_recompute_ms: t_full,
        index_selection_ms: t_select,
        sparse_recompute_ms: t_sparse,
        total_ms: millis(t0),
    });
    stats.finish();
    Ok(Placed {
        report: SegmentReport {
            base_position: base,
            len: n,
            stats,
            selection: Some(selection),
            s_dev: Some(s_dev),
            key_dev: Some(key_dev),
            segment_hidden: Some(hidden),
            row_depth,
            end_logits,
        },
        origins,
        schedule,
    })
}

fn place_blend(model: &Model, ctx: &mut KvContext, cache: &RelayCache, alpha: f64, timings: bool) -> Result<Placed> {
    let t0 = Instant::now();
    let spec = model.spec();
    let layers = spec.num_layers;
    let base = ctx.len();
    let n = cache.len();
    let re = cache.realign(base)?;
    place_realigned(ctx, &re)?;
    let positions: Vec<usize> = (base..base + n).collect();
    model.check_positions(&positions)?;

    let mut hidden = model.embed(&cache.segment_token_ids)?;
    run_layers(model, 0..2, &mut hidden, &positions, ctx)?;
    let t_full = millis(t0);

    let t1 = Instant::now();
    let dev: Vec<f64> = (0..n)
        .map(|j| {
            re.values[1]
                .row(j)
                .iter()
                .zip(ctx.layer(1).value(base + j))
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let k = blend_count(alpha, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dev[b].total_cmp(&dev[a]).then(a.cmp(&b)));
    let selection = SelectionSet::from_indices(n, order[..k].iter().copied(), SelectionTag::Dev)?;
    let t_select = millis(t1);

    let t2 = Instant::now();
    let chosen = selection.indices();
    let mut sel_hidden = hidden.gather_rows(&chosen);
    let sel_positions: Vec<usize> = chosen.iter().map(|&j| base + j).collect();
    run_layers(model, 2..layers, &mut sel_hidden, &sel_positions, ctx)?;
    let t_sparse = millis(t2);

    let mut row_depth = vec![2; n];
    for (r, &j) in chosen.iter().enumerate() {
        hidden.row_mut(j).copy_from_slice(sel_hidden.row(r));
        row_depth[j] = layers;
    }
    let mut origins = SegmentOrigins::new(base, n, layers, Origin::Reused);
    for j in 0..n {
        origins.set(0, j, Origin::Recomputed);
        origins.set(1, j, Origin::Recomputed);
    }
    for l in 2..layers {
        for &j in &chosen {
            origins.set(l, j, Origin::Recomputed);
        }
    }
    let last = n - 1;
    let end_logits = probe_logits(model, ctx, hidden.row(last), row_depth[last], base + last)?;

    let schedule = Schedule {
        full_layers: 2,
        sparse_layers: layers - 2,
        selected: k,
    };
    let flops = segment_flops(spec, base, n, schedule, true);
    let mut stats = ReuseStats {
        total_segment_entries: origins.cells(),
        recomputed_entries: origins.recomputed(),
        flops_relay: flops.relay,
        flops_full_equiv: flops.full_equiv,
        flops_selection_overhead: flops.selection_overhead,
        selected_count: k,
        provenance: selection.histogram(),
        ..Default::default()
    };
    stats.timings = timings.then_some(PhaseTimings {
        full_recompute_ms: t_full,
        index_selection_ms: t_select,
        sparse_recompute_ms: t_sparse,
        total_ms: millis(t0),
    });
    stats.finish();
    Ok(Placed {
        report: SegmentReport {
            base_position: base,
            len: n,
            stats,
            selection: Some(selection),
            s_dev: Some(dev),
            key_dev: None,
            segment_hidden: Some(hidden),
            row_depth,
            end_logits,
        },
        origins,
        schedule,
    })
}

/// Every segment must satisfy: RECOMPUTED marks == reported recomputed
/// entries == the schedule's closed-form count.
fn check_marks(placed: &Placed) -> Result<()> {
    let marks = placed.origins.recomputed();
    let reported = placed.report.stats.recomputed_entries;
    let expected = placed.schedule.recomputed_entries(placed.report.len);
    if marks != reported || marks != expected {
        return Err(RelayError::MarkMismatch {
            marks,
            reported,
            expected,
        });
    }
    Ok(())
}

/// Processes `pieces` in order into a fresh context. Relay pieces follow
/// `config.strategy`; fresh pieces are always prefilled in full.
pub fn prefill_pieces(
    model: &Model,
    pieces: &[Piece<'_>],
    profile: &LayerProfile,
    config: &EngineConfig,
) -> Result<PrefillOutput> {
    profile.check_model(model.spec().num_layers)?;
    config.strategy.validate()?;
    config.thresholds.validate()?;
    let mut ctx = KvContext::new(model.spec());
    let mut segments = Vec::new();
    let mut origins = Vec::new();
    let mut last_logits: Option<Vec<f32>> = None;
    let mut fresh = 0.0;
    for piece in pieces {
        match *piece {
            Piece::Fresh(tokens) => {
                if tokens.is_empty() {
                    continue;
                }
                let base = ctx.len();
                let out = model.prefill(tokens, &mut ctx, base, &CaptureFlags::none())?;
                fresh += fresh_flops(model.spec(), base, tokens.len());
                last_logits = Some(out.last_logits().to_vec());
            }
            Piece::Relay(cache) => {
                check_cache(model, cache)?;
                let placed = match config.strategy {
                    Strategy::Full => place_full(model, &mut ctx, cache, config.record_timings)?,
                    Strategy::Zero => place_zero(model, &mut ctx, cache, config.record_timings)?,
                    Strategy::Relay => place_relay(model, &mut ctx, cache, profile, config)?,
                    Strategy::Blend { alpha } => place_blend(model, &mut ctx, cache, alpha, config.record_timings)?,
                };
                check_marks(&placed)?;
                last_logits = Some(placed.report.end_logits.clone());
                segments.push(placed.report);
                origins.push(placed.origins);
            }
        }
    }
    let last_logits = last_logits.ok_or(RelayError::EmptyInput("prompt pieces"))?;
    // Segment stats carry segment rows only; fresh rows are charged once here.
    let mut stats = ReuseStats::combine(segments.iter().map(|s| &s.stats));
    stats.flops_relay += fresh;
    stats.flops_full_equiv += fresh;
    Ok(PrefillOutput {
        context: MergedKvContext { kv: ctx, segments: origins },
        last_logits,
        segments,
        stats,
    })
}

/// `prefix` followed by one relayed segment.
pub fn relay_prefill(
    model: &Model,
    prefix: &[u32],
    cache: &RelayCache,
    profile: &LayerProfile,
    thresholds: &SelectionThresholds,
    strategy: Strategy,
) -> Result<PrefillOutput> {
    let config = EngineConfig {
        thresholds: *thresholds,
        ..EngineConfig::new(strategy)
    };
    prefill_pieces(model, &[Piece::Fresh(prefix), Piece::Relay(cache)], profile, &config)
}

/// Selective-recompute baseline keyed on layer-1 value drift.
pub fn blend_baseline(model: &Model, prefix: &[u32], cache: &RelayCache, alpha: f64) -> Result<PrefillOutput> {
    let layers = model.spec().num_layers;
    let profile = LayerProfile::fixed(&model.model_id(), layers, 0, 0, layers - 1)?;
    relay_prefill(
        model,
        prefix,
        cache,
        &profile,
        &SelectionThresholds::default(),
        Strategy::Blend { alpha },
    )
}

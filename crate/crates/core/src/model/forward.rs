use super::{Model, ModelSpec};
use crate::error::{RelayError, Result};
use crate::tensor::{argmax, matmul_rows, rms_norm_into, rope_rotate_heads, softmax_in_place, Tensor};

/// Post-rotation keys and values of one layer, one row per absolute position.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    kv_dim: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl LayerKv {
    pub fn new(kv_dim: usize) -> Self {
        Self {
            kv_dim,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.keys.len() / self.kv_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_dim
    }

    pub fn key(&self, position: usize) -> &[f32] {
        &self.keys[position * self.kv_dim..(position + 1) * self.kv_dim]
    }

    pub fn value(&self, position: usize) -> &[f32] {
        &self.values[position * self.kv_dim..(position + 1) * self.kv_dim]
    }

    /// Writes a row at `position`, appending when it equals the current length.
    pub fn write(&mut self, position: usize, key: &[f32], value: &[f32]) -> Result<()> {
        let rows = self.rows();
        if key.len() != self.kv_dim || value.len() != self.kv_dim {
            return Err(RelayError::LengthMismatch {
                op: "kv write",
                left: key.len().max(value.len()),
                right: self.kv_dim,
            });
        }
        if position == rows {
            self.keys.extend_from_slice(key);
            self.values.extend_from_slice(value);
        } else if position < rows {
            let r = position * self.kv_dim..(position + 1) * self.kv_dim;
            self.keys[r.clone()].copy_from_slice(key);
            self.values[r].copy_from_slice(value);
        } else {
            return Err(RelayError::InvalidParams(format!(
                "kv write at position {position} leaves a gap after {rows} rows"
            )));
        }
        Ok(())
    }

    /// Keys for `[start, start + n)` as an `[n x kv_dim]` tensor.
    pub fn keys_slice(&self, start: usize, n: usize) -> Tensor {
        let d = self.kv_dim;
        Tensor::from_rows(n, d, self.keys[start * d..(start + n) * d].to_vec()).expect("slice")
    }

    pub fn values_slice(&self, start: usize, n: usize) -> Tensor {
        let d = self.kv_dim;
        Tensor::from_rows(n, d, self.values[start * d..(start + n) * d].to_vec()).expect("slice")
    }
}

/// Per-layer KV cache of one sequence. Single writer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvContext {
    layers: Vec<LayerKv>,
}

impl KvContext {
    pub fn new(spec: &ModelSpec) -> Self {
        Self {
            layers: (0..spec.num_layers).map(|_| LayerKv::new(spec.kv_dim())).collect(),
        }
    }

    /// Number of positions held (all layers agree outside an in-flight relay).
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerKv::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &LayerKv {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerKv {
        &mut self.layers[l]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HiddenCapture {
    #[default]
    None,
    /// Residual-stream input to one layer.
    Layer(usize),
    All,
}

/// What a forward pass should record. Everything is opt-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CaptureFlags {
    pub hidden: HiddenCapture,
    /// Pre-rotation keys, post-rotation keys and values for the chunk rows.
    pub kv: bool,
    /// Record attention weights onto absolute positions `>= from`.
    pub attention_from: Option<usize>,
}

impl CaptureFlags {
    pub fn none() -> Self {
        Self::default()
    }

    /// Everything the relay store needs to record a generated segment.
    pub fn for_relay(segment_start: usize, hidden_layer: usize) -> Self {
        Self {
            hidden: HiddenCapture::Layer(hidden_layer),
            kv: true,
            attention_from: Some(segment_start),
        }
    }
}

/// Attention weights of a chunk onto the columns `[from, from + cols)`.
/// Entries for causally masked columns are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    pub from: usize,
    pub cols: usize,
    pub heads: usize,
    /// `[rows x heads x cols]`
    pub weights: Vec<f32>,
}

impl AttentionCapture {
    pub fn weight(&self, row: usize, head: usize, position: usize) -> f32 {
        if position < self.from || position >= self.from + self.cols {
            return 0.0;
        }
        self.weights[(row * self.heads + head) * self.cols + (position - self.from)]
    }
}

/// Captured internals of one forward call over a chunk of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub base_position: usize,
    pub rows: usize,
    /// Per layer: residual input `[rows x d_model]` when captured.
    pub hidden: Vec<Option<Tensor>>,
    /// Per layer `[rows x kv_dim]`; empty unless `kv` capture was requested.
    pub keys_pre_rope: Vec<Tensor>,
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    /// Per layer; empty unless attention capture was requested.
    pub attention: Vec<AttentionCapture>,
}

impl StepTrace {
    fn empty(num_layers: usize, base_position: usize, rows: usize) -> Self {
        Self {
            base_position,
            rows,
            hidden: vec![None; num_layers],
            keys_pre_rope: Vec::new(),
            keys: Vec::new(),
            values: Vec::new(),
            attention: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[rows x vocab_size]`
    pub logits: Tensor,
    pub trace: StepTrace,
}

impl ForwardOutput {
    pub fn last_logits(&self) -> &[f32] {
        self.logits.row(self.logits.rows() - 1)
    }
}

/// Greedy continuation produced by [`Model::generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub traces: Vec<StepTrace>,
}

pub(crate) struct LayerCapture<'a> {
    pub flags: CaptureFlags,
    pub trace: &'a mut StepTrace,
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

impl Model {
    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        let d = self.spec.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            let t = t as usize;
            if t >= self.spec.vocab_size {
                return Err(RelayError::InvalidParams(format!(
                    "token id {t} outside vocabulary of {}",
                    self.spec.vocab_size
                )));
            }
            data.extend_from_slice(self.weights.embedding.row(t));
        }
        Tensor::from_rows(tokens.len(), d, data)
    }

    pub(crate) fn check_positions(&self, positions: &[usize]) -> Result<()> {
        if let Some(&p) = positions.iter().max() {
            if p >= self.spec.max_positions {
                return Err(RelayError::PositionOverflow {
                    position: p,
                    max: self.spec.max_positions,
                });
            }
        }
        Ok(())
    }

    /// One transformer block over `hidden` rows at absolute `positions`
    /// (ascending). With `write_kv` the rows' keys and values are written
    /// into `kv` before attention; otherwise the rows read their own entries
    /// from `kv` and only the hidden state advances.
    pub(crate) fn layer_forward(
        &self,
        l: usize,
        hidden: &mut Tensor,
        positions: &[usize],
        kv: &mut LayerKv,
        write_kv: bool,
        mut capture: Option<LayerCapture<'_>>,
    ) -> Result<()> {
        let spec = &self.spec;
        let lw = &self.weights.layers[l];
        let rows = positions.len();
        let (d, qd, kvd, dh, ff) = (spec.d_model, spec.q_dim(), spec.kv_dim(), spec.d_head, spec.d_ff);
        debug_assert_eq!(hidden.rows(), rows);

        let mut xn = vec![0.0f32; rows * d];
        for r in 0..rows {
            rms_norm_into(hidden.row(r), lw.attn_norm.data(), spec.norm_eps, &mut xn[r * d..(r + 1) * d]);
        }
        let mut q = vec![0.0f32; rows * qd];
        matmul_rows(&xn, rows, d, lw.wq.data(), qd, &mut q);
        for (r, &p) in positions.iter().enumerate() {
            rope_rotate_heads(&mut q[r * qd..(r + 1) * qd], dh, p as i64, spec.theta_base);
        }

        if write_kv {
            let mut k = vec![0.0f32; rows * kvd];
            let mut v = vec![0.0f32; rows * kvd];
            matmul_rows(&xn, rows, d, lw.wk.data(), kvd, &mut k);
            matmul_rows(&xn, rows, d, lw.wv.data(), kvd, &mut v);
            if let Some(cap) = capture.as_mut().filter(|c| c.flags.kv) {
                cap.trace.keys_pre_rope.push(Tensor::from_rows(rows, kvd, k.clone())?);
            }
            for (r, &p) in positions.iter().enumerate() {
                let kr = &mut k[r * kvd..(r + 1) * kvd];
                rope_rotate_heads(kr, dh, p as i64, spec.theta_base);
                kv.write(p, kr, &v[r * kvd..(r + 1) * kvd])?;
            }
            if let Some(cap) = capture.as_mut().filter(|c| c.flags.kv) {
                cap.trace.keys.push(Tensor::from_rows(rows, kvd, k)?);
                cap.trace.values.push(Tensor::from_rows(rows, kvd, v)?);
            }
        }
        if let Some(&p) = positions.iter().max() {
            if p >= kv.rows() {
                return Err(RelayError::InvalidParams(format!(
                    "layer {l}: query at position {p} but only {} cached rows",
                    kv.rows()
                )));
            }
        }

        let heads = spec.num_heads;
        let group = spec.group_size();
        let scale = 1.0 / (dh as f32).sqrt();
        let attn_cap = capture
            .as_ref()
            .and_then(|c| c.flags.attention_from)
            .map(|from| {
                let end = positions.iter().max().map_or(from, |&p| p + 1);
                let cols = end.saturating_sub(from);
                AttentionCapture {
                    from,
                    cols,
                    heads,
                    weights: vec![0.0; rows * heads * cols],
                }
            });
        let mut attn_cap = attn_cap;
        let mut mixed = vec![0.0f32; rows * qd];
        let mut scores = Vec::new();
        for (r, &p) in positions.iter().enumerate() {
            for h in 0..heads {
                let kvh = h / group;
                let qh = &q[r * qd + h * dh..r * qd + (h + 1) * dh];
                scores.clear();
                for j in 0..=p {
                    let kj = &kv.key(j)[kvh * dh..(kvh + 1) * dh];
                    let mut s = 0.0f32;
                    for (a, b) in qh.iter().zip(kj) {
                        s += a * b;
                    }
                    scores.push(s * scale);
                }
                softmax_in_place(&mut scores);
                if let Some(ac) = attn_cap.as_mut() {
                    let base = (r * heads + h) * ac.cols;
                    for j in ac.from..=p {
                        ac.weights[base + j - ac.from] = scores[j];
                    }
                }
                let out = &mut mixed[r * qd + h * dh..r * qd + (h + 1) * dh];
                for (j, &a) in scores.iter().enumerate() {
                    let vj = &kv.value(j)[kvh * dh..(kvh + 1) * dh];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += a * vv;
                    }
                }
            }
        }
        if let (Some(cap), Some(ac)) = (capture.as_mut(), attn_cap) {
            cap.trace.attention.push(ac);
        }

        let mut proj = vec![0.0f32; rows * d];
        matmul_rows(&mixed, rows, qd, lw.wo.data(), d, &mut proj);
        for (h, p) in hidden.data_mut().iter_mut().zip(&proj) {
            *h += p;
        }

        for r in 0..rows {
            rms_norm_into(hidden.row(r), lw.mlp_norm.data(), spec.norm_eps, &mut xn[r * d..(r + 1) * d]);
        }
        let mut gate = vec![0.0f32; rows * ff];
        let mut up = vec![0.0f32; rows * ff];
        matmul_rows(&xn, rows, d, lw.w_gate.data(), ff, &mut gate);
        matmul_rows(&xn, rows, d, lw.w_up.data(), ff, &mut up);
        for (g, u) in gate.iter_mut().zip(&up) {
            *g = silu(*g) * u;
        }
        matmul_rows(&gate, rows, ff, lw.w_down.data(), d, &mut proj);
        for (h, p) in hidden.data_mut().iter_mut().zip(&proj) {
            *h += p;
        }
        Ok(())
    }

    /// Final norm and output head.
    pub fn logits(&self, hidden: &Tensor) -> Tensor {
        let (rows, d, vocab) = (hidden.rows(), self.spec.d_model, self.spec.vocab_size);
        let mut xn = vec![0.0f32; rows * d];
        for r in 0..rows {
            rms_norm_into(
                hidden.row(r),
                self.weights.final_norm.data(),
                self.spec.norm_eps,
                &mut xn[r * d..(r + 1) * d],
            );
        }
        let mut out = vec![0.0f32; rows * vocab];
        matmul_rows(&xn, rows, d, self.weights.lm_head.data(), vocab, &mut out);
        Tensor::from_rows(rows, vocab, out).expect("logits shape")
    }

    /// Causal forward over `tokens` placed at `base_position..`, appending
    /// their KV to `ctx`. Returns logits for every chunk position.
    pub fn prefill(
        &self,
        tokens: &[u32],
        ctx: &mut KvContext,
        base_position: usize,
        flags: &CaptureFlags,
    ) -> Result<ForwardOutput> {
        if tokens.is_empty() {
            return Err(RelayError::EmptyInput("prefill tokens"));
        }
        if base_position != ctx.len() {
            return Err(RelayError::InvalidParams(format!(
                "base_position {base_position} != cached positions {}",
                ctx.len()
            )));
        }
        let positions: Vec<usize> = (base_position..base_position + tokens.len()).collect();
        self.check_positions(&positions)?;
        let mut hidden = self.embed(tokens)?;
        let mut trace = StepTrace::empty(self.spec.num_layers, base_position, tokens.len());
        for l in 0..self.spec.num_layers {
            let keep = match flags.hidden {
                HiddenCapture::None => false,
                HiddenCapture::Layer(x) => x == l,
                HiddenCapture::All => true,
            };
            if keep {
                trace.hidden[l] = Some(hidden.clone());
            }
            self.layer_forward(
                l,
                &mut hidden,
                &positions,
                ctx.layer_mut(l),
                true,
                Some(LayerCapture {
                    flags: *flags,
                    trace: &mut trace,
                }),
            )?;
        }
        Ok(ForwardOutput {
            logits: self.logits(&hidden),
            trace,
        })
    }

    pub fn decode_step(
        &self,
        token: u32,
        ctx: &mut KvContext,
        position: usize,
        flags: &CaptureFlags,
    ) -> Result<ForwardOutput> {
        self.prefill(&[token], ctx, position, flags)
    }

    /// Greedy decoding of exactly `max_new_tokens` tokens, starting from the
    /// logits of the last prompt position. Every generated token is fed back
    /// so `ctx` ends up holding KV for the whole continuation.
    pub fn generate(
        &self,
        ctx: &mut KvContext,
        first_logits: &[f32],
        max_new_tokens: usize,
        flags: &CaptureFlags,
    ) -> Result<Generation> {
        let mut tokens = Vec::with_capacity(max_new_tokens);
        let mut traces = Vec::with_capacity(max_new_tokens);
        let mut next = argmax(first_logits) as u32;
        for i in 0..max_new_tokens {
            tokens.push(next);
            let out = self.decode_step(next, ctx, ctx.len(), flags)?;
            if i + 1 < max_new_tokens {
                next = argmax(out.last_logits()) as u32;
            }
            traces.push(out.trace);
        }
        Ok(Generation { tokens, traces })
    }
}

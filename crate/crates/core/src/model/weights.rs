use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::ModelSpec;
use crate::error::{RelayError, Result};
use crate::format;
use crate::tensor::Tensor;

const WEIGHTS_FORMAT: &str = "relaycache.weights";
const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    /// `[d_model x num_heads*d_head]`
    pub wq: Tensor,
    /// `[d_model x num_kv_heads*d_head]`
    pub wk: Tensor,
    pub wv: Tensor,
    /// `[num_heads*d_head x d_model]`
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `[vocab_size x d_model]`
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    /// `[d_model x vocab_size]`
    pub lm_head: Tensor,
}

enum Init {
    Ones,
    Embedding,
    Linear { fan_in: usize },
}

/// Canonical tensor order with expected shapes and init rule.
fn layout(spec: &ModelSpec) -> Vec<(String, Vec<usize>, Init)> {
    let (d, q, kv, ff) = (spec.d_model, spec.q_dim(), spec.kv_dim(), spec.d_ff);
    let mut out = vec![(
        "embedding".to_string(),
        vec![spec.vocab_size, d],
        Init::Embedding,
    )];
    for l in 0..spec.num_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.push((p("attn_norm"), vec![d], Init::Ones));
        out.push((p("wq"), vec![d, q], Init::Linear { fan_in: d }));
        out.push((p("wk"), vec![d, kv], Init::Linear { fan_in: d }));
        out.push((p("wv"), vec![d, kv], Init::Linear { fan_in: d }));
        out.push((p("wo"), vec![q, d], Init::Linear { fan_in: q }));
        out.push((p("mlp_norm"), vec![d], Init::Ones));
        out.push((p("w_gate"), vec![d, ff], Init::Linear { fan_in: d }));
        out.push((p("w_up"), vec![d, ff], Init::Linear { fan_in: d }));
        out.push((p("w_down"), vec![ff, d], Init::Linear { fan_in: ff }));
    }
    out.push(("final_norm".to_string(), vec![d], Init::Ones));
    out.push(("lm_head".to_string(), vec![d, spec.vocab_size], Init::Linear { fan_in: d }));
    out
}

/// Seeded normal init: linear layers scaled by `1/sqrt(fan_in)`, embeddings by
/// 0.02, norm gains at 1. Tensors are drawn in canonical order from one
/// ChaCha8 stream.
pub fn init_weights(spec: &ModelSpec, seed: u64) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = layout(spec)
        .into_iter()
        .map(|(name, shape, init)| {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = match init {
                Init::Ones => vec![1.0; n],
                Init::Embedding => sample(&mut rng, n, 0.02),
                Init::Linear { fan_in } => sample(&mut rng, n, 1.0 / (fan_in as f32).sqrt()),
            };
            (name, Tensor::new(shape, data).expect("layout shape"))
        })
        .collect();
    Weights::from_named(spec, tensors).expect("layout names")
}

fn sample(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

impl Weights {
    /// Named tensors in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, lw) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("attn_norm"), &lw.attn_norm));
            out.push((p("wq"), &lw.wq));
            out.push((p("wk"), &lw.wk));
            out.push((p("wv"), &lw.wv));
            out.push((p("wo"), &lw.wo));
            out.push((p("mlp_norm"), &lw.mlp_norm));
            out.push((p("w_gate"), &lw.w_gate));
            out.push((p("w_up"), &lw.w_up));
            out.push((p("w_down"), &lw.w_down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    fn from_named(spec: &ModelSpec, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |name: String| {
            map.remove(&name)
                .ok_or_else(|| RelayError::InvalidWeights(format!("missing tensor `{name}`")))
        };
        let embedding = take("embedding".into())?;
        let mut layers = Vec::with_capacity(spec.num_layers);
        for l in 0..spec.num_layers {
            let mut t = |s: &str| take(format!("layers.{l}.{s}"));
            layers.push(LayerWeights {
                attn_norm: t("attn_norm")?,
                wq: t("wq")?,
                wk: t("wk")?,
                wv: t("wv")?,
                wo: t("wo")?,
                mlp_norm: t("mlp_norm")?,
                w_gate: t("w_gate")?,
                w_up: t("w_up")?,
                w_down: t("w_down")?,
            });
        }
        let final_norm = take("final_norm".into())?;
        let lm_head = take("lm_head".into())?;
        if let Some(extra) = map.keys().next() {
            return Err(RelayError::InvalidWeights(format!("unexpected tensor `{extra}`")));
        }
        let w = Weights {
            embedding,
            layers,
            final_norm,
            lm_head,
        };
        w.check_shapes(spec)?;
        Ok(w)
    }

    pub fn check_shapes(&self, spec: &ModelSpec) -> Result<()> {
        if self.layers.len() != spec.num_layers {
            return Err(RelayError::InvalidWeights(format!(
                "{} layers, spec says {}",
                self.layers.len(),
                spec.num_layers
            )));
        }
        for ((name, t), (_, shape, _)) in self.named().into_iter().zip(layout(spec)) {
            if t.shape() != shape.as_slice() {
                return Err(RelayError::InvalidWeights(format!(
                    "`{name}` has shape {:?}, spec requires {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(RelayError::InvalidWeights(format!("`{name}` has non-finite values")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self, spec: &ModelSpec) -> Result<Vec<u8>> {
        format::encode(
            WEIGHTS_FORMAT,
            WEIGHTS_VERSION,
            serde_json::to_value(spec)?,
            &self.named(),
            true,
        )
    }

    /// Checksums are verified when present but optional, so hand-built
    /// checkpoints without one still load.
    pub fn from_bytes(bytes: &[u8]) -> Result<(ModelSpec, Self)> {
        let decoded = format::decode(bytes, WEIGHTS_FORMAT, WEIGHTS_VERSION, false)?;
        let spec: ModelSpec = serde_json::from_value(decoded.manifest.meta.clone())
            .map_err(|e| RelayError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        let weights = Self::from_named(&spec, decoded.tensors)?;
        Ok((spec, weights))
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("toy-{}", &hex::encode(h.finalize())[..16])
    }
}

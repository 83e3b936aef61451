//! Deterministic decoder-only transformer used as the test bed for relaying.
//!
//! Pre-norm residual blocks with RMS normalisation, rotary attention with
//! optional grouped KV heads, and a SiLU-gated MLP.

mod forward;
mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{RelayError, Result};

pub use forward::{
    AttentionCapture, CaptureFlags, ForwardOutput, Generation, HiddenCapture, KvContext, LayerKv,
    StepTrace,
};
pub use weights::{init_weights, LayerWeights, Weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub theta_base: f64,
    pub max_positions: usize,
    pub norm_eps: f32,
}

impl ModelSpec {
    /// 16 layers, d_model 128, 4 heads of 32, vocabulary of 256.
    pub fn toy() -> Self {
        Self {
            num_layers: 16,
            d_model: 128,
            num_heads: 4,
            num_kv_heads: 4,
            d_head: 32,
            d_ff: 256,
            vocab_size: 256,
            theta_base: 10000.0,
            max_positions: 4096,
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RelayError::InvalidSpec(msg));
        let extents = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in extents {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.num_layers < 6 {
            return bad(format!("num_layers must be at least 6, got {}", self.num_layers));
        }
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return bad(format!(
                "num_heads {} is not a multiple of num_kv_heads {}",
                self.num_heads, self.num_kv_heads
            ));
        }
        if self.d_model != self.num_heads * self.d_head {
            return bad(format!(
                "d_model {} != num_heads {} * d_head {}",
                self.d_model, self.num_heads, self.d_head
            ));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(RelayError::OddHeadDim(self.d_head));
        }
        if !(self.theta_base > 0.0) || !(self.norm_eps > 0.0) {
            return bad("theta_base and norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Width of the stored K (or V) row for one position.
    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.d_head
    }

    pub fn q_dim(&self) -> usize {
        self.num_heads * self.d_head
    }

    pub fn group_size(&self) -> usize {
        self.num_heads / self.num_kv_heads
    }
}

/// Immutable weights plus their architecture; shareable across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    weights: Weights,
}

impl Model {
    pub fn new(spec: ModelSpec, weights: Weights) -> Result<Self> {
        spec.validate()?;
        weights.check_shapes(&spec)?;
        Ok(Self { spec, weights })
    }

    /// Seeded random model; same `(spec, seed)` gives bit-identical weights.
    pub fn random(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let weights = init_weights(&spec, seed);
        Ok(Self { spec, weights })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Short identifier derived from the weight bytes.
    pub fn model_id(&self) -> String {
        self.weights.fingerprint()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.weights.to_bytes(&self.spec)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (spec, weights) = Weights::from_bytes(bytes)?;
        Self::new(spec, weights)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_spec_is_valid() {
        ModelSpec::toy().validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_specs() {
        let mut s = ModelSpec::toy();
        s.num_kv_heads = 3;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::toy();
        s.num_layers = 5;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::toy();
        s.d_head = 31;
        s.d_model = 124;
        assert!(matches!(s.validate(), Err(RelayError::OddHeadDim(31))));
        let mut s = ModelSpec::toy();
        s.d_model = 64;
        assert!(s.validate().is_err());
    }
}

//! Offline layer-range profiling.
//!
//! From the averaged layer-wise value-cosine curve `s` and the
//! adjacent-layer rank-correlation curve `rho`, derive three layers:
//!
//! * `l_start`: deepest layer before the similarity minimum that still has
//!   `s >= tau_start`; relay resumes from the hidden snapshot there.
//! * `l_end`: first layer of the deep "stable" regime, found by scanning up
//!   from the minimum for `consecutive_c` layers that sit above the tail
//!   baseline `mean - std` and move less than `lambda * std` per layer.
//! * `l_det`: one past the first layer where the second difference of
//!   `rho` turns from positive to negative.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RelayError, Result};
use crate::metrics::{build_comparison_setting, layer_curve, prepare_instance, token_deviation};
use crate::metrics::{ComparisonSetting, LayerCurve, TwoStageInstance};
use crate::model::Model;

pub const PROFILE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionRule {
    /// Second difference goes from strictly positive to strictly negative.
    #[default]
    SignTransition,
    /// First strictly negative second difference.
    FirstNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfilerParams {
    pub tau_start: f64,
    pub tail_t: usize,
    pub lambda: f64,
    pub consecutive_c: usize,
    pub min_rise_n: usize,
    pub detection_rule: DetectionRule,
}

impl Default for ProfilerParams {
    fn default() -> Self {
        Self {
            tau_start: 0.99,
            tail_t: 5,
            lambda: 2.0,
            consecutive_c: 2,
            min_rise_n: 3,
            detection_rule: DetectionRule::SignTransition,
        }
    }
}

impl ProfilerParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tau_start > 0.0
            && self.tau_start <= 1.0
            && self.tail_t >= 2
            && self.consecutive_c >= 1
            && self.lambda > 0.0
            && self.min_rise_n >= 1;
        if ok {
            Ok(())
        } else {
            Err(RelayError::InvalidParams(format!("profiler parameters out of range: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub schema_version: u32,
    #[serde(default)]
    pub model_id: String,
    pub num_layers: usize,
    pub l_start: usize,
    pub l_det: usize,
    pub l_end: usize,
    #[serde(default)]
    pub params: ProfilerParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curves: Option<LayerCurve>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl LayerProfile {
    /// Externally supplied triple without calibration curves.
    pub fn fixed(model_id: &str, num_layers: usize, l_start: usize, l_det: usize, l_end: usize) -> Result<Self> {
        let p = Self {
            schema_version: PROFILE_SCHEMA_VERSION,
            model_id: model_id.to_string(),
            num_layers,
            l_start,
            l_det,
            l_end,
            params: ProfilerParams::default(),
            curves: None,
            warnings: Vec::new(),
        };
        p.validate()?;
        Ok(p)
    }

    /// `l_start <= l_det <= l_end < num_layers`.
    pub fn validate(&self) -> Result<()> {
        if !(self.l_start <= self.l_det && self.l_det <= self.l_end && self.l_end < self.num_layers) {
            return Err(RelayError::InvalidProfile(format!(
                "need l_start <= l_det <= l_end < num_layers, got ({}, {}, {}) with {} layers",
                self.l_start, self.l_det, self.l_end, self.num_layers
            )));
        }
        Ok(())
    }

    pub fn check_model(&self, num_layers: usize) -> Result<()> {
        self.validate()?;
        if self.num_layers != num_layers {
            return Err(RelayError::InvalidProfile(format!(
                "profile is for {} layers, model has {num_layers}",
                self.num_layers
            )));
        }
        Ok(())
    }

    pub fn triple(&self) -> (usize, usize, usize) {
        (self.l_start, self.l_det, self.l_end)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: LayerProfile = serde_json::from_str(text)?;
        if p.schema_version != PROFILE_SCHEMA_VERSION {
            return Err(RelayError::VersionMismatch {
                found: p.schema_version,
                expected: PROFILE_SCHEMA_VERSION,
            });
        }
        p.validate()?;
        Ok(p)
    }
}

/// Known layer triples for three open-weight models, with their depth.
pub fn reference_profiles() -> Vec<LayerProfile> {
    [
        ("Llama-3.1-8B-Instruct", 32, 1, 3, 18),
        ("Qwen2.5-Coder-7B-Instruct", 28, 3, 4, 22),
        ("Qwen3-0.6B", 28, 2, 3, 19),
    ]
    .into_iter()
    .map(|(id, layers, s, d, e)| LayerProfile::fixed(id, layers, s, d, e).expect("reference profile"))
    .collect()
}

fn argmin(s: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in s.iter().enumerate() {
        if v < s[best] {
            best = i;
        }
    }
    best
}

pub fn find_start_layer(s: &[f64], params: &ProfilerParams) -> usize {
    if s.is_empty() {
        return 0;
    }
    let l_min = argmin(s);
    (0..l_min).rev().find(|&l| s[l] >= params.tau_start).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndLayerScan {
    pub l_end: usize,
    pub l_min: usize,
    pub baseline: f64,
    pub sigma_last: f64,
    pub warning: Option<String>,
}

pub fn find_end_layer(s: &[f64], params: &ProfilerParams) -> EndLayerScan {
    let layers = s.len();
    let l_min = argmin(s);
    let last = layers.saturating_sub(1);
    if layers < params.tail_t + 2 {
        return EndLayerScan {
            l_end: last,
            l_min,
            baseline: f64::NAN,
            sigma_last: f64::NAN,
            warning: Some(format!(
                "curve has {layers} layers, fewer than tail_t + 2; l_end falls back to the last layer"
            )),
        };
    }
    let tail = &s[layers - params.tail_t..];
    let mu = tail.iter().sum::<f64>() / tail.len() as f64;
    let sigma = (tail.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / tail.len() as f64).sqrt();
    let baseline = mu - sigma;
    let band = params.lambda * sigma;
    let stable = |l: usize| {
        let step = (s[l] - s[l - 1]).abs();
        s[l] >= baseline && (step < band || step == 0.0)
    };
    let from = (l_min + params.min_rise_n).max(l_min + 1);
    let c = params.consecutive_c;
    let mut l = from;
    while l + c <= layers {
        if (l..l + c).all(stable) {
            return EndLayerScan {
                l_end: l,
                l_min,
                baseline,
                sigma_last: sigma,
                warning: None,
            };
        }
        l += 1;
    }
    EndLayerScan {
        l_end: last,
        l_min,
        baseline,
        sigma_last: sigma,
        warning: Some("no stable window after the minimum; l_end falls back to the last layer".into()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionScan {
    pub l_det: usize,
    pub l_star: Option<usize>,
    pub warning: Option<String>,
}

/// `alpha_l = rho_l - 2 rho_{l-1} + rho_{l-2}` where all three are defined.
pub fn second_difference(rho: &[Option<f64>], l: usize) -> Option<f64> {
    if l < 2 || l >= rho.len() {
        return None;
    }
    Some(rho[l]? - 2.0 * rho[l - 1]? + rho[l - 2]?)
}

pub fn find_detection_layer(
    rho: &[Option<f64>],
    l_start: usize,
    l_end: usize,
    rule: DetectionRule,
) -> DetectionScan {
    let hit = (l_start + 2..=l_end).find(|&l| {
        let Some(a) = second_difference(rho, l) else {
            return false;
        };
        match rule {
            DetectionRule::SignTransition => a < 0.0 && second_difference(rho, l - 1).is_some_and(|p| p > 0.0),
            DetectionRule::FirstNegative => a < 0.0,
        }
    });
    match hit {
        Some(l_star) => DetectionScan {
            l_det: (l_star + 1).min(l_end),
            l_star: Some(l_star),
            warning: None,
        },
        None => DetectionScan {
            l_det: (l_start + 1).min(l_end).max(l_start),
            l_star: None,
            warning: Some("no correlation slow-down found; l_det falls back to l_start + 1".into()),
        },
    }
}

/// Averages calibration curves pointwise and applies the three scans once.
pub fn profile_from_curves(curves: &[LayerCurve], params: &ProfilerParams, model_id: &str) -> Result<LayerProfile> {
    params.validate()?;
    let avg = LayerCurve::average(curves)?;
    let l_start = find_start_layer(&avg.s, params);
    let end = find_end_layer(&avg.s, params);
    let det = find_detection_layer(&avg.rho, l_start, end.l_end, params.detection_rule);
    let profile = LayerProfile {
        schema_version: PROFILE_SCHEMA_VERSION,
        model_id: model_id.to_string(),
        num_layers: avg.s.len(),
        l_start,
        l_det: det.l_det,
        l_end: end.l_end,
        params: *params,
        warnings: end.warning.into_iter().chain(det.warning).collect(),
        curves: Some(avg),
    };
    profile.validate()?;
    Ok(profile)
}

/// Curves of one calibration instance under the DECODING setting.
pub fn instance_curve(model: &Model, instance: &TwoStageInstance) -> Result<LayerCurve> {
    let prepared = prepare_instance(model, instance, 0)?;
    let (reuse, full) = build_comparison_setting(model, ComparisonSetting::Decoding, &prepared)?;
    layer_curve(&token_deviation(&reuse, &full, model.spec().d_head)?)
}

/// Runs every calibration instance (in parallel), then profiles the mean curve.
pub fn profile(model: &Model, instances: &[TwoStageInstance], params: &ProfilerParams) -> Result<LayerProfile> {
    if instances.is_empty() {
        return Err(RelayError::EmptyInput("calibration instances"));
    }
    let curves = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| instance_curve(model, inst).map_err(|e| e.in_instance(i)))
        .collect::<Result<Vec<_>>>()?;
    profile_from_curves(&curves, params, &model.model_id())
}

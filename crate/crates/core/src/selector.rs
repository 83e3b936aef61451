//! Runtime token selection for sparse rectification.
//!
//! Two mean-relative criteria plus a fixed trailing window:
//! deviation at the detection layer, accumulated downstream attention
//! (influence), and the last `suffix_k` segment positions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{RelayError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionThresholds {
    pub tau_dev: f64,
    pub tau_inf: f64,
    pub suffix_k: usize,
}

impl Default for SelectionThresholds {
    fn default() -> Self {
        Self {
            tau_dev: 1.5,
            tau_inf: 1.45,
            suffix_k: 10,
        }
    }
}

impl SelectionThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.tau_dev > 0.0 && self.tau_inf > 0.0 && self.tau_dev.is_finite() && self.tau_inf.is_finite() {
            Ok(())
        } else {
            Err(RelayError::InvalidParams(format!(
                "selection thresholds must be positive and finite, got tau_dev={} tau_inf={}",
                self.tau_dev, self.tau_inf
            )))
        }
    }

    /// Selects every position through the trailing window alone.
    pub fn select_all(n: usize) -> Self {
        Self {
            tau_dev: f64::MIN_POSITIVE,
            tau_inf: f64::MIN_POSITIVE,
            suffix_k: n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SelectionTag {
    Dev,
    InfScore,
    InfSuffix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedToken {
    pub index: usize,
    pub tags: Vec<SelectionTag>,
}

/// Sorted, duplicate-free segment positions with the criteria that chose them.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SelectionSet {
    pub segment_len: usize,
    pub tokens: Vec<SelectedToken>,
}

impl SelectionSet {
    pub fn empty(segment_len: usize) -> Self {
        Self {
            segment_len,
            tokens: Vec::new(),
        }
    }

    pub fn from_indices(segment_len: usize, indices: impl IntoIterator<Item = usize>, tag: SelectionTag) -> Result<Self> {
        let mut map: BTreeMap<usize, Vec<SelectionTag>> = BTreeMap::new();
        for i in indices {
            if i >= segment_len {
                return Err(RelayError::InvalidParams(format!(
                    "selection index {i} outside segment of {segment_len}"
                )));
            }
            map.insert(i, vec![tag]);
        }
        Ok(Self::from_map(segment_len, map))
    }

    fn from_map(segment_len: usize, map: BTreeMap<usize, Vec<SelectionTag>>) -> Self {
        Self {
            segment_len,
            tokens: map.into_iter().map(|(index, tags)| SelectedToken { index, tags }).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.index).collect()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.tokens.binary_search_by_key(&index, |t| t.index).is_ok()
    }

    /// Dense membership mask of length `segment_len`.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.segment_len];
        for t in &self.tokens {
            m[t.index] = true;
        }
        m
    }

    pub fn is_superset_of(&self, other: &SelectionSet) -> bool {
        other.tokens.iter().all(|t| self.contains(t.index))
    }

    pub fn union(&self, other: &SelectionSet) -> Result<SelectionSet> {
        if self.segment_len != other.segment_len {
            return Err(RelayError::LengthMismatch {
                op: "selection union",
                left: self.segment_len,
                right: other.segment_len,
            });
        }
        let mut map: BTreeMap<usize, Vec<SelectionTag>> = BTreeMap::new();
        for t in self.tokens.iter().chain(&other.tokens) {
            let tags = map.entry(t.index).or_default();
            tags.extend(&t.tags);
            tags.sort();
            tags.dedup();
        }
        Ok(Self::from_map(self.segment_len, map))
    }

    /// Count of positions carrying each tag (a position may count under several).
    pub fn histogram(&self) -> BTreeMap<SelectionTag, usize> {
        let mut h = BTreeMap::new();
        for t in &self.tokens {
            for &tag in &t.tags {
                *h.entry(tag).or_insert(0) += 1;
            }
        }
        h
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = self.tokens.windows(2).all(|w| w[0].index < w[1].index);
        let in_range = self.tokens.iter().all(|t| t.index < self.segment_len);
        if ordered && in_range {
            Ok(())
        } else {
            Err(RelayError::InvalidParams("selection set must be sorted, unique and in range".into()))
        }
    }
}

/// Mean of non-empty scores, clamped into `[min, max]` so that rounding in
/// the sum cannot push the mean of a constant vector past its elements.
fn mean_clamped(scores: &[f64]) -> f64 {
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    mean.clamp(lo, hi)
}

fn select_relative(scores: &[f64], tau: f64, tag: SelectionTag, what: &'static str) -> Result<SelectionSet> {
    if scores.is_empty() {
        return Err(RelayError::EmptyInput(what));
    }
    if !(tau > 0.0) {
        return Err(RelayError::InvalidParams(format!("{what} threshold must be positive, got {tau}")));
    }
    // A zero score carries no signal; without this an all-zero vector
    // (threshold 0) would select everything.
    let threshold = tau * mean_clamped(scores);
    let picked = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= threshold && s > 0.0)
        .map(|(i, _)| i);
    SelectionSet::from_indices(scores.len(), picked, tag)
}

pub fn select_deviation(s_dev: &[f64], tau_dev: f64) -> Result<SelectionSet> {
    select_relative(s_dev, tau_dev, SelectionTag::Dev, "deviation scores")
}

pub fn select_influence(s_inf: &[f64], tau_inf: f64) -> Result<SelectionSet> {
    select_relative(s_inf, tau_inf, SelectionTag::InfScore, "influence scores")
}

pub fn suffix_set(n: usize, suffix_k: usize) -> SelectionSet {
    SelectionSet::from_indices(n, n.saturating_sub(suffix_k)..n, SelectionTag::InfSuffix).expect("in range")
}

pub fn final_selection(dev: &SelectionSet, inf_score: &SelectionSet, suffix: &SelectionSet) -> Result<SelectionSet> {
    dev.union(inf_score)?.union(suffix)
}

/// Applies all three criteria with one set of thresholds.
pub fn select(s_dev: &[f64], s_inf: &[f64], thresholds: &SelectionThresholds) -> Result<SelectionSet> {
    thresholds.validate()?;
    if s_dev.len() != s_inf.len() {
        return Err(RelayError::LengthMismatch {
            op: "token selection",
            left: s_dev.len(),
            right: s_inf.len(),
        });
    }
    let dev = select_deviation(s_dev, thresholds.tau_dev)?;
    let inf = select_influence(s_inf, thresholds.tau_inf)?;
    final_selection(&dev, &inf, &suffix_set(s_dev.len(), thresholds.suffix_k))
}

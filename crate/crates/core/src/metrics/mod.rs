//! Similarity and deviation statistics between a reused cache and a
//! full-prefill reference.

mod comparison;

use serde::{Deserialize, Serialize};

use crate::error::{RelayError, Result};
use crate::tensor::{cosine_unchecked, l2_norm, Tensor};

pub use comparison::{
    build_comparison_setting, build_with_replacement, prepare_instance, ComparisonSetting,
    PreparedInstance, TwoStageInstance,
};

/// Segment rows of K (post-rotation at the target placement) and V per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentKv {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

impl SegmentKv {
    pub fn num_layers(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-(token, layer) comparison of two caches, stored row-major `[N x L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationMatrix {
    pub tokens: usize,
    pub layers: usize,
    /// `d[j][l] = 1 - mean_h cos(v_reuse, v_full)`, in `[0, 2]`.
    pub value_dev: Vec<f64>,
    pub key_cos: Vec<f64>,
    pub key_norm_ratio: Vec<f64>,
    pub value_norm_ratio: Vec<f64>,
}

impl DeviationMatrix {
    pub fn d(&self, j: usize, l: usize) -> f64 {
        self.value_dev[j * self.layers + l]
    }

    /// Deviation of every token at layer `l`.
    pub fn column(&self, l: usize) -> Vec<f64> {
        (0..self.tokens).map(|j| self.d(j, l)).collect()
    }

    /// Mean value-cosine of token `j` across layers.
    pub fn token_value_cos(&self, j: usize) -> f64 {
        let row = &self.value_dev[j * self.layers..(j + 1) * self.layers];
        row.iter().map(|d| 1.0 - d).sum::<f64>() / self.layers as f64
    }

    pub fn token_key_cos(&self, j: usize) -> f64 {
        let row = &self.key_cos[j * self.layers..(j + 1) * self.layers];
        row.iter().sum::<f64>() / self.layers as f64
    }
}

/// Deviation of a single cell: one minus the head-averaged cosine of two
/// `[kv_heads * head_dim]` rows.
pub fn value_deviation(reuse: &[f32], full: &[f32], head_dim: usize) -> f64 {
    1.0 - mean_head_cosine(reuse, full, head_dim)
}

fn mean_head_cosine(a: &[f32], b: &[f32], head_dim: usize) -> f64 {
    let heads = a.len() / head_dim;
    let mut sum = 0.0f64;
    for (x, y) in a.chunks(head_dim).zip(b.chunks(head_dim)) {
        sum += cosine_unchecked(x, y);
    }
    sum / heads as f64
}

/// Symmetric bounded norm similarity `min/max`; two zero vectors count as 1.
pub fn norm_ratio(a: &[f32], b: &[f32]) -> f64 {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    let hi = na.max(nb);
    if hi < 1e-12 {
        1.0
    } else {
        na.min(nb) / hi
    }
}

fn mean_head_norm_ratio(a: &[f32], b: &[f32], head_dim: usize) -> f64 {
    let heads = a.len() / head_dim;
    let mut sum = 0.0;
    for (x, y) in a.chunks(head_dim).zip(b.chunks(head_dim)) {
        sum += norm_ratio(x, y);
    }
    sum / heads as f64
}

/// Per-token, per-layer deviation of `reuse` against `full`. Heads are the
/// stored KV heads, `head_dim` wide.
pub fn token_deviation(reuse: &SegmentKv, full: &SegmentKv, head_dim: usize) -> Result<DeviationMatrix> {
    let layers = full.num_layers();
    if reuse.num_layers() != layers || reuse.keys.len() != layers || full.keys.len() != layers {
        return Err(RelayError::LengthMismatch {
            op: "token_deviation layers",
            left: reuse.num_layers(),
            right: layers,
        });
    }
    for (a, b) in reuse
        .values
        .iter()
        .chain(&reuse.keys)
        .zip(full.values.iter().chain(&full.keys))
    {
        if a.shape() != b.shape() {
            return Err(RelayError::ShapeMismatch {
                op: "token_deviation",
                expected: b.shape().to_vec(),
                got: a.shape().to_vec(),
            });
        }
    }
    let n = full.len();
    let cells = n * layers;
    let mut m = DeviationMatrix {
        tokens: n,
        layers,
        value_dev: vec![0.0; cells],
        key_cos: vec![0.0; cells],
        key_norm_ratio: vec![0.0; cells],
        value_norm_ratio: vec![0.0; cells],
    };
    for l in 0..layers {
        for j in 0..n {
            let idx = j * layers + l;
            let (rv, fv) = (reuse.values[l].row(j), full.values[l].row(j));
            let (rk, fk) = (reuse.keys[l].row(j), full.keys[l].row(j));
            m.value_dev[idx] = value_deviation(rv, fv, head_dim);
            m.key_cos[idx] = mean_head_cosine(rk, fk, head_dim);
            m.value_norm_ratio[idx] = mean_head_norm_ratio(rv, fv, head_dim);
            m.key_norm_ratio[idx] = mean_head_norm_ratio(rk, fk, head_dim);
        }
    }
    Ok(m)
}

/// Layer similarity `s_l = mean_j (1 - d[j][l])` for every layer.
pub fn layer_similarity(dev: &DeviationMatrix) -> Result<Vec<f64>> {
    if dev.tokens == 0 {
        return Err(RelayError::EmptySegment);
    }
    Ok((0..dev.layers)
        .map(|l| (0..dev.tokens).map(|j| 1.0 - dev.d(j, l)).sum::<f64>() / dev.tokens as f64)
        .collect())
}

fn layer_mean(dev: &DeviationMatrix, values: &[f64]) -> Vec<f64> {
    (0..dev.layers)
        .map(|l| (0..dev.tokens).map(|j| values[j * dev.layers + l]).sum::<f64>() / dev.tokens as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    /// Set when either input is constant; `rho` is then 0.
    pub degenerate: bool,
}

/// 1-based ranks with ties sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut k = i;
        while k + 1 < idx.len() && x[idx[k + 1]] == x[idx[i]] {
            k += 1;
        }
        let mean = (i + k) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=k] {
            ranks[p] = mean;
        }
        i = k + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> SpearmanResult {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return SpearmanResult {
            rho: 0.0,
            degenerate: true,
        };
    }
    SpearmanResult {
        rho: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<SpearmanResult> {
    if x.len() != y.len() {
        return Err(RelayError::LengthMismatch {
            op: "spearman",
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(RelayError::EmptyInput("spearman needs at least 2 samples"));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

/// Layer-wise similarity `s` and adjacent-layer rank correlation `rho`.
/// `rho[0]` is always `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub s: Vec<f64>,
    pub rho: Vec<Option<f64>>,
}

impl LayerCurve {
    pub fn num_layers(&self) -> usize {
        self.s.len()
    }

    /// Pointwise mean over curves of equal length.
    pub fn average(curves: &[LayerCurve]) -> Result<LayerCurve> {
        let first = curves.first().ok_or(RelayError::EmptyInput("curves to average"))?;
        let l = first.s.len();
        if curves.iter().any(|c| c.s.len() != l || c.rho.len() != l) {
            return Err(RelayError::InvalidParams("curves differ in layer count".into()));
        }
        let k = curves.len() as f64;
        let s = (0..l).map(|i| curves.iter().map(|c| c.s[i]).sum::<f64>() / k).collect();
        let rho = (0..l)
            .map(|i| {
                let vals: Vec<f64> = curves.iter().filter_map(|c| c.rho[i]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        Ok(LayerCurve { s, rho })
    }
}

/// Adjacent-layer Spearman correlation of deviation columns; also reports
/// which layers had a constant column.
pub fn adjacent_rho(dev: &DeviationMatrix) -> (Vec<Option<f64>>, Vec<usize>) {
    let mut rho = vec![None; dev.layers];
    let mut degenerate = Vec::new();
    if dev.tokens < 2 {
        return (rho, degenerate);
    }
    let mut prev = dev.column(0);
    for (l, slot) in rho.iter_mut().enumerate().skip(1) {
        let cur = dev.column(l);
        let r = pearson(&average_ranks(&prev), &average_ranks(&cur));
        if r.degenerate {
            degenerate.push(l);
        }
        *slot = Some(r.rho);
        prev = cur;
    }
    (rho, degenerate)
}

pub fn layer_curve(dev: &DeviationMatrix) -> Result<LayerCurve> {
    Ok(LayerCurve {
        s: layer_similarity(dev)?,
        rho: adjacent_rho(dev).0,
    })
}

/// All four layer-wise similarity curves plus `rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub value_cos: Vec<f64>,
    pub key_cos: Vec<f64>,
    pub value_norm: Vec<f64>,
    pub key_norm: Vec<f64>,
    pub rho: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRow {
    pub layer: usize,
    pub s_value_cos: f64,
    pub s_key_cos: f64,
    pub s_value_norm: f64,
    pub s_key_norm: f64,
    pub rho: Option<f64>,
}

impl CurveSet {
    pub fn from_deviation(dev: &DeviationMatrix) -> Result<CurveSet> {
        Ok(CurveSet {
            value_cos: layer_similarity(dev)?,
            key_cos: layer_mean(dev, &dev.key_cos),
            value_norm: layer_mean(dev, &dev.value_norm_ratio),
            key_norm: layer_mean(dev, &dev.key_norm_ratio),
            rho: adjacent_rho(dev).0,
        })
    }

    pub fn average(sets: &[CurveSet]) -> Result<CurveSet> {
        let first = sets.first().ok_or(RelayError::EmptyInput("curve sets to average"))?;
        let l = first.value_cos.len();
        let k = sets.len() as f64;
        let mean = |f: &dyn Fn(&CurveSet) -> &Vec<f64>| -> Vec<f64> {
            (0..l).map(|i| sets.iter().map(|c| f(c)[i]).sum::<f64>() / k).collect()
        };
        let rho = LayerCurve::average(
            &sets
                .iter()
                .map(|c| LayerCurve {
                    s: c.value_cos.clone(),
                    rho: c.rho.clone(),
                })
                .collect::<Vec<_>>(),
        )?
        .rho;
        Ok(CurveSet {
            value_cos: mean(&|c| &c.value_cos),
            key_cos: mean(&|c| &c.key_cos),
            value_norm: mean(&|c| &c.value_norm),
            key_norm: mean(&|c| &c.key_norm),
            rho,
        })
    }

    pub fn layer_curve(&self) -> LayerCurve {
        LayerCurve {
            s: self.value_cos.clone(),
            rho: self.rho.clone(),
        }
    }

    /// Rows for the `layer, s_value_cos, s_key_cos, s_value_norm, s_key_norm, rho` CSV.
    pub fn rows(&self) -> Vec<CurveRow> {
        (0..self.value_cos.len())
            .map(|l| CurveRow {
                layer: l,
                s_value_cos: self.value_cos[l],
                s_key_cos: self.key_cos[l],
                s_value_norm: self.value_norm[l],
                s_key_norm: self.key_norm[l],
                rho: self.rho[l],
            })
            .collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in self.rows() {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kv(layers: usize, n: usize, width: usize, seed: u64) -> SegmentKv {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = || {
            let d = (0..n * width).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            Tensor::from_rows(n, width, d).unwrap()
        };
        SegmentKv {
            keys: (0..layers).map(|_| t()).collect(),
            values: (0..layers).map(|_| t()).collect(),
        }
    }

    fn negate(t: &Tensor) -> Tensor {
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| -v).collect()).unwrap()
    }

    /// Independent per-head loop over the deviation and layer similarity.
    fn naive_dev(reuse: &SegmentKv, full: &SegmentKv, head_dim: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let (layers, n) = (full.num_layers(), full.len());
        let heads = full.values[0].cols() / head_dim;
        let mut d = vec![vec![0.0; layers]; n];
        for (j, row) in d.iter_mut().enumerate() {
            for (l, cell) in row.iter_mut().enumerate() {
                let mut total = 0.0f64;
                for h in 0..heads {
                    let a = &reuse.values[l].row(j)[h * head_dim..(h + 1) * head_dim];
                    let b = &full.values[l].row(j)[h * head_dim..(h + 1) * head_dim];
                    let mut dot = 0.0f64;
                    let mut na = 0.0f64;
                    let mut nb = 0.0f64;
                    for i in 0..head_dim {
                        dot += a[i] as f64 * b[i] as f64;
                        na += a[i] as f64 * a[i] as f64;
                        nb += b[i] as f64 * b[i] as f64;
                    }
                    total += if na.sqrt() < 1e-12 || nb.sqrt() < 1e-12 {
                        0.0
                    } else {
                        (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
                    };
                }
                *cell = 1.0 - total / heads as f64;
            }
        }
        let s = (0..layers)
            .map(|l| d.iter().map(|row| 1.0 - row[l]).sum::<f64>() / n as f64)
            .collect();
        (d, s)
    }

    #[test]
    fn eq1_eq2_match_naive_loop_exactly() {
        let a = kv(4, 9, 12, 1);
        let b = kv(4, 9, 12, 2);
        let dev = token_deviation(&a, &b, 4).unwrap();
        let (d, s) = naive_dev(&a, &b, 4);
        for j in 0..9 {
            for l in 0..4 {
                assert_eq!(dev.d(j, l), d[j][l]);
            }
        }
        assert_eq!(layer_similarity(&dev).unwrap(), s);
    }

    #[test]
    fn identical_caches_give_zero_deviation() {
        let a = kv(3, 5, 8, 3);
        let dev = token_deviation(&a, &a.clone(), 4).unwrap();
        assert!(dev.value_dev.iter().all(|&d| d == 0.0));
        assert!(dev.key_cos.iter().all(|&c| c == 1.0));
        assert_eq!(layer_similarity(&dev).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn negated_values_give_two() {
        let a = kv(2, 4, 8, 4);
        let mut b = a.clone();
        b.values = b.values.iter().map(negate).collect();
        let dev = token_deviation(&b, &a, 4).unwrap();
        assert!(dev.value_dev.iter().all(|&d| (d - 2.0).abs() < 1e-12));
    }

    #[test]
    fn two_head_hand_example() {
        // head 0 identical (cos 1), head 1 at 60 degrees (cos 0.5)
        let full = [1.0f32, 0.0, 1.0, 0.0];
        let reuse = [1.0f32, 0.0, 0.5, 3.0f32.sqrt() / 2.0];
        assert!((value_deviation(&reuse, &full, 2) - 0.25).abs() < 1e-7);
    }

    #[test]
    fn layer_similarity_examples() {
        let dev = DeviationMatrix {
            tokens: 2,
            layers: 1,
            value_dev: vec![0.1, 0.3],
            key_cos: vec![1.0; 2],
            key_norm_ratio: vec![1.0; 2],
            value_norm_ratio: vec![1.0; 2],
        };
        assert!((layer_similarity(&dev).unwrap()[0] - 0.8).abs() < 1e-12);
        let empty = DeviationMatrix {
            tokens: 0,
            layers: 1,
            value_dev: vec![],
            key_cos: vec![],
            key_norm_ratio: vec![],
            value_norm_ratio: vec![],
        };
        assert!(layer_similarity(&empty).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = kv(2, 4, 8, 4);
        let b = kv(2, 5, 8, 4);
        assert!(token_deviation(&a, &b, 4).is_err());
    }

    #[test]
    fn spearman_examples() {
        let v = [0.3, -1.0, 2.0, 0.7];
        assert!((spearman(&v, &v).unwrap().rho - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((spearman(&v, &rev).unwrap().rho + 1.0).abs() < 1e-12);
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r.rho - 1.5 / 3.0f64.sqrt()).abs() < 1e-12);
        let flat = spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(flat, SpearmanResult { rho: 0.0, degenerate: true });
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn curve_average_is_idempotent() {
        let c = LayerCurve {
            s: vec![0.9, 0.8, 0.95],
            rho: vec![None, Some(0.2), Some(0.5)],
        };
        assert_eq!(LayerCurve::average(&[c.clone(), c.clone()]).unwrap(), c);
    }

    fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|a| {
                    let less = v.iter().filter(|b| *b < a).count() as f64;
                    let eq = v.iter().filter(|b| *b == a).count() as f64;
                    less + (eq + 1.0) / 2.0
                })
                .collect()
        };
        let (rx, ry) = (rank(x), rank(y));
        let n = x.len() as f64;
        let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        if vx == 0.0 || vy == 0.0 {
            0.0
        } else {
            cov / (vx * vy).sqrt()
        }
    }

    proptest! {
        #[test]
        fn spearman_matches_brute_force(
            x in prop::collection::vec(0i32..6, 2..40),
            y in prop::collection::vec(-3.0f64..3.0, 40),
        ) {
            let x: Vec<f64> = x.into_iter().map(f64::from).collect();
            let y = &y[..x.len()];
            let r = spearman(&x, y).unwrap().rho;
            prop_assert!((r - brute_spearman(&x, y)).abs() < 1e-9);
        }

        #[test]
        fn spearman_invariant_under_monotone_maps(
            x in prop::collection::vec(-3.0f64..3.0, 3..30),
            y in prop::collection::vec(-3.0f64..3.0, 30),
            a in 0.1f64..5.0,
            b in -2.0f64..2.0,
        ) {
            let y = &y[..x.len()];
            let base = spearman(&x, y).unwrap().rho;
            let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            let affine: Vec<f64> = y.iter().map(|v| a * v + b).collect();
            prop_assert!((spearman(&ex, y).unwrap().rho - base).abs() < 1e-12);
            prop_assert!((spearman(&x, &affine).unwrap().rho - base).abs() < 1e-12);
        }

        #[test]
        fn deviation_bounds(seed in 0u64..1000) {
            let dev = token_deviation(&kv(3, 6, 8, seed), &kv(3, 6, 8, seed + 1), 4).unwrap();
            prop_assert!(dev.value_dev.iter().all(|&d| (0.0..=2.0).contains(&d)));
            prop_assert!(layer_similarity(&dev).unwrap().iter().all(|&s| (-1.0..=1.0).contains(&s)));
            prop_assert!(dev.value_norm_ratio.iter().all(|&r| r > 0.0 && r <= 1.0));
        }
    }
}

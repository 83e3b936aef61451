use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RelayError, Result};
use crate::metrics::{
    build_comparison_setting, prepare_instance, token_deviation, value_deviation, ComparisonSetting, CurveSet,
    PreparedInstance, TwoStageInstance,
};
use crate::model::{CaptureFlags, KvContext, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroRow {
    pub setting: ComparisonSetting,
    pub value_cos: f64,
    pub key_cos: f64,
    pub value_norm: f64,
    pub key_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRow {
    pub setting: ComparisonSetting,
    pub position: usize,
    pub value_cos: f64,
    pub key_cos: f64,
    pub instances: usize,
}

/// Suffix value similarity after swapping in full-prefill segment KV at
/// layers `0..=layer` (`up_to`) or `layer..L` (`from`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub layer: usize,
    pub up_to_value_cos: f64,
    pub from_value_cos: f64,
    /// `(sim - sim_none) / (1 - sim_none)`; 1 when nothing was lost.
    pub up_to_recovery: f64,
    pub from_recovery: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub macro_rows: Vec<MacroRow>,
    pub curves: Vec<(ComparisonSetting, CurveSet)>,
    pub token_rows: Vec<TokenRow>,
    pub recovery: Vec<RecoveryRow>,
}

struct InstanceObservation {
    curves: Vec<CurveSet>,
    token_cos: Vec<Vec<(f64, f64)>>,
    recovery: Option<Vec<(f64, f64)>>,
    baseline: Option<f64>,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Mean head-averaged value cosine of suffix rows over every layer.
fn suffix_similarity(a: &[crate::tensor::Tensor], b: &[crate::tensor::Tensor], head_dim: usize) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, y) in a.iter().zip(b) {
        for r in 0..x.rows() {
            sum += 1.0 - value_deviation(x.row(r), y.row(r), head_dim);
            count += 1;
        }
    }
    sum / count as f64
}

/// Suffix value rows when segment layer `l` comes from `full` if
/// `use_full(l)` and from the realigned decode cache otherwise.
fn substituted_suffix(
    model: &Model,
    prepared: &PreparedInstance,
    full_ctx: &KvContext,
    use_full: impl Fn(usize) -> bool,
) -> Result<Vec<crate::tensor::Tensor>> {
    let inst = &prepared.instance;
    let p = inst.stage2_prefix.len();
    let n = prepared.segment.len();
    let re = prepared.cache.realign(p)?;
    let mut ctx = KvContext::new(model.spec());
    for l in 0..ctx.num_layers() {
        let src = full_ctx.layer(l);
        let dst = ctx.layer_mut(l);
        for pos in 0..p {
            dst.write(pos, src.key(pos), src.value(pos))?;
        }
        for j in 0..n {
            if use_full(l) {
                dst.write(p + j, src.key(p + j), src.value(p + j))?;
            } else {
                dst.write(p + j, re.keys[l].row(j), re.values[l].row(j))?;
            }
        }
    }
    let flags = CaptureFlags {
        kv: true,
        ..Default::default()
    };
    Ok(model.prefill(&inst.stage2_suffix, &mut ctx, p + n, &flags)?.trace.values)
}

fn observe_instance(model: &Model, inst: &TwoStageInstance) -> Result<InstanceObservation> {
    let prepared = prepare_instance(model, inst, 0)?;
    let dh = model.spec().d_head;
    let mut curves = Vec::new();
    let mut token_cos = Vec::new();
    for setting in ComparisonSetting::ALL {
        let (reuse, full) = build_comparison_setting(model, setting, &prepared)?;
        let dev = token_deviation(&reuse, &full, dh)?;
        curves.push(CurveSet::from_deviation(&dev)?);
        token_cos.push((0..dev.tokens).map(|j| (dev.token_value_cos(j), dev.token_key_cos(j))).collect());
    }
    let (recovery, baseline) = if inst.stage2_suffix.is_empty() {
        (None, None)
    } else {
        let mut tokens = inst.stage2_prefix.clone();
        tokens.extend(&prepared.segment);
        tokens.extend(&inst.stage2_suffix);
        let mut full_ctx = KvContext::new(model.spec());
        let flags = CaptureFlags {
            kv: true,
            ..Default::default()
        };
        let out = model.prefill(&tokens, &mut full_ctx, 0, &flags)?;
        let start = tokens.len() - inst.stage2_suffix.len();
        let rows: Vec<usize> = (start..tokens.len()).collect();
        let full_suffix: Vec<_> = out.trace.values.iter().map(|v| v.gather_rows(&rows)).collect();
        let sim = |f: &dyn Fn(usize) -> bool| -> Result<f64> {
            Ok(suffix_similarity(&substituted_suffix(model, &prepared, &full_ctx, f)?, &full_suffix, dh))
        };
        let layers = model.spec().num_layers;
        let baseline = sim(&|_| false)?;
        let mut rows = Vec::with_capacity(layers);
        for l in 0..layers {
            rows.push((sim(&|x| x <= l)?, sim(&|x| x >= l)?));
        }
        (Some(rows), Some(baseline))
    };
    Ok(InstanceObservation {
        curves,
        token_cos,
        recovery,
        baseline,
    })
}

fn recovery_ratio(sim: f64, none: f64) -> f64 {
    let lost = 1.0 - none;
    if lost.abs() < 1e-12 {
        1.0
    } else {
        (sim - none) / lost
    }
}

/// Runs the three comparison settings and the substitution sweep over every
/// instance (in parallel) and averages the results.
pub fn observe(model: &Model, instances: &[TwoStageInstance]) -> Result<Observation> {
    if instances.is_empty() {
        return Err(RelayError::EmptyInput("calibration instances"));
    }
    let per: Vec<InstanceObservation> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| observe_instance(model, inst).map_err(|e| e.in_instance(i)))
        .collect::<Result<_>>()?;

    let mut macro_rows = Vec::new();
    let mut curves = Vec::new();
    let mut token_rows = Vec::new();
    for (k, setting) in ComparisonSetting::ALL.into_iter().enumerate() {
        let sets: Vec<CurveSet> = per.iter().map(|o| o.curves[k].clone()).collect();
        let avg = CurveSet::average(&sets)?;
        macro_rows.push(MacroRow {
            setting,
            value_cos: mean(&avg.value_cos),
            key_cos: mean(&avg.key_cos),
            value_norm: mean(&avg.value_norm),
            key_norm: mean(&avg.key_norm),
        });
        curves.push((setting, avg));
        let longest = per.iter().map(|o| o.token_cos[k].len()).max().unwrap_or(0);
        for position in 0..longest {
            let vals: Vec<(f64, f64)> = per.iter().filter_map(|o| o.token_cos[k].get(position).copied()).collect();
            let c = vals.len() as f64;
            token_rows.push(TokenRow {
                setting,
                position,
                value_cos: vals.iter().map(|v| v.0).sum::<f64>() / c,
                key_cos: vals.iter().map(|v| v.1).sum::<f64>() / c,
                instances: vals.len(),
            });
        }
    }

    let swept: Vec<(&Vec<(f64, f64)>, f64)> = per
        .iter()
        .filter_map(|o| Some((o.recovery.as_ref()?, o.baseline?)))
        .collect();
    let mut recovery = Vec::new();
    if !swept.is_empty() {
        let c = swept.len() as f64;
        let layers = model.spec().num_layers;
        for l in 0..layers {
            let up: f64 = swept.iter().map(|(r, _)| r[l].0).sum::<f64>() / c;
            let from: f64 = swept.iter().map(|(r, _)| r[l].1).sum::<f64>() / c;
            let up_rec: f64 = swept.iter().map(|(r, b)| recovery_ratio(r[l].0, *b)).sum::<f64>() / c;
            let from_rec: f64 = swept.iter().map(|(r, b)| recovery_ratio(r[l].1, *b)).sum::<f64>() / c;
            recovery.push(RecoveryRow {
                layer: l,
                up_to_value_cos: up,
                from_value_cos: from,
                up_to_recovery: up_rec,
                from_recovery: from_rec,
            });
        }
    }
    Ok(Observation {
        macro_rows,
        curves,
        token_rows,
        recovery,
    })
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl Observation {
    /// Writes `macro.csv`, `curves_<setting>.csv`, `token_profile.csv` and
    /// `recovery.csv` into `dir`, creating it if needed. Returns the paths.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        let p = dir.join("macro.csv");
        write_rows(&p, &self.macro_rows, &[])?;
        paths.push(p);
        for (setting, set) in &self.curves {
            let p = dir.join(format!("curves_{}.csv", setting.name().to_lowercase()));
            set.write_csv(std::fs::File::create(&p)?)?;
            paths.push(p);
        }
        let p = dir.join("token_profile.csv");
        write_rows(&p, &self.token_rows, &[])?;
        paths.push(p);
        let p = dir.join("recovery.csv");
        write_rows(
            &p,
            &self.recovery,
            &["layer", "up_to_value_cos", "from_value_cos", "up_to_recovery", "from_recovery"],
        )?;
        paths.push(p);
        Ok(paths)
    }

    pub fn macro_row(&self, setting: ComparisonSetting) -> &MacroRow {
        self.macro_rows.iter().find(|r| r.setting == setting).expect("every setting observed")
    }
}

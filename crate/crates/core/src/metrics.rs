//! Registration accuracy metrics.
//!
//! Rigid protocols use the mean corner-point error relative to the image
//! size and the success rate below a threshold. Label protocols use the Dice
//! overlap, its volume-weighted mean over labels and the 95th percentile
//! symmetric surface distance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DisplacementField, Geometry, LabelField};
use crate::synth::GroundTruthWarp;

pub const DEFAULT_SUCCESS_THRESHOLD: f64 = 2.0;

/// The four corner pixel centers of a 2D image.
pub fn corners(extents: &[usize]) -> [[f64; 2]; 4] {
    let a = (extents[0] - 1) as f64;
    let b = (extents[1] - 1) as f64;
    [[0.0, 0.0], [0.0, b], [a, 0.0], [a, b]]
}

/// `100 * mean_corners |T_est(c) - T_gt(c)| / max(H, W)`, in percent.
///
/// Both maps take transformed-frame pixel positions to fixed-frame positions.
pub fn corner_relative_distance<E, G>(estimated: E, truth: G, extents: &[usize]) -> f64
where
    E: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let l = extents.iter().copied().max().unwrap_or(1) as f64;
    let total: f64 = corners(extents)
        .iter()
        .map(|c| {
            let e = estimated(c);
            let t = truth(c);
            e.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        })
        .sum();
    100.0 * total / 4.0 / l
}

/// Corner relative distance of a dense displacement field against a
/// ground-truth warp.
pub fn corner_error(field: &DisplacementField, truth: &GroundTruthWarp) -> f64 {
    let g = field.geometry();
    let estimate = |c: &[f64]| {
        let idx: Vec<usize> = c.iter().map(|&v| v as usize).collect();
        let disp = field.at(g.flat_index(&idx));
        c.iter().zip(disp).map(|(p, &u)| p + u as f64).collect()
    };
    corner_relative_distance(estimate, |c| truth.apply(c), &field.extents)
}

/// Fraction of distances strictly below `threshold`.
pub fn success_rate(distances: &[f64], threshold: f64) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::InvalidArgument("success rate of an empty list".into()));
    }
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument("threshold must be positive".into()));
    }
    let hits = distances.iter().filter(|&&d| d < threshold).count();
    Ok(hits as f64 / distances.len() as f64)
}

fn check_same(a: &Geometry, b: &Geometry) -> Result<()> {
    if a.extents != b.extents {
        return Err(Error::GeometryMismatch(format!(
            "mask extents {:?} and {:?} differ",
            a.extents, b.extents
        )));
    }
    Ok(())
}

/// `2|A & B| / (|A| + |B|)` over non-zero voxels; 1 when both are empty.
pub fn dice(a: &LabelField, b: &LabelField) -> Result<f64> {
    check_same(&a.geometry, &b.geometry)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (x, y) = (x != 0, y != 0);
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// `sum_l count_l * dice_l / sum_l count_l`.
pub fn weighted_dice(dices: &[f64], counts: &[usize]) -> Result<f64> {
    if dices.len() != counts.len() {
        return Err(Error::InvalidArgument(
            "one voxel count per label is required".into(),
        ));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("total reference voxel count is zero".into()));
    }
    let acc: f64 = dices.iter().zip(counts).map(|(d, &c)| d * c as f64).sum();
    Ok(acc / total as f64)
}

/// Foreground voxels with at least one face neighbor that is background or
/// outside the domain.
pub fn boundary_voxels(mask: &LabelField) -> Vec<usize> {
    let g = &mask.geometry;
    let d = g.dim();
    let mut idx = vec![0usize; d];
    let mut out = Vec::new();
    for flat in 0..g.len() {
        if mask.values[flat] == 0 {
            continue;
        }
        g.unravel(flat, &mut idx);
        let mut edge = false;
        for k in 0..d {
            if idx[k] == 0 || idx[k] + 1 == g.extents[k] {
                edge = true;
                break;
            }
            let stride: usize = g.extents[k + 1..].iter().product();
            if mask.values[flat - stride] == 0 || mask.values[flat + stride] == 0 {
                edge = true;
                break;
            }
        }
        if edge {
            out.push(flat);
        }
    }
    out
}

/// Squared Euclidean distance (mm^2) from every voxel to the nearest voxel
/// in `features`, by separable lower-envelope passes with per-axis spacing.
pub fn squared_distance_transform(geometry: &Geometry, features: &[usize]) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; geometry.len()];
    for &f in features {
        dist[f] = 0.0;
    }
    let d = geometry.dim();
    for axis in 0..d {
        let n = geometry.extents[axis];
        let stride: usize = geometry.extents[axis + 1..].iter().product();
        let spacing = geometry.spacing[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let mut env = LowerEnvelope::new(n);
        for start in 0..geometry.len() {
            // visit each line once, from its first element
            if (start / stride) % n != 0 {
                continue;
            }
            for i in 0..n {
                line[i] = dist[start + i * stride];
            }
            env.transform(&line, spacing, &mut out);
            for i in 0..n {
                dist[start + i * stride] = out[i];
            }
        }
    }
    dist
}

struct LowerEnvelope {
    vertices: Vec<usize>,
    bounds: Vec<f64>,
}

impl LowerEnvelope {
    fn new(n: usize) -> Self {
        Self {
            vertices: vec![0; n],
            bounds: vec![0.0; n + 1],
        }
    }

    /// `out[q] = min_p (spacing * (q - p))^2 + f[p]` over finite `f[p]`.
    fn transform(&mut self, f: &[f64], spacing: f64, out: &mut [f64]) {
        let n = f.len();
        let pos = |i: usize| i as f64 * spacing;
        let mut k: isize = -1;
        for q in 0..n {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                if k < 0 {
                    k = 0;
                    self.vertices[0] = q;
                    self.bounds[0] = f64::NEG_INFINITY;
                    self.bounds[1] = f64::INFINITY;
                    break;
                }
                let p = self.vertices[k as usize];
                let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p)))
                    / (2.0 * (pos(q) - pos(p)));
                if s <= self.bounds[k as usize] {
                    k -= 1;
                    continue;
                }
                k += 1;
                self.vertices[k as usize] = q;
                self.bounds[k as usize] = s;
                self.bounds[k as usize + 1] = f64::INFINITY;
                break;
            }
        }
        if k < 0 {
            out.fill(f64::INFINITY);
            return;
        }
        let mut j = 0usize;
        for (q, o) in out.iter_mut().enumerate() {
            while self.bounds[j + 1] < pos(q) {
                j += 1;
            }
            let p = self.vertices[j];
            let dx = pos(q) - pos(p);
            *o = dx * dx + f[p];
        }
    }
}

/// Linear-interpolated quantile of unsorted values, `q` in `[0,1]`.
pub fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as f64;
    values[lo] + frac * (values[hi] - values[lo])
}

/// 95th percentile of the pooled boundary-to-boundary distances in both
/// directions, in mm. `spacing` overrides the geometry spacing of `a`.
pub fn hd95(a: &LabelField, b: &LabelField, spacing: &[f64]) -> Result<f64> {
    check_same(&a.geometry, &b.geometry)?;
    if a.values.iter().all(|&v| v == 0) {
        return Err(Error::EmptyMask("first mask has no foreground voxels"));
    }
    if b.values.iter().all(|&v| v == 0) {
        return Err(Error::EmptyMask("second mask has no foreground voxels"));
    }
    let geometry = Geometry::with_spacing(a.geometry.extents.clone(), spacing.to_vec())?;
    let edge_a = boundary_voxels(a);
    let edge_b = boundary_voxels(b);
    let to_b = squared_distance_transform(&geometry, &edge_b);
    let to_a = squared_distance_transform(&geometry, &edge_a);
    let mut pooled: Vec<f64> = edge_a
        .iter()
        .map(|&i| to_b[i].sqrt())
        .chain(edge_b.iter().map(|&i| to_a[i].sqrt()))
        .collect();
    Ok(quantile(&mut pooled, 0.95))
}

/// Per-label overlap summary between a warped and a reference label map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub labels: Vec<u32>,
    pub dice: Vec<f64>,
    pub hd95: Vec<f64>,
    pub mean_dice: f64,
    pub weighted_dice: f64,
    pub mean_hd95: f64,
}

/// Scores every label present in `reference`. Labels missing from
/// `estimate` get Dice 0 and are left out of the HD-95 mean.
pub fn label_scores(estimate: &LabelField, reference: &LabelField) -> Result<LabelScores> {
    check_same(&estimate.geometry, &reference.geometry)?;
    let labels = reference.labels();
    if labels.is_empty() {
        return Err(Error::EmptyMask("reference label map has no labels"));
    }
    let mut dices = Vec::new();
    let mut counts = Vec::new();
    let mut hds = Vec::new();
    for &l in &labels {
        let (e, r) = (estimate.mask(l), reference.mask(l));
        dices.push(dice(&e, &r)?);
        counts.push(reference.count(l));
        match hd95(&e, &r, &reference.geometry.spacing) {
            Ok(h) => hds.push(h),
            Err(Error::EmptyMask(_)) => hds.push(f64::NAN),
            Err(e) => return Err(e),
        }
    }
    let finite: Vec<f64> = hds.iter().copied().filter(|h| h.is_finite()).collect();
    let mean_hd95 = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(LabelScores {
        mean_dice: dices.iter().sum::<f64>() / dices.len() as f64,
        weighted_dice: weighted_dice(&dices, &counts)?,
        labels,
        dice: dices,
        hd95: hds,
        mean_hd95,
    })
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Summary {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub name: String,
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<PairMetrics>,
    pub aggregate: BTreeMap<String, Summary>,
    pub success_rate: Option<f64>,
    pub threshold: Option<f64>,
}

impl EvalReport {
    /// Builds aggregates over every metric column. When `success` names a
    /// column, its success rate under `threshold` is reported too.
    pub fn new(pairs: Vec<PairMetrics>, success: Option<(&str, f64)>) -> Result<Self> {
        let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for p in &pairs {
            for (k, v) in &p.values {
                columns.entry(k.clone()).or_default().push(*v);
            }
        }
        let aggregate = columns
            .iter()
            .map(|(k, v)| {
                let finite: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
                (k.clone(), summarize(&finite))
            })
            .collect();
        let (success_rate, threshold) = match success {
            Some((column, t)) => {
                let values = columns.get(column).cloned().unwrap_or_default();
                (Some(success_rate(&values, t)?), Some(t))
            }
            None => (None, None),
        };
        Ok(Self {
            pairs,
            aggregate,
            success_rate,
            threshold,
        })
    }

    pub fn to_csv(&self) -> String {
        let columns: Vec<&String> = self.aggregate.keys().collect();
        let mut out = String::from("pair");
        for c in &columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for p in &self.pairs {
            out.push_str(&p.name);
            for c in &columns {
                out.push(',');
                if let Some(v) = p.values.get(*c) {
                    out.push_str(&format!("{v}"));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn aggregate_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Aggregate<'a> {
            pairs: usize,
            metrics: &'a BTreeMap<String, Summary>,
            success_rate: Option<f64>,
            threshold: Option<f64>,
        }
        Ok(serde_json::to_string_pretty(&Aggregate {
            pairs: self.pairs.len(),
            metrics: &self.aggregate,
            success_rate: self.success_rate,
            threshold: self.threshold,
        })?)
    }
}

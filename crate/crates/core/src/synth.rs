//! Synthetic ground-truth pairs: random blob textures, analytic warps and
//! ellipsoid label maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Geometry, LabelField, ScalarField};

/// Translation (percent of the axis extent) and rotation (degrees) of the
/// four rigid motion levels, in increasing magnitude.
pub const RIGID_LEVELS: [(f64, f64); 4] = [(2.0, 0.0), (5.0, 2.0), (10.0, 5.0), (18.0, 10.0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RbfBump {
    /// Voxel-unit position.
    pub center: Vec<f64>,
    /// Displacement at the center, voxels per axis.
    pub amplitude: Vec<f64>,
    /// Gaussian standard deviation in voxels.
    pub bandwidth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum WarpKind {
    /// `T(x) = c + scale * R(angle) (x - c) + translation` about the center
    /// `c`, rotating in the plane of axes 0 and 1.
    Rigid {
        translation: Vec<f64>,
        rotation_deg: f64,
        scale: f64,
    },
    /// `T(x) = x + sum_k a_k exp(-|x - c_k|^2 / (2 b_k^2))`.
    Rbf { bumps: Vec<RbfBump> },
}

/// Analytic map from transformed-frame voxel positions to fixed-frame voxel
/// positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthWarp {
    pub kind: WarpKind,
    pub geometry: Geometry,
}

impl GroundTruthWarp {
    pub fn identity(geometry: Geometry) -> Self {
        let d = geometry.dim();
        Self {
            kind: WarpKind::Rigid {
                translation: vec![0.0; d],
                rotation_deg: 0.0,
                scale: 1.0,
            },
            geometry,
        }
    }

    pub fn translation(geometry: Geometry, shift: Vec<f64>) -> Self {
        Self {
            kind: WarpKind::Rigid {
                translation: shift,
                rotation_deg: 0.0,
                scale: 1.0,
            },
            geometry,
        }
    }

    /// Preset rigid motion `level` in `1..=4` with seeded signs.
    pub fn rigid_level(level: usize, geometry: Geometry, seed: u64) -> Result<Self> {
        if !(1..=4).contains(&level) {
            return Err(Error::InvalidArgument(format!(
                "rigid level must be in 1..=4, got {level}"
            )));
        }
        let (pct, deg) = RIGID_LEVELS[level - 1];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA11C_E5ED);
        let mut sign = || if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let translation = geometry
            .extents
            .iter()
            .map(|&n| sign() * pct / 100.0 * n as f64)
            .collect();
        let rotation_deg = sign() * deg;
        Ok(Self {
            kind: WarpKind::Rigid {
                translation,
                rotation_deg,
                scale: 1.0,
            },
            geometry,
        })
    }

    pub fn single_bump(geometry: Geometry, center: Vec<f64>, amplitude: Vec<f64>, bandwidth: f64) -> Self {
        Self {
            kind: WarpKind::Rbf {
                bumps: vec![RbfBump {
                    center,
                    amplitude,
                    bandwidth,
                }],
            },
            geometry,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let d = self.geometry.dim();
        match &self.kind {
            WarpKind::Rigid {
                translation, scale, ..
            } => {
                if translation.len() != d {
                    return Err(Error::InvalidArgument(
                        "translation needs one component per axis".into(),
                    ));
                }
                if !(*scale > 0.0) {
                    return Err(Error::InvalidArgument("rigid scale must be positive".into()));
                }
            }
            WarpKind::Rbf { bumps } => {
                for b in bumps {
                    if b.center.len() != d || b.amplitude.len() != d {
                        return Err(Error::InvalidArgument(
                            "bump center and amplitude need one component per axis".into(),
                        ));
                    }
                    if !(b.bandwidth > 0.0) {
                        return Err(Error::InvalidArgument("bump bandwidth must be positive".into()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        match &self.kind {
            WarpKind::Rigid {
                translation,
                rotation_deg,
                scale,
            } => {
                let center: Vec<f64> = self
                    .geometry
                    .extents
                    .iter()
                    .map(|&n| (n as f64 - 1.0) / 2.0)
                    .collect();
                let mut rel: Vec<f64> = p.iter().zip(&center).map(|(a, c)| a - c).collect();
                let (sin, cos) = rotation_deg.to_radians().sin_cos();
                let (a, b) = (rel[0], rel[1]);
                rel[0] = cos * a - sin * b;
                rel[1] = sin * a + cos * b;
                rel.iter()
                    .zip(&center)
                    .zip(translation)
                    .map(|((r, c), t)| c + scale * r + t)
                    .collect()
            }
            WarpKind::Rbf { bumps } => {
                let mut out = p.to_vec();
                for b in bumps {
                    let r2: f64 = p.iter().zip(&b.center).map(|(x, c)| (x - c).powi(2)).sum();
                    let g = (-r2 / (2.0 * b.bandwidth * b.bandwidth)).exp();
                    for (o, a) in out.iter_mut().zip(&b.amplitude) {
                        *o += a * g;
                    }
                }
                out
            }
        }
    }

    /// `T(p) - p` in voxels.
    pub fn displacement(&self, p: &[f64]) -> Vec<f64> {
        self.apply(p).iter().zip(p).map(|(t, x)| t - x).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let warp: Self = serde_json::from_str(text)?;
        warp.validate()?;
        Ok(warp)
    }
}

/// Intensity relationship between the two images of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairModality {
    Same,
    /// Transformed image passed through `1 - sqrt(v)`.
    Remap,
}

/// The pseudo second modality: monotone, nonlinear and inverted.
pub fn remap_intensity(v: f64) -> f64 {
    1.0 - v.max(0.0).sqrt()
}

/// Band-limited random texture in `[0,1]`: a seeded sum of Gaussian blobs
/// with standard deviations between 3% and 9% of the largest extent,
/// min-max normalized.
pub fn blob_texture(geometry: &Geometry, seed: u64) -> ScalarField {
    let d = geometry.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = geometry.max_extent() as f64;
    let (s_lo, s_hi) = (0.03 * l, 0.09 * l);
    let mean_sigma = 0.5 * (s_lo + s_hi);
    let count = ((geometry.len() as f64 / (std::f64::consts::PI * mean_sigma.powi(d as i32))).round()
        as usize)
        .clamp(8, 4000);

    let mut values = vec![0.0; geometry.len()];
    let mut idx = vec![0usize; d];
    for _ in 0..count {
        let center: Vec<f64> = geometry
            .extents
            .iter()
            .map(|&n| rng.random_range(-0.1..1.1) * (n as f64 - 1.0))
            .collect();
        let sigma = rng.random_range(s_lo..s_hi);
        let amp = rng.random_range(-1.0..1.0);
        let reach = 4.0 * sigma;
        let lo: Vec<usize> = center
            .iter()
            .map(|&c| (c - reach).floor().max(0.0) as usize)
            .collect();
        let hi: Vec<usize> = center
            .iter()
            .zip(&geometry.extents)
            .map(|(&c, &n)| ((c + reach).ceil().max(0.0) as usize).min(n - 1))
            .collect();
        if lo.iter().zip(&hi).any(|(a, b)| a > b) {
            continue;
        }
        let inv = 1.0 / (2.0 * sigma * sigma);
        for_each_in_box(&lo, &hi, &mut idx, |ix| {
            let r2: f64 = ix
                .iter()
                .zip(&center)
                .map(|(&i, c)| (i as f64 - c).powi(2))
                .sum();
            values[geometry.flat_index(ix)] += amp * (-r2 * inv).exp();
        });
    }
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (max - min).max(1e-12);
    for v in &mut values {
        *v = (*v - min) / span;
    }
    ScalarField {
        geometry: geometry.clone(),
        values,
    }
}

fn for_each_in_box(lo: &[usize], hi: &[usize], idx: &mut [usize], mut f: impl FnMut(&[usize])) {
    let d = lo.len();
    idx.copy_from_slice(lo);
    loop {
        f(idx);
        let mut k = d;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            if idx[k] < hi[k] {
                idx[k] += 1;
                break;
            }
            idx[k] = lo[k];
        }
    }
}

/// Resamples `fixed` through the warp: `out(x) = fixed(T(x))`, linear
/// interpolation with edge replication.
pub fn warp_image(fixed: &ScalarField, warp: &GroundTruthWarp) -> ScalarField {
    let g = &fixed.geometry;
    let mut idx = vec![0usize; g.dim()];
    let values = (0..g.len())
        .map(|flat| {
            g.unravel(flat, &mut idx);
            let p: Vec<f64> = idx.iter().map(|&i| i as f64).collect();
            fixed.sample_clamped(&warp.apply(&p))
        })
        .collect();
    ScalarField {
        geometry: g.clone(),
        values,
    }
}

/// Nearest-neighbor label resampling through the warp; outside is 0.
pub fn warp_labels(labels: &LabelField, warp: &GroundTruthWarp) -> LabelField {
    let g = &labels.geometry;
    let mut idx = vec![0usize; g.dim()];
    let values = (0..g.len())
        .map(|flat| {
            g.unravel(flat, &mut idx);
            let p: Vec<f64> = idx.iter().map(|&i| i as f64).collect();
            labels.sample_nearest(&warp.apply(&p)).unwrap_or(0)
        })
        .collect();
    LabelField {
        geometry: g.clone(),
        values,
    }
}

/// Synthetic pair. The fixed image is a seeded blob texture; the transformed
/// image samples it through `warp`, adds Gaussian noise of standard deviation
/// `noise`, clips to `[0,1]` and optionally applies the modality remap.
pub fn generate_pair(
    warp: &GroundTruthWarp,
    texture_seed: u64,
    modality: PairModality,
    noise: f64,
) -> Result<(ScalarField, ScalarField)> {
    warp.validate()?;
    if !(noise >= 0.0) {
        return Err(Error::InvalidArgument("noise level must be non-negative".into()));
    }
    let fixed = blob_texture(&warp.geometry, texture_seed);
    let mut moving = warp_image(&fixed, warp);
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(texture_seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
        let normal = Normal::new(0.0, noise).expect("finite noise level");
        for v in &mut moving.values {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    if modality == PairModality::Remap {
        for v in &mut moving.values {
            *v = remap_intensity(*v);
        }
    }
    Ok((fixed, moving))
}

/// `count` axis-aligned ellipses (2D) or ellipsoids (3D) labelled `1..=count`
/// in the central part of the domain. Later labels overwrite earlier ones.
pub fn ellipsoid_labels(geometry: &Geometry, seed: u64, count: u32) -> LabelField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0E11_1950);
    let mut values = vec![0u32; geometry.len()];
    let d = geometry.dim();
    let mut idx = vec![0usize; d];
    for label in 1..=count {
        let center: Vec<f64> = geometry
            .extents
            .iter()
            .map(|&n| rng.random_range(0.3..0.7) * (n as f64 - 1.0))
            .collect();
        let radii: Vec<f64> = geometry
            .extents
            .iter()
            .map(|&n| rng.random_range(0.1..0.2) * n as f64)
            .collect();
        for (flat, v) in values.iter_mut().enumerate() {
            geometry.unravel(flat, &mut idx);
            let q: f64 = (0..d)
                .map(|k| ((idx[k] as f64 - center[k]) / radii[k]).powi(2))
                .sum();
            if q <= 1.0 {
                *v = label;
            }
        }
    }
    LabelField {
        geometry: geometry.clone(),
        values,
    }
}

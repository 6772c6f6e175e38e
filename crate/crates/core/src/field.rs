//! Dense d-dimensional arrays with spacing metadata.
//!
//! All fields are row-major with axis 0 slowest. For 2D images axis 0 is the
//! row (y) and axis 1 the column (x).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for treating a sample position as on the domain boundary.
const EDGE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub extents: Vec<usize>,
    /// mm per voxel along each axis
    pub spacing: Vec<f64>,
}

impl Geometry {
    pub fn new(extents: Vec<usize>) -> Self {
        let spacing = vec![1.0; extents.len()];
        Self { extents, spacing }
    }

    pub fn with_spacing(extents: Vec<usize>, spacing: Vec<f64>) -> Result<Self> {
        let g = Self { extents, spacing };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.extents.len()) {
            return Err(Error::InvalidArgument(format!(
                "fields must be 2D or 3D, got {} axes",
                self.extents.len()
            )));
        }
        if self.spacing.len() != self.extents.len() {
            return Err(Error::InvalidArgument(
                "spacing must list one value per axis".into(),
            ));
        }
        if self.extents.contains(&0) {
            return Err(Error::InvalidArgument("extents must be non-zero".into()));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidArgument("spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.extents.len()
    }

    pub fn len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &Geometry) -> bool {
        self.extents == other.extents
    }

    pub fn flat_index(&self, index: &[usize]) -> usize {
        index
            .iter()
            .zip(&self.extents)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn unravel(&self, mut flat: usize, out: &mut [usize]) {
        for k in (0..self.dim()).rev() {
            out[k] = flat % self.extents[k];
            flat /= self.extents[k];
        }
    }

    /// Voxel index to `[0,1]^d`: `i / (n - 1)`, or 0.5 on a single-voxel axis.
    pub fn normalize(&self, index: &[usize], out: &mut [f64]) {
        for k in 0..self.dim() {
            let n = self.extents[k];
            out[k] = if n > 1 {
                index[k] as f64 / (n - 1) as f64
            } else {
                0.5
            };
        }
    }

    /// Voxels per unit of normalized coordinate along axis `k`.
    pub fn voxels_per_unit(&self, k: usize) -> f64 {
        (self.extents[k].max(2) - 1) as f64
    }

    /// Largest extent, the denominator of corner relative distance.
    pub fn max_extent(&self) -> usize {
        self.extents.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub geometry: Geometry,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(geometry: Geometry, values: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        if values.len() != geometry.len() {
            return Err(Error::SizeMismatch {
                expected: geometry.len(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "scalar field contains non-finite values".into(),
            ));
        }
        Ok(Self { geometry, values })
    }

    pub fn filled(geometry: Geometry, value: f64) -> Self {
        let values = vec![value; geometry.len()];
        Self { geometry, values }
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.values[self.geometry.flat_index(index)]
    }

    /// d-linear interpolation at a voxel-unit position. `None` outside
    /// `[0, n-1]` on any axis.
    pub fn sample_linear(&self, pos: &[f64]) -> Option<f64> {
        let ext = &self.geometry.extents;
        let mut clamped = [0f64; 3];
        for k in 0..pos.len() {
            let hi = (ext[k] - 1) as f64;
            if pos[k] < -EDGE_EPS || pos[k] > hi + EDGE_EPS {
                return None;
            }
            clamped[k] = pos[k].clamp(0.0, hi);
        }
        Some(self.interpolate(&clamped[..pos.len()]))
    }

    /// d-linear interpolation with edge replication outside the domain.
    pub fn sample_clamped(&self, pos: &[f64]) -> f64 {
        let ext = &self.geometry.extents;
        let mut clamped = [0f64; 3];
        for k in 0..pos.len() {
            clamped[k] = pos[k].clamp(0.0, (ext[k] - 1) as f64);
        }
        self.interpolate(&clamped[..pos.len()])
    }

    fn interpolate(&self, pos: &[f64]) -> f64 {
        let d = pos.len();
        let ext = &self.geometry.extents;
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for k in 0..d {
            if ext[k] == 1 {
                continue;
            }
            let b = (pos[k].floor() as usize).min(ext[k] - 2);
            base[k] = b;
            frac[k] = pos[k] - b as f64;
        }
        let mut acc = 0.0;
        let mut idx = [0usize; 3];
        for c in 0..(1usize << d) {
            let mut w = 1.0;
            for k in 0..d {
                let upper = (c >> k) & 1 == 1;
                if upper && ext[k] == 1 {
                    w = 0.0;
                    break;
                }
                idx[k] = base[k] + upper as usize;
                w *= if upper { frac[k] } else { 1.0 - frac[k] };
            }
            if w != 0.0 {
                acc += w * self.values[self.geometry.flat_index(&idx[..d])];
            }
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelField {
    pub geometry: Geometry,
    pub values: Vec<u32>,
}

impl LabelField {
    pub fn new(geometry: Geometry, values: Vec<u32>) -> Result<Self> {
        geometry.validate()?;
        if values.len() != geometry.len() {
            return Err(Error::SizeMismatch {
                expected: geometry.len(),
                actual: values.len(),
            });
        }
        Ok(Self { geometry, values })
    }

    /// Nearest-neighbor lookup at a voxel-unit position; `None` outside.
    pub fn sample_nearest(&self, pos: &[f64]) -> Option<u32> {
        let mut idx = [0usize; 3];
        for k in 0..pos.len() {
            let r = (pos[k] + 0.5).floor();
            if r < 0.0 || r >= self.geometry.extents[k] as f64 {
                return None;
            }
            idx[k] = r as usize;
        }
        Some(self.values[self.geometry.flat_index(&idx[..pos.len()])])
    }

    /// Sorted distinct non-background labels.
    pub fn labels(&self) -> Vec<u32> {
        let mut labels: Vec<u32> = self.values.iter().copied().filter(|&v| v != 0).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    /// Binary mask (0/1) of one label.
    pub fn mask(&self, label: u32) -> LabelField {
        LabelField {
            geometry: self.geometry.clone(),
            values: self.values.iter().map(|&v| (v == label) as u32).collect(),
        }
    }

    pub fn count(&self, label: u32) -> usize {
        self.values.iter().filter(|&&v| v == label).count()
    }
}

/// Dense displacement in voxel units, `d` components per voxel, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub extents: Vec<usize>,
    pub data: Vec<f32>,
}

impl DisplacementField {
    pub fn zeros(extents: Vec<usize>) -> Self {
        let n = extents.len() * extents.iter().product::<usize>();
        Self {
            extents,
            data: vec![0.0; n],
        }
    }

    pub fn new(extents: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = extents.len() * extents.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { extents, data })
    }

    pub fn dim(&self) -> usize {
        self.extents.len()
    }

    pub fn voxel_count(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn at(&self, flat: usize) -> &[f32] {
        let d = self.dim();
        &self.data[flat * d..(flat + 1) * d]
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.extents.clone())
    }

    /// Euclidean length of every displacement vector, in voxels.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.data
            .chunks(self.dim())
            .map(|v| v.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    Nearest,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Scalar(ScalarField),
    Label(LabelField),
}

impl Volume {
    pub fn geometry(&self) -> &Geometry {
        match self {
            Volume::Scalar(f) => &f.geometry,
            Volume::Label(f) => &f.geometry,
        }
    }
}

/// Resamples `volume` at `x + displacement(x)` for every voxel `x`.
///
/// Positions falling outside the domain take the background value 0.
/// Label fields only accept nearest-neighbor interpolation.
pub fn warp_volume(
    volume: &Volume,
    displacement: &DisplacementField,
    interpolation: Interpolation,
) -> Result<Volume> {
    let geometry = volume.geometry();
    if geometry.extents != displacement.extents {
        return Err(Error::GeometryMismatch(format!(
            "field extents {:?} differ from displacement extents {:?}",
            geometry.extents, displacement.extents
        )));
    }
    let d = geometry.dim();
    let mut index = vec![0usize; d];
    let mut pos = vec![0f64; d];
    let mut position = |flat: usize| {
        geometry.unravel(flat, &mut index);
        let disp = displacement.at(flat);
        for k in 0..d {
            pos[k] = index[k] as f64 + disp[k] as f64;
        }
        pos.clone()
    };
    match (volume, interpolation) {
        (Volume::Label(_), Interpolation::Linear) => Err(Error::InvalidArgument(
            "label fields can only be warped with nearest-neighbor interpolation".into(),
        )),
        (Volume::Label(field), Interpolation::Nearest) => {
            let values = (0..geometry.len())
                .map(|flat| field.sample_nearest(&position(flat)).unwrap_or(0))
                .collect();
            Ok(Volume::Label(LabelField {
                geometry: geometry.clone(),
                values,
            }))
        }
        (Volume::Scalar(field), interp) => {
            let values = (0..geometry.len())
                .map(|flat| {
                    let p = position(flat);
                    match interp {
                        Interpolation::Linear => field.sample_linear(&p),
                        Interpolation::Nearest => sample_nearest_scalar(field, &p),
                    }
                    .unwrap_or(0.0)
                })
                .collect();
            Ok(Volume::Scalar(ScalarField {
                geometry: geometry.clone(),
                values,
            }))
        }
    }
}

fn sample_nearest_scalar(field: &ScalarField, pos: &[f64]) -> Option<f64> {
    let mut idx = [0usize; 3];
    for k in 0..pos.len() {
        let r = (pos[k] + 0.5).floor();
        if r < 0.0 || r >= field.geometry.extents[k] as f64 {
            return None;
        }
        idx[k] = r as usize;
    }
    Some(field.values[field.geometry.flat_index(&idx[..pos.len()])])
}

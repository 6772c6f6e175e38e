//! Paired motion and image coordinate networks.
//!
//! The image network `f_im` stores the fixed image; the motion network
//! `f_mo` predicts a displacement so that `f_im(x + f_mo(x))` reproduces the
//! transformed image. Both are trained jointly on
//!
//! ```text
//! mean_x |f_im(x)[0] - I_ref(x)|^2 + |f_im(x + s * f_mo(x))[C-1] - I_trans(x)|^2
//! ```
//!
//! Displacements are in normalized units and map transformed-frame
//! coordinates into the fixed frame.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{warp_volume, DisplacementField, Geometry, Interpolation, ScalarField, Volume};
use crate::grid::{HashGrid, HashGridConfig, HashGridParams, LevelWeights};
use crate::mlp::{Activation, Mlp, MlpConfig, MlpParams};

/// Rows evaluated per pass when sweeping a whole field.
const SWEEP_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GranularityMode {
    Rigid,
    Deformable,
}

/// `w_i = clip(N * min(1, e / e_g) - i, 0, 1)`.
pub fn coarse_to_fine_weights(epoch: usize, target_epoch: usize, levels: usize) -> Vec<f64> {
    let alpha = (epoch as f64 / target_epoch.max(1) as f64).min(1.0);
    (0..levels)
        .map(|i| (levels as f64 * alpha - i as f64).clamp(0.0, 1.0))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseToFineSchedule {
    pub enabled: bool,
    /// Epoch at which every level is fully unmasked.
    pub target_epoch: usize,
    pub apply_to_motion: bool,
    pub apply_to_image: bool,
}

impl CoarseToFineSchedule {
    pub fn new(target_epoch: usize) -> Self {
        Self {
            enabled: true,
            target_epoch,
            apply_to_motion: true,
            apply_to_image: true,
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            target_epoch: 1,
            apply_to_motion: true,
            apply_to_image: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && self.target_epoch == 0 {
            return Err(Error::InvalidConfig(
                "coarse-to-fine target epoch must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn level_weights(&self, epoch: usize, levels: usize) -> LevelWeights {
        if !self.enabled {
            return LevelWeights::ones(levels);
        }
        LevelWeights::new(coarse_to_fine_weights(epoch, self.target_epoch, levels))
            .expect("schedule weights are clipped and non-increasing")
    }
}

/// Level weights for both encodings at one point of the schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct StageWeights {
    pub motion: LevelWeights,
    pub image: LevelWeights,
}

impl StageWeights {
    pub fn ones(model: &RegistrationModel) -> Self {
        Self {
            motion: LevelWeights::ones(model.motion_grid.config().levels),
            image: LevelWeights::ones(model.image_grid.config().levels),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub grid: HashGridConfig,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub motion: NetworkConfig,
    pub image: NetworkConfig,
    /// Multiplier on the motion network output, in normalized units.
    pub displacement_scale: f64,
}

impl ModelConfig {
    /// Defaults for an image of the given extents.
    ///
    /// Motion: rigid mode collapses every level to 2 cells per axis,
    /// deformable mode grows from 2 to 16. Image: 8 levels from 8 cells up
    /// to the largest extent. Both use two hidden layers of 64 ReLU units.
    pub fn for_geometry(extents: &[usize], mode: GranularityMode) -> Self {
        let dim = extents.len();
        let finest_image = extents.iter().copied().max().unwrap_or(4).max(4);
        let motion_finest = match mode {
            GranularityMode::Rigid => 2,
            GranularityMode::Deformable => 16,
        };
        Self {
            motion: NetworkConfig {
                grid: HashGridConfig {
                    dim,
                    levels: 4,
                    features_per_level: 2,
                    table_size: 1 << 14,
                    base_resolution: 2,
                    finest_resolution: motion_finest,
                },
                hidden_widths: vec![64, 64],
                activation: Activation::Relu,
            },
            image: NetworkConfig {
                grid: HashGridConfig {
                    dim,
                    levels: 8,
                    features_per_level: 2,
                    table_size: 1 << 14,
                    base_resolution: 8.min(finest_image),
                    finest_resolution: finest_image,
                },
                hidden_widths: vec![64, 64],
                activation: Activation::Relu,
            },
            displacement_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.motion.grid.validate()?;
        self.image.grid.validate()?;
        if self.motion.grid.dim != self.image.grid.dim {
            return Err(Error::InvalidConfig(
                "motion and image grids must share a dimension".into(),
            ));
        }
        if !(self.displacement_scale.is_finite() && self.displacement_scale > 0.0) {
            return Err(Error::InvalidConfig(
                "displacement scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Which terms of the joint loss to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerms {
    Both,
    FixedOnly,
    TransformedOnly,
}

impl LossTerms {
    fn fixed(self) -> bool {
        !matches!(self, LossTerms::TransformedOnly)
    }

    fn transformed(self) -> bool {
        !matches!(self, LossTerms::FixedOnly)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub fixed: f64,
    pub transformed: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.fixed + self.transformed
    }

    pub fn is_finite(&self) -> bool {
        self.fixed.is_finite() && self.transformed.is_finite()
    }
}

/// Gradients for the four parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub motion_grid: HashGridParams,
    pub motion_mlp: MlpParams,
    pub image_grid: HashGridParams,
    pub image_mlp: MlpParams,
}

impl ModelGrads {
    pub fn zeros(model: &RegistrationModel) -> Self {
        Self {
            motion_grid: HashGridParams::zeros(model.motion_grid.config()),
            motion_mlp: MlpParams::zeros(model.motion_mlp.config()),
            image_grid: HashGridParams::zeros(model.image_grid.config()),
            image_mlp: MlpParams::zeros(model.image_mlp.config()),
        }
    }

    pub fn fill_zero(&mut self) {
        self.motion_grid.fill_zero();
        self.motion_mlp.fill_zero();
        self.image_grid.fill_zero();
        self.image_mlp.fill_zero();
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        let pairs = [
            (&mut self.motion_grid.tables, &other.motion_grid.tables),
            (&mut self.motion_mlp.data, &other.motion_mlp.data),
            (&mut self.image_grid.tables, &other.image_grid.tables),
            (&mut self.image_mlp.data, &other.image_mlp.data),
        ];
        for (dst, src) in pairs {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    pub fn motion_is_zero(&self) -> bool {
        self.motion_grid.tables.iter().all(|&g| g == 0.0)
            && self.motion_mlp.data.iter().all(|&g| g == 0.0)
    }
}

#[derive(Clone, Debug)]
pub struct RegistrationModel {
    /// Extents of the registered pair.
    pub extents: Vec<usize>,
    pub channels: usize,
    pub displacement_scale: f64,
    pub motion_grid: HashGrid,
    pub motion_mlp: Mlp,
    pub image_grid: HashGrid,
    pub image_mlp: Mlp,
    pub schedule: CoarseToFineSchedule,
    /// Last epoch the schedule was evaluated at.
    pub epoch: usize,
}

impl RegistrationModel {
    /// Fresh model with seeded random weights and an exactly-zero
    /// displacement field.
    pub fn new(
        extents: Vec<usize>,
        channels: usize,
        config: &ModelConfig,
        schedule: CoarseToFineSchedule,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        let dim = config.motion.grid.dim;
        if extents.len() != dim {
            return Err(Error::InvalidConfig(format!(
                "model is {dim}D but the registration geometry has {} axes",
                extents.len()
            )));
        }
        if !(1..=2).contains(&channels) {
            return Err(Error::InvalidConfig(format!(
                "channel count must be 1 or 2, got {channels}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let motion_grid = HashGrid::init(config.motion.grid.clone(), &mut rng)?;
        let motion_mlp = Mlp::init(
            MlpConfig {
                input_dim: motion_grid.feature_len(),
                hidden_widths: config.motion.hidden_widths.clone(),
                output_dim: dim,
                activation: config.motion.activation,
                final_layer_zero_init: true,
            },
            &mut rng,
        )?;
        let image_grid = HashGrid::init(config.image.grid.clone(), &mut rng)?;
        let image_mlp = Mlp::init(
            MlpConfig {
                input_dim: image_grid.feature_len(),
                hidden_widths: config.image.hidden_widths.clone(),
                output_dim: channels,
                activation: config.image.activation,
                final_layer_zero_init: false,
            },
            &mut rng,
        )?;
        Ok(Self {
            extents,
            channels,
            displacement_scale: config.displacement_scale,
            motion_grid,
            motion_mlp,
            image_grid,
            image_mlp,
            schedule,
            epoch: 0,
        })
    }

    /// Reassembles a model from explicit parts, checking shape invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        extents: Vec<usize>,
        channels: usize,
        displacement_scale: f64,
        motion_grid: HashGrid,
        motion_mlp: Mlp,
        image_grid: HashGrid,
        image_mlp: Mlp,
        schedule: CoarseToFineSchedule,
        epoch: usize,
    ) -> Result<Self> {
        let dim = extents.len();
        let ok = motion_grid.config().dim == dim
            && image_grid.config().dim == dim
            && motion_mlp.config().output_dim == dim
            && image_mlp.config().output_dim == channels
            && motion_mlp.config().input_dim == motion_grid.feature_len()
            && image_mlp.config().input_dim == image_grid.feature_len();
        if !ok {
            return Err(Error::InvalidConfig(
                "network shapes are inconsistent with the model geometry".into(),
            ));
        }
        Ok(Self {
            extents,
            channels,
            displacement_scale,
            motion_grid,
            motion_mlp,
            image_grid,
            image_mlp,
            schedule,
            epoch,
        })
    }

    pub fn dim(&self) -> usize {
        self.extents.len()
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.extents.clone())
    }

    /// Output channel read by the transformed-image term.
    pub fn transformed_channel(&self) -> usize {
        self.channels - 1
    }

    pub fn stage_weights(&self, epoch: usize) -> StageWeights {
        let motion_levels = self.motion_grid.config().levels;
        let image_levels = self.image_grid.config().levels;
        let s = &self.schedule;
        StageWeights {
            motion: if s.apply_to_motion {
                s.level_weights(epoch, motion_levels)
            } else {
                LevelWeights::ones(motion_levels)
            },
            image: if s.apply_to_image {
                s.level_weights(epoch, image_levels)
            } else {
                LevelWeights::ones(image_levels)
            },
        }
    }

    pub fn current_weights(&self) -> StageWeights {
        self.stage_weights(self.epoch)
    }

    /// Normalized displacements for a `B x d` batch of coordinates.
    pub fn displacements(&self, coords: ArrayView2<f64>, weights: &StageWeights) -> Array2<f64> {
        let mut enc = Array2::zeros((coords.nrows(), self.motion_grid.feature_len()));
        self.motion_grid
            .encode_batch(coords, &weights.motion, enc.view_mut());
        let (mut out, _) = self.motion_mlp.forward_batch(enc.view());
        out *= self.displacement_scale;
        out
    }

    /// Image network outputs (`B x C`) at the given coordinates.
    pub fn image_outputs(&self, coords: ArrayView2<f64>, weights: &StageWeights) -> Array2<f64> {
        let mut enc = Array2::zeros((coords.nrows(), self.image_grid.feature_len()));
        self.image_grid
            .encode_batch(coords, &weights.image, enc.view_mut());
        self.image_mlp.forward_batch(enc.view()).0
    }

    /// Fixed-image prediction (channel 0) and transformed-image prediction
    /// (channel C-1 at the displaced coordinate) for a batch.
    pub fn predict_batch(&self, coords: ArrayView2<f64>, weights: &StageWeights) -> (Vec<f64>, Vec<f64>) {
        let warped = &coords + &self.displacements(coords, weights);
        let fixed = self.image_outputs(coords, weights);
        let moved = self.image_outputs(warped.view(), weights);
        let c = self.transformed_channel();
        (fixed.column(0).to_vec(), moved.column(c).to_vec())
    }

    pub fn displacement(&self, coord: &[f64], weights: &StageWeights) -> Vec<f64> {
        let view = ArrayView2::from_shape((1, coord.len()), coord).expect("row vector");
        self.displacements(view, weights).row(0).to_vec()
    }

    pub fn predict_fixed(&self, coord: &[f64], weights: &StageWeights) -> f64 {
        let view = ArrayView2::from_shape((1, coord.len()), coord).expect("row vector");
        self.image_outputs(view, weights)[[0, 0]]
    }

    pub fn predict_transformed(&self, coord: &[f64], weights: &StageWeights) -> f64 {
        let view = ArrayView2::from_shape((1, coord.len()), coord).expect("row vector");
        self.predict_batch(view, weights).1[0]
    }

    /// Mean joint loss over the batch and its gradients for every block.
    pub fn loss_and_grads(
        &self,
        coords: ArrayView2<f64>,
        reference: &[f64],
        transformed: &[f64],
        weights: &StageWeights,
    ) -> (LossBreakdown, ModelGrads) {
        self.loss_and_grads_with(coords, reference, transformed, weights, LossTerms::Both)
    }

    pub fn loss_and_grads_with(
        &self,
        coords: ArrayView2<f64>,
        reference: &[f64],
        transformed: &[f64],
        weights: &StageWeights,
        terms: LossTerms,
    ) -> (LossBreakdown, ModelGrads) {
        let mut grads = ModelGrads::zeros(self);
        let scale = 1.0 / coords.nrows().max(1) as f64;
        let sums = self.accumulate_grads(coords, reference, transformed, weights, terms, scale, &mut grads);
        let loss = LossBreakdown {
            fixed: sums.fixed * scale,
            transformed: sums.transformed * scale,
        };
        (loss, grads)
    }

    /// Adds `scale * d(sum of squared residuals)` into `grads` and returns
    /// the unscaled residual sums. Building block for chunked reductions.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate_grads(
        &self,
        coords: ArrayView2<f64>,
        reference: &[f64],
        transformed: &[f64],
        weights: &StageWeights,
        terms: LossTerms,
        scale: f64,
        grads: &mut ModelGrads,
    ) -> LossBreakdown {
        let b = coords.nrows();
        let d = self.dim();
        assert_eq!(coords.ncols(), d, "coordinate width must match the model dimension");
        assert_eq!(reference.len(), b);
        assert_eq!(transformed.len(), b);
        let tc = self.transformed_channel();

        // motion network
        let mut enc_m = Array2::zeros((b, self.motion_grid.feature_len()));
        let mut cache_m = None;
        let mut img_in = Array2::zeros((2 * b, d));
        img_in.slice_mut(s![..b, ..]).assign(&coords);
        if terms.transformed() {
            self.motion_grid
                .encode_batch(coords, &weights.motion, enc_m.view_mut());
            let (out_m, cache) = self.motion_mlp.forward_batch(enc_m.view());
            let mut warped = img_in.slice_mut(s![b.., ..]);
            warped.assign(&coords);
            warped.scaled_add(self.displacement_scale, &out_m);
            cache_m = Some(cache);
        }

        // image network over [coords; warped]
        let mut enc_i = Array2::zeros((2 * b, self.image_grid.feature_len()));
        self.image_grid
            .encode_batch(img_in.view(), &weights.image, enc_i.view_mut());
        let (y, cache_i) = self.image_mlp.forward_batch(enc_i.view());

        let mut sums = LossBreakdown::default();
        let mut up = Array2::zeros((2 * b, self.channels));
        for i in 0..b {
            if terms.fixed() {
                let r = y[[i, 0]] - reference[i];
                sums.fixed += r * r;
                up[[i, 0]] = 2.0 * r * scale;
            }
            if terms.transformed() {
                let r = y[[b + i, tc]] - transformed[i];
                sums.transformed += r * r;
                up[[b + i, tc]] = 2.0 * r * scale;
            }
        }

        let g_enc_i = self
            .image_mlp
            .backward_batch(&cache_i, up.view(), &mut grads.image_mlp);
        self.image_grid.backward_batch(
            img_in.slice(s![..b, ..]),
            g_enc_i.slice(s![..b, ..]),
            &weights.image,
            &mut grads.image_grid,
            None,
        );

        if let Some(cache_m) = cache_m {
            let mut g_warped = Array2::zeros((b, d));
            self.image_grid.backward_batch(
                img_in.slice(s![b.., ..]),
                g_enc_i.slice(s![b.., ..]),
                &weights.image,
                &mut grads.image_grid,
                Some(g_warped.view_mut()),
            );
            g_warped *= self.displacement_scale;
            let g_enc_m = self
                .motion_mlp
                .backward_batch(&cache_m, g_warped.view(), &mut grads.motion_mlp);
            self.motion_grid.backward_batch(
                coords,
                g_enc_m.view(),
                &weights.motion,
                &mut grads.motion_grid,
                None,
            );
        }
        sums
    }

    /// Normalized coordinates of every voxel of `geometry`, row-major.
    pub fn voxel_coords(geometry: &Geometry) -> Array2<f64> {
        let d = geometry.dim();
        let mut coords = Array2::zeros((geometry.len(), d));
        let mut idx = vec![0usize; d];
        for (flat, mut row) in coords.axis_iter_mut(Axis(0)).enumerate() {
            geometry.unravel(flat, &mut idx);
            geometry.normalize(&idx, row.as_slice_mut().expect("contiguous rows"));
        }
        coords
    }

    /// Dense displacement at every voxel of `extents`, in voxel units.
    pub fn export_displacement_field(&self, extents: &[usize]) -> DisplacementField {
        let geometry = Geometry::new(extents.to_vec());
        let d = geometry.dim();
        let coords = Self::voxel_coords(&geometry);
        let weights = self.current_weights();
        let unit: Vec<f64> = (0..d).map(|k| geometry.voxels_per_unit(k)).collect();
        let mut data = Vec::with_capacity(geometry.len() * d);
        for chunk in coords.axis_chunks_iter(Axis(0), SWEEP_CHUNK) {
            let disp = self.displacements(chunk, &weights);
            for row in disp.outer_iter() {
                for k in 0..d {
                    data.push((row[k] * unit[k]) as f32);
                }
            }
        }
        DisplacementField {
            extents: extents.to_vec(),
            data,
        }
    }

    /// Image-network reconstructions over the registration grid: channel 0
    /// at `x` and channel C-1 at `x + displacement(x)`.
    pub fn reconstruct(&self) -> (ScalarField, ScalarField) {
        let geometry = self.geometry();
        let coords = Self::voxel_coords(&geometry);
        let weights = self.current_weights();
        let mut fixed = Vec::with_capacity(geometry.len());
        let mut moved = Vec::with_capacity(geometry.len());
        for chunk in coords.axis_chunks_iter(Axis(0), SWEEP_CHUNK) {
            let (f, m) = self.predict_batch(chunk, &weights);
            fixed.extend(f);
            moved.extend(m);
        }
        (
            ScalarField {
                geometry: geometry.clone(),
                values: fixed,
            },
            ScalarField {
                geometry,
                values: moved,
            },
        )
    }

    /// Fixed-image reconstruction (channel 0) pulled through the displacement
    /// into the transformed frame: `f_im(x + displacement(x))[0]`.
    pub fn warped_fixed_reconstruction(&self) -> ScalarField {
        let geometry = self.geometry();
        let coords = Self::voxel_coords(&geometry);
        let weights = self.current_weights();
        let mut values = Vec::with_capacity(geometry.len());
        for chunk in coords.axis_chunks_iter(Axis(0), SWEEP_CHUNK) {
            let warped = &chunk + &self.displacements(chunk, &weights);
            let out = self.image_outputs(warped.view(), &weights);
            values.extend(out.column(0).iter().copied());
        }
        ScalarField { geometry, values }
    }

    /// Resamples `volume` (in the fixed frame) into the transformed frame:
    /// `output(x) = volume(x + displacement(x))`.
    pub fn warp_field(&self, volume: &Volume, interpolation: Interpolation) -> Result<Volume> {
        if volume.geometry().extents != self.extents {
            return Err(Error::GeometryMismatch(format!(
                "field extents {:?} differ from registration extents {:?}",
                volume.geometry().extents,
                self.extents
            )));
        }
        let field = self.export_displacement_field(&self.extents);
        warp_volume(volume, &field, interpolation)
    }

    /// Replaces the motion network read-out so that every coordinate is
    /// displaced by `delta` (normalized units).
    pub fn set_constant_displacement(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.dim());
        let last = self.motion_mlp.params.num_layers() - 1;
        self.motion_mlp.params.weight_mut(last).fill(0.0);
        let mut bias = self.motion_mlp.params.bias_mut(last);
        for (b, &v) in bias.iter_mut().zip(delta) {
            *b = v / self.displacement_scale;
        }
    }
}

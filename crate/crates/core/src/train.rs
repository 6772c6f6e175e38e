//! Per-pair optimization driver.

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::field::{DisplacementField, Geometry, ScalarField};
use crate::model::{
    CoarseToFineSchedule, GranularityMode, LossBreakdown, LossTerms, ModelConfig, ModelGrads,
    RegistrationModel, StageWeights,
};

/// Rows per gradient chunk. Chunks are reduced in index order.
const GRAD_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Single,
    Multi,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Single => 1,
            Modality::Multi => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum Sampling {
    /// Every voxel once per epoch in row-major order, split into batches.
    FullGrid,
    /// `steps` batches per epoch drawn uniformly with replacement.
    Stochastic { steps: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub window: usize,
    pub relative_tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: usize,
    /// Epoch at which the coarse-to-fine schedule reaches full capacity.
    pub target_epoch: usize,
    pub schedule_enabled: bool,
    /// Whether the schedule masks the motion grid levels.
    pub schedule_motion: bool,
    /// Whether the schedule masks the image grid levels.
    pub schedule_image: bool,
    pub batch_size: usize,
    pub sampling: Sampling,
    pub seed: u64,
    pub deterministic: bool,
    pub early_stop: Option<EarlyStop>,
    /// Epochs during which only the image network is updated.
    pub motion_warmup: usize,
    pub granularity: GranularityMode,
    pub modality: Modality,
    pub motion_optimizer: AdamConfig,
    pub image_optimizer: AdamConfig,
    pub model: ModelConfig,
}

impl RunConfig {
    /// Defaults for a pair of the given extents: 500 epochs in 2D and 300 in
    /// 3D, schedule target at 40% of the budget, full-grid sampling for 2D
    /// images up to 256^2 and 2^16-sample stochastic batches otherwise.
    pub fn defaults(extents: &[usize], granularity: GranularityMode, modality: Modality) -> Self {
        let voxels: usize = extents.iter().product();
        let epochs = if extents.len() == 2 { 500 } else { 300 };
        let (sampling, batch_size) = if extents.len() == 2 && voxels <= 256 * 256 {
            (Sampling::FullGrid, voxels)
        } else {
            (Sampling::Stochastic { steps: 1 }, 1 << 16)
        };
        Self {
            epochs,
            target_epoch: (epochs * 2) / 5,
            schedule_enabled: true,
            schedule_motion: true,
            schedule_image: true,
            batch_size,
            sampling,
            seed: 0,
            deterministic: true,
            early_stop: None,
            motion_warmup: epochs / 5,
            granularity,
            modality,
            motion_optimizer: AdamConfig::with_lr(2e-3),
            image_optimizer: AdamConfig::with_lr(1e-2),
            model: ModelConfig::for_geometry(extents, granularity),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1");
        }
        if self.schedule_enabled && (self.target_epoch == 0 || self.target_epoch > self.epochs) {
            return fail("target epoch must lie in [1, epochs]");
        }
        if let Sampling::Stochastic { steps: 0 } = self.sampling {
            return fail("stochastic sampling needs at least one step per epoch");
        }
        if let Some(es) = self.early_stop {
            if es.window == 0 || !(es.relative_tolerance >= 0.0) {
                return fail("early stop needs a positive window and a non-negative tolerance");
            }
        }
        if self.granularity == GranularityMode::Rigid
            && self.model.motion.grid.finest_resolution != self.model.motion.grid.base_resolution
        {
            return fail("rigid granularity requires equal coarsest and finest motion resolution");
        }
        self.model.validate()
    }

    pub fn schedule(&self) -> CoarseToFineSchedule {
        if self.schedule_enabled {
            CoarseToFineSchedule {
                apply_to_motion: self.schedule_motion,
                apply_to_image: self.schedule_image,
                ..CoarseToFineSchedule::new(self.target_epoch)
            }
        } else {
            CoarseToFineSchedule::disabled()
        }
    }

    /// Same run with the image grid limited to 1/15 of the image resolution.
    pub fn capacity_restricted(&self, extents: &[usize]) -> Self {
        let resolution = extents.iter().copied().max().unwrap_or(0);
        let finest = (resolution / 15).max(2);
        let mut out = self.clone();
        let grid = &mut out.model.image.grid;
        grid.finest_resolution = finest;
        grid.base_resolution = grid.base_resolution.min(finest);
        out
    }
}

/// One epoch-mean loss record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub fixed: f64,
    pub transformed: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub model: RegistrationModel,
    pub displacement: DisplacementField,
    pub history: Vec<EpochLoss>,
    pub wall_time_secs: f64,
    pub epochs_executed: usize,
}

impl RegistrationResult {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |h| h.total)
    }

    /// Loss history as CSV: `epoch,loss_fixed_term,loss_trans_term,total`.
    pub fn loss_csv(&self) -> String {
        loss_csv(&self.history)
    }
}

pub fn loss_csv(history: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,loss_fixed_term,loss_trans_term,total\n");
    for h in history {
        out.push_str(&format!(
            "{},{:e},{:e},{:e}\n",
            h.epoch, h.fixed, h.transformed, h.total
        ));
    }
    out
}

/// Flat voxel indices for one optimization step.
///
/// Full-grid mode returns every voxel in row-major order; stochastic mode
/// draws `batch_size` voxels uniformly with replacement.
pub fn sample_coords<R: Rng + ?Sized>(
    geometry: &Geometry,
    sampling: Sampling,
    batch_size: usize,
    rng: &mut R,
) -> Vec<usize> {
    let n = geometry.len();
    match sampling {
        Sampling::FullGrid => (0..n).collect(),
        Sampling::Stochastic { .. } => (0..batch_size).map(|_| rng.random_range(0..n)).collect(),
    }
}

fn gather_coords(geometry: &Geometry, indices: &[usize]) -> Array2<f64> {
    let d = geometry.dim();
    let mut coords = Array2::zeros((indices.len(), d));
    let mut idx = vec![0usize; d];
    for (row, &flat) in coords.axis_iter_mut(Axis(0)).zip(indices) {
        geometry.unravel(flat, &mut idx);
        let mut row = row;
        geometry.normalize(&idx, row.as_slice_mut().expect("contiguous rows"));
    }
    coords
}

/// Mean loss and gradients over `indices`, evaluated in fixed-size chunks
/// whose partial sums are reduced in chunk order.
fn batch_gradients(
    model: &RegistrationModel,
    geometry: &Geometry,
    fixed: &ScalarField,
    transformed: &ScalarField,
    indices: &[usize],
    weights: &StageWeights,
    parallel: bool,
    grads: &mut ModelGrads,
) -> LossBreakdown {
    let scale = 1.0 / indices.len() as f64;
    let eval = |chunk: &[usize], grads: &mut ModelGrads| {
        let coords = gather_coords(geometry, chunk);
        let reference: Vec<f64> = chunk.iter().map(|&i| fixed.values[i]).collect();
        let moving: Vec<f64> = chunk.iter().map(|&i| transformed.values[i]).collect();
        model.accumulate_grads(
            coords.view(),
            &reference,
            &moving,
            weights,
            LossTerms::Both,
            scale,
            grads,
        )
    };
    grads.fill_zero();
    let mut sums = LossBreakdown::default();
    if parallel && indices.len() > GRAD_CHUNK {
        let partials: Vec<(LossBreakdown, ModelGrads)> = indices
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g = ModelGrads::zeros(model);
                let s = eval(chunk, &mut g);
                (s, g)
            })
            .collect();
        for (s, g) in &partials {
            sums.fixed += s.fixed;
            sums.transformed += s.transformed;
            grads.add_assign(g);
        }
    } else {
        for chunk in indices.chunks(GRAD_CHUNK) {
            let s = eval(chunk, grads);
            sums.fixed += s.fixed;
            sums.transformed += s.transformed;
        }
    }
    LossBreakdown {
        fixed: sums.fixed * scale,
        transformed: sums.transformed * scale,
    }
}

/// Optimization state of one registration run.
pub struct Trainer {
    pub model: RegistrationModel,
    config: RunConfig,
    motion_adam: Adam,
    image_adam: Adam,
    grads: ModelGrads,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(extents: &[usize], config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = RegistrationModel::new(
            extents.to_vec(),
            config.modality.channels(),
            &config.model,
            config.schedule(),
            config.seed,
        )?;
        let motion_adam = Adam::new(
            config.motion_optimizer,
            &[model.motion_grid.params.tables.len(), model.motion_mlp.params.data.len()],
        );
        let image_adam = Adam::new(
            config.image_optimizer,
            &[model.image_grid.params.tables.len(), model.image_mlp.params.data.len()],
        );
        let grads = ModelGrads::zeros(&model);
        // sampling stream is decoupled from the initialization stream
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_5A4D_1E5C_0DE5);
        Ok(Self {
            model,
            config: config.clone(),
            motion_adam,
            image_adam,
            grads,
            rng,
        })
    }

    /// Runs epoch `epoch` (1-based) and returns its mean loss.
    pub fn run_epoch(
        &mut self,
        epoch: usize,
        fixed: &ScalarField,
        transformed: &ScalarField,
    ) -> Result<EpochLoss> {
        let geometry = fixed.geometry.clone();
        self.model.epoch = epoch;
        let weights = self.model.stage_weights(epoch);
        let parallel = !self.config.deterministic;

        let batches: Vec<Vec<usize>> = match self.config.sampling {
            Sampling::FullGrid => {
                let all = sample_coords(&geometry, Sampling::FullGrid, 0, &mut self.rng);
                all.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
            }
            Sampling::Stochastic { steps } => (0..steps)
                .map(|_| {
                    sample_coords(&geometry, self.config.sampling, self.config.batch_size, &mut self.rng)
                })
                .collect(),
        };

        let mut sum = LossBreakdown::default();
        for (step, indices) in batches.iter().enumerate() {
            let loss = batch_gradients(
                &self.model,
                &geometry,
                fixed,
                transformed,
                indices,
                &weights,
                parallel,
                &mut self.grads,
            );
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            sum.fixed += loss.fixed;
            sum.transformed += loss.transformed;
            self.apply_gradients(epoch > self.config.motion_warmup);
        }
        let n = batches.len() as f64;
        let fixed_mean = sum.fixed / n;
        let trans_mean = sum.transformed / n;
        Ok(EpochLoss {
            epoch,
            fixed: fixed_mean,
            transformed: trans_mean,
            total: fixed_mean + trans_mean,
        })
    }

    fn apply_gradients(&mut self, motion: bool) {
        let m = &mut self.model;
        let g = &self.grads;
        if motion {
            self.motion_adam.step(&mut [
                (&mut m.motion_grid.params.tables, &g.motion_grid.tables),
                (&mut m.motion_mlp.params.data, &g.motion_mlp.data),
            ]);
        }
        self.image_adam.step(&mut [
            (&mut m.image_grid.params.tables, &g.image_grid.tables),
            (&mut m.image_mlp.params.data, &g.image_mlp.data),
        ]);
    }
}

fn should_stop(history: &[EpochLoss], rule: &EarlyStop) -> bool {
    if history.len() <= rule.window {
        return false;
    }
    let now = history[history.len() - 1].total;
    let then = history[history.len() - 1 - rule.window].total;
    if then <= 0.0 {
        return true;
    }
    (then - now) / then < rule.relative_tolerance
}

/// Registers `transformed` onto `fixed`: fresh networks, `epochs` epochs of
/// Adam on the joint loss, schedule advanced once per epoch.
pub fn register_pair(
    fixed: &ScalarField,
    transformed: &ScalarField,
    config: &RunConfig,
) -> Result<RegistrationResult> {
    if !fixed.geometry.same_shape(&transformed.geometry) {
        return Err(Error::GeometryMismatch(format!(
            "fixed extents {:?} differ from transformed extents {:?}",
            fixed.geometry.extents, transformed.geometry.extents
        )));
    }
    if config.model.motion.grid.dim != fixed.geometry.dim() {
        return Err(Error::GeometryMismatch(format!(
            "configuration is {}D but the images are {}D",
            config.model.motion.grid.dim,
            fixed.geometry.dim()
        )));
    }
    let start = Instant::now();
    let mut trainer = Trainer::new(&fixed.geometry.extents, config)?;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let loss = trainer.run_epoch(epoch, fixed, transformed)?;
        history.push(loss);
        if let Some(rule) = &config.early_stop {
            if should_stop(&history, rule) {
                break;
            }
        }
    }
    let model = trainer.model;
    let displacement = model.export_displacement_field(&fixed.geometry.extents);
    Ok(RegistrationResult {
        displacement,
        epochs_executed: history.len(),
        history,
        model,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Fits only the image network to one image (the first loss term alone).
/// Returns the fitted model and its per-epoch loss.
pub fn fit_image(image: &ScalarField, config: &RunConfig) -> Result<(RegistrationModel, Vec<f64>)> {
    let mut config = config.clone();
    config.modality = Modality::Single;
    config.validate()?;
    let mut trainer = Trainer::new(&image.geometry.extents, &config)?;
    let geometry = image.geometry.clone();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        trainer.model.epoch = epoch;
        let weights = trainer.model.stage_weights(epoch);
        let indices = match config.sampling {
            Sampling::FullGrid => sample_coords(&geometry, Sampling::FullGrid, 0, &mut trainer.rng),
            s => sample_coords(&geometry, s, config.batch_size, &mut trainer.rng),
        };
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in indices.chunks(config.batch_size) {
            let coords = gather_coords(&geometry, chunk);
            let values: Vec<f64> = chunk.iter().map(|&i| image.values[i]).collect();
            let (loss, grads) = trainer.model.loss_and_grads_with(
                coords.view(),
                &values,
                &values,
                &weights,
                LossTerms::FixedOnly,
            );
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: steps });
            }
            trainer.grads = grads;
            trainer.apply_gradients(true);
            sum += loss.fixed;
            steps += 1;
        }
        history.push(sum / steps as f64);
    }
    Ok((trainer.model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_grid_is_row_major() {
        let g = Geometry::new(vec![4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = sample_coords(&g, Sampling::FullGrid, 16, &mut rng);
        assert_eq!(idx, (0..16).collect::<Vec<_>>());
        let coords = gather_coords(&g, &idx);
        assert_eq!(coords.row(1).to_vec(), vec![0.0, 1.0 / 3.0]);
        assert_eq!(coords.row(4).to_vec(), vec![1.0 / 3.0, 0.0]);
    }

    #[test]
    fn stochastic_sampling_is_seeded() {
        let g = Geometry::new(vec![10, 10]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Sampling::Stochastic { steps: 1 };
            (0..3).map(|_| sample_coords(&g, s, 32, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn restricted_preset_clamps() {
        let base = RunConfig::defaults(&[300, 300], GranularityMode::Rigid, Modality::Single);
        assert_eq!(base.capacity_restricted(&[300, 300]).model.image.grid.finest_resolution, 20);
        let small = RunConfig::defaults(&[30, 30], GranularityMode::Rigid, Modality::Single);
        let r = small.capacity_restricted(&[30, 30]);
        assert_eq!(r.model.image.grid.finest_resolution, 2);
        assert!(r.model.image.grid.base_resolution <= 2);
        assert_eq!(r.epochs, small.epochs);
        assert!(r.validate().is_ok());
    }

    #[test]
    fn early_stop_waits_for_full_window() {
        let flat = |n| {
            (1..=n)
                .map(|e| EpochLoss {
                    epoch: e,
                    fixed: 1.0,
                    transformed: 0.0,
                    total: 1.0,
                })
                .collect::<Vec<_>>()
        };
        let rule = EarlyStop {
            window: 5,
            relative_tolerance: 1e-3,
        };
        assert!(!should_stop(&flat(5), &rule));
        assert!(should_stop(&flat(6), &rule));
    }

    #[test]
    fn mismatched_geometry_is_rejected() {
        let a = ScalarField::filled(Geometry::new(vec![8, 8]), 0.5);
        let b = ScalarField::filled(Geometry::new(vec![8, 9]), 0.5);
        let config = RunConfig::defaults(&[8, 8], GranularityMode::Rigid, Modality::Single);
        assert!(matches!(
            register_pair(&a, &b, &config),
            Err(Error::GeometryMismatch(_))
        ));
    }
}

//! Test oracles shared by the integration tests. Everything here is written
//! against the public API only and recomputes quantities from first
//! principles.
#![allow(dead_code)]

use inreg_core::field::{Geometry, LabelField};
use inreg_core::grid::{HashGrid, HashGridConfig, HashGridParams, LevelWeights};
use inreg_core::mlp::Activation;
use inreg_core::model::{CoarseToFineSchedule, GranularityMode, ModelConfig, RegistrationModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` along `dir` at step `h`.
pub fn directional_fd<F: FnMut(f64) -> f64>(mut f: F, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

// ---- hash grid -----------------------------------------------------------

/// Cells per axis at level `i`, computed in exact powers.
pub fn oracle_resolution(base: usize, finest: usize, levels: usize, i: usize) -> usize {
    if levels == 1 {
        return base;
    }
    let b = (finest as f64 / base as f64).powf(1.0 / (levels - 1) as f64);
    let r = (base as f64 * b.powi(i as i32) + 1e-9).floor() as usize;
    r.clamp(base, finest)
}

/// Table row of a lattice vertex, written out from the indexing rules.
pub fn oracle_row(vertex: &[usize], res: usize, table: usize) -> usize {
    let side = res + 1;
    let count = side.pow(vertex.len() as u32);
    if count <= table {
        let mut row = 0;
        for &v in vertex {
            row = row * side + v;
        }
        row
    } else {
        let primes = [1u64, 2_654_435_761, 805_459_861];
        let mut h = 0u64;
        for (k, &v) in vertex.iter().enumerate() {
            h ^= (v as u64).wrapping_mul(primes[k]);
        }
        (h % table as u64) as usize
    }
}

/// Reference encoding: explicit corner enumeration per level.
pub fn oracle_encode(grid: &HashGrid, coord: &[f64], weights: &[f64]) -> Vec<f64> {
    let c = grid.config();
    let d = c.dim;
    let f = c.features_per_level;
    let mut out = vec![0.0; c.levels * f];
    for level in 0..c.levels {
        let res = oracle_resolution(c.base_resolution, c.finest_resolution, c.levels, level);
        let mut cell = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for k in 0..d {
            let x = coord[k].clamp(0.0, 1.0) * res as f64;
            let i = (x.floor() as usize).min(res - 1);
            cell[k] = i;
            frac[k] = x - i as f64;
        }
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut vertex = vec![0usize; d];
            for k in 0..d {
                let hi = corner >> k & 1 == 1;
                vertex[k] = cell[k] + hi as usize;
                w *= if hi { frac[k] } else { 1.0 - frac[k] };
            }
            let row = oracle_row(&vertex, res, c.table_size);
            for j in 0..f {
                let v = grid.params.tables[(level * c.table_size + row) * f + j];
                out[level * f + j] += weights[level] * w * v;
            }
        }
    }
    out
}

pub fn random_grid_config(rng: &mut ChaCha8Rng, dim: usize) -> HashGridConfig {
    let levels = rng.random_range(1..=5);
    let base = rng.random_range(1..=4);
    let finest = if levels == 1 {
        base
    } else {
        rng.random_range(base..=base * 8)
    };
    let table = 1usize << rng.random_range(4..=10);
    HashGridConfig::new(dim, levels, rng.random_range(1..=3), table, base, finest).unwrap()
}

pub fn random_grid(rng: &mut ChaCha8Rng, config: HashGridConfig, scale: f64) -> HashGrid {
    let tables = random_vec(rng, config.param_count(), scale);
    HashGrid::new(config, HashGridParams { tables }).unwrap()
}

/// Level weights with a random partially open level.
pub fn random_level_weights(rng: &mut ChaCha8Rng, levels: usize) -> LevelWeights {
    let e = rng.random_range(1..=20);
    let target = rng.random_range(1..=20);
    let s = CoarseToFineSchedule::new(target);
    s.level_weights(e, levels)
}

// ---- full model ----------------------------------------------------------

/// A small model with every parameter randomized so that all paths carry
/// gradient.
pub fn random_model(rng: &mut ChaCha8Rng) -> (RegistrationModel, Vec<usize>) {
    let dim = rng.random_range(2..=3);
    let extents: Vec<usize> = (0..dim).map(|_| rng.random_range(4..=12)).collect();
    let mut config = ModelConfig::for_geometry(&extents, GranularityMode::Deformable);
    config.motion.grid = random_grid_config(rng, dim);
    config.image.grid = random_grid_config(rng, dim);
    let mut widths = || -> Vec<usize> {
        let layers = rng.random_range(1..=2);
        (0..layers).map(|_| rng.random_range(3..=12)).collect()
    };
    config.motion.hidden_widths = widths();
    config.image.hidden_widths = widths();
    let act = |r: &mut ChaCha8Rng| if r.random_bool(0.5) { Activation::Gelu } else { Activation::Relu };
    config.motion.activation = act(rng);
    config.image.activation = act(rng);
    config.displacement_scale = rng.random_range(0.2..1.5);
    let channels = rng.random_range(1..=2);
    let schedule = CoarseToFineSchedule::new(rng.random_range(1..=10));
    let mut model = RegistrationModel::new(extents.clone(), channels, &config, schedule, rng.random()).unwrap();
    model.epoch = rng.random_range(1..=12);
    for t in model.motion_grid.params.tables.iter_mut() {
        *t = rng.random_range(-0.5..0.5);
    }
    for t in model.image_grid.params.tables.iter_mut() {
        *t = rng.random_range(-1.0..1.0);
    }
    for w in model.motion_mlp.params.data.iter_mut() {
        *w = rng.random_range(-0.4..0.4);
    }
    for w in model.image_mlp.params.data.iter_mut() {
        *w += rng.random_range(-0.1..0.1);
    }
    (model, extents)
}

// ---- label metrics -------------------------------------------------------

pub fn brute_dice(a: &LabelField, b: &LabelField) -> f64 {
    let na = a.values.iter().filter(|&&v| v != 0).count();
    let nb = b.values.iter().filter(|&&v| v != 0).count();
    let both = a
        .values
        .iter()
        .zip(&b.values)
        .filter(|(&x, &y)| x != 0 && y != 0)
        .count();
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

fn index_of(g: &Geometry, mut flat: usize) -> Vec<usize> {
    let mut idx = vec![0; g.dim()];
    for k in (0..g.dim()).rev() {
        idx[k] = flat % g.extents[k];
        flat /= g.extents[k];
    }
    idx
}

/// Foreground voxels touching background or the domain edge through a face.
pub fn brute_boundary(m: &LabelField) -> Vec<usize> {
    let g = &m.geometry;
    (0..g.len())
        .filter(|&flat| {
            if m.values[flat] == 0 {
                return false;
            }
            let idx = index_of(g, flat);
            (0..g.dim()).any(|k| {
                [-1i64, 1].iter().any(|&step| {
                    let j = idx[k] as i64 + step;
                    if j < 0 || j >= g.extents[k] as i64 {
                        return true;
                    }
                    let mut n = idx.clone();
                    n[k] = j as usize;
                    m.values[g.flat_index(&n)] == 0
                })
            })
        })
        .collect()
}

/// Pooled symmetric 95th percentile of boundary-to-boundary distances by
/// exhaustive pair search, with linear interpolation between order
/// statistics.
pub fn brute_hd95(a: &LabelField, b: &LabelField, spacing: &[f64]) -> f64 {
    let g = &a.geometry;
    let ea = brute_boundary(a);
    let eb = brute_boundary(b);
    let dist = |p: usize, q: usize| -> f64 {
        let (ip, iq) = (index_of(g, p), index_of(g, q));
        ip.iter()
            .zip(&iq)
            .zip(spacing)
            .map(|((&x, &y), s)| ((x as f64 - y as f64) * s).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let nearest = |p: usize, set: &[usize]| set.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min);
    let mut all: Vec<f64> = ea
        .iter()
        .map(|&p| nearest(p, &eb))
        .chain(eb.iter().map(|&p| nearest(p, &ea)))
        .collect();
    all.sort_by(f64::total_cmp);
    let pos = 0.95 * (all.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(all.len() - 1);
    all[lo] + (pos - lo as f64) * (all[hi] - all[lo])
}

/// Random blobby mask: union of a few random boxes, never empty.
pub fn random_mask(rng: &mut ChaCha8Rng, extents: &[usize]) -> LabelField {
    let g = Geometry::new(extents.to_vec());
    let mut values = vec![0u32; g.len()];
    let boxes = rng.random_range(1..=3);
    for _ in 0..boxes {
        let lo: Vec<usize> = extents.iter().map(|&n| rng.random_range(0..n)).collect();
        let hi: Vec<usize> = lo
            .iter()
            .zip(extents)
            .map(|(&l, &n)| rng.random_range(l..n))
            .collect();
        for (flat, v) in values.iter_mut().enumerate() {
            let idx = index_of(&g, flat);
            if idx.iter().zip(&lo).zip(&hi).all(|((&i, &l), &h)| i >= l && i <= h) {
                *v = 1;
            }
        }
    }
    // sprinkle isolated voxels so boundaries are irregular
    for _ in 0..rng.random_range(0..4) {
        let flat = rng.random_range(0..g.len());
        values[flat] = 1;
    }
    LabelField::new(g, values).unwrap()
}

// ---- gradient checks -----------------------------------------------------

/// Parameter block of a model, by position in `(motion grid, motion MLP,
/// image grid, image MLP)`.
pub fn block_mut(model: &mut RegistrationModel, k: usize) -> &mut Vec<f64> {
    match k {
        0 => &mut model.motion_grid.params.tables,
        1 => &mut model.motion_mlp.params.data,
        2 => &mut model.image_grid.params.tables,
        _ => &mut model.image_mlp.params.data,
    }
}

/// Relative errors of the analytic directional derivative of the joint loss
/// against central differences, one per parameter block, for a random model
/// and batch drawn from `seed`.
pub fn full_model_gradcheck(seed: u64) -> [f64; 4] {
    use inreg_core::model::LossTerms;
    use ndarray::Array2;

    let mut r = rng(seed);
    let (model, extents) = random_model(&mut r);
    let d = extents.len();
    let b = r.random_range(1..=16);
    // coordinates slightly beyond the unit box exercise the clamp
    let coords = Array2::from_shape_fn((b, d), |_| r.random_range(-0.05..1.05));
    let reference = random_vec(&mut r, b, 1.0);
    let moving = random_vec(&mut r, b, 1.0);
    let weights = model.current_weights();
    let (_, grads) = model.loss_and_grads_with(coords.view(), &reference, &moving, &weights, LossTerms::Both);
    let grad_blocks = [
        grads.motion_grid.tables.clone(),
        grads.motion_mlp.data.clone(),
        grads.image_grid.tables.clone(),
        grads.image_mlp.data.clone(),
    ];
    let mut out = [0.0; 4];
    for (k, g) in grad_blocks.iter().enumerate() {
        let dir = random_vec(&mut r, g.len(), 1.0);
        let analytic = dot(g, &dir);
        let numeric = directional_fd(
            |t| {
                let mut m = model.clone();
                for (p, v) in block_mut(&mut m, k).iter_mut().zip(&dir) {
                    *p += t * v;
                }
                let (loss, _) = m.loss_and_grads_with(coords.view(), &reference, &moving, &weights, LossTerms::Both);
                loss.total()
            },
            1e-6,
        );
        out[k] = rel_err(analytic, numeric, 1e-6);
    }
    out
}

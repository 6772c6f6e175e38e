//! Multi-resolution hash-grid encoding of normalized coordinates.
//!
//! Each level `i` covers `[0,1]^d` with a lattice of `n_i` cells per axis.
//! The `(n_i + 1)^d` vertices own `F` learnable features each, stored in a
//! table of `T` rows. Small levels index the table densely; larger levels go
//! through the XOR-of-primes spatial hash. A coordinate is embedded by
//! d-linear interpolation of its cell's `2^d` corner rows, every level is
//! scaled by its [`LevelWeights`] entry, and levels are concatenated
//! coarse-to-fine.

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-axis multipliers of the spatial hash. Axis 0 is left unscrambled.
pub const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

/// Half-width of the uniform distribution used for fresh tables.
pub const INIT_RANGE: f64 = 1e-4;

const MAX_DIM: usize = 3;
const MAX_CORNERS: usize = 1 << MAX_DIM;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashGridConfig {
    pub dim: usize,
    pub levels: usize,
    pub features_per_level: usize,
    pub table_size: usize,
    pub base_resolution: usize,
    pub finest_resolution: usize,
}

impl HashGridConfig {
    pub fn new(
        dim: usize,
        levels: usize,
        features_per_level: usize,
        table_size: usize,
        base_resolution: usize,
        finest_resolution: usize,
    ) -> Result<Self> {
        let config = Self {
            dim,
            levels,
            features_per_level,
            table_size,
            base_resolution,
            finest_resolution,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if !(2..=MAX_DIM).contains(&self.dim) {
            return fail(format!("grid dimension must be 2 or 3, got {}", self.dim));
        }
        if self.levels == 0 {
            return fail("grid needs at least one level".into());
        }
        if self.features_per_level == 0 {
            return fail("grid needs at least one feature per level".into());
        }
        if !self.table_size.is_power_of_two() {
            return fail(format!(
                "table size must be a power of two, got {}",
                self.table_size
            ));
        }
        if self.base_resolution == 0 {
            return fail("base resolution must be at least 1".into());
        }
        if self.finest_resolution < self.base_resolution {
            return fail(format!(
                "finest resolution {} is below base resolution {}",
                self.finest_resolution, self.base_resolution
            ));
        }
        if self.levels == 1 && self.finest_resolution != self.base_resolution {
            return fail("a single-level grid must have equal base and finest resolution".into());
        }
        Ok(())
    }

    /// Cells per axis at level `i`: `floor(n_min * b^i)` with the growth
    /// factor `b` chosen so the last level lands on `n_max`.
    pub fn resolution_at_level(&self, i: usize) -> usize {
        debug_assert!(i < self.levels);
        let (lo, hi) = (self.base_resolution, self.finest_resolution);
        if self.levels == 1 || lo == hi {
            return lo;
        }
        let growth = ((hi as f64).ln() - (lo as f64).ln()) / (self.levels - 1) as f64;
        let raw = lo as f64 * (growth * i as f64).exp();
        // exp/ln round-off can land a hair below an exact integer
        let res = (raw + 1e-9).floor() as usize;
        res.clamp(lo, hi)
    }

    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.levels).map(|i| self.resolution_at_level(i)).collect()
    }

    /// Length of the concatenated feature vector, `N * F`.
    pub fn feature_len(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn param_count(&self) -> usize {
        self.levels * self.table_size * self.features_per_level
    }

    fn is_dense(&self, resolution: usize) -> bool {
        (resolution + 1)
            .checked_pow(self.dim as u32)
            .is_some_and(|n| n <= self.table_size)
    }
}

/// Table row for a lattice vertex.
///
/// Row-major dense indexing (axis 0 slowest) when all `(res+1)^d` vertices
/// fit, otherwise `(XOR_k v_k * HASH_PRIMES[k]) mod T`.
pub fn cell_index(vertex: &[usize], resolution: usize, table_size: usize) -> usize {
    let side = resolution + 1;
    let dense = side
        .checked_pow(vertex.len() as u32)
        .is_some_and(|n| n <= table_size);
    if dense {
        vertex.iter().fold(0, |acc, &v| acc * side + v)
    } else {
        let mut h = 0u64;
        for (k, &v) in vertex.iter().enumerate() {
            h ^= (v as u64).wrapping_mul(HASH_PRIMES[k]);
        }
        (h & (table_size as u64 - 1)) as usize
    }
}

/// Multiplicative weight per level, applied to that level's feature block.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelWeights(Vec<f64>);

impl LevelWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::InvalidArgument(
                "level weights must lie in [0, 1]".into(),
            ));
        }
        if weights.windows(2).any(|p| p[1] > p[0]) {
            return Err(Error::InvalidArgument(
                "level weights must be non-increasing from coarse to fine".into(),
            ));
        }
        Ok(Self(weights))
    }

    pub fn ones(levels: usize) -> Self {
        Self(vec![1.0; levels])
    }

    pub fn zeros(levels: usize) -> Self {
        Self(vec![0.0; levels])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Learnable feature tables, laid out `[level][row][feature]`.
///
/// The same shape doubles as the gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct HashGridParams {
    pub tables: Vec<f64>,
}

impl HashGridParams {
    pub fn zeros(config: &HashGridConfig) -> Self {
        Self {
            tables: vec![0.0; config.param_count()],
        }
    }

    pub fn init<R: Rng + ?Sized>(config: &HashGridConfig, rng: &mut R) -> Self {
        let tables = (0..config.param_count())
            .map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE))
            .collect();
        Self { tables }
    }

    pub fn fill_zero(&mut self) {
        self.tables.fill(0.0);
    }
}

/// Corner rows and interpolation weights of one level's cell lookup.
#[derive(Clone, Copy, Debug)]
pub struct CellLookup {
    pub corners: usize,
    pub rows: [usize; MAX_CORNERS],
    pub weights: [f64; MAX_CORNERS],
    /// d weight / d coordinate, already scaled by the level resolution and
    /// zeroed along clamped axes.
    pub weight_grads: [[f64; MAX_DIM]; MAX_CORNERS],
}

#[derive(Clone, Debug)]
pub struct HashGrid {
    config: HashGridConfig,
    resolutions: Vec<usize>,
    dense: Vec<bool>,
    pub params: HashGridParams,
}

impl HashGrid {
    pub fn new(config: HashGridConfig, params: HashGridParams) -> Result<Self> {
        config.validate()?;
        if params.tables.len() != config.param_count() {
            return Err(Error::InvalidConfig(format!(
                "grid tables hold {} values, config expects {}",
                params.tables.len(),
                config.param_count()
            )));
        }
        let resolutions = config.resolutions();
        let dense = resolutions.iter().map(|&r| config.is_dense(r)).collect();
        Ok(Self {
            config,
            resolutions,
            dense,
            params,
        })
    }

    pub fn init<R: Rng + ?Sized>(config: HashGridConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = HashGridParams::init(&config, rng);
        Self::new(config, params)
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn feature_len(&self) -> usize {
        self.config.feature_len()
    }

    fn row_of(&self, level: usize, vertex: &[usize]) -> usize {
        let res = self.resolutions[level];
        let side = res + 1;
        if self.dense[level] {
            vertex.iter().fold(0, |acc, &v| acc * side + v)
        } else {
            cell_index(vertex, res, self.config.table_size)
        }
    }

    /// Cell lookup for `coord` at `level`. Components are clamped to `[0,1]`.
    pub fn lookup(&self, level: usize, coord: &[f64]) -> CellLookup {
        let d = self.config.dim;
        debug_assert_eq!(coord.len(), d);
        let res = self.resolutions[level];
        let mut cell = [0usize; MAX_DIM];
        let mut frac = [0f64; MAX_DIM];
        let mut slope = [0f64; MAX_DIM];
        for k in 0..d {
            let c = coord[k];
            let inside = (0.0..=1.0).contains(&c);
            let pos = c.clamp(0.0, 1.0) * res as f64;
            let base = (pos.floor() as usize).min(res - 1);
            cell[k] = base;
            frac[k] = pos - base as f64;
            slope[k] = if inside { res as f64 } else { 0.0 };
        }

        let corners = 1 << d;
        let mut out = CellLookup {
            corners,
            rows: [0; MAX_CORNERS],
            weights: [0.0; MAX_CORNERS],
            weight_grads: [[0.0; MAX_DIM]; MAX_CORNERS],
        };
        let mut vertex = [0usize; MAX_DIM];
        for c in 0..corners {
            let mut factors = [0f64; MAX_DIM];
            for k in 0..d {
                let upper = (c >> k) & 1 == 1;
                vertex[k] = cell[k] + upper as usize;
                factors[k] = if upper { frac[k] } else { 1.0 - frac[k] };
            }
            out.rows[c] = self.row_of(level, &vertex[..d]);
            out.weights[c] = factors[..d].iter().product();
            for k in 0..d {
                let sign = if (c >> k) & 1 == 1 { 1.0 } else { -1.0 };
                let others: f64 = (0..d).filter(|&j| j != k).map(|j| factors[j]).product();
                out.weight_grads[c][k] = sign * others * slope[k];
            }
        }
        out
    }

    /// Writes the `N * F` feature vector for `coord` into `out`.
    pub fn encode_into(&self, coord: &[f64], weights: &LevelWeights, out: &mut [f64]) {
        let f = self.config.features_per_level;
        let t = self.config.table_size;
        debug_assert_eq!(out.len(), self.feature_len());
        debug_assert_eq!(weights.len(), self.config.levels);
        for (level, &w) in weights.as_slice().iter().enumerate() {
            let block = &mut out[level * f..(level + 1) * f];
            block.fill(0.0);
            if w == 0.0 {
                continue;
            }
            let cell = self.lookup(level, coord);
            for c in 0..cell.corners {
                let base = (level * t + cell.rows[c]) * f;
                let row = &self.params.tables[base..base + f];
                let cw = cell.weights[c];
                for (o, v) in block.iter_mut().zip(row) {
                    *o += cw * v;
                }
            }
            for o in block.iter_mut() {
                *o *= w;
            }
        }
    }

    pub fn encode(&self, coord: &[f64], weights: &LevelWeights) -> Vec<f64> {
        let mut out = vec![0.0; self.feature_len()];
        self.encode_into(coord, weights, &mut out);
        out
    }

    /// Accumulates table gradients into `table_grad` and, when requested,
    /// adds the coordinate gradient into `coord_grad`.
    pub fn accumulate_backward(
        &self,
        coord: &[f64],
        upstream: &[f64],
        weights: &LevelWeights,
        table_grad: &mut [f64],
        mut coord_grad: Option<&mut [f64]>,
    ) {
        let d = self.config.dim;
        let f = self.config.features_per_level;
        let t = self.config.table_size;
        for (level, &w) in weights.as_slice().iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let up = &upstream[level * f..(level + 1) * f];
            if up.iter().all(|&g| g == 0.0) {
                continue;
            }
            let cell = self.lookup(level, coord);
            for c in 0..cell.corners {
                let base = (level * t + cell.rows[c]) * f;
                let scale = w * cell.weights[c];
                for (g, u) in table_grad[base..base + f].iter_mut().zip(up) {
                    *g += scale * u;
                }
                if let Some(cg) = coord_grad.as_deref_mut() {
                    let row = &self.params.tables[base..base + f];
                    let dot: f64 = row.iter().zip(up).map(|(v, u)| v * u).sum();
                    for k in 0..d {
                        cg[k] += w * cell.weight_grads[c][k] * dot;
                    }
                }
            }
        }
    }

    /// Gradients of `<upstream, encode(coord)>` with respect to the tables
    /// and the coordinate.
    pub fn encode_backward(
        &self,
        coord: &[f64],
        upstream: &[f64],
        weights: &LevelWeights,
    ) -> (HashGridParams, Vec<f64>) {
        let mut tables = HashGridParams::zeros(&self.config);
        let mut coord_grad = vec![0.0; self.config.dim];
        self.accumulate_backward(
            coord,
            upstream,
            weights,
            &mut tables.tables,
            Some(&mut coord_grad),
        );
        (tables, coord_grad)
    }

    /// Row-wise [`encode_into`](Self::encode_into) over a `B x d` batch.
    pub fn encode_batch(
        &self,
        coords: ArrayView2<f64>,
        weights: &LevelWeights,
        mut out: ArrayViewMut2<f64>,
    ) {
        for (coord, mut row) in coords.outer_iter().zip(out.outer_iter_mut()) {
            let coord = coord.as_slice().expect("contiguous coordinate rows");
            let row = row.as_slice_mut().expect("contiguous feature rows");
            self.encode_into(coord, weights, row);
        }
    }

    /// Batched backward pass; rows are accumulated in order.
    pub fn backward_batch(
        &self,
        coords: ArrayView2<f64>,
        upstream: ArrayView2<f64>,
        weights: &LevelWeights,
        table_grad: &mut HashGridParams,
        mut coord_grad: Option<ArrayViewMut2<f64>>,
    ) {
        for (b, (coord, up)) in coords.outer_iter().zip(upstream.outer_iter()).enumerate() {
            let coord = coord.as_slice().expect("contiguous coordinate rows");
            let up = up.as_slice().expect("contiguous gradient rows");
            let cg = coord_grad
                .as_mut()
                .map(|g| g.row_mut(b).into_slice().expect("contiguous rows"));
            self.accumulate_backward(coord, up, weights, &mut table_grad.tables, cg);
        }
    }
}

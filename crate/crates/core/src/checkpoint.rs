//! Binary model checkpoints.
//!
//! Layout, all little-endian: magic `INRGCKPT`, version, d, channel count,
//! extents, displacement scale (f64), schedule state, then the motion grid,
//! motion MLP, image grid and image MLP. Grids store their config followed by
//! one block per level (resolution, then `T x F` f32 values); MLPs store
//! their config, the `(in, out)` layer shapes and the flat parameter buffer as f32.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{HashGrid, HashGridConfig, HashGridParams};
use crate::mlp::{Activation, Mlp, MlpConfig, MlpParams};
use crate::model::{CoarseToFineSchedule, RegistrationModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"INRGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("checkpoint values fit in 32 bits");
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, values: &[f64]) {
        for &v in values {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    fn grid(&mut self, grid: &HashGrid) {
        let c = grid.config();
        for v in [
            c.dim,
            c.levels,
            c.features_per_level,
            c.table_size,
            c.base_resolution,
            c.finest_resolution,
        ] {
            self.u32(v);
        }
        let block = c.table_size * c.features_per_level;
        for (level, &res) in grid.resolutions().iter().enumerate() {
            self.u32(res);
            self.f32s(&grid.params.tables[level * block..(level + 1) * block]);
        }
    }

    fn mlp(&mut self, mlp: &Mlp) {
        let c = mlp.config();
        self.u32(c.input_dim);
        self.u32(c.output_dim);
        self.u8(match c.activation {
            Activation::Relu => 0,
            Activation::Gelu => 1,
        });
        self.u8(c.final_layer_zero_init as u8);
        let dims = c.layer_dims();
        self.u32(dims.len());
        for (inp, out) in dims {
            self.u32(inp);
            self.u32(out);
        }
        self.f32s(&mlp.params.data);
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(self.path, "truncated checkpoint")),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.path, "checkpoint block too large"))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::format(self.path, format!("invalid flag byte {v}"))),
        }
    }

    fn grid(&mut self) -> Result<HashGrid> {
        let config = HashGridConfig {
            dim: self.u32()?,
            levels: self.u32()?,
            features_per_level: self.u32()?,
            table_size: self.u32()?,
            base_resolution: self.u32()?,
            finest_resolution: self.u32()?,
        };
        config
            .validate()
            .map_err(|e| Error::format(self.path, e.to_string()))?;
        let block = config.table_size * config.features_per_level;
        let mut tables = Vec::with_capacity(config.param_count());
        for level in 0..config.levels {
            let res = self.u32()?;
            let expected = config.resolution_at_level(level);
            if res != expected {
                return Err(Error::format(
                    self.path,
                    format!("level {level} resolution {res} disagrees with config ({expected})"),
                ));
            }
            tables.extend(self.f32s(block)?);
        }
        HashGrid::new(config, HashGridParams { tables })
    }

    fn mlp(&mut self) -> Result<Mlp> {
        let input_dim = self.u32()?;
        let output_dim = self.u32()?;
        let activation = match self.u8()? {
            0 => Activation::Relu,
            1 => Activation::Gelu,
            v => return Err(Error::format(self.path, format!("unknown activation code {v}"))),
        };
        let final_layer_zero_init = self.flag()?;
        let layers = self.u32()?;
        let mut dims = Vec::with_capacity(layers.min(64));
        for _ in 0..layers {
            dims.push((self.u32()?, self.u32()?));
        }
        if layers < 2 || dims[0].0 != input_dim || dims[layers - 1].1 != output_dim {
            return Err(Error::format(self.path, "inconsistent MLP layer shapes"));
        }
        let config = MlpConfig {
            input_dim,
            hidden_widths: dims[..layers - 1].iter().map(|&(_, out)| out).collect(),
            output_dim,
            activation,
            final_layer_zero_init,
        };
        if config.layer_dims() != dims {
            return Err(Error::format(self.path, "inconsistent MLP layer shapes"));
        }
        let data = self.f32s(config.param_count())?;
        let params = MlpParams::from_data(&config, data)?;
        Mlp::new(config, params)
    }
}

pub fn to_bytes(model: &RegistrationModel) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION as usize);
    w.u32(model.dim());
    w.u32(model.channels);
    for &n in &model.extents {
        w.u32(n);
    }
    w.f64(model.displacement_scale);
    let s = &model.schedule;
    w.u8(s.enabled as u8);
    w.u8(s.apply_to_motion as u8);
    w.u8(s.apply_to_image as u8);
    w.u32(s.target_epoch);
    w.u32(model.epoch);
    w.grid(&model.motion_grid);
    w.mlp(&model.motion_mlp);
    w.grid(&model.image_grid);
    w.mlp(&model.image_mlp);
    w.0
}

pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<RegistrationModel> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let d = r.u32()?;
    if !(2..=3).contains(&d) {
        return Err(Error::format(path, format!("invalid dimension {d}")));
    }
    let channels = r.u32()?;
    let extents = (0..d).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let displacement_scale = r.f64()?;
    let schedule = CoarseToFineSchedule {
        enabled: r.flag()?,
        apply_to_motion: r.flag()?,
        apply_to_image: r.flag()?,
        target_epoch: r.u32()?,
    };
    let epoch = r.u32()?;
    let motion_grid = r.grid()?;
    let motion_mlp = r.mlp()?;
    let image_grid = r.grid()?;
    let image_mlp = r.mlp()?;
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint"));
    }
    RegistrationModel::from_parts(
        extents,
        channels,
        displacement_scale,
        motion_grid,
        motion_mlp,
        image_grid,
        image_mlp,
        schedule,
        epoch,
    )
}

pub fn save(path: impl AsRef<Path>, model: &RegistrationModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<RegistrationModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GranularityMode, ModelConfig};

    fn small_model() -> RegistrationModel {
        let mut config = ModelConfig::for_geometry(&[12, 10], GranularityMode::Deformable);
        config.motion.hidden_widths = vec![8];
        config.image.hidden_widths = vec![8, 4];
        config.image.grid.table_size = 64;
        RegistrationModel::new(vec![12, 10], 2, &config, CoarseToFineSchedule::new(7), 3).unwrap()
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        let model = small_model();
        let bytes = to_bytes(&model);
        let back = from_bytes(Path::new("m"), &bytes).unwrap();
        assert_eq!(to_bytes(&back), bytes);
        assert_eq!(back.extents, model.extents);
        assert_eq!(back.schedule, model.schedule);
    }

    #[test]
    fn truncation_and_magic_are_detected() {
        let bytes = to_bytes(&small_model());
        assert!(from_bytes(Path::new("m"), &bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[3] ^= 1;
        assert!(from_bytes(Path::new("m"), &bad).is_err());
    }
}

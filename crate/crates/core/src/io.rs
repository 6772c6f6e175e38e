//! File formats: PNG/PGM images, raw volumes with a JSON sidecar, a minimal
//! NIfTI-1 reader and the binary displacement field.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, ImageError, ImageReader, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DisplacementField, Geometry, LabelField, ScalarField, Volume};
use crate::metrics::quantile;

pub const DISPLACEMENT_MAGIC: &[u8; 8] = b"INRGDISP";
pub const DISPLACEMENT_VERSION: u32 = 1;

const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_INTENT_LABEL: i16 = 1002;

/// Channel taken from a 2D image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    /// Single-channel images only.
    Gray,
    R,
    G,
    B,
    /// `0.299 r + 0.587 g + 0.114 b`.
    Luma,
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" => Ok(Channel::Gray),
            "r" => Ok(Channel::R),
            "g" => Ok(Channel::G),
            "b" => Ok(Channel::B),
            "luma" => Ok(Channel::Luma),
            other => Err(Error::InvalidArgument(format!(
                "unknown channel {other:?}; expected gray, r, g, b or luma"
            ))),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn image_error(path: &Path, e: ImageError) -> Error {
    match e {
        ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

fn decode_image(path: &Path) -> Result<DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_error(path, e))
}

fn image_geometry(img: &DynamicImage) -> Geometry {
    Geometry::new(vec![img.height() as usize, img.width() as usize])
}

/// Reads one channel of an 8- or 16-bit PNG or PGM image, scaled to `[0,1]`
/// by the bit depth. Rows become axis 0.
pub fn load_image_2d(path: impl AsRef<Path>, channel: Channel) -> Result<ScalarField> {
    let path = path.as_ref();
    let img = decode_image(path)?;
    let geometry = image_geometry(&img);
    let values: Vec<f64> = if img.color().has_color() {
        let rgb = img.to_rgb32f();
        let pick: fn(&[f32]) -> f64 = match channel {
            Channel::Gray => {
                return Err(Error::format(
                    path,
                    "color image; select channel r, g, b or luma",
                ))
            }
            Channel::R => |p| p[0] as f64,
            Channel::G => |p| p[1] as f64,
            Channel::B => |p| p[2] as f64,
            Channel::Luma => |p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64,
        };
        rgb.as_raw().chunks_exact(3).map(pick).collect()
    } else {
        img.to_luma16()
            .as_raw()
            .iter()
            .map(|&v| v as f64 / u16::MAX as f64)
            .collect()
    };
    ScalarField::new(geometry, values)
}

fn require_2d(path: &Path, geometry: &Geometry) -> Result<(u32, u32)> {
    if geometry.dim() != 2 {
        return Err(Error::format(path, "PNG output needs a 2D field"));
    }
    Ok((geometry.extents[1] as u32, geometry.extents[0] as u32))
}

/// Writes a 16-bit grayscale PNG of `field` clamped to `[0,1]`.
pub fn save_image_png16(path: impl AsRef<Path>, field: &ScalarField) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = require_2d(path, &field.geometry)?;
    let raw: Vec<u16> = field
        .values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * u16::MAX as f64).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(w, h, raw).expect("buffer size");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Writes an 8-bit RGB PNG; `rgb` holds one `[0,1]` triple per voxel.
pub fn save_rgb_png(path: impl AsRef<Path>, geometry: &Geometry, rgb: &[[f64; 3]]) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = require_2d(path, geometry)?;
    let raw: Vec<u8> = rgb
        .iter()
        .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w, h, raw).expect("buffer size");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Integer label image: stored gray values are the labels.
pub fn load_labels_png(path: impl AsRef<Path>) -> Result<LabelField> {
    let path = path.as_ref();
    let img = decode_image(path)?;
    let geometry = image_geometry(&img);
    let values = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
        _ => return Err(Error::format(path, "label images must be 8- or 16-bit grayscale")),
    };
    LabelField::new(geometry, values)
}

pub fn save_labels_png(path: impl AsRef<Path>, labels: &LabelField) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = require_2d(path, &labels.geometry)?;
    let max = labels.values.iter().copied().max().unwrap_or(0);
    let result = if max <= u8::MAX as u32 {
        let raw = labels.values.iter().map(|&v| v as u8).collect();
        ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(w, h, raw)
            .expect("buffer size")
            .save(path)
    } else if max <= u16::MAX as u32 {
        let raw = labels.values.iter().map(|&v| v as u16).collect();
        ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w, h, raw)
            .expect("buffer size")
            .save(path)
    } else {
        return Err(Error::format(path, format!("label {max} does not fit a 16-bit PNG")));
    };
    result.map_err(|e| image_error(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 | DType::I8 => 1,
            DType::U16 | DType::I16 => 2,
            DType::U32 | DType::I32 | DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, DType::F32 | DType::F64)
    }

    fn decode(self, bytes: &[u8], little_endian: bool) -> Vec<f64> {
        macro_rules! conv {
            ($t:ty) => {
                bytes
                    .chunks_exact(std::mem::size_of::<$t>())
                    .map(|c| {
                        let arr = c.try_into().expect("chunk width");
                        let v = if little_endian {
                            <$t>::from_le_bytes(arr)
                        } else {
                            <$t>::from_be_bytes(arr)
                        };
                        v as f64
                    })
                    .collect()
            };
        }
        match self {
            DType::U8 => conv!(u8),
            DType::I8 => conv!(i8),
            DType::U16 => conv!(u16),
            DType::I16 => conv!(i16),
            DType::U32 => conv!(u32),
            DType::I32 => conv!(i32),
            DType::F32 => conv!(f32),
            DType::F64 => conv!(f64),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Scalar,
    Label,
}

/// JSON sidecar describing a raw little-endian array, axis 0 slowest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub extents: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<Vec<f64>>,
    pub dtype: DType,
    pub kind: VolumeKind,
    /// Payload file relative to the sidecar; defaults to the sidecar path
    /// with a `.raw` extension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
}

impl VolumeHeader {
    fn geometry(&self) -> Result<Geometry> {
        let spacing = self
            .spacing
            .clone()
            .unwrap_or_else(|| vec![1.0; self.extents.len()]);
        Geometry::with_spacing(self.extents.clone(), spacing)
    }
}

fn payload_path(sidecar: &Path, header: &VolumeHeader) -> PathBuf {
    match &header.data {
        Some(name) => sidecar.with_file_name(name),
        None => sidecar.with_extension("raw"),
    }
}

fn build_volume(path: &Path, geometry: Geometry, values: Vec<f64>, kind: VolumeKind) -> Result<Volume> {
    match kind {
        VolumeKind::Scalar => Ok(Volume::Scalar(ScalarField::new(geometry, values)?)),
        VolumeKind::Label => {
            let labels = values
                .into_iter()
                .map(|v| {
                    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                        Ok(v as u32)
                    } else {
                        Err(Error::format(path, format!("invalid label value {v}")))
                    }
                })
                .collect::<Result<Vec<u32>>>()?;
            Ok(Volume::Label(LabelField::new(geometry, labels)?))
        }
    }
}

fn load_raw_volume(sidecar: &Path) -> Result<Volume> {
    let text = fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(sidecar, e.to_string()))?;
    if header.kind == VolumeKind::Label && !header.dtype.is_integer() {
        return Err(Error::format(sidecar, "label volumes need an integer dtype"));
    }
    let geometry = header.geometry()?;
    let data_path = payload_path(sidecar, &header);
    let bytes = read_bytes(&data_path)?;
    let expected = geometry.len() * header.dtype.size();
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    build_volume(&data_path, geometry, header.dtype.decode(&bytes, true), header.kind)
}

/// Sidecar text and payload bytes of a raw volume: f32 for scalar fields,
/// u32 for labels. `data_name` is recorded as the payload file name.
pub fn encode_raw_volume(volume: &Volume, data_name: &str) -> Result<(String, Vec<u8>)> {
    let geometry = volume.geometry();
    let (dtype, kind, bytes): (DType, VolumeKind, Vec<u8>) = match volume {
        Volume::Scalar(f) => (
            DType::F32,
            VolumeKind::Scalar,
            f.values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
        ),
        Volume::Label(f) => (
            DType::U32,
            VolumeKind::Label,
            f.values.iter().flat_map(|&v| v.to_le_bytes()).collect(),
        ),
    };
    let header = VolumeHeader {
        extents: geometry.extents.clone(),
        spacing: Some(geometry.spacing.clone()),
        dtype,
        kind,
        data: Some(data_name.to_string()),
    };
    Ok((serde_json::to_string_pretty(&header)?, bytes))
}

/// Writes the sidecar at `sidecar` and the payload next to it with a
/// `.raw` extension.
pub fn save_raw_volume(sidecar: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    let sidecar = sidecar.as_ref();
    let raw_path = sidecar.with_extension("raw");
    let name = raw_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (text, bytes) = encode_raw_volume(volume, &name)?;
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(sidecar, text).map_err(|e| Error::io(sidecar, e))
}

fn nifti_dtype(code: i16) -> Option<DType> {
    Some(match code {
        2 => DType::U8,
        4 => DType::I16,
        8 => DType::I32,
        16 => DType::F32,
        64 => DType::F64,
        256 => DType::I8,
        512 => DType::U16,
        768 => DType::U32,
        _ => return None,
    })
}

/// Uncompressed single-file NIfTI-1. The affine is ignored; NIfTI axis `i`
/// (fastest on disk) becomes axis 0. Intent code 1002 marks a label map.
pub fn parse_nifti(path: &Path, bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(Error::format(path, "file shorter than a NIfTI-1 header"));
    }
    let le = match (
        i32::from_le_bytes(bytes[0..4].try_into().unwrap()),
        i32::from_be_bytes(bytes[0..4].try_into().unwrap()),
    ) {
        (348, _) => true,
        (_, 348) => false,
        _ => return Err(Error::format(path, "not a NIfTI-1 header (sizeof_hdr != 348)")),
    };
    if &bytes[344..347] != b"n+1" {
        return Err(Error::format(path, "only single-file NIfTI-1 (magic n+1) is supported"));
    }
    let i16_at = |o: usize| {
        let a = bytes[o..o + 2].try_into().unwrap();
        if le { i16::from_le_bytes(a) } else { i16::from_be_bytes(a) }
    };
    let f32_at = |o: usize| {
        let a = bytes[o..o + 4].try_into().unwrap();
        if le { f32::from_le_bytes(a) } else { f32::from_be_bytes(a) }
    };

    let ndim = i16_at(40);
    if !(2..=3).contains(&ndim) {
        return Err(Error::format(path, format!("{ndim}-dimensional NIfTI not supported")));
    }
    let d = ndim as usize;
    let mut nifti_extents = Vec::with_capacity(d);
    let mut spacing = Vec::with_capacity(d);
    for k in 0..d {
        let n = i16_at(42 + 2 * k);
        if n < 1 {
            return Err(Error::format(path, format!("invalid dimension {n} on axis {k}")));
        }
        nifti_extents.push(n as usize);
        let s = f32_at(80 + 4 * k) as f64;
        spacing.push(if s > 0.0 { s } else { 1.0 });
    }
    let intent = i16_at(68);
    let code = i16_at(70);
    let dtype = nifti_dtype(code)
        .ok_or_else(|| Error::format(path, format!("unsupported NIfTI datatype {code}")))?;
    let offset = f32_at(108);
    if !(offset >= NIFTI_HEADER_LEN as f32) {
        return Err(Error::format(path, format!("invalid vox_offset {offset}")));
    }
    let offset = offset as usize;
    let slope = f32_at(112) as f64;
    let inter = f32_at(116) as f64;

    let count: usize = nifti_extents.iter().product();
    let expected = offset + count * dtype.size();
    if bytes.len() < expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let disk = dtype.decode(&bytes[offset..offset + count * dtype.size()], le);

    // disk order has axis 0 fastest; fields store axis 0 slowest
    let geometry = Geometry::with_spacing(nifti_extents.clone(), spacing)?;
    let mut values = vec![0.0; count];
    let mut idx = vec![0usize; d];
    for (flat, v) in values.iter_mut().enumerate() {
        geometry.unravel(flat, &mut idx);
        let mut disk_index = 0;
        for k in (0..d).rev() {
            disk_index = disk_index * nifti_extents[k] + idx[k];
        }
        *v = disk[disk_index];
    }

    let kind = if intent == NIFTI_INTENT_LABEL {
        VolumeKind::Label
    } else {
        if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
            for v in &mut values {
                *v = *v * slope + inter;
            }
        }
        VolumeKind::Scalar
    };
    build_volume(path, geometry, values, kind)
}

fn extension(path: &Path) -> String {
    path.extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default()
}

/// Loads an image or volume by extension: `.png`/`.pgm` as a luma scalar
/// field, `.json` as a raw-volume sidecar, `.nii` as NIfTI-1.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "png" | "pgm" => Ok(Volume::Scalar(load_image_2d(path, Channel::Luma)?)),
        "json" => load_raw_volume(path),
        "nii" => parse_nifti(path, &read_bytes(path)?),
        other => Err(Error::format(path, format!("unsupported file extension {other:?}"))),
    }
}

/// Loads a label map; integer-valued scalar volumes are accepted as labels.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelField> {
    let path = path.as_ref();
    if matches!(extension(path).as_str(), "png" | "pgm") {
        return load_labels_png(path);
    }
    match load_volume(path)? {
        Volume::Label(l) => Ok(l),
        Volume::Scalar(f) => match build_volume(path, f.geometry, f.values, VolumeKind::Label)? {
            Volume::Label(l) => Ok(l),
            Volume::Scalar(_) => unreachable!(),
        },
    }
}

/// Saves by extension: `.png` (16-bit intensities or integer labels) or
/// `.json` (raw volume with sidecar).
pub fn save_volume(path: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    let path = path.as_ref();
    match (extension(path).as_str(), volume) {
        ("png", Volume::Scalar(f)) => save_image_png16(path, f),
        ("png", Volume::Label(l)) => save_labels_png(path, l),
        ("json", v) => save_raw_volume(path, v),
        (other, _) => Err(Error::format(path, format!("cannot write extension {other:?}"))),
    }
}

/// Clips to the 0.5th and 99.5th percentiles, then rescales to `[0,1]`.
/// Constant fields become 0.5 everywhere.
pub fn normalize_intensity(field: &ScalarField) -> ScalarField {
    let mut sorted = field.values.clone();
    let lo = quantile(&mut sorted, 0.005);
    let hi = quantile(&mut sorted, 0.995);
    let values = if hi > lo {
        field
            .values
            .iter()
            .map(|&v| (v.clamp(lo, hi) - lo) / (hi - lo))
            .collect()
    } else {
        vec![0.5; field.values.len()]
    };
    ScalarField {
        geometry: field.geometry.clone(),
        values,
    }
}

pub fn displacement_to_bytes(field: &DisplacementField) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * field.dim() + 4 * field.data.len());
    out.extend_from_slice(DISPLACEMENT_MAGIC);
    out.extend_from_slice(&DISPLACEMENT_VERSION.to_le_bytes());
    out.extend_from_slice(&(field.dim() as u32).to_le_bytes());
    for &n in &field.extents {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for &v in &field.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn displacement_from_bytes(path: &Path, bytes: &[u8]) -> Result<DisplacementField> {
    let word = |o: usize| -> Result<u32> {
        bytes
            .get(o..o + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::format(path, "truncated displacement header"))
    };
    if bytes.len() < 8 || &bytes[..8] != DISPLACEMENT_MAGIC {
        return Err(Error::format(path, "not a displacement field file (bad magic)"));
    }
    let version = word(8)?;
    if version != DISPLACEMENT_VERSION {
        return Err(Error::format(path, format!("unsupported displacement version {version}")));
    }
    let d = word(12)? as usize;
    if !(2..=3).contains(&d) {
        return Err(Error::format(path, format!("invalid displacement dimension {d}")));
    }
    let extents = (0..d)
        .map(|k| word(16 + 4 * k).map(|n| n as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 16 + 4 * d;
    let expected = header + 4 * d * extents.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DisplacementField::new(extents, data)
}

pub fn save_displacement(path: impl AsRef<Path>, field: &DisplacementField) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, displacement_to_bytes(field)).map_err(|e| Error::io(path, e))
}

pub fn load_displacement(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    displacement_from_bytes(path, &read_bytes(path)?)
}

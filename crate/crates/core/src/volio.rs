//! Volume file I/O and PNG slice export.
//!
//! A volume on disk is a pair of files: `NAME.vol` holds the raw
//! little-endian payload in x-fastest row-major order, and `NAME.volh` is a
//! text sidecar with the keys `dims=X,Y,Z`, `dtype={u8|f64|u1|u32}` and
//! `order=xyz-row-major`. Binary (`u1`) volumes are stored one byte per
//! voxel. Write followed by read is bit-identical for every dtype.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::{Dims, Dtype, Volume};

/// A volume tagged with its on-disk dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Intensity(Volume<u8>),
    Probability(Volume<f64>),
    Binary(Volume<u8>),
    Labels(Volume<u32>),
}

impl AnyVolume {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyVolume::Intensity(_) => Dtype::U8,
            AnyVolume::Probability(_) => Dtype::F64,
            AnyVolume::Binary(_) => Dtype::U1,
            AnyVolume::Labels(_) => Dtype::U32,
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            AnyVolume::Intensity(v) | AnyVolume::Binary(v) => v.dims(),
            AnyVolume::Probability(v) => v.dims(),
            AnyVolume::Labels(v) => v.dims(),
        }
    }

    pub fn into_binary(self) -> Result<Volume<u8>> {
        match self {
            AnyVolume::Binary(v) => Ok(v),
            other => Err(Error::format(format!(
                "expected a u1 volume, found {}",
                other.dtype().name()
            ))),
        }
    }

    pub fn into_intensity(self) -> Result<Volume<u8>> {
        match self {
            AnyVolume::Intensity(v) => Ok(v),
            other => Err(Error::format(format!(
                "expected a u8 volume, found {}",
                other.dtype().name()
            ))),
        }
    }

    pub fn into_labels(self) -> Result<Volume<u32>> {
        match self {
            AnyVolume::Labels(v) => Ok(v),
            other => Err(Error::format(format!(
                "expected a u32 label volume, found {}",
                other.dtype().name()
            ))),
        }
    }

    pub fn into_probability(self) -> Result<Volume<f64>> {
        match self {
            AnyVolume::Probability(v) => Ok(v),
            other => Err(Error::format(format!(
                "expected an f64 volume, found {}",
                other.dtype().name()
            ))),
        }
    }
}

fn header_path(vol_path: &Path) -> PathBuf {
    vol_path.with_extension("volh")
}

/// Writes `NAME.vol` + `NAME.volh`.
pub fn write_volume(vol: &AnyVolume, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let dims = vol.dims();
    let header = format!(
        "dims={},{},{}\ndtype={}\norder=xyz-row-major\n",
        dims.x,
        dims.y,
        dims.z,
        vol.dtype().name()
    );
    fs::write(header_path(path), header)?;

    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    match vol {
        AnyVolume::Intensity(v) | AnyVolume::Binary(v) => file.write_all(v.voxels())?,
        AnyVolume::Probability(v) => {
            for value in v.voxels() {
                file.write_all(&value.to_le_bytes())?;
            }
        }
        AnyVolume::Labels(v) => {
            for value in v.voxels() {
                file.write_all(&value.to_le_bytes())?;
            }
        }
    }
    file.flush()?;
    Ok(())
}

/// Reads a volume pair written by [`write_volume`].
pub fn read_volume(path: &Path) -> Result<AnyVolume> {
    let header_file = header_path(path);
    let header = fs::read_to_string(&header_file).map_err(|e| {
        Error::format(format!("cannot read header {}: {e}", header_file.display()))
    })?;

    let mut dims: Option<Dims> = None;
    let mut dtype: Option<Dtype> = None;
    let mut order_seen = false;
    for line in header.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("malformed header line `{line}`")))?;
        match key.trim() {
            "dims" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::format(format!("dims `{value}` must be X,Y,Z")));
                }
                let parse = |s: &str| -> Result<usize> {
                    s.parse()
                        .map_err(|_| Error::format(format!("bad dims value `{s}`")))
                };
                dims = Some(Dims::new(parse(parts[0])?, parse(parts[1])?, parse(parts[2])?));
            }
            "dtype" => dtype = Some(Dtype::parse(value.trim())?),
            "order" => {
                if value.trim() != "xyz-row-major" {
                    return Err(Error::format(format!("unsupported order `{value}`")));
                }
                order_seen = true;
            }
            other => return Err(Error::format(format!("unknown header key `{other}`"))),
        }
    }
    let dims = dims.ok_or_else(|| Error::format("header missing dims".to_string()))?;
    let dtype = dtype.ok_or_else(|| Error::format("header missing dtype".to_string()))?;
    if !order_seen {
        return Err(Error::format("header missing order".to_string()));
    }

    let payload = fs::read(path)?;
    let expected = dims.len() * dtype.bytes_per_voxel();
    if payload.len() != expected {
        return Err(Error::format(format!(
            "payload is {} bytes but dims {} with dtype {} require {}",
            payload.len(),
            dims,
            dtype.name(),
            expected
        )));
    }

    match dtype {
        Dtype::U8 => Ok(AnyVolume::Intensity(Volume::new(dims, payload)?)),
        Dtype::U1 => {
            if let Some(bad) = payload.iter().find(|&&b| b > 1) {
                return Err(Error::format(format!(
                    "u1 volume contains value {bad}, only 0/1 allowed"
                )));
            }
            Ok(AnyVolume::Binary(Volume::new(dims, payload)?))
        }
        Dtype::U32 => {
            let data: Vec<u32> = payload
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(AnyVolume::Labels(Volume::new(dims, data)?))
        }
        Dtype::F64 => {
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let vol = Volume::new(dims, data)?;
            if let Some(bad) = vol.voxels().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::format(format!(
                    "f64 probability volume contains out-of-range value {bad}"
                )));
            }
            Ok(AnyVolume::Probability(vol))
        }
    }
}

/// Deterministic label color: splitmix64 of the label id, mapped into
/// [64, 255] per channel so labels stay visible on black background.
pub fn label_color(label: u32) -> [u8; 3] {
    if label == 0 {
        return [0, 0, 0];
    }
    let mut state = (label as u64).wrapping_mul(0x9e3779b97f4a7c15);
    let mut next = || {
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        (z ^ (z >> 31)) as u8
    };
    [
        64 + (next() % 192),
        64 + (next() % 192),
        64 + (next() % 192),
    ]
}

/// Slice axis for PNG export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceAxis {
    X,
    Y,
    Z,
}

impl SliceAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(SliceAxis::X),
            "y" => Ok(SliceAxis::Y),
            "z" => Ok(SliceAxis::Z),
            other => Err(Error::config(format!("axis must be x, y or z, got `{other}`"))),
        }
    }
}

fn slice_geometry(dims: Dims, axis: SliceAxis) -> (usize, usize, usize) {
    // (slice count, image width, image height)
    match axis {
        SliceAxis::X => (dims.x, dims.y, dims.z),
        SliceAxis::Y => (dims.y, dims.x, dims.z),
        SliceAxis::Z => (dims.z, dims.x, dims.y),
    }
}

fn slice_voxel(axis: SliceAxis, slice: usize, u: usize, v: usize) -> (usize, usize, usize) {
    match axis {
        SliceAxis::X => (slice, u, v),
        SliceAxis::Y => (u, slice, v),
        SliceAxis::Z => (u, v, slice),
    }
}

/// Exports every slice along `axis` as a PNG (`NAME_z0007.png` style).
/// Scalar volumes export as 8-bit grayscale; label volumes as RGB through
/// [`label_color`]. Returns the written paths in slice order.
pub fn export_slices(
    vol: &AnyVolume,
    axis: SliceAxis,
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let dims = vol.dims();
    let (count, width, height) = slice_geometry(dims, axis);
    let axis_name = match axis {
        SliceAxis::X => "x",
        SliceAxis::Y => "y",
        SliceAxis::Z => "z",
    };

    let mut paths = Vec::with_capacity(count);
    for s in 0..count {
        let path = out_dir.join(format!("{stem}_{axis_name}{s:04}.png"));
        match vol {
            AnyVolume::Labels(v) => {
                let mut img = image::RgbImage::new(width as u32, height as u32);
                for vv in 0..height {
                    for uu in 0..width {
                        let (x, y, z) = slice_voxel(axis, s, uu, vv);
                        img.put_pixel(
                            uu as u32,
                            vv as u32,
                            image::Rgb(label_color(v.get(x, y, z))),
                        );
                    }
                }
                img.save(&path)
                    .map_err(|e| Error::format(format!("png write failed: {e}")))?;
            }
            _ => {
                let mut img = image::GrayImage::new(width as u32, height as u32);
                for vv in 0..height {
                    for uu in 0..width {
                        let (x, y, z) = slice_voxel(axis, s, uu, vv);
                        let value = match vol {
                            AnyVolume::Intensity(v) => v.get(x, y, z),
                            AnyVolume::Binary(v) => v.get(x, y, z) * 255,
                            AnyVolume::Probability(v) => {
                                (v.get(x, y, z).clamp(0.0, 1.0) * 255.0).round() as u8
                            }
                            AnyVolume::Labels(_) => unreachable!(),
                        };
                        img.put_pixel(uu as u32, vv as u32, image::Luma([value]));
                    }
                }
                img.save(&path)
                    .map_err(|e| Error::format(format!("png write failed: {e}")))?;
            }
        }
        paths.push(path);
    }
    Ok(paths)
}

/// SHA-256 of a file, hex-encoded. Used by run manifests so a rerun can be
/// checked for bit-identical outputs.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

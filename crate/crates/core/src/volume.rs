//! Dense 3D volumes and subvolume addressing.
//!
//! A volume is an `X × Y × Z` grid stored row-major with x fastest, then y,
//! then z: `index = x + X * (y + Y * z)`. Voxel coordinates in every API are
//! 0-based; [`SubvolumeRegion`] is the one deliberate exception — it carries
//! the 1-based inclusive slice bounds used in volume file headers and on the
//! command line, and is translated to 0-based offsets internally.

use crate::error::{Axis, Error, Result};

/// Voxel extents of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Dims {
    pub fn new(x: usize, y: usize, z: usize) -> Self {
        Dims { x, y, z }
    }

    /// Total voxel count `X·Y·Z`.
    pub fn len(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index of voxel `(x, y, z)`; x varies fastest.
    #[inline(always)]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.x && y < self.y && z < self.z);
        x + self.x * (y + self.y * z)
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.x;
        let rest = index / self.x;
        (x, rest % self.y, rest / self.y)
    }

    pub fn contains(&self, x: i64, y: i64, z: i64) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.x
            && (y as usize) < self.y
            && (z as usize) < self.z
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.x, self.y, self.z)
    }
}

/// Scalar kinds a volume file can hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    /// 8-bit intensity.
    U8,
    /// f64 probability in [0, 1].
    F64,
    /// Binary {0, 1}, stored one byte per voxel.
    U1,
    /// 32-bit instance label, 0 = background.
    U32,
}

impl Dtype {
    pub fn name(&self) -> &'static str {
        match self {
            Dtype::U8 => "u8",
            Dtype::F64 => "f64",
            Dtype::U1 => "u1",
            Dtype::U32 => "u32",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(Dtype::U8),
            "f64" => Ok(Dtype::F64),
            "u1" => Ok(Dtype::U1),
            "u32" => Ok(Dtype::U32),
            other => Err(Error::format(format!("unknown dtype `{other}`"))),
        }
    }

    pub fn bytes_per_voxel(&self) -> usize {
        match self {
            Dtype::U8 | Dtype::U1 => 1,
            Dtype::U32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Dense 3D scalar grid. Immutable after construction; cheap to share
/// across threads for concurrent reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: Dims,
    data: Vec<T>,
}

pub type BinaryVolume = Volume<u8>;
pub type IntensityVolume = Volume<u8>;
pub type ProbabilityVolume = Volume<f64>;
pub type LabelVolume = Volume<u32>;

impl<T: Copy> Volume<T> {
    /// Wraps raw data; fails unless `data.len() == dims.len()`.
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::format(format!(
                "data length {} does not match dims {} ({} voxels)",
                data.len(),
                dims,
                dims.len()
            )));
        }
        Ok(Volume { dims, data })
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        Volume {
            data: vec![value; dims.len()],
            dims,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn voxels_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline(always)]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.dims.index(x, y, z)]
    }

    #[inline(always)]
    pub(crate) fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.dims.index(x, y, z);
        self.data[i] = value;
    }

    /// Extracts the subvolume addressed by `region` (1-based inclusive bounds).
    /// Output voxel `(a, b, c)` equals parent voxel
    /// `(q_i - 1 + a, r_i - 1 + b, p_i - 1 + c)` in 0-based terms.
    pub fn crop(&self, region: &SubvolumeRegion) -> Result<Volume<T>> {
        region.check_within(self.dims)?;
        let ext = region.extents();
        let (ox, oy, oz) = region.origin();
        let mut data = Vec::with_capacity(ext.len());
        for c in 0..ext.z {
            for b in 0..ext.y {
                let row = self.dims.index(ox, oy + b, oz + c);
                data.extend_from_slice(&self.data[row..row + ext.x]);
            }
        }
        Volume::new(ext, data)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Inclusive 1-based bounds of a subvolume, one range per axis, mirroring
/// the `q_i:q_f, r_i:r_f, p_i:p_f` slice notation. A single focal plane
/// along z is the region with `p_i == p_f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubvolumeRegion {
    pub x: (usize, usize),
    pub y: (usize, usize),
    pub z: (usize, usize),
}

impl SubvolumeRegion {
    pub fn new(x: (usize, usize), y: (usize, usize), z: (usize, usize)) -> Result<Self> {
        for (axis, (lo, hi)) in [(Axis::X, x), (Axis::Y, y), (Axis::Z, z)] {
            if lo < 1 || lo > hi {
                return Err(Error::RangeError {
                    axis,
                    lo: lo as i64,
                    hi: hi as i64,
                    extent: 0,
                });
            }
        }
        Ok(SubvolumeRegion { x, y, z })
    }

    /// The full extent of a volume of the given dims.
    pub fn full(dims: Dims) -> Self {
        SubvolumeRegion {
            x: (1, dims.x),
            y: (1, dims.y),
            z: (1, dims.z),
        }
    }

    /// Parses `"193:320,193:320,31:94"` (1-based inclusive, x,y,z order).
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::format(format!(
                "region `{s}` must have three comma-separated ranges"
            )));
        }
        let mut ranges = [(0usize, 0usize); 3];
        for (i, part) in parts.iter().enumerate() {
            let (lo, hi) = part.split_once(':').ok_or_else(|| {
                Error::format(format!("range `{part}` must look like `lo:hi`"))
            })?;
            let lo: usize = lo
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("bad range bound `{lo}`")))?;
            let hi: usize = hi
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("bad range bound `{hi}`")))?;
            ranges[i] = (lo, hi);
        }
        SubvolumeRegion::new(ranges[0], ranges[1], ranges[2])
    }

    pub fn check_within(&self, dims: Dims) -> Result<()> {
        for (axis, (lo, hi), extent) in [
            (Axis::X, self.x, dims.x),
            (Axis::Y, self.y, dims.y),
            (Axis::Z, self.z, dims.z),
        ] {
            if lo < 1 || hi > extent {
                return Err(Error::RangeError {
                    axis,
                    lo: lo as i64,
                    hi: hi as i64,
                    extent,
                });
            }
        }
        Ok(())
    }

    /// Voxel counts along each axis.
    pub fn extents(&self) -> Dims {
        Dims::new(
            self.x.1 - self.x.0 + 1,
            self.y.1 - self.y.0 + 1,
            self.z.1 - self.z.0 + 1,
        )
    }

    /// 0-based coordinate of the region's first voxel in the parent.
    pub fn origin(&self) -> (usize, usize, usize) {
        (self.x.0 - 1, self.y.0 - 1, self.z.0 - 1)
    }

    /// Region addressing, in this region's parent, the voxels that `inner`
    /// addresses in the crop of this region: `crop(crop(v, self), inner) ==
    /// crop(v, self.compose(inner))`.
    pub fn compose(&self, inner: &SubvolumeRegion) -> SubvolumeRegion {
        SubvolumeRegion {
            x: (self.x.0 + inner.x.0 - 1, self.x.0 + inner.x.1 - 1),
            y: (self.y.0 + inner.y.0 - 1, self.y.0 + inner.y.1 - 1),
            z: (self.z.0 + inner.z.0 - 1, self.z.0 + inner.z.1 - 1),
        }
    }
}

impl std::fmt::Display for SubvolumeRegion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}:{},{}:{},{}:{}",
            self.x.0, self.x.1, self.y.0, self.y.1, self.z.0, self.z.1
        )
    }
}

/// Errors with the first mismatching axis unless `a == b`.
pub fn check_same_dims(a: Dims, b: Dims) -> Result<()> {
    for (axis, ea, eb) in [
        (Axis::X, a.x, b.x),
        (Axis::Y, a.y, b.y),
        (Axis::Z, a.z, b.z),
    ] {
        if ea != eb {
            return Err(Error::DimError {
                axis,
                expected: ea,
                actual: eb,
            });
        }
    }
    Ok(())
}

/// Rounds a real-valued centroid to a voxel, half-up per axis.
pub fn round_half_up(c: [f64; 3]) -> [i64; 3] {
    [
        (c[0] + 0.5).floor() as i64,
        (c[1] + 0.5).floor() as i64,
        (c[2] + 0.5).floor() as i64,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_volume(n: usize) -> Volume<u32> {
        let dims = Dims::new(n, n, n);
        let data: Vec<u32> = (0..dims.len() as u32).collect();
        Volume::new(dims, data).unwrap()
    }

    #[test]
    fn full_extent_crop_is_identity() {
        let vol = linear_volume(4);
        let cropped = vol.crop(&SubvolumeRegion::full(vol.dims())).unwrap();
        assert_eq!(vol, cropped);
    }

    #[test]
    fn paper_evaluation_region_extents() {
        let region = SubvolumeRegion::parse("193:320,193:320,31:94").unwrap();
        assert_eq!(region.extents(), Dims::new(128, 128, 64));
        region.check_within(Dims::new(512, 512, 512)).unwrap();
    }

    #[test]
    fn crop_matches_index_arithmetic() {
        // 4^3 volume holding its own linear index; region x in [2,3],
        // y in [1,1], z in [4,4] (1-based). Expected values computed from
        // index = x + 4*(y + 4*z) at 0-based (1..=2, 0, 3): 49, 50.
        let vol = linear_volume(4);
        let region = SubvolumeRegion::new((2, 3), (1, 1), (4, 4)).unwrap();
        let out = vol.crop(&region).unwrap();
        assert_eq!(out.dims(), Dims::new(2, 1, 1));
        assert_eq!(out.voxels(), &[49, 50]);
    }

    #[test]
    fn out_of_bounds_region_names_axis() {
        let vol = linear_volume(4);
        let region = SubvolumeRegion::new((1, 4), (2, 5), (1, 1)).unwrap();
        match vol.crop(&region) {
            Err(Error::RangeError { axis: Axis::Y, .. }) => {}
            other => panic!("expected y-axis range error, got {other:?}"),
        }
    }

    #[test]
    fn compose_matches_nested_crop() {
        let vol = linear_volume(5);
        let outer = SubvolumeRegion::new((2, 5), (1, 4), (2, 4)).unwrap();
        let inner = SubvolumeRegion::new((2, 3), (2, 4), (1, 2)).unwrap();
        let nested = vol.crop(&outer).unwrap().crop(&inner).unwrap();
        let composed = vol.crop(&outer.compose(&inner)).unwrap();
        assert_eq!(nested, composed);
    }

    #[test]
    fn region_rejects_inverted_bounds() {
        assert!(SubvolumeRegion::new((3, 2), (1, 1), (1, 1)).is_err());
        assert!(SubvolumeRegion::new((0, 2), (1, 1), (1, 1)).is_err());
    }

    #[test]
    fn round_half_up_per_axis() {
        assert_eq!(round_half_up([1.5, 2.49, 3.51]), [2, 2, 4]);
        assert_eq!(round_half_up([0.0, 0.5, 0.499]), [0, 1, 0]);
    }
}

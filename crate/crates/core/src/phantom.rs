//! Synthetic phantom generation with exactly known per-nucleus ground truth.
//!
//! Nuclei are spheres or rotated ellipsoids, rejection-sampled so accepted
//! nuclei never share a voxel. Each accepted nucleus also commits a central
//! region — a sphere of half its radius at its center — into the detection
//! ground truth; half-radius keeps central regions separated even when the
//! nuclei themselves touch. Appearance is a two-level image degraded by a
//! separable Gaussian point-spread blur plus additive noise; externally
//! generated synthetic volumes can be substituted at the manifest level.
//!
//! All randomness flows through seeded ChaCha8 streams (see
//! [`crate::seeds`]), so a given config reproduces bit-identically.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seeds::{self, Tag};
use crate::volio::{write_volume, AnyVolume};
use crate::volume::{BinaryVolume, Dims, IntensityVolume, LabelVolume, Volume};

/// Small slack on the canonical inequality so exact-boundary voxels survive
/// rotation round-off (90 degree rotations must reproduce swapped-axis masks).
const SURFACE_EPS: f64 = 1e-9;

/// Nucleus shape: a sphere of radius `r`, or an ellipsoid with semi-axes
/// `(a, b, c)` rotated by Euler angles applied in x-then-y-then-z order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    Ellipsoid { semi_axes: [f64; 3] },
}

/// One synthetic nucleus.
#[derive(Debug, Clone, PartialEq)]
pub struct NucleusSpec {
    /// Attempt index in generation order.
    pub index: usize,
    pub shape: Shape,
    /// Center voxel (0-based). This is the nucleus' ground-truth center.
    pub center: [i64; 3],
    /// Euler angles (rx, ry, rz) in radians; identity for spheres.
    pub rotation: [f64; 3],
}

impl NucleusSpec {
    /// Radius of the central region committed to the detection ground truth:
    /// half the radius for spheres, half the smallest semi-axis (floored)
    /// for ellipsoids so the guarantee holds in the worst orientation.
    pub fn central_radius(&self) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => radius / 2.0,
            Shape::Ellipsoid { semi_axes } => {
                (semi_axes[0].min(semi_axes[1]).min(semi_axes[2]) / 2.0).floor()
            }
        }
    }

    /// The central region as a sphere spec at the same center.
    pub fn central_region(&self) -> NucleusSpec {
        NucleusSpec {
            index: self.index,
            shape: Shape::Sphere {
                radius: self.central_radius(),
            },
            center: self.center,
            rotation: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeModel {
    Sphere,
    Ellipsoid,
}

impl ShapeModel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(ShapeModel::Sphere),
            "ellipsoid" => Ok(ShapeModel::Ellipsoid),
            other => Err(Error::config(format!(
                "shape_model must be sphere or ellipsoid, got `{other}`"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShapeModel::Sphere => "sphere",
            ShapeModel::Ellipsoid => "ellipsoid",
        }
    }
}

/// Appearance degradation standing in for adversarial appearance synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationParams {
    pub foreground_mean: u8,
    pub background_mean: u8,
    /// Gaussian blur sigma per axis, voxels.
    pub blur_sigma: [f64; 3],
    /// Additive Gaussian noise sigma, intensity units.
    pub noise_sigma: f64,
}

impl Default for DegradationParams {
    fn default() -> Self {
        DegradationParams {
            foreground_mean: 200,
            background_mean: 40,
            blur_sigma: [1.0, 1.0, 1.0],
            noise_sigma: 10.0,
        }
    }
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        if self.blur_sigma.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(Error::config("blur sigma must be finite and >= 0"));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::config("noise sigma must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Recipe for one phantom volume.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub dims: Dims,
    /// Attempted nucleus count; accepted count is usually lower.
    pub attempts: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub shape_model: ShapeModel,
    pub seed: u64,
    pub degradation: DegradationParams,
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_min >= 1.0) {
            return Err(Error::config(format!(
                "r_min must be >= 1, got {}",
                self.r_min
            )));
        }
        if self.r_min > self.r_max {
            return Err(Error::config(format!(
                "r_min ({}) must not exceed r_max ({})",
                self.r_min, self.r_max
            )));
        }
        let need = (2.0 * self.r_max).ceil() as usize;
        for (name, extent) in [("x", self.dims.x), ("y", self.dims.y), ("z", self.dims.z)] {
            if extent < need {
                return Err(Error::config(format!(
                    "dims.{name} ({extent}) must be at least 2*r_max ({need})"
                )));
            }
        }
        self.degradation.validate()
    }
}

/// Ground-truth triple plus the accepted nucleus list.
#[derive(Debug, Clone)]
pub struct Phantom {
    /// Binary union of all accepted nuclei.
    pub mask_gt: BinaryVolume,
    /// Binary union of all accepted central regions.
    pub det_gt: BinaryVolume,
    pub accepted: Vec<NucleusSpec>,
}

fn rotation_matrix(rx: f64, ry: f64, rz: f64) -> [[f64; 3]; 3] {
    let (sx, cx) = rx.sin_cos();
    let (sy, cy) = ry.sin_cos();
    let (sz, cz) = rz.sin_cos();
    // R = Rz * Ry * Rx (x applied first).
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

/// Applies the transpose (inverse) of `m` to `v`.
fn apply_transposed(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// Half-extent of the axis-aligned bounding box that surely contains the
/// rotated shape.
fn bounding_radius(shape: &Shape) -> f64 {
    match shape {
        Shape::Sphere { radius } => *radius,
        Shape::Ellipsoid { semi_axes } => semi_axes[0].max(semi_axes[1]).max(semi_axes[2]),
    }
}

/// Linear indices of the voxels inside the nucleus, clipped to `dims`.
/// A voxel belongs to the nucleus iff its center, mapped by the inverse
/// rotation about the nucleus center, satisfies the canonical inequality
/// (squared normalized coordinates <= 1).
fn voxelize_indices(spec: &NucleusSpec, dims: Dims) -> Vec<usize> {
    let r = bounding_radius(&spec.shape);
    let rot = rotation_matrix(spec.rotation[0], spec.rotation[1], spec.rotation[2]);
    let lo = |c: i64| (c - r.ceil() as i64).max(0);
    let hi = |c: i64, extent: usize| (c + r.ceil() as i64).min(extent as i64 - 1);
    let (x0, x1) = (lo(spec.center[0]), hi(spec.center[0], dims.x));
    let (y0, y1) = (lo(spec.center[1]), hi(spec.center[1], dims.y));
    let (z0, z1) = (lo(spec.center[2]), hi(spec.center[2], dims.z));

    let mut out = Vec::new();
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                let offset = [
                    (x - spec.center[0]) as f64,
                    (y - spec.center[1]) as f64,
                    (z - spec.center[2]) as f64,
                ];
                let local = apply_transposed(&rot, offset);
                let inside = match spec.shape {
                    Shape::Sphere { radius } => {
                        let d2 = local[0] * local[0] + local[1] * local[1] + local[2] * local[2];
                        if radius == 0.0 {
                            d2 == 0.0
                        } else {
                            d2 / (radius * radius) <= 1.0 + SURFACE_EPS
                        }
                    }
                    Shape::Ellipsoid { semi_axes: [a, b, c] } => {
                        let n = (local[0] / a) * (local[0] / a)
                            + (local[1] / b) * (local[1] / b)
                            + (local[2] / c) * (local[2] / c);
                        n <= 1.0 + SURFACE_EPS
                    }
                };
                if inside {
                    out.push(dims.index(x as usize, y as usize, z as usize));
                }
            }
        }
    }
    out
}

/// Rasterizes one nucleus into a binary volume; shapes extending past the
/// boundary are clipped.
pub fn voxelize(spec: &NucleusSpec, dims: Dims) -> BinaryVolume {
    let mut vol = Volume::filled(dims, 0u8);
    for idx in voxelize_indices(spec, dims) {
        vol.voxels_mut()[idx] = 1;
    }
    vol
}

/// Generates one phantom: sequential rejection sampling from a ChaCha8
/// stream seeded by `cfg.seed`. Attempt `i` samples shape parameters, then
/// rotation (ellipsoids only), then the center (uniform over voxels at
/// least one voxel from every face); the nucleus and its central region
/// commit only when the nucleus shares no voxel with previously accepted
/// nuclei.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<Phantom> {
    cfg.validate()?;
    let dims = cfg.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask_gt: BinaryVolume = Volume::filled(dims, 0u8);
    let mut det_gt: BinaryVolume = Volume::filled(dims, 0u8);
    let mut accepted = Vec::new();

    for index in 0..cfg.attempts {
        let shape = match cfg.shape_model {
            ShapeModel::Sphere => Shape::Sphere {
                radius: rng.random_range(cfg.r_min..=cfg.r_max),
            },
            ShapeModel::Ellipsoid => Shape::Ellipsoid {
                semi_axes: [
                    rng.random_range(cfg.r_min..=cfg.r_max),
                    rng.random_range(cfg.r_min..=cfg.r_max),
                    rng.random_range(cfg.r_min..=cfg.r_max),
                ],
            },
        };
        let rotation = match cfg.shape_model {
            ShapeModel::Sphere => [0.0; 3],
            ShapeModel::Ellipsoid => [
                rng.random_range(0.0..std::f64::consts::PI),
                rng.random_range(0.0..std::f64::consts::PI),
                rng.random_range(0.0..std::f64::consts::PI),
            ],
        };
        let center = [
            rng.random_range(1..=dims.x as i64 - 2),
            rng.random_range(1..=dims.y as i64 - 2),
            rng.random_range(1..=dims.z as i64 - 2),
        ];
        let spec = NucleusSpec {
            index,
            shape,
            center,
            rotation,
        };

        let nucleus = voxelize_indices(&spec, dims);
        if nucleus.iter().any(|&i| mask_gt.voxels()[i] != 0) {
            continue;
        }
        for &i in &nucleus {
            mask_gt.voxels_mut()[i] = 1;
        }
        for i in voxelize_indices(&spec.central_region(), dims) {
            det_gt.voxels_mut()[i] = 1;
        }
        accepted.push(spec);
    }

    Ok(Phantom {
        mask_gt,
        det_gt,
        accepted,
    })
}

/// Label volume giving each accepted nucleus its own id (1-based, in
/// acceptance order). Exact per-nucleus ground truth for evaluation and
/// patch-training targets.
pub fn instance_labels(accepted: &[NucleusSpec], dims: Dims) -> LabelVolume {
    let mut labels = Volume::filled(dims, 0u32);
    for (i, spec) in accepted.iter().enumerate() {
        for idx in voxelize_indices(spec, dims) {
            labels.voxels_mut()[idx] = i as u32 + 1;
        }
    }
    labels
}

/// Truncated (3 sigma), renormalized 1D Gaussian kernel. Empty for sigma 0.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    weights
}

/// One separable blur pass along `axis`; border taps renormalize over the
/// in-bounds support so constant regions stay exactly constant.
fn blur_axis(data: &mut Vec<f64>, dims: Dims, axis: usize, kernel: &[f64]) {
    if kernel.len() == 1 {
        return;
    }
    let radius = (kernel.len() / 2) as i64;
    let extent = [dims.x, dims.y, dims.z][axis] as i64;
    let stride = match axis {
        0 => 1,
        1 => dims.x,
        _ => dims.x * dims.y,
    } as i64;

    let mut out = vec![0.0; data.len()];
    let mut line = Vec::with_capacity(extent as usize);
    // Iterate over all lines along `axis`.
    let (outer1, outer2) = match axis {
        0 => (dims.y, dims.z),
        1 => (dims.x, dims.z),
        _ => (dims.x, dims.y),
    };
    for o2 in 0..outer2 {
        for o1 in 0..outer1 {
            let base = match axis {
                0 => dims.index(0, o1, o2),
                1 => dims.index(o1, 0, o2),
                _ => dims.index(o1, o2, 0),
            } as i64;
            line.clear();
            for p in 0..extent {
                line.push(data[(base + p * stride) as usize]);
            }
            for p in 0..extent {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let q = p + k as i64 - radius;
                    if q >= 0 && q < extent {
                        acc += w * line[q as usize];
                        wsum += w;
                    }
                }
                out[(base + p * stride) as usize] = acc / wsum;
            }
        }
    }
    *data = out;
}

/// Renders the appearance volume: two-level means, separable Gaussian blur,
/// additive Gaussian noise, clamped to [0, 255].
pub fn synthesize_appearance(
    mask_gt: &BinaryVolume,
    params: &DegradationParams,
    seed: u64,
) -> IntensityVolume {
    let dims = mask_gt.dims();
    let fg = params.foreground_mean as f64;
    let bg = params.background_mean as f64;
    let mut field: Vec<f64> = mask_gt
        .voxels()
        .iter()
        .map(|&m| if m != 0 { fg } else { bg })
        .collect();

    for axis in 0..3 {
        let kernel = gaussian_kernel(params.blur_sigma[axis]);
        blur_axis(&mut field, dims, axis, &kernel);
    }

    if params.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut field {
            let n: f64 = rng.sample(StandardNormal);
            *v += params.noise_sigma * n;
        }
    }

    let data: Vec<u8> = field
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    Volume::new(dims, data).expect("same length as mask")
}

/// Paths of one generated phantom on disk.
#[derive(Debug, Clone)]
pub struct PhantomPaths {
    pub syn: PathBuf,
    pub mask_gt: PathBuf,
    pub det_gt: PathBuf,
    pub inst_gt: PathBuf,
    pub specs: PathBuf,
}

/// Result of [`make_training_set`].
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub full: Vec<PhantomPaths>,
    /// (syn, mask_gt, det_gt) triples of the split training subvolumes.
    pub tiles: Vec<[PathBuf; 3]>,
    pub manifest: PathBuf,
    pub manifest_full: PathBuf,
    pub accepted_counts: Vec<usize>,
}

/// Derives the sidecar paths for a phantom stem like `full/phantom_003`.
fn phantom_paths(dir: &Path, index: usize) -> PhantomPaths {
    let stem = format!("phantom_{index:03}");
    PhantomPaths {
        syn: dir.join(format!("{stem}.syn.vol")),
        mask_gt: dir.join(format!("{stem}.mask.vol")),
        det_gt: dir.join(format!("{stem}.det.vol")),
        inst_gt: dir.join(format!("{stem}.inst.vol")),
        specs: dir.join(format!("{stem}.specs.tsv")),
    }
}

/// Derives the companion ground-truth paths from a manifest `syn` path
/// (`X.syn.vol` -> `X.inst.vol`, `X.specs.tsv`).
pub fn companion_paths(syn: &Path) -> Result<(PathBuf, PathBuf)> {
    let name = syn
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::format(format!("bad syn path {}", syn.display())))?;
    let stem = name.strip_suffix(".syn.vol").ok_or_else(|| {
        Error::format(format!("syn path `{name}` must end with .syn.vol"))
    })?;
    let dir = syn.parent().unwrap_or_else(|| Path::new(""));
    Ok((
        dir.join(format!("{stem}.inst.vol")),
        dir.join(format!("{stem}.specs.tsv")),
    ))
}

pub fn write_specs(specs: &[NucleusSpec], path: &Path) -> Result<()> {
    let mut out = String::from("index\tshape\tcx\tcy\tcz\tp0\tp1\tp2\trx\try\trz\n");
    for s in specs {
        let (shape, p) = match s.shape {
            Shape::Sphere { radius } => ("sphere", [radius, 0.0, 0.0]),
            Shape::Ellipsoid { semi_axes } => ("ellipsoid", semi_axes),
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\n",
            s.index,
            shape,
            s.center[0],
            s.center[1],
            s.center[2],
            p[0],
            p[1],
            p[2],
            s.rotation[0],
            s.rotation[1],
            s.rotation[2],
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_specs(path: &Path) -> Result<Vec<NucleusSpec>> {
    let text = fs::read_to_string(path)?;
    let mut specs = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 11 {
            return Err(Error::format(format!(
                "specs line {} has {} fields, expected 11",
                lineno + 1,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::format(format!("bad number `{s}` in specs file")))
        };
        let int = |s: &str| -> Result<i64> {
            s.parse()
                .map_err(|_| Error::format(format!("bad integer `{s}` in specs file")))
        };
        let shape = match fields[1] {
            "sphere" => Shape::Sphere {
                radius: num(fields[5])?,
            },
            "ellipsoid" => Shape::Ellipsoid {
                semi_axes: [num(fields[5])?, num(fields[6])?, num(fields[7])?],
            },
            other => return Err(Error::format(format!("unknown shape `{other}`"))),
        };
        specs.push(NucleusSpec {
            index: int(fields[0])? as usize,
            shape,
            center: [int(fields[2])?, int(fields[3])?, int(fields[4])?],
            rotation: [num(fields[8])?, num(fields[9])?, num(fields[10])?],
        });
    }
    Ok(specs)
}

/// Generates `count` phantoms plus, when `split_to` is set, the disjoint
/// covering tiles each full volume splits into (a 128-cube at 64 yields 8
/// octants). Writes a tab-separated manifest of (syn, mask_gt, det_gt)
/// triples for the tiles and another for the full volumes.
pub fn make_training_set(
    cfg: &PhantomConfig,
    out_dir: &Path,
    count: usize,
    split_to: Option<usize>,
) -> Result<TrainingSet> {
    cfg.validate()?;
    if let Some(s) = split_to {
        if s == 0 || cfg.dims.x % s != 0 || cfg.dims.y % s != 0 || cfg.dims.z % s != 0 {
            return Err(Error::config(format!(
                "split_to {s} must evenly divide dims {}",
                cfg.dims
            )));
        }
    }
    let full_dir = out_dir.join("full");
    let tile_dir = out_dir.join("train");
    fs::create_dir_all(&full_dir)?;
    if split_to.is_some() {
        fs::create_dir_all(&tile_dir)?;
    }

    let mut full = Vec::new();
    let mut tiles = Vec::new();
    let mut accepted_counts = Vec::new();
    let mut manifest_rows = String::new();
    let mut manifest_full_rows = String::new();

    for i in 0..count {
        let geometry_seed = seeds::derive(cfg.seed, Tag::PhantomGeometry, i as u64);
        let appearance_seed = seeds::derive(cfg.seed, Tag::PhantomAppearance, i as u64);
        let phantom = generate_phantom(&PhantomConfig {
            seed: geometry_seed,
            ..cfg.clone()
        })?;
        let syn = synthesize_appearance(&phantom.mask_gt, &cfg.degradation, appearance_seed);
        let inst = instance_labels(&phantom.accepted, cfg.dims);

        let paths = phantom_paths(&full_dir, i);
        write_volume(&AnyVolume::Intensity(syn.clone()), &paths.syn)?;
        write_volume(&AnyVolume::Binary(phantom.mask_gt.clone()), &paths.mask_gt)?;
        write_volume(&AnyVolume::Binary(phantom.det_gt.clone()), &paths.det_gt)?;
        write_volume(&AnyVolume::Labels(inst), &paths.inst_gt)?;
        write_specs(&phantom.accepted, &paths.specs)?;
        manifest_full_rows.push_str(&format!(
            "{}\t{}\t{}\n",
            paths.syn.display(),
            paths.mask_gt.display(),
            paths.det_gt.display()
        ));

        if let Some(s) = split_to {
            let (nx, ny, nz) = (cfg.dims.x / s, cfg.dims.y / s, cfg.dims.z / s);
            let mut tile_index = 0;
            for tz in 0..nz {
                for ty in 0..ny {
                    for tx in 0..nx {
                        let region = crate::volume::SubvolumeRegion::new(
                            (tx * s + 1, (tx + 1) * s),
                            (ty * s + 1, (ty + 1) * s),
                            (tz * s + 1, (tz + 1) * s),
                        )?;
                        let stem = format!("phantom_{i:03}_t{tile_index:02}");
                        let tsyn = tile_dir.join(format!("{stem}.syn.vol"));
                        let tmask = tile_dir.join(format!("{stem}.mask.vol"));
                        let tdet = tile_dir.join(format!("{stem}.det.vol"));
                        write_volume(&AnyVolume::Intensity(syn.crop(&region)?), &tsyn)?;
                        write_volume(
                            &AnyVolume::Binary(phantom.mask_gt.crop(&region)?),
                            &tmask,
                        )?;
                        write_volume(&AnyVolume::Binary(phantom.det_gt.crop(&region)?), &tdet)?;
                        manifest_rows.push_str(&format!(
                            "{}\t{}\t{}\n",
                            tsyn.display(),
                            tmask.display(),
                            tdet.display()
                        ));
                        tiles.push([tsyn, tmask, tdet]);
                        tile_index += 1;
                    }
                }
            }
        }

        accepted_counts.push(phantom.accepted.len());
        full.push(paths);
    }

    let manifest = out_dir.join("manifest.tsv");
    let manifest_full = out_dir.join("manifest_full.tsv");
    let mut f = fs::File::create(&manifest)?;
    f.write_all(manifest_rows.as_bytes())?;
    let mut f = fs::File::create(&manifest_full)?;
    f.write_all(manifest_full_rows.as_bytes())?;

    Ok(TrainingSet {
        full,
        tiles,
        manifest,
        manifest_full,
        accepted_counts,
    })
}

/// Reads a manifest of tab-separated (syn, mask_gt, det_gt) path triples.
pub fn read_manifest(path: &Path) -> Result<Vec<[PathBuf; 3]>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(format!(
                "manifest line {} has {} fields, expected 3 (syn, mask_gt, det_gt)",
                lineno + 1,
                fields.len()
            )));
        }
        rows.push([
            PathBuf::from(fields[0]),
            PathBuf::from(fields[1]),
            PathBuf::from(fields[2]),
        ]);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::{connected_components, Connectivity};

    fn sphere_at(center: [i64; 3], radius: f64) -> NucleusSpec {
        NucleusSpec {
            index: 0,
            shape: Shape::Sphere { radius },
            center,
            rotation: [0.0; 3],
        }
    }

    /// Independent oracle: exhaustive voxel-center test without any rotation
    /// machinery (axis-aligned shapes only).
    fn enumerate_axis_aligned(dims: Dims, center: [i64; 3], semi: [f64; 3]) -> Vec<usize> {
        let mut out = Vec::new();
        for z in 0..dims.z {
            for y in 0..dims.y {
                for x in 0..dims.x {
                    let dx = (x as i64 - center[0]) as f64 / semi[0];
                    let dy = (y as i64 - center[1]) as f64 / semi[1];
                    let dz = (z as i64 - center[2]) as f64 / semi[2];
                    if dx * dx + dy * dy + dz * dz <= 1.0 + 1e-9 {
                        out.push(dims.index(x, y, z));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn unit_sphere_is_center_plus_axis_neighbors() {
        let dims = Dims::new(7, 7, 7);
        let vol = voxelize(&sphere_at([3, 3, 3], 1.0), dims);
        let fg: Vec<usize> = (0..dims.len()).filter(|&i| vol.voxels()[i] != 0).collect();
        assert_eq!(fg.len(), 7);
        let expected = enumerate_axis_aligned(dims, [3, 3, 3], [1.0, 1.0, 1.0]);
        assert_eq!(fg, expected);
    }

    #[test]
    fn ball_shaped_ellipsoid_equals_sphere() {
        let dims = Dims::new(16, 16, 16);
        let sphere = voxelize(&sphere_at([8, 8, 8], 4.2), dims);
        let ellipsoid = voxelize(
            &NucleusSpec {
                index: 0,
                shape: Shape::Ellipsoid {
                    semi_axes: [4.2, 4.2, 4.2],
                },
                center: [8, 8, 8],
                rotation: [0.9, 0.4, 2.2],
            },
            dims,
        );
        assert_eq!(sphere, ellipsoid);
    }

    #[test]
    fn quarter_turn_about_x_swaps_axes() {
        let dims = Dims::new(24, 24, 24);
        let rotated = voxelize(
            &NucleusSpec {
                index: 0,
                shape: Shape::Ellipsoid {
                    semi_axes: [4.0, 4.0, 9.0],
                },
                center: [12, 12, 12],
                rotation: [std::f64::consts::FRAC_PI_2, 0.0, 0.0],
            },
            dims,
        );
        let swapped: Vec<usize> = enumerate_axis_aligned(dims, [12, 12, 12], [4.0, 9.0, 4.0]);
        let fg: Vec<usize> = (0..dims.len())
            .filter(|&i| rotated.voxels()[i] != 0)
            .collect();
        assert_eq!(fg, swapped);
    }

    #[test]
    fn clipping_at_boundary() {
        let dims = Dims::new(8, 8, 8);
        let vol = voxelize(&sphere_at([1, 4, 4], 3.0), dims);
        // Oracle counts only in-bounds voxels.
        let expected = enumerate_axis_aligned(dims, [1, 4, 4], [3.0, 3.0, 3.0]);
        let fg: Vec<usize> = (0..dims.len()).filter(|&i| vol.voxels()[i] != 0).collect();
        assert_eq!(fg, expected);
    }

    fn small_config(seed: u64) -> PhantomConfig {
        PhantomConfig {
            dims: Dims::new(48, 48, 48),
            attempts: 60,
            r_min: 3.0,
            r_max: 5.0,
            shape_model: ShapeModel::Sphere,
            seed,
            degradation: DegradationParams::default(),
        }
    }

    #[test]
    fn zero_attempts_yield_empty_phantom() {
        let cfg = PhantomConfig {
            attempts: 0,
            ..small_config(1)
        };
        let p = generate_phantom(&cfg).unwrap();
        assert!(p.accepted.is_empty());
        assert!(p.mask_gt.voxels().iter().all(|&v| v == 0));
        assert!(p.det_gt.voxels().iter().all(|&v| v == 0));
    }

    #[test]
    fn same_seed_reproduces_bit_identically() {
        let a = generate_phantom(&small_config(7)).unwrap();
        let b = generate_phantom(&small_config(7)).unwrap();
        assert_eq!(a.mask_gt, b.mask_gt);
        assert_eq!(a.det_gt, b.det_gt);
        assert_eq!(a.accepted, b.accepted);

        let c = generate_phantom(&small_config(8)).unwrap();
        assert_ne!(a.accepted, c.accepted);
    }

    #[test]
    fn central_regions_stay_disjoint_and_inside_nuclei() {
        let p = generate_phantom(&small_config(11)).unwrap();
        assert!(!p.accepted.is_empty());
        let (_, table) = connected_components(&p.det_gt, Connectivity::TwentySix);
        assert_eq!(table.len(), p.accepted.len());
        assert!(crate::components::is_subset(&p.det_gt, &p.mask_gt).unwrap());
    }

    #[test]
    fn accepted_nuclei_never_share_voxels() {
        let p = generate_phantom(&small_config(13)).unwrap();
        let mut occupancy = vec![0u32; p.mask_gt.dims().len()];
        for spec in &p.accepted {
            for idx in voxelize_indices(spec, p.mask_gt.dims()) {
                occupancy[idx] += 1;
            }
        }
        assert!(occupancy.iter().all(|&c| c <= 1));
        // The union of per-nucleus masks is exactly mask_gt.
        let union: Vec<u8> = occupancy.iter().map(|&c| u8::from(c > 0)).collect();
        assert_eq!(union.as_slice(), p.mask_gt.voxels());
    }

    #[test]
    fn two_level_appearance_without_degradation() {
        let p = generate_phantom(&small_config(17)).unwrap();
        let params = DegradationParams {
            foreground_mean: 200,
            background_mean: 40,
            blur_sigma: [0.0; 3],
            noise_sigma: 0.0,
        };
        let syn = synthesize_appearance(&p.mask_gt, &params, 0);
        for (s, m) in syn.voxels().iter().zip(p.mask_gt.voxels()) {
            assert_eq!(*s, if *m != 0 { 200 } else { 40 });
        }
    }

    #[test]
    fn constant_input_is_blur_invariant() {
        let dims = Dims::new(9, 9, 9);
        let all_fg = Volume::filled(dims, 1u8);
        let params = DegradationParams {
            foreground_mean: 173,
            background_mean: 10,
            blur_sigma: [2.0, 1.0, 0.7],
            noise_sigma: 0.0,
        };
        let syn = synthesize_appearance(&all_fg, &params, 0);
        assert!(syn.voxels().iter().all(|&v| v == 173));
    }

    #[test]
    fn impulse_blur_matches_direct_convolution_oracle() {
        let dims = Dims::new(15, 15, 15);
        let mut mask = Volume::filled(dims, 0u8);
        mask.set(7, 7, 7, 1);
        // Direct truncated-Gaussian convolution at the center voxel.
        let k = gaussian_kernel(1.0);
        let r = (k.len() / 2) as i64;
        let mut expected = 0.0;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let value = if dx == 0 && dy == 0 && dz == 0 { 255.0 } else { 0.0 };
                    expected += value
                        * k[(dx + r) as usize]
                        * k[(dy + r) as usize]
                        * k[(dz + r) as usize];
                }
            }
        }
        // Reproduce the f64 field before rounding.
        let fg = 255.0;
        let mut field: Vec<f64> = mask
            .voxels()
            .iter()
            .map(|&m| if m != 0 { fg } else { 0.0 })
            .collect();
        for axis in 0..3 {
            blur_axis(&mut field, dims, axis, &k);
        }
        let center = field[dims.index(7, 7, 7)];
        assert!(
            (center - expected).abs() < 1e-9,
            "separable {center} vs direct {expected}"
        );
    }

    #[test]
    fn octants_tile_the_parent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            dims: Dims::new(32, 32, 32),
            attempts: 20,
            r_min: 2.0,
            r_max: 4.0,
            shape_model: ShapeModel::Sphere,
            seed: 5,
            degradation: DegradationParams::default(),
        };
        let set = make_training_set(&cfg, dir.path(), 1, Some(16)).unwrap();
        assert_eq!(set.tiles.len(), 8);
        assert_eq!(set.full.len(), 1);

        // Reassemble the parent mask from the octants.
        let parent = crate::volio::read_volume(&set.full[0].mask_gt)
            .unwrap()
            .into_binary()
            .unwrap();
        let mut rebuilt = Volume::filled(cfg.dims, 0u8);
        for (t, tile) in set.tiles.iter().enumerate() {
            let sub = crate::volio::read_volume(&tile[1]).unwrap().into_binary().unwrap();
            let (tx, ty, tz) = (t % 2, (t / 2) % 2, t / 4);
            for z in 0..16 {
                for y in 0..16 {
                    for x in 0..16 {
                        rebuilt.set(tx * 16 + x, ty * 16 + y, tz * 16 + z, sub.get(x, y, z));
                    }
                }
            }
        }
        assert_eq!(rebuilt, parent);

        // First octant equals crop with region [1,16]^3.
        let first = crate::volio::read_volume(&set.tiles[0][1]).unwrap().into_binary().unwrap();
        let region = crate::volume::SubvolumeRegion::new((1, 16), (1, 16), (1, 16)).unwrap();
        assert_eq!(first, parent.crop(&region).unwrap());
    }

    #[test]
    fn specs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.tsv");
        let specs = vec![
            sphere_at([3, 4, 5], 2.25),
            NucleusSpec {
                index: 9,
                shape: Shape::Ellipsoid {
                    semi_axes: [2.0, 3.5, 2.75],
                },
                center: [10, 11, 12],
                rotation: [0.1, 1.2, 2.3],
            },
        ];
        write_specs(&specs, &path).unwrap();
        assert_eq!(read_specs(&path).unwrap(), specs);
    }
}

//! Connected-component labeling and component statistics.
//!
//! Labeling is two-pass union-find over the raster scan order, so output
//! labels are dense from 1 and assigned in order of each component's first
//! voxel. The test suite checks the partition against an independent BFS
//! flood-fill oracle.

use crate::error::Result;
use crate::volume::{BinaryVolume, LabelVolume, Volume};

/// Voxel adjacency used for component analysis. Defaults to 26 so nucleus
/// fragments touching only at a corner still unify.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    /// Face neighbors only.
    Six,
    /// Face, edge and corner neighbors.
    #[default]
    TwentySix,
}

impl Connectivity {
    /// All neighbor offsets.
    pub fn offsets(&self) -> &'static [(i64, i64, i64)] {
        const SIX: [(i64, i64, i64); 6] = [
            (-1, 0, 0),
            (1, 0, 0),
            (0, -1, 0),
            (0, 1, 0),
            (0, 0, -1),
            (0, 0, 1),
        ];
        const TWENTY_SIX: [(i64, i64, i64); 26] = {
            let mut out = [(0i64, 0i64, 0i64); 26];
            let mut i = 0;
            let mut dz = -1i64;
            while dz <= 1 {
                let mut dy = -1i64;
                while dy <= 1 {
                    let mut dx = -1i64;
                    while dx <= 1 {
                        if dx != 0 || dy != 0 || dz != 0 {
                            out[i] = (dx, dy, dz);
                            i += 1;
                        }
                        dx += 1;
                    }
                    dy += 1;
                }
                dz += 1;
            }
            out
        };
        match self {
            Connectivity::Six => &SIX,
            Connectivity::TwentySix => &TWENTY_SIX,
        }
    }

    /// Offsets strictly before the current voxel in raster order
    /// (z, then y, then x), used by the forward labeling pass.
    fn backward_offsets(&self) -> Vec<(i64, i64, i64)> {
        self.offsets()
            .iter()
            .copied()
            .filter(|&(dx, dy, dz)| (dz, dy, dx) < (0, 0, 0))
            .collect()
    }
}

/// Inclusive voxel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

/// Statistics for one labeled component.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub label: u32,
    pub voxel_count: usize,
    /// Mean voxel coordinate, exact up to one final division per axis.
    pub centroid: [f64; 3],
    pub bbox: BoundingBox,
}

/// Per-component rows sorted by label; labels are dense `1..=K`.
#[derive(Debug, Clone, Default)]
pub struct ComponentTable {
    components: Vec<Component>,
}

impl ComponentTable {
    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn get(&self, label: u32) -> Option<&Component> {
        if label == 0 {
            return None;
        }
        self.components.get(label as usize - 1)
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new() -> Self {
        UnionFind { parent: Vec::new() }
    }

    fn make_set(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        while self.parent[x as usize] != root {
            let next = self.parent[x as usize];
            self.parent[x as usize] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: u32, b: u32) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            // Root at the smaller id so first-voxel ordering survives.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Labels the foreground (non-zero voxels) of a binary volume under the
/// chosen adjacency. Returns the label volume and the component table.
pub fn connected_components(
    vol: &BinaryVolume,
    connectivity: Connectivity,
) -> (LabelVolume, ComponentTable) {
    let dims = vol.dims();
    let mut provisional = vec![0u32; dims.len()]; // provisional label + 1
    let mut uf = UnionFind::new();
    let backward = connectivity.backward_offsets();

    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                let idx = dims.index(x, y, z);
                if vol.voxels()[idx] == 0 {
                    continue;
                }
                let mut assigned: Option<u32> = None;
                for &(dx, dy, dz) in &backward {
                    let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if !dims.contains(nx, ny, nz) {
                        continue;
                    }
                    let nidx = dims.index(nx as usize, ny as usize, nz as usize);
                    let neighbor = provisional[nidx];
                    if neighbor == 0 {
                        continue;
                    }
                    match assigned {
                        None => assigned = Some(neighbor),
                        Some(current) => uf.union(current - 1, neighbor - 1),
                    }
                }
                provisional[idx] = match assigned {
                    Some(p) => p,
                    None => uf.make_set() + 1,
                };
            }
        }
    }

    // Map union-find roots to dense labels in order of first appearance.
    let n_provisional = uf.parent.len();
    let mut root_to_label = vec![0u32; n_provisional];
    let mut labels = Volume::filled(dims, 0u32);
    let mut stats: Vec<(usize, [u64; 3], BoundingBox)> = Vec::new();

    for idx in 0..dims.len() {
        let p = provisional[idx];
        if p == 0 {
            continue;
        }
        let root = uf.find(p - 1) as usize;
        let label = if root_to_label[root] == 0 {
            let next = stats.len() as u32 + 1;
            root_to_label[root] = next;
            let (x, y, z) = dims.coords(idx);
            stats.push((
                0,
                [0, 0, 0],
                BoundingBox {
                    min: [x, y, z],
                    max: [x, y, z],
                },
            ));
            next
        } else {
            root_to_label[root]
        };
        labels.voxels_mut()[idx] = label;
        let (x, y, z) = dims.coords(idx);
        let entry = &mut stats[label as usize - 1];
        entry.0 += 1;
        entry.1[0] += x as u64;
        entry.1[1] += y as u64;
        entry.1[2] += z as u64;
        let bbox = &mut entry.2;
        bbox.min = [bbox.min[0].min(x), bbox.min[1].min(y), bbox.min[2].min(z)];
        bbox.max = [bbox.max[0].max(x), bbox.max[1].max(y), bbox.max[2].max(z)];
    }

    let components = stats
        .into_iter()
        .enumerate()
        .map(|(i, (count, sums, bbox))| Component {
            label: i as u32 + 1,
            voxel_count: count,
            centroid: [
                sums[0] as f64 / count as f64,
                sums[1] as f64 / count as f64,
                sums[2] as f64 / count as f64,
            ],
            bbox,
        })
        .collect();

    (labels, ComponentTable { components })
}

/// Removes connected components smaller than `min_voxels` from a binary
/// volume; removed voxels become background. Idempotent.
pub fn remove_small_components(
    vol: &BinaryVolume,
    min_voxels: usize,
    connectivity: Connectivity,
) -> BinaryVolume {
    if min_voxels == 0 {
        return vol.clone();
    }
    let (labels, table) = connected_components(vol, connectivity);
    let keep: Vec<bool> = table
        .components()
        .iter()
        .map(|c| c.voxel_count >= min_voxels)
        .collect();
    let mut out = vol.clone();
    for (o, &l) in out.voxels_mut().iter_mut().zip(labels.voxels()) {
        if l != 0 && !keep[l as usize - 1] {
            *o = 0;
        }
    }
    out
}

/// Label-volume variant of [`remove_small_components`]: labels with fewer
/// than `min_voxels` voxels are cleared to background. Surviving labels
/// keep their ids.
pub fn remove_small_labels(vol: &LabelVolume, min_voxels: usize) -> LabelVolume {
    if min_voxels == 0 {
        return vol.clone();
    }
    let counts = label_counts(vol);
    let mut out = vol.clone();
    for v in out.voxels_mut() {
        if *v != 0 && counts[v] < min_voxels {
            *v = 0;
        }
    }
    out
}

/// Voxel count per non-background label.
pub fn label_counts(vol: &LabelVolume) -> std::collections::HashMap<u32, usize> {
    let mut counts = std::collections::HashMap::new();
    for &v in vol.voxels() {
        if v != 0 {
            *counts.entry(v).or_insert(0) += 1;
        }
    }
    counts
}

/// Converts a label volume to a binary foreground mask.
pub fn labels_to_binary(vol: &LabelVolume) -> BinaryVolume {
    vol.map(|v| u8::from(v != 0))
}

/// Checks that every non-zero voxel of `inner` is non-zero in `outer`.
pub fn is_subset(inner: &BinaryVolume, outer: &BinaryVolume) -> Result<bool> {
    crate::volume::check_same_dims(inner.dims(), outer.dims())?;
    Ok(inner
        .voxels()
        .iter()
        .zip(outer.voxels())
        .all(|(&i, &o)| i == 0 || o != 0))
}

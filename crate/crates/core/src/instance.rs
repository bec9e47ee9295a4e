//! Second-stage network: per-nucleus instance segmentation.
//!
//! For each detected center, a patch of the binary mask volume is cut out
//! and a stack of dilated convolutions — receptive field wider than the
//! patch — keeps the center nucleus and erases neighbors partially included
//! in the patch. Predictions are binarized, reduced to the connected
//! component containing the patch center, and pasted back into the label
//! volume under a first-writer-wins policy (conflicts are counted).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::components::{connected_components, Connectivity};
use crate::detect::DetectionResult;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_checkpoint, meta_value, save_checkpoint};
use crate::nn::{
    check_compatible, Adam, Conv3d, ConvBnRelu, ConvSpec, ParamSet, Session, Shape, Tensor,
};
use crate::seeds::{self, Tag};
use crate::volume::{round_half_up, BinaryVolume, Dims, LabelVolume, Volume};

/// Instance network hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNetConfig {
    /// Patch edge length P.
    pub patch: usize,
    /// Dilation factor of each 3-kernel conv layer; the receptive field
    /// `1 + 2*sum` must exceed the patch.
    pub dilations: Vec<usize>,
    /// Channel width of the hidden layers.
    pub width: usize,
    pub learning_rate: f64,
    /// Number of training patches drawn from the ground truth.
    pub patches: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl InstanceNetConfig {
    /// The published layer recipes: patch 32 uses dilations (1,2,4,8,1);
    /// patch 16 drops the fourth layer, giving (1,2,4,1).
    pub fn for_patch(patch: usize) -> Result<Self> {
        let dilations = match patch {
            32 => vec![1, 2, 4, 8, 1],
            16 => vec![1, 2, 4, 1],
            other => {
                return Err(Error::config(format!(
                    "no default layer recipe for patch size {other} (use 32 or 16)"
                )))
            }
        };
        Ok(InstanceNetConfig {
            patch,
            dilations,
            width: 64,
            learning_rate: 0.001,
            patches: 300,
            epochs: 3,
            seed: 0,
        })
    }

    /// Receptive field along each axis: 1 + 2 * sum(dilations).
    pub fn receptive_field(&self) -> usize {
        1 + 2 * self.dilations.iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::config("patch size must be positive"));
        }
        if self.dilations.is_empty() || self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::config("dilations must be positive"));
        }
        if self.width == 0 {
            return Err(Error::config("width must be positive"));
        }
        if self.receptive_field() <= self.patch {
            return Err(Error::config(format!(
                "receptive field {} must exceed patch size {}",
                self.receptive_field(),
                self.patch
            )));
        }
        Ok(())
    }
}

/// Provenance of one pasted label.
#[derive(Debug, Clone)]
pub struct LabelProvenance {
    /// Index into the centroid list that produced this label.
    pub centroid_index: usize,
    pub label: u32,
    /// Volume coordinate of patch voxel (0,0,0); may be negative at borders.
    pub patch_origin: [i64; 3],
    /// Voxels this label holds in the final volume (0 for empty
    /// predictions and fully lost conflicts).
    pub voxel_count: usize,
}

/// Label-coded instance segmentation plus per-label provenance.
#[derive(Debug, Clone)]
pub struct InstanceLabeling {
    pub labels: LabelVolume,
    pub provenance: Vec<LabelProvenance>,
    /// Voxels that a later label wanted but an earlier one already owned.
    pub conflicts: usize,
    /// Centroids whose prediction contained no foreground at the center.
    pub empty_predictions: usize,
}

/// Extracts a P-cube patch centered at `center`: patch voxel q maps to
/// volume voxel `center - P/2 + q`; out-of-bounds reads are zero.
pub fn extract_patch(vol: &BinaryVolume, center: [i64; 3], patch: usize) -> BinaryVolume {
    extract_patch_matching(vol, center, patch, |v| v)
}

/// Patch of `vol == label`, used for training targets.
pub fn extract_label_patch(vol: &LabelVolume, center: [i64; 3], patch: usize, label: u32) -> BinaryVolume {
    extract_patch_matching(vol, center, patch, |v| u8::from(v == label))
}

fn extract_patch_matching<T: Copy>(
    vol: &Volume<T>,
    center: [i64; 3],
    patch: usize,
    f: impl Fn(T) -> u8,
) -> BinaryVolume {
    let dims = vol.dims();
    let origin = patch_origin(center, patch);
    let mut out = Volume::filled(Dims::new(patch, patch, patch), 0u8);
    for q2 in 0..patch {
        let z = origin[2] + q2 as i64;
        if z < 0 || z >= dims.z as i64 {
            continue;
        }
        for q1 in 0..patch {
            let y = origin[1] + q1 as i64;
            if y < 0 || y >= dims.y as i64 {
                continue;
            }
            for q0 in 0..patch {
                let x = origin[0] + q0 as i64;
                if x < 0 || x >= dims.x as i64 {
                    continue;
                }
                let v = f(vol.get(x as usize, y as usize, z as usize));
                if v != 0 {
                    out.set(q0, q1, q2, v);
                }
            }
        }
    }
    out
}

fn patch_origin(center: [i64; 3], patch: usize) -> [i64; 3] {
    let half = (patch / 2) as i64;
    [center[0] - half, center[1] - half, center[2] - half]
}

/// The dilated-convolution patch network.
pub struct InstanceNet {
    pub cfg: InstanceNetConfig,
    pub params: ParamSet,
    layers: Vec<ConvBnRelu>,
    head: Conv3d,
}

impl InstanceNet {
    pub fn new(cfg: InstanceNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, Tag::InstanceInit, 0));
        let mut layers = Vec::new();
        let mut in_ch = 1;
        for (i, &d) in cfg.dilations.iter().enumerate() {
            layers.push(ConvBnRelu::new(
                &mut params,
                &format!("layer{i}"),
                ConvSpec::k3(in_ch, cfg.width, d),
                &mut rng,
            ));
            in_ch = cfg.width;
        }
        let head = Conv3d::new(&mut params, "head", ConvSpec::k1(in_ch, 1), &mut rng);
        Ok(InstanceNet {
            cfg,
            params,
            layers,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_len()
    }

    fn forward_train(
        &self,
        sess: &mut Session,
        params: &mut ParamSet,
        x: Tensor,
    ) -> Result<Tensor> {
        let mut cur = x;
        for layer in &self.layers {
            cur = layer.forward_train(sess, params, cur)?;
        }
        let y = self.head.forward(sess, params, cur)?;
        sess.graph.sigmoid(y)
    }

    fn forward_eval(&self, sess: &mut Session, params: &ParamSet, x: Tensor) -> Result<Tensor> {
        let mut cur = x;
        for layer in &self.layers {
            cur = layer.forward_eval(sess, params, cur)?;
        }
        let y = self.head.forward(sess, params, cur)?;
        sess.graph.sigmoid(y)
    }

    /// Eval-mode probabilities for one binary mask patch.
    pub fn infer_patch(&self, patch: &BinaryVolume) -> Result<Vec<f64>> {
        let p = self.cfg.patch;
        let shape = Shape::new(1, 1, p, p, p);
        let mut sess = Session::new();
        let data: Vec<f64> = patch.voxels().iter().map(|&v| v as f64).collect();
        let x = sess.input(shape, data)?;
        let y = self.forward_eval(&mut sess, &self.params, x)?;
        Ok(sess.graph.value(y)?.to_vec())
    }

    /// Trains on ground-truth patches: the input is the mask patch at a
    /// true center, the target that nucleus alone with every neighbor
    /// erased. Returns the per-epoch mean BCE trace.
    pub fn train(&mut self, sources: &[InstanceTrainSource]) -> Result<Vec<f64>> {
        let pairs: Vec<(usize, usize)> = sources
            .iter()
            .enumerate()
            .flat_map(|(si, s)| (0..s.centers.len()).map(move |ni| (si, ni)))
            .collect();
        if pairs.len() < self.cfg.patches {
            return Err(Error::config(format!(
                "need {} ground-truth nuclei for training, sources provide {}",
                self.cfg.patches,
                pairs.len()
            )));
        }
        let mut chosen = pairs;
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeds::derive(self.cfg.seed, Tag::InstanceTrain, 0));
        chosen.shuffle(&mut rng);
        chosen.truncate(self.cfg.patches);

        let p = self.cfg.patch;
        let shape = Shape::new(1, 1, p, p, p);
        let mut adam = Adam::new(self.cfg.learning_rate);
        let mut trace = Vec::with_capacity(self.cfg.epochs);

        for epoch in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..chosen.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
                self.cfg.seed,
                Tag::InstanceTrain,
                epoch as u64 + 1,
            ));
            order.shuffle(&mut rng);

            let mut epoch_loss = 0.0;
            for &ci in &order {
                let (si, ni) = chosen[ci];
                let source = &sources[si];
                let center = source.centers[ni];
                let input = extract_patch(&source.mask_gt, center, p);
                let target =
                    extract_label_patch(&source.inst_gt, center, p, ni as u32 + 1);

                let mut sess = Session::new();
                let data: Vec<f64> = input.voxels().iter().map(|&v| v as f64).collect();
                let x = sess.input(shape, data)?;
                let target_f: Vec<f64> = target.voxels().iter().map(|&v| v as f64).collect();
                let mut params = std::mem::take(&mut self.params);
                let result = (|| {
                    let y = self.forward_train(&mut sess, &mut params, x)?;
                    let loss = sess.graph.bce_loss(y, &target_f)?;
                    sess.backward(loss, &mut params)?;
                    Ok::<f64, Error>(sess.graph.value(loss)?[0])
                })();
                self.params = params;
                let loss_value = result?;
                adam.step(&mut self.params)?;
                epoch_loss += loss_value;
            }
            trace.push(epoch_loss / chosen.len() as f64);
        }
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dils: Vec<String> = self.cfg.dilations.iter().map(|d| d.to_string()).collect();
        let meta = vec![
            ("patch".to_string(), self.cfg.patch.to_string()),
            ("dilations".to_string(), dils.join(",")),
            ("width".to_string(), self.cfg.width.to_string()),
            (
                "learning_rate".to_string(),
                format!("{:.17e}", self.cfg.learning_rate),
            ),
            ("patches".to_string(), self.cfg.patches.to_string()),
            ("epochs".to_string(), self.cfg.epochs.to_string()),
            ("seed".to_string(), self.cfg.seed.to_string()),
        ];
        save_checkpoint(path, "instance", &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        if ckpt.kind != "instance" {
            return Err(Error::format(format!(
                "checkpoint kind `{}` is not an instance model",
                ckpt.kind
            )));
        }
        let parse_usize = |key: &str| -> Result<usize> {
            meta_value(&ckpt.meta, key)?
                .parse()
                .map_err(|_| Error::format(format!("bad {key}")))
        };
        let cfg = InstanceNetConfig {
            patch: parse_usize("patch")?,
            dilations: meta_value(&ckpt.meta, "dilations")?
                .split(',')
                .map(|d| {
                    d.parse()
                        .map_err(|_| Error::format(format!("bad dilation `{d}`")))
                })
                .collect::<Result<_>>()?,
            width: parse_usize("width")?,
            learning_rate: meta_value(&ckpt.meta, "learning_rate")?
                .parse()
                .map_err(|_| Error::format("bad learning_rate"))?,
            patches: parse_usize("patches")?,
            epochs: parse_usize("epochs")?,
            seed: meta_value(&ckpt.meta, "seed")?
                .parse()
                .map_err(|_| Error::format("bad seed"))?,
        };
        let mut fresh = InstanceNet::new(cfg)?;
        check_compatible(&fresh.params, &ckpt.params)?;
        fresh.params = ckpt.params;
        Ok(fresh)
    }
}

/// Ground truth for instance training: the binary mask, the per-nucleus
/// label volume (label i+1 = nucleus i) and the true centers in label
/// order.
#[derive(Debug, Clone)]
pub struct InstanceTrainSource {
    pub mask_gt: BinaryVolume,
    pub inst_gt: LabelVolume,
    pub centers: Vec<[i64; 3]>,
}

/// Measures the impulse-response support of a conv stack with the given
/// dilations (all-ones 3-kernels, no normalization or activations): feeds a
/// centered impulse through `side`-cube layers and reports the nonzero
/// extent per axis.
pub fn measured_receptive_field(dilations: &[usize], side: usize) -> Result<[usize; 3]> {
    let shape = Shape::new(1, 1, side, side, side);
    let mut g = Graph::new();
    let mut data = vec![0.0; shape.len()];
    let center = side / 2;
    data[(center * side + center) * side + center] = 1.0;
    let mut cur = g.leaf(shape, data)?;
    for &d in dilations {
        let spec = ConvSpec::k3(1, 1, d);
        let w = g.leaf(Shape::new(1, 1, 1, 1, 27), vec![1.0; 27])?;
        let b = g.leaf(Shape::new(1, 1, 1, 1, 1), vec![0.0])?;
        cur = g.conv3d(cur, w, b, &spec)?;
    }
    let out = g.value(cur)?;
    let mut lo = [side; 3];
    let mut hi = [0usize; 3];
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                if out[(z * side + y) * side + x] != 0.0 {
                    let coords = [x, y, z];
                    for a in 0..3 {
                        lo[a] = lo[a].min(coords[a]);
                        hi[a] = hi[a].max(coords[a]);
                    }
                }
            }
        }
    }
    Ok([hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1])
}

use crate::nn::Graph;

/// Segments every detected nucleus and pastes it into a label volume.
///
/// Per centroid j (rounded half-up to a voxel): extract the mask patch, run
/// the network, binarize at `threshold`, keep only the 26-connected
/// component containing the patch center, and write label j+1 wherever no
/// earlier label claimed the voxel.
pub fn segment_and_paste(
    model: &InstanceNet,
    detection: &DetectionResult,
    threshold: f64,
) -> Result<InstanceLabeling> {
    let p = model.cfg.patch;
    let dims = detection.mask.dims();

    // Patch inference is read-only on the model, so centroids run in
    // parallel; paste-back below stays in centroid order.
    let predictions: Vec<(usize, [i64; 3], BinaryVolume)> = detection
        .centroids
        .par_iter()
        .enumerate()
        .map(|(j, &c)| {
            let center = round_half_up(c);
            let patch = extract_patch(&detection.mask, center, p);
            let probs = model.infer_patch(&patch)?;
            let binary: Vec<u8> = probs.iter().map(|&v| u8::from(v >= threshold)).collect();
            let vol = Volume::new(Dims::new(p, p, p), binary)?;
            Ok((j, center, center_component(&vol)))
        })
        .collect::<Result<_>>()?;

    let mut labels: LabelVolume = Volume::filled(dims, 0u32);
    let mut provenance = Vec::with_capacity(predictions.len());
    let mut conflicts = 0usize;
    let mut empty_predictions = 0usize;

    for (j, center, kept) in predictions {
        let origin = patch_origin(center, p);
        let label = j as u32 + 1;
        let mut voxel_count = 0usize;
        let mut any = false;
        for q2 in 0..p {
            for q1 in 0..p {
                for q0 in 0..p {
                    if kept.get(q0, q1, q2) == 0 {
                        continue;
                    }
                    any = true;
                    let (x, y, z) = (
                        origin[0] + q0 as i64,
                        origin[1] + q1 as i64,
                        origin[2] + q2 as i64,
                    );
                    if !dims.contains(x, y, z) {
                        continue;
                    }
                    let idx = dims.index(x as usize, y as usize, z as usize);
                    if labels.voxels()[idx] == 0 {
                        labels.voxels_mut()[idx] = label;
                        voxel_count += 1;
                    } else {
                        conflicts += 1;
                    }
                }
            }
        }
        if !any {
            empty_predictions += 1;
        }
        provenance.push(LabelProvenance {
            centroid_index: j,
            label,
            patch_origin: origin,
            voxel_count,
        });
    }

    Ok(InstanceLabeling {
        labels,
        provenance,
        conflicts,
        empty_predictions,
    })
}

/// Keeps only the 26-connected component containing the patch center;
/// empty if the center voxel is background.
fn center_component(patch: &BinaryVolume) -> BinaryVolume {
    let dims = patch.dims();
    let center = (dims.x / 2, dims.y / 2, dims.z / 2);
    if patch.get(center.0, center.1, center.2) == 0 {
        return Volume::filled(dims, 0u8);
    }
    let (labels, _) = connected_components(patch, Connectivity::TwentySix);
    let keep = labels.get(center.0, center.1, center.2);
    labels.map(|l| u8::from(l == keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, instance_labels, PhantomConfig, ShapeModel};

    #[test]
    fn patch_of_uniform_volume_is_all_ones_inside() {
        let vol = Volume::filled(Dims::new(32, 32, 32), 1u8);
        let patch = extract_patch(&vol, [16, 16, 16], 16);
        assert!(patch.voxels().iter().all(|&v| v == 1));
    }

    #[test]
    fn corner_patch_zero_fills_out_of_bounds() {
        let vol = Volume::filled(Dims::new(32, 32, 32), 1u8);
        let patch = extract_patch(&vol, [0, 0, 0], 16);
        // Index-mapping oracle: patch voxel q is in-bounds iff q >= 8.
        for q2 in 0..16 {
            for q1 in 0..16 {
                for q0 in 0..16 {
                    let expected = u8::from(q0 >= 8 && q1 >= 8 && q2 >= 8);
                    assert_eq!(patch.get(q0, q1, q2), expected);
                }
            }
        }
    }

    #[test]
    fn extract_then_paste_is_identity_in_bounds() {
        let dims = Dims::new(24, 24, 24);
        let mut vol = Volume::filled(dims, 0u8);
        for (x, y, z) in [(10, 11, 12), (11, 11, 12), (10, 12, 12), (15, 8, 9)] {
            vol.set(x, y, z, 1);
        }
        let center = [11i64, 11, 11];
        let p = 16;
        let patch = extract_patch(&vol, center, p);
        let origin = patch_origin(center, p);
        let mut rebuilt = Volume::filled(dims, 0u8);
        for q2 in 0..p {
            for q1 in 0..p {
                for q0 in 0..p {
                    if patch.get(q0, q1, q2) != 0 {
                        rebuilt.set(
                            (origin[0] + q0 as i64) as usize,
                            (origin[1] + q1 as i64) as usize,
                            (origin[2] + q2 as i64) as usize,
                            1,
                        );
                    }
                }
            }
        }
        assert_eq!(rebuilt, vol);
    }

    #[test]
    fn receptive_field_recipes() {
        let cfg32 = InstanceNetConfig::for_patch(32).unwrap();
        assert_eq!(cfg32.receptive_field(), 33);
        let cfg16 = InstanceNetConfig::for_patch(16).unwrap();
        assert_eq!(cfg16.receptive_field(), 17);
        assert!(InstanceNetConfig::for_patch(20).is_err());

        // Too-small receptive field is a config error.
        let bad = InstanceNetConfig {
            dilations: vec![1, 2],
            ..cfg16
        };
        assert!(matches!(InstanceNet::new(bad), Err(Error::Config(_))));
    }

    #[test]
    fn output_shape_equals_input_shape() {
        let cfg = InstanceNetConfig {
            width: 4,
            ..InstanceNetConfig::for_patch(16).unwrap()
        };
        let net = InstanceNet::new(cfg).unwrap();
        let patch = Volume::filled(Dims::new(16, 16, 16), 1u8);
        let out = net.infer_patch(&patch).unwrap();
        assert_eq!(out.len(), 16 * 16 * 16);
        assert!(out.iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
    }

    fn touching_phantom() -> (crate::phantom::Phantom, LabelVolume) {
        let cfg = PhantomConfig {
            dims: Dims::new(48, 48, 48),
            attempts: 150,
            r_min: 3.0,
            r_max: 5.0,
            shape_model: ShapeModel::Sphere,
            seed: 31,
            degradation: crate::phantom::DegradationParams::default(),
        };
        let p = generate_phantom(&cfg).unwrap();
        let inst = instance_labels(&p.accepted, cfg.dims);
        (p, inst)
    }

    #[test]
    fn training_targets_erase_neighbors() {
        let (p, inst) = touching_phantom();
        // Find a nucleus whose patch contains foreign voxels.
        let patch = 16;
        let mut found = false;
        for (i, spec) in p.accepted.iter().enumerate() {
            let input = extract_patch(&p.mask_gt, spec.center, patch);
            let target = extract_label_patch(&inst, spec.center, patch, i as u32 + 1);
            // target must be exactly the nucleus' own voxels within bounds:
            // validated against the per-nucleus voxelization oracle.
            let own = crate::phantom::voxelize(spec, p.mask_gt.dims());
            let own_patch = extract_patch(&own, spec.center, patch);
            assert_eq!(target, own_patch, "nucleus {i}");
            // target is a subset of the input.
            assert!(crate::components::is_subset(&target, &input).unwrap());
            let diff: usize = input
                .voxels()
                .iter()
                .zip(target.voxels())
                .filter(|(a, b)| **a != 0 && **b == 0)
                .count();
            if diff > 0 {
                found = true;
            } else {
                // Nothing to erase: the target equals the input.
                assert_eq!(input, target, "nucleus {i}");
            }
        }
        assert!(found, "phantom should contain at least one crowded patch");
    }

    #[test]
    fn insufficient_nuclei_is_config_error() {
        let (p, inst) = touching_phantom();
        let sources = [InstanceTrainSource {
            mask_gt: p.mask_gt.clone(),
            inst_gt: inst,
            centers: p.accepted.iter().map(|s| s.center).collect(),
        }];
        let cfg = InstanceNetConfig {
            patches: 10_000,
            width: 4,
            ..InstanceNetConfig::for_patch(16).unwrap()
        };
        let mut net = InstanceNet::new(cfg).unwrap();
        assert!(matches!(net.train(&sources), Err(Error::Config(_))));
    }

    #[test]
    fn zero_centroids_give_all_background() {
        let cfg = InstanceNetConfig {
            width: 4,
            ..InstanceNetConfig::for_patch(16).unwrap()
        };
        let net = InstanceNet::new(cfg).unwrap();
        let dims = Dims::new(24, 24, 24);
        let detection = DetectionResult {
            centroids: vec![],
            mask: Volume::filled(dims, 1u8),
            detection: Volume::filled(dims, 0u8),
            table: Default::default(),
        };
        let out = segment_and_paste(&net, &detection, 0.5).unwrap();
        assert!(out.labels.voxels().iter().all(|&v| v == 0));
        assert_eq!(out.provenance.len(), 0);
    }

    #[test]
    fn center_component_filter_keeps_only_center_blob() {
        let dims = Dims::new(8, 8, 8);
        let mut patch = Volume::filled(dims, 0u8);
        // Center blob.
        patch.set(4, 4, 4, 1);
        patch.set(5, 4, 4, 1);
        // Disconnected corner blob.
        patch.set(0, 0, 0, 1);
        let kept = center_component(&patch);
        assert_eq!(kept.get(4, 4, 4), 1);
        assert_eq!(kept.get(5, 4, 4), 1);
        assert_eq!(kept.get(0, 0, 0), 0);

        // Background center keeps nothing.
        let mut patch = Volume::filled(dims, 0u8);
        patch.set(0, 0, 0, 1);
        let kept = center_component(&patch);
        assert!(kept.voxels().iter().all(|&v| v == 0));
    }
}

//! First-stage network: nucleus detection and binary segmentation.
//!
//! A modified 3D U-Net takes a 64-cube intensity window and emits two
//! same-sized sigmoid heads: the detection volume (central regions, whose
//! component centroids become the nucleus centers) and the nuclei mask.
//! Training minimizes the sum of the two binary cross entropies against the
//! phantom ground truths. Whole volumes are processed by moving the window
//! at stride 64, shifting the final window back flush with the boundary;
//! where shifted windows overlap, the later window's values win.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::components::{connected_components, ComponentTable, Connectivity};
use crate::error::{Axis, Error, Result};
use crate::nn::checkpoint::{load_checkpoint, meta_value, save_checkpoint};
use crate::nn::{
    check_compatible, Adam, Conv3d, ConvBnRelu, ConvSpec, ParamSet, Session, Shape, Tensor,
    TransposedConv3d,
};
use crate::seeds::{self, Tag};
use crate::volio::read_volume;
use crate::volume::{check_same_dims, BinaryVolume, Dims, IntensityVolume, ProbabilityVolume, Volume};

/// Detection network hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectNetConfig {
    /// Encoder channel width per level; the last entry is the bottom level.
    pub widths: Vec<usize>,
    /// Training/inference window edge length.
    pub input_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DetectNetConfig {
    fn default() -> Self {
        DetectNetConfig {
            widths: vec![32, 64, 128],
            input_size: 64,
            learning_rate: 0.001,
            epochs: 3,
            seed: 0,
        }
    }
}

impl DetectNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::config("widths must name at least one level"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::config("widths must be positive"));
        }
        let down = 1usize << (self.widths.len() - 1);
        if self.input_size == 0 || self.input_size % down != 0 {
            return Err(Error::config(format!(
                "input size {} must be divisible by 2^(levels-1) = {down}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// Detection output: centroid list, gated mask and detection volumes, and
/// the surviving-component table.
#[derive(Debug, Clone)]
pub struct DetectionResult {
    /// Component centroids of the detection volume, in label order.
    pub centroids: Vec<[f64; 3]>,
    /// Binarized mask head.
    pub mask: BinaryVolume,
    /// Binarized detection head after mask gating and small-component
    /// removal.
    pub detection: BinaryVolume,
    pub table: ComponentTable,
}

struct EncoderLevel {
    a: ConvBnRelu,
    b: ConvBnRelu,
}

struct DecoderLevel {
    up: TransposedConv3d,
    up_bn: crate::nn::BatchNorm3d,
    a: ConvBnRelu,
    b: ConvBnRelu,
}

/// The dual-head detection U-Net.
pub struct DetectNet {
    pub cfg: DetectNetConfig,
    pub params: ParamSet,
    encoder: Vec<EncoderLevel>,
    bottom: EncoderLevel,
    decoder: Vec<DecoderLevel>,
    head_det: Conv3d,
    head_mask: Conv3d,
}

fn build_layers(
    cfg: &DetectNetConfig,
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
) -> (
    Vec<EncoderLevel>,
    EncoderLevel,
    Vec<DecoderLevel>,
    Conv3d,
    Conv3d,
) {
    let widths = &cfg.widths;
    let levels = widths.len();

    let mut encoder = Vec::new();
    let mut in_ch = 1;
    for (i, &w) in widths.iter().take(levels - 1).enumerate() {
        encoder.push(EncoderLevel {
            a: ConvBnRelu::new(params, &format!("enc{i}.a"), ConvSpec::k3(in_ch, w, 1), rng),
            b: ConvBnRelu::new(params, &format!("enc{i}.b"), ConvSpec::k3(w, w, 1), rng),
        });
        in_ch = w;
    }
    let bottom_w = widths[levels - 1];
    let bottom = EncoderLevel {
        a: ConvBnRelu::new(
            params,
            "bottom.a",
            ConvSpec::k3(in_ch, bottom_w, 1),
            rng,
        ),
        b: ConvBnRelu::new(params, "bottom.b", ConvSpec::k3(bottom_w, bottom_w, 1), rng),
    };

    let mut decoder = Vec::new();
    let mut upper = bottom_w;
    for i in (0..levels - 1).rev() {
        let w = widths[i];
        decoder.push(DecoderLevel {
            up: TransposedConv3d::new(params, &format!("dec{i}.up"), upper, w, rng),
            up_bn: crate::nn::BatchNorm3d::new(params, &format!("dec{i}.up_bn"), w),
            a: ConvBnRelu::new(
                params,
                &format!("dec{i}.a"),
                ConvSpec::k3(2 * w, w, 1),
                rng,
            ),
            b: ConvBnRelu::new(params, &format!("dec{i}.b"), ConvSpec::k3(w, w, 1), rng),
        });
        upper = w;
    }

    let head_det = Conv3d::new(params, "head_det", ConvSpec::k1(widths[0], 1), rng);
    let head_mask = Conv3d::new(params, "head_mask", ConvSpec::k1(widths[0], 1), rng);
    (encoder, bottom, decoder, head_det, head_mask)
}

impl DetectNet {
    /// Builds a freshly initialized network (Kaiming conv weights from the
    /// config seed, unit batchnorm).
    pub fn new(cfg: DetectNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, Tag::DetectInit, 0));
        let (encoder, bottom, decoder, head_det, head_mask) =
            build_layers(&cfg, &mut params, &mut rng);
        Ok(DetectNet {
            cfg,
            params,
            encoder,
            bottom,
            decoder,
            head_det,
            head_mask,
        })
    }

    /// Total trainable scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params.trainable_len()
    }

    /// Training-mode forward; returns (detection, mask) sigmoid outputs.
    fn forward_train(
        &self,
        sess: &mut Session,
        params: &mut ParamSet,
        x: Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let mut skips = Vec::new();
        let mut cur = x;
        for level in &self.encoder {
            let a = level.a.forward_train(sess, params, cur)?;
            let b = level.b.forward_train(sess, params, a)?;
            skips.push(b);
            cur = sess.graph.maxpool3d(b)?;
        }
        let a = self.bottom.a.forward_train(sess, params, cur)?;
        cur = self.bottom.b.forward_train(sess, params, a)?;

        for (d, level) in self.decoder.iter().enumerate() {
            let skip = skips[skips.len() - 1 - d];
            let up = level.up.forward(sess, params, cur)?;
            let up = level.up_bn.forward_train(sess, params, up)?;
            let up = sess.graph.relu(up)?;
            let joined = sess.graph.concat(&[up, skip])?;
            let a = level.a.forward_train(sess, params, joined)?;
            cur = level.b.forward_train(sess, params, a)?;
        }

        let det = self.head_det.forward(sess, params, cur)?;
        let det = sess.graph.sigmoid(det)?;
        let mask = self.head_mask.forward(sess, params, cur)?;
        let mask = sess.graph.sigmoid(mask)?;
        Ok((det, mask))
    }

    /// Eval-mode forward with frozen batchnorm statistics.
    fn forward_eval(
        &self,
        sess: &mut Session,
        params: &ParamSet,
        x: Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let mut skips = Vec::new();
        let mut cur = x;
        for level in &self.encoder {
            let a = level.a.forward_eval(sess, params, cur)?;
            let b = level.b.forward_eval(sess, params, a)?;
            skips.push(b);
            cur = sess.graph.maxpool3d(b)?;
        }
        let a = self.bottom.a.forward_eval(sess, params, cur)?;
        cur = self.bottom.b.forward_eval(sess, params, a)?;

        for (d, level) in self.decoder.iter().enumerate() {
            let skip = skips[skips.len() - 1 - d];
            let up = level.up.forward(sess, params, cur)?;
            let up = level.up_bn.forward_eval(sess, params, up)?;
            let up = sess.graph.relu(up)?;
            let joined = sess.graph.concat(&[up, skip])?;
            let a = level.a.forward_eval(sess, params, joined)?;
            cur = level.b.forward_eval(sess, params, a)?;
        }

        let det = self.head_det.forward(sess, params, cur)?;
        let det = sess.graph.sigmoid(det)?;
        let mask = self.head_mask.forward(sess, params, cur)?;
        let mask = sess.graph.sigmoid(mask)?;
        Ok((det, mask))
    }

    /// Runs one window in eval mode; input values are intensities already
    /// scaled to [0, 1]. Returns (detection, mask) probabilities.
    pub fn infer_window(&self, window: &[f64], side: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let shape = Shape::new(1, 1, side, side, side);
        if window.len() != shape.len() {
            return Err(Error::DimError {
                axis: Axis::Tensor(0),
                expected: shape.len(),
                actual: window.len(),
            });
        }
        let mut sess = Session::new();
        let x = sess.input(shape, window.to_vec())?;
        let (det, mask) = self.forward_eval(&mut sess, &self.params, x)?;
        Ok((
            sess.graph.value(det)?.to_vec(),
            sess.graph.value(mask)?.to_vec(),
        ))
    }

    /// Trains on (syn, mask_gt, det_gt) window triples with the summed dual
    /// BCE loss and Adam. Returns the per-epoch mean loss trace.
    pub fn train(&mut self, data: &[DetectSample]) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::config("detect training set is empty"));
        }
        let side = self.cfg.input_size;
        for (i, s) in data.iter().enumerate() {
            let want = Dims::new(side, side, side);
            check_same_dims(want, s.syn.dims())
                .map_err(|e| e.in_stage(&format!("detect sample {i}")))?;
        }

        let mut adam = Adam::new(self.cfg.learning_rate);
        let mut trace = Vec::with_capacity(self.cfg.epochs);
        let shape = Shape::new(1, 1, side, side, side);

        for epoch in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
                self.cfg.seed,
                Tag::DetectTrain,
                epoch as u64,
            ));
            order.shuffle(&mut rng);

            let mut epoch_loss = 0.0;
            for &i in &order {
                let sample = &data[i];
                let mut sess = Session::new();
                let x = sess.input(shape, scale_intensity(&sample.syn))?;
                let mut params = std::mem::take(&mut self.params);
                let result = (|| {
                    let (det, mask) = self.forward_train(&mut sess, &mut params, x)?;
                    let det_loss = sess
                        .graph
                        .bce_loss(det, &binary_to_f64(&sample.det_gt))?;
                    let mask_loss = sess
                        .graph
                        .bce_loss(mask, &binary_to_f64(&sample.mask_gt))?;
                    let loss = sess.graph.add(det_loss, mask_loss)?;
                    sess.backward(loss, &mut params)?;
                    Ok::<f64, Error>(sess.graph.value(loss)?[0])
                })();
                self.params = params;
                let loss_value = result?;
                adam.step(&mut self.params)?;
                epoch_loss += loss_value;
            }
            trace.push(epoch_loss / data.len() as f64);
        }
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let widths: Vec<String> = self.cfg.widths.iter().map(|w| w.to_string()).collect();
        let meta = vec![
            ("widths".to_string(), widths.join(",")),
            ("input_size".to_string(), self.cfg.input_size.to_string()),
            (
                "learning_rate".to_string(),
                format!("{:.17e}", self.cfg.learning_rate),
            ),
            ("epochs".to_string(), self.cfg.epochs.to_string()),
            ("seed".to_string(), self.cfg.seed.to_string()),
        ];
        save_checkpoint(path, "detect", &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        if ckpt.kind != "detect" {
            return Err(Error::format(format!(
                "checkpoint kind `{}` is not a detect model",
                ckpt.kind
            )));
        }
        let widths: Vec<usize> = meta_value(&ckpt.meta, "widths")?
            .split(',')
            .map(|w| {
                w.parse()
                    .map_err(|_| Error::format(format!("bad width `{w}`")))
            })
            .collect::<Result<_>>()?;
        let cfg = DetectNetConfig {
            widths,
            input_size: meta_value(&ckpt.meta, "input_size")?
                .parse()
                .map_err(|_| Error::format("bad input_size"))?,
            learning_rate: meta_value(&ckpt.meta, "learning_rate")?
                .parse()
                .map_err(|_| Error::format("bad learning_rate"))?,
            epochs: meta_value(&ckpt.meta, "epochs")?
                .parse()
                .map_err(|_| Error::format("bad epochs"))?,
            seed: meta_value(&ckpt.meta, "seed")?
                .parse()
                .map_err(|_| Error::format("bad seed"))?,
        };
        let mut fresh = DetectNet::new(cfg)?;
        check_compatible(&fresh.params, &ckpt.params)?;
        fresh.params = ckpt.params;
        Ok(fresh)
    }
}

/// One training window triple.
#[derive(Debug, Clone)]
pub struct DetectSample {
    pub syn: IntensityVolume,
    pub mask_gt: BinaryVolume,
    pub det_gt: BinaryVolume,
}

/// Loads (syn, mask_gt, det_gt) triples from a manifest file.
pub fn load_samples(manifest: &Path) -> Result<Vec<DetectSample>> {
    let rows = crate::phantom::read_manifest(manifest)?;
    let mut samples = Vec::with_capacity(rows.len());
    for row in rows {
        samples.push(DetectSample {
            syn: read_volume(&row[0])?.into_intensity()?,
            mask_gt: read_volume(&row[1])?.into_binary()?,
            det_gt: read_volume(&row[2])?.into_binary()?,
        });
    }
    Ok(samples)
}

/// Intensities scaled by 1/255 into [0, 1].
pub fn scale_intensity(vol: &IntensityVolume) -> Vec<f64> {
    vol.voxels().iter().map(|&v| v as f64 / 255.0).collect()
}

fn binary_to_f64(vol: &BinaryVolume) -> Vec<f64> {
    vol.voxels().iter().map(|&v| v as f64).collect()
}

/// Window start offsets along one axis: stride `window` until flush, with
/// the final window shifted back to end exactly at the boundary when the
/// extent is not a multiple.
pub fn window_offsets(extent: usize, window: usize) -> Result<Vec<usize>> {
    if extent < window {
        return Err(Error::DimError {
            axis: Axis::Tensor(2),
            expected: window,
            actual: extent,
        });
    }
    let mut offsets: Vec<usize> = (0..)
        .map(|i| i * window)
        .take_while(|o| o + window <= extent)
        .collect();
    let last = *offsets.last().expect("extent >= window");
    if last + window < extent {
        offsets.push(extent - window);
    }
    Ok(offsets)
}

/// Sliding-window inference over a whole volume. Every voxel receives
/// exactly one prediction except flush-shift overlap zones, which take the
/// later window's values. Output extents equal the input's.
pub fn sliding_window_inference(
    model: &DetectNet,
    vol: &IntensityVolume,
) -> Result<(ProbabilityVolume, ProbabilityVolume)> {
    let dims = vol.dims();
    let side = model.cfg.input_size;
    let xs = window_offsets(dims.x, side)?;
    let ys = window_offsets(dims.y, side)?;
    let zs = window_offsets(dims.z, side)?;

    let scaled = scale_intensity(vol);
    let mut det = Volume::filled(dims, 0.0f64);
    let mut mask = Volume::filled(dims, 0.0f64);

    for &oz in &zs {
        for &oy in &ys {
            for &ox in &xs {
                let mut window = Vec::with_capacity(side * side * side);
                for z in 0..side {
                    for y in 0..side {
                        let row = dims.index(ox, oy + y, oz + z);
                        window.extend_from_slice(&scaled[row..row + side]);
                    }
                }
                let (dp, mp) = model.infer_window(&window, side)?;
                let mut i = 0;
                for z in 0..side {
                    for y in 0..side {
                        let row = dims.index(ox, oy + y, oz + z);
                        det.voxels_mut()[row..row + side].copy_from_slice(&dp[i..i + side]);
                        mask.voxels_mut()[row..row + side].copy_from_slice(&mp[i..i + side]);
                        i += side;
                    }
                }
            }
        }
    }
    Ok((det, mask))
}

/// Thresholds both heads, removes detection foreground wherever the mask is
/// background, drops detection components smaller than `min_component`, and
/// reports the surviving component centroids as nucleus centers.
pub fn postprocess(
    det_prob: &ProbabilityVolume,
    mask_prob: &ProbabilityVolume,
    threshold: f64,
    min_component: usize,
    connectivity: Connectivity,
) -> Result<DetectionResult> {
    check_same_dims(det_prob.dims(), mask_prob.dims())?;
    let mask: BinaryVolume = mask_prob.map(|p| u8::from(p >= threshold));
    let mut det: BinaryVolume = det_prob.map(|p| u8::from(p >= threshold));
    for (d, &m) in det.voxels_mut().iter_mut().zip(mask.voxels()) {
        if m == 0 {
            *d = 0;
        }
    }
    let det = crate::components::remove_small_components(&det, min_component, connectivity);
    let (_, table) = connected_components(&det, connectivity);
    let centroids = table.components().iter().map(|c| c.centroid).collect();
    Ok(DetectionResult {
        centroids,
        mask,
        detection: det,
        table,
    })
}

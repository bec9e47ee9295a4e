//! Shared test oracles, independent of the library's implementation paths:
//! a central finite-difference gradient checker and a naive six-nested-loop
//! dilated convolution.

use nucleus3d_core::nn::{ConvSpec, Graph, Shape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-6;

/// A differentiable scenario: rebuilds the graph from leaf values and
/// returns (loss tensor, leaves to check).
pub type BuildFn = dyn Fn(&mut Graph, &[Vec<f64>]) -> (Tensor, Vec<Tensor>);

/// Max relative error between analytic gradients and central finite
/// differences over every element of every leaf.
///
/// The relative error uses a unit floor so near-zero gradient pairs compare
/// absolutely.
pub fn gradcheck(build: &BuildFn, leaf_values: &[Vec<f64>]) -> f64 {
    // Analytic gradients.
    let mut g = Graph::new();
    let (loss, leaves) = build(&mut g, leaf_values);
    g.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&t| g.grad(t).expect("grad").to_vec())
        .collect();

    let eval = |values: &[Vec<f64>]| -> f64 {
        let mut g = Graph::new();
        let (loss, _) = build(&mut g, values);
        g.value(loss).expect("loss value")[0]
    };

    let mut worst: f64 = 0.0;
    for (li, leaf) in leaf_values.iter().enumerate() {
        for i in 0..leaf.len() {
            let mut plus = leaf_values.to_vec();
            plus[li][i] += FD_STEP;
            let mut minus = leaf_values.to_vec();
            minus[li][i] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[li][i];
            let denom = a.abs().max(fd.abs()).max(1.0);
            worst = worst.max((a - fd).abs() / denom);
        }
    }
    worst
}

/// Uniform values in [lo, hi).
pub fn random_values(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero (for kink-free ReLU checks).
pub fn random_values_away_from(
    rng: &mut ChaCha8Rng,
    len: usize,
    margin: f64,
    scale: f64,
) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let magnitude = rng.random_range(margin..scale);
            if rng.random_bool(0.5) {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect()
}

/// Random values where no two entries of any 2x2x2 pooling window are
/// closer than `gap`, so max-pooling is locally linear for the FD probe.
pub fn random_pool_safe(rng: &mut ChaCha8Rng, shape: Shape, gap: f64) -> Vec<f64> {
    'outer: loop {
        let values = random_values(rng, shape.len(), 0.0, 1.0);
        for n in 0..shape.n {
            for c in 0..shape.c {
                let base = (n * shape.c + c) * shape.spatial_len();
                for od in 0..shape.d / 2 {
                    for oh in 0..shape.h / 2 {
                        for ow in 0..shape.w / 2 {
                            let mut window = Vec::with_capacity(8);
                            for kd in 0..2 {
                                for kh in 0..2 {
                                    for kw in 0..2 {
                                        let idx = base
                                            + ((od * 2 + kd) * shape.h + (oh * 2 + kh)) * shape.w
                                            + (ow * 2 + kw);
                                        window.push(values[idx]);
                                    }
                                }
                            }
                            window.sort_by(f64::total_cmp);
                            if window.windows(2).any(|p| p[1] - p[0] < gap) {
                                continue 'outer;
                            }
                        }
                    }
                }
            }
        }
        return values;
    }
}

/// Reduces a tensor to a scalar through sigmoid + BCE against fixed random
/// binary targets, so every element influences the loss with its own
/// distinct weight (a plain sum would hide permuted-gradient bugs).
pub fn reduce_loss(g: &mut Graph, t: Tensor, seed: u64) -> Tensor {
    let shape = g.shape(t).expect("shape");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target: Vec<f64> = (0..shape.len())
        .map(|_| f64::from(rng.random_bool(0.5)))
        .collect();
    let s = g.sigmoid(t).expect("sigmoid");
    g.bce_loss(s, &target).expect("bce")
}

/// Naive dilated 3D convolution, written directly from the defining sum
/// `out(v) = sum_u input(v - d*u) * h(u)` with centered taps; used as the
/// independent oracle for the optimized implementation.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv3d(
    input: &[f64],
    in_shape: Shape,
    weight: &[f64],
    bias: &[f64],
    spec: &ConvSpec,
) -> (Vec<f64>, Shape) {
    let k = spec.kernel as i64;
    let c = (k - 1) / 2; // center tap index offset
    let dil = spec.dilation as i64;
    let reach = (spec.dilation * (spec.kernel - 1)) as i64;
    let od_e = in_shape.d as i64 + 2 * spec.padding[0] as i64 - reach;
    let oh_e = in_shape.h as i64 + 2 * spec.padding[1] as i64 - reach;
    let ow_e = in_shape.w as i64 + 2 * spec.padding[2] as i64 - reach;
    assert!(od_e > 0 && oh_e > 0 && ow_e > 0);
    let out_shape = Shape::new(
        in_shape.n,
        spec.out_channels,
        od_e as usize,
        oh_e as usize,
        ow_e as usize,
    );

    let in_spatial = in_shape.spatial_len();
    let read = |n: usize, ci: usize, z: i64, y: i64, x: i64| -> f64 {
        if z < 0
            || y < 0
            || x < 0
            || z >= in_shape.d as i64
            || y >= in_shape.h as i64
            || x >= in_shape.w as i64
        {
            return 0.0;
        }
        input[(n * in_shape.c + ci) * in_spatial
            + (z as usize * in_shape.h + y as usize) * in_shape.w
            + x as usize]
    };

    let mut out = Vec::with_capacity(out_shape.len());
    for n in 0..in_shape.n {
        for co in 0..spec.out_channels {
            for od in 0..od_e {
                for oh in 0..oh_e {
                    for ow in 0..ow_e {
                        // Voxel position in padded coordinates; u ranges over
                        // centered taps.
                        let vz = od + c * dil - spec.padding[0] as i64;
                        let vy = oh + c * dil - spec.padding[1] as i64;
                        let vx = ow + c * dil - spec.padding[2] as i64;
                        let mut acc = bias[co];
                        for ci in 0..spec.in_channels {
                            for uz in -c..=c {
                                for uy in -c..=c {
                                    for ux in -c..=c {
                                        let h = weight[((co * spec.in_channels + ci)
                                            * spec.kernel
                                            + (uz + c) as usize)
                                            * spec.kernel
                                            * spec.kernel
                                            + (uy + c) as usize * spec.kernel
                                            + (ux + c) as usize];
                                        acc += read(
                                            n,
                                            ci,
                                            vz - dil * uz,
                                            vy - dil * uy,
                                            vx - dil * ux,
                                        ) * h;
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    (out, out_shape)
}

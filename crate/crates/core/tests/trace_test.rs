// temporary diagnostic
use nucleus3d_core::detect::*;
use nucleus3d_core::phantom::*;
use nucleus3d_core::volume::Dims;

#[test]
fn dump_overfit_trace() {
    let cfg = PhantomConfig {
        dims: Dims::new(16, 16, 16),
        attempts: 12,
        r_min: 2.0,
        r_max: 3.0,
        shape_model: ShapeModel::Sphere,
        seed: 99,
        degradation: DegradationParams { blur_sigma: [0.8;3], noise_sigma: 4.0, ..Default::default() },
    };
    let p = generate_phantom(&cfg).unwrap();
    let syn = synthesize_appearance(&p.mask_gt, &cfg.degradation, 7);
    let fg: usize = p.det_gt.voxels().iter().map(|&v| v as usize).sum();
    let mfg: usize = p.mask_gt.voxels().iter().map(|&v| v as usize).sum();
    println!("accepted {} det fg {} mask fg {}", p.accepted.len(), fg, mfg);
    let mut net = DetectNet::new(DetectNetConfig {
        widths: vec![16, 32], input_size: 16, learning_rate: 0.001, epochs: 200, seed: 5,
    }).unwrap();
    let sample = DetectSample { syn, mask_gt: p.mask_gt, det_gt: p.det_gt };
    let trace = net.train(std::slice::from_ref(&sample)).unwrap();
    for (i, l) in trace.iter().enumerate() {
        if i % 10 == 0 || i == trace.len()-1 { println!("epoch {i}: {l:.5}"); }
    }
}

//! Wall-clock and convergence probe of the default-scale fitting loop.
use secad_core::trainer::{fit_single, volumetric_iou, FitConfig};
use secad_core::voxel::{ShapeSpec, VoxelGrid};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(11);
    let shape = args.get(3).map(|s| s.as_str()).unwrap_or("cuboid");
    let spec = match shape {
        "cuboid" => ShapeSpec::Cuboid { center: [0.0; 3], half_extents: [0.25; 3] },
        "plate" => ShapeSpec::PlateWithHole { half_extents: [0.3, 0.3, 0.1], hole_radius: 0.12 },
        "cylinder" => ShapeSpec::Cylinder { center: [0.0; 3], radius: 0.2, half_height: 0.3, axis: secad_core::voxel::Axis::Z },
        other => panic!("unknown shape {other}"),
    };
    let grid = VoxelGrid::synthesize(&spec, 64).unwrap();
    let cfg = FitConfig::<f64> { epochs, seed, ..FitConfig::default() };
    let t0 = Instant::now();
    let ckpt = fit_single(&grid, cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    for e in ckpt.history.iter().step_by(100.max(epochs / 10)) {
        println!("epoch {:4}  recon {:.6}  sketch {:.6}", e.epoch, e.recon, e.sketch);
    }
    let last = ckpt.history.last().unwrap();
    println!("epoch {:4}  recon {:.6}  sketch {:.6}  (final)", last.epoch, last.recon, last.sketch);
    let iou = volumetric_iou(&ckpt.model, 0, &grid, &cfg.loss.field()).unwrap();
    println!("{shape} seed {seed}: {epochs} epochs in {dt:.1}s; IoU {iou:.4}");
}

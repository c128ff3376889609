//! Field-trajectory diagnostic: tracks head-0 sketch SDF at probe radii.
use secad_core::model::CodeRef;
use secad_core::trainer::{fit_resume, fit_single, FitConfig};
use secad_core::voxel::{ShapeSpec, VoxelGrid};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lambda: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let grid = VoxelGrid::synthesize(
        &ShapeSpec::Cuboid { center: [0.0; 3], half_extents: [0.25; 3] },
        64,
    )
    .unwrap();
    let mut cfg = FitConfig::<f64>::default();
    cfg.seed = 11;
    cfg.loss.lambda = lambda;
    cfg.epochs = 0;
    let mut ckpt = fit_single(&grid, cfg).unwrap();
    println!("lambda = {lambda}");
    println!("epoch |   s(0)   s(.20)   s(.25)  s(.25,.25)  s(.35)   s(.45) | recon");
    for step in 0..30 {
        let e = step * 10;
        fit_resume(&mut ckpt, &[grid.clone()], e.max(1)).unwrap();
        let probe = |p: [f64; 2]| {
            ckpt.model
                .sketch_sdf(0, p, CodeRef::Stored(0))
                .unwrap()
        };
        let recon = ckpt.history.last().map(|h| h.recon).unwrap_or(f64::NAN);
        println!(
            "{:5} | {:7.3} {:7.3} {:7.3} {:9.3} {:7.3} {:7.3} | {:.4}",
            e,
            probe([0.0, 0.0]),
            probe([0.2, 0.0]),
            probe([0.25, 0.0]),
            probe([0.25, 0.25]),
            probe([0.35, 0.0]),
            probe([0.45, 0.0]),
            recon
        );
    }
}

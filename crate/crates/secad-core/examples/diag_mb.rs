//! Minibatch-stepping probe: 8192 points per epoch, chunked Adam steps.
use secad_core::losses::{build_total_loss, sketch_supervision, LossConfig};
use secad_core::model::{CodeRef, SecadModel};
use secad_core::tape::{AdamConfig, AdamState, Tape};
use secad_core::trainer::volumetric_iou;
use secad_core::voxel::{SampleBatch, SamplePlan, ShapeSpec, VoxelGrid};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let chunk: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(512);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(300);
    let grid = VoxelGrid::synthesize(
        &ShapeSpec::Cuboid { center: [0.0; 3], half_extents: [0.25; 3] },
        64,
    )
    .unwrap();
    let plan = SamplePlan::new(&grid).unwrap();
    let cfg = LossConfig::<f64>::default();
    let mut model = SecadModel::init_with_disk(Default::default(), 1, 11, 0.282);
    let mut adam = AdamState::new(AdamConfig::default(), model.layout().total());
    let mut tape = Tape::new();
    for epoch in 0..epochs {
        let batch: SampleBatch<f64> =
            plan.sample(&grid, 8192, 0.5, secad_core::trainer::epoch_seed(11, epoch, 0));
        let mut recon_sum = 0.0;
        let mut nsteps = 0;
        for start in (0..batch.len()).step_by(chunk) {
            let end = (start + chunk).min(batch.len());
            let sub = SampleBatch {
                points: batch.points[start..end].to_vec(),
                targets: batch.targets[start..end].to_vec(),
            };
            let sup = sketch_supervision(&model, 0, &grid, &sub, &cfg);
            let mut recon = 0.0;
            let (_, grads) = tape
                .evaluate(&model.params, true, |ctx| {
                    let v = build_total_loss(ctx, &model, &CodeRef::Stored(0), &sub, &sup, &cfg)?;
                    recon = v.recon;
                    Ok(v.total)
                })
                .unwrap();
            adam.step(&mut model.params, &grads.unwrap()).unwrap();
            recon_sum += recon;
            nsteps += 1;
        }
        if epoch % 25 == 0 || epoch == epochs - 1 {
            let s0 = model.sketch_sdf(0, [0.0, 0.0], CodeRef::Stored(0)).unwrap();
            let s25 = model.sketch_sdf(0, [0.25, 0.0], CodeRef::Stored(0)).unwrap();
            let s45 = model.sketch_sdf(0, [0.45, 0.0], CodeRef::Stored(0)).unwrap();
            println!(
                "epoch {epoch:4}  recon {:.4}  s(0) {:7.3}  s(.25) {:7.3}  s(.45) {:7.3}",
                recon_sum / nsteps as f64, s0, s25, s45
            );
        }
    }
    let iou = volumetric_iou(&model, 0, &grid, &cfg.field()).unwrap();
    println!("chunk {chunk}: IoU {iou:.4}");
}

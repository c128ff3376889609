//! Gradient-direction diagnostic at a frozen training state.
use secad_core::losses::{build_total_loss, sketch_supervision, LossConfig};
use secad_core::model::{CodeRef, SecadModel};
use secad_core::tape::{AdamConfig, AdamState, Tape};
use secad_core::voxel::{SampleBatch, SamplePlan, ShapeSpec, VoxelGrid};

fn main() {
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
    let b4 = model.layout().by_name("head0.b4").unwrap();
    let w4 = model.layout().by_name("head0.w4").unwrap();
    let layout = model.layout().clone();
    for epoch in 0..40 {
        let batch: SampleBatch<f64> =
            plan.sample(&grid, 8192, 0.5, secad_core::trainer::epoch_seed(11, epoch, 0));
        let sup = sketch_supervision(&model, 0, &grid, &batch, &cfg);
        let mut parts = (0.0, 0.0);
        let (_, grads) = tape
            .evaluate(&model.params, true, |ctx| {
                let v = build_total_loss(ctx, &model, &CodeRef::Stored(0), &batch, &sup, &cfg)?;
                parts = (v.recon, v.sketch);
                Ok(v.total)
            })
            .unwrap();
        let grads = grads.unwrap();
        let seg_b4 = layout.seg(b4);
        let g_b4 = grads[seg_b4.offset];
        let seg_w4 = layout.seg(w4);
        let gw = &grads[seg_w4.offset..seg_w4.offset + seg_w4.len()];
        let pos = gw.iter().filter(|&&g| g > 0.0).count();
        let s0 = model.sketch_sdf(0, [0.0, 0.0], CodeRef::Stored(0)).unwrap();
        if epoch < 10 || epoch % 10 == 0 {
            println!(
                "ep {epoch:3} s(0) {s0:7.4}  g(b4) {g_b4:+.3e}  w4 grads +:{pos}/128  recon {:.4} sketch {:.4}",
                parts.0, parts.1
            );
        }
        adam.step(&mut model.params, &grads).unwrap();
    }
}

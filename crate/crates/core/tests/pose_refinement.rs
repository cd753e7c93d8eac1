//! Joint pose refinement on a coarse simulated subject.

use svrecon::acquisition::Dataset;
use svrecon::cinr::CinrModel;
use svrecon::geometry::{norm, sub, RigidTransform};
use svrecon::pipeline::{compact_model_config, compact_train_config};
use svrecon::simulator::{perturb_transforms, simulate, BenchmarkSpec, MotionSpec};
use svrecon::trainer::{train, TrainConfig};

fn mean_translation_error(a: &[RigidTransform], b: &[RigidTransform]) -> f64 {
    a.iter().zip(b).map(|(x, y)| norm(sub(x.translation, y.translation))).sum::<f64>() / a.len() as f64
}

#[test]
fn refinement_reduces_translation_error() {
    let spec = BenchmarkSpec {
        dims: 48,
        spacing: 1.6,
        r1: 1.6,
        r3: 3.2,
        k_sim: 32,
        motion: MotionSpec::none(),
        ..BenchmarkSpec::default()
    };
    let sim = simulate(&spec).unwrap();
    let truth: Vec<RigidTransform> = sim.stacks.iter().flat_map(|s| s.truth.clone()).collect();
    let mut data = Dataset::new(sim.stacks()).unwrap();
    data.transforms = perturb_transforms(&truth, 1.0 / 3f64.sqrt(), 0.0, 7).unwrap();
    data.sync_stacks();
    let before = mean_translation_error(&data.transforms, &truth);
    let cfg = TrainConfig {
        iterations: 1000,
        refine_transforms: true,
        transform_lr: 1e-3,
        ..compact_train_config()
    };
    let mut model = CinrModel::new(compact_model_config(), data.domain().unwrap(), data.n_slices(), 0).unwrap();
    train(&mut model, &mut data, &cfg, None).unwrap();
    let after = mean_translation_error(&data.transforms, &truth);
    eprintln!("mean translation error {before:.3} -> {after:.3} mm");
    assert!(after < before, "{before} -> {after}");
}

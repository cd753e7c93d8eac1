//! Shared fixtures for the benchmarks.

use svrecon::acquisition::Dataset;
use svrecon::cinr::CinrModel;
use svrecon::pipeline::compact_model_config;
use svrecon::simulator::{simulate, BenchmarkSpec, MotionSpec};

/// A 48³ phantom seen by three 1.6 mm stacks, with a freshly initialized compact model.
pub fn fixture() -> (Dataset, CinrModel) {
    let spec = BenchmarkSpec {
        dims: 48,
        spacing: 1.6,
        r1: 1.6,
        r3: 4.8,
        k_sim: 16,
        motion: MotionSpec::mild(0),
        ..BenchmarkSpec::default()
    };
    let sim = simulate(&spec).expect("simulate fixture");
    let data = Dataset::new(sim.stacks()).expect("dataset");
    let model = CinrModel::new(compact_model_config(), data.domain().expect("domain"), data.n_slices(), 0)
        .expect("model");
    (data, model)
}

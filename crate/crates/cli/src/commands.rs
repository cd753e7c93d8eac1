use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use svrecon::acquisition::{default_render_grid, render_volume, Dataset, DEFAULT_VOXEL_BUDGET};
use svrecon::cinr::CinrModel;
use svrecon::metrics;
use svrecon::pipeline::{compact_model_config, compact_train_config, refine_with_model};
use svrecon::simulator::{perturb_transforms, simulate_oriented, BenchmarkSpec, MotionSpec, PhantomSpec};
use svrecon::trainer::train;
use svrecon::vdsg::NoiseConfig;
use svrecon::volio::{
    load_checkpoint, parse_config, read_volume, save_checkpoint, write_stack_bundle, write_transforms,
    write_volume, RunConfig, TransformSet, TRUTH_FILE,
};
use svrecon::volume::Orientation;
use svrecon::Error;

use crate::args::{
    Command, EvaluateArgs, MotionPreset, Plane, ReconstructArgs, RefineArgs, RenderArgs, SimulateArgs,
};

pub const PHANTOM_FILE: &str = "phantom.nii";

#[derive(Debug)]
pub enum Failure {
    /// Bad flags or input descriptions (exit 1).
    Usage(anyhow::Error),
    /// Everything else (exit 2).
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidParam(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(_) | Error::InvalidParam(_)) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Refine(a) => refine(a),
        Command::Render(a) => render(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

fn plane(p: Plane) -> Orientation {
    match p {
        Plane::Axial => Orientation::Axial,
        Plane::Coronal => Orientation::Coronal,
        Plane::Sagittal => Orientation::Sagittal,
    }
}

fn simulate(a: SimulateArgs) -> Result<(), Failure> {
    let phantom = match &a.phantom {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading phantom spec {}", p.display()))
                .map_err(Failure::Runtime)?;
            let spec: PhantomSpec = serde_json::from_str(&text)
                .map_err(|e| usage(format!("invalid phantom spec {}: {e}", p.display())))?;
            spec.validate()?;
            spec
        }
        None => PhantomSpec::brain(),
    };
    let orientations: Vec<Orientation> = match &a.orientations {
        Some(list) => {
            if list.len() != a.stacks {
                return Err(usage(format!(
                    "{} orientations given for {} stacks",
                    list.len(),
                    a.stacks
                )));
            }
            list.iter().copied().map(plane).collect()
        }
        None => (0..a.stacks).map(Orientation::nth).collect(),
    };
    let mut spec = BenchmarkSpec {
        phantom,
        dims: a.dims,
        spacing: a.spacing,
        stacks: a.stacks,
        r1: a.r1,
        r3: a.r3,
        k_sim: a.k_sim,
        motion: match a.motion_preset {
            MotionPreset::None => MotionSpec::none(),
            MotionPreset::Mild => MotionSpec::mild(0),
            MotionPreset::Severe => MotionSpec::severe(0),
        },
        seed: a.seed,
        ..BenchmarkSpec::default()
    };
    spec.corruption.noise_sigma = a.noise;
    spec.corruption.bias_scale = a.bias_scale;
    spec.corruption.scale_jitter = a.scale_jitter;
    spec.corruption.validate()?;
    if a.dims == 0 || !(a.spacing > 0.0) {
        return Err(usage("--dims and --spacing must be positive"));
    }
    let sim = simulate_oriented(&spec, &orientations)?;
    let mut stacks = sim.stacks();
    let truth = TransformSet::from_stacks(&stacks);
    if a.perturb_mm > 0.0 || a.perturb_deg > 0.0 {
        for (i, s) in stacks.iter_mut().enumerate() {
            let key = a.seed.wrapping_add(i as u64);
            s.transforms = perturb_transforms(&s.transforms, a.perturb_mm, a.perturb_deg, key)?;
        }
    }
    write_stack_bundle(&stacks, &a.out)?;
    write_transforms(&truth, &a.out.join(TRUTH_FILE))?;
    write_volume(&sim.phantom, &a.out.join(PHANTOM_FILE))?;
    log::info!("wrote {} stacks to {}", stacks.len(), a.out.display());
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn run_config(a: &ReconstructArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if a.compact {
        let c = compact_train_config();
        cfg.model = compact_model_config();
        cfg.train.batch_size = c.batch_size;
        cfg.train.psf_samples = c.psf_samples;
        if a.config.is_none() {
            cfg.train.iterations = c.iterations;
        }
    }
    if let Some(n) = a.iters {
        cfg.train.iterations = n;
    }
    if let Some(r) = a.resolution {
        cfg.resolution = r;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if a.refine_transforms {
        cfg.train.refine_transforms = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn reconstruct(a: ReconstructArgs) -> Result<(), Failure> {
    let cfg = run_config(&a)?;
    let stacks = svrecon::volio::read_stack_bundle(&a.stacks)
        .with_context(|| format!("reading stack bundle {}", a.stacks.display()))?;
    let mut data = Dataset::new(stacks)?;
    let mut model = CinrModel::new(cfg.model.clone(), data.domain()?, data.n_slices(), cfg.train.seed)?;
    if a.no_consistency_branch {
        model.disable_coordinate_branch();
    }
    let report = train(&mut model, &mut data, &cfg.train, None)?;
    save_checkpoint(&model, &a.out)?;
    let loss_csv = a.loss_csv.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    report.write_csv(&loss_csv)?;
    let grid = default_render_grid(&model, cfg.resolution)?;
    let v0 = render_volume(&model, &grid, DEFAULT_VOXEL_BUDGET)?;
    if let Some(p) = &a.cinr_volume {
        write_volume(&v0, p)?;
    }
    if a.no_vdsg {
        write_volume(&v0, &a.volume)?;
    } else {
        let (out, _) = refine_with_model(&model, &v0, cfg.alpha0, cfg.steps, &cfg.noise, cfg.train.seed)?;
        write_volume(&out.rescaled, &a.volume)?;
    }
    log::info!(
        "trained {} iterations; volume {:?} at {} mm",
        cfg.train.iterations,
        grid.dims,
        cfg.resolution
    );
    Ok(())
}

fn load(path: &Path) -> Result<CinrModel, Failure> {
    load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(Failure::Runtime)
}

fn refine(a: RefineArgs) -> Result<(), Failure> {
    let noise = NoiseConfig {
        iterations: a.noise_iters,
        batch: a.noise_batch,
        lr: a.noise_lr,
    };
    if noise.batch == 0 || !(noise.lr > 0.0) {
        return Err(usage("--noise-batch and --noise-lr must be positive"));
    }
    svrecon::vdsg::make_schedule(a.alpha0, a.steps)?;
    let model = load(&a.checkpoint)?;
    let grid = default_render_grid(&model, a.resolution)?;
    let v0 = render_volume(&model, &grid, DEFAULT_VOXEL_BUDGET)?;
    let (out, trace) = refine_with_model(&model, &v0, a.alpha0, a.steps, &noise, a.seed)?;
    let literal = a.literal_out.clone().unwrap_or_else(|| with_suffix(&a.out, ".literal.nii"));
    write_volume(&out.rescaled, &a.out)?;
    write_volume(&out.combined, &literal)?;
    if let Some(last) = trace.last() {
        log::info!("noise head final loss {last:.3e}");
    }
    Ok(())
}

fn render(a: RenderArgs) -> Result<(), Failure> {
    let model = load(&a.checkpoint)?;
    let grid = default_render_grid(&model, a.resolution)?;
    let vol = render_volume(&model, &grid, DEFAULT_VOXEL_BUDGET)?;
    write_volume(&vol, &a.out)?;
    println!("{} {} {}", grid.dims[0], grid.dims[1], grid.dims[2]);
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let reference = read_volume(&a.reference)?;
    let test = read_volume(&a.test)?;
    let report = metrics::evaluate(&reference, &test, a.range)?;
    let row = (a.reference.display().to_string(), a.test.display().to_string(), report);
    metrics::write_csv(std::slice::from_ref(&row), &a.out)?;
    println!("{}", metrics::CSV_HEADER);
    println!("{}", metrics::csv_row(&row.0, &row.1, &row.2));
    Ok(())
}

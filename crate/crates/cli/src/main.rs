use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use meshfield::geometry::{Bvh, Vec3};
use meshfield::head::{FaceParams, HeadModelAssets};
use meshfield::io::{
    load_assets, load_dataset, load_params, make_synthetic, Checkpoint, IoError, RunConfig, SyntheticSpec,
    TEST_MANIFEST, TRAIN_MANIFEST,
};
use meshfield::metrics::{psnr, ssim};
use meshfield::render::{render_image, Camera, FieldScene, RenderSettings};
use meshfield::retarget::{render_retargeted, RetargetDensity, RetargetOptions};
use meshfield::train::{TrainError, TrainState, Trainer};

/// Failure reported as `error[<kind>]: <message>` on one line.
#[derive(Debug)]
struct CliError {
    kind: String,
    message: String,
}

impl CliError {
    fn new(kind: impl Into<String>, message: impl Display) -> Self {
        Self {
            kind: kind.into(),
            message: message.to_string(),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        Self::new(e.kind(), e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match e {
            TrainError::NonFinite { .. } => "non-finite-loss",
            TrainError::Config(_) => "malformed-config",
            TrainError::Dataset(_) => "malformed-manifest",
            _ => "train",
        };
        Self::new(kind, e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e)
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DensityArg {
    Analytic,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

impl Split {
    fn manifest(self) -> &'static str {
        match self {
            Split::Train => TRAIN_MANIFEST,
            Split::Test => TEST_MANIFEST,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "meshfield", version, about = "Mesh-driven radiance fields for parametric heads")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON run configuration; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory holding the manifests and head model.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Head model file; defaults to `<data>/head.bin`.
    #[arg(long, global = true)]
    assets: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mouth_filter: Option<Toggle>,
    #[arg(long, global = true, value_enum)]
    retarget_density: Option<DensityArg>,
    #[arg(long, global = true)]
    iters: Option<usize>,
    #[arg(long, global = true)]
    eps0: Option<f64>,
    #[arg(long, global = true)]
    eps_final: Option<f64>,
    #[arg(long, global = true)]
    phase_switch: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a toy-head dataset with known face parameters.
    MakeSynthetic {
        #[arg(long, default_value_t = 100)]
        views: usize,
        #[arg(long, default_value_t = 20)]
        heldout: usize,
        #[arg(long, default_value_t = 200)]
        size: u32,
        /// Depth samples per ray for the ground-truth renders.
        #[arg(long, default_value_t = 512)]
        samples: usize,
    },
    /// Fit the field and face parameters to the training split.
    Train,
    /// Render novel views from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Render the cameras of this split.
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Render an orbit of this many views instead of a dataset split.
        #[arg(long)]
        orbit: Option<usize>,
        #[arg(long, default_value_t = 200)]
        size: u32,
    },
    /// Render a trained head under new expressions and poses.
    Animate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON array of keyframes; each may set any of beta, psi, phi.
        #[arg(long)]
        keyframes: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Camera index within the split.
        #[arg(long, default_value_t = 0)]
        view: usize,
    },
    /// PSNR and SSIM per view as CSV.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Write the fitted mesh as Wavefront OBJ.
    ExportMesh {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Export these parameters instead of the checkpoint's.
        #[arg(long)]
        params: Option<PathBuf>,
    },
}

fn run_config(g: &Global) -> CliResult<RunConfig> {
    let mut c = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        c.train.seed = s;
        c.render.seed = s;
    }
    if let Some(o) = &g.out {
        c.out_dir = o.clone();
    }
    if let Some(d) = &g.data {
        c.data_dir = d.clone();
    }
    if let Some(a) = &g.assets {
        c.assets = Some(a.clone());
    }
    if let Some(m) = g.mouth_filter {
        c.mouth_filter = m == Toggle::On;
    }
    if let Some(d) = g.retarget_density {
        c.retarget_density = match d {
            DensityArg::Analytic => RetargetDensity::Analytic,
            DensityArg::Learned => RetargetDensity::Learned,
        };
    }
    if let Some(n) = g.iters {
        c.train.total_iters = n;
    }
    if let Some(e) = g.eps0 {
        c.train.eps0 = e;
    }
    if let Some(e) = g.eps_final {
        c.train.eps_final = e;
    }
    if let Some(p) = g.phase_switch {
        c.train.phase_switch_iter = p;
    }
    c.validate()?;
    Ok(c)
}

/// Deterministic settings for image output.
fn eval_settings(c: &RunConfig) -> RenderSettings {
    RenderSettings {
        stratified: false,
        ..c.render
    }
}

fn checkpoint_path(c: &RunConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| c.out_dir.join("checkpoint.bin"))
}

fn load_model(c: &RunConfig, flag: &Option<PathBuf>) -> CliResult<(Checkpoint, HeadModelAssets)> {
    let ck = Checkpoint::load(&checkpoint_path(c, flag))?;
    let assets = load_assets(&c.assets_path())?;
    ck.check_assets(&assets)?;
    Ok((ck, assets))
}

fn split_cameras(c: &RunConfig, split: Split) -> CliResult<Vec<Camera>> {
    Ok(load_dataset(&c.data_dir.join(split.manifest()))?
        .frames()
        .iter()
        .map(|f| f.camera)
        .collect())
}

fn orbit_cameras(n: usize, size: u32) -> Vec<Camera> {
    let spec = SyntheticSpec::default();
    let focal = 0.5 * size as f64 / (0.5 * spec.fov_x).tan();
    (0..n)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / n as f64;
            let eye = Vec3::new(a.sin(), 0.25, a.cos()).normalize() * spec.camera_radius;
            Camera::look_at(size, size, focal, eye, Vec3::zeros(), Vec3::y()).expect("orbit pose is rigid")
        })
        .collect()
}

fn save_image(img: &meshfield::render::RgbaImage, path: &Path) -> CliResult<()> {
    img.save_png(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn cmd_make_synthetic(c: &RunConfig, views: usize, heldout: usize, size: u32, samples: usize) -> CliResult<()> {
    let spec = SyntheticSpec {
        n_views: views,
        n_heldout: heldout,
        size,
        seed: c.train.seed,
        samples_per_ray: samples,
        ..SyntheticSpec::default()
    };
    make_synthetic(&c.out_dir, &spec)?;
    println!("wrote {} views to {}", views, c.out_dir.display());
    Ok(())
}

fn cmd_train(c: &RunConfig) -> CliResult<()> {
    let assets = load_assets(&c.assets_path())?;
    let dataset = load_dataset(&c.data_dir.join(TRAIN_MANIFEST))?;
    fs::create_dir_all(&c.out_dir)?;
    fs::write(c.out_dir.join("config.json"), c.to_json())?;
    let trainer = Trainer::new(&assets, &dataset, c.train, c.render)?;
    let mut state = TrainState::new(&assets, &c.train)?;
    let ck_path = c.out_dir.join("checkpoint.bin");
    let mut log = std::io::BufWriter::new(fs::File::create(c.out_dir.join("train_log.csv"))?);
    writeln!(log, "iteration,loss,epsilon,phase")?;
    let mut failure: Option<CliError> = None;
    trainer.run(&mut state, c.train.total_iters, |s, st| {
        if failure.is_some() {
            return;
        }
        let line = writeln!(log, "{},{:e},{},{:?}", st.iteration, st.loss, st.epsilon, st.phase);
        if let Err(e) = line {
            failure = Some(e.into());
        }
        if st.iteration % 100 == 0 {
            log::info!("iter {} loss {:.4e} eps {:.4} {:?}", st.iteration, st.loss, st.epsilon, st.phase);
        }
        if st.iteration % c.checkpoint_every == 0 {
            if let Err(e) = Checkpoint::from_state(s).save(&ck_path) {
                failure = Some(e.into());
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    log.flush()?;
    Checkpoint::from_state(&state).save(&ck_path)?;
    println!("trained {} iterations; checkpoint {}", state.iteration, ck_path.display());
    Ok(())
}

fn cmd_render(c: &RunConfig, checkpoint: &Option<PathBuf>, split: Split, orbit: Option<usize>, size: u32) -> CliResult<()> {
    let (ck, assets) = load_model(c, checkpoint)?;
    let cams = match orbit {
        Some(n) => orbit_cameras(n, size),
        None => split_cameras(c, split)?,
    };
    let mesh = assets.deform(&ck.params).map_err(|e| CliError::new("head", e))?;
    let bvh = Bvh::build(&mesh);
    let scene = FieldScene::new(&ck.field, &mesh, &bvh);
    let settings = eval_settings(c);
    fs::create_dir_all(&c.out_dir)?;
    for (k, cam) in cams.iter().enumerate() {
        save_image(&render_image(&scene, cam, &settings), &c.out_dir.join(format!("render_{k:03}.png")))?;
    }
    println!("rendered {} views to {}", cams.len(), c.out_dir.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Keyframe {
    beta: Option<Vec<f64>>,
    psi: Option<Vec<f64>>,
    phi: Option<Vec<f64>>,
}

fn cmd_animate(c: &RunConfig, checkpoint: &Option<PathBuf>, keyframes: &Path, split: Split, view: usize) -> CliResult<()> {
    let (ck, assets) = load_model(c, checkpoint)?;
    if !keyframes.exists() {
        return Err(CliError::new("missing-keyframes", format!("keyframes not found: {}", keyframes.display())));
    }
    let text = fs::read_to_string(keyframes)?;
    let frames: Vec<Keyframe> =
        serde_json::from_str(&text).map_err(|e| CliError::new("malformed-keyframes", format!("{}: {e}", keyframes.display())))?;
    let cams = split_cameras(c, split)?;
    let cam = cams
        .get(view)
        .ok_or_else(|| CliError::new("bad-view", format!("view {view} out of range ({} cameras)", cams.len())))?;
    let options = RetargetOptions {
        density: c.retarget_density,
        mouth_filter: c.mouth_filter,
    };
    let settings = eval_settings(c);
    fs::create_dir_all(&c.out_dir)?;
    for (k, kf) in frames.into_iter().enumerate() {
        let params = FaceParams {
            beta: kf.beta.unwrap_or_else(|| ck.params.beta.clone()),
            psi: kf.psi.unwrap_or_else(|| ck.params.psi.clone()),
            phi: kf.phi.unwrap_or_else(|| ck.params.phi.clone()),
        };
        params
            .check(&assets)
            .map_err(|e| CliError::new("malformed-keyframes", format!("keyframe {k}: {e}")))?;
        let img = render_retargeted(&ck.field, &assets, &ck.params, &params, cam, &settings, options)
            .map_err(|e| CliError::new("retarget", e))?;
        save_image(&img, &c.out_dir.join(format!("frame_{k:03}.png")))?;
    }
    println!("animated {} to {}", keyframes.display(), c.out_dir.display());
    Ok(())
}

fn cmd_eval(c: &RunConfig, checkpoint: &Option<PathBuf>, split: Split) -> CliResult<()> {
    let (ck, assets) = load_model(c, checkpoint)?;
    let dataset = load_dataset(&c.data_dir.join(split.manifest()))?;
    let mesh = assets.deform(&ck.params).map_err(|e| CliError::new("head", e))?;
    let bvh = Bvh::build(&mesh);
    let scene = FieldScene::new(&ck.field, &mesh, &bvh);
    let settings = eval_settings(c);
    let bg = settings.background.rgb();
    let mut csv = String::from("view,psnr,ssim\n");
    let (mut sp, mut ss) = (0.0, 0.0);
    for (k, f) in dataset.frames().iter().enumerate() {
        let img = render_image(&scene, &f.camera, &settings);
        let p = psnr(&img, &f.image, bg).map_err(|e| CliError::new("metrics", e))?;
        let s = ssim(&img, &f.image, bg).map_err(|e| CliError::new("metrics", e))?;
        csv.push_str(&format!("{k},{p:.6},{s:.6}\n"));
        sp += p;
        ss += s;
    }
    let n = dataset.frames().len() as f64;
    csv.push_str(&format!("mean,{:.6},{:.6}\n", sp / n, ss / n));
    fs::create_dir_all(&c.out_dir)?;
    fs::write(c.out_dir.join("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_export_mesh(c: &RunConfig, checkpoint: &Option<PathBuf>, params: &Option<PathBuf>) -> CliResult<()> {
    let (ck, assets) = load_model(c, checkpoint)?;
    let p = match params {
        Some(path) => load_params(path, &assets)?,
        None => ck.params,
    };
    let mesh = assets.deform(&p).map_err(|e| CliError::new("head", e))?;
    fs::create_dir_all(&c.out_dir)?;
    let path = c.out_dir.join("mesh.obj");
    mesh.write_obj(std::io::BufWriter::new(fs::File::create(&path)?))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let c = run_config(&cli.global)?;
    match &cli.command {
        Command::MakeSynthetic {
            views,
            heldout,
            size,
            samples,
        } => cmd_make_synthetic(&c, *views, *heldout, *size, *samples),
        Command::Train => cmd_train(&c),
        Command::Render {
            checkpoint,
            split,
            orbit,
            size,
        } => cmd_render(&c, checkpoint, *split, *orbit, *size),
        Command::Animate {
            checkpoint,
            keyframes,
            split,
            view,
        } => cmd_animate(&c, checkpoint, keyframes, *split, *view),
        Command::Eval { checkpoint, split } => cmd_eval(&c, checkpoint, *split),
        Command::ExportMesh { checkpoint, params } => cmd_export_mesh(&c, checkpoint, params),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("error[usage]: {}", one_line(&first));
            return ExitCode::from(2);
        }
    };
    if let Ok(v) = std::env::var("MESHFIELD_THREADS") {
        let n = match v.parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error[malformed-config]: MESHFIELD_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        };
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error[threads]: {}", one_line(&e.to_string()));
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind, one_line(&e.message));
            ExitCode::FAILURE
        }
    }
}

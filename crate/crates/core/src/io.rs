//! Checkpoints, scene manifests, run configuration and synthetic datasets.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{ArrayData, Container, ContainerError, NamedArray};
use crate::field::{FieldConfig, Phase, RadianceField};
use crate::geometry::{Bvh, Vec3};
use crate::head::{make_toy_head, FaceParams, HeadModelAssets, TOY_HEAD_JOINT};
use crate::render::{render_image, AnalyticScene, Background, Camera, RenderSettings, RgbaImage};
use crate::retarget::RetargetDensity;
use crate::train::{Dataset, Frame, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &str = "MESHFIELD-CKPT v1";
pub const ASSETS_FILE: &str = "head.bin";
pub const GT_PARAMS_FILE: &str = "gt_params.json";
pub const TRAIN_MANIFEST: &str = "transforms_train.json";
pub const TEST_MANIFEST: &str = "transforms_test.json";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{what} not found: {}", path.display())]
    Missing { what: &'static str, path: PathBuf },
    #[error("malformed config: {0}")]
    Config(String),
    #[error("malformed manifest {}: {reason}", path.display())]
    Manifest { path: PathBuf, reason: String },
    #[error("checkpoint does not match assets: {0}")]
    Mismatch(String),
    #[error("unreadable checkpoint: {0}")]
    Checkpoint(String),
    #[error("image {}: {reason}", path.display())]
    Image { path: PathBuf, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl IoError {
    /// Short machine-readable category.
    pub fn kind(&self) -> String {
        match self {
            IoError::Missing { what, .. } => format!("missing-{what}"),
            IoError::Config(_) => "malformed-config".into(),
            IoError::Manifest { .. } => "malformed-manifest".into(),
            IoError::Mismatch(_) => "checkpoint-asset-mismatch".into(),
            IoError::Checkpoint(_) => "bad-checkpoint".into(),
            IoError::Image { .. } => "bad-image".into(),
            IoError::Io(_) => "io".into(),
        }
    }
}

fn require(path: &Path, what: &'static str) -> Result<(), IoError> {
    if path.exists() {
        Ok(())
    } else {
        Err(IoError::Missing {
            what,
            path: path.to_path_buf(),
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, value).map_err(|e| IoError::Io(e.into()))
}

pub fn load_assets(path: &Path) -> Result<HeadModelAssets, IoError> {
    require(path, "assets")?;
    HeadModelAssets::load(path).map_err(|e| IoError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_params(path: &Path, assets: &HeadModelAssets) -> Result<FaceParams, IoError> {
    require(path, "params")?;
    let p: FaceParams = serde_json::from_reader(BufReader::new(File::open(path)?))
        .map_err(|e| IoError::Config(format!("{}: {e}", path.display())))?;
    p.check(assets).map_err(|e| IoError::Mismatch(e.to_string()))?;
    Ok(p)
}

pub fn save_params(path: &Path, params: &FaceParams) -> Result<(), IoError> {
    write_json(path, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    iteration: usize,
    epsilon: f64,
    phase: Phase,
    field: FieldConfig,
    num_vertices: usize,
    num_triangles: usize,
}

/// Trained field plus the face parameters it was fitted with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub field: RadianceField,
    pub params: FaceParams,
    pub num_vertices: usize,
    pub num_triangles: usize,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            iteration: state.iteration,
            field: state.field.clone(),
            params: state.params.clone(),
            num_vertices: state.mesh.vertices().len(),
            num_triangles: state.mesh.triangle_count(),
        }
    }

    pub fn to_container(&self) -> Container {
        let meta = CheckpointMeta {
            iteration: self.iteration,
            epsilon: self.field.epsilon(),
            phase: self.field.phase,
            field: self.field.config(),
            num_vertices: self.num_vertices,
            num_triangles: self.num_triangles,
        };
        let mut c = Container::new(CHECKPOINT_MAGIC);
        c.metadata = serde_json::to_string(&meta).expect("metadata serializes");
        self.field.write_arrays(&mut c);
        for (name, v) in [("face.beta", &self.params.beta), ("face.psi", &self.params.psi), ("face.phi", &self.params.phi)] {
            c.push(NamedArray::new(name, vec![v.len()], ArrayData::F64(v.clone())));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, IoError> {
        let bad = |e: String| IoError::Checkpoint(e);
        let meta: CheckpointMeta = serde_json::from_str(&c.metadata).map_err(|e| bad(format!("metadata: {e}")))?;
        let field = RadianceField::read_arrays(&meta.field, meta.epsilon, meta.phase, c).map_err(|e| bad(e.to_string()))?;
        let get = |name: &str| -> Result<Vec<f64>, IoError> {
            Ok(c.get(name).and_then(|a| a.as_f64()).map_err(|e: ContainerError| bad(e.to_string()))?.to_vec())
        };
        Ok(Self {
            iteration: meta.iteration,
            field,
            params: FaceParams {
                beta: get("face.beta")?,
                psi: get("face.psi")?,
                phi: get("face.phi")?,
            },
            num_vertices: meta.num_vertices,
            num_triangles: meta.num_triangles,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        self.to_container().write_to(BufWriter::new(File::create(path)?)).map_err(|e| match e {
            ContainerError::Io(e) => IoError::Io(e),
            e => IoError::Checkpoint(e.to_string()),
        })
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        require(path, "checkpoint")?;
        let c = Container::read_from(BufReader::new(File::open(path)?), CHECKPOINT_MAGIC)
            .map_err(|e| IoError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_container(&c)
    }

    /// Fails when the checkpoint was trained on a different head model.
    pub fn check_assets(&self, assets: &HeadModelAssets) -> Result<(), IoError> {
        if self.num_vertices != assets.num_vertices() || self.num_triangles != assets.triangles().len() {
            return Err(IoError::Mismatch(format!(
                "checkpoint mesh has {} vertices / {} triangles, assets have {} / {}",
                self.num_vertices,
                self.num_triangles,
                assets.num_vertices(),
                assets.triangles().len()
            )));
        }
        self.params.check(assets).map_err(|e| IoError::Mismatch(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
}

/// Per-split camera list in the synthetic-NeRF `transforms_*.json` layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub camera_angle_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<u32>,
    pub frames: Vec<ManifestFrame>,
}

fn to_rows(m: &Matrix4<f64>) -> [[f64; 4]; 4] {
    let mut r = [[0.0; 4]; 4];
    for (i, row) in r.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[(i, j)];
        }
    }
    r
}

/// Projects a nearly rigid pose onto the closest rotation; `None` if it is off by more than 1e-4.
pub fn rigidify(rows: &[[f64; 4]; 4]) -> Option<Matrix4<f64>> {
    let m = Matrix4::from_fn(|i, j| rows[i][j]);
    let r = m.fixed_view::<3, 3>(0, 0).into_owned();
    if (r.transpose() * r - nalgebra::Matrix3::identity()).abs().max() > 1e-4 || (r.determinant() - 1.0).abs() > 1e-4 {
        return None;
    }
    let svd = r.svd(true, true);
    let clean = svd.u? * svd.v_t?;
    let mut out = m;
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&clean);
    out.fixed_view_mut::<1, 4>(3, 0).copy_from(&nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0));
    Some(out)
}

impl SceneManifest {
    pub fn load(path: &Path) -> Result<Self, IoError> {
        require(path, "manifest")?;
        serde_json::from_reader(BufReader::new(File::open(path)?)).map_err(|e| IoError::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write_json(path, self)
    }

    /// Image path for a frame, relative to the manifest's directory; `.png` is
    /// appended when the entry has no extension.
    pub fn frame_path(base: &Path, frame: &ManifestFrame) -> PathBuf {
        let p = base.join(frame.file_path.trim_start_matches("./"));
        if p.extension().is_none() {
            p.with_extension("png")
        } else {
            p
        }
    }
}

/// Loads every frame of a manifest into a dataset.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, IoError> {
    let manifest = SceneManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let bad = |reason: String| IoError::Manifest {
        path: manifest_path.to_path_buf(),
        reason,
    };
    if manifest.frames.is_empty() {
        return Err(bad("no frames".into()));
    }
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (k, f) in manifest.frames.iter().enumerate() {
        let path = SceneManifest::frame_path(base, f);
        require(&path, "image")?;
        let image = RgbaImage::load_png(&path).map_err(|e| IoError::Image {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if manifest.w.is_some_and(|w| w != image.width) || manifest.h.is_some_and(|h| h != image.height) {
            return Err(bad(format!("frame {k} size differs from the declared size")));
        }
        let c2w = rigidify(&f.transform_matrix).ok_or_else(|| bad(format!("frame {k}: transform is not rigid")))?;
        let camera = Camera::from_fov(image.width, image.height, manifest.camera_angle_x, c2w)
            .map_err(|e| bad(format!("frame {k}: {e}")))?;
        frames.push(Frame { image, camera });
    }
    Dataset::new(frames).map_err(|e| bad(e.to_string()))
}

/// Everything a training or rendering run needs, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub render: RenderSettings,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Head model; defaults to `<data_dir>/head.bin`.
    pub assets: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub mouth_filter: bool,
    pub retarget_density: RetargetDensity,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            render: SyntheticSpec::default().render_settings(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            assets: None,
            checkpoint_every: 1000,
            mouth_filter: false,
            retarget_density: RetargetDensity::Analytic,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), IoError> {
        self.train.validate().map_err(|e| IoError::Config(e.to_string()))?;
        if self.render.samples_per_ray == 0 {
            return Err(IoError::Config("samples_per_ray must be at least 1".into()));
        }
        if !(self.render.near < self.render.far) {
            return Err(IoError::Config("render.near must be below render.far".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(IoError::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, IoError> {
        let c: Self = serde_json::from_str(text).map_err(|e| IoError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        require(path, "config")?;
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn assets_path(&self) -> PathBuf {
        self.assets.clone().unwrap_or_else(|| self.data_dir.join(ASSETS_FILE))
    }
}

/// Parameters of a generated toy-head scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_views: usize,
    pub n_heldout: usize,
    pub size: u32,
    pub seed: u64,
    pub subdivisions: u32,
    /// Shell width of the ground-truth density.
    pub epsilon: f64,
    pub samples_per_ray: usize,
    pub camera_radius: f64,
    pub fov_x: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_views: 100,
            n_heldout: 20,
            size: 200,
            seed: 0,
            subdivisions: 3,
            epsilon: 0.02,
            samples_per_ray: 512,
            camera_radius: 4.0,
            fov_x: 0.6,
        }
    }
}

impl SyntheticSpec {
    /// Ray range that brackets the head from every camera on the sphere.
    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            samples_per_ray: 128,
            stratified: true,
            background: Background::Transparent,
            seed: self.seed,
            near: self.camera_radius - 1.4,
            far: self.camera_radius + 1.4,
            shell_clipping: true,
        }
    }

    /// Ground-truth face parameters drawn from the seed.
    pub fn ground_truth(&self, assets: &HeadModelAssets) -> FaceParams {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6774);
        let mut p = FaceParams::zeros(assets);
        for b in p.beta.iter_mut() {
            *b = rng.gen_range(-0.15..0.15);
        }
        for e in p.psi.iter_mut() {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            *e = sign * rng.gen_range(0.3..0.7);
        }
        for k in 0..3 {
            p.phi[3 * TOY_HEAD_JOINT + k] = rng.gen_range(-0.08..0.08);
        }
        p
    }

    /// Random viewpoints on a sphere around the head, biased to the front.
    pub fn cameras(&self) -> Vec<Camera> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xca3e);
        let focal = 0.5 * self.size as f64 / (0.5 * self.fov_x).tan();
        let mut out = Vec::with_capacity(self.n_views);
        while out.len() < self.n_views {
            let d = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let n = d.norm();
            if !(0.1..=1.0).contains(&n) {
                continue;
            }
            let d = d / n;
            if d.z < -0.3 || d.y.abs() > 0.9 {
                continue;
            }
            let cam = Camera::look_at(self.size, self.size, focal, d * self.camera_radius, Vec3::zeros(), Vec3::y())
                .expect("look-at pose is rigid");
            out.push(cam);
        }
        out
    }
}

/// Writes a toy-head scene to `out`: head model, ground-truth parameters,
/// RGBA views and one manifest per split. Returns the ground-truth parameters.
pub fn make_synthetic(out: &Path, spec: &SyntheticSpec) -> Result<FaceParams, IoError> {
    if spec.n_heldout >= spec.n_views {
        return Err(IoError::Config("n_heldout must be below n_views".into()));
    }
    fs::create_dir_all(out.join("images"))?;
    let assets = make_toy_head(spec.subdivisions, spec.seed);
    assets
        .save(&out.join(ASSETS_FILE))
        .map_err(|e| IoError::Checkpoint(e.to_string()))?;
    let gt = spec.ground_truth(&assets);
    save_params(&out.join(GT_PARAMS_FILE), &gt)?;
    let mesh = assets.deform(&gt).map_err(|e| IoError::Config(e.to_string()))?;
    let bvh = Bvh::build(&mesh);
    let scene = AnalyticScene::new(&mesh, &bvh, spec.epsilon);
    let settings = RenderSettings {
        samples_per_ray: spec.samples_per_ray,
        stratified: false,
        ..spec.render_settings()
    };
    let n_train = spec.n_views - spec.n_heldout;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (k, cam) in spec.cameras().iter().enumerate() {
        let (split, idx, list) = if k < n_train {
            ("train", k, &mut train)
        } else {
            ("test", k - n_train, &mut test)
        };
        let name = format!("images/{split}_{idx:03}");
        let img = render_image(&scene, cam, &settings);
        let path = out.join(format!("{name}.png"));
        img.save_png(&path).map_err(|e| IoError::Image {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        list.push(ManifestFrame {
            file_path: format!("./{name}"),
            transform_matrix: to_rows(&cam.c2w),
        });
    }
    for (file, frames) in [(TRAIN_MANIFEST, train), (TEST_MANIFEST, test)] {
        SceneManifest {
            camera_angle_x: spec.fov_x,
            w: Some(spec.size),
            h: Some(spec.size),
            frames,
        }
        .save(&out.join(file))?;
    }
    Ok(gt)
}

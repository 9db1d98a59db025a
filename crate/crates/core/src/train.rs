//! Two-phase fitting of the field and the face parameters.
//!
//! Phase 1 uses the distance density and updates network and face parameters
//! together. Phase 2 freezes the face parameters, switches to the learned
//! density and widens the shell linearly up to its final width.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldConfig, FieldError, FieldGrads, Mlp, Phase, RadianceField, ShellSample};
use crate::geometry::{Bvh, Region, TriangleMesh, Vec3};
use crate::head::{FaceParams, HeadError, HeadModelAssets};
use crate::render::{composite, composite_backward, ray_rng, sample_deltas, sample_stratified, Camera, RenderSettings, RgbaImage};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("non-finite loss {loss} at iteration {iteration} (epsilon {epsilon}, face params {params:?})")]
    NonFinite {
        iteration: usize,
        loss: f64,
        epsilon: f64,
        params: Vec<f64>,
    },
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rays_per_batch: usize,
    pub lr_net: f64,
    pub lr_face: f64,
    pub adam: AdamConfig,
    pub total_iters: usize,
    pub phase_switch_iter: usize,
    pub eps0: f64,
    pub eps_final: f64,
    pub seed: u64,
    pub field: FieldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rays_per_batch: 1024,
            lr_net: 5e-4,
            lr_face: 5e-3,
            adam: AdamConfig::default(),
            total_iters: 20_000,
            phase_switch_iter: 10_000,
            eps0: 0.02,
            eps_final: 0.1,
            seed: 0,
            field: FieldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.eps0 > 0.0 && self.eps0 <= self.eps_final && self.eps_final.is_finite()) {
            return bad("need 0 < eps0 <= eps_final");
        }
        if self.phase_switch_iter > self.total_iters {
            return bad("phase_switch_iter exceeds total_iters");
        }
        if self.rays_per_batch == 0 {
            return bad("rays_per_batch must be positive");
        }
        if !(self.lr_net >= 0.0 && self.lr_face >= 0.0) {
            return bad("learning rates must be nonnegative");
        }
        Ok(())
    }
}

/// Shell width used by step `iter` (steps are numbered from 1).
pub fn epsilon_schedule(iter: usize, cfg: &TrainConfig) -> f64 {
    if iter <= cfg.phase_switch_iter || cfg.total_iters == cfg.phase_switch_iter {
        return cfg.eps0;
    }
    let s = ((iter - cfg.phase_switch_iter) as f64 / (cfg.total_iters - cfg.phase_switch_iter) as f64).min(1.0);
    (1.0 - s) * cfg.eps0 + s * cfg.eps_final
}

pub fn phase_at(iter: usize, cfg: &TrainConfig) -> Phase {
    if iter <= cfg.phase_switch_iter {
        Phase::DistanceDensity
    } else {
        Phase::LearnedDensity
    }
}

/// Sum of squared errors over rays, and its gradient `2 (rendered - target)`.
pub fn photometric_loss(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> (f64, Vec<[f64; 3]>) {
    assert_eq!(rendered.len(), target.len(), "batch sizes differ");
    let mut loss = 0.0;
    let grads = rendered
        .iter()
        .zip(target)
        .map(|(r, t)| {
            let d = [r[0] - t[0], r[1] - t[1], r[2] - t[2]];
            loss += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            [2.0 * d[0], 2.0 * d[1], 2.0 * d[2]]
        })
        .collect();
    (loss, grads)
}

/// Bias-corrected Adam; `step` is the 1-based update count.
pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powf(step as f64);
    let c2 = 1.0 - cfg.beta2.powf(step as f64);
    for i in 0..params.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grads[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
    }
}

fn adam_mlp(net: &mut Mlp, grads: &Mlp, m: &mut Mlp, v: &mut Mlp, step: u64, lr: f64, cfg: &AdamConfig) {
    for (((p, g), m), v) in net
        .buffers_mut()
        .into_iter()
        .zip(grads.buffers())
        .zip(m.buffers_mut())
        .zip(v.buffers_mut())
    {
        adam_update(p, g, m, v, step, lr, cfg);
    }
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub image: RgbaImage,
    pub camera: Camera,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    frames: Vec<Frame>,
    width: u32,
    height: u32,
}

impl Dataset {
    pub fn new(frames: Vec<Frame>) -> Result<Self, TrainError> {
        let first = frames.first().ok_or_else(|| TrainError::Dataset("no frames".into()))?;
        let (width, height) = (first.image.width, first.image.height);
        for (k, f) in frames.iter().enumerate() {
            if (f.image.width, f.image.height) != (width, height) {
                return Err(TrainError::Dataset(format!(
                    "frame {k} is {}x{}, expected {width}x{height}",
                    f.image.width, f.image.height
                )));
            }
            if (f.camera.width, f.camera.height) != (width, height) {
                return Err(TrainError::Dataset(format!("frame {k}: camera size differs from image size")));
            }
        }
        Ok(Self { frames, width, height })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixels_per_frame(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Target color over `bg` at a pixel.
    pub fn target(&self, p: PixelRef, bg: [f64; 3]) -> [f64; 3] {
        let c = self.frames[p.frame].image.pixels[p.pixel];
        let a = c[3];
        [c[0] * a + bg[0] * (1.0 - a), c[1] * a + bg[1] * (1.0 - a), c[2] * a + bg[2] * (1.0 - a)]
    }

    pub fn ray(&self, p: PixelRef, settings: &RenderSettings) -> crate::geometry::Ray {
        let cam = &self.frames[p.frame].camera;
        let w = self.width as usize;
        cam.pixel_ray((p.pixel % w) as u32, (p.pixel / w) as u32, settings.near, settings.far)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRef {
    pub frame: usize,
    pub pixel: usize,
}

#[derive(Debug, Clone)]
pub struct AdamMoments {
    pub color_m: Mlp,
    pub color_v: Mlp,
    pub density_m: Mlp,
    pub density_v: Mlp,
    pub face_m: Vec<f64>,
    pub face_v: Vec<f64>,
    pub color_steps: u64,
    pub density_steps: u64,
    pub face_steps: u64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Number of completed steps.
    pub iteration: usize,
    pub field: RadianceField,
    pub params: FaceParams,
    pub moments: AdamMoments,
    pub epsilon: f64,
    pub mesh: TriangleMesh,
    pub bvh: Bvh,
}

impl TrainState {
    pub fn new(assets: &HeadModelAssets, cfg: &TrainConfig) -> Result<Self, TrainError> {
        Self::with_params(assets, cfg, FaceParams::zeros(assets))
    }

    pub fn with_params(assets: &HeadModelAssets, cfg: &TrainConfig, params: FaceParams) -> Result<Self, TrainError> {
        cfg.validate()?;
        params.check(assets)?;
        let field = RadianceField::new(&cfg.field, cfg.eps0, cfg.seed)?;
        let mesh = assets.deform(&params)?;
        let bvh = Bvh::build(&mesh);
        let n = params.to_flat().len();
        let moments = AdamMoments {
            color_m: field.color_net.zeros_like(),
            color_v: field.color_net.zeros_like(),
            density_m: field.density_net.zeros_like(),
            density_v: field.density_net.zeros_like(),
            face_m: vec![0.0; n],
            face_v: vec![0.0; n],
            color_steps: 0,
            density_steps: 0,
            face_steps: 0,
        };
        Ok(Self {
            iteration: 0,
            field,
            params,
            moments,
            epsilon: cfg.eps0,
            mesh,
            bvh,
        })
    }
}

/// Rebuilds the mesh and its BVH from the current face parameters.
pub fn mesh_refresh(state: &mut TrainState, assets: &HeadModelAssets) -> Result<(), TrainError> {
    state.mesh = assets.deform(&state.params)?;
    state.bvh = Bvh::build(&state.mesh);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub iteration: usize,
    pub loss: f64,
    pub epsilon: f64,
    pub phase: Phase,
}

/// Loss and gradients of one batch.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub loss: f64,
    pub field_grads: FieldGrads,
    /// Gradient with respect to the flat face parameters (zero in phase 2).
    pub face_grads: Vec<f64>,
    /// Closest triangle and region of every shell sample, in order.
    pub shell: Vec<(usize, Region)>,
    /// Network activation patterns, in order.
    pub patterns: Vec<bool>,
}

struct ChunkOut {
    loss: f64,
    grads: FieldGrads,
    vertex_grads: Vec<Vec3>,
    shell: Vec<(usize, Region)>,
    patterns: Vec<bool>,
}

/// Rays per parallel work item; fixed so the reduction order never depends on threads.
const CHUNK_RAYS: usize = 64;

pub struct Trainer<'a> {
    pub assets: &'a HeadModelAssets,
    pub dataset: &'a Dataset,
    pub config: TrainConfig,
    pub render: RenderSettings,
}

impl<'a> Trainer<'a> {
    pub fn new(assets: &'a HeadModelAssets, dataset: &'a Dataset, config: TrainConfig, render: RenderSettings) -> Result<Self, TrainError> {
        config.validate()?;
        Ok(Self {
            assets,
            dataset,
            config,
            render,
        })
    }

    /// Uniform batch over (image, pixel) for step `iter`.
    pub fn sample_batch(&self, iter: usize) -> Vec<PixelRef> {
        let mut rng = ray_rng(self.config.seed ^ 0xB47C_4000_0000_0000, iter as u64);
        let nf = self.dataset.frames().len();
        let np = self.dataset.pixels_per_frame();
        (0..self.config.rays_per_batch)
            .map(|_| PixelRef {
                frame: rng.gen_range(0..nf),
                pixel: rng.gen_range(0..np),
            })
            .collect()
    }

    fn eval_chunk(&self, state: &TrainState, pixels: &[PixelRef], key: u64, offset: usize) -> ChunkOut {
        let s = &self.render;
        let bg = s.background.rgb();
        let eps = state.field.epsilon();
        let n = s.samples_per_ray.max(1);
        let mut samples = Vec::new();
        let mut owners = Vec::new();
        let mut rays = Vec::with_capacity(pixels.len());
        for (r, p) in pixels.iter().enumerate() {
            let ray = self.dataset.ray(*p, s);
            let mut rng = ray_rng(key, (offset + r) as u64);
            let ts = sample_stratified(&ray, n, s.stratified, &mut rng);
            let window = if s.shell_clipping {
                state.bvh.shell_interval(&ray, eps)
            } else {
                Some((f64::NEG_INFINITY, f64::INFINITY))
            };
            if let Some((lo, hi)) = window {
                for (i, &t) in ts.iter().enumerate() {
                    if t < lo || t > hi {
                        continue;
                    }
                    let x = ray.at(t);
                    if let Some(sp) = state.bvh.closest_point_within(&state.mesh, &x, eps) {
                        samples.push(ShellSample { x, surface: sp });
                        owners.push((r, i));
                    }
                }
            }
            rays.push((ray, ts));
        }
        let batch = state.field.forward(&samples, None);

        let mut sigma = vec![vec![0.0; n]; pixels.len()];
        let mut color = vec![vec![[0.0; 3]; n]; pixels.len()];
        for (k, &(r, i)) in owners.iter().enumerate() {
            sigma[r][i] = batch.sigma[k];
            color[r][i] = batch.rgb[k];
        }
        let mut loss = 0.0;
        let mut d_sigma_all = Vec::with_capacity(pixels.len());
        let mut d_col_all = Vec::with_capacity(pixels.len());
        for (r, (ray, ts)) in rays.iter().enumerate() {
            let delta = sample_deltas(ts, ray.t_far);
            let comp = composite(&sigma[r], &color[r], &delta);
            let pix = [
                comp.rgb[0] + (1.0 - comp.alpha) * bg[0],
                comp.rgb[1] + (1.0 - comp.alpha) * bg[1],
                comp.rgb[2] + (1.0 - comp.alpha) * bg[2],
            ];
            let target = self.dataset.target(pixels[r], bg);
            let (l, g) = photometric_loss(&[pix], &[target]);
            loss += l;
            let g = g[0];
            let d_alpha = -(g[0] * bg[0] + g[1] * bg[1] + g[2] * bg[2]);
            let (ds, dc) = composite_backward(&sigma[r], &color[r], &delta, &comp, g, d_alpha);
            d_sigma_all.push(ds);
            d_col_all.push(dc);
        }
        let d_sigma: Vec<f64> = owners.iter().map(|&(r, i)| d_sigma_all[r][i]).collect();
        let d_rgb: Vec<[f64; 3]> = owners.iter().map(|&(r, i)| d_col_all[r][i]).collect();

        let mut grads = state.field.zero_grads();
        let mut vertex_grads = vec![Vec3::zeros(); state.mesh.vertices().len()];
        let vg = match state.field.phase {
            Phase::DistanceDensity => Some((&state.mesh, vertex_grads.as_mut_slice())),
            Phase::LearnedDensity => None,
        };
        state.field.backward(&samples, &batch, &d_sigma, &d_rgb, &mut grads, vg);
        let mut patterns = batch.color_pattern();
        patterns.extend(batch.density_pattern());
        ChunkOut {
            loss,
            grads,
            vertex_grads,
            shell: samples.iter().map(|s| (s.surface.triangle_id, s.surface.region)).collect(),
            patterns,
        }
    }

    /// Loss and gradients for `pixels` with depth samples drawn from `key`.
    pub fn evaluate(&self, state: &TrainState, pixels: &[PixelRef], key: u64) -> Result<BatchEval, TrainError> {
        let chunks: Vec<ChunkOut> = pixels
            .par_chunks(CHUNK_RAYS)
            .enumerate()
            .map(|(c, px)| self.eval_chunk(state, px, key, c * CHUNK_RAYS))
            .collect();
        let mut loss = 0.0;
        let mut grads = state.field.zero_grads();
        let mut vertex_grads = vec![Vec3::zeros(); state.mesh.vertices().len()];
        let mut shell = Vec::new();
        let mut patterns = Vec::new();
        for c in chunks {
            loss += c.loss;
            grads.add_assign(&c.grads);
            for (a, b) in vertex_grads.iter_mut().zip(&c.vertex_grads) {
                *a += b;
            }
            shell.extend(c.shell);
            patterns.extend(c.patterns);
        }
        let face_grads = match state.field.phase {
            Phase::DistanceDensity => self.assets.deform_jacobian(&state.params)?.pull_back(&vertex_grads),
            Phase::LearnedDensity => vec![0.0; state.params.to_flat().len()],
        };
        Ok(BatchEval {
            loss,
            field_grads: grads,
            face_grads,
            shell,
            patterns,
        })
    }

    fn step_key(&self, iter: usize) -> u64 {
        self.config.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (iter as u64)
    }

    /// One optimization step on a freshly sampled batch.
    pub fn train_step(&self, state: &mut TrainState) -> Result<StepStats, TrainError> {
        let iter = state.iteration + 1;
        let pixels = self.sample_batch(iter);
        self.step_on(state, &pixels)
    }

    /// One optimization step on a given batch.
    pub fn step_on(&self, state: &mut TrainState, pixels: &[PixelRef]) -> Result<StepStats, TrainError> {
        let cfg = &self.config;
        let iter = state.iteration + 1;
        let phase = phase_at(iter, cfg);
        let epsilon = epsilon_schedule(iter, cfg);
        state.field.phase = phase;
        state.field.set_epsilon(epsilon)?;
        state.epsilon = epsilon;

        let eval = self.evaluate(state, pixels, self.step_key(iter))?;
        if !eval.loss.is_finite() || !eval.field_grads.is_finite() || eval.face_grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite {
                iteration: iter,
                loss: eval.loss,
                epsilon,
                params: state.params.to_flat(),
            });
        }

        let m = &mut state.moments;
        m.color_steps += 1;
        adam_mlp(
            &mut state.field.color_net,
            &eval.field_grads.color,
            &mut m.color_m,
            &mut m.color_v,
            m.color_steps,
            cfg.lr_net,
            &cfg.adam,
        );
        match phase {
            Phase::DistanceDensity => {
                m.face_steps += 1;
                let mut flat = state.params.to_flat();
                adam_update(&mut flat, &eval.face_grads, &mut m.face_m, &mut m.face_v, m.face_steps, cfg.lr_face, &cfg.adam);
                state.params = FaceParams::from_flat(&flat, self.assets);
                mesh_refresh(state, self.assets)?;
            }
            Phase::LearnedDensity => {
                m.density_steps += 1;
                adam_mlp(
                    &mut state.field.density_net,
                    &eval.field_grads.density,
                    &mut m.density_m,
                    &mut m.density_v,
                    m.density_steps,
                    cfg.lr_net,
                    &cfg.adam,
                );
            }
        }
        state.iteration = iter;
        Ok(StepStats {
            iteration: iter,
            loss: eval.loss,
            epsilon,
            phase,
        })
    }

    /// Runs steps until `state.iteration` reaches `until`, calling `on_step` after each.
    pub fn run(
        &self,
        state: &mut TrainState,
        until: usize,
        mut on_step: impl FnMut(&TrainState, &StepStats),
    ) -> Result<(), TrainError> {
        while state.iteration < until.min(self.config.total_iters) {
            let stats = self.train_step(state)?;
            on_step(state, &stats);
        }
        Ok(())
    }
}

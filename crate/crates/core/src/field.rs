//! Hybrid radiance field: density is an explicit function of the distance to
//! the head mesh (or, in the second training phase, a small MLP gated by that
//! distance); color is an MLP over the encoded position.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{ArrayData, Container, ContainerError, NamedArray};
use crate::geometry::{distance_gradient, Bvh, SurfacePoint, TriangleMesh, Vec3};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("network config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            num_frequencies: 6,
            include_input: true,
        }
    }
}

impl EncodingConfig {
    pub fn width(&self) -> usize {
        3 * (2 * self.num_frequencies + usize::from(self.include_input))
    }
}

/// Frequency encoding: `x` (optional) followed by `sin(2^k pi x), cos(2^k pi x)` for `k < L`.
pub fn encode(x: &Vec3, cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.width());
    encode_into(x, cfg, &mut out);
    out
}

fn encode_into(x: &Vec3, cfg: &EncodingConfig, out: &mut Vec<f64>) {
    if cfg.include_input {
        out.extend_from_slice(x.as_slice());
    }
    let mut freq = std::f64::consts::PI;
    for _ in 0..cfg.num_frequencies {
        out.extend(x.iter().map(|v| (freq * v).sin()));
        out.extend(x.iter().map(|v| (freq * v).cos()));
        freq *= 2.0;
    }
}

fn encode_batch(points: &[Vec3], cfg: &EncodingConfig) -> DMatrix<f64> {
    let mut data = Vec::with_capacity(points.len() * cfg.width());
    for p in points {
        encode_into(p, cfg, &mut data);
    }
    DMatrix::from_vec(cfg.width(), points.len(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden_layers: usize,
    pub width: usize,
    /// Hidden layer whose input is the previous activation concatenated with the network input.
    pub skip_layer: Option<usize>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 6,
            width: 128,
            skip_layer: Some(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: DMatrix::zeros(out, inp),
            bias: DVector::zeros(out),
        }
    }
}

/// Fully connected ReLU network with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    config: MlpConfig,
    input_dim: usize,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl MlpTape {
    /// ReLU on/off pattern of every hidden unit; lets tests detect kink crossings.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden].iter().flat_map(|z| z.iter().map(|v| *v > 0.0)).collect()
    }
}

impl Mlp {
    /// Uniform fan-in initialization, zero biases.
    pub fn new(config: MlpConfig, input_dim: usize, output_dim: usize, rng: &mut impl Rng) -> Result<Self, FieldError> {
        if let Some(s) = config.skip_layer {
            if s == 0 || s >= config.hidden_layers {
                return Err(FieldError::BadConfig(format!(
                    "skip layer {s} must be in 1..{}",
                    config.hidden_layers
                )));
            }
        }
        if config.hidden_layers > 0 && config.width == 0 {
            return Err(FieldError::BadConfig("hidden width must be positive".into()));
        }
        let mut layers = Vec::with_capacity(config.hidden_layers + 1);
        for l in 0..=config.hidden_layers {
            let (inp, out) = Self::layer_dims(&config, input_dim, output_dim, l);
            let bound = 1.0 / (inp as f64).sqrt();
            let mut d = Dense::zeros(out, inp);
            d.weight.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
            layers.push(d);
        }
        Ok(Self {
            layers,
            config,
            input_dim,
        })
    }

    fn layer_dims(config: &MlpConfig, input_dim: usize, output_dim: usize, l: usize) -> (usize, usize) {
        let inp = if l == 0 {
            input_dim
        } else if config.skip_layer == Some(l) {
            config.width + input_dim
        } else {
            config.width
        };
        let out = if l == config.hidden_layers { output_dim } else { config.width };
        (inp, out)
    }

    pub fn config(&self) -> MlpConfig {
        self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().bias.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|d| Dense::zeros(d.weight.nrows(), d.weight.ncols()))
                .collect(),
            config: self.config,
            input_dim: self.input_dim,
        }
    }

    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|d| d.weight.len() + d.bias.len()).sum()
    }

    /// Every parameter buffer, weights then bias, layer by layer.
    pub fn buffers(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|d| [d.weight.as_slice(), d.bias.as_slice()])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|d| [d.weight.as_mut_slice(), d.bias.as_mut_slice()])
            .collect()
    }

    pub fn add_assign(&mut self, other: &Mlp) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn fill_zero(&mut self) {
        for d in &mut self.layers {
            d.weight.fill(0.0);
            d.bias.fill(0.0);
        }
    }

    /// Batched forward pass; `input` holds one column per point. Returns raw outputs.
    pub fn forward(&self, input: &DMatrix<f64>) -> (DMatrix<f64>, MlpTape) {
        let hidden = self.config.hidden_layers;
        let mut inputs = Vec::with_capacity(hidden + 1);
        let mut pre = Vec::with_capacity(hidden + 1);
        let mut act = input.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let layer_in = if self.config.skip_layer == Some(l) {
                let mut joined = DMatrix::zeros(act.nrows() + input.nrows(), act.ncols());
                joined.rows_mut(0, act.nrows()).copy_from(&act);
                joined.rows_mut(act.nrows(), input.nrows()).copy_from(input);
                joined
            } else {
                act
            };
            let mut z = &layer.weight * &layer_in;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            act = if l < hidden { z.map(|v| v.max(0.0)) } else { z.clone() };
            inputs.push(layer_in);
            pre.push(z);
        }
        (act, MlpTape { inputs, pre })
    }

    /// Accumulates parameter gradients for upstream gradient `d_out` (one column per point).
    pub fn backward(&self, tape: &MlpTape, d_out: DMatrix<f64>, grads: &mut Mlp) {
        let mut dz = d_out;
        for l in (0..self.layers.len()).rev() {
            let g = &mut grads.layers[l];
            g.weight += &dz * tape.inputs[l].transpose();
            for col in dz.column_iter() {
                g.bias += col;
            }
            if l == 0 {
                break;
            }
            let d_in = self.layers[l].weight.transpose() * &dz;
            let width = self.config.width;
            let mut d_hidden = d_in.rows(0, width).into_owned();
            d_hidden.zip_apply(&tape.pre[l - 1], |d, z| {
                if z <= 0.0 {
                    *d = 0.0
                }
            });
            dz = d_hidden;
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Density from the distance to the mesh: `1 - d/eps` inside the shell, exactly 0 outside.
pub fn density_from_distance(d: f64, epsilon: f64) -> f64 {
    if d > epsilon {
        0.0
    } else {
        1.0 - d / epsilon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Density is the distance formula; mesh parameters are trainable.
    DistanceDensity,
    /// Density comes from the density network inside the shell; mesh frozen.
    LearnedDensity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub encoding: EncodingConfig,
    pub color_net: MlpConfig,
    pub density_net: MlpConfig,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            encoding: EncodingConfig::default(),
            color_net: MlpConfig::default(),
            density_net: MlpConfig {
                hidden_layers: 4,
                width: 64,
                skip_layer: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField {
    pub encoding: EncodingConfig,
    pub color_net: Mlp,
    pub density_net: Mlp,
    epsilon: f64,
    pub phase: Phase,
}

/// A sample point inside the shell together with its closest mesh point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShellSample {
    pub x: Vec3,
    pub surface: SurfacePoint,
}

/// Outputs of a batched field evaluation plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct FieldBatch {
    pub sigma: Vec<f64>,
    pub rgb: Vec<[f64; 3]>,
    color_tape: Option<MlpTape>,
    density_tape: Option<(MlpTape, Vec<f64>)>,
    phase: Phase,
}

impl FieldBatch {
    pub fn color_pattern(&self) -> Vec<bool> {
        self.color_tape.as_ref().map(|t| t.activation_pattern()).unwrap_or_default()
    }

    pub fn density_pattern(&self) -> Vec<bool> {
        self.density_tape
            .as_ref()
            .map(|(t, _)| t.activation_pattern())
            .unwrap_or_default()
    }
}

/// Gradients of both networks, shaped like the networks themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrads {
    pub color: Mlp,
    pub density: Mlp,
}

impl FieldGrads {
    pub fn add_assign(&mut self, other: &FieldGrads) {
        self.color.add_assign(&other.color);
        self.density.add_assign(&other.density);
    }

    pub fn is_finite(&self) -> bool {
        self.color
            .buffers()
            .iter()
            .chain(self.density.buffers().iter())
            .all(|b| b.iter().all(|v| v.is_finite()))
    }
}

pub const CHECKPOINT_PREFIX_COLOR: &str = "color";
pub const CHECKPOINT_PREFIX_DENSITY: &str = "density";

impl RadianceField {
    pub fn new(config: &FieldConfig, epsilon: f64, seed: u64) -> Result<Self, FieldError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = config.encoding.width();
        let field = Self {
            encoding: config.encoding,
            color_net: Mlp::new(config.color_net, width, 3, &mut rng)?,
            density_net: Mlp::new(config.density_net, width, 1, &mut rng)?,
            epsilon: 1.0,
            phase: Phase::DistanceDensity,
        };
        field.with_epsilon(epsilon)
    }

    fn with_epsilon(mut self, epsilon: f64) -> Result<Self, FieldError> {
        self.set_epsilon(epsilon)?;
        Ok(self)
    }

    pub fn config(&self) -> FieldConfig {
        FieldConfig {
            encoding: self.encoding,
            color_net: self.color_net.config(),
            density_net: self.density_net.config(),
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn set_epsilon(&mut self, epsilon: f64) -> Result<(), FieldError> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(FieldError::BadEpsilon(epsilon));
        }
        self.epsilon = epsilon;
        Ok(())
    }

    pub fn zero_grads(&self) -> FieldGrads {
        FieldGrads {
            color: self.color_net.zeros_like(),
            density: self.density_net.zeros_like(),
        }
    }

    pub fn color(&self, x: &Vec3) -> [f64; 3] {
        let (raw, _) = self.color_net.forward(&encode_batch(std::slice::from_ref(x), &self.encoding));
        [sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2])]
    }

    pub fn learned_density(&self, x: &Vec3) -> f64 {
        let (raw, _) = self.density_net.forward(&encode_batch(std::slice::from_ref(x), &self.encoding));
        softplus(raw[0])
    }

    /// Distance-formula density at `x`.
    pub fn density_phase1(x: &Vec3, bvh: &Bvh, mesh: &TriangleMesh, epsilon: f64) -> f64 {
        bvh.closest_point_within(mesh, x, epsilon)
            .map_or(0.0, |sp| density_from_distance(sp.distance, epsilon))
    }

    /// Density network gated by the shell: zero outside, softplus output inside.
    pub fn density_phase2(&self, x: &Vec3, bvh: &Bvh, mesh: &TriangleMesh) -> f64 {
        match bvh.closest_point_within(mesh, x, self.epsilon) {
            Some(_) => self.learned_density(x),
            None => 0.0,
        }
    }

    pub fn density(&self, x: &Vec3, bvh: &Bvh, mesh: &TriangleMesh) -> f64 {
        match self.phase {
            Phase::DistanceDensity => Self::density_phase1(x, bvh, mesh, self.epsilon),
            Phase::LearnedDensity => self.density_phase2(x, bvh, mesh),
        }
    }

    /// Evaluates density and color at shell samples. Color is looked up at
    /// `color_points` when given (retargeted positions), else at the sample positions.
    pub fn forward(&self, samples: &[ShellSample], color_points: Option<&[Vec3]>) -> FieldBatch {
        let own: Vec<Vec3>;
        let points = match color_points {
            Some(p) => p,
            None => {
                own = samples.iter().map(|s| s.x).collect();
                &own
            }
        };
        if samples.is_empty() {
            return FieldBatch {
                sigma: vec![],
                rgb: vec![],
                color_tape: None,
                density_tape: None,
                phase: self.phase,
            };
        }
        let enc = encode_batch(points, &self.encoding);
        let (raw, color_tape) = self.color_net.forward(&enc);
        let rgb = raw
            .column_iter()
            .map(|c| [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])])
            .collect();
        let (sigma, density_tape) = match self.phase {
            Phase::DistanceDensity => (
                samples
                    .iter()
                    .map(|s| density_from_distance(s.surface.distance, self.epsilon))
                    .collect(),
                None,
            ),
            Phase::LearnedDensity => {
                let (raw, tape) = self.density_net.forward(&enc);
                let z: Vec<f64> = raw.iter().copied().collect();
                (z.iter().map(|&v| softplus(v)).collect(), Some((tape, z)))
            }
        };
        FieldBatch {
            sigma,
            rgb,
            color_tape: Some(color_tape),
            density_tape,
            phase: self.phase,
        }
    }

    /// Reverse pass for [`RadianceField::forward`].
    ///
    /// Network gradients accumulate into `grads`. In the distance-density phase
    /// the density gradient also flows through `d(x, M)` into `vertex_grads`;
    /// in the learned-density phase the mesh receives nothing.
    pub fn backward(
        &self,
        samples: &[ShellSample],
        batch: &FieldBatch,
        d_sigma: &[f64],
        d_rgb: &[[f64; 3]],
        grads: &mut FieldGrads,
        vertex_grads: Option<(&TriangleMesh, &mut [Vec3])>,
    ) {
        if samples.is_empty() {
            return;
        }
        let n = samples.len();
        let mut d_raw = DMatrix::zeros(3, n);
        for (i, (c, g)) in batch.rgb.iter().zip(d_rgb).enumerate() {
            for k in 0..3 {
                d_raw[(k, i)] = g[k] * c[k] * (1.0 - c[k]);
            }
        }
        self.color_net
            .backward(batch.color_tape.as_ref().unwrap(), d_raw, &mut grads.color);
        match batch.phase {
            Phase::DistanceDensity => {
                if let Some((mesh, vg)) = vertex_grads {
                    for (s, &ds) in samples.iter().zip(d_sigma) {
                        // sigma = 1 - d/eps inside the shell.
                        if ds == 0.0 || s.surface.distance > self.epsilon {
                            continue;
                        }
                        let Ok(g) = distance_gradient(&s.surface, &s.x) else {
                            continue;
                        };
                        let scale = -ds / self.epsilon;
                        let tri = mesh.triangles()[s.surface.triangle_id];
                        for k in 0..3 {
                            vg[tri[k] as usize] += g.wrt_vertices[k] * scale;
                        }
                    }
                }
            }
            Phase::LearnedDensity => {
                let (tape, z) = batch.density_tape.as_ref().unwrap();
                let d = DMatrix::from_iterator(1, n, z.iter().zip(d_sigma).map(|(&z, &g)| g * sigmoid(z)));
                self.density_net.backward(tape, d, &mut grads.density);
            }
        }
    }

    pub fn write_arrays(&self, c: &mut Container) {
        for (prefix, net) in [
            (CHECKPOINT_PREFIX_COLOR, &self.color_net),
            (CHECKPOINT_PREFIX_DENSITY, &self.density_net),
        ] {
            for (l, d) in net.layers.iter().enumerate() {
                c.push(NamedArray::new(
                    &format!("{prefix}.{l}.weight"),
                    vec![d.weight.nrows(), d.weight.ncols()],
                    ArrayData::F64(d.weight.transpose().as_slice().to_vec()),
                ));
                c.push(NamedArray::new(
                    &format!("{prefix}.{l}.bias"),
                    vec![d.bias.len()],
                    ArrayData::F64(d.bias.as_slice().to_vec()),
                ));
            }
        }
    }

    pub fn read_arrays(config: &FieldConfig, epsilon: f64, phase: Phase, c: &Container) -> Result<Self, FieldError> {
        let mut field = Self::new(config, epsilon, 0)?;
        field.phase = phase;
        for (prefix, net) in [
            (CHECKPOINT_PREFIX_COLOR, &mut field.color_net),
            (CHECKPOINT_PREFIX_DENSITY, &mut field.density_net),
        ] {
            for (l, d) in net.layers.iter_mut().enumerate() {
                let (rows, cols) = (d.weight.nrows(), d.weight.ncols());
                let w = c.get(&format!("{prefix}.{l}.weight"))?;
                w.expect_shape(&[Some(rows), Some(cols)])?;
                d.weight = DMatrix::from_row_slice(rows, cols, w.as_f64()?);
                let b = c.get(&format!("{prefix}.{l}.bias"))?;
                b.expect_shape(&[Some(rows)])?;
                d.bias = DVector::from_column_slice(b.as_f64()?);
            }
        }
        Ok(field)
    }
}

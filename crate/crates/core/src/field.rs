//! The unconstrained radiance field: a multi-resolution hash encoding shared
//! by a density MLP (exponential head) and a color MLP (sigmoid head).
//!
//! Color does not depend on the viewing direction. All parameters live in a
//! single [`ParamStore`]; the field itself only holds the layout.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grad::{GradAccumulator, Layout, ParamStore};
use crate::math::{axpy, dot, Real, Vec3};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FieldError {
    #[error("invalid field configuration: {0}")]
    Config(String),
    #[error("parameter store has {got} values, field expects {expected}")]
    ParamCount { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashGridConfig {
    pub n_levels: usize,
    pub features_per_level: usize,
    pub table_size_log2: u32,
    pub base_resolution: usize,
    pub finest_resolution: usize,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            n_levels: 16,
            features_per_level: 2,
            table_size_log2: 19,
            base_resolution: 16,
            finest_resolution: 2048,
            bbox_min: [-1.0; 3],
            bbox_max: [1.0; 3],
        }
    }
}

impl HashGridConfig {
    pub fn output_dim(&self) -> usize {
        self.n_levels * self.features_per_level
    }

    /// Geometric progression from the base to the finest resolution.
    pub fn level_resolutions(&self) -> Vec<usize> {
        if self.n_levels == 1 {
            return vec![self.base_resolution];
        }
        let growth =
            ((self.finest_resolution as f64).ln() - (self.base_resolution as f64).ln()) / (self.n_levels - 1) as f64;
        (0..self.n_levels)
            .map(|l| {
                let r = (self.base_resolution as f64 * (growth * l as f64).exp() + 1e-9).floor();
                (r as usize).max(1)
            })
            .collect()
    }

    fn validate(&self) -> Result<(), FieldError> {
        if self.n_levels == 0 || self.features_per_level == 0 {
            return Err(FieldError::Config("hash grid needs at least one level and feature".into()));
        }
        if !(1..=26).contains(&self.table_size_log2) {
            return Err(FieldError::Config("table_size_log2 must be in 1..=26".into()));
        }
        if self.base_resolution == 0 || self.finest_resolution < self.base_resolution {
            return Err(FieldError::Config("need 1 <= base_resolution <= finest_resolution".into()));
        }
        for k in 0..3 {
            if !(self.bbox_max[k] > self.bbox_min[k]) {
                return Err(FieldError::Config("bounding box must have positive extent".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    /// Number of linear layers, the output layer included.
    pub n_layers: usize,
    pub hidden_dim: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { n_layers: 3, hidden_dim: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    pub density_mlp: MlpConfig,
    pub color_mlp: MlpConfig,
    /// Initial density pre-activation; `exp(-1)` gives a light fog.
    pub density_bias_init: f64,
    pub hash_init_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid: HashGridConfig::default(),
            density_mlp: MlpConfig::default(),
            color_mlp: MlpConfig::default(),
            density_bias_init: -1.0,
            hash_init_scale: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
struct Level {
    resolution: usize,
    offset: usize,
    entries: usize,
    dense: bool,
}

#[derive(Clone, Debug)]
struct LinearLayer {
    fan_in: usize,
    fan_out: usize,
    /// `fan_in` rows of `fan_out` weights.
    weight: Range<usize>,
    bias: Range<usize>,
}

/// Layers at most this wide skip the vectorized row kernels.
const NARROW: usize = 4;

#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<LinearLayer>,
}

impl Mlp {
    fn build(layout: &mut Layout, name: &str, cfg: &MlpConfig, d_in: usize, d_out: usize) -> Self {
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let fan_in = if l == 0 { d_in } else { cfg.hidden_dim };
            let fan_out = if l + 1 == cfg.n_layers { d_out } else { cfg.hidden_dim };
            let weight = layout.push(format!("{name}.{l}.weight"), fan_in * fan_out);
            let bias = layout.push(format!("{name}.{l}.bias"), fan_out);
            layers.push(LinearLayer { fan_in, fan_out, weight, bias });
        }
        Self { layers }
    }

    /// Runs the MLP, storing every layer's output (post-ReLU for hidden
    /// layers, raw for the last) in `acts`.
    fn forward<S: Real>(&self, p: &[S], input: &[S], acts: &mut [Vec<S>]) {
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, rest) = acts.split_at_mut(l);
            let x: &[S] = if l == 0 { input } else { &before[l - 1] };
            let out = &mut rest[0];
            out.clear();
            out.extend_from_slice(&p[layer.bias.clone()]);
            let w = &p[layer.weight.clone()];
            let fo = layer.fan_out;
            if fo <= NARROW {
                // Column-wise sums; same order as the row-wise branch.
                for (o, acc) in out.iter_mut().enumerate() {
                    for (j, &xj) in x.iter().enumerate() {
                        if xj != S::ZERO {
                            *acc += xj * w[j * fo + o];
                        }
                    }
                }
            } else {
                for (j, &xj) in x.iter().enumerate() {
                    if xj != S::ZERO {
                        axpy(xj, &w[j * fo..(j + 1) * fo], out);
                    }
                }
            }
            if l + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = v.max(S::ZERO));
            }
        }
    }

    /// Backpropagates `g_out` (gradient w.r.t. the raw output), accumulating
    /// parameter gradients and adding the input gradient into `g_input`.
    fn backward<S: Real>(
        &self,
        p: &[S],
        input: &[S],
        acts: &[Vec<S>],
        g_out: &[S],
        g_input: &mut [S],
        tmp: &mut [Vec<S>; 2],
        grads: &mut [S],
    ) {
        let [cur, next] = tmp;
        cur.clear();
        cur.extend_from_slice(g_out);
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let x: &[S] = if l == 0 { input } else { &acts[l - 1] };
            axpy(S::ONE, cur, &mut grads[layer.bias.clone()]);
            let w = &p[layer.weight.clone()];
            let gw = &mut grads[layer.weight.clone()];
            let fo = layer.fan_out;
            let row_dot = |j: usize| -> S {
                let row = &w[j * fo..(j + 1) * fo];
                if fo <= NARROW {
                    row.iter().zip(cur.iter()).fold(S::ZERO, |a, (&u, &v)| a + u * v)
                } else {
                    dot(row, cur)
                }
            };
            for (j, &xj) in x.iter().enumerate() {
                if xj != S::ZERO {
                    let g = &mut gw[j * fo..(j + 1) * fo];
                    if fo <= NARROW {
                        for (gi, &c) in g.iter_mut().zip(cur.iter()) {
                            *gi += xj * c;
                        }
                    } else {
                        axpy(xj, cur, g);
                    }
                }
            }
            if l == 0 {
                for (j, gi) in g_input.iter_mut().enumerate() {
                    *gi += row_dot(j);
                }
            } else {
                next.clear();
                for j in 0..layer.fan_in {
                    // ReLU mask: the stored activation is zero exactly where
                    // the pre-activation was clamped.
                    let g = if x[j] > S::ZERO { row_dot(j) } else { S::ZERO };
                    next.push(g);
                }
                std::mem::swap(cur, next);
            }
        }
    }
}

/// Raw (unconstrained) field output at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawSample<S> {
    pub sigma: S,
    /// Only meaningful when color was requested.
    pub color: [S; 3],
}

/// Reusable per-thread buffers holding the forward cache of the last
/// evaluated point.
#[derive(Clone, Debug, Default)]
pub struct FieldScratch<S> {
    /// `(table index, weight)` for 8 corners per level.
    corners: Vec<(usize, S)>,
    enc: Vec<S>,
    density_acts: Vec<Vec<S>>,
    color_acts: Vec<Vec<S>>,
    g_enc: Vec<S>,
    tmp: [Vec<S>; 2],
    has_color: bool,
}

#[derive(Clone, Debug)]
pub struct RadianceField {
    config: FieldConfig,
    levels: Vec<Level>,
    hash: Range<usize>,
    density: Mlp,
    color: Mlp,
    layout: Layout,
}

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

impl RadianceField {
    pub fn new(config: FieldConfig) -> Result<Self, FieldError> {
        config.grid.validate()?;
        for mlp in [&config.density_mlp, &config.color_mlp] {
            if mlp.n_layers == 0 || mlp.hidden_dim == 0 {
                return Err(FieldError::Config("MLPs need at least one layer and unit".into()));
            }
        }
        let table_size = 1usize << config.grid.table_size_log2;
        let f = config.grid.features_per_level;
        let mut levels = Vec::new();
        let mut offset = 0;
        for res in config.grid.level_resolutions() {
            let vertices = (res + 1).pow(3);
            let dense = vertices <= table_size;
            let entries = if dense { vertices } else { table_size };
            levels.push(Level { resolution: res, offset, entries, dense });
            offset += entries * f;
        }
        let mut layout = Layout::new();
        let hash = layout.push("hash_grid", offset);
        let enc_dim = config.grid.output_dim();
        let density = Mlp::build(&mut layout, "density_mlp", &config.density_mlp, enc_dim, 1);
        let color = Mlp::build(&mut layout, "color_mlp", &config.color_mlp, enc_dim, 3);
        Ok(Self { config, levels, hash, density, color, layout })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.layout.total()
    }

    pub fn encoding_dim(&self) -> usize {
        self.config.grid.output_dim()
    }

    pub fn check_params<S: Real>(&self, params: &ParamStore<S>) -> Result<(), FieldError> {
        if params.len() != self.n_params() {
            return Err(FieldError::ParamCount { expected: self.n_params(), got: params.len() });
        }
        Ok(())
    }

    /// Hash entries uniform in `±hash_init_scale`, MLP weights
    /// Kaiming-uniform by fan-in, zero biases except the density head.
    pub fn init_params<S: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<S> {
        let mut params = ParamStore::zeros(self.layout.clone());
        let v = &mut params.values;
        let h = self.config.hash_init_scale;
        for x in &mut v[self.hash.clone()] {
            *x = S::from_f64(rng.random_range(-h..=h));
        }
        for mlp in [&self.density, &self.color] {
            for layer in &mlp.layers {
                let bound = (6.0 / layer.fan_in as f64).sqrt();
                for x in &mut v[layer.weight.clone()] {
                    *x = S::from_f64(rng.random_range(-bound..=bound));
                }
            }
        }
        let head = &self.density.layers.last().expect("non-empty MLP").bias;
        v[head.start] = S::from_f64(self.config.density_bias_init);
        params
    }

    #[inline]
    fn vertex_index(level: &Level, c: [usize; 3]) -> usize {
        if level.dense {
            let n = level.resolution + 1;
            c[0] + n * (c[1] + n * c[2])
        } else {
            let h = (c[0] as u32).wrapping_mul(PRIMES[0])
                ^ (c[1] as u32).wrapping_mul(PRIMES[1])
                ^ (c[2] as u32).wrapping_mul(PRIMES[2]);
            (h as usize) & (level.entries - 1)
        }
    }

    /// Unit-cube coordinates clamped to the bounding box, plus a per-axis
    /// flag telling whether the clamp was active.
    fn normalize<S: Real>(&self, x: Vec3<S>) -> ([S; 3], [bool; 3]) {
        let g = &self.config.grid;
        let mut p = [S::ZERO; 3];
        let mut clamped = [false; 3];
        for k in 0..3 {
            let lo = S::from_f64(g.bbox_min[k]);
            let ext = S::from_f64(g.bbox_max[k] - g.bbox_min[k]);
            let u = (x[k] - lo) / ext;
            clamped[k] = !(u >= S::ZERO && u <= S::ONE);
            p[k] = u.clamp(S::ZERO, S::ONE);
        }
        (p, clamped)
    }

    fn cell<S: Real>(res: usize, u: S) -> (usize, S) {
        let pos = u * S::from_f64(res as f64);
        // `pos` is non-negative, so truncation is the floor.
        let mut i = pos.to_f64() as isize;
        i = i.clamp(0, res as isize - 1);
        (i as usize, pos - S::from_f64(i as f64))
    }

    fn fill_corners<S: Real>(&self, x: Vec3<S>, corners: &mut Vec<(usize, S)>) {
        let (p, _) = self.normalize(x);
        let f = self.config.grid.features_per_level;
        corners.clear();
        for level in &self.levels {
            let cells: [(usize, S); 3] = std::array::from_fn(|k| Self::cell(level.resolution, p[k]));
            let w: [[S; 2]; 3] = std::array::from_fn(|k| [S::ONE - cells[k].1, cells[k].1]);
            // Per-axis contributions to the vertex index, combined by `+`
            // for dense levels and by `^` (then masked) for hashed ones.
            let stride = level.resolution + 1;
            let part: [[usize; 2]; 3] = std::array::from_fn(|k| {
                let c = cells[k].0;
                if level.dense {
                    let s = stride.pow(k as u32);
                    [c * s, (c + 1) * s]
                } else {
                    [(c as u32).wrapping_mul(PRIMES[k]) as usize, ((c + 1) as u32).wrapping_mul(PRIMES[k]) as usize]
                }
            });
            let base = self.hash.start + level.offset;
            for corner in 0..8usize {
                let (a, b, c) = (corner & 1, (corner >> 1) & 1, corner >> 2);
                let v = if level.dense {
                    part[0][a] + part[1][b] + part[2][c]
                } else {
                    (part[0][a] ^ part[1][b] ^ part[2][c]) & (level.entries - 1)
                };
                corners.push((base + f * v, w[0][a] * w[1][b] * w[2][c]));
            }
        }
    }

    fn gather<S: Real>(&self, params: &[S], corners: &[(usize, S)], enc: &mut Vec<S>) {
        let f = self.config.grid.features_per_level;
        enc.clear();
        enc.resize(self.encoding_dim(), S::ZERO);
        for (l, chunk) in corners.chunks_exact(8).enumerate() {
            let out = &mut enc[l * f..(l + 1) * f];
            if let [o0, o1] = out {
                for &(idx, w) in chunk {
                    let v = &params[idx..idx + 2];
                    *o0 += w * v[0];
                    *o1 += w * v[1];
                }
                continue;
            }
            for &(idx, w) in chunk {
                for (o, v) in out.iter_mut().zip(&params[idx..idx + f]) {
                    *o += w * *v;
                }
            }
        }
    }

    /// Multi-resolution encoding of `x`; `n_levels · features_per_level` values.
    pub fn encode<S: Real>(&self, params: &ParamStore<S>, x: Vec3<S>) -> Vec<S> {
        let mut corners = Vec::with_capacity(8 * self.levels.len());
        self.fill_corners(x, &mut corners);
        let mut enc = Vec::new();
        self.gather(&params.values, &corners, &mut enc);
        enc
    }

    /// `∂⟨g, encode(x)⟩/∂x`. Zero along axes where `x` lies outside the box.
    pub fn encode_grad_x<S: Real>(&self, params: &ParamStore<S>, x: Vec3<S>, g: &[S]) -> Vec3<S> {
        let (p, clamped) = self.normalize(x);
        let grid = &self.config.grid;
        let f = grid.features_per_level;
        let mut out = Vec3::zero();
        for (l, level) in self.levels.iter().enumerate() {
            let cells: [(usize, S); 3] = std::array::from_fn(|k| Self::cell(level.resolution, p[k]));
            let gl = &g[l * f..(l + 1) * f];
            for corner in 0..8usize {
                let mut c = [0usize; 3];
                let mut factors = [S::ZERO; 3];
                let mut dfactors = [S::ZERO; 3];
                for k in 0..3 {
                    let bit = (corner >> k) & 1;
                    c[k] = cells[k].0 + bit;
                    factors[k] = if bit == 1 { cells[k].1 } else { S::ONE - cells[k].1 };
                    dfactors[k] = if bit == 1 { S::ONE } else { -S::ONE };
                }
                let idx = self.hash.start + level.offset + f * Self::vertex_index(level, c);
                let proj = dot(&params.values[idx..idx + f], gl);
                for k in 0..3 {
                    if clamped[k] {
                        continue;
                    }
                    let others = factors[(k + 1) % 3] * factors[(k + 2) % 3];
                    let scale = S::from_f64(level.resolution as f64 / (grid.bbox_max[k] - grid.bbox_min[k]));
                    out[k] += proj * dfactors[k] * others * scale;
                }
            }
        }
        out
    }

    /// Evaluates the field at `x`, leaving the forward cache in `scratch`.
    pub fn eval<S: Real>(
        &self,
        params: &ParamStore<S>,
        x: Vec3<S>,
        need_color: bool,
        scratch: &mut FieldScratch<S>,
    ) -> RawSample<S> {
        let p = &params.values;
        self.fill_corners(x, &mut scratch.corners);
        self.gather(p, &scratch.corners, &mut scratch.enc);
        scratch.density_acts.resize(self.density.layers.len(), Vec::new());
        self.density.forward(p, &scratch.enc, &mut scratch.density_acts);
        let sigma = scratch.density_acts.last().expect("non-empty")[0].exp();
        let mut color = [S::ZERO; 3];
        scratch.has_color = need_color;
        if need_color {
            scratch.color_acts.resize(self.color.layers.len(), Vec::new());
            self.color.forward(p, &scratch.enc, &mut scratch.color_acts);
            let out = scratch.color_acts.last().expect("non-empty");
            for k in 0..3 {
                color[k] = out[k].sigmoid();
            }
        }
        RawSample { sigma, color }
    }

    pub fn density_raw<S: Real>(&self, params: &ParamStore<S>, x: Vec3<S>) -> S {
        self.eval(params, x, false, &mut FieldScratch::default()).sigma
    }

    pub fn color_raw<S: Real>(&self, params: &ParamStore<S>, x: Vec3<S>) -> [S; 3] {
        self.eval(params, x, true, &mut FieldScratch::default()).color
    }

    /// Backward pass for the point last evaluated into `scratch`, given the
    /// gradients of a loss w.r.t. the raw density and raw color.
    pub fn backward_cached<S: Real>(
        &self,
        params: &ParamStore<S>,
        scratch: &mut FieldScratch<S>,
        g_sigma: S,
        g_color: Option<[S; 3]>,
        grads: &mut GradAccumulator<S>,
    ) {
        let p = &params.values;
        let FieldScratch { corners, enc, density_acts, color_acts, g_enc, tmp, has_color } = scratch;
        g_enc.clear();
        g_enc.resize(enc.len(), S::ZERO);
        let mut touched = false;
        if g_sigma != S::ZERO {
            let sigma = density_acts.last().expect("non-empty")[0].exp();
            let g_pre = [g_sigma * sigma];
            self.density.backward(p, enc, density_acts, &g_pre, g_enc, tmp, &mut grads.grads);
            touched = true;
        }
        if let Some(gc) = g_color {
            if gc.iter().any(|g| *g != S::ZERO) {
                assert!(*has_color, "color gradient requested for a density-only evaluation");
                let out = color_acts.last().expect("non-empty");
                let g_pre: [S; 3] = std::array::from_fn(|k| {
                    let c = out[k].sigmoid();
                    gc[k] * c * (S::ONE - c)
                });
                self.color.backward(p, enc, color_acts, &g_pre, g_enc, tmp, &mut grads.grads);
                touched = true;
            }
        }
        if !touched {
            return;
        }
        let f = self.config.grid.features_per_level;
        for (l, chunk) in corners.chunks_exact(8).enumerate() {
            let gl = &g_enc[l * f..(l + 1) * f];
            for &(idx, w) in chunk {
                for (g, v) in grads.grads[idx..idx + f].iter_mut().zip(gl) {
                    *g += w * *v;
                }
            }
        }
    }

    /// Re-evaluates `x` and backpropagates.
    pub fn backward<S: Real>(
        &self,
        params: &ParamStore<S>,
        x: Vec3<S>,
        g_sigma: S,
        g_color: Option<[S; 3]>,
        scratch: &mut FieldScratch<S>,
        grads: &mut GradAccumulator<S>,
    ) {
        self.eval(params, x, g_color.is_some(), scratch);
        self.backward_cached(params, scratch, g_sigma, g_color, grads);
    }

    /// Parameter indices of the hash entries that `x` reads.
    pub fn touched_hash_entries(&self, x: Vec3<f64>) -> Vec<usize> {
        let mut corners: Vec<(usize, f64)> = Vec::new();
        self.fill_corners(x, &mut corners);
        let f = self.config.grid.features_per_level;
        let mut out: Vec<usize> = corners.iter().flat_map(|&(i, _)| i..i + f).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn hash_range(&self) -> Range<usize> {
        self.hash.clone()
    }
}

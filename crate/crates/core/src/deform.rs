//! Deformation fields `D(x, t)` mapping canonical centers to time `t`.
//!
//! The learnable field is a small tanh MLP over a sine/cosine encoding of
//! `(x, y, z, t)`. Anything else that moves Gaussians (analytic oracle
//! motion, test fields) implements [`Deformer`] too, so rendering, refinement
//! and densification are agnostic to where motion comes from.

use std::io::{Read, Write};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::scene::{CameraModel, Gaussian3D};

/// A normalized time stamp `t ∈ [0, 1]` and the normalized length of one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeStamp {
    pub t: f64,
    pub frame_dt: f64,
}

impl TimeStamp {
    /// Stamp of frame `k` in an `n_frames` sequence.
    pub fn frame(k: usize, n_frames: usize) -> Self {
        let frame_dt = if n_frames > 1 {
            1.0 / (n_frames - 1) as f64
        } else {
            1.0
        };
        TimeStamp {
            t: k as f64 * frame_dt,
            frame_dt,
        }
    }

    /// The stamp `steps` frames away (may be negative).
    pub fn offset(&self, steps: i64) -> Self {
        TimeStamp {
            t: self.t + steps as f64 * self.frame_dt,
            frame_dt: self.frame_dt,
        }
    }

    pub fn next(&self) -> Self {
        self.offset(1)
    }

    /// Nearest integer frame index.
    pub fn frame_index(&self) -> usize {
        (self.t / self.frame_dt).round().max(0.0) as usize
    }
}

/// Anything that displaces canonical Gaussian centers over time.
///
/// `index` is the Gaussian's position in its scene; learned fields ignore it,
/// analytic motions use it to look up their group.
pub trait Deformer: Sync {
    fn displacement(&self, index: usize, mu0: &Vector3<f64>, t: f64) -> Vector3<f64>;

    /// `μ_t = μ₀ + D(μ₀, t)`.
    fn position(&self, index: usize, mu0: &Vector3<f64>, t: f64) -> Vector3<f64> {
        mu0 + self.displacement(index, mu0, t)
    }
}

/// `D ≡ 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct StaticField;

impl Deformer for StaticField {
    fn displacement(&self, _: usize, _: &Vector3<f64>, _: f64) -> Vector3<f64> {
        Vector3::zeros()
    }
}

/// Wraps a closure `(index, mu0, t) -> displacement`.
pub struct FnField<F>(pub F);

impl<F> Deformer for FnField<F>
where
    F: Fn(usize, &Vector3<f64>, f64) -> Vector3<f64> + Sync,
{
    fn displacement(&self, index: usize, mu0: &Vector3<f64>, t: f64) -> Vector3<f64> {
        (self.0)(index, mu0, t)
    }
}

impl<D: Deformer + ?Sized> Deformer for &D {
    fn displacement(&self, index: usize, mu0: &Vector3<f64>, t: f64) -> Vector3<f64> {
        (**self).displacement(index, mu0, t)
    }
}

/// Deformed center at `t`.
pub fn deform<D: Deformer + ?Sized>(field: &D, index: usize, mu0: &Vector3<f64>, t: TimeStamp) -> Vector3<f64> {
    field.position(index, mu0, t.t)
}

/// Projected displacement of a Gaussian over one frame step, in pixels/frame.
///
/// `step` is +1 for the forward velocity and -1 for the backward one.
pub fn gaussian_velocity_2d_step<D: Deformer + ?Sized>(
    field: &D,
    index: usize,
    g: &Gaussian3D,
    t: TimeStamp,
    step: i64,
    cam: &CameraModel,
) -> Result<Vector2<f64>> {
    let (p0, _) = cam.project_point(&deform(field, index, &g.mu0, t))?;
    let (p1, _) = cam.project_point(&deform(field, index, &g.mu0, t.offset(step)))?;
    Ok(p1 - p0)
}

pub fn gaussian_velocity_2d<D: Deformer + ?Sized>(
    field: &D,
    index: usize,
    g: &Gaussian3D,
    t: TimeStamp,
    cam: &CameraModel,
) -> Result<Vector2<f64>> {
    gaussian_velocity_2d_step(field, index, g, t, 1, cam)
}

/// Central-difference Jacobian of `Φ_t(x) = x + D(x, t)` at `mu0`.
pub fn deformation_jacobian<D: Deformer + ?Sized>(
    field: &D,
    index: usize,
    mu0: &Vector3<f64>,
    t: TimeStamp,
    delta: f64,
) -> Matrix3<f64> {
    let mut j = Matrix3::zeros();
    for c in 0..3 {
        let mut e = Vector3::zeros();
        e[c] = delta;
        let plus = field.position(index, &(mu0 + e), t.t);
        let minus = field.position(index, &(mu0 - e), t.t);
        j.set_column(c, &((plus - minus) / (2.0 * delta)));
    }
    j
}

/// Architecture of the learned field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FieldShape {
    pub space_bands: usize,
    pub time_bands: usize,
    pub hidden: usize,
}

impl Default for FieldShape {
    fn default() -> Self {
        FieldShape {
            space_bands: 6,
            time_bands: 4,
            hidden: 64,
        }
    }
}

impl FieldShape {
    pub fn input_dim(&self) -> usize {
        3 * (1 + 2 * self.space_bands) + 1 + 2 * self.time_bands
    }

    /// Widths of every layer, input first.
    pub fn dims(&self) -> [usize; 4] {
        [self.input_dim(), self.hidden, self.hidden, 3]
    }

    fn offsets(&self) -> LayerOffsets {
        let d = self.dims();
        let w1 = 0;
        let b1 = w1 + d[1] * d[0];
        let w2 = b1 + d[1];
        let b2 = w2 + d[2] * d[1];
        let w3 = b2 + d[2];
        let b3 = w3 + d[3] * d[2];
        LayerOffsets {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            total: b3 + d[3],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerOffsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    total: usize,
}

/// Scale applied to the output layer at initialization.
pub const OUTPUT_INIT_SCALE: f64 = 1e-4;

/// The learned deformation MLP: encoding → tanh(64) → tanh(64) → 3.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    shape: FieldShape,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct FieldCache {
    pub x: Vector3<f64>,
    pub t: f64,
    enc: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

/// Dot product with four independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl DeformationField {
    /// Xavier-uniform hidden layers, output layer scaled by [`OUTPUT_INIT_SCALE`].
    pub fn new(shape: FieldShape, seed: u64) -> Self {
        let offsets = shape.offsets();
        let d = shape.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; offsets.total];
        let mut fill = |start: usize, fan_in: usize, fan_out: usize, scale: f64| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut params[start..start + fan_in * fan_out] {
                *p = rng.random_range(-a..a) * scale;
            }
        };
        fill(offsets.w1, d[0], d[1], 1.0);
        fill(offsets.w2, d[1], d[2], 1.0);
        fill(offsets.w3, d[2], d[3], OUTPUT_INIT_SCALE);
        DeformationField {
            shape,
            params,
        }
    }

    /// A field whose output is identically zero (all output weights cleared).
    pub fn zero(shape: FieldShape) -> Self {
        let offsets = shape.offsets();
        DeformationField {
            shape,
            params: vec![0.0; offsets.total],
        }
    }

    pub fn from_params(shape: FieldShape, params: Vec<f64>) -> Result<Self> {
        let offsets = shape.offsets();
        if params.len() != offsets.total {
            return Err(Error::shape(format!(
                "field expects {} parameters, got {}",
                offsets.total,
                params.len()
            )));
        }
        Ok(DeformationField {
            shape,
            params,
        })
    }

    pub fn shape(&self) -> FieldShape {
        self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn encode(&self, x: &Vector3<f64>, t: f64, out: &mut Vec<f64>) {
        out.clear();
        for c in 0..3 {
            out.push(x[c]);
        }
        for c in 0..3 {
            let mut f = 1.0;
            for _ in 0..self.shape.space_bands {
                let a = f * x[c];
                out.push(a.sin());
                out.push(a.cos());
                f *= 2.0;
            }
        }
        out.push(t);
        let mut f = 1.0;
        for _ in 0..self.shape.time_bands {
            let a = f * t;
            out.push(a.sin());
            out.push(a.cos());
            f *= 2.0;
        }
    }

    fn dense(w: &[f64], b: &[f64], input: &[f64], out: &mut Vec<f64>, tanh: bool) {
        let n_in = input.len();
        out.clear();
        for (o, bias) in b.iter().enumerate() {
            let acc = bias + dot(&w[o * n_in..(o + 1) * n_in], input);
            out.push(if tanh { acc.tanh() } else { acc });
        }
    }

    pub fn forward_cached(&self, x: &Vector3<f64>, t: f64) -> (Vector3<f64>, FieldCache) {
        let o = self.shape.offsets();
        let d = self.shape.dims();
        let p = &self.params;
        let mut enc = Vec::with_capacity(d[0]);
        self.encode(x, t, &mut enc);
        let mut h1 = Vec::with_capacity(d[1]);
        Self::dense(&p[o.w1..o.b1], &p[o.b1..o.w2], &enc, &mut h1, true);
        let mut h2 = Vec::with_capacity(d[2]);
        Self::dense(&p[o.w2..o.b2], &p[o.b2..o.w3], &h1, &mut h2, true);
        let mut out = Vec::with_capacity(3);
        Self::dense(&p[o.w3..o.b3], &p[o.b3..o.total], &h2, &mut out, false);
        (
            Vector3::new(out[0], out[1], out[2]),
            FieldCache {
                x: *x,
                t,
                enc,
                h1,
                h2,
            },
        )
    }

    /// Accumulates `d_out`'s parameter gradient into `grad` and returns the
    /// gradient w.r.t. the spatial input `x` (time is not differentiated).
    pub fn backward(&self, cache: &FieldCache, d_out: &Vector3<f64>, grad: &mut [f64]) -> Vector3<f64> {
        let o = self.shape.offsets();
        let d = self.shape.dims();
        let p = &self.params;

        // Output layer.
        let mut d_h2 = vec![0.0; d[2]];
        for k in 0..3 {
            let g = d_out[k];
            if g == 0.0 {
                continue;
            }
            grad[o.b3 + k] += g;
            let row = o.w3 + k * d[2];
            for i in 0..d[2] {
                grad[row + i] += g * cache.h2[i];
                d_h2[i] += g * p[row + i];
            }
        }
        // Second hidden layer.
        let mut d_h1 = vec![0.0; d[1]];
        for k in 0..d[2] {
            let g = d_h2[k] * (1.0 - cache.h2[k] * cache.h2[k]);
            if g == 0.0 {
                continue;
            }
            grad[o.b2 + k] += g;
            let row = o.w2 + k * d[1];
            let grow = &mut grad[row..row + d[1]];
            for (gi, hi) in grow.iter_mut().zip(&cache.h1) {
                *gi += g * hi;
            }
            for (dh, wi) in d_h1.iter_mut().zip(&p[row..row + d[1]]) {
                *dh += g * wi;
            }
        }
        // First hidden layer.
        let mut d_enc = vec![0.0; d[0]];
        for k in 0..d[1] {
            let g = d_h1[k] * (1.0 - cache.h1[k] * cache.h1[k]);
            if g == 0.0 {
                continue;
            }
            grad[o.b1 + k] += g;
            let row = o.w1 + k * d[0];
            let grow = &mut grad[row..row + d[0]];
            for (gi, ei) in grow.iter_mut().zip(&cache.enc) {
                *gi += g * ei;
            }
            for (de, wi) in d_enc.iter_mut().zip(&p[row..row + d[0]]) {
                *de += g * wi;
            }
        }
        // Encoding → x.
        let mut d_x = Vector3::new(d_enc[0], d_enc[1], d_enc[2]);
        let mut idx = 3;
        for c in 0..3 {
            let mut f = 1.0;
            for _ in 0..self.shape.space_bands {
                let s = cache.enc[idx];
                let co = cache.enc[idx + 1];
                d_x[c] += d_enc[idx] * f * co - d_enc[idx + 1] * f * s;
                idx += 2;
                f *= 2.0;
            }
        }
        d_x
    }

    /// Evaluates `D` for a batch of `(x, t)` inputs in parallel.
    pub fn evaluate_batch(&self, inputs: &[(Vector3<f64>, f64)]) -> Vec<Vector3<f64>> {
        par::map_slice(inputs, |(x, t)| self.forward_cached(x, *t).0)
    }

    /// Forward pass with caches for a batch.
    pub fn forward_batch(&self, inputs: &[(Vector3<f64>, f64)]) -> Vec<(Vector3<f64>, FieldCache)> {
        par::map_slice(inputs, |(x, t)| self.forward_cached(x, *t))
    }

    /// Backward pass for a batch; parameter gradients are accumulated into
    /// `grad` in a fixed chunk order so the sum is independent of worker count.
    pub fn backward_batch(
        &self,
        caches: &[FieldCache],
        d_outs: &[Vector3<f64>],
        grad: &mut [f64],
    ) -> Vec<Vector3<f64>> {
        const CHUNK: usize = 64;
        let n_chunks = caches.len().div_ceil(CHUNK);
        let n_params = self.params.len();
        let parts = par::map_range(n_chunks, |c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(caches.len());
            let mut local = vec![0.0; n_params];
            let dx: Vec<Vector3<f64>> = (lo..hi)
                .map(|i| {
                    if d_outs[i] == Vector3::zeros() {
                        Vector3::zeros()
                    } else {
                        self.backward(&caches[i], &d_outs[i], &mut local)
                    }
                })
                .collect();
            (local, dx)
        });
        let mut d_x = Vec::with_capacity(caches.len());
        for (local, dx) in parts {
            for (g, l) in grad.iter_mut().zip(&local) {
                *g += l;
            }
            d_x.extend(dx);
        }
        d_x
    }

    const MAGIC: &'static [u8; 4] = b"FSDF";
    const VERSION: u32 = 1;

    /// Binary checkpoint: "FSDF", version, band counts, layer dims, then each
    /// layer's row-major weights followed by its biases as little-endian f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.space_bands as u32).to_le_bytes())?;
        w.write_all(&(self.shape.time_bands as u32).to_le_bytes())?;
        let dims = self.shape.dims();
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format("not a deformation field checkpoint".into()));
        }
        let read_u32 = |r: &mut R| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let version = read_u32(&mut r)?;
        if version != Self::VERSION {
            return Err(Error::Format(format!("unsupported field version {version}")));
        }
        let space_bands = read_u32(&mut r)? as usize;
        let time_bands = read_u32(&mut r)? as usize;
        let n_dims = read_u32(&mut r)? as usize;
        if n_dims != 4 {
            return Err(Error::Format(format!("expected 4 layer dims, found {n_dims}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = read_u32(&mut r)? as usize;
        }
        let shape = FieldShape {
            space_bands,
            time_bands,
            hidden: dims[1],
        };
        if shape.dims() != dims {
            return Err(Error::Format(format!("inconsistent layer dims {dims:?}")));
        }
        let total = shape.offsets().total;
        let mut params = Vec::with_capacity(total);
        let mut b = [0u8; 8];
        for _ in 0..total {
            r.read_exact(&mut b)?;
            params.push(f64::from_le_bytes(b));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format("trailing bytes after field weights".into()));
        }
        DeformationField::from_params(shape, params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

impl Deformer for DeformationField {
    fn displacement(&self, _: usize, mu0: &Vector3<f64>, t: f64) -> Vector3<f64> {
        self.forward_cached(mu0, t).0
    }
}

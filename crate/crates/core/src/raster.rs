//! Software rasterization of color, velocity, depth and alpha.
//!
//! Gaussians are globally sorted by camera depth (index tie-break) and
//! composited front to back with `T_i = Π_{j<i} (1 - α_j)`. Velocity uses the
//! same weights as color with no background term. The backward pass is the
//! exact reverse of the recurrence; per-Gaussian gradients are reduced over
//! fixed row chunks so results do not depend on the worker count.

use nalgebra::{Matrix2, Vector2, Vector3, Vector4};

use crate::deform::{DeformationField, Deformer, FieldCache, TimeStamp};
use crate::error::{Error, Result};
use crate::image::{ColorImage, Plane, ScalarImage, VectorImage};
use crate::par;
use crate::scene::{covariance_backward, covariance_of, CameraModel, CanonicalScene, Gaussian3D};

/// Upper clamp on per-Gaussian alpha.
pub const ALPHA_MAX: f64 = 0.99;
/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance drops below this.
pub const T_MIN: f64 = 1e-4;
/// Denominator floor when normalizing depth by accumulated alpha.
pub const DEPTH_EPS: f64 = 1e-10;
/// Pixels beyond this Mahalanobis radius of a splat are not evaluated.
pub const CUTOFF_SIGMA: f64 = 3.0;

const ROWS_PER_CHUNK: usize = 4;

/// A Gaussian projected into one view at one stamp.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat {
    /// Position of the source Gaussian in its scene.
    pub index: usize,
    pub center: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub color: Vector3<f64>,
    pub opacity: f64,
    /// Forward velocity (pixels/frame); zero when `velocity_valid` is false.
    pub velocity: Vector2<f64>,
    pub velocity_valid: bool,
    /// Velocity toward the previous stamp; zero unless requested and valid.
    pub velocity_back: Vector2<f64>,
    pub velocity_back_valid: bool,
    bbox: [usize; 4],
    on_screen: bool,
}

impl Splat {
    /// Builds a splat from projected quantities. Returns `None` when the
    /// covariance is not positive definite.
    pub fn new(
        index: usize,
        center: Vector2<f64>,
        cov: Matrix2<f64>,
        depth: f64,
        color: Vector3<f64>,
        opacity: f64,
        width: usize,
        height: usize,
    ) -> Option<Self> {
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        if !(det > 0.0) || !center.x.is_finite() || !center.y.is_finite() {
            return None;
        }
        let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
        let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
        let lambda = mid + (mid * mid - det).max(0.0).sqrt();
        let r = CUTOFF_SIGMA * lambda.sqrt();
        let x_lo = (center.x - r).floor();
        let x_hi = (center.x + r).ceil();
        let y_lo = (center.y - r).floor();
        let y_hi = (center.y + r).ceil();
        let on_screen = x_hi >= 0.0 && y_hi >= 0.0 && x_lo <= (width - 1) as f64 && y_lo <= (height - 1) as f64;
        let clip = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
        Some(Splat {
            index,
            center,
            cov,
            conic,
            depth,
            color,
            opacity,
            velocity: Vector2::zeros(),
            velocity_valid: false,
            velocity_back: Vector2::zeros(),
            velocity_back_valid: false,
            bbox: [clip(x_lo, width - 1), clip(x_hi, width - 1), clip(y_lo, height - 1), clip(y_hi, height - 1)],
            on_screen,
        })
    }

    #[inline]
    fn covers(&self, x: usize) -> bool {
        self.on_screen && x >= self.bbox[0] && x <= self.bbox[1]
    }

    /// Evaluates the splat at a pixel: `(alpha, gaussian weight, d, clamped)`.
    #[inline]
    fn evaluate(&self, px: f64, py: f64) -> Option<(f64, f64, Vector2<f64>, bool)> {
        let d = Vector2::new(px - self.center.x, py - self.center.y);
        let m = self.conic[(0, 0)] * d.x * d.x
            + (self.conic[(0, 1)] + self.conic[(1, 0)]) * d.x * d.y
            + self.conic[(1, 1)] * d.y * d.y;
        if m > CUTOFF_SIGMA * CUTOFF_SIGMA {
            return None;
        }
        let gw = (-0.5 * m).exp();
        let raw = self.opacity * gw;
        if raw < ALPHA_MIN {
            return None;
        }
        if raw > ALPHA_MAX {
            Some((ALPHA_MAX, gw, d, true))
        } else {
            Some((raw, gw, d, false))
        }
    }
}

/// Which velocity channels a render pass produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderOptions {
    pub velocity: bool,
    pub velocity_back: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            velocity: true,
            velocity_back: false,
        }
    }
}

impl RenderOptions {
    pub fn color_only() -> Self {
        RenderOptions {
            velocity: false,
            velocity_back: false,
        }
    }

    pub fn both_velocities() -> Self {
        RenderOptions {
            velocity: true,
            velocity_back: true,
        }
    }
}

/// Output of one rasterization pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderBuffers {
    pub color: ColorImage,
    pub velocity: VectorImage,
    pub velocity_back: VectorImage,
    pub depth: ScalarImage,
    pub alpha: ScalarImage,
    /// Visible splats in compositing (depth) order.
    pub splats: Vec<Splat>,
    pub background: Vector3<f64>,
}

impl RenderBuffers {
    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }
}

/// Projects one Gaussian given its deformed centers at `t` and optionally at
/// `t ± δt`. Returns `None` when the Gaussian is culled from the view.
pub fn make_splat(
    cam: &CameraModel,
    index: usize,
    g: &Gaussian3D,
    mu_t: &Vector3<f64>,
    mu_next: Option<&Vector3<f64>>,
    mu_prev: Option<&Vector3<f64>>,
) -> Option<Splat> {
    let (center, depth) = cam.project_point(mu_t).ok()?;
    let cov = cam.project_covariance(g, mu_t).ok()?;
    let mut s = Splat::new(index, center, cov, depth, g.color, g.opacity, cam.width, cam.height)?;
    if let Some(next) = mu_next {
        if let Ok((p, _)) = cam.project_point(next) {
            s.velocity = p - center;
            s.velocity_valid = true;
        }
    }
    if let Some(prev) = mu_prev {
        if let Ok((p, _)) = cam.project_point(prev) {
            s.velocity_back = p - center;
            s.velocity_back_valid = true;
        }
    }
    Some(s)
}

/// Sorts by camera depth, ties broken by Gaussian index.
pub fn sort_splats(splats: &mut [Splat]) {
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
}

fn row_buckets(splats: &[Splat], height: usize) -> Vec<Vec<u32>> {
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); height];
    for (i, s) in splats.iter().enumerate() {
        if !s.on_screen {
            continue;
        }
        for row in &mut rows[s.bbox[2]..=s.bbox[3]] {
            row.push(i as u32);
        }
    }
    rows
}

/// Row-bucketed lookup over depth-sorted splats.
pub struct SplatIndex<'a> {
    splats: &'a [Splat],
    rows: Vec<Vec<u32>>,
    width: usize,
    height: usize,
}

impl<'a> SplatIndex<'a> {
    pub fn new(splats: &'a [Splat], width: usize, height: usize) -> Self {
        SplatIndex {
            splats,
            rows: row_buckets(splats, height),
            width,
            height,
        }
    }

    /// Nearest splat that would contribute at `(x, y)`; `None` off-image or
    /// where only background shows.
    pub fn front_at(&self, x: f64, y: f64) -> Option<&'a Splat> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64) {
            return None;
        }
        let (ix, iy) = (x.floor() as usize, y.floor() as usize);
        self.rows[iy]
            .iter()
            .map(|&i| &self.splats[i as usize])
            .find(|s| s.covers(ix) && s.evaluate(x, y).is_some())
    }
}

#[derive(Clone, Copy, Debug)]
struct Contribution {
    splat: u32,
    alpha: f64,
    gw: f64,
    trans: f64,
    d: Vector2<f64>,
    clamped: bool,
}

/// Front-to-back list of contributions at one pixel; returns the final transmittance.
fn pixel_contributions(
    x: usize,
    y: usize,
    row: &[u32],
    splats: &[Splat],
    out: &mut Vec<Contribution>,
) -> f64 {
    out.clear();
    let (px, py) = (x as f64, y as f64);
    let mut trans = 1.0;
    for &si in row {
        let s = &splats[si as usize];
        if !s.covers(x) {
            continue;
        }
        let Some((alpha, gw, d, clamped)) = s.evaluate(px, py) else {
            continue;
        };
        out.push(Contribution {
            splat: si,
            alpha,
            gw,
            trans,
            d,
            clamped,
        });
        trans *= 1.0 - alpha;
        if trans < T_MIN {
            break;
        }
    }
    trans
}

#[derive(Clone, Copy, Default)]
struct PixelOut {
    color: [f64; 3],
    velocity: [f64; 2],
    velocity_back: [f64; 2],
    depth: f64,
    alpha: f64,
}

/// Composites already-sorted splats.
pub fn rasterize(
    splats: Vec<Splat>,
    background: Vector3<f64>,
    width: usize,
    height: usize,
    opts: RenderOptions,
) -> RenderBuffers {
    let rows = row_buckets(&splats, height);
    let row_out: Vec<Vec<PixelOut>> = par::map_range(height, |y| {
        let mut scratch = Vec::new();
        (0..width)
            .map(|x| {
                let t_final = pixel_contributions(x, y, &rows[y], &splats, &mut scratch);
                let mut o = PixelOut::default();
                let mut depth_acc = 0.0;
                for c in &scratch {
                    let s = &splats[c.splat as usize];
                    let w = c.alpha * c.trans;
                    for k in 0..3 {
                        o.color[k] += w * s.color[k];
                    }
                    if opts.velocity {
                        o.velocity[0] += w * s.velocity.x;
                        o.velocity[1] += w * s.velocity.y;
                    }
                    if opts.velocity_back {
                        o.velocity_back[0] += w * s.velocity_back.x;
                        o.velocity_back[1] += w * s.velocity_back.y;
                    }
                    depth_acc += w * s.depth;
                }
                for k in 0..3 {
                    o.color[k] += t_final * background[k];
                }
                o.alpha = 1.0 - t_final;
                o.depth = if scratch.is_empty() {
                    f64::INFINITY
                } else {
                    depth_acc / o.alpha.max(DEPTH_EPS)
                };
                o
            })
            .collect()
    });
    let mut color = Vec::with_capacity(width * height);
    let mut velocity = Vec::with_capacity(width * height);
    let mut velocity_back = Vec::with_capacity(width * height);
    let mut depth = Vec::with_capacity(width * height);
    let mut alpha = Vec::with_capacity(width * height);
    for row in row_out {
        for o in row {
            color.push(o.color);
            velocity.push(o.velocity);
            velocity_back.push(o.velocity_back);
            depth.push(o.depth);
            alpha.push(o.alpha);
        }
    }
    RenderBuffers {
        color: Plane::from_vec(width, height, color).expect("sized"),
        velocity: Plane::from_vec(width, height, velocity).expect("sized"),
        velocity_back: Plane::from_vec(width, height, velocity_back).expect("sized"),
        depth: Plane::from_vec(width, height, depth).expect("sized"),
        alpha: Plane::from_vec(width, height, alpha).expect("sized"),
        splats,
        background,
    }
}

/// Splats of every Gaussian visible from `cam` at `t`.
pub fn build_splats<D: Deformer + ?Sized>(
    scene: &CanonicalScene,
    field: &D,
    t: TimeStamp,
    cam: &CameraModel,
    opts: RenderOptions,
) -> Vec<Splat> {
    let per: Vec<Option<Splat>> = par::map_range(scene.len(), |i| {
        let g = &scene.gaussians[i];
        let mu_t = field.position(i, &g.mu0, t.t);
        let next = opts.velocity.then(|| field.position(i, &g.mu0, t.next().t));
        let prev = opts.velocity_back.then(|| field.position(i, &g.mu0, t.offset(-1).t));
        make_splat(cam, i, g, &mu_t, next.as_ref(), prev.as_ref())
    });
    let mut splats: Vec<Splat> = per.into_iter().flatten().collect();
    sort_splats(&mut splats);
    splats
}

/// Renders color, forward velocity, depth and alpha.
pub fn render<D: Deformer + ?Sized>(
    scene: &CanonicalScene,
    field: &D,
    t: TimeStamp,
    cam: &CameraModel,
) -> RenderBuffers {
    render_with(scene, field, t, cam, RenderOptions::default())
}

pub fn render_with<D: Deformer + ?Sized>(
    scene: &CanonicalScene,
    field: &D,
    t: TimeStamp,
    cam: &CameraModel,
    opts: RenderOptions,
) -> RenderBuffers {
    let splats = build_splats(scene, field, t, cam, opts);
    rasterize(splats, scene.background, cam.width, cam.height, opts)
}

/// Per-pixel loss gradients flowing into a render pass. Absent channels are zero.
#[derive(Clone, Debug, Default)]
pub struct Upstream {
    pub color: Option<ColorImage>,
    pub velocity: Option<VectorImage>,
    pub velocity_back: Option<VectorImage>,
    pub alpha: Option<ScalarImage>,
}

/// Gradient of one splat's projected quantities.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub center: Vector2<f64>,
    /// Gradient w.r.t. the projected covariance (symmetric form).
    pub cov: Matrix2<f64>,
    pub velocity: Vector2<f64>,
    pub velocity_back: Vector2<f64>,
    conic: Matrix2<f64>,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.color += o.color;
        self.opacity += o.opacity;
        self.center += o.center;
        self.conic += o.conic;
        self.velocity += o.velocity;
        self.velocity_back += o.velocity_back;
    }
}

/// Gradients for every splat of a render pass, aligned with `RenderBuffers::splats`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients {
    pub splats: Vec<SplatGrad>,
    /// Source Gaussian index of each entry.
    pub indices: Vec<usize>,
}

impl RenderGradients {
    /// Gradient for Gaussian `index`, or zero if it was culled.
    pub fn for_gaussian(&self, index: usize) -> SplatGrad {
        self.indices
            .iter()
            .position(|&i| i == index)
            .map(|k| self.splats[k])
            .unwrap_or_default()
    }
}

/// Reverse pass of `rasterize`.
pub fn render_backward(buffers: &RenderBuffers, upstream: &Upstream) -> Result<RenderGradients> {
    let (w, h) = buffers.color.dims();
    let check = |dims: Option<(usize, usize)>, what: &str| -> Result<()> {
        match dims {
            Some(d) if d != (w, h) => Err(Error::shape(format!(
                "upstream {what} is {}x{}, buffers are {w}x{h}",
                d.0, d.1
            ))),
            _ => Ok(()),
        }
    };
    check(upstream.color.as_ref().map(|p| p.dims()), "color")?;
    check(upstream.velocity.as_ref().map(|p| p.dims()), "velocity")?;
    check(upstream.velocity_back.as_ref().map(|p| p.dims()), "velocity_back")?;
    check(upstream.alpha.as_ref().map(|p| p.dims()), "alpha")?;

    let splats = &buffers.splats;
    let n = splats.len();
    let rows = row_buckets(splats, h);
    let bg = buffers.background;
    let n_chunks = h.div_ceil(ROWS_PER_CHUNK);
    let partials: Vec<Vec<SplatGrad>> = par::map_range(n_chunks, |chunk| {
        let mut local = vec![SplatGrad::default(); n];
        let mut scratch = Vec::new();
        let y_lo = chunk * ROWS_PER_CHUNK;
        let y_hi = (y_lo + ROWS_PER_CHUNK).min(h);
        for y in y_lo..y_hi {
            for x in 0..w {
                let g_c = upstream.color.as_ref().map(|p| Vector3::from(*p.get(x, y))).unwrap_or_default();
                let g_v = upstream.velocity.as_ref().map(|p| Vector2::from(*p.get(x, y))).unwrap_or_default();
                let g_vb = upstream.velocity_back.as_ref().map(|p| Vector2::from(*p.get(x, y))).unwrap_or_default();
                let g_a = upstream.alpha.as_ref().map(|p| *p.get(x, y)).unwrap_or(0.0);
                if g_c == Vector3::zeros() && g_v == Vector2::zeros() && g_vb == Vector2::zeros() && g_a == 0.0 {
                    continue;
                }
                let t_final = pixel_contributions(x, y, &rows[y], splats, &mut scratch);
                let mut acc_c = bg * t_final;
                let mut acc_v = Vector2::zeros();
                let mut acc_vb = Vector2::zeros();
                for c in scratch.iter().rev() {
                    let s = &splats[c.splat as usize];
                    let g = &mut local[c.splat as usize];
                    let wgt = c.alpha * c.trans;
                    g.color += g_c * wgt;
                    g.velocity += g_v * wgt;
                    g.velocity_back += g_vb * wgt;
                    let inv = 1.0 / (1.0 - c.alpha);
                    let d_alpha = c.trans * (g_c.dot(&s.color) + g_v.dot(&s.velocity) + g_vb.dot(&s.velocity_back))
                        - (g_c.dot(&acc_c) + g_v.dot(&acc_v) + g_vb.dot(&acc_vb)) * inv
                        + g_a * t_final * inv;
                    acc_c += s.color * wgt;
                    acc_v += s.velocity * wgt;
                    acc_vb += s.velocity_back * wgt;
                    if c.clamped {
                        continue;
                    }
                    g.opacity += d_alpha * c.gw;
                    // α = σ exp(-½ dᵀ C d), d = pixel - center.
                    let cd = s.conic * c.d;
                    g.center += cd * (d_alpha * c.alpha);
                    g.conic += c.d * c.d.transpose() * (-0.5 * d_alpha * c.alpha);
                }
            }
        }
        local
    });
    let mut total = vec![SplatGrad::default(); n];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.add(p);
        }
    }
    for (g, s) in total.iter_mut().zip(splats) {
        // C = Σ⁻¹ ⇒ dL/dΣ = -C (dL/dC) C (symmetrized).
        let sym = (g.conic + g.conic.transpose()) * 0.5;
        g.cov = -(s.conic * sym * s.conic);
        if !s.velocity_valid {
            g.velocity = Vector2::zeros();
        }
        if !s.velocity_back_valid {
            g.velocity_back = Vector2::zeros();
        }
    }
    Ok(RenderGradients {
        splats: total,
        indices: splats.iter().map(|s| s.index).collect(),
    })
}

/// Gradients of a loss w.r.t. every scene and field parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGradients {
    pub mu0: Vec<Vector3<f64>>,
    pub scale: Vec<Vector3<f64>>,
    pub rotation: Vec<Vector4<f64>>,
    pub color: Vec<Vector3<f64>>,
    pub opacity: Vec<f64>,
    pub field: Vec<f64>,
}

impl SceneGradients {
    pub fn zeros(n: usize, n_field: usize) -> Self {
        SceneGradients {
            mu0: vec![Vector3::zeros(); n],
            scale: vec![Vector3::zeros(); n],
            rotation: vec![Vector4::zeros(); n],
            color: vec![Vector3::zeros(); n],
            opacity: vec![0.0; n],
            field: vec![0.0; n_field],
        }
    }

    /// Per-Gaussian norm of the center gradient.
    pub fn center_norms(&self) -> Vec<f64> {
        self.mu0.iter().map(|g| g.norm()).collect()
    }
}

/// Gradients of one splat w.r.t. the deformed centers it was built from.
#[derive(Clone, Copy, Debug, Default)]
pub struct CenterGrads {
    pub at_t: Vector3<f64>,
    pub at_next: Vector3<f64>,
    pub at_prev: Vector3<f64>,
}

/// Pulls a splat gradient back through projection, covariance and velocity.
/// Attribute gradients are added into `out` at `splat.index`.
pub fn splat_backward(
    cam: &CameraModel,
    g: &Gaussian3D,
    grad: &SplatGrad,
    splat: &Splat,
    mu_t: &Vector3<f64>,
    mu_next: Option<&Vector3<f64>>,
    mu_prev: Option<&Vector3<f64>>,
    out: &mut SceneGradients,
) -> CenterGrads {
    let i = splat.index;
    out.color[i] += grad.color;
    out.opacity[i] += grad.opacity;
    let cov3 = covariance_of(g);
    let (d_mu_cov, d_cov3) = cam.project_covariance_backward(&cov3, mu_t, &grad.cov);
    let (d_scale, d_rot) = covariance_backward(g, &d_cov3);
    out.scale[i] += d_scale;
    out.rotation[i] += d_rot;
    let j_t = cam.projection_jacobian(mu_t).expect("splat center is in front of the camera");
    let mut at_t = d_mu_cov + j_t.transpose() * grad.center;
    let mut at_next = Vector3::zeros();
    let mut at_prev = Vector3::zeros();
    if splat.velocity_valid {
        if let Some(next) = mu_next {
            let j_n = cam.projection_jacobian(next).expect("valid velocity");
            at_next += j_n.transpose() * grad.velocity;
            at_t -= j_t.transpose() * grad.velocity;
        }
    }
    if splat.velocity_back_valid {
        if let Some(prev) = mu_prev {
            let j_p = cam.projection_jacobian(prev).expect("valid velocity");
            at_prev += j_p.transpose() * grad.velocity_back;
            at_t -= j_t.transpose() * grad.velocity_back;
        }
    }
    CenterGrads {
        at_t,
        at_next,
        at_prev,
    }
}

/// Accumulates gradients on deformed centers back into the canonical centers
/// and field parameters. `positions` pairs each entry with its field cache.
pub fn centers_backward(
    field: &DeformationField,
    caches: &[FieldCache],
    indices: &[usize],
    d_positions: &[Vector3<f64>],
    out: &mut SceneGradients,
) {
    let d_x = field.backward_batch(caches, d_positions, &mut out.field);
    for ((&i, d_pos), dx) in indices.iter().zip(d_positions).zip(&d_x) {
        // μ_t = μ₀ + D(μ₀, t): identity path plus the field's input gradient.
        out.mu0[i] += d_pos + dx;
    }
}

/// Gradient on a deformed center: Gaussian `index` at the pass stamp offset by `step` frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterGrad {
    pub index: usize,
    pub step: i64,
    pub d_pos: Vector3<f64>,
}

/// Pulls every splat gradient of one pass back to the Gaussian attributes in
/// `out` and returns the gradients on the deformed centers it read.
pub fn chain_splats<D: Deformer + ?Sized>(
    grads: &RenderGradients,
    buffers: &RenderBuffers,
    positions: &D,
    scene: &CanonicalScene,
    t: TimeStamp,
    cam: &CameraModel,
    out: &mut SceneGradients,
) -> Vec<CenterGrad> {
    let mut centers = Vec::with_capacity(grads.splats.len() * 2);
    for (sg, splat) in grads.splats.iter().zip(&buffers.splats) {
        let i = splat.index;
        let g = &scene.gaussians[i];
        let mu_t = positions.position(i, &g.mu0, t.t);
        let mu_next = splat.velocity_valid.then(|| positions.position(i, &g.mu0, t.next().t));
        let mu_prev = splat.velocity_back_valid.then(|| positions.position(i, &g.mu0, t.offset(-1).t));
        let cg = splat_backward(cam, g, sg, splat, &mu_t, mu_next.as_ref(), mu_prev.as_ref(), out);
        centers.push(CenterGrad { index: i, step: 0, d_pos: cg.at_t });
        if mu_next.is_some() {
            centers.push(CenterGrad { index: i, step: 1, d_pos: cg.at_next });
        }
        if mu_prev.is_some() {
            centers.push(CenterGrad { index: i, step: -1, d_pos: cg.at_prev });
        }
    }
    centers
}

/// Chains render-space gradients of a single `render_with` pass to the scene
/// and the learned field.
pub fn chain_to_scene(
    grads: &RenderGradients,
    buffers: &RenderBuffers,
    field: &DeformationField,
    scene: &CanonicalScene,
    t: TimeStamp,
    cam: &CameraModel,
) -> SceneGradients {
    let mut out = SceneGradients::zeros(scene.len(), field.num_params());
    let centers = chain_splats(grads, buffers, field, scene, t, cam, &mut out);
    let caches: Vec<FieldCache> = centers
        .iter()
        .map(|c| field.forward_cached(&scene.gaussians[c.index].mu0, t.offset(c.step).t).1)
        .collect();
    let idx: Vec<usize> = centers.iter().map(|c| c.index).collect();
    let d_pos: Vec<Vector3<f64>> = centers.iter().map(|c| c.d_pos).collect();
    centers_backward(field, &caches, &idx, &d_pos, &mut out);
    out
}

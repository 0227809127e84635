//! Flow-assisted densification and conventional clone/split/prune.
//!
//! FAD picks pixels whose windowed velocity loss and its spatial gradient are
//! both high inside the dynamic mask, lifts them with rendered depth, thins
//! them with farthest point sampling, borrows attributes from nearby deformed
//! Gaussians and maps the result back to canonical space.

use log::warn;
use nalgebra::{Vector2, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::deform::{Deformer, TimeStamp};
use crate::error::{Error, Result};
use crate::image::{Plane, ScalarImage};
use crate::losses::DynamicMask;
use crate::scene::{covariance_of, CameraModel, CanonicalScene, Gaussian3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FADConfig {
    /// Percentile (in [0, 1]) of the masked loss and gradient maps used as ε.
    pub percentile: f64,
    pub fps_ratio: f64,
    pub k: usize,
    pub radius_scale: f64,
    pub max_new_per_event: usize,
    /// Opacity floor for accepted Gaussians.
    pub min_opacity: f64,
    /// Also select on the warp loss map.
    pub use_warp_map: bool,
    pub fixed_point_iters: usize,
    /// Maximum reprojection distance (pixels) to the source pixel.
    pub provenance_px: f64,
}

impl Default for FADConfig {
    fn default() -> Self {
        FADConfig {
            percentile: 0.95,
            fps_ratio: 0.05,
            k: 4,
            radius_scale: 3.0,
            max_new_per_event: 200,
            min_opacity: 0.1,
            use_warp_map: false,
            fixed_point_iters: 5,
            provenance_px: 3.0,
        }
    }
}

impl FADConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps_ratio > 0.0 && self.fps_ratio <= 1.0) {
            return Err(Error::Config(format!("fps_ratio {} not in (0, 1]", self.fps_ratio)));
        }
        if self.k == 0 || self.max_new_per_event == 0 {
            return Err(Error::Config("k and max_new_per_event must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.percentile) {
            return Err(Error::Config(format!("percentile {} not in [0, 1]", self.percentile)));
        }
        Ok(())
    }
}

/// Linear-interpolated quantile of `values` (`q` in [0, 1]).
pub fn quantile(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

/// Central-difference gradient magnitude of a per-pixel map (one-sided at borders).
pub fn gradient_magnitude(map: &ScalarImage) -> ScalarImage {
    let (w, h) = map.dims();
    Plane::from_fn(w, h, |x, y| {
        let d = |a: f64, b: f64, span: usize| if span == 0 { 0.0 } else { (a - b) / span as f64 };
        let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        let gx = d(*map.get(xr, y), *map.get(xl, y), xr - xl);
        let gy = d(*map.get(x, yd), *map.get(x, yu), yd - yu);
        (gx * gx + gy * gy).sqrt()
    })
}

/// Pixels inside the mask where both maps exceed their masked percentile.
pub fn select_pixels(
    loss_map: &ScalarImage,
    grad_map: &ScalarImage,
    mask: &DynamicMask,
    cfg: &FADConfig,
) -> Result<Vec<(usize, usize)>> {
    loss_map.check_shape(grad_map, "gradient map")?;
    loss_map.check_shape(&mask.mask, "dynamic mask")?;
    let m = mask.mask.data();
    let masked = |p: &ScalarImage| -> Vec<f64> { p.data().iter().zip(m).filter(|(_, &k)| k).map(|(v, _)| *v).collect() };
    let eps_l = quantile(&mut masked(loss_map), cfg.percentile);
    let eps_g = quantile(&mut masked(grad_map), cfg.percentile);
    let w = loss_map.width();
    Ok((0..loss_map.len())
        .filter(|&i| m[i] && loss_map.data()[i] > eps_l && grad_map.data()[i] > eps_g)
        .map(|i| (i % w, i / w))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftedPoint {
    pub pixel: (usize, usize),
    pub point: [f64; 3],
}

/// Unprojects pixels with the rendered depth. Returns the points and the
/// number skipped for lacking a finite positive depth.
pub fn lift_pixels(pixels: &[(usize, usize)], depth: &ScalarImage, cam: &CameraModel) -> (Vec<LiftedPoint>, usize) {
    let mut out = Vec::with_capacity(pixels.len());
    let mut skipped = 0;
    for &(x, y) in pixels {
        let z = *depth.get(x, y);
        match cam.unproject_pixel(&Vector2::new(x as f64, y as f64), z) {
            Ok(p) if z.is_finite() => out.push(LiftedPoint {
                pixel: (x, y),
                point: p.into(),
            }),
            _ => skipped += 1,
        }
    }
    (out, skipped)
}

/// Number of points kept by FPS: `⌈r·N⌉`, guarding against rounding just above an integer.
pub fn fps_count(n: usize, ratio: f64) -> usize {
    let raw = ratio * n as f64;
    let c = (raw - raw.abs() * 1e-12).ceil() as usize;
    c.clamp(1, n.max(1)).min(n)
}

/// Farthest point sampling to `⌈r·N⌉` points, in selection order. Starts at
/// index 0; ties go to the lowest index.
pub fn farthest_point_sample(points: &[Vector3<f64>], ratio: f64) -> Vec<usize> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let m = fps_count(n, ratio);
    let mut chosen = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(m);
    let mut cur = 0;
    for _ in 0..m {
        chosen[cur] = true;
        out.push(cur);
        let p = points[cur];
        let mut best: Option<usize> = None;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            let d = (points[i] - p).norm_squared();
            if d < min_d[i] {
                min_d[i] = d;
            }
            if best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        match best {
            Some(b) => cur = b,
            None => break,
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    NoDepth,
    NoNeighbor,
    Cap,
    NonFinite,
    Provenance,
}

/// Blends attributes of the `k` nearest deformed Gaussians within their gate
/// radius. `deformed` holds the scene with centers at the current stamp.
pub fn interpolate_attributes(
    candidates: &[Vector3<f64>],
    deformed: &[Gaussian3D],
    k: usize,
    radius_scale: f64,
) -> Vec<std::result::Result<Gaussian3D, Rejection>> {
    crate::par::map_slice(candidates, |c| {
        let mut near: Vec<(f64, usize)> = deformed.iter().enumerate().map(|(i, g)| ((g.mu0 - c).norm(), i)).collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        near.truncate(k);
        near.retain(|&(d, i)| d < radius_scale * 3.0 * deformed[i].mean_scale());
        if near.is_empty() {
            return Err(Rejection::NoNeighbor);
        }
        let coincident: Vec<_> = near.iter().filter(|(d, _)| *d <= 1e-12).copied().collect();
        let weighted: Vec<(f64, usize)> = if coincident.is_empty() {
            near.iter().map(|&(d, i)| (1.0 / d, i)).collect()
        } else {
            coincident.iter().map(|&(_, i)| (1.0, i)).collect()
        };
        let total: f64 = weighted.iter().map(|w| w.0).sum();
        let first_q = deformed[weighted[0].1].rotation;
        let mut scale = Vector3::zeros();
        let mut color = Vector3::zeros();
        let mut opacity = 0.0;
        let mut q = Vector4::zeros();
        for &(w, i) in &weighted {
            let g = &deformed[i];
            let w = w / total;
            scale += g.scale * w;
            color += g.color * w;
            opacity += g.opacity * w;
            let qi = if g.rotation.dot(&first_q) < 0.0 { -g.rotation } else { g.rotation };
            q += qi * w;
        }
        let q = if q.norm() > 1e-12 { q.normalize() } else { first_q };
        let g = Gaussian3D {
            mu0: *c,
            scale,
            rotation: q,
            color,
            opacity,
        };
        if g.is_finite() {
            Ok(g)
        } else {
            Err(Rejection::NonFinite)
        }
    })
}

/// Fixed-point inversion of `x + D(x, t) = g`. Returns the best iterate and
/// the residual after each iteration (index 0 is the starting residual).
pub fn to_canonical<D: Deformer + ?Sized>(
    g: &Vector3<f64>,
    field: &D,
    index: usize,
    t: TimeStamp,
    iters: usize,
) -> (Vector3<f64>, Vec<f64>) {
    let resid = |x: &Vector3<f64>| (field.position(index, x, t.t) - g).norm();
    let mut x = *g;
    let mut best = (resid(&x), x);
    let mut history = vec![best.0];
    for _ in 0..iters {
        x = g - field.displacement(index, &x, t.t);
        let r = resid(&x);
        if r > *history.last().unwrap() {
            warn!("canonical mapping is not contracting (residual {r:.3e})");
        }
        history.push(r);
        if r < best.0 {
            best = (r, x);
        }
    }
    (best.1, history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptedGaussian {
    pub pixel: (usize, usize),
    pub gaussian: Gaussian3D,
    pub reprojection_px: f64,
}

/// Audit record of one FAD event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensifyEvent {
    pub iteration: usize,
    pub camera: usize,
    pub t: f64,
    pub selected_pixels: Vec<(usize, usize)>,
    pub lifted_points: Vec<LiftedPoint>,
    /// Indices into `lifted_points`.
    pub sampled: Vec<usize>,
    pub accepted: Vec<AcceptedGaussian>,
    pub rejected: Vec<(Rejection, usize)>,
}

impl DensifyEvent {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn rejected_count(&self, reason: Rejection) -> usize {
        self.rejected.iter().filter(|(r, _)| *r == reason).map(|(_, n)| n).sum()
    }
}

/// Inputs of one FAD event for a single view and stamp.
pub struct FadInput<'a> {
    pub loss_map: &'a ScalarImage,
    pub warp_map: Option<&'a ScalarImage>,
    pub mask: &'a DynamicMask,
    pub depth: &'a ScalarImage,
    pub cam: &'a CameraModel,
    pub t: TimeStamp,
    pub iteration: usize,
    pub camera: usize,
}

/// Runs the FAD pipeline and returns new canonical Gaussians with the event
/// record. The scene itself is not modified.
pub fn flow_assisted_densify<D: Deformer + ?Sized>(
    scene: &CanonicalScene,
    field: &D,
    input: &FadInput,
    cfg: &FADConfig,
) -> Result<(Vec<Gaussian3D>, DensifyEvent)> {
    cfg.validate()?;
    let mut selected = select_pixels(input.loss_map, &gradient_magnitude(input.loss_map), input.mask, cfg)?;
    if cfg.use_warp_map {
        if let Some(wm) = input.warp_map {
            for p in select_pixels(wm, &gradient_magnitude(wm), input.mask, cfg)? {
                if !selected.contains(&p) {
                    selected.push(p);
                }
            }
            selected.sort_by_key(|&(x, y)| (y, x));
        }
    }
    let (lifted, no_depth) = lift_pixels(&selected, input.depth, input.cam);
    let pts: Vec<Vector3<f64>> = lifted.iter().map(|l| Vector3::from(l.point)).collect();
    let mut sampled = farthest_point_sample(&pts, cfg.fps_ratio);
    let mut rejected = vec![(Rejection::NoDepth, no_depth)];
    if sampled.len() > cfg.max_new_per_event {
        rejected.push((Rejection::Cap, sampled.len() - cfg.max_new_per_event));
        sampled.truncate(cfg.max_new_per_event);
    }
    let deformed: Vec<Gaussian3D> = crate::par::map_range(scene.len(), |i| {
        let mut g = scene.gaussians[i].clone();
        g.mu0 = field.position(i, &g.mu0, input.t.t);
        g
    });
    let cands: Vec<Vector3<f64>> = sampled.iter().map(|&i| pts[i]).collect();
    let blended = if deformed.is_empty() {
        vec![Err(Rejection::NoNeighbor); cands.len()]
    } else {
        interpolate_attributes(&cands, &deformed, cfg.k, cfg.radius_scale)
    };
    let mut accepted = Vec::new();
    let mut new = Vec::new();
    let mut counts = [0usize; 3];
    for (&li, res) in sampled.iter().zip(blended) {
        let mut g = match res {
            Ok(g) => g,
            Err(Rejection::NoNeighbor) => {
                counts[0] += 1;
                continue;
            }
            Err(_) => {
                counts[1] += 1;
                continue;
            }
        };
        let index = scene.len() + new.len();
        let at_t = g.mu0;
        let (canon, _) = to_canonical(&at_t, field, index, input.t, cfg.fixed_point_iters);
        g.mu0 = canon;
        g.opacity = g.opacity.max(cfg.min_opacity);
        g.project_constraints();
        let pixel = lifted[li].pixel;
        let reproj = input
            .cam
            .project_point(&field.position(index, &g.mu0, input.t.t))
            .map(|(p, _)| (p - Vector2::new(pixel.0 as f64, pixel.1 as f64)).norm())
            .unwrap_or(f64::INFINITY);
        if !g.is_finite() {
            counts[1] += 1;
            continue;
        }
        if !(reproj <= cfg.provenance_px) {
            counts[2] += 1;
            continue;
        }
        accepted.push(AcceptedGaussian {
            pixel,
            gaussian: g.clone(),
            reprojection_px: reproj,
        });
        new.push(g);
    }
    rejected.push((Rejection::NoNeighbor, counts[0]));
    rejected.push((Rejection::NonFinite, counts[1]));
    rejected.push((Rejection::Provenance, counts[2]));
    rejected.retain(|(_, n)| *n > 0);
    Ok((
        new,
        DensifyEvent {
            iteration: input.iteration,
            camera: input.camera,
            t: input.t.t,
            selected_pixels: selected,
            lifted_points: lifted,
            sampled,
            accepted,
            rejected,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConventionalConfig {
    /// Threshold on the mean screen-space center gradient.
    pub grad_threshold: f64,
    /// Gaussians larger than this fraction of the scene extent are split.
    pub split_fraction: f64,
    pub opacity_floor: f64,
    pub max_gaussians: usize,
}

impl Default for ConventionalConfig {
    fn default() -> Self {
        ConventionalConfig {
            grad_threshold: 2e-4,
            split_fraction: 0.01,
            opacity_floor: 0.005,
            max_gaussians: 5000,
        }
    }
}

/// Result of a conventional round. `origin[i]` is the pre-round index that
/// produced Gaussian `i`; `fresh[i]` marks clones and split children.
#[derive(Clone, Debug, PartialEq)]
pub struct DensifyOutcome {
    pub origin: Vec<usize>,
    pub fresh: Vec<bool>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clone small high-gradient Gaussians, split large ones, prune transparent ones.
pub fn conventional_densify_and_prune(
    scene: &mut CanonicalScene,
    grad_accum: &[f64],
    cfg: &ConventionalConfig,
    seed: u64,
) -> Result<DensifyOutcome> {
    if grad_accum.len() != scene.len() {
        return Err(Error::shape(format!(
            "{} gradient accumulators for {} Gaussians",
            grad_accum.len(),
            scene.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split_size = cfg.split_fraction * scene.extent();
    let mut kept = Vec::new();
    let mut origin = Vec::new();
    let mut fresh = Vec::new();
    let mut extra: Vec<(usize, Gaussian3D)> = Vec::new();
    let (mut cloned, mut split, mut pruned) = (0, 0, 0);
    let mut budget = cfg.max_gaussians.saturating_sub(scene.len());
    for (i, g) in scene.gaussians.iter().enumerate() {
        if g.opacity < cfg.opacity_floor {
            pruned += 1;
            continue;
        }
        let hot = grad_accum[i] > cfg.grad_threshold;
        let big = g.scale.max() > split_size;
        if hot && !big && budget > 0 {
            let mut c = g.clone();
            let cov = covariance_of(g);
            let l = cov.cholesky().map(|c| c.l()).unwrap_or_else(|| nalgebra::Matrix3::from_diagonal(&g.scale));
            let z = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            c.mu0 += l * z * 0.5;
            kept.push(g.clone());
            origin.push(i);
            fresh.push(false);
            extra.push((i, c));
            cloned += 1;
            budget -= 1;
        } else if hot && big && budget > 0 {
            let cov = covariance_of(g);
            let l = cov.cholesky().map(|c| c.l()).unwrap_or_else(|| nalgebra::Matrix3::from_diagonal(&g.scale));
            for _ in 0..2 {
                let z = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                let mut c = g.clone();
                c.mu0 += l * z;
                c.scale /= 1.6;
                extra.push((i, c));
            }
            split += 1;
            budget -= 1;
        } else {
            kept.push(g.clone());
            origin.push(i);
            fresh.push(false);
        }
    }
    for (i, g) in extra {
        kept.push(g);
        origin.push(i);
        fresh.push(true);
    }
    scene.gaussians = kept;
    Ok(DensifyOutcome {
        origin,
        fresh,
        cloned,
        split,
        pruned,
    })
}

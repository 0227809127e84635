//! Trajectory refinement of Gaussian centers with an extended Kalman filter
//! driven by optical flow.
//!
//! Each track is anchored to its canonical center `μ₀`. The forecast moves the
//! estimate along the learned field; the observation comes from flow
//! accumulated from the track's projected position at frame 0. Only Gaussians
//! on the visible surface of a view assimilate that view's flow.

use log::{debug, warn};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix3x2, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::deform::{deformation_jacobian, Deformer, TimeStamp};
use crate::error::{Error, Result};
use crate::image::{sample_bilinear, ScalarImage};
use crate::losses::FlowField;
use crate::par;
use crate::raster::{render_with, RenderOptions};
use crate::scene::{CameraModel, CanonicalScene};

/// Condition number above which the transition Jacobian falls back to identity.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub q: Matrix3<f64>,
    pub rn: Matrix2<f64>,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            q: Matrix3::identity() * 1e-4,
            rn: Matrix2::identity() * 0.5,
        }
    }
}

/// What the filter compares against accumulated flow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    /// `h(x) = project(x) − p₀` against the accumulated flow `Σ z_i`.
    #[default]
    Displacement,
    /// `h(x)` = the per-frame projected velocity against the current flow sample.
    Velocity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TvrConfig {
    pub q_scale: f64,
    pub rn_scale: f64,
    pub rel_tol: f64,
    pub delta: f64,
    pub mode: ObservationMode,
    /// Initial covariance (isotropic variance) at frame 0.
    pub p0_variance: f64,
}

impl Default for TvrConfig {
    fn default() -> Self {
        TvrConfig {
            q_scale: 1e-4,
            rn_scale: 0.5,
            rel_tol: 0.01,
            delta: 1e-3,
            mode: ObservationMode::Displacement,
            p0_variance: 0.0,
        }
    }
}

impl TvrConfig {
    pub fn noise(&self) -> NoiseModel {
        NoiseModel {
            q: Matrix3::identity() * self.q_scale,
            rn: Matrix2::identity() * self.rn_scale,
        }
    }
}

/// Flow bookkeeping of one track in one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTrack {
    pub p0: Vector2<f64>,
    pub z_accum: Vector2<f64>,
    /// Every observation appended to `z_accum`, in order.
    pub observations: Vec<Vector2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EKFTrack {
    pub index: usize,
    pub mu0: Vector3<f64>,
    pub x: Vector3<f64>,
    pub p: Matrix3<f64>,
    pub visible: bool,
    pub views: Vec<ViewTrack>,
}

impl EKFTrack {
    /// Starts at the deformed position at frame 0.
    pub fn new<D: Deformer + ?Sized>(
        field: &D,
        index: usize,
        mu0: Vector3<f64>,
        t0: TimeStamp,
        cams: &[CameraModel],
        p0_variance: f64,
    ) -> Self {
        let x = field.position(index, &mu0, t0.t);
        let views = cams
            .iter()
            .map(|c| ViewTrack {
                p0: c.project_point(&x).map(|(p, _)| p).unwrap_or_else(|_| Vector2::new(f64::NAN, f64::NAN)),
                z_accum: Vector2::zeros(),
                observations: Vec::new(),
            })
            .collect();
        EKFTrack {
            index,
            mu0,
            x,
            p: Matrix3::identity() * p0_variance,
            visible: true,
            views,
        }
    }
}

/// `J_{Φ_t}(μ₀) · J_{Φ_{t−1}}(μ₀)⁻¹`.
pub fn jacobian_f<D: Deformer + ?Sized>(
    field: &D,
    index: usize,
    mu0: &Vector3<f64>,
    t_prev: TimeStamp,
    t: TimeStamp,
    delta: f64,
) -> Result<Matrix3<f64>> {
    let j_prev = deformation_jacobian(field, index, mu0, t_prev, delta);
    let j_t = deformation_jacobian(field, index, mu0, t, delta);
    let sv = j_prev.singular_values();
    let condition = sv.max() / sv.min();
    if !(condition < MAX_CONDITION) {
        return Err(Error::SingularJacobian { condition });
    }
    let inv = j_prev.try_inverse().ok_or(Error::SingularJacobian { condition })?;
    Ok(j_t * inv)
}

/// Projected per-frame velocity the Gaussian would have if it sat at `x`.
pub fn observe_h<D: Deformer + ?Sized>(
    x: &Vector3<f64>,
    field: &D,
    index: usize,
    mu0: &Vector3<f64>,
    t: TimeStamp,
    cam: &CameraModel,
) -> Result<Vector2<f64>> {
    let step = field.position(index, mu0, t.next().t) - field.position(index, mu0, t.t);
    let (a, _) = cam.project_point(x)?;
    let (b, _) = cam.project_point(&(x + step))?;
    Ok(b - a)
}

/// Central-difference Jacobian of [`observe_h`] in `x`.
pub fn jacobian_h<D: Deformer + ?Sized>(
    x: &Vector3<f64>,
    field: &D,
    index: usize,
    mu0: &Vector3<f64>,
    t: TimeStamp,
    cam: &CameraModel,
    delta: f64,
) -> Result<Matrix2x3<f64>> {
    let mut j = Matrix2x3::zeros();
    for c in 0..3 {
        let mut e = Vector3::zeros();
        e[c] = delta;
        let plus = observe_h(&(x + e), field, index, mu0, t, cam)?;
        let minus = observe_h(&(x - e), field, index, mu0, t, cam)?;
        j.set_column(c, &((plus - minus) / (2.0 * delta)));
    }
    Ok(j)
}

/// Forecast step. Falls back to an identity transition when the field
/// Jacobian is singular; the flag reports it.
pub fn forecast<D: Deformer + ?Sized>(
    track: &EKFTrack,
    field: &D,
    noise: &NoiseModel,
    t_prev: TimeStamp,
    t: TimeStamp,
    delta: f64,
) -> (Vector3<f64>, Matrix3<f64>, bool) {
    let (j_f, fallback) = match jacobian_f(field, track.index, &track.mu0, t_prev, t, delta) {
        Ok(j) => (j, false),
        Err(e) => {
            debug!("track {}: {e}; identity transition", track.index);
            (Matrix3::identity(), true)
        }
    };
    let nom_prev = field.position(track.index, &track.mu0, t_prev.t);
    let nom_t = field.position(track.index, &track.mu0, t.t);
    let x_f = track.x + (nom_t - nom_prev) + (j_f - Matrix3::identity()) * (track.x - nom_prev);
    let p_f = j_f * track.p * j_f.transpose() + noise.q;
    (x_f, p_f, fallback)
}

/// Standard EKF assimilation. Returns the posterior and the gain.
pub fn kalman_update(
    x: &Vector3<f64>,
    p: &Matrix3<f64>,
    innovation: &Vector2<f64>,
    j_h: &Matrix2x3<f64>,
    rn: &Matrix2<f64>,
) -> Result<(Vector3<f64>, Matrix3<f64>, Matrix3x2<f64>)> {
    let s = j_h * p * j_h.transpose() + rn;
    let s_inv = s.try_inverse().ok_or(Error::SingularInnovation)?;
    if !s_inv.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularInnovation);
    }
    let k = p * j_h.transpose() * s_inv;
    let x_new = x + k * innovation;
    let p_new = (Matrix3::identity() - k * j_h) * p;
    Ok((x_new, p_new, k))
}

/// Symmetrizes and clamps negative eigenvalues to zero. Returns the minimum
/// eigenvalue seen before the clamp.
pub fn make_psd(p: &Matrix3<f64>) -> (Matrix3<f64>, f64) {
    let sym = (p + p.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return (sym, min);
    }
    if min < -1e-10 {
        warn!("covariance eigenvalue {min:.3e} below tolerance");
    }
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let fixed = eig.eigenvectors * Matrix3::from_diagonal(&vals) * eig.eigenvectors.transpose();
    ((fixed + fixed.transpose()) * 0.5, min)
}

/// Visible iff camera depth ≤ rendered depth at the projected pixel × (1 + rel_tol).
pub fn surface_filter(
    positions: &[Vector3<f64>],
    cam: &CameraModel,
    depth_map: &ScalarImage,
    rel_tol: f64,
) -> Vec<bool> {
    positions.iter().map(|x| surface_visible(x, cam, depth_map, rel_tol)).collect()
}

pub fn surface_visible(x: &Vector3<f64>, cam: &CameraModel, depth_map: &ScalarImage, rel_tol: f64) -> bool {
    let Ok((p, z)) = cam.project_point(x) else {
        return false;
    };
    let (px, py) = (p.x.round(), p.y.round());
    if px < 0.0 || py < 0.0 || px >= depth_map.width() as f64 || py >= depth_map.height() as f64 {
        return false;
    }
    let d = *depth_map.get(px as usize, py as usize);
    d.is_infinite() || z <= d * (1.0 + rel_tol)
}

/// `z_k = F_k(p₀ + Σ z_i)` by bilinear sampling; the flag is false when the
/// sample point left the image or hit an invalid flow pixel.
pub fn locate_flow(flow: &FlowField, p0: &Vector2<f64>, z_accum: &Vector2<f64>) -> (Vector2<f64>, bool) {
    let s = p0 + z_accum;
    let sample = sample_bilinear(&flow.data, s.x, s.y);
    let (x0, y0) = sample.corner;
    let x1 = (x0 + 1).min(flow.data.width() - 1);
    let y1 = (y0 + 1).min(flow.data.height() - 1);
    let valid = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
        .iter()
        .all(|&(x, y)| *flow.valid.get(x, y));
    (Vector2::from(sample.value), sample.in_bounds && valid)
}

/// Per-step diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLog {
    pub fallback: bool,
    pub assimilated: usize,
    pub skipped_singular: usize,
    pub min_eigenvalue: f64,
}

/// One step `t_prev → t`. `flows[c]` maps `t_prev → t` in view `c`;
/// `depths[c]` is the rendered depth at `t_prev`.
#[allow(clippy::too_many_arguments)]
pub fn ekf_step<D: Deformer + ?Sized>(
    track: &EKFTrack,
    noise: &NoiseModel,
    field: &D,
    t_prev: TimeStamp,
    t: TimeStamp,
    cams: &[CameraModel],
    flows: &[&FlowField],
    depths: &[&ScalarImage],
    cfg: &TvrConfig,
) -> (EKFTrack, StepLog) {
    let mut log = StepLog::default();
    let (x_f, p_f, fallback) = forecast(track, field, noise, t_prev, t, cfg.delta);
    log.fallback = fallback;
    let mut next = track.clone();
    next.x = x_f;
    next.p = p_f;
    next.visible = false;
    for (c, cam) in cams.iter().enumerate() {
        let view = &track.views[c];
        let visible = view.p0.x.is_finite() && surface_visible(&track.x, cam, depths[c], cfg.rel_tol);
        let (z, in_bounds) = if visible {
            locate_flow(flows[c], &view.p0, &view.z_accum)
        } else {
            (Vector2::zeros(), false)
        };
        let obs = if visible && in_bounds {
            let update = match cfg.mode {
                ObservationMode::Displacement => cam.projection_jacobian(&next.x).and_then(|j_h| {
                    let (p, _) = cam.project_point(&next.x)?;
                    let innovation = view.z_accum + z - (p - view.p0);
                    kalman_update(&next.x, &next.p, &innovation, &j_h, &noise.rn)
                }),
                ObservationMode::Velocity => {
                    let step = field.position(track.index, &track.mu0, t.t) - field.position(track.index, &track.mu0, t_prev.t);
                    let at = next.x - step;
                    observe_h(&at, field, track.index, &track.mu0, t_prev, cam).and_then(|h| {
                        let j_h = jacobian_h(&at, field, track.index, &track.mu0, t_prev, cam, cfg.delta)?;
                        kalman_update(&next.x, &next.p, &(z - h), &j_h, &noise.rn)
                    })
                }
            };
            match update {
                Ok((x, p, _)) => {
                    next.x = x;
                    next.p = p;
                    next.visible = true;
                    log.assimilated += 1;
                }
                Err(Error::SingularInnovation) => {
                    debug!("track {}: singular innovation, skipping view {c}", track.index);
                    log.skipped_singular += 1;
                }
                Err(_) => {}
            }
            z
        } else {
            // Not trackable in this view: re-anchor the flow track on the forecast.
            match cam.project_point(&next.x) {
                Ok((p, _)) if view.p0.x.is_finite() => p - view.p0 - view.z_accum,
                _ => Vector2::zeros(),
            }
        };
        let v = &mut next.views[c];
        v.z_accum += obs;
        v.observations.push(obs);
    }
    let (p, min) = make_psd(&next.p);
    next.p = p;
    log.min_eigenvalue = min;
    (next, log)
}

/// Refined centers of one Gaussian over every frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub index: usize,
    pub frames: Vec<[f64; 3]>,
    pub visible: Vec<bool>,
    #[serde(skip)]
    pub min_eigenvalue: f64,
    #[serde(skip)]
    pub fallbacks: usize,
}

impl Trajectory {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Runs the filter for every Gaussian. `flows[c][k]` maps frame k to k+1 and
/// `depths[c][k]` is the rendered depth at frame k.
pub fn refine_trajectories<D: Deformer + ?Sized>(
    scene: &CanonicalScene,
    field: &D,
    cams: &[CameraModel],
    flows: &[Vec<FlowField>],
    depths: &[Vec<ScalarImage>],
    n_frames: usize,
    cfg: &TvrConfig,
) -> Result<Vec<Trajectory>> {
    if flows.len() != cams.len() || depths.len() != cams.len() {
        return Err(Error::shape(format!(
            "{} cameras, {} flow sequences, {} depth sequences",
            cams.len(),
            flows.len(),
            depths.len()
        )));
    }
    for c in 0..cams.len() {
        if flows[c].len() + 1 < n_frames || depths[c].len() + 1 < n_frames {
            return Err(Error::shape(format!("camera {c} lacks flow or depth for {n_frames} frames")));
        }
    }
    let noise = cfg.noise();
    Ok(par::map_range(scene.len(), |i| {
        let g = &scene.gaussians[i];
        let mut track = EKFTrack::new(field, i, g.mu0, TimeStamp::frame(0, n_frames), cams, cfg.p0_variance);
        let mut frames = vec![track.x.into()];
        let mut visible = vec![true];
        let mut min_eig = f64::INFINITY;
        let mut fallbacks = 0;
        for k in 1..n_frames {
            let fl: Vec<&FlowField> = flows.iter().map(|f| &f[k - 1]).collect();
            let dp: Vec<&ScalarImage> = depths.iter().map(|d| &d[k - 1]).collect();
            let (next, log) = ekf_step(
                &track,
                &noise,
                field,
                TimeStamp::frame(k - 1, n_frames),
                TimeStamp::frame(k, n_frames),
                cams,
                &fl,
                &dp,
                cfg,
            );
            min_eig = min_eig.min(log.min_eigenvalue);
            fallbacks += log.fallback as usize;
            track = next;
            frames.push(track.x.into());
            visible.push(track.visible);
        }
        Trajectory {
            index: i,
            frames,
            visible,
            min_eigenvalue: min_eig,
            fallbacks,
        }
    }))
}

/// Refines every Gaussian against a dataset's flows, with depth rendered
/// from `field` in every view.
pub fn refine_dataset<D: Deformer + ?Sized>(
    scene: &CanonicalScene,
    field: &D,
    data: &Dataset,
    cfg: &TvrConfig,
) -> Result<Vec<Trajectory>> {
    let n = data.n_frames;
    let jobs: Vec<(usize, usize)> = (0..data.cameras.len()).flat_map(|c| (0..n).map(move |k| (c, k))).collect();
    let rendered = par::map_slice(&jobs, |&(c, k)| {
        render_with(scene, field, data.stamp(k), &data.cameras[c], RenderOptions::color_only()).depth
    });
    let mut depths = vec![Vec::with_capacity(n); data.cameras.len()];
    for (&(c, _), d) in jobs.iter().zip(rendered) {
        depths[c].push(d);
    }
    refine_trajectories(scene, field, &data.cameras, &data.flows, &depths, n, cfg)
}

pub fn trajectories_to_jsonl(trajectories: &[Trajectory]) -> Result<String> {
    let mut s = String::new();
    for t in trajectories {
        s.push_str(&t.to_json_line()?);
        s.push('\n');
    }
    Ok(s)
}

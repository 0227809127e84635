//! The optimization loop: sliding-window sampling, loss assembly, Adam
//! updates, densification schedule, checkpoints and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info};
use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::deform::{DeformationField, Deformer, FieldCache, FieldShape, TimeStamp};
use crate::densify::{conventional_densify_and_prune, flow_assisted_densify, ConventionalConfig, DensifyEvent, FADConfig, FadInput};
use crate::error::{Error, Result};
use crate::image::{ColorImage, Plane, ScalarImage, VectorImage};
use crate::losses::{
    loss_dyn_grad, loss_photometric_grad, loss_warp_grad, loss_win_grad, LossReport, LossWeights,
};
use crate::metrics::{dpsnr, psnr, ssim, velocity_epe, EvalReport, FrameEval};
use crate::par;
use crate::raster::{chain_splats, render_backward, render_with, CenterGrad, RenderBuffers, RenderOptions, SceneGradients, Upstream};
use crate::scene::{cameras_from_json, cameras_to_json, CameraModel, CanonicalScene};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Multiplied by the initial scene extent.
    pub centers: f64,
    /// Applied in log space.
    pub scales: f64,
    pub rotations: f64,
    pub colors: f64,
    pub opacities: f64,
    pub field: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            centers: 1.6e-4,
            scales: 5e-3,
            rotations: 1e-3,
            colors: 2.5e-3,
            opacities: 5e-2,
            field: 1e-3,
        }
    }
}

impl LearningRates {
    fn all(&self) -> [f64; 6] {
        [self.centers, self.scales, self.rotations, self.colors, self.opacities, self.field]
    }
}

/// How the dataset's point cloud seeds the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Keep geometry, reset color and opacity to the configured constants.
    #[default]
    PointsOnly,
    AsGiven,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: LearningRates,
    pub weights: LossWeights,
    pub tau: usize,
    pub seed: u64,
    pub warmup_static_iters: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_every: usize,
    pub conventional_enabled: bool,
    pub conventional: ConventionalConfig,
    pub fad_enabled: bool,
    pub fad_every: usize,
    pub fad: FADConfig,
    /// Cameras never used for training.
    pub held_out: Vec<usize>,
    pub field: FieldShape,
    pub init: InitMode,
    pub init_color: f64,
    pub init_opacity: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            lr: LearningRates::default(),
            weights: LossWeights::default(),
            tau: 8,
            seed: 0,
            warmup_static_iters: 500,
            densify_from: 500,
            densify_until: 2500,
            densify_every: 100,
            conventional_enabled: true,
            conventional: ConventionalConfig::default(),
            fad_enabled: true,
            fad_every: 500,
            fad: FADConfig::default(),
            held_out: vec![0],
            field: FieldShape::default(),
            init: InitMode::PointsOnly,
            init_color: 0.5,
            init_opacity: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        if self.lr.all().iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Config(format!("learning rates must be positive: {:?}", self.lr)));
        }
        if self.densify_every == 0 || self.fad_every == 0 {
            return Err(Error::Config("densification cadences must be positive".into()));
        }
        self.fad.validate()
    }

    /// Photometric-only training: every flow term weighted zero.
    pub fn photometric_only(mut self) -> Self {
        self.weights.win = 0.0;
        self.weights.warp = 0.0;
        self.weights.dyn_ = 0.0;
        self
    }

    /// Weights active at `iteration` (flow terms are off during warmup).
    pub fn weights_at(&self, iteration: usize) -> LossWeights {
        if iteration < self.warmup_static_iters {
            LossWeights {
                photometric: self.weights.photometric,
                win: 0.0,
                warp: 0.0,
                dyn_: 0.0,
            }
        } else {
            self.weights
        }
    }
}

/// Stamps `start..start + τ` of one training camera.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub camera: usize,
    pub stamps: Vec<usize>,
}

/// Uniform start with `start + τ ≤ n_frames − 1` and a uniform camera. The
/// draw depends only on `seed` and `iteration`.
pub fn sample_window(n_frames: usize, tau: usize, iteration: usize, cameras: &[usize], seed: u64) -> Result<Window> {
    if tau == 0 || tau + 1 > n_frames {
        return Err(Error::Config(format!("window of {tau} needs more than {n_frames} frames")));
    }
    if cameras.is_empty() {
        return Err(Error::Config("no training cameras".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    let start = rng.random_range(0..n_frames - tau);
    let camera = cameras[rng.random_range(0..cameras.len())];
    Ok(Window {
        start,
        camera,
        stamps: (start..start + tau).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub scene: CanonicalScene,
    pub field: DeformationField,
}

/// Values per Gaussian in the optimizer: center, log-scale, rotation, color, opacity.
pub const GAUSSIAN_PARAMS: usize = 14;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub gauss_m: Vec<[f64; GAUSSIAN_PARAMS]>,
    pub gauss_v: Vec<[f64; GAUSSIAN_PARAMS]>,
    pub field_m: Vec<f64>,
    pub field_v: Vec<f64>,
}

#[inline]
fn adam_delta(m: &mut f64, v: &mut f64, g: f64, lr: f64, bc1: f64, bc2: f64) -> f64 {
    *m = BETA1 * *m + (1.0 - BETA1) * g;
    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
    lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS)
}

impl Adam {
    pub fn new(n_gaussians: usize, n_field: usize) -> Self {
        Adam {
            step: 0,
            gauss_m: vec![[0.0; GAUSSIAN_PARAMS]; n_gaussians],
            gauss_v: vec![[0.0; GAUSSIAN_PARAMS]; n_gaussians],
            field_m: vec![0.0; n_field],
            field_v: vec![0.0; n_field],
        }
    }

    /// Carries moments across a densification round; fresh entries start at zero.
    pub fn remap(&mut self, origin: &[usize], fresh: &[bool]) {
        let pick = |src: &[[f64; GAUSSIAN_PARAMS]]| -> Vec<[f64; GAUSSIAN_PARAMS]> {
            origin
                .iter()
                .zip(fresh)
                .map(|(&o, &f)| if f { [0.0; GAUSSIAN_PARAMS] } else { src[o] })
                .collect()
        };
        self.gauss_m = pick(&self.gauss_m);
        self.gauss_v = pick(&self.gauss_v);
    }

    pub fn grow(&mut self, extra: usize) {
        let n = self.gauss_m.len() + extra;
        self.gauss_m.resize(n, [0.0; GAUSSIAN_PARAMS]);
        self.gauss_v.resize(n, [0.0; GAUSSIAN_PARAMS]);
    }

    /// One update of every parameter; constraints are re-projected afterwards.
    pub fn apply(&mut self, model: &mut Model, grads: &SceneGradients, lr: &LearningRates, extent: f64) -> Result<()> {
        let n = model.scene.len();
        if grads.mu0.len() != n || self.gauss_m.len() != n || grads.field.len() != self.field_m.len() {
            return Err(Error::shape(format!(
                "optimizer holds {} Gaussians / {} field weights, gradients {} / {}, scene {n}",
                self.gauss_m.len(),
                self.field_m.len(),
                grads.mu0.len(),
                grads.field.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let lr_c = lr.centers * extent;
        for (i, g) in model.scene.gaussians.iter_mut().enumerate() {
            let (m, v) = (&mut self.gauss_m[i], &mut self.gauss_v[i]);
            for k in 0..3 {
                g.mu0[k] -= adam_delta(&mut m[k], &mut v[k], grads.mu0[i][k], lr_c, bc1, bc2);
                let d = adam_delta(&mut m[3 + k], &mut v[3 + k], grads.scale[i][k] * g.scale[k], lr.scales, bc1, bc2);
                g.scale[k] *= (-d).exp();
                g.color[k] -= adam_delta(&mut m[10 + k], &mut v[10 + k], grads.color[i][k], lr.colors, bc1, bc2);
            }
            for k in 0..4 {
                g.rotation[k] -= adam_delta(&mut m[6 + k], &mut v[6 + k], grads.rotation[i][k], lr.rotations, bc1, bc2);
            }
            g.opacity -= adam_delta(&mut m[13], &mut v[13], grads.opacity[i], lr.opacities, bc1, bc2);
            g.project_constraints();
        }
        let params = model.field.params_mut();
        for (k, p) in params.iter_mut().enumerate() {
            *p -= adam_delta(&mut self.field_m[k], &mut self.field_v[k], grads.field[k], lr.field, bc1, bc2);
        }
        Ok(())
    }

    const MAGIC: &'static [u8; 4] = b"FSOP";
    const VERSION: u32 = 1;

    /// "FSOP", version, step, Gaussian count, field size, then first and
    /// second moments as little-endian f64 (Gaussians row by row, then field).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.gauss_m.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.field_m.len() as u64).to_le_bytes());
        for rows in [&self.gauss_m, &self.gauss_v] {
            for r in rows.iter() {
                for v in r {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        for col in [&self.field_m, &self.field_v] {
            for v in col.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != Self::MAGIC {
            return Err(Error::Format("not an optimizer state file".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != Self::VERSION {
            return Err(Error::Format(format!("unsupported optimizer version {version}")));
        }
        let step = cur.u64()?;
        let n = cur.u64()? as usize;
        let nf = cur.u64()? as usize;
        let rows = |cur: &mut Cursor| -> Result<Vec<[f64; GAUSSIAN_PARAMS]>> {
            (0..n)
                .map(|_| {
                    let mut r = [0.0; GAUSSIAN_PARAMS];
                    for v in &mut r {
                        *v = cur.f64()?;
                    }
                    Ok(r)
                })
                .collect()
        };
        let gauss_m = rows(&mut cur)?;
        let gauss_v = rows(&mut cur)?;
        let field_m = (0..nf).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        let field_v = (0..nf).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after optimizer state".into()));
        }
        Ok(Adam {
            step,
            gauss_m,
            gauss_v,
            field_m,
            field_v,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("optimizer state is truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Everything a step produced besides the parameter update.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub report: LossReport,
    pub grads: SceneGradients,
    /// Norm of each Gaussian's summed screen-space center gradient.
    pub screen_grad: Vec<f64>,
    pub visible: Vec<bool>,
    /// Rendered depth at the window's first stamp.
    pub depth: ScalarImage,
}

fn scaled<const N: usize>(p: &Plane<[f64; N]>, s: f64) -> Plane<[f64; N]> {
    p.map(|v| v.map(|x| x * s))
}

fn add_into<const N: usize>(dst: &mut Option<Plane<[f64; N]>>, src: Plane<[f64; N]>) {
    match dst {
        Some(d) => {
            for (a, b) in d.data_mut().iter_mut().zip(src.data()) {
                for k in 0..N {
                    a[k] += b[k];
                }
            }
        }
        None => *dst = Some(src),
    }
}

fn first_non_finite<const N: usize>(p: &Plane<[f64; N]>) -> Option<(usize, usize)> {
    p.data()
        .iter()
        .position(|v| v.iter().any(|x| !x.is_finite()))
        .map(|i| (i % p.width(), i / p.width()))
}

fn non_finite_render(model: &Model, buffers: &[RenderBuffers], term: &str) -> Error {
    for b in buffers {
        if let Some((x, y)) = first_non_finite(&b.color).or_else(|| first_non_finite(&b.velocity)) {
            let gaussian = b
                .splats
                .iter()
                .find(|s| !(s.center.iter().all(|v| v.is_finite()) && s.cov.iter().all(|v| v.is_finite())))
                .map(|s| s.index);
            return Error::NonFiniteLoss {
                detail: format!("{term} loss is not finite; first bad pixel ({x}, {y})"),
                gaussian,
            };
        }
    }
    let gaussian = model.scene.gaussians.iter().position(|g| !g.is_finite());
    Error::NonFiniteLoss {
        detail: format!("{term} loss is not finite"),
        gaussian,
    }
}

/// Renders the window, assembles the weighted loss and returns its gradients.
/// Field outputs for every Gaussian at a fixed set of times, shared by all
/// render passes of one step.
struct StampTable<'a> {
    field: &'a DeformationField,
    times: Vec<f64>,
    disp: Vec<Vec<Vector3<f64>>>,
    caches: Vec<Vec<FieldCache>>,
}

impl<'a> StampTable<'a> {
    fn new(field: &'a DeformationField, scene: &CanonicalScene, mut times: Vec<f64>) -> Self {
        times.sort_by(f64::total_cmp);
        times.dedup_by(|a, b| a.to_bits() == b.to_bits());
        let mut disp = Vec::with_capacity(times.len());
        let mut caches = Vec::with_capacity(times.len());
        for &t in &times {
            let (d, c): (Vec<_>, Vec<_>) = par::map_slice(&scene.gaussians, |g| field.forward_cached(&g.mu0, t)).into_iter().unzip();
            disp.push(d);
            caches.push(c);
        }
        StampTable { field, times, disp, caches }
    }

    fn slot(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|s| s.to_bits() == t.to_bits())
    }
}

impl Deformer for StampTable<'_> {
    fn displacement(&self, index: usize, mu0: &Vector3<f64>, t: f64) -> Vector3<f64> {
        match self.slot(t) {
            Some(k) => self.disp[k][index],
            None => self.field.displacement(index, mu0, t),
        }
    }
}

pub fn compute_gradients(model: &Model, data: &Dataset, window: &Window, weights: &LossWeights) -> Result<StepOutput> {
    if let Some(i) = model.scene.gaussians.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            detail: format!("Gaussian {i} has non-finite attributes: {:?}", model.scene.gaussians[i]),
            gaussian: Some(i),
        });
    }
    let (c, start) = (window.camera, window.start);
    let tau = window.stamps.len();
    let cam = &data.cameras[c];
    let need_vel = weights.win != 0.0;
    let need_warp = weights.warp != 0.0;
    let n_render = if need_warp { tau + 1 } else { tau };
    if start + n_render > data.n_frames || start + tau > data.flows[c].len() + usize::from(!need_vel) * tau {
        return Err(Error::shape(format!("window at {start} of {tau} exceeds {} frames", data.n_frames)));
    }
    let opts_at = |j: usize| RenderOptions {
        velocity: need_vel && j < tau,
        velocity_back: need_warp && j >= 1,
    };
    let mut times = Vec::new();
    for j in 0..n_render {
        let s = data.stamp(start + j);
        times.push(s.t);
        if opts_at(j).velocity {
            times.push(s.next().t);
        }
        if opts_at(j).velocity_back {
            times.push(s.offset(-1).t);
        }
    }
    let table = StampTable::new(&model.field, &model.scene, times);
    let renders = par::map_range(n_render, |j| render_with(&model.scene, &table, data.stamp(start + j), cam, opts_at(j)));
    let (w, h) = (cam.width, cam.height);
    let mut up: Vec<Upstream> = vec![Upstream::default(); n_render];
    let inv_tau = 1.0 / tau as f64;

    let mut photometric = 0.0;
    let mut dyn_ = 0.0;
    for j in 0..tau {
        let truth = &data.frames[c][start + j];
        if weights.photometric != 0.0 {
            let (l, g) = loss_photometric_grad(&renders[j].color, truth)?;
            photometric += l * inv_tau;
            add_into(&mut up[j].color, scaled(&g, weights.photometric * inv_tau));
        }
        if weights.dyn_ != 0.0 {
            let (l, g) = loss_dyn_grad(&renders[j].color, truth, &data.masks[c][start + j])?;
            dyn_ += l * inv_tau;
            add_into(&mut up[j].color, scaled(&g, weights.dyn_ * inv_tau));
        }
    }
    let mut win = 0.0;
    let mut win_map = Plane::filled(w, h, 0.0);
    if need_vel {
        let rendered: Vec<VectorImage> = renders[..tau].iter().map(|r| r.velocity.clone()).collect();
        let wl = loss_win_grad(&rendered, &data.flows[c][start..start + tau], tau)?;
        win = wl.value;
        win_map = wl.map;
        for (j, g) in wl.grads.into_iter().enumerate() {
            up[j].velocity = Some(scaled(&g, weights.win));
        }
    }
    let mut warp = 0.0;
    let mut warp_map = Plane::filled(w, h, 0.0);
    if need_warp {
        for j in 0..tau {
            let wl = loss_warp_grad(&renders[j + 1].color, &renders[j + 1].velocity_back, &data.frames[c][start + j])?;
            warp += wl.value * inv_tau;
            add_into(&mut up[j + 1].color, scaled(&wl.d_rendered_next, weights.warp * inv_tau));
            up[j + 1].velocity_back = Some(scaled(&wl.d_back_velocity, weights.warp * inv_tau));
            if j == 0 {
                warp_map = wl.map;
            }
        }
    }
    let report = LossReport::new(photometric, win, warp, dyn_, weights, win_map, warp_map);
    if !report.total.is_finite() {
        let term = [("photometric", photometric), ("win", win), ("warp", warp), ("dyn", dyn_)]
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
            .unwrap_or("total");
        return Err(non_finite_render(model, &renders, term));
    }

    let n = model.scene.len();
    let per_frame = par::map_range(n_render, |j| -> Result<(SceneGradients, Vec<CenterGrad>, Vec<(usize, nalgebra::Vector2<f64>)>)> {
        let rg = render_backward(&renders[j], &up[j])?;
        let mut sg = SceneGradients::zeros(n, 0);
        let centers = chain_splats(&rg, &renders[j], &table, &model.scene, data.stamp(start + j), cam, &mut sg);
        let screen = rg.indices.iter().zip(&rg.splats).map(|(&i, g)| (i, g.center)).collect();
        Ok((sg, centers, screen))
    });
    let mut grads = SceneGradients::zeros(n, model.field.num_params());
    let mut screen = vec![nalgebra::Vector2::zeros(); n];
    let mut visible = vec![false; n];
    // Center gradients summed per (time, Gaussian); the field backward is linear in them.
    let mut d_pos = vec![vec![Vector3::zeros(); n]; table.times.len()];
    for (j, res) in per_frame.into_iter().enumerate() {
        let (sg, centers, sc) = res?;
        for i in 0..n {
            grads.mu0[i] += sg.mu0[i];
            grads.scale[i] += sg.scale[i];
            grads.rotation[i] += sg.rotation[i];
            grads.color[i] += sg.color[i];
            grads.opacity[i] += sg.opacity[i];
        }
        let stamp = data.stamp(start + j);
        for c in centers {
            let k = table.slot(stamp.offset(c.step).t).expect("every rendered time is tabulated");
            d_pos[k][c.index] += c.d_pos;
        }
        for (i, c) in sc {
            screen[i] += c;
            visible[i] = true;
        }
    }
    for (k, d) in d_pos.iter().enumerate() {
        let d_x = model.field.backward_batch(&table.caches[k], d, &mut grads.field);
        for i in 0..n {
            // μ_t = μ₀ + D(μ₀, t): identity path plus the field's input gradient.
            grads.mu0[i] += d[i] + d_x[i];
        }
    }
    let bad = (0..n).find(|&i| {
        !(grads.mu0[i].iter().all(|v| v.is_finite())
            && grads.scale[i].iter().all(|v| v.is_finite())
            && grads.rotation[i].iter().all(|v| v.is_finite())
            && grads.color[i].iter().all(|v| v.is_finite())
            && grads.opacity[i].is_finite())
    });
    if let Some(i) = bad {
        return Err(Error::NonFiniteLoss {
            detail: format!("gradient of Gaussian {i} is not finite"),
            gaussian: Some(i),
        });
    }
    if grads.field.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            detail: "deformation field gradient is not finite".into(),
            gaussian: None,
        });
    }
    let depth = renders.into_iter().next().map(|r| r.depth).unwrap_or_else(|| Plane::filled(w, h, f64::INFINITY));
    Ok(StepOutput {
        report,
        grads,
        screen_grad: screen.iter().map(|v| v.norm()).collect(),
        visible,
        depth,
    })
}

/// One optimizer step on `window`.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    data: &Dataset,
    window: &Window,
    weights: &LossWeights,
    lr: &LearningRates,
    extent: f64,
) -> Result<StepOutput> {
    let out = compute_gradients(model, data, window, weights)?;
    opt.apply(model, &out.grads, lr, extent)?;
    Ok(out)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub camera: usize,
    pub start: usize,
    pub photometric: f64,
    pub win: f64,
    pub warp: f64,
    pub dyn_: f64,
    pub total: f64,
    pub n_gaussians: usize,
    pub grad_mu0: f64,
    pub grad_scale: f64,
    pub grad_rotation: f64,
    pub grad_color: f64,
    pub grad_opacity: f64,
    pub grad_field: f64,
}

pub const LOG_COLUMNS: &str = "iteration,camera,start,photometric,win,warp,dyn,total,n_gaussians,grad_mu0,grad_scale,grad_rotation,grad_color,grad_opacity,grad_field";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub events: Vec<DensifyEvent>,
    pub evals: Vec<(usize, EvalReport)>,
}

fn norm_of<'a>(it: impl Iterator<Item = &'a f64>) -> f64 {
    it.map(|v| v * v).sum::<f64>().sqrt()
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_COLUMNS);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.camera,
                r.start,
                r.photometric,
                r.win,
                r.warp,
                r.dyn_,
                r.total,
                r.n_gaussians,
                r.grad_mu0,
                r.grad_scale,
                r.grad_rotation,
                r.grad_color,
                r.grad_opacity,
                r.grad_field
            )
            .expect("writing to a String cannot fail");
        }
        s
    }

    pub fn events_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&e.to_json_line()?);
            s.push('\n');
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    iteration: usize,
    n_frames: usize,
}

/// Trained model with optimizer state, stored as one directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optim: Adam,
    pub iteration: usize,
    pub n_frames: usize,
    pub cameras: Vec<CameraModel>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("scene.json"), self.model.scene.to_json()?)?;
        fs::write(dir.join("field.bin"), self.model.field.to_bytes())?;
        fs::write(dir.join("optim.bin"), self.optim.to_bytes())?;
        fs::write(dir.join("cameras.json"), cameras_to_json(&self.cameras)?)?;
        let meta = CheckpointMeta {
            iteration: self.iteration,
            n_frames: self.n_frames,
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let scene = CanonicalScene::from_json(&fs::read_to_string(dir.join("scene.json"))?)?;
        let field = DeformationField::read_from(fs::File::open(dir.join("field.bin"))?)?;
        let optim = Adam::from_bytes(&fs::read(dir.join("optim.bin"))?)?;
        let cameras = cameras_from_json(&fs::read_to_string(dir.join("cameras.json"))?)?;
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        if optim.gauss_m.len() != scene.len() || optim.field_m.len() != field.num_params() {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        Ok(Checkpoint {
            model: Model { scene, field },
            optim,
            iteration: meta.iteration,
            n_frames: meta.n_frames,
            cameras,
        })
    }
}

/// Seeds the model from the dataset's point cloud.
pub fn initial_model(cfg: &TrainConfig, data: &Dataset) -> Result<Model> {
    let mut scene = data
        .scene
        .clone()
        .ok_or_else(|| Error::Format("dataset provides no initial point cloud (scene.json)".into()))?;
    if cfg.init == InitMode::PointsOnly {
        for g in &mut scene.gaussians {
            g.color = Vector3::repeat(cfg.init_color);
            g.opacity = cfg.init_opacity;
        }
    }
    Ok(Model {
        scene,
        field: DeformationField::new(cfg.field, cfg.seed),
    })
}

pub fn training_cameras(cfg: &TrainConfig, n_cameras: usize) -> Vec<usize> {
    (0..n_cameras).filter(|c| !cfg.held_out.contains(c)).collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Trains from the dataset's initial point cloud.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let model = initial_model(cfg, data)?;
    train_model(cfg, data, model)
}

/// Trains `model` on `data` following the configured schedule.
pub fn train_model(cfg: &TrainConfig, data: &Dataset, mut model: Model) -> Result<TrainOutcome> {
    cfg.validate()?;
    let cams = training_cameras(cfg, data.cameras.len());
    let extent = model.scene.extent().max(1e-6);
    let mut opt = Adam::new(model.scene.len(), model.field.num_params());
    let mut log = TrainLog::default();
    let mut accum = vec![0.0; model.scene.len()];
    let mut counts = vec![0usize; model.scene.len()];
    for it in 0..cfg.iterations {
        let window = sample_window(data.n_frames, cfg.tau, it, &cams, cfg.seed)?;
        let weights = cfg.weights_at(it);
        let n_before = model.scene.len();
        let out = train_step(&mut model, &mut opt, data, &window, &weights, &cfg.lr, extent)?;
        let g = &out.grads;
        log.rows.push(LogRow {
            iteration: it,
            camera: window.camera,
            start: window.start,
            photometric: out.report.photometric,
            win: out.report.win,
            warp: out.report.warp,
            dyn_: out.report.dyn_,
            total: out.report.total,
            n_gaussians: n_before,
            grad_mu0: norm_of(g.mu0.iter().flat_map(|v| v.iter())),
            grad_scale: norm_of(g.scale.iter().flat_map(|v| v.iter())),
            grad_rotation: norm_of(g.rotation.iter().flat_map(|v| v.iter())),
            grad_color: norm_of(g.color.iter().flat_map(|v| v.iter())),
            grad_opacity: norm_of(g.opacity.iter()),
            grad_field: norm_of(g.field.iter()),
        });
        for i in 0..n_before {
            if out.visible[i] {
                accum[i] += out.screen_grad[i];
                counts[i] += 1;
            }
        }
        let done = it + 1;
        let in_densify = done >= cfg.densify_from && done <= cfg.densify_until;
        if cfg.fad_enabled && done >= cfg.warmup_static_iters && done <= cfg.densify_until && done % cfg.fad_every == 0 {
            let input = FadInput {
                loss_map: &out.report.win_map,
                warp_map: Some(&out.report.warp_map),
                mask: &data.masks[window.camera][window.start],
                depth: &out.depth,
                cam: &data.cameras[window.camera],
                t: data.stamp(window.start),
                iteration: done,
                camera: window.camera,
            };
            let (new, event) = flow_assisted_densify(&model.scene, &model.field, &input, &cfg.fad)?;
            debug!("iteration {done}: FAD added {} Gaussians", new.len());
            opt.grow(new.len());
            accum.resize(model.scene.len() + new.len(), 0.0);
            counts.resize(model.scene.len() + new.len(), 0);
            model.scene.gaussians.extend(new);
            log.events.push(event);
        }
        if cfg.conventional_enabled && in_densify && done % cfg.densify_every == 0 {
            let means: Vec<f64> = accum
                .iter()
                .zip(&counts)
                .map(|(&a, &n)| if n > 0 { a / n as f64 } else { 0.0 })
                .collect();
            let seed = cfg.seed ^ (done as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let outcome = conventional_densify_and_prune(&mut model.scene, &means, &cfg.conventional, seed)?;
            debug!(
                "iteration {done}: cloned {}, split {}, pruned {}",
                outcome.cloned, outcome.split, outcome.pruned
            );
            opt.remap(&outcome.origin, &outcome.fresh);
            accum = vec![0.0; model.scene.len()];
            counts = vec![0; model.scene.len()];
        }
        if done % 500 == 0 {
            info!("iteration {done}: total {:.6}, {} Gaussians", out.report.total, model.scene.len());
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            optim: opt,
            iteration: cfg.iterations,
            n_frames: data.n_frames,
            cameras: data.cameras.clone(),
        },
        log,
    })
}

/// Loads the dataset at `dataset_dir` and trains on it.
pub fn run(cfg: &TrainConfig, dataset_dir: &Path) -> Result<TrainOutcome> {
    let data = Dataset::load(dataset_dir)?;
    train(cfg, &data)
}

/// Image, dynamic-region and velocity metrics on the given cameras, every frame.
pub fn evaluate(model: &Model, data: &Dataset, cameras: &[usize]) -> Result<EvalReport> {
    let n = data.n_frames;
    let jobs: Vec<(usize, usize)> = cameras.iter().flat_map(|&c| (0..n).map(move |k| (c, k))).collect();
    let per = par::map_slice(&jobs, |&(c, k)| -> Result<FrameEval> {
        let cam = data
            .cameras
            .get(c)
            .ok_or_else(|| Error::Config(format!("camera {c} not in dataset")))?;
        let opts = RenderOptions {
            velocity: k + 1 < n,
            velocity_back: false,
        };
        let b = render_with(&model.scene, &model.field, data.stamp(k), cam, opts);
        let truth = &data.frames[c][k];
        let velocity_epe = match data.flows[c].get(k) {
            Some(f) if k + 1 < n => velocity_epe(&b.velocity, f)?,
            _ => None,
        };
        Ok(FrameEval {
            camera: c,
            frame: k,
            psnr: psnr(&b.color, truth)?,
            dpsnr: dpsnr(&b.color, truth, &data.masks[c][k].mask)?,
            ssim: ssim(&b.color, truth)?,
            velocity_epe,
        })
    });
    Ok(EvalReport::from_frames(per.into_iter().collect::<Result<Vec<_>>>()?))
}

/// Metrics of `pred` frames and flows against `truth`, on the given cameras.
pub fn compare_datasets(pred: &Dataset, truth: &Dataset, cameras: &[usize]) -> Result<EvalReport> {
    if pred.n_frames != truth.n_frames || pred.cameras.len() != truth.cameras.len() {
        return Err(Error::shape(format!(
            "prediction has {} cameras x {} frames, truth {} x {}",
            pred.cameras.len(),
            pred.n_frames,
            truth.cameras.len(),
            truth.n_frames
        )));
    }
    let n = truth.n_frames;
    let jobs: Vec<(usize, usize)> = cameras.iter().flat_map(|&c| (0..n).map(move |k| (c, k))).collect();
    let per = par::map_slice(&jobs, |&(c, k)| -> Result<FrameEval> {
        if c >= truth.cameras.len() {
            return Err(Error::Config(format!("camera {c} not in dataset")));
        }
        let (a, b) = (&pred.frames[c][k], &truth.frames[c][k]);
        let velocity_epe = match (pred.flows[c].get(k), truth.flows[c].get(k)) {
            (Some(p), Some(t)) => velocity_epe(&p.data, t)?,
            _ => None,
        };
        Ok(FrameEval {
            camera: c,
            frame: k,
            psnr: psnr(a, b)?,
            dpsnr: dpsnr(a, b, &truth.masks[c][k].mask)?,
            ssim: ssim(a, b)?,
            velocity_epe,
        })
    });
    Ok(EvalReport::from_frames(per.into_iter().collect::<Result<Vec<_>>>()?))
}

/// Color render of a stamp, for quick inspection.
pub fn render_color(model: &Model, cam: &CameraModel, t: TimeStamp) -> ColorImage {
    render_with(&model.scene, &model.field, t, cam, RenderOptions::color_only()).color
}

/// Unit quaternion helper for tests and tools.
pub fn identity_rotation() -> Vector4<f64> {
    Vector4::new(1.0, 0.0, 0.0, 0.0)
}

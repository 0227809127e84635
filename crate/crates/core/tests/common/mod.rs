//! Shared scenes and measurement routines for the integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use flowsplat_core::dataset::Dataset;
use flowsplat_core::deform::{DeformationField, Deformer, FieldShape, StaticField, TimeStamp};
use flowsplat_core::densify::{farthest_point_sample, FADConfig};
use flowsplat_core::image::Plane;
use flowsplat_core::io;
use flowsplat_core::losses::{DynamicMask, FlowField, LossWeights};
use flowsplat_core::par;
use flowsplat_core::raster::{render_with, RenderOptions};
use flowsplat_core::scene::{CameraModel, CanonicalScene, Gaussian3D};
use flowsplat_core::synth::{GroupRecipe, Layout, Motion, OracleMotion, RigRecipe, SceneRecipe};
use flowsplat_core::train::{compute_gradients, evaluate, initial_model, train, train_model, Model, TrainConfig, Window};
use flowsplat_core::tvr::{forecast, kalman_update, refine_dataset, refine_trajectories, trajectories_to_jsonl, EKFTrack, NoiseModel, TvrConfig};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

// ---------------------------------------------------------------- gradients

pub struct GradCheck {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_name: String,
}

/// Five Gaussians seen by one 16×16 camera over a two-frame window, with every
/// loss term active and a field large enough to move them.
pub fn gradient_fixture(seed: u64) -> (Model, Dataset, Window) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = CameraModel::from_intrinsics(18.0, 18.0, 7.5, 7.5, Matrix3::identity(), Vector3::zeros(), 16, 16).unwrap();
    let gaussians = (0..5)
        .map(|_| {
            let q = Vector4::new(rng.random_range(0.5..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            Gaussian3D {
                mu0: Vector3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(2.5..3.5)),
                scale: Vector3::new(rng.random_range(0.15..0.4), rng.random_range(0.15..0.4), rng.random_range(0.15..0.4)),
                rotation: q / q.norm(),
                color: Vector3::new(rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)),
                opacity: rng.random_range(0.3..0.85),
            }
        })
        .collect();
    let scene = CanonicalScene::new(Vector3::new(0.1, 0.2, 0.3), gaussians);
    let shape = FieldShape {
        space_bands: 2,
        time_bands: 2,
        hidden: 16,
    };
    let mut field = DeformationField::new(shape, seed);
    let n_out = 3 * shape.hidden + 3;
    let np = field.num_params();
    for p in &mut field.params_mut()[np - n_out..] {
        *p *= 2000.0;
    }
    let n_frames = 3;
    let frames = (0..n_frames)
        .map(|_| Plane::from_fn(16, 16, |_, _| [rng.random(), rng.random(), rng.random()]))
        .collect();
    let flows = (0..n_frames - 1)
        .map(|_| {
            let data = Plane::from_fn(16, 16, |_, _| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
            let valid = Plane::from_fn(16, 16, |_, _| rng.random::<f64>() < 0.85);
            FlowField::new(data, valid).unwrap()
        })
        .collect();
    let masks = (0..n_frames)
        .map(|_| DynamicMask::new(Plane::from_fn(16, 16, |_, _| rng.random::<f64>() < 0.5)))
        .collect();
    let data = Dataset {
        cameras: vec![cam],
        n_frames,
        frames: vec![frames],
        flows: vec![flows],
        masks: vec![masks],
        scene: Some(scene.clone()),
        motion: None,
    };
    let window = Window {
        start: 0,
        camera: 0,
        stamps: vec![0, 1],
    };
    (Model { scene, field }, data, window)
}

pub fn total_loss(model: &Model, data: &Dataset, window: &Window, weights: &LossWeights) -> f64 {
    compute_gradients(model, data, window, weights).unwrap().report.total
}

/// Central differences (δ = 1e-5) against the analytic gradient of the total loss.
pub fn gradient_check_5_gaussians() -> GradCheck {
    gradient_check(3, &LossWeights::default())
}

pub fn gradient_check(seed: u64, weights: &LossWeights) -> GradCheck {
    let (model, data, window) = gradient_fixture(seed);
    let analytic = compute_gradients(&model, &data, &window, weights).unwrap().grads;
    let delta = 1e-5;
    let mut entries: Vec<(String, f64)> = Vec::new();
    for i in 0..model.scene.len() {
        for k in 0..3 {
            entries.push((format!("mu0[{i}][{k}]"), analytic.mu0[i][k]));
        }
        for k in 0..3 {
            entries.push((format!("scale[{i}][{k}]"), analytic.scale[i][k]));
        }
        for k in 0..4 {
            entries.push((format!("rotation[{i}][{k}]"), analytic.rotation[i][k]));
        }
        for k in 0..3 {
            entries.push((format!("color[{i}][{k}]"), analytic.color[i][k]));
        }
        entries.push((format!("opacity[{i}]"), analytic.opacity[i]));
    }
    let n_gauss = entries.len();
    for (k, g) in analytic.field.iter().enumerate() {
        entries.push((format!("field[{k}]"), *g));
    }
    let perturb = |idx: usize, h: f64| -> f64 {
        let mut m = model.clone();
        if idx < n_gauss {
            let (i, j) = (idx / 14, idx % 14);
            let g = &mut m.scene.gaussians[i];
            match j {
                0..=2 => g.mu0[j] += h,
                3..=5 => g.scale[j - 3] += h,
                6..=9 => g.rotation[j - 6] += h,
                10..=12 => g.color[j - 10] += h,
                _ => g.opacity += h,
            }
        } else {
            m.field.params_mut()[idx - n_gauss] += h;
        }
        total_loss(&m, &data, &window, weights)
    };
    let numeric = par::map_range(entries.len(), |idx| (perturb(idx, delta) - perturb(idx, -delta)) / (2.0 * delta));
    let mut worst = (0.0, String::new());
    for ((name, a), n) in entries.iter().zip(&numeric) {
        let scale = a.abs().max(n.abs());
        let rel = if scale == 0.0 { 0.0 } else { (a - n).abs() / scale };
        if rel > worst.0 {
            worst = (rel, format!("{name}: analytic {a:.6e}, numeric {n:.6e}"));
        }
    }
    GradCheck {
        checked: entries.len(),
        worst_rel: worst.0,
        worst_name: worst.1,
    }
}

// ------------------------------------------------------ directional training

/// One fast linear group in front of a translucent textured static backdrop;
/// camera 0 (center of the arc) is held out.
pub fn directional_recipe(seed: u64) -> SceneRecipe {
    SceneRecipe {
        seed,
        n_frames: 40,
        width: 128,
        height: 128,
        background: [0.05, 0.05, 0.08],
        rig: RigRecipe {
            n_views: 5,
            radius: 4.0,
            arc_degrees: 40.0,
            target: [0.0, 0.0, 0.0],
            focal: 137.0,
        },
        groups: vec![
            GroupRecipe {
                name: "backdrop".into(),
                layout: Layout::Grid {
                    center: [0.0, 0.0, 0.5],
                    half_extent: [1.9, 1.9, 0.0],
                    dims: [20, 20, 1],
                },
                scale: [0.09, 0.12],
                color_min: [0.15, 0.15, 0.15],
                color_max: [0.9, 0.9, 0.9],
                opacity: [0.25, 0.35],
                motion: Motion::Static,
            },
            GroupRecipe {
                name: "mover".into(),
                layout: Layout::Random {
                    center: [-0.9, 0.0, -0.2],
                    half_extent: [0.5, 0.5, 0.05],
                    count: 180,
                },
                scale: [0.035, 0.05],
                color_min: [0.8, 0.1, 0.05],
                color_max: [1.0, 0.5, 0.2],
                opacity: [0.97, 0.99],
                motion: Motion::Linear {
                    velocity: [0.02, 0.0, 0.0],
                },
            },
        ],
    }
}

pub const DIRECTIONAL_ITERS: usize = 800;

pub fn directional_config(seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: DIRECTIONAL_ITERS,
        seed,
        warmup_static_iters: 100,
        densify_from: 300,
        densify_until: 700,
        fad_every: 300,
        held_out: vec![0],
        ..Default::default()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Metrics {
    pub dpsnr: f64,
    pub psnr: f64,
    pub epe: f64,
}

pub fn held_out_metrics(model: &Model, data: &Dataset) -> Metrics {
    let r = evaluate(model, data, &[0]).unwrap();
    Metrics {
        dpsnr: r.dpsnr.unwrap_or(f64::NAN),
        psnr: r.psnr,
        epe: r.velocity_epe.unwrap_or(f64::NAN),
    }
}

pub struct SeedRuns {
    pub seed: u64,
    pub full: Metrics,
    pub photo: Metrics,
    pub tau2: Metrics,
}

pub struct DirectionalRuns {
    pub seeds: Vec<SeedRuns>,
    /// Wall time of the full and photometric-only runs.
    pub total_secs: f64,
}

static DIRECTIONAL: OnceLock<DirectionalRuns> = OnceLock::new();

pub fn directional_runs() -> &'static DirectionalRuns {
    DIRECTIONAL.get_or_init(|| {
        let mut total_secs = 0.0;
        let seeds = [1u64, 2, 3]
            .iter()
            .map(|&seed| {
                let start = Instant::now();
                let data = Dataset::synthesize(&directional_recipe(seed)).unwrap();
                let cfg = directional_config(seed);
                let run = |cfg: &TrainConfig| held_out_metrics(&train(cfg, &data).unwrap().checkpoint.model, &data);
                let full = run(&cfg);
                let photo = run(&cfg.clone().photometric_only());
                total_secs += start.elapsed().as_secs_f64();
                let tau2 = run(&TrainConfig { tau: 2, ..cfg.clone() });
                eprintln!("seed {seed}: full {full:?}, photometric {photo:?}, tau2 {tau2:?}");
                SeedRuns { seed, full, photo, tau2 }
            })
            .collect();
        DirectionalRuns { seeds, total_secs }
    })
}

pub struct FadRecovery {
    pub with_fad: f64,
    pub without_fad: f64,
    pub accepted: usize,
    pub provenance_ok: bool,
}

/// Fraction of dynamic-mask pixels with alpha above 0.5, over every frame of camera 0.
pub fn dynamic_coverage(model: &Model, data: &Dataset) -> f64 {
    let n = data.n_frames;
    let per = par::map_range(n, |k| {
        let b = render_with(&model.scene, &model.field, data.stamp(k), &data.cameras[0], RenderOptions::color_only());
        let mask = &data.masks[0][k].mask;
        let total = mask.data().iter().filter(|&&m| m).count();
        let covered = mask.data().iter().zip(b.alpha.data()).filter(|(&m, &a)| m && a > 0.5).count();
        (covered, total)
    });
    let (c, t) = per.iter().fold((0, 0), |(a, b), (c, t)| (a + c, b + t));
    c as f64 / t.max(1) as f64
}

pub fn fad_config(seed: u64) -> TrainConfig {
    TrainConfig {
        fad: FADConfig::default(),
        ..directional_config(seed)
    }
}

pub fn fad_recovery() -> FadRecovery {
    let data = Dataset::synthesize(&directional_recipe(1)).unwrap();
    let oracle: OracleMotion = data.motion.as_ref().unwrap().oracle(data.scene.as_ref().unwrap().len()).unwrap();
    let cfg = fad_config(1);
    let mut model = initial_model(&cfg, &data).unwrap();
    let keep: Vec<Gaussian3D> = model
        .scene
        .gaussians
        .iter()
        .enumerate()
        .filter(|(i, _)| !oracle.is_dynamic(*i))
        .map(|(_, g)| g.clone())
        .collect();
    model.scene.gaussians = keep;
    let with = train_model(&cfg, &data, model.clone()).unwrap();
    let without = train_model(
        &TrainConfig {
            fad_enabled: false,
            ..cfg.clone()
        },
        &data,
        model,
    )
    .unwrap();
    let accepted: Vec<_> = with.log.events.iter().flat_map(|e| e.accepted.iter()).collect();
    let provenance_ok = accepted.iter().all(|a| a.reprojection_px <= cfg.fad.provenance_px);
    FadRecovery {
        with_fad: dynamic_coverage(&with.checkpoint.model, &data),
        without_fad: dynamic_coverage(&without.checkpoint.model, &data),
        accepted: accepted.len(),
        provenance_ok,
    }
}

// ---------------------------------------------------------------------- FPS

/// Max-min selection recomputed from scratch at every step.
pub fn fps_oracle(points: &[Vector3<f64>], count: usize) -> Vec<usize> {
    let mut chosen = vec![0];
    while chosen.len() < count {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..points.len() {
            if chosen.contains(&j) {
                continue;
            }
            let d = chosen.iter().map(|&c| (points[j] - points[c]).norm()).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, b)| d > b) {
                best = Some((j, d));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

pub fn fps_against_oracle() -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for cloud in 0..50 {
        let n = rng.random_range(1..=64);
        let points: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                if cloud % 2 == 0 {
                    // Integer lattice: many exact ties.
                    Vector3::new(rng.random_range(0..4) as f64, rng.random_range(0..4) as f64, rng.random_range(0..2) as f64)
                } else {
                    Vector3::new(rng.random(), rng.random(), rng.random())
                }
            })
            .collect();
        let ratio: f64 = rng.random_range(0.01..=1.0);
        let count = ((ratio * n as f64) - 1e-9).ceil().max(1.0) as usize;
        if farthest_point_sample(&points, ratio) != fps_oracle(&points, count) {
            mismatches += 1;
        }
    }
    (50, mismatches)
}

// ---------------------------------------------------------------------- EKF

/// Truth motion plus a fixed per-Gaussian, per-frame offset (frame 0 exact).
pub struct Jittered<'a> {
    pub base: &'a OracleMotion,
    pub jitter: Vec<Vec<Vector3<f64>>>,
    pub n_frames: usize,
}

impl Deformer for Jittered<'_> {
    fn displacement(&self, index: usize, mu0: &Vector3<f64>, t: f64) -> Vector3<f64> {
        let k = (t * (self.n_frames - 1) as f64).round() as usize;
        self.base.displacement(index, mu0, t) + self.jitter[index][k.min(self.n_frames - 1)]
    }
}

pub fn ekf_recipe() -> SceneRecipe {
    SceneRecipe {
        seed: 11,
        n_frames: 16,
        width: 96,
        height: 96,
        background: [0.0, 0.0, 0.0],
        rig: RigRecipe {
            n_views: 5,
            radius: 4.0,
            arc_degrees: 60.0,
            target: [0.0, 0.0, 0.0],
            focal: 110.0,
        },
        groups: vec![
            GroupRecipe {
                name: "panel".into(),
                layout: Layout::Grid {
                    center: [-0.9, 0.0, 0.3],
                    half_extent: [0.4, 0.8, 0.0],
                    dims: [5, 10, 1],
                },
                scale: [0.07, 0.1],
                color_min: [0.1, 0.1, 0.1],
                color_max: [0.9, 0.9, 0.9],
                opacity: [0.7, 0.9],
                motion: Motion::Static,
            },
            GroupRecipe {
                name: "disc".into(),
                layout: Layout::Ring {
                    center: [0.7, -0.3, 0.0],
                    radius_min: 0.1,
                    radius_max: 0.4,
                    count: 40,
                },
                scale: [0.05, 0.07],
                color_min: [0.7, 0.1, 0.1],
                color_max: [1.0, 0.5, 0.4],
                opacity: [0.85, 0.95],
                motion: Motion::Linear {
                    velocity: [0.0, 0.04, -0.01],
                },
            },
        ],
    }
}

pub struct EkfResult {
    pub refined: f64,
    pub jittered: f64,
    pub ratio: f64,
    pub min_eigenvalue: f64,
}

/// Filter settings for jitter of standard deviation `sigma` per axis: the
/// forecast step inherits `j_k - j_(k-1)`, so the process noise is `2 sigma^2`.
pub fn ekf_tvr_config(sigma: f64) -> TvrConfig {
    TvrConfig {
        q_scale: 2.0 * sigma * sigma,
        ..TvrConfig::default()
    }
}

/// Jitters nominal trajectories (σ = 2% of the scene extent) and refines them
/// against oracle flow and depth; RMSEs are averaged over seeds.
pub fn ekf_denoising(seeds: u64) -> EkfResult {
    let data = Dataset::synthesize(&ekf_recipe()).unwrap();
    let scene = data.scene.clone().unwrap();
    let oracle = data.motion.as_ref().unwrap().oracle(scene.len()).unwrap();
    let n = data.n_frames;
    let jobs: Vec<(usize, usize)> = (0..data.cameras.len()).flat_map(|c| (0..n).map(move |k| (c, k))).collect();
    let rendered = par::map_slice(&jobs, |&(c, k)| render_with(&scene, &oracle, data.stamp(k), &data.cameras[c], RenderOptions::color_only()).depth);
    let mut depths = vec![Vec::new(); data.cameras.len()];
    for (&(c, _), d) in jobs.iter().zip(rendered) {
        depths[c].push(d);
    }
    let sigma = 0.02 * scene.extent();
    let normal = Normal::new(0.0, sigma).unwrap();
    let cfg = ekf_tvr_config(sigma);
    let (mut sum_ref, mut sum_jit) = (0.0, 0.0);
    let mut min_eig = f64::INFINITY;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let jitter: Vec<Vec<Vector3<f64>>> = (0..scene.len())
            .map(|_| {
                (0..n)
                    .map(|k| if k == 0 { Vector3::zeros() } else { Vector3::from_fn(|_, _| normal.sample(&mut rng)) })
                    .collect()
            })
            .collect();
        let nominal = Jittered {
            base: &oracle,
            jitter,
            n_frames: n,
        };
        let traj = refine_trajectories(&scene, &nominal, &data.cameras, &data.flows, &depths, n, &cfg).unwrap();
        let (mut e_ref, mut e_jit, mut count) = (0.0, 0.0, 0usize);
        for (i, t) in traj.iter().enumerate() {
            min_eig = min_eig.min(t.min_eigenvalue);
            let mu0 = scene.gaussians[i].mu0;
            for k in 1..n {
                let truth = oracle.position(i, &mu0, data.stamp(k).t);
                e_ref += (Vector3::from(t.frames[k]) - truth).norm_squared();
                e_jit += (nominal.position(i, &mu0, data.stamp(k).t) - truth).norm_squared();
                count += 1;
            }
        }
        sum_ref += (e_ref / count as f64).sqrt();
        sum_jit += (e_jit / count as f64).sqrt();
    }
    let (refined, jittered) = (sum_ref / seeds as f64, sum_jit / seeds as f64);
    EkfResult {
        refined,
        jittered,
        ratio: refined / jittered,
        min_eigenvalue: min_eig,
    }
}

/// One forecast/assimilate cycle with J_f = I, Q = 0, P = 1, Rn = 1 on the
/// observed axis. Returns the gain and the posterior for a unit-2 innovation.
pub fn scalar_gain() -> (f64, f64) {
    let cam = CameraModel::from_intrinsics(1.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros(), 1, 1).unwrap();
    let mut track = EKFTrack::new(&StaticField, 0, Vector3::zeros(), TimeStamp::frame(0, 2), &[cam], 1.0);
    track.x = Vector3::zeros();
    let noise = NoiseModel {
        q: Matrix3::zeros(),
        rn: Matrix2::identity(),
    };
    let (x_f, p_f, _) = forecast(&track, &StaticField, &noise, TimeStamp::frame(0, 2), TimeStamp::frame(1, 2), 1e-3);
    let j_h = Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let z = Vector2::new(2.0, 0.0);
    let (x, _, k) = kalman_update(&x_f, &p_f, &(z - j_h * x_f), &j_h, &noise.rn).unwrap();
    (k[(0, 0)], x[0])
}

// -------------------------------------------------------------- determinism

pub fn small_recipe() -> SceneRecipe {
    let mut r = SceneRecipe::desk_default();
    r.n_frames = 10;
    r.width = 48;
    r.height = 40;
    r.rig.focal = 50.0;
    r
}

pub fn determinism_config() -> TrainConfig {
    TrainConfig {
        iterations: 200,
        tau: 4,
        seed: 5,
        warmup_static_iters: 50,
        densify_from: 50,
        densify_until: 200,
        densify_every: 50,
        fad_every: 100,
        field: FieldShape {
            space_bands: 4,
            time_bands: 2,
            hidden: 32,
        },
        ..Default::default()
    }
}

pub fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Byte-level comparison of synth, train and refine outputs across two runs
/// and across 1 vs 4 workers.
pub fn determinism() -> Vec<(&'static str, bool)> {
    let root = tempfile::tempdir().unwrap();
    let synth = |name: &str, workers: usize| {
        let dir = root.path().join(name);
        par::with_workers(workers, || Dataset::synthesize(&small_recipe()).unwrap().save(&dir).unwrap());
        dir_bytes(&dir)
    };
    let s1 = synth("synth_a", 1);
    let s4 = synth("synth_b", 4);
    let s4b = synth("synth_c", 4);
    let data = Dataset::load(&root.path().join("synth_a")).unwrap();
    let trainer = |name: &str, workers: usize| {
        let dir = root.path().join(name);
        let out = par::with_workers(workers, || train(&determinism_config(), &data).unwrap());
        out.checkpoint.save(&dir).unwrap();
        fs::write(dir.join("log.csv"), out.log.to_csv()).unwrap();
        fs::write(dir.join("densify.jsonl"), out.log.events_jsonl().unwrap()).unwrap();
        (dir_bytes(&dir), out.checkpoint.model)
    };
    let (t1, model) = trainer("train_a", 1);
    let (t4, _) = trainer("train_b", 4);
    let (t4b, _) = trainer("train_c", 4);
    let refine = |workers: usize| {
        par::with_workers(workers, || {
            trajectories_to_jsonl(&refine_dataset(&model.scene, &model.field, &data, &TvrConfig::default()).unwrap()).unwrap()
        })
    };
    let (r1, r4, r4b) = (refine(1), refine(4), refine(4));
    vec![
        ("synth", s1 == s4 && s4 == s4b),
        ("train", t1 == t4 && t4 == t4b),
        ("refine", r1 == r4 && r4 == r4b),
    ]
}

// ------------------------------------------------------------------- format

/// Hand-assembled `.flo`: 3×2, pixel (x, y) = (x + 10y, −0.5x), pixel (2, 1) unknown.
pub fn reference_flo_bytes() -> Vec<u8> {
    let mut b = vec![0x50, 0x49, 0x45, 0x48, 0x03, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00];
    for y in 0..2 {
        for x in 0..3 {
            let (u, v) = if (x, y) == (2, 1) { (1e10f32, 1e10f32) } else { ((x + 10 * y) as f32, -0.5 * x as f32) };
            b.extend_from_slice(&u.to_le_bytes());
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

pub fn flo_fidelity() -> (bool, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (w, h) = (37, 23);
    let raw: Vec<[f32; 2]> = (0..w * h).map(|_| [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)]).collect();
    let bytes = io::encode_flo_raw(w, h, &raw).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.flo");
    fs::write(&path, &bytes).unwrap();
    let (rw, rh, back) = io::decode_flo_raw(&fs::read(&path).unwrap()).unwrap();
    let raw_ok = (rw, rh) == (w, h) && back.iter().zip(&raw).all(|(a, b)| a[0].to_bits() == b[0].to_bits() && a[1].to_bits() == b[1].to_bits());
    let valid = Plane::from_fn(w, h, |x, y| (x + y) % 7 != 0);
    let data = Plane::from_fn(w, h, |x, y| {
        let v = raw[y * w + x];
        if *valid.get(x, y) { [v[0] as f64, v[1] as f64] } else { [0.0, 0.0] }
    });
    let field = FlowField::new(data, valid)
    .unwrap();
    io::write_flo(&path, &field).unwrap();
    let read = io::read_flo(&path).unwrap();
    let field_ok = read == field && io::encode_flo(&read) == fs::read(&path).unwrap();

    let reference = io::decode_flo(&reference_flo_bytes()).unwrap();
    let ref_ok = reference.dims() == (3, 2)
        && *reference.data.get(1, 1) == [11.0, -0.5]
        && *reference.data.get(2, 0) == [2.0, -1.0]
        && !*reference.valid.get(2, 1)
        && reference.valid.data().iter().filter(|&&v| v).count() == 5;
    (raw_ok && field_ok, ref_ok)
}

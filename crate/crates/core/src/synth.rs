//! Analytic dynamic scenes with exact images, flow and dynamic masks.

use nalgebra::{Rotation3, Unit, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{Deformer, TimeStamp};
use crate::error::{Error, Result};
use crate::image::Plane;
use crate::losses::{DynamicMask, FlowField};
use crate::raster::{build_splats, RenderOptions, SplatIndex};
use crate::scene::{CameraModel, CanonicalScene, Gaussian3D};

/// Closed-form motion, with time measured in frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Static,
    Linear {
        velocity: [f64; 3],
    },
    Circular {
        center: [f64; 3],
        axis: [f64; 3],
        omega: f64,
    },
    Scaling {
        center: [f64; 3],
        rate: f64,
    },
}

impl Motion {
    pub fn is_static(&self) -> bool {
        matches!(self, Motion::Static)
    }

    pub fn position(&self, mu0: &Vector3<f64>, frames: f64) -> Vector3<f64> {
        match self {
            Motion::Static => *mu0,
            Motion::Linear { velocity } => mu0 + Vector3::from(*velocity) * frames,
            Motion::Circular { center, axis, omega } => {
                let c = Vector3::from(*center);
                let axis = Unit::new_normalize(Vector3::from(*axis));
                c + Rotation3::from_axis_angle(&axis, omega * frames) * (mu0 - c)
            }
            Motion::Scaling { center, rate } => {
                let c = Vector3::from(*center);
                c + (mu0 - c) * (1.0 + rate * frames)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionGroup {
    pub name: String,
    pub motion: Motion,
    pub members: Vec<usize>,
}

/// Per-group motions; groups partition the scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub n_frames: usize,
    pub groups: Vec<MotionGroup>,
}

impl MotionSpec {
    /// Motion of each Gaussian, by index. Errors unless the groups partition `0..n`.
    pub fn per_gaussian(&self, n: usize) -> Result<Vec<Motion>> {
        let mut out: Vec<Option<Motion>> = vec![None; n];
        for g in &self.groups {
            for &i in &g.members {
                match out.get_mut(i) {
                    Some(slot @ None) => *slot = Some(g.motion.clone()),
                    Some(Some(_)) => return Err(Error::Config(format!("Gaussian {i} is in two groups"))),
                    None => return Err(Error::Config(format!("group member {i} out of range"))),
                }
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(i, m)| m.ok_or_else(|| Error::Config(format!("Gaussian {i} has no group"))))
            .collect()
    }

    pub fn oracle(&self, n: usize) -> Result<OracleMotion> {
        let motions = self.per_gaussian(n)?;
        Ok(OracleMotion {
            frames_per_unit: self.n_frames.saturating_sub(1).max(1) as f64,
            motions,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Analytic motion as a deformer; indices beyond the spec stay static.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleMotion {
    motions: Vec<Motion>,
    frames_per_unit: f64,
}

impl OracleMotion {
    pub fn is_dynamic(&self, index: usize) -> bool {
        self.motions.get(index).is_some_and(|m| !m.is_static())
    }
}

impl Deformer for OracleMotion {
    fn displacement(&self, index: usize, mu0: &Vector3<f64>, t: f64) -> Vector3<f64> {
        match self.motions.get(index) {
            Some(m) => m.position(mu0, t * self.frames_per_unit) - mu0,
            None => Vector3::zeros(),
        }
    }
}

pub fn oracle_position(oracle: &OracleMotion, index: usize, mu0: &Vector3<f64>, t: TimeStamp) -> Vector3<f64> {
    oracle.position(index, mu0, t.t)
}

/// Forward flow of the frontmost Gaussian at each pixel. A pixel is invalid
/// when the Gaussian in front at `t` is no longer in front at its
/// destination at `t + δt`, or leaves the image.
pub fn oracle_flow(scene: &CanonicalScene, oracle: &OracleMotion, cam: &CameraModel, t: TimeStamp) -> FlowField {
    oracle_displacement(scene, oracle, cam, t, 1)
}

/// Displacement of the frontmost surface over `steps` frames, chained one
/// frame at a time; validity is intersected along the chain.
pub fn oracle_displacement(
    scene: &CanonicalScene,
    oracle: &OracleMotion,
    cam: &CameraModel,
    t: TimeStamp,
    steps: usize,
) -> FlowField {
    let (w, h) = (cam.width, cam.height);
    let stamps: Vec<_> = (0..=steps)
        .map(|k| build_splats(scene, oracle, t.offset(k as i64), cam, RenderOptions::color_only()))
        .collect();
    let indexes: Vec<_> = stamps.iter().map(|s| SplatIndex::new(s, w, h)).collect();
    let pixels: Vec<([f64; 2], bool)> = crate::par::map_range(w * h, |i| {
        let (x0, y0) = ((i % w) as f64, (i / w) as f64);
        let (mut x, mut y) = (x0, y0);
        let mut valid = true;
        for k in 0..steps {
            let front = indexes[k].front_at(x, y).map(|s| s.index);
            let (nx, ny) = match front {
                Some(g) => {
                    let gs = &scene.gaussians[g];
                    let a = cam.project_point(&oracle.position(g, &gs.mu0, t.offset(k as i64).t));
                    let b = cam.project_point(&oracle.position(g, &gs.mu0, t.offset(k as i64 + 1).t));
                    match (a, b) {
                        (Ok((pa, _)), Ok((pb, _))) => (x + pb.x - pa.x, y + pb.y - pa.y),
                        _ => {
                            valid = false;
                            break;
                        }
                    }
                }
                None => (x, y),
            };
            let dest = if nx >= 0.0 && ny >= 0.0 && nx <= (w - 1) as f64 && ny <= (h - 1) as f64 {
                Some(indexes[k + 1].front_at(nx, ny).map(|s| s.index))
            } else {
                None
            };
            if dest != Some(front) {
                valid = false;
            }
            x = nx;
            y = ny;
        }
        ([x - x0, y - y0], valid)
    });
    let (data, valid): (Vec<_>, Vec<_>) = pixels.into_iter().unzip();
    FlowField {
        data: Plane::from_vec(w, h, data).expect("sized"),
        valid: Plane::from_vec(w, h, valid).expect("sized"),
    }
}

/// True where the frontmost Gaussian belongs to a moving group.
pub fn oracle_mask(scene: &CanonicalScene, oracle: &OracleMotion, cam: &CameraModel, t: TimeStamp) -> DynamicMask {
    let splats = build_splats(scene, oracle, t, cam, RenderOptions::color_only());
    let index = SplatIndex::new(&splats, cam.width, cam.height);
    let data = crate::par::map_range(cam.width * cam.height, |i| {
        let (x, y) = ((i % cam.width) as f64, (i / cam.width) as f64);
        index.front_at(x, y).is_some_and(|s| oracle.is_dynamic(s.index))
    });
    DynamicMask::new(Plane::from_vec(cam.width, cam.height, data).expect("sized"))
}

/// Spatial arrangement of one group's canonical centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// Regular grid over a box; `dims` points per axis.
    Grid {
        center: [f64; 3],
        half_extent: [f64; 3],
        dims: [usize; 3],
    },
    /// Ring in the plane `z = center.z`, radii uniform in the band.
    Ring {
        center: [f64; 3],
        radius_min: f64,
        radius_max: f64,
        count: usize,
    },
    /// Uniform in a box.
    Random {
        center: [f64; 3],
        half_extent: [f64; 3],
        count: usize,
    },
}

impl Layout {
    pub fn count(&self) -> usize {
        match self {
            Layout::Grid { dims, .. } => dims.iter().product(),
            Layout::Ring { count, .. } | Layout::Random { count, .. } => *count,
        }
    }

    fn centers(&self, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
        match self {
            Layout::Grid { center, half_extent, dims } => {
                let c = Vector3::from(*center);
                let mut out = Vec::with_capacity(self.count());
                let coord = |i: usize, n: usize, e: f64| if n > 1 { -e + 2.0 * e * i as f64 / (n - 1) as f64 } else { 0.0 };
                for k in 0..dims[2] {
                    for j in 0..dims[1] {
                        for i in 0..dims[0] {
                            out.push(
                                c + Vector3::new(
                                    coord(i, dims[0], half_extent[0]),
                                    coord(j, dims[1], half_extent[1]),
                                    coord(k, dims[2], half_extent[2]),
                                ),
                            );
                        }
                    }
                }
                out
            }
            Layout::Ring { center, radius_min, radius_max, count } => (0..*count)
                .map(|_| {
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = if radius_max > radius_min { rng.random_range(*radius_min..*radius_max) } else { *radius_min };
                    Vector3::from(*center) + Vector3::new(r * a.cos(), r * a.sin(), 0.0)
                })
                .collect(),
            Layout::Random { center, half_extent, count } => (0..*count)
                .map(|_| {
                    let mut v = Vector3::from(*center);
                    for a in 0..3 {
                        if half_extent[a] > 0.0 {
                            v[a] += rng.random_range(-half_extent[a]..half_extent[a]);
                        }
                    }
                    v
                })
                .collect(),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// One group of Gaussians sharing a layout, attribute ranges and motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRecipe {
    pub name: String,
    pub layout: Layout,
    /// Isotropic scale range.
    pub scale: [f64; 2],
    pub color_min: [f64; 3],
    pub color_max: [f64; 3],
    pub opacity: [f64; 2],
    pub motion: Motion,
}

/// Static cameras on a horizontal arc around `target`, looking at it. View 0
/// is at the middle of the arc; later views alternate right and left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigRecipe {
    pub n_views: usize,
    pub radius: f64,
    pub arc_degrees: f64,
    pub target: [f64; 3],
    pub focal: f64,
}

impl RigRecipe {
    pub fn cameras(&self, width: usize, height: usize) -> Result<Vec<CameraModel>> {
        let step = if self.n_views > 1 {
            self.arc_degrees / (self.n_views - 1) as f64
        } else {
            0.0
        };
        let target = Vector3::from(self.target);
        (0..self.n_views)
            .map(|k| {
                let m = k.div_ceil(2) as f64;
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                let theta = (sign * m * step).to_radians();
                let eye = target + self.radius * Vector3::new(theta.sin(), 0.0, -theta.cos());
                CameraModel::look_at(eye, target, Vector3::new(0.0, -1.0, 0.0), self.focal, width, height)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecipe {
    pub seed: u64,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub rig: RigRecipe,
    pub groups: Vec<GroupRecipe>,
}

impl SceneRecipe {
    /// Small textured scene: a static backdrop and one object moving along +x.
    pub fn desk_default() -> Self {
        SceneRecipe {
            seed: 7,
            n_frames: 20,
            width: 64,
            height: 64,
            background: [0.0, 0.0, 0.0],
            rig: RigRecipe {
                n_views: 4,
                radius: 4.0,
                arc_degrees: 30.0,
                target: [0.0, 0.0, 0.0],
                focal: 70.0,
            },
            groups: vec![
                GroupRecipe {
                    name: "backdrop".into(),
                    layout: Layout::Grid {
                        center: [0.0, 0.0, 0.4],
                        half_extent: [1.6, 1.6, 0.0],
                        dims: [14, 14, 1],
                    },
                    scale: [0.09, 0.12],
                    color_min: [0.1, 0.1, 0.1],
                    color_max: [0.9, 0.9, 0.9],
                    opacity: [0.6, 0.9],
                    motion: Motion::Static,
                },
                GroupRecipe {
                    name: "mover".into(),
                    layout: Layout::Random {
                        center: [-0.5, 0.0, 0.0],
                        half_extent: [0.25, 0.25, 0.05],
                        count: 30,
                    },
                    scale: [0.05, 0.08],
                    color_min: [0.7, 0.1, 0.1],
                    color_max: [1.0, 0.4, 0.3],
                    opacity: [0.8, 0.95],
                    motion: Motion::Linear {
                        velocity: [0.05, 0.0, 0.0],
                    },
                },
            ],
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Builds the canonical scene, its motion and the camera rig.
pub fn make_scene(recipe: &SceneRecipe) -> Result<(CanonicalScene, MotionSpec, Vec<CameraModel>)> {
    let total: usize = recipe.groups.iter().map(|g| g.layout.count()).sum();
    if total == 0 || recipe.rig.n_views == 0 || recipe.n_frames == 0 || recipe.width == 0 || recipe.height == 0 {
        return Err(Error::EmptyRecipe);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut gaussians = Vec::with_capacity(total);
    let mut groups = Vec::new();
    for gr in &recipe.groups {
        let start = gaussians.len();
        for mu0 in gr.layout.centers(&mut rng) {
            let s = uniform(&mut rng, gr.scale);
            let mut color = Vector3::zeros();
            for c in 0..3 {
                color[c] = uniform(&mut rng, [gr.color_min[c], gr.color_max[c]]);
            }
            let opacity = uniform(&mut rng, gr.opacity);
            let mut g = Gaussian3D::isotropic(mu0, s, color, opacity);
            g.rotation = Vector4::new(1.0, 0.0, 0.0, 0.0);
            gaussians.push(g);
        }
        groups.push(MotionGroup {
            name: gr.name.clone(),
            motion: gr.motion.clone(),
            members: (start..gaussians.len()).collect(),
        });
    }
    let scene = CanonicalScene::new(Vector3::from(recipe.background), gaussians);
    let spec = MotionSpec {
        n_frames: recipe.n_frames,
        groups,
    };
    let cams = recipe.rig.cameras(recipe.width, recipe.height)?;
    Ok((scene, spec, cams))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn one_static() -> SceneRecipe {
        SceneRecipe {
            seed: 1,
            n_frames: 5,
            width: 32,
            height: 32,
            background: [0.0; 3],
            rig: RigRecipe {
                n_views: 1,
                radius: 3.0,
                arc_degrees: 0.0,
                target: [0.0; 3],
                focal: 40.0,
            },
            groups: vec![GroupRecipe {
                name: "one".into(),
                layout: Layout::Random {
                    center: [0.0; 3],
                    half_extent: [0.0; 3],
                    count: 1,
                },
                scale: [0.1, 0.1],
                color_min: [0.5; 3],
                color_max: [0.5; 3],
                opacity: [0.9, 0.9],
                motion: Motion::Static,
            }],
        }
    }

    #[test]
    fn single_primitive_scene() {
        let (scene, spec, cams) = make_scene(&one_static()).unwrap();
        assert_eq!(scene.len(), 1);
        assert_eq!(cams.len(), 1);
        assert_eq!(spec.groups[0].members, vec![0]);
    }

    #[test]
    fn empty_recipe_is_rejected() {
        let mut r = one_static();
        r.groups.clear();
        assert!(matches!(make_scene(&r), Err(Error::EmptyRecipe)));
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let r = SceneRecipe::desk_default();
        assert_eq!(make_scene(&r).unwrap(), make_scene(&r).unwrap());
    }

    #[test]
    fn ring_stays_in_band() {
        let mut r = one_static();
        r.groups[0].layout = Layout::Ring {
            center: [0.5, -0.5, 1.0],
            radius_min: 0.8,
            radius_max: 1.2,
            count: 100,
        };
        let (scene, ..) = make_scene(&r).unwrap();
        for g in &scene.gaussians {
            let d = g.mu0 - Vector3::new(0.5, -0.5, 1.0);
            assert_eq!(d.z, 0.0);
            let rad = d.norm();
            assert!((0.8..=1.2).contains(&rad));
        }
    }

    #[test]
    fn motion_closed_forms() {
        let mu0 = Vector3::new(0.3, -0.2, 1.0);
        assert_eq!(Motion::Static.position(&mu0, 7.0), mu0);
        let lin = Motion::Linear { velocity: [0.1, 0.0, 0.0] };
        assert!((lin.position(&mu0, 3.0) - (mu0 + Vector3::new(0.3, 0.0, 0.0))).norm() < 1e-15);
        let omega = 0.13;
        let circ = Motion::Circular {
            center: [0.1, 0.2, 0.3],
            axis: [0.2, 1.0, -0.3],
            omega,
        };
        let period = std::f64::consts::TAU / omega;
        assert!((circ.position(&mu0, period) - mu0).norm() < 1e-9);
    }

    #[test]
    fn oracle_time_is_in_frames() {
        let spec = MotionSpec {
            n_frames: 11,
            groups: vec![MotionGroup {
                name: "g".into(),
                motion: Motion::Linear { velocity: [0.1, 0.0, 0.0] },
                members: vec![0],
            }],
        };
        let o = spec.oracle(1).unwrap();
        let p = oracle_position(&o, 0, &Vector3::zeros(), TimeStamp::frame(3, 11));
        assert!((p - Vector3::new(0.3, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn groups_must_partition() {
        let spec = MotionSpec {
            n_frames: 3,
            groups: vec![MotionGroup {
                name: "g".into(),
                motion: Motion::Static,
                members: vec![0, 0],
            }],
        };
        assert!(spec.oracle(1).is_err());
        assert!(spec.oracle(2).is_err());
    }

    fn axis_cam() -> CameraModel {
        CameraModel::from_intrinsics(100.0, 100.0, 20.0, 20.0, Matrix3::identity(), Vector3::zeros(), 41, 41).unwrap()
    }

    #[test]
    fn static_scene_has_zero_valid_flow() {
        let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.1, Vector3::new(1.0, 0.0, 0.0), 0.9);
        let scene = CanonicalScene::new(Vector3::zeros(), vec![g]);
        let spec = MotionSpec {
            n_frames: 4,
            groups: vec![MotionGroup {
                name: "s".into(),
                motion: Motion::Static,
                members: vec![0],
            }],
        };
        let o = spec.oracle(1).unwrap();
        let f = oracle_flow(&scene, &o, &axis_cam(), TimeStamp::frame(1, 4));
        assert!(f.data.data().iter().all(|v| *v == [0.0, 0.0]));
        assert!(f.valid.data().iter().all(|&v| v));
        assert!(oracle_mask(&scene, &o, &axis_cam(), TimeStamp::frame(1, 4)).count() == 0);
    }

    #[test]
    fn moving_gaussian_flow_matches_hand_projection() {
        // Depth 1, fx = 100: 0.02 world units per frame is 2 px per frame.
        let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.03, Vector3::new(1.0, 1.0, 1.0), 0.9);
        let scene = CanonicalScene::new(Vector3::zeros(), vec![g]);
        let spec = MotionSpec {
            n_frames: 5,
            groups: vec![MotionGroup {
                name: "m".into(),
                motion: Motion::Linear { velocity: [0.02, 0.0, 0.0] },
                members: vec![0],
            }],
        };
        let o = spec.oracle(1).unwrap();
        let t = TimeStamp::frame(0, 5);
        let f = oracle_flow(&scene, &o, &axis_cam(), t);
        let m = oracle_mask(&scene, &o, &axis_cam(), t);
        let mut inside = 0;
        for i in 0..f.data.len() {
            if m.mask.data()[i] {
                inside += 1;
                let v = f.data.data()[i];
                assert!((v[0] - 2.0).abs() < 1e-9 && v[1].abs() < 1e-12);
            } else {
                assert_eq!(f.data.data()[i], [0.0, 0.0]);
            }
        }
        assert!(inside > 0);
        assert_eq!(*f.data.get(20, 20), [2.0, 0.0]);
    }
}

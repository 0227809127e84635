//! Multi-view video with flow and masks, in memory and on disk.
//!
//! Layout: `cameras.json`, optional `scene.json` / `motion.json`, and per
//! camera `cam_XX/frame_XXXX.ppm`, `flow_XXXX.flo` (forward flow, one fewer
//! than frames) and `mask_XXXX.pgm`.

use std::fs;
use std::path::Path;

use crate::deform::TimeStamp;
use crate::error::{Error, Result};
use crate::image::ColorImage;
use crate::io;
use crate::losses::{DynamicMask, FlowField};
use crate::par;
use crate::raster::{render_with, RenderOptions};
use crate::scene::{cameras_from_json, cameras_to_json, CameraModel, CanonicalScene};
use crate::synth::{make_scene, oracle_flow, oracle_mask, MotionSpec, SceneRecipe};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cameras: Vec<CameraModel>,
    pub n_frames: usize,
    /// `[camera][frame]`.
    pub frames: Vec<Vec<ColorImage>>,
    /// `[camera][frame]`, flow from frame k to k+1.
    pub flows: Vec<Vec<FlowField>>,
    pub masks: Vec<Vec<DynamicMask>>,
    /// Canonical point cloud used for initialization, when known.
    pub scene: Option<CanonicalScene>,
    pub motion: Option<MotionSpec>,
}

fn quantize_image(img: &ColorImage) -> ColorImage {
    img.map(|p| p.map(|v| io::dequantize(io::quantize(v))))
}

fn quantize_flow(f: FlowField) -> FlowField {
    let data = f
        .data
        .data()
        .iter()
        .zip(f.valid.data())
        .map(|(v, &ok)| if ok { [v[0] as f32 as f64, v[1] as f32 as f64] } else { [0.0, 0.0] })
        .collect();
    FlowField {
        data: crate::image::Plane::from_vec(f.data.width(), f.data.height(), data).expect("sized"),
        valid: f.valid,
    }
}

impl Dataset {
    /// Renders every view and frame of a recipe. Values are quantized the same
    /// way files are, so a saved and reloaded dataset compares equal.
    pub fn synthesize(recipe: &SceneRecipe) -> Result<Self> {
        let (scene, motion, cameras) = make_scene(recipe)?;
        let oracle = motion.oracle(scene.len())?;
        let n = recipe.n_frames;
        let jobs: Vec<(usize, usize)> = (0..cameras.len()).flat_map(|c| (0..n).map(move |k| (c, k))).collect();
        let rendered = par::map_slice(&jobs, |&(c, k)| {
            let cam = &cameras[c];
            let t = TimeStamp::frame(k, n);
            let img = render_with(&scene, &oracle, t, cam, RenderOptions::color_only()).color;
            let flow = (k + 1 < n).then(|| quantize_flow(oracle_flow(&scene, &oracle, cam, t)));
            let mask = oracle_mask(&scene, &oracle, cam, t);
            (quantize_image(&img), flow, mask)
        });
        let mut frames = vec![Vec::with_capacity(n); cameras.len()];
        let mut flows = vec![Vec::with_capacity(n.saturating_sub(1)); cameras.len()];
        let mut masks = vec![Vec::with_capacity(n); cameras.len()];
        for (&(c, _), (img, flow, mask)) in jobs.iter().zip(rendered) {
            frames[c].push(img);
            if let Some(f) = flow {
                flows[c].push(f);
            }
            masks[c].push(mask);
        }
        Ok(Dataset {
            cameras,
            n_frames: n,
            frames,
            flows,
            masks,
            scene: Some(scene),
            motion: Some(motion),
        })
    }

    pub fn width(&self) -> usize {
        self.cameras[0].width
    }

    pub fn height(&self) -> usize {
        self.cameras[0].height
    }

    pub fn stamp(&self, frame: usize) -> TimeStamp {
        TimeStamp::frame(frame, self.n_frames)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("cameras.json"), cameras_to_json(&self.cameras)?)?;
        if let Some(s) = &self.scene {
            fs::write(dir.join("scene.json"), s.to_json()?)?;
        }
        if let Some(m) = &self.motion {
            fs::write(dir.join("motion.json"), m.to_json()?)?;
        }
        for c in 0..self.cameras.len() {
            let cd = dir.join(format!("cam_{c:02}"));
            fs::create_dir_all(&cd)?;
            for (k, img) in self.frames[c].iter().enumerate() {
                io::write_ppm(&cd.join(format!("frame_{k:04}.ppm")), img)?;
            }
            for (k, f) in self.flows[c].iter().enumerate() {
                io::write_flo(&cd.join(format!("flow_{k:04}.flo")), f)?;
            }
            for (k, m) in self.masks[c].iter().enumerate() {
                io::write_mask(&cd.join(format!("mask_{k:04}.pgm")), &m.mask)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cameras = cameras_from_json(&fs::read_to_string(dir.join("cameras.json"))?)?;
        if cameras.is_empty() {
            return Err(Error::Format("cameras.json lists no cameras".into()));
        }
        let scene = match fs::read_to_string(dir.join("scene.json")) {
            Ok(t) => Some(CanonicalScene::from_json(&t)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let motion = match fs::read_to_string(dir.join("motion.json")) {
            Ok(t) => Some(MotionSpec::from_json(&t)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let mut n_frames = 0;
        while dir.join("cam_00").join(format!("frame_{n_frames:04}.ppm")).exists() {
            n_frames += 1;
        }
        if n_frames == 0 {
            return Err(Error::Format(format!("no frames under {}", dir.join("cam_00").display())));
        }
        let mut frames = Vec::new();
        let mut flows = Vec::new();
        let mut masks = Vec::new();
        for (c, cam) in cameras.iter().enumerate() {
            let cd = dir.join(format!("cam_{c:02}"));
            let mut fr = Vec::with_capacity(n_frames);
            let mut fl = Vec::with_capacity(n_frames - 1);
            let mut ms = Vec::with_capacity(n_frames);
            for k in 0..n_frames {
                let img = io::read_ppm(&cd.join(format!("frame_{k:04}.ppm")))?;
                if img.dims() != (cam.width, cam.height) {
                    return Err(Error::shape(format!("camera {c} frame {k} is {:?}", img.dims())));
                }
                fr.push(img);
                let mask_path = cd.join(format!("mask_{k:04}.pgm"));
                let mask = if mask_path.exists() {
                    io::read_mask(&mask_path)?
                } else {
                    crate::image::Plane::filled(cam.width, cam.height, false)
                };
                ms.push(DynamicMask::new(mask));
                if k + 1 < n_frames {
                    let f = io::read_flo(&cd.join(format!("flow_{k:04}.flo")))?;
                    if f.dims() != (cam.width, cam.height) {
                        return Err(Error::shape(format!("camera {c} flow {k} is {:?}", f.dims())));
                    }
                    fl.push(f);
                }
            }
            frames.push(fr);
            flows.push(fl);
            masks.push(ms);
        }
        Ok(Dataset {
            cameras,
            n_frames,
            frames,
            flows,
            masks,
            scene,
            motion,
        })
    }
}

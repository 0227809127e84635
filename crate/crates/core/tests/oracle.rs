mod common;

use common::small_recipe;
use flowsplat_core::dataset::Dataset;
use flowsplat_core::deform::{Deformer, TimeStamp};
use flowsplat_core::synth::{make_scene, oracle_flow, oracle_mask, GroupRecipe, Layout, Motion};

fn lone_mover() -> flowsplat_core::synth::SceneRecipe {
    let mut r = small_recipe();
    r.groups = vec![GroupRecipe {
        name: "mover".into(),
        layout: Layout::Random {
            center: [0.0, 0.0, 0.0],
            half_extent: [0.1, 0.1, 0.1],
            count: 1,
        },
        scale: [0.15, 0.2],
        color_min: [0.9, 0.2, 0.1],
        color_max: [1.0, 0.3, 0.2],
        opacity: [0.9, 0.95],
        motion: Motion::Linear { velocity: [0.05, -0.02, 0.0] },
    }];
    r
}

#[test]
fn flow_of_lone_gaussian_matches_projected_center() {
    let (scene, motion, cams) = make_scene(&lone_mover()).unwrap();
    let oracle = motion.oracle(scene.len()).unwrap();
    let g = &scene.gaussians[0];
    for (c, cam) in cams.iter().enumerate() {
        let t = TimeStamp::frame(3, 10);
        let (a, _) = cam.project_point(&oracle.position(0, &g.mu0, t.t)).unwrap();
        let (b, _) = cam.project_point(&oracle.position(0, &g.mu0, t.offset(1).t)).unwrap();
        let expected = b - a;
        let flow = oracle_flow(&scene, &oracle, cam, t);
        let mask = oracle_mask(&scene, &oracle, cam, t);
        let mut covered = 0;
        for i in 0..flow.data.data().len() {
            let v = flow.data.data()[i];
            if mask.mask.data()[i] {
                covered += 1;
                if flow.valid.data()[i] {
                    assert!((v[0] - expected.x).abs() < 1e-9 && (v[1] - expected.y).abs() < 1e-9, "camera {c}: {v:?} vs {expected:?}");
                }
            } else {
                assert_eq!(v, [0.0, 0.0], "camera {c}: flow off the footprint");
            }
        }
        assert!(covered > 0, "camera {c}: empty mask");
    }
}

#[test]
fn static_scene_has_no_flow_and_no_mask() {
    let mut r = small_recipe();
    for g in &mut r.groups {
        g.motion = Motion::Static;
    }
    let data = Dataset::synthesize(&r).unwrap();
    for c in 0..data.cameras.len() {
        for f in &data.flows[c] {
            assert!(f.data.data().iter().all(|v| v[0].abs() < 1e-9 && v[1].abs() < 1e-9));
        }
        for m in &data.masks[c] {
            assert!(!m.mask.data().iter().any(|&b| b));
        }
    }
}

#[test]
fn dataset_round_trip() {
    let data = Dataset::synthesize(&small_recipe()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.n_frames, data.n_frames);
    assert_eq!(back.cameras.len(), data.cameras.len());
    assert_eq!(back.masks, data.masks);
    for c in 0..data.cameras.len() {
        for (a, b) in back.flows[c].iter().zip(&data.flows[c]) {
            assert_eq!(a.valid, b.valid);
            for (p, q) in a.data.data().iter().zip(b.data.data()) {
                // stored as f32
                assert!((p[0] - q[0]).abs() < 1e-4 && (p[1] - q[1]).abs() < 1e-4);
            }
        }
        for (a, b) in back.frames[c].iter().zip(&data.frames[c]) {
            for (p, q) in a.data().iter().zip(b.data()) {
                // 8-bit images
                assert!((0..3).all(|k| (p[k] - q[k]).abs() <= 0.5 / 255.0 + 1e-12));
            }
        }
    }
}

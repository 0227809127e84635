//! Photometric, windowed-velocity, warping and dynamic-region losses.
//!
//! Every L1 term is a mean so scale does not depend on resolution. Each loss
//! has a `*_grad` variant returning the gradient w.r.t. its rendered inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{sample_bilinear, scatter_bilinear, ColorImage, Mask, Plane, ScalarImage, VectorImage};

/// Optical flow in pixels/frame, forward convention, with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub data: VectorImage,
    pub valid: Mask,
}

impl FlowField {
    pub fn new(data: VectorImage, valid: Mask) -> Result<Self> {
        data.check_shape(&valid, "flow validity mask")?;
        Ok(FlowField { data, valid })
    }

    pub fn all_valid(data: VectorImage) -> Self {
        let valid = Plane::filled(data.width(), data.height(), true);
        FlowField { data, valid }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dims()
    }
}

/// True marks dynamic foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicMask {
    pub mask: Mask,
}

impl DynamicMask {
    pub fn new(mask: Mask) -> Self {
        DynamicMask { mask }
    }

    pub fn count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub photometric: f64,
    pub win: f64,
    pub warp: f64,
    pub dyn_: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            photometric: 1.0,
            win: 0.1,
            warp: 0.1,
            dyn_: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub photometric: f64,
    pub win: f64,
    pub warp: f64,
    pub dyn_: f64,
    pub total: f64,
    pub win_map: ScalarImage,
    pub warp_map: ScalarImage,
}

impl LossReport {
    pub fn new(
        photometric: f64,
        win: f64,
        warp: f64,
        dyn_: f64,
        weights: &LossWeights,
        win_map: ScalarImage,
        warp_map: ScalarImage,
    ) -> Self {
        let total = weights.photometric * photometric + weights.win * win + weights.warp * warp + weights.dyn_ * dyn_;
        LossReport {
            photometric,
            win,
            warp,
            dyn_,
            total,
            win_map,
            warp_map,
        }
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute difference over pixels where `include` holds.
fn masked_l1_grad(
    rendered: &ColorImage,
    truth: &ColorImage,
    include: impl Fn(usize) -> bool,
) -> (f64, ColorImage) {
    let mut grad = Plane::filled(rendered.width(), rendered.height(), [0.0; 3]);
    let count = (0..rendered.len()).filter(|&i| include(i)).count();
    if count == 0 {
        return (0.0, grad);
    }
    let norm = 1.0 / (3 * count) as f64;
    let mut sum = 0.0;
    for (i, g) in grad.data_mut().iter_mut().enumerate() {
        if !include(i) {
            continue;
        }
        let (a, b) = (rendered.data()[i], truth.data()[i]);
        for k in 0..3 {
            let d = a[k] - b[k];
            sum += d.abs();
            g[k] = sign(d) * norm;
        }
    }
    (sum * norm, grad)
}

pub fn loss_photometric(rendered: &ColorImage, truth: &ColorImage) -> Result<f64> {
    loss_photometric_grad(rendered, truth).map(|(v, _)| v)
}

pub fn loss_photometric_grad(rendered: &ColorImage, truth: &ColorImage) -> Result<(f64, ColorImage)> {
    rendered.check_shape(truth, "photometric loss")?;
    Ok(masked_l1_grad(rendered, truth, |_| true))
}

pub fn loss_dyn(rendered: &ColorImage, truth: &ColorImage, mask: &DynamicMask) -> Result<f64> {
    loss_dyn_grad(rendered, truth, mask).map(|(v, _)| v)
}

pub fn loss_dyn_grad(rendered: &ColorImage, truth: &ColorImage, mask: &DynamicMask) -> Result<(f64, ColorImage)> {
    rendered.check_shape(truth, "dynamic loss")?;
    rendered.check_shape(&mask.mask, "dynamic mask")?;
    let m = mask.mask.data();
    Ok(masked_l1_grad(rendered, truth, |i| m[i]))
}

/// Windowed velocity loss and its gradient w.r.t. each rendered flow.
#[derive(Clone, Debug, PartialEq)]
pub struct WinLoss {
    pub value: f64,
    /// Per-pixel L1 norm of the velocity error at the first stamp.
    pub map: ScalarImage,
    pub grads: Vec<VectorImage>,
}

/// Single-frame velocity loss: mean over valid pixels and both components.
fn frame_win(rendered: &VectorImage, truth: &FlowField, scale: f64) -> (f64, VectorImage, ScalarImage) {
    let (w, h) = rendered.dims();
    let mut grad = Plane::filled(w, h, [0.0; 2]);
    let mut map = Plane::filled(w, h, 0.0);
    let valid = truth.valid.data();
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return (0.0, grad, map);
    }
    let norm = 1.0 / (2 * count) as f64;
    let mut sum = 0.0;
    for i in 0..rendered.len() {
        if !valid[i] {
            continue;
        }
        let (a, b) = (rendered.data()[i], truth.data.data()[i]);
        let mut px = 0.0;
        for k in 0..2 {
            let d = a[k] - b[k];
            px += d.abs();
            grad.data_mut()[i][k] = sign(d) * norm * scale;
        }
        map.data_mut()[i] = px;
        sum += px;
    }
    (sum * norm, grad, map)
}

pub fn loss_win(rendered: &[VectorImage], truth: &[FlowField], tau: usize) -> Result<(f64, ScalarImage)> {
    loss_win_grad(rendered, truth, tau).map(|l| (l.value, l.map))
}

/// Mean over the window of per-frame velocity losses.
pub fn loss_win_grad(rendered: &[VectorImage], truth: &[FlowField], tau: usize) -> Result<WinLoss> {
    if rendered.len() != tau || truth.len() != tau || tau == 0 {
        return Err(Error::WindowLengthMismatch {
            rendered: rendered.len(),
            truth: truth.len(),
            tau,
        });
    }
    let scale = 1.0 / tau as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(tau);
    let mut first_map = None;
    for (r, f) in rendered.iter().zip(truth) {
        r.check_shape(&f.data, "windowed velocity loss")?;
        f.data.check_shape(&f.valid, "flow validity mask")?;
        let (v, g, m) = frame_win(r, f, scale);
        value += v;
        grads.push(g);
        first_map.get_or_insert(m);
    }
    Ok(WinLoss {
        value: value * scale,
        map: first_map.expect("tau > 0"),
        grads,
    })
}

/// Output of a backward warp with what is needed to differentiate it.
#[derive(Clone, Debug, PartialEq)]
pub struct Warped {
    pub image: ColorImage,
    pub in_bounds: Mask,
    d_dx: ColorImage,
    d_dy: ColorImage,
    taps: Vec<((usize, usize), (f64, f64))>,
}

/// `output(p) = bilinear(src, p + flow_back(p))` with border clamping.
pub fn warp_image(src: &ColorImage, flow_back: &VectorImage) -> Result<ColorImage> {
    warp_image_full(src, flow_back).map(|w| w.image)
}

pub fn warp_image_full(src: &ColorImage, flow_back: &VectorImage) -> Result<Warped> {
    src.check_shape(flow_back, "warp flow")?;
    let (w, h) = src.dims();
    let n = w * h;
    let mut image = Vec::with_capacity(n);
    let mut in_bounds = Vec::with_capacity(n);
    let mut d_dx = Vec::with_capacity(n);
    let mut d_dy = Vec::with_capacity(n);
    let mut taps = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let f = flow_back.get(x, y);
            let s = sample_bilinear(src, x as f64 + f[0], y as f64 + f[1]);
            image.push(s.value);
            in_bounds.push(s.in_bounds);
            d_dx.push(s.d_dx);
            d_dy.push(s.d_dy);
            taps.push((s.corner, s.frac));
        }
    }
    Ok(Warped {
        image: Plane::from_vec(w, h, image)?,
        in_bounds: Plane::from_vec(w, h, in_bounds)?,
        d_dx: Plane::from_vec(w, h, d_dx)?,
        d_dy: Plane::from_vec(w, h, d_dy)?,
        taps,
    })
}

/// Warping loss with gradients w.r.t. the rendered next frame and the
/// rendered backward velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpLoss {
    pub value: f64,
    /// Per-pixel mean absolute error over channels; zero where masked.
    pub map: ScalarImage,
    pub d_rendered_next: ColorImage,
    pub d_back_velocity: VectorImage,
}

pub fn loss_warp(
    rendered_next: &ColorImage,
    rendered_back_velocity: &VectorImage,
    truth_current: &ColorImage,
) -> Result<(f64, ScalarImage)> {
    loss_warp_grad(rendered_next, rendered_back_velocity, truth_current).map(|l| (l.value, l.map))
}

pub fn loss_warp_grad(
    rendered_next: &ColorImage,
    rendered_back_velocity: &VectorImage,
    truth_current: &ColorImage,
) -> Result<WarpLoss> {
    rendered_next.check_shape(truth_current, "warp loss")?;
    let warped = warp_image_full(rendered_next, rendered_back_velocity)?;
    let (w, h) = rendered_next.dims();
    let mut map = Plane::filled(w, h, 0.0);
    let mut d_next = Plane::filled(w, h, [0.0; 3]);
    let mut d_vel = Plane::filled(w, h, [0.0; 2]);
    let inb = warped.in_bounds.data();
    let count = inb.iter().filter(|&&b| b).count();
    if count == 0 {
        return Ok(WarpLoss {
            value: 0.0,
            map,
            d_rendered_next: d_next,
            d_back_velocity: d_vel,
        });
    }
    let norm = 1.0 / (3 * count) as f64;
    let mut sum = 0.0;
    for i in 0..w * h {
        if !inb[i] {
            continue;
        }
        let a = warped.image.data()[i];
        let b = truth_current.data()[i];
        let mut px = 0.0;
        let mut g = [0.0; 3];
        for k in 0..3 {
            let d = a[k] - b[k];
            px += d.abs();
            g[k] = sign(d) * norm;
        }
        sum += px;
        map.data_mut()[i] = px / 3.0;
        let (corner, frac) = warped.taps[i];
        scatter_bilinear(&mut d_next, corner, frac, &g);
        let (gx, gy) = (warped.d_dx.data()[i], warped.d_dy.data()[i]);
        d_vel.data_mut()[i] = [
            g[0] * gx[0] + g[1] * gx[1] + g[2] * gx[2],
            g[0] * gy[0] + g[1] * gy[1] + g[2] * gy[2],
        ];
    }
    Ok(WarpLoss {
        value: sum * norm,
        map,
        d_rendered_next: d_next,
        d_back_velocity: d_vel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_color(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ColorImage {
        Plane::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    fn random_flow(rng: &mut ChaCha8Rng, w: usize, h: usize, amp: f64) -> VectorImage {
        Plane::from_fn(w, h, |_, _| [rng.random_range(-amp..amp), rng.random_range(-amp..amp)])
    }

    #[test]
    fn photometric_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_color(&mut rng, 6, 5);
        assert_eq!(loss_photometric(&a, &a).unwrap(), 0.0);
        let b = a.map(|p| [p[0] + 0.1, p[1] + 0.1, p[2] + 0.1]);
        assert!((loss_photometric(&b, &a).unwrap() - 0.1).abs() < 1e-12);
        let c = random_color(&mut rng, 6, 5);
        let brute: f64 = a
            .data()
            .iter()
            .zip(c.data())
            .flat_map(|(x, y)| (0..3).map(move |k| (x[k] - y[k]).abs()))
            .sum::<f64>()
            / 90.0;
        assert!((loss_photometric(&a, &c).unwrap() - brute).abs() < 1e-15);
        assert!(loss_photometric(&a, &random_color(&mut rng, 5, 5)).is_err());
    }

    #[test]
    fn win_examples() {
        let zero = Plane::filled(4, 4, [0.0, 0.0]);
        let truth = FlowField::all_valid(Plane::filled(4, 4, [3.0, 4.0]));
        let (v, map) = loss_win(&[zero.clone(), zero.clone()], &[truth.clone(), truth.clone()], 2).unwrap();
        assert_eq!(v, 3.5);
        assert_eq!(*map.get(0, 0), 7.0);
        let same = truth.data.clone();
        assert_eq!(loss_win(&[same.clone(), same], &[truth.clone(), truth.clone()], 2).unwrap().0, 0.0);
        let invalid = FlowField::new(truth.data.clone(), Plane::filled(4, 4, false)).unwrap();
        let (v, map) = loss_win(std::slice::from_ref(&zero), &[invalid], 1).unwrap();
        assert_eq!(v, 0.0);
        assert!(map.data().iter().all(|&m| m == 0.0));
        assert!(matches!(
            loss_win(std::slice::from_ref(&zero), &[truth.clone(), truth], 2),
            Err(Error::WindowLengthMismatch { .. })
        ));
    }

    #[test]
    fn win_is_mean_of_single_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tau = 4;
        let rendered: Vec<_> = (0..tau).map(|_| random_flow(&mut rng, 7, 6, 3.0)).collect();
        let truth: Vec<_> = (0..tau)
            .map(|_| {
                let valid = Plane::from_fn(7, 6, |_, _| rng.random_bool(0.7));
                FlowField::new(random_flow(&mut rng, 7, 6, 3.0), valid).unwrap()
            })
            .collect();
        let whole = loss_win(&rendered, &truth, tau).unwrap().0;
        let singles: f64 = (0..tau)
            .map(|k| loss_win(&rendered[k..k + 1], &truth[k..k + 1], 1).unwrap().0)
            .sum::<f64>()
            / tau as f64;
        assert!((whole - singles).abs() < 1e-15);
    }

    #[test]
    fn warp_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = random_color(&mut rng, 5, 4);
        assert_eq!(warp_image(&src, &Plane::filled(5, 4, [0.0, 0.0])).unwrap(), src);

        let edge = Plane::from_fn(4, 4, |x, _| if x >= 2 { [1.0; 3] } else { [0.0; 3] });
        let w = warp_image_full(&edge, &Plane::filled(4, 4, [1.0, 0.0])).unwrap();
        for y in 0..4 {
            assert_eq!(w.image.get(0, y)[0], 0.0);
            assert_eq!(w.image.get(1, y)[0], 1.0);
            assert!(!*w.in_bounds.get(3, y));
            assert_eq!(w.image.get(3, y)[0], 1.0);
        }
    }

    #[test]
    fn warp_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_color(&mut rng, 6, 6);
        let zero = Plane::filled(6, 6, [0.0, 0.0]);
        assert_eq!(loss_warp(&a, &zero, &a).unwrap().0, 0.0);
        let b = a.map(|p| [p[0] + 0.2, p[1] + 0.2, p[2] + 0.2]);
        assert!((loss_warp(&b, &zero, &a).unwrap().0 - 0.2).abs() < 1e-12);
    }

    #[test]
    fn dyn_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_color(&mut rng, 6, 4);
        let b = random_color(&mut rng, 6, 4);
        let none = DynamicMask::new(Plane::filled(6, 4, false));
        assert_eq!(loss_dyn(&a, &b, &none).unwrap(), 0.0);
        let all = DynamicMask::new(Plane::filled(6, 4, true));
        assert_eq!(loss_dyn(&a, &b, &all).unwrap(), loss_photometric(&a, &b).unwrap());
        let half = DynamicMask::new(Plane::from_fn(6, 4, |x, _| x < 3));
        let shifted = Plane::from_fn(6, 4, |x, y| {
            let p = a.get(x, y);
            if x < 3 { [p[0] + 0.2, p[1] + 0.2, p[2] + 0.2] } else { *p }
        });
        assert!((loss_dyn(&shifted, &a, &half).unwrap() - 0.2).abs() < 1e-12);
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
    }

    #[test]
    fn photometric_and_dyn_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_color(&mut rng, 5, 5);
        let b = random_color(&mut rng, 5, 5);
        let mask = DynamicMask::new(Plane::from_fn(5, 5, |x, y| (x + y) % 2 == 0));
        let (_, g) = loss_dyn_grad(&a, &b, &mask).unwrap();
        let h = 1e-7;
        for i in 0..a.len() {
            for k in 0..3 {
                let mut p = a.clone();
                p.data_mut()[i][k] += h;
                let mut m = a.clone();
                m.data_mut()[i][k] -= h;
                let fd = (loss_dyn(&p, &b, &mask).unwrap() - loss_dyn(&m, &b, &mask).unwrap()) / (2.0 * h);
                assert!(rel(fd, g.data()[i][k]) < 1e-4);
            }
        }
    }

    #[test]
    fn warp_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (w, hgt) = (7, 6);
        let next = random_color(&mut rng, w, hgt);
        let truth = random_color(&mut rng, w, hgt);
        // Keep samples in bounds and away from integer grid lines.
        let vel = Plane::from_fn(w, hgt, |x, y| {
            let fx: f64 = rng.random_range(0.1..0.9);
            let fy: f64 = rng.random_range(0.1..0.9);
            let tx = if x + 1 < w { fx } else { -fx };
            let ty = if y + 1 < hgt { fy } else { -fy };
            [tx, ty]
        });
        let l = loss_warp_grad(&next, &vel, &truth).unwrap();
        let f = |n: &ColorImage, v: &VectorImage| loss_warp(n, v, &truth).unwrap().0;
        let h = 1e-7;
        for i in 0..next.len() {
            for k in 0..2 {
                let mut p = vel.clone();
                p.data_mut()[i][k] += h;
                let mut m = vel.clone();
                m.data_mut()[i][k] -= h;
                let fd = (f(&next, &p) - f(&next, &m)) / (2.0 * h);
                assert!(rel(fd, l.d_back_velocity.data()[i][k]) < 1e-4);
            }
            let mut p = next.clone();
            p.data_mut()[i][1] += h;
            let mut m = next.clone();
            m.data_mut()[i][1] -= h;
            let fd = (f(&p, &vel) - f(&m, &vel)) / (2.0 * h);
            assert!(rel(fd, l.d_rendered_next.data()[i][1]) < 1e-4);
        }
    }

    #[test]
    fn win_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rendered: Vec<_> = (0..3).map(|_| random_flow(&mut rng, 4, 4, 2.0)).collect();
        let truth: Vec<_> = (0..3).map(|_| FlowField::all_valid(random_flow(&mut rng, 4, 4, 2.0))).collect();
        let l = loss_win_grad(&rendered, &truth, 3).unwrap();
        let h = 1e-7;
        for f in 0..3 {
            for i in 0..16 {
                let mut p = rendered.clone();
                p[f].data_mut()[i][0] += h;
                let mut m = rendered.clone();
                m[f].data_mut()[i][0] -= h;
                let fd = (loss_win(&p, &truth, 3).unwrap().0 - loss_win(&m, &truth, 3).unwrap().0) / (2.0 * h);
                assert!(rel(fd, l.grads[f].data()[i][0]) < 1e-4);
            }
        }
    }

    #[test]
    fn masked_losses_ignore_outside_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_color(&mut rng, 6, 6);
        let b = random_color(&mut rng, 6, 6);
        let mask = DynamicMask::new(Plane::from_fn(6, 6, |x, _| x < 2));
        let mut c = a.clone();
        for y in 0..6 {
            for x in 2..6 {
                *c.get_mut(x, y) = [rng.random(), 9.0, -3.0];
            }
        }
        assert_eq!(loss_dyn(&a, &b, &mask).unwrap(), loss_dyn(&c, &b, &mask).unwrap());
    }
}

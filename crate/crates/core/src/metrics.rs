//! Image and flow quality metrics.

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::{ColorImage, Mask, VectorImage};
use crate::losses::FlowField;

pub const PSNR_CAP: f64 = 99.0;
const MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < MSE_FLOOR {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn masked_mse(a: &ColorImage, b: &ColorImage, mask: Option<&Mask>) -> Result<Option<f64>> {
    a.check_shape(b, "metric inputs")?;
    if let Some(m) = mask {
        a.check_shape(m, "metric mask")?;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..a.len() {
        if mask.is_some_and(|m| !m.data()[i]) {
            continue;
        }
        for k in 0..3 {
            let d = a.data()[i][k] - b.data()[i][k];
            sum += d * d;
        }
        n += 3;
    }
    Ok((n > 0).then(|| sum / n as f64))
}

pub fn psnr(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    Ok(psnr_from_mse(masked_mse(a, b, None)?.unwrap_or(0.0)))
}

/// PSNR restricted to mask-true pixels; `None` for an empty mask.
pub fn dpsnr(a: &ColorImage, b: &ColorImage, mask: &Mask) -> Result<Option<f64>> {
    Ok(masked_mse(a, b, Some(mask))?.map(psnr_from_mse))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "valid" filtering of a single-channel image.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Single-scale SSIM with an 11×11 Gaussian window, averaged over channels.
/// Uses the valid region only, so both sides must be at least 11 pixels.
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    a.check_shape(b, "ssim inputs")?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let k = gaussian_kernel();
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.data().iter().map(|p| p[c]).collect();
        let y: Vec<f64> = b.data().iter().map(|p| p[c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, ow, oh) = filter_valid(&x, w, h, &k);
        let (my, ..) = filter_valid(&y, w, h, &k);
        let (sxx, ..) = filter_valid(&xx, w, h, &k);
        let (syy, ..) = filter_valid(&yy, w, h, &k);
        let (sxy, ..) = filter_valid(&xy, w, h, &k);
        let mut acc = 0.0;
        for i in 0..ow * oh {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cxy = sxy[i] - mx[i] * my[i];
            acc += ((2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}

/// Mean endpoint error over valid pixels; `None` when nothing is valid.
pub fn velocity_epe(rendered: &VectorImage, truth: &FlowField) -> Result<Option<f64>> {
    rendered.check_shape(&truth.data, "epe inputs")?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((r, t), &ok) in rendered.data().iter().zip(truth.data.data()).zip(truth.valid.data()) {
        if ok {
            sum += ((r[0] - t[0]).powi(2) + (r[1] - t[1]).powi(2)).sqrt();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Serializes `None` as the string `"n/a"`.
pub fn ser_opt<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_str("n/a"),
    }
}

fn de_opt<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        N(f64),
        S(#[allow(dead_code)] String),
    }
    Ok(match Raw::deserialize(d)? {
        Raw::N(x) => Some(x),
        Raw::S(_) => None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub camera: usize,
    pub frame: usize,
    pub psnr: f64,
    #[serde(serialize_with = "ser_opt", deserialize_with = "de_opt")]
    pub dpsnr: Option<f64>,
    pub ssim: f64,
    #[serde(serialize_with = "ser_opt", deserialize_with = "de_opt")]
    pub velocity_epe: Option<f64>,
}

/// Per-frame metrics and their means (undefined frames are skipped).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: f64,
    #[serde(serialize_with = "ser_opt", deserialize_with = "de_opt")]
    pub dpsnr: Option<f64>,
    pub ssim: f64,
    #[serde(serialize_with = "ser_opt", deserialize_with = "de_opt")]
    pub velocity_epe: Option<f64>,
    pub frames: Vec<FrameEval>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    pub fn from_frames(frames: Vec<FrameEval>) -> Self {
        let n = frames.len().max(1) as f64;
        EvalReport {
            psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
            dpsnr: mean_defined(frames.iter().map(|f| f.dpsnr)),
            ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
            velocity_epe: mean_defined(frames.iter().map(|f| f.velocity_epe)),
            frames,
        }
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

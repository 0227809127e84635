//! Binary image and flow formats: PPM (P6), PGM (P5), Middlebury `.flo`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{ColorImage, Mask, Plane, VectorImage};
use crate::losses::FlowField;

/// Magic bytes of a `.flo` file (`202021.25` as little-endian f32).
pub const FLO_TAG: &[u8; 4] = b"PIEH";
/// Flow components above this magnitude mark an unknown pixel.
pub const FLO_UNKNOWN: f32 = 1e10;
const FLO_UNKNOWN_THRESH: f32 = 1e9;

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
pub fn dequantize(v: u8) -> f64 {
    v as f64 / 255.0
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c);
    }
    if tok.is_empty() {
        return Err(Error::Format("truncated header".into()));
    }
    String::from_utf8(tok).map_err(|_| Error::Format("non-ascii header".into()))
}

fn parse_dim(tok: &str, what: &str) -> Result<usize> {
    tok.parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::Format(format!("bad {what} '{tok}'")))
}

/// Parses a netpbm header of the given magic; returns `(width, height)`.
fn read_netpbm_header<R: BufRead>(r: &mut R, magic: &str) -> Result<(usize, usize)> {
    let m = header_token(r)?;
    if m != magic {
        return Err(Error::Format(format!("expected {magic}, found '{m}'")));
    }
    let w = parse_dim(&header_token(r)?, "width")?;
    let h = parse_dim(&header_token(r)?, "height")?;
    let maxval = header_token(r)?;
    if maxval != "255" {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    Ok((w, h))
}

pub fn encode_ppm(img: &ColorImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    for px in img.data() {
        out.extend(px.iter().map(|&v| quantize(v)));
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ColorImage> {
    let mut r = BufReader::new(bytes);
    let (w, h) = read_netpbm_header(&mut r, "P6")?;
    let mut raw = vec![0u8; w * h * 3];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Format("truncated PPM pixel data".into()))?;
    let data = raw
        .chunks_exact(3)
        .map(|c| [dequantize(c[0]), dequantize(c[1]), dequantize(c[2])])
        .collect();
    Plane::from_vec(w, h, data)
}

pub fn write_ppm(path: &Path, img: &ColorImage) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<ColorImage> {
    decode_ppm(&fs::read(path)?)
}

pub fn encode_pgm(img: &Plane<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Plane<u8>> {
    let mut r = BufReader::new(bytes);
    let (w, h) = read_netpbm_header(&mut r, "P5")?;
    let mut raw = vec![0u8; w * h];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Format("truncated PGM pixel data".into()))?;
    Plane::from_vec(w, h, raw)
}

/// Writes a mask as 0/255.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    fs::write(path, encode_pgm(&mask.map(|&m| if m { 255 } else { 0 })))?;
    Ok(())
}

/// Reads a PGM mask; values above 127 are true.
pub fn read_mask(path: &Path) -> Result<Mask> {
    Ok(decode_pgm(&fs::read(path)?)?.map(|&v| v > 127))
}

/// Raw `.flo` contents as stored: interleaved f32 `(u, v)` per pixel.
pub fn encode_flo_raw(width: usize, height: usize, data: &[[f32; 2]]) -> Result<Vec<u8>> {
    if data.len() != width * height {
        return Err(Error::shape(format!("{} flow vectors for {width}x{height}", data.len())));
    }
    let mut out = Vec::with_capacity(12 + data.len() * 8);
    out.extend_from_slice(FLO_TAG);
    out.extend_from_slice(&(width as i32).to_le_bytes());
    out.extend_from_slice(&(height as i32).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v[0].to_le_bytes());
        out.extend_from_slice(&v[1].to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo_raw(bytes: &[u8]) -> Result<(usize, usize, Vec<[f32; 2]>)> {
    if bytes.len() < 12 || &bytes[..4] != FLO_TAG {
        return Err(Error::Format("missing PIEH tag".into()));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(Error::Format(format!("bad .flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = 12 + w * h * 8;
    if bytes.len() != need {
        return Err(Error::Format(format!("expected {need} bytes, found {}", bytes.len())));
    }
    let data = bytes[12..]
        .chunks_exact(8)
        .map(|c| {
            [
                f32::from_le_bytes(c[..4].try_into().unwrap()),
                f32::from_le_bytes(c[4..].try_into().unwrap()),
            ]
        })
        .collect();
    Ok((w, h, data))
}

/// Encodes a flow field; invalid pixels are written as the unknown marker.
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (w, h) = flow.dims();
    let data: Vec<[f32; 2]> = flow
        .data
        .data()
        .iter()
        .zip(flow.valid.data())
        .map(|(v, &ok)| if ok { [v[0] as f32, v[1] as f32] } else { [FLO_UNKNOWN, FLO_UNKNOWN] })
        .collect();
    encode_flo_raw(w, h, &data).expect("sized")
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    let (w, h, raw) = decode_flo_raw(bytes)?;
    let valid: Vec<bool> = raw
        .iter()
        .map(|v| v.iter().all(|c| c.is_finite() && c.abs() < FLO_UNKNOWN_THRESH))
        .collect();
    let data: Vec<[f64; 2]> = raw
        .iter()
        .zip(&valid)
        .map(|(v, &ok)| if ok { [v[0] as f64, v[1] as f64] } else { [0.0, 0.0] })
        .collect();
    FlowField::new(Plane::from_vec(w, h, data)?, Plane::from_vec(w, h, valid)?)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_flo(flow))?;
    Ok(())
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    decode_flo(&fs::read(path)?)
}

/// Rounds every component through f32, as a `.flo` round trip would.
pub fn quantize_flow(flow: &VectorImage) -> VectorImage {
    flow.map(|v| [v[0] as f32 as f64, v[1] as f32 as f64])
}

// Middlebury color wheel: red, yellow, green, cyan, blue, magenta segments.
const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;

pub fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(RY + YG + GC + CB + BM + MR);
    for i in 0..RY {
        wheel.push([255.0, (255 * i / RY) as f64, 0.0]);
    }
    for i in 0..YG {
        wheel.push([(255 - 255 * i / YG) as f64, 255.0, 0.0]);
    }
    for i in 0..GC {
        wheel.push([0.0, 255.0, (255 * i / GC) as f64]);
    }
    for i in 0..CB {
        wheel.push([0.0, (255 - 255 * i / CB) as f64, 255.0]);
    }
    for i in 0..BM {
        wheel.push([(255 * i / BM) as f64, 0.0, 255.0]);
    }
    for i in 0..MR {
        wheel.push([255.0, 0.0, (255 - 255 * i / MR) as f64]);
    }
    for c in &mut wheel {
        for v in c.iter_mut() {
            *v /= 255.0;
        }
    }
    wheel
}

/// Color of a flow vector already divided by the normalization radius.
pub fn flow_color(u: f64, v: f64, wheel: &[[f64; 3]]) -> [f64; 3] {
    let n = wheel.len();
    let rad = (u * u + v * v).sqrt();
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
    let k0 = (fk.floor() as usize).min(n - 1);
    let k1 = (k0 + 1) % n;
    let f = fk - k0 as f64;
    let mut out = [0.0; 3];
    for c in 0..3 {
        let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
        out[c] = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
    }
    out
}

/// False-color rendering; zero flow is white. `max_radius` defaults to the
/// largest valid magnitude. Invalid pixels are black.
pub fn flow_to_color(flow: &FlowField, max_radius: Option<f64>) -> ColorImage {
    let wheel = color_wheel();
    let max = max_radius.unwrap_or_else(|| {
        flow.data
            .data()
            .iter()
            .zip(flow.valid.data())
            .filter(|(_, &ok)| ok)
            .map(|(v, _)| (v[0] * v[0] + v[1] * v[1]).sqrt())
            .fold(0.0, f64::max)
    });
    let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
    let (w, h) = flow.dims();
    Plane::from_fn(w, h, |x, y| {
        if !*flow.valid.get(x, y) {
            return [0.0; 3];
        }
        let v = flow.data.get(x, y);
        flow_color(v[0] * scale, v[1] * scale, &wheel)
    })
}

//! Row-major 2D buffers used for every per-pixel quantity.

use crate::error::{Error, Result};

/// A `width × height` grid of values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type ColorImage = Plane<[f64; 3]>;
pub type VectorImage = Plane<[f64; 2]>;
pub type ScalarImage = Plane<f64>;
pub type Mask = Plane<bool>;

impl<T: Clone> Plane<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Plane<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "{} values for a {width}x{height} plane",
                data.len()
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn same_shape<U>(&self, other: &Plane<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Errors with `ShapeMismatch` unless `other` has the same dimensions.
    pub fn check_shape<U>(&self, other: &Plane<U>, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Plane<U> {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

/// Result of sampling a plane at a fractional position.
#[derive(Clone, Copy, Debug)]
pub struct Sample<const N: usize> {
    pub value: [f64; N],
    /// Derivative of `value` w.r.t. the sample x coordinate (zero when clamped).
    pub d_dx: [f64; N],
    /// Derivative of `value` w.r.t. the sample y coordinate (zero when clamped).
    pub d_dy: [f64; N],
    /// False when the requested position fell outside the pixel grid.
    pub in_bounds: bool,
    /// Top-left integer corner and the fractional weights used.
    pub corner: (usize, usize),
    pub frac: (f64, f64),
}

/// Pixel centers sit at integer coordinates. Positions outside
/// `[0, w-1] × [0, h-1]` are clamped to the border and reported as out of bounds.
pub fn sample_bilinear<const N: usize>(plane: &Plane<[f64; N]>, x: f64, y: f64) -> Sample<N> {
    let w = plane.width;
    let h = plane.height;
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let in_bounds = x >= 0.0 && y >= 0.0 && x <= max_x && y <= max_y && x.is_finite() && y.is_finite();
    let clamped_x = !(x >= 0.0 && x <= max_x);
    let clamped_y = !(y >= 0.0 && y <= max_y);
    let cx = if x.is_nan() { 0.0 } else { x.clamp(0.0, max_x) };
    let cy = if y.is_nan() { 0.0 } else { y.clamp(0.0, max_y) };

    let x0 = if w > 1 { (cx.floor() as usize).min(w - 2) } else { 0 };
    let y0 = if h > 1 { (cy.floor() as usize).min(h - 2) } else { 0 };
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;

    let p00 = plane.get(x0, y0);
    let p10 = plane.get(x1, y0);
    let p01 = plane.get(x0, y1);
    let p11 = plane.get(x1, y1);
    let mut value = [0.0; N];
    let mut d_dx = [0.0; N];
    let mut d_dy = [0.0; N];
    for c in 0..N {
        let top = p00[c] + fx * (p10[c] - p00[c]);
        let bottom = p01[c] + fx * (p11[c] - p01[c]);
        value[c] = top + fy * (bottom - top);
        if !clamped_x && w > 1 {
            d_dx[c] = (1.0 - fy) * (p10[c] - p00[c]) + fy * (p11[c] - p01[c]);
        }
        if !clamped_y && h > 1 {
            d_dy[c] = bottom - top;
        }
    }
    Sample {
        value,
        d_dx,
        d_dy,
        in_bounds,
        corner: (x0, y0),
        frac: (fx, fy),
    }
}

/// Scatters `grad` into the four pixels used by a bilinear sample.
pub fn scatter_bilinear<const N: usize>(
    target: &mut Plane<[f64; N]>,
    corner: (usize, usize),
    frac: (f64, f64),
    grad: &[f64; N],
) {
    let (x0, y0) = corner;
    let x1 = (x0 + 1).min(target.width - 1);
    let y1 = (y0 + 1).min(target.height - 1);
    let (fx, fy) = frac;
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ];
    for (x, y, wgt) in taps {
        if wgt == 0.0 {
            continue;
        }
        let px = target.get_mut(x, y);
        for c in 0..N {
            px[c] += wgt * grad[c];
        }
    }
}

use crate::error::{Error, Result};

/// Reserved label for pixels with no confident category.
pub const UNCERTAIN_LABEL: u8 = 255;

/// Row-major, channel-interleaved float image. Pixel `(x, y)` has its center
/// at continuous coordinate `(u, v) = (x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::mismatch(width * height * channels, data.len()));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, channels, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Copies the `w x h` window whose top-left pixel is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        Image::from_fn(w, h, self.channels, |x, y, c| self.get(x0 + x, y0 + y, c))
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }
}

/// Row-major 8-bit category labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }
}

/// Bilinear sample result; `valid` is false outside `[0, W-1] x [0, H-1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub values: Vec<f64>,
    pub valid: bool,
}

pub fn bilinear_sample(image: &Image, u: f64, v: f64) -> Sample {
    let mut values = vec![0.0; image.channels];
    let valid = bilinear_sample_into(image, u, v, &mut values, None);
    Sample { values, valid }
}

/// Samples into `out`; when `grad` is given, also writes `d/du` and `d/dv`
/// per channel (one-sided at integer coordinates, taken from the cell to the
/// lower-right). Returns validity; `out` is untouched when invalid.
#[inline]
pub fn bilinear_sample_into(
    image: &Image,
    u: f64,
    v: f64,
    out: &mut [f64],
    grad: Option<(&mut [f64], &mut [f64])>,
) -> bool {
    let (w, h) = (image.width, image.height);
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return false;
    }
    let (x0, fx) = cell(u, w);
    let (y0, fy) = cell(v, h);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let c = image.channels;
    let p00 = image.pixel(x0, y0);
    let p10 = image.pixel(x1, y0);
    let p01 = image.pixel(x0, y1);
    let p11 = image.pixel(x1, y1);
    for k in 0..c {
        let top = p00[k] + fx * (p10[k] - p00[k]);
        let bottom = p01[k] + fx * (p11[k] - p01[k]);
        out[k] = top + fy * (bottom - top);
    }
    if let Some((du, dv)) = grad {
        for k in 0..c {
            du[k] = (1.0 - fy) * (p10[k] - p00[k]) + fy * (p11[k] - p01[k]);
            dv[k] = (1.0 - fx) * (p01[k] - p00[k]) + fx * (p11[k] - p10[k]);
        }
    }
    true
}

#[inline]
fn cell(u: f64, n: usize) -> (usize, f64) {
    if n < 2 {
        return (0, 0.0);
    }
    let i = (u.floor() as usize).min(n - 2);
    (i, u - i as f64)
}

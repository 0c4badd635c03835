//! 8-bit rasters and the mask-driven view construction primitives.

mod augment;
mod io;
mod morphology;

pub use augment::{augment, Transform, MAX_ROTATION_DEG};
pub use io::{read_gray, read_mask, write_gray, write_mask};
pub use morphology::{apply_mask, boundary_band, dilate_n, erode_n, roughness};

use crate::{Error, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Bilinear,
}

/// Row-major grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

/// Row-major binary mask with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Dimension(format!(
            "raster dimensions must be positive, got {width}x{height}"
        )));
    }
    if width * height != len {
        return Err(Error::Dimension(format!(
            "{width}x{height} raster needs {} pixels, got {len}",
            width * height
        )));
    }
    Ok(())
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        check_dims(width, height, pixels.len())?;
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("positive dims")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn resize(&self, out_w: usize, out_h: usize, mode: Interp) -> Result<Self> {
        check_dims(out_w, out_h, out_w * out_h)?;
        if out_w == self.width && out_h == self.height {
            return Ok(self.clone());
        }
        let mut out = Vec::with_capacity(out_w * out_h);
        match mode {
            Interp::Nearest => {
                let xs: Vec<usize> = (0..out_w).map(|i| nearest_src(i, self.width, out_w)).collect();
                for j in 0..out_h {
                    let sy = nearest_src(j, self.height, out_h);
                    out.extend(xs.iter().map(|&sx| self.get(sx, sy)));
                }
            }
            Interp::Bilinear => {
                let xs: Vec<_> = (0..out_w).map(|i| linear_src(i, self.width, out_w)).collect();
                for j in 0..out_h {
                    let (y0, y1, ty) = linear_src(j, self.height, out_h);
                    for &(x0, x1, tx) in &xs {
                        let top = lerp(self.get(x0, y0), self.get(x1, y0), tx);
                        let bottom = lerp(self.get(x0, y1), self.get(x1, y1), tx);
                        out.push(to_u8(top + (bottom - top) * ty));
                    }
                }
            }
        }
        Self::new(out_w, out_h, out)
    }

    /// Three identical channels scaled to `[0, 1]`: `[3, H, W]`.
    pub fn to_pseudo_rgb(&self) -> Tensor {
        let plane: Vec<Real> = self.pixels.iter().map(|&p| p as Real / 255.0).collect();
        let mut data = Vec::with_capacity(plane.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&plane);
        }
        Tensor::new(&[3, self.height, self.width], data).expect("dims checked at construction")
    }
}

impl BinaryMask {
    /// Builds a mask; any nonzero input value becomes 1.
    pub fn new(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        check_dims(width, height, bits.len())?;
        let bits = bits.into_iter().map(|b| u8::from(b != 0)).collect();
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![0; width * height]).expect("positive dims")
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![1; width * height]).expect("positive dims")
    }

    /// Mask from a predicate over pixel coordinates.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(u8::from(f(x, y)));
            }
        }
        Self::new(width, height, bits).expect("positive dims")
    }

    /// Thresholds 8-bit intensities at `> 127`.
    pub fn from_gray(img: &GrayImage) -> Self {
        let bits = img.pixels().iter().map(|&p| u8::from(p > 127)).collect();
        Self::new(img.width(), img.height(), bits).expect("same dims")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = u8::from(v);
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.same_dims(other) && self.bits.iter().zip(&other.bits).all(|(a, b)| a <= b)
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn and_not(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a & (1 - b))
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(u8, u8) -> u8) -> BinaryMask {
        assert!(self.same_dims(other), "mask dimensions differ");
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Masks only support nearest-neighbour resampling.
    pub fn resize(&self, out_w: usize, out_h: usize, mode: Interp) -> Result<Self> {
        if mode != Interp::Nearest {
            return Err(Error::Usage(
                "binary masks must be resized with nearest-neighbour interpolation".into(),
            ));
        }
        check_dims(out_w, out_h, out_w * out_h)?;
        let xs: Vec<usize> = (0..out_w).map(|i| nearest_src(i, self.width, out_w)).collect();
        let mut bits = Vec::with_capacity(out_w * out_h);
        for j in 0..out_h {
            let sy = nearest_src(j, self.height, out_h);
            bits.extend(xs.iter().map(|&sx| self.bits[sy * self.width + sx]));
        }
        Self::new(out_w, out_h, bits)
    }

    /// 0/255 rendering for storage.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::new(
            self.width,
            self.height,
            self.bits.iter().map(|&b| b * 255).collect(),
        )
        .expect("same dims")
    }
}

/// Center-aligned nearest source index.
fn nearest_src(i: usize, in_len: usize, out_len: usize) -> usize {
    (((i as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
}

/// Center-aligned linear interpolation taps and weight.
fn linear_src(i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let x = ((i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
    let x0 = x.floor() as usize;
    let x1 = (x0 + 1).min(in_len - 1);
    (x0, x1, x - x0 as f64)
}

fn lerp(a: u8, b: u8, t: f64) -> f64 {
    a as f64 + (b as f64 - a as f64) * t
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

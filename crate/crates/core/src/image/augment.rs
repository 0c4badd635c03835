//! Paired geometric augmentation for an (image, mask) pair.

use rand::Rng;

use super::{BinaryMask, GrayImage};

pub const MAX_ROTATION_DEG: f64 = 15.0;

/// Flip-then-rotate transform applied identically to an image and its mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise rotation about the image center, in degrees.
    pub angle_deg: f64,
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            vflip: false,
            angle_deg: 0.0,
        }
    }

    /// Draws the flips (p = 0.5 each) and a uniform angle in [-15, 15].
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let angle_deg = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
        Self {
            hflip,
            vflip,
            angle_deg,
        }
    }

    /// Source coordinate for output pixel `(x, y)`.
    fn source(&self, x: usize, y: usize, w: usize, h: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        // inverse rotation takes the output pixel back into the flipped frame
        let (s, c) = (-self.angle_deg.to_radians()).sin_cos();
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let mut fx = c * dx - s * dy + cx;
        let mut fy = s * dx + c * dy + cy;
        if self.hflip {
            fx = w as f64 - 1.0 - fx;
        }
        if self.vflip {
            fy = h as f64 - 1.0 - fy;
        }
        (fx, fy)
    }

    /// Bilinear resampling, zero outside the source.
    pub fn apply_gray(&self, img: &GrayImage) -> GrayImage {
        let (w, h) = (img.width(), img.height());
        let at = |x: i64, y: i64| -> f64 {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                0.0
            } else {
                img.get(x as usize, y as usize) as f64
            }
        };
        let mut out = GrayImage::filled(w, h, 0);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(x, y, w, h);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (tx, ty) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                let v = at(x0, y0) * (1.0 - tx) * (1.0 - ty)
                    + at(x0 + 1, y0) * tx * (1.0 - ty)
                    + at(x0, y0 + 1) * (1.0 - tx) * ty
                    + at(x0 + 1, y0 + 1) * tx * ty;
                out.set(x, y, v.round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    /// Nearest-neighbour resampling, background outside the source.
    pub fn apply_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let (w, h) = (mask.width(), mask.height());
        BinaryMask::from_fn(w, h, |x, y| {
            let (sx, sy) = self.source(x, y, w, h);
            let (rx, ry) = (sx.round(), sy.round());
            rx >= 0.0 && ry >= 0.0 && rx < w as f64 && ry < h as f64 && mask.get(rx as usize, ry as usize)
        })
    }
}

/// Samples one transform and applies it to both rasters.
pub fn augment<R: Rng + ?Sized>(
    image: &GrayImage,
    mask: &BinaryMask,
    rng: &mut R,
) -> (GrayImage, BinaryMask) {
    let t = Transform::sample(rng);
    (t.apply_gray(image), t.apply_mask(mask))
}

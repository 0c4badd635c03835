//! Binary morphology with the 3x3 all-ones structuring element.
//!
//! Pixels outside the raster count as background: erosion strips the image
//! border and dilation never grows past it.

use super::{BinaryMask, GrayImage};
use crate::{Error, Result};

/// One erosion pass: a pixel survives iff its full 3x3 neighbourhood is set.
fn erode_once(m: &BinaryMask) -> BinaryMask {
    let (w, h) = (m.width(), m.height());
    BinaryMask::from_fn(w, h, |x, y| {
        if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
            return false;
        }
        (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| m.get(xx, yy)))
    })
}

/// One dilation pass: a pixel is set iff any in-bounds 3x3 neighbour is set.
fn dilate_once(m: &BinaryMask) -> BinaryMask {
    let (w, h) = (m.width(), m.height());
    BinaryMask::from_fn(w, h, |x, y| {
        let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
        (y0..=y1).any(|yy| (x0..=x1).any(|xx| m.get(xx, yy)))
    })
}

pub fn erode_n(mask: &BinaryMask, iterations: usize) -> BinaryMask {
    let mut m = mask.clone();
    for _ in 0..iterations {
        if m.is_empty() {
            break;
        }
        m = erode_once(&m);
    }
    m
}

pub fn dilate_n(mask: &BinaryMask, iterations: usize) -> BinaryMask {
    let mut m = mask.clone();
    for _ in 0..iterations {
        m = dilate_once(&m);
    }
    m
}

/// Ring just outside the lesion: `dilate_n(mask, iterations) AND NOT mask`.
pub fn boundary_band(mask: &BinaryMask, iterations: usize) -> BinaryMask {
    dilate_n(mask, iterations).and_not(mask)
}

/// Keeps image pixels under the mask and blacks out the rest.
pub fn apply_mask(image: &GrayImage, mask: &BinaryMask) -> Result<GrayImage> {
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(Error::Dimension(format!(
            "image is {}x{} but mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    let pixels = image
        .pixels()
        .iter()
        .zip(mask.bits())
        .map(|(&p, &b)| p * b)
        .collect();
    GrayImage::new(image.width(), image.height(), pixels)
}

/// Boundary roughness `perimeter^2 / area`, where the perimeter counts mask
/// pixels with at least one 4-neighbour outside the mask (or the image).
/// About 10 for a digital disc; spiculated shapes score far higher.
pub fn roughness(mask: &BinaryMask) -> f64 {
    let area = mask.count();
    if area == 0 {
        return 0.0;
    }
    let (w, h) = (mask.width(), mask.height());
    let mut perimeter = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1);
            perimeter += usize::from(edge);
        }
    }
    (perimeter * perimeter) as f64 / area as f64
}

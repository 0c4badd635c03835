//! Grayscale PGM (binary P5) and PNG reading and writing.

use std::fs;
use std::path::Path;

use super::{BinaryMask, GrayImage};
use crate::{Error, Result};

fn codec_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Codec {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

/// Reads an 8-bit grayscale image; colour PNGs are converted to luma.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    if is_pgm(path) {
        let bytes = fs::read(path)?;
        return parse_pgm(&bytes).map_err(|m| codec_err(path, m));
    }
    let img = image::open(path).map_err(|e| codec_err(path, e.to_string()))?;
    let luma = img.into_luma8();
    let (w, h) = luma.dimensions();
    GrayImage::new(w as usize, h as usize, luma.into_raw())
}

/// Reads a mask, thresholding intensities at `> 127`.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    Ok(BinaryMask::from_gray(&read_gray(path)?))
}

/// Writes PGM or PNG depending on the extension.
pub fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    if is_pgm(path) {
        let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
        out.extend_from_slice(img.pixels());
        fs::write(path, out)?;
        return Ok(());
    }
    image::save_buffer(
        path,
        img.pixels(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| codec_err(path, e.to_string()))
}

/// Writes a mask as a 0/255 grayscale image.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_gray(path, &mask.to_gray())
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("unsupported PGM magic `{}`", fields[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PGM header field `{s}`"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format!("only 8-bit PGM is supported (maxval {maxval})"));
    }
    pos += 1; // single whitespace byte after maxval
    let data = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| "truncated PGM pixel data".to_string())?;
    let pixels = if maxval == 255 {
        data.to_vec()
    } else {
        data.iter()
            .map(|&p| ((p as usize * 255 + maxval / 2) / maxval) as u8)
            .collect()
    };
    GrayImage::new(w, h, pixels).map_err(|e| e.to_string())
}

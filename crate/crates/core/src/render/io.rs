//! Raw map files: a 16-byte header `{magic, u32 H, u32 W, u32 reserved}`
//! followed by `H*W` little-endian values, row-major.

use std::path::Path;

use image::RgbImage;

use super::RenderOutput;
use crate::error::{Error, Result};
use crate::io_util::{read_bytes, write_bytes};

const PIDX_MAGIC: &[u8; 4] = b"PIDX";
const DEPTH_MAGIC: &[u8; 4] = b"DPTH";
const HEADER_LEN: usize = 16;

fn header(magic: &[u8; 4], height: u32, width: u32) -> Vec<u8> {
    let mut h = Vec::with_capacity(HEADER_LEN);
    h.extend_from_slice(magic);
    h.extend_from_slice(&height.to_le_bytes());
    h.extend_from_slice(&width.to_le_bytes());
    h.extend_from_slice(&0u32.to_le_bytes());
    h
}

/// Returns `(height, width, payload)`.
fn parse<'a>(bytes: &'a [u8], magic: &[u8; 4], path: &Path) -> Result<(u32, u32, &'a [u8])> {
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < HEADER_LEN || &bytes[..4] != magic {
        return Err(bad(format!(
            "missing {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let (h, w) = (word(4), word(8));
    let payload = &bytes[HEADER_LEN..];
    let expected = h as usize * w as usize * 4;
    if payload.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes, expected {expected} for {h}x{w}",
            payload.len()
        )));
    }
    Ok((h, w, payload))
}

pub fn encode_point_index(height: u32, width: u32, index: &[i32]) -> Vec<u8> {
    let mut out = header(PIDX_MAGIC, height, width);
    for v in index {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_depth(height: u32, width: u32, depth: &[f32]) -> Vec<u8> {
    let mut out = header(DEPTH_MAGIC, height, width);
    for v in depth {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_point_index(path: &Path, height: u32, width: u32, index: &[i32]) -> Result<()> {
    write_bytes(path, &encode_point_index(height, width, index))
}

pub fn write_depth(path: &Path, height: u32, width: u32, depth: &[f32]) -> Result<()> {
    write_bytes(path, &encode_depth(height, width, depth))
}

/// Returns `(height, width, values)`.
pub fn read_point_index(path: &Path) -> Result<(u32, u32, Vec<i32>)> {
    let bytes = read_bytes(path)?;
    let (h, w, payload) = parse(&bytes, PIDX_MAGIC, path)?;
    let values = payload
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((h, w, values))
}

/// Returns `(height, width, values)`.
pub fn read_depth(path: &Path) -> Result<(u32, u32, Vec<f32>)> {
    let bytes = read_bytes(path)?;
    let (h, w, payload) = parse(&bytes, DEPTH_MAGIC, path)?;
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((h, w, values))
}

pub(crate) fn write_png(path: &Path, width: u32, height: u32, rgb: &[u8]) -> Result<()> {
    let img = RgbImage::from_raw(width, height, rgb.to_vec())
        .ok_or_else(|| Error::DimensionMismatch("rgb buffer size".into()))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub(crate) fn read_png(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    let rgb = img.to_rgb8();
    Ok((rgb.width(), rgb.height(), rgb.into_raw()))
}

impl RenderOutput {
    pub fn png_name(view_index: u32) -> String {
        format!("view{view_index}.png")
    }

    pub fn pidx_name(view_index: u32) -> String {
        format!("view{view_index}.pidx")
    }

    pub fn depth_name(view_index: u32) -> String {
        format!("view{view_index}.dpth")
    }

    /// Writes `view{i}.png`, `view{i}.pidx` and `view{i}.dpth` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        let i = self.view_index;
        write_png(&dir.join(Self::png_name(i)), self.width, self.height, &self.rgb)?;
        write_point_index(
            &dir.join(Self::pidx_name(i)),
            self.height,
            self.width,
            &self.point_index,
        )?;
        write_depth(&dir.join(Self::depth_name(i)), self.height, self.width, &self.depth)
    }

    /// Reads a view written by [`RenderOutput::write_to_dir`]. The PNG is
    /// optional; a white image is substituted when it is absent.
    pub fn read_from_dir(dir: &Path, view_index: u32) -> Result<Self> {
        let (h, w, point_index) = read_point_index(&dir.join(Self::pidx_name(view_index)))?;
        let (dh, dw, depth) = read_depth(&dir.join(Self::depth_name(view_index)))?;
        if (dh, dw) != (h, w) {
            return Err(Error::DimensionMismatch(format!(
                "view {view_index}: depth is {dh}x{dw}, point index is {h}x{w}"
            )));
        }
        let png = dir.join(Self::png_name(view_index));
        let rgb = if png.exists() {
            let (pw, ph, rgb) = read_png(&png)?;
            if (ph, pw) != (h, w) {
                return Err(Error::DimensionMismatch(format!(
                    "view {view_index}: image is {ph}x{pw}, point index is {h}x{w}"
                )));
            }
            rgb
        } else {
            super::BACKGROUND_RGB.repeat(h as usize * w as usize)
        };
        Ok(Self {
            width: w,
            height: h,
            rgb,
            depth,
            point_index,
            view_index,
        })
    }
}

//! Binary greyscale (P5) images.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use modelab_core::data::quantize;
use modelab_core::Result;

/// `P5` bytes of a `width × height` image with values in `[0, 1]`.
pub fn encode(width: usize, height: usize, pixels: &[f64]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| quantize(v)));
    out
}

/// Writes through a `.partial` sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp: PathBuf = path.as_os_str().to_owned().into();
    tmp.as_mut_os_string().push(".partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Lays out rows of equally sized frames on a zero background.
pub fn strip(rows: &[Vec<&[f64]>], height: usize, width: usize) -> (usize, usize, Vec<f64>) {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (sw, sh) = (cols * width, rows.len() * height);
    let mut px = vec![0.0; sw * sh];
    for (r, row) in rows.iter().enumerate() {
        for (c, frame) in row.iter().enumerate() {
            for y in 0..height {
                let dst = (r * height + y) * sw + c * width;
                px[dst..dst + width].copy_from_slice(&frame[y * width..(y + 1) * width]);
            }
        }
    }
    (sw, sh, px)
}

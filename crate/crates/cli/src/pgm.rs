//! Binary 16-bit portable graymap export.

use std::path::Path;

use fasterfc::{Result, Tensor};

/// Encodes an `h × w` image as P5 with maxval 65535. Values are scaled by
/// `1/peak` and clamped to `[0, 1]`; samples are big-endian.
pub fn encode(pixels: &[f64], h: usize, w: usize, peak: f64) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    let inv = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    for &v in &pixels[..h * w] {
        let q = ((v * inv).clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

/// Writes every slice along the first axis of a 3D volume, or the single
/// image of a 2D one, to `dir/slice-NNN.pgm`. All slices share the volume
/// maximum as peak. Returns the number of files written.
pub fn export_slices(volume: &Tensor, dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    let shape = volume.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let peak = volume.max();
    let slices = volume.len() / (h * w);
    for (i, img) in volume.data().chunks_exact(h * w).enumerate() {
        std::fs::write(dir.join(format!("slice-{i:03}.pgm")), encode(img, h, w, peak))?;
    }
    Ok(slices)
}

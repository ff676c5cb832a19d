use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::checkpoint::write_atomic;

/// Tile `n` images of `channels x h x w` bytes (CHW) into a row-major grid with
/// a one-pixel black border. Returns a binary PGM (one channel) or PPM (three).
pub fn encode_grid(images: &[u8], n: usize, channels: usize, h: usize, w: usize) -> Result<Vec<u8>> {
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidArgument(format!("cannot write a {channels}-channel image grid")));
    }
    if n == 0 || images.len() != n * channels * h * w {
        return Err(Error::shape("image grid", &[n, channels, h, w], &[images.len()]));
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut pix = vec![0u8; gw * gh * channels];
    for k in 0..n {
        let (r, c) = (k / cols, k % cols);
        let img = &images[k * channels * h * w..(k + 1) * channels * h * w];
        for y in 0..h {
            for x in 0..w {
                let (gy, gx) = (1 + r * (h + 1) + y, 1 + c * (w + 1) + x);
                for ch in 0..channels {
                    pix[(gy * gw + gx) * channels + ch] = img[ch * h * w + y * w + x];
                }
            }
        }
    }
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{gw} {gh}\n255\n").into_bytes();
    out.extend(pix);
    Ok(out)
}

pub fn grid_extension(channels: usize) -> &'static str {
    if channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

pub fn write_grid(path: &Path, images: &[u8], n: usize, channels: usize, h: usize, w: usize) -> Result<()> {
    write_atomic(path, &encode_grid(images, n, channels, h, w)?)
}

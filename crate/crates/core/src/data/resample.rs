use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resample {
    Nearest,
    Bilinear,
}

/// Resample every `h x w` plane of `src` to `th x tw`.
///
/// Pixel centres sit at half-integer coordinates; bilinear taps outside the
/// source are clamped to the border, so the output stays within the input range.
pub fn resample(src: &[f64], channels: usize, h: usize, w: usize, th: usize, tw: usize, method: Resample) -> Result<Vec<f64>> {
    if th == 0 || tw == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("cannot resample {h}x{w} to {th}x{tw}")));
    }
    if src.len() != channels * h * w {
        return Err(Error::shape("resample", &[channels, h, w], &[src.len()]));
    }
    if (th, tw) == (h, w) {
        return Ok(src.to_vec());
    }
    let mut out = vec![0.0; channels * th * tw];
    let (sy, sx) = (h as f64 / th as f64, w as f64 / tw as f64);
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * th * tw..(c + 1) * th * tw];
        for i in 0..th {
            for j in 0..tw {
                dst[i * tw + j] = match method {
                    Resample::Nearest => {
                        let si = ((i * h) / th).min(h - 1);
                        let sj = ((j * w) / tw).min(w - 1);
                        plane[si * w + sj]
                    }
                    Resample::Bilinear => {
                        let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                        let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                        let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                        let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                        top * (1.0 - fy) + bot * fy
                    }
                };
            }
        }
    }
    Ok(out)
}

/// [`resample`] for 8-bit images, rounding to nearest.
pub fn resample_u8(src: &[u8], channels: usize, h: usize, w: usize, th: usize, tw: usize, method: Resample) -> Result<Vec<u8>> {
    let f: Vec<f64> = src.iter().map(|&v| f64::from(v)).collect();
    let out = resample(&f, channels, h, w, th, tw, method)?;
    Ok(out.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect())
}

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::Rng;

use super::pack::{pack, PackedDataset, PackedLayout, PackedSample};

pub const MAX_SYNTH_CLASSES: usize = 16;
pub const MIN_SYNTH_RESOLUTION: usize = 8;
pub const BAR: &str = "bar";
pub const DISC: &str = "disc";

fn jitter(rng: &mut Rng, half_width: f64) -> f64 {
    (2.0 * rng.uniform() - 1.0) * half_width
}

/// Glyph intensities span `[FLOOR, CEIL]` of the byte range, leaving headroom
/// on both sides of the packed `[-1, 1]` interval.
const FLOOR: f64 = 0.1;
const CEIL: f64 = 0.9;

fn to_u8(v: f64) -> u8 {
    ((FLOOR + (CEIL - FLOOR) * v.clamp(0.0, 1.0)) * 255.0).round() as u8
}

/// A bar through the (jittered) centre whose orientation encodes the class.
fn render_bar(class: usize, n_classes: usize, res: usize, rng: &mut Rng) -> Vec<u8> {
    let r = res as f64;
    let step = PI / n_classes as f64;
    let theta = class as f64 * step + jitter(rng, 0.2 * step);
    let cy = (r - 1.0) / 2.0 + jitter(rng, r / 16.0);
    let cx = (r - 1.0) / 2.0 + jitter(rng, r / 16.0);
    let half_thick = r / 10.0 + jitter(rng, r / 40.0);
    let half_len = 0.42 * r;
    let level = 0.8 + 0.2 * rng.uniform();
    let (s, c) = theta.sin_cos();
    let mut img = Vec::with_capacity(res * res);
    for y in 0..res {
        for x in 0..res {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let along = (dx * c + dy * s).abs();
            let across = (-dx * s + dy * c).abs();
            let v = (half_thick + 0.5 - across).clamp(0.0, 1.0) * (half_len + 0.5 - along).clamp(0.0, 1.0);
            img.push(to_u8(level * v));
        }
    }
    img
}

/// A filled disc whose radius encodes the class.
fn render_disc(class: usize, n_classes: usize, res: usize, rng: &mut Rng) -> Vec<u8> {
    let r = res as f64;
    let (lo, span) = (0.15 * r, 0.25 * r);
    let step = if n_classes > 1 { span / (n_classes - 1) as f64 } else { 0.0 };
    let radius = lo + class as f64 * step + jitter(rng, 0.2 * step);
    let cy = (r - 1.0) / 2.0 + jitter(rng, r / 16.0);
    let cx = (r - 1.0) / 2.0 + jitter(rng, r / 16.0);
    let level = 0.8 + 0.2 * rng.uniform();
    let mut img = Vec::with_capacity(res * res);
    for y in 0..res {
        for x in 0..res {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            img.push(to_u8(level * (radius + 0.5 - d).clamp(0.0, 1.0)));
        }
    }
    img
}

pub fn synth_layout(res: usize) -> PackedLayout {
    PackedLayout::new(&[(BAR, 1, res, res), (DISC, 1, res, res)], res, res).unwrap()
}

/// Paired single-channel glyph modalities: `bar` (orientation by class) in
/// channel 0, `disc` (radius by class) in channel 1. Classes cycle through the
/// sample order.
pub fn synth_paired(n_classes: usize, per_class: usize, res: usize, rng: &mut Rng) -> Result<PackedDataset> {
    if n_classes == 0 || n_classes > MAX_SYNTH_CLASSES {
        return Err(Error::InvalidArgument(format!("n_classes must be in 1..={MAX_SYNTH_CLASSES}, got {n_classes}")));
    }
    if res < MIN_SYNTH_RESOLUTION {
        return Err(Error::InvalidArgument(format!(
            "resolution {res} is too small to render glyphs (minimum {MIN_SYNTH_RESOLUTION})"
        )));
    }
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be positive".into()));
    }
    let layout = synth_layout(res);
    let mut samples: Vec<PackedSample> = Vec::with_capacity(n_classes * per_class);
    for i in 0..per_class * n_classes {
        let k = i % n_classes;
        let bar = render_bar(k, n_classes, res, rng);
        let disc = render_disc(k, n_classes, res, rng);
        samples.push(pack(&[&bar, &disc], &[k as u8, k as u8], &[i, i], &layout)?);
    }
    PackedDataset::from_samples(layout, &samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_balance_and_determinism() {
        let ds = synth_paired(4, 256, 16, &mut Rng::new(3, 0)).unwrap();
        assert_eq!(ds.len(), 1024);
        assert_eq!(ds.data.shape(), &[1024, 2, 16, 16]);
        for k in 0..4u8 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == k).count(), 256);
        }
        let again = synth_paired(4, 256, 16, &mut Rng::new(3, 0)).unwrap();
        assert_eq!(ds, again);
        assert_ne!(ds, synth_paired(4, 256, 16, &mut Rng::new(4, 0)).unwrap());
    }

    #[test]
    fn rejects_bad_arguments() {
        let mut rng = Rng::new(0, 0);
        assert!(synth_paired(4, 2, 7, &mut rng).is_err());
        assert!(synth_paired(17, 2, 16, &mut rng).is_err());
        assert!(synth_paired(16, 1, 8, &mut rng).is_ok());
    }

    #[test]
    fn disc_area_grows_with_class() {
        let mut rng = Rng::new(1, 0);
        let area: Vec<u32> = (0..4)
            .map(|k| render_disc(k, 4, 16, &mut rng).iter().map(|&v| u32::from(v > to_u8(0.0))).sum())
            .collect();
        assert!(area.windows(2).all(|w| w[0] < w[1]), "{area:?}");
    }

    #[test]
    fn intensities_keep_headroom() {
        let ds = synth_paired(4, 16, 16, &mut Rng::new(2, 0)).unwrap();
        let (lo, hi) = ds.data.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!((lo + 0.8).abs() < 0.01, "{lo}");
        assert!(hi > 0.3 && hi <= 0.8 + 0.01, "{hi}");
    }
}

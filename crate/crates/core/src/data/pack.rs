use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Container, Precision, Tensor};

/// One modality's slot in the packed channel stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySlot {
    pub name: String,
    pub channels: Range<usize>,
    /// Native (H, W) before resampling.
    pub native: (usize, usize),
    /// Source value range, mapped onto [-1, 1].
    pub value_range: (u8, u8),
}

impl ModalitySlot {
    pub fn width(&self) -> usize {
        self.channels.len()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.channels.clone().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedLayout {
    pub modalities: Vec<ModalitySlot>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl PackedLayout {
    /// Modalities are stacked in order; each entry is (name, channels, native H, native W).
    pub fn new(modalities: &[(&str, usize, usize, usize)], height: usize, width: usize) -> Result<Self> {
        if modalities.is_empty() || height == 0 || width == 0 {
            return Err(Error::InvalidArgument("layout needs modalities and a nonzero resolution".into()));
        }
        let mut start = 0;
        let mut slots = Vec::new();
        for &(name, c, h, w) in modalities {
            if c == 0 {
                return Err(Error::InvalidArgument(format!("modality {name} has no channels")));
            }
            if slots.iter().any(|s: &ModalitySlot| s.name == name) {
                return Err(Error::InvalidArgument(format!("duplicate modality {name}")));
            }
            slots.push(ModalitySlot { name: name.to_string(), channels: start..start + c, native: (h, w), value_range: (0, 255) });
            start += c;
        }
        Ok(PackedLayout { modalities: slots, height, width, channels: start })
    }

    /// A 3-channel colour modality followed by a grayscale one.
    pub fn color_gray(size: usize) -> Self {
        PackedLayout::new(&[("color", 3, 32, 32), ("gray", 1, 28, 28)], size, size).unwrap()
    }

    pub fn modality(&self, name: &str) -> Result<&ModalitySlot> {
        self.modalities
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no modality named {name:?}")))
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedSample {
    /// `[C, H, W]` in [-1, 1].
    pub data: Tensor,
    pub labels: Vec<u8>,
    pub sources: Vec<usize>,
}

pub fn to_unit(v: u8) -> f64 {
    2.0 * f64::from(v) / 255.0 - 1.0
}

pub fn from_unit(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Place per-modality images (already at layout resolution) into one sample.
pub fn pack(images: &[&[u8]], labels: &[u8], sources: &[usize], layout: &PackedLayout) -> Result<PackedSample> {
    let m = layout.modalities.len();
    if images.len() != m || labels.len() != m || sources.len() != m {
        return Err(Error::InvalidArgument(format!(
            "layout has {m} modalities, got {} images, {} labels, {} sources",
            images.len(),
            labels.len(),
            sources.len()
        )));
    }
    if labels.iter().any(|&l| l != labels[0]) {
        return Err(Error::Data(format!("labels disagree across modalities: {labels:?}")));
    }
    let mut data = Vec::with_capacity(layout.channels * layout.plane());
    for (slot, img) in layout.modalities.iter().zip(images) {
        let expected = slot.width() * layout.plane();
        if img.len() != expected {
            return Err(Error::shape(
                "pack",
                &[slot.width(), layout.height, layout.width],
                &[img.len()],
            ));
        }
        data.extend(img.iter().map(|&v| to_unit(v)));
    }
    Ok(PackedSample {
        data: Tensor::new(vec![layout.channels, layout.height, layout.width], data)?,
        labels: labels.to_vec(),
        sources: sources.to_vec(),
    })
}

/// Recover one modality's 8-bit image from packed `[C, H, W]` values.
pub fn unpack(data: &[f64], layout: &PackedLayout, modality: &str) -> Result<Vec<u8>> {
    let slot = layout.modality(modality)?;
    let p = layout.plane();
    if data.len() < layout.channels * p {
        return Err(Error::shape("unpack", &[layout.channels, layout.height, layout.width], &[data.len()]));
    }
    Ok(data[slot.channels.start * p..slot.channels.end * p].iter().map(|&x| from_unit(x)).collect())
}

/// A packed dataset held as one `[N, C, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedDataset {
    pub layout: PackedLayout,
    pub data: Tensor,
    /// Shared class label per sample.
    pub labels: Vec<u8>,
    /// `[N, modalities]` source indices.
    pub sources: Vec<usize>,
}

impl PackedDataset {
    pub fn from_samples(layout: PackedLayout, samples: &[PackedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("empty packed dataset".into()));
        }
        let tensors: Vec<Tensor> = samples.iter().map(|s| s.data.clone()).collect();
        let data = Tensor::stack(&tensors)?;
        let labels = samples.iter().map(|s| s.labels[0]).collect();
        let sources = samples.iter().flat_map(|s| s.sources.iter().copied()).collect();
        let ds = PackedDataset { layout, data, labels, sources };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    /// Shape, value-range and source-count checks over the whole set.
    pub fn validate(&self) -> Result<()> {
        let l = &self.layout;
        if self.data.shape() != [self.len(), l.channels, l.height, l.width] {
            return Err(Error::shape("packed dataset", &[self.len(), l.channels, l.height, l.width], self.data.shape()));
        }
        if self.sources.len() != self.len() * l.modalities.len() {
            return Err(Error::Data("source index table does not match sample count".into()));
        }
        if let Some(i) = self.data.data().iter().position(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Data(format!("packed value {} at flat index {i} outside [-1, 1]", self.data.data()[i])));
        }
        Ok(())
    }

    /// One modality's channels for every sample, `[N, c, H, W]`.
    pub fn modality(&self, name: &str) -> Result<Tensor> {
        let slot = self.layout.modality(name)?;
        self.data.select_channels(&slot.indices())
    }

    /// Samples at the given indices.
    pub fn subset(&self, idx: &[usize]) -> Result<Tensor> {
        let rows: Vec<Tensor> = idx.iter().map(|&i| self.data.index(i)).collect();
        Tensor::stack(&rows)
    }

    pub fn write_to(&self, c: &mut Container) -> Result<()> {
        let layout = serde_json::to_string(&self.layout).map_err(|e| Error::Data(e.to_string()))?;
        c.push_str("data.layout", &layout)?;
        c.push_tensor("data.samples", &self.data, Precision::F64)?;
        c.push_bytes("data.labels", vec![self.len()], self.labels.clone())?;
        c.push_u64s("data.sources", self.sources.iter().map(|&s| s as u64).collect())
    }

    pub fn read_from(c: &Container) -> Result<Self> {
        let layout: PackedLayout = serde_json::from_str(&c.string("data.layout")?)
            .map_err(|e| Error::Data(format!("bad layout header: {e}")))?;
        let ds = PackedDataset {
            layout,
            data: c.tensor("data.samples")?,
            labels: c.bytes("data.labels")?.1.to_vec(),
            sources: c.u64s("data.sources")?.iter().map(|&s| s as usize).collect(),
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_map_values() {
        assert_eq!(to_unit(0), -1.0);
        assert_eq!(to_unit(255), 1.0);
        assert!((to_unit(128) - 1.0 / 255.0).abs() < 1e-15);
        for v in 0..=255u8 {
            assert_eq!(from_unit(to_unit(v)), v);
        }
    }

    #[test]
    fn color_gray_layout_shape() {
        let l = PackedLayout::color_gray(64);
        let color = vec![10u8; 3 * 64 * 64];
        let gray = vec![200u8; 64 * 64];
        let s = pack(&[&color, &gray], &[3, 3], &[0, 1], &l).unwrap();
        assert_eq!(s.data.shape(), &[4, 64, 64]);
        assert_eq!(unpack(s.data.data(), &l, "color").unwrap(), color);
        assert_eq!(unpack(s.data.data(), &l, "gray").unwrap(), gray);
        assert!(pack(&[&color, &gray[1..]], &[3, 3], &[0, 1], &l).is_err());
        assert!(pack(&[&color, &gray], &[3, 4], &[0, 1], &l).is_err());
    }
}

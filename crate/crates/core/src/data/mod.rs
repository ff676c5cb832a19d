//! Image loaders, resampling, class-matched pairing, channel packing and a
//! synthetic paired corpus.

mod formats;
mod pack;
mod pairing;
mod resample;
mod synth;

pub use formats::{
    concat, encode_cifar, encode_idx, load_cifar_binary, load_idx, load_idx_images, load_idx_labels, LabeledImages,
    CIFAR_RECORD,
};
pub use pack::{from_unit, pack, to_unit, unpack, ModalitySlot, PackedDataset, PackedLayout, PackedSample};
pub use pairing::{build_pairing, PairingPlan};
pub use resample::{resample, resample_u8, Resample};
pub use synth::{synth_layout, synth_paired, BAR, DISC, MAX_SYNTH_CLASSES, MIN_SYNTH_RESOLUTION};

use crate::error::Result;

/// Pair two labeled sets class by class and pack each pair at `size x size`.
pub fn pack_pairs(
    a: &LabeledImages,
    b: &LabeledImages,
    names: (&str, &str),
    plan: &PairingPlan,
    size: usize,
    method: Resample,
) -> Result<PackedDataset> {
    let layout = PackedLayout::new(
        &[(names.0, a.channels, a.height, a.width), (names.1, b.channels, b.height, b.width)],
        size,
        size,
    )?;
    let mut samples = Vec::with_capacity(plan.len());
    for (_, ia, ib) in plan.pairs() {
        let ra = resample_u8(a.image(ia), a.channels, a.height, a.width, size, size, method)?;
        let rb = resample_u8(b.image(ib), b.channels, b.height, b.width, size, size, method)?;
        samples.push(pack(&[&ra, &rb], &[a.labels[ia], b.labels[ib]], &[ia, ib], &layout)?);
    }
    PackedDataset::from_samples(layout, &samples)
}

//! Packing, pairing and loader properties over whole datasets.

use std::collections::BTreeSet;

use chandiff::data::{
    build_pairing, encode_cifar, encode_idx, from_unit, load_cifar_binary, load_idx, pack, pack_pairs, synth_paired,
    to_unit, unpack, LabeledImages, PackedLayout, Resample, CIFAR_RECORD,
};
use chandiff::numerics::Rng;
use proptest::prelude::*;

#[test]
fn unit_map_round_trips_every_byte() {
    for v in 0..=255u8 {
        assert_eq!(from_unit(to_unit(v)), v);
    }
    assert_eq!(to_unit(0), -1.0);
    assert_eq!(to_unit(255), 1.0);
    assert!((to_unit(128) - 1.0 / 255.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn pack_unpack_recovers_inputs(color in prop::collection::vec(any::<u8>(), 3 * 8 * 8),
                                   gray in prop::collection::vec(any::<u8>(), 8 * 8),
                                   label in 0u8..10) {
        let layout = PackedLayout::color_gray(8);
        let s = pack(&[&color, &gray], &[label, label], &[1, 2], &layout).unwrap();
        prop_assert_eq!(s.data.shape(), &[4, 8, 8]);
        prop_assert!(s.data.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert_eq!(unpack(s.data.data(), &layout, "color").unwrap(), color);
        prop_assert_eq!(unpack(s.data.data(), &layout, "gray").unwrap(), gray);
    }

    #[test]
    fn pairing_is_class_matched_and_reproducible(la in prop::collection::vec(0u8..4, 4..60),
                                                 quota in 1usize..40, seed in any::<u64>()) {
        let mut la = la;
        la.extend(0..4);
        let lb: Vec<u8> = (0..50).map(|i| (i % 4) as u8).collect();
        let plan = build_pairing(&la, &lb, quota, seed).unwrap();
        prop_assert_eq!(plan.len(), 4 * quota);
        prop_assert_eq!(plan.label_mismatches(&la, &lb), 0);
        prop_assert_eq!(&plan, &build_pairing(&la, &lb, quota, seed).unwrap());
        for (c, pairs) in &plan.table {
            let pool = la.iter().filter(|&&l| l == *c).count();
            let distinct: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
            prop_assert_eq!(distinct.len(), pool.min(quota));
        }
    }
}

#[test]
fn paper_scale_pairing_quota() {
    let la: Vec<u8> = (0..50_000).map(|i| (i % 10) as u8).collect();
    let lb: Vec<u8> = (0..60_000).map(|i| (i % 10) as u8).collect();
    let plan = build_pairing(&la, &lb, 5000, 11).unwrap();
    assert_eq!(plan.len(), 50_000);
    assert!(plan.table.values().all(|v| v.len() == 5000));
    assert_eq!(plan.label_mismatches(&la, &lb), 0);
    // Each A-side class holds exactly 5000 samples, so every one is used once.
    for (c, pairs) in &plan.table {
        let a: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
        assert_eq!(a.len(), 5000, "class {c}");
    }
}

#[test]
fn single_pair_and_absent_class() {
    let plan = build_pairing(&[3], &[3], 1, 0).unwrap();
    assert_eq!(plan.pairs().collect::<Vec<_>>(), vec![(3, 0, 0)]);
    let err = build_pairing(&[0, 1], &[0], 2, 0).unwrap_err();
    assert!(err.to_string().contains("class 1"), "{err}");
}

#[test]
fn files_to_packed_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(5, 0);
    let gray = LabeledImages::new(
        1,
        6,
        6,
        (0..20 * 36).map(|_| rng.below(256) as u8).collect(),
        (0..20).map(|i| (i % 2) as u8).collect(),
    )
    .unwrap();
    let color = LabeledImages::new(
        3,
        32,
        32,
        (0..8 * 3072).map(|_| rng.below(256) as u8).collect(),
        (0..8).map(|i| (i % 2) as u8).collect(),
    )
    .unwrap();
    let (img, lab) = encode_idx(&gray);
    std::fs::write(dir.path().join("img"), img).unwrap();
    std::fs::write(dir.path().join("lab"), lab).unwrap();
    std::fs::write(dir.path().join("cifar"), encode_cifar(&color)).unwrap();
    assert_eq!(encode_cifar(&color).len(), 8 * CIFAR_RECORD);

    let gray = load_idx(&dir.path().join("img"), &dir.path().join("lab")).unwrap();
    let color = load_cifar_binary(&dir.path().join("cifar")).unwrap();
    let plan = build_pairing(&color.labels, &gray.labels, 6, 2).unwrap();
    let ds = pack_pairs(&color, &gray, ("color", "gray"), &plan, 8, Resample::Bilinear).unwrap();
    assert_eq!(ds.data.shape(), &[12, 4, 8, 8]);
    ds.validate().unwrap();
    for (i, (c, a, b)) in plan.pairs().enumerate() {
        assert_eq!(ds.labels[i], c);
        assert_eq!(&ds.sources[2 * i..2 * i + 2], &[a, b]);
    }
}

#[test]
fn synthetic_dataset_satisfies_invariants() {
    let ds = synth_paired(4, 64, 16, &mut Rng::new(1, 0)).unwrap();
    ds.validate().unwrap();
    assert_eq!(ds.classes(), 4);
    assert!(ds.sources.chunks(2).all(|s| s[0] == s[1]));
}

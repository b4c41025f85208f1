use std::collections::BTreeSet;

use proptest::prelude::*;
use swd_core::data::{
    batches, decode_cifar10, epoch_permutation, load_cifar10_bin, load_mnist_dir, load_mnist_idx,
    synthetic_blobs, Dataset, Normalization, Split, MNIST_MEAN, MNIST_STD,
};
use swd_core::Error;

fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [0x0803u32, n, rows, cols] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0x0801u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

const PIXELS: [u8; 12] = [0, 17, 255, 128, 3, 200, 255, 254, 1, 0, 99, 64];

fn write_fixture(dir: &std::path::Path, images: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
    let ip = dir.join("train-images-idx3-ubyte");
    let lp = dir.join("train-labels-idx1-ubyte");
    std::fs::write(&ip, images).unwrap();
    std::fs::write(&lp, labels).unwrap();
    (ip, lp)
}

#[test]
fn idx_fixture_round_trips_after_denormalization() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_fixture(dir.path(), &idx_images(2, 2, 3, &PIXELS), &idx_labels(&[5, 0]));
    let d = load_mnist_idx::<f32>(&ip, &lp, Split::Train).unwrap();
    assert_eq!(d.images.shape(), &[2, 1, 2, 3]);
    assert_eq!(d.labels, vec![5, 0]);
    assert_eq!(d.num_classes, 10);
    let back: Vec<u8> = d
        .images
        .data()
        .iter()
        .map(|&v| (d.normalization.invert(0, v as f64) * 255.0).round() as u8)
        .collect();
    assert_eq!(back, PIXELS);
    // pixel 0 of image 0 is black: (0 - mean) / std
    let expect = ((0.0 - MNIST_MEAN) / MNIST_STD) as f32;
    assert_eq!(d.images.data()[0], expect);
    let same = load_mnist_dir::<f32>(dir.path(), Split::Train).unwrap();
    assert_eq!(same.images.data(), d.images.data());
}

#[test]
fn label_file_with_image_magic_is_rejected() {
    let mut labels = idx_labels(&[1, 2]);
    labels[..4].copy_from_slice(&0x0803u32.to_be_bytes());
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_fixture(dir.path(), &idx_images(2, 2, 3, &PIXELS), &labels);
    match load_mnist_idx::<f32>(&ip, &lp, Split::Train) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn truncated_payload_names_the_offset() {
    let images = idx_images(2, 2, 3, &PIXELS[..10]);
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_fixture(dir.path(), &images, &idx_labels(&[1, 2]));
    match load_mnist_idx::<f32>(&ip, &lp, Split::Train) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 26),
        other => panic!("expected a format error, got {other:?}"),
    }
    let header_only = &images[..6];
    std::fs::write(&ip, header_only).unwrap();
    assert!(matches!(load_mnist_idx::<f32>(&ip, &lp, Split::Train), Err(Error::Format { .. })));
}

#[test]
fn count_mismatch_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_fixture(dir.path(), &idx_images(2, 2, 3, &PIXELS), &idx_labels(&[1, 2, 3]));
    assert!(matches!(load_mnist_idx::<f32>(&ip, &lp, Split::Train), Err(Error::Format { .. })));
    let mut lying = idx_labels(&[1, 2]);
    lying[7] = 3;
    std::fs::write(&lp, &lying).unwrap();
    assert!(matches!(load_mnist_idx::<f32>(&ip, &lp, Split::Train), Err(Error::Format { .. })));
}

#[test]
fn missing_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_mnist_dir::<f32>(dir.path(), Split::Test), Err(Error::Data(_))));
}

fn cifar_record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend((0..3072).map(fill));
    r
}

#[test]
fn cifar_records_are_strided_by_3073() {
    let mut bytes = Vec::new();
    for k in 0..3u8 {
        bytes.extend(cifar_record(k + 4, |i| ((i + k as usize) % 251) as u8));
    }
    let d = decode_cifar10::<f64>(&[bytes.clone()], Split::Test).unwrap();
    assert_eq!(d.images.shape(), &[3, 3, 32, 32]);
    assert_eq!(d.labels, vec![4, 5, 6]);
    for k in 0..3 {
        assert_eq!(bytes[3073 * k] as usize, d.labels[k]);
        for i in [0usize, 1023, 1024, 2047, 2048, 3071] {
            let v = d.images.data()[k * 3072 + i];
            let px = (d.normalization.invert(i / 1024, v) * 255.0).round() as u8;
            assert_eq!(px, bytes[3073 * k + 1 + i]);
        }
    }
}

#[test]
fn cifar_length_must_divide_3073() {
    let mut bytes = cifar_record(1, |_| 0);
    bytes.push(9);
    match decode_cifar10::<f32>(&[bytes], Split::Train) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
        other => panic!("expected a format error, got {other:?}"),
    }
    assert_eq!(30_730_000 % 3073, 0);
    assert_eq!(30_730_000 / 3073, 10_000);
}

#[test]
fn empty_cifar_file_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("data_batch_1.bin");
    std::fs::write(&p, []).unwrap();
    let d = load_cifar10_bin::<f32, _>(&[p], Split::Train).unwrap();
    assert!(d.is_empty());
    assert_eq!(d.images.shape(), &[0, 3, 32, 32]);
}

#[test]
fn blobs_are_seed_determined() {
    let a = synthetic_blobs::<f32>(7, 40, 3, [1, 4, 4], 2.0).unwrap();
    let b = synthetic_blobs::<f32>(7, 40, 3, [1, 4, 4], 2.0).unwrap();
    assert_eq!(a.images.data(), b.images.data());
    assert_eq!(a.labels, b.labels);
    let c = synthetic_blobs::<f32>(8, 40, 3, [1, 4, 4], 2.0).unwrap();
    assert_ne!(a.images.data(), c.images.data());
    assert!(synthetic_blobs::<f32>(7, 0, 3, [1, 4, 4], 2.0).unwrap().is_empty());
}

/// Nearest-centroid probe fitted on one half, scored on the other.
#[test]
fn blobs_at_margin_five_are_linearly_separable() {
    let (k, d) = (4, 64);
    let all = synthetic_blobs::<f64>(3, 2000, k, [1, 8, 8], 5.0).unwrap();
    let fit = all.subset(0..1000, Split::Train);
    let held = all.subset(1000..2000, Split::Test);
    let mut centroids = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (x, &y) in fit.images.data().chunks_exact(d).zip(&fit.labels) {
        counts[y] += 1;
        centroids[y].iter_mut().zip(x).for_each(|(c, v)| *c += v);
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let correct = held
        .images
        .data()
        .chunks_exact(d)
        .zip(&held.labels)
        .filter(|(x, &y)| {
            let dist = |c: &Vec<f64>| c.iter().zip(*x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            (0..k).min_by(|&i, &j| dist(&centroids[i]).total_cmp(&dist(&centroids[j]))) == Some(y)
        })
        .count();
    assert!(correct as f64 / held.len() as f64 >= 0.99, "{correct}/1000");
}

#[test]
fn oversized_batch_is_the_whole_set() {
    let d = synthetic_blobs::<f32>(1, 10, 2, [1, 2, 2], 1.0).unwrap();
    let all: Vec<_> = batches(&d, 64, 0, 0).unwrap().collect();
    assert_eq!(all.len(), 1);
    assert_eq!(all[0].labels.len(), 10);
    assert!(batches(&d, 0, 0, 0).is_err());
}

#[test]
fn normalization_inverts() {
    let n = Normalization {
        mean: vec![0.4914, 0.4822, 0.4465],
        std: vec![0.2470, 0.2435, 0.2616],
    };
    for c in 0..3 {
        for i in 0..=255 {
            let x = i as f64 / 255.0;
            assert!((n.invert(c, n.apply(c, x)) - x).abs() < 1e-6);
        }
    }
}

#[test]
fn dataset_rejects_bad_labels() {
    let images = swd_core::Tensor::<f32>::zeros(&[2, 1, 2, 2]);
    let r = Dataset::new(images.clone(), vec![0, 3], 3, Split::Train, Normalization::identity(1));
    assert!(matches!(r, Err(Error::Data(_))));
    let r = Dataset::new(images, vec![0], 3, Split::Train, Normalization::identity(1));
    assert!(matches!(r, Err(Error::Data(_))));
}

proptest! {
    #[test]
    fn batches_partition_the_dataset(n in 0usize..200, bs in 1usize..70, seed in any::<u64>(), epoch in 0usize..5) {
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let images = swd_core::Tensor::<f32>::new(vec![n, 1, 1, 1], (0..n).map(|i| i as f32).collect()).unwrap();
        let d = Dataset::new(images, labels, 2, Split::Train, Normalization::identity(1)).unwrap();
        let it = batches(&d, bs, seed, epoch).unwrap();
        prop_assert_eq!(it.num_batches(), n.div_ceil(bs));
        let mut seen = Vec::new();
        let mut sizes = Vec::new();
        for b in it {
            sizes.push(b.labels.len());
            seen.extend(b.images.data().iter().map(|&v| v as usize));
        }
        prop_assert_eq!(seen.len(), n);
        prop_assert_eq!(seen.iter().copied().collect::<BTreeSet<_>>().len(), n);
        if let Some((last, full)) = sizes.split_last() {
            prop_assert!(full.iter().all(|&s| s == bs));
            prop_assert!(*last >= 1 && *last <= bs);
        }
        let order: Vec<usize> = batches(&d, bs, seed, epoch).unwrap().flat_map(|b| b.images.data().iter().map(|&v| v as usize).collect::<Vec<_>>()).collect();
        prop_assert_eq!(order, seen);
        prop_assert_eq!(epoch_permutation(n, seed, epoch), epoch_permutation(n, seed, epoch));
    }
}

#[test]
fn epochs_reshuffle() {
    assert_ne!(epoch_permutation(100, 1, 0), epoch_permutation(100, 1, 1));
    assert_ne!(epoch_permutation(100, 1, 0), epoch_permutation(100, 2, 0));
}

use std::io::Cursor;

use permubench::data::{self, npy, DataError, DatasetName};

fn archive(members: &[(&str, Vec<u8>)]) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    npy::write_npz(&mut out, members).unwrap();
    out.into_inner()
}

fn u8_member(shape: &[usize], data: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    npy::write_npy_u8(&mut b, shape, data).unwrap();
    b
}

fn i64_member(shape: &[usize], data: &[i64]) -> Vec<u8> {
    let mut b = Vec::new();
    npy::write_npy_i64(&mut b, shape, data).unwrap();
    b
}

/// Grayscale archive with 4/2/2 images; pixel value = image index · 85 (0, 85, 170, 255).
fn grayscale_archive() -> Vec<u8> {
    let img = |n: usize| -> Vec<u8> { (0..n).flat_map(|i| vec![(i * 85) as u8; 28 * 28]).collect() };
    archive(&[
        ("train_images", u8_member(&[4, 28, 28], &img(4))),
        ("train_labels", i64_member(&[4, 1], &[0, 1, 0, 1])),
        ("val_images", u8_member(&[2, 28, 28], &img(2))),
        ("val_labels", i64_member(&[2, 1], &[1, 0])),
        ("test_images", u8_member(&[2, 28, 28], &img(2))),
        ("test_labels", i64_member(&[2, 1], &[0, 1])),
    ])
}

#[test]
fn loads_splits_scales_and_replicates_channels() {
    let ds = data::read_npz(Cursor::new(grayscale_archive()), DatasetName::PneumoniaMnist).unwrap();
    assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (4, 2, 2));
    assert_eq!(ds.train.images().shape(), &[4, 28, 28, 3]);
    assert_eq!(ds.train.labels(), &[0, 1, 0, 1]);
    assert!(ds.train.image(0).iter().all(|&v| v == 0.0));
    assert!(ds.train.image(3).iter().all(|&v| v == 1.0));
    assert!(ds.train.image(1).iter().all(|&v| v == 85.0 / 255.0));
}

#[test]
fn rgb_archives_keep_channel_order() {
    let rgb: Vec<u8> = (0..28 * 28).flat_map(|_| [10u8, 20, 30]).collect();
    let bytes = archive(&[
        ("train_images", u8_member(&[1, 28, 28, 3], &rgb)),
        ("train_labels", i64_member(&[1], &[3])),
        ("val_images", u8_member(&[1, 28, 28, 3], &rgb)),
        ("val_labels", i64_member(&[1], &[0])),
        ("test_images", u8_member(&[1, 28, 28, 3], &rgb)),
        ("test_labels", i64_member(&[1], &[1])),
    ]);
    let ds = data::read_npz(Cursor::new(bytes), DatasetName::BloodMnist).unwrap();
    assert_eq!(&ds.train.image(0)[..3], &[10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0]);
}

#[test]
fn errors_name_the_offending_array() {
    let bytes = archive(&[
        ("train_images", u8_member(&[1, 30, 30], &[0; 900])),
        ("train_labels", i64_member(&[1], &[0])),
    ]);
    match data::read_npz(Cursor::new(bytes), DatasetName::BreastMnist) {
        Err(DataError::Format { array, .. }) => assert_eq!(array, "train_images"),
        other => panic!("{other:?}"),
    }
    let bytes = archive(&[("train_images", u8_member(&[1, 28, 28], &[0; 784]))]);
    assert!(matches!(
        data::read_npz(Cursor::new(bytes), DatasetName::BreastMnist),
        Err(DataError::MissingArray(a)) if a == "train_labels"
    ));
    let bytes = archive(&[
        ("train_images", u8_member(&[1, 28, 28], &[0; 784])),
        ("train_labels", i64_member(&[1], &[5])),
    ]);
    assert!(matches!(
        data::read_npz(Cursor::new(bytes), DatasetName::BreastMnist),
        Err(DataError::Format { array, .. }) if array == "train_labels"
    ));
}

#[test]
fn file_stem_names_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("breastmnist.npz");
    std::fs::write(&path, grayscale_archive()).unwrap();
    let ds = data::load_npz(&path).unwrap();
    assert_eq!(ds.name, DatasetName::BreastMnist);
    let other = dir.path().join("mystery.npz");
    std::fs::write(&other, grayscale_archive()).unwrap();
    assert!(matches!(data::load_npz(&other), Err(DataError::UnknownDataset(_))));
}

#[test]
fn synthetic_archives_are_balanced_and_reproducible() {
    let a = data::synthetic_archive(DatasetName::OctMnist, [40, 8, 12], 1).unwrap();
    assert_eq!(a, data::synthetic_archive(DatasetName::OctMnist, [40, 8, 12], 1).unwrap());
    let ds = data::read_npz(Cursor::new(a), DatasetName::OctMnist).unwrap();
    for c in 0..4 {
        assert_eq!(ds.train.labels().iter().filter(|&&l| l == c).count(), 10);
    }
    assert!(ds.test.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

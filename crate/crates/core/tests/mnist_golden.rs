//! Ingestion of the vendored MNIST files against values recorded at ingest time.

use std::path::{Path, PathBuf};

use wdlab::harness::data;
use wdlab::{linalg, Error};

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

#[test]
fn first_training_image_matches_recorded_checksum() {
    let [(img, lab), _] = data::mnist_paths(&mnist_dir());
    let bytes = data::read_maybe_gz(&img).unwrap();
    let (n, rows, cols, pixels) = data::parse_idx_images(&bytes, &img).unwrap();
    assert_eq!((n, rows, cols), (8000, 28, 28));
    let first = &pixels[..784];
    assert_eq!(first.iter().map(|&p| u64::from(p)).sum::<u64>(), 36205);
    assert_eq!(fnv1a64(first), 0xc085_1879_7603_1ade);
    let labels = data::parse_idx_labels(&data::read_maybe_gz(&lab).unwrap(), &lab).unwrap();
    assert_eq!(&labels[..12], &[2, 9, 4, 7, 5, 4, 4, 4, 3, 4, 8, 9]);

    let d = data::load_mnist(&img, &lab).unwrap();
    assert_eq!(d.dim(), 784);
    assert!((d.x.row(0).iter().sum::<f64>() - 36205.0 / 255.0).abs() < 1e-9);
    assert!(d.x.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn plain_and_gzip_files_load_identically() {
    let [(img, lab), _] = data::mnist_paths(&mnist_dir());
    let dir = tempfile::tempdir().unwrap();
    let (pi, pl) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
    std::fs::write(&pi, data::read_maybe_gz(&img).unwrap()).unwrap();
    std::fs::write(&pl, data::read_maybe_gz(&lab).unwrap()).unwrap();
    let a = data::load_mnist(&img, &lab).unwrap();
    let b = data::load_mnist(&pi, &pl).unwrap();
    assert_eq!(a.x, b.x);
    assert_eq!(a.y, b.y);
}

#[test]
fn malformed_idx_reports_byte_offsets() {
    let p = Path::new("bad.idx");
    let mut header = vec![0, 0, 8, 3];
    header.extend_from_slice(&2u32.to_be_bytes());
    header.extend_from_slice(&28u32.to_be_bytes());
    header.extend_from_slice(&28u32.to_be_bytes());
    header.extend_from_slice(&[0u8; 784]);
    assert!(data::parse_idx_images(&header, p).is_err_and(|e| matches!(e, Error::Format { offset, .. } if offset > 16)));
    let mut wrong_magic = header.clone();
    wrong_magic[3] = 1;
    assert!(data::parse_idx_images(&wrong_magic, p).is_err_and(|e| matches!(e, Error::Format { offset: 0, .. })));
    assert!(data::parse_idx_labels(&header, p).is_err());
}

#[test]
fn splits_are_disjoint_and_sized() {
    let s = data::mnist_splits(&mnist_dir(), 500, 100, 200, 3).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (500, 100, 200));
    let key = |d: &data::Dataset, i: usize| d.x.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let train: std::collections::HashSet<_> = (0..500).map(|i| key(&s.train, i)).collect();
    assert!((0..100).all(|i| !train.contains(&key(&s.val, i))));
}

// Gram matrices of small image batches are rank deficient with exact zero
// rows for the border pixels; several of these once came back with NaN
// eigenvectors.
#[test]
fn eigendecomposition_of_batch_gram_matrices_is_finite() {
    let [(img, lab), _] = data::mnist_paths(&mnist_dir());
    let d = data::load_mnist(&img, &lab).unwrap();
    for (n, off) in [(8, 0), (8, 32), (8, 64), (16, 32), (16, 128)] {
        let x = d.subset(&(off..off + n).collect::<Vec<_>>()).x;
        let mut g = x.t_matmul(&x).unwrap();
        g.scale_in_place(1.0 / n as f64);
        let e = linalg::sym_eig(&g).unwrap();
        assert!(e.eigenvalues.iter().all(|v| v.is_finite()), "batch {n}@{off}");
        assert!(e.eigenvectors.is_finite(), "batch {n}@{off}");
        let back = e.reconstruct();
        let err = back.as_slice().iter().zip(g.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "batch {n}@{off}: reconstruction error {err:e}");
        let inv = linalg::damped_inverse(&g, 0.1).unwrap();
        assert!(inv.is_finite(), "batch {n}@{off}");
    }
}

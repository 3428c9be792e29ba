//! Datasets: MNIST IDX files (plain or gzip), a synthetic teacher task, and whitening.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::nn::{self, Mode, NetworkParams, NetworkSpec};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Ok(Dataset {
            x: self.x.vstack(&other.x)?,
            y,
            classes: self.classes.max(other.classes),
        })
    }
}

/// Disjoint train / validation / test sets.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Train and validation merged, for retraining a selected configuration.
    pub fn merged_train(&self) -> Result<Splits> {
        Ok(Splits {
            train: self.train.concat(&self.val)?,
            val: Dataset {
                x: Matrix::zeros(0, self.train.dim()),
                y: Vec::new(),
                classes: self.train.classes,
            },
            test: self.test.clone(),
        })
    }
}

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

/// Reads a file, transparently inflating gzip (detected by its magic bytes).
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| format_err(path, 0, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, at as u64, "file ends inside the header"))
}

/// Parsed IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(format_err(path, 0, format!("image magic is {magic}, expected {IMAGE_MAGIC}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(format_err(
            path,
            (16 + payload.len()) as u64,
            format!("payload truncated: {} of {need} pixel bytes", payload.len()),
        ));
    }
    Ok((n, rows, cols, payload[..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(format_err(path, 0, format!("label magic is {magic}, expected {LABEL_MAGIC}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(format_err(
            path,
            (8 + payload.len()) as u64,
            format!("payload truncated: {} of {n} labels", payload.len()),
        ));
    }
    Ok(payload[..n].to_vec())
}

/// Loads an MNIST image/label pair with pixels scaled to `[0, 1]`.
pub fn load_mnist(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(image_path)?, image_path)?;
    let labels = parse_idx_labels(&read_maybe_gz(label_path)?, label_path)?;
    if labels.len() != n {
        return Err(format_err(
            label_path,
            4,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(format_err(label_path, 8 + pos as u64, format!("label {} is not a digit", labels[pos])));
    }
    let d = rows * cols;
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok(Dataset {
        x: Matrix::from_vec(n, d, data)?,
        y: labels.into_iter().map(usize::from).collect(),
        classes: 10,
    })
}

/// Standard file names inside an MNIST directory.
pub fn mnist_paths(dir: &Path) -> [(PathBuf, PathBuf); 2] {
    let pick = |stem: &str| {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(stem)
        }
    };
    [
        (pick("train-images-idx3-ubyte"), pick("train-labels-idx1-ubyte")),
        (pick("t10k-images-idx3-ubyte"), pick("t10k-labels-idx1-ubyte")),
    ]
}

/// Train and validation come from the first file under a seeded shuffle,
/// test from a seeded subset of the second.
pub fn mnist_splits(dir: &Path, train: usize, val: usize, test: usize, seed: u64) -> Result<Splits> {
    let [(ti, tl), (ei, el)] = mnist_paths(dir);
    let full_train = load_mnist(&ti, &tl)?;
    let full_test = load_mnist(&ei, &el)?;
    if train + val > full_train.len() {
        return Err(Error::Config(format!(
            "asked for {} train+val examples, {} has {}",
            train + val,
            ti.display(),
            full_train.len()
        )));
    }
    if test > full_test.len() {
        return Err(Error::Config(format!(
            "asked for {test} test examples, {} has {}",
            ei.display(),
            full_test.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..full_train.len()).collect();
    idx.shuffle(&mut rng);
    let mut tidx: Vec<usize> = (0..full_test.len()).collect();
    tidx.shuffle(&mut rng);
    Ok(Splits {
        train: full_train.subset(&idx[..train]),
        val: full_train.subset(&idx[train..train + val]),
        test: full_test.subset(&tidx[..test]),
    })
}

/// Gaussian inputs labelled by the argmax of a random teacher network.
///
/// The teacher is redrawn until every class holds at least 1% of the examples.
pub fn gen_synthetic(n: usize, d: usize, k: usize, teacher: &NetworkSpec, seed: u64, whitened: bool) -> Result<Dataset> {
    if teacher.input_dim() != d || teacher.output_dim() != k {
        return Err(Error::structural(format!(
            "teacher maps {} -> {}, data needs {d} -> {k}",
            teacher.input_dim(),
            teacher.output_dim()
        )));
    }
    if whitened && n <= d {
        return Err(Error::Infeasible(format!("whitening needs more examples than dimensions ({n} <= {d})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut x = Matrix::from_vec(n, d, data)?;
    if whitened {
        x = whiten(&x)?;
    }
    let min_count = (n as f64 * 0.01).ceil() as usize;
    for _ in 0..100 {
        let params = NetworkParams::init(teacher, &mut rng)?;
        let (logits, _) = nn::forward(teacher, &params, &x, Mode::Train)?;
        let y = nn::argmax_rows(&logits);
        let mut counts = vec![0usize; k];
        y.iter().for_each(|&c| counts[c] += 1);
        if counts.iter().all(|&c| c >= min_count) {
            return Ok(Dataset { x, y, classes: k });
        }
    }
    Err(Error::Infeasible("no teacher produced balanced enough classes in 100 draws".into()))
}

/// Synthetic splits sharing one teacher.
pub fn synthetic_splits(
    sizes: (usize, usize, usize),
    d: usize,
    k: usize,
    teacher: &NetworkSpec,
    seed: u64,
    whitened: bool,
) -> Result<Splits> {
    let (tr, va, te) = sizes;
    let all = gen_synthetic(tr + va + te, d, k, teacher, seed, whitened)?;
    let idx: Vec<usize> = (0..all.len()).collect();
    Ok(Splits {
        train: all.subset(&idx[..tr]),
        val: all.subset(&idx[tr..tr + va]),
        test: all.subset(&idx[tr + va..]),
    })
}

/// Centers the rows and maps their empirical covariance to `I` with the
/// symmetric inverse square root.
pub fn whiten(x: &Matrix) -> Result<Matrix> {
    let (n, d) = x.shape();
    if n <= d {
        return Err(Error::Infeasible(format!(
            "cannot whiten {n} examples in {d} dimensions; reduce the dimension or add data"
        )));
    }
    let mut centered = x.clone();
    for c in 0..d {
        let mean = (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64;
        for r in 0..n {
            centered.add_at(r, c, -mean);
        }
    }
    let mut cov = centered.t_matmul(&centered)?;
    cov.scale_in_place(1.0 / n as f64);
    cov.symmetrize();
    let w = linalg::inverse_sqrt(&cov).map_err(|e| match e {
        Error::Degenerate(m) => Error::Degenerate(format!("{m}; reduce the input dimension before whitening")),
        other => other,
    })?;
    centered.matmul(&w)
}

/// Largest deviation of the sample mean from 0 and covariance from `I`.
pub fn whiteness_residual(x: &Matrix) -> f64 {
    let (n, d) = x.shape();
    let mut worst: f64 = 0.0;
    for c in 0..d {
        let mean = (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64;
        worst = worst.max(mean.abs());
    }
    let mut cov = x.t_matmul(x).expect("square");
    cov.scale_in_place(1.0 / n as f64);
    worst.max(cov.sub(&Matrix::identity(d)).expect("same shape").max_abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use std::io::Write;

    fn idx_images(n: u32, rows: u32, cols: u32, payload: &[u8], magic: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [magic, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn idx_magic_and_truncation() {
        let p = Path::new("mem");
        let ok = idx_images(2, 2, 2, &[0, 255, 1, 2, 3, 4, 5, 6], IMAGE_MAGIC);
        let (n, r, c, px) = parse_idx_images(&ok, p).unwrap();
        assert_eq!((n, r, c, px.len()), (2, 2, 2, 8));

        let bad = idx_images(2, 2, 2, &[0; 8], LABEL_MAGIC);
        assert!(matches!(parse_idx_images(&bad, p), Err(Error::Format { offset: 0, .. })));

        let short = idx_images(2, 2, 2, &[0; 5], IMAGE_MAGIC);
        assert!(matches!(parse_idx_images(&short, p), Err(Error::Format { offset: 21, .. })));

        let mut labels = LABEL_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[1, 2]);
        assert!(matches!(parse_idx_labels(&labels, p), Err(Error::Format { offset: 10, .. })));
    }

    #[test]
    fn load_mnist_count_mismatch_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab.gz");
        std::fs::write(&img, idx_images(2, 1, 2, &[0, 255, 51, 102], IMAGE_MAGIC)).unwrap();
        let mut labels = LABEL_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[7, 3]);
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&labels).unwrap();
        std::fs::write(&lab, enc.finish().unwrap()).unwrap();
        let ds = load_mnist(&img, &lab).unwrap();
        assert_eq!(ds.x.shape(), (2, 2));
        assert_eq!(ds.x.row(0), &[0.0, 1.0]);
        assert!((ds.x.get(1, 0) - 0.2).abs() < 1e-15);
        assert_eq!(ds.y, vec![7, 3]);

        std::fs::write(&img, idx_images(3, 1, 2, &[0; 6], IMAGE_MAGIC)).unwrap();
        assert!(matches!(load_mnist(&img, &lab), Err(Error::Format { .. })));
    }

    #[test]
    fn whiten_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::from_fn(500, 4, |_, c| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * (c + 1) as f64 + c as f64
        });
        let w = whiten(&x).unwrap();
        assert!(whiteness_residual(&w) < 1e-10);
        assert!(matches!(whiten(&Matrix::zeros(3, 3)), Err(Error::Infeasible(_))));
        let rank_deficient = Matrix::from_fn(10, 2, |r, _| r as f64);
        assert!(matches!(whiten(&rank_deficient), Err(Error::Degenerate(_))));
    }

    #[test]
    fn whiten_diagonal_covariance() {
        // ±2 and ±3 along the axes: covariance diag(4, 9) exactly
        let x = Matrix::from_rows(&[&[2.0, 3.0], &[-2.0, -3.0], &[2.0, -3.0], &[-2.0, 3.0]]).unwrap();
        let w = whiten(&x).unwrap();
        for r in 0..4 {
            assert!((w.get(r, 0).abs() - 1.0).abs() < 1e-12);
            assert!((w.get(r, 1).abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let teacher = NetworkSpec::mlp(&[5, 16, 10], Activation::Relu, false);
        let a = gen_synthetic(10_000, 5, 10, &teacher, 9, false).unwrap();
        let b = gen_synthetic(10_000, 5, 10, &teacher, 9, false).unwrap();
        assert_eq!(a, b);
        let mut counts = [0usize; 10];
        a.y.iter().for_each(|&c| counts[c] += 1);
        assert!(counts.iter().all(|&c| c >= 100), "{counts:?}");
        assert!(matches!(
            gen_synthetic(5, 5, 10, &teacher, 9, true),
            Err(Error::Infeasible(_))
        ));
    }
}

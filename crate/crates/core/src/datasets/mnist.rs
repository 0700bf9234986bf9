//! IDX file reader and binary digit-pair regression tasks.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::rng;
use crate::task::TaskVector;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Standard file names of the four MNIST archives, uncompressed.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Digit pairs used to form binary tasks.
pub const DEFAULT_DIGIT_PAIRS: [(u8, u8); 5] = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)];

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic number at byte offset 0: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("file truncated at byte offset {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at byte offset {offset} is not a digit")]
    BadLabel { label: u8, offset: usize },
}

#[derive(Debug, Error)]
pub enum MnistTaskError {
    #[error("digit pair ({0}, {0}) has identical digits")]
    IdenticalDigits(u8),
    #[error("digit {0} is outside 0..=9")]
    BadDigit(u8),
    #[error("no samples of digits ({0}, {1}) in the {2} split")]
    NoSamples(u8, u8, &'static str),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Images scaled to `[0, 1]`, one flattened image per row, with labels.
#[derive(Debug, Clone)]
pub struct IdxDataset {
    pub images: DMatrix<f64>,
    pub labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
}

/// Train and test splits as loaded from disk.
#[derive(Debug, Clone)]
pub struct MnistSplits {
    pub train: IdxDataset,
    pub test: IdxDataset,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(IdxError::Truncated {
            offset: bytes.len(),
            needed: end - bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { expected, found });
    }
    Ok(())
}

fn ensure_len(bytes: &[u8], end: usize) -> Result<(), IdxError> {
    if bytes.len() < end {
        return Err(IdxError::Truncated {
            offset: bytes.len(),
            needed: end - bytes.len(),
        });
    }
    Ok(())
}

/// Parses an IDX image file. Returns `(images, rows, cols)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(DMatrix<f64>, usize, usize), IdxError> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let pixels = rows * cols;
    ensure_len(bytes, 16 + count * pixels)?;
    let data = &bytes[16..16 + count * pixels];
    let images = DMatrix::from_row_iterator(count, pixels, data.iter().map(|&b| f64::from(b) / 255.0));
    Ok((images, rows, cols))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    ensure_len(bytes, 8 + count)?;
    let labels = bytes[8..8 + count].to_vec();
    if let Some((i, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(IdxError::BadLabel { label, offset: 8 + i });
    }
    Ok(labels)
}

fn read_file(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an image file and its label file.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<IdxDataset, IdxError> {
    let (images, rows, cols) = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    if images.nrows() != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.nrows(),
            labels: labels.len(),
        });
    }
    Ok(IdxDataset { images, labels, rows, cols })
}

/// True when all four standard files are present in `dir`.
pub fn mnist_files_present(dir: &Path) -> bool {
    [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS]
        .iter()
        .all(|f| dir.join(f).is_file())
}

pub fn load_mnist_dir(dir: &Path) -> Result<MnistSplits, IdxError> {
    Ok(MnistSplits {
        train: load_mnist_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?,
        test: load_mnist_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?,
    })
}

/// Encodes images (values in `[0, 1]`, rounded to bytes) in IDX format.
pub fn encode_idx_images(images: &DMatrix<f64>, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.nrows() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for i in 0..images.nrows() {
        for j in 0..images.ncols() {
            out.push((images[(i, j)].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IdxError> {
    let mut f = fs::File::create(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    f.write_all(bytes).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Options for [`build_mnist_task`].
#[derive(Debug, Clone, Copy, Default)]
pub struct MnistTaskOptions {
    /// Subtract the training mean from both splits.
    pub center: bool,
}

/// Binary regression task on two digits with `+1` for the first digit and
/// `-1` for the second, plus the least-squares linear teacher.
#[derive(Debug, Clone)]
pub struct MnistTask {
    pub digits: (u8, u8),
    pub x_train: DMatrix<f64>,
    pub y_train: DVector<f64>,
    pub x_test: DMatrix<f64>,
    pub y_test: DVector<f64>,
    pub teacher: TaskVector,
}

fn select_pair(data: &IdxDataset, pair: (u8, u8), order: Option<u64>) -> (DMatrix<f64>, DVector<f64>) {
    let mut idx: Vec<usize> = (0..data.labels.len())
        .filter(|&i| data.labels[i] == pair.0 || data.labels[i] == pair.1)
        .collect();
    if let Some(seed) = order {
        idx.shuffle(&mut rng::stream(seed, 0x3A));
    }
    let x = data.images.select_rows(idx.iter());
    let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| if data.labels[i] == pair.0 { 1.0 } else { -1.0 }));
    (x, y)
}

/// Minimum-norm least-squares solution of `x w = y` via the normal equations
/// and a thresholded pseudo-inverse.
pub fn min_norm_least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
    let gram = x.tr_mul(x);
    let e = linalg::eig_sym(&gram)?;
    let top = e.values().amax();
    let rhs = e.vectors().tr_mul(&x.tr_mul(y));
    let coeffs = DVector::from_iterator(
        rhs.len(),
        rhs.iter()
            .zip(e.values().iter())
            .map(|(r, &l)| if l > 1e-10 * top { r / l } else { 0.0 }),
    );
    Ok(e.vectors() * coeffs)
}

/// Builds the binary task for `digit_pair`. The seed fixes the row order of
/// the training split; the test split keeps its file order.
pub fn build_mnist_task(
    raw: &MnistSplits,
    digit_pair: (u8, u8),
    seed: u64,
    opts: MnistTaskOptions,
) -> Result<MnistTask, MnistTaskError> {
    let (a, b) = digit_pair;
    if a > 9 {
        return Err(MnistTaskError::BadDigit(a));
    }
    if b > 9 {
        return Err(MnistTaskError::BadDigit(b));
    }
    if a == b {
        return Err(MnistTaskError::IdenticalDigits(a));
    }
    let (mut x_train, y_train) = select_pair(&raw.train, digit_pair, Some(seed));
    let (mut x_test, y_test) = select_pair(&raw.test, digit_pair, None);
    if x_train.nrows() == 0 {
        return Err(MnistTaskError::NoSamples(a, b, "train"));
    }
    if x_test.nrows() == 0 {
        return Err(MnistTaskError::NoSamples(a, b, "test"));
    }
    if opts.center {
        let mean = x_train.row_mean();
        for mut row in x_train.row_iter_mut() {
            row -= &mean;
        }
        for mut row in x_test.row_iter_mut() {
            row -= &mean;
        }
    }
    let w = min_norm_least_squares(&x_train, &y_train)?;
    let teacher = TaskVector::new(w).map_err(|_| LinalgError::NonFinite { what: "teacher" })?;
    Ok(MnistTask {
        digits: digit_pair,
        x_train,
        y_train,
        x_test,
        y_test,
        teacher,
    })
}

/// Fraction of rows where `sign(x w)` disagrees with the `+-1` labels.
pub fn zero_one_error(x: &DMatrix<f64>, w: &DVector<f64>, labels: &DVector<f64>) -> f64 {
    let pred = x * w;
    let wrong = pred
        .iter()
        .zip(labels.iter())
        .filter(|(p, l)| (if **p >= 0.0 { 1.0 } else { -1.0 }) != **l)
        .count();
    wrong as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> IdxDataset {
        let images = DMatrix::from_row_slice(4, 4, &[
            0.0, 1.0, 0.0, 1.0, //
            1.0, 0.0, 1.0, 0.0, //
            0.0, 1.0, 1.0, 1.0, //
            1.0, 1.0, 0.0, 0.0, //
        ]);
        IdxDataset { images, labels: vec![0, 1, 0, 7], rows: 2, cols: 2 }
    }

    #[test]
    fn header_fields_are_big_endian() {
        let d = tiny_dataset();
        let bytes = encode_idx_images(&d.images, 2, 2);
        assert_eq!(&bytes[0..4], &[0, 0, 8, 3]);
        assert_eq!(&bytes[4..8], &[0, 0, 0, 4]);
        let (img, r, c) = parse_idx_images(&bytes).unwrap();
        assert_eq!((r, c), (2, 2));
        assert_eq!(img, d.images);
        assert_eq!(parse_idx_labels(&encode_idx_labels(&d.labels)).unwrap(), d.labels);
    }

    #[test]
    fn wrong_magic_and_truncation_name_offsets() {
        let mut bytes = encode_idx_labels(&[1, 2, 3]);
        bytes[3] = 0x03;
        let err = parse_idx_labels(&bytes).unwrap_err();
        assert!(matches!(err, IdxError::BadMagic { found: 0x803, .. }));
        assert!(err.to_string().contains("byte offset 0"));

        let bytes = encode_idx_images(&tiny_dataset().images, 2, 2);
        let err = parse_idx_images(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, IdxError::Truncated { offset: 29, needed: 3 }));
        assert!(err.to_string().contains("byte offset 29"));
    }

    #[test]
    fn identical_digits_rejected() {
        let raw = MnistSplits { train: tiny_dataset(), test: tiny_dataset() };
        assert!(matches!(
            build_mnist_task(&raw, (3, 3), 0, MnistTaskOptions::default()),
            Err(MnistTaskError::IdenticalDigits(3))
        ));
    }

    #[test]
    fn task_labels_and_teacher() {
        let raw = MnistSplits { train: tiny_dataset(), test: tiny_dataset() };
        let task = build_mnist_task(&raw, (0, 1), 5, MnistTaskOptions::default()).unwrap();
        assert_eq!(task.x_train.nrows(), 3);
        assert_eq!(task.y_test.as_slice(), &[1.0, -1.0, 1.0]);
        // Three independent rows in four dimensions: the fit interpolates.
        let fit = &task.x_train * task.teacher.as_vector();
        assert!((fit - &task.y_train).amax() < 1e-9);
        let again = build_mnist_task(&raw, (0, 1), 5, MnistTaskOptions::default()).unwrap();
        assert_eq!(again.teacher, task.teacher);
    }

    #[test]
    fn min_norm_solution_is_orthogonal_to_null_space() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let y = DVector::from_vec(vec![2.0, -1.0]);
        let w = min_norm_least_squares(&x, &y).unwrap();
        assert!((w - DVector::from_vec(vec![2.0, -1.0, 0.0])).amax() < 1e-12);
    }
}

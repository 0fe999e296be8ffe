//! Reader for the CIFAR-10 binary distribution.
//!
//! Each record is one label byte followed by 3072 pixel bytes: the red plane,
//! then green, then blue, each 32×32 row-major.

use std::path::{Path, PathBuf};

use super::Dataset;
use crate::error::{Result, UgnnError};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILES: [&str; 1] = ["test_batch.bin"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarSplit {
    Train,
    Test,
}

impl CifarSplit {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "train" => Some(CifarSplit::Train),
            "test" => Some(CifarSplit::Test),
            _ => None,
        }
    }

    fn files(self) -> &'static [&'static str] {
        match self {
            CifarSplit::Train => &TRAIN_FILES,
            CifarSplit::Test => &TEST_FILES,
        }
    }
}

/// Decode a buffer of whole records into `[N, 3, 32, 32]` images in `[0, 1]`.
pub fn parse_cifar10<T: Scalar>(bytes: &[u8]) -> Result<Dataset<T>> {
    if bytes.is_empty() {
        return Err(UgnnError::Dataset(
            "CIFAR-10 buffer holds no records".into(),
        ));
    }
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(UgnnError::Dataset(format!(
            "truncated CIFAR-10 data: {} bytes is not a multiple of the {CIFAR_RECORD_BYTES}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    // p / 255 rounded once to T, so every pixel value is platform independent
    let lut: Vec<T> = (0..=255u8).map(|p| c::<T>(f64::from(p) / 255.0)).collect();
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(UgnnError::Dataset(format!(
                "record {i}: label byte {label} is not in 0..=9"
            )));
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&p| lut[usize::from(p)]));
    }
    Dataset::new(
        Tensor::new(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?,
        labels,
        CIFAR_CLASSES,
    )
}

fn split_files(dir: &Path, split: CifarSplit) -> Result<Vec<PathBuf>> {
    for base in [dir.to_path_buf(), dir.join("cifar-10-batches-bin")] {
        let files: Vec<PathBuf> = split.files().iter().map(|f| base.join(f)).collect();
        if files.iter().all(|f| f.is_file()) {
            return Ok(files);
        }
    }
    Err(UgnnError::Dataset(format!(
        "{} does not contain the CIFAR-10 binary files {:?}",
        dir.display(),
        split.files()
    )))
}

/// Load one batch file, or every file of `split` from a directory holding the
/// binary distribution (directly or in `cifar-10-batches-bin/`).
pub fn load_cifar10<T: Scalar>(path: impl AsRef<Path>, split: CifarSplit) -> Result<Dataset<T>> {
    let path = path.as_ref();
    let files = if path.is_dir() {
        split_files(path, split)?
    } else {
        vec![path.to_path_buf()]
    };
    let mut bytes = Vec::new();
    for f in &files {
        let chunk =
            std::fs::read(f).map_err(|e| UgnnError::Dataset(format!("{}: {e}", f.display())))?;
        if chunk.len() % CIFAR_RECORD_BYTES != 0 || chunk.is_empty() {
            return Err(UgnnError::Dataset(format!(
                "{}: {} bytes is not a positive multiple of {CIFAR_RECORD_BYTES}",
                f.display(),
                chunk.len()
            )));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar10(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..CIFAR_RECORD_BYTES - 1).map(fill));
        r
    }

    #[test]
    fn decodes_planes_in_channel_major_order() {
        // Pixel value encodes its plane: 0 for red, 1 for green, 2 for blue.
        let bytes = record(7, |k| (k / 1024) as u8);
        let d: Dataset<f64> = parse_cifar10(&bytes).unwrap();
        assert_eq!(d.labels, vec![7]);
        assert_eq!(d.inputs.shape(), &[1, 3, 32, 32]);
        let x = d.inputs.data();
        assert_eq!(x[0], 0.0);
        assert_eq!(x[1024], 1.0 / 255.0);
        assert_eq!(x[3071], 2.0 / 255.0);
    }

    #[test]
    fn pixels_scale_to_unit_interval() {
        let d: Dataset<f32> = parse_cifar10(&record(0, |k| (k % 256) as u8)).unwrap();
        assert_eq!(d.inputs.data()[255], 1.0);
        assert!(d.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn record_count_follows_file_size() {
        let mut bytes = Vec::new();
        for i in 0..10u8 {
            bytes.extend(record(i, |_| i));
        }
        let d: Dataset<f32> = parse_cifar10(&bytes).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d.labels, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn truncation_and_bad_labels_are_errors() {
        let mut bytes = record(1, |_| 0);
        bytes.pop();
        assert!(matches!(
            parse_cifar10::<f32>(&bytes),
            Err(UgnnError::Dataset(_))
        ));
        assert!(parse_cifar10::<f32>(&[]).is_err());
        let err = parse_cifar10::<f32>(&record(10, |_| 0)).unwrap_err();
        assert!(err.to_string().contains("label byte 10"), "{err}");
    }

    #[test]
    fn directory_layout_is_resolved() {
        let dir = tempfile::tempdir().unwrap();
        let inner = dir.path().join("cifar-10-batches-bin");
        std::fs::create_dir(&inner).unwrap();
        std::fs::write(inner.join("test_batch.bin"), record(3, |_| 9)).unwrap();
        let d: Dataset<f64> = load_cifar10(dir.path(), CifarSplit::Test).unwrap();
        assert_eq!(d.labels, vec![3]);
        assert!(load_cifar10::<f64>(dir.path(), CifarSplit::Train).is_err());
        let d2: Dataset<f64> =
            load_cifar10(inner.join("test_batch.bin"), CifarSplit::Train).unwrap();
        assert_eq!(d, d2);
    }
}

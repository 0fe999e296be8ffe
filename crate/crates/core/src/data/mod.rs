//! Labeled datasets, synthetic generators, the CIFAR-10 reader and model
//! checkpoints.

mod checkpoint;
mod cifar;
mod synthetic;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Metadata,
    StoredTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use cifar::{
    load_cifar10, parse_cifar10, CifarSplit, CIFAR_CLASSES, CIFAR_RECORD_BYTES, CIFAR_SIDE,
};
pub use synthetic::{gen_blobs2d, gen_moons2d, gen_ring2d, BlobsParams, MoonsParams, RingParams};

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Result, UgnnError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Inputs `[N, ...]` with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.ndim() < 2 || inputs.shape()[0] != labels.len() {
            return Err(UgnnError::Dataset(format!(
                "inputs {:?} do not match {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(UgnnError::Dataset(format!("classes {classes} < 2")));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(UgnnError::Label { label, classes });
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one unbatched input.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Unbatched input `i`.
    pub fn sample(&self, i: usize) -> Tensor<T> {
        let n = self.sample_len();
        Tensor::new(
            self.sample_shape(),
            self.inputs.data()[i * n..(i + 1) * n].to_vec(),
        )
        .expect("row extent")
    }

    /// Batched inputs and labels at `indices`, in order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(UgnnError::Dataset("empty batch".into()));
        }
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(UgnnError::Dataset(format!(
                    "index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.inputs.data()[i * n..(i + 1) * n]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(&shape, data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (inputs, labels) = self.batch(indices)?;
        Ok(Self {
            inputs,
            labels,
            classes: self.classes,
        })
    }

    /// The first `n` samples (all of them when `n ≥ len`).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            inputs: self.inputs.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Cifar10 {
        path: PathBuf,
        split: CifarSplit,
        limit: Option<usize>,
    },
    Blobs2d(BlobsParams),
    Ring2d(RingParams),
    Moons2d(MoonsParams),
}

fn parse_kv(body: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for part in body.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| UgnnError::Dataset(format!("expected key=value, got {part:?}")))?;
        if out
            .insert(k.trim().to_string(), v.trim().to_string())
            .is_some()
        {
            return Err(UgnnError::Dataset(format!("duplicate key {k:?}")));
        }
    }
    Ok(out)
}

struct Fields {
    kind: &'static str,
    map: BTreeMap<String, String>,
}

impl Fields {
    fn get<V: std::str::FromStr>(&mut self, key: &str, default: V) -> Result<V> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| {
                UgnnError::Dataset(format!("{}: cannot parse {key}={s:?}", self.kind))
            }),
        }
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            None => Ok(()),
            Some(k) => Err(UgnnError::Dataset(format!(
                "{}: unknown field {k:?}",
                self.kind
            ))),
        }
    }
}

impl DatasetSpec {
    /// `kind:key=value,...`, e.g. `blobs2d:count=1000,sep=4,seed=1` or
    /// `cifar10:path=data/cifar-10-batches-bin,split=test,limit=1000`.
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, body) = s.split_once(':').unwrap_or((s, ""));
        let map = parse_kv(body)?;
        let spec = match kind.trim() {
            "cifar10" => {
                let mut f = Fields {
                    kind: "cifar10",
                    map,
                };
                let path: String = f.get("path", String::new())?;
                if path.is_empty() {
                    return Err(UgnnError::Dataset("cifar10: path is required".into()));
                }
                let split: String = f.get("split", "train".to_string())?;
                let split = CifarSplit::from_name(&split).ok_or_else(|| {
                    UgnnError::Dataset(format!("cifar10: unknown split {split:?}"))
                })?;
                let limit: usize = f.get("limit", 0)?;
                f.finish()?;
                DatasetSpec::Cifar10 {
                    path: PathBuf::from(path),
                    split,
                    limit: (limit > 0).then_some(limit),
                }
            }
            "blobs2d" => {
                let d = BlobsParams::default();
                let mut f = Fields {
                    kind: "blobs2d",
                    map,
                };
                let p = BlobsParams {
                    count: f.get("count", d.count)?,
                    classes: f.get("classes", d.classes)?,
                    sep: f.get("sep", d.sep)?,
                    noise: f.get("noise", d.noise)?,
                    seed: f.get("seed", d.seed)?,
                };
                f.finish()?;
                DatasetSpec::Blobs2d(p)
            }
            "ring2d" => {
                let d = RingParams::default();
                let mut f = Fields {
                    kind: "ring2d",
                    map,
                };
                let p = RingParams {
                    count: f.get("count", d.count)?,
                    max_radius: f.get("radius", d.max_radius)?,
                    gap: f.get("gap", d.gap)?,
                    seed: f.get("seed", d.seed)?,
                };
                f.finish()?;
                DatasetSpec::Ring2d(p)
            }
            "moons2d" => {
                let d = MoonsParams::default();
                let mut f = Fields {
                    kind: "moons2d",
                    map,
                };
                let p = MoonsParams {
                    count: f.get("count", d.count)?,
                    noise: f.get("noise", d.noise)?,
                    seed: f.get("seed", d.seed)?,
                };
                f.finish()?;
                DatasetSpec::Moons2d(p)
            }
            other => {
                return Err(UgnnError::Dataset(format!(
                    "unknown dataset kind {other:?} (expected cifar10, blobs2d, ring2d or moons2d)"
                )))
            }
        };
        Ok(spec)
    }

    pub fn load<T: Scalar>(&self) -> Result<Dataset<T>> {
        match self {
            DatasetSpec::Cifar10 { path, split, limit } => {
                let d = load_cifar10(path, *split)?;
                match limit {
                    Some(n) => d.take(*n),
                    None => Ok(d),
                }
            }
            DatasetSpec::Blobs2d(p) => gen_blobs2d(p),
            DatasetSpec::Ring2d(p) => gen_ring2d(p),
            DatasetSpec::Moons2d(p) => gen_moons2d(p),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset<f64> {
        let x = Tensor::new(&[3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        Dataset::new(x, vec![0, 1, 0], 2).unwrap()
    }

    #[test]
    fn batch_gathers_rows_in_order() {
        let d = toy();
        let (x, y) = d.batch(&[2, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 2]);
        assert_eq!(x.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert_eq!(y, vec![0, 0]);
        assert!(d.batch(&[3]).is_err());
        assert_eq!(d.sample(1).data(), &[2.0, 3.0]);
    }

    #[test]
    fn new_rejects_bad_labels_and_lengths() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        assert!(matches!(
            Dataset::new(x.clone(), vec![0, 2], 2),
            Err(UgnnError::Label {
                label: 2,
                classes: 2
            })
        ));
        assert!(Dataset::new(x.clone(), vec![0], 2).is_err());
        assert!(Dataset::new(x, vec![0, 0], 1).is_err());
    }

    #[test]
    fn take_clamps() {
        assert_eq!(toy().take(10).unwrap().len(), 3);
        assert_eq!(toy().take(1).unwrap().labels, vec![0]);
    }

    #[test]
    fn spec_parsing() {
        let s = DatasetSpec::parse("blobs2d:count=100,sep=4,seed=7").unwrap();
        assert_eq!(
            s,
            DatasetSpec::Blobs2d(BlobsParams {
                count: 100,
                sep: 4.0,
                seed: 7,
                ..BlobsParams::default()
            })
        );
        assert!(matches!(
            DatasetSpec::parse("ring2d").unwrap(),
            DatasetSpec::Ring2d(_)
        ));
        let c = DatasetSpec::parse("cifar10:path=/x,split=test,limit=5").unwrap();
        assert_eq!(
            c,
            DatasetSpec::Cifar10 {
                path: "/x".into(),
                split: CifarSplit::Test,
                limit: Some(5)
            }
        );
        for bad in [
            "nope:count=1",
            "blobs2d:count=x",
            "blobs2d:colour=red",
            "blobs2d:count",
            "cifar10:split=test",
            "blobs2d:seed=1,seed=2",
        ] {
            assert!(DatasetSpec::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn spec_load_is_reproducible() {
        let s = DatasetSpec::parse("moons2d:count=50,seed=3").unwrap();
        assert_eq!(s.load::<f64>().unwrap(), s.load::<f64>().unwrap());
    }
}

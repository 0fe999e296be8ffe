//! Self-describing binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "UGNN" | u32 version | u64 metadata length | metadata (UTF-8 `key=value` lines)
//! u32 tensor count | per tensor: u32 name length, name, u8 dtype (0 = f32, 1 = f64),
//!                    u32 ndim, ndim × u64 extents, payload
//! ```
//!
//! The metadata carries the architecture, so loading rebuilds the model and
//! then overwrites its parameters by name.

use std::path::Path;

use crate::error::{Result, UgnnError};
use crate::layers::{Activation, FREEZE_ITERS, POWER_ITERS, TRAIN_ITERS};
use crate::model::{Architecture, MlpConfig, Normalization, UgnnConfig, UgnnModel, KERNEL_SIZE};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::upd::UpdKind;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UGNN";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NDIM: usize = 8;

/// Ordered `key=value` pairs. Keys are unique; neither side may contain a
/// newline and keys may not contain `=`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metadata {
    entries: Vec<(String, String)>,
}

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> Result<()> {
        let (key, value) = (key.into(), value.to_string());
        if key.is_empty() || key.contains(['=', '\n', '\r']) || value.contains(['\n', '\r']) {
            return Err(UgnnError::Checkpoint(format!(
                "invalid metadata entry {key:?}"
            )));
        }
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Copy every entry of `other` over this one.
    pub fn extend(&mut self, other: &Metadata) -> Result<()> {
        for (k, v) in &other.entries {
            self.set(k.clone(), v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Self::new();
        for line in text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line.split_once('=').ok_or_else(|| {
                UgnnError::Checkpoint(format!("metadata line without '=': {line:?}"))
            })?;
            if m.get(k).is_some() {
                return Err(UgnnError::Checkpoint(format!(
                    "duplicate metadata key {k:?}"
                )));
            }
            m.set(k, v)?;
        }
        Ok(m)
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| UgnnError::Checkpoint(format!("metadata is missing {key:?}")))
    }

    fn parse_field<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let s = self.require(key)?;
        s.parse()
            .map_err(|_| UgnnError::Checkpoint(format!("metadata {key}={s:?} does not parse")))
    }

    fn parse_list<V: std::str::FromStr>(&self, key: &str) -> Result<Vec<V>> {
        let s = self.require(key)?;
        s.split(',')
            .map(|p| {
                p.trim().parse().map_err(|_| {
                    UgnnError::Checkpoint(format!("metadata {key}={s:?} does not parse"))
                })
            })
            .collect()
    }
}

/// A decoded checkpoint before it is turned into a model. Values are held as
/// `f64`, which represents every stored `f32` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: Metadata,
    pub tensors: Vec<StoredTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

fn join<V: ToString>(v: &[V]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Architecture and design constants of `model`.
fn model_metadata<T: Scalar>(model: &UgnnModel<T>) -> Result<Metadata> {
    let mut m = Metadata::new();
    m.set("format", "ugnn-checkpoint")?;
    m.set("dtype", T::DTYPE.name())?;
    match &model.architecture {
        Architecture::Conv(c) => {
            m.set("architecture", "conv")?;
            m.set("input_size", c.input_size)?;
            m.set("in_channels", c.in_channels)?;
            m.set("classes", c.classes)?;
            m.set("activation", c.activation.name())?;
            m.set("head", c.head.name())?;
            m.set("seed", c.seed)?;
            if let Some(n) = &c.normalization {
                m.set("normalization.mean", join(&n.mean))?;
                m.set("normalization.std", join(&n.std))?;
            }
            m.set("conv.kernel_size", KERNEL_SIZE)?;
        }
        Architecture::Mlp(c) => {
            m.set("architecture", "mlp")?;
            m.set("dims", join(&c.dims))?;
            m.set("classes", c.classes)?;
            m.set("activation", c.activation.name())?;
            m.set("head", c.head.name())?;
            m.set("seed", c.seed)?;
        }
    }
    m.set("frozen", model.is_frozen())?;
    m.set("head.steps", model.head.steps)?;
    m.set("head.freeze_steps", model.head.freeze_steps)?;
    m.set("head.straight_through", model.head.straight_through)?;
    m.set("head.train_iters", model.head.train_iters)?;
    m.set("head.freeze_iters", model.head.freeze_iters)?;
    m.set("bjorck.power_iters", POWER_ITERS)?;
    m.set("bjorck.train_iters", TRAIN_ITERS)?;
    m.set("bjorck.freeze_iters", FREEZE_ITERS)?;
    m.set("lbfgs.memory", model.head.lbfgs.memory)?;
    m.set("lbfgs.iters_per_step", model.head.lbfgs.iters_per_step)?;
    Ok(m)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v =
        u32::try_from(v).map_err(|_| UgnnError::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialize `model` with `extra` metadata (history summary, run settings)
/// appended after the architecture entries. Extra keys may not shadow them.
pub fn encode_checkpoint<T: Scalar>(model: &UgnnModel<T>, extra: &Metadata) -> Result<Vec<u8>> {
    let mut meta = model_metadata(model)?;
    for (k, v) in extra.entries() {
        if meta.get(k).is_some() {
            return Err(UgnnError::Checkpoint(format!(
                "extra metadata key {k:?} is reserved"
            )));
        }
        meta.set(k.clone(), v)?;
    }
    let text = meta.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let params = model.parameters();
    put_u32(&mut out, params.len())?;
    for (name, t) in params {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        out.push(match T::DTYPE {
            DType::F32 => 0,
            DType::F64 => 1,
        });
        put_u32(&mut out, t.ndim())?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(UgnnError::Checkpoint(format!(
                "truncated checkpoint: {what} needs {n} bytes at offset {}, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parse the container without building a model.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(UgnnError::Checkpoint(
            "not a UGNN checkpoint (bad magic)".into(),
        ));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(UgnnError::Checkpoint(format!(
            "checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let meta_len = r.u64("metadata length")?;
    let meta_len = usize::try_from(meta_len)
        .ok()
        .filter(|&n| n <= r.remaining())
        .ok_or_else(|| {
            UgnnError::Checkpoint(format!("metadata length {meta_len} exceeds the file"))
        })?;
    let text = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|_| UgnnError::Checkpoint("metadata is not UTF-8".into()))?;
    let metadata = Metadata::parse(text)?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32("tensor name length")?;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| UgnnError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = match r.take(1, "dtype")?[0] {
            0 => DType::F32,
            1 => DType::F64,
            b => {
                return Err(UgnnError::Checkpoint(format!(
                    "tensor {name:?}: unknown dtype byte {b}"
                )))
            }
        };
        let ndim = r.u32("ndim")?;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(UgnnError::Checkpoint(format!(
                "tensor {name:?}: ndim {ndim} out of range"
            )));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut len: usize = 1;
        for _ in 0..ndim {
            let d = usize::try_from(r.u64("extent")?).unwrap_or(usize::MAX);
            len = len.saturating_mul(d);
            shape.push(d);
        }
        let bytes_needed = len.saturating_mul(dtype.size_of());
        if len == 0 || bytes_needed > r.remaining() {
            return Err(UgnnError::Checkpoint(format!(
                "tensor {name:?}: shape {shape:?} is empty or exceeds the file"
            )));
        }
        let raw = r.take(bytes_needed, "payload")?;
        let values = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
        };
        tensors.push(StoredTensor {
            name,
            dtype,
            shape,
            values,
        });
    }
    if r.remaining() != 0 {
        return Err(UgnnError::Checkpoint(format!(
            "{} trailing bytes after the tensor table",
            r.remaining()
        )));
    }
    Ok(Checkpoint { metadata, tensors })
}

fn parse_name<V>(m: &Metadata, key: &str, f: impl Fn(&str) -> Option<V>) -> Result<V> {
    let s = m.require(key)?;
    f(s).ok_or_else(|| UgnnError::Checkpoint(format!("metadata {key}={s:?} is not recognized")))
}

fn architecture_from(m: &Metadata) -> Result<Architecture> {
    let activation = parse_name(m, "activation", Activation::from_name)?;
    let head = parse_name(m, "head", UpdKind::from_name)?;
    let classes = m.parse_field("classes")?;
    let seed = m.parse_field("seed")?;
    match m.require("architecture")? {
        "conv" => {
            let normalization = match (m.get("normalization.mean"), m.get("normalization.std")) {
                (None, None) => None,
                _ => Some(Normalization {
                    mean: m.parse_list("normalization.mean")?,
                    std: m.parse_list("normalization.std")?,
                }),
            };
            Ok(Architecture::Conv(UgnnConfig {
                input_size: m.parse_field("input_size")?,
                in_channels: m.parse_field("in_channels")?,
                classes,
                activation,
                head,
                normalization,
                seed,
            }))
        }
        "mlp" => Ok(Architecture::Mlp(MlpConfig {
            dims: m.parse_list("dims")?,
            classes,
            activation,
            head,
            seed,
        })),
        other => Err(UgnnError::Checkpoint(format!(
            "unknown architecture {other:?}"
        ))),
    }
}

impl Checkpoint {
    /// Rebuild the model, install the stored parameters and re-freeze when the
    /// saved model was frozen.
    pub fn into_model<T: Scalar>(self) -> Result<(UgnnModel<T>, Metadata)> {
        let m = &self.metadata;
        let mut model = match architecture_from(m)? {
            Architecture::Conv(c) => UgnnModel::build(&c),
            Architecture::Mlp(c) => UgnnModel::build_mlp(&c),
        }
        .map_err(|e| UgnnError::Checkpoint(format!("stored architecture is invalid: {e}")))?;
        model.head.steps = m.parse_field("head.steps")?;
        model.head.freeze_steps = m.parse_field("head.freeze_steps")?;
        model.head.straight_through = m.parse_field("head.straight_through")?;
        model.head.train_iters = m.parse_field("head.train_iters")?;
        model.head.freeze_iters = m.parse_field("head.freeze_iters")?;
        let frozen: bool = m.parse_field("frozen")?;

        let mut stored = self.tensors;
        {
            let params = model.parameters_mut();
            if params.len() != stored.len() {
                return Err(UgnnError::Checkpoint(format!(
                    "architecture has {} parameters, file stores {}",
                    params.len(),
                    stored.len()
                )));
            }
            for (name, slot) in params {
                let pos = stored.iter().position(|s| s.name == name).ok_or_else(|| {
                    UgnnError::Checkpoint(format!("parameter {name:?} is missing"))
                })?;
                let s = stored.swap_remove(pos);
                if s.shape != slot.shape() {
                    return Err(UgnnError::Checkpoint(format!(
                        "parameter {name:?}: stored shape {:?}, architecture expects {:?}",
                        s.shape,
                        slot.shape()
                    )));
                }
                let values: Vec<T> = s.values.iter().map(|&v| T::from_f64_lossy(v)).collect();
                *slot = Tensor::new(&s.shape, values)?;
            }
        }
        if frozen {
            model.freeze()?;
        }
        Ok((model, self.metadata))
    }
}

pub fn save_checkpoint<T: Scalar>(
    model: &UgnnModel<T>,
    path: impl AsRef<Path>,
    extra: &Metadata,
) -> Result<()> {
    let bytes = encode_checkpoint(model, extra)?;
    let path = path.as_ref();
    // Write beside the target and rename so a crash never leaves a partial file.
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint saved in either precision. `f32` files widen exactly
/// into an `f64` session; `f64` files round to nearest in an `f32` session.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(UgnnModel<T>, Metadata)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| UgnnError::Checkpoint(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)?.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp<T: Scalar>(head: UpdKind) -> UgnnModel<T> {
        let mut m = UgnnModel::build_mlp(&MlpConfig {
            dims: vec![6, 4, 4],
            classes: 3,
            activation: Activation::MaxMin,
            head,
            seed: 11,
        })
        .unwrap();
        // Move away from the seeded initialization so a rebuild alone cannot pass.
        for (i, (_, t)) in m.parameters_mut().into_iter().enumerate() {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += T::from_f64_lossy(0.01 * (i + 1) as f64));
        }
        m.freeze().unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for head in [UpdKind::Bounded, UpdKind::Unbounded] {
            let m = mlp::<f64>(head);
            let mut extra = Metadata::new();
            extra.set("history.final_loss", 0.25).unwrap();
            let bytes = encode_checkpoint(&m, &extra).unwrap();
            let (back, meta) = decode_checkpoint(&bytes)
                .unwrap()
                .into_model::<f64>()
                .unwrap();
            assert_eq!(meta.get("history.final_loss"), Some("0.25"));
            assert!(back.is_frozen());
            for ((na, a), (nb, b)) in m.parameters().into_iter().zip(back.parameters()) {
                assert_eq!(na, nb);
                assert_eq!(a, b);
            }
            let x = Tensor::from_vec(vec![0.3, -1.0, 2.0, 0.5, 0.0, -0.7]);
            assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
        }
    }

    #[test]
    fn conv_metadata_round_trips() {
        let mut cfg = UgnnConfig::new(32, 3, 4);
        cfg.normalization = Some(Normalization::cifar10());
        cfg.seed = 5;
        let m = UgnnModel::<f32>::build(&cfg).unwrap();
        let bytes = encode_checkpoint(&m, &Metadata::new()).unwrap();
        let (back, _) = decode_checkpoint(&bytes)
            .unwrap()
            .into_model::<f32>()
            .unwrap();
        assert_eq!(back.architecture, m.architecture);
        assert!(!back.is_frozen());
        assert!(m
            .parameters()
            .iter()
            .zip(back.parameters())
            .all(|(a, b)| a.1 == b.1));
    }

    #[test]
    fn f32_file_widens_exactly() {
        let m = mlp::<f32>(UpdKind::Bounded);
        let bytes = encode_checkpoint(&m, &Metadata::new()).unwrap();
        let (wide, _) = decode_checkpoint(&bytes)
            .unwrap()
            .into_model::<f64>()
            .unwrap();
        for ((_, a), (_, b)) in m.parameters().into_iter().zip(wide.parameters()) {
            let widened: Vec<f64> = a.data().iter().map(|&v| f64::from(v)).collect();
            assert_eq!(widened, b.data());
        }
    }

    #[test]
    fn corruption_is_reported_cleanly() {
        let m = mlp::<f64>(UpdKind::Bounded);
        let bytes = encode_checkpoint(&m, &Metadata::new()).unwrap();
        for cut in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, UgnnError::Checkpoint(_)), "{cut}: {err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(decode_checkpoint(&bad)
            .unwrap_err()
            .to_string()
            .contains("version 2"));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(decode_checkpoint(&bad)
            .unwrap_err()
            .to_string()
            .contains("trailing"));
    }

    #[test]
    fn mismatched_tensor_table_is_rejected() {
        let m = mlp::<f64>(UpdKind::Bounded);
        let mut ck = decode_checkpoint(&encode_checkpoint(&m, &Metadata::new()).unwrap()).unwrap();
        ck.tensors[0].name = "layers.99.weight".into();
        assert!(ck
            .clone()
            .into_model::<f64>()
            .unwrap_err()
            .to_string()
            .contains("missing"));
        let mut ck2 = decode_checkpoint(&encode_checkpoint(&m, &Metadata::new()).unwrap()).unwrap();
        ck2.tensors.pop();
        assert!(ck2.into_model::<f64>().is_err());
    }

    #[test]
    fn reserved_and_malformed_metadata() {
        let m = mlp::<f64>(UpdKind::Bounded);
        let mut extra = Metadata::new();
        extra.set("classes", 9).unwrap();
        assert!(encode_checkpoint(&m, &extra).is_err());
        assert!(Metadata::new().set("a=b", 1).is_err());
        assert!(Metadata::new().set("a", "x\ny").is_err());
        assert!(Metadata::parse("a=1\na=2").is_err());
        assert_eq!(
            Metadata::parse("# c\na=1=2\n").unwrap().get("a"),
            Some("1=2")
        );
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ugnn");
        let m = mlp::<f64>(UpdKind::Bounded);
        save_checkpoint(&m, &path, &Metadata::new()).unwrap();
        let (back, _) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(back.parameters().len(), m.parameters().len());
        assert!(load_checkpoint::<f64>(dir.path().join("absent")).is_err());
    }
}

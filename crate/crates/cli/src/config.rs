//! Run configuration files: `key=value` lines with `model.*` and `train.*`
//! keys. Model extents missing from the file are taken from the data.

use anyhow::{bail, Context, Result};
use ugnn::data::Metadata;
use ugnn::layers::Activation;
use ugnn::model::{MlpConfig, Normalization, UgnnConfig};
use ugnn::training::TrainConfig;
use ugnn::upd::UpdKind;
use ugnn::Architecture;

const MODEL_KEYS: [&str; 10] = [
    "arch",
    "input_size",
    "in_channels",
    "classes",
    "dims",
    "activation",
    "head",
    "seed",
    "norm_mean",
    "norm_std",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Default,
    Desk,
    Full,
}

impl Preset {
    pub fn base(self) -> TrainConfig {
        match self {
            Preset::Default => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
            Preset::Full => TrainConfig::full(),
        }
    }
}

pub struct RunConfig {
    pub model: Metadata,
    pub train: TrainConfig,
}

fn list<V: std::str::FromStr>(key: &str, s: &str) -> Result<Vec<V>> {
    s.split(',')
        .map(|p| p.trim().parse().ok().with_context(|| format!("model.{key}: cannot parse {s:?}")))
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str, preset: Preset) -> Result<Self> {
        let all = Metadata::parse(text)?;
        let mut model = Metadata::new();
        for (k, v) in all.entries() {
            match k.split_once('.') {
                Some(("model", key)) if MODEL_KEYS.contains(&key) => model.set(key, v)?,
                Some(("model", key)) => bail!("unknown model key model.{key}"),
                Some(("train", _)) => {}
                _ => bail!("unknown configuration key {k:?} (expected model.* or train.*)"),
            }
        }
        let train = TrainConfig::from_metadata(&all, &preset.base())?;
        Ok(Self { model, train })
    }

    /// Resolve the architecture against the data's sample shape and class count.
    pub fn architecture(&self, sample_shape: &[usize], data_classes: usize) -> Result<Architecture> {
        let m = &self.model;
        let classes = match m.get("classes") {
            Some(s) => s.parse().ok().with_context(|| format!("model.classes: cannot parse {s:?}"))?,
            None => data_classes,
        };
        if classes < data_classes {
            bail!("model.classes={classes} is below the data's {data_classes} classes");
        }
        let activation = match m.get("activation") {
            Some(s) => Activation::from_name(s).with_context(|| format!("model.activation: unknown {s:?}"))?,
            None => Activation::MaxMin,
        };
        let head = match m.get("head") {
            Some(s) => UpdKind::from_name(s).with_context(|| format!("model.head: unknown {s:?}"))?,
            None => UpdKind::Bounded,
        };
        let seed = match m.get("seed") {
            Some(s) => s.parse().ok().with_context(|| format!("model.seed: cannot parse {s:?}"))?,
            None => 0,
        };
        let arch = m.get("arch").unwrap_or(if sample_shape.len() == 3 { "conv" } else { "mlp" });
        match arch {
            "conv" => {
                if sample_shape.len() != 3 || sample_shape[1] != sample_shape[2] {
                    bail!("model.arch=conv needs square [C, H, W] samples, data has {sample_shape:?}");
                }
                let mut cfg = UgnnConfig::new(sample_shape[1], sample_shape[0], classes);
                for (key, slot) in [("input_size", &mut cfg.input_size), ("in_channels", &mut cfg.in_channels)] {
                    if let Some(s) = m.get(key) {
                        *slot = s.parse().ok().with_context(|| format!("model.{key}: cannot parse {s:?}"))?;
                    }
                }
                if cfg.input_size != sample_shape[1] || cfg.in_channels != sample_shape[0] {
                    bail!(
                        "model.input_size/in_channels = {}/{} do not match data samples {sample_shape:?}",
                        cfg.input_size,
                        cfg.in_channels
                    );
                }
                cfg.activation = activation;
                cfg.head = head;
                cfg.seed = seed;
                cfg.normalization = match (m.get("norm_mean"), m.get("norm_std")) {
                    (Some(a), Some(b)) => Some(Normalization {
                        mean: list("norm_mean", a)?,
                        std: list("norm_std", b)?,
                    }),
                    (None, None) if self.train.normalize => {
                        if cfg.in_channels != 3 {
                            bail!("train.normalize needs model.norm_mean/norm_std for {} channels", cfg.in_channels);
                        }
                        Some(Normalization::cifar10())
                    }
                    (None, None) => None,
                    _ => bail!("model.norm_mean and model.norm_std must be given together"),
                };
                cfg.validate()?;
                Ok(Architecture::Conv(cfg))
            }
            "mlp" => {
                if sample_shape.len() != 1 {
                    bail!("model.arch=mlp needs flat samples, data has {sample_shape:?}");
                }
                if self.train.normalize {
                    bail!("train.normalize is only supported for conv models");
                }
                let d = sample_shape[0];
                let dims = match m.get("dims") {
                    Some(s) => list("dims", s)?,
                    None => vec![d, d, d],
                };
                if dims.first() != Some(&d) {
                    bail!("model.dims must start with the input width {d}, got {dims:?}");
                }
                Ok(Architecture::Mlp(MlpConfig {
                    dims,
                    classes,
                    activation,
                    head,
                    seed,
                }))
            }
            other => bail!("model.arch: unknown {other:?} (expected conv or mlp)"),
        }
    }
}

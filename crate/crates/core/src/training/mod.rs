//! Multi-margin training with Adam and per-step re-projection.
//!
//! Every step binds the raw parameters to a fresh tape, recomputes all
//! projections from them and back-propagates through the projections, so the
//! optimizer moves the unconstrained parameters while the forward pass only
//! ever sees GNP layers and a UPD head.

mod adam;
mod augment;
mod loss;

pub use adam::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use augment::{augment_batch, hflip, reflect_pad_crop};
pub use loss::multi_margin_loss;

use rand::seq::SliceRandom;

use crate::data::{Dataset, Metadata};
use crate::error::{Result, UgnnError};
use crate::layers::freeze_tolerance;
use crate::model::{margin, Classifier, Layer, UgnnModel};
use crate::scalar::{c, DType, Scalar};
use crate::tape::Tape;
use crate::tensor::{seeded_rng, Tensor};
use crate::upd::pair_norm_deviation;
use crate::verification::field_unitarity_deviation;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs after which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub batch_size: usize,
    /// Hinge margin of the multi-margin loss, in input-space units.
    pub margin: f64,
    /// Reflect-padding for random crops; 0 disables cropping.
    pub crop_pad: usize,
    pub flip: bool,
    /// Standardize inputs with the model's channel statistics.
    pub normalize: bool,
    pub seed: u64,
    pub precision: DType,
    /// Train on the first `n` samples only.
    pub subset: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            milestones: Vec::new(),
            decay: 0.5,
            batch_size: 64,
            margin: 0.5,
            crop_pad: 0,
            flip: false,
            normalize: false,
            seed: 0,
            precision: DType::F64,
            subset: None,
        }
    }
}

const TRAIN_KEYS: [&str; 12] = [
    "epochs",
    "lr",
    "milestones",
    "decay",
    "batch_size",
    "margin",
    "crop_pad",
    "flip",
    "normalize",
    "seed",
    "precision",
    "subset",
];

impl TrainConfig {
    /// Full-length image schedule: 300 epochs, batch 1024, halving the rate
    /// after epochs 100 and 200.
    pub fn full() -> Self {
        Self {
            epochs: 300,
            milestones: vec![100, 200],
            batch_size: 1024,
            crop_pad: 4,
            flip: true,
            normalize: true,
            precision: DType::F32,
            ..Self::default()
        }
    }

    /// Desk-scale image schedule: 20 epochs, batch 128, 5000 samples.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            milestones: vec![10, 15],
            batch_size: 128,
            subset: Some(5000),
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(UgnnError::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.decay.is_finite() && self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay {} must lie in (0, 1]", self.decay));
        }
        if self.milestones.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!(
                "milestones {:?} must be strictly increasing",
                self.milestones
            ));
        }
        if self.milestones.iter().any(|&m| m == 0 || m >= self.epochs) {
            return bad(format!(
                "milestones {:?} must lie in 1..{}",
                self.milestones, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return bad(format!("margin {} must be positive", self.margin));
        }
        if self.subset == Some(0) {
            return bad("subset must be positive".into());
        }
        Ok(())
    }

    /// Learning rate used during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.decay.powi(passed as i32)
    }

    /// Run manifest: every field plus the optimizer and augmentation
    /// constants. Choices not fixed by the method itself are under `choice.`.
    pub fn to_metadata(&self) -> Result<Metadata> {
        let mut m = Metadata::new();
        m.set("train.epochs", self.epochs)?;
        m.set("train.lr", self.lr)?;
        m.set(
            "train.milestones",
            self.milestones
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        )?;
        m.set("train.decay", self.decay)?;
        m.set("train.batch_size", self.batch_size)?;
        m.set("train.margin", self.margin)?;
        m.set("train.crop_pad", self.crop_pad)?;
        m.set("train.flip", self.flip)?;
        m.set("train.normalize", self.normalize)?;
        m.set("train.seed", self.seed)?;
        m.set("train.precision", self.precision.name())?;
        m.set(
            "train.subset",
            self.subset.map_or("all".to_string(), |n| n.to_string()),
        )?;
        m.set("adam.beta1", ADAM_BETA1)?;
        m.set("adam.beta2", ADAM_BETA2)?;
        m.set("adam.eps", ADAM_EPS)?;
        m.set("loss", "multi-margin, mean over classes and batch")?;
        m.set(
            "choice.crop",
            "reflect padding then crop to the input extent",
        )?;
        m.set("choice.lr", "Adam default 1e-3 unless overridden")?;
        Ok(m)
    }

    /// Read `train.*` keys, falling back to `base` for absent ones. Unknown
    /// `train.*` keys are rejected; other keys are ignored.
    pub fn from_metadata(m: &Metadata, base: &TrainConfig) -> Result<Self> {
        let mut cfg = base.clone();
        for (k, v) in m.entries() {
            let Some(key) = k.strip_prefix("train.") else {
                continue;
            };
            if !TRAIN_KEYS.contains(&key) {
                return Err(UgnnError::Config(format!("unknown training key {k:?}")));
            }
            let err = || UgnnError::Config(format!("cannot parse {k}={v:?}"));
            match key {
                "epochs" => cfg.epochs = v.parse().map_err(|_| err())?,
                "lr" => cfg.lr = v.parse().map_err(|_| err())?,
                "milestones" => {
                    cfg.milestones = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| s.trim().parse().map_err(|_| err()))
                        .collect::<Result<_>>()?
                }
                "decay" => cfg.decay = v.parse().map_err(|_| err())?,
                "batch_size" => cfg.batch_size = v.parse().map_err(|_| err())?,
                "margin" => cfg.margin = v.parse().map_err(|_| err())?,
                "crop_pad" => cfg.crop_pad = v.parse().map_err(|_| err())?,
                "flip" => cfg.flip = v.parse().map_err(|_| err())?,
                "normalize" => cfg.normalize = v.parse().map_err(|_| err())?,
                "seed" => cfg.seed = v.parse().map_err(|_| err())?,
                "precision" => cfg.precision = DType::from_name(v).ok_or_else(err)?,
                "subset" => {
                    cfg.subset = if v == "all" {
                        None
                    } else {
                        Some(v.parse().map_err(|_| err())?)
                    }
                }
                _ => unreachable!("checked against TRAIN_KEYS"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    /// Certified radius averaged over samples, counting misclassified ones as 0.
    pub mean_margin: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,loss,accuracy,mean_margin\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.lr, e.loss, e.accuracy, e.mean_margin
            ));
        }
        s
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }

    pub fn summary(&self) -> Result<Metadata> {
        let mut m = Metadata::new();
        m.set("history.epochs", self.epochs.len())?;
        if let Some(e) = self.last() {
            m.set("history.final_loss", e.loss)?;
            m.set("history.final_accuracy", e.accuracy)?;
            m.set("history.final_mean_margin", e.mean_margin)?;
        }
        Ok(m)
    }
}

/// Projection health after the final freeze.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvariantSummary {
    /// Worst `max |W Wᵀ − I|` over dense layers.
    pub linear_deviation: f64,
    /// Worst per-frequency unitarity defect over convolutions.
    pub field_deviation: f64,
    /// Worst `| ‖W_i − W_j‖ − 1 |` of the head.
    pub upd_deviation: f64,
    pub tolerance: f64,
}

impl InvariantSummary {
    pub fn pass(&self) -> bool {
        self.linear_deviation <= self.tolerance
            && self.field_deviation <= self.tolerance
            && self.upd_deviation <= self.tolerance
    }
}

/// Audit the cached projections of a frozen model.
pub fn projection_invariants<T: Scalar>(model: &UgnnModel<T>) -> Result<InvariantSummary> {
    if !model.is_frozen() {
        return Err(UgnnError::NotFrozen);
    }
    let mut s = InvariantSummary {
        linear_deviation: 0.0,
        field_deviation: 0.0,
        upd_deviation: 0.0,
        tolerance: match T::DTYPE {
            DType::F32 => 1e-3f64,
            DType::F64 => 1e-6,
        }
        .max(freeze_tolerance::<T>()),
    };
    for l in &model.layers {
        match l {
            Layer::Linear(o) => {
                let w = o.projected().ok_or(UgnnError::NotFrozen)?;
                s.linear_deviation = s
                    .linear_deviation
                    .max(w.orthonormal_rows_deviation()?.to_f64_lossy());
            }
            Layer::Conv(cv) => {
                let f = cv.field().ok_or(UgnnError::NotFrozen)?;
                s.field_deviation = s
                    .field_deviation
                    .max(field_unitarity_deviation(f).to_f64_lossy());
            }
            _ => {}
        }
    }
    let w = model.head.projected().ok_or(UgnnError::NotFrozen)?;
    s.upd_deviation = pair_norm_deviation(w).to_f64_lossy();
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: History,
    pub invariants: InvariantSummary,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Standardize a `[B, C, ...]` batch when the model carries normalization.
pub fn prepare_inputs<T: Scalar>(model: &UgnnModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    match model.normalization() {
        Some(n) => n.apply(x, 1),
        None => Ok(x.clone()),
    }
}

fn check_data<T: Scalar>(model: &UgnnModel<T>, data: &Dataset<T>) -> Result<()> {
    if data.sample_shape() != model.input_shape() {
        return Err(UgnnError::Config(format!(
            "dataset samples have shape {:?}, model expects {:?}",
            data.sample_shape(),
            model.input_shape()
        )));
    }
    if data.classes > model.classes() {
        return Err(UgnnError::Config(format!(
            "dataset has {} classes, model has {}",
            data.classes,
            model.classes()
        )));
    }
    Ok(())
}

/// Accuracy and mean certified radius of a frozen model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub samples: usize,
    pub accuracy: f64,
    pub mean_margin: f64,
}

pub fn evaluate<T: Scalar>(
    model: &UgnnModel<T>,
    data: &Dataset<T>,
    batch: usize,
) -> Result<EvalSummary> {
    check_data(model, data)?;
    let x = prepare_inputs(model, &data.inputs)?;
    let ms = crate::verification::margins(model, &x, batch)?;
    let (mut hits, mut radius) = (0usize, 0.0);
    for (m, &y) in ms.iter().zip(&data.labels) {
        if m.label == y {
            hits += 1;
            radius += m.value.to_f64_lossy();
        }
    }
    let n = data.len() as f64;
    Ok(EvalSummary {
        samples: data.len(),
        accuracy: hits as f64 / n,
        mean_margin: radius / n,
    })
}

pub fn train<T: Scalar>(
    model: &mut UgnnModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, data, cfg, |_, _| {})
}

/// [`train`] with an observer called after every optimizer step.
///
/// A non-finite loss restores the parameters of the last good step and
/// returns an error, leaving the model unfrozen.
pub fn train_with<T: Scalar, F: FnMut(&StepInfo, &UgnnModel<T>)>(
    model: &mut UgnnModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(model, data)?;
    let is_image = data.sample_shape().len() == 3;
    if (cfg.crop_pad > 0 || cfg.flip) && !is_image {
        return Err(UgnnError::Config(
            "crop/flip augmentation needs [C, H, W] samples".into(),
        ));
    }
    if cfg.normalize != model.normalization().is_some() {
        return Err(UgnnError::Config(format!(
            "normalize={} but the model {} channel statistics",
            cfg.normalize,
            if model.normalization().is_some() {
                "carries"
            } else {
                "has no"
            }
        )));
    }
    let n = cfg.subset.map_or(data.len(), |s| s.min(data.len()));
    let margin_t = c::<T>(cfg.margin);
    let mut rng = seeded_rng(cfg.seed);
    let mut adam = Adam::<T>::new();
    let mut history = History::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    model.unfreeze();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits, mut radius) = (0.0, 0usize, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let (mut x, labels) = data.batch(idx)?;
            if is_image && (cfg.crop_pad > 0 || cfg.flip) {
                x = augment_batch(&x, cfg.crop_pad, cfg.flip, &mut rng)?;
            }
            let x = prepare_inputs(model, &x)?;
            let last_good: Vec<Tensor<T>> = model
                .parameters()
                .into_iter()
                .map(|(_, t)| t.clone())
                .collect();

            let mut tape = Tape::new();
            let params = model.bind(&mut tape);
            let xv = tape.leaf(x);
            let logits = model.forward_train(&mut tape, xv, &params)?;
            let loss = tape.multi_margin(logits, &labels, margin_t)?;
            let loss_value = tape.scalar_value(loss).to_f64_lossy();
            if !loss_value.is_finite() {
                for ((_, slot), good) in model.parameters_mut().into_iter().zip(last_good) {
                    *slot = good;
                }
                return Err(UgnnError::NonFinite(format!(
                    "training loss at epoch {epoch}, step {step}; parameters restored to the last good step"
                )));
            }
            let lv = tape.value(logits);
            for (b, &y) in labels.iter().enumerate() {
                let m = margin(lv.row(b))?;
                if m.label == y {
                    hits += 1;
                    radius += m.value.to_f64_lossy();
                }
            }
            loss_sum += loss_value * labels.len() as f64;

            let grads = tape.backward(loss, Tensor::scalar(T::one()))?;
            let grads: Vec<Tensor<T>> = params
                .iter()
                .map(|&p| grads.wrt(p))
                .collect::<Result<_>>()?;
            drop(tape);
            adam.step(&mut model.parameters_mut(), &grads, lr)?;
            step += 1;
            observer(
                &StepInfo {
                    epoch,
                    step,
                    loss: loss_value,
                    lr,
                },
                model,
            );
        }
        history.epochs.push(EpochStats {
            epoch,
            lr,
            loss: loss_sum / n as f64,
            accuracy: hits as f64 / n as f64,
            mean_margin: radius / n as f64,
        });
    }
    model.freeze()?;
    let invariants = projection_invariants(model)?;
    Ok(TrainOutcome {
        history,
        invariants,
        steps: step,
    })
}

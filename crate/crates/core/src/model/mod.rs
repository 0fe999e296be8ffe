//! The assembled unitary-gradient network.

mod classifier;

pub use classifier::{margin, Classifier, Margin};

use crate::error::{Result, UgnnError};
use crate::layers::{
    bjorck_project_tape, Activation, CayleyConv, GnpMaxPool, OrthoLinear, PixelUnshuffle, TapeLayer,
};
use crate::scalar::{c, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::{seeded_rng, Tensor};
use crate::upd::{UpdHead, UpdKind};

pub const DEPTH: usize = 5;
pub const KERNEL_SIZE: usize = 3;

/// Per-channel standardization applied to data before it enters a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// The usual CIFAR-10 channel statistics.
    pub fn cifar10() -> Self {
        Self {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }

    /// `(x − mean_c)/std_c` on `[B, C, ...]` or an unbatched `[C, ...]` tensor
    /// (`channel_axis` selects which).
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>, channel_axis: usize) -> Result<Tensor<T>> {
        let s = x.shape();
        if channel_axis >= s.len()
            || s[channel_axis] != self.mean.len()
            || self.std.len() != self.mean.len()
        {
            return Err(UgnnError::InvalidShape {
                shape: s.to_vec(),
                reason: format!("normalization has {} channels", self.mean.len()),
            });
        }
        let ch = s[channel_axis];
        let inner: usize = s[channel_axis + 1..].iter().product();
        let mut out = x.clone();
        for (k, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let ci = k % ch;
            let (m, sd) = (c::<T>(self.mean[ci]), c::<T>(self.std[ci]));
            chunk.iter_mut().for_each(|v| *v = (*v - m) / sd);
        }
        Ok(out)
    }
}

/// Configuration of the convolutional network.
#[derive(Debug, Clone, PartialEq)]
pub struct UgnnConfig {
    /// Input height and width; a multiple of 32.
    pub input_size: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub activation: Activation,
    pub head: UpdKind,
    pub normalization: Option<Normalization>,
    pub seed: u64,
}

impl UgnnConfig {
    pub fn new(input_size: usize, in_channels: usize, classes: usize) -> Self {
        Self {
            input_size,
            in_channels,
            classes,
            activation: Activation::MaxMin,
            head: UpdKind::Bounded,
            normalization: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(1 << DEPTH) {
            return Err(UgnnError::Config(format!(
                "input_size {} is not a positive multiple of 32",
                self.input_size
            )));
        }
        if !matches!(self.in_channels, 1 | 3) {
            return Err(UgnnError::Config(format!(
                "in_channels {} not in {{1, 3}}",
                self.in_channels
            )));
        }
        if self.classes < 2 {
            return Err(UgnnError::Config(format!("classes {} < 2", self.classes)));
        }
        if let Some(n) = &self.normalization {
            if n.mean.len() != self.in_channels || n.std.len() != self.in_channels {
                return Err(UgnnError::Config(
                    "normalization channel count differs from in_channels".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Configuration of the fully-connected variant.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    /// `dims[0]` is the input width; each further entry adds an orthogonal
    /// layer plus activation.
    pub dims: Vec<usize>,
    pub classes: usize,
    pub activation: Activation,
    pub head: UpdKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Conv(UgnnConfig),
    Mlp(MlpConfig),
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(CayleyConv<T>),
    Linear(OrthoLinear<T>),
    Act(Activation),
    Unshuffle(PixelUnshuffle),
    Pool(GnpMaxPool),
    Flatten,
}

impl<T: Scalar> Layer<T> {
    pub fn describe(&self) -> String {
        match self {
            Layer::Conv(c) => format!("CayleyConv({}ch, {}×{})", c.channels(), c.height, c.width),
            Layer::Linear(l) => format!("OrthoLinear({}→{})", l.in_features(), l.out_features()),
            Layer::Act(a) => format!("Activation({})", a.name()),
            Layer::Unshuffle(p) => format!("PixelUnshuffle({})", p.factor),
            Layer::Pool(p) => format!("MaxPool({}×{})", p.window.0, p.window.1),
            Layer::Flatten => "Flatten".into(),
        }
    }

    fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        match self {
            Layer::Linear(l) => vec![l.out_features()],
            Layer::Unshuffle(p) => vec![
                input[0] * p.factor * p.factor,
                input[1] / p.factor,
                input[2] / p.factor,
            ],
            Layer::Pool(p) => vec![input[0], input[1] / p.window.0, input[2] / p.window.1],
            Layer::Flatten => vec![input.iter().product()],
            Layer::Conv(_) | Layer::Act(_) => input.to_vec(),
        }
    }

    /// Frozen forward on a batched input.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Layer::Conv(l) => l.forward(tape, x),
            Layer::Linear(l) => l.forward(tape, x),
            Layer::Act(a) => a.apply(tape, x),
            Layer::Unshuffle(p) => p.forward(tape, x),
            Layer::Pool(p) => p.forward(tape, x),
            Layer::Flatten => {
                let s = tape.value(x).shape();
                let b = s[0];
                let rest = s[1..].iter().product::<usize>();
                tape.reshape(x, &[b, rest])
            }
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Layer::Conv(_) | Layer::Linear(_) => 2,
            _ => 0,
        }
    }
}

/// Report of [`UgnnModel::certify`].
#[derive(Debug, Clone)]
pub struct CertificationReport<T> {
    pub label: usize,
    pub runner_up: usize,
    pub margin: T,
    /// Certified ℓ₂ radius in the model's input space; equals the margin.
    pub radius: T,
    pub eps: T,
    pub robust: bool,
    /// `x − M ∇(f_l − f_s)(x)`; absent when the top two logits tie.
    pub adversarial: Option<Tensor<T>>,
    /// `|f_l − f_s|` at the adversarial candidate.
    pub adversarial_gap: Option<T>,
}

/// Closed-form boundary candidate.
#[derive(Debug, Clone)]
pub struct Adversarial<T> {
    pub point: Tensor<T>,
    pub margin: Margin<T>,
    pub gradient_norm: T,
    /// `|f_l(x̃) − f_s(x̃)|`.
    pub residual_gap: T,
}

#[derive(Debug, Clone)]
pub struct UgnnModel<T> {
    pub architecture: Architecture,
    pub layers: Vec<Layer<T>>,
    pub head: UpdHead<T>,
    input_shape: Vec<usize>,
    frozen: bool,
}

impl<T: Scalar> UgnnModel<T> {
    /// Convolutional network: five blocks of two Cayley convolutions with
    /// activations followed by a 2× unshuffle (the last block max-pools to
    /// 2×2 first), then two orthogonal dense layers and a UPD head.
    pub fn build(config: &UgnnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed);
        let mut layers = Vec::new();
        let (mut ch, mut size) = (config.in_channels, config.input_size);
        for block in 0..DEPTH {
            let act = config.activation.for_width(ch);
            for _ in 0..2 {
                layers.push(Layer::Conv(CayleyConv::new(
                    ch,
                    KERNEL_SIZE,
                    size,
                    size,
                    &mut rng,
                )?));
                layers.push(Layer::Act(act));
            }
            if block == DEPTH - 1 && size > 2 {
                layers.push(Layer::Pool(GnpMaxPool::new(size / 2, size / 2)?));
                size = 2;
            }
            layers.push(Layer::Unshuffle(PixelUnshuffle::new(2)?));
            ch *= 4;
            size /= 2;
        }
        layers.push(Layer::Flatten);
        let mut features = ch * size * size;
        for width in [1024, 512] {
            layers.push(Layer::Linear(OrthoLinear::new(features, width, &mut rng)?));
            layers.push(Layer::Act(config.activation.for_width(width)));
            features = width;
        }
        let head = UpdHead::new(config.head, features, config.classes, &mut rng)?;
        let input_shape = vec![config.in_channels, config.input_size, config.input_size];
        Ok(Self::assemble(
            Architecture::Conv(config.clone()),
            layers,
            head,
            input_shape,
        ))
    }

    /// Fully-connected variant. `dims = [n]` gives an affine model.
    pub fn build_mlp(config: &MlpConfig) -> Result<Self> {
        let dims = &config.dims;
        if dims.is_empty() || dims.contains(&0) {
            return Err(UgnnError::Config(
                "dims must be non-empty and positive".into(),
            ));
        }
        let mut rng = seeded_rng(config.seed);
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            if w[1] > w[0] {
                return Err(UgnnError::Config(format!(
                    "width increase {}→{} breaks gradient-norm preservation",
                    w[0], w[1]
                )));
            }
            layers.push(Layer::Linear(OrthoLinear::new(w[0], w[1], &mut rng)?));
            layers.push(Layer::Act(config.activation.for_width(w[1])));
        }
        let features = *dims.last().expect("non-empty");
        let head = UpdHead::new(config.head, features, config.classes, &mut rng)?;
        Ok(Self::assemble(
            Architecture::Mlp(config.clone()),
            layers,
            head,
            vec![dims[0]],
        ))
    }

    fn assemble(
        architecture: Architecture,
        layers: Vec<Layer<T>>,
        head: UpdHead<T>,
        input_shape: Vec<usize>,
    ) -> Self {
        Self {
            architecture,
            layers,
            head,
            input_shape,
            frozen: false,
        }
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        match &self.architecture {
            Architecture::Conv(c) => c.normalization.as_ref(),
            Architecture::Mlp(_) => None,
        }
    }

    /// Unbatched input shape of every layer, plus the head's.
    pub fn layer_input_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![self.input_shape.clone()];
        for l in &self.layers {
            let next = l.output_shape(shapes.last().expect("non-empty"));
            shapes.push(next);
        }
        shapes
    }

    // ---- parameters ----

    /// Named raw parameters in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv(c) => {
                    out.push((format!("layers.{i}.kernel"), &c.kernel));
                    out.push((format!("layers.{i}.bias"), &c.bias));
                }
                Layer::Linear(o) => {
                    out.push((format!("layers.{i}.weight"), &o.weight));
                    out.push((format!("layers.{i}.bias"), &o.bias));
                }
                _ => {}
            }
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable raw parameters in [`parameters`](Self::parameters) order.
    /// Unfreezes the model.
    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.unfreeze();
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            match l {
                Layer::Conv(c) => {
                    out.push((format!("layers.{i}.kernel"), &mut c.kernel));
                    out.push((format!("layers.{i}.bias"), &mut c.bias));
                }
                Layer::Linear(o) => {
                    out.push((format!("layers.{i}.weight"), &mut o.weight));
                    out.push((format!("layers.{i}.bias"), &mut o.bias));
                }
                _ => {}
            }
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    /// Record every raw parameter as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect()
    }

    // ---- projection state ----

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Cache high-iteration projections of every parameterized layer.
    pub fn freeze(&mut self) -> Result<()> {
        for l in &mut self.layers {
            match l {
                Layer::Conv(c) => c.freeze()?,
                Layer::Linear(o) => o.freeze()?,
                _ => {}
            }
        }
        self.head.freeze()?;
        self.frozen = true;
        Ok(())
    }

    pub fn unfreeze(&mut self) {
        for l in &mut self.layers {
            match l {
                Layer::Conv(c) => c.invalidate(),
                Layer::Linear(o) => o.invalidate(),
                _ => {}
            }
        }
        self.head.invalidate();
        self.frozen = false;
    }

    fn require_frozen(&self) -> Result<()> {
        if self.frozen {
            Ok(())
        } else {
            Err(UgnnError::NotFrozen)
        }
    }

    // ---- forward passes ----

    /// Training-mode forward: projections are recomputed on the tape from the
    /// raw parameters bound by [`bind`](Self::bind).
    pub fn forward_train(&self, tape: &mut Tape<T>, x: Var, params: &[Var]) -> Result<Var> {
        let expected = self.layers.iter().map(|l| l.param_count()).sum::<usize>() + 2;
        if params.len() != expected {
            return Err(UgnnError::Config(format!(
                "expected {expected} bound parameters, got {}",
                params.len()
            )));
        }
        self.check_batch(tape.value(x))?;
        let mut h = x;
        let mut p = 0;
        for l in &self.layers {
            h = match l {
                Layer::Conv(conv) => {
                    let y = conv.apply(tape, h, params[p], params[p + 1])?;
                    p += 2;
                    y
                }
                Layer::Linear(lin) => {
                    let w = bjorck_project_tape(tape, params[p], lin.train_iters)?;
                    let y = OrthoLinear::apply(tape, h, w, params[p + 1])?;
                    p += 2;
                    y
                }
                other => other.forward(tape, h)?,
            };
        }
        let w = self.head.effective_weight(tape, params[p])?;
        UpdHead::apply(tape, h, w, params[p + 1])
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<()> {
        if x.ndim() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(UgnnError::InvalidShape {
                shape: x.shape().to_vec(),
                reason: format!("expected [B, {:?}]", self.input_shape),
            });
        }
        Ok(())
    }

    /// Logits of one unbatched input.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        self.logit_vector(x)
    }

    /// Output of layer `index` on a batched input (frozen path).
    pub fn layer_forward(&self, index: usize, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.require_frozen()?;
        match self.layers.get(index) {
            Some(l) => l.forward(tape, x),
            None if index == self.layers.len() => self.head.forward(tape, x),
            None => Err(UgnnError::Config(format!("no layer {index}"))),
        }
    }

    // ---- certification ----

    pub fn certify(&self, x: &Tensor<T>, eps: T) -> Result<CertificationReport<T>> {
        let m = margin(&self.forward(x)?)?;
        let robust = m.value > T::zero() && m.value >= eps;
        let adv = match self.closest_adversarial(x) {
            Ok(a) => Some(a),
            Err(UgnnError::Tie(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(CertificationReport {
            label: m.label,
            runner_up: m.runner_up,
            margin: m.value,
            radius: m.value,
            eps,
            robust,
            adversarial_gap: adv.as_ref().map(|a| a.residual_gap),
            adversarial: adv.map(|a| a.point),
        })
    }

    /// `x̃ = x − M ∇(f_l − f_s)(x)`.
    pub fn closest_adversarial(&self, x: &Tensor<T>) -> Result<Adversarial<T>> {
        let m = margin(&self.forward(x)?)?;
        if m.value == T::zero() {
            return Err(UgnnError::Tie(format!(
                "classes {} and {} tie; the boundary direction is undefined",
                m.label, m.runner_up
            )));
        }
        let g = self.pair_gradient(x, m.label, m.runner_up)?;
        let xs = self.batched(x)?.reshape(&self.input_shape)?;
        let point = xs.zip_map(&g, "closest_adversarial", |a, b| a - m.value * b)?;
        let at = self.forward(&point)?;
        Ok(Adversarial {
            gradient_norm: g.norm(),
            residual_gap: (at[m.label] - at[m.runner_up]).abs(),
            point,
            margin: m,
        })
    }
}

impl<T: Scalar> Classifier<T> for UgnnModel<T> {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn num_classes(&self) -> usize {
        self.classes()
    }

    fn logits_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.require_frozen()?;
        self.check_batch(tape.value(x))?;
        let mut h = x;
        for l in &self.layers {
            h = l.forward(tape, h)?;
        }
        self.head.forward(tape, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(dims: &[usize], head: UpdKind) -> UgnnModel<f64> {
        UgnnModel::build_mlp(&MlpConfig {
            dims: dims.to_vec(),
            classes: 2,
            activation: Activation::MaxMin,
            head,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(UgnnConfig::new(48, 3, 10).validate().is_err());
        assert!(UgnnConfig::new(32, 2, 10).validate().is_err());
        assert!(UgnnConfig::new(64, 1, 10).validate().is_ok());
    }

    #[test]
    fn conv_shapes_follow_the_block_rule() {
        let m = UgnnModel::<f64>::build(&UgnnConfig::new(32, 3, 10)).unwrap();
        let shapes = m.layer_input_shapes();
        assert_eq!(shapes.last().unwrap(), &vec![512]);
        assert!(!m.layers.iter().any(|l| matches!(l, Layer::Pool(_))));
        // inputs of the Flatten layer
        let flat = m
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Flatten))
            .unwrap();
        assert_eq!(shapes[flat], vec![3072, 1, 1]);
        assert_eq!(m.head.in_features(), 512);
        assert_eq!(m.classes(), 10);

        let m64 = UgnnModel::<f64>::build(&UgnnConfig::new(64, 1, 4)).unwrap();
        let pool = m64
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Pool(_)))
            .unwrap();
        assert_eq!(m64.layer_input_shapes()[pool], vec![256, 4, 4]);
        match &m64.layers[pool] {
            Layer::Pool(p) => assert_eq!(p.window, (2, 2)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn first_block_uses_abs_on_odd_channels() {
        let mut cfg = UgnnConfig::new(32, 3, 3);
        cfg.activation = Activation::Oplu;
        let m = UgnnModel::<f64>::build(&cfg).unwrap();
        let acts: Vec<_> = m
            .layers
            .iter()
            .filter_map(|l| {
                if let Layer::Act(a) = l {
                    Some(*a)
                } else {
                    None
                }
            })
            .collect();
        assert_eq!(&acts[..2], &[Activation::Abs, Activation::Abs]);
        assert!(acts[2..].iter().all(|&a| a == Activation::Oplu));
    }

    #[test]
    fn mlp_validation() {
        assert!(UgnnModel::<f64>::build_mlp(&MlpConfig {
            dims: vec![2, 4],
            classes: 2,
            activation: Activation::MaxMin,
            head: UpdKind::Bounded,
            seed: 0
        })
        .is_err());
        let m = toy(&[2, 2, 2], UpdKind::Bounded);
        assert_eq!(m.layers.len(), 4);
    }

    #[test]
    fn zero_input_gives_head_bias() {
        let mut m = toy(&[4, 4, 2], UpdKind::Bounded);
        m.head.bias = Tensor::from_vec(vec![0.25, -0.5]);
        m.freeze().unwrap();
        assert_eq!(m.forward(&Tensor::zeros(&[4])).unwrap(), vec![0.25, -0.5]);
    }

    #[test]
    fn inference_requires_freeze_and_is_repeatable() {
        let mut m = toy(&[3, 3, 2], UpdKind::Bounded);
        let x = Tensor::from_vec(vec![0.3, -0.2, 0.9]);
        assert!(matches!(m.forward(&x), Err(UgnnError::NotFrozen)));
        m.freeze().unwrap();
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn affine_model_is_an_exact_sdc() {
        let mut m = toy(&[3], UpdKind::Bounded);
        m.head.bias = Tensor::from_vec(vec![0.1, -0.3]);
        m.freeze().unwrap();
        let x = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let adv = m.closest_adversarial(&x).unwrap();
        assert!(adv.residual_gap <= 1e-12);
        assert!((adv.gradient_norm - 1.0).abs() <= 1e-12);
        let dist = adv.point.sub(&x).unwrap().norm();
        assert!((dist - adv.margin.value).abs() <= 1e-12);
    }

    #[test]
    fn certify_examples() {
        let mut m = toy(&[2], UpdKind::Bounded);
        m.freeze().unwrap();
        let w = m.head.projected().unwrap().clone();
        // place x so that the gap is 1.5 along the unit difference direction
        let d: Vec<f64> = (0..2).map(|k| w.get2(0, k) - w.get2(1, k)).collect();
        let x = Tensor::from_vec(vec![1.5 * d[0], 1.5 * d[1]]);
        let r = m.certify(&x, 0.5).unwrap();
        assert!((r.margin - 1.5).abs() < 1e-9 && r.robust);
        assert_eq!(r.radius, r.margin);
        let tie = m.certify(&Tensor::zeros(&[2]), 1e-9).unwrap();
        assert_eq!(tie.margin, 0.0);
        assert!(!tie.robust && tie.adversarial.is_none());
        assert!(matches!(
            m.closest_adversarial(&Tensor::zeros(&[2])),
            Err(UgnnError::Tie(_))
        ));
    }

    #[test]
    fn normalization_per_channel() {
        let n = Normalization {
            mean: vec![1.0, 2.0],
            std: vec![2.0, 4.0],
        };
        let x = Tensor::<f64>::new(&[2, 1, 2], vec![3.0, 5.0, 6.0, 10.0]).unwrap();
        assert_eq!(n.apply(&x, 0).unwrap().data(), &[1.0, 2.0, 1.0, 2.0]);
        assert!(n.apply(&Tensor::<f64>::zeros(&[3, 2]), 0).is_err());
    }
}

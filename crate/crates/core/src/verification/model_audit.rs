//! Whole-model invariant audit.

use rand::Rng;

use crate::error::Result;
use crate::model::{Layer, UgnnModel};
use crate::scalar::{DType, Scalar};
use crate::tape::{Tape, Var};
use crate::upd::{pair_norm_deviation, UpdKind};

use super::gradcheck::{check_unitary_gradient, GradCheckReport, InputDistribution};
use super::jacobian::{check_gnp, field_unitarity_deviation, GnpMethod};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub trials: usize,
    /// Layers with more outputs are checked with random probes.
    pub jacobian_limit: usize,
    pub probes: usize,
    pub ug_samples: usize,
    pub ug_batch: usize,
    pub fd_samples: usize,
    pub distribution: InputDistribution,
    pub gnp_tol: f64,
    pub ug_tol: f64,
    pub upd_tol: f64,
}

impl VerifyOptions {
    pub fn for_dtype(dtype: DType) -> Self {
        let (gnp_tol, ug_tol) = match dtype {
            DType::F64 => (1e-6, 1e-5),
            DType::F32 => (1e-3, 1e-3),
        };
        Self {
            trials: 2,
            jacobian_limit: 1024,
            probes: 32,
            ug_samples: 64,
            ug_batch: 32,
            fd_samples: 4,
            distribution: InputDistribution::Gaussian { std: 1.0 },
            gnp_tol,
            ug_tol,
            upd_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAudit {
    pub index: usize,
    pub description: String,
    pub deviation: f64,
    pub method: GnpMethod,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub layers: Vec<LayerAudit>,
    pub upd_deviation: f64,
    /// `max |‖W_h‖ − 1/√2|` for bounded heads.
    pub upd_row_deviation: Option<f64>,
    pub unitary: GradCheckReport,
    pub options: VerifyOptions,
}

impl VerifyReport {
    pub fn upd_pass(&self) -> bool {
        self.upd_deviation <= self.options.upd_tol
            && self.upd_row_deviation.is_none_or(|d| d <= 1e-6)
    }

    pub fn unitary_pass(&self) -> bool {
        self.unitary.worst_deviation() <= self.options.ug_tol
    }

    pub fn pass(&self) -> bool {
        self.layers.iter().all(|l| l.pass) && self.upd_pass() && self.unitary_pass()
    }
}

/// GNP deviation of every non-trivial layer of a frozen model.
pub fn audit_layers<T: Scalar, R: Rng + ?Sized>(
    model: &UgnnModel<T>,
    opts: &VerifyOptions,
    rng: &mut R,
) -> Result<Vec<LayerAudit>> {
    let shapes = model.layer_input_shapes();
    let mut out = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        if matches!(layer, Layer::Flatten) {
            continue;
        }
        let out_len: usize = shapes[i + 1].iter().product();
        let (deviation, method) = match layer {
            Layer::Conv(c) if out_len > opts.jacobian_limit => {
                let field = c.field().ok_or(crate::error::UgnnError::NotFrozen)?;
                (
                    field_unitarity_deviation(field).to_f64_lossy(),
                    GnpMethod::Spectral,
                )
            }
            _ => {
                let f = |t: &mut Tape<T>, x: Var| model.layer_forward(i, t, x);
                let r = check_gnp(
                    &f,
                    &shapes[i],
                    opts.trials,
                    opts.jacobian_limit,
                    opts.probes,
                    rng,
                )?;
                (r.max_deviation.to_f64_lossy(), r.method)
            }
        };
        out.push(LayerAudit {
            index: i,
            description: layer.describe(),
            deviation,
            method,
            pass: deviation <= opts.gnp_tol,
        });
    }
    Ok(out)
}

/// Layer GNP audit, UPD head audit and unit-gradient audit.
pub fn verify_model<T: Scalar, R: Rng + ?Sized>(
    model: &UgnnModel<T>,
    opts: &VerifyOptions,
    rng: &mut R,
) -> Result<VerifyReport> {
    let layers = audit_layers(model, opts, rng)?;
    let w = model
        .head
        .projected()
        .ok_or(crate::error::UgnnError::NotFrozen)?;
    let upd_deviation = pair_norm_deviation(w).to_f64_lossy();
    let upd_row_deviation = (model.head.kind == UpdKind::Bounded).then(|| {
        (0..w.rows())
            .map(|r| {
                let n = w
                    .row(r)
                    .iter()
                    .map(|&v| v * v)
                    .sum::<T>()
                    .sqrt()
                    .to_f64_lossy();
                (n - std::f64::consts::FRAC_1_SQRT_2).abs()
            })
            .fold(0.0, f64::max)
    });
    let unitary = check_unitary_gradient(
        model,
        opts.ug_samples,
        opts.distribution,
        opts.ug_batch,
        opts.fd_samples,
        rng,
    )?;
    Ok(VerifyReport {
        layers,
        upd_deviation,
        upd_row_deviation,
        unitary,
        options: *opts,
    })
}

//! Aggregate reports over labeled samples.

use rand::Rng;

use crate::error::{Result, UgnnError};
use crate::model::{margin, Classifier};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

use super::oracle::MapEstimate;

#[derive(Debug, Clone, PartialEq)]
pub struct LbMapRow {
    pub sample_id: usize,
    pub label: usize,
    pub pred: usize,
    pub margin: f64,
    pub map: f64,
    /// `margin / map`; only meaningful when `correct && converged`.
    pub ratio: f64,
    pub converged: bool,
}

impl LbMapRow {
    pub fn counted(&self) -> bool {
        self.converged && self.label == self.pred
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbMapReport {
    pub rows: Vec<LbMapRow>,
    pub mean: f64,
    pub std: f64,
    /// Correctly classified, oracle-converged samples.
    pub count: usize,
}

impl LbMapReport {
    pub const CSV_HEADER: &'static str = "sample_id,margin,map,ratio,converged";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{}\n",
                r.sample_id,
                r.margin,
                r.map,
                r.ratio,
                u8::from(r.counted())
            ));
        }
        s
    }
}

/// Certified margin versus oracle MAP for every sample. `inputs` is a batch
/// `[N, input_shape...]`.
pub fn lb_map_report<T, C, O>(
    clf: &C,
    inputs: &Tensor<T>,
    labels: &[usize],
    mut oracle: O,
) -> Result<LbMapReport>
where
    T: Scalar,
    C: Classifier<T> + ?Sized,
    O: FnMut(&Tensor<T>) -> Result<MapEstimate<T>>,
{
    let n_in = clf.input_len();
    let mut rows = Vec::with_capacity(labels.len());
    for (id, &label) in labels.iter().enumerate() {
        let x = Tensor::new(
            clf.input_shape(),
            inputs.data()[id * n_in..(id + 1) * n_in].to_vec(),
        )?;
        let m = margin(&clf.logit_vector(&x)?)?;
        let est = oracle(&x)?;
        let (mv, map) = (m.value.to_f64_lossy(), est.distance.to_f64_lossy());
        rows.push(LbMapRow {
            sample_id: id,
            label,
            pred: m.label,
            margin: mv,
            map,
            ratio: if map > 0.0 { mv / map } else { f64::NAN },
            converged: est.converged,
        });
    }
    let ratios: Vec<f64> = rows
        .iter()
        .filter(|r| r.counted())
        .map(|r| r.ratio)
        .collect();
    if ratios.is_empty() {
        return Err(UgnnError::Oracle(
            "no correctly classified sample converged".into(),
        ));
    }
    let (mean, std) = mean_std(&ratios);
    Ok(LbMapReport {
        count: ratios.len(),
        rows,
        mean,
        std,
    })
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub eps: f64,
    /// Fraction of samples correctly classified with margin ≥ ε.
    pub certified_accuracy: f64,
}

/// Margin and prediction of every sample of a batch.
pub fn margins<T: Scalar, C: Classifier<T> + ?Sized>(
    clf: &C,
    inputs: &Tensor<T>,
    batch: usize,
) -> Result<Vec<crate::model::Margin<T>>> {
    let n = inputs.shape()[0];
    let n_in = clf.input_len();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let b = batch.max(1).min(n - start);
        let shape = [&[b], clf.input_shape()].concat();
        let xb = Tensor::new(
            &shape,
            inputs.data()[start * n_in..(start + b) * n_in].to_vec(),
        )?;
        let logits = clf.logits(&xb)?;
        for i in 0..b {
            out.push(margin(logits.row(i))?);
        }
        start += b;
    }
    Ok(out)
}

/// Certified accuracy at each ε.
pub fn robustness_curve<T: Scalar>(
    margins: &[crate::model::Margin<T>],
    labels: &[usize],
    eps_list: &[f64],
) -> Vec<CurvePoint> {
    let n = labels.len().max(1) as f64;
    eps_list
        .iter()
        .map(|&eps| {
            let hits = margins
                .iter()
                .zip(labels)
                .filter(|(m, &y)| m.label == y && m.value.to_f64_lossy() >= eps)
                .count();
            CurvePoint {
                eps,
                certified_accuracy: hits as f64 / n,
            }
        })
        .collect()
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("eps,certified_accuracy\n");
    for p in points {
        s.push_str(&format!("{:.9},{:.9}\n", p.eps, p.certified_accuracy));
    }
    s
}

/// Among samples whose lower bound does not certify them at `eps`
/// (`margin ≤ ε`), the fraction whose oracle MAP is also `≤ ε`. `None` when
/// no sample qualifies.
pub fn recall(margins: &[f64], maps: &[f64], eps: f64) -> Option<f64> {
    let (mut tp, mut total) = (0usize, 0usize);
    for (&m, &d) in margins.iter().zip(maps) {
        if m <= eps {
            total += 1;
            if d <= eps {
                tp += 1;
            }
        }
    }
    (total > 0).then(|| tp as f64 / total as f64)
}

/// Count of `trials` random perturbations of norm `radius` that leave the
/// prediction at `x` unchanged.
pub fn perturbation_probe<T: Scalar, C: Classifier<T> + ?Sized, R: Rng + ?Sized>(
    clf: &C,
    x: &Tensor<T>,
    radius: f64,
    trials: usize,
    rng: &mut R,
) -> Result<usize> {
    let x = clf.batched(x)?;
    let n_in = clf.input_len();
    let label = margin(&clf.logits(&x)?.into_data())?.label;
    let mut data = Vec::with_capacity(trials * n_in);
    for _ in 0..trials {
        let d = Tensor::<T>::randn(&[n_in], 1.0, rng);
        let d = d.scale(c::<T>(radius) / d.norm());
        data.extend(x.data().iter().zip(d.data()).map(|(&a, &b)| a + b));
    }
    let batch = Tensor::new(&[&[trials], clf.input_shape()].concat(), data)?;
    let logits = clf.logits(&batch)?;
    let mut kept = 0;
    for i in 0..trials {
        if margin(logits.row(i))?.label == label {
            kept += 1;
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Margin;

    #[test]
    fn curve_at_zero_is_accuracy_and_monotone() {
        let ms: Vec<Margin<f64>> = [(0, 0.5), (1, 0.0), (1, 2.0), (0, 1.0)]
            .iter()
            .map(|&(label, value)| Margin {
                label,
                runner_up: 1 - label,
                value,
            })
            .collect();
        let labels = [0, 1, 0, 0];
        let c = robustness_curve(&ms, &labels, &[0.0, 0.5, 0.75, 1.0, 3.0]);
        assert_eq!(c[0].certified_accuracy, 0.75);
        assert!(c
            .windows(2)
            .all(|w| w[1].certified_accuracy <= w[0].certified_accuracy));
        assert_eq!(c[4].certified_accuracy, 0.0);
    }

    #[test]
    fn recall_counts_uncertified_points() {
        let r = recall(&[0.1, 0.2, 0.9], &[0.15, 0.6, 1.0], 0.3).unwrap();
        assert_eq!(r, 0.5);
        assert!(recall(&[1.0], &[1.0], 0.3).is_none());
    }
}

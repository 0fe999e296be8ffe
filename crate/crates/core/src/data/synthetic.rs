//! Reproducible two-dimensional toy problems.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Result, UgnnError};
use crate::scalar::{c, Scalar};
use crate::tensor::{seeded_rng, Tensor};

/// Isotropic Gaussian blobs with centers on a circle, adjacent centers `sep`
/// apart (two classes sit at `(±sep/2, 0)`).
#[derive(Debug, Clone, PartialEq)]
pub struct BlobsParams {
    pub count: usize,
    pub classes: usize,
    pub sep: f64,
    /// Per-coordinate standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for BlobsParams {
    fn default() -> Self {
        Self {
            count: 1000,
            classes: 2,
            sep: 4.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Points with radius uniform in `[0, max_radius]`; label 0 outside the unit
/// circle, label 1 inside.
#[derive(Debug, Clone, PartialEq)]
pub struct RingParams {
    pub count: usize,
    pub max_radius: f64,
    /// Radii within `gap` of 1 are resampled.
    pub gap: f64,
    pub seed: u64,
}

impl Default for RingParams {
    fn default() -> Self {
        Self {
            count: 1000,
            max_radius: 2.0,
            gap: 0.0,
            seed: 0,
        }
    }
}

/// Two interleaving half circles.
#[derive(Debug, Clone, PartialEq)]
pub struct MoonsParams {
    pub count: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for MoonsParams {
    fn default() -> Self {
        Self {
            count: 1000,
            noise: 0.1,
            seed: 0,
        }
    }
}

fn check_count(count: usize) -> Result<()> {
    if count < 2 {
        return Err(UgnnError::Dataset(format!("count {count} < 2")));
    }
    Ok(())
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(UgnnError::Dataset(format!(
            "{name} must be finite and non-negative, got {v}"
        )));
    }
    Ok(())
}

fn finish<T: Scalar>(
    points: Vec<[f64; 2]>,
    labels: Vec<usize>,
    classes: usize,
) -> Result<Dataset<T>> {
    let n = points.len();
    let data = points
        .iter()
        .flat_map(|p| p.iter().map(|&v| c::<T>(v)))
        .collect();
    Dataset::new(Tensor::new(&[n, 2], data)?, labels, classes)
}

pub fn gen_blobs2d<T: Scalar>(p: &BlobsParams) -> Result<Dataset<T>> {
    check_count(p.count)?;
    check_nonneg("sep", p.sep)?;
    check_nonneg("noise", p.noise)?;
    if p.classes < 2 {
        return Err(UgnnError::Dataset(format!("classes {} < 2", p.classes)));
    }
    // Chord length between adjacent centers on a circle of radius R is
    // 2R sin(π/k); for k = 2 this puts the centers at ±sep/2.
    let radius = p.sep / (2.0 * (PI / p.classes as f64).sin());
    let mut rng = seeded_rng(p.seed);
    let mut points = Vec::with_capacity(p.count);
    let mut labels = Vec::with_capacity(p.count);
    for i in 0..p.count {
        let k = i % p.classes;
        let theta = PI + 2.0 * PI * k as f64 / p.classes as f64;
        let (gx, gy): (f64, f64) = (
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        );
        points.push([
            radius * theta.cos() + p.noise * gx,
            radius * theta.sin() + p.noise * gy,
        ]);
        labels.push(k);
    }
    finish(points, labels, p.classes)
}

pub fn gen_ring2d<T: Scalar>(p: &RingParams) -> Result<Dataset<T>> {
    check_count(p.count)?;
    check_nonneg("gap", p.gap)?;
    if !(p.max_radius.is_finite() && p.max_radius > 1.0 + p.gap) {
        return Err(UgnnError::Dataset(format!(
            "radius {} must exceed 1 + gap so both classes occur",
            p.max_radius
        )));
    }
    if p.gap >= 1.0 {
        return Err(UgnnError::Dataset(format!(
            "gap {} leaves no inside points",
            p.gap
        )));
    }
    let mut rng = seeded_rng(p.seed);
    let mut points = Vec::with_capacity(p.count);
    let mut labels = Vec::with_capacity(p.count);
    while points.len() < p.count {
        let r = rng.random::<f64>() * p.max_radius;
        if (r - 1.0).abs() < p.gap {
            continue;
        }
        let a = rng.random::<f64>() * 2.0 * PI;
        points.push([r * a.cos(), r * a.sin()]);
        labels.push(usize::from(r <= 1.0));
    }
    finish(points, labels, 2)
}

pub fn gen_moons2d<T: Scalar>(p: &MoonsParams) -> Result<Dataset<T>> {
    check_count(p.count)?;
    check_nonneg("noise", p.noise)?;
    let mut rng = seeded_rng(p.seed);
    let mut points = Vec::with_capacity(p.count);
    let mut labels = Vec::with_capacity(p.count);
    for i in 0..p.count {
        let k = i % 2;
        let t = rng.random::<f64>() * PI;
        let base = if k == 0 {
            [t.cos(), t.sin()]
        } else {
            [1.0 - t.cos(), 0.5 - t.sin()]
        };
        let (gx, gy): (f64, f64) = (
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        );
        points.push([base[0] + p.noise * gx, base[1] + p.noise * gy]);
        labels.push(k);
    }
    finish(points, labels, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Classifier;
    use crate::verification::RingClassifier;

    #[test]
    fn blobs_are_centered_at_half_separation() {
        let d: Dataset<f64> = gen_blobs2d(&BlobsParams {
            count: 4000,
            sep: 6.0,
            ..BlobsParams::default()
        })
        .unwrap();
        let mut mean = [[0.0; 2]; 2];
        for i in 0..d.len() {
            let s = d.sample(i);
            for (m, v) in mean[d.labels[i]].iter_mut().zip(s.data()) {
                *m += v / 2000.0;
            }
        }
        assert!(
            (mean[0][0] + 3.0).abs() < 0.1 && mean[0][1].abs() < 0.1,
            "{mean:?}"
        );
        assert!(
            (mean[1][0] - 3.0).abs() < 0.1 && mean[1][1].abs() < 0.1,
            "{mean:?}"
        );
    }

    #[test]
    fn blobs_multiclass_adjacent_centers_are_sep_apart() {
        let d: Dataset<f64> = gen_blobs2d(&BlobsParams {
            count: 3,
            classes: 3,
            sep: 2.0,
            noise: 0.0,
            seed: 0,
        })
        .unwrap();
        let (a, b) = (d.sample(0), d.sample(1));
        assert!((a.sub(&b).unwrap().norm() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_separation_is_chance_for_a_fixed_rule() {
        let d: Dataset<f64> = gen_blobs2d(&BlobsParams {
            count: 4000,
            sep: 0.0,
            ..BlobsParams::default()
        })
        .unwrap();
        let hits = (0..d.len())
            .filter(|&i| usize::from(d.sample(i).data()[0] > 0.0) == d.labels[i])
            .count();
        let acc = hits as f64 / d.len() as f64;
        assert!((acc - 0.5).abs() < 0.05, "{acc}");
    }

    #[test]
    fn ring_labels_agree_with_the_distance_model() {
        let d: Dataset<f64> = gen_ring2d(&RingParams {
            count: 500,
            gap: 0.05,
            ..RingParams::default()
        })
        .unwrap();
        let ring = RingClassifier::new(2);
        for i in 0..d.len() {
            let x = d.sample(i);
            let r = x.norm();
            assert!(r <= 2.0 && (r - 1.0).abs() >= 0.05);
            let logits = ring.logit_vector(&x).unwrap();
            let pred = usize::from(logits[1] > logits[0]);
            assert_eq!(pred, d.labels[i]);
        }
        assert!(d.labels.contains(&0) && d.labels.contains(&1));
    }

    #[test]
    fn ring_point_outside_has_label_zero() {
        let ring = RingClassifier::new(2);
        let x = Tensor::from_vec(vec![2.0f64, 0.0]);
        let l = ring.logit_vector(&x).unwrap();
        assert!(l[0] > l[1]);
        assert!((l[0] - l[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn moons_are_balanced_and_seeded() {
        let p = MoonsParams {
            count: 101,
            ..MoonsParams::default()
        };
        let a: Dataset<f64> = gen_moons2d(&p).unwrap();
        let b: Dataset<f64> = gen_moons2d(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels.iter().filter(|&&l| l == 0).count(), 51);
        let c: Dataset<f64> = gen_moons2d(&MoonsParams { seed: 1, ..p }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(gen_blobs2d::<f64>(&BlobsParams {
            count: 1,
            ..BlobsParams::default()
        })
        .is_err());
        assert!(gen_blobs2d::<f64>(&BlobsParams {
            classes: 1,
            ..BlobsParams::default()
        })
        .is_err());
        assert!(gen_blobs2d::<f64>(&BlobsParams {
            noise: -1.0,
            ..BlobsParams::default()
        })
        .is_err());
        assert!(gen_ring2d::<f64>(&RingParams {
            max_radius: 0.5,
            ..RingParams::default()
        })
        .is_err());
        assert!(gen_moons2d::<f64>(&MoonsParams {
            noise: f64::NAN,
            ..MoonsParams::default()
        })
        .is_err());
    }
}

//! Audit of the unit-gradient property of pairwise logit differences.

use rand::Rng;

use crate::error::Result;
use crate::model::Classifier;
use crate::scalar::{c, DType, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InputDistribution {
    Gaussian { std: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl InputDistribution {
    pub fn sample<T: Scalar, R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Tensor<T> {
        match *self {
            InputDistribution::Gaussian { std } => Tensor::randn(shape, std, rng),
            InputDistribution::Uniform { lo, hi } => Tensor::rand_uniform(shape, lo, hi, rng),
        }
    }
}

/// Fixed-range histogram with explicit under/overflow bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self {
            lo,
            hi,
            counts: vec![0; bins],
            underflow: 0,
            overflow: 0,
        }
    }

    pub fn add(&mut self, v: f64) {
        if v < self.lo {
            self.underflow += 1;
        } else if v >= self.hi {
            self.overflow += 1;
        } else {
            let bins = self.counts.len();
            let k = ((v - self.lo) / (self.hi - self.lo) * bins as f64) as usize;
            self.counts[k.min(bins - 1)] += 1;
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.underflow + self.overflow
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    pub i: usize,
    pub j: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub samples: usize,
    pub pairs: Vec<PairStats>,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Gradient norms over all samples and pairs, on `[1 − 1e-2, 1 + 1e-2)`.
    pub histogram: Histogram,
    /// Worst `|⟨∇(f_i − f_j), u⟩ − central difference along u|` on the
    /// finite-difference subsample.
    pub fd_max_deviation: f64,
}

impl GradCheckReport {
    /// `max |‖∇(f_i − f_j)‖ − 1|`.
    pub fn worst_deviation(&self) -> f64 {
        (self.max - 1.0).max(1.0 - self.min)
    }
}

/// Gradient norms of every `f_i − f_j`, `i < j`, at `n_samples` inputs drawn
/// from `dist`. The first `fd_samples` inputs also get a directional
/// finite-difference check.
pub fn check_unitary_gradient<T: Scalar, C: Classifier<T> + ?Sized, R: Rng + ?Sized>(
    clf: &C,
    n_samples: usize,
    dist: InputDistribution,
    batch: usize,
    fd_samples: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let classes = clf.num_classes();
    let shape = clf.input_shape().to_vec();
    let n_in = clf.input_len();
    let pairs: Vec<(usize, usize)> = (0..classes)
        .flat_map(|i| (i + 1..classes).map(move |j| (i, j)))
        .collect();
    let mut stats: Vec<PairStats> = pairs
        .iter()
        .map(|&(i, j)| PairStats {
            i,
            j,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            mean: 0.0,
        })
        .collect();
    let mut hist = Histogram::new(0.99, 1.01, 200);
    let mut fd_worst = 0.0f64;
    let mut done = 0;
    while done < n_samples {
        let b = batch.max(1).min(n_samples - done);
        let x: Tensor<T> = dist.sample(&[&[b], &shape[..]].concat(), rng);
        let grads = clf.logit_gradients(&x)?;
        for bi in 0..b {
            for (p, &(i, j)) in pairs.iter().enumerate() {
                let gi = &grads[i].data()[bi * n_in..(bi + 1) * n_in];
                let gj = &grads[j].data()[bi * n_in..(bi + 1) * n_in];
                let n = gi
                    .iter()
                    .zip(gj)
                    .map(|(&a, &b)| {
                        let d = (a - b).to_f64_lossy();
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt();
                let s = &mut stats[p];
                s.min = s.min.min(n);
                s.max = s.max.max(n);
                s.mean += n;
                hist.add(n);
            }
            if done + bi < fd_samples {
                let xi = Tensor::new(&shape, x.data()[bi * n_in..(bi + 1) * n_in].to_vec())?;
                fd_worst = fd_worst.max(directional_fd(clf, &xi, &grads, bi, &pairs, rng)?);
            }
        }
        done += b;
    }
    for s in &mut stats {
        s.mean /= n_samples.max(1) as f64;
    }
    let min = stats.iter().map(|s| s.min).fold(f64::INFINITY, f64::min);
    let max = stats
        .iter()
        .map(|s| s.max)
        .fold(f64::NEG_INFINITY, f64::max);
    let mean = stats.iter().map(|s| s.mean).sum::<f64>() / stats.len().max(1) as f64;
    Ok(GradCheckReport {
        samples: n_samples,
        pairs: stats,
        min,
        max,
        mean,
        histogram: hist,
        fd_max_deviation: fd_worst,
    })
}

fn directional_fd<T: Scalar, C: Classifier<T> + ?Sized, R: Rng + ?Sized>(
    clf: &C,
    x: &Tensor<T>,
    grads: &[Tensor<T>],
    bi: usize,
    pairs: &[(usize, usize)],
    rng: &mut R,
) -> Result<f64> {
    let n_in = x.len();
    let u = Tensor::<T>::randn(x.shape(), 1.0, rng);
    let u = u.scale(T::one() / u.norm());
    let h = match T::DTYPE {
        DType::F64 => 1e-5,
        DType::F32 => 1e-2,
    };
    let step = u.scale(c::<T>(h));
    let fp = clf.logit_vector(&x.add(&step)?)?;
    let fm = clf.logit_vector(&x.sub(&step)?)?;
    let mut worst = 0.0f64;
    for &(i, j) in pairs {
        let fd = ((fp[i] - fp[j]) - (fm[i] - fm[j])).to_f64_lossy() / (2.0 * h);
        let an: f64 = (0..n_in)
            .map(|k| {
                let g = grads[i].data()[bi * n_in + k] - grads[j].data()[bi * n_in + k];
                (g * u.data()[k]).to_f64_lossy()
            })
            .sum();
        worst = worst.max((fd - an).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_everything() {
        let mut h = Histogram::new(0.0, 1.0, 4);
        for v in [-1.0, 0.0, 0.3, 0.99, 1.0, 5.0] {
            h.add(v);
        }
        assert_eq!(h.total(), 6);
        assert_eq!((h.underflow, h.overflow), (1, 2));
        assert_eq!(h.counts, vec![1, 1, 0, 1]);
    }
}

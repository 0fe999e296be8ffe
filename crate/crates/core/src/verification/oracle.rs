//! Independent estimates of the minimal adversarial perturbation (the
//! distance from an input to the decision boundary).

use crate::error::{Result, UgnnError};
use crate::model::{margin, Classifier};
use crate::scalar::{c, Scalar};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMethod {
    Penalty,
    Grid2d,
}

impl OracleMethod {
    pub fn name(self) -> &'static str {
        match self {
            OracleMethod::Penalty => "penalty",
            OracleMethod::Grid2d => "grid2d",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "penalty" => Some(OracleMethod::Penalty),
            "grid2d" => Some(OracleMethod::Grid2d),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapEstimate<T> {
    /// `‖p* − x‖`.
    pub distance: T,
    pub point: Tensor<T>,
    /// Predicted class at `x`.
    pub label: usize,
    /// Class across the boundary that was reached.
    pub target: usize,
    /// `|f_label − f_target|` at `point`.
    pub residual: T,
    pub converged: bool,
    pub method: OracleMethod,
    /// Angular resolution error bound (grid oracle only).
    pub resolution: Option<T>,
}

/// Penalty schedule: minimize `‖p − x‖² + c (f_l − f_j)(p)²` by gradient
/// descent with momentum for `rounds` values `c = c0·factorᵏ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltySchedule {
    pub rounds: usize,
    pub c0: f64,
    pub factor: f64,
    pub inner_steps: usize,
    /// Base step; round `k` uses `step / (1 + c)` so the stiff direction
    /// stays stable as `c` grows.
    pub step: f64,
    pub momentum: f64,
    /// Clamp iterates to `[0, 1]` per coordinate.
    pub box_constraint: bool,
    pub residual_tol: f64,
    pub overshoot: f64,
    pub newton_iters: usize,
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        Self {
            rounds: 5,
            c0: 1.0,
            factor: 10.0,
            inner_steps: 200,
            step: 0.01,
            momentum: 0.9,
            box_constraint: false,
            residual_tol: 1e-3,
            overshoot: 1e-4,
            newton_iters: 5,
        }
    }
}

/// `g = f_l − f_j` and `∇g` at an unbatched point.
fn pair_value_grad<T: Scalar, C: Classifier<T> + ?Sized>(
    clf: &C,
    p: &Tensor<T>,
    l: usize,
    j: usize,
) -> Result<(T, Tensor<T>)> {
    let classes = clf.num_classes();
    let mut tape = Tape::new();
    let xv = tape.leaf(clf.batched(p)?);
    let y = clf.logits_tape(&mut tape, xv)?;
    let v = tape.value(y).row(0);
    let g = v[l] - v[j];
    let mut seed = Tensor::zeros(&[1, classes]);
    seed.set2(0, l, T::one());
    seed.set2(0, j, -T::one());
    let grad = tape.backward(y, seed)?.wrt(xv)?.reshape(p.shape())?;
    Ok((g, grad))
}

fn clamp_unit<T: Scalar>(p: &mut Tensor<T>) {
    p.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.max(T::zero()).min(T::one()));
}

fn predict<T: Scalar, C: Classifier<T> + ?Sized>(clf: &C, p: &Tensor<T>) -> Result<usize> {
    Ok(margin(&clf.logit_vector(p)?)?.label)
}

/// Penalty-method MAP estimate: the smallest converged boundary distance over
/// all one-vs-one problems `(l, j)`, `j ≠ l`.
pub fn map_oracle_penalty<T: Scalar, C: Classifier<T> + ?Sized>(
    clf: &C,
    x: &Tensor<T>,
    schedule: &PenaltySchedule,
) -> Result<MapEstimate<T>> {
    let x = clf.batched(x)?.reshape(clf.input_shape())?;
    let l = predict(clf, &x)?;
    let mut best: Option<MapEstimate<T>> = None;
    for j in (0..clf.num_classes()).filter(|&j| j != l) {
        let est = penalty_pair(clf, &x, l, j, schedule)?;
        let better = match &best {
            None => true,
            Some(b) => match (est.converged, b.converged) {
                (true, false) => true,
                (false, true) => false,
                (true, true) => est.distance < b.distance,
                (false, false) => est.residual < b.residual,
            },
        };
        if better {
            best = Some(est);
        }
    }
    best.ok_or_else(|| UgnnError::Oracle("classifier has a single class".into()))
}

fn penalty_pair<T: Scalar, C: Classifier<T> + ?Sized>(
    clf: &C,
    x: &Tensor<T>,
    l: usize,
    j: usize,
    s: &PenaltySchedule,
) -> Result<MapEstimate<T>> {
    let mut p = x.clone();
    let mu = c::<T>(s.momentum);
    let mut cpen = s.c0;
    for _ in 0..s.rounds {
        let eta = c::<T>(s.step / (1.0 + cpen));
        let cp = c::<T>(cpen);
        let mut vel = Tensor::<T>::zeros(x.shape());
        for _ in 0..s.inner_steps {
            let (g, dg) = pair_value_grad(clf, &p, l, j)?;
            // ∇ = 2(p − x) + 2c·g·∇g
            let mut grad = p.sub(x)?.scale(c::<T>(2.0));
            grad.axpy(c::<T>(2.0) * cp * g, &dg)?;
            vel = vel.scale(mu);
            vel.axpy(T::one(), &grad)?;
            p.axpy(-eta, &vel)?;
            if s.box_constraint {
                clamp_unit(&mut p);
            }
            if !p.all_finite() {
                return Err(UgnnError::NonFinite("penalty oracle iterate".into()));
            }
        }
        cpen *= s.factor;
    }
    // Newton projection onto g = 0 along ∇g
    for _ in 0..s.newton_iters {
        let (g, dg) = pair_value_grad(clf, &p, l, j)?;
        let n2 = dg.dot(&dg)?;
        if n2 <= T::zero() || g.abs() <= T::epsilon() {
            break;
        }
        p.axpy(-g / n2, &dg)?;
        if s.box_constraint {
            clamp_unit(&mut p);
        }
    }
    let (g, dg) = pair_value_grad(clf, &p, l, j)?;
    let dn = dg.norm();
    let flipped = if dn > T::zero() {
        let mut over = p.clone();
        over.axpy(-c::<T>(s.overshoot) / dn, &dg)?;
        predict(clf, &over)? != l
    } else {
        false
    };
    let residual = g.abs();
    Ok(MapEstimate {
        distance: p.sub(x)?.norm(),
        point: p,
        label: l,
        target: j,
        residual,
        converged: residual <= c::<T>(s.residual_tol) && flipped,
        method: OracleMethod::Penalty,
        resolution: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridOptions {
    pub directions: usize,
    pub radius: f64,
    /// March samples per ray.
    pub march: usize,
    pub bisect_tol: f64,
    /// Golden-section iterations of the angular refinement.
    pub refine_iters: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            directions: 720,
            radius: 4.0,
            march: 800,
            bisect_tol: 1e-5,
            refine_iters: 40,
        }
    }
}

/// Brute-force MAP for two-input classifiers: march rays in `directions`
/// angles until the predicted class changes, bisect the crossing, then
/// refine the best angle locally.
pub fn map_oracle_grid2d<T: Scalar, C: Classifier<T> + ?Sized>(
    clf: &C,
    x: &Tensor<T>,
    opts: &GridOptions,
) -> Result<MapEstimate<T>> {
    if clf.input_len() != 2 {
        return Err(UgnnError::Oracle(format!(
            "grid oracle needs a 2-input model, got {} inputs",
            clf.input_len()
        )));
    }
    let x = clf.batched(x)?.reshape(&[2])?;
    let (x0, y0) = (x.data()[0].to_f64_lossy(), x.data()[1].to_f64_lossy());
    let l = predict(clf, &x)?;
    let dt = opts.radius / opts.march as f64;

    // labels along every ray in one batch per ray group
    let point = |theta: f64, t: f64| (x0 + t * theta.cos(), y0 + t * theta.sin());
    let labels_of = |pts: &[(f64, f64)]| -> Result<Vec<usize>> {
        let data = pts
            .iter()
            .flat_map(|&(a, b)| [c::<T>(a), c::<T>(b)])
            .collect();
        let logits = clf.logits(&Tensor::new(&[pts.len(), 2], data)?)?;
        (0..pts.len())
            .map(|i| Ok(margin(logits.row(i))?.label))
            .collect()
    };
    let crossing = |theta: f64| -> Result<Option<f64>> {
        let pts: Vec<(f64, f64)> = (1..=opts.march)
            .map(|k| point(theta, k as f64 * dt))
            .collect();
        let labels = labels_of(&pts)?;
        let Some(k) = labels.iter().position(|&v| v != l) else {
            return Ok(None);
        };
        let (mut lo, mut hi) = (k as f64 * dt, (k + 1) as f64 * dt);
        while hi - lo > opts.bisect_tol {
            let mid = 0.5 * (lo + hi);
            if labels_of(&[point(theta, mid)])?[0] == l {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(Some(hi))
    };

    let tau = std::f64::consts::TAU;
    let dtheta = tau / opts.directions as f64;
    let mut best: Option<(f64, f64)> = None;
    for k in 0..opts.directions {
        let theta = k as f64 * dtheta;
        if let Some(t) = crossing(theta)? {
            if best.is_none_or(|(_, bt)| t < bt) {
                best = Some((theta, t));
            }
        }
    }
    let Some((mut theta, mut dist)) = best else {
        return Err(UgnnError::Oracle(format!(
            "no boundary within radius {}",
            opts.radius
        )));
    };
    // golden-section refinement on [θ − Δ, θ + Δ]
    let gr = 0.5 * (5f64.sqrt() - 1.0);
    let eval = |th: f64| -> Result<f64> { Ok(crossing(th)?.unwrap_or(f64::INFINITY)) };
    let (mut a, mut b) = (theta - dtheta, theta + dtheta);
    let mut c1 = b - gr * (b - a);
    let mut c2 = a + gr * (b - a);
    let (mut f1, mut f2) = (eval(c1)?, eval(c2)?);
    for _ in 0..opts.refine_iters {
        if f1 <= f2 {
            b = c2;
            c2 = c1;
            f2 = f1;
            c1 = b - gr * (b - a);
            f1 = eval(c1)?;
        } else {
            a = c1;
            c1 = c2;
            f1 = f2;
            c2 = a + gr * (b - a);
            f2 = eval(c2)?;
        }
    }
    for (th, f) in [(c1, f1), (c2, f2)] {
        if f < dist {
            dist = f;
            theta = th;
        }
    }
    let (px, py) = point(theta, dist);
    let p = Tensor::from_vec(vec![c::<T>(px), c::<T>(py)]);
    let logits = clf.logit_vector(&p)?;
    let target = margin(&logits)?.label;
    let target = if target == l {
        margin(&logits)?.runner_up
    } else {
        target
    };
    Ok(MapEstimate {
        distance: c::<T>(dist),
        residual: (logits[l] - logits[target]).abs(),
        point: p,
        label: l,
        target,
        converged: true,
        method: OracleMethod::Grid2d,
        resolution: Some(c::<T>(
            dist * (1.0 - (0.5 * dtheta).cos()) + opts.bisect_tol,
        )),
    })
}

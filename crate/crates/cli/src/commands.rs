use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ugnn::data::{load_checkpoint, save_checkpoint, Dataset, DatasetSpec, Metadata};
use ugnn::model::{Classifier, Margin};
use ugnn::training::{train as train_model, TrainConfig};
use ugnn::verification::{
    curve_csv, lb_map_report, map_oracle_grid2d, map_oracle_penalty, margins, robustness_curve, verify_model,
    GridOptions, PenaltySchedule, RingClassifier, VerifyOptions,
};
use ugnn::{seeded_rng, Architecture, DType, Scalar, Tensor, UgnnError, UgnnModel};

use crate::config::{Preset, RunConfig};
use crate::parallel::{default_threads, par_map};
use crate::{ModelArgs, OracleArg, OutArgs, Precision, PresetArg};

const EVAL_BATCH: usize = 256;

fn preset(p: PresetArg) -> Preset {
    match p {
        PresetArg::Default => Preset::Default,
        PresetArg::Desk => Preset::Desk,
        PresetArg::Full => Preset::Full,
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn emit(out: &OutArgs, text: &str) -> Result<()> {
    match &out.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("--out {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_data<T: Scalar>(spec: &str) -> Result<Dataset<T>> {
    let spec = DatasetSpec::parse(spec).context("--data")?;
    spec.load().context("--data")
}

/// The classifier under study plus the input transform it expects.
enum Subject<T> {
    Model(Box<UgnnModel<T>>),
    Ring(RingClassifier),
}

impl<T: Scalar> Subject<T> {
    fn load(args: &ModelArgs) -> Result<Self> {
        if args.ring {
            return Ok(Subject::Ring(RingClassifier::new(2)));
        }
        let path = args.ckpt.as_ref().context("--ckpt is required")?;
        let (model, _) = load_checkpoint::<T>(path).with_context(|| format!("--ckpt {}", path.display()))?;
        Ok(Subject::Model(Box::new(model)))
    }

    fn clf(&self) -> &(dyn Classifier<T> + Sync) {
        match self {
            Subject::Model(m) => m.as_ref(),
            Subject::Ring(r) => r,
        }
    }

    fn normalized(&self) -> bool {
        matches!(self, Subject::Model(m) if m.normalization().is_some())
    }

    /// Data in the classifier's input space, after checking extents.
    fn prepare(&self, data: &Dataset<T>) -> Result<Tensor<T>> {
        let want = self.clf().input_shape();
        if data.sample_shape() != want {
            bail!(
                "--data samples have shape {:?} but the model expects {:?}",
                data.sample_shape(),
                want
            );
        }
        if data.classes > self.clf().num_classes() {
            bail!(
                "--data has {} classes but the model has {}",
                data.classes,
                self.clf().num_classes()
            );
        }
        Ok(match self {
            Subject::Model(m) => ugnn::training::prepare_inputs(m, &data.inputs)?,
            Subject::Ring(_) => data.inputs.clone(),
        })
    }
}

fn with_precision<F32, F64>(p: Precision, f32_path: F32, f64_path: F64) -> Result<u8>
where
    F32: FnOnce() -> Result<u8>,
    F64: FnOnce() -> Result<u8>,
{
    match p {
        Precision::F32 => f32_path(),
        Precision::F64 => f64_path(),
    }
}

fn build<T: Scalar>(arch: &Architecture) -> Result<UgnnModel<T>> {
    Ok(match arch {
        Architecture::Conv(c) => UgnnModel::build(c)?,
        Architecture::Mlp(c) => UgnnModel::build_mlp(c)?,
    })
}

fn read_config(path: Option<&Path>, p: PresetArg) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("--config {}", p.display()))?,
        None => String::new(),
    };
    RunConfig::parse(&text, preset(p)).context("--config")
}

// ---- init ----

pub fn init(config: &Path, data: &str, out: &Path, p: PresetArg) -> Result<u8> {
    let rc = read_config(Some(config), p)?;
    match rc.train.precision {
        DType::F32 => init_t::<f32>(&rc, data, out),
        DType::F64 => init_t::<f64>(&rc, data, out),
    }
}

fn init_t<T: Scalar>(rc: &RunConfig, data: &str, out: &Path) -> Result<u8> {
    let d: Dataset<T> = load_data(data)?;
    let mut model = build::<T>(&rc.architecture(d.sample_shape(), d.classes)?)?;
    model.freeze()?;
    save_checkpoint(&model, out, &Metadata::new())?;
    eprintln!("saved freshly projected model to {}", out.display());
    Ok(0)
}

// ---- train ----

pub fn train(config: Option<&Path>, data: &str, out: &Path, p: PresetArg, seed: Option<u64>) -> Result<u8> {
    let mut rc = read_config(config, p)?;
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    match rc.train.precision {
        DType::F32 => train_t::<f32>(&rc, data, out),
        DType::F64 => train_t::<f64>(&rc, data, out),
    }
}

fn train_t<T: Scalar>(rc: &RunConfig, data: &str, out: &Path) -> Result<u8> {
    let d: Dataset<T> = load_data(data)?;
    let arch = rc.architecture(d.sample_shape(), d.classes)?;
    let mut model = build::<T>(&arch)?;
    let cfg: &TrainConfig = &rc.train;
    let mut manifest = cfg.to_metadata()?;
    manifest.set("data", data)?;
    let started = std::time::Instant::now();
    let outcome = match train_model(&mut model, &d, cfg) {
        Ok(o) => o,
        Err(e @ UgnnError::NonFinite(_)) => {
            manifest.set("status", "diverged")?;
            save_checkpoint(&model, out, &manifest)?;
            bail!("{e}; last good parameters saved to {}", out.display());
        }
        Err(e) => return Err(e.into()),
    };
    manifest.set("status", "complete")?;
    manifest.set("elapsed_seconds", format!("{:.1}", started.elapsed().as_secs_f64()))?;
    manifest.extend(&outcome.history.summary()?)?;
    let inv = outcome.invariants;
    manifest.set("invariants.linear_deviation", inv.linear_deviation)?;
    manifest.set("invariants.field_deviation", inv.field_deviation)?;
    manifest.set("invariants.upd_deviation", inv.upd_deviation)?;
    manifest.set("invariants.pass", inv.pass())?;
    save_checkpoint(&model, out, &manifest)?;
    std::fs::write(sibling(out, ".manifest"), manifest.to_text())?;
    std::fs::write(sibling(out, ".history.csv"), outcome.history.to_csv())?;
    if let Some(e) = outcome.history.last() {
        eprintln!(
            "trained {} steps: loss={:.6} accuracy={:.4} mean_margin={:.6} invariants={}",
            outcome.steps,
            e.loss,
            e.accuracy,
            e.mean_margin,
            if inv.pass() { "ok" } else { "VIOLATED" }
        );
    }
    Ok(if inv.pass() { 0 } else { 1 })
}

// ---- eval ----

pub fn eval(args: &ModelArgs, data: &str) -> Result<u8> {
    with_precision(args.precision, || eval_t::<f32>(args, data), || eval_t::<f64>(args, data))
}

fn eval_t<T: Scalar>(args: &ModelArgs, data: &str) -> Result<u8> {
    let s = Subject::<T>::load(args)?;
    let d: Dataset<T> = load_data(data)?;
    let x = s.prepare(&d)?;
    let ms = margins(s.clf(), &x, EVAL_BATCH)?;
    let (mut hits, mut radius) = (0usize, 0.0);
    for (m, &y) in ms.iter().zip(&d.labels) {
        if m.label == y {
            hits += 1;
            radius += m.value.to_f64_lossy();
        }
    }
    let n = d.len() as f64;
    println!("samples={} accuracy={} mean_margin={}", d.len(), hits as f64 / n, radius / n);
    Ok(0)
}

// ---- certify ----

pub fn certify(args: &ModelArgs, data: &str, eps: &[f64], out: &OutArgs) -> Result<u8> {
    if let Some(e) = eps.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        bail!("--eps values must be finite and non-negative, got {e}");
    }
    with_precision(
        args.precision,
        || certify_t::<f32>(args, data, eps, out),
        || certify_t::<f64>(args, data, eps, out),
    )
}

/// Robust at ε: correct, nonzero margin, and margin ≥ ε.
fn robust<T: Scalar>(m: &Margin<T>, label: usize, eps: f64) -> bool {
    let v = m.value.to_f64_lossy();
    m.label == label && v > 0.0 && v >= eps
}

fn certify_t<T: Scalar>(args: &ModelArgs, data: &str, eps: &[f64], out: &OutArgs) -> Result<u8> {
    let s = Subject::<T>::load(args)?;
    let d: Dataset<T> = load_data(data)?;
    let x = s.prepare(&d)?;
    let ms = margins(s.clf(), &x, EVAL_BATCH)?;
    let mut csv = String::from("sample_id,label,pred,runner_up,margin,radius");
    for e in eps {
        csv.push_str(&format!(",robust@{e}"));
    }
    csv.push('\n');
    for (i, (m, &y)) in ms.iter().zip(&d.labels).enumerate() {
        let v = m.value.to_f64_lossy();
        csv.push_str(&format!("{i},{y},{},{},{v},{v}", m.label, m.runner_up));
        for &e in eps {
            csv.push_str(if robust(m, y, e) { ",1" } else { ",0" });
        }
        csv.push('\n');
    }
    emit(out, &csv)?;
    Ok(0)
}

// ---- verify ----

pub fn verify(args: &ModelArgs, samples: usize, seed: u64) -> Result<u8> {
    with_precision(
        args.precision,
        || verify_t::<f32>(args, samples, seed),
        || verify_t::<f64>(args, samples, seed),
    )
}

fn verify_t<T: Scalar>(args: &ModelArgs, samples: usize, seed: u64) -> Result<u8> {
    let Subject::Model(mut model) = Subject::<T>::load(args)? else {
        bail!("verify audits a checkpoint; --ring has no layers to check");
    };
    if !model.is_frozen() {
        model.freeze()?;
    }
    let mut opts = VerifyOptions::for_dtype(T::DTYPE);
    opts.ug_samples = samples.max(1);
    let report = verify_model(model.as_ref(), &opts, &mut seeded_rng(seed))?;
    let flag = |ok: bool| if ok { "ok" } else { "FAIL" };
    for l in &report.layers {
        println!(
            "layer {:>2} {:<28} {:<8} deviation={:.3e} {}",
            l.index,
            l.description,
            l.method.name(),
            l.deviation,
            flag(l.pass)
        );
    }
    println!(
        "head {} pair-norm deviation={:.3e}{} {}",
        model.head.kind.name(),
        report.upd_deviation,
        report
            .upd_row_deviation
            .map_or(String::new(), |d| format!(" row-norm deviation={d:.3e}")),
        flag(report.upd_pass())
    );
    let u = &report.unitary;
    println!(
        "unit gradient: {} inputs x {} pairs, |grad| in [{:.9}, {:.9}], finite-difference deviation={:.3e} {}",
        u.samples,
        u.pairs.len(),
        u.min,
        u.max,
        u.fd_max_deviation,
        flag(report.unitary_pass())
    );
    println!("verify: {}", if report.pass() { "PASS" } else { "FAIL" });
    Ok(if report.pass() { 0 } else { 1 })
}

// ---- oracle ----

pub fn oracle(
    args: &ModelArgs,
    data: &str,
    method: OracleArg,
    box_constraint: bool,
    limit: Option<usize>,
    out: &OutArgs,
) -> Result<u8> {
    with_precision(
        args.precision,
        || oracle_t::<f32>(args, data, method, box_constraint, limit, out),
        || oracle_t::<f64>(args, data, method, box_constraint, limit, out),
    )
}

fn oracle_t<T: Scalar>(
    args: &ModelArgs,
    data: &str,
    method: OracleArg,
    box_constraint: bool,
    limit: Option<usize>,
    out: &OutArgs,
) -> Result<u8> {
    let s = Subject::<T>::load(args)?;
    let mut d: Dataset<T> = load_data(data)?;
    if let Some(n) = limit {
        d = d.take(n)?;
    }
    if box_constraint && s.normalized() {
        bail!("--box constrains raw pixels, but this model standardizes its inputs");
    }
    let clf = s.clf();
    if method == OracleArg::Grid2d && clf.input_len() != 2 {
        bail!("--method grid2d needs a two-input model, this one has {} inputs", clf.input_len());
    }
    if method == OracleArg::Grid2d && box_constraint {
        bail!("--box is only supported with --method penalty");
    }
    let x = s.prepare(&d)?;
    let n_in = clf.input_len();
    let schedule = PenaltySchedule {
        box_constraint,
        ..PenaltySchedule::default()
    };
    let grid = GridOptions::default();
    let estimates = par_map(d.len(), default_threads(), |i| {
        let xi = Tensor::new(clf.input_shape(), x.data()[i * n_in..(i + 1) * n_in].to_vec())?;
        match method {
            OracleArg::Penalty => map_oracle_penalty(clf, &xi, &schedule),
            OracleArg::Grid2d => map_oracle_grid2d(clf, &xi, &grid),
        }
    });
    let mut it = estimates.into_iter();
    let report = lb_map_report(clf, &x, &d.labels, |_| it.next().expect("one estimate per sample"))?;
    emit(out, &report.to_csv())?;
    eprintln!(
        "LB/MAP mean={:.6} std={:.6} over {} correctly classified converged samples",
        report.mean, report.std, report.count
    );
    Ok(0)
}

// ---- curve ----

fn parse_eps_range(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, count] = parts[..] else {
        bail!("--eps-range must be lo:hi:count, got {s:?}");
    };
    let (lo, hi): (f64, f64) = (
        lo.parse().context("--eps-range lo")?,
        hi.parse().context("--eps-range hi")?,
    );
    let count: usize = count.parse().context("--eps-range count")?;
    if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi >= lo) || count == 0 {
        bail!("--eps-range needs 0 <= lo <= hi and count >= 1, got {s:?}");
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..count)
        .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
        .collect())
}

pub fn curve(args: &ModelArgs, data: &str, eps_range: &str, out: &OutArgs) -> Result<u8> {
    let eps = parse_eps_range(eps_range)?;
    with_precision(
        args.precision,
        || curve_t::<f32>(args, data, &eps, out),
        || curve_t::<f64>(args, data, &eps, out),
    )
}

fn curve_t<T: Scalar>(args: &ModelArgs, data: &str, eps: &[f64], out: &OutArgs) -> Result<u8> {
    let s = Subject::<T>::load(args)?;
    let d: Dataset<T> = load_data(data)?;
    let x = s.prepare(&d)?;
    let ms = margins(s.clf(), &x, EVAL_BATCH)?;
    emit(out, &curve_csv(&robustness_curve(&ms, &d.labels, eps)))?;
    Ok(0)
}

// ---- contour ----

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let (a, b) = s.split_once(',').with_context(|| format!("--range must be lo,hi, got {s:?}"))?;
    let (lo, hi): (f64, f64) = (
        a.trim().parse().context("--range lo")?,
        b.trim().parse().context("--range hi")?,
    );
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        bail!("--range needs finite lo < hi, got {s:?}");
    }
    Ok((lo, hi))
}

pub fn contour(args: &ModelArgs, grid: usize, range: &str, out: &OutArgs) -> Result<u8> {
    let r = parse_range(range)?;
    if grid < 2 {
        bail!("--grid must be at least 2, got {grid}");
    }
    with_precision(
        args.precision,
        || contour_t::<f32>(args, grid, r, out),
        || contour_t::<f64>(args, grid, r, out),
    )
}

fn contour_t<T: Scalar>(args: &ModelArgs, grid: usize, (lo, hi): (f64, f64), out: &OutArgs) -> Result<u8> {
    let s = Subject::<T>::load(args)?;
    let clf = s.clf();
    if clf.input_shape() != [2] {
        bail!("contour needs a two-input model, this one expects {:?}", clf.input_shape());
    }
    if s.normalized() {
        bail!("contour does not support models that standardize their inputs");
    }
    let step = (hi - lo) / (grid - 1) as f64;
    let mut pts = Vec::with_capacity(grid * grid * 2);
    for iy in 0..grid {
        for ix in 0..grid {
            pts.push(T::from_f64_lossy(lo + step * ix as f64));
            pts.push(T::from_f64_lossy(lo + step * iy as f64));
        }
    }
    let x = Tensor::new(&[grid * grid, 2], pts)?;
    let ms = margins(clf, &x, 4096)?;
    let mut csv = String::from("x,y,f_l_minus_f_s,k_hat\n");
    for (i, m) in ms.iter().enumerate() {
        let (px, py) = (x.data()[2 * i].to_f64_lossy(), x.data()[2 * i + 1].to_f64_lossy());
        csv.push_str(&format!("{px},{py},{},{}\n", m.value.to_f64_lossy(), m.label));
    }
    emit(out, &csv)?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eps_range_is_inclusive() {
        assert_eq!(parse_eps_range("0:1:5").unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(parse_eps_range("0.5:0.5:1").unwrap(), vec![0.5]);
        for bad in ["0:1", "1:0:3", "0:1:0", "a:1:2", "-1:1:3"] {
            assert!(parse_eps_range(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn range_parsing() {
        assert_eq!(parse_range("-2,2").unwrap(), (-2.0, 2.0));
        assert!(parse_range("2,-2").is_err());
        assert!(parse_range("2").is_err());
    }

    #[test]
    fn robust_requires_correct_nonzero_margin() {
        let m = Margin {
            label: 1,
            runner_up: 0,
            value: 0.3f64,
        };
        assert!(robust(&m, 1, 0.0));
        assert!(robust(&m, 1, 0.3));
        assert!(!robust(&m, 1, 0.31));
        assert!(!robust(&m, 0, 0.0));
        let tie = Margin { value: 0.0, ..m };
        assert!(!robust(&tie, 1, 0.0));
    }

    #[test]
    fn sibling_appends_suffix() {
        assert_eq!(sibling(Path::new("/a/m.ugnn"), ".manifest"), PathBuf::from("/a/m.ugnn.manifest"));
    }
}

//! Logistic response surface over the five process factors, with 1-D yield
//! sections, dose windows and recommended operating ranges.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::virtualfab::{DesignPoint, DeviceOutcome, Factor, FactorBounds};

/// Number of expanded features: 5 linear, 5 squares, 10 pairwise products.
pub const N_FEATURES: usize = 20;

/// Per-factor transform applied before standardization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Identity,
    Log,
}

impl Transform {
    fn apply(self, v: f64, f: Factor) -> Result<f64> {
        match self {
            Transform::Identity => Ok(v),
            Transform::Log if v > 0.0 => Ok(v.ln()),
            Transform::Log => Err(Error::invalid(format!(
                "{f} = {v} must be positive on a log axis"
            ))),
        }
    }
}

/// Standardization constants and transforms for the feature expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub transforms: [Transform; 5],
    pub means: [f64; 5],
    pub scales: [f64; 5],
}

impl FeatureSpec {
    /// Fit standardization constants on `points`. A factor with no spread gets
    /// scale 1, so its terms are identically zero on the training data.
    pub fn fit(points: &[DesignPoint], transforms: [Transform; 5]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("no points to standardize"));
        }
        let n = points.len() as f64;
        let mut means = [0.0; 5];
        let mut scales = [0.0; 5];
        for f in Factor::ALL {
            let i = f.index();
            let vals = points
                .iter()
                .map(|p| {
                    let v = p.get(f);
                    if !v.is_finite() {
                        return Err(Error::invalid(format!("non-finite {f} in training data")));
                    }
                    transforms[i].apply(v, f)
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            means[i] = mean;
            scales[i] = if sd > 1e-12 * mean.abs().max(1.0) {
                sd
            } else {
                1.0
            };
        }
        Ok(FeatureSpec {
            transforms,
            means,
            scales,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..5 {
            if !self.means[i].is_finite() || !(self.scales[i] > 0.0 && self.scales[i].is_finite()) {
                return Err(Error::invalid(format!(
                    "feature spec for {} has invalid mean/scale",
                    Factor::ALL[i]
                )));
            }
        }
        Ok(())
    }

    pub fn standardize(&self, p: &DesignPoint) -> Result<[f64; 5]> {
        let mut z = [0.0; 5];
        for f in Factor::ALL {
            let i = f.index();
            let v = p.get(f);
            if !v.is_finite() {
                return Err(Error::invalid(format!("{f} must be finite, got {v}")));
            }
            z[i] = (self.transforms[i].apply(v, f)? - self.means[i]) / self.scales[i];
        }
        Ok(z)
    }

    pub fn feature_names() -> Vec<String> {
        let n = Factor::ALL.map(|f| f.name());
        let mut out: Vec<String> = n.iter().map(|s| s.to_string()).collect();
        out.extend(n.iter().map(|s| format!("{s}^2")));
        for i in 0..5 {
            for j in i + 1..5 {
                out.push(format!("{}*{}", n[i], n[j]));
            }
        }
        out
    }
}

/// Expanded feature vector: standardized linear terms, their squares, then
/// the 10 pairwise products in (i, j>i) order.
pub fn featurize(point: &DesignPoint, spec: &FeatureSpec) -> Result<Vec<f64>> {
    let z = spec.standardize(point)?;
    let mut out = Vec::with_capacity(N_FEATURES);
    out.extend_from_slice(&z);
    out.extend(z.iter().map(|v| v * v));
    for i in 0..5 {
        for j in i + 1..5 {
            out.push(z[i] * z[j]);
        }
    }
    Ok(out)
}

/// One labelled training observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub point: DesignPoint,
    pub yielding: bool,
}

impl Sample {
    pub fn from_outcome(point: DesignPoint, outcome: DeviceOutcome) -> Self {
        Sample {
            point,
            yielding: outcome.is_yielding(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub ridge: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub transforms: [Transform; 5],
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            ridge: 1e-3,
            tolerance: 1e-8,
            max_iterations: 200,
            transforms: [Transform::Identity; 5],
        }
    }
}

impl FitOptions {
    /// Log axes for the factors that act multiplicatively (dose, thickness,
    /// times); cap thickness, which can be zero, stays linear.
    pub fn log_axes() -> [Transform; 5] {
        [
            Transform::Log,
            Transform::Log,
            Transform::Identity,
            Transform::Log,
            Transform::Log,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge > 0.0 && self.ridge.is_finite()) {
            return Err(Error::invalid(format!(
                "ridge must be positive, got {}",
                self.ridge
            )));
        }
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::invalid(
                "tolerance and iteration cap must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitInfo {
    pub iterations: usize,
    pub gradient_norm: f64,
    pub n_train: usize,
    pub train_accuracy: f64,
    pub n_holdout: usize,
    pub holdout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub feature_spec: FeatureSpec,
    pub weights: Vec<f64>,
    pub intercept: f64,
    #[serde(default)]
    pub info: FitInfo,
}

impl LogisticModel {
    /// Model with all-zero weights.
    pub fn constant(feature_spec: FeatureSpec, intercept: f64) -> Self {
        LogisticModel {
            feature_spec,
            weights: vec![0.0; N_FEATURES],
            intercept,
            info: FitInfo::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_spec.validate()?;
        if self.weights.len() != N_FEATURES {
            return Err(Error::invalid(format!(
                "model has {} weights, expected {N_FEATURES}",
                self.weights.len()
            )));
        }
        if !self.intercept.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("model weights must be finite"));
        }
        Ok(())
    }

    pub fn linear_predictor(&self, p: &DesignPoint) -> Result<f64> {
        let x = featurize(p, &self.feature_spec)?;
        Ok(self.intercept + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: LogisticModel = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn predict_yield(model: &LogisticModel, point: &DesignPoint) -> Result<f64> {
    Ok(sigmoid(model.linear_predictor(point)?))
}

pub fn accuracy(model: &LogisticModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let mut hits = 0usize;
    for s in samples {
        let yes = predict_yield(model, &s.point)? >= 0.5;
        hits += usize::from(yes == s.yielding);
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Fit with the default options and the given ridge weight.
pub fn fit_logistic(samples: &[Sample], ridge: f64) -> Result<LogisticModel> {
    fit_logistic_with(
        samples,
        &FitOptions {
            ridge,
            ..FitOptions::default()
        },
    )
}

/// Ridge-penalized maximum likelihood by damped Newton iteration.
///
/// Objective: mean negative log-likelihood plus `ridge/2 * |w|^2`; the
/// intercept is not penalized.
pub fn fit_logistic_with(samples: &[Sample], opts: &FitOptions) -> Result<LogisticModel> {
    opts.validate()?;
    let n_yield = samples.iter().filter(|s| s.yielding).count();
    if n_yield == 0 || n_yield == samples.len() {
        return Err(Error::SingleClass(if n_yield == 0 {
            "no yielding devices in training data"
        } else {
            "no failing devices in training data"
        }));
    }
    let points: Vec<DesignPoint> = samples.iter().map(|s| s.point).collect();
    let spec = FeatureSpec::fit(&points, opts.transforms)?;
    let d = N_FEATURES + 1;
    let n = samples.len();
    let mut x = DMatrix::<f64>::zeros(n, d);
    let mut y = DVector::<f64>::zeros(n);
    for (r, s) in samples.iter().enumerate() {
        x[(r, 0)] = 1.0;
        for (c, v) in featurize(&s.point, &spec)?.into_iter().enumerate() {
            x[(r, c + 1)] = v;
        }
        y[r] = if s.yielding { 1.0 } else { 0.0 };
    }
    let inv_n = 1.0 / n as f64;
    let lambda = opts.ridge;

    let objective = |w: &DVector<f64>| -> f64 {
        let eta = &x * w;
        let nll: f64 = eta
            .iter()
            .zip(y.iter())
            .map(|(&e, &t)| softplus(e) - t * e)
            .sum();
        let pen: f64 = w.iter().skip(1).map(|v| v * v).sum();
        nll * inv_n + 0.5 * lambda * pen
    };

    let mut w = DVector::<f64>::zeros(d);
    let frac = n_yield as f64 / n as f64;
    w[0] = (frac / (1.0 - frac)).ln();
    let mut f_cur = objective(&w);
    let mut iterations = 0;
    let mut gnorm;
    loop {
        let eta = &x * &w;
        let p = eta.map(sigmoid);
        let mut g = x.tr_mul(&(&p - &y)) * inv_n;
        for j in 1..d {
            g[j] += lambda * w[j];
        }
        gnorm = g.amax();
        if gnorm < opts.tolerance {
            break;
        }
        if iterations >= opts.max_iterations {
            return Err(Error::NotConverged {
                what: "logistic fit",
                iterations,
                residual: gnorm,
            });
        }
        let mut xw = x.clone();
        for r in 0..n {
            let s = (p[r] * (1.0 - p[r]) * inv_n).sqrt();
            xw.row_mut(r).scale_mut(s);
        }
        let mut h = xw.tr_mul(&xw);
        for j in 1..d {
            h[(j, j)] += lambda;
        }
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => {
                for j in 0..d {
                    h[(j, j)] += 1e-10;
                }
                h.lu()
                    .solve(&g)
                    .ok_or_else(|| Error::invalid("singular Hessian in logistic fit"))?
            }
        };
        let slope = g.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &w - &step * t;
            let f_trial = objective(&trial);
            if f_trial <= f_cur - 1e-4 * t * slope {
                w = trial;
                f_cur = f_trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            // no further decrease available at double precision
            if gnorm < opts.tolerance.sqrt() {
                break;
            }
            return Err(Error::NotConverged {
                what: "logistic fit line search",
                iterations,
                residual: gnorm,
            });
        }
    }
    let mut model = LogisticModel {
        feature_spec: spec,
        weights: w.iter().skip(1).copied().collect(),
        intercept: w[0],
        info: FitInfo::default(),
    };
    model.info = FitInfo {
        iterations,
        gradient_norm: gnorm,
        n_train: n,
        train_accuracy: accuracy(&model, samples)?,
        n_holdout: 0,
        holdout_accuracy: None,
    };
    Ok(model)
}

const SPLIT_SALT: u64 = 0x5B11_7A55_0F20_C0DE;

/// Split into (train, holdout). Membership depends only on each sample's
/// content and `seed`, so the split is independent of input order.
pub fn holdout_split(
    samples: &[Sample],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!(
            "holdout fraction must be in [0, 1), got {fraction}"
        )));
    }
    // salted so membership is independent of the outcome draw, which is
    // keyed by the same (seed, point) pair
    let seed = rng::derive_seed(seed, SPLIT_SALT);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for s in samples {
        if rng::unit_draw(seed, s.point.content_hash()) < fraction {
            test.push(*s);
        } else {
            train.push(*s);
        }
    }
    Ok((train, test))
}

/// Fit on the training part of a seeded split and record holdout accuracy.
pub fn fit_with_holdout(
    samples: &[Sample],
    opts: &FitOptions,
    fraction: f64,
    seed: u64,
) -> Result<LogisticModel> {
    let (train, test) = holdout_split(samples, fraction, seed)?;
    let mut model = fit_logistic_with(&train, opts)?;
    if !test.is_empty() {
        model.info.n_holdout = test.len();
        model.info.holdout_accuracy = Some(accuracy(&model, &test)?);
    }
    Ok(model)
}

/// Predicted yield along one factor with the other four held fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldCurve {
    pub axis: Factor,
    pub fixed: DesignPoint,
    pub samples: Vec<(f64, f64)>,
}

impl YieldCurve {
    pub fn new(axis: Factor, fixed: DesignPoint, samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::invalid(
                "curve abscissas must be strictly increasing",
            ));
        }
        if samples.iter().any(|s| !(0.0..=1.0).contains(&s.1)) {
            return Err(Error::invalid("curve values must lie in [0, 1]"));
        }
        Ok(YieldCurve {
            axis,
            fixed,
            samples,
        })
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{},f", self.axis.name())?;
        for (x, f) in &self.samples {
            writeln!(w, "{},{}", crate::fmt::g17(*x), crate::fmt::g17(*f))?;
        }
        Ok(())
    }

    pub fn peak(&self) -> Option<(f64, f64)> {
        self.samples
            .iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + step * i as f64 })
        .collect()
}

pub fn yield_section(
    model: &LogisticModel,
    axis: Factor,
    fixed: &DesignPoint,
    range: (f64, f64),
    n_samples: usize,
    bounds: &FactorBounds,
) -> Result<YieldCurve> {
    if n_samples < 2 {
        return Err(Error::invalid("a section needs at least 2 samples"));
    }
    let (lo, hi) = range;
    let (blo, bhi) = bounds.range(axis);
    if !(lo < hi) || lo < blo || hi > bhi {
        return Err(Error::invalid(format!(
            "section range [{lo}, {hi}] for {axis} must be increasing and within [{blo}, {bhi}]"
        )));
    }
    let samples = linspace(lo, hi, n_samples)
        .into_iter()
        .map(|v| Ok((v, predict_yield(model, &fixed.with(axis, v))?)))
        .collect::<Result<Vec<_>>>()?;
    YieldCurve::new(axis, *fixed, samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessWindow {
    #[serde(rename = "D_l")]
    pub d_l: f64,
    #[serde(rename = "D_u")]
    pub d_u: f64,
    pub latitude: f64,
    pub level: f64,
    /// The curve already exceeds the level at its first sample.
    pub lower_clipped: bool,
    /// The curve still exceeds the level at its last sample.
    pub upper_clipped: bool,
}

fn crossing(a: (f64, f64), b: (f64, f64), level: f64) -> f64 {
    a.0 + (level - a.1) * (b.0 - a.0) / (b.1 - a.1)
}

/// Dose window where the curve stays at or above `level`.
pub fn process_window(curve: &YieldCurve, level: f64) -> Result<Option<ProcessWindow>> {
    if curve.axis != Factor::Dose {
        return Err(Error::invalid(format!(
            "process window needs a dose curve, got {}",
            curve.axis
        )));
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::invalid(format!(
            "level must be in [0, 1], got {level}"
        )));
    }
    let s = &curve.samples;
    let above: Vec<bool> = s.iter().map(|p| p.1 >= level).collect();
    let mut runs = Vec::new();
    let mut i = 0;
    while i < s.len() {
        if above[i] {
            let start = i;
            while i + 1 < s.len() && above[i + 1] {
                i += 1;
            }
            runs.push((start, i));
        }
        i += 1;
    }
    let lower = |a: usize| {
        if a == 0 {
            s[0].0
        } else {
            crossing(s[a - 1], s[a], level)
        }
    };
    let upper = |b: usize| {
        if b + 1 == s.len() {
            s[b].0
        } else {
            crossing(s[b], s[b + 1], level)
        }
    };
    match runs.as_slice() {
        [] => Ok(None),
        [(a, b)] => {
            let (d_l, d_u) = (lower(*a), upper(*b));
            Ok(Some(ProcessWindow {
                d_l,
                d_u,
                latitude: d_u - d_l,
                level,
                lower_clipped: *a == 0,
                upper_clipped: *b + 1 == s.len(),
            }))
        }
        _ => {
            let mut crossings = Vec::new();
            for &(a, b) in &runs {
                if a > 0 {
                    crossings.push(lower(a));
                }
                if b + 1 < s.len() {
                    crossings.push(upper(b));
                }
            }
            Err(Error::AmbiguousWindow { crossings })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorInterval {
    pub factor: Factor,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendedWindow {
    pub optimum: DesignPoint,
    pub optimum_yield: f64,
    pub level: f64,
    pub intervals: Vec<FactorInterval>,
}

/// Grid used by [`recommend_window`]: `steps` evenly spaced values per factor
/// across `bounds`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub bounds: FactorBounds,
    pub steps: usize,
}

/// Coordinate-wise grid ascent to the predicted optimum, then for each factor
/// the widest contiguous grid interval around the optimum whose section stays
/// at or above `level`.
pub fn recommend_window(
    model: &LogisticModel,
    level: f64,
    grid: &GridSpec,
) -> Result<Option<RecommendedWindow>> {
    if grid.steps < 2 {
        return Err(Error::invalid("grid needs at least 2 steps per factor"));
    }
    grid.bounds.validate()?;
    let axes: Vec<Vec<f64>> = Factor::ALL
        .iter()
        .map(|&f| {
            let (lo, hi) = grid.bounds.range(f);
            if lo == hi {
                vec![lo]
            } else {
                linspace(lo, hi, grid.steps)
            }
        })
        .collect();
    let mut idx: [usize; 5] = std::array::from_fn(|i| axes[i].len() / 2);
    let point =
        |idx: &[usize; 5]| DesignPoint::from_array(std::array::from_fn(|i| axes[i][idx[i]]));
    let mut best = predict_yield(model, &point(&idx))?;
    for _ in 0..100 {
        let mut moved = false;
        for (fi, vals) in axes.iter().enumerate() {
            for k in 0..vals.len() {
                let mut trial = idx;
                trial[fi] = k;
                let f = predict_yield(model, &point(&trial))?;
                if f > best {
                    best = f;
                    idx = trial;
                    moved = true;
                }
            }
        }
        if !moved {
            break;
        }
    }
    if best < level {
        return Ok(None);
    }
    let mut intervals = Vec::with_capacity(5);
    for (fi, vals) in axes.iter().enumerate() {
        let ok = |k: usize| -> Result<bool> {
            let mut trial = idx;
            trial[fi] = k;
            Ok(predict_yield(model, &point(&trial))? >= level)
        };
        let (mut a, mut b) = (idx[fi], idx[fi]);
        while a > 0 && ok(a - 1)? {
            a -= 1;
        }
        while b + 1 < vals.len() && ok(b + 1)? {
            b += 1;
        }
        intervals.push(FactorInterval {
            factor: Factor::ALL[fi],
            lower: vals[a],
            upper: vals[b],
        });
    }
    Ok(Some(RecommendedWindow {
        optimum: point(&idx),
        optimum_yield: best,
        level,
        intervals,
    }))
}

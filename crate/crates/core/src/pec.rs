//! Density-dependent proximity correction: the onset-dose model, onset
//! extraction from underexposure counts, robust (eta, A) fitting, dose
//! multiplier maps and flatness checks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldkernel::{local_density, make_psf_kernel, Convolver, PsfParams};
use crate::layout::{rasterize_onto, GridFrame, Layout, RasterGrid};
use crate::rng;
use crate::virtualfab::{expose_with, ClassifyRules, Dose, PatternSimulator};

/// Onset dose `A (1 + eta) / (1 + 2 rho eta)`.
pub fn dl_model(rho: f64, eta: f64, a: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid(format!("rho must be in (0, 1), got {rho}")));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!(
            "eta must be finite and >= 0, got {eta}"
        )));
    }
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::invalid(format!("A must be positive, got {a}")));
    }
    Ok(a * (1.0 + eta) / (1.0 + 2.0 * rho * eta))
}

fn model_shape(rho: f64, eta: f64) -> f64 {
    (1.0 + eta) / (1.0 + 2.0 * rho * eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnsetPoint {
    pub rho: f64,
    #[serde(rename = "D_l")]
    pub d_l: f64,
}

impl OnsetPoint {
    pub fn new(rho: f64, d_l: f64) -> Result<Self> {
        let p = OnsetPoint { rho, d_l };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::invalid(format!(
                "rho must be in (0, 1), got {}",
                self.rho
            )));
        }
        if !(self.d_l > 0.0 && self.d_l.is_finite()) {
            return Err(Error::invalid(format!(
                "onset dose must be positive, got {}",
                self.d_l
            )));
        }
        Ok(())
    }
}

/// Least-squares non-increasing fit (pool adjacent violators, equal weights).
pub fn isotonic_decreasing(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 >= m2 {
                break;
            }
            blocks.pop();
            let n = n1 + n2;
            *blocks.last_mut().unwrap() = ((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, n)| std::iter::repeat_n(m, n))
        .collect()
}

/// Dose where the monotone projection of `f_u(D)` falls through 0.5, or
/// `None` if it stays on one side.
pub fn onset_from_counts(data: &[(f64, f64)]) -> Result<Option<f64>> {
    if data.len() < 2 {
        return Err(Error::invalid("need at least 2 (dose, f_u) samples"));
    }
    for w in data.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(Error::invalid(format!(
                "doses must be strictly increasing ({} then {})",
                w[0].0, w[1].0
            )));
        }
    }
    if let Some(s) = data
        .iter()
        .find(|s| !(0.0..=1.0).contains(&s.1) || !s.0.is_finite())
    {
        return Err(Error::invalid(format!(
            "invalid sample D={}, f_u={}",
            s.0, s.1
        )));
    }
    let f: Vec<f64> = isotonic_decreasing(&data.iter().map(|s| s.1).collect::<Vec<_>>());
    for i in 0..f.len() - 1 {
        if f[i] >= 0.5 && f[i + 1] < 0.5 {
            let (x0, x1) = (data[i].0, data[i + 1].0);
            return Ok(Some(x0 + (0.5 - f[i]) * (x1 - x0) / (f[i + 1] - f[i])));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    ClosedForm,
    Irls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaFit {
    pub eta: f64,
    #[serde(rename = "A")]
    pub a: f64,
    pub r_squared: f64,
    pub n_points: usize,
    pub robust_weights: Vec<f64>,
    /// The unconstrained optimum had eta < 0; eta was pinned at 0.
    pub clamped: bool,
    pub method: FitMethod,
    pub iterations: usize,
}

impl EtaFit {
    pub fn predict(&self, rho: f64) -> Result<f64> {
        dl_model(rho, self.eta, self.a)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite() && self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::invalid(format!(
                "invalid eta fit: eta={}, A={}",
                self.eta, self.a
            )));
        }
        if !(0.0..=1.0).contains(&self.r_squared) {
            return Err(Error::invalid(format!(
                "r_squared {} outside [0, 1]",
                self.r_squared
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: EtaFit = serde_json::from_str(s)?;
        f.validate()?;
        Ok(f)
    }
}

/// Huber tuning constant (95% efficiency under Gaussian errors).
pub const HUBER_K: f64 = 1.345;
/// Converts a median absolute residual into a Gaussian-consistent scale.
const MAD_TO_SIGMA: f64 = 1.4826;

fn validate_points(points: &[OnsetPoint]) -> Result<()> {
    if points.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 onset points, got {}",
            points.len()
        )));
    }
    for p in points {
        p.validate()?;
    }
    if points.iter().all(|p| p.rho == points[0].rho) {
        return Err(Error::Unidentifiable(points[0].rho));
    }
    Ok(())
}

/// Relative residuals `(D - model) / D`.
fn residuals(points: &[OnsetPoint], eta: f64, a: f64) -> Vec<f64> {
    points
        .iter()
        .map(|p| 1.0 - a * model_shape(p.rho, eta) / p.d_l)
        .collect()
}

fn weighted_sse(points: &[OnsetPoint], w: &[f64], eta: f64, a: f64) -> f64 {
    residuals(points, eta, a)
        .iter()
        .zip(w)
        .map(|(r, w)| w * r * r)
        .sum()
}

/// Weighted least-squares A for fixed eta.
fn best_a(points: &[OnsetPoint], w: &[f64], eta: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (p, &wi) in points.iter().zip(w) {
        let h = model_shape(p.rho, eta) / p.d_l;
        num += wi * h;
        den += wi * h * h;
    }
    num / den
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn huber_weights(r: &[f64]) -> Vec<f64> {
    let mut abs: Vec<f64> = r.iter().map(|v| v.abs()).collect();
    let c = HUBER_K * MAD_TO_SIGMA * median(&mut abs);
    if c <= 1e-14 {
        return vec![1.0; r.len()];
    }
    r.iter()
        .map(|v| if v.abs() <= c { 1.0 } else { c / v.abs() })
        .collect()
}

/// Gauss-Newton normal equations `(H00, H01, H11, g0, g1)` for `(eta, A)`.
fn normal_equations(points: &[OnsetPoint], w: &[f64], eta: f64, a: f64) -> [f64; 5] {
    let mut n = [0.0; 5];
    for (p, &wi) in points.iter().zip(w) {
        let den = 1.0 + 2.0 * p.rho * eta;
        let shape = (1.0 + eta) / den;
        let dshape = (1.0 - 2.0 * p.rho) / (den * den);
        let r = 1.0 - a * shape / p.d_l;
        // J columns: d r / d eta, d r / d A
        let je = -a * dshape / p.d_l;
        let ja = -shape / p.d_l;
        n[0] += wi * je * je;
        n[1] += wi * je * ja;
        n[2] += wi * ja * ja;
        n[3] += wi * je * r;
        n[4] += wi * ja * r;
    }
    n
}

/// Solve the 2x2 system with Levenberg damping `mu`; `None` if singular.
fn damped_step(n: &[f64; 5], mu: f64) -> Option<(f64, f64)> {
    let (d00, d11) = (n[0] * (1.0 + mu), n[2] * (1.0 + mu));
    let det = d00 * d11 - n[1] * n[1];
    if det <= 0.0 || !det.is_finite() {
        return None;
    }
    Some((
        -(d11 * n[3] - n[1] * n[4]) / det,
        -(d00 * n[4] - n[1] * n[3]) / det,
    ))
}

/// Damped Gauss-Newton on `(eta, A)` with fixed weights; eta kept >= 0.
fn weighted_gauss_newton(points: &[OnsetPoint], w: &[f64], mut eta: f64, mut a: f64) -> (f64, f64) {
    let mut f = weighted_sse(points, w, eta, a);
    let mut mu = 1e-3;
    for _ in 0..500 {
        let n = normal_equations(points, w, eta, a);
        let mut improved = false;
        while mu < 1e12 {
            let Some((de, da)) = damped_step(&n, mu) else {
                mu *= 10.0;
                continue;
            };
            let (te, ta) = ((eta + de).max(0.0), a + da);
            if ta > 0.0 {
                let ft = weighted_sse(points, w, te, ta);
                if ft < f {
                    eta = te;
                    a = ta;
                    f = ft;
                    mu = (mu * 0.1).max(1e-12);
                    improved = true;
                    break;
                }
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    // Objective decrease cannot resolve the last digits (the SSE is flat to
    // rounding there), so finish with undamped steps judged by their size.
    for _ in 0..30 {
        let Some((de, da)) = damped_step(&normal_equations(points, w, eta, a), 0.0) else {
            break;
        };
        let (te, ta) = ((eta + de).max(0.0), a + da);
        let step = ((te - eta).abs() / eta.max(1.0)).max((ta - a).abs() / a);
        if ta <= 0.0 || step > 1e-4 {
            break;
        }
        eta = te;
        a = ta;
        if step < 1e-15 {
            break;
        }
    }
    (eta, a)
}

/// Derivative of the weighted SSE in eta with A re-optimized, evaluated at
/// eta = 0; positive means the constrained optimum sits on the bound.
fn pinned_at_zero(points: &[OnsetPoint], w: &[f64], a: f64) -> bool {
    let mut g = 0.0;
    for (p, &wi) in points.iter().zip(w) {
        let r = 1.0 - a / p.d_l;
        let je = -a * (1.0 - 2.0 * p.rho) / p.d_l;
        g += wi * je * r;
    }
    g > 0.0
}

fn r_squared(points: &[OnsetPoint], eta: f64, a: f64) -> f64 {
    let n = points.len() as f64;
    let mean = points.iter().map(|p| p.d_l).sum::<f64>() / n;
    let ss_tot: f64 = points.iter().map(|p| (p.d_l - mean).powi(2)).sum();
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.d_l - a * model_shape(p.rho, eta)).powi(2))
        .sum();
    if ss_tot <= f64::EPSILON * mean * mean * n {
        return if ss_res <= f64::EPSILON * mean * mean * n {
            1.0
        } else {
            0.0
        };
    }
    (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
}

/// Closed-form `(eta, A)` through two onset points. `eta` may come out
/// negative; callers decide how to treat it.
pub fn two_point_inversion(p1: OnsetPoint, p2: OnsetPoint) -> Result<(f64, f64)> {
    p1.validate()?;
    p2.validate()?;
    if p1.rho == p2.rho {
        return Err(Error::Unidentifiable(p1.rho));
    }
    // D1 (1 + 2 rho1 eta) = D2 (1 + 2 rho2 eta)
    let den = 2.0 * (p1.rho * p1.d_l - p2.rho * p2.d_l);
    if den == 0.0 {
        return Err(Error::invalid(
            "onset doses scale exactly as 1/rho; eta diverges",
        ));
    }
    let eta = (p2.d_l - p1.d_l) / den;
    let a = p1.d_l * (1.0 + 2.0 * p1.rho * eta) / (1.0 + eta);
    Ok((eta, a))
}

fn initial_eta(points: &[OnsetPoint]) -> f64 {
    let w = vec![1.0; points.len()];
    let mut best = (f64::INFINITY, 0.0);
    let grid =
        std::iter::once(0.0).chain((0..=60).map(|k| 10f64.powf(-2.0 + 6.0 * k as f64 / 60.0)));
    for eta in grid {
        let a = best_a(points, &w, eta);
        let s = weighted_sse(points, &w, eta, a);
        if s < best.0 {
            best = (s, eta);
        }
    }
    best.1
}

/// Iteratively reweighted Gauss-Newton fit under a Huber loss on relative
/// residuals, regardless of the number of points.
pub fn fit_eta_iterative(points: &[OnsetPoint]) -> Result<EtaFit> {
    validate_points(points)?;
    let n = points.len();
    let mut w = vec![1.0; n];
    let mut eta = initial_eta(points);
    let mut a = best_a(points, &w, eta);
    let mut iterations = 0;
    for it in 1..=200 {
        iterations = it;
        let (e2, a2) = weighted_gauss_newton(points, &w, eta, a);
        let moved = (e2 - eta).abs() > 1e-13 * e2.max(1.0) || (a2 - a).abs() > 1e-13 * a2;
        eta = e2;
        a = a2;
        let w2 = huber_weights(&residuals(points, eta, a));
        let reweighted = w2.iter().zip(&w).any(|(x, y)| (x - y).abs() > 1e-12);
        w = w2;
        if !moved && !reweighted {
            break;
        }
    }
    let clamped = eta == 0.0 && pinned_at_zero(points, &w, a);
    if !(a > 0.0 && a.is_finite() && eta.is_finite()) {
        return Err(Error::NotConverged {
            what: "eta fit",
            iterations,
            residual: weighted_sse(points, &w, eta, a),
        });
    }
    Ok(EtaFit {
        eta,
        a,
        r_squared: r_squared(points, eta, a),
        n_points: n,
        robust_weights: w,
        clamped,
        method: FitMethod::Irls,
        iterations,
    })
}

/// Fit `(eta, A)` to onset points. Two points use the closed-form inversion;
/// more use [`fit_eta_iterative`]. A negative-eta optimum is pinned at 0.
pub fn fit_eta(points: &[OnsetPoint]) -> Result<EtaFit> {
    validate_points(points)?;
    if points.len() != 2 {
        return fit_eta_iterative(points);
    }
    let (eta, a) = two_point_inversion(points[0], points[1])?;
    if eta < 0.0 {
        // the constrained optimum is the eta = 0 fit, which only the
        // reweighted solver computes consistently
        return fit_eta_iterative(points).map(|f| EtaFit {
            method: FitMethod::ClosedForm,
            ..f
        });
    }
    Ok(EtaFit {
        eta,
        a,
        r_squared: r_squared(points, eta, a),
        n_points: 2,
        robust_weights: vec![1.0, 1.0],
        clamped: false,
        method: FitMethod::ClosedForm,
        iterations: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    /// Development threshold in energy per unit dose.
    pub threshold: f64,
    /// Target energy is `safety * threshold`.
    pub safety: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            threshold: DEFAULT_THRESHOLD,
            safety: 1.05,
            tolerance: 1e-3,
            max_iterations: 50,
        }
    }
}

/// Development threshold (energy per unit dose) used by the simulated
/// process unless configured otherwise.
pub const DEFAULT_THRESHOLD: f64 = 0.18;

#[derive(Debug, Clone, PartialEq)]
pub struct DoseMap {
    pub multipliers: RasterGrid,
    pub eta: f64,
    pub refined: bool,
    pub converged: bool,
    /// Max relative energy deviation on pattern pixels, one entry per
    /// accepted step (the first is the density rule alone).
    pub residual_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectDose {
    pub rect_id: usize,
    pub multiplier: f64,
}

impl DoseMap {
    /// Mean multiplier over each rect's pixels.
    pub fn rect_assignments(&self, layout: &Layout) -> Vec<RectDose> {
        let frame = self.multipliers.frame();
        layout
            .rects()
            .iter()
            .enumerate()
            .map(|(rect_id, r)| {
                let px = frame.rect_pixels(r);
                let m = if px.is_empty() {
                    1.0
                } else {
                    px.iter()
                        .map(|&i| self.multipliers.values()[i])
                        .sum::<f64>()
                        / px.len() as f64
                };
                RectDose {
                    rect_id,
                    multiplier: m,
                }
            })
            .collect()
    }

    pub fn final_residual(&self) -> Option<f64> {
        self.residual_history.last().copied()
    }
}

/// Admissible multiplier range: from the large-eta, near-full-density limit
/// `1/(2 * 0.999)` up to the isolated-feature value `1 + eta`.
pub fn multiplier_bounds(eta: f64) -> (f64, f64) {
    (1.0 / (2.0 * 0.999), 1.0 + eta)
}

fn max_rel_deviation(energy: &[f64], on: &[usize], target: f64) -> f64 {
    on.iter()
        .map(|&i| (energy[i] / target - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Dose multipliers for a binary pattern.
///
/// The density rule sets `m = (1+eta)/(1+2 eta rho(x))` on pattern pixels,
/// with `rho` the backscatter-range local density. With `refine`, the map is
/// then iterated as `m <- m * E_target / E(x)` until every pattern pixel
/// receives `E_target` within `tolerance`. Non-pattern pixels stay at 1.
/// `eta = 0` disables correction and returns all ones.
pub fn dose_multiplier_map(
    pattern: &RasterGrid,
    eta: f64,
    psf: &PsfParams,
    refine: Option<&RefineOptions>,
) -> Result<DoseMap> {
    pattern.ensure_binary()?;
    if pattern.count_set() == 0 {
        return Err(Error::invalid("pattern has no exposed pixels"));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!(
            "eta must be finite and >= 0, got {eta}"
        )));
    }
    if (eta - psf.eta).abs() > 1e-9 * eta.max(1.0) {
        return Err(Error::invalid(format!(
            "eta {eta} disagrees with the PSF backscatter ratio {}",
            psf.eta
        )));
    }
    let frame = *pattern.frame();
    if eta == 0.0 {
        return Ok(DoseMap {
            multipliers: RasterGrid::filled(frame, 1.0),
            eta,
            refined: false,
            converged: true,
            residual_history: Vec::new(),
        });
    }
    let rho = local_density(pattern, psf)?;
    let on: Vec<usize> = (0..frame.len())
        .filter(|&i| pattern.values()[i] != 0.0)
        .collect();
    let mut m = vec![1.0; frame.len()];
    for &i in &on {
        m[i] = model_shape(rho.values()[i], eta);
    }
    let Some(opts) = refine else {
        return Ok(DoseMap {
            multipliers: RasterGrid::from_values(frame, m)?,
            eta,
            refined: false,
            converged: true,
            residual_history: Vec::new(),
        });
    };
    if !(opts.threshold > 0.0 && opts.safety > 0.0 && opts.tolerance > 0.0) {
        return Err(Error::invalid(
            "refinement threshold, safety and tolerance must be positive",
        ));
    }
    let kernel = make_psf_kernel(psf, frame.pixel_size)?;
    let conv = Convolver::new(&kernel, &frame)?;
    let target = opts.threshold * opts.safety;
    let (lo, hi) = multiplier_bounds(eta);
    let energy_of = |m: &[f64]| -> Result<Vec<f64>> {
        let map = RasterGrid::from_values(frame, m.to_vec())?;
        Ok(expose_with(&conv, pattern, Dose::Map(&map))?.into_values())
    };
    let mut e = energy_of(&m)?;
    let mut res = max_rel_deviation(&e, &on, target);
    let mut history = vec![res];
    // Update m <- m (E_target/E)^w. A step that would raise the max residual
    // is retried with half the exponent, so the history never increases.
    let mut w = 1.0;
    while res >= opts.tolerance && history.len() <= opts.max_iterations {
        let trial: Vec<f64> = m
            .iter()
            .enumerate()
            .map(|(i, &mi)| {
                if pattern.values()[i] != 0.0 {
                    (mi * (target / e[i]).powf(w)).clamp(lo, hi)
                } else {
                    mi
                }
            })
            .collect();
        let e_trial = energy_of(&trial)?;
        let r_trial = max_rel_deviation(&e_trial, &on, target);
        if r_trial < res {
            m = trial;
            e = e_trial;
            res = r_trial;
            history.push(res);
            w = (w * 2.0).min(1.0);
        } else {
            w *= 0.5;
            if w < 1.0 / 64.0 {
                break;
            }
        }
    }
    let converged = res < opts.tolerance;
    Ok(DoseMap {
        multipliers: RasterGrid::from_values(frame, m)?,
        eta,
        refined: true,
        converged,
        residual_history: history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub n: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// `max / min`.
    pub ratio: f64,
    /// Largest `|D_l - mean|`.
    pub max_deviation: f64,
    /// `max_deviation / mean`.
    pub max_relative_deviation: f64,
}

pub fn flatness_report(onsets: &[OnsetPoint]) -> Result<FlatnessReport> {
    if onsets.len() < 2 {
        return Err(Error::invalid("flatness needs at least 2 onsets"));
    }
    for p in onsets {
        p.validate()?;
    }
    let d: Vec<f64> = onsets.iter().map(|p| p.d_l).collect();
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let max = d.iter().copied().fold(0.0, f64::max);
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let max_deviation = d.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    Ok(FlatnessReport {
        n: d.len(),
        min,
        max,
        mean,
        ratio: max / min,
        max_deviation,
        max_relative_deviation: max_deviation / mean,
    })
}

/// Synthetic onset study: `dl_model` at each rho times `1 + noise * U(-1, 1)`.
pub fn synthetic_onsets(
    eta: f64,
    a: f64,
    rhos: &[f64],
    noise: f64,
    seed: u64,
) -> Result<Vec<OnsetPoint>> {
    if !(0.0..1.0).contains(&noise) {
        return Err(Error::invalid(format!(
            "relative noise must be in [0, 1), got {noise}"
        )));
    }
    let mut r = rng::stream(seed, 0x0E7A);
    rhos.iter()
        .map(|&rho| {
            let u: f64 = r.random_range(-1.0..1.0);
            OnsetPoint::new(rho, dl_model(rho, eta, a)? * (1.0 + noise * u))
        })
        .collect()
}

/// Geometry and process settings for simulated lead-array onset studies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadStudy {
    pub n_leads: usize,
    pub pitch: f64,
    pub length: f64,
    pub pixel_size: f64,
    pub margin: f64,
    pub threshold: f64,
    pub rules: ClassifyRules,
}

impl Default for LeadStudy {
    fn default() -> Self {
        LeadStudy {
            n_leads: 6,
            pitch: 70.0,
            length: 500.0,
            pixel_size: 5.0,
            margin: 900.0,
            threshold: DEFAULT_THRESHOLD,
            rules: ClassifyRules::default(),
        }
    }
}

/// Onset doses of one layout with and without a dose map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedOnset {
    pub name: String,
    /// Nominal fill fraction, if the layout is a lead array.
    pub rho: Option<f64>,
    /// Local density averaged over the pattern pixels.
    pub rho_local: f64,
    pub uncorrected: f64,
    pub corrected: Option<f64>,
}

/// Simulated exposure of one layout on its own grid.
pub struct LayoutSim {
    pub layout: Layout,
    pub pattern: RasterGrid,
    pub psf: PsfParams,
    conv: Convolver,
    rules: ClassifyRules,
}

impl LayoutSim {
    pub fn new(
        layout: &Layout,
        psf: &PsfParams,
        pixel_size: f64,
        margin: f64,
        rules: ClassifyRules,
    ) -> Result<Self> {
        let pattern = crate::layout::rasterize(layout, pixel_size, margin)?;
        Self::on_frame(layout, psf, pattern.frame(), rules)
    }

    pub fn on_frame(
        layout: &Layout,
        psf: &PsfParams,
        frame: &GridFrame,
        rules: ClassifyRules,
    ) -> Result<Self> {
        let pattern = rasterize_onto(layout, frame);
        let kernel = make_psf_kernel(psf, frame.pixel_size)?;
        let conv = Convolver::new(&kernel, frame)?;
        Ok(LayoutSim {
            layout: layout.clone(),
            pattern,
            psf: *psf,
            conv,
            rules,
        })
    }

    pub fn simulator(&self, dose_map: Option<&RasterGrid>) -> Result<PatternSimulator> {
        PatternSimulator::new(
            &self.layout,
            self.pattern.clone(),
            &self.conv,
            dose_map,
            self.rules,
        )
    }

    pub fn onset(&self, dose_map: Option<&RasterGrid>, threshold: f64) -> Result<f64> {
        self.simulator(dose_map)?.onset_dose(threshold)
    }

    pub fn mean_local_density(&self) -> Result<f64> {
        let rho = local_density(&self.pattern, &self.psf)?;
        let (mut s, mut n) = (0.0, 0usize);
        for (r, p) in rho.values().iter().zip(self.pattern.values()) {
            if *p != 0.0 {
                s += r;
                n += 1;
            }
        }
        Ok(s / n as f64)
    }
}

/// Fraction of `replicates` devices underexposed at each dose when each
/// device's threshold is jittered by `1 + jitter * U(-1, 1)`. Onset scales
/// linearly with threshold, so only the nominal onset is needed.
pub fn underexposed_fractions(
    onset: f64,
    doses: &[f64],
    replicates: usize,
    jitter: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if replicates == 0 {
        return Err(Error::invalid("need at least one replicate"));
    }
    if !(0.0..1.0).contains(&jitter) {
        return Err(Error::invalid(format!(
            "threshold jitter must be in [0, 1), got {jitter}"
        )));
    }
    let mut r = rng::stream(seed, 0xF00D);
    let onsets: Vec<f64> = (0..replicates)
        .map(|_| onset * (1.0 + jitter * r.random_range(-1.0..1.0)))
        .collect();
    Ok(doses
        .iter()
        .map(|&d| onsets.iter().filter(|&&o| d < o).count() as f64 / replicates as f64)
        .collect())
}

/// Underexposed fractions drawn from the logistic onset response of the
/// density model: each of `replicates` devices fails with probability
/// `onset_dose_response(rho, D)`.
pub fn model_fractions(
    rho: f64,
    eta: f64,
    a: f64,
    width: f64,
    doses: &[f64],
    replicates: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if replicates == 0 {
        return Err(Error::invalid("need at least one replicate"));
    }
    let mut r = rng::stream(seed, rng::hash_f64s(&[rho]));
    doses
        .iter()
        .map(|&d| {
            let p = crate::virtualfab::onset_dose_response(rho, d, eta, a, width)?;
            let k = (0..replicates).filter(|_| r.random::<f64>() < p).count();
            Ok(k as f64 / replicates as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_filling_returns_a() {
        for eta in [0.0, 1.0, 5.0, 100.0] {
            assert_eq!(dl_model(0.5, eta, 0.65).unwrap(), 0.65);
        }
        for rho in [0.1, 0.3, 0.9] {
            assert_eq!(dl_model(rho, 0.0, 0.65).unwrap(), 0.65);
        }
    }

    #[test]
    fn dl_model_examples_and_domain() {
        assert!((dl_model(0.19, 5.0, 0.65).unwrap() - 1.344_827_586_206_896_6).abs() < 1e-12);
        assert!((dl_model(0.25, 1e6, 1.0).unwrap() / 2.0 - 1.0).abs() < 1e-4);
        assert!(dl_model(0.0, 5.0, 1.0).is_err());
        assert!(dl_model(1.0, 5.0, 1.0).is_err());
        assert!(dl_model(0.5, -1.0, 1.0).is_err());
        assert!(dl_model(0.5, 1.0, 0.0).is_err());
    }

    #[test]
    fn isotonic_pools_violators() {
        assert_eq!(
            isotonic_decreasing(&[0.9, 0.5, 0.7, 0.1]),
            vec![0.9, 0.6, 0.6, 0.1]
        );
        assert_eq!(isotonic_decreasing(&[0.1, 0.3]), vec![0.2, 0.2]);
    }

    #[test]
    fn onset_by_hand() {
        let d = onset_from_counts(&[(0.4, 0.9), (0.6, 0.6), (0.8, 0.4)])
            .unwrap()
            .unwrap();
        assert!((d - 0.7).abs() < 1e-12);
        assert!(onset_from_counts(&[(0.4, 1.0), (0.6, 1.0)])
            .unwrap()
            .is_none());
        assert!(onset_from_counts(&[(0.6, 1.0), (0.4, 0.0)]).is_err());
        assert!(onset_from_counts(&[(0.4, 1.2), (0.6, 0.0)]).is_err());
    }

    #[test]
    fn two_point_endpoints() {
        let pts = [
            OnsetPoint::new(0.19, 1.30).unwrap(),
            OnsetPoint::new(0.55, 0.60).unwrap(),
        ];
        let f = fit_eta(&pts).unwrap();
        assert!((f.eta - 4.2169).abs() < 1e-4, "{f:?}");
        assert!((f.a - 0.6485).abs() < 1e-4, "{f:?}");
        assert_eq!(f.method, FitMethod::ClosedForm);
    }

    #[test]
    fn equal_rho_is_unidentifiable() {
        let pts = [
            OnsetPoint::new(0.3, 1.0).unwrap(),
            OnsetPoint::new(0.3, 1.1).unwrap(),
        ];
        assert!(matches!(fit_eta(&pts), Err(Error::Unidentifiable(_))));
    }

    #[test]
    fn noiseless_recovery() {
        let rhos: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
        let pts = synthetic_onsets(5.0, 0.65, &rhos, 0.0, 1).unwrap();
        let f = fit_eta(&pts).unwrap();
        assert!((f.eta - 5.0).abs() < 1e-8, "{f:?}");
        assert!((f.a - 0.65).abs() < 1e-8, "{f:?}");
        assert!(f.r_squared > 1.0 - 1e-12);
    }

    #[test]
    fn increasing_onsets_clamp_eta() {
        let pts = [
            OnsetPoint::new(0.2, 0.5).unwrap(),
            OnsetPoint::new(0.5, 0.6).unwrap(),
            OnsetPoint::new(0.8, 0.7).unwrap(),
        ];
        let f = fit_eta(&pts).unwrap();
        assert_eq!(f.eta, 0.0);
        assert!(f.clamped);
        let f2 = fit_eta(&pts[..2]).unwrap();
        assert!(f2.clamped && f2.eta == 0.0);
    }

    #[test]
    fn flatness_examples() {
        let same = [
            OnsetPoint::new(0.2, 0.7).unwrap(),
            OnsetPoint::new(0.5, 0.7).unwrap(),
        ];
        assert_eq!(flatness_report(&same).unwrap().ratio, 1.0);
        let paper = [
            OnsetPoint::new(0.19, 1.30).unwrap(),
            OnsetPoint::new(0.55, 0.60).unwrap(),
        ];
        assert!((flatness_report(&paper).unwrap().ratio - 2.1667).abs() < 1e-4);
    }

    #[test]
    fn eta_zero_map_is_unity() {
        let design = crate::layout::lead_array(3, 70.0, 35.0, 200.0).unwrap();
        let pattern = crate::layout::rasterize(&design, 5.0, 100.0).unwrap();
        let psf = PsfParams::default().with_eta(0.0).unwrap();
        let m = dose_multiplier_map(&pattern, 0.0, &psf, Some(&RefineOptions::default())).unwrap();
        assert!(m.multipliers.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn eta_must_match_psf() {
        let design = crate::layout::lead_array(1, 70.0, 35.0, 200.0).unwrap();
        let pattern = crate::layout::rasterize(&design, 5.0, 100.0).unwrap();
        assert!(dose_multiplier_map(&pattern, 3.0, &PsfParams::default(), None).is_err());
    }

    #[test]
    fn jittered_fractions_cross_at_onset() {
        let doses: Vec<f64> = (0..41).map(|k| 0.5 + 0.025 * k as f64).collect();
        let f = underexposed_fractions(1.0, &doses, 400, 0.1, 3).unwrap();
        let pairs: Vec<(f64, f64)> = doses.iter().copied().zip(f).collect();
        let d = onset_from_counts(&pairs).unwrap().unwrap();
        assert!((d - 1.0).abs() < 0.03, "{d}");
    }
}

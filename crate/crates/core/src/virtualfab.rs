//! Simulated fabrication: exposure, development and outcome classification,
//! plus the five-factor process response used to label design points.
//!
//! Two independent ground-truth generators live here:
//!
//! - a physical one ([`simulate_exposure`] → [`develop`] → [`classify_outcome`])
//!   acting on rasterized layouts;
//! - a phenomenological one ([`ProcessModel`]) mapping a [`DesignPoint`] in
//!   dose / resist thickness / cap thickness / exposure delay / development
//!   time to outcome probabilities.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldkernel::{make_psf_kernel, Convolver, PsfParams};
use crate::layout::{
    check_resolution, label_components, rasterize_onto, GridFrame, Layout, RasterGrid,
};
use crate::rng;

/// The five process factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Factor {
    /// Exposure dose, mC/cm^2.
    Dose,
    /// HSQ resist thickness, nm.
    DHsq,
    /// Aluminium cap thickness, nm.
    DAl,
    /// Delay between spin-on and exposure, hours.
    THsq,
    /// Development time in MF312, minutes.
    TMf312,
}

impl Factor {
    pub const ALL: [Factor; 5] = [
        Factor::Dose,
        Factor::DHsq,
        Factor::DAl,
        Factor::THsq,
        Factor::TMf312,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Factor::Dose => "D",
            Factor::DHsq => "d_hsq",
            Factor::DAl => "d_al",
            Factor::THsq => "t_hsq",
            Factor::TMf312 => "t_mf312",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Factor::Dose => "mC/cm^2",
            Factor::DHsq | Factor::DAl => "nm",
            Factor::THsq => "hr",
            Factor::TMf312 => "min",
        }
    }

    pub fn names() -> String {
        Factor::ALL.map(|f| f.name()).join(", ")
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Factor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Factor::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown factor {s:?}; valid axes are {}",
                    Factor::names()
                ))
            })
    }
}

/// One point of the five-factor design space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    #[serde(rename = "D")]
    pub dose: f64,
    pub d_hsq: f64,
    pub d_al: f64,
    pub t_hsq: f64,
    pub t_mf312: f64,
}

impl DesignPoint {
    pub fn new(dose: f64, d_hsq: f64, d_al: f64, t_hsq: f64, t_mf312: f64) -> Result<Self> {
        let p = DesignPoint {
            dose,
            d_hsq,
            d_al,
            t_hsq,
            t_mf312,
        };
        p.validate()?;
        Ok(p)
    }

    /// Centre of the reference yield curves: 1.0 mC/cm^2, 50 nm HSQ, 15 nm Al,
    /// 48 h delay, 2 min development.
    pub const fn reference() -> Self {
        DesignPoint {
            dose: 1.0,
            d_hsq: 50.0,
            d_al: 15.0,
            t_hsq: 48.0,
            t_mf312: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for f in Factor::ALL {
            let v = self.get(f);
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "{f} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.dose, self.d_hsq, self.d_al, self.t_hsq, self.t_mf312]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        DesignPoint {
            dose: a[0],
            d_hsq: a[1],
            d_al: a[2],
            t_hsq: a[3],
            t_mf312: a[4],
        }
    }

    pub fn get(&self, f: Factor) -> f64 {
        self.to_array()[f.index()]
    }

    pub fn with(&self, f: Factor, v: f64) -> Self {
        let mut a = self.to_array();
        a[f.index()] = v;
        DesignPoint::from_array(a)
    }

    pub fn content_hash(&self) -> u64 {
        rng::hash_f64s(&self.to_array())
    }
}

/// Valid ranges per factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorBounds {
    pub lower: [f64; 5],
    pub upper: [f64; 5],
}

impl Default for FactorBounds {
    /// Ranges explored experimentally. Development time spans 2–4 min.
    fn default() -> Self {
        FactorBounds {
            lower: [0.4, 20.0, 0.0, 10.0, 2.0],
            upper: [2.8, 80.0, 20.0, 120.0, 4.0],
        }
    }
}

impl FactorBounds {
    pub fn validate(&self) -> Result<()> {
        for f in Factor::ALL {
            let (lo, hi) = self.range(f);
            if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
                return Err(Error::invalid(format!(
                    "invalid bounds for {f}: [{lo}, {hi}]"
                )));
            }
        }
        if self.lower[Factor::Dose.index()] <= 0.0 {
            return Err(Error::invalid("lower dose bound must be positive"));
        }
        Ok(())
    }

    pub fn range(&self, f: Factor) -> (f64, f64) {
        (self.lower[f.index()], self.upper[f.index()])
    }

    pub fn check(&self, p: &DesignPoint) -> Result<()> {
        p.validate()?;
        for f in Factor::ALL {
            let (lo, hi) = self.range(f);
            let v = p.get(f);
            if v < lo || v > hi {
                return Err(Error::invalid(format!(
                    "{f} = {v} {} is outside [{lo}, {hi}]",
                    f.unit()
                )));
            }
        }
        Ok(())
    }

    /// Uniform sample of `count` points, deterministic in `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<DesignPoint> {
        let mut r = rng::stream(seed, 0x5A3D_1E57);
        (0..count)
            .map(|_| {
                let mut a = [0.0; 5];
                for f in Factor::ALL {
                    let (lo, hi) = self.range(f);
                    a[f.index()] = lo + (hi - lo) * r.random::<f64>();
                }
                DesignPoint::from_array(a)
            })
            .collect()
    }
}

/// Classified device result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeviceOutcome {
    WellFormed,
    Underexposed,
    Overexposed,
    Missing,
    Merged,
    Contamination,
    Collapse,
}

impl DeviceOutcome {
    pub const ALL: [DeviceOutcome; 7] = [
        DeviceOutcome::WellFormed,
        DeviceOutcome::Underexposed,
        DeviceOutcome::Overexposed,
        DeviceOutcome::Missing,
        DeviceOutcome::Merged,
        DeviceOutcome::Contamination,
        DeviceOutcome::Collapse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DeviceOutcome::WellFormed => "WellFormed",
            DeviceOutcome::Underexposed => "Underexposed",
            DeviceOutcome::Overexposed => "Overexposed",
            DeviceOutcome::Missing => "Missing",
            DeviceOutcome::Merged => "Merged",
            DeviceOutcome::Contamination => "Contamination",
            DeviceOutcome::Collapse => "Collapse",
        }
    }

    /// Collapse morphology labels onto the exposure classes used for yield
    /// arithmetic: missing gates count as underexposed, merged gates as
    /// overexposed.
    pub fn exposure_class(self) -> DeviceOutcome {
        match self {
            DeviceOutcome::Missing => DeviceOutcome::Underexposed,
            DeviceOutcome::Merged => DeviceOutcome::Overexposed,
            o => o,
        }
    }

    pub fn is_yielding(self) -> bool {
        self == DeviceOutcome::WellFormed
    }

    pub fn is_underexposed(self) -> bool {
        self.exposure_class() == DeviceOutcome::Underexposed
    }
}

impl fmt::Display for DeviceOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DeviceOutcome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DeviceOutcome::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown outcome label {s:?}")))
    }
}

/// Dose applied to a pattern: one base dose or a per-pixel field.
#[derive(Debug, Clone, Copy)]
pub enum Dose<'a> {
    Uniform(f64),
    Map(&'a RasterGrid),
}

/// Deposited energy `(dose * pattern) ⊛ psf`, in dose units.
pub fn simulate_exposure(
    pattern: &RasterGrid,
    dose: Dose<'_>,
    psf: &PsfParams,
) -> Result<RasterGrid> {
    let kernel = make_psf_kernel(psf, pattern.pixel_size())?;
    let conv = Convolver::new(&kernel, pattern.frame())?;
    expose_with(&conv, pattern, dose)
}

/// [`simulate_exposure`] reusing a prepared convolver.
pub fn expose_with(conv: &Convolver, pattern: &RasterGrid, dose: Dose<'_>) -> Result<RasterGrid> {
    let written: Vec<f64> = match dose {
        Dose::Uniform(d) => {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::invalid(format!(
                    "dose must be finite and >= 0, got {d}"
                )));
            }
            pattern.values().iter().map(|&p| p * d).collect()
        }
        Dose::Map(map) => {
            if !map.same_frame(pattern) {
                return Err(Error::GridMismatch(
                    "dose map frame differs from pattern".into(),
                ));
            }
            if let Some(v) = map.values().iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
                return Err(Error::invalid(format!(
                    "dose map contains invalid dose {v}"
                )));
            }
            pattern
                .values()
                .iter()
                .zip(map.values())
                .map(|(&p, &d)| p * d)
                .collect()
        }
    };
    let energy = conv.apply_values(&written)?;
    // FFT round-off can leave tiny negative values far from the pattern
    RasterGrid::from_values(
        *pattern.frame(),
        energy.into_iter().map(|e| e.max(0.0)).collect(),
    )
}

/// Negative-tone development: resist remains where `energy >= threshold`.
pub fn develop(energy: &RasterGrid, threshold: f64) -> Result<RasterGrid> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::invalid(format!(
            "development threshold must be positive, got {threshold}"
        )));
    }
    Ok(energy.map(|e| if e >= threshold { 1.0 } else { 0.0 }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRules {
    /// Minimum developed fraction of every design rect.
    pub coverage_min: f64,
    /// Largest tolerated developed-outside-design area, as a fraction of the
    /// design area.
    pub bridge_margin: f64,
}

impl Default for ClassifyRules {
    fn default() -> Self {
        ClassifyRules {
            coverage_min: 0.5,
            bridge_margin: 0.2,
        }
    }
}

impl ClassifyRules {
    pub fn validate(&self) -> Result<()> {
        if !(self.coverage_min > 0.0 && self.coverage_min <= 1.0) {
            return Err(Error::invalid(format!(
                "coverage_min must be in (0, 1], got {}",
                self.coverage_min
            )));
        }
        if !(self.bridge_margin >= 0.0 && self.bridge_margin.is_finite()) {
            return Err(Error::invalid(format!(
                "bridge_margin must be >= 0, got {}",
                self.bridge_margin
            )));
        }
        Ok(())
    }

    /// Developed pixels needed for a rect of `n` pixels to count as formed.
    pub fn pixels_required(&self, n: usize) -> usize {
        // guard against coverage_min * n landing a hair above an integer
        ((self.coverage_min * n as f64) - 1e-9).ceil().max(0.0) as usize
    }
}

/// Geometric outcome classifier for one design on one pixel frame.
///
/// Precedence: any rect developed below `coverage_min` → `Underexposed`;
/// otherwise a developed component joining rects that are disjoint in the
/// design, or excess developed area above `bridge_margin` → `Overexposed`;
/// otherwise `WellFormed`.
#[derive(Debug, Clone)]
pub struct Classifier {
    frame: GridFrame,
    rules: ClassifyRules,
    rect_pixels: Vec<Vec<usize>>,
    /// Design connected-component label per pixel, 0 outside the design.
    design_labels: Vec<u32>,
    design_area: usize,
}

impl Classifier {
    pub fn new(design: &Layout, frame: &GridFrame, rules: ClassifyRules) -> Result<Self> {
        rules.validate()?;
        if design.is_empty() {
            return Err(Error::invalid("cannot classify against an empty design"));
        }
        check_resolution(design, frame.pixel_size)?;
        let rect_pixels: Vec<Vec<usize>> = design
            .rects()
            .iter()
            .map(|r| frame.rect_pixels(r))
            .collect();
        if let Some(i) = rect_pixels.iter().position(|p| p.is_empty()) {
            return Err(Error::invalid(format!(
                "design rect {i} has no pixels on the developed grid"
            )));
        }
        let mask = rasterize_onto(design, frame);
        let (design_labels, _) = label_components(&mask)?;
        let design_area = mask.count_set();
        Ok(Classifier {
            frame: *frame,
            rules,
            rect_pixels,
            design_labels,
            design_area,
        })
    }

    pub fn rules(&self) -> &ClassifyRules {
        &self.rules
    }

    pub fn rect_pixels(&self) -> &[Vec<usize>] {
        &self.rect_pixels
    }

    pub fn is_underexposed(&self, developed: &[f64]) -> bool {
        self.rect_pixels.iter().any(|px| {
            let on = px.iter().filter(|&&i| developed[i] != 0.0).count();
            on < self.rules.pixels_required(px.len())
        })
    }

    pub fn classify(&self, developed: &RasterGrid) -> Result<DeviceOutcome> {
        if developed.frame() != &self.frame {
            return Err(Error::GridMismatch(
                "developed grid frame differs from classifier frame".into(),
            ));
        }
        developed.ensure_binary()?;
        let dev = developed.values();
        if self.is_underexposed(dev) {
            return Ok(DeviceOutcome::Underexposed);
        }

        let (labels, n) = label_components(developed)?;
        let mut joined = vec![0u32; n + 1];
        for (i, &l) in labels.iter().enumerate() {
            let d = self.design_labels[i];
            if l == 0 || d == 0 {
                continue;
            }
            let slot = &mut joined[l as usize];
            if *slot == 0 {
                *slot = d;
            } else if *slot != d {
                return Ok(DeviceOutcome::Overexposed);
            }
        }

        let excess = dev
            .iter()
            .zip(&self.design_labels)
            .filter(|(&v, &d)| v != 0.0 && d == 0)
            .count();
        if excess as f64 > self.rules.bridge_margin * self.design_area as f64 {
            return Ok(DeviceOutcome::Overexposed);
        }
        Ok(DeviceOutcome::WellFormed)
    }
}

/// Classify a developed grid against its design.
pub fn classify_outcome(
    design: &Layout,
    developed: &RasterGrid,
    rules: &ClassifyRules,
) -> Result<DeviceOutcome> {
    Classifier::new(design, developed.frame(), *rules)?.classify(developed)
}

#[derive(Debug, Clone)]
pub struct ExposureResult {
    pub energy: RasterGrid,
    pub developed: RasterGrid,
    pub outcome: DeviceOutcome,
}

/// A rasterized design prepared for repeated exposure at varying dose.
///
/// Energy is linear in dose, so the per-unit-dose energy is computed once and
/// every (dose, threshold) evaluation reduces to thresholding it at
/// `threshold / dose`.
#[derive(Debug, Clone)]
pub struct PatternSimulator {
    pub pattern: RasterGrid,
    /// Energy deposited by unit base dose (times the dose map, if any).
    pub unit_energy: RasterGrid,
    classifier: Classifier,
}

impl PatternSimulator {
    pub fn new(
        design: &Layout,
        pattern: RasterGrid,
        conv: &Convolver,
        dose_map: Option<&RasterGrid>,
        rules: ClassifyRules,
    ) -> Result<Self> {
        pattern.ensure_binary()?;
        let dose = match dose_map {
            Some(m) => Dose::Map(m),
            None => Dose::Uniform(1.0),
        };
        let unit_energy = expose_with(conv, &pattern, dose)?;
        let classifier = Classifier::new(design, pattern.frame(), rules)?;
        Ok(PatternSimulator {
            pattern,
            unit_energy,
            classifier,
        })
    }

    pub fn expose(&self, dose: f64, threshold: f64) -> Result<ExposureResult> {
        if !(dose > 0.0 && dose.is_finite()) {
            return Err(Error::invalid(format!(
                "base dose must be positive, got {dose}"
            )));
        }
        let energy = self.unit_energy.map(|e| e * dose);
        let developed = develop(&energy, threshold)?;
        let outcome = self.classifier.classify(&developed)?;
        Ok(ExposureResult {
            energy,
            developed,
            outcome,
        })
    }

    pub fn outcome(&self, dose: f64, threshold: f64) -> Result<DeviceOutcome> {
        Ok(self.expose(dose, threshold)?.outcome)
    }

    /// Smallest base dose at which no rect is underexposed.
    ///
    /// Each rect needs its k-th brightest pixel (k from `coverage_min`) at or
    /// above threshold, so the onset is `threshold / min_rect(e_k)`.
    pub fn onset_dose(&self, threshold: f64) -> Result<f64> {
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(Error::invalid("development threshold must be positive"));
        }
        let e = self.unit_energy.values();
        let mut weakest = f64::INFINITY;
        for px in self.classifier.rect_pixels() {
            let k = self.classifier.rules().pixels_required(px.len()).max(1);
            let mut vals: Vec<f64> = px.iter().map(|&i| e[i]).collect();
            vals.sort_unstable_by(|a, b| b.total_cmp(a));
            weakest = weakest.min(vals[k - 1]);
        }
        if weakest <= 0.0 {
            return Err(Error::invalid(
                "pattern receives no energy; onset dose is unbounded",
            ));
        }
        Ok(threshold / weakest)
    }
}

/// Probability split over the three simulated exposure classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeProbabilities {
    pub under: f64,
    pub well: f64,
    pub over: f64,
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Phenomenological five-factor process response.
///
/// Lower and upper dose thresholds follow power laws in the other factors:
///
/// ```text
/// T_l = t_lower * (d_hsq/d_ref)^e_l
/// T_u = t_upper * (d_hsq/d_ref)^e_ud * (t_hsq/t_ref)^e_ut * (t_mf/tmf_ref)^e_um
/// ```
///
/// and the yield logit is quadratic in log dose with its zero set at the two
/// thresholds, shifted by the cap-thickness and development-time terms:
///
/// ```text
/// logit p_well = k ln(D/T_l) ln(T_u/D) + g_al (d_al - d_al_ref)/al_span + g_dev log2(t_mf/tmf_ref)
/// ```
///
/// `k` is solved so that `p_well(reference) = reference_yield`. Non-yielding
/// probability goes to `Underexposed` below `sqrt(T_l T_u)` and to
/// `Overexposed` above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessModel {
    pub reference: DesignPoint,
    pub reference_yield: f64,
    pub t_lower: f64,
    pub t_upper: f64,
    pub lower_exp_dhsq: f64,
    pub upper_exp_dhsq: f64,
    pub upper_exp_thsq: f64,
    pub upper_exp_tmf: f64,
    pub al_gain: f64,
    pub al_span: f64,
    pub dev_gain: f64,
    pub bounds: FactorBounds,
}

impl Default for ProcessModel {
    fn default() -> Self {
        ProcessModel {
            reference: DesignPoint::reference(),
            reference_yield: 0.75,
            t_lower: 0.6,
            t_upper: 2.0,
            lower_exp_dhsq: -0.3,
            upper_exp_dhsq: -0.8,
            upper_exp_thsq: 0.25,
            upper_exp_tmf: 0.3,
            al_gain: 20.0,
            al_span: 20.0,
            dev_gain: 5.0,
            bounds: FactorBounds::default(),
        }
    }
}

impl ProcessModel {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        self.reference.validate()?;
        let r = &self.reference;
        if r.dose <= 0.0 || r.d_hsq <= 0.0 || r.t_hsq <= 0.0 || r.t_mf312 <= 0.0 {
            return Err(Error::invalid(
                "reference dose, thickness and times must be positive",
            ));
        }
        if !(self.reference_yield > 0.5 && self.reference_yield < 1.0) {
            return Err(Error::invalid(format!(
                "reference yield must be in (0.5, 1), got {}",
                self.reference_yield
            )));
        }
        if !(self.t_lower > 0.0 && self.t_lower < r.dose && r.dose < self.t_upper) {
            return Err(Error::invalid(format!(
                "reference dose {} must lie between t_lower {} and t_upper {}",
                r.dose, self.t_lower, self.t_upper
            )));
        }
        if !(self.al_span > 0.0) {
            return Err(Error::invalid("al_span must be positive"));
        }
        let all = [
            self.lower_exp_dhsq,
            self.upper_exp_dhsq,
            self.upper_exp_thsq,
            self.upper_exp_tmf,
            self.al_gain,
            self.dev_gain,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("process model constants must be finite"));
        }
        Ok(())
    }

    /// Dose-curvature constant fixed by the reference calibration.
    pub fn curvature(&self) -> f64 {
        let d = self.reference.dose;
        logit(self.reference_yield) / ((d / self.t_lower).ln() * (self.t_upper / d).ln())
    }

    /// `(T_l, T_u)` at `p`.
    pub fn thresholds(&self, p: &DesignPoint) -> (f64, f64) {
        let r = &self.reference;
        let th = p.d_hsq / r.d_hsq;
        let lower = self.t_lower * th.powf(self.lower_exp_dhsq);
        let upper = self.t_upper
            * th.powf(self.upper_exp_dhsq)
            * (p.t_hsq / r.t_hsq).powf(self.upper_exp_thsq)
            * (p.t_mf312 / r.t_mf312).powf(self.upper_exp_tmf);
        (lower, upper)
    }

    fn offset(&self, p: &DesignPoint) -> f64 {
        let r = &self.reference;
        self.al_gain * (p.d_al - r.d_al) / self.al_span
            + self.dev_gain * (p.t_mf312 / r.t_mf312).log2()
    }

    /// Yield logit. Needs positive dose, thickness and times.
    pub fn logit_well(&self, p: &DesignPoint) -> f64 {
        let (lo, hi) = self.thresholds(p);
        self.curvature() * (p.dose / lo).ln() * (hi / p.dose).ln() + self.offset(p)
    }

    /// Outcome probabilities at `p` (no bounds check).
    pub fn probabilities(&self, p: &DesignPoint) -> OutcomeProbabilities {
        let well = logistic(self.logit_well(p));
        let (lo, hi) = self.thresholds(p);
        if p.dose < (lo * hi).sqrt() {
            OutcomeProbabilities {
                under: 1.0 - well,
                well,
                over: 0.0,
            }
        } else {
            OutcomeProbabilities {
                under: 0.0,
                well,
                over: 1.0 - well,
            }
        }
    }

    /// Doses where `p_well` crosses `level` with the other factors of `p`
    /// held fixed, or `None` if the peak stays below it.
    pub fn dose_window(&self, p: &DesignPoint, level: f64) -> Option<(f64, f64)> {
        let (lo, hi) = self.thresholds(p);
        let (l, u) = (lo.ln(), hi.ln());
        let k = self.curvature();
        // k (x - l)(u - x) + c = logit(level)
        let c = self.offset(p) - logit(level);
        let half = 0.5 * (u - l);
        let disc = half * half + c / k;
        if disc < 0.0 {
            return None;
        }
        let mid = 0.5 * (l + u);
        Some(((mid - disc.sqrt()).exp(), (mid + disc.sqrt()).exp()))
    }

    /// Highest `p_well` along the dose axis through `p`.
    pub fn peak_yield(&self, p: &DesignPoint) -> f64 {
        let (lo, hi) = self.thresholds(p);
        let half = 0.5 * (hi / lo).ln();
        logistic(self.curvature() * half * half + self.offset(p))
    }

    /// Draw one device outcome at `p`, deterministic in `(p, seed)`.
    pub fn process_response(&self, p: &DesignPoint, seed: u64) -> Result<DeviceOutcome> {
        self.bounds.check(p)?;
        let probs = self.probabilities(p);
        let u = rng::unit_draw(seed, p.content_hash());
        Ok(if u < probs.under {
            DeviceOutcome::Underexposed
        } else if u < probs.under + probs.well {
            DeviceOutcome::WellFormed
        } else {
            DeviceOutcome::Overexposed
        })
    }
}

/// Probability that a device at local density `rho` is underexposed at dose
/// `dose` when its onset follows the density model with `(eta, a)`:
/// a logistic step of width `width` centred on the onset dose.
pub fn onset_dose_response(rho: f64, dose: f64, eta: f64, a: f64, width: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid(format!("rho must be in (0, 1), got {rho}")));
    }
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::invalid(format!(
            "response width must be positive, got {width}"
        )));
    }
    let onset = crate::pec::dl_model(rho, eta, a)?;
    Ok(logistic((onset - dose) / width))
}

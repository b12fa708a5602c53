//! Plain-text `key = value` run configuration.
//!
//! Lines are `section.key = value`; `#` starts a comment. Unknown keys are
//! rejected. The seed resolves as `PECLAB_SEED` > `--seed` > `seed =` > 0.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use peclab_core::fieldkernel::PsfParams;
use peclab_core::fmt::g17;
use peclab_core::pec::RefineOptions;
use peclab_core::virtualfab::{ClassifyRules, Factor, FactorBounds, ProcessModel};
use peclab_core::yieldsurface::{FitOptions, Transform};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "PECLAB_SEED";

/// Simulated lead array used by `sweep --mode simulate`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternSettings {
    pub leads: usize,
    pub pitch: f64,
    pub fill: f64,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub psf: PsfParams,
    pub fab: ProcessModel,
    /// Development threshold, energy per unit dose.
    pub threshold: f64,
    /// Per-device relative threshold jitter, `1 + j U(-1, 1)`.
    pub threshold_jitter: f64,
    pub rules: ClassifyRules,
    pub pattern: PatternSettings,
    /// Width of the logistic onset response used by synthetic `f_u` data.
    pub onset_width: f64,
    pub fit: FitOptions,
    pub holdout: f64,
    pub level: f64,
    pub refine: RefineOptions,
    pub pixel_size: f64,
    pub margin: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            psf: PsfParams::default(),
            fab: ProcessModel::default(),
            threshold: peclab_core::pec::DEFAULT_THRESHOLD,
            threshold_jitter: 0.05,
            rules: ClassifyRules::default(),
            pattern: PatternSettings {
                leads: 6,
                pitch: 70.0,
                fill: 0.5,
                length: 500.0,
            },
            onset_width: 0.03,
            fit: FitOptions {
                transforms: FitOptions::log_axes(),
                ..FitOptions::default()
            },
            holdout: 0.2,
            level: 0.5,
            refine: RefineOptions::default(),
            pixel_size: peclab_core::layout::DEFAULT_PIXEL_SIZE,
            margin: 900.0,
        }
    }
}

fn bound_key(f: Factor, upper: bool) -> String {
    format!("fab.{}_{}", f.name(), if upper { "max" } else { "min" })
}

fn transforms_name(t: &[Transform; 5]) -> &'static str {
    if *t == FitOptions::log_axes() {
        "log"
    } else if *t == [Transform::Identity; 5] {
        "identity"
    } else {
        "custom"
    }
}

fn parse_f64(key: &str, v: &str) -> CliResult<f64> {
    let x: f64 = v
        .parse()
        .map_err(|_| CliError::validation(format!("{key}: expected a number, got {v:?}")))?;
    if !x.is_finite() {
        return Err(CliError::validation(format!("{key}: value must be finite")));
    }
    Ok(x)
}

fn parse_usize(key: &str, v: &str) -> CliResult<usize> {
    v.parse().map_err(|_| {
        CliError::validation(format!("{key}: expected a non-negative integer, got {v:?}"))
    })
}

pub fn parse_seed(what: &str, v: &str) -> CliResult<u64> {
    v.trim().parse().map_err(|_| {
        CliError::validation(format!(
            "{what}: expected an unsigned 64-bit seed, got {v:?}"
        ))
    })
}

impl Config {
    /// Parse config text. Every key may appear at most once.
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::validation(format!(
                    "config line {lineno}: expected key = value"
                )));
            };
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(CliError::validation(format!(
                    "config line {lineno}: duplicate key {k}"
                )));
            }
            cfg.set(k, v).map_err(|e| {
                CliError::validation(format!("config line {lineno}: {}", e.message()))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Config::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> CliResult<()> {
        let f = |v: &str| parse_f64(key, v);
        match key {
            "seed" => self.seed = parse_seed(key, v)?,
            "psf.alpha_nm" => self.psf.alpha = f(v)?,
            "psf.beta_nm" => self.psf.beta = f(v)?,
            "psf.eta" => self.psf.eta = f(v)?,
            "fab.reference_yield" => self.fab.reference_yield = f(v)?,
            "fab.t_lower" => self.fab.t_lower = f(v)?,
            "fab.t_upper" => self.fab.t_upper = f(v)?,
            "fab.lower_exp_dhsq" => self.fab.lower_exp_dhsq = f(v)?,
            "fab.upper_exp_dhsq" => self.fab.upper_exp_dhsq = f(v)?,
            "fab.upper_exp_thsq" => self.fab.upper_exp_thsq = f(v)?,
            "fab.upper_exp_tmf" => self.fab.upper_exp_tmf = f(v)?,
            "fab.al_gain" => self.fab.al_gain = f(v)?,
            "fab.al_span" => self.fab.al_span = f(v)?,
            "fab.dev_gain" => self.fab.dev_gain = f(v)?,
            "fab.threshold" => self.threshold = f(v)?,
            "fab.threshold_jitter" => self.threshold_jitter = f(v)?,
            "fab.coverage_min" => self.rules.coverage_min = f(v)?,
            "fab.bridge_margin" => self.rules.bridge_margin = f(v)?,
            "fab.pattern_leads" => self.pattern.leads = parse_usize(key, v)?,
            "fab.pattern_pitch_nm" => self.pattern.pitch = f(v)?,
            "fab.pattern_fill" => self.pattern.fill = f(v)?,
            "fab.pattern_length_nm" => self.pattern.length = f(v)?,
            "fab.onset_width" => self.onset_width = f(v)?,
            "fit.ridge" => self.fit.ridge = f(v)?,
            "fit.tolerance" => self.fit.tolerance = f(v)?,
            "fit.max_iterations" => self.fit.max_iterations = parse_usize(key, v)?,
            "fit.transforms" => {
                self.fit.transforms = match v {
                    "log" => FitOptions::log_axes(),
                    "identity" => [Transform::Identity; 5],
                    _ => {
                        return Err(CliError::validation(format!(
                            "{key}: expected log or identity, got {v:?}"
                        )))
                    }
                }
            }
            "fit.holdout" => self.holdout = f(v)?,
            "fit.level" => self.level = f(v)?,
            "pec.safety" => self.refine.safety = f(v)?,
            "pec.tolerance" => self.refine.tolerance = f(v)?,
            "pec.max_iterations" => self.refine.max_iterations = parse_usize(key, v)?,
            "io.pixel_size_nm" => self.pixel_size = f(v)?,
            "io.margin_nm" => self.margin = f(v)?,
            _ => {
                for fac in Factor::ALL {
                    for upper in [false, true] {
                        if key == bound_key(fac, upper) {
                            let x = f(v)?;
                            if upper {
                                self.fab.bounds.upper[fac.index()] = x;
                            } else {
                                self.fab.bounds.lower[fac.index()] = x;
                            }
                            return Ok(());
                        }
                    }
                }
                return Err(CliError::validation(format!("unknown config key {key:?}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        self.psf.validate()?;
        self.fab.validate()?;
        self.rules.validate()?;
        self.fit.validate()?;
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(CliError::validation(msg.to_string()))
            }
        };
        check(self.threshold > 0.0, "fab.threshold must be positive")?;
        check(
            (0.0..1.0).contains(&self.threshold_jitter),
            "fab.threshold_jitter must be in [0, 1)",
        )?;
        check(
            self.pattern.leads >= 1,
            "fab.pattern_leads must be at least 1",
        )?;
        check(
            self.pattern.fill > 0.0 && self.pattern.fill < 1.0,
            "fab.pattern_fill must be in (0, 1)",
        )?;
        check(
            self.pattern.pitch > 0.0 && self.pattern.length > 0.0,
            "fab.pattern_pitch_nm and fab.pattern_length_nm must be positive",
        )?;
        check(self.onset_width > 0.0, "fab.onset_width must be positive")?;
        check(
            (0.0..1.0).contains(&self.holdout),
            "fit.holdout must be in [0, 1)",
        )?;
        check(
            self.level > 0.0 && self.level < 1.0,
            "fit.level must be in (0, 1)",
        )?;
        check(
            self.refine.safety > 0.0 && self.refine.tolerance > 0.0,
            "pec.safety and pec.tolerance must be positive",
        )?;
        check(self.pixel_size > 0.0, "io.pixel_size_nm must be positive")?;
        check(
            self.pixel_size <= self.psf.alpha,
            "io.pixel_size_nm must not exceed psf.alpha_nm",
        )?;
        check(self.margin >= 0.0, "io.margin_nm must be >= 0")?;
        Ok(())
    }

    /// Apply the seed precedence: environment, then flag, then file.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> CliResult<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => self.seed = parse_seed(SEED_ENV, &v)?,
            Err(std::env::VarError::NotPresent) => {
                if let Some(s) = flag {
                    self.seed = s;
                }
            }
            Err(e) => return Err(CliError::validation(format!("{SEED_ENV}: {e}"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("psf.alpha_nm", g17(self.psf.alpha));
        kv("psf.beta_nm", g17(self.psf.beta));
        kv("psf.eta", g17(self.psf.eta));
        let m = &self.fab;
        kv("fab.reference_yield", g17(m.reference_yield));
        kv("fab.t_lower", g17(m.t_lower));
        kv("fab.t_upper", g17(m.t_upper));
        kv("fab.lower_exp_dhsq", g17(m.lower_exp_dhsq));
        kv("fab.upper_exp_dhsq", g17(m.upper_exp_dhsq));
        kv("fab.upper_exp_thsq", g17(m.upper_exp_thsq));
        kv("fab.upper_exp_tmf", g17(m.upper_exp_tmf));
        kv("fab.al_gain", g17(m.al_gain));
        kv("fab.al_span", g17(m.al_span));
        kv("fab.dev_gain", g17(m.dev_gain));
        for f in Factor::ALL {
            let (lo, hi) = m.bounds.range(f);
            kv(&bound_key(f, false), g17(lo));
            kv(&bound_key(f, true), g17(hi));
        }
        kv("fab.threshold", g17(self.threshold));
        kv("fab.threshold_jitter", g17(self.threshold_jitter));
        kv("fab.coverage_min", g17(self.rules.coverage_min));
        kv("fab.bridge_margin", g17(self.rules.bridge_margin));
        kv("fab.pattern_leads", self.pattern.leads.to_string());
        kv("fab.pattern_pitch_nm", g17(self.pattern.pitch));
        kv("fab.pattern_fill", g17(self.pattern.fill));
        kv("fab.pattern_length_nm", g17(self.pattern.length));
        kv("fab.onset_width", g17(self.onset_width));
        kv("fit.ridge", g17(self.fit.ridge));
        kv("fit.tolerance", g17(self.fit.tolerance));
        kv("fit.max_iterations", self.fit.max_iterations.to_string());
        kv(
            "fit.transforms",
            transforms_name(&self.fit.transforms).to_string(),
        );
        kv("fit.holdout", g17(self.holdout));
        kv("fit.level", g17(self.level));
        kv("pec.safety", g17(self.refine.safety));
        kv("pec.tolerance", g17(self.refine.tolerance));
        kv("pec.max_iterations", self.refine.max_iterations.to_string());
        kv("io.pixel_size_nm", g17(self.pixel_size));
        kv("io.margin_nm", g17(self.margin));
        s
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn hash(&self) -> String {
        hex_digest(self.canonical().as_bytes())
    }

    pub fn bounds(&self) -> &FactorBounds {
        &self.fab.bounds
    }

    pub fn refine_options(&self) -> RefineOptions {
        RefineOptions {
            threshold: self.threshold,
            ..self.refine
        }
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

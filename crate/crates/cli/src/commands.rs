//! Subcommand implementations. Each returns the files it read and wrote so
//! the caller can record them in the run report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use peclab_core::fmt::g17;
use peclab_core::layout::{Layout, LeadArray};
use peclab_core::pec::{
    dose_multiplier_map, fit_eta, flatness_report, model_fractions, onset_from_counts,
    synthetic_onsets, underexposed_fractions, DoseMap, EtaFit, FlatnessReport, LayoutSim,
    OnsetPoint, SimulatedOnset,
};
use peclab_core::rng;
use peclab_core::virtualfab::{DesignPoint, DeviceOutcome, Factor, FactorBounds, PatternSimulator};
use peclab_core::yieldsurface::{
    fit_with_holdout, process_window, recommend_window, yield_section, GridSpec, LogisticModel,
    ProcessWindow, Sample, YieldCurve, N_FEATURES,
};

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::plot::{Guide, Orientation, Plot, Series};
use crate::tables::{self, OnsetTable};

/// Files touched by a command plus a JSON summary for the run report.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub summary: serde_json::Value,
    /// Error raised after all outputs were written.
    pub deferred: Option<CliError>,
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::validation(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn with_context<T>(path: &Path, r: peclab_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| match CliError::from(e) {
        CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// `FACTOR=VALUE`.
fn parse_assignment(s: &str) -> CliResult<(Factor, &str)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::validation(format!("expected FACTOR=VALUE, got {s:?}")))?;
    Ok((k.trim().parse::<Factor>()?, v.trim()))
}

fn parse_number(what: &str, v: &str) -> CliResult<f64> {
    match v.trim().parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(CliError::validation(format!(
            "{what}: invalid number {v:?}"
        ))),
    }
}

/// `LO:HI`.
fn parse_range(what: &str, s: &str) -> CliResult<(f64, f64)> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| CliError::validation(format!("{what}: expected LO:HI, got {s:?}")))?;
    let (lo, hi) = (parse_number(what, a)?, parse_number(what, b)?);
    if !(lo < hi) {
        return Err(CliError::validation(format!(
            "{what}: need LO < HI, got {s:?}"
        )));
    }
    Ok((lo, hi))
}

fn check_in_bounds(bounds: &FactorBounds, f: Factor, v: f64) -> CliResult<()> {
    let (lo, hi) = bounds.range(f);
    if v < lo || v > hi {
        return Err(CliError::validation(format!(
            "{f} = {v} {} is outside [{lo}, {hi}]",
            f.unit()
        )));
    }
    Ok(())
}

/// Reference point with `--fix` overrides, each checked against `bounds`.
fn fixed_point(fixes: &[String], bounds: &FactorBounds) -> CliResult<DesignPoint> {
    let mut p = DesignPoint::reference();
    for s in fixes {
        let (f, v) = parse_assignment(s)?;
        let v = parse_number(f.name(), v)?;
        check_in_bounds(bounds, f, v)?;
        p = p.with(f, v);
    }
    Ok(p)
}

// ---------------------------------------------------------------- gen-pattern

#[derive(Debug, Clone, Args)]
#[command(group = clap::ArgGroup::new("size").required(true).args(["width", "rho"]))]
pub struct GenPatternArgs {
    /// Number of leads.
    #[arg(long, default_value_t = 6)]
    pub n: usize,
    /// Lead pitch, nm.
    #[arg(long, default_value_t = 70.0)]
    pub pitch: f64,
    /// Lead width, nm.
    #[arg(long)]
    pub width: Option<f64>,
    /// Fill fraction; the width becomes rho * pitch.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Lead length, nm.
    #[arg(long, default_value_t = 500.0)]
    pub length: f64,
    /// Layout name (defaults to one derived from the geometry).
    #[arg(long)]
    pub name: Option<String>,
    /// Output layout JSON.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_pattern(args: &GenPatternArgs, _cfg: &Config) -> CliResult<Outcome> {
    let arr = match (args.width, args.rho) {
        (Some(w), None) => LeadArray::new(args.n, args.pitch, w, args.length)?,
        (None, Some(rho)) => LeadArray::with_fill(args.n, args.pitch, rho, args.length)?,
        _ => {
            return Err(CliError::validation(
                "give exactly one of --width and --rho",
            ))
        }
    };
    let mut layout = arr.layout();
    if let Some(name) = &args.name {
        layout.name = name.clone();
    }
    let mut text = layout.to_json()?;
    text.push('\n');
    write_file(&args.out, text.as_bytes())?;
    println!(
        "{}: {} leads, width {} nm, pitch {} nm, fill {}",
        args.out.display(),
        arr.n,
        g17(arr.width),
        g17(arr.pitch),
        g17(arr.fill_fraction())
    );
    Ok(Outcome {
        outputs: vec![args.out.clone()],
        summary: json!({ "rects": arr.n, "width": arr.width, "fill": arr.fill_fraction() }),
        ..Outcome::default()
    })
}

// ---------------------------------------------------------------------- sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepMode {
    /// Sample the calibrated process response.
    Response,
    /// Expose, develop and classify the configured lead array.
    Simulate,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Number of design points.
    #[arg(long)]
    pub count: usize,
    /// Devices per design point.
    #[arg(long, default_value_t = 1)]
    pub replicates: usize,
    #[arg(long, value_enum, default_value_t = SweepMode::Response)]
    pub mode: SweepMode,
    /// Pin a factor, e.g. `--fix d_hsq=50` (repeatable).
    #[arg(long)]
    pub fix: Vec<String>,
    /// Narrow a factor range, e.g. `--range D=0.5:2` (repeatable).
    #[arg(long)]
    pub range: Vec<String>,
    /// Output labels CSV.
    #[arg(long)]
    pub out: PathBuf,
}

fn sweep_bounds(args: &SweepArgs, cfg: &Config) -> CliResult<FactorBounds> {
    let base = *cfg.bounds();
    let mut b = base;
    for s in &args.range {
        let (f, v) = parse_assignment(s)?;
        let (lo, hi) = parse_range(f.name(), v)?;
        check_in_bounds(&base, f, lo)?;
        check_in_bounds(&base, f, hi)?;
        b.lower[f.index()] = lo;
        b.upper[f.index()] = hi;
    }
    for s in &args.fix {
        let (f, v) = parse_assignment(s)?;
        let v = parse_number(f.name(), v)?;
        check_in_bounds(&base, f, v)?;
        b.lower[f.index()] = v;
        b.upper[f.index()] = v;
    }
    Ok(b)
}

/// Threshold of one simulated device: thicker resist develops at lower
/// energy (same power law as the lower dose threshold), with per-device
/// jitter keyed by `(seed, replicate, point)`.
fn device_threshold(cfg: &Config, p: &DesignPoint, seed: u64) -> f64 {
    let scale = (p.d_hsq / cfg.fab.reference.d_hsq).powf(cfg.fab.lower_exp_dhsq);
    let u = 2.0 * rng::unit_draw(seed, p.content_hash()) - 1.0;
    cfg.threshold * scale * (1.0 + cfg.threshold_jitter * u)
}

fn pattern_simulator(cfg: &Config) -> CliResult<PatternSimulator> {
    let s = cfg.pattern;
    let layout = LeadArray::with_fill(s.leads, s.pitch, s.fill, s.length)?.layout();
    let sim = LayoutSim::new(&layout, &cfg.psf, cfg.pixel_size, cfg.margin, cfg.rules)?;
    Ok(sim.simulator(None)?)
}

pub fn sweep(args: &SweepArgs, cfg: &Config) -> CliResult<Outcome> {
    if args.count == 0 {
        return Err(CliError::validation("--count must be at least 1"));
    }
    if args.replicates == 0 {
        return Err(CliError::validation("--replicates must be at least 1"));
    }
    let bounds = sweep_bounds(args, cfg)?;
    let points = bounds.sample(args.count, cfg.seed);
    let reps = args.replicates as u64;
    let sim = match args.mode {
        SweepMode::Response => None,
        SweepMode::Simulate => Some(pattern_simulator(cfg)?),
    };
    // a device is identified by (seed, replicate, design point)
    let outcomes: Vec<Vec<DeviceOutcome>> = points
        .par_iter()
        .map(|p| {
            (0..reps)
                .map(|r| {
                    let seed = rng::derive_seed(cfg.seed, r);
                    Ok(match &sim {
                        None => cfg.fab.process_response(p, seed)?,
                        Some(sim) => sim.outcome(p.dose, device_threshold(cfg, p, seed))?,
                    })
                })
                .collect::<CliResult<Vec<_>>>()
        })
        .collect::<CliResult<_>>()?;
    let mut text = tables::header_line(&tables::LABEL_HEADER);
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (p, outs) in points.iter().zip(&outcomes) {
        for &o in outs {
            text.push_str(&tables::label_row(p, o));
            *counts.entry(o.name()).or_default() += 1;
        }
    }
    write_file(&args.out, text.as_bytes())?;
    let total = args.count * args.replicates;
    let well = counts.get("WellFormed").copied().unwrap_or(0);
    println!(
        "{}: {total} devices, WellFormed fraction {}",
        args.out.display(),
        g17(well as f64 / total as f64)
    );
    Ok(Outcome {
        outputs: vec![args.out.clone()],
        summary: json!({ "devices": total, "counts": counts }),
        ..Outcome::default()
    })
}

// ------------------------------------------------------------------ fit-yield

#[derive(Debug, Clone, Args)]
pub struct FitYieldArgs {
    /// Labels CSV written by `sweep`.
    #[arg(long)]
    pub labels: PathBuf,
    /// Output model JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Holdout fraction (overrides fit.holdout).
    #[arg(long)]
    pub holdout: Option<f64>,
}

/// Rows needed per feature before a fit is attempted.
pub const ROWS_PER_FEATURE: usize = 10;

pub fn fit_yield(args: &FitYieldArgs, cfg: &Config) -> CliResult<Outcome> {
    let samples: Vec<Sample> = tables::read_labels(&args.labels)?;
    let n_yield = samples.iter().filter(|s| s.yielding).count();
    if n_yield == 0 || n_yield == samples.len() {
        return Err(CliError::validation(format!(
            "{}: single-class data ({} rows, all {}); cannot fit a yield model",
            args.labels.display(),
            samples.len(),
            if n_yield == 0 {
                "non-yielding"
            } else {
                "yielding"
            }
        )));
    }
    let need = ROWS_PER_FEATURE * N_FEATURES;
    if samples.len() < need {
        return Err(CliError::validation(format!(
            "{}: {} rows; need at least {need} ({ROWS_PER_FEATURE} per feature)",
            args.labels.display(),
            samples.len()
        )));
    }
    let fraction = args.holdout.unwrap_or(cfg.holdout);
    let model = fit_with_holdout(&samples, &cfg.fit, fraction, cfg.seed)?;
    write_file(&args.out, format!("{}\n", model.to_json()?).as_bytes())?;
    let info = &model.info;
    match info.holdout_accuracy {
        Some(acc) => println!(
            "holdout accuracy: {} ({} of {} rows held out); train accuracy {}",
            g17(acc),
            info.n_holdout,
            samples.len(),
            g17(info.train_accuracy)
        ),
        None => println!("train accuracy: {} (no holdout)", g17(info.train_accuracy)),
    }
    Ok(Outcome {
        inputs: vec![args.labels.clone()],
        outputs: vec![args.out.clone()],
        summary: json!({
            "rows": samples.len(),
            "holdout_accuracy": info.holdout_accuracy,
            "train_accuracy": info.train_accuracy,
            "iterations": info.iterations,
        }),
        ..Outcome::default()
    })
}

fn load_model(path: &Path) -> CliResult<LogisticModel> {
    with_context(path, LogisticModel::from_json(&read_file(path)?))
}

// -------------------------------------------------------------------- section

#[derive(Debug, Clone, Args)]
pub struct SectionArgs {
    /// Model JSON written by `fit-yield`.
    #[arg(long)]
    pub model: PathBuf,
    /// Factor to sweep: one of D, d_hsq, d_al, t_hsq, t_mf312.
    #[arg(long, default_value = "D")]
    pub axis: String,
    /// Hold a factor away from the reference point, e.g. `--fix d_al=10`.
    #[arg(long)]
    pub fix: Vec<String>,
    /// Axis range LO:HI (defaults to the configured factor bounds).
    #[arg(long)]
    pub range: Option<String>,
    /// Samples along the axis.
    #[arg(long, default_value_t = 241)]
    pub points: usize,
    /// One curve per value of another factor, e.g. `--series d_hsq=30,50,70`.
    #[arg(long)]
    pub series: Option<String>,
    /// Yield level defining the window (overrides fit.level).
    #[arg(long)]
    pub level: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// File stem (defaults to `section_<axis>`).
    #[arg(long)]
    pub stem: Option<String>,
}

#[derive(Debug, Serialize)]
struct CurveSummary {
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    fixed: DesignPoint,
    peak_at: f64,
    peak_yield: f64,
    window: Option<ProcessWindow>,
}

pub fn section(args: &SectionArgs, cfg: &Config) -> CliResult<Outcome> {
    let axis: Factor = args.axis.parse()?;
    let level = args.level.unwrap_or(cfg.level);
    if !(level > 0.0 && level < 1.0) {
        return Err(CliError::validation(format!(
            "--level must be in (0, 1), got {level}"
        )));
    }
    let bounds = cfg.bounds();
    let base = fixed_point(&args.fix, bounds)?;
    let range = match &args.range {
        Some(r) => parse_range(axis.name(), r)?,
        None => bounds.range(axis),
    };
    let model = load_model(&args.model)?;
    let mut fixed = vec![(None, base)];
    if let Some(spec) = &args.series {
        let (f, vals) = parse_assignment(spec)?;
        if f == axis {
            return Err(CliError::validation(format!(
                "--series factor {f} is the section axis"
            )));
        }
        fixed = vals
            .split(',')
            .map(|v| {
                let v = parse_number(f.name(), v)?;
                check_in_bounds(bounds, f, v)?;
                Ok((Some(format!("{f}={}", g17(v))), base.with(f, v)))
            })
            .collect::<CliResult<_>>()?;
    }
    let mut curves: Vec<(Option<String>, YieldCurve)> = Vec::new();
    for (label, p) in fixed {
        curves.push((
            label,
            yield_section(&model, axis, &p, range, args.points, bounds)?,
        ));
    }
    let mut summaries = Vec::new();
    for (label, c) in &curves {
        let (peak_at, peak_yield) = c.peak().expect("sections have at least 2 samples");
        let window = if axis == Factor::Dose {
            process_window(c, level)?
        } else {
            None
        };
        summaries.push(CurveSummary {
            label: label.clone(),
            fixed: c.fixed,
            peak_at,
            peak_yield,
            window,
        });
    }

    let stem = args
        .stem
        .clone()
        .unwrap_or_else(|| format!("section_{}", axis.name()));
    let csv_path = args.out_dir.join(format!("{stem}.csv"));
    let json_path = args.out_dir.join(format!("{stem}.window.json"));
    let svg_path = args.out_dir.join(format!("{stem}.svg"));

    let mut header = vec![axis.name().to_string()];
    for (label, _) in &curves {
        header.push(match label {
            Some(l) => format!("f[{l}]"),
            None => "f".into(),
        });
    }
    let mut text = tables::csv_line(&header);
    for i in 0..args.points {
        let mut row = vec![g17(curves[0].1.samples[i].0)];
        row.extend(curves.iter().map(|(_, c)| g17(c.samples[i].1)));
        text.push_str(&tables::csv_line(&row));
    }
    write_file(&csv_path, text.as_bytes())?;

    let doc =
        json!({ "axis": axis, "level": level, "range": [range.0, range.1], "curves": summaries });
    write_file(&json_path, to_json(&doc)?.as_bytes())?;

    let plot = Plot {
        title: format!("Predicted yield along {}", axis.name()),
        x_label: format!("{} ({})", axis.name(), axis.unit()),
        y_label: "predicted yield f".into(),
        x_range: Some(range),
        y_range: Some((0.0, 1.0)),
        series: curves
            .iter()
            .map(|(label, c)| Series {
                label: label.clone().unwrap_or_else(|| "f".into()),
                points: c.samples.clone(),
            })
            .collect(),
        guides: vec![Guide {
            orientation: Orientation::Horizontal,
            value: level,
            label: format!("f = {}", g17(level)),
        }],
        ..Plot::default()
    };
    write_file(&svg_path, plot.render().as_bytes())?;

    for s in &summaries {
        let tag = s.label.as_deref().unwrap_or(axis.name());
        match &s.window {
            Some(w) => println!(
                "{tag}: D_l {} D_u {} latitude {} (peak {} at {})",
                g17(w.d_l),
                g17(w.d_u),
                g17(w.latitude),
                g17(s.peak_yield),
                g17(s.peak_at)
            ),
            None => println!("{tag}: peak {} at {}", g17(s.peak_yield), g17(s.peak_at)),
        }
    }
    Ok(Outcome {
        inputs: vec![args.model.clone()],
        outputs: vec![csv_path, json_path, svg_path],
        summary: serde_json::to_value(&summaries).unwrap_or_default(),
        ..Outcome::default()
    })
}

// --------------------------------------------------------------------- window

#[derive(Debug, Clone, Args)]
pub struct WindowArgs {
    /// Model JSON written by `fit-yield`.
    #[arg(long)]
    pub model: PathBuf,
    /// Yield level (overrides fit.level).
    #[arg(long)]
    pub level: Option<f64>,
    /// Grid values per factor.
    #[arg(long, default_value_t = 25)]
    pub steps: usize,
    /// Output JSON.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn window(args: &WindowArgs, cfg: &Config) -> CliResult<Outcome> {
    let level = args.level.unwrap_or(cfg.level);
    let model = load_model(&args.model)?;
    let grid = GridSpec {
        bounds: *cfg.bounds(),
        steps: args.steps,
    };
    let rec = recommend_window(&model, level, &grid)?;
    write_file(
        &args.out,
        to_json(&json!({ "level": level, "window": rec }))?.as_bytes(),
    )?;
    match &rec {
        Some(w) => {
            println!(
                "optimum yield {} at {:?}",
                g17(w.optimum_yield),
                w.optimum.to_array()
            );
            for iv in &w.intervals {
                println!(
                    "  {}: [{}, {}] {}",
                    iv.factor,
                    g17(iv.lower),
                    g17(iv.upper),
                    iv.factor.unit()
                );
            }
        }
        None => println!("predicted yield never reaches {}", g17(level)),
    }
    Ok(Outcome {
        inputs: vec![args.model.clone()],
        outputs: vec![args.out.clone()],
        summary: json!({ "found": rec.is_some() }),
        ..Outcome::default()
    })
}

// ----------------------------------------------------------------- gen-onsets

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnsetKind {
    /// Underexposed fractions `rho,D,f_u`.
    Raw,
    /// Onset doses `rho,D_l`.
    Onset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnsetSource {
    /// The density model with the given eta and A.
    Model,
    /// Simulated exposure of lead arrays under the configured PSF.
    Simulate,
}

#[derive(Debug, Clone, Args)]
pub struct GenOnsetsArgs {
    #[arg(long, value_enum, default_value_t = OnsetKind::Raw)]
    pub kind: OnsetKind,
    #[arg(long, value_enum, default_value_t = OnsetSource::Model)]
    pub source: OnsetSource,
    /// Backscatter ratio (model source).
    #[arg(long, default_value_t = 5.0)]
    pub eta: f64,
    /// Onset scale A (model source).
    #[arg(long, default_value_t = 0.65)]
    pub a: f64,
    /// Comma-separated fill fractions.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"
    )]
    pub rho: Vec<f64>,
    /// Dose grid LO:HI:N for raw data.
    #[arg(long, default_value = "0.2:3:57")]
    pub doses: String,
    /// Devices per (rho, dose) for raw data.
    #[arg(long, default_value_t = 200)]
    pub replicates: usize,
    /// Relative onset noise for onset data, `1 + noise U(-1, 1)`.
    #[arg(long, default_value_t = 0.03)]
    pub noise: f64,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

fn dose_grid(s: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, n] = parts.as_slice() else {
        return Err(CliError::validation(format!(
            "--doses: expected LO:HI:N, got {s:?}"
        )));
    };
    let (lo, hi) = (parse_number("--doses", lo)?, parse_number("--doses", hi)?);
    let n: usize = n
        .parse()
        .map_err(|_| CliError::validation(format!("--doses: invalid count {n:?}")))?;
    if !(lo > 0.0 && lo < hi) || n < 2 {
        return Err(CliError::validation("--doses: need 0 < LO < HI and N >= 2"));
    }
    Ok((0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        })
        .collect())
}

fn simulated_onset(cfg: &Config, rho: f64) -> CliResult<f64> {
    let s = cfg.pattern;
    let layout = LeadArray::with_fill(s.leads, s.pitch, rho, s.length)?.layout();
    let sim = LayoutSim::new(&layout, &cfg.psf, cfg.pixel_size, cfg.margin, cfg.rules)?;
    Ok(sim.onset(None, cfg.threshold)?)
}

pub fn gen_onsets(args: &GenOnsetsArgs, cfg: &Config) -> CliResult<Outcome> {
    if args.rho.is_empty() {
        return Err(CliError::validation("--rho needs at least one value"));
    }
    if let Some(r) = args.rho.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(CliError::validation(format!(
            "--rho values must be in (0, 1), got {r}"
        )));
    }
    let seed = cfg.seed;
    let onsets: Option<Vec<f64>> = match args.source {
        OnsetSource::Model => None,
        OnsetSource::Simulate => Some(
            args.rho
                .par_iter()
                .map(|&rho| simulated_onset(cfg, rho))
                .collect::<CliResult<_>>()?,
        ),
    };
    let mut text = String::new();
    match args.kind {
        OnsetKind::Onset => {
            text.push_str(&tables::header_line(&tables::ONSET_HEADER));
            let pts = match &onsets {
                None => synthetic_onsets(args.eta, args.a, &args.rho, args.noise, seed)?,
                Some(d) => {
                    let mut r = Vec::new();
                    for (i, (&rho, &d_l)) in args.rho.iter().zip(d).enumerate() {
                        let u = 2.0 * rng::unit_draw(seed, i as u64) - 1.0;
                        r.push(OnsetPoint::new(rho, d_l * (1.0 + args.noise * u))?);
                    }
                    r
                }
            };
            for p in pts {
                text.push_str(&tables::csv_line(&[g17(p.rho), g17(p.d_l)]));
            }
        }
        OnsetKind::Raw => {
            let doses = dose_grid(&args.doses)?;
            text.push_str(&tables::header_line(&tables::RAW_HEADER));
            for (i, &rho) in args.rho.iter().enumerate() {
                let f = match &onsets {
                    None => model_fractions(
                        rho,
                        args.eta,
                        args.a,
                        cfg.onset_width,
                        &doses,
                        args.replicates,
                        seed,
                    )?,
                    Some(d) => underexposed_fractions(
                        d[i],
                        &doses,
                        args.replicates,
                        cfg.threshold_jitter,
                        rng::derive_seed(seed, i as u64),
                    )?,
                };
                for (&d, &fu) in doses.iter().zip(&f) {
                    text.push_str(&tables::csv_line(&[g17(rho), g17(d), g17(fu)]));
                }
            }
        }
    }
    write_file(&args.out, text.as_bytes())?;
    println!("{}: {} rho values", args.out.display(), args.rho.len());
    Ok(Outcome {
        outputs: vec![args.out.clone()],
        summary: json!({ "rho": args.rho, "simulated_onsets": onsets }),
        ..Outcome::default()
    })
}

// -------------------------------------------------------------------- fit-eta

#[derive(Debug, Clone, Args)]
pub struct FitEtaArgs {
    /// `rho,D_l` onsets or raw `rho,D,f_u` fractions.
    #[arg(long)]
    pub onsets: PathBuf,
    /// Output EtaFit JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Output SVG (defaults to the JSON path with an .svg extension).
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

/// Onset per distinct rho from raw fractions; rhos whose data never cross
/// 0.5 are reported and skipped.
fn onsets_from_raw(path: &Path, rows: &[(f64, f64, f64)]) -> CliResult<Vec<OnsetPoint>> {
    let mut groups: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for &(rho, d, f) in rows {
        groups.entry(rho.to_bits()).or_default().push((d, f));
    }
    let mut out = Vec::new();
    for (bits, mut data) in groups {
        let rho = f64::from_bits(bits);
        data.sort_by(|a, b| a.0.total_cmp(&b.0));
        match with_context(path, onset_from_counts(&data))? {
            Some(d_l) => out.push(OnsetPoint::new(rho, d_l)?),
            None => eprintln!(
                "warning: rho = {}: f_u never crosses 0.5; skipped",
                g17(rho)
            ),
        }
    }
    out.sort_by(|a, b| a.rho.total_cmp(&b.rho));
    Ok(out)
}

fn eta_plot(fit: &EtaFit, rhos: &[f64]) -> Plot {
    let etas: Vec<f64> = (0..=200)
        .map(|k| 10f64.powf(-1.0 + 4.0 * k as f64 / 200.0))
        .collect();
    let series = rhos
        .iter()
        .map(|&rho| Series {
            label: format!("rho = {}", (rho * 1e4).round() / 1e4),
            points: etas
                .iter()
                .map(|&e| (e, (1.0 + e) / (1.0 + 2.0 * rho * e)))
                .collect(),
        })
        .collect();
    let mut guides = vec![Guide {
        orientation: Orientation::Horizontal,
        value: 1.0,
        label: "rho = 0.5".into(),
    }];
    if fit.eta > 0.0 {
        guides.push(Guide {
            orientation: Orientation::Vertical,
            value: fit.eta,
            label: format!("fitted eta = {}", g17(fit.eta)),
        });
    }
    Plot {
        title: format!(
            "D_l / A versus eta (fit: eta = {:.4}, A = {:.4})",
            fit.eta, fit.a
        ),
        x_label: "eta".into(),
        y_label: "D_l / A".into(),
        log_x: true,
        x_range: Some((0.1, 1000.0)),
        series,
        guides,
        ..Plot::default()
    }
}

pub fn fit_eta_cmd(args: &FitEtaArgs, _cfg: &Config) -> CliResult<Outcome> {
    let points = match tables::read_onsets(&args.onsets)? {
        OnsetTable::Onsets(p) => p,
        OnsetTable::Raw(rows) => onsets_from_raw(&args.onsets, &rows)?,
    };
    let fit = with_context(&args.onsets, fit_eta(&points))?;
    let svg = args
        .svg
        .clone()
        .unwrap_or_else(|| args.out.with_extension("svg"));
    write_file(&args.out, format!("{}\n", fit.to_json()?).as_bytes())?;
    let mut rhos: Vec<f64> = points.iter().map(|p| p.rho).collect();
    rhos.dedup();
    write_file(&svg, eta_plot(&fit, &rhos).render().as_bytes())?;
    println!(
        "eta {} A {} R^2 {} ({} points{})",
        g17(fit.eta),
        g17(fit.a),
        g17(fit.r_squared),
        fit.n_points,
        if fit.clamped {
            ", eta clamped at 0"
        } else {
            ""
        }
    );
    Ok(Outcome {
        inputs: vec![args.onsets.clone()],
        outputs: vec![args.out.clone(), svg],
        summary: json!({ "eta": fit.eta, "A": fit.a, "r_squared": fit.r_squared, "onsets": points }),
        ..Outcome::default()
    })
}

// -------------------------------------------------------------------- correct

#[derive(Debug, Clone, Args)]
#[command(group = clap::ArgGroup::new("eta_source").required(true).args(["eta_fit", "eta"]))]
pub struct CorrectArgs {
    /// Layout JSON (repeatable).
    #[arg(long, required = true)]
    pub layout: Vec<PathBuf>,
    /// EtaFit JSON written by `fit-eta`.
    #[arg(long)]
    pub eta_fit: Option<PathBuf>,
    /// Backscatter ratio to correct for; 0 disables correction.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Density rule only, without iterative refinement.
    #[arg(long)]
    pub no_refine: bool,
    /// Exit with the non-convergence code if refinement stalls.
    #[arg(long)]
    pub strict: bool,
    /// Output directory for dose maps and flatness results.
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Fill fraction of an evenly spaced array of identical rects.
pub fn lead_fill(layout: &Layout) -> Option<f64> {
    let mut r = layout.rects().to_vec();
    if r.len() < 2 {
        return None;
    }
    r.sort_by(|a, b| a.x.total_cmp(&b.x));
    let pitch = r[1].x - r[0].x;
    let tol = 1e-9 * pitch.abs().max(1.0);
    let regular = r.windows(2).all(|w| {
        (w[1].x - w[0].x - pitch).abs() <= tol
            && w[1].w == w[0].w
            && w[1].h == w[0].h
            && w[1].y == w[0].y
    });
    (regular && pitch > r[0].w).then(|| r[0].w / pitch)
}

#[derive(Debug, Serialize)]
struct RectFile<'a> {
    layout: &'a str,
    eta: f64,
    refined: bool,
    converged: bool,
    final_residual: Option<f64>,
    residual_history: &'a [f64],
    rects: Vec<peclab_core::pec::RectDose>,
}

#[derive(Debug, Serialize)]
struct FlatnessFile<'a> {
    eta: f64,
    eta_source: String,
    threshold: f64,
    refined: bool,
    layouts: &'a [SimulatedOnset],
    uncorrected: Option<FlatnessReport>,
    corrected: Option<FlatnessReport>,
    all_converged: bool,
}

fn unique_stems(paths: &[PathBuf]) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    paths
        .iter()
        .map(|p| {
            let base = p
                .file_stem()
                .map_or("layout".into(), |s| s.to_string_lossy().into_owned());
            let k = seen.entry(base.clone()).or_default();
            *k += 1;
            if *k == 1 {
                base
            } else {
                format!("{base}_{k}")
            }
        })
        .collect()
}

fn dose_csv(map: &DoseMap, pattern: &peclab_core::layout::RasterGrid) -> String {
    let frame = pattern.frame();
    let mut s = tables::header_line(&["ix", "iy", "x_nm", "y_nm", "multiplier"]);
    for iy in 0..frame.height {
        for ix in 0..frame.width {
            if pattern.get(ix, iy) != 0.0 {
                let (x, y) = frame.center(ix, iy);
                s.push_str(&tables::csv_line(&[
                    ix.to_string(),
                    iy.to_string(),
                    g17(x),
                    g17(y),
                    g17(map.multipliers.get(ix, iy)),
                ]));
            }
        }
    }
    s
}

struct Corrected {
    onset: SimulatedOnset,
    map: DoseMap,
    pattern: peclab_core::layout::RasterGrid,
    layout: Layout,
}

pub fn correct(args: &CorrectArgs, cfg: &Config) -> CliResult<Outcome> {
    let mut inputs = args.layout.clone();
    let (eta, eta_source) = match (&args.eta_fit, args.eta) {
        (Some(path), None) => {
            let fit = with_context(path, EtaFit::from_json(&read_file(path)?))?;
            inputs.push(path.clone());
            (fit.eta, path.display().to_string())
        }
        (None, Some(eta)) => (eta, "--eta".to_string()),
        _ => {
            return Err(CliError::validation(
                "give exactly one of --eta-fit and --eta",
            ))
        }
    };
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(CliError::validation(format!(
            "eta must be finite and >= 0, got {eta}"
        )));
    }
    let layouts: Vec<Layout> = args
        .layout
        .iter()
        .map(|p| with_context(p, Layout::from_json(&read_file(p)?)))
        .collect::<CliResult<_>>()?;
    let psf_model = cfg.psf.with_eta(eta)?;
    let refine = cfg.refine_options();
    let refine = (!args.no_refine).then_some(&refine);
    let results: Vec<Corrected> = layouts
        .par_iter()
        .zip(&args.layout)
        .map(|(layout, path)| {
            let sim = with_context(
                path,
                LayoutSim::new(layout, &cfg.psf, cfg.pixel_size, cfg.margin, cfg.rules),
            )?;
            let map = dose_multiplier_map(&sim.pattern, eta, &psf_model, refine)?;
            let onset = SimulatedOnset {
                name: layout.name.clone(),
                rho: lead_fill(layout),
                rho_local: sim.mean_local_density()?,
                uncorrected: sim.onset(None, cfg.threshold)?,
                corrected: Some(sim.onset(Some(&map.multipliers), cfg.threshold)?),
            };
            Ok(Corrected {
                onset,
                map,
                pattern: sim.pattern.clone(),
                layout: layout.clone(),
            })
        })
        .collect::<CliResult<_>>()?;

    let mut outputs = Vec::new();
    let stems = unique_stems(&args.layout);
    for (c, stem) in results.iter().zip(&stems) {
        let csv_path = args.out_dir.join(format!("{stem}.dose.csv"));
        write_file(&csv_path, dose_csv(&c.map, &c.pattern).as_bytes())?;
        let rect_path = args.out_dir.join(format!("{stem}.rects.json"));
        let rf = RectFile {
            layout: &c.layout.name,
            eta,
            refined: c.map.refined,
            converged: c.map.converged,
            final_residual: c.map.final_residual(),
            residual_history: &c.map.residual_history,
            rects: c.map.rect_assignments(&c.layout),
        };
        write_file(&rect_path, to_json(&rf)?.as_bytes())?;
        outputs.push(csv_path);
        outputs.push(rect_path);
    }

    let onsets: Vec<SimulatedOnset> = results.iter().map(|c| c.onset.clone()).collect();
    let points = |corrected: bool| -> CliResult<Option<FlatnessReport>> {
        if onsets.len() < 2 {
            return Ok(None);
        }
        let pts: Vec<OnsetPoint> = onsets
            .iter()
            .map(|o| {
                OnsetPoint::new(
                    o.rho_local,
                    if corrected {
                        o.corrected.unwrap_or(o.uncorrected)
                    } else {
                        o.uncorrected
                    },
                )
            })
            .collect::<peclab_core::Result<_>>()?;
        Ok(Some(flatness_report(&pts)?))
    };
    let (uncorrected, corrected) = (points(false)?, points(true)?);
    let stalled: Vec<(&str, f64)> = results
        .iter()
        .filter(|c| !c.map.converged)
        .map(|c| {
            (
                c.layout.name.as_str(),
                c.map.final_residual().unwrap_or(f64::NAN),
            )
        })
        .collect();
    let flat = FlatnessFile {
        eta,
        eta_source,
        threshold: cfg.threshold,
        refined: refine.is_some() && eta > 0.0,
        layouts: &onsets,
        uncorrected,
        corrected,
        all_converged: stalled.is_empty(),
    };
    let flat_path = args.out_dir.join("flatness.json");
    write_file(&flat_path, to_json(&flat)?.as_bytes())?;
    outputs.push(flat_path);

    let x_of = |o: &SimulatedOnset| o.rho.unwrap_or(o.rho_local);
    let mut order: Vec<&SimulatedOnset> = onsets.iter().collect();
    order.sort_by(|a, b| x_of(a).total_cmp(&x_of(b)));
    let plot = Plot {
        title: format!("Simulated onset dose (eta = {})", g17(eta)),
        x_label: "pattern density rho".into(),
        y_label: "onset dose D_l (mC/cm^2)".into(),
        series: vec![
            Series {
                label: "uncorrected".into(),
                points: order.iter().map(|o| (x_of(o), o.uncorrected)).collect(),
            },
            Series {
                label: "corrected".into(),
                points: order
                    .iter()
                    .map(|o| (x_of(o), o.corrected.unwrap_or(o.uncorrected)))
                    .collect(),
            },
        ],
        ..Plot::default()
    };
    let svg_path = args.out_dir.join("flatness.svg");
    write_file(&svg_path, plot.render().as_bytes())?;
    outputs.push(svg_path);

    for o in &onsets {
        println!(
            "{}: rho_local {} onset {} -> {}",
            o.name,
            g17(o.rho_local),
            g17(o.uncorrected),
            g17(o.corrected.unwrap_or(o.uncorrected))
        );
    }
    if let (Some(u), Some(c)) = (&flat.uncorrected, &flat.corrected) {
        println!(
            "onset max/min ratio: uncorrected {} corrected {}",
            g17(u.ratio),
            g17(c.ratio)
        );
    }
    let mut deferred = None;
    if !stalled.is_empty() {
        let list: Vec<String> = stalled
            .iter()
            .map(|(n, r)| format!("{n} ({})", g17(*r)))
            .collect();
        let msg = format!(
            "dose refinement stopped above tolerance {} for: {}",
            g17(cfg.refine.tolerance),
            list.join(", ")
        );
        eprintln!("warning: {msg}");
        if args.strict {
            deferred = Some(CliError::NonConvergence(msg));
        }
    }
    let summary = json!({
        "eta": eta,
        "uncorrected_ratio": flat.uncorrected.map(|f| f.ratio),
        "corrected_ratio": flat.corrected.map(|f| f.ratio),
        "all_converged": flat.all_converged,
    });
    Ok(Outcome {
        inputs,
        outputs,
        summary,
        deferred,
    })
}

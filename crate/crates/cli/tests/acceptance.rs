//! Acceptance suite: one PASS/FAIL line per criterion, each with a runtime
//! budget. Criteria run sequentially so the timings are not contended.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use peclab_cli::commands::{
    self, CorrectArgs, FitYieldArgs, GenPatternArgs, SectionArgs, SweepArgs, SweepMode,
};
use peclab_cli::config::Config;
use peclab_core::fieldkernel::{convolve, make_psf_kernel, Kernel, PsfParams};
use peclab_core::layout::{connected_components, GridFrame, RasterGrid};
use peclab_core::pec::{dl_model, fit_eta, synthetic_onsets, OnsetPoint};
use peclab_core::rng::unit_draw;
use peclab_core::virtualfab::Factor;
use peclab_core::yieldsurface::{fit_logistic_with, holdout_split, Sample};

struct Check {
    ok: bool,
    detail: String,
}

fn check(ok: bool, detail: impl Into<String>) -> Check {
    Check {
        ok,
        detail: detail.into(),
    }
}

fn run(id: u32, name: &str, budget: Duration, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let c = f();
    let el = t.elapsed();
    let in_time = el <= budget;
    let pass = c.ok && in_time;
    println!(
        "ACCEPTANCE {id} {} {name}: {} [{:.2} s, budget {} s{}]",
        if pass { "PASS" } else { "FAIL" },
        c.detail,
        el.as_secs_f64(),
        budget.as_secs(),
        if in_time { "" } else { ", over budget" }
    );
    pass
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn c1_half_filling() -> Check {
    let exact = [0.0, 1.0, 5.0, 100.0]
        .iter()
        .all(|&eta| dl_model(0.5, eta, 0.65).unwrap() == 0.65);
    let a = 0.65;
    let ratio = dl_model(0.25, 1e6, a).unwrap() / (2.0 * a);
    check(
        exact && (ratio - 1.0).abs() <= 1e-4,
        format!("D_l(0.5) == A exactly: {exact}; D_l(0.25, 1e6)/(2A) = {ratio:.8}"),
    )
}

fn c2_two_point() -> Check {
    let f = fit_eta(&[
        OnsetPoint::new(0.19, 1.30).unwrap(),
        OnsetPoint::new(0.55, 0.60).unwrap(),
    ])
    .unwrap();
    check(
        (f.eta - 4.2169).abs() <= 1e-3 && (f.a - 0.6485).abs() <= 1e-3,
        format!("eta = {:.5}, A = {:.5}", f.eta, f.a),
    )
}

fn c3_noise_recovery() -> Check {
    let rhos: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    let (mut within, mut r2) = (0, 0.0);
    for seed in 0..100 {
        let pts = synthetic_onsets(5.0, 0.65, &rhos, 0.03, seed).unwrap();
        let f = fit_eta(&pts).unwrap();
        if (f.eta / 5.0 - 1.0).abs() <= 0.10 {
            within += 1;
        }
        r2 += f.r_squared;
    }
    let mean_r2 = r2 / 100.0;
    check(
        within >= 95 && mean_r2 >= 0.99,
        format!("eta within 10% in {within}/100 runs; mean R^2 = {mean_r2:.5}"),
    )
}

fn c4_flattening(dir: &Path) -> Check {
    let cfg = Config::default();
    let mut layouts = Vec::new();
    for rho in [0.19, 0.28, 0.37, 0.46, 0.55] {
        let out = dir.join(format!("leads_{rho}.json"));
        let args = GenPatternArgs {
            n: 6,
            pitch: 70.0,
            width: None,
            rho: Some(rho),
            length: 500.0,
            name: None,
            out: out.clone(),
        };
        commands::gen_pattern(&args, &cfg).unwrap();
        layouts.push(out);
    }
    let out_dir = dir.join("corrected");
    let args = CorrectArgs {
        layout: layouts,
        eta_fit: None,
        eta: Some(cfg.psf.eta),
        no_refine: false,
        strict: false,
        out_dir: out_dir.clone(),
    };
    commands::correct(&args, &cfg).unwrap();
    let flat = read_json(&out_dir.join("flatness.json"));
    let un = flat["uncorrected"]["ratio"].as_f64().unwrap();
    let co = flat["corrected"]["ratio"].as_f64().unwrap();
    check(
        un >= 2.0 && co <= 1.10,
        format!("onset max/min ratio uncorrected {un:.4}, corrected {co:.4}"),
    )
}

fn c5_round_trip(dir: &Path) -> Check {
    let cfg = Config {
        seed: 7,
        ..Config::default()
    };
    let labels = dir.join("labels.csv");
    let sweep = SweepArgs {
        count: 5000,
        replicates: 8,
        mode: SweepMode::Response,
        fix: vec![],
        range: vec![],
        out: labels.clone(),
    };
    commands::sweep(&sweep, &cfg).unwrap();
    let model = dir.join("model.json");
    commands::fit_yield(
        &FitYieldArgs {
            labels,
            out: model.clone(),
            holdout: None,
        },
        &cfg,
    )
    .unwrap();
    let acc = read_json(&model)["info"]["holdout_accuracy"]
        .as_f64()
        .unwrap();
    let sec = SectionArgs {
        model,
        axis: Factor::Dose.name().into(),
        fix: vec![],
        range: None,
        points: 241,
        series: None,
        level: None,
        out_dir: dir.join("section"),
        stem: None,
    };
    commands::section(&sec, &cfg).unwrap();
    let doc = read_json(&dir.join("section").join("section_D.window.json"));
    let c = &doc["curves"][0];
    let w = &c["window"];
    let (dl, du, lat) = (
        w["D_l"].as_f64().unwrap(),
        w["D_u"].as_f64().unwrap(),
        w["latitude"].as_f64().unwrap(),
    );
    let peak = c["peak_yield"].as_f64().unwrap();
    check(
        acc >= 0.90
            && (dl - 0.6).abs() <= 0.1
            && (du - 2.0).abs() <= 0.2
            && (lat - 1.4).abs() <= 0.2
            && (0.65..=0.85).contains(&peak),
        format!("holdout accuracy {acc:.4}; D_l {dl:.3}, D_u {du:.3}, latitude {lat:.3}, peak {peak:.3}"),
    )
}

/// Direct zero-padded "same" convolution.
fn direct(field: &RasterGrid, k: &Kernel) -> Vec<f64> {
    let (w, h) = (field.width() as isize, field.height() as isize);
    let r = k.radius as isize;
    let mut out = vec![0.0; field.values().len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for v in (y - r).max(0)..=(y + r).min(h - 1) {
                for u in (x - r).max(0)..=(x + r).min(w - 1) {
                    s += field.get(u as usize, v as usize) * k.at(x - u, y - v);
                }
            }
            out[(y * w + x) as usize] = s;
        }
    }
    out
}

fn c6_convolution() -> Check {
    let k = make_psf_kernel(&PsfParams::new(4.0, 20.0, 5.0).unwrap(), 1.0).unwrap();
    let frame = GridFrame::new(1.0, 0.0, 0.0, 64, 64).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let vals = (0..64 * 64).map(|i| unit_draw(seed, i)).collect();
        let f = RasterGrid::from_values(frame, vals).unwrap();
        let fast = convolve(&f, &k).unwrap();
        let slow = direct(&f, &k);
        let scale = slow.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = fast
            .values()
            .iter()
            .zip(&slow)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / scale;
        worst = worst.max(err);
    }
    check(
        worst <= 1e-9,
        format!("max relative error over 20 fields {worst:.3e}"),
    )
}

fn flood_fill(w: usize, h: usize, bits: &[bool]) -> Vec<usize> {
    let mut label = vec![usize::MAX; w * h];
    let mut next = 0;
    for s in 0..w * h {
        if !bits[s] || label[s] != usize::MAX {
            continue;
        }
        let mut stack = vec![s];
        label[s] = next;
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if bits[j] && label[j] == usize::MAX {
                    label[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    label
}

fn c7_components() -> Check {
    let frame = GridFrame::new(1.0, 0.0, 0.0, 32, 32).unwrap();
    let mut identical = 0;
    for seed in 0..100u64 {
        let bits: Vec<bool> = (0..32 * 32).map(|i| unit_draw(seed, i) < 0.45).collect();
        let grid = RasterGrid::from_values(
            frame,
            bits.iter().map(|&b| f64::from(u8::from(b))).collect(),
        )
        .unwrap();
        let mut lib = vec![usize::MAX; 32 * 32];
        for c in connected_components(&grid).unwrap() {
            for p in c.pixels {
                lib[p] = c.id;
            }
        }
        let oracle = flood_fill(32, 32, &bits);
        let (mut fwd, mut back) = (HashMap::new(), HashMap::new());
        let same = lib
            .iter()
            .zip(&oracle)
            .all(|(&a, &b)| *fwd.entry(a).or_insert(b) == b && *back.entry(b).or_insert(a) == a);
        identical += usize::from(same);
    }
    check(
        identical == 100,
        format!("{identical}/100 partitions identical"),
    )
}

fn c8_determinism(dir: &Path) -> Check {
    let cfg = Config {
        seed: 7,
        ..Config::default()
    };
    let sweep = |out: PathBuf| {
        let args = SweepArgs {
            count: 5000,
            replicates: 1,
            mode: SweepMode::Response,
            fix: vec![],
            range: vec![],
            out: out.clone(),
        };
        commands::sweep(&args, &cfg).unwrap();
        std::fs::read(out).unwrap()
    };
    let (a, b) = (sweep(dir.join("a.csv")), sweep(dir.join("b.csv")));
    let bytes_equal = a == b;

    let samples = peclab_cli::tables::read_labels(&dir.join("a.csv")).unwrap();
    let (train, _) = holdout_split(&samples, 0.2, 7).unwrap();
    // deterministic shuffle
    let mut keyed: Vec<(f64, Sample)> = train
        .iter()
        .enumerate()
        .map(|(i, s)| (unit_draw(99, i as u64), *s))
        .collect();
    keyed.sort_by(|x, y| x.0.total_cmp(&y.0));
    let permuted: Vec<Sample> = keyed.into_iter().map(|(_, s)| s).collect();
    let m1 = fit_logistic_with(&train, &cfg.fit).unwrap();
    let m2 = fit_logistic_with(&permuted, &cfg.fit).unwrap();
    let dw = m1
        .weights
        .iter()
        .zip(&m2.weights)
        .map(|(x, y)| (x - y).abs())
        .fold((m1.intercept - m2.intercept).abs(), f64::max);
    check(
        bytes_equal && dw <= 1e-8,
        format!("sweep CSVs byte-identical: {bytes_equal} ({} bytes); max weight change under permutation {dw:.2e}", a.len()),
    )
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let t = Instant::now();
    let s = Duration::from_secs;
    let results = [
        run(1, "half-filling exactness", s(1), c1_half_filling),
        run(2, "two-point inversion", s(1), c2_two_point),
        run(3, "eta recovery under noise", s(30), c3_noise_recovery),
        run(4, "end-to-end flattening", s(180), || c4_flattening(dir)),
        run(5, "yield-surface round trip", s(60), || c5_round_trip(dir)),
        run(6, "convolution oracle", s(10), c6_convolution),
        run(7, "component oracle", s(5), c7_components),
        run(8, "determinism", s(60), || c8_determinism(dir)),
    ];
    let total = t.elapsed();
    println!("ACCEPTANCE total {:.2} s", total.as_secs_f64());
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, ok)| !**ok)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
    assert!(total <= Duration::from_secs(300), "suite took {total:?}");
}

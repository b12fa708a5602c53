use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use peclab_cli::report::{read_reports, REPORT_FILE};

fn peclab(dir: &Path, args: &[&str]) -> Output {
    peclab_env(dir, args, None)
}

fn peclab_env(dir: &Path, args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_peclab"));
    cmd.current_dir(dir).args(args).env_remove("PECLAB_SEED");
    if let Some(s) = seed_env {
        cmd.env("PECLAB_SEED", s);
    }
    cmd.output().expect("run peclab")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn reports(dir: &Path) -> Vec<peclab_cli::report::RunReport> {
    read_reports(&dir.join(REPORT_FILE)).unwrap()
}

#[test]
fn gen_pattern_geometry_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = peclab(
        d,
        &[
            "gen-pattern",
            "--n",
            "6",
            "--pitch",
            "70",
            "--width",
            "35",
            "--out",
            "a.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        json(&d.join("a.json"))["rects"].as_array().unwrap().len(),
        6
    );

    let o = peclab(
        d,
        &[
            "gen-pattern",
            "--width",
            "80",
            "--pitch",
            "70",
            "--out",
            "b.json",
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).contains("smaller than the pitch"),
        "{}",
        stderr(&o)
    );
    assert!(!d.join("b.json").exists());

    let o = peclab(
        d,
        &[
            "gen-pattern",
            "--rho",
            "0.19",
            "--pitch",
            "70",
            "--out",
            "c.json",
        ],
    );
    assert_eq!(code(&o), 0);
    for r in json(&d.join("c.json"))["rects"].as_array().unwrap() {
        assert!((r["w"].as_f64().unwrap() - 0.19 * 70.0).abs() < 1e-12);
    }
    // one report per run, failures included
    let reps = reports(d);
    assert_eq!(reps.len(), 3);
    assert_eq!(
        reps.iter().map(|r| r.exit_code).collect::<Vec<_>>(),
        [0, 2, 0]
    );
    assert_eq!(reps[0].outputs.len(), 1);
    assert!(reps[1].outputs.is_empty() && reps[1].error.is_some());
}

#[test]
fn sweep_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a.csv", "b.csv"] {
        let o = peclab(
            d,
            &["sweep", "--count", "5000", "--seed", "7", "--out", out],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (a, b) = (
        std::fs::read(d.join("a.csv")).unwrap(),
        std::fs::read(d.join("b.csv")).unwrap(),
    );
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("D,d_hsq,d_al,t_hsq,t_mf312,outcome\n"));
    assert_eq!(text.lines().count(), 5001);
    // a different seed gives different data
    peclab(
        d,
        &["sweep", "--count", "5000", "--seed", "8", "--out", "c.csv"],
    );
    assert_ne!(std::fs::read(d.join("c.csv")).unwrap(), text.as_bytes());
    let reps = reports(d);
    assert_eq!(reps[0].outputs[0].sha256, reps[1].outputs[0].sha256);
    assert_ne!(reps[0].outputs[0].sha256, reps[2].outputs[0].sha256);
}

#[test]
fn sweep_rejects_bad_requests() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = peclab(d, &["sweep", "--count", "0", "--out", "x.csv"]);
    assert_eq!(code(&o), 2);
    let o = peclab(
        d,
        &[
            "sweep",
            "--count",
            "3",
            "--fix",
            "d_hsq=200",
            "--out",
            "x.csv",
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("outside"), "{}", stderr(&o));
    let o = peclab(
        d,
        &[
            "sweep", "--count", "3", "--range", "D=0.1:1", "--out", "x.csv",
        ],
    );
    assert_eq!(code(&o), 2);
    let o = peclab(
        d,
        &[
            "sweep",
            "--count",
            "3",
            "--fix",
            "pressure=1",
            "--out",
            "x.csv",
        ],
    );
    assert_eq!(code(&o), 2);
}

fn fraction_well(path: &Path) -> f64 {
    let text = std::fs::read_to_string(path).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    rows.iter().filter(|l| l.ends_with(",WellFormed")).count() as f64 / rows.len() as f64
}

#[test]
fn reference_point_calibration() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = peclab(
        d,
        &[
            "sweep",
            "--count",
            "1",
            "--replicates",
            "500",
            "--seed",
            "11",
            "--fix",
            "D=1",
            "--fix",
            "d_hsq=50",
            "--fix",
            "d_al=15",
            "--fix",
            "t_hsq=48",
            "--fix",
            "t_mf312=2",
            "--out",
            "ref.csv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let f = fraction_well(&d.join("ref.csv"));
    assert!((f - 0.75).abs() <= 0.05, "{f}");
}

#[test]
fn simulate_mode_labels_exposure_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let args = [
        "sweep",
        "--mode",
        "simulate",
        "--count",
        "40",
        "--replicates",
        "2",
        "--seed",
        "5",
    ];
    let o = peclab(d, &[&args[..], &["--out", "a.csv"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    peclab(d, &[&args[..], &["--out", "b.csv"]].concat());
    let a = std::fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(d.join("b.csv")).unwrap());
    let labels: std::collections::BTreeSet<&str> = a
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap())
        .collect();
    assert!(
        labels
            .iter()
            .all(|l| ["WellFormed", "Underexposed", "Overexposed"].contains(l)),
        "{labels:?}"
    );
    assert!(labels.len() >= 2, "{labels:?}");
}

#[test]
fn seed_precedence_env_over_flag_over_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("run.cfg"), "seed = 1\n").unwrap();
    let sweep = |out: &str, extra: &[&str], env: Option<&str>| {
        let mut args = vec!["sweep", "--count", "50", "--out", out];
        args.extend_from_slice(extra);
        let o = peclab_env(d, &args, env);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(d.join(out)).unwrap()
    };
    let s1 = sweep("s1.csv", &["--seed", "1"], None);
    let s2 = sweep("s2.csv", &["--seed", "2"], None);
    let s3 = sweep("s3.csv", &["--seed", "3"], None);
    assert_eq!(sweep("file.csv", &["--config", "run.cfg"], None), s1);
    assert_eq!(
        sweep("flag.csv", &["--config", "run.cfg", "--seed", "2"], None),
        s2
    );
    assert_eq!(
        sweep(
            "env.csv",
            &["--config", "run.cfg", "--seed", "2"],
            Some("3")
        ),
        s3
    );
    let seeds: Vec<u64> = reports(d).iter().map(|r| r.seed).collect();
    assert_eq!(seeds, [1, 2, 3, 1, 2, 3]);
    let o = peclab_env(
        d,
        &["sweep", "--count", "5", "--out", "x.csv"],
        Some("not-a-seed"),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn config_hash_tracks_content() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("a.cfg"), "psf.eta = 5\n").unwrap();
    std::fs::write(
        d.join("b.cfg"),
        "# same values, different text\npsf.eta=5.0\nio.margin_nm = 900\n",
    )
    .unwrap();
    std::fs::write(d.join("c.cfg"), "psf.eta = 4\n").unwrap();
    std::fs::write(d.join("bad.cfg"), "psf.eta = 5\nfab.colour = red\n").unwrap();
    for cfg in ["a.cfg", "b.cfg", "c.cfg"] {
        let o = peclab(
            d,
            &[
                "--config",
                cfg,
                "gen-pattern",
                "--width",
                "20",
                "--out",
                "p.json",
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let o = peclab(
        d,
        &[
            "--config",
            "bad.cfg",
            "gen-pattern",
            "--width",
            "20",
            "--out",
            "p.json",
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unknown config key"), "{}", stderr(&o));
    let r = reports(d);
    assert_eq!(r[0].config_hash, r[1].config_hash);
    assert_ne!(r[0].config_hash, r[2].config_hash);
    assert_eq!(r[0].inputs[0].path, "a.cfg");
    let o = peclab(
        d,
        &[
            "--config",
            "missing.cfg",
            "gen-pattern",
            "--width",
            "20",
            "--out",
            "p.json",
        ],
    );
    assert_eq!(code(&o), 4);
}

fn write_labels(path: &Path, rows: &[(f64, &str)]) {
    let mut s = String::from("D,d_hsq,d_al,t_hsq,t_mf312,outcome\n");
    for (dose, label) in rows {
        s.push_str(&format!("{dose},50,15,48,2,{label}\n"));
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn fit_yield_round_trip_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = peclab(
        d,
        &[
            "sweep",
            "--count",
            "5000",
            "--seed",
            "7",
            "--out",
            "labels.csv",
        ],
    );
    assert_eq!(code(&o), 0);
    let o = peclab(
        d,
        &[
            "fit-yield",
            "--seed",
            "7",
            "--labels",
            "labels.csv",
            "--out",
            "model.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let printed: f64 = stdout(&o)
        .split_whitespace()
        .nth(2)
        .and_then(|v| v.parse().ok())
        .expect("holdout accuracy printed");
    let stored = json(&d.join("model.json"))["info"]["holdout_accuracy"]
        .as_f64()
        .unwrap();
    assert_eq!(printed, stored);
    assert!(stored >= 0.90, "{stored}");

    let rows: Vec<(f64, &str)> = (0..300)
        .map(|i| (0.5 + i as f64 * 0.005, "WellFormed"))
        .collect();
    write_labels(&d.join("one.csv"), &rows);
    let o = peclab(d, &["fit-yield", "--labels", "one.csv", "--out", "m1.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("single-class"), "{}", stderr(&o));

    let mut text = std::fs::read_to_string(d.join("labels.csv")).unwrap();
    text = text.replacen("\n", "\n0.9,50,15,oops,2,WellFormed\n", 3);
    std::fs::write(d.join("bad.csv"), text).unwrap();
    let o = peclab(d, &["fit-yield", "--labels", "bad.csv", "--out", "m2.json"]);
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).contains("line 2") && stderr(&o).contains("t_hsq"),
        "{}",
        stderr(&o)
    );

    let text = std::fs::read_to_string(d.join("labels.csv")).unwrap();
    let short: String = text
        .lines()
        .take(4)
        .map(|l| format!("{l}\n"))
        .collect::<String>()
        + "1.0,50,15\n";
    std::fs::write(d.join("short.csv"), short).unwrap();
    let o = peclab(
        d,
        &["fit-yield", "--labels", "short.csv", "--out", "m3.json"],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 5"), "{}", stderr(&o));

    let rows: Vec<(f64, &str)> = (0..60)
        .map(|i| {
            (
                0.5 + i as f64 * 0.02,
                if i % 2 == 0 {
                    "WellFormed"
                } else {
                    "Underexposed"
                },
            )
        })
        .collect();
    write_labels(&d.join("few.csv"), &rows);
    let o = peclab(d, &["fit-yield", "--labels", "few.csv", "--out", "m4.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("need at least 200"), "{}", stderr(&o));
}

fn fitted_model(d: &Path) -> PathBuf {
    let o = peclab(
        d,
        &[
            "sweep",
            "--count",
            "5000",
            "--replicates",
            "8",
            "--seed",
            "7",
            "--out",
            "labels.csv",
        ],
    );
    assert_eq!(code(&o), 0);
    let o = peclab(
        d,
        &[
            "fit-yield",
            "--seed",
            "7",
            "--labels",
            "labels.csv",
            "--out",
            "model.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    d.join("model.json")
}

#[test]
fn section_window_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fitted_model(d);
    let o = peclab(
        d,
        &[
            "section",
            "--model",
            "model.json",
            "--axis",
            "D",
            "--out-dir",
            "sec",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let w = json(&d.join("sec/section_D.window.json"));
    let lat = w["curves"][0]["window"]["latitude"].as_f64().unwrap();
    assert!((lat - 1.4).abs() <= 0.2, "{lat}");
    let csv = std::fs::read_to_string(d.join("sec/section_D.csv")).unwrap();
    assert!(csv.starts_with("D,f\n"));
    assert_eq!(csv.lines().count(), 242);
    let svg = std::fs::read_to_string(d.join("sec/section_D.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert_eq!(svg.matches(r#"class="guide""#).count(), 1);
    assert!(svg.contains("f = 0.5"));

    let o = peclab(
        d,
        &[
            "section",
            "--model",
            "model.json",
            "--series",
            "d_hsq=30,50,70",
            "--out-dir",
            "sec",
            "--stem",
            "multi",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = std::fs::read_to_string(d.join("sec/multi.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    let w = json(&d.join("sec/multi.window.json"));
    assert_eq!(w["curves"].as_array().unwrap().len(), 3);

    let o = peclab(
        d,
        &[
            "section",
            "--model",
            "model.json",
            "--axis",
            "d_al",
            "--out-dir",
            "sec",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(json(&d.join("sec/section_d_al.window.json"))["curves"][0]["window"].is_null());

    let o = peclab(
        d,
        &[
            "section",
            "--model",
            "model.json",
            "--axis",
            "temperature",
            "--out-dir",
            "sec",
        ],
    );
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    for axis in ["D", "d_hsq", "d_al", "t_hsq", "t_mf312"] {
        assert!(err.contains(axis), "{err}");
    }

    let o = peclab(
        d,
        &[
            "window",
            "--model",
            "model.json",
            "--steps",
            "9",
            "--out",
            "win.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rec = json(&d.join("win.json"));
    assert!(rec["window"]["optimum_yield"].as_f64().unwrap() >= 0.5);
    assert_eq!(rec["window"]["intervals"].as_array().unwrap().len(), 5);
}

#[test]
fn fit_eta_closed_form_and_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("two.csv"), "rho,D_l\n0.19,1.30\n0.55,0.60\n").unwrap();
    let o = peclab(d, &["fit-eta", "--onsets", "two.csv", "--out", "two.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let f = json(&d.join("two.json"));
    assert!((f["eta"].as_f64().unwrap() - 4.2169).abs() < 1e-3);
    assert!((f["A"].as_f64().unwrap() - 0.6485).abs() < 1e-3);
    let svg = std::fs::read_to_string(d.join("two.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);

    let o = peclab(
        d,
        &[
            "gen-onsets",
            "--eta",
            "5",
            "--seed",
            "4",
            "--out",
            "raw.csv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = peclab(
        d,
        &[
            "fit-eta",
            "--onsets",
            "raw.csv",
            "--out",
            "raw.json",
            "--svg",
            "plots/raw.svg",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eta = json(&d.join("raw.json"))["eta"].as_f64().unwrap();
    assert!((eta / 5.0 - 1.0).abs() <= 0.10, "{eta}");
    assert!(d.join("plots/raw.svg").exists());

    std::fs::write(d.join("one.csv"), "rho,D_l\n0.3,1.1\n0.3,1.0\n0.3,1.05\n").unwrap();
    let o = peclab(d, &["fit-eta", "--onsets", "one.csv", "--out", "one.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unidentifiable"), "{}", stderr(&o));

    std::fs::write(d.join("hdr.csv"), "rho,dose\n0.3,1.1\n").unwrap();
    assert_eq!(
        code(&peclab(
            d,
            &["fit-eta", "--onsets", "hdr.csv", "--out", "h.json"]
        )),
        2
    );
}

#[test]
fn correct_outputs_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for (rho, name) in [("0.25", "sparse.json"), ("0.5", "dense.json")] {
        let o = peclab(
            d,
            &[
                "gen-pattern",
                "--rho",
                rho,
                "--length",
                "300",
                "--out",
                name,
            ],
        );
        assert_eq!(code(&o), 0);
    }
    let o = peclab(
        d,
        &[
            "correct",
            "--layout",
            "sparse.json",
            "--layout",
            "dense.json",
            "--eta",
            "0",
            "--out-dir",
            "flat0",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("flat0/sparse.dose.csv")).unwrap();
    assert!(csv.starts_with("ix,iy,x_nm,y_nm,multiplier\n"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",1")));
    let rects = json(&d.join("flat0/dense.rects.json"));
    assert!(rects["rects"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["multiplier"] == 1.0));
    let flat = json(&d.join("flat0/flatness.json"));
    assert_eq!(flat["uncorrected"]["ratio"], flat["corrected"]["ratio"]);

    std::fs::write(d.join("pts.csv"), "rho,D_l\n0.25,1.0\n0.5,0.65\n").unwrap();
    assert_eq!(
        code(&peclab(
            d,
            &["fit-eta", "--onsets", "pts.csv", "--out", "fit.json"]
        )),
        0
    );
    let o = peclab(
        d,
        &[
            "correct",
            "--layout",
            "sparse.json",
            "--layout",
            "dense.json",
            "--eta-fit",
            "fit.json",
            "--no-refine",
            "--out-dir",
            "rule",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let flat = json(&d.join("rule/flatness.json"));
    assert_eq!(flat["refined"], false);
    assert_eq!(flat["layouts"][0]["rho"], 0.25);
    let un = flat["uncorrected"]["ratio"].as_f64().unwrap();
    let co = flat["corrected"]["ratio"].as_f64().unwrap();
    assert!(co < un, "{co} vs {un}");
    let r = reports(&d.join("rule"));
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].inputs.len(), 3);
    assert_eq!(r[0].outputs.len(), 6);

    let o = peclab(
        d,
        &[
            "correct",
            "--layout",
            "sparse.json",
            "--eta-fit",
            "missing.json",
            "--out-dir",
            "m",
        ],
    );
    assert_ne!(code(&o), 0);
    assert_eq!(code(&o), 4);

    let o = peclab(
        d,
        &[
            "correct",
            "--layout",
            "sparse.json",
            "--eta",
            "5",
            "--strict",
            "--out-dir",
            "strict",
        ],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(d.join("strict/sparse.dose.csv").exists());
    assert!(stderr(&o).contains("refinement stopped"), "{}", stderr(&o));
}

#[test]
fn correct_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    peclab(
        d,
        &[
            "gen-pattern",
            "--rho",
            "0.4",
            "--length",
            "300",
            "--out",
            "l.json",
        ],
    );
    for out in ["a", "b"] {
        let o = peclab(
            d,
            &[
                "correct",
                "--layout",
                "l.json",
                "--eta",
                "5",
                "--out-dir",
                out,
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in [
        "l.dose.csv",
        "l.rects.json",
        "flatness.json",
        "flatness.svg",
    ] {
        assert_eq!(
            std::fs::read(d.join("a").join(f)).unwrap(),
            std::fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

use peclab_core::fieldkernel::*;
use peclab_core::layout::*;
use peclab_core::virtualfab::*;
use proptest::prelude::*;

fn sim(rho: f64) -> PatternSimulator {
    let layout = LeadArray::with_fill(6, 70.0, rho, 300.0).unwrap().layout();
    let pattern = rasterize(&layout, 5.0, 600.0).unwrap();
    let k = make_psf_kernel(&PsfParams::default(), 5.0).unwrap();
    let conv = Convolver::new(&k, pattern.frame()).unwrap();
    PatternSimulator::new(&layout, pattern, &conv, None, ClassifyRules::default()).unwrap()
}

fn rank(o: DeviceOutcome) -> u8 {
    match o.exposure_class() {
        DeviceOutcome::Underexposed => 0,
        DeviceOutcome::WellFormed => 1,
        _ => 2,
    }
}

#[test]
fn dose_sweep_orders_outcomes() {
    for rho in [0.19, 0.3, 0.4, 0.55] {
        let s = sim(rho);
        let mut seen = Vec::new();
        let mut area = 0;
        for k in 0..60 {
            let dose = 0.2 * 1.08f64.powi(k);
            let r = s.expose(dose, 0.18).unwrap();
            let a = r.developed.count_set();
            assert!(a >= area, "rho {rho}: developed area shrank at dose {dose}");
            area = a;
            seen.push(r.outcome);
        }
        assert!(
            seen.windows(2).all(|w| rank(w[0]) <= rank(w[1])),
            "rho {rho}: {seen:?}"
        );
        assert_eq!(seen[0], DeviceOutcome::Underexposed);
        assert_eq!(*seen.last().unwrap(), DeviceOutcome::Overexposed);
    }
}

#[test]
fn closed_form_onset_matches_bisection() {
    for rho in [0.19, 0.55] {
        let s = sim(rho);
        let (mut lo, mut hi) = (0.01_f64, 100.0_f64);
        for _ in 0..80 {
            let mid = (lo * hi).sqrt();
            if s.outcome(mid, 0.18).unwrap() == DeviceOutcome::Underexposed {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let onset = s.onset_dose(0.18).unwrap();
        assert!(
            (hi / onset - 1.0).abs() < 1e-9,
            "rho {rho}: bisection {hi}, closed form {onset}"
        );
    }
}

#[test]
fn uncorrected_onset_falls_with_density() {
    let onsets: Vec<f64> = [0.19, 0.37, 0.55]
        .iter()
        .map(|&r| sim(r).onset_dose(0.18).unwrap())
        .collect();
    assert!(onsets[0] > onsets[1] && onsets[1] > onsets[2], "{onsets:?}");
}

#[test]
fn sweep_sampling_is_deterministic_and_in_bounds() {
    let b = FactorBounds::default();
    let a = b.sample(200, 11);
    assert_eq!(a, b.sample(200, 11));
    assert_ne!(a, b.sample(200, 12));
    for p in &a {
        b.check(p).unwrap();
    }
}

#[test]
fn reference_replicates_yield_near_calibration() {
    let m = ProcessModel::default();
    let p = DesignPoint::reference();
    let n = 2000;
    let well = (0..n)
        .filter(|&s| m.process_response(&p, s).unwrap() == DeviceOutcome::WellFormed)
        .count();
    let f = well as f64 / n as f64;
    assert!((f - 0.75).abs() < 0.03, "{f}");
}

#[test]
fn reference_dose_window() {
    let m = ProcessModel::default();
    let (lo, hi) = m.dose_window(&DesignPoint::reference(), 0.5).unwrap();
    assert!(
        (lo - 0.6).abs() < 1e-12 && (hi - 2.0).abs() < 1e-12,
        "{lo} {hi}"
    );
    assert!((m.peak_yield(&DesignPoint::reference()) - 0.75).abs() < 0.1);
}

fn latitude(m: &ProcessModel, p: &DesignPoint) -> f64 {
    let (lo, hi) = m.dose_window(p, 0.5).unwrap();
    hi - lo
}

#[test]
fn factor_trends() {
    let m = ProcessModel::default();
    let r = DesignPoint::reference();
    // thicker resist narrows the window
    assert!(
        latitude(&m, &r.with(Factor::DHsq, 30.0)) > latitude(&m, &r)
            && latitude(&m, &r) > latitude(&m, &r.with(Factor::DHsq, 70.0))
    );
    // longer delay raises the upper limit
    assert!(
        m.dose_window(&r.with(Factor::THsq, 100.0), 0.5).unwrap().1
            > m.dose_window(&r, 0.5).unwrap().1
    );
    // a thicker cap raises the peak and widens the window
    let al = r.with(Factor::DAl, 20.0);
    assert!(m.peak_yield(&al) > m.peak_yield(&r));
    assert!(latitude(&m, &al) > latitude(&m, &r));
    // longer development raises the upper limit
    assert!(
        m.dose_window(&r.with(Factor::TMf312, 3.0), 0.5).unwrap().1
            > m.dose_window(&r, 0.5).unwrap().1
    );
}

proptest! {
    #[test]
    fn probabilities_sum_to_one(
        d in 0.05f64..5.0, dh in 20.0f64..80.0, al in 0.0f64..20.0, th in 10.0f64..120.0, tm in 2.0f64..4.0,
    ) {
        let m = ProcessModel::default();
        let p = m.probabilities(&DesignPoint::new(d, dh, al, th, tm).unwrap());
        prop_assert!(p.under >= 0.0 && p.well >= 0.0 && p.over >= 0.0);
        prop_assert!((p.under + p.well + p.over - 1.0).abs() < 1e-12);
    }

    #[test]
    fn underexposure_falls_with_dose(
        d in 0.4f64..2.7, step in 0.01f64..0.5, dh in 20.0f64..80.0, al in 0.0f64..20.0, th in 10.0f64..120.0, tm in 2.0f64..4.0,
    ) {
        let m = ProcessModel::default();
        let p = DesignPoint::new(d, dh, al, th, tm).unwrap();
        let a = m.probabilities(&p);
        let b = m.probabilities(&p.with(Factor::Dose, d + step));
        prop_assert!(b.under <= a.under + 1e-15);
        prop_assert!(b.over >= a.over - 1e-15);
    }
}

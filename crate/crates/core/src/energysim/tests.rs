use super::*;

fn p() -> EnergyParams<f64> {
    default_params()
}

fn avg(label: &str) -> f64 {
    simulate(&scenario::<f64>(label).unwrap(), 600_000, &p())
        .unwrap()
        .avg_current_ma
}

fn single(interval_ms: u64) -> Scenario<f64> {
    Scenario::new(
        "sweep",
        vec![Load::Polling {
            interval_ms,
            work_scale: 1.0,
        }],
    )
}

#[test]
fn wakelock_costs_exactly_the_awake_overhead() {
    assert_eq!(avg("idle_wl") - avg("idle"), 35.0);
}

#[test]
fn a_series_ratios_against_wakelocked_idle() {
    let base = avg("idle_wl");
    let a3 = avg("a3") / base;
    let a4 = avg("a4") / base;
    assert!(a4 >= 2.0, "a4 ratio {a4}");
    assert!((1.05..=1.25).contains(&a3), "a3 ratio {a3}");
    assert!(avg("a1") >= avg("a3"));
    assert!(avg("a4") >= avg("a1"));
}

#[test]
fn b_series_screen_on_increase_is_small() {
    let base = avg("b0");
    for label in ["b1", "b2", "b3", "b4"] {
        let r = avg(label) / base;
        assert!((1.02..=1.13).contains(&r), "{label} ratio {r}");
    }
    assert!(avg("b4") > avg("b2") && avg("b2") > avg("b1"));
}

#[test]
fn drain_never_increases_with_longer_interval() {
    let params = p();
    let mut prev = f64::INFINITY;
    for interval in (20..=5000)
        .step_by(5)
        .chain([9_999, 10_000, 10_001, 60_000])
    {
        let r = simulate(&single(interval), 10_000_000, &params).unwrap();
        assert!(
            r.avg_current_ma <= prev + 1e-12,
            "{interval} ms drew {} after {prev}",
            r.avg_current_ma
        );
        prev = r.avg_current_ma;
    }
}

#[test]
fn pinning_threshold_is_a_cliff() {
    let params = p();
    let t = params.pinning_threshold_ms().ceil() as u64;
    let below = simulate(&single(t - 1), 600_000, &params).unwrap();
    let above = simulate(&single(t + 1), 600_000, &params).unwrap();
    assert_eq!(below.high_freq_fraction, 1.0);
    assert!(above.high_freq_fraction < 0.2);
}

#[test]
fn event_only_stays_within_one_percent_of_idle() {
    let s = Scenario::new(
        "events",
        vec![
            Load::Events {
                rate_hz: 0.05,
                work_ms: 2.0,
            },
            Load::Events {
                rate_hz: 0.01,
                work_ms: 2.0,
            },
        ],
    );
    let r = simulate(&s, 600_000, &p()).unwrap();
    assert!(r.avg_current_ma / avg("idle") <= 1.01);
}

#[test]
fn idle_device_sleeps() {
    let r = simulate(&scenario::<f64>("idle").unwrap(), 60_000, &p()).unwrap();
    assert_eq!(r.avg_current_ma, 8.0);
    assert_eq!(r.awake_fraction, 0.0);
    assert_eq!(r.wakeup_count, 0);
}

#[test]
fn coarse_polling_counts_wakeups() {
    let r = simulate(&single(60_000), 3_600_000, &p()).unwrap();
    assert_eq!(r.wakeup_count, 60);
    assert!(r.awake_fraction < 0.02);
}

#[test]
fn short_duration_is_rejected() {
    let err = simulate(&single(1000), 9_999, &p()).unwrap_err();
    assert_eq!(
        err,
        EnergyError::DurationTooShort {
            duration_ms: 9_999,
            interval_ms: 1000
        }
    );
}

#[test]
fn bad_params_are_rejected() {
    let mut params = p();
    params.i_sleep_ma = -1.0;
    assert_eq!(
        simulate(&single(1000), 60_000, &params).unwrap_err(),
        EnergyError::InvalidParam("i_sleep_ma")
    );
}

#[test]
fn result_does_not_depend_on_duration() {
    let s = scenario::<f64>("a3").unwrap();
    let a = simulate(&s, 60_000, &p()).unwrap();
    let b = simulate(&s, 6_000_000, &p()).unwrap();
    assert_eq!(a.avg_current_ma, b.avg_current_ma);
}

#[test]
fn f32_agrees_with_f64() {
    let params32 = default_params::<f32>();
    for label in SCENARIO_LABELS {
        let a = simulate(&scenario::<f32>(label).unwrap(), 600_000, &params32).unwrap();
        let b = avg(label);
        assert!(
            (f64::from(a.avg_current_ma) - b).abs() / b < 1e-5,
            "{label}"
        );
    }
}

#[test]
fn defaults_match_calibration() {
    let cal = calibrate();
    let d = p();
    assert_eq!(cal.i_sleep_ma, d.i_sleep_ma);
    assert_eq!(cal.i_cpu_high_ma, d.i_cpu_high_ma);
    assert_eq!(cal.poll_work_ms, d.poll_work_ms);
    assert!(cal.a4_ratio >= A4_MIN_RATIO);
}

#[test]
fn comparison_ratios_are_relative_to_first() {
    let scenarios: Vec<_> = ["idle_wl", "a1", "a3"]
        .iter()
        .map(|l| scenario::<f64>(l).unwrap())
        .collect();
    let cmp = compare(&scenarios, 600_000, &p()).unwrap();
    assert_eq!(cmp.ratios[0], 1.0);
    assert_eq!(cmp.ratio("a1"), Some(avg("a1") / avg("idle_wl")));
    assert!(cmp.table().lines().count() == 4);
}

#[test]
fn params_round_trip_through_json() {
    let text = serde_json::to_string(&p()).unwrap();
    let back: EnergyParams<f64> = serde_json::from_str(&text).unwrap();
    assert_eq!(back, p());
}

#[test]
fn unknown_scenario_is_an_error() {
    assert!(matches!(
        scenario::<f64>("z9"),
        Err(EnergyError::UnknownScenario(_))
    ));
}

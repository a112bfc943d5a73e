use std::time::Duration;

use proptest::prelude::*;

use pilotkit::client::{Session, SessionOptions};
use pilotkit::profiling;
use pilotkit_core::placement::SchedulingPolicy;
use pilotkit_core::profile::{binned_peaks, Interval, Profile, ProfileError};
use pilotkit_core::{EntityKind, Event, PilotDescription, Timestamp, UnitDescription};

const MS: u64 = 1_000_000;

fn ev(ms: u64, kind: EntityKind, id: &str, name: &str) -> Event {
    Event::new(Timestamp::from_mono(ms * MS), kind, id, name, "test")
}

fn pilot(id: &str, cores: u32, active: u64, done: u64) -> Vec<Event> {
    vec![
        ev(0, EntityKind::Pilot, id, "NEW"),
        ev(0, EntityKind::Pilot, id, "LAUNCHING"),
        ev(0, EntityKind::Pilot, id, "QUEUED"),
        ev(active, EntityKind::Pilot, id, "ACTIVE").with("cores", cores.to_string()),
        ev(done, EntityKind::Pilot, id, "DONE"),
    ]
}

/// A unit that executes on `pilot` with `cores` over `[start, end)` ms.
fn unit(id: &str, pilot: &str, cores: u32, start: u64, end: u64) -> Vec<Event> {
    let u = |ms, name| ev(ms, EntityKind::Unit, id, name);
    vec![
        u(0, "NEW"),
        u(0, "UMGR_SCHEDULING"),
        u(start, "UMGR_STAGING_INPUT").with("pilot", pilot),
        u(start, "AGENT_STAGING_INPUT"),
        u(start, "AGENT_SCHEDULING"),
        u(start, "EXECUTING")
            .with("pilot", pilot)
            .with("cores", cores.to_string()),
        u(end, "AGENT_STAGING_OUTPUT"),
        u(end, "DONE").with("exit_code", "0"),
    ]
}

fn peak(bins: &[pilotkit_core::profile::Bin]) -> u64 {
    bins.iter().map(|b| b.value).max().unwrap()
}

#[test]
fn sequential_stages_peak_and_dip() {
    let mut events = pilot("pilot.0000", 64, 0, 5000);
    for i in 0..64 {
        events.extend(unit(&format!("unit.{i:06}"), "pilot.0000", 1, 1000, 2000));
        events.extend(unit(&format!("unit.{:06}", 64 + i), "pilot.0000", 1, 3000, 4000));
    }
    let p = Profile::load(events).unwrap();
    let bins = p.concurrency(EntityKind::Unit, "EXECUTING", 0.5).unwrap();
    let values: Vec<u64> = bins.iter().map(|b| b.value).collect();
    assert_eq!(values, [0, 0, 64, 64, 0, 0, 64, 64, 0, 0, 0]);
}

#[test]
fn single_unit_is_a_series_of_ones() {
    let mut events = pilot("pilot.0000", 4, 0, 1000);
    events.extend(unit("unit.000000", "pilot.0000", 1, 200, 700));
    let p = Profile::load(events).unwrap();
    let bins = p.concurrency(EntityKind::Unit, "EXECUTING", 0.1).unwrap();
    let ones: Vec<f64> = bins.iter().filter(|b| b.value == 1).map(|b| b.start).collect();
    assert!(bins.iter().all(|b| b.value <= 1));
    assert_eq!(ones.len(), 5);
    assert!((ones[0] - 0.2).abs() < 1e-9 && (ones[4] - 0.6).abs() < 1e-9);
}

#[test]
fn utilization_bounds() {
    let mut events = pilot("pilot.0000", 8, 100, 1100);
    events.extend(pilot("pilot.0001", 8, 100, 1100));
    events.extend(unit("unit.000000", "pilot.0000", 8, 100, 1100));
    let p = Profile::load(events).unwrap();
    let full = p.utilization("pilot.0000").unwrap();
    assert!((full.fraction - 1.0).abs() < 1e-9, "{full:?}");
    assert!((full.active_secs - 1.0).abs() < 1e-9);
    let idle = p.utilization("pilot.0001").unwrap();
    assert_eq!(idle.fraction, 0.0);
    assert_eq!(idle.busy_core_secs, 0.0);
}

#[test]
fn pilot_that_never_ran_has_no_utilization() {
    let p = Profile::load(vec![
        ev(0, EntityKind::Pilot, "pilot.0000", "NEW").with("cores", "4"),
        ev(1, EntityKind::Pilot, "pilot.0000", "LAUNCHING"),
        ev(2, EntityKind::Pilot, "pilot.0000", "FAILED"),
    ])
    .unwrap();
    assert_eq!(
        p.utilization("pilot.0000"),
        Err(ProfileError::NeverActive("pilot.0000".into()))
    );
    assert!(matches!(
        p.utilization("pilot.9999"),
        Err(ProfileError::UnknownEntity(_))
    ));
    let s = profiling::summary(&p, 0.1).unwrap();
    assert!(s.pilots["pilot.0000"].utilization.is_none());
}

#[test]
fn bad_resolution_is_rejected() {
    let p = Profile::load(pilot("pilot.0000", 1, 0, 10)).unwrap();
    for r in [0.0, -1.0, f64::NAN, f64::INFINITY] {
        assert_eq!(
            p.concurrency(EntityKind::Unit, "EXECUTING", r),
            Err(ProfileError::BadResolution)
        );
    }
}

/// Level of the weighted step function just after time `t`.
fn level_after(intervals: &[Interval], t: u64) -> u64 {
    intervals
        .iter()
        .filter(|iv| iv.start <= t && t < iv.end)
        .map(|iv| iv.weight)
        .sum()
}

proptest! {
    /// Each bin holds the maximum level over the instants inside it, checked
    /// by evaluating the step function at every breakpoint.
    #[test]
    fn bins_match_pointwise_maximum(
        raw in proptest::collection::vec((0u64..2000, 0u64..500, 1u64..32), 0..40),
        res_ms in 1u64..400,
    ) {
        let intervals: Vec<Interval> = raw.iter().map(|&(s, len, w)| Interval { start: s * MS, end: (s + len) * MS, weight: w }).collect();
        let end_ns = 2500 * MS;
        let bins = binned_peaks(&intervals, res_ms as f64 / 1000.0, end_ns).unwrap();
        let width = res_ms * MS;
        prop_assert_eq!(bins.len() as u64, end_ns / width + 1);
        for (b, bin) in bins.iter().enumerate() {
            let lo = b as u64 * width;
            let hi = lo + width;
            let expected = intervals
                .iter()
                .flat_map(|iv| [iv.start, iv.end])
                .filter(|&t| lo < t && t < hi)
                .chain([lo])
                .map(|t| level_after(&intervals, t))
                .max()
                .unwrap();
            prop_assert_eq!(bin.value, expected, "bin {}", b);
        }
    }

    /// Executing units never claim more cores than their pilot holds, so
    /// the per-bin core count stays within capacity.
    #[test]
    fn core_bins_never_exceed_pilot_capacity(
        jobs in proptest::collection::vec((1u32..9, 1u64..300), 1..30),
    ) {
        const CORES: u32 = 16;
        // Lay units out greedily on a timeline so at most CORES are in use.
        let mut running: Vec<(u64, u32)> = Vec::new();
        let mut events = pilot("pilot.0000", CORES, 0, 100_000);
        let mut now = 0;
        for (i, &(cores, len)) in jobs.iter().enumerate() {
            loop {
                running.retain(|&(end, _)| end > now);
                let used: u32 = running.iter().map(|r| r.1).sum();
                if used + cores <= CORES {
                    break;
                }
                now = running.iter().map(|r| r.0).min().unwrap();
            }
            running.push((now + len, cores));
            events.extend(unit(&format!("unit.{i:06}"), "pilot.0000", cores, now, now + len));
        }
        let p = Profile::load(events).unwrap();
        let bins = p.core_concurrency("EXECUTING", Some("pilot.0000"), 0.05).unwrap();
        prop_assert!(bins.iter().all(|b| b.value <= CORES as u64));
        let u = p.utilization("pilot.0000").unwrap();
        prop_assert!((0.0..=1.0).contains(&u.fraction));
    }
}

#[test]
fn real_run_durations_cover_the_lifetime() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().join("s");
    let opts = SessionOptions {
        data_root: d.path().to_path_buf(),
        agent_executors: Some(2),
        shutdown_timeout: Duration::from_secs(10),
        ..SessionOptions::default()
    };
    let s = Session::create(&dir, opts).unwrap();
    let pilots = s
        .pilot_manager()
        .submit_pilots(&[PilotDescription::new("local", 2, 60)])
        .unwrap();
    let um = s.unit_manager(SchedulingPolicy::RoundRobin).unwrap();
    um.add_pilots(&pilots).unwrap();
    let units = um
        .submit_units(vec![UnitDescription::new("/bin/sleep").args(["0.3"])])
        .unwrap();
    let uid = units[0].as_ref().unwrap().id.clone();
    um.wait_units(None, Some(Duration::from_secs(60))).unwrap();
    s.close().unwrap();

    let loaded = profiling::load_session(&dir).unwrap();
    assert!(loaded.corrupt.is_empty());
    let p = &loaded.profile;
    let r = profiling::durations_report(p, &uid).unwrap();
    let first = r.states.first().unwrap();
    let last = r.states.last().unwrap();
    assert_eq!((first.state.as_str(), last.state.as_str()), ("NEW", "DONE"));
    let total: f64 = r.states.iter().map(|s| s.duration.unwrap()).sum();
    assert!((total - (last.entered - first.entered)).abs() < 1e-6);
    assert!(r.totals["EXECUTING"] >= 0.3, "{:?}", r.totals);

    let bins = p.concurrency(EntityKind::Unit, "EXECUTING", 0.1).unwrap();
    assert_eq!(peak(&bins), 1);
    let u = p.utilization(&pilots[0].id).unwrap();
    assert!(u.fraction > 0.0 && u.fraction <= 1.0, "{u:?}");

    // Recomputing from a fresh load gives bit-identical output.
    let again = profiling::load_session(&dir).unwrap().profile;
    let a = serde_json::to_string(&profiling::summary(p, 0.1).unwrap()).unwrap();
    let b = serde_json::to_string(&profiling::summary(&again, 0.1).unwrap()).unwrap();
    assert_eq!(a, b);
}

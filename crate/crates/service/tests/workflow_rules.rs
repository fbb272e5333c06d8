use std::collections::HashSet;
use std::sync::{Arc, Barrier};

use chrono::{DateTime, Duration, TimeZone, Utc};
use meshqa_core::{AnnotationRecord, BinaryTagSet, QualityScore};
use meshqa_service::{BatchState, ManualClock, Role, Service, ServiceConfig, ServiceError};

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 6, 1, 8, 0, 0).unwrap()
}

fn service() -> (Arc<Service>, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::new(t0()));
    (Arc::new(Service::in_memory(clock.clone(), ServiceConfig::default())), clock)
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("obj-{i:03}")).collect()
}

fn rec(object_id: &str, score: QualityScore) -> AnnotationRecord {
    AnnotationRecord::human(object_id, score, BinaryTagSet::default(), t0())
}

/// Labels every object in the batch as `who`.
fn label_all(svc: &Service, batch: &str, who: &str, score: QualityScore) {
    while let Ok((Some(a), _)) = svc.next_task(batch, who) {
        svc.submit(&a.assignment_id, Some(who), rec(&a.object_id, score)).unwrap();
    }
}

#[test]
fn batch_advances_when_labeling_completes() {
    let (svc, _) = service();
    svc.create_batch(Some("b".into()), ids(3), Some(0.5)).unwrap();
    assert_eq!(svc.batch("b").unwrap().0.state, BatchState::Open);
    let mut seen = Vec::new();
    while let (Some(a), state) = svc.next_task("b", "A").unwrap() {
        assert_eq!(state, BatchState::Labeling);
        seen.push(a.object_id.clone());
        svc.submit(&a.assignment_id, None, rec(&a.object_id, QualityScore::Medium)).unwrap();
    }
    assert_eq!(seen, ids(3));
    assert_eq!(svc.batch("b").unwrap().0.state, BatchState::Validating);
    let (sample, _) = svc.sample_for_validation("b", 1).unwrap();
    assert_eq!(sample.len(), 2);
}

#[test]
fn zero_fraction_skips_validation() {
    let (svc, _) = service();
    svc.create_batch(Some("b".into()), ids(2), Some(0.0)).unwrap();
    label_all(&svc, "b", "A", QualityScore::Low);
    assert_eq!(svc.batch("b").unwrap().0.state, BatchState::Closed);
    assert!(matches!(svc.next_task("b", "A"), Err(ServiceError::BatchNotActive(..))));
    assert_eq!(svc.export(&["b".into()], true).unwrap().lines().count(), 2);
}

#[test]
fn sample_size_and_determinism() {
    let (svc, _) = service();
    for (name, fraction) in [("p", 0.1), ("q", 0.1), ("all", 1.0), ("tiny", 0.001)] {
        svc.create_batch(Some(name.into()), ids(100), Some(fraction)).unwrap();
        label_all(&svc, name, "A", QualityScore::High);
    }
    let (p, _) = svc.sample_for_validation("p", 42).unwrap();
    let (q, _) = svc.sample_for_validation("q", 42).unwrap();
    assert_eq!(p.len(), 10);
    assert_eq!(p, q);
    assert_eq!(svc.sample_for_validation("p", 42).unwrap().0, p);
    assert!(matches!(svc.sample_for_validation("p", 43), Err(ServiceError::BatchNotReady(..))));
    assert_eq!(svc.sample_for_validation("all", 5).unwrap().0, ids(100));
    assert_eq!(svc.sample_for_validation("tiny", 5).unwrap().0.len(), 1);
}

#[test]
fn thousand_object_batch_expects_hundred_validations() {
    let (svc, _) = service();
    let b = svc.create_batch(None, ids(1000), None).unwrap();
    assert_eq!(b.validation_fraction, 0.1);
    label_all(&svc, &b.batch_id, "A", QualityScore::High);
    assert_eq!(svc.sample_for_validation(&b.batch_id, 0).unwrap().0.len(), 100);
}

#[test]
fn polling_is_idempotent_until_submitted() {
    let (svc, _) = service();
    svc.create_batch(Some("b".into()), ids(3), None).unwrap();
    let (a1, _) = svc.next_task("b", "A").unwrap();
    let (a2, _) = svc.next_task("b", "A").unwrap();
    assert_eq!(a1, a2);
    let (b1, _) = svc.next_task("b", "B").unwrap();
    assert_ne!(a1.as_ref().unwrap().object_id, b1.unwrap().object_id);
}

#[test]
fn concurrent_polling_assigns_disjoint_objects() {
    let (svc, _) = service();
    svc.create_batch(Some("b".into()), ids(40), None).unwrap();
    let n = 8;
    let barrier = Arc::new(Barrier::new(n));
    let handles: Vec<_> = (0..n)
        .map(|k| {
            let (svc, barrier) = (svc.clone(), barrier.clone());
            std::thread::spawn(move || {
                barrier.wait();
                let who = format!("ann-{k}");
                let mut got = Vec::new();
                for _ in 0..5 {
                    let (a, _) = svc.next_task("b", &who).unwrap();
                    let a = a.unwrap();
                    got.push(a.object_id.clone());
                    svc.submit(&a.assignment_id, Some(&who), rec(&a.object_id, QualityScore::Low)).unwrap();
                }
                got
            })
        })
        .collect();
    let all: Vec<String> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
    assert_eq!(all.len(), 40);
    assert_eq!(all.iter().collect::<HashSet<_>>().len(), 40);
    let state = svc.snapshot();
    let batch = &state.batches["b"];
    for o in ids(40) {
        let primaries = batch.assignments.iter().filter(|a| a.object_id == o && a.role == Role::Primary).count();
        assert_eq!(primaries, 1, "{o}");
    }
}

#[test]
fn expired_lease_is_reissued_and_old_assignment_goes_stale() {
    let (svc, clock) = service();
    svc.create_batch(Some("b".into()), ids(1), None).unwrap();
    let (a, _) = svc.next_task("b", "A").unwrap();
    let a = a.unwrap();
    assert_eq!(svc.next_task("b", "B").unwrap().0, None);
    clock.advance(Duration::minutes(31));
    let (b, _) = svc.next_task("b", "B").unwrap();
    assert_eq!(b.as_ref().unwrap().object_id, a.object_id);
    let err = svc.submit(&a.assignment_id, Some("A"), rec(&a.object_id, QualityScore::Low)).unwrap_err();
    assert!(matches!(err, ServiceError::StaleAssignment(..)), "{err}");
    svc.submit(&b.unwrap().assignment_id, Some("B"), rec(&a.object_id, QualityScore::Low)).unwrap();
}

#[test]
fn mismatched_submission_persists_nothing() {
    let (svc, _) = service();
    svc.create_batch(Some("b".into()), ids(2), None).unwrap();
    let (a, _) = svc.next_task("b", "A").unwrap();
    let a = a.unwrap();
    let before = svc.snapshot();
    let err = svc.submit(&a.assignment_id, None, rec("obj-001", QualityScore::Low)).unwrap_err();
    assert!(matches!(err, ServiceError::ObjectMismatch { .. }));
    assert_eq!(svc.snapshot(), before);
}

#[test]
fn resubmission_creates_version_and_latest_wins() {
    let (svc, _) = service();
    svc.create_batch(Some("b".into()), ids(2), None).unwrap();
    let (a, _) = svc.next_task("b", "A").unwrap();
    let a = a.unwrap();
    assert_eq!(svc.submit(&a.assignment_id, None, rec(&a.object_id, QualityScore::Low)).unwrap().version, 1);
    assert_eq!(svc.submit(&a.assignment_id, None, rec(&a.object_id, QualityScore::Superior)).unwrap().version, 2);
    assert_eq!(svc.annotations("b", &a.object_id).unwrap().len(), 2);
    let export = svc.export(&["b".into()], false).unwrap();
    assert_eq!(export.lines().count(), 1);
    assert!(export.contains("\"score\":3"));
}

#[test]
fn score_high_vs_superior_is_a_discrepancy() {
    let (svc, _) = service();
    svc.create_batch(Some("b".into()), ids(1), Some(1.0)).unwrap();
    label_all(&svc, "b", "A", QualityScore::High);
    assert!(matches!(svc.discrepancies("b"), Err(ServiceError::BatchNotReady(..))));
    svc.sample_for_validation("b", 0).unwrap();
    label_all(&svc, "b", "B", QualityScore::Superior);
    let ds = svc.discrepancies("b").unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds[0].field, "score");
    assert!(matches!(svc.resolve(&ds[0].discrepancy_id, serde_json::json!(true)), Err(ServiceError::InvalidRequest(_))));
    let (d, state) = svc.resolve(&ds[0].discrepancy_id, serde_json::json!(3)).unwrap();
    assert!(d.resolved);
    assert_eq!(state, BatchState::Closed);
    assert!(svc.export(&["b".into()], true).unwrap().contains("\"score\":3"));
}

#[test]
fn agreement_closes_batch_with_empty_report() {
    let (svc, _) = service();
    svc.create_batch(Some("b".into()), ids(4), Some(0.5)).unwrap();
    label_all(&svc, "b", "A", QualityScore::Medium);
    svc.sample_for_validation("b", 3).unwrap();
    label_all(&svc, "b", "B", QualityScore::Medium);
    assert_eq!(svc.batch("b").unwrap().0.state, BatchState::Closed);
    assert!(svc.discrepancies("b").unwrap().is_empty());
}

#[test]
fn states_never_move_backward() {
    let (svc, clock) = service();
    svc.create_batch(Some("b".into()), ids(3), Some(1.0)).unwrap();
    let mut last = BatchState::Open;
    let mut check = || {
        let s = svc.batch("b").unwrap().0.state;
        assert!(s >= last, "{s:?} after {last:?}");
        last = s;
    };
    for who in ["A", "B", "A", "C"] {
        for _ in 0..4 {
            if let Ok((Some(a), _)) = svc.next_task("b", who) {
                let _ = svc.submit(&a.assignment_id, Some(who), rec(&a.object_id, QualityScore::Low));
            }
            let _ = svc.sample_for_validation("b", 9);
            clock.advance(Duration::minutes(1));
            check();
        }
    }
    assert_eq!(last, BatchState::Closed);
}

#[test]
fn replaying_the_log_reconstructs_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let clock = Arc::new(ManualClock::new(t0()));
    let svc = Service::open(&path, clock.clone(), ServiceConfig::default()).unwrap();
    svc.create_batch(Some("b".into()), ids(5), Some(0.4)).unwrap();
    label_all(&svc, "b", "A", QualityScore::High);
    svc.sample_for_validation("b", 2).unwrap();
    let (v, _) = svc.next_task("b", "B").unwrap();
    let v = v.unwrap();
    svc.submit(&v.assignment_id, None, rec(&v.object_id, QualityScore::Superior)).unwrap();
    svc.create_batch(Some("c".into()), ids(2), None).unwrap();
    let (state, export) = (svc.snapshot(), svc.export(&["b".into()], false).unwrap());
    drop(svc);

    let reopened = Service::open(&path, clock.clone(), ServiceConfig::default()).unwrap();
    assert_eq!(reopened.snapshot(), state);
    assert_eq!(reopened.export(&["b".into()], false).unwrap(), export);

    // a torn final write is dropped and the log stays appendable
    use std::io::Write;
    std::fs::OpenOptions::new().append(true).open(&path).unwrap().write_all(b"{\"event\":\"batch_cre").unwrap();
    drop(reopened);
    let again = Service::open(&path, clock, ServiceConfig::default()).unwrap();
    assert_eq!(again.snapshot(), state);
    again.create_batch(Some("d".into()), ids(1), None).unwrap();
    assert_eq!(again.batches().len(), 3);
}

#[test]
fn corrupt_log_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    std::fs::write(&path, "not json\n").unwrap();
    let clock = Arc::new(ManualClock::new(t0()));
    match Service::open(&path, clock, ServiceConfig::default()) {
        Err(ServiceError::CorruptLog { line: 1, .. }) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("corrupt log accepted"),
    }
}

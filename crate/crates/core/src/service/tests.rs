use super::api::handle_line;
use super::*;
use crate::puzzle::{solve_puzzle_with, SolveOptions};
use crate::Exec;
use serde_json::Value;

const T0: u64 = 1_700_000_000_000;

fn key() -> ServiceKey {
    ServiceKey::new([7; 32])
}

fn service_with(cfg: ServiceConfig) -> (Service, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::new(T0));
    (Service::with_key(cfg, key(), clock.clone()).unwrap(), clock)
}

fn service() -> (Service, Arc<ManualClock>) {
    service_with(ServiceConfig::default())
}

fn nexus5(id: &str) -> DeviceSpecs {
    DeviceSpecs {
        device_id: id.into(),
        model_name: "Nexus 5".into(),
        cpu_class: "smartphone".into(),
    }
}

fn enroll(svc: &Service, user: &str) {
    svc.register_user(user, Some(T0 - 400 * 86_400_000)).unwrap();
    svc.register_device(user, &nexus5("d")).unwrap();
}

fn activity(user: &str, subject: &str, text: &str) -> ActivityRequest {
    ActivityRequest {
        user_id: user.into(),
        device_id: "d".into(),
        subject_id: subject.into(),
        category: Some("games".into()),
        payload: text.as_bytes().to_vec(),
    }
}

fn solve(t: &ActivityTicket) -> SolutionRequest {
    let opts = SolveOptions {
        exec: Exec::Sequential,
        seed: Some(1),
        deadline: None,
    };
    let sol = solve_puzzle_with(&t.puzzle.cookie.0, &t.puzzle.difficulty, t.puzzle.shares_required, opts).unwrap();
    t.solution(sol.shares)
}

#[test]
fn registration() {
    let (svc, _) = service();
    let u = svc.register_user("alice", None).unwrap();
    assert_eq!(u.timeout, T0);
    assert_eq!(u.creation_time, T0);
    assert!(u.devices.is_empty());
    assert!(matches!(svc.register_user("alice", None), Err(ServiceError::Conflict(_))));

    let d = svc.register_device("alice", &nexus5("phone")).unwrap();
    assert_eq!(d.hashrate.hps(), 13_260.0);
    svc.register_device("alice", &nexus5("tablet")).unwrap();
    assert_eq!(svc.user("alice").unwrap().devices.len(), 2);
    assert!(matches!(
        svc.register_device("alice", &nexus5("phone")),
        Err(ServiceError::Conflict(_))
    ));
    let e = svc.register_device("bob", &nexus5("x")).unwrap_err();
    assert_eq!(e.code(), "registration_required");
}

#[test]
fn unregistered_and_malformed_submissions() {
    let (svc, _) = service();
    assert_eq!(svc.submit_activity(&activity("ghost", "s", "x")).unwrap_err().code(), "registration_required");
    enroll(&svc, "u");
    let mut a = activity("u", "s", "x");
    a.device_id = "other".into();
    assert_eq!(svc.submit_activity(&a).unwrap_err().code(), "registration_required");
    assert_eq!(svc.submit_activity(&activity("u", "s", "")).unwrap_err().code(), "malformed");
    assert_eq!(svc.submit_activity(&activity("u", "", "x")).unwrap_err().code(), "malformed");
    assert_eq!(svc.stats().history_len, 0);
}

#[test]
fn honest_defaults_and_accumulation() {
    let (svc, clock) = service();
    enroll(&svc, "u");
    let t1 = svc.submit_activity(&activity("u", "s1", "great game")).unwrap();
    assert_eq!(t1.fraud_score, 0.0);
    assert_eq!(t1.penalty_ms, 2_000);
    assert_eq!(t1.puzzle.timeout, T0 + 2_000);
    // Δ = ητ/(2q) = 13260 · 2 / 8.
    assert_eq!(t1.puzzle.difficulty.to_u64(), Some(3_315));
    clock.advance(10);
    let t2 = svc.submit_activity(&activity("u", "s2", "fun")).unwrap();
    assert_eq!(t2.puzzle.timeout, t1.puzzle.timeout + t2.penalty_ms);
    assert_eq!(svc.user("u").unwrap().timeout, t2.puzzle.timeout);
    assert_eq!(svc.pending().len(), 2);
}

#[test]
fn solution_gates_publication() {
    let (svc, clock) = service();
    enroll(&svc, "u");
    let t = svc.submit_activity(&activity("u", "s", "nice")).unwrap();
    let sol = solve(&t);
    clock.advance(500);
    let v = svc.submit_solution(&sol).unwrap();
    assert!(v.is_accepted(), "{v:?}");
    assert_eq!(v.post_at, Some(t.puzzle.timeout));
    assert!(svc.published("s").is_empty());
    assert_eq!(svc.pending().len(), 0);
    clock.set(t.puzzle.timeout);
    let feed = svc.published("s");
    assert_eq!(feed.len(), 1);
    assert_eq!(feed[0].activity_digest, t.activity_digest);

    // Resubmitting repeats the outcome without publishing twice.
    let again = svc.submit_solution(&sol).unwrap();
    assert_eq!(again.post_at, v.post_at);
    assert_eq!(svc.all_published().len(), 1);
}

#[test]
fn late_solution_posts_immediately() {
    let (svc, clock) = service();
    enroll(&svc, "u");
    let t = svc.submit_activity(&activity("u", "s", "nice")).unwrap();
    clock.advance(60_000);
    let v = svc.submit_solution(&solve(&t)).unwrap();
    assert_eq!(v.post_at, Some(T0 + 60_000));
}

#[test]
fn fast_solve_raises_hashrate_slow_solve_does_not() {
    let (svc, clock) = service();
    enroll(&svc, "u");
    let t = svc.submit_activity(&activity("u", "s", "a")).unwrap();
    // Four shares at Δ = 3315 in 100 ms is 2·4·3315/0.1 = 265,200 H/s.
    clock.advance(100);
    let v = svc.submit_solution(&solve(&t)).unwrap();
    assert_eq!(v.measured_hashrate, Some(265_200.0));
    assert_eq!(v.updated_hashrate.unwrap().hps(), 265_200.0);
    let dev = svc.user("u").unwrap().devices[0].clone();
    assert_eq!(dev.hashrate.hps(), 265_200.0);
    assert_eq!(dev.last_updated, T0 + 100);

    let t = svc.submit_activity(&activity("u", "s", "b")).unwrap();
    clock.advance(3_600_000);
    let v = svc.submit_solution(&solve(&t)).unwrap();
    assert!(v.measured_hashrate.unwrap() < 265_200.0);
    assert_eq!(svc.user("u").unwrap().devices[0].hashrate.hps(), 265_200.0);
}

#[test]
fn rejected_solution_has_no_side_effects() {
    let (svc, clock) = service();
    enroll(&svc, "u");
    let t = svc.submit_activity(&activity("u", "s", "a")).unwrap();
    let before = svc.snapshot();
    clock.advance(1);

    let mut bad = solve(&t);
    bad.timeout -= 1;
    let v = svc.submit_solution(&bad).unwrap();
    assert_eq!(v.status, VerdictStatus::BadCookie);

    let mut bad = solve(&t);
    bad.shares.pop();
    assert_eq!(svc.submit_solution(&bad).unwrap().status, VerdictStatus::CountMismatch);

    let mut bad = solve(&t);
    bad.shares[1] = bad.shares[0];
    assert_eq!(svc.submit_solution(&bad).unwrap().status, VerdictStatus::BadShares);

    let after = svc.snapshot();
    assert_eq!(serde_json::to_value(&before).unwrap(), serde_json::to_value(&after).unwrap());
}

#[test]
fn simulated_solution_still_checks_cookie() {
    let (svc, clock) = service();
    enroll(&svc, "u");
    let t = svc.submit_activity(&activity("u", "s", "a")).unwrap();
    clock.advance(2_000);
    let mut forged = t.solution(Vec::new());
    forged.difficulty = Difficulty::one();
    assert_eq!(svc.submit_simulated_solution(&forged).unwrap().status, VerdictStatus::BadCookie);
    let v = svc.submit_simulated_solution(&t.solution(Vec::new())).unwrap();
    assert!(v.is_accepted());
}

#[test]
fn clusters_share_one_timeout() {
    let (svc, clock) = service();
    for u in ["a", "b", "c"] {
        enroll(&svc, u);
    }
    svc.submit_activity(&activity("a", "s", "1")).unwrap();
    svc.submit_activity(&activity("b", "s", "2")).unwrap();
    svc.submit_activity(&activity("b", "s", "3")).unwrap();
    let (ta, tb) = (svc.user("a").unwrap().timeout, svc.user("b").unwrap().timeout);
    assert!(ta < tb);
    let c = svc.assign_cluster("k", &["b".into(), "a".into()]).unwrap();
    assert_eq!(c.timeout, tb);
    assert_eq!(c.member_user_ids, vec!["a".to_string(), "b".to_string()]);

    clock.advance(5);
    let t = svc.submit_activity(&activity("a", "s", "4")).unwrap();
    assert_eq!(t.puzzle.timeout, tb + t.penalty_ms);
    assert_eq!(svc.cluster("k").unwrap().timeout, t.puzzle.timeout);
    // Member records keep their own pre-merge timeouts.
    assert_eq!(svc.user("a").unwrap().timeout, ta);

    let tc = svc.user("c").unwrap().timeout;
    let t = svc.submit_activity(&activity("c", "s", "5")).unwrap();
    assert_eq!(t.puzzle.timeout, tc.max(T0 + 5) + t.penalty_ms);

    assert!(matches!(svc.assign_cluster("other", &["a".into()]), Err(ServiceError::Conflict(_))));
    assert!(matches!(svc.assign_cluster("k", &["zed".into()]), Err(ServiceError::UnknownUser(_))));
    let grown = svc.assign_cluster("k", &["c".into()]).unwrap();
    assert_eq!(grown.member_user_ids.len(), 3);
}

#[test]
fn backlog_cap_asks_for_retry() {
    let cfg = ServiceConfig {
        max_backlog_ms: Some(3_000),
        ..Default::default()
    };
    let (svc, clock) = service_with(cfg);
    enroll(&svc, "u");
    svc.submit_activity(&activity("u", "s", "1")).unwrap();
    svc.submit_activity(&activity("u", "s", "2")).unwrap();
    // Timeout is now T0 + 4000, over the cap by 1000 ms.
    let e = svc.submit_activity(&activity("u", "s", "3")).unwrap_err();
    assert!(matches!(e, ServiceError::RetryAfter { retry_after_ms: 1_000 }));
    assert_eq!(svc.stats().history_len, 2);
    clock.advance(1_000);
    svc.submit_activity(&activity("u", "s", "3")).unwrap();
}

#[test]
fn pending_activities_expire() {
    let (svc, clock) = service();
    enroll(&svc, "u");
    let t = svc.submit_activity(&activity("u", "s", "1")).unwrap();
    let slack = 86_400_000 + svc.config().pending_grace_ms;
    clock.set(t.puzzle.timeout + slack);
    assert_eq!(svc.expire_pending().unwrap(), 0);
    clock.advance(1);
    assert_eq!(svc.expire_pending().unwrap(), 1);
    let e = svc.submit_solution(&solve(&t)).unwrap_err();
    assert_eq!(e.code(), "conflict");
}

#[test]
fn concurrent_submissions_accumulate_exactly() {
    let (svc, _) = service();
    for u in 0..4 {
        enroll(&svc, &format!("u{u}"));
    }
    let svc = Arc::new(svc);
    let tickets: Vec<Vec<ActivityTicket>> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..8)
            .map(|t| {
                let svc = svc.clone();
                s.spawn(move || {
                    (0..25)
                        .map(|i| {
                            let u = format!("u{}", t % 4);
                            svc.submit_activity(&activity(&u, &format!("s{}", i % 3), &format!("{t}-{i}")))
                                .unwrap()
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for u in 0..4 {
        let id = format!("u{u}");
        let mut mine: Vec<&ActivityTicket> = tickets.iter().flatten().filter(|t| t.user_id == id).collect();
        let sum: u64 = mine.iter().map(|t| t.penalty_ms).sum();
        assert_eq!(svc.user(&id).unwrap().timeout, T0 + sum);
        mine.sort_by_key(|t| t.puzzle.timeout);
        let mut prev = T0;
        for t in mine {
            assert_eq!(t.puzzle.timeout, prev + t.penalty_ms);
            prev = t.puzzle.timeout;
        }
    }
    assert_eq!(svc.stats().history_len, 200);
}

fn populate(svc: &Service, clock: &ManualClock) {
    for u in ["a", "b", "c"] {
        enroll(svc, u);
    }
    for (i, u) in ["a", "b", "c", "a", "b"].iter().enumerate() {
        clock.advance(1_000);
        let t = svc.submit_activity(&activity(u, &format!("s{}", i % 2), &format!("x{i}"))).unwrap();
        if i % 2 == 0 {
            clock.advance(100);
            svc.submit_solution(&solve(&t)).unwrap();
        }
    }
    svc.assign_cluster("k", &["a".into(), "b".into()]).unwrap();
    svc.submit_activity(&activity("b", "s0", "after")).unwrap();
}

#[test]
fn state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig {
        data_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let expected = {
        let (svc, clock) = service_with(cfg.clone());
        populate(&svc, &clock);
        serde_json::to_value(svc.snapshot()).unwrap()
    };
    let (svc, _) = service_with(cfg);
    assert_eq!(serde_json::to_value(svc.snapshot()).unwrap(), expected);
    assert!(svc.stats().journal_seq > 10);
}

#[test]
fn state_survives_restart_across_compactions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig {
        data_dir: Some(dir.path().to_path_buf()),
        snapshot_every: 4,
        ..Default::default()
    };
    let expected = {
        let (svc, clock) = service_with(cfg.clone());
        populate(&svc, &clock);
        serde_json::to_value(svc.snapshot()).unwrap()
    };
    assert!(dir.path().join(store::SNAPSHOT_FILE).exists());
    let journal = std::fs::read_to_string(dir.path().join(store::JOURNAL_FILE)).unwrap();
    assert!(journal.lines().count() < 4);
    let (svc, _) = service_with(cfg);
    assert_eq!(serde_json::to_value(svc.snapshot()).unwrap(), expected);
}

#[test]
fn model_dimension_is_checked() {
    let (svc, _) = service();
    let ex = vec![
        crate::classifier::LabeledExample {
            features: vec![0.0, 1.0],
            label: crate::classifier::Label::Fraud,
            worker_id: None,
        },
        crate::classifier::LabeledExample {
            features: vec![1.0, 0.0],
            label: crate::classifier::Label::Honest,
            worker_id: None,
        },
    ];
    let m = crate::classifier::train(&ex, 1).unwrap();
    assert_eq!(svc.set_model(Some(m)).unwrap_err().code(), "config");
    assert!(!svc.has_model());
}

fn call(svc: &Service, line: &str) -> Value {
    serde_json::from_str(&handle_line(svc, line)).unwrap()
}

#[test]
fn json_protocol_round_trip() {
    let (svc, clock) = service();
    let r = call(&svc, r#"{"op":"register_user","user_id":"alice"}"#);
    assert_eq!(r["ok"], true);
    let r = call(&svc, r#"{"op":"register_user","user_id":"alice"}"#);
    assert_eq!(r["ok"], false);
    assert_eq!(r["error"]["code"], "conflict");
    let r = call(
        &svc,
        r#"{"op":"register_device","user_id":"alice","device_id":"p","model_name":"Nexus 4"}"#,
    );
    assert_eq!(r["result"]["hashrate"], 6530.0);
    let r = call(
        &svc,
        r#"{"op":"submit_activity","user_id":"alice","device_id":"p","subject_id":"app","payload":"5 stars"}"#,
    );
    assert_eq!(r["ok"], true, "{r}");
    let ticket: ActivityTicket = serde_json::from_value(r["result"].clone()).unwrap();
    assert_eq!(r["result"]["difficulty"], "1632");
    assert_eq!(r["result"]["cookie"].as_str().unwrap().len(), 64);

    let mut sol = serde_json::to_value(solve(&ticket)).unwrap();
    sol["op"] = "submit_solution".into();
    clock.advance(2_000);
    let r = call(&svc, &sol.to_string());
    assert_eq!(r["result"]["status"], "accepted", "{r}");

    let r = call(&svc, r#"{"op":"published","subject_id":"app"}"#);
    assert_eq!(r["result"].as_array().unwrap().len(), 1);
    let r = call(&svc, r#"{"op":"stats"}"#);
    assert_eq!(r["result"]["users"], 1);
    assert_eq!(r["result"]["published"], 1);
}

#[test]
fn json_protocol_errors() {
    let (svc, _) = service();
    for bad in [
        "not json",
        r#"{"op":"launch_rockets"}"#,
        r#"{"op":"register_user"}"#,
        r#"{"op":"register_user","user_id":"x","extra":1}"#,
    ] {
        let r = call(&svc, bad);
        assert_eq!(r["error"]["code"], "malformed", "{bad}");
    }
    call(&svc, r#"{"op":"register_user","user_id":"u"}"#);
    call(&svc, r#"{"op":"register_device","user_id":"u","device_id":"d"}"#);
    let r = call(
        &svc,
        r#"{"op":"submit_activity","user_id":"u","device_id":"d","subject_id":"s","payload":"a","payload_hex":"00"}"#,
    );
    assert_eq!(r["error"]["code"], "malformed");
    let r = call(
        &svc,
        r#"{"op":"submit_activity","user_id":"u","device_id":"d","subject_id":"s","payload_hex":"zz"}"#,
    );
    assert_eq!(r["error"]["code"], "malformed");
}

#[test]
fn retry_after_carries_delay_on_the_wire() {
    let cfg = ServiceConfig {
        max_backlog_ms: Some(0),
        ..Default::default()
    };
    let (svc, _) = service_with(cfg);
    enroll(&svc, "u");
    let line = r#"{"op":"submit_activity","user_id":"u","device_id":"d","subject_id":"s","payload":"a"}"#;
    assert_eq!(call(&svc, line)["ok"], true);
    let r = call(&svc, line);
    assert_eq!(r["error"]["code"], "retry_after");
    assert_eq!(r["error"]["retry_after_ms"], 2_000);
}

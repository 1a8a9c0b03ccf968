//! Leave-one-worker-out replay through a live service.
//!
//! For each fraud worker, a k-NN model is trained on every other worker's
//! activities plus a sample of honest ones. A fresh service on a manual
//! clock then replays the whole log in time order. Devices "solve" after a
//! delay drawn from the brute-force search's distribution (a sum of `q`
//! exponentials, each with mean `2Δ/η`), or by real hashing when the
//! difficulty is small enough. Only the held-out worker's and the held-out
//! honest activities are recorded.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::report::{build_report, FoldOutcome, SimReport};
use super::{account_creation_ms, extract_log_features, LoadedLog, SimConfig};
use crate::classifier::{train, Label, LabeledExample};
use crate::cookie::ServiceKey;
use crate::error::{ServiceError, SimError};
use crate::graph::FeatureVector;
use crate::hashrate::{DeviceSpecs, ProfileTable};
use crate::puzzle::{solve_puzzle_with, Share, SolveOptions};
use crate::service::{ActivityRequest, ActivityTicket, ManualClock, Service, ServiceConfig};
use crate::Exec;

pub const DEVICE_ID: &str = "d0";
const DAY_MS: u64 = 86_400_000;

/// One recorded activity from a held-out set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    /// The held-out worker of the fold that produced this record.
    pub fold: String,
    pub user_id: String,
    pub worker_id: Option<String>,
    pub label: Label,
    pub subject_id: String,
    /// Position of this activity among its worker's activities on the
    /// subject, from 1.
    pub rank: Option<u32>,
    pub arrived_at: u64,
    pub issued_at: u64,
    pub penalty_ms: u64,
    pub fraud_score: f64,
    pub difficulty: f64,
    pub solve_ms: u64,
    pub post_at: Option<u64>,
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Sum of `q` exponential draws, each with mean `2Δ/η` seconds, in ms.
pub fn sample_solve_ms(rng: &mut impl Rng, difficulty: f64, q: u32, hashrate: f64) -> u64 {
    let scale = 2.0 * difficulty / hashrate;
    let secs = Gamma::new(q as f64, scale).expect("positive shape and scale").sample(rng);
    ((secs * 1000.0).ceil() as u64).max(1)
}

/// Shared, read-only inputs to every fold.
struct Prepared<'a> {
    log: &'a LoadedLog,
    features: Vec<FeatureVector>,
    created: HashMap<String, u64>,
    ranks: Vec<Option<u32>>,
    workers: BTreeMap<String, Vec<String>>,
    honest: Vec<usize>,
    users: Vec<(String, String)>,
    profiles: ProfileTable,
}

/// Leave-one-worker-out replay of a labelled log.
pub fn replay(log: &LoadedLog, cfg: &SimConfig) -> Result<SimReport, SimError> {
    let rows = &log.rows;
    if rows.is_empty() {
        return Err(SimError::EmptyLog);
    }
    let mut workers: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut ranks = Vec::with_capacity(rows.len());
    let mut per_subject: HashMap<(&str, &str), u32> = HashMap::new();
    let mut users = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for r in rows {
        if seen.insert(r.user_id.as_str()) {
            users.push((r.user_id.clone(), r.device_model.clone()));
        }
        match (&r.label, &r.worker_id) {
            (Some(Label::Fraud), Some(w)) => {
                let accts = workers.entry(w.clone()).or_default();
                if !accts.contains(&r.user_id) {
                    accts.push(r.user_id.clone());
                }
                let n = per_subject.entry((w, &r.subject_id)).or_insert(0);
                *n += 1;
                ranks.push(Some(*n));
            }
            _ => ranks.push(None),
        }
    }
    if workers.is_empty() {
        return Err(SimError::NoWorkers);
    }
    let prep = Prepared {
        log,
        features: extract_log_features(rows, &cfg.feature_config()),
        created: account_creation_ms(rows),
        ranks,
        honest: (0..rows.len()).filter(|&i| rows[i].label == Some(Label::Honest)).collect(),
        users,
        profiles: ProfileTable::default(),
        workers,
    };
    let folds: Vec<(usize, String)> = prep.workers.keys().cloned().enumerate().collect();
    let outcomes = cfg
        .exec
        .map(folds, |(i, w)| run_fold(&prep, cfg, i, &w))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(build_report(rows, log.skipped, cfg, outcomes))
}

enum Ev {
    Arrive(usize),
    Solve(usize),
}

type Queue = BinaryHeap<Reverse<(u64, usize)>>;

/// Events at equal times run in scheduling order.
fn schedule(events: &mut Vec<Ev>, queue: &mut Queue, at: u64, ev: Ev) {
    queue.push(Reverse((at, events.len())));
    events.push(ev);
}

struct Issued {
    row: usize,
    ticket: ActivityTicket,
    solve_ms: u64,
    shares: Option<Vec<Share>>,
}

fn run_fold(prep: &Prepared<'_>, cfg: &SimConfig, fold: usize, held_out: &str) -> Result<FoldOutcome, SimError> {
    let rows = &prep.log.rows;
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(cfg.seed, fold));

    let mut honest = prep.honest.clone();
    honest.shuffle(&mut rng);
    let n_train = if honest.len() > cfg.honest_train {
        cfg.honest_train
    } else {
        honest.len() / 2
    };
    let mut is_test = vec![false; rows.len()];
    for &i in &honest[n_train..] {
        is_test[i] = true;
    }
    let mut examples: Vec<LabeledExample> = honest[..n_train]
        .iter()
        .map(|&i| LabeledExample::new(&prep.features[i], Label::Honest, None))
        .collect();
    for (i, r) in rows.iter().enumerate() {
        if r.label == Some(Label::Fraud) {
            if r.worker_id.as_deref() == Some(held_out) {
                is_test[i] = true;
            } else {
                examples.push(LabeledExample::new(&prep.features[i], Label::Fraud, r.worker_id.clone()));
            }
        }
    }
    let model = train(&examples, cfg.k)?;

    let svc_cfg = ServiceConfig {
        shares_required: cfg.shares_required,
        penalty: cfg.penalty,
        theta: cfg.theta,
        drop_temporal: cfg.drop_temporal,
        min_hashrate: cfg.min_hashrate,
        max_backlog_ms: cfg.max_backlog_ms,
        ..Default::default()
    };
    let start = rows[0].timestamp * 1000;
    let clock = Arc::new(ManualClock::new(start.saturating_sub(1)));
    let svc = Service::with_key(svc_cfg, ServiceKey::new(rng.random()), clock.clone())?;
    svc.set_model(Some(model))?;

    let mut true_rate: HashMap<&str, f64> = HashMap::new();
    for (u, model_name) in &prep.users {
        svc.register_user(u, Some(prep.created[u]))?;
        let cpu_class = prep
            .profiles
            .by_model(model_name)
            .map_or_else(|| "smartphone".to_string(), |p| p.cpu_class.clone());
        let specs = DeviceSpecs {
            device_id: DEVICE_ID.into(),
            model_name: model_name.clone(),
            cpu_class,
        };
        let dev = svc.register_device(u, &specs)?;
        true_rate.insert(u, dev.hashrate.hps());
    }
    if cfg.cluster_workers {
        for (w, accts) in &prep.workers {
            svc.assign_cluster(&format!("worker:{w}"), accts)?;
        }
    }

    let owner_of = |u: &str| -> String {
        svc.user(u)
            .and_then(|r| r.fraudster_cluster_id)
            .unwrap_or_else(|| u.to_string())
    };
    let mut last_timeout: HashMap<String, u64> = HashMap::new();
    for (u, _) in &prep.users {
        let rec = svc.user(u).expect("registered");
        let t = match &rec.fraudster_cluster_id {
            Some(c) => svc.cluster(c).expect("assigned").timeout,
            None => rec.timeout,
        };
        last_timeout.insert(owner_of(u), t);
    }

    let mut out = FoldOutcome {
        fold: held_out.to_string(),
        ..Default::default()
    };
    let mut daily_accepted: HashMap<(String, u64), u64> = HashMap::new();
    let mut issued: Vec<Issued> = Vec::new();
    let mut events: Vec<Ev> = Vec::new();
    let mut queue = Queue::new();
    for (i, r) in rows.iter().enumerate() {
        schedule(&mut events, &mut queue, r.timestamp * 1000, Ev::Arrive(i));
    }

    while let Some(Reverse((at, id))) = queue.pop() {
        clock.set(at);
        match events[id] {
            Ev::Arrive(i) => {
                let r = &rows[i];
                let req = ActivityRequest {
                    user_id: r.user_id.clone(),
                    device_id: DEVICE_ID.into(),
                    subject_id: r.subject_id.clone(),
                    category: Some(r.category.clone()),
                    payload: format!("{i}:{}:{}", r.user_id, r.subject_id).into_bytes(),
                };
                let ticket = match svc.submit_activity(&req) {
                    Ok(t) => t,
                    Err(ServiceError::RetryAfter { retry_after_ms }) => {
                        out.retries += 1;
                        schedule(&mut events, &mut queue, at + retry_after_ms.max(1), Ev::Arrive(i));
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                let owner = owner_of(&r.user_id);
                let last = last_timeout.get(&owner).copied().unwrap_or(0);
                if ticket.puzzle.timeout != last.max(ticket.issued_at) + ticket.penalty_ms {
                    out.accumulation_violations += 1;
                }
                last_timeout.insert(owner, ticket.puzzle.timeout);
                out.tickets += 1;

                let eta = true_rate[r.user_id.as_str()];
                let d = &ticket.puzzle.difficulty;
                let q = ticket.puzzle.shares_required;
                let real = cfg
                    .real_solve_max_difficulty
                    .is_some_and(|cap| d.to_u64().is_some_and(|x| x <= cap));
                let (solve_ms, shares) = if real {
                    let opts = SolveOptions {
                        exec: Exec::Sequential,
                        seed: Some(rng.random()),
                        deadline: None,
                    };
                    let sol = solve_puzzle_with(&ticket.puzzle.cookie.0, d, q, opts).expect("no deadline");
                    out.real_solves.push((2.0 * q as f64 * d.to_f64(), sol.attempts));
                    let ms = ((sol.attempts as f64 / eta * 1000.0).ceil() as u64).max(1);
                    (ms, Some(sol.shares))
                } else {
                    (sample_solve_ms(&mut rng, d.to_f64(), q, eta), None)
                };
                let done = ticket.issued_at + solve_ms;
                issued.push(Issued {
                    row: i,
                    ticket,
                    solve_ms,
                    shares,
                });
                schedule(&mut events, &mut queue, done, Ev::Solve(issued.len() - 1));
            }
            Ev::Solve(k) => {
                let it = &issued[k];
                let verdict = match &it.shares {
                    Some(s) => svc.submit_solution(&it.ticket.solution(s.clone()))?,
                    None => svc.submit_simulated_solution(&it.ticket.solution(Vec::new()))?,
                };
                let r = &rows[it.row];
                if let Some(post) = verdict.post_at {
                    *daily_accepted.entry((owner_of(&r.user_id), post / DAY_MS)).or_insert(0) += 1;
                } else {
                    out.rejected += 1;
                }
                if is_test[it.row] {
                    out.records.push(SimRecord {
                        fold: held_out.to_string(),
                        user_id: r.user_id.clone(),
                        worker_id: r.worker_id.clone(),
                        label: r.label.expect("test rows are labelled"),
                        subject_id: r.subject_id.clone(),
                        rank: prep.ranks[it.row],
                        arrived_at: r.timestamp * 1000,
                        issued_at: it.ticket.issued_at,
                        penalty_ms: it.ticket.penalty_ms,
                        fraud_score: it.ticket.fraud_score,
                        difficulty: it.ticket.puzzle.difficulty.to_f64(),
                        solve_ms: it.solve_ms,
                        post_at: verdict.post_at,
                    });
                }
            }
        }
    }
    out.max_daily_accepted = daily_accepted.values().copied().max().unwrap_or(0);
    out.records.sort_by(|a, b| (a.arrived_at, &a.user_id, &a.subject_id).cmp(&(b.arrived_at, &b.user_id, &b.subject_id)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::generate_synthetic;

    fn small_log(seed: u64) -> LoadedLog {
        LoadedLog {
            rows: generate_synthetic(3, 8, 20, 120, seed),
            skipped: 0,
        }
    }

    #[test]
    fn solve_time_sampler_has_the_right_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let mean = (0..n).map(|_| sample_solve_ms(&mut rng, 5_000.0, 4, 1_000.0) as f64).sum::<f64>() / n as f64;
        // 4 · 2 · 5000 / 1000 = 40 s.
        assert!((mean - 40_000.0).abs() < 0.02 * 40_000.0, "{mean}");
    }

    #[test]
    fn replay_is_deterministic_across_exec_modes() {
        let log = small_log(2);
        let seq = SimConfig {
            exec: Exec::Sequential,
            honest_train: 40,
            ..Default::default()
        };
        let par = SimConfig {
            exec: Exec::Parallel,
            ..seq.clone()
        };
        let a = replay(&log, &seq).unwrap();
        let b = replay(&log, &seq).unwrap();
        let c = replay(&log, &par).unwrap();
        // Reports can hold NaN statistics, so compare their encodings.
        let enc = |r: &SimReport| serde_json::to_string(r).unwrap();
        assert_eq!(enc(&a), enc(&b));
        assert_eq!(a.records, c.records);
        assert_eq!(a.folds, 3);
    }

    #[test]
    fn every_held_out_row_is_recorded_once_per_fold() {
        let log = small_log(4);
        let cfg = SimConfig {
            honest_train: 40,
            ..Default::default()
        };
        let rep = replay(&log, &cfg).unwrap();
        let fraud_rows = log.rows.iter().filter(|r| r.label == Some(Label::Fraud)).count();
        let fraud_recs = rep.records.iter().filter(|r| r.label == Label::Fraud).count();
        assert_eq!(fraud_recs, fraud_rows);
        let honest_recs = rep.records.iter().filter(|r| r.label == Label::Honest).count();
        assert_eq!(honest_recs, 3 * (120 - 40));
        for r in &rep.records {
            if let Some(w) = &r.worker_id {
                assert_eq!(w, &r.fold);
            }
            assert!(r.post_at.unwrap() >= r.issued_at + r.penalty_ms);
            assert!(r.penalty_ms >= 2_000);
        }
        assert_eq!(rep.serialization.accumulation_violations, 0);
    }

    #[test]
    fn logs_without_workers_or_rows_are_refused() {
        let empty = LoadedLog::default();
        assert!(matches!(replay(&empty, &SimConfig::default()), Err(SimError::EmptyLog)));
        let honest_only = LoadedLog {
            rows: generate_synthetic(0, 0, 5, 20, 1),
            skipped: 0,
        };
        assert!(matches!(replay(&honest_only, &SimConfig::default()), Err(SimError::NoWorkers)));
    }

    #[test]
    fn real_solves_match_expected_work() {
        let log = LoadedLog {
            rows: generate_synthetic(2, 4, 8, 60, 7),
            skipped: 0,
        };
        let cfg = SimConfig {
            honest_train: 20,
            real_solve_max_difficulty: Some(100_000),
            ..Default::default()
        };
        let rep = replay(&log, &cfg).unwrap();
        let rs = &rep.real_solves;
        assert!(rs.count >= 10, "{rs:?}");
        assert!((rs.mean_attempts / rs.mean_expected - 1.0).abs() < 0.4, "{rs:?}");
        assert!(rep.records.iter().all(|r| r.post_at.is_some()));
    }
}

//! Planted-community activity logs.
//!
//! Half of the subjects are promoted, and only those are fraud targets.
//! Honest accounts are old and act on a few subjects picked independently,
//! mostly among the unpromoted ones. Each fraud worker controls a set of
//! accounts and runs a campaign over a fixed list of target subjects: on
//! each target's burst day most of its accounts post within a few hours of
//! each other, so the accounts build up a long shared history. Most of a worker's accounts are created in a batch
//! shortly before the campaign; the rest are bought aged accounts.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ActivityLogRow;
use crate::classifier::Label;

/// 2024-01-01T00:00:00Z.
pub const START: u64 = 1_704_067_200;
pub const SPAN_DAYS: u64 = 30;
const DAY: u64 = 86_400;
const CATEGORIES: [&str; 5] = ["games", "tools", "social", "music", "travel"];
const HONEST_DEVICES: [&str; 3] = ["Nexus 5", "LG Leon LTE", "Nexus 4"];
const FRAUD_DEVICE: &str = "Nexus 4";
const TARGETS_PER_WORKER: usize = 12;
const CAMPAIGN_DAYS: u64 = 10;
const PARTICIPATION: f64 = 0.75;
const AGED_ACCOUNTS: f64 = 0.2;
/// Share of honest activity that lands on promoted subjects.
const HONEST_ON_PROMOTED: f64 = 0.2;

pub fn subject_id(j: usize) -> String {
    format!("s{j:03}")
}

fn category(j: usize) -> &'static str {
    CATEGORIES[j % CATEGORIES.len()]
}

/// A log of `n_workers × accounts_per_worker` fraud accounts and `n_honest`
/// honest activities over `n_subjects` subjects, sorted by timestamp.
/// Identical for identical arguments.
pub fn generate_synthetic(
    n_workers: usize,
    accounts_per_worker: usize,
    n_subjects: usize,
    n_honest: usize,
    seed: u64,
) -> Vec<ActivityLogRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_subjects = n_subjects.max(1);
    let mut rows = Vec::new();

    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(&mut rng);
    let promoted = &order[..n_subjects.div_ceil(2)];
    let n_benign = n_subjects - promoted.len();
    let mut weight = vec![HONEST_ON_PROMOTED / promoted.len() as f64; n_subjects];
    for &j in &order[promoted.len()..] {
        weight[j] = (1.0 - HONEST_ON_PROMOTED) / n_benign as f64;
    }

    let mut left = n_honest;
    let mut h = 0;
    while left > 0 {
        let n = rng.random_range(1..=4usize).min(left).min(n_subjects);
        left -= n;
        let user = format!("h{h:04}");
        h += 1;
        let created = START - rng.random_range(60..=2000) * DAY - rng.random_range(0..DAY);
        let device = *HONEST_DEVICES.choose(&mut rng).expect("non-empty");
        let subjects = rand::seq::index::sample_weighted(&mut rng, n_subjects, |j| weight[j], n)
            .expect("positive weights");
        for j in subjects {
            rows.push(ActivityLogRow {
                timestamp: START + rng.random_range(0..SPAN_DAYS * DAY),
                user_id: user.clone(),
                device_model: device.to_string(),
                subject_id: subject_id(j),
                category: category(j).to_string(),
                label: Some(Label::Honest),
                worker_id: None,
                account_created: Some(created),
            });
        }
    }

    let targets_per_worker = TARGETS_PER_WORKER.min(promoted.len());
    for w in 0..n_workers {
        let worker = format!("w{w}");
        let campaign = START + rng.random_range(0..=SPAN_DAYS.saturating_sub(CAMPAIGN_DAYS)) * DAY;
        let targets: Vec<usize> = promoted.choose_multiple(&mut rng, targets_per_worker).copied().collect();
        let bursts: Vec<u64> = targets
            .iter()
            .map(|_| campaign + rng.random_range(0..CAMPAIGN_DAYS) * DAY + rng.random_range(0..12 * 3600))
            .collect();
        for a in 0..accounts_per_worker {
            let user = format!("{worker}-a{a:02}");
            let created = if rng.random_bool(AGED_ACCOUNTS) {
                START - rng.random_range(200..=1500) * DAY
            } else {
                campaign - rng.random_range(0..20 * DAY)
            };
            let mut any = false;
            for (t, &j) in targets.iter().enumerate() {
                let last = t + 1 == targets.len();
                if !rng.random_bool(PARTICIPATION) && !(last && !any) {
                    continue;
                }
                any = true;
                rows.push(ActivityLogRow {
                    timestamp: bursts[t] + rng.random_range(0..6 * 3600),
                    user_id: user.clone(),
                    device_model: FRAUD_DEVICE.to_string(),
                    subject_id: subject_id(j),
                    category: category(j).to_string(),
                    label: Some(Label::Fraud),
                    worker_id: Some(worker.clone()),
                    account_created: Some(created),
                });
            }
        }
    }

    rows.sort_by(|a, b| {
        (a.timestamp, &a.user_id, &a.subject_id).cmp(&(b.timestamp, &b.user_id, &b.subject_id))
    });
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    #[test]
    fn deterministic_for_a_seed() {
        let a = generate_synthetic(3, 5, 20, 50, 9);
        assert_eq!(a, generate_synthetic(3, 5, 20, 50, 9));
        assert_ne!(a, generate_synthetic(3, 5, 20, 50, 10));
        assert!(a.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }

    #[test]
    fn counts_and_labels() {
        let rows = generate_synthetic(2, 4, 10, 37, 1);
        let honest = rows.iter().filter(|r| r.label == Some(Label::Honest)).count();
        assert_eq!(honest, 37);
        let fraud_users: HashSet<_> = rows.iter().filter(|r| r.worker_id.is_some()).map(|r| &r.user_id).collect();
        assert_eq!(fraud_users.len(), 8);
        for r in &rows {
            assert_eq!(r.label == Some(Label::Fraud), r.worker_id.is_some());
            assert!(r.account_created.unwrap() <= r.timestamp);
        }

        let none_honest = generate_synthetic(2, 4, 10, 0, 1);
        assert!(none_honest.iter().all(|r| r.label == Some(Label::Fraud)));
        assert!(generate_synthetic(0, 4, 10, 5, 1).iter().all(|r| r.label == Some(Label::Honest)));
    }

    /// Mean number of common subjects over distinct account pairs.
    fn mean_common(rows: &[ActivityLogRow], keep: impl Fn(&ActivityLogRow) -> bool) -> f64 {
        let mut subj: HashMap<&str, HashSet<&str>> = HashMap::new();
        for r in rows.iter().filter(|r| keep(r)) {
            subj.entry(&r.user_id).or_default().insert(&r.subject_id);
        }
        let users: Vec<_> = subj.keys().copied().collect();
        let (mut total, mut pairs) = (0usize, 0usize);
        for i in 0..users.len() {
            for j in (i + 1)..users.len() {
                total += subj[users[i]].intersection(&subj[users[j]]).count();
                pairs += 1;
            }
        }
        total as f64 / pairs as f64
    }

    #[test]
    fn worker_accounts_share_more_history_than_honest_ones() {
        let rows = generate_synthetic(5, 20, 50, 500, 3);
        let fraud = mean_common(&rows, |r| r.worker_id.as_deref() == Some("w0"));
        let honest = mean_common(&rows, |r| r.worker_id.is_none());
        assert!(fraud > 5.0 * honest, "fraud {fraud} honest {honest}");
        assert!(fraud > 3.0);
    }
}

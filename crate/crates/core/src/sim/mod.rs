//! Log replay at desk scale.
//!
//! Activity logs are header-row CSV with columns
//! `timestamp,user_id,device_model,subject_id,category,label,worker_id,account_created`.
//! Timestamps are seconds since the Unix epoch. `label` is `fraud`,
//! `honest` or empty; `worker_id` names the fraudster controlling a fraud
//! account and is empty for honest rows. `account_created` is optional;
//! when empty the account's first appearance in the log is used.

pub mod adversary;
pub mod replay;
pub mod report;
pub mod synth;

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::classifier::{Label, LabeledExample, DEFAULT_K, DEFAULT_THRESHOLD};
use crate::error::SimError;
use crate::graph::{ActivityContext, CoActivityIndex, FeatureConfig, FeatureVector, DEFAULT_THETA};
use crate::hashrate::DEFAULT_MIN_HASHRATE;
use crate::penalty::PenaltyParams;
use crate::puzzle::DEFAULT_SHARES;
use crate::Exec;

pub use adversary::{simulate_deception, DeceptionBranch, DeceptionReport};
pub use replay::{replay, SimRecord};
pub use report::{payout_compare, payout_from_penalty, Payout, SimReport};
pub use synth::generate_synthetic;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityLogRow {
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub user_id: String,
    pub device_model: String,
    pub subject_id: String,
    pub category: String,
    pub label: Option<Label>,
    pub worker_id: Option<String>,
    /// Seconds since the Unix epoch.
    #[serde(default)]
    pub account_created: Option<u64>,
}

/// Rows read from a log, plus how many were unreadable.
#[derive(Clone, Debug, Default)]
pub struct LoadedLog {
    pub rows: Vec<ActivityLogRow>,
    pub skipped: usize,
}

/// Read a log, skipping malformed rows. The result is sorted by timestamp
/// (stably, so equal timestamps keep file order).
pub fn read_log<R: Read>(reader: R) -> Result<LoadedLog, SimError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let mut out = LoadedLog::default();
    for (i, rec) in rdr.deserialize::<ActivityLogRow>().enumerate() {
        match rec {
            Ok(r) if !r.user_id.is_empty() && !r.subject_id.is_empty() => out.rows.push(r),
            Ok(_) => {
                log::warn!("log row {}: empty user or subject", i + 2);
                out.skipped += 1;
            }
            Err(e) => {
                log::warn!("log row {}: {e}", i + 2);
                out.skipped += 1;
            }
        }
    }
    out.rows.sort_by_key(|r| r.timestamp);
    Ok(out)
}

pub fn write_log<W: Write>(writer: W, rows: &[ActivityLogRow]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Creation time (ms) of every account: the `account_created` column when
/// present, else the account's first row.
pub fn account_creation_ms(rows: &[ActivityLogRow]) -> HashMap<String, u64> {
    let mut out: HashMap<String, u64> = HashMap::new();
    for r in rows {
        let t = r.account_created.unwrap_or(r.timestamp).saturating_mul(1000);
        out.entry(r.user_id.clone())
            .and_modify(|c| *c = (*c).min(t))
            .or_insert(t);
    }
    out
}

/// Features of every row, extracted in log order as the service would see
/// them.
pub fn extract_log_features(rows: &[ActivityLogRow], cfg: &FeatureConfig) -> Vec<FeatureVector> {
    let created = account_creation_ms(rows);
    let mut index = CoActivityIndex::default();
    rows.iter()
        .map(|r| {
            let ctx = ActivityContext {
                user: &r.user_id,
                category: &r.category,
                at: r.timestamp * 1000,
                account_created: created[&r.user_id],
            };
            index.observe(&r.subject_id, ctx, cfg)
        })
        .collect()
}

/// Labelled rows as classifier examples.
pub fn labeled_examples(rows: &[ActivityLogRow], cfg: &FeatureConfig) -> Vec<LabeledExample> {
    extract_log_features(rows, cfg)
        .iter()
        .zip(rows)
        .filter_map(|(f, r)| r.label.map(|l| LabeledExample::new(f, l, r.worker_id.clone())))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub penalty: PenaltyParams,
    pub shares_required: u32,
    pub k: usize,
    pub theta: f64,
    /// Fraud scores at or above this count as fraud in the metrics.
    pub threshold: f64,
    /// Honest rows sampled into each fold's training set.
    pub honest_train: usize,
    pub seed: u64,
    /// Zero timestamp-derived features.
    pub drop_temporal: bool,
    /// Serialize each worker's accounts on one shared timeout.
    pub cluster_workers: bool,
    /// Hash for real when the issued difficulty is at most this.
    pub real_solve_max_difficulty: Option<u64>,
    pub min_hashrate: f64,
    pub max_backlog_ms: Option<u64>,
    pub exec: Exec,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            penalty: PenaltyParams::default(),
            shares_required: DEFAULT_SHARES,
            k: DEFAULT_K,
            theta: DEFAULT_THETA,
            threshold: DEFAULT_THRESHOLD,
            honest_train: 200,
            seed: 0,
            drop_temporal: false,
            cluster_workers: true,
            real_solve_max_difficulty: None,
            min_hashrate: DEFAULT_MIN_HASHRATE,
            max_backlog_ms: None,
            exec: Exec::default(),
        }
    }
}

impl SimConfig {
    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            theta: self.theta,
            drop_temporal: self.drop_temporal,
        }
    }
}

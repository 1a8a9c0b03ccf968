//! The provider: registration, activity submission and solution checking
//! over durable per-user state.
//!
//! Issued puzzles are never stored. What is kept is the user and cluster
//! records, subject graphs and histories, and a digest record for each
//! activity that is waiting for its solution.
//!
//! Per-user and per-cluster timeouts and per-subject graphs each sit behind
//! their own lock. Cookie and share checks take no lock at all.

pub mod api;
pub mod clock;
pub mod config;
pub mod store;

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::BufReader;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::classifier::KnnModel;
use crate::cookie::{
    hex32, ActivityDescriptor, Puzzle, PuzzleCookie, Puzzler, ServiceKey, Verdict, VerdictStatus, MAX_ID_BYTES,
};
use crate::error::{CookieError, ServiceError};
use crate::graph::{
    extract_features, update_graph, ActivityContext, ActivityHistory, CoActivityGraph, FeatureVector,
    HistoryEntry,
};
use crate::hashrate::{correct_hashrate, DeviceRecord, DeviceSpecs, ProfileTable};
use crate::penalty::{penalty_millis, to_millis};
use crate::puzzle::{double_hash, Difficulty, Share};

pub use clock::{Clock, ManualClock, SystemClock};
pub use config::ServiceConfig;
use store::{Event, Journal, Snapshot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    /// Milliseconds since the Unix epoch.
    pub creation_time: u64,
    pub devices: Vec<DeviceRecord>,
    pub timeout: u64,
    pub fraudster_cluster_id: Option<String>,
}

impl UserRecord {
    pub fn device(&self, device_id: &str) -> Option<&DeviceRecord> {
        self.devices.iter().find(|d| d.device_id == device_id)
    }

    fn device_mut(&mut self, device_id: &str) -> Option<&mut DeviceRecord> {
        self.devices.iter_mut().find(|d| d.device_id == device_id)
    }
}

/// Accounts believed to share one controller, serialized on one timeout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FraudsterCluster {
    pub cluster_id: String,
    pub member_user_ids: Vec<String>,
    pub timeout: u64,
}

type PendingKey = (String, String, String, [u8; 32]);

/// An activity held back until its puzzle is solved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingActivity {
    pub user_id: String,
    pub device_id: String,
    pub subject_id: String,
    #[serde(with = "hex32")]
    pub activity_digest: [u8; 32],
    pub category: String,
    pub issued_at: u64,
    pub timeout: u64,
    pub difficulty: Difficulty,
    pub penalty_ms: u64,
    pub fraud_score: f64,
}

impl PendingActivity {
    fn key(&self) -> PendingKey {
        (
            self.user_id.clone(),
            self.device_id.clone(),
            self.subject_id.clone(),
            self.activity_digest,
        )
    }
}

/// An activity cleared for publication at `post_at`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishedActivity {
    pub user_id: String,
    pub device_id: String,
    pub subject_id: String,
    #[serde(with = "hex32")]
    pub activity_digest: [u8; 32],
    pub category: String,
    pub issued_at: u64,
    pub post_at: u64,
    pub penalty_ms: u64,
    pub fraud_score: f64,
}

impl PublishedActivity {
    fn key(&self) -> PendingKey {
        (
            self.user_id.clone(),
            self.device_id.clone(),
            self.subject_id.clone(),
            self.activity_digest,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityRequest {
    pub user_id: String,
    pub device_id: String,
    pub subject_id: String,
    #[serde(default)]
    pub category: Option<String>,
    pub payload: Vec<u8>,
}

/// What the device gets back for an activity: the puzzle plus everything it
/// must echo when submitting the solution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityTicket {
    pub user_id: String,
    pub device_id: String,
    pub subject_id: String,
    #[serde(with = "hex32")]
    pub activity_digest: [u8; 32],
    pub issued_at: u64,
    #[serde(flatten)]
    pub puzzle: Puzzle,
    pub penalty_ms: u64,
    pub fraud_score: f64,
    pub features: FeatureVector,
}

impl ActivityTicket {
    pub fn solution(&self, shares: Vec<Share>) -> SolutionRequest {
        SolutionRequest {
            user_id: self.user_id.clone(),
            device_id: self.device_id.clone(),
            subject_id: self.subject_id.clone(),
            activity_digest: self.activity_digest,
            timeout: self.puzzle.timeout,
            difficulty: self.puzzle.difficulty.clone(),
            cookie: self.puzzle.cookie,
            shares,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionRequest {
    pub user_id: String,
    pub device_id: String,
    pub subject_id: String,
    #[serde(with = "hex32")]
    pub activity_digest: [u8; 32],
    pub timeout: u64,
    pub difficulty: Difficulty,
    pub cookie: PuzzleCookie,
    pub shares: Vec<Share>,
}

impl SolutionRequest {
    fn key(&self) -> PendingKey {
        (
            self.user_id.clone(),
            self.device_id.clone(),
            self.subject_id.clone(),
            self.activity_digest,
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub users: usize,
    pub devices: usize,
    pub clusters: usize,
    pub subjects: usize,
    pub history_len: usize,
    pub pending: usize,
    pub published: usize,
    pub journal_seq: u64,
    pub model_loaded: bool,
}

type Shared<T> = Arc<Mutex<T>>;

pub struct Service {
    config: ServiceConfig,
    puzzler: Puzzler,
    profiles: ProfileTable,
    model: RwLock<Option<Arc<KnnModel>>>,
    clock: Arc<dyn Clock>,
    /// Held shared by every mutation and exclusively by compaction, so a
    /// snapshot never splits a change from its journal entry.
    gate: RwLock<()>,
    users: RwLock<HashMap<String, Shared<UserRecord>>>,
    clusters: RwLock<HashMap<String, Shared<FraudsterCluster>>>,
    graphs: RwLock<HashMap<String, Shared<CoActivityGraph>>>,
    history: RwLock<ActivityHistory>,
    pending: Mutex<HashMap<PendingKey, PendingActivity>>,
    published: Mutex<HashMap<String, Vec<PublishedActivity>>>,
    journal: Mutex<Option<Journal>>,
    compact_due: AtomicBool,
}

fn check_id(field: &str, v: &str) -> Result<(), ServiceError> {
    if v.is_empty() {
        return Err(ServiceError::Malformed(format!("{field} is empty")));
    }
    if v.len() > MAX_ID_BYTES {
        return Err(ServiceError::Malformed(format!("{field} is {} bytes", v.len())));
    }
    Ok(())
}

impl Service {
    /// Build a service from its config: key, profile table, model and data
    /// directory are all taken from there.
    pub fn open(config: ServiceConfig, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        let key = config.resolve_key()?;
        Self::with_key(config, key, clock)
    }

    pub fn with_key(config: ServiceConfig, key: ServiceKey, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        config.validate()?;
        let profiles = match &config.profiles {
            Some(p) => ProfileTable::from_path(p)?,
            None => ProfileTable::default(),
        };
        let model = match &config.model {
            Some(p) => Some(Arc::new(KnnModel::load(BufReader::new(File::open(p)?))?)),
            None => None,
        };
        let puzzler = Puzzler::new(key, config.shares_required).with_max_backlog(config.max_backlog_ms);
        let svc = Service {
            puzzler,
            profiles,
            model: RwLock::new(None),
            clock,
            gate: RwLock::new(()),
            users: RwLock::default(),
            clusters: RwLock::default(),
            graphs: RwLock::default(),
            history: RwLock::default(),
            pending: Mutex::default(),
            published: Mutex::default(),
            journal: Mutex::new(None),
            compact_due: AtomicBool::new(false),
            config,
        };
        if let Some(m) = model {
            svc.check_model(&m)?;
            *svc.model.write() = Some(m);
        }
        if let Some(dir) = svc.config.data_dir.clone() {
            let rec = Journal::open(&dir, svc.config.fsync)?;
            if let Some(snap) = rec.snapshot {
                svc.restore(snap);
            }
            for ev in &rec.events {
                svc.apply(ev);
            }
            log::info!(
                "recovered {} journal entries from {}",
                rec.events.len(),
                dir.display()
            );
            *svc.journal.lock() = Some(rec.journal);
        }
        Ok(svc)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn puzzler(&self) -> &Puzzler {
        &self.puzzler
    }

    pub fn profiles(&self) -> &ProfileTable {
        &self.profiles
    }

    pub fn now(&self) -> u64 {
        self.clock.now_ms()
    }

    fn check_model(&self, m: &KnnModel) -> Result<(), ServiceError> {
        if m.dim() != FeatureVector::DIM {
            return Err(ServiceError::Config(format!(
                "model has {} features, expected {}",
                m.dim(),
                FeatureVector::DIM
            )));
        }
        Ok(())
    }

    /// Replace the scoring model. Without one every activity scores 0.
    pub fn set_model(&self, model: Option<KnnModel>) -> Result<(), ServiceError> {
        if let Some(m) = &model {
            self.check_model(m)?;
        }
        *self.model.write() = model.map(Arc::new);
        Ok(())
    }

    pub fn has_model(&self) -> bool {
        self.model.read().is_some()
    }

    fn log(&self, ev: Event) -> Result<(), ServiceError> {
        let mut j = self.journal.lock();
        if let Some(j) = j.as_mut() {
            j.append(&ev)?;
            if j.since_snapshot() >= self.config.snapshot_every {
                self.compact_due.store(true, Ordering::Relaxed);
            }
        }
        Ok(())
    }

    fn after_mutation(&self) -> Result<(), ServiceError> {
        if self.compact_due.swap(false, Ordering::Relaxed) {
            self.compact()?;
        }
        Ok(())
    }

    fn user_handle(&self, user_id: &str) -> Result<Shared<UserRecord>, ServiceError> {
        self.users
            .read()
            .get(user_id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownUser(user_id.to_string()))
    }

    fn graph_handle(&self, subject_id: &str) -> Shared<CoActivityGraph> {
        if let Some(g) = self.graphs.read().get(subject_id) {
            return g.clone();
        }
        self.graphs
            .write()
            .entry(subject_id.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(CoActivityGraph::new(subject_id))))
            .clone()
    }

    pub fn user(&self, user_id: &str) -> Option<UserRecord> {
        self.users.read().get(user_id).map(|u| u.lock().clone())
    }

    pub fn cluster(&self, cluster_id: &str) -> Option<FraudsterCluster> {
        self.clusters.read().get(cluster_id).map(|c| c.lock().clone())
    }

    pub fn graph(&self, subject_id: &str) -> Option<CoActivityGraph> {
        self.graphs.read().get(subject_id).map(|g| g.lock().clone())
    }

    pub fn pending(&self) -> Vec<PendingActivity> {
        let mut v: Vec<_> = self.pending.lock().values().cloned().collect();
        v.sort_by_cached_key(|p| (p.issued_at, p.key()));
        v
    }

    /// Activities on `subject_id` whose publication time has come.
    pub fn published(&self, subject_id: &str) -> Vec<PublishedActivity> {
        let now = self.now();
        let mut v: Vec<_> = self
            .published
            .lock()
            .get(subject_id)
            .map(|v| v.iter().filter(|p| p.post_at <= now).cloned().collect())
            .unwrap_or_default();
        v.sort_by_key(|p| p.post_at);
        v
    }

    /// Every accepted activity, due or not, ordered by publication time.
    pub fn all_published(&self) -> Vec<PublishedActivity> {
        let mut v: Vec<_> = self.published.lock().values().flatten().cloned().collect();
        v.sort_by_cached_key(|p| (p.post_at, p.key()));
        v
    }

    pub fn stats(&self) -> Stats {
        let users = self.users.read();
        Stats {
            users: users.len(),
            devices: users.values().map(|u| u.lock().devices.len()).sum(),
            clusters: self.clusters.read().len(),
            subjects: self.graphs.read().len(),
            history_len: self.history.read().len(),
            pending: self.pending.lock().len(),
            published: self.published.lock().values().map(Vec::len).sum(),
            journal_seq: self.journal.lock().as_ref().map_or(0, |j| j.seq()),
            model_loaded: self.has_model(),
        }
    }

    /// Create an account. `creation_time` defaults to now; the timeout
    /// starts at now.
    pub fn register_user(&self, user_id: &str, creation_time: Option<u64>) -> Result<UserRecord, ServiceError> {
        check_id("user_id", user_id)?;
        let rec = {
            let _g = self.gate.read();
            let now = self.now();
            let mut users = self.users.write();
            if users.contains_key(user_id) {
                return Err(ServiceError::Conflict(format!("user {user_id} already registered")));
            }
            let rec = UserRecord {
                user_id: user_id.to_string(),
                creation_time: creation_time.unwrap_or(now),
                devices: Vec::new(),
                timeout: now,
                fraudster_cluster_id: None,
            };
            users.insert(user_id.to_string(), Arc::new(Mutex::new(rec.clone())));
            self.log(Event::UserRegistered { user: rec.clone() })?;
            rec
        };
        self.after_mutation()?;
        Ok(rec)
    }

    /// Attach a device, seeding its hashrate from the profile table.
    pub fn register_device(&self, user_id: &str, specs: &DeviceSpecs) -> Result<DeviceRecord, ServiceError> {
        check_id("device_id", &specs.device_id)?;
        let dev = {
            let _g = self.gate.read();
            let handle = self.user_handle(user_id)?;
            let mut user = handle.lock();
            if user.device(&specs.device_id).is_some() {
                return Err(ServiceError::Conflict(format!(
                    "device {} already registered to {user_id}",
                    specs.device_id
                )));
            }
            let dev = DeviceRecord {
                device_id: specs.device_id.clone(),
                hashrate: self.profiles.initial_hashrate(specs),
                last_updated: self.now(),
            };
            user.devices.push(dev.clone());
            self.log(Event::DeviceRegistered {
                user_id: user_id.to_string(),
                device: dev.clone(),
            })?;
            dev
        };
        self.after_mutation()?;
        Ok(dev)
    }

    /// Score an activity, charge its penalty to the owner's timeout and
    /// return the puzzle that gates its publication.
    pub fn submit_activity(&self, req: &ActivityRequest) -> Result<ActivityTicket, ServiceError> {
        check_id("user_id", &req.user_id)?;
        check_id("device_id", &req.device_id)?;
        check_id("subject_id", &req.subject_id)?;
        if req.payload.is_empty() {
            return Err(ServiceError::Malformed("empty activity payload".into()));
        }
        let ticket = {
            let _g = self.gate.read();
            self.submit_activity_locked(req)?
        };
        self.after_mutation()?;
        Ok(ticket)
    }

    fn submit_activity_locked(&self, req: &ActivityRequest) -> Result<ActivityTicket, ServiceError> {
        let now = self.now();
        let handle = self.user_handle(&req.user_id)?;
        let (hashrate, created) = {
            let user = handle.lock();
            let dev = user.device(&req.device_id).ok_or_else(|| ServiceError::UnknownDevice {
                user: req.user_id.clone(),
                device: req.device_id.clone(),
            })?;
            // Refuse before touching the graph if the backlog is already
            // over the cap; build_puzzle re-checks under the lock below.
            let owner_timeout = match &user.fraudster_cluster_id {
                Some(c) => self.clusters.read().get(c).map_or(user.timeout, |c| c.lock().timeout),
                None => user.timeout,
            };
            if let Some(cap) = self.config.max_backlog_ms {
                if owner_timeout > now.saturating_add(cap) {
                    return Err(ServiceError::RetryAfter {
                        retry_after_ms: owner_timeout - now - cap,
                    });
                }
            }
            (dev.hashrate, user.creation_time)
        };
        let category = req.category.clone().unwrap_or_default();

        let features = {
            let graph = self.graph_handle(&req.subject_id);
            let mut graph = graph.lock();
            let mut history = self.history.write();
            let ctx = ActivityContext {
                user: &req.user_id,
                category: &category,
                at: now,
                account_created: created,
            };
            let f = extract_features(&mut graph, &history, ctx, &self.config.feature_config());
            history.record(
                &req.user_id,
                HistoryEntry {
                    subject_id: req.subject_id.clone(),
                    timestamp: now,
                    category: category.clone(),
                },
            );
            self.log(Event::ActivityObserved {
                user_id: req.user_id.clone(),
                subject_id: req.subject_id.clone(),
                category: category.clone(),
                at: now,
            })?;
            f
        };

        let fraud_score = self.model.read().as_ref().map_or(0.0, |m| m.score_features(&features));
        let penalty_ms = penalty_millis(fraud_score, &self.config.penalty);
        let desc = ActivityDescriptor {
            user_id: req.user_id.clone(),
            device_id: req.device_id.clone(),
            subject_id: req.subject_id.clone(),
            activity_digest: double_hash(&req.payload),
            issued_at: now,
        };

        let puzzle = {
            let mut user = handle.lock();
            let cluster = user
                .fraudster_cluster_id
                .clone()
                .and_then(|c| self.clusters.read().get(&c).cloned());
            let map_err = |e: CookieError| match e {
                CookieError::ClockSkew { retry_after_ms } => ServiceError::RetryAfter { retry_after_ms },
                e => ServiceError::Cookie(e),
            };
            match cluster {
                Some(c) => {
                    let mut c = c.lock();
                    let p = self
                        .puzzler
                        .build_puzzle(&desc, hashrate, penalty_ms, &mut c.timeout, now)
                        .map_err(map_err)?;
                    self.log(Event::TimeoutAdvanced {
                        user_id: user.user_id.clone(),
                        cluster_id: Some(c.cluster_id.clone()),
                        timeout: c.timeout,
                    })?;
                    p
                }
                None => {
                    let p = self
                        .puzzler
                        .build_puzzle(&desc, hashrate, penalty_ms, &mut user.timeout, now)
                        .map_err(map_err)?;
                    self.log(Event::TimeoutAdvanced {
                        user_id: user.user_id.clone(),
                        cluster_id: None,
                        timeout: user.timeout,
                    })?;
                    p
                }
            }
        };

        let pending = PendingActivity {
            user_id: desc.user_id.clone(),
            device_id: desc.device_id.clone(),
            subject_id: desc.subject_id.clone(),
            activity_digest: desc.activity_digest,
            category,
            issued_at: now,
            timeout: puzzle.timeout,
            difficulty: puzzle.difficulty.clone(),
            penalty_ms,
            fraud_score,
        };
        {
            let mut p = self.pending.lock();
            p.insert(pending.key(), pending.clone());
            self.log(Event::PendingAdded { pending })?;
        }
        Ok(ActivityTicket {
            user_id: desc.user_id,
            device_id: desc.device_id,
            subject_id: desc.subject_id,
            activity_digest: desc.activity_digest,
            issued_at: now,
            puzzle,
            penalty_ms,
            fraud_score,
            features,
        })
    }

    /// Check a solution. Rejections change nothing. On acceptance the
    /// activity becomes publishable at `post_at` and the device's hashrate
    /// estimate is corrected upward if the solve was faster than expected.
    pub fn submit_solution(&self, req: &SolutionRequest) -> Result<Verdict, ServiceError> {
        self.finish_solution(req, false)
    }

    /// As [`Service::submit_solution`], but the work is taken as done: the
    /// cookie is still checked, the shares are not. For analytic replays
    /// where real hashing at the issued difficulty is out of reach.
    pub fn submit_simulated_solution(&self, req: &SolutionRequest) -> Result<Verdict, ServiceError> {
        self.finish_solution(req, true)
    }

    fn finish_solution(&self, req: &SolutionRequest, simulated: bool) -> Result<Verdict, ServiceError> {
        let verdict = {
            let _g = self.gate.read();
            self.finish_solution_locked(req, simulated)?
        };
        self.after_mutation()?;
        Ok(verdict)
    }

    fn finish_solution_locked(&self, req: &SolutionRequest, simulated: bool) -> Result<Verdict, ServiceError> {
        let now = self.now();
        let key = req.key();
        let pending = self.pending.lock().get(&key).cloned();
        let issued_at = pending.as_ref().map_or(now, |p| p.issued_at);
        let desc = ActivityDescriptor {
            user_id: req.user_id.clone(),
            device_id: req.device_id.clone(),
            subject_id: req.subject_id.clone(),
            activity_digest: req.activity_digest,
            issued_at,
        };
        let mut verdict = if simulated {
            match self.puzzler.authenticate(&desc, req.timeout, &req.difficulty, &req.cookie) {
                Ok(()) => self.puzzler.accepted(&desc, req.timeout, &req.difficulty, now),
                Err(e) => Verdict::rejected(VerdictStatus::BadCookie, e),
            }
        } else {
            self.puzzler
                .verify_solution(&desc, req.timeout, &req.difficulty, &req.cookie, &req.shares, now)
        };
        if !verdict.is_accepted() {
            return Ok(verdict);
        }
        if pending.is_none() {
            return self.already_published(req, verdict);
        }

        let handle = self.user_handle(&req.user_id)?;
        let mut user = handle.lock();
        // A concurrent duplicate may have taken it since the lookup above.
        let Some(pending) = self.pending.lock().remove(&key) else {
            drop(user);
            return self.already_published(req, verdict);
        };
        let elapsed_ms = now.saturating_sub(pending.issued_at);
        let mut changed = None;
        if let Some(dev) = user.device_mut(&req.device_id) {
            if elapsed_ms > 0 {
                let upd = correct_hashrate(
                    dev.hashrate,
                    &req.difficulty,
                    self.config.shares_required,
                    elapsed_ms as f64 / 1000.0,
                    self.config.min_hashrate,
                )?;
                if upd.changed {
                    dev.hashrate = upd.stored;
                    dev.last_updated = now;
                    changed = Some(dev.clone());
                }
            }
            verdict.updated_hashrate = Some(dev.hashrate);
        }
        let published = PublishedActivity {
            user_id: pending.user_id,
            device_id: pending.device_id,
            subject_id: pending.subject_id,
            activity_digest: pending.activity_digest,
            category: pending.category,
            issued_at: pending.issued_at,
            post_at: verdict.post_at.expect("accepted verdict has post_at"),
            penalty_ms: pending.penalty_ms,
            fraud_score: pending.fraud_score,
        };
        self.published
            .lock()
            .entry(published.subject_id.clone())
            .or_default()
            .push(published.clone());
        self.log(Event::SolutionAccepted {
            published,
            device: changed,
        })?;
        Ok(verdict)
    }

    /// A valid solution for an activity that is no longer pending: repeat
    /// the original outcome if it was published, otherwise refuse.
    fn already_published(&self, req: &SolutionRequest, mut verdict: Verdict) -> Result<Verdict, ServiceError> {
        let key = req.key();
        let published = self.published.lock();
        let hit = published
            .get(&req.subject_id)
            .and_then(|v| v.iter().find(|p| p.key() == key));
        match hit {
            Some(p) => {
                verdict.post_at = Some(p.post_at);
                verdict.measured_hashrate = None;
                verdict.detail = Some("already accepted".into());
                Ok(verdict)
            }
            None => Err(ServiceError::Conflict(
                "no pending activity matches this solution".into(),
            )),
        }
    }

    /// Serialize `user_ids` on one shared timeout, creating or growing
    /// `cluster_id`. The shared timeout becomes the largest of the current
    /// cluster timeout and every member's own.
    pub fn assign_cluster(&self, cluster_id: &str, user_ids: &[String]) -> Result<FraudsterCluster, ServiceError> {
        check_id("cluster_id", cluster_id)?;
        if user_ids.is_empty() {
            return Err(ServiceError::Malformed("cluster needs at least one member".into()));
        }
        let cluster = {
            let _g = self.gate.read();
            self.assign_cluster_locked(cluster_id, user_ids)?
        };
        self.after_mutation()?;
        Ok(cluster)
    }

    fn assign_cluster_locked(&self, cluster_id: &str, user_ids: &[String]) -> Result<FraudsterCluster, ServiceError> {
        let ids: BTreeSet<&String> = user_ids.iter().collect();
        let handles = ids
            .iter()
            .map(|id| self.user_handle(id))
            .collect::<Result<Vec<_>, _>>()?;
        let mut guards: Vec<_> = handles.iter().map(|h| h.lock()).collect();
        for u in &guards {
            if let Some(c) = &u.fraudster_cluster_id {
                if c != cluster_id {
                    return Err(ServiceError::Conflict(format!("user {} is already in cluster {c}", u.user_id)));
                }
            }
        }
        let mut clusters = self.clusters.write();
        let handle = clusters
            .entry(cluster_id.to_string())
            .or_insert_with(|| {
                Arc::new(Mutex::new(FraudsterCluster {
                    cluster_id: cluster_id.to_string(),
                    member_user_ids: Vec::new(),
                    timeout: 0,
                }))
            })
            .clone();
        drop(clusters);
        let mut c = handle.lock();
        for u in guards.iter_mut() {
            c.timeout = c.timeout.max(u.timeout);
            if !c.member_user_ids.contains(&u.user_id) {
                c.member_user_ids.push(u.user_id.clone());
            }
            u.fraudster_cluster_id = Some(cluster_id.to_string());
        }
        c.member_user_ids.sort();
        let out = c.clone();
        self.log(Event::ClusterAssigned { cluster: out.clone() })?;
        Ok(out)
    }

    /// Batch clustering: every min-cut component of the subject's graph with
    /// at least `min_size` not-yet-clustered accounts becomes a cluster.
    pub fn auto_cluster(&self, subject_id: &str, min_size: usize) -> Result<Vec<FraudsterCluster>, ServiceError> {
        let parts = match self.graphs.read().get(subject_id) {
            Some(g) => g.lock().partition(self.config.theta, None),
            None => return Ok(Vec::new()),
        };
        let mut out = Vec::new();
        for part in parts {
            let free: Vec<String> = part
                .into_iter()
                .filter(|u| self.user(u).is_some_and(|r| r.fraudster_cluster_id.is_none()))
                .collect();
            if free.len() >= min_size.max(1) {
                let id = format!("auto:{subject_id}:{}", free[0]);
                out.push(self.assign_cluster(&id, &free)?);
            }
        }
        Ok(out)
    }

    /// Drop activities whose puzzles went unsolved for `maxf + grace` past
    /// their timeout. Returns how many were dropped.
    pub fn expire_pending(&self) -> Result<usize, ServiceError> {
        let n = {
            let _g = self.gate.read();
            let now = self.now();
            let slack = to_millis(self.config.penalty.maxf()).saturating_add(self.config.pending_grace_ms);
            let mut pending = self.pending.lock();
            let mut expired: Vec<PendingActivity> = Vec::new();
            pending.retain(|_, p| {
                let keep = now <= p.timeout.saturating_add(slack);
                if !keep {
                    expired.push(p.clone());
                }
                keep
            });
            let n = expired.len();
            if n > 0 {
                expired.sort_by_key(|p| p.key());
                self.log(Event::PendingExpired { expired })?;
            }
            n
        };
        self.after_mutation()?;
        Ok(n)
    }

    pub fn snapshot(&self) -> Snapshot {
        let mut users: Vec<UserRecord> = self.users.read().values().map(|u| u.lock().clone()).collect();
        users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        let mut clusters: Vec<FraudsterCluster> = self.clusters.read().values().map(|c| c.lock().clone()).collect();
        clusters.sort_by(|a, b| a.cluster_id.cmp(&b.cluster_id));
        let mut graphs: Vec<CoActivityGraph> = self.graphs.read().values().map(|g| g.lock().clone()).collect();
        graphs.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        Snapshot {
            seq: 0,
            users,
            clusters,
            graphs,
            history: self.history.read().clone(),
            pending: self.pending(),
            published: self.all_published(),
        }
    }

    /// Write a snapshot and truncate the journal. A no-op without a data
    /// directory.
    pub fn compact(&self) -> Result<(), ServiceError> {
        let _g = self.gate.write();
        if self.journal.lock().is_none() {
            return Ok(());
        }
        let snap = self.snapshot();
        match self.journal.lock().as_mut() {
            Some(j) => j.compact(snap),
            None => Ok(()),
        }
    }

    fn restore(&self, snap: Snapshot) {
        let wrap = |x| Arc::new(Mutex::new(x));
        *self.users.write() = snap.users.into_iter().map(|u| (u.user_id.clone(), wrap(u))).collect();
        *self.clusters.write() = snap
            .clusters
            .into_iter()
            .map(|c| (c.cluster_id.clone(), Arc::new(Mutex::new(c))))
            .collect();
        *self.graphs.write() = snap
            .graphs
            .into_iter()
            .map(|g| (g.subject_id.clone(), Arc::new(Mutex::new(g))))
            .collect();
        *self.history.write() = snap.history;
        *self.pending.lock() = snap.pending.into_iter().map(|p| (p.key(), p)).collect();
        let mut published: HashMap<String, Vec<PublishedActivity>> = HashMap::new();
        for p in snap.published {
            published.entry(p.subject_id.clone()).or_default().push(p);
        }
        *self.published.lock() = published;
    }

    /// Re-apply a journal entry during recovery.
    fn apply(&self, ev: &Event) {
        match ev {
            Event::UserRegistered { user } => {
                self.users
                    .write()
                    .insert(user.user_id.clone(), Arc::new(Mutex::new(user.clone())));
            }
            Event::DeviceRegistered { user_id, device } => {
                if let Some(u) = self.users.read().get(user_id) {
                    u.lock().devices.push(device.clone());
                }
            }
            Event::ActivityObserved {
                user_id,
                subject_id,
                category,
                at,
            } => {
                let g = self.graph_handle(subject_id);
                let mut g = g.lock();
                let mut h = self.history.write();
                update_graph(&mut g, user_id, &h, *at);
                h.record(
                    user_id,
                    HistoryEntry {
                        subject_id: subject_id.clone(),
                        timestamp: *at,
                        category: category.clone(),
                    },
                );
            }
            Event::TimeoutAdvanced {
                user_id,
                cluster_id,
                timeout,
            } => match cluster_id {
                Some(c) => {
                    if let Some(c) = self.clusters.read().get(c) {
                        c.lock().timeout = *timeout;
                    }
                }
                None => {
                    if let Some(u) = self.users.read().get(user_id) {
                        u.lock().timeout = *timeout;
                    }
                }
            },
            Event::PendingAdded { pending } => {
                self.pending.lock().insert(pending.key(), pending.clone());
            }
            Event::SolutionAccepted { published, device } => {
                self.pending.lock().remove(&published.key());
                if let Some(d) = device {
                    if let Some(u) = self.users.read().get(&published.user_id) {
                        if let Some(slot) = u.lock().device_mut(&d.device_id) {
                            *slot = d.clone();
                        }
                    }
                }
                self.published
                    .lock()
                    .entry(published.subject_id.clone())
                    .or_default()
                    .push(published.clone());
            }
            Event::ClusterAssigned { cluster } => {
                let users = self.users.read();
                for m in &cluster.member_user_ids {
                    if let Some(u) = users.get(m) {
                        u.lock().fraudster_cluster_id = Some(cluster.cluster_id.clone());
                    }
                }
                self.clusters
                    .write()
                    .insert(cluster.cluster_id.clone(), Arc::new(Mutex::new(cluster.clone())));
            }
            Event::PendingExpired { expired } => {
                let mut p = self.pending.lock();
                for e in expired {
                    p.remove(&e.key());
                }
            }
        }
    }
}


#[cfg(test)]
mod tests;

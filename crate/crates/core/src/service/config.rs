//! Service configuration, read from TOML.
//!
//! ```toml
//! key_hex = "…64 hex chars…"   # or set FRAUDSYS_KEY
//! shares_required = 4
//! theta = 0.5
//! min_hashrate = 1000.0
//! max_backlog_ms = 31536000000
//! pending_grace_ms = 3600000
//! data_dir = "state"
//! model = "model.knn"
//! profiles = "profiles.csv"
//!
//! [penalty]
//! minh = 2.0
//! maxh = 300.0
//! minf = 300.0
//! maxf = 86400.0
//! thr = 0.5
//! k = 30.0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cookie::ServiceKey;
use crate::error::ServiceError;
use crate::graph::{FeatureConfig, DEFAULT_THETA};
use crate::hashrate::DEFAULT_MIN_HASHRATE;
use crate::penalty::PenaltyParams;
use crate::puzzle::DEFAULT_SHARES;

/// Environment variable consulted when the config has no key.
pub const KEY_ENV: &str = "FRAUDSYS_KEY";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub key_hex: Option<String>,
    pub shares_required: u32,
    pub penalty: PenaltyParams,
    pub theta: f64,
    pub drop_temporal: bool,
    pub min_hashrate: f64,
    /// Refuse new puzzles while the stored timeout is more than this far
    /// ahead of the clock. `None` disables the cap.
    pub max_backlog_ms: Option<u64>,
    /// Unsolved activities are dropped `maxf + pending_grace_ms` after
    /// their timeout.
    pub pending_grace_ms: u64,
    pub profiles: Option<PathBuf>,
    pub model: Option<PathBuf>,
    /// Journal and snapshot directory. `None` keeps state in memory.
    pub data_dir: Option<PathBuf>,
    /// Journal entries between snapshots.
    pub snapshot_every: u64,
    /// fsync the journal after every entry.
    pub fsync: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            key_hex: None,
            shares_required: DEFAULT_SHARES,
            penalty: PenaltyParams::default(),
            theta: DEFAULT_THETA,
            drop_temporal: false,
            min_hashrate: DEFAULT_MIN_HASHRATE,
            max_backlog_ms: Some(365 * 86_400_000),
            pending_grace_ms: 3_600_000,
            profiles: None,
            model: None,
            data_dir: None,
            snapshot_every: 10_000,
            fsync: false,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ServiceError> {
        let cfg: ServiceConfig = toml::from_str(s).map_err(|e| ServiceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.profiles, &mut cfg.model, &mut cfg.data_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.shares_required == 0 {
            return Err(ServiceError::Config("shares_required must be positive".into()));
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(ServiceError::Config(format!("theta {} out of range", self.theta)));
        }
        if !(self.min_hashrate >= 0.0 && self.min_hashrate.is_finite()) {
            return Err(ServiceError::Config(format!("min_hashrate {} out of range", self.min_hashrate)));
        }
        if self.snapshot_every == 0 {
            return Err(ServiceError::Config("snapshot_every must be positive".into()));
        }
        Ok(())
    }

    /// The configured key, else the `FRAUDSYS_KEY` environment variable.
    pub fn resolve_key(&self) -> Result<ServiceKey, ServiceError> {
        let hex = match &self.key_hex {
            Some(k) => k.clone(),
            None => std::env::var(KEY_ENV)
                .map_err(|_| ServiceError::Config(format!("no key_hex and {KEY_ENV} unset")))?,
        };
        ServiceKey::from_hex(&hex).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            theta: self.theta,
            drop_temporal: self.drop_temporal,
        }
    }
}

//! Device hashrate estimation and adaptive correction.
//!
//! New devices start from the closest entry of a profile table. After each
//! solved puzzle the service measures `2qΔ/τ'` and keeps the larger of that
//! and its current estimate. Estimates never move down: a device that stalls
//! to look slow gains nothing.

use std::io::Read;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::HashrateError;
use crate::exec::Exec;
use crate::puzzle::{share_digest, Difficulty, Hashrate};

/// Measurements below this many hashes per second are ignored.
pub const DEFAULT_MIN_HASHRATE: f64 = 1_000.0;

/// Profile table seeded with the measured devices.
pub const BUILTIN_PROFILES_CSV: &str = include_str!("../data/profiles.csv");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub model_name: String,
    pub cpu_class: String,
    #[serde(rename = "hashrate_hps")]
    pub reported_hashrate: Hashrate,
}

/// What a device tells us about itself at registration.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSpecs {
    pub device_id: String,
    #[serde(default)]
    pub model_name: String,
    #[serde(default)]
    pub cpu_class: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub device_id: String,
    pub hashrate: Hashrate,
    /// Milliseconds since the Unix epoch.
    pub last_updated: u64,
}

#[derive(Clone, Debug)]
pub struct ProfileTable {
    profiles: Vec<DeviceProfile>,
}

impl Default for ProfileTable {
    fn default() -> Self {
        Self::from_reader(BUILTIN_PROFILES_CSV.as_bytes()).expect("builtin table parses")
    }
}

impl ProfileTable {
    pub fn new(profiles: Vec<DeviceProfile>) -> Result<Self, HashrateError> {
        if profiles.is_empty() {
            return Err(HashrateError::EmptyTable);
        }
        Ok(ProfileTable { profiles })
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self, HashrateError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let profiles = rdr
            .deserialize()
            .collect::<Result<Vec<DeviceProfile>, _>>()?;
        Self::new(profiles)
    }

    pub fn from_path(path: &Path) -> Result<Self, HashrateError> {
        let file = std::fs::File::open(path).map_err(csv::Error::from)?;
        Self::from_reader(file)
    }

    pub fn profiles(&self) -> &[DeviceProfile] {
        &self.profiles
    }

    pub fn by_model(&self, model: &str) -> Option<&DeviceProfile> {
        self.profiles
            .iter()
            .find(|p| p.model_name.eq_ignore_ascii_case(model))
    }

    /// Exact model match, else the median of the matching CPU class, else
    /// the median of the whole table.
    pub fn initial_hashrate(&self, specs: &DeviceSpecs) -> Hashrate {
        if let Some(p) = self.by_model(&specs.model_name) {
            return p.reported_hashrate;
        }
        let class: Vec<f64> = self
            .profiles
            .iter()
            .filter(|p| !specs.cpu_class.is_empty() && p.cpu_class.eq_ignore_ascii_case(&specs.cpu_class))
            .map(|p| p.reported_hashrate.hps())
            .collect();
        if !class.is_empty() {
            return Hashrate::new(median(class)).expect("median of positive rates");
        }
        let all = self.profiles.iter().map(|p| p.reported_hashrate.hps()).collect();
        Hashrate::new(median(all)).expect("median of positive rates")
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Result of feeding one solve-time observation back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HashrateUpdate {
    /// `2qΔ/τ'`.
    pub measured: f64,
    pub stored: Hashrate,
    pub changed: bool,
}

/// Hashrate that would explain solving `q` shares at `difficulty` in
/// `solve_secs`.
pub fn measured_hashrate(difficulty: &Difficulty, q: u32, solve_secs: f64) -> Result<f64, HashrateError> {
    if solve_secs.is_nan() || solve_secs <= 0.0 {
        return Err(HashrateError::NonPositiveSolveTime(solve_secs));
    }
    Ok(2.0 * q as f64 * difficulty.to_f64() / solve_secs)
}

/// Ratchet-up correction of a stored estimate.
pub fn correct_hashrate(
    current: Hashrate,
    difficulty: &Difficulty,
    q: u32,
    solve_secs: f64,
    min_hashrate: f64,
) -> Result<HashrateUpdate, HashrateError> {
    let measured = measured_hashrate(difficulty, q, solve_secs)?;
    let stored = if measured >= min_hashrate && measured > current.hps() {
        Hashrate::new(measured)?
    } else {
        current
    };
    Ok(HashrateUpdate {
        measured,
        stored,
        changed: stored != current,
    })
}

/// Measure this machine's double-hash throughput over `window`.
pub fn measure_local_hashrate(window: Duration, exec: Exec) -> Hashrate {
    let workers = exec.workers();
    let start = Instant::now();
    let counts = exec.map_range(workers, |w| {
        let cookie = [w as u8; 32];
        let mut nonce = [0u8; 32];
        let mut n = 0u64;
        let mut sink = 0u8;
        while start.elapsed() < window {
            for _ in 0..4096 {
                nonce[..8].copy_from_slice(&n.to_le_bytes());
                sink ^= share_digest(&nonce, &cookie)[0];
                n += 1;
            }
        }
        std::hint::black_box(sink);
        n
    });
    let secs = start.elapsed().as_secs_f64();
    Hashrate::new(counts.iter().sum::<u64>() as f64 / secs).expect("nonzero hashing")
}

/// A CSV row (no header) appendable to a profile table.
pub fn profile_row(model_name: &str, cpu_class: &str, rate: Hashrate) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record([model_name, cpu_class, &format!("{:.0}", rate.hps())])
        .expect("in-memory write");
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

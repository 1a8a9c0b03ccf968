//! Double-SHA-256 proof-of-work primitives.
//!
//! A puzzle is a 32-byte cookie plus a difficulty. A *share* is a 32-byte
//! nonce whose double hash, taken over `nonce || cookie`, is strictly below
//! the target derived from the difficulty. Digests and targets compare as
//! 256-bit big-endian unsigned integers, which for fixed-width byte arrays is
//! plain lexicographic order.
//!
//! The target of difficulty one is `2^255 - 1`, so the easiest puzzle takes
//! two hashes on average and every difficulty `d` costs `2d` hashes per
//! share in expectation.

use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::OnceLock;
use std::time::Instant;

use num_bigint::BigUint;
use num_traits::{FromPrimitive, One, ToPrimitive, Zero};
use parking_lot::Mutex;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::PuzzleError;
use crate::exec::Exec;

/// Default number of shares per puzzle.
pub const DEFAULT_SHARES: u32 = 4;

/// `2^255 - 1`, the largest target the system accepts.
pub fn target_one() -> &'static BigUint {
    static T1: OnceLock<BigUint> = OnceLock::new();
    T1.get_or_init(|| (BigUint::one() << 255u32) - BigUint::one())
}

fn to_be_32(v: &BigUint) -> [u8; 32] {
    let bytes = v.to_bytes_be();
    debug_assert!(bytes.len() <= 32);
    let mut out = [0u8; 32];
    out[32 - bytes.len()..].copy_from_slice(&bytes);
    out
}

/// SHA-256 applied twice.
pub fn double_hash(message: &[u8]) -> [u8; 32] {
    let first = Sha256::digest(message);
    Sha256::digest(first).into()
}

/// `H²(nonce || cookie)`.
pub fn share_digest(nonce: &[u8; 32], cookie: &[u8; 32]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(nonce);
    hasher.update(cookie);
    let first = hasher.finalize();
    Sha256::digest(first).into()
}

/// Puzzle difficulty, an integer in `[1, 2^255 - 1]`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Difficulty(BigUint);

impl Difficulty {
    pub fn new(value: BigUint) -> Result<Self, PuzzleError> {
        if value.is_zero() || &value > target_one() {
            return Err(PuzzleError::InvalidDifficulty(value.to_string()));
        }
        Ok(Difficulty(value))
    }

    pub fn from_u64(value: u64) -> Result<Self, PuzzleError> {
        Self::new(BigUint::from(value))
    }

    pub fn one() -> Self {
        Difficulty(BigUint::one())
    }

    pub fn max() -> Self {
        Difficulty(target_one().clone())
    }

    /// Floor of a non-negative real, clamped into the valid range.
    pub fn from_f64_clamped(value: f64) -> Self {
        if !value.is_finite() || value < 1.0 {
            return if value.is_infinite() && value > 0.0 {
                Self::max()
            } else {
                Self::one()
            };
        }
        let v = BigUint::from_f64(value.floor()).unwrap_or_else(BigUint::one);
        if &v > target_one() {
            Self::max()
        } else {
            Difficulty(v)
        }
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::INFINITY)
    }

    pub fn to_u64(&self) -> Option<u64> {
        self.0.to_u64()
    }

    /// 32-byte big-endian encoding.
    pub fn to_be_bytes(&self) -> [u8; 32] {
        to_be_32(&self.0)
    }

    pub fn from_be_bytes(bytes: &[u8; 32]) -> Result<Self, PuzzleError> {
        Self::new(BigUint::from_bytes_be(bytes))
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Debug for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Difficulty({})", self.0)
    }
}

impl std::str::FromStr for Difficulty {
    type Err = PuzzleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v = BigUint::parse_bytes(s.trim().as_bytes(), 10)
            .ok_or_else(|| PuzzleError::InvalidDifficulty(s.to_string()))?;
        Self::new(v)
    }
}

impl TryFrom<String> for Difficulty {
    type Error = PuzzleError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Difficulty> for String {
    fn from(d: Difficulty) -> String {
        d.to_string()
    }
}

/// Share acceptance threshold, an integer in `[1, 2^255 - 1]`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Target {
    value: BigUint,
    bytes: [u8; 32],
}

impl Target {
    pub fn new(value: BigUint) -> Result<Self, PuzzleError> {
        if value.is_zero() || &value > target_one() {
            return Err(PuzzleError::InvalidTarget(value.to_string()));
        }
        let bytes = to_be_32(&value);
        Ok(Target { value, bytes })
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.bytes
    }

    /// Whether a digest, read as a big-endian integer, lies strictly below.
    #[inline]
    pub fn accepts(&self, digest: &[u8; 32]) -> bool {
        digest < &self.bytes
    }
}

impl fmt::Debug for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Target(0x{})", hex::encode(self.bytes))
    }
}

/// `floor((2^255 - 1) / d)`.
pub fn difficulty_to_target(d: &Difficulty) -> Target {
    Target::new(target_one() / d.value()).expect("quotient of valid difficulty is a valid target")
}

/// `floor((2^255 - 1) / t)`.
pub fn target_to_difficulty(t: &Target) -> Difficulty {
    Difficulty::new(target_one() / t.value()).expect("quotient of valid target is a valid difficulty")
}

/// Device hashrate in double hashes per second.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Hashrate(f64);

impl Hashrate {
    pub fn new(hps: f64) -> Result<Self, PuzzleError> {
        if hps.is_finite() && hps > 0.0 {
            Ok(Hashrate(hps))
        } else {
            Err(PuzzleError::InvalidHashrate(hps))
        }
    }

    pub fn hps(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Hashrate {
    type Error = PuzzleError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Hashrate::new(v)
    }
}

impl From<Hashrate> for f64 {
    fn from(h: Hashrate) -> f64 {
        h.0
    }
}

impl fmt::Display for Hashrate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} H/s", self.0)
    }
}

/// Expected seconds to find one share: `2d / h`.
pub fn expected_solve_time(d: &Difficulty, h: Hashrate) -> f64 {
    2.0 * d.to_f64() / h.hps()
}

/// A puzzle share: the 32-byte nonce that satisfied the target test.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Share {
    pub nonce: [u8; 32],
}

impl Share {
    pub fn meets(&self, cookie: &[u8; 32], target: &Target) -> bool {
        target.accepts(&share_digest(&self.nonce, cookie))
    }
}

impl fmt::Debug for Share {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Share({})", hex::encode(self.nonce))
    }
}

impl TryFrom<String> for Share {
    type Error = PuzzleError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        let mut nonce = [0u8; 32];
        hex::decode_to_slice(s.trim(), &mut nonce).map_err(|_| PuzzleError::MalformedShare(s))?;
        Ok(Share { nonce })
    }
}

impl From<Share> for String {
    fn from(s: Share) -> String {
        hex::encode(s.nonce)
    }
}

/// Output of a nonce search.
#[derive(Clone, Debug)]
pub struct Solution {
    pub shares: Vec<Share>,
    /// Hash attempts spent across all workers.
    pub attempts: u64,
}

/// Knobs for [`solve_puzzle_with`].
#[derive(Clone, Copy, Debug, Default)]
pub struct SolveOptions {
    pub exec: Exec,
    /// Seed for reproducible searches; `None` draws from the OS.
    pub seed: Option<u64>,
    pub deadline: Option<Instant>,
}

/// Find `q` distinct shares. Runs until done.
pub fn solve_puzzle(cookie: &[u8; 32], d: &Difficulty, q: u32) -> Solution {
    solve_puzzle_with(cookie, d, q, SolveOptions::default()).expect("no deadline set")
}

/// Find `q` distinct shares, or give up at the deadline.
pub fn solve_puzzle_with(
    cookie: &[u8; 32],
    d: &Difficulty,
    q: u32,
    opts: SolveOptions,
) -> Option<Solution> {
    let target = difficulty_to_target(d);
    let q = q.max(1) as usize;
    let base_seed = match opts.seed {
        Some(s) => s,
        None => {
            use rand::TryRngCore;
            rand::rngs::OsRng.try_next_u64().expect("os randomness")
        }
    };
    let workers = opts.exec.workers();
    if workers <= 1 {
        let mut rng = ChaCha20Rng::seed_from_u64(base_seed);
        return search_sequential(cookie, &target, q, &mut rng, opts.deadline);
    }

    let found: Mutex<Vec<Share>> = Mutex::new(Vec::with_capacity(q));
    let seen: Mutex<HashSet<[u8; 32]>> = Mutex::new(HashSet::new());
    let attempts = AtomicU64::new(0);
    let done = AtomicBool::new(false);
    let timed_out = AtomicBool::new(false);

    opts.exec.map_range(workers, |w| {
        let mut rng = ChaCha20Rng::seed_from_u64(base_seed);
        rng.set_stream(w as u64 + 1);
        let mut local = 0u64;
        let mut nonce = [0u8; 32];
        while !done.load(Ordering::Relaxed) {
            for _ in 0..256 {
                rng.fill_bytes(&mut nonce);
                local += 1;
                if target.accepts(&share_digest(&nonce, cookie)) && seen.lock().insert(nonce) {
                    let mut f = found.lock();
                    if f.len() < q {
                        f.push(Share { nonce });
                    }
                    if f.len() >= q {
                        done.store(true, Ordering::Relaxed);
                        break;
                    }
                }
            }
            if let Some(dl) = opts.deadline {
                if Instant::now() >= dl {
                    timed_out.store(true, Ordering::Relaxed);
                    done.store(true, Ordering::Relaxed);
                }
            }
        }
        attempts.fetch_add(local, Ordering::Relaxed);
    });

    let shares = found.into_inner();
    if shares.len() < q || (timed_out.load(Ordering::Relaxed) && shares.len() < q) {
        return None;
    }
    Some(Solution {
        shares,
        attempts: attempts.into_inner(),
    })
}

fn search_sequential<R: Rng>(
    cookie: &[u8; 32],
    target: &Target,
    q: usize,
    rng: &mut R,
    deadline: Option<Instant>,
) -> Option<Solution> {
    let mut shares: Vec<Share> = Vec::with_capacity(q);
    let mut attempts = 0u64;
    let mut nonce = [0u8; 32];
    while shares.len() < q {
        rng.fill_bytes(&mut nonce);
        attempts += 1;
        if target.accepts(&share_digest(&nonce, cookie)) && !shares.iter().any(|s| s.nonce == nonce)
        {
            shares.push(Share { nonce });
        }
        if attempts.is_multiple_of(1024) {
            if let Some(dl) = deadline {
                if Instant::now() >= dl {
                    return None;
                }
            }
        }
    }
    Some(Solution { shares, attempts })
}

/// Why a share set was rejected.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ShareError {
    #[error("expected {expected} shares, got {got}")]
    CountMismatch { expected: u32, got: usize },
    #[error("share {index} repeats an earlier nonce")]
    DuplicateNonce { index: usize },
    #[error("share {index} does not meet the target")]
    AboveTarget { index: usize },
}

/// Accept iff there are exactly `q` pairwise-distinct shares, all meeting
/// the target of `d` for this cookie.
pub fn verify_shares(
    shares: &[Share],
    cookie: &[u8; 32],
    d: &Difficulty,
    q: u32,
) -> Result<(), ShareError> {
    if shares.len() != q as usize {
        return Err(ShareError::CountMismatch {
            expected: q,
            got: shares.len(),
        });
    }
    let mut seen = HashSet::with_capacity(shares.len());
    for (index, s) in shares.iter().enumerate() {
        if !seen.insert(s.nonce) {
            return Err(ShareError::DuplicateNonce { index });
        }
    }
    let target = difficulty_to_target(d);
    match shares.iter().position(|s| !s.meets(cookie, &target)) {
        Some(index) => Err(ShareError::AboveTarget { index }),
        None => Ok(()),
    }
}

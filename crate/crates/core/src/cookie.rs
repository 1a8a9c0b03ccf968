//! Stateless puzzle issuance and verification.
//!
//! A puzzle cookie is `HMAC-SHA-256(K, frame(U, D, S, A, timeout, Δ))`. The
//! service never stores issued puzzles: on submission it recomputes the
//! cookie from the echoed fields and its key, so any change to the user,
//! device, subject, activity digest, timeout or difficulty is caught.
//!
//! # Framing
//!
//! Each of the six fields is written as a 32-bit big-endian byte length
//! followed by the bytes, in the order user, device, subject, activity
//! digest, timeout, difficulty. Ids are UTF-8. The digest is 32 raw bytes.
//! The timeout is a `u64` big-endian count of milliseconds since the Unix
//! epoch. The difficulty is 32 bytes big-endian. Ids may be at most 65536
//! bytes.

use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::error::CookieError;
use crate::puzzle::{double_hash, verify_shares, Difficulty, Hashrate, Share, ShareError};

type HmacSha256 = Hmac<Sha256>;

/// Longest id accepted in the cookie frame.
pub const MAX_ID_BYTES: usize = 1 << 16;

/// 32-byte HMAC key held only by the service.
#[derive(Clone, PartialEq, Eq)]
pub struct ServiceKey([u8; 32]);

impl ServiceKey {
    pub fn new(bytes: [u8; 32]) -> Self {
        ServiceKey(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, CookieError> {
        let s = s.trim();
        if s.len() != 64 {
            return Err(CookieError::BadKey);
        }
        let mut k = [0u8; 32];
        hex::decode_to_slice(s, &mut k).map_err(|_| CookieError::BadKey)?;
        Ok(ServiceKey(k))
    }

    pub fn generate() -> Self {
        use rand::TryRngCore;
        let mut k = [0u8; 32];
        rand::rngs::OsRng
            .try_fill_bytes(&mut k)
            .expect("os randomness");
        ServiceKey(k)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl std::fmt::Debug for ServiceKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ServiceKey(..)")
    }
}

/// The authenticator Γ.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PuzzleCookie(pub [u8; 32]);

impl std::fmt::Debug for PuzzleCookie {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PuzzleCookie({})", hex::encode(self.0))
    }
}

impl TryFrom<String> for PuzzleCookie {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        decode_hex32(&s).map(PuzzleCookie)
    }
}

impl From<PuzzleCookie> for String {
    fn from(c: PuzzleCookie) -> String {
        hex::encode(c.0)
    }
}

pub(crate) fn decode_hex32(s: &str) -> Result<[u8; 32], String> {
    let mut out = [0u8; 32];
    hex::decode_to_slice(s.trim(), &mut out).map_err(|_| format!("expected 64 hex chars, got {s:?}"))?;
    Ok(out)
}

/// Serde adapter for 32-byte values as hex strings.
pub mod hex32 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        super::decode_hex32(&s).map_err(serde::de::Error::custom)
    }
}

/// Who did what, where, and when the puzzle was issued.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityDescriptor {
    pub user_id: String,
    pub device_id: String,
    pub subject_id: String,
    #[serde(with = "hex32")]
    pub activity_digest: [u8; 32],
    /// Milliseconds since the Unix epoch.
    pub issued_at: u64,
}

impl ActivityDescriptor {
    pub fn new(
        user_id: impl Into<String>,
        device_id: impl Into<String>,
        subject_id: impl Into<String>,
        activity: &[u8],
        issued_at: u64,
    ) -> Self {
        ActivityDescriptor {
            user_id: user_id.into(),
            device_id: device_id.into(),
            subject_id: subject_id.into(),
            activity_digest: double_hash(activity),
            issued_at,
        }
    }
}

/// Build the cookie frame.
pub fn encode_cookie_input(
    user_id: &str,
    device_id: &str,
    subject_id: &str,
    activity_digest: &[u8; 32],
    timeout: u64,
    difficulty: &Difficulty,
) -> Result<Vec<u8>, CookieError> {
    let ids = [("user_id", user_id), ("device_id", device_id), ("subject_id", subject_id)];
    for (field, v) in ids {
        if v.len() > MAX_ID_BYTES {
            return Err(CookieError::FieldTooLong { field, len: v.len() });
        }
    }
    let cap = 4 * 6 + user_id.len() + device_id.len() + subject_id.len() + 32 + 8 + 32;
    let mut out = Vec::with_capacity(cap);
    let mut put = |bytes: &[u8]| {
        out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        out.extend_from_slice(bytes);
    };
    put(user_id.as_bytes());
    put(device_id.as_bytes());
    put(subject_id.as_bytes());
    put(activity_digest);
    put(&timeout.to_be_bytes());
    put(&difficulty.to_be_bytes());
    Ok(out)
}

fn mac_for(
    key: &ServiceKey,
    desc: &ActivityDescriptor,
    timeout: u64,
    difficulty: &Difficulty,
) -> Result<HmacSha256, CookieError> {
    let frame = encode_cookie_input(
        &desc.user_id,
        &desc.device_id,
        &desc.subject_id,
        &desc.activity_digest,
        timeout,
        difficulty,
    )?;
    let mut mac = HmacSha256::new_from_slice(&key.0).expect("hmac takes any key length");
    mac.update(&frame);
    Ok(mac)
}

pub fn compute_cookie(
    key: &ServiceKey,
    desc: &ActivityDescriptor,
    timeout: u64,
    difficulty: &Difficulty,
) -> Result<PuzzleCookie, CookieError> {
    let tag = mac_for(key, desc, timeout, difficulty)?.finalize().into_bytes();
    let mut out = [0u8; 32];
    out.copy_from_slice(&tag);
    Ok(PuzzleCookie(out))
}

/// The challenge handed to a device.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Puzzle {
    pub cookie: PuzzleCookie,
    pub difficulty: Difficulty,
    /// Milliseconds since the Unix epoch.
    pub timeout: u64,
    pub shares_required: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Accepted,
    BadCookie,
    BadShares,
    CountMismatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: VerdictStatus,
    /// When the activity may be published; present only when accepted.
    pub post_at: Option<u64>,
    /// `2qΔ/τ'` from this submission, when `τ' > 0`.
    pub measured_hashrate: Option<f64>,
    /// Device estimate after correction, filled in by the service.
    pub updated_hashrate: Option<Hashrate>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detail: Option<String>,
}

impl Verdict {
    pub(crate) fn rejected(status: VerdictStatus, detail: impl Into<String>) -> Self {
        Verdict {
            status,
            post_at: None,
            measured_hashrate: None,
            updated_hashrate: None,
            detail: Some(detail.into()),
        }
    }

    pub fn is_accepted(&self) -> bool {
        self.status == VerdictStatus::Accepted
    }
}

/// Issues and checks puzzles under one service key.
#[derive(Clone, Debug)]
pub struct Puzzler {
    key: ServiceKey,
    shares_required: u32,
    /// How far a stored timeout may run ahead of the clock before new work
    /// is refused.
    max_backlog_ms: Option<u64>,
}

impl Puzzler {
    pub fn new(key: ServiceKey, shares_required: u32) -> Self {
        Puzzler {
            key,
            shares_required: shares_required.max(1),
            max_backlog_ms: None,
        }
    }

    pub fn with_max_backlog(mut self, max_backlog_ms: Option<u64>) -> Self {
        self.max_backlog_ms = max_backlog_ms;
        self
    }

    pub fn shares_required(&self) -> u32 {
        self.shares_required
    }

    pub fn key(&self) -> &ServiceKey {
        &self.key
    }

    /// `floor(η · τ / 2q)`, at least 1.
    pub fn difficulty_for(&self, hashrate: Hashrate, penalty_ms: u64) -> Difficulty {
        let tau = penalty_ms as f64 / 1000.0;
        Difficulty::from_f64_clamped(hashrate.hps() * tau / (2.0 * self.shares_required as f64))
    }

    /// Issue a puzzle and advance `stored_timeout` by the penalty.
    ///
    /// A stored timeout in the past restarts from `now`, so idle time is not
    /// banked against future penalties.
    pub fn build_puzzle(
        &self,
        desc: &ActivityDescriptor,
        hashrate: Hashrate,
        penalty_ms: u64,
        stored_timeout: &mut u64,
        now: u64,
    ) -> Result<Puzzle, CookieError> {
        for (field, v) in [
            ("user_id", &desc.user_id),
            ("device_id", &desc.device_id),
            ("subject_id", &desc.subject_id),
        ] {
            if v.is_empty() {
                return Err(CookieError::EmptyField(field));
            }
        }
        let old = (*stored_timeout).max(now);
        if let Some(cap) = self.max_backlog_ms {
            if old > now.saturating_add(cap) {
                return Err(CookieError::ClockSkew {
                    retry_after_ms: old - now - cap,
                });
            }
        }
        let difficulty = self.difficulty_for(hashrate, penalty_ms);
        let timeout = old.saturating_add(penalty_ms.max(1));
        let cookie = compute_cookie(&self.key, desc, timeout, &difficulty)?;
        *stored_timeout = timeout;
        Ok(Puzzle {
            cookie,
            difficulty,
            timeout,
            shares_required: self.shares_required,
        })
    }

    /// Whether `cookie` authenticates these fields under our key.
    pub fn authenticate(
        &self,
        desc: &ActivityDescriptor,
        timeout: u64,
        difficulty: &Difficulty,
        cookie: &PuzzleCookie,
    ) -> Result<(), String> {
        let mac = mac_for(&self.key, desc, timeout, difficulty).map_err(|e| e.to_string())?;
        mac.verify_slice(&cookie.0)
            .map_err(|_| "cookie does not authenticate".to_string())
    }

    /// Verdict for a solution whose cookie and work have been checked:
    /// publish at `max(now, timeout)` and report `2qΔ/τ'` with
    /// `τ' = now - issued_at`.
    pub fn accepted(&self, desc: &ActivityDescriptor, timeout: u64, difficulty: &Difficulty, now: u64) -> Verdict {
        let elapsed_ms = now.saturating_sub(desc.issued_at);
        let measured_hashrate = (elapsed_ms > 0).then(|| {
            2.0 * self.shares_required as f64 * difficulty.to_f64() / (elapsed_ms as f64 / 1000.0)
        });
        Verdict {
            status: VerdictStatus::Accepted,
            post_at: Some(now.max(timeout)),
            measured_hashrate,
            updated_hashrate: None,
            detail: None,
        }
    }

    /// Check a submitted solution. Consults nothing but the key.
    pub fn verify_solution(
        &self,
        desc: &ActivityDescriptor,
        timeout: u64,
        difficulty: &Difficulty,
        cookie: &PuzzleCookie,
        shares: &[Share],
        now: u64,
    ) -> Verdict {
        if let Err(e) = self.authenticate(desc, timeout, difficulty, cookie) {
            return Verdict::rejected(VerdictStatus::BadCookie, e);
        }
        match verify_shares(shares, &cookie.0, difficulty, self.shares_required) {
            Ok(()) => self.accepted(desc, timeout, difficulty, now),
            Err(e @ ShareError::CountMismatch { .. }) => {
                Verdict::rejected(VerdictStatus::CountMismatch, e.to_string())
            }
            Err(e) => Verdict::rejected(VerdictStatus::BadShares, e.to_string()),
        }
    }
}

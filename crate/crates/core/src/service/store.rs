//! Durable state: an append-only journal plus a periodic snapshot.
//!
//! The data directory holds two files:
//!
//! - `journal.jsonl`: one `{"seq": n, "event": {...}}` object per line.
//! - `snapshot.json`: the full state as of journal sequence `seq`.
//!
//! On open the snapshot is loaded, then every journal entry with a larger
//! sequence number is applied in order. A torn final line is dropped. A
//! snapshot is written to a temporary file and renamed into place before
//! the journal is truncated, so a crash at any point recovers to the last
//! logged event.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::graph::{ActivityHistory, CoActivityGraph};
use crate::hashrate::DeviceRecord;

use super::{FraudsterCluster, PendingActivity, PublishedActivity, UserRecord};

pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

/// A state change, in the order it was applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    UserRegistered {
        user: UserRecord,
    },
    DeviceRegistered {
        user_id: String,
        device: DeviceRecord,
    },
    /// The account joined the subject's graph and the activity entered its
    /// history.
    ActivityObserved {
        user_id: String,
        subject_id: String,
        category: String,
        at: u64,
    },
    /// The owning user's or cluster's timeout moved to `timeout`.
    TimeoutAdvanced {
        user_id: String,
        cluster_id: Option<String>,
        timeout: u64,
    },
    PendingAdded {
        pending: PendingActivity,
    },
    SolutionAccepted {
        published: PublishedActivity,
        /// The device record after correction, when it changed.
        device: Option<DeviceRecord>,
    },
    ClusterAssigned {
        cluster: FraudsterCluster,
    },
    PendingExpired {
        expired: Vec<PendingActivity>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    seq: u64,
    event: Event,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Snapshot {
    /// Journal sequence number this snapshot includes.
    pub seq: u64,
    pub users: Vec<UserRecord>,
    pub clusters: Vec<FraudsterCluster>,
    pub graphs: Vec<CoActivityGraph>,
    pub history: ActivityHistory,
    pub pending: Vec<PendingActivity>,
    pub published: Vec<PublishedActivity>,
}

/// Open handle on a data directory.
#[derive(Debug)]
pub struct Journal {
    dir: PathBuf,
    out: BufWriter<File>,
    seq: u64,
    since_snapshot: u64,
    fsync: bool,
}

/// What was found on disk.
pub struct Recovered {
    pub journal: Journal,
    pub snapshot: Option<Snapshot>,
    pub events: Vec<Event>,
}

fn persist(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Persist(e.to_string())
}

impl Journal {
    pub fn open(dir: &Path, fsync: bool) -> Result<Recovered, ServiceError> {
        fs::create_dir_all(dir)?;
        let snap_path = dir.join(SNAPSHOT_FILE);
        let snapshot: Option<Snapshot> = if snap_path.exists() {
            let f = BufReader::new(File::open(&snap_path)?);
            Some(serde_json::from_reader(f).map_err(persist)?)
        } else {
            None
        };
        let base = snapshot.as_ref().map_or(0, |s| s.seq);
        let mut seq = base;
        let mut events = Vec::new();
        let jpath = dir.join(JOURNAL_FILE);
        if jpath.exists() {
            let lines: Vec<String> = BufReader::new(File::open(&jpath)?).lines().collect::<Result<_, _>>()?;
            let last = lines.len().saturating_sub(1);
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Entry>(line) {
                    Ok(e) if e.seq <= base => {}
                    Ok(e) => {
                        seq = e.seq;
                        events.push(e.event);
                    }
                    Err(err) if i == last => {
                        log::warn!("dropping torn journal tail: {err}");
                    }
                    Err(err) => return Err(persist(format!("journal line {}: {err}", i + 1))),
                }
            }
        }
        let since_snapshot = events.len() as u64;
        let out = BufWriter::new(OpenOptions::new().create(true).append(true).open(&jpath)?);
        Ok(Recovered {
            journal: Journal {
                dir: dir.to_path_buf(),
                out,
                seq,
                since_snapshot,
                fsync,
            },
            snapshot,
            events,
        })
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn since_snapshot(&self) -> u64 {
        self.since_snapshot
    }

    pub fn append(&mut self, event: &Event) -> Result<(), ServiceError> {
        let entry = EntryRef {
            seq: self.seq + 1,
            event,
        };
        serde_json::to_writer(&mut self.out, &entry).map_err(persist)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        if self.fsync {
            self.out.get_ref().sync_data()?;
        }
        self.seq += 1;
        self.since_snapshot += 1;
        Ok(())
    }

    /// Write `snap` (whose `seq` is overwritten with the current sequence)
    /// and truncate the journal.
    pub fn compact(&mut self, mut snap: Snapshot) -> Result<(), ServiceError> {
        snap.seq = self.seq;
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer(&mut w, &snap).map_err(persist)?;
            w.flush()?;
            w.get_ref().sync_all()?;
        }
        fs::rename(&tmp, self.dir.join(SNAPSHOT_FILE))?;
        let jpath = self.dir.join(JOURNAL_FILE);
        File::create(&jpath)?;
        self.out = BufWriter::new(OpenOptions::new().append(true).open(&jpath)?);
        self.since_snapshot = 0;
        Ok(())
    }
}

#[derive(Serialize)]
struct EntryRef<'a> {
    seq: u64,
    event: &'a Event,
}

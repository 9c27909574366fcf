//! Live sessions, their expiry and their snapshot file.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use polyfind_core::dialogue::DialogueState;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, OwnedMutexGuard};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub state: DialogueState,
    pub created: DateTime<Utc>,
    pub updated: DateTime<Utc>,
}

impl SessionRecord {
    pub fn id(&self) -> &str {
        &self.state.session_id
    }

    fn expired(&self, now: DateTime<Utc>, ttl: Duration) -> bool {
        (now - self.updated).to_std().is_ok_and(|idle| idle >= ttl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum AcquireError {
    #[error("unknown or expired session")]
    NotFound,
    #[error("another turn is in progress for this session")]
    Busy,
}

/// 128 random bits from the operating system, hex encoded.
pub fn new_token() -> String {
    let mut bytes = [0u8; 16];
    OsRng.fill_bytes(&mut bytes);
    format!("{:032x}", u128::from_be_bytes(bytes))
}

type Slot = Arc<Mutex<SessionRecord>>;

pub struct SessionStore {
    sessions: RwLock<HashMap<String, Slot>>,
    ttl: Duration,
}

impl SessionStore {
    pub fn new(ttl: Duration) -> Self {
        SessionStore {
            sessions: RwLock::new(HashMap::new()),
            ttl,
        }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    pub fn len(&self) -> usize {
        self.sessions.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, record: SessionRecord) {
        let id = record.id().to_string();
        self.sessions.write().insert(id, Arc::new(Mutex::new(record)));
    }

    fn slot(&self, id: &str) -> Option<Slot> {
        self.sessions.read().get(id).cloned()
    }

    fn remove(&self, id: &str) {
        self.sessions.write().remove(id);
    }

    /// Exclusive access for one turn. Never waits: a session already in a
    /// turn is reported busy.
    pub fn try_acquire(&self, id: &str) -> Result<OwnedMutexGuard<SessionRecord>, AcquireError> {
        let slot = self.slot(id).ok_or(AcquireError::NotFound)?;
        let guard = slot.try_lock_owned().map_err(|_| AcquireError::Busy)?;
        if guard.expired(Utc::now(), self.ttl) {
            drop(guard);
            self.remove(id);
            return Err(AcquireError::NotFound);
        }
        Ok(guard)
    }

    /// A copy of the session, waiting for a running turn to finish.
    pub async fn read(&self, id: &str) -> Result<SessionRecord, AcquireError> {
        let slot = self.slot(id).ok_or(AcquireError::NotFound)?;
        let record = slot.lock().await.clone();
        if record.expired(Utc::now(), self.ttl) {
            self.remove(id);
            return Err(AcquireError::NotFound);
        }
        Ok(record)
    }

    /// Drops idle sessions; sessions in a turn are kept. Returns how many
    /// were removed.
    pub fn sweep(&self, now: DateTime<Utc>) -> usize {
        let mut map = self.sessions.write();
        let before = map.len();
        map.retain(|_, slot| match slot.try_lock() {
            Ok(r) => !r.expired(now, self.ttl),
            Err(_) => true,
        });
        before - map.len()
    }

    /// Copies of every live session, in id order.
    pub async fn records(&self) -> Vec<SessionRecord> {
        let mut slots: Vec<(String, Slot)> = self.sessions.read().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        slots.sort_by(|a, b| a.0.cmp(&b.0));
        let mut out = Vec::with_capacity(slots.len());
        for (_, slot) in slots {
            out.push(slot.lock().await.clone());
        }
        out
    }

    /// Writes all sessions as JSON lines, replacing `path` atomically.
    pub async fn save(&self, path: &Path) -> anyhow::Result<usize> {
        let records = self.records().await;
        let tmp = path.with_extension("tmp");
        {
            let mut w = std::io::BufWriter::new(
                std::fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?,
            );
            for r in &records {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path).with_context(|| format!("replacing {}", path.display()))?;
        Ok(records.len())
    }

    /// Restores sessions from a snapshot, skipping expired ones and those
    /// `keep` rejects. A missing file restores nothing.
    pub fn load(&self, path: &Path, keep: impl Fn(&SessionRecord) -> bool) -> anyhow::Result<usize> {
        let file = match std::fs::File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(e).with_context(|| format!("opening {}", path.display())),
        };
        let now = Utc::now();
        let mut restored = 0;
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SessionRecord =
                serde_json::from_str(&line).with_context(|| format!("{}:{}: bad session record", path.display(), i + 1))?;
            if !record.expired(now, self.ttl) && keep(&record) {
                self.insert(record);
                restored += 1;
            }
        }
        Ok(restored)
    }
}

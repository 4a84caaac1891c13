use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;

/// session id -> question id -> attempts used
type Counters = BTreeMap<String, BTreeMap<String, u32>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("all {max} attempts used")]
    Exhausted { max: u32 },
}

/// Per-session attempt counters, optionally snapshotted to a JSON file.
#[derive(Debug, Default)]
pub struct SessionStore {
    counters: Mutex<Counters>,
    snapshot: Option<PathBuf>,
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads counters from `path` if it exists; [`save`](Self::save) writes
    /// them back there.
    pub fn with_snapshot(path: impl Into<PathBuf>) -> io::Result<Self> {
        let path = path.into();
        let counters = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Counters::new(),
            Err(e) => return Err(e),
        };
        Ok(Self {
            counters: Mutex::new(counters),
            snapshot: Some(path),
        })
    }

    pub fn snapshot_path(&self) -> Option<&Path> {
        self.snapshot.as_deref()
    }

    /// Takes one attempt if any remain and returns the new count.
    pub fn reserve(&self, session: &str, question: &str, max: u32) -> Result<u32, SessionError> {
        let mut counters = self.counters.lock().unwrap();
        let used = counters
            .entry(session.to_string())
            .or_default()
            .entry(question.to_string())
            .or_insert(0);
        if *used >= max {
            return Err(SessionError::Exhausted { max });
        }
        *used += 1;
        Ok(*used)
    }

    /// Gives back an attempt taken by [`reserve`](Self::reserve).
    pub fn refund(&self, session: &str, question: &str) {
        let mut counters = self.counters.lock().unwrap();
        if let Some(used) = counters.get_mut(session).and_then(|s| s.get_mut(question)) {
            *used = used.saturating_sub(1);
        }
    }

    pub fn used(&self, session: &str, question: &str) -> u32 {
        let counters = self.counters.lock().unwrap();
        counters
            .get(session)
            .and_then(|s| s.get(question))
            .copied()
            .unwrap_or(0)
    }

    pub fn save(&self) -> io::Result<()> {
        let Some(path) = &self.snapshot else {
            return Ok(());
        };
        let text = serde_json::to_string_pretty(&*self.counters.lock().unwrap()).map_err(io::Error::other)?;
        std::fs::write(path, text + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserve_stops_at_max_and_refund_restores() {
        let s = SessionStore::in_memory();
        assert_eq!(s.reserve("a", "q", 2), Ok(1));
        assert_eq!(s.reserve("a", "q", 2), Ok(2));
        assert_eq!(s.reserve("a", "q", 2), Err(SessionError::Exhausted { max: 2 }));
        s.refund("a", "q");
        assert_eq!(s.used("a", "q"), 1);
        assert_eq!(s.used("b", "q"), 0);
        s.refund("nobody", "q");
    }

    #[test]
    fn concurrent_reserves_never_overshoot() {
        let s = std::sync::Arc::new(SessionStore::in_memory());
        let handles: Vec<_> = (0..16)
            .map(|_| {
                let s = s.clone();
                std::thread::spawn(move || (0..10).filter(|_| s.reserve("a", "q", 20).is_ok()).count())
            })
            .collect();
        let granted: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
        assert_eq!(granted, 20);
        assert_eq!(s.used("a", "q"), 20);
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sessions.json");
        let s = SessionStore::with_snapshot(&path).unwrap();
        s.reserve("a", "A-Q1", 20).unwrap();
        s.reserve("a", "A-Q1", 20).unwrap();
        s.save().unwrap();
        let back = SessionStore::with_snapshot(&path).unwrap();
        assert_eq!(back.used("a", "A-Q1"), 2);
        SessionStore::in_memory().save().unwrap();
    }
}

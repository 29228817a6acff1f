use std::collections::HashSet;
use std::sync::RwLock;

use super::AgentError;
use crate::envelope::{dedup_key, RecordId};
use crate::ids::SimTime;
use crate::measurement::Measurement;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveRecord {
    pub record_id: RecordId,
    pub payload: Measurement,
    pub stored_at: SimTime,
}

#[derive(Default)]
struct Inner {
    records: Vec<ArchiveRecord>,
    ids: HashSet<RecordId>,
}

/// An agent's local measurement archive. Append-only, keyed by content hash.
#[derive(Default)]
pub struct Archive {
    inner: RwLock<Inner>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `payload`; storing an identical payload again returns the
    /// original record unchanged.
    pub fn store(
        &self,
        payload: Measurement,
        stored_at: SimTime,
    ) -> Result<ArchiveRecord, AgentError> {
        let record_id = dedup_key(&payload);
        let mut inner = self
            .inner
            .write()
            .map_err(|_| AgentError::Storage("archive lock poisoned".into()))?;
        if inner.ids.contains(&record_id) {
            let existing = inner
                .records
                .iter()
                .find(|r| r.record_id == record_id)
                .expect("id index and records agree");
            return Ok(existing.clone());
        }
        let rec = ArchiveRecord {
            record_id,
            payload,
            stored_at,
        };
        inner.ids.insert(record_id);
        inner.records.push(rec.clone());
        Ok(rec)
    }

    /// Records with `stored_at >= t`, in the order they were stored.
    pub fn list_since(&self, t: SimTime) -> Result<Vec<ArchiveRecord>, AgentError> {
        let inner = self
            .inner
            .read()
            .map_err(|_| AgentError::Storage("archive lock poisoned".into()))?;
        Ok(inner
            .records
            .iter()
            .filter(|r| r.stored_at >= t)
            .cloned()
            .collect())
    }

    pub fn latest_stored_at(&self) -> Option<SimTime> {
        let inner = self.inner.read().ok()?;
        inner.records.iter().map(|r| r.stored_at).max()
    }

    pub fn len(&self) -> usize {
        self.inner.read().map(|i| i.records.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::HostId;
    use crate::measurement::LatencySample;

    fn sample(start: SimTime) -> Measurement {
        LatencySample {
            src: HostId::new("a"),
            dst: HostId::new("b"),
            start_time: start,
            packets_sent: 10,
            packets_lost: 10,
            delay: None,
        }
        .into()
    }

    #[test]
    fn idempotent_store() {
        let a = Archive::new();
        let r1 = a.store(sample(0), 5).unwrap();
        let r2 = a.store(sample(0), 9).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn list_since_in_order() {
        let a = Archive::new();
        for (i, t) in [10, 20, 30].into_iter().enumerate() {
            a.store(sample(i as u64), t).unwrap();
        }
        let all = a.list_since(0).unwrap();
        assert_eq!(
            all.iter().map(|r| r.stored_at).collect::<Vec<_>>(),
            vec![10, 20, 30]
        );
        assert_eq!(a.list_since(20).unwrap().len(), 2);
        assert!(a.list_since(31).unwrap().is_empty());
        assert_eq!(a.latest_stored_at(), Some(30));
    }

    #[test]
    fn concurrent_append_and_read() {
        let a = std::sync::Arc::new(Archive::new());
        std::thread::scope(|s| {
            for w in 0..4u64 {
                let a = a.clone();
                s.spawn(move || {
                    for i in 0..250 {
                        a.store(sample(w * 1000 + i), i).unwrap();
                    }
                });
            }
            let a = a.clone();
            s.spawn(move || {
                for _ in 0..50 {
                    let _ = a.list_since(0).unwrap();
                }
            });
        });
        assert_eq!(a.len(), 1000);
    }
}

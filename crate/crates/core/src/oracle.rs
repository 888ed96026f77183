//! Brute-force recount of a run from its event log alone.
//!
//! No simulator state is consulted. A file counts as encrypted when its last
//! logged write is malicious; it counts as backed up when a successful
//! `service` record for it precedes its first malicious write. Drops are
//! counted directly and each one is checked against the queue occupancy
//! implied by the enqueue/service records before it.

use std::collections::{BTreeMap, BTreeSet};

use crate::events::{EventKind, EventLog};
use crate::open_path::Actor;
use crate::vfs::NodeId;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OracleCounts {
    pub encrypted: BTreeSet<NodeId>,
    pub backed: BTreeSet<NodeId>,
    pub drops: u64,
    /// Drop records that happened while the queue still had room.
    pub spurious_drops: Vec<usize>,
}

impl OracleCounts {
    pub fn b(&self) -> u64 {
        self.backed.len() as u64
    }

    pub fn e(&self) -> u64 {
        self.encrypted.len() as u64
    }
}

pub fn replay(log: &EventLog, capacity: Option<usize>) -> OracleCounts {
    let mut last_writer: BTreeMap<NodeId, Actor> = BTreeMap::new();
    let mut first_malicious_write: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut first_backup: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut occupancy = 0usize;
    let mut counts = OracleCounts::default();

    for (i, rec) in log.records().iter().enumerate() {
        match rec.kind {
            EventKind::Write => {
                let (Some(node), Some(actor)) = (rec.node_id, rec.actor) else {
                    continue;
                };
                last_writer.insert(node, actor);
                if actor == Actor::Malicious {
                    first_malicious_write.entry(node).or_insert(i);
                }
            }
            EventKind::Enqueue => occupancy += 1,
            EventKind::Service => {
                occupancy = occupancy.saturating_sub(1);
                if rec.outcome.as_deref() == Some("created") {
                    if let Some(node) = rec.node_id {
                        first_backup.entry(node).or_insert(i);
                    }
                }
            }
            EventKind::Drop => {
                counts.drops += 1;
                if capacity.is_none_or(|c| occupancy < c) {
                    counts.spurious_drops.push(i);
                }
            }
            _ => {}
        }
    }

    counts.encrypted = last_writer
        .iter()
        .filter(|(_, a)| **a == Actor::Malicious)
        .map(|(n, _)| *n)
        .collect();
    counts.backed = counts
        .encrypted
        .iter()
        .filter(
            |n| match (first_backup.get(n), first_malicious_write.get(n)) {
                (Some(backup), Some(write)) => backup < write,
                _ => false,
            },
        )
        .copied()
        .collect();
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::LogRecord;

    fn write(tick: u64, node: u64, actor: Actor) -> LogRecord {
        LogRecord::new(tick, EventKind::Write)
            .node(NodeId(node))
            .actor(actor)
    }

    fn service(tick: u64, node: u64) -> LogRecord {
        LogRecord::new(tick, EventKind::Service)
            .node(NodeId(node))
            .outcome("created")
    }

    #[test]
    fn counts_from_ordering() {
        let mut log = EventLog::new();
        log.push(LogRecord::new(0, EventKind::Enqueue).node(NodeId(1)));
        log.push(service(0, 1));
        log.push(write(0, 1, Actor::Malicious));
        log.push(write(1, 2, Actor::Malicious));
        log.push(LogRecord::new(1, EventKind::Enqueue).node(NodeId(2)));
        log.push(service(2, 2));
        log.push(write(2, 3, Actor::Benign));
        let c = replay(&log, None);
        assert_eq!(c.encrypted, BTreeSet::from([NodeId(1), NodeId(2)]));
        assert_eq!(c.backed, BTreeSet::from([NodeId(1)]));
        assert_eq!(c.drops, 0);
    }

    #[test]
    fn flags_drops_below_capacity() {
        let mut log = EventLog::new();
        log.push(LogRecord::new(0, EventKind::Enqueue).node(NodeId(1)));
        log.push(LogRecord::new(0, EventKind::Drop).node(NodeId(2)));
        assert!(replay(&log, Some(1)).spurious_drops.is_empty());
        assert_eq!(replay(&log, Some(2)).spurious_drops, vec![1]);
    }
}

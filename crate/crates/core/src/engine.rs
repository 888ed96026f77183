//! Real-time open-triggered backup engine.
//!
//! A hook event marks a protected file as due for backup; the copy itself is
//! taken later by [`Rofbs::service_queue`], so whatever the file holds at
//! service time is what the backup captures. Backups are `.tmp` siblings of the
//! original and are renamed back over it once the writer has been killed.

use std::collections::{BTreeMap, HashSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{EventKind, EventLog, LogRecord};
use crate::open_path::{representative_path, HookContext};
use crate::vfs::{NodeId, VfsError, VfsImage, WriterClass};

pub const BACKUP_SUFFIX: &str = ".tmp";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FragmentError {
    #[error("no path fragments")]
    Empty,
    #[error("fragment {index} ({fragment:?}) is not a single path component")]
    BadComponent { index: usize, fragment: String },
}

/// Rebuilds an absolute path from components delivered leaf-first.
/// A trailing `""` or `"/"` is accepted as the root dentry's name.
pub fn reassemble_path<S: AsRef<str>>(fragments: &[S]) -> Result<String, FragmentError> {
    let mut parts: Vec<&str> = fragments.iter().map(AsRef::as_ref).collect();
    if matches!(parts.last(), Some(&"") | Some(&"/")) {
        parts.pop();
    }
    if parts.is_empty() {
        return Err(FragmentError::Empty);
    }
    for (index, frag) in parts.iter().enumerate() {
        if frag.is_empty() || frag.contains('/') {
            return Err(FragmentError::BadComponent {
                index,
                fragment: frag.to_string(),
            });
        }
    }
    let mut path = String::new();
    for frag in parts.iter().rev() {
        path.push('/');
        path.push_str(frag);
    }
    Ok(path)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("node {0} not found")]
    NotFound(NodeId),
    #[error("protected directory {0:?} is not an absolute path")]
    BadPolicy(String),
    #[error(transparent)]
    Vfs(#[from] VfsError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackupPolicy {
    protected_directories: Vec<String>,
}

impl BackupPolicy {
    pub fn new<I, S>(dirs: I) -> Result<Self, EngineError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut protected_directories = Vec::new();
        for d in dirs {
            let mut d: String = d.into();
            if !d.starts_with('/') {
                return Err(EngineError::BadPolicy(d));
            }
            while d.len() > 1 && d.ends_with('/') {
                d.pop();
            }
            protected_directories.push(d);
        }
        protected_directories.sort();
        protected_directories.dedup();
        Ok(Self {
            protected_directories,
        })
    }

    pub fn protected_directories(&self) -> &[String] {
        &self.protected_directories
    }

    pub fn backup_suffix(&self) -> &'static str {
        BACKUP_SUFFIX
    }

    /// True when `path` is a protected directory or lies below one.
    pub fn protects(&self, path: &str) -> bool {
        self.protected_directories.iter().any(|dir| {
            dir == "/"
                || path == dir
                || (path.starts_with(dir.as_str()) && path.as_bytes().get(dir.len()) == Some(&b'/'))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackupArtifact {
    pub origin_node: NodeId,
    pub origin_path: String,
    pub captured_version: u64,
    pub captured_writer: Option<WriterClass>,
    pub backup_path: String,
    pub artifact_node: NodeId,
    pub captured_at: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BackupLedger {
    artifacts: BTreeMap<NodeId, BackupArtifact>,
}

impl BackupLedger {
    pub fn is_backed_up(&self, node: NodeId) -> bool {
        self.artifacts.contains_key(&node)
    }

    pub fn artifact(&self, node: NodeId) -> Option<&BackupArtifact> {
        self.artifacts.get(&node)
    }

    pub fn artifacts(&self) -> impl Iterator<Item = &BackupArtifact> {
        self.artifacts.values()
    }

    pub fn backed_up(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.artifacts.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.artifacts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.artifacts.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    NotProtected,
    AlreadyBackedUp,
    NotRegular,
    ArtifactPathOccupied,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackupDecision {
    Created(BackupArtifact),
    Skipped(SkipReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotRestoredReason {
    NotMalicious,
    NoBackup,
    ArtifactMissing,
    PathOccupied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestoreDecision {
    Restored,
    NotRestored(NotRestoredReason),
}

/// Backs up `node` if it is protected and has no backup yet, capturing its
/// current content as a `<path>.tmp` sibling.
pub fn create_backup_file(
    policy: &BackupPolicy,
    ledger: &mut BackupLedger,
    image: &mut VfsImage,
    node: NodeId,
    now: u64,
) -> Result<BackupDecision, EngineError> {
    let origin = image.node(node).map_err(|_| EngineError::NotFound(node))?;
    let origin_path = representative_path(image, node).map_err(|_| EngineError::NotFound(node))?;
    if !policy.protects(&origin_path) {
        return Ok(BackupDecision::Skipped(SkipReason::NotProtected));
    }
    if ledger.is_backed_up(node) {
        return Ok(BackupDecision::Skipped(SkipReason::AlreadyBackedUp));
    }
    if !origin.is_regular() {
        return Ok(BackupDecision::Skipped(SkipReason::NotRegular));
    }
    let captured_version = origin.live_version();
    let captured_writer = origin.last_writer();
    let backup_path = format!("{origin_path}{BACKUP_SUFFIX}");
    let artifact_node = match image.create_copy(&backup_path, captured_version, captured_writer) {
        Ok(id) => id,
        Err(VfsError::Collision(_)) => {
            return Ok(BackupDecision::Skipped(SkipReason::ArtifactPathOccupied))
        }
        Err(e) => return Err(e.into()),
    };
    let artifact = BackupArtifact {
        origin_node: node,
        origin_path,
        captured_version,
        captured_writer,
        backup_path,
        artifact_node,
        captured_at: now,
    };
    ledger.artifacts.insert(node, artifact.clone());
    Ok(BackupDecision::Created(artifact))
}

/// Puts the backup of `node` back in place once the writer is known to be
/// malicious: the `.tmp` copy replaces the file at its original path.
pub fn restore_backup(
    ledger: &BackupLedger,
    image: &mut VfsImage,
    node: NodeId,
    is_malicious: bool,
) -> RestoreDecision {
    use NotRestoredReason::*;
    if !is_malicious {
        return RestoreDecision::NotRestored(NotMalicious);
    }
    let Some(artifact) = ledger.artifact(node) else {
        return RestoreDecision::NotRestored(NoBackup);
    };
    let Ok(origin) = image.node(node) else {
        return RestoreDecision::NotRestored(ArtifactMissing);
    };
    if image.node(artifact.artifact_node).is_err() {
        return RestoreDecision::NotRestored(ArtifactMissing);
    }
    let moved = origin.path() != artifact.origin_path;
    if moved {
        if let Some(owner) = image.lookup(&artifact.origin_path) {
            if owner != node {
                return RestoreDecision::NotRestored(PathOccupied);
            }
        }
    }
    image
        .remove_node(artifact.artifact_node)
        .expect("artifact presence checked");
    if moved {
        image
            .rename_path(node, &artifact.origin_path)
            .expect("origin path checked free");
    }
    image
        .restore_live_version(node, artifact.captured_version)
        .expect("origin presence checked");
    RestoreDecision::Restored
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackupQueue {
    pending: VecDeque<(NodeId, u64)>,
    queued: HashSet<NodeId>,
    capacity: Option<usize>,
    service_latency: u64,
    dropped: u64,
}

impl BackupQueue {
    /// `capacity == None` means unbounded.
    pub fn new(capacity: Option<usize>, service_latency: u64) -> Self {
        Self {
            pending: VecDeque::new(),
            queued: HashSet::new(),
            capacity: capacity.map(|c| c.max(1)),
            service_latency,
            dropped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.capacity.is_some_and(|c| self.pending.len() >= c)
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.queued.contains(&node)
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn service_latency(&self) -> u64 {
        self.service_latency
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn pending(&self) -> impl Iterator<Item = (NodeId, u64)> + '_ {
        self.pending.iter().copied()
    }

    /// Tail drop: a full queue refuses the new entry.
    fn push(&mut self, node: NodeId, tick: u64) -> bool {
        if self.is_full() {
            self.dropped += 1;
            return false;
        }
        self.pending.push_back((node, tick));
        self.queued.insert(node);
        true
    }

    fn pop_due(&mut self, now: u64) -> Option<(NodeId, u64)> {
        let (_, tick) = *self.pending.front()?;
        if tick.saturating_add(self.service_latency) > now {
            return None;
        }
        let entry = self.pending.pop_front()?;
        self.queued.remove(&entry.0);
        Some(entry)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    pub accuracy: f64,
    pub fpr: f64,
    pub kill_threshold: u32,
}

impl DetectorParams {
    /// Random Forest operating point: 97.2 % accuracy, 0.0068 false-positive rate.
    pub const RANDOM_FOREST: DetectorParams = DetectorParams {
        accuracy: 0.972,
        fpr: 0.0068,
        kill_threshold: 40,
    };

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(format!("accuracy {} outside [0, 1]", self.accuracy));
        }
        if !(0.0..=1.0).contains(&self.fpr) {
            return Err(format!("fpr {} outside [0, 1]", self.fpr));
        }
        if self.kill_threshold == 0 {
            return Err("kill_threshold must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorAction {
    Continue,
    Kill,
}

/// Draws one per-event verdict: true means "classified malicious".
pub fn classify<R: Rng + ?Sized>(params: &DetectorParams, actor: WriterClass, rng: &mut R) -> bool {
    let p = match actor {
        WriterClass::Malicious => params.accuracy,
        WriterClass::Benign => params.fpr,
    };
    rng.random::<f64>() < p
}

/// Per-process detector state: kills after `kill_threshold` consecutive
/// malicious verdicts.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    params: DetectorParams,
    streak: u32,
    classified: u64,
}

impl Detector {
    pub fn new(params: DetectorParams) -> Self {
        Self {
            params,
            streak: 0,
            classified: 0,
        }
    }

    pub fn params(&self) -> &DetectorParams {
        &self.params
    }

    pub fn classified(&self) -> u64 {
        self.classified
    }

    pub fn classify_and_maybe_kill<R: Rng + ?Sized>(
        &mut self,
        actor: WriterClass,
        rng: &mut R,
    ) -> DetectorAction {
        self.classified += 1;
        if classify(&self.params, actor, rng) {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        if self.streak >= self.params.kill_threshold {
            DetectorAction::Kill
        } else {
            DetectorAction::Continue
        }
    }
}

/// Backup engine state for one run.
#[derive(Debug, Clone)]
pub struct Rofbs {
    policy: BackupPolicy,
    ledger: BackupLedger,
    queue: BackupQueue,
}

impl Rofbs {
    pub fn new(policy: BackupPolicy, queue: BackupQueue) -> Self {
        Self {
            policy,
            ledger: BackupLedger::default(),
            queue,
        }
    }

    pub fn policy(&self) -> &BackupPolicy {
        &self.policy
    }

    pub fn ledger(&self) -> &BackupLedger {
        &self.ledger
    }

    pub fn queue(&self) -> &BackupQueue {
        &self.queue
    }

    /// Reacts to one delivered hook context: resolves the path, and queues the
    /// file for backup when it is protected and not already handled.
    pub fn on_hook_event(
        &mut self,
        ctx: &HookContext,
        image: &VfsImage,
        now: u64,
        log: &mut EventLog,
    ) {
        let path = match &ctx.path_fragments {
            Some(frags) => match reassemble_path(frags) {
                Ok(p) => p,
                Err(_) => return,
            },
            None => match ctx.node.map(|n| representative_path(image, n)) {
                Some(Ok(p)) => p,
                _ => return,
            },
        };
        let Some(node) = image.lookup(&path).or(ctx.node) else {
            return;
        };
        if !self.policy.protects(&path)
            || self.ledger.is_backed_up(node)
            || self.queue.contains(node)
        {
            return;
        }
        let kind = if self.queue.push(node, now) {
            EventKind::Enqueue
        } else {
            EventKind::Drop
        };
        log.push(
            LogRecord::new(now, kind)
                .request(ctx.request_id)
                .node(node)
                .path(path),
        );
    }

    /// Takes every backup whose service latency has elapsed, oldest first.
    pub fn service_queue(
        &mut self,
        image: &mut VfsImage,
        now: u64,
        log: &mut EventLog,
    ) -> Vec<BackupDecision> {
        let mut decisions = Vec::new();
        while let Some((node, _)) = self.queue.pop_due(now) {
            let decision =
                match create_backup_file(&self.policy, &mut self.ledger, image, node, now) {
                    Ok(d) => d,
                    Err(_) => {
                        log.push(
                            LogRecord::new(now, EventKind::Service)
                                .node(node)
                                .outcome("skipped:vanished"),
                        );
                        continue;
                    }
                };
            let mut rec = LogRecord::new(now, EventKind::Service).node(node);
            rec = match &decision {
                BackupDecision::Created(a) => rec
                    .path(a.origin_path.clone())
                    .version(a.captured_version)
                    .outcome("created"),
                BackupDecision::Skipped(reason) => {
                    let rec = match image.node(node) {
                        Ok(n) => rec.path(n.path()),
                        Err(_) => rec,
                    };
                    rec.outcome(format!("skipped:{}", skip_name(*reason)))
                }
            };
            log.push(rec);
            decisions.push(decision);
        }
        decisions
    }

    /// Restores `node` from its backup, logging a successful restore.
    pub fn restore(
        &self,
        image: &mut VfsImage,
        node: NodeId,
        is_malicious: bool,
        now: u64,
        log: &mut EventLog,
    ) -> RestoreDecision {
        let decision = restore_backup(&self.ledger, image, node, is_malicious);
        if decision == RestoreDecision::Restored {
            let artifact = self
                .ledger
                .artifact(node)
                .expect("restored implies artifact");
            log.push(
                LogRecord::new(now, EventKind::Restore)
                    .node(node)
                    .path(artifact.origin_path.clone())
                    .version(artifact.captured_version),
            );
        }
        decision
    }
}

fn skip_name(reason: SkipReason) -> &'static str {
    match reason {
        SkipReason::NotProtected => "not_protected",
        SkipReason::AlreadyBackedUp => "already_backed_up",
        SkipReason::NotRegular => "not_regular",
        SkipReason::ArtifactPathOccupied => "artifact_path_occupied",
    }
}

//! Parameterized ransomware workloads.
//!
//! A [`FamilyProfile`] compiles against an image into an [`AttackScript`]: a
//! timed list of directory enumerations, file opens, encrypting writes and
//! extension renames. [`step_actor`] replays the script one tick at a time
//! against a [`World`].

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::DetectorAction;
use crate::open_path::{Actor, OpenFlags, OpenOutcome};
use crate::sim::World;
use crate::vfs::{NodeId, VfsImage, WriterClass};

#[derive(Debug, Error)]
pub enum ThreatError {
    #[error("attack root {0:?} not found")]
    NotFound(String),
    #[error("attack root {0:?} is not a directory")]
    NotADirectory(String),
    #[error("invalid profile {name:?}: {reason}")]
    InvalidProfile { name: String, reason: String },
    #[error("unknown profile {0:?}")]
    UnknownProfile(String),
    #[error("profile {path}: {source}")]
    Load {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("profile: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Enumeration {
    DepthFirst,
    BreadthFirst,
    Lexicographic,
}

fn default_skip() -> BTreeSet<String> {
    ["tmp", "exe"].into_iter().map(String::from).collect()
}

fn default_actor() -> WriterClass {
    WriterClass::Malicious
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyProfile {
    pub name: String,
    /// Benign profiles only open files.
    #[serde(default = "default_actor")]
    pub actor: WriterClass,
    pub enumeration: Enumeration,
    #[serde(default = "default_skip")]
    pub skip_extensions: BTreeSet<String>,
    pub opens_per_tick: u32,
    pub write_delay: u64,
    pub rename_ext: String,
    pub probe_noise_per_dir: u32,
    #[serde(default = "default_true")]
    pub targets_path_arg: bool,
}

impl FamilyProfile {
    pub fn from_json(text: &str) -> Result<Self, ThreatError> {
        let p: FamilyProfile = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, ThreatError> {
        let text = std::fs::read_to_string(path).map_err(|source| ThreatError::Load {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ThreatError> {
        let bad = |reason: &str| ThreatError::InvalidProfile {
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        if self.name.is_empty() {
            return Err(bad("empty name"));
        }
        if self.opens_per_tick == 0 {
            return Err(bad("opens_per_tick must be at least 1"));
        }
        if self.rename_ext.contains('/') {
            return Err(bad("rename_ext may not contain '/'"));
        }
        Ok(())
    }

    /// Lexicographic sweep, one-tick write delay, light path-walk noise.
    pub fn avos_like() -> Self {
        Self {
            name: "avos-like".into(),
            actor: WriterClass::Malicious,
            enumeration: Enumeration::Lexicographic,
            skip_extensions: default_skip(),
            opens_per_tick: 6,
            write_delay: 1,
            rename_ext: "avoslinux".into(),
            probe_noise_per_dir: 1,
            targets_path_arg: true,
        }
    }

    /// Breadth-first mass open with immediate encryption.
    pub fn conti_like() -> Self {
        Self {
            name: "conti-like".into(),
            actor: WriterClass::Malicious,
            enumeration: Enumeration::BreadthFirst,
            skip_extensions: default_skip(),
            opens_per_tick: 24,
            write_delay: 0,
            rename_ext: "conti".into(),
            probe_noise_per_dir: 4,
            targets_path_arg: true,
        }
    }

    /// Depth-first over the whole mount; ignores the target-path argument.
    pub fn ice_like() -> Self {
        Self {
            name: "ice-like".into(),
            actor: WriterClass::Malicious,
            enumeration: Enumeration::DepthFirst,
            skip_extensions: default_skip(),
            opens_per_tick: 12,
            write_delay: 1,
            rename_ext: "ifire".into(),
            probe_noise_per_dir: 2,
            targets_path_arg: false,
        }
    }

    /// Background reader: opens every file once, writes nothing.
    pub fn benign() -> Self {
        Self {
            name: "benign".into(),
            actor: WriterClass::Benign,
            enumeration: Enumeration::Lexicographic,
            skip_extensions: BTreeSet::new(),
            opens_per_tick: 4,
            write_delay: 0,
            rename_ext: String::new(),
            probe_noise_per_dir: 1,
            targets_path_arg: true,
        }
    }

    pub fn shipped() -> Vec<FamilyProfile> {
        vec![
            Self::avos_like(),
            Self::conti_like(),
            Self::ice_like(),
            Self::benign(),
        ]
    }

    pub fn by_name(name: &str) -> Result<FamilyProfile, ThreatError> {
        Self::shipped()
            .into_iter()
            .find(|p| p.name == name)
            .ok_or_else(|| ThreatError::UnknownProfile(name.to_string()))
    }

    fn skips(&self, ext: &str) -> bool {
        self.skip_extensions.contains(&ext.to_ascii_lowercase())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    EnumerateDir,
    OpenFile,
    WriteEncrypted,
    RenameExt,
}

impl ActionKind {
    fn is_open(self) -> bool {
        matches!(self, ActionKind::EnumerateDir | ActionKind::OpenFile)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScriptAction {
    pub tick: u64,
    pub kind: ActionKind,
    pub node: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackScript {
    pub family: String,
    pub actor: WriterClass,
    pub opens_per_tick: u32,
    pub write_delay: u64,
    pub probe_noise_per_dir: u32,
    pub rename_ext: String,
    pub actions: Vec<ScriptAction>,
}

impl AttackScript {
    /// Regular files the script means to open.
    pub fn targets(&self) -> Vec<NodeId> {
        self.actions
            .iter()
            .filter(|a| a.kind == ActionKind::OpenFile)
            .map(|a| a.node)
            .collect()
    }
}

enum Visit {
    Dir(NodeId),
    File(NodeId),
}

fn walk(image: &VfsImage, root: Option<NodeId>, order: Enumeration) -> Vec<Visit> {
    let root_path = match root {
        Some(id) => image.node(id).expect("root checked").path().to_string(),
        None => "/".to_string(),
    };
    let classify = |id: NodeId| {
        if image.node(id).expect("indexed").is_regular() {
            Visit::File(id)
        } else {
            Visit::Dir(id)
        }
    };
    let mut out = Vec::new();
    match order {
        Enumeration::Lexicographic => {
            let prefix = if root_path == "/" {
                "/".to_string()
            } else {
                format!("{root_path}/")
            };
            if let Some(id) = root {
                out.push(Visit::Dir(id));
            }
            let mut seen = BTreeSet::new();
            for (path, id) in image.paths() {
                if path.starts_with(&prefix) && seen.insert(id) {
                    out.push(classify(id));
                }
            }
        }
        Enumeration::DepthFirst => {
            fn dfs(image: &VfsImage, dir_path: &str, out: &mut Vec<Visit>) {
                for child in image.children(dir_path) {
                    let node = image.node(child).expect("indexed");
                    if node.is_regular() {
                        out.push(Visit::File(child));
                    } else {
                        out.push(Visit::Dir(child));
                        dfs(image, node.path(), out);
                    }
                }
            }
            if let Some(id) = root {
                out.push(Visit::Dir(id));
            }
            dfs(image, &root_path, &mut out);
        }
        Enumeration::BreadthFirst => {
            // a directory is enumerated when it is dequeued, then its files are opened
            let mut queue = VecDeque::from([(root, root_path)]);
            while let Some((id, dir)) = queue.pop_front() {
                if let Some(id) = id {
                    out.push(Visit::Dir(id));
                }
                for child in image.children(&dir) {
                    let node = image.node(child).expect("indexed");
                    if node.is_regular() {
                        out.push(Visit::File(child));
                    } else {
                        queue.push_back((Some(child), node.path().to_string()));
                    }
                }
            }
        }
    }
    // hard links show up once per alias in a path scan; keep the first
    let mut seen = BTreeSet::new();
    out.retain(|v| match v {
        Visit::Dir(id) | Visit::File(id) => seen.insert(*id),
    });
    out
}

/// Compiles a profile into a deterministic script against `image`.
///
/// Open-class actions (enumerations and file opens) fill `opens_per_tick`
/// slots per tick starting at tick 0; each file's write lands `write_delay`
/// ticks after its open and the rename directly after the write.
pub fn compile_profile(
    profile: &FamilyProfile,
    image: &VfsImage,
    root: &str,
) -> Result<AttackScript, ThreatError> {
    let root_id = if profile.targets_path_arg {
        let id = image
            .lookup(root)
            .ok_or_else(|| ThreatError::NotFound(root.to_string()))?;
        if image.node(id).expect("indexed").is_regular() {
            return Err(ThreatError::NotADirectory(root.to_string()));
        }
        Some(id)
    } else {
        None
    };

    let per_tick = u64::from(profile.opens_per_tick.max(1));
    let mut opens = Vec::new();
    let mut follow_ups = Vec::new();
    for visit in walk(image, root_id, profile.enumeration) {
        let slot = opens.len() as u64;
        let tick = slot / per_tick;
        match visit {
            Visit::Dir(id) => opens.push(ScriptAction {
                tick,
                kind: ActionKind::EnumerateDir,
                node: id,
            }),
            Visit::File(id) => {
                let node = image.node(id).expect("indexed");
                if profile.skips(node.extension()) {
                    continue;
                }
                opens.push(ScriptAction {
                    tick,
                    kind: ActionKind::OpenFile,
                    node: id,
                });
                if profile.actor == WriterClass::Malicious {
                    let at = tick + profile.write_delay;
                    follow_ups.push(ScriptAction {
                        tick: at,
                        kind: ActionKind::WriteEncrypted,
                        node: id,
                    });
                    follow_ups.push(ScriptAction {
                        tick: at,
                        kind: ActionKind::RenameExt,
                        node: id,
                    });
                }
            }
        }
    }
    let mut actions: Vec<(u64, u8, usize, ScriptAction)> = opens
        .into_iter()
        .enumerate()
        .map(|(i, a)| (a.tick, 0, i, a))
        .chain(
            follow_ups
                .into_iter()
                .enumerate()
                .map(|(i, a)| (a.tick, 1, i, a)),
        )
        .collect();
    actions.sort_by_key(|(t, phase, i, _)| (*t, *phase, *i));

    Ok(AttackScript {
        family: profile.name.clone(),
        actor: profile.actor,
        opens_per_tick: profile.opens_per_tick.max(1),
        write_delay: profile.write_delay,
        probe_noise_per_dir: profile.probe_noise_per_dir,
        rename_ext: profile.rename_ext.clone(),
        actions: actions.into_iter().map(|(_, _, _, a)| a).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorStatus {
    Running,
    Finished,
    Killed,
}

/// Execution cursor over a script. Writes and renames are scheduled from the
/// tick their open actually ran, so a rate-limited open drags its follow-ups
/// with it.
#[derive(Debug, Clone)]
pub struct ActorRun {
    script: AttackScript,
    cursor: usize,
    follow_ups: VecDeque<(u64, ActionKind, NodeId)>,
    status: ActorStatus,
    killed_at: Option<u64>,
}

impl ActorRun {
    pub fn new(script: AttackScript) -> Self {
        Self {
            script,
            cursor: 0,
            follow_ups: VecDeque::new(),
            status: ActorStatus::Running,
            killed_at: None,
        }
    }

    pub fn script(&self) -> &AttackScript {
        &self.script
    }

    pub fn status(&self) -> ActorStatus {
        self.status
    }

    pub fn killed_at(&self) -> Option<u64> {
        self.killed_at
    }

    fn actor(&self) -> Actor {
        match self.script.actor {
            WriterClass::Malicious => Actor::Malicious,
            WriterClass::Benign => Actor::Benign,
        }
    }

    fn next_open(&mut self) -> Option<ScriptAction> {
        while let Some(a) = self.script.actions.get(self.cursor) {
            if a.kind.is_open() {
                return Some(*a);
            }
            self.cursor += 1;
        }
        None
    }
}

/// Advances the actor by one tick.
///
/// Order within the tick: due opens (at most `opens_per_tick`), then one
/// backup-service pass, then due writes and renames, then every completed
/// action of the tick is shown to the detector.
pub fn step_actor(run: &mut ActorRun, world: &mut World, now: u64) -> ActorStatus {
    if run.status != ActorStatus::Running {
        return run.status;
    }
    let actor = run.actor();
    let mut completed = 0usize;

    let mut budget = run.script.opens_per_tick;
    while budget > 0 {
        let Some(action) = run.next_open() else { break };
        if action.tick > now {
            break;
        }
        run.cursor += 1;
        budget -= 1;
        match action.kind {
            ActionKind::EnumerateDir => {
                world.open(actor, action.node, OpenFlags::READ, now);
                for _ in 0..run.script.probe_noise_per_dir {
                    world.probe(actor, action.node, now);
                }
                completed += 1;
            }
            ActionKind::OpenFile => {
                let flags = match run.script.actor {
                    WriterClass::Malicious => OpenFlags::READ_WRITE,
                    WriterClass::Benign => OpenFlags::READ,
                };
                let outcome = world.open(actor, action.node, flags, now);
                if outcome != OpenOutcome::DeniedAtPermission {
                    completed += 1;
                    if run.script.actor == WriterClass::Malicious {
                        let at = now + run.script.write_delay;
                        run.follow_ups
                            .push_back((at, ActionKind::WriteEncrypted, action.node));
                        run.follow_ups
                            .push_back((at, ActionKind::RenameExt, action.node));
                    }
                }
            }
            _ => unreachable!("next_open only yields open-class actions"),
        }
    }

    world.service(now);

    while let Some(&(at, kind, node)) = run.follow_ups.front() {
        if at > now {
            break;
        }
        run.follow_ups.pop_front();
        match kind {
            ActionKind::WriteEncrypted => world.write(run.script.actor, node, now),
            ActionKind::RenameExt => world.rename_appending(node, &run.script.rename_ext, now),
            _ => unreachable!(),
        }
        completed += 1;
    }

    for _ in 0..completed {
        if world.classify(run.script.actor) == DetectorAction::Kill {
            run.status = ActorStatus::Killed;
            run.killed_at = Some(now);
            return run.status;
        }
    }

    if run.next_open().is_none() && run.follow_ups.is_empty() {
        run.status = ActorStatus::Finished;
    }
    run.status
}

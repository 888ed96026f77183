//! Tick scheduler tying the open path, the backup engine, the detector and
//! one workload together.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{BackupPolicy, BackupQueue, Detector, DetectorAction, DetectorParams, Rofbs};
use crate::events::{EventKind, EventLog, LogRecord};
use crate::open_path::{
    emit_permission_probe, traverse_open, AccessMask, Actor, HookContext, HookPoint, OpenFlags,
    OpenOutcome, OpenRequest, PermissionProbe, ProbeOrigin, StageId,
};
use crate::threat::{step_actor, ActorRun, ActorStatus, AttackScript};
use crate::vfs::{NodeId, VfsImage, WriterClass};

const DETECTOR_STREAM: u64 = 1;
const OPEN_PATH_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub hook: HookPoint,
    pub detector: Option<DetectorParams>,
    /// Fraction of opens that arrive with FMODE_OPENED already set.
    pub fmode_opened_fraction: f64,
    /// Fraction of opens refused at the permission check.
    pub permission_denied_fraction: f64,
    pub max_ticks: u64,
}

impl SimOptions {
    pub fn new(hook: HookPoint) -> Self {
        Self {
            hook,
            detector: None,
            fmode_opened_fraction: 0.0,
            permission_denied_fraction: 0.0,
            max_ticks: 1_000_000,
        }
    }
}

/// Everything the actor touches during a run.
pub struct World {
    image: VfsImage,
    engine: Rofbs,
    hook: HookPoint,
    log: EventLog,
    detector: Option<Detector>,
    detector_rng: ChaCha8Rng,
    open_rng: ChaCha8Rng,
    fmode_opened_fraction: f64,
    permission_denied_fraction: f64,
    next_request: u64,
    next_probe: u64,
}

impl World {
    pub fn new(image: VfsImage, engine: Rofbs, options: &SimOptions, seed: u64) -> Self {
        let stream = |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            rng
        };
        Self {
            image,
            engine,
            hook: options.hook,
            log: EventLog::new(),
            detector: options.detector.map(Detector::new),
            detector_rng: stream(DETECTOR_STREAM),
            open_rng: stream(OPEN_PATH_STREAM),
            fmode_opened_fraction: options.fmode_opened_fraction,
            permission_denied_fraction: options.permission_denied_fraction,
            next_request: 1,
            next_probe: 1,
        }
    }

    pub fn image(&self) -> &VfsImage {
        &self.image
    }

    pub fn engine(&self) -> &Rofbs {
        &self.engine
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    /// Issues one open and lets the attached hook (and through it the backup
    /// engine) react.
    pub fn open(&mut self, actor: Actor, node: NodeId, flags: OpenFlags, now: u64) -> OpenOutcome {
        // both draws happen for every open so the stream stays aligned across hooks
        let denied = self.open_rng.random::<f64>() < self.permission_denied_fraction;
        let reopened = self.open_rng.random::<f64>() < self.fmode_opened_fraction;
        let request = OpenRequest {
            permission_ok: !denied,
            fmode_already_opened: reopened,
            ..OpenRequest::new(self.next_request, actor, node, flags)
        };
        self.next_request += 1;
        let Self {
            image,
            engine,
            log,
            hook,
            ..
        } = self;
        let mut deliver = |ctx: &HookContext| {
            log_delivery(log, ctx, now);
            engine.on_hook_event(ctx, image, now, log);
        };
        traverse_open(&request, image, *hook, &mut deliver).expect("actor opens existing nodes")
    }

    /// A non-open `inode_permission` call on `node` (path walk through a directory).
    pub fn probe(&mut self, actor: Actor, node: NodeId, now: u64) {
        let probe = PermissionProbe {
            probe_id: self.next_probe,
            actor,
            node,
            access_mask: AccessMask::EXEC,
            origin: ProbeOrigin::NonOpen,
        };
        self.next_probe += 1;
        let Self {
            image,
            engine,
            log,
            hook,
            ..
        } = self;
        let mut deliver = |ctx: &HookContext| {
            log_delivery(log, ctx, now);
            engine.on_hook_event(ctx, image, now, log);
        };
        emit_permission_probe(&probe, image, *hook, &mut deliver)
            .expect("probes target existing nodes");
    }

    pub fn service(&mut self, now: u64) {
        self.engine
            .service_queue(&mut self.image, now, &mut self.log);
    }

    pub fn write(&mut self, writer: WriterClass, node: NodeId, now: u64) {
        let version = self
            .image
            .write_content(node, writer)
            .expect("writes target existing regular files");
        let path = self
            .image
            .node(node)
            .expect("just written")
            .path()
            .to_string();
        self.log.push(
            LogRecord::new(now, EventKind::Write)
                .node(node)
                .path(path)
                .actor(actor_of(writer))
                .version(version),
        );
    }

    /// Appends `.ext` to the file name, keeping the old suffix.
    pub fn rename_appending(&mut self, node: NodeId, ext: &str, now: u64) {
        if ext.is_empty() {
            return;
        }
        let current = self.image.node(node).expect("rename target exists");
        let base = crate::vfs::basename(current.path());
        let suffix = match base.find('.') {
            Some(i) => format!("{}.{ext}", &base[i + 1..]),
            None => ext.to_string(),
        };
        if self.image.rename_extension(node, &suffix).is_ok() {
            let path = self.image.node(node).expect("renamed").path().to_string();
            self.log
                .push(LogRecord::new(now, EventKind::Rename).node(node).path(path));
        }
    }

    pub fn classify(&mut self, actor: WriterClass) -> DetectorAction {
        match &mut self.detector {
            Some(d) => d.classify_and_maybe_kill(actor, &mut self.detector_rng),
            None => DetectorAction::Continue,
        }
    }

    /// Kill handling: one restore pass over every file whose last write was malicious.
    fn kill(&mut self, actor: WriterClass, now: u64) {
        self.log
            .push(LogRecord::new(now, EventKind::Kill).actor(actor_of(actor)));
        let encrypted: Vec<NodeId> = self
            .image
            .nodes()
            .filter(|n| n.last_writer() == Some(WriterClass::Malicious))
            .map(|n| n.node_id())
            .collect();
        for node in encrypted {
            self.engine
                .restore(&mut self.image, node, true, now, &mut self.log);
        }
    }
}

fn actor_of(writer: WriterClass) -> Actor {
    match writer {
        WriterClass::Malicious => Actor::Malicious,
        WriterClass::Benign => Actor::Benign,
    }
}

fn log_delivery(log: &mut EventLog, ctx: &HookContext, now: u64) {
    let kind = if ctx.stage == StageId::InodePermission {
        EventKind::Probe
    } else {
        EventKind::Open
    };
    let mut rec = LogRecord::new(now, kind)
        .request(ctx.request_id)
        .actor(ctx.actor)
        .stage(ctx.stage);
    if let Some(node) = ctx.node {
        rec = rec.node(node);
    }
    if let Some(frags) = &ctx.path_fragments {
        if let Ok(p) = crate::engine::reassemble_path(frags) {
            rec = rec.path(p);
        }
    }
    if let Some(origin) = ctx.origin {
        rec = rec.origin(origin);
    }
    log.push(rec);
}

/// Final state of one simulated run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub hook: HookPoint,
    pub family: String,
    pub seed: u64,
    pub image: VfsImage,
    pub engine: Rofbs,
    pub log: EventLog,
    /// Content version of every regular file before the actor started.
    pub pre_attack: BTreeMap<NodeId, u64>,
    pub status: ActorStatus,
    pub killed_at: Option<u64>,
    pub ticks: u64,
}

/// Runs `script` against a copy of `image` until the actor finishes, is
/// killed, or `max_ticks` pass.
pub fn run_simulation(
    image: &VfsImage,
    script: &AttackScript,
    policy: &BackupPolicy,
    queue: &BackupQueue,
    options: &SimOptions,
    seed: u64,
) -> RunResult {
    let pre_attack = content_snapshot(image);
    let engine = Rofbs::new(policy.clone(), queue.clone());
    let mut world = World::new(image.clone(), engine, options, seed);
    let mut actor = ActorRun::new(script.clone());
    let mut now = 0;
    let status = loop {
        let status = step_actor(&mut actor, &mut world, now);
        match status {
            ActorStatus::Running if now < options.max_ticks => now += 1,
            ActorStatus::Killed => {
                world.kill(script.actor, now);
                break status;
            }
            other => break other,
        }
    };
    RunResult {
        hook: options.hook,
        family: script.family.clone(),
        seed,
        image: world.image,
        engine: world.engine,
        log: world.log,
        pre_attack,
        status,
        killed_at: actor.killed_at(),
        ticks: now + 1,
    }
}

pub fn content_snapshot(image: &VfsImage) -> BTreeMap<NodeId, u64> {
    image
        .nodes()
        .filter(|n| n.is_regular())
        .map(|n| (n.node_id(), n.content_version()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::threat::{compile_profile, ActionKind, FamilyProfile, ScriptAction};
    use crate::vfs::{seed_tree, TreeSpec};

    fn policy() -> BackupPolicy {
        BackupPolicy::new(["/victim"]).unwrap()
    }

    fn tree(files: usize) -> VfsImage {
        seed_tree(&TreeSpec::generate("/victim", files, 4)).unwrap()
    }

    fn malicious_writes(image: &VfsImage) -> usize {
        image
            .nodes()
            .filter(|n| n.last_writer() == Some(WriterClass::Malicious))
            .count()
    }

    #[test]
    fn undetected_run_encrypts_everything() {
        let img = tree(10);
        let script = compile_profile(&FamilyProfile::avos_like(), &img, "/victim").unwrap();
        let res = run_simulation(
            &img,
            &script,
            &policy(),
            &BackupQueue::new(None, 0),
            &SimOptions::new(HookPoint::MayOpen),
            1,
        );
        assert_eq!(res.status, ActorStatus::Finished);
        assert_eq!(malicious_writes(&res.image), 10);
        assert!(res
            .image
            .nodes()
            .all(|n| !n.is_regular() || n.extension() == "avoslinux" || n.extension() == "tmp"));
        res.image.check_invariants().unwrap();
    }

    #[test]
    fn rate_limit_caps_opens_per_tick() {
        let img = tree(5);
        let files: Vec<NodeId> = img
            .nodes()
            .filter(|n| n.is_regular())
            .map(|n| n.node_id())
            .collect();
        let script = AttackScript {
            family: "burst".into(),
            actor: WriterClass::Malicious,
            opens_per_tick: 2,
            write_delay: 0,
            probe_noise_per_dir: 0,
            rename_ext: "x".into(),
            actions: files
                .iter()
                .map(|&node| ScriptAction {
                    tick: 0,
                    kind: ActionKind::OpenFile,
                    node,
                })
                .collect(),
        };
        let engine = Rofbs::new(policy(), BackupQueue::new(None, 0));
        let mut world = World::new(img, engine, &SimOptions::new(HookPoint::MayOpen), 0);
        let mut run = ActorRun::new(script);
        let opens_at = |w: &World, t: u64| {
            w.log()
                .records()
                .iter()
                .filter(|r| r.kind == EventKind::Open && r.tick == t)
                .count()
        };
        assert_eq!(step_actor(&mut run, &mut world, 0), ActorStatus::Running);
        assert_eq!(opens_at(&world, 0), 2);
        step_actor(&mut run, &mut world, 1);
        assert_eq!(opens_at(&world, 1), 2);
        assert_eq!(step_actor(&mut run, &mut world, 2), ActorStatus::Finished);
        assert_eq!(opens_at(&world, 2), 1);
        // follow-ups ride with the deferred opens
        assert_eq!(malicious_writes(world.image()), 5);
    }

    #[test]
    fn killed_actor_stops() {
        let img = tree(40);
        let script = compile_profile(&FamilyProfile::avos_like(), &img, "/victim").unwrap();
        let options = SimOptions {
            detector: Some(DetectorParams {
                accuracy: 1.0,
                fpr: 0.0,
                kill_threshold: 10,
            }),
            ..SimOptions::new(HookPoint::SecurityFileOpen)
        };
        let res = run_simulation(
            &img,
            &script,
            &policy(),
            &BackupQueue::new(None, 0),
            &options,
            3,
        );
        assert_eq!(res.status, ActorStatus::Killed);
        let t = res.killed_at.unwrap();
        let recs = res.log.records();
        let kill_pos = recs.iter().position(|r| r.kind == EventKind::Kill).unwrap();
        assert!(recs.iter().all(|r| r.tick <= t));
        assert!(recs[kill_pos..]
            .iter()
            .all(|r| matches!(r.kind, EventKind::Kill | EventKind::Restore)));
        // every encrypted file had a pre-write backup and got it back
        for n in res
            .image
            .nodes()
            .filter(|n| n.last_writer() == Some(WriterClass::Malicious))
        {
            assert_eq!(n.live_version(), res.pre_attack[&n.node_id()]);
            assert_ne!(n.extension(), "avoslinux");
        }
        assert!(malicious_writes(&res.image) < 40);
    }

    #[test]
    fn same_inputs_same_log() {
        let img = tree(30);
        let script = compile_profile(&FamilyProfile::conti_like(), &img, "/victim").unwrap();
        let options = SimOptions {
            detector: Some(DetectorParams::RANDOM_FOREST),
            fmode_opened_fraction: 0.2,
            permission_denied_fraction: 0.1,
            ..SimOptions::new(HookPoint::InodePermission)
        };
        let q = BackupQueue::new(Some(3), 1);
        let a = run_simulation(&img, &script, &policy(), &q, &options, 9);
        let b = run_simulation(&img, &script, &policy(), &q, &options, 9);
        assert_eq!(a.log, b.log);
        assert_eq!(a.image, b.image);
    }
}

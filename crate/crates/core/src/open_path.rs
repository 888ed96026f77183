//! Stage model of the kernel file-open path.
//!
//! An open walks `may_open -> inode_permission -> (FMODE_OPENED gate) ->
//! do_dentry_open -> security_file_open -> fs open callback`. Exactly one hook
//! point is attached per run and it only sees contexts for its own stage, with
//! the information that stage actually has in hand.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vfs::{MountKind, NodeId, NodeKind, VNode, VfsImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    MayOpen,
    InodePermission,
    VfsOpenGate,
    DoDentryOpen,
    SecurityFileOpen,
    FsOpen,
}

impl StageId {
    pub fn name(self) -> &'static str {
        match self {
            StageId::MayOpen => "may_open",
            StageId::InodePermission => "inode_permission",
            StageId::VfsOpenGate => "vfs_open",
            StageId::DoDentryOpen => "do_dentry_open",
            StageId::SecurityFileOpen => "security_file_open",
            StageId::FsOpen => "fs_open",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookPoint {
    MayOpen,
    InodePermission,
    DoDentryOpen,
    SecurityFileOpen,
    XfsFileOpen,
}

impl HookPoint {
    pub const ALL: [HookPoint; 5] = [
        HookPoint::MayOpen,
        HookPoint::InodePermission,
        HookPoint::DoDentryOpen,
        HookPoint::SecurityFileOpen,
        HookPoint::XfsFileOpen,
    ];

    pub fn stage(self) -> StageId {
        match self {
            HookPoint::MayOpen => StageId::MayOpen,
            HookPoint::InodePermission => StageId::InodePermission,
            HookPoint::DoDentryOpen => StageId::DoDentryOpen,
            HookPoint::SecurityFileOpen => StageId::SecurityFileOpen,
            HookPoint::XfsFileOpen => StageId::FsOpen,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HookPoint::MayOpen => "may_open",
            HookPoint::InodePermission => "inode_permission",
            HookPoint::DoDentryOpen => "do_dentry_open",
            HookPoint::SecurityFileOpen => "security_file_open",
            HookPoint::XfsFileOpen => "xfs_file_open",
        }
    }

    pub fn layer(self) -> &'static str {
        match self {
            HookPoint::MayOpen => "early decision stage",
            HookPoint::InodePermission => "permission-check stage",
            HookPoint::DoDentryOpen => "common VFS open-execution stage",
            HookPoint::SecurityFileOpen => "late common VFS stage",
            HookPoint::XfsFileOpen => "filesystem-specific stage",
        }
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown hook point {0:?}")]
pub struct UnknownHook(pub String);

impl FromStr for HookPoint {
    type Err = UnknownHook;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HookPoint::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| UnknownHook(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Benign,
    Malicious,
    System,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpenFlags {
    pub read: bool,
    pub write: bool,
    pub create: bool,
    pub truncate: bool,
}

impl OpenFlags {
    pub const READ: OpenFlags = OpenFlags {
        read: true,
        write: false,
        create: false,
        truncate: false,
    };
    pub const READ_WRITE: OpenFlags = OpenFlags {
        read: true,
        write: true,
        create: false,
        truncate: false,
    };

    pub fn access_mask(self) -> AccessMask {
        AccessMask {
            read: self.read,
            write: self.write || self.create || self.truncate,
            exec: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AccessMask {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
}

impl AccessMask {
    pub const EXEC: AccessMask = AccessMask {
        read: false,
        write: false,
        exec: true,
    };
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenRequest {
    pub request_id: u64,
    pub actor: Actor,
    pub target: NodeId,
    pub open_flags: OpenFlags,
    pub permission_ok: bool,
    pub fmode_already_opened: bool,
}

impl OpenRequest {
    pub fn new(request_id: u64, actor: Actor, target: NodeId, open_flags: OpenFlags) -> Self {
        Self {
            request_id,
            actor,
            target,
            open_flags,
            permission_ok: true,
            fmode_already_opened: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOrigin {
    OpenPath,
    NonOpen,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermissionProbe {
    pub probe_id: u64,
    pub actor: Actor,
    pub node: NodeId,
    pub access_mask: AccessMask,
    pub origin: ProbeOrigin,
}

/// What a hook sees at its stage.
///
/// `origin` is bookkeeping for the simulator's logs; a real observer at
/// `inode_permission` cannot tell open-derived invocations from others, and the
/// backup engine never reads it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HookContext {
    pub stage: StageId,
    pub request_id: u64,
    pub actor: Actor,
    pub node: Option<NodeId>,
    pub path_fragments: Option<Vec<String>>,
    pub access_mask: Option<AccessMask>,
    pub file_handle_ready: bool,
    pub origin: Option<ProbeOrigin>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpenOutcome {
    Completed,
    DeniedAtPermission,
    GateBypassed,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OpenError {
    #[error("open target {0} does not exist")]
    NotFound(NodeId),
}

fn node_of(image: &VfsImage, id: NodeId) -> Result<&VNode, OpenError> {
    image.node(id).map_err(|_| OpenError::NotFound(id))
}

pub trait HookObserver {
    fn observe(&mut self, ctx: &HookContext);
}

impl<F: FnMut(&HookContext)> HookObserver for F {
    fn observe(&mut self, ctx: &HookContext) {
        self(ctx)
    }
}

impl HookObserver for Vec<HookContext> {
    fn observe(&mut self, ctx: &HookContext) {
        self.push(ctx.clone());
    }
}

/// Path components leaf-first, the order in which the kernel hands them out
/// when walking dentries towards the root.
pub fn reverse_fragments(path: &str) -> Vec<String> {
    path.split('/')
        .filter(|c| !c.is_empty())
        .rev()
        .map(str::to_string)
        .collect()
}

/// Lexicographically smallest alias of `node`.
pub fn representative_path(image: &VfsImage, node: NodeId) -> Result<String, OpenError> {
    let n = node_of(image, node)?;
    Ok(n.link_paths()
        .iter()
        .next()
        .expect("nodes always have at least one path")
        .clone())
}

/// Every stage context an open request produces, in stage order, regardless of
/// which hook is attached.
pub fn trace_open(
    request: &OpenRequest,
    image: &VfsImage,
) -> Result<(OpenOutcome, Vec<HookContext>), OpenError> {
    let node = node_of(image, request.target)?;
    let opened = reverse_fragments(node.path());
    let ctx = |stage: StageId| HookContext {
        stage,
        request_id: request.request_id,
        actor: request.actor,
        node: Some(request.target),
        path_fragments: Some(opened.clone()),
        access_mask: None,
        file_handle_ready: false,
        origin: None,
    };

    let mut events = vec![ctx(StageId::MayOpen)];
    events.push(HookContext {
        path_fragments: Some(reverse_fragments(&representative_path(
            image,
            request.target,
        )?)),
        access_mask: Some(request.open_flags.access_mask()),
        origin: Some(ProbeOrigin::OpenPath),
        ..ctx(StageId::InodePermission)
    });
    if !request.permission_ok {
        return Ok((OpenOutcome::DeniedAtPermission, events));
    }
    events.push(ctx(StageId::VfsOpenGate));
    if request.fmode_already_opened {
        return Ok((OpenOutcome::GateBypassed, events));
    }
    let ready = |stage| HookContext {
        file_handle_ready: true,
        ..ctx(stage)
    };
    events.push(ready(StageId::DoDentryOpen));
    events.push(ready(StageId::SecurityFileOpen));
    if image.mount_kind() == MountKind::Xfs && node.kind() == NodeKind::Regular {
        events.push(ready(StageId::FsOpen));
    }
    Ok((OpenOutcome::Completed, events))
}

/// Runs one open through the stage pipeline and hands the attached hook the
/// contexts for its stage.
pub fn traverse_open(
    request: &OpenRequest,
    image: &VfsImage,
    hook: HookPoint,
    observer: &mut dyn HookObserver,
) -> Result<OpenOutcome, OpenError> {
    let (outcome, events) = trace_open(request, image)?;
    let stage = hook.stage();
    for ev in events.iter().filter(|e| e.stage == stage) {
        observer.observe(ev);
    }
    Ok(outcome)
}

/// Delivers an `inode_permission` invocation that is not tied to a full open
/// (path walk, stat, readdir). Only the `inode_permission` hook sees it.
/// Returns whether the probe was delivered.
pub fn emit_permission_probe(
    probe: &PermissionProbe,
    image: &VfsImage,
    hook: HookPoint,
    observer: &mut dyn HookObserver,
) -> Result<bool, OpenError> {
    let path = representative_path(image, probe.node)?;
    if hook != HookPoint::InodePermission {
        return Ok(false);
    }
    observer.observe(&HookContext {
        stage: StageId::InodePermission,
        request_id: probe.probe_id,
        actor: probe.actor,
        node: Some(probe.node),
        path_fragments: Some(reverse_fragments(&path)),
        access_mask: Some(probe.access_mask),
        file_handle_ready: false,
        origin: Some(probe.origin),
    });
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vfs::{seed_tree, seed_tree_on, TreeEntry, TreeSpec};

    fn image(mount: MountKind) -> VfsImage {
        seed_tree_on(
            &TreeSpec::new(vec![
                TreeEntry::dir("/victim"),
                TreeEntry::dir("/victim/docs"),
                TreeEntry::file("/victim/docs/a.txt"),
            ]),
            mount,
        )
        .unwrap()
    }

    fn run(req: &OpenRequest, img: &VfsImage, hook: HookPoint) -> (OpenOutcome, Vec<HookContext>) {
        let mut seen = Vec::new();
        let out = traverse_open(req, img, hook, &mut seen).unwrap();
        (out, seen)
    }

    #[test]
    fn stage_order_is_total() {
        use StageId::*;
        let order = [
            MayOpen,
            InodePermission,
            VfsOpenGate,
            DoDentryOpen,
            SecurityFileOpen,
            FsOpen,
        ];
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn regular_file_reaches_fs_callback() {
        let img = image(MountKind::Xfs);
        let a = img.lookup("/victim/docs/a.txt").unwrap();
        let req = OpenRequest::new(1, Actor::Malicious, a, OpenFlags::READ_WRITE);
        let (out, seen) = run(&req, &img, HookPoint::XfsFileOpen);
        assert_eq!(out, OpenOutcome::Completed);
        assert_eq!(seen.len(), 1);
        assert!(seen[0].file_handle_ready);
        assert_eq!(
            seen[0].path_fragments.as_deref().unwrap(),
            ["a.txt", "docs", "victim"]
        );
    }

    #[test]
    fn directory_skips_fs_callback() {
        let img = image(MountKind::Xfs);
        let d = img.lookup("/victim/docs").unwrap();
        let req = OpenRequest::new(2, Actor::Malicious, d, OpenFlags::READ);
        assert_eq!(run(&req, &img, HookPoint::XfsFileOpen).1.len(), 0);
        assert_eq!(run(&req, &img, HookPoint::SecurityFileOpen).1.len(), 1);
    }

    #[test]
    fn other_filesystem_has_no_xfs_callback() {
        let img = image(MountKind::Other);
        let a = img.lookup("/victim/docs/a.txt").unwrap();
        let req = OpenRequest::new(1, Actor::Benign, a, OpenFlags::READ);
        let (out, seen) = run(&req, &img, HookPoint::XfsFileOpen);
        assert_eq!(out, OpenOutcome::Completed);
        assert!(seen.is_empty());
    }

    #[test]
    fn permission_denial_stops_early() {
        let img = image(MountKind::Xfs);
        let a = img.lookup("/victim/docs/a.txt").unwrap();
        let req = OpenRequest {
            permission_ok: false,
            ..OpenRequest::new(3, Actor::Malicious, a, OpenFlags::READ_WRITE)
        };
        let (out, seen) = run(&req, &img, HookPoint::MayOpen);
        assert_eq!(out, OpenOutcome::DeniedAtPermission);
        assert_eq!(seen.len(), 1);
        assert_eq!(run(&req, &img, HookPoint::InodePermission).1.len(), 1);
        assert_eq!(run(&req, &img, HookPoint::DoDentryOpen).1.len(), 0);
    }

    #[test]
    fn fmode_gate_skips_dentry_open() {
        let img = image(MountKind::Xfs);
        let a = img.lookup("/victim/docs/a.txt").unwrap();
        let req = OpenRequest {
            fmode_already_opened: true,
            ..OpenRequest::new(4, Actor::Malicious, a, OpenFlags::READ)
        };
        assert_eq!(
            run(&req, &img, HookPoint::MayOpen).0,
            OpenOutcome::GateBypassed
        );
        for hook in [
            HookPoint::DoDentryOpen,
            HookPoint::SecurityFileOpen,
            HookPoint::XfsFileOpen,
        ] {
            assert!(run(&req, &img, hook).1.is_empty());
        }
    }

    #[test]
    fn context_fields_follow_stage() {
        let img = image(MountKind::Xfs);
        let a = img.lookup("/victim/docs/a.txt").unwrap();
        let req = OpenRequest::new(5, Actor::Benign, a, OpenFlags::READ_WRITE);
        let (_, all) = trace_open(&req, &img).unwrap();
        let stages: Vec<StageId> = all.iter().map(|c| c.stage).collect();
        assert!(stages.windows(2).all(|w| w[0] < w[1]));
        for ctx in &all {
            assert!(ctx.node.is_some());
            match ctx.stage {
                StageId::MayOpen => {
                    assert!(ctx.path_fragments.is_some());
                    assert!(ctx.access_mask.is_none());
                    assert!(!ctx.file_handle_ready);
                }
                StageId::InodePermission => {
                    assert_eq!(
                        ctx.access_mask,
                        Some(AccessMask {
                            read: true,
                            write: true,
                            exec: false
                        })
                    );
                    assert_eq!(ctx.origin, Some(ProbeOrigin::OpenPath));
                    assert!(!ctx.file_handle_ready);
                }
                StageId::VfsOpenGate => assert!(!ctx.file_handle_ready),
                _ => {
                    assert!(ctx.path_fragments.is_some());
                    assert!(ctx.file_handle_ready);
                }
            }
        }
    }

    #[test]
    fn non_open_probes_only_reach_inode_permission() {
        let img = image(MountKind::Xfs);
        let d = img.lookup("/victim/docs").unwrap();
        let probe = PermissionProbe {
            probe_id: 9,
            actor: Actor::Malicious,
            node: d,
            access_mask: AccessMask::EXEC,
            origin: ProbeOrigin::NonOpen,
        };
        let mut seen = Vec::new();
        assert!(
            emit_permission_probe(&probe, &img, HookPoint::InodePermission, &mut seen).unwrap()
        );
        assert_eq!(seen.len(), 1);
        assert_eq!(seen[0].origin, Some(ProbeOrigin::NonOpen));
        assert_eq!(seen[0].access_mask, Some(AccessMask::EXEC));
        for hook in [
            HookPoint::MayOpen,
            HookPoint::SecurityFileOpen,
            HookPoint::XfsFileOpen,
        ] {
            assert!(!emit_permission_probe(&probe, &img, hook, &mut seen).unwrap());
        }
        assert_eq!(seen.len(), 1);
    }

    #[test]
    fn representative_is_smallest_alias() {
        let mut img = seed_tree(&TreeSpec::new(vec![
            TreeEntry::dir("/victim"),
            TreeEntry::file("/victim/z.txt"),
        ]))
        .unwrap();
        let z = img.lookup("/victim/z.txt").unwrap();
        assert_eq!(representative_path(&img, z).unwrap(), "/victim/z.txt");
        img.add_link(z, "/victim/a.txt").unwrap();
        let mut aliases: Vec<_> = img.node(z).unwrap().link_paths().iter().cloned().collect();
        aliases.sort();
        assert_eq!(representative_path(&img, z).unwrap(), aliases[0]);
        assert_eq!(representative_path(&img, z).unwrap(), "/victim/a.txt");

        // inode_permission sees the representative alias, the later stages the opened one
        let req = OpenRequest::new(1, Actor::Benign, z, OpenFlags::READ);
        let (_, all) = trace_open(&req, &img).unwrap();
        assert_eq!(
            all[1].path_fragments.as_deref().unwrap(),
            ["a.txt", "victim"]
        );
        assert_eq!(
            all[3].path_fragments.as_deref().unwrap(),
            ["z.txt", "victim"]
        );

        img.remove_node(z).unwrap();
        assert_eq!(representative_path(&img, z), Err(OpenError::NotFound(z)));
    }

    #[test]
    fn missing_target_is_not_found() {
        let img = image(MountKind::Xfs);
        let req = OpenRequest::new(1, Actor::Benign, NodeId(999), OpenFlags::READ);
        let mut seen = Vec::new();
        assert_eq!(
            traverse_open(&req, &img, HookPoint::MayOpen, &mut seen),
            Err(OpenError::NotFound(NodeId(999)))
        );
    }

    #[test]
    fn hook_names_round_trip() {
        for h in HookPoint::ALL {
            assert_eq!(h.name().parse::<HookPoint>().unwrap(), h);
        }
        assert!("vfs_open".parse::<HookPoint>().is_err());
    }
}

//! In-memory model of the victim filesystem.
//!
//! Files carry an inode-like [`NodeId`] that survives renames, plus a content
//! lineage instead of bytes: `content_version` counts writes, `last_writer`
//! tags who made the latest one, and `live_version` names the version whose
//! data is currently visible (it only diverges from `content_version` after a
//! backup has been restored over the node).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Regular,
    Directory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriterClass {
    Benign,
    Malicious,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MountKind {
    #[default]
    Xfs,
    Other,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VfsError {
    #[error("invalid tree spec: {0}")]
    Spec(String),
    #[error("node {0} not found")]
    NotFound(NodeId),
    #[error("path {0:?} not found")]
    PathNotFound(String),
    #[error("node {node} is a {actual:?}, operation needs {expected:?}")]
    Kind {
        node: NodeId,
        expected: NodeKind,
        actual: NodeKind,
    },
    #[error("path {0:?} already exists")]
    Collision(String),
    #[error("invalid path {0:?}")]
    InvalidPath(String),
}

pub type Result<T, E = VfsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VNode {
    node_id: NodeId,
    path: String,
    kind: NodeKind,
    extension: String,
    content_version: u64,
    live_version: u64,
    last_writer: Option<WriterClass>,
    link_paths: BTreeSet<String>,
}

impl VNode {
    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    /// Primary path: the name the node is normally opened through.
    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn kind(&self) -> NodeKind {
        self.kind
    }

    pub fn is_regular(&self) -> bool {
        self.kind == NodeKind::Regular
    }

    pub fn extension(&self) -> &str {
        &self.extension
    }

    pub fn content_version(&self) -> u64 {
        self.content_version
    }

    pub fn live_version(&self) -> u64 {
        self.live_version
    }

    pub fn last_writer(&self) -> Option<WriterClass> {
        self.last_writer
    }

    pub fn link_paths(&self) -> &BTreeSet<String> {
        &self.link_paths
    }
}

/// Text after the final dot of the last path component, empty when there is no dot.
pub fn extension_of(path: &str) -> &str {
    let base = basename(path);
    match base.rfind('.') {
        Some(i) => &base[i + 1..],
        None => "",
    }
}

pub fn basename(path: &str) -> &str {
    match path.rfind('/') {
        Some(i) => &path[i + 1..],
        None => path,
    }
}

/// Parent directory of an absolute path; `"/"` for top-level entries.
pub fn parent_of(path: &str) -> &str {
    match path.rfind('/') {
        Some(0) | None => "/",
        Some(i) => &path[..i],
    }
}

fn depth_of(path: &str) -> usize {
    path.matches('/').count()
}

fn validate_path(path: &str) -> Result<()> {
    let ok = path.starts_with('/')
        && path.len() > 1
        && !path.ends_with('/')
        && path[1..]
            .split('/')
            .all(|c| !c.is_empty() && c != "." && c != "..");
    if ok {
        Ok(())
    } else {
        Err(VfsError::InvalidPath(path.to_string()))
    }
}

/// Replace everything from the first dot of the basename onward with `new_suffix`.
fn with_suffix(path: &str, new_suffix: &str) -> String {
    let dir_len = path.len() - basename(path).len();
    let base = basename(path);
    let stem = match base.find('.') {
        Some(i) => &base[..i],
        None => base,
    };
    if new_suffix.is_empty() {
        format!("{}{}", &path[..dir_len], stem)
    } else {
        format!("{}{}.{}", &path[..dir_len], stem, new_suffix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    File,
    Dir,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeEntry {
    pub path: String,
    pub kind: EntryKind,
}

impl TreeEntry {
    pub fn dir(path: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            kind: EntryKind::Dir,
        }
    }

    pub fn file(path: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            kind: EntryKind::File,
        }
    }
}

/// Directory and file listing used to seed an image. Serialized as a bare JSON array.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TreeSpec {
    pub entries: Vec<TreeEntry>,
}

impl TreeSpec {
    pub fn new(entries: Vec<TreeEntry>) -> Self {
        Self { entries }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| VfsError::Spec(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VfsError::Spec(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Two-level tree: `root` holds `ceil(files / files_per_dir)` subdirectories
    /// named `d0000`, `d0001`, ... each filled with up to `files_per_dir` files.
    /// Extensions cycle through a fixed office-document mix.
    pub fn generate(root: &str, files: usize, files_per_dir: usize) -> Self {
        const EXTS: [&str; 10] = [
            "txt", "docx", "pdf", "xlsx", "jpg", "png", "pptx", "csv", "zip", "html",
        ];
        let per_dir = files_per_dir.max(1);
        let mut entries = vec![TreeEntry::dir(root)];
        let dirs = files.div_ceil(per_dir);
        let mut made = 0;
        for d in 0..dirs {
            let dir = format!("{root}/d{d:04}");
            entries.push(TreeEntry::dir(&dir));
            for f in 0..per_dir {
                if made == files {
                    break;
                }
                let ext = EXTS[made % EXTS.len()];
                entries.push(TreeEntry::file(format!("{dir}/f{f:03}.{ext}")));
                made += 1;
            }
        }
        Self { entries }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VfsImage {
    nodes: BTreeMap<NodeId, VNode>,
    path_index: BTreeMap<String, NodeId>,
    mount_kind: MountKind,
    next_id: u64,
}

/// Builds an XFS-mounted image from `spec`.
pub fn seed_tree(spec: &TreeSpec) -> Result<VfsImage> {
    seed_tree_on(spec, MountKind::Xfs)
}

pub fn seed_tree_on(spec: &TreeSpec, mount_kind: MountKind) -> Result<VfsImage> {
    let mut seen = HashSet::new();
    for entry in &spec.entries {
        validate_path(&entry.path)
            .map_err(|_| VfsError::Spec(format!("bad path {:?}", entry.path)))?;
        if !seen.insert(entry.path.as_str()) {
            return Err(VfsError::Spec(format!("duplicate path {:?}", entry.path)));
        }
    }
    let mut order: Vec<&TreeEntry> = spec.entries.iter().collect();
    order.sort_by(|a, b| {
        depth_of(&a.path)
            .cmp(&depth_of(&b.path))
            .then_with(|| a.path.cmp(&b.path))
    });

    let mut image = VfsImage::empty(mount_kind);
    for entry in order {
        let kind = match entry.kind {
            EntryKind::File => NodeKind::Regular,
            EntryKind::Dir => NodeKind::Directory,
        };
        image.create_node(&entry.path, kind).map_err(|e| match e {
            VfsError::PathNotFound(p) | VfsError::InvalidPath(p) => {
                VfsError::Spec(format!("{:?} has no parent directory {p:?}", entry.path))
            }
            other => VfsError::Spec(other.to_string()),
        })?;
    }
    Ok(image)
}

impl VfsImage {
    pub fn empty(mount_kind: MountKind) -> Self {
        Self {
            nodes: BTreeMap::new(),
            path_index: BTreeMap::new(),
            mount_kind,
            next_id: 1,
        }
    }

    pub fn mount_kind(&self) -> MountKind {
        self.mount_kind
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&VNode> {
        self.nodes.get(&id).ok_or(VfsError::NotFound(id))
    }

    pub fn lookup(&self, path: &str) -> Option<NodeId> {
        self.path_index.get(path).copied()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &VNode> {
        self.nodes.values()
    }

    pub fn paths(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.path_index.iter().map(|(p, id)| (p.as_str(), *id))
    }

    /// Direct children of `dir`, in path order.
    pub fn children(&self, dir: &str) -> Vec<NodeId> {
        let prefix = if dir == "/" {
            "/".to_string()
        } else {
            format!("{dir}/")
        };
        self.path_index
            .range(prefix.clone()..)
            .take_while(|(p, _)| p.starts_with(&prefix))
            .filter(|(p, _)| !p[prefix.len()..].contains('/'))
            .map(|(_, id)| *id)
            .collect()
    }

    /// Creates a fresh node at `path`. The parent must be an existing directory
    /// (the root `/` always exists implicitly).
    pub fn create_node(&mut self, path: &str, kind: NodeKind) -> Result<NodeId> {
        validate_path(path)?;
        if self.path_index.contains_key(path) {
            return Err(VfsError::Collision(path.to_string()));
        }
        let parent = parent_of(path);
        if parent != "/" {
            let pid = self
                .lookup(parent)
                .ok_or_else(|| VfsError::PathNotFound(parent.to_string()))?;
            let pkind = self.nodes[&pid].kind;
            if pkind != NodeKind::Directory {
                return Err(VfsError::Kind {
                    node: pid,
                    expected: NodeKind::Directory,
                    actual: pkind,
                });
            }
        }
        let id = NodeId(self.next_id);
        self.next_id += 1;
        self.nodes.insert(
            id,
            VNode {
                node_id: id,
                path: path.to_string(),
                kind,
                extension: extension_of(path).to_string(),
                content_version: 0,
                live_version: 0,
                last_writer: None,
                link_paths: BTreeSet::from([path.to_string()]),
            },
        );
        self.path_index.insert(path.to_string(), id);
        Ok(id)
    }

    /// Creates a regular file whose lineage copies `(version, writer)` from a
    /// captured source. Used for backup artifacts.
    pub fn create_copy(
        &mut self,
        path: &str,
        version: u64,
        writer: Option<WriterClass>,
    ) -> Result<NodeId> {
        let id = self.create_node(path, NodeKind::Regular)?;
        let node = self.nodes.get_mut(&id).expect("just created");
        node.content_version = version;
        node.live_version = version;
        node.last_writer = if version == 0 { None } else { writer };
        Ok(id)
    }

    /// Adds a hard-link alias for a regular file.
    pub fn add_link(&mut self, id: NodeId, path: &str) -> Result<()> {
        validate_path(path)?;
        let node = self.node(id)?;
        if node.kind != NodeKind::Regular {
            return Err(VfsError::Kind {
                node: id,
                expected: NodeKind::Regular,
                actual: node.kind,
            });
        }
        if self.path_index.contains_key(path) {
            return Err(VfsError::Collision(path.to_string()));
        }
        let parent = parent_of(path);
        if parent != "/" && self.lookup(parent).is_none() {
            return Err(VfsError::PathNotFound(parent.to_string()));
        }
        self.nodes
            .get_mut(&id)
            .expect("checked")
            .link_paths
            .insert(path.to_string());
        self.path_index.insert(path.to_string(), id);
        Ok(())
    }

    /// Unlinks a node and all its aliases. Directories must be empty.
    pub fn remove_node(&mut self, id: NodeId) -> Result<VNode> {
        let node = self.node(id)?;
        if node.kind == NodeKind::Directory && !self.children(&node.path).is_empty() {
            return Err(VfsError::Collision(node.path.clone()));
        }
        let node = self.nodes.remove(&id).expect("checked");
        for p in &node.link_paths {
            self.path_index.remove(p);
        }
        Ok(node)
    }

    /// Records one write. Returns the new content version.
    pub fn write_content(&mut self, id: NodeId, writer: WriterClass) -> Result<u64> {
        let node = self.nodes.get_mut(&id).ok_or(VfsError::NotFound(id))?;
        if node.kind != NodeKind::Regular {
            return Err(VfsError::Kind {
                node: id,
                expected: NodeKind::Regular,
                actual: node.kind,
            });
        }
        node.content_version += 1;
        node.live_version = node.content_version;
        node.last_writer = Some(writer);
        Ok(node.content_version)
    }

    /// Swaps the dotted suffix of every alias of `id`: the part of the basename
    /// from its first dot onward becomes `.new_ext` (or is dropped when
    /// `new_ext` is empty). `a.txt` + `locked` gives `a.locked`, and
    /// `a.txt.tmp` + `txt` gives `a.txt`.
    pub fn rename_extension(&mut self, id: NodeId, new_ext: &str) -> Result<()> {
        let node = self.node(id)?;
        if node.kind != NodeKind::Regular {
            return Err(VfsError::Kind {
                node: id,
                expected: NodeKind::Regular,
                actual: node.kind,
            });
        }
        let renames: Vec<(String, String)> = node
            .link_paths
            .iter()
            .map(|p| (p.clone(), with_suffix(p, new_ext)))
            .collect();
        self.apply_renames(id, &renames)
    }

    /// Moves the primary path of `id` to `new_path` within the same image.
    pub fn rename_path(&mut self, id: NodeId, new_path: &str) -> Result<()> {
        validate_path(new_path)?;
        let node = self.node(id)?;
        let parent = parent_of(new_path);
        if parent != "/" && self.lookup(parent).is_none() {
            return Err(VfsError::PathNotFound(parent.to_string()));
        }
        let renames = vec![(node.path.clone(), new_path.to_string())];
        self.apply_renames(id, &renames)
    }

    fn apply_renames(&mut self, id: NodeId, renames: &[(String, String)]) -> Result<()> {
        for (_, to) in renames {
            if let Some(owner) = self.path_index.get(to) {
                if *owner != id {
                    return Err(VfsError::Collision(to.clone()));
                }
            }
        }
        let node = self.nodes.get_mut(&id).expect("checked by caller");
        for (from, _) in renames {
            node.link_paths.remove(from);
            self.path_index.remove(from);
        }
        for (from, to) in renames {
            node.link_paths.insert(to.clone());
            self.path_index.insert(to.clone(), id);
            if node.path == *from {
                node.path = to.clone();
            }
        }
        node.extension = extension_of(&node.path).to_string();
        Ok(())
    }

    /// Makes `version` the live content of `id` without touching the write
    /// counter or the last-writer tag.
    pub fn restore_live_version(&mut self, id: NodeId, version: u64) -> Result<()> {
        let node = self.nodes.get_mut(&id).ok_or(VfsError::NotFound(id))?;
        node.live_version = version;
        Ok(())
    }

    /// Snapshot of every regular file's live version, keyed by node.
    pub fn version_snapshot(&self) -> BTreeMap<NodeId, u64> {
        self.nodes
            .values()
            .filter(|n| n.is_regular())
            .map(|n| (n.node_id, n.live_version))
            .collect()
    }

    /// Checks every structural invariant of the image, describing the first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let mut from_nodes = BTreeSet::new();
        for (id, node) in &self.nodes {
            if *id != node.node_id {
                return Err(format!("node keyed {id} carries id {}", node.node_id));
            }
            if (node.content_version == 0) != node.last_writer.is_none() {
                return Err(format!("{id}: version/writer mismatch"));
            }
            if node.live_version > node.content_version {
                return Err(format!("{id}: live version ahead of content version"));
            }
            if node.link_paths.is_empty() || !node.link_paths.contains(&node.path) {
                return Err(format!("{id}: primary path missing from aliases"));
            }
            if node.extension != extension_of(&node.path) {
                return Err(format!("{id}: stale extension"));
            }
            for p in &node.link_paths {
                if !from_nodes.insert(p.clone()) {
                    return Err(format!("path {p:?} owned twice"));
                }
                if self.path_index.get(p) != Some(id) {
                    return Err(format!("path {p:?} not indexed to {id}"));
                }
            }
        }
        let from_index: BTreeSet<String> = self.path_index.keys().cloned().collect();
        if from_index != from_nodes {
            return Err("path index and node aliases disagree".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> VfsImage {
        seed_tree(&TreeSpec::new(vec![
            TreeEntry::dir("/victim"),
            TreeEntry::file("/victim/a.txt"),
        ]))
        .unwrap()
    }

    #[test]
    fn seeds_fresh_tree() {
        let img = small();
        assert_eq!(img.len(), 2);
        assert!(img
            .nodes()
            .all(|n| n.content_version() == 0 && n.last_writer().is_none()));
        assert_eq!(img.mount_kind(), MountKind::Xfs);
    }

    #[test]
    fn seeds_4385_files() {
        let img = seed_tree(&TreeSpec::generate("/victim", 4385, 8)).unwrap();
        let regular = img.nodes().filter(|n| n.is_regular()).count();
        assert_eq!(regular, 4385);
        // /victim plus ceil(4385 / 8) subdirectories
        assert_eq!(img.len() - regular, 1 + 549);
        img.check_invariants().unwrap();
    }

    #[test]
    fn rejects_duplicates_and_orphans() {
        let dup = TreeSpec::new(vec![
            TreeEntry::dir("/victim"),
            TreeEntry::file("/victim/a.txt"),
            TreeEntry::file("/victim/a.txt"),
        ]);
        assert!(matches!(seed_tree(&dup), Err(VfsError::Spec(_))));
        let orphan = TreeSpec::new(vec![TreeEntry::file("/victim/a.txt")]);
        assert!(matches!(seed_tree(&orphan), Err(VfsError::Spec(_))));
        let under_file = TreeSpec::new(vec![
            TreeEntry::file("/victim"),
            TreeEntry::file("/victim/a.txt"),
        ]);
        assert!(matches!(seed_tree(&under_file), Err(VfsError::Spec(_))));
    }

    #[test]
    fn loader_sorts_by_depth() {
        let spec = TreeSpec::from_json(
            r#"[{"path":"/victim/docs/a.txt","kind":"file"},
                {"path":"/victim/docs","kind":"dir"},
                {"path":"/victim","kind":"dir"}]"#,
        )
        .unwrap();
        let img = seed_tree(&spec).unwrap();
        assert_eq!(img.len(), 3);
        assert!(TreeSpec::from_json(r#"[{"path":"/a","kind":"file","x":1}]"#).is_err());
    }

    #[test]
    fn writes_bump_version() {
        let mut img = small();
        let id = img.lookup("/victim/a.txt").unwrap();
        assert_eq!(img.write_content(id, WriterClass::Malicious).unwrap(), 1);
        assert_eq!(
            img.node(id).unwrap().last_writer(),
            Some(WriterClass::Malicious)
        );
        for _ in 0..2 {
            img.write_content(id, WriterClass::Malicious).unwrap();
        }
        assert_eq!(img.write_content(id, WriterClass::Benign).unwrap(), 4);
        assert_eq!(
            img.node(id).unwrap().last_writer(),
            Some(WriterClass::Benign)
        );

        let dir = img.lookup("/victim").unwrap();
        assert!(matches!(
            img.write_content(dir, WriterClass::Benign),
            Err(VfsError::Kind { .. })
        ));
        assert_eq!(
            img.write_content(NodeId(99), WriterClass::Benign),
            Err(VfsError::NotFound(NodeId(99)))
        );
    }

    #[test]
    fn rename_extension_swaps_suffix() {
        let mut img = small();
        let id = img.lookup("/victim/a.txt").unwrap();
        img.rename_extension(id, "locked").unwrap();
        let node = img.node(id).unwrap();
        assert_eq!(node.path(), "/victim/a.locked");
        assert_eq!(node.extension(), "locked");
        assert_eq!(img.lookup("/victim/a.locked"), Some(id));
        assert_eq!(img.lookup("/victim/a.txt"), None);
    }

    #[test]
    fn rename_extension_restore_direction() {
        let mut img = small();
        let a = img.lookup("/victim/a.txt").unwrap();
        img.remove_node(a).unwrap();
        let tmp = img.create_copy("/victim/a.txt.tmp", 0, None).unwrap();
        img.rename_extension(tmp, "txt").unwrap();
        assert_eq!(img.node(tmp).unwrap().path(), "/victim/a.txt");
    }

    #[test]
    fn rename_extension_collision() {
        let mut img = small();
        img.create_node("/victim/a.locked", NodeKind::Regular)
            .unwrap();
        let id = img.lookup("/victim/a.txt").unwrap();
        assert_eq!(
            img.rename_extension(id, "locked"),
            Err(VfsError::Collision("/victim/a.locked".into()))
        );
        img.check_invariants().unwrap();
    }

    #[test]
    fn extension_rule() {
        assert_eq!(extension_of("/victim/a.txt"), "txt");
        assert_eq!(extension_of("/victim/a.txt.tmp"), "tmp");
        assert_eq!(extension_of("/victim/README"), "");
        assert_eq!(extension_of("/vic.tim/README"), "");
    }

    #[test]
    fn links_rename_together() {
        let mut img = small();
        let id = img.lookup("/victim/a.txt").unwrap();
        img.add_link(id, "/victim/b.txt").unwrap();
        img.rename_extension(id, "enc").unwrap();
        let node = img.node(id).unwrap();
        let links: Vec<_> = node.link_paths().iter().cloned().collect();
        assert_eq!(links, vec!["/victim/a.enc", "/victim/b.enc"]);
        img.check_invariants().unwrap();
    }

    #[derive(Debug, Clone)]
    enum Op {
        Write(usize, bool),
        Rename(usize, u8),
        Link(usize, u8),
        Move(usize, u8),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0..12usize, any::<bool>()).prop_map(|(n, m)| Op::Write(n, m)),
            (0..12usize, 0..4u8).prop_map(|(n, e)| Op::Rename(n, e)),
            (0..12usize, 0..6u8).prop_map(|(n, e)| Op::Link(n, e)),
            (0..12usize, 0..6u8).prop_map(|(n, e)| Op::Move(n, e)),
        ]
    }

    proptest! {
        #[test]
        fn invariants_hold_under_any_sequence(ops in proptest::collection::vec(op(), 0..60)) {
            let mut img = seed_tree(&TreeSpec::generate("/victim", 10, 4)).unwrap();
            let files: Vec<NodeId> = img.nodes().filter(|n| n.is_regular()).map(|n| n.node_id()).collect();
            let mut versions: BTreeMap<NodeId, u64> = files.iter().map(|id| (*id, 0)).collect();
            let exts = ["enc", "txt", "locked", ""];
            for op in ops {
                match op {
                    Op::Write(i, m) => {
                        let id = files[i % files.len()];
                        let w = if m { WriterClass::Malicious } else { WriterClass::Benign };
                        let v = img.write_content(id, w).unwrap();
                        let prev = versions.insert(id, v).unwrap();
                        prop_assert_eq!(v, prev + 1);
                    }
                    Op::Rename(i, e) => {
                        let id = files[i % files.len()];
                        let _ = img.rename_extension(id, exts[e as usize]);
                    }
                    Op::Link(i, e) => {
                        let id = files[i % files.len()];
                        let _ = img.add_link(id, &format!("/victim/link{e}"));
                    }
                    Op::Move(i, e) => {
                        let id = files[i % files.len()];
                        let _ = img.rename_path(id, &format!("/victim/d0000/m{e}.txt"));
                    }
                }
                prop_assert!(img.check_invariants().is_ok(), "{:?}", img.check_invariants());
                for id in &files {
                    prop_assert_eq!(img.node(*id).unwrap().content_version(), versions[id]);
                }
            }
        }
    }
}

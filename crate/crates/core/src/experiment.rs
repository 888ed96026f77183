//! Sweep runner: (hook x profile x seed) grids, reports, and log-replay verification.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{BackupPolicy, BackupQueue, DetectorParams};
use crate::events::EventLog;
use crate::metrics::{
    backed_encrypted_nodes, encrypted_nodes, render_summary, summarize, ConsistencyError,
    ExperimentReport, ReportCell, ReportFormat, RunCounts,
};
use crate::open_path::HookPoint;
use crate::oracle;
use crate::sim::{run_simulation, RunResult, SimOptions};
use crate::threat::{compile_profile, AttackScript, FamilyProfile};
use crate::vfs::{seed_tree_on, MountKind, NodeId, TreeEntry, TreeSpec, VfsImage};

pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.json");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedTree {
    pub root: String,
    pub files: usize,
    pub files_per_dir: usize,
    /// Entries added next to the generated tree (system directories, binaries).
    #[serde(default)]
    pub extra: Vec<TreeEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileRef {
    Shipped(String),
    Inline(FamilyProfile),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueConfig {
    /// `null` for an unbounded queue.
    pub capacity: Option<usize>,
    pub service_latency: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub enabled: bool,
    pub accuracy: f64,
    pub fpr: f64,
    pub kill_threshold: u32,
}

impl DetectorConfig {
    fn params(&self) -> DetectorParams {
        DetectorParams {
            accuracy: self.accuracy,
            fpr: self.fpr,
            kill_threshold: self.kill_threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpenPathConfig {
    #[serde(default)]
    pub fmode_opened_fraction: f64,
    #[serde(default)]
    pub permission_denied_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_format")]
    pub format: ReportFormat,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn default_format() -> ReportFormat {
    ReportFormat::Table
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            format: ReportFormat::Table,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// JSON tree listing, relative to the config file.
    #[serde(default)]
    pub tree_spec: Option<PathBuf>,
    #[serde(default)]
    pub tree: Option<GeneratedTree>,
    #[serde(default)]
    pub mount_kind: MountKind,
    /// Path handed to profiles that accept a target argument.
    pub attack_root: String,
    pub profiles: Vec<ProfileRef>,
    pub hooks: Vec<HookPoint>,
    pub protected_directories: Vec<String>,
    pub queue: QueueConfig,
    pub detector: DetectorConfig,
    #[serde(default)]
    pub open_path: OpenPathConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output: OutputConfig,
    /// Where `verify` writes per-run event logs.
    #[serde(default)]
    pub log_dir: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn default_config() -> Self {
        Self::from_json(DEFAULT_CONFIG).expect("bundled default config parses")
    }

    fn resolve_path(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Loads every referenced input, validates, and compiles the workload scripts.
    pub fn resolve(&self) -> Result<Experiment, ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        if self.hooks.is_empty() {
            return Err(invalid("at least one hook is required".into()));
        }
        if self.profiles.is_empty() {
            return Err(invalid("at least one profile is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required".into()));
        }
        let tree = match (&self.tree_spec, &self.tree) {
            (Some(path), None) => {
                let path = self.resolve_path(path);
                let text = fs::read_to_string(&path).map_err(|source| ConfigError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                TreeSpec::from_json(&text).map_err(|e| invalid(e.to_string()))?
            }
            (None, Some(gen)) => {
                let mut spec = TreeSpec::generate(&gen.root, gen.files, gen.files_per_dir);
                spec.entries.extend(gen.extra.iter().cloned());
                spec
            }
            _ => {
                return Err(invalid(
                    "exactly one of tree_spec and tree is required".into(),
                ))
            }
        };
        let image = seed_tree_on(&tree, self.mount_kind).map_err(|e| invalid(e.to_string()))?;

        let mut profiles = Vec::new();
        for p in &self.profiles {
            let profile = match p {
                ProfileRef::Shipped(name) => {
                    FamilyProfile::by_name(name).map_err(|e| invalid(e.to_string()))?
                }
                ProfileRef::Inline(p) => {
                    p.validate().map_err(|e| invalid(e.to_string()))?;
                    p.clone()
                }
            };
            if profiles
                .iter()
                .any(|q: &FamilyProfile| q.name == profile.name)
            {
                return Err(invalid(format!("profile {:?} listed twice", profile.name)));
            }
            profiles.push(profile);
        }
        let scripts = profiles
            .iter()
            .map(|p| compile_profile(p, &image, &self.attack_root))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| invalid(e.to_string()))?;

        let policy = BackupPolicy::new(self.protected_directories.iter().cloned())
            .map_err(|e| invalid(e.to_string()))?;
        if self.queue.capacity == Some(0) {
            return Err(invalid("queue capacity must be positive or null".into()));
        }
        let detector = self.detector.params();
        detector.validate().map_err(invalid)?;
        for (name, v) in [
            (
                "fmode_opened_fraction",
                self.open_path.fmode_opened_fraction,
            ),
            (
                "permission_denied_fraction",
                self.open_path.permission_denied_fraction,
            ),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} {v} outside [0, 1]")));
            }
        }

        let mut hooks = self.hooks.clone();
        hooks.sort();
        hooks.dedup();
        let mut seeds = self.seeds.clone();
        seeds.sort();
        seeds.dedup();

        let digest = {
            let semantic = json!({
                "tree": tree,
                "mount_kind": self.mount_kind,
                "attack_root": self.attack_root,
                "profiles": profiles,
                "hooks": hooks,
                "protected_directories": policy.protected_directories(),
                "queue": self.queue,
                "detector": if self.detector.enabled { Some(detector) } else { None },
                "open_path": self.open_path,
                "seeds": seeds,
            });
            let bytes = serde_json::to_vec(&semantic).expect("config serializes");
            hex::encode(&Sha256::digest(&bytes)[..8])
        };

        Ok(Experiment {
            image,
            profiles,
            scripts,
            hooks,
            seeds,
            policy,
            queue: BackupQueue::new(self.queue.capacity, self.queue.service_latency),
            detector: self.detector.enabled.then_some(detector),
            open_path: self.open_path,
            digest,
        })
    }
}

/// A validated, ready-to-run experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    image: VfsImage,
    profiles: Vec<FamilyProfile>,
    scripts: Vec<AttackScript>,
    hooks: Vec<HookPoint>,
    seeds: Vec<u64>,
    policy: BackupPolicy,
    queue: BackupQueue,
    detector: Option<DetectorParams>,
    open_path: OpenPathConfig,
    digest: String,
}

/// Deliberate accounting bugs, used to prove that `verify` catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Counts every backed-up encrypted file in B, stale or not.
    CountStaleBackups,
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub hook: HookPoint,
    pub family: String,
    pub seed: u64,
    pub counts: RunCounts,
    pub encrypted: BTreeSet<NodeId>,
    pub backed: BTreeSet<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub config_digest: String,
    /// One report per seed, in seed order.
    pub reports: Vec<ExperimentReport>,
}

impl Experiment {
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn image(&self) -> &VfsImage {
        &self.image
    }

    pub fn hooks(&self) -> &[HookPoint] {
        &self.hooks
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn profiles(&self) -> &[FamilyProfile] {
        &self.profiles
    }

    pub fn queue_capacity(&self) -> Option<usize> {
        self.queue.capacity()
    }

    /// Keeps only the named hook / profile / seed. `None` leaves a dimension alone.
    pub fn restrict(
        mut self,
        hook: Option<HookPoint>,
        family: Option<&str>,
        seed: Option<u64>,
    ) -> Result<Self, ConfigError> {
        if let Some(h) = hook {
            self.hooks = vec![h];
        }
        if let Some(f) = family {
            let i = self
                .profiles
                .iter()
                .position(|p| p.name == f)
                .ok_or_else(|| ConfigError::Invalid(format!("profile {f:?} not in config")))?;
            self.profiles = vec![self.profiles.swap_remove(i)];
            self.scripts = vec![self.scripts.swap_remove(i)];
        }
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        // the digest covers the grid actually run
        self.digest = {
            let bytes = format!(
                "{}|{:?}|{:?}|{:?}",
                self.digest,
                self.hooks,
                self.profiles.iter().map(|p| &p.name).collect::<Vec<_>>(),
                self.seeds
            );
            hex::encode(&Sha256::digest(bytes.as_bytes())[..8])
        };
        Ok(self)
    }

    fn grid(&self) -> Vec<(HookPoint, usize, u64)> {
        let mut cells = Vec::new();
        for &hook in &self.hooks {
            for i in 0..self.scripts.len() {
                for &seed in &self.seeds {
                    cells.push((hook, i, seed));
                }
            }
        }
        cells
    }

    pub fn run_cell(&self, hook: HookPoint, script: usize, seed: u64) -> RunResult {
        let options = SimOptions {
            detector: self.detector,
            fmode_opened_fraction: self.open_path.fmode_opened_fraction,
            permission_denied_fraction: self.open_path.permission_denied_fraction,
            ..SimOptions::new(hook)
        };
        run_simulation(
            &self.image,
            &self.scripts[script],
            &self.policy,
            &self.queue,
            &options,
            seed,
        )
    }

    pub fn run_cells(&self, fault: Option<Fault>) -> Vec<CellOutcome> {
        let mut out: Vec<CellOutcome> = self
            .grid()
            .into_par_iter()
            .map(|(hook, i, seed)| tally(&self.run_cell(hook, i, seed), fault))
            .collect();
        out.sort_by(|a, b| (a.hook, &a.family, a.seed).cmp(&(b.hook, &b.family, b.seed)));
        out
    }

    pub fn run_sweep(&self) -> Result<Sweep, ConsistencyError> {
        self.sweep_with(None)
    }

    pub fn sweep_with(&self, fault: Option<Fault>) -> Result<Sweep, ConsistencyError> {
        let cells = self.run_cells(fault);
        let mut reports = Vec::new();
        for &seed in &self.seeds {
            let mut grid = Vec::new();
            for c in cells.iter().filter(|c| c.seed == seed) {
                grid.push(ReportCell::new(c.hook, c.family.clone(), c.counts)?);
            }
            reports.push(ExperimentReport::new(self.digest.clone(), seed, grid));
        }
        Ok(Sweep {
            config_digest: self.digest.clone(),
            reports,
        })
    }

    /// Runs every cell, writes its log as `<hook>_<family>_<seed>.log` under
    /// `log_dir`, reads it back, recounts with the oracle and compares.
    pub fn verify_with_oracle(
        &self,
        log_dir: &Path,
        fault: Option<Fault>,
    ) -> io::Result<VerificationOutcome> {
        fs::create_dir_all(log_dir)?;
        let results: Vec<io::Result<(CellOutcome, PathBuf)>> = self
            .grid()
            .into_par_iter()
            .map(|(hook, i, seed)| {
                let run = self.run_cell(hook, i, seed);
                let path = log_dir.join(log_file_name(hook, &run.family, seed));
                let file = fs::File::create(&path)?;
                run.log.write_jsonl(io::BufWriter::new(file))?;
                Ok((tally(&run, fault), path))
            })
            .collect();
        let mut checked = Vec::new();
        for r in results {
            let (cell, path) = r?;
            let diff = self.check_against_log(&cell, &path)?;
            checked.push((cell, diff));
        }
        checked.sort_by(|(a, _), (b, _)| {
            (a.hook, &a.family, a.seed).cmp(&(b.hook, &b.family, b.seed))
        });
        Ok(VerificationOutcome {
            cells_checked: checked.len(),
            diffs: checked.into_iter().filter_map(|(_, d)| d).collect(),
        })
    }

    /// Recounts one cell from the log at `path`.
    pub fn check_against_log(
        &self,
        cell: &CellOutcome,
        path: &Path,
    ) -> io::Result<Option<CellDiff>> {
        let file = fs::File::open(path)
            .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        let log = EventLog::read_jsonl(BufReader::new(file))?;
        let replayed = oracle::replay(&log, self.queue.capacity());
        Ok(compare(cell, &replayed))
    }
}

pub fn log_file_name(hook: HookPoint, family: &str, seed: u64) -> String {
    format!("{}_{family}_{seed}.log", hook.name())
}

fn tally(run: &RunResult, fault: Option<Fault>) -> CellOutcome {
    let encrypted = encrypted_nodes(&run.image, &run.pre_attack);
    let backed = match fault {
        None => backed_encrypted_nodes(run.engine.ledger(), &run.image, &run.pre_attack),
        Some(Fault::CountStaleBackups) => encrypted
            .iter()
            .filter(|n| run.engine.ledger().is_backed_up(**n))
            .copied()
            .collect(),
    };
    CellOutcome {
        hook: run.hook,
        family: run.family.clone(),
        seed: run.seed,
        counts: RunCounts {
            b_count: backed.len() as u64,
            e_count: encrypted.len() as u64,
            dropped_events: run.engine.queue().dropped(),
            killed_at_tick: run.killed_at,
        },
        encrypted,
        backed,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellDiff {
    pub hook: HookPoint,
    pub family: String,
    pub seed: u64,
    /// (simulator, oracle)
    pub b: (u64, u64),
    pub e: (u64, u64),
    pub drops: (u64, u64),
    pub notes: Vec<String>,
}

impl std::fmt::Display for CellDiff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} / {} / seed {}: B {} vs {}, E {} vs {}, drops {} vs {}",
            self.hook,
            self.family,
            self.seed,
            self.b.0,
            self.b.1,
            self.e.0,
            self.e.1,
            self.drops.0,
            self.drops.1
        )?;
        for n in &self.notes {
            write!(f, "\n    {n}")?;
        }
        Ok(())
    }
}

fn compare(cell: &CellOutcome, oracle: &oracle::OracleCounts) -> Option<CellDiff> {
    let mut notes = Vec::new();
    for n in cell.encrypted.symmetric_difference(&oracle.encrypted) {
        let side = if cell.encrypted.contains(n) {
            "simulator"
        } else {
            "oracle"
        };
        notes.push(format!("node {n} counted in E only by the {side}"));
    }
    for n in cell.backed.symmetric_difference(&oracle.backed) {
        let side = if cell.backed.contains(n) {
            "simulator"
        } else {
            "oracle"
        };
        notes.push(format!("node {n} counted in B only by the {side}"));
    }
    for i in &oracle.spurious_drops {
        notes.push(format!("log line {} drops below queue capacity", i + 1));
    }
    let diff = CellDiff {
        hook: cell.hook,
        family: cell.family.clone(),
        seed: cell.seed,
        b: (cell.counts.b_count, oracle.b()),
        e: (cell.counts.e_count, oracle.e()),
        drops: (cell.counts.dropped_events, oracle.drops),
        notes,
    };
    let agree = diff.b.0 == diff.b.1
        && diff.e.0 == diff.e.1
        && diff.drops.0 == diff.drops.1
        && diff.notes.is_empty();
    (!agree).then_some(diff)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationOutcome {
    pub cells_checked: usize,
    pub diffs: Vec<CellDiff>,
}

impl VerificationOutcome {
    pub fn passed(&self) -> bool {
        self.diffs.is_empty()
    }
}

impl Sweep {
    /// One seed renders exactly as its report. Several seeds render as a
    /// table per seed plus a summary, a CSV with a leading `seed` column, or
    /// a JSON object holding every report.
    pub fn render(&self, format: ReportFormat) -> String {
        if let [only] = self.reports.as_slice() {
            let mut s = only.render(format);
            if format == ReportFormat::Table {
                s.push('\n');
                s += &render_summary(&summarize(&self.reports));
            }
            return s;
        }
        match format {
            ReportFormat::Table => {
                let mut s = String::new();
                for r in &self.reports {
                    s += &r.render(ReportFormat::Table);
                    s.push('\n');
                }
                s += &render_summary(&summarize(&self.reports));
                s
            }
            ReportFormat::Csv => {
                let mut s = String::from("seed,hook,family,b,e,ratio\n");
                for r in &self.reports {
                    for c in r.cells() {
                        let _ = writeln!(
                            s,
                            "{},{},{},{},{},{}",
                            r.seed,
                            c.hook.name(),
                            c.family,
                            c.counts.b_count,
                            c.counts.e_count,
                            c.ratio
                        );
                    }
                }
                s
            }
            ReportFormat::Json => {
                let v = json!({
                    "config_digest": self.config_digest,
                    "seeds": self.reports.iter().map(|r| r.seed).collect::<Vec<_>>(),
                    "reports": self.reports.iter().map(|r| r.to_json_value()).collect::<Vec<_>>(),
                });
                let mut s = serde_json::to_string_pretty(&v).expect("report serializes");
                s.push('\n');
                s
            }
        }
    }
}

//! Deterministic simulator of the Linux file-open path with an open-triggered
//! backup engine, ransomware workload generators and backup-ratio metrics.

pub mod engine;
pub mod events;
pub mod experiment;
pub mod metrics;
pub mod open_path;
pub mod oracle;
pub mod sim;
pub mod threat;
pub mod vfs;

pub use engine::{BackupPolicy, BackupQueue, DetectorParams, Rofbs};
pub use experiment::{Experiment, ExperimentConfig, Fault, Sweep};
pub use metrics::{backup_ratio, ExperimentReport, Ratio, ReportFormat};
pub use open_path::HookPoint;
pub use sim::{run_simulation, RunResult, SimOptions};
pub use threat::{compile_profile, FamilyProfile};
pub use vfs::{NodeId, TreeSpec, VfsImage};

//! B / E accounting, Backup Ratio and report rendering.
//!
//! `E` counts files whose last write was malicious (restored files included:
//! they were encrypted, restoring them only makes them recoverable). `B`
//! counts those of them whose backup holds the pre-attack content.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::engine::BackupLedger;
use crate::open_path::HookPoint;
use crate::vfs::{NodeId, VfsImage, WriterClass};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("backed-up count {b} exceeds encrypted count {e}")]
pub struct ConsistencyError {
    pub b: u64,
    pub e: u64,
}

pub fn encrypted_nodes(image: &VfsImage, pre_attack: &BTreeMap<NodeId, u64>) -> BTreeSet<NodeId> {
    image
        .nodes()
        .filter(|n| n.last_writer() == Some(WriterClass::Malicious))
        .filter(|n| {
            pre_attack
                .get(&n.node_id())
                .is_some_and(|v| *v != n.content_version())
        })
        .map(|n| n.node_id())
        .collect()
}

pub fn count_encrypted(image: &VfsImage, pre_attack: &BTreeMap<NodeId, u64>) -> u64 {
    encrypted_nodes(image, pre_attack).len() as u64
}

pub fn backed_encrypted_nodes(
    ledger: &BackupLedger,
    image: &VfsImage,
    pre_attack: &BTreeMap<NodeId, u64>,
) -> BTreeSet<NodeId> {
    encrypted_nodes(image, pre_attack)
        .into_iter()
        .filter(|id| {
            ledger
                .artifact(*id)
                .is_some_and(|a| pre_attack.get(id) == Some(&a.captured_version))
        })
        .collect()
}

pub fn count_backed_encrypted(
    ledger: &BackupLedger,
    image: &VfsImage,
    pre_attack: &BTreeMap<NodeId, u64>,
) -> u64 {
    backed_encrypted_nodes(ledger, image, pre_attack).len() as u64
}

/// A Backup Ratio kept as the exact fraction `b / e`, or NA when nothing was encrypted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ratio {
    Percent { b: u64, e: u64 },
    NotApplicable,
}

impl Ratio {
    /// Percentage in tenths, rounded half-up: `floor(1000 b / e + 1/2)`.
    pub fn tenths(self) -> Option<u64> {
        match self {
            Ratio::Percent { b, e } => {
                let (b, e) = (u128::from(b), u128::from(e));
                Some(((2000 * b + e) / (2 * e)) as u64)
            }
            Ratio::NotApplicable => None,
        }
    }

    pub fn as_f64(self) -> Option<f64> {
        self.tenths().map(|t| t as f64 / 10.0)
    }

    pub fn to_json(self) -> Value {
        match self.as_f64() {
            Some(v) => json!(v),
            None => json!("NA"),
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tenths() {
            Some(t) => write!(f, "{}.{}", t / 10, t % 10),
            None => f.write_str("NA"),
        }
    }
}

pub fn backup_ratio(b: u64, e: u64) -> Result<Ratio, ConsistencyError> {
    if b > e {
        return Err(ConsistencyError { b, e });
    }
    if e == 0 {
        Ok(Ratio::NotApplicable)
    } else {
        Ok(Ratio::Percent { b, e })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub b_count: u64,
    pub e_count: u64,
    pub dropped_events: u64,
    pub killed_at_tick: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportCell {
    pub hook: HookPoint,
    pub family: String,
    pub counts: RunCounts,
    pub ratio: Ratio,
}

impl ReportCell {
    pub fn new(
        hook: HookPoint,
        family: impl Into<String>,
        counts: RunCounts,
    ) -> Result<Self, ConsistencyError> {
        Ok(Self {
            hook,
            family: family.into(),
            ratio: backup_ratio(counts.b_count, counts.e_count)?,
            counts,
        })
    }
}

/// One seed's (hook x family) grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentReport {
    pub config_digest: String,
    pub seed: u64,
    cells: Vec<ReportCell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown format {other:?} (table, csv, json)")),
        }
    }
}

impl ExperimentReport {
    pub fn new(config_digest: impl Into<String>, seed: u64, mut cells: Vec<ReportCell>) -> Self {
        cells.sort_by(|a, b| (a.hook, &a.family).cmp(&(b.hook, &b.family)));
        Self {
            config_digest: config_digest.into(),
            seed,
            cells,
        }
    }

    pub fn cells(&self) -> &[ReportCell] {
        &self.cells
    }

    pub fn cell(&self, hook: HookPoint, family: &str) -> Option<&ReportCell> {
        self.cells
            .iter()
            .find(|c| c.hook == hook && c.family == family)
    }

    fn families(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.cells.iter().map(|c| c.family.as_str()).collect();
        set.into_iter().collect()
    }

    fn hooks(&self) -> Vec<HookPoint> {
        let set: BTreeSet<HookPoint> = self.cells.iter().map(|c| c.hook).collect();
        set.into_iter().collect()
    }

    pub fn to_json_value(&self) -> Value {
        json!({
            "config_digest": self.config_digest,
            "seed": self.seed,
            "cells": self.cells.iter().map(|c| json!({
                "hook": c.hook.name(),
                "family": c.family,
                "b": c.counts.b_count,
                "e": c.counts.e_count,
                "ratio": c.ratio.to_json(),
                "dropped": c.counts.dropped_events,
                "killed_at_tick": c.counts.killed_at_tick,
            })).collect::<Vec<_>>(),
        })
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => {
                let mut s = serde_json::to_string_pretty(&self.to_json_value())
                    .expect("report values serialize");
                s.push('\n');
                s
            }
            ReportFormat::Csv => {
                let mut s = String::from("hook,family,b,e,ratio\n");
                for c in &self.cells {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{}",
                        c.hook.name(),
                        c.family,
                        c.counts.b_count,
                        c.counts.e_count,
                        c.ratio
                    );
                }
                s
            }
            ReportFormat::Table => self.render_table(),
        }
    }

    fn render_table(&self) -> String {
        let families = self.families();
        let hooks = self.hooks();
        let width = families.iter().map(|f| f.len()).max().unwrap_or(0).max(11);
        let grid = |title: &str, cell: &dyn Fn(&ReportCell) -> String| {
            let mut s = String::new();
            let _ = writeln!(s, "{title}");
            let _ = write!(s, "{:<20}", "hook");
            for f in &families {
                let _ = write!(s, "  {f:>width$}");
            }
            s.push('\n');
            for h in &hooks {
                let _ = write!(s, "{:<20}", h.name());
                for f in &families {
                    let text = self.cell(*h, f).map(cell).unwrap_or_else(|| "-".into());
                    let _ = write!(s, "  {text:>width$}");
                }
                s.push('\n');
            }
            s
        };
        let mut out = format!("seed {}  config {}\n\n", self.seed, self.config_digest);
        out += &grid(
            "Encrypted files with backups / total encrypted (B / E)",
            &|c| format!("{} / {}", c.counts.b_count, c.counts.e_count),
        );
        out.push('\n');
        out += &grid("Backup Ratio (%)", &|c| c.ratio.to_string());
        out.push('\n');
        out += &grid("Dropped hook events / kill tick", &|c| {
            let kill = c
                .counts
                .killed_at_tick
                .map_or_else(|| "-".to_string(), |t| t.to_string());
            format!("{} / {}", c.counts.dropped_events, kill)
        });
        out
    }
}

/// Mean / min / max of B, E and the ratio over seeds for one (hook, family).
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub hook: HookPoint,
    pub family: String,
    pub runs: usize,
    pub b: (f64, u64, u64),
    pub e: (f64, u64, u64),
    /// Over runs with a defined ratio only.
    pub ratio: Option<(f64, f64, f64)>,
}

pub fn summarize(reports: &[ExperimentReport]) -> Vec<CellSummary> {
    let mut groups: BTreeMap<(HookPoint, String), Vec<&ReportCell>> = BTreeMap::new();
    for r in reports {
        for c in r.cells() {
            groups
                .entry((c.hook, c.family.clone()))
                .or_default()
                .push(c);
        }
    }
    let stats = |xs: Vec<u64>| {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().sum::<u64>() as f64 / n;
        (
            mean,
            xs.iter().copied().min().unwrap_or(0),
            xs.iter().copied().max().unwrap_or(0),
        )
    };
    groups
        .into_iter()
        .map(|((hook, family), cells)| {
            let ratios: Vec<f64> = cells.iter().filter_map(|c| c.ratio.as_f64()).collect();
            let ratio = (!ratios.is_empty()).then(|| {
                let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
                let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
                let max = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (mean, min, max)
            });
            CellSummary {
                hook,
                runs: cells.len(),
                b: stats(cells.iter().map(|c| c.counts.b_count).collect()),
                e: stats(cells.iter().map(|c| c.counts.e_count).collect()),
                ratio,
                family,
            }
        })
        .collect()
}

pub fn render_summary(summary: &[CellSummary]) -> String {
    let mut s = String::from("Summary over seeds (mean [min, max])\n");
    let _ = writeln!(
        s,
        "{:<20}  {:<12}  {:>22}  {:>22}  {:>24}",
        "hook", "family", "B", "E", "ratio %"
    );
    for c in summary {
        let ratio = match c.ratio {
            Some((m, lo, hi)) => format!("{m:.1} [{lo:.1}, {hi:.1}]"),
            None => "NA".into(),
        };
        let _ = writeln!(
            s,
            "{:<20}  {:<12}  {:>22}  {:>22}  {:>24}",
            c.hook.name(),
            c.family,
            format!("{:.1} [{}, {}]", c.b.0, c.b.1, c.b.2),
            format!("{:.1} [{}, {}]", c.e.0, c.e.1, c.e.2),
            ratio
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{create_backup_file, BackupPolicy};
    use crate::vfs::{seed_tree, TreeSpec};

    #[test]
    fn ratio_rendering() {
        let r = |b, e| backup_ratio(b, e).unwrap().to_string();
        assert_eq!(r(33, 40), "82.5");
        assert_eq!(r(18, 18), "100.0");
        assert_eq!(r(9, 32), "28.1");
        assert_eq!(r(0, 5), "0.0");
        assert_eq!(backup_ratio(0, 0).unwrap(), Ratio::NotApplicable);
        assert_eq!(r(0, 0), "NA");
        assert_eq!(backup_ratio(5, 4), Err(ConsistencyError { b: 5, e: 4 }));
    }

    #[test]
    fn rounds_half_up() {
        // 1/16 = 6.25 %, 1/80 = 1.25 %, 3/80 = 3.75 %
        assert_eq!(backup_ratio(1, 16).unwrap().to_string(), "6.3");
        assert_eq!(backup_ratio(1, 80).unwrap().to_string(), "1.3");
        assert_eq!(backup_ratio(3, 80).unwrap().to_string(), "3.8");
        assert_eq!(backup_ratio(1, 3).unwrap().to_string(), "33.3");
        assert_eq!(backup_ratio(2, 3).unwrap().to_string(), "66.7");
    }

    fn setup() -> (VfsImage, BackupLedger, BTreeMap<NodeId, u64>, Vec<NodeId>) {
        let img = seed_tree(&TreeSpec::generate("/victim", 10, 5)).unwrap();
        let pre = crate::sim::content_snapshot(&img);
        let files: Vec<NodeId> = pre.keys().copied().collect();
        (img, BackupLedger::default(), pre, files)
    }

    #[test]
    fn restored_files_stay_encrypted() {
        let (mut img, mut ledger, pre, files) = setup();
        let policy = BackupPolicy::new(["/victim"]).unwrap();
        for &f in &files[..7] {
            create_backup_file(&policy, &mut ledger, &mut img, f, 0).unwrap();
            img.write_content(f, WriterClass::Malicious).unwrap();
        }
        for &f in &files[..3] {
            crate::engine::restore_backup(&ledger, &mut img, f, true);
        }
        assert_eq!(count_encrypted(&img, &pre), 7);
        assert_eq!(count_backed_encrypted(&ledger, &img, &pre), 7);
    }

    #[test]
    fn writer_filter() {
        let (mut img, ledger, pre, files) = setup();
        assert_eq!(count_encrypted(&img, &pre), 0);
        for &f in &files {
            img.write_content(f, WriterClass::Benign).unwrap();
        }
        assert_eq!(count_encrypted(&img, &pre), 0);
        assert_eq!(count_backed_encrypted(&ledger, &img, &pre), 0);
    }

    #[test]
    fn stale_and_unencrypted_backups_do_not_count() {
        let (mut img, mut ledger, pre, files) = setup();
        let policy = BackupPolicy::new(["/victim"]).unwrap();
        // stale: written first, backed up after
        img.write_content(files[0], WriterClass::Malicious).unwrap();
        create_backup_file(&policy, &mut ledger, &mut img, files[0], 1).unwrap();
        // fresh backup, then encrypted
        create_backup_file(&policy, &mut ledger, &mut img, files[1], 1).unwrap();
        img.write_content(files[1], WriterClass::Malicious).unwrap();
        // backed up, never encrypted
        create_backup_file(&policy, &mut ledger, &mut img, files[2], 1).unwrap();

        let stale = ledger.artifact(files[0]).unwrap();
        assert_ne!(stale.captured_version, pre[&files[0]]);
        assert_eq!(count_encrypted(&img, &pre), 2);
        assert_eq!(
            backed_encrypted_nodes(&ledger, &img, &pre),
            BTreeSet::from([files[1]])
        );
    }

    fn one_cell() -> ExperimentReport {
        let counts = RunCounts {
            b_count: 18,
            e_count: 18,
            dropped_events: 0,
            killed_at_tick: Some(4),
        };
        ExperimentReport::new(
            "abc",
            7,
            vec![ReportCell::new(HookPoint::XfsFileOpen, "conti-like", counts).unwrap()],
        )
    }

    #[test]
    fn renders_table_csv_json() {
        let r = one_cell();
        let table = r.render(ReportFormat::Table);
        assert!(table.contains("100.0"));
        assert!(table.contains("18 / 18"));
        assert_eq!(table, one_cell().render(ReportFormat::Table));
        assert_eq!(
            r.render(ReportFormat::Csv),
            "hook,family,b,e,ratio\nxfs_file_open,conti-like,18,18,100.0\n"
        );
        let v: Value = serde_json::from_str(&r.render(ReportFormat::Json)).unwrap();
        assert_eq!(v["config_digest"], "abc");
        assert_eq!(v["seed"], 7);
        assert_eq!(v["cells"][0]["ratio"], json!(100.0));
        assert_eq!(v["cells"][0]["hook"], "xfs_file_open");
    }

    #[test]
    fn na_ratio_in_json() {
        let counts = RunCounts {
            b_count: 0,
            e_count: 0,
            dropped_events: 0,
            killed_at_tick: None,
        };
        let r = ExperimentReport::new(
            "d",
            1,
            vec![ReportCell::new(HookPoint::MayOpen, "benign", counts).unwrap()],
        );
        let v: Value = serde_json::from_str(&r.render(ReportFormat::Json)).unwrap();
        assert_eq!(v["cells"][0]["ratio"], "NA");
        assert!(r
            .render(ReportFormat::Csv)
            .ends_with("may_open,benign,0,0,NA\n"));
    }

    #[test]
    fn summary_stats() {
        let mk = |seed, b, e| {
            ExperimentReport::new(
                "d",
                seed,
                vec![ReportCell::new(
                    HookPoint::MayOpen,
                    "x",
                    RunCounts {
                        b_count: b,
                        e_count: e,
                        dropped_events: 0,
                        killed_at_tick: None,
                    },
                )
                .unwrap()],
            )
        };
        let s = summarize(&[mk(1, 1, 2), mk(2, 3, 4), mk(3, 0, 0)]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].runs, 3);
        assert_eq!(s[0].b, (4.0 / 3.0, 0, 3));
        assert_eq!(s[0].ratio, Some((62.5, 50.0, 75.0)));
        assert!(render_summary(&s).contains("62.5 [50.0, 75.0]"));
    }

    proptest::proptest! {
        #[test]
        fn ratio_bounds(e in 1u64..100_000, frac in 0.0f64..=1.0) {
            let b = ((e as f64) * frac).floor() as u64;
            let r = backup_ratio(b, e).unwrap();
            let v = r.as_f64().unwrap();
            proptest::prop_assert!((0.0..=100.0).contains(&v));
            let exact = 100.0 * b as f64 / e as f64;
            proptest::prop_assert!((v - exact).abs() <= 0.05 + 1e-9);
        }
    }
}

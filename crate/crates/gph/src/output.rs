//! CSV and JSON emission.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so fixed inputs
//! give byte-identical files. Wall time goes to the manifest only.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use gph_core::analysis::{StudyReport, Table};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::run::Invariant;

pub fn write_table_csv(table: &Table, path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(&table.columns)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| format!("{v}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.json` and one `<study>_<table>.csv` per table; returns the file names.
pub fn write_report(report: &StudyReport, dir: &Path) -> anyhow::Result<Vec<String>> {
    let mut files = Vec::new();
    for t in &report.tables {
        let name = format!("{}_{}.csv", report.study, t.name);
        write_table_csv(t, &dir.join(&name))?;
        files.push(name);
    }
    let json = serde_json::to_string_pretty(report)?;
    fs::write(dir.join("report.json"), json + "\n")?;
    files.push("report.json".into());
    Ok(files)
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub gph: &'static str,
    pub snapshot_format: u32,
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub config: &'a ExperimentConfig,
    pub versions: Versions,
    pub wall_time_s: f64,
    pub warnings: &'a [String],
    pub invariants: &'a [Invariant],
    pub outputs: &'a [String],
}

pub fn write_manifest(manifest: &Manifest<'_>, dir: &Path) -> anyhow::Result<PathBuf> {
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(path)
}

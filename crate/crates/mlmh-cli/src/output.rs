//! Deterministic result files.
//!
//! Tables go to CSV, nested reports to JSON. Every file embeds the same
//! metadata: code version, master seed, and the resolved configuration echo.
//! In CSV files the metadata rides in `#`-prefixed comment lines above the
//! header; the rows themselves are plain RFC-4180 with `.` as the decimal
//! separator. Given the same configuration and seed, every byte of every
//! file reproduces exactly.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::Context;
use serde_json::json;

use crate::config::RunConfig;

/// Metadata embedded in every output file.
pub struct Meta<'a> {
    pub config: &'a RunConfig,
}

impl Meta<'_> {
    /// Code version string.
    pub fn version() -> &'static str {
        env!("CARGO_PKG_VERSION")
    }

    /// Metadata as a JSON object.
    pub fn json(&self) -> serde_json::Value {
        json!({
            "version": Self::version(),
            "master_seed": self.config.master_seed,
            "config": self.config,
        })
    }
}

/// Formats one numeric cell: shortest decimal that round-trips.
pub fn cell<T: ToString>(v: T) -> String {
    v.to_string()
}

/// Formats an optional cell; `None` becomes an empty field.
pub fn opt_cell<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes a CSV table with leading `#` metadata comments, a mandatory
/// header, and one record per row.
pub fn write_csv(
    path: &Path,
    meta: &Meta,
    notes: &[String],
    header: &[&str],
    rows: &[Vec<String>],
) -> anyhow::Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    writeln!(buf, "# mlmh {}", Meta::version())?;
    writeln!(buf, "# master_seed = {}", meta.config.master_seed)?;
    writeln!(buf, "# config = {}", serde_json::to_string(meta.config)?)?;
    for note in notes {
        writeln!(buf, "# {note}")?;
    }
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(header)?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        w.write_record(row)?;
    }
    let buf = w.into_inner()?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Writes a JSON report with the metadata object under `meta` and the given
/// payload fields at top level. Keys serialize in sorted order, so reruns
/// byte-reproduce the file.
pub fn write_json(path: &Path, meta: &Meta, payload: serde_json::Value) -> anyhow::Result<()> {
    let mut doc = match payload {
        serde_json::Value::Object(map) => map,
        other => {
            let mut map = serde_json::Map::new();
            map.insert("result".to_string(), other);
            map
        }
    };
    doc.insert("meta".to_string(), meta.json());
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(doc))?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

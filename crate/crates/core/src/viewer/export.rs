use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use uuid::Uuid;

use super::{Merged, ViewerError};
use crate::model::RecordBody;

/// Flatten a payload into `(column, cell)` pairs. Nested object keys are
/// joined with dots; arrays become compact JSON cells; null is empty.
pub fn flatten_payload(payload: &Value) -> Vec<(String, String)> {
    let mut out = Vec::new();
    match payload {
        Value::Object(map) => flatten_into("", map, &mut out),
        other => out.push(("value".to_string(), cell(other))),
    }
    out
}

fn flatten_into(prefix: &str, map: &Map<String, Value>, out: &mut Vec<(String, String)>) {
    for (k, v) in map {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Object(inner) if !inner.is_empty() => flatten_into(&key, inner, out),
            other => out.push((key, cell(other))),
        }
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => n.to_string(),
        Value::Array(_) | Value::Object(_) => v.to_string(),
    }
}

struct Table {
    columns: Vec<String>,
    rows: Vec<BTreeMap<String, String>>,
}

/// Write one CSV per plugin into `out_dir`. Columns are `ts_ms`,
/// `device_id`, `seq`, then the union of flattened payload keys in
/// first-seen order. Plugins without records get no file.
pub fn export_csv(merged: &Merged, out_dir: &Path) -> Result<Vec<PathBuf>, ViewerError> {
    let mut tables: Vec<(String, Table)> = Vec::new();
    for r in merged.records() {
        let fields = match &r.record.body {
            RecordBody::Structured(v) => flatten_payload(v),
            RecordBody::Blob(b) => vec![
                ("blob_name".into(), b.blob_name.clone()),
                ("byte_len".into(), b.byte_len.to_string()),
                ("content_crc32".into(), b.content_crc32.to_string()),
            ],
        };
        let idx = match tables.iter().position(|(p, _)| *p == r.record.plugin_id) {
            Some(i) => i,
            None => {
                let columns = ["ts_ms", "device_id", "seq"].map(String::from).to_vec();
                tables.push((
                    r.record.plugin_id.clone(),
                    Table {
                        columns,
                        rows: Vec::new(),
                    },
                ));
                tables.len() - 1
            }
        };
        let table = &mut tables[idx].1;
        let mut row = BTreeMap::new();
        row.insert("ts_ms".to_string(), r.record.ts_ms.to_string());
        row.insert("device_id".to_string(), r.device_id.to_string());
        row.insert("seq".to_string(), r.record.seq.to_string());
        for (k, v) in fields {
            if !table.columns.contains(&k) {
                table.columns.push(k.clone());
            }
            row.insert(k, v);
        }
        table.rows.push(row);
    }

    fs::create_dir_all(out_dir).map_err(ViewerError::io(out_dir))?;
    let mut written = Vec::new();
    for (plugin, table) in tables {
        let path = out_dir.join(format!("{plugin}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(&table.columns)?;
        for row in &table.rows {
            w.write_record(
                table
                    .columns
                    .iter()
                    .map(|c| row.get(c).map_or("", String::as_str)),
            )?;
        }
        w.flush().map_err(ViewerError::io(&path))?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Default)]
pub struct BlobReport {
    pub written: Vec<PathBuf>,
    /// Blobs that failed verification, as `(location, reason)`.
    pub failed: Vec<(String, String)>,
}

/// Write each blob to `<plugin_id>/<device_id>/<ts_ms>-<seq>.bin` and
/// concatenate each plugin's blobs per device, in merge order, into
/// `<plugin_id>/<device_id>.stream`.
pub fn extract_blobs(merged: &Merged, out_dir: &Path) -> Result<BlobReport, ViewerError> {
    let mut report = BlobReport::default();
    let mut streams: BTreeMap<(String, Uuid), Vec<u8>> = BTreeMap::new();
    for r in merged.records() {
        let Some(blob) = r.blob() else { continue };
        let plugin = &r.record.plugin_id;
        let dir = out_dir.join(plugin).join(r.device_id.to_string());
        let path = dir.join(format!("{}-{}.bin", r.record.ts_ms, r.record.seq));
        match blob {
            Ok(bytes) => {
                fs::create_dir_all(&dir).map_err(ViewerError::io(&dir))?;
                fs::write(&path, bytes).map_err(ViewerError::io(&path))?;
                streams
                    .entry((plugin.clone(), r.device_id))
                    .or_default()
                    .extend_from_slice(bytes);
                report.written.push(path);
            }
            Err(e) => report
                .failed
                .push((path.display().to_string(), e.to_string())),
        }
    }
    for ((plugin, device), bytes) in streams {
        let path = out_dir.join(&plugin).join(format!("{device}.stream"));
        let mut f = fs::File::create(&path).map_err(ViewerError::io(&path))?;
        f.write_all(&bytes).map_err(ViewerError::io(&path))?;
        report.written.push(path);
    }
    Ok(report)
}

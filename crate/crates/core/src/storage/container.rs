//! The sealed chunk container: a ZIP archive with `records.jsonl`,
//! `blobs/<name>` entries and `manifest.json`, all DEFLATE-compressed.
//!
//! The archive comment carries a CRC-32 of every byte that precedes it, so a
//! flipped bit anywhere in the file (entry data, headers or directory) is
//! caught before the archive is parsed.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use super::StorageError;
use crate::model::{BlobRef, ChunkManifest, LogRecord};

pub const RECORDS_ENTRY: &str = "records.jsonl";
pub const MANIFEST_ENTRY: &str = "manifest.json";
pub const BLOB_PREFIX: &str = "blobs/";

const TRAILER_TAG: &str = "probekit-crc32:";
const TRAILER_LEN: usize = TRAILER_TAG.len() + 8;

fn entry_options() -> SimpleFileOptions {
    SimpleFileOptions::default()
        .compression_method(CompressionMethod::Deflated)
        .last_modified_time(DateTime::default())
        .unix_permissions(0o600)
}

fn zip_err(e: zip::result::ZipError) -> StorageError {
    StorageError::Io(std::io::Error::other(e))
}

/// Assemble a chunk container. Fills in `uncompressed_bytes` and
/// `compressed_bytes` on `manifest` from the record stream and blobs.
pub fn build_chunk(
    manifest: &mut ChunkManifest,
    records: &[u8],
    blobs: &[(String, Vec<u8>)],
) -> Result<Vec<u8>, StorageError> {
    let mut w = ZipWriter::new(Cursor::new(Vec::new()));
    w.start_file(RECORDS_ENTRY, entry_options())
        .map_err(zip_err)?;
    w.write_all(records)?;
    for (name, bytes) in blobs {
        w.start_file(name.as_str(), entry_options())
            .map_err(zip_err)?;
        w.write_all(bytes)?;
    }
    let cursor = w.finish().map_err(zip_err)?;

    let mut compressed = 0u64;
    {
        let mut archive =
            ZipArchive::new(Cursor::new(cursor.get_ref().as_slice())).map_err(zip_err)?;
        for i in 0..archive.len() {
            compressed += archive.by_index_raw(i).map_err(zip_err)?.compressed_size();
        }
    }
    manifest.uncompressed_bytes =
        records.len() as u64 + blobs.iter().map(|(_, b)| b.len() as u64).sum::<u64>();
    manifest.compressed_bytes = compressed;

    let mut w = ZipWriter::new_append(cursor).map_err(zip_err)?;
    w.start_file(MANIFEST_ENTRY, entry_options())
        .map_err(zip_err)?;
    w.write_all(&serde_json::to_vec(manifest).expect("manifest serializes"))?;
    w.set_comment(format!("{TRAILER_TAG}{:08x}", 0));
    let mut bytes = w.finish().map_err(zip_err)?.into_inner();

    let body = bytes.len() - TRAILER_LEN;
    let crc = crc32fast::hash(&bytes[..body]);
    bytes[body..].copy_from_slice(format!("{TRAILER_TAG}{crc:08x}").as_bytes());
    Ok(bytes)
}

/// Decoded, verified contents of a chunk.
#[derive(Clone, Debug)]
pub struct ChunkContents {
    pub manifest: ChunkManifest,
    pub records: Vec<LogRecord>,
    blobs: BTreeMap<String, Vec<u8>>,
}

impl ChunkContents {
    /// Blob bytes for `blob_ref`, checked against its length and CRC.
    pub fn blob(&self, blob_ref: &BlobRef) -> Result<&[u8], StorageError> {
        let corrupt = |reason: String| StorageError::Corrupt {
            chunk: self.manifest.chunk_id.to_string(),
            reason,
        };
        let bytes = self
            .blobs
            .get(&blob_ref.blob_name)
            .ok_or_else(|| corrupt(format!("blob {} missing", blob_ref.blob_name)))?;
        if bytes.len() as u64 != blob_ref.byte_len
            || crc32fast::hash(bytes) != blob_ref.content_crc32
        {
            return Err(corrupt(format!(
                "blob {} fails its CRC",
                blob_ref.blob_name
            )));
        }
        Ok(bytes)
    }

    pub fn blob_names(&self) -> impl Iterator<Item = &str> {
        self.blobs.keys().map(String::as_str)
    }
}

fn check_trailer(bytes: &[u8]) -> Result<(), String> {
    if bytes.len() < TRAILER_LEN + 22 {
        return Err("file too short".into());
    }
    let body = bytes.len() - TRAILER_LEN;
    let expected = format!("{TRAILER_TAG}{:08x}", crc32fast::hash(&bytes[..body]));
    if &bytes[body..] != expected.as_bytes() {
        if !bytes[body..].starts_with(TRAILER_TAG.as_bytes()) {
            return Err("missing container checksum".into());
        }
        return Err("container checksum mismatch".into());
    }
    Ok(())
}

fn read_entry<R: Read + std::io::Seek>(
    archive: &mut ZipArchive<R>,
    name: &str,
) -> Result<Vec<u8>, String> {
    let mut f = archive.by_name(name).map_err(|e| format!("{name}: {e}"))?;
    let mut out = Vec::new();
    f.read_to_end(&mut out)
        .map_err(|e| format!("{name}: {e}"))?;
    Ok(out)
}

/// Parse and verify a chunk held in memory. `label` names the chunk in errors
/// when the manifest itself cannot be read.
pub fn read_chunk_bytes(bytes: &[u8], label: &str) -> Result<ChunkContents, StorageError> {
    decode(bytes).map_err(|(chunk, reason)| StorageError::Corrupt {
        chunk: chunk.unwrap_or_else(|| label.to_string()),
        reason,
    })
}

fn decode(bytes: &[u8]) -> Result<ChunkContents, (Option<String>, String)> {
    check_trailer(bytes).map_err(|r| (None, r))?;
    let mut archive = ZipArchive::new(Cursor::new(bytes)).map_err(|e| (None, e.to_string()))?;
    let manifest: ChunkManifest =
        serde_json::from_slice(&read_entry(&mut archive, MANIFEST_ENTRY).map_err(|r| (None, r))?)
            .map_err(|e| (None, format!("manifest.json: {e}")))?;
    let id = Some(manifest.chunk_id.to_string());

    let stream = read_entry(&mut archive, RECORDS_ENTRY).map_err(|r| (id.clone(), r))?;
    if crc32fast::hash(&stream) != manifest.records_crc32 {
        return Err((id, "records CRC mismatch".into()));
    }
    let records = parse_record_stream(&stream).map_err(|r| (id.clone(), r))?;
    if records.len() as u64 != manifest.record_count {
        return Err((id, "record_count does not match the record stream".into()));
    }

    let names: Vec<String> = archive
        .file_names()
        .filter(|n| n.starts_with(BLOB_PREFIX))
        .map(String::from)
        .collect();
    let mut blobs = BTreeMap::new();
    for name in names {
        let data = read_entry(&mut archive, &name).map_err(|r| (id.clone(), r))?;
        blobs.insert(name, data);
    }
    if blobs.len() as u64 != manifest.blob_count {
        return Err((id, "blob_count does not match the archive".into()));
    }
    Ok(ChunkContents {
        manifest,
        records,
        blobs,
    })
}

/// Parse JSON Lines records, enforcing strictly increasing `(ts_ms, seq)`.
pub fn parse_record_stream(stream: &[u8]) -> Result<Vec<LogRecord>, String> {
    let text = std::str::from_utf8(stream).map_err(|e| e.to_string())?;
    let mut out: Vec<LogRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let r: LogRecord =
            serde_json::from_str(line).map_err(|e| format!("record line {}: {e}", i + 1))?;
        if let Some(prev) = out.last() {
            if r.seq <= prev.seq || r.ts_ms < prev.ts_ms {
                return Err(format!("record line {} is out of order", i + 1));
            }
        }
        out.push(r);
    }
    Ok(out)
}

pub fn read_chunk_file(path: &Path) -> Result<ChunkContents, StorageError> {
    let bytes = std::fs::read(path)?;
    read_chunk_bytes(&bytes, &path.display().to_string())
}

/// Read just the manifest of a chunk file, without verifying the records.
pub fn read_chunk_manifest(path: &Path) -> Result<ChunkManifest, StorageError> {
    let corrupt = |reason: String| StorageError::Corrupt {
        chunk: path.display().to_string(),
        reason,
    };
    let file = std::fs::File::open(path)?;
    let mut archive = ZipArchive::new(file).map_err(|e| corrupt(e.to_string()))?;
    let bytes = read_entry(&mut archive, MANIFEST_ENTRY).map_err(corrupt)?;
    serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))
}

//! Portable snapshots: a tar archive holding `manifest.json` followed by
//! `records/snapshot.json`, every topic segment under `log/` and every blob
//! under `blobs/`. The manifest lists the SHA-256 of each file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, StoreError};
use crate::{recover, wal, SnapshotFile, Store, SNAPSHOT};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    seq: u64,
    files: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn walk_blobs(root: &Path, prefix: &str, out: &mut Vec<String>) -> Result<()> {
    let entries = match fs::read_dir(root) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        let key = if prefix.is_empty() { name.clone() } else { format!("{prefix}/{name}") };
        let ty = entry.file_type()?;
        if ty.is_dir() {
            walk_blobs(&entry.path(), &key, out)?;
        } else if ty.is_file() {
            out.push(key);
        }
    }
    Ok(())
}

fn safe_archive_path(p: &str) -> bool {
    let mut parts = p.split('/');
    let top = parts.next();
    let rest: Vec<&str> = parts.collect();
    matches!(top, Some("records" | "log" | "blobs"))
        && !rest.is_empty()
        && rest.iter().all(|s| !s.is_empty() && !s.starts_with('.') && *s != "..")
}

impl Store {
    /// Writes a consistent snapshot of records, topics and blobs as a tar
    /// archive.
    pub fn export_snapshot(&self, out: impl Write) -> Result<()> {
        let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let seq;
        {
            let st = self.state.read();
            seq = st.seq;
            let snap = serde_json::to_vec(&SnapshotFile {
                seq: st.seq,
                tables: st.tables.clone(),
            })
            .expect("records serialize");
            files.insert(SNAPSHOT.to_string(), snap);
            for (topic, events) in &st.topics {
                let mut seg = String::new();
                for (s, ev) in events {
                    seg.push_str(&wal::encode_line(*s, &ev.to_string()));
                }
                files.insert(format!("log/{topic}.log"), seg.into_bytes());
            }
            let mut keys = Vec::new();
            walk_blobs(&self.dir.join("blobs"), "", &mut keys)?;
            for k in keys {
                files.insert(format!("blobs/{k}"), fs::read(self.dir.join("blobs").join(&k))?);
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            seq,
            files: files.iter().map(|(k, v)| (k.clone(), sha256_hex(v))).collect(),
        };
        let mut builder = tar::Builder::new(out);
        let mut add = |path: &str, data: &[u8]| -> Result<()> {
            let mut header = tar::Header::new_gnu();
            header.set_size(data.len() as u64);
            header.set_mode(0o644);
            header.set_mtime(0);
            header.set_cksum();
            builder.append_data(&mut header, path, data)?;
            Ok(())
        };
        add("manifest.json", &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))?;
        for (path, data) in &files {
            add(path, data)?;
        }
        builder.into_inner()?.flush()?;
        Ok(())
    }

    /// Replaces the store contents with an archive from [`Store::export_snapshot`].
    /// The archive is fully verified before anything on disk changes; a
    /// corrupt archive leaves the store untouched.
    pub fn import_snapshot(&self, input: impl Read) -> Result<()> {
        let corrupt = |m: String| StoreError::CorruptArchive(m);
        let mut archive = tar::Archive::new(input);
        let mut entries: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        for entry in archive.entries().map_err(|e| corrupt(e.to_string()))? {
            let mut entry = entry.map_err(|e| corrupt(e.to_string()))?;
            let path = entry
                .path()
                .map_err(|e| corrupt(e.to_string()))?
                .to_string_lossy()
                .into_owned();
            let mut data = Vec::new();
            entry.read_to_end(&mut data).map_err(|e| corrupt(e.to_string()))?;
            if entries.insert(path.clone(), data).is_some() {
                return Err(corrupt(format!("duplicate entry {path}")));
            }
        }
        let manifest: Manifest = serde_json::from_slice(
            &entries.remove("manifest.json").ok_or_else(|| corrupt("missing manifest.json".into()))?,
        )
        .map_err(|e| corrupt(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {}", manifest.format_version)));
        }
        for (path, hash) in &manifest.files {
            if !safe_archive_path(path) {
                return Err(corrupt(format!("unsafe path {path}")));
            }
            let data = entries.get(path).ok_or_else(|| corrupt(format!("missing {path}")))?;
            if &sha256_hex(data) != hash {
                return Err(corrupt(format!("checksum mismatch for {path}")));
            }
        }
        if let Some(extra) = entries.keys().find(|k| !manifest.files.contains_key(*k)) {
            return Err(corrupt(format!("unlisted entry {extra}")));
        }
        let snap: SnapshotFile = serde_json::from_slice(
            entries.get(SNAPSHOT).ok_or_else(|| corrupt("missing records snapshot".into()))?,
        )
        .map_err(|e| corrupt(format!("records: {e}")))?;
        if snap.seq != manifest.seq {
            return Err(corrupt("manifest and records disagree on seq".into()));
        }
        for (path, data) in &entries {
            if path.starts_with("log/") {
                let text = std::str::from_utf8(data).map_err(|_| corrupt(format!("{path} is not UTF-8")))?;
                let lines = text.split_inclusive('\n').count();
                let (parsed, _) = wal::read_from(&data[..])?;
                if parsed.len() != lines {
                    return Err(corrupt(format!("{path} has invalid lines")));
                }
            }
        }

        let mut st = self.state.write();
        let staging = self.dir.join(".staging");
        let old = self.dir.join(".old");
        let _ = fs::remove_dir_all(&staging);
        let _ = fs::remove_dir_all(&old);
        for sub in ["records", "blobs", "log"] {
            fs::create_dir_all(staging.join(sub))?;
        }
        for (path, data) in &entries {
            let dest = staging.join(path);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&dest, data)?;
        }
        fs::create_dir_all(&old)?;
        for sub in ["records", "blobs", "log"] {
            if self.dir.join(sub).exists() {
                fs::rename(self.dir.join(sub), old.join(sub))?;
            }
            fs::rename(staging.join(sub), self.dir.join(sub))?;
        }
        let _ = fs::remove_dir_all(&old);
        let _ = fs::remove_dir_all(&staging);
        let crash = st.crash.take();
        *st = recover(&self.dir)?;
        st.crash = crash;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{id_key, Mutation};
    use serde_json::json;

    fn populated(dir: &Path) -> Store {
        let s = Store::open(dir).unwrap();
        for i in 0..50 {
            s.transact(vec![
                Mutation::put("features", id_key(i), json!({"i": i})),
                Mutation::append("project.1", json!({"i": i})),
            ])
            .unwrap();
        }
        s.put_blob("tiles/1/0/0/0.png", b"png0").unwrap();
        s.put_blob("tiles/1/1/1/0.png", b"png1").unwrap();
        s
    }

    #[test]
    fn round_trip() {
        let a = tempfile::tempdir().unwrap();
        let src = populated(a.path());
        let mut tar = Vec::new();
        src.export_snapshot(&mut tar).unwrap();

        let b = tempfile::tempdir().unwrap();
        let dst = Store::open(b.path()).unwrap();
        dst.transact(vec![Mutation::put("junk", "x", json!(1))]).unwrap();
        dst.put_blob("junk", b"x").unwrap();
        dst.import_snapshot(&tar[..]).unwrap();
        assert_eq!(dst.dump(), src.dump());
        assert_eq!(dst.blob_keys().unwrap(), src.blob_keys().unwrap());
        assert_eq!(dst.get_blob("tiles/1/1/1/0.png").unwrap().unwrap(), b"png1");
        // writes continue from the imported sequence
        assert_eq!(dst.transact(vec![Mutation::put("t", "k", json!(0))]).unwrap(), 51);
        drop(dst);
        let reopened = Store::open(b.path()).unwrap();
        assert_eq!(reopened.commit_seq(), 51);
        assert!(reopened.get("junk", "x").is_none());
    }

    #[test]
    fn corrupt_archives_leave_store_untouched() {
        let a = tempfile::tempdir().unwrap();
        let src = populated(a.path());
        let mut tar = Vec::new();
        src.export_snapshot(&mut tar).unwrap();

        let b = tempfile::tempdir().unwrap();
        let dst = Store::open(b.path()).unwrap();
        dst.transact(vec![Mutation::put("keep", "me", json!(true))]).unwrap();
        let before = dst.dump();

        let truncated = &tar[..tar.len() / 2];
        assert!(matches!(dst.import_snapshot(truncated), Err(StoreError::CorruptArchive(_))));

        let mut flipped = tar.clone();
        let pos = flipped.windows(4).position(|w| w == b"png1").unwrap();
        flipped[pos] = b'X';
        assert!(matches!(dst.import_snapshot(&flipped[..]), Err(StoreError::CorruptArchive(_))));

        assert!(matches!(dst.import_snapshot(&b"not a tar"[..]), Err(StoreError::CorruptArchive(_))));
        assert_eq!(dst.dump(), before);
        assert!(dst.get("keep", "me").is_some());
    }
}

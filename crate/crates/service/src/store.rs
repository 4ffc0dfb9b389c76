//! Content-addressed directory store.
//!
//! ```text
//! <data_dir>/objects/<sha256 hex>   immutable blobs (layouts, latents, PNGs)
//! <data_dir>/sessions/<id>.json     session manifests, replaced atomically
//! ```

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::jobs::Job;

/// Everything needed to rebuild a session after a restart. Blobs are named
/// by hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub id: String,
    pub layout: String,
    #[serde(default)]
    pub latent: Option<String>,
    #[serde(default)]
    pub reference_id: Option<String>,
    #[serde(default)]
    pub jobs: Vec<Job>,
}

#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn is_hash(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

fn is_session_id(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
}

/// Writes through a temporary file and a rename, so readers and restarts
/// see either the old or the new content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no parent"))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("blob");
    let tmp = dir.join(format!(".{name}.{}.tmp", uuid::Uuid::new_v4().simple()));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        // persist the rename itself
        File::open(dir)?.sync_all()
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Store> {
        let root = root.into();
        fs::create_dir_all(root.join("objects"))?;
        fs::create_dir_all(root.join("sessions"))?;
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn object_path(&self, hash: &str) -> PathBuf {
        self.root.join("objects").join(hash)
    }

    fn manifest_path(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(format!("{id}.json"))
    }

    /// Stores `bytes` and returns their hash. Existing blobs are left alone.
    pub fn put(&self, bytes: &[u8]) -> io::Result<String> {
        let hash = hash_bytes(bytes);
        let path = self.object_path(&hash);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(hash)
    }

    pub fn get(&self, hash: &str) -> io::Result<Option<Vec<u8>>> {
        if !is_hash(hash) {
            return Ok(None);
        }
        match fs::read(self.object_path(hash)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Like [`Store::get`] but also verifies the content against its name.
    pub fn get_verified(&self, hash: &str) -> io::Result<Vec<u8>> {
        let bytes = self
            .get(hash)?
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("object {hash} is missing")))?;
        if hash_bytes(&bytes) != hash {
            return Err(io::Error::new(io::ErrorKind::InvalidData, format!("object {hash} is corrupt")));
        }
        Ok(bytes)
    }

    pub fn write_manifest(&self, m: &SessionManifest) -> io::Result<()> {
        if !is_session_id(&m.id) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("bad session id {:?}", m.id)));
        }
        let bytes = serde_json::to_vec_pretty(m).map_err(io::Error::other)?;
        write_atomic(&self.manifest_path(&m.id), &bytes)
    }

    /// All manifests, sorted by id. Leftover temporary files are ignored.
    pub fn manifests(&self) -> io::Result<Vec<SessionManifest>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("sessions"))? {
            let path = entry?.path();
            let is_manifest = path.extension().is_some_and(|e| e == "json")
                && !path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'));
            if !is_manifest {
                continue;
            }
            let bytes = fs::read(&path)?;
            let m: SessionManifest = serde_json::from_slice(&bytes)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))?;
            out.push(m);
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }
}

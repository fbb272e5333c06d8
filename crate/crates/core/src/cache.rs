//! Local content cache for mesh files, keyed by object id and verified by
//! SHA-256 digest.
//!
//! Layout: `<root>/<first two digest chars>/<object_id>.glb` plus the sidecar
//! `<root>/index.json` mapping id to digest. Files and the index are written
//! to a temp file and renamed into place, so a killed writer never leaves a
//! partial entry visible.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub object_id: String,
    pub local_path: PathBuf,
    pub content_digest: String,
    pub fetched_at: DateTime<Utc>,
}

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("fetch of `{object_id}` failed: {source}")]
    FetchFailed {
        object_id: String,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("digest mismatch for `{object_id}`: index has {expected}, file hashes to {actual}")]
    DigestMismatch { object_id: String, expected: String, actual: String },
    #[error("object id `{0}` is not usable as a file name")]
    InvalidId(String),
    #[error("cache io: {0}")]
    Io(#[from] std::io::Error),
    #[error("cache index is corrupt: {0}")]
    Index(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct IndexRecord {
    digest: String,
    fetched_at: DateTime<Utc>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct AssetCache {
    root: PathBuf,
    index: Mutex<BTreeMap<String, IndexRecord>>,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl AssetCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, CacheError> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        let index = read_index(&root)?;
        Ok(Self { root, index: Mutex::new(index), key_locks: Mutex::new(HashMap::new()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, object_id: &str, digest: &str) -> PathBuf {
        self.root.join(&digest[..2]).join(format!("{object_id}.glb"))
    }

    fn key_lock(&self, object_id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.key_locks.lock().unwrap();
        locks.entry(object_id.to_string()).or_default().clone()
    }

    fn lookup(&self, object_id: &str) -> Result<Option<IndexRecord>, CacheError> {
        let mut index = self.index.lock().unwrap();
        if let Some(r) = index.get(object_id) {
            return Ok(Some(r.clone()));
        }
        // another process may have filled the entry
        let on_disk = read_index(&self.root)?;
        if let Some(r) = on_disk.get(object_id) {
            index.insert(object_id.to_string(), r.clone());
            return Ok(Some(r.clone()));
        }
        Ok(None)
    }

    /// Returns the entry if present, without verifying it.
    pub fn get(&self, object_id: &str) -> Result<Option<CacheEntry>, CacheError> {
        Ok(self.lookup(object_id)?.map(|r| CacheEntry {
            object_id: object_id.to_string(),
            local_path: self.path_for(object_id, &r.digest),
            content_digest: r.digest,
            fetched_at: r.fetched_at,
        }))
    }

    /// Re-hashes the cached file and compares it with the index.
    pub fn verify(&self, entry: &CacheEntry) -> Result<(), CacheError> {
        let bytes = std::fs::read(&entry.local_path)?;
        let actual = sha256_hex(&bytes);
        if actual != entry.content_digest {
            return Err(CacheError::DigestMismatch {
                object_id: entry.object_id.clone(),
                expected: entry.content_digest.clone(),
                actual,
            });
        }
        Ok(())
    }

    /// Returns the cached entry, fetching on a miss. A hit whose file fails
    /// verification is evicted and refetched.
    pub fn get_or_fetch<F, E>(&self, object_id: &str, fetcher: F) -> Result<CacheEntry, CacheError>
    where
        F: FnOnce(&str) -> Result<Vec<u8>, E>,
        E: Into<Box<dyn std::error::Error + Send + Sync>>,
    {
        validate_id(object_id)?;
        let lock = self.key_lock(object_id);
        let _guard = lock.lock().unwrap();

        if let Some(entry) = self.get(object_id)? {
            match self.verify(&entry) {
                Ok(()) => return Ok(entry),
                Err(CacheError::DigestMismatch { .. }) | Err(CacheError::Io(_)) => {
                    log::warn!("cache entry for {object_id} failed verification; evicting");
                    self.evict(object_id)?;
                }
                Err(e) => return Err(e),
            }
        }

        let bytes = fetcher(object_id)
            .map_err(|e| CacheError::FetchFailed { object_id: object_id.to_string(), source: e.into() })?;
        let digest = sha256_hex(&bytes);
        let path = self.path_for(object_id, &digest);
        let dir = path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(&path).map_err(|e| CacheError::Io(e.error))?;

        let record = IndexRecord { digest: digest.clone(), fetched_at: Utc::now().trunc_subsecs(0) };
        {
            let mut index = self.index.lock().unwrap();
            let mut merged = read_index(&self.root)?;
            merged.extend(index.iter().map(|(k, v)| (k.clone(), v.clone())));
            merged.insert(object_id.to_string(), record.clone());
            write_index(&self.root, &merged)?;
            *index = merged;
        }
        Ok(CacheEntry {
            object_id: object_id.to_string(),
            local_path: path,
            content_digest: digest,
            fetched_at: record.fetched_at,
        })
    }

    /// Removes an entry and its file. Missing entries are ignored.
    pub fn evict(&self, object_id: &str) -> Result<(), CacheError> {
        let mut index = self.index.lock().unwrap();
        let mut merged = read_index(&self.root)?;
        merged.extend(index.iter().map(|(k, v)| (k.clone(), v.clone())));
        if let Some(r) = merged.remove(object_id) {
            let path = self.path_for(object_id, &r.digest);
            match std::fs::remove_file(&path) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
        }
        write_index(&self.root, &merged)?;
        *index = merged;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.index.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn validate_id(id: &str) -> Result<(), CacheError> {
    let bad = id.is_empty()
        || id == "."
        || id == ".."
        || id.chars().any(|c| matches!(c, '/' | '\\' | '\0') || c.is_control());
    if bad {
        Err(CacheError::InvalidId(id.to_string()))
    } else {
        Ok(())
    }
}

fn read_index(root: &Path) -> Result<BTreeMap<String, IndexRecord>, CacheError> {
    match std::fs::read(root.join(INDEX_FILE)) {
        Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(BTreeMap::new()),
        Err(e) => Err(e.into()),
    }
}

fn write_index(root: &Path, index: &BTreeMap<String, IndexRecord>) -> Result<(), CacheError> {
    let mut tmp = tempfile::NamedTempFile::new_in(root)?;
    serde_json::to_writer_pretty(&mut tmp, index)?;
    tmp.as_file().sync_all()?;
    tmp.persist(root.join(INDEX_FILE)).map_err(|e| CacheError::Io(e.error))?;
    Ok(())
}

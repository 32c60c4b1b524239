use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::BaselineScore;
use crate::li::LIProfile;
use crate::model::HeadNormPolicy;
use crate::prompts::ScoredSpan;
use crate::Result;

/// Identity of one cached computation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKey {
    pub model_id: String,
    pub example_id: String,
    /// Digest of the example's text, so edited records never hit stale entries.
    pub example_digest: String,
    pub template_id: String,
    pub layer_selection: Vec<usize>,
    pub head_norm_policy: HeadNormPolicy,
    pub scored_span: ScoredSpan,
    /// `li_profile` or a baseline method name.
    pub kind: String,
    /// Canonical JSON of the parameters the computation depends on.
    pub params: String,
}

impl CacheKey {
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("key serializes")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum CachePayload {
    Profile { profile: LIProfile, forward_passes: u64, tokens_processed: u64 },
    Score { score: BaselineScore },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub payload: CachePayload,
}

/// Content-addressed JSON files, one per entry, written via temp file and
/// rename so readers never see partial entries.
#[derive(Debug, Clone)]
pub struct ScoreCache {
    dir: PathBuf,
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ScoreCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_of(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.digest()))
    }

    /// The stored payload for `key`, if present, readable and keyed exactly
    /// the same.
    pub fn get(&self, key: &CacheKey) -> Option<CachePayload> {
        let path = self.path_of(key);
        let text = fs::read_to_string(&path).ok()?;
        match serde_json::from_str::<CacheEntry>(&text) {
            Ok(entry) if entry.key == *key => Some(entry.payload),
            Ok(_) => {
                log::warn!("{}: key mismatch, ignoring", path.display());
                None
            }
            Err(e) => {
                log::warn!("{}: unreadable cache entry ({e}), ignoring", path.display());
                None
            }
        }
    }

    pub fn put(&self, key: &CacheKey, payload: &CachePayload) -> Result<()> {
        let entry = CacheEntry { key: key.clone(), payload: payload.clone() };
        let path = self.path_of(key);
        let tmp = self.dir.join(format!(
            ".{}.{}.{}.tmp",
            key.digest(),
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&serde_json::to_vec_pretty(&entry)?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|d| d.filter_map(|e| e.ok()).filter(|e| e.path().extension().is_some_and(|x| x == "json")).count())
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

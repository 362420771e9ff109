use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{oracle_bounds, oracle_bounds_theta, true_beta, true_theta, DgpSpec, OracleBounds, Target, TrueParameter};
use crate::data::score::ScoreKind;
use crate::error::{Error, Result};

/// Bumped whenever cached values would change for the same key.
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Key {
    version: u32,
    what: String,
    target: Target,
    spec: DgpSpec,
    model: ScoreKind,
    mc_n: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Entry<T> {
    key: Key,
    value: T,
}

/// `ACP_CACHE_DIR`, else the user cache directory, else the system temp dir.
pub fn default_cache_dir() -> PathBuf {
    if let Some(d) = std::env::var_os("ACP_CACHE_DIR") {
        return PathBuf::from(d);
    }
    if let Some(d) = std::env::var_os("XDG_CACHE_HOME") {
        return PathBuf::from(d).join("acpshift");
    }
    if let Some(h) = std::env::var_os("HOME") {
        return PathBuf::from(h).join(".cache").join("acpshift");
    }
    std::env::temp_dir().join("acpshift")
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// On-disk JSON cache of oracle computations.
#[derive(Debug, Clone)]
pub struct OracleCache {
    dir: PathBuf,
}

impl OracleCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn from_env() -> Self {
        Self::new(default_cache_dir())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &Key) -> Result<PathBuf> {
        let text = serde_json::to_string(key).map_err(|e| Error::Io(e.to_string()))?;
        Ok(self.dir.join(format!("{}-v{}-{:016x}.json", key.what, key.version, fnv1a(text.as_bytes()))))
    }

    fn get_or_compute<T, F>(&self, key: Key, compute: F) -> Result<(T, bool)>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        let path = self.path(&key)?;
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(entry) = serde_json::from_str::<Entry<T>>(&text) {
                if entry.key == key {
                    return Ok((entry.value, true));
                }
            }
        }
        let value = compute()?;
        fs::create_dir_all(&self.dir)?;
        let entry = Entry { key, value };
        let text = serde_json::to_string_pretty(&entry).map_err(|e| Error::Io(e.to_string()))?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, text)?;
        fs::rename(&tmp, &path)?;
        Ok((entry.value, false))
    }

    /// Bounds, with a flag telling whether they came from disk.
    pub fn bounds(&self, spec: &DgpSpec, model: ScoreKind, mc_n: usize, seed: u64, target: Target) -> Result<(OracleBounds, bool)> {
        spec.validate()?;
        let key = Key {
            version: CACHE_VERSION,
            what: "bounds".into(),
            target,
            spec: spec.clone(),
            model,
            mc_n,
            seed,
        };
        self.get_or_compute(key, || match target {
            Target::Beta => oracle_bounds(spec, model, mc_n, seed),
            Target::Theta => oracle_bounds_theta(spec, model, mc_n, seed),
        })
    }

    pub fn truth(&self, spec: &DgpSpec, model: ScoreKind, mc_n: usize, seed: u64, target: Target) -> Result<(TrueParameter, bool)> {
        spec.validate()?;
        let key = Key {
            version: CACHE_VERSION,
            what: "truth".into(),
            target,
            spec: spec.clone(),
            model,
            mc_n,
            seed,
        };
        self.get_or_compute(key, || match target {
            Target::Beta => true_beta(spec, model, mc_n, seed),
            Target::Theta => true_theta(spec, model, mc_n, seed),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::OutcomeFamily;

    #[test]
    fn second_call_hits_cache_with_identical_value() {
        let dir = tempfile::tempdir().unwrap();
        let cache = OracleCache::new(dir.path());
        let spec = DgpSpec::new(2.0, 0.3, OutcomeFamily::Linear).unwrap();
        let (a, hit_a) = cache.bounds(&spec, ScoreKind::MeanTarget, 10_000, 5, Target::Beta).unwrap();
        let (b, hit_b) = cache.bounds(&spec, ScoreKind::MeanTarget, 10_000, 5, Target::Beta).unwrap();
        assert!(!hit_a && hit_b);
        assert_eq!(a, b);
        let (_, hit_c) = cache.bounds(&spec, ScoreKind::MeanTarget, 10_000, 6, Target::Beta).unwrap();
        assert!(!hit_c);
    }

    #[test]
    fn invalid_spec_is_rejected_before_compute() {
        let dir = tempfile::tempdir().unwrap();
        let cache = OracleCache::new(dir.path());
        let mut spec = DgpSpec::new(2.0, 0.3, OutcomeFamily::Linear).unwrap();
        spec.zeta = 1.5;
        assert!(cache.truth(&spec, ScoreKind::MeanTarget, 10, 1, Target::Beta).is_err());
    }
}

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{load_volume, save_volume};
use crate::Volume;

/// Content-addressed volume store. A volume's file name is the hash of the
/// recipe that produced it (stage, relevant configuration, case identity).
#[derive(Debug, Clone)]
pub struct VolumeCache {
    dir: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stable hash of any serializable configuration fragment.
pub fn fragment_hash<S: Serialize>(value: &S) -> Result<String> {
    #[derive(Serialize)]
    struct Wrap<'a, S> {
        v: &'a S,
    }
    let text = toml::to_string(&Wrap { v: value }).map_err(|e| Error::Config(e.to_string()))?;
    Ok(sha256_hex(text.as_bytes()))
}

impl VolumeCache {
    pub fn open(output_dir: &Path) -> Result<Self> {
        let dir = output_dir.join("cache");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, recipe: &str) -> PathBuf {
        self.dir.join(format!("{}.vol", &sha256_hex(recipe.as_bytes())[..32]))
    }

    pub fn contains(&self, recipe: &str) -> bool {
        self.path(recipe).is_file()
    }

    pub fn load(&self, recipe: &str) -> Result<Volume> {
        load_volume(&self.path(recipe))
    }

    /// Writes atomically and returns the volume as it will be read back
    /// (single precision), so callers continue from the stored values.
    pub fn store(&self, recipe: &str, v: &Volume) -> Result<Volume> {
        let path = self.path(recipe);
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        save_volume(v, &tmp)?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(v.cast::<f32>().cast::<f64>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_then_load_matches_rounded_volume() {
        let dir = tempfile::tempdir().unwrap();
        let cache = VolumeCache::open(dir.path()).unwrap();
        let v = Volume::from_fn([3, 2, 2], [0.5; 3], |i, j, k| 0.1 * (i + 3 * j + 6 * k) as f64).unwrap();
        assert!(!cache.contains("a"));
        let stored = cache.store("a", &v).unwrap();
        assert!(cache.contains("a"));
        assert_eq!(cache.load("a").unwrap(), stored);
        assert_ne!(cache.path("a"), cache.path("b"));
        assert_eq!(fragment_hash(&[1.0, 2.0]).unwrap(), fragment_hash(&[1.0, 2.0]).unwrap());
    }
}

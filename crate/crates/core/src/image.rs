//! Content-addressed image storage. Trajectories carry handles, never pixels.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Hex SHA-256 digest of an image's bytes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(String);

impl ImageRef {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        ImageRef(hex::encode(Sha256::digest(bytes)))
    }

    /// Wraps an existing digest, rejecting anything that is not 64 lowercase hex chars.
    pub fn from_digest(digest: &str) -> Option<Self> {
        let ok = digest.len() == 64 && digest.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        ok.then(|| ImageRef(digest.to_string()))
    }

    pub fn digest(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone)]
pub struct ImageStore {
    root: PathBuf,
}

impl ImageStore {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_of(&self, r: &ImageRef) -> PathBuf {
        self.root.join(r.digest())
    }

    pub fn put(&self, bytes: &[u8]) -> io::Result<ImageRef> {
        let r = ImageRef::of_bytes(bytes);
        let path = self.path_of(&r);
        if !path.exists() {
            let tmp = self.root.join(format!(".{}.tmp", r.digest()));
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(r)
    }

    pub fn get(&self, r: &ImageRef) -> io::Result<Vec<u8>> {
        fs::read(self.path_of(r))
    }

    pub fn contains(&self, r: &ImageRef) -> bool {
        self.path_of(r).is_file()
    }
}

use std::env;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

/// Environment variable that overrides the cache directory.
pub const CACHE_ENV: &str = "PGE_CACHE_DIR";

/// Content-addressed store for PGE binaries and pretrained states.
#[derive(Debug, Clone)]
pub struct Cache {
    root: PathBuf,
}

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `$PGE_CACHE_DIR` when set and non-empty, else `<out>/cache`.
    pub fn for_out_dir(out: &Path) -> Self {
        match env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
            Some(dir) => Self::new(dir),
            None => Self::new(out.join("cache")),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, kind: &str, key: &str, ext: &str) -> PathBuf {
        self.root.join(kind).join(format!("{key}.{ext}"))
    }

    pub fn load(&self, kind: &str, key: &str, ext: &str) -> Option<Vec<u8>> {
        fs::read(self.path(kind, key, ext)).ok()
    }

    pub fn store(&self, kind: &str, key: &str, ext: &str, bytes: &[u8]) -> io::Result<PathBuf> {
        let path = self.path(kind, key, ext);
        write_atomic(&path, bytes)?;
        Ok(path)
    }
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Write to a sibling temp file, then rename over `path`, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(
        ".{}.{}.{}.tmp",
        name.to_string_lossy(),
        std::process::id(),
        TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

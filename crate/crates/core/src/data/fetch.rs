//! Dataset acquisition: download once into a checksummed cache, read a local
//! file, or generate synthetic data.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::npy::{load_npy, parse_npy, NpyArray};
use super::synthetic::synthetic_moving_glyphs;
use crate::error::{Error, Result};

pub const MOVING_MNIST_URL: &str =
    "https://www.cs.toronto.edu/~nitish/unsupervised_video/mnist_test_seq.npy";

/// Largest response body accepted from the network.
const MAX_DOWNLOAD: u64 = 2 << 30;

/// Serializes fetches so concurrent callers trigger at most one download.
static FETCH_LOCK: Mutex<()> = Mutex::new(());

/// Where the raw `(20, N, 64, 64)` array comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Url(String),
    Path(PathBuf),
    Synthetic {
        sequences: usize,
        size: usize,
        seed: u64,
    },
}

pub trait Downloader: Sync {
    fn download(&self, url: &str) -> Result<Vec<u8>>;
}

/// Blocking HTTP(S) downloads.
#[derive(Debug, Clone, Copy, Default)]
pub struct HttpDownloader;

impl Downloader for HttpDownloader {
    fn download(&self, url: &str) -> Result<Vec<u8>> {
        let mut resp = ureq::get(url)
            .call()
            .map_err(|e| Error::Fetch(format!("GET {url}: {e}")))?;
        let mut bytes = Vec::new();
        resp.body_mut()
            .as_reader()
            .take(MAX_DOWNLOAD)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Fetch(format!("reading {url}: {e}")))?;
        Ok(bytes)
    }
}

pub fn cache_path(cache_dir: &Path) -> PathBuf {
    cache_dir.join("moving_mnist").join("mnist_test_seq.npy")
}

fn sidecar_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".sha256");
    PathBuf::from(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes via a temporary sibling and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Cached bytes if present; a cache whose content disagrees with its sidecar
/// is an error rather than a miss.
fn read_cache(data: &Path) -> Result<Option<Vec<u8>>> {
    let side = sidecar_path(data);
    if !data.exists() || !side.exists() {
        return Ok(None);
    }
    let record = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let mut fields = record.split_whitespace();
    let (Some(hash), Some(len)) = (
        fields.next(),
        fields.next().and_then(|l| l.parse::<usize>().ok()),
    ) else {
        return Err(Error::Fetch(format!(
            "malformed checksum file {}",
            side.display()
        )));
    };
    let bytes = fs::read(data).map_err(|e| Error::io(data, e))?;
    if bytes.len() != len {
        return Err(Error::Fetch(format!(
            "checksum mismatch: cached file has {} bytes, expected {len}",
            bytes.len()
        )));
    }
    let actual = sha256_hex(&bytes);
    if actual != hash {
        return Err(Error::Fetch(format!(
            "checksum mismatch: cached file hashes to {actual}, expected {hash}"
        )));
    }
    Ok(Some(bytes))
}

/// Loads the raw array from `source`. URLs are downloaded into
/// `<cache_dir>/moving_mnist/` once and read from there afterwards.
pub fn fetch_dataset(
    source: &DataSource,
    cache_dir: &Path,
    downloader: &dyn Downloader,
) -> Result<NpyArray> {
    match source {
        DataSource::Path(p) => load_npy(p),
        DataSource::Synthetic {
            sequences,
            size,
            seed,
        } => synthetic_moving_glyphs(*sequences, *size, *seed),
        DataSource::Url(url) => {
            let _guard = FETCH_LOCK.lock().unwrap_or_else(|p| p.into_inner());
            let data = cache_path(cache_dir);
            if let Some(bytes) = read_cache(&data)? {
                return parse_npy(&bytes);
            }
            let bytes = downloader
                .download(url)
                .map_err(|e| Error::Fetch(format!("download failed and cache is empty: {e}")))?;
            let array = parse_npy(&bytes)?;
            write_atomic(&data, &bytes)?;
            let record = format!("{}  {}\n", sha256_hex(&bytes), bytes.len());
            write_atomic(&sidecar_path(&data), record.as_bytes())?;
            Ok(array)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::npy::write_npy;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        calls: AtomicUsize,
        body: Option<Vec<u8>>,
    }

    impl Downloader for Counting {
        fn download(&self, _url: &str) -> Result<Vec<u8>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.body
                .clone()
                .ok_or_else(|| Error::Fetch("offline".into()))
        }
    }

    fn small_file() -> Vec<u8> {
        write_npy(&NpyArray::from_u8(vec![2, 1, 2, 2], vec![0, 1, 2, 3, 4, 5, 6, 7]).unwrap())
    }

    #[test]
    fn downloads_once_then_uses_cache() {
        let dir = tempfile::tempdir().unwrap();
        let dl = Counting {
            calls: AtomicUsize::new(0),
            body: Some(small_file()),
        };
        let src = DataSource::Url("http://example.invalid/data.npy".into());
        let a = fetch_dataset(&src, dir.path(), &dl).unwrap();
        let b = fetch_dataset(&src, dir.path(), &dl).unwrap();
        assert_eq!(a, b);
        assert_eq!(dl.calls.load(Ordering::SeqCst), 1);
        let side = fs::read_to_string(sidecar_path(&cache_path(dir.path()))).unwrap();
        assert!(side.starts_with(&sha256_hex(&small_file())));
    }

    #[test]
    fn concurrent_callers_share_one_download() {
        let dir = tempfile::tempdir().unwrap();
        let dl = Counting {
            calls: AtomicUsize::new(0),
            body: Some(small_file()),
        };
        let src = DataSource::Url("http://example.invalid/data.npy".into());
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| fetch_dataset(&src, dir.path(), &dl).unwrap());
            }
        });
        assert_eq!(dl.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn offline_with_empty_cache_fails() {
        let dir = tempfile::tempdir().unwrap();
        let dl = Counting {
            calls: AtomicUsize::new(0),
            body: None,
        };
        let r = fetch_dataset(&DataSource::Url("u".into()), dir.path(), &dl);
        assert!(matches!(r, Err(Error::Fetch(_))));
    }

    #[test]
    fn tampered_cache_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let dl = Counting {
            calls: AtomicUsize::new(0),
            body: Some(small_file()),
        };
        let src = DataSource::Url("u".into());
        fetch_dataset(&src, dir.path(), &dl).unwrap();
        let path = cache_path(dir.path());
        let mut bytes = fs::read(&path).unwrap();
        *bytes.last_mut().unwrap() ^= 1;
        fs::write(&path, bytes).unwrap();
        let r = fetch_dataset(&src, dir.path(), &dl);
        assert!(matches!(r, Err(Error::Fetch(m)) if m.contains("checksum mismatch")));
    }

    #[test]
    fn local_path_bypasses_download() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("local.npy");
        fs::write(&path, small_file()).unwrap();
        let dl = Counting {
            calls: AtomicUsize::new(0),
            body: None,
        };
        let a = fetch_dataset(&DataSource::Path(path), dir.path(), &dl).unwrap();
        assert_eq!(a.shape(), &[2, 1, 2, 2]);
        assert_eq!(dl.calls.load(Ordering::SeqCst), 0);
    }
}

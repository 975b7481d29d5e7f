//! Moving MNIST ingestion: NPY parsing, shifted pairs, splitting and
//! downscaling, plus a synthetic generator for offline use.

mod dataset;
mod fetch;
mod npy;
mod synthetic;

pub use dataset::{make_shifted_pairs, pool2x, split, split_indices, SequenceDataset};
pub(crate) use fetch::write_atomic;
pub use fetch::{
    cache_path, fetch_dataset, sha256_hex, DataSource, Downloader, HttpDownloader, MOVING_MNIST_URL,
};
pub use npy::{load_npy, parse_npy, read_npy_header, write_npy, NpyArray};
pub use synthetic::{synthetic_moving_glyphs, SYNTHETIC_FRAMES};

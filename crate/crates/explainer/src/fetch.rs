//! Downloads the MNIST IDX files into a data directory.

use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};

use crate::error::{Error, IoContext, Result};
use crate::idx::{load_split, Split};

pub const DEFAULT_BASE_URL: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";

/// Fetches `{base_url}{name}.gz` for both splits, then parses them to make
/// sure they are valid. Returns the written paths.
pub fn fetch_mnist(base_url: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).at(dir)?;
    let base = base_url.trim_end_matches('/');
    let mut written = Vec::new();
    for split in [Split::Train, Split::Test] {
        for name in split.file_names() {
            let url = format!("{base}/{name}.gz");
            let path = dir.join(format!("{name}.gz"));
            log::info!("downloading {url}");
            let mut response = ureq::get(&url).call().map_err(|e| Error::Download {
                url: url.clone(),
                message: e.to_string(),
            })?;
            let mut file = File::create(&path).at(&path)?;
            io::copy(&mut response.body_mut().as_reader(), &mut file).at(&path)?;
            written.push(path);
        }
        load_split(dir, split)?;
    }
    Ok(written)
}

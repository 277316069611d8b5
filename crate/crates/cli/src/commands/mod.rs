pub mod compare;
pub mod gamma;
pub mod mask;
pub mod train;
pub mod verify;

use std::path::Path;
use std::str::FromStr;

use rblock_core::train::TrainConfig;

use crate::exit::{CliError, CliResult};

/// Clap value parser for the library's string-keyed enums.
pub fn parse_key<T: FromStr<Err = rblock_core::Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: rblock_core::Error| e.to_string())
}

/// Reads a config file: a missing file is a usage error, a malformed or
/// invalid one a data error.
pub fn read_config(path: &Path) -> CliResult<(TrainConfig, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|_| CliError::data(format!("{}: not UTF-8", path.display())))?;
    let cfg = TrainConfig::from_json(text)
        .and_then(|c| c.validate().map(|_| c))
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok((cfg, bytes))
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

/// Digests of the config file and, for file-backed datasets, the data files.
pub fn input_digests(config_path: &Path, config_bytes: &[u8], cfg: &TrainConfig) -> CliResult<Vec<crate::manifest::FileDigest>> {
    use rblock_core::train::data::{CIFAR10_TEST_FILES, CIFAR10_TRAIN_FILES};
    use rblock_core::train::DatasetConfig;

    let mut out = vec![crate::manifest::FileDigest {
        path: config_path.display().to_string(),
        bytes: config_bytes.len() as u64,
        blob_sha256: crate::manifest::blob_hash(config_bytes),
    }];
    if let DatasetConfig::Cifar10 { path, .. } = &cfg.dataset {
        for name in CIFAR10_TRAIN_FILES.iter().chain(&CIFAR10_TEST_FILES) {
            let file = path.join(name);
            out.push(crate::manifest::FileDigest::of(&file, file.display().to_string())?);
        }
    }
    Ok(out)
}

#[derive(Debug, serde::Serialize)]
pub struct DatasetSummary {
    pub train: usize,
    pub test: usize,
    pub classes: usize,
    pub image_shape: [usize; 3],
}

impl DatasetSummary {
    pub fn of(train: &rblock_core::train::Dataset, test: &rblock_core::train::Dataset) -> Self {
        Self { train: train.len(), test: test.len(), classes: train.classes, image_shape: train.image_shape() }
    }
}

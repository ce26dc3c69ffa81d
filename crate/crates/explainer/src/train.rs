//! Training runs: per-epoch loss log and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vae_core::data::{batches, Dataset};
use vae_core::optim::{AdamConfig, AdamState};
use vae_core::vae::{train_step, LossBreakdown, VaeConfig, VaeModel};
use vae_core::SeededRng;

use crate::error::{Error, IoContext, Result};
use crate::model_io::save_model_dir;

pub const LOSS_LOG_FILE: &str = "loss.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Train on the first `subset` images only.
    pub subset: Option<usize>,
}

impl TrainConfig {
    pub fn new(data_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            data_dir: data_dir.into(),
            out_dir: out_dir.into(),
            subset: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.subset == Some(0) {
            return Err(Error::Config("subset must be >= 1".into()));
        }
        Ok(())
    }
}

/// One row of the loss log: epoch means over all training images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: VaeModel<f32>,
    pub log: Vec<EpochLog>,
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().at(path)
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Trains a fresh model on `train`, writing `encoder.vmod`, `decoder.vmod`
/// and `loss.csv` to `config.out_dir` after every epoch. On divergence the
/// log keeps the last finite epoch and the error is returned.
pub fn train(config: &TrainConfig, train: &Dataset<f32>) -> Result<TrainOutcome> {
    config.validate()?;
    let data = match config.subset {
        Some(n) if n < train.len() => train.slice(0..n)?,
        _ => train.clone(),
    };
    let (h, w) = data.image_size();
    let arch = VaeConfig {
        height: h,
        width: w,
        ..VaeConfig::MNIST
    };
    fs::create_dir_all(&config.out_dir).at(&config.out_dir)?;
    let log_path = config.out_dir.join(LOSS_LOG_FILE);

    let mut model = VaeModel::<f32>::new(&arch, config.seed)?;
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut optimizer = AdamState::new(adam, model.params());
    let mut rng = SeededRng::with_stream(config.seed, 1);
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let (mut recon, mut kl) = (0.0, 0.0);
        for batch in batches(&data, config.batch_size, &mut rng, true)? {
            let n = batch.batch() as f64;
            let loss = match train_step(&mut model, &batch, &mut optimizer, &mut rng) {
                Ok(loss) => loss,
                Err(e) => {
                    write_log(&log_path, &log)?;
                    return Err(e.into());
                }
            };
            recon += loss.reconstruction * n;
            kl += loss.kl * n;
        }
        let n = data.len() as f64;
        let mean = LossBreakdown::new(recon / n, kl / n);
        log.push(EpochLog {
            epoch,
            reconstruction: mean.reconstruction,
            kl: mean.kl,
            total: mean.total,
        });
        log::info!(
            "epoch {epoch}/{}: reconstruction {:.3} kl {:.3} total {:.3}",
            config.epochs,
            mean.reconstruction,
            mean.kl,
            mean.total
        );
        save_model_dir(&model, &config.out_dir)?;
        write_log(&log_path, &log)?;
    }
    Ok(TrainOutcome { model, log })
}

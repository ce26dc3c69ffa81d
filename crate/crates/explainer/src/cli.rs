//! `vae` subcommands.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vae_core::gradcheck::{run_all, Fault, Target};
use vae_core::vae::bce_per_image;

use crate::fetch::{fetch_mnist, DEFAULT_BASE_URL};
use crate::idx::{load_split, Split};
use crate::model_io::{
    export_atlas, load_decoder, load_encoder, load_model_dir, LatentAtlas, ATLAS_FILE,
    DECODER_FILE, DEFAULT_ATLAS_COUNT, ENCODER_FILE,
};
use crate::pgm::write_side_by_side;
use crate::server::{router, serve, Cors, ServeState};
use crate::train::{train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "vae", version, about = "Train, inspect and serve the MNIST convolutional VAE")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding the MNIST IDX files (plain or .gz).
    #[arg(long, env = "VAE_DATA_DIR", default_value = "data/mnist")]
    pub data_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a fresh model and write encoder, decoder and loss log.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "model")]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use only the first N training images.
        #[arg(long)]
        subset: Option<usize>,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale the analytic gradient of the named target by 1.1 (the
        /// check must then fail).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Encode images to their latent means and write the atlas.
    ExportAtlas {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "model")]
        model_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ATLAS_COUNT)]
        count: usize,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Reconstruct one test image through the posterior mean and write a
    /// side-by-side PGM.
    Reconstruct {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "model")]
        model_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "reconstruction.pgm")]
        output: PathBuf,
    },
    /// Download the MNIST IDX files.
    FetchData {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = DEFAULT_BASE_URL)]
        base_url: String,
    },
    /// Serve the inference API (and optionally the built UI).
    Serve {
        #[arg(long, default_value = "model")]
        model_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory of static files served for non-API paths.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        /// Allowed CORS origin; any origin when omitted.
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train {
            data,
            out,
            epochs,
            batch_size,
            lr,
            seed,
            subset,
        } => {
            let config = TrainConfig {
                epochs,
                batch_size,
                lr,
                seed,
                data_dir: data.data_dir,
                out_dir: out,
                subset,
            };
            config.validate()?;
            let ds = load_split(&config.data_dir, Split::Train)?;
            let outcome = train(&config, &ds)?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "trained {} epochs: reconstruction {:.3} kl {:.3} total {:.3}",
                    last.epoch, last.reconstruction, last.kl, last.total
                );
            }
            println!("model written to {}", config.out_dir.display());
        }
        Command::Gradcheck {
            instances,
            seed,
            corrupt,
        } => {
            let fault = match corrupt {
                Some(name) => {
                    let target = Target::all()
                        .into_iter()
                        .find(|t| t.name() == name)
                        .with_context(|| format!("unknown gradcheck target {name:?}"))?;
                    Some(Fault { target, scale: 1.1 })
                }
                None => None,
            };
            let report = run_all(instances, seed, fault)?;
            for r in &report.results {
                println!(
                    "{:<20} {} entries={:<6} max_rel_error={:.3e}",
                    r.target.name(),
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.entries,
                    r.max_rel_error
                );
            }
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ExportAtlas {
            data,
            model_dir,
            count,
            split,
        } => {
            let encoder = load_encoder(&model_dir.join(ENCODER_FILE))?;
            let ds = load_split(&data.data_dir, split.into())?;
            let atlas = export_atlas(&encoder, &ds, count)?;
            atlas.save_dir(&model_dir)?;
            println!("wrote {} atlas points to {}", atlas.len(), model_dir.display());
        }
        Command::Reconstruct {
            data,
            model_dir,
            index,
            output,
        } => {
            let model = load_model_dir(&model_dir)?;
            let ds = load_split(&data.data_dir, Split::Test)?;
            if index >= ds.len() {
                bail!("index {index} out of range for {} test images", ds.len());
            }
            let x = ds.images().slice_batch(index, index + 1)?;
            let dist = model.encode(&x)?;
            let x_hat = model.decode(&dist.mu)?;
            let bce = bce_per_image(&x, &x_hat)?[0];
            let (h, w) = ds.image_size();
            write_side_by_side(&output, h, &[(w, x.data()), (w, x_hat.data())])?;
            println!(
                "image {index} (label {}): reconstruction BCE {bce:.3}, written to {}",
                ds.labels()[index],
                output.display()
            );
        }
        Command::FetchData { data, base_url } => {
            let files = fetch_mnist(&base_url, &data.data_dir)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Serve {
            model_dir,
            host,
            port,
            static_dir,
            cors_origin,
        } => {
            let encoder = load_encoder(&model_dir.join(ENCODER_FILE))?;
            let decoder = load_decoder(&model_dir.join(DECODER_FILE))?;
            let atlas = LatentAtlas::load(&model_dir.join(ATLAS_FILE))
                .context("no atlas in the model directory; run `vae export-atlas` first")?;
            let state = Arc::new(ServeState::new(encoder, decoder, &atlas)?);
            let cors = cors_origin.map_or(Cors::Any, Cors::Origin);
            let app = router(state, static_dir, cors);
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .with_context(|| format!("bad listen address {host}:{port}"))?;
            tokio::runtime::Runtime::new()?.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .with_context(|| format!("cannot listen on {addr}"))?;
                serve(listener, app).await.context("server failed")
            })?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

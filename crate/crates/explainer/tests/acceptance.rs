//! End-to-end acceptance gate. Every criterion runs even if an earlier one
//! fails; one PASS/FAIL line is printed per criterion and the test fails if
//! any of them does.
//!
//! Run with `cargo test -p vae-explainer --test acceptance -- --nocapture`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use common::{desk_data, floats, start_server};
use serde_json::json;
use vae_core::data::Dataset;
use vae_core::gradcheck::{
    check_elbo, check_end_to_end, check_layer, check_sampling_head, run_all, Fault, Target,
};
use vae_core::tensor::{conv2d, conv2d_transpose};
use vae_core::vae::{
    bce_per_image, elbo_loss, reparameterize, sigma_from_logvar, LatentDistribution, VaeConfig,
    VaeModel,
};
use vae_core::{Padding, SeededRng, Tensor};
use vae_explainer::idx::{dataset_from_idx, dataset_to_idx, load_split, parse_images, parse_labels, Split};
use vae_explainer::model_io::{
    decode_model, encode_model, export_atlas, load_model_dir, Half, LatentAtlas,
    DEFAULT_ATLAS_COUNT, DECODER_FILE, ENCODER_FILE,
};
use vae_explainer::train::{train, TrainConfig, TrainOutcome, LOSS_LOG_FILE};

const DESK_SUBSET: usize = 2_000;
const DESK_SEED: u64 = 7;
const HELD_OUT: usize = 200;
const NN_QUERIES: usize = 500;

struct DeskRun {
    dir: tempfile::TempDir,
    outcome: TrainOutcome,
    elapsed: Duration,
}

fn desk_run() -> Result<DeskRun> {
    let dir = tempfile::tempdir()?;
    let mut config = TrainConfig::new(desk_data(), dir.path());
    config.epochs = 5;
    config.batch_size = 128;
    config.lr = 1e-3;
    config.seed = DESK_SEED;
    config.subset = Some(DESK_SUBSET);
    let ds = load_split(&desk_data(), Split::Train)?;
    let start = Instant::now();
    let outcome = train(&config, &ds)?;
    Ok(DeskRun {
        dir,
        outcome,
        elapsed: start.elapsed(),
    })
}

/// Mean per-image BCE of `decode(encode(x).mu)`.
fn mean_bce(model: &VaeModel<f32>, ds: &Dataset<f32>) -> Result<f64> {
    let x = ds.images();
    let x_hat = model.decode(&model.encode(x)?.mu)?;
    let per = bce_per_image(x, &x_hat)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

fn gradient_suite() -> Result<String> {
    let start = Instant::now();
    let report = run_all(20, 0, None)?;
    let elapsed = start.elapsed();
    let worst = report
        .results
        .iter()
        .map(|r| (r.max_rel_error, r.target.name()))
        .fold((0.0, String::new()), |a, b| if b.0 > a.0 { b } else { a });
    for r in &report.results {
        ensure!(r.passed(), "{} max relative error {:e}", r.target.name(), r.max_rel_error);
        ensure!(r.entries > 0, "{} compared nothing", r.target.name());
    }
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");

    // The checker must notice a 10% error in any single backward pass.
    for target in Target::all() {
        let fault = Some(Fault { target, scale: 1.1 });
        let r = match target {
            Target::SamplingHead => check_sampling_head(3, 1, fault)?,
            Target::ElboLoss => check_elbo(3, 1, fault)?,
            Target::EndToEnd => check_end_to_end(1, fault)?,
            t => check_layer(t, 3, 1, fault)?,
        };
        ensure!(!r.passed(), "fault in {} went unnoticed", target.name());
    }
    Ok(format!(
        "{} targets, worst {:.2e} ({}), {:.1}s",
        report.results.len(),
        worst.0,
        worst.1,
        elapsed.as_secs_f64()
    ))
}

fn sampling_suite() -> Result<String> {
    let mut rng = SeededRng::new(100);
    let lv: Vec<f32> = (0..10_000).map(|_| rng.uniform_in(-80.0, 80.0) as f32).collect();
    let sigma = sigma_from_logvar(&Tensor::new([lv.len()], lv)?)?;
    ensure!(sigma.data().iter().all(|&s| s > 0.0 && s.is_finite()), "sigma not positive");

    let (mu, logvar): ([f32; 2], [f32; 2]) = ([0.7, -1.3], [0.4, -1.0]);
    const N: usize = 10_000;
    let dist = LatentDistribution::new(
        Tensor::new([N, 2], (0..N).flat_map(|_| mu).collect())?,
        Tensor::new([N, 2], (0..N).flat_map(|_| logvar).collect())?,
    )?;
    let s = reparameterize(&dist, &mut SeededRng::new(101))?;
    let sig = dist.sigma()?;
    for ((z, m), (sg, e)) in s
        .z
        .data()
        .iter()
        .zip(dist.mu.data())
        .zip(sig.data().iter().zip(s.eps.data()))
    {
        ensure!(((z - m) as f64 - (sg * e) as f64).abs() <= 1e-6, "z - mu != sigma * eps");
    }
    for axis in 0..2 {
        let zs: Vec<f64> = s.z.data().iter().skip(axis).step_by(2).map(|&v| v as f64).collect();
        let mean = zs.iter().sum::<f64>() / N as f64;
        let std = (zs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (N - 1) as f64).sqrt();
        let sigma = (0.5 * logvar[axis] as f64).exp();
        ensure!((mean - mu[axis] as f64).abs() < 4.0 * sigma / (N as f64).sqrt(), "axis {axis} mean {mean}");
        ensure!(((std - sigma) / sigma).abs() < 0.05, "axis {axis} std {std} vs {sigma}");
    }

    let x = Tensor::<f64>::full(&[1, 1, 1, 1], 0.5);
    let kl = |mu: [f64; 2], lv: [f64; 2]| -> Result<f64> {
        let d = LatentDistribution::new(Tensor::new([1, 2], mu.to_vec())?, Tensor::new([1, 2], lv.to_vec())?)?;
        Ok(elbo_loss(&x, &x, &d)?.kl)
    };
    ensure!(kl([0.0, 0.0], [0.0, 0.0])? == 0.0, "KL(0, 0) != 0");
    ensure!(kl([1.0, 0.0], [0.0, 0.0])? == 0.5, "KL(mu=1, logvar=0) != 0.5");
    Ok("positivity, identity, 10k-draw moments, closed-form KL".into())
}

/// Direct six-loop cross-correlation with TensorFlow-style padding.
fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, same: bool) -> (Vec<usize>, Vec<f64>) {
    let (xs, ks) = (x.shape(), k.shape());
    let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw, f) = (ks[0], ks[1], ks[3]);
    let (oh, ow, pt, pl) = if same {
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let ph = ((oh - 1) * stride + kh).saturating_sub(h);
        let pw = ((ow - 1) * stride + kw).saturating_sub(w);
        (oh, ow, ph / 2, pw / 2)
    } else {
        ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
    };
    let mut out = vec![0.0; b * oh * ow * f];
    for n in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                for o in 0..f {
                    let mut acc = 0.0;
                    for di in 0..kh {
                        for dj in 0..kw {
                            let (r, s) = ((i * stride + di) as isize - pt as isize, (j * stride + dj) as isize - pl as isize);
                            if r < 0 || s < 0 || r >= h as isize || s >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                acc += x.data()[((n * h + r as usize) * w + s as usize) * c + ci]
                                    * k.data()[((di * kw + dj) * c + ci) * f + o];
                            }
                        }
                    }
                    out[((n * oh + i) * ow + j) * f + o] = acc;
                }
            }
        }
    }
    (vec![b, oh, ow, f], out)
}

fn random(shape: &[usize], rng: &mut SeededRng) -> Result<Tensor<f64>> {
    Ok(Tensor::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))?)
}

fn conv_oracle_suite() -> Result<String> {
    let mut rng = SeededRng::new(200);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for h in 1..=6 {
        for w in 1..=6 {
            for kh in 1..=h.min(3) {
                for kw in 1..=w.min(3) {
                    for stride in [1, 2] {
                        for same in [true, false] {
                            let x = random(&[2, h, w, 2], &mut rng)?;
                            let k = random(&[kh, kw, 2, 3], &mut rng)?;
                            let padding = if same { Padding::Same } else { Padding::Valid };
                            let got = conv2d(&x, &k, &Tensor::zeros(&[3]), stride, padding)?;
                            let (shape, want) = naive_conv(&x, &k, stride, same);
                            ensure!(got.shape() == shape.as_slice(), "shape {:?} vs {shape:?}", got.shape());
                            for (a, b) in got.data().iter().zip(&want) {
                                worst = worst.max((a - b).abs());
                            }
                            cases += 1;
                        }
                    }
                }
            }
        }
    }
    ensure!(worst <= 1e-6, "conv2d differs from oracle by {worst:e}");

    // <conv(x), y> == <x, conv_transpose(y)> for geometries where the
    // transposed output has the input's size.
    let mut adjoint_worst: f64 = 0.0;
    let mut n = 0;
    while n < 100 {
        let stride = 1 + rng.uniform_in(0.0, 2.0) as usize;
        let k = 1 + rng.uniform_in(0.0, 3.0) as usize;
        let h = 1 + rng.uniform_in(0.0, 6.0) as usize;
        let same = rng.uniform() < 0.5;
        let fits = if same { h % stride == 0 } else { h >= k && k >= stride && (h - k) % stride == 0 };
        if !fits {
            continue;
        }
        let padding = if same { Padding::Same } else { Padding::Valid };
        let (cin, cout) = (1 + n % 3, 1 + n % 2);
        let x = random(&[1, h, h, cin], &mut rng)?;
        let kernel = random(&[k, k, cin, cout], &mut rng)?;
        let y_shape = conv2d(&x, &kernel, &Tensor::zeros(&[cout]), stride, padding)?.shape().to_vec();
        let y = random(&y_shape, &mut rng)?;
        let lhs = conv2d(&x, &kernel, &Tensor::zeros(&[cout]), stride, padding)?.dot(&y)?;
        let xt = conv2d_transpose(&y, &kernel, &Tensor::zeros(&[cin]), stride, padding)?;
        ensure!(xt.shape() == x.shape(), "transpose shape {:?} vs {:?}", xt.shape(), x.shape());
        let rhs = x.dot(&xt)?;
        let scale = (x.dot(&x)? * y.dot(&y)?).sqrt() * (kernel.dot(&kernel)?).sqrt();
        let err = (lhs - rhs).abs() / scale.max(1.0);
        adjoint_worst = adjoint_worst.max(err);
        n += 1;
    }
    ensure!(adjoint_worst <= 1e-5, "adjoint identity off by {adjoint_worst:e}");
    Ok(format!("{cases} conv cases max |diff| {worst:.1e}; 100 adjoint instances max {adjoint_worst:.1e}"))
}

fn desk_training(run: &DeskRun, held_out: &Dataset<f32>) -> Result<String> {
    let log = &run.outcome.log;
    ensure!(log.len() == 5, "{} epochs logged", log.len());
    ensure!(run.elapsed < Duration::from_secs(15 * 60), "took {:?}", run.elapsed);
    for pair in log.windows(2) {
        ensure!(pair[1].total < pair[0].total, "epoch {} total {} >= {}", pair[1].epoch, pair[1].total, pair[0].total);
    }
    let untrained = VaeModel::<f32>::new(&VaeConfig::MNIST, DESK_SEED)?;
    let before = mean_bce(&untrained, held_out)?;
    let after = mean_bce(&run.outcome.model, held_out)?;
    let ratio = after / before;
    ensure!(ratio < 0.6, "held-out BCE {after:.1} is {:.0}% of untrained {before:.1}", ratio * 100.0);
    let kl = log.last().unwrap().kl;
    ensure!(kl > 0.0, "final KL {kl}");
    Ok(format!(
        "{:.0}s, totals {}, held-out BCE {after:.1} / {before:.1} = {:.0}%, KL {kl:.2}",
        run.elapsed.as_secs_f64(),
        log.iter().map(|r| format!("{:.1}", r.total)).collect::<Vec<_>>().join(" > "),
        ratio * 100.0
    ))
}

fn latent_structure(run: &DeskRun, train_ds: &Dataset<f32>, queries: &Dataset<f32>) -> Result<String> {
    let encoder = &run.outcome.model.encoder;
    let atlas = export_atlas(encoder, &train_ds.slice(0..DESK_SUBSET)?, DESK_SUBSET)?;
    ensure!(atlas.len() == DESK_SUBSET);
    let mu = encoder.infer(queries.images())?.mu;
    let mut correct = 0;
    for (q, &label) in mu.data().chunks_exact(2).zip(queries.labels()) {
        let nearest = atlas
            .entries
            .iter()
            .min_by(|a, b| {
                let da = (a.z[0] - q[0]).powi(2) + (a.z[1] - q[1]).powi(2);
                let db = (b.z[0] - q[0]).powi(2) + (b.z[1] - q[1]).powi(2);
                da.total_cmp(&db)
            })
            .context("empty atlas")?;
        correct += usize::from(nearest.label == label);
    }
    let acc = correct as f64 / queries.len() as f64;
    ensure!(acc >= 0.4, "1-NN accuracy {:.1}%", acc * 100.0);
    Ok(format!("1-NN accuracy {correct}/{} = {:.1}%", queries.len(), acc * 100.0))
}

fn bits(model: &VaeModel<f32>) -> Vec<u32> {
    model.params().flat_map(|p| p.data().iter().map(|v| v.to_bits())).collect()
}

fn serialization(run: &DeskRun) -> Result<String> {
    let loaded = load_model_dir(run.dir.path())?;
    ensure!(bits(&loaded) == bits(&run.outcome.model), "parameter bits changed");
    ensure!(loaded == run.outcome.model, "architecture changed");
    let bytes = encode_model(Half::Decoder, loaded.decoder.layers())?;
    let (half, layers) = decode_model(&bytes)?;
    ensure!(half == Half::Decoder && encode_model(half, &layers)? == bytes, "re-encoding differs");

    let train_ds = load_split(&desk_data(), Split::Train)?;
    let atlas = export_atlas(&loaded.encoder, &train_ds, 500)?;
    let from_bin = LatentAtlas::from_bytes(&atlas.to_bytes())?;
    let from_json = LatentAtlas::from_json(&atlas.to_json()?)?;
    ensure!(from_bin == atlas && from_json == atlas, "atlas round trip differs");
    ensure!(from_bin.to_bytes() == from_json.to_bytes(), "binary and JSON atlases disagree");

    // 3 images of 2x2 pixels with a label file to match.
    let images: Vec<u8> = [0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 2]
        .into_iter()
        .chain([0, 128, 255, 1, 7, 77, 177, 254, 9, 99, 199, 200])
        .collect();
    let labels: Vec<u8> = vec![0, 0, 8, 1, 0, 0, 0, 3, 4, 0, 9];
    let ds = dataset_from_idx(&parse_images(&images)?, parse_labels(&labels)?)?;
    ensure!(ds.images().data()[1] == 128.0 / 255.0, "pixel scaling");
    let (img2, lab2) = dataset_to_idx(&ds);
    ensure!(img2 == images && lab2 == labels, "IDX fixture round trip differs");
    Ok("model bits, atlas binary/JSON, IDX fixture".into())
}

fn server_contract(run: &DeskRun, held_out: &Dataset<f32>) -> Result<String> {
    let model = run.outcome.model.clone();
    let train_ds = load_split(&desk_data(), Split::Train)?;
    let atlas = export_atlas(&model.encoder, &train_ds, DESK_SUBSET)?;
    let client = start_server(model.encoder, model.decoder, &atlas, None);

    let zeros = json!({ "pixels": vec![0.0; 784] }).to_string();
    let r = client.post("/api/encode", &zeros);
    ensure!(r.status == 200, "encode zeros: {} {}", r.status, r.body);
    let enc = r.json();
    let (mu, logvar, sigma) = (floats(&enc["mu"]), floats(&enc["logvar"]), floats(&enc["sigma"]));
    for i in 0..2 {
        ensure!(mu[i].is_finite() && logvar[i].is_finite() && sigma[i] > 0.0, "encode zeros values");
        ensure!((sigma[i] - (0.5 * logvar[i]).exp()).abs() <= 1e-6 * sigma[i].max(1.0), "sigma != exp(0.5 logvar)");
    }
    let r = client.post("/api/encode", &json!({ "pixels": vec![0.0; 783] }).to_string());
    ensure!(r.status == 400 && r.json()["field"] == "pixels", "783 pixels: {}", r.status);

    let r = client.post("/api/sample", &json!({ "mu": [0.25, -0.5], "logvar": [-100.0, -100.0] }).to_string());
    let z = floats(&r.json()["z"]);
    ensure!((z[0] - 0.25).abs() < 1e-10 && (z[1] + 0.5).abs() < 1e-10, "collapsed sample {z:?}");
    let seeded = json!({ "mu": mu, "logvar": logvar, "seed": 77 }).to_string();
    let (a, b) = (client.post("/api/sample", &seeded), client.post("/api/sample", &seeded));
    ensure!(a.status == 200 && a.body == b.body, "seeded sample not reproducible");
    let s = a.json();
    let (eps, z) = (floats(&s["eps"]), floats(&s["z"]));
    for i in 0..2 {
        ensure!((z[i] - mu[i] - sigma[i] * eps[i]).abs() <= 1e-6, "z - mu != sigma * eps");
    }

    let (smu, slv): ([f64; 2], [f64; 2]) = ([1.0, -2.0], [0.0, -1.0]);
    let body = json!({ "mu": smu, "logvar": slv }).to_string();
    const N: usize = 10_000;
    let mut zs = [Vec::with_capacity(N), Vec::with_capacity(N)];
    for _ in 0..N {
        let z = floats(&client.post("/api/sample", &body).json()["z"]);
        zs[0].push(z[0]);
        zs[1].push(z[1]);
    }
    for axis in 0..2 {
        let mean = zs[axis].iter().sum::<f64>() / N as f64;
        let std = (zs[axis].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (N - 1) as f64).sqrt();
        let sigma = (0.5 * slv[axis]).exp();
        ensure!((mean - smu[axis]).abs() < 4.0 * sigma / (N as f64).sqrt(), "unseeded mean {mean}");
        ensure!(((std - sigma) / sigma).abs() < 0.05, "unseeded std {std}");
    }

    let origin = json!({ "z": [0.0, 0.0] }).to_string();
    let (a, b) = (client.post("/api/decode", &origin), client.post("/api/decode", &origin));
    ensure!(a.status == 200 && a.body == b.body, "decode not deterministic");
    let px = floats(&a.json()["pixels"]);
    ensure!(px.len() == 784 && px.iter().all(|&p| p > 0.0 && p < 1.0), "decode range");
    ensure!(client.post("/api/decode", "{\"z\": [NaN, 0]}").status == 400, "NaN z accepted");
    ensure!(client.post("/api/decode", &json!({ "z": [1e39, 0.0] }).to_string()).status == 400, "inf z accepted");

    // Reconstructions over HTTP beat the untrained model.
    let untrained = VaeModel::<f32>::new(&VaeConfig::MNIST, DESK_SEED)?;
    let sample = held_out.slice(0..20)?;
    let mut served = Vec::new();
    for i in 0..sample.len() {
        let pixels = sample.images().slice_batch(i, i + 1)?;
        let enc = client.post("/api/encode", &json!({ "pixels": pixels.data() }).to_string()).json();
        let dec = client.post("/api/decode", &json!({ "z": enc["mu"] }).to_string()).json();
        let x_hat: Vec<f32> = floats(&dec["pixels"]).into_iter().map(|v| v as f32).collect();
        served.extend(bce_per_image(&pixels, &Tensor::new(pixels.shape(), x_hat)?)?);
    }
    let served = served.iter().sum::<f64>() / served.len() as f64;
    let baseline = mean_bce(&untrained, &sample)?;
    ensure!(served < baseline, "served BCE {served:.1} vs untrained {baseline:.1}");

    let meta = client.get("/api/meta", &[]).json();
    ensure!(meta["latent_dim"] == 2 && meta["atlas_count"] == DESK_SUBSET, "meta {meta}");
    ensure!(DEFAULT_ATLAS_COUNT == 10_000, "default atlas size");
    let hash = vae_explainer::model_io::model_hash(run.dir.path())?;
    ensure!(meta["model_hash"] == hash.as_str(), "model hash differs from files");
    let (a, b) = (client.get("/api/atlas", &[]), client.get("/api/atlas", &[]));
    let etag = a.header("etag").context("no ETag")?.to_string();
    ensure!(etag == format!("\"{hash}\"") && b.header("etag") == Some(etag.as_str()), "ETag unstable");
    let points = a.json()["points"].as_array().cloned().context("no points")?;
    ensure!(points.len() == DESK_SUBSET, "atlas size {}", points.len());
    ensure!(points.iter().all(|p| p["label"].as_u64().is_some_and(|l| l <= 9)), "atlas labels");
    ensure!(client.get("/api/atlas", &[("if-none-match", &etag)]).status == 304, "no 304");

    let mut rounds = Vec::with_capacity(200);
    for i in 0..200 {
        let pixels = held_out.images().slice_batch(i, i + 1)?;
        let body = json!({ "pixels": pixels.data() }).to_string();
        let start = Instant::now();
        let enc = client.post("/api/encode", &body);
        let dec = client.post("/api/decode", &json!({ "z": enc.json()["mu"] }).to_string());
        rounds.push(start.elapsed());
        ensure!(dec.status == 200, "round trip failed");
    }
    rounds.sort();
    let p95 = rounds[rounds.len() * 95 / 100];
    ensure!(p95 < Duration::from_millis(50), "p95 {p95:?}");
    Ok(format!("endpoint examples, 10k unseeded samples, p95 encode+decode {:.1} ms", p95.as_secs_f64() * 1e3))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| path.display().to_string())
}

fn determinism(a: &DeskRun) -> Result<String> {
    let b = desk_run()?;
    for file in [LOSS_LOG_FILE, ENCODER_FILE, DECODER_FILE] {
        ensure!(read(&a.dir.path().join(file))? == read(&b.dir.path().join(file))?, "{file} differs");
    }
    Ok("loss.csv, encoder.vmod, decoder.vmod byte-identical across two runs".into())
}

fn check(name: &str, failures: &mut Vec<String>, f: impl FnOnce() -> Result<String>) {
    let outcome = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(panic) => Err(anyhow::anyhow!(
            "panicked: {}",
            panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    };
    match outcome {
        Ok(detail) => println!("PASS  {name:<22} {detail}"),
        Err(e) => {
            println!("FAIL  {name:<22} {e:#}");
            failures.push(name.to_string());
        }
    }
}

#[test]
fn primary_criteria() {
    let mut failures = Vec::new();
    check("gradient suite", &mut failures, gradient_suite);
    check("sampling trick", &mut failures, sampling_suite);
    check("conv oracle", &mut failures, conv_oracle_suite);

    let train_ds = load_split(&desk_data(), Split::Train).expect("desk training data");
    let test_ds = load_split(&desk_data(), Split::Test).expect("desk test data");
    let held_out = test_ds.slice(0..HELD_OUT).unwrap();
    let queries = test_ds.slice(HELD_OUT..HELD_OUT + NN_QUERIES).unwrap();

    match desk_run() {
        Ok(run) => {
            check("desk-scale training", &mut failures, || desk_training(&run, &held_out));
            check("latent structure", &mut failures, || latent_structure(&run, &train_ds, &queries));
            check("serialization", &mut failures, || serialization(&run));
            check("server contract", &mut failures, || server_contract(&run, &held_out));
            check("determinism", &mut failures, || determinism(&run));
        }
        Err(e) => {
            for name in ["desk-scale training", "latent structure", "serialization", "server contract", "determinism"] {
                println!("FAIL  {name:<22} desk run failed: {e:#}");
                failures.push(name.into());
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}

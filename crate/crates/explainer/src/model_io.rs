//! Model files and the latent atlas.
//!
//! A model file holds one half of the autoencoder:
//!
//! ```text
//! "VMOD" | manifest length (u32 LE) | manifest (JSON) | parameter blob
//! ```
//!
//! The manifest carries the format version, which half it is, the ordered
//! layer specs and an index of every parameter tensor (shape, byte offset
//! and length inside the blob). The blob is little-endian `f32`, tensors
//! concatenated in manifest order.
//!
//! The atlas binary is a 16-byte header (`"VATL"`, version, count, reserved,
//! all `u32` LE) followed by `count` 9-byte records `(z1: f32, z2: f32,
//! label: u8)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vae_core::data::Dataset;
use vae_core::nn::{Layer, LayerSpec};
use vae_core::vae::{Decoder, Encoder, VaeModel};
use vae_core::Tensor;

use crate::error::{Error, IoContext, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"VMOD";
pub const MODEL_VERSION: u32 = 1;
pub const ATLAS_MAGIC: &[u8; 4] = b"VATL";
pub const ATLAS_VERSION: u32 = 1;
pub const ATLAS_RECORD_BYTES: usize = 9;
pub const DEFAULT_ATLAS_COUNT: usize = 10_000;

pub const ENCODER_FILE: &str = "encoder.vmod";
pub const DECODER_FILE: &str = "decoder.vmod";
pub const ATLAS_FILE: &str = "atlas.vatl";
pub const ATLAS_JSON_FILE: &str = "atlas.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Half {
    Encoder,
    Decoder,
}

impl Half {
    pub fn name(self) -> &'static str {
        match self {
            Half::Encoder => "encoder",
            Half::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub layer: usize,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Length in bytes.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub half: Half,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<ParamEntry>,
}

/// Serializes layers as one half of a model.
pub fn encode_model<'a>(half: Half, layers: impl IntoIterator<Item = &'a Layer<f32>>) -> Result<Vec<u8>> {
    let mut specs = Vec::new();
    let mut params = Vec::new();
    let mut blob = Vec::new();
    for (i, layer) in layers.into_iter().enumerate() {
        specs.push(layer.spec().clone());
        for p in layer.params() {
            params.push(ParamEntry {
                layer: i,
                shape: p.shape().to_vec(),
                offset: blob.len(),
                length: p.len() * 4,
            });
            for v in p.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = serde_json::to_vec(&Manifest {
        format_version: MODEL_VERSION,
        half,
        layers: specs,
        params,
    })?;
    let mut out = Vec::with_capacity(8 + manifest.len() + blob.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses a model file into its half tag and rebuilt layers.
pub fn decode_model(bytes: &[u8]) -> Result<(Half, Vec<Layer<f32>>)> {
    if bytes.len() < 8 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::Corruption("missing VMOD header".into()));
    }
    let manifest_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let manifest_bytes = bytes
        .get(8..8 + manifest_len)
        .ok_or_else(|| Error::Corruption("manifest extends past end of file".into()))?;
    let manifest: Manifest = serde_json::from_slice(manifest_bytes)
        .map_err(|e| Error::Corruption(format!("manifest: {e}")))?;
    if manifest.format_version != MODEL_VERSION {
        return Err(Error::Version {
            expected: MODEL_VERSION,
            found: manifest.format_version,
        });
    }
    let blob = &bytes[8 + manifest_len..];

    let mut cursor = 0;
    for p in &manifest.params {
        let elements: usize = p.shape.iter().product();
        if p.offset != cursor || p.length != elements * 4 || p.layer >= manifest.layers.len() {
            return Err(Error::Corruption(format!(
                "parameter index entry {p:?} inconsistent at byte {cursor}"
            )));
        }
        cursor += p.length;
    }
    if cursor != blob.len() {
        return Err(Error::Corruption(format!(
            "parameter index covers {cursor} bytes but blob holds {}",
            blob.len()
        )));
    }

    let mut per_layer: Vec<Vec<Tensor<f32>>> = vec![Vec::new(); manifest.layers.len()];
    for p in &manifest.params {
        let data = blob[p.offset..p.offset + p.length]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        per_layer[p.layer].push(Tensor::new(p.shape.clone(), data)?);
    }
    let layers = manifest
        .layers
        .into_iter()
        .zip(per_layer)
        .map(|(spec, params)| Layer::with_params(spec, params))
        .collect::<vae_core::Result<Vec<_>>>()
        .map_err(|e| Error::Corruption(e.to_string()))?;
    Ok((manifest.half, layers))
}

fn expect_half(found: Half, expected: Half) -> Result<()> {
    if found != expected {
        return Err(Error::ArchitectureKind {
            expected: expected.name(),
            found: found.name(),
        });
    }
    Ok(())
}

pub fn encoder_from_bytes(bytes: &[u8]) -> Result<Encoder<f32>> {
    let (half, layers) = decode_model(bytes)?;
    expect_half(half, Half::Encoder)?;
    Ok(Encoder::from_layers(layers)?)
}

pub fn decoder_from_bytes(bytes: &[u8]) -> Result<Decoder<f32>> {
    let (half, layers) = decode_model(bytes)?;
    expect_half(half, Half::Decoder)?;
    Ok(Decoder::from_layers(layers)?)
}

pub fn save_encoder(encoder: &Encoder<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_model(Half::Encoder, encoder.layers())?).at(path)
}

pub fn save_decoder(decoder: &Decoder<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_model(Half::Decoder, decoder.layers())?).at(path)
}

/// Layers and half tag of a model file.
pub fn load_model(path: &Path) -> Result<(Half, Vec<Layer<f32>>)> {
    decode_model(&fs::read(path).at(path)?)
}

pub fn load_encoder(path: &Path) -> Result<Encoder<f32>> {
    encoder_from_bytes(&fs::read(path).at(path)?)
}

pub fn load_decoder(path: &Path) -> Result<Decoder<f32>> {
    decoder_from_bytes(&fs::read(path).at(path)?)
}

/// Writes `encoder.vmod` and `decoder.vmod` into `dir`.
pub fn save_model_dir(model: &VaeModel<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    save_encoder(&model.encoder, &dir.join(ENCODER_FILE))?;
    save_decoder(&model.decoder, &dir.join(DECODER_FILE))
}

pub fn load_model_dir(dir: &Path) -> Result<VaeModel<f32>> {
    Ok(VaeModel {
        encoder: load_encoder(&dir.join(ENCODER_FILE))?,
        decoder: load_decoder(&dir.join(DECODER_FILE))?,
    })
}

/// Hex SHA-256 over both model files of `dir`.
pub fn model_hash(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in [ENCODER_FILE, DECODER_FILE] {
        let path = dir.join(name);
        hasher.update(fs::read(&path).at(&path)?);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtlasEntry {
    pub z: [f32; 2],
    pub label: u8,
}

/// Encoded means of the first images of a dataset, with their labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatentAtlas {
    pub entries: Vec<AtlasEntry>,
}

#[derive(Serialize, Deserialize)]
struct AtlasJson {
    count: usize,
    points: Vec<AtlasEntry>,
}

impl LatentAtlas {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * ATLAS_RECORD_BYTES);
        out.extend_from_slice(ATLAS_MAGIC);
        out.extend_from_slice(&ATLAS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.z[0].to_le_bytes());
            out.extend_from_slice(&e.z[1].to_le_bytes());
            out.push(e.label);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != ATLAS_MAGIC {
            return Err(Error::Corruption("missing VATL header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != ATLAS_VERSION {
            return Err(Error::Version {
                expected: ATLAS_VERSION,
                found: version,
            });
        }
        let count = word(8) as usize;
        let expected = 16 + count * ATLAS_RECORD_BYTES;
        if bytes.len() != expected {
            return Err(Error::Length {
                what: "atlas",
                expected,
                actual: bytes.len(),
            });
        }
        let entries = bytes[16..]
            .chunks_exact(ATLAS_RECORD_BYTES)
            .map(|r| {
                let f = |i: usize| f32::from_le_bytes(r[i..i + 4].try_into().expect("4 bytes"));
                AtlasEntry {
                    z: [f(0), f(4)],
                    label: r[8],
                }
            })
            .collect::<Vec<_>>();
        let atlas = Self { entries };
        atlas.validate()?;
        Ok(atlas)
    }

    fn validate(&self) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.label > 9) {
            return Err(Error::Corruption(format!("atlas label {} outside 0..=9", e.label)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&AtlasJson {
            count: self.len(),
            points: self.entries.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let parsed: AtlasJson = serde_json::from_str(text)?;
        if parsed.count != parsed.points.len() {
            return Err(Error::Corruption(format!(
                "atlas JSON count {} but {} points",
                parsed.count,
                parsed.points.len()
            )));
        }
        let atlas = Self {
            entries: parsed.points,
        };
        atlas.validate()?;
        Ok(atlas)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).at(path)?)
    }

    /// Writes `atlas.vatl` and `atlas.json` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        self.save(&dir.join(ATLAS_FILE))?;
        let json = dir.join(ATLAS_JSON_FILE);
        fs::write(&json, self.to_json()?).at(&json)
    }
}

/// Atlas of the first `count` images of `ds`, in file order, using each
/// image's encoded mean as its coordinate.
pub fn export_atlas(encoder: &Encoder<f32>, ds: &Dataset<f32>, count: usize) -> Result<LatentAtlas> {
    if count > ds.len() {
        return Err(Error::Range(format!(
            "atlas count {count} exceeds dataset size {}",
            ds.len()
        )));
    }
    const CHUNK: usize = 256;
    let mut entries = Vec::with_capacity(count);
    let mut start = 0;
    while start < count {
        let end = (start + CHUNK).min(count);
        let mu = encoder.infer(&ds.images().slice_batch(start, end)?)?.mu;
        for (row, &label) in mu.data().chunks_exact(2).zip(&ds.labels()[start..end]) {
            entries.push(AtlasEntry {
                z: [row[0], row[1]],
                label,
            });
        }
        start = end;
    }
    Ok(LatentAtlas { entries })
}

//! HTTP/JSON inference service for the explainer front end.
//!
//! | route            | body                                   | reply                          |
//! |------------------|----------------------------------------|--------------------------------|
//! | `POST /api/encode` | `{"pixels": [784 values in 0..1]}`   | `{"mu", "logvar", "sigma"}`    |
//! | `POST /api/sample` | `{"mu": [2], "logvar": [2], "seed"?}`| `{"eps", "z"}`                 |
//! | `POST /api/decode` | `{"z": [2]}`                         | `{"pixels": [784]}`            |
//! | `GET /api/atlas`   |                                      | atlas JSON, `ETag` = model hash|
//! | `GET /api/meta`    |                                      | `{"latent_dim", "model_hash", "atlas_count"}` |
//!
//! Bad requests get `400` with `{"error", "field"}`. The model is frozen for
//! the life of the process; each sampling request gets its own random
//! stream.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;
use vae_core::vae::{reparameterize, Decoder, Encoder, LatentDistribution, LATENT_DIM};
use vae_core::{SeededRng, Tensor};

use crate::error::Result;
use crate::model_io::{encode_model, Half, LatentAtlas};

pub struct ServeState {
    encoder: Encoder<f32>,
    decoder: Decoder<f32>,
    atlas_json: Bytes,
    atlas_count: usize,
    model_hash: String,
    image: (usize, usize),
    seed_base: u64,
    requests: AtomicU64,
}

impl ServeState {
    pub fn new(encoder: Encoder<f32>, decoder: Decoder<f32>, atlas: &LatentAtlas) -> Result<Self> {
        let mut hasher = Sha256::new();
        hasher.update(encode_model(Half::Encoder, encoder.layers())?);
        hasher.update(encode_model(Half::Decoder, decoder.layers())?);
        let probe = decoder.infer(&Tensor::zeros(&[1, LATENT_DIM]))?;
        let seed_base = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        Ok(Self {
            image: (probe.shape()[1], probe.shape()[2]),
            encoder,
            decoder,
            atlas_json: Bytes::from(atlas.to_json()?),
            atlas_count: atlas.len(),
            model_hash: hex::encode(hasher.finalize()),
            seed_base,
            requests: AtomicU64::new(0),
        })
    }

    /// Same digest as [`crate::model_io::model_hash`] over the saved files.
    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    fn pixels(&self) -> usize {
        self.image.0 * self.image.1
    }

    fn fresh_rng(&self) -> SeededRng {
        SeededRng::with_stream(self.seed_base, self.requests.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    pub error: String,
    pub field: Option<&'static str>,
    #[serde(skip)]
    status: StatusCode,
}

impl ApiError {
    fn bad(field: Option<&'static str>, error: impl Into<String>) -> Self {
        Self {
            error: error.into(),
            field,
            status: StatusCode::BAD_REQUEST,
        }
    }

    fn internal(error: impl std::fmt::Display) -> Self {
        Self {
            error: error.to_string(),
            field: None,
            status: StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

fn parse<T: DeserializeOwned>(body: &[u8]) -> std::result::Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad(None, format!("malformed request: {e}")))
}

/// Finite values that also fit in `f32`.
fn to_f32(field: &'static str, values: &[f64], len: usize) -> std::result::Result<Vec<f32>, ApiError> {
    if values.len() != len {
        return Err(ApiError::bad(
            Some(field),
            format!("{field} must hold {len} values, got {}", values.len()),
        ));
    }
    values
        .iter()
        .map(|&v| {
            let f = v as f32;
            if f.is_finite() {
                Ok(f)
            } else {
                Err(ApiError::bad(Some(field), format!("{field} must be finite")))
            }
        })
        .collect()
}

fn pair(t: &Tensor<f32>) -> [f32; 2] {
    [t.data()[0], t.data()[1]]
}

#[derive(Deserialize)]
struct EncodeRequest {
    pixels: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct EncodeResponse {
    pub mu: [f32; 2],
    pub logvar: [f32; 2],
    pub sigma: [f32; 2],
}

#[derive(Deserialize)]
struct SampleRequest {
    mu: Vec<f64>,
    logvar: Vec<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SampleResponse {
    pub eps: [f32; 2],
    pub z: [f32; 2],
}

#[derive(Deserialize)]
struct DecodeRequest {
    z: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct DecodeResponse {
    pub pixels: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MetaResponse {
    pub latent_dim: usize,
    pub model_hash: String,
    pub atlas_count: usize,
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> vae_core::Result<T> + Send + 'static,
) -> std::result::Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)
}

async fn encode(State(state): State<Arc<ServeState>>, body: Bytes) -> ApiResult<EncodeResponse> {
    let req: EncodeRequest = parse(&body)?;
    let pixels = to_f32("pixels", &req.pixels, state.pixels())?;
    if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(ApiError::bad(Some("pixels"), "pixels must lie in [0, 1]"));
    }
    let (h, w) = state.image;
    let x = Tensor::new([1, h, w, 1], pixels).map_err(ApiError::internal)?;
    let dist = blocking(move || state.encoder.infer(&x)).await?;
    let sigma = dist.sigma().map_err(|e| ApiError::bad(Some("pixels"), e.to_string()))?;
    Ok(Json(EncodeResponse {
        mu: pair(&dist.mu),
        logvar: pair(&dist.logvar),
        sigma: pair(&sigma),
    }))
}

async fn sample(State(state): State<Arc<ServeState>>, body: Bytes) -> ApiResult<SampleResponse> {
    let req: SampleRequest = parse(&body)?;
    let mu = to_f32("mu", &req.mu, LATENT_DIM)?;
    let logvar = to_f32("logvar", &req.logvar, LATENT_DIM)?;
    let dist = LatentDistribution::new(
        Tensor::new([1, LATENT_DIM], mu).map_err(ApiError::internal)?,
        Tensor::new([1, LATENT_DIM], logvar).map_err(ApiError::internal)?,
    )
    .map_err(ApiError::internal)?;
    let mut rng = match req.seed {
        Some(seed) => SeededRng::new(seed),
        None => state.fresh_rng(),
    };
    let s = reparameterize(&dist, &mut rng).map_err(|e| ApiError::bad(Some("logvar"), e.to_string()))?;
    Ok(Json(SampleResponse {
        eps: pair(&s.eps),
        z: pair(&s.z),
    }))
}

async fn decode(State(state): State<Arc<ServeState>>, body: Bytes) -> ApiResult<DecodeResponse> {
    let req: DecodeRequest = parse(&body)?;
    let z = Tensor::new([1, LATENT_DIM], to_f32("z", &req.z, LATENT_DIM)?).map_err(ApiError::internal)?;
    let x = blocking(move || state.decoder.infer(&z)).await?;
    Ok(Json(DecodeResponse {
        pixels: x.into_data(),
    }))
}

async fn meta(State(state): State<Arc<ServeState>>) -> Json<MetaResponse> {
    Json(MetaResponse {
        latent_dim: LATENT_DIM,
        model_hash: state.model_hash.clone(),
        atlas_count: state.atlas_count,
    })
}

async fn atlas(State(state): State<Arc<ServeState>>, headers: HeaderMap) -> Response {
    let etag = format!("\"{}\"", state.model_hash);
    let etag_value = HeaderValue::from_str(&etag).expect("hex digest is a valid header");
    if headers
        .get(header::IF_NONE_MATCH)
        .is_some_and(|v| v.as_bytes() == etag.as_bytes())
    {
        return (StatusCode::NOT_MODIFIED, [(header::ETAG, etag_value)]).into_response();
    }
    (
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("application/json")),
            (header::ETAG, etag_value),
            (header::CACHE_CONTROL, HeaderValue::from_static("no-cache")),
        ],
        state.atlas_json.clone(),
    )
        .into_response()
}

/// CORS origin policy for the UI.
#[derive(Debug, Clone, Default)]
pub enum Cors {
    #[default]
    Any,
    Origin(String),
}

pub fn router(state: Arc<ServeState>, static_dir: Option<PathBuf>, cors: Cors) -> Router {
    let origin = match cors {
        Cors::Any => AllowOrigin::any(),
        Cors::Origin(o) => AllowOrigin::exact(
            HeaderValue::from_str(&o).unwrap_or_else(|_| HeaderValue::from_static("null")),
        ),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    let api = Router::new()
        .route("/api/encode", post(encode))
        .route("/api/sample", post(sample))
        .route("/api/decode", post(decode))
        .route("/api/atlas", get(atlas))
        .route("/api/meta", get(meta))
        .with_state(state);
    let app = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(cors)
}

/// Serves `app` on `listener` until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

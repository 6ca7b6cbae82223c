//! JSON-over-HTTP access to a loaded model for interactive front ends.
//!
//! | route | body | reply |
//! |---|---|---|
//! | `GET /templates` | | rosters and canonical extents |
//! | `POST /infer` | `{scenes}` | `{user_mu, user_logvar}` |
//! | `POST /predict` | `{user_mu, template, mask?}` | `{template, positions}` |
//! | `POST /baseline` | `{method, template, scenes?, object?, seed?}` | `{template, positions}` |
//! | `GET /latents` | | `[{id, mu}]` for the training users |
//!
//! Positions are metres. Malformed bodies get 400, unknown templates 404 and
//! inputs that do not fit the model 409.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baselines::BaselineConfig;
use crate::experiments::{self, ExperimentError, Method, Resources};
use crate::scene::{Dataset, Scene};
use crate::vae::{Model, VaeError};
use crate::{Error, ErrorClass};

/// Everything a request may read. Never mutated after start-up.
pub struct ServiceState {
    pub model: Model,
    /// Training users backing the baselines and `/latents`.
    pub train: Option<Dataset>,
    pub latents: Vec<LatentRow>,
    pub baseline: BaselineConfig,
    pub seed: u64,
    pub pop_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub id: String,
    pub mu: Vec<f64>,
}

impl ServiceState {
    pub fn new(model: Model, train: Option<Dataset>, seed: u64) -> crate::Result<Self> {
        let latents = match &train {
            Some(ds) => ds
                .users
                .iter()
                .zip(experiments::latent_means(&model, &ds.users)?)
                .map(|(u, mu)| LatentRow { id: u.id.clone(), mu })
                .collect(),
            None => Vec::new(),
        };
        Ok(Self {
            model,
            train,
            latents,
            baseline: BaselineConfig::default(),
            seed,
            pop_size: crate::posegraph::DEFAULT_POPULATION,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectBody {
    pub name: String,
    /// Absent for objects left in the inventory.
    #[serde(default)]
    pub position: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBody {
    pub template: String,
    pub objects: Vec<ObjectBody>,
}

impl SceneBody {
    pub fn from_scene(scene: &Scene) -> Self {
        Self {
            template: scene.template.clone(),
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectBody {
                    name: o.name.clone(),
                    position: o.placed.then(|| o.position.clone()),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRequest {
    pub scenes: Vec<SceneBody>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub user_mu: Vec<f64>,
    pub user_logvar: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub user_mu: Vec<f64>,
    pub template: String,
    /// Only these objects are returned when present.
    #[serde(default)]
    pub mask: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionsResponse {
    pub template: String,
    pub positions: Vec<ObjectBody>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineRequest {
    pub method: String,
    pub template: String,
    /// The user's example scenes.
    #[serde(default)]
    pub scenes: Vec<SceneBody>,
    /// Place this object of the `template` scene instead of the whole scene.
    #[serde(default)]
    pub object: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateInfo {
    pub id: String,
    pub objects: Vec<String>,
    /// Axis-aligned box, `mean ± scale` of the training positions.
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

/// An error carrying its HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::CONFLICT,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let unknown_template = matches!(
            &e,
            Error::Vae(VaeError::UnknownTemplate(_))
                | Error::Experiment(ExperimentError::Vae(VaeError::UnknownTemplate(_)))
                | Error::Baseline(crate::baselines::BaselineError::UnknownTemplate(_))
                | Error::Experiment(ExperimentError::Baseline(crate::baselines::BaselineError::UnknownTemplate(_)))
        );
        if unknown_template {
            return Self::not_found(e.to_string());
        }
        match e.class() {
            ErrorClass::Model => Self::conflict(e.to_string()),
            ErrorClass::Config | ErrorClass::Data => Self::bad_request(e.to_string()),
        }
    }
}

impl From<VaeError> for ApiError {
    fn from(e: VaeError) -> Self {
        Error::from(e).into()
    }
}

impl From<ExperimentError> for ApiError {
    fn from(e: ExperimentError) -> Self {
        Error::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

/// Builds a model scene from a request body, matching objects by name.
pub fn scene_from_body(model: &Model, body: &SceneBody) -> Result<Scene, ApiError> {
    let t = model
        .template(&body.template)
        .map_err(|_| ApiError::not_found(format!("unknown template {:?}", body.template)))?;
    let dim = model.config.position_dim;
    let mut positions = vec![vec![0.0; dim]; t.objects.len()];
    let mut placed = vec![false; t.objects.len()];
    let mut used = vec![false; t.objects.len()];
    for o in &body.objects {
        let slot = t
            .objects
            .iter()
            .enumerate()
            .position(|(i, to)| to.name == o.name && !used[i])
            .ok_or_else(|| ApiError::conflict(format!("{:?} is not in template {:?}", o.name, body.template)))?;
        used[slot] = true;
        if let Some(p) = &o.position {
            positions[slot] = p.clone();
            placed[slot] = true;
        }
    }
    model.scene(&body.template, &positions, &placed).map_err(|e| match e {
        VaeError::NotFinite(_) => ApiError::bad_request(e.to_string()),
        other => ApiError::from(other),
    })
}

fn positions_of(scene: &Scene, mask: Option<&[String]>) -> PositionsResponse {
    PositionsResponse {
        template: scene.template.clone(),
        positions: scene
            .objects
            .iter()
            .filter(|o| mask.is_none_or(|m| m.contains(&o.name)))
            .map(|o| ObjectBody {
                name: o.name.clone(),
                position: o.placed.then(|| o.position.clone()),
            })
            .collect(),
    }
}

pub fn infer(state: &ServiceState, req: &InferRequest) -> Result<InferResponse, ApiError> {
    if req.scenes.is_empty() {
        return Err(ApiError::bad_request("at least one scene is required"));
    }
    let scenes = req
        .scenes
        .iter()
        .map(|s| scene_from_body(&state.model, s))
        .collect::<Result<Vec<_>, _>>()?;
    let post = state.model.posterior(&scenes).map_err(|e| match e {
        VaeError::NoScenes => ApiError::bad_request(e.to_string()),
        other => other.into(),
    })?;
    Ok(InferResponse {
        user_mu: post.mu,
        user_logvar: post.logvar,
    })
}

pub fn predict(state: &ServiceState, req: &PredictRequest) -> Result<PositionsResponse, ApiError> {
    let model = &state.model;
    model
        .template(&req.template)
        .map_err(|_| ApiError::not_found(format!("unknown template {:?}", req.template)))?;
    if req.user_mu.len() != model.latent_dim() {
        return Err(ApiError::conflict(format!(
            "user_mu has {} entries, the model's preference vector has {}",
            req.user_mu.len(),
            model.latent_dim()
        )));
    }
    if req.user_mu.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::bad_request("user_mu must be finite"));
    }
    let scene = model.decode(&req.user_mu, &req.template)?;
    if let Some(mask) = &req.mask {
        if let Some(bad) = mask.iter().find(|m| scene.index_of(m).is_none()) {
            return Err(ApiError::conflict(format!("{bad:?} is not in template {:?}", req.template)));
        }
    }
    Ok(positions_of(&scene, req.mask.as_deref()))
}

pub fn baseline(state: &ServiceState, req: &BaselineRequest) -> Result<PositionsResponse, ApiError> {
    let method: Method = req.method.parse().map_err(|e: ExperimentError| ApiError::bad_request(e.to_string()))?;
    let model = &state.model;
    model
        .template(&req.template)
        .map_err(|_| ApiError::not_found(format!("unknown template {:?}", req.template)))?;
    let empty = Dataset {
        dim: model.config.position_dim,
        templates: model.templates.clone(),
        users: Vec::new(),
    };
    let train = state.train.as_ref().unwrap_or(&empty);
    let scenes = req
        .scenes
        .iter()
        .map(|s| scene_from_body(model, s))
        .collect::<Result<Vec<_>, _>>()?;
    let res = Resources {
        model: Some(model),
        train,
        table: model.table(),
        baseline: &state.baseline,
        seed: req.seed.unwrap_or(state.seed),
        pop_size: state.pop_size,
    };
    match &req.object {
        None => {
            let scene = experiments::arrange(method, &res, &scenes, &req.template)?;
            Ok(positions_of(&scene, None))
        }
        Some(name) => {
            let si = scenes
                .iter()
                .position(|s| s.template == req.template)
                .ok_or_else(|| ApiError::bad_request(format!("no {:?} scene among the examples", req.template)))?;
            let oi = scenes[si]
                .index_of(name)
                .ok_or_else(|| ApiError::conflict(format!("{name:?} is not in template {:?}", req.template)))?;
            let p = experiments::place(method, &res, &scenes, si, oi)?;
            Ok(PositionsResponse {
                template: req.template.clone(),
                positions: vec![ObjectBody {
                    name: name.clone(),
                    position: Some(p),
                }],
            })
        }
    }
}

pub fn templates(state: &ServiceState) -> Vec<TemplateInfo> {
    state
        .model
        .templates
        .iter()
        .map(|t| {
            let (min, max) = match state.model.stats.get(&t.id) {
                Ok(s) => (
                    s.mean.iter().map(|m| m - s.scale).collect(),
                    s.mean.iter().map(|m| m + s.scale).collect(),
                ),
                Err(_) => (vec![-1.0; state.model.config.position_dim], vec![1.0; state.model.config.position_dim]),
            };
            TemplateInfo {
                id: t.id.clone(),
                objects: t.objects.iter().map(|o| o.name.clone()).collect(),
                min,
                max,
            }
        })
        .collect()
}

async fn get_templates(State(state): State<Arc<ServiceState>>) -> Json<Vec<TemplateInfo>> {
    Json(templates(&state))
}

async fn post_infer(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<InferResponse> {
    Ok(Json(infer(&state, &parse(&body)?)?))
}

async fn post_predict(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<PositionsResponse> {
    Ok(Json(predict(&state, &parse(&body)?)?))
}

async fn post_baseline(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<PositionsResponse> {
    Ok(Json(baseline(&state, &parse(&body)?)?))
}

async fn get_latents(State(state): State<Arc<ServiceState>>) -> Json<Vec<LatentRow>> {
    Json(state.latents.clone())
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/templates", get(get_templates))
        .route("/infer", post(post_infer))
        .route("/predict", post(post_predict))
        .route("/baseline", post(post_baseline))
        .route("/latents", get(get_latents))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: ServiceState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(Arc::new(state))).await
}

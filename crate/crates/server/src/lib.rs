//! Read-only HTTP/JSON API over one attack run.
//!
//! Every response is a deterministic function of the run, the model and the
//! query. Expensive bodies are cached in memory (byte-budgeted LRU with
//! single-flight); vulnerability maps and dendrograms are also read from
//! the run's precomputed disk cache. `nocache=1` forces a fresh
//! computation that bypasses both.

pub mod api;
pub mod cache;
pub mod error;
pub mod jobs;
pub mod params;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query as UrlQuery, State};
use axum::http::header::{HeaderName, CONTENT_TYPE};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use serde_json::{json, Value};

use advscope_core::cluster::Linkage;
use advscope_core::nn::load_model;
use advscope_core::projection::ProjectionMethod;
use advscope_core::rf::{ContextSort, MaskOp, DEFAULT_CONTEXT_COUNT, DEFAULT_THRESHOLD};
use advscope_core::store;
use advscope_core::vulnmap::{ValueSpace, VulnParams, VulnerabilityMap, DEFAULT_TOP_FRACTION};
use advscope_core::workspace::{Run, Side, SortMeasure};
use advscope_core::measures::DEFAULT_CONFIDENCE;
use advscope_core::Workbench;

use crate::api::{ColorBy, NeuronQuery, NeuronSort};
use crate::cache::{ArtifactCache, Source, Weighted};
use crate::error::ApiError;
use crate::jobs::Jobs;
use crate::params::Query;

/// The API schema document, also served at `/schema`.
pub const API_SCHEMA: &str = include_str!("../api-schema.json");

pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";
pub const DEFAULT_CACHE_BYTES: usize = 256 << 20;

impl Weighted for VulnerabilityMap {
    fn weight(&self) -> usize {
        4 * (self.b_map.len() + self.a_map.len()) + 128
    }
}

pub struct AppState {
    wb: Workbench,
    run_dir: PathBuf,
    bodies: ArtifactCache<String, Vec<u8>>,
    maps: ArtifactCache<(usize, VulnParams), VulnerabilityMap>,
    jobs: Jobs,
}

impl AppState {
    pub fn new(wb: Workbench, run_dir: PathBuf, cache_bytes: usize) -> Self {
        Self {
            wb,
            run_dir,
            bodies: ArtifactCache::new(cache_bytes),
            maps: ArtifactCache::new(cache_bytes),
            jobs: Jobs::default(),
        }
    }

    /// Loads the run in `run_dir` and the model its manifest names;
    /// a relative model path is taken relative to `workdir`.
    pub fn open(workdir: &Path, run_dir: &Path, cache_bytes: usize) -> advscope_core::Result<Self> {
        let run = Run::load(run_dir)?;
        let model_path = workdir.join(&run.manifest.model_path);
        let net = load_model(&model_path)?;
        Ok(Self::new(Workbench::new(net, run)?, run_dir.to_path_buf(), cache_bytes))
    }

    pub fn workbench(&self) -> &Workbench {
        &self.wb
    }

    /// The pair's map from memory, the disk cache or a fresh computation
    /// (always fresh when `fresh` is set).
    pub fn vulnerability_map(&self, id: usize, params: VulnParams, fresh: bool) -> Result<Arc<VulnerabilityMap>, ApiError> {
        let compute = || -> Result<VulnerabilityMap, ApiError> {
            let pair = self.wb.pair(id)?;
            if !fresh {
                if let Some(map) = store::load_vulnmap(&self.run_dir, id, &params)? {
                    return Ok(map);
                }
            }
            let shape = pair.benign.shape();
            params.validate(shape[1], shape[2])?;
            let job = self.jobs.start("vulnmap", id, shape[1].div_ceil(params.s) * shape[2].div_ceil(params.s));
            let result = self.wb.vulnerability_map(id, params, Some(&job.done));
            job.finish(result.is_ok());
            Ok(result?)
        };
        if fresh {
            Ok(Arc::new(compute()?))
        } else {
            Ok(self.maps.get_or_compute(&(id, params), compute)?.0)
        }
    }

    pub fn dendrogram_json(&self, id: usize, t: f64, linkage: Linkage, fresh: bool) -> Result<Value, ApiError> {
        self.wb.pair(id)?;
        if !fresh {
            if let Some(tree) = store::load_dendrogram(&self.run_dir, id, t, linkage)? {
                return Ok(tree);
            }
        }
        Ok(self.wb.dendrogram(id, t, linkage)?.to_json())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/overview", get(overview))
        .route("/matrix", get(matrix))
        .route("/cell/{true_label}/{adv_label}/pairs", get(cell))
        .route("/pair/{id}/neurons", get(neurons))
        .route("/pair/{id}/neuron/{k}/rf", get(receptive_field))
        .route("/pair/{id}/neuron/{k}/context", get(context))
        .route("/pair/{id}/vulnmap", get(vulnmap))
        .route("/pair/{id}/dendrogram", get(dendrogram))
        .route("/pair/{id}/cluster-rf", get(cluster_rf))
        .route("/pair/{id}/image/{file}", get(image))
        .route("/jobs", get(jobs))
        .route("/jobs/{id}", get(job))
        .route("/schema", get(schema))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

type Params = UrlQuery<HashMap<String, String>>;
type St = State<Arc<AppState>>;

fn parse_id(field: &'static str, raw: &str) -> Result<usize, ApiError> {
    raw.parse()
        .map_err(|_| ApiError::bad_request(field, format!("{raw:?} is not a non-negative integer")))
}

fn json_response(body: Vec<u8>, cache: &'static str) -> Response {
    (
        [(CONTENT_TYPE, "application/json"), (HeaderName::from_static("x-cache"), cache)],
        body,
    )
        .into_response()
}

fn to_bytes(v: &Value) -> Vec<u8> {
    serde_json::to_vec(v).expect("JSON values serialize")
}

/// Runs `build` off the async executor. With a cache key and without
/// `fresh`, the body goes through the body cache.
async fn respond<F>(st: Arc<AppState>, key: Option<String>, fresh: bool, build: F) -> Result<Response, ApiError>
where
    F: FnOnce(&AppState, bool) -> Result<Value, ApiError> + Send + 'static,
{
    let (body, label) = tokio::task::spawn_blocking(move || -> Result<(Arc<Vec<u8>>, &'static str), ApiError> {
        match key {
            Some(key) if !fresh => {
                let (body, source) = st.bodies.get_or_compute(&key, || build(&st, false).map(|v| to_bytes(&v)))?;
                let label = match source {
                    Source::Memory => "hit",
                    Source::Shared => "shared",
                    Source::Computed => "miss",
                };
                Ok((body, label))
            }
            _ => Ok((Arc::new(to_bytes(&build(&st, fresh)?)), if fresh { "bypass" } else { "none" })),
        }
    })
    .await
    .map_err(|e| ApiError::internal(format!("worker failed: {e}")))??;
    Ok(json_response(body.as_ref().clone(), label))
}

fn threshold(q: &Query) -> Result<f64, ApiError> {
    q.real("t", DEFAULT_THRESHOLD, |v| v > 0.0 && v <= 1.0, "t must lie in (0, 1]")
}

fn top_fraction(q: &Query) -> Result<f64, ApiError> {
    q.real("q", DEFAULT_TOP_FRACTION, |v| v > 0.0 && v <= 1.0, "q must lie in (0, 1]")
}

fn side(q: &Query, field: &'static str) -> Result<Side, ApiError> {
    q.choice(field, Side::Benign, &[("benign", Side::Benign), ("adv", Side::Adv), ("adversarial", Side::Adv)])
}

fn linkage(q: &Query) -> Result<Linkage, ApiError> {
    q.choice(
        "linkage",
        Linkage::Average,
        &[("average", Linkage::Average), ("complete", Linkage::Complete), ("single", Linkage::Single)],
    )
}

fn vuln_params(q: &Query) -> Result<VulnParams, ApiError> {
    let d = VulnParams::default();
    Ok(VulnParams {
        k: q.parse("k", d.k)?,
        s: q.parse("s", d.s)?,
        value_space: q.choice(
            "space",
            d.value_space,
            &[("probability", ValueSpace::Probability), ("logit", ValueSpace::Logit)],
        )?,
    })
}

async fn overview(State(st): St, UrlQuery(raw): Params) -> Result<Response, ApiError> {
    let q = Query(&raw);
    let method = q.choice("method", ProjectionMethod::Pca, &[("pca", ProjectionMethod::Pca), ("tsne", ProjectionMethod::Tsne)])?;
    let color_by = q.choice("color_by", ColorBy::True, &[("true", ColorBy::True), ("predicted", ColorBy::Predicted)])?;
    let seed: u64 = q.parse("seed", 0)?;
    if st.wb.run().pairs.len() < 3 {
        return Err(ApiError::unprocessable("a projection needs at least 3 pairs".into()));
    }
    let key = format!("overview|{method:?}|{color_by:?}|{seed}");
    respond(st, Some(key), q.flag("nocache")?, move |st, _| {
        Ok(api::overview(&st.wb, method, color_by, seed)?)
    })
    .await
}

async fn matrix(State(st): St) -> Result<Response, ApiError> {
    Ok(json_response(to_bytes(&api::matrix(&st.wb)), "none"))
}

async fn cell(State(st): St, UrlPath((t, a)): UrlPath<(String, String)>, UrlQuery(raw): Params) -> Result<Response, ApiError> {
    let q = Query(&raw);
    let (t, a) = (parse_id("true_label", &t)?, parse_id("adv_label", &a)?);
    let classes = st.wb.run().class_count();
    for c in [t, a] {
        if c >= classes {
            return Err(ApiError::not_found(format!("class {c} not found")));
        }
    }
    let sort = match q.raw("sort") {
        None => SortMeasure::L2Asc,
        Some(s) => SortMeasure::parse(s).ok_or_else(|| {
            ApiError::bad_request("sort", format!("{s:?} is not one of l2_asc, l2_desc, benign_desc, adv_asc"))
        })?,
    };
    respond(st, None, false, move |st, _| Ok(api::cell(&st.wb, t, a, sort)?)).await
}

async fn neurons(State(st): St, UrlPath(id): UrlPath<String>, UrlQuery(raw): Params) -> Result<Response, ApiError> {
    let q = Query(&raw);
    let id = parse_id("id", &id)?;
    st.wb.pair(id)?;
    let query = NeuronQuery {
        sort: q.choice("sort", NeuronSort::Gap, &[("gap", NeuronSort::Gap), ("iou_b", NeuronSort::IouB), ("iou_a", NeuronSort::IouA)])?,
        vuln: vuln_params(&q)?,
        t: threshold(&q)?,
        q: top_fraction(&q)?,
        gamma: q.real("gamma", DEFAULT_CONFIDENCE, |v| v > 0.0 && v < 1.0, "gamma must lie in (0, 1)")?,
    };
    let key = format!("neurons|{id}|{query:?}");
    respond(st, Some(key), q.flag("nocache")?, move |st, fresh| {
        let map = match query.sort {
            NeuronSort::Gap => None,
            _ => Some(st.vulnerability_map(id, query.vuln, fresh)?),
        };
        Ok(api::neurons(&st.wb, id, &query, map.as_deref())?)
    })
    .await
}

async fn receptive_field(
    State(st): St,
    UrlPath((id, k)): UrlPath<(String, String)>,
    UrlQuery(raw): Params,
) -> Result<Response, ApiError> {
    let q = Query(&raw);
    let (id, k) = (parse_id("id", &id)?, parse_id("k", &k)?);
    let (t, side) = (threshold(&q)?, side(&q, "side")?);
    respond(st, None, false, move |st, _| Ok(api::receptive_field(&st.wb, id, k, side, t)?)).await
}

async fn context(State(st): St, UrlPath((id, k)): UrlPath<(String, String)>, UrlQuery(raw): Params) -> Result<Response, ApiError> {
    let q = Query(&raw);
    let (id, k) = (parse_id("id", &id)?, parse_id("k", &k)?);
    let sort = q.choice("sort", ContextSort::Activation, &[("activation", ContextSort::Activation), ("confidence", ContextSort::Confidence)])?;
    let m: usize = q.parse("m", DEFAULT_CONTEXT_COUNT)?;
    if m == 0 {
        return Err(ApiError::bad_request("m", "must be at least 1".into()));
    }
    let t = threshold(&q)?;
    let key = format!("context|{id}|{k}|{sort:?}|{m}|{t}");
    respond(st, Some(key), q.flag("nocache")?, move |st, _| Ok(api::context(&st.wb, id, k, sort, m, t)?)).await
}

async fn vulnmap(State(st): St, UrlPath(id): UrlPath<String>, UrlQuery(raw): Params) -> Result<Response, ApiError> {
    let q = Query(&raw);
    let id = parse_id("id", &id)?;
    st.wb.pair(id)?;
    let which = side(&q, "which")?;
    let params = vuln_params(&q)?;
    let frac = top_fraction(&q)?;
    let key = format!("vulnmap|{id}|{which:?}|{params:?}|{frac}");
    respond(st, Some(key), q.flag("nocache")?, move |st, fresh| {
        let map = st.vulnerability_map(id, params, fresh)?;
        Ok(api::vulnmap(&map, which, frac)?)
    })
    .await
}

async fn dendrogram(State(st): St, UrlPath(id): UrlPath<String>, UrlQuery(raw): Params) -> Result<Response, ApiError> {
    let q = Query(&raw);
    let id = parse_id("id", &id)?;
    st.wb.pair(id)?;
    let (t, linkage) = (threshold(&q)?, linkage(&q)?);
    let key = format!("dendrogram|{id}|{t}|{linkage:?}");
    respond(st, Some(key), q.flag("nocache")?, move |st, fresh| {
        Ok(api::dendrogram(id, t, linkage, st.dendrogram_json(id, t, linkage, fresh)?))
    })
    .await
}

async fn cluster_rf(State(st): St, UrlPath(id): UrlPath<String>, UrlQuery(raw): Params) -> Result<Response, ApiError> {
    let q = Query(&raw);
    let id = parse_id("id", &id)?;
    st.wb.pair(id)?;
    let nodes = q.id_list("nodes")?;
    let op = q.choice("op", MaskOp::Union, &[("union", MaskOp::Union), ("intersection", MaskOp::Intersection)])?;
    let (side, t, linkage) = (side(&q, "side")?, threshold(&q)?, linkage(&q)?);
    let key = format!("cluster|{id}|{nodes:?}|{op:?}|{side:?}|{t}|{linkage:?}");
    respond(st, Some(key), q.flag("nocache")?, move |st, _| {
        let tree = st.wb.dendrogram(id, t, linkage)?;
        Ok(api::cluster_rf(&st.wb, id, &tree, &nodes, op, side, t, linkage)?)
    })
    .await
}

async fn image(State(st): St, UrlPath((id, file)): UrlPath<(String, String)>) -> Result<Response, ApiError> {
    let id = parse_id("id", &id)?;
    let side = match file.as_str() {
        "benign.png" => Side::Benign,
        "adv.png" | "adversarial.png" => Side::Adv,
        _ => return Err(ApiError::not_found(format!("image {file:?} not found"))),
    };
    let png = api::image_png(side.image(st.wb.pair(id)?))?;
    Ok(([(CONTENT_TYPE, "image/png")], png).into_response())
}

async fn jobs(State(st): St) -> Response {
    let list: Vec<Value> = st.jobs.list().iter().map(|j| j.to_json()).collect();
    json_response(to_bytes(&json!({ "jobs": list })), "none")
}

async fn job(State(st): St, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let id = parse_id("id", &id)?;
    let job = st.jobs.get(id).ok_or_else(|| ApiError::not_found(format!("job {id} not found")))?;
    Ok(json_response(to_bytes(&job.to_json()), "none"))
}

async fn schema() -> Response {
    ([(CONTENT_TYPE, "application/json")], API_SCHEMA).into_response()
}

//! The online process: constrained serving over HTTP, with the aggregation
//! pipeline co-hosted so decisions and rewards are joined without a
//! network hop, and optionally the trainer.
//!
//! State lives under one directory in the same layout a simulation run
//! writes, so reports work on either.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context as _;
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cmab_core::config::{Instance, Registry};
use cmab_core::pipeline::{PipelineConfig, PipelineStore};
use cmab_core::serving::{
    DecisionSink, Fanout, LogSink, PipelineSink, RewardRequest, ServeError, ServeRequest, Server,
};
use cmab_core::sim::RunLayout;
use cmab_core::training::{ModelHolder, RegistryEntry, TaskQueue, TrainError, Trainer};
use cmab_core::ArmSource;
use parking_lot::Mutex;
use serde::Serialize;
use serde_json::json;

use crate::arms::RegistryArmSource;

struct Hosted {
    instance: Instance,
    server: Server,
}

pub struct Service {
    hosted: BTreeMap<String, Hosted>,
    holder: Arc<ModelHolder>,
    store: Arc<Mutex<PipelineStore>>,
    log_sink: Arc<LogSink>,
    trainer: Option<Trainer>,
    queue: TaskQueue,
    arms: RegistryArmSource,
}

/// What one cycle did for one instance.
#[derive(Debug, Clone, Serialize)]
pub struct CycleOutcome {
    pub instance_id: String,
    /// (keyspace, window id, tuple count)
    pub closed: Vec<(String, u64, usize)>,
    /// (keyspace, published version)
    pub trained: Vec<(String, u64)>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct KeyspaceModel {
    pub keyspace: String,
    pub model_version: Option<u64>,
    pub publish_time: Option<i64>,
    pub arms: Vec<String>,
}

impl Service {
    /// Opens (or recovers) the state under `root`. Arm lists are fetched
    /// once here so serving knows arm types from the first request.
    pub fn open(registry: &Registry, root: &Path, with_trainer: bool) -> anyhow::Result<Self> {
        let layout = RunLayout::new(root);
        let store = PipelineStore::open(
            &layout.journal(),
            &layout.aggregates(),
            PipelineConfig::default(),
        )
        .with_context(|| format!("cannot open pipeline state in {}", root.display()))?;
        let store = Arc::new(Mutex::new(store));
        let log_sink = Arc::new(
            LogSink::open(&layout.decisions(), &layout.rewards())
                .with_context(|| format!("cannot open logs in {}", root.display()))?,
        );
        let sink: Arc<dyn DecisionSink> = Arc::new(Fanout(vec![
            Arc::new(PipelineSink(Arc::clone(&store))),
            Arc::clone(&log_sink) as Arc<dyn DecisionSink>,
        ]));
        let holder = Arc::new(ModelHolder::new(layout.models()));
        let arms = RegistryArmSource::new(registry);

        let mut hosted = BTreeMap::new();
        for instance in &registry.instances {
            let id = &instance.config.instance_id;
            let list = arms
                .fetch(id)
                .with_context(|| format!("instance `{id}`: no arm list"))?;
            let server = Server::new(
                id.clone(),
                Arc::clone(&instance.schema),
                Arc::clone(&holder),
                &list,
                instance.config.rules.clone(),
                Arc::clone(&sink),
            )
            .with_fallback(instance.config.fallback_on_empty_eligible);
            hosted.insert(
                id.clone(),
                Hosted {
                    instance: instance.clone(),
                    server,
                },
            );
        }
        let trainer = with_trainer.then(|| {
            let configs: HashMap<String, _> = registry
                .instances
                .iter()
                .map(|i| (i.config.instance_id.clone(), i.model_config))
                .collect();
            Trainer::new(Arc::clone(&holder), layout.aggregates(), configs)
        });
        Ok(Self {
            hosted,
            holder,
            store,
            log_sink,
            trainer,
            queue: TaskQueue::new(),
            arms,
        })
    }

    pub fn instance_ids(&self) -> Vec<String> {
        self.hosted.keys().cloned().collect()
    }

    fn cycle_period(&self, id: &str) -> Duration {
        Duration::from_secs(self.hosted[id].instance.config.cycle_period_secs)
    }

    /// Expires orphans, closes the instance's windows, refreshes its arm
    /// list and, when co-hosted, trains and publishes.
    pub fn cycle(&self, instance_id: &str, now_ms: i64) -> anyhow::Result<CycleOutcome> {
        let hosted = self
            .hosted
            .get(instance_id)
            .with_context(|| format!("unknown instance `{instance_id}`"))?;
        let mut outcome = CycleOutcome {
            instance_id: instance_id.into(),
            closed: Vec::new(),
            trained: Vec::new(),
            errors: Vec::new(),
        };
        {
            let mut store = self.store.lock();
            store.expire_orphans(now_ms)?;
            for k in &hosted.instance.keyspaces {
                let id = store.open_window(k);
                let n = store.close_window(k, id)?.len();
                outcome.closed.push((k.to_string(), id, n));
            }
            store.flush()?;
        }
        self.log_sink.flush()?;

        let Some(trainer) = &self.trainer else {
            match self.arms.fetch(instance_id) {
                Ok(list) => hosted.server.update_arms(&list),
                Err(e) => outcome.errors.push(e.to_string()),
            }
            return Ok(outcome);
        };
        let entry = RegistryEntry {
            instance_id: instance_id.into(),
            keyspaces: hosted.instance.keyspaces.clone(),
        };
        let report = self.queue.enqueue_cycle(&[entry], &self.arms, now_ms);
        for (_, list) in &report.arms {
            hosted.server.update_arms(list);
        }
        for (_, reason) in report.skipped {
            outcome.errors.push(reason);
        }
        for (task, result) in trainer.drain(&self.queue) {
            match result {
                Ok(entry) => outcome
                    .trained
                    .push((task.keyspace.to_string(), entry.model_version)),
                Err(e) => outcome.errors.push(format!("{}: {e}", task.keyspace)),
            }
        }
        Ok(outcome)
    }

    /// Picks up snapshots another process published.
    pub fn reload(&self) {
        for hosted in self.hosted.values() {
            for k in &hosted.instance.keyspaces {
                match self.holder.reload(k) {
                    Ok(_) | Err(TrainError::ModelNotFound(_)) => {}
                    Err(e) => tracing::warn!(keyspace = %k, error = %e, "reload failed"),
                }
            }
        }
    }

    pub fn flush(&self) -> anyhow::Result<()> {
        self.log_sink.flush()?;
        self.store.lock().flush()?;
        Ok(())
    }

    pub fn models(&self, instance_id: &str) -> Option<Vec<KeyspaceModel>> {
        let hosted = self.hosted.get(instance_id)?;
        Some(
            hosted
                .instance
                .keyspaces
                .iter()
                .map(|k| match self.holder.get(k) {
                    Ok(snap) => KeyspaceModel {
                        keyspace: k.to_string(),
                        model_version: Some(snap.entry.model_version),
                        publish_time: Some(snap.entry.publish_time),
                        arms: snap
                            .model
                            .arm_ids()
                            .map(|a| a.as_str().to_string())
                            .collect(),
                    },
                    Err(_) => KeyspaceModel {
                        keyspace: k.to_string(),
                        model_version: None,
                        publish_time: None,
                        arms: Vec::new(),
                    },
                })
                .collect(),
        )
    }
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<ServeError> for ApiError {
    fn from(e: ServeError) -> Self {
        let status = match &e {
            ServeError::NoEligibleArm => StatusCode::UNPROCESSABLE_ENTITY,
            e if e.is_model_not_found() => StatusCode::SERVICE_UNAVAILABLE,
            ServeError::Context(_) | ServeError::InvalidValue(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn hosted<'a>(svc: &'a Service, instance: &str) -> Result<&'a Hosted, ApiError> {
    svc.hosted.get(instance).ok_or_else(|| {
        ApiError(
            StatusCode::NOT_FOUND,
            format!("unknown instance `{instance}`"),
        )
    })
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))
}

async fn serve_handler(
    State(svc): State<Arc<Service>>,
    UrlPath(instance): UrlPath<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let hosted = hosted(&svc, &instance)?;
    let req: ServeRequest = parse(&body)?;
    if hosted
        .instance
        .keyspace(&req.test_id, &req.variant_id)
        .is_none()
    {
        return Err(ApiError(
            StatusCode::NOT_FOUND,
            format!(
                "unknown keyspace {instance}/{}/{}",
                req.test_id, req.variant_id
            ),
        ));
    }
    let resp = hosted.server.serve(&req, crate::now_ms())?;
    Ok(Json(resp).into_response())
}

async fn reward_handler(
    State(svc): State<Arc<Service>>,
    UrlPath(instance): UrlPath<String>,
    body: Bytes,
) -> Result<StatusCode, ApiError> {
    let hosted = hosted(&svc, &instance)?;
    let req: RewardRequest = parse(&body)?;
    hosted
        .server
        .record_reward(&req.decision_id, req.reward, crate::now_ms())?;
    Ok(StatusCode::NO_CONTENT)
}

async fn models_handler(
    State(svc): State<Arc<Service>>,
    UrlPath(instance): UrlPath<String>,
) -> Result<Response, ApiError> {
    let models = svc.models(&instance).ok_or_else(|| {
        ApiError(
            StatusCode::NOT_FOUND,
            format!("unknown instance `{instance}`"),
        )
    })?;
    Ok(Json(models).into_response())
}

/// `POST /v1/{instance}/serve`, `POST /v1/{instance}/reward`,
/// `GET /v1/{instance}/models`, `GET /healthz`.
pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/v1/{instance}/serve", post(serve_handler))
        .route("/v1/{instance}/reward", post(reward_handler))
        .route("/v1/{instance}/models", get(models_handler))
        .with_state(svc)
}

/// Runs one cycle per instance so every keyspace has a model before the
/// first request. A no-op for keyspaces restored from disk, apart from
/// closing whatever window the journal left open.
pub fn bootstrap(svc: &Service, now_ms: i64) -> anyhow::Result<Vec<CycleOutcome>> {
    let mut out = Vec::new();
    for id in svc.instance_ids() {
        let outcome = svc.cycle(&id, now_ms)?;
        for e in &outcome.errors {
            tracing::warn!(instance = %id, error = %e, "bootstrap cycle");
        }
        out.push(outcome);
    }
    if svc.trainer.is_none() {
        svc.reload();
    }
    Ok(out)
}

/// Serves HTTP until Ctrl-C or `duration`, running each instance's cycle
/// on its own period.
pub async fn run(
    svc: Arc<Service>,
    listen: SocketAddr,
    reload_every: Duration,
    duration: Option<Duration>,
) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen)
        .await
        .with_context(|| format!("cannot listen on {listen}"))?;
    let addr = listener.local_addr()?;
    println!("{}", json!({ "listening": addr.to_string() }));
    tracing::info!(%addr, "serving");

    let mut timers = Vec::new();
    for id in svc.instance_ids() {
        let period = svc.cycle_period(&id);
        let svc = Arc::clone(&svc);
        timers.push(tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            tick.tick().await; // bootstrap already ran this one
            loop {
                tick.tick().await;
                let (svc, id) = (Arc::clone(&svc), id.clone());
                let res = tokio::task::spawn_blocking(move || svc.cycle(&id, crate::now_ms())).await;
                match res {
                    Ok(Ok(o)) => {
                        for e in &o.errors {
                            tracing::error!(instance = %o.instance_id, error = %e, "cycle");
                        }
                        tracing::info!(instance = %o.instance_id, trained = o.trained.len(), "cycle done");
                    }
                    Ok(Err(e)) => tracing::error!(error = %format!("{e:#}"), "cycle failed"),
                    Err(e) => tracing::error!(error = %e, "cycle task panicked"),
                }
            }
        }));
    }
    if svc.trainer.is_none() {
        let svc = Arc::clone(&svc);
        timers.push(tokio::spawn(async move {
            let mut tick = tokio::time::interval(reload_every);
            loop {
                tick.tick().await;
                let svc = Arc::clone(&svc);
                let _ = tokio::task::spawn_blocking(move || svc.reload()).await;
            }
        }));
    }

    let shutdown = async move {
        match duration {
            Some(d) => tokio::time::sleep(d).await,
            None => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    };
    axum::serve(listener, router(Arc::clone(&svc)))
        .with_graceful_shutdown(shutdown)
        .await
        .context("http server failed")?;
    for t in timers {
        t.abort();
    }
    svc.flush()
}

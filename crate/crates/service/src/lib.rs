//! HTTP API over the detection pipeline.
//!
//! One dataset session is active at a time. Each completed detection is an
//! immutable snapshot tagged with a strictly increasing `detection_version`;
//! read handlers take one snapshot and answer entirely from it, so a response
//! never mixes results of two runs. At most one detection runs at a time.

pub mod annotations;
pub mod error;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use ringaudit_core::analytics::{
    outlier_flags, overall_score, patient_summary, timeline, Granularity, GroupMetrics, Metric, MetricStats,
    PatientSummary, ProjectedGroup, RankKey, TimelineBundle,
};
use ringaudit_core::codesim::{build_profiles, similarity_matrix, SimilarityExport};
use ringaudit_core::covisit::NetworkExport;
use ringaudit_core::ingest::{
    attribute_histograms, load_dataset_from_paths, parse_timestamp, Dataset, DateRange, HistogramConfig,
    HistogramSet, IngestError, LoadConfig,
};
use ringaudit_core::pipeline::{self, DetectParams, DetectionResult};

use crate::annotations::{AnnotationLog, AuditAnnotation, Verdict, ANNOTATIONS_FILE};
use crate::error::ApiError;

pub type ApiResult<T> = Result<T, ApiError>;

pub struct Session {
    pub session_id: String,
    pub dataset: Dataset,
    pub dir: PathBuf,
    annotations: Mutex<AnnotationLog>,
}

/// One completed detection run.
pub struct Detection {
    pub version: u64,
    pub session_id: String,
    pub result: DetectionResult,
    /// Serialized group export, byte-identical to the CLI's `groups.json`.
    pub groups_json: String,
    pub completed_at: DateTime<Utc>,
}

#[derive(Default)]
struct Job {
    running: Option<u64>,
    last_error: Option<String>,
}

#[derive(Default)]
struct Inner {
    session: RwLock<Option<Arc<Session>>>,
    detection: RwLock<Option<Arc<Detection>>>,
    job: Mutex<Job>,
    versions: AtomicU64,
    sessions: AtomicU64,
}

#[derive(Clone, Default)]
pub struct AppState {
    inner: Arc<Inner>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    /// Directory holding `patients.csv`, `visits.csv` and `drugs.csv`.
    pub dir: Option<PathBuf>,
    pub patients: Option<PathBuf>,
    pub visits: Option<PathBuf>,
    pub drugs: Option<PathBuf>,
    pub date_range: Option<DateRange>,
    pub histogram: Option<HistogramConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub patients: usize,
    pub visits: usize,
    pub drug_rows: usize,
    pub annotations_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub detection_version: u64,
    pub session_id: String,
    pub group_count: usize,
    pub node_count: usize,
    pub edge_count: usize,
    pub visit_count: usize,
    pub modularity: f64,
    pub params: DetectParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Idle,
    Running,
    Ready,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusResponse {
    pub state: JobState,
    /// Version of the detection running now, if any.
    pub running_version: Option<u64>,
    /// Version of the latest completed detection of the current session.
    pub detection_version: Option<u64>,
    pub error: Option<String>,
    pub summary: Option<DetectionSummary>,
}

fn ingest_error(e: IngestError) -> ApiError {
    match e {
        IngestError::Io { .. } => ApiError::io(e.to_string()),
        other => ApiError::validation(other.to_string()),
    }
}

fn summary(d: &Detection) -> DetectionSummary {
    DetectionSummary {
        detection_version: d.version,
        session_id: d.session_id.clone(),
        group_count: d.result.groups.groups.len(),
        node_count: d.result.network.node_count(),
        edge_count: d.result.network.edge_count(),
        visit_count: d.result.visits.n(),
        modularity: d.result.partition.modularity,
        params: d.result.params.clone(),
    }
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn session(&self) -> Option<Arc<Session>> {
        self.inner.session.read().expect("session lock").clone()
    }

    fn require_session(&self) -> ApiResult<Arc<Session>> {
        self.session()
            .ok_or_else(|| ApiError::missing_state("no dataset loaded; POST /api/session first"))
    }

    /// Latest completed detection of the current session.
    pub fn detection(&self) -> Option<Arc<Detection>> {
        let session = self.session()?;
        let det = self.inner.detection.read().expect("detection lock").clone()?;
        (det.session_id == session.session_id).then_some(det)
    }

    fn require_detection(&self) -> ApiResult<Arc<Detection>> {
        self.require_session()?;
        self.detection()
            .ok_or_else(|| ApiError::missing_state("no detection has completed; POST /api/detect first"))
    }

    /// Loads a dataset and makes it the active session, dropping any previous
    /// detection results.
    pub fn load_session(&self, req: SessionRequest) -> ApiResult<SessionInfo> {
        let pick = |explicit: &Option<PathBuf>, name: &str| -> ApiResult<PathBuf> {
            match (explicit, &req.dir) {
                (Some(p), _) => Ok(p.clone()),
                (None, Some(d)) => Ok(d.join(name)),
                (None, None) => Err(ApiError::validation(format!(
                    "either dir or an explicit path for {name} is required"
                ))),
            }
        };
        let patients = pick(&req.patients, "patients.csv")?;
        let visits = pick(&req.visits, "visits.csv")?;
        let drugs = pick(&req.drugs, "drugs.csv")?;
        let dir = match &req.dir {
            Some(d) => d.clone(),
            None => visits
                .parent()
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(".")),
        };
        let config = LoadConfig {
            date_range: req.date_range,
            histogram: req.histogram.unwrap_or_default(),
        };
        if self.inner.job.lock().expect("job lock").running.is_some() {
            return Err(ApiError::busy("a detection is running"));
        }
        let dataset = load_dataset_from_paths(&patients, &visits, &drugs, &config).map_err(ingest_error)?;
        let log = AnnotationLog::open(dir.join(ANNOTATIONS_FILE)).map_err(|e| ApiError::io(e.to_string()))?;
        let n = self.inner.sessions.fetch_add(1, Ordering::SeqCst) + 1;
        let session = Session {
            session_id: format!("S-{n:04}"),
            dataset,
            dir,
            annotations: Mutex::new(log),
        };
        let info = SessionInfo {
            session_id: session.session_id.clone(),
            patients: session.dataset.patients.m(),
            visits: session.dataset.visits.n(),
            drug_rows: session.dataset.drugs.n(),
            annotations_path: session.dir.join(ANNOTATIONS_FILE),
        };
        let mut job = self.inner.job.lock().expect("job lock");
        if job.running.is_some() {
            return Err(ApiError::busy("a detection is running"));
        }
        job.last_error = None;
        *self.inner.detection.write().expect("detection lock") = None;
        *self.inner.session.write().expect("session lock") = Some(Arc::new(session));
        Ok(info)
    }

    /// Reserves the detection slot and starts a run in the background.
    /// Resolves to the summary once the run completes.
    pub fn start_detection(
        &self,
        params: DetectParams,
    ) -> ApiResult<(u64, tokio::task::JoinHandle<ApiResult<DetectionSummary>>)> {
        params
            .validate()
            .map_err(|e| ApiError::validation(e.to_string()))?;
        let session = self.require_session()?;
        let version = {
            let mut job = self.inner.job.lock().expect("job lock");
            if let Some(v) = job.running {
                return Err(ApiError::busy(format!("detection {v} is still running")));
            }
            let v = self.inner.versions.fetch_add(1, Ordering::SeqCst) + 1;
            job.running = Some(v);
            job.last_error = None;
            v
        };
        let state = self.clone();
        let handle = tokio::spawn(async move {
            let s = session.clone();
            let outcome = tokio::task::spawn_blocking(move || {
                pipeline::run(&s.dataset.patients, &s.dataset.visits, &params)
            })
            .await;
            let mut job = state.inner.job.lock().expect("job lock");
            job.running = None;
            let result = match outcome {
                Ok(Ok(result)) => result,
                Ok(Err(e)) => {
                    job.last_error = Some(e.to_string());
                    return Err(ApiError::validation(e.to_string()));
                }
                Err(e) => {
                    let msg = format!("detection {version} failed: {e}");
                    job.last_error = Some(msg.clone());
                    return Err(ApiError::io(msg));
                }
            };
            let detection = Detection {
                version,
                session_id: session.session_id.clone(),
                groups_json: pipeline::groups_json(&result),
                result,
                completed_at: Utc::now(),
            };
            let out = summary(&detection);
            *state.inner.detection.write().expect("detection lock") = Some(Arc::new(detection));
            Ok(out)
        });
        Ok((version, handle))
    }

    pub fn status(&self) -> StatusResponse {
        let job = self.inner.job.lock().expect("job lock");
        let det = self.detection();
        let state = if job.running.is_some() {
            JobState::Running
        } else if job.last_error.is_some() {
            JobState::Failed
        } else if det.is_some() {
            JobState::Ready
        } else {
            JobState::Idle
        };
        StatusResponse {
            state,
            running_version: job.running,
            detection_version: det.as_ref().map(|d| d.version),
            error: job.last_error.clone(),
            summary: det.as_deref().map(summary),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/session", post(post_session).get(get_session))
        .route("/api/histograms", get(get_histograms))
        .route("/api/detect", post(post_detect))
        .route("/api/detect/status", get(get_status))
        .route("/api/network", get(get_network))
        .route("/api/groups", get(get_groups))
        .route("/api/groups/export", get(get_groups_export))
        .route("/api/groups/{id}/similarity", get(get_similarity))
        .route("/api/groups/{id}/timeline", get(get_timeline))
        .route("/api/patients/{id}", get(get_patient))
        .route("/api/annotations", post(post_annotation).get(get_annotations))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn json_body<T>(payload: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ApiError::validation(e.body_text()))
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    q.map(|Query(v)| v)
        .map_err(|e| ApiError::validation(e.body_text()))
}

async fn post_session(
    State(state): State<AppState>,
    payload: Result<Json<SessionRequest>, JsonRejection>,
) -> ApiResult<Json<SessionInfo>> {
    let req = json_body(payload)?;
    let st = state.clone();
    tokio::task::spawn_blocking(move || st.load_session(req))
        .await
        .map_err(|e| ApiError::io(e.to_string()))?
        .map(Json)
}

async fn get_session(State(state): State<AppState>) -> ApiResult<Json<SessionInfo>> {
    let s = state.require_session()?;
    let info = SessionInfo {
        session_id: s.session_id.clone(),
        patients: s.dataset.patients.m(),
        visits: s.dataset.visits.n(),
        drug_rows: s.dataset.drugs.n(),
        annotations_path: s.dir.join(ANNOTATIONS_FILE),
    };
    Ok(Json(info))
}

#[derive(Debug, Serialize)]
struct HistogramResponse {
    detection_version: Option<u64>,
    #[serde(flatten)]
    histograms: HistogramSet,
}

async fn get_histograms(State(state): State<AppState>) -> ApiResult<Json<HistogramResponse>> {
    let s = state.require_session()?;
    let det = state.detection();
    let current = det.as_ref().map_or(&s.dataset.visits, |d| &d.result.visits);
    let histograms = attribute_histograms(&s.dataset.visits, current, &s.dataset.patients, &s.dataset.histogram);
    Ok(Json(HistogramResponse {
        detection_version: det.map(|d| d.version),
        histograms,
    }))
}

#[derive(Debug, Default, Deserialize)]
struct DetectQuery {
    #[serde(default)]
    wait: bool,
}

#[derive(Debug, Serialize)]
struct Accepted {
    state: JobState,
    detection_version: u64,
}

async fn post_detect(
    State(state): State<AppState>,
    q: Result<Query<DetectQuery>, QueryRejection>,
    body: Bytes,
) -> ApiResult<Response> {
    let q = query(q)?;
    let params: DetectParams = if body.iter().all(u8::is_ascii_whitespace) {
        DetectParams::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::validation(format!("invalid detect parameters: {e}")))?
    };
    let (version, handle) = state.start_detection(params)?;
    if q.wait {
        let summary = handle.await.map_err(|e| ApiError::io(e.to_string()))??;
        return Ok(Json(summary).into_response());
    }
    Ok((
        StatusCode::ACCEPTED,
        Json(Accepted {
            state: JobState::Running,
            detection_version: version,
        }),
    )
        .into_response())
}

async fn get_status(State(state): State<AppState>) -> Json<StatusResponse> {
    Json(state.status())
}

#[derive(Debug, Serialize)]
struct NetworkResponse {
    detection_version: u64,
    network: NetworkExport,
    /// Patient id → group id for members of surviving groups.
    group_of: BTreeMap<String, String>,
}

async fn get_network(State(state): State<AppState>) -> ApiResult<Json<NetworkResponse>> {
    let d = state.require_detection()?;
    let group_of = d
        .result
        .groups
        .groups
        .iter()
        .flat_map(|g| g.members.iter().map(move |m| (m.clone(), g.group_id.clone())))
        .collect();
    Ok(Json(NetworkResponse {
        detection_version: d.version,
        network: d.result.network.to_export(),
        group_of,
    }))
}

#[derive(Debug, Deserialize)]
struct GroupsQuery {
    rank: Option<String>,
}

#[derive(Debug, Serialize)]
struct GroupEntry {
    rank: usize,
    group_id: String,
    members: Vec<String>,
    size: usize,
    metrics: GroupMetrics,
    overall_score: f64,
    outlier_flags: Vec<Metric>,
}

#[derive(Debug, Serialize)]
struct GroupsResponse {
    detection_version: u64,
    rank_key: RankKey,
    modularity: f64,
    seed: u64,
    min_component_size: usize,
    stats: Option<MetricStats>,
    groups: Vec<GroupEntry>,
    projection: Vec<ProjectedGroup>,
}

async fn get_groups(
    State(state): State<AppState>,
    q: Result<Query<GroupsQuery>, QueryRejection>,
) -> ApiResult<Json<GroupsResponse>> {
    let q = query(q)?;
    let key = match q.rank.as_deref() {
        None => RankKey::Overall,
        Some(s) => RankKey::parse(s)
            .ok_or_else(|| ApiError::validation(format!("unknown rank key {s:?}; expected p, f, c, d, g or overall")))?,
    };
    let d = state.require_detection()?;
    let r = &d.result;
    let mut groups = Vec::new();
    if let Some(stats) = &r.stats {
        for (i, id) in r.ranking(key).into_iter().enumerate() {
            let g = r.groups.get(&id).expect("ranked ids come from the group set");
            let m = r.metrics_of(&id).expect("every group has metrics");
            groups.push(GroupEntry {
                rank: i + 1,
                group_id: id,
                members: g.members.clone(),
                size: g.size(),
                metrics: m.clone(),
                overall_score: overall_score(m, stats),
                outlier_flags: outlier_flags(m, stats),
            });
        }
    }
    Ok(Json(GroupsResponse {
        detection_version: d.version,
        rank_key: key,
        modularity: r.partition.modularity,
        seed: r.params.seed,
        min_component_size: r.params.min_component_size,
        stats: r.stats.clone(),
        groups,
        projection: r.projection.clone(),
    }))
}

async fn get_groups_export(State(state): State<AppState>) -> ApiResult<Response> {
    let d = state.require_detection()?;
    Ok(([(header::CONTENT_TYPE, "application/json")], d.groups_json.clone()).into_response())
}

#[derive(Debug, Serialize)]
struct SimilarityResponse {
    detection_version: u64,
    group_id: String,
    #[serde(flatten)]
    matrix: SimilarityExport,
}

async fn get_similarity(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<SimilarityResponse>> {
    let s = state.require_session()?;
    let d = state.require_detection()?;
    let group = d
        .result
        .groups
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown group {id}")))?;
    let profiles = build_profiles(&group.members, &d.result.visits, &s.dataset.drugs);
    let matrix = similarity_matrix(&group.members, &profiles).map_err(|e| ApiError::validation(e.to_string()))?;
    Ok(Json(SimilarityResponse {
        detection_version: d.version,
        group_id: id,
        matrix: matrix.to_export(),
    }))
}

#[derive(Debug, Deserialize)]
struct TimelineQuery {
    granularity: Option<String>,
    from: Option<String>,
    to: Option<String>,
    gap: Option<f64>,
    /// Comma-separated subset of the group's members.
    patients: Option<String>,
}

/// Accepts an ISO-8601 instant or a bare date; a bare `to` date covers the
/// whole day.
fn parse_bound(s: &str, end_of_day: bool) -> ApiResult<DateTime<Utc>> {
    if let Some(t) = parse_timestamp(s) {
        return Ok(t);
    }
    let date = NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|_| ApiError::validation(format!("unparseable time bound {s:?}")))?;
    let time = if end_of_day {
        date.and_hms_opt(23, 59, 59)
    } else {
        date.and_hms_opt(0, 0, 0)
    };
    Ok(time.expect("valid time of day").and_utc())
}

#[derive(Debug, Serialize)]
struct TimelineResponse {
    detection_version: u64,
    group_id: String,
    gap_filter_minutes: f64,
    #[serde(flatten)]
    bundle: TimelineBundle,
}

async fn get_timeline(
    State(state): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<TimelineQuery>, QueryRejection>,
) -> ApiResult<Json<TimelineResponse>> {
    let q = query(q)?;
    let d = state.require_detection()?;
    let group = d
        .result
        .groups
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown group {id}")))?;
    let granularity = match q.granularity.as_deref() {
        None => Granularity::Week,
        Some(s) => Granularity::parse(s)
            .ok_or_else(|| ApiError::validation(format!("unknown granularity {s:?}; expected day, week or month")))?,
    };
    let members: Vec<String> = match q.patients.as_deref() {
        None => group.members.clone(),
        Some(list) => {
            let picked: BTreeSet<String> = list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            if let Some(bad) = picked.iter().find(|p| !group.contains(p)) {
                return Err(ApiError::validation(format!("{bad} is not a member of {id}")));
            }
            picked.into_iter().collect()
        }
    };
    let visits = &d.result.visits;
    let own = || visits.iter().filter(|v| members.contains(&v.patient_id)).map(|v| v.timestamp);
    let from = match q.from.as_deref() {
        Some(s) => parse_bound(s, false)?,
        None => own().min().unwrap_or(DateTime::<Utc>::UNIX_EPOCH),
    };
    let to = match q.to.as_deref() {
        Some(s) => parse_bound(s, true)?,
        None => own().max().unwrap_or(from),
    };
    let gap = q.gap.unwrap_or(d.result.params.covisit.theta1);
    if !(gap.is_finite() && gap >= 0.0) {
        return Err(ApiError::validation("gap must be a non-negative number of minutes"));
    }
    let bundle = timeline(&members, visits, &d.result.network, DateRange(from, to), granularity, gap)
        .map_err(|e| ApiError::validation(e.to_string()))?;
    Ok(Json(TimelineResponse {
        detection_version: d.version,
        group_id: id,
        gap_filter_minutes: gap,
        bundle,
    }))
}

#[derive(Debug, Serialize)]
struct PatientResponse {
    /// Set when the summary covers the filtered visits of a detection.
    detection_version: Option<u64>,
    group_id: Option<String>,
    #[serde(flatten)]
    summary: PatientSummary,
}

async fn get_patient(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<PatientResponse>> {
    let s = state.require_session()?;
    let det = state.detection();
    let visits = det.as_ref().map_or(&s.dataset.visits, |d| &d.result.visits);
    let summary = patient_summary(&id, &s.dataset.patients, visits, &s.dataset.drugs)
        .ok_or_else(|| ApiError::not_found(format!("unknown patient {id}")))?;
    Ok(Json(PatientResponse {
        detection_version: det.as_ref().map(|d| d.version),
        group_id: det
            .as_ref()
            .and_then(|d| d.result.groups.group_of(&id).map(|g| g.group_id.clone())),
        summary,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRequest {
    group_id: String,
    /// Defaults to all members of the group.
    patient_ids: Option<Vec<String>>,
    verdict: Verdict,
    #[serde(default)]
    reason: String,
    #[serde(default)]
    author: String,
}

async fn post_annotation(
    State(state): State<AppState>,
    payload: Result<Json<AnnotationRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<AuditAnnotation>)> {
    let req = json_body(payload)?;
    if req.verdict.requires_reason() && req.reason.trim().is_empty() {
        return Err(ApiError::validation("a reason is required for fraud and normal verdicts"));
    }
    let s = state.require_session()?;
    let d = state.require_detection()?;
    let group = d
        .result
        .groups
        .get(&req.group_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown group {}", req.group_id)))?;
    let patient_ids = match req.patient_ids {
        None => group.members.clone(),
        Some(ids) if ids.is_empty() => return Err(ApiError::validation("patient_ids is empty")),
        Some(ids) => {
            if let Some(bad) = ids.iter().find(|p| !group.contains(p)) {
                return Err(ApiError::validation(format!("{bad} is not a member of {}", req.group_id)));
            }
            ids
        }
    };
    let entry = AuditAnnotation {
        annotation_id: 0,
        group_id: req.group_id,
        patient_ids,
        verdict: req.verdict,
        reason: req.reason.trim().to_string(),
        author: if req.author.trim().is_empty() {
            "anonymous".into()
        } else {
            req.author.trim().to_string()
        },
        created_at: Utc::now(),
        detection_version: d.version,
    };
    let stored = s
        .annotations
        .lock()
        .expect("annotation lock")
        .append(entry)
        .map_err(|e| ApiError::io(e.to_string()))?;
    Ok((StatusCode::CREATED, Json(stored)))
}

#[derive(Debug, Deserialize)]
struct AnnotationsQuery {
    group_id: Option<String>,
}

#[derive(Debug, Serialize)]
struct AnnotationList {
    annotations: Vec<AuditAnnotation>,
}

async fn get_annotations(
    State(state): State<AppState>,
    q: Result<Query<AnnotationsQuery>, QueryRejection>,
) -> ApiResult<Json<AnnotationList>> {
    let q = query(q)?;
    let s = state.require_session()?;
    let log = s.annotations.lock().expect("annotation lock");
    let annotations = log
        .entries()
        .iter()
        .filter(|a| q.group_id.as_ref().is_none_or(|g| &a.group_id == g))
        .cloned()
        .collect();
    Ok(Json(AnnotationList { annotations }))
}

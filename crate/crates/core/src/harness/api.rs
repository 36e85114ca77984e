//! JSON bodies of the annotation HTTP API and how crowd errors map onto
//! status codes. The transport itself lives with the executable.

use serde::{Deserialize, Serialize};

use crate::crowd::{AggregationStatus, Answer, CrowdError, CrowdTask, SubmitAck};

/// `GET /api/tasks/next?worker_id=W`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NextTaskResponse {
    pub task_id: u64,
    pub item_id: u64,
    pub question: String,
    pub options: Vec<String>,
    pub priority: f64,
}

impl From<&CrowdTask> for NextTaskResponse {
    fn from(t: &CrowdTask) -> Self {
        NextTaskResponse {
            task_id: t.task_id,
            item_id: t.item_id.0,
            question: t.question.clone(),
            options: t.options.clone(),
            priority: t.priority,
        }
    }
}

/// `POST /api/tasks/{task_id}/label`. `answer` is an option index or the
/// option text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub worker_id: String,
    pub answer: Answer,
    #[serde(default)]
    pub client_latency_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelResponse {
    pub status: AggregationStatus,
    pub labels_used: u32,
}

impl From<SubmitAck> for LabelResponse {
    fn from(a: SubmitAck) -> Self {
        LabelResponse {
            status: a.status,
            labels_used: a.labels_used,
        }
    }
}

/// `GET /api/stats`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsResponse {
    pub labels_total: u64,
    pub tasks_open: u64,
    pub auc_latest: Option<f64>,
    pub model_version: u64,
    pub throughput_now: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_after_s: Option<u64>,
}

/// Seconds clients should wait before asking again when no task is ready.
pub const RETRY_AFTER_S: u64 = 2;

pub fn status_for(e: &CrowdError) -> u16 {
    match e {
        CrowdError::UnknownTask(_) => 404,
        CrowdError::DuplicateLabel { .. } => 409,
        CrowdError::TaskClosed(_) => 410,
        CrowdError::NoTaskAvailable | CrowdError::BudgetExhausted | CrowdError::NoEligibleWorker(_) => 429,
        CrowdError::InvalidAnswer(_) | CrowdError::ForeignLabel { .. } => 400,
        CrowdError::Disconnected => 503,
        _ => 500,
    }
}

pub fn error_body(e: &CrowdError) -> ErrorBody {
    ErrorBody {
        error: e.to_string(),
        retry_after_s: (status_for(e) == 429).then_some(RETRY_AFTER_S),
    }
}

//! Evaluation manager: job queue, provisioning, artifact collection and
//! the REST API.

pub mod api;
pub mod job;
pub mod journal;
pub mod manager;
pub mod transport;

pub use api::{router, spawn_server};
pub use job::{EvaluationJob, JobState};
pub use manager::{load_result_set, JobStatus, Manager, ManagerOptions, Observation, SubmitError};
pub use transport::Delivery;

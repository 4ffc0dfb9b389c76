//! Session service: layouts, control previews and generation or edit jobs
//! behind a small HTTP API, persisted in a content-addressed store.
//!
//! | route | effect |
//! |---|---|
//! | `POST /sessions` | create from a layout document (201, 400, 422) |
//! | `GET /sessions/{id}` | canonical layout; `x-latent-hash` names the committed latent |
//! | `GET /sessions/{id}/preview?kind=depth\|masks` | control PNG of the committed scene |
//! | `POST /sessions/{id}/jobs` | queue generate or edit (202, 409, 412, 422, 503) |
//! | `GET /jobs/{id}` | job status and result |
//! | `GET /images/{hash}` | stored blob: previews, latent snapshots, layouts |

pub mod app;
pub mod config;
pub mod jobs;
pub mod routes;
pub mod store;

pub use app::{Created, PreviewKind, Service, ServiceError, SessionView};
pub use config::ServiceConfig;
pub use jobs::{Job, JobKind, JobOptions, JobRequest, JobResult, JobStatus};
pub use routes::{router, serve, LATENT_HASH_HEADER};

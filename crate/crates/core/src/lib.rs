//! Event-aware video corpus moment retrieval.
//!
//! Given a corpus of videos (frame features, optional subtitle features) and a
//! natural language query, find the video and the frame span that answer it.
//! The pipeline is a two-stage model: a retriever ranks videos by comparing an
//! encoded query with frame- and event-level representations; a localizer then
//! scores start and end frames inside the top-ranked videos.

pub mod config;
pub mod corpus;
pub mod diff;
pub mod error;
pub mod eval;
pub mod events;
pub mod gradsuite;
pub mod localizer;
pub mod parallel;
pub mod pipeline;
pub mod retriever;
pub mod training;

pub use error::{Error, Result};
pub use parallel::Execution;

//! Core algorithms for the human-in-the-loop imagery analysis platform.
//!
//! Everything in this crate is pure: georeferencing and tiling math, the
//! classical reference detector and its parameter-search adaptation, the
//! flood mask pipeline, object/pixel metrics, and the domain records
//! (models, features, jobs) together with their state-transition rules.
//! Persistence and networking live in the `geoloop-store` and
//! `geoloop-server` crates.

pub mod adapt;
pub mod annotations;
pub mod detect;
pub mod flood;
pub mod geo;
pub mod geometry;
pub mod ids;
pub mod jobs;
pub mod mask;
pub mod metrics;
pub mod protocol;
pub mod registry;
pub mod synth;
pub mod worker;

pub use geometry::{GeometryError, Polygon};
pub use ids::{AdaptationId, FeatureId, JobId, ModelId, ProjectId, RasterId, SetId};

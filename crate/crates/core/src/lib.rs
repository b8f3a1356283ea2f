//! Core of the ctower experiment control plane.
//!
//! Experiments are described by an [`domain::ExperimentSpec`], optionally
//! instantiated from a [`template::TemplateSpec`], persisted in a
//! write-ahead [`store::Store`], and run by a pluggable
//! [`submitter::Submitter`]: local OS processes or a gang-scheduled
//! [`cluster::ClusterSim`].

pub mod api;
pub mod clock;
pub mod cluster;
pub mod domain;
pub mod environment;
pub mod experiment;
pub mod plane;
pub mod store;
pub mod submitter;
pub mod template;

pub use plane::{BackendConfig, ControlPlane, PlaneConfig, PlaneError};

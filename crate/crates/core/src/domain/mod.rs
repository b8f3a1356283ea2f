//! Specification types shared by every service.

mod resources;
mod spec;
mod status;

pub use resources::{format_resource_string, parse_resource_string, ResourceError, ResourceRequest, ResourceSpec};
pub use spec::{
    aggregate_demand, is_dns_label, is_role_name, validate_experiment_spec, ArithmeticOverflow, Demand,
    EnvironmentRef, ExperimentMeta, ExperimentSpec, ExperimentTaskSpec, RoleDemand, TaskInstance, Violation,
    DEFAULT_NAMESPACE, MAX_NAME_LEN,
};
pub use status::{Event, EventKind, ExperimentStatus, MetricPoint};

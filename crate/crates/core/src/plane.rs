//! Wires the store, registries, experiment manager and backend together.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use crate::cluster::{default_cluster, ClusterError, ClusterSim, ClusterSnapshot};
use crate::domain::{ExperimentSpec, ResourceSpec};
use crate::environment::{EnvironmentError, EnvironmentRegistry, EnvironmentSpec};
use crate::experiment::{ExperimentError, ExperimentManager, ExperimentRecord, ExperimentSummary, Telemetry, TelemetryAck};
use crate::store::{Store, StoreError, StoreOptions};
use crate::submitter::{BackendKind, LocalConfig, LocalSubmitter, SimulatedSubmitter, Submitter};
use crate::template::{TemplateError, TemplateRegistry, TemplateSpec, TemplateSummary};

#[derive(Debug, Clone)]
pub enum BackendConfig {
    Local(LocalConfig),
    Simulated { nodes: Vec<(String, ResourceSpec)> },
}

impl BackendConfig {
    pub fn simulated_default() -> Self {
        BackendConfig::Simulated { nodes: default_cluster() }
    }
}

#[derive(Debug, Clone)]
pub struct PlaneConfig {
    pub store_path: PathBuf,
    pub store: StoreOptions,
    pub backend: BackendConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum PlaneError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
}

/// The control plane: every service operation the API exposes.
pub struct ControlPlane {
    store: Arc<Store>,
    templates: Arc<TemplateRegistry>,
    environments: Arc<EnvironmentRegistry>,
    experiments: Arc<ExperimentManager>,
    cluster: Option<Arc<SimulatedSubmitter>>,
}

impl ControlPlane {
    pub fn open(config: PlaneConfig) -> Result<Arc<ControlPlane>, PlaneError> {
        let (store, state) = Store::open(&config.store_path, config.store)?;
        let store = Arc::new(store);
        let templates = Arc::new(TemplateRegistry::new(store.clone(), state.templates));
        let environments = Arc::new(EnvironmentRegistry::new(store.clone(), state.environments));
        let sim = match &config.backend {
            BackendConfig::Simulated { nodes } => Some(ClusterSim::with_nodes(nodes.iter().cloned())?),
            BackendConfig::Local(_) => None,
        };
        let mut cluster = None;
        let experiments = ExperimentManager::open(
            store.clone(),
            state.experiments,
            templates.clone(),
            environments.clone(),
            |monitor| match (config.backend, sim) {
                (_, Some(sim)) => {
                    let sim = Arc::new(SimulatedSubmitter::new(sim, monitor));
                    cluster = Some(sim.clone());
                    sim as Arc<dyn Submitter>
                }
                (BackendConfig::Local(local), None) => Arc::new(LocalSubmitter::new(local, monitor)),
                (BackendConfig::Simulated { .. }, None) => unreachable!("simulator built above"),
            },
        )?;
        Ok(Arc::new(ControlPlane { store, templates, environments, experiments, cluster }))
    }

    pub fn backend(&self) -> BackendKind {
        self.experiments.submitter().kind()
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn experiments(&self) -> &Arc<ExperimentManager> {
        &self.experiments
    }

    /// The simulated cluster, when that backend is configured.
    pub fn cluster(&self) -> Option<&Arc<SimulatedSubmitter>> {
        self.cluster.as_ref()
    }

    pub fn create_experiment(&self, spec: ExperimentSpec) -> Result<ExperimentRecord, ExperimentError> {
        self.experiments.create_experiment(spec)
    }

    pub fn create_from_template(
        &self,
        name: &str,
        params: BTreeMap<String, String>,
    ) -> Result<ExperimentRecord, ExperimentError> {
        self.experiments.create_from_template(name, params)
    }

    pub fn get_experiment(&self, id: &str) -> Result<ExperimentRecord, ExperimentError> {
        self.experiments.get(id)
    }

    pub fn list_experiments(&self, namespace: Option<&str>, limit: Option<usize>) -> Vec<ExperimentSummary> {
        self.experiments.list(namespace, limit)
    }

    pub fn kill_experiment(&self, id: &str) -> Result<ExperimentRecord, ExperimentError> {
        self.experiments.kill(id)
    }

    pub fn experiment_logs(&self, id: &str) -> Result<String, ExperimentError> {
        self.experiments.logs(id)
    }

    pub fn append_telemetry(&self, id: &str, telemetry: Telemetry) -> Result<TelemetryAck, ExperimentError> {
        self.experiments.append_telemetry(id, telemetry)
    }

    pub fn register_template(&self, template: TemplateSpec) -> Result<TemplateSpec, TemplateError> {
        self.templates.register(template)
    }

    pub fn get_template(&self, name: &str) -> Result<TemplateSpec, TemplateError> {
        self.templates.get(name)
    }

    pub fn list_templates(&self) -> Vec<TemplateSummary> {
        self.templates.list()
    }

    pub fn delete_template(&self, name: &str) -> Result<(), TemplateError> {
        self.templates.delete(name)
    }

    pub fn register_environment(&self, env: EnvironmentSpec) -> Result<EnvironmentSpec, EnvironmentError> {
        self.environments.register(env)
    }

    pub fn get_environment(&self, name: &str) -> Result<EnvironmentSpec, EnvironmentError> {
        self.environments.get(name)
    }

    pub fn list_environments(&self) -> Vec<EnvironmentSpec> {
        self.environments.list()
    }

    /// Refused while a non-terminal experiment references the environment.
    pub fn delete_environment(&self, name: &str) -> Result<(), EnvironmentError> {
        self.environments.delete(name, |env| self.experiments.environment_in_use(env))
    }

    pub fn cluster_snapshot(&self) -> Option<ClusterSnapshot> {
        self.cluster.as_ref().map(|c| c.snapshot())
    }
}

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, ValueEnum};

use ctower_core::cluster::{default_cluster, parse_cluster_config};
use ctower_core::store::StoreOptions;
use ctower_core::submitter::LocalConfig;
use ctower_core::{BackendConfig, ControlPlane, PlaneConfig};

use crate::routes::{app, AppState, Auth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Local,
    Simulated,
}

#[derive(Debug, Clone, Parser)]
#[command(name = "ctower-server", version, about = "REST API server for the ctower experiment control plane")]
pub struct ServerArgs {
    /// Address to listen on.
    #[arg(long, env = "CT_LISTEN", default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,

    /// Write-ahead log holding all persistent state.
    #[arg(long, env = "CT_STORE_PATH", default_value = "ctower.wal")]
    pub store_path: PathBuf,

    #[arg(long, env = "CT_BACKEND", value_enum, default_value = "local")]
    pub backend: Backend,

    /// YAML node list for the simulated cluster.
    #[arg(long, env = "CT_CLUSTER_CONFIG")]
    pub cluster_config: Option<PathBuf>,

    /// Simulated milliseconds advanced every wall-clock tick of the same
    /// length. 0 stops the clock; time then only moves through the API.
    #[arg(long, env = "CT_SIM_TICK_MS", default_value_t = 100)]
    pub sim_tick_ms: u64,

    /// Working directories of local replicas.
    #[arg(long, env = "CT_SCRATCH_DIR")]
    pub scratch_dir: Option<PathBuf>,

    /// Static workbench bundle served under /ui/.
    #[arg(long, env = "CT_UI_DIR")]
    pub ui_dir: Option<PathBuf>,

    /// Bearer token every API request must carry.
    #[arg(long, env = "CT_TOKEN", hide_env_values = true)]
    pub token: Option<String>,

    /// Accept requests without a token.
    #[arg(long, env = "CT_INSECURE", value_parser = clap::builder::BoolishValueParser::new())]
    pub insecure: bool,
}

impl ServerArgs {
    pub fn auth(&self) -> anyhow::Result<Auth> {
        match (&self.token, self.insecure) {
            (_, true) => Ok(Auth::Insecure),
            (Some(t), false) if !t.is_empty() => Ok(Auth::Bearer(t.clone())),
            _ => bail!("set CT_TOKEN, or CT_INSECURE=1 to run without authentication"),
        }
    }

    pub fn plane_config(&self) -> anyhow::Result<PlaneConfig> {
        let backend = match self.backend {
            Backend::Local => {
                let mut local = LocalConfig::default();
                if let Some(dir) = &self.scratch_dir {
                    local.scratch_root = dir.clone();
                }
                BackendConfig::Local(local)
            }
            Backend::Simulated => {
                let nodes = match &self.cluster_config {
                    Some(path) => {
                        let text = std::fs::read_to_string(path)
                            .with_context(|| format!("reading cluster config {}", path.display()))?;
                        parse_cluster_config(&text).with_context(|| format!("parsing {}", path.display()))?
                    }
                    None => default_cluster(),
                };
                BackendConfig::Simulated { nodes }
            }
        };
        Ok(PlaneConfig { store_path: self.store_path.clone(), store: StoreOptions::default(), backend })
    }
}

/// Opens the control plane and serves until ctrl-c or SIGTERM.
pub async fn serve(args: ServerArgs) -> anyhow::Result<()> {
    let auth = args.auth()?;
    let config = args.plane_config()?;
    let plane = tokio::task::spawn_blocking(move || ControlPlane::open(config)).await??;
    if args.sim_tick_ms > 0 {
        if let Some(cluster) = plane.cluster().cloned() {
            let dt = args.sim_tick_ms;
            tokio::spawn(async move {
                let mut every = tokio::time::interval(Duration::from_millis(dt));
                every.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
                loop {
                    every.tick().await;
                    let cluster = cluster.clone();
                    let _ = tokio::task::spawn_blocking(move || cluster.tick(dt)).await;
                }
            });
        }
    }
    let router = app(AppState { plane: Arc::clone(&plane), auth }, args.ui_dir.clone());
    let listener = tokio::net::TcpListener::bind(args.listen)
        .await
        .with_context(|| format!("binding {}", args.listen))?;
    tracing::info!(addr = %listener.local_addr()?, backend = ?args.backend, store = %args.store_path.display(), "listening");
    axum::serve(listener, router).with_graceful_shutdown(shutdown()).await?;
    Ok(())
}

async fn shutdown() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

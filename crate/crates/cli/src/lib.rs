//! `ctower` command-line client.

mod client;
mod output;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use ctower_core::api::FromTemplateRequest;
use ctower_core::domain::{
    parse_resource_string, EnvironmentRef, ExperimentMeta, ExperimentSpec, ExperimentTaskSpec, ResourceError,
};
use ctower_core::template::{parse_template_file, ParamValue};

pub use client::{Client, ClientError};

#[derive(Debug, Parser)]
#[command(name = "ctower", version, about = "Submit and manage experiments on a ctower server")]
pub struct Cli {
    /// Server base URL.
    #[arg(long, global = true, env = "CT_SERVER", default_value = "http://127.0.0.1:8080")]
    pub server: String,

    /// Bearer token sent with every request.
    #[arg(long, global = true, env = "CT_TOKEN", hide_env_values = true)]
    pub token: Option<String>,

    /// Send no Authorization header.
    #[arg(long, global = true)]
    pub insecure: bool,

    /// Print raw API payloads.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Experiments.
    #[command(subcommand)]
    Job(JobCommand),
    /// Experiment templates.
    #[command(subcommand)]
    Template(TemplateCommand),
    /// Registered environments.
    #[command(subcommand)]
    Env(EnvCommand),
    /// Simulated cluster.
    #[command(subcommand)]
    Cluster(ClusterCommand),
}

#[derive(Debug, Subcommand)]
pub enum JobCommand {
    /// Submit an experiment.
    Run(JobRunArgs),
    List {
        #[arg(long)]
        namespace: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
    },
    Get {
        id: String,
    },
    Kill {
        id: String,
    },
    Logs {
        id: String,
        /// Keep printing new lines until the experiment finishes.
        #[arg(long)]
        follow: bool,
        #[arg(long = "interval_ms", default_value_t = 1000)]
        interval_ms: u64,
    },
}

#[derive(Debug, Clone, Args)]
#[command(rename_all = "snake_case")]
pub struct JobRunArgs {
    #[arg(long)]
    pub name: String,
    #[arg(long, default_value = "default")]
    pub namespace: String,
    #[arg(long, default_value = "")]
    pub framework: String,
    #[arg(long, default_value_t = 1)]
    pub num_workers: u32,
    #[arg(long, default_value = "cpu=1,memory=1024M")]
    pub worker_resources: String,
    #[arg(long, default_value_t = 0)]
    pub num_ps: u32,
    #[arg(long, default_value = "cpu=1,memory=1024M")]
    pub ps_resources: String,
    #[arg(long)]
    pub worker_launch_cmd: Option<String>,
    #[arg(long)]
    pub ps_launch_cmd: Option<String>,
    /// Opaque key=value passed to the backend; repeatable.
    #[arg(long = "conf", value_name = "KEY=VALUE")]
    pub conf: Vec<String>,
    /// Container image the experiment runs in.
    #[arg(long, env = "CT_IMAGE", default_value = "default")]
    pub image: String,
}

#[derive(Debug, Subcommand)]
pub enum TemplateCommand {
    /// Register a template from a JSON file.
    Register { file: PathBuf },
    List,
    Get { name: String },
    Delete { name: String },
    /// Instantiate a template and submit the result.
    Run {
        name: String,
        #[arg(long = "param", value_name = "KEY=VALUE")]
        params: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum EnvCommand {
    /// Register an environment from a YAML (or .json) file.
    Register { file: PathBuf },
    List,
    Get { name: String },
    Delete { name: String },
}

#[derive(Debug, Subcommand)]
pub enum ClusterCommand {
    Status,
}

/// Problems with the arguments themselves, found after clap parsing.
#[derive(Debug, thiserror::Error)]
pub enum UsageError {
    #[error("--{flag}: {source}")]
    Resources { flag: &'static str, source: ResourceError },
    #[error("--{flag}: replicas={inline} disagrees with --{count_flag} {count}")]
    Replicas { flag: &'static str, count_flag: &'static str, inline: u32, count: u32 },
    #[error("--{flag} expects KEY=VALUE, got `{value}`")]
    KeyValue { flag: &'static str, value: String },
    #[error("cannot read {path}: {reason}")]
    File { path: String, reason: String },
}

fn key_value(flag: &'static str, raw: &str) -> Result<(String, String), UsageError> {
    match raw.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => Err(UsageError::KeyValue { flag, value: raw.to_string() }),
    }
}

fn task(
    flag: &'static str,
    count_flag: &'static str,
    count: u32,
    resources: &str,
    cmd: &Option<String>,
) -> Result<ExperimentTaskSpec, UsageError> {
    let req = parse_resource_string(resources).map_err(|source| UsageError::Resources { flag, source })?;
    if let Some(inline) = req.replicas.filter(|r| *r != count) {
        return Err(UsageError::Replicas { flag, count_flag, inline, count });
    }
    let t = ExperimentTaskSpec::new(count, req.resources);
    Ok(match cmd {
        Some(c) => t.with_cmd(c.clone()),
        None => t,
    })
}

/// Turns `job run` flags into the spec sent to the server.
pub fn build_job_spec(args: &JobRunArgs) -> Result<ExperimentSpec, UsageError> {
    let mut meta = ExperimentMeta::new(args.name.clone());
    meta.namespace = args.namespace.clone();
    meta.framework = args.framework.clone();
    let mut spec = ExperimentSpec::new(meta, EnvironmentRef::Image(args.image.clone()));
    if args.num_workers > 0 {
        let t = task("worker_resources", "num_workers", args.num_workers, &args.worker_resources, &args.worker_launch_cmd)?;
        spec = spec.with_task("Worker", t);
    }
    if args.num_ps > 0 {
        let t = task("ps_resources", "num_ps", args.num_ps, &args.ps_resources, &args.ps_launch_cmd)?;
        spec = spec.with_task("Ps", t);
    }
    for raw in &args.conf {
        let (k, v) = key_value("conf", raw)?;
        spec.conf.insert(k, v);
    }
    Ok(spec)
}

/// Parses `--param` values. Every value is sent as a string.
pub fn template_params(raw: &[String]) -> Result<FromTemplateRequest, UsageError> {
    let mut params = BTreeMap::new();
    for p in raw {
        let (k, v) = key_value("param", p)?;
        params.insert(k, ParamValue::String(v));
    }
    Ok(FromTemplateRequest { params })
}

fn read_file(path: &PathBuf) -> Result<String, UsageError> {
    std::fs::read_to_string(path).map_err(|e| UsageError::File { path: path.display().to_string(), reason: e.to_string() })
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Usage(#[from] UsageError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("output failed: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) => 2,
            RunError::Client(_) | RunError::Io(_) => 1,
        }
    }
}

/// Runs one command, writing results to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), RunError> {
    let token = if cli.insecure { None } else { cli.token.clone() };
    let client = Client::new(&cli.server, token)?;
    let json = cli.json;
    match &cli.command {
        Command::Job(cmd) => match cmd {
            JobCommand::Run(args) => {
                let spec = build_job_spec(args)?;
                let body = client.post_json("/experiment", &spec.to_canonical_json())?;
                output::record(out, &body, json)?;
            }
            JobCommand::List { namespace, limit } => {
                let mut query = Vec::new();
                if let Some(ns) = namespace {
                    query.push(("namespace", ns.clone()));
                }
                if let Some(l) = limit {
                    query.push(("limit", l.to_string()));
                }
                let body = client.get_query("/experiment", &query)?;
                output::experiment_list(out, &body, json)?;
            }
            JobCommand::Get { id } => output::record_detail(out, &client.get(&format!("/experiment/{id}"))?, json)?,
            JobCommand::Kill { id } => output::record(out, &client.post_json(&format!("/experiment/{id}/kill"), "")?, json)?,
            JobCommand::Logs { id, follow: false, .. } => write!(out, "{}", client.get(&format!("/experiment/{id}/logs"))?)?,
            JobCommand::Logs { id, follow: true, interval_ms } => {
                follow_logs(&client, id, Duration::from_millis(*interval_ms), out)?
            }
        },
        Command::Template(cmd) => match cmd {
            TemplateCommand::Register { file } => {
                let text = read_file(file)?;
                let template = parse_template_file(&text).map_err(|e| UsageError::File {
                    path: file.display().to_string(),
                    reason: e.to_string(),
                })?;
                let body = client.post_json("/template", &template.to_canonical_json())?;
                output::named(out, &body, "registered template", json)?;
            }
            TemplateCommand::List => output::template_list(out, &client.get("/template")?, json)?,
            TemplateCommand::Get { name } => output::pretty(out, &client.get(&format!("/template/{name}"))?, json)?,
            TemplateCommand::Delete { name } => {
                client.delete(&format!("/template/{name}"))?;
                if !json {
                    writeln!(out, "deleted template {name}")?;
                }
            }
            TemplateCommand::Run { name, params } => {
                let req = template_params(params)?;
                let body = serde_json::to_string(&req).expect("params serialize");
                output::record(out, &client.post_json(&format!("/experiment/from-template/{name}"), &body)?, json)?;
            }
        },
        Command::Env(cmd) => match cmd {
            EnvCommand::Register { file } => {
                let text = read_file(file)?;
                let is_json = file.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
                let content_type = if is_json { "application/json" } else { "application/yaml" };
                let body = client.post("/environment", content_type, text)?;
                output::named(out, &body, "registered environment", json)?;
            }
            EnvCommand::List => output::environment_list(out, &client.get("/environment")?, json)?,
            EnvCommand::Get { name } => output::pretty(out, &client.get(&format!("/environment/{name}"))?, json)?,
            EnvCommand::Delete { name } => {
                client.delete(&format!("/environment/{name}"))?;
                if !json {
                    writeln!(out, "deleted environment {name}")?;
                }
            }
        },
        Command::Cluster(ClusterCommand::Status) => output::cluster(out, &client.get("/cluster")?, json)?,
    }
    Ok(())
}

fn follow_logs(client: &Client, id: &str, every: Duration, out: &mut dyn Write) -> Result<(), RunError> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    loop {
        let body = client.get(&format!("/experiment/{id}"))?;
        let rec: serde_json::Value = serde_json::from_str(&body).map_err(ClientError::from)?;
        if let Some(logs) = rec["logs"].as_object() {
            for (task, lines) in logs {
                let lines = lines.as_array().map(Vec::as_slice).unwrap_or_default();
                let n = seen.entry(task.clone()).or_default();
                for line in &lines[(*n).min(lines.len())..] {
                    writeln!(out, "[{task}] {}", line.as_str().unwrap_or_default())?;
                }
                *n = lines.len();
            }
        }
        out.flush()?;
        let status = rec["status"].as_str().unwrap_or_default();
        if matches!(status, "Succeeded" | "Failed" | "Killed") {
            return Ok(());
        }
        std::thread::sleep(every);
    }
}

/// Parses `argv`, runs it, and returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render();
            let _ = if e.use_stderr() { write!(err, "{rendered}") } else { write!(out, "{rendered}") };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(argv: &[&str]) -> JobRunArgs {
        let mut full = vec!["ctower", "job", "run"];
        full.extend_from_slice(argv);
        match Cli::try_parse_from(full).unwrap().command {
            Command::Job(JobCommand::Run(a)) => a,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ps_only_when_requested() {
        let spec = build_job_spec(&args(&["--name", "x"])).unwrap();
        assert_eq!(spec.tasks.keys().collect::<Vec<_>>(), ["Worker"]);
        let spec = build_job_spec(&args(&["--name", "x", "--num_ps", "2"])).unwrap();
        assert_eq!(spec.tasks["Ps"].replicas, 2);
    }

    #[test]
    fn usage_errors() {
        assert!(matches!(
            build_job_spec(&args(&["--name", "x", "--worker_resources", "cpu=a"])),
            Err(UsageError::Resources { flag: "worker_resources", .. })
        ));
        assert!(matches!(
            build_job_spec(&args(&["--name", "x", "--num_workers", "2", "--worker_resources", "cpu=1,replicas=3"])),
            Err(UsageError::Replicas { inline: 3, count: 2, .. })
        ));
        assert!(matches!(build_job_spec(&args(&["--name", "x", "--conf", "novalue"])), Err(UsageError::KeyValue { .. })));
        assert!(template_params(&["a=1".into(), "b".into()]).is_err());
    }

    #[test]
    fn missing_name_is_exit_2() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run(["ctower", "job", "run"], &mut out, &mut err), 2);
        assert!(String::from_utf8_lossy(&err).contains("--name"));
        assert_eq!(run(["ctower", "job", "run", "--name", "x", "--bogus"], &mut out, &mut err), 2);
        assert_eq!(run(["ctower", "--help"], &mut Vec::new(), &mut Vec::new()), 0);
    }

    #[test]
    fn bad_resource_flag_is_exit_2_without_contacting_a_server() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(
            ["ctower", "--server", "http://127.0.0.1:1", "job", "run", "--name", "x", "--worker_resources", "disk=1"],
            &mut out,
            &mut err,
        );
        assert_eq!(code, 2);
    }

    #[test]
    fn unreachable_server_is_exit_1() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run(["ctower", "--server", "http://127.0.0.1:1", "job", "list"], &mut out, &mut err), 1);
    }
}

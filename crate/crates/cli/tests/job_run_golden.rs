use ctower_cli::{build_job_spec, Cli, Command, JobCommand};
use ctower_core::domain::{EnvironmentRef, ExperimentMeta, ExperimentSpec, ExperimentTaskSpec, ResourceSpec};
use clap::Parser;

const ARGV: &[&str] = &[
    "ctower", "job", "run",
    "--name", "mnist",
    "--framework", "TensorFlow",
    "--num_workers", "4",
    "--worker_resources", "memory=4G,gpu=4,vcores=4",
    "--num_ps", "1",
    "--ps_resources", "memory=2G,vcores=2",
    "--worker_launch_cmd", "python mnist.py",
    "--ps_launch_cmd", "python mnist.py",
    "--insecure",
    "--conf", "tony.containers.resources=mnist.py",
];

fn from_argv() -> (Cli, ExperimentSpec) {
    let cli = Cli::try_parse_from(ARGV).unwrap();
    let Command::Job(JobCommand::Run(args)) = &cli.command else { panic!("not job run") };
    let spec = build_job_spec(args).unwrap();
    (cli, spec)
}

#[test]
fn matches_golden_file() {
    let (cli, spec) = from_argv();
    assert!(cli.insecure);
    let golden = include_str!("fixtures/mnist-job-spec.json");
    assert_eq!(spec.to_canonical_json(), golden.trim_end());
}

#[test]
fn matches_direct_construction() {
    let mut meta = ExperimentMeta::new("mnist");
    meta.framework = "TensorFlow".into();
    let mut direct = ExperimentSpec::new(meta, EnvironmentRef::Image("default".into()))
        .with_task("Worker", ExperimentTaskSpec::new(4, ResourceSpec::new(4, 4, 4096)).with_cmd("python mnist.py"))
        .with_task("Ps", ExperimentTaskSpec::new(1, ResourceSpec::new(2, 0, 2048)).with_cmd("python mnist.py"));
    direct.conf.insert("tony.containers.resources".into(), "mnist.py".into());
    let (_, spec) = from_argv();
    assert_eq!(spec.to_canonical_json(), direct.to_canonical_json());
}

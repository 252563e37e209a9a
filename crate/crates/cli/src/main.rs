//! `flowmill`: run, resume and inspect flows from the command line.
//!
//! Exit codes: 0 success, 1 user error (bad input, invalid flow, unknown
//! pathspec), 2 execution failure (a run failed or the engine hit an I/O
//! problem). With `--json` every output is a single JSON document and
//! errors go to stderr as `{"error": {...}}`.

mod error;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowmill_core::backends::{supervise, SupervisorCommand};
use flowmill_core::cards::{render_card, store_card};
use flowmill_core::cas::{decode_archive, ArtifactValue, Store};
use flowmill_core::client::{Client, Namespace, Resolved};
use flowmill_core::flow::{parse_flow, topological_plan, validate_dag, FlowSpec};
use flowmill_core::home::Home;
use flowmill_core::metadata::{default_user, http, MetadataStore, Pathspec, RunRecord, Status};
use flowmill_core::runtime::{BackendSelector, RunOptions, RunResult, Runtime, RuntimeConfig};
use serde_json::{json, Value};

use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "flowmill", version, about = "Run and inspect DAG workflows")]
struct Cli {
    /// Machine-readable output: one JSON document per invocation.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a flow.
    Run {
        flow: PathBuf,
        /// Parameter value; parsed as JSON, else taken as a string.
        #[arg(long = "param", value_name = "K=V")]
        params: Vec<String>,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Re-run a past run from a step, reusing everything upstream of it.
    Resume {
        flow: PathBuf,
        #[arg(long, value_name = "FLOW/RUN")]
        origin: String,
        #[arg(long = "from", value_name = "STEP")]
        from_step: Option<String>,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Lint a flow document.
    Validate { flow: PathBuf },
    /// Print the orchestration plan of a flow.
    Plan { flow: PathBuf },
    /// List records.
    List {
        #[command(subcommand)]
        what: ListCommand,
    },
    /// Resolve a pathspec: run, step, task or artifact.
    Show {
        pathspec: String,
        #[arg(long)]
        all_namespaces: bool,
    },
    /// Render the card of a finished run and attach it to the run.
    Card {
        #[arg(value_name = "FLOW/RUN")]
        run: String,
        /// Flow document; by default it is looked up in the run's code package.
        #[arg(long = "flow")]
        flow_file: Option<PathBuf>,
        #[arg(long)]
        all_namespaces: bool,
    },
    /// Serve read-only metadata over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
    },
    #[command(hide = true)]
    Supervise {
        #[arg(long)]
        home: PathBuf,
        #[arg(long)]
        job: PathBuf,
    },
}

#[derive(Subcommand)]
enum ListCommand {
    Runs {
        flow: String,
        #[arg(long)]
        all_namespaces: bool,
    },
}

#[derive(Args)]
struct ExecArgs {
    #[arg(long, default_value = "local")]
    backend: BackendSelector,
    #[arg(long)]
    max_parallel: Option<usize>,
    #[arg(long = "tag")]
    tags: Vec<String>,
}

fn main() -> ExitCode {
    let json_requested = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) if json_requested => {
            let message = e.to_string();
            let message = message.trim_start_matches("error: ").trim_end();
            return CliError::user("usage", message).report(true);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    init_logging(cli.json);
    let json = cli.json;
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => e.report(json),
    }
}

fn init_logging(json: bool) {
    use tracing_subscriber::EnvFilter;
    // Under --json stderr is reserved for the error document.
    let default = if json { "off" } else { "warn" };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

fn dispatch(cli: Cli) -> CliResult<ExitCode> {
    let json = cli.json;
    match cli.command {
        Command::Supervise { home, job } => {
            supervise(&Home::new(home), &job).map_err(CliError::execution)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { flow } => validate(&flow, json),
        Command::Plan { flow } => {
            let spec = load_flow(&flow)?;
            let plan = topological_plan(&spec).map_err(CliError::from_flow)?;
            if json {
                emit(&serde_json::to_value(&plan).expect("plan serializes"));
            } else {
                print!("{}", plan.to_json());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { flow, params, exec } => {
            let spec = load_flow(&flow)?;
            let params = parse_params(&params)?;
            let code_root = flow_dir(&flow)?;
            let rt = runtime(&exec)?;
            let result = rt.run_flow(&spec, &code_root, &params, &run_options(&exec)).map_err(CliError::from_runtime)?;
            Ok(report_run(&result, json))
        }
        Command::Resume { flow, origin, from_step, exec } => {
            let spec = load_flow(&flow)?;
            let origin = parse_pathspec(&origin)?;
            if origin.step.is_some() {
                return Err(CliError::user("usage", format!("--origin takes FLOW/RUN, got `{origin}`")));
            }
            let rt = runtime(&exec)?;
            let result = rt
                .resume_run(&spec, &origin, from_step.as_deref(), &run_options(&exec))
                .map_err(CliError::from_runtime)?;
            Ok(report_run(&result, json))
        }
        Command::List { what: ListCommand::Runs { flow, all_namespaces } } => {
            let client = client()?;
            let runs = client.runs(&flow, &namespace(all_namespaces)).map_err(CliError::from_client)?;
            if json {
                emit(&serde_json::to_value(&runs).expect("records serialize"));
            } else {
                for r in &runs {
                    println!("{}", run_line(r));
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Show { pathspec, all_namespaces } => {
            let path = parse_pathspec(&pathspec)?;
            let resolved = client()?.resolve(&path, &namespace(all_namespaces)).map_err(CliError::from_client)?;
            show(&resolved, json)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Card { run, flow_file, all_namespaces } => card(&run, flow_file.as_deref(), all_namespaces, json),
        Command::Serve { addr } => {
            let home = Home::from_env();
            let meta = home.metadata().map_err(CliError::execution)?;
            let server = tiny_http_server(&addr)?;
            if !json {
                println!("serving metadata of {} on http://{addr}", home.root().display());
            } else {
                emit(&json!({"listening": addr}));
            }
            let _ = std::io::stdout().flush();
            http::serve_on(meta, server);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn tiny_http_server(addr: &str) -> CliResult<tiny_http::Server> {
    tiny_http::Server::http(addr).map_err(|e| CliError::user("serve", format!("cannot listen on {addr}: {e}")))
}

fn emit(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn load_flow(path: &Path) -> CliResult<FlowSpec> {
    let bytes = std::fs::read(path).map_err(|e| CliError::user("io", format!("cannot read {}: {e}", path.display())))?;
    parse_flow(&bytes).map_err(CliError::from_flow)
}

fn flow_dir(path: &Path) -> CliResult<PathBuf> {
    let abs = std::fs::canonicalize(path).map_err(|e| CliError::user("io", format!("{}: {e}", path.display())))?;
    Ok(abs.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("/")))
}

fn validate(path: &Path, json: bool) -> CliResult<ExitCode> {
    let spec = load_flow(path)?;
    let report = validate_dag(&spec);
    if !report.ok {
        return Err(CliError::invalid_flow(report));
    }
    if json {
        emit(&serde_json::to_value(&report).expect("report serializes"));
    } else {
        println!("ok: flow `{}` with {} steps", spec.name, spec.steps.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_params(raw: &[String]) -> CliResult<BTreeMap<String, ArtifactValue>> {
    let mut out = BTreeMap::new();
    for p in raw {
        let Some((k, v)) = p.split_once('=') else {
            return Err(CliError::user("usage", format!("--param expects K=V, got `{p}`")));
        };
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        out.insert(k.to_string(), ArtifactValue::Json(value));
    }
    Ok(out)
}

fn parse_pathspec(s: &str) -> CliResult<Pathspec> {
    s.parse().map_err(|e: flowmill_core::metadata::PathspecError| CliError::user("pathspec", e.to_string()))
}

fn namespace(all: bool) -> Namespace {
    if all {
        Namespace::Global
    } else {
        Namespace::User(default_user())
    }
}

fn stores() -> CliResult<(Home, Store, MetadataStore)> {
    let home = Home::from_env();
    let store = home.store().map_err(CliError::execution)?;
    let meta = home.metadata().map_err(CliError::execution)?;
    Ok((home, store, meta))
}

fn client() -> CliResult<Client> {
    let (_, store, meta) = stores()?;
    Ok(Client::new(store, meta))
}

fn runtime(exec: &ExecArgs) -> CliResult<Runtime> {
    let mut config = RuntimeConfig::new(Home::from_env());
    if let Some(n) = exec.max_parallel {
        if n == 0 {
            return Err(CliError::user("usage", "--max-parallel must be at least 1"));
        }
        config.max_parallel = n;
    }
    let exe = std::env::current_exe().map_err(CliError::execution)?;
    config.supervisor = SupervisorCommand { program: exe, args: vec!["supervise".into()] };
    Runtime::new(config).map_err(CliError::from_runtime)
}

fn run_options(exec: &ExecArgs) -> RunOptions {
    RunOptions { backend: exec.backend, tags: exec.tags.clone(), ..RunOptions::for_user(default_user()) }
}

fn report_run(r: &RunResult, json: bool) -> ExitCode {
    let ok = r.status == Status::Succeeded;
    if json {
        let doc = json!({
            "run": r.run.pathspec().to_string(),
            "status": r.status,
            "tasks": r.tasks.len(),
            "cloned": r.tasks.iter().filter(|t| t.cloned_from.is_some()).count(),
            "failed_step": r.failed_step,
            "message": r.message,
        });
        if ok {
            emit(&doc);
        } else {
            eprintln!("{}", json!({"error": {"kind": "execution", "message": r.message, "run": doc}}));
        }
    } else {
        println!("{} {} ({} tasks)", r.run.pathspec(), r.status, r.tasks.len());
        if let Some(step) = &r.failed_step {
            eprintln!("error: step `{step}` failed: {}", r.message.as_deref().unwrap_or("no detail"));
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn run_line(r: &RunRecord) -> String {
    let origin = r.cloned_from.as_ref().map(|o| format!(" resumed-from={o}")).unwrap_or_default();
    format!("{}\t{}\t{}{origin}", r.pathspec(), r.status, r.user)
}

fn show(resolved: &Resolved, json: bool) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    match resolved {
        Resolved::Artifact { pathspec, hash, value } if json => {
            let (kind, v, size) = match value {
                ArtifactValue::Json(v) => ("json", v.clone(), value.payload().len()),
                ArtifactValue::Bytes(b) => ("bytes", Value::Null, b.len()),
            };
            emit(&json!({"kind": "artifact", "pathspec": pathspec.to_string(), "hash": hash, "type": kind, "size": size, "value": v}));
        }
        Resolved::Artifact { value, .. } => {
            let mut bytes = value.payload();
            if matches!(value, ArtifactValue::Json(_)) {
                bytes.push(b'\n');
            }
            out.write_all(&bytes).map_err(CliError::execution)?;
        }
        other if json => emit(&serde_json::to_value(other).expect("records serialize")),
        Resolved::Run { run, tasks } => {
            let _ = writeln!(out, "{}", run_line(run));
            let _ = writeln!(out, "code\t{}", run.code_package);
            for (name, hash) in &run.parameters {
                let _ = writeln!(out, "param\t{name}\t{hash}");
            }
            for t in tasks {
                let _ = writeln!(out, "{}\t{}", t.pathspec(), t.status);
            }
        }
        Resolved::Step { tasks, .. } => {
            for t in tasks {
                let _ = writeln!(out, "{}\t{}", t.pathspec(), t.status);
            }
        }
        Resolved::Task { task } => {
            let _ = writeln!(out, "{}\t{}\tattempt {}", task.pathspec(), task.status, task.attempt);
            for (name, hash) in &task.artifacts {
                let _ = writeln!(out, "{name}\t{hash}");
            }
        }
    }
    Ok(())
}

fn card(run: &str, flow_file: Option<&Path>, all_namespaces: bool, json: bool) -> CliResult<ExitCode> {
    let path = parse_pathspec(run)?;
    if path.step.is_some() {
        return Err(CliError::user("usage", format!("card takes FLOW/RUN, got `{path}`")));
    }
    let (home, store, meta) = stores()?;
    let client = Client::new(store.clone(), meta.clone());
    let Resolved::Run { run, tasks } = client.resolve(&path, &namespace(all_namespaces)).map_err(CliError::from_client)? else {
        unreachable!("run pathspecs resolve to runs");
    };
    let spec = match flow_file {
        Some(f) => load_flow(f)?,
        None => packaged_flow(&store, &run)?,
    };
    if spec.name != run.flow {
        return Err(CliError::user("flow", format!("flow `{}` does not match run {}", spec.name, run.pathspec())));
    }
    let html = render_card(&store, &run, &tasks, &spec).map_err(CliError::from_card)?;
    let hash = store_card(&store, &meta, &run, &tasks, &html).map_err(CliError::from_card)?;
    let file = home.card_path(&run.flow, run.run_id);
    if let Some(dir) = file.parent() {
        std::fs::create_dir_all(dir).map_err(CliError::execution)?;
    }
    std::fs::write(&file, &html).map_err(CliError::execution)?;
    let rel = home.relative(&file).display().to_string();
    if json {
        emit(&json!({"path": rel, "hash": hash}));
    } else {
        println!("{rel}");
    }
    Ok(ExitCode::SUCCESS)
}

/// The flow document of a run, found among the `.json` files of its code
/// package by name.
fn packaged_flow(store: &Store, run: &RunRecord) -> CliResult<FlowSpec> {
    let ArtifactValue::Bytes(bytes) = store.get(&run.code_package).map_err(CliError::execution)? else {
        return Err(CliError::execution(format!("code package of {} is not an archive", run.pathspec())));
    };
    let entries = decode_archive(&bytes).map_err(CliError::execution)?;
    entries
        .iter()
        .filter(|e| e.path.ends_with(".json"))
        .filter_map(|e| parse_flow(&e.content).ok())
        .find(|s| s.name == run.flow)
        .ok_or_else(|| {
            CliError::user("flow", format!("no flow document for `{}` in the code package; pass --flow", run.flow))
        })
}

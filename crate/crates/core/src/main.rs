use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use sms_probe::canonical::to_canonical_pretty;
use sms_probe::manifest::{load_manifest, validate_for_sms, Manifest};
use sms_probe::normalize::PatternConfig;
use sms_probe::oracles::{generate_manifest, MockServer, OracleKind, OracleSpec, SyntheticManifestSpec};
use sms_probe::protocol::{ClientConfig, ClientError, HttpBackend, ResponseStore};
use sms_probe::report::{emit, run_evaluation, Format, RunConfig, RunError};
use sms_probe::sms::{build_pair_plan, Condition, PairPlan, RecipientMode};
use sms_probe::template::PromptTemplate;

#[derive(Parser)]
#[command(name = "sms-probe", version, about = "Modality-swap diagnostics for multimodal binary classifiers")]
struct Cli {
    /// Seed for donor sampling and mock oracles.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for reports and generated files.
    #[arg(long, global = true, default_value = "sms-out")]
    out_dir: PathBuf,
    /// Answer pattern file (`<verdict>\t<regex>` per line).
    #[arg(long, global = true)]
    patterns: Option<PathBuf>,
    /// Prompt template (TOML).
    #[arg(long, global = true)]
    template: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a donor plan for a manifest.
    Pairs {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "all")]
        recipients: RecipientMode,
        /// Plan file; defaults to <out-dir>/plan.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a manifest against a model endpoint.
    Run {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, required_unless_present = "replay")]
        endpoint: Option<String>,
        /// Record responses here; existing entries are reused, so a rerun resumes.
        #[arg(long, conflicts_with = "replay")]
        record: Option<PathBuf>,
        /// Answer every request from this store without contacting a model.
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        parallel: usize,
        #[arg(long, default_value_t = 60_000)]
        timeout_ms: u64,
        #[arg(long, default_value_t = 2)]
        retries: u32,
        /// Send image bytes inline instead of file paths.
        #[arg(long)]
        inline_images: bool,
        /// Do not request attention even if the model supports it.
        #[arg(long)]
        no_attention: bool,
    },
    /// Recompute the report from a response store.
    Report {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        store: PathBuf,
    },
    /// Inspect a response store.
    Replay {
        #[arg(long)]
        store: PathBuf,
        /// Print the stored response for this request digest.
        #[arg(long)]
        digest: Option<String>,
    },
    /// Serve a mock model over HTTP.
    ServeMock {
        /// text | image | fusion:<w> | noise | inverted
        #[arg(long, default_value = "text")]
        oracle: OracleKind,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Declare no support for text-only input.
        #[arg(long)]
        no_text_only: bool,
        /// Declare no support for image-only input.
        #[arg(long)]
        no_image_only: bool,
        /// Answer 503 after this many successful predictions.
        #[arg(long)]
        fail_after: Option<u64>,
    },
    /// Write a synthetic manifest with cue-carrying stub images.
    Synth {
        #[arg(long, default_value_t = 100)]
        n_per_class: usize,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Donor plan; built from --seed and --recipients when absent.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    recipients: RecipientMode,
    #[arg(long, value_delimiter = ',', default_value = "no_shift,text_shift,image_shift,only_text,only_image")]
    conditions: Vec<Condition>,
    /// Comma-separated subset of json,csv,plotdata.
    #[arg(long, default_value = "json,csv,plotdata")]
    formats: String,
    /// Base directory for relative image refs; defaults to the manifest's directory.
    #[arg(long)]
    image_root: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    bins: usize,
}

/// Exit status classes.
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Transport(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Transport(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Transport(e) => e,
        }
    }
}

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn data<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Data(e.into())
}

fn classify(e: RunError) -> Failure {
    match &e {
        RunError::Backend(ClientError::Invalid(_)) => data(e),
        RunError::Backend(_) => Failure::Transport(e.into()),
        _ => data(e),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", render(f.error()));
            ExitCode::from(f.code())
        }
    }
}

/// Joins the cause chain, dropping causes already quoted by their parent.
fn render(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn load_config(cli: &Cli) -> Result<(PatternConfig, PromptTemplate), Failure> {
    let patterns = match &cli.patterns {
        Some(p) => PatternConfig::load(p).map_err(usage)?,
        None => PatternConfig::default(),
    };
    let template = match &cli.template {
        Some(p) => PromptTemplate::load(p).map_err(usage)?,
        None => PromptTemplate::default(),
    };
    Ok((patterns, template))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(data)?;
    }
    let body = to_canonical_pretty(value).map_err(data)?;
    std::fs::write(path, body)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(data)
}

fn load_plan(path: &Path) -> Result<PairPlan, Failure> {
    let src = std::fs::read_to_string(path)
        .with_context(|| format!("reading plan {}", path.display()))
        .map_err(data)?;
    serde_json::from_str(&src)
        .with_context(|| format!("parsing plan {}", path.display()))
        .map_err(data)
}

struct Prepared {
    manifest: Manifest,
    plan: PairPlan,
    cfg: RunConfig,
    formats: Vec<Format>,
}

fn prepare(cli: &Cli, eval: &EvalArgs) -> Result<Prepared, Failure> {
    let (patterns, template) = load_config(cli)?;
    let formats = Format::parse_list(&eval.formats).map_err(usage)?;
    let manifest = load_manifest(&eval.manifest).map_err(data)?;
    let plan = match &eval.plan {
        Some(p) => load_plan(p)?,
        None => {
            let plan = build_pair_plan(&manifest, cli.seed, eval.recipients).map_err(data)?;
            write_json(&cli.out_dir.join("plan.json"), &plan)?;
            plan
        }
    };
    let image_root = eval.image_root.clone().unwrap_or_else(|| {
        eval.manifest
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    });
    let cfg = RunConfig {
        conditions: eval.conditions.clone(),
        template,
        patterns,
        image_root,
        bins: eval.bins,
        ..Default::default()
    };
    Ok(Prepared {
        manifest,
        plan,
        cfg,
        formats,
    })
}

fn finish(cli: &Cli, p: &Prepared, store: &mut ResponseStore, backend: Option<&HttpBackend>) -> Result<(), Failure> {
    let outcome = run_evaluation(
        &p.manifest,
        Some(&p.plan),
        backend.map(|b| b as &dyn sms_probe::protocol::Backend),
        store,
        &p.cfg,
    )
    .map_err(classify)?;
    for s in &outcome.report.skipped {
        eprintln!("skipped {}: {}", s.condition, s.reason);
    }
    let files = emit(&outcome, &cli.out_dir, &p.formats).map_err(data)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Pairs {
            manifest,
            recipients,
            out,
        } => {
            let m = load_manifest(manifest).map_err(data)?;
            let v = validate_for_sms(&m);
            for d in &v.defects {
                eprintln!("defect: {d}");
            }
            let plan = build_pair_plan(&m, cli.seed, *recipients).map_err(data)?;
            let path = out.clone().unwrap_or_else(|| cli.out_dir.join("plan.json"));
            write_json(&path, &plan)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Run {
            eval,
            endpoint,
            record,
            replay,
            parallel,
            timeout_ms,
            retries,
            inline_images,
            no_attention,
        } => {
            let mut p = prepare(&cli, eval)?;
            p.cfg.parallel = *parallel;
            p.cfg.inline_images = *inline_images;
            p.cfg.request_attention = !no_attention;
            if let Some(path) = replay {
                let mut store = ResponseStore::open(path).map_err(data)?;
                return finish(&cli, &p, &mut store, None);
            }
            let endpoint = endpoint.as_deref().ok_or_else(|| usage(anyhow!("--endpoint is required")))?;
            let backend = HttpBackend::new(
                endpoint,
                ClientConfig {
                    timeout: Duration::from_millis(*timeout_ms),
                    retries: *retries,
                    ..Default::default()
                },
            );
            let mut store = match record {
                Some(path) => ResponseStore::open(path).map_err(data)?,
                None => ResponseStore::in_memory(),
            };
            finish(&cli, &p, &mut store, Some(&backend))
        }
        Command::Report { eval, store } => {
            let p = prepare(&cli, eval)?;
            if !store.exists() {
                return Err(data(anyhow!("store {} does not exist", store.display())));
            }
            let mut store = ResponseStore::open(store).map_err(data)?;
            finish(&cli, &p, &mut store, None)
        }
        Command::Replay { store, digest } => {
            if !store.exists() {
                return Err(data(anyhow!("store {} does not exist", store.display())));
            }
            let s = ResponseStore::open(store).map_err(data)?;
            match digest {
                Some(d) => {
                    let resp = s.get(d).ok_or_else(|| data(anyhow!("no stored response for digest {d}")))?;
                    print!("{}", to_canonical_pretty(resp).map_err(data)?);
                }
                None => {
                    match s.capabilities() {
                        Some(c) => println!("model_id: {}", c.model_id),
                        None => println!("model_id: (unknown)"),
                    }
                    println!("responses: {}", s.len());
                    for (digest, resp) in s.iter() {
                        println!("{digest}\t{}", resp.request_id);
                    }
                }
            }
            Ok(())
        }
        Command::ServeMock {
            oracle,
            port,
            host,
            no_text_only,
            no_image_only,
            fail_after,
        } => {
            let mut spec = OracleSpec::new(*oracle, cli.seed);
            spec.capabilities.supports_text_only = !no_text_only;
            spec.capabilities.supports_image_only = !no_image_only;
            let server = MockServer::start(spec, &format!("{host}:{port}"))
                .with_context(|| format!("binding {host}:{port}"))
                .map_err(data)?;
            server.set_fail_after(*fail_after);
            println!("{}", server.url());
            server.wait();
            Ok(())
        }
        Command::Synth { n_per_class } => {
            let m = generate_manifest(
                &SyntheticManifestSpec {
                    n_per_class: *n_per_class,
                    seed: cli.seed,
                },
                &cli.out_dir,
            )
            .map_err(data)?;
            println!("{} ({} records)", cli.out_dir.join("manifest.jsonl").display(), m.len());
            Ok(())
        }
    }
}

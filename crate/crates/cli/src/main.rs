use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hybridgen::constraints::{validate_plan, ConstraintPlan};
use hybridgen::demos::{self, Dataset};
use hybridgen::gateway::{RecordedTransport, Transport};
use hybridgen::jsonfmt;
use hybridgen::keypoints::{extract_detailed, load_response_map, ExtractionConfig};
use hybridgen::pipeline::{
    dataset_stats, expert_sources, fetch_plan, label_dataset, record_expert_responses, render_stats, stage1, stage2,
    validate_dataset, GenerationReport, PipelineConfig, PipelineError,
};
use hybridgen::planner::{replan, PlanError, PlanProblem};
use hybridgen::simenv::{builtin, execute, Variant};

#[derive(Parser)]
#[command(name = "hybridgen", version, about = "Two-stage robot demonstration augmentation")]
struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 = one per core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Model transport: recorded:<dir> or http:<url>.
    #[arg(long, global = true)]
    vlm: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Label raw demonstrations from video-analysis responses and split them into subtasks.
    Label(InOut),
    /// Stage 1: adapt data-dependent segments, replan the rest under constraints.
    Augment1 {
        #[command(flatten)]
        io: InOut,
        /// Constraint plan (JSON) to use instead of asking the model.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Where to write the generation report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Stage 2: scale up a stage-1 dataset with pose-only adaptation.
    Augment2 {
        #[command(flatten)]
        io: InOut,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Solve a single plan problem.
    Plan {
        /// PlanProblem (JSON).
        #[arg(long)]
        problem: PathBuf,
        /// Write the problem and result for debugging.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Re-execute every demonstration of a dataset and check success.
    Validate {
        #[arg(long)]
        input: PathBuf,
        /// Directory for execution traces of failing demonstrations.
        #[arg(long)]
        dump_trace: Option<PathBuf>,
    },
    /// Summary statistics of a dataset.
    Report {
        #[arg(long)]
        input: PathBuf,
        /// Generation report written by augment1/augment2.
        #[arg(long)]
        generation: Option<PathBuf>,
        /// Write machine-readable stats here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Extract 3D keypoints from a response map.
    Keypoints {
        #[arg(long)]
        map: PathBuf,
        /// Task whose workspace bounds the keypoints.
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 5)]
        clusters: usize,
        #[arg(long, default_value_t = 0.2)]
        top_fraction: f64,
        #[arg(long, default_value_t = 0.04)]
        bandwidth: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate scripted source demonstrations and matching recorded responses.
    Synth {
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value = "D0")]
        variant: Variant,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        output: PathBuf,
        /// Directory to write recorded model responses into.
        #[arg(long)]
        record: Option<PathBuf>,
    },
}

#[derive(Args)]
struct InOut {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

/// Error with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

const INVALID: u8 = 2;
const PIPELINE: u8 = 3;

fn invalid(err: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: INVALID,
        err: err.into(),
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = if e.is_validation() { INVALID } else { PIPELINE };
        Failure { code, err: e.into() }
    }
}

/// `println!` that treats a closed stdout (e.g. `| head`) as a normal exit.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        if let Err(e) = writeln!(std::io::stdout().lock(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            return Err(Failure { code: PIPELINE, err: e.into() });
        }
    }};
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn config(cli: &Cli, dataset_task: Option<&str>) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => {
            let mut c = PipelineConfig::default();
            if let Some(t) = dataset_task {
                c.task = t.to_string();
            }
            c
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(v) = &cli.vlm {
        cfg.vlm = Some(v.clone());
    }
    cfg.validate()?;
    if let Some(t) = dataset_task {
        let name = cfg.task()?.name;
        if name != t {
            return Err(invalid(anyhow!("dataset is for task '{t}' but the config selects '{name}'")));
        }
    }
    Ok(cfg)
}

fn transport(cfg: &PipelineConfig) -> Result<Transport, Failure> {
    let spec = cfg
        .vlm
        .as_deref()
        .ok_or_else(|| invalid(anyhow!("a model transport is required (--vlm recorded:<dir> or --vlm http:<url>)")))?;
    spec.parse::<Transport>().map_err(invalid)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T, depth: usize) -> Result<(), Failure> {
    let text = jsonfmt::to_string(value, depth).map_err(invalid)?;
    std::fs::write(path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(invalid)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(invalid)?;
    serde_json::from_str(&text)
        .with_context(|| format!("cannot parse {}", path.display()))
        .map_err(invalid)
}

fn load(path: &Path) -> Result<Dataset, Failure> {
    demos::load(path).map_err(|e| invalid(anyhow!("{}: {e}", path.display())))
}

fn save(ds: &Dataset, path: &Path) -> Result<(), Failure> {
    demos::save(ds, path).map_err(|e| Failure {
        code: PIPELINE,
        err: anyhow!("cannot write {}: {e}", path.display()),
    })
}

fn print_report(report: &GenerationReport) {
    for s in &report.stages {
        eprintln!(
            "{:?}: {}/{} kept from {} attempts ({:.1}%); planner-infeasible {}, execution-collision {}, predicate-failed {}; {:.1}s",
            s.stage,
            s.successes,
            s.target,
            s.attempts,
            100.0 * s.success_rate(),
            s.failures.planner_infeasible,
            s.failures.execution_collision,
            s.failures.predicate_failed,
            report.wall_time_s
        );
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.cmd {
        Cmd::Label(io) => {
            let raw = load(&io.input)?;
            let cfg = config(&cli, Some(&raw.metadata.task))?;
            let task = cfg.task()?;
            let labeled = label_dataset(&raw, &task, &transport(&cfg)?, cfg.upsample)?;
            save(&labeled, &io.output)?;
            eprintln!("labeled {} demonstrations", labeled.len());
        }
        Cmd::Augment1 { io, plan, report } => {
            let src = load(&io.input)?;
            let cfg = config(&cli, Some(&src.metadata.task))?;
            let plan = match (plan, cfg.use_vlm) {
                (_, false) => None,
                (Some(p), true) => {
                    let plan: ConstraintPlan = read_json(p)?;
                    let v = validate_plan(&plan);
                    if !v.is_empty() {
                        return Err(invalid(anyhow!("invalid constraint plan: {v:?}")));
                    }
                    Some(plan)
                }
                (None, true) => Some(fetch_plan(&cfg.task()?, &transport(&cfg)?)?),
            };
            let (out, rep) = stage1(&src, &cfg, plan)?;
            save(&out, &io.output)?;
            print_report(&rep);
            if let Some(p) = report {
                write_json(p, &rep, 3)?;
            }
        }
        Cmd::Augment2 { io, report } => {
            let s1 = load(&io.input)?;
            let cfg = config(&cli, Some(&s1.metadata.task))?;
            let (out, rep) = stage2(&s1, &cfg)?;
            save(&out, &io.output)?;
            print_report(&rep);
            if let Some(p) = report {
                write_json(p, &rep, 3)?;
            }
        }
        Cmd::Plan { problem, dump } => {
            let problem: PlanProblem = read_json(problem)?;
            let result = replan(&problem).map_err(|e| match e {
                PlanError::Validation(_) | PlanError::NoFreePoses => invalid(e),
            })?;
            let c = &result.costs;
            out!(
                "feasible: {}  converged: {}  iterations: {}  run: {}",
                result.feasible, result.converged, result.iterations, result.run
            );
            out!(
                "cost total {:.6}  semantic {:.6}  collision {:.6}  smoothness {:.6}  ik {:.6}",
                c.total, c.semantic, c.collision, c.smoothness, c.ik
            );
            if let Some(p) = dump {
                write_json(p, &serde_json::json!({ "problem": problem, "result": result }), 3)?;
            }
        }
        Cmd::Validate { input, dump_trace } => {
            let ds = load(input)?;
            let cfg = config(&cli, Some(&ds.metadata.task))?;
            let task = cfg.task()?;
            let summary = validate_dataset(&ds, &task)?;
            if let Some(dir) = dump_trace {
                std::fs::create_dir_all(dir).map_err(invalid)?;
                for d in ds.demonstrations.iter().filter(|d| summary.failed.contains(&d.id)) {
                    write_json(&dir.join(format!("{}.trace.json", d.id)), &execute(&d.poses, &d.scene), 3)?;
                }
            }
            out!("{} checked, {} failed", summary.checked, summary.failed.len());
            if !summary.failed.is_empty() {
                for id in &summary.failed {
                    out!("  failed: {id}");
                }
                return Err(invalid(anyhow!("{} demonstrations fail on re-execution", summary.failed.len())));
            }
        }
        Cmd::Report { input, generation, json } => {
            let ds = load(input)?;
            let cfg = config(&cli, Some(&ds.metadata.task))?;
            let gen: Option<GenerationReport> = generation.as_deref().map(read_json).transpose()?;
            let stats = dataset_stats(&ds, gen.as_ref(), &cfg.distance);
            out!("{}", render_stats(&stats).trim_end());
            if let Some(p) = json {
                write_json(p, &stats, 2)?;
            }
        }
        Cmd::Keypoints {
            map,
            task,
            clusters,
            top_fraction,
            bandwidth,
            output,
        } => {
            let cfg = config(&cli, None)?;
            let task = match task {
                Some(t) => builtin(t).map_err(invalid)?,
                None => cfg.task()?,
            };
            let map = load_response_map(map).map_err(invalid)?;
            let ex = ExtractionConfig {
                num_clusters: *clusters,
                top_fraction: *top_fraction,
                merge_bandwidth: *bandwidth,
                workspace: task.nominal.workspace,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let found = extract_detailed(&map, &ex, &mut rng).map_err(invalid)?;
            let text = jsonfmt::to_string(&found, 2).map_err(invalid)?;
            match output {
                Some(p) => std::fs::write(p, text).map_err(invalid)?,
                None => out!("{text}"),
            }
        }
        Cmd::Synth {
            task,
            variant,
            count,
            output,
            record,
        } => {
            let cfg = config(&cli, None)?;
            let task = match task {
                Some(t) => builtin(t).map_err(invalid)?,
                None => cfg.task()?,
            };
            let raw = expert_sources(&task, *variant, *count, cfg.seed)?;
            save(&raw, output)?;
            if let Some(dir) = record {
                let n = record_expert_responses(&task, &raw, &RecordedTransport::new(dir)).map_err(|e| Failure {
                    code: PIPELINE,
                    err: e.into(),
                })?;
                eprintln!("wrote {n} recordings to {}", dir.display());
            }
            eprintln!("wrote {} source demonstrations to {}", raw.len(), output.display());
        }
    }
    Ok(())
}

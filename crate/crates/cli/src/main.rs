use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use est_lora::energy::{energy_report, EnergyMethod};
use est_lora::export::{bake_all, render_heatmap};
use est_lora::gate::build_plan;
use est_lora::util::write_atomic;
use est_lora::{
    align, bake, discrepancy, load_adapter, load_embedding, stats, write_adapter, AlignedPair, DiscrepancyScore, Error, GateConfig,
    Parallelism, Plan, Role, SelectionSchedule, Selector,
};

mod config;

use config::FileConfig;

const EXIT_INPUT: u8 = 2;
const EXIT_IO: u8 = 3;

/// Plan per-layer, per-step selection between a subject LoRA and a style LoRA.
#[derive(Debug, Parser)]
#[command(name = "est-lora", version, about)]
struct Cli {
    /// TOML file with [gate] and [io] tables; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute per-layer energies of the shared layers and write them as JSON.
    Analyze {
        #[command(flatten)]
        pair: PairArgs,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_method, default_value = "gram")]
        method: EnergyMethod,
    },
    /// Print the style similarity score D as JSON.
    Discrepancy {
        #[command(flatten)]
        d: DiscrepancyArgs,
    },
    /// Produce a selection schedule.
    Plan {
        #[command(flatten)]
        pair: PairArgs,
        #[command(flatten)]
        gate: GateArgs,
        #[command(flatten)]
        d: DiscrepancyArgs,
        /// Schedule JSON output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional CSV copy of the choice matrix.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render a schedule as a binary PGM heatmap.
    Render {
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print schedule statistics as JSON.
    Stats {
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the adapter selected at one step.
    Bake {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        step: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one adapter per step plus manifest.json.
    BakeAll {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, Args)]
struct PairArgs {
    /// Subject (content) LoRA safetensors file.
    #[arg(long)]
    content: Option<PathBuf>,
    /// Style LoRA safetensors file.
    #[arg(long)]
    style: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiscrepancyArgs {
    /// Use this D directly instead of embeddings.
    #[arg(long, conflicts_with_all = ["style_emb", "content_emb"])]
    d: Option<f64>,
    /// Embedding JSON of the style-only preview.
    #[arg(long, requires = "content_emb")]
    style_emb: Option<PathBuf>,
    /// Embedding JSON of the subject-only preview.
    #[arg(long, requires = "style_emb")]
    content_emb: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GateArgs {
    /// Time-term weight α [default: 1.5].
    #[arg(long)]
    alpha: Option<f64>,
    /// Number of denoising steps T [default: 50].
    #[arg(long)]
    steps: Option<usize>,
    /// est | klora_like | direct_merge | style_only | subject_only | energy_time | style_time [default: est].
    #[arg(long)]
    selector: Option<String>,
    /// Fraction of update elements kept by Top-K selectors [default: 0.05].
    #[arg(long)]
    k_fraction: Option<f64>,
    /// Content weight for direct_merge [default: 1.0].
    #[arg(long)]
    w_content: Option<f64>,
    /// Style weight for direct_merge [default: 1.0].
    #[arg(long)]
    w_style: Option<f64>,
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn parse_method(s: &str) -> Result<EnergyMethod, String> {
    match s {
        "gram" => Ok(EnergyMethod::Gram),
        "direct" => Ok(EnergyMethod::Direct),
        "svd_oracle" => Ok(EnergyMethod::SvdOracle),
        other => Err(format!("unknown method `{other}` (gram | direct | svd_oracle)")),
    }
}

fn required(flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| file.clone())
        .ok_or_else(|| Failure::Input(format!("missing --{name} (flag or [io] {} in the config file)", name.replace('-', "_"))))
}

fn require_file(path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Failure::Input(format!("{}: no such file", path.display())).into_err()
    }
}

impl Failure {
    fn into_err<T>(self) -> CliResult<T> {
        Err(self)
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> CliResult {
    match out {
        Some(p) => Ok(write_atomic(p, bytes)?),
        None => {
            println!("{}", String::from_utf8_lossy(bytes));
            Ok(())
        }
    }
}

fn load_pair(args: PairArgs, file: &FileConfig) -> CliResult<AlignedPair> {
    let content = required(args.content, &file.io.content, "content")?;
    let style = required(args.style, &file.io.style, "style")?;
    require_file(&content)?;
    require_file(&style)?;
    let pair = align(load_adapter(&content, Role::Content)?, load_adapter(&style, Role::Style)?)?;
    for key in pair.skipped_keys() {
        log::warn!("skipping layer present in only one adapter: {key}");
    }
    log::info!("{} shared layers", pair.len());
    Ok(pair)
}

fn resolve_d(args: DiscrepancyArgs, file: &FileConfig) -> CliResult<Option<DiscrepancyScore>> {
    if let Some(d) = args.d {
        return Ok(Some(DiscrepancyScore::given(d)?));
    }
    let style = args.style_emb.or_else(|| file.io.style_emb.clone());
    let content = args.content_emb.or_else(|| file.io.content_emb.clone());
    match (style, content) {
        (Some(s), Some(c)) => Ok(Some(discrepancy(&load_embedding(s)?, &load_embedding(c)?)?)),
        (None, None) => file.gate.d.map(DiscrepancyScore::given).transpose().map_err(Failure::from),
        _ => Failure::Input("--style-emb and --content-emb must be given together".into()).into_err(),
    }
}

fn gate_config(args: GateArgs, d: Option<&DiscrepancyScore>, file: &FileConfig) -> CliResult<GateConfig> {
    let defaults = GateConfig::default();
    let g = &file.gate;
    let selector: Selector = match args.selector.or_else(|| g.selector.clone()) {
        Some(s) => s.parse()?,
        None => defaults.selector,
    };
    let d_score = match d {
        Some(score) => score.d,
        None if selector.uses_discrepancy() => {
            return Failure::Input(format!("selector {selector} needs D: pass --d or --style-emb/--content-emb")).into_err()
        }
        None => defaults.d_score,
    };
    let weights = g.direct_weights.unwrap_or(defaults.direct_weights);
    let cfg = GateConfig {
        alpha: args.alpha.or(g.alpha).unwrap_or(defaults.alpha),
        steps: args.steps.or(g.steps).unwrap_or(defaults.steps),
        d_score,
        selector,
        direct_weights: (args.w_content.unwrap_or(weights.0), args.w_style.unwrap_or(weights.1)),
        k_fraction: args.k_fraction.or(g.k_fraction).unwrap_or(defaults.k_fraction),
        ..defaults
    };
    cfg.validate()?;
    Ok(cfg)
}

fn read_schedule(flag: Option<PathBuf>, file: &FileConfig) -> CliResult<SelectionSchedule> {
    let path = required(flag, &file.io.schedule, "schedule")?;
    require_file(&path)?;
    let bytes = est_lora::util::read_file(&path)?;
    Ok(SelectionSchedule::from_json(&bytes)?)
}

fn run(cli: Cli) -> CliResult {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p).map_err(Failure::Input)?,
        None => FileConfig::default(),
    };

    match cli.command {
        Command::Analyze { pair, out, method } => {
            let out = out.or_else(|| file.io.out.clone());
            let pair = load_pair(pair, &file)?;
            let report = energy_report(&pair, method)?;
            emit(out.as_deref(), &report.to_json()?)
        }
        Command::Discrepancy { d } => {
            let given = d.d.is_some();
            let score = resolve_d(d, &file)?
                .ok_or_else(|| Failure::Input("pass --d or both --style-emb and --content-emb".into()))?;
            let json = if given {
                serde_json::json!({ "d": score.d })
            } else {
                serde_json::json!({ "d": score.d, "raw_sq_distance": score.raw_sq_distance })
            };
            println!("{json}");
            Ok(())
        }
        Command::Plan { pair, gate, d, out, csv } => {
            let out = out.or_else(|| file.io.out.clone());
            let csv = csv.or_else(|| file.io.csv.clone());
            let score = resolve_d(d, &file)?;
            let cfg = gate_config(gate, score.as_ref(), &file)?;
            let pair = load_pair(pair, &file)?;
            let report = energy_report(&pair, EnergyMethod::Gram)?;
            let plan = build_plan(&pair, &report, &cfg, Parallelism::default())?;
            if let (Some(csv), Plan::Schedule(s)) = (&csv, &plan) {
                write_atomic(csv, &s.to_csv()?)?;
            } else if csv.is_some() {
                log::warn!("--csv ignored: {} produces a merge plan, not a schedule", cfg.selector);
            }
            emit(out.as_deref(), &plan.to_json()?)
        }
        Command::Render { schedule, out } => {
            let out = required(out, &file.io.out, "out")?;
            let s = read_schedule(schedule, &file)?;
            Ok(render_heatmap(&s, out)?)
        }
        Command::Stats { schedule, out } => {
            let out = out.or_else(|| file.io.out.clone());
            let s = read_schedule(schedule, &file)?;
            emit(out.as_deref(), &serde_json::to_vec(&stats(&s)).map_err(Error::from)?)
        }
        Command::Bake { pair, schedule, step, out } => {
            let out = required(out, &file.io.out, "out")?;
            let s = read_schedule(schedule, &file)?;
            let pair = load_pair(pair, &file)?;
            Ok(write_adapter(&bake(&pair, &s, step)?, out)?)
        }
        Command::BakeAll {
            pair,
            schedule,
            out_dir,
            force,
        } => {
            let out_dir = required(out_dir, &file.io.out_dir, "out-dir")?;
            let s = read_schedule(schedule, &file)?;
            let pair = load_pair(pair, &file)?;
            let manifest = bake_all(&pair, &s, &out_dir, force)?;
            log::info!("wrote {} step adapters to {}", manifest.files.len(), out_dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EST_LORA_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_IO)
        }
    }
}

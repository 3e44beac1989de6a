use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use opengc::condense::condense;
use opengc::config::{RunConfig, SPLIT_RATIOS};
use opengc::datagen::{generate_drift_sbm, Preset};
use opengc::graph::make_splits;
use opengc::io::{load_sequence, write_dataset};
use opengc::openset::{evaluate_sequence, Metrics, OpensetMode};
use opengc::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "opengc",
    version,
    about = "Open-world graph condensation and open-set evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic evolving-graph dataset.
    Generate {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Condense one task of a dataset.
    Condense {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        task: Option<usize>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory [default: <data>/condensed_t<task>]
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Extra `key=value` overrides, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the sequential open-set evaluation and write metrics.json.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "from-task")]
        from_task: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        openset: Option<String>,
        /// Metrics file [default: <data>/metrics.json]
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Render a metrics file.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Tsv)]
        format: Format,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Format {
    Tsv,
    Json,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn load_config(path: Option<&Path>) -> opengc::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply_overrides(cfg: &mut RunConfig, overrides: &[String]) -> opengc::Result<()> {
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

fn require_seed(cfg: &RunConfig) -> opengc::Result<()> {
    if cfg.has_seed() {
        Ok(())
    } else {
        Err(Error::Config(
            "--seed is required (or `seed` in the config file)".into(),
        ))
    }
}

fn require_data(cfg: &RunConfig) -> opengc::Result<PathBuf> {
    cfg.data
        .clone()
        .ok_or_else(|| Error::Config("--data is required (or `data` in the config file)".into()))
}

/// Sizes the global rayon pool from `OPENGC_THREADS`, falling back to the
/// configured thread count.
fn init_threads(cfg: &RunConfig) -> opengc::Result<()> {
    let threads = match std::env::var("OPENGC_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("OPENGC_THREADS must be a positive integer, got `{v}`")))?,
        Err(_) => cfg.threads,
    };
    // a second initialization in the same process is harmless
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn run(cmd: Command) -> opengc::Result<()> {
    match cmd {
        Command::Generate { preset, out, seed } => {
            let preset: Preset = preset.parse()?;
            let seq = generate_drift_sbm(&preset.params(seed))?;
            write_dataset(&out, &seq)?;
            println!(
                "wrote {} tasks, {} nodes, {} classes to {}",
                seq.len(),
                seq.last().num_nodes(),
                seq.last().num_classes,
                out.display()
            );
        }
        Command::Condense {
            data,
            task,
            ratio,
            config,
            out,
            seed,
            overrides,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(d) = data {
                cfg.data = Some(d);
            }
            if let Some(t) = task {
                cfg.task = Some(t);
            }
            if let Some(r) = ratio {
                cfg.condense.ratio = r;
            }
            if let Some(o) = out {
                cfg.out = Some(o);
            }
            if let Some(s) = seed {
                cfg.set("seed", &s.to_string())?;
            }
            apply_overrides(&mut cfg, &overrides)?;
            require_seed(&cfg)?;
            let data = require_data(&cfg)?;
            let task = cfg.task.ok_or_else(|| Error::Config("--task is required".into()))?;
            cfg.validate()?;
            init_threads(&cfg)?;

            let seq = load_sequence(&data)?;
            if task > seq.len() {
                return Err(Error::Config(format!("task {task} outside 1..={}", seq.len())));
            }
            let splits = make_splits(&seq, SPLIT_RATIOS, cfg.seeds().split_seed)?;
            let (graph, report) = condense(&seq, &splits, task, &cfg.condense)?;
            let out = cfg
                .out
                .clone()
                .unwrap_or_else(|| data.join(format!("condensed_t{task}")));
            graph.save(&out)?;
            println!(
                "condensed task {task}: {} -> {} nodes after {} iterations (best validation accuracy {}) into {}",
                graph.meta.original_nodes,
                graph.meta.num_nodes,
                report.iterations,
                report.best_val_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
                out.display()
            );
        }
        Command::Evaluate {
            data,
            from_task,
            config,
            openset,
            out,
            seed,
            overrides,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(d) = data {
                cfg.data = Some(d);
            }
            if let Some(t) = from_task {
                cfg.from_task = t;
            }
            if let Some(m) = openset {
                cfg.openset = m.parse::<OpensetMode>()?;
            }
            if let Some(o) = out {
                cfg.out = Some(o);
            }
            if let Some(s) = seed {
                cfg.set("seed", &s.to_string())?;
            }
            apply_overrides(&mut cfg, &overrides)?;
            require_seed(&cfg)?;
            let data = require_data(&cfg)?;
            cfg.validate()?;
            init_threads(&cfg)?;

            let seq = load_sequence(&data)?;
            if cfg.from_task > seq.len() {
                return Err(Error::Config(format!(
                    "from-task {} outside 1..={}",
                    cfg.from_task,
                    seq.len()
                )));
            }
            let splits = make_splits(&seq, SPLIT_RATIOS, cfg.seeds().split_seed)?;
            let (matrix, _) = evaluate_sequence(&seq, &splits, &cfg.eval_config())?;
            let metrics = Metrics::new(&matrix, cfg.openset, cfg.fingerprint(), cfg.seeds())?;
            let out = cfg.out.clone().unwrap_or_else(|| data.join("metrics.json"));
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::Io {
                    path: parent.to_path_buf(),
                    source: e,
                })?;
            }
            fs::write(&out, metrics.to_json()).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            println!(
                "mAP {:.6} over {} tasks; metrics written to {}",
                metrics.map,
                matrix.size(),
                out.display()
            );
        }
        Command::Report { metrics, format } => {
            let text = fs::read_to_string(&metrics).map_err(|e| Error::Io {
                path: metrics.clone(),
                source: e,
            })?;
            let m = Metrics::from_json(&text)?;
            // validates the matrix shape
            m.matrix()?;
            match format {
                Format::Tsv => print!("{}", m.to_tsv()),
                Format::Json => print!("{}", m.to_json()),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

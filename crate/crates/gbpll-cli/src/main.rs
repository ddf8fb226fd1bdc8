//! Batch experiment CLI: synthesize datasets, train, evaluate, and inspect
//! granular-ball state. Every subcommand is a pure function of its flags and
//! input files; outputs are bit-reproducible per seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gbpll::data::{load_dataset, save_dataset, synth_longtail, LongTailSpec};
use gbpll::error::Error;
use gbpll::evalrep::{
    comparison_table, disambiguation_rate, evaluate, load_report, prior_error, write_report,
};
use gbpll::gbgraph::build_graph;
use gbpll::gbspace::build_gb_space;
use gbpll::model::forward;
use gbpll::trainer::{
    load_state, parse_train_config, render_train_report, save_state, train_with_diagnostics,
    TrainConfig,
};
use gbpll::Result;

#[derive(Parser)]
#[command(
    name = "gbpll",
    about = "Granular-ball partial-label learning experiments",
    arg_required_else_help = true
)]
struct Cli {
    /// Upper bound on worker threads (falls back to GBPLL_THREADS, then 1).
    /// All current kernels are single-threaded for bit-determinism; the cap
    /// is validated and accepted for forward compatibility.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a long-tailed partially-labeled Gaussian-blob dataset.
    Synth {
        /// Number of classes.
        #[arg(long)]
        classes: usize,
        /// Largest class size; later classes shrink geometrically.
        #[arg(long)]
        max_count: usize,
        /// Imbalance ratio: largest class count over smallest.
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Probability for each wrong label to join a candidate set.
        #[arg(long, default_value_t = 0.0)]
        psi: f64,
        /// Feature dimension (at least 2).
        #[arg(long, default_value_t = 2)]
        dim: usize,
        /// Master seed for blob placement and candidate corruption.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Distance between adjacent class centers.
        #[arg(long, default_value_t = 6.0)]
        separation: f64,
        /// Standard deviation of per-class Gaussian noise.
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        /// Dataset file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset file and write a checkpoint plus a training report.
    Train {
        /// Dataset file produced by `synth` (or the same format).
        #[arg(long)]
        data: PathBuf,
        /// Optional key=value config file; defaults apply where absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Inline config overrides, repeatable (e.g. --set epochs=50).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Training-report file (default: <out>.report).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Record per-epoch train accuracy against the dataset's hidden
        /// labels (diagnostic only; never influences training).
        #[arg(long)]
        diagnostics: bool,
    },
    /// Score a checkpoint on a dataset and write an evaluation report.
    Eval {
        /// Checkpoint file from `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file to score against its true labels.
        #[arg(long)]
        data: PathBuf,
        /// Evaluation-report file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump granular-ball, graph, and confidence state for a checkpoint.
    InspectBalls {
        /// Checkpoint file from `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose samples are partitioned into balls.
        #[arg(long)]
        data: PathBuf,
        /// Also print reconstruction edges (`edge i j w`, positive weights)
        /// and inter-ball edges (`balledge a b w`).
        #[arg(long)]
        graph: bool,
        /// Also print the stored per-sample confidence rows.
        #[arg(long)]
        confidence: bool,
    },
    /// Render a comparison table across evaluation reports.
    Report {
        /// Evaluation-report files; columns are named by file stem.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 1 = usage error, 2 = data error, 3 = numerical abort.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidParam(_) => 1,
        Error::Format { .. } | Error::Io { .. } | Error::Shape(_) => 2,
        Error::NonFinite { .. } => 3,
    }
}

fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    let value = match flag {
        Some(v) => v,
        None => match std::env::var("GBPLL_THREADS") {
            Ok(s) => s.trim().parse().map_err(|_| {
                Error::invalid(format!("GBPLL_THREADS must be a positive integer, got `{s}`"))
            })?,
            Err(std::env::VarError::NotPresent) => 1,
            Err(std::env::VarError::NotUnicode(_)) => {
                return Err(Error::invalid("GBPLL_THREADS is not valid UTF-8"))
            }
        },
    };
    if value == 0 {
        return Err(Error::invalid("--threads must be at least 1"));
    }
    Ok(value)
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes to stdout, treating a closed pipe (e.g. `| head`) as success.
fn emit(text: &str) {
    use std::io::Write as _;
    let mut out = std::io::stdout().lock();
    let outcome = out.write_all(text.as_bytes()).and_then(|()| out.flush());
    if let Err(e) = outcome {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: cannot write to stdout: {e}");
        std::process::exit(2);
    }
}

fn run(cli: Cli) -> Result<()> {
    let _threads = resolve_threads(cli.threads)?;
    match cli.command {
        Command::Synth {
            classes,
            max_count,
            gamma,
            psi,
            dim,
            seed,
            separation,
            noise,
            out,
        } => {
            let spec = LongTailSpec {
                class_count: classes,
                max_count,
                imbalance_ratio: gamma,
                flip_prob: psi,
                seed,
            };
            let ds = synth_longtail(&spec, dim, separation, noise)?;
            save_dataset(&ds, &out)?;
            emit(&format!(
                "wrote {}: {} samples, {} classes, dim {}\n",
                out.display(),
                ds.sample_count(),
                ds.class_count(),
                ds.feature_dim()
            ));
            Ok(())
        }
        Command::Train {
            data,
            config,
            set,
            out,
            report,
            diagnostics,
        } => {
            let ds = load_dataset(&data)?;
            let mut cfg = match &config {
                Some(path) => parse_train_config(&read_to_string(path)?)?,
                None => TrainConfig::default(),
            };
            for kv in &set {
                let (key, value) = kv.split_once('=').ok_or_else(|| {
                    Error::invalid(format!("--set expects KEY=VALUE, got `{kv}`"))
                })?;
                cfg.set_key(key.trim(), value.trim())?;
            }
            cfg.validate()?;
            let labels = diagnostics.then_some(ds.true_labels.as_slice());
            let outcome = train_with_diagnostics(ds.train_view(), &cfg, labels)?;
            let mut state = outcome.state;
            state.class_counts = Some(ds.class_counts());
            save_state(&state, &out)?;
            let report_path = report.unwrap_or_else(|| suffixed(&out, ".report"));
            fs::write(&report_path, render_train_report(&outcome.report))
                .map_err(|e| Error::io(&report_path, e))?;
            emit(&format!(
                "wrote {} and {}\n",
                out.display(),
                report_path.display()
            ));
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            out,
        } => {
            let state = load_state(&checkpoint)?;
            let ds = load_dataset(&data)?;
            let counts = state.class_counts.as_deref().ok_or_else(|| {
                Error::format(
                    &checkpoint,
                    "checkpoint lacks training class counts; re-train with this tool",
                )
            })?;
            let mut report = evaluate(&state.params, &ds, counts)?;
            if let Some(conf) = &state.confidence {
                if conf.sample_count() == ds.sample_count() {
                    report.disambiguation_rate =
                        Some(disambiguation_rate(conf, &ds.true_labels)?);
                }
            }
            report.prior_error = Some(prior_error(&state.prior, counts)?);
            write_report(&report, &out)?;
            emit(&format!("wrote {}\n", out.display()));
            Ok(())
        }
        Command::InspectBalls {
            checkpoint,
            data,
            graph,
            confidence,
        } => {
            let state = load_state(&checkpoint)?;
            let ds = load_dataset(&data)?;
            let (hidden, _) = forward(&state.params, ds.features.view())?;
            let space = build_gb_space(hidden.view(), state.seed)?;
            let mut text = String::new();
            for (id, ball) in space.balls.iter().enumerate() {
                let center_norm = ball.center.dot(&ball.center).sqrt();
                let tag = if ball.degenerate { " degenerate" } else { "" };
                let _ = writeln!(
                    text,
                    "ball {id} size={} radius={:.6} center_norm={center_norm:.6}{tag}",
                    ball.members.len(),
                    ball.radius
                );
            }
            if graph {
                let g = build_graph(&space, hidden.view())?;
                for (i, rec) in g.recon.iter().enumerate() {
                    for (k, &j) in rec.neighbors.iter().enumerate() {
                        if rec.weights[k] > 0.0 {
                            let _ = writeln!(text, "edge {i} {j} {:.6}", rec.weights[k]);
                        }
                    }
                }
                for (&(a, b), &w) in &g.inter_edges {
                    let _ = writeln!(text, "balledge {a} {b} {w:.6}");
                }
            }
            if confidence {
                let conf = state.confidence.as_ref().ok_or_else(|| {
                    Error::format(&checkpoint, "checkpoint stores no confidence matrix")
                })?;
                if conf.sample_count() != ds.sample_count() {
                    return Err(Error::shape(format!(
                        "confidence covers {} samples, dataset has {}",
                        conf.sample_count(),
                        ds.sample_count()
                    )));
                }
                for (i, row) in conf.values.rows().into_iter().enumerate() {
                    let cells: Vec<String> =
                        row.iter().map(|v| format!("{v:.6}")).collect();
                    let _ = writeln!(text, "confidence {i} {}", cells.join(" "));
                }
            }
            emit(&text);
            Ok(())
        }
        Command::Report { runs } => {
            let mut names = Vec::new();
            let mut reports = Vec::new();
            for path in &runs {
                names.push(
                    path.file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| path.display().to_string()),
                );
                reports.push(load_report(path)?);
            }
            emit(&comparison_table(&names, &reports));
            Ok(())
        }
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(suffix);
    PathBuf::from(os)
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ldlt_core::lmi::{self, Verdict};
use ldlt_core::network::ModelKind;
use ldlt_core::par::Execution;
use ldlt_core::pipeline::{self, metrics, CsvOptions, RunConfig};

const EXIT_REFUTED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "ldlt", version, about = "Train and certify Lipschitz-bounded networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on one cross-validation fold and save the model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_kind)]
        kind: ModelKind,
        #[arg(long, default_value_t = 1.0)]
        lipschitz: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with `[model]` and `[train]` tables.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Held-out fold (0-based).
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Write the per-epoch history here as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Rebuild the Lipschitz LMI from a model file and check it.
    Verify {
        #[arg(long)]
        model: PathBuf,
        /// Write the assembled LMI as `i,j,value` CSV.
        #[arg(long)]
        dump_lmi: Option<PathBuf>,
    },
    /// Clean and certified accuracy of a model on a dataset.
    Certify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = parse_radius,
              default_value = "36/255,72/255,108/255,255/255")]
        radii: Vec<f64>,
    },
    /// Four-fold cross-validation over every CSV in a directory.
    EvalAll {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        lipschitz: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', value_parser = parse_kind, default_value = "residual,feedforward")]
        kinds: Vec<ModelKind>,
        /// Run folds one after another.
        #[arg(long)]
        sequential: bool,
    },
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: ldlt_core::Error| e.to_string())
}

fn parse_radius(s: &str) -> Result<f64, String> {
    metrics::parse_radius(s).ok_or_else(|| format!("invalid radius {s:?}"))
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ldlt_core::Error> for Failure {
    fn from(e: ldlt_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn require_file(p: &Path) -> Result<(), Failure> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("no such file: {}", p.display())))
    }
}

fn load_config(p: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(p) = p else {
        return Ok(RunConfig::default());
    };
    require_file(p)?;
    let text = std::fs::read_to_string(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
    let cfg: RunConfig = toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
    cfg.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn run(cmd: Command) -> Result<u8, Failure> {
    match cmd {
        Command::Train {
            data,
            kind,
            lipschitz,
            seed,
            out,
            config,
            fold,
            history,
        } => {
            require_file(&data)?;
            let cfg = load_config(config.as_deref())?;
            let opts = CsvOptions {
                seed,
                ..CsvOptions::default()
            };
            let ds = pipeline::load_csv(&data, &opts)?;
            if fold >= ds.num_folds {
                return Err(Failure::Usage(format!("--fold must be below {}", ds.num_folds)));
            }
            let run = pipeline::train_fold(&ds, fold, kind, lipschitz, seed, &cfg)?;
            pipeline::save_model(&out, &run.file)?;
            if let Some(h) = history {
                run.history.write_csv(&h)?;
            }
            let v = run.file.model.verify()?;
            println!("dataset: {} ({} rows, {} classes)", ds.name, ds.len(), ds.num_classes());
            println!("model: {} width {} depth {}", kind.label(), run.file.model.spec.width, run.file.model.spec.depth);
            println!(
                "epochs: {} (best {} with val_acc {:.4})",
                run.history.records.len(),
                run.history.best_epoch,
                run.history.best_val_acc
            );
            print_report(&run.report);
            println!("verdict: {}", if v.is_certified() { "Certified" } else { "Refuted" });
            println!("saved: {}", out.display());
            Ok(0)
        }
        Command::Verify { model, dump_lmi } => {
            require_file(&model)?;
            let file = pipeline::load_model(&model)?;
            let m = &file.model;
            if let Some(path) = dump_lmi {
                let problems = m.lmi_problems();
                let multi = problems.len() > 1;
                for (k, prob) in problems.iter().enumerate() {
                    let mat = lmi::assemble_residual_lmi(prob)?;
                    let target = if multi { suffixed(&path, k + 1) } else { path.clone() };
                    lmi::dump_matrix(&mat, &target)?;
                }
            }
            let v = m.verify()?;
            for (k, c) in v.blocks.iter().enumerate() {
                let verdict = match c.verdict {
                    Verdict::Certified => "Certified",
                    Verdict::Refuted => "Refuted",
                };
                match c.failing_block {
                    Some(b) => println!(
                        "block {}: {verdict} (pivot {b} fails, min eigenvalue {:.6e})",
                        k + 1,
                        c.min_block_eigenvalue
                    ),
                    None => println!("block {}: {verdict} (min eigenvalue {:.6e})", k + 1, c.min_block_eigenvalue),
                }
            }
            println!("projection norm: {:.12}", v.proj_norm);
            println!("head norm: {:.12}", v.head_norm);
            println!("lipschitz bound: {}", m.lipschitz_bound());
            println!("min block eigenvalue: {:.6e}", v.min_block_eigenvalue());
            if v.is_certified() {
                println!("verdict: Certified");
                Ok(0)
            } else {
                println!("verdict: Refuted");
                Ok(EXIT_REFUTED)
            }
        }
        Command::Certify { model, data, radii } => {
            require_file(&model)?;
            require_file(&data)?;
            let file = pipeline::load_model(&model)?;
            let ds = pipeline::load_csv(&data, &CsvOptions::default())?;
            let labels = if file.class_names.is_empty() {
                ds.labels.clone()
            } else {
                ds.relabel(&file.class_names)?
            };
            let x = match &file.standardization {
                Some(s) => s.apply(&ds.features)?,
                None => ds.features.clone(),
            };
            let report = pipeline::evaluate(&file.model, &x, &labels, &radii)?;
            println!("samples: {}", report.samples);
            print_report(&report);
            Ok(0)
        }
        Command::EvalAll {
            data_dir,
            out,
            config,
            lipschitz,
            seed,
            kinds,
            sequential,
        } => {
            if !data_dir.is_dir() {
                return Err(Failure::Usage(format!("no such directory: {}", data_dir.display())));
            }
            let cfg = load_config(config.as_deref())?;
            let exec = if sequential { Execution::Sequential } else { Execution::default() };
            let rows = pipeline::eval_all(&data_dir, &kinds, lipschitz, seed, &cfg, exec)?;
            pipeline::experiment::write_report(&out, &rows)?;
            for r in &rows {
                println!(
                    "{:<20} {:<7} clean {:.4}±{:.4} cert255 {:.4}",
                    r.dataset,
                    r.algorithm,
                    r.clean.0,
                    r.clean.1,
                    r.certified.last().map(|c| c.0).unwrap_or(f64::NAN)
                );
            }
            println!("report: {}", out.display());
            Ok(0)
        }
    }
}

fn print_report(r: &pipeline::CertificationReport) {
    println!("lipschitz bound: {}", r.lipschitz_bound);
    println!("clean accuracy: {:.4}", r.clean_accuracy);
    for (eps, acc) in r.radii.iter().zip(&r.certified) {
        println!("certified accuracy @ {:.6}: {:.4}", eps, acc);
    }
}

fn suffixed(path: &Path, k: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.block{k}.{}", ext.to_string_lossy()),
        None => format!("{stem}.block{k}"),
    };
    path.with_file_name(name)
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use mixnorm::checkpoint::Checkpoint;
use mixnorm::data::LabeledDataset;
use mixnorm::diagnostics::{run_gradcheck, Fault, DEFAULT_CONFIGS};
use mixnorm::eval::{embed, pca_project_2d};
use mixnorm::experiment::{
    evaluate_model, run_ablation, run_experiment, write_atomically, write_run_outputs,
    ExperimentConfig, Suite,
};
use mixnorm::numerics::RngStream;
use mixnorm::partition::{partition_distribution, PartitionPolicy};
use mixnorm::Error;

#[derive(Parser)]
#[command(name = "mixnorm", version, about = "Mix-normalization experiments on synthetic domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write checkpoint, metrics and report.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the config's target domain.
    Eval {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for eval_report.json; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an ablation suite over several seeds.
    Ablate {
        #[arg(long)]
        suite: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_CONFIGS)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Histogram of sampled partition shapes as CSV.
    PartitionStats {
        #[arg(long)]
        domains: usize,
        /// Defaults to domains - 1.
        #[arg(long)]
        max_group: Option<usize>,
        #[arg(long)]
        fixed_c: Option<usize>,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Embeddings and their 2-D projection for every split, as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(clap::Args)]
struct ConfigSource {
    /// JSON experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset instead of a config file.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    GradGammaSign,
}

/// Failure carrying its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteLoss { .. } | Error::NonFinite { .. } | Error::NonFiniteEvaluation { .. } => 3,
            Error::Config { .. } | Error::Io { .. } | Error::Json(_) | Error::Format(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

/// Precedence: config file or preset, then `MIXNORM_SEED`, then `--seed`.
fn load_config(source: &ConfigSource, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let cfg = match (&source.config, &source.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::default(),
    };
    let cfg = cfg.apply_env_seed()?;
    let cfg = match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(out: &Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf, Failure> {
    out.clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| usage("no output directory: pass --out or set output_dir"))
}

fn load_checkpoint(path: &Path) -> Result<mixnorm::Model32, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(Checkpoint::from_json(&text)?.to_model()?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { source, out, seed } => {
            let cfg = load_config(&source, seed)?;
            let dir = output_dir(&out, &cfg)?;
            let run = run_experiment(&cfg)?;
            write_run_outputs(&dir, &cfg, &run)?;
            let r = &run.report;
            println!(
                "{}: target_acc {:.4} map {:.4} cmc1 {:.4} -> {}",
                cfg.name,
                r.target_acc,
                r.map,
                r.cmc1,
                dir.display()
            );
        }
        Command::Eval {
            source,
            checkpoint,
            out,
            seed,
        } => {
            let cfg = load_config(&source, seed)?;
            let model = load_checkpoint(&checkpoint)?;
            let suite = cfg.data.build()?;
            let report = evaluate_model(&cfg.name, cfg.seed, &model, &suite, &[])?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| usage(e.to_string()))?;
            match out {
                Some(dir) => write_atomically(&dir, &[("eval_report.json", json)])?,
                None => println!("{json}"),
            }
        }
        Command::Ablate {
            suite,
            seeds,
            source,
            out,
        } => {
            let suite: Suite = suite.parse()?;
            let cfg = load_config(&source, None)?;
            if let Some(dir) = &out {
                fs::create_dir_all(dir)
                    .map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
            }
            let result = run_ablation(&cfg, suite, &seeds, out.as_deref())?;
            print!("{}", result.comparison_csv());
            println!();
            print!("{}", result.summary_csv());
        }
        Command::Gradcheck {
            configs,
            seed,
            inject_fault,
        } => {
            let fault = inject_fault.map(|f| match f {
                FaultArg::GradGammaSign => Fault::GradGammaSign,
            });
            let start = Instant::now();
            let report = run_gradcheck(seed, configs, fault)?;
            print!("{report}");
            println!("elapsed {:.2}s", start.elapsed().as_secs_f64());
            if !report.passed() {
                return Err(Failure {
                    code: 1,
                    message: format!("tolerance exceeded: {}", report.failing().join(", ")),
                });
            }
        }
        Command::PartitionStats {
            domains,
            max_group,
            fixed_c,
            trials,
            seed,
        } => {
            if trials == 0 {
                return Err(usage("--trials must be >= 1"));
            }
            let max_group = max_group.unwrap_or(domains.saturating_sub(1).max(1));
            let policy = PartitionPolicy::new(domains, max_group, fixed_c)?;
            let hist = partition_distribution(&policy, &mut RngStream::new(seed), trials)?;
            print!("{}", hist.to_csv());
        }
        Command::ExportEmbeddings {
            source,
            checkpoint,
            out,
            seed,
        } => {
            let cfg = load_config(&source, seed)?;
            let model = load_checkpoint(&checkpoint)?;
            let suite = cfg.data.build()?;
            let mut splits: Vec<(&str, &LabeledDataset)> =
                suite.sources.iter().map(|s| ("source", s)).collect();
            splits.push(("target", &suite.target));
            splits.push(("query", &suite.query));
            splits.push(("gallery", &suite.gallery));
            let csv = embeddings_csv(&model, &splits)?;
            match out {
                Some(path) => fs::write(&path, csv)
                    .map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn embeddings_csv(
    model: &mixnorm::Model32,
    splits: &[(&str, &LabeledDataset)],
) -> Result<String, Failure> {
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for (name, ds) in splits {
        let emb = embed(model, ds)?;
        for i in 0..ds.len() {
            rows.push((*name, ds.domain_ids[i], ds.class_ids[i], emb.row(i).to_vec()));
            all.extend(emb.row(i).iter().map(|&v| v as f64));
        }
    }
    let dim = rows.first().map_or(0, |r| r.3.len());
    let stacked = mixnorm::Tensor64::new(vec![rows.len(), dim], all)?;
    let proj = pca_project_2d(&stacked)?;
    if proj.degenerate {
        eprintln!("warning: embeddings have zero variance; projection is zero");
    }
    let mut out = String::from("split,domain_id,class_id,pc1,pc2");
    for j in 0..dim {
        out.push_str(&format!(",e{j}"));
    }
    out.push('\n');
    for (i, (split, d, c, e)) in rows.iter().enumerate() {
        let p = proj.coords.row(i);
        out.push_str(&format!("{split},{d},{c},{},{}", p[0], p[1]));
        for v in e {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

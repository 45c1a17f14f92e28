//! Command-line front end behind the `tdg` binary.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{load_spec, ExperimentConfig};
use crate::data::{generate_benchmark, leave_one_domain_out, split_train_val, MultiDomainDataset};
use crate::error::{Result, TdgError};
use crate::experiments::{
    emit_table, run_gradcheck, run_lodo, run_loss_ablation, run_single_source, sweep_lambda,
    MetricRow, MetricsTable, TableFormat, LAMBDA_SWEEP,
};
use crate::train::{evaluate, train, Arm, TrainedModel};
use crate::words::{default_pool, load_word_pool, DomainWordPool};

#[derive(Debug, Parser)]
#[command(name = "tdg", version, about = "Text-guided domain generalization on synthetic benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML file with [benchmark] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds; overrides the config.
    #[arg(long = "seeds", alias = "seed", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: TableFormat,
    /// Domain word list, one word per line; the bundled list by default.
    #[arg(long)]
    word_pool: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a benchmark and write it in the text format.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Bare benchmark spec TOML; takes precedence over --config.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train one model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file written by gen-data; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Hold this domain out and train on the rest.
        #[arg(long, conflicts_with = "sources")]
        target: Option<usize>,
        /// Train on exactly these domains.
        #[arg(long, value_delimiter = ',')]
        sources: Vec<usize>,
        #[arg(long)]
        arm: Option<Arm>,
    },
    /// Evaluate a checkpoint on held-out domains.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Domains to score; every domain the model did not train on by default.
        #[arg(long, value_delimiter = ',')]
        domains: Vec<usize>,
        /// Score the live weights instead of the EMA shadows.
        #[arg(long)]
        live: bool,
    },
    /// Leave-one-domain-out over the requested arms.
    Lodo {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "erm,text,tdg")]
        arms: Vec<Arm>,
    },
    /// Train on one domain, evaluate on every other.
    SingleSource {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "erm,text,tdg")]
        arms: Vec<Arm>,
    },
    /// Prompt-loss ablation: no text, alignment only, similarity only, both.
    AblateLosses {
        #[command(flatten)]
        common: Common,
    },
    /// TDG under leave-one-domain-out for several λ.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
    },
    /// Compare every analytic gradient with central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        Ok(cfg)
    }

    fn pool(&self) -> Result<DomainWordPool> {
        match &self.word_pool {
            Some(p) => load_word_pool(File::open(p)?),
            None => Ok(default_pool()),
        }
    }

    fn write(&self, bytes: &[u8]) -> Result<()> {
        match &self.out {
            Some(p) => {
                let mut f = BufWriter::new(File::create(p)?);
                f.write_all(bytes)?;
                f.flush()?;
            }
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(bytes)?;
                out.flush()?;
            }
        }
        Ok(())
    }

    fn emit(&self, table: &MetricsTable) -> Result<()> {
        let mut buf = Vec::new();
        emit_table(table, self.format, &mut buf)?;
        self.write(&buf)
    }
}

fn load_dataset(path: Option<&Path>, cfg: &ExperimentConfig) -> Result<MultiDomainDataset> {
    match path {
        Some(p) => MultiDomainDataset::read_text(BufReader::new(File::open(p)?)),
        None => generate_benchmark(&cfg.benchmark),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, spec } => {
            let mut spec = match &spec {
                Some(p) => load_spec(p)?,
                None => common.config()?.benchmark,
            };
            if let Some(&seed) = common.seeds.first() {
                spec.seed = seed;
            }
            common.write(generate_benchmark(&spec)?.to_text()?.as_bytes())
        }
        Command::Train {
            common,
            data,
            target,
            sources,
            arm,
        } => {
            let cfg = common.config()?;
            let ds = load_dataset(data.as_deref(), &cfg)?;
            let sources = match (target, sources.is_empty()) {
                (Some(t), _) => leave_one_domain_out(&ds, t)?.0,
                (None, false) => sources,
                (None, true) => {
                    return Err(TdgError::Config("train needs --target or --sources".into()))
                }
            };
            let mut tc = cfg.train.clone();
            tc.seed = cfg.seeds[0];
            if let Some(a) = arm {
                tc.arm = a;
            }
            let split = split_train_val(&ds, &sources, tc.seed)?;
            let model = train(&tc, &ds, &split, Some(&common.pool()?))?;
            common.write(model.to_json()?.as_bytes())
        }
        Command::Eval {
            common,
            ckpt,
            data,
            domains,
            live,
        } => {
            let cfg = common.config()?;
            let model = TrainedModel::from_json(&std::fs::read_to_string(&ckpt)?)?;
            let ds = load_dataset(data.as_deref(), &cfg)?;
            let domains = if domains.is_empty() {
                (0..ds.num_domains())
                    .filter(|d| !model.sources.contains(d))
                    .collect()
            } else {
                domains
            };
            let source = model
                .sources
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("+");
            let rows = domains
                .iter()
                .map(|&d| {
                    Ok(MetricRow {
                        arm: model.config.arm.label().to_string(),
                        protocol: "eval".to_string(),
                        source: source.clone(),
                        target: d.to_string(),
                        seed: model.config.seed.to_string(),
                        accuracy: evaluate(&model, &ds, d, !live)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            common.emit(&MetricsTable::new(rows))
        }
        Command::Lodo { common, arms } => {
            let cfg = common.config()?;
            let t = run_lodo(&cfg.train, &cfg.benchmark, &common.pool()?, &cfg.seeds, &arms)?;
            common.emit(&t)
        }
        Command::SingleSource { common, arms } => {
            let cfg = common.config()?;
            let t =
                run_single_source(&cfg.train, &cfg.benchmark, &common.pool()?, &cfg.seeds, &arms)?;
            common.emit(&t)
        }
        Command::AblateLosses { common } => {
            let cfg = common.config()?;
            let t = run_loss_ablation(&cfg.train, &cfg.benchmark, &common.pool()?, &cfg.seeds)?;
            common.emit(&t)
        }
        Command::SweepLambda { common, lambdas } => {
            let cfg = common.config()?;
            let lambdas = if lambdas.is_empty() {
                LAMBDA_SWEEP.to_vec()
            } else {
                lambdas
            };
            let t = sweep_lambda(&cfg.train, &cfg.benchmark, &common.pool()?, &cfg.seeds, &lambdas)?;
            common.emit(&t)
        }
        Command::Gradcheck { common, trials } => {
            let seed = common.seeds.first().copied().unwrap_or(0);
            let report = run_gradcheck(seed, trials)?;
            let text = match common.format {
                TableFormat::Csv => report.to_text(),
                TableFormat::Json => {
                    let mut s = serde_json::to_string_pretty(&report)
                        .map_err(|e| TdgError::Parse(e.to_string()))?;
                    s.push('\n');
                    s
                }
            };
            common.write(text.as_bytes())?;
            report.into_result().map(|_| ())
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code:
/// 0 success, 1 usage or configuration error, 2 numeric or verification
/// failure, 3 I/O error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

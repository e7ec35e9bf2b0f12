// SPDX-License-Identifier: Apache-2.0

//! `fedbench`: generate, partition, run and inspect federated experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedbench_core::data::DatasetPartition;
use fedbench_core::harness::{
    self, classify_partition, generate, partition_horizontal, partition_vertical, pooled_vertical,
    ExperimentConfig, ExperimentReport, Mode, SplitScheme,
};
use fedbench_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fedbench", version, about = "Federated learning protocol workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Hfl,
    Vfl,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    He,
    Pairwise,
    Dp,
    None,
}

impl SchemeArg {
    fn name(self) -> &'static str {
        match self {
            SchemeArg::He => "he",
            SchemeArg::Pairwise => "pairwise",
            SchemeArg::Dp => "dp",
            SchemeArg::None => "none",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Iid,
    LabelSkew,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic vertical data: party_a.csv, party_b.csv and pooled.csv.
    Generate {
        /// Experiment config whose [data] section describes the data.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        features_a: Option<usize>,
        #[arg(long)]
        features_b: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        extra_a: Option<usize>,
        #[arg(long)]
        extra_b: Option<usize>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Split a labelled CSV into client_k.csv files or party_a/party_b.csv.
    Partition {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 2)]
        clients: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Iid)]
        split: SplitArg,
        /// Comma-separated feature indices for party A.
        #[arg(long, value_delimiter = ',')]
        features_a: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run one experiment and compare it with pooled training.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        scheme: Option<SchemeArg>,
        /// Directory for report.txt, report_pretty.txt and transcript.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Pretty-print a key/value report and check its accounting.
    Report { file: PathBuf },
    /// Name the federated-learning category of two or more CSV partitions.
    Classify {
        #[arg(required = true, num_args = 2..)]
        files: Vec<PathBuf>,
    },
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

fn read_csv(path: &Path) -> Result<DatasetPartition> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    Ok(DatasetPartition::read_csv(file)?)
}

fn write_csv(dir: &Path, name: &str, data: &DatasetPartition) -> Result<()> {
    let path = dir.join(name);
    let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    data.write_csv(file)?;
    println!("wrote {} ({} rows)", path.display(), data.len());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, seed, samples, features_a, features_b, noise, extra_a, extra_b, out } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::from_path(&p)?,
                None => ExperimentConfig::default(),
            };
            let d = &mut cfg.data;
            for (slot, v) in [
                (&mut d.n_samples, samples),
                (&mut d.n_features_a, features_a),
                (&mut d.n_features_b, features_b),
                (&mut d.extra_a, extra_a),
                (&mut d.extra_b, extra_b),
            ] {
                if let Some(v) = v {
                    *slot = v;
                }
            }
            if let Some(v) = noise {
                d.noise_sigma = v;
            }
            let seed = seed.unwrap_or(cfg.experiment.seed);
            if features_a.is_some() || features_b.is_some() {
                d.true_weights = None;
            }
            let (a, b) = generate(&d.spec(seed))?;
            ensure_dir(&out)?;
            write_csv(&out, "party_a.csv", &a)?;
            write_csv(&out, "party_b.csv", &b)?;
            write_csv(&out, "pooled.csv", &pooled_vertical(&a, &b))?;
        }
        Command::Partition { mode, input, clients, split, features_a, seed, out } => {
            let data = read_csv(&input)?;
            ensure_dir(&out)?;
            match mode {
                ModeArg::Hfl => {
                    let scheme = match split {
                        SplitArg::Iid => SplitScheme::Iid,
                        SplitArg::LabelSkew => SplitScheme::LabelSkew,
                    };
                    let parts = partition_horizontal(&data, clients, scheme, seed)?;
                    for (k, p) in parts.iter().enumerate() {
                        write_csv(&out, &format!("client_{k}.csv"), p)?;
                    }
                }
                ModeArg::Vfl => {
                    let split = if features_a.is_empty() {
                        (0..data.n_features() / 2).collect()
                    } else {
                        features_a
                    };
                    let (a, b) = partition_vertical(&data, &split)?;
                    write_csv(&out, "party_a.csv", &a)?;
                    write_csv(&out, "party_b.csv", &b)?;
                }
            }
        }
        Command::Run { config, seed, mode, scheme, out, transcript } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if let Some(s) = seed {
                cfg.experiment.seed = s;
            }
            if let Some(m) = mode {
                cfg.experiment.mode = match m {
                    ModeArg::Hfl => Mode::Hfl,
                    ModeArg::Vfl => Mode::Vfl,
                };
            }
            if let Some(s) = scheme {
                cfg.experiment.scheme = s.name().into();
            }
            let art = harness::run_experiment(&cfg)?;
            print!("{}", art.report.to_pretty());
            if let Some(dir) = &out {
                ensure_dir(dir)?;
                write_text(&dir.join("report.txt"), &art.report.to_kv())?;
                write_text(&dir.join("report_pretty.txt"), &art.report.to_pretty())?;
            }
            let dump_path = transcript.or_else(|| out.as_ref().map(|d| d.join("transcript.txt")));
            if let Some(path) = dump_path {
                write_text(&path, &art.transcript.dump())?;
            }
        }
        Command::Report { file } => {
            let text = fs::read_to_string(&file).map_err(|e| io_err(&file, e))?;
            let report = ExperimentReport::from_kv(&text)?;
            print!("{}", report.to_pretty());
            report.check()?;
            println!("  check          delta_loss = |v_fed - v_sum| holds");
        }
        Command::Classify { files } => {
            let parts = files.iter().map(|f| read_csv(f)).collect::<Result<Vec<_>>>()?;
            println!("{}", classify_partition(&parts)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedbench: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Command-line front end for the simulation lab: batch dumps, single
//! training runs, and the drivers behind each reproducible table or figure.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mmcl_core::harness::{
    self, train, ExperimentConfig, GenerativeSetting, Scale,
};
use mmcl_core::latent::sample_batch;

#[derive(Parser)]
#[command(
    name = "mmcl",
    about = "Multimodal contrastive learning lab: synthetic generative process, \
             encoder training, and block-identifiability reports",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config file (flat key = value, TOML syntax). Defaults
    /// apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory for reports, traces, and checkpoints.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Comma-separated seed list overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Desk-scale budget: batch 1024, 50k iterations (the default).
    #[arg(long, conflicts_with = "paper_scale")]
    scaled: bool,

    /// Reference-scale budget: batch 6144, 300k iterations.
    #[arg(long)]
    paper_scale: bool,

    /// Worker threads for independent (config, seed) cells.
    #[arg(long)]
    threads: Option<usize>,
}

impl CommonArgs {
    fn load_config(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seeds) = &self.seeds {
            if seeds.is_empty() {
                bail!("--seeds needs at least one seed");
            }
            config.seeds = seeds.clone();
        }
        if self.paper_scale {
            config = config.at_scale(Scale::Paper);
        } else if self.scaled {
            config = config.at_scale(Scale::Desk);
        }
        config.validate()?;
        Ok(config)
    }

    fn init_threads(&self) -> Result<()> {
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("initializing worker threads")?;
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample latent pairs from the generative process and dump them as CSV.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Seed for the batch.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of pairs.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Output CSV path.
        #[arg(long, default_value = "batch.csv")]
        file: PathBuf,
    },
    /// Train one encoder pair, evaluate block-identifiability, and persist
    /// the trace, report, and checkpoints.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Seed for the run (defaults to the first config seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// The main simulation table: 5 generative settings x {original,
    /// multimodal} x seeds.
    Table1 {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// The simulation table without modality-specific latent variables.
    AblateNoModality {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Discrete-factor sweeps over class counts.
    AblateDiscrete {
        #[command(flatten)]
        common: CommonArgs,
        /// Class counts to sweep.
        #[arg(long, value_delimiter = ',', default_values_t = vec![3, 4, 5, 6, 7, 8, 9, 10])]
        k: Vec<usize>,
        /// Which blocks to make discrete: style, modality, content.
        #[arg(long, value_delimiter = ',', default_values_t = vec!["style".to_string(), "modality".to_string(), "content".to_string()])]
        sweeps: Vec<String>,
    },
    /// Dimensionality ablation: vary style or modality dimensions with
    /// content fixed.
    AblateDims {
        #[command(flatten)]
        common: CommonArgs,
        /// Which block dimension to vary: style or modality.
        #[arg(long)]
        vary: String,
        /// Sizes to sweep.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Test-time content interventions: batch-permuted content on the
    /// holdout, scoring original and intervened content.
    Intervene {
        #[command(flatten)]
        common: CommonArgs,
        /// Settings rows to run (1..=5 in table order); defaults to all.
        #[arg(long, value_delimiter = ',')]
        settings: Option<Vec<usize>>,
    },
    /// Estimate the number of content factors from the validation-loss
    /// elbow over candidate encoding sizes.
    SelectDim {
        #[command(flatten)]
        common: CommonArgs,
        /// Candidate encoding sizes, strictly increasing.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10])]
        candidates: Vec<usize>,
    },
    /// Merge CSV reports that share a header into one file.
    Report {
        /// Input CSV files, merged in the given order.
        inputs: Vec<PathBuf>,
        /// Output path.
        #[arg(long, default_value = "merged.csv")]
        out: PathBuf,
    },
}

/// OpenBLAS mis-detects virtualized CPUs without a model string and falls
/// back to a slow generic kernel; pin the AVX-512 kernel when available.
/// Parallelism lives at the run level, so one BLAS thread per process: the
/// layer matmuls are too small to split without thrashing.
fn tune_blas() {
    if std::env::var_os("OPENBLAS_NUM_THREADS").is_none() {
        std::env::set_var("OPENBLAS_NUM_THREADS", "1");
    }
    #[cfg(target_arch = "x86_64")]
    if std::env::var_os("OPENBLAS_CORETYPE").is_none()
        && is_x86_feature_detected!("avx512f")
    {
        std::env::set_var("OPENBLAS_CORETYPE", "SKYLAKEX");
    }
}

fn settings_by_rows(rows: Option<Vec<usize>>) -> Result<Vec<GenerativeSetting>> {
    let all = harness::table_settings();
    match rows {
        None => Ok(all),
        Some(rows) => {
            let mut picked = Vec::new();
            for row in rows {
                if row == 0 || row > all.len() {
                    bail!("setting row {row} out of range 1..={}", all.len());
                }
                picked.push(all[row - 1]);
            }
            Ok(picked)
        }
    }
}

fn main() -> Result<()> {
    tune_blas();
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { common, seed, n, file } => {
            common.init_threads()?;
            let config = common.load_config()?;
            let spec = config.latent_spec(seed)?;
            let batch = sample_batch(&spec, n, seed)?;
            let mut out = std::io::BufWriter::new(
                std::fs::File::create(&file)
                    .with_context(|| format!("creating {}", file.display()))?,
            );
            batch.write_csv(&mut out)?;
            out.flush()?;
            println!("wrote {n} latent pairs to {}", file.display());
        }
        Command::Train { common, seed } => {
            common.init_threads()?;
            let mut config = common.load_config()?;
            config.out_dir = common.out.to_string_lossy().into_owned();
            std::fs::create_dir_all(&common.out)?;
            let seed = seed.unwrap_or(config.seeds[0]);
            let record = train(&config, seed)?;
            let trace_path = common.out.join(format!(
                "trace_{}_{}.csv",
                record.config_hash, record.seed
            ));
            let mut trace = std::io::BufWriter::new(std::fs::File::create(&trace_path)?);
            record.write_trace_csv(&mut trace)?;
            trace.flush()?;
            let report_path = common.out.join(format!(
                "report_{}_{}.csv",
                record.config_hash, record.seed
            ));
            let mut report = std::io::BufWriter::new(std::fs::File::create(&report_path)?);
            writeln!(report, "{}", mmcl_core::eval::IdentReport::csv_header())?;
            record
                .report
                .write_csv_rows(&mut report, record.artifact_version())?;
            report.flush()?;
            println!(
                "run {}_{} finished in {:.1}s; final loss {:.4}",
                record.config_hash,
                record.seed,
                record.wall_secs,
                record.trace.last().map(|p| p.loss).unwrap_or(f64::NAN)
            );
            for score in &record.report.scores {
                println!(
                    "  side {} {:<18} {} = {:.4}",
                    score.side,
                    score.block.label(),
                    score.score_type.label(),
                    score.score
                );
            }
            if let Some(dir) = &record.checkpoint_dir {
                println!("checkpoints in {}", dir.display());
            }
        }
        Command::Table1 { common } => {
            common.init_threads()?;
            let config = common.load_config()?;
            harness::run_table1(&config, &common.out)?;
            println!("table written to {}", common.out.display());
        }
        Command::AblateNoModality { common } => {
            common.init_threads()?;
            let config = common.load_config()?;
            harness::run_ablation_no_modality_latents(&config, &common.out)?;
            println!("ablation written to {}", common.out.display());
        }
        Command::AblateDiscrete { common, k, sweeps } => {
            common.init_threads()?;
            let config = common.load_config()?;
            let mut parsed = Vec::new();
            for sweep in &sweeps {
                parsed.push(match sweep.as_str() {
                    "style" => harness::DiscreteSweep::Style,
                    "modality" => harness::DiscreteSweep::Modality,
                    "content" => harness::DiscreteSweep::Content,
                    other => bail!("unknown sweep '{other}' (style, modality, content)"),
                });
            }
            harness::run_discrete_ablation(&config, &k, &parsed, &common.out)?;
            println!("discrete ablation written to {}", common.out.display());
        }
        Command::AblateDims { common, vary, sizes } => {
            common.init_threads()?;
            let config = common.load_config()?;
            let varied = match vary.as_str() {
                "style" => harness::VariedBlock::Style,
                "modality" => harness::VariedBlock::Modality,
                other => bail!("unknown block '{other}' (style or modality)"),
            };
            harness::run_dim_ablation(&config, varied, &sizes, &common.out)?;
            println!("dimensionality ablation written to {}", common.out.display());
        }
        Command::Intervene { common, settings } => {
            common.init_threads()?;
            let config = common.load_config()?;
            let picked = settings_by_rows(settings)?;
            harness::run_intervention_eval(&config, &picked, &common.out)?;
            println!("intervention evaluation written to {}", common.out.display());
        }
        Command::SelectDim { common, candidates } => {
            common.init_threads()?;
            let config = common.load_config()?;
            let outcomes = harness::run_model_selection(&config, &candidates, &common.out)?;
            for outcome in &outcomes {
                println!(
                    "seed {}: elbow at {}{}",
                    outcome.seed,
                    outcome.estimate.elbow,
                    if outcome.estimate.low_confidence {
                        " (low confidence)"
                    } else {
                        ""
                    }
                );
            }
        }
        Command::Report { inputs, out } => {
            let mut file = std::io::BufWriter::new(
                std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?,
            );
            harness::merge_csv_files(&inputs, &mut file)?;
            file.flush()?;
            println!("merged {} files into {}", inputs.len(), out.display());
        }
    }
    Ok(())
}

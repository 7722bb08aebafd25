//! Command-line surface: data generation, training, scoring, evaluation,
//! reverse sampling, and the built-in invariant suite.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric fault,
//! 1 anything else.

use clap::{Parser, Subcommand, ValueEnum};
use protoflow::config::RunConfig;
use protoflow::data::{self, Split};
use protoflow::error::{Error, Result};
use protoflow::experiment::{self, run_experiment};
use protoflow::eval::write_scores;
use protoflow::reverse::sample_reverse_trajectory;
use protoflow::rng::derive_rng;
use protoflow::snapshot::load_model;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "protoflow",
    about = "Gaussian-mixture prototype flow matching for open-set anomaly detection",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeFlag {
    /// Add the regularizer with its literal printed sign.
    LiteralMiSign,
    /// Marginal entropy from batch responsibilities.
    BatchMarginalMi,
    /// One timestep per sample instead of per iteration.
    PerSampleT,
    /// Single-step transport map.
    OneStepPsi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Test,
    TrainNormal,
    TrainAnomaly,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Test => Split::Test,
            SplitArg::TrainNormal => Split::TrainNormal,
            SplitArg::TrainAnomaly => Split::TrainAnomaly,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the three synthetic splits into a directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model and write the snapshot plus a metrics stream.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "mode", value_enum)]
        modes: Vec<ModeFlag>,
    },
    /// Score a dataset file with a trained model.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of patch scores aggregated by the local head.
        #[arg(long, default_value_t = 0.10)]
        top_fraction: f64,
    },
    /// Run the full protocol: data, training over seeds, scoring, AUC.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the number of seeded repetitions.
        #[arg(long)]
        repeat: Option<usize>,
        #[arg(long = "mode", value_enum)]
        modes: Vec<ModeFlag>,
        /// Comma-separated regularizer weights; one report per value.
        #[arg(long)]
        lambda_sweep: Option<String>,
    },
    /// Draw reverse-trajectory samples from a trained model.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Reverse grid steps.
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant suite.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply_modes(cfg: &mut RunConfig, modes: &[ModeFlag]) {
    for m in modes {
        match m {
            ModeFlag::LiteralMiSign => cfg.train.literal_mi_sign = true,
            ModeFlag::BatchMarginalMi => cfg.train.batch_marginal_mi = true,
            ModeFlag::PerSampleT => cfg.train.per_sample_t = true,
            ModeFlag::OneStepPsi => cfg.train.one_step_psi = true,
        }
    }
}

fn cmd_gen_data(config: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(&config)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    std::fs::create_dir_all(&out)?;
    let (train_normal, train_anomaly, test) = data::generate(&cfg.data)?;
    data::save(&train_normal, &out.join("train_normal.csv"))?;
    data::save(&train_anomaly, &out.join("train_anomaly.csv"))?;
    data::save(&test, &out.join("test.csv"))?;
    std::fs::write(out.join("config_used.toml"), cfg.to_toml_string())?;
    println!(
        "wrote {} train-normal, {} train-anomaly, {} test samples to {}",
        train_normal.len(),
        train_anomaly.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    modes: &[ModeFlag],
) -> Result<()> {
    let mut cfg = load_config(&config)?;
    apply_modes(&mut cfg, modes);
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&out)?;
    let data = experiment::load_or_generate(&cfg)?;

    let metrics_path = out.join("metrics.jsonl");
    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let checkpoint_interval = cfg.train.checkpoint_interval;
    let out_dir = out.clone();
    let result = protoflow::train::train_with(
        &cfg.train,
        &data.train_normal.samples,
        &data.train_anomaly.samples,
        |model, heads, record| {
            let line = serde_json::to_string(record)
                .map_err(|e| Error::Config(format!("metrics serialization failed: {e}")))?;
            writeln!(metrics_file, "{line}")?;
            if checkpoint_interval > 0 && record.step % checkpoint_interval as u64 == 0 {
                protoflow::snapshot::save_model(
                    model,
                    heads,
                    &out_dir.join(format!("checkpoint_step{}.bin", record.step)),
                )?;
            }
            Ok(())
        },
    )?;
    metrics_file.flush()?;
    protoflow::snapshot::save_model(&result.model, &result.heads, &out.join("model.bin"))?;
    std::fs::write(out.join("config_used.toml"), cfg.to_toml_string())?;
    match result.aborted_at {
        Some(step) => {
            eprintln!("training aborted by a numeric fault at step {step}; last valid state saved");
            Err(Error::NumericFault(format!("training diverged at step {step}")))
        }
        None => {
            println!(
                "trained {} steps; model written to {}",
                result.metrics.len(),
                out.join("model.bin").display()
            );
            Ok(())
        }
    }
}

fn cmd_score(
    model_path: PathBuf,
    data_path: PathBuf,
    split: SplitArg,
    out: PathBuf,
    top_fraction: f64,
) -> Result<()> {
    let (model, heads) = load_model(&model_path)?;
    let dataset = data::load(&data_path, split.into())?;
    let scores =
        experiment::score_dataset(&model, &heads, &dataset.samples, top_fraction)?;
    write_scores(&scores, &out)?;
    println!("scored {} samples into {}", scores.len(), out.display());
    Ok(())
}

fn cmd_eval(
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    repeat: Option<usize>,
    modes: &[ModeFlag],
    lambda_sweep: Option<String>,
) -> Result<()> {
    let mut cfg = load_config(&config)?;
    apply_modes(&mut cfg, modes);
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(r) = repeat {
        cfg.repeat = r;
    }

    let lambdas: Vec<f64> = match &lambda_sweep {
        None => vec![cfg.train.mi_weight],
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("invalid sweep value {s:?}")))
            })
            .collect::<Result<Vec<f64>>>()?,
    };

    for lambda in lambdas {
        let mut run_cfg = cfg.clone();
        run_cfg.train.mi_weight = lambda;
        let run_out = match (&out, lambda_sweep.is_some()) {
            (Some(dir), true) => {
                let mut name = format!("lambda_{lambda}");
                name = name.replace('.', "_");
                Some(dir.join(name))
            }
            (Some(dir), false) => Some(dir.clone()),
            (None, _) => None,
        };
        let report = run_experiment(&run_cfg, run_out.as_deref())?;
        let mut line = format!(
            "lambda={lambda} auc={:.6} +/- {:.6} over {} run(s); untrained={:.6}",
            report.auc, report.auc_std, report.runs, report.untrained_auc
        );
        let _ = write!(
            line,
            " heads: global={:.4} local={:.4} normal={:.4} residual={:.4}",
            report.head_auc.global,
            report.head_auc.local,
            report.head_auc.normal,
            report.head_auc.residual
        );
        println!("{line}");
    }
    Ok(())
}

fn cmd_sample(
    model_path: PathBuf,
    count: usize,
    steps: usize,
    seed: u64,
    out: PathBuf,
) -> Result<()> {
    let (model, _heads) = load_model(&model_path)?;
    let dim = model.dim();
    let mut file = std::io::BufWriter::new(std::fs::File::create(&out)?);
    let mut header = String::from("sample_id");
    for j in 0..dim {
        let _ = write!(header, ",f{j}");
    }
    writeln!(file, "{header}")?;
    for i in 0..count {
        // start in the prototype space at t = 1, flow back to t = 0
        let mut start_rng = derive_rng(seed, i as u64, 0);
        let z1 = model.prototype.sample_prior(&mut start_rng);
        let mut traj_rng = derive_rng(seed, i as u64, 1);
        let z0 = sample_reverse_trajectory(&model, &z1, steps, &mut traj_rng)?;
        let mut line = format!("{i}");
        for v in &z0 {
            let _ = write!(line, ",{v:.16e}");
        }
        writeln!(file, "{line}")?;
    }
    file.flush()?;
    println!("wrote {count} reverse samples to {}", out.display());
    Ok(())
}

fn cmd_check(seed: u64) -> Result<()> {
    let results = protoflow::selfcheck::run_all(seed)?;
    let mut failed = 0;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag} {:<34} {}", r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::NumericFault(format!("{failed} invariant check(s) failed")));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => cmd_gen_data(config, out, seed),
        Command::Train {
            config,
            out,
            seed,
            modes,
        } => cmd_train(config, out, seed, &modes),
        Command::Score {
            model,
            data,
            split,
            out,
            top_fraction,
        } => cmd_score(model, data, split, out, top_fraction),
        Command::Eval {
            config,
            out,
            seed,
            repeat,
            modes,
            lambda_sweep,
        } => cmd_eval(config, out, seed, repeat, &modes, lambda_sweep),
        Command::Sample {
            model,
            count,
            steps,
            seed,
            out,
        } => cmd_sample(model, count, steps, seed, out),
        Command::Check { seed } => cmd_check(seed),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

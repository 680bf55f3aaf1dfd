use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use dmamba::config::{parse_ratios, TrainConfig};
use dmamba::experiments::{self, DEFAULT_ALPHAS};
use dmamba::loss::LossKind;
use dmamba::model::{ModelConfig, Variant};
use dmamba::report::{self, RunReport};
use dmamba::train::{self, TrainOptions, Trainer};
use dmamba::{checkpoint::Checkpoint, gradcheck, Error, Result};

#[derive(Parser)]
#[command(name = "dmamba", version, about = "Decomposition + bidirectional Mamba forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after_epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to <out>/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train all five branch variants with the same budget.
    Ablation {
        #[command(flatten)]
        run: RunArgs,
    },
    /// One run per EMA smoothing factor.
    AlphaSweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ALPHAS.to_vec())]
        alphas: Vec<f64>,
    },
    /// Compare analytic and finite-difference gradients of a toy model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// CSV with a leading timestamp column.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Flat `key = value` config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    pred_len: Option<usize>,
    /// Train,val,test fractions, e.g. 0.7,0.1,0.2.
    #[arg(long)]
    split_ratios: Option<String>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    ema_alpha: Option<f64>,
    #[arg(long)]
    revin_eps: Option<f64>,
    #[arg(long)]
    no_revin_affine: bool,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_state: Option<usize>,
    #[arg(long)]
    e_layers: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    trend_layers: Option<usize>,
    #[arg(long)]
    trend_pool: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Use only the first N rows of the data file.
    #[arg(long)]
    max_rows: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl RunArgs {
    /// Defaults, then the config file, then flags.
    fn config(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        let m: &mut ModelConfig = &mut c.model;
        set(&mut m.seq_len, self.seq_len);
        set(&mut m.pred_len, self.pred_len);
        set(&mut m.variant, self.variant);
        set(&mut m.alpha, self.ema_alpha);
        set(&mut m.revin_eps, self.revin_eps);
        if self.no_revin_affine {
            m.revin_affine = false;
        }
        set(&mut m.d_model, self.d_model);
        set(&mut m.d_state, self.d_state);
        set(&mut m.e_layers, self.e_layers);
        set(&mut m.d_ff, self.d_ff);
        set(&mut m.dropout, self.dropout);
        set(&mut m.trend_layers, self.trend_layers);
        set(&mut m.trend_pool, self.trend_pool);
        set(&mut c.loss, self.loss);
        set(&mut c.seed, self.seed);
        set(&mut c.adam.lr, self.lr);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.max_epochs, self.epochs);
        set(&mut c.patience, self.patience);
        set(&mut c.stride, self.stride);
        if let Some(r) = self.max_rows {
            c.max_rows = Some(r);
        }
        if let Some(r) = &self.split_ratios {
            c.split_ratios = Some(parse_ratios(r)?);
        }
        if let Some(d) = &self.data {
            c.data = Some(d.clone());
        }
        Ok(c)
    }

    /// Effective config with data loaded, validated before any training.
    fn prepare(&self) -> Result<(TrainConfig, dmamba::data::DataSplits, String)> {
        let mut c = self.config()?;
        c.validate()?;
        let (splits, name) = train::load_data(&mut c)?;
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join("config.txt"), c.to_text())?;
        Ok((c, splits, name))
    }
}

fn print_summary(reports: &[RunReport]) {
    for r in reports {
        println!(
            "{} {} L={} T={} alpha={} seed={}: test mse {:.6} mae {:.6} ({} epochs, {:.1}s, {} params)",
            r.dataset, r.variant, r.seq_len, r.pred_len, r.alpha, r.seed, r.test_mse, r.test_mae, r.epochs, r.wall_seconds, r.param_count
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            run,
            resume,
            stop_after_epochs,
        } => {
            let (cfg, splits, name) = run.prepare()?;
            let opts = TrainOptions {
                out_dir: Some(run.out.clone()),
                resume,
                stop_after_epochs,
            };
            match train::train::<f64>(cfg, &splits, &name, &opts)?.0 {
                Some(rep) => print_summary(&[rep]),
                None => println!("stopped; resume with --resume {}", run.out.join("checkpoint.bin").display()),
            }
        }
        Command::Eval { run, checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| run.out.join("checkpoint.bin"));
            let mut t = Trainer::<f64>::from_checkpoint(&Checkpoint::load(&path)?)?;
            if !t.finished {
                t.finish();
            }
            let mut cfg = t.config.clone();
            if let Some(d) = &run.data {
                cfg.data = Some(d.clone());
            }
            let channels = cfg.model.channels;
            let (splits, name) = train::load_data(&mut cfg)?;
            if cfg.model.channels != channels {
                return Err(Error::Data(format!(
                    "checkpoint expects {channels} channels, data has {}",
                    cfg.model.channels
                )));
            }
            let test = train::evaluate(&t.model, &splits.test, &t.config)?;
            let rep = t.report(&name, &test);
            report::write_reports(&run.out, std::slice::from_ref(&rep))?;
            train::write_forecast_sample(&run.out.join("forecast_sample.csv"), &t.model, &splits.test, t.config.batch_size)?;
            print_summary(&[rep]);
        }
        Command::Ablation { run } => {
            let (cfg, splits, name) = run.prepare()?;
            let results = experiments::run_ablation::<f64>(&cfg, &splits, &name, Some(&run.out))?;
            let done: Vec<RunReport> = results.iter().filter_map(|(_, r)| r.as_ref().ok().cloned()).collect();
            print!("{}", report::ablation_table(&done));
            if let Some((v, Err(e))) = results.into_iter().find(|(_, r)| r.is_err()) {
                eprintln!("variant {v} failed");
                return Err(e);
            }
        }
        Command::AlphaSweep { run, alphas } => {
            let (cfg, splits, name) = run.prepare()?;
            let reports = experiments::run_alpha_sweep::<f64>(&cfg, &splits, &name, &alphas, Some(&run.out))?;
            print!("{}", report::alpha_table(&reports));
        }
        Command::Gradcheck { step, tolerance, seed } => {
            let mut worst = 0.0f64;
            for v in Variant::ALL {
                let rep = gradcheck::check_model(v, seed, step)?;
                println!(
                    "{v}: max relative error {:.3e} over {} entries (worst {})",
                    rep.worst(),
                    rep.checked,
                    rep.worst_label().map_or("-", |(l, _)| l)
                );
                worst = worst.max(rep.worst());
            }
            if !(worst < tolerance) {
                return Err(Error::GradCheck(format!("{worst:.3e} exceeds {tolerance:e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            info!("exit code {}", e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

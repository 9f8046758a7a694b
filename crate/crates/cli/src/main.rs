//! `lam`: generate synthetic transitions, train and evaluate latent action
//! models, compute closed-form oracles, and reproduce the experiment suite.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lam_cli::config::{out_root, ConfigDraft, ExperimentName};
use lam_cli::{experiments, report};
use lam_core::checkpoint::Checkpoint;
use lam_core::datagen::{sample_batch, EnvConfig, EnvSpec, NoiseSpec};
use lam_core::evaluator::{llo, LatentKind};
use lam_core::gridworld::{
    eval_grid, train_grid, GridEnvSpec, GridModel, GridNoise, GridPolicy, GridTrainConfig,
};
use lam_core::linear_lam::{train, LinearLamParams, LrSchedule, TrainConfig};
use lam_core::numerics::STREAM_EVAL;
use lam_core::oracle::{expected_recon_loss, PcaOracle};
use lam_core::Rng;

#[derive(Parser)]
#[command(name = "lam", version, about = "Latent action model laboratory", long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Synthetic environment parameters shared by several subcommands.
#[derive(Args, Clone)]
struct EnvArgs {
    #[arg(long, default_value_t = 128)]
    d_o: usize,
    #[arg(long, default_value_t = 8)]
    d_a: usize,
    #[arg(long, default_value_t = 8)]
    d_b: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma_q: f64,
    /// Isotropic noise scale (mutually exclusive with --sigma-exo > 0).
    #[arg(long, default_value_t = 0.0)]
    sigma_iid: f64,
    /// Exogenous-agent noise scale.
    #[arg(long, default_value_t = 0.0)]
    sigma_exo: f64,
    /// Policy determinism coefficient in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    chi: f64,
    /// Orthogonalize the exogenous effect against the action effect.
    #[arg(long, default_value_t = false)]
    orthogonal_exo: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl EnvArgs {
    fn build(&self) -> Result<EnvSpec> {
        if self.sigma_iid > 0.0 && self.sigma_exo > 0.0 {
            bail!("choose one of --sigma-iid and --sigma-exo");
        }
        let noise = if self.sigma_exo > 0.0 {
            NoiseSpec::Exo { sigma: self.sigma_exo }
        } else if self.sigma_iid > 0.0 {
            NoiseSpec::Iid { sigma: self.sigma_iid }
        } else {
            NoiseSpec::None
        };
        Ok(EnvSpec::generate(&EnvConfig {
            d_o: self.d_o,
            d_a: self.d_a,
            d_b: self.d_b,
            sigma_q: self.sigma_q,
            noise,
            chi: self.chi,
            orthogonal_exo: self.orthogonal_exo,
            seed: self.seed,
        })?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample a batch of transitions and write it to disk.
    Gen {
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        label_fraction: f64,
        /// Columnar binary output path.
        #[arg(long)]
        out: PathBuf,
        /// Also write a CSV copy here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train a linear latent action model and save a checkpoint.
    TrainLinear {
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long, default_value_t = 8)]
        d_z: usize,
        #[arg(long, default_value_t = 4000)]
        steps: usize,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Final learning rate of a linear decay (defaults to --lr: constant).
        #[arg(long)]
        lr_end: Option<f64>,
        /// Variance of the shared augmentation vectors.
        #[arg(long, default_value_t = 0.0)]
        aug: f64,
        /// Fraction of action-labeled rows (enables the action head if > 0).
        #[arg(long, default_value_t = 0.0)]
        label_fraction: f64,
        /// Action-loss weight (defaults to the label fraction).
        #[arg(long)]
        action_weight: Option<f64>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Write the per-step loss trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate a linear checkpoint's latent with linear probes.
    EvalLlo {
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "surrogate")]
        latent: String,
        #[arg(long, default_value_t = 8192)]
        n_eval: usize,
    },
    /// Closed-form quantities for an environment.
    Oracle {
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long, default_value_t = 8)]
        d_z: usize,
    },
    /// Train the grid-world VQ model.
    TrainGrid {
        /// Bottom-row noise: none, low, or high.
        #[arg(long, default_value = "low")]
        noise: String,
        /// Data-collection policy: uniform or correlated.
        #[arg(long, default_value = "uniform")]
        policy: String,
        #[arg(long, default_value_t = 16000)]
        steps: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Shared left/right shift augmentation.
        #[arg(long, default_value_t = false)]
        augment: bool,
        #[arg(long, default_value_t = 0.0)]
        label_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate a grid-world checkpoint.
    EvalGrid {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "low")]
        noise: String,
        #[arg(long, default_value = "uniform")]
        policy: String,
        #[arg(long, default_value_t = 4096)]
        n_eval: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a named experiment sweep (CSV + SVG under the output root).
    Experiment {
        /// One of: fig4_left, fig4_mid, fig4_right, fig5_policy, fig5_aug,
        /// fig5_actpred, table1.
        #[arg(long)]
        name: Option<String>,
        /// Flat key-value config file; flags override file values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// desk (default) or paper.
        #[arg(long)]
        profile: Option<String>,
    },
    /// Summarize an experiment CSV (and refresh its plots).
    Report {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn parse_grid_noise(s: &str) -> Result<GridNoise> {
    Ok(match s {
        "none" => GridNoise::None,
        "low" => GridNoise::Low,
        "high" => GridNoise::High,
        other => bail!("--noise must be none, low, or high (got {other})"),
    })
}

fn parse_grid_policy(s: &str) -> Result<GridPolicy> {
    Ok(match s {
        "uniform" => GridPolicy::Uniform,
        "correlated" => GridPolicy::DEFAULT_CORRELATED,
        other => bail!("--policy must be uniform or correlated (got {other})"),
    })
}

fn parse_latent(s: &str) -> Result<LatentKind> {
    Ok(match s {
        "surrogate" => LatentKind::Surrogate,
        "true" | "true_latent" => LatentKind::TrueLatent,
        other => bail!("--latent must be surrogate or true_latent (got {other})"),
    })
}

fn write_trace(path: &PathBuf, trace: &[f64]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen { env, n, label_fraction, out, csv } => {
            let spec = env.build()?;
            let mut rng = Rng::stream(env.seed, lam_core::numerics::STREAM_BATCH);
            let batch = sample_batch(&spec, n, label_fraction, &mut rng);
            batch.write_binary(&out)?;
            println!("wrote {} transitions to {}", n, out.display());
            if let Some(csv_path) = csv {
                let mut file = std::fs::File::create(&csv_path)?;
                batch.write_csv(&mut file)?;
                println!("wrote CSV copy to {}", csv_path.display());
            }
        }
        Command::TrainLinear {
            env,
            d_z,
            steps,
            batch,
            lr,
            lr_end,
            aug,
            label_fraction,
            action_weight,
            out,
            trace,
        } => {
            let spec = env.build()?;
            let cfg = TrainConfig {
                d_z,
                steps,
                batch,
                lr: match lr_end {
                    Some(end) if end != lr => LrSchedule::LinearDecay { start: lr, end },
                    _ => LrSchedule::Constant(lr),
                },
                aug_variance: aug,
                action_head: label_fraction > 0.0,
                action_weight,
                label_fraction,
                stop_gradient_action: false,
                seed: env.seed,
            };
            let result = train(&spec, &cfg)?;
            result.params.to_checkpoint(env.seed).save(&out)?;
            let final_loss = expected_recon_loss(&spec, &result.params, 0.0);
            println!(
                "trained {} steps; last minibatch loss {:.6}; expected loss {:.6}; checkpoint {}",
                steps,
                result.loss_trace.last().unwrap(),
                final_loss,
                out.display()
            );
            if let Some(path) = trace {
                write_trace(&path, &result.loss_trace)?;
            }
        }
        Command::EvalLlo { env, ckpt, latent, n_eval } => {
            let spec = env.build()?;
            let params = LinearLamParams::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let kind = parse_latent(&latent)?;
            let mut rng = Rng::stream(env.seed, STREAM_EVAL);
            let rep = llo(&params, &spec, n_eval, kind, &mut rng)?;
            println!(
                "llo {:.6}  nmse_q {:.6}  nmse_eps {:.6}  nmse_o {:.6}  latent {}  n_eval {}{}",
                rep.llo,
                rep.nmse_q,
                rep.nmse_eps,
                rep.nmse_o,
                rep.latent_kind,
                rep.n_eval,
                if rep.degenerate_latent { "  (degenerate latent)" } else { "" }
            );
        }
        Command::Oracle { env, d_z } => {
            let spec = env.build()?;
            let oracle = PcaOracle::for_env(&spec, d_z)?;
            println!("optimal reconstruction loss at d_z={d_z}: {}", oracle.optimal_loss());
            if oracle.tie_warning {
                println!("warning: eigenvalue tie at the d_z boundary; the optimal subspace is not unique");
            }
            let head: Vec<String> =
                oracle.eig.values.iter().take(12).map(|v| format!("{v:.4}")).collect();
            println!("leading eigenvalues: {}", head.join(", "));
        }
        Command::TrainGrid {
            noise,
            policy,
            steps,
            batch,
            augment,
            label_fraction,
            seed,
            out,
            trace,
        } => {
            let env = GridEnvSpec {
                noise: parse_grid_noise(&noise)?,
                policy: parse_grid_policy(&policy)?,
                seed,
            };
            let cfg = GridTrainConfig {
                steps,
                batch,
                augment,
                label_fraction,
                seed,
                ..GridTrainConfig::default()
            };
            let result = train_grid(&env, &cfg)?;
            result.model.to_checkpoint(seed).save(&out)?;
            println!(
                "trained {} steps; final loss {:.6}; checkpoint {}",
                steps,
                result.loss_trace.last().unwrap(),
                out.display()
            );
            if let Some(path) = trace {
                write_trace(&path, &result.loss_trace)?;
            }
        }
        Command::EvalGrid { ckpt, noise, policy, n_eval, seed } => {
            let env = GridEnvSpec {
                noise: parse_grid_noise(&noise)?,
                policy: parse_grid_policy(&policy)?,
                seed,
            };
            let model = GridModel::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let mut rng = Rng::stream(seed, STREAM_EVAL);
            let eval = eval_grid(&model, &env, n_eval, &mut rng)?;
            println!(
                "controllable loss {:.4}; stochastic loss {}; code usage {:?}",
                eval.controllable,
                eval.stochastic.map(|s| format!("{s:.4}")).unwrap_or_else(|| "--".into()),
                eval.code_usage
            );
        }
        Command::Experiment { name, config, sets, seeds, out_dir, profile } => {
            let mut draft = match config {
                Some(path) => ConfigDraft::from_file(&path)
                    .with_context(|| format!("reading {}", path.display()))?,
                None => ConfigDraft::default(),
            };
            let mut flags = ConfigDraft::default();
            if let Some(n) = name {
                flags.experiment = Some(ExperimentName::parse(&n)?);
            }
            if let Some(p) = profile {
                flags.set("profile", &p)?;
            }
            if let Some(s) = seeds {
                flags.set("seeds", &s)?;
            }
            if let Some(dir) = out_dir {
                flags.out_dir = Some(dir);
            }
            for kv in &sets {
                let (k, v) = kv
                    .split_once('=')
                    .with_context(|| format!("--set expects key=value, got `{kv}`"))?;
                flags.set(k.trim(), v.trim())?;
            }
            draft = draft.overlay(flags);
            let cfg = draft.resolve(&out_root())?;
            eprintln!(
                "running {} ({} points x {} seeds) into {}",
                cfg.experiment.as_str(),
                if cfg.experiment == ExperimentName::Table1 {
                    6
                } else {
                    cfg.d_z.len() * cfg.sigma_iid.len() * cfg.sigma_exo.len() * cfg.chi.len() * cfg.aug.len() * cfg.lambda.len()
                },
                cfg.seeds.len(),
                cfg.out_dir.display()
            );
            let output = experiments::run_experiment(&cfg).map_err(anyhow::Error::msg)?;
            println!("wrote {}", output.csv_path.display());
            if cfg.experiment == ExperimentName::Table1 {
                let text = report::report_csv(&output.csv_path, &cfg.out_dir)?;
                println!("{text}");
            }
            if output.failures > 0 {
                bail!("{} sweep point(s) failed; see status column", output.failures);
            }
        }
        Command::Report { csv, out_dir } => {
            let dir = out_dir.unwrap_or_else(|| {
                csv.parent().map(|p| p.to_path_buf()).unwrap_or_else(|| PathBuf::from("."))
            });
            let text = report::report_csv(&csv, &dir)?;
            println!("{text}");
        }
    }
    Ok(())
}

//! Named experiment sweeps: execution, CSV records, and summaries.
//!
//! Each sweep point is self-contained (its own environment and RNG streams
//! derived from its seed), so points run on a rayon pool without affecting
//! determinism, and a failing point is recorded in its CSV row instead of
//! aborting siblings.
//!
//! CSV schema v1, one row per (point, seed), sorted by axes then seed:
//!
//! ```text
//! experiment,seed,d_z,sigma_iid,sigma_exo,chi,aug,lambda,
//! nmse_q,nmse_eps,nmse_o,llo,latent_kind,
//! controllable_loss,stochastic_loss,final_train_loss,oracle_loss,
//! status,wall_clock_ms
//! ```
//!
//! Linear experiments leave the grid columns empty and vice versa. For
//! `table1`, `sigma_iid` carries the noise intensity (0/1/2), `chi` is the
//! pattern-following probability (0 = uniform policy), and `aug` is the
//! shift-augmentation switch (0/1). Reruns with the same config are
//! byte-identical except for `wall_clock_ms`.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;

use lam_core::datagen::{EnvConfig, EnvSpec, NoiseSpec};
use lam_core::evaluator::{llo, LatentKind, LloReport};
use lam_core::gridworld::{
    eval_grid, train_grid, GridEnvSpec, GridNoise, GridPolicy, GridTrainConfig,
};
use lam_core::linear_lam::{train, LrSchedule, TrainConfig};
use lam_core::numerics::STREAM_EVAL;
use lam_core::oracle::{expected_recon_loss, PcaOracle};
use lam_core::Rng;

use crate::config::{ExperimentConfig, ExperimentName};
use crate::plot;

pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "experiment,seed,d_z,sigma_iid,sigma_exo,chi,aug,lambda,nmse_q,nmse_eps,nmse_o,llo,latent_kind,controllable_loss,stochastic_loss,final_train_loss,oracle_loss,status,wall_clock_ms";

/// One sweep point (axis values plus seed).
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub d_z: usize,
    pub sigma_iid: f64,
    pub sigma_exo: f64,
    pub chi: f64,
    pub aug: f64,
    pub lambda: f64,
    pub seed: u64,
}

/// One result row.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub point: SweepPoint,
    pub llo: Option<LloReport>,
    pub controllable: Option<f64>,
    pub stochastic: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub oracle_loss: Option<f64>,
    pub status: String,
    pub wall_clock_ms: u128,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunRecord {
    pub fn to_csv_row(&self, experiment: ExperimentName, latent: LatentKind) -> String {
        let p = &self.point;
        let latent_kind = if self.llo.is_some() { latent.to_string() } else { String::new() };
        [
            experiment.as_str().to_string(),
            p.seed.to_string(),
            p.d_z.to_string(),
            p.sigma_iid.to_string(),
            p.sigma_exo.to_string(),
            p.chi.to_string(),
            p.aug.to_string(),
            p.lambda.to_string(),
            fmt_opt(self.llo.map(|r| r.nmse_q)),
            fmt_opt(self.llo.map(|r| r.nmse_eps)),
            fmt_opt(self.llo.map(|r| r.nmse_o)),
            fmt_opt(self.llo.map(|r| r.llo)),
            latent_kind,
            fmt_opt(self.controllable),
            fmt_opt(self.stochastic),
            fmt_opt(self.final_train_loss),
            fmt_opt(self.oracle_loss),
            self.status.clone(),
            self.wall_clock_ms.to_string(),
        ]
        .join(",")
    }
}

/// Cartesian product of the configured axes, sorted, seeds innermost.
pub fn sweep_points(cfg: &ExperimentConfig) -> Vec<SweepPoint> {
    let mut points = Vec::new();
    for &d_z in &cfg.d_z {
        for &sigma_iid in &cfg.sigma_iid {
            for &sigma_exo in &cfg.sigma_exo {
                for &chi in &cfg.chi {
                    for &aug in &cfg.aug {
                        for &lambda in &cfg.lambda {
                            for &seed in &cfg.seeds {
                                points.push(SweepPoint {
                                    d_z,
                                    sigma_iid,
                                    sigma_exo,
                                    chi,
                                    aug,
                                    lambda,
                                    seed,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    points
}

fn noise_for(point: &SweepPoint) -> NoiseSpec {
    if point.sigma_exo > 0.0 {
        NoiseSpec::Exo { sigma: point.sigma_exo }
    } else if point.sigma_iid > 0.0 {
        NoiseSpec::Iid { sigma: point.sigma_iid }
    } else {
        NoiseSpec::None
    }
}

/// Execute one linear sweep point: generate the env, train, evaluate LLO,
/// and attach the analytic final/oracle losses.
pub fn run_linear_point(cfg: &ExperimentConfig, point: &SweepPoint) -> Result<RunRecord, String> {
    let t0 = Instant::now();
    let env = EnvSpec::generate(&EnvConfig {
        d_o: cfg.d_o,
        d_a: cfg.d_a,
        d_b: cfg.d_b,
        sigma_q: cfg.sigma_q,
        noise: noise_for(point),
        chi: point.chi,
        orthogonal_exo: cfg.orthogonal_exo,
        seed: point.seed,
    })
    .map_err(|e| e.to_string())?;
    let train_cfg = TrainConfig {
        d_z: point.d_z,
        steps: cfg.steps,
        batch: cfg.batch,
        lr: if cfg.lr_end == cfg.lr {
            LrSchedule::Constant(cfg.lr)
        } else {
            LrSchedule::LinearDecay { start: cfg.lr, end: cfg.lr_end }
        },
        aug_variance: point.aug,
        action_head: point.lambda > 0.0,
        action_weight: cfg.action_weight,
        label_fraction: point.lambda,
        stop_gradient_action: false,
        seed: point.seed,
    };
    let trained = train(&env, &train_cfg).map_err(|e| e.to_string())?;
    let mut eval_rng = Rng::stream(point.seed, STREAM_EVAL);
    let report = llo(&trained.params, &env, cfg.n_eval, cfg.latent, &mut eval_rng)
        .map_err(|e| e.to_string())?;
    let final_loss = expected_recon_loss(&env, &trained.params, 0.0);
    // The eigendecomposition optimum applies to the uncorrelated-policy case.
    let oracle_loss = if point.chi == 0.0 {
        PcaOracle::for_env(&env, point.d_z).ok().map(|o| o.optimal_loss())
    } else {
        None
    };
    Ok(RunRecord {
        point: point.clone(),
        llo: Some(report),
        controllable: None,
        stochastic: None,
        final_train_loss: Some(final_loss),
        oracle_loss,
        status: "ok".into(),
        wall_clock_ms: t0.elapsed().as_millis(),
    })
}

fn grid_noise_for(intensity: f64) -> Result<GridNoise, String> {
    match intensity {
        x if x == 0.0 => Ok(GridNoise::None),
        x if x == 1.0 => Ok(GridNoise::Low),
        x if x == 2.0 => Ok(GridNoise::High),
        other => Err(format!("grid noise intensity must be 0, 1, or 2; got {other}")),
    }
}

/// Execute one grid sweep point (table1 rows).
pub fn run_grid_point(cfg: &ExperimentConfig, point: &SweepPoint) -> Result<RunRecord, String> {
    let t0 = Instant::now();
    let noise = grid_noise_for(point.sigma_iid)?;
    let policy = if point.chi > 0.0 {
        GridPolicy::Correlated { p_pattern: point.chi }
    } else {
        GridPolicy::Uniform
    };
    let env = GridEnvSpec { noise, policy, seed: point.seed };
    let train_cfg = GridTrainConfig {
        steps: cfg.grid_steps,
        batch: cfg.grid_batch,
        augment: point.aug > 0.0,
        label_fraction: point.lambda,
        seed: point.seed,
        ..GridTrainConfig::default()
    };
    let trained = train_grid(&env, &train_cfg).map_err(|e| e.to_string())?;
    let mut eval_rng = Rng::stream(point.seed, STREAM_EVAL);
    let eval = eval_grid(&trained.model, &env, cfg.n_eval, &mut eval_rng).map_err(|e| e.to_string())?;
    let final_loss = trained.loss_trace.last().copied();
    Ok(RunRecord {
        point: point.clone(),
        llo: None,
        controllable: Some(eval.controllable),
        stochastic: eval.stochastic,
        final_train_loss: final_loss,
        oracle_loss: None,
        status: "ok".into(),
        wall_clock_ms: t0.elapsed().as_millis(),
    })
}

/// The six distinct table1 training settings as sweep points
/// (noise level, policy, augmentation, label fraction), seeds innermost.
pub fn table1_points(cfg: &ExperimentConfig) -> Vec<SweepPoint> {
    let variants: [(f64, f64, f64, f64); 6] = [
        (0.0, 0.0, 0.0, 0.0), // no noise
        (1.0, 0.0, 0.0, 0.0), // low noise baseline
        (2.0, 0.0, 0.0, 0.0), // high noise
        (1.0, 0.95, 0.0, 0.0), // correlated policy
        (1.0, 0.0, 1.0, 0.0), // shift augmentation
        (1.0, 0.0, 0.0, 0.01), // 1% action prediction
    ];
    let mut points = Vec::new();
    for (sigma_iid, chi, aug, lambda) in variants {
        for &seed in &cfg.seeds {
            points.push(SweepPoint { d_z: 8, sigma_iid, sigma_exo: 0.0, chi, aug, lambda, seed });
        }
    }
    points
}

pub struct ExperimentOutput {
    pub csv_path: PathBuf,
    pub records: Vec<RunRecord>,
    pub failures: usize,
}

/// Run every sweep point (in parallel), write the CSV and plots.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, String> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| e.to_string())?;
    let is_grid = cfg.experiment == ExperimentName::Table1;
    let points = if is_grid { table1_points(cfg) } else { sweep_points(cfg) };

    let records: Vec<RunRecord> = points
        .par_iter()
        .map(|point| {
            let run = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                if is_grid {
                    run_grid_point(cfg, point)
                } else {
                    run_linear_point(cfg, point)
                }
            }));
            match run {
                Ok(Ok(rec)) => rec,
                Ok(Err(msg)) => failed_record(point, &msg),
                Err(panic) => {
                    let msg = panic
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "panic".into());
                    failed_record(point, &msg)
                }
            }
        })
        .collect();

    let csv_path = cfg.out_dir.join(format!("{}.csv", cfg.experiment.as_str()));
    let mut text = format!("# lam-csv v{CSV_SCHEMA_VERSION}\n{CSV_HEADER}\n");
    for rec in &records {
        text.push_str(&rec.to_csv_row(cfg.experiment, cfg.latent));
        text.push('\n');
    }
    std::fs::write(&csv_path, text).map_err(|e| e.to_string())?;
    std::fs::write(cfg.out_dir.join("config.resolved"), crate::config::render_config(cfg))
        .map_err(|e| e.to_string())?;

    plot::experiment_plots(cfg, &records).map_err(|e| e.to_string())?;

    let failures = records.iter().filter(|r| r.status != "ok").count();
    Ok(ExperimentOutput { csv_path, records, failures })
}

fn failed_record(point: &SweepPoint, msg: &str) -> RunRecord {
    // Keep the CSV parseable: strip field and line separators from the message.
    let clean: String =
        msg.chars().map(|c| if c == ',' || c == '\n' || c == '\r' { ';' } else { c }).collect();
    RunRecord {
        point: point.clone(),
        llo: None,
        controllable: None,
        stochastic: None,
        final_train_loss: None,
        oracle_loss: None,
        status: format!("failed:{clean}"),
        wall_clock_ms: 0,
    }
}

/// Mean and standard error over seeds of a per-seed metric.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ConfigDraft;
    use std::path::Path;

    fn tiny_cfg(name: ExperimentName, dir: &Path) -> ExperimentConfig {
        let mut draft = ConfigDraft::default();
        draft.experiment = Some(name);
        draft.d_o = Some(16);
        draft.d_a = Some(4);
        draft.d_b = Some(4);
        draft.steps = Some(60);
        draft.batch = Some(32);
        draft.n_eval = Some(256);
        draft.seeds = Some(vec![0, 1]);
        draft.d_z = Some(vec![2, 4]);
        draft.out_dir = Some(dir.to_path_buf());
        draft.resolve(dir).unwrap()
    }

    #[test]
    fn sweep_order_is_axes_then_seed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(ExperimentName::Fig4Left, dir.path());
        let points = sweep_points(&cfg);
        assert_eq!(points.len(), 4);
        assert_eq!((points[0].d_z, points[0].seed), (2, 0));
        assert_eq!((points[1].d_z, points[1].seed), (2, 1));
        assert_eq!((points[2].d_z, points[2].seed), (4, 0));
    }

    #[test]
    fn experiment_csv_is_deterministic_modulo_wall_clock() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(ExperimentName::Fig4Left, dir.path());
        let out1 = run_experiment(&cfg).unwrap();
        let text1 = std::fs::read_to_string(&out1.csv_path).unwrap();
        let out2 = run_experiment(&cfg).unwrap();
        let text2 = std::fs::read_to_string(&out2.csv_path).unwrap();
        assert_eq!(out1.failures, 0);
        let strip = |t: &str| -> Vec<String> {
            t.lines()
                .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap_or_else(|| l.to_string()))
                .collect()
        };
        assert_eq!(strip(&text1), strip(&text2));
        assert!(text1.lines().nth(1).unwrap().starts_with("experiment,seed"));
    }

    #[test]
    fn failure_rows_are_marked_and_do_not_abort() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(ExperimentName::Fig4Left, dir.path());
        // d_z beyond d_o makes training fail for one axis value only.
        cfg.d_z = vec![4, 17];
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.failures, 2, "two seeds of the bad point fail");
        let ok_rows = out.records.iter().filter(|r| r.status == "ok").count();
        assert_eq!(ok_rows, 2);
        let text = std::fs::read_to_string(&out.csv_path).unwrap();
        assert!(text.contains("failed:"), "failure rows marked in CSV");
    }
}

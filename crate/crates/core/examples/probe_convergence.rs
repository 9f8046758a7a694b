// Scratch probe: convergence of training against the closed-form optimum.
use lam_core::datagen::{EnvConfig, EnvSpec, NoiseSpec};
use lam_core::evaluator::{llo, LatentKind};
use lam_core::linear_lam::{train, LrSchedule, TrainConfig};
use lam_core::oracle::{expected_recon_loss, PcaOracle};
use lam_core::Rng;
use std::time::Instant;

fn main() {
    let schedules = [
        ("const 1e-3", LrSchedule::Constant(1e-3)),
        ("const 3e-3", LrSchedule::Constant(3e-3)),
        ("decay 1e-2 -> 0", LrSchedule::LinearDecay { start: 1e-2, end: 0.0 }),
        ("decay 3e-3 -> 0", LrSchedule::LinearDecay { start: 3e-3, end: 0.0 }),
    ];
    for (name, lr) in schedules {
        println!("=== schedule {name}");
        for d_z in [1usize, 2, 4, 8] {
            let env = EnvSpec::generate(&EnvConfig {
                d_o: 32,
                d_a: 4,
                d_b: 4,
                sigma_q: 1.0,
                noise: NoiseSpec::Iid { sigma: 0.5 },
                seed: 1,
                ..EnvConfig::default()
            })
            .unwrap();
            let t0 = Instant::now();
            let cfg = TrainConfig { d_z, steps: 4000, batch: 128, lr, seed: 7, ..TrainConfig::default() };
            let r = train(&env, &cfg).unwrap();
            let loss = expected_recon_loss(&env, &r.params, 0.0);
            let oracle = PcaOracle::for_env(&env, d_z).unwrap();
            let opt = oracle.optimal_loss();
            let (b_or, d_or) = oracle.optimal_bd();
            let bd_or = b_or.matmul(&d_or);
            let bd_tr = {
                // project trained BD
                r.params.b.matmul(&r.params.d)
            };
            let dist = bd_tr.sub(&bd_or).frob_norm();
            println!(
                "  d_z {d_z}: trained {loss:.5} opt {opt:.5} rel_excess {:.4} |BD-BD*| {dist:.4} tie {} ({:.1?})",
                (loss - opt) / opt,
                oracle.tie_warning,
                t0.elapsed()
            );
        }
    }
    // Case 1: noise none, angles + LLO
    let env = EnvSpec::generate(&EnvConfig {
        d_o: 32,
        d_a: 8,
        d_b: 8,
        noise: NoiseSpec::None,
        seed: 2,
        ..EnvConfig::default()
    })
    .unwrap();
    for (name, lr, steps) in [
        ("const 1e-3 4000", LrSchedule::Constant(1e-3), 4000usize),
        ("decay 1e-2 4000", LrSchedule::LinearDecay { start: 1e-2, end: 0.0 }, 4000),
        ("decay 1e-2 8000", LrSchedule::LinearDecay { start: 1e-2, end: 0.0 }, 8000),
    ] {
        let t0 = Instant::now();
        let cfg = TrainConfig { d_z: 8, steps, batch: 128, lr, seed: 3, ..TrainConfig::default() };
        let r = train(&env, &cfg).unwrap();
        let angles = lam_core::numerics::principal_angles(&r.params.b, &env.x).unwrap();
        let max_angle = angles.iter().cloned().fold(0.0f64, f64::max);
        let report = llo(&r.params, &env, 8192, LatentKind::Surrogate, &mut Rng::new(11)).unwrap();
        let loss = expected_recon_loss(&env, &r.params, 0.0);
        println!(
            "case1 {name}: loss {loss:.3e} max_angle {max_angle:.2e} llo {:.4} nmse_q {:.2e} ({:.1?})",
            report.llo, report.nmse_q, t0.elapsed()
        );
    }
}

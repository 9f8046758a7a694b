// Scratch probe: action-prediction weight needed to flip the optimum.
use lam_core::datagen::{EnvConfig, EnvSpec, NoiseSpec};
use lam_core::evaluator::{llo, LatentKind};
use lam_core::linear_lam::{train, LrSchedule, TrainConfig};
use lam_core::Rng;

fn main() {
    for &w in &[1.0f64, 10.0, 30.0, 100.0, 300.0] {
        for steps in [4000usize, 8000] {
            let env = EnvSpec::generate(&EnvConfig {
                d_o: 64,
                d_a: 8,
                d_b: 8,
                noise: NoiseSpec::Exo { sigma: 2.0 },
                orthogonal_exo: true,
                seed: 15,
                ..EnvConfig::default()
            })
            .unwrap();
            let cfg = TrainConfig {
                d_z: 8,
                steps,
                batch: 128,
                lr: LrSchedule::Constant(1e-3),
                aug_variance: 0.1,
                action_head: true,
                action_weight: Some(w),
                label_fraction: 0.01,
                seed: 25,
                ..TrainConfig::default()
            };
            let r = train(&env, &cfg).unwrap();
            let y = env.y.as_ref().unwrap();
            let y_basis = lam_core::numerics::orthonormal_columns(y).unwrap();
            let dy = r.params.d.matmul(&y_basis).frob_norm() / r.params.d.frob_norm();
            let rep = llo(&r.params, &env, 8192, LatentKind::TrueLatent, &mut Rng::new(35)).unwrap();
            println!(
                "w {w} steps {steps}: llo {:.4} (q {:.4} eps {:.4} o {:.4}) |DY|/|D| {dy:.4}",
                rep.llo, rep.nmse_q, rep.nmse_eps, rep.nmse_o
            );
        }
    }
}

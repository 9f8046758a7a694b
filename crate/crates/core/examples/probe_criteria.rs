// Scratch probe: LLO-based acceptance behaviors.
use lam_core::datagen::{EnvConfig, EnvSpec, NoiseSpec};
use lam_core::evaluator::{llo, LatentKind};
use lam_core::linear_lam::{train, LrSchedule, TrainConfig};
use lam_core::oracle::closed_form_a;
use lam_core::{Mat, Rng};
use std::time::Instant;

fn base_cfg(d_z: usize, seed: u64) -> TrainConfig {
    TrainConfig { d_z, steps: 4000, batch: 128, lr: LrSchedule::Constant(1e-3), seed, ..TrainConfig::default() }
}

fn main() {
    let t0 = Instant::now();
    // Criterion 3: iid noise sweep at d_o=32, d_a=d_z=8.
    println!("== criterion 3 (iid sweep, d_o=32)");
    for sigma in [0.0, 0.25, 0.5, 1.0, 2.0] {
        let env = EnvSpec::generate(&EnvConfig {
            d_o: 32, d_a: 8, d_b: 8,
            noise: NoiseSpec::Iid { sigma },
            seed: 10,
            ..EnvConfig::default()
        }).unwrap();
        let r = train(&env, &base_cfg(8, 20)).unwrap();
        let rep = llo(&r.params, &env, 8192, LatentKind::Surrogate, &mut Rng::new(30)).unwrap();
        println!("  sigma {sigma}: llo {:.4} (q {:.4} eps {:.4} o {:.4})", rep.llo, rep.nmse_q, rep.nmse_eps, rep.nmse_o);
    }

    // Criterion 4: exo noise at d_o=64, d_z=d_a=8, sigma_exo in {0.5, 2}.
    println!("== criterion 4 (exo, d_o=64)");
    for sigma in [0.5, 2.0] {
        let env = EnvSpec::generate(&EnvConfig {
            d_o: 64, d_a: 8, d_b: 8,
            noise: NoiseSpec::Exo { sigma },
            seed: 11,
            ..EnvConfig::default()
        }).unwrap();
        let r = train(&env, &base_cfg(8, 21)).unwrap();
        let rep = llo(&r.params, &env, 8192, LatentKind::Surrogate, &mut Rng::new(31)).unwrap();
        println!("  sigma_exo {sigma}: llo {:.4} (q {:.4} eps {:.4} o {:.4})", rep.llo, rep.nmse_q, rep.nmse_eps, rep.nmse_o);
    }

    // Criterion 5: chi=0.5 trained A vs closed form; d_o=32, d_a=8, d_z=8.
    println!("== criterion 5 (closed-form A at chi=0.5)");
    for (name, lr) in [
        ("const 1e-3", LrSchedule::Constant(1e-3)),
        ("decay 3e-3", LrSchedule::LinearDecay { start: 3e-3, end: 0.0 }),
    ] {
        let env = EnvSpec::generate(&EnvConfig {
            d_o: 32, d_a: 8, d_b: 8,
            noise: NoiseSpec::Iid { sigma: 0.0 },
            chi: 0.5,
            seed: 12,
            ..EnvConfig::default()
        }).unwrap();
        let cfg = TrainConfig { lr, ..base_cfg(8, 22) };
        let r = train(&env, &cfg).unwrap();
        let a_star = closed_form_a(&env, &r.params.b, &r.params.c, &r.params.d);
        let rel = r.params.a.sub(&a_star).frob_norm() / a_star.frob_norm();
        println!("  {name}: |A - A*|/|A*| = {rel:.4}");
    }

    // Criterion 5 ordering: LLO decreasing in chi (one seed probe).
    println!("== criterion 5 (chi sweep)");
    for chi in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let env = EnvSpec::generate(&EnvConfig {
            d_o: 32, d_a: 8, d_b: 8, chi,
            noise: NoiseSpec::Iid { sigma: 0.0 },
            seed: 13,
            ..EnvConfig::default()
        }).unwrap();
        let r = train(&env, &base_cfg(8, 23)).unwrap();
        let rep = llo(&r.params, &env, 8192, LatentKind::Surrogate, &mut Rng::new(33)).unwrap();
        println!("  chi {chi}: llo {:.4} (q {:.4} o {:.4})", rep.llo, rep.nmse_q, rep.nmse_o);
    }

    // Criterion 6: augmentation pins A≈I, C≈−D; true-latent LLO.
    println!("== criterion 6 (augmentation, d_o=32, sigma_iid=0)");
    for (aug, steps) in [(0.0, 4000), (0.1, 4000), (0.1, 8000)] {
        let env = EnvSpec::generate(&EnvConfig {
            d_o: 32, d_a: 8, d_b: 8,
            noise: NoiseSpec::Iid { sigma: 0.0 },
            seed: 14,
            ..EnvConfig::default()
        }).unwrap();
        let cfg = TrainConfig { aug_variance: aug, steps, ..base_cfg(8, 24) };
        let r = train(&env, &cfg).unwrap();
        let d_o = 32.0f64;
        let a_dev = r.params.a.sub(&Mat::identity(32)).frob_norm() / d_o.sqrt();
        let cd = r.params.c.add(&r.params.d).frob_norm() / r.params.d.frob_norm();
        let rep = llo(&r.params, &env, 8192, LatentKind::TrueLatent, &mut Rng::new(34)).unwrap();
        println!("  aug {aug} steps {steps}: |A-I|/sqrt(d_o) {a_dev:.4} |C+D|/|D| {cd:.4} true-llo {:.4}", rep.llo);
    }

    // Criterion 7: action prediction with exo noise, Y orthogonal, 1% labels.
    println!("== criterion 7 (action prediction, d_o=64, sigma_exo=2, Y orth)");
    for (labels, aug) in [(0.0, 0.1), (0.01, 0.1)] {
        let env = EnvSpec::generate(&EnvConfig {
            d_o: 64, d_a: 8, d_b: 8,
            noise: NoiseSpec::Exo { sigma: 2.0 },
            orthogonal_exo: true,
            seed: 15,
            ..EnvConfig::default()
        }).unwrap();
        let cfg = TrainConfig {
            aug_variance: aug,
            action_head: labels > 0.0,
            label_fraction: labels,
            steps: 4000,
            ..base_cfg(8, 25)
        };
        let r = train(&env, &cfg).unwrap();
        let y = env.y.as_ref().unwrap();
        let y_basis = lam_core::numerics::orthonormal_columns(y).unwrap();
        let dy = r.params.d.matmul(&y_basis).frob_norm() / r.params.d.frob_norm();
        let rep = llo(&r.params, &env, 8192, LatentKind::TrueLatent, &mut Rng::new(35)).unwrap();
        println!("  labels {labels} aug {aug}: llo {:.4} (q {:.4} eps {:.4}) |DY|/|D| {dy:.4}", rep.llo, rep.nmse_q, rep.nmse_eps);
    }
    println!("total {:?}", t0.elapsed());
}

// Scratch probe: grid-world training across Table-1 settings.
use lam_core::gridworld::{
    eval_grid, train_grid, GridEnvSpec, GridNoise, GridPolicy, GridTrainConfig,
};
use lam_core::Rng;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);

    let cases: Vec<(&str, GridNoise, GridPolicy, bool, f64)> = vec![
        ("no_noise  ", GridNoise::None, GridPolicy::Uniform, false, 0.0),
        ("low_noise ", GridNoise::Low, GridPolicy::Uniform, false, 0.0),
        ("high_noise", GridNoise::High, GridPolicy::Uniform, false, 0.0),
        ("correlated", GridNoise::Low, GridPolicy::DEFAULT_CORRELATED, false, 0.0),
        ("augmented ", GridNoise::Low, GridPolicy::Uniform, true, 0.0),
        ("actpred_1%", GridNoise::Low, GridPolicy::Uniform, false, 0.01),
    ];
    for (name, noise, policy, aug, labels) in cases {
        let t0 = Instant::now();
        let env = GridEnvSpec { noise, policy, seed: 1000 + seed };
        let cfg = GridTrainConfig {
            steps,
            augment: aug,
            label_fraction: labels,
            seed,
            ..GridTrainConfig::default()
        };
        let r = train_grid(&env, &cfg).unwrap();
        let eval = eval_grid(&r.model, &env, 4096, &mut Rng::new(99)).unwrap();
        let tail: f64 = r.loss_trace[r.loss_trace.len() - 100..].iter().sum::<f64>() / 100.0;
        println!(
            "{name} steps {steps}: controllable {:.3} stochastic {:?} usage {:?} tail-loss {tail:.4} ({:.1?})",
            eval.controllable,
            eval.stochastic.map(|s| (s * 1000.0).round() / 1000.0),
            eval.code_usage,
            t0.elapsed()
        );
    }
}

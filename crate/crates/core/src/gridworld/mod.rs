//! The 4×4 grid-world: a controllable square over Bernoulli noise.
//!
//! Observations are 4×4 images. The top 3×4 region contains a single square
//! of intensity 1.0 that five actions (up, down, left, right, stay) move by
//! one cell, clipping at the region boundary. The bottom row holds four
//! Bernoulli(0.5) noise bits scaled by the environment's noise intensity and
//! resampled every step. Data collection is either uniform over actions or
//! correlated: with probability 0.95 the action follows a fixed snaking
//! pattern through the region.

mod model;

pub use model::{
    eval_grid, train_grid, GridEval, GridModel, GridModelConfig, GridTrainConfig, GridTrainResult,
    GridworldError,
};

use crate::{Mat, Rng};

pub const GRID_W: usize = 4;
pub const GRID_H: usize = 4;
pub const TOP_ROWS: usize = 3;
pub const N_PIXELS: usize = GRID_W * GRID_H;
pub const N_ACTIONS: usize = 5;
pub const N_POSITIONS: usize = TOP_ROWS * GRID_W;

/// Per-pixel variance of the square's position indicator over the top region.
pub const TOP_PIXEL_VARIANCE: f64 = (1.0 / N_POSITIONS as f64) * (1.0 - 1.0 / N_POSITIONS as f64);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridAction {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Stay = 4,
}

impl GridAction {
    pub const ALL: [GridAction; N_ACTIONS] =
        [GridAction::Up, GridAction::Down, GridAction::Left, GridAction::Right, GridAction::Stay];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> GridAction {
        Self::ALL[i]
    }
}

/// Bottom-row noise intensity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridNoise {
    None,
    Low,
    High,
}

impl GridNoise {
    pub fn intensity(self) -> f64 {
        match self {
            GridNoise::None => 0.0,
            GridNoise::Low => 1.0,
            GridNoise::High => 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GridPolicy {
    Uniform,
    /// Follow the snaking pattern with probability `p_pattern`, otherwise act
    /// uniformly at random.
    Correlated { p_pattern: f64 },
}

impl GridPolicy {
    pub const DEFAULT_CORRELATED: GridPolicy = GridPolicy::Correlated { p_pattern: 0.95 };
}

#[derive(Clone, Copy, Debug)]
pub struct GridEnvSpec {
    pub noise: GridNoise,
    pub policy: GridPolicy,
    pub seed: u64,
}

/// One observation: the square's cell plus the noise bits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridObs {
    pub row: usize,
    pub col: usize,
    pub noise_bits: [bool; GRID_W],
    pub intensity: f64,
}

impl GridObs {
    pub fn pixels(&self) -> [f64; N_PIXELS] {
        let mut px = [0.0; N_PIXELS];
        px[self.row * GRID_W + self.col] = 1.0;
        for (j, &bit) in self.noise_bits.iter().enumerate() {
            px[TOP_ROWS * GRID_W + j] = if bit { self.intensity } else { 0.0 };
        }
        px
    }
}

/// The fixed snaking pattern: right along row 0, down, left along row 1,
/// down, right along row 2, then up from the far corner to restart the walk.
pub fn pattern_action(row: usize, col: usize) -> GridAction {
    debug_assert!(row < TOP_ROWS && col < GRID_W);
    match row {
        0 => {
            if col < GRID_W - 1 {
                GridAction::Right
            } else {
                GridAction::Down
            }
        }
        1 => {
            if col > 0 {
                GridAction::Left
            } else {
                GridAction::Down
            }
        }
        _ => {
            if col < GRID_W - 1 {
                GridAction::Right
            } else {
                GridAction::Up
            }
        }
    }
}

fn sample_bits(intensity: f64, rng: &mut Rng) -> [bool; GRID_W] {
    // Bits are drawn even at zero intensity so noise settings share streams.
    let mut bits = [false; GRID_W];
    for b in &mut bits {
        *b = rng.bernoulli(0.5);
    }
    let _ = intensity;
    bits
}

/// Uniformly random observation: square position uniform over the 12 cells.
pub fn sample_obs(env: &GridEnvSpec, rng: &mut Rng) -> GridObs {
    let pos = rng.below(N_POSITIONS);
    GridObs {
        row: pos / GRID_W,
        col: pos % GRID_W,
        noise_bits: sample_bits(env.noise.intensity(), rng),
        intensity: env.noise.intensity(),
    }
}

/// Draw an action from the data-collection policy at the given observation.
pub fn policy_action(policy: GridPolicy, obs: &GridObs, rng: &mut Rng) -> GridAction {
    match policy {
        GridPolicy::Uniform => GridAction::from_index(rng.below(N_ACTIONS)),
        GridPolicy::Correlated { p_pattern } => {
            if rng.bernoulli(p_pattern) {
                pattern_action(obs.row, obs.col)
            } else {
                GridAction::from_index(rng.below(N_ACTIONS))
            }
        }
    }
}

/// Apply an action: the square moves one cell, clipping at the 3×4 boundary,
/// and the bottom-row noise is resampled.
pub fn grid_step(obs: &GridObs, action: GridAction, env: &GridEnvSpec, rng: &mut Rng) -> GridObs {
    let (row, col) = match action {
        GridAction::Up => (obs.row.saturating_sub(1), obs.col),
        GridAction::Down => ((obs.row + 1).min(TOP_ROWS - 1), obs.col),
        GridAction::Left => (obs.row, obs.col.saturating_sub(1)),
        GridAction::Right => (obs.row, (obs.col + 1).min(GRID_W - 1)),
        GridAction::Stay => (obs.row, obs.col),
    };
    GridObs {
        row,
        col,
        noise_bits: sample_bits(env.noise.intensity(), rng),
        intensity: env.noise.intensity(),
    }
}

/// A batch of single-step transitions.
#[derive(Clone, Debug)]
pub struct GridBatch {
    pub o: Mat,
    pub actions: Vec<usize>,
    pub o_next: Mat,
    pub labels: Vec<bool>,
}

impl GridBatch {
    pub fn n(&self) -> usize {
        self.o.rows()
    }
}

/// Sample `n` independent transitions (fresh initial position each).
/// Labels are a per-sample Bernoulli(`label_fraction`) mask.
pub fn sample_grid_batch(env: &GridEnvSpec, n: usize, label_fraction: f64, rng: &mut Rng) -> GridBatch {
    let mut o = Mat::zeros(n, N_PIXELS);
    let mut o_next = Mat::zeros(n, N_PIXELS);
    let mut actions = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let obs = sample_obs(env, rng);
        let action = policy_action(env.policy, &obs, rng);
        let next = grid_step(&obs, action, env, rng);
        o.row_mut(i).copy_from_slice(&obs.pixels());
        o_next.row_mut(i).copy_from_slice(&next.pixels());
        actions.push(action.index());
        labels.push(label_fraction > 0.0 && rng.bernoulli(label_fraction));
    }
    GridBatch { o, actions, o_next, labels }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftDir {
    Left,
    Right,
}

/// Rotate every row of a 4×4 image one column left or right (periodic).
pub fn shift_image(pixels: &[f64], dir: ShiftDir) -> Vec<f64> {
    assert_eq!(pixels.len(), N_PIXELS);
    let mut out = vec![0.0; N_PIXELS];
    for y in 0..GRID_H {
        for x in 0..GRID_W {
            let src = match dir {
                ShiftDir::Left => (x + 1) % GRID_W,
                ShiftDir::Right => (x + GRID_W - 1) % GRID_W,
            };
            out[y * GRID_W + x] = pixels[y * GRID_W + src];
        }
    }
    out
}

/// Shift an observation pair with one shared direction.
pub fn shift_augment(o: &[f64], o_next: &[f64], dir: ShiftDir) -> (Vec<f64>, Vec<f64>) {
    (shift_image(o, dir), shift_image(o_next, dir))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(noise: GridNoise, policy: GridPolicy, seed: u64) -> GridEnvSpec {
        GridEnvSpec { noise, policy, seed }
    }

    // The movement rule, restated independently: clip the target cell to the
    // 3×4 region. Checked for all 60 (position, action) pairs.
    #[test]
    fn step_rule_exhaustive() {
        let e = env(GridNoise::Low, GridPolicy::Uniform, 0);
        let mut rng = Rng::new(1);
        for pos in 0..N_POSITIONS {
            let (r, c) = (pos / GRID_W, pos % GRID_W);
            for action in GridAction::ALL {
                let obs = GridObs { row: r, col: c, noise_bits: [false; 4], intensity: 1.0 };
                let next = grid_step(&obs, action, &e, &mut rng);
                let (dr, dc): (isize, isize) = match action {
                    GridAction::Up => (-1, 0),
                    GridAction::Down => (1, 0),
                    GridAction::Left => (0, -1),
                    GridAction::Right => (0, 1),
                    GridAction::Stay => (0, 0),
                };
                let want_r = (r as isize + dr).clamp(0, TOP_ROWS as isize - 1) as usize;
                let want_c = (c as isize + dc).clamp(0, GRID_W as isize - 1) as usize;
                assert_eq!((next.row, next.col), (want_r, want_c), "pos ({r},{c}) action {action:?}");
                // Single-square invariant.
                let px = next.pixels();
                let top_sum: f64 = px[..TOP_ROWS * GRID_W].iter().sum();
                assert_eq!(top_sum, 1.0);
            }
        }
    }

    #[test]
    fn stay_keeps_position_and_wall_clips() {
        let e = env(GridNoise::Low, GridPolicy::Uniform, 0);
        let mut rng = Rng::new(2);
        let obs = GridObs { row: 0, col: 0, noise_bits: [true; 4], intensity: 1.0 };
        let next = grid_step(&obs, GridAction::Stay, &e, &mut rng);
        assert_eq!((next.row, next.col), (0, 0));
        let next = grid_step(&obs, GridAction::Up, &e, &mut rng);
        assert_eq!((next.row, next.col), (0, 0), "up against the wall is a no-op");
    }

    #[test]
    fn no_noise_means_zero_bottom_row() {
        let e = env(GridNoise::None, GridPolicy::Uniform, 3);
        let b = sample_grid_batch(&e, 100, 0.0, &mut Rng::new(4));
        for i in 0..b.n() {
            for j in TOP_ROWS * GRID_W..N_PIXELS {
                assert_eq!(b.o.at(i, j), 0.0);
                assert_eq!(b.o_next.at(i, j), 0.0);
            }
        }
    }

    #[test]
    fn high_noise_scales_bits() {
        let e = env(GridNoise::High, GridPolicy::Uniform, 5);
        let b = sample_grid_batch(&e, 200, 0.0, &mut Rng::new(6));
        let mut seen_two = false;
        for i in 0..b.n() {
            for j in TOP_ROWS * GRID_W..N_PIXELS {
                let v = b.o.at(i, j);
                assert!(v == 0.0 || v == 2.0);
                seen_two |= v == 2.0;
            }
        }
        assert!(seen_two);
    }

    #[test]
    fn uniform_policy_action_frequencies() {
        let e = env(GridNoise::Low, GridPolicy::Uniform, 7);
        let n = 100_000;
        let b = sample_grid_batch(&e, n, 0.0, &mut Rng::new(8));
        for a in 0..N_ACTIONS {
            let freq = b.actions.iter().filter(|&&x| x == a).count() as f64 / n as f64;
            assert!((freq - 0.2).abs() <= 0.01, "action {a} frequency {freq}");
        }
    }

    #[test]
    fn correlated_policy_off_pattern_rate() {
        let e = env(GridNoise::Low, GridPolicy::DEFAULT_CORRELATED, 9);
        let n = 100_000;
        let mut rng = Rng::new(10);
        let mut off = 0usize;
        for _ in 0..n {
            let obs = sample_obs(&e, &mut rng);
            let a = policy_action(e.policy, &obs, &mut rng);
            if a != pattern_action(obs.row, obs.col) {
                off += 1;
            }
        }
        let rate = off as f64 / n as f64;
        // 5% random actions, of which 1/5 coincide with the pattern.
        assert!((rate - 0.05).abs() <= 0.011, "off-pattern rate {rate}");
    }

    #[test]
    fn pattern_is_a_fixed_walk_over_the_region() {
        // Spot-check the documented boustrophedon.
        assert_eq!(pattern_action(0, 0), GridAction::Right);
        assert_eq!(pattern_action(0, 3), GridAction::Down);
        assert_eq!(pattern_action(1, 3), GridAction::Left);
        assert_eq!(pattern_action(1, 0), GridAction::Down);
        assert_eq!(pattern_action(2, 0), GridAction::Right);
        assert_eq!(pattern_action(2, 3), GridAction::Up);
        // Every pattern action actually moves (never clipped into a no-op),
        // so the walk keeps circulating.
        let e = env(GridNoise::None, GridPolicy::Uniform, 0);
        let mut rng = Rng::new(11);
        for pos in 0..N_POSITIONS {
            let obs = GridObs { row: pos / GRID_W, col: pos % GRID_W, noise_bits: [false; 4], intensity: 0.0 };
            let next = grid_step(&obs, pattern_action(obs.row, obs.col), &e, &mut rng);
            assert_ne!((next.row, next.col), (obs.row, obs.col), "pattern stalls at {pos}");
        }
    }

    #[test]
    fn batches_are_deterministic_given_seed() {
        let e = env(GridNoise::Low, GridPolicy::DEFAULT_CORRELATED, 12);
        let a = sample_grid_batch(&e, 50, 0.3, &mut Rng::new(13));
        let b = sample_grid_batch(&e, 50, 0.3, &mut Rng::new(13));
        assert_eq!(a.o.data(), b.o.data());
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn shift_roundtrip_wraparound_and_mass() {
        let obs = GridObs { row: 1, col: 0, noise_bits: [true, false, true, false], intensity: 2.0 };
        let px = obs.pixels();
        let left = shift_image(&px, ShiftDir::Left);
        // Square at column 0 wraps to column 3.
        assert_eq!(left[1 * GRID_W + 3], 1.0);
        let back = shift_image(&left, ShiftDir::Right);
        assert_eq!(back.as_slice(), px.as_slice());
        let sum_orig: f64 = px.iter().sum();
        let sum_left: f64 = left.iter().sum();
        assert_eq!(sum_orig, sum_left);
    }
}

//! Synthetic controlled-Markov-process transitions.
//!
//! Observations are standard normal, actions are a χ-mix of a deterministic
//! linear policy and white noise, controllable changes act through a scaled
//! random-orthogonal effect matrix, and exogenous noise is either isotropic
//! or driven by a second agent's effect matrix. Next observations are the
//! exact sum `o' = o + q + ε`.
//!
//! Scaling conventions: "variance" of a vector quantity means per-element
//! variance. The effect matrices are scaled by `σ·√(d_o/d_cols)` so the
//! induced change has per-element variance σ² when the driving action is
//! standard normal, and the deterministic policy map has i.i.d. N(0, 1/d_o)
//! entries so its output is unit variance per element.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::numerics::{random_orthogonal, NumericsError};
use crate::{Mat, Rng};

// Env-matrix sub-streams of the env seed; fixed so the policy map does not
// depend on whether an exogenous effect matrix was generated.
const STREAM_X: u64 = 0;
const STREAM_Y: u64 = 10;
const STREAM_PI: u64 = 11;

const COLUMNS_MAGIC: &[u8; 8] = b"LAMCOLS1";

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("dimensions must be at least 1")]
    ZeroDim,
    #[error("{name} dimension {dim} exceeds observation dimension {d_o}")]
    DimTooLarge { name: &'static str, dim: usize, d_o: usize },
    #[error("chi must lie in [0, 1], got {0}")]
    ChiOutOfRange(f64),
    #[error("scale must be non-negative, got {0}")]
    NegativeScale(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad batch file: {0}")]
    Format(String),
}

/// Exogenous-noise regime.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseSpec {
    None,
    /// Isotropic Gaussian with the given per-element standard deviation.
    Iid { sigma: f64 },
    /// Effect of another agent: ε = Y·b with b standard normal.
    Exo { sigma: f64 },
}

impl NoiseSpec {
    pub fn sigma(&self) -> f64 {
        match *self {
            NoiseSpec::None => 0.0,
            NoiseSpec::Iid { sigma } | NoiseSpec::Exo { sigma } => sigma,
        }
    }
}

/// Data-collection policy: a = χ·Π_d·o + (1−χ)·π_s.
#[derive(Clone, Debug)]
pub struct PolicySpec {
    /// Determinism coefficient in [0, 1].
    pub chi: f64,
    /// Deterministic part of the policy, d_a×d_o.
    pub pi_d: Mat,
}

/// Generation parameters for [`EnvSpec::generate`].
#[derive(Clone, Debug)]
pub struct EnvConfig {
    pub d_o: usize,
    pub d_a: usize,
    pub d_b: usize,
    pub sigma_q: f64,
    pub noise: NoiseSpec,
    pub chi: f64,
    /// Force the exogenous effect matrix orthogonal to the action effect matrix.
    pub orthogonal_exo: bool,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            d_o: 128,
            d_a: 8,
            d_b: 8,
            sigma_q: 1.0,
            noise: NoiseSpec::Iid { sigma: 0.0 },
            chi: 0.0,
            orthogonal_exo: false,
            seed: 0,
        }
    }
}

/// A realized synthetic environment: dimensions, scales, and the sampled
/// effect matrices.
#[derive(Clone, Debug)]
pub struct EnvSpec {
    pub d_o: usize,
    pub d_a: usize,
    pub d_b: usize,
    pub sigma_q: f64,
    pub noise: NoiseSpec,
    pub policy: PolicySpec,
    /// Action effect matrix, d_o×d_a, columns orthogonal, scaled σ_q·√(d_o/d_a).
    pub x: Mat,
    /// Exogenous effect matrix, present only for `NoiseSpec::Exo`.
    pub y: Option<Mat>,
    pub orthogonal_exo: bool,
    pub seed: u64,
}

impl EnvSpec {
    /// Generate an environment from its configuration.
    pub fn generate(cfg: &EnvConfig) -> Result<EnvSpec, DatagenError> {
        if cfg.d_o == 0 || cfg.d_a == 0 || cfg.d_b == 0 {
            return Err(DatagenError::ZeroDim);
        }
        if cfg.d_a > cfg.d_o {
            return Err(DatagenError::DimTooLarge { name: "action", dim: cfg.d_a, d_o: cfg.d_o });
        }
        if cfg.d_b > cfg.d_o {
            return Err(DatagenError::DimTooLarge { name: "exogenous", dim: cfg.d_b, d_o: cfg.d_o });
        }
        if !(0.0..=1.0).contains(&cfg.chi) {
            return Err(DatagenError::ChiOutOfRange(cfg.chi));
        }
        if cfg.sigma_q < 0.0 {
            return Err(DatagenError::NegativeScale(cfg.sigma_q));
        }
        if cfg.noise.sigma() < 0.0 {
            return Err(DatagenError::NegativeScale(cfg.noise.sigma()));
        }

        let mut rng_x = Rng::stream(cfg.seed, STREAM_X);
        let x_scale = cfg.sigma_q * (cfg.d_o as f64 / cfg.d_a as f64).sqrt();
        let x = random_orthogonal(cfg.d_o, cfg.d_a, &mut rng_x)?.scale(x_scale);

        let y = if let NoiseSpec::Exo { sigma } = cfg.noise {
            let mut rng_y = Rng::stream(cfg.seed, STREAM_Y);
            let y_scale = sigma * (cfg.d_o as f64 / cfg.d_b as f64).sqrt();
            let base = if cfg.orthogonal_exo {
                orthogonal_complement_basis(&x, cfg.d_b, &mut rng_y)?
            } else {
                random_orthogonal(cfg.d_o, cfg.d_b, &mut rng_y)?
            };
            Some(base.scale(y_scale))
        } else {
            None
        };

        let mut rng_pi = Rng::stream(cfg.seed, STREAM_PI);
        let pi_scale = 1.0 / (cfg.d_o as f64).sqrt();
        let pi_d = rng_pi.normal_mat(cfg.d_a, cfg.d_o).scale(pi_scale);

        Ok(EnvSpec {
            d_o: cfg.d_o,
            d_a: cfg.d_a,
            d_b: cfg.d_b,
            sigma_q: cfg.sigma_q,
            noise: cfg.noise,
            policy: PolicySpec { chi: cfg.chi, pi_d },
            x,
            y,
            orthogonal_exo: cfg.orthogonal_exo,
            seed: cfg.seed,
        })
    }

    pub fn chi(&self) -> f64 {
        self.policy.chi
    }

    /// Per-element standard deviation of the exogenous noise.
    pub fn sigma_eps(&self) -> f64 {
        self.noise.sigma()
    }
}

/// Orthonormal columns spanning a random subspace of the orthogonal
/// complement of col(x).
fn orthogonal_complement_basis(x: &Mat, cols: usize, rng: &mut Rng) -> Result<Mat, NumericsError> {
    let d_o = x.rows();
    let q_x = crate::numerics::orthonormal_columns(x)?;
    let g = rng.normal_mat(d_o, cols);
    // Project out col(x), then orthonormalize.
    let proj = q_x.matmul(&q_x.matmul_tn(&g));
    let residual = g.sub(&proj);
    crate::numerics::orthonormal_columns(&residual)
}

/// One transition, unpacked.
#[derive(Clone, Debug)]
pub struct Transition {
    pub o: Vec<f64>,
    pub a: Vec<f64>,
    pub q: Vec<f64>,
    pub eps: Vec<f64>,
    pub o_next: Vec<f64>,
    pub has_label: bool,
}

/// A batch of transitions in columnar form (one row per sample).
#[derive(Clone, Debug)]
pub struct Batch {
    pub o: Mat,
    pub a: Mat,
    pub q: Mat,
    pub eps: Mat,
    pub o_next: Mat,
    pub labels: Vec<bool>,
}

impl Batch {
    pub fn n(&self) -> usize {
        self.o.rows()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l).map(|(i, _)| i).collect()
    }

    pub fn transition(&self, i: usize) -> Transition {
        Transition {
            o: self.o.row(i).to_vec(),
            a: self.a.row(i).to_vec(),
            q: self.q.row(i).to_vec(),
            eps: self.eps.row(i).to_vec(),
            o_next: self.o_next.row(i).to_vec(),
            has_label: self.labels[i],
        }
    }

    /// Columnar binary file: magic, version, then named f64 column blocks.
    pub fn write_binary(&self, path: &Path) -> Result<(), DatagenError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(COLUMNS_MAGIC)?;
        let label_col = Mat::from_fn(self.n(), 1, |i, _| if self.labels[i] { 1.0 } else { 0.0 });
        let cols: [(&str, &Mat); 6] = [
            ("o", &self.o),
            ("a", &self.a),
            ("q", &self.q),
            ("eps", &self.eps),
            ("onext", &self.o_next),
            ("label", &label_col),
        ];
        w.write_all(&(cols.len() as u32).to_le_bytes())?;
        for (name, m) in cols {
            write_column(&mut w, name, m)?;
        }
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Batch, DatagenError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| DatagenError::Format("truncated header".into()))?;
        if &magic != COLUMNS_MAGIC {
            return Err(DatagenError::Format("bad magic".into()));
        }
        let count = read_u32(&mut r)? as usize;
        let mut cols = Vec::with_capacity(count);
        for _ in 0..count {
            cols.push(read_column(&mut r)?);
        }
        let take = |name: &str| -> Result<Mat, DatagenError> {
            cols.iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| DatagenError::Format(format!("missing column {name}")))
        };
        let label_col = take("label")?;
        let labels = (0..label_col.rows()).map(|i| label_col.at(i, 0) != 0.0).collect();
        Ok(Batch {
            o: take("o")?,
            a: take("a")?,
            q: take("q")?,
            eps: take("eps")?,
            o_next: take("onext")?,
            labels,
        })
    }

    /// CSV with header `o_0..,a_0..,eps_0..,onext_0..,label`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<(), DatagenError> {
        let mut header = Vec::new();
        for j in 0..self.o.cols() {
            header.push(format!("o_{j}"));
        }
        for j in 0..self.a.cols() {
            header.push(format!("a_{j}"));
        }
        for j in 0..self.eps.cols() {
            header.push(format!("eps_{j}"));
        }
        for j in 0..self.o_next.cols() {
            header.push(format!("onext_{j}"));
        }
        header.push("label".into());
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.n() {
            let mut fields: Vec<String> = Vec::with_capacity(header.len());
            for v in self.o.row(i) {
                fields.push(v.to_string());
            }
            for v in self.a.row(i) {
                fields.push(v.to_string());
            }
            for v in self.eps.row(i) {
                fields.push(v.to_string());
            }
            for v in self.o_next.row(i) {
                fields.push(v.to_string());
            }
            fields.push(if self.labels[i] { "1".into() } else { "0".into() });
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

fn write_column(w: &mut impl Write, name: &str, m: &Mat) -> Result<(), DatagenError> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, DatagenError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| DatagenError::Format("truncated".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, DatagenError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| DatagenError::Format("truncated".into()))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_column(r: &mut impl Read) -> Result<(String, Mat), DatagenError> {
    let name_len = read_u32(r)? as usize;
    if name_len > 1024 {
        return Err(DatagenError::Format("column name too long".into()));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name).map_err(|_| DatagenError::Format("truncated".into()))?;
    let name = String::from_utf8(name).map_err(|_| DatagenError::Format("bad column name".into()))?;
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let mut data = vec![0.0f64; rows * cols];
    for v in data.iter_mut() {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf).map_err(|_| DatagenError::Format("truncated".into()))?;
        *v = f64::from_le_bytes(buf);
    }
    Ok((name, Mat::from_vec(rows, cols, data)))
}

/// Sample a batch of transitions.
///
/// Draw order is fixed (o, π_s, noise, label mask), so identical `(env, n,
/// label_fraction, rng state)` reproduces the batch bitwise. Exactly
/// ⌊label_fraction·n⌋ rows are labeled, chosen uniformly without replacement.
pub fn sample_batch(env: &EnvSpec, n: usize, label_fraction: f64, rng: &mut Rng) -> Batch {
    assert!(n >= 1, "batch size must be at least 1");
    assert!((0.0..=1.0).contains(&label_fraction), "label fraction must lie in [0, 1]");
    let o = rng.normal_mat(n, env.d_o);
    let pi_s = rng.normal_mat(n, env.d_a);
    let chi = env.policy.chi;
    let mut a = pi_s.scale(1.0 - chi);
    if chi > 0.0 {
        a.add_scaled(&o.matmul_nt(&env.policy.pi_d), chi);
    }
    let q = a.matmul_nt(&env.x);
    let eps = match env.noise {
        NoiseSpec::None => Mat::zeros(n, env.d_o),
        NoiseSpec::Iid { sigma } => {
            if sigma == 0.0 {
                Mat::zeros(n, env.d_o)
            } else {
                rng.normal_mat(n, env.d_o).scale(sigma)
            }
        }
        NoiseSpec::Exo { .. } => {
            let b = rng.normal_mat(n, env.d_b);
            b.matmul_nt(env.y.as_ref().expect("exo env has Y"))
        }
    };
    let mut o_next = o.clone();
    for ((v, qv), ev) in o_next.data_mut().iter_mut().zip(q.data()).zip(eps.data()) {
        *v = (*v + qv) + ev;
    }
    let n_labeled = (label_fraction * n as f64).floor() as usize;
    let mut labels = vec![false; n];
    for i in rng.sample_indices(n, n_labeled) {
        labels[i] = true;
    }
    Batch { o, a, q, eps, o_next, labels }
}

/// Additive augmentation: the shared vector `k` added to an observation.
pub fn augment(o: &[f64], k: &[f64]) -> Vec<f64> {
    assert_eq!(o.len(), k.len(), "augmentation vector length mismatch");
    o.iter().zip(k).map(|(a, b)| a + b).collect()
}

/// Matrix of augmentation vectors with per-element variance `variance`,
/// one row per sample.
pub fn sample_aug(n: usize, d: usize, variance: f64, rng: &mut Rng) -> Mat {
    if variance == 0.0 {
        return Mat::zeros(n, d);
    }
    rng.normal_mat(n, d).scale(variance.sqrt())
}

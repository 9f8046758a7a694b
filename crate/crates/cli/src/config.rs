//! Experiment configuration: flat key-value files plus flag overrides.
//!
//! The config format is one `key = value` pair per line, `#` comments, and
//! comma-separated lists, e.g.
//!
//! ```text
//! experiment = fig4_left
//! profile = desk
//! d_z = 2,4,8,16
//! seeds = 0,1,2
//! ```
//!
//! Values left unset fall back to per-experiment defaults under the selected
//! profile (`desk` for quick runs, `paper` for the full-scale setup:
//! d_o = 128, d_a = 8, batch 128, 4000 steps).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lam_core::evaluator::LatentKind;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {detail}")]
    BadValue { key: String, detail: String },
    #[error("malformed line {line}: expected `key = value`")]
    Malformed { line: usize },
    #[error("{key} out of range: {detail}")]
    OutOfRange { key: String, detail: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentName {
    Fig4Left,
    Fig4Mid,
    Fig4Right,
    Fig5Policy,
    Fig5Aug,
    Fig5Actpred,
    Table1,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 7] = [
        ExperimentName::Fig4Left,
        ExperimentName::Fig4Mid,
        ExperimentName::Fig4Right,
        ExperimentName::Fig5Policy,
        ExperimentName::Fig5Aug,
        ExperimentName::Fig5Actpred,
        ExperimentName::Table1,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentName::Fig4Left => "fig4_left",
            ExperimentName::Fig4Mid => "fig4_mid",
            ExperimentName::Fig4Right => "fig4_right",
            ExperimentName::Fig5Policy => "fig5_policy",
            ExperimentName::Fig5Aug => "fig5_aug",
            ExperimentName::Fig5Actpred => "fig5_actpred",
            ExperimentName::Table1 => "table1",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        Self::ALL
            .iter()
            .find(|e| e.as_str() == s)
            .copied()
            .ok_or_else(|| ConfigError::BadValue {
                key: "experiment".into(),
                detail: format!(
                    "`{s}` is not one of {}",
                    Self::ALL.map(|e| e.as_str()).join(", ")
                ),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

/// Fully resolved experiment configuration.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub experiment: ExperimentName,
    pub profile: Profile,
    pub d_o: usize,
    pub d_a: usize,
    pub d_b: usize,
    pub sigma_q: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate of a linear decay; equal to `lr` means constant.
    pub lr_end: f64,
    pub n_eval: usize,
    pub orthogonal_exo: bool,
    pub latent: LatentKind,
    /// Sweep axes (each nonempty).
    pub d_z: Vec<usize>,
    pub sigma_iid: Vec<f64>,
    pub sigma_exo: Vec<f64>,
    pub chi: Vec<f64>,
    pub aug: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Action-loss weight; `None` follows the label fraction.
    pub action_weight: Option<f64>,
    pub seeds: Vec<u64>,
    pub grid_steps: usize,
    pub grid_batch: usize,
    pub out_dir: PathBuf,
}

/// Partial configuration collected from a file and/or flags.
#[derive(Clone, Debug, Default)]
pub struct ConfigDraft {
    pub experiment: Option<ExperimentName>,
    pub profile: Option<Profile>,
    pub d_o: Option<usize>,
    pub d_a: Option<usize>,
    pub d_b: Option<usize>,
    pub sigma_q: Option<f64>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub lr_end: Option<f64>,
    pub n_eval: Option<usize>,
    pub orthogonal_exo: Option<bool>,
    pub latent: Option<LatentKind>,
    pub d_z: Option<Vec<usize>>,
    pub sigma_iid: Option<Vec<f64>>,
    pub sigma_exo: Option<Vec<f64>>,
    pub chi: Option<Vec<f64>>,
    pub aug: Option<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
    pub action_weight: Option<f64>,
    pub seeds: Option<Vec<u64>>,
    pub grid_steps: Option<usize>,
    pub grid_batch: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

fn parse_scalar<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        detail: format!("cannot parse `{v}`"),
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError> {
    v.split(',')
        .map(|s| parse_scalar(key, s))
        .collect::<Result<Vec<T>, _>>()
        .and_then(|list| {
            if list.is_empty() {
                Err(ConfigError::BadValue { key: key.into(), detail: "empty list".into() })
            } else {
                Ok(list)
            }
        })
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v.trim() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        other => Err(ConfigError::BadValue { key: key.into(), detail: format!("`{other}` is not a bool") }),
    }
}

impl ConfigDraft {
    /// Parse a flat key-value config file.
    pub fn from_file(path: &Path) -> Result<ConfigDraft, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let mut draft = ConfigDraft::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Malformed { line: i + 1 })?;
            draft.set(key.trim(), value.trim())?;
        }
        Ok(draft)
    }

    /// Apply one key-value assignment (file lines and `--set` flags share this).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "experiment" => self.experiment = Some(ExperimentName::parse(value)?),
            "profile" => {
                self.profile = Some(match value {
                    "desk" => Profile::Desk,
                    "paper" => Profile::Paper,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            detail: format!("`{other}` is not `desk` or `paper`"),
                        })
                    }
                })
            }
            "d_o" => self.d_o = Some(parse_scalar(key, value)?),
            "d_a" => self.d_a = Some(parse_scalar(key, value)?),
            "d_b" => self.d_b = Some(parse_scalar(key, value)?),
            "sigma_q" => self.sigma_q = Some(parse_scalar(key, value)?),
            "steps" => self.steps = Some(parse_scalar(key, value)?),
            "batch" => self.batch = Some(parse_scalar(key, value)?),
            "lr" => self.lr = Some(parse_scalar(key, value)?),
            "lr_end" => self.lr_end = Some(parse_scalar(key, value)?),
            "n_eval" => self.n_eval = Some(parse_scalar(key, value)?),
            "orthogonal_exo" => self.orthogonal_exo = Some(parse_bool(key, value)?),
            "latent" => {
                self.latent = Some(match value {
                    "true_latent" | "true" => LatentKind::TrueLatent,
                    "surrogate" => LatentKind::Surrogate,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            detail: format!("`{other}` is not `true_latent` or `surrogate`"),
                        })
                    }
                })
            }
            "d_z" => self.d_z = Some(parse_list(key, value)?),
            "sigma_iid" => self.sigma_iid = Some(parse_list(key, value)?),
            "sigma_exo" => self.sigma_exo = Some(parse_list(key, value)?),
            "chi" => self.chi = Some(parse_list(key, value)?),
            "aug" => self.aug = Some(parse_list(key, value)?),
            "lambda" => self.lambda = Some(parse_list(key, value)?),
            "action_weight" => self.action_weight = Some(parse_scalar(key, value)?),
            "seeds" => self.seeds = Some(parse_list(key, value)?),
            "grid_steps" => self.grid_steps = Some(parse_scalar(key, value)?),
            "grid_batch" => self.grid_batch = Some(parse_scalar(key, value)?),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Later drafts override earlier ones field by field.
    pub fn overlay(mut self, over: ConfigDraft) -> ConfigDraft {
        macro_rules! take {
            ($($f:ident),*) => { $( if over.$f.is_some() { self.$f = over.$f; } )* };
        }
        take!(
            experiment, profile, d_o, d_a, d_b, sigma_q, steps, batch, lr, lr_end, n_eval,
            orthogonal_exo, latent, d_z, sigma_iid, sigma_exo, chi, aug, lambda, action_weight,
            seeds, grid_steps, grid_batch, out_dir
        );
        self
    }

    /// Fill defaults and validate ranges.
    pub fn resolve(self, out_root: &Path) -> Result<ExperimentConfig, ConfigError> {
        let experiment = self.experiment.ok_or_else(|| ConfigError::BadValue {
            key: "experiment".into(),
            detail: "missing (set it in the config file or with --name)".into(),
        })?;
        let profile = self.profile.unwrap_or(Profile::Desk);
        let (d_o_default, steps_default, seeds_default) = match profile {
            Profile::Desk => (32, 1000, vec![0u64, 1, 2]),
            Profile::Paper => (128, 4000, vec![0u64, 1, 2, 3, 4]),
        };

        use ExperimentName::*;
        let one = |v: f64| vec![v];
        let d_z_default = match experiment {
            Fig4Left | Fig4Right => vec![1usize, 2, 4, 8, 16, 32],
            _ => vec![8],
        };
        let sigma_iid_default = match experiment {
            Fig4Mid => vec![0.0, 0.25, 0.5, 1.0, 2.0],
            Fig5Aug => vec![0.0, 0.5],
            Table1 => vec![0.0, 1.0, 2.0], // noise intensity levels
            _ => one(0.0),
        };
        let sigma_exo_default = match experiment {
            Fig4Right | Fig5Actpred => vec![0.5, 2.0],
            _ => one(0.0),
        };
        let chi_default = match experiment {
            Fig5Policy => vec![0.0, 0.25, 0.5, 0.75, 1.0],
            _ => one(0.0),
        };
        let aug_default = match experiment {
            Fig5Aug => vec![0.0, 0.01, 0.1, 1.0],
            Fig5Actpred => one(0.1),
            Table1 => vec![0.0, 1.0], // shift augmentation off/on
            _ => one(0.0),
        };
        let lambda_default = match experiment {
            Fig5Actpred => vec![0.0, 0.01],
            Table1 => vec![0.0, 0.01],
            _ => one(0.0),
        };
        let latent_default = match experiment {
            Fig5Aug | Fig5Actpred => LatentKind::TrueLatent,
            _ => LatentKind::Surrogate,
        };
        // The auxiliary action loss only reshapes the optimum once its weight
        // outweighs the variance advantage of the exogenous subspace; the
        // label fraction alone is orders of magnitude short of that.
        let action_weight_default = match experiment {
            Fig5Actpred => Some(100.0),
            _ => None,
        };

        let cfg = ExperimentConfig {
            experiment,
            profile,
            d_o: self.d_o.unwrap_or(d_o_default),
            d_a: self.d_a.unwrap_or(8),
            d_b: self.d_b.unwrap_or(8),
            sigma_q: self.sigma_q.unwrap_or(1.0),
            steps: self.steps.unwrap_or(steps_default),
            batch: self.batch.unwrap_or(128),
            lr: self.lr.unwrap_or(1e-3),
            lr_end: self.lr_end.or(self.lr).unwrap_or(1e-3),
            n_eval: self.n_eval.unwrap_or(8192),
            orthogonal_exo: self.orthogonal_exo.unwrap_or(false),
            latent: self.latent.unwrap_or(latent_default),
            d_z: self.d_z.unwrap_or(d_z_default),
            sigma_iid: self.sigma_iid.unwrap_or(sigma_iid_default),
            sigma_exo: self.sigma_exo.unwrap_or(sigma_exo_default),
            chi: self.chi.unwrap_or(chi_default),
            aug: self.aug.unwrap_or(aug_default),
            lambda: self.lambda.unwrap_or(lambda_default),
            action_weight: self.action_weight.or(action_weight_default),
            seeds: self.seeds.unwrap_or(seeds_default),
            grid_steps: self.grid_steps.unwrap_or(16_000),
            grid_batch: self.grid_batch.unwrap_or(32),
            out_dir: {
                let dir = self.out_dir.unwrap_or_else(|| PathBuf::from(experiment.as_str()));
                if dir.is_absolute() {
                    dir
                } else {
                    out_root.join(dir)
                }
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        let check_nonempty = |key: &str, len: usize| {
            if len == 0 {
                Err(ConfigError::BadValue { key: key.into(), detail: "empty axis".into() })
            } else {
                Ok(())
            }
        };
        check_nonempty("d_z", self.d_z.len())?;
        check_nonempty("sigma_iid", self.sigma_iid.len())?;
        check_nonempty("sigma_exo", self.sigma_exo.len())?;
        check_nonempty("chi", self.chi.len())?;
        check_nonempty("aug", self.aug.len())?;
        check_nonempty("lambda", self.lambda.len())?;
        check_nonempty("seeds", self.seeds.len())?;

        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(ConfigError::OutOfRange {
                key: "seeds".into(),
                detail: "seeds must be distinct".into(),
            });
        }
        for &chi in &self.chi {
            if !(0.0..=1.0).contains(&chi) {
                return Err(ConfigError::OutOfRange {
                    key: "chi".into(),
                    detail: format!("{chi} not in [0, 1]"),
                });
            }
        }
        for &l in &self.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(ConfigError::OutOfRange {
                    key: "lambda".into(),
                    detail: format!("{l} not in [0, 1]"),
                });
            }
        }
        for (key, vals) in
            [("sigma_iid", &self.sigma_iid), ("sigma_exo", &self.sigma_exo), ("aug", &self.aug)]
        {
            for &v in vals {
                if v < 0.0 {
                    return Err(ConfigError::OutOfRange {
                        key: key.into(),
                        detail: format!("{v} is negative"),
                    });
                }
            }
        }
        if self.experiment != ExperimentName::Table1 {
            for &dz in &self.d_z {
                if dz == 0 || dz > self.d_o {
                    return Err(ConfigError::OutOfRange {
                        key: "d_z".into(),
                        detail: format!("{dz} not in 1..={}", self.d_o),
                    });
                }
            }
            if self.d_a > self.d_o || self.d_b > self.d_o {
                return Err(ConfigError::OutOfRange {
                    key: "d_a/d_b".into(),
                    detail: format!("must not exceed d_o = {}", self.d_o),
                });
            }
        }
        Ok(())
    }
}

/// Output root: `$LAM_OUT_DIR`, defaulting to `out`.
pub fn out_root() -> PathBuf {
    std::env::var_os("LAM_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"))
}

/// Render the resolved config as sorted key-value lines (for reproducibility
/// records alongside the CSV).
pub fn render_config(cfg: &ExperimentConfig) -> String {
    let mut map: BTreeMap<&str, String> = BTreeMap::new();
    let join_f = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    map.insert("experiment", cfg.experiment.as_str().into());
    map.insert("profile", if cfg.profile == Profile::Desk { "desk".into() } else { "paper".into() });
    map.insert("d_o", cfg.d_o.to_string());
    map.insert("d_a", cfg.d_a.to_string());
    map.insert("d_b", cfg.d_b.to_string());
    map.insert("sigma_q", cfg.sigma_q.to_string());
    map.insert("steps", cfg.steps.to_string());
    map.insert("batch", cfg.batch.to_string());
    map.insert("lr", cfg.lr.to_string());
    map.insert("lr_end", cfg.lr_end.to_string());
    map.insert("n_eval", cfg.n_eval.to_string());
    map.insert("orthogonal_exo", cfg.orthogonal_exo.to_string());
    map.insert("latent", cfg.latent.to_string());
    map.insert("d_z", cfg.d_z.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","));
    map.insert("sigma_iid", join_f(&cfg.sigma_iid));
    map.insert("sigma_exo", join_f(&cfg.sigma_exo));
    map.insert("chi", join_f(&cfg.chi));
    map.insert("aug", join_f(&cfg.aug));
    map.insert("lambda", join_f(&cfg.lambda));
    if let Some(w) = cfg.action_weight {
        map.insert("action_weight", w.to_string());
    }
    map.insert("seeds", cfg.seeds.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","));
    map.insert("grid_steps", cfg.grid_steps.to_string());
    map.insert("grid_batch", cfg.grid_batch.to_string());
    let mut s = String::new();
    for (k, v) in map {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gets_profile_defaults() {
        let mut draft = ConfigDraft::default();
        draft.experiment = Some(ExperimentName::Fig4Left);
        let cfg = draft.resolve(Path::new("out")).unwrap();
        assert_eq!(cfg.d_o, 32);
        assert_eq!(cfg.steps, 1000);
        assert_eq!(cfg.batch, 128);
        assert_eq!(cfg.seeds, vec![0, 1, 2]);

        let mut draft = ConfigDraft::default();
        draft.experiment = Some(ExperimentName::Fig4Left);
        draft.profile = Some(Profile::Paper);
        let cfg = draft.resolve(Path::new("out")).unwrap();
        assert_eq!(cfg.d_o, 128);
        assert_eq!(cfg.d_a, 8);
        assert_eq!(cfg.steps, 4000);
        assert_eq!(cfg.batch, 128);
    }

    #[test]
    fn file_parsing_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");
        std::fs::write(
            &path,
            "# comment\nexperiment = fig4_mid\nd_z = 4,8\nseeds = 3,4\nsigma_iid = 0.5 # inline\n",
        )
        .unwrap();
        let file = ConfigDraft::from_file(&path).unwrap();
        let mut flags = ConfigDraft::default();
        flags.seeds = Some(vec![9]);
        let cfg = file.overlay(flags).resolve(Path::new("out")).unwrap();
        assert_eq!(cfg.experiment, ExperimentName::Fig4Mid);
        assert_eq!(cfg.d_z, vec![4, 8]);
        assert_eq!(cfg.seeds, vec![9], "flag overrides file");
        assert_eq!(cfg.sigma_iid, vec![0.5]);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut draft = ConfigDraft::default();
        let err = draft.set("granularity", "9").unwrap_err();
        assert!(err.to_string().contains("granularity"));
    }

    #[test]
    fn chi_range_is_checked() {
        let mut draft = ConfigDraft::default();
        draft.experiment = Some(ExperimentName::Fig5Policy);
        draft.chi = Some(vec![1.5]);
        let err = draft.resolve(Path::new("out")).unwrap_err();
        assert!(err.to_string().contains("chi"), "{err}");
    }

    #[test]
    fn duplicate_seeds_rejected() {
        let mut draft = ConfigDraft::default();
        draft.experiment = Some(ExperimentName::Fig4Left);
        draft.seeds = Some(vec![1, 1]);
        assert!(draft.resolve(Path::new("out")).is_err());
    }
}

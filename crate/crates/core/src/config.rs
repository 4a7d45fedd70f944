//! Run configuration: experiment presets plus flat `key = value` overrides.
//!
//! Sources are layered: defaults, then the experiment preset, then a config
//! file, then individual overrides (later wins). The seed falls back to the
//! `MFGAN_SEED` environment variable when no source sets it.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{load_idx_images, DataSource, GaussianTarget, ImageDataset, IMAGE_PIXELS};
use crate::error::{Error, Result};
use crate::networks::{MlpSpec, OutputHead};
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "MFGAN_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    /// 2-D Gaussian, `q = 10`.
    Syn1,
    /// 2-D Gaussian, `q = 2`.
    Syn2,
    /// 10-D Gaussian, `q = 2`.
    Syn3,
    /// 28x28 images, `q = 2`, sigmoid generator head.
    Mnist,
    /// Isotropic Gaussian with free `dim`, `q` and `target_center`.
    Custom,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Syn1,
        Experiment::Syn2,
        Experiment::Syn3,
        Experiment::Mnist,
        Experiment::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Syn1 => "syn1",
            Experiment::Syn2 => "syn2",
            Experiment::Syn3 => "syn3",
            Experiment::Mnist => "mnist",
            Experiment::Custom => "custom",
        }
    }

    /// `(dim, q)` fixed by the preset, if any.
    pub fn fixed(self) -> Option<(usize, f64)> {
        match self {
            Experiment::Syn1 => Some((2, 10.0)),
            Experiment::Syn2 => Some((2, 2.0)),
            Experiment::Syn3 => Some((10, 2.0)),
            Experiment::Mnist => Some((IMAGE_PIXELS, 2.0)),
            Experiment::Custom => None,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown experiment `{s}` (expected one of syn1, syn2, syn3, mnist, custom)"
                ))
            })
    }
}

/// Every recognised key, in the order `effective_config` lists them.
pub const KEYS: &[&str] = &[
    "experiment",
    "outer_steps",
    "inner_steps",
    "batch_size",
    "lr_gen",
    "lr_disc",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "q",
    "seed",
    "eval_every",
    "checkpoint_every",
    "eval_samples",
    "record_wall_clock",
    "gen_hidden",
    "disc_hidden",
    "dim",
    "target_center",
    "mnist_path",
    "out",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub train: TrainConfig,
    pub gen_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub dim: usize,
    /// Every coordinate of the Gaussian target's mean.
    pub target_center: f64,
    pub mnist_path: Option<PathBuf>,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn preset(experiment: Experiment) -> Self {
        let mut train = TrainConfig::default();
        let mut dim = 2;
        if let Some((d, q)) = experiment.fixed() {
            dim = d;
            train.q = q;
        }
        if experiment == Experiment::Syn3 {
            // With five ascent steps per generator step the 10-D potential
            // saturates before the generator reaches the target.
            train.inner_steps = 2;
        }
        Self {
            experiment,
            train,
            gen_hidden: vec![64; 3],
            disc_hidden: vec![64; 3],
            dim,
            target_center: 5.0,
            mnist_path: None,
            out: PathBuf::from("runs").join(experiment.name()),
        }
    }

    /// Builds a config from ordered `(key, value)` pairs. `env_seed` is the
    /// fallback used when no pair sets `seed`.
    pub fn from_pairs(pairs: &[(String, String)], env_seed: Option<&str>) -> Result<Self> {
        for (k, _) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::UnknownKey {
                    key: k.clone(),
                    valid: KEYS.join(", "),
                });
            }
        }
        let experiment = match pairs.iter().rev().find(|(k, _)| k == "experiment") {
            Some((_, v)) => v.parse()?,
            None => Experiment::Syn2,
        };
        let mut cfg = Self::preset(experiment);
        let mut seed_set = false;
        for (k, v) in pairs {
            cfg.set(k, v)?;
            seed_set |= k == "seed";
        }
        if !seed_set {
            if let Some(s) = env_seed {
                cfg.train.seed = parse(SEED_ENV, s)?;
            }
        }
        if let Some((d, q)) = experiment.fixed() {
            if cfg.dim != d || cfg.train.q != q {
                return Err(Error::Config(format!(
                    "experiment {experiment} fixes dim = {d} and q = {q}; use `custom` to change them"
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "experiment" => {}
            "outer_steps" => t.outer_steps = parse(key, value)?,
            "inner_steps" => t.inner_steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr_gen" => t.lr_gen = parse(key, value)?,
            "lr_disc" => t.lr_disc = parse(key, value)?,
            "adam_beta1" => t.adam_beta1 = parse(key, value)?,
            "adam_beta2" => t.adam_beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "q" => t.q = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "eval_samples" => t.eval_samples = parse(key, value)?,
            "record_wall_clock" => t.record_wall_clock = parse(key, value)?,
            "gen_hidden" => self.gen_hidden = parse_list(key, value)?,
            "disc_hidden" => self.disc_hidden = parse_list(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "target_center" => self.target_center = parse(key, value)?,
            "mnist_path" => {
                self.mnist_path = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "out" => self.out = PathBuf::from(value),
            _ => {
                return Err(Error::UnknownKey {
                    key: key.into(),
                    valid: KEYS.join(", "),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.dim == 0 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        if !self.target_center.is_finite() {
            return Err(Error::Config("target_center must be finite".into()));
        }
        self.gen_spec().validate()?;
        self.disc_spec().validate()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        Some(match key {
            "experiment" => self.experiment.to_string(),
            "outer_steps" => t.outer_steps.to_string(),
            "inner_steps" => t.inner_steps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr_gen" => t.lr_gen.to_string(),
            "lr_disc" => t.lr_disc.to_string(),
            "adam_beta1" => t.adam_beta1.to_string(),
            "adam_beta2" => t.adam_beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            "q" => t.q.to_string(),
            "seed" => t.seed.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "eval_samples" => t.eval_samples.to_string(),
            "record_wall_clock" => t.record_wall_clock.to_string(),
            "gen_hidden" => list(&self.gen_hidden),
            "disc_hidden" => list(&self.disc_hidden),
            "dim" => self.dim.to_string(),
            "target_center" => self.target_center.to_string(),
            "mnist_path" => self
                .mnist_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "out" => self.out.display().to_string(),
            _ => return None,
        })
    }

    /// The fully resolved configuration in the file format it was read from.
    pub fn to_config_text(&self) -> String {
        let mut s = String::from("# effective configuration (presets + overrides)\n");
        for key in KEYS {
            s.push_str(&format!("{key} = {}\n", self.get(key).expect("known key")));
        }
        s
    }

    pub fn gen_spec(&self) -> MlpSpec {
        let spec = MlpSpec::generator(self.dim, self.gen_hidden.clone());
        if self.experiment == Experiment::Mnist {
            spec.with_head(OutputHead::Sigmoid)
        } else {
            spec
        }
    }

    pub fn disc_spec(&self) -> MlpSpec {
        MlpSpec::discriminator(self.dim, self.disc_hidden.clone())
    }

    /// Loads or constructs the target distribution.
    pub fn data_source(&self) -> Result<Box<dyn DataSource>> {
        if self.experiment == Experiment::Mnist {
            let path = self.mnist_path.as_ref().ok_or_else(|| {
                Error::MissingDataset("the mnist experiment needs mnist_path (an IDX image file)".into())
            })?;
            if !path.exists() {
                return Err(Error::MissingDataset(format!("{} does not exist", path.display())));
            }
            let images: ImageDataset = load_idx_images(path)?;
            Ok(Box::new(images))
        } else {
            Ok(Box::new(GaussianTarget::isotropic(self.dim, self.target_center)?))
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

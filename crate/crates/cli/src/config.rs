//! Run configuration: defaults, flat key=value config files, CLI overrides,
//! and the effective-config echo that makes every run reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use envi_core::enkf::Eq27Mode;
use envi_core::gp::InducingNoise;
use envi_core::models::ModelConfig;
use envi_core::{Error, Result};

/// Everything a run needs. Every field has a default; a config file and then
/// CLI flags override it, and the effective result is echoed to the output
/// directory verbatim.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: String,
    pub t_len: usize,
    pub d_x: usize,
    pub num_inducing: usize,
    pub num_particles: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub sigma_q2: f64,
    pub sigma_r2: f64,
    pub eq27: Eq27Mode,
    pub inducing_noise: InducingNoise,
    pub lambda_ens: f64,
    pub jitter: f64,
    pub k_inner: usize,
    pub horizon: usize,
    pub split_fraction: f64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub oracle_kf: bool,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: "kink".into(),
            t_len: 0, // 0 = dataset default
            d_x: 0,   // 0 = dataset default
            num_inducing: 15,
            num_particles: 50,
            iterations: 500,
            learning_rate: 0.01,
            seed: 0,
            sigma_q2: 0.05,
            sigma_r2: 0.008,
            eq27: Eq27Mode::WithR,
            inducing_noise: InducingNoise::Process,
            lambda_ens: 1e-6,
            jitter: 1e-6,
            k_inner: 1,
            horizon: 50,
            split_fraction: 0.5,
            out: PathBuf::from("out"),
            checkpoint: None,
            oracle_kf: false,
            threads: 1,
        }
    }
}

impl RunConfig {
    /// Apply one key=value assignment (config file lines and CLI overrides
    /// funnel through here so both spell options identically).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_err = |what: &str| {
            Error::InvalidArgument(format!("config key `{key}`: cannot parse `{value}` as {what}"))
        };
        match key {
            "dataset" => self.dataset = value.to_string(),
            "T" | "t" => self.t_len = value.parse().map_err(|_| parse_err("integer"))?,
            "dx" => self.d_x = value.parse().map_err(|_| parse_err("integer"))?,
            "M" | "m" => self.num_inducing = value.parse().map_err(|_| parse_err("integer"))?,
            "N" | "n" => self.num_particles = value.parse().map_err(|_| parse_err("integer"))?,
            "iters" => self.iterations = value.parse().map_err(|_| parse_err("integer"))?,
            "lr" => self.learning_rate = value.parse().map_err(|_| parse_err("float"))?,
            "seed" => self.seed = value.parse().map_err(|_| parse_err("integer"))?,
            "sigmaQ2" => self.sigma_q2 = value.parse().map_err(|_| parse_err("float"))?,
            "sigmaR2" => self.sigma_r2 = value.parse().map_err(|_| parse_err("float"))?,
            "eq27" => {
                self.eq27 = match value {
                    "with-r" => Eq27Mode::WithR,
                    "literal" => Eq27Mode::Literal,
                    _ => return Err(parse_err("`with-r` or `literal`")),
                }
            }
            "inducing_noise" | "inducing-noise" => {
                self.inducing_noise = match value {
                    "process" => InducingNoise::Process,
                    "none" => InducingNoise::Plain,
                    _ => return Err(parse_err("`process` or `none`")),
                }
            }
            "lambda_ens" => self.lambda_ens = value.parse().map_err(|_| parse_err("float"))?,
            "jitter" => self.jitter = value.parse().map_err(|_| parse_err("float"))?,
            "k_inner" => self.k_inner = value.parse().map_err(|_| parse_err("integer"))?,
            "horizon" => self.horizon = value.parse().map_err(|_| parse_err("integer"))?,
            "split" => self.split_fraction = value.parse().map_err(|_| parse_err("float"))?,
            "out" => self.out = PathBuf::from(value),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "oracle_kf" => self.oracle_kf = value.parse().map_err(|_| parse_err("bool"))?,
            "threads" => self.threads = value.parse().map_err(|_| parse_err("integer"))?,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key `{key}`"
                )))
            }
        }
        Ok(())
    }

    /// Load assignments from a flat key=value file ('#' starts a comment).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Resolve per-dataset defaults left at their sentinel values.
    pub fn resolve(&mut self) {
        if self.t_len == 0 {
            self.t_len = match self.dataset.as_str() {
                "cartrack" => 120,
                "kink" => 600,
                _ => 0,
            };
        }
        if self.d_x == 0 {
            self.d_x = match self.dataset.as_str() {
                "cartrack" => 4,
                "kink" => 1,
                _ => 4,
            };
        }
    }

    /// The effective configuration as sorted key=value text.
    pub fn echo(&self) -> String {
        let mut map = BTreeMap::new();
        map.insert("dataset", self.dataset.clone());
        map.insert("T", self.t_len.to_string());
        map.insert("dx", self.d_x.to_string());
        map.insert("M", self.num_inducing.to_string());
        map.insert("N", self.num_particles.to_string());
        map.insert("iters", self.iterations.to_string());
        map.insert("lr", format!("{}", self.learning_rate));
        map.insert("seed", self.seed.to_string());
        map.insert("sigmaQ2", format!("{}", self.sigma_q2));
        map.insert("sigmaR2", format!("{}", self.sigma_r2));
        map.insert(
            "eq27",
            match self.eq27 {
                Eq27Mode::WithR => "with-r".into(),
                Eq27Mode::Literal => "literal".into(),
            },
        );
        map.insert(
            "inducing_noise",
            match self.inducing_noise {
                InducingNoise::Process => "process".into(),
                InducingNoise::Plain => "none".into(),
            },
        );
        map.insert("lambda_ens", format!("{}", self.lambda_ens));
        map.insert("jitter", format!("{}", self.jitter));
        map.insert("k_inner", self.k_inner.to_string());
        map.insert("horizon", self.horizon.to_string());
        map.insert("split", format!("{}", self.split_fraction));
        map.insert("out", self.out.display().to_string());
        if let Some(ck) = &self.checkpoint {
            map.insert("checkpoint", ck.display().to_string());
        }
        map.insert("oracle_kf", self.oracle_kf.to_string());
        map.insert("threads", self.threads.to_string());
        let mut s = String::new();
        for (k, v) in map {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Model configuration for the selected dataset.
    pub fn model_config(&self, d_y: usize) -> ModelConfig {
        ModelConfig {
            d_x: self.d_x,
            d_y,
            num_inducing: self.num_inducing,
            num_particles: self.num_particles,
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            seed: self.seed,
            lambda_ens: self.lambda_ens,
            jitter: self.jitter,
            eq27: self.eq27,
            inducing_noise: self.inducing_noise,
            k_inner: self.k_inner,
            // The kink protocol fixes the emission model to the generative
            // one; everything else learns R.
            fixed_r: if self.dataset == "kink" {
                Some(vec![self.sigma_r2])
            } else {
                None
            },
            ..Default::default()
        }
    }
}

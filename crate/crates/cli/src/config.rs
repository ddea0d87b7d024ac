//! Run configuration: a flat file of `key = value` lines with dotted keys.
//!
//! Blank lines and everything after `#` are ignored. Every key may also be
//! given on the command line as `--key value` or `--key=value`, which takes
//! precedence over the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use avrnn::adversarial::CriticConfig;
use avrnn::training::TrainConfig;
use avrnn::vrnn::{EmissionKind, PosteriorMode, VrnnConfig};

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("data.path", "training dataset (seqdata v1); required"),
    ("model.z_dim", "latent width (default 4)"),
    ("model.h_dim", "recurrent state width (default 32)"),
    (
        "model.x_enc_dim",
        "observation feature width (default h_dim)",
    ),
    ("model.z_enc_dim", "latent feature width (default h_dim)"),
    (
        "model.hidden_dim",
        "hidden width of the prior, proposal and emission heads (default h_dim)",
    ),
    ("model.emission", "gaussian | bernoulli (default gaussian)"),
    ("model.posterior", "residual | tied (default residual)"),
    ("critic.state_dim", "critic LSTM state width (default 128)"),
    ("critic.width", "critic feedforward width (default 100)"),
    ("adv.clip", "critic weight clip c (default 0.01)"),
    (
        "adv.n_critic",
        "critic steps per adversarial step (default 1)",
    ),
    ("adv.lr_critic", "critic RMSProp rate (default 5e-5)"),
    ("adv.lr_adv", "adversarial RMSProp rate (default 5e-5)"),
    ("train.iterations", "training iterations B (default 5000)"),
    ("train.batch_size", "sequences per batch m (default 32)"),
    ("train.lr_rec", "reconstruction RMSProp rate (default 1e-3)"),
    (
        "train.eval_every",
        "iterations between metric rows (default 100)",
    ),
    ("train.eval_batches", "batches per evaluation (default 4)"),
    ("train.seed", "master seed (default 0)"),
    (
        "train.wallclock",
        "record elapsed seconds in the metrics (default false)",
    ),
    (
        "train.prefetch",
        "batch prefetch queue depth, 0 disables (default 0)",
    ),
    ("out.dir", "output directory (default .)"),
    ("out.metrics", "metrics CSV file name (default metrics.csv)"),
    (
        "out.model",
        "model checkpoint file name (default model.ckpt)",
    ),
    (
        "out.critic",
        "critic checkpoint file name (default critic.ckpt)",
    ),
    (
        "out.history",
        "per-iteration statistics CSV file name (default: not written)",
    ),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    Syntax {
        line: usize,
        text: String,
    },
    Duplicate(String),
    UnknownKey(String),
    Value {
        key: String,
        value: String,
        reason: String,
    },
    Missing(&'static str),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Syntax { line, text } => {
                write!(f, "line {line}: expected `key = value`, got {text:?}")
            }
            ConfigError::Duplicate(k) => write!(f, "key `{k}` set twice"),
            ConfigError::UnknownKey(k) => write!(f, "unknown config key `{k}`"),
            ConfigError::Value { key, value, reason } => {
                write!(f, "bad value {value:?} for `{key}`: {reason}")
            }
            ConfigError::Missing(k) => write!(f, "required key `{k}` is not set"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Raw key/value pairs from a file or command line.
pub type Entries = BTreeMap<String, String>;

pub fn parse_text(text: &str) -> Result<Entries, ConfigError> {
    let mut out = Entries::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(ConfigError::Duplicate(k.to_string()));
        }
    }
    Ok(out)
}

/// Splits `args` into dotted-key overrides and everything else. A flag is an
/// override when its name contains a dot.
pub fn split_overrides(args: &[String]) -> Result<(Vec<String>, Entries), ConfigError> {
    let mut rest = Vec::new();
    let mut overrides = Entries::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a
            .strip_prefix("--")
            .filter(|f| f.split('=').next().is_some_and(|k| k.contains('.')))
        else {
            rest.push(a.clone());
            continue;
        };
        let (k, v) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| ConfigError::Value {
                    key: flag.to_string(),
                    value: String::new(),
                    reason: "missing value".into(),
                })?;
                (flag.to_string(), v.clone())
            }
        };
        if overrides.insert(k.clone(), v).is_some() {
            return Err(ConfigError::Duplicate(k));
        }
    }
    Ok((rest, overrides))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_path: PathBuf,
    pub z_dim: usize,
    pub h_dim: usize,
    pub x_enc_dim: Option<usize>,
    pub z_enc_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub emission: EmissionKind,
    pub posterior: PosteriorMode,
    pub critic_state_dim: usize,
    pub critic_width: usize,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub metrics_file: PathBuf,
    pub model_file: PathBuf,
    pub critic_file: PathBuf,
    pub history_file: Option<PathBuf>,
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: v.into(),
        reason: e.to_string(),
    })
}

fn named<T>(
    key: &str,
    v: &str,
    f: impl Fn(&str) -> Option<T>,
    allowed: &str,
) -> Result<T, ConfigError> {
    f(v).ok_or_else(|| ConfigError::Value {
        key: key.into(),
        value: v.into(),
        reason: format!("expected {allowed}"),
    })
}

impl RunConfig {
    /// Merges `file` with `overrides` (overrides win) and applies defaults.
    pub fn from_entries(file: &Entries, overrides: &Entries) -> Result<Self, ConfigError> {
        let mut merged = file.clone();
        merged.extend(overrides.iter().map(|(k, v)| (k.clone(), v.clone())));

        let mut data_path = None;
        let mut c = RunConfig {
            data_path: PathBuf::new(),
            z_dim: 4,
            h_dim: 32,
            x_enc_dim: None,
            z_enc_dim: None,
            hidden_dim: None,
            emission: EmissionKind::Gaussian,
            posterior: PosteriorMode::Residual,
            critic_state_dim: 128,
            critic_width: 100,
            train: TrainConfig::default(),
            out_dir: PathBuf::from("."),
            metrics_file: PathBuf::from("metrics.csv"),
            model_file: PathBuf::from("model.ckpt"),
            critic_file: PathBuf::from("critic.ckpt"),
            history_file: None,
        };
        for (k, v) in &merged {
            let k = k.as_str();
            match k {
                "data.path" => data_path = Some(PathBuf::from(v)),
                "model.z_dim" => c.z_dim = value(k, v)?,
                "model.h_dim" => c.h_dim = value(k, v)?,
                "model.x_enc_dim" => c.x_enc_dim = Some(value(k, v)?),
                "model.z_enc_dim" => c.z_enc_dim = Some(value(k, v)?),
                "model.hidden_dim" => c.hidden_dim = Some(value(k, v)?),
                "model.emission" => {
                    c.emission = named(k, v, EmissionKind::from_name, "gaussian or bernoulli")?
                }
                "model.posterior" => {
                    c.posterior = named(k, v, PosteriorMode::from_name, "residual or tied")?
                }
                "critic.state_dim" => c.critic_state_dim = value(k, v)?,
                "critic.width" => c.critic_width = value(k, v)?,
                "adv.clip" => c.train.adv.clip = value(k, v)?,
                "adv.n_critic" => c.train.adv.n_critic = value(k, v)?,
                "adv.lr_critic" => c.train.adv.lr_critic = value(k, v)?,
                "adv.lr_adv" => c.train.adv.lr_adv = value(k, v)?,
                "train.iterations" => c.train.iterations = value(k, v)?,
                "train.batch_size" => c.train.batch_size = value(k, v)?,
                "train.lr_rec" => c.train.lr_rec = value(k, v)?,
                "train.eval_every" => c.train.eval_every = value(k, v)?,
                "train.eval_batches" => c.train.eval_batches = value(k, v)?,
                "train.seed" => c.train.seed = value(k, v)?,
                "train.wallclock" => c.train.record_wallclock = value(k, v)?,
                "train.prefetch" => c.train.prefetch = value(k, v)?,
                "out.dir" => c.out_dir = PathBuf::from(v),
                "out.metrics" => c.metrics_file = PathBuf::from(v),
                "out.model" => c.model_file = PathBuf::from(v),
                "out.critic" => c.critic_file = PathBuf::from(v),
                "out.history" => {
                    c.history_file = Some(PathBuf::from(v)).filter(|p| !p.as_os_str().is_empty())
                }
                _ => return Err(ConfigError::UnknownKey(k.to_string())),
            }
        }
        c.data_path = data_path.ok_or(ConfigError::Missing("data.path"))?;
        Ok(c)
    }

    pub fn load(path: Option<&Path>, overrides: &Entries) -> Result<Self, anyhow::Error> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", p.display()))?;
                parse_text(&text)?
            }
            None => Entries::new(),
        };
        Ok(Self::from_entries(&file, overrides)?)
    }

    pub fn model_config(&self, x_dim: usize) -> VrnnConfig {
        VrnnConfig {
            x_dim,
            z_dim: self.z_dim,
            h_dim: self.h_dim,
            x_enc_dim: self.x_enc_dim.unwrap_or(self.h_dim),
            z_enc_dim: self.z_enc_dim.unwrap_or(self.h_dim),
            hidden_dim: self.hidden_dim.unwrap_or(self.h_dim),
            emission: self.emission,
            posterior: self.posterior,
        }
    }

    pub fn critic_config(&self) -> CriticConfig {
        CriticConfig {
            z_dim: self.z_dim,
            state_dim: self.critic_state_dim,
            width: self.critic_width,
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join(&self.metrics_file)
    }

    pub fn model_path(&self) -> PathBuf {
        self.out_dir.join(&self.model_file)
    }

    pub fn critic_path(&self) -> PathBuf {
        self.out_dir.join(&self.critic_file)
    }

    pub fn history_path(&self) -> Option<PathBuf> {
        self.history_file.as_ref().map(|f| self.out_dir.join(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(pairs: &[(&str, &str)]) -> Entries {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn parses_comments_blank_lines_and_whitespace() {
        let e =
            parse_text("# header\n\n data.path = a b.seq  # trailing\nadv.clip=0.05\n").unwrap();
        assert_eq!(
            e,
            entries(&[("data.path", "a b.seq"), ("adv.clip", "0.05")])
        );
    }

    #[test]
    fn rejects_malformed_lines_and_duplicates() {
        assert!(matches!(
            parse_text("data.path\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            parse_text("a b = 1\n"),
            Err(ConfigError::Syntax { .. })
        ));
        assert_eq!(
            parse_text("x = 1\nx = 2\n"),
            Err(ConfigError::Duplicate("x".into()))
        );
    }

    #[test]
    fn overrides_win_and_defaults_fill_in() {
        let file = entries(&[
            ("data.path", "d.seq"),
            ("train.iterations", "10"),
            ("model.h_dim", "8"),
        ]);
        let over = entries(&[("train.iterations", "20")]);
        let c = RunConfig::from_entries(&file, &over).unwrap();
        assert_eq!(c.train.iterations, 20);
        assert_eq!(c.train.batch_size, 32);
        let m = c.model_config(3);
        assert_eq!((m.x_dim, m.h_dim, m.x_enc_dim, m.hidden_dim), (3, 8, 8, 8));
        assert_eq!(c.model_path(), PathBuf::from("./model.ckpt"));
    }

    #[test]
    fn unknown_bad_and_missing_keys_are_named() {
        let base = entries(&[("data.path", "d.seq")]);
        let err =
            RunConfig::from_entries(&base, &entries(&[("train.iterationz", "1")])).unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey("train.iterationz".into()));
        let err = RunConfig::from_entries(&base, &entries(&[("adv.clip", "wide")])).unwrap_err();
        assert!(err.to_string().contains("adv.clip"));
        let err =
            RunConfig::from_entries(&base, &entries(&[("model.emission", "poisson")])).unwrap_err();
        assert!(err.to_string().contains("model.emission"));
        assert_eq!(
            RunConfig::from_entries(&Entries::new(), &Entries::new()),
            Err(ConfigError::Missing("data.path"))
        );
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let sample = |k: &str| match k {
            "model.emission" => "bernoulli",
            "model.posterior" => "tied",
            "train.wallclock" => "true",
            k if k.starts_with("adv.") && k != "adv.n_critic" => "0.5",
            k if k.starts_with("train.lr") => "0.5",
            k if k.starts_with("data.") || k.starts_with("out.") => "x",
            _ => "3",
        };
        let all: Entries = KEYS
            .iter()
            .map(|(k, _)| (k.to_string(), sample(k).to_string()))
            .collect();
        let c = RunConfig::from_entries(&all, &Entries::new()).unwrap();
        assert_eq!(c.train.prefetch, 3);
        assert!(c.train.record_wallclock);
    }

    #[test]
    fn split_overrides_handles_both_forms() {
        let args: Vec<String> = [
            "--config",
            "c.conf",
            "--train.seed",
            "3",
            "--adv.clip=0.1",
            "--quiet",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let (rest, over) = split_overrides(&args).unwrap();
        assert_eq!(rest, vec!["--config", "c.conf", "--quiet"]);
        assert_eq!(over, entries(&[("train.seed", "3"), ("adv.clip", "0.1")]));
        assert!(split_overrides(&["--train.seed".to_string()]).is_err());
    }
}

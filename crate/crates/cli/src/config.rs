//! Plain key-value run configuration.
//!
//! One `key = value` per line; `#` starts a comment; blank lines are
//! ignored. Unknown keys are rejected so a typo can never silently fall
//! back to a default. Defaults reproduce the reference fine-tuning recipe
//! (50 epochs switching at 25, batches 128/256, lr 0.07, momentum 0.9,
//! weight decay 5e-4, cosine schedule, lambda 0.5, alpha = beta = 1).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nc_ood::losses::LossVariant;
use nc_ood::trainer::TrainConfig;
use nc_ood::{Error, Result};

/// Everything `train` needs: data paths, model shape, hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub id_train: PathBuf,
    pub ood_aux: PathBuf,
    pub out_dir: PathBuf,
    /// Starting checkpoint; when set, the warm-up phase is skipped.
    pub init_checkpoint: Option<PathBuf>,
    /// Hidden layer widths; the last entry is the feature dimension.
    pub hidden_dims: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            id_train: PathBuf::from("id_train.csv"),
            ood_aux: PathBuf::from("ood_aux.csv"),
            out_dir: PathBuf::from("run"),
            init_checkpoint: None,
            hidden_dims: vec![64, 16],
            train: TrainConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{value}'")))
}

impl RunConfig {
    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let human = lineno + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {human}: expected 'key = value', got '{line}'"
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {human}: duplicate key '{key}'"
                )));
            }
            config.apply(key, value, human)?;
        }
        config.train.validate()?;
        if config.hidden_dims.is_empty() {
            return Err(Error::Config("hidden_dims must not be empty".into()));
        }
        Ok(config)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "id_train" => self.id_train = PathBuf::from(value),
            "ood_aux" => self.ood_aux = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "init_checkpoint" => {
                self.init_checkpoint = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "hidden_dims" => {
                self.hidden_dims = value
                    .split(',')
                    .map(|s| parse_num::<usize>(key, s.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "epochs" => self.train.epochs = parse_num(key, value)?,
            "switch_epoch" => self.train.switch_epoch = parse_num(key, value)?,
            "id_batch" => self.train.id_batch = parse_num(key, value)?,
            "ood_batch" => self.train.ood_batch = parse_num(key, value)?,
            "lr0" => self.train.lr0 = parse_num(key, value)?,
            "momentum" => self.train.momentum = parse_num(key, value)?,
            "weight_decay" => self.train.weight_decay = parse_num(key, value)?,
            "schedule" => {
                if value != "cosine" {
                    return Err(Error::Config(format!(
                        "line {line}: schedule '{value}' unsupported (only cosine)"
                    )));
                }
            }
            "lambda" => self.train.weights.lambda = parse_num(key, value)?,
            "alpha" => self.train.weights.alpha = parse_num(key, value)?,
            "beta" => self.train.weights.beta = parse_num(key, value)?,
            "seed" => self.train.seed = parse_num(key, value)?,
            "loss_variant" => self.train.variant = LossVariant::parse(value)?,
            "warmup_epochs" => self.train.warmup_epochs = parse_num(key, value)?,
            "warmup_lr0" => self.train.warmup_lr0 = parse_num(key, value)?,
            unknown => {
                return Err(Error::Config(format!(
                    "line {line}: unknown key '{unknown}'"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_recipe() {
        let c = RunConfig::parse_str("").unwrap();
        assert_eq!(c.train.epochs, 50);
        assert_eq!(c.train.switch_epoch, 25);
        assert_eq!(c.train.id_batch, 128);
        assert_eq!(c.train.ood_batch, 256);
        assert_eq!(c.train.lr0, 0.07);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.train.weight_decay, 0.0005);
        assert_eq!(c.train.weights.lambda, 0.5);
        assert_eq!(c.train.weights.alpha, 1.0);
        assert_eq!(c.train.weights.beta, 1.0);
        assert_eq!(c.train.variant, LossVariant::Ours);
    }

    #[test]
    fn parses_keys_comments_and_blanks() {
        let text = "\
# toy run
id_train = data/id.csv
ood_aux = data/aux.csv   # auxiliary outliers
out_dir = runs/exp1

epochs = 30
switch_epoch = 15
hidden_dims = 64, 16
loss_variant = v3
seed = 9
";
        let c = RunConfig::parse_str(text).unwrap();
        assert_eq!(c.id_train, PathBuf::from("data/id.csv"));
        assert_eq!(c.out_dir, PathBuf::from("runs/exp1"));
        assert_eq!(c.train.epochs, 30);
        assert_eq!(c.train.switch_epoch, 15);
        assert_eq!(c.hidden_dims, vec![64, 16]);
        assert_eq!(c.train.variant, LossVariant::V3);
        assert_eq!(c.train.seed, 9);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse_str("epocs = 30\n").unwrap_err().to_string();
        assert!(err.contains("unknown key 'epocs'"), "{err}");
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = RunConfig::parse_str("epochs = 30\nepochs = 40\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn non_cosine_schedule_is_rejected() {
        assert!(RunConfig::parse_str("schedule = step\n").is_err());
        assert!(RunConfig::parse_str("schedule = cosine\n").is_ok());
    }

    #[test]
    fn malformed_value_names_the_key() {
        let err = RunConfig::parse_str("epochs = soon\n").unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        assert!(RunConfig::parse_str("momentum = 1.5\n").is_err());
        assert!(RunConfig::parse_str("epochs = 10\nswitch_epoch = 20\n").is_err());
    }
}

//! Experiment configuration: a sectioned key=value text format.
//!
//! Sections mirror the experiment's moving parts — `[dataset]`,
//! `[partition]`, `[model]`, `[round]`, `[distill]`, `[output]` — plus a
//! top-level `seed`. Every key has a default from the desk-scale preset, so
//! a config file only states what it changes; unknown sections or keys are
//! rejected with their full path. `parse(serialize(cfg))` reproduces `cfg`
//! exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::ensemble::{DistillConfig, DistillMode};
use crate::error::{Error, Result};
use crate::protocol::RoundConfig;

/// Where the examples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetConfig {
    /// Gaussian class clusters generated on the fly; train and test share
    /// the same class centers.
    Synthetic {
        classes: usize,
        input_dim: usize,
        per_class: usize,
        test_per_class: usize,
        spread: f64,
    },
    /// Big-endian IDX image/label file pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// `label,f0,f1,…` CSV files.
    Csv { train: PathBuf, test: PathBuf },
}

/// How the remainder (non-public) training data spreads over devices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionConfig {
    Iid,
    Dirichlet { alpha: f64 },
}

/// Architecture knobs that are not dictated by the dataset. Input width and
/// class count always come from the loaded data, so they cannot disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub exits: usize,
    pub trunk_widths: Vec<usize>,
    pub feature_dim: usize,
}

/// Everything one experiment needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub devices: usize,
    /// Fraction of the training set held out as shared public data.
    pub public_fraction: f64,
    pub model: ModelConfig,
    pub round: RoundConfig,
    pub distill: DistillConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    /// The desk-scale preset: 10 Gaussian classes in 64 dimensions, 8
    /// devices over a Dirichlet(0.5) partition, a 4-exit model, 30 rounds.
    ///
    /// The narrow first trunk block makes depth pay on this data: exit 1
    /// reads a 16-dimensional code directly while deeper exits decode it
    /// through further wide layers, so the larger hierarchy models are the
    /// stronger teachers. Distillation runs at a small fixed rate — the
    /// public set is tiny (1%), and full-batch steps at the device rate
    /// overfit it.
    fn default() -> Self {
        ExperimentConfig {
            seed: 1234,
            dataset: DatasetConfig::Synthetic {
                classes: 10,
                input_dim: 64,
                per_class: 200,
                test_per_class: 500,
                spread: 0.35,
            },
            partition: PartitionConfig::Dirichlet { alpha: 0.5 },
            devices: 8,
            public_fraction: 0.01,
            model: ModelConfig {
                exits: 4,
                trunk_widths: vec![16, 64, 64, 64],
                feature_dim: 64,
            },
            round: RoundConfig::default(),
            distill: DistillConfig {
                lr_override: Some(0.005),
                ..DistillConfig::default()
            },
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                input_dim,
                per_class,
                test_per_class,
                spread,
            } => {
                if *classes == 0 || *input_dim == 0 || *per_class == 0 || *test_per_class == 0 {
                    return Err(Error::Config(
                        "[dataset] classes, input_dim, per_class, test_per_class must be ≥ 1"
                            .into(),
                    ));
                }
                if !(spread.is_finite() && *spread >= 0.0) {
                    return Err(Error::Config(format!(
                        "[dataset] spread: must be finite and nonnegative, got {spread}"
                    )));
                }
            }
            DatasetConfig::Idx { .. } | DatasetConfig::Csv { .. } => {}
        }
        if let PartitionConfig::Dirichlet { alpha } = self.partition {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::Config(format!(
                    "[partition] alpha: must be positive, got {alpha}"
                )));
            }
        }
        if self.devices == 0 {
            return Err(Error::Config("[partition] devices: must be ≥ 1".into()));
        }
        if !(self.public_fraction > 0.0 && self.public_fraction < 1.0) {
            return Err(Error::Config(format!(
                "[partition] public_fraction: must be in (0, 1), got {}",
                self.public_fraction
            )));
        }
        if self.model.exits == 0 {
            return Err(Error::Config("[model] exits: must be ≥ 1".into()));
        }
        if self.model.trunk_widths.len() != self.model.exits {
            return Err(Error::Config(format!(
                "[model] trunk_widths: expected {} entries for {} exits, got {}",
                self.model.exits,
                self.model.exits,
                self.model.trunk_widths.len()
            )));
        }
        if self.model.trunk_widths.contains(&0) || self.model.feature_dim == 0 {
            return Err(Error::Config(
                "[model] trunk widths and feature_dim must be ≥ 1".into(),
            ));
        }
        self.round.validate()?;
        self.distill.validate()?;
        if self.round.seed != self.seed {
            return Err(Error::Config(
                "round seed drifted from the experiment seed".into(),
            ));
        }
        Ok(())
    }

    /// Override the experiment seed (keeps the round stream in sync).
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.round.seed = seed;
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut sections = parse_sections(text)?;
        let mut cfg = ExperimentConfig::default();

        if let Some(top) = sections.get_mut("") {
            if let Some(v) = top.remove("seed") {
                cfg.set_seed(parse_num(&v, "seed")?);
            }
        }

        if let Some(sec) = sections.get_mut("dataset") {
            let kind = sec.remove("kind").unwrap_or_else(|| "synthetic".into());
            cfg.dataset = match kind.as_str() {
                "synthetic" => {
                    // the preset dataset is synthetic; start from it
                    let mut d = ExperimentConfig::default().dataset;
                    if let DatasetConfig::Synthetic {
                        classes,
                        input_dim,
                        per_class,
                        test_per_class,
                        spread,
                    } = &mut d
                    {
                        take_num(sec, "dataset", "classes", classes)?;
                        take_num(sec, "dataset", "input_dim", input_dim)?;
                        take_num(sec, "dataset", "per_class", per_class)?;
                        take_num(sec, "dataset", "test_per_class", test_per_class)?;
                        take_num(sec, "dataset", "spread", spread)?;
                    }
                    d
                }
                "idx" => DatasetConfig::Idx {
                    train_images: take_path(sec, "dataset", "train_images")?,
                    train_labels: take_path(sec, "dataset", "train_labels")?,
                    test_images: take_path(sec, "dataset", "test_images")?,
                    test_labels: take_path(sec, "dataset", "test_labels")?,
                },
                "csv" => DatasetConfig::Csv {
                    train: take_path(sec, "dataset", "train")?,
                    test: take_path(sec, "dataset", "test")?,
                },
                other => {
                    return Err(Error::Config(format!(
                        "[dataset] kind: unknown kind {other:?} (expected synthetic | idx | csv)"
                    )))
                }
            };
        }

        if let Some(sec) = sections.get_mut("partition") {
            if let Some(kind) = sec.remove("kind") {
                cfg.partition = match kind.as_str() {
                    "iid" => PartitionConfig::Iid,
                    "dirichlet" => PartitionConfig::Dirichlet { alpha: 0.5 },
                    other => {
                        return Err(Error::Config(format!(
                            "[partition] kind: unknown kind {other:?} (expected iid | dirichlet)"
                        )))
                    }
                };
            }
            if let Some(v) = sec.remove("alpha") {
                match &mut cfg.partition {
                    PartitionConfig::Dirichlet { alpha } => {
                        *alpha = parse_num(&v, "[partition] alpha")?
                    }
                    PartitionConfig::Iid => {
                        return Err(Error::Config(
                            "[partition] alpha: not meaningful for an iid partition".into(),
                        ))
                    }
                }
            }
            take_num(sec, "partition", "devices", &mut cfg.devices)?;
            take_num(
                sec,
                "partition",
                "public_fraction",
                &mut cfg.public_fraction,
            )?;
        }

        if let Some(sec) = sections.get_mut("model") {
            take_num(sec, "model", "exits", &mut cfg.model.exits)?;
            if let Some(v) = sec.remove("trunk_widths") {
                cfg.model.trunk_widths = v
                    .split(',')
                    .map(|w| parse_num(w.trim(), "[model] trunk_widths"))
                    .collect::<Result<_>>()?;
            } else if cfg.model.exits != cfg.model.trunk_widths.len() {
                // exits changed without widths: keep the preset's prefix,
                // extending with its deepest width if more blocks are needed
                let last = *cfg
                    .model
                    .trunk_widths
                    .last()
                    .expect("preset widths nonempty");
                cfg.model.trunk_widths.resize(cfg.model.exits, last);
            }
            take_num(sec, "model", "feature_dim", &mut cfg.model.feature_dim)?;
        }

        if let Some(sec) = sections.get_mut("round") {
            take_num(sec, "round", "rounds", &mut cfg.round.rounds)?;
            take_num(sec, "round", "local_epochs", &mut cfg.round.local_epochs)?;
            take_num(sec, "round", "batch_size", &mut cfg.round.batch_size)?;
            take_num(sec, "round", "lr0", &mut cfg.round.lr0)?;
            take_num(
                sec,
                "round",
                "lr_decay_every",
                &mut cfg.round.lr_decay_every,
            )?;
            take_num(
                sec,
                "round",
                "lr_decay_factor",
                &mut cfg.round.lr_decay_factor,
            )?;
            take_num(sec, "round", "server_lr", &mut cfg.round.server_lr)?;
        }

        if let Some(sec) = sections.get_mut("distill") {
            if let Some(v) = sec.remove("mode") {
                cfg.distill.mode = DistillMode::parse(&v)?;
            }
            take_num(sec, "distill", "epochs", &mut cfg.distill.epochs)?;
            take_num(sec, "distill", "beta", &mut cfg.distill.beta)?;
            take_num(sec, "distill", "batch_size", &mut cfg.distill.batch_size)?;
            if let Some(v) = sec.remove("lr") {
                cfg.distill.lr_override = Some(parse_num(&v, "[distill] lr")?);
            }
        }

        if let Some(sec) = sections.get_mut("output") {
            if let Some(v) = sec.remove("dir") {
                cfg.out_dir = PathBuf::from(v);
            }
        }

        for (section, keys) in &sections {
            if let Some(key) = keys.keys().next() {
                let path = if section.is_empty() {
                    key.clone()
                } else {
                    format!("[{section}] {key}")
                };
                return Err(Error::Config(format!("unknown key {path}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; feeds back through [`parse`](Self::parse)
    /// unchanged.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s);
        let _ = writeln!(s, "[dataset]");
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                input_dim,
                per_class,
                test_per_class,
                spread,
            } => {
                let _ = writeln!(s, "kind = synthetic");
                let _ = writeln!(s, "classes = {classes}");
                let _ = writeln!(s, "input_dim = {input_dim}");
                let _ = writeln!(s, "per_class = {per_class}");
                let _ = writeln!(s, "test_per_class = {test_per_class}");
                let _ = writeln!(s, "spread = {spread}");
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let _ = writeln!(s, "kind = idx");
                let _ = writeln!(s, "train_images = {}", train_images.display());
                let _ = writeln!(s, "train_labels = {}", train_labels.display());
                let _ = writeln!(s, "test_images = {}", test_images.display());
                let _ = writeln!(s, "test_labels = {}", test_labels.display());
            }
            DatasetConfig::Csv { train, test } => {
                let _ = writeln!(s, "kind = csv");
                let _ = writeln!(s, "train = {}", train.display());
                let _ = writeln!(s, "test = {}", test.display());
            }
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "[partition]");
        match self.partition {
            PartitionConfig::Iid => {
                let _ = writeln!(s, "kind = iid");
            }
            PartitionConfig::Dirichlet { alpha } => {
                let _ = writeln!(s, "kind = dirichlet");
                let _ = writeln!(s, "alpha = {alpha}");
            }
        }
        let _ = writeln!(s, "devices = {}", self.devices);
        let _ = writeln!(s, "public_fraction = {}", self.public_fraction);
        let _ = writeln!(s);
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "exits = {}", self.model.exits);
        let widths: Vec<String> = self
            .model
            .trunk_widths
            .iter()
            .map(|w| w.to_string())
            .collect();
        let _ = writeln!(s, "trunk_widths = {}", widths.join(","));
        let _ = writeln!(s, "feature_dim = {}", self.model.feature_dim);
        let _ = writeln!(s);
        let _ = writeln!(s, "[round]");
        let _ = writeln!(s, "rounds = {}", self.round.rounds);
        let _ = writeln!(s, "local_epochs = {}", self.round.local_epochs);
        let _ = writeln!(s, "batch_size = {}", self.round.batch_size);
        let _ = writeln!(s, "lr0 = {}", self.round.lr0);
        let _ = writeln!(s, "lr_decay_every = {}", self.round.lr_decay_every);
        let _ = writeln!(s, "lr_decay_factor = {}", self.round.lr_decay_factor);
        let _ = writeln!(s, "server_lr = {}", self.round.server_lr);
        let _ = writeln!(s);
        let _ = writeln!(s, "[distill]");
        let _ = writeln!(s, "mode = {}", self.distill.mode.as_str());
        let _ = writeln!(s, "epochs = {}", self.distill.epochs);
        let _ = writeln!(s, "beta = {}", self.distill.beta);
        let _ = writeln!(s, "batch_size = {}", self.distill.batch_size);
        if let Some(lr) = self.distill.lr_override {
            let _ = writeln!(s, "lr = {lr}");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "[output]");
        let _ = writeln!(s, "dir = {}", self.out_dir.display());
        s
    }
}

type Sections = BTreeMap<String, BTreeMap<String, String>>;

fn parse_sections(text: &str) -> Result<Sections> {
    let mut sections = Sections::new();
    let mut current = String::new();
    sections.entry(current.clone()).or_default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| {
                Error::Config(format!("line {}: unterminated section header", lineno + 1))
            })?;
            current = name.trim().to_string();
            sections.entry(current.clone()).or_default();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got {line:?}",
                lineno + 1
            ))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        let section = sections.entry(current.clone()).or_default();
        if section.insert(key.clone(), value).is_some() {
            let path = if current.is_empty() {
                key
            } else {
                format!("[{current}] {key}")
            };
            return Err(Error::Config(format!(
                "line {}: duplicate key {path}",
                lineno + 1
            )));
        }
    }
    Ok(sections)
}

fn parse_num<T: std::str::FromStr>(value: &str, path: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{path}: invalid value {value:?}")))
}

fn take_num<T: std::str::FromStr>(
    sec: &mut BTreeMap<String, String>,
    section: &str,
    key: &str,
    slot: &mut T,
) -> Result<()> {
    if let Some(v) = sec.remove(key) {
        *slot = parse_num(&v, &format!("[{section}] {key}"))?;
    }
    Ok(())
}

fn take_path(sec: &mut BTreeMap<String, String>, section: &str, key: &str) -> Result<PathBuf> {
    sec.remove(key)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config(format!("[{section}] {key}: required for this dataset kind")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_preset_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trips_through_text() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.serialize()).unwrap(), cfg);

        cfg.set_seed(99);
        cfg.partition = PartitionConfig::Iid;
        cfg.model.exits = 2;
        cfg.model.trunk_widths = vec![16, 24];
        cfg.distill.mode = DistillMode::LogitsOnly;
        cfg.distill.lr_override = Some(0.01);
        cfg.dataset = DatasetConfig::Csv {
            train: PathBuf::from("a.csv"),
            test: PathBuf::from("b.csv"),
        };
        cfg.out_dir = PathBuf::from("elsewhere");
        assert_eq!(ExperimentConfig::parse(&cfg.serialize()).unwrap(), cfg);

        cfg.dataset = DatasetConfig::Idx {
            train_images: "ti".into(),
            train_labels: "tl".into(),
            test_images: "vi".into(),
            test_labels: "vl".into(),
        };
        assert_eq!(ExperimentConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }

    #[test]
    fn sparse_files_fill_from_the_preset() {
        let cfg = ExperimentConfig::parse("seed = 7\n\n[round]\nrounds = 2\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.round.seed, 7);
        assert_eq!(cfg.round.rounds, 2);
        assert_eq!(cfg.devices, 8);
        assert_eq!(cfg.model.exits, 4);
    }

    #[test]
    fn exits_without_widths_adapts_the_preset_widths() {
        let cfg = ExperimentConfig::parse("[model]\nexits = 2\n").unwrap();
        assert_eq!(cfg.model.trunk_widths, vec![16, 64]);
        let cfg = ExperimentConfig::parse("[model]\nexits = 6\n").unwrap();
        assert_eq!(cfg.model.trunk_widths, vec![16, 64, 64, 64, 64, 64]);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let err = ExperimentConfig::parse("[round]\nlearning_rate = 3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("[round] learning_rate"), "got: {err}");
        let err = ExperimentConfig::parse("mystery = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("mystery"), "got: {err}");
        let err = ExperimentConfig::parse("[nonsense]\nx = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("nonsense"), "got: {err}");
    }

    #[test]
    fn malformed_lines_carry_line_numbers() {
        let err = ExperimentConfig::parse("[round\nrounds = 2\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 1"), "got: {err}");
        let err = ExperimentConfig::parse("\njust words\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "got: {err}");
        let err = ExperimentConfig::parse("[round]\nrounds = 2\nrounds = 3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("duplicate"), "got: {err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(ExperimentConfig::parse("[round]\nlr0 = fast\n").is_err());
        assert!(ExperimentConfig::parse("[round]\nlr0 = -1\n").is_err());
        assert!(ExperimentConfig::parse("[partition]\nkind = iid\nalpha = 2\n").is_err());
        assert!(ExperimentConfig::parse("[partition]\npublic_fraction = 1.5\n").is_err());
        assert!(ExperimentConfig::parse("[distill]\nmode = sometimes\n").is_err());
        assert!(ExperimentConfig::parse("[dataset]\nkind = csv\n").is_err());
        assert!(ExperimentConfig::parse("[model]\nexits = 3\ntrunk_widths = 8,8\n").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = ExperimentConfig::parse(
            "# experiment\n; alt comment\n\nseed = 5\n\n[round]\n# inner\nrounds = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.round.rounds, 4);
    }
}

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::ikd::{LadderConfig, Method};
use crate::loss::{KdFactor, KlDirection};
use crate::model::{BlockSpec, Head, Structure};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{}unknown key `{key}`", at(*.line))]
    UnknownKey { key: String, line: Option<usize> },
    #[error("{}bad value `{value}` for `{key}`: {reason}", at(*.line))]
    BadValue { key: String, value: String, reason: String, line: Option<usize> },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
}

fn at(line: Option<usize>) -> String {
    line.map(|l| format!("line {l}: ")).unwrap_or_default()
}

/// Where a resolved value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Md,
}

/// Blocks of the teacher's hidden stack, written `dense:256,dense:128` or
/// `conv:8:3,pool,flatten,dense:64`.
pub fn parse_blocks(text: &str) -> Result<Vec<BlockSpec>, String> {
    let mut out = Vec::new();
    for tok in text.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let parts: Vec<&str> = tok.split(':').collect();
        let num = |s: &str| s.parse::<usize>().map_err(|_| format!("`{s}` in `{tok}` is not a count"));
        out.push(match parts.as_slice() {
            ["dense", w] => BlockSpec::Dense { width: num(w)? },
            ["conv", f, k] => BlockSpec::Conv { filters: num(f)?, kernel: num(k)? },
            ["pool"] => BlockSpec::Pool,
            ["flatten"] => BlockSpec::Flatten,
            _ => return Err(format!("unknown block `{tok}`")),
        });
    }
    if out.is_empty() {
        return Err("no blocks".into());
    }
    Ok(out)
}

pub fn format_blocks(blocks: &[BlockSpec]) -> String {
    blocks
        .iter()
        .map(|b| match b {
            BlockSpec::Dense { width } => format!("dense:{width}"),
            BlockSpec::Conv { filters, kernel } => format!("conv:{filters}:{kernel}"),
            BlockSpec::Pool => "pool".into(),
            BlockSpec::Flatten => "flatten".into(),
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub ladder: LadderConfig,
    pub teacher: Vec<BlockSpec>,
    /// Widths for the first student; `ρ(σ0)` when absent.
    pub sigma_1: Option<Vec<usize>>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub label_columns: usize,
    /// Share of the training file held out as a test split when no test data
    /// is given.
    pub test_fraction: f64,
    pub class_names: Option<Vec<String>>,
    pub out: PathBuf,
    pub format: Format,
    pub provenance: BTreeMap<String, Source>,
}

pub const KEYS: &[&str] = &[
    "k",
    "p",
    "alpha",
    "method",
    "teacher_epochs",
    "epochs_per_step",
    "batch_size",
    "learning_rate",
    "adam_betas",
    "adam_beta1",
    "adam_beta2",
    "seed",
    "n_bins",
    "kl_direction",
    "kd_factor",
    "val_fraction",
    "balance_threshold",
    "teacher",
    "sigma_1",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "train_csv",
    "test_csv",
    "label_columns",
    "test_fraction",
    "class_names",
    "out",
    "format",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            ladder: LadderConfig::default(),
            teacher: vec![BlockSpec::Dense { width: 256 }, BlockSpec::Dense { width: 128 }],
            sigma_1: None,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_csv: None,
            test_csv: None,
            label_columns: 1,
            test_fraction: 0.2,
            class_names: None,
            out: PathBuf::from("run"),
            format: Format::Csv,
            provenance: KEYS.iter().map(|k| (k.to_string(), Source::Default)).collect(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| "not a number".to_string())
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(|s| s.trim().parse().map_err(|_| format!("`{}` is not a number", s.trim()))).collect()
}

impl RunConfig {
    fn assign(&mut self, key: &str, v: &str) -> Result<bool, String> {
        let l = &mut self.ladder;
        let path = || Some(PathBuf::from(v));
        match key {
            "k" => l.k = parse_num(v)?,
            "p" => l.p = parse_num(v)?,
            "alpha" => l.alpha = parse_num(v)?,
            "method" => l.method = v.parse::<Method>().map_err(|e| e.to_string())?,
            "teacher_epochs" => l.teacher_epochs = parse_num(v)?,
            "epochs_per_step" => l.epochs_per_step = parse_num(v)?,
            "batch_size" => l.batch_size = parse_num(v)?,
            "learning_rate" => l.learning_rate = parse_num(v)?,
            "adam_betas" => {
                let b: Vec<f64> = parse_list(v)?;
                let [b1, b2] = b[..] else { return Err("expected two comma-separated values".into()) };
                l.adam_betas = (b1, b2);
            }
            "adam_beta1" => l.adam_betas.0 = parse_num(v)?,
            "adam_beta2" => l.adam_betas.1 = parse_num(v)?,
            "seed" => l.seed = parse_num(v)?,
            "n_bins" => l.n_bins = parse_num(v)?,
            "kl_direction" => {
                l.kl_direction = match v {
                    "as-written" => KlDirection::AsWritten,
                    "teacher-first" => KlDirection::TeacherFirst,
                    _ => return Err("expected as-written or teacher-first".into()),
                }
            }
            "kd_factor" => {
                l.kd_factor = match v {
                    "as-written" => KdFactor::AsWritten,
                    "conventional" => KdFactor::Conventional,
                    _ => return Err("expected as-written or conventional".into()),
                }
            }
            "val_fraction" => l.val_fraction = parse_num(v)?,
            "balance_threshold" => l.balance_threshold = parse_num(v)?,
            "teacher" => self.teacher = parse_blocks(v)?,
            "sigma_1" => self.sigma_1 = Some(parse_list(v)?),
            "train_images" => self.train_images = path(),
            "train_labels" => self.train_labels = path(),
            "test_images" => self.test_images = path(),
            "test_labels" => self.test_labels = path(),
            "train_csv" => self.train_csv = path(),
            "test_csv" => self.test_csv = path(),
            "label_columns" => self.label_columns = parse_num(v)?,
            "test_fraction" => self.test_fraction = parse_num(v)?,
            "class_names" => self.class_names = Some(v.split(',').map(|s| s.trim().to_string()).collect()),
            "out" => self.out = PathBuf::from(v),
            "format" => {
                self.format = match v {
                    "csv" => Format::Csv,
                    "md" => Format::Md,
                    _ => return Err("expected csv or md".into()),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Sets one key, recording its source.
    pub fn set(&mut self, key: &str, value: &str, source: Source, line: Option<usize>) -> Result<(), ConfigError> {
        let (key, value) = (key.trim(), value.trim());
        match self.assign(key, value) {
            Ok(true) => {
                // the pair and its halves describe the same two numbers
                let linked: &[&str] = match key {
                    "adam_betas" | "adam_beta1" | "adam_beta2" => &["adam_betas", "adam_beta1", "adam_beta2"],
                    _ => &[],
                };
                for k in linked {
                    self.provenance.insert(k.to_string(), source);
                }
                self.provenance.insert(key.to_string(), source);
                Ok(())
            }
            Ok(false) => Err(ConfigError::UnknownKey { key: key.to_string(), line }),
            Err(reason) => Err(ConfigError::BadValue { key: key.to_string(), value: value.to_string(), reason, line }),
        }
    }

    /// Teacher structure for inputs of `input_shape` and `classes` outputs.
    pub fn teacher_structure(&self, input_shape: Vec<usize>, classes: usize, head: Head) -> Structure {
        Structure { blocks: self.teacher.clone(), input_shape, num_classes: classes, head }
    }

    pub fn is_convolutional(&self) -> bool {
        self.teacher.iter().any(|b| matches!(b, BlockSpec::Conv { .. }))
    }

    /// `key = value (source)` lines, one per key.
    pub fn provenance_lines(&self) -> Vec<String> {
        self.provenance.iter().map(|(k, s)| format!("{k} ({s})")).collect()
    }
}

/// Parses `key = value` text; `#` starts a comment, blank lines are skipped.
pub fn parse_config_text(text: &str, cfg: &mut RunConfig) -> Result<(), ConfigError> {
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
        cfg.set(k, v, Source::File, Some(line))?;
    }
    Ok(())
}

/// Defaults, then the file (if any), then `key=value` flag overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .map_err(|e| ConfigError::Read { path: p.display().to_string(), reason: e.to_string() })?;
        parse_config_text(&text, &mut cfg)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v, Source::Flag, None)?;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let mut cfg = RunConfig::default();
        parse_config_text("# nothing here\n\n", &mut cfg).unwrap();
        let l = &cfg.ladder;
        assert_eq!((l.alpha, l.k, l.batch_size, l.learning_rate, l.adam_betas, l.p), (0.7, 5, 16, 1e-4, (0.9, 0.999), 0.5));
        assert!(cfg.provenance.values().all(|&s| s == Source::Default));
        assert_eq!(cfg.provenance.len(), KEYS.len());
    }

    #[test]
    fn flag_beats_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "alpha = 0.7  # from the file\nk=3\n").unwrap();
        let cfg = parse_config(Some(&path), &[("alpha".into(), "0.5".into())]).unwrap();
        assert_eq!(cfg.ladder.alpha, 0.5);
        assert_eq!(cfg.provenance["alpha"], Source::Flag);
        assert_eq!(cfg.ladder.k, 3);
        assert_eq!(cfg.provenance["k"], Source::File);
        assert_eq!(cfg.provenance["seed"], Source::Default);
    }

    #[test]
    fn unknown_key_and_bad_value_name_the_line() {
        let mut cfg = RunConfig::default();
        let err = parse_config_text("k = 2\nalhpa = 0.5\n", &mut cfg).unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey { key: "alhpa".into(), line: Some(2) });
        assert_eq!(err.to_string(), "line 2: unknown key `alhpa`");
        let err = parse_config_text("batch_size = many\n", &mut cfg).unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { line: Some(1), .. }), "{err}");
        assert!(matches!(parse_config_text("just words\n", &mut cfg), Err(ConfigError::Syntax { line: 1 })));
    }

    #[test]
    fn block_grammar() {
        let b = parse_blocks("conv:8:3, pool, flatten, dense:64").unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(format_blocks(&b), "conv:8:3,pool,flatten,dense:64");
        assert!(parse_blocks("dense").is_err());
        assert!(parse_blocks("").is_err());
    }

    #[test]
    fn method_and_lists() {
        let mut cfg = RunConfig::default();
        parse_config_text("method = ikd+platt\nsigma_1 = 64, 32\nclass_names = a,b\n", &mut cfg).unwrap();
        assert_eq!(cfg.ladder.method, Method::IkdPlatt);
        assert_eq!(cfg.sigma_1, Some(vec![64, 32]));
        assert_eq!(cfg.class_names, Some(vec!["a".to_string(), "b".to_string()]));
        parse_config_text("adam_betas = 0.8, 0.99\n", &mut cfg).unwrap();
        assert_eq!(cfg.ladder.adam_betas, (0.8, 0.99));
        assert!(parse_config_text("adam_betas = 0.8\n", &mut cfg).is_err());
        assert!(parse_config_text("method = kd\n", &mut cfg).is_err());
    }
}

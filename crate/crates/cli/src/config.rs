//! Run configuration: task presets, a flat `key = value` file format and
//! command-line overrides.
//!
//! Precedence, lowest to highest: preset defaults, config file, flags. The
//! preset itself comes from `--task`, else the file's `task` key, else
//! `custom`. Relative paths in a config file resolve against the file's
//! directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::ValueEnum;
use mlnet_core::corpus::DEFAULT_SPLIT_RATIOS;
use mlnet_core::encoder::EncoderConfig;
use mlnet_core::inference::DecodingMode;
use mlnet_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TaskPreset {
    Task1,
    Task2,
    Task3,
    Custom,
}

impl FromStr for TaskPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        <TaskPreset as ValueEnum>::from_str(s, false)
    }
}

impl fmt::Display for TaskPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = self.to_possible_value().expect("no skipped variants");
        f.write_str(name.get_name())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub hierarchy: Option<PathBuf>,
    pub stoplist: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskPreset,
    pub paths: Paths,
    pub train: TrainConfig,
    pub s_max: usize,
    pub t_max: usize,
    /// `None` takes the dimension from the embedding file.
    pub embedding_dim: Option<usize>,
    pub word_hidden: usize,
    pub word_attention: usize,
    pub sentence_hidden: usize,
    pub sentence_attention: usize,
    pub dropout: f64,
    pub count_hidden: Vec<usize>,
    /// Maximum permitted labels per document.
    pub max_labels: usize,
    pub decode: DecodingMode,
    pub split_ratios: [f64; 3],
    /// Close gold label sets under the hierarchy when preparing splits.
    pub augment_labels: bool,
}

impl RunConfig {
    pub fn preset(task: TaskPreset) -> Self {
        let mut cfg = RunConfig {
            task,
            paths: Paths::default(),
            train: TrainConfig::default(),
            s_max: 27,
            t_max: 83,
            embedding_dim: Some(200),
            word_hidden: 50,
            word_attention: 50,
            sentence_hidden: 50,
            sentence_attention: 50,
            dropout: 0.5,
            count_hidden: vec![128, 128, 64],
            max_labels: 5,
            decode: DecodingMode::Topk,
            split_ratios: DEFAULT_SPLIT_RATIOS,
            augment_labels: true,
        };
        match task {
            TaskPreset::Task1 => {}
            TaskPreset::Task2 => {
                cfg.max_labels = 8;
                cfg.s_max = 34;
                cfg.t_max = 120;
            }
            TaskPreset::Task3 => {
                cfg.max_labels = 70;
                cfg.embedding_dim = Some(300);
                cfg.count_hidden = vec![7024, 7024, 128];
                cfg.s_max = 904;
                cfg.t_max = 20;
                cfg.train.lsep_sampling.neg_sample_size = 1024;
            }
            TaskPreset::Custom => cfg.embedding_dim = None,
        }
        cfg
    }

    pub fn encoder_config(&self, embedding_dim: usize) -> EncoderConfig {
        EncoderConfig {
            embedding_dim,
            word_hidden: self.word_hidden,
            word_attention: self.word_attention,
            sentence_hidden: self.sentence_hidden,
            sentence_attention: self.sentence_attention,
            dropout: self.dropout,
        }
    }

    /// Applies one `key = value` setting. Relative paths are joined onto
    /// `base_dir` when given.
    pub fn set(&mut self, key: &str, value: &str, base_dir: Option<&Path>) -> Result<(), String> {
        let path = || {
            let p = PathBuf::from(value);
            Some(match base_dir {
                Some(base) if p.is_relative() => base.join(p),
                _ => p,
            })
        };
        let t = &mut self.train;
        match key {
            "task" => self.task = value.parse()?,
            "corpus" => self.paths.corpus = path(),
            "embeddings" => self.paths.embeddings = path(),
            "hierarchy" => self.paths.hierarchy = path(),
            "stoplist" => self.paths.stoplist = path(),
            "model" => self.paths.model = path(),
            "output" => self.paths.output = path(),
            "data_dir" => self.paths.data_dir = path(),
            "seed" => t.seed = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "stage1_epochs" => t.stage1_epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "early_stop_patience" => t.early_stop_patience = parse(key, value)?,
            "stage2_max_epochs" => t.stage2_max_epochs = parse(key, value)?,
            "adam_beta1" => t.adam_beta1 = parse(key, value)?,
            "adam_beta2" => t.adam_beta2 = parse(key, value)?,
            "adam_epsilon" => t.adam_epsilon = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            "neg_sample_size" => t.lsep_sampling.neg_sample_size = parse(key, value)?,
            "exact_cutoff" => t.lsep_sampling.exact_cutoff = parse(key, value)?,
            "lsep_on_preactivation" => t.lsep_on_preactivation = parse(key, value)?,
            "s_max" => self.s_max = parse(key, value)?,
            "t_max" => self.t_max = parse(key, value)?,
            "embedding_dim" => {
                self.embedding_dim = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "word_hidden" => self.word_hidden = parse(key, value)?,
            "word_attention" => self.word_attention = parse(key, value)?,
            "sentence_hidden" => self.sentence_hidden = parse(key, value)?,
            "sentence_attention" => self.sentence_attention = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "count_hidden" => self.count_hidden = parse_list(key, value)?,
            "max_labels" | "n" => self.max_labels = parse(key, value)?,
            "decode" => self.decode = value.parse().map_err(|e| format!("{e}"))?,
            "split_ratios" => {
                let v: Vec<f64> = parse_list(key, value)?;
                self.split_ratios = v
                    .try_into()
                    .map_err(|_| format!("`{key}` needs exactly three values"))?;
            }
            "augment_labels" => self.augment_labels = parse(key, value)?,
            _ => return Err(format!("unknown setting `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: &str| Err(CliError::Usage(m.to_string()));
        if self.max_labels == 0 {
            return usage("max_labels must be at least 1");
        }
        if self.s_max == 0 || self.t_max == 0 {
            return usage("s_max and t_max must be at least 1");
        }
        if [
            self.word_hidden,
            self.word_attention,
            self.sentence_hidden,
            self.sentence_attention,
        ]
        .contains(&0)
        {
            return usage("hidden and attention sizes must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return usage("dropout must lie in [0, 1)");
        }
        if self.count_hidden.contains(&0) {
            return usage("count_hidden widths must be at least 1");
        }
        self.train.validate().map_err(CliError::from)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

/// One `key = value` line from a config file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Setting {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parses the flat config format: `key = value` per line, `#` starts a
/// comment, blank lines are ignored.
pub fn parse_config_text(text: &str) -> Result<Vec<Setting>, (usize, String)> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err((idx + 1, format!("expected `key = value`, got `{line}`")));
        };
        out.push(Setting {
            line: idx + 1,
            key: key.trim().to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

/// Builds the effective configuration from a preset, an optional config file
/// and command-line overrides (applied in order).
pub fn load_config(
    task_flag: Option<TaskPreset>,
    config_path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunConfig, CliError> {
    let settings = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            parse_config_text(&text).map_err(|(line, msg)| {
                CliError::Usage(format!("{}:{line}: {msg}", path.display()))
            })?
        }
        None => Vec::new(),
    };
    let file_task = settings
        .iter()
        .rev()
        .find(|s| s.key == "task")
        .map(|s| {
            s.value.parse::<TaskPreset>().map_err(|e| {
                CliError::Usage(format!(
                    "{}:{}: {e}",
                    config_path.unwrap().display(),
                    s.line
                ))
            })
        })
        .transpose()?;
    let mut cfg = RunConfig::preset(task_flag.or(file_task).unwrap_or(TaskPreset::Custom));
    let base_dir = config_path.and_then(Path::parent);
    for s in settings.iter().filter(|s| s.key != "task") {
        cfg.set(&s.key, &s.value, base_dir).map_err(|msg| {
            CliError::Usage(format!(
                "{}:{}: {msg}",
                config_path.unwrap().display(),
                s.line
            ))
        })?;
    }
    for (key, value) in overrides {
        if key == "task" {
            return Err(CliError::Usage("use --task to choose a preset".into()));
        }
        cfg.set(key, value, None).map_err(CliError::Usage)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Splits a `--set KEY=VALUE` argument.
pub fn parse_override(arg: &str) -> Result<(String, String), String> {
    arg.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{arg}`"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn presets_follow_published_settings() {
        let t1 = RunConfig::preset(TaskPreset::Task1);
        assert_eq!((t1.max_labels, t1.embedding_dim), (5, Some(200)));
        assert_eq!(t1.count_hidden, vec![128, 128, 64]);
        let t2 = RunConfig::preset(TaskPreset::Task2);
        assert_eq!((t2.max_labels, t2.embedding_dim), (8, Some(200)));
        let t3 = RunConfig::preset(TaskPreset::Task3);
        assert_eq!((t3.max_labels, t3.embedding_dim), (70, Some(300)));
        assert_eq!(t3.count_hidden, vec![7024, 7024, 128]);
        for cfg in [&t1, &t2, &t3] {
            assert_eq!(cfg.train.learning_rate, 0.001);
            assert_eq!(cfg.train.stage1_epochs, 50);
            assert_eq!(cfg.dropout, 0.5);
            assert_eq!((cfg.word_hidden, cfg.word_attention), (50, 50));
        }
        assert_eq!(RunConfig::preset(TaskPreset::Custom).embedding_dim, None);
    }

    #[test]
    fn config_text_parsing() {
        let s =
            parse_config_text("# header\nseed = 3  # trailing\n\n count_hidden=4,5 \n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(
            (s[0].line, s[0].key.as_str(), s[0].value.as_str()),
            (2, "seed", "3")
        );
        assert_eq!(s[1].value, "4,5");
        assert_eq!(parse_config_text("a = 1\nbogus\n").unwrap_err().0, 2);
    }

    #[test]
    fn set_rejects_unknown_and_malformed() {
        let mut cfg = RunConfig::preset(TaskPreset::Custom);
        assert!(cfg.set("nope", "1", None).is_err());
        assert!(cfg.set("seed", "x", None).is_err());
        assert!(cfg.set("split_ratios", "0.5,0.5", None).is_err());
        cfg.set("split_ratios", "0.8, 0.1, 0.1", None).unwrap();
        assert_eq!(cfg.split_ratios, [0.8, 0.1, 0.1]);
        cfg.set("decode", "threshold", None).unwrap();
        assert_eq!(cfg.decode, DecodingMode::Threshold);
        cfg.set("embedding_dim", "auto", None).unwrap();
        assert_eq!(cfg.embedding_dim, None);
    }

    #[test]
    fn precedence_flag_over_file_over_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(
            f,
            "task = task2\nseed = 7\nbatch_size = 16\nembeddings = vec.txt"
        )
        .unwrap();
        drop(f);

        let cfg = load_config(None, Some(&path), &[]).unwrap();
        assert_eq!(cfg.task, TaskPreset::Task2);
        assert_eq!(cfg.max_labels, 8);
        assert_eq!((cfg.train.seed, cfg.train.batch_size), (7, 16));
        assert_eq!(cfg.paths.embeddings, Some(dir.path().join("vec.txt")));

        let overrides = vec![("seed".to_string(), "9".to_string())];
        let cfg = load_config(Some(TaskPreset::Task3), Some(&path), &overrides).unwrap();
        assert_eq!(cfg.task, TaskPreset::Task3);
        assert_eq!(cfg.max_labels, 70);
        assert_eq!((cfg.train.seed, cfg.train.batch_size), (9, 16));

        let cfg = load_config(None, None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::preset(TaskPreset::Custom));
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let bad = vec![("max_labels".to_string(), "0".to_string())];
        assert!(matches!(
            load_config(None, None, &bad),
            Err(CliError::Usage(_))
        ));
        let bad = vec![("learning_rate".to_string(), "-1".to_string())];
        assert!(matches!(
            load_config(None, None, &bad),
            Err(CliError::Usage(_))
        ));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed = 1\nwhat = 2\n").unwrap();
        match load_config(None, Some(&path), &[]) {
            Err(CliError::Usage(msg)) => assert!(msg.contains(":2:"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn override_parsing() {
        assert_eq!(parse_override("a=b=c").unwrap(), ("a".into(), "b=c".into()));
        assert!(parse_override("nothing").is_err());
    }
}

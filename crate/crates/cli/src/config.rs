//! Line-oriented `section.key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use budgetlm::cells::{CellKind, GateCoupling, StateDropVariant};
use budgetlm::corpus::Level;
use budgetlm::evaluator::{EvalMode, EvalOptions, DEFAULT_MC_SAMPLES};
use budgetlm::model::ModelConfig;
use budgetlm::trainer::{OptimizerConfig, TrainSchedule};
use budgetlm::tuner::{Dimension, HyperparameterSpace, Scale};
use budgetlm::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub path: PathBuf,
    pub level: Level,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub unroll: usize,
    pub mode: EvalMode,
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    /// `vocab_size` is filled in from the corpus.
    pub model: ModelConfig,
    pub train: TrainSchedule,
    pub optim: OptimizerConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Level-dependent defaults. Character models use separate input and
    /// output tables and no down-projection.
    pub fn defaults(path: PathBuf, level: Level) -> Self {
        let model = match level {
            Level::Word => ModelConfig::default(),
            Level::Character => ModelConfig {
                shared_embeddings: false,
                input_embedding_ratio: 1.0,
                ..ModelConfig::default()
            },
        };
        let optim = match level {
            Level::Word => OptimizerConfig::word_level(),
            Level::Character => OptimizerConfig::char_level(),
        };
        RunConfig {
            data: DataConfig { path, level },
            model,
            train: TrainSchedule::for_level(level),
            optim,
            eval: EvalConfig {
                batch_size: 1,
                unroll: EvalOptions::default().unroll,
                mode: EvalMode::MeanField,
            },
        }
    }

    pub fn eval_options(&self, seed: u64) -> EvalOptions {
        EvalOptions {
            batch_size: self.eval.batch_size,
            unroll: self.eval.unroll,
            mode: self.eval.mode,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut model = self.model.clone();
        model.vocab_size = model.vocab_size.max(2);
        model.validate()?;
        self.train.validate()?;
        self.optim.validate()?;
        if self.eval.batch_size == 0 || self.eval.unroll == 0 {
            return Err(Error::Contract("evaluation batch size and unroll must be positive".into()));
        }
        Ok(())
    }

    /// Set one tunable hyperparameter by name.
    pub fn set_hyperparameter(&mut self, name: &str, value: f64) -> Result<()> {
        match name {
            "learning_rate" => self.optim.learning_rate = value,
            "input_embedding_ratio" => self.model.input_embedding_ratio = value,
            "input_drop" => self.model.input_drop = value,
            "state_drop" => self.model.state_drop = value,
            "output_drop" => self.model.output_drop = value,
            "intra_layer_drop" => self.model.intra_layer_drop = value,
            "weight_decay" => self.optim.weight_decay = value,
            other => return Err(Error::Contract(format!("`{other}` is not a tunable hyperparameter"))),
        }
        Ok(())
    }

    /// Canonical text form; parsing it returns an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let t = &self.train;
        let o = &self.optim;
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("data.path", self.data.path.display().to_string());
        put("data.level", self.data.level.to_string());
        put("model.cell", m.cell_kind.to_string());
        put("model.coupling", m.coupling.to_string());
        put("model.depth", m.depth.to_string());
        put("model.budget", m.budget.to_string());
        put("model.input_embedding_ratio", m.input_embedding_ratio.to_string());
        put("model.input_drop", m.input_drop.to_string());
        put("model.intra_layer_drop", m.intra_layer_drop.to_string());
        put("model.output_drop", m.output_drop.to_string());
        put("model.state_drop", m.state_drop.to_string());
        put("model.state_drop_variant", m.state_drop_variant.to_string());
        put("model.shared_embeddings", m.shared_embeddings.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.unroll", t.unroll.to_string());
        put("train.checkpoint_interval", t.checkpoint_interval.to_string());
        put("train.decay_factor", t.decay_factor.to_string());
        put("train.patience", t.patience.to_string());
        put("train.zero_state_prob", t.zero_state_prob.to_string());
        put("train.max_epochs", t.max_epochs.to_string());
        put("train.max_steps", t.max_steps.map_or_else(|| "none".into(), |x| x.to_string()));
        put("train.valid_tokens", t.valid_tokens.to_string());
        put("optim.learning_rate", o.learning_rate.to_string());
        put("optim.beta1", o.beta1.to_string());
        put("optim.beta2", o.beta2.to_string());
        put("optim.epsilon", o.epsilon.to_string());
        put("optim.weight_decay", o.weight_decay.to_string());
        put("eval.batch_size", self.eval.batch_size.to_string());
        put("eval.unroll", self.eval.unroll.to_string());
        put("eval.mode", self.eval.mode.to_string());
        put("eval.mc_samples", self.eval.mode.samples().max(1).to_string());
        s
    }
}

/// Non-empty, non-comment lines split into `(line number, key, value)`.
fn entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config {
                line: line_no,
                detail: format!("expected `section.key = value`, got `{line}`"),
            })?;
        let (key, value) = (key.trim(), value.trim());
        if !key.contains('.') || value.is_empty() {
            return Err(Error::Config {
                line: line_no,
                detail: format!("expected `section.key = value`, got `{line}`"),
            });
        }
        if out.iter().any(|(_, k, _)| k == key) {
            return Err(Error::Config {
                line: line_no,
                detail: format!("`{key}` is set twice"),
            });
        }
        out.push((line_no, key.to_string(), value.to_string()));
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config {
        line,
        detail: format!("invalid value `{value}` for {key}: {e}"),
    })
}

/// Parse a run configuration. Relative `data.path` values resolve against
/// `base` when given.
pub fn parse_config(text: &str, base: Option<&Path>) -> Result<RunConfig> {
    let entries = entries(text)?;
    let find = |key: &str| entries.iter().find(|(_, k, _)| k == key);
    let path = match find("data.path") {
        Some((_, _, v)) => PathBuf::from(v),
        None => {
            return Err(Error::Config {
                line: 0,
                detail: "`data.path` is required".into(),
            })
        }
    };
    let path = match base {
        Some(b) if path.is_relative() => b.join(path),
        _ => path,
    };
    let level = match find("data.level") {
        Some((line, k, v)) => parse_value::<Level>(*line, k, v)?,
        None => Level::Word,
    };
    let mut cfg = RunConfig::defaults(path, level);
    let mut mc_samples: Option<(usize, usize)> = None;
    for (line, key, value) in &entries {
        let (line, key, v) = (*line, key.as_str(), value.as_str());
        let m = &mut cfg.model;
        let t = &mut cfg.train;
        let o = &mut cfg.optim;
        match key {
            "data.path" | "data.level" => {}
            "model.cell" => m.cell_kind = parse_value::<CellKind>(line, key, v)?,
            "model.coupling" => m.coupling = parse_value::<GateCoupling>(line, key, v)?,
            "model.depth" => m.depth = parse_value(line, key, v)?,
            "model.budget" => m.budget = parse_value(line, key, v)?,
            "model.input_embedding_ratio" => m.input_embedding_ratio = parse_value(line, key, v)?,
            "model.input_drop" => m.input_drop = parse_value(line, key, v)?,
            "model.intra_layer_drop" => m.intra_layer_drop = parse_value(line, key, v)?,
            "model.output_drop" => m.output_drop = parse_value(line, key, v)?,
            "model.state_drop" => m.state_drop = parse_value(line, key, v)?,
            "model.state_drop_variant" => m.state_drop_variant = parse_value::<StateDropVariant>(line, key, v)?,
            "model.shared_embeddings" => m.shared_embeddings = parse_value(line, key, v)?,
            "train.batch_size" => t.batch_size = parse_value(line, key, v)?,
            "train.unroll" => t.unroll = parse_value(line, key, v)?,
            "train.checkpoint_interval" => t.checkpoint_interval = parse_value(line, key, v)?,
            "train.decay_factor" => t.decay_factor = parse_value(line, key, v)?,
            "train.patience" => t.patience = parse_value(line, key, v)?,
            "train.zero_state_prob" => t.zero_state_prob = parse_value(line, key, v)?,
            "train.max_epochs" => t.max_epochs = parse_value(line, key, v)?,
            "train.max_steps" => {
                t.max_steps = if v == "none" { None } else { Some(parse_value(line, key, v)?) }
            }
            "train.valid_tokens" => t.valid_tokens = parse_value(line, key, v)?,
            "optim.learning_rate" => o.learning_rate = parse_value(line, key, v)?,
            "optim.beta1" => o.beta1 = parse_value(line, key, v)?,
            "optim.beta2" => o.beta2 = parse_value(line, key, v)?,
            "optim.epsilon" => o.epsilon = parse_value(line, key, v)?,
            "optim.weight_decay" => o.weight_decay = parse_value(line, key, v)?,
            "eval.batch_size" => cfg.eval.batch_size = parse_value(line, key, v)?,
            "eval.unroll" => cfg.eval.unroll = parse_value(line, key, v)?,
            "eval.mode" => cfg.eval.mode = parse_value(line, key, v)?,
            "eval.mc_samples" => mc_samples = Some((line, parse_value(line, key, v)?)),
            other => {
                return Err(Error::Config {
                    line,
                    detail: format!("unknown key `{other}`"),
                })
            }
        }
    }
    if let Some((line, k)) = mc_samples {
        if k == 0 {
            return Err(Error::Config {
                line,
                detail: "eval.mc_samples must be at least 1".into(),
            });
        }
        if let EvalMode::MonteCarlo { samples } = &mut cfg.eval.mode {
            *samples = k;
        }
    } else if let EvalMode::MonteCarlo { samples } = &mut cfg.eval.mode {
        if *samples == 0 {
            *samples = DEFAULT_MC_SAMPLES;
        }
    }
    cfg.validate().map_err(|e| Error::Config {
        line: validation_line(&entries, &e),
        detail: e.to_string(),
    })?;
    Ok(cfg)
}

/// Line of the key a validation message names, or 0 when none matches.
fn validation_line(entries: &[(usize, String, String)], e: &Error) -> usize {
    let msg = e.to_string();
    entries
        .iter()
        .find(|(_, key, _)| {
            let name = key.split_once('.').map_or(key.as_str(), |(_, n)| n);
            msg.contains(name) || msg.contains(&name.replace('_', " "))
        })
        .map_or(0, |(line, _, _)| *line)
}

/// Read a config file; a relative `data.path` becomes absolute, resolved
/// against the file's directory, so stored copies work from anywhere.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    parse_config(&text, Some(&std::fs::canonicalize(dir)?))
}

/// Search-space file: `space.<name> = <lower> <upper> <linear|log>` lines.
pub fn parse_space(text: &str) -> Result<HyperparameterSpace> {
    let mut dims = Vec::new();
    for (line, key, value) in entries(text)? {
        let name = key.strip_prefix("space.").ok_or_else(|| Error::Config {
            line,
            detail: format!("unknown key `{key}`; search-space keys start with `space.`"),
        })?;
        let mut probe = RunConfig::defaults(PathBuf::new(), Level::Word);
        probe.set_hyperparameter(name, 0.0).map_err(|e| Error::Config {
            line,
            detail: e.to_string(),
        })?;
        let parts: Vec<&str> = value.split_whitespace().collect();
        let [lower, upper, scale] = parts[..] else {
            return Err(Error::Config {
                line,
                detail: format!("expected `<lower> <upper> <linear|log>`, got `{value}`"),
            });
        };
        let dim = Dimension::new(
            name,
            parse_value(line, &key, lower)?,
            parse_value(line, &key, upper)?,
            parse_value::<Scale>(line, &key, scale)?,
        )
        .map_err(|e| Error::Config {
            line,
            detail: e.to_string(),
        })?;
        dims.push(dim);
    }
    HyperparameterSpace::new(dims).map_err(|e| Error::Config {
        line: 0,
        detail: e.to_string(),
    })
}

pub fn space_to_text(space: &HyperparameterSpace) -> String {
    space
        .dims()
        .iter()
        .map(|d| format!("space.{} = {} {} {}\n", d.name, d.lower, d.upper, d.scale))
        .collect()
}

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::accounting::presets;
use crate::data::{Level, LmTextSpec, SyntheticSpec};
use crate::freezing::FreezeSpec;
use crate::model::{DecoderSelfKind, Mode, ModelConfig};
use crate::train::TrainConfig;

/// Desk-scale dimensions; vocabulary size and maximum length come from
/// the task's data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeskModel {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_kq: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_v: Option<usize>,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    #[serde(default)]
    pub decoder_self: DecoderSelfKind,
}

impl DeskModel {
    pub fn config(&self, vocab_size: usize, max_len: usize, mode: Mode) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_heads: self.n_heads,
            d_kq: self.d_kq,
            d_v: self.d_v,
            n_enc_layers: if mode == Mode::LanguageModel {
                0
            } else {
                self.n_enc_layers
            },
            n_dec_layers: self.n_dec_layers,
            mode,
            max_len,
            decoder_self: self.decoder_self,
        }
    }
}

/// The model trained by an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Preset { preset: String },
    Desk(DeskModel),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSyntheticTask {
    pub n_lines: usize,
    pub n_dev: usize,
    pub alphabet_size: usize,
    pub lexicon_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub seed: u64,
}

impl LmSyntheticTask {
    pub fn text_spec(&self) -> LmTextSpec {
        LmTextSpec {
            n_lines: self.n_lines,
            alphabet_size: self.alphabet_size,
            lexicon_size: self.lexicon_size,
            min_words: self.min_words,
            max_words: self.max_words,
            seed: self.seed,
        }
    }
}

/// Where an experiment's data comes from. Relative paths are resolved
/// against the grid file's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSource {
    Synthetic(SyntheticSpec),
    LmSynthetic(LmSyntheticTask),
    LmFile {
        path: PathBuf,
        n_dev: usize,
        #[serde(default = "char_level")]
        level: Level,
    },
    ParallelFiles {
        src: PathBuf,
        tgt: PathBuf,
        n_dev: usize,
        #[serde(default = "word_level")]
        level: Level,
    },
}

fn char_level() -> Level {
    Level::Char
}

fn word_level() -> Level {
    Level::Word
}

impl TaskSource {
    pub fn mode(&self) -> Mode {
        match self {
            TaskSource::Synthetic(_) | TaskSource::ParallelFiles { .. } => Mode::Translation,
            TaskSource::LmSynthetic(_) | TaskSource::LmFile { .. } => Mode::LanguageModel,
        }
    }

    fn resolve(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self {
            TaskSource::LmFile { path, .. } => fix(path),
            TaskSource::ParallelFiles { src, tgt, .. } => {
                fix(src);
                fix(tgt);
            }
            _ => {}
        }
        self
    }
}

/// One row of a grid with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub id: String,
    pub model: ModelSource,
    /// Full-size preset whose ratio is checked against `expected_ratio`.
    pub ratio_preset: Option<String>,
    pub task: TaskSource,
    pub freeze: FreezeSpec,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub expected_ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu,
    Ppl,
    Epochs,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Bleu => "bleu",
            Metric::Ppl => "ppl",
            Metric::Epochs => "epochs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// The first row's median is strictly below the second's.
    Less,
    /// The first row's median is strictly above the second's.
    Greater,
}

/// Whether a failed check fails the grid or only warns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Hard,
    #[default]
    Trend,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderingSpec {
    pub a: String,
    pub b: String,
    pub metric: Metric,
    pub direction: Direction,
    #[serde(default)]
    pub severity: Severity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RowFile {
    id: String,
    freeze: FreezeSpec,
    expected_ratio: Option<f64>,
    ratio_preset: Option<String>,
    model: Option<ModelSource>,
    seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    name: String,
    #[serde(default)]
    description: String,
    ratio_preset: Option<String>,
    #[serde(default = "default_tolerance")]
    ratio_tolerance: f64,
    seeds: Vec<u64>,
    model: ModelSource,
    task: TaskSource,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    row: Vec<RowFile>,
    #[serde(default)]
    ordering: Vec<OrderingSpec>,
}

fn default_tolerance() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub name: String,
    pub description: String,
    pub ratio_tolerance: f64,
    pub experiments: Vec<ExperimentSpec>,
    pub orderings: Vec<OrderingSpec>,
}

impl Grid {
    pub fn empty(name: &str) -> Self {
        Self {
            name: name.to_string(),
            description: String::new(),
            ratio_tolerance: default_tolerance(),
            experiments: Vec::new(),
            orderings: Vec::new(),
        }
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        let file: GridFile = toml::from_str(text).map_err(|e| HarnessError::Grid(e.to_string()))?;
        let task = file.task.resolve(base_dir);
        let experiments = file
            .row
            .into_iter()
            .map(|r| ExperimentSpec {
                id: r.id,
                model: r.model.unwrap_or_else(|| file.model.clone()),
                ratio_preset: r.ratio_preset.or_else(|| file.ratio_preset.clone()),
                task: task.clone(),
                freeze: r.freeze,
                train: file.train.clone(),
                seeds: r.seeds.unwrap_or_else(|| file.seeds.clone()),
                expected_ratio: r.expected_ratio,
            })
            .collect();
        let grid = Self {
            name: file.name,
            description: file.description,
            ratio_tolerance: file.ratio_tolerance,
            experiments,
            orderings: file.ordering,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Grid(m));
        let mut ids = HashSet::new();
        for e in &self.experiments {
            if !ids.insert(e.id.as_str()) {
                return bad(format!("duplicate row id {}", e.id));
            }
            if e.seeds.is_empty() {
                return bad(format!("row {} has no seeds", e.id));
            }
            for p in e.ratio_preset.iter().chain(match &e.model {
                ModelSource::Preset { preset } => Some(preset),
                ModelSource::Desk(_) => None,
            }) {
                if presets::get(p).is_none() {
                    return bad(format!("row {}: unknown preset {p}", e.id));
                }
            }
            if e.expected_ratio.is_some() && e.ratio_preset.is_none() {
                return bad(format!(
                    "row {} expects a ratio but names no ratio_preset",
                    e.id
                ));
            }
            e.train
                .validate()
                .map_err(|err| HarnessError::Grid(format!("row {}: {err}", e.id)))?;
        }
        for o in &self.orderings {
            for r in [&o.a, &o.b] {
                if !ids.contains(r.as_str()) {
                    return bad(format!("ordering names unknown row {r}"));
                }
            }
        }
        Ok(())
    }

    /// The grid restricted to `ids`, keeping only orderings between them.
    pub fn select(&self, ids: &[&str]) -> Result<Self, HarnessError> {
        for id in ids {
            if !self.experiments.iter().any(|e| e.id == *id) {
                return Err(HarnessError::MissingRow(id.to_string()));
            }
        }
        let keep = |id: &str| ids.contains(&id);
        Ok(Self {
            experiments: self
                .experiments
                .iter()
                .filter(|e| keep(&e.id))
                .cloned()
                .collect(),
            orderings: self
                .orderings
                .iter()
                .filter(|o| keep(&o.a) && keep(&o.b))
                .cloned()
                .collect(),
            ..self.clone()
        })
    }
}

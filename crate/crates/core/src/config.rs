//! Experiment configuration: one TOML file drives data, model, training and
//! analyses.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attributes::{sparsity_profile, SparsityProfile};
use crate::data::{infer_classes, ingest_jsonl, AttributeField, IngestMode, Vocabularies};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::synthetic::{generate_synthetic, GeneratorSpec, GeneratorStats};
use crate::text::Tokenizer;
use crate::train::{encode_instances, Ablation, Grid, TaskData, TrainPlan, DEFAULT_MEMORY_BUDGET};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub ablation: AblationConfig,
    pub transfer: TransferConfig,
    pub analysis: AnalysisConfig,
    pub grid: Grid,
}

/// Either a directory holding `train.jsonl`, `dev.jsonl` and `test.jsonl`,
/// or, when `dir` is unset, a synthetic dataset drawn from `generator`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    /// Attribute fields of the JSONL records. Read from `fields.json` in
    /// `dir` when empty.
    pub fields: Vec<AttributeField>,
    pub generator: GeneratorSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub min_count: usize,
    pub max_size: Option<usize>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            min_count: 1,
            max_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub variants: Vec<Ablation>,
    pub memory_budget_bytes: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let mut variants = vec![Ablation::Full];
        variants.extend(Ablation::TOGGLES);
        Self {
            variants,
            memory_budget_bytes: DEFAULT_MEMORY_BUDGET as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub source_tasks: Vec<usize>,
    pub target_tasks: Vec<usize>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            source_tasks: vec![0],
            target_tasks: vec![1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub n_bins: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { n_bins: 10 }
    }
}

impl ExperimentConfig {
    /// Parses a possibly partial config. Missing keys take the values of
    /// [`ExperimentConfig::default`], so nested sections stay consistent
    /// with each other (an `[model.injector]` table alone keeps the default
    /// encoder width).
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let mut base: toml::Table = toml::from_str(&Self::default().to_toml()?)
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, table);
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Recursively overlays `top` onto `base`; tables merge, other values
/// replace.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Data ready for training plus the model configuration sized to it.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: TaskData,
    pub tokenizer: Tokenizer,
    pub vocabs: Vocabularies,
    pub model: ModelConfig,
    /// Generator oracle statistics, for synthetic data only.
    pub stats: Option<GeneratorStats>,
    pub profile: SparsityProfile,
}

/// Loads or generates the dataset, fits the tokenizer and fills in the
/// data-dependent model fields (vocabulary size and class counts).
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (train, dev, test, vocabs, stats) = match &cfg.data.dir {
        None => {
            let d = generate_synthetic(&cfg.data.generator)?;
            (d.train, d.dev, d.test, d.vocabs, Some(d.stats))
        }
        Some(dir) => {
            let fields = if cfg.data.fields.is_empty() {
                read_fields(dir)?
            } else {
                cfg.data.fields.clone()
            };
            let train_path = dir.join("train.jsonl");
            let mut vocabs = Vocabularies::new(fields, infer_classes(&train_path)?);
            let train = ingest_jsonl(&train_path, &mut vocabs, IngestMode::Train)?;
            let dev = ingest_jsonl(dir.join("dev.jsonl"), &mut vocabs, IngestMode::Eval)?;
            let test = ingest_jsonl(dir.join("test.jsonl"), &mut vocabs, IngestMode::Eval)?;
            (train, dev, test, vocabs, None)
        }
    };
    let tokenizer = Tokenizer::fit(
        train.iter().map(|i| i.text.as_str()),
        cfg.tokenizer.min_count,
        cfg.tokenizer.max_size,
    );
    let schema = vocabs.schema(cfg.model.injector.d_z)?;
    let profile = sparsity_profile(train.iter().map(|i| &i.attributes), &schema);
    let mut model = cfg.model.clone();
    model.encoder.vocab_size = tokenizer.len();
    model.encoder.class_counts = vocabs.class_counts();
    model.validate()?;
    let data = TaskData {
        schema,
        class_counts: vocabs.class_counts(),
        train: encode_instances(&tokenizer, &train),
        dev: encode_instances(&tokenizer, &dev),
        test: encode_instances(&tokenizer, &test),
    };
    Ok(Prepared {
        data,
        tokenizer,
        vocabs,
        model,
        stats,
        profile,
    })
}

pub const FIELDS_FILE: &str = "fields.json";

pub fn read_fields(dir: &Path) -> Result<Vec<AttributeField>> {
    let path = dir.join(FIELDS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| {
        Error::Config(format!(
            "no attribute fields configured and {} unreadable: {e}",
            path.display()
        ))
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_fields(dir: &Path, fields: &[AttributeField]) -> Result<()> {
    std::fs::write(dir.join(FIELDS_FILE), serde_json::to_string_pretty(fields)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "[plan]\nlearning_rate = 0.01\n[model]\nkind = \"tokens\"\n",
        )
        .unwrap();
        assert_eq!(cfg.plan.learning_rate, 0.01);
        assert_eq!(cfg.plan.total_steps, TrainPlan::default().total_steps);
        assert_eq!(cfg.model.kind, crate::encoder::ModelKind::Tokens);
    }

    #[test]
    fn partial_nested_table_keeps_sibling_defaults() {
        let cfg = ExperimentConfig::from_toml("[model.injector]\nn_dims = 1\n").unwrap();
        assert_eq!(cfg.model.injector.n_dims, 1);
        assert_eq!(cfg.model.injector.d_h, cfg.model.encoder.d_h);
        cfg.model.validate().unwrap();
    }

    #[test]
    fn unknown_section_is_rejected() {
        assert!(ExperimentConfig::from_toml("[modle]\n").is_err());
    }

    #[test]
    fn synthetic_preparation_sizes_the_model() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.generator.n_train = 200;
        cfg.data.generator.n_dev = 20;
        cfg.data.generator.n_test = 20;
        let p = prepare(&cfg).unwrap();
        assert_eq!(p.model.encoder.vocab_size, p.tokenizer.len());
        assert_eq!(p.model.encoder.class_counts, vec![5]);
        assert_eq!(p.data.train.len(), 200);
        assert!(p.stats.is_some());
    }
}

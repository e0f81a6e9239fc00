//! Self-contained checkpoint directories: parameters plus everything needed
//! to rebuild the model and encode new data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attributes::SparsityProfile;
use crate::checkpoint;
use crate::data::{ingest_jsonl, AttributeField, IngestMode, Instance, Metric, Vocabularies};
use crate::encoder::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::text::Tokenizer;
use crate::train::{encode_instances, Example};

pub const PARAMS_FILE: &str = "params.ckpt";
pub const META_FILE: &str = "model.json";
pub const TOKENIZER_FILE: &str = "tokenizer.vocab";
pub const VOCAB_DIR: &str = "vocab";

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    fields: Vec<AttributeField>,
    d_z: usize,
    metric: Metric,
    train_profile: SparsityProfile,
}

#[derive(Clone, Debug)]
pub struct Bundle<T> {
    pub model: Model,
    pub params: ParamStore<T>,
    pub tokenizer: Tokenizer,
    pub vocabs: Vocabularies,
    pub metric: Metric,
    /// Label frequencies of the training set, for sparsity binning.
    pub train_profile: SparsityProfile,
}

impl<T: Scalar> Bundle<T> {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join(VOCAB_DIR))?;
        let meta = Meta {
            model: self.model.config.clone(),
            fields: self.vocabs.fields.clone(),
            d_z: self.model.schema.d_z,
            metric: self.metric,
            train_profile: self.train_profile.clone(),
        };
        std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
        self.tokenizer.save(dir.join(TOKENIZER_FILE))?;
        self.vocabs.save(dir.join(VOCAB_DIR))?;
        checkpoint::save(dir.join(PARAMS_FILE), &self.params.named())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: Meta = serde_json::from_str(&std::fs::read_to_string(dir.join(META_FILE))?)?;
        let n_tasks = meta.model.encoder.class_counts.len();
        let vocabs = Vocabularies::load(dir.join(VOCAB_DIR), meta.fields, n_tasks)?;
        let tokenizer = Tokenizer::load(dir.join(TOKENIZER_FILE))?;
        let model = Model::new(meta.model, vocabs.schema(meta.d_z)?)?;
        let mut params = model.init_params::<T>(0, 0);
        let tensors = checkpoint::load::<T>(dir.join(PARAMS_FILE))?;
        let n = params.load_named(tensors.iter().map(|(n, t)| (n.as_str(), t)), |_| true)?;
        if n != params.layout().len() || tensors.len() != n {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, {} match the model's {}",
                tensors.len(),
                n,
                params.layout().len()
            )));
        }
        Ok(Self {
            model,
            params,
            tokenizer,
            vocabs,
            metric: meta.metric,
            train_profile: meta.train_profile,
        })
    }

    /// Reads evaluation records; unseen attribute labels are dropped.
    pub fn ingest(&self, path: impl AsRef<Path>) -> Result<Vec<Instance>> {
        let mut vocabs = self.vocabs.clone();
        ingest_jsonl(path, &mut vocabs, IngestMode::Eval)
    }

    pub fn encode(&self, instances: &[Instance]) -> Vec<Example> {
        encode_instances(&self.tokenizer, instances)
    }
}

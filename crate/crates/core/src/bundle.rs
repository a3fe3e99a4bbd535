//! A trained model on disk: a directory with a manifest, the vocabulary,
//! one checkpoint per parameter set and an optional entity database.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ardm::ArdmParams;
use crate::data::EntityDB;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params};
use crate::tokenizer::Vocab;

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// True for a single parameter set serving both roles.
    pub shared: bool,
    pub model: ModelConfig,
    /// Checkpoint file per parameter set, relative to the directory.
    pub checkpoints: Vec<String>,
    pub vocab: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub db: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Bundle {
    pub params: ArdmParams,
    pub vocab: Vocab,
    pub db: Option<EntityDB>,
}

impl Bundle {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let cfg = self.params.config();
        let names: Vec<String> = if self.params.is_shared() {
            vec!["shared.ardm".into()]
        } else {
            vec!["user.ardm".into(), "system.ardm".into()]
        };
        for (name, set) in names.iter().zip(self.params.sets()) {
            set.save(cfg, dir.join(name))?;
        }
        self.vocab.save(dir.join("vocab.json"))?;
        let db = match &self.db {
            Some(db) => {
                db.save(dir.join("db.json"))?;
                Some("db.json".to_string())
            }
            None => None,
        };
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            shared: self.params.is_shared(),
            model: cfg.clone(),
            checkpoints: names,
            vocab: "vocab.json".into(),
            db,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported bundle version {}",
                manifest.format_version
            )));
        }
        let cfg = manifest.model;
        cfg.validate()?;
        let sets = manifest
            .checkpoints
            .iter()
            .map(|name| Params::load(&cfg, dir.join(name)))
            .collect::<Result<Vec<_>>>()?;
        let params = match (
            manifest.shared,
            <[Params; 1]>::try_from(sets.clone()),
            <[Params; 2]>::try_from(sets),
        ) {
            (true, Ok([p]), _) => ArdmParams::from_shared(cfg, p)?,
            (false, _, Ok([u, s])) => ArdmParams::from_sets(cfg, u, s)?,
            _ => return Err(Error::Format("checkpoint count does not match the manifest".into())),
        };
        let vocab = Vocab::load(dir.join(&manifest.vocab))?;
        if vocab.size() > params.config().vocab_size {
            return Err(Error::Format(format!(
                "vocabulary of {} symbols exceeds the model's {}",
                vocab.size(),
                params.config().vocab_size
            )));
        }
        let db = manifest.db.map(|f| EntityDB::load(dir.join(f))).transpose()?;
        Ok(Bundle { params, vocab, db })
    }
}

//! JSON checkpoints: configuration, frozen buffers and every parameter value.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Buffers, Model};
use crate::params::ParamStore;

pub const FORMAT: &str = "latent-vqa-checkpoint/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub config_hash: String,
    pub buffers: Buffers,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn of(model: &Model) -> Self {
        Self {
            format: FORMAT.to_string(),
            config: model.config.clone(),
            config_hash: model.config.hash(),
            buffers: model.buffers.clone(),
            params: model.store.clone(),
        }
    }

    /// Rebuilds the model and checks every stored value against its layout.
    pub fn into_model(self) -> Result<Model> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {:?}", self.format)));
        }
        if self.config.hash() != self.config_hash {
            return Err(Error::Checkpoint("config hash does not match stored config".into()));
        }
        let mut model = Model::new(self.config, self.buffers)?;
        model.store.load_from(&self.params)?;
        Ok(model)
    }
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(f, &Checkpoint::of(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    ck.into_model()
}

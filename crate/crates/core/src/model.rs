//! Complete parameter set of the tracker.

use std::path::Path;

use rand::SeedableRng;

use crate::checkpoint;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;
use crate::{attention, controller, feature_net, template, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization of every component.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        feature_net::add_feature_net(&config.featnet, &mut rng, &mut params);
        feature_net::add_class_head(config, &mut rng, &mut params);
        attention::add_params(config, &mut rng, &mut params);
        controller::add_params(config, &mut rng, &mut params);
        template::add_params(config, &mut rng, &mut params);
        Ok(Model { config: config.clone(), params })
    }

    /// Accepts `params` if they have exactly the names and shapes `config`
    /// calls for.
    pub fn from_params(config: &ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let reference: Model<T> = Model::init(config, 0)?;
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Format(format!("checkpoint lacks {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "{name}: checkpoint shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| reference.params.get(n).is_err()) {
            return Err(Error::Format(format!("unexpected tensor {extra} in checkpoint")));
        }
        Ok(Model { config: config.clone(), params })
    }

    pub fn load(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self> {
        Self::from_params(config, checkpoint::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }
}

//! Model configuration and the full parameter set.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{ControllerIds, EncoderIds};
use crate::error::{Error, Result};
use crate::modules::ModuleIds;
use crate::tensor::{ParamId, ParamStore};

const CONFIG_FILE: &str = "config.json";
const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Text size d, also the conv width inside modules.
    pub hidden: usize,
    /// Controller steps T.
    pub steps: usize,
    /// Stack depth L.
    pub stack_depth: usize,
    /// Grid side; feature maps are `grid × grid`.
    pub grid: usize,
    /// Feature channels D.
    pub features: usize,
    pub vocab_size: usize,
    pub answers: usize,
    /// Pointer sharpening is `softmax(p / sharpen_temperature)`.
    pub sharpen_temperature: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, answers: usize) -> Self {
        Self {
            hidden: 64,
            steps: 6,
            stack_depth: 7,
            grid: 5,
            features: 11,
            vocab_size,
            answers,
            sharpen_temperature: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.hidden % 2 != 0 {
            return fail(format!("hidden must be a positive even number, got {}", self.hidden));
        }
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.stack_depth < self.steps + 1 {
            return fail(format!(
                "stack_depth {} must be at least steps + 1 = {}",
                self.stack_depth,
                self.steps + 1
            ));
        }
        if self.grid == 0 || self.features == 0 || self.vocab_size == 0 || self.answers == 0 {
            return fail("grid, features, vocab_size and answers must be positive".into());
        }
        if !(self.sharpen_temperature.is_finite() && self.sharpen_temperature > 0.0) {
            return fail(format!("sharpen_temperature must be positive, got {}", self.sharpen_temperature));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelIds {
    pub encoder: EncoderIds,
    pub controller: ControllerIds,
    pub modules: ModuleIds,
    /// `[D, 4]` box-offset regressor on the attended feature.
    pub bbox_w: ParamId,
    pub bbox_b: ParamId,
}

impl ModelIds {
    fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, c: &ModelConfig) -> Self {
        let encoder = EncoderIds::register(store, rng, c.vocab_size, c.hidden);
        let controller = ControllerIds::register(store, rng, c.hidden, c.steps);
        let modules = ModuleIds::register(store, rng, c.features, c.hidden, c.answers);
        let bbox_w = store.insert_weight(rng, "bbox.w", c.features, 4);
        let bbox_b = store.insert_filled("bbox.b", &[4], 0.0);
        Self {
            encoder,
            controller,
            modules,
            bbox_w,
            bbox_b,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub ids: ModelIds,
}

impl Model {
    /// Freshly initialized parameters, deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let ids = ModelIds::register(&mut params, &mut rng, &config);
        Ok(Self { config, params, ids })
    }

    /// Adopts `loaded` values, matched by name and shape.
    pub fn from_params(config: ModelConfig, loaded: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if loaded.len() != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                model.params.len()
            )));
        }
        for p in model.params.iter_mut() {
            let src = loaded
                .get(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {}", p.name)))?;
            if src.shape != p.shape {
                return Err(Error::Config(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name, src.shape, p.shape
                )));
            }
            p.values.clone_from(&src.values);
        }
        Ok(model)
    }

    /// Writes `config.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join(CONFIG_FILE), json + "\n")?;
        self.params.save(&dir.join(PARAMS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(CONFIG_FILE))?;
        let config: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            detail: e.to_string(),
        })?;
        let params = ParamStore::load(&dir.join(PARAMS_FILE))?;
        Self::from_params(config, &params)
    }
}

//! TOML run configuration. Unknown keys are rejected at every level.
//!
//! ```toml
//! seed = 0
//!
//! [model]
//! image_size = 32
//! patch_size = 4
//! embed_dim = 64
//!
//! [task_a]
//! family = "shape-class"
//! num_classes = 4
//! train = 2000
//! val = 500
//! test = 500
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SyntheticTaskSpec, TaskFamily};
use crate::error::{Error, Result};
use crate::fisher::FimOptions;
use crate::refine::PlacementMode;
use crate::rng;
use crate::selector::SelectorConfig;
use crate::train::TrainConfig;
use crate::vit::ModelConfig;

/// Backbone architecture; the class count comes from the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            image_size: m.image_height,
            channels: m.channels,
            patch_size: m.patch_size,
            embed_dim: m.embed_dim,
            num_layers: m.num_layers,
            num_heads: m.num_heads,
            mlp_ratio: m.mlp_ratio,
        }
    }
}

impl ModelSection {
    pub fn to_model(&self, num_classes: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            image_height: self.image_size,
            image_width: self.image_size,
            channels: self.channels,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            mlp_ratio: self.mlp_ratio,
            num_classes,
            seed,
        }
    }
}

/// A synthetic task; its seed is derived from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub family: TaskFamily,
    pub num_classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    #[serde(default)]
    pub noise: f64,
}

impl TaskSection {
    pub fn to_spec(&self, model: &ModelSection, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            family: self.family,
            image_size: model.image_size,
            channels: model.channels,
            num_classes: self.num_classes,
            train: self.train,
            val: self.val,
            test: self.test,
            noise: self.noise,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FimSection {
    pub batch_size: usize,
    /// Omitted: one pass over the task-B training split.
    pub num_batches: Option<usize>,
    pub with_replacement: bool,
}

impl Default for FimSection {
    fn default() -> Self {
        Self {
            batch_size: 32,
            num_batches: None,
            with_replacement: false,
        }
    }
}

impl FimSection {
    pub fn options(&self, seed: u64) -> FimOptions {
        FimOptions {
            batch_size: self.batch_size,
            num_batches: self.num_batches,
            with_replacement: self.with_replacement,
            loss_scale: 1.0,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineSection {
    pub rho: f64,
    pub mode: PlacementMode,
    pub num_layers: usize,
    /// Used when `mode = "explicit"`.
    pub layers: Vec<usize>,
}

impl Default for RefineSection {
    fn default() -> Self {
        Self {
            rho: 0.95,
            mode: PlacementMode::Sparse,
            num_layers: 3,
            layers: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    /// Extra downstream families whose masks enter the overlap matrix.
    pub overlap_families: Vec<TaskFamily>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            overlap_families: vec![TaskFamily::QuadrantClass],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    /// Pretraining task.
    pub task_a: TaskSection,
    /// Downstream task.
    pub task_b: TaskSection,
    pub pretrain: TrainConfig,
    pub fim: FimSection,
    pub selector: SelectorConfig,
    pub refine: RefineSection,
    pub finetune: TrainConfig,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSection::default(),
            task_a: TaskSection {
                family: TaskFamily::ShapeClass,
                num_classes: 4,
                train: 2000,
                val: 500,
                test: 500,
                noise: 0.05,
            },
            task_b: TaskSection {
                family: TaskFamily::CountClass,
                num_classes: 4,
                train: 1000,
                val: 500,
                test: 500,
                noise: 0.05,
            },
            pretrain: TrainConfig {
                learning_rate: 1e-3,
                final_learning_rate: 1e-5,
                warmup_steps: 100,
                epochs: 30,
                ..TrainConfig::default()
            },
            fim: FimSection::default(),
            selector: SelectorConfig::default(),
            refine: RefineSection::default(),
            finetune: TrainConfig {
                learning_rate: 1e-3,
                final_learning_rate: 1e-5,
                epochs: 20,
                ..TrainConfig::default()
            },
            ablation: AblationSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_a().validate()?;
        self.task_a_spec().validate()?;
        self.task_b_spec().validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.selector.validate()?;
        if !(self.refine.rho > 0.0 && self.refine.rho <= 1.0) {
            return Err(Error::Config(format!(
                "rho {} outside (0, 1]",
                self.refine.rho
            )));
        }
        if self.refine.num_layers >= self.model.num_layers {
            return Err(Error::Config(format!(
                "{} refining layers for a {}-layer model",
                self.refine.num_layers, self.model.num_layers
            )));
        }
        if self.fim.batch_size == 0 {
            return Err(Error::Config("fim.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// sha256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn seed_for(&self, name: &str) -> u64 {
        rng::derive_seed(self.seed, name)
    }

    pub fn task_a_spec(&self) -> SyntheticTaskSpec {
        self.task_a.to_spec(&self.model, self.seed_for("task_a"))
    }

    pub fn task_b_spec(&self) -> SyntheticTaskSpec {
        self.task_b.to_spec(&self.model, self.seed_for("task_b"))
    }

    /// Spec for an extra downstream family used by the overlap analysis.
    pub fn overlap_task_spec(&self, family: TaskFamily) -> SyntheticTaskSpec {
        let mut task = self.task_b.clone();
        task.family = family;
        task.num_classes = family.fit_classes(task.num_classes);
        task.to_spec(&self.model, self.seed_for(&format!("task/{family}")))
    }

    /// Architecture of the pretraining model.
    pub fn model_a(&self) -> ModelConfig {
        self.model
            .to_model(self.task_a.num_classes, self.seed_for("model"))
    }
}

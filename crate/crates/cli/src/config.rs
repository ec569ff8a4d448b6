//! The run configuration file: model, dataset, training and path settings
//! in one TOML document.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;
use stampnet::data::DatasetConfig;
use stampnet::model::ModelConfig;
use stampnet::training::TrainConfig;

use crate::exit::Invalid;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Training (or generated) dataset.
    pub data: Option<PathBuf>,
    /// Held-out dataset for `eval`; falls back to `data`.
    pub test_data: Option<PathBuf>,
    /// Directory for checkpoints and the training report.
    pub checkpoints: Option<PathBuf>,
    /// Directory or file for reports and images.
    pub outputs: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for model initialization, training and evaluation noise.
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub paths: Paths,
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> anyhow::Error {
    Invalid(format!("{field}: {msg}")).into()
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Invalid(e.to_string()))?;
        Ok(cfg)
    }

    /// Applies a `--seed` override to every seeded stage.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
            self.dataset.seed = s;
        }
        self.train.seed = self.seed;
        self
    }

    /// Cross-field checks, run before any output is written.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate().map_err(|e| invalid("model", e))?;
        self.dataset.validate().map_err(|e| invalid("dataset", e))?;
        self.train.validate().map_err(|e| invalid("train", e))?;
        let (m, d) = (&self.model, &self.dataset);
        if (m.canvas_width, m.canvas_height) != (d.canvas_width, d.canvas_height) {
            return Err(invalid(
                "model.canvas_width",
                format!(
                    "model canvas {}x{} differs from dataset canvas {}x{}",
                    m.canvas_width, m.canvas_height, d.canvas_width, d.canvas_height
                ),
            ));
        }
        if m.channels != 1 {
            return Err(invalid(
                "model.channels",
                "generated datasets are single-channel",
            ));
        }
        if d.objects > m.shapes {
            return Err(invalid(
                "dataset.objects",
                format!(
                    "{} objects per image exceed the model's {} shape heads",
                    d.objects, m.shapes
                ),
            ));
        }
        if d.kind.needs_mnist() {
            for (field, path) in [
                ("dataset.mnist_images", &d.mnist_images),
                ("dataset.mnist_labels", &d.mnist_labels),
            ] {
                match path {
                    None => return Err(invalid(field, format!("required for {}", d.kind.name()))),
                    Some(p) if !p.is_file() => {
                        return Err(invalid(field, format!("{} does not exist", p.display())))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }
}

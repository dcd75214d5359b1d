//! TOML run configuration and the end-to-end training run built from it.
//!
//! ```toml
//! [data]
//! cloud = "scene.csv"
//! validate_on_train = true
//!
//! [model]
//! num_classes = 4
//! bands = 8
//!
//! [fusion]
//! mode = "mid-cpa"
//! ```
//!
//! Every section is optional and every field defaults to the values of
//! [`ModelConfig`], [`TrainConfig`] and [`BlockSpec`]. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::fuse_io::{load_checkpoint, save_checkpoint, PointCloud};
use crate::geom::SpectralNormalizer;
use crate::model::{Backbone, Fusion, Modalities, Model, ModelConfig, SkipSource};
use crate::numcore::Relation;
use crate::train::{
    build_samples, checkpoint_params, class_counts, inverse_frequency_weights, split_blocks,
    split_checkpoint, train, BlockSpec, EpochRecord, TrainConfig, TrainReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Labelled training cloud. Relative paths resolve against the config file.
    pub cloud: PathBuf,
    /// Separate validation cloud; otherwise blocks of `cloud` are split.
    pub val_cloud: Option<PathBuf>,
    /// Validate on the training samples themselves (single-block scenes).
    pub validate_on_train: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            cloud: PathBuf::from("cloud.csv"),
            val_cloud: None,
            validate_on_train: false,
        }
    }
}

/// The non-fusion half of [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub widths: Vec<usize>,
    pub k: usize,
    pub n_input: usize,
    pub num_classes: usize,
    pub bands: usize,
    pub attention: AttentionKind,
    pub beta: Relation,
    pub pos_encoding: bool,
    pub backbone: Backbone,
    pub inputs: Modalities,
    pub skip: SkipSource,
}

/// The fusion half of [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub mode: Fusion,
    pub alpha: f64,
    pub gamma_init: f64,
    pub cpa_embed: Option<usize>,
    pub cpa_dense: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        split_model(&ModelConfig::default()).0
    }
}

impl Default for FusionSection {
    fn default() -> Self {
        split_model(&ModelConfig::default()).1
    }
}

fn split_model(m: &ModelConfig) -> (ModelSection, FusionSection) {
    (
        ModelSection {
            widths: m.widths.clone(),
            k: m.k,
            n_input: m.n_input,
            num_classes: m.num_classes,
            bands: m.bands,
            attention: m.attention,
            beta: m.beta,
            pos_encoding: m.pos_encoding,
            backbone: m.backbone,
            inputs: m.inputs,
            skip: m.skip,
        },
        FusionSection {
            mode: m.fusion,
            alpha: m.alpha,
            gamma_init: m.gamma_init,
            cpa_embed: m.cpa_embed,
            cpa_dense: m.cpa_dense,
        },
    )
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Labelled held-out cloud scored after training.
    pub cloud: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub blocks: BlockSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub fusion: FusionSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn from_parts(model: &ModelConfig, train: TrainConfig) -> Self {
        let (model_s, fusion) = split_model(model);
        RunConfig {
            model: model_s,
            fusion,
            train,
            ..Default::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let (m, f) = (&self.model, &self.fusion);
        ModelConfig {
            widths: m.widths.clone(),
            k: m.k,
            n_input: m.n_input,
            num_classes: m.num_classes,
            bands: m.bands,
            attention: m.attention,
            beta: m.beta,
            pos_encoding: m.pos_encoding,
            fusion: f.mode,
            alpha: f.alpha,
            gamma_init: f.gamma_init,
            cpa_embed: f.cpa_embed,
            cpa_dense: f.cpa_dense,
            backbone: m.backbone,
            inputs: m.inputs,
            skip: m.skip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        if !(self.blocks.size > 0.0
            && self.blocks.stride > 0.0
            && self.blocks.stride <= self.blocks.size)
        {
            return Err(Error::Config(format!(
                "block size {} and stride {} need 0 < stride <= size",
                self.blocks.size, self.blocks.stride
            )));
        }
        if let Some(w) = &self.train.class_weights {
            if w.len() != self.model.num_classes {
                return Err(Error::Config(format!(
                    "{} class weights for {} classes",
                    w.len(),
                    self.model.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Copy with relative data paths joined onto `base`.
    pub fn resolved(&self, base: &Path) -> Self {
        let join = |p: &Path| {
            if p.is_relative() {
                base.join(p)
            } else {
                p.to_path_buf()
            }
        };
        let mut out = self.clone();
        out.data.cloud = join(&self.data.cloud);
        out.data.val_cloud = self.data.val_cloud.as_deref().map(join);
        out.eval.cloud = self.eval.cloud.as_deref().map(join);
        out
    }
}

/// Result of [`run_training`]: `model` holds the best-validation parameters.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    pub norm: SpectralNormalizer,
    pub report: TrainReport,
    pub weights: Vec<f64>,
}

/// Normalises, blocks, samples and trains on `cloud`.
pub fn run_training(
    cfg: &RunConfig,
    cloud: &PointCloud,
    val_cloud: Option<&PointCloud>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mc = cfg.model_config();
    for (what, c) in
        std::iter::once(("training", cloud)).chain(val_cloud.map(|v| ("validation", v)))
    {
        c.validate()?;
        if c.bands() != mc.bands {
            return Err(Error::Config(format!(
                "{what} cloud has {} bands, config expects {}",
                c.bands(),
                mc.bands
            )));
        }
        if c.labels.is_none() {
            return Err(Error::invalid(format!("{what} cloud carries no labels")));
        }
    }
    let seed = cfg.train.seed;
    let norm = SpectralNormalizer::fit(&cloud.attrs, mc.bands)?;
    let blocks = cfg.blocks.partition(cloud)?;
    let (train_s, val_s) = if let Some(v) = val_cloud {
        let vb = cfg.blocks.partition(v)?;
        (
            build_samples(cloud, &norm, &blocks, mc.n_input, seed)?,
            build_samples(v, &norm, &vb, mc.n_input, seed ^ 1)?,
        )
    } else if cfg.data.validate_on_train {
        let s = build_samples(cloud, &norm, &blocks, mc.n_input, seed)?;
        (s.clone(), s)
    } else {
        let (ti, vi) = split_blocks(blocks.len(), cfg.train.val_fraction, seed)?;
        let pick = |ix: &[usize]| ix.iter().map(|&i| blocks[i].clone()).collect::<Vec<_>>();
        (
            build_samples(cloud, &norm, &pick(&ti), mc.n_input, seed)?,
            build_samples(cloud, &norm, &pick(&vi), mc.n_input, seed ^ 1)?,
        )
    };
    let weights = match &cfg.train.class_weights {
        Some(w) => w.clone(),
        None => inverse_frequency_weights(&class_counts(
            &train_s,
            mc.num_classes,
            cfg.train.ignore_label,
        )?),
    };
    let mut model = Model::new(mc.clone(), seed)?;
    let report = train(&mut model, &train_s, &val_s, &cfg.train, &weights, on_epoch)?;
    let model = Model::from_params(mc, report.best_params.clone())?;
    Ok(RunOutcome {
        model,
        norm,
        report,
        weights,
    })
}

/// Configuration stored next to a checkpoint: `model.hpf` pairs with `model.toml`.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("toml")
}

/// Writes the checkpoint (parameters plus normaliser) and its config sidecar.
pub fn save_run(
    checkpoint: &Path,
    cfg: &RunConfig,
    model: &Model,
    norm: &SpectralNormalizer,
) -> Result<()> {
    save_checkpoint(checkpoint, &checkpoint_params(model, norm)?)?;
    let side = sidecar_path(checkpoint);
    std::fs::write(&side, cfg.to_toml()).map_err(|e| Error::io(side, e))
}

/// Inverse of [`save_run`].
pub fn load_run(checkpoint: &Path) -> Result<(RunConfig, Model, SpectralNormalizer)> {
    let cfg = RunConfig::load(&sidecar_path(checkpoint))?;
    let (params, norm) = split_checkpoint(load_checkpoint(checkpoint)?)?;
    let model = Model::from_params(cfg.model_config(), params)?;
    Ok((cfg, model, norm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_module_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.model_config(), ModelConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.blocks, BlockSpec::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("[model]\nwidth = 3\n").is_err());
        assert!(RunConfig::parse("[extra]\n").is_err());
        assert!(RunConfig::parse("[fusion]\nmode = \"mid-fancy\"\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::parse("[model]\nnum_classes = 3\nbands = 4\n[train]\nlr = 0.0003\n")
            .unwrap();
        c.fusion.cpa_embed = Some(12);
        c.fusion.alpha = 0.1 + 0.2;
        c.train.class_weights = Some(vec![0.0, 1.5, 1.0 / 3.0]);
        c.eval.cloud = Some("held.csv".into());
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn relative_paths_resolve() {
        let c =
            RunConfig::parse("[data]\ncloud = \"a.csv\"\nval_cloud = \"/abs/b.csv\"\n").unwrap();
        let r = c.resolved(Path::new("/runs"));
        assert_eq!(r.data.cloud, PathBuf::from("/runs/a.csv"));
        assert_eq!(r.data.val_cloud, Some(PathBuf::from("/abs/b.csv")));
    }
}

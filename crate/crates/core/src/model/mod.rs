//! The dual-branch segmentation network and its ablation variants.
//!
//! A mid-fusion model runs a geometry branch (normalised XYZ) and a spectral
//! branch (normalised bands) through four encoder stages. After each stage's
//! transformer layer the two branches are fused, the fused features become
//! the stage's skip connection, and farthest-point sampling halves the point
//! set before each branch projects the fused features to the next width. A
//! decoder interpolates back up through the skips and a linear head emits
//! per-point logits.

mod layers;
mod network;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::numcore::Relation;

pub use layers::{
    cross_point_attention, decoder_block, edge_core, fuse_bidirectional, fuse_classic, idw_table,
    linear, transformer_layer, CpaVars, IdwTable, VarMap,
};
pub use network::{BlockInput, ForwardOutput, Model, Prediction, Pyramid};

/// How (and whether) the two modalities are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// One branch over concatenated coordinates and bands.
    Early,
    /// Two independent networks; logits and losses mixed by `alpha`.
    Late,
    MidSum,
    MidConcat,
    MidAverage,
    MidMax,
    MidCpa,
}

impl Fusion {
    pub fn classic(self) -> Option<ClassicFusion> {
        match self {
            Fusion::MidSum => Some(ClassicFusion::Sum),
            Fusion::MidConcat => Some(ClassicFusion::Concat),
            Fusion::MidAverage => Some(ClassicFusion::Average),
            Fusion::MidMax => Some(ClassicFusion::Max),
            _ => None,
        }
    }

    pub fn is_mid(self) -> bool {
        self == Fusion::MidCpa || self.classic().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassicFusion {
    Sum,
    Concat,
    Average,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    VsaTransformer,
    PointwiseMlp,
    EdgeGraph,
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vsa-transformer" => Ok(Backbone::VsaTransformer),
            "pointwise-mlp" => Ok(Backbone::PointwiseMlp),
            "edge-graph" => Ok(Backbone::EdgeGraph),
            other => Err(Error::invalid(format!("unknown backbone {other:?}"))),
        }
    }
}

/// Which inputs a single-branch (early) model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modalities {
    Both,
    GeometryOnly,
    SpectralOnly,
}

/// Source of the decoder skip connections in mid-fusion models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipSource {
    /// The fused stage output.
    Fused,
    /// Both branches' pre-fusion outputs, concatenated.
    Branches,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub k: usize,
    pub n_input: usize,
    pub num_classes: usize,
    /// Spectral input width.
    pub bands: usize,
    pub attention: AttentionKind,
    pub beta: Relation,
    pub pos_encoding: bool,
    pub fusion: Fusion,
    /// Late-fusion weight of the geometry network.
    pub alpha: f64,
    pub gamma_init: f64,
    /// Cross-attention embedding width; `None` uses the stage width.
    pub cpa_embed: Option<usize>,
    /// Cross attention over all points instead of the stage neighbourhoods.
    pub cpa_dense: bool,
    pub backbone: Backbone,
    pub inputs: Modalities,
    pub skip: SkipSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: vec![32, 64, 128, 256],
            k: 16,
            n_input: 4096,
            num_classes: 2,
            bands: 1,
            attention: AttentionKind::Vsa,
            beta: Relation::Subtraction,
            pos_encoding: false,
            fusion: Fusion::MidCpa,
            alpha: 0.5,
            gamma_init: 0.0,
            cpa_embed: None,
            cpa_dense: false,
            backbone: Backbone::VsaTransformer,
            inputs: Modalities::Both,
            skip: SkipSource::Fused,
        }
    }
}

impl ModelConfig {
    pub const STAGES: usize = 4;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.len() != Self::STAGES || self.widths.contains(&0) {
            return bad(format!(
                "widths must be {} positive values, got {:?}",
                Self::STAGES,
                self.widths
            ));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        let factor = 1 << Self::STAGES;
        if self.n_input < factor || !self.n_input.is_multiple_of(factor) {
            return bad(format!(
                "n_input {} must be a positive multiple of {factor} so every stage halves evenly",
                self.n_input
            ));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.bands == 0 {
            return bad("bands must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !self.gamma_init.is_finite() {
            return bad("gamma_init must be finite".into());
        }
        if self.cpa_embed == Some(0) {
            return bad("cpa_embed must be positive".into());
        }
        if self.inputs != Modalities::Both && self.fusion != Fusion::Early {
            return bad("single-modality inputs need fusion = \"early\"".into());
        }
        Ok(())
    }

    /// Point count processed by stage `s` (0-based).
    pub fn points_at(&self, s: usize) -> usize {
        self.n_input >> s
    }

    /// Width entering stage `s + 1`; the bottleneck keeps the last width.
    pub fn next_width(&self, s: usize) -> usize {
        self.widths[(s + 1).min(Self::STAGES - 1)]
    }
}

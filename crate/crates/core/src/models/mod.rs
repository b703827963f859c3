//! The four compact backbones: ZACH-ViT, Minimal-ViT, ABMIL and TransMIL.
//!
//! Every model maps a `[b, h, w, c]` image batch in `[0, 1]` to `[b, classes]`
//! logits. Images are cut into non-overlapping `patch_size × patch_size`
//! patches, flattened in `(row, col, channel)` order; each patch is one token
//! (transformers) or one instance (MIL models).

mod abmil;
mod layers;
mod minimalvit;
mod params;
mod transmil;
mod zachvit;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Element, Tape, Tensor, Var};

pub use abmil::{attention_weights as abmil_attention_weights, forward as forward_abmil};
pub use minimalvit::forward as forward_minimalvit;
pub use params::{build, count_params, BoundParams, ModelParams, ParamDef, ParamInit};
pub use transmil::forward as forward_transmil;
pub use zachvit::forward as forward_zachvit;

/// Upper bound on instantiated parameters, exclusive.
pub const PARAM_BUDGET: usize = 1_000_000;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("parameter count {count} exceeds the budget of {budget}")]
    ParamBudget { count: usize, budget: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("unexpected parameter `{0}`")]
    UnexpectedParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("image batch of shape {found:?} does not fit input {height}x{width}x{channels} with patch size {patch}")]
    ImageShape {
        found: Vec<usize>,
        height: usize,
        width: usize,
        channels: usize,
        patch: usize,
    },
    #[error("malformed parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    #[serde(rename = "abmil")]
    Abmil,
    #[serde(rename = "minimalvit")]
    MinimalVit,
    #[serde(rename = "transmil")]
    TransMil,
    #[serde(rename = "zachvit")]
    ZachVit,
}

impl Architecture {
    /// All architectures in table column order.
    pub const ALL: [Architecture; 4] = [
        Architecture::Abmil,
        Architecture::MinimalVit,
        Architecture::TransMil,
        Architecture::ZachVit,
    ];

    /// Identifier used on the command line and in record files.
    pub fn key(self) -> &'static str {
        match self {
            Architecture::Abmil => "abmil",
            Architecture::MinimalVit => "minimalvit",
            Architecture::TransMil => "transmil",
            Architecture::ZachVit => "zachvit",
        }
    }

    /// Name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Architecture::Abmil => "ABMIL",
            Architecture::MinimalVit => "Minimal-ViT",
            Architecture::TransMil => "TransMIL",
            Architecture::ZachVit => "ZACH-ViT",
        }
    }

    /// Whether logits are invariant to the order of patch tokens.
    pub fn is_permutation_invariant(self) -> bool {
        !matches!(self, Architecture::MinimalVit)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Architecture::ALL
            .into_iter()
            .find(|a| a.key() == norm)
            .ok_or_else(|| ModelError::Spec(format!("unknown architecture `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for InputShape {
    fn default() -> Self {
        Self {
            height: 28,
            width: 28,
            channels: 3,
        }
    }
}

/// Architecture identity and hyperparameters.
///
/// `embed_dims` is read per architecture: ZACH-ViT uses one width per stage
/// with `depth` blocks in each stage; Minimal-ViT and TransMIL use a single
/// width with `depth` blocks; ABMIL uses `[encoder hidden, encoder out,
/// attention dim]` and ignores `depth`, `heads` and `mlp_ratio`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    #[serde(default)]
    pub input: InputShape,
    pub num_classes: usize,
    pub patch_size: usize,
    pub embed_dims: Vec<usize>,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl ModelSpec {
    /// Default configuration for 28×28×3 inputs.
    pub fn default_for(arch: Architecture, num_classes: usize) -> Self {
        let (embed_dims, depth, heads) = match arch {
            Architecture::ZachVit => (vec![48, 96, 144], 2, 4),
            Architecture::MinimalVit => (vec![96], 6, 4),
            Architecture::Abmil => (vec![128, 128, 64], 2, 1),
            Architecture::TransMil => (vec![96], 4, 4),
        };
        Self {
            arch,
            input: InputShape::default(),
            num_classes,
            patch_size: 4,
            embed_dims,
            depth,
            heads,
            mlp_ratio: 2.0,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.input.height / self.patch_size, self.input.width / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.input.channels
    }

    pub(crate) fn mlp_hidden(&self, width: usize) -> usize {
        ((width as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    /// Structural checks that do not need the parameter count.
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Spec(msg));
        let InputShape { height, width, channels } = self.input;
        if self.patch_size == 0 || height == 0 || width == 0 || channels == 0 {
            return fail("input and patch sizes must be positive".into());
        }
        if height % self.patch_size != 0 || width % self.patch_size != 0 {
            return fail(format!(
                "input {height}x{width} is not divisible by patch size {}",
                self.patch_size
            ));
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.embed_dims.is_empty() || self.embed_dims.contains(&0) {
            return fail("embed_dims must be non-empty and positive".into());
        }
        match self.arch {
            Architecture::Abmil => {
                if self.embed_dims.len() != 3 {
                    return fail("ABMIL expects embed_dims = [hidden, out, attention]".into());
                }
            }
            arch => {
                if arch != Architecture::ZachVit && self.embed_dims.len() != 1 {
                    return fail(format!("{arch} expects a single width in embed_dims"));
                }
                if self.depth == 0 || self.heads == 0 || self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 {
                    return fail("depth, heads and mlp_ratio must be positive".into());
                }
                if let Some(d) = self.embed_dims.iter().find(|&&d| d % self.heads != 0) {
                    return fail(format!("width {d} is not divisible by {} heads", self.heads));
                }
            }
        }
        Ok(())
    }
}

/// Readout used by Minimal-ViT.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Readout {
    #[default]
    ClassToken,
    /// Mean over patch tokens (ablation only).
    MeanPool,
}

/// Per-call knobs used by tests and ablations; the default is the plain model.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Reorders patch tokens right after patch extraction.
    pub token_order: Option<Vec<usize>>,
    pub readout: Readout,
}

/// Runs the forward pass of `spec.arch` and returns `[b, classes]` logits.
pub fn forward<E: Element>(
    spec: &ModelSpec,
    tape: &mut Tape<E>,
    params: &BoundParams,
    images: Var,
    opts: &ForwardOptions,
) -> Result<Var, ModelError> {
    match spec.arch {
        Architecture::ZachVit => forward_zachvit(spec, tape, params, images, opts),
        Architecture::MinimalVit => forward_minimalvit(spec, tape, params, images, opts),
        Architecture::Abmil => forward_abmil(spec, tape, params, images, opts),
        Architecture::TransMil => forward_transmil(spec, tape, params, images, opts),
    }
}

/// Forward pass without gradient tracking.
pub fn logits<E: Element>(
    spec: &ModelSpec,
    params: &ModelParams,
    images: &Tensor<E>,
    opts: &ForwardOptions,
) -> Result<Tensor<E>, ModelError> {
    let mut tape = Tape::<E>::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let out = forward(spec, &mut tape, &bound, x, opts)?;
    Ok(tape.value(out).clone())
}

/// Loss shared by training and gradient-based attacks: mean softmax
/// cross-entropy of the true labels.
pub fn classification_loss<E: Element>(tape: &mut Tape<E>, logits: Var, labels: &[usize]) -> Result<Var, ModelError> {
    Ok(tape.cross_entropy(logits, labels)?)
}

/// Anything that maps a `[b, h, w, c]` image batch to `[b, classes]` logits
/// on a tape.
pub trait Classifier: Sync {
    fn forward<E: Element>(&self, tape: &mut Tape<E>, images: Var) -> Result<Var, ModelError>;
}

/// A model architecture together with its parameters.
#[derive(Clone, Copy, Debug)]
pub struct Network<'a> {
    pub spec: &'a ModelSpec,
    pub params: &'a ModelParams,
}

impl<'a> Network<'a> {
    pub fn new(spec: &'a ModelSpec, params: &'a ModelParams) -> Self {
        Self { spec, params }
    }
}

impl Classifier for Network<'_> {
    fn forward<E: Element>(&self, tape: &mut Tape<E>, images: Var) -> Result<Var, ModelError> {
        let bound = self.params.bind(tape, false);
        forward(self.spec, tape, &bound, images, &ForwardOptions::default())
    }
}

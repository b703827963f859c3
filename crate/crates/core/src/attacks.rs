//! Untargeted L∞ attacks: FGSM and fixed-step PGD without random start.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Tape, Tensor};
use crate::data::{DataError, ImageBatch};
use crate::models::{classification_loss, Classifier, ModelError};

pub const PGD_STEPS: usize = 10;

/// Default ε grid in units of 1/255.
pub const EPSILONS_255: [u32; 4] = [1, 2, 4, 8];

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("non-finite input gradient for image {index} (id {id})")]
    NonFinite { index: usize, id: usize },
    #[error("invalid attack: {0}")]
    Spec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

impl AttackKind {
    pub const ALL: [AttackKind; 2] = [AttackKind::Fgsm, AttackKind::Pgd];

    pub fn key(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for AttackKind {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.key() == s)
            .ok_or_else(|| AttackError::Spec(format!("unknown attack `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Budget in units of 1/255.
    pub epsilon_255: u32,
    pub steps: usize,
}

impl AttackSpec {
    pub fn fgsm(epsilon_255: u32) -> Self {
        Self { kind: AttackKind::Fgsm, epsilon_255, steps: 1 }
    }

    pub fn pgd(epsilon_255: u32) -> Self {
        Self { kind: AttackKind::Pgd, epsilon_255, steps: PGD_STEPS }
    }

    pub fn new(kind: AttackKind, epsilon_255: u32) -> Self {
        match kind {
            AttackKind::Fgsm => Self::fgsm(epsilon_255),
            AttackKind::Pgd => Self::pgd(epsilon_255),
        }
    }

    pub fn epsilon(&self) -> f64 {
        f64::from(self.epsilon_255) / 255.0
    }

    pub fn step_size(&self) -> f64 {
        match self.kind {
            AttackKind::Fgsm => self.epsilon(),
            AttackKind::Pgd => self.epsilon() / 4.0,
        }
    }

    /// `"fgsm:4/255"`.
    pub fn setting(&self) -> String {
        format!("{}:{}/255", self.kind, self.epsilon_255)
    }

    pub fn parse_setting(s: &str) -> Result<Self, AttackError> {
        let bad = || AttackError::Spec(format!("`{s}` is not <attack>:<k>/255"));
        let (kind, eps) = s.split_once(':').ok_or_else(bad)?;
        let k = eps.strip_suffix("/255").and_then(|k| k.parse().ok()).ok_or_else(bad)?;
        Ok(Self::new(kind.parse()?, k))
    }

    pub fn run<C: Classifier>(&self, model: &C, batch: &ImageBatch) -> Result<ImageBatch, AttackError> {
        let x0 = batch.images().data();
        let eps = self.epsilon();
        let alpha = self.step_size();
        let mut x = x0.to_vec();
        for _ in 0..self.steps {
            let g = input_gradient::<f32, C>(model, batch, &x)?;
            for (i, (xi, gi)) in x.iter_mut().zip(&g).enumerate() {
                let stepped = (f64::from(*xi) + alpha * sign(*gi)).clamp(0.0, 1.0);
                let orig = f64::from(x0[i]);
                *xi = stepped.clamp(orig - eps, orig + eps) as f32;
            }
        }
        let images = Tensor::new(batch.images().shape().to_vec(), x).map_err(|e| AttackError::Spec(e.to_string()))?;
        Ok(batch.with_images(images)?)
    }
}

impl AttackSpec {
    /// [`AttackSpec::run`] on independent chunks of `chunk` images, in
    /// parallel, reassembled in batch order.
    pub fn run_chunked<C: Classifier>(&self, model: &C, batch: &ImageBatch, chunk: usize) -> Result<ImageBatch, AttackError> {
        let chunks: Vec<ImageBatch> = batch.chunks(chunk.max(1)).collect();
        let parts = chunks.par_iter().map(|c| self.run(model, c)).collect::<Result<Vec<_>, _>>()?;
        Ok(ImageBatch::concat(&parts)?)
    }
}

fn sign(g: f32) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The ε grid of one attack, ascending.
pub fn attack_grid(kind: AttackKind) -> Vec<AttackSpec> {
    EPSILONS_255.iter().map(|&e| AttackSpec::new(kind, e)).collect()
}

/// `x_adv = clamp(x + ε·sign(∇ₓ loss))`.
pub fn fgsm<C: Classifier>(model: &C, batch: &ImageBatch, epsilon_255: u32) -> Result<ImageBatch, AttackError> {
    AttackSpec::fgsm(epsilon_255).run(model, batch)
}

/// Ten steps of size ε/4, each clamped to `[0, 1]` and projected onto the ε-ball.
pub fn pgd<C: Classifier>(model: &C, batch: &ImageBatch, epsilon_255: u32) -> Result<ImageBatch, AttackError> {
    AttackSpec::pgd(epsilon_255).run(model, batch)
}

/// Gradient of the training loss with respect to the input pixels `x`
/// (laid out like `batch.images()`), evaluated in precision `E`.
pub fn input_gradient<E: Element, C: Classifier>(model: &C, batch: &ImageBatch, x: &[f32]) -> Result<Vec<f32>, AttackError> {
    let shape = batch.images().shape().to_vec();
    let mut tape = Tape::<E>::new();
    let data = x.iter().map(|&v| E::from_f64(f64::from(v))).collect();
    let xv = tape.leaf(Tensor::new(shape, data).map_err(ModelError::from)?, true);
    let logits = model.forward(&mut tape, xv)?;
    let loss = classification_loss(&mut tape, logits, batch.labels())?;
    let mut grads = tape.backward(loss).map_err(ModelError::from)?;
    let g = grads.take(xv).ok_or_else(|| AttackError::Spec("input is not differentiable".into()))?;
    let per_image = x.len() / batch.len().max(1);
    let g: Vec<f32> = g.data().iter().map(|v| v.as_f64() as f32).collect();
    if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
        let index = pos / per_image;
        return Err(AttackError::NonFinite { index, id: batch.ids()[index] });
    }
    Ok(g)
}

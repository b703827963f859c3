//! Common image corruptions at three graded severities.

pub mod jpeg;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{DataError, ImageBatch, CHANNELS, IMAGE_SIZE};
use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum CorruptionError {
    #[error("invalid corruption: {0}")]
    Spec(String),
    #[error("corruption table: {0}")]
    Table(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    GaussianBlur,
    BrightnessContrast,
    Jpeg,
    Cutout,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::BrightnessContrast,
        CorruptionKind::Jpeg,
        CorruptionKind::Cutout,
    ];

    pub fn key(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::BrightnessContrast => "brightness_contrast",
            CorruptionKind::Jpeg => "jpeg",
            CorruptionKind::Cutout => "cutout",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for CorruptionKind {
    type Err = CorruptionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.key() == s)
            .ok_or_else(|| CorruptionError::Spec(format!("unknown kind `{s}`")))
    }
}

/// Parameters for each kind at severities 1, 2, 3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeverityTable {
    pub gaussian_noise_sigma: [f64; 3],
    pub gaussian_blur_sigma: [f64; 3],
    /// `(contrast factor, brightness offset)`.
    pub brightness_contrast: [(f64, f64); 3],
    pub jpeg_quality: [u8; 3],
    pub cutout_side: [usize; 3],
}

impl Default for SeverityTable {
    fn default() -> Self {
        Self {
            gaussian_noise_sigma: [0.04, 0.08, 0.16],
            gaussian_blur_sigma: [0.5, 1.0, 1.5],
            brightness_contrast: [(0.8, 0.05), (0.6, 0.10), (0.4, 0.15)],
            jpeg_quality: [80, 50, 25],
            cutout_side: [6, 10, 14],
        }
    }
}

fn strictly_increasing(v: [f64; 3]) -> bool {
    v[0] < v[1] && v[1] < v[2]
}

impl SeverityTable {
    /// Every kind must get strictly stronger with severity.
    pub fn validate(&self) -> Result<(), CorruptionError> {
        let fail = |what: &str| Err(CorruptionError::Table(format!("{what} is not strictly increasing in severity")));
        if !strictly_increasing(self.gaussian_noise_sigma) || self.gaussian_noise_sigma[0] <= 0.0 {
            return fail("gaussian_noise sigma");
        }
        if !strictly_increasing(self.gaussian_blur_sigma) || self.gaussian_blur_sigma[0] <= 0.0 {
            return fail("gaussian_blur sigma");
        }
        if !strictly_increasing(self.brightness_contrast.map(|(c, _)| (c - 1.0).abs())) {
            return fail("brightness_contrast |contrast - 1|");
        }
        if !strictly_increasing(self.jpeg_quality.map(|q| 100.0 - f64::from(q))) || self.jpeg_quality.contains(&0) {
            return fail("jpeg (100 - quality)");
        }
        if !strictly_increasing(self.cutout_side.map(|s| s as f64)) || self.cutout_side[2] > IMAGE_SIZE {
            return fail("cutout side");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self, CorruptionError> {
        if !(1..=3).contains(&severity) {
            return Err(CorruptionError::Spec(format!("severity {severity} of {kind} is outside 1..=3")));
        }
        Ok(Self { kind, severity, seed })
    }

    /// `"<kind>:<severity>"`, the setting label used in result stores.
    pub fn setting(&self) -> String {
        format!("{}:{}", self.kind, self.severity)
    }

    /// Parses a setting label, attaching `seed`.
    pub fn parse_setting(s: &str, seed: u64) -> Result<Self, CorruptionError> {
        let (kind, sev) = s
            .split_once(':')
            .ok_or_else(|| CorruptionError::Spec(format!("`{s}` is not <kind>:<severity>")))?;
        let sev = sev.parse().map_err(|_| CorruptionError::Spec(format!("bad severity in `{s}`")))?;
        Self::new(kind.parse()?, sev, seed)
    }

    fn level(&self) -> Result<usize, CorruptionError> {
        match self.severity {
            1..=3 => Ok(usize::from(self.severity) - 1),
            s => Err(CorruptionError::Spec(format!("severity {s} of {} is outside 1..=3", self.kind))),
        }
    }
}

/// All 15 `(kind, severity)` pairs, kind-major in canonical order.
pub fn corruption_grid(seed: u64) -> Vec<CorruptionSpec> {
    CorruptionKind::ALL
        .into_iter()
        .flat_map(|kind| (1..=3).map(move |severity| CorruptionSpec { kind, severity, seed }))
        .collect()
}

/// Applies `spec` with the default severity table.
pub fn apply(spec: &CorruptionSpec, batch: &ImageBatch) -> Result<ImageBatch, CorruptionError> {
    apply_with(&SeverityTable::default(), spec, batch)
}

pub fn apply_with(table: &SeverityTable, spec: &CorruptionSpec, batch: &ImageBatch) -> Result<ImageBatch, CorruptionError> {
    let level = spec.level()?;
    let mut data = batch.images().data().to_vec();
    let pixels = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;
    for (image, &id) in data.chunks_exact_mut(pixels).zip(batch.ids()) {
        corrupt_image(table, spec, level, id, image);
    }
    let images = Tensor::new(batch.images().shape().to_vec(), data).map_err(|e| CorruptionError::Spec(e.to_string()))?;
    Ok(batch.with_images(images)?)
}

fn image_stream(spec: &CorruptionSpec, id: usize) -> rng::Rng {
    rng::stream(spec.seed, &[spec.kind.key(), &id.to_string()])
}

fn corrupt_image(table: &SeverityTable, spec: &CorruptionSpec, level: usize, id: usize, image: &mut [f32]) {
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = table.gaussian_noise_sigma[level];
            let mut r = image_stream(spec, id);
            for p in image.iter_mut() {
                *p = clamp01(f64::from(*p) + sigma * rng::standard_normal(&mut r));
            }
        }
        CorruptionKind::GaussianBlur => gaussian_blur(image, table.gaussian_blur_sigma[level]),
        CorruptionKind::BrightnessContrast => {
            let (c, b) = table.brightness_contrast[level];
            brightness_contrast(image, c, b);
        }
        CorruptionKind::Jpeg => {
            let rgb: Vec<u8> = image.iter().map(|&p| (f64::from(p) * 255.0).round().clamp(0.0, 255.0) as u8).collect();
            let out = jpeg::round_trip(&rgb, IMAGE_SIZE, IMAGE_SIZE, table.jpeg_quality[level]);
            for (p, o) in image.iter_mut().zip(out) {
                *p = f32::from(o) / 255.0;
            }
        }
        CorruptionKind::Cutout => {
            let side = table.cutout_side[level];
            let mut r = image_stream(spec, id);
            let top = rand::Rng::gen_range(&mut r, 0..=IMAGE_SIZE - side);
            let left = rand::Rng::gen_range(&mut r, 0..=IMAGE_SIZE - side);
            for y in top..top + side {
                let row = (y * IMAGE_SIZE + left) * CHANNELS;
                image[row..row + side * CHANNELS].fill(0.5);
            }
        }
    }
}

fn clamp01(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

/// `clamp((x − 0.5)·c + 0.5 + b)`, written so that `c = 1, b = 0` is exact.
pub fn brightness_contrast(image: &mut [f32], contrast: f64, brightness: f64) {
    let offset = 0.5 - 0.5 * contrast + brightness;
    for p in image.iter_mut() {
        *p = clamp01(f64::from(*p) * contrast + offset);
    }
}

/// Normalized 1-D kernel of radius `⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-radius..=radius).map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Mirror index without repeating the edge (`d c b | a b c d | c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable blur of one `28×28×3` image with reflect padding.
pub fn gaussian_blur(image: &mut [f32], sigma: f64) {
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let n = IMAGE_SIZE;
    let src: Vec<f64> = image.iter().map(|&p| f64::from(p)).collect();
    let mut horiz = vec![0.0f64; src.len()];
    for y in 0..n {
        for x in 0..n {
            for c in 0..CHANNELS {
                horiz[(y * n + x) * CHANNELS + c] = k
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * src[(y * n + reflect(x as isize + j as isize - radius, n)) * CHANNELS + c])
                    .sum();
            }
        }
    }
    for y in 0..n {
        for x in 0..n {
            for c in 0..CHANNELS {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * horiz[(reflect(y as isize + j as isize - radius, n) * n + x) * CHANNELS + c])
                    .sum();
                image[(y * n + x) * CHANNELS + c] = clamp01(v);
            }
        }
    }
}

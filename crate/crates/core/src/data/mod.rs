//! MedMNIST-format ingestion, few-shot subsets and deterministic batching.

pub mod npy;

use std::fmt;
use std::fs::File;
use std::io::{BufReader, Read, Seek};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::rng;
use npy::{NpyArray, NpyData};

pub const IMAGE_SIZE: usize = 28;
pub const CHANNELS: usize = 3;
const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{array}: {msg}")]
    Format { array: String, msg: String },
    #[error("archive has no array `{0}`")]
    MissingArray(String),
    #[error("class {class} has no training examples in {dataset}")]
    EmptyClass { dataset: String, class: usize },
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error(transparent)]
    Npy(#[from] npy::NpyError),
    #[error(transparent)]
    Zip(#[from] zip::result::ZipError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetName {
    #[serde(rename = "bloodmnist")]
    BloodMnist,
    #[serde(rename = "pathmnist")]
    PathMnist,
    #[serde(rename = "breastmnist")]
    BreastMnist,
    #[serde(rename = "pneumoniamnist")]
    PneumoniaMnist,
    #[serde(rename = "dermamnist")]
    DermaMnist,
    #[serde(rename = "octmnist")]
    OctMnist,
    #[serde(rename = "organamnist")]
    OrganAMnist,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Binary,
    Multiclass,
}

impl DatasetName {
    /// All datasets in table row order.
    pub const ALL: [DatasetName; 7] = [
        DatasetName::BloodMnist,
        DatasetName::PathMnist,
        DatasetName::BreastMnist,
        DatasetName::PneumoniaMnist,
        DatasetName::DermaMnist,
        DatasetName::OctMnist,
        DatasetName::OrganAMnist,
    ];

    /// Lowercase identifier, also the archive file stem.
    pub fn key(self) -> &'static str {
        match self {
            DatasetName::BloodMnist => "bloodmnist",
            DatasetName::PathMnist => "pathmnist",
            DatasetName::BreastMnist => "breastmnist",
            DatasetName::PneumoniaMnist => "pneumoniamnist",
            DatasetName::DermaMnist => "dermamnist",
            DatasetName::OctMnist => "octmnist",
            DatasetName::OrganAMnist => "organamnist",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            DatasetName::BloodMnist => "BloodMNIST",
            DatasetName::PathMnist => "PathMNIST",
            DatasetName::BreastMnist => "BreastMNIST",
            DatasetName::PneumoniaMnist => "PneumoniaMNIST",
            DatasetName::DermaMnist => "DermaMNIST",
            DatasetName::OctMnist => "OCTMNIST",
            DatasetName::OrganAMnist => "OrganAMNIST",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            DatasetName::BloodMnist => 8,
            DatasetName::PathMnist => 9,
            DatasetName::BreastMnist | DatasetName::PneumoniaMnist => 2,
            DatasetName::DermaMnist => 7,
            DatasetName::OctMnist => 4,
            DatasetName::OrganAMnist => 11,
        }
    }

    pub fn task(self) -> Task {
        if self.num_classes() == 2 {
            Task::Binary
        } else {
            Task::Multiclass
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.npz", self.key())
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for DatasetName {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        DatasetName::ALL
            .into_iter()
            .find(|d| d.key() == lower)
            .ok_or_else(|| DataError::UnknownDataset(s.to_string()))
    }
}

/// Stack of `28×28×3` images in `[0, 1]` with labels and source indices.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    images: Tensor<f32>,
    labels: Vec<usize>,
    ids: Vec<usize>,
}

impl ImageBatch {
    /// `images` must be `[b, 28, 28, 3]` with `b == labels.len() == ids.len()`.
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, ids: Vec<usize>) -> Result<Self, DataError> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != [IMAGE_SIZE, IMAGE_SIZE, CHANNELS] || shape[0] != labels.len() || ids.len() != labels.len() {
            return Err(DataError::Format {
                array: "images".into(),
                msg: format!("shape {shape:?} with {} labels and {} ids", labels.len(), ids.len()),
            });
        }
        Ok(Self { images, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Pixels of image `i`, `28·28·3` values in HWC order.
    pub fn image(&self, i: usize) -> &[f32] {
        &self.images.data()[i * PIXELS..(i + 1) * PIXELS]
    }

    /// Same labels and ids with replaced pixel data.
    pub fn with_images(&self, images: Tensor<f32>) -> Result<Self, DataError> {
        Self::new(images, self.labels.clone(), self.ids.clone())
    }

    /// Sub-batch of the given positions, in that order.
    pub fn select(&self, positions: &[usize]) -> Self {
        let mut data = Vec::with_capacity(positions.len() * PIXELS);
        for &p in positions {
            data.extend_from_slice(self.image(p));
        }
        let images = Tensor::new(vec![positions.len().max(1), IMAGE_SIZE, IMAGE_SIZE, CHANNELS], data);
        Self {
            images: images.unwrap_or_else(|_| Tensor::zeros(&[1, IMAGE_SIZE, IMAGE_SIZE, CHANNELS])),
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
        }
    }

    /// Consecutive sub-batches of at most `size` images.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = ImageBatch> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let end = (start + size).min(self.len());
            self.select(&(start..end).collect::<Vec<_>>())
        })
    }

    /// Concatenation in argument order.
    pub fn concat(parts: &[ImageBatch]) -> Result<Self, DataError> {
        let n: usize = parts.iter().map(ImageBatch::len).sum();
        let mut data = Vec::with_capacity(n * PIXELS);
        let (mut labels, mut ids) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for p in parts {
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
            ids.extend_from_slice(&p.ids);
        }
        let images = Tensor::new(vec![n, IMAGE_SIZE, IMAGE_SIZE, CHANNELS], data).map_err(|e| DataError::Format {
            array: "images".into(),
            msg: e.to_string(),
        })?;
        Self::new(images, labels, ids)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: DatasetName,
    pub train: ImageBatch,
    pub val: ImageBatch,
    pub test: ImageBatch,
}

/// The part of a dataset a training run may see.
#[derive(Clone, Copy, Debug)]
pub struct TrainingSplits<'a> {
    pub name: DatasetName,
    pub train: &'a ImageBatch,
    pub val: &'a ImageBatch,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.name.num_classes()
    }

    pub fn task(&self) -> Task {
        self.name.task()
    }

    pub fn training_splits(&self) -> TrainingSplits<'_> {
        TrainingSplits {
            name: self.name,
            train: &self.train,
            val: &self.val,
        }
    }
}

fn format_err(array: &str, msg: impl Into<String>) -> DataError {
    DataError::Format {
        array: array.to_string(),
        msg: msg.into(),
    }
}

fn read_member<R: Read + Seek>(zip: &mut zip::ZipArchive<R>, name: &str) -> Result<NpyArray, DataError> {
    let file = match zip.by_name(&format!("{name}.npy")) {
        Ok(f) => f,
        Err(zip::result::ZipError::FileNotFound) => return Err(DataError::MissingArray(name.to_string())),
        Err(e) => return Err(e.into()),
    };
    npy::read_npy(BufReader::new(file)).map_err(|e| format_err(name, e.to_string()))
}

fn split_from_arrays(
    dataset: DatasetName,
    split: &str,
    images: NpyArray,
    labels: NpyArray,
) -> Result<ImageBatch, DataError> {
    let img_name = format!("{split}_images");
    let lbl_name = format!("{split}_labels");
    let NpyData::U8(pixels) = images.data else {
        return Err(format_err(&img_name, format!("dtype {} is not uint8", images.descr)));
    };
    let channels = match images.shape.as_slice() {
        [_, IMAGE_SIZE, IMAGE_SIZE] | [_, IMAGE_SIZE, IMAGE_SIZE, 1] => 1,
        [_, IMAGE_SIZE, IMAGE_SIZE, 3] => 3,
        other => return Err(format_err(&img_name, format!("shape {other:?} is not N×28×28[×1|×3]"))),
    };
    let n = images.shape[0];
    let labels: Vec<i64> = match labels.data {
        NpyData::U8(v) => v.into_iter().map(i64::from).collect(),
        NpyData::I64(v) => v,
        NpyData::F32(_) => return Err(format_err(&lbl_name, "labels must be integers")),
    };
    if labels.len() != n {
        return Err(format_err(&lbl_name, format!("{} labels for {n} images", labels.len())));
    }
    let classes = dataset.num_classes();
    let labels = labels
        .into_iter()
        .map(|l| {
            usize::try_from(l)
                .ok()
                .filter(|&l| l < classes)
                .ok_or_else(|| format_err(&lbl_name, format!("label {l} outside [0, {classes})")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let data: Vec<f32> = if channels == 3 {
        pixels.iter().map(|&p| f32::from(p) / 255.0).collect()
    } else {
        pixels.iter().flat_map(|&p| [f32::from(p) / 255.0; CHANNELS]).collect()
    };
    let images = Tensor::new(vec![n, IMAGE_SIZE, IMAGE_SIZE, CHANNELS], data)
        .map_err(|_| format_err(&img_name, "split is empty"))?;
    ImageBatch::new(images, labels, (0..n).collect())
}

/// Loads a MedMNIST archive, naming the dataset from the file stem.
pub fn load_npz(path: &Path) -> Result<Dataset, DataError> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let name: DatasetName = stem.parse()?;
    load_npz_as(path, name)
}

pub fn load_npz_as(path: &Path, name: DatasetName) -> Result<Dataset, DataError> {
    read_npz(BufReader::new(File::open(path)?), name)
}

/// Parses the six `{train,val,test}_{images,labels}` arrays of an archive.
///
/// Pixel values are scaled by 1/255 and grayscale images are replicated to
/// three channels; split contents and order are otherwise untouched.
pub fn read_npz(reader: impl Read + Seek, name: DatasetName) -> Result<Dataset, DataError> {
    let mut zip = zip::ZipArchive::new(reader)?;
    let mut split = |s: &str| -> Result<ImageBatch, DataError> {
        let images = read_member(&mut zip, &format!("{s}_images"))?;
        let labels = read_member(&mut zip, &format!("{s}_labels"))?;
        split_from_arrays(name, s, images, labels)
    };
    Ok(Dataset {
        name,
        train: split("train")?,
        val: split("val")?,
        test: split("test")?,
    })
}

/// Per-class sample of the training split.
///
/// For each class in ascending order, draws `min(per_class, available)`
/// indices without replacement from the stream `(seed, dataset, "subset")`.
pub fn fewshot_subset(splits: &TrainingSplits<'_>, per_class: usize, seed: u64) -> Result<ImageBatch, DataError> {
    let train = splits.train;
    let mut r = rng::stream(seed, &[splits.name.key(), "subset"]);
    let mut positions = Vec::new();
    for class in 0..splits.name.num_classes() {
        let mut members: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == class).collect();
        if members.is_empty() {
            return Err(DataError::EmptyClass {
                dataset: splits.name.key().into(),
                class,
            });
        }
        let take = per_class.max(1).min(members.len());
        // partial Fisher-Yates
        for i in 0..take {
            let j = rand::Rng::gen_range(&mut r, i..members.len());
            members.swap(i, j);
        }
        positions.extend_from_slice(&members[..take]);
    }
    Ok(train.select(&positions))
}

/// One epoch of shuffled mini-batches; the last may be short.
pub fn batches(data: &ImageBatch, batch_size: usize, epoch_seed: u64, epoch: usize) -> Result<Vec<ImageBatch>, DataError> {
    if batch_size == 0 {
        return Err(DataError::BatchSize);
    }
    let mut r = rng::stream(epoch_seed, &["epoch", &epoch.to_string()]);
    let order = rng::permutation(&mut r, data.len());
    Ok(order.chunks(batch_size).map(|idx| data.select(idx)).collect())
}

/// Writes a dataset archive from raw `u8` image stacks (`[n, 28, 28, 3]`)
/// and integer labels, one triple per split in train/val/test order.
pub fn write_npz(w: impl std::io::Write + Seek, splits: [(&[u8], &[i64]); 3]) -> Result<(), DataError> {
    let mut members = Vec::new();
    for (name, (images, labels)) in ["train", "val", "test"].into_iter().zip(splits) {
        let mut img = Vec::new();
        npy::write_npy_u8(&mut img, &[labels.len(), IMAGE_SIZE, IMAGE_SIZE, CHANNELS], images)?;
        let mut lbl = Vec::new();
        npy::write_npy_i64(&mut lbl, &[labels.len(), 1], labels)?;
        members.push((format!("{name}_images"), img));
        members.push((format!("{name}_labels"), lbl));
    }
    let members: Vec<(&str, Vec<u8>)> = members.iter().map(|(n, b)| (n.as_str(), b.clone())).collect();
    npy::write_npz(w, &members)?;
    Ok(())
}

/// Archive bytes of a learnable stand-in dataset with `sizes` images per
/// split and balanced labels.
///
/// Classes differ in stripe frequency and mean intensity, both visible
/// inside single patches, so order-agnostic models can learn them too.
/// Phase, orientation jitter and pixel noise are seeded per image.
pub fn synthetic_archive(name: DatasetName, sizes: [usize; 3], seed: u64) -> Result<Vec<u8>, DataError> {
    let classes = name.num_classes();
    let mut splits = Vec::new();
    for (split, &n) in ["train", "val", "test"].iter().zip(&sizes) {
        let mut r = rng::stream(seed, &[name.key(), "synthetic", split]);
        let mut images = Vec::with_capacity(n * PIXELS);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % classes;
            let freq = (c + 1) as f64 / IMAGE_SIZE as f64;
            let level = 0.35 + 0.3 * c as f64 / (classes - 1) as f64;
            let phase = rand::Rng::gen_range(&mut r, 0.0..std::f64::consts::TAU);
            let tilt = 0.3 * rng::standard_normal(&mut r);
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let t = std::f64::consts::TAU * freq * (x as f64 + tilt * y as f64) + phase;
                    let v = level + 0.2 * t.sin() + 0.1 * rng::standard_normal(&mut r);
                    let px = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    images.extend_from_slice(&[px; CHANNELS]);
                }
            }
            labels.push(c as i64);
        }
        splits.push((images, labels));
    }
    let mut out = std::io::Cursor::new(Vec::new());
    write_npz(
        &mut out,
        [
            (&splits[0].0, &splits[0].1),
            (&splits[1].0, &splits[1].1),
            (&splits[2].0, &splits[2].1),
        ],
    )?;
    Ok(out.into_inner())
}

/// In-memory version of [`synthetic_archive`].
pub fn synthetic(name: DatasetName, sizes: [usize; 3], seed: u64) -> Result<Dataset, DataError> {
    read_npz(std::io::Cursor::new(synthetic_archive(name, sizes, seed)?), name)
}

//! MNIST ingestion, dataset splitting, box-filter downsampling and the 6-bit
//! body-voltage encoding of features.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const DIGIT_CLASSES: usize = 10;

pub const MIN_SIDE: usize = 6;
pub const MAX_SIDE: usize = IMAGE_SIDE;

/// Records in the official MNIST training file.
pub const FULL_TRAIN_RECORDS: usize = 60_000;
pub const TRAIN_RECORDS: usize = 45_000;
pub const VALIDATION_RECORDS: usize = 15_000;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// A raw 28x28 grayscale digit and its class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledImage {
    pixels: Box<[u8]>,
    label: u8,
}

impl LabeledImage {
    pub fn new(pixels: Vec<u8>, label: u8) -> Result<Self> {
        if pixels.len() != IMAGE_PIXELS {
            return Err(Error::Shape(format!(
                "image must have {IMAGE_PIXELS} pixels, got {}",
                pixels.len()
            )));
        }
        if usize::from(label) >= DIGIT_CLASSES {
            return Err(Error::Parameter(format!("label {label} is not a digit")));
        }
        Ok(Self {
            pixels: pixels.into_boxed_slice(),
            label,
        })
    }

    /// Row-major pixel intensities.
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn pixel(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * IMAGE_SIDE + col]
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ])
}

/// Parse an IDX3 image stream and an IDX1 label stream into labeled images.
///
/// Both streams must carry the standard MNIST magic numbers, 28x28 images
/// and exactly the payload their headers declare.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    if image_bytes.len() < 16 {
        return Err(Error::Parse(format!(
            "image stream has {} bytes, header needs 16",
            image_bytes.len()
        )));
    }
    if label_bytes.len() < 8 {
        return Err(Error::Parse(format!(
            "label stream has {} bytes, header needs 8",
            label_bytes.len()
        )));
    }
    let magic = read_u32_be(image_bytes, 0);
    if magic != IMAGE_MAGIC {
        return Err(Error::Parse(format!("bad image magic {magic:#010x}")));
    }
    let magic = read_u32_be(label_bytes, 0);
    if magic != LABEL_MAGIC {
        return Err(Error::Parse(format!("bad label magic {magic:#010x}")));
    }

    let count = read_u32_be(image_bytes, 4) as usize;
    let rows = read_u32_be(image_bytes, 8) as usize;
    let cols = read_u32_be(image_bytes, 12) as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(Error::Parse(format!(
            "expected 28x28 images, header says {rows}x{cols}"
        )));
    }
    let expected = count
        .checked_mul(IMAGE_PIXELS)
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| Error::Parse("image count overflows".into()))?;
    if image_bytes.len() != expected {
        return Err(Error::Parse(format!(
            "header declares {count} images ({expected} bytes), stream has {} bytes",
            image_bytes.len()
        )));
    }

    let label_count = read_u32_be(label_bytes, 4) as usize;
    if label_bytes.len() != label_count + 8 {
        return Err(Error::Parse(format!(
            "header declares {label_count} labels, stream has {} payload bytes",
            label_bytes.len() - 8
        )));
    }
    if label_count != count {
        return Err(Error::Consistency(format!(
            "{count} images but {label_count} labels"
        )));
    }

    image_bytes[16..]
        .chunks_exact(IMAGE_PIXELS)
        .zip(&label_bytes[8..])
        .map(|(px, &label)| {
            LabeledImage::new(px.to_vec(), label)
                .map_err(|_| Error::Parse(format!("label {label} outside 0..=9")))
        })
        .collect()
}

/// Read a file, transparently inflating gzip content.
pub fn read_maybe_gzipped(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Locations of the four standard MNIST files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    /// Find the standard file names in `dir`, with or without a `.gz` suffix.
    pub fn locate(dir: &Path) -> Result<Self> {
        let find = |stem: &str| -> Result<PathBuf> {
            [stem.to_string(), format!("{stem}.gz")]
                .iter()
                .map(|name| dir.join(name))
                .find(|p| p.is_file())
                .ok_or_else(|| {
                    Error::Io(std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("{stem}[.gz] not found in {}", dir.display()),
                    ))
                })
        };
        Ok(Self {
            train_images: find("train-images-idx3-ubyte")?,
            train_labels: find("train-labels-idx1-ubyte")?,
            test_images: find("t10k-images-idx3-ubyte")?,
            test_labels: find("t10k-labels-idx1-ubyte")?,
        })
    }

    /// Load `(train, test)` records.
    pub fn load(&self) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
        let train = parse_idx(
            &read_maybe_gzipped(&self.train_images)?,
            &read_maybe_gzipped(&self.train_labels)?,
        )?;
        let test = parse_idx(
            &read_maybe_gzipped(&self.test_images)?,
            &read_maybe_gzipped(&self.test_labels)?,
        )?;
        Ok((train, test))
    }
}

/// Train / validation / test partition of some record type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit<R> {
    pub train: Vec<R>,
    pub validation: Vec<R>,
    pub test: Vec<R>,
}

impl<R> DatasetSplit<R> {
    /// Apply `f` to every record of every partition.
    pub fn map<S>(&self, f: impl Fn(&R) -> S + Sync) -> DatasetSplit<S>
    where
        R: Sync,
        S: Send,
    {
        use rayon::prelude::*;
        DatasetSplit {
            train: self.train.par_iter().map(&f).collect(),
            validation: self.validation.par_iter().map(&f).collect(),
            test: self.test.par_iter().map(&f).collect(),
        }
    }
}

/// Seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Shuffle `records` with `seed` and cut the first `n_train` into the
/// training partition, the rest into validation. `test` passes through.
pub fn split_holdout<R>(
    records: Vec<R>,
    n_train: usize,
    test: Vec<R>,
    seed: u64,
) -> Result<DatasetSplit<R>> {
    if n_train > records.len() {
        return Err(Error::Size {
            expected: n_train,
            actual: records.len(),
        });
    }
    let order = shuffled_indices(records.len(), seed);
    let mut slots: Vec<Option<R>> = records.into_iter().map(Some).collect();
    let mut train = Vec::with_capacity(n_train);
    let mut validation = Vec::with_capacity(slots.len() - n_train);
    for (rank, i) in order.into_iter().enumerate() {
        let r = slots[i].take().expect("permutation visits each index once");
        if rank < n_train {
            train.push(r);
        } else {
            validation.push(r);
        }
    }
    Ok(DatasetSplit {
        train,
        validation,
        test,
    })
}

/// The 45,000 / 15,000 training/validation partition of the full MNIST
/// training file.
pub fn split_train<R>(train: Vec<R>, test: Vec<R>, seed: u64) -> Result<DatasetSplit<R>> {
    if train.len() != FULL_TRAIN_RECORDS {
        return Err(Error::Size {
            expected: FULL_TRAIN_RECORDS,
            actual: train.len(),
        });
    }
    split_holdout(train, TRAIN_RECORDS, test, seed)
}

/// Indices of a class-balanced random subset: `per_class` records of each of
/// `classes` labels, grouped by class.
pub fn balanced_subset(
    labels: &[u8],
    per_class: usize,
    classes: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let order = shuffled_indices(labels.len(), seed);
    let mut picked: Vec<Vec<usize>> = vec![Vec::with_capacity(per_class); classes];
    for i in order {
        let c = usize::from(labels[i]);
        if c < classes && picked[c].len() < per_class {
            picked[c].push(i);
        }
    }
    if let Some((c, v)) = picked.iter().enumerate().find(|(_, v)| v.len() < per_class) {
        return Err(Error::Size {
            expected: per_class,
            actual: v.len(),
        })
        .map_err(|e| Error::Consistency(format!("class {c}: {e}")));
    }
    Ok(picked.into_iter().flatten().collect())
}

/// N = side² normalized features in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FeatureVector<T> {
    values: Vec<T>,
    side: usize,
}

impl<T: Scalar> FeatureVector<T> {
    pub fn new(values: Vec<T>, side: usize) -> Result<Self> {
        if !(MIN_SIDE..=MAX_SIDE).contains(&side) {
            return Err(Error::Parameter(format!(
                "side {side} outside {MIN_SIDE}..={MAX_SIDE}"
            )));
        }
        if values.len() != side * side {
            return Err(Error::Shape(format!(
                "{} values for a {side}x{side} grid",
                values.len()
            )));
        }
        if let Some(v) = values
            .iter()
            .find(|v| !(**v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::Domain(format!("feature {v} outside [0, 1]")));
        }
        Ok(Self { values, side })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn map_values(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
            side: self.side,
        }
    }
}

/// One feature vector with its digit class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Sample<T> {
    pub features: FeatureVector<T>,
    pub label: u8,
}

/// Area-weighted box filter from 28x28 down to `side` x `side`.
///
/// Output cell `o` covers the fractional source interval
/// `[o * 28/side, (o + 1) * 28/side)` along each axis; every source pixel
/// contributes in proportion to the overlapped area.
#[derive(Clone, Debug)]
pub struct Downsampler {
    side: usize,
    // Per output index: (source index, weight) along one axis.
    taps: Vec<Vec<(usize, f64)>>,
}

impl Downsampler {
    pub fn new(side: usize) -> Result<Self> {
        if !(MIN_SIDE..=MAX_SIDE).contains(&side) {
            return Err(Error::Parameter(format!(
                "side {side} outside {MIN_SIDE}..={MAX_SIDE}"
            )));
        }
        let scale = IMAGE_SIDE as f64 / side as f64;
        let taps = (0..side)
            .map(|o| {
                let lo = o as f64 * scale;
                let hi = (o + 1) as f64 * scale;
                let first = lo.floor() as usize;
                let last = (hi.ceil() as usize).min(IMAGE_SIDE);
                (first..last)
                    .filter_map(|i| {
                        let overlap = hi.min((i + 1) as f64) - lo.max(i as f64);
                        (overlap > 0.0).then_some((i, overlap / scale))
                    })
                    .collect()
            })
            .collect();
        Ok(Self { side, taps })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn apply<T: Scalar>(&self, img: &LabeledImage) -> FeatureVector<T> {
        let px = img.pixels();
        let mut values = Vec::with_capacity(self.side * self.side);
        for row_taps in &self.taps {
            for col_taps in &self.taps {
                let mut acc = 0.0;
                for &(r, wr) in row_taps {
                    let row = &px[r * IMAGE_SIDE..(r + 1) * IMAGE_SIDE];
                    let mut line = 0.0;
                    for &(c, wc) in col_taps {
                        line += wc * f64::from(row[c]);
                    }
                    acc += wr * line;
                }
                values.push(T::lit((acc / 255.0).clamp(0.0, 1.0)));
            }
        }
        FeatureVector {
            values,
            side: self.side,
        }
    }
}

/// Downsample one image to `side` x `side` features in `[0, 1]`.
pub fn downsample<T: Scalar>(img: &LabeledImage, side: usize) -> Result<FeatureVector<T>> {
    Ok(Downsampler::new(side)?.apply(img))
}

/// Quantized body-terminal voltages for one feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BodyEncoding<T> {
    pub voltages: Vec<T>,
    pub codes: Vec<u8>,
}

impl<T> BodyEncoding<T> {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Uniform feature DAC driving the body terminals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BodyDac<T> {
    pub v_lo: T,
    pub v_hi: T,
    pub bits: u32,
}

impl<T: Scalar> Default for BodyDac<T> {
    fn default() -> Self {
        Self {
            v_lo: T::lit(0.2),
            v_hi: T::lit(0.8),
            bits: 6,
        }
    }
}

impl<T: Scalar> BodyDac<T> {
    /// Highest code, `2^bits - 1`.
    pub fn max_code(&self) -> u32 {
        (1 << self.bits) - 1
    }

    /// One least significant bit in volts.
    pub fn lsb(&self) -> T {
        (self.v_hi - self.v_lo) / T::lit(f64::from(self.max_code()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return Err(Error::Parameter(format!(
                "feature DAC needs 1..=8 bits, got {}",
                self.bits
            )));
        }
        if !(self.v_hi > self.v_lo && self.v_lo >= T::zero()) {
            return Err(Error::Parameter(
                "feature DAC range must satisfy 0 <= v_lo < v_hi".into(),
            ));
        }
        Ok(())
    }

    /// Code for a normalized feature: `round(x * (2^bits - 1))`.
    pub fn code(&self, x: T) -> u8 {
        let max = f64::from(self.max_code());
        (x.as_f64() * max).round().clamp(0.0, max) as u8
    }

    /// Terminal voltage for a code.
    pub fn level(&self, code: u8) -> T {
        let f = T::lit(f64::from(code)) / T::lit(f64::from(self.max_code()));
        // Endpoint-exact interpolation.
        (self.v_lo * (T::one() - f) + self.v_hi * f)
            .max(self.v_lo)
            .min(self.v_hi)
    }

    pub fn encode(&self, fv: &FeatureVector<T>) -> BodyEncoding<T> {
        let codes: Vec<u8> = fv.values().iter().map(|&x| self.code(x)).collect();
        let voltages = codes.iter().map(|&c| self.level(c)).collect();
        BodyEncoding { voltages, codes }
    }

    /// Feature value a code stands for, `code / (2^bits - 1)`.
    pub fn decode_code(&self, code: u8) -> T {
        T::lit(f64::from(code)) / T::lit(f64::from(self.max_code()))
    }

    /// The quantized features carried by an encoding.
    pub fn decode(&self, enc: &BodyEncoding<T>, side: usize) -> Result<FeatureVector<T>> {
        FeatureVector::new(
            enc.codes.iter().map(|&c| self.decode_code(c)).collect(),
            side,
        )
    }
}

/// Encode features with the default 6-bit, 0.2-0.8 V body DAC.
pub fn encode_body<T: Scalar>(fv: &FeatureVector<T>) -> BodyEncoding<T> {
    BodyDac::default().encode(fv)
}

//! End-to-end glue: image featurization, training plus compilation, and
//! batched ideal-math or circuit inference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BodyDac, BodyEncoding, DatasetSplit, Downsampler, LabeledImage, Sample};
use crate::device::DeviceParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sim::{evaluate, EvalResult, TimingSpec};
use crate::train::{
    compile_weights, compile_weights_anchored, ideal_accuracy, ladder_span, matched_dead_zone,
    predict_ideal, train_ova, transform_sqrt, GateProgram, LadderSpec, ModelWeights, TrainConfig,
};

/// How the compile step maps weight magnitudes onto the ladder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum DeadZone {
    /// Log map anchored at the largest magnitude with the ladder's own
    /// current ratio as width, see [`compile_weights_anchored`].
    #[default]
    Matched,
    /// Fixed fraction of the largest magnitude.
    Ratio(f64),
}

impl DeadZone {
    pub fn ratio<T: Scalar>(&self, ladder: &LadderSpec<T>, device: &DeviceParams<T>) -> T {
        match *self {
            Self::Matched => matched_dead_zone(ladder, device),
            Self::Ratio(r) => T::lit(r),
        }
    }

    pub fn compile<T: Scalar>(
        &self,
        w: &ModelWeights<T>,
        ladder: &LadderSpec<T>,
        device: &DeviceParams<T>,
    ) -> Result<GateProgram<T>> {
        match *self {
            Self::Matched => compile_weights_anchored(w, ladder, ladder_span(ladder, device)),
            Self::Ratio(r) => compile_weights(w, ladder, T::lit(r)),
        }
    }
}

/// Digit with its body encoding and the square-rooted quantized features
/// the ideal model sees.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample<T> {
    pub sample: Sample<T>,
    pub encoding: BodyEncoding<T>,
}

impl<T> EncodedSample<T> {
    pub fn label(&self) -> u8 {
        self.sample.label
    }
}

/// Image to feature conversion: box downsampling, 6-bit body encoding and
/// the square root of the quantized feature.
#[derive(Clone, Debug)]
pub struct Featurizer<T> {
    downsampler: Downsampler,
    dac: BodyDac<T>,
}

impl<T: Scalar> Featurizer<T> {
    pub fn new(side: usize, dac: BodyDac<T>) -> Result<Self> {
        dac.validate()?;
        Ok(Self {
            downsampler: Downsampler::new(side)?,
            dac,
        })
    }

    pub fn side(&self) -> usize {
        self.downsampler.side()
    }

    pub fn dac(&self) -> &BodyDac<T> {
        &self.dac
    }

    pub fn encode(&self, img: &LabeledImage) -> EncodedSample<T> {
        let fv = self.downsampler.apply::<T>(img);
        let encoding = self.dac.encode(&fv);
        let quantized = self
            .dac
            .decode(&encoding, fv.side())
            .expect("decoded codes lie in [0, 1]");
        EncodedSample {
            sample: Sample {
                features: transform_sqrt(&quantized),
                label: img.label(),
            },
            encoding,
        }
    }

    /// Only the square-rooted quantized features.
    pub fn sample(&self, img: &LabeledImage) -> Sample<T> {
        self.encode(img).sample
    }

    pub fn samples(&self, images: &[LabeledImage]) -> Vec<Sample<T>> {
        images.par_iter().map(|img| self.sample(img)).collect()
    }

    pub fn encode_all(&self, images: &[LabeledImage]) -> Vec<EncodedSample<T>> {
        images.par_iter().map(|img| self.encode(img)).collect()
    }

    pub fn sample_split(&self, split: &DatasetSplit<LabeledImage>) -> DatasetSplit<Sample<T>> {
        split.map(|img| self.sample(img))
    }
}

/// Float weights, their compiled program and the ideal accuracies of both.
#[derive(Clone, Debug)]
pub struct TrainedModel<T> {
    pub weights: ModelWeights<T>,
    pub program: GateProgram<T>,
    pub loss_log: Vec<Vec<f64>>,
    pub validation_accuracy: Option<f64>,
    pub validation_accuracy_quantized: Option<f64>,
}

impl<T: Scalar> TrainedModel<T> {
    /// Weights the compiled program realizes.
    pub fn quantized(&self) -> ModelWeights<T> {
        self.program.dequantized()
    }
}

/// Train on `split.train`, compile, and score both models on the validation partition.
pub fn train_and_compile<T: Scalar>(
    split: &DatasetSplit<Sample<T>>,
    cfg: &TrainConfig,
    ladder: &LadderSpec<T>,
    dead_zone: DeadZone,
    device: &DeviceParams<T>,
) -> Result<TrainedModel<T>> {
    let outcome = train_ova(split, cfg)?;
    let program = dead_zone.compile(&outcome.weights, ladder, device)?;
    let (va, vq) = if split.validation.is_empty() {
        (None, None)
    } else {
        (
            Some(ideal_accuracy(&outcome.weights, &split.validation)?),
            Some(ideal_accuracy(&program.dequantized(), &split.validation)?),
        )
    };
    Ok(TrainedModel {
        weights: outcome.weights,
        program,
        loss_log: outcome.loss_log,
        validation_accuracy: va,
        validation_accuracy_quantized: vq,
    })
}

/// Ideal-math prediction and its score margin (best minus runner-up).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdealPrediction<T> {
    pub predicted: usize,
    pub margin: T,
}

pub fn ideal_predictions<T: Scalar>(
    w: &ModelWeights<T>,
    samples: &[Sample<T>],
) -> Result<Vec<IdealPrediction<T>>> {
    samples
        .par_iter()
        .map(|s| {
            let (predicted, scores) = predict_ideal(w, &s.features)?;
            let runner_up = scores
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != predicted)
                .map(|(_, &z)| z)
                .fold(T::neg_infinity(), T::max);
            Ok(IdealPrediction {
                predicted,
                margin: scores[predicted] - runner_up,
            })
        })
        .collect()
}

/// Circuit-simulate every encoding in parallel.
pub fn circuit_results<T: Scalar>(
    prog: &GateProgram<T>,
    encodings: &[&BodyEncoding<T>],
    p: &DeviceParams<T>,
    t: &TimingSpec<T>,
) -> Result<Vec<EvalResult<T>>> {
    encodings
        .par_iter()
        .map(|enc| evaluate(prog, enc, p, t))
        .collect()
}

/// Percentage of predictions equal to their labels.
pub fn accuracy(predictions: &[usize], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Size {
            expected: 1,
            actual: 0,
        });
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| **p == usize::from(**l))
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

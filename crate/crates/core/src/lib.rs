//! Hardware-aware training and behavioral simulation of a mixed-signal
//! classifier that multiplies with a single subthreshold MOSFET per weight.
//!
//! Features drive body terminals, log-mapped weights drive gate terminals,
//! and each of the K one-vs-all classifiers accumulates onto a positive and a
//! negative precharged sensing line. The crate covers the whole flow:
//!
//! - [`data`]: MNIST ingestion, downsampling, splitting, body-voltage encoding
//! - [`train`]: one-vs-all logistic regression and gate-ladder compilation
//! - [`device`]: subthreshold current model
//! - [`sim`]: sensing-line transient, decision extraction, energy accounting
//! - [`variation`]: Monte Carlo mismatch and PVT sweeps
//! - [`report`]: confusion matrices, histograms, cost estimates
//! - [`pipeline`]: glue between the above
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar type.

// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod device;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod scalar;
pub mod sim;
pub mod train;
pub mod variation;

pub use data::{
    balanced_subset, downsample, encode_body, parse_idx, split_holdout, split_train, BodyDac,
    BodyEncoding, DatasetSplit, Downsampler, FeatureVector, LabeledImage, MnistFiles, Sample,
};
pub use device::{
    i_sub, linearized_product, thermal_voltage, vth, BiasPoint, DeviceParams, LinearizationMaps,
};
pub use error::{Error, Result};
pub use pipeline::{DeadZone, EncodedSample, Featurizer, TrainedModel};
pub use report::{
    confidence_histograms, confusion, cost_estimate, ConfusionMatrix, CostEstimate, UnitCosts,
};
pub use scalar::Scalar;
pub use sim::{
    calibrate_current, energy_of_cycle, evaluate, evaluate_mismatched, extract_ideal,
    extract_selector_network, precharge, EvalResult, SenseState, TimingSpec, Waveform,
};
pub use train::{
    compile_weights, compile_weights_anchored, ladder_span, ladder_taps, predict_ideal, train_ova,
    transform_sqrt, Cell, GateProgram, LadderSpec, Line, LogMap, ModelWeights, TrainConfig,
};
pub use variation::{
    run_montecarlo, sample_mismatch, sweep_features, sweep_temperature, sweep_vdd, MismatchSpec,
    MonteCarloSummary, SweepResult, Testbench,
};

pub type Features = FeatureVector<f64>;
pub type Encoding = BodyEncoding<f64>;
pub type Weights = ModelWeights<f64>;
pub type Program = GateProgram<f64>;
pub type Ladder = LadderSpec<f64>;
pub type Params = DeviceParams<f64>;
pub type Timing = TimingSpec<f64>;
pub type Eval = EvalResult<f64>;
pub type Mismatch = MismatchSpec<f64>;

pub type Features32 = FeatureVector<f32>;
pub type Encoding32 = BodyEncoding<f32>;
pub type Weights32 = ModelWeights<f32>;
pub type Program32 = GateProgram<f32>;
pub type Params32 = DeviceParams<f32>;
pub type Timing32 = TimingSpec<f32>;
pub type Eval32 = EvalResult<f32>;

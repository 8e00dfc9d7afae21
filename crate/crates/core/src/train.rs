//! One-vs-all logistic regression in square-root feature space and the
//! logarithmic compilation of trained weights onto the gate-voltage ladder.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, FeatureVector, Sample};
use crate::device::DeviceParams;
use crate::error::{Error, Result};
use crate::scalar::{argmax, dot, Scalar};

const WEIGHTS_FORMAT: &str = "coremac/weights";
const PROGRAM_FORMAT: &str = "coremac/gate-program";
const DOCUMENT_VERSION: u32 = 1;

/// Elementwise square root of features in `[0, 1]`.
pub fn transform_sqrt<T: Scalar>(fv: &FeatureVector<T>) -> FeatureVector<T> {
    fv.map_values(|v| v.sqrt())
}

/// K x N weight matrix, row-major, one row per binary classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    classes: usize,
    features: usize,
    w: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct WeightsDocument<T> {
    format: String,
    version: u32,
    classes: usize,
    features: usize,
    rows: Vec<Vec<T>>,
}

fn check_document(format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected {
        return Err(Error::Format(format!(
            "expected {expected}, found {format}"
        )));
    }
    if version != DOCUMENT_VERSION {
        return Err(Error::Format(format!(
            "{format} version {version} (supported: {DOCUMENT_VERSION})"
        )));
    }
    Ok(())
}

impl<T: Scalar> ModelWeights<T> {
    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let classes = rows.len();
        let features = rows.first().map_or(0, Vec::len);
        if classes == 0 || features == 0 {
            return Err(Error::Shape("weight matrix must be non-empty".into()));
        }
        if rows.iter().any(|r| r.len() != features) {
            return Err(Error::Shape("weight rows differ in length".into()));
        }
        let w: Vec<T> = rows.into_iter().flatten().collect();
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("weights must be finite".into()));
        }
        Ok(Self {
            classes,
            features,
            w,
        })
    }

    pub fn zeros(classes: usize, features: usize) -> Self {
        Self {
            classes,
            features,
            w: vec![T::zero(); classes * features],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn row(&self, k: usize) -> &[T] {
        &self.w[k * self.features..(k + 1) * self.features]
    }

    pub fn get(&self, k: usize, i: usize) -> T {
        self.w[k * self.features + i]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.w
    }

    /// Multiply every entry by `c`.
    pub fn scaled(&self, c: T) -> Self {
        Self {
            classes: self.classes,
            features: self.features,
            w: self.w.iter().map(|&v| v * c).collect(),
        }
    }

    /// Scores `Z_k = sum_i w_ki * x_i`.
    pub fn scores(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.features {
            return Err(Error::Shape(format!(
                "{} features for a model of width {}",
                x.len(),
                self.features
            )));
        }
        Ok((0..self.classes).map(|k| dot(self.row(k), x)).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = WeightsDocument {
            format: WEIGHTS_FORMAT.into(),
            version: DOCUMENT_VERSION,
            classes: self.classes,
            features: self.features,
            rows: (0..self.classes).map(|k| self.row(k).to_vec()).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: WeightsDocument<T> = serde_json::from_str(s)?;
        check_document(&doc.format, doc.version, WEIGHTS_FORMAT)?;
        let w = Self::from_rows(doc.rows)?;
        if w.classes != doc.classes || w.features != doc.features {
            return Err(Error::Format("declared shape disagrees with rows".into()));
        }
        Ok(w)
    }
}

/// Hyperparameters of the mini-batch gradient-descent trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
    pub classes: usize,
    /// Project every update onto `sum_i w_ki = 0` so that each row's
    /// feature-independent device current cancels between the two lines.
    pub zero_sum: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 50,
            batch_size: 128,
            l2: 1e-4,
            seed: 7,
            classes: 10,
            zero_sum: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Parameter("L2 penalty must be non-negative".into()));
        }
        if self.classes < 2 {
            return Err(Error::Parameter("need at least two classes".into()));
        }
        Ok(())
    }
}

/// Trained weights plus the mean training loss of every epoch, per class.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub weights: ModelWeights<T>,
    pub loss_log: Vec<Vec<f64>>,
}

/// `ln(1 + e^v)` without overflow.
fn softplus<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn train_binary<T: Scalar>(
    samples: &[Sample<T>],
    class: usize,
    cfg: &TrainConfig,
) -> Result<(Vec<T>, Vec<f64>)> {
    let n = samples[0].features.len();
    let lr = T::lit(cfg.learning_rate);
    let l2 = T::lit(cfg.l2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(class as u64);

    let targets: Vec<T> = samples
        .iter()
        .map(|s| {
            if usize::from(s.label) == class {
                T::one()
            } else {
                -T::one()
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut w = vec![T::zero(); n];
    let mut grad = vec![T::zero(); n];
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = T::zero();
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = T::zero());
            for &j in batch {
                let x = samples[j].features.values();
                let yz = targets[j] * dot(&w, x);
                epoch_loss += softplus(-yz);
                // d/dz ln(1 + e^{-yz}) = -y / (1 + e^{yz})
                let coef = -targets[j] / (T::one() + yz.exp());
                for (g, &xi) in grad.iter_mut().zip(x) {
                    *g += coef * xi;
                }
            }
            let inv = T::one() / T::from_count(batch.len());
            for (g, &wi) in grad.iter_mut().zip(&w) {
                *g = *g * inv + l2 * wi;
            }
            if cfg.zero_sum {
                let mean = grad.iter().copied().sum::<T>() / T::from_count(n);
                grad.iter_mut().for_each(|g| *g -= mean);
            }
            for (wi, &g) in w.iter_mut().zip(&grad) {
                *wi -= lr * g;
            }
        }
        let loss = (epoch_loss / T::from_count(samples.len())).as_f64();
        if !loss.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training { class, epoch, loss });
        }
        losses.push(loss);
    }
    Ok((w, losses))
}

/// Train `cfg.classes` independent one-vs-all rows on `samples`.
///
/// Row `k` sees target `+1` for class `k` and `-1` otherwise and minimizes
/// the mean logistic loss `ln(1 + exp(-y Z))` plus an L2 penalty. There is
/// no intercept. Rows run in parallel; each is deterministic in `cfg.seed`.
pub fn train_ova_samples<T: Scalar>(
    samples: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let n = samples
        .first()
        .map(|s| s.features.len())
        .ok_or(Error::Size {
            expected: 1,
            actual: 0,
        })?;
    if samples.iter().any(|s| s.features.len() != n) {
        return Err(Error::Shape("training samples differ in width".into()));
    }
    let rows: Vec<(Vec<T>, Vec<f64>)> = (0..cfg.classes)
        .into_par_iter()
        .map(|k| train_binary(samples, k, cfg))
        .collect::<Result<_>>()?;
    let (rows, loss_log): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok(TrainOutcome {
        weights: ModelWeights::from_rows(rows)?,
        loss_log,
    })
}

/// Train on the training partition of an already square-rooted split.
pub fn train_ova<T: Scalar>(
    ds: &DatasetSplit<Sample<T>>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_ova_samples(&ds.train, cfg)
}

/// OVA class and per-class scores; the highest score wins, lowest index on ties.
pub fn predict_ideal<T: Scalar>(
    w: &ModelWeights<T>,
    fv: &FeatureVector<T>,
) -> Result<(usize, Vec<T>)> {
    let scores = w.scores(fv.values())?;
    Ok((argmax(&scores), scores))
}

/// Binary logistic decision: `+1` iff `Z >= 0`.
pub fn binary_decision<T: Scalar>(z: T) -> i8 {
    if z >= T::zero() {
        1
    } else {
        -1
    }
}

/// Percentage of samples whose ideal-math prediction matches the label.
pub fn ideal_accuracy<T: Scalar>(w: &ModelWeights<T>, samples: &[Sample<T>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Size {
            expected: 1,
            actual: 0,
        });
    }
    let correct = samples
        .par_iter()
        .map(|s| predict_ideal(w, &s.features).map(|(c, _)| usize::from(c == usize::from(s.label))))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(100.0 * correct as f64 / samples.len() as f64)
}

/// Resistive-divider gate ladder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LadderSpec<T> {
    pub v_low: T,
    pub v_high: T,
    pub bits: u32,
    pub step: T,
}

impl<T: Scalar> Default for LadderSpec<T> {
    fn default() -> Self {
        Self {
            v_low: T::lit(0.300),
            v_high: T::lit(0.610),
            bits: 5,
            step: T::lit(0.010),
        }
    }
}

impl<T: Scalar> LadderSpec<T> {
    /// Highest tap index, `2^bits - 1`.
    pub fn max_tap(&self) -> u8 {
        ((1u32 << self.bits) - 1) as u8
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return Err(Error::Parameter(format!(
                "ladder needs 1..=8 bits, got {}",
                self.bits
            )));
        }
        if !(self.v_high > self.v_low && self.step > T::zero()) {
            return Err(Error::Parameter(
                "ladder range and step must be positive".into(),
            ));
        }
        let steps = ((self.v_high - self.v_low) / self.step).as_f64();
        if (steps - f64::from(self.max_tap())).abs() > 1e-6 {
            return Err(Error::Parameter(format!(
                "ladder spans {steps} steps but {} bits give {}",
                self.bits,
                self.max_tap()
            )));
        }
        Ok(())
    }

    /// Gate voltage of one tap.
    pub fn tap_voltage(&self, tap: u8) -> T {
        let f = T::lit(f64::from(tap)) / T::lit(f64::from(self.max_tap()));
        self.v_low * (T::one() - f) + self.v_high * f
    }
}

/// All `2^bits` tap voltages, lowest first.
pub fn ladder_taps<T: Scalar>(ladder: &LadderSpec<T>) -> Vec<T> {
    (0..=ladder.max_tap())
        .map(|t| ladder.tap_voltage(t))
        .collect()
}

/// Which sensing line a device discharges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Line {
    Positive,
    Negative,
}

/// Compiled state of one array device.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Disabled,
    Enabled { line: Line, tap: u8 },
}

/// Affine map between `ln|w|` and ladder position: `ln_min` lands on tap 0,
/// `ln_max` on the top tap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LogMap<T> {
    pub ln_min: T,
    pub ln_max: T,
}

impl<T: Scalar> LogMap<T> {
    /// Weight magnitude represented by `tap` on a ladder with `max_tap` steps.
    pub fn magnitude(&self, tap: u8, max_tap: u8) -> T {
        let f = T::lit(f64::from(tap)) / T::lit(f64::from(max_tap));
        (self.ln_min + f * (self.ln_max - self.ln_min)).exp()
    }

    /// Weight magnitude represented by a continuous gate voltage.
    pub fn magnitude_at(&self, v_gate: T, ladder: &LadderSpec<T>) -> T {
        let f = (v_gate - ladder.v_low) / (ladder.v_high - ladder.v_low);
        (self.ln_min + f * (self.ln_max - self.ln_min)).exp()
    }
}

/// Per-device polarity and tap for every (class, feature) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GateProgram<T> {
    classes: usize,
    features: usize,
    ladder: LadderSpec<T>,
    log_map: LogMap<T>,
    cells: Vec<Cell>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct DeviceRecord<T> {
    class: usize,
    feature: usize,
    polarity: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    tap: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    gate_voltage: Option<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct ProgramDocument<T> {
    format: String,
    version: u32,
    classes: usize,
    features: usize,
    ladder: LadderSpec<T>,
    log_map: LogMap<T>,
    devices: Vec<DeviceRecord<T>>,
}

impl<T: Scalar> GateProgram<T> {
    pub fn new(
        classes: usize,
        features: usize,
        ladder: LadderSpec<T>,
        log_map: LogMap<T>,
        cells: Vec<Cell>,
    ) -> Result<Self> {
        ladder.validate()?;
        if cells.len() != classes * features || classes == 0 || features == 0 {
            return Err(Error::Shape(format!(
                "{} cells for a {classes}x{features} array",
                cells.len()
            )));
        }
        if let Some(Cell::Enabled { tap, .. }) = cells
            .iter()
            .find(|c| matches!(c, Cell::Enabled { tap, .. } if *tap > ladder.max_tap()))
        {
            return Err(Error::Parameter(format!(
                "tap {tap} beyond ladder top {}",
                ladder.max_tap()
            )));
        }
        Ok(Self {
            classes,
            features,
            ladder,
            log_map,
            cells,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn ladder(&self) -> &LadderSpec<T> {
        &self.ladder
    }

    pub fn log_map(&self) -> &LogMap<T> {
        &self.log_map
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, k: usize, i: usize) -> Cell {
        self.cells[k * self.features + i]
    }

    pub fn row(&self, k: usize) -> &[Cell] {
        &self.cells[k * self.features..(k + 1) * self.features]
    }

    pub fn gate_voltage(&self, k: usize, i: usize) -> Option<T> {
        match self.cell(k, i) {
            Cell::Disabled => None,
            Cell::Enabled { tap, .. } => Some(self.ladder.tap_voltage(tap)),
        }
    }

    pub fn enabled_devices(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| matches!(c, Cell::Enabled { .. }))
            .count()
    }

    /// The signed weights the program realizes under its log map.
    pub fn dequantized(&self) -> ModelWeights<T> {
        let max_tap = self.ladder.max_tap();
        let w = self
            .cells
            .iter()
            .map(|c| match *c {
                Cell::Disabled => T::zero(),
                Cell::Enabled {
                    line: Line::Positive,
                    tap,
                } => self.log_map.magnitude(tap, max_tap),
                Cell::Enabled {
                    line: Line::Negative,
                    tap,
                } => -self.log_map.magnitude(tap, max_tap),
            })
            .collect();
        ModelWeights {
            classes: self.classes,
            features: self.features,
            w,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let devices = self
            .cells
            .iter()
            .enumerate()
            .map(|(idx, c)| {
                let (class, feature) = (idx / self.features, idx % self.features);
                match *c {
                    Cell::Disabled => DeviceRecord {
                        class,
                        feature,
                        polarity: "disabled".into(),
                        tap: None,
                        gate_voltage: None,
                    },
                    Cell::Enabled { line, tap } => DeviceRecord {
                        class,
                        feature,
                        polarity: match line {
                            Line::Positive => "positive".into(),
                            Line::Negative => "negative".into(),
                        },
                        tap: Some(tap),
                        gate_voltage: Some(self.ladder.tap_voltage(tap)),
                    },
                }
            })
            .collect();
        let doc = ProgramDocument {
            format: PROGRAM_FORMAT.into(),
            version: DOCUMENT_VERSION,
            classes: self.classes,
            features: self.features,
            ladder: self.ladder,
            log_map: self.log_map,
            devices,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ProgramDocument<T> = serde_json::from_str(s)?;
        check_document(&doc.format, doc.version, PROGRAM_FORMAT)?;
        let mut cells = vec![None; doc.classes * doc.features];
        for d in doc.devices {
            if d.class >= doc.classes || d.feature >= doc.features {
                return Err(Error::Format(format!(
                    "device ({}, {}) outside the array",
                    d.class, d.feature
                )));
            }
            let cell = match (d.polarity.as_str(), d.tap) {
                ("disabled", None) => Cell::Disabled,
                ("positive", Some(tap)) => Cell::Enabled {
                    line: Line::Positive,
                    tap,
                },
                ("negative", Some(tap)) => Cell::Enabled {
                    line: Line::Negative,
                    tap,
                },
                (p, _) => {
                    return Err(Error::Format(format!(
                        "bad device record: polarity {p}, tap {:?}",
                        d.tap
                    )))
                }
            };
            let slot = &mut cells[d.class * doc.features + d.feature];
            if slot.replace(cell).is_some() {
                return Err(Error::Format(format!(
                    "device ({}, {}) listed twice",
                    d.class, d.feature
                )));
            }
        }
        let cells = cells
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Format("gate program does not list every device".into()))?;
        Self::new(doc.classes, doc.features, doc.ladder, doc.log_map, cells)
    }
}

/// Default dead-zone ratio when no device model is at hand.
pub const DEFAULT_DEAD_ZONE_RATIO: f64 = 1e-6;

/// Dead-zone ratio equal to the ladder's current ratio, `exp(-ladder_span)`.
pub fn matched_dead_zone<T: Scalar>(ladder: &LadderSpec<T>, device: &DeviceParams<T>) -> T {
    (-ladder_span(ladder, device)).exp()
}

/// Compile real weights into a gate program.
///
/// Magnitudes at or below `dead_zone_ratio * max|w|` disable their device.
/// The surviving `ln|w|` values are mapped affinely so the smallest lands on
/// tap 0 and the largest on the top tap, then rounded to the nearest tap.
/// If all survivors share one magnitude they all take the top tap.
pub fn compile_weights<T: Scalar>(
    w: &ModelWeights<T>,
    ladder: &LadderSpec<T>,
    dead_zone_ratio: T,
) -> Result<GateProgram<T>> {
    ladder.validate()?;
    if !(dead_zone_ratio >= T::zero() && dead_zone_ratio < T::one()) {
        return Err(Error::Parameter(format!(
            "dead-zone ratio {dead_zone_ratio} outside [0, 1)"
        )));
    }
    let max_abs = max_magnitude(w)?;
    let eps = dead_zone_ratio * max_abs;
    let (ln_min, ln_max) = w
        .as_slice()
        .iter()
        .filter(|v| v.abs() > eps)
        .map(|v| v.abs().ln())
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), l| {
            (lo.min(l), hi.max(l))
        });
    compile_with_map(w, ladder, LogMap { ln_min, ln_max }, eps)
}

/// Compile with the log map anchored at `max|w|` and a fixed width of
/// `span` e-folds.
///
/// The largest magnitude takes the top tap; magnitudes at or below
/// `exp(-span) * max|w|` are disabled. With `span` equal to the ladder's
/// current ratio, see [`ladder_span`], each tap step multiplies both the
/// device current and the realized weight by the same factor.
pub fn compile_weights_anchored<T: Scalar>(
    w: &ModelWeights<T>,
    ladder: &LadderSpec<T>,
    span: T,
) -> Result<GateProgram<T>> {
    ladder.validate()?;
    if !(span > T::zero() && span.is_finite()) {
        return Err(Error::Parameter(format!(
            "log-map span {span} must be positive and finite"
        )));
    }
    let max_abs = max_magnitude(w)?;
    let ln_max = max_abs.ln();
    let ln_min = ln_max - span;
    compile_with_map(w, ladder, LogMap { ln_min, ln_max }, ln_min.exp())
}

/// Natural-log ratio between the currents at the top and bottom ladder taps.
pub fn ladder_span<T: Scalar>(ladder: &LadderSpec<T>, device: &DeviceParams<T>) -> T {
    (ladder.v_high - ladder.v_low) / device.slope_voltage()
}

fn max_magnitude<T: Scalar>(w: &ModelWeights<T>) -> Result<T> {
    let max_abs = w.as_slice().iter().fold(T::zero(), |m, v| m.max(v.abs()));
    if max_abs > T::zero() {
        Ok(max_abs)
    } else {
        Err(Error::Compile("all weights are zero".into()))
    }
}

fn compile_with_map<T: Scalar>(
    w: &ModelWeights<T>,
    ladder: &LadderSpec<T>,
    map: LogMap<T>,
    eps: T,
) -> Result<GateProgram<T>> {
    let span = map.ln_max - map.ln_min;
    let top = ladder.max_tap();
    let cells = w
        .as_slice()
        .iter()
        .map(|&v| {
            if !(v.abs() > eps) || v == T::zero() {
                return Cell::Disabled;
            }
            let tap = if span > T::zero() {
                ((v.abs().ln() - map.ln_min) / span * T::lit(f64::from(top)))
                    .round()
                    .as_f64()
                    .clamp(0.0, f64::from(top)) as u8
            } else {
                top
            };
            let line = if v > T::zero() {
                Line::Positive
            } else {
                Line::Negative
            };
            Cell::Enabled { line, tap }
        })
        .collect();
    GateProgram::new(w.classes, w.features, *ladder, map, cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(values: Vec<f64>, side: usize) -> FeatureVector<f64> {
        FeatureVector::new(values, side).unwrap()
    }

    fn one_hot(i: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn sqrt_examples() {
        let mut v = vec![0.0; 36];
        v[1] = 1.0;
        v[2] = 0.25;
        let s = transform_sqrt(&fv(v, 6));
        assert_eq!(&s.values()[..3], &[0.0, 1.0, 0.5]);
    }

    #[test]
    fn zero_row_scores_boundary_as_positive() {
        let w = ModelWeights::<f64>::zeros(10, 36);
        let (_, scores) = predict_ideal(&w, &fv(vec![0.3; 36], 6)).unwrap();
        assert!(scores.iter().all(|&z| binary_decision(z) == 1));
        assert_eq!(binary_decision(-1e-12), -1);
    }

    #[test]
    fn one_hot_row_selects_class() {
        let n = 36;
        let rows: Vec<Vec<f64>> = (0..10).map(|k| one_hot(k, n)).collect();
        let w = ModelWeights::from_rows(rows).unwrap();
        for k in 0..10 {
            assert_eq!(predict_ideal(&w, &fv(one_hot(k, n), 6)).unwrap().0, k);
        }
    }

    #[test]
    fn shape_mismatch() {
        let w = ModelWeights::<f64>::zeros(10, 49);
        assert!(matches!(
            predict_ideal(&w, &fv(vec![0.0; 36], 6)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn argmax_matches_brute_force() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let rows: Vec<Vec<f64>> = (0..10)
                .map(|_| (0..36).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let x: Vec<f64> = (0..36).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut best = (0, f64::NEG_INFINITY);
            for (k, r) in rows.iter().enumerate() {
                let mut z = 0.0;
                for i in 0..36 {
                    z += r[i] * x[i];
                }
                if z > best.1 {
                    best = (k, z);
                }
            }
            let w = ModelWeights::from_rows(rows).unwrap();
            assert_eq!(predict_ideal(&w, &fv(x, 6)).unwrap().0, best.0);
        }
    }

    #[test]
    fn ladder_examples() {
        let taps = ladder_taps(&LadderSpec::<f64>::default());
        assert_eq!(taps.len(), 32);
        assert_eq!(taps[0], 0.300);
        assert_eq!(taps[31], 0.610);
        for pair in taps.windows(2) {
            assert!((pair[1] - pair[0] - 0.010).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_ladder_rejected() {
        let l = LadderSpec::<f64> {
            bits: 4,
            ..Default::default()
        };
        assert!(l.validate().is_err());
    }

    #[test]
    fn compile_examples() {
        let w =
            ModelWeights::from_rows(vec![vec![2.0, -0.5, 0.0, 0.01], vec![-4.0, 1.0, 0.25, 0.0]])
                .unwrap();
        let p = compile_weights(&w, &LadderSpec::default(), 1e-6).unwrap();
        assert_eq!(
            p.cell(1, 0),
            Cell::Enabled {
                line: Line::Negative,
                tap: 31
            }
        );
        assert_eq!(p.gate_voltage(1, 0), Some(0.610));
        assert_eq!(
            p.cell(0, 3),
            Cell::Enabled {
                line: Line::Positive,
                tap: 0
            }
        );
        assert_eq!(p.gate_voltage(0, 3), Some(0.300));
        assert_eq!(p.cell(0, 2), Cell::Disabled);
        assert_eq!(p.gate_voltage(0, 2), None);
        // ln 2 sits (ln 2 - ln 0.01) / (ln 4 - ln 0.01) of the way up.
        let expect =
            ((2.0f64.ln() - 0.01f64.ln()) / (4.0f64.ln() - 0.01f64.ln()) * 31.0).round() as u8;
        assert_eq!(
            p.cell(0, 0),
            Cell::Enabled {
                line: Line::Positive,
                tap: expect
            }
        );
    }

    #[test]
    fn anchored_compile_examples() {
        let span = 8.0f64;
        let w = ModelWeights::from_rows(vec![vec![
            2.0,
            -2.0 * (-4.0f64).exp(),
            2.0 * (-8.5f64).exp(),
            0.0,
        ]])
        .unwrap();
        let p = compile_weights_anchored(&w, &LadderSpec::default(), span).unwrap();
        assert_eq!(
            p.cell(0, 0),
            Cell::Enabled {
                line: Line::Positive,
                tap: 31
            }
        );
        // Half the span down lands between taps 15 and 16 and rounds up.
        assert_eq!(
            p.cell(0, 1),
            Cell::Enabled {
                line: Line::Negative,
                tap: 16
            }
        );
        assert_eq!(p.cell(0, 2), Cell::Disabled);
        assert_eq!(p.cell(0, 3), Cell::Disabled);
        assert!((p.log_map().ln_max - 2.0f64.ln()).abs() < 1e-15);
        assert!((p.log_map().ln_max - p.log_map().ln_min - span).abs() < 1e-12);
        assert!(compile_weights_anchored(&w, &LadderSpec::default(), 0.0).is_err());
    }

    #[test]
    fn ladder_span_matches_dead_zone() {
        let (l, d) = (LadderSpec::<f64>::default(), DeviceParams::<f64>::default());
        let s = ladder_span(&l, &d);
        assert!((s - 0.31 / (d.n * d.thermal_voltage())).abs() < 1e-12);
        assert!((matched_dead_zone(&l, &d) - (-s).exp()).abs() < 1e-18);
    }

    #[test]
    fn all_zero_weights_fail() {
        let w = ModelWeights::<f64>::zeros(2, 36);
        assert!(matches!(
            compile_weights(&w, &LadderSpec::default(), 1e-6),
            Err(Error::Compile(_))
        ));
    }

    #[test]
    fn equal_magnitudes_take_top_tap() {
        let w = ModelWeights::from_rows(vec![vec![0.5, -0.5], vec![0.5, 0.0]]).unwrap();
        let p = compile_weights(&w, &LadderSpec::default(), 1e-6).unwrap();
        assert_eq!(
            p.cell(0, 1),
            Cell::Enabled {
                line: Line::Negative,
                tap: 31
            }
        );
        assert_eq!(p.dequantized().get(0, 1), -0.5);
    }

    #[test]
    fn dequantized_extremes_are_exact() {
        let w = ModelWeights::<f64>::from_rows(vec![vec![3.0, -0.02, 0.4], vec![0.1, 0.0, -1.5]])
            .unwrap();
        let d = compile_weights(&w, &LadderSpec::default(), 1e-6)
            .unwrap()
            .dequantized();
        assert!((d.get(0, 0) - 3.0).abs() < 1e-12);
        assert!((d.get(0, 1) + 0.02).abs() < 1e-12);
        assert_eq!(d.get(1, 1), 0.0);
    }

    #[test]
    fn documents_roundtrip() {
        let w = ModelWeights::from_rows(vec![vec![0.3, -0.1, 0.0], vec![-0.7, 0.2, 0.05]]).unwrap();
        assert_eq!(
            ModelWeights::<f64>::from_json(&w.to_json().unwrap()).unwrap(),
            w
        );
        let p = compile_weights(&w, &LadderSpec::default(), 1e-6).unwrap();
        assert_eq!(
            GateProgram::<f64>::from_json(&p.to_json().unwrap()).unwrap(),
            p
        );
    }

    #[test]
    fn wrong_document_kind_rejected() {
        let w = ModelWeights::from_rows(vec![vec![0.3, -0.1]]).unwrap();
        assert!(GateProgram::<f64>::from_json(&w.to_json().unwrap()).is_err());
        let doc = w
            .to_json()
            .unwrap()
            .replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(
            ModelWeights::<f64>::from_json(&doc),
            Err(Error::Format(_))
        ));
    }

    fn toy_samples(n: usize, seed: u64) -> Vec<Sample<f64>> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let label = rng.random_range(0..3u8);
                let values: Vec<f64> = (0..36)
                    .map(|i| {
                        let bump = if i % 3 == usize::from(label) {
                            0.6
                        } else {
                            0.0
                        };
                        (bump + rng.random_range(0.0..0.4f64)).min(1.0)
                    })
                    .collect();
                Sample {
                    features: fv(values, 6),
                    label,
                }
            })
            .collect()
    }

    #[test]
    fn single_class_row_goes_positive() {
        let mut samples = toy_samples(200, 1);
        samples.iter_mut().for_each(|s| s.label = 2);
        let cfg = TrainConfig {
            classes: 3,
            epochs: 20,
            zero_sum: false,
            ..Default::default()
        };
        let out = train_ova_samples(&samples, &cfg).unwrap();
        for s in &samples {
            let z = dot(out.weights.row(2), s.features.values());
            assert!(z > 0.0);
        }
    }

    #[test]
    fn learns_separable_toy_problem_deterministically() {
        let samples = toy_samples(600, 2);
        let cfg = TrainConfig {
            classes: 3,
            epochs: 30,
            ..Default::default()
        };
        let a = train_ova_samples(&samples, &cfg).unwrap();
        let b = train_ova_samples(&samples, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert!(ideal_accuracy(&a.weights, &samples).unwrap() > 95.0);
        for k in 0..3 {
            assert!(
                a.weights.row(k).iter().sum::<f64>().abs() < 1e-9,
                "zero-sum row {k}"
            );
        }
    }

    #[test]
    fn loss_non_increasing_at_small_rate() {
        let samples = toy_samples(500, 3);
        let cfg = TrainConfig {
            classes: 3,
            epochs: 25,
            batch_size: 500,
            learning_rate: 0.05,
            ..Default::default()
        };
        let out = train_ova_samples(&samples, &cfg).unwrap();
        for log in &out.loss_log {
            for pair in log.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-12, "{pair:?}");
            }
        }
    }

    #[test]
    fn divergence_reported() {
        let samples = toy_samples(100, 4);
        let cfg = TrainConfig {
            classes: 3,
            epochs: 5,
            learning_rate: 1e308,
            ..Default::default()
        };
        assert!(matches!(
            train_ova_samples(&samples, &cfg),
            Err(Error::Training { .. })
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        let samples = toy_samples(10, 5);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            train_ova_samples(&samples, &cfg),
            Err(Error::Parameter(_))
        ));
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(
            train_ova_samples(&samples, &cfg),
            Err(Error::Parameter(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 12), 4)
        }

        proptest! {
            #[test]
            fn positive_scaling_keeps_argmax(rows in matrix(), x in prop::collection::vec(0.0f64..1.0, 12), c in 0.01f64..100.0) {
                let w = ModelWeights::from_rows(rows).unwrap();
                let a = argmax(&w.scores(&x).unwrap());
                let b = argmax(&w.scaled(c).scores(&x).unwrap());
                // Scaling can only reorder scores that were within rounding of each other.
                let s = w.scores(&x).unwrap();
                prop_assert!(a == b || (s[a] - s[b]).abs() < 1e-12);
            }

            #[test]
            fn polarity_follows_sign(rows in matrix()) {
                let w = ModelWeights::from_rows(rows).unwrap();
                let p = compile_weights(&w, &LadderSpec::default(), 1e-6).unwrap();
                for (c, &v) in p.cells().iter().zip(w.as_slice()) {
                    match c {
                        Cell::Enabled { line: Line::Positive, .. } => prop_assert!(v > 0.0),
                        Cell::Enabled { line: Line::Negative, .. } => prop_assert!(v < 0.0),
                        Cell::Disabled => prop_assert!(v.abs() <= 1e-6 * 2.0),
                    }
                }
            }

            #[test]
            fn anchored_taps_track_device_current(rows in matrix()) {
                let w = ModelWeights::from_rows(rows).unwrap();
                let (ladder, device) = (LadderSpec::default(), DeviceParams::default());
                let p = compile_weights_anchored(&w, &ladder, ladder_span(&ladder, &device)).unwrap();
                let d = p.dequantized();
                // Realized weight over gate-controlled current is the same for every device.
                let ratios: Vec<f64> = (0..w.classes())
                    .flat_map(|k| (0..w.features()).map(move |i| (k, i)))
                    .filter_map(|(k, i)| p.gate_voltage(k, i).map(|vg| d.get(k, i).abs() / ((vg - ladder.v_high) / device.slope_voltage()).exp()))
                    .collect();
                for r in &ratios {
                    prop_assert!((r / ratios[0] - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}

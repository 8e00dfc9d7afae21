//! Process, voltage and temperature robustness: Monte Carlo threshold and
//! comparator mismatch, supply/temperature sweeps and the feature-count sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BodyDac, BodyEncoding, DatasetSplit, LabeledImage, MAX_SIDE, MIN_SIDE};
use crate::device::{celsius_to_kelvin, DeviceParams};
use crate::error::{Error, Result};
use crate::pipeline::{ideal_predictions, train_and_compile, DeadZone, Featurizer};
use crate::report::{cost_estimate, UnitCosts};
use crate::scalar::Scalar;
use crate::sim::{
    evaluate, evaluate_mismatched, extract_selector_network, selector_count, EvalResult, TimingSpec,
};
use crate::train::{GateProgram, LadderSpec, TrainConfig};

/// Gaussian mismatch magnitudes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", default)]
pub struct MismatchSpec<T> {
    /// Threshold σ of each array device (V).
    pub sigma_vth_array: T,
    /// Input-referred offset σ of each selector (V).
    pub sigma_comparator: T,
    pub seed: u64,
    /// Global threshold shift applied to every array device (V).
    pub corner_shift: T,
}

impl<T: Scalar> Default for MismatchSpec<T> {
    fn default() -> Self {
        Self {
            sigma_vth_array: T::lit(0.005),
            sigma_comparator: T::lit(0.001),
            seed: 1,
            corner_shift: T::zero(),
        }
    }
}

impl<T: Scalar> MismatchSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_vth_array >= T::zero() && self.sigma_comparator >= T::zero()) {
            return Err(Error::Parameter(
                "mismatch sigmas must be non-negative".into(),
            ));
        }
        if !self.corner_shift.is_finite() {
            return Err(Error::Parameter("corner shift must be finite".into()));
        }
        Ok(())
    }

    pub fn with_sigma_vth(&self, sigma: T) -> Self {
        Self {
            sigma_vth_array: sigma,
            ..*self
        }
    }
}

/// One Monte Carlo draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MismatchDraw<T> {
    /// Per array device, row-major (class, feature).
    pub delta_vth: Vec<T>,
    /// Per selector, in lexicographic pair order.
    pub comparator_offsets: Vec<T>,
}

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, sigma: T, count: usize) -> Vec<T> {
    if sigma == T::zero() {
        return vec![T::zero(); count];
    }
    (0..count)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * T::lit(z)
        })
        .collect()
}

/// Independent zero-mean Gaussian offsets for `devices` array devices and
/// the selectors of `classes` classes. Run `run` uses its own stream of the
/// seeded generator, so draws do not depend on scheduling.
pub fn sample_mismatch<T: Scalar>(
    spec: &MismatchSpec<T>,
    devices: usize,
    classes: usize,
    run: u64,
) -> MismatchDraw<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(run);
    let delta_vth = gaussian(&mut rng, spec.sigma_vth_array, devices);
    let comparator_offsets = gaussian(&mut rng, spec.sigma_comparator, selector_count(classes));
    MismatchDraw {
        delta_vth,
        comparator_offsets,
    }
}

/// A compiled array, its operating point and a labeled evaluation set.
#[derive(Clone, Copy, Debug)]
pub struct Testbench<'a, T> {
    pub program: &'a GateProgram<T>,
    pub encodings: &'a [BodyEncoding<T>],
    pub labels: &'a [u8],
    pub params: DeviceParams<T>,
    pub timing: TimingSpec<T>,
}

impl<'a, T: Scalar> Testbench<'a, T> {
    pub fn validate(&self) -> Result<()> {
        if self.encodings.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} encodings for {} labels",
                self.encodings.len(),
                self.labels.len()
            )));
        }
        if self.encodings.is_empty() {
            return Err(Error::Size {
                expected: 1,
                actual: 0,
            });
        }
        self.params.validate()?;
        self.timing.validate()
    }

    pub fn with_params(&self, params: DeviceParams<T>) -> Self {
        Self { params, ..*self }
    }

    /// Nominal circuit results for every image.
    pub fn results(&self) -> Result<Vec<EvalResult<T>>> {
        self.encodings
            .par_iter()
            .map(|e| evaluate(self.program, e, &self.params, &self.timing))
            .collect()
    }
}

fn percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

/// Accuracy, mean margin and mean energy of a set of results.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Aggregate {
    accuracy: f64,
    mean_margin: f64,
    mean_energy: f64,
    saturated: usize,
}

fn aggregate<T: Scalar>(results: &[EvalResult<T>], labels: &[u8]) -> Aggregate {
    let n = results.len();
    let correct = results
        .iter()
        .zip(labels)
        .filter(|(r, &l)| r.predicted == usize::from(l))
        .count();
    Aggregate {
        accuracy: percent(correct, n),
        mean_margin: results.iter().map(|r| r.margin.as_f64()).sum::<f64>() / n as f64,
        mean_energy: results.iter().map(|r| r.energy.as_f64()).sum::<f64>() / n as f64,
        saturated: results.iter().filter(|r| r.saturated).count(),
    }
}

/// Outcome of one Monte Carlo run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: u64,
    pub accuracy: f64,
    /// Nominally correct images this run got wrong.
    pub flips_to_incorrect: usize,
    /// Nominally wrong images this run got right.
    pub flips_to_correct: usize,
}

/// Distribution of Monte Carlo accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub sigma_vth_array: f64,
    pub sigma_comparator: f64,
    pub seed: u64,
    pub images: usize,
    pub nominal_accuracy: f64,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Nominal accuracy minus mean accuracy, in points.
    pub mean_degradation: f64,
    /// Fraction of runs more accurate than nominal.
    pub fraction_improved: f64,
    pub runs: Vec<RunRecord>,
}

impl MonteCarloSummary {
    pub const CSV_HEADER: &'static str = "run,accuracy,flips_to_incorrect,flips_to_correct";

    pub fn runs_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.runs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.run, r.accuracy, r.flips_to_incorrect, r.flips_to_correct
            ));
        }
        out
    }
}

/// Per-image correctness of the nominal circuit through the zero-offset
/// selector network.
pub fn nominal_correctness<T: Scalar>(bench: &Testbench<'_, T>) -> Result<Vec<bool>> {
    let zeros = vec![T::zero(); selector_count(bench.program.classes())];
    bench
        .results()?
        .iter()
        .zip(bench.labels)
        .map(|(r, &l)| Ok(extract_selector_network(r, &zeros)? == usize::from(l)))
        .collect()
}

fn run_once<T: Scalar>(
    bench: &Testbench<'_, T>,
    spec: &MismatchSpec<T>,
    run: u64,
    nominal: &[bool],
) -> Result<RunRecord> {
    let prog = bench.program;
    let draw = sample_mismatch(spec, prog.classes() * prog.features(), prog.classes(), run);
    let params = DeviceParams {
        delta_vth: bench.params.delta_vth + spec.corner_shift,
        ..bench.params
    };
    let mut correct = 0;
    let (mut to_bad, mut to_good) = (0, 0);
    for ((enc, &label), &was_ok) in bench.encodings.iter().zip(bench.labels).zip(nominal) {
        let res = evaluate_mismatched(prog, enc, &params, &bench.timing, &draw.delta_vth)?;
        let ok = extract_selector_network(&res, &draw.comparator_offsets)? == usize::from(label);
        correct += usize::from(ok);
        match (was_ok, ok) {
            (true, false) => to_bad += 1,
            (false, true) => to_good += 1,
            _ => {}
        }
    }
    Ok(RunRecord {
        run,
        accuracy: percent(correct, bench.labels.len()),
        flips_to_incorrect: to_bad,
        flips_to_correct: to_good,
    })
}

/// Accuracy distribution over `runs` independent mismatch draws.
///
/// Every run simulates every image with fresh array threshold offsets and
/// decides through the selector network with fresh comparator offsets.
/// The nominal reference uses no mismatch and no corner shift.
pub fn run_montecarlo<T: Scalar>(
    bench: &Testbench<'_, T>,
    spec: &MismatchSpec<T>,
    runs: usize,
) -> Result<MonteCarloSummary> {
    bench.validate()?;
    spec.validate()?;
    if runs == 0 {
        return Err(Error::Parameter("need at least one Monte Carlo run".into()));
    }
    let nominal = nominal_correctness(bench)?;
    let nominal_accuracy = percent(nominal.iter().filter(|&&b| b).count(), nominal.len());
    let records: Vec<RunRecord> = (0..runs as u64)
        .into_par_iter()
        .map(|run| run_once(bench, spec, run, &nominal))
        .collect::<Result<_>>()?;
    let accs: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
    // Shifted by the first run so identical accuracies average exactly.
    let mean = accs[0] + accs.iter().map(|a| a - accs[0]).sum::<f64>() / accs.len() as f64;
    let var = if accs.len() > 1 {
        accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (accs.len() - 1) as f64
    } else {
        0.0
    };
    Ok(MonteCarloSummary {
        sigma_vth_array: spec.sigma_vth_array.as_f64(),
        sigma_comparator: spec.sigma_comparator.as_f64(),
        seed: spec.seed,
        images: bench.labels.len(),
        nominal_accuracy,
        mean,
        std: var.sqrt(),
        min: accs.iter().copied().fold(f64::INFINITY, f64::min),
        max: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_degradation: accs.iter().map(|a| nominal_accuracy - a).sum::<f64>()
            / accs.len() as f64,
        fraction_improved: accs.iter().filter(|&&a| a > nominal_accuracy).count() as f64
            / accs.len() as f64,
        runs: records,
    })
}

/// Threshold σ found to give a target mean degradation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaCalibration {
    pub target_degradation: f64,
    pub sigma_vth: f64,
    pub summary: MonteCarloSummary,
    /// Every `(σ, mean degradation)` pair evaluated, in order.
    pub trace: Vec<(f64, f64)>,
}

/// Bisect the array threshold σ until the mean Monte Carlo degradation is
/// within `tolerance` points of `target`. All evaluations share the seed of
/// `spec`, so the search sees one common set of normal draws.
pub fn calibrate_sigma<T: Scalar>(
    bench: &Testbench<'_, T>,
    spec: &MismatchSpec<T>,
    runs: usize,
    target: f64,
    tolerance: f64,
) -> Result<SigmaCalibration> {
    if !(target > 0.0 && tolerance > 0.0) {
        return Err(Error::Parameter(
            "target degradation and tolerance must be positive".into(),
        ));
    }
    let mut trace = Vec::new();
    let mut eval = |sigma: f64| -> Result<MonteCarloSummary> {
        let s = run_montecarlo(bench, &spec.with_sigma_vth(T::lit(sigma)), runs)?;
        trace.push((sigma, s.mean_degradation));
        Ok(s)
    };
    let mut lo = 0.0;
    let mut hi = 0.005;
    let mut hi_summary = eval(hi)?;
    let mut expansions = 0;
    while hi_summary.mean_degradation < target {
        lo = hi;
        hi *= 2.0;
        hi_summary = eval(hi)?;
        expansions += 1;
        if expansions > 12 {
            return Err(Error::Calibration(format!(
                "no σ up to {hi} V degrades accuracy by {target} points"
            )));
        }
    }
    let mut best = (hi, hi_summary);
    for _ in 0..24 {
        if (best.1.mean_degradation - target).abs() <= tolerance {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let s = eval(mid)?;
        let better = (s.mean_degradation - target).abs() < (best.1.mean_degradation - target).abs();
        if s.mean_degradation < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if better {
            best = (mid, s);
        }
    }
    Ok(SigmaCalibration {
        target_degradation: target,
        sigma_vth: best.0,
        summary: best.1,
        trace,
    })
}

/// Sweep axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Temperature,
    Vdd,
    Features,
}

impl SweepAxis {
    pub fn unit(&self) -> &'static str {
        match self {
            Self::Temperature => "celsius",
            Self::Vdd => "volt",
            Self::Features => "side",
        }
    }
}

/// Hardware cost of one feature-count point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCost {
    pub features: usize,
    pub array_devices: usize,
    pub selectors: usize,
    pub area_um2: f64,
}

/// One sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub accuracy: f64,
    /// Mean best-minus-runner-up margin (volts for circuit sweeps, score
    /// units for the feature sweep).
    pub mean_margin: f64,
    /// Mean energy per decision (J).
    pub energy: f64,
    /// Images whose simulation saturated a line.
    pub saturated: usize,
    pub cost: Option<FeatureCost>,
}

impl SweepPoint {
    pub const CSV_HEADER: &'static str =
        "value,accuracy,mean_margin,energy_j,saturated,features,array_devices,selectors,area_um2";

    pub fn csv_fields(&self) -> String {
        let cost = self.cost.as_ref().map_or_else(
            || ",,,".to_string(),
            |c| {
                format!(
                    "{},{},{},{}",
                    c.features, c.array_devices, c.selectors, c.area_um2
                )
            },
        );
        format!(
            "{},{},{},{},{},{}",
            self.value, self.accuracy, self.mean_margin, self.energy, self.saturated, cost
        )
    }
}

/// Points of one sweep plus the nominal reference they are judged against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub nominal_accuracy: Option<f64>,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", SweepPoint::CSV_HEADER);
        for p in &self.points {
            out.push_str(&p.csv_fields());
            out.push('\n');
        }
        out
    }

    /// Points whose accuracy departs from nominal by more than `points`.
    pub fn flagged(&self, points: f64) -> Vec<&SweepPoint> {
        match self.nominal_accuracy {
            Some(nom) => self
                .points
                .iter()
                .filter(|p| (p.accuracy - nom).abs() > points)
                .collect(),
            None => Vec::new(),
        }
    }

    /// Largest accuracy departure from nominal over axis values in `[lo, hi]`.
    pub fn max_deviation_within(&self, lo: f64, hi: f64) -> Option<f64> {
        let nom = self.nominal_accuracy?;
        self.points
            .iter()
            .filter(|p| p.value >= lo - 1e-12 && p.value <= hi + 1e-12)
            .map(|p| (p.accuracy - nom).abs())
            .fold(None, |m, d| Some(m.map_or(d, |m: f64| m.max(d))))
    }

    pub fn point(&self, value: f64) -> Option<&SweepPoint> {
        self.points.iter().find(|p| (p.value - value).abs() < 1e-9)
    }
}

/// `lo, lo + step, ..., hi` with values rounded to 1e-9 so decimal grids
/// land on their literal values.
pub fn grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && hi >= lo) {
        return Err(Error::Parameter("grid needs step > 0 and hi >= lo".into()));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

pub const TEMPERATURE_RANGE_C: (f64, f64) = (-30.0, 125.0);
pub const VDD_RANGE_V: (f64, f64) = (0.6, 1.2);

fn check_range(points: &[f64], (lo, hi): (f64, f64), what: &str) -> Result<()> {
    match points
        .iter()
        .find(|&&v| !(v >= lo - 1e-12 && v <= hi + 1e-12))
    {
        Some(v) => Err(Error::Parameter(format!(
            "{what} point {v} outside [{lo}, {hi}]"
        ))),
        None => Ok(()),
    }
}

fn circuit_point<T: Scalar>(bench: &Testbench<'_, T>, value: f64) -> Result<SweepPoint> {
    let agg = aggregate(&bench.results()?, bench.labels);
    Ok(SweepPoint {
        value,
        accuracy: agg.accuracy,
        mean_margin: agg.mean_margin,
        energy: agg.mean_energy,
        saturated: agg.saturated,
        cost: None,
    })
}

/// Circuit accuracy at one temperature, all else nominal.
pub fn temperature_point<T: Scalar>(bench: &Testbench<'_, T>, celsius: f64) -> Result<SweepPoint> {
    check_range(&[celsius], TEMPERATURE_RANGE_C, "temperature")?;
    let params = DeviceParams {
        temperature: celsius_to_kelvin(T::lit(celsius)),
        ..bench.params
    };
    circuit_point(&bench.with_params(params), celsius)
}

/// Circuit accuracy at one supply voltage, all else nominal.
pub fn vdd_point<T: Scalar>(bench: &Testbench<'_, T>, vdd: f64) -> Result<SweepPoint> {
    check_range(&[vdd], VDD_RANGE_V, "supply")?;
    circuit_point(
        &bench.with_params(DeviceParams {
            vdd: T::lit(vdd),
            ..bench.params
        }),
        vdd,
    )
}

fn nominal_accuracy<T: Scalar>(bench: &Testbench<'_, T>) -> Result<f64> {
    Ok(aggregate(&bench.results()?, bench.labels).accuracy)
}

pub fn sweep_temperature<T: Scalar>(
    bench: &Testbench<'_, T>,
    celsius: &[f64],
) -> Result<SweepResult> {
    bench.validate()?;
    check_range(celsius, TEMPERATURE_RANGE_C, "temperature")?;
    let points = celsius
        .iter()
        .map(|&c| temperature_point(bench, c))
        .collect::<Result<_>>()?;
    Ok(SweepResult {
        axis: SweepAxis::Temperature,
        nominal_accuracy: Some(nominal_accuracy(bench)?),
        points,
    })
}

pub fn sweep_vdd<T: Scalar>(bench: &Testbench<'_, T>, volts: &[f64]) -> Result<SweepResult> {
    bench.validate()?;
    check_range(volts, VDD_RANGE_V, "supply")?;
    let points = volts
        .iter()
        .map(|&v| vdd_point(bench, v))
        .collect::<Result<_>>()?;
    Ok(SweepResult {
        axis: SweepAxis::Vdd,
        nominal_accuracy: Some(nominal_accuracy(bench)?),
        points,
    })
}

/// Everything a feature-count point needs besides the images.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSweepConfig<T> {
    pub train: TrainConfig,
    pub ladder: LadderSpec<T>,
    pub dac: BodyDac<T>,
    pub dead_zone: DeadZone,
    pub device: DeviceParams<T>,
    pub costs: UnitCosts,
}

impl<T: Scalar> Default for FeatureSweepConfig<T> {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            ladder: LadderSpec::default(),
            dac: BodyDac::default(),
            dead_zone: DeadZone::Matched,
            device: DeviceParams::default(),
            costs: UnitCosts::default(),
        }
    }
}

/// Retrain and recompile at side `m`; report quantized ideal-math test
/// accuracy and the array's cost.
pub fn feature_point<T: Scalar>(
    images: &DatasetSplit<LabeledImage>,
    m: usize,
    cfg: &FeatureSweepConfig<T>,
) -> Result<SweepPoint> {
    if !(MIN_SIDE..=MAX_SIDE).contains(&m) {
        return Err(Error::Parameter(format!(
            "side {m} outside {MIN_SIDE}..={MAX_SIDE}"
        )));
    }
    if images.test.is_empty() {
        return Err(Error::Size {
            expected: 1,
            actual: 0,
        });
    }
    let featurizer = Featurizer::new(m, cfg.dac)?;
    let split = DatasetSplit {
        train: featurizer.samples(&images.train),
        validation: Vec::new(),
        test: featurizer.samples(&images.test),
    };
    let model = train_and_compile(&split, &cfg.train, &cfg.ladder, cfg.dead_zone, &cfg.device)?;
    let preds = ideal_predictions(&model.quantized(), &split.test)?;
    let correct = preds
        .iter()
        .zip(&split.test)
        .filter(|(p, s)| p.predicted == usize::from(s.label))
        .count();
    let n = m * m;
    let cost = cost_estimate(n, cfg.train.classes, &cfg.costs, cfg.device.vdd.as_f64())?;
    Ok(SweepPoint {
        value: m as f64,
        accuracy: percent(correct, preds.len()),
        mean_margin: preds.iter().map(|p| p.margin.as_f64()).sum::<f64>() / preds.len() as f64,
        energy: cost.energy_j,
        saturated: 0,
        cost: Some(FeatureCost {
            features: n,
            array_devices: cost.array_devices,
            selectors: cost.selectors,
            area_um2: cost.area_um2,
        }),
    })
}

pub fn sweep_features<T: Scalar>(
    images: &DatasetSplit<LabeledImage>,
    sides: &[usize],
    cfg: &FeatureSweepConfig<T>,
) -> Result<SweepResult> {
    let points = sides
        .iter()
        .map(|&m| feature_point(images, m, cfg))
        .collect::<Result<_>>()?;
    Ok(SweepResult {
        axis: SweepAxis::Features,
        nominal_accuracy: None,
        points,
    })
}

//! One classification cycle of the MAC array: precharge, RK4 discharge of the
//! 2K sensing lines, confidence extraction and charge/energy accounting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::BodyEncoding;
use crate::device::{drain_factor, saturated_current, DeviceParams};
use crate::error::{Error, Result};
use crate::scalar::{argmax, Scalar};
use crate::train::{Cell, GateProgram, Line};

/// Clock-cycle timing of one decision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", default)]
pub struct TimingSpec<T> {
    pub period: T,
    pub precharge: T,
    pub evaluate: T,
    pub dt: T,
}

impl<T: Scalar> Default for TimingSpec<T> {
    fn default() -> Self {
        Self {
            period: T::lit(10e-9),
            precharge: T::lit(2.5e-9),
            evaluate: T::lit(7.5e-9),
            dt: T::lit(10e-12),
        }
    }
}

impl<T: Scalar> TimingSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.precharge >= T::zero() && self.evaluate > T::zero() && self.dt > T::zero()) {
            return Err(Error::Parameter("timing windows must be positive".into()));
        }
        let mismatch = (self.precharge + self.evaluate - self.period).abs();
        if mismatch > T::lit(1e-9) * self.period {
            return Err(Error::Parameter(
                "precharge + evaluate must equal the clock period".into(),
            ));
        }
        if self.dt > self.evaluate / T::lit(100.0) * (T::one() + T::lit(1e-9)) {
            return Err(Error::Parameter(
                "integration step must be at most 1/100 of the evaluate window".into(),
            ));
        }
        Ok(())
    }

    /// Number of RK4 steps covering the evaluate window.
    pub fn steps(&self) -> usize {
        let ratio = (self.evaluate / self.dt).as_f64();
        (ratio - 1e-6).ceil().max(1.0) as usize
    }

    /// Step size that tiles the evaluate window exactly.
    pub fn step_size(&self) -> T {
        self.evaluate / T::from_count(self.steps())
    }

    /// Same timing with the evaluate window stretched to `evaluate`.
    pub fn with_evaluate(&self, evaluate: T) -> Self {
        Self {
            period: self.precharge + evaluate,
            evaluate,
            ..*self
        }
    }
}

/// Voltages of the positive and negative sensing line of every classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SenseState<T> {
    pub v_plus: Vec<T>,
    pub v_minus: Vec<T>,
}

impl<T: Scalar> SenseState<T> {
    /// Fully discharged lines for `classes` classifiers.
    pub fn new(classes: usize) -> Self {
        Self {
            v_plus: vec![T::zero(); classes],
            v_minus: vec![T::zero(); classes],
        }
    }

    pub fn lines(&self) -> usize {
        self.v_plus.len() + self.v_minus.len()
    }
}

/// Charge every line to `V_DD`.
pub fn precharge<T: Scalar>(state: &SenseState<T>, p: &DeviceParams<T>) -> SenseState<T> {
    SenseState {
        v_plus: vec![p.vdd; state.v_plus.len()],
        v_minus: vec![p.vdd; state.v_minus.len()],
    }
}

/// Outcome of one classification cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EvalResult<T> {
    pub delta_plus: Vec<T>,
    pub delta_minus: Vec<T>,
    /// `delta_plus - delta_minus` per classifier.
    pub confidence: Vec<T>,
    pub predicted: usize,
    /// Best minus runner-up confidence.
    pub margin: T,
    /// Charge drawn from the supply to restore every line (C).
    pub charge: T,
    /// Energy of the cycle (J).
    pub energy: T,
    /// Some line reached within one thermal voltage of its floor.
    pub saturated: bool,
}

impl<T: Scalar> EvalResult<T> {
    /// Assemble a result from line drops, deriving confidences, prediction,
    /// margin and charge/energy.
    pub fn from_drops(
        delta_plus: Vec<T>,
        delta_minus: Vec<T>,
        p: &DeviceParams<T>,
        saturated: bool,
    ) -> Result<Self> {
        if delta_plus.len() != delta_minus.len() || delta_plus.len() < 2 {
            return Err(Error::Shape(
                "need matching drops for at least two classifiers".into(),
            ));
        }
        let confidence: Vec<T> = delta_plus
            .iter()
            .zip(&delta_minus)
            .map(|(&a, &b)| a - b)
            .collect();
        let predicted = argmax(&confidence);
        let runner_up = confidence
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != predicted)
            .map(|(_, &c)| c)
            .fold(T::neg_infinity(), T::max);
        let charge = delta_plus
            .iter()
            .chain(&delta_minus)
            .map(|&dv| p.c_sen * dv)
            .sum::<T>();
        let mut res = Self {
            margin: confidence[predicted] - runner_up,
            delta_plus,
            delta_minus,
            confidence,
            predicted,
            charge,
            energy: T::zero(),
            saturated,
        };
        res.energy = energy_of_cycle(&res, p);
        Ok(res)
    }

    pub fn classes(&self) -> usize {
        self.confidence.len()
    }
}

/// Saturated current summed per line.
#[derive(Clone, Debug, PartialEq)]
pub struct LineCurrents<T> {
    pub plus: Vec<T>,
    pub minus: Vec<T>,
}

/// Sum the `V_ds >> V_T` currents of all enabled devices on each line.
/// `delta_vth`, if given, holds one extra threshold offset per device in
/// row-major (class, feature) order.
pub fn line_currents<T: Scalar>(
    prog: &GateProgram<T>,
    enc: &BodyEncoding<T>,
    p: &DeviceParams<T>,
    delta_vth: Option<&[T]>,
) -> Result<LineCurrents<T>> {
    let (k_count, n) = (prog.classes(), prog.features());
    if enc.voltages.len() != n {
        return Err(Error::Shape(format!(
            "{} body voltages for {n} features",
            enc.voltages.len()
        )));
    }
    if let Some(d) = delta_vth {
        if d.len() != k_count * n {
            return Err(Error::Shape(format!(
                "{} threshold offsets for {} devices",
                d.len(),
                k_count * n
            )));
        }
    }
    let vbs: Vec<T> = enc
        .voltages
        .iter()
        .map(|&vb| vb - p.source_voltage)
        .collect();
    if let Some(v) = vbs.iter().find(|v| !(**v >= T::zero())) {
        return Err(Error::Domain(format!("body-source bias {v} is negative")));
    }
    let slope = p.slope_voltage();
    let mut plus = vec![T::zero(); k_count];
    let mut minus = vec![T::zero(); k_count];
    for k in 0..k_count {
        for (i, cell) in prog.row(k).iter().enumerate() {
            if let Cell::Enabled { line, tap } = *cell {
                let extra = delta_vth.map_or(T::zero(), |d| d[k * n + i]);
                let vg = prog.ladder().tap_voltage(tap);
                let current = saturated_current(p, vg, vbs[i], extra, slope);
                match line {
                    Line::Positive => plus[k] += current,
                    Line::Negative => minus[k] += current,
                }
            }
        }
    }
    Ok(LineCurrents { plus, minus })
}

/// Fixed-step RK4 integrator for one sensing line,
/// `C dV/dt = -I_sat (1 - exp(-(V - V_src) / V_T))`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LineIntegrator<T> {
    vdd: T,
    floor: T,
    vt: T,
    c: T,
    h: T,
    steps: usize,
    // Beyond this V_ds the drain factor rounds to exactly one.
    flat_above: T,
}

impl<T: Scalar> LineIntegrator<T> {
    pub(crate) fn new(p: &DeviceParams<T>, t: &TimingSpec<T>) -> Self {
        let vt = p.thermal_voltage();
        let flat_above = vt * -(T::epsilon() / T::lit(8.0)).ln();
        Self {
            vdd: p.vdd,
            floor: p.source_voltage,
            vt,
            c: p.c_sen,
            h: t.step_size(),
            steps: t.steps(),
            flat_above,
        }
    }

    #[inline]
    fn slope(&self, v: T, rate: T) -> T {
        let vds = v - self.floor;
        if vds > self.flat_above {
            -rate
        } else {
            -rate * drain_factor(vds, self.vt)
        }
    }

    #[inline]
    fn step(&self, v: T, rate: T) -> (T, bool) {
        let h = self.h;
        let half = h / T::lit(2.0);
        let k1 = self.slope(v, rate);
        let k2 = self.slope(v + half * k1, rate);
        let k3 = self.slope(v + half * k2, rate);
        let k4 = self.slope(v + h * k3, rate);
        let next = v + h / T::lit(6.0) * (k1 + T::lit(2.0) * (k2 + k3) + k4);
        if next < self.floor {
            (self.floor, true)
        } else {
            (next.min(v), false)
        }
    }

    /// Final voltage and whether the line saturated.
    pub(crate) fn run(&self, current: T) -> (T, bool) {
        let rate = current / self.c;
        let mut v = self.vdd;
        let mut clamped = false;
        if rate > T::zero() {
            for _ in 0..self.steps {
                let (next, hit) = self.step(v, rate);
                v = next;
                clamped |= hit;
            }
        }
        (v, clamped || v - self.floor < self.vt)
    }

    fn run_traced(&self, current: T, every: usize, mut record: impl FnMut(usize, T)) -> (T, bool) {
        let rate = current / self.c;
        let mut v = self.vdd;
        let mut clamped = false;
        record(0, v);
        for s in 1..=self.steps {
            if rate > T::zero() {
                let (next, hit) = self.step(v, rate);
                v = next;
                clamped |= hit;
            }
            if s % every == 0 || s == self.steps {
                record(s, v);
            }
        }
        (v, clamped || v - self.floor < self.vt)
    }
}

fn result_from_currents<T: Scalar>(
    currents: &LineCurrents<T>,
    p: &DeviceParams<T>,
    t: &TimingSpec<T>,
) -> Result<EvalResult<T>> {
    let integ = LineIntegrator::new(p, t);
    let mut saturated = false;
    let mut drop = |i: T| {
        let (v, sat) = integ.run(i);
        saturated |= sat;
        p.vdd - v
    };
    let delta_plus: Vec<T> = currents.plus.iter().map(|&i| drop(i)).collect();
    let delta_minus: Vec<T> = currents.minus.iter().map(|&i| drop(i)).collect();
    EvalResult::from_drops(delta_plus, delta_minus, p, saturated)
}

fn check_inputs<T: Scalar>(p: &DeviceParams<T>, t: &TimingSpec<T>) -> Result<()> {
    p.validate()?;
    t.validate()
}

/// Simulate one classification cycle at nominal device parameters.
pub fn evaluate<T: Scalar>(
    prog: &GateProgram<T>,
    enc: &BodyEncoding<T>,
    p: &DeviceParams<T>,
    t: &TimingSpec<T>,
) -> Result<EvalResult<T>> {
    check_inputs(p, t)?;
    result_from_currents(&line_currents(prog, enc, p, None)?, p, t)
}

/// Simulate one cycle with a threshold offset on every device.
pub fn evaluate_mismatched<T: Scalar>(
    prog: &GateProgram<T>,
    enc: &BodyEncoding<T>,
    p: &DeviceParams<T>,
    t: &TimingSpec<T>,
    delta_vth: &[T],
) -> Result<EvalResult<T>> {
    check_inputs(p, t)?;
    result_from_currents(&line_currents(prog, enc, p, Some(delta_vth))?, p, t)
}

/// One sample of a sensing-line waveform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct WavePoint<T> {
    pub time: T,
    pub class: usize,
    pub line: Line,
    pub voltage: T,
}

/// Sampled sensing-line voltages over a cycle.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Waveform<T> {
    pub points: Vec<WavePoint<T>>,
}

impl<T: Scalar> Waveform<T> {
    pub const CSV_HEADER: &'static str = "time_s,class,line,voltage";

    /// CSV rows (no header) with every time shifted by `offset`.
    pub fn csv_rows(&self, offset: T) -> String {
        let mut out = String::new();
        for pt in &self.points {
            let line = match pt.line {
                Line::Positive => "+",
                Line::Negative => "-",
            };
            let _ = writeln!(
                out,
                "{:e},{},{},{}",
                (pt.time + offset).as_f64(),
                pt.class,
                line,
                pt.voltage.as_f64()
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::CSV_HEADER, self.csv_rows(T::zero()))
    }
}

/// [`evaluate`] that also records every line at precharge and every
/// `every`-th integration step.
pub fn evaluate_traced<T: Scalar>(
    prog: &GateProgram<T>,
    enc: &BodyEncoding<T>,
    p: &DeviceParams<T>,
    t: &TimingSpec<T>,
    every: usize,
) -> Result<(EvalResult<T>, Waveform<T>)> {
    check_inputs(p, t)?;
    if every == 0 {
        return Err(Error::Parameter("trace stride must be at least 1".into()));
    }
    let currents = line_currents(prog, enc, p, None)?;
    let integ = LineIntegrator::new(p, t);
    let h = t.step_size();
    let mut points = Vec::new();
    let mut saturated = false;
    let mut trace = |class: usize, line: Line, current: T| {
        points.push(WavePoint {
            time: T::zero(),
            class,
            line,
            voltage: p.vdd,
        });
        let (v, sat) = integ.run_traced(current, every, |s, v| {
            points.push(WavePoint {
                time: t.precharge + h * T::from_count(s),
                class,
                line,
                voltage: v,
            });
        });
        saturated |= sat;
        p.vdd - v
    };
    let mut delta_plus = Vec::with_capacity(prog.classes());
    let mut delta_minus = Vec::with_capacity(prog.classes());
    for k in 0..prog.classes() {
        delta_plus.push(trace(k, Line::Positive, currents.plus[k]));
        delta_minus.push(trace(k, Line::Negative, currents.minus[k]));
    }
    let res = EvalResult::from_drops(delta_plus, delta_minus, p, saturated)?;
    points.sort_by(|a, b| {
        a.time
            .partial_cmp(&b.time)
            .expect("finite times")
            .then(a.class.cmp(&b.class))
    });
    Ok((res, Waveform { points }))
}

/// Rescale `I_t` so the largest line drop over `sample` equals
/// `target_fraction * V_DD`, to within 1% (bisection).
pub fn calibrate_current<T: Scalar>(
    prog: &GateProgram<T>,
    sample: &[BodyEncoding<T>],
    p: &DeviceParams<T>,
    t: &TimingSpec<T>,
    target_fraction: T,
) -> Result<DeviceParams<T>> {
    check_inputs(p, t)?;
    if !(target_fraction > T::zero() && target_fraction < T::one()) {
        return Err(Error::Parameter(format!(
            "target fraction {target_fraction} outside (0, 1)"
        )));
    }
    if sample.is_empty() {
        return Err(Error::Calibration("empty calibration sample".into()));
    }
    // Currents are proportional to I_t and drops are monotone in current,
    // so only the strongest line of the sample matters.
    let unit = DeviceParams {
        i_t: T::one(),
        ..*p
    };
    let mut strongest = T::zero();
    for enc in sample {
        let c = line_currents(prog, enc, &unit, None)?;
        strongest = c
            .plus
            .iter()
            .chain(&c.minus)
            .fold(strongest, |m, &v| m.max(v));
    }
    if !(strongest > T::zero()) {
        return Err(Error::Calibration(
            "calibration sample draws no current".into(),
        ));
    }
    let target = target_fraction * p.vdd;
    if target >= p.vdd - p.source_voltage {
        return Err(Error::Calibration(format!(
            "a drop of {target} V exceeds the {} V line swing",
            p.vdd - p.source_voltage
        )));
    }
    let integ = LineIntegrator::new(p, t);
    let drop_at = |i_t: T| p.vdd - integ.run(strongest * i_t).0;

    // Constant-current estimate; the drain factor only slows discharge.
    let mut lo = target * p.c_sen / (strongest * t.evaluate);
    let mut hi = lo;
    for _ in 0..200 {
        if drop_at(hi) >= target {
            break;
        }
        lo = hi;
        hi *= T::lit(2.0);
    }
    if drop_at(hi) < target {
        return Err(Error::Calibration("target drop not reachable".into()));
    }
    let tol = target * T::lit(1e-3);
    let mut best = hi;
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let d = drop_at(mid);
        best = mid;
        if (d - target).abs() <= tol {
            break;
        }
        if d < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let d = drop_at(best);
    if (d - target).abs() > target * T::lit(0.01) {
        return Err(Error::Calibration(format!(
            "bisection stalled at drop {d} V for target {target} V"
        )));
    }
    Ok(DeviceParams { i_t: best, ..*p })
}

/// Maximum-confidence decision; the lowest class index wins ties.
pub fn extract_ideal<T: Scalar>(res: &EvalResult<T>) -> usize {
    argmax(&res.confidence)
}

/// Number of pairwise selectors for `k` classes.
pub fn selector_count(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

/// Selector pairs `(i, j)`, `i < j`, in lexicographic order.
pub fn selector_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .collect()
}

/// Round-robin decision network over all classifier pairs.
///
/// Selector `(i, j)` compares `Δ⁺(i) + Δ⁻(j) + offset` against
/// `Δ⁺(j) + Δ⁻(i)`; `i` wins when the left side is at least the right side.
/// The class with most wins is returned; equal win counts go to the larger
/// confidence, then to the lower index.
pub fn extract_selector_network<T: Scalar>(res: &EvalResult<T>, offsets: &[T]) -> Result<usize> {
    let k = res.classes();
    let pairs = selector_pairs(k);
    if offsets.len() != pairs.len() {
        return Err(Error::Shape(format!(
            "{} comparator offsets for {} selectors",
            offsets.len(),
            pairs.len()
        )));
    }
    let mut wins = vec![0usize; k];
    for (&(i, j), &off) in pairs.iter().zip(offsets) {
        let lhs = res.delta_plus[i] + res.delta_minus[j] + off;
        let rhs = res.delta_plus[j] + res.delta_minus[i];
        if lhs >= rhs {
            wins[i] += 1;
        } else {
            wins[j] += 1;
        }
    }
    let mut best = 0;
    for c in 1..k {
        if wins[c] > wins[best]
            || (wins[c] == wins[best] && res.confidence[c] > res.confidence[best])
        {
            best = c;
        }
    }
    Ok(best)
}

/// `V_DD * sum_lines C_sen * ΔV` plus the fixed extractor overhead.
pub fn energy_of_cycle<T: Scalar>(res: &EvalResult<T>, p: &DeviceParams<T>) -> T {
    let charge = res
        .delta_plus
        .iter()
        .chain(&res.delta_minus)
        .map(|&dv| p.c_sen * dv)
        .sum::<T>();
    p.vdd * charge + p.extractor_energy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BodyDac;
    use crate::train::{LadderSpec, LogMap};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const K: usize = 10;
    const N: usize = 36;

    fn program(cells: Vec<Cell>) -> GateProgram<f64> {
        GateProgram::new(
            K,
            N,
            LadderSpec::default(),
            LogMap {
                ln_min: -8.0,
                ln_max: 0.0,
            },
            cells,
        )
        .unwrap()
    }

    fn single(k: usize, i: usize, line: Line, tap: u8) -> GateProgram<f64> {
        let mut cells = vec![Cell::Disabled; K * N];
        cells[k * N + i] = Cell::Enabled { line, tap };
        program(cells)
    }

    fn encoding(code: u8) -> BodyEncoding<f64> {
        let dac = BodyDac::default();
        BodyEncoding {
            voltages: vec![dac.level(code); N],
            codes: vec![code; N],
        }
    }

    fn random_program(seed: u64) -> GateProgram<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = (0..K * N)
            .map(|_| match rng.random_range(0..3) {
                0 => Cell::Disabled,
                1 => Cell::Enabled {
                    line: Line::Positive,
                    tap: rng.random_range(0..32),
                },
                _ => Cell::Enabled {
                    line: Line::Negative,
                    tap: rng.random_range(0..32),
                },
            })
            .collect();
        program(cells)
    }

    fn random_encoding(seed: u64) -> BodyEncoding<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dac = BodyDac::default();
        let codes: Vec<u8> = (0..N).map(|_| rng.random_range(0..64)).collect();
        BodyEncoding {
            voltages: codes.iter().map(|&c| dac.level(c)).collect(),
            codes,
        }
    }

    fn p() -> DeviceParams<f64> {
        DeviceParams {
            i_t: 2e-9,
            ..Default::default()
        }
    }

    #[test]
    fn timing_defaults_and_validation() {
        let t = TimingSpec::<f64>::default();
        t.validate().unwrap();
        assert_eq!(t.steps(), 750);
        assert!(TimingSpec { dt: 1e-10, ..t }.validate().is_err());
        assert!(TimingSpec {
            precharge: 3e-9,
            ..t
        }
        .validate()
        .is_err());
    }

    #[test]
    fn precharge_examples() {
        let s = precharge(&SenseState::<f64>::new(K), &p());
        assert_eq!(s.lines(), 20);
        assert!(s.v_plus.iter().chain(&s.v_minus).all(|&v| v == 0.9));
        assert_eq!(precharge(&s, &p()), s);
    }

    #[test]
    fn disabled_array_draws_nothing() {
        let prog = program(vec![Cell::Disabled; K * N]);
        let r = evaluate(&prog, &encoding(40), &p(), &TimingSpec::default()).unwrap();
        assert!(r.delta_plus.iter().chain(&r.delta_minus).all(|&d| d == 0.0));
        assert_eq!(r.energy, 0.0);
        assert!(!r.saturated);
    }

    #[test]
    fn single_device_isolation() {
        let prog = single(3, 5, Line::Positive, 20);
        let r = evaluate(&prog, &encoding(50), &p(), &TimingSpec::default()).unwrap();
        for k in 0..K {
            assert_eq!(r.delta_plus[k] > 0.0, k == 3);
            assert_eq!(r.delta_minus[k], 0.0);
        }
        assert_eq!(extract_ideal(&r), 3);
    }

    #[test]
    fn doubling_window_doubles_small_drops() {
        let prog = random_program(1);
        let enc = random_encoding(2);
        let t = TimingSpec::default();
        let params = DeviceParams { i_t: 1e-11, ..p() };
        let a = evaluate(&prog, &enc, &params, &t).unwrap();
        let b = evaluate(&prog, &enc, &params, &t.with_evaluate(15e-9)).unwrap();
        for (x, y) in a
            .delta_plus
            .iter()
            .chain(&a.delta_minus)
            .zip(b.delta_plus.iter().chain(&b.delta_minus))
        {
            assert!(*x < 0.05 * 0.9);
            if *x > 0.0 {
                assert_relative_eq!(*y / *x, 2.0, max_relative = 0.05);
            }
        }
        // Closed-form constant-current oracle.
        let cur = line_currents(&prog, &enc, &params, None).unwrap();
        for (d, i) in a.delta_plus.iter().zip(&cur.plus) {
            assert_relative_eq!(*d, i * 7.5e-9 / 50e-15, max_relative = 0.05);
        }
    }

    #[test]
    fn dt_halving_converged() {
        let prog = random_program(3);
        let enc = random_encoding(4);
        let t = TimingSpec::default();
        let unit = calibrate_current(&prog, std::slice::from_ref(&enc), &p(), &t, 0.7).unwrap();
        let a = evaluate(&prog, &enc, &unit, &t).unwrap();
        let b = evaluate(&prog, &enc, &unit, &TimingSpec { dt: 5e-12, ..t }).unwrap();
        for (x, y) in a
            .delta_plus
            .iter()
            .chain(&a.delta_minus)
            .zip(b.delta_plus.iter().chain(&b.delta_minus))
        {
            if *y > 0.0 {
                assert!((x - y).abs() / y < 1e-3);
            }
        }
    }

    #[test]
    fn superposition_at_small_signal() {
        let enc = random_encoding(5);
        let t = TimingSpec::default();
        let params = DeviceParams { i_t: 1e-11, ..p() };
        let taps = [3u8, 17, 25, 31];
        let mut cells = vec![Cell::Disabled; K * N];
        let mut sum = 0.0;
        for (i, &tap) in taps.iter().enumerate() {
            cells[2 * N + i] = Cell::Enabled {
                line: Line::Negative,
                tap,
            };
            let alone = evaluate(&single(2, i, Line::Negative, tap), &enc, &params, &t).unwrap();
            sum += alone.delta_minus[2];
        }
        let joint = evaluate(&program(cells), &enc, &params, &t)
            .unwrap()
            .delta_minus[2];
        assert!(joint < 0.05 * 0.9);
        assert!((joint - sum).abs() / sum < 0.02);
    }

    #[test]
    fn discharge_is_monotone_and_bounded() {
        let prog = random_program(6);
        let enc = random_encoding(7);
        let t = TimingSpec::default();
        let hot = calibrate_current(&prog, std::slice::from_ref(&enc), &p(), &t, 0.7).unwrap();
        let hot = DeviceParams {
            i_t: hot.i_t * 50.0,
            ..hot
        };
        let (res, wave) = evaluate_traced(&prog, &enc, &hot, &t, 10).unwrap();
        assert!(res.saturated);
        for k in 0..K {
            for line in [Line::Positive, Line::Negative] {
                let v: Vec<f64> = wave
                    .points
                    .iter()
                    .filter(|pt| pt.class == k && pt.line == line)
                    .map(|pt| pt.voltage)
                    .collect();
                assert!(v.windows(2).all(|w| w[1] <= w[0]));
                assert!(v.iter().all(|&x| (0.0..=0.9).contains(&x)));
            }
        }
        let plain = evaluate(&prog, &enc, &hot, &t).unwrap();
        assert_eq!(plain, res);
    }

    #[test]
    fn waveform_csv_shape() {
        let (_, wave) = evaluate_traced(
            &single(0, 0, Line::Positive, 31),
            &encoding(63),
            &p(),
            &TimingSpec::default(),
            75,
        )
        .unwrap();
        let csv = wave.to_csv();
        assert!(csv.starts_with("time_s,class,line,voltage\n"));
        // Precharge sample plus 11 samples per line.
        assert_eq!(csv.lines().count(), 1 + 20 * 12);
    }

    #[test]
    fn calibration_hits_target() {
        let prog = random_program(8);
        let sample: Vec<_> = (0..5).map(random_encoding).collect();
        let t = TimingSpec::default();
        let cal = calibrate_current(&prog, &sample, &p(), &t, 0.5).unwrap();
        let max = sample
            .iter()
            .map(|e| {
                let r = evaluate(&prog, e, &cal, &t).unwrap();
                r.delta_plus
                    .iter()
                    .chain(&r.delta_minus)
                    .fold(0.0f64, |m, &d| m.max(d))
            })
            .fold(0.0, f64::max);
        assert!((0.495..=0.505).contains(&(max / 0.9)), "{max}");
    }

    #[test]
    fn drops_scale_with_it_at_small_signal() {
        let prog = random_program(9);
        let enc = random_encoding(10);
        let t = TimingSpec::default();
        let a = DeviceParams { i_t: 1e-12, ..p() };
        let b = DeviceParams { i_t: 3e-12, ..p() };
        let ra = evaluate(&prog, &enc, &a, &t).unwrap();
        let rb = evaluate(&prog, &enc, &b, &t).unwrap();
        for (x, y) in ra.delta_plus.iter().zip(&rb.delta_plus) {
            if *x > 0.0 {
                assert_relative_eq!(y / x, 3.0, max_relative = 0.01);
            }
        }
    }

    #[test]
    fn calibration_errors() {
        let t = TimingSpec::default();
        assert!(matches!(
            calibrate_current(&random_program(1), &[], &p(), &t, 0.5),
            Err(Error::Calibration(_))
        ));
        let dark = program(vec![Cell::Disabled; K * N]);
        assert!(matches!(
            calibrate_current(&dark, &[encoding(3)], &p(), &t, 0.5),
            Err(Error::Calibration(_))
        ));
        assert!(calibrate_current(&random_program(1), &[encoding(3)], &p(), &t, 1.5).is_err());
    }

    #[test]
    fn shape_errors() {
        let enc = BodyEncoding {
            voltages: vec![0.5; 10],
            codes: vec![30; 10],
        };
        assert!(matches!(
            evaluate(&random_program(1), &enc, &p(), &TimingSpec::default()),
            Err(Error::Shape(_))
        ));
        assert!(evaluate_mismatched(
            &random_program(1),
            &encoding(5),
            &p(),
            &TimingSpec::default(),
            &[0.0; 3]
        )
        .is_err());
    }

    fn result(plus: &[f64], minus: &[f64]) -> EvalResult<f64> {
        EvalResult::from_drops(plus.to_vec(), minus.to_vec(), &p(), false).unwrap()
    }

    #[test]
    fn ideal_extraction_examples() {
        let mut plus = vec![0.0; K];
        plus[0] = 0.1;
        plus[1] = 0.9;
        let r = result(&plus, &[0.0; K]);
        assert_eq!(extract_ideal(&r), 1);
        assert_relative_eq!(r.margin, 0.8);
        assert_eq!(extract_ideal(&result(&[0.2; K], &[0.1; K])), 0);
    }

    #[test]
    fn selector_example_pair() {
        let r = result(&[0.30, 0.20], &[0.10, 0.15]);
        assert_eq!(selector_pairs(2), vec![(0, 1)]);
        assert_eq!(extract_selector_network(&r, &[0.0]).unwrap(), 0);
        assert_eq!(extract_selector_network(&r, &[-0.2]).unwrap(), 1);
    }

    #[test]
    fn selector_count_and_order() {
        assert_eq!(selector_count(10), 45);
        assert_eq!(selector_count(2), 1);
        let pairs = selector_pairs(10);
        assert_eq!(pairs.len(), 45);
        assert_eq!((pairs[0], pairs[44]), ((0, 1), (8, 9)));
    }

    #[test]
    fn selector_matches_ideal_on_random_and_tied_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zeros = vec![0.0; 45];
        for trial in 0..2000 {
            // Odd trials use a coarse dyadic grid so exact ties occur.
            let draw = |rng: &mut ChaCha8Rng| {
                if trial % 2 == 0 {
                    rng.random_range(0.0..0.9)
                } else {
                    f64::from(rng.random_range(0..8u8)) / 16.0
                }
            };
            let plus: Vec<f64> = (0..K).map(|_| draw(&mut rng)).collect();
            let minus: Vec<f64> = (0..K).map(|_| draw(&mut rng)).collect();
            let r = result(&plus, &minus);
            assert_eq!(
                extract_selector_network(&r, &zeros).unwrap(),
                extract_ideal(&r)
            );
        }
        assert!(extract_selector_network(&result(&[0.1; K], &[0.0; K]), &[0.0; 3]).is_err());
    }

    #[test]
    fn energy_examples() {
        let r = result(&[0.3; K], &[0.3; K]);
        assert_relative_eq!(r.charge, 300e-15, max_relative = 1e-12);
        assert_relative_eq!(r.energy, 270e-15, max_relative = 1e-12);
        let overhead = DeviceParams {
            extractor_energy: 1e-13,
            ..p()
        };
        let z = EvalResult::from_drops(vec![0.0; K], vec![0.0; K], &overhead, false).unwrap();
        assert_eq!(z.energy, 1e-13);
        let double_c = DeviceParams {
            c_sen: 100e-15,
            ..p()
        };
        assert_relative_eq!(
            energy_of_cycle(&r, &double_c),
            2.0 * r.energy,
            max_relative = 1e-12
        );
    }

    #[test]
    fn charge_matches_line_sum() {
        let r = evaluate(
            &random_program(12),
            &random_encoding(13),
            &p(),
            &TimingSpec::default(),
        )
        .unwrap();
        let direct: f64 = r
            .delta_plus
            .iter()
            .chain(&r.delta_minus)
            .map(|d| 50e-15 * d)
            .sum();
        assert_eq!(r.charge, direct);
        assert_eq!(r.energy, 0.9 * direct);
    }

    #[test]
    fn zero_offsets_equal_nominal() {
        let prog = random_program(14);
        let enc = random_encoding(15);
        let t = TimingSpec::default();
        let a = evaluate(&prog, &enc, &p(), &t).unwrap();
        let b = evaluate_mismatched(&prog, &enc, &p(), &t, &vec![0.0; K * N]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn source_above_body_rejected() {
        let hi_src = DeviceParams {
            source_voltage: 0.5,
            ..p()
        };
        assert!(matches!(
            evaluate(
                &random_program(1),
                &encoding(0),
                &hi_src,
                &TimingSpec::default()
            ),
            Err(Error::Domain(_))
        ));
    }
}

//! Metrics and cost accounting: confusion matrices, confidence histograms,
//! device/area/energy estimates and the literature comparison table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sim::{selector_count, EvalResult};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

/// Tally predictions against labels.
pub fn confusion(predictions: &[usize], labels: &[u8], classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut counts = vec![0u64; classes * classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        let l = usize::from(l);
        if p >= classes || l >= classes {
            return Err(Error::Parameter(format!(
                "class index outside 0..{classes}"
            )));
        }
        counts[l * classes + p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    /// Trace over total, in percent; zero for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            100.0 * self.trace() as f64 / total as f64
        }
    }

    /// Aligned text table with a per-class recall column.
    pub fn to_text(&self) -> String {
        let width = self
            .counts
            .iter()
            .max()
            .map_or(1, |m| m.to_string().len())
            .max(4);
        let mut out = String::new();
        let _ = write!(out, "{:>6} |", "true");
        for p in 0..self.classes {
            let _ = write!(out, " {p:>width$}");
        }
        let _ = writeln!(out, " | recall");
        let _ = writeln!(out, "{}", "-".repeat(8 + self.classes * (width + 1) + 9));
        for t in 0..self.classes {
            let _ = write!(out, "{t:>6} |");
            for p in 0..self.classes {
                let _ = write!(out, " {:>width$}", self.get(t, p));
            }
            let row = self.row_sum(t);
            let recall = if row == 0 {
                0.0
            } else {
                100.0 * self.get(t, t) as f64 / row as f64
            };
            let _ = writeln!(out, " | {recall:6.2}%");
        }
        let _ = writeln!(
            out,
            "accuracy: {:.2}% ({} / {})",
            self.accuracy(),
            self.trace(),
            self.total()
        );
        out
    }

    /// `truth,predicted,count` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth,predicted,count\n");
        for t in 0..self.classes {
            for p in 0..self.classes {
                let _ = writeln!(out, "{t},{p},{}", self.get(t, p));
            }
        }
        out
    }
}

/// Equal-width histogram over `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Parameter(format!(
                "need at least 2 bins, got {bins}"
            )));
        }
        if !(hi > lo) {
            return Err(Error::Parameter("histogram range must be non-empty".into()));
        }
        Ok(Self {
            lo,
            hi,
            counts: vec![0; bins],
        })
    }

    pub fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let f = ((v - self.lo) / (self.hi - self.lo) * bins as f64).floor();
        let idx = if f.is_nan() {
            0
        } else {
            f.clamp(0.0, (bins - 1) as f64) as usize
        };
        self.counts[idx] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + w * i as f64, self.lo + w * (i + 1) as f64)
    }

    /// Fraction of the total in each bin; all zero when empty.
    pub fn normalized(&self) -> Vec<f64> {
        let total = self.total();
        self.counts
            .iter()
            .map(|&c| {
                if total == 0 {
                    0.0
                } else {
                    c as f64 / total as f64
                }
            })
            .collect()
    }
}

/// Margin distributions of correct and incorrect decisions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistograms {
    pub correct: Histogram,
    pub incorrect: Histogram,
    pub mean_correct: Option<f64>,
    pub mean_incorrect: Option<f64>,
}

impl ConfidenceHistograms {
    /// `bin_lo,bin_hi,correct_count,correct_fraction,incorrect_count,incorrect_fraction`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "bin_lo,bin_hi,correct_count,correct_fraction,incorrect_count,incorrect_fraction\n",
        );
        let (nc, ni) = (self.correct.normalized(), self.incorrect.normalized());
        for i in 0..self.correct.counts.len() {
            let (lo, hi) = self.correct.bin_edges(i);
            let _ = writeln!(
                out,
                "{lo},{hi},{},{},{},{}",
                self.correct.counts[i], nc[i], self.incorrect.counts[i], ni[i]
            );
        }
        out
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Histograms of decision margins split by correctness, over a shared range
/// from zero to the largest margin.
pub fn margin_histograms(
    margins: &[f64],
    correct: &[bool],
    bins: usize,
) -> Result<ConfidenceHistograms> {
    if margins.len() != correct.len() {
        return Err(Error::Shape(format!(
            "{} margins for {} outcomes",
            margins.len(),
            correct.len()
        )));
    }
    let top = margins.iter().copied().fold(0.0f64, f64::max);
    let hi = if top > 0.0 { top } else { 1.0 };
    let mut good = Histogram::new(0.0, hi, bins)?;
    let mut bad = Histogram::new(0.0, hi, bins)?;
    let (mut gm, mut bm) = (Vec::new(), Vec::new());
    for (&m, &ok) in margins.iter().zip(correct) {
        if ok {
            good.add(m);
            gm.push(m);
        } else {
            bad.add(m);
            bm.push(m);
        }
    }
    Ok(ConfidenceHistograms {
        correct: good,
        incorrect: bad,
        mean_correct: mean(&gm),
        mean_incorrect: mean(&bm),
    })
}

/// Margin histograms of circuit results, judged by their ideal extraction.
pub fn confidence_histograms<T: Scalar>(
    results: &[EvalResult<T>],
    labels: &[u8],
    bins: usize,
) -> Result<ConfidenceHistograms> {
    if results.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} results for {} labels",
            results.len(),
            labels.len()
        )));
    }
    let margins: Vec<f64> = results.iter().map(|r| r.margin.as_f64()).collect();
    let correct: Vec<bool> = results
        .iter()
        .zip(labels)
        .map(|(r, &l)| r.predicted == usize::from(l))
        .collect();
    margin_histograms(&margins, &correct, bins)
}

/// Per-element area and energy constants.
///
/// The defaults are calibrated so that an 81-feature, 10-class array reports
/// 2,179 µm² and 6.2 pJ per decision; they are inputs, not predictions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnitCosts {
    pub device_area_um2: f64,
    pub selector_area_um2: f64,
    pub ladder_area_um2: f64,
    pub device_energy_j: f64,
    pub selector_energy_j: f64,
}

pub const REFERENCE_AREA_UM2: f64 = 2179.0;
pub const REFERENCE_ENERGY_J: f64 = 6.2e-12;
const REFERENCE_DEVICES: f64 = 810.0;
const REFERENCE_SELECTORS: f64 = 45.0;

impl Default for UnitCosts {
    fn default() -> Self {
        let selector_area_um2 = 5.0;
        let ladder_area_um2 = 150.0;
        let selector_energy_j = 20e-15;
        Self {
            device_area_um2: (REFERENCE_AREA_UM2
                - REFERENCE_SELECTORS * selector_area_um2
                - ladder_area_um2)
                / REFERENCE_DEVICES,
            selector_area_um2,
            ladder_area_um2,
            device_energy_j: (REFERENCE_ENERGY_J - REFERENCE_SELECTORS * selector_energy_j)
                / REFERENCE_DEVICES,
            selector_energy_j,
        }
    }
}

/// Device counts and the area/energy they imply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub features: usize,
    pub classes: usize,
    pub array_devices: usize,
    pub selectors: usize,
    /// Pairwise classifiers a one-vs-one scheme would need, for comparison.
    pub ovo_classifiers: usize,
    pub area_um2: f64,
    pub energy_j: f64,
    /// Energy over supply voltage (A·s).
    pub current_time_as: f64,
    /// Provenance of the unit constants.
    pub basis: String,
}

/// Binary classifiers of a one-vs-one scheme, `K(K-1)/2`.
pub fn ovo_classifiers(k: usize) -> usize {
    selector_count(k)
}

pub fn cost_estimate(n: usize, k: usize, unit: &UnitCosts, vdd: f64) -> Result<CostEstimate> {
    if n == 0 || k == 0 {
        return Err(Error::Parameter(
            "feature and class counts must be at least 1".into(),
        ));
    }
    if !(vdd > 0.0) {
        return Err(Error::Parameter("supply voltage must be positive".into()));
    }
    let array_devices = n * k;
    let selectors = selector_count(k);
    let area_um2 = array_devices as f64 * unit.device_area_um2
        + selectors as f64 * unit.selector_area_um2
        + unit.ladder_area_um2;
    let energy_j =
        array_devices as f64 * unit.device_energy_j + selectors as f64 * unit.selector_energy_j;
    let basis = if *unit == UnitCosts::default() {
        "calibrated"
    } else {
        "user"
    };
    Ok(CostEstimate {
        features: n,
        classes: k,
        array_devices,
        selectors,
        ovo_classifiers: ovo_classifiers(k),
        area_um2,
        energy_j,
        current_time_as: energy_j / vdd,
        basis: basis.into(),
    })
}

/// Area per squared feature size, µm²/nm².
pub fn normalized_area(area_um2: f64, node_nm: f64) -> f64 {
    area_um2 / (node_nm * node_nm)
}

/// One published design point; values are transcribed, not computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiteratureRow {
    pub work: String,
    pub dataset: String,
    pub technology_nm: f64,
    pub algorithm: String,
    pub accuracy_pct: f64,
    pub weight_bits: u32,
    pub feature_bits: u32,
    pub features: usize,
    pub vdd_v: f64,
    pub speed_mhz: f64,
    pub energy_pj: f64,
    pub current_time_pas: f64,
    pub area_um2: f64,
    pub normalized_area: f64,
}

const LITERATURE_CSV: &str = include_str!("../data/literature.csv");

/// Raw comparison table as shipped.
pub fn literature_csv() -> &'static str {
    LITERATURE_CSV
}

pub fn literature_table() -> Result<Vec<LiteratureRow>> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::Format(format!("literature table: {s}: {e}")))
    };
    LITERATURE_CSV
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 14 {
                return Err(Error::Format(format!(
                    "literature table row has {} fields",
                    f.len()
                )));
            }
            Ok(LiteratureRow {
                work: f[0].into(),
                dataset: f[1].into(),
                technology_nm: num(f[2])?,
                algorithm: f[3].into(),
                accuracy_pct: num(f[4])?,
                weight_bits: num(f[5])? as u32,
                feature_bits: num(f[6])? as u32,
                features: num(f[7])? as usize,
                vdd_v: num(f[8])?,
                speed_mhz: num(f[9])?,
                energy_pj: num(f[10])?,
                current_time_pas: num(f[11])?,
                area_um2: num(f[12])?,
                normalized_area: num(f[13])?,
            })
        })
        .collect()
}

/// Literature rows followed by this toolchain's own estimate, each tagged
/// `literature` or `computed`.
pub fn comparison_csv(
    own: &CostEstimate,
    accuracy_pct: f64,
    node_nm: f64,
    vdd: f64,
    speed_mhz: f64,
) -> Result<String> {
    let mut out = String::from(
        "source,work,dataset,technology_nm,algorithm,accuracy_pct,features,vdd_v,speed_mhz,energy_pj,current_time_pas,area_um2,normalized_area\n",
    );
    for r in literature_table()? {
        let _ = writeln!(
            out,
            "literature,{},{},{},{},{},{},{},{},{},{},{},{}",
            r.work,
            r.dataset,
            r.technology_nm,
            r.algorithm,
            r.accuracy_pct,
            r.features,
            r.vdd_v,
            r.speed_mhz,
            r.energy_pj,
            r.current_time_pas,
            r.area_um2,
            r.normalized_area
        );
    }
    let _ = writeln!(
        out,
        "computed,this-toolchain ({} constants),MNIST,{node_nm},LR,{accuracy_pct:.2},{},{vdd},{speed_mhz},{:.4},{:.4},{:.1},{:.4}",
        own.basis,
        own.features,
        own.energy_j * 1e12,
        own.current_time_as * 1e12,
        own.area_um2,
        normalized_area(own.area_um2, node_nm)
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceParams;

    #[test]
    fn perfect_predictions() {
        let labels: Vec<u8> = (0..50).map(|i| (i % 10) as u8).collect();
        let preds: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
        let cm = confusion(&preds, &labels, 10).unwrap();
        assert_eq!(cm.accuracy(), 100.0);
        for t in 0..10 {
            for p in 0..10 {
                assert_eq!(cm.get(t, p), if t == p { 5 } else { 0 });
            }
        }
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let labels: Vec<u8> = (0..100).map(|i| (i % 10) as u8).collect();
        let cm = confusion(&vec![0; 100], &labels, 10).unwrap();
        assert_eq!(cm.accuracy(), 10.0);
        assert!((0..10).all(|t| cm.row_sum(t) == 10));
    }

    #[test]
    fn confusion_shape_error() {
        assert!(matches!(confusion(&[0, 1], &[0], 10), Err(Error::Shape(_))));
    }

    #[test]
    fn text_and_csv_render() {
        let cm = confusion(&[0, 1, 1], &[0, 1, 0], 2).unwrap();
        assert!(cm.to_text().contains("accuracy: 66.67%"));
        assert_eq!(cm.to_csv().lines().count(), 5);
    }

    #[test]
    fn histogram_totals() {
        let h = margin_histograms(&[0.1, 0.2, 0.3, 0.0], &[true; 4], 4).unwrap();
        assert_eq!(h.incorrect.total(), 0);
        assert_eq!(h.correct.total(), 4);
        assert_eq!(h.mean_incorrect, None);
        let h = margin_histograms(&[0.1, 0.5, 0.05], &[true, true, false], 5).unwrap();
        assert_eq!(h.correct.total() + h.incorrect.total(), 3);
        assert!(h.mean_correct.unwrap() > h.mean_incorrect.unwrap());
        assert!((h.correct.normalized().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(margin_histograms(&[0.1], &[true], 1).is_err());
    }

    #[test]
    fn histograms_from_results() {
        let p = DeviceParams::<f64>::default();
        let r = EvalResult::from_drops(vec![0.3, 0.1], vec![0.0, 0.0], &p, false).unwrap();
        let h = confidence_histograms(&[r.clone(), r], &[0, 1], 3).unwrap();
        assert_eq!((h.correct.total(), h.incorrect.total()), (1, 1));
        assert_eq!(h.to_csv().lines().count(), 4);
    }

    #[test]
    fn reference_counts() {
        let c = cost_estimate(81, 10, &UnitCosts::default(), 0.9).unwrap();
        assert_eq!(
            (c.array_devices, c.selectors, c.ovo_classifiers),
            (810, 45, 45)
        );
        assert!((c.area_um2 - 2179.0).abs() < 1e-9);
        assert!((c.energy_j - 6.2e-12).abs() < 1e-24);
        assert!((c.current_time_as * 1e12 - 6.888_888_888_888_889).abs() < 1e-9);
        assert_eq!(c.basis, "calibrated");
        assert_eq!(
            cost_estimate(81, 2, &UnitCosts::default(), 0.9)
                .unwrap()
                .selectors,
            1
        );
        assert!(cost_estimate(0, 2, &UnitCosts::default(), 0.9).is_err());
    }

    #[test]
    fn literature_table_is_consistent() {
        let rows = literature_table().unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            // Stated normalized areas are truncated to three significant digits.
            let na = normalized_area(r.area_um2, r.technology_nm);
            assert!(
                (na - r.normalized_area).abs() / r.normalized_area < 0.01,
                "{}",
                r.work
            );
            let ct = r.energy_pj / r.vdd_v;
            assert!(
                (ct - r.current_time_pas).abs() / r.current_time_pas < 0.01,
                "{}",
                r.work
            );
        }
    }

    #[test]
    fn comparison_marks_sources() {
        let c = cost_estimate(81, 10, &UnitCosts::default(), 0.9).unwrap();
        let csv = comparison_csv(&c, 89.5, 45.0, 0.9, 100.0).unwrap();
        assert_eq!(
            csv.lines().filter(|l| l.starts_with("literature,")).count(),
            4
        );
        assert_eq!(
            csv.lines().filter(|l| l.starts_with("computed,")).count(),
            1
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn count_formulas(n in 1usize..2000, k in 1usize..200) {
                let c = cost_estimate(n, k, &UnitCosts::default(), 0.9).unwrap();
                prop_assert_eq!(c.array_devices, n * k);
                prop_assert_eq!(c.selectors * 2, k * (k - 1));
                prop_assert!((c.current_time_as - c.energy_j / 0.9).abs() <= 1e-12 * c.energy_j.abs());
            }

            #[test]
            fn accuracy_is_mean_correct(pairs in prop::collection::vec((0usize..10, 0u8..10), 1..200)) {
                let (preds, labels): (Vec<usize>, Vec<u8>) = pairs.into_iter().unzip();
                let cm = confusion(&preds, &labels, 10).unwrap();
                let direct = preds.iter().zip(&labels).filter(|(p, l)| **p == usize::from(**l)).count();
                prop_assert_eq!(cm.accuracy(), 100.0 * direct as f64 / labels.len() as f64);
            }
        }
    }
}

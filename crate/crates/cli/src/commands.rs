//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;

use coremac::data::{split_holdout, DatasetSplit, LabeledImage, MnistFiles};
use coremac::pipeline::{
    accuracy, circuit_results, ideal_predictions, train_and_compile, EncodedSample, Featurizer,
};
use coremac::report::{comparison_csv, confusion, cost_estimate, margin_histograms};
use coremac::sim::{calibrate_current, evaluate_traced, EvalResult, Waveform};
use coremac::variation::{
    calibrate_sigma, feature_point, grid, run_montecarlo, temperature_point, vdd_point,
    FeatureSweepConfig, SweepAxis, SweepPoint, SweepResult, Testbench,
};
use coremac::{balanced_subset, BodyEncoding, Params, Program};
use serde::{Deserialize, Serialize};

use crate::config::{Mode, Range, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::{strip_comments, write_json, write_text};

/// Upper bound on traced images per `simulate --waveforms` call.
pub const MAX_TRACED_IMAGES: usize = 100;

pub const WEIGHTS_FILE: &str = "weights.json";
pub const PROGRAM_FILE: &str = "program.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

/// Effective configuration and its hash.
pub struct Context {
    pub cfg: RunConfig,
    pub hash: String,
}

impl Context {
    pub fn new(cfg: RunConfig) -> CliResult<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        Ok(Self { cfg, hash })
    }

    fn featurizer(&self) -> CliResult<Featurizer<f64>> {
        Ok(Featurizer::new(
            self.cfg.pipeline.side,
            self.cfg.pipeline.dac,
        )?)
    }

    fn load_images(&self) -> CliResult<DatasetSplit<LabeledImage>> {
        let dir = &self.cfg.paths.mnist_dir;
        let files =
            MnistFiles::locate(dir).map_err(|e| CliError::Usage(format!("dataset path: {e}")))?;
        let (train, test) = files.load()?;
        let held = self.cfg.pipeline.validation_records;
        if held >= train.len() {
            return Err(CliError::Config(format!(
                "{held} validation records leave nothing to train on ({} training images)",
                train.len()
            )));
        }
        let n_train = train.len() - held;
        Ok(split_holdout(
            train,
            n_train,
            test,
            self.cfg.pipeline.split_seed,
        )?)
    }

    fn load_program(&self) -> CliResult<Program> {
        let path = self.cfg.out(PROGRAM_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            CliError::Usage(format!(
                "cannot read gate program {} ({e}); run `coremac train` first",
                path.display()
            ))
        })?;
        let prog = Program::from_json(&text)?;
        let n = self.cfg.pipeline.side * self.cfg.pipeline.side;
        if prog.features() != n {
            return Err(CliError::Config(format!(
                "gate program has {} features but pipeline.side {} needs {n}",
                prog.features(),
                self.cfg.pipeline.side
            )));
        }
        Ok(prog)
    }

    /// `I_t` scaled so the strongest line over the calibration images drops
    /// by the configured fraction of `V_DD`.
    fn calibrate(&self, prog: &Program, images: &DatasetSplit<LabeledImage>) -> CliResult<Params> {
        let s = &self.cfg.simulate;
        let take = s.calibration_images.min(images.train.len());
        let encodings: Vec<BodyEncoding<f64>> = self
            .featurizer()?
            .encode_all(&images.train[..take])
            .into_iter()
            .map(|e| e.encoding)
            .collect();
        Ok(calibrate_current(
            prog,
            &encodings,
            &self.cfg.device,
            &self.cfg.timing,
            s.calibration_fraction,
        )?)
    }
}

#[derive(Serialize)]
struct TrainLog {
    side: usize,
    features: usize,
    classes: usize,
    train_images: usize,
    validation_images: usize,
    enabled_devices: usize,
    validation_accuracy: Option<f64>,
    validation_accuracy_quantized: Option<f64>,
    final_loss: Vec<f64>,
    loss_log: Vec<Vec<f64>>,
}

pub fn train(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let images = ctx.load_images()?;
    let samples = ctx.featurizer()?.sample_split(&images);
    let model = train_and_compile(
        &samples,
        &cfg.train,
        &cfg.pipeline.ladder,
        cfg.pipeline.dead_zone,
        &cfg.device,
    )?;
    write_json_doc(ctx, WEIGHTS_FILE, &model.weights.to_json()?)?;
    write_json_doc(ctx, PROGRAM_FILE, &model.program.to_json()?)?;
    let log = TrainLog {
        side: cfg.pipeline.side,
        features: model.weights.features(),
        classes: model.weights.classes(),
        train_images: samples.train.len(),
        validation_images: samples.validation.len(),
        enabled_devices: model.program.enabled_devices(),
        validation_accuracy: model.validation_accuracy,
        validation_accuracy_quantized: model.validation_accuracy_quantized,
        final_loss: model
            .loss_log
            .iter()
            .filter_map(|l| l.last().copied())
            .collect(),
        loss_log: model.loss_log.clone(),
    };
    write_json(&cfg.out("train_log.json"), &ctx.hash, &log)?;
    let fmt = |a: Option<f64>| a.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}%"));
    println!(
        "trained {} classes on {} images ({} features, {} devices enabled)",
        log.classes, log.train_images, log.features, log.enabled_devices
    );
    println!(
        "validation accuracy: float {}, quantized {}",
        fmt(log.validation_accuracy),
        fmt(log.validation_accuracy_quantized)
    );
    Ok(())
}

fn write_json_doc(ctx: &Context, name: &str, doc: &str) -> CliResult<()> {
    crate::output::write_atomic(
        &ctx.cfg.out(name),
        &crate::output::stamp_json(doc, &ctx.hash)?,
    )
}

#[derive(Serialize)]
struct SimulateSummary {
    mode: Mode,
    images: usize,
    ideal_accuracy: f64,
    circuit_accuracy: Option<f64>,
    calibrated_i_t: Option<f64>,
    mean_energy_j: Option<f64>,
    min_energy_j: Option<f64>,
    max_energy_j: Option<f64>,
    mean_charge_c: Option<f64>,
    mean_margin_v: Option<f64>,
    saturated: Option<usize>,
    traced_images: usize,
}

pub fn simulate(ctx: &Context, waveforms: bool) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let prog = ctx.load_program()?;
    let images = ctx.load_images()?;
    let n = cfg
        .simulate
        .limit
        .map_or(images.test.len(), |l| l.min(images.test.len()));
    if n == 0 {
        return Err(CliError::Data("test set is empty".into()));
    }
    let test: Vec<EncodedSample<f64>> = ctx.featurizer()?.encode_all(&images.test[..n]);
    let labels: Vec<u8> = test.iter().map(EncodedSample::label).collect();
    let samples: Vec<_> = test.iter().map(|e| e.sample.clone()).collect();
    let ideal = ideal_predictions(&prog.dequantized(), &samples)?;
    let ideal_pred: Vec<usize> = ideal.iter().map(|p| p.predicted).collect();
    let ideal_accuracy = accuracy(&ideal_pred, &labels)?;

    let mut summary = SimulateSummary {
        mode: cfg.simulate.mode,
        images: n,
        ideal_accuracy,
        circuit_accuracy: None,
        calibrated_i_t: None,
        mean_energy_j: None,
        min_energy_j: None,
        max_energy_j: None,
        mean_charge_c: None,
        mean_margin_v: None,
        saturated: None,
        traced_images: 0,
    };
    let mut csv = String::from(
        "index,label,ideal,ideal_margin,circuit,circuit_margin_v,energy_j,saturated\n",
    );
    let results: Option<Vec<EvalResult<f64>>> = match cfg.simulate.mode {
        Mode::Ideal => None,
        Mode::Circuit => {
            let params = ctx.calibrate(&prog, &images)?;
            let encs: Vec<&BodyEncoding<f64>> = test.iter().map(|e| &e.encoding).collect();
            let results = circuit_results(&prog, &encs, &params, &cfg.timing)?;
            let energies: Vec<f64> = results.iter().map(|r| r.energy).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let pred: Vec<usize> = results.iter().map(|r| r.predicted).collect();
            summary.circuit_accuracy = Some(accuracy(&pred, &labels)?);
            summary.calibrated_i_t = Some(params.i_t);
            summary.mean_energy_j = Some(mean(&energies));
            summary.min_energy_j = Some(energies.iter().copied().fold(f64::INFINITY, f64::min));
            summary.max_energy_j = Some(energies.iter().copied().fold(0.0, f64::max));
            summary.mean_charge_c =
                Some(mean(&results.iter().map(|r| r.charge).collect::<Vec<_>>()));
            summary.mean_margin_v =
                Some(mean(&results.iter().map(|r| r.margin).collect::<Vec<_>>()));
            summary.saturated = Some(results.iter().filter(|r| r.saturated).count());
            if waveforms {
                summary.traced_images = write_waveforms(ctx, &prog, &test, &params)?;
            }
            Some(results)
        }
    };
    for (i, (p, &l)) in ideal.iter().zip(&labels).enumerate() {
        let _ = write!(csv, "{i},{l},{},{}", p.predicted, p.margin);
        match &results {
            Some(r) => {
                let r = &r[i];
                let _ = writeln!(
                    csv,
                    ",{},{},{},{}",
                    r.predicted,
                    r.margin,
                    r.energy,
                    u8::from(r.saturated)
                );
            }
            None => csv.push_str(",,,,\n"),
        }
    }
    write_text(&cfg.out(PREDICTIONS_FILE), &ctx.hash, &csv)?;

    let shown: Vec<usize> = match &results {
        Some(r) => r.iter().map(|r| r.predicted).collect(),
        None => ideal_pred,
    };
    let cm = confusion(&shown, &labels, prog.classes())?;
    write_text(&cfg.out("confusion.txt"), &ctx.hash, &cm.to_text())?;
    write_text(&cfg.out("confusion.csv"), &ctx.hash, &cm.to_csv())?;
    write_json(&cfg.out("simulate.json"), &ctx.hash, &summary)?;

    println!("ideal-math accuracy on {n} images: {ideal_accuracy:.2}%");
    if let (Some(acc), Some(e)) = (summary.circuit_accuracy, summary.mean_energy_j) {
        println!(
            "circuit accuracy on {n} images: {acc:.2}%  (mean energy {:.3} pJ/decision)",
            e * 1e12
        );
    }
    if summary.traced_images > 0 {
        println!("waveforms for {} images written", summary.traced_images);
    }
    Ok(())
}

fn write_waveforms(
    ctx: &Context,
    prog: &Program,
    test: &[EncodedSample<f64>],
    params: &Params,
) -> CliResult<usize> {
    let t = &ctx.cfg.timing;
    let count = test.len().min(MAX_TRACED_IMAGES);
    let mut csv = String::from("cycle,label,predicted,");
    csv.push_str(Waveform::<f64>::CSV_HEADER);
    csv.push('\n');
    for (cycle, s) in test[..count].iter().enumerate() {
        let (r, wave) = evaluate_traced(
            prog,
            &s.encoding,
            params,
            t,
            ctx.cfg.simulate.waveform_every,
        )?;
        let offset = cycle as f64 * t.period;
        for row in wave.csv_rows(offset).lines() {
            let _ = writeln!(csv, "{cycle},{},{},{row}", s.label(), r.predicted);
        }
    }
    write_text(&ctx.cfg.out("waveforms.csv"), &ctx.hash, &csv)?;
    Ok(count)
}

/// Completed sweep points, keyed by the configuration that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SweepManifest {
    config_hash: String,
    axis: SweepAxis,
    nominal_accuracy: Option<f64>,
    points: Vec<SweepPoint>,
}

fn axis_name(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::Features => "features",
        SweepAxis::Temperature => "temperature",
        SweepAxis::Vdd => "vdd",
    }
}

pub fn sweep(ctx: &Context, axis: SweepAxis, range: Option<Range>) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let v = &cfg.variation;
    let range = range.unwrap_or(match axis {
        SweepAxis::Features => v.sides,
        SweepAxis::Temperature => v.temperature_c,
        SweepAxis::Vdd => v.vdd_v,
    });
    let values = grid(range.lo, range.hi, range.step)?;
    if axis == SweepAxis::Features && values.iter().any(|m| m.fract() != 0.0) {
        return Err(CliError::Config(
            "feature sweep sides must be whole numbers".into(),
        ));
    }
    let name = axis_name(axis);
    let manifest_path = cfg.out(&format!("sweep_{name}.manifest.json"));
    let mut manifest = fs::read_to_string(&manifest_path)
        .ok()
        .and_then(|t| serde_json::from_str::<SweepManifest>(&t).ok())
        .filter(|m| m.config_hash == ctx.hash && m.axis == axis)
        .unwrap_or(SweepManifest {
            config_hash: ctx.hash.clone(),
            axis,
            nominal_accuracy: None,
            points: Vec::new(),
        });
    let resumed = manifest.points.len();
    let save = |m: &SweepManifest| -> CliResult<()> {
        crate::output::write_atomic(&manifest_path, &serde_json::to_string_pretty(m)?)
    };

    let images = ctx.load_images()?;
    let done = |m: &SweepManifest, x: f64| m.points.iter().any(|p| (p.value - x).abs() < 1e-9);
    match axis {
        SweepAxis::Features => {
            let fcfg = FeatureSweepConfig {
                train: cfg.train.clone(),
                ladder: cfg.pipeline.ladder,
                dac: cfg.pipeline.dac,
                dead_zone: cfg.pipeline.dead_zone,
                device: cfg.device,
                costs: cfg.report.costs,
            };
            for &m in &values {
                if done(&manifest, m) {
                    continue;
                }
                let p = feature_point(&images, m as usize, &fcfg)?;
                println!("side {m:>2}: {:.2}%", p.accuracy);
                manifest.points.push(p);
                save(&manifest)?;
            }
        }
        SweepAxis::Temperature | SweepAxis::Vdd => {
            let prog = ctx.load_program()?;
            let params = ctx.calibrate(&prog, &images)?;
            let n = v.sweep_images.min(images.test.len());
            if n == 0 {
                return Err(CliError::Data("test set is empty".into()));
            }
            let test = ctx.featurizer()?.encode_all(&images.test[..n]);
            let encodings: Vec<BodyEncoding<f64>> =
                test.iter().map(|e| e.encoding.clone()).collect();
            let labels: Vec<u8> = test.iter().map(EncodedSample::label).collect();
            let bench = Testbench {
                program: &prog,
                encodings: &encodings,
                labels: &labels,
                params,
                timing: cfg.timing,
            };
            bench.validate()?;
            if manifest.nominal_accuracy.is_none() {
                let pred: Vec<usize> = bench.results()?.iter().map(|r| r.predicted).collect();
                manifest.nominal_accuracy = Some(accuracy(&pred, &labels)?);
                save(&manifest)?;
            }
            for &x in &values {
                if done(&manifest, x) {
                    continue;
                }
                let p = match axis {
                    SweepAxis::Temperature => temperature_point(&bench, x)?,
                    _ => vdd_point(&bench, x)?,
                };
                println!("{name} {x}: {:.2}%", p.accuracy);
                manifest.points.push(p);
                save(&manifest)?;
            }
        }
    }
    let mut points: Vec<SweepPoint> = values
        .iter()
        .filter_map(|&x| {
            manifest
                .points
                .iter()
                .find(|p| (p.value - x).abs() < 1e-9)
                .cloned()
        })
        .collect();
    points.sort_by(|a, b| a.value.total_cmp(&b.value));
    let result = SweepResult {
        axis,
        nominal_accuracy: manifest.nominal_accuracy,
        points,
    };
    write_text(
        &cfg.out(&format!("sweep_{name}.csv")),
        &ctx.hash,
        &result.to_csv(),
    )?;
    if resumed > 0 {
        println!("resumed with {resumed} completed points");
    }
    if let Some(nom) = result.nominal_accuracy {
        println!("nominal accuracy {nom:.2}%");
        for p in result.flagged(1.0) {
            println!(
                "  {name} {}: {:.2}% departs from nominal by more than 1 point",
                p.value, p.accuracy
            );
        }
    }
    println!("{} points written to sweep_{name}.csv", result.points.len());
    Ok(())
}

#[derive(Serialize)]
struct FlipAnalysis {
    mean_flips_to_incorrect: f64,
    mean_flips_to_correct: f64,
    runs_with_flips: usize,
}

pub fn montecarlo(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let v = &cfg.variation;
    let prog = ctx.load_program()?;
    let images = ctx.load_images()?;
    let params = ctx.calibrate(&prog, &images)?;
    let labels: Vec<u8> = images.test.iter().map(LabeledImage::label).collect();
    let picked = balanced_subset(&labels, v.per_class, prog.classes(), v.subset_seed)?;
    let featurizer = ctx.featurizer()?;
    let encodings: Vec<BodyEncoding<f64>> = picked
        .iter()
        .map(|&i| featurizer.encode(&images.test[i]).encoding)
        .collect();
    let sub_labels: Vec<u8> = picked.iter().map(|&i| labels[i]).collect();
    let bench = Testbench {
        program: &prog,
        encodings: &encodings,
        labels: &sub_labels,
        params,
        timing: cfg.timing,
    };

    let summary = run_montecarlo(&bench, &v.mismatch, v.runs)?;
    let runs = summary.runs.len() as f64;
    let flips = FlipAnalysis {
        mean_flips_to_incorrect: summary
            .runs
            .iter()
            .map(|r| r.flips_to_incorrect as f64)
            .sum::<f64>()
            / runs,
        mean_flips_to_correct: summary
            .runs
            .iter()
            .map(|r| r.flips_to_correct as f64)
            .sum::<f64>()
            / runs,
        runs_with_flips: summary
            .runs
            .iter()
            .filter(|r| r.flips_to_incorrect + r.flips_to_correct > 0)
            .count(),
    };
    write_text(
        &cfg.out("montecarlo_runs.csv"),
        &ctx.hash,
        &summary.runs_csv(),
    )?;
    write_json(
        &cfg.out("montecarlo.json"),
        &ctx.hash,
        &serde_json::json!({ "summary": summary, "flips": flips }),
    )?;
    println!(
        "{} runs on {} images: nominal {:.2}%, mean {:.2}% (std {:.2}), degradation {:.2} points",
        v.runs,
        summary.images,
        summary.nominal_accuracy,
        summary.mean,
        summary.std,
        summary.mean_degradation
    );
    if let Some(target) = v.target_degradation {
        let cal = calibrate_sigma(&bench, &v.mismatch, v.runs, target, 0.25)?;
        write_json(&cfg.out("sigma_calibration.json"), &ctx.hash, &cal)?;
        println!(
            "sigma* = {:.3} mV gives {:.2} points mean degradation (target {target})",
            cal.sigma_vth * 1e3,
            cal.summary.mean_degradation
        );
    }
    Ok(())
}

/// One row of `predictions.csv`.
struct PredictionRow {
    label: u8,
    predicted: usize,
    margin: f64,
}

fn read_predictions(ctx: &Context) -> CliResult<(Vec<PredictionRow>, &'static str)> {
    let path = ctx.cfg.out(PREDICTIONS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| {
        CliError::Usage(format!(
            "cannot read {} ({e}); run `coremac simulate` first",
            path.display()
        ))
    })?;
    let body = strip_comments(&text);
    let mut lines = body.lines();
    lines
        .next()
        .ok_or_else(|| CliError::Data("predictions file is empty".into()))?;
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    let circuit = rows
        .first()
        .is_some_and(|r| r.get(4).is_some_and(|c| !c.is_empty()));
    let (pc, mc) = if circuit { (4, 5) } else { (2, 3) };
    let bad = |line: usize| CliError::Data(format!("malformed predictions row {line}"));
    let parsed = rows
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if f.len() != 8 {
                return Err(bad(i));
            }
            Ok(PredictionRow {
                label: f[1].parse().map_err(|_| bad(i))?,
                predicted: f[pc].parse().map_err(|_| bad(i))?,
                margin: f[mc].parse().map_err(|_| bad(i))?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    if parsed.is_empty() {
        return Err(CliError::Data("predictions file has no rows".into()));
    }
    Ok((parsed, if circuit { "circuit" } else { "ideal" }))
}

pub fn report(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let (rows, source) = read_predictions(ctx)?;
    let classes = cfg.train.classes;
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let preds: Vec<usize> = rows.iter().map(|r| r.predicted).collect();
    let cm = confusion(&preds, &labels, classes)?;
    let margins: Vec<f64> = rows.iter().map(|r| r.margin).collect();
    let correct: Vec<bool> = rows
        .iter()
        .map(|r| r.predicted == usize::from(r.label))
        .collect();
    let hist = margin_histograms(&margins, &correct, cfg.report.bins)?;
    let n = cfg.pipeline.side * cfg.pipeline.side;
    let cost = cost_estimate(n, classes, &cfg.report.costs, cfg.device.vdd)?;
    let acc = cm.accuracy();
    let speed = cfg.report.speed_mhz;
    let comparison = comparison_csv(&cost, acc, cfg.report.node_nm, cfg.device.vdd, speed)?;

    write_text(&cfg.out("report_confusion.txt"), &ctx.hash, &cm.to_text())?;
    write_text(
        &cfg.out("confidence_histograms.csv"),
        &ctx.hash,
        &hist.to_csv(),
    )?;
    write_json(&cfg.out("cost.json"), &ctx.hash, &cost)?;
    write_text(&cfg.out("comparison.csv"), &ctx.hash, &comparison)?;
    write_json(
        &cfg.out("report.json"),
        &ctx.hash,
        &serde_json::json!({
            "source": source,
            "images": rows.len(),
            "accuracy": acc,
            "mean_margin_correct": hist.mean_correct,
            "mean_margin_incorrect": hist.mean_incorrect,
            "cost": cost,
        }),
    )?;
    println!("{source} accuracy over {} images: {acc:.2}%", rows.len());
    print!("{}", cm.to_text());
    let fmt = |m: Option<f64>| m.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "mean margin: correct {}, incorrect {}",
        fmt(hist.mean_correct),
        fmt(hist.mean_incorrect)
    );
    println!(
        "{} array devices, {} selectors, {:.0} um^2, {:.2} pJ/decision ({} constants)",
        cost.array_devices,
        cost.selectors,
        cost.area_um2,
        cost.energy_j * 1e12,
        cost.basis
    );
    Ok(())
}

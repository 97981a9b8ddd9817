//! Structure dose metrics, cumulative DVH curves, k-fold cross-validation
//! and report files.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::geometry::GridGeometry;
use crate::graph::overlapping_voxels;
use crate::model::{mse_loss, DoseModel, ModelConfig, ModelRegistry};
use crate::structures::{slot_name, STRUCTURES_OF_INTEREST};
use crate::train::{split_validation, train, TrainConfig, TrainLog};
use crate::volume::Mask;

/// Number of CDVH edges: 0 to 120% of prescription in 1% steps.
pub const CDVH_EDGES: usize = 121;

/// `(dose, weight)` pairs of the dose voxels touching a structure.
pub type WeightedDoses = Vec<(f64, f64)>;

/// Dose voxels weighted by their overlap volume with the structure's image
/// voxels; voxels that do not touch the structure are left out.
pub fn dose_on_structure(
    dose: &[f64],
    dose_geom: &GridGeometry,
    mask: &Mask,
    image_geom: &GridGeometry,
) -> Result<WeightedDoses> {
    if dose.len() != dose_geom.len() {
        return Err(Error::Dimension {
            expected: dose_geom.len(),
            found: dose.len(),
        });
    }
    let overlaps: Vec<_> = (0..dose_geom.len())
        .map(|j| overlapping_voxels(image_geom, &dose_geom.voxel_box(dose_geom.grid_index(j))))
        .collect();
    weighted_from_overlaps(dose, &overlaps, mask)
}

/// Same as [`dose_on_structure`] with the overlap table precomputed.
pub fn weighted_from_overlaps(dose: &[f64], overlaps: &[Vec<(usize, f64)>], mask: &Mask) -> Result<WeightedDoses> {
    let m = mask.as_slice();
    let out: WeightedDoses = dose
        .iter()
        .zip(overlaps)
        .filter_map(|(&d, ov)| {
            let w: f64 = ov.iter().filter(|(i, _)| m[*i]).map(|(_, v)| v).sum();
            (w > 0.0).then_some((d, w))
        })
        .collect();
    if out.is_empty() {
        return Err(Error::EmptyStructure);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub slot: usize,
    pub d_max_true: f64,
    pub d_mean_true: f64,
    pub d_max_pred: f64,
    pub d_mean_pred: f64,
    /// `|pred − true| / prescription`.
    pub norm_dmax_err: f64,
    pub norm_dmean_err: f64,
}

fn dmax_dmean(doses: &[(f64, f64)]) -> Result<(f64, f64)> {
    if doses.is_empty() {
        return Err(Error::EmptyStructure);
    }
    let max = doses.iter().map(|d| d.0).fold(f64::NEG_INFINITY, f64::max);
    let wsum: f64 = doses.iter().map(|d| d.1).sum();
    let mean = doses.iter().map(|(d, w)| d * w).sum::<f64>() / wsum;
    Ok((max, mean))
}

pub fn structure_metrics(slot: usize, pred: &[(f64, f64)], truth: &[(f64, f64)], prescription: f64) -> Result<StructureMetrics> {
    if !(prescription > 0.0) {
        return Err(Error::ZeroPrescription);
    }
    let (d_max_pred, d_mean_pred) = dmax_dmean(pred)?;
    let (d_max_true, d_mean_true) = dmax_dmean(truth)?;
    Ok(StructureMetrics {
        slot,
        d_max_true,
        d_mean_true,
        d_max_pred,
        d_mean_pred,
        norm_dmax_err: (d_max_pred - d_max_true).abs() / prescription,
        norm_dmean_err: (d_mean_pred - d_mean_true).abs() / prescription,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdvhCurve {
    pub slot: usize,
    pub edges_gy: Vec<f64>,
    /// Fraction of structure volume receiving at least each edge dose.
    pub values: Vec<f64>,
}

pub fn cdvh_edges(prescription: f64) -> Vec<f64> {
    (0..CDVH_EDGES).map(|k| k as f64 * 0.01 * prescription).collect()
}

pub fn cdvh(slot: usize, doses: &[(f64, f64)], prescription: f64) -> Result<CdvhCurve> {
    if doses.is_empty() {
        return Err(Error::EmptyStructure);
    }
    if !(prescription > 0.0) {
        return Err(Error::ZeroPrescription);
    }
    let edges = cdvh_edges(prescription);
    let total: f64 = doses.iter().map(|d| d.1).sum();
    let values = edges
        .iter()
        .map(|&e| doses.iter().filter(|(d, _)| *d >= e).map(|(_, w)| w).sum::<f64>() / total)
        .collect();
    Ok(CdvhCurve {
        slot,
        edges_gy: edges,
        values,
    })
}

/// Predicted and true curves and metrics of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEvaluation {
    pub case_id: String,
    pub prescription: f64,
    pub mse: f64,
    pub metrics: Vec<StructureMetrics>,
    pub predicted: Vec<CdvhCurve>,
    pub truth: Vec<CdvhCurve>,
}

/// Curves for every structure of interest present in the case.
pub fn structure_curves(sample: &Sample, dose: &[f64]) -> Result<Vec<CdvhCurve>> {
    let rx = sample.graph.prescription_dose;
    let mut out = Vec::new();
    for &slot in STRUCTURES_OF_INTEREST.iter() {
        match weighted_from_overlaps(dose, &sample.dose_overlaps, &sample.masks.masks[slot]) {
            Ok(wd) => out.push(cdvh(slot, &wd, rx)?),
            Err(Error::EmptyStructure) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn evaluate_case(sample: &Sample, pred: &[f64]) -> Result<CaseEvaluation> {
    let truth = sample.targets()?;
    let rx = sample.graph.prescription_dose;
    let mse = mse_loss(&[pred.to_vec()], &[truth])?;
    let mut metrics = Vec::new();
    for &slot in STRUCTURES_OF_INTEREST.iter() {
        let mask = &sample.masks.masks[slot];
        let p = match weighted_from_overlaps(pred, &sample.dose_overlaps, mask) {
            Ok(p) => p,
            Err(Error::EmptyStructure) => continue,
            Err(e) => return Err(e),
        };
        let t = weighted_from_overlaps(truth, &sample.dose_overlaps, mask)?;
        metrics.push(structure_metrics(slot, &p, &t, rx)?);
    }
    Ok(CaseEvaluation {
        case_id: sample.case_id.clone(),
        prescription: rx,
        mse,
        metrics,
        predicted: structure_curves(sample, pred)?,
        truth: structure_curves(sample, truth)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureError {
    pub slot: usize,
    /// Mean over test cases where the structure is present.
    pub norm_dmax_err: f64,
    pub norm_dmean_err: f64,
    pub cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub model: String,
    pub mse: f64,
    pub chosen_lr: Option<f64>,
    pub epochs_run: usize,
    pub test_cases: Vec<String>,
    pub structures: Vec<StructureError>,
    #[serde(skip)]
    pub log: TrainLog,
    #[serde(skip)]
    pub cases: Vec<CaseEvaluation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Arithmetic mean and sample standard deviation (0 for one value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub model: String,
    pub mse: MeanSd,
    /// `(slot, dmax error, dmean error)` over folds.
    pub structures: Vec<(usize, MeanSd, MeanSd)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub folds: Vec<FoldReport>,
    pub summary: CvSummary,
}

/// Seeded shuffle cut into `k` contiguous folds of near-equal size.
pub fn fold_partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::TooFewCases { k, cases: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = n / k + usize::from(f < n % k);
        folds.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

fn summarize_structures(cases: &[CaseEvaluation]) -> Vec<StructureError> {
    STRUCTURES_OF_INTEREST
        .iter()
        .filter_map(|&slot| {
            let ms: Vec<&StructureMetrics> = cases.iter().flat_map(|c| c.metrics.iter()).filter(|m| m.slot == slot).collect();
            if ms.is_empty() {
                return None;
            }
            let n = ms.len() as f64;
            Some(StructureError {
                slot,
                norm_dmax_err: ms.iter().map(|m| m.norm_dmax_err).sum::<f64>() / n,
                norm_dmean_err: ms.iter().map(|m| m.norm_dmean_err).sum::<f64>() / n,
                cases: ms.len(),
            })
        })
        .collect()
}

/// Predicts every sample and gathers MSE and structure errors as one fold.
pub fn evaluate_model(model: &dyn DoseModel, samples: &[Sample], fold: usize) -> Result<FoldReport> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut cases = Vec::with_capacity(samples.len());
    for s in samples {
        let p = model.predict(s)?;
        cases.push(evaluate_case(s, &p)?);
        preds.push(p);
    }
    let targets = samples.iter().map(|s| s.targets()).collect::<Result<Vec<_>>>()?;
    Ok(FoldReport {
        fold,
        model: model.kind().to_string(),
        mse: mse_loss(&preds, &targets)?,
        chosen_lr: None,
        epochs_run: 0,
        test_cases: samples.iter().map(|s| s.case_id.clone()).collect(),
        structures: summarize_structures(&cases),
        log: TrainLog::default(),
        cases,
    })
}

pub fn summarize(model: &str, folds: &[FoldReport]) -> CvSummary {
    let mse: Vec<f64> = folds.iter().map(|f| f.mse).collect();
    let structures = STRUCTURES_OF_INTEREST
        .iter()
        .filter_map(|&slot| {
            let errs: Vec<&StructureError> = folds.iter().flat_map(|f| f.structures.iter()).filter(|s| s.slot == slot).collect();
            if errs.is_empty() {
                return None;
            }
            let dmax: Vec<f64> = errs.iter().map(|e| e.norm_dmax_err).collect();
            let dmean: Vec<f64> = errs.iter().map(|e| e.norm_dmean_err).collect();
            Some((slot, MeanSd::of(&dmax), MeanSd::of(&dmean)))
        })
        .collect();
    CvSummary {
        model: model.to_string(),
        mse: MeanSd::of(&mse),
        structures,
    }
}

/// Trains `model_name` on k−1 folds and tests on the held-out fold, for
/// every fold. Within each fold a seeded share of the training cases is
/// held out for validation.
pub fn cross_validate(
    samples: &[Sample],
    k: usize,
    seed: u64,
    registry: &ModelRegistry,
    model_name: &str,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<CvOutcome> {
    let folds = fold_partition(samples.len(), k, seed)?;
    let mut reports = Vec::with_capacity(k);
    for (f, test_idx) in folds.iter().enumerate() {
        let rest: Vec<usize> = (0..samples.len()).filter(|i| !test_idx.contains(i)).collect();
        let fold_seed = seed.wrapping_add(f as u64 + 1);
        let (tr, va) = split_validation(rest.len(), train_cfg.val_fraction, fold_seed)?;
        let train_set: Vec<Sample> = tr.iter().map(|&i| samples[rest[i]].clone()).collect();
        let val_set: Vec<Sample> = va.iter().map(|&i| samples[rest[i]].clone()).collect();
        let mut model = registry.build(model_name, model_cfg, fold_seed)?;
        let cfg = TrainConfig {
            seed: fold_seed,
            ..train_cfg.clone()
        };
        let log = train(model.as_mut(), &train_set, &val_set, &cfg)?;
        let test: Vec<Sample> = test_idx.iter().map(|&i| samples[i].clone()).collect();
        let mut report = evaluate_model(model.as_ref(), &test, f)?;
        log::info!("{model_name} fold {f}: test mse {:.4}", report.mse);
        report.chosen_lr = log.selected_lr();
        report.epochs_run = log.epochs_run();
        report.log = log;
        reports.push(report);
    }
    let summary = summarize(model_name, &reports);
    Ok(CvOutcome {
        folds: reports,
        summary,
    })
}

fn curve_file_name(slot: usize) -> String {
    slot_name(slot).replace(' ', "_")
}

/// Writes `metrics.csv`, one `cdvh_<structure>.csv` per structure and a
/// matching `cdvh_<structure>.svg` plot. Curves come from `case`.
pub fn emit_report(out_dir: &Path, outcomes: &[&CvOutcome], case: Option<&CaseEvaluation>) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut csv = String::from("fold,model,mse");
    for &slot in STRUCTURES_OF_INTEREST.iter() {
        let n = curve_file_name(slot);
        let _ = write!(csv, ",{n}_dmax_err,{n}_dmean_err,{n}_dmax_err_pct,{n}_dmean_err_pct");
    }
    csv.push('\n');
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for o in outcomes {
        for f in &o.folds {
            let _ = write!(csv, "{},{},{:.6}", f.fold, f.model, f.mse);
            for &slot in STRUCTURES_OF_INTEREST.iter() {
                let s = f.structures.iter().find(|s| s.slot == slot);
                let (a, b) = (s.map(|s| s.norm_dmax_err), s.map(|s| s.norm_dmean_err));
                let _ = write!(
                    csv,
                    ",{},{},{},{}",
                    cell(a),
                    cell(b),
                    cell(a.map(|v| 100.0 * v)),
                    cell(b.map(|v| 100.0 * v))
                );
            }
            csv.push('\n');
        }
        for (label, pick) in [("mean", 0), ("sd", 1)] {
            let sel = |m: &MeanSd| if pick == 0 { m.mean } else { m.sd };
            let _ = write!(csv, "{label},{},{:.6}", o.summary.model, sel(&o.summary.mse));
            for &slot in STRUCTURES_OF_INTEREST.iter() {
                let s = o.summary.structures.iter().find(|s| s.0 == slot);
                let (a, b) = (s.map(|s| sel(&s.1)), s.map(|s| sel(&s.2)));
                let _ = write!(
                    csv,
                    ",{},{},{},{}",
                    cell(a),
                    cell(b),
                    cell(a.map(|v| 100.0 * v)),
                    cell(b.map(|v| 100.0 * v))
                );
            }
            csv.push('\n');
        }
    }
    write_file(&out_dir.join("metrics.csv"), &csv)?;

    if let Some(case) = case {
        for pred in &case.predicted {
            let truth = case.truth.iter().find(|t| t.slot == pred.slot);
            let name = curve_file_name(pred.slot);
            let mut text = format!("# case {} structure {}\n# predicted\ndose_gy,volume_fraction\n", case.case_id, slot_name(pred.slot));
            for (e, v) in pred.edges_gy.iter().zip(&pred.values) {
                let _ = writeln!(text, "{e:.4},{v:.6}");
            }
            if let Some(t) = truth {
                text.push_str("# true\ndose_gy,volume_fraction\n");
                for (e, v) in t.edges_gy.iter().zip(&t.values) {
                    let _ = writeln!(text, "{e:.4},{v:.6}");
                }
            }
            write_file(&out_dir.join(format!("cdvh_{name}.csv")), &text)?;
            write_file(&out_dir.join(format!("cdvh_{name}.svg")), &cdvh_svg(pred, truth, case.prescription))?;
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Plot with x from 0 to 120% of prescription and y from 0 to 100% volume.
pub fn cdvh_svg(pred: &CdvhCurve, truth: Option<&CdvhCurve>, prescription: f64) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 48.0;
    let x_of = |dose: f64| M + (dose / (1.2 * prescription)) * (W - 2.0 * M);
    let y_of = |frac: f64| H - M - frac * (H - 2.0 * M);
    let points = |c: &CdvhCurve| {
        c.edges_gy
            .iter()
            .zip(&c.values)
            .map(|(e, v)| format!("{:.2},{:.2}", x_of(*e), y_of(*v)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    );
    let _ = writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<path d=\"M{M} {M} L{M} {b} L{r} {b}\" stroke=\"black\" fill=\"none\"/>",
        b = H - M,
        r = W - M
    );
    for pct in [0, 20, 40, 60, 80, 100, 120] {
        let x = x_of(prescription * pct as f64 / 100.0);
        let _ = writeln!(svg, "<text x=\"{x:.2}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"middle\">{pct}%</text>", H - M + 14.0);
    }
    for pct in [0, 25, 50, 75, 100] {
        let y = y_of(pct as f64 / 100.0);
        let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{y:.2}\" font-size=\"10\" text-anchor=\"end\">{pct}%</text>", M - 4.0);
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"16\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        slot_name(pred.slot)
    );
    if let Some(t) = truth {
        let _ = writeln!(svg, "<polyline points=\"{}\" stroke=\"steelblue\" stroke-dasharray=\"5,3\" fill=\"none\"/>", points(t));
    }
    let _ = writeln!(svg, "<polyline points=\"{}\" stroke=\"firebrick\" fill=\"none\"/>", points(pred));
    svg.push_str("</svg>\n");
    svg
}

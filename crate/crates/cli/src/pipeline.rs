//! Subcommand bodies, kept free of argument parsing so tests can call them.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use dosegraph::bundle::{load_bundle, load_dir, save_bundle, BUNDLE_EXTENSION};
use dosegraph::conversion::{extract_pixel_features, segment_structures};
use dosegraph::dataset::{prepare_cases, Sample};
use dosegraph::encoders::PromptEncoder;
use dosegraph::evaluation::{cross_validate, emit_report, evaluate_model, summarize, CvOutcome};
use dosegraph::graph::build_graph;
use dosegraph::model::{DoseModel, ModelRegistry};
use dosegraph::phantom::{generate_cohort, PhantomConfig};
use dosegraph::tensor::{load_checkpoint, save_checkpoint};
use dosegraph::train::{split_validation, train};

use crate::config::RunConfig;

pub fn gen_phantoms(out: &Path, n: usize, seed: u64, boost_fraction: f64, noise_sd: f64) -> anyhow::Result<Vec<PathBuf>> {
    let base = PhantomConfig {
        noise_sd,
        ..Default::default()
    };
    let cases = generate_cohort(&base, n, seed, boost_fraction)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cases
        .iter()
        .map(|c| {
            let path = out.join(format!("{}.{BUNDLE_EXTENSION}", c.case_id));
            save_bundle(c, &path)?;
            Ok(path)
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct ConvertSummary {
    pub case_id: String,
    pub shape: [usize; 3],
    pub channels: usize,
    pub provenance: dosegraph::conversion::Provenance,
    pub structure_voxels: Vec<(String, usize)>,
}

pub fn convert(case_path: &Path, out: Option<&Path>) -> anyhow::Result<ConvertSummary> {
    let case = load_bundle(case_path)?;
    let masks = segment_structures(&case)?;
    let features = extract_pixel_features(&masks, &case.image_geom)?;
    if let Some(out) = out {
        features.save_dump(out)?;
    }
    Ok(ConvertSummary {
        case_id: case.case_id.clone(),
        shape: features.shape(),
        channels: dosegraph::conversion::FEATURE_CHANNELS,
        provenance: masks.provenance,
        structure_voxels: masks
            .masks
            .iter()
            .enumerate()
            .map(|(s, m)| (dosegraph::structures::slot_name(s).to_string(), m.count()))
            .collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct GraphSummary {
    pub case_id: String,
    pub threshold: f64,
    pub image_nodes: usize,
    pub dose_nodes: usize,
    pub edges: usize,
}

pub fn build_graph_cmd(case_path: &Path, threshold: f64, out: Option<&Path>) -> anyhow::Result<GraphSummary> {
    let case = load_bundle(case_path)?;
    let masks = segment_structures(&case)?;
    let features = extract_pixel_features(&masks, &case.image_geom)?;
    let graph = build_graph(&case, &features, &masks, threshold, dosegraph::graph::DEFAULT_PROMPT_WIDTH)?;
    if let Some(out) = out {
        graph.save_dump(out)?;
    }
    Ok(GraphSummary {
        case_id: case.case_id,
        threshold,
        image_nodes: graph.num_image(),
        dose_nodes: graph.num_dose(),
        edges: graph.edges.len(),
    })
}

fn load_samples(data: &Path, threshold: f64, encoder: &PromptEncoder) -> anyhow::Result<Vec<Sample>> {
    let cases = load_dir(data)?;
    if cases.is_empty() {
        bail!("no .{BUNDLE_EXTENSION} bundles in {}", data.display());
    }
    Ok(prepare_cases(&cases, threshold, encoder)?)
}

fn run_encoder(cfg: &RunConfig) -> PromptEncoder {
    PromptEncoder::with_endpoint(cfg.network.prompt_width, cfg.embed_url.clone())
}

/// Trains on every bundle in `data` with a seeded validation split, then
/// writes the checkpoint and a JSONL log beside it.
pub fn train_cmd(data: &Path, cfg: &RunConfig, out: &Path) -> anyhow::Result<PathBuf> {
    let samples = load_samples(data, cfg.threshold, &run_encoder(cfg))?;
    let (tr, va) = split_validation(samples.len(), cfg.training.val_fraction, cfg.seed)?;
    let train_set: Vec<Sample> = tr.iter().map(|&i| samples[i].clone()).collect();
    let val_set: Vec<Sample> = va.iter().map(|&i| samples[i].clone()).collect();
    let mut model = ModelRegistry::default().build(&cfg.model, &cfg.network, cfg.seed)?;
    let training = dosegraph::train::TrainConfig {
        seed: cfg.seed,
        ..cfg.training.clone()
    };
    let log = train(model.as_mut(), &train_set, &val_set, &training)?;
    save_checkpoint(out, &model.to_checkpoint()?)?;
    let log_path = out.with_extension("log.jsonl");
    log.write(&log_path)?;
    Ok(log_path)
}

pub fn load_model(checkpoint: &Path) -> anyhow::Result<Box<dyn DoseModel>> {
    let ckpt = load_checkpoint(checkpoint)?;
    Ok(ModelRegistry::default().from_checkpoint(&ckpt)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub case_id: String,
    pub prompt_text: String,
    pub dose_shape: [usize; 3],
    /// Gy per dose voxel in grid order (x slowest, z fastest).
    pub doses: Vec<f64>,
    pub warnings: Vec<String>,
}

pub fn predict_cmd(
    case_path: &Path,
    checkpoint: &Path,
    prompt_text: &str,
    threshold: f64,
    embed_url: Option<String>,
) -> anyhow::Result<Prediction> {
    let model = load_model(checkpoint)?;
    let case = load_bundle(case_path)?;
    let encoder = PromptEncoder::with_endpoint(model.config().prompt_width, embed_url);
    let (sample, warning) = Sample::from_case(&case, threshold, &encoder, prompt_text)?;
    Ok(Prediction {
        case_id: case.case_id.clone(),
        prompt_text: prompt_text.to_string(),
        dose_shape: case.dose_geom.shape(),
        doses: model.predict(&sample)?,
        warnings: warning.into_iter().collect(),
    })
}

fn first_case(outcome: &CvOutcome) -> Option<&dosegraph::evaluation::CaseEvaluation> {
    outcome.folds.iter().flat_map(|f| f.cases.iter()).min_by(|a, b| a.case_id.cmp(&b.case_id))
}

/// Scores a trained checkpoint on every bundle in `data` as a single fold.
pub fn evaluate_cmd(data: &Path, checkpoint: &Path, threshold: f64, report_dir: &Path) -> anyhow::Result<CvOutcome> {
    let model = load_model(checkpoint)?;
    let encoder = PromptEncoder::with_endpoint(model.config().prompt_width, None);
    let samples = load_samples(data, threshold, &encoder)?;
    let report = evaluate_model(model.as_ref(), &samples, 0)?;
    let outcome = CvOutcome {
        summary: summarize(model.kind(), std::slice::from_ref(&report)),
        folds: vec![report],
    };
    emit_report(report_dir, &[&outcome], first_case(&outcome))?;
    write_json(&report_dir.join("summary.json"), &outcome.summary)?;
    Ok(outcome)
}

pub fn cv_cmd(data: &Path, k: usize, cfg: &RunConfig, report_dir: &Path) -> anyhow::Result<CvOutcome> {
    let samples = load_samples(data, cfg.threshold, &run_encoder(cfg))?;
    let outcome = cross_validate(
        &samples,
        k,
        cfg.seed,
        &ModelRegistry::default(),
        &cfg.model,
        &cfg.network,
        &cfg.training,
    )?;
    emit_report(report_dir, &[&outcome], first_case(&outcome))?;
    for f in &outcome.folds {
        write_json(&report_dir.join(format!("fold_{}.json", f.fold)), f)?;
        f.log.write(&report_dir.join(format!("fold_{}.log.jsonl", f.fold)))?;
    }
    write_json(&report_dir.join("summary.json"), &outcome.summary)?;
    Ok(outcome)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

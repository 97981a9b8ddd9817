//! Cases prepared for training and evaluation.

use std::sync::Arc;

use crate::bundle::CaseBundle;
use crate::conversion::{extract_pixel_features, segment_structures, StructureMasks};
use crate::encoders::{PromptEmbedding, PromptEncoder};
use crate::error::{Error, Result};
use crate::graph::{build_graph, overlapping_voxels, Adjacency, ImageDoseGraph};

/// A graph together with the derived tables every model and metric needs.
#[derive(Debug, Clone)]
pub struct Sample {
    pub case_id: String,
    pub graph: ImageDoseGraph,
    pub adjacency: Arc<Adjacency>,
    /// Image voxels overlapping each dose voxel: `(image linear, volume)`.
    pub dose_overlaps: Arc<Vec<Vec<(usize, f64)>>>,
    pub masks: Arc<StructureMasks>,
    pub prompt_text: String,
    pub prompt: PromptEmbedding,
}

impl Sample {
    /// Converts a case and encodes `prompt_text` for the prompt node.
    /// Returns encoder warnings alongside.
    pub fn from_case(
        case: &CaseBundle,
        threshold: f64,
        encoder: &PromptEncoder,
        prompt_text: &str,
    ) -> Result<(Self, Option<String>)> {
        let masks = segment_structures(case)?;
        let features = extract_pixel_features(&masks, &case.image_geom)?;
        let graph = build_graph(case, &features, &masks, threshold, encoder.width)?;
        let dose_overlaps = (0..case.dose_geom.len())
            .map(|j| {
                let b = case.dose_geom.voxel_box(case.dose_geom.grid_index(j));
                overlapping_voxels(&case.image_geom, &b)
            })
            .collect();
        let (prompt, warning) = encoder.encode(prompt_text);
        let graph = graph.attach_prompt_embedding(&prompt.values)?;
        Ok((
            Self {
                case_id: case.case_id.clone(),
                adjacency: Arc::new(graph.adjacency()),
                graph,
                dose_overlaps: Arc::new(dose_overlaps),
                masks: Arc::new(masks),
                prompt_text: prompt_text.to_string(),
                prompt,
            },
            warning,
        ))
    }

    /// Same case with a different prompt; topology and tables are shared.
    pub fn with_prompt(&self, text: &str, prompt: PromptEmbedding) -> Result<Self> {
        Ok(Self {
            graph: self.graph.attach_prompt_embedding(&prompt.values)?,
            prompt_text: text.to_string(),
            prompt,
            ..self.clone()
        })
    }

    pub fn targets(&self) -> Result<&[f64]> {
        self.graph
            .targets
            .as_deref()
            .ok_or_else(|| Error::InvalidCase(format!("case {} has no ground-truth dose", self.case_id)))
    }

    pub fn num_dose(&self) -> usize {
        self.graph.num_dose()
    }
}

/// Prepares every case with its own prescription text as the prompt.
pub fn prepare_cases(cases: &[CaseBundle], threshold: f64, encoder: &PromptEncoder) -> Result<Vec<Sample>> {
    cases
        .iter()
        .map(|c| Sample::from_case(c, threshold, encoder, &c.prescription_text).map(|(s, _)| s))
        .collect()
}

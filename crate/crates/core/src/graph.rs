//! Heterogeneous image-dose graph.
//!
//! One node per image voxel, one per dose voxel and a single prompt node.
//! An image node and a dose node are joined when their overlap, measured
//! against the smaller voxel, strictly exceeds the threshold. The prompt node
//! is joined to every dose node. Edges are undirected.

use std::path::Path;

use serde::Serialize;

use crate::bundle::CaseBundle;
use crate::container::{self, DUMP_MAGIC};
use crate::conversion::{FeatureTensor, StructureMasks, FEATURE_CHANNELS};
use crate::error::{Error, Result};
use crate::geometry::{overlap_ratio, overlap_volume, Box3, GridGeometry};
use crate::structures::NUM_SLOTS;

pub const DEFAULT_THRESHOLD: f64 = 0.3;
pub const DEFAULT_PROMPT_WIDTH: usize = 64;
/// Width of a dose node's raw features: scaled prescription + slot one-hot.
pub const DOSE_FEATURES: usize = 1 + NUM_SLOTS;
/// Prescription doses enter dose-node features in units of 100 Gy.
pub const PRESCRIPTION_SCALE_GY: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum NodeKind {
    ImageVoxel,
    DoseVoxel,
    Prompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node {
    pub kind: NodeKind,
    /// Zero-based grid index for voxel nodes.
    pub grid_index: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDoseGraph {
    pub nodes: Vec<Node>,
    /// Undirected edges stored as `(image-or-prompt node, dose node)`.
    pub edges: Vec<(usize, usize)>,
    pub image_geom: GridGeometry,
    pub dose_geom: GridGeometry,
    /// Image raw features by image linear index (`n_image × 18`).
    pub image_features: Vec<f64>,
    /// Dose raw features by dose linear index (`n_dose × 16`).
    pub dose_features: Vec<f64>,
    /// Structure slot with maximal coverage for each dose voxel.
    pub dose_slots: Vec<Option<usize>>,
    pub prompt_features: Vec<f64>,
    /// Ground-truth dose (Gy) by dose linear index, when known.
    pub targets: Option<Vec<f64>>,
    pub prescription_dose: f64,
}

impl ImageDoseGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_image(&self) -> usize {
        self.image_geom.len()
    }

    pub fn num_dose(&self) -> usize {
        self.dose_geom.len()
    }

    pub fn prompt_width(&self) -> usize {
        self.prompt_features.len()
    }

    pub fn prompt_node(&self) -> usize {
        self.nodes
            .iter()
            .position(|n| n.kind == NodeKind::Prompt)
            .expect("graph has a prompt node")
    }

    /// Node ids of the dose nodes in dose-grid lexicographic order.
    pub fn dose_nodes_in_grid_order(&self) -> Vec<usize> {
        let mut ids = vec![usize::MAX; self.num_dose()];
        for (id, node) in self.nodes.iter().enumerate() {
            if node.kind == NodeKind::DoseVoxel {
                let g = node.grid_index.expect("dose node index");
                ids[self.dose_geom.linear_index(g)] = id;
            }
        }
        ids
    }

    /// Symmetric adjacency lists, neighbors sorted by node id.
    pub fn adjacency(&self) -> Adjacency {
        let n = self.num_nodes();
        let mut degree = vec![0usize; n];
        for &(a, b) in &self.edges {
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets[..n].to_vec();
        let mut neighbors = vec![0usize; offsets[n]];
        for &(a, b) in &self.edges {
            neighbors[fill[a]] = b;
            fill[a] += 1;
            neighbors[fill[b]] = a;
            fill[b] += 1;
        }
        for v in 0..n {
            neighbors[offsets[v]..offsets[v + 1]].sort_unstable();
        }
        Adjacency { offsets, neighbors }
    }

    /// Replaces the prompt node's raw features; topology is untouched.
    pub fn attach_prompt_embedding(&self, embedding: &[f64]) -> Result<Self> {
        if embedding.len() != self.prompt_width() {
            return Err(Error::Dimension {
                expected: self.prompt_width(),
                found: embedding.len(),
            });
        }
        if let Some(v) = embedding.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("prompt embedding value {v}")));
        }
        let mut g = self.clone();
        g.prompt_features = embedding.to_vec();
        Ok(g)
    }

    /// Relabels nodes: node `old` becomes node `perm[old]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument("not a permutation of the node set".into()));
        }
        let mut nodes = self.nodes.clone();
        for (old, &new) in perm.iter().enumerate() {
            nodes[new] = self.nodes[old];
        }
        let edges = self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        Ok(Self {
            nodes,
            edges,
            ..self.clone()
        })
    }

    /// Debug export: adjacency and raw features in the container format.
    pub fn save_dump(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header {
            kind: &'static str,
            node_kinds: Vec<NodeKind>,
            edges: usize,
            image_features: [usize; 2],
            dose_features: [usize; 2],
            prompt_width: usize,
            payload_order: [&'static str; 4],
        }
        let header = Header {
            kind: "image-dose-graph",
            node_kinds: self.nodes.iter().map(|n| n.kind).collect(),
            edges: self.edges.len(),
            image_features: [self.num_image(), FEATURE_CHANNELS],
            dose_features: [self.num_dose(), DOSE_FEATURES],
            prompt_width: self.prompt_width(),
            payload_order: ["edges", "image_features", "dose_features", "prompt_features"],
        };
        let mut payload = Vec::new();
        container::push_f64(
            &mut payload,
            self.edges.iter().flat_map(|&(a, b)| [a as f64, b as f64]),
        );
        container::push_f64(&mut payload, self.image_features.iter().copied());
        container::push_f64(&mut payload, self.dose_features.iter().copied());
        container::push_f64(&mut payload, self.prompt_features.iter().copied());
        container::write(path, DUMP_MAGIC, &header, &payload)
    }
}

/// Compressed adjacency lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    pub offsets: Vec<usize>,
    pub neighbors: Vec<usize>,
}

impl Adjacency {
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Image voxels with positive overlap against a box: `(linear index, volume)`,
/// in ascending linear order.
pub fn overlapping_voxels(geom: &GridGeometry, b: &Box3) -> Vec<(usize, f64)> {
    let [rx, ry, rz] = geom.candidate_ranges(b);
    let mut out = Vec::new();
    for x in rx {
        for y in ry.clone() {
            for z in rz.clone() {
                let v = overlap_volume(&geom.voxel_box([x, y, z]), b);
                if v > 0.0 {
                    out.push((geom.linear_index([x, y, z]), v));
                }
            }
        }
    }
    out
}

/// Slot whose image voxels cover the largest volume of `dose_box`; ties go
/// to the lowest slot, `None` when nothing overlaps.
pub fn dose_node_structure(masks: &StructureMasks, geom_image: &GridGeometry, dose_box: &Box3) -> Option<usize> {
    let coverage = structure_coverage(masks, &overlapping_voxels(geom_image, dose_box));
    argmax_slot(&coverage)
}

fn structure_coverage(masks: &StructureMasks, overlaps: &[(usize, f64)]) -> [f64; NUM_SLOTS] {
    let mut cov = [0.0; NUM_SLOTS];
    for &(linear, v) in overlaps {
        for (slot, mask) in masks.masks.iter().enumerate() {
            if mask.as_slice()[linear] {
                cov[slot] += v;
            }
        }
    }
    cov
}

fn argmax_slot(cov: &[f64; NUM_SLOTS]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (slot, &c) in cov.iter().enumerate() {
        if c > 0.0 && best.is_none_or(|b| c > cov[b]) {
            best = Some(slot);
        }
    }
    best
}

/// Builds the image-dose graph for one case. The prompt node starts with a
/// zero embedding of `prompt_width`.
pub fn build_graph(
    case: &CaseBundle,
    features: &FeatureTensor,
    masks: &StructureMasks,
    threshold: f64,
    prompt_width: usize,
) -> Result<ImageDoseGraph> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidThreshold(threshold));
    }
    let image_geom = &case.image_geom;
    let dose_geom = &case.dose_geom;
    if image_geom.is_empty() || dose_geom.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if features.shape() != image_geom.shape() || masks.shape() != image_geom.shape() {
        return Err(Error::shape(
            "build_graph",
            "features and masks must match the image grid",
        ));
    }
    let n_image = image_geom.len();
    let n_dose = dose_geom.len();
    let prompt = n_image + n_dose;

    let mut nodes = Vec::with_capacity(n_image + n_dose + 1);
    nodes.extend((0..n_image).map(|i| Node {
        kind: NodeKind::ImageVoxel,
        grid_index: Some(image_geom.grid_index(i)),
    }));
    nodes.extend((0..n_dose).map(|j| Node {
        kind: NodeKind::DoseVoxel,
        grid_index: Some(dose_geom.grid_index(j)),
    }));
    nodes.push(Node {
        kind: NodeKind::Prompt,
        grid_index: None,
    });

    let mut edges = Vec::new();
    let mut dose_features = Vec::with_capacity(n_dose * DOSE_FEATURES);
    let mut dose_slots = Vec::with_capacity(n_dose);
    for j in 0..n_dose {
        let dose_box = dose_geom.voxel_box(dose_geom.grid_index(j));
        let overlaps = overlapping_voxels(image_geom, &dose_box);
        for &(i, _) in &overlaps {
            let image_box = image_geom.voxel_box(image_geom.grid_index(i));
            if overlap_ratio(&image_box, &dose_box) > threshold {
                edges.push((i, n_image + j));
            }
        }
        let slot = argmax_slot(&structure_coverage(masks, &overlaps));
        dose_slots.push(slot);
        dose_features.push(case.prescription_dose / PRESCRIPTION_SCALE_GY);
        for s in 0..NUM_SLOTS {
            dose_features.push(if slot == Some(s) { 1.0 } else { 0.0 });
        }
    }
    edges.extend((0..n_dose).map(|j| (prompt, n_image + j)));

    Ok(ImageDoseGraph {
        nodes,
        edges,
        image_geom: image_geom.clone(),
        dose_geom: dose_geom.clone(),
        image_features: features.as_slice().to_vec(),
        dose_features,
        dose_slots,
        prompt_features: vec![0.0; prompt_width],
        targets: Some(case.dose.as_slice().iter().map(|&v| v as f64).collect()),
        prescription_dose: case.prescription_dose,
    })
}

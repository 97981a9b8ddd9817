//! Dose models and the registry that builds them by name.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conversion::{DISTANCE_CHANNEL, FEATURE_CHANNELS};
use crate::dataset::Sample;
use crate::encoders::{encode_image, AttentionParams, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{NodeKind, DEFAULT_PROMPT_WIDTH, DOSE_FEATURES};
use crate::tensor::{Bound, Checkpoint, ParamId, ParameterStore, Reduce, Tape, Tensor, Var};

/// Distances enter the networks in units of 100 mm, the same order of
/// magnitude as the other channels.
pub const DISTANCE_SCALE_MM: f64 = 100.0;

pub const DOSEGNN: &str = "dosegnn";
pub const DOSEGNN_NO_PROMPT: &str = "dosegnn-noprompt";
pub const MLP: &str = "mlp";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub aggregation: Reduce,
    pub dropout: f64,
    pub prompt_width: usize,
    /// Network outputs are multiplied by this to give Gy.
    pub output_scale: f64,
    pub encoder: EncoderConfig,
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            layers: 3,
            aggregation: Reduce::Mean,
            dropout: 0.0,
            prompt_width: DEFAULT_PROMPT_WIDTH,
            output_scale: 100.0,
            encoder: EncoderConfig::default(),
            mlp_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.mlp_hidden == 0 {
            return Err(Error::InvalidArgument("hidden width and layer count must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.encoder.validate()
    }
}

pub trait DoseModel: Send + Sync {
    fn kind(&self) -> &str;
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParameterStore;
    fn params_mut(&mut self) -> &mut ParameterStore;

    /// Predicted dose (Gy) per dose voxel as an `n_dose × 1` column in
    /// dose-grid order.
    fn forward(&self, tape: &mut Tape, bound: &Bound, sample: &Sample, train: bool, rng: &mut ChaCha8Rng)
        -> Result<Var>;

    fn predict(&self, sample: &Sample) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params().bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &bound, sample, false, &mut rng)?;
        Ok(tape.value(out).data().to_vec())
    }

    fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: self.kind().to_string(),
            config: serde_json::to_value(self.config())?,
            params: self.params().clone(),
        })
    }
}

/// Image features with the distance channel rescaled.
pub fn scaled_image_features(raw: &[f64]) -> Vec<f64> {
    let mut out = raw.to_vec();
    for row in out.chunks_exact_mut(FEATURE_CHANNELS) {
        row[DISTANCE_CHANNEL] /= DISTANCE_SCALE_MM;
    }
    out
}

/// Mean squared error over every dose voxel of every case.
pub fn mse_loss(predictions: &[Vec<f64>], targets: &[&[f64]]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Dimension {
            expected: targets.len(),
            found: predictions.len(),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in predictions.iter().zip(targets) {
        if p.len() != t.len() {
            return Err(Error::Dimension {
                expected: t.len(),
                found: p.len(),
            });
        }
        sum += p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += t.len();
    }
    if count == 0 {
        return Err(Error::InvalidArgument("mse over zero dose voxels".into()));
    }
    Ok(sum / count as f64)
}

/// Columnwise summary of node embeddings.
pub fn readout(tape: &mut Tape, h: Var, mode: Reduce) -> Result<Var> {
    tape.reduce_rows(h, mode)
}

/// One message-passing step: aggregate neighbor rows, then
/// `ReLU(concat(h, a) · W + b)`.
pub fn mp_layer(
    tape: &mut Tape,
    h: Var,
    adjacency: &std::sync::Arc<crate::graph::Adjacency>,
    mode: Reduce,
    w: Var,
    b: Var,
) -> Result<Var> {
    let a = tape.segment_reduce(h, adjacency.clone(), mode)?;
    let c = tape.concat_cols(&[h, a])?;
    let y = tape.linear(c, w, b)?;
    Ok(tape.relu(y))
}

struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn register(store: &mut ParameterStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            w: store.add_weight(&format!("{name}.w"), fan_in, fan_out, rng)?,
            b: store.add_filled(&format!("{name}.b"), fan_out, 0.0)?,
        })
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, bound.get(self.w), bound.get(self.b))
    }
}

/// Message-passing network over the image-dose graph.
pub struct DoseGnn {
    kind: &'static str,
    use_prompt: bool,
    cfg: ModelConfig,
    params: ParameterStore,
    encoder: AttentionParams,
    image_proj: Linear,
    dose_proj: Linear,
    prompt_proj: Linear,
    layers: Vec<Linear>,
    head: Linear,
}

impl DoseGnn {
    pub fn new(cfg: &ModelConfig, seed: u64, use_prompt: bool) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        let d = cfg.hidden;
        let encoder = AttentionParams::register(&mut params, "encoder", &cfg.encoder, &mut rng)?;
        let image_proj = Linear::register(
            &mut params,
            "proj.image",
            FEATURE_CHANNELS + cfg.encoder.d_model,
            d,
            &mut rng,
        )?;
        let dose_proj = Linear::register(&mut params, "proj.dose", DOSE_FEATURES, d, &mut rng)?;
        let prompt_proj = Linear::register(&mut params, "proj.prompt", cfg.prompt_width, d, &mut rng)?;
        let layers = (0..cfg.layers)
            .map(|t| Linear::register(&mut params, &format!("mp{t}"), 2 * d, d, &mut rng))
            .collect::<Result<_>>()?;
        let head = Linear::register(&mut params, "head", d, 1, &mut rng)?;
        Ok(Self {
            kind: if use_prompt { DOSEGNN } else { DOSEGNN_NO_PROMPT },
            use_prompt,
            cfg: cfg.clone(),
            params,
            encoder,
            image_proj,
            dose_proj,
            prompt_proj,
            layers,
            head,
        })
    }

    /// Per-type projected features gathered into graph node order.
    pub fn initial_features(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        sample: &Sample,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let g = &sample.graph;
        if g.prompt_width() != self.cfg.prompt_width {
            return Err(Error::Dimension {
                expected: self.cfg.prompt_width,
                found: g.prompt_width(),
            });
        }
        let (n_img, n_dose) = (g.num_image(), g.num_dose());
        let feats = scaled_image_features(&g.image_features);
        let enc = encode_image(
            tape,
            &feats,
            g.image_geom.shape(),
            &self.cfg.encoder,
            &self.encoder,
            bound,
            train,
            rng,
        )?;
        // The encoder's first residual starts after attention, so the raw
        // pixel features ride alongside its output into the projection.
        let raw = tape.constant(Tensor::matrix(n_img, FEATURE_CHANNELS, feats)?);
        let joined = tape.concat_cols(&[raw, enc])?;
        let h_img = self.image_proj.apply(tape, bound, joined)?;
        let h_img = tape.relu(h_img);
        let xd = tape.constant(Tensor::matrix(n_dose, DOSE_FEATURES, g.dose_features.clone())?);
        let h_dose = self.dose_proj.apply(tape, bound, xd)?;
        let h_dose = tape.relu(h_dose);
        let prompt = if self.use_prompt {
            g.prompt_features.clone()
        } else {
            vec![0.0; g.prompt_width()]
        };
        let xp = tape.constant(Tensor::matrix(1, g.prompt_width(), prompt)?);
        let h_p = self.prompt_proj.apply(tape, bound, xp)?;
        let h_p = tape.relu(h_p);
        let stacked = tape.concat_rows(&[h_img, h_dose, h_p])?;

        let rows: Vec<usize> = g
            .nodes
            .iter()
            .map(|n| match (n.kind, n.grid_index) {
                (NodeKind::ImageVoxel, Some(i)) => g.image_geom.linear_index(i),
                (NodeKind::DoseVoxel, Some(i)) => n_img + g.dose_geom.linear_index(i),
                _ => n_img + n_dose,
            })
            .collect();
        if rows.iter().enumerate().all(|(a, &b)| a == b) {
            return Ok(stacked);
        }
        tape.gather_rows(stacked, rows.into_iter().map(Some).collect())
    }

    /// Node embeddings after the last message-passing layer.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, sample: &Sample, train: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        let mut h = self.initial_features(tape, bound, sample, train, rng)?;
        for layer in &self.layers {
            h = mp_layer(
                tape,
                h,
                &sample.adjacency,
                self.cfg.aggregation,
                bound.get(layer.w),
                bound.get(layer.b),
            )?;
            h = tape.dropout(h, self.cfg.dropout, train, rng)?;
        }
        Ok(h)
    }
}

impl DoseModel for DoseGnn {
    fn kind(&self) -> &str {
        self.kind
    }

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn params(&self) -> &ParameterStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, sample: &Sample, train: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        let h = self.embed(tape, bound, sample, train, rng)?;
        let dose_rows = sample.graph.dose_nodes_in_grid_order().into_iter().map(Some).collect();
        let hd = tape.gather_rows(h, dose_rows)?;
        let y = self.head.apply(tape, bound, hd)?;
        Ok(tape.scale(y, self.cfg.output_scale))
    }
}

/// Per-dose-voxel multilayer perceptron without message passing.
pub struct MlpBaseline {
    cfg: ModelConfig,
    params: ParameterStore,
    fc: [Linear; 3],
}

pub const MLP_INPUTS: usize = DOSE_FEATURES + FEATURE_CHANNELS;

impl MlpBaseline {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        let h = cfg.mlp_hidden;
        let fc = [
            Linear::register(&mut params, "mlp.fc1", MLP_INPUTS, h, &mut rng)?,
            Linear::register(&mut params, "mlp.fc2", h, h, &mut rng)?,
            Linear::register(&mut params, "mlp.out", h, 1, &mut rng)?,
        ];
        Ok(Self {
            cfg: cfg.clone(),
            params,
            fc,
        })
    }

    /// Dose raw features followed by the mean image features of the image
    /// voxels overlapping each dose voxel (zeros when none do).
    pub fn inputs(sample: &Sample) -> Vec<f64> {
        let g = &sample.graph;
        let feats = scaled_image_features(&g.image_features);
        let mut out = Vec::with_capacity(g.num_dose() * MLP_INPUTS);
        for j in 0..g.num_dose() {
            out.extend_from_slice(&g.dose_features[j * DOSE_FEATURES..(j + 1) * DOSE_FEATURES]);
            let overlaps = &sample.dose_overlaps[j];
            let mut mean = [0.0; FEATURE_CHANNELS];
            for &(i, _) in overlaps {
                for (m, v) in mean.iter_mut().zip(&feats[i * FEATURE_CHANNELS..(i + 1) * FEATURE_CHANNELS]) {
                    *m += v;
                }
            }
            if !overlaps.is_empty() {
                mean.iter_mut().for_each(|m| *m /= overlaps.len() as f64);
            }
            out.extend_from_slice(&mean);
        }
        out
    }
}

impl DoseModel for MlpBaseline {
    fn kind(&self) -> &str {
        MLP
    }

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn params(&self) -> &ParameterStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, sample: &Sample, train: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        let x = tape.constant(Tensor::matrix(sample.num_dose(), MLP_INPUTS, Self::inputs(sample))?);
        let h = self.fc[0].apply(tape, bound, x)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, self.cfg.dropout, train, rng)?;
        let h = self.fc[1].apply(tape, bound, h)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, self.cfg.dropout, train, rng)?;
        let y = self.fc[2].apply(tape, bound, h)?;
        Ok(tape.scale(y, self.cfg.output_scale))
    }
}

pub type ModelFactory = fn(&ModelConfig, u64) -> Result<Box<dyn DoseModel>>;

/// Models selectable by name.
#[derive(Clone)]
pub struct ModelRegistry {
    factories: BTreeMap<String, ModelFactory>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register(DOSEGNN, |c, s| Ok(Box::new(DoseGnn::new(c, s, true)?)));
        r.register(DOSEGNN_NO_PROMPT, |c, s| Ok(Box::new(DoseGnn::new(c, s, false)?)));
        r.register(MLP, |c, s| Ok(Box::new(MlpBaseline::new(c, s)?)));
        r
    }
}

impl ModelRegistry {
    pub fn register(&mut self, name: &str, factory: ModelFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, cfg: &ModelConfig, seed: u64) -> Result<Box<dyn DoseModel>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::UnknownModel(format!("{name} (known: {})", self.names().join(", "))))?;
        factory(cfg, seed)
    }

    /// Rebuilds a model from a checkpoint and installs its parameters.
    pub fn from_checkpoint(&self, ckpt: &Checkpoint) -> Result<Box<dyn DoseModel>> {
        let cfg: ModelConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut model = self.build(&ckpt.model, &cfg, 0)?;
        let store = model.params_mut();
        if store.names() != ckpt.params.names() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint parameters do not match model `{}`",
                ckpt.model
            )));
        }
        store.restore(&ckpt.params.snapshot())?;
        Ok(model)
    }
}

//! Initial node features: windowed self-attention over image pixels and a
//! text encoder for the prompt node.

use std::hash::Hasher;
use std::time::Duration;

use fnv::FnvHasher;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conversion::FEATURE_CHANNELS;
use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamId, ParameterStore, Tape, Tensor, Var};

pub const EMBED_URL_ENV: &str = "DOSEGRAPH_EMBED_URL";

/// Window extent in pixels along x and y. Windows never cross slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub width: usize,
    pub height: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { width: 8, height: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub window: WindowConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            ffn_hidden: 64,
            dropout: 0.1,
            window: WindowConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model < 2 || self.ffn_hidden == 0 {
            return Err(Error::InvalidArgument("encoder widths must be positive (d_model >= 2)".into()));
        }
        if self.window.width == 0 || self.window.height == 0 {
            return Err(Error::InvalidArgument("window dims must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Parameter handles of the image encoder.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub ffn: FfnParams,
    pub d_k: usize,
}

#[derive(Debug, Clone)]
pub struct FfnParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl FfnParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1_gain: store.add_filled(&format!("{prefix}.ln1.gain"), d, 1.0)?,
            ln1_bias: store.add_filled(&format!("{prefix}.ln1.bias"), d, 0.0)?,
            w1: store.add_weight(&format!("{prefix}.fc1.w"), d, hidden, rng)?,
            b1: store.add_filled(&format!("{prefix}.fc1.b"), hidden, 0.0)?,
            w2: store.add_weight(&format!("{prefix}.fc2.w"), hidden, d, rng)?,
            b2: store.add_filled(&format!("{prefix}.fc2.b"), d, 0.0)?,
            ln2_gain: store.add_filled(&format!("{prefix}.ln2.gain"), d, 1.0)?,
            ln2_bias: store.add_filled(&format!("{prefix}.ln2.bias"), d, 0.0)?,
        })
    }
}

impl AttentionParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(Self {
            w_in: store.add_weight(&format!("{prefix}.in.w"), FEATURE_CHANNELS, d, rng)?,
            b_in: store.add_filled(&format!("{prefix}.in.b"), d, 0.0)?,
            w_q: store.add_weight(&format!("{prefix}.q"), d, d, rng)?,
            w_k: store.add_weight(&format!("{prefix}.k"), d, d, rng)?,
            w_v: store.add_weight(&format!("{prefix}.v"), d, d, rng)?,
            ffn: FfnParams::register(store, &format!("{prefix}.ffn"), d, cfg.ffn_hidden, rng)?,
            d_k: d,
        })
    }

    /// Looks up handles by the names `register` gives them.
    pub fn find(store: &ParameterStore, prefix: &str) -> Result<Self> {
        let get = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            store
                .id(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
        };
        let w_q = get("q")?;
        Ok(Self {
            w_in: get("in.w")?,
            b_in: get("in.b")?,
            d_k: store.value(w_q).cols(),
            w_q,
            w_k: get("k")?,
            w_v: get("v")?,
            ffn: FfnParams {
                ln1_gain: get("ffn.ln1.gain")?,
                ln1_bias: get("ffn.ln1.bias")?,
                w1: get("ffn.fc1.w")?,
                b1: get("ffn.fc1.b")?,
                w2: get("ffn.fc2.w")?,
                b2: get("ffn.fc2.b")?,
                ln2_gain: get("ffn.ln2.gain")?,
                ln2_bias: get("ffn.ln2.bias")?,
            },
        })
    }
}

/// Single-head scaled dot-product attention over the rows of `h`.
pub fn self_attention(tape: &mut Tape, h: Var, w_q: Var, w_k: Var, w_v: Var) -> Result<Var> {
    let q = tape.matmul(h, w_q)?;
    let k = tape.matmul(h, w_k)?;
    let v = tape.matmul(h, w_v)?;
    attend(tape, q, k, v)
}

fn attend(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let d_k = tape.value(q).cols();
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax_rows(scaled);
    tape.matmul(weights, v)
}

/// Dropout, residual, layer norm, FC, ReLU, dropout, FC, residual, layer
/// norm. The second residual carries the first layer norm's output.
pub fn ffn<R: Rng + ?Sized>(
    tape: &mut Tape,
    z: Var,
    p: &FfnParams,
    bound: &Bound,
    dropout: f64,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let dz = tape.dropout(z, dropout, train, rng)?;
    let u = tape.add(dz, z)?;
    let v = tape.layer_norm(u, bound.get(p.ln1_gain), bound.get(p.ln1_bias))?;
    let h = tape.linear(v, bound.get(p.w1), bound.get(p.b1))?;
    let h = tape.relu(h);
    let h = tape.dropout(h, dropout, train, rng)?;
    let w = tape.linear(h, bound.get(p.w2), bound.get(p.b2))?;
    let w = tape.add(w, v)?;
    tape.layer_norm(w, bound.get(p.ln2_gain), bound.get(p.ln2_bias))
}

/// Row layout of a slice-wise window partition.
#[derive(Debug, Clone)]
pub struct WindowLayout {
    /// Source pixel (linear index) for each padded row, `None` for padding.
    pub padded: Vec<Option<usize>>,
    /// Padded row of each pixel, by linear index.
    pub crop: Vec<Option<usize>>,
    pub window_rows: usize,
}

impl WindowLayout {
    pub fn new(shape: [usize; 3], window: WindowConfig) -> Result<Self> {
        let [nx, ny, nz] = shape;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::EmptyGrid);
        }
        let (ww, wh) = (window.width, window.height);
        if ww == 0 || wh == 0 {
            return Err(Error::InvalidArgument("window dims must be >= 1".into()));
        }
        let mut padded = Vec::new();
        let mut crop = vec![None; nx * ny * nz];
        for z in 0..nz {
            for wx in 0..nx.div_ceil(ww) {
                for wy in 0..ny.div_ceil(wh) {
                    for i in 0..ww {
                        for j in 0..wh {
                            let (x, y) = (wx * ww + i, wy * wh + j);
                            if x < nx && y < ny {
                                let linear = (x * ny + y) * nz + z;
                                crop[linear] = Some(padded.len());
                                padded.push(Some(linear));
                            } else {
                                padded.push(None);
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            padded,
            crop,
            window_rows: ww * wh,
        })
    }

    pub fn windows(&self) -> usize {
        self.padded.len() / self.window_rows
    }
}

/// Per-pixel embeddings (`n_pixels × d_k`, rows by image linear index).
#[allow(clippy::too_many_arguments)]
pub fn encode_image<R: Rng + ?Sized>(
    tape: &mut Tape,
    features: &[f64],
    shape: [usize; 3],
    cfg: &EncoderConfig,
    p: &AttentionParams,
    bound: &Bound,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let n: usize = shape.iter().product();
    if features.len() != n * FEATURE_CHANNELS {
        return Err(Error::shape(
            "encode_image",
            format!("{} values for {n} pixels", features.len()),
        ));
    }
    let layout = WindowLayout::new(shape, cfg.window)?;
    let mut padded = vec![0.0; layout.padded.len() * FEATURE_CHANNELS];
    for (r, src) in layout.padded.iter().enumerate() {
        if let Some(s) = src {
            padded[r * FEATURE_CHANNELS..(r + 1) * FEATURE_CHANNELS]
                .copy_from_slice(&features[s * FEATURE_CHANNELS..(s + 1) * FEATURE_CHANNELS]);
        }
    }
    let x = tape.constant(Tensor::matrix(layout.padded.len(), FEATURE_CHANNELS, padded)?);
    let h = tape.linear(x, bound.get(p.w_in), bound.get(p.b_in))?;
    // Projections are row-wise, so they run once over all windows.
    let q = tape.matmul(h, bound.get(p.w_q))?;
    let k = tape.matmul(h, bound.get(p.w_k))?;
    let v = tape.matmul(h, bound.get(p.w_v))?;
    let rows = layout.window_rows;
    let mut outputs = Vec::with_capacity(layout.windows());
    for w in 0..layout.windows() {
        let qs = tape.slice_rows(q, w * rows, rows)?;
        let ks = tape.slice_rows(k, w * rows, rows)?;
        let vs = tape.slice_rows(v, w * rows, rows)?;
        outputs.push(attend(tape, qs, ks, vs)?);
    }
    let z = tape.concat_rows(&outputs)?;
    let o = ffn(tape, z, &p.ffn, bound, cfg.dropout, train, rng)?;
    tape.gather_rows(o, layout.crop)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Hashed,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    pub values: Vec<f64>,
    pub source: EmbeddingSource,
}

/// Signed feature hashing of lowercase whitespace tokens, L2-normalized.
pub fn encode_prompt_hashed(text: &str, width: usize) -> PromptEmbedding {
    let mut values = vec![0.0; width];
    if width > 0 {
        for token in text.split_whitespace() {
            let mut h = FnvHasher::default();
            h.write(token.to_lowercase().as_bytes());
            let h = h.finish();
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            values[(h % width as u64) as usize] += sign;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
    }
    PromptEmbedding {
        values,
        source: EmbeddingSource::Hashed,
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
    width: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

fn request_remote(endpoint: &str, text: &str, width: usize, timeout: Duration) -> std::result::Result<Vec<f64>, String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into();
    let mut response = agent
        .post(endpoint)
        .send_json(EmbedRequest { text, width })
        .map_err(|e| format!("request failed: {e}"))?;
    let body: EmbedResponse = response
        .body_mut()
        .read_json()
        .map_err(|e| format!("malformed response: {e}"))?;
    if body.embedding.len() != width {
        return Err(format!("expected width {width}, got {}", body.embedding.len()));
    }
    if body.embedding.iter().any(|v| !v.is_finite()) {
        return Err("non-finite embedding values".into());
    }
    Ok(body.embedding)
}

/// Asks a remote embedding service; any failure falls back to the hashed
/// encoder and returns the reason as a warning.
pub fn fetch_remote_embedding(
    endpoint: &str,
    text: &str,
    width: usize,
    timeout: Duration,
) -> (PromptEmbedding, Option<String>) {
    match request_remote(endpoint, text, width, timeout) {
        Ok(values) => (
            PromptEmbedding {
                values,
                source: EmbeddingSource::Remote,
            },
            None,
        ),
        Err(reason) => {
            let warning = format!("remote embedding from {endpoint} unavailable ({reason}); used hashed encoder");
            log::warn!("{warning}");
            (encode_prompt_hashed(text, width), Some(warning))
        }
    }
}

/// Prompt encoder selection: hashed, or remote with hashed fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEncoder {
    pub width: usize,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
}

impl PromptEncoder {
    pub fn hashed(width: usize) -> Self {
        Self {
            width,
            endpoint: None,
            timeout_ms: 2000,
        }
    }

    /// Uses `endpoint` if given, else the environment variable.
    pub fn with_endpoint(width: usize, endpoint: Option<String>) -> Self {
        let endpoint = endpoint.or_else(|| std::env::var(EMBED_URL_ENV).ok().filter(|s| !s.is_empty()));
        Self {
            endpoint,
            ..Self::hashed(width)
        }
    }

    pub fn encode(&self, text: &str) -> (PromptEmbedding, Option<String>) {
        match &self.endpoint {
            Some(url) => fetch_remote_embedding(url, text, self.width, Duration::from_millis(self.timeout_ms)),
            None => (encode_prompt_hashed(text, self.width), None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_attention_case() {
        let mut t = Tape::new();
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let h = t.constant(eye.clone());
        let w = t.constant(eye);
        let z = self_attention(&mut t, h, w, w, w).unwrap();
        let row = t.value(z).row(0).to_vec();
        assert!((row[0] - 0.66967).abs() < 1e-4 && (row[1] - 0.33033).abs() < 1e-4);
    }

    #[test]
    fn single_row_attention_returns_v() {
        let mut t = Tape::new();
        let h = t.constant(Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap());
        let w = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let z = self_attention(&mut t, h, w, w, w).unwrap();
        let v = t.matmul(h, w).unwrap();
        assert_eq!(t.value(z), t.value(v));
    }

    #[test]
    fn zero_query_key_gives_column_mean() {
        let mut t = Tape::new();
        let h = t.constant(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 3.0, 2.0, 3.0]).unwrap());
        let zero = t.constant(Tensor::zeros(&[2, 2]));
        let eye = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let z = self_attention(&mut t, h, zero, zero, eye).unwrap();
        for r in 0..3 {
            let row = t.value(z).row(r);
            assert!((row[0] - 1.0).abs() < 1e-12 && (row[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn window_layout_pads_edges() {
        let l = WindowLayout::new([3, 2, 1], WindowConfig { width: 2, height: 2 }).unwrap();
        assert_eq!(l.windows(), 2);
        assert_eq!(l.padded.iter().filter(|p| p.is_none()).count(), 2);
        assert!(l.crop.iter().all(|c| c.is_some()));
    }

    #[test]
    fn hashed_prompt_contract() {
        assert!(encode_prompt_hashed("", 64).values.iter().all(|v| *v == 0.0));
        let a = encode_prompt_hashed("Boost the PTV", 64);
        assert_eq!(a, encode_prompt_hashed("boost  THE ptv", 64));
        let norm: f64 = a.values.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_ne!(encode_prompt_hashed("BOOST_PTV", 64), encode_prompt_hashed("", 64));
    }

    #[test]
    fn unreachable_endpoint_falls_back() {
        let (e, w) = fetch_remote_embedding("http://127.0.0.1:9/embed", "hi", 8, Duration::from_millis(200));
        assert_eq!(e.source, EmbeddingSource::Hashed);
        assert_eq!(e, encode_prompt_hashed("hi", 8));
        assert!(w.is_some());
    }

    #[test]
    fn full_window_equals_unwindowed_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = EncoderConfig {
            d_model: 4,
            ffn_hidden: 6,
            dropout: 0.0,
            window: WindowConfig { width: 3, height: 2 },
        };
        let mut store = ParameterStore::new();
        let p = AttentionParams::register(&mut store, "enc", &cfg, &mut rng).unwrap();
        let shape = [3, 2, 1];
        let feats: Vec<f64> = (0..6 * FEATURE_CHANNELS).map(|i| ((i * 7) % 11) as f64 / 11.0).collect();
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let out = encode_image(&mut t, &feats, shape, &cfg, &p, &b, false, &mut rng).unwrap();
        // Direct evaluation over all six pixels in linear order.
        let x = t.constant(Tensor::matrix(6, FEATURE_CHANNELS, feats).unwrap());
        let h = t.linear(x, b.get(p.w_in), b.get(p.b_in)).unwrap();
        let z = self_attention(&mut t, h, b.get(p.w_q), b.get(p.w_k), b.get(p.w_v)).unwrap();
        let o = ffn(&mut t, z, &p.ffn, &b, 0.0, false, &mut rng).unwrap();
        for (a, e) in t.value(out).data().iter().zip(t.value(o).data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

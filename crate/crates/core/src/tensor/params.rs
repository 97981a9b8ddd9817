use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};
use crate::container::{self, PayloadReader, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors plus their accumulated gradients.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    lookup: BTreeMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.lookup.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.lookup.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    /// `rows × cols` weight (rows = fan-in), uniform in ±1/√fan_in.
    pub fn add_weight<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) -> Result<ParamId> {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn add_filled(&mut self, name: &str, len: usize, value: f64) -> Result<ParamId> {
        self.add(name, Tensor::new(vec![len], vec![value; len])?)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        (&mut self.values[id.0], &self.grads[id.0])
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone(), true)).collect(),
        }
    }

    /// Adds the gradients left on `tape` for the bound leaves.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (g, &v) in self.grads.iter_mut().zip(&bound.vars) {
            if let Some(tg) = tape.grad(v) {
                g.data_mut().iter_mut().zip(tg.data()).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn set_all(&mut self, value: f64) {
        for t in &mut self.values {
            t.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.values.clone()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) -> Result<()> {
        if snapshot.len() != self.values.len() {
            return Err(Error::Dimension {
                expected: self.values.len(),
                found: snapshot.len(),
            });
        }
        for (dst, src) in self.values.iter_mut().zip(snapshot) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("restore", format!("{:?} vs {:?}", dst.shape(), src.shape())));
            }
            dst.clone_from(src);
        }
        Ok(())
    }
}

/// Tape handles for a store's parameters, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// On-disk model state: the model name, its serialized configuration and
/// every parameter.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: String,
    pub config: serde_json::Value,
    pub params: ParameterStore,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    model: String,
    config: serde_json::Value,
    params: Vec<ParamDecl>,
}

#[derive(Serialize, Deserialize)]
struct ParamDecl {
    name: String,
    shape: Vec<usize>,
}

const CHECKPOINT_FORMAT: &str = "dosegraph-checkpoint";

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        model: ckpt.model.clone(),
        config: ckpt.config.clone(),
        params: ckpt
            .params
            .ids()
            .map(|id| ParamDecl {
                name: ckpt.params.name(id).to_string(),
                shape: ckpt.params.value(id).shape().to_vec(),
            })
            .collect(),
    };
    let mut payload = Vec::new();
    for id in ckpt.params.ids() {
        container::push_f64(&mut payload, ckpt.params.value(id).data().iter().copied());
    }
    container::write(path, CHECKPOINT_MAGIC, &header, &payload)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, payload): (CheckpointHeader, _) = container::read(path, CHECKPOINT_MAGIC)?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(Error::MalformedHeader(format!(
            "unsupported checkpoint format {} v{}",
            header.format, header.version
        )));
    }
    let mut reader = PayloadReader::new(&payload);
    let mut params = ParameterStore::new();
    for decl in header.params {
        let n = decl.shape.iter().product();
        let data = reader.f64s(&decl.name, n)?;
        params.add(&decl.name, Tensor::new(decl.shape, data)?)?;
    }
    reader.finish()?;
    Ok(Checkpoint {
        model: header.model,
        config: header.config,
        params,
    })
}

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub type ParamId = usize;

/// A named learnable tensor. Names are dotted paths such as `vke.3.w_q`.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<F> {
    pub name: String,
    pub tensor: Tensor<F>,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    index: HashMap<String, ParamId>,
}

/// Per-parameter dense gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Grads<F> {
    pub(crate) slots: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.slots.get(id).and_then(|s| s.as_deref())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointLine {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    data: String,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor: tensor.with_grad() });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<F>> {
        Ok(&self.params[self.id(name)?].tensor)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        let id = self.id(name)?;
        Ok(&mut self.params[id].tensor)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Parameter names starting with `prefix`.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.params.iter().map(|p| p.name.as_str()).filter(move |n| n.starts_with(prefix))
    }

    pub fn accumulate(&mut self, grads: &Grads<F>) {
        for (p, g) in self.params.iter_mut().zip(&grads.slots) {
            if let Some(g) = g {
                p.tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), tensor: p.tensor.cast() })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Writes one JSON object per parameter: name, shape, dtype and the
    /// little-endian values hex-encoded.
    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut bytes = Vec::new();
        for p in &self.params {
            bytes.clear();
            p.tensor.data().iter().for_each(|x| x.put_le(&mut bytes));
            let line = CheckpointLine {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                dtype: F::DTYPE.to_string(),
                data: hex::encode(&bytes),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut store = ParamStore::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::DataLine { path: path.into(), line: i + 1, msg };
            let rec: CheckpointLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if rec.dtype != F::DTYPE {
                return Err(bad(format!("dtype {} but reading as {}", rec.dtype, F::DTYPE)));
            }
            let bytes = hex::decode(&rec.data).map_err(|e| bad(e.to_string()))?;
            if bytes.len() % F::WIDTH != 0 {
                return Err(bad("value bytes not a multiple of the element width".into()));
            }
            let data = bytes.chunks_exact(F::WIDTH).map(F::get_le).collect();
            let tensor = Tensor::new(rec.shape, data).map_err(|e| bad(e.to_string()))?;
            store.insert(rec.name, tensor).map_err(|e| bad(e.to_string()))?;
        }
        Ok(store)
    }
}

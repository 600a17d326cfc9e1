//! Named parameter tensors, freeze flags, and the per-forward [`Session`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Named collection of model tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

/// Entry of a checkpoint manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), Param { tensor, frozen: false });
    }

    /// Xavier-uniform weights, bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_xavier(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut ChaCha8Rng) {
        let (fan_out, fan_in) = match shape {
            [o, i] => (*o, *i),
            [n] => (*n, *n),
            _ => (shape[0], shape[1..].iter().product()),
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("valid shape"));
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::shape("set parameter", p.tensor.shape(), tensor.shape()));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.frozen)
    }

    /// Sets the freeze flag on every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Adds all entries of `other`, replacing same-named ones.
    pub fn extend(&mut self, other: ParamSet) {
        self.params.extend(other.params);
    }

    /// Subset of parameters whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Writes one `PJXT` file per tensor into `dir` and returns manifest entries.
    pub fn save_tensors(&self, dir: &Path) -> Result<Vec<ManifestEntry>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let mut entries = Vec::with_capacity(self.params.len());
        for (name, p) in &self.params {
            let file = format!("{name}.pjxt");
            p.tensor.save(&dir.join(&file))?;
            entries.push(ManifestEntry {
                name: name.clone(),
                file,
                shape: p.tensor.shape().to_vec(),
                frozen: p.frozen,
            });
        }
        Ok(entries)
    }

    pub fn load_tensors(dir: &Path, entries: &[ManifestEntry]) -> Result<Self> {
        let mut set = ParamSet::new();
        for e in entries {
            let t = Tensor::load(&dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::shape("checkpoint tensor", &e.shape, t.shape()));
            }
            set.params.insert(
                e.name.clone(),
                Param {
                    tensor: t,
                    frozen: e.frozen,
                },
            );
        }
        Ok(set)
    }
}

enum Phase {
    Eval,
    Train { rng: ChaCha8Rng, rate: f64 },
}

/// One forward pass: a fresh graph with parameters bound lazily by name.
pub struct Session<'p> {
    pub graph: Graph,
    params: &'p ParamSet,
    bound: BTreeMap<String, Var>,
    phase: Phase,
}

impl<'p> Session<'p> {
    pub fn eval(params: &'p ParamSet) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: BTreeMap::new(),
            phase: Phase::Eval,
        }
    }

    /// Training-mode session; dropout masks are drawn from `seed`.
    pub fn train(params: &'p ParamSet, seed: u64, dropout_rate: f64) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: BTreeMap::new(),
            phase: Phase::Train {
                rng: ChaCha8Rng::seed_from_u64(seed),
                rate: dropout_rate,
            },
        }
    }

    pub fn is_training(&self) -> bool {
        matches!(self.phase, Phase::Train { .. })
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    /// Graph node for parameter `name`, inserted on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.tensor(name)?.clone();
        let v = self.graph.parameter(name, t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, label: &str, value: Tensor) -> Var {
        self.graph.input(label, value)
    }

    /// Inverted dropout in training mode, identity otherwise.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        match &mut self.phase {
            Phase::Eval => Ok(x),
            Phase::Train { rate, .. } if *rate <= 0.0 => Ok(x),
            Phase::Train { rng, rate } => {
                let keep = 1.0 - *rate;
                let n = self.graph.value(x).numel();
                let mask = (0..n)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                self.graph.mask_mul(x, mask)
            }
        }
    }

    /// `(W, b)` nodes for a layer named `prefix` (`prefix.w`, `prefix.b`).
    pub fn layer(&mut self, prefix: &str) -> Result<(Var, Var)> {
        Ok((self.param(&format!("{prefix}.w"))?, self.param(&format!("{prefix}.b"))?))
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let (w, b) = self.layer(prefix)?;
        self.graph.linear(x, w, b)
    }

    /// Gradients of `loss` keyed by parameter name, for parameters it reaches.
    pub fn param_grads(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.graph.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect())
    }
}

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::arch::Architecture;
use crate::model::config::ModelConfig;
use crate::nn::ops::RunningStats;
use crate::tensor::{Real, Tensor};

/// Index of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a stored tensor; decides initialization and trainability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernel, drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Weight { fan_in: usize },
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

/// Named tensors in declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    /// Declares a tensor filled with its kind's neutral value
    /// (zeros, or ones for gamma / running variance).
    pub(crate) fn declare(&mut self, name: String, kind: ParamKind, shape: &[usize]) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let fill = match kind {
            ParamKind::Gamma | ParamKind::RunningVar => T::one(),
            _ => T::zero(),
        };
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(ParamEntry { name, kind, tensor: Tensor::full(shape, fill) });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|id| &mut self.entries[id.0].tensor)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].kind.trainable())
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind.trainable()).map(|e| e.tensor.numel()).sum()
    }

    pub fn running_stats(&self, mean: ParamId, var: ParamId) -> RunningStats<T> {
        RunningStats { mean: self.get(mean).data().to_vec(), var: self.get(var).data().to_vec() }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), kind: e.kind, tensor: e.tensor.cast() })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Draws every convolution kernel in declaration order from one stream.
    fn randomize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in &mut self.entries {
            if let ParamKind::Weight { fan_in } = e.kind {
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in e.tensor.data_mut() {
                    *v = T::from_f64(rng.random_range(-bound..bound));
                }
            }
        }
    }
}

/// Complete parameter set of one model instance together with its layout.
#[derive(Debug, Clone)]
pub struct ClawParams<T> {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub store: ParamStore<T>,
}

impl<T: Real> ClawParams<T> {
    /// Layout with neutral values (no random draws). Used when loading.
    pub fn skeleton(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let arch = Architecture::declare(config, &mut store);
        Ok(Self { config: config.clone(), arch, store })
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Same values in another precision.
    pub fn cast<U: Real>(&self) -> ClawParams<U> {
        ClawParams { config: self.config.clone(), arch: self.arch.clone(), store: self.store.cast() }
    }

    /// Checks every tensor is finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.store.entries().iter().find(|e| !e.tensor.is_finite()) {
            Some(e) => Err(Error::Value(format!("parameter {} is not finite", e.name))),
            None => Ok(()),
        }
    }
}

/// Deterministic initialization from `config.seed`: fan-in scaled uniform
/// kernels, unit gamma, zero beta and biases (gate biases included).
pub fn init_params<T: Real>(config: &ModelConfig) -> Result<ClawParams<T>> {
    let mut params = ClawParams::skeleton(config)?;
    params.store.randomize(config.seed);
    Ok(params)
}

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named dense array. Non-trainable entries are buffers (batch-norm running stats).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub trainable: bool,
}

/// Owns every learned parameter and buffer of a model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> ParamId {
        self.push(name.into(), shape, values, true)
    }

    pub fn add_buffer(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        values: Vec<f64>,
    ) -> ParamId {
        self.push(name.into(), shape, values, false)
    }

    fn push(
        &mut self,
        name: String,
        shape: &[usize],
        values: Vec<f64>,
        trainable: bool,
    ) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "{name}");
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            values,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].values
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].trainable)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn num_trainable_values(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.values.len())
            .sum()
    }

    /// Replace every value with those from `other`, requiring identical names and shapes.
    pub fn load_from(&mut self, other: &[ParamEntry]) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(Error::Load(format!(
                "checkpoint holds {} tensors, model has {}",
                other.len(),
                self.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(other) {
            if mine.name != theirs.name || mine.shape != theirs.shape {
                return Err(Error::Load(format!(
                    "tensor mismatch: model `{}` {:?} vs checkpoint `{}` {:?}",
                    mine.name, mine.shape, theirs.name, theirs.shape
                )));
            }
            mine.values.clone_from(&theirs.values);
        }
        Ok(())
    }
}

/// He-style uniform bound for a layer feeding a ReLU.
pub fn kaiming_uniform(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Narrower fan-in bound for output layers.
pub fn fan_in_uniform(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}
#[cfg(test)]
impl ParamId {
    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

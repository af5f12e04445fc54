use std::collections::HashMap;

use rand::Rng;

use super::tape::BufferUpdate;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named parameter tensors plus non-trainable buffers, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Overwrites every tensor with the same-named tensor of `other`.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .id_of(&e.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {}", e.name)))?;
            let src = other.get(src);
            if src.shape() != e.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?}, checkpoint holds {:?}",
                    e.name,
                    e.value.shape(),
                    src.shape()
                )));
            }
            e.value = src.clone();
        }
        Ok(())
    }

    /// Exponential moving average of batch statistics:
    /// `running = momentum·running + (1 - momentum)·batch`.
    pub fn apply_buffer_updates(&mut self, updates: &[BufferUpdate], momentum: f64) {
        for u in updates {
            for (id, batch) in [(u.mean_id, &u.batch_mean), (u.var_id, &u.batch_var)] {
                let buf = self.get_mut(id).data_mut();
                buf.iter_mut()
                    .zip(batch)
                    .for_each(|(r, b)| *r = momentum * *r + (1.0 - momentum) * b);
            }
        }
    }
}

/// Uniform `[-√(6/fan_in), √(6/fan_in)]` initialisation.
pub fn he_uniform(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let shape = shape.into();
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("size from shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_uniform_respects_bound_and_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let t = he_uniform([24, 10], 24, &mut a);
        assert_eq!(t, he_uniform([24, 10], 24, &mut b));
        let bound = 0.5;
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        assert!(t.data().iter().any(|v| v.abs() > 0.3));
    }

    #[test]
    fn names_are_unique_and_copy_checks_shapes() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros([2]), true).unwrap();
        assert!(s.add("w", Tensor::zeros([2]), true).is_err());
        let mut other = ParamStore::new();
        other.add("w", Tensor::new([2], vec![1.0, 2.0]).unwrap(), true).unwrap();
        s.copy_from(&other).unwrap();
        assert_eq!(s.get(s.id_of("w").unwrap()).data(), &[1.0, 2.0]);
        let mut bad = ParamStore::new();
        bad.add("w", Tensor::zeros([3]), true).unwrap();
        assert!(s.copy_from(&bad).is_err());
    }

    #[test]
    fn running_average_update() {
        let mut s = ParamStore::new();
        let m = s.add("m", Tensor::zeros([1]), false).unwrap();
        let v = s.add("v", Tensor::new([1], vec![1.0]).unwrap(), false).unwrap();
        s.apply_buffer_updates(
            &[BufferUpdate {
                mean_id: m,
                var_id: v,
                batch_mean: vec![10.0],
                batch_var: vec![3.0],
            }],
            0.9,
        );
        assert!((s.get(m).item() - 1.0).abs() < 1e-12);
        assert!((s.get(v).item() - 1.2).abs() < 1e-12);
    }
}

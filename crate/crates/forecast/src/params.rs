//! Named parameter store. Registration order is fixed by model construction,
//! which makes init, checkpoints, and optimizer state deterministic.

use std::collections::HashMap;

use ndgrad::{Array, RngStream, Scalar, Tape, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Array<T>,
    pub trainable: bool,
}

pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
    seed: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Swap the init seed (returns the old one). Used to give the frozen
    /// backbone its own fixed seed regardless of the model seed.
    pub fn set_init_seed(&mut self, seed: u64) -> u64 {
        std::mem::replace(&mut self.seed, seed)
    }

    pub fn register(&mut self, name: &str, value: Array<T>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name '{name}'")));
        }
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(ParamId(id))
    }

    /// Fresh init stream for the next parameter: keyed by store seed and
    /// registration index, so a fixed build order fixes every weight.
    fn init_rng(&self) -> RngStream {
        RngStream::new(self.seed, self.entries.len() as u64)
    }

    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, trainable: bool) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = self.init_rng();
        let value = Array::from_fn(&[fan_in, fan_out], |_| T::from_f64(rng.uniform_in(-limit, limit)));
        self.register(name, value, trainable)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, trainable: bool) -> Result<ParamId> {
        let mut rng = self.init_rng();
        let value = Array::from_fn(shape, |_| T::from_f64(rng.normal_scaled(0.0, std)));
        self.register(name, value, trainable)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<ParamId> {
        self.register(name, Array::zeros(shape), trainable)
    }

    pub fn constant_fill(&mut self, name: &str, shape: &[usize], v: f64, trainable: bool) -> Result<ParamId> {
        self.register(name, Array::full(shape, T::from_f64(v)), trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array<T> {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_value(&mut self, id: ParamId, value: Array<T>) -> Result<()> {
        if value.shape() != self.entries[id.0].value.shape() {
            return Err(Error::Contract(format!(
                "set_value: shape {:?} != {:?} for '{}'",
                value.shape(),
                self.entries[id.0].value.shape(),
                self.entries[id.0].name
            )));
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Bind parameters for a training step: trainable entries become tape
    /// leaves, frozen entries stay constants so no gradient ever reaches
    /// them.
    pub fn tracked(&self, tape: &Tape<T>) -> ParamVars<T> {
        ParamVars {
            vars: self
                .entries
                .iter()
                .map(|e| {
                    if e.trainable {
                        tape.leaf(e.value.clone())
                    } else {
                        Var::constant(e.value.clone())
                    }
                })
                .collect(),
        }
    }

    /// Bind parameters for inference: everything is a constant.
    pub fn constants(&self) -> ParamVars<T> {
        ParamVars {
            vars: self.entries.iter().map(|e| Var::constant(e.value.clone())).collect(),
        }
    }

    /// FNV-1a over the little-endian bytes of every parameter, in
    /// registration order. Used by determinism and frozen-backbone tests.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        let mut buf = Vec::new();
        for e in &self.entries {
            eat(e.name.as_bytes());
            buf.clear();
            for &v in e.value.data() {
                v.write_le(&mut buf);
            }
            eat(&buf);
        }
        hash
    }

    /// Checksum restricted to names under a prefix (e.g. the frozen
    /// backbone namespace).
    pub fn checksum_prefix(&self, prefix: &str) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut buf = Vec::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            for &b in e.name.as_bytes() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
            buf.clear();
            for &v in e.value.data() {
                v.write_le(&mut buf);
            }
            for &b in &buf {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        hash
    }
}

pub struct ParamVars<T: Scalar> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> ParamVars<T> {
    pub fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new(0);
        store.zeros("a.w", &[2], true).unwrap();
        assert!(store.zeros("a.w", &[2], true).is_err());
    }

    #[test]
    fn same_seed_same_init() {
        let build = || {
            let mut s = ParamStore::<f64>::new(42);
            s.xavier("l1.w", 4, 8, true).unwrap();
            s.normal("anchor", &[2, 3], 0.02, true).unwrap();
            s.checksum()
        };
        assert_eq!(build(), build());
        let mut other = ParamStore::<f64>::new(43);
        other.xavier("l1.w", 4, 8, true).unwrap();
        other.normal("anchor", &[2, 3], 0.02, true).unwrap();
        assert_ne!(build(), other.checksum());
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new(1);
        let w = store.xavier("w", 3, 3, true).unwrap();
        let f = store.xavier("frozen.w", 3, 3, false).unwrap();
        let tape = Tape::new();
        let pv = store.tracked(&tape);
        let x = Var::constant(Array::from_fn(&[1, 3], |i| i as f64));
        let loss = x
            .matmul(pv.var(w))
            .unwrap()
            .matmul(pv.var(f))
            .unwrap()
            .square()
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get(pv.var(w)).is_some());
        assert!(grads.get(pv.var(f)).is_none(), "frozen param must have no grad entry");
    }
}

//! Named parameter blocks shared by all model components.

use std::collections::BTreeMap;

use rand_chacha::ChaCha12Rng;

use crate::rng::uniform;

#[derive(Clone, Debug)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Flat store of named `f64` parameter blocks. Block order is insertion
/// order and is part of the checkpoint contract.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) {
        assert_eq!(data.len(), rows * cols, "param block {name}: bad shape");
        assert!(
            !self.index.contains_key(name),
            "duplicate param block {name}"
        );
        self.index.insert(name.to_string(), self.blocks.len());
        self.blocks.push(ParamBlock {
            name: name.to_string(),
            rows,
            cols,
            data,
        });
    }

    pub fn lookup(&self, name: &str) -> (usize, &ParamBlock) {
        let id = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown param block {name}"));
        (id, &self.blocks[id])
    }

    pub fn get(&self, name: &str) -> &ParamBlock {
        self.lookup(name).1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamBlock {
        let id = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown param block {name}"));
        &mut self.blocks[id]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    /// Zeroed gradient buffers matching the block layout.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(|b| vec![0.0; b.data.len()]).collect()
    }

    /// All values finite?
    pub fn all_finite(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.data.iter().all(|v| v.is_finite()))
    }
}

/// Xavier/Glorot uniform init.
pub fn xavier_uniform(rng: &mut ChaCha12Rng, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
    let a = gain * (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols).map(|_| uniform(rng, -a, a)).collect()
}

//! Named parameter storage.
//!
//! Every trainable (or frozen) array in a model lives in a [`ParamStore`];
//! models keep [`ParamId`] handles. Checksums and snapshots iterate in
//! insertion order, so they are deterministic.

use std::collections::HashMap;

use crate::error::{CdlError, Result};
use crate::tensor::Tensor;

#[derive(Copy, Clone, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct ParamId(pub u32);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len() as u32);
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0 as usize].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0 as usize].name
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0 as usize].trainable
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        let entry = &mut self.entries[id.0 as usize];
        assert_eq!(
            entry.value.shape(),
            value.shape(),
            "shape change on parameter {}",
            entry.name
        );
        entry.value = value;
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0 as usize].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<ParamId> {
        self.find(name)
            .ok_or_else(|| CdlError::Contract(format!("unknown parameter {name}")))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(|i| ParamId(i as u32))
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i as u32), e))
    }

    /// Bitwise checksum over the given parameters, in the order given.
    pub fn checksum_of(&self, ids: &[ParamId]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &id in ids {
            h ^= self.value(id).bit_checksum();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// (name, value) snapshot of the given parameters, used for freeze audits.
    pub fn snapshot(&self, ids: &[ParamId]) -> Vec<(String, Tensor)> {
        ids.iter()
            .map(|&id| (self.name(id).to_string(), self.value(id).clone()))
            .collect()
    }
}

/// Names of arrays that differ bitwise between two snapshots taken with the
/// same id list.
pub fn snapshot_diff(before: &[(String, Tensor)], after: &[(String, Tensor)]) -> Vec<String> {
    assert_eq!(before.len(), after.len(), "snapshot length mismatch");
    before
        .iter()
        .zip(after)
        .filter(|((na, ta), (nb, tb))| {
            assert_eq!(na, nb, "snapshot order mismatch");
            !ta.bit_eq(tb)
        })
        .map(|((n, _), _)| n.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_lookup_roundtrip() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(3.0), true);
        assert_eq!(store.find("w"), Some(id));
        assert_eq!(store.value(id).item(), 3.0);
        assert!(store.trainable(id));
    }

    #[test]
    fn snapshot_diff_names_first_change() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::scalar(1.0), true);
        let b = store.insert("b", Tensor::scalar(2.0), true);
        let ids = vec![a, b];
        let before = store.snapshot(&ids);
        store.set_value(b, Tensor::scalar(9.0));
        let diff = snapshot_diff(&before, &store.snapshot(&ids));
        assert_eq!(diff, vec!["b".to_string()]);
    }
}

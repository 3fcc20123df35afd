use std::collections::BTreeMap;

use super::mask::HardMask;
use crate::error::{Error, Result};

/// Saved hard masks of completed tasks for one plugin, keyed by
/// `(task, layer)`. Append-only: an entry is never replaced.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskStore {
    widths: [usize; 2],
    tau_min: f64,
    entries: BTreeMap<(usize, usize), HardMask>,
}

impl MaskStore {
    pub fn new(widths: [usize; 2], tau_min: f64) -> Self {
        MaskStore {
            widths,
            tau_min,
            entries: BTreeMap::new(),
        }
    }

    pub fn widths(&self) -> [usize; 2] {
        self.widths
    }

    pub fn tau_min(&self) -> f64 {
        self.tau_min
    }

    pub fn insert(&mut self, task: usize, layer: usize, mask: HardMask) -> Result<()> {
        let width = *self
            .widths
            .get(layer)
            .ok_or_else(|| Error::Lookup(format!("plugin has no layer {layer}")))?;
        if mask.len() != width {
            return Err(Error::dim(
                "mask_store",
                format!("layer {layer} has {width} neurons, mask has {}", mask.len()),
            ));
        }
        if self.entries.contains_key(&(task, layer)) {
            return Err(Error::Integrity(format!(
                "mask for task {task} layer {layer} is already saved"
            )));
        }
        self.entries.insert((task, layer), mask);
        Ok(())
    }

    pub fn get(&self, task: usize, layer: usize) -> Result<&HardMask> {
        self.entries
            .get(&(task, layer))
            .ok_or_else(|| Error::Lookup(format!("no saved mask for task {task} layer {layer}")))
    }

    pub fn contains_task(&self, task: usize) -> bool {
        (0..2).all(|l| self.entries.contains_key(&(task, l)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &HardMask)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Elementwise maximum of the hard masks of tasks `0..up_to_task` at `layer`.
/// The first task gets the all-zeros vector.
pub fn accumulate_masks(store: &MaskStore, layer: usize, up_to_task: usize) -> Result<Vec<f64>> {
    let width = *store
        .widths
        .get(layer)
        .ok_or_else(|| Error::Lookup(format!("plugin has no layer {layer}")))?;
    let mut acc = vec![0.0; width];
    for task in 0..up_to_task {
        let m = store.entries.get(&(task, layer)).ok_or_else(|| {
            Error::Integrity(format!(
                "mask for task {task} layer {layer} missing while accumulating up to task {up_to_task}"
            ))
        })?;
        max_in_place(&mut acc, &m.values);
    }
    Ok(acc)
}

pub(crate) fn max_in_place(acc: &mut [f64], other: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(other) {
        if b > *a {
            *a = b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hm(v: &[f64]) -> HardMask {
        HardMask { values: v.to_vec(), theta: 0.5 }
    }

    #[test]
    fn max_pool_examples() {
        let mut s = MaskStore::new([3, 2], 0.0025);
        assert_eq!(accumulate_masks(&s, 0, 0).unwrap(), vec![0.0; 3]);
        s.insert(0, 0, hm(&[1.0, 0.0, 0.0])).unwrap();
        s.insert(1, 0, hm(&[0.0, 1.0, 0.0])).unwrap();
        assert_eq!(accumulate_masks(&s, 0, 2).unwrap(), vec![1.0, 1.0, 0.0]);

        s.insert(0, 1, hm(&[1.0, 1.0])).unwrap();
        s.insert(1, 1, hm(&[1.0, 0.0])).unwrap();
        assert_eq!(accumulate_masks(&s, 1, 2).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn missing_task_is_integrity_error() {
        let mut s = MaskStore::new([2, 2], 0.0025);
        s.insert(1, 0, hm(&[1.0, 0.0])).unwrap();
        assert!(matches!(accumulate_masks(&s, 0, 2), Err(Error::Integrity(_))));
    }

    #[test]
    fn entries_are_immutable_and_sized() {
        let mut s = MaskStore::new([2, 3], 0.0025);
        s.insert(0, 0, hm(&[1.0, 0.0])).unwrap();
        assert!(matches!(s.insert(0, 0, hm(&[0.0, 0.0])), Err(Error::Integrity(_))));
        assert_eq!(s.get(0, 0).unwrap().values, vec![1.0, 0.0]);
        assert!(matches!(s.insert(0, 1, hm(&[1.0])), Err(Error::Dimension { .. })));
        assert!(matches!(s.get(3, 0), Err(Error::Lookup(_))));
    }
}

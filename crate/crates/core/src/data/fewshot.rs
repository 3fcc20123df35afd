use rand::seq::SliceRandom;

use super::synthetic::Example;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShotSplit {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

/// Per-class quota for a `k`-shot set: `k / classes` each, the remainder
/// going to the lowest class ids.
pub fn class_quota(k: usize, classes: usize) -> Vec<usize> {
    (0..classes).map(|c| k / classes + usize::from(c < k % classes)).collect()
}

/// Class-balanced `k`-example sample from `pool`; `test` is passed through.
pub fn sample_few_shot(pool: &[Example], test: &[Example], classes: usize, k: usize, seed: u64) -> Result<FewShotSplit> {
    if classes == 0 || k < classes {
        return Err(Error::contract(format!("few-shot size {k} below class count {classes}")));
    }
    if k > pool.len() {
        return Err(Error::contract(format!("few-shot size {k} exceeds the {} available examples", pool.len())));
    }
    let mut r = rng::rng(seed, &[rng::tag("few-shot")]);
    let mut train = Vec::with_capacity(k);
    for (c, &quota) in class_quota(k, classes).iter().enumerate() {
        let mut of_class: Vec<&Example> = pool.iter().filter(|e| e.label == c).collect();
        if of_class.len() < quota {
            return Err(Error::contract(format!(
                "class {c} has {} examples, {quota} requested",
                of_class.len()
            )));
        }
        of_class.shuffle(&mut r);
        train.extend(of_class[..quota].iter().map(|&e| e.clone()));
    }
    train.shuffle(&mut r);
    Ok(FewShotSplit { train, test: test.to_vec() })
}

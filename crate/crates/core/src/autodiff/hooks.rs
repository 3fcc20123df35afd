use super::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Gradient mask attached to one parameter. Entries are protection levels:
/// 1 blocks the gradient entirely, 0 leaves it untouched, and values in
/// between scale it by `1 - mask`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMaskHook {
    pub param: ParamId,
    pub mask: Vec<f64>,
}

impl GradMaskHook {
    pub fn protected_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1.0).count()
    }
}

/// `grad <- grad * (1 - mask)` for every hook. Fully protected entries are
/// written as exact zeros. Runs after backward and before the optimizer.
pub fn apply_grad_masks(store: &mut ParamStore, hooks: &[GradMaskHook]) -> Result<()> {
    for hook in hooks {
        let p = store.get_mut(hook.param);
        if p.tensor.numel() != hook.mask.len() {
            return Err(Error::dim(
                "apply_grad_masks",
                format!(
                    "mask of length {} for parameter {} with shape {:?}",
                    hook.mask.len(),
                    p.name,
                    p.tensor.shape()
                ),
            ));
        }
        if let Some(g) = p.tensor.grad_mut() {
            for (gi, &m) in g.iter_mut().zip(&hook.mask) {
                if m == 1.0 {
                    *gi = 0.0;
                } else if m != 0.0 {
                    *gi *= 1.0 - m;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Adam, AdamConfig, Tensor};

    fn store_with_grad(grad: &[f64]) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let mut t = Tensor::vector(vec![0.5; grad.len()]).unwrap();
        t.set_requires_grad(true);
        t.accumulate_grad(grad);
        let id = store.add("p", t).unwrap();
        (store, id)
    }

    #[test]
    fn masks_protected_entries() {
        let (mut store, id) = store_with_grad(&[2.0, 3.0]);
        apply_grad_masks(&mut store, &[GradMaskHook { param: id, mask: vec![1.0, 0.0] }]).unwrap();
        assert_eq!(store.tensor(id).grad().unwrap(), &[0.0, 3.0]);
    }

    #[test]
    fn zero_mask_is_noop() {
        let (mut store, id) = store_with_grad(&[2.0, -3.0]);
        apply_grad_masks(&mut store, &[GradMaskHook { param: id, mask: vec![0.0, 0.0] }]).unwrap();
        assert_eq!(store.tensor(id).grad().unwrap(), &[2.0, -3.0]);
    }

    #[test]
    fn full_mask_makes_adam_a_noop() {
        let (mut store, id) = store_with_grad(&[2.0, -3.0]);
        apply_grad_masks(&mut store, &[GradMaskHook { param: id, mask: vec![1.0, 1.0] }]).unwrap();
        assert_eq!(store.tensor(id).grad().unwrap(), &[0.0, 0.0]);
        let before = store.tensor(id).data().to_vec();
        Adam::new(AdamConfig::with_lr(0.1)).step(&mut store);
        assert_eq!(store.tensor(id).data(), &before[..]);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let (mut store, id) = store_with_grad(&[2.0, 3.0]);
        let err = apply_grad_masks(&mut store, &[GradMaskHook { param: id, mask: vec![1.0] }]);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }
}

use std::sync::OnceLock;

use super::*;
use crate::autodiff::{Adam, AdamConfig, ParamStore, Tensor};
use crate::data::SyntheticDomainRecipe;
use crate::error::Error;
use crate::model::param_digest;

/// alpha (3 classes), gamma (6) and delta (4) at smoke scale.
fn lab() -> &'static Lab {
    static LAB: OnceLock<Lab> = OnceLock::new();
    LAB.get_or_init(|| {
        let recipes: Vec<SyntheticDomainRecipe> =
            SyntheticDomainRecipe::suite(11, 64).into_iter().filter(|r| r.name != "beta").collect();
        Lab::synthetic(&recipes, TrainConfig::smoke(), 5).unwrap()
    })
}

/// Checkpoints after each of the first `n` domains.
fn checkpoints(variant: ExperimentVariant, n: usize) -> Vec<Checkpoint> {
    let lab = lab();
    let mut state = ContinualState::new(lab, variant, &[0, 1, 2]).unwrap();
    let mut log = Vec::new();
    (0..n)
        .map(|t| {
            post_train_domain(&mut state, lab, t, &mut log).unwrap();
            state.checkpoint(lab)
        })
        .collect()
}

#[test]
fn cpt_protects_old_tasks_bit_exactly() {
    let c = checkpoints(ExperimentVariant::Cpt, 3);
    for (task, before) in c.iter().enumerate().take(2) {
        let r = verify_protection(before, &c[2], task).unwrap();
        assert!(r.entries_checked > 0);
        assert_eq!((r.entries_changed, r.max_abs_delta), (0, 0.0), "task {task}");
    }
    let lab = lab();
    let early = eval_mlm(&c[0].model, ExperimentVariant::Cpt, lab, 0, 0).unwrap();
    let late = eval_mlm(&c[2].model, ExperimentVariant::Cpt, lab, 0, 0).unwrap();
    assert_eq!(early.to_bits(), late.to_bits());
}

#[test]
fn cpt_fine_tuning_is_identical_across_checkpoints() {
    let c = checkpoints(ExperimentVariant::Cpt, 3);
    let lab = lab();
    let a = fine_tune_end_task(&c[0].model, ExperimentVariant::Cpt, lab, 0, 0).unwrap();
    let b = fine_tune_end_task(&c[2].model, ExperimentVariant::Cpt, lab, 0, 0).unwrap();
    assert_eq!(a.digest, b.digest);
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(a.accuracy, b.accuracy);
    // The source checkpoint is not modified by fine-tuning.
    assert!(c[0].model.classifiers.is_empty());
}

/// Under soft masks an old task's entries move exactly where the soft
/// protection is below 1 in floating point.
#[test]
fn soft_masks_leak_exactly_where_protection_is_below_one() {
    let c = checkpoints(ExperimentVariant::SoftMask, 2);
    let (a, b) = (&c[0].model, &c[1].model);
    let tau_min = lab().config.tau_min;
    let (mut leaky, mut moved, mut sealed) = (0, 0, 0);
    for p in a.layout().unwrap().bank(0).unwrap().iter().flatten() {
        let soft = p.hooks_for(&soft_protection(&a.store, p, 0..1, tau_min).unwrap()).unwrap();
        for (hook, (id, covered)) in soft.iter().zip(task_entries(p, 0).unwrap()) {
            assert_eq!(hook.param, id);
            let (va, vb) = (a.store.tensor(id).data(), b.store.tensor(id).data());
            for (i, &k) in covered.iter().enumerate() {
                if !k {
                    continue;
                }
                let same = va[i].to_bits() == vb[i].to_bits();
                if hook.mask[i] == 1.0 {
                    assert!(same, "fully protected entry {i} of {id:?} moved");
                    sealed += 1;
                } else {
                    leaky += 1;
                    moved += usize::from(!same);
                }
            }
        }
    }
    assert!(sealed > 0);
    assert_eq!(moved, leaky, "{moved} of {leaky} leaky entries moved");
    let r = verify_protection(&c[0], &c[1], 0).unwrap();
    assert_eq!(r.entries_changed, moved);
}

#[test]
fn isolated_banks_leave_earlier_banks_untouched_and_shared_bank_drifts() {
    let bank_digest = |c: &Checkpoint, task: usize| {
        let ids: Vec<_> = c.model.layout().unwrap().bank(task).unwrap().iter().flatten().flat_map(|p| p.weights()).collect();
        param_digest(&c.model.store, &ids)
    };
    let one = checkpoints(ExperimentVariant::One, 2);
    assert_eq!(bank_digest(&one[0], 0), bank_digest(&one[1], 0));
    let ncl = checkpoints(ExperimentVariant::Ncl, 2);
    assert_ne!(bank_digest(&ncl[0], 0), bank_digest(&ncl[1], 0));
}

#[test]
fn domain_order_is_enforced() {
    let lab = lab();
    let mut state = ContinualState::new(lab, ExperimentVariant::Cpt, &[2, 0, 1]).unwrap();
    let mut log = Vec::new();
    assert!(matches!(post_train_domain(&mut state, lab, 1, &mut log), Err(Error::Integrity(_))));
    post_train_domain(&mut state, lab, 0, &mut log).unwrap();
    assert!(matches!(post_train_domain(&mut state, lab, 0, &mut log), Err(Error::Integrity(_))));
    assert_eq!(state.reset_markers, vec![0]);
    assert!(ContinualState::new(lab, ExperimentVariant::Cpt, &[0, 1]).is_err());
    assert!(ContinualState::new(lab, ExperimentVariant::Cpt, &[0, 0, 1]).is_err());
}

#[test]
fn fine_tuning_an_unlearned_task_is_a_lookup_error() {
    let c = checkpoints(ExperimentVariant::Cpt, 1);
    let r = fine_tune_end_task(&c[0].model, ExperimentVariant::Cpt, lab(), 1, 1);
    assert!(matches!(r, Err(Error::Lookup(_))), "{r:?}");
}

#[test]
fn stale_adam_moments_move_zero_gradient_entries() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::vector(vec![1.0, 1.0]).unwrap()).unwrap();
    store.set_trainable(id, true);
    let mut adam = Adam::new(AdamConfig::with_lr(0.1));
    store.tensor_mut(id).accumulate_grad(&[1.0, 1.0]);
    adam.step(&mut store);
    let after_first = store.tensor(id).data().to_vec();

    // Next domain: entry 0 is protected, so its gradient is exactly zero.
    let mut stale = store.clone();
    let mut adam_stale = adam.clone();
    stale.zero_grads();
    stale.tensor_mut(id).accumulate_grad(&[0.0, 1.0]);
    adam_stale.step(&mut stale);
    assert_ne!(stale.tensor(id).data()[0], after_first[0]);

    let mut fresh = store.clone();
    reset_optimizer_state(&mut adam);
    assert!(adam.is_clear());
    let snapshot = adam.clone();
    reset_optimizer_state(&mut adam);
    assert_eq!(adam, snapshot);
    fresh.zero_grads();
    fresh.tensor_mut(id).accumulate_grad(&[0.0, 1.0]);
    adam.step(&mut fresh);
    assert_eq!(fresh.tensor(id).data()[0].to_bits(), after_first[0].to_bits());
    assert_ne!(fresh.tensor(id).data()[1], after_first[1]);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let c = checkpoints(ExperimentVariant::Cpt, 2);
    let dir = tempfile::tempdir().unwrap();
    c[1].save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back, c[1]);
    let (m1, b1) = c[1].to_bytes().unwrap();
    let (m2, b2) = back.to_bytes().unwrap();
    assert_eq!((m1.as_bytes(), b1), (m2.as_bytes(), b2));
    let again = dir.path().join("again");
    back.save(&again).unwrap();
    for f in [MANIFEST_FILE, BLOB_FILE] {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(again.join(f)).unwrap());
    }
    let r = verify_protection(&c[0], &back, 0).unwrap();
    assert_eq!(r.entries_changed, 0);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let c = &checkpoints(ExperimentVariant::Cpt, 1)[0];
    let (manifest, blob) = c.to_bytes().unwrap();
    assert!(matches!(Checkpoint::from_bytes(&manifest, &blob[..blob.len() - 1]), Err(Error::Format(_))));
    let mut longer = blob.clone();
    longer.push(0);
    assert!(matches!(Checkpoint::from_bytes(&manifest, &longer), Err(Error::Format(_))));
    let bumped = manifest.replacen("\"format_version\": 1", "\"format_version\": 9", 1);
    assert!(matches!(Checkpoint::from_bytes(&bumped, &blob), Err(Error::Format(_))));
}

#[test]
fn verify_rejects_mismatched_checkpoints() {
    let c = checkpoints(ExperimentVariant::Cpt, 2);
    assert!(matches!(verify_protection(&c[0], &c[1], 1), Err(Error::Lookup(_))));
    let mut other = c[1].clone();
    other.config_digest = "0".into();
    assert!(matches!(verify_protection(&c[0], &other, 0), Err(Error::Contract(_))));
    let mut tampered = c[1].clone();
    let p = &mut tampered.model.layout_mut().unwrap().banks[0][0][0];
    let mut bits = p.masks.get(0, 0).unwrap().bits();
    bits[0] = !bits[0];
    p.masks = {
        let mut m = crate::clplugin::MaskStore::new(p.masks.widths(), p.masks.tau_min());
        for (&(t, l), mask) in p.masks.iter() {
            let v = if (t, l) == (0, 0) { crate::clplugin::HardMask::from_bits(&bits, mask.theta) } else { mask.clone() };
            m.insert(t, l, v).unwrap();
        }
        m
    };
    assert!(matches!(verify_protection(&c[0], &tampered, 0), Err(Error::Integrity(_))));
}

#[test]
fn backbone_baseline_never_touches_plugins() {
    let lab = lab();
    let out = fine_tune_backbone_only(lab, 2).unwrap();
    assert!(out.model.plugins.is_none());
    assert!((0.0..=1.0).contains(&out.accuracy));
    let again = fine_tune_backbone_only(lab, 2).unwrap();
    assert_eq!(out.digest, again.digest);
    assert_eq!(out.predictions, again.predictions);
}

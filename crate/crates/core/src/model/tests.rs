use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::autodiff::{Adam, AdamConfig, Graph};
use crate::clplugin::{HardMask, InsertionMode, Phase, TAU_MIN, THETA};
use crate::error::Error;
use crate::rng;

fn tiny_config() -> TransformerConfig {
    TransformerConfig {
        vocab_size: 20,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 16,
        max_seq_len: 8,
    }
}

fn plugin_config(mode: InsertionMode) -> PluginConfig {
    PluginConfig {
        mode,
        attention_hidden: 5,
        ffn_hidden: 8,
        n_tasks: 2,
        isolated: false,
        tau_min: TAU_MIN,
    }
}

fn model(seed: u64, mode: InsertionMode) -> PluggedModel {
    let mut r = rng::rng(seed, &[7]);
    let mut m = PluggedModel::new(tiny_config(), &mut r).unwrap();
    m.insert_plugins(&plugin_config(mode), &mut r).unwrap();
    m
}

fn random_batch(seed: u64, batch: usize, seq: usize) -> TokenBatch {
    let mut r = rng::rng(seed, &[8]);
    let seqs: Vec<Vec<usize>> = (0..batch)
        .map(|_| (0..seq).map(|_| r.gen_range(0..20)).collect())
        .collect();
    TokenBatch::new(&seqs, 0).unwrap()
}

fn every_other(rows: usize) -> Vec<Option<usize>> {
    (0..rows).map(|i| if i % 2 == 0 { Some(i % 20) } else { None }).collect()
}

fn set_masks(m: &mut PluggedModel, task: usize, f: impl Fn(usize) -> bool) {
    for pair in m.layout_mut().unwrap().bank_mut(task).unwrap() {
        for p in pair.iter_mut() {
            let [w0, w1] = p.widths();
            p.masks.insert(task, 0, HardMask::from_bits(&(0..w0).map(&f).collect::<Vec<_>>(), THETA)).unwrap();
            p.masks.insert(task, 1, HardMask::from_bits(&(0..w1).map(&f).collect::<Vec<_>>(), THETA)).unwrap();
        }
    }
}

fn mlm_logits(m: &PluggedModel, batch: &TokenBatch, route: Route) -> Vec<u64> {
    let mut g = Graph::new();
    let (logits, _) = m.mlm_logits(&mut g, batch, &every_other(batch.rows()), route).unwrap();
    g.value(logits).iter().map(|v| v.to_bits()).collect()
}

#[test]
fn config_validation() {
    assert!(tiny_config().validate().is_ok());
    let mut c = tiny_config();
    c.n_heads = 3;
    assert!(matches!(c.validate(), Err(Error::Contract(_))));
    assert!(TransformerConfig::desk(100).validate().is_ok());
}

#[test]
fn two_layers_get_four_plugins_and_double_insertion_fails() {
    let mut m = model(1, InsertionMode::Parallel);
    assert_eq!(m.layout().unwrap().count(), 4);
    let mut r = rng::rng(1, &[9]);
    assert!(matches!(m.insert_plugins(&plugin_config(InsertionMode::Parallel), &mut r), Err(Error::Contract(_))));
    let mut iso = plugin_config(InsertionMode::Parallel);
    iso.isolated = true;
    let mut m = PluggedModel::new(tiny_config(), &mut r).unwrap();
    m.insert_plugins(&iso, &mut r).unwrap();
    assert_eq!(m.layout().unwrap().count(), 8);
    assert_eq!(m.layout().unwrap().bank_index(1).unwrap(), 1);
}

#[test]
fn zero_masked_plugins_equal_bare_backbone() {
    for mode in [InsertionMode::Parallel, InsertionMode::Sequential] {
        let mut m = model(2, mode);
        set_masks(&mut m, 0, |_| false);
        // Task heads start as copies of the backbone head.
        let batch = random_batch(3, 3, 6);
        assert_eq!(
            mlm_logits(&m, &batch, Route::plugged(0, Phase::FineTuning { task: 0 })),
            mlm_logits(&m, &batch, Route::backbone(0))
        );
    }
}

#[test]
fn insertion_modes_differ() {
    let par = model(4, InsertionMode::Parallel);
    let seq = model(4, InsertionMode::Sequential);
    assert_eq!(param_digest(&par.store, &par.backbone.params()), param_digest(&seq.store, &seq.backbone.params()));
    let batch = random_batch(5, 2, 5);
    let route = Route::plugged(0, Phase::Unmasked);
    assert_ne!(mlm_logits(&par, &batch, route), mlm_logits(&seq, &batch, route));
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let mut m = model(6, InsertionMode::Parallel);
    m.store.tensor_mut(m.backbone.token_embedding).data_mut().fill(0.0);
    let batch = random_batch(7, 2, 4);
    let mut g = Graph::new();
    let loss = m.forward_mlm(&mut g, &batch, &every_other(8), Route::backbone(0)).unwrap();
    assert!((g.value(loss)[0] - 20f64.ln()).abs() < 1e-12);
}

#[test]
fn spiked_logit_gives_near_zero_loss() {
    let mut m = model(6, InsertionMode::Parallel);
    m.store.tensor_mut(m.backbone.mlm_bias).data_mut()[5] = 1000.0;
    let batch = random_batch(8, 1, 4);
    let labels = vec![None, Some(5), None, None];
    let mut g = Graph::new();
    let loss = m.forward_mlm(&mut g, &batch, &labels, Route::backbone(0)).unwrap();
    assert!(g.value(loss)[0] < 1e-12);
}

#[test]
fn mlm_without_masked_positions_is_contract_error() {
    let m = model(6, InsertionMode::Parallel);
    let batch = random_batch(9, 1, 4);
    let mut g = Graph::new();
    assert!(matches!(
        m.forward_mlm(&mut g, &batch, &[None; 4], Route::backbone(0)),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        m.forward_mlm(&mut g, &batch, &[None; 3], Route::backbone(0)),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn toy_corpus_loss_trends_down() {
    let mut m = model(10, InsertionMode::Parallel);
    m.set_trainable(TrainingStage::Pretraining).unwrap();
    let mut r = rng::rng(10, &[1]);
    let corpus: Vec<Vec<usize>> = (0..10)
        .map(|s| (0..6).map(|i| 4 + (s + i * 3) % 16).collect())
        .collect();
    let batch = TokenBatch::new(&corpus, 0).unwrap();
    let mut adam = Adam::new(AdamConfig::with_lr(1e-2));
    let mut losses = Vec::new();
    for _ in 0..50 {
        let labels: Vec<Option<usize>> = batch
            .ids
            .iter()
            .enumerate()
            .map(|(i, &t)| (i % 6 == 0 || r.gen_bool(0.3)).then_some(t))
            .collect();
        let masked: Vec<usize> = batch.ids.iter().zip(&labels).map(|(&t, l)| if l.is_some() { 2 } else { t }).collect();
        let input = TokenBatch { ids: masked, ..batch.clone() };
        m.store.zero_grads();
        let mut g = Graph::new();
        let loss = m.forward_mlm(&mut g, &input, &labels, Route::backbone(0)).unwrap();
        losses.push(g.value(loss)[0]);
        g.backward(loss, &mut m.store).unwrap();
        adam.step(&mut m.store);
    }
    let ma: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
    assert!(ma.windows(2).all(|w| w[1] < w[0]), "{ma:?}");
}

#[test]
fn zero_classifier_gives_log_two() {
    let mut m = model(11, InsertionMode::Parallel);
    let mut r = rng::rng(11, &[2]);
    m.attach_classifier(0, 2, &mut r).unwrap();
    assert!(m.attach_classifier(0, 2, &mut r).is_err());
    let c = m.classifier(0).unwrap().clone();
    m.store.tensor_mut(c.weight).data_mut().fill(0.0);
    let batch = random_batch(12, 2, 4);
    let mut g = Graph::new();
    let (logits, loss) = m.forward_classify(&mut g, &batch, &[0, 1], Route::plugged(0, Phase::Unmasked)).unwrap();
    assert_eq!(g.value(logits), &[0.0; 4]);
    assert!((g.value(loss)[0] - 2f64.ln()).abs() < 1e-15);
    assert!(matches!(
        m.forward_classify(&mut g, &batch, &[0, 2], Route::plugged(0, Phase::Unmasked)),
        Err(Error::Index { .. })
    ));
    assert!(matches!(m.classifier(1), Err(Error::Lookup(_))));
}

#[test]
fn different_task_masks_give_different_logits() {
    let mut m = model(13, InsertionMode::Parallel);
    set_masks(&mut m, 0, |i| i % 2 == 0);
    set_masks(&mut m, 1, |i| i % 3 == 0);
    let mut r = rng::rng(13, &[2]);
    m.attach_classifier(0, 3, &mut r).unwrap();
    let batch = random_batch(14, 2, 5);
    let logits = |task| {
        let mut g = Graph::new();
        let route = Route { task: 0, plugins: Some(Phase::InferenceOldTask { task }) };
        let z = m.classify_logits(&mut g, &batch, route).unwrap();
        g.value(z).to_vec()
    };
    assert_ne!(logits(0), logits(1));
}

#[test]
fn classification_is_batch_invariant() {
    let mut m = model(15, InsertionMode::Parallel);
    let mut r = rng::rng(15, &[2]);
    m.attach_classifier(0, 3, &mut r).unwrap();
    let seqs = vec![vec![3, 5, 6, 7], vec![3, 9, 10], vec![3, 11, 12, 13, 14, 15]];
    let route = Route::plugged(0, Phase::Unmasked);
    let mut g = Graph::new();
    let all = m.classify_logits(&mut g, &TokenBatch::new(&seqs, 0).unwrap(), route).unwrap();
    let joint = g.value(all).to_vec();
    for (i, s) in seqs.iter().enumerate() {
        let mut g = Graph::new();
        let one = m.classify_logits(&mut g, &TokenBatch::new(std::slice::from_ref(s), 0).unwrap(), route).unwrap();
        let solo: Vec<u64> = g.value(one).iter().map(|v| v.to_bits()).collect();
        let part: Vec<u64> = joint[i * 3..(i + 1) * 3].iter().map(|v| v.to_bits()).collect();
        assert_eq!(solo, part, "example {i}");
    }
}

fn post_train_steps(m: &mut PluggedModel, steps: usize, seed: u64) {
    m.set_trainable(TrainingStage::PostTraining { task: 0 }).unwrap();
    let mut adam = Adam::new(AdamConfig::with_lr(1e-2));
    for s in 0..steps {
        let batch = random_batch(seed + s as u64, 2, 6);
        m.store.zero_grads();
        let mut g = Graph::new();
        let loss = m
            .forward_mlm(&mut g, &batch, &every_other(12), Route::plugged(0, Phase::PostTraining { task: 0, tau: 0.5 }))
            .unwrap();
        g.backward(loss, &mut m.store).unwrap();
        adam.step(&mut m.store);
    }
}

#[test]
fn post_training_leaves_backbone_bit_identical() {
    let mut m = model(16, InsertionMode::Parallel);
    let backbone = m.backbone.params();
    let before = param_digest(&m.store, &backbone);
    let plugins_before: Vec<_> = m.layout().unwrap().iter().flat_map(|p| p.weights()).collect();
    let p_before = param_digest(&m.store, &plugins_before);
    post_train_steps(&mut m, 100, 100);
    assert_eq!(param_digest(&m.store, &backbone), before);
    assert_ne!(param_digest(&m.store, &plugins_before), p_before);
    // Task 1's embeddings are untouched while training task 0.
    let e1: Vec<_> = m.layout().unwrap().iter().map(|p| p.embedding(1, 0).unwrap()).collect();
    let fresh = model(16, InsertionMode::Parallel);
    assert_eq!(param_digest(&m.store, &e1), param_digest(&fresh.store, &e1));
}

#[test]
fn fine_tuning_a_copy_leaves_the_source_unchanged() {
    let source = model(17, InsertionMode::Parallel);
    let all: Vec<_> = source.store.iter().map(|(id, _)| id).collect();
    let before = param_digest(&source.store, &all);
    let mut copy = source.clone();
    let mut r = rng::rng(17, &[2]);
    copy.attach_classifier(0, 2, &mut r).unwrap();
    copy.set_trainable(TrainingStage::FineTuning { task: 0 }).unwrap();
    let batch = random_batch(18, 2, 4);
    let mut adam = Adam::new(AdamConfig::with_lr(1e-2));
    for _ in 0..5 {
        copy.store.zero_grads();
        let mut g = Graph::new();
        let (_, loss) = copy.forward_classify(&mut g, &batch, &[0, 1], Route::plugged(0, Phase::Unmasked)).unwrap();
        g.backward(loss, &mut copy.store).unwrap();
        adam.step(&mut copy.store);
    }
    assert_ne!(param_digest(&copy.store, &all), before);
    assert_eq!(param_digest(&source.store, &all), before);
}

#[test]
fn fixed_seed_training_is_deterministic() {
    let run = || {
        let mut m = model(19, InsertionMode::Parallel);
        post_train_steps(&mut m, 8, 200);
        let all: Vec<_> = m.store.iter().map(|(id, _)| id).collect();
        param_digest(&m.store, &all)
    };
    assert_eq!(run(), run());
}

#[test]
fn overlong_sequence_is_rejected() {
    let m = model(20, InsertionMode::Parallel);
    let batch = random_batch(21, 1, 9);
    let mut g = Graph::new();
    assert!(m.encode(&mut g, &batch, Route::backbone(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_masked_equivalence_holds_on_random_inputs(seed in 0u64..1000, batch in 1usize..4, seq in 1usize..8) {
        let mut m = model(seed, InsertionMode::Parallel);
        set_masks(&mut m, 1, |_| false);
        let b = random_batch(seed + 1, batch, seq);
        let mut g = Graph::new();
        let plugged = m.encode(&mut g, &b, Route::plugged(1, Phase::InferenceOldTask { task: 1 })).unwrap();
        let bare = m.encode(&mut g, &b, Route::backbone(1)).unwrap();
        prop_assert_eq!(g.value(plugged), g.value(bare));
    }
}

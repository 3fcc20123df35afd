use rand::Rng as _;

use super::vocab::{FIRST_WORD, MASK, PAD};
use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::rng::Rng;

pub const MASK_RATE: f64 = 0.15;

/// Inputs with some positions corrupted, plus the original id at those
/// positions (`None` elsewhere).
#[derive(Clone, Debug, PartialEq)]
pub struct MlmBatch {
    pub inputs: TokenBatch,
    pub labels: Vec<Option<usize>>,
}

impl MlmBatch {
    pub fn masked_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Selects `MASK_RATE` of each sequence's word positions (stochastic
/// rounding, at least one) and corrupts them 80/10/10 into the mask token,
/// a random word, or the original. Sequences without word positions are
/// dropped with a warning.
pub fn mlm_mask(sequences: &[Vec<usize>], vocab_size: usize, rng: &mut Rng) -> Result<MlmBatch> {
    if vocab_size <= FIRST_WORD {
        return Err(Error::contract("vocabulary has no words to sample"));
    }
    let mut kept = Vec::with_capacity(sequences.len());
    let mut labels_per_seq = Vec::with_capacity(sequences.len());
    for (n, seq) in sequences.iter().enumerate() {
        let candidates: Vec<usize> = (0..seq.len()).filter(|&i| seq[i] >= FIRST_WORD).collect();
        if candidates.is_empty() {
            log::warn!("sequence {n} has only reserved tokens; skipped for masking");
            continue;
        }
        let want = ((candidates.len() as f64 * MASK_RATE + rng.gen::<f64>()).floor() as usize).clamp(1, candidates.len());
        let chosen = rand::seq::index::sample(rng, candidates.len(), want);
        let mut input = seq.clone();
        let mut labels = vec![None; seq.len()];
        for c in chosen.iter() {
            let pos = candidates[c];
            labels[pos] = Some(seq[pos]);
            let u: f64 = rng.gen();
            if u < 0.8 {
                input[pos] = MASK;
            } else if u < 0.9 {
                input[pos] = rng.gen_range(FIRST_WORD..vocab_size);
            }
        }
        kept.push(input);
        labels_per_seq.push(labels);
    }
    if kept.is_empty() {
        return Err(Error::contract("no sequence in the batch can be masked"));
    }
    let inputs = TokenBatch::new(&kept, PAD)?;
    let mut labels = Vec::with_capacity(inputs.rows());
    for l in labels_per_seq {
        let pad = inputs.seq - l.len();
        labels.extend(l);
        labels.extend(std::iter::repeat(None).take(pad));
    }
    Ok(MlmBatch { inputs, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::CLS;
    use crate::rng;

    #[test]
    fn length_twenty_masks_three_on_average() {
        let mut r = rng::rng(1, &[]);
        let seq: Vec<usize> = (0..20).map(|i| 4 + i).collect();
        let total: usize = (0..1000)
            .map(|_| mlm_mask(std::slice::from_ref(&seq), 40, &mut r).unwrap().masked_count())
            .sum();
        let mean = total as f64 / 1000.0;
        assert!((2.4..=3.6).contains(&mean), "{mean}");
    }

    #[test]
    fn corruption_split_is_roughly_80_10_10() {
        let mut r = rng::rng(2, &[]);
        let seq: Vec<usize> = (0..40).map(|i| 4 + i).collect();
        let (mut mask, mut same, mut total) = (0, 0, 0);
        for _ in 0..2000 {
            let b = mlm_mask(std::slice::from_ref(&seq), 1000, &mut r).unwrap();
            for (i, l) in b.labels.iter().enumerate() {
                if let Some(orig) = l {
                    total += 1;
                    if b.inputs.ids[i] == MASK {
                        mask += 1;
                    } else if b.inputs.ids[i] == *orig {
                        same += 1;
                    }
                }
            }
        }
        let f = |n: usize| n as f64 / total as f64;
        assert!((f(mask) - 0.8).abs() < 0.02);
        assert!((f(same) - 0.1).abs() < 0.02);
    }

    #[test]
    fn labels_only_at_masked_word_positions() {
        let mut r = rng::rng(3, &[]);
        let seqs = vec![vec![CLS, 4, 5, 6, 7], vec![CLS, 8, 9]];
        let b = mlm_mask(&seqs, 12, &mut r).unwrap();
        assert_eq!(b.labels.len(), b.inputs.rows());
        for (i, l) in b.labels.iter().enumerate() {
            let (row, col) = (i / b.inputs.seq, i % b.inputs.seq);
            match l {
                Some(t) => assert_eq!(*t, seqs[row][col]),
                None => {
                    if col < seqs[row].len() {
                        assert_eq!(b.inputs.ids[i], seqs[row][col]);
                    }
                }
            }
            if col == 0 || col >= seqs[row].len() {
                assert!(l.is_none());
            }
        }
        for row in 0..2 {
            assert!(b.labels[row * b.inputs.seq..(row + 1) * b.inputs.seq].iter().any(|l| l.is_some()));
        }
    }

    #[test]
    fn fixed_seed_fixes_the_masking() {
        let seqs = vec![vec![CLS, 4, 5, 6, 7, 8, 9, 10]; 4];
        let a = mlm_mask(&seqs, 12, &mut rng::rng(4, &[])).unwrap();
        let b = mlm_mask(&seqs, 12, &mut rng::rng(4, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reserved_only_sequences_are_skipped() {
        let mut r = rng::rng(5, &[]);
        let b = mlm_mask(&[vec![CLS], vec![CLS, 4, 5]], 8, &mut r).unwrap();
        assert_eq!(b.inputs.batch, 1);
        assert!(mlm_mask(&[vec![CLS, PAD]], 8, &mut r).is_err());
    }
}

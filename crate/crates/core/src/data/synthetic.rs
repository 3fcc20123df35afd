use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const FANOUT: usize = 3;
const SUCCESSOR_WEIGHTS: [f64; FANOUT] = [0.5, 0.3, 0.2];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label: usize,
}

/// One domain: an unlabeled corpus plus a labeled end task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub classes: usize,
    pub few_shot_k: usize,
    pub corpus: Vec<String>,
    /// Pool the few-shot training set is drawn from.
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::contract(format!("domain {} has {} classes", self.name, self.classes)));
        }
        if self.few_shot_k < self.classes {
            return Err(Error::contract(format!(
                "domain {}: few-shot size {} below class count {}",
                self.name, self.few_shot_k, self.classes
            )));
        }
        if let Some(e) = self.train.iter().chain(&self.test).find(|e| e.label >= self.classes) {
            return Err(Error::Index { op: "domain labels", index: e.label, extent: self.classes });
        }
        if self.corpus.is_empty() || self.test.is_empty() {
            return Err(Error::contract(format!("domain {} needs a corpus and a test set", self.name)));
        }
        Ok(())
    }
}

/// Generator settings for a synthetic domain. Sentences are walks of a
/// shared base grammar with some positions replaced by words from the
/// domain's own block; the class decides which topic group those words
/// come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainRecipe {
    pub name: String,
    pub seed: u64,
    /// Seed of the base grammar, shared by every domain of one family.
    pub base_seed: u64,
    pub base_vocab: usize,
    /// Selects the exclusive vocabulary block; distinct per domain.
    pub block: usize,
    pub general_words: usize,
    pub topic_words_per_class: usize,
    pub classes: usize,
    pub corpus_size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Chance that a position is rewritten with a domain word.
    pub domain_rate: f64,
    /// Among rewritten positions, the share drawn from the class topic group.
    pub topic_share: f64,
    /// A topic rewrite covers this many consecutive positions, all drawn
    /// from the same class group.
    pub phrase_len: usize,
    pub few_shot_k: usize,
}

impl SyntheticDomainRecipe {
    /// Four domains with 3, 7, 6 and 4 classes and few-shot sizes 32, 56,
    /// 48 and 32, sized by `corpus_size` documents each.
    pub fn suite(base_seed: u64, corpus_size: usize) -> Vec<Self> {
        [("alpha", 3, 32), ("beta", 7, 56), ("gamma", 6, 48), ("delta", 4, 32)]
            .iter()
            .enumerate()
            .map(|(i, &(name, classes, k))| SyntheticDomainRecipe {
                name: name.to_string(),
                seed: rng::derive(base_seed, &[rng::tag(name)]),
                base_seed,
                base_vocab: 48,
                block: i,
                general_words: 12,
                topic_words_per_class: 24,
                classes,
                corpus_size,
                train_per_class: 24,
                test_per_class: 60,
                min_len: 8,
                max_len: 14,
                domain_rate: 0.15,
                topic_share: 0.6,
                phrase_len: 4,
                few_shot_k: k,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::contract(format!("recipe {} needs at least 2 classes", self.name)));
        }
        if self.base_vocab < FANOUT || self.general_words == 0 || self.topic_words_per_class == 0 || self.phrase_len == 0 {
            return Err(Error::contract(format!("recipe {} has an empty vocabulary block", self.name)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::contract(format!(
                "recipe {}: bad sentence length range {}..={}",
                self.name, self.min_len, self.max_len
            )));
        }
        for (what, p) in [("domain_rate", self.domain_rate), ("topic_share", self.topic_share)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::contract(format!("recipe {}: {what} {p} outside [0, 1]", self.name)));
            }
        }
        if self.corpus_size == 0 || self.test_per_class == 0 {
            return Err(Error::contract(format!("recipe {} needs a corpus and a test set", self.name)));
        }
        if self.few_shot_k < self.classes || self.few_shot_k > self.train_per_class * self.classes {
            return Err(Error::contract(format!(
                "recipe {}: few-shot size {} must lie in {}..={}",
                self.name,
                self.few_shot_k,
                self.classes,
                self.train_per_class * self.classes
            )));
        }
        Ok(())
    }

    pub fn general_word(&self, j: usize) -> String {
        format!("d{}g{j}", self.block)
    }

    pub fn topic_word(&self, class: usize, j: usize) -> String {
        format!("d{}c{class}t{j}", self.block)
    }

    pub fn exclusive_vocab(&self) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = (0..self.general_words).map(|j| self.general_word(j)).collect();
        for c in 0..self.classes {
            out.extend((0..self.topic_words_per_class).map(|j| self.topic_word(c, j)));
        }
        out
    }
}

pub fn base_word(i: usize) -> String {
    format!("w{i}")
}

/// Sparse first-order Markov chain over the base words.
#[derive(Clone, Debug)]
pub struct BaseGrammar {
    successors: Vec<[usize; FANOUT]>,
}

impl BaseGrammar {
    pub fn new(base_seed: u64, words: usize) -> Self {
        let mut r = rng::rng(base_seed, &[rng::tag("base-grammar")]);
        let all: Vec<usize> = (0..words).collect();
        let successors = (0..words)
            .map(|_| {
                let pick: Vec<usize> = all.choose_multiple(&mut r, FANOUT).copied().collect();
                [pick[0], pick[1], pick[2]]
            })
            .collect();
        BaseGrammar { successors }
    }

    pub fn words(&self) -> usize {
        self.successors.len()
    }

    pub fn walk(&self, len: usize, r: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut w = r.gen_range(0..self.words());
        out.push(w);
        while out.len() < len {
            let u: f64 = r.gen();
            let mut acc = 0.0;
            let mut slot = FANOUT - 1;
            for (i, p) in SUCCESSOR_WEIGHTS.iter().enumerate() {
                acc += p;
                if u < acc {
                    slot = i;
                    break;
                }
            }
            w = self.successors[w][slot];
            out.push(w);
        }
        out
    }

    pub fn sentence(&self, min_len: usize, max_len: usize, r: &mut Rng) -> String {
        let len = r.gen_range(min_len..=max_len);
        self.walk(len, r).into_iter().map(base_word).collect::<Vec<_>>().join(" ")
    }
}

/// Base-grammar sentences only, used to pre-train the backbone.
pub fn base_corpus(base_seed: u64, base_vocab: usize, docs: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<String> {
    let grammar = BaseGrammar::new(base_seed, base_vocab);
    let mut r = rng::rng(seed, &[rng::tag("base-corpus")]);
    (0..docs).map(|_| grammar.sentence(min_len, max_len, &mut r)).collect()
}

fn domain_sentence(recipe: &SyntheticDomainRecipe, grammar: &BaseGrammar, class: usize, r: &mut Rng) -> String {
    let len = r.gen_range(recipe.min_len..=recipe.max_len);
    let mut words: Vec<String> = grammar.walk(len, r).into_iter().map(base_word).collect();
    let phrase = |words: &mut [String], start: usize, r: &mut Rng| {
        for w in words.iter_mut().skip(start).take(recipe.phrase_len) {
            *w = recipe.topic_word(class, r.gen_range(0..recipe.topic_words_per_class));
        }
    };
    let mut i = 0;
    while i < len {
        if r.gen_bool(recipe.domain_rate) {
            if r.gen_bool(recipe.topic_share) {
                phrase(&mut words, i, r);
                i += recipe.phrase_len;
                continue;
            }
            words[i] = recipe.general_word(r.gen_range(0..recipe.general_words));
        }
        i += 1;
    }
    let forced = r.gen_range(0..len);
    phrase(&mut words, forced, r);
    words.join(" ")
}

fn labeled(recipe: &SyntheticDomainRecipe, grammar: &BaseGrammar, per_class: usize, r: &mut Rng) -> Vec<Example> {
    let mut out: Vec<Example> = (0..recipe.classes)
        .flat_map(|c| std::iter::repeat(c).take(per_class))
        .map(|label| Example { text: String::new(), label })
        .collect();
    for e in out.iter_mut() {
        e.text = domain_sentence(recipe, grammar, e.label, r);
    }
    out.shuffle(r);
    out
}

pub fn generate_domain(recipe: &SyntheticDomainRecipe) -> Result<DomainSpec> {
    recipe.validate()?;
    let grammar = BaseGrammar::new(recipe.base_seed, recipe.base_vocab);
    let mut r = rng::rng(recipe.seed, &[rng::tag("corpus")]);
    let corpus = (0..recipe.corpus_size)
        .map(|_| {
            let c = r.gen_range(0..recipe.classes);
            domain_sentence(recipe, &grammar, c, &mut r)
        })
        .collect();
    let mut r = rng::rng(recipe.seed, &[rng::tag("labeled")]);
    let train = labeled(recipe, &grammar, recipe.train_per_class, &mut r);
    let test = labeled(recipe, &grammar, recipe.test_per_class, &mut r);
    Ok(DomainSpec {
        name: recipe.name.clone(),
        classes: recipe.classes,
        few_shot_k: recipe.few_shot_k,
        corpus,
        train,
        test,
    })
}

/// Exclusive blocks must not share a token.
pub fn check_disjoint(recipes: &[SyntheticDomainRecipe]) -> Result<()> {
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for r in recipes {
        for w in r.exclusive_vocab() {
            if !seen.insert(w.clone()) {
                return Err(Error::Integrity(format!("token {w} of domain {} is not exclusive", r.name)));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::split_words;

    fn small(block: usize) -> SyntheticDomainRecipe {
        let mut r = SyntheticDomainRecipe::suite(5, 200)[0].clone();
        r.block = block;
        r
    }

    #[test]
    fn exclusive_blocks_are_disjoint() {
        let suite = SyntheticDomainRecipe::suite(1, 10);
        check_disjoint(&suite).unwrap();
        for (i, a) in suite.iter().enumerate() {
            for b in &suite[i + 1..] {
                assert_eq!(a.exclusive_vocab().intersection(&b.exclusive_vocab()).count(), 0);
            }
        }
        assert!(check_disjoint(&[small(0), small(0)]).is_err());
    }

    #[test]
    fn corpus_size_is_exact_and_deterministic() {
        let mut r = small(0);
        r.corpus_size = 10_000;
        let a = generate_domain(&r).unwrap();
        assert_eq!(a.corpus.len(), 10_000);
        assert_eq!(a, generate_domain(&r).unwrap());
        r.seed += 1;
        assert_ne!(a.corpus, generate_domain(&r).unwrap().corpus);
    }

    #[test]
    fn fewer_than_two_classes_is_rejected() {
        let mut r = small(0);
        r.classes = 1;
        r.few_shot_k = 1;
        assert!(matches!(generate_domain(&r), Err(Error::Contract(_))));
    }

    #[test]
    fn sentences_stay_in_range_and_carry_their_topic() {
        let r = small(2);
        let d = generate_domain(&r).unwrap();
        d.validate().unwrap();
        assert_eq!(d.train.len(), r.train_per_class * r.classes);
        for e in d.train.iter().chain(&d.test) {
            let words = split_words(&e.text);
            assert!((r.min_len..=r.max_len).contains(&words.len()));
            let prefix = format!("d2c{}t", e.label);
            assert!(words.iter().any(|w| w.starts_with(&prefix)));
            assert!(words.iter().all(|w| !w.starts_with("d2c") || w.starts_with(&prefix)));
        }
    }

    #[test]
    fn grammar_is_shared_by_base_seed() {
        let a = BaseGrammar::new(9, 20);
        let b = BaseGrammar::new(9, 20);
        assert_eq!(a.successors, b.successors);
        let c = base_corpus(9, 20, 5, 4, 6, 1);
        assert!(c.iter().all(|s| s.split(' ').all(|w| w.starts_with('w'))));
    }
}

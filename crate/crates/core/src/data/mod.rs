//! Tokenizer, synthetic domains, MLM masking and few-shot sampling.

mod fewshot;
mod files;
mod masking;
mod synthetic;
mod vocab;

pub use fewshot::{class_quota, sample_few_shot, FewShotSplit};
pub use files::{load_corpus, load_labeled, parse_corpus, parse_labeled, LabeledFile};
pub use masking::{mlm_mask, MlmBatch, MASK_RATE};
pub use synthetic::{
    base_corpus, base_word, check_disjoint, generate_domain, BaseGrammar, DomainSpec, Example, SyntheticDomainRecipe,
};
pub use vocab::{detokenize, normalize, split_words, tokenize, Tokenized, Vocab, CLS, FIRST_WORD, MASK, PAD, UNK};

/// Vocabulary over every word in `texts`, keeping all words seen at least once.
pub fn build_vocab<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocab {
    let words: Vec<String> = texts.into_iter().flat_map(split_words).collect();
    Vocab::build(words.iter().map(String::as_str), 1)
}

/// Every text a domain contributes to the vocabulary.
pub fn domain_texts(d: &DomainSpec) -> impl Iterator<Item = &str> {
    d.corpus
        .iter()
        .map(String::as_str)
        .chain(d.train.iter().chain(&d.test).map(|e| e.text.as_str()))
}

/// Token ids for each text; empty texts come back as a lone sentinel.
pub fn tokenize_all<'a>(texts: impl IntoIterator<Item = &'a str>, vocab: &Vocab, max_len: usize) -> Vec<Vec<usize>> {
    texts.into_iter().map(|t| tokenize(t, vocab, max_len).ids).collect()
}

//! Experiment and recipe files (TOML). Everything is resolved and
//! validated here, before any training starts.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::{Path, PathBuf};

use cpt_core::continual::{ExperimentVariant, TrainConfig};
use cpt_core::data::{
    base_corpus, check_disjoint, generate_domain, load_corpus, load_labeled, DomainSpec, Example, SyntheticDomainRecipe,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Spanned;

use crate::error::{CliError, CliResult};

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Four-domain synthetic suite with optional shared overrides.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSection {
    pub base_seed: u64,
    pub corpus_size: usize,
    /// Subset of the suite, in this order.
    pub domains: Option<Vec<String>>,
    pub base_vocab: Option<usize>,
    pub general_words: Option<usize>,
    pub topic_words_per_class: Option<usize>,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub min_len: Option<usize>,
    pub max_len: Option<usize>,
    pub domain_rate: Option<f64>,
    pub topic_share: Option<f64>,
    pub phrase_len: Option<usize>,
}

impl SuiteSection {
    fn recipes(&self) -> Result<Vec<SyntheticDomainRecipe>, String> {
        let mut all = SyntheticDomainRecipe::suite(self.base_seed, self.corpus_size);
        if let Some(names) = &self.domains {
            let mut picked = Vec::with_capacity(names.len());
            for n in names {
                let r = all
                    .iter()
                    .find(|r| &r.name == n)
                    .ok_or_else(|| format!("unknown suite domain {n}; expected alpha, beta, gamma or delta"))?;
                picked.push(r.clone());
            }
            all = picked;
        }
        for r in all.iter_mut() {
            macro_rules! set {
                ($($f:ident),*) => { $( if let Some(v) = self.$f { r.$f = v; } )* };
            }
            set!(base_vocab, general_words, topic_words_per_class, train_per_class, test_per_class, min_len, max_len, domain_rate, topic_share, phrase_len);
        }
        Ok(all)
    }
}

/// A domain given as files: corpus lines and `label<TAB>text` tasks.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDomain {
    pub name: String,
    pub corpus: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub few_shot_k: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    output: Spanned<String>,
    seeds: Option<Spanned<Vec<u64>>>,
    variants: Spanned<Vec<Spanned<String>>>,
    orders: Option<Vec<Spanned<Vec<String>>>>,
    #[serde(default)]
    baseline: bool,
    save_checkpoints: Option<bool>,
    train: Option<Spanned<BTreeMap<String, Spanned<toml::Value>>>>,
    synthetic: Option<Spanned<SuiteSection>>,
    #[serde(default)]
    recipe: Vec<Spanned<SyntheticDomainRecipe>>,
    #[serde(default)]
    domain: Vec<Spanned<FileDomain>>,
    pretrain_corpus: Option<Spanned<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecipeFile {
    suite: Option<Spanned<SuiteSection>>,
    #[serde(default)]
    recipe: Vec<Spanned<SyntheticDomainRecipe>>,
    base_docs: Option<usize>,
}

/// Fully resolved experiment: data loaded, presets merged.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub path: PathBuf,
    pub output: PathBuf,
    pub seeds: Vec<u64>,
    pub variants: Vec<ExperimentVariant>,
    pub orders: Vec<Vec<String>>,
    pub baseline: bool,
    pub save_checkpoints: bool,
    pub train: TrainConfig,
    pub domains: Vec<DomainSpec>,
    pub base_corpus: Vec<String>,
}

#[derive(Serialize)]
struct DigestView<'a> {
    seeds: &'a [u64],
    variants: &'a [ExperimentVariant],
    orders: &'a [Vec<String>],
    baseline: bool,
    train: &'a TrainConfig,
    domains: &'a [DomainSpec],
    base_corpus: &'a [String],
}

/// Summary written next to the results.
#[derive(Serialize)]
pub struct ResolvedSummary<'a> {
    pub digest: String,
    pub seeds: &'a [u64],
    pub variants: &'a [ExperimentVariant],
    pub orders: &'a [Vec<String>],
    pub baseline: bool,
    pub train: &'a TrainConfig,
    pub domains: Vec<DomainSummaryLine>,
    pub base_corpus_docs: usize,
}

#[derive(Serialize)]
pub struct DomainSummaryLine {
    pub name: String,
    pub classes: usize,
    pub few_shot_k: usize,
    pub corpus_docs: usize,
    pub train_pool: usize,
    pub test: usize,
}

impl ExperimentConfig {
    /// Hash of everything that influences results; the output path is excluded.
    pub fn digest(&self) -> String {
        let view = DigestView {
            seeds: &self.seeds,
            variants: &self.variants,
            orders: &self.orders,
            baseline: self.baseline,
            train: &self.train,
            domains: &self.domains,
            base_corpus: &self.base_corpus,
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&view).expect("config serialises")))
    }

    pub fn summary(&self) -> ResolvedSummary<'_> {
        ResolvedSummary {
            digest: self.digest(),
            seeds: &self.seeds,
            variants: &self.variants,
            orders: &self.orders,
            baseline: self.baseline,
            train: &self.train,
            domains: self
                .domains
                .iter()
                .map(|d| DomainSummaryLine {
                    name: d.name.clone(),
                    classes: d.classes,
                    few_shot_k: d.few_shot_k,
                    corpus_docs: d.corpus.len(),
                    train_pool: d.train.len(),
                    test: d.test.len(),
                })
                .collect(),
            base_corpus_docs: self.base_corpus.len(),
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(path, 1, format!("cannot read: {e}")))?;
        Self::parse(&text, path)
    }

    /// `path` anchors messages and resolves relative file names.
    pub fn parse(text: &str, path: &Path) -> CliResult<Self> {
        let at = Anchor { text, path };
        let raw: RawExperiment = toml::from_str(text).map_err(|e| at.toml(&e))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();

        let train = merge_train(&at, raw.train.as_ref())?;

        let sources = [raw.synthetic.is_some(), !raw.recipe.is_empty(), !raw.domain.is_empty()];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return Err(at.err(0..0, "exactly one of [synthetic], [[recipe]] or [[domain]] must be given"));
        }
        let (domains, base) = if let Some(suite) = &raw.synthetic {
            let recipes = suite.get_ref().recipes().map_err(|m| at.err(suite.span(), m))?;
            synthetic_data(&at, suite.span(), &recipes, train.pretrain_docs)?
        } else if !raw.recipe.is_empty() {
            let span = raw.recipe[0].span();
            let recipes: Vec<_> = raw.recipe.iter().map(|r| r.get_ref().clone()).collect();
            synthetic_data(&at, span, &recipes, train.pretrain_docs)?
        } else {
            let mut domains = Vec::with_capacity(raw.domain.len());
            for d in &raw.domain {
                domains.push(load_file_domain(d.get_ref(), &base_dir).map_err(|m| at.err(d.span(), m))?);
            }
            let base = match &raw.pretrain_corpus {
                Some(p) => load_corpus(&base_dir.join(p.get_ref()))
                    .map_err(|e| at.err(p.span(), format!("pretrain_corpus: {e}")))?,
                None if train.pretrain_steps > 0 => {
                    return Err(at.err(raw.domain[0].span(), "pretrain_corpus is required when pretrain_steps > 0"))
                }
                None => Vec::new(),
            };
            (domains, base)
        };
        let mut names = BTreeSet::new();
        for d in &domains {
            if !names.insert(d.name.clone()) {
                return Err(at.err(0..0, format!("domain {} is defined twice", d.name)));
            }
        }
        if domains.len() < 2 {
            return Err(at.err(0..0, "at least 2 domains are needed"));
        }

        let mut variants = Vec::new();
        if raw.variants.get_ref().is_empty() {
            return Err(at.err(raw.variants.span(), "variants list is empty"));
        }
        for v in raw.variants.get_ref() {
            let parsed: ExperimentVariant = v.get_ref().parse().map_err(|e: cpt_core::Error| at.err(v.span(), e.to_string()))?;
            if variants.contains(&parsed) {
                return Err(at.err(v.span(), format!("variant {parsed} listed twice")));
            }
            variants.push(parsed);
        }

        let default_order: Vec<String> = domains.iter().map(|d| d.name.clone()).collect();
        let orders = match &raw.orders {
            None => vec![default_order],
            Some(list) if list.is_empty() => return Err(at.err(0..0, "orders list is empty")),
            Some(list) => {
                let mut out: Vec<Vec<String>> = Vec::new();
                for o in list {
                    let mut sorted = o.get_ref().clone();
                    sorted.sort();
                    if sorted != names.iter().cloned().collect::<Vec<_>>() {
                        return Err(at.err(o.span(), format!("order {:?} is not a permutation of the domains {names:?}", o.get_ref())));
                    }
                    if out.contains(o.get_ref()) {
                        return Err(at.err(o.span(), "order listed twice"));
                    }
                    out.push(o.get_ref().clone());
                }
                out
            }
        };

        let seeds = match &raw.seeds {
            None => DEFAULT_SEEDS.to_vec(),
            Some(s) => {
                let mut uniq = s.get_ref().clone();
                uniq.sort_unstable();
                uniq.dedup();
                if s.get_ref().is_empty() || uniq.len() != s.get_ref().len() {
                    return Err(at.err(s.span(), "seeds must be a non-empty list without repeats"));
                }
                s.get_ref().clone()
            }
        };
        if raw.output.get_ref().is_empty() {
            return Err(at.err(raw.output.span(), "output directory is empty"));
        }
        for d in &domains {
            if d.corpus.len() <= train.eval_docs {
                return Err(at.err(0..0, format!("domain {} has {} documents but eval_docs is {}", d.name, d.corpus.len(), train.eval_docs)));
            }
        }

        Ok(ExperimentConfig {
            path: path.to_path_buf(),
            output: base_dir.join(raw.output.get_ref()),
            seeds,
            variants,
            orders,
            baseline: raw.baseline,
            save_checkpoints: raw.save_checkpoints.unwrap_or(true),
            train,
            domains,
            base_corpus: base,
        })
    }
}

/// A recipe file for `gen-data`: the domains plus the base corpus.
pub struct RecipeFile {
    pub recipes: Vec<SyntheticDomainRecipe>,
    pub base_docs: usize,
}

impl RecipeFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(path, 1, format!("cannot read: {e}")))?;
        let at = Anchor { text: &text, path };
        let raw: RawRecipeFile = toml::from_str(&text).map_err(|e| at.toml(&e))?;
        let (recipes, span) = match (&raw.suite, raw.recipe.is_empty()) {
            (Some(s), true) => (s.get_ref().recipes().map_err(|m| at.err(s.span(), m))?, s.span()),
            (None, false) => (raw.recipe.iter().map(|r| r.get_ref().clone()).collect(), raw.recipe[0].span()),
            _ => return Err(at.err(0..0, "give either [suite] or [[recipe]] tables")),
        };
        for r in &raw.recipe {
            r.get_ref().validate().map_err(|e| at.err(r.span(), e.to_string()))?;
        }
        for r in &recipes {
            r.validate().map_err(|e| at.err(span.clone(), e.to_string()))?;
        }
        check_disjoint(&recipes).map_err(|e| at.err(span, e.to_string()))?;
        Ok(RecipeFile { recipes, base_docs: raw.base_docs.unwrap_or(TrainConfig::desk().pretrain_docs) })
    }
}

struct Anchor<'a> {
    text: &'a str,
    path: &'a Path,
}

impl Anchor<'_> {
    fn line(&self, offset: usize) -> usize {
        self.text[..offset.min(self.text.len())].matches('\n').count() + 1
    }

    fn err(&self, span: Range<usize>, message: impl Into<String>) -> CliError {
        CliError::config(self.path, self.line(span.start), message)
    }

    fn toml(&self, e: &toml::de::Error) -> CliError {
        self.err(e.span().unwrap_or(0..0), e.message().to_string())
    }
}

fn preset(name: &str) -> Option<TrainConfig> {
    match name {
        "desk" => Some(TrainConfig::desk()),
        "smoke" => Some(TrainConfig::smoke()),
        "paper" => Some(TrainConfig::paper()),
        _ => None,
    }
}

/// `[train]`: a `preset` (desk by default) with per-key overrides.
fn merge_train(at: &Anchor, table: Option<&Spanned<BTreeMap<String, Spanned<toml::Value>>>>) -> CliResult<TrainConfig> {
    let Some(table) = table else {
        return Ok(TrainConfig::desk());
    };
    let entries = table.get_ref();
    let base = match entries.get("preset") {
        None => TrainConfig::desk(),
        Some(v) => {
            let name = v.get_ref().as_str().unwrap_or_default();
            preset(name).ok_or_else(|| at.err(v.span(), format!("unknown preset {}; expected desk, smoke or paper", v.get_ref())))?
        }
    };
    let known: BTreeSet<String> = match toml::Value::try_from(TrainConfig::desk()).expect("config serialises") {
        toml::Value::Table(t) => t.keys().cloned().collect(),
        _ => unreachable!("TrainConfig serialises to a table"),
    };
    let mut merged = match toml::Value::try_from(&base).expect("config serialises") {
        toml::Value::Table(t) => t,
        _ => unreachable!("TrainConfig serialises to a table"),
    };
    for (key, value) in entries {
        if key == "preset" {
            continue;
        }
        if !known.contains(key) {
            return Err(at.err(value.span(), format!("unknown train setting {key}")));
        }
        let mut trial = merged.clone();
        trial.insert(key.clone(), value.get_ref().clone());
        toml::Value::Table(trial.clone())
            .try_into::<TrainConfig>()
            .map_err(|e| at.err(value.span(), format!("{key}: {}", e.message())))?;
        merged = trial;
    }
    let config: TrainConfig = toml::Value::Table(merged).try_into().map_err(|e| at.err(table.span(), e.message().to_string()))?;
    config.validate().map_err(|e| {
        let msg = e.to_string();
        let span = entries
            .iter()
            .find(|(k, _)| msg.contains(k.as_str()))
            .map(|(_, v)| v.span())
            .unwrap_or_else(|| table.span());
        at.err(span, msg)
    })?;
    Ok(config)
}

fn synthetic_data(
    at: &Anchor,
    span: Range<usize>,
    recipes: &[SyntheticDomainRecipe],
    base_docs: usize,
) -> CliResult<(Vec<DomainSpec>, Vec<String>)> {
    check_disjoint(recipes).map_err(|e| at.err(span.clone(), e.to_string()))?;
    let mut domains = Vec::with_capacity(recipes.len());
    for r in recipes {
        domains.push(generate_domain(r).map_err(|e| at.err(span.clone(), e.to_string()))?);
    }
    let first = &recipes[0];
    let base = base_corpus(first.base_seed, first.base_vocab, base_docs, first.min_len, first.max_len, first.base_seed);
    Ok((domains, base))
}

fn load_file_domain(d: &FileDomain, base_dir: &Path) -> Result<DomainSpec, String> {
    let corpus = load_corpus(&base_dir.join(&d.corpus)).map_err(|e| format!("domain {}: corpus: {e}", d.name))?;
    let train = load_labeled(&base_dir.join(&d.train)).map_err(|e| format!("domain {}: train: {e}", d.name))?;
    let test = load_labeled(&base_dir.join(&d.test)).map_err(|e| format!("domain {}: test: {e}", d.name))?;
    let labels: BTreeSet<&String> = train.labels.iter().chain(&test.labels).collect();
    let ids: BTreeMap<&String, usize> = labels.iter().enumerate().map(|(i, l)| (*l, i)).collect();
    let remap = |f: &cpt_core::data::LabeledFile| -> Vec<Example> {
        f.examples
            .iter()
            .map(|e| Example { text: e.text.clone(), label: ids[&f.labels[e.label]] })
            .collect()
    };
    let spec = DomainSpec {
        name: d.name.clone(),
        classes: ids.len(),
        few_shot_k: d.few_shot_k,
        corpus,
        train: remap(&train),
        test: remap(&test),
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> CliResult<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("exp.toml"))
    }

    const MINIMAL: &str = r#"
output = "out"
variants = ["CPT"]
seeds = [1]

[train]
preset = "smoke"

[synthetic]
base_seed = 3
corpus_size = 32
domains = ["alpha", "delta"]
"#;

    fn line_of(e: CliError) -> (usize, String) {
        match e {
            CliError::Config { line, message, .. } => (line, message),
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn minimal_config_resolves() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.orders, vec![vec!["alpha".to_string(), "delta".to_string()]]);
        assert_eq!(c.train, TrainConfig::smoke());
        assert_eq!(c.output, Path::new("out"));
        assert!(c.save_checkpoints);
        assert_eq!(c.digest(), parse(MINIMAL).unwrap().digest());
        let other = parse(&MINIMAL.replace("seeds = [1]", "seeds = [2]")).unwrap();
        assert_ne!(c.digest(), other.digest());
        let defaults = parse(&MINIMAL.replace("seeds = [1]\n", "")).unwrap();
        assert_eq!(defaults.seeds, DEFAULT_SEEDS);
    }

    #[test]
    fn overrides_merge_into_the_preset() {
        let c = parse(&MINIMAL.replace("preset = \"smoke\"", "preset = \"smoke\"\npost_lr = 0.01\nft_epochs = 2")).unwrap();
        assert_eq!((c.train.post_lr, c.train.ft_epochs), (0.01, 2));
        assert_eq!(c.train.d_model, TrainConfig::smoke().d_model);
    }

    #[test]
    fn unknown_variant_points_at_its_line() {
        let e = parse(&MINIMAL.replace("[\"CPT\"]", "[\"CPT\",\n  \"EWC\"]")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let (line, msg) = line_of(e);
        assert_eq!(line, 4);
        assert!(msg.contains("EWC"), "{msg}");
    }

    #[test]
    fn bad_values_are_line_anchored() {
        let (line, msg) = line_of(parse(&MINIMAL.replace("preset = \"smoke\"", "preset = \"smoke\"\npost_lr = -1.0")).unwrap_err());
        assert_eq!(line, 8);
        assert!(msg.contains("post_lr"));
        let (line, _) = line_of(parse(&MINIMAL.replace("preset = \"smoke\"", "preset = \"smoke\"\nft_batch = \"big\"")).unwrap_err());
        assert_eq!(line, 8);
        let (line, msg) = line_of(parse(&MINIMAL.replace("preset = \"smoke\"", "preset = \"smoke\"\nwarmup = 3")).unwrap_err());
        assert_eq!((line, msg.contains("warmup")), (8, true));
        let (line, _) = line_of(parse(&MINIMAL.replace("corpus_size = 32", "corpus_size = 32\nextra = 1")).unwrap_err());
        assert_eq!(line, 12);
        let (line, _) = line_of(parse(&MINIMAL.replace("output = \"out\"", "output = ")).unwrap_err());
        assert_eq!(line, 2);
    }

    #[test]
    fn orders_must_be_permutations() {
        let bad = MINIMAL.replace("seeds = [1]", "seeds = [1]\norders = [[\"alpha\", \"delta\"],\n [\"alpha\", \"beta\"]]");
        let (line, msg) = line_of(parse(&bad).unwrap_err());
        assert_eq!(line, 6);
        assert!(msg.contains("permutation"));
        let ok = MINIMAL.replace("seeds = [1]", "seeds = [1]\norders = [[\"alpha\", \"delta\"], [\"delta\", \"alpha\"]]");
        assert_eq!(parse(&ok).unwrap().orders.len(), 2);
    }

    #[test]
    fn exactly_one_data_source() {
        let both = format!("{MINIMAL}\n[[domain]]\nname = \"x\"\ncorpus = \"a\"\ntrain = \"b\"\ntest = \"c\"\nfew_shot_k = 2\n");
        assert!(parse(&both).is_err());
        let none = "output = \"o\"\nvariants = [\"CPT\"]\n";
        assert!(parse(none).is_err());
    }

    #[test]
    fn file_domains_share_label_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        for (name, train, test) in [("a", "pos\tgood\nneg\tbad\n", "neg\tawful\npos\tnice\n"), ("b", "x\tone\ny\ttwo\n", "y\tthree\n")] {
            std::fs::write(p.join(format!("{name}.txt")), "some text\nmore text\nthird\n").unwrap();
            std::fs::write(p.join(format!("{name}.train")), train).unwrap();
            std::fs::write(p.join(format!("{name}.test")), test).unwrap();
        }
        let mut text = String::from("output = \"o\"\nvariants = [\"NCL\"]\n[train]\npreset = \"smoke\"\npretrain_steps = 0\neval_docs = 1\n");
        for n in ["a", "b"] {
            text.push_str(&format!(
                "[[domain]]\nname = \"{n}\"\ncorpus = \"{n}.txt\"\ntrain = \"{n}.train\"\ntest = \"{n}.test\"\nfew_shot_k = 2\n"
            ));
        }
        let c = ExperimentConfig::parse(&text, &p.join("exp.toml")).unwrap();
        assert_eq!(c.domains[0].classes, 2);
        assert_eq!(c.domains[0].test[0], Example { text: "awful".into(), label: 0 });
        assert_eq!(c.domains[1].test[0].label, 1);
        assert!(c.base_corpus.is_empty());
        let needs_base = text.replace("pretrain_steps = 0\n", "");
        assert!(ExperimentConfig::parse(&needs_base, &p.join("exp.toml")).is_err());
    }
}

//! `verify` and `gen-data`.

use std::fmt::Write as _;
use std::path::Path;

use cpt_core::continual::{verify_protection, Checkpoint, ProtectionReport};
use cpt_core::data::{base_corpus, generate_domain, Example};

use crate::config::RecipeFile;
use crate::error::{CliResult, Context};

pub fn cmd_verify(before: &Path, after: &Path, task: usize) -> CliResult<ProtectionReport> {
    let a = Checkpoint::load(before).context(|| format!("loading {}", before.display()))?;
    let b = Checkpoint::load(after).context(|| format!("loading {}", after.display()))?;
    verify_protection(&a, &b, task).context(|| format!("verifying task {task}"))
}

pub fn describe(r: &ProtectionReport) -> String {
    format!(
        "{} task {}: {} mask-covered entries checked, {} changed, max |delta| = {:e}",
        r.variant, r.task, r.entries_checked, r.entries_changed, r.max_abs_delta
    )
}

fn tsv(examples: &[Example], classes: usize) -> String {
    let width = (classes.max(2) - 1).to_string().len();
    let mut out = String::new();
    for e in examples {
        writeln!(out, "c{:0width$}\t{}", e.label, e.text).expect("writing to a string");
    }
    out
}

/// Writes each domain's corpus and task files, the base corpus, and a
/// `domains.toml` fragment that an experiment file can paste in.
pub fn cmd_gen_data(recipe_path: &Path, out: &Path) -> CliResult<Vec<String>> {
    let file = RecipeFile::load(recipe_path)?;
    std::fs::create_dir_all(out).context(|| format!("creating {}", out.display()))?;
    let mut fragment = String::from("pretrain_corpus = \"base.txt\"\n");
    let mut names = Vec::new();
    for r in &file.recipes {
        let spec = generate_domain(r).context(|| format!("generating {}", r.name))?;
        let dir = out.join(&spec.name);
        std::fs::create_dir_all(&dir).context(|| format!("creating {}", dir.display()))?;
        let corpus: String = spec.corpus.iter().map(|l| format!("{l}\n")).collect();
        for (f, text) in [("corpus.txt", corpus), ("train.tsv", tsv(&spec.train, spec.classes)), ("test.tsv", tsv(&spec.test, spec.classes))] {
            std::fs::write(dir.join(f), text).context(|| format!("writing {}/{f}", dir.display()))?;
        }
        write!(
            fragment,
            "\n[[domain]]\nname = \"{0}\"\ncorpus = \"{0}/corpus.txt\"\ntrain = \"{0}/train.tsv\"\ntest = \"{0}/test.tsv\"\nfew_shot_k = {1}\n",
            spec.name, spec.few_shot_k
        )
        .expect("writing to a string");
        names.push(spec.name);
    }
    let first = &file.recipes[0];
    let base = base_corpus(first.base_seed, first.base_vocab, file.base_docs, first.min_len, first.max_len, first.base_seed);
    let text: String = base.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(out.join("base.txt"), text).context(|| "writing base.txt".into())?;
    std::fs::write(out.join("domains.toml"), fragment).context(|| "writing domains.toml".into())?;
    Ok(names)
}

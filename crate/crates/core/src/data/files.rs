use std::collections::BTreeMap;
use std::path::Path;

use super::synthetic::Example;
use crate::error::{Error, Result};

/// One document per non-blank line.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(parse_corpus(&text))
}

pub fn parse_corpus(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect()
}

/// `label<TAB>text` lines. Labels are strings mapped to ids in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledFile {
    pub labels: Vec<String>,
    pub examples: Vec<Example>,
}

pub fn load_labeled(path: &Path) -> Result<LabeledFile> {
    let text = std::fs::read_to_string(path)?;
    parse_labeled(&text).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_labeled(text: &str) -> Result<LabeledFile> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("line {}: expected label<TAB>text", n + 1)))?;
        let label = label.trim();
        if label.is_empty() {
            return Err(Error::Format(format!("line {}: empty label", n + 1)));
        }
        rows.push((label.to_string(), body.to_string()));
    }
    let ids: BTreeMap<&str, usize> = {
        let mut names: Vec<&str> = rows.iter().map(|(l, _)| l.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names.into_iter().enumerate().map(|(i, n)| (n, i)).collect()
    };
    let examples = rows
        .iter()
        .map(|(l, t)| Example { text: t.clone(), label: ids[l.as_str()] })
        .collect();
    Ok(LabeledFile {
        labels: ids.keys().map(|s| s.to_string()).collect(),
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_lines() {
        assert_eq!(parse_corpus("a b\n\n  c \n"), vec!["a b", "c"]);
    }

    #[test]
    fn labeled_lines() {
        let f = parse_labeled("pos\tgreat food\nneg\tbad\tservice\n\npos\tok\n").unwrap();
        assert_eq!(f.labels, vec!["neg", "pos"]);
        assert_eq!(f.examples[0], Example { text: "great food".into(), label: 1 });
        assert_eq!(f.examples[1].text, "bad\tservice");
        let err = parse_labeled("pos\tfine\nbroken line\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "x y\nz\n").unwrap();
        assert_eq!(load_corpus(&p).unwrap().len(), 2);
        assert!(load_corpus(&dir.path().join("missing")).is_err());
    }
}

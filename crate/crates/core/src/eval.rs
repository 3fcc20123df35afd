//! Accuracy, macro-F1, the forgetting rate and per-run reports.

use serde::{Deserialize, Serialize};

use crate::continual::ExperimentVariant;
use crate::error::{Error, Result};

fn check_pairs(op: &'static str, predictions: &[usize], labels: &[usize]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::dim(
            op,
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::contract(format!("{op} of an empty set")));
    }
    Ok(())
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_pairs("accuracy", predictions, labels)?;
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `m[true][predicted]` counts.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    check_pairs("confusion_matrix", predictions, labels)?;
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        for x in [p, l] {
            if x >= n_classes {
                return Err(Error::Index { op: "confusion_matrix", index: x, extent: n_classes });
            }
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Unweighted mean of per-class F1. A class with no true and no predicted
/// examples scores 0.
pub fn macro_f1(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    let m = confusion_matrix(predictions, labels, n_classes)?;
    let mut total = 0.0;
    for c in 0..n_classes {
        let tp = m[c][c] as f64;
        let actual: usize = m[c].iter().sum();
        let predicted: usize = m.iter().map(|row| row[c]).sum();
        let denom = (actual + predicted) as f64;
        if denom > 0.0 {
            total += 2.0 * tp / denom;
        }
    }
    Ok(total / n_classes as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Held-out MLM loss of the domain under its own route.
    pub mlm_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MacroF1,
    MlmLoss,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Accuracy, Metric::MacroF1, Metric::MlmLoss];

    pub fn of(self, m: &Metrics) -> f64 {
        match self {
            Metric::Accuracy => m.accuracy,
            Metric::MacroF1 => m.macro_f1,
            Metric::MlmLoss => m.mlm_loss,
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::MlmLoss)
    }
}

/// Mean drop from each earlier task's score right after its domain to its
/// score after the last domain. Negative means backward transfer.
pub fn forgetting_from(diagonal: &[f64], final_row: &[f64]) -> Result<f64> {
    if diagonal.len() != final_row.len() {
        return Err(Error::dim("forgetting_rate", "diagonal and final row lengths differ"));
    }
    if diagonal.is_empty() {
        return Err(Error::contract("forgetting rate needs at least 2 domains"));
    }
    let sum: f64 = diagonal.iter().zip(final_row).map(|(d, f)| d - f).sum();
    Ok(sum / diagonal.len() as f64)
}

/// `A[i][j]`: task `j` evaluated after post-training domain `i`, `j <= i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsMatrix {
    pub domains: Vec<String>,
    cells: Vec<Vec<Option<Metrics>>>,
}

impl MetricsMatrix {
    pub fn new(domains: Vec<String>) -> Self {
        let cells = (0..domains.len()).map(|i| vec![None; i + 1]).collect();
        MetricsMatrix { domains, cells }
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn set(&mut self, i: usize, j: usize, m: Metrics) -> Result<()> {
        let t = self.len();
        let row = self.cells.get_mut(i).ok_or(Error::Index { op: "MetricsMatrix::set", index: i, extent: t })?;
        let cell = row.get_mut(j).ok_or(Error::Index { op: "MetricsMatrix::set", index: j, extent: i + 1 })?;
        *cell = Some(m);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&Metrics> {
        self.cells.get(i)?.get(j)?.as_ref()
    }

    pub fn filled(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.filled() == self.len() * (self.len() + 1) / 2
    }

    fn require(&self, i: usize, j: usize) -> Result<&Metrics> {
        self.get(i, j)
            .ok_or_else(|| Error::contract(format!("metrics cell ({i}, {j}) is empty")))
    }

    /// Final-row scores per domain.
    pub fn final_row(&self) -> Result<Vec<Metrics>> {
        let last = self.len().checked_sub(1).ok_or_else(|| Error::contract("empty metrics matrix"))?;
        (0..self.len()).map(|j| self.require(last, j).copied()).collect()
    }

    /// For loss metrics the sign is flipped so positive still means forgetting.
    pub fn forgetting_rate(&self, metric: Metric) -> Result<f64> {
        let t = self.len();
        if t < 2 {
            return Err(Error::contract(format!("forgetting rate needs at least 2 domains, got {t}")));
        }
        let mut diag = Vec::with_capacity(t - 1);
        let mut fin = Vec::with_capacity(t - 1);
        for i in 0..t - 1 {
            diag.push(metric.of(self.require(i, i)?));
            fin.push(metric.of(self.require(t - 1, i)?));
        }
        let r = forgetting_from(&diag, &fin)?;
        Ok(if metric.higher_is_better() { r } else { 0.0 - r })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("after_domain,task,domain,accuracy,macro_f1,mlm_loss\n");
        for (i, row) in self.cells.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                if let Some(m) = cell {
                    out.push_str(&format!(
                        "{i},{j},{},{},{},{}\n",
                        self.domains[j], m.accuracy, m.macro_f1, m.mlm_loss
                    ));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        if values.iter().all(|v| v.to_bits() == values[0].to_bits()) {
            return MeanStd { mean: values[0], std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub matrix: MetricsMatrix,
    pub final_scores: Vec<Metrics>,
    pub average_accuracy: f64,
    pub average_macro_f1: f64,
    pub forgetting_accuracy: f64,
    pub forgetting_macro_f1: f64,
    pub forgetting_mlm_loss: f64,
}

impl SeedRun {
    pub fn new(seed: u64, matrix: MetricsMatrix) -> Result<Self> {
        let final_scores = matrix.final_row()?;
        let mean = |f: fn(&Metrics) -> f64| final_scores.iter().map(f).sum::<f64>() / final_scores.len() as f64;
        Ok(SeedRun {
            seed,
            average_accuracy: mean(|m| m.accuracy),
            average_macro_f1: mean(|m| m.macro_f1),
            forgetting_accuracy: matrix.forgetting_rate(Metric::Accuracy)?,
            forgetting_macro_f1: matrix.forgetting_rate(Metric::MacroF1)?,
            forgetting_mlm_loss: matrix.forgetting_rate(Metric::MlmLoss)?,
            final_scores,
            matrix,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub domain: String,
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
}

/// Everything one (variant, domain order) cell produced across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub variant: ExperimentVariant,
    pub order: Vec<String>,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedRun>,
    pub per_domain: Vec<DomainSummary>,
    pub average_accuracy: MeanStd,
    pub average_macro_f1: MeanStd,
    pub forgetting_accuracy: MeanStd,
    pub forgetting_macro_f1: MeanStd,
    pub forgetting_mlm_loss: MeanStd,
    /// Free-form notes on scale, e.g. how step counts were shrunk.
    pub notes: Vec<String>,
}

impl Report {
    pub fn new(variant: ExperimentVariant, order: Vec<String>, config_digest: String, runs: Vec<SeedRun>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::contract("report needs at least one run"));
        }
        if let Some(r) = runs.iter().find(|r| r.matrix.domains != order) {
            return Err(Error::contract(format!("seed {} ran a different domain order", r.seed)));
        }
        let collect = |f: &dyn Fn(&SeedRun) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
        let per_domain = order
            .iter()
            .enumerate()
            .map(|(j, d)| DomainSummary {
                domain: d.clone(),
                accuracy: collect(&|r| r.final_scores[j].accuracy),
                macro_f1: collect(&|r| r.final_scores[j].macro_f1),
            })
            .collect();
        Ok(Report {
            variant,
            seeds: runs.iter().map(|r| r.seed).collect(),
            per_domain,
            average_accuracy: collect(&|r| r.average_accuracy),
            average_macro_f1: collect(&|r| r.average_macro_f1),
            forgetting_accuracy: collect(&|r| r.forgetting_accuracy),
            forgetting_macro_f1: collect(&|r| r.forgetting_macro_f1),
            forgetting_mlm_loss: collect(&|r| r.forgetting_mlm_loss),
            order,
            config_digest,
            runs,
            notes: Vec::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

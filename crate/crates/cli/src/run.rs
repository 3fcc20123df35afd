//! `run`: every (variant, order, seed) sequence of an experiment, plus the
//! optional backbone-only baseline, with all artifacts on disk.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use cpt_core::continual::{fine_tune_backbone_only, run_sequence, ExperimentVariant, Lab, SequenceOutcome, StepRecord};
use cpt_core::eval::{DomainSummary, MeanStd, Report, SeedRun};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult, Context};

pub const WORKERS_ENV: &str = "CPT_WORKERS";
pub const REPORT_FILE: &str = "report.json";
pub const MATRIX_FILE: &str = "matrix.csv";
pub const BASELINE_DIR: &str = "baseline";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Added to every configured seed, for sharding sweeps.
    pub seed_offset: u64,
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { seed_offset: 0, workers: 1 }
    }
}

/// Worker count from the environment; 1 when unset.
pub fn workers_from_env() -> CliResult<usize> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::config(Path::new(WORKERS_ENV), 1, format!("expected a positive integer, got {v:?}"))),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub seed: u64,
    pub scores: Vec<DomainScore>,
}

/// Fine-tuning the pre-trained backbone alone on each domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub domains: Vec<String>,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<BaselineRun>,
    pub per_domain: Vec<DomainSummary>,
    pub average_accuracy: MeanStd,
    pub average_macro_f1: MeanStd,
}

impl BaselineReport {
    pub fn new(domains: Vec<String>, config_digest: String, runs: Vec<BaselineRun>) -> Self {
        let per_domain = domains
            .iter()
            .enumerate()
            .map(|(j, d)| DomainSummary {
                domain: d.clone(),
                accuracy: MeanStd::of(&runs.iter().map(|r| r.scores[j].accuracy).collect::<Vec<_>>()),
                macro_f1: MeanStd::of(&runs.iter().map(|r| r.scores[j].macro_f1).collect::<Vec<_>>()),
            })
            .collect();
        let avg = |f: fn(&DomainScore) -> f64| {
            MeanStd::of(
                &runs
                    .iter()
                    .map(|r| r.scores.iter().map(f).sum::<f64>() / r.scores.len() as f64)
                    .collect::<Vec<_>>(),
            )
        };
        BaselineReport {
            average_accuracy: avg(|s| s.accuracy),
            average_macro_f1: avg(|s| s.macro_f1),
            seeds: runs.iter().map(|r| r.seed).collect(),
            per_domain,
            domains,
            config_digest,
            runs,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub output: PathBuf,
    pub reports: Vec<(PathBuf, Report)>,
    pub baseline: Option<BaselineReport>,
    /// Per-sequence summary lines, also written to `run.log`.
    pub lines: Vec<String>,
}

/// Runs `f` over `items` on up to `workers` threads, keeping input order.
/// Stops handing out new items after the first failure.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> CliResult<R> + Sync) -> CliResult<Vec<R>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<CliResult<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                if r.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    let mut out = Vec::with_capacity(items.len());
    for slot in slots.into_inner().expect("worker panicked") {
        match slot {
            Some(r) => out.push(r?),
            None => {}
        }
    }
    Ok(out)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).context(|| format!("writing {}", path.display()))
}

pub fn steps_log(records: &[StepRecord]) -> String {
    let mut out = String::from("stage\tstep\tloss\ttau\n");
    for r in records {
        let tau = r.tau.map_or_else(|| "-".to_string(), |t| t.to_string());
        writeln!(out, "{}\t{}\t{}\t{tau}", r.stage, r.step, r.loss).expect("writing to a string");
    }
    out
}

pub fn order_slug(order: &[String]) -> String {
    order.join("-")
}

pub fn sequence_dir(output: &Path, variant: ExperimentVariant, order: &[String]) -> PathBuf {
    output.join(variant.name()).join(order_slug(order))
}

#[derive(Serialize)]
struct CellRecord<'a> {
    after: usize,
    task: usize,
    domain: &'a str,
    accuracy: f64,
    macro_f1: f64,
    mlm_loss: f64,
    fine_tune_digest: &'a str,
}

fn write_sequence(dir: &Path, out: &SequenceOutcome, save_checkpoints: bool) -> CliResult<()> {
    write(&dir.join(MATRIX_FILE), out.matrix.to_csv())?;
    write(&dir.join("steps.log"), steps_log(&out.log))?;
    let mut cells = Vec::new();
    for (i, row) in out.cells.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            cells.push(CellRecord {
                after: i,
                task: j,
                domain: &out.order[j],
                accuracy: c.metrics.accuracy,
                macro_f1: c.metrics.macro_f1,
                mlm_loss: c.metrics.mlm_loss,
                fine_tune_digest: &c.digest,
            });
        }
    }
    let json = serde_json::to_string_pretty(&cells).expect("cells serialise");
    write(&dir.join("cells.json"), json + "\n")?;
    if save_checkpoints {
        for (i, c) in out.checkpoints.iter().enumerate() {
            let cdir = dir.join("checkpoints").join(format!("{i}-{}", out.order[i]));
            c.save(&cdir).context(|| format!("saving checkpoint {}", cdir.display()))?;
        }
    }
    Ok(())
}

enum Job {
    Sequence { seed: usize, variant: ExperimentVariant, order: usize },
    Baseline { seed: usize },
}

enum JobResult {
    Sequence { variant: ExperimentVariant, order: usize, run: SeedRun },
    Baseline(BaselineRun),
}

pub fn cmd_run(config_path: &Path, opts: RunOptions) -> CliResult<RunOutcome> {
    let config = ExperimentConfig::load(config_path)?;
    run_experiment(&config, opts)
}

pub fn run_experiment(config: &ExperimentConfig, opts: RunOptions) -> CliResult<RunOutcome> {
    let out_dir = &config.output;
    let digest = config.digest();
    std::fs::create_dir_all(out_dir).context(|| format!("creating {}", out_dir.display()))?;
    let summary = serde_json::to_string_pretty(&config.summary()).expect("summary serialises");
    write(&out_dir.join("experiment.json"), summary + "\n")?;

    let seeds: Vec<u64> = config.seeds.iter().map(|s| s + opts.seed_offset).collect();
    let labs = parallel_map(&seeds, opts.workers, |&seed| {
        let t = Instant::now();
        let lab = Lab::new(config.domains.clone(), &config.base_corpus, config.train.clone(), seed)
            .context(|| format!("preparing seed {seed}"))?;
        log::info!("seed {seed}: vocabulary {} words, pre-trained in {:.1?}", lab.vocab.len(), t.elapsed());
        write(&out_dir.join("pretrain").join(format!("seed-{seed}.log")), steps_log(&lab.pretrain_log))?;
        Ok(lab)
    })?;
    let orders: Vec<Vec<usize>> = {
        let lab = &labs[0];
        config
            .orders
            .iter()
            .map(|o| o.iter().map(|n| lab.domain_index(n)).collect::<cpt_core::Result<Vec<_>>>())
            .collect::<cpt_core::Result<_>>()
            .context(|| "resolving domain orders".into())?
    };

    let mut jobs = Vec::new();
    for seed in 0..seeds.len() {
        for &variant in &config.variants {
            for order in 0..orders.len() {
                jobs.push(Job::Sequence { seed, variant, order });
            }
        }
        if config.baseline {
            jobs.push(Job::Baseline { seed });
        }
    }

    let results = parallel_map(&jobs, opts.workers, |job| match *job {
        Job::Sequence { seed, variant, order } => {
            let lab = &labs[seed];
            let names = &config.orders[order];
            let t = Instant::now();
            let out = run_sequence(lab, variant, &orders[order])
                .context(|| format!("{variant} order {} seed {}", order_slug(names), seeds[seed]))?;
            log::info!("{variant} {} seed {} finished in {:.1?}", order_slug(names), seeds[seed], t.elapsed());
            let dir = sequence_dir(out_dir, variant, names).join(format!("seed-{}", seeds[seed]));
            write_sequence(&dir, &out, config.save_checkpoints)?;
            let run = SeedRun::new(seeds[seed], out.matrix).context(|| format!("summarising {}", dir.display()))?;
            Ok(JobResult::Sequence { variant, order, run })
        }
        Job::Baseline { seed } => {
            let lab = &labs[seed];
            let mut scores = Vec::with_capacity(lab.domains.len());
            let mut csv = String::from("domain,accuracy,macro_f1\n");
            for (d, dom) in lab.domains.iter().enumerate() {
                let ft = fine_tune_backbone_only(lab, d).context(|| format!("baseline {} seed {}", dom.spec.name, seeds[seed]))?;
                writeln!(csv, "{},{},{}", dom.spec.name, ft.accuracy, ft.macro_f1).expect("writing to a string");
                scores.push(DomainScore { domain: dom.spec.name.clone(), accuracy: ft.accuracy, macro_f1: ft.macro_f1, digest: ft.digest });
            }
            write(&out_dir.join(BASELINE_DIR).join(format!("seed-{}", seeds[seed])).join("scores.csv"), csv)?;
            Ok(JobResult::Baseline(BaselineRun { seed: seeds[seed], scores }))
        }
    })?;

    let mut lines = Vec::new();
    let mut reports = Vec::new();
    for &variant in &config.variants {
        for (o, names) in config.orders.iter().enumerate() {
            let runs: Vec<SeedRun> = results
                .iter()
                .filter_map(|r| match r {
                    JobResult::Sequence { variant: v, order, run } if *v == variant && *order == o => Some(run.clone()),
                    _ => None,
                })
                .collect();
            for r in &runs {
                lines.push(format!(
                    "{variant} {} seed {}: average accuracy {:.4}, macro-F1 {:.4}; forgetting accuracy {}, macro-F1 {}, MLM loss {}",
                    order_slug(names),
                    r.seed,
                    r.average_accuracy,
                    r.average_macro_f1,
                    r.forgetting_accuracy,
                    r.forgetting_macro_f1,
                    r.forgetting_mlm_loss
                ));
            }
            let mut report = Report::new(variant, names.clone(), digest.clone(), runs).context(|| "building report".into())?;
            report.notes.push(format!(
                "post-training steps per domain: {}",
                labs[0].domains.iter().map(|d| format!("{} {}", d.spec.name, config.train.post_steps(d.corpus.len()))).collect::<Vec<_>>().join(", ")
            ));
            if opts.seed_offset > 0 {
                report.notes.push(format!("seeds offset by {}", opts.seed_offset));
            }
            let path = sequence_dir(out_dir, variant, names).join(REPORT_FILE);
            write(&path, report.to_json().context(|| "serialising report".into())? + "\n")?;
            reports.push((path, report));
        }
    }
    let baseline = if config.baseline {
        let runs: Vec<BaselineRun> = results
            .iter()
            .filter_map(|r| match r {
                JobResult::Baseline(b) => Some(b.clone()),
                _ => None,
            })
            .collect();
        let domains = labs[0].domains.iter().map(|d| d.spec.name.clone()).collect();
        let report = BaselineReport::new(domains, digest.clone(), runs);
        for r in &report.runs {
            lines.push(format!(
                "baseline seed {}: {}",
                r.seed,
                r.scores.iter().map(|s| format!("{} {:.4}", s.domain, s.accuracy)).collect::<Vec<_>>().join(", ")
            ));
        }
        let json = serde_json::to_string_pretty(&report).expect("baseline serialises");
        write(&out_dir.join(BASELINE_DIR).join(REPORT_FILE), json + "\n")?;
        Some(report)
    } else {
        None
    };
    write(&out_dir.join("run.log"), lines.iter().map(|l| format!("{l}\n")).collect::<String>())?;
    Ok(RunOutcome { output: out_dir.clone(), reports, baseline, lines })
}

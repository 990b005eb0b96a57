//! Accuracy, the three model-selection criteria, and the sweep runner.
//!
//! * training-domain validation: best mean accuracy on the union of the
//!   training domains' small splits;
//! * leave-one-out: best mean accuracy on a held-back training domain,
//!   averaged over every training domain;
//! * test-domain (oracle): best final-step accuracy on the test domain's
//!   small split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_json, DomainDataset, ExampleRef, DOMAIN_NAMES};
use crate::error::{Error, Result};
use crate::nn::ModelBundle;
use crate::tensor::Tensor;
use crate::train::{train_run, Algorithm, RunRecord, TrainConfig};

const EVAL_CHUNK: usize = 256;

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `logits` (`[N, C]`) whose argmax equals the label.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Contract("accuracy of an empty example list".into()));
    }
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::dim("accuracy", logits.shape(), &[labels.len()]));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(logits.row(*i)) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn accuracy(bundle: &ModelBundle, dataset: &DomainDataset, refs: &[ExampleRef]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::Contract("accuracy of an empty example list".into()));
    }
    let mut hits = 0.0;
    for chunk in refs.chunks(EVAL_CHUNK) {
        let (x, y) = dataset.batch(chunk);
        hits += accuracy_from_logits(&bundle.predict(&x)?, &y)? * chunk.len() as f64;
    }
    Ok(hits / refs.len() as f64)
}

/// Mean and population standard deviation (two-pass). The deviation is
/// absent for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, Some(var.sqrt()))
}

/// The fields of a finished trial that the criteria read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub config_id: usize,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub holdout: usize,
    /// Training domain withheld in a leave-one-out run.
    #[serde(default)]
    pub leave_out: Option<usize>,
    /// Union of the training domains' small splits.
    #[serde(default)]
    pub val_acc: Option<f64>,
    /// Whole test domain (the withheld domain for leave-one-out runs).
    #[serde(default)]
    pub test_acc: Option<f64>,
    /// Test domain's small split.
    #[serde(default)]
    pub test_small_acc: Option<f64>,
    /// Step at which `test_small_acc` was measured.
    #[serde(default)]
    pub test_small_step: Option<usize>,
    #[serde(default)]
    pub final_step: Option<usize>,
    #[serde(default)]
    pub failed: Option<String>,
}

impl TrialRecord {
    pub fn from_run(config_id: usize, run: &RunRecord) -> Result<Self> {
        let holdout = run
            .config
            .holdout
            .ok_or_else(|| Error::Record("run has no holdout domain".into()))?;
        let f = &run.final_eval;
        Ok(Self {
            config_id,
            algorithm: run.config.algorithm,
            seed: run.seed,
            holdout,
            leave_out: run.config.leave_out,
            val_acc: Some(f.acc_val),
            test_acc: f.acc_test,
            test_small_acc: f.acc_test_small,
            test_small_step: Some(f.step),
            final_step: Some(run.config.steps),
            failed: None,
        })
    }

    fn ok(&self) -> bool {
        self.failed.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub criterion: String,
    pub config_id: usize,
    /// Score the winner was chosen by.
    pub score: f64,
    pub test_mean: f64,
    pub test_std: Option<f64>,
    pub seeds: usize,
    pub oracle: bool,
}

fn field(r: &TrialRecord, v: Option<f64>, name: &str) -> Result<f64> {
    v.ok_or_else(|| {
        Error::Record(format!(
            "config {} seed {} is missing {name}",
            r.config_id, r.seed
        ))
    })
}

// config id -> values, in id order
fn group<'a>(
    records: impl Iterator<Item = &'a TrialRecord>,
    value: impl Fn(&TrialRecord) -> Result<f64>,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        out.entry(r.config_id).or_default().push(value(r)?);
    }
    Ok(out)
}

fn pick(scores: &BTreeMap<usize, f64>) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (&id, &s) in scores {
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((id, s));
        }
    }
    best.ok_or_else(|| Error::Record("no usable records".into()))
}

fn full_runs(records: &[TrialRecord]) -> impl Iterator<Item = &TrialRecord> {
    records.iter().filter(|r| r.ok() && r.leave_out.is_none())
}

fn report_test(records: &[TrialRecord], id: usize) -> Result<(f64, Option<f64>, usize)> {
    let tests = group(full_runs(records).filter(|r| r.config_id == id), |r| {
        field(r, r.test_acc, "test_acc")
    })?;
    let vals = tests
        .get(&id)
        .ok_or_else(|| Error::Record(format!("config {id} has no full-training run")))?;
    let (m, s) = mean_std(vals);
    Ok((m, s, vals.len()))
}

/// Winner by mean validation accuracy over seeds; reports its test
/// accuracy. Test accuracies never influence the choice.
pub fn select_training_domain(records: &[TrialRecord]) -> Result<SelectionResult> {
    let vals = group(full_runs(records), |r| field(r, r.val_acc, "val_acc"))?;
    let scores: BTreeMap<usize, f64> = vals.iter().map(|(&id, v)| (id, mean_std(v).0)).collect();
    let (id, score) = pick(&scores)?;
    let (test_mean, test_std, seeds) = report_test(records, id)?;
    Ok(SelectionResult {
        criterion: "training_domain".into(),
        config_id: id,
        score,
        test_mean,
        test_std,
        seeds,
        oracle: false,
    })
}

/// Winner by accuracy on the withheld training domain, averaged over every
/// training domain; its full-training runs supply the test accuracy.
pub fn select_leave_one_out(records: &[TrialRecord], train_domains: &[usize]) -> Result<SelectionResult> {
    if train_domains.len() < 2 {
        return Err(Error::Record(format!(
            "leave-one-out needs at least 2 training domains, got {}",
            train_domains.len()
        )));
    }
    let loo: Vec<&TrialRecord> = records.iter().filter(|r| r.ok() && r.leave_out.is_some()).collect();
    let mut ids: Vec<usize> = loo.iter().map(|r| r.config_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut scores = BTreeMap::new();
    for id in ids {
        let mut per_domain = Vec::with_capacity(train_domains.len());
        for &v in train_domains {
            let accs = loo
                .iter()
                .filter(|r| r.config_id == id && r.leave_out == Some(v))
                .map(|r| field(r, r.test_acc, "test_acc"))
                .collect::<Result<Vec<f64>>>()?;
            if accs.is_empty() {
                return Err(Error::Record(format!(
                    "config {id} has no leave-one-out run withholding domain {v}"
                )));
            }
            per_domain.push(mean_std(&accs).0);
        }
        scores.insert(id, mean_std(&per_domain).0);
    }
    let (id, score) = pick(&scores)?;
    let (test_mean, test_std, seeds) = report_test(records, id)?;
    Ok(SelectionResult {
        criterion: "leave_one_out".into(),
        config_id: id,
        score,
        test_mean,
        test_std,
        seeds,
        oracle: false,
    })
}

/// Winner by final-step accuracy on the test domain's small split. Peeks
/// at the test domain, so the result is flagged as an oracle.
pub fn select_test_domain(records: &[TrialRecord]) -> Result<SelectionResult> {
    let vals = group(full_runs(records), |r| {
        let acc = field(r, r.test_small_acc, "test_small_acc")?;
        match (r.test_small_step, r.final_step) {
            (Some(s), Some(f)) if s == f => Ok(acc),
            _ => Err(Error::Record(format!(
                "config {} seed {}: test small-split accuracy is not from the final step",
                r.config_id, r.seed
            ))),
        }
    })?;
    let scores: BTreeMap<usize, f64> = vals.iter().map(|(&id, v)| (id, mean_std(v).0)).collect();
    let (id, score) = pick(&scores)?;
    let (test_mean, test_std, seeds) = report_test(records, id)?;
    Ok(SelectionResult {
        criterion: "test_domain".into(),
        config_id: id,
        score,
        test_mean,
        test_std,
        seeds,
        oracle: true,
    })
}

/// Ranges for random hyperparameter draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomSearch {
    pub base: TrainConfig,
    pub algorithms: Vec<Algorithm>,
    pub n_configs: usize,
    pub seed: u64,
}

impl RandomSearch {
    /// `n_configs` draws per algorithm over tau, lambda, lr, batch size and
    /// queue size.
    pub fn draw(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for (a, &algorithm) in self.algorithms.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(a as u64);
            for _ in 0..self.n_configs {
                out.push(TrainConfig {
                    algorithm,
                    tau: 10f64.powf(rng.gen_range(-1.5..-0.5)),
                    lambda: rng.gen_range(0.1..1.0),
                    lr: 10f64.powf(rng.gen_range(-3.5..-2.5)),
                    batch_per_cell: [2, 4, 8][rng.gen_range(0..3)],
                    queue_sz: [32, 64, 128][rng.gen_range(0..3)],
                    ..self.base.clone()
                });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    #[serde(default)]
    pub configs: Vec<TrainConfig>,
    #[serde(default)]
    pub random: Option<RandomSearch>,
    pub seeds: Vec<u64>,
    pub holdouts: Vec<usize>,
    #[serde(default)]
    pub leave_one_out: bool,
}

/// One training run of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub config_id: usize,
    pub config: TrainConfig,
    pub name: String,
}

impl SweepPlan {
    /// Explicit configs followed by the random draws.
    pub fn all_configs(&self) -> Vec<TrainConfig> {
        let mut out = self.configs.clone();
        if let Some(r) = &self.random {
            out.extend(r.draw());
        }
        out
    }

    pub fn validate(&self, domains: usize) -> Result<()> {
        let configs = self.all_configs();
        if configs.is_empty() || self.seeds.is_empty() || self.holdouts.is_empty() {
            return Err(Error::Config("sweep needs configs, seeds and holdouts".into()));
        }
        // seed and holdout are set per trial
        let keys: Vec<String> = configs
            .iter()
            .map(|c| {
                serde_json::to_string(&TrainConfig {
                    seed: 0,
                    holdout: None,
                    leave_out: None,
                    ..c.clone()
                })
                .unwrap()
            })
            .collect();
        for i in 0..keys.len() {
            if keys[i + 1..].contains(&keys[i]) {
                return Err(Error::Config(format!("config {i} appears twice")));
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if let Some(h) = self.holdouts.iter().find(|&&h| h >= domains) {
            return Err(Error::Config(format!("holdout {h} out of range ({domains} domains)")));
        }
        for c in &configs {
            c.validate()?;
        }
        Ok(())
    }

    /// Every run, in a fixed order: config, seed, holdout, then the
    /// leave-one-out variants.
    pub fn trials(&self, domains: usize) -> Vec<Trial> {
        let mut out = Vec::new();
        for (id, base) in self.all_configs().into_iter().enumerate() {
            for &seed in &self.seeds {
                for &h in &self.holdouts {
                    let mut variants = vec![None];
                    if self.leave_one_out {
                        variants.extend((0..domains).filter(|&d| d != h).map(Some));
                    }
                    for lo in variants {
                        let mut name = format!("cfg{id}_s{seed}_h{h}");
                        if let Some(v) = lo {
                            write!(name, "_lo{v}").unwrap();
                        }
                        out.push(Trial {
                            config_id: id,
                            config: TrainConfig {
                                seed,
                                holdout: Some(h),
                                leave_out: lo,
                                ..base.clone()
                            },
                            name,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Selection results keyed by criterion, algorithm name and holdout.
pub type Selections = BTreeMap<String, BTreeMap<String, BTreeMap<usize, std::result::Result<SelectionResult, String>>>>;

pub struct SweepOutput {
    pub records: Vec<TrialRecord>,
    pub selections: Selections,
    pub report: String,
}

fn run_trial(trial: &Trial, dataset: &DomainDataset, out: Option<&Path>) -> TrialRecord {
    let dir = out.map(|o| trial_dir(o, trial));
    let result = train_run(&trial.config, dataset, dir.as_deref())
        .and_then(|run| TrialRecord::from_run(trial.config_id, &run.record));
    result.unwrap_or_else(|e| TrialRecord {
        config_id: trial.config_id,
        algorithm: trial.config.algorithm,
        seed: trial.config.seed,
        holdout: trial.config.holdout.unwrap_or(usize::MAX),
        leave_out: trial.config.leave_out,
        val_acc: None,
        test_acc: None,
        test_small_acc: None,
        test_small_step: None,
        final_step: None,
        failed: Some(e.to_string()),
    })
}

/// Runs every trial with at most `parallel` concurrent runs, applies the
/// three criteria per algorithm and holdout, and writes `report.md`,
/// `results.json` and `records.json` under `out`.
pub fn run_sweep(plan: &SweepPlan, dataset: &DomainDataset, out: Option<&Path>, parallel: usize) -> Result<SweepOutput> {
    plan.validate(dataset.domains())?;
    let trials = plan.trials(dataset.domains());
    let slots: Vec<Mutex<Option<TrialRecord>>> = trials.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..parallel.max(1).min(trials.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= trials.len() {
                    break;
                }
                let rec = run_trial(&trials[i], dataset, out);
                *slots[i].lock().unwrap() = Some(rec);
            });
        }
    });
    let records: Vec<TrialRecord> = slots.into_iter().map(|m| m.into_inner().unwrap().unwrap()).collect();
    let selections = select_all(plan, &records, dataset.domains());
    let report = render_report(plan, &records, &selections);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.md");
        fs::write(&path, &report).map_err(|e| Error::io(&path, e))?;
        write_json(&dir.join("results.json"), &results_json(&selections))?;
        write_json(&dir.join("records.json"), &records)?;
    }
    Ok(SweepOutput {
        records,
        selections,
        report,
    })
}

fn algorithms_in(records: &[TrialRecord]) -> Vec<Algorithm> {
    let mut out = Vec::new();
    for r in records {
        if !out.contains(&r.algorithm) {
            out.push(r.algorithm);
        }
    }
    out
}

pub const CRITERIA: [&str; 3] = ["training_domain", "leave_one_out", "test_domain"];

pub fn select_all(plan: &SweepPlan, records: &[TrialRecord], domains: usize) -> Selections {
    let mut out: Selections = BTreeMap::new();
    for criterion in CRITERIA {
        if criterion == "leave_one_out" && !plan.leave_one_out {
            continue;
        }
        let by_alg = out.entry(criterion.to_string()).or_default();
        for alg in algorithms_in(records) {
            let cell = by_alg.entry(alg.name().to_string()).or_default();
            for &h in &plan.holdouts {
                let subset: Vec<TrialRecord> = records
                    .iter()
                    .filter(|r| r.algorithm == alg && r.holdout == h)
                    .cloned()
                    .collect();
                let train: Vec<usize> = (0..domains).filter(|&d| d != h).collect();
                let res = match criterion {
                    "training_domain" => select_training_domain(&subset),
                    "leave_one_out" => select_leave_one_out(&subset, &train),
                    _ => select_test_domain(&subset),
                };
                cell.insert(h, res.map_err(|e| e.to_string()));
            }
        }
    }
    out
}

fn domain_name(d: usize) -> String {
    DOMAIN_NAMES.get(d).map(|s| s.to_string()).unwrap_or_else(|| format!("domain{d}"))
}

/// Markdown table per criterion: algorithms by holdout domain plus the row
/// average, in percent.
pub fn render_report(plan: &SweepPlan, records: &[TrialRecord], selections: &Selections) -> String {
    let mut out = String::from("# Sweep report\n");
    for (criterion, by_alg) in selections {
        writeln!(out, "\n## Model selection: {criterion}\n").unwrap();
        let mut header = String::from("| Algorithm |");
        let mut rule = String::from("|---|");
        for &h in &plan.holdouts {
            write!(header, " {} |", domain_name(h)).unwrap();
            rule.push_str("---|");
        }
        header.push_str(" Avg |");
        rule.push_str("---|");
        writeln!(out, "{header}\n{rule}").unwrap();
        for (alg, cells) in by_alg {
            let mut line = format!("| {alg} |");
            let mut means = Vec::new();
            for h in &plan.holdouts {
                match cells.get(h) {
                    Some(Ok(r)) => {
                        means.push(r.test_mean);
                        match r.test_std {
                            Some(s) => write!(line, " {:.1} ± {:.1} |", 100.0 * r.test_mean, 100.0 * s),
                            None => write!(line, " {:.1} |", 100.0 * r.test_mean),
                        }
                        .unwrap();
                    }
                    _ => line.push_str(" n/a |"),
                }
            }
            if means.len() == plan.holdouts.len() {
                write!(line, " {:.1} |", 100.0 * mean_std(&means).0).unwrap();
            } else {
                line.push_str(" n/a |");
            }
            writeln!(out, "{line}").unwrap();
        }
        if criterion == "test_domain" {
            writeln!(out, "\nOracle criterion: selects on test-domain data.").unwrap();
        }
    }
    let failed: Vec<&TrialRecord> = records.iter().filter(|r| r.failed.is_some()).collect();
    if !failed.is_empty() {
        writeln!(out, "\n## Failed trials\n").unwrap();
        for r in failed {
            writeln!(
                out,
                "- config {} seed {} holdout {} leave_out {:?}: {}",
                r.config_id,
                r.seed,
                r.holdout,
                r.leave_out,
                r.failed.as_deref().unwrap()
            )
            .unwrap();
        }
    }
    out
}

#[derive(Serialize)]
struct DomainResult {
    config_id: Option<usize>,
    mean: Option<f64>,
    std: Option<f64>,
    oracle: bool,
    error: Option<String>,
}

fn results_json(selections: &Selections) -> BTreeMap<String, BTreeMap<String, BTreeMap<String, DomainResult>>> {
    selections
        .iter()
        .map(|(crit, by_alg)| {
            let algs = by_alg
                .iter()
                .map(|(alg, cells)| {
                    let doms = cells
                        .iter()
                        .map(|(&h, res)| {
                            let entry = match res {
                                Ok(r) => DomainResult {
                                    config_id: Some(r.config_id),
                                    mean: Some(r.test_mean),
                                    std: r.test_std,
                                    oracle: r.oracle,
                                    error: None,
                                },
                                Err(e) => DomainResult {
                                    config_id: None,
                                    mean: None,
                                    std: None,
                                    oracle: crit == "test_domain",
                                    error: Some(e.clone()),
                                },
                            };
                            (domain_name(h), entry)
                        })
                        .collect();
                    (alg.clone(), doms)
                })
                .collect();
            (crit.clone(), algs)
        })
        .collect()
}

/// Where a sweep stores one trial's outputs.
pub fn trial_dir(out: &Path, trial: &Trial) -> PathBuf {
    out.join("trials").join(&trial.name)
}

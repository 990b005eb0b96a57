//! Update step, training loop and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentMode, AugmenterVars, GradRouting};
use crate::autodiff::{Tape, Var, NORM_EPS};
use crate::data::{read_json, write_json, DomainDataset, ExampleRef, Partition};
use crate::error::{Error, Result};
use crate::loss::{contrastive_total, cross_entropy_total, nt_xent_rows, total_loss, LossReport};
use crate::nn::{classify, ModelBundle, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::queue::QueueStore;
use crate::select::accuracy;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Erm,
    Rcerm,
    Rcermng,
}

impl Algorithm {
    pub fn augment_mode(self) -> Option<AugmentMode> {
        match self {
            Algorithm::Erm => None,
            Algorithm::Rcerm => Some(AugmentMode::Rcerm),
            Algorithm::Rcermng => Some(AugmentMode::Rcermng),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Erm => "ERM",
            Algorithm::Rcerm => "RCERM",
            Algorithm::Rcermng => "RCERMNG",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub steps: usize,
    /// Examples drawn per (class, training domain) cell each step.
    pub batch_per_cell: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub queue_sz: usize,
    pub tau: f64,
    pub lambda: f64,
    pub mu: f64,
    pub lr: f64,
    pub seed: u64,
    pub grad_routing: GradRouting,
    pub eval_every: usize,
    pub include_positive_in_denominator: bool,
    /// Test domain; every other domain is trained on.
    pub holdout: Option<usize>,
    /// Extra training domain withheld and evaluated as the test domain
    /// instead of `holdout` (leave-one-out validation runs).
    pub leave_out: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Rcerm,
            steps: 2000,
            batch_per_cell: 4,
            embed_dim: 64,
            hidden: vec![128, 128],
            queue_sz: 64,
            tau: 0.1,
            lambda: 0.05,
            mu: 0.999,
            lr: 1e-3,
            seed: 0,
            grad_routing: GradRouting::default(),
            eval_every: 100,
            include_positive_in_denominator: false,
            holdout: Some(3),
            leave_out: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_per_cell", self.batch_per_cell),
            ("embed_dim", self.embed_dim),
            ("queue_sz", self.queue_sz),
            ("eval_every", self.eval_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if let (Some(h), Some(l)) = (self.holdout, self.leave_out) {
            if h == l {
                return Err(Error::Config(format!("leave_out equals holdout ({h})")));
            }
        }
        if self.leave_out.is_some() && self.holdout.is_none() {
            return Err(Error::Config("leave_out requires a holdout domain".into()));
        }
        self.model_config(1, 1).validate()
    }

    pub fn model_config(&self, input_dim: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
            classes,
            mu: self.mu,
            lambda: self.lambda,
            tau: self.tau,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    /// Training and test domains implied by `holdout` and `leave_out`.
    pub fn domains(&self, total: usize) -> Result<(Vec<usize>, Option<usize>)> {
        for d in self.holdout.iter().chain(self.leave_out.iter()) {
            if *d >= total {
                return Err(Error::Config(format!(
                    "domain {d} out of range (dataset has {total})"
                )));
            }
        }
        let train: Vec<usize> = (0..total)
            .filter(|d| Some(*d) != self.holdout && Some(*d) != self.leave_out)
            .collect();
        Ok((train, self.leave_out.or(self.holdout)))
    }
}

/// Losses of one update step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_ce: f64,
    pub l_cl: f64,
    pub l_total: f64,
    pub skipped_cells: usize,
    #[serde(skip)]
    pub wall_time: f64,
}

/// Inputs of one (class, training domain) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellBatch {
    pub class: usize,
    /// Dataset domain index.
    pub domain: usize,
    /// Position of `domain` among the training domains; indexes the queues.
    pub slot: usize,
    /// `[B, input_dim]`
    pub inputs: Tensor,
}

/// One batch per training cell, class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredBatch {
    pub cells: Vec<CellBatch>,
}

/// Draws structured batches from the big splits of the training domains.
pub struct Sampler {
    cells: Vec<(usize, usize, usize, Vec<ExampleRef>)>,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(partition: &Partition, classes: usize, seed: u64, stream: u64) -> Result<Self> {
        let mut cells = Vec::new();
        for c in 0..classes {
            for (slot, &d) in partition.train_domains.iter().enumerate() {
                let refs: Vec<ExampleRef> = partition
                    .train_big
                    .iter()
                    .filter(|r| r.class == c && r.domain == d)
                    .copied()
                    .collect();
                if refs.is_empty() {
                    return Err(Error::Dataset(format!(
                        "training cell (c={c}, d={d}) has no examples"
                    )));
                }
                cells.push((c, d, slot, refs));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(Self { cells, rng })
    }

    /// `b` examples per cell, without replacement when the cell is large
    /// enough.
    pub fn next(&mut self, dataset: &DomainDataset, b: usize) -> StructuredBatch {
        let mut out = Vec::with_capacity(self.cells.len());
        for (c, d, slot, refs) in &self.cells {
            let picked: Vec<ExampleRef> = if refs.len() >= b {
                refs.choose_multiple(&mut self.rng, b).copied().collect()
            } else {
                (0..b).map(|_| *refs.choose(&mut self.rng).unwrap()).collect()
            };
            out.push(CellBatch {
                class: *c,
                domain: *d,
                slot: *slot,
                inputs: dataset.batch(&picked).0,
            });
        }
        StructuredBatch { cells: out }
    }
}

/// Loss-relevant switches of an update step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub algorithm: Algorithm,
    pub grad_routing: GradRouting,
    pub tau: f64,
    pub lambda: f64,
    pub include_positive: bool,
}

impl From<&TrainConfig> for StepOptions {
    fn from(c: &TrainConfig) -> Self {
        Self {
            algorithm: c.algorithm,
            grad_routing: c.grad_routing,
            tau: c.tau,
            lambda: c.lambda,
            include_positive: c.include_positive_in_denominator,
        }
    }
}

/// Forward graph of one update step.
pub struct StepGraph {
    pub tape: Tape,
    pub total: Var,
    pub report: LossReport,
    /// Trainable leaves in [`trainable_params_mut`] order.
    pub params: Vec<Var>,
}

/// Mutable references to every gradient-trained tensor: query encoder,
/// classifier, gate, then phi1..phi3.
pub fn trainable_params_mut(bundle: &mut ModelBundle) -> Vec<&mut Tensor> {
    bundle
        .named_params_mut()
        .into_iter()
        .filter(|(name, _)| !name.starts_with("key."))
        .map(|(_, t)| t)
        .collect()
}

pub fn trainable_shapes(bundle: &ModelBundle) -> Vec<Vec<usize>> {
    bundle
        .named_params()
        .into_iter()
        .filter(|(name, _)| !name.starts_with("key."))
        .map(|(_, t)| t.shape().to_vec())
        .collect()
}

/// Unit-norm copy of the rows of `x`.
pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    let d = x.last_dim();
    if d == 0 {
        return Ok(out);
    }
    for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < NORM_EPS {
            return Err(Error::DegenerateEmbedding {
                row: i,
                norm,
                eps: NORM_EPS,
            });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Enqueues the teacher embeddings of `cell`.
pub fn enqueue_teacher(bundle: &ModelBundle, store: &mut QueueStore, cell: &CellBatch) -> Result<()> {
    let emb = normalize_rows(&bundle.key.encode_detached(&cell.inputs)?)?;
    store.enqueue_dequeue(cell.class, cell.slot, &emb)
}

/// Builds the step loss, enqueueing each cell's teacher embeddings right
/// after that cell's contrastive term. ERM leaves `store` untouched.
pub fn build_step(
    bundle: &ModelBundle,
    store: &mut QueueStore,
    batch: &StructuredBatch,
    opts: &StepOptions,
) -> Result<StepGraph> {
    let mut tape = Tape::new();
    let enc = bundle.query.bind(&mut tape)?;
    let clf = bundle.classifier.bind(&mut tape, true)?;
    let aug = AugmenterVars::bind(bundle, &mut tape, true)?;
    let mut params = Vec::new();
    for l in &enc.layers {
        params.extend([l.weight, l.bias]);
    }
    for l in [&clf, &aug.gate, &aug.phi1, &aug.phi2, &aug.phi3] {
        params.extend([l.weight, l.bias]);
    }

    let mut feats = Vec::with_capacity(batch.cells.len());
    let mut labels = Vec::new();
    let mut terms = Vec::new();
    let mut skipped = 0;
    for cell in &batch.cells {
        let x = tape.constant(cell.inputs.clone());
        let q = enc.encode(&mut tape, x)?;
        feats.push(q);
        labels.extend(std::iter::repeat(cell.class).take(cell.inputs.shape()[0]));
        let Some(mode) = opts.algorithm.augment_mode() else {
            continue;
        };
        let pos = store.positive_pool(cell.class, cell.slot)?;
        let neg = store.negative_pool(cell.class, cell.slot)?;
        if pos.is_empty() || neg.is_empty() {
            skipped += 1;
        } else {
            let k = augment_batch(&mut tape, q, &pos.matrix, &aug, mode, opts.grad_routing)?;
            let qn = tape.l2_normalize_rows(q)?;
            terms.push(nt_xent_rows(&mut tape, qn, k.k, &neg.matrix, opts.tau, opts.include_positive)?);
        }
        enqueue_teacher(bundle, store, cell)?;
    }
    let all = tape.concat_rows(&feats)?;
    let logits = classify(&mut tape, &clf, all)?;
    let l_ce = cross_entropy_total(&mut tape, logits, &labels)?;
    let l_cl = contrastive_total(&mut tape, &terms)?;
    let total = total_loss(&mut tape, l_ce, l_cl, opts.lambda)?;
    let report = LossReport {
        l_cl: tape.value(l_cl).item(),
        l_ce: tape.value(l_ce).item(),
        l_total: tape.value(total).item(),
        skipped_cells: skipped,
        tau: opts.tau,
        lambda: opts.lambda,
    };
    Ok(StepGraph {
        tape,
        total,
        report,
        params,
    })
}

/// Model, optimizer and queue state of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub bundle: ModelBundle,
    pub adam: AdamState,
    pub store: QueueStore,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, input_dim: usize, classes: usize, train_domains: usize) -> Result<Self> {
        config.validate()?;
        let bundle = ModelBundle::init(&config.model_config(input_dim, classes), config.seed)?;
        Ok(Self::from_bundle(config, bundle, train_domains)?)
    }

    pub fn from_bundle(config: TrainConfig, bundle: ModelBundle, train_domains: usize) -> Result<Self> {
        let shapes = trainable_shapes(&bundle);
        let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let adam = AdamState::new(config.adam(), &refs);
        let store = QueueStore::new(bundle.classes(), train_domains, bundle.embed_dim(), config.queue_sz)?;
        Ok(Self {
            config,
            bundle,
            adam,
            store,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Fills the queues once from `batch`; a no-op for ERM.
    pub fn warm_up(&mut self, batch: &StructuredBatch) -> Result<()> {
        if self.config.algorithm == Algorithm::Erm {
            return Ok(());
        }
        for cell in &batch.cells {
            enqueue_teacher(&self.bundle, &mut self.store, cell)?;
        }
        Ok(())
    }

    /// Loss, backward, Adam on the trainable parameters, then the EMA
    /// teacher update (skipped for ERM).
    pub fn update_step(&mut self, batch: &StructuredBatch) -> Result<StepMetrics> {
        let start = Instant::now();
        let opts = StepOptions::from(&self.config);
        let graph = build_step(&self.bundle, &mut self.store, batch, &opts)?;
        let grads = graph.tape.backward(graph.total)?;
        let g: Vec<Tensor> = graph.params.iter().map(|v| grads.wrt(*v)).collect();
        drop(graph.tape);
        let mut params = trainable_params_mut(&mut self.bundle);
        self.adam.step(&mut params, &g)?;
        if self.config.algorithm != Algorithm::Erm {
            self.bundle.ema_update(self.config.mu)?;
        }
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            l_ce: graph.report.l_ce,
            l_cl: graph.report.l_cl,
            l_total: graph.report.l_total,
            skipped_cells: graph.report.skipped_cells,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }
}

/// Accuracies at one evaluation boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: usize,
    pub l_ce: f64,
    pub l_cl: f64,
    pub l_total: f64,
    pub skipped_cells: usize,
    /// Big splits of the training domains.
    pub acc_train: f64,
    /// Union of the training domains' small splits.
    pub acc_val: f64,
    /// Whole test domain; absent without one.
    pub acc_test: Option<f64>,
    /// Test domain's small split.
    pub acc_test_small: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,l_ce,l_cl,l_total,skipped_cells,acc_train,acc_val,acc_test";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub train_domains: Vec<usize>,
    pub test_domain: Option<usize>,
    pub steps: Vec<StepMetrics>,
    pub evals: Vec<EvalRow>,
    #[serde(rename = "final")]
    pub final_eval: EvalRow,
    pub checkpoint: Option<PathBuf>,
}

pub struct RunOutput {
    pub record: RunRecord,
    pub bundle: ModelBundle,
    pub wall_time: f64,
}

const BATCH_STREAM: u64 = 1;
const WARMUP_STREAM: u64 = 2;

fn evaluate(bundle: &ModelBundle, dataset: &DomainDataset, p: &Partition, m: &StepMetrics) -> Result<EvalRow> {
    let opt = |refs: &[ExampleRef]| -> Result<Option<f64>> {
        if refs.is_empty() {
            Ok(None)
        } else {
            accuracy(bundle, dataset, refs).map(Some)
        }
    };
    Ok(EvalRow {
        step: m.step,
        l_ce: m.l_ce,
        l_cl: m.l_cl,
        l_total: m.l_total,
        skipped_cells: m.skipped_cells,
        acc_train: accuracy(bundle, dataset, &p.train_big)?,
        acc_val: accuracy(bundle, dataset, &p.train_small)?,
        acc_test: opt(&p.test)?,
        acc_test_small: opt(&p.test_small)?,
    })
}

pub fn metrics_csv(evals: &[EvalRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for e in evals {
        let test = e.acc_test.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            e.step, e.l_ce, e.l_cl, e.l_total, e.skipped_cells, e.acc_train, e.acc_val, test
        )
        .unwrap();
    }
    out
}

/// Full run: warm-up, `steps` updates, evaluation every `eval_every` steps
/// and at the end. With `out`, writes `metrics.csv`, `record.json` and
/// `checkpoint/` there.
pub fn train_run(config: &TrainConfig, dataset: &DomainDataset, out: Option<&Path>) -> Result<RunOutput> {
    let start = Instant::now();
    config.validate()?;
    let (train_domains, test_domain) = config.domains(dataset.domains())?;
    let partition = dataset.partition(&train_domains, test_domain)?;
    let mut sampler = Sampler::new(&partition, dataset.classes(), config.seed, BATCH_STREAM)?;
    let mut trainer = Trainer::new(
        config.clone(),
        dataset.input_dim(),
        dataset.classes(),
        train_domains.len(),
    )?;
    if config.algorithm != Algorithm::Erm {
        let mut warm = Sampler::new(&partition, dataset.classes(), config.seed, WARMUP_STREAM)?;
        trainer.warm_up(&warm.next(dataset, config.batch_per_cell))?;
    }

    let mut steps = Vec::with_capacity(config.steps);
    let mut evals = Vec::new();
    for _ in 0..config.steps {
        let batch = sampler.next(dataset, config.batch_per_cell);
        let m = trainer.update_step(&batch)?;
        if m.step % config.eval_every == 0 || m.step == config.steps {
            evals.push(evaluate(&trainer.bundle, dataset, &partition, &m)?);
        }
        steps.push(m);
    }
    let final_eval = match evals.last() {
        Some(e) => *e,
        None => {
            let m = StepMetrics {
                step: 0,
                l_ce: f64::NAN,
                l_cl: f64::NAN,
                l_total: f64::NAN,
                skipped_cells: 0,
                wall_time: 0.0,
            };
            let e = evaluate(&trainer.bundle, dataset, &partition, &m)?;
            evals.push(e);
            e
        }
    };

    let mut record = RunRecord {
        config: config.clone(),
        seed: config.seed,
        train_domains,
        test_domain,
        steps,
        evals,
        final_eval,
        checkpoint: None,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt = dir.join("checkpoint");
        save_checkpoint(&trainer.bundle, &ckpt)?;
        record.checkpoint = Some(ckpt);
        let csv = dir.join("metrics.csv");
        fs::write(&csv, metrics_csv(&record.evals)).map_err(|e| Error::io(&csv, e))?;
        write_json(&dir.join("record.json"), &record)?;
    }
    Ok(RunOutput {
        record,
        bundle: trainer.bundle,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

const CHECKPOINT_FORMAT: &str = "rcerm-checkpoint-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    model: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

/// Writes every parameter, teacher included, as one tensor file plus a
/// manifest.
pub fn save_checkpoint(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for (name, t) in bundle.named_params() {
        let file = format!("{name}.rct");
        t.save(&dir.join(&file))?;
        params.push(ParamEntry {
            name,
            file,
            shape: t.shape().to_vec(),
        });
    }
    let hidden = bundle.query.layers[..bundle.query.layers.len() - 1]
        .iter()
        .map(|l| l.output_dim())
        .collect();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        model: ModelConfig {
            input_dim: bundle.query.input_dim(),
            hidden,
            embed_dim: bundle.embed_dim(),
            classes: bundle.classes(),
            mu: bundle.mu,
            lambda: bundle.lambda,
            tau: bundle.tau,
        },
        params,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelBundle> {
    let mpath = dir.join("manifest.json");
    let manifest: CheckpointManifest = read_json(&mpath)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(&mpath, format!("unknown format tag {:?}", manifest.format)));
    }
    let mut bundle = ModelBundle::init(&manifest.model, 0)
        .map_err(|e| Error::format(&mpath, format!("invalid model config: {e}")))?;
    let mut slots = bundle.named_params_mut();
    if slots.len() != manifest.params.len() {
        return Err(Error::format(
            &mpath,
            format!("expected {} parameters, found {}", slots.len(), manifest.params.len()),
        ));
    }
    for ((name, slot), entry) in slots.iter_mut().zip(&manifest.params) {
        if *name != entry.name {
            return Err(Error::format(&mpath, format!("expected parameter {name}, found {}", entry.name)));
        }
        let path = dir.join(&entry.file);
        let t = Tensor::load(&path).map_err(|e| match e {
            Error::Format { path, detail } => Error::Format {
                path,
                detail: format!("parameter {name}: {detail}"),
            },
            Error::Io { path, source } => Error::format(path, format!("parameter {name}: {source}")),
            other => other,
        })?;
        if t.shape() != slot.shape() || t.shape() != entry.shape.as_slice() {
            return Err(Error::format(
                &path,
                format!("parameter {name} has shape {:?}, expected {:?}", t.shape(), slot.shape()),
            ));
        }
        **slot = t;
    }
    Ok(bundle)
}

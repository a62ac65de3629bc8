//! Joint training of the classifier and the decoupling head.
//!
//! One step: encode each instance, classify, decouple, sample both banks and
//! score InfoNCE against them, average over the batch, take an SGD step, and
//! only then write the batch's embeddings into the banks.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::contrast::{
    contrast_losses, info_nce, sample_contrast, BankKind, ContrastConfig, ContrastError, ContrastSample, DualBank,
    LossForm, MemoryBank, PendingUpdate, SamplerRng,
};
use crate::data::{Dataset, SkeletonSequence};
use crate::encoder::{classify, sequence_input, EncoderConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{uniform, Instance, OpCase, OP_TOLERANCE, PIPELINE_TOLERANCE};
use crate::metrics::{accuracy, silhouette, unit_rows};
use crate::model::{BoundModel, Model, ModelSpec};
use crate::param::Param;
use crate::stfd::{decouple_on_tape, random_feature_map, DecoupledPair, StfdConfig, StfdParams};
use crate::tensor::{Real, Tape, TensorError, Var};

/// Stream for the per-epoch shuffle.
const SHUFFLE_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Real,
    pub momentum: Real,
    pub weight_decay: Real,
    /// Epochs at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: Real,
    pub seed: u64,
    pub framework_enabled: bool,
    pub lambda_ce: Real,
    pub lambda_spa: Real,
    pub lambda_tem: Real,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Rescale the full gradient to at most this L2 norm. Off when absent.
    pub grad_clip_norm: Option<Real>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 0.1,
            seed: 0,
            framework_enabled: true,
            lambda_ce: 1.0,
            lambda_spa: 1.0,
            lambda_tem: 1.0,
            checkpoint_every: 0,
            grad_clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.batch_size == 0 {
            return Err("train.batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("train.learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(format!("train.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(format!("train.lr_decay_factor must lie in (0, 1], got {}", self.lr_decay_factor));
        }
        for (name, v) in [("lambda_ce", self.lambda_ce), ("lambda_spa", self.lambda_spa), ("lambda_tem", self.lambda_tem)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("train.{name} must be a finite value >= 0, got {v}"));
            }
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(format!("train.grad_clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Step-decayed learning rate for a zero-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> Real {
        let drops = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate * self.lr_decay_factor.powi(drops as i32)
    }
}

/// SGD with momentum and decoupled-free L2 weight decay:
/// `v ← μv + (g + λp)`, `p ← p − lr·v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: Real,
    pub weight_decay: Real,
    velocity: Vec<Vec<Real>>,
}

impl Sgd {
    pub fn new(momentum: Real, weight_decay: Real) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut Param>, grads: &[Vec<Real>], lr: Real) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((w, gi), vi) in p.value.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + (gi + self.weight_decay * *w);
                *w -= lr * *vi;
            }
        }
    }
}

/// Per-term weights of the total loss. Zero-weight terms are left out of the
/// graph entirely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: Real,
    pub spa: Real,
    pub tem: Real,
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        Self { ce: c.lambda_ce, spa: c.lambda_spa, tem: c.lambda_tem }
    }
}

/// Where contrast samples come from.
pub enum SampleSource<'a> {
    /// Draw fresh samples from the banks.
    Draw(&'a mut SamplerRng),
    /// Reuse given `(spatial, temporal)` samples, one pair per instance.
    Fixed(&'a [(ContrastSample, ContrastSample)]),
}

/// Loss graph of one batch.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub total: Var,
    pub l_ce: Var,
    pub l_spa: Option<Var>,
    pub l_tem: Option<Var>,
    /// Samples used per instance; `None` for instances skipped as degenerate.
    pub samples: Vec<Option<(ContrastSample, ContrastSample)>>,
    pub updates: Vec<PendingUpdate>,
    pub skipped_spa: usize,
    pub skipped_tem: usize,
}

/// Map numeric failures to an error naming the loss term being computed.
fn in_term<T, E: Into<Error>>(term: &'static str, r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| match e.into() {
        Error::Tensor(t @ (TensorError::NonFinite { .. } | TensorError::Domain { .. }))
        | Error::Contrast(ContrastError::Tensor(t @ (TensorError::NonFinite { .. } | TensorError::Domain { .. }))) => {
            Error::NonFinite { term, detail: t.to_string() }
        }
        other => other,
    })
}

/// Record the batch loss `λ_ce·L_CE + λ_spa·L_spa + λ_tem·L_tem`, each term
/// averaged over the batch. The contrastive terms are present only when the
/// model carries a decoupling head and `banks` is given.
pub fn forward_batch(
    tape: &mut Tape,
    model: &Model,
    bound: &BoundModel,
    batch: &[&SkeletonSequence],
    banks: Option<&DualBank>,
    contrast: &ContrastConfig,
    weights: LossWeights,
    mut source: SampleSource<'_>,
) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let framework = match (model.stfd(), &bound.stfd, banks) {
        (Some(head), Some(w), Some(b)) => Some((head, w, b)),
        _ => None,
    };
    let want_contrast = framework.is_some() && (weights.spa != 0.0 || weights.tem != 0.0);
    let scale = 1.0 / batch.len() as Real;

    let mut ce_terms = Vec::with_capacity(batch.len());
    let mut spa_terms = Vec::new();
    let mut tem_terms = Vec::new();
    let mut samples = Vec::with_capacity(batch.len());
    let mut updates = Vec::new();
    let (mut skipped_spa, mut skipped_tem) = (0, 0);

    for (i, seq) in batch.iter().enumerate() {
        let x = in_term("L_CE", sequence_input(tape, seq))?;
        let features = in_term("L_CE", model.encoder().forward(tape, &bound.encoder, x))?;
        let z = in_term("L_CE", classify(tape, features, &bound.head))?;
        ce_terms.push(in_term("L_CE", tape.softmax_cross_entropy(z, seq.label))?);

        let Some((head, w, banks)) = framework else { continue };
        if !want_contrast {
            continue;
        }
        let dv = in_term("L_spa", decouple_on_tape(tape, features, head, w))?;
        let sampled = match &mut source {
            SampleSource::Draw(rng) => {
                match contrast_losses(tape, dv.s, dv.t, seq.label, seq.index, banks, contrast, rng) {
                    Ok((losses, s_sample, t_sample)) => Some((losses, s_sample, t_sample)),
                    Err(ContrastError::Degenerate { norm, .. }) => {
                        log::warn!("sequence {}: degenerate embedding (norm {norm:e}), contrast skipped", seq.index);
                        None
                    }
                    Err(e) => return Err(in_term("L_spa", Err::<(), _>(e)).unwrap_err()),
                }
            }
            SampleSource::Fixed(fixed) => {
                let (s_sample, t_sample) = fixed
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("no fixed sample for batch position {i}")))?;
                let spatial = in_term("L_spa", info_nce(tape, dv.s, &s_sample, &banks.spatial, contrast))?;
                let temporal = in_term("L_tem", info_nce(tape, dv.t, &t_sample, &banks.temporal, contrast))?;
                Some((crate::contrast::PairLosses { spatial, temporal }, s_sample, t_sample))
            }
        };
        match sampled {
            Some((losses, s_sample, t_sample)) => {
                skipped_spa += losses.spatial.skipped_terms;
                skipped_tem += losses.temporal.skipped_terms;
                spa_terms.extend(losses.spatial.loss);
                tem_terms.extend(losses.temporal.loss);
                samples.push(Some((s_sample, t_sample)));
                updates.push(PendingUpdate {
                    index: seq.index,
                    label: seq.label,
                    s: tape.value(dv.s).to_vec(),
                    t: tape.value(dv.t).to_vec(),
                });
            }
            None => {
                skipped_spa += 1;
                skipped_tem += 1;
                samples.push(None);
            }
        }
    }

    let mean_of = |tape: &mut Tape, terms: &[Var]| -> std::result::Result<Var, TensorError> {
        let s = if terms.len() == 1 {
            terms[0]
        } else {
            let all = tape.concat_flatten(terms)?;
            tape.sum(all)?
        };
        tape.scalar_mul(s, scale)
    };
    let l_ce = in_term("L_CE", mean_of(tape, &ce_terms))?;
    let l_spa = if spa_terms.is_empty() { None } else { Some(in_term("L_spa", mean_of(tape, &spa_terms))?) };
    let l_tem = if tem_terms.is_empty() { None } else { Some(in_term("L_tem", mean_of(tape, &tem_terms))?) };

    let mut weighted = Vec::new();
    for (term, v, lambda) in [("L_CE", Some(l_ce), weights.ce), ("L_spa", l_spa, weights.spa), ("L_tem", l_tem, weights.tem)] {
        if let Some(v) = v.filter(|_| lambda != 0.0) {
            weighted.push(if lambda == 1.0 { v } else { in_term(term, tape.scalar_mul(v, lambda))? });
        }
    }
    let total = match weighted.len() {
        0 => in_term("total", tape.constant(Vec::new(), vec![0.0]))?,
        1 => weighted[0],
        _ => {
            let mut acc = weighted[0];
            for &w in &weighted[1..] {
                acc = in_term("total", tape.add(acc, w))?;
            }
            acc
        }
    };
    Ok(BatchForward { total, l_ce, l_spa, l_tem, samples, updates, skipped_spa, skipped_tem })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: Real,
    pub l_ce: Real,
    pub l_spa: Real,
    pub l_tem: Real,
    pub total: Real,
    pub skipped_spa: usize,
    pub skipped_tem: usize,
    pub wall_ms: f64,
}

/// Per-epoch means plus accuracy on the evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: Real,
    pub l_ce: Real,
    pub l_spa: Real,
    pub l_tem: Real,
    pub total: Real,
    pub accuracy: Real,
}

/// Model, optimiser state, banks and sampler streams of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model,
    optimizer: Sgd,
    banks: Option<DualBank>,
    sampler: SamplerRng,
    contrast: ContrastConfig,
    weights: LossWeights,
    clip: Option<Real>,
    checked: bool,
    steps: usize,
}

impl Trainer {
    /// `bank_len` is the dataset size; banks exist only when the model has a
    /// decoupling head.
    pub fn new(model: Model, cfg: &RunConfig, bank_len: usize) -> Self {
        let banks = model.stfd().map(|h| DualBank::new(bank_len, h.embedding_dim()));
        Self {
            model,
            optimizer: Sgd::new(cfg.train.momentum, cfg.train.weight_decay),
            banks,
            sampler: SamplerRng::new(cfg.train.seed),
            contrast: cfg.contrast.clone(),
            weights: LossWeights::from(&cfg.train),
            clip: cfg.train.grad_clip_norm,
            checked: cfg.numeric.checked,
            steps: 0,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn banks(&self) -> Option<&DualBank> {
        self.banks.as_ref()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One SGD step on `batch`. On error the model, optimiser and banks are
    /// left untouched.
    pub fn step(&mut self, batch: &[&SkeletonSequence], epoch: usize, lr: Real) -> Result<StepRecord> {
        let started = Instant::now();
        let mut tape = Tape::new().with_checked(self.checked);
        let bound = self.model.bind(&mut tape, true)?;
        let mut sampler = self.sampler.clone();
        let fwd = forward_batch(
            &mut tape,
            &self.model,
            &bound,
            batch,
            self.banks.as_ref(),
            &self.contrast,
            self.weights,
            SampleSource::Draw(&mut sampler),
        )?;
        let total = tape.scalar(fwd.total);
        if self.checked && !total.is_finite() {
            return Err(Error::NonFinite { term: "total", detail: format!("loss value {total}") });
        }
        let grads = in_term("total", tape.backward(fwd.total))?;
        let vars = bound.all();
        let mut grad_values: Vec<Vec<Real>> =
            self.model.params().iter().zip(&vars).map(|(p, &v)| grads.get_or_zeros(v, p.value.len())).collect();
        if self.checked {
            if let Some(p) = self.model.params().iter().zip(&grad_values).find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite { term: "total", detail: format!("gradient of {}", p.0.name) });
            }
        }
        if let Some(max) = self.clip {
            clip_global_norm(&mut grad_values, max);
        }

        self.optimizer.step(self.model.params_mut(), &grad_values, lr);
        if let Some(banks) = &mut self.banks {
            for u in &fwd.updates {
                banks.apply(u)?;
            }
        }
        self.sampler = sampler;
        self.steps += 1;
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
        Ok(StepRecord {
            step: self.steps,
            epoch,
            lr,
            l_ce: tape.scalar(fwd.l_ce),
            l_spa: value(fwd.l_spa),
            l_tem: value(fwd.l_tem),
            total,
            skipped_spa: fwd.skipped_spa,
            skipped_tem: fwd.skipped_tem,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Scale all gradients by a common factor so their joint L2 norm is at most
/// `max`. Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Vec<Real>], max: Real) -> Real {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<Real>().sqrt();
    if norm > max {
        let k = max / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// Model structure implied by a dataset and a run configuration.
pub fn model_spec(dataset: &Dataset, cfg: &RunConfig) -> Result<ModelSpec> {
    let frames = dataset
        .frames()
        .ok_or_else(|| Error::Config("sequences differ in frame count; set data.frames to resample".into()))?;
    let spec = ModelSpec {
        joints: dataset.joints(),
        frames,
        num_classes: dataset.num_classes(),
        encoder: cfg.model.clone(),
        stfd: cfg.train.framework_enabled.then(|| cfg.stfd.clone()),
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: Model,
    pub banks: Option<DualBank>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Files written under the output directory, by role.
    pub artifacts: Vec<(String, PathBuf)>,
}

/// Train for `cfg.train.epochs` epochs. When `out_dir` is given, writes
/// `metrics.csv`, `timing.csv`, periodic checkpoints and `final.ckpt`.
pub fn fit(dataset: &Dataset, cfg: &RunConfig, eval: Option<&Dataset>, out_dir: Option<&Path>) -> Result<FitOutcome> {
    cfg.validate()?;
    let spec = model_spec(dataset, cfg)?;
    let model = Model::new(spec, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg, dataset.len());
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    shuffle.set_stream(SHUFFLE_STREAM);
    let eval_set = eval.unwrap_or(dataset);

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut artifacts = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.train.epochs {
        let lr = cfg.train.learning_rate_at(epoch);
        order.shuffle(&mut shuffle);
        let first = steps.len();
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch: Vec<&SkeletonSequence> = chunk.iter().map(|&i| &dataset.sequences()[i]).collect();
            steps.push(trainer.step(&batch, epoch, lr)?);
        }
        let these = &steps[first..];
        let mean = |f: fn(&StepRecord) -> Real| these.iter().map(f).sum::<Real>() / these.len().max(1) as Real;
        let report = evaluate(eval_set, trainer.model(), None)?;
        let record = EpochRecord {
            epoch,
            lr,
            l_ce: mean(|r| r.l_ce),
            l_spa: mean(|r| r.l_spa),
            l_tem: mean(|r| r.l_tem),
            total: mean(|r| r.total),
            accuracy: report.accuracy,
        };
        log::info!(
            "epoch {epoch}: lr {lr} L_CE {:.4} L_spa {:.4} L_tem {:.4} acc {:.4}",
            record.l_ce,
            record.l_spa,
            record.l_tem,
            record.accuracy
        );
        epochs.push(record);
        if let Some(dir) = out_dir {
            write_metrics(&dir.join("metrics.csv"), &steps, &epochs)?;
            let every = cfg.train.checkpoint_every;
            if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < cfg.train.epochs {
                let name = format!("epoch_{:04}.ckpt", epoch + 1);
                Checkpoint::from_model(trainer.model()).save(&dir.join(&name))?;
                artifacts.push((format!("checkpoint_epoch_{}", epoch + 1), PathBuf::from(name)));
            }
        }
    }

    if let Some(dir) = out_dir {
        write_metrics(&dir.join("metrics.csv"), &steps, &epochs)?;
        write_timing(&dir.join("timing.csv"), &steps)?;
        Checkpoint::from_model(trainer.model()).save(&dir.join("final.ckpt"))?;
        artifacts.push(("metrics".into(), "metrics.csv".into()));
        artifacts.push(("timing".into(), "timing.csv".into()));
        artifacts.push(("checkpoint".into(), "final.ckpt".into()));
    }
    let banks = trainer.banks().cloned();
    Ok(FitOutcome { model: trainer.into_model(), banks, steps, epochs, artifacts })
}

fn fmt_real(v: Real) -> String {
    format!("{v}")
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e.to_string()) }
}

/// Step rows then per-epoch rows, in one table. No wall-clock values, so two
/// runs with the same seed produce identical files.
pub fn write_metrics(path: &Path, steps: &[StepRecord], epochs: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = ["kind", "epoch", "step", "lr", "l_ce", "l_spa", "l_tem", "total", "skipped_spa", "skipped_tem", "accuracy"];
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in steps {
        w.write_record([
            "step".to_string(),
            r.epoch.to_string(),
            r.step.to_string(),
            fmt_real(r.lr),
            fmt_real(r.l_ce),
            fmt_real(r.l_spa),
            fmt_real(r.l_tem),
            fmt_real(r.total),
            r.skipped_spa.to_string(),
            r.skipped_tem.to_string(),
            String::new(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    for r in epochs {
        w.write_record([
            "epoch".to_string(),
            r.epoch.to_string(),
            String::new(),
            fmt_real(r.lr),
            fmt_real(r.l_ce),
            fmt_real(r.l_spa),
            fmt_real(r.l_tem),
            fmt_real(r.total),
            String::new(),
            String::new(),
            fmt_real(r.accuracy),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(Error::io(path))
}

fn write_timing(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["step", "epoch", "wall_ms"]).map_err(|e| csv_error(path, e))?;
    for r in steps {
        w.write_record([r.step.to_string(), r.epoch.to_string(), format!("{:.3}", r.wall_ms)])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(Error::io(path))
}

/// Silhouettes of the decoupled embeddings under one grouping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingSilhouettes {
    pub spatial: Real,
    pub temporal: Real,
}

/// Silhouettes of unit-normalised `s` and `t` grouped by `group_of(label)`.
pub fn embedding_silhouettes(pairs: &[DecoupledPair], group_of: impl Fn(usize) -> usize) -> EmbeddingSilhouettes {
    let groups: Vec<usize> = pairs.iter().map(|p| group_of(p.label)).collect();
    let s: Vec<Vec<Real>> = pairs.iter().map(|p| p.s.data().to_vec()).collect();
    let t: Vec<Vec<Real>> = pairs.iter().map(|p| p.t.data().to_vec()).collect();
    EmbeddingSilhouettes {
        spatial: silhouette(&unit_rows(&s), &groups),
        temporal: silhouette(&unit_rows(&t), &groups),
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: Real,
    pub per_class: Vec<Option<Real>>,
    pub predictions: Vec<usize>,
    pub logits: Vec<Vec<Real>>,
    /// Decoupled embeddings, when requested and the model has the head.
    pub embeddings: Option<Vec<DecoupledPair>>,
}

/// Top-1 accuracy through the inference path. Embeddings are computed
/// separately, only when `embeddings` is `Some(true)`.
pub fn evaluate(dataset: &Dataset, model: &Model, embeddings: Option<bool>) -> Result<EvalReport> {
    let mut logits = Vec::with_capacity(dataset.len());
    for seq in dataset.sequences() {
        logits.push(model.logits(seq)?);
    }
    let predictions: Vec<usize> = logits.iter().map(|z| crate::encoder::argmax(z)).collect();
    let (acc, per_class) = accuracy(&predictions, &dataset.labels(), dataset.num_classes());
    let embeddings = if embeddings == Some(true) && model.stfd().is_some() {
        Some(dataset.sequences().iter().map(|s| model.decoupled(s)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    Ok(EvalReport { accuracy: acc, per_class, predictions, logits, embeddings })
}

// Composite gradient-check cases. Each returns a random instance whose
// inputs are the parameters (and, where meaningful, the data) of the stage.

fn tensor_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}

fn readout(tape: &mut Tape, y: Var, w: Vec<Real>) -> std::result::Result<Var, TensorError> {
    let wv = tape.constant(tape.shape(y).to_vec(), w)?;
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig { channels: 8, hidden: 4, kernel: 3, temporal_stride: 1, ..Default::default() }
}

/// Zero biases put a dead unit's successor exactly on its relu kink, where
/// the derivative is undefined; nonzero biases keep units away from kinks.
fn randomize_biases<'a>(params: impl IntoIterator<Item = &'a mut Param>, rng: &mut ChaCha8Rng) {
    for p in params.into_iter().filter(|p| p.name.ends_with(".bias")) {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}

fn encode_case(rng: &mut ChaCha8Rng) -> std::result::Result<Instance, TensorError> {
    let (j, t0) = (3, 4);
    let mut enc = crate::encoder::build_encoder(&tiny_encoder_config(), j, t0, rng.gen());
    randomize_biases(enc.params_mut(), rng);
    let out_len: usize = enc.output_shape().iter().product();
    let w: Vec<Real> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut inputs = vec![("input".to_string(), uniform(rng, vec![j, t0, 3], -1.0, 1.0))];
    inputs.extend(enc.params().iter().map(|p| (p.name.clone(), p.value.clone())));
    Ok(Instance {
        inputs,
        build: Box::new(move |tape, v| {
            let y = enc.forward(tape, &v[1..], v[0])?;
            readout(tape, y, w.clone())
        }),
    })
}

fn decouple_case(rng: &mut ChaCha8Rng) -> std::result::Result<Instance, TensorError> {
    let (j, t, c) = (3, 4, 8);
    let head = StfdParams::new(j, t, c, &StfdConfig { reduction: 2, embedding_dim: 5 }, rng.gen());
    let ws: Vec<Real> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wt: Vec<Real> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut inputs = vec![("x".to_string(), random_feature_map(rng, [j, t, c]))];
    inputs.extend(head.params().iter().map(|p| (p.name.clone(), p.value.clone())));
    Ok(Instance {
        inputs,
        build: Box::new(move |tape, v| {
            let out = decouple_on_tape(tape, v[0], &head, &v[1..])?;
            let a = readout(tape, out.s, ws.clone())?;
            let b = readout(tape, out.t, wt.clone())?;
            tape.add(a, b)
        }),
    })
}

/// A bank of random unit rows with alternating labels.
fn random_bank(rng: &mut ChaCha8Rng, kind: BankKind, len: usize, dim: usize, classes: usize) -> MemoryBank {
    let mut bank = MemoryBank::new(kind, len, dim);
    for i in 0..len {
        let row: Vec<Real> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        bank.update(i, &row, i % classes).expect("random row is valid");
    }
    bank
}

fn info_nce_case(rng: &mut ChaCha8Rng) -> std::result::Result<Instance, TensorError> {
    let (len, dim) = (8, 5);
    let bank = random_bank(rng, BankKind::Spatial, len, dim, 2);
    let cfg = ContrastConfig { tau: 0.5, n_pos_hard: 2, n_neg_hard: 2, n_neg_rand: 1, loss_form: LossForm::Exponentiated };
    let anchor = uniform(rng, vec![dim], -1.0, 1.0);
    let label = rng.gen_range(0..2);
    let sample = sample_contrast(&bank, anchor.data(), label, len, &cfg, rng)
        .map_err(|e| TensorError::Invalid(e.to_string()))?;
    Ok(Instance {
        inputs: vec![("anchor".to_string(), anchor)],
        build: Box::new(move |tape, v| {
            let out = info_nce(tape, v[0], &sample, &bank, &cfg).map_err(|e| match e {
                ContrastError::Tensor(t) => t,
                other => TensorError::Invalid(other.to_string()),
            })?;
            out.loss.ok_or_else(|| TensorError::Invalid("no positives".into()))
        }),
    })
}

/// The whole training loss on a two-instance batch against prefilled banks.
fn pipeline_case(rng: &mut ChaCha8Rng) -> std::result::Result<Instance, TensorError> {
    let (j, t0, k, len, dim) = (3, 4, 2, 8, 5);
    let spec = ModelSpec {
        joints: j,
        frames: t0,
        num_classes: k,
        encoder: tiny_encoder_config(),
        stfd: Some(StfdConfig { reduction: 2, embedding_dim: dim }),
    };
    let mut model = Model::new(spec, rng.gen()).map_err(tensor_err)?;
    randomize_biases(model.params_mut(), rng);
    let batch: Vec<SkeletonSequence> = (0..2)
        .map(|i| {
            let coords = (0..j * t0 * 3).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            SkeletonSequence::new(i, i % k, j, t0, coords).expect("valid sequence")
        })
        .collect();
    let banks = DualBank {
        spatial: random_bank(rng, BankKind::Spatial, len, dim, k),
        temporal: random_bank(rng, BankKind::Temporal, len, dim, k),
    };
    let contrast = ContrastConfig { tau: 0.5, n_pos_hard: 2, n_neg_hard: 2, n_neg_rand: 2, loss_form: LossForm::Exponentiated };
    let weights = LossWeights { ce: 1.0, spa: 0.7, tem: 1.3 };

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false).map_err(tensor_err)?;
    let refs: Vec<&SkeletonSequence> = batch.iter().collect();
    let mut sampler = SamplerRng::new(rng.gen());
    let fwd = forward_batch(&mut tape, &model, &bound, &refs, Some(&banks), &contrast, weights, SampleSource::Draw(&mut sampler))
        .map_err(tensor_err)?;
    let fixed: Vec<(ContrastSample, ContrastSample)> =
        fwd.samples.into_iter().map(|s| s.expect("random features are not degenerate")).collect();

    let inputs: Vec<(String, crate::tensor::Tensor)> =
        model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    let n_enc = model.encoder().params().len();
    let n_head = model.head().params().len();
    Ok(Instance {
        inputs,
        build: Box::new(move |tape, v| {
            let bound = BoundModel {
                encoder: v[..n_enc].to_vec(),
                head: v[n_enc..n_enc + n_head].to_vec(),
                stfd: Some(v[n_enc + n_head..].to_vec()),
            };
            let refs: Vec<&SkeletonSequence> = batch.iter().collect();
            let fwd = forward_batch(tape, &model, &bound, &refs, Some(&banks), &contrast, weights, SampleSource::Fixed(&fixed))
                .map_err(tensor_err)?;
            Ok(fwd.total)
        }),
    })
}

/// Composite cases registered with the gradient-check runner.
pub fn gradcheck_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "encode", tolerance: OP_TOLERANCE, sample: encode_case },
        OpCase { name: "decouple", tolerance: OP_TOLERANCE, sample: decouple_case },
        OpCase { name: "info_nce", tolerance: OP_TOLERANCE, sample: info_nce_case },
        OpCase { name: "pipeline", tolerance: PIPELINE_TOLERANCE, sample: pipeline_case },
    ]
}

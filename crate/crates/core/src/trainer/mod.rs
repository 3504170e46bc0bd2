//! Training loops for the supervised-only baseline, the mean-teacher
//! baseline and the three-model teaching-assistant method.

pub mod ablation;
pub mod config;
pub mod report;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkernel::{sgd_step, Gradients, SgdState, Tape, Tensor};
use crate::pseudolabel::{label_batch, supervised_loss, unsupervised_loss, PseudoLabelMap};
use crate::segmodel::{self, clone_params, init_model, ParamStore};
use crate::synthdata::{ConfusionMatrix, DatasetSplit, IouReport, SegSample};
use crate::transmission::{ema_update, update_teacher, EmaConfig};

pub use config::{GtaData, Method, ScopeName, StudentData, TrainConfig};
pub use report::{EpochRecord, FinalSummary, ModelKind, PseudoLabelStats, RunReport, METRICS_HEADER};

/// Images stacked to `[B, 3, H, W]` with their masks in `(b, y, x)` order.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub masks: Vec<u16>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a SegSample>) -> Result<Self> {
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for s in samples {
            let mut shape = vec![1];
            shape.extend_from_slice(s.image.shape());
            images.push(Tensor::new(shape, s.image.data().to_vec())?);
            masks.extend_from_slice(&s.mask);
        }
        Ok(Self {
            images: Tensor::stack(&images)?,
            masks,
        })
    }
}

/// The models live in one run. SupOnly only uses `student`.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub teacher: ParamStore,
    pub gta: ParamStore,
    pub student: ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub iters_per_epoch: usize,
    pub sgd: SgdState,
}

impl Schedule {
    /// `ceil(N_u / B_u)` iterations per epoch (falling back to the labeled
    /// set when there is no unlabeled data), warmup included in the total.
    pub fn new(config: &TrainConfig, n_labeled: usize, n_unlabeled: usize) -> Self {
        let iters = if n_unlabeled > 0 {
            n_unlabeled.div_ceil(config.batch_unlabeled)
        } else {
            n_labeled.div_ceil(config.batch_labeled)
        }
        .max(1);
        let mut sgd = SgdState::new(config.lr_init, config.weight_decay, iters * config.epochs);
        sgd.power = config.lr_power;
        Self {
            iters_per_epoch: iters,
            sgd,
        }
    }
}

fn stream_seed(seed: u64, epoch: usize, stream: u64, pass: usize) -> u64 {
    let mut x = seed
        ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ stream.wrapping_mul(0xbf58_476d_1ce4_e5b9)
        ^ (pass as u64).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    x
}

/// Batches of indices drawn from a shuffled order that is reshuffled each
/// time it runs out. The sequence is a pure function of `(seed, epoch)`.
struct IndexStream {
    n: usize,
    seed: u64,
    epoch: usize,
    tag: u64,
    pass: usize,
    order: Vec<usize>,
    pos: usize,
}

impl IndexStream {
    fn new(n: usize, seed: u64, epoch: usize, tag: u64) -> Self {
        let mut s = Self {
            n,
            seed,
            epoch,
            tag,
            pass: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, self.epoch, self.tag, self.pass));
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng);
        self.pos = 0;
        self.pass += 1;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.n) {
            if self.pos == self.n {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    /// Next batch without wrapping; empty once the pass is used up.
    fn next_within_pass(&mut self, size: usize) -> Vec<usize> {
        let end = (self.pos + size).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

const LABELED_STREAM: u64 = 1;
const UNLABELED_STREAM: u64 = 2;

fn gather<'a>(samples: &'a [SegSample], idx: &[usize]) -> impl Iterator<Item = &'a SegSample> + 'a {
    let idx = idx.to_vec();
    idx.into_iter().map(move |i| &samples[i])
}

/// Losses and pseudo-label statistics from one iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub loss_l: f64,
    pub loss_u: f64,
    pub lr: f32,
    pub kept_fraction: f64,
    pub mean_weight: f64,
    pub gamma: f32,
    pub gta_skipped: bool,
    pub pseudo: PseudoLabelStats,
}

fn check_finite(value: f64, what: &str, t: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric {
            iteration: t,
            message: format!("{what} is {value}"),
        })
    }
}

/// Supervised loss and its gradients at the current parameters.
fn supervised_grads(params: &ParamStore, batch: &Batch, t: usize) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let x = tape.input(batch.images.clone());
    let logits = bound.forward(&mut tape, x)?;
    let loss = supervised_loss(&mut tape, logits, &batch.masks)?;
    let value = check_finite(tape.value(loss).data()[0] as f64, "supervised loss", t)?;
    Ok((value, tape.backward(loss)?))
}

/// One supervised SGD step on `params`; returns the loss.
fn supervised_step(params: &mut ParamStore, batch: &Batch, sgd: &SgdState, t: usize) -> Result<f64> {
    let (value, grads) = supervised_grads(params, batch, t)?;
    sgd_step(params, &grads, sgd, t)?;
    Ok(value)
}

/// Weighted pseudo-label loss (plus a supervised term when
/// `extra_labeled` is given) and its gradients at the current parameters.
fn pseudo_grads(
    params: &ParamStore,
    batch: &Batch,
    map: &PseudoLabelMap,
    extra_labeled: Option<&Batch>,
    t: usize,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let xu = tape.input(batch.images.clone());
    let logits_u = bound.forward(&mut tape, xu)?;
    let mut loss = unsupervised_loss(&mut tape, logits_u, map)?;
    if let Some(lb) = extra_labeled {
        let xl = tape.input(lb.images.clone());
        let logits_l = bound.forward(&mut tape, xl)?;
        let sup = supervised_loss(&mut tape, logits_l, &lb.masks)?;
        loss = tape.add(loss, sup)?;
    }
    let value = check_finite(tape.value(loss).data()[0] as f64, "unsupervised loss", t)?;
    Ok((value, tape.backward(loss)?))
}

/// One SGD step on the weighted pseudo-label loss; returns the loss.
fn pseudo_step(
    params: &mut ParamStore,
    batch: &Batch,
    map: &PseudoLabelMap,
    extra_labeled: Option<&Batch>,
    sgd: &SgdState,
    t: usize,
) -> Result<f64> {
    let (value, grads) = pseudo_grads(params, batch, map, extra_labeled, t)?;
    sgd_step(params, &grads, sgd, t)?;
    Ok(value)
}

fn pseudo_stats(map: &PseudoLabelMap, hidden_masks: &[u16]) -> PseudoLabelStats {
    let mut s = PseudoLabelStats {
        empty_batches: usize::from(map.is_empty()),
        fallback_batches: usize::from(map.fallback_keep_all),
        ..Default::default()
    };
    for ((label, &w), &truth) in map.labels.iter().zip(&map.weights).zip(hidden_masks) {
        let Some(label) = *label else { continue };
        s.kept_pixels += 1;
        if label == truth {
            s.correct_pixels += 1;
            s.correct_weight_sum += w as f64;
        } else {
            s.wrong_weight_sum += w as f64;
        }
    }
    s
}

fn teacher_labels(teacher: &ParamStore, batch_u: &Batch, config: &TrainConfig) -> Result<PseudoLabelMap> {
    let logits = segmodel::forward(teacher, &batch_u.images)?;
    label_batch(&logits, config.threshold_rule(), &config.reweight_config())
}

/// One iteration of the teaching-assistant method:
/// 1. the teacher pseudo-labels the unlabeled batch, labels are re-weighted;
/// 2. the assistant takes an SGD step on them, then its extractor is
///    blended into the student;
/// 3. the student takes a supervised step and the teacher tracks the
///    student by EMA.
///
/// The blend in step 2 reads the student's state from before this
/// iteration, and so does the student's gradient in step 3: both are
/// evaluated at the student's previous parameters and applied in that
/// order. The student's predictor therefore depends only on its previous
/// parameters, the labeled batch and the learning rate; the unlabeled
/// batch reaches the student through its extractor alone.
pub fn gta_train_step(
    batch_l: &Batch,
    batch_u: &Batch,
    models: &mut Models,
    config: &TrainConfig,
    sgd: &SgdState,
    t: usize,
) -> Result<StepMetrics> {
    // Step 1
    let map = teacher_labels(&models.teacher, batch_u, config)?;
    let mut m = StepMetrics {
        lr: sgd.poly_lr(t)?,
        kept_fraction: map.kept_fraction as f64,
        mean_weight: map.mean_kept_weight() as f64,
        gamma: map.gamma,
        pseudo: pseudo_stats(&map, &batch_u.masks),
        ..Default::default()
    };
    let student_grads = match config.student_data() {
        StudentData::Labeled => Some(supervised_grads(&models.student, batch_l, t)?),
        StudentData::Pseudo if map.is_empty() => None,
        StudentData::Pseudo => Some(pseudo_grads(&models.student, batch_u, &map, None, t)?),
    };

    // Step 2
    match config.gta_data() {
        GtaData::Pseudo if map.is_empty() => m.gta_skipped = true,
        GtaData::Pseudo => m.loss_u = pseudo_step(&mut models.gta, batch_u, &map, None, sgd, t)?,
        GtaData::Labeled => m.loss_u = supervised_step(&mut models.gta, batch_l, sgd, t)?,
        GtaData::Both => {
            m.loss_u = pseudo_step(&mut models.gta, batch_u, &map, Some(batch_l), sgd, t)?
        }
    }
    let transfer = EmaConfig::new(config.transmission_alpha(), config.transmission_scope());
    ema_update(&mut models.student, &models.gta, &transfer)?;

    // Step 3
    if let Some((loss, grads)) = student_grads {
        m.loss_l = loss;
        sgd_step(&mut models.student, &grads, sgd, t)?;
    }
    update_teacher(&mut models.teacher, &models.student, config.alpha)?;
    Ok(m)
}

/// One mean-teacher iteration: the student minimizes `L_l + μ·L_u` on
/// unweighted pseudo-labels, then the teacher tracks it by EMA.
pub fn mt_train_step(
    batch_l: &Batch,
    batch_u: &Batch,
    models: &mut Models,
    config: &TrainConfig,
    sgd: &SgdState,
    t: usize,
) -> Result<StepMetrics> {
    let mut plain = config.clone();
    plain.reweight_enabled = false;
    let map = teacher_labels(&models.teacher, batch_u, &plain)?;

    let mut tape = Tape::new();
    let bound = models.student.bind(&mut tape)?;
    let xl = tape.input(batch_l.images.clone());
    let logits_l = bound.forward(&mut tape, xl)?;
    let loss_l = supervised_loss(&mut tape, logits_l, &batch_l.masks)?;
    let xu = tape.input(batch_u.images.clone());
    let logits_u = bound.forward(&mut tape, xu)?;
    let loss_u = unsupervised_loss(&mut tape, logits_u, &map)?;
    let weighted_u = tape.scale(loss_u, config.mu);
    let total = tape.add(loss_l, weighted_u)?;

    let m = StepMetrics {
        loss_l: check_finite(tape.value(loss_l).data()[0] as f64, "supervised loss", t)?,
        loss_u: check_finite(tape.value(loss_u).data()[0] as f64, "unsupervised loss", t)?,
        lr: sgd.poly_lr(t)?,
        kept_fraction: map.kept_fraction as f64,
        mean_weight: map.mean_kept_weight() as f64,
        gamma: map.gamma,
        gta_skipped: false,
        pseudo: pseudo_stats(&map, &batch_u.masks),
    };
    let grads = tape.backward(total)?;
    sgd_step(&mut models.student, &grads, sgd, t)?;
    update_teacher(&mut models.teacher, &models.student, config.alpha)?;
    Ok(m)
}

/// Argmax masks for every sample, in batches.
pub fn predict_masks(params: &ParamStore, samples: &[SegSample]) -> Result<Vec<Vec<u16>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(20) {
        let batch = Batch::from_samples(chunk)?;
        let logits = segmodel::forward(params, &batch.images)?;
        let conf = crate::pseudolabel::predict_confidence(&logits)?;
        let plane = conf.shape[1] * conf.shape[2];
        out.extend(conf.pred.chunks(plane).map(<[u16]>::to_vec));
    }
    Ok(out)
}

pub fn evaluate(params: &ParamStore, samples: &[SegSample], classes: usize) -> Result<IouReport> {
    let preds = predict_masks(params, samples)?;
    let mut cm = ConfusionMatrix::new(classes);
    for (p, s) in preds.iter().zip(samples) {
        cm.add(p, &s.mask)?;
    }
    Ok(cm.report())
}

#[derive(Clone, Debug, Default)]
struct EpochAccumulator {
    steps: usize,
    loss_l: f64,
    loss_u: f64,
    kept: f64,
    weight: f64,
    lr: f32,
}

impl EpochAccumulator {
    fn push(&mut self, m: &StepMetrics) {
        self.steps += 1;
        self.loss_l += m.loss_l;
        self.loss_u += m.loss_u;
        self.kept += m.kept_fraction;
        self.weight += m.mean_weight;
        self.lr = m.lr;
    }

    fn mean(&self, v: f64) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            v / self.steps as f64
        }
    }
}

/// Supervised warmup of a single model, cloned into all three roles.
pub struct Warmup {
    pub models: Models,
    /// Mean supervised loss per warmup epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss of every warmup iteration, in order.
    pub step_losses: Vec<f64>,
}

pub fn warmup(labeled: &[SegSample], config: &TrainConfig, schedule: &Schedule) -> Result<Warmup> {
    if labeled.is_empty() {
        return Err(Error::Data("warmup needs at least one labeled sample".into()));
    }
    let mut model = init_model(&config.net_config(), config.seed)?;
    let mut epoch_losses = Vec::new();
    let mut step_losses = Vec::new();
    for epoch in 0..config.warmup_epochs {
        let mut stream = IndexStream::new(labeled.len(), config.seed, epoch, LABELED_STREAM);
        let mut total = 0.0;
        for it in 0..schedule.iters_per_epoch {
            let t = epoch * schedule.iters_per_epoch + it;
            let batch = Batch::from_samples(gather(labeled, &stream.next_batch(config.batch_labeled)))?;
            let loss = supervised_step(&mut model, &batch, &schedule.sgd, t)?;
            step_losses.push(loss);
            total += loss;
        }
        epoch_losses.push(total / schedule.iters_per_epoch as f64);
    }
    Ok(Warmup {
        models: Models {
            teacher: clone_params(&model),
            gta: clone_params(&model),
            student: model,
        },
        epoch_losses,
        step_losses,
    })
}

/// Final parameters and the report of a finished run.
pub struct TrainOutcome {
    pub report: RunReport,
    pub models: Models,
    /// Wall-clock training time (kept out of the report so reports stay
    /// reproducible).
    pub elapsed: std::time::Duration,
}

impl TrainOutcome {
    pub fn live_models(&self) -> Vec<(ModelKind, &ParamStore)> {
        live_kinds(self.report.config.method)
            .iter()
            .map(|&k| {
                let p = match k {
                    ModelKind::Gta => &self.models.gta,
                    ModelKind::Student => &self.models.student,
                    ModelKind::Teacher => &self.models.teacher,
                };
                (k, p)
            })
            .collect()
    }
}

pub fn live_kinds(method: Method) -> &'static [ModelKind] {
    match method {
        Method::SupOnly => &[ModelKind::Student],
        Method::MeanTeacher => &[ModelKind::Student, ModelKind::Teacher],
        Method::Gta => &[ModelKind::Gta, ModelKind::Student, ModelKind::Teacher],
    }
}

/// Warmup followed by the configured method over the whole schedule,
/// evaluating every live model on the held-out set after each epoch.
pub fn train_run(split: &DatasetSplit, config: &TrainConfig) -> Result<TrainOutcome> {
    let started = std::time::Instant::now();
    config.validate()?;
    if split.classes != config.classes {
        return Err(Error::Config(format!(
            "key `classes`: config says {} but the dataset has {}",
            config.classes, split.classes
        )));
    }
    let schedule = Schedule::new(config, split.labeled.len(), split.unlabeled.len());
    info!(
        "{:?} seed {}: {} epochs x {} iterations",
        config.method, config.seed, config.epochs, schedule.iters_per_epoch
    );
    let warm = warmup(&split.labeled, config, &schedule)?;
    let mut models = warm.models;
    let kinds = live_kinds(config.method);
    let mut records = Vec::new();
    let mut pseudo = PseudoLabelStats::default();

    let record_epoch = |records: &mut Vec<EpochRecord>,
                        epoch: usize,
                        acc: &EpochAccumulator,
                        models: &Models|
     -> Result<()> {
        for &kind in kinds {
            let params = match kind {
                ModelKind::Gta => &models.gta,
                ModelKind::Student => &models.student,
                ModelKind::Teacher => &models.teacher,
            };
            let iou = evaluate(params, &split.heldout, config.classes)?;
            records.push(EpochRecord {
                epoch,
                model: kind,
                miou: iou.miou,
                loss_l: acc.mean(acc.loss_l),
                loss_u: acc.mean(acc.loss_u),
                lr: acc.lr,
                kept_fraction: acc.mean(acc.kept),
                mean_weight: acc.mean(acc.weight),
            });
        }
        Ok(())
    };

    for (epoch, &loss) in warm.epoch_losses.iter().enumerate() {
        let acc = EpochAccumulator {
            steps: 1,
            loss_l: loss,
            lr: schedule.sgd.poly_lr((epoch + 1) * schedule.iters_per_epoch - 1)?,
            ..Default::default()
        };
        record_epoch(&mut records, epoch, &acc, &models)?;
    }

    for epoch in config.warmup_epochs..config.epochs {
        let mut labeled = IndexStream::new(split.labeled.len(), config.seed, epoch, LABELED_STREAM);
        let mut unlabeled = IndexStream::new(split.unlabeled.len(), config.seed, epoch, UNLABELED_STREAM);
        let mut acc = EpochAccumulator::default();
        for it in 0..schedule.iters_per_epoch {
            let t = epoch * schedule.iters_per_epoch + it;
            let batch_l = Batch::from_samples(gather(&split.labeled, &labeled.next_batch(config.batch_labeled)))?;
            let m = match config.method {
                Method::SupOnly => StepMetrics {
                    loss_l: supervised_step(&mut models.student, &batch_l, &schedule.sgd, t)?,
                    lr: schedule.sgd.poly_lr(t)?,
                    ..Default::default()
                },
                Method::MeanTeacher | Method::Gta => {
                    let idx = unlabeled.next_within_pass(config.batch_unlabeled);
                    if idx.is_empty() {
                        return Err(Error::Data("semi-supervised methods need unlabeled data".into()));
                    }
                    let batch_u = Batch::from_samples(gather(&split.unlabeled, &idx))?;
                    if config.method == Method::Gta {
                        gta_train_step(&batch_l, &batch_u, &mut models, config, &schedule.sgd, t)?
                    } else {
                        mt_train_step(&batch_l, &batch_u, &mut models, config, &schedule.sgd, t)?
                    }
                }
            };
            merge_stats(&mut pseudo, &m.pseudo);
            acc.push(&m);
            debug!("iter {t}: loss_l {:.4} loss_u {:.4} kept {:.3}", m.loss_l, m.loss_u, m.kept_fraction);
        }
        record_epoch(&mut records, epoch, &acc, &models)?;
        if let Some(last) = records.last() {
            info!("epoch {epoch}: {} mIoU {:.4}", last.model.as_str(), last.miou);
        }
    }

    let final_of = |kind| {
        records
            .iter()
            .rev()
            .find(|r: &&EpochRecord| r.model == kind)
            .map(|r| r.miou)
    };
    let student_miou = final_of(ModelKind::Student).unwrap_or(0.0);
    let teacher_miou = final_of(ModelKind::Teacher);
    let summary = FinalSummary {
        gta_miou: final_of(ModelKind::Gta),
        student_miou,
        teacher_miou,
        final_miou: teacher_miou.unwrap_or(student_miou),
        pseudo_labels: pseudo,
    };
    Ok(TrainOutcome {
        report: RunReport {
            config: config.clone(),
            seed: config.seed,
            records,
            summary,
        },
        models,
        elapsed: started.elapsed(),
    })
}

fn merge_stats(into: &mut PseudoLabelStats, from: &PseudoLabelStats) {
    into.kept_pixels += from.kept_pixels;
    into.correct_pixels += from.correct_pixels;
    into.wrong_weight_sum += from.wrong_weight_sum;
    into.correct_weight_sum += from.correct_weight_sum;
    into.empty_batches += from.empty_batches;
    into.fallback_batches += from.fallback_batches;
}

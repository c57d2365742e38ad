//! Training harness: teacher provisioning, the distillation loop,
//! evaluation, checkpointing and resume.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointKind, CheckpointState};
use crate::config::ExperimentConfig;
use crate::data::{load_dataset, Dataset};
use crate::diffkd::{DiffKd, LossBundle, LossOutput, ModelOutputs};
use crate::error::{Error, Result};
use crate::metrics::{EvalResult, GammaAccumulator, MetricRecord, MetricsWriter, RecordKind};
use crate::models::ResNet;
use crate::nn::{cross_entropy, ParamBuilder, ParamStore};
use crate::optim::Sgd;

const EVAL_BATCH: usize = 256;

/// Derives independent seeds for the different random streams of a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_STUDENT_INIT: u64 = 1;
const STREAM_HEADS_INIT: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_ORDER: u64 = 4;
const STREAM_AUGMENT: u64 = 5;
const STREAM_TEACHER: u64 = 6;

/// Top-k accuracy in percent. Ties are broken toward the lower class index.
pub fn topk_accuracy(logits: &Tensor, labels: &[u32], k: usize) -> Result<f64> {
    let rows = logits.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    if rows.len() != labels.len() {
        return Err(Error::shape("top-k accuracy", format!("{} rows vs {} labels", rows.len(), labels.len())));
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("no samples to evaluate".into()));
    }
    let hits = rows
        .iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let target = row[y as usize];
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > target || (v == target && j < y as usize))
                .count();
            rank < k
        })
        .count();
    Ok(100.0 * hits as f64 / rows.len() as f64)
}

/// Top-1 / top-5 (top-min(5, classes)) of `model` over `data`, in eval mode.
pub fn evaluate_model(model: &ResNet, data: &Dataset, dtype: DType, device: &Device) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation split is empty".into()));
    }
    let mut logits = Vec::new();
    for batch in data.batches(EVAL_BATCH, None, None, false, dtype, device)? {
        logits.push(model.forward(&batch.images, false)?.logits.detach());
    }
    let logits = Tensor::cat(&logits, 0)?;
    let k5 = 5.min(data.classes);
    Ok(EvalResult {
        top1: topk_accuracy(&logits, &data.labels, 1)?,
        top5: topk_accuracy(&logits, &data.labels, k5)?,
    })
}

/// All networks of a distillation run, built from one config.
pub struct Session {
    pub config: ExperimentConfig,
    pub device: Device,
    pub dtype: DType,
    pub in_channels: usize,
    pub classes: usize,
    pub teacher: ResNet,
    pub teacher_store: ParamStore,
    pub student: ResNet,
    pub student_store: ParamStore,
    /// `None` when the run has no distillation heads.
    pub diffkd: Option<DiffKd>,
    pub heads_store: ParamStore,
}

impl Session {
    pub fn new(config: ExperimentConfig, in_channels: usize, classes: usize) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let dtype = config.precision.dtype();
        let teacher_store = ParamStore::new();
        let teacher = ResNet::new(
            &ParamBuilder::new(&teacher_store, dtype, &device, derive_seed(config.seed, STREAM_TEACHER)),
            config.teacher_arch()?,
            in_channels,
            classes,
        )?;
        let student_store = ParamStore::new();
        let student = ResNet::new(
            &ParamBuilder::new(&student_store, dtype, &device, derive_seed(config.seed, STREAM_STUDENT_INIT)),
            config.student_arch()?,
            in_channels,
            classes,
        )?;
        let heads_store = ParamStore::new();
        let diffkd = if config.heads.is_empty() {
            None
        } else {
            let pb = ParamBuilder::new(&heads_store, dtype, &device, derive_seed(config.seed, STREAM_HEADS_INIT));
            Some(DiffKd::build(
                &pb,
                config.diffkd.clone(),
                &config.heads,
                |tap| teacher.tap_channels(tap),
                |tap| student.tap_channels(tap),
            )?)
        };
        Ok(Self {
            config,
            device,
            dtype,
            in_channels,
            classes,
            teacher,
            teacher_store,
            student,
            student_store,
            diffkd,
            heads_store,
        })
    }

    /// Loads the frozen teacher weights named by the config.
    pub fn load_teacher(&self) -> Result<()> {
        let path = &self.config.teacher.checkpoint;
        if !path.exists() {
            return Err(Error::Checkpoint(format!(
                "teacher checkpoint {} not found (train one with `diffkd teacher <config>`)",
                path.display()
            )));
        }
        let ckpt = Checkpoint::load(path, &self.device)?;
        check_model_checkpoint(&ckpt, CheckpointKind::Teacher, &self.config.teacher.arch, self.in_channels, self.classes)?;
        self.teacher_store.load(&ckpt.tensors, "model.")
    }

    /// Teacher outputs in eval mode, detached.
    pub fn teacher_outputs(&self, images: &Tensor) -> Result<ModelOutputs> {
        let out = self.teacher.forward(images, false)?;
        Ok(ModelOutputs {
            feature: out.feature.detach(),
            logits: out.logits.detach(),
        })
    }

    /// Rebuilds a run from a student checkpoint, including the frozen teacher.
    pub fn from_checkpoint(path: &Path) -> Result<(Self, Checkpoint)> {
        let ckpt = Checkpoint::load(path, &Device::Cpu)?;
        if ckpt.state.kind != CheckpointKind::Student {
            return Err(Error::Checkpoint(format!("{} is not a student checkpoint", path.display())));
        }
        let session = Self::new(ckpt.config.clone(), ckpt.state.in_channels, ckpt.state.classes)?;
        check_model_checkpoint(&ckpt, CheckpointKind::Student, &session.config.student.arch, session.in_channels, session.classes)?;
        session.student_store.load(&ckpt.tensors, "model.")?;
        session.heads_store.load(&ckpt.tensors, "heads.")?;
        if session.diffkd.is_some() {
            session.load_teacher()?;
        }
        Ok((session, ckpt))
    }
}

fn check_model_checkpoint(ckpt: &Checkpoint, kind: CheckpointKind, arch: &str, in_channels: usize, classes: usize) -> Result<()> {
    let s = &ckpt.state;
    if s.kind != kind {
        return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", s.kind)));
    }
    if s.arch != arch || s.in_channels != in_channels || s.classes != classes {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: checkpoint has {} ({} -> {} classes), config expects {arch} ({in_channels} -> {classes} classes)",
            s.arch, s.in_channels, s.classes
        )));
    }
    Ok(())
}

/// Trains the teacher with the task loss alone and writes its checkpoint.
pub fn provision_teacher(config: &ExperimentConfig) -> Result<EvalResult> {
    config.validate()?;
    let (train, eval) = load_dataset(&config.dataset, config.seed)?;
    let device = Device::Cpu;
    let dtype = config.precision.dtype();
    let store = ParamStore::new();
    let seed = derive_seed(config.seed, STREAM_TEACHER);
    let teacher = ResNet::new(
        &ParamBuilder::new(&store, dtype, &device, seed),
        config.teacher_arch()?,
        train.channels,
        train.classes,
    )?;
    let mut opt = Sgd::new(store.trainable(), &config.optimizer)?;
    let epochs = config.teacher.epochs;
    let mut step = 0u64;
    for epoch in 0..epochs {
        let lr = config.teacher.lr_schedule.lr_at(config.optimizer.lr, epoch, epochs);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ epoch as u64, STREAM_AUGMENT));
        let augment = config.dataset.augment.then_some((config.dataset.crop_padding, &mut aug_rng));
        let order = derive_seed(seed ^ epoch as u64, STREAM_ORDER);
        for batch in train.batches(config.training.batch_size, Some(order), augment, true, dtype, &device)? {
            let out = teacher.forward(&batch.images, true)?;
            let loss = cross_entropy(&out.logits, &batch.labels)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("teacher task loss {value}"),
                });
            }
            opt.step(&loss.backward()?, lr)?;
            step += 1;
        }
    }
    let result = evaluate_model(&teacher, &eval, dtype, &device)?;
    Checkpoint {
        state: CheckpointState {
            kind: CheckpointKind::Teacher,
            arch: config.teacher.arch.clone(),
            in_channels: train.channels,
            classes: train.classes,
            epoch: epochs,
            step,
            recorded: Some(result),
            teacher_fingerprint: Some(store.fingerprint()?),
        },
        config: config.clone(),
        rng: None,
        tensors: store.snapshot("model.")?,
    }
    .save(&config.teacher.checkpoint)?;
    Ok(result)
}

/// Provisions the teacher unless a compatible checkpoint already exists.
/// Returns the teacher's recorded accuracy.
pub fn ensure_teacher(config: &ExperimentConfig) -> Result<EvalResult> {
    let path = &config.teacher.checkpoint;
    if path.exists() {
        let ckpt = Checkpoint::load(path, &Device::Cpu)?;
        if ckpt.state.kind == CheckpointKind::Teacher && ckpt.state.arch == config.teacher.arch {
            if let Some(r) = ckpt.state.recorded {
                return Ok(r);
            }
        }
    }
    provision_teacher(config)
}

/// Outcome of a completed run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_record: MetricRecord,
    pub eval: EvalResult,
    pub checkpoint: PathBuf,
    pub teacher_fingerprint_before: Option<String>,
    pub teacher_fingerprint_after: Option<String>,
}

/// Distillation run state: session, optimizer, RNG and progress counters.
pub struct Trainer {
    pub session: Session,
    pub train_data: Dataset,
    pub eval_data: Dataset,
    optimizer: Sgd,
    rng: ChaCha8Rng,
    epoch: usize,
    step: u64,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train_data, eval_data) = load_dataset(&config.dataset, config.seed)?;
        let seed = config.seed;
        let session = Session::new(config, train_data.channels, train_data.classes)?;
        if session.diffkd.is_some() {
            session.load_teacher()?;
        }
        let mut params = session.student_store.trainable();
        params.extend(
            session
                .heads_store
                .trainable()
                .into_iter()
                .map(|(n, v)| (format!("heads.{n}"), v)),
        );
        let params = params
            .into_iter()
            .map(|(n, v)| if n.starts_with("heads.") { (n, v) } else { (format!("model.{n}"), v) })
            .collect();
        let mut optimizer = Sgd::new(params, &session.config.optimizer)?;
        optimizer.scale_group("heads.", session.config.optimizer.heads_lr_scale);
        Ok(Self {
            session,
            train_data,
            eval_data,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_NOISE)),
            epoch: 0,
            step: 0,
        })
    }

    /// Continues a run from a student checkpoint. The config snapshot stored in
    /// the checkpoint is used; `metrics_path` overrides where new records go.
    pub fn resume(path: &Path, metrics_path: Option<PathBuf>) -> Result<Self> {
        let ckpt = Checkpoint::load(path, &Device::Cpu)?;
        if ckpt.state.kind != CheckpointKind::Student {
            return Err(Error::Checkpoint(format!("{} is not a student checkpoint", path.display())));
        }
        let mut config = ckpt.config.clone();
        if let Some(m) = metrics_path {
            config.logging.metrics_path = m;
        }
        let mut trainer = Self::new(config)?;
        let s = &trainer.session;
        check_model_checkpoint(&ckpt, CheckpointKind::Student, &s.config.student.arch, s.in_channels, s.classes)?;
        s.student_store.load(&ckpt.tensors, "model.")?;
        s.heads_store.load(&ckpt.tensors, "heads.")?;
        trainer.optimizer.load_state(&ckpt.tensors, "optim.")?;
        let rng = ckpt
            .rng
            .as_deref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no RNG state".into()))?;
        trainer.rng = serde_json::from_str(rng).map_err(|e| Error::Checkpoint(format!("RNG state: {e}")))?;
        trainer.epoch = ckpt.state.epoch;
        trainer.step = ckpt.state.step;
        Ok(trainer)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.session.config
    }

    fn lr(&self) -> f64 {
        let cfg = &self.session.config;
        cfg.training
            .lr_schedule
            .lr_at(cfg.optimizer.lr, self.epoch, cfg.training.epochs)
    }

    /// Loss terms for one batch; the plain task loss when there are no heads.
    pub fn losses(&mut self, images: &Tensor, labels: &Tensor, train: bool) -> Result<LossOutput> {
        let s = &self.session;
        let student = s.student.forward(images, train)?;
        match &s.diffkd {
            Some(diffkd) => {
                let teacher = s.teacher_outputs(images)?;
                diffkd.compute_losses(labels, &teacher, &student, &mut self.rng)
            }
            None => {
                let task = cross_entropy(&student.logits, labels)?;
                let zero = task.zeros_like()?;
                Ok(LossOutput {
                    terms: crate::diffkd::LossTerms {
                        task: task.clone(),
                        diff: zero.clone(),
                        ae: zero.clone(),
                        diffkd: zero,
                        total: task,
                    },
                    heads: Vec::new(),
                })
            }
        }
    }

    pub fn evaluate(&self) -> Result<EvalResult> {
        evaluate_model(&self.session.student, &self.eval_data, self.session.dtype, &self.session.device)
    }

    fn checkpoint(&self, recorded: Option<EvalResult>) -> Result<Checkpoint> {
        let s = &self.session;
        let mut tensors = s.student_store.snapshot("model.")?;
        tensors.extend(s.heads_store.snapshot("heads.")?);
        tensors.extend(self.optimizer.state("optim."));
        Ok(Checkpoint {
            state: CheckpointState {
                kind: CheckpointKind::Student,
                arch: s.config.student.arch.clone(),
                in_channels: s.in_channels,
                classes: s.classes,
                epoch: self.epoch,
                step: self.step,
                recorded,
                teacher_fingerprint: if s.diffkd.is_some() {
                    Some(s.teacher_store.fingerprint()?)
                } else {
                    None
                },
            },
            config: s.config.clone(),
            rng: Some(serde_json::to_string(&self.rng).map_err(|e| Error::Checkpoint(e.to_string()))?),
            tensors,
        })
    }

    pub fn save_checkpoint(&self, path: &Path, recorded: Option<EvalResult>) -> Result<()> {
        self.checkpoint(recorded)?.save(path)
    }

    fn epoch_checkpoint_path(&self) -> PathBuf {
        let base = &self.session.config.logging.checkpoint_path;
        let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("student");
        base.with_file_name(format!("{stem}.epoch{}.safetensors", self.epoch))
    }

    /// Runs the remaining epochs, writing metric records and the final checkpoint.
    pub fn run(&mut self) -> Result<RunSummary> {
        let cfg = self.session.config.clone();
        let mut log = MetricsWriter::create(&cfg.logging.metrics_path)?;
        let fingerprint = |s: &Session| -> Result<Option<String>> {
            if s.diffkd.is_some() {
                Ok(Some(s.teacher_store.fingerprint()?))
            } else {
                Ok(None)
            }
        };
        let before = fingerprint(&self.session)?;
        let mut last = None;
        while self.epoch < cfg.training.epochs {
            last = Some(self.run_epoch(&mut log)?);
            if cfg.logging.keep_epoch_checkpoints {
                self.save_checkpoint(&self.epoch_checkpoint_path(), last.as_ref().and_then(|r| r.eval))?;
            }
        }
        let eval = match last.as_ref().and_then(|r| r.eval) {
            Some(e) => e,
            None => self.evaluate()?,
        };
        self.save_checkpoint(&cfg.logging.checkpoint_path, Some(eval))?;
        let after = fingerprint(&self.session)?;
        let final_record = last.unwrap_or(MetricRecord {
            kind: RecordKind::Epoch,
            step: self.step,
            epoch: self.epoch,
            lr: self.lr(),
            losses: zero_bundle(),
            gamma_stats: None,
            eval: Some(eval),
        });
        Ok(RunSummary {
            final_record,
            eval,
            checkpoint: cfg.logging.checkpoint_path.clone(),
            teacher_fingerprint_before: before,
            teacher_fingerprint_after: after,
        })
    }

    /// One pass over the training split followed by evaluation.
    pub fn run_epoch(&mut self, log: &mut MetricsWriter) -> Result<MetricRecord> {
        let cfg = self.session.config.clone();
        let lr = self.lr();
        let dtype = self.session.dtype;
        let device = self.session.device.clone();
        let epoch_seed = derive_seed(cfg.seed, self.epoch as u64 + 1000);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, STREAM_AUGMENT));
        let augment = cfg.dataset.augment.then_some((cfg.dataset.crop_padding, &mut aug_rng));
        let batches = self.train_data.batches(
            cfg.training.batch_size,
            Some(derive_seed(epoch_seed, STREAM_ORDER)),
            augment,
            true,
            dtype,
            &device,
        )?;
        let mut sums = zero_bundle();
        let mut window_gamma = GammaAccumulator::default();
        let mut epoch_gamma = GammaAccumulator::default();
        let nb = batches.len().max(1) as f64;
        for batch in &batches {
            let out = self.losses(&batch.images, &batch.labels, true)?;
            let values = out.terms.values()?;
            if !values.is_finite() {
                let record = MetricRecord {
                    kind: RecordKind::Divergence,
                    step: self.step,
                    epoch: self.epoch,
                    lr,
                    losses: values,
                    gamma_stats: window_gamma.stats(),
                    eval: None,
                };
                log.write(&record)?;
                return Err(Error::Divergence {
                    step: self.step,
                    detail: format!("non-finite loss {values:?}"),
                });
            }
            let grads = out.terms.total.backward()?;
            self.optimizer.step(&grads, lr)?;
            self.step += 1;
            for head in &out.heads {
                if let Some(g) = &head.gamma {
                    let v = g.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                    window_gamma.extend(v.iter().copied());
                    epoch_gamma.extend(v);
                }
            }
            sums.task += values.task;
            sums.diff += values.diff;
            sums.ae += values.ae;
            sums.diffkd += values.diffkd;
            sums.total += values.total;
            if self.step.is_multiple_of(cfg.logging.interval) {
                log.write(&MetricRecord {
                    kind: RecordKind::Step,
                    step: self.step,
                    epoch: self.epoch,
                    lr,
                    losses: values,
                    gamma_stats: window_gamma.stats(),
                    eval: None,
                })?;
                window_gamma = GammaAccumulator::default();
            }
        }
        let eval = self.evaluate()?;
        self.epoch += 1;
        let record = MetricRecord {
            kind: RecordKind::Epoch,
            step: self.step,
            epoch: self.epoch - 1,
            lr,
            losses: LossBundle {
                task: sums.task / nb,
                diff: sums.diff / nb,
                ae: sums.ae / nb,
                diffkd: sums.diffkd / nb,
                total: sums.total / nb,
            },
            gamma_stats: epoch_gamma.stats(),
            eval: Some(eval),
        };
        log.write(&record)?;
        Ok(record)
    }
}

fn zero_bundle() -> LossBundle {
    LossBundle {
        task: 0.0,
        diff: 0.0,
        ae: 0.0,
        diffkd: 0.0,
        total: 0.0,
    }
}

/// Trains a student from scratch with `config`.
pub fn train(config: ExperimentConfig) -> Result<RunSummary> {
    Trainer::new(config)?.run()
}

/// Evaluates a teacher or student checkpoint on its configured evaluation split.
pub fn evaluate_checkpoint(path: &Path) -> Result<EvalResult> {
    let ckpt = Checkpoint::load(path, &Device::Cpu)?;
    let config = &ckpt.config;
    let (_, eval) = load_dataset(&config.dataset, config.seed)?;
    let dtype = config.precision.dtype();
    let device = Device::Cpu;
    let arch = match ckpt.state.kind {
        CheckpointKind::Teacher => &config.teacher.arch,
        CheckpointKind::Student => &config.student.arch,
    };
    check_model_checkpoint(&ckpt, ckpt.state.kind, arch, eval.channels, eval.classes)?;
    let store = ParamStore::new();
    let model = ResNet::new(&ParamBuilder::new(&store, dtype, &device, 0), arch.parse()?, eval.channels, eval.classes)?;
    store.load(&ckpt.tensors, "model.")?;
    evaluate_model(&model, &eval, dtype, &device)
}

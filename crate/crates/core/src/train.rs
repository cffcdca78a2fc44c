//! Optimization loop, metrics, checkpoints and evaluation.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::checkpoint::{Checkpoint, Entry};
use crate::config::{DataSource, TrainConfig};
use crate::data::{self, AugmentFlags, Batch, BatchStream, LabeledImageSet, Normalize, Split, TriangleParams};
use crate::error::{Error, Result};
use crate::model::{build_model, Model};
use crate::optim::{AdamW, CosineSchedule};
use crate::tape::GradTape;
use crate::tensor::{Scalar, Tensor};

pub const METRICS_HEADER: &str = "epoch,step,loss,task_loss,bottleneck_loss,accuracy,lr,distinct_patch_ratio,mean_energy_drop";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub step: u64,
    pub loss: f64,
    pub task_loss: f64,
    pub bottleneck_loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub distinct_patch_ratio: f64,
    pub mean_energy_drop: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.loss,
            self.task_loss,
            self.bottleneck_loss,
            self.accuracy,
            self.lr,
            self.distinct_patch_ratio,
            self.mean_energy_drop
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassReport>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub last: Option<MetricsRow>,
    /// Per-epoch mean distinct-patch ratio, in epoch order.
    pub epoch_distinct_ratio: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
    pub test: Option<EvalReport>,
}

/// Train and test sets described by `cfg.data`.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(LabeledImageSet, Option<LabeledImageSet>)> {
    let d = &cfg.data;
    let tri = TriangleParams {
        spread: d.triangle_spread,
        tolerance: d.triangle_tolerance,
    };
    let gen = |count: usize, seed: u64| match d.source {
        DataSource::Triangle => data::gen_triangle_with(count, d.side, seed, tri),
        DataSource::TwoBlob => data::gen_two_blob(count, d.side, seed),
        DataSource::File => unreachable!(),
    };
    match d.source {
        DataSource::File => {
            let path = d.train_path.as_ref().ok_or_else(|| Error::Config("data.train_path is not set".into()))?;
            let train = data::load(path)?.with_split(Split::Train);
            let test = d.test_path.as_ref().map(data::load).transpose()?.map(|s| s.with_split(Split::Test));
            Ok((train, test))
        }
        _ => {
            let train = gen(d.train_count, d.seed)?.with_split(Split::Train);
            let test = if d.test_count > 0 {
                Some(gen(d.test_count, data::mix_seed(d.seed, 1))?.with_split(Split::Test))
            } else {
                None
            };
            Ok((train, test))
        }
    }
}

fn augment(cfg: &TrainConfig, train: bool) -> Result<AugmentFlags> {
    let normalize = match (&cfg.data.normalize_mean, &cfg.data.normalize_std) {
        (Some(m), Some(s)) => {
            if m.len() != cfg.model.channels || s.len() != cfg.model.channels || s.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Config("normalize_mean/std need one entry per channel and positive std".into()));
            }
            Some(Normalize {
                mean: m.iter().map(|&v| v as Scalar).collect(),
                std: s.iter().map(|&v| v as Scalar).collect(),
            })
        }
        (None, None) => None,
        _ => return Err(Error::Config("normalize_mean and normalize_std must be set together".into())),
    };
    Ok(AugmentFlags {
        hflip: train && cfg.data.hflip,
        vflip: train && cfg.data.vflip,
        transpose: train && cfg.data.transpose,
        normalize,
    })
}

fn check_dataset(cfg: &TrainConfig, set: &LabeledImageSet) -> Result<()> {
    let m = &cfg.model;
    let (h, w, c) = set.image_dims();
    if (h, w, c) != (m.image_size, m.image_size, m.channels) {
        return Err(Error::shape("dataset vs model (height, width, channels)", &[h, w, c], &[m.image_size, m.image_size, m.channels]));
    }
    if set.labels.iter().any(|&l| l >= m.classes) {
        return Err(Error::Data(format!("dataset has labels outside the model's {} classes", m.classes)));
    }
    if set.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    Ok(())
}

fn argmax(row: &[Scalar]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub schedule: CosineSchedule,
    /// Optimizer steps completed.
    pub step: u64,
    train: Arc<LabeledImageSet>,
    steps_per_epoch: u64,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, train: LabeledImageSet) -> Result<Self> {
        check_dataset(cfg, &train)?;
        let model = build_model(cfg)?;
        let steps_per_epoch = train.len().div_ceil(cfg.data.batch_size) as u64;
        Ok(Trainer {
            schedule: CosineSchedule::new(&cfg.optimizer, &cfg.schedule, steps_per_epoch),
            opt: AdamW::new(&cfg.optimizer),
            model,
            step: 0,
            train: Arc::new(train),
            steps_per_epoch,
            last_checkpoint: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        self.model.config()
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    /// Forward, backward and AdamW update on one batch; commits memory.
    pub fn train_step(&mut self, batch: &Batch, epoch: u64) -> Result<MetricsRow> {
        let lr = self.schedule.lr(self.step);
        let mut tape = GradTape::new();
        let pv = self.model.params.register(&mut tape);
        let out = self.model.forward(&mut tape, &pv, &batch.images)?;
        let task = tape.cross_entropy(out.logits, &batch.labels)?;
        let total = match out.bottleneck_loss {
            Some(b) => tape.add(task, b)?,
            None => task,
        };
        let loss = tape.value(total).item() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                loss,
                last_checkpoint: self
                    .last_checkpoint
                    .as_ref()
                    .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
            });
        }
        let grads = tape.backward(total)?;
        self.model.params.zero_grads();
        self.model.params.accumulate_grads(&pv, &grads);
        self.opt.step(&mut self.model.params, lr)?;
        self.model.commit_memory(&tape, &out)?;
        let stats = self.model.workspace_stats(&tape, &out)?;

        let logits = tape.value(out.logits);
        let classes = logits.shape()[1];
        let correct = logits
            .data()
            .chunks(classes)
            .zip(&batch.labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        let row = MetricsRow {
            epoch,
            step: self.step,
            loss,
            task_loss: tape.value(task).item() as f64,
            bottleneck_loss: out.bottleneck_loss.map_or(0.0, |b| tape.value(b).item() as f64),
            accuracy: correct as f64 / batch.labels.len() as f64,
            lr,
            distinct_patch_ratio: stats.distinct_patch_ratio,
            mean_energy_drop: stats.mean_energy_drop,
        };
        self.step += 1;
        Ok(row)
    }

    /// Train from the current step until the schedule ends or `max_steps`
    /// is reached, passing each metrics row to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&MetricsRow) -> Result<()>) -> Result<TrainSummary> {
        let cfg = self.config().clone();
        let flags = augment(&cfg, true)?;
        let stop = cfg.output.max_steps.unwrap_or(u64::MAX).min(self.total_steps());
        let mut last = None;
        let mut ratios = Vec::new();
        let set = Arc::clone(&self.train);
        while self.step < stop {
            let epoch = self.step / self.steps_per_epoch;
            let offset = self.step % self.steps_per_epoch;
            if offset == 0 && epoch > 0 && cfg.ablation.reset_memory_each_epoch {
                self.model.reset_memory(epoch)?;
            }
            let mut stream = BatchStream::new(&set, cfg.data.batch_size, cfg.seed, epoch, true, flags.clone())?;
            stream.skip_batches(offset as usize);
            let (mut ratio_sum, mut ratio_n) = (0.0, 0usize);
            for batch in stream {
                let row = self.train_step(&batch, epoch)?;
                ratio_sum += row.distinct_patch_ratio;
                ratio_n += 1;
                sink(&row)?;
                last = Some(row);
                if self.step >= stop {
                    break;
                }
            }
            ratios.push(ratio_sum / ratio_n.max(1) as f64);
            let finished = self.step % self.steps_per_epoch == 0;
            let every = cfg.output.checkpoint_every_epochs as u64;
            if finished && every > 0 && (self.step / self.steps_per_epoch) % every == 0 {
                self.save_checkpoint()?;
            }
        }
        self.save_checkpoint()?;
        Ok(TrainSummary {
            steps: self.step,
            last,
            epoch_distinct_ratio: ratios,
            checkpoint: self.last_checkpoint.clone(),
            test: None,
        })
    }

    fn save_checkpoint(&mut self) -> Result<()> {
        let Some(dir) = self.config().output.checkpoint_dir.clone() else {
            return Ok(());
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(LAST_CHECKPOINT);
        self.checkpoint()?.save(&path)?;
        self.last_checkpoint = Some(path);
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.push("config", Entry::Bytes(self.config().to_toml_string()?.into_bytes()));
        c.push("state/step", Entry::U64(vec![self.step]));
        c.push("state/seed", Entry::U64(vec![self.config().seed]));
        c.push("state/adam_t", Entry::U64(vec![self.opt.t]));
        for (name, t) in self.model.params.iter() {
            c.push_tensor(format!("param/{name}"), t);
        }
        for (l, mem) in self.model.memories().iter().enumerate() {
            c.push_tensor(format!("memory/{l}"), mem.gamma());
        }
        for (prefix, moments) in [("adam.m/", &self.opt.m), ("adam.v/", &self.opt.v)] {
            for (name, v) in moments {
                c.push(
                    format!("{prefix}{name}"),
                    Entry::F32 {
                        shape: vec![v.len()],
                        data: v.iter().map(|&x| x as f32).collect(),
                    },
                );
            }
        }
        Ok(c)
    }

    /// Restore parameters, memory, optimizer moments and step counter.
    /// The checkpoint's model must match this trainer's.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let snap = config_from_checkpoint(ckpt)?;
        let cfg = self.config();
        if snap.model != cfg.model || snap.ablation != cfg.ablation {
            return Err(Error::Config("checkpoint model/ablation settings differ from the run config".into()));
        }
        for (name, _) in ckpt.entries() {
            if let Some(p) = name.strip_prefix("param/") {
                self.model.params.set(p, ckpt.tensor(name)?)?;
            }
        }
        for (l, mem) in self.model.memories_mut().iter_mut().enumerate() {
            mem.set_gamma(ckpt.tensor(&format!("memory/{l}"))?)?;
        }
        self.opt.m.clear();
        self.opt.v.clear();
        for (name, e) in ckpt.entries() {
            let target = if let Some(p) = name.strip_prefix("adam.m/") {
                self.opt.m.entry(p.to_string())
            } else if let Some(p) = name.strip_prefix("adam.v/") {
                self.opt.v.entry(p.to_string())
            } else {
                continue;
            };
            if let Entry::F32 { data, .. } = e {
                *target.or_default() = data.iter().map(|&x| x as Scalar).collect();
            }
        }
        self.opt.t = ckpt.u64("state/adam_t")?;
        self.step = ckpt.u64("state/step")?;
        Ok(())
    }
}

pub fn config_from_checkpoint(ckpt: &Checkpoint) -> Result<TrainConfig> {
    let text = std::str::from_utf8(ckpt.bytes("config")?).map_err(|_| Error::Config("checkpoint config is not UTF-8".into()))?;
    TrainConfig::from_toml_str(text, &[])
}

/// Rebuild a model (parameters and memory) from a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    let cfg = config_from_checkpoint(ckpt)?;
    let mut model = build_model(&cfg)?;
    for (name, _) in ckpt.entries() {
        if let Some(p) = name.strip_prefix("param/") {
            model.params.set(p, ckpt.tensor(name)?)?;
        }
    }
    for (l, mem) in model.memories_mut().iter_mut().enumerate() {
        mem.set_gamma(ckpt.tensor(&format!("memory/{l}"))?)?;
    }
    Ok(model)
}

fn open_metrics(path: &Path, append: bool) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let fresh = !append || fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = if fresh {
        File::create(path)
    } else {
        OpenOptions::new().append(true).open(path)
    }
    .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Full run described by `cfg`: data, optional resume, metrics file,
/// checkpoints, and a final test-set evaluation.
pub fn train(cfg: &TrainConfig) -> Result<TrainSummary> {
    let (train_set, test_set) = load_datasets(cfg)?;
    train_on(cfg, train_set, test_set, |_| {})
}

/// Like [`train`] on explicit data; `on_row` sees every metrics row.
pub fn train_on(
    cfg: &TrainConfig,
    train_set: LabeledImageSet,
    test_set: Option<LabeledImageSet>,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut trainer = Trainer::new(cfg, train_set)?;
    let resuming = cfg.output.resume_from.is_some();
    if let Some(p) = &cfg.output.resume_from {
        trainer.restore(&Checkpoint::load(p)?)?;
    }
    let mut metrics = match &cfg.output.metrics_path {
        Some(p) => Some((open_metrics(p, resuming)?, p.clone())),
        None => None,
    };
    let mut summary = trainer.run(|row| {
        on_row(row);
        if let Some((f, p)) = metrics.as_mut() {
            writeln!(f, "{}", row.csv_line()).map_err(|e| Error::io(p.as_path(), e))?;
        }
        Ok(())
    })?;
    if let Some((f, p)) = metrics.as_mut() {
        f.flush().map_err(|e| Error::io(p.as_path(), e))?;
    }
    if let Some(test) = &test_set {
        summary.test = Some(evaluate(&trainer.model, test)?);
    }
    Ok(summary)
}

/// Batched, unshuffled forward passes with memory frozen.
pub fn evaluate(model: &Model, set: &LabeledImageSet) -> Result<EvalReport> {
    let cfg = model.config();
    check_dataset(cfg, set)?;
    let flags = augment(cfg, false)?;
    let classes = cfg.model.classes;
    let mut per_class: Vec<ClassReport> = (0..classes).map(|class| ClassReport { class, correct: 0, total: 0 }).collect();
    for batch in BatchStream::new(set, cfg.data.batch_size, cfg.seed, 0, false, flags)? {
        let logits = predict(model, &batch.images)?;
        for (row, &l) in logits.data().chunks(classes).zip(&batch.labels) {
            per_class[l].total += 1;
            if argmax(row) == l {
                per_class[l].correct += 1;
            }
        }
    }
    let correct: usize = per_class.iter().map(|c| c.correct).sum();
    Ok(EvalReport {
        accuracy: correct as f64 / set.len() as f64,
        per_class,
    })
}

/// Logits for a batch of images; memory is read but not written.
pub fn predict(model: &Model, images: &Tensor) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let pv = model.params.register(&mut tape);
    let out = model.forward(&mut tape, &pv, images)?;
    Ok(tape.value(out.logits).clone())
}

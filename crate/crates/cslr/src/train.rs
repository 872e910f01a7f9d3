//! Training loop: minibatch optimization of the composite objective with
//! per-epoch decoding, machine-readable logs, and resumable checkpoints.
//!
//! Determinism contract: with a fixed config and seed, two runs produce
//! byte-identical `metrics.log` files. Every random draw comes from a
//! stateless stream keyed by `(seed, purpose, epoch, sample)`, samples
//! are processed on worker threads but their contributions are folded in
//! sample order, and all scalar aggregation happens in a fixed order —
//! so thread count and wall-clock have no influence on the numbers.
//! Wall-clock durations go to a separate `timings.log` so the metrics
//! file stays reproducible.

use crate::alignment::{corpus_wer, WerReport};
use crate::config::RunConfig;
use crate::data::{augment, load_sample, Manifest, Sample};
use crate::error::{Error, Result};
use crate::model::{decode_sample, init_model, sample_loss, ModelConfig};
use crate::nn::{apply_stat_updates, FwdCtx, Mode, StatUpdate, BN_MOMENTUM};
use crate::objective::{adam_step, clip_global_norm, LossBreakdown, LossWeights, OptimState};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::checkpoint::{self, Checkpoint};
use crate::tensor::graph::Graph;
use crate::tensor::{Element, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const METRICS_LOG: &str = "metrics.log";
pub const TIMINGS_LOG: &str = "timings.log";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Prefix reserved for optimizer moments inside checkpoint files.
const MOMENT_PREFIX: &str = "optim.";

/// One line of `metrics.log`: the loss terms and error counts for one
/// split after one epoch. Records are appended, never rewritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub conv_ctc: f64,
    pub seq_ctc: f64,
    pub dist: f64,
    pub cu: f64,
    pub cp: f64,
    pub total: f64,
    pub wer: f64,
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
}

/// One line of `timings.log`. Kept out of [`MetricsRecord`] so the
/// metrics file is byte-reproducible across runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRecord {
    pub epoch: usize,
    pub split: String,
    pub seconds: f64,
}

/// Loss terms extracted from a finished graph as plain numbers.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossScalars {
    pub conv_ctc: f64,
    pub seq_ctc: f64,
    pub dist: f64,
    pub cu: f64,
    pub cp: f64,
    pub total: f64,
}

impl LossScalars {
    fn read<E: Element>(graph: &Graph<E>, lb: &LossBreakdown) -> Self {
        let at = |v| graph.value(v).at(&[]).as_f64();
        LossScalars {
            conv_ctc: at(lb.conv_ctc),
            seq_ctc: at(lb.seq_ctc),
            dist: at(lb.dist),
            cu: at(lb.cu),
            cp: at(lb.cp),
            total: at(lb.total),
        }
    }

    fn add(&mut self, o: &LossScalars) {
        self.conv_ctc += o.conv_ctc;
        self.seq_ctc += o.seq_ctc;
        self.dist += o.dist;
        self.cu += o.cu;
        self.cp += o.cp;
        self.total += o.total;
    }

    fn scaled(&self, k: f64) -> LossScalars {
        LossScalars {
            conv_ctc: self.conv_ctc * k,
            seq_ctc: self.seq_ctc * k,
            dist: self.dist * k,
            cu: self.cu * k,
            cp: self.cp * k,
            total: self.total * k,
        }
    }
}

/// Result of a completed (or resumed-and-completed) training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    /// Total epochs completed, counting any resumed prefix.
    pub epochs_run: usize,
    pub best_dev_wer: f64,
    pub best_epoch: usize,
}

fn convert_frames<E: Element>(frames: &Tensor<f32>) -> Tensor<E> {
    let data: Vec<E> = frames.data().iter().map(|&x| E::of(x as f64)).collect();
    Tensor::new(frames.shape(), data).expect("same element count")
}

fn as_clip_batch<E: Element>(frames: &Tensor<f32>) -> Result<Tensor<E>> {
    let converted = convert_frames::<E>(frames);
    let mut shape = vec![1];
    shape.extend_from_slice(frames.shape());
    converted.reshaped(&shape)
}

/// Deterministic Fisher–Yates permutation of `0..n`.
fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        order.swap(i, j);
    }
    order
}

/// Loads every sample of `split` in manifest order.
pub fn load_split(manifest: &Manifest, data_root: &Path, split: &str) -> Result<Vec<Sample>> {
    manifest
        .split(split)
        .map(|e| load_sample(manifest, data_root, &e.id))
        .collect()
}

struct SamplePass<E: Element> {
    grads: Vec<(usize, Tensor<E>)>,
    updates: Vec<StatUpdate<E>>,
    scalars: LossScalars,
}

/// Forward + backward on one clip; the caller owns folding the results
/// into the store.
fn train_sample_pass<E: Element>(
    store: &ParamStore<E>,
    mc: &ModelConfig,
    weights: &LossWeights,
    sample: &Sample,
) -> Result<SamplePass<E>> {
    let batched = as_clip_batch::<E>(&sample.frames)?;
    let mut graph = Graph::new();
    let x = graph.constant(batched);
    let (lb, updates) = {
        let mut ctx = FwdCtx::new(&mut graph, store, Mode::Train);
        let lb = sample_loss(&mut ctx, x, &sample.target, mc, weights)?;
        let updates = ctx.take_stat_updates();
        (lb, updates)
    };
    let scalars = LossScalars::read(&graph, &lb);
    let mut grads = graph.backward(lb.total)?;
    let grads = graph.param_grads(&mut grads);
    Ok(SamplePass {
        grads,
        updates,
        scalars,
    })
}

/// Evaluation-mode loss terms for one clip (no augmentation, running
/// statistics, no gradient work).
fn eval_sample_loss<E: Element>(
    store: &ParamStore<E>,
    mc: &ModelConfig,
    weights: &LossWeights,
    sample: &Sample,
) -> Result<LossScalars> {
    let batched = as_clip_batch::<E>(&sample.frames)?;
    let mut graph = Graph::new();
    let x = graph.constant(batched);
    let mut ctx = FwdCtx::new(&mut graph, store, Mode::Eval);
    let lb = sample_loss(&mut ctx, x, &sample.target, mc, weights)?;
    Ok(LossScalars::read(&graph, &lb))
}

/// Greedy-decodes a whole split and scores it against the references.
/// Returns the corpus report plus per-sample `(id, hypothesis)` pairs in
/// split order.
pub fn decode_split<E: Element>(
    store: &ParamStore<E>,
    mc: &ModelConfig,
    samples: &[Sample],
) -> Result<(WerReport, Vec<(String, Vec<usize>)>)> {
    if samples.is_empty() {
        return Err(Error::Contract(
            "cannot evaluate an empty split".into(),
        ));
    }
    let hyps: Vec<Vec<usize>> = samples
        .par_iter()
        .map(|s| decode_sample(store, mc, &convert_frames::<E>(&s.frames)))
        .collect::<Result<_>>()?;
    let refs: Vec<Vec<usize>> = samples.iter().map(|s| s.target.clone()).collect();
    let report = corpus_wer(&refs, &hyps)?;
    let pairs = samples
        .iter()
        .zip(&hyps)
        .map(|(s, h)| (s.id.clone(), h.clone()))
        .collect();
    Ok((report, pairs))
}

/// Mean evaluation-mode loss terms over a split, folded in split order.
pub fn split_losses<E: Element>(
    store: &ParamStore<E>,
    mc: &ModelConfig,
    weights: &LossWeights,
    samples: &[Sample],
) -> Result<LossScalars> {
    let per: Vec<LossScalars> = samples
        .par_iter()
        .map(|s| eval_sample_loss(store, mc, weights, s))
        .collect::<Result<_>>()?;
    let mut sum = LossScalars::default();
    for p in &per {
        sum.add(p);
    }
    Ok(sum.scaled(1.0 / samples.len().max(1) as f64))
}

/// Writes parameters, optimizer moments, and counters to one file.
pub fn save_training_checkpoint<E: Element>(
    path: &Path,
    store: &ParamStore<E>,
    state: &OptimState<E>,
    extra: &serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor<E>, bool)> = Vec::new();
    for (i, p) in store.iter().enumerate() {
        if p.name.starts_with(MOMENT_PREFIX) {
            return Err(Error::Checkpoint(format!(
                "parameter name {:?} collides with the optimizer prefix",
                p.name
            )));
        }
        tensors.push((p.name.clone(), &p.value, p.trainable));
        tensors.push((format!("{MOMENT_PREFIX}m.{}", p.name), &state.m[i], false));
        tensors.push((format!("{MOMENT_PREFIX}v.{}", p.name), &state.v[i], false));
    }
    let mut extra = extra.clone();
    extra.insert("step".into(), serde_json::json!(state.step));
    checkpoint::save(path, &tensors, &extra)
}

/// Restores only the model parameters from a checkpoint, ignoring any
/// optimizer moments it carries. Returns the checkpoint metadata.
pub fn load_model_params<E: Element>(
    path: &Path,
    store: &mut ParamStore<E>,
) -> Result<serde_json::Map<String, serde_json::Value>> {
    let ckpt = checkpoint::load::<E>(path)?;
    let params: Vec<_> = ckpt
        .tensors
        .into_iter()
        .filter(|(name, _, _)| !name.starts_with(MOMENT_PREFIX))
        .collect();
    let param_ckpt = Checkpoint {
        tensors: params,
        extra: ckpt.extra.clone(),
    };
    store.load(&param_ckpt)?;
    Ok(ckpt.extra)
}

/// Restores parameters and optimizer moments saved by
/// [`save_training_checkpoint`]. The store must already hold the same
/// architecture; values are replaced bit-exactly.
pub fn load_training_checkpoint<E: Element>(
    path: &Path,
    store: &mut ParamStore<E>,
) -> Result<(OptimState<E>, serde_json::Map<String, serde_json::Value>)> {
    let ckpt = checkpoint::load::<E>(path)?;
    let (moments, params): (Vec<_>, Vec<_>) = ckpt
        .tensors
        .into_iter()
        .partition(|(name, _, _)| name.starts_with(MOMENT_PREFIX));
    let param_ckpt = Checkpoint {
        tensors: params,
        extra: ckpt.extra.clone(),
    };
    store.load(&param_ckpt)?;

    let mut state = OptimState::new(store);
    let mut found = 0usize;
    for (name, tensor, _) in moments {
        let (slot, param_name) = if let Some(rest) = name.strip_prefix("optim.m.") {
            (&mut state.m, rest)
        } else if let Some(rest) = name.strip_prefix("optim.v.") {
            (&mut state.v, rest)
        } else {
            return Err(Error::Checkpoint(format!(
                "unrecognized optimizer tensor {name:?}"
            )));
        };
        let idx = store
            .iter()
            .position(|p| p.name == param_name)
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "optimizer moment {name:?} has no matching parameter"
                ))
            })?;
        if tensor.shape() != slot[idx].shape() {
            return Err(Error::Checkpoint(format!(
                "optimizer moment {name:?} has shape {:?}, expected {:?}",
                tensor.shape(),
                slot[idx].shape()
            )));
        }
        slot[idx] = tensor;
        found += 1;
    }
    if found != 2 * store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {found} optimizer moments for {} parameters",
            store.len()
        )));
    }
    state.step = ckpt.extra.get("step").and_then(|v| v.as_u64()).ok_or_else(|| {
        Error::Checkpoint("checkpoint is missing the optimizer step counter".into())
    })?;
    state.matches(store)?;
    Ok((state, ckpt.extra))
}

fn append_json_line<T: Serialize>(file: &mut std::fs::File, path: &Path, record: &T) -> Result<()> {
    let line = serde_json::to_string(record)
        .map_err(|e| Error::Contract(format!("record serialization failed: {e}")))?;
    writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    file.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads back a metrics file written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                detail: e.to_string(),
            })
        })
        .collect()
}

/// Runs (or resumes) training as described by `cfg`.
///
/// Fresh runs truncate the logs and start from a seed-derived
/// initialization; `resume` requires the run directory's echoed config
/// to match `cfg` and continues from the last checkpoint with optimizer
/// moments restored bit-exactly.
pub fn train<E: Element>(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mc = cfg.model();
    let run_dir = cfg.run_dir.clone();
    let metrics_path = run_dir.join(METRICS_LOG);
    let timings_path = run_dir.join(TIMINGS_LOG);

    if resume {
        let echoed = RunConfig::load(&run_dir.join("config.toml")).map_err(|_| {
            Error::Config(format!(
                "cannot resume: no echoed config in {}",
                run_dir.display()
            ))
        })?;
        if echoed != *cfg {
            return Err(Error::Config(
                "cannot resume: config differs from the echoed original".into(),
            ));
        }
    } else {
        cfg.save(&run_dir)?;
        for p in [&metrics_path, &timings_path] {
            std::fs::write(p, b"").map_err(|e| Error::io(p.display().to_string(), e))?;
        }
    }

    let manifest = Manifest::load(&cfg.data_dir)?;
    if manifest.spec.vocab_size != cfg.data.vocab_size {
        return Err(Error::Config(format!(
            "dataset on disk has vocabulary {} but the config says {}",
            manifest.spec.vocab_size, cfg.data.vocab_size
        )));
    }
    let train_samples = load_split(&manifest, &cfg.data_dir, "train")?;
    let dev_samples = load_split(&manifest, &cfg.data_dir, "dev")?;
    if train_samples.is_empty() {
        return Err(Error::Contract("train split is empty".into()));
    }
    if dev_samples.is_empty() {
        return Err(Error::Contract("dev split is empty".into()));
    }

    let mut store = ParamStore::<E>::new();
    init_model(&mut store, &Rng::new(cfg.seed).derive("init"), &mc)?;
    let mut state = OptimState::new(&store);
    let mut start_epoch = 0usize;
    let mut best_dev_wer = f64::INFINITY;
    let mut best_epoch = 0usize;

    if resume {
        let (loaded, extra) = load_training_checkpoint(&run_dir.join(LAST_CHECKPOINT), &mut store)?;
        state = loaded;
        start_epoch = extra.get("epoch").and_then(|v| v.as_u64()).ok_or_else(|| {
            Error::Checkpoint("checkpoint is missing the epoch counter".into())
        })? as usize;
        if let Some(w) = extra.get("best_dev_wer").and_then(|v| v.as_f64()) {
            best_dev_wer = w;
        }
        if let Some(e) = extra.get("best_epoch").and_then(|v| v.as_u64()) {
            best_epoch = e as usize;
        }
    }

    let open_append = |p: &Path| -> Result<std::fs::File> {
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map_err(|e| Error::io(p.display().to_string(), e))
    };
    let mut metrics_file = open_append(&metrics_path)?;
    let mut timings_file = open_append(&timings_path)?;

    for epoch in start_epoch..cfg.epochs {
        let train_clock = Instant::now();
        let hp = cfg.optim.params_at(epoch)?;
        let mut shuffle_rng = Rng::new(cfg.seed)
            .derive("shuffle")
            .derive_indexed("epoch", epoch as u64);
        let order = shuffled(train_samples.len(), &mut shuffle_rng);

        let mut epoch_sum = LossScalars::default();
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let passes: Vec<SamplePass<E>> = batch
                .par_iter()
                .map(|&si| {
                    let s = &train_samples[si];
                    let mut arng = Rng::new(cfg.seed)
                        .derive("augment")
                        .derive_indexed("epoch", epoch as u64)
                        .derive(&s.id);
                    let clip = augment(s, &mut arng, true, cfg.data.t_max);
                    train_sample_pass(&store, &mc, &cfg.loss, &clip)
                })
                .collect::<Result<_>>()?;

            if passes.iter().any(|p| !p.scalars.total.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }

            // Deterministic fold: average the per-sample gradients in
            // batch order, then one optimizer step, then the normalizer
            // statistics in the same order.
            store.zero_grads();
            let scale = E::of(1.0 / batch.len() as f64);
            for pass in &passes {
                let scaled: Vec<(usize, Tensor<E>)> = pass
                    .grads
                    .iter()
                    .map(|(i, g)| {
                        let mut g = g.clone();
                        for v in g.data_mut() {
                            *v = *v * scale;
                        }
                        (*i, g)
                    })
                    .collect();
                store.accumulate(&scaled)?;
            }
            if let Some(c) = cfg.optim.clip_norm {
                clip_global_norm(&mut store, c)?;
            }
            adam_step(&mut store, &mut state, &hp)?;
            for pass in &passes {
                apply_stat_updates(&mut store, &pass.updates, BN_MOMENTUM)?;
            }
            for pass in &passes {
                epoch_sum.add(&pass.scalars);
            }
        }
        let train_losses = epoch_sum.scaled(1.0 / train_samples.len() as f64);
        let train_seconds = train_clock.elapsed().as_secs_f64();

        let eval_clock = Instant::now();
        let (train_wer, _) = decode_split(&store, &mc, &train_samples)?;
        let (dev_wer, _) = decode_split(&store, &mc, &dev_samples)?;
        let dev_losses = split_losses(&store, &mc, &cfg.loss, &dev_samples)?;
        let eval_seconds = eval_clock.elapsed().as_secs_f64();

        for (split, losses, report) in [
            ("train", &train_losses, &train_wer),
            ("dev", &dev_losses, &dev_wer),
        ] {
            append_json_line(
                &mut metrics_file,
                &metrics_path,
                &MetricsRecord {
                    epoch,
                    split: split.to_string(),
                    conv_ctc: losses.conv_ctc,
                    seq_ctc: losses.seq_ctc,
                    dist: losses.dist,
                    cu: losses.cu,
                    cp: losses.cp,
                    total: losses.total,
                    wer: report.wer,
                    sub: report.sub,
                    del: report.del,
                    ins: report.ins,
                },
            )?;
        }
        for (split, seconds) in [("train", train_seconds), ("dev", eval_seconds)] {
            append_json_line(
                &mut timings_file,
                &timings_path,
                &TimingRecord {
                    epoch,
                    split: split.to_string(),
                    seconds,
                },
            )?;
        }

        if dev_wer.wer < best_dev_wer {
            best_dev_wer = dev_wer.wer;
            best_epoch = epoch;
            let mut extra = serde_json::Map::new();
            extra.insert("epoch".into(), serde_json::json!(epoch + 1));
            extra.insert("dev_wer".into(), serde_json::json!(dev_wer.wer));
            extra.insert("vocab_size".into(), serde_json::json!(mc.vocab_size));
            save_training_checkpoint(&run_dir.join(BEST_CHECKPOINT), &store, &state, &extra)?;
        }
        let mut extra = serde_json::Map::new();
        extra.insert("epoch".into(), serde_json::json!(epoch + 1));
        extra.insert("best_dev_wer".into(), serde_json::json!(best_dev_wer));
        extra.insert("best_epoch".into(), serde_json::json!(best_epoch));
        extra.insert("vocab_size".into(), serde_json::json!(mc.vocab_size));
        save_training_checkpoint(&run_dir.join(LAST_CHECKPOINT), &store, &state, &extra)?;
    }

    Ok(TrainOutcome {
        run_dir,
        epochs_run: cfg.epochs,
        best_dev_wer,
        best_epoch,
    })
}

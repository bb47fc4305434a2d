use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::corpus::{load_corpus, Corpus, PairedBatch, Vocabulary};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::kv::KvMap;
use crate::masking::{apply_report_mask, item_seed, make_mask_plan, patchify};
use crate::model::{batch_losses, Model, ModelConfig, ModelParams, SampleInputs};
use crate::objectives::{loss_all, warmup_lambda, LossBreakdown};
use crate::optim::{AdamW, Moments};
use crate::real::Real;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub lambda_gla: f64,
    pub l_mim: f64,
    pub l_mlm: f64,
    pub l_g: f64,
    pub l_l: f64,
    pub l_all: f64,
    pub wall_ms: Option<u64>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Model, optimizer and the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub step: usize,
}

impl<T: Real> TrainState<T> {
    pub fn fresh(cfg: &RunConfig) -> Result<Self> {
        Ok(TrainState {
            model: Model::new(cfg.model.clone(), cfg.seed)?,
            opt: AdamW::new(cfg.optimizer()),
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Checkpoint<T> {
        let mut meta = KvMap::new();
        for (k, v) in cfg.to_kv().iter() {
            meta.insert(format!("config.{k}"), v);
        }
        meta.insert("state.step", self.step);
        meta.insert("state.adam_t", self.opt.t);
        let mut ck = Checkpoint::new(meta);
        for (name, t) in self.model.params.named() {
            ck.push(format!("param/{name}"), t.clone());
        }
        for (name, m) in &self.opt.state {
            ck.push(format!("adam.m/{name}"), m.m.clone());
            ck.push(format!("adam.v/{name}"), m.v.clone());
        }
        ck
    }

    /// Rebuilds the state and the run configuration stored with it.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<(Self, RunConfig)> {
        let mut kv = KvMap::new();
        for (k, v) in ck.meta.iter() {
            if let Some(k) = k.strip_prefix("config.") {
                kv.insert(k, v);
            }
        }
        let mut cfg = RunConfig::default();
        cfg.apply_kv(&kv)?;
        cfg.validate()?;
        let params = params_from_checkpoint(ck, &cfg.model)?;
        let mut opt = AdamW::new(cfg.optimizer());
        opt.t = ck.meta.require("state.adam_t")?;
        for (name, t) in &ck.arrays {
            if let Some(n) = name.strip_prefix("adam.m/") {
                let v = ck
                    .get(&format!("adam.v/{n}"))
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks adam.v/{n}")))?;
                opt.state.insert(
                    n.to_string(),
                    Moments {
                        m: t.clone(),
                        v: v.clone(),
                    },
                );
            }
        }
        let state = TrainState {
            model: Model {
                cfg: cfg.model.clone(),
                params,
            },
            opt,
            step: ck.meta.require("state.step")?,
        };
        Ok((state, cfg))
    }
}

/// Parameters stored in `ck` under `param/`, checked against the shapes
/// `cfg` implies.
pub fn params_from_checkpoint<T: Real>(ck: &Checkpoint<T>, cfg: &ModelConfig) -> Result<ModelParams<Tensor<T>>> {
    let template = ModelParams::<Tensor<T>>::init(cfg, 0)?;
    let mut missing = None;
    let params = template.map(&mut |name, t| match ck.get(&format!("param/{name}")) {
        Some(s) if s.shape() == t.shape() => s.clone(),
        _ => {
            missing.get_or_insert_with(|| name.to_string());
            t.clone()
        }
    });
    match missing {
        Some(n) => Err(Error::Config(format!("checkpoint lacks a matching array for {n}"))),
        None => Ok(params),
    }
}

/// Loads a model (parameters and configuration) from a checkpoint file.
pub fn load_model<T: Real>(path: &Path) -> Result<(Model<T>, RunConfig)> {
    let ck = Checkpoint::<T>::load(path)?;
    let (state, cfg) = TrainState::from_checkpoint(&ck)?;
    Ok((state.model, cfg))
}

/// Masks and tokenizes one batch. Mask seeds depend only on
/// `(seed, step, position in batch)`.
pub fn prepare_batch<T: Real>(
    batch: &PairedBatch<T>,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    step: usize,
) -> Result<Vec<SampleInputs<T>>> {
    let m = &cfg.model;
    let base = derive_seed(cfg.seed, &[0x4d41_534b, step as u64]);
    batch
        .images
        .iter()
        .zip(&batch.reports)
        .enumerate()
        .map(|(i, (img, report))| {
            let seed = item_seed(base, i);
            let image = Tensor::new(vec![m.channels, m.height, m.width], img.clone())?;
            let patches = patchify(&image, m.patch)?.patches;
            let image_plan = make_mask_plan(m.num_patches(), cfg.mask_ratio_image, derive_seed(seed, &[0]))?;
            let rep = vocab.tokenize(report, m.report_len);
            let pool = rep.maskable_positions(cfg.mask_cls).len();
            let report_plan = make_mask_plan(pool, cfg.mask_ratio_report, derive_seed(seed, &[1]))?;
            let report_mask = apply_report_mask(&rep, &report_plan, cfg.mask_cls)?;
            Ok(SampleInputs {
                patches,
                image_plan,
                report_ids: rep.ids,
                report_mask,
            })
        })
        .collect()
}

/// Forward pass and loss parts without updating anything.
pub fn evaluate_batch<T: Real>(model: &Model<T>, inputs: &[SampleInputs<T>], cfg: &RunConfig, epoch: usize) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let lambda = warmup_lambda(epoch, cfg.warmup_epochs)?;
    let (l, _) = batch_losses(&tape, &p, &model.cfg, inputs, &cfg.weights(lambda))?;
    let v = |x| tape.item(x).to_f64_lossy();
    loss_all(v(l.l_mim), v(l.l_mlm), v(l.l_g), v(l.l_l), &cfg.weights(lambda))
}

/// One optimizer step. Returns the loss parts measured before the update.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    inputs: &[SampleInputs<T>],
    cfg: &RunConfig,
    epoch: usize,
) -> Result<LossBreakdown> {
    let lambda = warmup_lambda(epoch, cfg.warmup_epochs)?;
    let weights = cfg.weights(lambda);
    let tape = Tape::new();
    let p = state.model.bind(&tape);
    let (l, _) = batch_losses(&tape, &p, &state.model.cfg, inputs, &weights)?;
    let v = |x| tape.item(x).to_f64_lossy();
    let parts = loss_all(v(l.l_mim), v(l.l_mlm), v(l.l_g), v(l.l_l), &weights)?;
    let grads = tape.backward(l.total)?;
    let vars: HashMap<String, _> = p.named().into_iter().map(|(n, &v)| (n, v)).collect();
    state.opt.begin_step();
    let mut failure = None;
    let opt = &mut state.opt;
    let model = &state.model;
    let updated = model.params.map(&mut |name, t| {
        let mut t = t.clone();
        if failure.is_some() || !model.is_trainable(name) {
            return t;
        }
        let g = grads.wrt(vars[name]);
        if let Err(e) = opt.update(name, &mut t, &g) {
            failure = Some(e);
        }
        t
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if !updated.all_finite() {
        return Err(Error::NonFinite("parameters became non-finite after the update".into()));
    }
    state.model.params = updated;
    state.step += 1;
    Ok(parts)
}

/// Summary of a finished `train` run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub checkpoint: PathBuf,
}

fn open_metrics(path: &Path, append: bool) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn check_corpus(corpus: &Corpus, cfg: &RunConfig) -> Result<()> {
    let m = &cfg.model;
    if corpus.extents() != (m.channels, m.height, m.width) {
        return Err(Error::Config(format!(
            "corpus images are {:?} (C, H, W) but the model expects ({}, {}, {})",
            corpus.extents(),
            m.channels,
            m.height,
            m.width
        )));
    }
    if corpus.vocab.len() > m.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary has {} tokens but vocab_size={}",
            corpus.vocab.len(),
            m.vocab_size
        )));
    }
    Ok(())
}

/// Path of the snapshot written when training halts on a non-finite value.
pub fn diagnostic_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("nan.ckpt")
}

/// Trains `state` on `corpus` until `cfg.steps` steps are complete, writing
/// one metrics line per step and checkpoints to `cfg.checkpoint`.
pub fn train_loop<T: Real>(
    state: &mut TrainState<T>,
    corpus: &Arc<Corpus>,
    cfg: &RunConfig,
    metrics: &mut dyn Write,
) -> Result<Vec<MetricsRecord>> {
    check_corpus(corpus, cfg)?;
    let per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let mut records = Vec::new();
    let started = Instant::now();
    while state.step < cfg.steps {
        let epoch = state.step / per_epoch;
        let skip = state.step % per_epoch;
        let stream = corpus.stream::<T>(cfg.seed, epoch, cfg.batch_size, cfg.prefetch);
        for batch in stream.skip(skip) {
            if state.step >= cfg.steps {
                break;
            }
            let step = state.step + 1;
            let inputs = prepare_batch(&batch, cfg, &corpus.vocab, step)?;
            let snapshot = state.clone();
            let parts = match train_step(state, &inputs, cfg, epoch) {
                Ok(p) => p,
                Err(Error::NonFinite(msg)) => {
                    let path = diagnostic_path(&cfg.checkpoint);
                    let mut ck = snapshot.to_checkpoint(cfg);
                    ck.meta.insert("halt.step", step);
                    ck.meta.insert("halt.reason", &msg);
                    ck.meta.insert("halt.batch", format!("{:?}", batch.indices).replace(' ', ""));
                    ck.save(&path)?;
                    return Err(Error::NonFinite(format!(
                        "step {step}: {msg}; snapshot written to {}",
                        path.display()
                    )));
                }
                Err(e) => return Err(e),
            };
            let rec = MetricsRecord {
                step,
                epoch,
                lambda_gla: warmup_lambda(epoch, cfg.warmup_epochs)?,
                l_mim: parts.l_mim,
                l_mlm: parts.l_mlm,
                l_g: parts.l_g,
                l_l: parts.l_l,
                l_all: parts.l_all,
                wall_ms: cfg.log_wall_time.then(|| started.elapsed().as_millis() as u64),
            };
            let line = serde_json::to_string(&rec).expect("plain record serializes");
            writeln!(metrics, "{line}").map_err(|e| Error::io(&cfg.metrics, e))?;
            records.push(rec);
            if cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every) {
                state.to_checkpoint(cfg).save(&cfg.checkpoint)?;
            }
        }
    }
    metrics.flush().map_err(|e| Error::io(&cfg.metrics, e))?;
    state.to_checkpoint(cfg).save(&cfg.checkpoint)?;
    Ok(records)
}

/// `train`: fresh run from `cfg`, or a resumed run when `resume` names a
/// checkpoint (its stored configuration wins except for `steps`, `metrics`
/// and `checkpoint`, which come from `cfg`).
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let corpus = Arc::new(load_corpus(&cfg.corpus)?);
    let (mut state, run) = match resume {
        None => (TrainState::<f32>::fresh(cfg)?, cfg.clone()),
        Some(path) => {
            let (state, mut stored) = TrainState::<f32>::from_checkpoint(&Checkpoint::load(path)?)?;
            stored.steps = cfg.steps;
            stored.metrics = cfg.metrics.clone();
            stored.checkpoint = cfg.checkpoint.clone();
            stored.corpus = cfg.corpus.clone();
            (state, stored)
        }
    };
    let mut sink = open_metrics(&run.metrics, resume.is_some())?;
    let records = train_loop(&mut state, &corpus, &run, &mut sink)?;
    Ok(TrainOutcome {
        records,
        checkpoint: run.checkpoint.clone(),
    })
}

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::ModelConfig;
use crate::objectives::LossWeights;
use crate::optim::AdamWConfig;

/// Everything a run needs. Keys in config files and `--key value` flags are
/// the field names below; model fields use their own names (`d`, `heads`, …).
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub mask_ratio_image: f64,
    pub mask_ratio_report: f64,
    /// Whether `[CLS]` may be masked in reports.
    pub mask_cls: bool,
    pub lambda_il: f64,
    pub lambda_gl: f64,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Total optimizer steps.
    pub steps: usize,
    pub seed: u64,
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Record wall-clock milliseconds in metrics (breaks byte-identity).
    pub log_wall_time: bool,
    pub prefetch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            mask_ratio_image: 0.75,
            mask_ratio_report: 0.5,
            mask_cls: false,
            lambda_il: 5.0,
            lambda_gl: 3.0,
            warmup_epochs: 5,
            lr: 2e-4,
            weight_decay: 0.05,
            batch_size: 16,
            steps: 300,
            seed: 0,
            corpus: PathBuf::from("corpus"),
            checkpoint: PathBuf::from("run/model.ckpt"),
            metrics: PathBuf::from("run/metrics.jsonl"),
            checkpoint_every: 0,
            log_wall_time: false,
            prefetch: 2,
        }
    }
}

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

impl RunConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        self.model.to_kv("", &mut kv);
        kv.insert("mask_ratio_image", fmt_f64(self.mask_ratio_image));
        kv.insert("mask_ratio_report", fmt_f64(self.mask_ratio_report));
        kv.insert("mask_cls", self.mask_cls);
        kv.insert("lambda_il", fmt_f64(self.lambda_il));
        kv.insert("lambda_gl", fmt_f64(self.lambda_gl));
        kv.insert("warmup_epochs", self.warmup_epochs);
        kv.insert("lr", fmt_f64(self.lr));
        kv.insert("weight_decay", fmt_f64(self.weight_decay));
        kv.insert("batch_size", self.batch_size);
        kv.insert("steps", self.steps);
        kv.insert("seed", self.seed);
        kv.insert("corpus", self.corpus.display());
        kv.insert("checkpoint", self.checkpoint.display());
        kv.insert("metrics", self.metrics.display());
        kv.insert("checkpoint_every", self.checkpoint_every);
        kv.insert("log_wall_time", self.log_wall_time);
        kv.insert("prefetch", self.prefetch);
        kv
    }

    /// Applies every recognised key of `kv`; unknown keys are an error.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        let known = RunConfig::default().to_kv();
        if let Some(k) = kv.keys().find(|k| !known.contains(k)) {
            return Err(Error::Config(format!("unknown key {k}")));
        }
        self.model.apply_kv("", kv)?;
        kv.read_into("mask_ratio_image", &mut self.mask_ratio_image)?;
        kv.read_into("mask_ratio_report", &mut self.mask_ratio_report)?;
        kv.read_into("mask_cls", &mut self.mask_cls)?;
        kv.read_into("lambda_il", &mut self.lambda_il)?;
        kv.read_into("lambda_gl", &mut self.lambda_gl)?;
        kv.read_into("warmup_epochs", &mut self.warmup_epochs)?;
        kv.read_into("lr", &mut self.lr)?;
        kv.read_into("weight_decay", &mut self.weight_decay)?;
        kv.read_into("batch_size", &mut self.batch_size)?;
        kv.read_into("steps", &mut self.steps)?;
        kv.read_into("seed", &mut self.seed)?;
        kv.read_into("corpus", &mut self.corpus)?;
        kv.read_into("checkpoint", &mut self.checkpoint)?;
        kv.read_into("metrics", &mut self.metrics)?;
        kv.read_into("checkpoint_every", &mut self.checkpoint_every)?;
        kv.read_into("log_wall_time", &mut self.log_wall_time)?;
        kv.read_into("prefetch", &mut self.prefetch)?;
        Ok(())
    }

    /// Defaults, then the file at `path` (if any), then `overrides`. The seed
    /// must come from one of the two.
    pub fn resolve(path: Option<&Path>, overrides: &KvMap) -> Result<Self> {
        let mut kv = KvMap::new();
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            kv = KvMap::parse(&text).map_err(|e| Error::format(p, e.to_string()))?;
        }
        kv.extend(overrides);
        if !kv.contains("seed") {
            return Err(Error::Config("a seed is required (--seed or seed= in the config)".into()));
        }
        let mut cfg = RunConfig::default();
        cfg.apply_kv(&kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, r) in [("mask_ratio_image", self.mask_ratio_image), ("mask_ratio_report", self.mask_ratio_report)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("{name}={r} must lie in (0, 1)")));
            }
        }
        if self.batch_size == 0 || self.warmup_epochs == 0 {
            return Err(Error::Config("batch_size and warmup_epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("bad optimizer settings lr={} weight_decay={}", self.lr, self.weight_decay)));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn weights(&self, lambda_gla: f64) -> LossWeights {
        LossWeights {
            lambda_il: self.lambda_il,
            lambda_gl: self.lambda_gl,
            lambda_gla,
        }
    }
}

use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::probe::{probe_classify, probe_retrieve, split};
use crate::harness::train::{evaluate_batch, prepare_batch, train_loop, MetricsRecord, TrainState};
use crate::model::FusionKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kind: String,
    pub memory_slots: usize,
    /// `l_mlm` of the last training step.
    pub final_l_mlm: f64,
    /// `l_mlm` on a fixed evaluation batch after training.
    pub eval_l_mlm: f64,
    pub probe_accuracy: f64,
    pub recall_at_1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// `MA_CMF` retrained with zero memory slots.
    pub control: AblationRow,
    /// Whether the control run's metrics stream equals the `CMF` run's.
    pub control_matches_cmf: bool,
    /// `MA_CMF eval_l_mlm ≤ GAP eval_l_mlm`; reported, not enforced.
    pub ma_cmf_beats_gap: bool,
}

impl AblationTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("kind\tmemory_slots\tfinal_l_mlm\teval_l_mlm\tprobe_accuracy\trecall_at_1\n");
        for r in self.rows.iter().chain(std::iter::once(&self.control)) {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\n",
                r.kind, r.memory_slots, r.final_l_mlm, r.eval_l_mlm, r.probe_accuracy, r.recall_at_1
            ));
        }
        out
    }
}

fn run_one(
    base: &RunConfig,
    corpus: &Arc<Corpus>,
    kind: FusionKind,
    slots: usize,
    dir: &Path,
    label: &str,
) -> Result<(AblationRow, Vec<MetricsRecord>)> {
    let mut cfg = base.clone();
    cfg.model.fusion_kind = kind;
    cfg.model.memory_slots = slots;
    cfg.checkpoint = dir.join(label).join("model.ckpt");
    cfg.metrics = dir.join(label).join("metrics.jsonl");
    let mut state = TrainState::<f32>::fresh(&cfg)?;
    fs::create_dir_all(dir.join(label)).map_err(|e| Error::io(dir.join(label), e))?;
    let file = fs::File::create(&cfg.metrics).map_err(|e| Error::io(&cfg.metrics, e))?;
    let records = train_loop(&mut state, corpus, &cfg, &mut BufWriter::new(file))?;
    let last = records
        .last()
        .ok_or_else(|| Error::Config("ablation runs need steps > 0".into()))?;
    let eval_idx: Vec<usize> = (0..corpus.len().min(64)).collect();
    let eval_inputs = prepare_batch(&corpus.batch::<f32>(&eval_idx), &cfg, &corpus.vocab, 0)?;
    let eval = evaluate_batch(&state.model, &eval_inputs, &cfg, usize::MAX)?;
    let (_, test) = split(corpus.len(), cfg.seed);
    let row = AblationRow {
        kind: label.to_string(),
        memory_slots: cfg.model.effective_memory_slots(),
        final_l_mlm: last.l_mlm,
        eval_l_mlm: eval.l_mlm,
        probe_accuracy: probe_classify(&state.model, corpus, 1.0, cfg.seed)?,
        recall_at_1: probe_retrieve(&state.model, corpus, &test)?,
    };
    Ok((row, records))
}

/// Trains one run per fusion kind (same seed, steps and data), plus an
/// `MA_CMF` control with zero memory slots, and writes `ablation.json` and
/// `ablation.tsv` under `out`.
pub fn cmd_ablate_fusion(cfg: &RunConfig, corpus: &Arc<Corpus>, out: &Path) -> Result<AblationTable> {
    let mut rows = Vec::new();
    let mut cmf_records = Vec::new();
    for kind in FusionKind::ALL {
        let (row, records) = run_one(cfg, corpus, kind, cfg.model.memory_slots, out, &kind.to_string())?;
        if kind == FusionKind::Cmf {
            cmf_records = records;
        }
        rows.push(row);
    }
    let (control, control_records) = run_one(cfg, corpus, FusionKind::MaCmf, 0, out, "MA_CMF_S0")?;
    let eval = |k: &str| rows.iter().find(|r| r.kind == k).map(|r| r.eval_l_mlm).unwrap_or(f64::NAN);
    let table = AblationTable {
        control_matches_cmf: control_records == cmf_records,
        ma_cmf_beats_gap: eval("MA_CMF") <= eval("GAP"),
        rows,
        control,
    };
    let json = serde_json::to_string_pretty(&table).expect("plain table serializes");
    let jp = out.join("ablation.json");
    fs::write(&jp, json).map_err(|e| Error::io(&jp, e))?;
    let tp = out.join("ablation.tsv");
    fs::write(&tp, table.to_tsv()).map_err(|e| Error::io(&tp, e))?;
    Ok(table)
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mpma::corpus::{generate_corpus, load_corpus, SyntheticWorld};
use mpma::harness::{
    cmd_ablate_fusion, cmd_gradcheck, cmd_reconstruct, cmd_train, gradcheck_model_config, load_model, probe_classify,
    probe_retrieve, split, GradcheckOptions, ProbeReport, RunConfig,
};
use mpma::kv::KvMap;

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "mpma", version, about = "Paired masking and alignment pre-training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by commands that build a run configuration.
#[derive(Args, Debug)]
struct RunArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (checkpoint and metrics go here).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-key overrides: `--key value` or `--key=value`, keys as in the config file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic paired corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
    },
    /// Pre-train on a corpus.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter group on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// Test hook: corrupt the analytic gradient of this group.
        #[arg(long, hide = true)]
        corrupt_group: Option<String>,
        /// Model overrides (`--key value`).
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Dump masked input, reconstruction and ground truth for k pairs.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear-probe classification or report-to-image retrieval.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_parser = ["classify", "retrieve"])]
        task: String,
        #[arg(long, default_value_t = 1.0)]
        label_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train once per fusion kind and compare.
    AblateFusion {
        #[command(flatten)]
        run: RunArgs,
    },
}

/// `--key value` / `--key=value` pairs; dashes in keys become underscores.
fn parse_overrides(args: &[String]) -> Result<KvMap> {
    let mut kv = KvMap::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| anyhow!("expected --key, got {a:?}"))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| anyhow!("--{key} needs a value"))?;
                (key.to_string(), v.clone())
            }
        };
        kv.insert(key.replace('-', "_"), value);
    }
    Ok(kv)
}

/// Removes `--name value` / `--name=value` from `args`. Named flags given
/// after the first override end up in the trailing list, so they are
/// recovered here.
fn take_flag(args: &mut Vec<String>, name: &str) -> Result<Option<String>> {
    let flag = format!("--{name}");
    let Some(i) = args.iter().position(|a| *a == flag || a.starts_with(&format!("{flag}="))) else {
        return Ok(None);
    };
    let a = args.remove(i);
    match a.split_once('=') {
        Some((_, v)) => Ok(Some(v.to_string())),
        None if i < args.len() => Ok(Some(args.remove(i))),
        None => bail!("{flag} needs a value"),
    }
}

impl RunArgs {
    fn normalize(&mut self) -> Result<()> {
        if let Some(c) = take_flag(&mut self.overrides, "config")? {
            self.config = Some(c.into());
        }
        if let Some(s) = take_flag(&mut self.overrides, "seed")? {
            self.seed = Some(s.parse().with_context(|| format!("bad seed {s:?}"))?);
        }
        if let Some(o) = take_flag(&mut self.overrides, "out")? {
            self.out = Some(o.into());
        }
        Ok(())
    }
}

fn resolve_run(run: &RunArgs) -> Result<RunConfig> {
    let mut kv = parse_overrides(&run.overrides)?;
    if let Some(s) = run.seed {
        kv.insert("seed", s);
    }
    if let Some(out) = &run.out {
        kv.insert("checkpoint", out.join("model.ckpt").display());
        kv.insert("metrics", out.join("metrics.jsonl").display());
    }
    Ok(RunConfig::resolve(run.config.as_deref(), &kv)?)
}

fn train(run: &RunArgs, resume: Option<&Path>) -> Result<()> {
    let cfg = resolve_run(run)?;
    let out = cmd_train(&cfg, resume)?;
    match (out.records.first(), out.records.last()) {
        (Some(a), Some(b)) => println!(
            "steps {}..{}  l_all {:.6} -> {:.6}  checkpoint {}",
            a.step,
            b.step,
            a.l_all,
            b.l_all,
            out.checkpoint.display()
        ),
        _ => println!("nothing to do; checkpoint {}", out.checkpoint.display()),
    }
    Ok(())
}

/// `Ok(false)` when the check ran and failed.
fn gradcheck(seed: u64, batch: usize, corrupt: Option<String>, overrides: &[String]) -> Result<bool> {
    let mut cfg = gradcheck_model_config();
    cfg.apply_kv("", &parse_overrides(overrides)?)?;
    let opts = GradcheckOptions {
        batch,
        corrupt,
        ..GradcheckOptions::default()
    };
    let report = cmd_gradcheck(&cfg, seed, &opts)?;
    println!("{:<28} {:>6} {:>12} {:>12}  status", "group", "numel", "rel_error", "grad_norm");
    for g in &report.groups {
        println!(
            "{:<28} {:>6} {:>12.3e} {:>12.3e}  {}",
            g.name,
            g.numel,
            g.rel_error,
            g.grad_norm,
            if g.passed { "ok" } else { "FAIL" }
        );
    }
    println!("max relative error {:.3e}", report.max_rel_error);
    Ok(report.passed)
}

fn probe(checkpoint: &Path, corpus: &Path, task: &str, fraction: f64, seed: u64) -> Result<()> {
    let (model, _) = load_model::<f32>(checkpoint)?;
    let corpus = load_corpus(corpus)?;
    let report = match task {
        "classify" => {
            let (_, test) = split(corpus.len(), seed);
            ProbeReport {
                task: task.into(),
                label_fraction: Some(fraction),
                score: probe_classify(&model, &corpus, fraction, seed)?,
                n: test.len(),
            }
        }
        _ => {
            let (_, test) = split(corpus.len(), seed);
            ProbeReport {
                task: task.into(),
                label_fraction: None,
                score: probe_retrieve(&model, &corpus, &test)?,
                n: test.len(),
            }
        }
    };
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenCorpus {
            out,
            seed,
            count,
            height,
            width,
            channels,
        } => {
            let world = SyntheticWorld {
                channels,
                height,
                width,
                seed,
            };
            let c = generate_corpus(&out, count, &world)?;
            println!("wrote {} pairs to {}", c.len(), out.display());
        }
        Command::Train { mut run, mut resume } => {
            run.normalize()?;
            if let Some(r) = take_flag(&mut run.overrides, "resume")? {
                resume = Some(r.into());
            }
            train(&run, resume.as_deref())?
        }
        Command::Gradcheck {
            mut seed,
            mut batch,
            mut corrupt_group,
            mut overrides,
        } => {
            if let Some(s) = take_flag(&mut overrides, "seed")? {
                seed = s.parse().with_context(|| format!("bad seed {s:?}"))?;
            }
            if let Some(b) = take_flag(&mut overrides, "batch")? {
                batch = b.parse().with_context(|| format!("bad batch {b:?}"))?;
            }
            corrupt_group = take_flag(&mut overrides, "corrupt-group")?.or(corrupt_group);
            return gradcheck(seed, batch, corrupt_group, &overrides);
        }
        Command::Reconstruct { checkpoint, corpus, k, out } => {
            let (model, cfg) = load_model::<f32>(&checkpoint)?;
            let corpus = load_corpus(&corpus)?;
            for d in cmd_reconstruct(&model, &cfg, &corpus, k, &out)? {
                println!("{}  masked mse {:.6}  {}", d.index, d.masked_mse, d.filled_report);
            }
        }
        Command::Probe {
            checkpoint,
            corpus,
            task,
            label_fraction,
            seed,
        } => probe(&checkpoint, &corpus, &task, label_fraction, seed)?,
        Command::AblateFusion { mut run } => {
            run.normalize()?;
            let cfg = resolve_run(&run)?;
            let out = run.out.clone().unwrap_or_else(|| PathBuf::from("ablation"));
            let corpus = Arc::new(load_corpus(&cfg.corpus).with_context(|| "loading the corpus")?);
            let table = cmd_ablate_fusion(&cfg, &corpus, &out)?;
            print!("{}", table.to_tsv());
            println!("control CMF == MA_CMF(S=0): {}", table.control_matches_cmf);
            println!("MA_CMF l_mlm <= GAP l_mlm: {}", table.ma_cmf_beats_gap);
            if !table.control_matches_cmf {
                bail!("control runs differ");
            }
        }
    }
    Ok(true)
}

fn is_numerical(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| matches!(c.downcast_ref::<mpma::Error>(), Some(mpma::Error::NonFinite(_))))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_numerical(&e) {
                ExitCode::from(EXIT_NUMERICAL)
            } else {
                ExitCode::from(EXIT_USAGE)
            }
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::masking::{apply_report_mask, make_mask_plan, TokenizedReport, CLS_ID, PAD_ID};
use crate::model::{batch_losses, FusionKind, ModelConfig, ModelParams, SampleInputs};
use crate::objectives::LossWeights;
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;

/// Largest width the checker accepts.
pub const MAX_WIDTH: usize = 16;
pub const TOLERANCE: f64 = 1e-4;

/// d=8, one layer everywhere, two memory slots, 4×4 grey images in 2×2
/// patches (four patches), six report positions. Weights are drawn wider
/// than for training so attention logits are far from uniform.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        depth_enc_v: 1,
        depth_dec_v: 1,
        depth_enc_t: 1,
        depth_dec_t: 1,
        mlp_ratio: 2,
        patch: 2,
        channels: 1,
        height: 4,
        width: 4,
        report_len: 6,
        vocab_size: 12,
        memory_slots: 2,
        fusion_kind: FusionKind::MaCmf,
        init_std: 0.5,
        ..ModelConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub batch: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: perturbs the analytic gradient of this group before
    /// comparison.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            batch: 2,
            step: 1e-5,
            tolerance: TOLERANCE,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub numel: usize,
    /// `‖g − g_fd‖₂ / (‖g‖₂ + ‖g_fd‖₂ + 1e-12)`.
    pub rel_error: f64,
    pub grad_norm: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Random pairs for `cfg`: uniform pixels, random in-vocabulary reports with
/// trailing padding, and seeded masks.
pub fn random_inputs(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Vec<SampleInputs<f64>>> {
    let np = cfg.num_patches();
    let m = cfg.report_len;
    (0..n)
        .map(|i| {
            let s = derive_seed(seed, &[i as u64]);
            let mut rng = SeededRng::new(s);
            let pixels: Vec<f64> = (0..np * cfg.patch_dim()).map(|_| rng.uniform()).collect();
            let len = 3 + rng.below((m - 2) as u64) as usize;
            let ids: Vec<usize> = (0..m)
                .map(|p| match p {
                    0 => CLS_ID,
                    p if p < len => 4 + rng.below((cfg.vocab_size - 4) as u64) as usize,
                    _ => PAD_ID,
                })
                .collect();
            let rep = TokenizedReport {
                valid: (0..m).map(|p| p < len).collect(),
                ids,
                vocab_size: cfg.vocab_size,
            };
            let image_plan = make_mask_plan(np, 0.75, derive_seed(s, &[0]))?;
            let plan = make_mask_plan(rep.maskable_positions(false).len(), 0.5, derive_seed(s, &[1]))?;
            Ok(SampleInputs {
                patches: Tensor::new(vec![np, cfg.patch_dim()], pixels)?,
                image_plan,
                report_mask: apply_report_mask(&rep, &plan, false)?,
                report_ids: rep.ids,
            })
        })
        .collect()
}

fn total_loss(params: &ModelParams<Tensor<f64>>, cfg: &ModelConfig, inputs: &[SampleInputs<f64>], w: &LossWeights) -> Result<f64> {
    let tape = Tape::new();
    let p = params.bind_frozen(&tape);
    let (l, _) = batch_losses(&tape, &p, cfg, inputs, w)?;
    Ok(tape.item(l.total))
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Compares the analytic gradient of the full objective (all weights active)
/// with central differences, entry by entry, for every parameter array.
pub fn cmd_gradcheck(cfg: &ModelConfig, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    cfg.validate()?;
    if cfg.d > MAX_WIDTH || cfg.num_patches() > MAX_WIDTH || cfg.report_len > MAX_WIDTH {
        return Err(Error::Config(format!(
            "gradcheck needs a tiny model (widths ≤ {MAX_WIDTH}); got d={} N_p={} M={}",
            cfg.d,
            cfg.num_patches(),
            cfg.report_len
        )));
    }
    if opts.batch < 2 {
        return Err(Error::Config("gradcheck needs a batch of at least 2".into()));
    }
    let params = ModelParams::<Tensor<f64>>::init(cfg, seed)?;
    let inputs = random_inputs(cfg, opts.batch, derive_seed(seed, &[0x4752_4144]))?;
    let w = LossWeights {
        lambda_il: 5.0,
        lambda_gl: 3.0,
        lambda_gla: 1.0,
    };

    let tape = Tape::new();
    let bound = params.bind(&tape, &|_| true);
    let (l, _) = batch_losses(&tape, &bound, cfg, &inputs, &w)?;
    let grads = tape.backward(l.total)?;
    let vars = bound.named();

    let mut groups = Vec::new();
    for ((name, value), (_, &var)) in params.named().into_iter().zip(vars) {
        let mut analytic = grads.wrt(var).to_f64_vec();
        if opts.corrupt.as_deref() == Some(name.as_str()) {
            analytic[0] += 1.0 + analytic[0].abs();
        }
        let mut numeric = vec![0.0; value.numel()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let shifted = |delta: f64| -> Result<f64> {
                let p = params.with_updated(&name, |t| {
                    let mut t = t.clone();
                    t.data_mut()[k] += delta;
                    t
                })?;
                total_loss(&p, cfg, &inputs, &w)
            };
            *slot = (shifted(opts.step)? - shifted(-opts.step)?) / (2.0 * opts.step);
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let rel_error = norm(&diff) / (norm(&analytic) + norm(&numeric) + 1e-12);
        groups.push(GroupCheck {
            numel: value.numel(),
            rel_error,
            grad_norm: norm(&analytic),
            passed: rel_error < opts.tolerance,
            name,
        });
    }
    let max_rel_error = groups.iter().map(|g| g.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        passed: groups.iter().all(|g| g.passed),
        max_rel_error,
        groups,
    })
}

//! The MPMA network: shared vision encoder, vision decoder, text encoder,
//! cross-modal fusion, text decoder and the alignment heads.

mod config;
mod params;

pub use config::{FusionKind, FusionSource, GlobalPooling, ModelConfig};
pub use params::{FusionParams, ModelParams};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::masking::{MaskPlan, MaskedReport};
use crate::nn::{self, linear, run_blocks};
use crate::objectives::{self, LossWeights};
use crate::real::Real;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-12;

fn expect_shape<T: Real>(tape: &Tape<T>, op: &'static str, x: Var, want: &[usize]) -> Result<()> {
    let got = tape.shape(x);
    if got != want {
        return Err(Error::shape(op, &got, want));
    }
    Ok(())
}

fn check_plan(op: &'static str, plan: &MaskPlan, total: usize) -> Result<()> {
    if plan.total != total || plan.masked.len() + plan.visible.len() != total {
        return Err(Error::invalid(op, format!("plan over {} items, expected {total}", plan.total)));
    }
    Ok(())
}

/// Patch projection plus the vision position rows at `indices`, then the
/// encoder stack.
pub fn encode_patches<T: Real>(
    tape: &Tape<T>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    patches: Var,
    indices: &[usize],
) -> Result<Var> {
    expect_shape(tape, "encode_patches", patches, &[indices.len(), cfg.patch_dim()])?;
    let x = linear(tape, patches, p.patch_embed, None)?;
    let x = tape.add(x, tape.gather_rows(p.pos_v, indices)?)?;
    run_blocks(tape, x, &p.enc_v, cfg.attention())
}

/// Encodes only the visible patches (`(N_p − h) × d`).
pub fn encode_image_masked<T: Real>(
    tape: &Tape<T>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    visible: Var,
    plan: &MaskPlan,
) -> Result<Var> {
    check_plan("encode_image_masked", plan, cfg.num_patches())?;
    encode_patches(tape, p, cfg, visible, &plan.visible)
}

/// Encodes all `N_p` patches with the same weights.
pub fn encode_image_full<T: Real>(tape: &Tape<T>, p: &ModelParams<Var>, cfg: &ModelConfig, patches: Var) -> Result<Var> {
    let all: Vec<usize> = (0..cfg.num_patches()).collect();
    encode_patches(tape, p, cfg, patches, &all)
}

/// Pixel predictions for the masked patches, ascending masked-index order.
pub fn decode_image<T: Real>(
    tape: &Tape<T>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    encoded: Var,
    plan: &MaskPlan,
) -> Result<Var> {
    let np = cfg.num_patches();
    check_plan("decode_image", plan, np)?;
    expect_shape(tape, "decode_image", encoded, &[plan.visible.len(), cfg.d])?;
    let placed = tape.scatter_rows(encoded, &plan.visible, np)?;
    let token = tape.reshape(p.dec_v_mask, &[1, cfg.d])?;
    let tokens = tape.gather_rows(token, &vec![0; plan.masked.len()])?;
    let fill = tape.add(tokens, tape.gather_rows(p.dec_v_pos, &plan.masked)?)?;
    let x = tape.add(placed, tape.scatter_rows(fill, &plan.masked, np)?)?;
    let x = run_blocks(tape, x, &p.dec_v, cfg.attention())?;
    let x = nn::layer_norm(tape, tape.gather_rows(x, &plan.masked)?, &p.dec_v_ln)?;
    linear(tape, x, p.dec_v_head_w, Some(p.dec_v_head_b))
}

fn check_ids(op: &'static str, ids: &[usize], cfg: &ModelConfig) -> Result<()> {
    if ids.len() != cfg.report_len {
        return Err(Error::invalid(op, format!("{} ids, expected {}", ids.len(), cfg.report_len)));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::invalid(op, format!("id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    Ok(())
}

/// Token embedding plus positions for the masked report (`E_t`, `M × d`).
pub fn embed_masked_report<T: Real>(tape: &Tape<T>, p: &ModelParams<Var>, cfg: &ModelConfig, ids: &[usize]) -> Result<Var> {
    check_ids("embed_masked_report", ids, cfg)?;
    tape.add(tape.embedding(p.report_embed, ids)?, p.pos_t)
}

/// Text encoder over the unmasked report (`t`, `M × d`).
pub fn encode_report<T: Real>(tape: &Tape<T>, p: &ModelParams<Var>, cfg: &ModelConfig, ids: &[usize]) -> Result<Var> {
    check_ids("encode_report", ids, cfg)?;
    let x = tape.add(tape.embedding(p.text_embed, ids)?, p.text_pos)?;
    run_blocks(tape, x, &p.text_enc, cfg.attention())
}

/// Fused sequence `C` and the row at which its report segment starts.
pub fn fuse<T: Real>(tape: &Tape<T>, p: &ModelParams<Var>, cfg: &ModelConfig, v: Var, e_t: Var) -> Result<(Var, usize)> {
    let (vs, es) = (tape.shape(v), tape.shape(e_t));
    if vs.len() != 2 || es.len() != 2 || vs[1] != cfg.d || es[1] != cfg.d {
        return Err(Error::shape("fuse", &vs, &es));
    }
    match cfg.fusion_kind {
        FusionKind::Gap | FusionKind::Gmp => {
            let pooled = if cfg.fusion_kind == FusionKind::Gap {
                tape.mean_axis(v, 0)?
            } else {
                tape.max_axis(v, 0)?
            };
            let pooled = tape.reshape(pooled, &[1, cfg.d])?;
            Ok((tape.concat(&[pooled, e_t], 0)?, 1))
        }
        FusionKind::Cmf | FusionKind::MaCmf => {
            let f = p
                .fusion
                .as_ref()
                .ok_or_else(|| Error::invalid("fuse", "model was built without fusion parameters"))?;
            let spec = cfg.attention();
            let c_v = nn::mca_with_memory(tape, v, e_t, f.mem_t, &f.attn_v, spec)?;
            let c_t = nn::mca_with_memory(tape, e_t, v, f.mem_v, &f.attn_t, spec)?;
            Ok((tape.concat(&[c_v, c_t], 0)?, vs[0]))
        }
    }
}

/// Vocabulary logits at report positions `positions` (ascending).
pub fn decode_report<T: Real>(
    tape: &Tape<T>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    fused: Var,
    offset: usize,
    positions: &[usize],
) -> Result<Var> {
    let len = tape.shape(fused)[0];
    if offset + cfg.report_len != len {
        return Err(Error::invalid(
            "decode_report",
            format!("fused length {len} does not hold a report of {} at row {offset}", cfg.report_len),
        ));
    }
    if positions.is_empty() || positions.iter().any(|&i| i >= cfg.report_len) {
        return Err(Error::invalid("decode_report", "masked positions outside the report"));
    }
    let rows: Vec<usize> = (0..len).collect();
    let x = tape.add(fused, tape.gather_rows(p.dec_t_pos, &rows)?)?;
    let x = run_blocks(tape, x, &p.dec_t, cfg.attention())?;
    let at: Vec<usize> = positions.iter().map(|&i| i + offset).collect();
    let x = nn::layer_norm(tape, tape.gather_rows(x, &at)?, &p.dec_t_ln)?;
    linear(tape, x, p.dec_t_head_w, Some(p.dec_t_head_b))
}

/// Alignment-head outputs for one sample.
#[derive(Clone, Copy, Debug)]
pub struct GlaOutputs {
    /// `W_v · v`, `M × D`.
    pub v_tokens: Var,
    /// `t · W_t`, `M × D`.
    pub t_tokens: Var,
    /// Pooled globals, `1 × D`.
    pub v_m: Var,
    pub t_m: Var,
    /// `v · t_tokensᵀ`, `N_p × M`.
    pub s: Var,
    pub alpha: Var,
}

pub fn gla_heads<T: Real>(tape: &Tape<T>, p: &ModelParams<Var>, cfg: &ModelConfig, v: Var, t: Var) -> Result<GlaOutputs> {
    expect_shape(tape, "gla_heads", v, &[cfg.num_patches(), cfg.d])?;
    expect_shape(tape, "gla_heads", t, &[cfg.report_len, cfg.d])?;
    let v_tokens = tape.matmul(p.gla_wv, v)?;
    let t_tokens = tape.matmul(t, p.gla_wt)?;
    let pool = |x: Var| -> Result<Var> {
        let g = tape.reshape(tape.mean_axis(x, 0)?, &[1, cfg.d])?;
        Ok(match cfg.global_pooling {
            GlobalPooling::MeanNormalized => tape.normalize_rows(g, NORM_EPS),
            GlobalPooling::MeanRaw => g,
        })
    };
    let (v_m, t_m) = (pool(v_tokens)?, pool(t_tokens)?);
    let s = tape.matmul_nt(v, t_tokens)?;
    let (_, alpha) = objectives::local_aggregation(tape, v, t_tokens, cfg.tau2)?;
    Ok(GlaOutputs {
        v_tokens,
        t_tokens,
        v_m,
        t_m,
        s,
        alpha,
    })
}

/// One training pair prepared for a forward pass.
#[derive(Clone, Debug)]
pub struct SampleInputs<T> {
    /// All patches, `N_p × P²C`.
    pub patches: Tensor<T>,
    pub image_plan: MaskPlan,
    /// The unmasked report.
    pub report_ids: Vec<usize>,
    pub report_mask: MaskedReport,
}

/// Per-sample forward results, all on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    /// `h × P²C`, ascending masked-patch order.
    pub recon_patches: Var,
    /// Ground-truth pixels of the masked patches.
    pub target_patches: Var,
    /// `n × V` at masked report positions.
    pub mlm_logits: Var,
    /// `v = E_I(I)` on the full image.
    pub v: Var,
    /// Text-encoder output `t`.
    pub t: Var,
    pub gla: GlaOutputs,
}

pub fn forward_sample<T: Real>(
    tape: &Tape<T>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    x: &SampleInputs<T>,
) -> Result<ForwardOutputs> {
    let np = cfg.num_patches();
    check_plan("forward_sample", &x.image_plan, np)?;
    if x.patches.shape() != [np, cfg.patch_dim()] {
        return Err(Error::shape("forward_sample", x.patches.shape(), &[np, cfg.patch_dim()]));
    }
    let patches = tape.constant(x.patches.clone());
    let visible = tape.gather_rows(patches, &x.image_plan.visible)?;
    let target_patches = tape.gather_rows(patches, &x.image_plan.masked)?;

    let encoded = encode_image_masked(tape, p, cfg, visible, &x.image_plan)?;
    let recon_patches = decode_image(tape, p, cfg, encoded, &x.image_plan)?;

    let v = encode_image_full(tape, p, cfg, patches)?;
    let e_t = embed_masked_report(tape, p, cfg, &x.report_mask.input_ids)?;
    let source = match cfg.fusion_source {
        FusionSource::Full => v,
        FusionSource::Masked => encoded,
    };
    let (fused, offset) = fuse(tape, p, cfg, source, e_t)?;
    let mlm_logits = decode_report(tape, p, cfg, fused, offset, &x.report_mask.positions)?;

    let t = encode_report(tape, p, cfg, &x.report_ids)?;
    let gla = gla_heads(tape, p, cfg, v, t)?;
    Ok(ForwardOutputs {
        recon_patches,
        target_patches,
        mlm_logits,
        v,
        t,
        gla,
    })
}

/// Batch losses on the tape; `total` is the weighted objective.
#[derive(Clone, Copy, Debug)]
pub struct BatchLosses {
    pub l_mim: Var,
    pub l_mlm: Var,
    pub l_g: Var,
    pub l_l: Var,
    pub total: Var,
}

/// Reconstruction losses average over every masked entry in the batch; the
/// contrastive losses use the other pairs of the batch as negatives.
pub fn batch_losses<T: Real>(
    tape: &Tape<T>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    batch: &[SampleInputs<T>],
    weights: &LossWeights,
) -> Result<(BatchLosses, Vec<ForwardOutputs>)> {
    if batch.is_empty() {
        return Err(Error::invalid("batch_losses", "empty batch"));
    }
    let outs = batch
        .iter()
        .map(|x| forward_sample(tape, p, cfg, x))
        .collect::<Result<Vec<_>>>()?;
    let cat = |f: &dyn Fn(&ForwardOutputs) -> Var| tape.concat(&outs.iter().map(f).collect::<Vec<_>>(), 0);
    let recon = cat(&|o| o.recon_patches)?;
    let truth = cat(&|o| o.target_patches)?;
    let l_mim = objectives::loss_mim(tape, recon, truth)?;
    let logits = cat(&|o| o.mlm_logits)?;
    let targets: Vec<usize> = batch.iter().flat_map(|x| x.report_mask.targets.iter().copied()).collect();
    let l_mlm = objectives::loss_mlm(tape, logits, &targets)?;
    let v_m = cat(&|o| o.gla.v_m)?;
    let t_m = cat(&|o| o.gla.t_m)?;
    let l_g = objectives::loss_global(tape, v_m, t_m, cfg.tau1)?;
    let vs: Vec<Var> = outs.iter().map(|o| o.v).collect();
    let ts: Vec<Var> = outs.iter().map(|o| o.gla.t_tokens).collect();
    let l_l = objectives::loss_local(tape, &vs, &ts, cfg.tau2, cfg.tau3)?;
    let total = objectives::loss_all_var(tape, l_mim, l_mlm, l_g, l_l, weights)?;
    Ok((
        BatchLosses {
            l_mim,
            l_mlm,
            l_g,
            l_l,
            total,
        },
        outs,
    ))
}

/// A configuration and its stored parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ModelParams<Tensor<T>>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&cfg, seed)?;
        Ok(Model { cfg, params })
    }

    /// Whether `name` receives gradients under this configuration.
    pub fn is_trainable(&self, name: &str) -> bool {
        !(self.cfg.freeze_text_encoder && name.starts_with("text_enc."))
    }

    pub fn bind(&self, tape: &Tape<T>) -> ModelParams<Var> {
        self.params.bind(tape, &|n| self.is_trainable(n))
    }

    /// Full-image encoder output `N_p × d` without recording gradients.
    pub fn image_features(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.bind_encoder(&tape);
        let x = tape.constant(patches.clone());
        let v = encode_image_full(&tape, &p, &self.cfg, x)?;
        let out = tape.value(v).clone();
        Ok(out)
    }

    /// Normalized image and report globals (`v_m`, `t_m`) as plain vectors.
    pub fn global_embeddings(&self, patches: &Tensor<T>, report_ids: &[usize]) -> Result<(Vec<T>, Vec<T>)> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let x = tape.constant(patches.clone());
        let v = encode_image_full(&tape, &p, &self.cfg, x)?;
        let t = encode_report(&tape, &p, &self.cfg, report_ids)?;
        let g = gla_heads(&tape, &p, &self.cfg, v, t)?;
        let out = (tape.value(g.v_m).data().to_vec(), tape.value(g.t_m).data().to_vec());
        Ok(out)
    }

    /// Binds only what the vision encoder reads; other arrays are left as
    /// cheap placeholders.
    fn bind_encoder(&self, tape: &Tape<T>) -> ModelParams<Var> {
        let placeholder = tape.constant(Tensor::scalar(T::zero()));
        self.params.map(&mut |name, t| {
            if name == "patch_embed" || name == "pos_v" || name.starts_with("enc_v.") {
                tape.constant(t.clone())
            } else {
                placeholder
            }
        })
    }
}

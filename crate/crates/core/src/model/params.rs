use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::nn::{self, AttentionParams, BlockParams, LayerNormParams, MlpParams, PositionKind};
use crate::real::Real;
use crate::rng::{derive_seed, fnv1a, SeededRng};
use crate::tensor::Tensor;

/// Cross-attention fusion parameters: one attention per direction plus the
/// optional memory rows appended to keys/values.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<P> {
    /// Image tokens query the report embedding (+ textual memory).
    pub attn_v: AttentionParams<P>,
    /// Report embedding queries the image tokens (+ visual memory).
    pub attn_t: AttentionParams<P>,
    /// Visual memory `S × d`, appended to image keys/values.
    pub mem_v: Option<P>,
    /// Textual memory `S × d`, appended to report keys/values.
    pub mem_t: Option<P>,
}

/// Every learnable array of the model, by role.
///
/// Linear maps are stored `[in, out]` and applied as `x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    /// Patch projection `P²C × d`.
    pub patch_embed: P,
    /// Vision position table `N_p × d`.
    pub pos_v: P,
    pub enc_v: Vec<BlockParams<P>>,
    /// Shared mask-token vector `[d]` for the image decoder.
    pub dec_v_mask: P,
    pub dec_v_pos: P,
    pub dec_v: Vec<BlockParams<P>>,
    pub dec_v_ln: LayerNormParams<P>,
    pub dec_v_head_w: P,
    pub dec_v_head_b: P,
    /// Masked-report token embedding `V × d`.
    pub report_embed: P,
    /// Masked-report position table `M × d`.
    pub pos_t: P,
    /// Text encoder for alignment.
    pub text_embed: P,
    pub text_pos: P,
    pub text_enc: Vec<BlockParams<P>>,
    pub fusion: Option<FusionParams<P>>,
    /// Text-decoder position table over the fused sequence, `(N_p + M) × d`.
    pub dec_t_pos: P,
    pub dec_t: Vec<BlockParams<P>>,
    pub dec_t_ln: LayerNormParams<P>,
    pub dec_t_head_w: P,
    pub dec_t_head_b: P,
    /// Token-axis projection `M × N_p` (the 1×1 convolution over patches).
    pub gla_wv: P,
    /// Feature projection of text-encoder outputs, `d × D`.
    pub gla_wt: P,
}

fn collect_blocks<'a, P>(blocks: &'a [BlockParams<P>], prefix: &str, out: &mut Vec<(String, &'a P)>) {
    for (i, b) in blocks.iter().enumerate() {
        b.collect(&format!("{prefix}.{i}"), out);
    }
}

fn map_blocks<P, Q>(blocks: &[BlockParams<P>], prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Vec<BlockParams<Q>> {
    blocks
        .iter()
        .enumerate()
        .map(|(i, b)| b.map(&format!("{prefix}.{i}"), f))
        .collect()
}

impl<P> ModelParams<P> {
    /// `(name, leaf)` pairs in a fixed order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        out.push(("patch_embed".to_string(), &self.patch_embed));
        out.push(("pos_v".to_string(), &self.pos_v));
        collect_blocks(&self.enc_v, "enc_v", &mut out);
        out.push(("dec_v.mask_token".to_string(), &self.dec_v_mask));
        out.push(("dec_v.pos".to_string(), &self.dec_v_pos));
        collect_blocks(&self.dec_v, "dec_v.blocks", &mut out);
        self.dec_v_ln.collect("dec_v.ln", &mut out);
        out.push(("dec_v.head.w".to_string(), &self.dec_v_head_w));
        out.push(("dec_v.head.b".to_string(), &self.dec_v_head_b));
        out.push(("report_embed".to_string(), &self.report_embed));
        out.push(("pos_t".to_string(), &self.pos_t));
        out.push(("text_enc.embed".to_string(), &self.text_embed));
        out.push(("text_enc.pos".to_string(), &self.text_pos));
        collect_blocks(&self.text_enc, "text_enc.blocks", &mut out);
        if let Some(f) = &self.fusion {
            f.attn_v.collect("fusion.attn_v", &mut out);
            f.attn_t.collect("fusion.attn_t", &mut out);
            if let Some(m) = &f.mem_v {
                out.push(("fusion.mem_v".to_string(), m));
            }
            if let Some(m) = &f.mem_t {
                out.push(("fusion.mem_t".to_string(), m));
            }
        }
        out.push(("dec_t.pos".to_string(), &self.dec_t_pos));
        collect_blocks(&self.dec_t, "dec_t.blocks", &mut out);
        self.dec_t_ln.collect("dec_t.ln", &mut out);
        out.push(("dec_t.head.w".to_string(), &self.dec_t_head_w));
        out.push(("dec_t.head.b".to_string(), &self.dec_t_head_b));
        out.push(("gla.w_v".to_string(), &self.gla_wv));
        out.push(("gla.w_t".to_string(), &self.gla_wt));
        out
    }

    /// Rebuilds the tree leaf by leaf; names match [`named`](Self::named).
    pub fn map<Q>(&self, f: &mut dyn FnMut(&str, &P) -> Q) -> ModelParams<Q> {
        ModelParams {
            patch_embed: f("patch_embed", &self.patch_embed),
            pos_v: f("pos_v", &self.pos_v),
            enc_v: map_blocks(&self.enc_v, "enc_v", f),
            dec_v_mask: f("dec_v.mask_token", &self.dec_v_mask),
            dec_v_pos: f("dec_v.pos", &self.dec_v_pos),
            dec_v: map_blocks(&self.dec_v, "dec_v.blocks", f),
            dec_v_ln: self.dec_v_ln.map("dec_v.ln", f),
            dec_v_head_w: f("dec_v.head.w", &self.dec_v_head_w),
            dec_v_head_b: f("dec_v.head.b", &self.dec_v_head_b),
            report_embed: f("report_embed", &self.report_embed),
            pos_t: f("pos_t", &self.pos_t),
            text_embed: f("text_enc.embed", &self.text_embed),
            text_pos: f("text_enc.pos", &self.text_pos),
            text_enc: map_blocks(&self.text_enc, "text_enc.blocks", f),
            fusion: self.fusion.as_ref().map(|fp| FusionParams {
                attn_v: fp.attn_v.map("fusion.attn_v", f),
                attn_t: fp.attn_t.map("fusion.attn_t", f),
                mem_v: fp.mem_v.as_ref().map(|m| f("fusion.mem_v", m)),
                mem_t: fp.mem_t.as_ref().map(|m| f("fusion.mem_t", m)),
            }),
            dec_t_pos: f("dec_t.pos", &self.dec_t_pos),
            dec_t: map_blocks(&self.dec_t, "dec_t.blocks", f),
            dec_t_ln: self.dec_t_ln.map("dec_t.ln", f),
            dec_t_head_w: f("dec_t.head.w", &self.dec_t_head_w),
            dec_t_head_b: f("dec_t.head.b", &self.dec_t_head_b),
            gla_wv: f("gla.w_v", &self.gla_wv),
            gla_wt: f("gla.w_t", &self.gla_wt),
        }
    }
}

/// Draws each array from its own stream, seeded by `(seed, name)`, so an
/// array's initial value does not depend on which other arrays exist.
struct Init {
    seed: u64,
    std: f64,
}

impl Init {
    fn normal<T: Real>(&self, name: &str, shape: &[usize]) -> Tensor<T> {
        let mut rng = SeededRng::new(derive_seed(self.seed, &[fnv1a(name)]));
        nn::init_normal(shape, self.std, &mut rng)
    }

    fn block<T: Real>(&self, prefix: &str, d: usize, hidden: usize) -> BlockParams<Tensor<T>> {
        let n = |s: &str| format!("{prefix}.{s}");
        BlockParams {
            ln1: LayerNormParams::init(d),
            attn: self.attention(&n("attn"), d),
            ln2: LayerNormParams::init(d),
            mlp: MlpParams {
                w1: self.normal(&n("mlp.w1"), &[d, hidden]),
                b1: Tensor::zeros(&[hidden]),
                w2: self.normal(&n("mlp.w2"), &[hidden, d]),
                b2: Tensor::zeros(&[d]),
            },
        }
    }

    fn attention<T: Real>(&self, prefix: &str, d: usize) -> AttentionParams<Tensor<T>> {
        AttentionParams {
            wq: self.normal(&format!("{prefix}.wq"), &[d, d]),
            wk: self.normal(&format!("{prefix}.wk"), &[d, d]),
            wv: self.normal(&format!("{prefix}.wv"), &[d, d]),
            wo: self.normal(&format!("{prefix}.wo"), &[d, d]),
        }
    }

    fn blocks<T: Real>(&self, prefix: &str, depth: usize, d: usize, hidden: usize) -> Vec<BlockParams<Tensor<T>>> {
        (0..depth).map(|i| self.block(&format!("{prefix}.{i}"), d, hidden)).collect()
    }

    fn position<T: Real>(&self, name: &str, len: usize, cfg: &ModelConfig) -> Tensor<T> {
        match cfg.position_kind {
            PositionKind::Learned => self.normal(name, &[len, cfg.d]),
            PositionKind::Sinusoidal => {
                let mut rng = SeededRng::new(0);
                nn::positional_embedding(len, cfg.d, PositionKind::Sinusoidal, &mut rng).expect("positive extents")
            }
        }
    }
}

impl<T: Real> ModelParams<Tensor<T>> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let ini = Init { seed, std: cfg.init_std };
        let (d, h) = (cfg.d, cfg.hidden());
        let (np, m, v) = (cfg.num_patches(), cfg.report_len, cfg.vocab_size);
        let s = cfg.effective_memory_slots();
        let fusion = cfg.fusion_kind.uses_cross_attention().then(|| FusionParams {
            attn_v: ini.attention("fusion.attn_v", d),
            attn_t: ini.attention("fusion.attn_t", d),
            mem_v: (s > 0).then(|| ini.normal("fusion.mem_v", &[s, d])),
            mem_t: (s > 0).then(|| ini.normal("fusion.mem_t", &[s, d])),
        });
        Ok(ModelParams {
            patch_embed: ini.normal("patch_embed", &[cfg.patch_dim(), d]),
            pos_v: ini.position("pos_v", np, cfg),
            enc_v: ini.blocks("enc_v", cfg.depth_enc_v, d, h),
            dec_v_mask: ini.normal("dec_v.mask_token", &[d]),
            dec_v_pos: ini.position("dec_v.pos", np, cfg),
            dec_v: ini.blocks("dec_v.blocks", cfg.depth_dec_v, d, h),
            dec_v_ln: LayerNormParams::init(d),
            dec_v_head_w: ini.normal("dec_v.head.w", &[d, cfg.patch_dim()]),
            dec_v_head_b: Tensor::zeros(&[cfg.patch_dim()]),
            report_embed: ini.normal("report_embed", &[v, d]),
            pos_t: ini.position("pos_t", m, cfg),
            text_embed: ini.normal("text_enc.embed", &[v, d]),
            text_pos: ini.position("text_enc.pos", m, cfg),
            text_enc: ini.blocks("text_enc.blocks", cfg.depth_enc_t, d, h),
            fusion,
            dec_t_pos: ini.position("dec_t.pos", np + m, cfg),
            dec_t: ini.blocks("dec_t.blocks", cfg.depth_dec_t, d, h),
            dec_t_ln: LayerNormParams::init(d),
            dec_t_head_w: ini.normal("dec_t.head.w", &[d, v]),
            dec_t_head_b: Tensor::zeros(&[v]),
            gla_wv: ini.normal("gla.w_v", &[m, np]),
            gla_wt: ini.normal("gla.w_t", &[d, d]),
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copy with the array `name` replaced by `f(old)`.
    pub fn with_updated(&self, name: &str, f: impl FnOnce(&Tensor<T>) -> Tensor<T>) -> Result<Self> {
        let mut f = Some(f);
        let mut hit = false;
        let out = self.map(&mut |n, t| {
            if n == name {
                hit = true;
                (f.take().expect("names are unique"))(t)
            } else {
                t.clone()
            }
        });
        if !hit {
            return Err(Error::invalid("ModelParams::with_updated", format!("no array named {name}")));
        }
        Ok(out)
    }

    /// Records every array on `tape`; arrays for which `trainable` returns
    /// false become constants.
    pub fn bind(&self, tape: &Tape<T>, trainable: &dyn Fn(&str) -> bool) -> ModelParams<Var> {
        self.map(&mut |name, t| nn::bind(tape, t, trainable(name)))
    }

    /// Records every array as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &Tape<T>) -> ModelParams<Var> {
        self.map(&mut |_, t| tape.constant(t.clone()))
    }

    pub fn cast<U: Real>(&self) -> ModelParams<Tensor<U>> {
        self.map(&mut |_, t| t.cast())
    }
}

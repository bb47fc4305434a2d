use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::nn::{AttentionSpec, PositionKind, ScaleMode};

/// How visual tokens are combined with the masked-report embedding before
/// the text decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionKind {
    /// Mean-pool image tokens to one row, prepend to the report embedding.
    #[serde(rename = "GAP")]
    Gap,
    /// Max-pool image tokens to one row, prepend to the report embedding.
    #[serde(rename = "GMP")]
    Gmp,
    /// Bidirectional cross-attention without memory rows.
    #[serde(rename = "CMF")]
    Cmf,
    /// Bidirectional cross-attention with learnable memory rows on keys/values.
    #[serde(rename = "MA_CMF")]
    MaCmf,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [FusionKind::Gap, FusionKind::Gmp, FusionKind::Cmf, FusionKind::MaCmf];

    pub fn uses_cross_attention(self) -> bool {
        matches!(self, FusionKind::Cmf | FusionKind::MaCmf)
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::Gap => "GAP",
            FusionKind::Gmp => "GMP",
            FusionKind::Cmf => "CMF",
            FusionKind::MaCmf => "MA_CMF",
        })
    }
}

impl FromStr for FusionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "GAP" => Ok(FusionKind::Gap),
            "GMP" => Ok(FusionKind::Gmp),
            "CMF" => Ok(FusionKind::Cmf),
            "MA_CMF" | "MACMF" => Ok(FusionKind::MaCmf),
            _ => Err(format!("unknown fusion kind {s:?} (GAP, GMP, CMF, MA_CMF)")),
        }
    }
}

/// Which vision features feed the fusion head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionSource {
    /// `v = E_I(I)` on the unmasked image.
    Full,
    /// The encoded visible patches of the masked pass.
    Masked,
}

/// How the per-sample global vectors are formed from token matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalPooling {
    /// Mean over tokens, then unit L2 norm.
    MeanNormalized,
    /// Mean over tokens, raw dot products.
    MeanRaw,
}

macro_rules! simple_enum_str {
    ($ty:ty { $($variant:path => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(format!("unknown value {s:?}; expected one of: {}", [$($name),+].join(", "))),
                }
            }
        }
    };
}

simple_enum_str!(FusionSource { FusionSource::Full => "full", FusionSource::Masked => "masked" });
simple_enum_str!(GlobalPooling {
    GlobalPooling::MeanNormalized => "mean_normalized",
    GlobalPooling::MeanRaw => "mean_raw",
});
simple_enum_str!(ScaleMode { ScaleMode::PerHead => "per_head", ScaleMode::LiteralD => "literal_d" });
simple_enum_str!(PositionKind { PositionKind::Learned => "learned", PositionKind::Sinusoidal => "sinusoidal" });

/// Architecture constants. The cross-modal width equals the model width `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub depth_enc_v: usize,
    pub depth_dec_v: usize,
    pub depth_enc_t: usize,
    pub depth_dec_t: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Report length `M`, including `[CLS]`.
    pub report_len: usize,
    pub vocab_size: usize,
    pub memory_slots: usize,
    pub fusion_kind: FusionKind,
    pub fusion_source: FusionSource,
    pub scale_mode: ScaleMode,
    pub position_kind: PositionKind,
    pub global_pooling: GlobalPooling,
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    /// Text encoder weights stay at their random initialisation.
    pub freeze_text_encoder: bool,
    /// Standard deviation of the normal initialisation of weight matrices.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            heads: 4,
            depth_enc_v: 2,
            depth_dec_v: 1,
            depth_enc_t: 1,
            depth_dec_t: 1,
            mlp_ratio: 4,
            patch: 8,
            channels: 1,
            height: 32,
            width: 32,
            report_len: 16,
            vocab_size: 32,
            memory_slots: 32,
            fusion_kind: FusionKind::MaCmf,
            fusion_source: FusionSource::Full,
            scale_mode: ScaleMode::PerHead,
            position_kind: PositionKind::Learned,
            global_pooling: GlobalPooling::MeanNormalized,
            tau1: 0.1,
            tau2: 0.1,
            tau3: 0.1,
            freeze_text_encoder: false,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// 224×224 RGB, 16×16 patches (196 per image).
    pub fn full_scale() -> Self {
        ModelConfig {
            patch: 16,
            channels: 3,
            height: 224,
            width: 224,
            ..ModelConfig::default()
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn hidden(&self) -> usize {
        self.d * self.mlp_ratio
    }

    /// Memory rows actually allocated: zero unless the fusion kind uses them.
    pub fn effective_memory_slots(&self) -> usize {
        if self.fusion_kind == FusionKind::MaCmf {
            self.memory_slots
        } else {
            0
        }
    }

    pub fn attention(&self) -> AttentionSpec {
        AttentionSpec {
            heads: self.heads,
            scale: self.scale_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return fail(format!(
                "image {}×{} is not divisible into {}-pixel patches",
                self.height, self.width, self.patch
            ));
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return fail("channels and mlp_ratio must be positive".into());
        }
        if self.num_patches() < 2 {
            return fail("need at least two patches".into());
        }
        if self.report_len < 3 {
            return fail(format!("report_len={} too short", self.report_len));
        }
        if self.vocab_size < 5 {
            return fail(format!("vocab_size={} too small", self.vocab_size));
        }
        for (name, t) in [("tau1", self.tau1), ("tau2", self.tau2), ("tau3", self.tau3), ("init_std", self.init_std)] {
            if !(t > 0.0 && t.is_finite()) {
                return fail(format!("{name}={t} must be positive"));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self, prefix: &str, out: &mut KvMap) {
        let mut put = |k: &str, v: String| out.insert(format!("{prefix}{k}"), v);
        put("d", self.d.to_string());
        put("heads", self.heads.to_string());
        put("depth_enc_v", self.depth_enc_v.to_string());
        put("depth_dec_v", self.depth_dec_v.to_string());
        put("depth_enc_t", self.depth_enc_t.to_string());
        put("depth_dec_t", self.depth_dec_t.to_string());
        put("mlp_ratio", self.mlp_ratio.to_string());
        put("patch", self.patch.to_string());
        put("channels", self.channels.to_string());
        put("height", self.height.to_string());
        put("width", self.width.to_string());
        put("report_len", self.report_len.to_string());
        put("vocab_size", self.vocab_size.to_string());
        put("memory_slots", self.memory_slots.to_string());
        put("fusion_kind", self.fusion_kind.to_string());
        put("fusion_source", self.fusion_source.to_string());
        put("scale_mode", self.scale_mode.to_string());
        put("position_kind", self.position_kind.to_string());
        put("global_pooling", self.global_pooling.to_string());
        put("tau1", format!("{:?}", self.tau1));
        put("tau2", format!("{:?}", self.tau2));
        put("tau3", format!("{:?}", self.tau3));
        put("freeze_text_encoder", self.freeze_text_encoder.to_string());
        put("init_std", format!("{:?}", self.init_std));
    }

    /// Overrides fields from `prefix`-qualified keys present in `kv`.
    pub fn apply_kv(&mut self, prefix: &str, kv: &KvMap) -> Result<()> {
        let k = |name: &str| format!("{prefix}{name}");
        kv.read_into(&k("d"), &mut self.d)?;
        kv.read_into(&k("heads"), &mut self.heads)?;
        kv.read_into(&k("depth_enc_v"), &mut self.depth_enc_v)?;
        kv.read_into(&k("depth_dec_v"), &mut self.depth_dec_v)?;
        kv.read_into(&k("depth_enc_t"), &mut self.depth_enc_t)?;
        kv.read_into(&k("depth_dec_t"), &mut self.depth_dec_t)?;
        kv.read_into(&k("mlp_ratio"), &mut self.mlp_ratio)?;
        kv.read_into(&k("patch"), &mut self.patch)?;
        kv.read_into(&k("channels"), &mut self.channels)?;
        kv.read_into(&k("height"), &mut self.height)?;
        kv.read_into(&k("width"), &mut self.width)?;
        kv.read_into(&k("report_len"), &mut self.report_len)?;
        kv.read_into(&k("vocab_size"), &mut self.vocab_size)?;
        kv.read_into(&k("memory_slots"), &mut self.memory_slots)?;
        kv.read_into(&k("fusion_kind"), &mut self.fusion_kind)?;
        kv.read_into(&k("fusion_source"), &mut self.fusion_source)?;
        kv.read_into(&k("scale_mode"), &mut self.scale_mode)?;
        kv.read_into(&k("position_kind"), &mut self.position_kind)?;
        kv.read_into(&k("global_pooling"), &mut self.global_pooling)?;
        kv.read_into(&k("tau1"), &mut self.tau1)?;
        kv.read_into(&k("tau2"), &mut self.tau2)?;
        kv.read_into(&k("tau3"), &mut self.tau3)?;
        kv.read_into(&k("freeze_text_encoder"), &mut self.freeze_text_encoder)?;
        kv.read_into(&k("init_std"), &mut self.init_std)?;
        Ok(())
    }
}

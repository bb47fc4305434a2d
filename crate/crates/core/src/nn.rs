//! Transformer building blocks: multi-head (cross-)attention with optional
//! memory rows, pre-norm blocks, position tables.
//!
//! Parameter containers are generic over the leaf type `P`: `Tensor<T>` when
//! stored, [`Var`] once bound onto a tape for one forward pass.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Denominator used for attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `sqrt(d / h)`, the per-head width.
    PerHead,
    /// `sqrt(d)`, the model width.
    LiteralD,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionKind {
    Learned,
    Sinusoidal,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub scale: ScaleMode,
}

impl AttentionSpec {
    fn denominator(&self, d: usize) -> f64 {
        match self.scale {
            ScaleMode::PerHead => ((d / self.heads) as f64).sqrt(),
            ScaleMode::LiteralD => (d as f64).sqrt(),
        }
    }
}

/// Per-head projections are the column blocks of `wq`, `wk`, `wv` (each
/// `d × d`, head `i` owns columns `i·d/h .. (i+1)·d/h`); `wo` is the `d × d`
/// output projection applied to the concatenated heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<P> {
    pub gain: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    pub ln1: LayerNormParams<P>,
    pub attn: AttentionParams<P>,
    pub ln2: LayerNormParams<P>,
    pub mlp: MlpParams<P>,
}

impl<P> AttentionParams<P> {
    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        out.push((format!("{prefix}.wq"), &self.wq));
        out.push((format!("{prefix}.wk"), &self.wk));
        out.push((format!("{prefix}.wv"), &self.wv));
        out.push((format!("{prefix}.wo"), &self.wo));
    }

    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> AttentionParams<Q> {
        AttentionParams {
            wq: f(&format!("{prefix}.wq"), &self.wq),
            wk: f(&format!("{prefix}.wk"), &self.wk),
            wv: f(&format!("{prefix}.wv"), &self.wv),
            wo: f(&format!("{prefix}.wo"), &self.wo),
        }
    }
}

impl<P> LayerNormParams<P> {
    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        out.push((format!("{prefix}.gain"), &self.gain));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> LayerNormParams<Q> {
        LayerNormParams {
            gain: f(&format!("{prefix}.gain"), &self.gain),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }
}

impl<P> MlpParams<P> {
    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.b1"), &self.b1));
        out.push((format!("{prefix}.w2"), &self.w2));
        out.push((format!("{prefix}.b2"), &self.b2));
    }

    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> MlpParams<Q> {
        MlpParams {
            w1: f(&format!("{prefix}.w1"), &self.w1),
            b1: f(&format!("{prefix}.b1"), &self.b1),
            w2: f(&format!("{prefix}.w2"), &self.w2),
            b2: f(&format!("{prefix}.b2"), &self.b2),
        }
    }
}

impl<P> BlockParams<P> {
    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        self.mlp.collect(&format!("{prefix}.mlp"), out);
    }

    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> BlockParams<Q> {
        BlockParams {
            ln1: self.ln1.map(&format!("{prefix}.ln1"), f),
            attn: self.attn.map(&format!("{prefix}.attn"), f),
            ln2: self.ln2.map(&format!("{prefix}.ln2"), f),
            mlp: self.mlp.map(&format!("{prefix}.mlp"), f),
        }
    }
}

/// I.i.d. normal entries with standard deviation `std`.
pub fn init_normal<T: Real>(shape: &[usize], std: f64, rng: &mut SeededRng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.normal() * std)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

impl<T: Real> AttentionParams<Tensor<T>> {
    pub fn init(d: usize, rng: &mut SeededRng) -> Self {
        AttentionParams {
            wq: init_normal(&[d, d], INIT_STD, rng),
            wk: init_normal(&[d, d], INIT_STD, rng),
            wv: init_normal(&[d, d], INIT_STD, rng),
            wo: init_normal(&[d, d], INIT_STD, rng),
        }
    }

    pub fn identity(d: usize) -> Self {
        AttentionParams {
            wq: Tensor::eye(d),
            wk: Tensor::eye(d),
            wv: Tensor::eye(d),
            wo: Tensor::eye(d),
        }
    }
}

impl<T: Real> LayerNormParams<Tensor<T>> {
    pub fn init(d: usize) -> Self {
        LayerNormParams {
            gain: Tensor::ones(&[d]),
            bias: Tensor::zeros(&[d]),
        }
    }
}

impl<T: Real> BlockParams<Tensor<T>> {
    pub fn init(d: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        BlockParams {
            ln1: LayerNormParams::init(d),
            attn: AttentionParams::init(d, rng),
            ln2: LayerNormParams::init(d),
            mlp: MlpParams {
                w1: init_normal(&[d, hidden], INIT_STD, rng),
                b1: Tensor::zeros(&[hidden]),
                w2: init_normal(&[hidden, d], INIT_STD, rng),
                b2: Tensor::zeros(&[d]),
            },
        }
    }
}

/// Binds every leaf of a stored parameter tree onto `tape`.
pub fn bind<T: Real>(tape: &Tape<T>, t: &Tensor<T>, trainable: bool) -> Var {
    if trainable {
        tape.leaf(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

/// `x · w (+ b)` with `w` stored `[in, out]`.
pub fn linear<T: Real>(tape: &Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

fn check_width<T: Real>(tape: &Tape<T>, op: &'static str, x: Var, d: usize) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != d {
        return Err(Error::shape(op, &s, &[s.first().copied().unwrap_or(0), d]));
    }
    Ok(())
}

/// Multi-head cross-attention. Returns the output and, per head, the
/// `L_q × L_k` attention weights.
pub fn mca_with_weights<T: Real>(
    tape: &Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    p: &AttentionParams<Var>,
    spec: AttentionSpec,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.shape(p.wq)[0];
    if spec.heads == 0 || !d.is_multiple_of(spec.heads) {
        return Err(Error::invalid("mca", format!("width {d} not divisible by {} heads", spec.heads)));
    }
    check_width(tape, "mca", q, d)?;
    check_width(tape, "mca", k, d)?;
    check_width(tape, "mca", v, d)?;
    if tape.shape(k)[0] != tape.shape(v)[0] {
        return Err(Error::shape("mca", &tape.shape(k), &tape.shape(v)));
    }
    let qp = tape.matmul(q, p.wq)?;
    let kp = tape.matmul(k, p.wk)?;
    let vp = tape.matmul(v, p.wv)?;
    let dh = d / spec.heads;
    let inv = T::of(1.0 / spec.denominator(d));
    let mut heads = Vec::with_capacity(spec.heads);
    let mut weights = Vec::with_capacity(spec.heads);
    for i in 0..spec.heads {
        let (qh, kh, vh) = if spec.heads == 1 {
            (qp, kp, vp)
        } else {
            (
                tape.slice_cols(qp, i * dh, dh)?,
                tape.slice_cols(kp, i * dh, dh)?,
                tape.slice_cols(vp, i * dh, dh)?,
            )
        };
        let logits = tape.scale(tape.matmul_nt(qh, kh)?, inv);
        let w = tape.softmax(logits, 1)?;
        heads.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(&heads, 1)?
    };
    Ok((tape.matmul(cat, p.wo)?, weights))
}

pub fn mca<T: Real>(
    tape: &Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    p: &AttentionParams<Var>,
    spec: AttentionSpec,
) -> Result<Var> {
    Ok(mca_with_weights(tape, q, k, v, p, spec)?.0)
}

/// `mca(q, [kv; mem], [kv; mem])`; with no memory rows this is exactly
/// `mca(q, kv, kv)`.
pub fn mca_with_memory<T: Real>(
    tape: &Tape<T>,
    q: Var,
    kv: Var,
    mem: Option<Var>,
    p: &AttentionParams<Var>,
    spec: AttentionSpec,
) -> Result<Var> {
    match mem {
        None => mca(tape, q, kv, kv, p, spec),
        Some(m) => {
            let d = tape.shape(kv)[1];
            check_width(tape, "mca_with_memory", m, d)?;
            let kvm = tape.concat(&[kv, m], 0)?;
            mca(tape, q, kvm, kvm, p, spec)
        }
    }
}

pub fn layer_norm<T: Real>(tape: &Tape<T>, x: Var, p: &LayerNormParams<Var>) -> Result<Var> {
    tape.layer_norm(x, p.gain, p.bias, LN_EPS)
}

/// Pre-norm residual block: `x + MSA(LN(x))`, then `+ MLP(LN(·))`.
pub fn transformer_block<T: Real>(
    tape: &Tape<T>,
    x: Var,
    p: &BlockParams<Var>,
    spec: AttentionSpec,
) -> Result<Var> {
    let d = tape.shape(p.attn.wq)[0];
    check_width(tape, "transformer_block", x, d)?;
    let h = layer_norm(tape, x, &p.ln1)?;
    let a = mca(tape, h, h, h, &p.attn, spec)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, x, &p.ln2)?;
    let h = tape.gelu(linear(tape, h, p.mlp.w1, Some(p.mlp.b1))?);
    let m = linear(tape, h, p.mlp.w2, Some(p.mlp.b2))?;
    tape.add(x, m)
}

pub fn run_blocks<T: Real>(
    tape: &Tape<T>,
    mut x: Var,
    blocks: &[BlockParams<Var>],
    spec: AttentionSpec,
) -> Result<Var> {
    for b in blocks {
        x = transformer_block(tape, x, b, spec)?;
    }
    Ok(x)
}

/// `L × d` position table. `Learned` draws a fresh trainable table from `rng`;
/// `Sinusoidal` is deterministic (`sin` on even columns, `cos` on odd).
pub fn positional_embedding<T: Real>(
    len: usize,
    d: usize,
    kind: PositionKind,
    rng: &mut SeededRng,
) -> Result<Tensor<T>> {
    if len == 0 || d == 0 {
        return Err(Error::invalid("positional_embedding", "length and width must be positive"));
    }
    Ok(match kind {
        PositionKind::Learned => init_normal(&[len, d], INIT_STD, rng),
        PositionKind::Sinusoidal => {
            let mut data = Vec::with_capacity(len * d);
            for pos in 0..len {
                for c in 0..d {
                    let pair = (c / 2) as f64;
                    let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
                    data.push(T::of(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
                }
            }
            Tensor::from_parts(vec![len, d], data)
        }
    })
}

//! Pre-training objectives: masked-patch MSE, masked-token cross-entropy,
//! global and local symmetric contrastive losses, their weighted sum, and the
//! Gaussian warmup of the alignment weight.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;

fn check_temperature(op: &'static str, tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(op, format!("temperature must be positive, got {tau}")))
    }
}

/// Mean squared error over every entry of the masked patches.
pub fn loss_mim<T: Real>(tape: &Tape<T>, recon: Var, truth: Var) -> Result<Var> {
    let (rs, ts) = (tape.shape(recon), tape.shape(truth));
    if rs != ts {
        return Err(Error::shape("loss_mim", &rs, &ts));
    }
    let diff = tape.sub(recon, truth)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Mean over masked positions of `−log softmax(logits)[target]`.
pub fn loss_mlm<T: Real>(tape: &Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::invalid("loss_mlm", "no masked positions"));
    }
    let s = tape.shape(logits);
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::shape("loss_mlm", &s, &[targets.len()]));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= s[1]) {
        return Err(Error::invalid("loss_mlm", format!("target id {bad} outside vocabulary of {}", s[1])));
    }
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.pick_per_row(logp, targets)?;
    Ok(tape.scale(tape.mean(picked), -T::one()))
}

/// `−(1/N) Σ_i [log softmax_j(S_ji)_i + log softmax_j(S_ij)_i]` for an
/// `N × N` score matrix `S` with images on rows and texts on columns.
fn symmetric_infonce<T: Real>(tape: &Tape<T>, scores: Var) -> Result<Var> {
    let n = tape.shape(scores)[0];
    let diag: Vec<usize> = (0..n).collect();
    // Text i against every image j: column i.
    let by_col = tape.log_softmax(scores, 0)?;
    let by_col = tape.transpose(by_col)?;
    let t2i = tape.pick_per_row(by_col, &diag)?;
    // Image i against every text j: row i.
    let by_row = tape.log_softmax(scores, 1)?;
    let i2t = tape.pick_per_row(by_row, &diag)?;
    let both = tape.add(t2i, i2t)?;
    Ok(tape.scale(tape.sum(both), T::of(-1.0 / n as f64)))
}

/// Symmetric global contrastive loss over paired rows of `v_m` and `t_m`.
pub fn loss_global<T: Real>(tape: &Tape<T>, v_m: Var, t_m: Var, tau1: f64) -> Result<Var> {
    check_temperature("loss_global", tau1)?;
    let (vs, ts) = (tape.shape(v_m), tape.shape(t_m));
    if vs.len() != 2 || vs != ts {
        return Err(Error::shape("loss_global", &vs, &ts));
    }
    let scores = tape.scale(tape.matmul_nt(v_m, t_m)?, T::of(1.0 / tau1));
    symmetric_infonce(tape, scores)
}

/// Word-conditioned visual aggregation.
///
/// `s = v · t_mᵀ`, `α = softmax over image tokens of s/τ2` (each column sums
/// to one), `g_j = Σ_i α_ij v_i`. Returns `(g, α)`.
pub fn local_aggregation<T: Real>(tape: &Tape<T>, v: Var, t_m: Var, tau2: f64) -> Result<(Var, Var)> {
    check_temperature("local_similarity", tau2)?;
    let (vs, ts) = (tape.shape(v), tape.shape(t_m));
    if vs.len() != 2 || ts.len() != 2 || vs[1] != ts[1] {
        return Err(Error::shape("local_similarity", &vs, &ts));
    }
    let s = tape.matmul_nt(v, t_m)?;
    let alpha = tape.softmax(tape.scale(s, T::of(1.0 / tau2)), 0)?;
    let alpha_t = tape.transpose(alpha)?;
    let g = tape.matmul(alpha_t, v)?;
    Ok((g, alpha))
}

/// `H = log Σ_j exp(g_j · t_j)`, a scalar.
pub fn local_similarity_h<T: Real>(tape: &Tape<T>, v: Var, t_m: Var, tau2: f64) -> Result<Var> {
    let (g, _) = local_aggregation(tape, v, t_m, tau2)?;
    let dots = tape.sum_axis(tape.mul(g, t_m)?, 1)?;
    tape.logsumexp(dots, 0)
}

/// Symmetric local contrastive loss. Entry `(a, b)` of the score matrix is
/// `H` with sample `a`'s image tokens aggregated against sample `b`'s words.
pub fn loss_local<T: Real>(tape: &Tape<T>, vs: &[Var], t_ms: &[Var], tau2: f64, tau3: f64) -> Result<Var> {
    check_temperature("loss_local", tau2)?;
    check_temperature("loss_local", tau3)?;
    let n = vs.len();
    if n == 0 || t_ms.len() != n {
        return Err(Error::invalid("loss_local", format!("{n} images vs {} reports", t_ms.len())));
    }
    let mut entries = Vec::with_capacity(n * n);
    for &v in vs {
        for &t in t_ms {
            entries.push(local_similarity_h(tape, v, t, tau2)?);
        }
    }
    let h = tape.reshape(tape.concat(&entries, 0)?, &[n, n])?;
    let scores = tape.scale(h, T::of(1.0 / tau3));
    symmetric_infonce(tape, scores)
}

/// `exp(−5 (1 − t/T)²)` for `t < T`, then `1`.
pub fn warmup_lambda(epoch: usize, warmup_epochs: usize) -> Result<f64> {
    if warmup_epochs == 0 {
        return Err(Error::invalid("warmup_lambda", "warmup length must be at least one epoch"));
    }
    if epoch >= warmup_epochs {
        return Ok(1.0);
    }
    let r = 1.0 - epoch as f64 / warmup_epochs as f64;
    Ok((-5.0 * r * r).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_il: f64,
    pub lambda_gl: f64,
    pub lambda_gla: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mim: f64,
    pub l_mlm: f64,
    pub l_g: f64,
    pub l_l: f64,
    pub l_all: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSchedule {
    pub step: usize,
    pub epoch: usize,
    pub warmup_epochs: usize,
    pub lambda_il: f64,
    pub lambda_gl: f64,
}

impl TrainSchedule {
    pub fn lambda_gla(&self) -> Result<f64> {
        warmup_lambda(self.epoch, self.warmup_epochs)
    }

    pub fn weights(&self) -> Result<LossWeights> {
        Ok(LossWeights {
            lambda_il: self.lambda_il,
            lambda_gl: self.lambda_gl,
            lambda_gla: self.lambda_gla()?,
        })
    }
}

/// `l_mim + λ_IL·l_mlm + λ_GLA·(l_g + λ_gl·l_l)`.
pub fn combine(l_mim: f64, l_mlm: f64, l_g: f64, l_l: f64, w: &LossWeights) -> f64 {
    l_mim + w.lambda_il * l_mlm + w.lambda_gla * (l_g + w.lambda_gl * l_l)
}

pub fn loss_all(l_mim: f64, l_mlm: f64, l_g: f64, l_l: f64, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("l_mim", l_mim), ("l_mlm", l_mlm), ("l_g", l_g), ("l_l", l_l)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(LossBreakdown {
        l_mim,
        l_mlm,
        l_g,
        l_l,
        l_all: combine(l_mim, l_mlm, l_g, l_l, w),
    })
}

/// The same weighted sum built on the tape, for backpropagation.
pub fn loss_all_var<T: Real>(
    tape: &Tape<T>,
    l_mim: Var,
    l_mlm: Var,
    l_g: Var,
    l_l: Var,
    w: &LossWeights,
) -> Result<Var> {
    let align = tape.add(l_g, tape.scale(l_l, T::of(w.lambda_gl)))?;
    let recon = tape.add(l_mim, tape.scale(l_mlm, T::of(w.lambda_il)))?;
    tape.add(recon, tape.scale(align, T::of(w.lambda_gla)))
}

//! Patchify, mask plans, and the paired image/report masking inputs.
//!
//! Images drop their masked patches before encoding; reports keep their
//! length and carry `[MASK]` at masked positions.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;

/// A partition of `0..total` into masked and visible index sets.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub total: usize,
    /// Sorted ascending.
    pub masked: Vec<usize>,
    /// Sorted ascending.
    pub visible: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

/// Number of masked items: `round(ratio · total)` clamped to `[1, total − 1]`.
pub fn mask_count(total: usize, ratio: f64) -> usize {
    let n = (ratio * total as f64).round() as usize;
    n.clamp(1, total - 1)
}

/// Uniform sample without replacement of [`mask_count`] indices, drawn as the
/// first entries of a seeded Fisher–Yates shuffle.
pub fn make_mask_plan(total: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if total < 2 {
        return Err(Error::invalid("make_mask_plan", format!("need at least 2 items, got {total}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("make_mask_plan", format!("ratio {ratio} outside (0, 1)")));
    }
    let count = mask_count(total, ratio);
    let mut rng = SeededRng::new(seed);
    let mut pool: Vec<usize> = (0..total).collect();
    for i in 0..count {
        let j = i + rng.below((total - i) as u64) as usize;
        pool.swap(i, j);
    }
    let mut masked = pool[..count].to_vec();
    let mut visible = pool[count..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan {
        total,
        masked,
        visible,
        ratio,
        seed,
    })
}

/// Seed for batch item `item` under a step-level `base` seed.
pub fn item_seed(base: u64, item: usize) -> u64 {
    derive_seed(base, &[item as u64])
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// `N_p × P²C`; row `i` is block `i` in row-major grid order, flattened
    /// as `(row, col, channel)` within the block.
    pub patches: Tensor<T>,
}

impl<T: Real> PatchGrid<T> {
    pub fn num_patches(&self) -> usize {
        self.patches.rows()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

pub fn patchify<T: Real>(image: &Tensor<T>, patch: usize) -> Result<PatchGrid<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::invalid("patchify", format!("expected C×H×W, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(
            "patchify",
            format!("{h}×{w} image is not divisible into {patch}×{patch} patches"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let src = image.data();
    let mut data = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..c {
                        let (y, x) = (gy * patch + py, gx * patch + px);
                        data.push(src[ch * h * w + y * w + x]);
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        channels: c,
        height: h,
        width: w,
        patch,
        patches: Tensor::from_parts(vec![gh * gw, dim], data),
    })
}

/// Inverse of [`patchify`]: rebuilds the `C × H × W` image from patch rows.
pub fn unpatchify<T: Real>(
    patches: &Tensor<T>,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Tensor<T>> {
    let (gh, gw) = (height / patch, width / patch);
    let dim = patch * patch * channels;
    if patches.shape() != [gh * gw, dim] || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::shape("unpatchify", patches.shape(), &[gh * gw, dim]));
    }
    let mut out = vec![T::zero(); channels * height * width];
    let src = patches.data();
    let mut k = 0;
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..channels {
                        let (y, x) = (gy * patch + py, gx * patch + px);
                        out[ch * height * width + y * width + x] = src[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![channels, height, width], out))
}

fn gather<T: Real>(t: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let w = t.width();
    let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
    Tensor::from_parts(vec![rows.len(), w], data)
}

/// Splits patch rows into `(visible, ground_truth)`, both in ascending
/// original index order.
pub fn apply_image_mask<T: Real>(grid: &PatchGrid<T>, plan: &MaskPlan) -> Result<(Tensor<T>, Tensor<T>)> {
    if plan.total != grid.num_patches() {
        return Err(Error::invalid(
            "apply_image_mask",
            format!("plan covers {} patches, grid has {}", plan.total, grid.num_patches()),
        ));
    }
    Ok((gather(&grid.patches, &plan.visible), gather(&grid.patches, &plan.masked)))
}

/// Scatters `(visible, masked)` rows back to their original slots.
pub fn merge_patches<T: Real>(visible: &Tensor<T>, masked: &Tensor<T>, plan: &MaskPlan) -> Result<Tensor<T>> {
    if visible.rows() != plan.visible.len() || masked.rows() != plan.masked.len() || visible.width() != masked.width() {
        return Err(Error::shape("merge_patches", visible.shape(), masked.shape()));
    }
    let w = visible.width();
    let mut out = vec![T::zero(); plan.total * w];
    for (r, &i) in plan.visible.iter().enumerate() {
        out[i * w..(i + 1) * w].copy_from_slice(visible.row(r));
    }
    for (r, &i) in plan.masked.iter().enumerate() {
        out[i * w..(i + 1) * w].copy_from_slice(masked.row(r));
    }
    Ok(Tensor::from_parts(vec![plan.total, w], out))
}

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const UNK_ID: usize = 3;

/// A report as a fixed-length id sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedReport {
    pub ids: Vec<usize>,
    /// `false` at padding positions.
    pub valid: Vec<bool>,
    pub vocab_size: usize,
}

impl TokenizedReport {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions eligible for masking: never padding, `[CLS]` only on request.
    pub fn maskable_positions(&self, include_cls: bool) -> Vec<usize> {
        self.ids
            .iter()
            .zip(&self.valid)
            .enumerate()
            .filter(|&(_, (&id, &ok))| ok && (include_cls || id != CLS_ID))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedReport {
    /// Same length as the source report; `[MASK]` at masked positions.
    pub input_ids: Vec<usize>,
    /// Absolute positions that were masked, ascending.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<usize>,
}

/// Replaces the positions selected by `plan` with `[MASK]`. Plan index `k`
/// refers to the `k`-th maskable position.
pub fn apply_report_mask(rep: &TokenizedReport, plan: &MaskPlan, include_cls: bool) -> Result<MaskedReport> {
    let pool = rep.maskable_positions(include_cls);
    if plan.total != pool.len() {
        return Err(Error::invalid(
            "apply_report_mask",
            format!(
                "plan covers {} positions but the report has {} maskable (non-pad) positions",
                plan.total,
                pool.len()
            ),
        ));
    }
    let mut input_ids = rep.ids.clone();
    let positions: Vec<usize> = plan.masked.iter().map(|&k| pool[k]).collect();
    let targets = positions.iter().map(|&p| rep.ids[p]).collect();
    for &p in &positions {
        input_ids[p] = MASK_ID;
    }
    Ok(MaskedReport {
        input_ids,
        positions,
        targets,
    })
}

/// Writes `targets` back into the masked slots.
pub fn unmask_report(masked: &MaskedReport) -> Vec<usize> {
    let mut ids = masked.input_ids.clone();
    for (&p, &t) in masked.positions.iter().zip(&masked.targets) {
        ids[p] = t;
    }
    ids
}

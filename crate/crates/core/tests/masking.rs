//! Mask plans, patch grids and report masking.

use mpma::masking::{
    apply_image_mask, apply_report_mask, make_mask_plan, mask_count, merge_patches, patchify, unmask_report,
    unpatchify, MaskPlan, TokenizedReport, CLS_ID, MASK_ID, PAD_ID,
};
use mpma::rng::SeededRng;
use mpma::Tensor;
use proptest::prelude::*;

fn assert_partition(plan: &MaskPlan) {
    let mut seen = vec![0u8; plan.total];
    for &i in plan.masked.iter().chain(&plan.visible) {
        seen[i] += 1;
    }
    assert!(seen.iter().all(|&c| c == 1), "not a partition: {plan:?}");
    assert!(plan.masked.windows(2).all(|w| w[0] < w[1]));
    assert!(plan.visible.windows(2).all(|w| w[0] < w[1]));
}

fn expected_count(total: usize, ratio: f64) -> usize {
    ((ratio * total as f64).round() as usize).clamp(1, total - 1)
}

fn report(ids: &[usize], len: usize, vocab_size: usize) -> TokenizedReport {
    let mut padded = ids.to_vec();
    padded.resize(len, PAD_ID);
    TokenizedReport {
        valid: (0..len).map(|i| i < ids.len()).collect(),
        ids: padded,
        vocab_size,
    }
}

#[test]
fn every_small_total_is_partitioned_with_the_exact_count() {
    for total in 2..=64 {
        for seed in 0..10 {
            for ratio in [0.01, 0.25, 0.5, 0.75, 0.99] {
                let plan = make_mask_plan(total, ratio, seed).unwrap();
                assert_partition(&plan);
                assert_eq!(plan.masked.len(), expected_count(total, ratio), "total {total} ratio {ratio}");
                assert_eq!(mask_count(total, ratio), plan.masked.len());
            }
        }
    }
}

#[test]
fn full_scale_counts() {
    let plan = make_mask_plan(196, 0.75, 0).unwrap();
    assert_eq!((plan.masked.len(), plan.visible.len()), (147, 49));
    assert_eq!(make_mask_plan(20, 0.5, 0).unwrap().masked.len(), 10);
    let plan = make_mask_plan(2, 0.99, 0).unwrap();
    assert_eq!((plan.masked.len(), plan.visible.len()), (1, 1));
}

#[test]
fn invalid_plans_are_rejected() {
    assert!(make_mask_plan(0, 0.5, 0).is_err());
    assert!(make_mask_plan(1, 0.5, 0).is_err());
    assert!(make_mask_plan(8, 0.0, 0).is_err());
    assert!(make_mask_plan(8, 1.0, 0).is_err());
    assert!(make_mask_plan(8, f64::NAN, 0).is_err());
}

#[test]
fn equal_inputs_give_equal_plans() {
    let a = make_mask_plan(196, 0.75, 42).unwrap();
    let b = make_mask_plan(196, 0.75, 42).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.masked, make_mask_plan(196, 0.75, 43).unwrap().masked);
}

#[test]
fn fixed_seed_regression() {
    let a = make_mask_plan(196, 0.75, 1).unwrap();
    let b = make_mask_plan(196, 0.75, 2).unwrap();
    assert_eq!(&a.visible[..8], &[6, 11, 15, 22, 23, 26, 31, 33]);
    assert_eq!(&b.visible[..8], &[6, 19, 21, 23, 24, 26, 30, 45]);
    assert_eq!(make_mask_plan(10, 0.5, 7).unwrap().masked, vec![0, 1, 2, 7, 8]);
}

#[test]
fn masking_fraction_is_exact_not_bernoulli() {
    for total in [4, 16, 49, 196] {
        let masked: usize = (0..1000).map(|s| make_mask_plan(total, 0.75, s).unwrap().masked.len()).sum();
        let want = expected_count(total, 0.75) as f64 / total as f64;
        assert_eq!(masked as f64 / (1000 * total) as f64, want);
    }
}

#[test]
fn masked_indices_are_roughly_uniform() {
    let total = 16;
    let mut hits = [0usize; 16];
    for s in 0..4000 {
        for i in make_mask_plan(total, 0.5, s).unwrap().masked {
            hits[i] += 1;
        }
    }
    // each index is masked with probability 1/2
    for h in hits {
        assert!((h as f64 / 4000.0 - 0.5).abs() < 0.04, "{hits:?}");
    }
}

#[test]
fn patch_counts_and_layout() {
    assert_eq!(patchify(&Tensor::<f32>::zeros(&[3, 224, 224]), 16).unwrap().num_patches(), 196);
    let img = Tensor::<f64>::new(vec![1, 16, 16], (0..256).map(|i| i as f64).collect()).unwrap();
    let grid = patchify(&img, 4).unwrap();
    assert_eq!(grid.patches.shape(), &[16, 16]);
    // second patch: columns 4..8 of rows 0..4
    assert_eq!(&grid.patches.row(1)[..5], &[4.0, 5.0, 6.0, 7.0, 20.0]);
    assert!(patchify(&Tensor::<f64>::zeros(&[1, 12, 16]), 8).is_err());
    assert!(patchify(&Tensor::<f64>::zeros(&[16, 16]), 4).is_err());
}

#[test]
fn constant_image_gives_identical_rows() {
    let grid = patchify(&Tensor::<f64>::full(&[2, 8, 8], 0.3), 4).unwrap();
    for r in 1..grid.num_patches() {
        assert_eq!(grid.patches.row(r), grid.patches.row(0));
    }
}

#[test]
fn image_mask_splits_and_merges_back() {
    let mut rng = SeededRng::new(1);
    let img = Tensor::<f64>::new(vec![2, 8, 8], (0..128).map(|_| rng.uniform()).collect()).unwrap();
    let grid = patchify(&img, 2).unwrap();
    let plan = make_mask_plan(16, 0.75, 5).unwrap();
    let (visible, truth) = apply_image_mask(&grid, &plan).unwrap();
    assert_eq!(visible.shape(), &[4, 8]);
    assert_eq!(truth.shape(), &[12, 8]);
    for (r, &i) in plan.masked.iter().enumerate() {
        assert_eq!(truth.row(r), grid.patches.row(i));
    }
    assert_eq!(merge_patches(&visible, &truth, &plan).unwrap(), grid.patches);
    assert!(apply_image_mask(&grid, &make_mask_plan(15, 0.75, 5).unwrap()).is_err());
}

#[test]
fn clamped_two_patch_plan_has_one_row_each_side() {
    let img = Tensor::<f64>::new(vec![1, 2, 4], (0..8).map(|i| i as f64).collect()).unwrap();
    let grid = patchify(&img, 2).unwrap();
    let plan = make_mask_plan(2, 0.01, 3).unwrap();
    let (visible, truth) = apply_image_mask(&grid, &plan).unwrap();
    assert_eq!((visible.rows(), truth.rows()), (1, 1));
}

#[test]
fn report_mask_replaces_only_selected_positions() {
    let rep = report(&[CLS_ID, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23], 24, 30);
    let pool = rep.maskable_positions(false);
    assert_eq!(pool.len(), 20);
    let plan = make_mask_plan(20, 0.5, 9).unwrap();
    let m = apply_report_mask(&rep, &plan, false).unwrap();
    assert_eq!(m.input_ids.iter().filter(|&&i| i == MASK_ID).count(), 10);
    assert_eq!(m.input_ids.len(), rep.ids.len());
    for (p, (&a, &b)) in m.input_ids.iter().zip(&rep.ids).enumerate() {
        if m.positions.contains(&p) {
            assert_eq!(a, MASK_ID);
        } else {
            assert_eq!(a, b);
        }
    }
    assert!(m.positions.iter().all(|&p| rep.valid[p] && p != 0));
    assert_eq!(unmask_report(&m), rep.ids);
}

#[test]
fn two_token_report_gets_exactly_one_mask() {
    let rep = report(&[CLS_ID, 5, 6], 6, 10);
    let plan = make_mask_plan(2, 0.5, 0).unwrap();
    let m = apply_report_mask(&rep, &plan, false).unwrap();
    assert_eq!(m.input_ids.iter().filter(|&&i| i == MASK_ID).count(), 1);
}

#[test]
fn cls_is_maskable_only_on_request() {
    let rep = report(&[CLS_ID, 5, 6], 6, 10);
    assert_eq!(rep.maskable_positions(false), vec![1, 2]);
    assert_eq!(rep.maskable_positions(true), vec![0, 1, 2]);
}

#[test]
fn plan_covering_padding_is_rejected() {
    let rep = report(&[CLS_ID, 5, 6], 6, 10);
    let plan = make_mask_plan(5, 0.5, 0).unwrap();
    let err = apply_report_mask(&rep, &plan, false).unwrap_err().to_string();
    assert!(err.contains("non-pad"), "{err}");
}

proptest! {
    #[test]
    fn plans_are_partitions(total in 2usize..400, ratio in 0.001f64..0.999, seed in any::<u64>()) {
        let plan = make_mask_plan(total, ratio, seed).unwrap();
        let mut seen = vec![false; total];
        for &i in plan.masked.iter().chain(&plan.visible) {
            prop_assert!(!seen[i]);
            seen[i] = true;
        }
        prop_assert!(seen.iter().all(|&s| s));
        prop_assert_eq!(plan.masked.len(), expected_count(total, ratio));
        prop_assert_eq!(&plan, &make_mask_plan(total, ratio, seed).unwrap());
    }

    #[test]
    fn patchify_round_trips(c in 1usize..4, gh in 1usize..5, gw in 1usize..5, p in 1usize..5, seed in any::<u64>()) {
        let (h, w) = (gh * p, gw * p);
        let mut rng = SeededRng::new(seed);
        let img = Tensor::<f64>::new(vec![c, h, w], (0..c * h * w).map(|_| rng.uniform()).collect()).unwrap();
        let grid = patchify(&img, p).unwrap();
        prop_assert_eq!(grid.num_patches(), gh * gw);
        prop_assert_eq!(unpatchify(&grid.patches, c, h, w, p).unwrap(), img);
    }

    #[test]
    fn report_masking_round_trips(len in 3usize..24, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let ids: Vec<usize> = std::iter::once(CLS_ID).chain((1..len).map(|_| 4 + rng.below(20) as usize)).collect();
        let rep = report(&ids, len + 3, 24);
        let plan = make_mask_plan(len - 1, 0.5, seed).unwrap();
        let m = apply_report_mask(&rep, &plan, false).unwrap();
        prop_assert_eq!(unmask_report(&m), rep.ids.clone());
        prop_assert!(m.positions.iter().all(|&p| rep.ids[p] != PAD_ID));
        prop_assert_eq!(m.targets.len(), plan.masked.len());
    }
}

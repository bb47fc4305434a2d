//! Training loop, checkpoints, metrics stream, probes and the command
//! implementations.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use mpma::checkpoint::Checkpoint;
use mpma::corpus::{build_corpus, generate_corpus, SyntheticWorld};
use mpma::harness::{
    cmd_ablate_fusion, cmd_gradcheck, cmd_reconstruct, cmd_train, diagnostic_path, gradcheck_model_config, load_model,
    prepare_batch, probe_on_features, read_image, read_metrics, recall_at_1, split, stratified_subset, GradcheckOptions, RunConfig,
    TrainState,
};
use mpma::kv::KvMap;
use mpma::masking::patchify;
use mpma::model::{Model, ModelConfig};
use mpma::objectives::{combine, warmup_lambda};
use mpma::rng::SeededRng;
use mpma::Error;

fn small_model() -> ModelConfig {
    ModelConfig {
        d: 16,
        heads: 2,
        depth_enc_v: 1,
        mlp_ratio: 2,
        memory_slots: 4,
        ..ModelConfig::default()
    }
}

/// Corpus of `n` pairs under `dir/corpus` and a run writing into `dir/run`.
fn setup(dir: &Path, n: usize, steps: usize) -> RunConfig {
    let corpus = dir.join("corpus");
    generate_corpus(&corpus, n, &SyntheticWorld::default()).unwrap();
    RunConfig {
        model: small_model(),
        batch_size: 4,
        steps,
        seed: 9,
        warmup_epochs: 2,
        lr: 1e-3,
        corpus,
        checkpoint: dir.join("run/model.ckpt"),
        metrics: dir.join("run/metrics.jsonl"),
        ..RunConfig::default()
    }
}

fn relocate(cfg: &RunConfig, dir: &Path) -> RunConfig {
    RunConfig {
        checkpoint: dir.join("model.ckpt"),
        metrics: dir.join("metrics.jsonl"),
        ..cfg.clone()
    }
}

#[test]
fn equal_seeds_give_byte_identical_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 12, 5);
    let a = relocate(&cfg, &dir.path().join("a"));
    cmd_train(&a, None).unwrap();
    let (metrics, ckpt) = (fs::read(&a.metrics).unwrap(), fs::read(&a.checkpoint).unwrap());
    cmd_train(&a, None).unwrap();
    assert_eq!(fs::read(&a.metrics).unwrap(), metrics);
    assert_eq!(fs::read(&a.checkpoint).unwrap(), ckpt);

    let c = RunConfig {
        seed: 10,
        ..relocate(&cfg, &dir.path().join("c"))
    };
    cmd_train(&c, None).unwrap();
    assert_ne!(fs::read(&a.metrics).unwrap(), fs::read(&c.metrics).unwrap());
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 12, 8);
    let full = relocate(&cfg, &dir.path().join("full"));
    cmd_train(&full, None).unwrap();

    // stop mid-epoch (three batches per epoch)
    let part = RunConfig {
        steps: 4,
        ..relocate(&cfg, &dir.path().join("part"))
    };
    cmd_train(&part, None).unwrap();
    let resumed = RunConfig {
        steps: 8,
        ..part.clone()
    };
    cmd_train(&resumed, Some(&part.checkpoint)).unwrap();

    let (x, y) = (read_metrics(&full.metrics).unwrap(), read_metrics(&resumed.metrics).unwrap());
    assert_eq!(x.len(), 8);
    assert_eq!(y.len(), 8);
    for (a, b) in x.iter().zip(&y) {
        assert_eq!((a.step, a.epoch), (b.step, b.epoch));
        for (p, q) in [(a.l_mim, b.l_mim), (a.l_mlm, b.l_mlm), (a.l_g, b.l_g), (a.l_l, b.l_l), (a.l_all, b.l_all)] {
            assert!((p - q).abs() <= 1e-6, "step {}: {p} vs {q}", a.step);
        }
    }
    let (m1, _) = load_model::<f32>(&full.checkpoint).unwrap();
    let (m2, _) = load_model::<f32>(&resumed.checkpoint).unwrap();
    assert_eq!(m1.params, m2.params);
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 8, 3);
    cmd_train(&cfg, None).unwrap();
    let bytes = fs::read(&cfg.checkpoint).unwrap();
    let ck = Checkpoint::<f32>::load(&cfg.checkpoint).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    let (state, stored) = TrainState::<f32>::from_checkpoint(&ck).unwrap();
    assert_eq!(state.step, 3);
    assert_eq!(stored, cfg);
    assert_eq!(state.to_checkpoint(&stored).to_bytes(), bytes);

    let mut bad = bytes.clone();
    bad.truncate(bytes.len() - 5);
    assert!(Checkpoint::<f32>::from_bytes(&bad, Path::new("x")).is_err());
}

#[test]
fn metrics_columns_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 8, 8);
    let out = cmd_train(&cfg, None).unwrap();
    assert_eq!(read_metrics(&cfg.metrics).unwrap(), out.records);
    for r in &out.records {
        assert_eq!(r.epoch, (r.step - 1) / 2);
        assert_eq!(r.lambda_gla, warmup_lambda(r.epoch, cfg.warmup_epochs).unwrap());
        let w = cfg.weights(r.lambda_gla);
        let want = combine(r.l_mim, r.l_mlm, r.l_g, r.l_l, &w);
        assert!((r.l_all - want).abs() <= 1e-9 * want.abs().max(1.0));
        assert!(r.l_mim >= 0.0 && r.l_mlm >= 0.0 && r.l_g >= 0.0 && r.l_l >= 0.0);
        assert_eq!(r.wall_ms, None);
    }
    let last = out.records.last().unwrap();
    assert_eq!(last.lambda_gla, 1.0);
}

#[test]
fn non_finite_loss_halts_with_a_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = setup(dir.path(), 8, 5);
    cfg.model.tau1 = 1e-300;
    let err = cmd_train(&cfg, None).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let snap = Checkpoint::<f32>::load(&diagnostic_path(&cfg.checkpoint)).unwrap();
    assert_eq!(snap.meta.get("halt.step"), Some("1"));
    assert!(snap.meta.contains("halt.reason"));
    assert!(snap.meta.get("halt.batch").unwrap().starts_with('['));
}

#[test]
fn mismatched_corpus_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = setup(dir.path(), 4, 1);
    cfg.model.height = 64;
    assert!(matches!(cmd_train(&cfg, None).unwrap_err(), Error::Config(_)));
    cfg.model.height = 32;
    cfg.model.vocab_size = 16;
    assert!(matches!(cmd_train(&cfg, None).unwrap_err(), Error::Config(_)));
}

#[test]
fn reconstruction_keeps_visible_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 6, 1);
    let corpus = build_corpus(6, &SyntheticWorld::default()).unwrap();
    let model = Model::<f32>::new(cfg.model.clone(), 0).unwrap();
    let out = dir.path().join("recon");
    let dumps = cmd_reconstruct(&model, &cfg, &corpus, 3, &out).unwrap();
    assert_eq!(dumps.len(), 3);
    let inputs = prepare_batch(&corpus.batch::<f32>(&[0, 1, 2]), &cfg, &corpus.vocab, 0).unwrap();
    let p = cfg.model.patch;
    for d in &dumps {
        let recon = read_image(&d.reconstruction).unwrap();
        let truth = read_image(&d.ground_truth).unwrap();
        let masked = read_image(&d.masked_input).unwrap();
        assert_eq!(recon.shape(), &[1, 32, 32]);
        assert_eq!(truth.data(), corpus.image(d.index));
        let plan = &inputs[d.index].image_plan;
        let (r, t, m) = (
            patchify(&recon, p).unwrap().patches,
            patchify(&truth, p).unwrap().patches,
            patchify(&masked, p).unwrap().patches,
        );
        for &i in &plan.visible {
            assert_eq!(r.row(i), t.row(i));
            assert_eq!(m.row(i), t.row(i));
        }
        for &i in &plan.masked {
            assert!(m.row(i).iter().all(|&x| x == 0.0));
        }
        assert!(d.masked_mse.is_finite() && d.masked_mse > 0.0);
        assert!(d.report.exists() && d.reconstruction.with_extension("pgm").exists());
        assert!(d.masked_report.contains("[MASK]"));
    }
    assert!(cmd_reconstruct(&model, &cfg, &corpus, 0, &out).is_err());
    assert!(cmd_reconstruct(&model, &cfg, &corpus, 7, &out).is_err());
}

#[test]
fn recall_on_oracle_embeddings() {
    let eye: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| (i == j) as u8 as f64).collect()).collect();
    assert_eq!(recall_at_1(&eye, &eye), 1.0);
    let shifted: Vec<Vec<f64>> = (0..5).map(|i| eye[(i + 1) % 5].clone()).collect();
    assert_eq!(recall_at_1(&eye, &shifted), 0.0);
    // ties go to the lowest index
    let flat = vec![vec![1.0]; 4];
    assert_eq!(recall_at_1(&flat, &flat), 0.25);
}

#[test]
fn probe_on_oracle_and_noise_features() {
    let n = 400;
    let mut rng = SeededRng::new(3);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(4) as usize).collect();
    let onehot: Vec<Vec<f64>> = labels.iter().map(|&l| (0..4).map(|c| (c == l) as u8 as f64).collect()).collect();
    assert_eq!(probe_on_features(&onehot, &labels, 1.0, 0).unwrap(), 1.0);
    assert_eq!(probe_on_features(&onehot, &labels, 0.01, 0).unwrap(), 1.0);

    let mut total = 0.0;
    for seed in 0..5 {
        let noise: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
        total += probe_on_features(&noise, &labels, 1.0, seed).unwrap();
    }
    assert!((total / 5.0 - 0.25).abs() < 0.08, "{}", total / 5.0);

    for bad in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(probe_on_features(&onehot, &labels, bad, 0).is_err());
    }
}

#[test]
fn splits_and_stratified_subsets() {
    let (train, test) = split(100, 4);
    assert_eq!((train.len(), test.len()), (80, 20));
    let mut all = [train.clone(), test].concat();
    all.sort();
    assert_eq!(all, (0..100).collect::<Vec<_>>());

    let labels: Vec<usize> = (0..100).map(|i| if i < 70 { 0 } else { 1 }).collect();
    let pool: Vec<usize> = (0..100).collect();
    let count = |s: &[usize], c| s.iter().filter(|&&i| labels[i] == c).count();
    let s = stratified_subset(&pool, &labels, 2, 0.1, 1).unwrap();
    assert_eq!((count(&s, 0), count(&s, 1)), (7, 3));
    let s = stratified_subset(&pool, &labels, 2, 0.001, 1).unwrap();
    assert_eq!((count(&s, 0), count(&s, 1)), (1, 1));
    assert_eq!(stratified_subset(&pool, &labels, 2, 1.0, 1).unwrap(), pool);
}

#[test]
fn configuration_resolution_order() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    fs::write(&file, "seed=3\nd=16\nheads=2\nlr=0.01\n").unwrap();
    let mut over = KvMap::new();
    over.insert("lr", "0.02");
    let cfg = RunConfig::resolve(Some(&file), &over).unwrap();
    assert_eq!((cfg.seed, cfg.model.d, cfg.lr), (3, 16, 0.02));
    assert_eq!(cfg.batch_size, RunConfig::default().batch_size);

    assert!(matches!(RunConfig::resolve(None, &KvMap::new()), Err(Error::Config(_))));
    let mut bad = KvMap::new();
    bad.insert("seed", 1);
    bad.insert("no_such_key", 1);
    assert!(RunConfig::resolve(None, &bad).is_err());
    let mut bad = KvMap::new();
    bad.insert("seed", 1);
    bad.insert("mask_ratio_image", 1.0);
    assert!(RunConfig::resolve(None, &bad).is_err());

    let round = {
        let mut c = RunConfig::default();
        c.apply_kv(&cfg.to_kv()).unwrap();
        c
    };
    assert_eq!(round, cfg);
}

#[test]
fn gradcheck_passes_and_detects_a_corrupted_group() {
    let cfg = gradcheck_model_config();
    let report = cmd_gradcheck(&cfg, 0, &GradcheckOptions::default()).unwrap();
    assert!(report.passed, "{:?}", report.groups.iter().filter(|g| !g.passed).collect::<Vec<_>>());
    assert!(report.groups.iter().any(|g| g.name == "fusion.mem_v"));

    let opts = GradcheckOptions {
        corrupt: Some("gla.w_t".into()),
        ..GradcheckOptions::default()
    };
    let report = cmd_gradcheck(&cfg, 0, &opts).unwrap();
    assert!(!report.passed);
    let failed: Vec<&str> = report.groups.iter().filter(|g| !g.passed).map(|g| g.name.as_str()).collect();
    assert_eq!(failed, vec!["gla.w_t"]);

    let wide = ModelConfig { d: 32, ..cfg };
    assert!(matches!(cmd_gradcheck(&wide, 0, &GradcheckOptions::default()), Err(Error::Config(_))));
}

#[test]
fn small_fusion_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        steps: 3,
        ..setup(dir.path(), 10, 3)
    };
    let corpus = Arc::new(build_corpus(10, &SyntheticWorld::default()).unwrap());
    let out = dir.path().join("ablate");
    let table = cmd_ablate_fusion(&cfg, &corpus, &out).unwrap();
    let kinds: Vec<&str> = table.rows.iter().map(|r| r.kind.as_str()).collect();
    assert_eq!(kinds, vec!["GAP", "GMP", "CMF", "MA_CMF"]);
    assert_eq!(table.control.kind, "MA_CMF_S0");
    assert_eq!(table.control.memory_slots, 0);
    assert!(table.control_matches_cmf);
    let cmf = table.rows.iter().find(|r| r.kind == "CMF").unwrap();
    assert_eq!(table.control.final_l_mlm, cmf.final_l_mlm);
    assert_eq!(table.control.eval_l_mlm, cmf.eval_l_mlm);
    assert!(out.join("ablation.json").exists());
    assert_eq!(fs::read_to_string(out.join("ablation.tsv")).unwrap().lines().count(), 6);
    assert!(table.rows.iter().all(|r| r.eval_l_mlm.is_finite()));
}

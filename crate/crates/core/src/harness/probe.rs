use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Glyph};
use crate::error::{Error, Result};
use crate::masking::patchify;
use crate::model::Model;
use crate::real::Real;
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;

/// Seeded 80/20 train/test split of `0..n`.
pub fn split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let order = SeededRng::new(derive_seed(seed, &[0x5350_4c49])).permutation(n);
    let cut = (n * 4) / 5;
    let (mut a, mut b) = (order[..cut].to_vec(), order[cut..].to_vec());
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Per class, the first `max(1, round(fraction · n_c))` items of a seeded
/// shuffle of `pool`.
pub fn stratified_subset(pool: &[usize], labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction {fraction} outside (0, 1]")));
    }
    let order = SeededRng::new(derive_seed(seed, &[0x4c41_4245])).permutation(pool.len());
    let mut out = Vec::new();
    for c in 0..classes {
        let members: Vec<usize> = order.iter().map(|&k| pool[k]).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let take = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

fn patches_of<T: Real>(corpus: &Corpus, i: usize, patch: usize) -> Result<Tensor<T>> {
    let (c, h, w) = corpus.extents();
    let img = Tensor::new(vec![c, h, w], corpus.image(i).iter().map(|&p| T::of(p as f64)).collect())?;
    Ok(patchify(&img, patch)?.patches)
}

/// Mean over patches of the full-image encoder output, one row per item.
pub fn encoder_features<T: Real>(model: &Model<T>, corpus: &Corpus, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    indices
        .iter()
        .map(|&i| {
            let v = model.image_features(&patches_of(corpus, i, model.cfg.patch)?)?;
            let n = v.rows() as f64;
            let mut mean = vec![0.0; v.width()];
            for r in 0..v.rows() {
                for (m, &x) in mean.iter_mut().zip(v.row(r)) {
                    *m += x.to_f64_lossy() / n;
                }
            }
            Ok(mean)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOptions {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            iterations: 300,
            lr: 0.5,
            l2: 1e-3,
        }
    }
}

/// Softmax-regression head fitted by full-batch gradient descent on the
/// labelled rows `train`. Features are z-scored with statistics of the
/// (unlabelled) rows `norm`. Returns accuracy on `test`.
pub fn linear_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    norm: &[usize],
    train: &[usize],
    test: &[usize],
    opts: ProbeOptions,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() || norm.is_empty() {
        return Err(Error::invalid("linear_probe", "empty train, test or normalisation set"));
    }
    let dim = features[0].len();
    let mut mean = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for &i in norm {
        for (m, x) in mean.iter_mut().zip(&features[i]) {
            *m += x / norm.len() as f64;
        }
    }
    for &i in norm {
        for k in 0..dim {
            sd[k] += (features[i][k] - mean[k]).powi(2) / norm.len() as f64;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| v.sqrt().max(1e-8)).collect();
    let z = |i: usize| -> Vec<f64> { (0..dim).map(|k| (features[i][k] - mean[k]) / sd[k]).collect() };
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| z(i)).collect();

    let mut w = vec![vec![0.0; classes]; dim];
    let mut b = vec![0.0; classes];
    let logits = |w: &[Vec<f64>], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes).map(|c| b[c] + (0..dim).map(|k| x[k] * w[k][c]).sum::<f64>()).collect()
    };
    for _ in 0..opts.iterations {
        let mut gw = vec![vec![0.0; classes]; dim];
        let mut gb = vec![0.0; classes];
        for (x, &i) in xs.iter().zip(train) {
            let l = logits(&w, &b, x);
            let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = l.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..classes {
                let g = (e[c] / s - (labels[i] == c) as u8 as f64) / xs.len() as f64;
                gb[c] += g;
                for k in 0..dim {
                    gw[k][c] += g * x[k];
                }
            }
        }
        for k in 0..dim {
            for c in 0..classes {
                w[k][c] -= opts.lr * (gw[k][c] + opts.l2 * w[k][c]);
            }
        }
        for c in 0..classes {
            b[c] -= opts.lr * gb[c];
        }
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let l = logits(&w, &b, &z(i));
            let best = (0..classes).fold(0, |a, c| if l[c] > l[a] { c } else { a });
            best == labels[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

pub fn corpus_labels(corpus: &Corpus) -> Result<Vec<usize>> {
    (0..corpus.len())
        .map(|i| {
            corpus
                .label(i)
                .ok_or_else(|| Error::Config(format!("report {i} names no glyph class")))
        })
        .collect()
}

/// Glyph classification accuracy of a linear probe on the frozen encoder.
pub fn probe_classify<T: Real>(model: &Model<T>, corpus: &Corpus, fraction: f64, seed: u64) -> Result<f64> {
    let labels = corpus_labels(corpus)?;
    let all: Vec<usize> = (0..corpus.len()).collect();
    let feats = encoder_features(model, corpus, &all)?;
    probe_on_features(&feats, &labels, fraction, seed)
}

/// [`probe_classify`] on precomputed features.
pub fn probe_on_features(feats: &[Vec<f64>], labels: &[usize], fraction: f64, seed: u64) -> Result<f64> {
    let (train, test) = split(labels.len(), seed);
    let subset = stratified_subset(&train, labels, Glyph::ALL.len(), fraction, seed)?;
    linear_probe(feats, labels, Glyph::ALL.len(), &train, &subset, &test, ProbeOptions::default())
}

/// Fraction of queries whose best-scoring candidate (dot product) is their
/// own pair. Row `i` of `queries` pairs with row `i` of `candidates`; ties go
/// to the lowest index.
pub fn recall_at_1(queries: &[Vec<f64>], candidates: &[Vec<f64>]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let hits = queries
        .iter()
        .enumerate()
        .filter(|(i, q)| {
            let mut best = (0, f64::NEG_INFINITY);
            for (j, c) in candidates.iter().enumerate() {
                let s = dot(q, c);
                if s > best.1 {
                    best = (j, s);
                }
            }
            best.0 == *i
        })
        .count();
    hits as f64 / queries.len().max(1) as f64
}

/// Report→image recall@1 over `indices` using the pooled alignment
/// embeddings.
pub fn probe_retrieve<T: Real>(model: &Model<T>, corpus: &Corpus, indices: &[usize]) -> Result<f64> {
    let mut imgs = Vec::with_capacity(indices.len());
    let mut txts = Vec::with_capacity(indices.len());
    for &i in indices {
        let ids = corpus.vocab.tokenize(&corpus.reports[i], model.cfg.report_len).ids;
        let (v, t) = model.global_embeddings(&patches_of(corpus, i, model.cfg.patch)?, &ids)?;
        imgs.push(v.iter().map(|x| x.to_f64_lossy()).collect());
        txts.push(t.iter().map(|x| x.to_f64_lossy()).collect());
    }
    Ok(recall_at_1(&txts, &imgs))
}

/// Result of `probe`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub label_fraction: Option<f64>,
    pub score: f64,
    /// Items scored (test split for classification, queries for retrieval).
    pub n: usize,
}

//! Naive loop oracles for the loss terms, shared by the objective tests and
//! the acceptance run.
#![allow(dead_code)]

use mpma::objectives::{loss_global, loss_local};
use mpma::rng::SeededRng;
use mpma::{Tape, Tensor, Var};

pub type Mat = Vec<Vec<f64>>;

pub fn random_mat(rows: usize, cols: usize, rng: &mut SeededRng) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.range(-1.5, 1.5)).collect()).collect()
}

pub fn tensor(m: &Mat) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}

pub fn scalar(f: impl FnOnce(&Tape<f64>) -> Var) -> f64 {
    let tape = Tape::new();
    let v = f(&tape);
    tape.item(v)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub fn oracle_mim(a: &Mat, b: &Mat) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for i in 0..a.len() {
        for j in 0..a[i].len() {
            s += (a[i][j] - b[i][j]) * (a[i][j] - b[i][j]);
            n += 1.0;
        }
    }
    s / n
}

pub fn oracle_mlm(logits: &Mat, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let mut z = 0.0;
        for &x in row {
            z += x.exp();
        }
        total += -(row[t].exp() / z).ln();
    }
    total / targets.len() as f64
}

/// Symmetric InfoNCE over `scores[i][j]` (image `i`, text `j`), written out
/// term by term.
pub fn oracle_infonce(scores: &Mat) -> f64 {
    let n = scores.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut over_images = 0.0;
        let mut over_texts = 0.0;
        for j in 0..n {
            over_images += scores[j][i].exp();
            over_texts += scores[i][j].exp();
        }
        total += (scores[i][i].exp() / over_images).ln();
        total += (scores[i][i].exp() / over_texts).ln();
    }
    -total / n as f64
}

pub fn oracle_global(v: &Mat, t: &Mat, tau: f64) -> f64 {
    let n = v.len();
    let mut scores = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            scores[i][j] = dot(&v[i], &t[j]) / tau;
        }
    }
    oracle_infonce(&scores)
}

pub fn oracle_h(v: &Mat, t: &Mat, tau2: f64) -> f64 {
    let (np, m) = (v.len(), t.len());
    let mut total = 0.0;
    for j in 0..m {
        let mut z = 0.0;
        for i in 0..np {
            z += (dot(&v[i], &t[j]) / tau2).exp();
        }
        let mut g = vec![0.0; v[0].len()];
        for i in 0..np {
            let alpha = (dot(&v[i], &t[j]) / tau2).exp() / z;
            for k in 0..g.len() {
                g[k] += alpha * v[i][k];
            }
        }
        total += dot(&g, &t[j]).exp();
    }
    total.ln()
}

pub fn oracle_local(vs: &[Mat], ts: &[Mat], tau2: f64, tau3: f64) -> f64 {
    let n = vs.len();
    let mut scores = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            scores[a][b] = oracle_h(&vs[a], &ts[b], tau2) / tau3;
        }
    }
    oracle_infonce(&scores)
}

pub fn production_local(vs: &[Mat], ts: &[Mat], tau2: f64, tau3: f64) -> f64 {
    scalar(|tape| {
        let v: Vec<Var> = vs.iter().map(|m| tape.constant(tensor(m))).collect();
        let t: Vec<Var> = ts.iter().map(|m| tape.constant(tensor(m))).collect();
        loss_local(tape, &v, &t, tau2, tau3).unwrap()
    })
}

pub fn production_global(v: &Mat, t: &Mat, tau: f64) -> f64 {
    scalar(|tape| {
        let (a, b) = (tape.constant(tensor(v)), tape.constant(tensor(t)));
        loss_global(tape, a, b, tau).unwrap()
    })
}

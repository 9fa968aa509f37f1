#![allow(dead_code)]

pub mod grad_suite;

use deskssl::numerics::{rng, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand::seq::index::sample;

/// Relative error with a floor on the denominator so near-zero entries are judged absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: String,
}

/// Central finite differences against the tape's gradients.
///
/// Checks up to `per_tensor` randomly chosen entries of every trainable
/// parameter (all entries when the tensor is small enough).
pub fn grad_check<F>(store: &ParamStore, loss: F, h: f64, per_tensor: usize, seed: u64) -> GradReport
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let l = loss(&mut tape, store);
    let grads = tape.backward(l, store).expect("scalar loss");
    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let v = loss(&mut t, s);
        t.value(v).item()
    };
    let mut r = rng::rng(seed);
    let mut report = GradReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: String::new(),
    };
    let mut work = store.clone();
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            sample(&mut r, n, per_tensor).into_vec()
        };
        for i in picks {
            let orig = p.value.data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work);
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work);
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).data()[i];
            let e = rel_err(analytic, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{}[{i}]: analytic {analytic:e} numeric {numeric:e}", p.name);
            }
        }
    }
    report
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = 0;
    for &k in path {
        if k != 0 && k != prev {
            out.push(k);
        }
        prev = k;
    }
    out
}

/// Sum over every frame-level path whose collapse equals `target`.
pub fn brute_force_prob(logits: &Tensor, target: &[usize]) -> f64 {
    let (t, v) = (logits.rows(), logits.cols());
    let probs: Vec<Vec<f64>> = (0..t).map(|i| softmax_row(logits.row(i))).collect();
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    for code in 0..v.pow(t as u32) {
        let mut c = code;
        let mut p = 1.0;
        for (i, slot) in path.iter_mut().enumerate() {
            *slot = c % v;
            c /= v;
            p *= probs[i][*slot];
        }
        if collapse(&path) == target {
            total += p;
        }
    }
    total
}

pub fn random_instance(r: &mut impl Rng) -> (Tensor, Vec<usize>) {
    let t = r.gen_range(1..=6);
    let v = r.gen_range(2..=4);
    let len = r.gen_range(0..=3);
    let target: Vec<usize> = (0..len).map(|_| r.gen_range(1..v)).collect();
    let data = (0..t * v).map(|_| r.gen_range(-3.0..3.0)).collect();
    (Tensor::matrix(t, v, data).unwrap(), target)
}

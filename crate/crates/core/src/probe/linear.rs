use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng;

/// Probe families, declared in tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeMethod {
    Logistic,
    BalancedLogistic,
    Lda,
}

impl ProbeMethod {
    pub const ALL: [ProbeMethod; 3] = [ProbeMethod::Logistic, ProbeMethod::BalancedLogistic, ProbeMethod::Lda];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeOptions {
    /// Full-batch gradient descent iterations for the logistic families.
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Ridge added to the standardized within-class covariance for LDA.
    pub ridge: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.5,
            l2: 1e-4,
            ridge: 1e-3,
        }
    }
}

/// Per-dimension z-scoring fitted on training vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(xs: &[Vec<f64>]) -> Result<Self> {
        let d = check_features(xs)?;
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for x in xs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        // Constant dimensions are centred but left unscaled.
        let scale = var.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

fn check_features(xs: &[Vec<f64>]) -> Result<usize> {
    let d = xs.first().map(Vec::len).ok_or_else(|| Error::contract("no probe features"))?;
    if d == 0 {
        return Err(Error::contract("probe feature dim must be at least 1"));
    }
    if xs.iter().any(|x| x.len() != d) {
        return Err(Error::shape("probe feature vectors differ in dimension"));
    }
    if xs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe features".into()));
    }
    Ok(d)
}

/// Multi-class linear classifier over standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub method: ProbeMethod,
    pub standardizer: Standardizer,
    /// One weight row per class.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let z = self.standardizer.apply(x);
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(&z).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    /// Highest-scoring class; ties go to the lower class index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let s = self.scores(x);
        let mut best = 0;
        for (c, v) in s.iter().enumerate() {
            if *v > s[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        if xs.len() != labels.len() || xs.is_empty() {
            return Err(Error::contract(format!(
                "accuracy over {} vectors and {} labels",
                xs.len(),
                labels.len()
            )));
        }
        let hits = xs.iter().zip(labels).filter(|(x, &y)| self.predict(x) == y).count();
        Ok(hits as f64 / xs.len() as f64)
    }
}

/// Fits one probe. Every class in `0..num_classes` must occur in `labels`.
pub fn train_probe(
    xs: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    method: ProbeMethod,
    opts: &ProbeOptions,
    seed: u64,
) -> Result<LinearProbe> {
    if xs.len() != labels.len() {
        return Err(Error::contract(format!("{} vectors but {} labels", xs.len(), labels.len())));
    }
    if num_classes < 2 {
        return Err(Error::contract("a probe needs at least two classes"));
    }
    let standardizer = Standardizer::fit(xs)?;
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        *counts
            .get_mut(y)
            .ok_or_else(|| Error::contract(format!("label {y} outside 0..{num_classes}")))? += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::contract(format!("class {c} absent from probe training labels")));
    }
    let zs: Vec<Vec<f64>> = xs.iter().map(|x| standardizer.apply(x)).collect();
    let (weights, bias) = match method {
        ProbeMethod::Logistic => logistic(&zs, labels, &vec![1.0; num_classes], opts, seed),
        ProbeMethod::BalancedLogistic => {
            let n = labels.len() as f64;
            let w: Vec<f64> = counts.iter().map(|&c| n / (num_classes as f64 * c as f64)).collect();
            logistic(&zs, labels, &w, opts, seed)
        }
        ProbeMethod::Lda => lda(&zs, labels, &counts, opts.ridge)?,
    };
    if weights.iter().flatten().chain(&bias).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{method:?} probe weights")));
    }
    Ok(LinearProbe {
        method,
        standardizer,
        weights,
        bias,
    })
}

/// Softmax regression by full-batch gradient descent on the class-weighted
/// mean cross-entropy plus `l2/2 · |W|²`.
fn logistic(
    zs: &[Vec<f64>],
    labels: &[usize],
    class_weight: &[f64],
    opts: &ProbeOptions,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let c = class_weight.len();
    let d = zs[0].len();
    let mut r = rng::rng(seed);
    let mut w: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..d).map(|_| r.gen_range(-0.01..0.01)).collect())
        .collect();
    let mut b = vec![0.0; c];
    let total: f64 = labels.iter().map(|&y| class_weight[y]).sum();
    let mut gw = vec![vec![0.0; d]; c];
    let mut gb = vec![0.0; c];
    let mut p = vec![0.0; c];
    for _ in 0..opts.iterations {
        gw.iter_mut().for_each(|g| g.fill(0.0));
        gb.fill(0.0);
        for (z, &y) in zs.iter().zip(labels) {
            for k in 0..c {
                p[k] = b[k] + w[k].iter().zip(z).map(|(a, v)| a * v).sum::<f64>();
            }
            let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = p.iter().map(|v| (v - m).exp()).sum();
            let sw = class_weight[y] / total;
            for k in 0..c {
                let delta = ((p[k] - m).exp() / s - if k == y { 1.0 } else { 0.0 }) * sw;
                gb[k] += delta;
                for (g, v) in gw[k].iter_mut().zip(z) {
                    *g += delta * v;
                }
            }
        }
        for k in 0..c {
            b[k] -= opts.learning_rate * gb[k];
            for (wv, g) in w[k].iter_mut().zip(&gw[k]) {
                *wv -= opts.learning_rate * (g + opts.l2 * *wv);
            }
        }
    }
    (w, b)
}

/// Gaussian discriminant with a shared (pooled within-class) covariance.
fn lda(zs: &[Vec<f64>], labels: &[usize], counts: &[usize], ridge: f64) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (n, d, c) = (zs.len(), zs[0].len(), counts.len());
    let mut means = vec![vec![0.0; d]; c];
    for (z, &y) in zs.iter().zip(labels) {
        for (m, v) in means[y].iter_mut().zip(z) {
            *m += v / counts[y] as f64;
        }
    }
    let mut scatter = DMatrix::<f64>::zeros(d, d);
    for (z, &y) in zs.iter().zip(labels) {
        let dev = DVector::from_iterator(d, z.iter().zip(&means[y]).map(|(v, m)| v - m));
        scatter += &dev * dev.transpose();
    }
    let dof = if n > c { n - c } else { n };
    let cov = scatter / dof as f64 + DMatrix::identity(d, d) * ridge;
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::NonFinite("LDA covariance is not positive definite".into()))?;
    let mut weights = Vec::with_capacity(c);
    let mut bias = Vec::with_capacity(c);
    for (mean, &count) in means.iter().zip(counts) {
        let mu = DVector::from_column_slice(mean);
        let w = chol.solve(&mu);
        bias.push(-0.5 * mu.dot(&w) + (count as f64 / n as f64).ln());
        weights.push(w.iter().copied().collect());
    }
    Ok((weights, bias))
}

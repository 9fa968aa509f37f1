//! Convolutional subsampling followed by Conformer blocks and a projection.
//!
//! Block order: half-step feed-forward, self-attention, convolution module,
//! half-step feed-forward, layer norm. Every sub-module is pre-normed and
//! residual.

use std::collections::BTreeMap;

use super::config::ConformerConfig;
use super::layers::{init, sinusoid_table, Fwd};
use crate::audio::{Spectrogram, NUM_MEL};
use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::{ParamStore, Tape, Tensor, Var};

pub const PREFIX: &str = "encoder.";

/// Frequency bins left after two stride-2 stages over 80 mel channels.
pub const SUBSAMPLED_FREQ: usize = 20;

fn block(i: usize) -> String {
    format!("encoder.block{i}")
}

/// Adds every encoder parameter to `store`.
pub fn init_params(cfg: &ConformerConfig, store: &mut ParamStore, r: &mut Rng) -> Result<()> {
    cfg.validate()?;
    let (d, c, k) = (cfg.model_dim, cfg.subsample_channels, cfg.conv_kernel_size);
    let conv_std1 = (2.0 / 9.0f64).sqrt();
    let conv_std2 = (2.0 / (9 * c) as f64).sqrt();
    store.insert("encoder.subsample.conv1.w", Tensor::randn(&[c, 1, 3, 3], conv_std1, r))?;
    store.insert("encoder.subsample.conv1.b", Tensor::zeros(&[c]))?;
    store.insert("encoder.subsample.conv2.w", Tensor::randn(&[c, c, 3, 3], conv_std2, r))?;
    store.insert("encoder.subsample.conv2.b", Tensor::zeros(&[c]))?;
    init::linear(store, "encoder.subsample.proj", c * SUBSAMPLED_FREQ, d, r)?;

    let hidden = d * cfg.ff_expansion;
    for i in 0..cfg.num_layers {
        let b = block(i);
        for ff in ["ff1", "ff2"] {
            init::layer_norm(store, &format!("{b}.{ff}.ln"), d)?;
            init::linear(store, &format!("{b}.{ff}.in"), d, hidden, r)?;
            init::linear(store, &format!("{b}.{ff}.out"), hidden, d, r)?;
        }
        init::layer_norm(store, &format!("{b}.mhsa.ln"), d)?;
        for proj in ["q", "k", "v", "o"] {
            init::linear(store, &format!("{b}.mhsa.{proj}"), d, d, r)?;
        }
        if cfg.relative_attention {
            let bound = (3.0 / d as f64).sqrt();
            store.insert(format!("{b}.mhsa.pos.w"), Tensor::uniform(&[d, d], bound, r))?;
            store.insert(format!("{b}.mhsa.content_bias"), Tensor::zeros(&[d]))?;
            store.insert(format!("{b}.mhsa.pos_bias"), Tensor::zeros(&[d]))?;
        }
        init::layer_norm(store, &format!("{b}.conv.ln"), d)?;
        init::linear(store, &format!("{b}.conv.pw_in"), d, 2 * d, r)?;
        let dw_bound = (3.0 / k as f64).sqrt();
        store.insert(format!("{b}.conv.dw.w"), Tensor::uniform(&[d, k], dw_bound, r))?;
        store.insert(format!("{b}.conv.dw.b"), Tensor::zeros(&[d]))?;
        init::layer_norm(store, &format!("{b}.conv.norm"), d)?;
        init::linear(store, &format!("{b}.conv.pw_out"), d, d, r)?;
        init::layer_norm(store, &format!("{b}.ln_out"), d)?;
    }
    init::linear(store, "encoder.proj", d, d, r)?;
    Ok(())
}

/// Checks that `store` holds encoder parameters shaped for `cfg`.
pub fn check_params(cfg: &ConformerConfig, store: &ParamStore) -> Result<()> {
    let mut reference = ParamStore::new();
    init_params(cfg, &mut reference, &mut crate::numerics::rng::rng(0))?;
    for (_, p) in reference.iter() {
        match store.by_name(&p.name) {
            None => {
                return Err(Error::shape(format!("missing encoder parameter {}", p.name)));
            }
            Some(t) if t.shape() != p.value.shape() => {
                return Err(Error::shape(format!(
                    "{}: expected {:?}, found {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Two stride-(2,2) convolutions with ReLU, then a linear fold of channels × frequency into `model_dim`.
pub fn subsample(fwd: &mut Fwd, cfg: &ConformerConfig, spec: &Spectrogram) -> Result<Var> {
    let t = spec.num_frames();
    if t < 4 {
        return Err(Error::contract(format!("subsampling needs at least 4 frames, got {t}")));
    }
    let x = fwd.constant(spec.frames.clone().reshape(vec![1, t, NUM_MEL])?);
    let (w1, b1) = (fwd.p("encoder.subsample.conv1.w")?, fwd.p("encoder.subsample.conv1.b")?);
    let h = fwd.tape.conv2d(x, w1, b1, 2, 1)?;
    let h = fwd.tape.relu(h);
    let (w2, b2) = (fwd.p("encoder.subsample.conv2.w")?, fwd.p("encoder.subsample.conv2.b")?);
    let h = fwd.tape.conv2d(h, w2, b2, 2, 1)?;
    let h = fwd.tape.relu(h);
    let shape = fwd.tape.shape(h).to_vec();
    let (c, tp, f) = (shape[0], shape[1], shape[2]);
    debug_assert_eq!(c, cfg.subsample_channels);
    // [c, t', f] -> [t', c·f]
    let mut index = Vec::with_capacity(c * tp * f);
    for ti in 0..tp {
        for ci in 0..c {
            for fi in 0..f {
                index.push((ci * tp + ti) * f + fi);
            }
        }
    }
    let flat = fwd.tape.gather(h, index, vec![tp, c * f])?;
    fwd.linear(flat, "encoder.subsample.proj")
}

/// Pre-softmax attention scores, one `[t, t]` matrix per head.
///
/// `x` is the (already normalised) attention input and `positions` the
/// absolute index of each row. With relative attention the scores add
/// content and position terms over learned projections of sinusoidal
/// encodings of `positions[i] - positions[j]`, so they depend on position
/// differences only.
pub fn attention_scores(
    fwd: &mut Fwd,
    cfg: &ConformerConfig,
    layer: usize,
    x: Var,
    positions: &[i64],
) -> Result<(Vec<Var>, Var)> {
    let b = block(layer);
    let t = fwd.tape.shape(x)[0];
    if positions.len() != t {
        return Err(Error::shape(format!("{} positions for {t} rows", positions.len())));
    }
    let (h, dh) = (cfg.attention_heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let q = fwd.linear(x, &format!("{b}.mhsa.q"))?;
    let k = fwd.linear(x, &format!("{b}.mhsa.k"))?;
    let v = fwd.linear(x, &format!("{b}.mhsa.v"))?;

    let rel = if cfg.relative_attention {
        let mut offsets: BTreeMap<i64, usize> = BTreeMap::new();
        for &pi in positions {
            for &pj in positions {
                offsets.entry(pi - pj).or_insert(0);
            }
        }
        for (i, slot) in offsets.values_mut().enumerate() {
            *slot = i;
        }
        let rel_pos: Vec<f64> = offsets.keys().map(|&o| o as f64).collect();
        let table = fwd.constant(sinusoid_table(&rel_pos, cfg.model_dim));
        let wr = fwd.p(&format!("{b}.mhsa.pos.w"))?;
        let p = fwd.tape.matmul(table, wr)?;
        let cb = fwd.p(&format!("{b}.mhsa.content_bias"))?;
        let pb = fwd.p(&format!("{b}.mhsa.pos_bias"))?;
        let cb = fwd.tape.reshape(cb, vec![1, cfg.model_dim])?;
        let pb = fwd.tape.reshape(pb, vec![1, cfg.model_dim])?;
        Some((p, cb, pb, offsets))
    } else {
        None
    };

    let mut scores = Vec::with_capacity(h);
    for head in 0..h {
        let qh = fwd.tape.slice_cols(q, head * dh, dh)?;
        let kh = fwd.tape.slice_cols(k, head * dh, dh)?;
        let s = match &rel {
            None => fwd.tape.matmul_t(qh, kh)?,
            Some((p, cb, pb, offsets)) => {
                let cbh = fwd.tape.slice_cols(*cb, head * dh, dh)?;
                let pbh = fwd.tape.slice_cols(*pb, head * dh, dh)?;
                let qc = fwd.tape.add_bias(qh, cbh)?;
                let content = fwd.tape.matmul_t(qc, kh)?;
                let qp = fwd.tape.add_bias(qh, pbh)?;
                let ph = fwd.tape.slice_cols(*p, head * dh, dh)?;
                let full = fwd.tape.matmul_t(qp, ph)?;
                let n_rel = offsets.len();
                let mut index = Vec::with_capacity(t * t);
                for (i, &pi) in positions.iter().enumerate() {
                    for &pj in positions {
                        index.push(i * n_rel + offsets[&(pi - pj)]);
                    }
                }
                let pos = fwd.tape.gather(full, index, vec![t, t])?;
                fwd.tape.add(content, pos)?
            }
        };
        scores.push(fwd.tape.scale(s, scale));
    }
    Ok((scores, v))
}

fn feed_forward(fwd: &mut Fwd, x: Var, prefix: &str) -> Result<Var> {
    let h = fwd.layer_norm(x, &format!("{prefix}.ln"))?;
    let h = fwd.linear(h, &format!("{prefix}.in"))?;
    let h = fwd.tape.swish(h);
    let h = fwd.drop(h);
    let h = fwd.linear(h, &format!("{prefix}.out"))?;
    let h = fwd.drop(h);
    let h = fwd.tape.scale(h, 0.5);
    fwd.tape.add(x, h)
}

fn self_attention(fwd: &mut Fwd, cfg: &ConformerConfig, layer: usize, x: Var) -> Result<Var> {
    let b = block(layer);
    let t = fwd.tape.shape(x)[0];
    let h = fwd.layer_norm(x, &format!("{b}.mhsa.ln"))?;
    let positions: Vec<i64> = (0..t as i64).collect();
    let (scores, v) = attention_scores(fwd, cfg, layer, h, &positions)?;
    let dh = cfg.head_dim();
    let mut heads = Vec::with_capacity(scores.len());
    for (head, s) in scores.into_iter().enumerate() {
        let a = fwd.tape.softmax_rows(s)?;
        let vh = fwd.tape.slice_cols(v, head * dh, dh)?;
        heads.push(fwd.tape.matmul(a, vh)?);
    }
    let cat = fwd.tape.concat_cols(&heads)?;
    let o = fwd.linear(cat, &format!("{b}.mhsa.o"))?;
    let o = fwd.drop(o);
    fwd.tape.add(x, o)
}

fn conv_module(fwd: &mut Fwd, layer: usize, x: Var) -> Result<Var> {
    let b = block(layer);
    let h = fwd.layer_norm(x, &format!("{b}.conv.ln"))?;
    let h = fwd.linear(h, &format!("{b}.conv.pw_in"))?;
    let h = fwd.tape.glu(h)?;
    let w = fwd.p(&format!("{b}.conv.dw.w"))?;
    let bias = fwd.p(&format!("{b}.conv.dw.b"))?;
    let h = fwd.tape.depthwise_conv1d(h, w, bias)?;
    let h = fwd.layer_norm(h, &format!("{b}.conv.norm"))?;
    let h = fwd.tape.swish(h);
    let h = fwd.linear(h, &format!("{b}.conv.pw_out"))?;
    let h = fwd.drop(h);
    fwd.tape.add(x, h)
}

pub fn conformer_block(fwd: &mut Fwd, cfg: &ConformerConfig, layer: usize, x: Var) -> Result<Var> {
    let b = block(layer);
    let x = feed_forward(fwd, x, &format!("{b}.ff1"))?;
    let x = self_attention(fwd, cfg, layer, x)?;
    let x = conv_module(fwd, layer, x)?;
    let x = feed_forward(fwd, x, &format!("{b}.ff2"))?;
    fwd.layer_norm(x, &format!("{b}.ln_out"))
}

/// Runs the stack over subsampled `features`, optionally replacing the
/// rows flagged in `mask` with `mask_embedding` first. Returns one var per
/// layer index −1..=num_layers.
pub fn encode_features(
    fwd: &mut Fwd,
    cfg: &ConformerConfig,
    features: Var,
    mask: Option<(&[bool], Var)>,
) -> Result<Vec<Var>> {
    let shape = fwd.tape.shape(features).to_vec();
    if shape.len() != 2 || shape[1] != cfg.model_dim {
        return Err(Error::shape(format!(
            "encoder input {shape:?} does not match model_dim {}",
            cfg.model_dim
        )));
    }
    let t = shape[0];
    let mut x = features;
    if let Some((rows, emb)) = mask {
        x = fwd.tape.replace_rows(x, emb, rows.to_vec())?;
    }
    if !cfg.relative_attention {
        let pos: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let pe = fwd.constant(sinusoid_table(&pos, cfg.model_dim));
        x = fwd.tape.add(x, pe)?;
    }
    let mut acts = Vec::with_capacity(cfg.num_layers + 2);
    acts.push(x);
    x = fwd.drop(x);
    for layer in 0..cfg.num_layers {
        x = conformer_block(fwd, cfg, layer, x)?;
        acts.push(x);
    }
    let out = fwd.linear(x, "encoder.proj")?;
    acts.push(out);
    Ok(acts)
}

/// Per-layer encoder outputs, indexed −1 (input embedding) through
/// `num_layers` (projection output). Indices 0..num_layers−1 are block outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivations {
    layers: Vec<Tensor>,
}

impl LayerActivations {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::shape("need at least the embedding and output layers"));
        }
        let s = layers[0].shape().to_vec();
        if layers.iter().any(|l| l.shape() != s.as_slice()) {
            return Err(Error::shape("layer activations disagree in shape"));
        }
        Ok(Self { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len() - 2
    }

    /// Layer indices in order: −1, 0, …, num_layers.
    pub fn indices(&self) -> impl Iterator<Item = i64> {
        -1..=self.num_layers() as i64
    }

    pub fn layer(&self, index: i64) -> Result<&Tensor> {
        let i = index + 1;
        if i < 0 || i as usize >= self.layers.len() {
            return Err(Error::contract(format!(
                "layer {index} outside -1..={}",
                self.num_layers()
            )));
        }
        Ok(&self.layers[i as usize])
    }

    pub fn output(&self) -> &Tensor {
        self.layers.last().expect("non-empty")
    }

    pub fn frames(&self) -> usize {
        self.layers[0].rows()
    }
}

/// Deterministic inference over one spectrogram.
pub fn encode(cfg: &ConformerConfig, store: &ParamStore, spec: &Spectrogram) -> Result<LayerActivations> {
    let mut tape = Tape::new();
    let mut fwd = Fwd::eval(&mut tape, store);
    let feats = subsample(&mut fwd, cfg, spec)?;
    let vars = encode_features(&mut fwd, cfg, feats, None)?;
    LayerActivations::new(vars.iter().map(|&v| tape.value(v).clone()).collect())
}

pub fn encode_batch(
    cfg: &ConformerConfig,
    store: &ParamStore,
    batch: &[Spectrogram],
) -> Result<Vec<LayerActivations>> {
    batch.iter().map(|s| encode(cfg, store, s)).collect()
}

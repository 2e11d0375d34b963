//! Toy transformer-transducer.
//!
//! Frames (optionally with a language one-hot appended) pass through two
//! stride-2 convolutions and a linear map, a relative-position transformer
//! encoder, and a joint network combining encoder frames with the states of
//! a single-layer gated recurrent label predictor.

mod params;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use params::{layout, Bound, ParamVector, SectionSpec};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::synth::Utterance;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub num_languages: usize,
    pub use_lang_id: bool,
    pub conv_channels: usize,
    pub num_blocks: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub rel_clip: usize,
    pub predictor_dim: usize,
    /// Output labels, excluding blank.
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 8,
            num_languages: 6,
            use_lang_id: true,
            conv_channels: 16,
            num_blocks: 2,
            model_dim: 16,
            num_heads: 2,
            ff_dim: 32,
            rel_clip: 8,
            predictor_dim: 16,
            vocab_size: 6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("num_languages", self.num_languages),
            ("conv_channels", self.conv_channels),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ff_dim", self.ff_dim),
            ("rel_clip", self.rel_clip),
            ("predictor_dim", self.predictor_dim),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::input(format!("model config `{name}` must be at least 1")));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::input(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.vocab_size >= u16::MAX as usize {
            return Err(Error::input("vocab_size must fit in u16"));
        }
        Ok(())
    }

    /// Width of featurized frames.
    pub fn input_dim(&self) -> usize {
        self.feature_dim + if self.use_lang_id { self.num_languages } else { 0 }
    }

    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    /// Encoder length after the two stride-2 convolutions.
    pub fn subsampled_len(frames: usize) -> usize {
        frames.div_ceil(4)
    }
}

/// Encoder context vectors, `T' x model_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub context: Tensor,
}

/// Appends the language one-hot to every frame when `use_lang_id` is set.
pub fn featurize(frames: &Tensor, lang: usize, cfg: &ModelConfig) -> Result<Tensor> {
    if lang >= cfg.num_languages {
        return Err(Error::input(format!("language {lang} out of range for {} languages", cfg.num_languages)));
    }
    if frames.shape().len() != 2 || frames.cols() != cfg.feature_dim {
        return Err(Error::shape(
            "featurize",
            format!("frames {:?} for feature_dim {}", frames.shape(), cfg.feature_dim),
        ));
    }
    if !cfg.use_lang_id {
        return Ok(frames.clone());
    }
    let width = cfg.input_dim();
    let mut data = Vec::with_capacity(frames.rows() * width);
    for t in 0..frames.rows() {
        data.extend_from_slice(frames.row(t));
        data.extend((0..cfg.num_languages).map(|l| if l == lang { 1.0 } else { 0.0 }));
    }
    Tensor::new(vec![frames.rows(), width], data)
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn conv_stride2(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let cols = g.im2col(x, 3, 2)?;
    let y = linear(g, cols, w, b)?;
    g.gelu(y)
}

/// Two stride-2 convolutions (kernel 3) with GELU, then a linear map to
/// `model_dim`. Output length is `ceil(T / 4)`.
pub fn subsample(g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
    let h = conv_stride2(g, x, p.get("sub.conv1.w"), p.get("sub.conv1.b"))?;
    let h = conv_stride2(g, h, p.get("sub.conv2.w"), p.get("sub.conv2.b"))?;
    linear(g, h, p.get("sub.proj.w"), p.get("sub.proj.b"))
}

fn attention(g: &mut Graph, p: &Bound, cfg: &ModelConfig, block: usize, x: Var) -> Result<Var> {
    let len = g.shape(x)[0];
    let dh = cfg.model_dim / cfg.num_heads;
    let name = |w: &str| format!("enc.{block}.attn.{w}");
    let q = g.matmul(x, p.get(&name("wq")))?;
    let k = g.matmul(x, p.get(&name("wk")))?;
    let v = g.matmul(x, p.get(&name("wv")))?;
    let rel = p.get(&name("rel"));
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt())?;
        let table = g.gather_rows(rel, &[h])?;
        let bias = g.rel_bias(table, len, cfg.rel_clip)?;
        let logits = g.add(logits, bias)?;
        let weights = g.softmax(logits)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    g.matmul(joined, p.get(&name("wo")))
}

fn add_norm(g: &mut Graph, x: Var, y: Var, gain: Var, bias: Var) -> Result<Var> {
    let s = g.add(x, y)?;
    let n = g.layer_norm(s, LN_EPS)?;
    let n = g.mul_row(n, gain)?;
    g.add_row(n, bias)
}

fn encoder_block(g: &mut Graph, p: &Bound, cfg: &ModelConfig, block: usize, x: Var) -> Result<Var> {
    let name = |w: &str| format!("enc.{block}.{w}");
    let a = attention(g, p, cfg, block, x)?;
    let x = add_norm(g, x, a, p.get(&name("ln1.g")), p.get(&name("ln1.b")))?;
    let h = linear(g, x, p.get(&name("ff1.w")), p.get(&name("ff1.b")))?;
    let h = g.gelu(h)?;
    let h = linear(g, h, p.get(&name("ff2.w")), p.get(&name("ff2.b")))?;
    add_norm(g, x, h, p.get(&name("ln2.g")), p.get(&name("ln2.b")))
}

/// Relative-position transformer encoder. Rows listed in `mask` are replaced
/// by the learned mask vector before the first block.
pub fn encode(g: &mut Graph, p: &Bound, cfg: &ModelConfig, latent: Var, mask: Option<&[usize]>) -> Result<Var> {
    let len = g.shape(latent)[0];
    let mut x = latent;
    if let Some(mask) = mask {
        if let Some(&bad) = mask.iter().find(|&&i| i >= len) {
            return Err(Error::input(format!("mask position {bad} outside encoder length {len}")));
        }
        if !mask.is_empty() {
            x = g.replace_rows(x, p.get("enc.mask"), mask)?;
        }
    }
    for b in 0..cfg.num_blocks {
        x = encoder_block(g, p, cfg, b, x)?;
    }
    Ok(x)
}

/// One gated recurrent update of the label predictor.
pub(crate) fn gru_step(g: &mut Graph, p: &Bound, x: Var, h: Var) -> Result<Var> {
    let gate = |g: &mut Graph, which: &str, h_in: Var| -> Result<Var> {
        let a = g.matmul(x, p.get(&format!("pred.w{which}")))?;
        let b = g.matmul(h_in, p.get(&format!("pred.u{which}")))?;
        let s = g.add(a, b)?;
        g.add_row(s, p.get(&format!("pred.b{which}")))
    };
    let z = gate(g, "z", h)?;
    let z = g.sigmoid(z)?;
    let r = gate(g, "r", h)?;
    let r = g.sigmoid(r)?;
    let rh = g.mul(r, h)?;
    let n = gate(g, "n", rh)?;
    let n = g.tanh(n)?;
    // h' = (1 - z) * n + z * h = n + z * (h - n)
    let diff = g.sub(h, n)?;
    let zd = g.mul(z, diff)?;
    g.add(n, zd)
}

/// Predictor states after consuming blank-start, y1, ..., yU: `[U + 1, predictor_dim]`.
pub fn predictor(g: &mut Graph, p: &Bound, cfg: &ModelConfig, labels: &[usize]) -> Result<Var> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.vocab_size) {
        return Err(Error::input(format!("label {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let inputs: Vec<usize> = std::iter::once(cfg.blank()).chain(labels.iter().copied()).collect();
    let embedded = g.gather_rows(p.get("pred.embed"), &inputs)?;
    let mut h = g.constant(Tensor::zeros(&[1, cfg.predictor_dim]));
    let mut states = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let x = g.gather_rows(embedded, &[i])?;
        h = gru_step(g, p, x, h)?;
        states.push(h);
    }
    if states.len() == 1 {
        Ok(states[0])
    } else {
        g.concat_rows(&states)
    }
}

/// Joint network logits for every (frame, predictor state) pair,
/// `[T' * (U + 1), V + 1]` with row index `t * (U + 1) + u`.
pub fn joint(g: &mut Graph, p: &Bound, enc: Var, pred: Var) -> Result<Var> {
    let e = g.matmul(enc, p.get("joint.enc.w"))?;
    let q = g.matmul(pred, p.get("joint.pred.w"))?;
    let h = g.outer_add(e, q)?;
    let h = g.add_row(h, p.get("joint.b"))?;
    let h = g.tanh(h)?;
    linear(g, h, p.get("joint.out.w"), p.get("joint.out.b"))
}

/// Logit lattice `[T', U + 1, V + 1]`; the blank symbol is index `V`.
pub fn transducer_forward(g: &mut Graph, p: &Bound, cfg: &ModelConfig, enc: Var, labels: &[usize]) -> Result<Var> {
    let frames = g.shape(enc)[0];
    let pred = predictor(g, p, cfg, labels)?;
    let logits = joint(g, p, enc, pred)?;
    g.reshape(logits, &[frames, labels.len() + 1, cfg.vocab_size + 1])
}

/// Transducer loss of one utterance through the full stack.
pub fn utterance_loss(g: &mut Graph, p: &Bound, cfg: &ModelConfig, utt: &Utterance) -> Result<Var> {
    let x = featurize(&utt.frames, utt.language, cfg)?;
    let x = g.constant(x);
    let latent = subsample(g, p, x)?;
    let enc = encode(g, p, cfg, latent, None)?;
    let lattice = transducer_forward(g, p, cfg, enc, &utt.labels)?;
    let logp = g.log_softmax(lattice)?;
    let frames = g.shape(enc)[0];
    g.rnnt_loss(logp, frames, &utt.labels)
}

/// Loss and flat gradient of one utterance.
pub fn utterance_loss_grad(params: &ParamVector, cfg: &ModelConfig, utt: &Utterance) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let loss = utterance_loss(&mut g, &p, cfg, utt)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    Ok((value, params.collect_grad(&p, &grads)))
}

/// Mean loss and gradient over a batch. Utterances are evaluated in
/// parallel and reduced in batch order, so results are bit-reproducible.
pub fn batch_loss_grad(params: &ParamVector, cfg: &ModelConfig, batch: &[&Utterance]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let parts: Vec<(f64, Vec<f64>)> =
        batch.par_iter().map(|u| utterance_loss_grad(params, cfg, u)).collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for (l, g) in parts {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    grad.iter_mut().for_each(|x| *x *= scale);
    Ok((loss * scale, grad))
}

/// Mean loss over utterances without building gradients.
pub fn mean_loss(params: &ParamVector, cfg: &ModelConfig, utts: &[&Utterance]) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::input("no utterances to evaluate"));
    }
    let losses: Vec<f64> = utts
        .par_iter()
        .map(|u| {
            let mut g = Graph::new();
            let p = params.bind(&mut g, false);
            let loss = utterance_loss(&mut g, &p, cfg, u)?;
            Ok(g.value(loss).item())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Encoder context for one utterance (no masking).
pub fn encode_utterance(params: &ParamVector, cfg: &ModelConfig, utt: &Utterance) -> Result<EncoderOutput> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(featurize(&utt.frames, utt.language, cfg)?);
    let latent = subsample(&mut g, &p, x)?;
    let enc = encode(&mut g, &p, cfg, latent, None)?;
    Ok(EncoderOutput { context: g.value(enc).clone() })
}

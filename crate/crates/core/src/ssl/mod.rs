//! Masked contrastive pretraining of the subsampler and encoder.
//!
//! Latents after subsampling are masked in spans; the encoder sees the masked
//! sequence and must pick out, at every masked step, the linear target of the
//! true latent among targets drawn from other steps of the same utterance.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{Clock, MetricsWriter, Profile};
use crate::model::{encode, featurize, subsample, Bound, ModelConfig, ParamVector};
use crate::optim::{warmup_linear, Adam, AdamConfig};
use crate::seed;
use crate::synth::Utterance;
use crate::tensor::Tensor;

/// Norm floor of the cosine similarity.
pub const COSINE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    pub mask_prob: f64,
    pub span_len: usize,
    /// Force one random span when sampling selects none.
    pub force_min_one: bool,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec { mask_prob: 0.065, span_len: 10, force_min_one: true }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) || self.span_len == 0 {
            return Err(Error::input(format!("invalid mask spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub num_negatives: usize,
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { num_negatives: 10, temperature: 0.1 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_negatives == 0 || !(self.temperature > 0.0) {
            return Err(Error::input(format!("invalid contrastive config {self:?}")));
        }
        Ok(())
    }
}

/// Every step starts a span with probability `mask_prob`; a span covers
/// `span_len` steps, clipped at the end. Returns sorted distinct indices.
pub fn sample_mask(len: usize, spec: &MaskSpec, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    spec.validate()?;
    if len == 0 {
        return Err(Error::input("cannot mask an empty sequence"));
    }
    let mut masked = vec![false; len];
    let mut any = false;
    for i in 0..len {
        if rng.random_bool(spec.mask_prob) {
            any = true;
            masked[i..(i + spec.span_len).min(len)].iter_mut().for_each(|m| *m = true);
        }
    }
    if !any && spec.force_min_one {
        let i = rng.random_range(0..len);
        masked[i..(i + spec.span_len).min(len)].iter_mut().for_each(|m| *m = true);
    }
    Ok((0..len).filter(|&i| masked[i]).collect())
}

/// Negative target positions for every masked step.
///
/// Other masked steps are preferred; with fewer than `k` of them any other
/// step qualifies. Draws are without replacement when the pool holds at
/// least `k` entries, with replacement otherwise, and empty when the
/// sequence has a single step.
pub fn sample_negatives(len: usize, mask: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    mask.iter()
        .map(|&t| {
            let others: Vec<usize> = mask.iter().copied().filter(|&m| m != t).collect();
            let pool = if others.len() >= k { others } else { (0..len).filter(|&i| i != t).collect() };
            if pool.is_empty() {
                Vec::new()
            } else if pool.len() >= k {
                index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
            } else {
                (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
            }
        })
        .collect()
}

fn is_zero_row(t: &Tensor, i: usize) -> bool {
    t.row(i).iter().all(|&x| x == 0.0)
}

/// Mean over masked steps of
/// `-log softmax_j(cos(c_t, q_j) / temperature)` at the positive `j = t`,
/// with candidates `{t} + negatives[t]`.
///
/// `context` and `targets` are `[T', D]`. A masked step without negatives
/// has a single candidate and contributes exactly zero.
pub fn contrastive_loss(
    g: &mut Graph,
    context: Var,
    targets: Var,
    mask: &[usize],
    negatives: &[Vec<usize>],
    temperature: f64,
) -> Result<Var> {
    if mask.is_empty() || negatives.len() != mask.len() {
        return Err(Error::input(format!("{} masked steps with {} negative lists", mask.len(), negatives.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::input(format!("temperature {temperature} must be positive")));
    }
    let (c, q) = (g.value(context), g.value(targets));
    if c.shape() != q.shape() || c.shape().len() != 2 {
        return Err(Error::shape("contrastive_loss", format!("{:?} vs {:?}", c.shape(), q.shape())));
    }
    let len = c.rows();
    for (&t, negs) in mask.iter().zip(negatives) {
        if t >= len || negs.iter().any(|&j| j >= len) {
            return Err(Error::input(format!("masked step {t} or a negative is outside {len} steps")));
        }
        if is_zero_row(c, t) && std::iter::once(&t).chain(negs).any(|&j| is_zero_row(q, j)) {
            return Err(Error::numeric(format!("cosine similarity of two zero vectors at step {t}")));
        }
    }
    if negatives.iter().all(Vec::is_empty) {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    if negatives.iter().any(Vec::is_empty) {
        return Err(Error::input("negative lists must all have the same length"));
    }
    let candidates: Vec<Vec<usize>> =
        mask.iter().zip(negatives).map(|(&t, n)| std::iter::once(t).chain(n.iter().copied()).collect()).collect();
    let cm = g.gather_rows(context, mask)?;
    let cn = g.row_normalize(cm, COSINE_FLOOR)?;
    let qn = g.row_normalize(targets, COSINE_FLOOR)?;
    let qt = g.transpose(qn)?;
    let sims = g.matmul(cn, qt)?;
    let picked = g.gather_per_row(sims, &candidates)?;
    let logits = g.scale(picked, 1.0 / temperature)?;
    let logp = g.log_softmax(logits)?;
    let positive = g.slice_cols(logp, 0, 1)?;
    let mean = g.mean(positive)?;
    g.neg(mean)
}

/// [`contrastive_loss`] on plain tensors.
pub fn contrastive_loss_value(
    context: &Tensor,
    targets: &Tensor,
    mask: &[usize],
    negatives: &[Vec<usize>],
    temperature: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let c = g.constant(context.clone());
    let q = g.constant(targets.clone());
    let loss = contrastive_loss(&mut g, c, q, mask, negatives, temperature)?;
    Ok(g.value(loss).item())
}

/// Contrastive loss of one utterance plus its mask statistics.
pub struct SslLoss {
    pub loss: Var,
    pub masked: usize,
    pub steps: usize,
}

pub fn utterance_ssl_loss(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    utt: &Utterance,
    mask_spec: &MaskSpec,
    contrastive: &ContrastiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SslLoss> {
    let x = g.constant(featurize(&utt.frames, utt.language, cfg)?);
    let latent = subsample(g, p, x)?;
    let len = g.shape(latent)[0];
    let mask = sample_mask(len, mask_spec, rng)?;
    let negatives = sample_negatives(len, &mask, contrastive.num_negatives, rng);
    let t = g.matmul(latent, p.get("ssl.target.w"))?;
    let targets = g.add_row(t, p.get("ssl.target.b"))?;
    let context = encode(g, p, cfg, latent, Some(&mask))?;
    let loss = contrastive_loss(g, context, targets, &mask, &negatives, contrastive.temperature)?;
    Ok(SslLoss { loss, masked: mask.len(), steps: len })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate of the warm-up / linear-decay schedule.
    pub lr: f64,
    /// Fraction of `steps` spent warming up.
    pub warmup_frac: f64,
    pub mask: MaskSpec,
    pub contrastive: ContrastiveConfig,
    pub adam: AdamConfig,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            steps: 500,
            batch_size: 8,
            lr: 5e-4,
            warmup_frac: 0.05,
            // Encoder sequences here are ~10 frames long; a span of 10 would
            // mask whole utterances.
            mask: MaskSpec { mask_prob: 0.2, span_len: 2, force_min_one: true },
            contrastive: ContrastiveConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub masked_frac: f64,
    pub wall_ms: u64,
}

struct BatchResult {
    loss: f64,
    grad: Vec<f64>,
    masked_frac: f64,
}

fn ssl_batch(
    params: &ParamVector,
    model: &ModelConfig,
    cfg: &SslConfig,
    batch: &[&Utterance],
    seed: u64,
    step: usize,
) -> Result<BatchResult> {
    let parts: Vec<(f64, Vec<f64>, f64)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, utt)| {
            let mut rng = seed::rng(seed, &format!("mask/{step}/{i}"));
            let mut g = Graph::new();
            let p = params.bind(&mut g, true);
            let out = utterance_ssl_loss(&mut g, &p, model, utt, &cfg.mask, &cfg.contrastive, &mut rng)?;
            let value = g.value(out.loss).item();
            let grads = g.backward(out.loss)?;
            Ok((value, params.collect_grad(&p, &grads), out.masked as f64 / out.steps as f64))
        })
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut res = BatchResult { loss: 0.0, grad: vec![0.0; params.len()], masked_frac: 0.0 };
    for (l, gr, f) in parts {
        res.loss += l / n;
        res.masked_frac += f / n;
        res.grad.iter_mut().zip(&gr).for_each(|(a, b)| *a += b / n);
    }
    Ok(res)
}

/// Adam pretraining with a linear warm-up and linear decay to zero.
///
/// Batches are drawn uniformly from `data` (labels are ignored). Returns the
/// updated checkpoint; zero steps returns `init` unchanged.
pub fn run_ssl_pretrain(
    init: &Checkpoint,
    data: &[&Utterance],
    cfg: &SslConfig,
    seed: u64,
    profile: Profile,
    metrics: &mut MetricsWriter,
) -> Result<Checkpoint> {
    if data.is_empty() {
        return Err(Error::input("SSL pretraining needs a non-empty corpus"));
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) || !(0.0..=1.0).contains(&cfg.warmup_frac) {
        return Err(Error::input(format!("invalid SSL settings {cfg:?}")));
    }
    cfg.mask.validate()?;
    cfg.contrastive.validate()?;
    let mut out = init.clone();
    let mut adam = Adam::new(out.params.len(), cfg.adam)?;
    let mut batch_rng = seed::rng(seed, "batches");
    let warmup = (cfg.warmup_frac * cfg.steps as f64).round() as usize;
    let clock = Clock::start(profile);
    for step in 0..cfg.steps {
        let batch: Vec<&Utterance> = (0..cfg.batch_size).map(|_| data[batch_rng.random_range(0..data.len())]).collect();
        let res = ssl_batch(&out.params, &init.config, cfg, &batch, seed, step)?;
        if !res.loss.is_finite() {
            return Err(Error::numeric(format!("SSL loss became {} at step {step}", res.loss)));
        }
        let lr = warmup_linear(cfg.lr, step, warmup, cfg.steps);
        adam.step(out.params.flat_mut(), &res.grad, lr)?;
        metrics.write(&SslRecord {
            step,
            loss: res.loss,
            lr,
            masked_frac: res.masked_frac,
            wall_ms: clock.elapsed_ms(),
        })?;
    }
    out.step += cfg.steps as u64;
    Ok(out)
}

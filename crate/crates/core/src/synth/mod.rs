//! Synthetic multi-language transduction corpora.
//!
//! Each language maps the shared label set onto its own orthonormal
//! codebook of frame vectors. An utterance is a label sequence rendered as
//! runs of noisy codebook rows.

mod io;
mod sampler;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use io::{read_corpus, write_corpus, CorpusManifest, CORPUS_MAGIC, CORPUS_VERSION, GENERATOR_VERSION};
pub use sampler::{sampling_probabilities, BalancedSampler};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Parameters shared by every language of a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub num_languages: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub noise: f64,
    /// Every language reuses the base codebook with a language-specific
    /// cyclic shift of its rows, so frames alone cannot identify labels.
    pub conflict: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthLanguage {
    pub index: usize,
    /// `vocab_size x feature_dim`, orthonormal rows.
    pub codebook: Tensor,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub language: usize,
    pub labels: Vec<usize>,
    /// `T x feature_dim`
    pub frames: Tensor,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

/// Rows of a matrix orthonormalized through a Householder QR.
fn orthonormal_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(cols, rows, |_, _| StandardNormal.sample(rng));
    let q = m.qr().q();
    q.transpose()
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
    Tensor::new(vec![m.nrows(), m.ncols()], data).expect("matrix dims are positive")
}

pub fn base_codebook(base_seed: u64, spec: &LanguageSpec) -> Result<Tensor> {
    if spec.vocab_size > spec.feature_dim {
        return Err(Error::input(format!(
            "{} labels cannot have orthonormal codewords in {} dimensions",
            spec.vocab_size, spec.feature_dim
        )));
    }
    let mut rng = seed::rng(base_seed, "codebook/base");
    Ok(to_tensor(&orthonormal_rows(spec.vocab_size, spec.feature_dim, &mut rng)))
}

/// Language `index`'s codebook: the base codebook for language 0, otherwise
/// a seeded rotation of it (or a row permutation in conflict mode).
pub fn make_language(base_seed: u64, index: usize, spec: &LanguageSpec) -> Result<SynthLanguage> {
    if index >= spec.num_languages {
        return Err(Error::input(format!("language {index} out of range for {}", spec.num_languages)));
    }
    if spec.conflict && spec.num_languages > spec.vocab_size {
        return Err(Error::input(format!(
            "conflict mode needs at least as many labels ({}) as languages ({})",
            spec.vocab_size, spec.num_languages
        )));
    }
    let base = base_codebook(base_seed, spec)?;
    let codebook = if index == 0 {
        base
    } else if spec.conflict {
        let v = spec.vocab_size;
        let rows: Vec<Vec<f64>> = (0..v).map(|r| base.row((r + index) % v).to_vec()).collect();
        Tensor::from_rows(&rows)?
    } else {
        let mut rng = seed::rng(base_seed, &format!("codebook/rotation/{index}"));
        let rot = orthonormal_rows(spec.feature_dim, spec.feature_dim, &mut rng);
        let b = DMatrix::from_row_slice(spec.vocab_size, spec.feature_dim, base.data());
        to_tensor(&(b * rot))
    };
    Ok(SynthLanguage { index, codebook, noise: spec.noise })
}

/// Draws `U` uniform labels and renders each as `r` noisy copies of its
/// codeword, `r` uniform in `repeats` (inclusive). Frames are rounded to
/// `f32` so a write/read cycle is lossless.
pub fn sample_utterance(
    lang: &SynthLanguage,
    label_range: (usize, usize),
    repeats: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<Utterance> {
    let (lo, hi) = label_range;
    if lo < 1 || hi > 12 || lo > hi {
        return Err(Error::input(format!("label count range [{lo}, {hi}] must lie within [1, 12]")));
    }
    if repeats.0 < 4 || repeats.0 > repeats.1 {
        return Err(Error::input(format!("repeat range [{}, {}] must start at 4 or more", repeats.0, repeats.1)));
    }
    let vocab = lang.codebook.rows();
    let d = lang.codebook.cols();
    let u = rng.random_range(lo..=hi);
    let labels: Vec<usize> = (0..u).map(|_| rng.random_range(0..vocab)).collect();
    let mut data = Vec::new();
    for &y in &labels {
        let r = rng.random_range(repeats.0..=repeats.1);
        for _ in 0..r {
            for &c in lang.codebook.row(y) {
                let noise: f64 = StandardNormal.sample(rng);
                data.push((c + lang.noise * noise) as f32 as f64);
            }
        }
    }
    let t = data.len() / d;
    Ok(Utterance { id: String::new(), language: lang.index, labels, frames: Tensor::new(vec![t, d], data)? })
}

/// Everything needed to regenerate a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub language: LanguageSpec,
    pub counts: Vec<usize>,
    pub label_range: (usize, usize),
    pub repeat_range: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub feature_dim: usize,
    pub num_languages: usize,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_languages];
        for u in &self.utterances {
            c[u.language] += 1;
        }
        c
    }

    pub fn by_language(&self) -> Vec<Vec<&Utterance>> {
        let mut out = vec![Vec::new(); self.num_languages];
        for u in &self.utterances {
            out[u.language].push(u);
        }
        out
    }

    /// Deterministic 90/10 train/validation split keyed on a hash of
    /// `(salt, id)`.
    pub fn split(&self, salt: u64) -> (Vec<&Utterance>, Vec<&Utterance>) {
        self.utterances.iter().partition(|u| !is_validation(salt, &u.id))
    }

    /// Keeps the first `ceil(fraction * n)` utterances of every language.
    pub fn fraction(&self, fraction: f64) -> Result<Corpus> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::input(format!("corpus fraction {fraction} must lie in (0, 1]")));
        }
        let keep: Vec<usize> = self.counts().iter().map(|&n| ((n as f64 * fraction).ceil() as usize).max(1)).collect();
        let mut seen = vec![0; self.num_languages];
        let utterances = self
            .utterances
            .iter()
            .filter(|u| {
                seen[u.language] += 1;
                seen[u.language] <= keep[u.language]
            })
            .cloned()
            .collect();
        Ok(Corpus { utterances, ..self.clone_empty() })
    }

    fn clone_empty(&self) -> Corpus {
        Corpus { feature_dim: self.feature_dim, num_languages: self.num_languages, utterances: Vec::new() }
    }
}

/// Generates a corpus and writes it to `dir`; regeneration with the same
/// seeds is byte-identical.
pub fn gen_corpus(
    spec: &CorpusSpec,
    base_seed: u64,
    sample_seed: u64,
    dir: &std::path::Path,
) -> Result<(Corpus, CorpusManifest)> {
    let corpus = generate(spec, base_seed, sample_seed)?;
    let manifest = write_corpus(&corpus, sample_seed, dir)?;
    Ok((corpus, manifest))
}

pub fn is_validation(salt: u64, id: &str) -> bool {
    seed::derive(salt, id).is_multiple_of(10)
}

/// Generates a corpus in memory. Each language draws from its own seeded
/// stream so counts for one language never perturb another.
pub fn generate(spec: &CorpusSpec, base_seed: u64, sample_seed: u64) -> Result<Corpus> {
    let l = spec.language.num_languages;
    if spec.counts.len() != l {
        return Err(Error::input(format!("{} counts given for {l} languages", spec.counts.len())));
    }
    if spec.counts.contains(&0) {
        return Err(Error::input("every language needs at least one utterance"));
    }
    let mut utterances = Vec::with_capacity(spec.counts.iter().sum());
    for (index, &count) in spec.counts.iter().enumerate() {
        let lang = make_language(base_seed, index, &spec.language)?;
        let mut rng = seed::rng(sample_seed, &format!("utterances/{index}"));
        for i in 0..count {
            let mut u = sample_utterance(&lang, spec.label_range, spec.repeat_range, &mut rng)?;
            u.id = format!("l{index}-{i:06}");
            utterances.push(u);
        }
    }
    Ok(Corpus { feature_dim: spec.language.feature_dim, num_languages: l, utterances })
}

#[cfg(test)]
mod tests;

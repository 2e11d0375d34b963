use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leap::LeapConfig;
use crate::metrics::Profile;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::seed;
use crate::ssl::SslConfig;
use crate::synth::{CorpusSpec, LanguageSpec};

/// Utterance counts per language, in the proportions of the reference
/// corpus hours, at desk scale.
pub const DEFAULT_COUNTS: [usize; 6] = [569, 805, 306, 833, 693, 1032];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_languages: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub noise: f64,
    pub conflict: bool,
    /// Training utterances per language; defaults to the first
    /// `num_languages` entries of [`DEFAULT_COUNTS`].
    pub counts: Option<Vec<usize>>,
    /// Test utterances per language.
    pub test_count: usize,
    pub label_range: (usize, usize),
    pub repeat_range: (usize, usize),
    /// Keep this fraction of every language's training data.
    pub fraction: f64,
    /// Read a corpus written by `gen-data` instead of generating one.
    pub dir: Option<PathBuf>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_languages: 4,
            feature_dim: 8,
            vocab_size: 6,
            noise: 0.3,
            conflict: false,
            counts: None,
            test_count: 40,
            label_range: (2, 10),
            repeat_range: (4, 8),
            fraction: 1.0,
            dir: None,
        }
    }
}

impl CorpusConfig {
    pub fn counts(&self) -> Result<Vec<usize>> {
        match &self.counts {
            Some(c) if c.len() == self.num_languages => Ok(c.clone()),
            Some(c) => Err(Error::input(format!("{} counts given for {} languages", c.len(), self.num_languages))),
            None if self.num_languages <= DEFAULT_COUNTS.len() => Ok(DEFAULT_COUNTS[..self.num_languages].to_vec()),
            None => Err(Error::input(format!("no default counts for {} languages", self.num_languages))),
        }
    }

    pub fn language_spec(&self) -> LanguageSpec {
        LanguageSpec {
            num_languages: self.num_languages,
            feature_dim: self.feature_dim,
            vocab_size: self.vocab_size,
            noise: self.noise,
            conflict: self.conflict,
        }
    }

    pub fn train_spec(&self) -> Result<CorpusSpec> {
        Ok(CorpusSpec {
            language: self.language_spec(),
            counts: self.counts()?,
            label_range: self.label_range,
            repeat_range: self.repeat_range,
        })
    }

    pub fn test_spec(&self) -> CorpusSpec {
        CorpusSpec {
            language: self.language_spec(),
            counts: vec![self.test_count; self.num_languages],
            label_range: self.label_range,
            repeat_range: self.repeat_range,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_steps: usize,
    /// Validation cadence in updates.
    pub eval_every: usize,
    /// Stop after this many evaluations without improvement; 0 disables
    /// early stopping.
    pub patience: usize,
    /// Exponent of the balanced language sampler.
    pub sampling_alpha: f64,
    /// Loss above which training counts as diverged.
    pub divergence_limit: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 3e-3,
            weight_decay: 0.01,
            max_steps: 1500,
            eval_every: 50,
            patience: 5,
            sampling_alpha: 0.5,
            divergence_limit: 1e6,
        }
    }
}

impl FinetuneConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig::adamw(self.weight_decay)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub ssl: bool,
    pub leap: bool,
    pub finetune: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages { ssl: true, leap: true, finetune: true }
    }
}

/// The whole experiment in one document. Every stochastic component seeds
/// itself from `seed` and its own label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: Profile,
    pub corpus: CorpusConfig,
    /// Widths and depths; corpus-derived fields are overwritten on resolve.
    pub model: ModelConfig,
    pub ssl: SslConfig,
    pub leap: LeapConfig,
    pub finetune: FinetuneConfig,
    /// Mini-batch size shared by LEAP inner loops and fine-tuning.
    pub batch_size: usize,
    pub stages: Stages,
    pub use_lang_id: bool,
    pub max_symbols_per_frame: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            profile: Profile::Test,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            ssl: SslConfig::default(),
            leap: LeapConfig::default(),
            finetune: FinetuneConfig::default(),
            batch_size: 8,
            stages: Stages::default(),
            use_lang_id: true,
            max_symbols_per_frame: 4,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::input(format!("config: {e}")))?;
        cfg.resolve()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Copies corpus dimensions and the language-ID flag into the model
    /// config and validates everything.
    pub fn resolve(mut self) -> Result<Self> {
        self.model.feature_dim = self.corpus.feature_dim;
        self.model.num_languages = self.corpus.num_languages;
        self.model.vocab_size = self.corpus.vocab_size;
        self.model.use_lang_id = self.use_lang_id;
        self.model.validate()?;
        self.corpus.counts()?;
        self.ssl.mask.validate()?;
        self.ssl.contrastive.validate()?;
        if self.batch_size == 0 {
            return Err(Error::input("batch_size must be at least 1"));
        }
        if self.max_symbols_per_frame == 0 {
            return Err(Error::input("max_symbols_per_frame must be at least 1"));
        }
        if self.finetune.eval_every == 0 {
            return Err(Error::input("finetune.eval_every must be at least 1"));
        }
        if !(self.corpus.fraction > 0.0 && self.corpus.fraction <= 1.0) {
            return Err(Error::input(format!("corpus fraction {} must lie in (0, 1]", self.corpus.fraction)));
        }
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical JSON form (output directory excluded).
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = None;
        Ok(seed::sha256_hex(&serde_json::to_vec(&c)?))
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive(self.seed, stage)
    }
}
